from tokenring._tokenring import (
    Puzzle,
    PuzzleParams,
    Schedule,
    SimResult,
    bench,
    difficulty,
    indistinguishability_test,
    run_simulation,
    sealed_token_len,
)

__all__ = [
    "Puzzle",
    "PuzzleParams",
    "Schedule",
    "SimResult",
    "bench",
    "difficulty",
    "indistinguishability_test",
    "run_simulation",
    "sealed_token_len",
]
