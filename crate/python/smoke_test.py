"""Smoke test for the tokenring Python extension.

Build and install first:
    pip install maturin
    pip install --no-build-isolation -e crates/python
then run:
    python python/smoke_test.py
"""

import json

import tokenring as tr


def test_small_puzzle():
    params = tr.PuzzleParams.from_primes(5, 11, 2)
    assert params.n == 55 and params.phi_n == 40
    puzzle = tr.Puzzle(params, 3, "D1", "on", 1000, key=7)
    assert puzzle.e_k == 43
    result = puzzle.solve()
    assert result["key"] == 7
    assert result["squarings"] == 3
    assert result["solution"] == params.fast_eval(3) == 36
    assert (result["device"], result["state"]) == ("D1", "on")
    again = tr.Puzzle.from_bytes(puzzle.to_bytes())
    assert again.solve()["key"] == 7


def test_trapdoor_matches_squaring():
    params = tr.PuzzleParams(64, seed=3)
    puzzle = tr.Puzzle(params, 5000, "D2", "off", 10, seed=1)
    assert puzzle.solve()["solution"] == params.fast_eval(5000)
    assert pow(params.a, pow(2, 5000), params.n) == params.fast_eval(5000)


def test_schedule():
    sched = tr.Schedule.from_json(
        json.dumps(
            {
                "chains": [
                    [
                        {"device": "D1", "state": "on", "exec_time_ms": 100},
                        {"device": "D3", "state": "on", "exec_time_ms": 300},
                    ],
                    [{"device": "D2", "state": "off", "exec_time_ms": 200}],
                ]
            }
        )
    )
    assert sched.chain() == ["D1", "D2", "D3"]
    assert len(sched.linear_extensions()) == 3
    assert sched.comparable_count() == 2
    assert tr.difficulty(1_000_000.0, 2.0) == 2_000_000


def test_simulation_round_trip():
    config = {
        "duration_ms": 3000,
        "devices": [{"id": "D1"}, {"id": "D2"}, {"id": "D3"}],
        "rings": [{"ring_id": "ring0", "devices": ["D1", "D2", "D3"]}],
        "orders": [
            {
                "at_ms": 10,
                "schedule": {"chains": [[{"device": "D1", "state": "on", "exec_time_ms": 100}]]},
            }
        ],
    }
    result = tr.run_simulation(json.dumps(config), seed=7)
    rounds = result.rounds()
    assert len(rounds) == 3
    assert len({r[5] for r in rounds}) == 1
    assert result.verify()
    summary = json.loads(result.summary_json())
    assert summary["executions"] == 1
    events = result.events()
    report = json.loads(tr.indistinguishability_test(events, events, result.duration_us))
    assert report["passed"] and report["interarrival_ks_stat"] == 0.0


def test_bench():
    report = json.loads(tr.bench(json.dumps({"name": "latency", "n_values": [3, 9], "rounds": 2})))
    latencies = [row["mean_latency_ms"] for row in report["rows"]]
    assert latencies[0] < latencies[1]
    assert tr.sealed_token_len(1024, 64, 3) > 1024


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"ok {name}")
