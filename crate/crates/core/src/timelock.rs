//! RSA time-lock puzzles.
//!
//! A puzzle hides a symmetric key `k` as `E_k = k + a^(2^t) mod n`. Anyone can
//! recover `k` by performing `t` sequential squarings of `a` modulo `n`; the
//! holder of `phi(n)` can reduce the exponent first and evaluate the same
//! value with a single modular exponentiation.

use std::fmt;
use std::time::Instant;

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::command::{Command, CommandDecodeError};
use crate::crypto::{self, NONCE_LEN};

/// Candidates drawn per prime before giving up.
const PRIME_ATTEMPTS: usize = 100_000;
const MILLER_RABIN_ROUNDS: usize = 40;

#[derive(Debug, thiserror::Error)]
pub enum TimelockError {
    #[error("parameter error: {0}")]
    Param(String),
    #[error("difficulty error: {0}")]
    Difficulty(String),
    #[error("key must be smaller than the modulus")]
    KeyOutOfRange,
    #[error("puzzle payload failed authentication")]
    Tamper,
    #[error("malformed puzzle encoding: {0}")]
    Decode(&'static str),
    #[error(transparent)]
    Command(#[from] CommandDecodeError),
}

/// Owner-side puzzle parameters. Only `n` and `a` are ever published.
#[derive(Clone, PartialEq, Eq)]
pub struct PuzzleParams {
    p: BigUint,
    q: BigUint,
    n: BigUint,
    a: BigUint,
    phi_n: BigUint,
}

impl fmt::Debug for PuzzleParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PuzzleParams")
            .field("n", &self.n)
            .field("a", &self.a)
            .finish_non_exhaustive()
    }
}

impl PuzzleParams {
    pub fn from_primes(p: BigUint, q: BigUint, a: BigUint) -> Result<Self, TimelockError> {
        let one = BigUint::one();
        if p == q {
            return Err(TimelockError::Param("p and q must differ".into()));
        }
        if p <= one || q <= one {
            return Err(TimelockError::Param("factors must exceed 1".into()));
        }
        let n = &p * &q;
        let phi_n = (&p - &one) * (&q - &one);
        if a < BigUint::from(2u8) || a >= n {
            return Err(TimelockError::Param("base must lie in [2, n-1]".into()));
        }
        if !a.gcd(&n).is_one() {
            return Err(TimelockError::Param("base shares a factor with n".into()));
        }
        Ok(PuzzleParams { p, q, n, a, phi_n })
    }

    pub fn generate<R: RngCore + ?Sized>(prime_bits: u64, rng: &mut R) -> Result<Self, TimelockError> {
        if prime_bits < 16 {
            return Err(TimelockError::Param(format!(
                "prime size {prime_bits} bits is below the 16-bit minimum"
            )));
        }
        let p = random_prime(prime_bits, rng)?;
        let q = loop {
            let q = random_prime(prime_bits, rng)?;
            if q != p {
                break q;
            }
        };
        let n = &p * &q;
        let two = BigUint::from(2u8);
        let a = loop {
            let a = rng.gen_biguint_range(&two, &n);
            if a.gcd(&n).is_one() {
                break a;
            }
        };
        Self::from_primes(p, q, a)
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn a(&self) -> &BigUint {
        &self.a
    }

    pub fn p(&self) -> &BigUint {
        &self.p
    }

    pub fn q(&self) -> &BigUint {
        &self.q
    }

    pub fn phi_n(&self) -> &BigUint {
        &self.phi_n
    }

    pub fn trapdoor(&self) -> Trapdoor {
        Trapdoor {
            n: self.n.clone(),
            a: self.a.clone(),
            phi_n: self.phi_n.clone(),
        }
    }

    /// Byte width used for fixed-width encodings of residues mod `n`.
    pub fn modulus_len(&self) -> usize {
        modulus_len(&self.n)
    }
}

/// The owner's verification secret: enough to evaluate puzzles quickly but
/// not to regenerate them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trapdoor {
    #[serde(with = "biguint_hex")]
    pub n: BigUint,
    #[serde(with = "biguint_hex")]
    pub a: BigUint,
    #[serde(with = "biguint_hex")]
    pub phi_n: BigUint,
}

impl Trapdoor {
    /// `a^(2^t mod phi(n)) mod n`.
    pub fn fast_eval(&self, t_hat: u64) -> BigUint {
        let exponent = BigUint::from(2u8).modpow(&BigUint::from(t_hat), &self.phi_n);
        self.a.modpow(&exponent, &self.n)
    }
}

/// Deterministic parameter generation from a seed.
pub fn param_gen(security_bits: u64, seed: u64) -> Result<PuzzleParams, TimelockError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    PuzzleParams::generate(security_bits, &mut rng)
}

pub fn fast_eval(params: &PuzzleParams, t_hat: u64) -> BigUint {
    let exponent = BigUint::from(2u8).modpow(&BigUint::from(t_hat), &params.phi_n);
    params.a.modpow(&exponent, &params.n)
}

fn random_prime<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> Result<BigUint, TimelockError> {
    for _ in 0..PRIME_ATTEMPTS {
        let mut candidate = rng.gen_biguint(bits);
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(0, true);
        if is_probable_prime(&candidate, rng) {
            return Ok(candidate);
        }
    }
    Err(TimelockError::Param(format!(
        "no {bits}-bit prime found after {PRIME_ATTEMPTS} candidates"
    )))
}

const SMALL_PRIMES: [u32; 25] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
];

/// Miller-Rabin with random bases.
pub fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rng: &mut R) -> bool {
    let two = BigUint::from(2u8);
    if *n < two {
        return false;
    }
    for &p in &SMALL_PRIMES {
        let p = BigUint::from(p);
        if *n == p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    let one = BigUint::one();
    let n_minus_one = n - &one;
    let s = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> s;
    'witness: for _ in 0..MILLER_RABIN_ROUNDS {
        let base = rng.gen_biguint_range(&two, &n_minus_one);
        let mut x = base.modpow(&d, n);
        if x == one || x == n_minus_one {
            continue;
        }
        for _ in 1..s {
            x = &x * &x % n;
            if x == n_minus_one {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Where the solver's squaring rate comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateSource {
    /// Simulated device: the rate is part of the device configuration.
    Configured(f64),
    /// Time a loop of real modular squarings on this host.
    WallClock,
}

/// Squarings per second of the local solver. Budgets under 1000 iterations
/// are raised to 1000.
pub fn calibrate(source: RateSource, budget: u64) -> f64 {
    match source {
        RateSource::Configured(rate) => rate,
        RateSource::WallClock => {
            let budget = budget.max(1000);
            let params = param_gen(64, 0).expect("64-bit parameters");
            let mut squarer = SequentialSquarer::new(params.n().clone(), params.a().clone());
            let start = Instant::now();
            squarer.run(budget);
            let elapsed = start.elapsed().as_secs_f64().max(1e-9);
            budget as f64 / elapsed
        }
    }
}

/// `round(S * t')` with halves rounded up.
pub fn difficulty(squarings_per_sec: f64, t_prime_secs: f64) -> Result<u64, TimelockError> {
    if !(squarings_per_sec.is_finite() && squarings_per_sec > 0.0) {
        return Err(TimelockError::Difficulty(format!(
            "squaring rate must be positive, got {squarings_per_sec}"
        )));
    }
    if !(t_prime_secs.is_finite() && t_prime_secs >= 0.0) {
        return Err(TimelockError::Difficulty(format!(
            "delay must be non-negative, got {t_prime_secs}"
        )));
    }
    let rounded = (squarings_per_sec * t_prime_secs + 0.5).floor();
    if rounded >= u64::MAX as f64 {
        return Err(TimelockError::Difficulty("squaring count overflows u64".into()));
    }
    Ok(rounded as u64)
}

/// Squarings needed for a delay given in microseconds.
pub fn difficulty_for_us(squarings_per_sec: f64, delay_us: u64) -> Result<u64, TimelockError> {
    difficulty(squarings_per_sec, delay_us as f64 / 1e6)
}

/// Virtual microseconds a device at `squarings_per_sec` spends on `t_hat`
/// squarings, rounded up.
pub fn solve_duration_us(squarings_per_sec: f64, t_hat: u64) -> u64 {
    (t_hat as f64 * 1e6 / squarings_per_sec).ceil() as u64
}

/// Repeated squaring modulo `n` with an exact operation count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequentialSquarer {
    n: BigUint,
    value: BigUint,
    performed: u64,
}

impl SequentialSquarer {
    pub fn new(n: BigUint, a: BigUint) -> Self {
        let value = a % &n;
        SequentialSquarer { n, value, performed: 0 }
    }

    pub fn step(&mut self) {
        self.value = &self.value * &self.value % &self.n;
        self.performed += 1;
    }

    pub fn run(&mut self, squarings: u64) {
        for _ in 0..squarings {
            self.step();
        }
    }

    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn performed(&self) -> u64 {
        self.performed
    }
}

/// `(n, a, t_hat, E_z, E_k)` plus the validity deadline and the AEAD nonce
/// that accompanies `E_z`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Puzzle {
    pub n: BigUint,
    pub a: BigUint,
    pub t_hat: u64,
    pub e_z: Vec<u8>,
    pub e_k: BigUint,
    pub nonce: [u8; NONCE_LEN],
    /// Deadline in simulated milliseconds; `u64::MAX` means no deadline.
    pub t_val: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SolveReceipt {
    pub key: BigUint,
    pub command: Command,
    pub squarings_performed: u64,
    /// `a^(2^t_hat) mod n` as computed by the solver.
    pub solution: BigUint,
}

pub fn modulus_len(n: &BigUint) -> usize {
    n.bits().div_ceil(8).max(1) as usize
}

fn fixed_width(value: &BigUint, width: usize) -> Vec<u8> {
    let bytes = value.to_bytes_be();
    let mut out = vec![0u8; width.saturating_sub(bytes.len())];
    out.extend_from_slice(&bytes);
    out
}

/// Symmetric key for `E_z`: SHA-256 over the fixed-width encoding of `k`.
pub fn key_kdf(key: &BigUint, n: &BigUint) -> crypto::SymmetricKey {
    crypto::kdf(&fixed_width(key, modulus_len(n)))
}

pub fn puzzle_gen<R: RngCore + ?Sized>(
    params: &PuzzleParams,
    t_hat: u64,
    command: &Command,
    key: &BigUint,
    t_val: u64,
    rng: &mut R,
) -> Result<Puzzle, TimelockError> {
    if key >= params.n() {
        return Err(TimelockError::KeyOutOfRange);
    }
    let mask = fast_eval(params, t_hat);
    let e_k = (key + mask) % params.n();
    let nonce = crypto::random_nonce(rng);
    let e_z = crypto::seal(&key_kdf(key, params.n()), &nonce, &command.to_bytes());
    Ok(Puzzle {
        n: params.n().clone(),
        a: params.a().clone(),
        t_hat,
        e_z,
        e_k,
        nonce,
        t_val,
    })
}

/// Draws a fresh key uniformly below `n`.
pub fn random_key<R: RngCore + ?Sized>(params: &PuzzleParams, rng: &mut R) -> BigUint {
    rng.gen_biguint_below(params.n())
}

impl Puzzle {
    /// Solves from scratch with `t_hat` sequential squarings.
    pub fn solve(&self) -> Result<SolveReceipt, TimelockError> {
        let mut squarer = SequentialSquarer::new(self.n.clone(), self.a.clone());
        squarer.run(self.t_hat);
        self.finish(&squarer)
    }

    /// Completes a partially advanced squarer (for example one handed over by
    /// a compromised device) and opens the payload.
    pub fn resume(&self, mut squarer: SequentialSquarer) -> Result<SolveReceipt, TimelockError> {
        let remaining = self.t_hat.saturating_sub(squarer.performed());
        squarer.run(remaining);
        self.finish(&squarer)
    }

    /// Opens the payload with a solution obtained elsewhere, such as the
    /// owner's trapdoor in a cost-modeled simulation. `charged` is the number
    /// of squarings the caller accounts for.
    pub fn open_with(&self, solution: &BigUint, charged: u64) -> Result<SolveReceipt, TimelockError> {
        let mut receipt = self.open_solution(solution.clone())?;
        receipt.squarings_performed = charged;
        Ok(receipt)
    }

    fn finish(&self, squarer: &SequentialSquarer) -> Result<SolveReceipt, TimelockError> {
        let mut receipt = self.open_solution(squarer.value().clone())?;
        receipt.squarings_performed = squarer.performed();
        Ok(receipt)
    }

    fn open_solution(&self, solution: BigUint) -> Result<SolveReceipt, TimelockError> {
        let key = ((&self.e_k + &self.n) - (&solution % &self.n)) % &self.n;
        let plaintext = crypto::open(&key_kdf(&key, &self.n), &self.nonce, &self.e_z)
            .map_err(|_| TimelockError::Tamper)?;
        Ok(SolveReceipt {
            key,
            command: Command::from_bytes(&plaintext)?,
            squarings_performed: 0,
            solution,
        })
    }

    /// `[2 n_len][n][2 a_len][a][8 t_hat][8 t_val][2 ek_len][e_k][12 nonce][4 ez_len][e_z]`,
    /// big-endian. `e_k` is written at the modulus width so the encoding
    /// length does not depend on its value.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.n.to_bytes_be();
        let a = self.a.to_bytes_be();
        let e_k = fixed_width(&self.e_k, modulus_len(&self.n));
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&(n.len() as u16).to_be_bytes());
        out.extend_from_slice(&n);
        out.extend_from_slice(&(a.len() as u16).to_be_bytes());
        out.extend_from_slice(&a);
        out.extend_from_slice(&self.t_hat.to_be_bytes());
        out.extend_from_slice(&self.t_val.to_be_bytes());
        out.extend_from_slice(&(e_k.len() as u16).to_be_bytes());
        out.extend_from_slice(&e_k);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&(self.e_z.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.e_z);
        out
    }

    pub fn encoded_len(&self) -> usize {
        let width = modulus_len(&self.n);
        2 + width + 2 + modulus_len(&self.a) + 8 + 8 + 2 + width + NONCE_LEN + 4 + self.e_z.len()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TimelockError> {
        let mut r = Reader(bytes);
        let n_len = r.u16()? as usize;
        let n = BigUint::from_bytes_be(r.take(n_len)?);
        let a_len = r.u16()? as usize;
        let a = BigUint::from_bytes_be(r.take(a_len)?);
        let t_hat = r.u64()?;
        let t_val = r.u64()?;
        let ek_len = r.u16()? as usize;
        let e_k = BigUint::from_bytes_be(r.take(ek_len)?);
        let nonce: [u8; NONCE_LEN] = r.take(NONCE_LEN)?.try_into().unwrap();
        let ez_len = r.u32()? as usize;
        let e_z = r.take(ez_len)?.to_vec();
        if !r.0.is_empty() {
            return Err(TimelockError::Decode("trailing bytes"));
        }
        if n.is_zero() {
            return Err(TimelockError::Decode("zero modulus"));
        }
        if e_k >= n {
            return Err(TimelockError::Decode("masked key not reduced"));
        }
        Ok(Puzzle {
            n,
            a,
            t_hat,
            e_z,
            e_k,
            nonce,
            t_val,
        })
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], TimelockError> {
        if self.0.len() < len {
            return Err(TimelockError::Decode("truncated"));
        }
        let (head, tail) = self.0.split_at(len);
        self.0 = tail;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16, TimelockError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, TimelockError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TimelockError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// True iff `t_cur <= t_val + t_diff`.
pub fn check_validity(t_val: u64, t_cur: u64, t_diff: u64) -> bool {
    t_cur <= t_val.saturating_add(t_diff)
}

pub mod biguint_hex {
    use num_bigint::BigUint;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &BigUint, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&value.to_str_radix(16))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigUint, D::Error> {
        let text = String::deserialize(d)?;
        BigUint::parse_bytes(text.as_bytes(), 16)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid hex integer {text:?}")))
    }
}
