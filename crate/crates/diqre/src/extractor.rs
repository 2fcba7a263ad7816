//! Toeplitz hashing over GF(2): a direct oracle, and a blocked FFT evaluation that splits
//! the input into length-l blocks so each transform only spans m + l − 1 points.
//!
//! Seed layout: bit s of the seed is a_{s−(n−1)}, so T[i,j] = seed[i − j + n − 1].

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bits::BitStream;
use crate::error::{Error, Result};
use crate::protocol::EntropyCertificate;

/// Largest distance of a transform output from its integer before the audit rejects it.
pub const AUDIT_RESIDUAL: f64 = 0.25;

/// Extractor dimensions for an n-bit input with min-entropy k.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionSpec {
    pub n: u64,
    pub m: u64,
    pub eps_x: f64,
    pub k: f64,
}

impl ExtractionSpec {
    pub fn new(n: u64, k: f64, eps_x: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Parameter("extractor input is empty".into()));
        }
        let m = output_length(k, eps_x)?;
        Ok(ExtractionSpec { n, m, eps_x, k })
    }

    pub fn seed_length(&self) -> u64 {
        self.m + self.n - 1
    }
}

/// m = ⌊k − 2·log₂(1/ε_x)⌋.
pub fn output_length(k: f64, eps_x: f64) -> Result<u64> {
    if !(eps_x > 0.0 && eps_x <= 1.0) {
        return Err(Error::Parameter(format!("extractor error {eps_x} outside (0,1]")));
    }
    let penalty = -2.0 * eps_x.log2();
    let m = (k - penalty).floor();
    if !(k > penalty) || m < 1.0 {
        return Err(Error::Infeasible(format!("min-entropy {k} does not exceed the extraction penalty {penalty}")));
    }
    Ok(m as u64)
}

fn check_lengths(seed: &BitStream, v: &BitStream, m: u64) -> Result<u64> {
    let n = v.len();
    if n == 0 || m == 0 {
        return Err(Error::Parameter("Toeplitz hashing needs n ≥ 1 and m ≥ 1".into()));
    }
    if seed.len() != m + n - 1 {
        return Err(Error::Parameter(format!("seed has {} bits, expected m + n − 1 = {}", seed.len(), m + n - 1)));
    }
    Ok(n)
}

/// 64 bits of `s` starting at bit `from`, zero past the end.
fn word_at(s: &BitStream, from: u64) -> u64 {
    let bytes = s.as_bytes();
    let first = (from / 8) as usize;
    let mut acc = 0u128;
    for (k, b) in bytes.iter().skip(first).take(9).enumerate() {
        acc |= (*b as u128) << (8 * k);
    }
    // pad bits past the end are zero by construction
    (acc >> (from % 8)) as u64
}

/// Direct evaluation rᵢ = ⊕ⱼ seed[i − j + n − 1]·vⱼ, 64 columns per word.
pub fn toeplitz_naive(seed: &BitStream, v: &BitStream, m: u64) -> Result<BitStream> {
    let n = check_lengths(seed, v, m)?;
    // reversed input: rev[t] = v[n−1−t], so rᵢ = parity(seed[i..i+n] ∧ rev)
    let mut rev = BitStream::zeros(n);
    for t in 0..n {
        if v.get(n - 1 - t) {
            rev.set(t, true);
        }
    }
    let rev_words: Vec<u64> = (0..n.div_ceil(64)).map(|w| word_at(&rev, 64 * w)).collect();
    let mut out = BitStream::zeros(m);
    for i in 0..m {
        let mut acc = 0u64;
        for (w, rw) in rev_words.iter().enumerate() {
            if *rw != 0 {
                acc ^= word_at(seed, i + 64 * w as u64) & rw;
            }
        }
        if acc.count_ones() % 2 == 1 {
            out.set(i, true);
        }
    }
    Ok(out)
}

/// Diagnostics of a transform-based evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FftReport {
    pub blocks: u64,
    pub block_length: u64,
    pub transform_length: usize,
    /// Largest distance of any pre-rounding value from its integer.
    pub max_residual: f64,
}

/// Blocked-FFT evaluation, bit-exact with [`toeplitz_naive`] when the audit passes.
pub fn toeplitz_fft(seed: &BitStream, v: &BitStream, m: u64, l: u64) -> Result<BitStream> {
    toeplitz_fft_report(seed, v, m, l).map(|(out, _)| out)
}

pub fn toeplitz_fft_report(seed: &BitStream, v: &BitStream, m: u64, l: u64) -> Result<(BitStream, FftReport)> {
    let n = check_lengths(seed, v, m)?;
    if l == 0 || l > n {
        return Err(Error::Parameter(format!("block length {l} outside [1, {n}]")));
    }
    let blocks = n.div_ceil(l);
    let len = (m + l - 1) as usize;
    let size = len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let fold = |(mut counts, mut worst): (Vec<u64>, f64), b: u64| -> Result<(Vec<u64>, f64)> {
        let r = block_product(seed, v, m, l, b, size, &fwd, &inv)?;
        for (c, x) in counts.iter_mut().zip(&r.0) {
            *c += x;
        }
        worst = worst.max(r.1);
        Ok((counts, worst))
    };
    let (counts, worst) = (0..blocks)
        .into_par_iter()
        .try_fold(|| (vec![0u64; m as usize], 0.0f64), |acc, b| fold(acc, b))
        .try_reduce(
            || (vec![0u64; m as usize], 0.0f64),
            |(mut a, wa), (b, wb)| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                Ok((a, wa.max(wb)))
            },
        )?;
    let mut out = BitStream::zeros(m);
    for (i, c) in counts.iter().enumerate() {
        if c % 2 == 1 {
            out.set(i as u64, true);
        }
    }
    Ok((out, FftReport { blocks, block_length: l, transform_length: size, max_residual: worst }))
}

/// Integer correlation of block `b` of v (columns b·l .. b·l+l, zero past n) with its seed
/// window, rounded after the residual audit.
#[allow(clippy::too_many_arguments)]
fn block_product(
    seed: &BitStream,
    v: &BitStream,
    m: u64,
    l: u64,
    b: u64,
    size: usize,
    fwd: &Arc<dyn Fft<f64>>,
    inv: &Arc<dyn Fft<f64>>,
) -> Result<(Vec<u64>, f64)> {
    let n = v.len();
    // Row i, column b·l + t reads seed[base + i + (l−1−t)] with base = n − l − b·l; the
    // window w[s] = seed[base + s] makes row i the convolution (w ∗ v_b)[i + l − 1].
    let base = n as i64 - l as i64 - (b * l) as i64;
    let len = (m + l - 1) as usize;
    let mut buf = vec![Complex64::new(0.0, 0.0); size];
    let mut any = false;
    for t in 0..l {
        let j = b * l + t;
        if j < n && v.get(j) {
            buf[t as usize].im = 1.0;
            any = true;
        }
    }
    if !any {
        return Ok((vec![0; m as usize], 0.0));
    }
    for (s, slot) in buf.iter_mut().enumerate().take(len) {
        let idx = base + s as i64;
        if idx >= 0 && (idx as u64) < seed.len() && seed.get(idx as u64) {
            slot.re = 1.0;
        }
    }
    // one complex transform carries both real sequences: w in re, v_b in im
    fwd.process(&mut buf);
    let mut prod = vec![Complex64::new(0.0, 0.0); size];
    for k in 0..size {
        let z = buf[k];
        let zc = buf[(size - k) % size].conj();
        let w = (z + zc) * 0.5;
        let vb = (z - zc) * Complex64::new(0.0, -0.5);
        prod[k] = w * vb;
    }
    inv.process(&mut prod);
    let scale = 1.0 / size as f64;
    let mut out = vec![0u64; m as usize];
    let mut worst = 0.0f64;
    for (i, o) in out.iter_mut().enumerate() {
        let x = prod[i + l as usize - 1].re * scale;
        let r = x.round();
        let res = (x - r).abs();
        worst = worst.max(res);
        if res > AUDIT_RESIDUAL || r < 0.0 {
            return Err(Error::Precision { residual: res });
        }
        *o = r as u64;
    }
    Ok((out, worst))
}

/// Block length used when none is configured: the output length, capped by the input.
pub fn default_block_length(n: u64, m: u64) -> u64 {
    m.clamp(1, n)
}

/// What an extraction did, for the run report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub n: u64,
    pub m: u64,
    pub block_length: u64,
    pub eps_x: f64,
    pub eps_s: f64,
    /// 2·ε_s + ε_x.
    pub total_soundness: f64,
    pub max_residual: f64,
    pub input_sha256: String,
    pub seed_sha256: String,
    pub output_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn stream_digest(s: &BitStream) -> String {
    let mut h = Sha256::new();
    h.update(s.len().to_le_bytes());
    h.update(s.as_bytes());
    hex::encode(h.finalize())
}

/// Total soundness error of generation plus extraction.
pub fn total_soundness(eps_s: f64, eps_x: f64) -> f64 {
    2.0 * eps_s + eps_x
}

/// Hashes the protocol outputs down to the certified length; refuses without a certificate.
pub fn extract(
    v: &BitStream,
    cert: Option<&EntropyCertificate>,
    eps_x: f64,
    seed: &BitStream,
    block_length: Option<u64>,
) -> Result<(BitStream, ExtractionReport)> {
    let cert = cert.ok_or_else(|| Error::InvalidState("no entropy certificate: the run did not succeed".into()))?;
    let spec = ExtractionSpec::new(v.len(), cert.min_entropy_bound, eps_x)?;
    if seed.len() != spec.seed_length() {
        return Err(Error::Parameter(format!("seed has {} bits, extraction needs {}", seed.len(), spec.seed_length())));
    }
    let l = block_length.unwrap_or_else(|| default_block_length(spec.n, spec.m));
    let (out, fr) = toeplitz_fft_report(seed, v, spec.m, l)?;
    let report = ExtractionReport {
        n: spec.n,
        m: spec.m,
        block_length: l,
        eps_x,
        eps_s: cert.eps_s,
        total_soundness: total_soundness(cert.eps_s, eps_x),
        max_residual: fr.max_residual,
        input_sha256: stream_digest(v),
        seed_sha256: stream_digest(seed),
        output_sha256: stream_digest(&out),
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hp::Hp;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Bit-by-bit evaluation of the matrix display.
    fn by_definition(seed: &BitStream, v: &BitStream, m: u64) -> BitStream {
        let n = v.len();
        let mut out = BitStream::zeros(m);
        for i in 0..m {
            let mut r = false;
            for j in 0..n {
                r ^= seed.get(i + n - 1 - j) & v.get(j);
            }
            out.set(i, r);
        }
        out
    }

    fn cert(k: f64) -> EntropyCertificate {
        EntropyCertificate { min_entropy_bound: k, h: k, eps_s: 2f64.powi(-32), gamma: 0.99, alpha: Hp::from_f64(1.5), n_stop: 1 }
    }

    #[test]
    fn output_length_examples() {
        assert_eq!(output_length(5.47e8, 2f64.powi(-100)).unwrap(), 547_000_000 - 200);
        assert_eq!(output_length(1234.7, 1.0).unwrap(), 1234);
        assert_eq!(output_length(201.0, 2f64.powi(-100)).unwrap(), 1);
        assert!(output_length(200.0, 2f64.powi(-100)).is_err());
        assert!(output_length(5.0, 0.0).is_err());
    }

    #[test]
    fn hand_examples() {
        let seed = BitStream::from_bits(&[1, 0, 1, 1]);
        let v = BitStream::from_bits(&[1, 1, 0]);
        assert_eq!(toeplitz_naive(&seed, &v, 2).unwrap().to_bits(), vec![1, 0]);
        for l in 1..=3 {
            assert_eq!(toeplitz_fft(&seed, &v, 2, l).unwrap().to_bits(), vec![1, 0]);
        }
        let one = BitStream::from_bits(&[1]);
        assert_eq!(toeplitz_naive(&one, &one, 1).unwrap().to_bits(), vec![1]);
        let zeros = BitStream::zeros(50);
        let s = BitStream::random(59, &mut ChaCha20Rng::seed_from_u64(0));
        assert_eq!(toeplitz_fft(&s, &zeros, 10, 7).unwrap(), BitStream::zeros(10));
        assert!(toeplitz_naive(&s, &zeros, 11).is_err());
        assert!(toeplitz_fft(&s, &zeros, 10, 51).is_err());
    }

    #[test]
    fn packed_oracle_matches_definition() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(1..300u64);
            let m = rng.random_range(1..150u64);
            let seed = BitStream::random(m + n - 1, &mut rng);
            let v = BitStream::random(n, &mut rng);
            assert_eq!(toeplitz_naive(&seed, &v, m).unwrap(), by_definition(&seed, &v, m));
        }
    }

    #[test]
    fn blocked_transform_matches_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        for _ in 0..20 {
            let (n, m) = (4096u64, 512u64);
            let seed = BitStream::random(m + n - 1, &mut rng);
            let v = BitStream::random(n, &mut rng);
            let want = toeplitz_naive(&seed, &v, m).unwrap();
            for l in [64, 500, 512, 4096] {
                let (got, rep) = toeplitz_fft_report(&seed, &v, m, l).unwrap();
                assert_eq!(got, want, "l = {l}");
                assert!(rep.max_residual < 1e-6);
            }
        }
    }

    #[test]
    fn extraction_guards_and_report() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let v = BitStream::random(2000, &mut rng);
        let c = cert(700.0);
        let m = output_length(700.0, 2f64.powi(-20)).unwrap();
        assert_eq!(m, 660);
        let seed = BitStream::random(m + 2000 - 1, &mut rng);
        assert!(matches!(extract(&v, None, 2f64.powi(-20), &seed, None), Err(Error::InvalidState(_))));
        assert!(matches!(extract(&v, Some(&cert(0.0)), 2f64.powi(-20), &seed, None), Err(Error::Infeasible(_))));
        let (out, rep) = extract(&v, Some(&c), 2f64.powi(-20), &seed, Some(128)).unwrap();
        assert_eq!(out, toeplitz_naive(&seed, &v, m).unwrap());
        assert_eq!((rep.n, rep.m, rep.block_length), (2000, 660, 128));
        assert_eq!(rep.total_soundness, 2.0 * 2f64.powi(-32) + 2f64.powi(-20));
        assert!((total_soundness(2f64.powi(-32), 2f64.powi(-100)) - 4.66e-10).abs() < 5e-13);
        // seed round trip through the raw format
        let mut buf = Vec::new();
        seed.write_raw(&mut buf).unwrap();
        let back = BitStream::read_raw(&buf[..]).unwrap();
        assert_eq!(extract(&v, Some(&c), 2f64.powi(-20), &back, Some(128)).unwrap().0, out);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn linear_over_gf2(n in 1u64..400, m in 1u64..120, l_frac in 0.0f64..1.0, s in any::<u64>()) {
            let mut rng = ChaCha20Rng::seed_from_u64(s);
            let l = ((n as f64 * l_frac) as u64).clamp(1, n);
            let seed = BitStream::random(m + n - 1, &mut rng);
            let v1 = BitStream::random(n, &mut rng);
            let v2 = BitStream::random(n, &mut rng);
            let a = toeplitz_fft(&seed, &v1, m, l).unwrap();
            let b = toeplitz_fft(&seed, &v2, m, l).unwrap();
            let c = toeplitz_fft(&seed, &v1.xor(&v2).unwrap(), m, l).unwrap();
            prop_assert_eq!(c, a.xor(&b).unwrap());
        }
    }
}
