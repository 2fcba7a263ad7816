//! Spot-checking expansion protocol: parameter appointment, the trial loop with its running
//! log₂-factor register, early stopping, and the smooth min-entropy certificate.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::bits::{BitStream, SeedSource};
use crate::error::{Error, Result};
use crate::hp::Hp;
use crate::model::{binary_entropy, idx, input_entropy_rate, ConditionalBehavior, InputDistribution, JointDistribution, PolytopeModel};
use crate::pef::{optimize_pef, EstimationFactor};

/// Largest trial count the appointment search considers.
pub const MAX_TRIALS: u64 = 1_000_000_000_000_000;
pub const DEFAULT_CHECKPOINT_INTERVAL: u64 = 100_000;

/// Operator-chosen protocol parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanParams {
    pub q: f64,
    pub eps_b: f64,
    /// Target expansion, bits.
    pub k: f64,
    /// Entropy spent on training, bits.
    pub k0: f64,
    pub eps_s: f64,
    pub eps_x: f64,
    pub gamma: f64,
    pub gamma_bar: f64,
}

impl PlanParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("q", self.q), ("eps_s", self.eps_s), ("eps_x", self.eps_x), ("gamma", self.gamma), ("gamma_bar", self.gamma_bar)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Parameter(format!("{name}={v} outside (0,1)")));
            }
        }
        if !(0.0..1.0).contains(&self.eps_b) {
            return Err(Error::Parameter(format!("eps_b={} outside [0,1)", self.eps_b)));
        }
        if !(self.k >= 0.0 && self.k0 >= 0.0) {
            return Err(Error::Parameter("k and k0 must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolPlan {
    pub params: PlanParams,
    pub factor: EstimationFactor,
    /// Input entropy booked per trial, bits.
    pub r_in: f64,
    /// Expected log₂F/(α−1) per trial under the trained ν, bits.
    pub r_nu: f64,
    pub sigma_nu: f64,
    pub n_max: u64,
    /// Success threshold on log₂G/(α−1), bits.
    pub h: f64,
    pub checkpoint_interval: u64,
}

impl ProtocolPlan {
    /// Appoints N and h for an expansion task (r_ν must exceed r_in).
    pub fn appoint(params: PlanParams, factor: EstimationFactor, nu: &JointDistribution) -> Result<Self> {
        params.validate()?;
        let r_in = input_entropy_rate(params.q)?;
        let r_nu = factor.rate(&nu.nu)?.to_f64();
        let sigma = sigma_nu(&factor, nu)?;
        let (n_max, h) = appoint_parameters(&Appointment {
            k: params.k,
            k0: params.k0,
            eps_s: params.eps_s,
            gamma_bar: params.gamma_bar,
            gamma: params.gamma,
            r_nu,
            sigma_nu: sigma,
            r_in,
            beta: factor.beta().to_f64(),
        })?;
        let plan = ProtocolPlan { params, factor, r_in, r_nu, sigma_nu: sigma, n_max, h, checkpoint_interval: DEFAULT_CHECKPOINT_INTERVAL };
        plan.validate()?;
        Ok(plan)
    }

    /// A plan with a fixed trial budget and the threshold that `n_max` trials reach with
    /// probability about γ̄; used for desk-scale statistics where r_ν ≤ r_in is allowed.
    pub fn fixed_budget(params: PlanParams, factor: EstimationFactor, nu: &JointDistribution, n_max: u64) -> Result<Self> {
        params.validate()?;
        let r_in = input_entropy_rate(params.q)?;
        let r_nu = factor.rate(&nu.nu)?.to_f64();
        let sigma = sigma_nu(&factor, nu)?;
        let h = success_threshold(n_max, r_nu, sigma, params.gamma_bar)?;
        let plan = ProtocolPlan { params, factor, r_in, r_nu, sigma_nu: sigma, n_max, h, checkpoint_interval: DEFAULT_CHECKPOINT_INTERVAL };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.factor.validate()?;
        if self.n_max < 1 {
            return Err(Error::Parameter("trial budget N must be at least 1".into()));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::Parameter(format!("threshold h={} must be positive", self.h)));
        }
        if self.checkpoint_interval < 1 {
            return Err(Error::Parameter("checkpoint interval must be at least 1".into()));
        }
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        self.factor.beta().to_f64()
    }

    /// Smoothing and success-probability penalty of the certificate, bits.
    pub fn penalty(&self) -> f64 {
        certificate_penalty(self.params.eps_s, self.params.gamma, self.beta())
    }
}

/// Standard deviation of log₂F(CZ)/(α−1) under ν, bits per trial.
pub fn sigma_nu(f: &EstimationFactor, nu: &JointDistribution) -> Result<f64> {
    let beta = f.beta().to_f64();
    let l = f.log2_values();
    let support: Vec<usize> = (0..16).filter(|i| nu.nu[*i] > 0.0).collect();
    if support.iter().any(|i| !l[*i].is_finite()) {
        return Err(Error::Numeric("F vanishes on a cell with positive probability".into()));
    }
    let mean: f64 = support.iter().map(|i| nu.nu[*i] * l[*i] / beta).sum();
    let var: f64 = support.iter().map(|i| nu.nu[*i] * (l[*i] / beta - mean).powi(2)).sum();
    Ok(var.sqrt())
}

/// Inputs to [`appoint_parameters`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Appointment {
    pub k: f64,
    pub k0: f64,
    pub eps_s: f64,
    pub gamma_bar: f64,
    pub gamma: f64,
    pub r_nu: f64,
    pub sigma_nu: f64,
    pub r_in: f64,
    /// α − 1.
    pub beta: f64,
}

/// log₂(2/ε_s²)/(α−1) − α·log₂γ/(α−1).
pub fn certificate_penalty(eps_s: f64, gamma: f64, beta: f64) -> f64 {
    let alpha = 1.0 + beta;
    (1.0 - 2.0 * eps_s.log2()) / beta - alpha * gamma.log2() / beta
}

/// Threshold h for N trials: the entropy a successful run must witness so that the
/// certificate covers training, target and input consumption.
pub fn threshold(n: f64, k: f64, k0: f64, eps_s: f64, gamma: f64, r_in: f64, beta: f64) -> f64 {
    n * r_in + k0 + k + certificate_penalty(eps_s, gamma, beta)
}

/// h such that a Gaussian sum with mean n·r_ν and deviation σ√n exceeds it with
/// probability γ̄.
pub fn success_threshold(n: u64, r_nu: f64, sigma: f64, gamma_bar: f64) -> Result<f64> {
    let z = standard_quantile(gamma_bar)?;
    let n = n as f64;
    Ok(n * r_nu - z * sigma * n.sqrt())
}

fn standard_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Parameter(format!("probability {p} outside (0,1)")));
    }
    Ok(Normal::standard().inverse_cdf(p))
}

/// Smallest N whose Gaussian success probability reaches γ̄ with h(N) built from γ̄, then h
/// recomputed with γ.
pub fn appoint_parameters(a: &Appointment) -> Result<(u64, f64)> {
    for (name, v) in [("eps_s", a.eps_s), ("gamma", a.gamma), ("gamma_bar", a.gamma_bar)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Parameter(format!("{name}={v} outside (0,1)")));
        }
    }
    if !(a.beta > 0.0 && a.sigma_nu >= 0.0 && a.r_in >= 0.0) {
        return Err(Error::Parameter("appointment needs beta > 0, sigma >= 0, r_in >= 0".into()));
    }
    if !(a.r_nu > a.r_in) {
        return Err(Error::Infeasible(format!("expected rate {} does not exceed input rate {}", a.r_nu, a.r_in)));
    }
    let z = standard_quantile(a.gamma_bar)?;
    let c = a.k0 + a.k + certificate_penalty(a.eps_s, a.gamma_bar, a.beta);
    let slack = |n: u64| {
        let n = n as f64;
        n * (a.r_nu - a.r_in) - c - z * a.sigma_nu * n.sqrt()
    };
    if slack(MAX_TRIALS) < 0.0 {
        return Err(Error::Infeasible(format!("no trial budget up to {MAX_TRIALS} reaches success probability {}", a.gamma_bar)));
    }
    // slack is convex in √N and negative at 0, so it crosses zero once
    let (mut lo, mut hi) = (0u64, MAX_TRIALS);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if slack(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let h = threshold(hi as f64, a.k, a.k0, a.eps_s, a.gamma, a.r_in, a.beta);
    Ok((hi, h))
}

/// Arithmetic decoder turning a uniform bit stream into i.i.d. Bernoulli(q) draws.
///
/// The unread part of the seed is a dyadic interval inside the current cell; each draw splits
/// the cell into a 1−q part (T = 0) and a q part (T = 1) and reads bits only until the interval
/// falls on one side. Cells live on a 2⁶² grid, so each draw has probability within 2⁻⁶⁰ of q,
/// exactly q when q·2⁶² is an integer at the current cell size (dyadic q). Bits carry over
/// between draws and the amortized cost approaches h(q) per draw.
#[derive(Clone, Debug)]
pub struct BernoulliDecoder {
    q_num: u128,
    q_shift: u32,
    low: u64,
    range: u64,
    u: u64,
    width: u64,
}

const WINDOW: u32 = 62;
const FULL: u64 = 1 << WINDOW;
const HALF: u64 = FULL >> 1;
const QUARTER: u64 = FULL >> 2;

impl BernoulliDecoder {
    pub fn new(q: f64) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Parameter(format!("Bernoulli parameter {q} outside (0,1)")));
        }
        // q = m·2^-s exactly, m < 2^53
        let mut m = q;
        let mut s = 0u32;
        while m.fract() != 0.0 && s < 1100 {
            m *= 2.0;
            s += 1;
        }
        let (q_num, q_shift) = if s > 120 {
            // far below the grid resolution: keep the top 53 bits at a 2^-120 scale
            ((q * 2f64.powi(120)).floor().max(1.0) as u128, 120)
        } else {
            (m as u128, s)
        };
        Ok(BernoulliDecoder { q_num, q_shift, low: 0, range: FULL, u: 0, width: FULL })
    }

    /// Draws T; returns it with the number of seed bits read.
    pub fn draw(&mut self, seed: &mut dyn SeedSource) -> Result<(bool, u64)> {
        let ones = (((self.range as u128) * self.q_num) >> self.q_shift) as u64;
        let ones = ones.clamp(1, self.range - 1);
        let split = self.low + (self.range - ones);
        let mut used = 0;
        let t = loop {
            if self.u + self.width <= split {
                break false;
            }
            if self.u >= split {
                break true;
            }
            let bit = seed.next_bit()?;
            used += 1;
            self.width >>= 1;
            if bit {
                self.u += self.width;
            }
        };
        if t {
            self.range = self.low + self.range - split;
            self.low = split;
        } else {
            self.range = split - self.low;
        }
        self.renormalize();
        Ok((t, used))
    }

    fn renormalize(&mut self) {
        loop {
            let offset = if self.low + self.range <= HALF {
                0
            } else if self.low >= HALF {
                HALF
            } else if self.low >= QUARTER && self.low + self.range <= HALF + QUARTER {
                QUARTER
            } else {
                break;
            };
            self.low = (self.low - offset) << 1;
            self.range <<= 1;
            self.u = (self.u - offset) << 1;
            self.width <<= 1;
        }
    }
}

/// Single draw from a fresh decoder.
pub fn biased_bernoulli(q: f64, seed: &mut dyn SeedSource) -> Result<(bool, u64)> {
    BernoulliDecoder::new(q)?.draw(seed)
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, v: f64) {
        if v == f64::NEG_INFINITY || self.sum == f64::NEG_INFINITY {
            self.sum = f64::NEG_INFINITY;
            self.comp = 0.0;
            return;
        }
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Measurement device queried once per trial.
pub trait TrialDevice {
    /// Outcome bits (a, b) for inputs (x, y).
    fn respond(&mut self, x: u8, y: u8) -> Result<(u8, u8)>;
}

/// Samples outcomes from a fixed conditional behavior.
pub struct BehaviorDevice<R> {
    pub behavior: ConditionalBehavior,
    pub rng: R,
}

impl<R: Rng> TrialDevice for BehaviorDevice<R> {
    fn respond(&mut self, x: u8, y: u8) -> Result<(u8, u8)> {
        let o = crate::sim::sample_trial(&self.behavior, x, y, &mut self.rng);
        Ok((o.a, o.b))
    }
}

/// Classical device answering a(x), b(y) from a deterministic local strategy, indexed as
/// the local deterministic vertices of the polytope.
pub struct LocalDeterministicDevice {
    pub strategy: usize,
}

impl TrialDevice for LocalDeterministicDevice {
    fn respond(&mut self, x: u8, y: u8) -> Result<(u8, u8)> {
        let s = self.strategy;
        let a = (s >> (3 - x as usize)) & 1;
        let b = (s >> (1 - y as usize)) & 1;
        Ok((a as u8, b as u8))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StopReason {
    Threshold,
    Exhausted,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub n: u64,
    pub log2_g: f64,
    pub seed_bits: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionTranscript {
    pub n: u64,
    /// Σ log₂F(cᵢzᵢ) over executed trials.
    pub log2_g: f64,
    /// Executed trials per cell, for exact re-evaluation of the register.
    pub cell_counts: [u64; 16],
    pub spot_count: u64,
    /// Checking trials per input pair `z = x*2+y`.
    pub check_counts: [u64; 4],
    /// Outcome pairs, a then b.
    pub outputs: BitStream,
    pub inputs_consumed_bits: u64,
    /// k0 + n·r_in.
    pub ledger_accounting: Hp,
    pub success: bool,
    pub stop_reason: StopReason,
    pub checkpoints: Vec<Checkpoint>,
}

impl ExpansionTranscript {
    /// Register recomputed from the cell counts in high precision.
    pub fn exact_log2_g(&self, f: &EstimationFactor) -> Hp {
        let mut acc = Hp::zero();
        for i in 0..16 {
            if self.cell_counts[i] > 0 {
                acc += &Hp::from_u64(self.cell_counts[i]) * &f.values[i].log2();
            }
        }
        acc
    }
}

/// Run stopped by a seed underflow or device fault; the partial transcript is kept.
#[derive(Debug)]
pub struct Aborted {
    pub error: Error,
    pub transcript: ExpansionTranscript,
}

pub fn ledger_accounting(k0: f64, r_in: f64, n: u64) -> Hp {
    &Hp::from_f64(k0) + &(&Hp::from_u64(n) * &Hp::from_f64(r_in))
}

pub fn run_expansion(
    plan: &ProtocolPlan,
    device: &mut dyn TrialDevice,
    seed: &mut dyn SeedSource,
) -> std::result::Result<ExpansionTranscript, Box<Aborted>> {
    run_expansion_with(plan, device, seed, &mut |_| Ok(()))
}

/// Runs trials until the register crosses h or N trials are spent, passing each checkpoint
/// to `sink` as it is taken.
pub fn run_expansion_with(
    plan: &ProtocolPlan,
    device: &mut dyn TrialDevice,
    seed: &mut dyn SeedSource,
    sink: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> std::result::Result<ExpansionTranscript, Box<Aborted>> {
    let mut t = ExpansionTranscript {
        n: 0,
        log2_g: 0.0,
        cell_counts: [0; 16],
        spot_count: 0,
        check_counts: [0; 4],
        outputs: BitStream::new(),
        inputs_consumed_bits: 0,
        ledger_accounting: ledger_accounting(plan.params.k0, plan.r_in, 0),
        success: false,
        stop_reason: StopReason::Exhausted,
        checkpoints: Vec::new(),
    };
    let abort = |mut t: ExpansionTranscript, error: Error| {
        t.stop_reason = StopReason::Aborted;
        t.ledger_accounting = ledger_accounting(plan.params.k0, plan.r_in, t.n);
        Box::new(Aborted { error, transcript: t })
    };
    if let Err(e) = plan.validate() {
        return Err(abort(t, e));
    }
    let mut decoder = match BernoulliDecoder::new(plan.params.q) {
        Ok(d) => d,
        Err(e) => return Err(abort(t, e)),
    };
    let log2f = plan.factor.log2_values();
    let target = plan.h * plan.beta();
    let start_bits = seed.consumed();
    let mut register = CompensatedSum::default();
    while t.n < plan.n_max {
        let trial = (|| -> Result<(usize, usize, u8, u8, bool)> {
            let (check, _) = decoder.draw(seed)?;
            let (x, y) = if check { (seed.next_bit()? as u8, seed.next_bit()? as u8) } else { (0, 0) };
            let (a, b) = device.respond(x, y)?;
            if a > 1 || b > 1 {
                return Err(Error::InvalidState(format!("device returned outcome ({a},{b})")));
            }
            Ok((x as usize, y as usize, a, b, check))
        })();
        let (x, y, a, b, check) = match trial {
            Ok(v) => v,
            Err(e) => {
                t.inputs_consumed_bits = seed.consumed() - start_bits;
                return Err(abort(t, e));
            }
        };
        let cell = idx(a as usize, b as usize, x, y);
        register.add(log2f[cell]);
        t.cell_counts[cell] += 1;
        if check {
            t.check_counts[x * 2 + y] += 1;
        } else {
            t.spot_count += 1;
        }
        t.outputs.push(a == 1);
        t.outputs.push(b == 1);
        t.n += 1;
        let done = register.value() >= target;
        if t.n % plan.checkpoint_interval == 0 || done || t.n == plan.n_max {
            let cp = Checkpoint { n: t.n, log2_g: register.value(), seed_bits: seed.consumed() - start_bits };
            if let Err(e) = sink(&cp) {
                t.inputs_consumed_bits = cp.seed_bits;
                t.checkpoints.push(cp);
                return Err(abort(t, e));
            }
            t.checkpoints.push(cp);
        }
        if done {
            t.success = true;
            t.stop_reason = StopReason::Threshold;
            break;
        }
    }
    t.log2_g = register.value();
    t.inputs_consumed_bits = seed.consumed() - start_bits;
    t.ledger_accounting = ledger_accounting(plan.params.k0, plan.r_in, t.n);
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyCertificate {
    /// Smooth min-entropy lower bound of the outputs given inputs and side information, bits.
    pub min_entropy_bound: f64,
    pub h: f64,
    pub eps_s: f64,
    pub gamma: f64,
    pub alpha: Hp,
    pub n_stop: u64,
}

/// h − log₂(2/ε_s²)/(α−1) + α·log₂γ/(α−1).
pub fn min_entropy_bound(h: f64, eps_s: f64, gamma: f64, beta: f64) -> Result<f64> {
    if !(eps_s > 0.0 && eps_s <= 1.0 && gamma > 0.0 && gamma <= 1.0 && beta > 0.0) {
        return Err(Error::Parameter("certificate needs eps_s, gamma in (0,1] and beta > 0".into()));
    }
    Ok(h - certificate_penalty(eps_s, gamma, beta))
}

pub fn certify(transcript: &ExpansionTranscript, plan: &ProtocolPlan) -> Result<EntropyCertificate> {
    if !transcript.success {
        return Err(Error::InvalidState("no certificate for a run that did not reach its threshold".into()));
    }
    Ok(EntropyCertificate {
        min_entropy_bound: min_entropy_bound(plan.h, plan.params.eps_s, plan.params.gamma, plan.beta())?,
        h: plan.h,
        eps_s: plan.params.eps_s,
        gamma: plan.params.gamma,
        alpha: plan.factor.alpha.clone(),
        n_stop: transcript.n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: u64,
    /// log₂G/(α−1).
    pub generated: f64,
    /// k0 + n·r_in.
    pub consumed: f64,
    /// max{log₂G/(α−1) − n·r_in − penalty, 0}.
    pub net: f64,
    /// n·(r_ν − r_in) − penalty.
    pub expected: f64,
}

pub fn net_expansion_curve(transcript: &ExpansionTranscript, plan: &ProtocolPlan) -> Vec<CurvePoint> {
    let (beta, pen) = (plan.beta(), plan.penalty());
    transcript
        .checkpoints
        .iter()
        .map(|c| {
            let n = c.n as f64;
            let generated = c.log2_g / beta;
            CurvePoint {
                n: c.n,
                generated,
                consumed: plan.params.k0 + n * plan.r_in,
                net: (generated - n * plan.r_in - pen).max(0.0),
                expected: n * (plan.r_nu - plan.r_in) - pen,
            }
        })
        .collect()
}

/// Rate comparison under independent local inputs with bias b_l = (1−q)/q on each side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalBias {
    pub q_local: f64,
    pub bias: f64,
    pub r_out: f64,
    /// 2·h(q_local).
    pub r_in_local: f64,
    pub feasible: bool,
}

/// Optimizes a PEF for `nu_sim`'s conditionals under product inputs and compares its rate
/// with the input entropy 2·h(q_local).
pub fn local_bias_analysis(q_local: f64, nu_sim: &JointDistribution, alpha: &Hp, polytope: &PolytopeModel, tol: f64) -> Result<LocalBias> {
    let input = InputDistribution::product(q_local)?;
    let nu = JointDistribution::from_behavior(&nu_sim.conditional(), &input);
    let sol = optimize_pef(&nu, alpha, polytope, std::slice::from_ref(&input), tol)?;
    let r_in_local = 2.0 * binary_entropy(q_local);
    Ok(LocalBias { q_local, bias: (1.0 - q_local) / q_local, r_out: sol.rate, r_in_local, feasible: sol.rate > r_in_local })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bits::{BitReader, RngSeed};
    use crate::model::build_polytope;
    use crate::pef::FactorKind;
    use crate::reference;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn reference_factor() -> EstimationFactor {
        EstimationFactor::new(reference::pef_hp(), reference::alpha_hp(), FactorKind::Pef, None).unwrap()
    }

    fn reference_appointment(sigma: f64) -> Appointment {
        Appointment {
            k: reference::K,
            k0: reference::K0,
            eps_s: 2f64.powi(-32),
            gamma_bar: reference::GAMMA_BAR,
            gamma: reference::GAMMA,
            r_nu: reference::R_NU,
            sigma_nu: sigma,
            r_in: input_entropy_rate(reference::Q).unwrap(),
            beta: 1.172e-6,
        }
    }

    fn ones(beta: &str) -> EstimationFactor {
        let alpha = &Hp::one() + &Hp::parse(beta).unwrap();
        EstimationFactor::new(std::array::from_fn(|_| Hp::one()), alpha, FactorKind::Pef, None).unwrap()
    }

    fn params(q: f64) -> PlanParams {
        PlanParams { q, eps_b: 0.0, k: 0.0, k0: 0.0, eps_s: 0.05, eps_x: 2f64.powi(-20), gamma: 0.99, gamma_bar: 0.993 }
    }

    #[test]
    fn sigma_examples() {
        let nu = reference::joint();
        assert_eq!(sigma_nu(&ones("1e-3"), &nu).unwrap(), 0.0);
        let f = reference_factor();
        let s = sigma_nu(&f, &nu).unwrap();
        // direct second moment over the 16 cells, independently of the implementation's two-pass form
        let beta = 1.172e-6;
        let x: Vec<f64> = reference::pef_hp().iter().map(|v| v.to_f64().log2() / beta).collect();
        let m1: f64 = (0..16).map(|i| nu.nu[i] * x[i]).sum();
        let m2: f64 = (0..16).map(|i| nu.nu[i] * x[i] * x[i]).sum();
        assert!((s - (m2 - m1 * m1).sqrt()).abs() < 1e-9 * s);
        assert!((s - 63.3384).abs() < 1e-3, "sigma {s}");
        let mut scaled = f.clone();
        scaled.values = scaled.values.map(|v| &v * &Hp::from_f64(1.5));
        assert!((sigma_nu(&scaled, &nu).unwrap() - s).abs() < 1e-9 * s);
    }

    #[test]
    fn appointment_reproduces_reference_budget() {
        let s = sigma_nu(&reference_factor(), &reference::joint()).unwrap();
        let a = reference_appointment(s);
        let (n, h) = appoint_parameters(&a).unwrap();
        assert!(((n as f64) / reference::N_MAX - 1.0).abs() < 0.05, "N {n}");
        // smallest: one fewer trial falls short of γ̄
        let z = Normal::standard().inverse_cdf(a.gamma_bar);
        let c = a.k0 + a.k + certificate_penalty(a.eps_s, a.gamma_bar, a.beta);
        let ok = |n: f64| n * (a.r_nu - a.r_in) - c >= z * a.sigma_nu * n.sqrt();
        assert!(ok(n as f64) && !ok((n - 1) as f64));
        // certified-on-success identity
        let bound = min_entropy_bound(h, a.eps_s, a.gamma, a.beta).unwrap();
        let want = a.k0 + a.k + n as f64 * a.r_in;
        assert!((bound - want).abs() < 1e-6 * want);
        assert!((want / reference::GENERATED_BITS - 1.0).abs() < 0.01, "certified {want}");
    }

    #[test]
    fn appointment_edges() {
        let mut a = reference_appointment(63.0);
        a.gamma = a.gamma_bar;
        assert!(appoint_parameters(&a).is_ok());
        a.r_nu = a.r_in;
        assert!(matches!(appoint_parameters(&a), Err(Error::Infeasible(_))));
        let mut a = reference_appointment(63.0);
        a.r_nu = a.r_in + 1e-20;
        assert!(matches!(appoint_parameters(&a), Err(Error::Infeasible(_))));
    }

    #[test]
    fn certificate_formula_edges() {
        // eps_s = 1: log₂(2/1) = 1, and γ = 1 drops the γ term
        let b = min_entropy_bound(100.0, 1.0, 1.0, 0.5).unwrap();
        assert_eq!(b, 100.0 - 1.0 / 0.5);
        let b2 = min_entropy_bound(100.0, 0.25, 1.0, 0.5).unwrap();
        assert_eq!(b2, 100.0 - 5.0 / 0.5);
    }

    #[test]
    fn bernoulli_half_is_one_bit_per_draw() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let s = BitStream::random(1000, &mut rng);
        let mut r = BitReader::new(&s);
        let mut d = BernoulliDecoder::new(0.5).unwrap();
        for i in 0..1000 {
            let (t, used) = d.draw(&mut r).unwrap();
            assert_eq!(used, 1);
            assert_eq!(t, s.get(i));
        }
        assert!(matches!(d.draw(&mut r), Err(Error::SeedUnderflow { consumed: 1000 })));
    }

    #[test]
    fn bernoulli_quarter_on_two_bit_prefixes() {
        for prefix in 0..4u8 {
            let s = BitStream::from_bits(&[prefix >> 1, prefix & 1]);
            let mut r = BitReader::new(&s);
            let (t, used) = biased_bernoulli(0.25, &mut r).unwrap();
            assert!(used <= 2);
            assert_eq!(t, prefix == 3, "prefix {prefix:02b}");
        }
    }

    #[test]
    fn bernoulli_small_q_statistics() {
        let q = 0.000119;
        let mut seed = RngSeed::new(ChaCha20Rng::seed_from_u64(9));
        let mut d = BernoulliDecoder::new(q).unwrap();
        let n = 1_000_000u64;
        let ones = (0..n).filter(|_| d.draw(&mut seed).unwrap().0).count() as f64;
        let sd = (n as f64 * q * (1.0 - q)).sqrt();
        assert!((ones - n as f64 * q).abs() < 4.0 * sd, "ones {ones}");
        let per_draw = seed.consumed() as f64 / n as f64;
        assert!((per_draw / binary_entropy(q) - 1.0).abs() < 0.1, "bits/draw {per_draw}");
    }

    #[test]
    fn compensated_sum_of_tiny_alternating_terms() {
        let pattern: [f64; 7] = std::array::from_fn(|j| {
            let v = 1e-9 * (1.0 + j as f64 / 10.0);
            if j % 2 == 0 { v } else { -v }
        });
        let n = 1_000_000_000u64;
        let mut s = CompensatedSum::default();
        for i in 0..n {
            s.add(pattern[(i % 7) as usize]);
        }
        let full = n / 7;
        let mut exact = Hp::zero();
        for (j, v) in pattern.iter().enumerate() {
            let c = full + u64::from((j as u64) < n % 7);
            exact += &Hp::from_u64(c) * &Hp::from_f64(*v);
        }
        let exact = exact.to_f64();
        assert!(((s.value() - exact) / exact).abs() < 1e-6, "{} vs {exact}", s.value());
    }

    fn desk_plan(n: u64, h: f64) -> ProtocolPlan {
        let f = reference_factor();
        ProtocolPlan {
            params: params(reference::Q),
            factor: f,
            r_in: input_entropy_rate(reference::Q).unwrap(),
            r_nu: 0.0,
            sigma_nu: 0.0,
            n_max: n,
            h,
            checkpoint_interval: 1000,
        }
    }

    #[test]
    fn neutral_factor_never_succeeds() {
        let mut plan = desk_plan(5000, 1.0);
        plan.factor = ones("1e-3");
        let mut dev = BehaviorDevice { behavior: reference::joint().conditional(), rng: ChaCha20Rng::seed_from_u64(2) };
        let mut seed = RngSeed::new(ChaCha20Rng::seed_from_u64(3));
        let t = run_expansion(&plan, &mut dev, &mut seed).unwrap();
        assert_eq!((t.n, t.log2_g, t.success, t.stop_reason), (5000, 0.0, false, StopReason::Exhausted));
        assert_eq!(t.outputs.len(), 2 * t.n);
        assert_eq!(t.ledger_accounting, ledger_accounting(0.0, plan.r_in, 5000));
        assert_eq!(t.spot_count + t.check_counts.iter().sum::<u64>(), t.n);
        assert_eq!(t.inputs_consumed_bits, seed.consumed());
        assert!(certify(&t, &plan).is_err());
        assert_eq!(t.checkpoints.iter().map(|c| c.n).collect::<Vec<_>>(), vec![1000, 2000, 3000, 4000, 5000]);
    }

    #[test]
    fn register_matches_exact_recount_and_is_deterministic() {
        let plan = desk_plan(20_000, 1e12);
        let run = || {
            let mut dev = BehaviorDevice { behavior: reference::joint().conditional(), rng: ChaCha20Rng::seed_from_u64(5) };
            let mut seed = RngSeed::new(ChaCha20Rng::seed_from_u64(6));
            run_expansion(&plan, &mut dev, &mut seed).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        let exact = a.exact_log2_g(&plan.factor).to_f64();
        assert!((a.log2_g - exact).abs() <= 1e-12 * exact.abs().max(1e-9));
        assert_eq!(a.cell_counts.iter().sum::<u64>(), a.n);
        for c in 0..4 {
            let per_outcome: u64 = (0..4).map(|z| a.cell_counts[c * 4 + z]).sum();
            let obs = (0..a.n).filter(|t| (a.outputs.get(2 * t) as usize) * 2 + a.outputs.get(2 * t + 1) as usize == c).count();
            assert_eq!(obs as u64, per_outcome);
        }
    }

    #[test]
    fn success_is_monotone_in_threshold() {
        let base = desk_plan(50_000, 1e12);
        let mut dev = BehaviorDevice { behavior: reference::joint().conditional(), rng: ChaCha20Rng::seed_from_u64(7) };
        let mut seed = RngSeed::new(ChaCha20Rng::seed_from_u64(8));
        let t = run_expansion(&base, &mut dev, &mut seed).unwrap();
        let reached = t.checkpoints.iter().map(|c| c.log2_g).fold(f64::NEG_INFINITY, f64::max) / base.beta();
        assert!(reached > 0.0);
        let mut prev_n = u64::MAX;
        for frac in [0.9, 0.5, 0.1] {
            let mut plan = base.clone();
            plan.h = reached * frac;
            let mut dev = BehaviorDevice { behavior: reference::joint().conditional(), rng: ChaCha20Rng::seed_from_u64(7) };
            let mut seed = RngSeed::new(ChaCha20Rng::seed_from_u64(8));
            let t = run_expansion(&plan, &mut dev, &mut seed).unwrap();
            assert!(t.success && t.log2_g / plan.beta() >= plan.h);
            assert!(t.n <= prev_n);
            prev_n = t.n;
            let cert = certify(&t, &plan).unwrap();
            assert_eq!(cert.n_stop, t.n);
        }
    }

    #[test]
    fn seed_underflow_keeps_transcript() {
        let plan = desk_plan(10_000_000, 1e12);
        let s = BitStream::random(8, &mut ChaCha20Rng::seed_from_u64(1));
        let mut r = BitReader::new(&s);
        let mut dev = LocalDeterministicDevice { strategy: 0 };
        let err = run_expansion(&plan, &mut dev, &mut r).unwrap_err();
        assert!(matches!(err.error, Error::SeedUnderflow { .. }));
        assert_eq!(err.transcript.stop_reason, StopReason::Aborted);
        assert!(err.transcript.n > 0 && err.transcript.n < 10_000_000);
        assert_eq!(err.transcript.inputs_consumed_bits, 8);
        assert_eq!(err.transcript.outputs.len(), 2 * err.transcript.n);
    }

    #[test]
    fn local_deterministic_device_matches_vertex() {
        for s in 0..16 {
            let v = crate::model::deterministic_behavior(s);
            let mut d = LocalDeterministicDevice { strategy: s };
            for x in 0..2u8 {
                for y in 0..2u8 {
                    let (a, b) = d.respond(x, y).unwrap();
                    assert_eq!(v.get(a as usize, b as usize, x as usize, y as usize), 1.0);
                }
            }
        }
    }

    #[test]
    fn curve_clamps_below_crossover() {
        let plan = desk_plan(3000, 1e12);
        let mut dev = BehaviorDevice { behavior: reference::joint().conditional(), rng: ChaCha20Rng::seed_from_u64(4) };
        let mut seed = RngSeed::new(ChaCha20Rng::seed_from_u64(4));
        let t = run_expansion(&plan, &mut dev, &mut seed).unwrap();
        let curve = net_expansion_curve(&t, &plan);
        assert_eq!(curve.len(), 3);
        for p in &curve {
            assert_eq!(p.net, 0.0);
            assert_eq!(p.consumed, p.n as f64 * plan.r_in);
        }
    }

    #[test]
    fn local_bias_edges() {
        let poly = build_polytope();
        let alpha = &Hp::one() + &Hp::parse("1.66e-9").unwrap();
        let r = local_bias_analysis(0.5, &reference::joint(), &alpha, &poly, 1e-6).unwrap();
        assert_eq!(r.r_in_local, 2.0);
        assert!(!r.feasible && r.r_out < 2.0);
        assert!(2.0 * binary_entropy(1.0 / (1.0 + 1e12)) < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn ledger_identity(k0 in 0.0f64..1e9, n in 0u64..1u64 << 40, q in 1e-6f64..0.5) {
            let r_in = input_entropy_rate(q).unwrap();
            let l = ledger_accounting(k0, r_in, n);
            let back = &(&l - &Hp::from_f64(k0)) - &(&Hp::from_u64(n) * &Hp::from_f64(r_in));
            prop_assert!(back.is_zero());
        }

        #[test]
        fn decoder_matches_dyadic_probability(d in 1u32..6, bits in proptest::collection::vec(0u8..2, 64)) {
            // q = 2^-d: T = 1 exactly when the first d bits are all ones
            let q = 2f64.powi(-(d as i32));
            let s = BitStream::from_bits(&bits);
            let mut r = BitReader::new(&s);
            let (t, used) = biased_bernoulli(q, &mut r).unwrap();
            let all_ones = bits[..d as usize].iter().all(|b| *b == 1);
            prop_assert_eq!(t, all_ones);
            prop_assert!(used <= d as u64);
        }
    }
}
