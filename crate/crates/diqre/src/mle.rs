//! Count tables and maximum-likelihood projection onto non-signaling behaviors with a
//! fixed input marginal.
//!
//! A non-signaling behavior is parameterized by θ = (P(a=0|x)₀,₁, P(b=0|y)₀,₁, P(00|xy)×4);
//! every cell is affine in θ, so the objective Σ w·log P is concave and damped Newton
//! applies directly.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{z_of,ConditionalBehavior, InputDistribution, JointDistribution};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountTable {
    pub counts: [u64; 16],
    pub total: u64,
}

impl CountTable {
    pub fn new(counts: [u64; 16]) -> Result<Self> {
        let total = counts.iter().sum();
        if total == 0 {
            return Err(Error::Parameter("count table is empty".into()));
        }
        Ok(CountTable { counts, total })
    }

    pub fn class_totals(&self) -> [u64; 4] {
        let mut t = [0; 4];
        for (i, c) in self.counts.iter().enumerate() {
            t[z_of(i)] += c;
        }
        t
    }
}

pub fn counts_to_conditional(c: &CountTable) -> Result<ConditionalBehavior> {
    let totals = c.class_totals();
    for z in 0..4 {
        if totals[z] == 0 {
            return Err(Error::InsufficientData { x: (z >> 1) as u8, y: (z & 1) as u8 });
        }
    }
    let mut p = [0.0; 16];
    for i in 0..16 {
        p[i] = c.counts[i] as f64 / totals[z_of(i)] as f64;
    }
    Ok(ConditionalBehavior { p })
}

/// Diagnostics of a projection.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MleReport {
    pub objective: f64,
    /// Upper bound on the optimum: objective plus the squared Newton decrement.
    pub dual_bound: f64,
    /// Stationarity residual: gradient norm in the inverse-Hessian metric.
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Objective after each accepted step, starting from the initial point.
    pub trace: Vec<f64>,
}

/// Log-barrier weight given to cells with zero observed frequency.
const ZERO_CELL_WEIGHT: f64 = 1e-12;
const MAX_ITERS: usize = 500;

type Theta = SVector<f64, 8>;

/// Cell i as (constant, gradient) of its affine map in θ.
fn cell_map(i: usize) -> (f64, Theta) {
    let (a, b, x, y) = (i >> 3 & 1, i >> 2 & 1, i >> 1 & 1, i & 1);
    let z = x * 2 + y;
    let mut g = Theta::zeros();
    let (pa, pb, p00) = (x, 2 + y, 4 + z);
    match (a, b) {
        (0, 0) => {
            g[p00] = 1.0;
            (0.0, g)
        }
        (0, 1) => {
            g[pa] = 1.0;
            g[p00] = -1.0;
            (0.0, g)
        }
        (1, 0) => {
            g[pb] = 1.0;
            g[p00] = -1.0;
            (0.0, g)
        }
        _ => {
            g[pa] = -1.0;
            g[pb] = -1.0;
            g[p00] = 1.0;
            (1.0, g)
        }
    }
}

fn cells(theta: &Theta, maps: &[(f64, Theta); 16]) -> [f64; 16] {
    std::array::from_fn(|i| maps[i].0 + maps[i].1.dot(theta))
}

fn objective(w: &[f64; 16], p: &[f64; 16]) -> f64 {
    (0..16).map(|i| w[i] * p[i].ln()).sum()
}

/// θ of a non-signaling behavior with strictly positive cells.
#[cfg(test)]
fn theta_of(b: &ConditionalBehavior) -> Theta {
    let mut t = Theta::zeros();
    for x in 0..2 {
        t[x] = b.get(0, 0, x, 0) + b.get(0, 1, x, 0);
    }
    for y in 0..2 {
        t[2 + y] = b.get(0, 0, 0, y) + b.get(1, 0, 0, y);
    }
    for z in 0..4 {
        t[4 + z] = b.get(0, 0, z >> 1, z & 1);
    }
    t
}

fn behavior_of(theta: &Theta, maps: &[(f64, Theta); 16]) -> ConditionalBehavior {
    let p = cells(theta, maps).map(|v| v.clamp(1e-300, 1.0));
    ConditionalBehavior { p }
}

/// Equal-weight projection: maximizes Σ p(ab|xy)·log P(ab|xy) over non-signaling P, then ν = μ·P.
pub fn mle_project(p: &ConditionalBehavior, mu: &InputDistribution, tol: f64) -> Result<JointDistribution> {
    mle_project_weighted(p, &[1.0; 4], mu, tol).map(|(j, _)| j)
}

/// Projection with per-class weights on the log-likelihood (e.g. class counts).
pub fn mle_project_weighted(
    p: &ConditionalBehavior,
    class_weights: &[f64; 4],
    mu: &InputDistribution,
    tol: f64,
) -> Result<(JointDistribution, MleReport)> {
    if !(tol > 0.0) {
        return Err(Error::Parameter("MLE tolerance must be positive".into()));
    }
    if class_weights.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::Parameter("class weights must be positive".into()));
    }
    let wsum: f64 = class_weights.iter().sum();
    let w: [f64; 16] = std::array::from_fn(|i| {
        let v = p.p[i] * class_weights[z_of(i)] / wsum * 4.0;
        if v > 0.0 {
            v
        } else {
            ZERO_CELL_WEIGHT
        }
    });
    let w_min = w.iter().cloned().fold(f64::INFINITY, f64::min);
    let maps: [(f64, Theta); 16] = std::array::from_fn(cell_map);

    // uniform behavior: every cell 1/4, strictly inside the polytope
    let mut theta = Theta::from_column_slice(&[0.5, 0.5, 0.5, 0.5, 0.25, 0.25, 0.25, 0.25]);
    let mut cur = cells(&theta, &maps);
    let mut f = objective(&w, &cur);
    let mut trace = vec![f];
    let (mut grad, mut dec2, mut kkt);
    let mut iters = 0;
    let (mut stalled, mut prev_dec2) = (0, f64::INFINITY);
    loop {
        let mut h = SMatrix::<f64, 8, 8>::zeros();
        grad = Theta::zeros();
        for i in 0..16 {
            let g = &maps[i].1;
            grad += g * (w[i] / cur[i]);
            h += g * g.transpose() * (w[i] / (cur[i] * cur[i]));
        }
        let step = match h.cholesky() {
            Some(ch) => ch.solve(&grad),
            None => h.lu().solve(&grad).ok_or_else(|| Error::Numeric("singular MLE Hessian".into()))?,
        };
        dec2 = grad.dot(&step).max(0.0);
        kkt = dec2.sqrt();
        if dec2 <= 1e-30 || stalled >= 3 {
            break;
        }
        if iters >= MAX_ITERS {
            return Err(Error::Optimization(format!(
                "MLE stopped after {iters} iterations: objective {f}, KKT residual {kkt:.3e}, decrement² {dec2:.3e}"
            )));
        }
        // Inside the quadratic region of the self-concordant -f/w_min a full step is an
        // ascent step; there the change in f is below f64 resolution, so skip Armijo.
        let quadratic = dec2 / w_min < 0.1;
        let mut s = 1.0;
        let mut accepted = false;
        while s > 1e-30 {
            let cand = theta + step * s;
            let pc = cells(&cand, &maps);
            if pc.iter().all(|v| *v > 0.0) {
                let fc = objective(&w, &pc);
                if quadratic || fc >= f + 0.25 * s * dec2 {
                    theta = cand;
                    cur = pc;
                    f = fc;
                    accepted = true;
                    break;
                }
            }
            s *= 0.5;
        }
        if !accepted {
            break;
        }
        // quadratic convergence shrinks dec2 by orders of magnitude per step, so steps that fail
        // to halve it are round-off; count them cumulatively since noise can dip below half
        if dec2 > 0.5 * prev_dec2 && quadratic {
            stalled += 1;
        }
        prev_dec2 = dec2;
        trace.push(f);
        iters += 1;
    }
    // -f/w_min is self-concordant, so f* - f <= dec2 once dec2/w_min is below 0.68^2
    let dual_bound = if dec2 / w_min <= 0.68f64.powi(2) { f + dec2 } else { f + dec2 / w_min };
    if kkt > tol || dual_bound - f > tol {
        return Err(Error::Optimization(format!(
            "MLE residuals above tolerance: KKT {kkt:.3e}, gap {:.3e}",
            dual_bound - f
        )));
    }
    let b = behavior_of(&theta, &maps);
    let mut nu = [0.0; 16];
    for i in 0..16 {
        nu[i] = mu.mu[z_of(i)] * b.p[i];
    }
    let joint = JointDistribution::new(nu, mu.clone())?;
    Ok((joint, MleReport { objective: f, dual_bound, kkt_residual: kkt, iterations: iters, trace }))
}

/// Equal-weight log-likelihood Σ p·log P of a behavior against frequencies.
pub fn log_likelihood(p: &ConditionalBehavior, model: &ConditionalBehavior) -> f64 {
    (0..16).filter(|i| p.p[*i] > 0.0).map(|i| p.p[i] * model.p[i].max(1e-300).ln()).sum()
}

/// Simple feasible non-signaling point near `p`: averaged marginals, joint cell clipped into range.
pub fn naive_projection(p: &ConditionalBehavior) -> ConditionalBehavior {
    let mut t = Theta::zeros();
    for x in 0..2 {
        t[x] = (0..2).map(|y| p.get(0, 0, x, y) + p.get(0, 1, x, y)).sum::<f64>() / 2.0;
    }
    for y in 0..2 {
        t[2 + y] = (0..2).map(|x| p.get(0, 0, x, y) + p.get(1, 0, x, y)).sum::<f64>() / 2.0;
    }
    for z in 0..4 {
        let (x, y) = (z >> 1, z & 1);
        let lo = (t[x] + t[2 + y] - 1.0).max(0.0);
        let hi = t[x].min(t[2 + y]);
        t[4 + z] = p.get(0, 0, x, y).clamp(lo, hi);
    }
    let maps: [(f64, Theta); 16] = std::array::from_fn(cell_map);
    let c = cells(&t, &maps).map(|v| v.max(0.0));
    ConditionalBehavior { p: c }
}

#[cfg(test)]
fn theta_round_trip(b: &ConditionalBehavior) -> ConditionalBehavior {
    let maps: [(f64, Theta); 16] = std::array::from_fn(cell_map);
    behavior_of(&theta_of(b), &maps)
}
