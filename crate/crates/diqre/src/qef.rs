//! Rescaling a PEF into a QEF: the adversary's measurement family, the inner objective over
//! density operators, Frank-Wolfe bounds at fixed measurement angles, and a certified upper
//! bound over all angles from a refined grid.
//!
//! The inner objective is f(τ, θ) = Σ_cz μ(z)·F̃(cz)·⟨φ_cz|τ^{1/α}|φ_cz⟩^α, with F̃ = F'/ΣF' and
//! φ_cz the rank-1 product vectors of the measurement at angles θ. It is concave in τ.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use nalgebra::{ComplexField, Matrix2, Matrix4, SymmetricEigen, Vector2, Vector4};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hp::Hp;
use crate::model::{z_of, InputDistribution};
use crate::pef::{EstimationFactor, FactorKind};

/// Scalar field of the 4×4 operators: `f64` on the grid path, `Complex64` for general τ.
pub trait Scalar: ComplexField<RealField = f64> + Copy {}
impl Scalar for f64 {}
impl Scalar for Complex64 {}

/// Projective measurements Q_{a|0} = (I + (−1)^a σ_z)/2 and
/// Q_{a|1;θ} = (I + (−1)^a (cos θ σ_z + sin θ σ_x))/2 on each side.
#[derive(Clone, Debug)]
pub struct AdversaryMeasurement {
    pub theta: (f64, f64),
    /// Unit vector spanning P_{c|z;θ}, indexed by the flat cell index.
    pub vectors: [Vector4<f64>; 16],
}

/// Unit vector spanning Q_{a|x;θ}.
fn local_vector(theta: f64, a: usize, x: usize) -> Vector2<f64> {
    let h = if x == 0 { 0.0 } else { theta / 2.0 };
    let (s, c) = h.sin_cos();
    if a == 0 {
        Vector2::new(c, s)
    } else {
        Vector2::new(-s, c)
    }
}

pub fn adversary_measurements(theta: (f64, f64)) -> Result<AdversaryMeasurement> {
    if !(theta.0.is_finite() && theta.1.is_finite()) {
        return Err(Error::Parameter(format!("measurement angles {theta:?} are not finite")));
    }
    let vectors = std::array::from_fn(|i| {
        let (a, b, x, y) = crate::model::bits_of(i);
        let u = local_vector(theta.0, a, x);
        let v = local_vector(theta.1, b, y);
        Vector4::new(u[0] * v[0], u[0] * v[1], u[1] * v[0], u[1] * v[1])
    });
    Ok(AdversaryMeasurement { theta, vectors })
}

impl AdversaryMeasurement {
    pub fn projector(&self, i: usize) -> Matrix4<f64> {
        self.vectors[i] * self.vectors[i].transpose()
    }

    /// Q_{a|x} on one side (`side` 0 for θ₁, 1 for θ₂).
    pub fn local_projector(&self, side: usize, a: usize, x: usize) -> Matrix2<f64> {
        let th = if side == 0 { self.theta.0 } else { self.theta.1 };
        let v = local_vector(th, a, x);
        v * v.transpose()
    }

    fn vectors_as<T: Scalar>(&self) -> [Vector4<T>; 16] {
        self.vectors.map(|v| v.map(T::from_real))
    }
}

/// Validated 4×4 density operator.
#[derive(Clone, Debug)]
pub struct DensityOperator<T: Scalar> {
    pub m: Matrix4<T>,
}

impl<T: Scalar> DensityOperator<T> {
    /// Checks Hermiticity, unit trace and eigenvalues ≥ −1e-12.
    pub fn new(m: Matrix4<T>) -> Result<Self> {
        if (m - m.adjoint()).norm() > 1e-12 {
            return Err(Error::Numeric("density operator is not Hermitian".into()));
        }
        let tr = m.trace().real();
        if (tr - 1.0).abs() > 1e-12 {
            return Err(Error::Numeric(format!("density operator trace {tr}")));
        }
        let eig = SymmetricEigen::new(m);
        if eig.eigenvalues.iter().any(|l| *l < -1e-12) {
            return Err(Error::Numeric("density operator has a negative eigenvalue".into()));
        }
        Ok(DensityOperator { m })
    }

    pub fn maximally_mixed() -> Self {
        DensityOperator { m: Matrix4::identity().map(|v: T| v * T::from_real(0.25)) }
    }
}

/// Weights μ(z)·F̃(cz) and the power of one inner problem.
#[derive(Clone, Debug)]
pub struct InnerProblem {
    pub weights: [f64; 16],
    /// α − 1.
    pub beta: f64,
    /// f₀ = ΣF', converting bounds on f̃ into overall rescaling bounds (1 when unknown).
    pub scale: f64,
}

impl InnerProblem {
    /// `ftilde` must sum to 1.
    pub fn new(ftilde: &[f64; 16], mu: &InputDistribution, beta: f64) -> Result<Self> {
        let s: f64 = ftilde.iter().sum();
        if (s - 1.0).abs() > 1e-12 || ftilde.iter().any(|v| *v < 0.0) {
            return Err(Error::Parameter(format!("normalized factor sums to {s}")));
        }
        if !(beta > 0.0) {
            return Err(Error::Parameter("power must exceed 1".into()));
        }
        Ok(InnerProblem { weights: std::array::from_fn(|i| mu.mu[z_of(i)] * ftilde[i]), beta, scale: 1.0 })
    }

    /// F̃ = F'/ΣF' with f₀ = ΣF' also returned.
    pub fn from_factor(f: &EstimationFactor, mu: &InputDistribution) -> Result<(Self, Hp)> {
        let f0: Hp = f.values.iter().sum();
        let ft: [f64; 16] = std::array::from_fn(|i| (&f.values[i] / &f0).to_f64());
        let s: f64 = ft.iter().sum();
        let ft = ft.map(|v| v / s);
        let mut prob = InnerProblem::new(&ft, mu, f.beta().to_f64())?;
        prob.scale = f0.to_f64();
        Ok((prob, f0))
    }

    pub fn alpha(&self) -> f64 {
        1.0 + self.beta
    }

    fn p(&self) -> f64 {
        1.0 / (1.0 + self.beta)
    }
}

/// (a^p − b^p)/(a − b), accurate for nearby arguments; p·a^{p−1} when a = b.
fn divided_difference(a: f64, b: f64, ap: f64, bp: f64, p: f64) -> f64 {
    if a == b {
        return p * a.powf(p - 1.0);
    }
    let (hi, lo, lop) = if a > b { (a, b, bp) } else { (b, a, ap) };
    let d = hi - lo;
    lop * (p * (d / lo).ln_1p()).exp_m1() / d
}

/// Floor applied to eigenvalues before the fractional power.
const EIG_FLOOR: f64 = 1e-300;

fn evaluate<T: Scalar>(
    tau: &Matrix4<T>,
    phis: &[Vector4<T>; 16],
    prob: &InnerProblem,
    want_grad: bool,
) -> Result<(f64, Option<Matrix4<T>>)> {
    if (tau - tau.adjoint()).norm() > 1e-9 * tau.norm().max(1.0) {
        return Err(Error::Numeric("inner objective needs a Hermitian operator".into()));
    }
    let eig = SymmetricEigen::new(*tau);
    let (lam, u) = (eig.eigenvalues, eig.eigenvectors);
    if lam.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("eigendecomposition failed".into()));
    }
    let p = prob.p();
    let alpha = prob.alpha();
    let lam = lam.map(|v| v.max(EIG_FLOOR));
    let lp = lam.map(|v| v.powf(p));
    let ua = u.adjoint();
    let mut value = 0.0;
    let mut m = Matrix4::<T>::zeros();
    for j in 0..16 {
        if prob.weights[j] == 0.0 {
            continue;
        }
        let y = ua * phis[j];
        let s: f64 = (0..4).map(|k| y[k].modulus_squared() * lp[k]).sum();
        if s <= 0.0 {
            continue;
        }
        let sb = (prob.beta * s.ln()).exp();
        value += prob.weights[j] * s * sb;
        if want_grad {
            let w = T::from_real(prob.weights[j] * alpha * sb);
            m += (y * y.adjoint()) * w;
        }
    }
    if !want_grad {
        return Ok((value, None));
    }
    let mut gt = m;
    for k in 0..4 {
        for l in 0..4 {
            gt[(k, l)] *= T::from_real(divided_difference(lam[k], lam[l], lp[k], lp[l], p));
        }
    }
    Ok((value, Some(u * gt * ua)))
}

/// Value and gradient (w.r.t. τ, as a Hermitian matrix G with df = Re Tr[G·dτ]).
pub fn inner_objective<T: Scalar>(
    tau: &DensityOperator<T>,
    meas: &AdversaryMeasurement,
    prob: &InnerProblem,
) -> Result<(f64, Matrix4<T>)> {
    let (v, g) = evaluate(&tau.m, &meas.vectors_as(), prob, true)?;
    Ok((v, g.expect("gradient requested")))
}

pub fn inner_value<T: Scalar>(tau: &Matrix4<T>, meas: &AdversaryMeasurement, prob: &InnerProblem) -> Result<f64> {
    Ok(evaluate(tau, &meas.vectors_as(), prob, false)?.0)
}

/// Relative allowance for `f64` evaluation error added to every certified upper bound.
pub const EVAL_MARGIN: f64 = 1e-13;

#[derive(Clone, Debug)]
pub struct FwResult {
    /// f at `tau`, the best iterate.
    pub lower: f64,
    /// Concavity bound f(τ) + max_S Tr[∇f(τ)(S − τ)], minimized over iterates, plus margin.
    pub upper: f64,
    pub converged: bool,
    pub iterations: usize,
    pub tau: Matrix4<f64>,
    /// (lower, upper) after each iteration.
    pub trace: Vec<(f64, f64)>,
}

fn frobenius_dot(a: &Matrix4<f64>, b: &Matrix4<f64>) -> f64 {
    a.component_mul(b).sum()
}

/// Bounds max_τ f(τ, θ) by conditional gradient over real density operators.
///
/// The measurement vectors are real, so conjugating τ leaves f unchanged and concavity puts a
/// maximizer at the real part; the real spectraplex therefore loses nothing. Each step moves
/// toward the top eigenvector of the gradient with an exact line search on the (monotone)
/// directional derivative.
pub fn frank_wolfe_ftheta(
    theta: (f64, f64),
    prob: &InnerProblem,
    tol: f64,
    max_iters: usize,
    warm: Option<&Matrix4<f64>>,
) -> Result<FwResult> {
    if !(tol > 0.0) {
        return Err(Error::Parameter("Frank-Wolfe tolerance must be positive".into()));
    }
    let meas = adversary_measurements(theta)?;
    let phis = meas.vectors;
    let mut tau = warm.copied().unwrap_or_else(|| Matrix4::identity() * 0.25);
    let (mut f, g) = evaluate(&tau, &phis, prob, true)?;
    let mut g = g.expect("gradient");
    let mut upper = f64::INFINITY;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut restarted = false;
    let (mut best_f, mut best_tau) = (f, tau);
    let mut iters = 0;
    while iters < max_iters {
        let eg = SymmetricEigen::new(g);
        let top = eg.eigenvalues.imax();
        let v = eg.eigenvectors.column(top).into_owned();
        let gap = (eg.eigenvalues[top] - frobenius_dot(&g, &tau)).max(0.0);
        upper = upper.min(f + gap);
        if f > best_f {
            (best_f, best_tau) = (f, tau);
        }
        trace.push((best_f, upper));
        if upper - best_f <= tol {
            converged = true;
            break;
        }
        iters += 1;
        let dir = v * v.transpose() - tau;
        let at = |gamma: f64| -> Result<(f64, Matrix4<f64>, f64)> {
            let t = tau + dir * gamma;
            let (fv, gv) = evaluate(&t, &phis, prob, true)?;
            let gv = gv.expect("gradient");
            let d = frobenius_dot(&gv, &dir);
            Ok((fv, gv, d))
        };
        // Illinois root finding of the directional derivative on [0, 1]
        let (f1, g1, d1) = at(1.0)?;
        let (mut best_gamma, mut best) = (1.0, (f1, g1));
        if d1 < 0.0 {
            let (mut lo, mut dlo, mut hi, mut dhi) = (0.0, gap, 1.0, d1);
            let mut side = 0i8;
            for _ in 0..40 {
                let gm = (lo * dhi - hi * dlo) / (dhi - dlo);
                let (fm, gmat, dm) = at(gm)?;
                if fm > best.0 || best_gamma == 1.0 && fm >= best.0 {
                    best_gamma = gm;
                    best = (fm, gmat);
                }
                if dm.abs() <= 1e-3 * gap || hi - lo < 1e-15 {
                    break;
                }
                if dm > 0.0 {
                    lo = gm;
                    dlo = dm;
                    if side == 1 {
                        dhi *= 0.5;
                    }
                    side = 1;
                } else {
                    hi = gm;
                    dhi = dm;
                    if side == -1 {
                        dlo *= 0.5;
                    }
                    side = -1;
                }
            }
        }
        if best.0 < f {
            if restarted {
                // no ascent in floating point: the current iterate is as good as it gets
                break;
            }
            // A stale warm start can sit on a nearly singular face where the line search
            // cannot make progress; pull it back into the interior once.
            restarted = true;
            tau = tau * 0.5 + Matrix4::identity() * 0.125;
            let (fr, gr) = evaluate(&tau, &phis, prob, true)?;
            f = fr;
            g = gr.expect("gradient");
            continue;
        }
        tau += dir * best_gamma;
        f = best.0;
        g = best.1;
    }
    if f > best_f {
        (best_f, best_tau) = (f, tau);
    }
    let upper = upper * (1.0 + EVAL_MARGIN) + EVAL_MARGIN;
    Ok(FwResult { lower: best_f, upper, converged, iterations: iters, tau: best_tau, trace })
}

/// Tuning of the grid search. Tolerances and targets are relative to the overall
/// rescaling factor f₀·f̃.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridOptions {
    /// Frank-Wolfe gap per corner.
    pub fw_tol: f64,
    pub fw_max_iters: usize,
    /// Stop once f₀·(global_upper − global_lower) ≤ target_gap.
    pub target_gap: f64,
    /// Also stop once f₀·global_upper ≤ 1 + target_excess.
    pub target_excess: Option<f64>,
    /// Deepest allowed cell (depth 0 has width π/2).
    pub max_depth: u32,
    pub max_corners: usize,
    /// Cells refined per parallel round.
    pub batch: usize,
}

impl Default for GridOptions {
    /// Desk scale: certify a rescaling factor of at most 1 + 1e-6.
    fn default() -> Self {
        GridOptions {
            fw_tol: 5e-9,
            fw_max_iters: 20_000,
            target_gap: 1e-12,
            target_excess: Some(1e-6),
            max_depth: 16,
            max_corners: 30_000_000,
            batch: 256,
        }
    }
}

/// Grid coordinates are integers in units of π/2^RESOLUTION.
pub const RESOLUTION: u32 = 40;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridCell {
    pub depth: u32,
    /// Lower-left corner in grid units.
    pub i: u64,
    pub j: u64,
    pub upper: f64,
}

impl GridCell {
    pub fn width_units(&self) -> u64 {
        1u64 << (RESOLUTION - 1 - self.depth)
    }

    pub fn width(&self) -> f64 {
        std::f64::consts::PI / (1u64 << (self.depth + 1)) as f64
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CornerBound {
    pub i: u64,
    pub j: u64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridProgress {
    pub depth: u32,
    pub corners: usize,
    pub global_lower: f64,
    pub global_upper: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridCertificate {
    pub beta: f64,
    pub scale: f64,
    pub cells: Vec<GridCell>,
    pub corners: Vec<CornerBound>,
    pub global_lower: f64,
    pub global_upper: f64,
    pub refinement_depth: u32,
    pub converged: bool,
    /// Bounds each time a deeper cell is first created.
    pub trace: Vec<GridProgress>,
}

/// (φ/sin φ)^α for each side of a square cell of width φ, with rounding allowance.
pub fn cell_inflation(phi: f64, alpha: f64) -> Result<f64> {
    if !(phi > 0.0 && phi < std::f64::consts::PI) {
        return Err(Error::Parameter(format!("cell width {phi} outside (0, π)")));
    }
    let one = alpha * (phi / phi.sin()).ln();
    Ok((2.0 * one).exp() * (1.0 + 8.0 * f64::EPSILON))
}

fn theta_of(i: u64, j: u64) -> (f64, f64) {
    let unit = std::f64::consts::PI / (1u64 << RESOLUTION) as f64;
    (i as f64 * unit, j as f64 * unit)
}

#[derive(Clone)]
struct CornerState {
    lower: f64,
    upper: f64,
    tau: [f32; 10],
}

fn pack(t: &Matrix4<f64>) -> [f32; 10] {
    let mut out = [0f32; 10];
    let mut n = 0;
    for r in 0..4 {
        for c in r..4 {
            out[n] = t[(r, c)] as f32;
            n += 1;
        }
    }
    out
}

/// Warm start recovered from a stored iterate, renormalized to unit trace.
fn unpack(v: &[f32; 10]) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    let mut n = 0;
    for r in 0..4 {
        for c in r..4 {
            m[(r, c)] = v[n] as f64;
            m[(c, r)] = v[n] as f64;
            n += 1;
        }
    }
    let e = SymmetricEigen::new(m);
    let lam = e.eigenvalues.map(|l| l.max(0.0));
    let m = e.eigenvectors * Matrix4::from_diagonal(&lam) * e.eigenvectors.transpose();
    let m = (m + m.transpose()) * 0.5;
    m / m.trace()
}

#[derive(PartialEq)]
struct HeapCell {
    upper: f64,
    depth: u32,
    i: u64,
    j: u64,
}

impl Eq for HeapCell {}

impl Ord for HeapCell {
    fn cmp(&self, o: &Self) -> Ordering {
        self.upper
            .total_cmp(&o.upper)
            .then(o.depth.cmp(&self.depth))
            .then(o.i.cmp(&self.i))
            .then(o.j.cmp(&self.j))
    }
}

impl PartialOrd for HeapCell {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Certified bound on max_{θ∈[0,π]²} max_τ f(τ, θ) by best-first refinement.
///
/// A cell of width φ is bounded by (φ/sin φ)^{2α} times the largest corner upper bound
/// (and by its parent's bound). Cells are split into quarters, highest bound first.
pub fn grid_bound_fmax(prob: &InnerProblem, opts: &GridOptions) -> Result<GridCertificate> {
    if opts.max_depth + 2 > RESOLUTION {
        return Err(Error::Parameter("grid depth exceeds coordinate resolution".into()));
    }
    let alpha = prob.alpha();
    let mut corners: HashMap<(u64, u64), CornerState> = HashMap::new();
    let half = 1u64 << (RESOLUTION - 1);
    let fw_tol = opts.fw_tol / prob.scale;
    let evaluate_corners = |reqs: BTreeMap<(u64, u64), Option<[f32; 10]>>| -> Result<Vec<((u64, u64), CornerState)>> {
        let reqs: Vec<_> = reqs.into_iter().collect();
        reqs.par_iter()
            .map(|((i, j), warm)| {
                let w = warm.as_ref().map(unpack);
                let r = frank_wolfe_ftheta(theta_of(*i, *j), prob, fw_tol, opts.fw_max_iters, w.as_ref())?;
                Ok(((*i, *j), CornerState { lower: r.lower, upper: r.upper, tau: pack(&r.tau) }))
            })
            .collect()
    };
    let mut reqs = BTreeMap::new();
    for a in 0..3u64 {
        for b in 0..3u64 {
            reqs.insert((a * half, b * half), None);
        }
    }
    for (k, v) in evaluate_corners(reqs)? {
        corners.insert(k, v);
    }
    let corner_max = |corners: &HashMap<(u64, u64), CornerState>, i: u64, j: u64, w: u64| -> f64 {
        [(i, j), (i + w, j), (i, j + w), (i + w, j + w)]
            .iter()
            .map(|k| corners[k].upper)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut heap = BinaryHeap::new();
    let infl0 = cell_inflation(std::f64::consts::FRAC_PI_2, alpha)?;
    for (i, j) in [(0, 0), (half, 0), (0, half), (half, half)] {
        heap.push(HeapCell { upper: infl0 * corner_max(&corners, i, j, half), depth: 0, i, j });
    }
    let mut global_lower = corners.values().map(|c| c.lower).fold(f64::NEG_INFINITY, f64::max);
    let mut depth = 0;
    let mut trace = vec![GridProgress {
        depth,
        corners: corners.len(),
        global_lower,
        global_upper: heap.peek().expect("nonempty").upper,
    }];
    let mut converged = false;
    loop {
        let top = heap.peek().expect("grid has cells").upper;
        let mut threshold = global_lower + opts.target_gap / prob.scale;
        if let Some(t) = opts.target_excess {
            threshold = threshold.max((1.0 + t) / prob.scale);
        }
        if top <= threshold {
            converged = true;
            break;
        }
        if corners.len() >= opts.max_corners {
            break;
        }
        let mut batch = Vec::new();
        while batch.len() < opts.batch {
            match heap.peek() {
                Some(c) if c.upper > threshold && c.depth < opts.max_depth => batch.push(heap.pop().expect("peeked")),
                _ => break,
            }
        }
        if batch.is_empty() {
            // the worst cell is at the depth limit
            break;
        }
        let mut reqs: BTreeMap<(u64, u64), Option<[f32; 10]>> = BTreeMap::new();
        for c in &batch {
            let h = 1u64 << (RESOLUTION - 2 - c.depth);
            let warm = corners[&(c.i, c.j)].tau;
            for (di, dj) in [(1, 0), (0, 1), (1, 1), (2, 1), (1, 2)] {
                let key = (c.i + di * h, c.j + dj * h);
                if !corners.contains_key(&key) {
                    reqs.entry(key).or_insert(Some(warm));
                }
            }
        }
        for (k, v) in evaluate_corners(reqs)? {
            global_lower = global_lower.max(v.lower);
            corners.insert(k, v);
        }
        let deepest = batch.iter().map(|c| c.depth + 1).max().unwrap_or(depth);
        for c in batch {
            let d = c.depth + 1;
            let h = 1u64 << (RESOLUTION - 2 - c.depth);
            let infl = cell_inflation(std::f64::consts::PI / (1u64 << (d + 1)) as f64, alpha)?;
            for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let (i, j) = (c.i + di * h, c.j + dj * h);
                let u = (infl * corner_max(&corners, i, j, h)).min(c.upper);
                heap.push(HeapCell { upper: u, depth: d, i, j });
            }
        }
        if deepest > depth {
            depth = deepest;
            trace.push(GridProgress {
                depth,
                corners: corners.len(),
                global_lower,
                global_upper: heap.peek().expect("nonempty").upper,
            });
        }
    }
    let global_upper = heap.peek().expect("nonempty").upper;
    trace.push(GridProgress { depth, corners: corners.len(), global_lower, global_upper });
    let mut cells: Vec<GridCell> =
        heap.into_iter().map(|c| GridCell { depth: c.depth, i: c.i, j: c.j, upper: c.upper }).collect();
    cells.sort_by_key(|c| (c.depth, c.i, c.j));
    let mut corner_list: Vec<CornerBound> =
        corners.into_iter().map(|((i, j), c)| CornerBound { i, j, lower: c.lower, upper: c.upper }).collect();
    corner_list.sort_by_key(|c| (c.i, c.j));
    Ok(GridCertificate {
        beta: prob.beta,
        scale: prob.scale,
        cells,
        corners: corner_list,
        global_lower,
        global_upper,
        refinement_depth: depth,
        converged,
        trace,
    })
}

/// Re-derives every cell bound from the stored corners and checks that the cells tile [0,π]².
pub fn audit_certificate(cert: &GridCertificate) -> Result<()> {
    let alpha = 1.0 + cert.beta;
    let corners: HashMap<(u64, u64), &CornerBound> = cert.corners.iter().map(|c| ((c.i, c.j), c)).collect();
    let full = 1u64 << RESOLUTION;
    let mut area: u128 = 0;
    let mut max_upper = f64::NEG_INFINITY;
    for c in &cert.cells {
        let w = c.width_units();
        if c.i + w > full || c.j + w > full || c.i % w != 0 || c.j % w != 0 {
            return Err(Error::Audit(format!("cell ({}, {}) at depth {} is misaligned", c.i, c.j, c.depth)));
        }
        let mut m = f64::NEG_INFINITY;
        for k in [(c.i, c.j), (c.i + w, c.j), (c.i, c.j + w), (c.i + w, c.j + w)] {
            let cb = corners.get(&k).ok_or_else(|| Error::Audit(format!("corner {k:?} missing")))?;
            if cb.lower > cb.upper {
                return Err(Error::Audit(format!("corner {k:?} has lower > upper")));
            }
            m = m.max(cb.upper);
        }
        let bound = cell_inflation(c.width(), alpha)? * m;
        if bound > c.upper * (1.0 + 4.0 * f64::EPSILON) && c.depth == 0 {
            return Err(Error::Audit(format!("cell ({}, {}) bound {bound} exceeds recorded {}", c.i, c.j, c.upper)));
        }
        // deeper cells may carry their parent's smaller bound; either value is valid
        max_upper = max_upper.max(c.upper);
        area += (w as u128) * (w as u128);
    }
    if area != (full as u128) * (full as u128) {
        return Err(Error::Audit("cells do not tile the angle domain".into()));
    }
    if cert.global_upper < max_upper {
        return Err(Error::Audit("global upper bound below a cell bound".into()));
    }
    let lmax = cert.corners.iter().map(|c| c.lower).fold(f64::NEG_INFINITY, f64::max);
    if cert.global_lower > lmax || cert.global_lower > cert.global_upper {
        return Err(Error::Audit("global lower bound not attained".into()));
    }
    Ok(())
}

/// QEF F'/(f₀·f̃) from a feasible PEF, with f̃ the largest grid bound over the constraint
/// input distributions (the two extremes under bias, or the single ideal one).
pub fn rescale_to_qef(
    pef: &EstimationFactor,
    mus: &[InputDistribution],
    opts: &GridOptions,
) -> Result<(EstimationFactor, Vec<GridCertificate>)> {
    if pef.kind != FactorKind::Pef {
        return Err(Error::Parameter("rescaling expects a PEF".into()));
    }
    if mus.is_empty() {
        return Err(Error::Parameter("rescaling needs at least one input distribution".into()));
    }
    let mut certs = Vec::with_capacity(mus.len());
    let mut f0 = Hp::zero();
    for mu in mus {
        let (prob, s) = InnerProblem::from_factor(pef, mu)?;
        f0 = s;
        certs.push(grid_bound_fmax(&prob, opts)?);
    }
    let worst = certs.iter().map(|c| c.global_upper).fold(f64::NEG_INFINITY, f64::max);
    let bound = (&f0 * &Hp::from_f64(worst)).max(Hp::one());
    let values = pef.values.clone().map(|v| &v / &bound);
    let qef = EstimationFactor::new(values, pef.alpha.clone(), FactorKind::Qef, Some(bound))?;
    Ok((qef, certs))
}

/// Overall rescaling bound f₀·max(f̃) a pair of certificates implies for `pef`.
pub fn overall_bound(pef: &EstimationFactor, certs: &[GridCertificate]) -> f64 {
    let f0: Hp = pef.values.iter().sum();
    let m = certs.iter().map(|c| c.global_upper).fold(f64::NEG_INFINITY, f64::max);
    (&f0 * &Hp::from_f64(m)).to_f64()
}

/// Random density operator: a Ginibre draw of random rank, normalized.
pub fn random_density<R: Rng + ?Sized>(rng: &mut R) -> Matrix4<Complex64> {
    let rank = rng.random_range(1..=4);
    let mut m = Matrix4::<Complex64>::zeros();
    for _ in 0..rank {
        let v = Vector4::from_fn(|_, _| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        m += v * v.adjoint();
    }
    let tr = m.trace().re;
    let m = m / Complex64::new(tr, 0.0);
    (m + m.adjoint()) * Complex64::new(0.5, 0.0)
}

/// Largest Σ μ(z)·F(cz)·⟨φ|τ^{1/α}|φ⟩^α over random (θ, τ) samples for each μ.
pub fn soundness_audit(f: &EstimationFactor, mus: &[InputDistribution], samples: usize, seed: u64) -> Result<f64> {
    let beta = f.beta().to_f64();
    let vals: [f64; 16] = f.values.clone().map(|v| v.to_f64());
    let mut worst = f64::NEG_INFINITY;
    for mu in mus {
        let prob = InnerProblem { weights: std::array::from_fn(|i| mu.mu[z_of(i)] * vals[i]), beta, scale: 1.0 };
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for _ in 0..samples {
            let theta = (rng.random_range(0.0..std::f64::consts::PI), rng.random_range(0.0..std::f64::consts::PI));
            let meas = adversary_measurements(theta)?;
            let tau = random_density(&mut rng);
            worst = worst.max(inner_value(&tau, &meas, &prob)?);
        }
    }
    Ok(worst)
}
