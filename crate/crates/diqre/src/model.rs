//! Binary CHSH scenario: behaviors, spot-checking inputs, CHSH statistics and the
//! Tsirelson-bounded polytope of 80 extreme points.
//!
//! Every 16-entry table uses the flat index `a*8 + b*4 + x*2 + y`. Outcome 0 means "no click".

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hp::Hp;

pub const INDEX_CONVENTION: &str = "flat index = a*8 + b*4 + x*2 + y";

pub const fn idx(a: usize, b: usize, x: usize, y: usize) -> usize {
    a * 8 + b * 4 + x * 2 + y
}

/// Input pair `z = x*2 + y` of a flat index.
pub const fn z_of(i: usize) -> usize {
    i & 3
}

/// Outcome pair `c = a*2 + b` of a flat index.
pub const fn c_of(i: usize) -> usize {
    i >> 2
}

pub const fn bits_of(i: usize) -> (usize, usize, usize, usize) {
    ((i >> 3) & 1, (i >> 2) & 1, (i >> 1) & 1, i & 1)
}

/// Conditional distribution P(ab|xy).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalBehavior {
    pub p: [f64; 16],
}

impl ConditionalBehavior {
    pub fn new(p: [f64; 16]) -> Result<Self> {
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parameter("behavior entry outside [0,1]".into()));
        }
        for z in 0..4 {
            let s: f64 = (0..4).map(|c| p[c * 4 + z]).sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::Parameter(format!(
                    "behavior for input class z={z} sums to {s}"
                )));
            }
        }
        Ok(ConditionalBehavior { p })
    }

    /// Builds from rows indexed by `z = x*2+y`, columns by `c = a*2+b`.
    pub fn from_rows(rows: [[f64; 4]; 4]) -> Result<Self> {
        let mut p = [0.0; 16];
        for (z, row) in rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                p[c * 4 + z] = *v;
            }
        }
        Self::new(p)
    }

    pub fn get(&self, a: usize, b: usize, x: usize, y: usize) -> f64 {
        self.p[idx(a, b, x, y)]
    }

    /// Correlators E(xy) = Σ (−1)^{a⊕b} P(ab|xy), ordered by `z`.
    pub fn correlators(&self) -> [f64; 4] {
        let mut e = [0.0; 4];
        for (i, v) in self.p.iter().enumerate() {
            let (a, b, _, _) = bits_of(i);
            e[z_of(i)] += if a == b { *v } else { -*v };
        }
        e
    }

    /// Signed facet value Σ s_z E(z).
    pub fn facet_value(&self, signs: &[i8; 4]) -> f64 {
        let e = self.correlators();
        (0..4).map(|z| signs[z] as f64 * e[z]).sum()
    }

    /// Convex combination `w*self + (1-w)*other`.
    pub fn mix(&self, other: &Self, w: f64) -> Self {
        let mut p = [0.0; 16];
        for i in 0..16 {
            p[i] = w * self.p[i] + (1.0 - w) * other.p[i];
        }
        ConditionalBehavior { p }
    }
}

/// How the input distribution was constructed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// μ = (1 − 3q/4, q/4, q/4, q/4).
    SpotChecking,
    /// Independent local Bernoulli(q) settings for both parties.
    Product,
}

/// Distribution μ(xy) of the inputs, ordered by `z = x*2+y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDistribution {
    pub mu: [f64; 4],
    pub q: f64,
    pub eps_b: f64,
    pub kind: InputKind,
}

impl InputDistribution {
    pub fn spot_checking(q: f64) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Parameter(format!("spot probability q={q} outside (0,1)")));
        }
        let c = q / 4.0;
        Ok(InputDistribution { mu: [1.0 - 3.0 * c, c, c, c], q, eps_b: 0.0, kind: InputKind::SpotChecking })
    }

    pub fn product(q: f64) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Parameter(format!("local bias q={q} outside (0,1)")));
        }
        let p = 1.0 - q;
        Ok(InputDistribution { mu: [p * p, p * q, q * p, q * q], q, eps_b: 0.0, kind: InputKind::Product })
    }

    /// μ recomputed from `q` in high precision.
    pub fn mu_hp(&self) -> [Hp; 4] {
        let q = Hp::from_f64(self.q);
        let one = Hp::one();
        match self.kind {
            InputKind::SpotChecking => {
                let c = &q / &Hp::from_f64(4.0);
                let spot = &one - &(&c * &Hp::from_f64(3.0));
                [spot, c.clone(), c.clone(), c]
            }
            InputKind::Product => {
                let p = &one - &q;
                [&p * &p, &p * &q, &q * &p, &q * &q]
            }
        }
    }
}

/// Ideal spot-checking inputs plus the two extremal biased ones, q(1 ± eps_b).
pub fn build_spot_checking_inputs(
    q: f64,
    eps_b: f64,
) -> Result<(InputDistribution, InputDistribution, InputDistribution)> {
    if !(0.0..1.0).contains(&eps_b) {
        return Err(Error::Parameter(format!("bias eps_b={eps_b} outside [0,1)")));
    }
    let (ql, qu) = (q * (1.0 - eps_b), q * (1.0 + eps_b));
    if !(ql > 0.0 && qu < 1.0) {
        return Err(Error::Parameter(format!("biased spot probability range [{ql}, {qu}] leaves (0,1)")));
    }
    let mut ideal = InputDistribution::spot_checking(q)?;
    let mut low = InputDistribution::spot_checking(ql)?;
    let mut high = InputDistribution::spot_checking(qu)?;
    for d in [&mut ideal, &mut low, &mut high] {
        d.eps_b = eps_b;
    }
    Ok((ideal, low, high))
}

/// Binary entropy in bits.
pub fn binary_entropy(q: f64) -> f64 {
    if q <= 0.0 || q >= 1.0 {
        return 0.0;
    }
    -q * q.log2() - (1.0 - q) * (1.0 - q).log2()
}

/// Seed bits consumed per trial by spot-checking: h(q) + 2q.
pub fn input_entropy_rate(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Parameter(format!("q={q} outside (0,1)")));
    }
    Ok(binary_entropy(q) + 2.0 * q)
}

/// CHSH correlator value S and game value J = 1/2 + S/8.
pub fn chsh_statistics(b: &ConditionalBehavior) -> (f64, f64) {
    let e = b.correlators();
    let s = e[0] + e[1] + e[2] - e[3];
    (s, 0.5 + s / 8.0)
}

/// Joint distribution ν(abxy) = μ(xy)·P(ab|xy).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointDistribution {
    pub nu: [f64; 16],
    pub input: InputDistribution,
}

impl JointDistribution {
    pub fn new(nu: [f64; 16], input: InputDistribution) -> Result<Self> {
        if nu.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Parameter("negative joint probability".into()));
        }
        let total: f64 = nu.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Parameter(format!("joint distribution sums to {total}")));
        }
        let marg = marginal(&nu);
        for z in 0..4 {
            if (marg[z] - input.mu[z]).abs() > 1e-12 {
                return Err(Error::Parameter(format!(
                    "input marginal {} differs from mu {} at z={z}",
                    marg[z], input.mu[z]
                )));
            }
        }
        let d = JointDistribution { nu, input };
        let rep = check_nonsignaling(&d.conditional(), 1e-10);
        if !rep.pass {
            return Err(Error::Parameter(format!(
                "joint distribution signals: alice {:.3e}, bob {:.3e}",
                rep.alice, rep.bob
            )));
        }
        Ok(d)
    }

    /// ν = μ·P without the non-signaling check (used for raw or adversarial behaviors).
    pub fn from_behavior(b: &ConditionalBehavior, input: &InputDistribution) -> Self {
        let mut nu = [0.0; 16];
        for i in 0..16 {
            nu[i] = input.mu[z_of(i)] * b.p[i];
        }
        JointDistribution { nu, input: input.clone() }
    }

    pub fn conditional(&self) -> ConditionalBehavior {
        let marg = marginal(&self.nu);
        let mut p = [0.0; 16];
        for i in 0..16 {
            p[i] = if marg[z_of(i)] > 0.0 { self.nu[i] / marg[z_of(i)] } else { 0.25 };
        }
        ConditionalBehavior { p }
    }
}

fn marginal(nu: &[f64; 16]) -> [f64; 4] {
    let mut m = [0.0; 4];
    for (i, v) in nu.iter().enumerate() {
        m[z_of(i)] += v;
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VertexKind {
    /// Index into the lexicographic enumeration of (a(x=0), a(x=1), b(y=0), b(y=1)).
    LocalDeterministic { index: usize },
    /// λ·PR(facet) + (1−λ)·D(deterministic) with λ = √2 − 1.
    PrMixture { facet: usize, deterministic: usize },
}

#[derive(Clone, Debug)]
pub struct PolytopeModel {
    pub vertices: Vec<ConditionalBehavior>,
    pub provenance: Vec<VertexKind>,
}

pub const POLYTOPE_VERSION: &str = "chsh-tsirelson-80/v1";

/// The 8 CHSH facets: sign patterns of (E00, E01, E10, E11) with an odd number of minus
/// signs, lexicographic with + before −.
pub fn facets() -> Vec<[i8; 4]> {
    let mut out = Vec::with_capacity(8);
    for m in 0..16u8 {
        let s: [i8; 4] = std::array::from_fn(|k| if (m >> (3 - k)) & 1 == 1 { -1 } else { 1 });
        if m.count_ones() % 2 == 1 {
            out.push(s);
        }
    }
    out
}

pub fn deterministic_behavior(index: usize) -> ConditionalBehavior {
    let r = [(index >> 3) & 1, (index >> 2) & 1, (index >> 1) & 1, index & 1];
    let mut p = [0.0; 16];
    for x in 0..2 {
        for y in 0..2 {
            p[idx(r[x], r[2 + y], x, y)] = 1.0;
        }
    }
    ConditionalBehavior { p }
}

/// PR box attaining 4 on the given facet.
pub fn pr_box(signs: &[i8; 4]) -> ConditionalBehavior {
    let mut p = [0.0; 16];
    for (i, v) in p.iter_mut().enumerate() {
        let (a, b, _, _) = bits_of(i);
        let parity: i8 = if a == b { 1 } else { -1 };
        if parity == signs[z_of(i)] {
            *v = 0.5;
        }
    }
    ConditionalBehavior { p }
}

pub fn build_polytope() -> PolytopeModel {
    let lambda = std::f64::consts::SQRT_2 - 1.0;
    let mut vertices: Vec<ConditionalBehavior> = (0..16).map(deterministic_behavior).collect();
    let mut provenance: Vec<VertexKind> = (0..16).map(|index| VertexKind::LocalDeterministic { index }).collect();
    for (f, s) in facets().iter().enumerate() {
        let pr = pr_box(s);
        for d in 0..16 {
            let det = &vertices[d];
            if (det.facet_value(s) - 2.0).abs() < 1e-12 {
                let v = pr.mix(det, lambda);
                vertices.push(v);
                provenance.push(VertexKind::PrMixture { facet: f, deterministic: d });
            }
        }
    }
    PolytopeModel { vertices, provenance }
}

impl PolytopeModel {
    /// Vertex entries recomputed in high precision from the provenance (λ = √2 − 1 exactly).
    pub fn vertex_hp(&self, k: usize) -> [Hp; 16] {
        match self.provenance[k] {
            VertexKind::LocalDeterministic { index } => {
                let d = deterministic_behavior(index);
                std::array::from_fn(|i| Hp::from_f64(d.p[i]))
            }
            VertexKind::PrMixture { facet, deterministic } => {
                let lambda = &Hp::from_f64(2.0).sqrt() - &Hp::one();
                let rest = &Hp::one() - &lambda;
                let pr = pr_box(&facets()[facet]);
                let d = deterministic_behavior(deterministic);
                std::array::from_fn(|i| &(&lambda * &Hp::from_f64(pr.p[i])) + &(&rest * &Hp::from_f64(d.p[i])))
            }
        }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalingReport {
    /// max over (a, x) of |P(a|x,y=0) − P(a|x,y=1)|
    pub alice: f64,
    /// max over (b, y) of |P(b|x=0,y) − P(b|x=1,y)|
    pub bob: f64,
    pub tol: f64,
    pub pass: bool,
}

pub fn check_nonsignaling(b: &ConditionalBehavior, tol: f64) -> SignalingReport {
    let (mut alice, mut bob) = (0.0f64, 0.0f64);
    for x in 0..2 {
        let pa = |y| b.get(0, 0, x, y) + b.get(0, 1, x, y);
        alice = alice.max((pa(0) - pa(1)).abs());
    }
    for y in 0..2 {
        let pb = |x| b.get(0, 0, x, y) + b.get(1, 0, x, y);
        bob = bob.max((pb(0) - pb(1)).abs());
    }
    SignalingReport { alice, bob, tol, pass: alice <= tol && bob <= tol }
}
