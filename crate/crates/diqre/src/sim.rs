//! Eberhard-style photonic CHSH device: a partially entangled polarization state with
//! H/V dephasing, lossy threshold detectors and a vacuum component.

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{idx, ConditionalBehavior};
use crate::reference;

/// Device parameters; angles in radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceModel {
    pub theta_state: f64,
    pub alice_angles: (f64, f64),
    pub bob_angles: (f64, f64),
    pub eta_a: f64,
    pub eta_b: f64,
    pub p_pair: f64,
    pub visibility: f64,
}

/// Outcome bits, 1 = click.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrialOutcome {
    pub a: u8,
    pub b: u8,
}

impl DeviceModel {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.eta_a, self.eta_b, self.p_pair, self.visibility];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Parameter("device efficiency/probability outside [0,1]".into()));
        }
        let angles = [self.theta_state, self.alice_angles.0, self.alice_angles.1, self.bob_angles.0, self.bob_angles.1];
        if angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::Parameter("device angle not finite".into()));
        }
        Ok(())
    }

    /// Reference geometry and efficiencies with unit pair probability and visibility;
    /// see [`calibrate`] for fitting the last two.
    pub fn reference_geometry() -> Self {
        let r = f64::to_radians;
        DeviceModel {
            theta_state: r(reference::STATE_ANGLE_DEG),
            alice_angles: (r(reference::ALICE_ANGLES_DEG.0), r(reference::ALICE_ANGLES_DEG.1)),
            bob_angles: (r(reference::BOB_ANGLES_DEG.0), r(reference::BOB_ANGLES_DEG.1)),
            eta_a: reference::ETA_A,
            eta_b: reference::ETA_B,
            p_pair: 1.0,
            visibility: 1.0,
        }
    }
}

fn analyzer(angle: f64) -> Matrix2<f64> {
    let v = Vector2::new(angle.cos(), angle.sin());
    v * v.transpose()
}

/// Click (o=1) or no-click (o=0) POVM element of a lossy polarizer-detector arm.
fn arm(angle: f64, eta: f64, o: usize) -> Matrix2<f64> {
    let click = analyzer(angle) * eta;
    if o == 1 {
        click
    } else {
        Matrix2::identity() - click
    }
}

fn kron(a: &Matrix2<f64>, b: &Matrix2<f64>) -> Matrix4<f64> {
    Matrix4::from_fn(|i, j| a[(i / 2, j / 2)] * b[(i % 2, j % 2)])
}

/// Pure and H/V-dephased two-photon states, basis |HH⟩, |HV⟩, |VH⟩, |VV⟩.
fn states(theta: f64) -> (Matrix4<f64>, Matrix4<f64>) {
    let psi = Vector4::new(0.0, theta.cos(), theta.sin(), 0.0);
    let pure = psi * psi.transpose();
    let dephased = Matrix4::from_diagonal(&pure.diagonal());
    (pure, dephased)
}

/// Pair-emission-conditioned behavior for the given two-photon state.
fn pair_behavior(m: &DeviceModel, rho: &Matrix4<f64>) -> [f64; 16] {
    let mut p = [0.0; 16];
    let a_ang = [m.alice_angles.0, m.alice_angles.1];
    let b_ang = [m.bob_angles.0, m.bob_angles.1];
    for x in 0..2 {
        for y in 0..2 {
            for a in 0..2 {
                for b in 0..2 {
                    let op = kron(&arm(a_ang[x], m.eta_a, a), &arm(b_ang[y], m.eta_b, b));
                    p[idx(a, b, x, y)] = (rho * op).trace();
                }
            }
        }
    }
    p
}

fn vacuum() -> [f64; 16] {
    let mut p = [0.0; 16];
    for x in 0..2 {
        for y in 0..2 {
            p[idx(0, 0, x, y)] = 1.0;
        }
    }
    p
}

pub fn predicted_behavior(m: &DeviceModel) -> Result<ConditionalBehavior> {
    m.validate()?;
    let (pure, dephased) = states(m.theta_state);
    let rho = pure * m.visibility + dephased * (1.0 - m.visibility);
    let pair = pair_behavior(m, &rho);
    let vac = vacuum();
    let mut p = [0.0; 16];
    for i in 0..16 {
        p[i] = (m.p_pair * pair[i] + (1.0 - m.p_pair) * vac[i]).clamp(0.0, 1.0);
    }
    ConditionalBehavior::new(p)
}

/// Fits `p_pair` and `visibility` to a target behavior, keeping geometry and efficiencies.
///
/// The behavior is linear in (p_pair, p_pair·v), so this is a two-parameter weighted least
/// squares with Pearson weights 1/P_target.
pub fn calibrate(base: &DeviceModel, target: &ConditionalBehavior) -> Result<DeviceModel> {
    let (pure, dephased) = states(base.theta_state);
    let bp = pair_behavior(base, &pure);
    let bd = pair_behavior(base, &dephased);
    let vac = vacuum();
    let (mut s11, mut s12, mut s22, mut t1, mut t2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..16 {
        let w = 1.0 / target.p[i].max(1e-12);
        let c1 = bd[i] - vac[i];
        let c2 = bp[i] - bd[i];
        let r = target.p[i] - vac[i];
        s11 += w * c1 * c1;
        s12 += w * c1 * c2;
        s22 += w * c2 * c2;
        t1 += w * c1 * r;
        t2 += w * c2 * r;
    }
    let det = s11 * s22 - s12 * s12;
    if det.abs() < 1e-300 {
        return Err(Error::Numeric("degenerate calibration design".into()));
    }
    let k1 = (s22 * t1 - s12 * t2) / det;
    let k2 = (s11 * t2 - s12 * t1) / det;
    let p_pair = k1.clamp(0.0, 1.0);
    let visibility = if p_pair > 0.0 { (k2 / p_pair).clamp(0.0, 1.0) } else { 1.0 };
    Ok(DeviceModel { p_pair, visibility, ..base.clone() })
}

/// Draws (a, b) from P(·|xy).
pub fn sample_trial<R: Rng + ?Sized>(b: &ConditionalBehavior, x: u8, y: u8, rng: &mut R) -> TrialOutcome {
    let u: f64 = rng.random();
    let (x, y) = (x as usize, y as usize);
    let mut acc = 0.0;
    for c in 0..4 {
        acc += b.p[idx(c >> 1, c & 1, x, y)];
        if u < acc {
            return TrialOutcome { a: (c >> 1) as u8, b: (c & 1) as u8 };
        }
    }
    // rounding left a sliver of mass above the cumulative sum: return the last supported cell
    let c = (0..4).rev().find(|c| b.p[idx(c >> 1, c & 1, x, y)] > 0.0).unwrap_or(0);
    TrialOutcome { a: (c >> 1) as u8, b: (c & 1) as u8 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_polytope, chsh_statistics, check_nonsignaling, facets};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn reference_behavior() -> ConditionalBehavior {
        let nu = reference::joint();
        nu.conditional()
    }

    #[test]
    fn vacuum_only() {
        let m = DeviceModel { p_pair: 0.0, ..DeviceModel::reference_geometry() };
        let b = predicted_behavior(&m).unwrap();
        for x in 0..2 {
            for y in 0..2 {
                assert_eq!(b.get(0, 0, x, y), 1.0);
            }
        }
    }

    #[test]
    fn ideal_device_reaches_tsirelson() {
        let pi = std::f64::consts::PI;
        let m = DeviceModel {
            theta_state: pi / 4.0,
            alice_angles: (0.0, pi / 4.0),
            bob_angles: (-pi / 8.0, pi / 8.0),
            eta_a: 1.0,
            eta_b: 1.0,
            p_pair: 1.0,
            visibility: 1.0,
        };
        let b = predicted_behavior(&m).unwrap();
        let best = facets().iter().map(|s| b.facet_value(s)).fold(f64::MIN, f64::max);
        assert!((best - 2.0 * std::f64::consts::SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn calibrated_reference_device_matches_game_value() {
        let target = reference_behavior();
        let m = calibrate(&DeviceModel::reference_geometry(), &target).unwrap();
        let (_, j) = chsh_statistics(&predicted_behavior(&m).unwrap());
        let (_, j_target) = chsh_statistics(&target);
        assert!((j - 0.7507).abs() < 2e-4, "J = {j}");
        assert!((j - j_target).abs() < 2e-4);
        assert!(m.p_pair > 0.0 && m.p_pair < 1.0 && m.visibility > 0.5);
    }

    #[test]
    fn degenerate_sampling() {
        let b = predicted_behavior(&DeviceModel { p_pair: 0.0, ..DeviceModel::reference_geometry() }).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(sample_trial(&b, 1, 1, &mut rng), TrialOutcome { a: 0, b: 0 });
        }
    }

    #[test]
    fn sampling_frequencies_concentrate() {
        let b = reference_behavior();
        let n = 1_000_000;
        for (x, y) in [(0u8, 0u8), (1, 1)] {
            let mut rng = ChaCha20Rng::seed_from_u64(7 + x as u64);
            let mut counts = [0usize; 4];
            for _ in 0..n {
                let o = sample_trial(&b, x, y, &mut rng);
                counts[(o.a * 2 + o.b) as usize] += 1;
            }
            for c in 0..4 {
                let f = counts[c] as f64 / n as f64;
                let p = b.get(c >> 1, c & 1, x as usize, y as usize);
                assert!((f - p).abs() < 4.0 / (n as f64).sqrt(), "cell {c}: {f} vs {p}");
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let b = build_polytope().vertices[50].clone();
        let draw = |seed| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            (0..200).map(|k| sample_trial(&b, (k % 2) as u8, (k / 2 % 2) as u8, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
    }

    fn arb_device() -> impl Strategy<Value = DeviceModel> {
        (0.0f64..1.6, -3.2f64..3.2, -3.2f64..3.2, -3.2f64..3.2, -3.2f64..3.2, 0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0)
            .prop_map(|(t, a0, a1, b0, b1, ea, eb, pp, v)| DeviceModel {
                theta_state: t,
                alice_angles: (a0, a1),
                bob_angles: (b0, b1),
                eta_a: ea,
                eta_b: eb,
                p_pair: pp,
                visibility: v,
            })
    }

    proptest! {
        #[test]
        fn predictions_are_nonsignaling(m in arb_device()) {
            let b = predicted_behavior(&m).unwrap();
            prop_assert!(check_nonsignaling(&b, 1e-12).pass);
        }

        #[test]
        fn predictions_are_continuous(m in arb_device(), which in 0usize..5) {
            let b0 = predicted_behavior(&m).unwrap();
            let mut m2 = m.clone();
            match which {
                0 => m2.theta_state += 1e-9,
                1 => m2.alice_angles.0 += 1e-9,
                2 => m2.alice_angles.1 += 1e-9,
                3 => m2.bob_angles.0 += 1e-9,
                _ => m2.bob_angles.1 += 1e-9,
            }
            let b1 = predicted_behavior(&m2).unwrap();
            for i in 0..16 {
                prop_assert!((b0.p[i] - b1.p[i]).abs() < 1e-7);
            }
        }

        #[test]
        fn lower_efficiency_never_raises_clicks(m in arb_device(), shrink in 0.0f64..1.0) {
            let b0 = predicted_behavior(&m).unwrap();
            let b1 = predicted_behavior(&DeviceModel { eta_a: m.eta_a * shrink, ..m.clone() }).unwrap();
            for x in 0..2 {
                for y in 0..2 {
                    let click = |b: &ConditionalBehavior| b.get(1, 0, x, y) + b.get(1, 1, x, y);
                    prop_assert!(click(&b1) <= click(&b0) + 1e-15);
                }
            }
        }
    }
}
