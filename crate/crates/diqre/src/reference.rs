//! Reference experiment: training counts, MLE distribution, optimized PEF and operating
//! parameters of the 512-bit expansion task. Tables are rows (x,y) = 00, 01, 10, 11 and
//! columns (a,b) = 00, 01, 10, 11.

use crate::hp::Hp;
use crate::model::{idx, InputDistribution, JointDistribution};

/// Training-set counts.
pub const COUNTS: [[u64; 4]; 4] = [
    [42212881971, 318991793, 275003068, 629231576],
    [1240932, 27956, 6070, 21021],
    [1243249, 6689, 27566, 21427],
    [1201874, 45577, 45611, 3620],
];

/// MLE-projected joint distribution ν(abxy), 20 decimals.
pub const NU: [[&str; 4]; 4] = [
    ["0.97199465625472059038", "0.00715304637435085818", "0.00631932133640711064", "0.01444343448724344329"],
    ["0.00002857430319592834", "0.00000065311397457615", "0.00000014282560923430", "0.00000047693964624017"],
    ["0.00002858371146706307", "0.00000015598344257690", "0.00000061881913175867", "0.00000048866838458032"],
    ["0.00002769260884464488", "0.00000104708606499509", "0.00000102451996051776", "0.00000008296755582123"],
];

/// Optimized PEF F'(abxy) at power 1 + ALPHA_MINUS_ONE, 20 decimals.
pub const PEF: [[&str; 4]; 4] = [
    ["1.00000000110510334216", "0.99999903566359593654", "0.99999908430264417003", "1.00000100579637485331"],
    ["1.00022934253952033856", "0.98995503866430756279", "0.93407594075304811731", "1.02073956349038930113"],
    ["1.00023612022915342478", "0.93601590290081493339", "0.98948855714127381677", "1.02175557026355190437"],
    ["0.99949697803240911131", "1.00975800133726889562", "1.01028078627036155268", "0.92372918497532785497"],
];

pub const ALPHA_MINUS_ONE: &str = "1.172e-6";
/// Spot to check ratio (1−q):q.
pub const SPOT_RATIO: f64 = 8375.0;
/// q = 1/(1 + 8375); quoted to three digits as 0.000119.
pub const Q: f64 = 1.0 / (1.0 + SPOT_RATIO);
pub const EPS_B: f64 = 0.002;
pub const K: f64 = 512.0;
pub const K0: f64 = 8.50e7;
pub const LOG2_INV_EPS_S: f64 = 32.0;
pub const LOG2_INV_EPS_X: f64 = 100.0;
pub const GAMMA_BAR: f64 = 0.993;
pub const GAMMA: f64 = 0.99;
/// Certified overall QEF rescaling bound minus one.
pub const RESCALE_EXCESS: f64 = 1.12e-9;
pub const R_IN: f64 = 0.00197;
pub const R_NU: f64 = 0.00289;
pub const N_MAX: f64 = 2.35e11;
pub const N_STOP: f64 = 1.80e11;
pub const GENERATED_BITS: f64 = 5.47e8;
pub const CONSUMED_AT_STOP: f64 = 4.39e8;
pub const NET_EXPANSION: f64 = 1.08e8;
pub const REALIZED_RATE: f64 = 0.00274;
pub const J_RUN: f64 = 0.75088;
/// Local-bias analysis power minus one.
pub const LOCAL_BIAS_ALPHA_MINUS_ONE: &str = "1.66e-9";

/// Device: state cos θ|HV⟩ + sin θ|VH⟩ and polarizer angles, in degrees.
pub const STATE_ANGLE_DEG: f64 = 24.56;
pub const ALICE_ANGLES_DEG: (f64, f64) = (-83.02, -118.58);
pub const BOB_ANGLES_DEG: (f64, f64) = (6.98, -28.58);
pub const ETA_A: f64 = 0.8050;
pub const ETA_B: f64 = 0.8220;

fn flatten<T: Clone>(rows: &[[T; 4]; 4]) -> [T; 16] {
    std::array::from_fn(|i| {
        let (a, b, x, y) = ((i >> 3) & 1, (i >> 2) & 1, (i >> 1) & 1, i & 1);
        debug_assert_eq!(idx(a, b, x, y), i);
        rows[x * 2 + y][a * 2 + b].clone()
    })
}

pub fn counts_flat() -> [u64; 16] {
    flatten(&COUNTS)
}

pub fn nu_hp() -> [Hp; 16] {
    flatten(&NU).map(|s| Hp::parse(s).expect("table literal"))
}

pub fn pef_hp() -> [Hp; 16] {
    flatten(&PEF).map(|s| Hp::parse(s).expect("table literal"))
}

pub fn alpha_hp() -> Hp {
    &Hp::one() + &Hp::parse(ALPHA_MINUS_ONE).expect("literal")
}

pub fn inputs() -> InputDistribution {
    let mut d = InputDistribution::spot_checking(Q).expect("reference q");
    d.eps_b = EPS_B;
    d
}

/// ν as a validated joint distribution over the reference inputs.
pub fn joint() -> JointDistribution {
    let nu = nu_hp().map(|v| v.to_f64());
    JointDistribution::new(nu, inputs()).expect("reference distribution is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::z_of;

    #[test]
    fn distribution_marginals_match_spot_ratio() {
        let nu = nu_hp();
        let mu = inputs().mu_hp();
        for z in 0..4 {
            let m: Hp = (0..16).filter(|i| z_of(*i) == z).map(|i| nu[i].clone()).sum();
            assert!(((&m - &mu[z]) / mu[z].clone()).abs().to_f64() < 1e-15);
        }
        let _ = joint();
    }
}
