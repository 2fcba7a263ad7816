//! Pipeline configuration: one TOML file, per-key overrides, paths resolved against the
//! configuration's directory.

use std::path::{Path, PathBuf};

use diqre::model::{build_spot_checking_inputs, InputDistribution};
use diqre::pef::constraint_inputs;
use diqre::protocol::{PlanParams, DEFAULT_CHECKPOINT_INTERVAL};
use diqre::qef::GridOptions;
use diqre::sim::DeviceModel;
use diqre::{reference, Error, Hp, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub device: DeviceConfig,
    pub simulate: SimulateConfig,
    pub protocol: ProtocolConfig,
    pub optimizer: OptimizerConfig,
    pub run: RunConfig,
    pub extract: ExtractConfig,
    pub audit: AuditConfig,
}

/// Artifact locations, relative to `dir`, which is itself relative to the config file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dir: PathBuf,
    pub behavior: PathBuf,
    pub counts: PathBuf,
    pub nu: PathBuf,
    pub pef: PathBuf,
    pub qef: PathBuf,
    pub grid: PathBuf,
    pub plan: PathBuf,
    pub seed: PathBuf,
    pub transcript: PathBuf,
    pub outputs: PathBuf,
    pub checkpoints: PathBuf,
    pub certificate: PathBuf,
    pub extractor_seed: PathBuf,
    pub extracted: PathBuf,
    pub extraction_report: PathBuf,
    pub curve: PathBuf,
    pub report: PathBuf,
    pub audit: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        let p = PathBuf::from;
        Paths {
            dir: p("."),
            behavior: p("behavior.json"),
            counts: p("counts.csv"),
            nu: p("nu.json"),
            pef: p("pef.json"),
            qef: p("qef.json"),
            grid: p("grid.json"),
            plan: p("plan.json"),
            seed: p("protocol_seed.bin"),
            transcript: p("transcript.json"),
            outputs: p("outputs.bin"),
            checkpoints: p("checkpoints.jsonl"),
            certificate: p("certificate.json"),
            extractor_seed: p("extractor_seed.bin"),
            extracted: p("extracted.bin"),
            extraction_report: p("extraction.json"),
            curve: p("curve.csv"),
            report: p("report.json"),
            audit: p("audit.json"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    /// The reference experiment's estimated conditionals.
    ReferenceTable,
    /// The polarization model below.
    Model,
}

/// Device parameters; angles in degrees.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceConfig {
    pub kind: DeviceKind,
    pub theta_state_deg: f64,
    pub alice_angles_deg: (f64, f64),
    pub bob_angles_deg: (f64, f64),
    pub eta_a: f64,
    pub eta_b: f64,
    pub p_pair: f64,
    pub visibility: f64,
    /// Fit `p_pair` and `visibility` to the reference conditionals first.
    pub calibrate: bool,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            kind: DeviceKind::ReferenceTable,
            theta_state_deg: reference::STATE_ANGLE_DEG,
            alice_angles_deg: reference::ALICE_ANGLES_DEG,
            bob_angles_deg: reference::BOB_ANGLES_DEG,
            eta_a: reference::ETA_A,
            eta_b: reference::ETA_B,
            p_pair: 1.0,
            visibility: 1.0,
            calibrate: true,
        }
    }
}

impl DeviceConfig {
    pub fn model(&self) -> DeviceModel {
        let r = f64::to_radians;
        DeviceModel {
            theta_state: r(self.theta_state_deg),
            alice_angles: (r(self.alice_angles_deg.0), r(self.alice_angles_deg.1)),
            bob_angles: (r(self.bob_angles_deg.0), r(self.bob_angles_deg.1)),
            eta_a: self.eta_a,
            eta_b: self.eta_b,
            p_pair: self.p_pair,
            visibility: self.visibility,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub trials: u64,
    /// Spot-checking probability of the simulated training run; the protocol's q if absent.
    pub q: Option<f64>,
    pub seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig { trials: 1_000_000, q: Some(0.5), seed: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    /// Smallest N reaching k0 + k with probability γ̄.
    Appoint,
    /// Caller-fixed N with the threshold it reaches with probability γ̄.
    Fixed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub q: f64,
    pub eps_b: f64,
    pub k: f64,
    pub k0: f64,
    pub eps_s: f64,
    pub eps_x: f64,
    pub gamma: f64,
    pub gamma_bar: f64,
    pub mode: PlanMode,
    pub n_max: Option<u64>,
    pub checkpoint_interval: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            q: reference::Q,
            eps_b: reference::EPS_B,
            k: reference::K,
            k0: reference::K0,
            eps_s: 2f64.powf(-reference::LOG2_INV_EPS_S),
            eps_x: 2f64.powf(-reference::LOG2_INV_EPS_X),
            gamma: reference::GAMMA,
            gamma_bar: reference::GAMMA_BAR,
            mode: PlanMode::Appoint,
            n_max: None,
            checkpoint_interval: DEFAULT_CHECKPOINT_INTERVAL,
        }
    }
}

impl ProtocolConfig {
    pub fn params(&self) -> PlanParams {
        PlanParams {
            q: self.q,
            eps_b: self.eps_b,
            k: self.k,
            k0: self.k0,
            eps_s: self.eps_s,
            eps_x: self.eps_x,
            gamma: self.gamma,
            gamma_bar: self.gamma_bar,
        }
    }

    /// The ideal input distribution and the ones the factor's constraints must cover.
    pub fn inputs(&self) -> Result<(InputDistribution, Vec<InputDistribution>)> {
        let (ideal, _, _) = build_spot_checking_inputs(self.q, self.eps_b)?;
        let mus = constraint_inputs(&ideal)?;
        Ok((ideal, mus))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorSource {
    /// MLE on the counts, then a PEF optimized over the α grid.
    Optimize,
    /// The reference experiment's ν and PEF tables.
    Reference,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub source: FactorSource,
    /// Candidate α − 1 values, as decimal strings for full precision.
    pub betas: Vec<String>,
    pub tol: f64,
    pub mle_tol: f64,
    /// Derive a QEF by the certified grid search; the plan then uses it instead of the PEF.
    pub rescale: bool,
    /// Divide by this overall bound instead of running the grid search. The resulting QEF is
    /// uncertified and `audit` reports it.
    pub assumed_rescale_bound: Option<String>,
    /// Write every cell and corner of the grid certificates (large at deep refinement).
    pub save_certificates: bool,
    pub grid: GridOptions,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            source: FactorSource::Optimize,
            betas: vec![reference::ALPHA_MINUS_ONE.into()],
            tol: 1e-6,
            mle_tol: 1e-10,
            rescale: true,
            assumed_rescale_bound: None,
            save_certificates: true,
            grid: GridOptions::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn alphas(&self) -> Result<Vec<Hp>> {
        if self.betas.is_empty() {
            return Err(Error::Parameter("optimizer.betas is empty".into()));
        }
        self.betas
            .iter()
            .map(|b| {
                let beta = Hp::parse(b)?;
                if !(beta > Hp::zero()) {
                    return Err(Error::Parameter(format!("alpha - 1 = {b} must be positive")));
                }
                Ok(&Hp::one() + &beta)
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Randomness of the simulated device.
    pub device_seed: u64,
    /// Draw protocol seed bits from this PRNG seed instead of `paths.seed`.
    pub seed_prng: Option<u64>,
    /// Replace the device by a classical deterministic strategy (0..16).
    pub local_strategy: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { device_seed: 2, seed_prng: None, local_strategy: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    /// Generate the extractor seed from this PRNG seed and save it; otherwise read it.
    pub seed_prng: Option<u64>,
    pub block_length: Option<u64>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig { seed_prng: None, block_length: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    /// Random density operators per input distribution in the QEF spot check.
    pub soundness_samples: usize,
    /// Random Toeplitz cases compared against the direct product.
    pub extractor_samples: usize,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig { soundness_samples: 2000, extractor_samples: 50, seed: 5 }
    }
}

/// Loads `path` with `section.key=value` overrides applied (values parsed as TOML, falling
/// back to plain strings).
pub fn load(path: &Path, overrides: &[String]) -> Result<(PipelineConfig, PathBuf)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Parameter(format!("cannot read config {}: {e}", path.display())))?;
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: PipelineConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("")).join(&cfg.paths.dir);
    Ok((cfg, base))
}

pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Parameter(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Parameter(format!("override key {key:?} is malformed")));
    }
    let value = parse_value(raw.trim());
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Parameter(format!("override {key:?}: {p} is not a table")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_typed_values() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "protocol.q=0.25").unwrap();
        apply_override(&mut t, "optimizer.betas=[\"3e-3\"]").unwrap();
        apply_override(&mut t, "protocol.mode=fixed").unwrap();
        apply_override(&mut t, "optimizer.grid.max_depth=3").unwrap();
        let cfg: PipelineConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(cfg.protocol.q, 0.25);
        assert_eq!(cfg.protocol.mode, PlanMode::Fixed);
        assert_eq!(cfg.optimizer.betas, vec!["3e-3".to_string()]);
        assert_eq!(cfg.optimizer.grid.max_depth, 3);
        assert_eq!(cfg.optimizer.grid.batch, GridOptions::default().batch);
        assert!(apply_override(&mut toml::Table::new(), "novalue").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r: std::result::Result<PipelineConfig, _> = toml::from_str("[protocol]\nqq = 1.0\n");
        assert!(r.is_err());
    }

    #[test]
    fn defaults_are_the_reference_parameters() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.protocol.q, reference::Q);
        assert_eq!(cfg.protocol.eps_s, 2f64.powi(-32));
        assert_eq!(cfg.optimizer.alphas().unwrap()[0], reference::alpha_hp());
        let (_, mus) = cfg.protocol.inputs().unwrap();
        assert_eq!(mus.len(), 2);
    }
}
