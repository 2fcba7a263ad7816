//! The pipeline stages. Each reads the artifacts of earlier stages, writes its own with a
//! provenance header and returns a short JSON summary for the terminal.

use std::path::{Path, PathBuf};

use diqre::bits::{BitReader, BitStream, RngSeed, SeedSource};
use diqre::extractor::{self, ExtractionReport, ExtractionSpec};
use diqre::io::{self, Artifact, JsonLines, Provenance};
use diqre::mle::{counts_to_conditional, mle_project_weighted, CountTable, MleReport};
use diqre::model::{build_polytope, idx, input_entropy_rate, ConditionalBehavior, JointDistribution};
use diqre::pef::{feasibility_report, scan_alpha, AlphaRow, EstimationFactor, FactorKind};
use diqre::protocol::{
    self, certify, run_expansion_with, sigma_nu, BehaviorDevice, Checkpoint, EntropyCertificate, ExpansionTranscript,
    LocalDeterministicDevice, ProtocolPlan, StopReason, TrialDevice,
};
use diqre::qef::{audit_certificate, overall_bound, rescale_to_qef, soundness_audit, GridCertificate, GridProgress};
use diqre::sim::{calibrate, predicted_behavior, sample_trial, DeviceModel};
use diqre::{reference, Error, Hp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{DeviceKind, FactorSource, PipelineConfig, PlanMode};

/// A stage failure, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    Lib(Error),
    /// The run did not certify, or a stage needs a certificate that does not exist.
    Protocol(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Lib(Error::Infeasible(_)) => 3,
            Failure::Lib(Error::SeedUnderflow { .. }) | Failure::Protocol(_) => 4,
            Failure::Lib(Error::Audit(_)) => 5,
            Failure::Lib(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Lib(e) => write!(f, "{e}"),
            Failure::Protocol(m) => write!(f, "protocol failure: {m}"),
        }
    }
}

pub type StageResult = std::result::Result<Value, Failure>;

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub base: PathBuf,
}

impl Ctx {
    pub fn path(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    /// Provenance with input paths relative to the artifact directory, so that identical
    /// inputs give identical artifacts wherever the directory lives.
    fn provenance(&self, stage: &str, inputs: &[&Path], parameters: Value) -> diqre::Result<Provenance> {
        let mut p = Provenance::new(stage, inputs, parameters)?;
        for (d, path) in p.inputs.iter_mut().zip(inputs) {
            d.path = path.strip_prefix(&self.base).unwrap_or(path).display().to_string();
        }
        Ok(p)
    }
}

fn params<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config sections serialize")
}

/// Provenance of a non-JSON artifact, written next to it.
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BehaviorRecord {
    pub kind: DeviceKind,
    pub device: Option<DeviceModel>,
    pub behavior: ConditionalBehavior,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NuRecord {
    pub nu: JointDistribution,
    pub mle: Option<MleReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridSummary {
    pub global_lower: f64,
    pub global_upper: f64,
    pub refinement_depth: u32,
    pub converged: bool,
    pub corners: usize,
    pub trace: Vec<GridProgress>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FactorRecord {
    pub factor: EstimationFactor,
    /// Expected bits per trial under the trained ν.
    pub rate: f64,
    pub sigma: f64,
    /// Largest constraint value over the polytope and constraint inputs.
    pub worst_constraint: Hp,
    pub alpha_scan: Vec<AlphaRow>,
    pub grids: Vec<GridSummary>,
}

/// A run transcript without the outputs, which go to a raw bit file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub n: u64,
    pub log2_g: f64,
    pub exact_log2_g: Hp,
    pub cell_counts: [u64; 16],
    pub spot_count: u64,
    pub check_counts: [u64; 4],
    pub outputs_bits: u64,
    pub outputs_sha256: String,
    pub inputs_consumed_bits: u64,
    pub ledger_accounting: Hp,
    pub success: bool,
    pub stop_reason: StopReason,
    pub abort_error: Option<String>,
    pub checkpoints: Vec<Checkpoint>,
}

impl TranscriptRecord {
    fn transcript(&self) -> ExpansionTranscript {
        ExpansionTranscript {
            n: self.n,
            log2_g: self.log2_g,
            cell_counts: self.cell_counts,
            spot_count: self.spot_count,
            check_counts: self.check_counts,
            outputs: BitStream::new(),
            inputs_consumed_bits: self.inputs_consumed_bits,
            ledger_accounting: self.ledger_accounting.clone(),
            success: self.success,
            stop_reason: self.stop_reason,
            checkpoints: self.checkpoints.clone(),
        }
    }
}

pub fn simulate(ctx: &Ctx) -> StageResult {
    let cfg = &ctx.cfg;
    let sim = &cfg.simulate;
    if sim.trials == 0 {
        return Err(Error::Parameter("simulate.trials must be positive".into()).into());
    }
    let (device, behavior) = match cfg.device.kind {
        DeviceKind::ReferenceTable => (None, reference::joint().conditional()),
        DeviceKind::Model => {
            let mut m = cfg.device.model();
            m.validate()?;
            if cfg.device.calibrate {
                m = calibrate(&m, &reference::joint().conditional())?;
            }
            let b = predicted_behavior(&m)?;
            (Some(m), b)
        }
    };
    let q = sim.q.unwrap_or(cfg.protocol.q);
    let mu = diqre::model::InputDistribution::spot_checking(q)?;
    let mut rng = ChaCha20Rng::seed_from_u64(sim.seed);
    let mut counts = [0u64; 16];
    for _ in 0..sim.trials {
        let u: f64 = rng.random();
        let z = if u < mu.mu[0] {
            0
        } else {
            1 + ((u - mu.mu[0]) / (1.0 - mu.mu[0]) * 3.0).min(2.0) as usize
        };
        let (x, y) = ((z >> 1) as u8, (z & 1) as u8);
        let o = sample_trial(&behavior, x, y, &mut rng);
        counts[idx(o.a as usize, o.b as usize, x as usize, y as usize)] += 1;
    }
    let table = CountTable::new(counts)?;
    let prov = ctx.provenance("simulate", &[], json!({"device": params(&cfg.device), "simulate": params(sim), "q": q}))?;
    let behavior_path = ctx.path(&cfg.paths.behavior);
    let counts_path = ctx.path(&cfg.paths.counts);
    Artifact { provenance: prov.clone(), body: BehaviorRecord { kind: cfg.device.kind, device: device.clone(), behavior: behavior.clone() } }
        .save(&behavior_path)?;
    io::save_counts(&counts_path, &table)?;
    io::write_json(&sidecar(&counts_path), &prov)?;
    let p00 = counts[idx(0, 0, 0, 0)] as f64 / table.class_totals()[0] as f64;
    Ok(json!({
        "stage": "simulate",
        "trials": sim.trials,
        "class_totals": table.class_totals(),
        "p00_given_00": p00,
        "model_p00_given_00": behavior.get(0, 0, 0, 0),
        "device": device,
    }))
}

pub fn train(ctx: &Ctx) -> StageResult {
    let cfg = &ctx.cfg;
    let opt = &cfg.optimizer;
    let (ideal, mus) = cfg.protocol.inputs()?;
    let r_in = input_entropy_rate(cfg.protocol.q)?;
    let poly = build_polytope();
    let counts_path = ctx.path(&cfg.paths.counts);
    let (nu, mle, pef, scan, inputs): (JointDistribution, Option<MleReport>, EstimationFactor, Vec<AlphaRow>, Vec<PathBuf>) =
        match opt.source {
            FactorSource::Optimize => {
                let counts = io::load_counts(&counts_path)?;
                let cond = counts_to_conditional(&counts)?;
                let w = counts.class_totals().map(|t| t as f64);
                let (nu, rep) = mle_project_weighted(&cond, &w, &ideal, opt.mle_tol)?;
                let scan = scan_alpha(&nu, &opt.alphas()?, &poly, &mus, r_in, opt.tol)?;
                (nu, Some(rep), scan.solution.factor, scan.rows, vec![counts_path.clone()])
            }
            FactorSource::Reference => {
                let nu = JointDistribution::from_behavior(&reference::joint().conditional(), &ideal);
                let f = EstimationFactor::new(reference::pef_hp(), reference::alpha_hp(), FactorKind::Pef, None)?;
                (nu, None, f, vec![], vec![])
            }
        };
    // optimized factors are feasible by construction; the published table is kept as printed
    // and `audit` flags its constraint violation
    let worst = feasibility_report(&pef, &poly, &mus).worst_constraint;
    let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let parameters = json!({"protocol": params(&cfg.protocol), "optimizer": params(opt)});
    let prov = ctx.provenance("train", &input_refs, parameters)?;
    let nu_path = ctx.path(&cfg.paths.nu);
    Artifact { provenance: prov.clone(), body: NuRecord { nu: nu.clone(), mle } }.save(&nu_path)?;
    let pef_rec = FactorRecord {
        rate: pef.rate(&nu.nu)?.to_f64(),
        sigma: sigma_nu(&pef, &nu)?,
        factor: pef.clone(),
        worst_constraint: worst,
        alpha_scan: scan,
        grids: vec![],
    };
    Artifact { provenance: prov.clone(), body: pef_rec.clone() }.save(&ctx.path(&cfg.paths.pef))?;
    let mut summary = json!({
        "stage": "train",
        "nu_conditional_p00_given_00": nu.conditional().get(0, 0, 0, 0),
        "alpha_minus_1": pef.beta().to_sci(6),
        "pef_rate": pef_rec.rate,
        "pef_sigma": pef_rec.sigma,
        "pef_worst_constraint": pef_rec.worst_constraint.to_sci(15),
        "r_in": r_in,
    });
    if opt.rescale {
        let (qef, certs) = match &opt.assumed_rescale_bound {
            None => rescale_to_qef(&pef, &mus, &opt.grid)?,
            Some(b) => {
                let bound = Hp::parse(b)?;
                if !(bound >= Hp::one()) {
                    return Err(Error::Parameter(format!("assumed rescale bound {b} is below 1")).into());
                }
                let values = pef.values.clone().map(|v| &v / &bound);
                (EstimationFactor::new(values, pef.alpha.clone(), FactorKind::Qef, Some(bound))?, vec![])
            }
        };
        let grids = certs.iter().map(summarize_grid).collect();
        let qef_rec = FactorRecord {
            rate: qef.rate(&nu.nu)?.to_f64(),
            sigma: sigma_nu(&qef, &nu)?,
            worst_constraint: feasibility_report(&qef, &poly, &mus).worst_constraint,
            factor: qef.clone(),
            alpha_scan: vec![],
            grids,
        };
        if opt.save_certificates && !certs.is_empty() {
            Artifact { provenance: prov.clone(), body: certs.clone() }.save(&ctx.path(&cfg.paths.grid))?;
        }
        Artifact { provenance: prov, body: qef_rec.clone() }.save(&ctx.path(&cfg.paths.qef))?;
        summary["qef_rate"] = json!(qef_rec.rate);
        summary["rescale_bound"] = json!(qef.rescale_bound.as_ref().map(|b| b.to_sci(20)));
        summary["grids"] = json!(qef_rec.grids.iter().map(|g| json!({
            "global_upper": g.global_upper, "depth": g.refinement_depth, "converged": g.converged, "corners": g.corners
        })).collect::<Vec<_>>());
    }
    Ok(summary)
}

fn summarize_grid(c: &GridCertificate) -> GridSummary {
    GridSummary {
        global_lower: c.global_lower,
        global_upper: c.global_upper,
        refinement_depth: c.refinement_depth,
        converged: c.converged,
        corners: c.corners.len(),
        trace: c.trace.clone(),
    }
}

/// The factor the plan uses: the QEF when rescaling is configured, else the PEF.
fn factor_path(ctx: &Ctx) -> PathBuf {
    let p = &ctx.cfg.paths;
    ctx.path(if ctx.cfg.optimizer.rescale { &p.qef } else { &p.pef })
}

pub fn plan(ctx: &Ctx) -> StageResult {
    let cfg = &ctx.cfg;
    let nu_path = ctx.path(&cfg.paths.nu);
    let f_path = factor_path(ctx);
    let nu: Artifact<NuRecord> = Artifact::load(&nu_path)?;
    let f: Artifact<FactorRecord> = Artifact::load(&f_path)?;
    let pp = cfg.protocol.params();
    let mut plan = match cfg.protocol.mode {
        PlanMode::Appoint => ProtocolPlan::appoint(pp, f.body.factor, &nu.body.nu)?,
        PlanMode::Fixed => {
            let n = cfg
                .protocol
                .n_max
                .ok_or_else(|| Error::Parameter("protocol.n_max is required in fixed mode".into()))?;
            ProtocolPlan::fixed_budget(pp, f.body.factor, &nu.body.nu, n)?
        }
    };
    plan.checkpoint_interval = cfg.protocol.checkpoint_interval;
    plan.validate()?;
    let prov = ctx.provenance("plan", &[&nu_path, &f_path], json!({"protocol": params(&cfg.protocol)}))?;
    Artifact { provenance: prov, body: plan.clone() }.save(&ctx.path(&cfg.paths.plan))?;
    Ok(json!({
        "stage": "plan",
        "factor": plan.factor.kind,
        "n_max": plan.n_max,
        "h": plan.h,
        "r_nu": plan.r_nu,
        "r_in": plan.r_in,
        "sigma_nu": plan.sigma_nu,
        "penalty": plan.penalty(),
        "certified_if_success": plan.h - plan.penalty(),
    }))
}

pub fn run(ctx: &Ctx) -> StageResult {
    let cfg = &ctx.cfg;
    let plan_path = ctx.path(&cfg.paths.plan);
    let behavior_path = ctx.path(&cfg.paths.behavior);
    let plan: Artifact<ProtocolPlan> = Artifact::load(&plan_path)?;
    let plan = plan.body;
    plan.validate()?;
    let mut inputs: Vec<PathBuf> = vec![plan_path.clone()];
    let mut device: Box<dyn TrialDevice> = match cfg.run.local_strategy {
        Some(s) if s < 16 => Box::new(LocalDeterministicDevice { strategy: s }),
        Some(s) => return Err(Error::Parameter(format!("run.local_strategy={s} outside 0..16")).into()),
        None => {
            let b: Artifact<BehaviorRecord> = Artifact::load(&behavior_path)?;
            inputs.push(behavior_path.clone());
            Box::new(BehaviorDevice { behavior: b.body.behavior, rng: ChaCha20Rng::seed_from_u64(cfg.run.device_seed) })
        }
    };
    let seed_file;
    let mut seed: Box<dyn SeedSource + '_> = match cfg.run.seed_prng {
        Some(s) => Box::new(RngSeed::new(ChaCha20Rng::seed_from_u64(s))),
        None => {
            let p = ctx.path(&cfg.paths.seed);
            seed_file = BitStream::load(&p)?;
            inputs.push(p);
            Box::new(BitReader::new(&seed_file))
        }
    };
    let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let prov = ctx.provenance("run", &input_refs, json!({"run": params(&cfg.run)}))?;
    let mut stream = JsonLines::create(&ctx.path(&cfg.paths.checkpoints))?;
    stream.push(&json!({ "provenance": prov }))?;
    let result = run_expansion_with(&plan, device.as_mut(), seed.as_mut(), &mut |c| stream.push(c));
    let (t, abort) = match result {
        Ok(t) => (t, None),
        Err(a) => (a.transcript, Some(a.error)),
    };
    let outputs_path = ctx.path(&cfg.paths.outputs);
    t.outputs.save(&outputs_path)?;
    let outputs_sha256 = io::file_sha256(&outputs_path)?;
    let record = TranscriptRecord {
        n: t.n,
        log2_g: t.log2_g,
        exact_log2_g: t.exact_log2_g(&plan.factor),
        cell_counts: t.cell_counts,
        spot_count: t.spot_count,
        check_counts: t.check_counts,
        outputs_bits: t.outputs.len(),
        outputs_sha256: outputs_sha256.clone(),
        inputs_consumed_bits: t.inputs_consumed_bits,
        ledger_accounting: t.ledger_accounting.clone(),
        success: t.success,
        stop_reason: t.stop_reason,
        abort_error: abort.as_ref().map(|e| e.to_string()),
        checkpoints: t.checkpoints.clone(),
    };
    Artifact { provenance: prov.clone(), body: record }.save(&ctx.path(&cfg.paths.transcript))?;
    let cert_path = ctx.path(&cfg.paths.certificate);
    let mut summary = json!({
        "stage": "run",
        "n": t.n,
        "n_max": plan.n_max,
        "generated": t.log2_g / plan.beta(),
        "h": plan.h,
        "success": t.success,
        "stop_reason": t.stop_reason,
        "seed_bits": t.inputs_consumed_bits,
    });
    if let Some(e) = abort {
        remove_stale(&cert_path)?;
        return Err(e.into());
    }
    if !t.success {
        remove_stale(&cert_path)?;
        return Err(Failure::Protocol(format!(
            "register {:.1} bits below threshold {:.1} after {} trials; no certificate issued",
            t.log2_g / plan.beta(),
            plan.h,
            t.n
        )));
    }
    let cert = certify(&t, &plan)?;
    let mut cprov = prov;
    cprov.stage = "certify".into();
    cprov.parameters = json!({"outputs_sha256": outputs_sha256});
    Artifact { provenance: cprov, body: cert.clone() }.save(&cert_path)?;
    summary["min_entropy_bound"] = json!(cert.min_entropy_bound);
    Ok(summary)
}

fn remove_stale(p: &Path) -> diqre::Result<()> {
    if p.exists() {
        std::fs::remove_file(p)?;
    }
    Ok(())
}

fn load_certificate(ctx: &Ctx) -> std::result::Result<Artifact<EntropyCertificate>, Failure> {
    let p = ctx.path(&ctx.cfg.paths.certificate);
    if !p.exists() {
        return Err(Failure::Protocol("no success certificate: the run did not certify, refusing to extract".into()));
    }
    Ok(Artifact::load(&p)?)
}

pub fn extract(ctx: &Ctx) -> StageResult {
    let cfg = &ctx.cfg;
    let cert = load_certificate(ctx)?;
    let outputs_path = ctx.path(&cfg.paths.outputs);
    let digest = io::file_sha256(&outputs_path)?;
    if cert.provenance.parameters.get("outputs_sha256") != Some(&json!(digest)) {
        return Err(Error::Parameter("certificate was issued for different protocol outputs".into()).into());
    }
    let v = BitStream::load(&outputs_path)?;
    let spec = ExtractionSpec::new(v.len(), cert.body.min_entropy_bound, cfg.protocol.eps_x)?;
    let seed_path = ctx.path(&cfg.paths.extractor_seed);
    let seed = match cfg.extract.seed_prng {
        Some(s) => {
            let seed = BitStream::random(spec.seed_length(), &mut ChaCha20Rng::seed_from_u64(s));
            seed.save(&seed_path)?;
            seed
        }
        None => BitStream::load(&seed_path)?,
    };
    let (out, report) = extractor::extract(&v, Some(&cert.body), cfg.protocol.eps_x, &seed, cfg.extract.block_length)?;
    let out_path = ctx.path(&cfg.paths.extracted);
    out.save(&out_path)?;
    let cert_path = ctx.path(&cfg.paths.certificate);
    let prov = ctx.provenance("extract", &[&cert_path, &outputs_path, &seed_path], json!({"extract": params(&cfg.extract), "eps_x": cfg.protocol.eps_x}))?;
    Artifact { provenance: prov, body: report.clone() }.save(&ctx.path(&cfg.paths.extraction_report))?;
    Ok(json!({ "stage": "extract", "report": report }))
}

#[derive(Debug, Serialize)]
struct CurveRow {
    n: u64,
    generated: f64,
    consumed: f64,
    net: f64,
    expected: f64,
    region: &'static str,
}

/// Least-squares slope of y against x.
fn slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let k = points.len() as f64;
    let (mx, my) = points.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / k, b + y / k));
    let (sxy, sxx) = points.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + (x - mx) * (y - my), b + (x - mx) * (x - mx)));
    (sxx > 0.0).then(|| sxy / sxx)
}

pub fn report(ctx: &Ctx) -> StageResult {
    let cfg = &ctx.cfg;
    let plan_path = ctx.path(&cfg.paths.plan);
    let tr_path = ctx.path(&cfg.paths.transcript);
    let plan: ProtocolPlan = Artifact::load(&plan_path)?.body;
    let rec: TranscriptRecord = Artifact::load(&tr_path)?.body;
    let curve = protocol::net_expansion_curve(&rec.transcript(), &plan);
    let certified = ctx.path(&cfg.paths.certificate).exists() && rec.success;
    let curve_path = ctx.path(&cfg.paths.curve);
    if let Some(dir) = curve_path.parent() {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    let mut w = csv::Writer::from_path(&curve_path).map_err(|e| Error::Format(e.to_string()))?;
    for p in &curve {
        let region = match (rec.success, p.net > 0.0) {
            (false, _) => "protocol_fails",
            (true, true) => "expanding",
            (true, false) => "accumulating",
        };
        w.serialize(CurveRow { n: p.n, generated: p.generated, consumed: p.consumed, net: p.net, expected: p.expected, region })
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(Error::from)?;
    let pts = |f: fn(&protocol::CurvePoint) -> f64| curve.iter().map(|p| (p.n as f64, f(p))).collect::<Vec<_>>();
    let summary = json!({
        "stage": "report",
        "success": rec.success,
        "n_stop": rec.n,
        "points": curve.len(),
        "generated_slope": slope(&pts(|p| p.generated)),
        "consumed_slope": slope(&pts(|p| p.consumed)),
        "r_nu": plan.r_nu,
        "r_in": plan.r_in,
        "certificate": certified,
        "extraction_allowed": certified,
    });
    let prov = ctx.provenance("report", &[&plan_path, &tr_path], json!({}))?;
    io::write_json(&sidecar(&curve_path), &prov)?;
    Artifact { provenance: prov, body: summary.clone() }.save(&ctx.path(&cfg.paths.report))?;
    Ok(summary)
}

/// Ledger arithmetic of a plan with no trials: generated bound, consumption at `stop` and net
/// expansion.
pub fn dry_run(ctx: &Ctx, stop: Option<f64>) -> StageResult {
    let plan: ProtocolPlan = Artifact::load(&ctx.path(&ctx.cfg.paths.plan))?.body;
    let p = &plan.params;
    let stop = stop.unwrap_or(plan.n_max as f64);
    if !(stop >= 0.0) {
        return Err(Error::Parameter("stop must be nonnegative".into()).into());
    }
    let generated = protocol::min_entropy_bound(plan.h, p.eps_s, p.gamma, plan.beta())?;
    let consumed = p.k0 + stop * plan.r_in;
    Ok(json!({
        "stage": "report",
        "dry_run": true,
        "n_max": plan.n_max,
        "h": plan.h,
        "generated": generated,
        "stop": stop,
        "consumed": consumed,
        "net_expansion": generated - consumed,
        "extracted_bits": extractor::output_length(generated, p.eps_x).ok(),
        "total_soundness": extractor::total_soundness(p.eps_s, p.eps_x),
    }))
}

#[derive(Debug, Serialize)]
struct Check {
    name: String,
    passed: bool,
    detail: String,
}

/// Largest n·m for which the audit recomputes the whole extraction with the direct product.
const FULL_RECHECK: u64 = 1 << 34;

pub fn audit(ctx: &Ctx) -> StageResult {
    let cfg = &ctx.cfg;
    let (_, mus) = cfg.protocol.inputs()?;
    let poly = build_polytope();
    let mut checks = Vec::new();
    let mut inputs = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| checks.push(Check { name: name.into(), passed, detail });

    let pef_path = ctx.path(&cfg.paths.pef);
    let pef: FactorRecord = Artifact::load(&pef_path)?.body;
    inputs.push(pef_path);
    let worst = feasibility_report(&pef.factor, &poly, &mus).worst_constraint;
    push("pef_feasibility", worst <= Hp::one(), format!("worst constraint {}", worst.to_sci(20)));

    let qef_path = ctx.path(&cfg.paths.qef);
    if qef_path.exists() {
        let qef: FactorRecord = Artifact::load(&qef_path)?.body;
        inputs.push(qef_path);
        let bound = qef.factor.rescale_bound.clone().unwrap_or_else(Hp::one);
        // artifacts carry 45 truncated significant digits
        let tol = Hp::parse("1e-40")?;
        let consistent = (0..16).all(|i| {
            let p = &pef.factor.values[i];
            (&(&qef.factor.values[i] * &bound) - p).abs() <= &tol * p
        });
        push("qef_is_rescaled_pef", consistent, format!("bound {}", bound.to_sci(15)));
        let grid_path = ctx.path(&cfg.paths.grid);
        if grid_path.exists() {
            let certs: Vec<GridCertificate> = Artifact::load(&grid_path)?.body;
            inputs.push(grid_path);
            let audited: diqre::Result<()> = certs.iter().try_for_each(audit_certificate);
            push("grid_certificates", audited.is_ok(), audited.err().map_or("all cells re-derived".into(), |e| e.to_string()));
            let implied = overall_bound(&pef.factor, &certs);
            push("rescale_bound_covers_grid", Hp::from_f64(implied) <= bound, format!("grid implies {implied:.15e}"));
        } else {
            push("grid_certificates", false, "QEF present without grid certificates".into());
        }
        let worst = soundness_audit(&qef.factor, &mus, cfg.audit.soundness_samples, cfg.audit.seed)?;
        push("qef_soundness_samples", worst <= 1.0 + 1e-12, format!("largest sampled value {worst:.15}"));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.audit.seed);
    let mut mismatches = 0;
    for case in 0..cfg.audit.extractor_samples {
        let n = rng.random_range(1..=4096u64);
        let m = rng.random_range(1..=256u64);
        let l = [1, 64, n][case % 3].min(n);
        let v = BitStream::random(n, &mut rng);
        let seed = BitStream::random(n + m - 1, &mut rng);
        if extractor::toeplitz_fft(&seed, &v, m, l)? != extractor::toeplitz_naive(&seed, &v, m)? {
            mismatches += 1;
        }
    }
    push("extractor_random_cases", mismatches == 0, format!("{mismatches} of {} cases differ", cfg.audit.extractor_samples));

    let out_path = ctx.path(&cfg.paths.extracted);
    if out_path.exists() {
        let rep: ExtractionReport = Artifact::load(&ctx.path(&cfg.paths.extraction_report))?.body;
        if rep.n.saturating_mul(rep.m) <= FULL_RECHECK {
            let v = BitStream::load(&ctx.path(&cfg.paths.outputs))?;
            let seed = BitStream::load(&ctx.path(&cfg.paths.extractor_seed))?;
            let out = BitStream::load(&out_path)?;
            let same = extractor::toeplitz_naive(&seed, &v, rep.m)? == out;
            push("extraction_recomputed", same, format!("n={} m={} by direct product", rep.n, rep.m));
            inputs.push(out_path);
        }
    }

    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let summary = json!({ "stage": "audit", "passed": failed.is_empty(), "checks": checks });
    let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let prov = ctx.provenance("audit", &input_refs, json!({"audit": params(&cfg.audit)}))?;
    Artifact { provenance: prov, body: summary.clone() }.save(&ctx.path(&cfg.paths.audit))?;
    if !failed.is_empty() {
        return Err(Error::Audit(format!("failed checks: {}", failed.join(", "))).into());
    }
    Ok(summary)
}
