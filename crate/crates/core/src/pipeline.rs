//! Subcommand implementations behind the `cmc` binary.
//!
//! Every command reads its prerequisites from the output directory, writes
//! its artifacts atomically and finishes with `<command>.manifest.json`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attribution::{aggregate, AttributionConfig, Interpolation, PairActivations};
use crate::calibration::{report, write_reliability_csv, PredictionRecord};
use crate::error::CmcError;
use crate::graph::{ComponentRanking, EdgeScoreMap, NodeId};
use crate::intervention::{
    alpha_sweep, compute_reference_mean, compute_steering_vector, confidence_prompts, default_alpha_grid, evaluate,
    InterventionPlan,
};
use crate::io::{self, FileDigest, RawRecord, RunManifest};
use crate::model::{load_snapshot, plant_overconfidence_circuit, save_snapshot, ModelConfig, PlantedSummary, ToyModel};
use crate::signal::{build_pair, pearson, sign_agreement, stratify, CandidateSets, CounterfactualPair, Strata};
use crate::synth::{synthesize_records, SynthOptions};
use crate::task::{ElicitationRecord, PromptTemplate, TaskVocab};
use crate::validation::{validate, PairSet, ValidationOptions, ValidationReport};

pub const MODEL_FILE: &str = "model.cmc";
pub const PLANTED_FILE: &str = "planted.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const PAIRS_FILE: &str = "pairs.csv";
pub const ATTRIBUTION_FILE: &str = "attribution.json";
pub const EDGE_SCORES_FILE: &str = "edge_scores.csv";
pub const COMPONENTS_FILE: &str = "components.csv";
pub const VALIDATION_FILE: &str = "validation.json";
pub const FAITHFULNESS_FILE: &str = "faithfulness.csv";
pub const STEERING_PLAN_FILE: &str = "plan_steering.json";
pub const MEAN_PLAN_FILE: &str = "plan_mean_ablation.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const INTERVENTION_FILE: &str = "intervention.json";
pub const RELIABILITY_FILE: &str = "reliability.csv";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const HEATMAP_FILE: &str = "heatmap.csv";
pub const REPORT_FILE: &str = "report.json";

/// Run configuration. Every field has a default, so `{}` is a valid file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub margin: f64,
    pub seed: u64,
    pub records: usize,
    pub p_correct: f64,
    pub question_len: usize,
    pub tau: f64,
    pub steps: usize,
    pub interpolation: Interpolation,
    pub high: Vec<u32>,
    pub low: Vec<u32>,
    pub discovery_records: usize,
    /// Circuit size in edges; `None` means 5% of the graph, rounded up.
    pub top_k: Option<usize>,
    pub grid_points: usize,
    pub incremental: usize,
    pub intervention_components: usize,
    pub alpha_grid: Vec<f64>,
    pub bins: usize,
    pub min_faithfulness_pct: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sets = CandidateSets::default();
        Self {
            model: ModelConfig::default(),
            margin: 8.0,
            seed: 0,
            records: 200,
            p_correct: 0.4,
            question_len: 2,
            tau: 1.0,
            steps: 5,
            interpolation: Interpolation::EndInclusive,
            high: sets.high().to_vec(),
            low: sets.low().to_vec(),
            discovery_records: 32,
            top_k: None,
            grid_points: 20,
            incremental: 5,
            intervention_components: 10,
            alpha_grid: default_alpha_grid(),
            bins: 10,
            min_faithfulness_pct: 85.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(io::require(path)?)?;
        serde_json::from_str(&text).map_err(|e| PipelineError::usage(format!("{}: {e}", path.display())))
    }

    pub fn sets(&self) -> Result<CandidateSets, PipelineError> {
        Ok(CandidateSets::new(self.high.clone(), self.low.clone())?)
    }

    pub fn attribution(&self) -> Result<AttributionConfig, PipelineError> {
        Ok(AttributionConfig {
            steps: self.steps,
            sets: self.sets()?,
            interpolation: self.interpolation,
        })
    }

    pub fn check(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::usage(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.bins == 0 {
            return bad("bins must be at least 1".into());
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.discovery_records == 0 {
            return bad("discovery_records must be at least 1".into());
        }
        if self.alpha_grid.is_empty() || self.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return bad("alpha grid must be nonempty with values in [0, 1]".into());
        }
        self.sets()?;
        Ok(())
    }

    pub fn hash(&self) -> String {
        io::sha256_hex(serde_json::to_string(self).expect("config serialises").as_bytes())
    }

    /// Model and record seeds drawn from one generator seeded with `seed`.
    pub fn derived_seeds(&self) -> (u64, u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (rng.next_u64(), rng.next_u64())
    }
}

/// Planted-model metadata needed to render prompts in later commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedFile {
    pub summary: PlantedSummary,
    pub vocab: TaskVocab,
    pub template: PromptTemplate,
    pub write_direction: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Validation = 1,
    Usage = 2,
    Data = 3,
    Internal = 4,
}

#[derive(Debug)]
pub struct PipelineError {
    pub kind: ExitKind,
    pub tag: &'static str,
    pub message: String,
}

impl PipelineError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Usage,
            tag: "usage",
            message: message.into(),
        }
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }

    /// Single-line JSON for stderr.
    pub fn to_json_line(&self) -> String {
        json!({"error": self.tag, "code": self.code(), "message": self.message}).to_string()
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.tag, self.message)
    }
}

impl std::error::Error for PipelineError {}

impl From<CmcError> for PipelineError {
    fn from(e: CmcError) -> Self {
        let (kind, tag) = match &e {
            CmcError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => (ExitKind::Usage, "missing_artifact"),
            CmcError::Config(_) | CmcError::Candidates(_) | CmcError::Intervention(_) => (ExitKind::Usage, "usage"),
            CmcError::Format(_)
            | CmcError::Json(_)
            | CmcError::Template(_)
            | CmcError::TokenOutOfRange { .. }
            | CmcError::SequenceLength { .. }
            | CmcError::Empty(_)
            | CmcError::Degenerate(_) => (ExitKind::Data, "data"),
            _ => (ExitKind::Internal, "internal"),
        };
        Self {
            kind,
            tag,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        CmcError::Io(e).into()
    }
}

impl From<serde_json::Error> for PipelineError {
    fn from(e: serde_json::Error) -> Self {
        CmcError::Json(e).into()
    }
}

pub type PResult<T> = Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synthesize,
    Attribute,
    Validate,
    Intervene,
    Calibrate,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synthesize => "synthesize",
            Command::Attribute => "attribute",
            Command::Validate => "validate",
            Command::Intervene => "intervene",
            Command::Calibrate => "calibrate",
            Command::Report => "report",
        }
    }

    pub const ALL: [Command; 6] = [
        Command::Synthesize,
        Command::Attribute,
        Command::Validate,
        Command::Intervene,
        Command::Calibrate,
        Command::Report,
    ];
}

/// What a command run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    /// False when validation thresholds were missed; artifacts are still written.
    pub passed: bool,
}

pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    /// External JSONL records replacing the synthesized set.
    pub records: Option<PathBuf>,
}

struct Step<'a> {
    ctx: &'a Context,
    command: Command,
    started: String,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    model_checksum: Option<String>,
}

impl<'a> Step<'a> {
    fn new(ctx: &'a Context, command: Command) -> Self {
        Self {
            ctx,
            command,
            started: io::now_rfc3339(),
            inputs: vec![],
            outputs: vec![],
            model_checksum: None,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.ctx.out.join(name)
    }

    fn input(&mut self, name: &str) -> PResult<PathBuf> {
        let p = io::require(&self.path(name))?;
        self.inputs.push(p.clone());
        Ok(p)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> PResult<()> {
        let p = self.path(name);
        io::write_atomic(&p, bytes)?;
        self.outputs.push(p);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> PResult<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    fn finish(self, passed: bool) -> PResult<Outcome> {
        let digest = |v: &[PathBuf]| v.iter().map(|p| FileDigest::of(p)).collect::<crate::error::Result<Vec<_>>>();
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command.name().to_string(),
            config_hash: self.ctx.config.hash(),
            model_checksum: self.model_checksum,
            seed: self.ctx.config.seed,
            started_at: self.started,
            finished_at: io::now_rfc3339(),
            inputs: digest(&self.inputs)?,
            outputs: digest(&self.outputs)?,
        };
        io::write_json(&self.ctx.out.join(RunManifest::file_name(self.command.name())), &manifest)?;
        Ok(Outcome {
            outputs: self.outputs,
            passed,
        })
    }
}

/// Model, vocabulary and records as seen by every command after synthesis.
struct Loaded {
    model: ToyModel,
    planted: PlantedFile,
    records: Vec<ElicitationRecord>,
}

fn load(step: &mut Step) -> PResult<Loaded> {
    let model = load_snapshot(&step.input(MODEL_FILE)?)?;
    let planted: PlantedFile = serde_json::from_str(&fs::read_to_string(step.input(PLANTED_FILE)?)?)?;
    let path = match &step.ctx.records {
        Some(p) => {
            let p = io::require(p)?;
            step.inputs.push(p.clone());
            p
        }
        None => step.input(RECORDS_FILE)?,
    };
    let ds = io::ingest_records(&path)?;
    let records = ds
        .records
        .iter()
        .zip(&ds.record_lines)
        .map(|(r, line)| {
            r.to_toy(&planted.vocab)
                .map_err(|e| PipelineError::from(CmcError::Format(format!("{}:{line}: {e}", ds.source))))
        })
        .collect::<PResult<Vec<_>>>()?;
    if records.is_empty() {
        return Err(CmcError::Empty("records").into());
    }
    step.model_checksum = Some(model.checksum());
    Ok(Loaded { model, planted, records })
}

struct Discovery {
    pairs: Vec<CounterfactualPair>,
    strata: Strata,
    discovery: Vec<usize>,
}

fn discover(l: &Loaded, cfg: &RunConfig) -> PResult<Discovery> {
    let sets = cfg.sets()?;
    let mut pairs = l
        .records
        .iter()
        .map(|r| build_pair(&l.model, r, &l.planted.template, &sets))
        .collect::<crate::error::Result<Vec<_>>>()?;
    let strata = stratify(&mut pairs, cfg.tau)?;
    let discovery: Vec<usize> = strata.overconfident.iter().take(cfg.discovery_records).copied().collect();
    if discovery.is_empty() {
        return Err(CmcError::Empty("bucket-1 records").into());
    }
    Ok(Discovery {
        pairs,
        strata,
        discovery,
    })
}

impl Discovery {
    fn selected(&self) -> Vec<CounterfactualPair> {
        self.discovery.iter().map(|&i| self.pairs[i].clone()).collect()
    }

    fn activations(&self, model: &ToyModel) -> PResult<Vec<PairActivations>> {
        self.discovery
            .iter()
            .map(|&i| Ok(PairActivations::new(model, &self.pairs[i])?))
            .collect()
    }
}

pub fn run_command(ctx: &Context, command: Command) -> PResult<Outcome> {
    ctx.config.check()?;
    fs::create_dir_all(&ctx.out)?;
    match command {
        Command::Synthesize => synthesize(ctx),
        Command::Attribute => attribute(ctx),
        Command::Validate => validate_cmd(ctx),
        Command::Intervene => intervene(ctx),
        Command::Calibrate => calibrate(ctx),
        Command::Report => report_cmd(ctx),
    }
}

/// All commands in order. Stops at the first error; a failed validation
/// does not stop later commands but is reflected in `passed`.
pub fn run_all(ctx: &Context) -> PResult<Outcome> {
    let mut outputs = vec![];
    let mut passed = true;
    for c in Command::ALL {
        let o = run_command(ctx, c)?;
        outputs.extend(o.outputs);
        passed &= o.passed;
    }
    Ok(Outcome { outputs, passed })
}

fn synthesize(ctx: &Context) -> PResult<Outcome> {
    let mut step = Step::new(ctx, Command::Synthesize);
    let cfg = &ctx.config;
    let (model_seed, record_seed) = cfg.derived_seeds();
    let mc = ModelConfig {
        seed: model_seed,
        ..cfg.model
    };
    let planted = plant_overconfidence_circuit(&mc, cfg.margin)?;
    let opts = SynthOptions {
        records: cfg.records,
        p_correct: cfg.p_correct,
        question_len: cfg.question_len,
    };
    let records = synthesize_records(&planted, &opts, record_seed)?;

    let model_path = step.path(MODEL_FILE);
    save_snapshot(&planted.model, &model_path)?;
    step.outputs.push(model_path);
    step.model_checksum = Some(planted.model.checksum());
    step.write_json(
        PLANTED_FILE,
        &PlantedFile {
            summary: planted.summary(),
            vocab: planted.vocab,
            template: planted.template.clone(),
            write_direction: planted.write_direction.clone(),
        },
    )?;
    let raw: Vec<RawRecord> = records.iter().map(|r| RawRecord::from_toy(r, &planted.vocab)).collect();
    step.write(RECORDS_FILE, io::records_to_jsonl(&raw)?.as_bytes())?;
    step.write_json(CONFIG_FILE, cfg)?;
    step.finish(true)
}

fn attribute(ctx: &Context) -> PResult<Outcome> {
    let mut step = Step::new(ctx, Command::Attribute);
    let cfg = &ctx.config;
    let l = load(&mut step)?;
    let d = discover(&l, cfg)?;
    let agg = aggregate(&l.model, &d.selected(), &cfg.attribution()?)?;

    let mut csv = Vec::new();
    agg.scores.write_csv(l.model.graph(), &mut csv)?;
    step.write(EDGE_SCORES_FILE, &csv)?;
    let mut csv = Vec::new();
    agg.ranking.write_csv(&mut csv)?;
    step.write(COMPONENTS_FILE, &csv)?;

    let mut csv = String::from("record,bucket,tsld_clean,tsld_corrupt,delta_tsld,confidence_clean,confidence_corrupt\n");
    for (i, p) in d.pairs.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            i,
            p.bucket.map(|b| b as u8).unwrap_or(0),
            p.tsld_clean,
            p.tsld_corrupt,
            p.delta_tsld,
            p.confidence_clean,
            p.confidence_corrupt
        ));
    }
    step.write(PAIRS_FILE, csv.as_bytes())?;

    let dt: Vec<f64> = d.pairs.iter().map(|p| p.delta_tsld).collect();
    let dc: Vec<f64> = d.pairs.iter().map(|p| p.delta_confidence()).collect();
    step.write_json(
        ATTRIBUTION_FILE,
        &json!({
            "records": d.pairs.len(),
            "buckets": {
                "overconfident": d.strata.overconfident.len(),
                "raised": d.strata.raised.len(),
                "neutral": d.strata.neutral.len(),
            },
            "discovery_records": d.discovery,
            "steps": cfg.steps,
            "pearson_delta_tsld_confidence": pearson(&dt, &dc).ok(),
            "sign_agreement": sign_agreement(&dt, &dc),
            "top_components": agg.ranking.top(5).iter().map(NodeId::label).collect::<Vec<_>>(),
        }),
    )?;
    step.finish(true)
}

fn read_scores(step: &mut Step, model: &ToyModel) -> PResult<(EdgeScoreMap, ComponentRanking)> {
    let scores = EdgeScoreMap::read_csv(model.graph(), &fs::read_to_string(step.input(EDGE_SCORES_FILE)?)?)?;
    let ranking = ComponentRanking::read_csv(&fs::read_to_string(step.input(COMPONENTS_FILE)?)?)?;
    Ok((scores, ranking))
}

pub fn default_top_k(edges: usize) -> usize {
    (edges * 5).div_ceil(100).max(1)
}

fn validate_cmd(ctx: &Context) -> PResult<Outcome> {
    let mut step = Step::new(ctx, Command::Validate);
    let cfg = &ctx.config;
    let l = load(&mut step)?;
    let (scores, ranking) = read_scores(&mut step, &l.model)?;
    let d = discover(&l, cfg)?;
    let acts = d.activations(&l.model)?;
    let sets = cfg.sets()?;
    let set = PairSet::new(&l.model, &acts, &sets)?;
    let edges = l.model.graph().len();
    let k = cfg.top_k.unwrap_or_else(|| default_top_k(edges));
    if k > edges {
        return Err(PipelineError::usage(format!("top-k {k} exceeds {edges} edges")));
    }
    let opts = ValidationOptions {
        circuit_edges: k,
        grid_points: cfg.grid_points,
        incremental: cfg.incremental,
    };
    let report: ValidationReport = validate(&set, &scores, &ranking.top(ranking.entries.len()), &opts)?;
    let mut csv = String::from("k,pct\n");
    for p in &report.faithfulness {
        csv.push_str(&format!("{},{}\n", p.k, p.faithfulness_pct));
    }
    step.write(FAITHFULNESS_FILE, csv.as_bytes())?;
    let passed = report.circuit_faithfulness_pct >= cfg.min_faithfulness_pct;
    step.write_json(
        VALIDATION_FILE,
        &json!({
            "passed": passed,
            "min_faithfulness_pct": cfg.min_faithfulness_pct,
            "report": report,
        }),
    )?;
    step.finish(passed)
}

fn intervene(ctx: &Context) -> PResult<Outcome> {
    let mut step = Step::new(ctx, Command::Intervene);
    let cfg = &ctx.config;
    let l = load(&mut step)?;
    let ranking = ComponentRanking::read_csv(&fs::read_to_string(step.input(COMPONENTS_FILE)?)?)?;
    let d = discover(&l, cfg)?;
    let acts = d.activations(&l.model)?;
    let targets = ranking.top(cfg.intervention_components);
    if targets.is_empty() {
        return Err(CmcError::Empty("ranked components").into());
    }
    let vectors = targets
        .iter()
        .map(|&c| compute_steering_vector(&acts, c))
        .collect::<crate::error::Result<Vec<_>>>()?;
    let means = targets
        .iter()
        .map(|&c| compute_reference_mean(&acts, c))
        .collect::<crate::error::Result<Vec<_>>>()?;

    let steering = InterventionPlan::steering(&vectors, 0.0)?;
    let sweep = alpha_sweep(&l.model, &l.records, &l.planted.template, &steering, &cfg.alpha_grid, cfg.bins)?;
    let best = sweep.best().expect("nonempty grid").clone();
    let mean_plan = InterventionPlan::mean_ablation(&means);
    let prompts = confidence_prompts(&l.records, &l.planted.template)?;
    let correct: Vec<bool> = l.records.iter().map(|r| r.correct).collect();
    let mean_report = evaluate(&l.model, &prompts, &correct, Some(&mean_plan), cfg.bins)?;

    let mut csv = Vec::new();
    sweep.write_csv(&mut csv)?;
    step.write(SWEEP_FILE, &csv)?;
    step.write_json(STEERING_PLAN_FILE, &steering.with_alpha(best.alpha)?)?;
    step.write_json(MEAN_PLAN_FILE, &mean_plan)?;
    step.write_json(
        INTERVENTION_FILE,
        &json!({
            "components": targets.iter().map(NodeId::label).collect::<Vec<_>>(),
            "reference_records": acts.len(),
            "baseline": {"ece": sweep.baseline.ece, "brier": sweep.baseline.brier},
            "best_steering": best,
            "mean_ablation": {
                "ece": mean_report.ece,
                "brier": mean_report.brier,
                "ece_improvement_pct": crate::calibration::improvement_pct(sweep.baseline.ece, mean_report.ece),
                "brier_improvement_pct": crate::calibration::improvement_pct(sweep.baseline.brier, mean_report.brier),
            },
        }),
    )?;
    step.finish(true)
}

/// Calibration of verbalised confidences. Works on any ingested JSONL, so
/// the model artifacts are not required.
fn calibrate(ctx: &Context) -> PResult<Outcome> {
    let mut step = Step::new(ctx, Command::Calibrate);
    let path = match &ctx.records {
        Some(p) => {
            let p = io::require(p)?;
            step.inputs.push(p.clone());
            p
        }
        None => step.input(RECORDS_FILE)?,
    };
    let ds = io::ingest_records(&path)?;
    let preds = ds
        .records
        .iter()
        .map(|r| PredictionRecord::from_verbalized(r.confidence, r.correct))
        .collect::<crate::error::Result<Vec<_>>>()?;
    let rep = report(&preds, ctx.config.bins)?;
    let mut csv = Vec::new();
    write_reliability_csv(&rep.bins, &mut csv)?;
    step.write(RELIABILITY_FILE, &csv)?;
    step.write_json(
        CALIBRATION_FILE,
        &json!({
            "source": path.strip_prefix(&ctx.out).unwrap_or(&path).display().to_string(),
            "records": ds.records.len(),
            "invalid_lines": ds.errors,
            "ece": rep.ece,
            "brier": rep.brier,
            "bins": rep.bins,
        }),
    )?;
    step.finish(true)
}

fn report_cmd(ctx: &Context) -> PResult<Outcome> {
    let mut step = Step::new(ctx, Command::Report);
    let model = load_snapshot(&step.input(MODEL_FILE)?)?;
    step.model_checksum = Some(model.checksum());
    let ranking = ComponentRanking::read_csv(&fs::read_to_string(step.input(COMPONENTS_FILE)?)?)?;
    let g = model.graph();
    let mut csv = String::from("layer,component,score\n");
    let mut rows = 0;
    for layer in 0..g.n_layers() {
        let nodes = (0..g.n_heads())
            .map(|head| NodeId::Head { layer, head })
            .chain(std::iter::once(NodeId::Mlp { layer }));
        for n in nodes {
            csv.push_str(&format!("{},{},{}\n", layer, n, ranking.score_of(n).unwrap_or(0.0)));
            rows += 1;
        }
    }
    step.write(HEATMAP_FILE, csv.as_bytes())?;

    let mut bundle = serde_json::Map::new();
    bundle.insert("heatmap_rows".into(), json!(rows));
    for name in [ATTRIBUTION_FILE, VALIDATION_FILE, INTERVENTION_FILE, CALIBRATION_FILE] {
        let p = step.path(name);
        if p.is_file() {
            step.inputs.push(p.clone());
            let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p)?)?;
            bundle.insert(name.trim_end_matches(".json").into(), v);
        }
    }
    step.write_json(REPORT_FILE, &bundle)?;
    step.finish(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        c.check().unwrap();
    }

    #[test]
    fn unknown_config_key_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"tua": 1}"#).is_err());
    }

    #[test]
    fn seeds_depend_on_master_seed() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..a.clone() };
        assert_eq!(a.derived_seeds(), a.derived_seeds());
        assert_ne!(a.derived_seeds(), b.derived_seeds());
    }

    #[test]
    fn top_k_default() {
        assert_eq!(default_top_k(479), 24);
        assert_eq!(default_top_k(8), 1);
    }

    #[test]
    fn error_codes() {
        let missing: PipelineError = CmcError::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "x")).into();
        assert_eq!(missing.code(), 2);
        assert_eq!(missing.tag, "missing_artifact");
        let data: PipelineError = CmcError::Format("x".into()).into();
        assert_eq!(data.code(), 3);
        assert!(!data.to_json_line().contains('\n'));
    }
}
