//! Command implementations for the `trajprior` binary.
//!
//! Every command reads its inputs fully, maps items in parallel and writes the
//! results in input order, so output bytes do not depend on `--threads`.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use trajprior::attention::{
    attn_loss, delta_alpha_heads, gate_forward, gnl_combine, head_mean, mnr_combine_or_prior, AttentionRecord, Embeddings,
    GateLayer,
};
use trajprior::feasibility::{audit, default_audit_model, scene_tracks, AuditTrack};
use trajprior::kinematics::{rollout_record, ControlRecord, LimitsTable, RolloutRecord};
use trajprior::metrics::{
    brier_min_fde, interpretability_report, min_ade, min_fde, CorrelationReport, MultiModalPrediction, Mode,
    MISS_THRESHOLD,
};
use trajprior::priors::{prior_scores, PriorConfig, PriorKind, PriorRecord};
use trajprior::reproduction::{gt_windows, reproduce_windows, reproduction_report, ModelMap, SolverConfig};
use trajprior::scene::{generate_synthetic, knn_neighbors, load_scenes, save_scenes, AgentClass, Scene, SceneError, SyntheticSpec};

pub const DEFAULT_K: usize = 8;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Io(_) => 1,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn scene_err(path: &Path, e: SceneError) -> CliError {
    match e {
        SceneError::Io(_) => io_err(path, e),
        other => CliError::Validation(format!("{}: {other}", path.display())),
    }
}

fn read_scenes(path: &Path) -> Result<Vec<Scene>, CliError> {
    load_scenes(path).map_err(|e| scene_err(path, e))
}

#[derive(Debug, Parser)]
#[command(name = "trajprior", version, about = "Interaction priors, kinematic layers and trajectory metrics")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes from a spec file.
    Gen(GenArgs),
    /// Score the neighbors of every focal agent with a rule-based prior.
    Prior(PriorArgs),
    /// Integrate priors into network attention.
    Combine(CombineArgs),
    /// Squash raw controls and roll them out through a kinematic model.
    Rollout(RolloutArgs),
    /// Fit feasible controls to ground truth and report the reproduction error.
    Reproduce(ReproduceArgs),
    /// Count kinematically infeasible steps and trajectories.
    Audit(AuditArgs),
    /// Accuracy metrics and the attention/error correlation.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Synthetic spec (.toml or .json).
    #[arg(long)]
    pub spec: PathBuf,
    /// Seed for every random draw.
    #[arg(long)]
    pub seed: u64,
    /// Output scenes (.jsonl).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PriorArg {
    Dgsfm,
    Skgacn,
    L2,
}

impl From<PriorArg> for PriorKind {
    fn from(p: PriorArg) -> Self {
        match p {
            PriorArg::Dgsfm => PriorKind::Dgsfm,
            PriorArg::Skgacn => PriorKind::Skgacn,
            PriorArg::L2 => PriorKind::L2,
        }
    }
}

#[derive(Debug, Args)]
pub struct PriorArgs {
    /// Scenes (.jsonl).
    #[arg(long)]
    pub scenes: PathBuf,
    /// Prior used to score neighbors.
    #[arg(long, value_enum)]
    pub prior: PriorArg,
    /// Neighbors per focal agent (overrides the config file; default 8).
    #[arg(long)]
    pub k: Option<usize>,
    /// Config file (.toml).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output prior scores (.jsonl).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mnr,
    Gnl,
}

#[derive(Debug, Args)]
pub struct CombineArgs {
    /// Prior scores (.jsonl) from `prior`.
    #[arg(long)]
    pub scores: PathBuf,
    /// Network attention (.jsonl).
    #[arg(long)]
    pub attention: PathBuf,
    /// Integration method: multiply-and-renormalize or gating.
    #[arg(long, value_enum)]
    pub method: Method,
    /// Gate layer (.json); without it the gate is 0.5 everywhere.
    #[arg(long)]
    pub gate_weights: Option<PathBuf>,
    /// Disable the 1e-12 floor on combined scores inside the loss.
    #[arg(long)]
    pub no_smoothing: bool,
    /// Output combined scores (.jsonl).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    /// Raw controls (.jsonl).
    #[arg(long)]
    pub controls: PathBuf,
    /// Limit overrides (.toml); defaults per class and model otherwise.
    #[arg(long)]
    pub limits: Option<PathBuf>,
    /// Output trajectories (.jsonl).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    /// Scenes (.jsonl).
    #[arg(long)]
    pub scenes: PathBuf,
    /// Models per class (.toml), e.g. `pedestrian = ["double_integrator"]`.
    #[arg(long)]
    pub model_map: Option<PathBuf>,
    /// Limit overrides (.toml); defaults per class and model otherwise.
    #[arg(long)]
    pub limits: Option<PathBuf>,
    /// Config file (.toml) with `[solver]` and `[limits]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Reproduce every agent with a valid horizon, not only focal agents.
    #[arg(long)]
    pub all_agents: bool,
    /// Also write the reproduced trajectories (.jsonl) for `audit`.
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
    /// Report (.json or .csv).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    /// Rolled-out trajectories (.jsonl) from `rollout` or `reproduce`.
    #[arg(long, required_unless_present = "scenes", conflicts_with = "scenes")]
    pub trajectories: Option<PathBuf>,
    /// Audit every track of these scenes instead.
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    /// Limit overrides (.toml); defaults per class and model otherwise.
    #[arg(long)]
    pub limits: Option<PathBuf>,
    /// Report (.json or .csv).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Multi-modal predictions (.jsonl).
    #[arg(long)]
    pub pred: PathBuf,
    /// Scenes (.jsonl).
    #[arg(long)]
    pub scenes: PathBuf,
    /// Output of `combine`, for the Δα correlation.
    #[arg(long)]
    pub delta_alpha: Option<PathBuf>,
    /// Modes considered for the best-of-k metrics.
    #[arg(long, default_value_t = 6)]
    pub k: usize,
    /// Report (.json or .csv).
    #[arg(long)]
    pub out: PathBuf,
}

/// Shared config file.
///
/// ```toml
/// k = 8
/// [prior]
/// sigma_pot = 5.0
/// [solver]
/// w_theta = 1.0
/// [limits.pedestrian.double_integrator]
/// accel = [-8.0, 8.0]
/// speed = [0.0, 10.0]
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub k: Option<usize>,
    pub prior: PriorConfig,
    pub solver: SolverConfig,
    pub limits: LimitsTable,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(invalid("--threads must be at least 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(invalid)?;
    pool.install(|| match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Prior(a) => cmd_prior(&a),
        Command::Combine(a) => cmd_combine(&a),
        Command::Rollout(a) => cmd_rollout(&a),
        Command::Reproduce(a) => cmd_reproduce(&a),
        Command::Audit(a) => cmd_audit(&a),
        Command::Metrics(a) => cmd_metrics(&a),
    })
}

// ---------------------------------------------------------------------------
// File helpers

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn read_structured<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = read_text(path)?;
    let parsed = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
        _ => toml::from_str(&text).map_err(|e| e.to_string()),
    };
    parsed.map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn read_jsonl<T: DeserializeOwned + Send>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = read_text(path)?;
    let lines: Vec<(usize, &str)> =
        text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| (i + 1, l)).collect();
    lines
        .par_iter()
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| CliError::Validation(format!("{}:{n}: {e}", path.display()))))
        .collect()
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

fn write_jsonl<T: Serialize + Sync>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let lines: Vec<String> =
        items.par_iter().map(|it| serde_json::to_string(it).map_err(invalid)).collect::<Result<_, _>>()?;
    let mut out = String::new();
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

fn csv_cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Writes `rows` (flat objects with identical keys) as CSV with a header row.
fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut header: Option<Vec<String>> = None;
    for r in rows {
        let Value::Object(map) = serde_json::to_value(r).map_err(invalid)? else {
            return Err(invalid("report row is not an object"));
        };
        if header.is_none() {
            let h: Vec<String> = map.keys().cloned().collect();
            w.write_record(&h).map_err(invalid)?;
            header = Some(h);
        }
        w.write_record(map.values().map(csv_cell)).map_err(invalid)?;
    }
    w.into_inner().map_err(|e| invalid(e.to_string()))
}

/// JSON for `.json`, CSV of `rows` for `.csv`.
fn write_report<R: Serialize, T: Serialize>(path: &Path, report: &R, rows: &[T]) -> Result<(), CliError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => write_bytes(path, &csv_bytes(rows)?),
        Some("json") => {
            let mut s = serde_json::to_string_pretty(report).map_err(invalid)?;
            s.push('\n');
            write_bytes(path, s.as_bytes())
        }
        _ => Err(invalid(format!("{}: report must end in .json or .csv", path.display()))),
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<Config, CliError> {
    let cfg: Config = match path {
        Some(p) => read_structured(p)?,
        None => Config::default(),
    };
    cfg.prior.validate().map_err(invalid)?;
    cfg.solver.validate().map_err(invalid)?;
    cfg.limits.validate().map_err(invalid)?;
    Ok(cfg)
}

fn load_limits(path: Option<&PathBuf>, base: LimitsTable) -> Result<LimitsTable, CliError> {
    let mut table = base;
    if let Some(p) = path {
        let extra: LimitsTable = read_structured(p)?;
        for (class, models) in extra.0 {
            table.0.entry(class).or_default().extend(models);
        }
    }
    table.validate().map_err(invalid)?;
    Ok(table)
}

// ---------------------------------------------------------------------------
// gen

pub fn cmd_gen(a: &GenArgs) -> Result<(), CliError> {
    let spec: SyntheticSpec = read_structured(&a.spec)?;
    let scenes = generate_synthetic(&spec, a.seed).map_err(|e| scene_err(&a.spec, e))?;
    save_scenes(&scenes, &a.out).map_err(|e| scene_err(&a.out, e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// prior

pub fn cmd_prior(a: &PriorArgs) -> Result<(), CliError> {
    let cfg = load_config(a.config.as_ref())?;
    let k = a.k.or(cfg.k).unwrap_or(DEFAULT_K);
    let kind = PriorKind::from(a.prior);
    let scenes = read_scenes(&a.scenes)?;
    let per_scene: Vec<Vec<PriorRecord>> = scenes
        .par_iter()
        .map(|sc| {
            sc.focal_ids
                .iter()
                .map(|f| {
                    let nb = knn_neighbors(sc, f, k).map_err(invalid)?;
                    let sv = prior_scores(kind, sc, &nb, &cfg.prior)
                        .map_err(|e| invalid(format!("scene {}: {e}", sc.scene_id)))?;
                    Ok(PriorRecord::new(&sc.scene_id, kind, &sv))
                })
                .collect::<Result<Vec<_>, CliError>>()
        })
        .collect::<Result<_, _>>()?;
    let records: Vec<PriorRecord> = per_scene.into_iter().flatten().collect();
    write_jsonl(&a.out, &records)
}

// ---------------------------------------------------------------------------
// combine

/// Attention input line. It may be a prior-score line with `alpha_pred`
/// added; when neighbor ids are present they must match the prior's order.
#[derive(Debug, Clone, Deserialize)]
pub struct AttentionLine {
    pub scene_id: String,
    pub focal_id: String,
    pub alpha_pred: Vec<Vec<f64>>,
    #[serde(default)]
    pub embeddings: Option<Embeddings>,
    #[serde(default)]
    pub neighbor_ids: Option<Vec<String>>,
    #[serde(default)]
    pub scores: Option<Vec<trajprior::priors::NeighborScore>>,
}

impl AttentionLine {
    fn ids(&self) -> Option<Vec<String>> {
        self.neighbor_ids
            .clone()
            .or_else(|| self.scores.as_ref().map(|s| s.iter().map(|n| n.neighbor_id.clone()).collect()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedRecord {
    pub scene_id: String,
    pub focal_id: String,
    pub method: Method,
    pub neighbor_ids: Vec<String>,
    pub beta: Vec<f64>,
    /// Heads × neighbors.
    pub alpha_cmb: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gate: Option<Vec<f64>>,
    /// Per-head Δα averaged over heads; absent for an empty neighbor set.
    pub delta_alpha_pred: Option<f64>,
    pub delta_alpha_cmb: Option<f64>,
    pub kl_loss: Option<f64>,
}

fn combine_one(
    prior: &PriorRecord,
    att: &AttentionLine,
    method: Method,
    gate: Option<&GateLayer>,
    smoothing: bool,
) -> Result<CombinedRecord, CliError> {
    let ctx = |e: &dyn std::fmt::Display| invalid(format!("scene {} focal {}: {e}", prior.scene_id, prior.focal_id));
    let ids: Vec<String> = prior.scores.iter().map(|s| s.neighbor_id.clone()).collect();
    if let Some(att_ids) = att.ids() {
        if att_ids != ids {
            return Err(ctx(&"attention neighbor order differs from the prior"));
        }
    }
    let beta: Vec<f64> = prior.scores.iter().map(|s| s.score).collect();
    if att.alpha_pred.is_empty() {
        return Err(ctx(&"alpha_pred has no heads"));
    }
    if let Some(h) = att.alpha_pred.iter().find(|h| h.len() != beta.len()) {
        return Err(ctx(&format!("alpha_pred head has {} entries, prior has {}", h.len(), beta.len())));
    }
    let mut rec = CombinedRecord {
        scene_id: prior.scene_id.clone(),
        focal_id: prior.focal_id.clone(),
        method,
        neighbor_ids: ids,
        beta: beta.clone(),
        alpha_cmb: vec![Vec::new(); att.alpha_pred.len()],
        gate: None,
        delta_alpha_pred: None,
        delta_alpha_cmb: None,
        kl_loss: None,
    };
    if beta.is_empty() {
        return Ok(rec);
    }
    let (cmb, sigma) = match method {
        Method::Mnr => {
            let cmb = att.alpha_pred.iter().map(|h| mnr_combine_or_prior(h, &beta)).collect::<Result<Vec<_>, _>>();
            (cmb.map_err(|e| ctx(&e))?, None)
        }
        Method::Gnl => {
            let record = AttentionRecord {
                focal_id: att.focal_id.clone(),
                alpha_pred: att.alpha_pred.clone(),
                embeddings: att.embeddings.clone(),
            };
            let zero;
            let layer = match gate {
                Some(l) => l,
                None => {
                    zero = GateLayer::zeros(beta.len(), 0);
                    &zero
                }
            };
            let sigma = gate_forward(&record, &beta, layer).map_err(|e| ctx(&e))?;
            let cmb = att.alpha_pred.iter().map(|h| gnl_combine(h, &beta, &sigma)).collect::<Result<Vec<_>, _>>();
            (cmb.map_err(|e| ctx(&e))?, Some(sigma))
        }
    };
    head_mean(&att.alpha_pred).map_err(|e| ctx(&e))?;
    rec.delta_alpha_pred = Some(delta_alpha_heads(&att.alpha_pred, &beta).map_err(|e| ctx(&e))?);
    rec.delta_alpha_cmb = Some(delta_alpha_heads(&cmb, &beta).map_err(|e| ctx(&e))?);
    rec.kl_loss = Some(attn_loss(&beta, &cmb, smoothing).map_err(|e| ctx(&e))?.loss);
    rec.alpha_cmb = cmb;
    rec.gate = sigma;
    Ok(rec)
}

pub fn cmd_combine(a: &CombineArgs) -> Result<(), CliError> {
    let priors: Vec<PriorRecord> = read_jsonl(&a.scores)?;
    let atts: Vec<AttentionLine> = read_jsonl(&a.attention)?;
    let gate: Option<GateLayer> = match &a.gate_weights {
        Some(p) => {
            let l: GateLayer = serde_json::from_str(&read_text(p)?)
                .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            l.validate().map_err(invalid)?;
            Some(l)
        }
        None => None,
    };
    if gate.is_some() && a.method == Method::Mnr {
        return Err(invalid("--gate-weights only applies to --method gnl"));
    }
    let mut by_key: HashMap<(&str, &str), &AttentionLine> = HashMap::new();
    for att in &atts {
        if by_key.insert((&att.scene_id, &att.focal_id), att).is_some() {
            return Err(invalid(format!("duplicate attention record for {} {}", att.scene_id, att.focal_id)));
        }
    }
    if atts.len() != priors.len() {
        return Err(invalid(format!("{} prior records but {} attention records", priors.len(), atts.len())));
    }
    let out: Vec<CombinedRecord> = priors
        .par_iter()
        .map(|p| {
            let att = by_key
                .get(&(p.scene_id.as_str(), p.focal_id.as_str()))
                .ok_or_else(|| invalid(format!("no attention record for {} {}", p.scene_id, p.focal_id)))?;
            combine_one(p, att, a.method, gate.as_ref(), !a.no_smoothing)
        })
        .collect::<Result<_, _>>()?;
    write_jsonl(&a.out, &out)
}

// ---------------------------------------------------------------------------
// rollout

pub fn cmd_rollout(a: &RolloutArgs) -> Result<(), CliError> {
    let limits = load_limits(a.limits.as_ref(), LimitsTable::default())?;
    let recs: Vec<ControlRecord> = read_jsonl(&a.controls)?;
    let out: Vec<RolloutRecord> = recs
        .par_iter()
        .map(|r| {
            rollout_record(r, &limits.get(r.class, r.model))
                .map_err(|e| invalid(format!("scene {} agent {}: {e}", r.scene_id, r.agent_id)))
        })
        .collect::<Result<_, _>>()?;
    write_jsonl(&a.out, &out)
}

// ---------------------------------------------------------------------------
// reproduce

pub fn cmd_reproduce(a: &ReproduceArgs) -> Result<(), CliError> {
    let cfg = load_config(a.config.as_ref())?;
    let limits = load_limits(a.limits.as_ref(), cfg.limits.clone())?;
    let models: ModelMap = match &a.model_map {
        Some(p) => read_structured(p)?,
        None => ModelMap::default(),
    };
    for (class, list) in &models.0 {
        for m in list {
            limits.get(*class, *m).channel_bounds(*m).map_err(|e| invalid(format!("{class}.{m}: {e}")))?;
        }
    }
    let scenes = read_scenes(&a.scenes)?;
    let (windows, skipped) = gt_windows(&scenes, a.all_agents);
    let tracks = reproduce_windows(&windows, &models, &limits, &cfg.solver).map_err(invalid)?;
    let report = reproduction_report(&windows, &tracks, &models, skipped);
    if let Some(path) = &a.trajectories {
        let recs: Vec<RolloutRecord> = tracks
            .iter()
            .map(|t| {
                let w = &windows[t.window];
                t.reproduction.to_record(&w.scene_id, &w.agent_id, w.class, w.dt)
            })
            .collect();
        write_jsonl(path, &recs)?;
    }
    write_report(&a.out, &report, &report.rows)
}

// ---------------------------------------------------------------------------
// audit

pub fn cmd_audit(a: &AuditArgs) -> Result<(), CliError> {
    let limits = load_limits(a.limits.as_ref(), LimitsTable::default())?;
    let tracks: Vec<AuditTrack> = match (&a.trajectories, &a.scenes) {
        (Some(p), _) => {
            let recs: Vec<RolloutRecord> = read_jsonl(p)?;
            recs.iter()
                .map(|r| AuditTrack::from_positions(r.class, limits.get(r.class, r.model), r.dt, &r.positions()))
                .collect()
        }
        (None, Some(p)) => {
            let scenes = read_scenes(p)?;
            scene_tracks(&scenes, |c| limits.get(c, default_audit_model(c)))
        }
        (None, None) => return Err(invalid("one of --trajectories or --scenes is required")),
    };
    let report = audit(&tracks).map_err(invalid)?;
    write_report(&a.out, &report, &report.rows)
}

// ---------------------------------------------------------------------------
// metrics

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionLine {
    pub scene_id: String,
    pub agent_id: String,
    pub modes: Vec<Mode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub class: String,
    pub count: usize,
    pub min_ade_k: f64,
    pub min_fde_k: f64,
    pub min_ade_1: f64,
    pub min_fde_1: f64,
    pub miss_rate_k: f64,
    pub brier_min_fde_k: f64,
    pub map: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSection {
    /// Predictions without a matching Δα record.
    pub unmatched: usize,
    #[serde(flatten)]
    pub report: CorrelationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub miss_threshold: f64,
    pub rows: Vec<MetricsRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correlation: Option<CorrelationSection>,
}

struct AgentMetrics {
    class: AgentClass,
    ade_k: f64,
    fde_k: f64,
    ade_1: f64,
    fde_1: f64,
    brier_k: f64,
}

fn horizon_gt(sc: &Scene, agent: &str) -> Result<(AgentClass, Vec<trajprior::geom::Vec2>), CliError> {
    let tr = sc.track(agent).ok_or_else(|| invalid(format!("scene {}: unknown agent {agent}", sc.scene_id)))?;
    let win = &tr.states[sc.t_obs..];
    if win.iter().any(|s| !s.valid) {
        return Err(invalid(format!("scene {} agent {agent}: horizon has invalid steps", sc.scene_id)));
    }
    Ok((tr.class, win.iter().map(|s| s.position()).collect()))
}

fn metrics_row(class: &str, items: &[&AgentMetrics]) -> MetricsRow {
    let n = items.len().max(1) as f64;
    let mean = |f: &dyn Fn(&AgentMetrics) -> f64| items.iter().map(|m| f(m)).sum::<f64>() / n;
    MetricsRow {
        class: class.to_string(),
        count: items.len(),
        min_ade_k: mean(&|m| m.ade_k),
        min_fde_k: mean(&|m| m.fde_k),
        min_ade_1: mean(&|m| m.ade_1),
        min_fde_1: mean(&|m| m.fde_1),
        miss_rate_k: items.iter().filter(|m| m.fde_k > MISS_THRESHOLD).count() as f64 / n,
        brier_min_fde_k: mean(&|m| m.brier_k),
        map: "unsupported".into(),
    }
}

pub fn cmd_metrics(a: &MetricsArgs) -> Result<(), CliError> {
    if a.k == 0 {
        return Err(invalid("--k must be at least 1"));
    }
    let scenes = read_scenes(&a.scenes)?;
    let by_id: HashMap<&str, &Scene> = scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect();
    let preds: Vec<PredictionLine> = read_jsonl(&a.pred)?;
    let per: Vec<AgentMetrics> = preds
        .par_iter()
        .map(|p| {
            let sc = by_id.get(p.scene_id.as_str()).ok_or_else(|| invalid(format!("unknown scene {}", p.scene_id)))?;
            let (class, gt) = horizon_gt(sc, &p.agent_id)?;
            let mm = MultiModalPrediction { agent_id: p.agent_id.clone(), modes: p.modes.clone() };
            let ctx = |e: trajprior::metrics::MetricsError| invalid(format!("scene {} agent {}: {e}", p.scene_id, p.agent_id));
            Ok(AgentMetrics {
                class,
                ade_k: min_ade(&mm, &gt, a.k).map_err(ctx)?,
                fde_k: min_fde(&mm, &gt, a.k).map_err(ctx)?,
                ade_1: min_ade(&mm, &gt, 1).map_err(ctx)?,
                fde_1: min_fde(&mm, &gt, 1).map_err(ctx)?,
                brier_k: brier_min_fde(&mm, &gt, a.k).map_err(ctx)?,
            })
        })
        .collect::<Result<_, CliError>>()?;

    let mut rows = Vec::new();
    for class in AgentClass::ALL {
        let items: Vec<&AgentMetrics> = per.iter().filter(|m| m.class == class).collect();
        if !items.is_empty() {
            rows.push(metrics_row(class.as_str(), &items));
        }
    }
    let all: Vec<&AgentMetrics> = per.iter().collect();
    rows.push(metrics_row("all", &all));

    let correlation = match &a.delta_alpha {
        None => None,
        Some(p) => {
            let recs: Vec<CombinedRecord> = read_jsonl(p)?;
            let by_agent: HashMap<(&str, &str), &CombinedRecord> =
                recs.iter().map(|r| ((r.scene_id.as_str(), r.focal_id.as_str()), r)).collect();
            let (mut ade, mut dp, mut dc) = (Vec::new(), Vec::new(), Vec::new());
            let mut unmatched = 0;
            for (pred, m) in preds.iter().zip(&per) {
                match by_agent.get(&(pred.scene_id.as_str(), pred.agent_id.as_str())) {
                    Some(CombinedRecord { delta_alpha_pred: Some(x), delta_alpha_cmb: Some(y), .. }) => {
                        ade.push(m.ade_k);
                        dp.push(*x);
                        dc.push(*y);
                    }
                    _ => unmatched += 1,
                }
            }
            let report = interpretability_report(&ade, &dp, &dc).map_err(invalid)?;
            Some(CorrelationSection { unmatched, report })
        }
    };
    let report = MetricsReport { k: a.k, miss_threshold: MISS_THRESHOLD, rows, correlation };
    write_report(&a.out, &report, &report.rows)
}
