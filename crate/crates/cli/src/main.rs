//! Command-line front end for the experiment laboratory.
//!
//! Training and evaluation subcommands accept `--config run.json` plus
//! flags; flags override file values, file values override defaults, and
//! the fully resolved configuration is written next to the outputs as
//! `config.json`, so re-running with that file (and the same seed)
//! reproduces every checkpoint and report byte for byte.
//!
//! Artifact layout under `--out`: `config.json`, `checkpoints/`,
//! `metrics.csv`, `report.json`. Exit codes: 0 success, 1 validation or
//! runtime failure, 2 usage. `CARL_LAB_THREADS` caps rollout parallelism.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use carl_lab::carl::{self, AblationVariant, CarlConfig};
use carl_lab::data::{self, GoalMode, Region, SamplerConfig};
use carl_lab::env::{Action, Env, EpisodeConfig};
use carl_lab::eval::{self, SweepAxis, SweepSpec, TransferSpec};
use carl_lab::hrl::{self, Algorithm, CoTrainConfig, EncoderMode};
use carl_lab::mdp::{self, TabularMdp};
use carl_lab::nn::Matrix;
use carl_lab::util::derive_seed;

fn main() -> ExitCode {
    // Usage errors (unknown flag/subcommand, bad value syntax) exit 2 via
    // clap; everything that fails after parsing exits 1.
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[derive(Parser)]
#[command(name = "carl-lab", version, about = "Desk-scale laboratory for action-sequence representations and hierarchical goal-conditioned control")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate an offline expert-with-noise trajectory dataset.
    GenData(GenDataArgs),
    /// Train a (state, goal) / action-sequence encoder.
    TrainRepr(TrainReprArgs),
    /// Train the hierarchical agent, optionally with an encoder.
    TrainHrl(TrainHrlArgs),
    /// Roll out a trained agent and report per-room success rates.
    Eval(EvalArgs),
    /// Embed (state, goal) pairs and write them as CSV.
    Embed(EmbedArgs),
    /// Rank candidate pairs by embedding similarity to a reference pair.
    NnQuery(NnQueryArgs),
    /// Train and evaluate across one axis of values, tabulating results.
    Sweep(SweepArgs),
    /// Print the k-step reachability set of a state in a tabular MDP.
    Kball(KballArgs),
    /// Decide dynamics bisimilarity between two tabular MDPs.
    Bisim(BisimArgs),
    /// Render an environment; optionally export its tabular MDP.
    Env(EnvArgs),
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::TrainRepr(a) => cmd_train_repr(a),
        Cmd::TrainHrl(a) => cmd_train_hrl(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Embed(a) => cmd_embed(a),
        Cmd::NnQuery(a) => cmd_nn_query(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Kball(a) => cmd_kball(a),
        Cmd::Bisim(a) => cmd_bisim(a),
        Cmd::Env(a) => cmd_env(a),
    }
}

// ---------------------------------------------------------------------------
// Run configuration: defaults < config file < flags.

/// Everything a run needs, grouped by pipeline stage. Unknown keys in a
/// config file are rejected so typos fail loudly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    /// Environment spec: `rooms5`, `rooms7x4` (7 rooms of side 4), `point`.
    env: String,
    data: DataSection,
    model: ModelSection,
    hrl: HrlSection,
    eval: EvalSection,
    sweep: SweepSection,
    seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: "rooms5".into(),
            data: DataSection::default(),
            model: ModelSection::default(),
            hrl: HrlSection::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DataSection {
    episodes: usize,
    horizon: usize,
    /// Expert action noise in [0, 1].
    noise: f64,
    /// Restrict episode starts to these rooms; omit for all rooms.
    start_rooms: Option<Vec<usize>>,
    /// Half of the state space the coverage filter thins: left | right | top | bottom.
    coverage_region: Option<String>,
    /// Fraction of in-region transitions the coverage filter keeps.
    coverage_keep: f64,
    /// Direction the imbalance filter removes: up | down | left | right.
    imbalance_dir: Option<String>,
    /// Fraction of that direction's transitions the imbalance filter removes.
    imbalance_remove: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            episodes: 300,
            horizon: 150,
            noise: 0.1,
            start_rooms: None,
            coverage_region: None,
            coverage_keep: 1.0,
            imbalance_dir: None,
            imbalance_remove: 0.0,
        }
    }
}

/// Encoder shape and training; integer fields are signed so that negative
/// flag values reach validation (and name their field) instead of dying in
/// the parser.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelSection {
    /// carl, sa-carl, ma-pred, sa-pred.
    variant: String,
    k: i64,
    stride: i64,
    tau: f64,
    /// Embedding dimension.
    d: i64,
    phi_hidden: Vec<usize>,
    psi_hidden: Vec<usize>,
    lr: f64,
    /// interior | surface.
    goal_mode: String,
    batch: i64,
    steps: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = CarlConfig::default();
        ModelSection {
            variant: "carl".into(),
            k: c.k as i64,
            stride: c.stride as i64,
            tau: c.tau,
            d: c.d as i64,
            phi_hidden: c.phi_hidden,
            psi_hidden: c.psi_hidden,
            lr: c.lr,
            goal_mode: "interior".into(),
            batch: 256,
            steps: 2000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct HrlSection {
    /// hiql | hgcbc.
    algo: String,
    /// none | pretrain | cotrain.
    mode: String,
    lambda_aux: f64,
    kappa: f64,
    beta: f64,
    gamma: f64,
    value_hidden: Vec<usize>,
    high_hidden: Vec<usize>,
    low_hidden: Vec<usize>,
    batch: i64,
    steps: usize,
    lr: f64,
    flow_through: bool,
    /// Encoder checkpoint directory (pretrain mode).
    pretrain: Option<PathBuf>,
}

impl Default for HrlSection {
    fn default() -> Self {
        let c = CoTrainConfig::default();
        HrlSection {
            algo: "hiql".into(),
            mode: "none".into(),
            lambda_aux: c.lambda_aux,
            kappa: c.kappa,
            beta: c.beta,
            gamma: c.gamma,
            value_hidden: c.value_hidden,
            high_hidden: c.high_hidden,
            low_hidden: c.low_hidden,
            batch: 256,
            steps: 4000,
            lr: c.lr,
            flow_through: false,
            pretrain: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalSection {
    /// Rooms to evaluate; omit for all rooms.
    rooms: Option<Vec<usize>>,
    episodes: usize,
    horizon: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { rooms: None, episodes: 20, horizon: 200 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SweepSection {
    /// k | coverage | imbalance | lambda_aux | variant.
    axis: String,
    values: Vec<String>,
    seeds: Vec<u64>,
    /// Direction whose transitions the imbalance axis removes.
    imbalance_direction: usize,
    train_rooms: Vec<usize>,
    test_rooms: Vec<usize>,
    repr_steps: usize,
    repr_batch: usize,
    hrl_steps: usize,
    /// Run the encoder-free baseline on every cell too.
    compare_baseline: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            axis: "k".into(),
            values: vec!["3".into()],
            seeds: vec![1],
            imbalance_direction: 0,
            train_rooms: vec![0],
            test_rooms: vec![1, 2, 3, 4],
            repr_steps: 2000,
            repr_batch: 256,
            hrl_steps: 4000,
            compare_baseline: false,
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Creates `<out>/checkpoints/` and records the resolved configuration.
fn prepare_out(out: &Path, resolved: &RunConfig) -> Result<()> {
    fs::create_dir_all(out.join("checkpoints"))
        .with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), resolved)
}

/// Flags every subcommand that trains or evaluates shares.
#[derive(Args)]
struct Common {
    /// JSON run configuration; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Environment spec (`rooms5`, `rooms7x4`, `point`).
    #[arg(long)]
    env: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut rc: RunConfig = match &self.config {
            Some(path) => read_json(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            rc.seed = seed;
        }
        if let Some(env) = &self.env {
            rc.env = env.clone();
        }
        Ok(rc)
    }
}

// ---------------------------------------------------------------------------
// Section → core-config conversion, with dotted field paths on failure.

fn positive(field: &str, v: i64) -> Result<usize> {
    if v < 1 {
        bail!(carl_lab::Error::config(format!("{field}: must be a positive integer, got {v}")));
    }
    Ok(v as usize)
}

fn fraction(field: &str, v: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&v) {
        bail!(carl_lab::Error::config(format!("{field}: must lie in [0, 1], got {v}")));
    }
    Ok(v)
}

fn parse_field<T>(field: &str, value: &str) -> Result<T>
where
    T: std::str::FromStr<Err = carl_lab::Error>,
{
    value.parse().map_err(|e| anyhow!("{field}: {e}"))
}

fn action_index(field: &str, name: &str) -> Result<usize> {
    Action::ALL
        .iter()
        .find(|a| format!("{a:?}").eq_ignore_ascii_case(name))
        .map(|a| a.index())
        .ok_or_else(|| anyhow!("{field}: unknown direction `{name}` (up | down | left | right)"))
}

fn to_carl_config(m: &ModelSection) -> Result<CarlConfig> {
    let cfg = CarlConfig {
        variant: parse_field::<AblationVariant>("model.variant", &m.variant)?,
        k: positive("model.k", m.k)?,
        stride: positive("model.stride", m.stride)?,
        tau: m.tau,
        d: positive("model.d", m.d)?,
        phi_hidden: m.phi_hidden.clone(),
        psi_hidden: m.psi_hidden.clone(),
        lr: m.lr,
    };
    cfg.validate().map_err(|e| anyhow!("model: {e}"))?;
    Ok(cfg)
}

fn to_sampler_config(rc: &RunConfig, carl_cfg: &CarlConfig) -> Result<SamplerConfig> {
    Ok(SamplerConfig {
        k: carl_cfg.k,
        stride: carl_cfg.stride,
        goal_mode: parse_field::<GoalMode>("model.goal_mode", &rc.model.goal_mode)?,
        batch_size: positive("model.batch", rc.model.batch)?,
        // The batch stream is derived off the base seed so init and
        // sampling never share state.
        seed: derive_seed(rc.seed, 2),
    })
}

fn to_cotrain_config(rc: &RunConfig) -> Result<CoTrainConfig> {
    let cfg = CoTrainConfig {
        algorithm: parse_field::<Algorithm>("hrl.algo", &rc.hrl.algo)?,
        mode: parse_field::<EncoderMode>("hrl.mode", &rc.hrl.mode)?,
        lambda_aux: fraction("hrl.lambda_aux", rc.hrl.lambda_aux)?,
        gamma: rc.hrl.gamma,
        kappa: rc.hrl.kappa,
        beta: rc.hrl.beta,
        carl: to_carl_config(&rc.model)?,
        value_hidden: rc.hrl.value_hidden.clone(),
        high_hidden: rc.hrl.high_hidden.clone(),
        low_hidden: rc.hrl.low_hidden.clone(),
        batch_size: positive("hrl.batch", rc.hrl.batch)?,
        lr: rc.hrl.lr,
        flow_through: rc.hrl.flow_through,
        pretrain_checkpoint: rc.hrl.pretrain.clone(),
    };
    cfg.validate().map_err(|e| anyhow!("hrl: {e}"))?;
    Ok(cfg)
}

fn to_sweep_spec(rc: &RunConfig) -> Result<SweepSpec> {
    let spec = SweepSpec {
        axis: parse_field::<SweepAxis>("sweep.axis", &rc.sweep.axis)?,
        values: rc.sweep.values.clone(),
        seeds: rc.sweep.seeds.clone(),
        data_episodes: rc.data.episodes,
        data_horizon: rc.data.horizon,
        data_noise: fraction("data.noise", rc.data.noise)?,
        imbalance_direction: rc.sweep.imbalance_direction,
        transfer: TransferSpec {
            train_rooms: rc.sweep.train_rooms.clone(),
            test_rooms: rc.sweep.test_rooms.clone(),
            repr_steps: rc.sweep.repr_steps,
            repr_batch: rc.sweep.repr_batch,
            goal_mode: parse_field::<GoalMode>("model.goal_mode", &rc.model.goal_mode)?,
            hrl_steps: rc.sweep.hrl_steps,
            eval_episodes: rc.eval.episodes,
            horizon: rc.eval.horizon,
        },
        compare_baseline: rc.sweep.compare_baseline,
    };
    spec.validate().map_err(|e| anyhow!("sweep: {e}"))?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// gen-data

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Episodes to roll out.
    #[arg(long)]
    episodes: Option<usize>,
    /// Steps per episode.
    #[arg(long)]
    horizon: Option<usize>,
    /// Expert action noise in [0, 1].
    #[arg(long)]
    noise: Option<f64>,
    /// Restrict episode starts to these rooms (comma-separated).
    #[arg(long, value_delimiter = ',')]
    start_rooms: Option<Vec<usize>>,
    /// Thin transitions in this half of the state space: left | right | top | bottom.
    #[arg(long)]
    coverage_region: Option<String>,
    /// Fraction of in-region transitions to keep (with --coverage-region).
    #[arg(long)]
    coverage_keep: Option<f64>,
    /// Remove transitions taking this action: up | down | left | right.
    #[arg(long)]
    imbalance_dir: Option<String>,
    /// Fraction of that direction's transitions to remove (with --imbalance-dir).
    #[arg(long)]
    imbalance_remove: Option<f64>,
    /// Output directory; the dataset lands at <out>/dataset.bin.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let mut rc = a.common.resolve()?;
    if let Some(v) = a.episodes {
        rc.data.episodes = v;
    }
    if let Some(v) = a.horizon {
        rc.data.horizon = v;
    }
    if let Some(v) = a.noise {
        rc.data.noise = v;
    }
    if a.start_rooms.is_some() {
        rc.data.start_rooms = a.start_rooms.clone();
    }
    if a.coverage_region.is_some() {
        rc.data.coverage_region = a.coverage_region.clone();
    }
    if let Some(v) = a.coverage_keep {
        rc.data.coverage_keep = v;
    }
    if a.imbalance_dir.is_some() {
        rc.data.imbalance_dir = a.imbalance_dir.clone();
    }
    if let Some(v) = a.imbalance_remove {
        rc.data.imbalance_remove = v;
    }
    if rc.data.episodes == 0 {
        bail!(carl_lab::Error::config("data.episodes: must be at least 1"));
    }
    fraction("data.noise", rc.data.noise)?;
    let env = Env::from_spec(&rc.env)?;
    let episode = EpisodeConfig { horizon: rc.data.horizon, start_rooms: rc.data.start_rooms.clone() };
    episode.validate(&env).map_err(|e| anyhow!("data: {e}"))?;
    let mut ds = data::generate_dataset(&env, &episode, rc.data.episodes, rc.data.noise, rc.seed)?;
    if let Some(region) = &rc.data.coverage_region {
        let region = parse_field::<Region>("data.coverage_region", region)?;
        let keep = fraction("data.coverage_keep", rc.data.coverage_keep)?;
        ds = data::filter_coverage(&ds, |s| region.contains(s), keep, derive_seed(rc.seed, 8))?;
    }
    if let Some(dir) = &rc.data.imbalance_dir {
        let dir = action_index("data.imbalance_dir", dir)?;
        let remove = fraction("data.imbalance_remove", rc.data.imbalance_remove)?;
        ds = data::filter_imbalance(
            &ds,
            |_| true,
            dir,
            remove,
            derive_seed(rc.seed, 9),
        )?;
    }
    prepare_out(&a.out, &rc)?;
    data::save_dataset(&ds, &a.out.join("dataset.bin"))?;
    let mut metrics = String::from("metric,value\n");
    writeln!(metrics, "trajectories,{}", ds.trajectories.len()).expect("infallible");
    writeln!(metrics, "transitions,{}", ds.num_transitions()).expect("infallible");
    fs::write(a.out.join("metrics.csv"), metrics)
        .with_context(|| format!("writing {}", a.out.join("metrics.csv").display()))?;
    write_json(
        &a.out.join("report.json"),
        &serde_json::json!({
            "trajectories": ds.trajectories.len(),
            "transitions": ds.num_transitions(),
            "state_dim": ds.state_dim,
            "action_dim": ds.action_dim,
        }),
    )?;
    println!(
        "wrote {} trajectories ({} transitions) to {}",
        ds.trajectories.len(),
        ds.num_transitions(),
        a.out.join("dataset.bin").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train-repr

#[derive(Args)]
struct TrainReprArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset file written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Encoder variant: carl, sa-carl, ma-pred, sa-pred.
    #[arg(long)]
    variant: Option<String>,
    /// Action-sequence window length.
    #[arg(long, allow_negative_numbers = true)]
    k: Option<i64>,
    /// Keep every stride-th action of the window.
    #[arg(long, allow_negative_numbers = true)]
    stride: Option<i64>,
    /// InfoNCE temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Embedding dimension.
    #[arg(long, allow_negative_numbers = true)]
    d: Option<i64>,
    /// Goal placement inside the window: interior | surface.
    #[arg(long)]
    goal_mode: Option<String>,
    /// Contrastive batch size.
    #[arg(long, allow_negative_numbers = true)]
    batch: Option<i64>,
    /// Training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_train_repr(a: TrainReprArgs) -> Result<()> {
    let mut rc = a.common.resolve()?;
    if let Some(v) = &a.variant {
        rc.model.variant = v.clone();
    }
    if let Some(v) = a.k {
        rc.model.k = v;
    }
    if let Some(v) = a.stride {
        rc.model.stride = v;
    }
    if let Some(v) = a.tau {
        rc.model.tau = v;
    }
    if let Some(v) = a.d {
        rc.model.d = v;
    }
    if let Some(v) = &a.goal_mode {
        rc.model.goal_mode = v.clone();
    }
    if let Some(v) = a.batch {
        rc.model.batch = v;
    }
    if let Some(v) = a.steps {
        rc.model.steps = v;
    }
    if let Some(v) = a.lr {
        rc.model.lr = v;
    }
    let carl_cfg = to_carl_config(&rc.model)?;
    let sampler = to_sampler_config(&rc, &carl_cfg)?;
    let ds = data::load_dataset(&a.data)?;
    let (model, history) = carl::train_carl(&ds, &sampler, &carl_cfg, rc.model.steps, rc.seed)?;
    prepare_out(&a.out, &rc)?;
    carl::save_carl(&model, &a.out.join("checkpoints").join("repr"))?;
    let mut metrics = String::from("step,loss\n");
    for (step, loss) in &history {
        writeln!(metrics, "{step},{loss}").expect("infallible");
    }
    fs::write(a.out.join("metrics.csv"), metrics)
        .with_context(|| format!("writing {}", a.out.join("metrics.csv").display()))?;
    let final_loss = history.last().map(|&(_, l)| l);
    write_json(
        &a.out.join("report.json"),
        &serde_json::json!({
            "variant": carl_cfg.variant.name(),
            "steps": rc.model.steps,
            "final_loss": final_loss,
        }),
    )?;
    match final_loss {
        Some(l) => println!("trained {} for {} steps, final loss {l:.6}", carl_cfg.variant.name(), rc.model.steps),
        None => println!("initialized {} (0 steps)", carl_cfg.variant.name()),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train-hrl

#[derive(Args)]
struct TrainHrlArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset file written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Hierarchy: hiql | hgcbc.
    #[arg(long)]
    algo: Option<String>,
    /// Encoder mode: none | pretrain | cotrain.
    #[arg(long)]
    mode: Option<String>,
    /// Auxiliary-loss mixing weight in [0, 1] (cotrain).
    #[arg(long, allow_negative_numbers = true)]
    lambda_aux: Option<f64>,
    /// Value expectile in (0, 1).
    #[arg(long)]
    kappa: Option<f64>,
    /// AWR temperature.
    #[arg(long)]
    beta: Option<f64>,
    /// Discount factor.
    #[arg(long)]
    gamma: Option<f64>,
    /// Subgoal step / encoder window length.
    #[arg(long, allow_negative_numbers = true)]
    k: Option<i64>,
    /// Agent batch size.
    #[arg(long, allow_negative_numbers = true)]
    batch: Option<i64>,
    /// Training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Agent learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Let value/policy gradients reach the encoder (cotrain).
    #[arg(long)]
    flow_through: bool,
    /// Frozen encoder checkpoint directory (pretrain mode).
    #[arg(long)]
    pretrain: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_train_hrl(a: TrainHrlArgs) -> Result<()> {
    let mut rc = a.common.resolve()?;
    if let Some(v) = &a.algo {
        rc.hrl.algo = v.clone();
    }
    if let Some(v) = &a.mode {
        rc.hrl.mode = v.clone();
    }
    if let Some(v) = a.lambda_aux {
        rc.hrl.lambda_aux = v;
    }
    if let Some(v) = a.kappa {
        rc.hrl.kappa = v;
    }
    if let Some(v) = a.beta {
        rc.hrl.beta = v;
    }
    if let Some(v) = a.gamma {
        rc.hrl.gamma = v;
    }
    if let Some(v) = a.k {
        rc.model.k = v;
    }
    if let Some(v) = a.batch {
        rc.hrl.batch = v;
    }
    if let Some(v) = a.steps {
        rc.hrl.steps = v;
    }
    if let Some(v) = a.lr {
        rc.hrl.lr = v;
    }
    if a.flow_through {
        rc.hrl.flow_through = true;
    }
    if a.pretrain.is_some() {
        rc.hrl.pretrain = a.pretrain.clone();
    }
    let cfg = to_cotrain_config(&rc)?;
    let ds = data::load_dataset(&a.data)?;
    let (agent, records) = hrl::train_agent(&ds, &cfg, rc.hrl.steps, rc.seed)?;
    prepare_out(&a.out, &rc)?;
    hrl::save_agent(&agent, &cfg, &a.out.join("checkpoints").join("agent"))?;
    let mut metrics = String::from("step,total,value,high,low,aux\n");
    for r in &records {
        writeln!(metrics, "{},{},{},{},{},{}", r.step, r.total, r.value, r.high, r.low, r.aux)
            .expect("infallible");
    }
    fs::write(a.out.join("metrics.csv"), metrics)
        .with_context(|| format!("writing {}", a.out.join("metrics.csv").display()))?;
    write_json(
        &a.out.join("report.json"),
        &serde_json::json!({
            "algorithm": cfg.algorithm.name(),
            "mode": cfg.mode.name(),
            "steps": rc.hrl.steps,
            "final_total_loss": records.last().map(|r| r.total),
        }),
    )?;
    println!(
        "trained {}-{} for {} steps; agent at {}",
        cfg.algorithm.name(),
        cfg.mode.name(),
        rc.hrl.steps,
        a.out.join("checkpoints").join("agent").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Agent checkpoint directory written by train-hrl.
    #[arg(long)]
    agent: PathBuf,
    /// Rooms to evaluate (comma-separated); defaults to all rooms.
    #[arg(long, value_delimiter = ',')]
    rooms: Option<Vec<usize>>,
    /// Episodes per room.
    #[arg(long)]
    episodes: Option<usize>,
    /// Steps per episode.
    #[arg(long)]
    horizon: Option<usize>,
    /// Write the report as JSON to this file.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Also write the full run layout to this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut rc = a.common.resolve()?;
    if a.rooms.is_some() {
        rc.eval.rooms = a.rooms.clone();
    }
    if let Some(v) = a.episodes {
        rc.eval.episodes = v;
    }
    if let Some(v) = a.horizon {
        rc.eval.horizon = v;
    }
    let (agent, _) = hrl::load_agent(&a.agent)?;
    let env = Env::from_spec(&rc.env)?;
    let rooms = match &rc.eval.rooms {
        Some(rooms) => rooms.clone(),
        None => (0..env.rooms()?.num_rooms()).collect(),
    };
    let report = eval::evaluate(&agent, &env, &rooms, rc.eval.episodes, rc.eval.horizon, rc.seed)?;
    for room in &report.per_room {
        println!(
            "room {}: success {:.3} ± {:.3} ({} episodes)",
            room.room, room.success_rate, room.ci_half_width, room.episodes
        );
    }
    println!(
        "rooms solved: {}/{}; mean success {:.3}",
        report.rooms_solved,
        report.per_room.len(),
        report.mean_success()
    );
    if let Some(path) = &a.json {
        write_json(path, &report)?;
    }
    if let Some(out) = &a.out {
        prepare_out(out, &rc)?;
        write_json(&out.join("report.json"), &report)?;
        let mut metrics = String::from("room,success_rate,ci_half_width,episodes\n");
        for room in &report.per_room {
            writeln!(metrics, "{},{},{},{}", room.room, room.success_rate, room.ci_half_width, room.episodes)
                .expect("infallible");
        }
        fs::write(out.join("metrics.csv"), metrics)
            .with_context(|| format!("writing {}", out.join("metrics.csv").display()))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// embed / nn-query

/// Reads `label,s…,g…` rows; a `label,…` header row is skipped. Extra
/// columns (say, a previously exported embedding) are ignored.
fn read_pairs_csv(path: &Path, state_dim: usize) -> Result<(Matrix, Vec<String>)> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let want = 2 * state_dim;
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if lineno == 0 && fields.first() == Some(&"label") {
            continue;
        }
        if fields.len() < 1 + want {
            bail!(
                "{}: line {} has {} fields, need at least {} (label + 2×{} coordinates)",
                path.display(),
                lineno + 1,
                fields.len(),
                1 + want,
                state_dim
            );
        }
        labels.push(fields[0].to_string());
        for f in &fields[1..=want] {
            let v: f32 = f.trim().parse().with_context(|| {
                format!("{}: line {}: bad number {f:?}", path.display(), lineno + 1)
            })?;
            values.push(v);
        }
    }
    if labels.is_empty() {
        bail!("{}: no data rows", path.display());
    }
    let pairs = Matrix::from_vec(labels.len(), want, values)?;
    Ok((pairs, labels))
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    common: Common,
    /// Encoder checkpoint directory written by train-repr.
    #[arg(long)]
    model: PathBuf,
    /// CSV of pairs to embed: label,s…,g… with a header row.
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Instead of --pairs: synthesize this many direction-labeled pairs per
    /// cardinal direction from --env.
    #[arg(long)]
    direction_pairs: Option<usize>,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_embed(a: EmbedArgs) -> Result<()> {
    let rc = a.common.resolve()?;
    let model = carl::load_carl(&a.model)?;
    let (pairs, labels) = match (&a.pairs, a.direction_pairs) {
        (Some(path), None) => read_pairs_csv(path, model.state_dim)?,
        (None, Some(per_class)) => {
            let env = Env::from_spec(&rc.env)?;
            let (pairs, label_ids) = eval::direction_pairs(&env, per_class, rc.seed)?;
            let names = eval::direction_class_names();
            let labels = label_ids.iter().map(|&l| names[l].to_string()).collect();
            (pairs, labels)
        }
        _ => bail!("pass exactly one of --pairs and --direction-pairs"),
    };
    eval::export_embeddings(&model, &pairs, &labels, &a.out)?;
    println!("wrote {} embeddings to {}", pairs.rows(), a.out.display());
    Ok(())
}

#[derive(Args)]
struct NnQueryArgs {
    #[command(flatten)]
    common: Common,
    /// Encoder checkpoint directory written by train-repr.
    #[arg(long)]
    model: PathBuf,
    /// CSV of candidate pairs: label,s…,g… with a header row.
    #[arg(long)]
    candidates: PathBuf,
    /// Reference state coordinates, comma-separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    state: Vec<f32>,
    /// Reference goal coordinates, comma-separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    goal: Vec<f32>,
    /// How many neighbors to print.
    #[arg(long, default_value_t = 30)]
    top: usize,
    /// Thin candidates to the best of each consecutive bin first.
    #[arg(long)]
    bin: Option<usize>,
    /// Write the ranked list as JSON to this file.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn cmd_nn_query(a: NnQueryArgs) -> Result<()> {
    let _ = a.common.resolve()?;
    let model = carl::load_carl(&a.model)?;
    if a.state.len() != model.state_dim || a.goal.len() != model.state_dim {
        bail!(carl_lab::Error::config(format!(
            "state/goal must have {} coordinates each, got {}/{}",
            model.state_dim,
            a.state.len(),
            a.goal.len()
        )));
    }
    let (candidates, labels) = read_pairs_csv(&a.candidates, model.state_dim)?;
    let hits = eval::nearest_neighbors(&model, &a.state, &a.goal, &candidates, a.top, a.bin)?;
    println!("rank  index  similarity  label");
    for (rank, hit) in hits.iter().enumerate() {
        println!("{:<4}  {:<5}  {:<10.6}  {}", rank + 1, hit.index, hit.similarity, labels[hit.index]);
    }
    if let Some(path) = &a.json {
        write_json(path, &hits)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Axis to vary: k | coverage | imbalance | lambda_aux | variant.
    #[arg(long)]
    axis: Option<String>,
    /// Axis values, comma-separated (e.g. `1,2,3,5` or `0,0.25,0.5,0.75`).
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<String>>,
    /// Seeds to run per value, comma-separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Episodes generated per seed.
    #[arg(long)]
    data_episodes: Option<usize>,
    /// Steps per generated episode.
    #[arg(long)]
    data_horizon: Option<usize>,
    /// Expert action noise during generation.
    #[arg(long)]
    noise: Option<f64>,
    /// Direction removed by the imbalance axis (action index).
    #[arg(long)]
    imbalance_direction: Option<usize>,
    /// Rooms whose trajectories the agent may train on.
    #[arg(long, value_delimiter = ',')]
    train_rooms: Option<Vec<usize>>,
    /// Held-out rooms for zero-shot evaluation.
    #[arg(long, value_delimiter = ',')]
    test_rooms: Option<Vec<usize>>,
    /// Encoder pretraining steps per cell.
    #[arg(long)]
    repr_steps: Option<usize>,
    /// Encoder pretraining batch size.
    #[arg(long)]
    repr_batch: Option<usize>,
    /// Agent training steps per cell.
    #[arg(long)]
    hrl_steps: Option<usize>,
    /// Evaluation episodes per room.
    #[arg(long)]
    eval_episodes: Option<usize>,
    /// Evaluation rollout horizon.
    #[arg(long)]
    eval_horizon: Option<usize>,
    /// Hierarchy: hiql | hgcbc.
    #[arg(long)]
    algo: Option<String>,
    /// Encoder mode of the main method: none | pretrain | cotrain.
    #[arg(long)]
    mode: Option<String>,
    /// Encoder variant of the main method.
    #[arg(long)]
    variant: Option<String>,
    /// Window length of the main method.
    #[arg(long, allow_negative_numbers = true)]
    k: Option<i64>,
    /// Rerun every cell with the encoder-free baseline too.
    #[arg(long)]
    compare_baseline: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut rc = a.common.resolve()?;
    if let Some(v) = &a.axis {
        rc.sweep.axis = v.clone();
    }
    if let Some(v) = &a.values {
        rc.sweep.values = v.clone();
    }
    if let Some(v) = &a.seeds {
        rc.sweep.seeds = v.clone();
    }
    if let Some(v) = a.data_episodes {
        rc.data.episodes = v;
    }
    if let Some(v) = a.data_horizon {
        rc.data.horizon = v;
    }
    if let Some(v) = a.noise {
        rc.data.noise = v;
    }
    if let Some(v) = a.imbalance_direction {
        rc.sweep.imbalance_direction = v;
    }
    if let Some(v) = &a.train_rooms {
        rc.sweep.train_rooms = v.clone();
    }
    if let Some(v) = &a.test_rooms {
        rc.sweep.test_rooms = v.clone();
    }
    if let Some(v) = a.repr_steps {
        rc.sweep.repr_steps = v;
    }
    if let Some(v) = a.repr_batch {
        rc.sweep.repr_batch = v;
    }
    if let Some(v) = a.hrl_steps {
        rc.sweep.hrl_steps = v;
    }
    if let Some(v) = a.eval_episodes {
        rc.eval.episodes = v;
    }
    if let Some(v) = a.eval_horizon {
        rc.eval.horizon = v;
    }
    if let Some(v) = &a.algo {
        rc.hrl.algo = v.clone();
    }
    if let Some(v) = &a.mode {
        rc.hrl.mode = v.clone();
    }
    if let Some(v) = &a.variant {
        rc.model.variant = v.clone();
    }
    if let Some(v) = a.k {
        rc.model.k = v;
    }
    if a.compare_baseline {
        rc.sweep.compare_baseline = true;
    }
    let cfg = to_cotrain_config(&rc)?;
    let spec = to_sweep_spec(&rc)?;
    let env = Env::from_spec(&rc.env)?;
    let table = eval::sweep(&cfg, &spec, &env)?;
    prepare_out(&a.out, &rc)?;
    fs::write(a.out.join("metrics.csv"), table.to_csv())
        .with_context(|| format!("writing {}", a.out.join("metrics.csv").display()))?;
    write_json(&a.out.join("report.json"), &table)?;
    print!("{}", table.to_text());
    Ok(())
}

// ---------------------------------------------------------------------------
// kball / bisim / env

#[derive(Args)]
struct KballArgs {
    /// Tabular MDP as JSON.
    #[arg(long)]
    mdp: PathBuf,
    /// Root state id.
    #[arg(long)]
    root: usize,
    /// Ball radius in steps (0 = just the root).
    #[arg(long)]
    k: usize,
}

fn cmd_kball(a: KballArgs) -> Result<()> {
    let m: TabularMdp = read_json(&a.mdp)?;
    let ball = mdp::compute_k_ball(&m, a.root, a.k)?;
    let ids: Vec<String> = ball.iter().map(|s| s.to_string()).collect();
    println!("{{{}}}", ids.join(", "));
    Ok(())
}

#[derive(Args)]
struct BisimArgs {
    /// First tabular MDP as JSON.
    #[arg(long)]
    m1: PathBuf,
    /// Second tabular MDP as JSON.
    #[arg(long)]
    m2: PathBuf,
}

fn cmd_bisim(a: BisimArgs) -> Result<()> {
    let m1: TabularMdp = read_json(&a.m1)?;
    let m2: TabularMdp = read_json(&a.m2)?;
    let witness = mdp::check_dynamics_bisimilar(&m1, &m2)?;
    println!("bisimilar: {}", witness.is_some());
    Ok(())
}

#[derive(Args)]
struct EnvArgs {
    #[command(flatten)]
    common: Common,
    /// Write the environment's tabular MDP as JSON to this file.
    #[arg(long)]
    tabular: Option<PathBuf>,
}

fn cmd_env(a: EnvArgs) -> Result<()> {
    let rc = a.common.resolve()?;
    let env = Env::from_spec(&rc.env)?;
    print!("{}", env.render()?);
    if let Ok(genv) = env.rooms() {
        println!("{} rooms, {} navigable cells", genv.num_rooms(), genv.cells().len());
    }
    if let Some(path) = &a.tabular {
        write_json(path, &env.to_tabular()?)?;
        println!("wrote tabular MDP to {}", path.display());
    }
    Ok(())
}
