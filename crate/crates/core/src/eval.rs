//! Experiment harness: success-rate evaluation over rooms, zero-shot
//! room-generalization counting, nearest-neighbor retrieval, direction
//! cluster-separation metrics, embedding export, and sweep drivers.
//!
//! Everything here is deterministic given a seed. Episode seeds derive from
//! `(seed, room, episode)` so reports are independent of thread count, and
//! sweep tables aggregate per-seed cells in a stable order.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::carl::{self, CarlModel};
use crate::data::{self, Dataset, GoalMode, SamplerConfig};
use crate::env::{Action, Cell, Env, EpisodeConfig, GridRoomsEnv};
use crate::error::{Error, Result};
use crate::hrl::{self, CoTrainConfig, EncoderMode, HrlAgent};
use crate::nn::Matrix;
use crate::util::{derive_seed, parallel_map, rng_from, Rng};

/// A room counts as solved when at least this fraction of its evaluation
/// episodes reach the goal.
pub const SOLVE_THRESHOLD: f64 = 0.9;

/// 95% two-sided normal quantile, used for every confidence interval here.
const Z_95: f64 = 1.96;

/// Normal-approximation half-width for a success rate out of `n` episodes.
pub fn binomial_ci_half_width(p: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    Z_95 * (p * (1.0 - p) / n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomEval {
    pub room: usize,
    pub success_rate: f64,
    /// 95% half-width over this room's episodes.
    pub ci_half_width: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_room: Vec<RoomEval>,
    /// Rooms at or above [`SOLVE_THRESHOLD`].
    pub rooms_solved: usize,
    pub episodes_per_room: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Total environment steps consumed — a deterministic runtime proxy.
    pub env_steps: u64,
}

impl EvalReport {
    /// Mean success rate across evaluated rooms.
    pub fn mean_success(&self) -> f64 {
        if self.per_room.is_empty() {
            return 0.0;
        }
        self.per_room.iter().map(|r| r.success_rate).sum::<f64>() / self.per_room.len() as f64
    }
}

/// Identity helper that pins a closure to the policy calling convention
/// expected by [`evaluate_policy`]; useful because bare closures with
/// reference arguments often fail higher-ranked inference.
pub fn as_policy<F>(f: F) -> F
where
    F: Fn(&[f32], &[f32], &mut Rng) -> Result<Action> + Sync,
{
    f
}

/// Rolls out `episodes` goal-reaching attempts per room. Start and goal are
/// distinct cells drawn uniformly from the room; success means standing on
/// the goal within `horizon` steps (checked before each action, and once
/// more after the final step). The policy sees feature vectors and may use
/// the per-episode generator for its own randomness.
pub fn evaluate_policy<P>(
    env: &Env,
    rooms: &[usize],
    episodes: usize,
    horizon: usize,
    seed: u64,
    policy: &P,
) -> Result<EvalReport>
where
    P: Fn(&[f32], &[f32], &mut Rng) -> Result<Action> + Sync,
{
    let genv = env.rooms()?;
    if rooms.is_empty() {
        return Err(Error::invalid("at least one room to evaluate"));
    }
    if episodes == 0 || horizon == 0 {
        return Err(Error::invalid("episodes and horizon must be at least 1"));
    }
    if let Some(&bad) = rooms.iter().find(|&&r| r >= genv.num_rooms()) {
        return Err(Error::invalid(format!(
            "room {bad} out of range (environment has {})",
            genv.num_rooms()
        )));
    }
    let mut per_room = Vec::with_capacity(rooms.len());
    let mut env_steps = 0u64;
    for &room in rooms {
        let cells: Vec<Cell> = genv.cells_in_room(room).collect();
        if cells.len() < 2 {
            return Err(Error::invalid(format!("room {room} is too small to pose goals")));
        }
        let room_seed = derive_seed(seed, room as u64);
        let outcomes = parallel_map(episodes, |ep| {
            run_episode(genv, &cells, horizon, derive_seed(room_seed, ep as u64), policy)
        });
        let mut successes = 0usize;
        for outcome in outcomes {
            let (hit, steps) = outcome?;
            successes += hit as usize;
            env_steps += steps;
        }
        let p = successes as f64 / episodes as f64;
        per_room.push(RoomEval {
            room,
            success_rate: p,
            ci_half_width: binomial_ci_half_width(p, episodes),
            episodes,
        });
    }
    let rooms_solved = per_room.iter().filter(|r| r.success_rate >= SOLVE_THRESHOLD).count();
    Ok(EvalReport { per_room, rooms_solved, episodes_per_room: episodes, horizon, seed, env_steps })
}

fn run_episode<P>(
    genv: &GridRoomsEnv,
    cells: &[Cell],
    horizon: usize,
    ep_seed: u64,
    policy: &P,
) -> Result<(bool, u64)>
where
    P: Fn(&[f32], &[f32], &mut Rng) -> Result<Action> + Sync,
{
    let mut rng = rng_from(ep_seed);
    let start = cells[rng.gen_range(0..cells.len())];
    let goal = loop {
        let g = cells[rng.gen_range(0..cells.len())];
        if g != start {
            break g;
        }
    };
    let gf = genv.features(goal);
    let mut s = start;
    let mut steps = 0u64;
    for _ in 0..horizon {
        if s == goal {
            return Ok((true, steps));
        }
        let a = policy(&genv.features(s), &gf, &mut rng)?;
        s = genv.step_cell(s, a);
        steps += 1;
    }
    Ok((s == goal, steps))
}

/// [`evaluate_policy`] for a trained agent, re-queried every step.
pub fn evaluate(
    agent: &HrlAgent,
    env: &Env,
    rooms: &[usize],
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<EvalReport> {
    let policy = as_policy(|s: &[f32], g: &[f32], _: &mut Rng| hrl::act(agent, s, g));
    evaluate_policy(env, rooms, episodes, horizon, seed, &policy)
}

/// Shape of one zero-shot transfer experiment: which rooms supply policy
/// data, which are held out, and how long each stage runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSpec {
    pub train_rooms: Vec<usize>,
    pub test_rooms: Vec<usize>,
    /// Encoder pretraining steps (pretrain mode only).
    pub repr_steps: usize,
    /// Encoder pretraining batch size.
    pub repr_batch: usize,
    /// Where the contrastive goal sits in the k-window during pretraining.
    pub goal_mode: GoalMode,
    /// Agent training steps.
    pub hrl_steps: usize,
    pub eval_episodes: usize,
    /// Evaluation rollout horizon.
    pub horizon: usize,
}

impl Default for TransferSpec {
    fn default() -> Self {
        TransferSpec {
            train_rooms: vec![0],
            test_rooms: vec![1, 2, 3, 4],
            repr_steps: 2000,
            repr_batch: 256,
            goal_mode: GoalMode::Interior,
            hrl_steps: 4000,
            eval_episodes: 20,
            horizon: 200,
        }
    }
}

impl TransferSpec {
    pub fn validate(&self, genv: &GridRoomsEnv) -> Result<()> {
        if self.train_rooms.is_empty() || self.test_rooms.is_empty() {
            return Err(Error::invalid("train and test room lists must be nonempty"));
        }
        for &r in self.train_rooms.iter().chain(&self.test_rooms) {
            if r >= genv.num_rooms() {
                return Err(Error::invalid(format!(
                    "room {r} out of range (environment has {})",
                    genv.num_rooms()
                )));
            }
        }
        if let Some(&shared) =
            self.train_rooms.iter().find(|r| self.test_rooms.contains(r))
        {
            return Err(Error::invalid(format!(
                "room {shared} appears in both train and test splits"
            )));
        }
        if self.eval_episodes == 0 || self.horizon == 0 {
            return Err(Error::invalid("eval_episodes and horizon must be at least 1"));
        }
        if self.repr_batch == 0 {
            return Err(Error::invalid("repr_batch must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationOutcome {
    pub train: EvalReport,
    pub test: EvalReport,
}

/// Zero-shot room transfer: the agent's policy data is restricted to
/// trajectories starting in `spec.train_rooms`, then success is measured on
/// both splits. In pretrain mode the encoder is first trained on the *full*
/// dataset (all rooms) and frozen; in cotrain mode it learns from the same
/// restricted data as the agent; in none mode there is no encoder.
pub fn room_generalization(
    cfg: &CoTrainConfig,
    spec: &TransferSpec,
    ds: &Dataset,
    env: &Env,
    seed: u64,
) -> Result<(HrlAgent, GeneralizationOutcome)> {
    let genv = env.rooms()?;
    spec.validate(genv)?;
    let ds_policy = data::filter_by_start_room(ds, genv, &spec.train_rooms)?;
    let agent = match cfg.mode {
        EncoderMode::Pretrain => {
            let sampler = SamplerConfig {
                k: cfg.carl.k,
                stride: cfg.carl.stride,
                goal_mode: spec.goal_mode,
                batch_size: spec.repr_batch,
                seed: derive_seed(seed, 3),
            };
            let (encoder, _) =
                carl::train_carl(ds, &sampler, &cfg.carl, spec.repr_steps, derive_seed(seed, 4))?;
            hrl::train_agent_with_frozen_encoder(&ds_policy, cfg, spec.hrl_steps, seed, encoder)?.0
        }
        _ => hrl::train_agent(&ds_policy, cfg, spec.hrl_steps, seed)?.0,
    };
    let train =
        evaluate(&agent, env, &spec.train_rooms, spec.eval_episodes, spec.horizon, derive_seed(seed, 5))?;
    let test =
        evaluate(&agent, env, &spec.test_rooms, spec.eval_episodes, spec.horizon, derive_seed(seed, 6))?;
    Ok((agent, GeneralizationOutcome { train, test }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub similarity: f64,
}

/// Ranks candidate (state, goal) rows by cosine similarity of their φ
/// embeddings to the reference pair, nonincreasing, ties broken by the lower
/// candidate index. With `bin_size = Some(m)` the list is first thinned to
/// the best entry of each consecutive bin of `m` candidates (the long-corpus
/// retrieval recipe: bins of 500, best per bin, then a global top-30).
pub fn nearest_neighbors(
    model: &CarlModel,
    s: &[f32],
    g: &[f32],
    candidates: &Matrix,
    top_n: usize,
    bin_size: Option<usize>,
) -> Result<Vec<Neighbor>> {
    if candidates.rows() == 0 {
        return Err(Error::invalid("candidate set is empty"));
    }
    if top_n == 0 {
        return Err(Error::invalid("top_n must be at least 1"));
    }
    if bin_size == Some(0) {
        return Err(Error::invalid("bin_size must be at least 1"));
    }
    let reference = model.embed_state_goal(s, g)?;
    let emb = model.embed_pairs(candidates)?;
    let similarity = |i: usize| -> f64 {
        emb.row(i)
            .iter()
            .zip(&reference)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    };
    let all: Vec<Neighbor> =
        (0..emb.rows()).map(|i| Neighbor { index: i, similarity: similarity(i) }).collect();
    let mut pool: Vec<Neighbor> = match bin_size {
        Some(m) => all
            .chunks(m)
            .map(|bin| {
                *bin.iter()
                    .reduce(|best, n| if n.similarity > best.similarity { n } else { best })
                    .expect("chunks are nonempty")
            })
            .collect(),
        None => all,
    };
    pool.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .expect("cosine similarities are finite")
            .then(a.index.cmp(&b.index))
    });
    pool.truncate(top_n);
    Ok(pool)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub classes: Vec<String>,
    /// Mean within-class cosine similarity, aligned with `classes`.
    pub within: Vec<f64>,
    /// Mean cosine similarity across unordered pairs from different classes.
    pub between: f64,
    /// mean(within) − between.
    pub margin: f64,
}

/// Within/between cosine geometry of labeled embeddings. Requires at least
/// two classes and ten members per class so every mean is over a real pair
/// population. Rows are renormalized, so any consistent scaling is ignored.
pub fn cluster_separation_from_embeddings(
    emb: &Matrix,
    labels: &[usize],
    classes: &[&str],
) -> Result<ClusterReport> {
    if classes.len() < 2 {
        return Err(Error::invalid("cluster separation needs at least two classes"));
    }
    if labels.len() != emb.rows() {
        return Err(Error::invalid("one label per embedding row"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes.len()) {
        return Err(Error::invalid(format!("label {bad} out of range for {} classes", classes.len())));
    }
    let mut counts = vec![0usize; classes.len()];
    for &l in labels {
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n < 10) {
        return Err(Error::invalid(format!(
            "class `{}` has {} members; need at least 10",
            classes[c], counts[c]
        )));
    }
    let d = emb.cols();
    let mut unit = vec![0.0f64; emb.rows() * d];
    for i in 0..emb.rows() {
        let row = emb.row(i);
        let norm = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::numeric(format!("embedding row {i} has zero norm")));
        }
        for (j, &x) in row.iter().enumerate() {
            unit[i * d + j] = x as f64 / norm;
        }
    }
    let dot = |i: usize, j: usize| -> f64 {
        unit[i * d..(i + 1) * d]
            .iter()
            .zip(&unit[j * d..(j + 1) * d])
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut within_sum = vec![0.0f64; classes.len()];
    let mut within_n = vec![0u64; classes.len()];
    let mut between_sum = 0.0f64;
    let mut between_n = 0u64;
    for i in 0..emb.rows() {
        for j in (i + 1)..emb.rows() {
            let s = dot(i, j);
            if labels[i] == labels[j] {
                within_sum[labels[i]] += s;
                within_n[labels[i]] += 1;
            } else {
                between_sum += s;
                between_n += 1;
            }
        }
    }
    let within: Vec<f64> =
        within_sum.iter().zip(&within_n).map(|(&s, &n)| s / n as f64).collect();
    let between = between_sum / between_n as f64;
    let margin = within.iter().sum::<f64>() / within.len() as f64 - between;
    Ok(ClusterReport {
        classes: classes.iter().map(|s| s.to_string()).collect(),
        within,
        between,
        margin,
    })
}

/// Class names for direction-labeled pairs, in [`Action::ALL`] order.
pub fn direction_class_names() -> Vec<&'static str> {
    Action::ALL.iter().map(|a| a.name()).collect()
}

/// Samples (state, goal) pairs where the goal is the state displaced one or
/// two cells in a cardinal direction (two-cell displacements must pass
/// through a navigable midpoint). Returns concatenated feature rows and the
/// action-index label of each row, `per_class` rows per direction.
pub fn direction_pairs(env: &Env, per_class: usize, seed: u64) -> Result<(Matrix, Vec<usize>)> {
    let genv = env.rooms()?;
    if per_class < 10 {
        return Err(Error::invalid("need at least 10 pairs per direction class"));
    }
    let cells = genv.cells();
    let mut pairs = Matrix::zeros(Action::COUNT * per_class, 4);
    let mut labels = Vec::with_capacity(Action::COUNT * per_class);
    let mut rng = rng_from(seed);
    let mut row = 0usize;
    for (class, action) in Action::ALL.iter().enumerate() {
        let (dx, dy) = action.delta();
        let mut found = 0usize;
        let mut attempts = 0usize;
        while found < per_class {
            attempts += 1;
            if attempts > 1000 * per_class {
                return Err(Error::invalid(format!(
                    "could not find {per_class} `{}` pairs; environment too cramped",
                    action.name()
                )));
            }
            let c = cells[rng.gen_range(0..cells.len())];
            let dist: isize = if rng.gen_bool(0.5) { 1 } else { 2 };
            if dist == 2 && genv.offset(c, dx, dy).is_none() {
                continue;
            }
            let Some(goal) = genv.offset(c, dx * dist, dy * dist) else {
                continue;
            };
            pairs.row_mut(row)[..2].copy_from_slice(&genv.features(c));
            pairs.row_mut(row)[2..].copy_from_slice(&genv.features(goal));
            labels.push(class);
            row += 1;
            found += 1;
        }
    }
    Ok((pairs, labels))
}

/// Embeds direction-labeled pairs and measures how tightly the four
/// cardinal-direction classes cluster under the encoder.
pub fn direction_cluster_separation(
    model: &CarlModel,
    env: &Env,
    per_class: usize,
    seed: u64,
) -> Result<ClusterReport> {
    let (pairs, labels) = direction_pairs(env, per_class, seed)?;
    let emb = model.embed_pairs(&pairs)?;
    cluster_separation_from_embeddings(&emb, &labels, &direction_class_names())
}

/// Writes `label,s0..,g0..,e0..` CSV rows, one per pair, after a header.
/// Values print through `f32`'s shortest round-trip formatting, so parsing
/// them back reproduces the embeddings bit-exactly.
pub fn export_embeddings(
    model: &CarlModel,
    pairs: &Matrix,
    labels: &[String],
    path: &Path,
) -> Result<()> {
    let sd = model.state_dim;
    if pairs.cols() != 2 * sd {
        return Err(Error::contract(format!(
            "pair rows must have 2·state_dim = {} columns, got {}",
            2 * sd,
            pairs.cols()
        )));
    }
    if labels.len() != pairs.rows() {
        return Err(Error::contract("one label per pair row"));
    }
    if let Some(bad) = labels.iter().find(|l| l.contains(',') || l.contains('\n')) {
        return Err(Error::invalid(format!("label {bad:?} would corrupt the CSV")));
    }
    let mut out = String::from("label");
    for i in 0..sd {
        write!(out, ",s{i}").expect("string writes are infallible");
    }
    for i in 0..sd {
        write!(out, ",g{i}").expect("string writes are infallible");
    }
    for i in 0..model.d {
        write!(out, ",e{i}").expect("string writes are infallible");
    }
    out.push('\n');
    if pairs.rows() > 0 {
        let emb = model.embed_pairs(pairs)?;
        for i in 0..pairs.rows() {
            out.push_str(&labels[i]);
            for &v in pairs.row(i) {
                write!(out, ",{v}").expect("string writes are infallible");
            }
            for &v in emb.row(i) {
                write!(out, ",{v}").expect("string writes are infallible");
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Window length `k` (also the subgoal step).
    K,
    /// Fraction of transitions kept outside each room's home patch.
    Coverage,
    /// Fraction of one direction's transitions removed everywhere.
    Imbalance,
    /// Auxiliary-loss mixing weight (cotrain mode).
    LambdaAux,
    /// Encoder ablation variant.
    Variant,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::Coverage => "coverage",
            SweepAxis::Imbalance => "imbalance",
            SweepAxis::LambdaAux => "lambda_aux",
            SweepAxis::Variant => "variant",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<SweepAxis> {
        match s {
            "k" => Ok(SweepAxis::K),
            "coverage" => Ok(SweepAxis::Coverage),
            "imbalance" => Ok(SweepAxis::Imbalance),
            "lambda_aux" => Ok(SweepAxis::LambdaAux),
            "variant" => Ok(SweepAxis::Variant),
            _ => Err(Error::invalid(format!(
                "unknown sweep axis `{s}` (expected k, coverage, imbalance, lambda_aux, variant)"
            ))),
        }
    }
}

/// Side length of the square "home patch" in each room's corner that the
/// coverage axis never deletes. Coverage 0 leaves data only in these
/// patches; rooms must be wider than the patch for the axis to bite.
const HOME_PATCH: usize = 3;

/// One sweep: regenerate data per seed, apply the axis to the config or the
/// dataset, run the transfer experiment, and tabulate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    /// Episodes generated per seed (over all rooms).
    pub data_episodes: usize,
    pub data_horizon: usize,
    /// Expert action noise during data generation.
    pub data_noise: f64,
    /// Direction whose transitions the imbalance axis removes.
    pub imbalance_direction: usize,
    pub transfer: TransferSpec,
    /// Also run the encoder-free baseline on every cell.
    pub compare_baseline: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            axis: SweepAxis::K,
            values: vec!["3".into()],
            seeds: vec![1],
            data_episodes: 300,
            data_horizon: 150,
            data_noise: 0.1,
            imbalance_direction: 0,
            transfer: TransferSpec::default(),
            compare_baseline: false,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("sweep needs at least one value and one seed"));
        }
        if self.data_episodes == 0 || self.data_horizon < 2 {
            return Err(Error::invalid("data_episodes ≥ 1 and data_horizon ≥ 2 required"));
        }
        if !(0.0..=1.0).contains(&self.data_noise) {
            return Err(Error::invalid(format!("data_noise must lie in [0, 1], got {}", self.data_noise)));
        }
        if self.axis == SweepAxis::Imbalance && self.imbalance_direction >= Action::COUNT {
            return Err(Error::invalid(format!(
                "imbalance_direction {} out of range (have {} actions)",
                self.imbalance_direction,
                Action::COUNT
            )));
        }
        for v in &self.values {
            parse_axis_value(self.axis, v)?;
        }
        Ok(())
    }
}

/// Parsed form of one axis value, kept separate so validation can run before
/// any training starts.
enum AxisValue {
    K(usize),
    Fraction(f64),
    Variant(carl::AblationVariant),
}

fn parse_axis_value(axis: SweepAxis, value: &str) -> Result<AxisValue> {
    match axis {
        SweepAxis::K => {
            let k: usize = value
                .parse()
                .map_err(|_| Error::invalid(format!("axis k value `{value}` is not an integer")))?;
            if k == 0 {
                return Err(Error::invalid("axis k values must be at least 1"));
            }
            Ok(AxisValue::K(k))
        }
        SweepAxis::Coverage | SweepAxis::Imbalance | SweepAxis::LambdaAux => {
            let f: f64 = value
                .parse()
                .map_err(|_| Error::invalid(format!("axis value `{value}` is not a number")))?;
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid(format!("axis value {f} must lie in [0, 1]")));
            }
            Ok(AxisValue::Fraction(f))
        }
        SweepAxis::Variant => Ok(AxisValue::Variant(value.parse()?)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: String,
    pub value: String,
    pub seed: u64,
    pub train_success: f64,
    pub test_success: f64,
    pub test_rooms_solved: usize,
}

/// Per-(method, value) aggregate over seeds; the CI is
/// 1.96·s/√n with the sample standard deviation, zero for a single seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub value: String,
    pub seeds: usize,
    pub train_mean: f64,
    pub train_ci: f64,
    pub test_mean: f64,
    pub test_ci: f64,
    pub rooms_solved_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub cells: Vec<SweepCell>,
    pub rows: Vec<SweepRow>,
}

fn mean_and_ci(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Z_95 * (var / n).sqrt())
}

fn aggregate_rows(cells: &[SweepCell]) -> Vec<SweepRow> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for c in cells {
        let key = (c.method.clone(), c.value.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(method, value)| {
            let group: Vec<&SweepCell> = cells
                .iter()
                .filter(|c| c.method == method && c.value == value)
                .collect();
            let train: Vec<f64> = group.iter().map(|c| c.train_success).collect();
            let test: Vec<f64> = group.iter().map(|c| c.test_success).collect();
            let rooms: Vec<f64> = group.iter().map(|c| c.test_rooms_solved as f64).collect();
            let (train_mean, train_ci) = mean_and_ci(&train);
            let (test_mean, test_ci) = mean_and_ci(&test);
            let (rooms_solved_mean, _) = mean_and_ci(&rooms);
            SweepRow {
                method,
                value,
                seeds: group.len(),
                train_mean,
                train_ci,
                test_mean,
                test_ci,
                rooms_solved_mean,
            }
        })
        .collect()
}

impl SweepTable {
    /// Aggregate rows: `axis,method,value,seeds,train_mean,train_ci,test_mean,test_ci,rooms_solved_mean`.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("axis,method,value,seeds,train_mean,train_ci,test_mean,test_ci,rooms_solved_mean\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                self.axis.name(),
                r.method,
                r.value,
                r.seeds,
                r.train_mean,
                r.train_ci,
                r.test_mean,
                r.test_ci,
                r.rooms_solved_mean
            )
            .expect("string writes are infallible");
        }
        out
    }

    /// Raw per-seed cells: `axis,method,value,seed,train_success,test_success,test_rooms_solved`.
    pub fn to_cells_csv(&self) -> String {
        let mut out =
            String::from("axis,method,value,seed,train_success,test_success,test_rooms_solved\n");
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.axis.name(),
                c.method,
                c.value,
                c.seed,
                c.train_success,
                c.test_success,
                c.test_rooms_solved
            )
            .expect("string writes are infallible");
        }
        out
    }

    /// Space-aligned table for terminal reading; means carry ± half-widths.
    pub fn to_text(&self) -> String {
        let header = ["method", "value", "seeds", "train", "test", "rooms"];
        let mut grid: Vec<[String; 6]> = vec![header.map(String::from)];
        for r in &self.rows {
            grid.push([
                r.method.clone(),
                r.value.clone(),
                r.seeds.to_string(),
                format!("{:.3} ± {:.3}", r.train_mean, r.train_ci),
                format!("{:.3} ± {:.3}", r.test_mean, r.test_ci),
                format!("{:.2}", r.rooms_solved_mean),
            ]);
        }
        let mut widths = [0usize; 6];
        for row in &grid {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = format!("axis: {}\n", self.axis.name());
        for row in &grid {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell:<w$}"))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

fn method_label(cfg: &CoTrainConfig) -> String {
    format!("{}-{}", cfg.algorithm.name(), cfg.mode.name())
}

/// States outside the room's corner home patch; the coverage axis thins
/// transitions whose source lies here.
fn outside_home_patch(genv: &GridRoomsEnv, s: &[f32]) -> bool {
    let cell = genv
        .cell_from_features(s)
        .expect("dataset states decode to navigable cells");
    let (lx, ly) = genv.room_coords(cell);
    lx >= HOME_PATCH || ly >= HOME_PATCH
}

/// Runs the whole grid of (value × seed) cells, with a fresh dataset per
/// seed so every cell of a seed shares its raw data. Coverage and imbalance
/// reshape the dataset; k, lambda_aux and variant reshape the config. With
/// `compare_baseline` every cell is rerun in encoder-free mode on the same
/// (filtered) data, giving paired degradation profiles from one command.
pub fn sweep(cfg: &CoTrainConfig, spec: &SweepSpec, env: &Env) -> Result<SweepTable> {
    spec.validate()?;
    let genv = env.rooms()?;
    spec.transfer.validate(genv)?;
    let episode_cfg = EpisodeConfig { horizon: spec.data_horizon, start_rooms: None };
    let mut cells = Vec::with_capacity(spec.values.len() * spec.seeds.len() * 2);
    for value in &spec.values {
        let parsed = parse_axis_value(spec.axis, value)?;
        for &seed in &spec.seeds {
            let ds = data::generate_dataset(
                env,
                &episode_cfg,
                spec.data_episodes,
                spec.data_noise,
                derive_seed(seed, 100),
            )?;
            let mut cell_cfg = cfg.clone();
            let cell_ds = match &parsed {
                AxisValue::K(k) => {
                    cell_cfg.carl.k = *k;
                    ds
                }
                AxisValue::Fraction(f) if spec.axis == SweepAxis::Coverage => data::filter_coverage(
                    &ds,
                    |s| outside_home_patch(genv, s),
                    *f,
                    derive_seed(seed, 300),
                )?,
                AxisValue::Fraction(f) if spec.axis == SweepAxis::Imbalance => {
                    data::filter_imbalance(
                        &ds,
                        |_| true,
                        spec.imbalance_direction,
                        *f,
                        derive_seed(seed, 301),
                    )?
                }
                AxisValue::Fraction(f) => {
                    cell_cfg.lambda_aux = *f;
                    ds
                }
                AxisValue::Variant(v) => {
                    cell_cfg.carl.variant = *v;
                    ds
                }
            };
            let (_, outcome) = room_generalization(&cell_cfg, &spec.transfer, &cell_ds, env, seed)?;
            cells.push(SweepCell {
                method: method_label(&cell_cfg),
                value: value.clone(),
                seed,
                train_success: outcome.train.mean_success(),
                test_success: outcome.test.mean_success(),
                test_rooms_solved: outcome.test.rooms_solved,
            });
            if spec.compare_baseline {
                let base_cfg = CoTrainConfig {
                    mode: EncoderMode::None,
                    flow_through: false,
                    lambda_aux: 0.0,
                    pretrain_checkpoint: None,
                    ..cell_cfg.clone()
                };
                let (_, outcome) =
                    room_generalization(&base_cfg, &spec.transfer, &cell_ds, env, seed)?;
                cells.push(SweepCell {
                    method: method_label(&base_cfg),
                    value: value.clone(),
                    seed,
                    train_success: outcome.train.mean_success(),
                    test_success: outcome.test.mean_success(),
                    test_rooms_solved: outcome.test.rooms_solved,
                });
            }
        }
    }
    let rows = aggregate_rows(&cells);
    Ok(SweepTable { axis: spec.axis, cells, rows })
}
