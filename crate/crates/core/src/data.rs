//! Offline dataset generation and access: a noisy shortest-path expert
//! wanders each environment, trajectories go to a binary file with a JSON
//! manifest sidecar, and samplers cut k-step segments out of them.
//!
//! Everything is a pure function of (environment, config, seed): episodes
//! draw from per-index derived streams, so thread count never changes the
//! bytes on disk.

use crate::env::{Action, Cell, Env, EnvDescriptor, EpisodeConfig, GridRoomsEnv, PointRoomEnv};
use crate::error::{Error, Result};
use crate::util::{derive_seed, parallel_map, rng_from, Rng};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

/// One episode: `states.len() == actions.len() + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f32>>,
    pub actions: Vec<Vec<f32>>,
}

impl Trajectory {
    /// Number of transitions (actions).
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Provenance sidecar; written next to the binary file as pretty JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub env: EnvDescriptor,
    pub episodes: usize,
    pub noise: f64,
    pub seed: u64,
    pub horizon: usize,
    pub start_rooms: Option<Vec<usize>>,
    pub state_dim: usize,
    pub action_dim: usize,
    pub num_trajectories: usize,
    /// One line per post-generation transformation (filters).
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub state_dim: usize,
    pub action_dim: usize,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn num_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Longest trajectory, measured in actions.
    pub fn max_len(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.trajectories.iter().enumerate() {
            if t.states.len() != t.actions.len() + 1 {
                return Err(Error::contract(format!(
                    "trajectory {i}: {} states vs {} actions",
                    t.states.len(),
                    t.actions.len()
                )));
            }
            if t.states.iter().any(|s| s.len() != self.state_dim)
                || t.actions.iter().any(|a| a.len() != self.action_dim)
            {
                return Err(Error::contract(format!("trajectory {i}: inconsistent dims")));
            }
        }
        if self.manifest.num_trajectories != self.trajectories.len() {
            return Err(Error::contract("manifest trajectory count out of date"));
        }
        Ok(())
    }
}

/// Shortest-path move toward `goal` with probability 1 − `noise`, uniform
/// otherwise; ties between equally good moves break uniformly at random.
pub fn expert_action(
    env: &GridRoomsEnv,
    s: Cell,
    goal: Cell,
    noise: f64,
    rng: &mut Rng,
) -> Result<Action> {
    let dist = env.distances_to(goal)?;
    Ok(expert_action_by_dist(env, s, &dist, noise, rng))
}

fn expert_action_by_dist(
    env: &GridRoomsEnv,
    s: Cell,
    dist: &[u32],
    noise: f64,
    rng: &mut Rng,
) -> Action {
    if rng.gen_bool(noise) {
        return Action::ALL[rng.gen_range(0..Action::COUNT)];
    }
    let scores: Vec<u32> = Action::ALL
        .iter()
        .map(|&a| dist[env.cell_id(env.step_cell(s, a)).expect("steps stay navigable")])
        .collect();
    let best = *scores.iter().min().expect("four actions");
    if best == u32::MAX {
        return Action::ALL[rng.gen_range(0..Action::COUNT)];
    }
    let candidates: Vec<Action> = Action::ALL
        .into_iter()
        .zip(&scores)
        .filter(|(_, &sc)| sc == best)
        .map(|(a, _)| a)
        .collect();
    candidates[rng.gen_range(0..candidates.len())]
}

fn grid_episode(
    env: &GridRoomsEnv,
    cfg: &EpisodeConfig,
    noise: f64,
    rng: &mut Rng,
) -> Trajectory {
    let room = match &cfg.start_rooms {
        Some(rooms) => rooms[rng.gen_range(0..rooms.len())],
        None => rng.gen_range(0..env.num_rooms()),
    };
    let cells: Vec<Cell> = env.cells_in_room(room).collect();
    let mut s = cells[rng.gen_range(0..cells.len())];
    let resample_goal = |current: Cell, rng: &mut Rng| loop {
        let g = cells[rng.gen_range(0..cells.len())];
        if g != current {
            break g;
        }
    };
    let mut goal = resample_goal(s, rng);
    let mut dist = env.distances_to(goal).expect("goal is navigable");
    let mut states = vec![env.features(s).to_vec()];
    let mut actions = Vec::with_capacity(cfg.horizon);
    for _ in 0..cfg.horizon {
        if s == goal {
            // Reached: pick the next wander target without consuming a step.
            goal = resample_goal(s, rng);
            dist = env.distances_to(goal).expect("goal is navigable");
        }
        let a = expert_action_by_dist(env, s, &dist, noise, rng);
        s = env.step_cell(s, a);
        actions.push(a.one_hot().to_vec());
        states.push(env.features(s).to_vec());
    }
    Trajectory { states, actions }
}

fn point_episode(env: &PointRoomEnv, cfg: &EpisodeConfig, noise: f64, rng: &mut Rng) -> Trajectory {
    let mut s = [rng.gen::<f64>(), rng.gen::<f64>()];
    let mut goal = [rng.gen::<f64>(), rng.gen::<f64>()];
    let mut states = vec![vec![s[0] as f32, s[1] as f32]];
    let mut actions = Vec::with_capacity(cfg.horizon);
    for _ in 0..cfg.horizon {
        if env.success(s, goal) {
            goal = [rng.gen::<f64>(), rng.gen::<f64>()];
        }
        let request = if rng.gen_bool(noise) {
            let theta = rng.gen::<f64>() * std::f64::consts::TAU;
            [env.max_step * theta.cos(), env.max_step * theta.sin()]
        } else {
            [goal[0] - s[0], goal[1] - s[1]]
        };
        let next = env.step(s, request);
        // The recorded action is the displacement that actually happened,
        // so replaying the sequence reproduces the states.
        actions.push(vec![(next[0] - s[0]) as f32, (next[1] - s[1]) as f32]);
        states.push(vec![next[0] as f32, next[1] as f32]);
        s = next;
    }
    Trajectory { states, actions }
}

pub fn generate_dataset(
    env: &Env,
    episode: &EpisodeConfig,
    episodes: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if episodes == 0 {
        return Err(Error::invalid("episodes must be at least 1"));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::invalid(format!("noise {noise} outside [0, 1]")));
    }
    episode.validate(env)?;
    let trajectories = parallel_map(episodes, |e| {
        let mut rng = rng_from(derive_seed(seed, e as u64));
        match env {
            Env::Rooms(g) => grid_episode(g, episode, noise, &mut rng),
            Env::Point(p) => point_episode(p, episode, noise, &mut rng),
        }
    });
    let (state_dim, action_dim) = match env {
        Env::Rooms(_) => (2, Action::COUNT),
        Env::Point(_) => (2, 2),
    };
    let ds = Dataset {
        state_dim,
        action_dim,
        manifest: Manifest {
            version: FORMAT_VERSION,
            env: env.descriptor(),
            episodes,
            noise,
            seed,
            horizon: episode.horizon,
            start_rooms: episode.start_rooms.clone(),
            state_dim,
            action_dim,
            num_trajectories: trajectories.len(),
            notes: Vec::new(),
        },
        trajectories,
    };
    ds.validate()?;
    Ok(ds)
}

const DATASET_MAGIC: &[u8; 8] = b"CARLDS1\0";
const FORMAT_VERSION: u32 = 1;

/// The manifest lives next to the binary file under the same name plus
/// `.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(DATASET_MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(ds.state_dim as u32).to_le_bytes());
    bytes.extend_from_slice(&(ds.action_dim as u32).to_le_bytes());
    bytes.extend_from_slice(&(ds.trajectories.len() as u32).to_le_bytes());
    for t in &ds.trajectories {
        bytes.extend_from_slice(&(t.states.len() as u32).to_le_bytes());
        for s in &t.states {
            for v in s {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        for a in &t.actions {
            for v in a {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    let manifest =
        serde_json::to_string_pretty(&ds.manifest).expect("manifest serializes") + "\n";
    let mpath = manifest_path(path);
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(mpath.clone(), e))?;
    Ok(())
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() < self.at + n {
            return Err(Error::format(self.path, format!("truncated before {what}")));
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn vecs(&mut self, count: usize, dim: usize, what: &str) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let raw = self.take(4 * dim, what)?;
            out.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            );
        }
        Ok(out)
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mpath = manifest_path(path);
    let mtext = std::fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.clone(), e))?;
    let manifest: Manifest = serde_json::from_str(&mtext)
        .map_err(|e| Error::format(mpath.clone(), format!("manifest: {e}")))?;

    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader { bytes: &bytes, at: 0, path };
    if r.take(8, "magic")? != DATASET_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let state_dim = r.u32("state_dim")? as usize;
    let action_dim = r.u32("action_dim")? as usize;
    let num_traj = r.u32("trajectory count")? as usize;
    let mut trajectories = Vec::with_capacity(num_traj);
    for i in 0..num_traj {
        let num_states = r.u32("trajectory length")? as usize;
        if num_states == 0 {
            return Err(Error::format(path, format!("trajectory {i} has no states")));
        }
        let states = r.vecs(num_states, state_dim, "state")?;
        let actions = r.vecs(num_states - 1, action_dim, "action")?;
        trajectories.push(Trajectory { states, actions });
    }
    if r.at != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.at)));
    }
    if manifest.state_dim != state_dim
        || manifest.action_dim != action_dim
        || manifest.num_trajectories != num_traj
    {
        return Err(Error::format(path, "manifest disagrees with binary header"));
    }
    let ds = Dataset { trajectories, state_dim, action_dim, manifest };
    ds.validate()?;
    Ok(ds)
}

/// Pads to length `k` by repeating the final element.
pub fn truncate_pad<T: Clone>(actions: &[T], k: usize) -> Result<Vec<T>> {
    if actions.is_empty() {
        return Err(Error::invalid("cannot pad an empty action sequence"));
    }
    if actions.len() > k {
        return Err(Error::invalid(format!(
            "sequence length {} exceeds horizon {k}",
            actions.len()
        )));
    }
    let mut out = actions.to_vec();
    out.resize(k, actions.last().expect("non-empty").clone());
    Ok(out)
}

/// Every `stride`-th element, starting at 0: length ceil(len / stride).
fn stride_select<T: Clone>(seq: &[T], stride: usize) -> Vec<T> {
    seq.iter().step_by(stride).cloned().collect()
}

/// Where the contrastive goal sits inside the k-step window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalMode {
    /// j ~ Uniform{1..k}.
    Interior,
    /// j = k: goals on the window surface only.
    Surface,
}

impl std::str::FromStr for GoalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<GoalMode> {
        match s {
            "interior" => Ok(GoalMode::Interior),
            "surface" => Ok(GoalMode::Surface),
            _ => Err(Error::invalid(format!("unknown goal mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub k: usize,
    pub goal_mode: GoalMode,
    pub stride: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { k: 3, goal_mode: GoalMode::Interior, stride: 1, batch_size: 256, seed: 0 }
    }
}

/// A k-step window cut from a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub traj: usize,
    pub t: usize,
    pub state: Vec<f32>,
    /// Flattened action sequence after pad-to-k then stride:
    /// ceil(k / stride) action encodings.
    pub action_seq: Vec<f32>,
    /// s_{t+j}; for windows cut short by the trajectory end, the last
    /// available state.
    pub goal: Vec<f32>,
    pub goal_offset: usize,
    /// s_{t+k}, or the trajectory's final state when the window is cut short.
    pub final_state: Vec<f32>,
    /// Actions actually available before padding: min(k, length − t).
    pub available: usize,
}

pub struct SegmentSampler<'a> {
    ds: &'a Dataset,
    cfg: SamplerConfig,
    rng: Rng,
}

impl<'a> SegmentSampler<'a> {
    pub fn new(ds: &'a Dataset, cfg: SamplerConfig) -> Result<SegmentSampler<'a>> {
        if ds.trajectories.iter().all(Trajectory::is_empty) {
            return Err(Error::invalid("dataset has no transitions"));
        }
        if cfg.k == 0 {
            return Err(Error::invalid("segment horizon k must be at least 1"));
        }
        if cfg.k >= ds.max_len() {
            return Err(Error::invalid(format!(
                "segment horizon k = {} must be smaller than the longest trajectory ({} steps)",
                cfg.k,
                ds.max_len()
            )));
        }
        if cfg.stride == 0 {
            return Err(Error::invalid("action stride must be at least 1"));
        }
        if cfg.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        let rng = rng_from(cfg.seed);
        Ok(SegmentSampler { ds, cfg, rng })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    /// Encoded action-sequence length after striding.
    pub fn seq_dim(&self) -> usize {
        self.cfg.k.div_ceil(self.cfg.stride) * self.ds.action_dim
    }

    pub fn sample(&mut self) -> Segment {
        let traj = loop {
            let i = self.rng.gen_range(0..self.ds.trajectories.len());
            if !self.ds.trajectories[i].is_empty() {
                break i;
            }
        };
        let tr = &self.ds.trajectories[traj];
        let t = self.rng.gen_range(0..tr.len());
        let j = match self.cfg.goal_mode {
            GoalMode::Interior => self.rng.gen_range(1..=self.cfg.k),
            GoalMode::Surface => self.cfg.k,
        };
        self.segment_at(traj, t, j)
    }

    pub fn sample_batch(&mut self) -> Vec<Segment> {
        (0..self.cfg.batch_size).map(|_| self.sample()).collect()
    }

    /// Deterministic cut at (traj, t) with requested goal offset `j`
    /// (clamped, like the window itself, to the trajectory tail).
    pub fn segment_at(&self, traj: usize, t: usize, j: usize) -> Segment {
        let tr = &self.ds.trajectories[traj];
        let available = self.cfg.k.min(tr.len() - t);
        let j = j.clamp(1, available);
        let raw: Vec<Vec<f32>> = tr.actions[t..t + available].to_vec();
        let padded = truncate_pad(&raw, self.cfg.k).expect("available >= 1");
        let strided = stride_select(&padded, self.cfg.stride);
        Segment {
            traj,
            t,
            state: tr.states[t].clone(),
            action_seq: strided.concat(),
            goal: tr.states[t + j].clone(),
            goal_offset: j,
            final_state: tr.states[t + available].clone(),
            available,
        }
    }
}

/// One batch of segments; convenience over [`SegmentSampler`].
pub fn sample_segments(ds: &Dataset, cfg: &SamplerConfig) -> Result<Vec<Segment>> {
    let mut sampler = SegmentSampler::new(ds, cfg.clone())?;
    Ok(sampler.sample_batch())
}

/// Axis-aligned halves of the (normalized) state space, for the robustness
/// filters and their CLI flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Left,
    Right,
    Top,
    Bottom,
}

impl Region {
    pub fn contains(self, s: &[f32]) -> bool {
        match self {
            Region::Left => s[0] < 0.5,
            Region::Right => s[0] >= 0.5,
            Region::Top => s[1] < 0.5,
            Region::Bottom => s[1] >= 0.5,
        }
    }
}

impl std::str::FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Region> {
        match s {
            "left" => Ok(Region::Left),
            "right" => Ok(Region::Right),
            "top" => Ok(Region::Top),
            "bottom" => Ok(Region::Bottom),
            _ => Err(Error::invalid(format!("unknown region `{s}`"))),
        }
    }
}

/// First index of the maximum (ties break to the lowest index).
pub(crate) fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite").then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .expect("non-empty")
}

/// Rebuilds the dataset keeping only transitions where `keep` holds,
/// splitting trajectories at every removed transition. Sub-trajectories with
/// no actions left are dropped.
fn filter_transitions(
    ds: &Dataset,
    mut keep: impl FnMut(&[f32], &[f32]) -> bool,
    note: String,
) -> Dataset {
    let mut out: Vec<Trajectory> = Vec::new();
    for tr in &ds.trajectories {
        let mut states: Vec<Vec<f32>> = Vec::new();
        let mut actions: Vec<Vec<f32>> = Vec::new();
        let mut flush = |states: &mut Vec<Vec<f32>>, actions: &mut Vec<Vec<f32>>| {
            if !actions.is_empty() {
                out.push(Trajectory {
                    states: std::mem::take(states),
                    actions: std::mem::take(actions),
                });
            } else {
                states.clear();
            }
        };
        for i in 0..tr.len() {
            if keep(&tr.states[i], &tr.actions[i]) {
                if states.is_empty() {
                    states.push(tr.states[i].clone());
                }
                states.push(tr.states[i + 1].clone());
                actions.push(tr.actions[i].clone());
            } else {
                flush(&mut states, &mut actions);
            }
        }
        flush(&mut states, &mut actions);
    }
    let mut manifest = ds.manifest.clone();
    manifest.num_trajectories = out.len();
    manifest.notes.push(note);
    Dataset {
        trajectories: out,
        state_dim: ds.state_dim,
        action_dim: ds.action_dim,
        manifest,
    }
}

/// Keeps transitions whose source state lies in `region` with probability
/// `keep_fraction` (others always stay), splitting at removals.
pub fn filter_coverage(
    ds: &Dataset,
    region: impl Fn(&[f32]) -> bool,
    keep_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&keep_fraction) {
        return Err(Error::invalid(format!("keep fraction {keep_fraction} outside [0, 1]")));
    }
    let mut rng = rng_from(seed);
    Ok(filter_transitions(
        ds,
        |s, _| !region(s) || rng.gen_bool(keep_fraction),
        format!("coverage filter: keep {keep_fraction} inside region (seed {seed})"),
    ))
}

/// Removes transitions in `region` whose action is `direction` with
/// probability `removal_fraction`.
pub fn filter_imbalance(
    ds: &Dataset,
    region: impl Fn(&[f32]) -> bool,
    direction: usize,
    removal_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&removal_fraction) {
        return Err(Error::invalid(format!(
            "removal fraction {removal_fraction} outside [0, 1]"
        )));
    }
    if direction >= ds.action_dim {
        return Err(Error::invalid(format!(
            "direction index {direction} outside action dim {}",
            ds.action_dim
        )));
    }
    let mut rng = rng_from(seed);
    Ok(filter_transitions(
        ds,
        |s, a| !(region(s) && argmax(a) == direction) || !rng.gen_bool(removal_fraction),
        format!(
            "imbalance filter: remove {removal_fraction} of direction {direction} inside region (seed {seed})"
        ),
    ))
}

/// Keeps whole trajectories that start in one of `rooms`.
pub fn filter_by_start_room(
    ds: &Dataset,
    env: &GridRoomsEnv,
    rooms: &[usize],
) -> Result<Dataset> {
    let mut out = Vec::new();
    for tr in &ds.trajectories {
        let start = env.cell_from_features(&tr.states[0])?;
        if rooms.contains(&env.room_of(start)) {
            out.push(tr.clone());
        }
    }
    let mut manifest = ds.manifest.clone();
    manifest.num_trajectories = out.len();
    manifest.notes.push(format!("restricted to trajectories starting in rooms {rooms:?}"));
    Ok(Dataset {
        trajectories: out,
        state_dim: ds.state_dim,
        action_dim: ds.action_dim,
        manifest,
    })
}
