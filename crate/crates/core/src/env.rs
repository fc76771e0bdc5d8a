//! Toy goal-reaching environments: a family of identical, mutually
//! disconnected gridworld rooms and a continuous point room.
//!
//! Rooms share a single global coordinate frame; a learner only ever sees the
//! scaled global `(x, y)` position, so two rooms differ in nothing but that
//! offset. Gridworld dynamics are deterministic with wall self-loops and have
//! an exact [`TabularMdp`] view for the formal tooling.

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use serde::{Deserialize, Serialize};

/// Grid action set. Indices are stable (checkpoints and datasets store them).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        match self {
            Action::Up => 0,
            Action::Down => 1,
            Action::Left => 2,
            Action::Right => 3,
        }
    }

    pub fn from_index(i: usize) -> Result<Action> {
        Action::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid(format!("action index {i} out of range 0..4")))
    }

    /// Displacement in global coordinates; `y` grows downward.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
        }
    }

    pub fn one_hot(self) -> [f32; 4] {
        let mut v = [0.0; 4];
        v[self.index()] = 1.0;
        v
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::Left => "left",
            Action::Right => "right",
        }
    }
}

impl std::str::FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Action> {
        Action::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown action `{s}`")))
    }
}

/// Global integer cell position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

/// Identical rooms laid out in a row (a near-square grid beyond ten rooms),
/// separated by one-cell walls and mutually unreachable.
#[derive(Debug, Clone)]
pub struct GridRoomsEnv {
    num_rooms: usize,
    room_width: usize,
    room_height: usize,
    cols: usize,
    rows: usize,
    width: usize,
    height: usize,
    /// Navigable cells in row-major order; index = tabular state id.
    cells: Vec<Cell>,
    /// width*height map from global position to navigable id.
    ids: Vec<Option<usize>>,
}

/// Builds a world of `num_rooms` square rooms of side `room_size`.
pub fn make_rooms(num_rooms: usize, room_size: usize) -> Result<GridRoomsEnv> {
    GridRoomsEnv::new(num_rooms, room_size, room_size)
}

impl GridRoomsEnv {
    pub fn new(num_rooms: usize, room_width: usize, room_height: usize) -> Result<Self> {
        if !(1..=32).contains(&num_rooms) {
            return Err(Error::invalid(format!("num_rooms {num_rooms} outside 1..=32")));
        }
        if room_width < 3 || room_height < 3 {
            return Err(Error::invalid(format!(
                "room dimensions {room_width}x{room_height} below minimum 3x3"
            )));
        }
        let cols = if num_rooms <= 10 {
            num_rooms
        } else {
            (1..).find(|c| c * c >= num_rooms).expect("bounded by num_rooms")
        };
        let rows = num_rooms.div_ceil(cols);
        let width = cols * (room_width + 1) + 1;
        let height = rows * (room_height + 1) + 1;
        let mut env = GridRoomsEnv {
            num_rooms,
            room_width,
            room_height,
            cols,
            rows,
            width,
            height,
            cells: Vec::new(),
            ids: vec![None; width * height],
        };
        for y in 0..height {
            for x in 0..width {
                if env.navigable_raw(x, y) {
                    env.ids[y * width + x] = Some(env.cells.len());
                    env.cells.push(Cell { x, y });
                }
            }
        }
        Ok(env)
    }

    fn navigable_raw(&self, x: usize, y: usize) -> bool {
        if x >= self.width || y >= self.height {
            return false;
        }
        let (cw, ch) = (self.room_width + 1, self.room_height + 1);
        if x % cw == 0 || y % ch == 0 {
            return false;
        }
        // The last grid row may hold fewer rooms than columns.
        (y / ch) * self.cols + (x / cw) < self.num_rooms
    }

    pub fn num_rooms(&self) -> usize {
        self.num_rooms
    }

    pub fn room_dims(&self) -> (usize, usize) {
        (self.room_width, self.room_height)
    }

    pub fn world_dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn is_navigable(&self, c: Cell) -> bool {
        self.navigable_raw(c.x, c.y)
    }

    /// Tabular state id of a navigable cell.
    pub fn cell_id(&self, c: Cell) -> Option<usize> {
        if c.x >= self.width || c.y >= self.height {
            return None;
        }
        self.ids[c.y * self.width + c.x]
    }

    pub fn cell_at(&self, id: usize) -> Cell {
        self.cells[id]
    }

    pub fn room_of(&self, c: Cell) -> usize {
        (c.y / (self.room_height + 1)) * self.cols + c.x / (self.room_width + 1)
    }

    /// Coordinates within the room, zero-based at its top-left cell.
    pub fn room_coords(&self, c: Cell) -> (usize, usize) {
        (c.x % (self.room_width + 1) - 1, c.y % (self.room_height + 1) - 1)
    }

    /// The cell at the same within-room position in another room.
    pub fn translate_to_room(&self, c: Cell, room: usize) -> Result<Cell> {
        if room >= self.num_rooms {
            return Err(Error::invalid(format!("room {room} out of range")));
        }
        let (lx, ly) = self.room_coords(c);
        let (cw, ch) = (self.room_width + 1, self.room_height + 1);
        Ok(Cell {
            x: (room % self.cols) * cw + 1 + lx,
            y: (room / self.cols) * ch + 1 + ly,
        })
    }

    pub fn cells_in_room(&self, room: usize) -> impl Iterator<Item = Cell> + '_ {
        self.cells.iter().copied().filter(move |&c| self.room_of(c) == room)
    }

    /// All four neighbors navigable, i.e. no wall contact.
    pub fn is_interior(&self, c: Cell) -> bool {
        Action::ALL.iter().all(|a| self.step_cell(c, *a) != c)
    }

    pub fn step_cell(&self, c: Cell, a: Action) -> Cell {
        let (dx, dy) = a.delta();
        let nx = c.x.wrapping_add_signed(dx);
        let ny = c.y.wrapping_add_signed(dy);
        if self.navigable_raw(nx, ny) {
            Cell { x: nx, y: ny }
        } else {
            c
        }
    }

    /// Displaced cell if the target is navigable; walls yield `None` rather
    /// than a self-loop so callers can build honest direction-labeled pairs.
    pub fn offset(&self, c: Cell, dx: isize, dy: isize) -> Option<Cell> {
        let nx = c.x.checked_add_signed(dx)?;
        let ny = c.y.checked_add_signed(dy)?;
        self.navigable_raw(nx, ny).then_some(Cell { x: nx, y: ny })
    }

    /// Global position scaled to the unit square.
    pub fn features(&self, c: Cell) -> [f32; 2] {
        [
            c.x as f32 / (self.width - 1) as f32,
            c.y as f32 / (self.height - 1) as f32,
        ]
    }

    /// Inverse of [`GridRoomsEnv::features`] for vectors that came from it.
    pub fn cell_from_features(&self, f: &[f32]) -> Result<Cell> {
        if f.len() < 2 {
            return Err(Error::contract("feature vector shorter than 2"));
        }
        let c = Cell {
            x: (f[0] as f64 * (self.width - 1) as f64).round() as usize,
            y: (f[1] as f64 * (self.height - 1) as f64).round() as usize,
        };
        if !self.is_navigable(c) {
            return Err(Error::contract(format!(
                "features ({}, {}) decode to a wall cell ({}, {})",
                f[0], f[1], c.x, c.y
            )));
        }
        Ok(c)
    }

    /// BFS step counts to `goal`, indexed by cell id; `u32::MAX` where
    /// unreachable (other rooms).
    pub fn distances_to(&self, goal: Cell) -> Result<Vec<u32>> {
        let gid = self
            .cell_id(goal)
            .ok_or_else(|| Error::invalid(format!("goal ({}, {}) is a wall", goal.x, goal.y)))?;
        let mut dist = vec![u32::MAX; self.cells.len()];
        dist[gid] = 0;
        let mut queue = std::collections::VecDeque::from([gid]);
        while let Some(id) = queue.pop_front() {
            let here = dist[id];
            for a in Action::ALL {
                let n = self.step_cell(self.cells[id], a);
                let nid = self.cell_id(n).expect("steps stay navigable");
                if dist[nid] == u32::MAX {
                    dist[nid] = here + 1;
                    queue.push_back(nid);
                }
            }
        }
        Ok(dist)
    }

    /// Exact deterministic transition table over navigable cells, with the
    /// sparse goal-conditioned reward r(s, g) = 0 on success, -1 otherwise.
    pub fn to_tabular(&self) -> TabularMdp {
        let n = self.cells.len();
        let next = |s: usize, a: usize| {
            let act = Action::from_index(a).expect("a < 4");
            self.cell_id(self.step_cell(self.cells[s], act)).expect("steps stay navigable")
        };
        let mut mdp = TabularMdp::deterministic(n, Action::COUNT, next).expect("valid table");
        let mut rewards = vec![-1.0; n * n];
        for s in 0..n {
            rewards[s * n + s] = 0.0;
        }
        mdp.set_rewards(rewards).expect("square reward table");
        mdp
    }

    pub fn render(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(if self.navigable_raw(x, y) { '.' } else { '#' });
            }
            out.push('\n');
        }
        out
    }

    pub fn descriptor(&self) -> EnvDescriptor {
        EnvDescriptor::Rooms {
            num_rooms: self.num_rooms,
            room_width: self.room_width,
            room_height: self.room_height,
            cols: self.cols,
            rows: self.rows,
            width: self.width,
            height: self.height,
        }
    }
}

/// Continuous unit-square room. Actions are (dx, dy) displacement requests;
/// each step clips the request to `max_step` in L2 and clamps the result to
/// the bounds per axis.
#[derive(Debug, Clone)]
pub struct PointRoomEnv {
    pub max_step: f64,
    pub success_radius: f64,
}

impl Default for PointRoomEnv {
    fn default() -> Self {
        PointRoomEnv { max_step: 0.1, success_radius: 0.05 }
    }
}

impl PointRoomEnv {
    pub fn step(&self, state: [f64; 2], action: [f64; 2]) -> [f64; 2] {
        let norm = (action[0] * action[0] + action[1] * action[1]).sqrt();
        let scale = if norm > self.max_step { self.max_step / norm } else { 1.0 };
        [
            (state[0] + action[0] * scale).clamp(0.0, 1.0),
            (state[1] + action[1] * scale).clamp(0.0, 1.0),
        ]
    }

    pub fn success(&self, state: [f64; 2], goal: [f64; 2]) -> bool {
        let (dx, dy) = (state[0] - goal[0], state[1] - goal[1]);
        (dx * dx + dy * dy).sqrt() <= self.success_radius
    }

    pub fn descriptor(&self) -> EnvDescriptor {
        EnvDescriptor::Point { max_step: self.max_step, success_radius: self.success_radius }
    }
}

/// Serializable layout descriptor; datasets embed it so downstream stages can
/// rebuild the exact environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvDescriptor {
    Rooms {
        num_rooms: usize,
        room_width: usize,
        room_height: usize,
        cols: usize,
        rows: usize,
        width: usize,
        height: usize,
    },
    Point {
        max_step: f64,
        success_radius: f64,
    },
}

/// Either environment, for spec-string and descriptor dispatch.
#[derive(Debug, Clone)]
pub enum Env {
    Rooms(GridRoomsEnv),
    Point(PointRoomEnv),
}

impl Env {
    /// Parses compact spec strings: `rooms5`, `rooms20`, `rooms7x4`
    /// (7 rooms of side 4), `point`.
    pub fn from_spec(spec: &str) -> Result<Env> {
        if spec == "point" {
            return Ok(Env::Point(PointRoomEnv::default()));
        }
        let rest = spec
            .strip_prefix("rooms")
            .ok_or_else(|| Error::invalid(format!("unknown env spec `{spec}`")))?;
        let (rooms, size) = match rest.split_once('x') {
            Some((n, s)) => (n, s),
            None => (rest, "5"),
        };
        let bad = |_| Error::invalid(format!("unknown env spec `{spec}`"));
        Ok(Env::Rooms(make_rooms(
            rooms.parse().map_err(bad)?,
            size.parse().map_err(bad)?,
        )?))
    }

    pub fn from_descriptor(d: &EnvDescriptor) -> Result<Env> {
        match *d {
            EnvDescriptor::Rooms { num_rooms, room_width, room_height, .. } => {
                Ok(Env::Rooms(GridRoomsEnv::new(num_rooms, room_width, room_height)?))
            }
            EnvDescriptor::Point { max_step, success_radius } => {
                Ok(Env::Point(PointRoomEnv { max_step, success_radius }))
            }
        }
    }

    pub fn descriptor(&self) -> EnvDescriptor {
        match self {
            Env::Rooms(e) => e.descriptor(),
            Env::Point(e) => e.descriptor(),
        }
    }

    pub fn to_tabular(&self) -> Result<TabularMdp> {
        match self {
            Env::Rooms(e) => Ok(e.to_tabular()),
            Env::Point(_) => {
                Err(Error::unsupported("continuous point room has no exact tabular view"))
            }
        }
    }

    pub fn render(&self) -> Result<String> {
        match self {
            Env::Rooms(e) => Ok(e.render()),
            Env::Point(_) => Err(Error::unsupported("point room has no grid map to render")),
        }
    }

    pub fn rooms(&self) -> Result<&GridRoomsEnv> {
        match self {
            Env::Rooms(e) => Ok(e),
            Env::Point(_) => Err(Error::unsupported("operation requires the gridworld")),
        }
    }
}

/// Episode shape shared by data generation and evaluation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpisodeConfig {
    pub horizon: usize,
    /// Rooms eligible as episode starts; `None` means all rooms. Goals are
    /// always drawn from the start's room (rooms are disconnected).
    pub start_rooms: Option<Vec<usize>>,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { horizon: 200, start_rooms: None }
    }
}

impl EpisodeConfig {
    pub fn validate(&self, env: &Env) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        if let Some(rooms) = &self.start_rooms {
            if rooms.is_empty() {
                return Err(Error::invalid("start_rooms must not be empty when given"));
            }
            if let Env::Rooms(e) = env {
                if let Some(&r) = rooms.iter().find(|&&r| r >= e.num_rooms()) {
                    return Err(Error::invalid(format!(
                        "start room {r} out of range 0..{}",
                        e.num_rooms()
                    )));
                }
            }
        }
        Ok(())
    }
}
