//! Tabular MDPs, k-step reachability balls, and dynamics bisimilarity.
//!
//! A *k-ball* around a state is the set of states reachable from it within
//! `k` steps (the root itself included). The *k-ball MDP* restricts the
//! parent MDP to that set, routing all transition mass that leaves the ball
//! into a single absorbing sink state appended at the end of the local state
//! space.
//!
//! Two MDPs over the same action set are *dynamics-bisimilar* when a total
//! relation `B ⊆ S1 × S2` exists such that every related pair (x, x')
//! satisfies, for every action:
//!
//! 1. successor-value matching — related successor pairs carry equal
//!    probability: `p1(y|x,a) = p2(y'|x',a)` for every `(y, y') ∈ B`;
//! 2. block-mass equality — for every class `C` of the partition induced by
//!    `B`, the mass `x` sends into `C` equals the mass `x'` sends into the
//!    related class.
//!
//! Rewards play no part; the relation is purely about dynamics.
//!
//! Closing a witness under its induced classes never breaks the conditions,
//! so a witness exists iff the disjoint union of the state spaces admits a
//! partition into blocks that (a) contain states from both sides, (b) have a
//! single transition value between any ordered block pair per action, and
//! (c) have equal per-side sizes wherever they receive positive mass.
//! [`check_dynamics_bisimilar`] searches for such a partition, pruned by
//! signature refinement; the witness is the union of block cross pairs.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Validation tolerance: transition rows must sum to 1 within this.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

/// Comparison tolerance for bisimilarity: two probabilities (or block
/// masses) are treated as equal when within this.
pub const BISIM_TOLERANCE: f64 = 1e-9;

/// A finite MDP with dense transition probabilities and an optional
/// state × goal reward table.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MdpFile", into = "MdpFile")]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    /// Row-major `[state][action][successor]`.
    transitions: Vec<f64>,
    /// Row-major `[state][goal]`, if present.
    rewards: Option<Vec<f64>>,
}

impl TabularMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transitions: Vec<f64>,
        rewards: Option<Vec<f64>>,
    ) -> Result<Self> {
        if num_states == 0 {
            return Err(Error::InvalidArgument("num_states must be at least 1".into()));
        }
        if num_actions == 0 {
            return Err(Error::InvalidArgument("num_actions must be at least 1".into()));
        }
        let expect = num_states * num_actions * num_states;
        if transitions.len() != expect {
            return Err(Error::InvalidArgument(format!(
                "transitions has {} entries, expected {} ({} states x {} actions x {} successors)",
                transitions.len(),
                expect,
                num_states,
                num_actions,
                num_states
            )));
        }
        for s in 0..num_states {
            for a in 0..num_actions {
                let row = &transitions[(s * num_actions + a) * num_states..][..num_states];
                let mut sum = 0.0;
                for (s2, &p) in row.iter().enumerate() {
                    if !p.is_finite() || !(0.0..=1.0 + ROW_SUM_TOLERANCE).contains(&p) {
                        return Err(Error::InvalidArgument(format!(
                            "transition probability p({s2}|{s},{a}) = {p} is not in [0, 1]"
                        )));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                    return Err(Error::InvalidArgument(format!(
                        "transition row (state {s}, action {a}) sums to {sum}, not 1"
                    )));
                }
            }
        }
        if let Some(r) = &rewards {
            if r.len() != num_states * num_states {
                return Err(Error::InvalidArgument(format!(
                    "rewards has {} entries, expected {} (states x goals)",
                    r.len(),
                    num_states * num_states
                )));
            }
            if let Some(bad) = r.iter().find(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("non-finite reward entry {bad}")));
            }
        }
        Ok(TabularMdp { num_states, num_actions, transitions, rewards })
    }

    /// Builds a deterministic MDP from a successor function.
    pub fn deterministic(
        num_states: usize,
        num_actions: usize,
        next: impl Fn(usize, usize) -> usize,
    ) -> Result<Self> {
        let mut transitions = vec![0.0; num_states * num_actions * num_states];
        for s in 0..num_states {
            for a in 0..num_actions {
                let s2 = next(s, a);
                if s2 >= num_states {
                    return Err(Error::InvalidArgument(format!(
                        "successor {s2} of (state {s}, action {a}) is out of range"
                    )));
                }
                transitions[(s * num_actions + a) * num_states + s2] = 1.0;
            }
        }
        TabularMdp::new(num_states, num_actions, transitions, None)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn has_rewards(&self) -> bool {
        self.rewards.is_some()
    }

    pub fn prob(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.row(s, a)[s2]
    }

    /// Transition distribution over successors for `(s, a)`.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        debug_assert!(s < self.num_states && a < self.num_actions);
        &self.transitions[(s * self.num_actions + a) * self.num_states..][..self.num_states]
    }

    /// Successors of `(s, a)` carrying positive probability.
    pub fn successors(&self, s: usize, a: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.row(s, a).iter().copied().enumerate().filter(|&(_, p)| p > 0.0)
    }

    pub fn reward(&self, s: usize, g: usize) -> Option<f64> {
        self.rewards.as_ref().map(|r| r[s * self.num_states + g])
    }

    pub fn set_rewards(&mut self, rewards: Vec<f64>) -> Result<()> {
        if rewards.len() != self.num_states * self.num_states {
            return Err(Error::InvalidArgument(format!(
                "rewards has {} entries, expected {}",
                rewards.len(),
                self.num_states * self.num_states
            )));
        }
        self.rewards = Some(rewards);
        Ok(())
    }
}

/// On-disk JSON shape: nested `[state][action][successor]` arrays.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpFile {
    num_states: usize,
    num_actions: usize,
    transitions: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rewards: Option<Vec<Vec<f64>>>,
}

impl TryFrom<MdpFile> for TabularMdp {
    type Error = Error;

    fn try_from(f: MdpFile) -> Result<Self> {
        let mut flat = Vec::with_capacity(f.num_states * f.num_actions * f.num_states);
        if f.transitions.len() != f.num_states {
            return Err(Error::InvalidArgument(format!(
                "transitions lists {} states, header says {}",
                f.transitions.len(),
                f.num_states
            )));
        }
        for (s, per_action) in f.transitions.iter().enumerate() {
            if per_action.len() != f.num_actions {
                return Err(Error::InvalidArgument(format!(
                    "state {s} lists {} actions, header says {}",
                    per_action.len(),
                    f.num_actions
                )));
            }
            for row in per_action {
                if row.len() != f.num_states {
                    return Err(Error::InvalidArgument(format!(
                        "state {s} has a transition row of length {}, expected {}",
                        row.len(),
                        f.num_states
                    )));
                }
                flat.extend_from_slice(row);
            }
        }
        let rewards = match f.rewards {
            None => None,
            Some(rows) => {
                let mut flat_r = Vec::with_capacity(f.num_states * f.num_states);
                for row in &rows {
                    if row.len() != f.num_states {
                        return Err(Error::InvalidArgument(format!(
                            "reward row of length {}, expected {}",
                            row.len(),
                            f.num_states
                        )));
                    }
                    flat_r.extend_from_slice(row);
                }
                if rows.len() != f.num_states {
                    return Err(Error::InvalidArgument(format!(
                        "rewards lists {} states, header says {}",
                        rows.len(),
                        f.num_states
                    )));
                }
                Some(flat_r)
            }
        };
        TabularMdp::new(f.num_states, f.num_actions, flat, rewards)
    }
}

impl From<TabularMdp> for MdpFile {
    fn from(m: TabularMdp) -> Self {
        let transitions = (0..m.num_states)
            .map(|s| (0..m.num_actions).map(|a| m.row(s, a).to_vec()).collect())
            .collect();
        let rewards = m.rewards.as_ref().map(|r| {
            (0..m.num_states).map(|s| r[s * m.num_states..][..m.num_states].to_vec()).collect()
        });
        MdpFile { num_states: m.num_states, num_actions: m.num_actions, transitions, rewards }
    }
}

/// States reachable from `root` within at most `k` steps, `root` included.
pub fn compute_k_ball(mdp: &TabularMdp, root: usize, k: usize) -> Result<BTreeSet<usize>> {
    if root >= mdp.num_states() {
        return Err(Error::InvalidArgument(format!(
            "root state {root} is out of range (num_states = {})",
            mdp.num_states()
        )));
    }
    let mut ball = BTreeSet::from([root]);
    let mut frontier = vec![root];
    for _ in 0..k {
        let mut next = Vec::new();
        for &s in &frontier {
            for a in 0..mdp.num_actions() {
                for (s2, _) in mdp.successors(s, a) {
                    if ball.insert(s2) {
                        next.push(s2);
                    }
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    Ok(ball)
}

/// The restriction of a parent MDP to a k-ball. Local state `i` corresponds
/// to `members[i]`; one extra absorbing sink state sits at index
/// `members.len()` and collects all transition mass leaving the ball.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KBallMdp {
    /// Parent-state id of the ball's root.
    pub root: usize,
    /// The `k` the ball was built with.
    pub radius: usize,
    /// Sorted parent-state ids of the ball members.
    pub members: Vec<usize>,
    /// Local dynamics over `members.len() + 1` states (sink last).
    pub mdp: TabularMdp,
}

impl KBallMdp {
    /// Local index of the absorbing sink.
    pub fn sink(&self) -> usize {
        self.members.len()
    }

    /// Local index of the root state.
    pub fn root_local(&self) -> usize {
        self.local_index(self.root).expect("root is always a member")
    }

    /// Local index of a parent state, if it belongs to the ball.
    pub fn local_index(&self, parent: usize) -> Option<usize> {
        self.members.binary_search(&parent).ok()
    }
}

/// Builds the k-ball MDP around `root`. Rewards, when the parent carries
/// them, are restricted to member pairs; rows and columns involving the sink
/// are zero.
pub fn build_k_ball_mdp(mdp: &TabularMdp, root: usize, k: usize) -> Result<KBallMdp> {
    let ball = compute_k_ball(mdp, root, k)?;
    let members: Vec<usize> = ball.iter().copied().collect();
    let n = members.len() + 1;
    let sink = members.len();
    let na = mdp.num_actions();
    let mut transitions = vec![0.0; n * na * n];
    for (i, &m) in members.iter().enumerate() {
        for a in 0..na {
            let row = &mut transitions[(i * na + a) * n..][..n];
            for (s2, p) in mdp.successors(m, a) {
                match members.binary_search(&s2) {
                    Ok(j) => row[j] += p,
                    Err(_) => row[sink] += p,
                }
            }
        }
    }
    for a in 0..na {
        transitions[(sink * na + a) * n + sink] = 1.0;
    }
    let rewards = mdp.rewards.as_ref().map(|r| {
        let mut local = vec![0.0; n * n];
        for (i, &m) in members.iter().enumerate() {
            for (j, &g) in members.iter().enumerate() {
                local[i * n + j] = r[m * mdp.num_states() + g];
            }
        }
        local
    });
    let local = TabularMdp::new(n, na, transitions, rewards)?;
    Ok(KBallMdp { root, radius: k, members, mdp: local })
}

/// A witness relation for dynamics bisimilarity: pairs `(x, x')` with `x`
/// a state of the first MDP and `x'` of the second.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BisimRelation {
    pub pairs: Vec<(usize, usize)>,
}

impl BisimRelation {
    /// True when every state of both MDPs appears in at least one pair.
    pub fn is_total(&self, num_states_1: usize, num_states_2: usize) -> bool {
        let left: BTreeSet<usize> = self.pairs.iter().map(|&(x, _)| x).collect();
        let right: BTreeSet<usize> = self.pairs.iter().map(|&(_, y)| y).collect();
        left.len() == num_states_1
            && right.len() == num_states_2
            && left.iter().all(|&x| x < num_states_1)
            && right.iter().all(|&y| y < num_states_2)
    }
}

/// Decides dynamics bisimilarity between two MDPs over the same action set.
/// Returns a witness relation when one exists, `None` otherwise.
///
/// Searches for a partition of the disjoint union of the state spaces into
/// two-sided blocks with uniform inter-block transition values (see the
/// module docs). Signature refinement first narrows which states may share a
/// block; a backtracking merge search with forced-successor propagation then
/// decides existence exactly.
pub fn check_dynamics_bisimilar(
    m1: &TabularMdp,
    m2: &TabularMdp,
) -> Result<Option<BisimRelation>> {
    if m1.num_actions() != m2.num_actions() {
        return Err(Error::Unsupported(format!(
            "bisimilarity is only defined over a shared action set ({} vs {} actions)",
            m1.num_actions(),
            m2.num_actions()
        )));
    }
    let search = BisimSearch::new(m1, m2);
    let relation = search.run();
    #[cfg(debug_assertions)]
    if let Some(rel) = &relation {
        verify_relation(m1, m2, rel).expect("search produced an invalid witness");
    }
    Ok(relation)
}

struct BisimSearch<'a> {
    m1: &'a TabularMdp,
    m2: &'a TabularMdp,
    n1: usize,
    n: usize,
    na: usize,
    /// Same-side pairs with identical rows (prerequisite to share a block).
    row_identical: Vec<Vec<bool>>,
    /// Cross pairs with equal per-action positive-value multisets
    /// (prerequisite to share a block).
    compatible: Vec<Vec<bool>>,
    /// Refinement block per union state; valid blocks never span these.
    refined: Vec<usize>,
}

/// Block assignment during the search: `cluster[u]` is the current block id
/// of union state `u`, blocks are member lists.
#[derive(Clone)]
struct Clusters {
    of: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl<'a> BisimSearch<'a> {
    fn new(m1: &'a TabularMdp, m2: &'a TabularMdp) -> Self {
        let n1 = m1.num_states();
        let n = n1 + m2.num_states();
        let na = m1.num_actions();
        let mut search = BisimSearch {
            m1,
            m2,
            n1,
            n,
            na,
            row_identical: vec![vec![false; n]; n],
            compatible: vec![vec![false; n]; n],
            refined: vec![0; n],
        };
        for u in 0..n {
            for v in 0..n {
                if (u < n1) == (v < n1) {
                    search.row_identical[u][v] = (0..na).all(|a| {
                        search
                            .row(u, a)
                            .iter()
                            .zip(search.row(v, a))
                            .all(|(p, q)| (p - q).abs() <= BISIM_TOLERANCE)
                    });
                } else {
                    search.compatible[u][v] = (0..na).all(|a| {
                        let mut pu = positive_sorted(search.row(u, a));
                        let pv = positive_sorted(search.row(v, a));
                        pu.len() == pv.len()
                            && pu
                                .drain(..)
                                .zip(pv)
                                .all(|(p, q)| (p - q).abs() <= BISIM_TOLERANCE)
                    });
                }
            }
        }
        search.refine();
        search
    }

    fn side(&self, u: usize) -> bool {
        u < self.n1
    }

    fn row(&self, u: usize, a: usize) -> &[f64] {
        if u < self.n1 {
            self.m1.row(u, a)
        } else {
            self.m2.row(u - self.n1, a)
        }
    }

    /// Union ids of state `u`'s own MDP.
    fn own_side(&self, u: usize) -> std::ops::Range<usize> {
        if u < self.n1 {
            0..self.n1
        } else {
            self.n1..self.n
        }
    }

    /// Iterated signature refinement. States that can share a valid block
    /// always have equal per-action multisets of positive transition values
    /// into every current block (value uniformity makes the values match
    /// pairwise; the size clause makes the multiplicities match), so
    /// splitting by that signature is sound and narrows the search.
    fn refine(&mut self) {
        let mut num_blocks = 1;
        loop {
            let sig = |u: usize| -> Vec<Vec<Vec<f64>>> {
                (0..self.na)
                    .map(|a| {
                        let mut per_block = vec![Vec::new(); num_blocks];
                        let base = self.own_side(u).start;
                        for (w, &p) in self.row(u, a).iter().enumerate() {
                            if p > 0.0 {
                                per_block[self.refined[base + w]].push(p);
                            }
                        }
                        for vals in &mut per_block {
                            vals.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
                        }
                        per_block
                    })
                    .collect()
            };
            let sigs: Vec<_> = (0..self.n).map(sig).collect();
            let sig_eq = |a: &Vec<Vec<Vec<f64>>>, b: &Vec<Vec<Vec<f64>>>| -> bool {
                a.iter().zip(b).all(|(xa, xb)| {
                    xa.iter().zip(xb).all(|(va, vb)| {
                        va.len() == vb.len()
                            && va.iter().zip(vb).all(|(p, q)| (p - q).abs() <= BISIM_TOLERANCE)
                    })
                })
            };
            let mut new_ids = vec![usize::MAX; self.n];
            let mut reps: Vec<(usize, usize)> = Vec::new();
            for u in 0..self.n {
                let found = reps
                    .iter()
                    .position(|&(b, r)| b == self.refined[u] && sig_eq(&sigs[u], &sigs[r]));
                match found {
                    Some(b) => new_ids[u] = b,
                    None => {
                        new_ids[u] = reps.len();
                        reps.push((self.refined[u], u));
                    }
                }
            }
            let stable = reps.len() == num_blocks;
            num_blocks = reps.len();
            self.refined = new_ids;
            if stable {
                break;
            }
        }
    }

    fn run(&self) -> Option<BisimRelation> {
        // Every state needs at least one compatible partner to end up in a
        // two-sided block.
        for u in 0..self.n {
            let found = (0..self.n)
                .any(|v| (u < self.n1) != (v < self.n1) && self.compatible[u][v]);
            if !found {
                return None;
            }
        }
        let initial = Clusters {
            of: (0..self.n).collect(),
            members: (0..self.n).map(|u| vec![u]).collect(),
        };
        let solution = self.search(initial)?;
        let mut pairs = Vec::new();
        for members in &solution.members {
            for &x in members.iter().filter(|&&u| u < self.n1) {
                for &y in members.iter().filter(|&&u| u >= self.n1) {
                    pairs.push((x, y - self.n1));
                }
            }
        }
        pairs.sort_unstable();
        Some(BisimRelation { pairs })
    }

    /// Merges the blocks of `u` and `v` in place, checking pairwise
    /// prerequisites and propagating forced merges: when a merged cross pair
    /// (x, x') has a positive value `p` under some action with exactly one
    /// successor carrying `p` on each side, those successors must share a
    /// block too. Returns false when the merge is contradictory.
    fn merge(&self, c: &mut Clusters, u: usize, v: usize) -> bool {
        let mut queue = vec![(u, v)];
        while let Some((a, b)) = queue.pop() {
            let (ca, cb) = (c.of[a], c.of[b]);
            if ca == cb {
                continue;
            }
            // Pairwise prerequisites across the two blocks.
            for &x in &c.members[ca] {
                for &y in &c.members[cb] {
                    let ok = if self.side(x) == self.side(y) {
                        self.row_identical[x][y]
                    } else {
                        self.compatible[x][y]
                    };
                    if !ok || self.refined[x] != self.refined[y] {
                        return false;
                    }
                }
            }
            let (keep, drop) = if ca < cb { (ca, cb) } else { (cb, ca) };
            let moved = std::mem::take(&mut c.members[drop]);
            for &w in &moved {
                c.of[w] = keep;
            }
            c.members[keep].extend(moved);
            // Forced successors for every cross pair in the merged block.
            let block = c.members[keep].clone();
            for &x in block.iter().filter(|&&w| self.side(w)) {
                for &y in block.iter().filter(|&&w| !self.side(w)) {
                    for act in 0..self.na {
                        if !self.force_successors(c, x, y, act, &mut queue)
                            || !self.force_successors(c, y, x, act, &mut queue)
                        {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }

    /// For each positive value in `x`'s row: `x2` must attain it somewhere
    /// (else the candidate block is contradictory); when both sides attain
    /// it at a unique successor, those successors are forced together.
    fn force_successors(
        &self,
        c: &mut Clusters,
        x: usize,
        x2: usize,
        act: usize,
        queue: &mut Vec<(usize, usize)>,
    ) -> bool {
        let base_x = self.own_side(x).start;
        let base_x2 = self.own_side(x2).start;
        let row_x = self.row(x, act);
        let row_x2 = self.row(x2, act);
        for (w, &p) in row_x.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            let own_matches =
                row_x.iter().filter(|&&q| q > 0.0 && (p - q).abs() <= BISIM_TOLERANCE).count();
            let mut other = row_x2
                .iter()
                .enumerate()
                .filter(|&(_, &q)| q > 0.0 && (p - q).abs() <= BISIM_TOLERANCE);
            let first = other.next();
            match (first, other.next()) {
                (None, _) => return false,
                (Some((w2, _)), None) if own_matches == 1 => {
                    if c.of[base_x + w] != c.of[base_x2 + w2] {
                        queue.push((base_x + w, base_x2 + w2));
                    }
                }
                _ => {}
            }
        }
        true
    }

    fn search(&self, c: Clusters) -> Option<Clusters> {
        // Pick the first block still missing a side, preferring the one
        // holding the smallest state id (deterministic order).
        let lonely = (0..self.n)
            .find(|&u| {
                let members = &c.members[c.of[u]];
                let has_1 = members.iter().any(|&w| w < self.n1);
                let has_2 = members.iter().any(|&w| w >= self.n1);
                !(has_1 && has_2)
            });
        let u = match lonely {
            Some(u) => u,
            None => return self.validate(&c).then_some(c),
        };
        for v in 0..self.n {
            if (v < self.n1) == (u < self.n1)
                || !self.compatible[u][v]
                || self.refined[u] != self.refined[v]
            {
                continue;
            }
            let mut next = c.clone();
            if self.merge(&mut next, u, v) {
                if let Some(done) = self.search(next) {
                    return Some(done);
                }
            }
        }
        None
    }

    /// Full condition check on a complete assignment: between any ordered
    /// pair of blocks, under each action, every member-to-member transition
    /// (within each side's own MDP) carries one common value; blocks
    /// receiving positive mass have equal per-side sizes.
    fn validate(&self, c: &Clusters) -> bool {
        let blocks: Vec<&Vec<usize>> = c.members.iter().filter(|m| !m.is_empty()).collect();
        for from in &blocks {
            for to in &blocks {
                let size1 = to.iter().filter(|&&w| w < self.n1).count();
                let size2 = to.len() - size1;
                for act in 0..self.na {
                    let mut value: Option<f64> = None;
                    for &u in from.iter() {
                        let base = self.own_side(u).start;
                        for &w in to.iter().filter(|&&w| self.side(w) == self.side(u)) {
                            let p = self.row(u, act)[w - base];
                            match value {
                                None => value = Some(p),
                                Some(v) if (v - p).abs() <= BISIM_TOLERANCE => {}
                                Some(_) => return false,
                            }
                        }
                    }
                    if value.unwrap_or(0.0) > BISIM_TOLERANCE && size1 != size2 {
                        return false;
                    }
                }
            }
        }
        true
    }
}

fn positive_sorted(row: &[f64]) -> Vec<f64> {
    let mut vals: Vec<f64> = row.iter().copied().filter(|&p| p > 0.0).collect();
    vals.sort_by(|x, y| x.partial_cmp(y).expect("probabilities are finite"));
    vals
}

/// Checks a candidate relation against the definition directly: totality,
/// successor-value matching (related pairs carry equal probability to
/// related successor pairs), and block-mass equality over the classes
/// induced by the relation, all within [`BISIM_TOLERANCE`]. Independent of
/// how the relation was produced.
pub fn verify_relation(m1: &TabularMdp, m2: &TabularMdp, rel: &BisimRelation) -> Result<()> {
    if m1.num_actions() != m2.num_actions() {
        return Err(Error::Unsupported(format!(
            "bisimilarity is only defined over a shared action set ({} vs {} actions)",
            m1.num_actions(),
            m2.num_actions()
        )));
    }
    let (n1, n2, na) = (m1.num_states(), m2.num_states(), m1.num_actions());
    for &(x, y) in &rel.pairs {
        if x >= n1 || y >= n2 {
            return Err(Error::InvalidArgument(format!(
                "relation pair ({x}, {y}) is out of range"
            )));
        }
    }
    if !rel.is_total(n1, n2) {
        return Err(Error::InvalidArgument("relation is not total on both sides".into()));
    }

    // Classes: connected components of the bipartite graph formed by the
    // pairs. `class1[x]` / `class2[y]` give each state's component.
    let mut class1 = vec![usize::MAX; n1];
    let mut class2 = vec![usize::MAX; n2];
    let mut adj1: Vec<Vec<usize>> = vec![Vec::new(); n1];
    let mut adj2: Vec<Vec<usize>> = vec![Vec::new(); n2];
    for &(x, y) in &rel.pairs {
        adj1[x].push(y);
        adj2[y].push(x);
    }
    let mut num_classes = 0;
    for start in 0..n1 {
        if class1[start] != usize::MAX {
            continue;
        }
        let c = num_classes;
        num_classes += 1;
        let mut stack = vec![(true, start)];
        class1[start] = c;
        while let Some((left, u)) = stack.pop() {
            let nexts: &[usize] = if left { &adj1[u] } else { &adj2[u] };
            for &v in nexts {
                let mark = if left { &mut class2[v] } else { &mut class1[v] };
                if *mark == usize::MAX {
                    *mark = c;
                    stack.push((!left, v));
                }
            }
        }
    }

    let masses = |row: &[f64], class: &[usize]| -> Vec<f64> {
        let mut m = vec![0.0; num_classes];
        for (s2, &p) in row.iter().enumerate() {
            if p > 0.0 {
                m[class[s2]] += p;
            }
        }
        m
    };
    for &(x, y) in &rel.pairs {
        for a in 0..na {
            let r1 = m1.row(x, a);
            let r2 = m2.row(y, a);
            // Successor-value matching over related successor pairs.
            for &(sy, sy2) in &rel.pairs {
                if (r1[sy] - r2[sy2]).abs() > BISIM_TOLERANCE {
                    return Err(Error::InvalidArgument(format!(
                        "pairs ({x}, {y}) and ({sy}, {sy2}), action {a}: \
                         probabilities {} vs {} differ",
                        r1[sy], r2[sy2]
                    )));
                }
            }
            // Block masses over the induced classes.
            let mx = masses(r1, &class1);
            let my = masses(r2, &class2);
            for c in 0..num_classes {
                if (mx[c] - my[c]).abs() > BISIM_TOLERANCE {
                    return Err(Error::InvalidArgument(format!(
                        "pair ({x}, {y}), action {a}: class {c} mass {} vs {}",
                        mx[c], my[c]
                    )));
                }
            }
        }
    }
    Ok(())
}
