//! Brute-force oracles and reference evaluators used by the test suites.
//!
//! Everything here re-derives results from first principles, deliberately
//! avoiding the production code paths it is used to check: reachability by
//! enumerating action sequences, bisimilarity by exhaustive search over
//! candidate relations, and gradients by finite differences of an
//! independent f64 forward pass.
//!
//! Compiled only for tests (`cfg(test)`) or under the `testkit` feature,
//! which the acceptance suite enables.

use std::collections::BTreeSet;

use rand::Rng as _;

use crate::carl::{ablation_loss, AblationVariant, CarlModel};
use crate::data::Segment;
use crate::error::Result;
use crate::mdp::{TabularMdp, BISIM_TOLERANCE};
use crate::nn::{Matrix, Mlp};
use crate::util::Rng;

/// States reachable from `root` in at most `k` steps, found by walking every
/// action sequence of length `k` and accumulating the support of the state
/// distribution after each prefix. Exponential in `k`; fine for `k <= 5`.
pub fn k_ball_bruteforce(mdp: &TabularMdp, root: usize, k: usize) -> BTreeSet<usize> {
    fn recurse(
        mdp: &TabularMdp,
        support: &BTreeSet<usize>,
        depth_left: usize,
        acc: &mut BTreeSet<usize>,
    ) {
        acc.extend(support.iter().copied());
        if depth_left == 0 {
            return;
        }
        for a in 0..mdp.num_actions() {
            let next: BTreeSet<usize> =
                support.iter().flat_map(|&s| mdp.successors(s, a).map(|(s2, _)| s2)).collect();
            recurse(mdp, &next, depth_left - 1, acc);
        }
    }
    let mut acc = BTreeSet::new();
    recurse(mdp, &BTreeSet::from([root]), k, &mut acc);
    acc
}

/// Decides dynamics bisimilarity by exhaustive search over all partitions of
/// the disjoint union of the state spaces into blocks, accepting when some
/// partition has (a) both sides represented in every block, (b) one common
/// transition value between each ordered block pair per action, and (c)
/// equal per-side block sizes wherever a block receives positive mass.
/// Exponential; intended for at most ~6 states per side.
pub fn bisim_exhaustive(m1: &TabularMdp, m2: &TabularMdp) -> bool {
    assert_eq!(m1.num_actions(), m2.num_actions(), "oracle requires a shared action set");
    let na = m1.num_actions();
    let n1 = m1.num_states();
    let n = n1 + m2.num_states();
    let row_of = |u: usize, a: usize| -> &[f64] {
        if u < n1 {
            m1.row(u, a)
        } else {
            m2.row(u - n1, a)
        }
    };
    let base_of = |u: usize| if u < n1 { 0 } else { n1 };

    // Sharing a block forces identical rows on same-side pairs and equal
    // positive-value multisets on cross pairs; precompute both as pruning.
    let mut may_share = vec![vec![false; n]; n];
    for u in 0..n {
        for v in 0..n {
            may_share[u][v] = if (u < n1) == (v < n1) {
                (0..na).all(|a| {
                    row_of(u, a)
                        .iter()
                        .zip(row_of(v, a))
                        .all(|(p, q)| (p - q).abs() <= BISIM_TOLERANCE)
                })
            } else {
                (0..na).all(|a| {
                    let mut pu: Vec<f64> =
                        row_of(u, a).iter().copied().filter(|&p| p > 0.0).collect();
                    let mut pv: Vec<f64> =
                        row_of(v, a).iter().copied().filter(|&p| p > 0.0).collect();
                    pu.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
                    pv.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
                    pu.len() == pv.len()
                        && pu.iter().zip(&pv).all(|(p, q)| (p - q).abs() <= BISIM_TOLERANCE)
                })
            };
        }
    }
    if (0..n).any(|u| !(0..n).any(|v| (u < n1) != (v < n1) && may_share[u][v])) {
        return false;
    }

    // Full condition check on a complete partition.
    let candidate_ok = |members: &Vec<Vec<usize>>| -> bool {
        for to in members {
            let size1 = to.iter().filter(|&&w| w < n1).count();
            if size1 == 0 || size1 == to.len() {
                return false;
            }
            let size2 = to.len() - size1;
            for from in members {
                for a in 0..na {
                    let mut value: Option<f64> = None;
                    for &u in from {
                        for &w in to.iter().filter(|&&w| (w < n1) == (u < n1)) {
                            let p = row_of(u, a)[w - base_of(w)];
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
    };

    // Restricted-growth enumeration of partitions of the union, pruned by
    // the pairwise prerequisites and block-coverage feasibility.
    fn enumerate(
        u: usize,
        n: usize,
        n1: usize,
        may_share: &[Vec<bool>],
        members: &mut Vec<Vec<usize>>,
        candidate_ok: &dyn Fn(&Vec<Vec<usize>>) -> bool,
    ) -> bool {
        if u == n {
            return candidate_ok(members);
        }
        let max_blocks = n1.min(n - n1);
        for b in 0..=members.len() {
            if b == members.len() {
                // Every block of a valid partition contains a first-side
                // state, and those are assigned first, so a block opened by
                // a second-side state can never be completed.
                if members.len() >= max_blocks || u >= n1 {
                    break;
                }
            } else if !members[b].iter().all(|&v| may_share[u][v]) {
                continue;
            }
            if b == members.len() {
                members.push(Vec::new());
            }
            members[b].push(u);
            // Once only second-side states remain, every block still missing
            // a second-side member needs one of them.
            let feasible = u + 1 < n1
                || members.iter().filter(|m| m.iter().all(|&v| v < n1)).count() <= n - (u + 1);
            if feasible && enumerate(u + 1, n, n1, may_share, members, candidate_ok) {
                return true;
            }
            members[b].pop();
            if members[b].is_empty() {
                members.pop();
            }
        }
        false
    }

    enumerate(0, n, n1, &may_share, &mut Vec::new(), &candidate_ok)
}

/// Relabels states by `perm` (state `s` becomes `perm[s]`), producing an MDP
/// that is dynamics-bisimilar to the input by construction.
pub fn permute_states(m: &TabularMdp, perm: &[usize]) -> TabularMdp {
    assert_eq!(perm.len(), m.num_states());
    let n = m.num_states();
    let na = m.num_actions();
    let mut transitions = vec![0.0; n * na * n];
    for s in 0..n {
        for a in 0..na {
            for (s2, p) in m.successors(s, a) {
                transitions[(perm[s] * na + a) * n + perm[s2]] = p;
            }
        }
    }
    let rewards = (0..n).next().and_then(|_| {
        m.reward(0, 0).map(|_| {
            let mut r = vec![0.0; n * n];
            for s in 0..n {
                for g in 0..n {
                    r[perm[s] * n + perm[g]] = m.reward(s, g).expect("rewards present");
                }
            }
            r
        })
    });
    TabularMdp::new(n, na, transitions, rewards).expect("valid by construction")
}

/// Random deterministic MDP: each (state, action) maps to a uniform state.
pub fn random_deterministic_mdp(rng: &mut Rng, num_states: usize, num_actions: usize) -> TabularMdp {
    let table: Vec<usize> =
        (0..num_states * num_actions).map(|_| rng.gen_range(0..num_states)).collect();
    TabularMdp::deterministic(num_states, num_actions, |s, a| table[s * num_actions + a])
        .expect("valid by construction")
}

/// Random stochastic MDP with rows summing to 1 exactly: each row has a
/// random support of `2..=max_support` states with normalized weights, the
/// last one set to the exact complement.
pub fn random_stochastic_mdp(
    rng: &mut Rng,
    num_states: usize,
    num_actions: usize,
    max_support: usize,
) -> TabularMdp {
    let max_support = max_support.clamp(2, num_states.max(2)).min(num_states);
    let mut transitions = vec![0.0; num_states * num_actions * num_states];
    for s in 0..num_states {
        for a in 0..num_actions {
            let sup = if num_states == 1 { 1 } else { rng.gen_range(2..=max_support) };
            let mut targets = BTreeSet::new();
            while targets.len() < sup {
                targets.insert(rng.gen_range(0..num_states));
            }
            let weights: Vec<f64> = (0..sup).map(|_| rng.gen_range(0.05..1.0)).collect();
            let total: f64 = weights.iter().sum();
            let row = &mut transitions[(s * num_actions + a) * num_states..][..num_states];
            let mut acc = 0.0;
            for (i, &t) in targets.iter().enumerate() {
                let p = if i + 1 == sup { 1.0 - acc } else { weights[i] / total };
                row[t] = p;
                acc += p;
            }
        }
    }
    TabularMdp::new(num_states, num_actions, transitions, None).expect("valid by construction")
}

/// f64 twin of [`crate::nn::gelu`].
pub fn shadow_gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// f64 twin of the MLP forward pass over the canonical parameter flattening
/// (per layer: weights row-major, then biases). `input` is batch-major with
/// `batch * widths[0]` entries; the result has `batch * widths.last()`.
pub fn shadow_mlp_forward(widths: &[usize], params: &[f64], input: &[f64], batch: usize) -> Vec<f64> {
    assert_eq!(input.len(), batch * widths[0]);
    let mut a = input.to_vec();
    let mut at = 0;
    for l in 0..widths.len() - 1 {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let w = &params[at..at + fan_in * fan_out];
        at += fan_in * fan_out;
        let b = &params[at..at + fan_out];
        at += fan_out;
        let mut z = vec![0.0f64; batch * fan_out];
        for r in 0..batch {
            let row = &a[r * fan_in..(r + 1) * fan_in];
            for j in 0..fan_out {
                let mut acc = b[j];
                for (x, wv) in row.iter().zip(&w[j * fan_in..(j + 1) * fan_in]) {
                    acc += x * wv;
                }
                z[r * fan_out + j] = acc;
            }
        }
        if l + 2 < widths.len() {
            z.iter_mut().for_each(|v| *v = shadow_gelu(*v));
        }
        a = z;
    }
    assert_eq!(at, params.len(), "parameter flattening mismatch");
    a
}

/// Relative error with an absolute escape hatch near zero: differences below
/// 1e-6 count as zero, otherwise |a-b| / max(|a|, |b|).
pub fn rel_error(analytic: f64, fd: f64) -> f64 {
    let diff = (analytic - fd).abs();
    if diff <= 1e-6 {
        0.0
    } else {
        diff / analytic.abs().max(fd.abs())
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Human-readable location of the worst entry.
    pub worst_param: String,
}

impl GradCheckReport {
    pub fn empty() -> GradCheckReport {
        GradCheckReport { max_rel_error: 0.0, worst_param: "none".into() }
    }

    pub fn absorb(&mut self, rel: f64, location: impl FnOnce() -> String) {
        if rel > self.max_rel_error {
            self.max_rel_error = rel;
            self.worst_param = location();
        }
    }
}

/// Central finite differences (h = 1e-4) of a random linear projection of the
/// network output, taken on the f64 shadow forward, against the production
/// backward pass. Checks every parameter and every input entry.
pub fn mlp_grad_check(mlp: &Mlp, batch: usize, rng: &mut Rng) -> Result<GradCheckReport> {
    let widths = mlp.widths().to_vec();
    let input_f32: Vec<f32> =
        (0..batch * mlp.in_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let proj: Vec<f32> =
        (0..batch * mlp.out_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let input = Matrix::from_vec(batch, mlp.in_dim(), input_f32.clone())?;
    let (_, cache) = mlp.forward(&input)?;
    let out_grad = Matrix::from_vec(batch, mlp.out_dim(), proj.clone())?;
    let (grad, input_grad) = mlp.backward(&cache, &out_grad)?;
    let analytic = grad.flatten();

    let params: Vec<f64> = mlp.flatten_params().iter().map(|&p| p as f64).collect();
    let shadow_input: Vec<f64> = input_f32.iter().map(|&v| v as f64).collect();
    let loss = |params: &[f64], input: &[f64]| -> f64 {
        let out = shadow_mlp_forward(&widths, params, input, batch);
        out.iter().zip(&proj).map(|(o, &r)| o * r as f64).sum()
    };
    const H: f64 = 1e-4;

    let mut report = GradCheckReport::empty();
    let mut p = params.clone();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + H;
        let up = loss(&p, &shadow_input);
        p[i] = orig - H;
        let down = loss(&p, &shadow_input);
        p[i] = orig;
        let fd = (up - down) / (2.0 * H);
        report.absorb(rel_error(analytic[i] as f64, fd), || format!("param {i}"));
    }
    let mut x = shadow_input.clone();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + H;
        let up = loss(&params, &x);
        x[i] = orig - H;
        let down = loss(&params, &x);
        x[i] = orig;
        let fd = (up - down) / (2.0 * H);
        let a = input_grad.get(i / mlp.in_dim(), i % mlp.in_dim()) as f64;
        report.absorb(rel_error(a, fd), || format!("input {i}"));
    }
    Ok(report)
}

/// Row-normalizes `b` rows of width `d`; panics on a zero row (oracle inputs
/// are required to be nonzero).
pub fn shadow_normalize_rows(raw: &[f64], b: usize, d: usize) -> Vec<f64> {
    assert_eq!(raw.len(), b * d);
    let mut out = raw.to_vec();
    for i in 0..b {
        let row = &mut out[i * d..(i + 1) * d];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 0.0, "zero-norm oracle row");
        row.iter_mut().for_each(|x| *x /= norm);
    }
    out
}

/// f64 twin of the batch InfoNCE loss on raw embeddings: normalize rows,
/// cosine logits over temperature, mean cross entropy of the diagonal with
/// max-subtracted log-sum-exp.
pub fn shadow_infonce(u_raw: &[f64], v_raw: &[f64], b: usize, d: usize, tau: f64) -> f64 {
    let u = shadow_normalize_rows(u_raw, b, d);
    let v = shadow_normalize_rows(v_raw, b, d);
    let mut loss = 0.0;
    for i in 0..b {
        let logits: Vec<f64> = (0..b)
            .map(|j| {
                u[i * d..(i + 1) * d]
                    .iter()
                    .zip(&v[j * d..(j + 1) * d])
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
                    / tau
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - logits[i];
    }
    loss / b as f64
}

/// Production InfoNCE kernel gradients against central differences of the
/// shadow loss, over every raw embedding entry on both sides.
pub fn infonce_kernel_grad_check(u: &Matrix, v: &Matrix, tau: f64) -> GradCheckReport {
    let (b, d) = (u.rows(), u.cols());
    let nce = crate::carl::infonce_from_embeddings(u, v, tau).expect("valid kernel input");
    let uf: Vec<f64> = u.data().iter().map(|&x| x as f64).collect();
    let vf: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    const H: f64 = 1e-4;
    let mut report = GradCheckReport::empty();
    let mut side = |raw: &[f64], other: &[f64], is_u: bool, grad: &Matrix| {
        let mut x = raw.to_vec();
        for i in 0..x.len() {
            let orig = x[i];
            x[i] = orig + H;
            let up = if is_u {
                shadow_infonce(&x, other, b, d, tau)
            } else {
                shadow_infonce(other, &x, b, d, tau)
            };
            x[i] = orig - H;
            let down = if is_u {
                shadow_infonce(&x, other, b, d, tau)
            } else {
                shadow_infonce(other, &x, b, d, tau)
            };
            x[i] = orig;
            let fd = (up - down) / (2.0 * H);
            let a = grad.get(i / d, i % d) as f64;
            report.absorb(rel_error(a, fd), || {
                format!("{} embedding {i}", if is_u { "state-goal" } else { "action" })
            });
        }
    };
    side(&uf, &vf, true, &nce.grad_u);
    side(&vf, &uf, false, &nce.grad_v);
    report
}

/// End-to-end gradient check of a variant's objective: production backward
/// through both networks against central differences of an f64 shadow of the
/// whole pipeline (encoders, normalization, contrast or regression).
pub fn carl_grad_check(model: &CarlModel, segments: &[Segment]) -> Result<GradCheckReport> {
    let b = segments.len();
    let d = model.d;
    let phi_in: Vec<f64> = segments
        .iter()
        .flat_map(|s| s.state.iter().chain(s.goal.iter()).map(|&x| x as f64))
        .collect();
    let act_cols = match model.variant {
        AblationVariant::SingleActionCarl | AblationVariant::SingleActionPrediction => {
            model.action_dim
        }
        _ => model.k.div_ceil(model.stride) * model.action_dim,
    };
    let act: Vec<f64> = segments
        .iter()
        .flat_map(|s| s.action_seq[..act_cols].iter().map(|&x| x as f64))
        .collect();

    let (_, grads) = ablation_loss(model, segments)?;
    let analytic_phi = grads.phi.flatten();
    let analytic_other = grads.psi.or(grads.xi).expect("every variant has a second net").flatten();

    let phi_widths = model.phi.widths().to_vec();
    let other_net = model.psi.as_ref().or(model.xi.as_ref()).expect("second net");
    let other_widths = other_net.widths().to_vec();
    let phi_params: Vec<f64> = model.phi.flatten_params().iter().map(|&p| p as f64).collect();
    let other_params: Vec<f64> = other_net.flatten_params().iter().map(|&p| p as f64).collect();

    let contrastive = model.variant.is_contrastive();
    let tau = model.tau;
    let loss = |pp: &[f64], op: &[f64]| -> f64 {
        let u = shadow_mlp_forward(&phi_widths, pp, &phi_in, b);
        if contrastive {
            let v = shadow_mlp_forward(&other_widths, op, &act, b);
            shadow_infonce(&u, &v, b, d, tau)
        } else {
            let e = shadow_normalize_rows(&u, b, d);
            let pred = shadow_mlp_forward(&other_widths, op, &e, b);
            let denom = (b * act_cols) as f64;
            pred.iter().zip(&act).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / denom
        }
    };

    const H: f64 = 1e-4;
    let mut report = GradCheckReport::empty();
    let mut pp = phi_params.clone();
    for i in 0..pp.len() {
        let orig = pp[i];
        pp[i] = orig + H;
        let up = loss(&pp, &other_params);
        pp[i] = orig - H;
        let down = loss(&pp, &other_params);
        pp[i] = orig;
        let fd = (up - down) / (2.0 * H);
        report.absorb(rel_error(analytic_phi[i] as f64, fd), || format!("phi param {i}"));
    }
    let mut op = other_params.clone();
    for i in 0..op.len() {
        let orig = op[i];
        op[i] = orig + H;
        let up = loss(&phi_params, &op);
        op[i] = orig - H;
        let down = loss(&phi_params, &op);
        op[i] = orig;
        let fd = (up - down) / (2.0 * H);
        report.absorb(rel_error(analytic_other[i] as f64, fd), || format!("second-net param {i}"));
    }
    Ok(report)
}

/// Production expectile-loss backward against central differences of its
/// f64 shadow. Callers should keep residuals away from the expectile kink;
/// finite differences straddling it are meaningless.
pub fn expectile_grad_check(
    value: &Mlp,
    inputs: &Matrix,
    targets: &[f64],
    kappa: f64,
) -> Result<GradCheckReport> {
    let out = crate::hrl::expectile_value_loss(value, inputs, targets, kappa)?;
    let analytic = out.grad.flatten();
    let widths = value.widths().to_vec();
    let input: Vec<f64> = inputs.data().iter().map(|&x| x as f64).collect();
    let b = inputs.rows();
    let loss = |params: &[f64]| -> f64 {
        let preds = shadow_mlp_forward(&widths, params, &input, b);
        let mut acc = 0.0;
        for i in 0..b {
            let u = targets[i] - preds[i];
            let w = if u < 0.0 { 1.0 - kappa } else { kappa };
            acc += w * u * u;
        }
        acc / b as f64
    };
    Ok(fd_over_params(value, &analytic, loss))
}

/// Production weighted-MSE backward against its f64 shadow.
pub fn weighted_mse_grad_check(
    net: &Mlp,
    inputs: &Matrix,
    targets: &Matrix,
    weights: &[f64],
) -> Result<GradCheckReport> {
    let out = crate::hrl::weighted_mse_loss(net, inputs, targets, weights)?;
    let analytic = out.grad.flatten();
    let widths = net.widths().to_vec();
    let input: Vec<f64> = inputs.data().iter().map(|&x| x as f64).collect();
    let target: Vec<f64> = targets.data().iter().map(|&x| x as f64).collect();
    let (b, cols) = (inputs.rows(), targets.cols());
    let loss = |params: &[f64]| -> f64 {
        let preds = shadow_mlp_forward(&widths, params, &input, b);
        let mut acc = 0.0;
        for i in 0..b {
            for c in 0..cols {
                let diff = preds[i * cols + c] - target[i * cols + c];
                acc += weights[i] * diff * diff;
            }
        }
        acc / (b * cols) as f64
    };
    Ok(fd_over_params(net, &analytic, loss))
}

/// Production weighted cross-entropy backward against its f64 shadow.
pub fn weighted_ce_grad_check(
    net: &Mlp,
    inputs: &Matrix,
    labels: &[usize],
    weights: &[f64],
) -> Result<GradCheckReport> {
    let out = crate::hrl::weighted_ce_loss(net, inputs, labels, weights)?;
    let analytic = out.grad.flatten();
    let widths = net.widths().to_vec();
    let input: Vec<f64> = inputs.data().iter().map(|&x| x as f64).collect();
    let (b, classes) = (inputs.rows(), net.out_dim());
    let loss = |params: &[f64]| -> f64 {
        let logits = shadow_mlp_forward(&widths, params, &input, b);
        let mut acc = 0.0;
        for i in 0..b {
            let row = &logits[i * classes..(i + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            acc += weights[i] * (lse - row[labels[i]]);
        }
        acc / b as f64
    };
    Ok(fd_over_params(net, &analytic, loss))
}

/// Central differences of `loss` over every parameter of `net`, compared
/// entrywise against `analytic`.
fn fd_over_params(net: &Mlp, analytic: &[f32], loss: impl Fn(&[f64]) -> f64) -> GradCheckReport {
    const H: f64 = 1e-4;
    let mut params: Vec<f64> = net.flatten_params().iter().map(|&p| p as f64).collect();
    let mut report = GradCheckReport::empty();
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + H;
        let up = loss(&params);
        params[i] = orig - H;
        let down = loss(&params);
        params[i] = orig;
        let fd = (up - down) / (2.0 * H);
        report.absorb(rel_error(analytic[i] as f64, fd), || format!("param {i}"));
    }
    report
}
