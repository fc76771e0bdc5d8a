//! Contrastive representation learning over k-step segments: a state-goal
//! encoder φ and an action-sequence encoder ψ trained so that matched
//! (φ, ψ) pairs score above in-batch mismatches, plus the ablation variants
//! that swap the sequence for its first action or the contrast for direct
//! regression.
//!
//! The score is cosine similarity — both encoder outputs are L2-normalized,
//! and the same normalized geometry is what every downstream consumer sees.
//! All loss math runs in f64 and hands f32 gradients back to the networks.

use crate::data::{Dataset, SamplerConfig, Segment, SegmentSampler};
use crate::error::{Error, Result};
use crate::nn::{adam_step, load_mlp, save_mlp, AdamState, Grad, Matrix, Mlp};
use crate::util::{derive_seed, rng_from};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Norms below this are treated as zero embeddings (an error, not a clamp).
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    /// Contrast φ(s, g) against ψ of the whole k-step action sequence.
    #[serde(rename = "carl")]
    Carl,
    /// Contrast against ψ of the first action only.
    #[serde(rename = "sa-carl")]
    SingleActionCarl,
    /// Regress ξ(φ(s, g)) onto the whole action sequence.
    #[serde(rename = "ma-pred")]
    MultiActionPrediction,
    /// Regress onto the first action only.
    #[serde(rename = "sa-pred")]
    SingleActionPrediction,
}

impl AblationVariant {
    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Carl => "carl",
            AblationVariant::SingleActionCarl => "sa-carl",
            AblationVariant::MultiActionPrediction => "ma-pred",
            AblationVariant::SingleActionPrediction => "sa-pred",
        }
    }

    pub fn is_contrastive(self) -> bool {
        matches!(self, AblationVariant::Carl | AblationVariant::SingleActionCarl)
    }

    fn uses_first_action_only(self) -> bool {
        matches!(
            self,
            AblationVariant::SingleActionCarl | AblationVariant::SingleActionPrediction
        )
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<AblationVariant> {
        match s {
            "carl" => Ok(AblationVariant::Carl),
            "sa-carl" => Ok(AblationVariant::SingleActionCarl),
            "ma-pred" => Ok(AblationVariant::MultiActionPrediction),
            "sa-pred" => Ok(AblationVariant::SingleActionPrediction),
            _ => Err(Error::invalid(format!(
                "unknown variant `{s}` (expected carl, sa-carl, ma-pred, sa-pred)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarlConfig {
    pub variant: AblationVariant,
    pub k: usize,
    pub stride: usize,
    pub tau: f64,
    /// Embedding dimension.
    pub d: usize,
    pub phi_hidden: Vec<usize>,
    pub psi_hidden: Vec<usize>,
    pub lr: f64,
}

impl Default for CarlConfig {
    fn default() -> Self {
        CarlConfig {
            variant: AblationVariant::Carl,
            k: 3,
            stride: 1,
            tau: 0.1,
            d: 16,
            phi_hidden: vec![64, 64, 64],
            psi_hidden: vec![32, 32],
            lr: crate::nn::DEFAULT_LR,
        }
    }
}

impl CarlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride must be at least 1"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if self.d == 0 {
            return Err(Error::invalid("embedding dimension d must be at least 1"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::invalid(format!("learning rate must be nonnegative, got {}", self.lr)));
        }
        Ok(())
    }

    /// Flattened action-sequence length after pad-then-stride.
    pub fn seq_dim(&self, action_dim: usize) -> usize {
        self.k.div_ceil(self.stride) * action_dim
    }
}

#[derive(Debug, Clone)]
pub struct CarlModel {
    pub phi: Mlp,
    /// Sequence encoder; absent for the prediction variants.
    pub psi: Option<Mlp>,
    /// Prediction head; present for the prediction variants only.
    pub xi: Option<Mlp>,
    pub variant: AblationVariant,
    pub tau: f64,
    pub k: usize,
    pub stride: usize,
    pub d: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

/// Builds the encoders for a dataset's dimensions. Each network draws from
/// its own derived stream, so adding or removing ψ/ξ never shifts the
/// initialization of the others.
pub fn init_carl(
    cfg: &CarlConfig,
    state_dim: usize,
    action_dim: usize,
    seed: u64,
) -> Result<CarlModel> {
    cfg.validate()?;
    if state_dim == 0 || action_dim == 0 {
        return Err(Error::invalid("state and action dims must be positive"));
    }
    let seq_dim = cfg.seq_dim(action_dim);
    let mut widths = vec![2 * state_dim];
    widths.extend(&cfg.phi_hidden);
    widths.push(cfg.d);
    let phi = Mlp::init(&widths, &mut rng_from(derive_seed(seed, 1)))?;

    let action_input = if cfg.variant.uses_first_action_only() { action_dim } else { seq_dim };
    let (psi, xi) = if cfg.variant.is_contrastive() {
        let mut widths = vec![action_input];
        widths.extend(&cfg.psi_hidden);
        widths.push(cfg.d);
        (Some(Mlp::init(&widths, &mut rng_from(derive_seed(seed, 2)))?), None)
    } else {
        let mut widths = vec![cfg.d];
        widths.extend(&cfg.psi_hidden);
        widths.push(action_input);
        (None, Some(Mlp::init(&widths, &mut rng_from(derive_seed(seed, 3)))?))
    };
    Ok(CarlModel {
        phi,
        psi,
        xi,
        variant: cfg.variant,
        tau: cfg.tau,
        k: cfg.k,
        stride: cfg.stride,
        d: cfg.d,
        state_dim,
        action_dim,
    })
}

/// Cosine similarity with a zero-norm guard.
pub fn score(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("score dims {} vs {}", a.len(), b.len())));
    }
    let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return Err(Error::numeric("zero-norm embedding in score"));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok(dot / (na * nb))
}

/// Loss and gradients of the batch InfoNCE objective, taken with respect to
/// the raw (pre-normalization) embeddings.
#[derive(Debug, Clone)]
pub struct InfoNceResult {
    pub loss: f64,
    pub grad_u: Matrix,
    pub grad_v: Matrix,
}

/// Normalized-score InfoNCE over a batch: rows are state-goal embeddings,
/// columns action-sequence embeddings, negatives are the in-batch mismatches.
/// −(1/B) Σ_i log softmax_i(cos(u_i, v_·)/τ), log-sum-exp stabilized by max
/// subtraction.
pub fn infonce_from_embeddings(u_raw: &Matrix, v_raw: &Matrix, tau: f64) -> Result<InfoNceResult> {
    let b = u_raw.rows();
    if b == 0 {
        return Err(Error::invalid("InfoNCE batch must not be empty"));
    }
    if v_raw.rows() != b || v_raw.cols() != u_raw.cols() {
        return Err(Error::contract(format!(
            "embedding shapes {}x{} vs {}x{}",
            u_raw.rows(),
            u_raw.cols(),
            v_raw.rows(),
            v_raw.cols()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    let d = u_raw.cols();
    let normalize = |m: &Matrix, what: &str| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut unit = vec![0.0f64; b * d];
        let mut norms = vec![0.0f64; b];
        for i in 0..b {
            let row = m.row(i);
            let norm = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if norm < NORM_FLOOR {
                return Err(Error::numeric(format!("zero-norm {what} embedding at row {i}")));
            }
            norms[i] = norm;
            for (j, &x) in row.iter().enumerate() {
                unit[i * d + j] = x as f64 / norm;
            }
        }
        Ok((unit, norms))
    };
    let (u, u_norms) = normalize(u_raw, "state-goal")?;
    let (v, v_norms) = normalize(v_raw, "action-sequence")?;

    // Probabilities p_ij = softmax over j of u_i·v_j / tau.
    let mut p = vec![0.0f64; b * b];
    let mut loss = 0.0f64;
    for i in 0..b {
        let logits: Vec<f64> = (0..b)
            .map(|j| {
                let dot: f64 =
                    u[i * d..(i + 1) * d].iter().zip(&v[j * d..(j + 1) * d]).map(|(x, y)| x * y).sum();
                dot / tau
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum_exp.ln();
        loss += lse - logits[i];
        for j in 0..b {
            p[i * b + j] = (logits[j] - max).exp() / sum_exp;
        }
    }
    loss /= b as f64;

    // d loss / d u_i = (1/Bτ) Σ_j (p_ij − δ_ij) v_j, then back through the
    // normalization: g_raw = (g − (g·û)û) / ‖raw‖.
    let scale = 1.0 / (b as f64 * tau);
    let mut grad_u = Matrix::zeros(b, d);
    let mut grad_v = Matrix::zeros(b, d);
    for i in 0..b {
        let mut gu = vec![0.0f64; d];
        for j in 0..b {
            let w = scale * (p[i * b + j] - if i == j { 1.0 } else { 0.0 });
            for (g, vv) in gu.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *g += w * vv;
            }
        }
        unnormalize(&mut gu, &u[i * d..(i + 1) * d], u_norms[i]);
        for (c, g) in gu.iter().enumerate() {
            grad_u.set(i, c, *g as f32);
        }
    }
    for j in 0..b {
        let mut gv = vec![0.0f64; d];
        for i in 0..b {
            let w = scale * (p[i * b + j] - if i == j { 1.0 } else { 0.0 });
            for (g, uu) in gv.iter_mut().zip(&u[i * d..(i + 1) * d]) {
                *g += w * uu;
            }
        }
        unnormalize(&mut gv, &v[j * d..(j + 1) * d], v_norms[j]);
        for (c, g) in gv.iter().enumerate() {
            grad_v.set(j, c, *g as f32);
        }
    }
    Ok(InfoNceResult { loss, grad_u, grad_v })
}

/// In place: gradient w.r.t. a normalized vector → gradient w.r.t. its raw
/// preimage with norm `norm` and unit direction `unit`.
fn unnormalize(g: &mut [f64], unit: &[f64], norm: f64) {
    let dot: f64 = g.iter().zip(unit).map(|(x, y)| x * y).sum();
    for (gi, ui) in g.iter_mut().zip(unit) {
        *gi = (*gi - dot * ui) / norm;
    }
}

/// Gradients for every network a variant touches.
#[derive(Debug)]
pub struct CarlGrads {
    pub phi: Grad,
    pub psi: Option<Grad>,
    pub xi: Option<Grad>,
}

impl CarlModel {
    fn phi_inputs(&self, segments: &[Segment]) -> Result<Matrix> {
        let mut m = Matrix::zeros(segments.len(), 2 * self.state_dim);
        for (i, seg) in segments.iter().enumerate() {
            if seg.state.len() != self.state_dim || seg.goal.len() != self.state_dim {
                return Err(Error::contract("segment state dim does not match the model"));
            }
            let row = m.row_mut(i);
            row[..self.state_dim].copy_from_slice(&seg.state);
            row[self.state_dim..].copy_from_slice(&seg.goal);
        }
        Ok(m)
    }

    /// ψ input (contrastive) or regression target (prediction): the strided
    /// sequence, or its first action for the single-action variants.
    fn action_view(&self, segments: &[Segment]) -> Result<Matrix> {
        let want = if self.variant.uses_first_action_only() {
            self.action_dim
        } else {
            self.k.div_ceil(self.stride) * self.action_dim
        };
        let mut m = Matrix::zeros(segments.len(), want);
        for (i, seg) in segments.iter().enumerate() {
            if seg.action_seq.len() < want {
                return Err(Error::contract(format!(
                    "segment action sequence has {} values, model expects {want}",
                    seg.action_seq.len()
                )));
            }
            m.row_mut(i).copy_from_slice(&seg.action_seq[..want]);
        }
        Ok(m)
    }

    /// Normalized φ embedding of one (state, goal) pair.
    pub fn embed_state_goal(&self, s: &[f32], g: &[f32]) -> Result<Vec<f32>> {
        let mut input = Matrix::zeros(1, 2 * self.state_dim);
        if s.len() != self.state_dim || g.len() != self.state_dim {
            return Err(Error::contract("state/goal dims do not match the model"));
        }
        input.row_mut(0)[..self.state_dim].copy_from_slice(s);
        input.row_mut(0)[self.state_dim..].copy_from_slice(g);
        Ok(self.embed_pairs(&input)?.row(0).to_vec())
    }

    /// Normalized φ embeddings for a batch of concatenated (state, goal)
    /// rows.
    pub fn embed_pairs(&self, pairs: &Matrix) -> Result<Matrix> {
        let mut out = self.phi.forward_only(pairs)?;
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let norm = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if norm < NORM_FLOOR {
                return Err(Error::numeric(format!("zero-norm embedding at row {i}")));
            }
            row.iter_mut().for_each(|x| *x = (*x as f64 / norm) as f32);
        }
        Ok(out)
    }

    /// Like [`embed_pairs`](Self::embed_pairs), but keeps what the backward
    /// pass needs so callers can push gradients through the normalized
    /// embedding back into φ.
    pub fn embed_pairs_with_cache(&self, pairs: &Matrix) -> Result<(Matrix, EmbedCache)> {
        let (raw, cache) = self.phi.forward(pairs)?;
        let mut unit = raw.clone();
        let mut norms = vec![0.0f64; raw.rows()];
        for i in 0..unit.rows() {
            let row = unit.row_mut(i);
            let norm = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if norm < NORM_FLOOR {
                return Err(Error::numeric(format!("zero-norm embedding at row {i}")));
            }
            norms[i] = norm;
            row.iter_mut().for_each(|x| *x = (*x as f64 / norm) as f32);
        }
        Ok((unit.clone(), EmbedCache { cache, unit, norms }))
    }

    /// Gradient of some loss w.r.t. the normalized embeddings → gradient
    /// w.r.t. φ's parameters.
    pub fn embed_backward(&self, cache: &EmbedCache, grad_unit: &Matrix) -> Result<Grad> {
        if grad_unit.rows() != cache.unit.rows() || grad_unit.cols() != cache.unit.cols() {
            return Err(Error::contract("embedding gradient shape mismatch"));
        }
        let mut raw_grad = Matrix::zeros(grad_unit.rows(), grad_unit.cols());
        for i in 0..grad_unit.rows() {
            let mut g: Vec<f64> = grad_unit.row(i).iter().map(|&x| x as f64).collect();
            let u: Vec<f64> = cache.unit.row(i).iter().map(|&x| x as f64).collect();
            unnormalize(&mut g, &u, cache.norms[i]);
            for (c, gv) in g.iter().enumerate() {
                raw_grad.set(i, c, *gv as f32);
            }
        }
        let (grad, _) = self.phi.backward(&cache.cache, &raw_grad)?;
        Ok(grad)
    }
}

/// Forward state of one [`CarlModel::embed_pairs_with_cache`] call.
#[derive(Debug)]
pub struct EmbedCache {
    cache: crate::nn::ForwardCache,
    unit: Matrix,
    norms: Vec<f64>,
}

/// Batch InfoNCE loss through both encoders; valid for the contrastive
/// variants.
pub fn infonce_loss(model: &CarlModel, segments: &[Segment]) -> Result<(f64, CarlGrads)> {
    let psi = model
        .psi
        .as_ref()
        .ok_or_else(|| Error::unsupported("InfoNCE needs a sequence encoder (contrastive variant)"))?;
    if segments.is_empty() {
        return Err(Error::invalid("batch must contain at least one segment"));
    }
    let (u_raw, phi_cache) = model.phi.forward(&model.phi_inputs(segments)?)?;
    let (v_raw, psi_cache) = psi.forward(&model.action_view(segments)?)?;
    let nce = infonce_from_embeddings(&u_raw, &v_raw, model.tau)?;
    let (phi_grad, _) = model.phi.backward(&phi_cache, &nce.grad_u)?;
    let (psi_grad, _) = psi.backward(&psi_cache, &nce.grad_v)?;
    Ok((nce.loss, CarlGrads { phi: phi_grad, psi: Some(psi_grad), xi: None }))
}

/// Mean squared error between ξ(normalized φ) and the action view.
fn prediction_loss(model: &CarlModel, segments: &[Segment]) -> Result<(f64, CarlGrads)> {
    let xi = model
        .xi
        .as_ref()
        .ok_or_else(|| Error::unsupported("prediction loss needs a prediction head"))?;
    if segments.is_empty() {
        return Err(Error::invalid("batch must contain at least one segment"));
    }
    let b = segments.len();
    let (e_raw, phi_cache) = model.phi.forward(&model.phi_inputs(segments)?)?;
    let d = e_raw.cols();
    let mut unit = e_raw.clone();
    let mut norms = vec![0.0f64; b];
    for i in 0..b {
        let row = unit.row_mut(i);
        let norm = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if norm < NORM_FLOOR {
            return Err(Error::numeric(format!("zero-norm embedding at row {i}")));
        }
        norms[i] = norm;
        row.iter_mut().for_each(|x| *x = (*x as f64 / norm) as f32);
    }
    let (pred, xi_cache) = xi.forward(&unit)?;
    let target = model.action_view(segments)?;
    let denom = (b * pred.cols()) as f64;
    let mut loss = 0.0f64;
    let mut pred_grad = Matrix::zeros(b, pred.cols());
    for i in 0..b {
        for c in 0..pred.cols() {
            let diff = pred.get(i, c) as f64 - target.get(i, c) as f64;
            loss += diff * diff;
            pred_grad.set(i, c, (2.0 * diff / denom) as f32);
        }
    }
    loss /= denom;
    let (xi_grad, unit_grad) = xi.backward(&xi_cache, &pred_grad)?;
    // Through the normalization back to raw φ outputs.
    let mut raw_grad = Matrix::zeros(b, d);
    for i in 0..b {
        let mut g: Vec<f64> = unit_grad.row(i).iter().map(|&x| x as f64).collect();
        let u: Vec<f64> = unit.row(i).iter().map(|&x| x as f64).collect();
        unnormalize(&mut g, &u, norms[i]);
        for (c, gv) in g.iter().enumerate() {
            raw_grad.set(i, c, *gv as f32);
        }
    }
    let (phi_grad, _) = model.phi.backward(&phi_cache, &raw_grad)?;
    Ok((loss, CarlGrads { phi: phi_grad, psi: None, xi: Some(xi_grad) }))
}

/// Dispatches the variant's objective over one batch.
pub fn ablation_loss(model: &CarlModel, segments: &[Segment]) -> Result<(f64, CarlGrads)> {
    if model.variant.is_contrastive() {
        infonce_loss(model, segments)
    } else {
        prediction_loss(model, segments)
    }
}

/// Loss-curve entry: (step, loss).
pub type LossRecord = (usize, f64);

/// Optimizes the variant's objective over sampled segments. The training
/// seed drives initialization; the sampler keeps its own configured seed.
pub fn train_carl(
    ds: &Dataset,
    sampler_cfg: &SamplerConfig,
    cfg: &CarlConfig,
    steps: usize,
    seed: u64,
) -> Result<(CarlModel, Vec<LossRecord>)> {
    cfg.validate()?;
    if sampler_cfg.k != cfg.k {
        return Err(Error::invalid(format!(
            "sampler k = {} disagrees with model k = {}",
            sampler_cfg.k, cfg.k
        )));
    }
    if sampler_cfg.stride != cfg.stride {
        return Err(Error::invalid(format!(
            "sampler stride = {} disagrees with model stride = {}",
            sampler_cfg.stride, cfg.stride
        )));
    }
    let mut model = init_carl(cfg, ds.state_dim, ds.action_dim, seed)?;
    let mut sampler = SegmentSampler::new(ds, sampler_cfg.clone())?;
    let mut phi_opt = AdamState::new(model.phi.num_params(), cfg.lr);
    let mut psi_opt = model.psi.as_ref().map(|n| AdamState::new(n.num_params(), cfg.lr));
    let mut xi_opt = model.xi.as_ref().map(|n| AdamState::new(n.num_params(), cfg.lr));
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = sampler.sample_batch();
        let (loss, grads) = ablation_loss(&model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::numeric(format!("non-finite loss at step {step}")));
        }
        adam_step(&mut model.phi, &grads.phi, &mut phi_opt)?;
        if let (Some(net), Some(opt), Some(g)) = (model.psi.as_mut(), psi_opt.as_mut(), &grads.psi)
        {
            adam_step(net, g, opt)?;
        }
        if let (Some(net), Some(opt), Some(g)) = (model.xi.as_mut(), xi_opt.as_mut(), &grads.xi) {
            adam_step(net, g, opt)?;
        }
        curve.push((step, loss));
    }
    Ok((model, curve))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct CarlMeta {
    variant: AblationVariant,
    tau: f64,
    k: usize,
    stride: usize,
    d: usize,
    state_dim: usize,
    action_dim: usize,
}

/// Writes the model as a directory: `meta.json` plus one `.carlnn` file per
/// network.
pub fn save_carl(model: &CarlModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_mlp(&model.phi, &dir.join("phi.carlnn"))?;
    if let Some(psi) = &model.psi {
        save_mlp(psi, &dir.join("psi.carlnn"))?;
    }
    if let Some(xi) = &model.xi {
        save_mlp(xi, &dir.join("xi.carlnn"))?;
    }
    let meta = CarlMeta {
        variant: model.variant,
        tau: model.tau,
        k: model.k,
        stride: model.stride,
        d: model.d,
        state_dim: model.state_dim,
        action_dim: model.action_dim,
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_carl(dir: &Path) -> Result<CarlModel> {
    let meta_path = dir.join("meta.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(meta_path.clone(), e))?;
    let meta: CarlMeta = serde_json::from_str(&text)
        .map_err(|e| Error::format(meta_path.clone(), e.to_string()))?;
    let phi = load_mlp(&dir.join("phi.carlnn"))?;
    let (psi, xi) = if meta.variant.is_contrastive() {
        (Some(load_mlp(&dir.join("psi.carlnn"))?), None)
    } else {
        (None, Some(load_mlp(&dir.join("xi.carlnn"))?))
    };
    let model = CarlModel {
        phi,
        psi,
        xi,
        variant: meta.variant,
        tau: meta.tau,
        k: meta.k,
        stride: meta.stride,
        d: meta.d,
        state_dim: meta.state_dim,
        action_dim: meta.action_dim,
    };
    if model.phi.in_dim() != 2 * model.state_dim || model.phi.out_dim() != model.d {
        return Err(Error::format(meta_path, "phi shape disagrees with metadata"));
    }
    if let Some(psi) = &model.psi {
        if psi.out_dim() != model.d {
            return Err(Error::format(dir.join("psi.carlnn"), "psi output dim != d"));
        }
    }
    if let Some(xi) = &model.xi {
        if xi.in_dim() != model.d {
            return Err(Error::format(dir.join("xi.carlnn"), "xi input dim != d"));
        }
    }
    Ok(model)
}
