//! Minimal MLP engine: forward/backward over dense layers with GELU hidden
//! activations, Adam, Polyak averaging, and a binary checkpoint format.
//!
//! Parameters and activations are `f32`; every dot product and running
//! statistic accumulates in `f64` so results do not depend on summation
//! tricks the optimizer might otherwise invite. Parameter order is fixed
//! everywhere (per layer: weights row-major, then biases) — the optimizer,
//! checkpoints, and gradient tests all index the same flattening.

use crate::error::{Error, Result};
use crate::util::Rng;
use rand::Rng as _;
use std::io::{Read as _, Write as _};
use std::path::Path;

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// self · other^T with f64 accumulation: (m×k)·(n×k)^T = m×n.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::contract(format!(
                "matmul_nt inner dims {} vs {}",
                self.cols, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                let b = other.row(j);
                let mut acc = 0.0f64;
                for (x, y) in a.iter().zip(b) {
                    acc += *x as f64 * *y as f64;
                }
                out.set(i, j, acc as f32);
            }
        }
        Ok(out)
    }

    /// self^T · other with f64 accumulation: (k×m)^T·(k×n) = m×n.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::contract(format!(
                "matmul_tn inner dims {} vs {}",
                self.rows, other.rows
            )));
        }
        let mut acc = vec![0.0f64; self.cols * other.cols];
        for k in 0..self.rows {
            let a = self.row(k);
            let b = other.row(k);
            for (i, &x) in a.iter().enumerate() {
                let row = &mut acc[i * other.cols..(i + 1) * other.cols];
                for (cell, &y) in row.iter_mut().zip(b) {
                    *cell += x as f64 * y as f64;
                }
            }
        }
        let data = acc.into_iter().map(|v| v as f32).collect();
        Matrix::from_vec(self.cols, other.cols, data)
    }
}

/// GELU, tanh approximation: 0.5x(1 + tanh(√(2/π)(x + 0.044715x³))).
pub fn gelu(x: f32) -> f32 {
    let x = x as f64;
    const C: f64 = 0.7978845608028654;
    (0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())) as f32
}

pub fn gelu_prime(x: f32) -> f32 {
    let x = x as f64;
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du) as f32
}

/// Dense network: affine layers with GELU on all but the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    /// weights[l] has shape widths[l+1] × widths[l].
    weights: Vec<Matrix>,
    biases: Vec<Vec<f32>>,
}

/// Per-layer activations captured by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    widths: Vec<usize>,
    batch: usize,
    /// inputs[l] = input to layer l (the batch for l = 0).
    inputs: Vec<Matrix>,
    /// Pre-activation outputs of the hidden layers (all but the last).
    pre: Vec<Matrix>,
}

/// Gradient buffers shaped like an [`Mlp`].
#[derive(Debug, Clone)]
pub struct Grad {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f32>>,
}

impl Mlp {
    /// Weights ~ U(±√(3/fan_in)) (variance 1/fan_in), biases zero.
    pub fn init(widths: &[usize], rng: &mut Rng) -> Result<Mlp> {
        if widths.len() < 2 {
            return Err(Error::invalid("an MLP needs at least input and output widths"));
        }
        if let Some(w) = widths.iter().find(|&&w| w == 0) {
            return Err(Error::invalid(format!("zero layer width {w} is not allowed")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let bound = (3.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| ((2.0 * rng.gen::<f64>() - 1.0) * bound) as f32)
                .collect();
            weights.push(Matrix::from_vec(fan_out, fan_in, data)?);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Mlp { widths: widths.to_vec(), weights, biases })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn in_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn weight(&self, layer: usize) -> &Matrix {
        &self.weights[layer]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Matrix {
        &mut self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &[f32] {
        &self.biases[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Vec<f32> {
        &mut self.biases[layer]
    }

    /// Parameters in canonical order (per layer: weights row-major, biases).
    pub fn flatten_params(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in 0..self.num_layers() {
            out.extend_from_slice(self.weights[l].data());
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    pub fn load_flat_params(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut at = 0;
        for l in 0..self.weights.len() {
            let wlen = self.weights[l].data().len();
            self.weights[l].data_mut().copy_from_slice(&flat[at..at + wlen]);
            at += wlen;
            let blen = self.biases[l].len();
            self.biases[l].copy_from_slice(&flat[at..at + blen]);
            at += blen;
        }
        Ok(())
    }

    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if input.cols() != self.in_dim() {
            return Err(Error::invalid(format!(
                "input dim {} does not match network input width {}",
                input.cols(),
                self.in_dim()
            )));
        }
        let mut cache = ForwardCache {
            widths: self.widths.clone(),
            batch: input.rows(),
            inputs: Vec::with_capacity(self.num_layers()),
            pre: Vec::with_capacity(self.num_layers().saturating_sub(1)),
        };
        let mut a = input.clone();
        for l in 0..self.num_layers() {
            let mut z = a.matmul_nt(&self.weights[l])?;
            for r in 0..z.rows() {
                let row = z.row_mut(r);
                for (v, b) in row.iter_mut().zip(&self.biases[l]) {
                    *v += b;
                }
            }
            cache.inputs.push(a);
            if l + 1 == self.num_layers() {
                a = z;
            } else {
                let mut act = z.clone();
                act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
                cache.pre.push(z);
                a = act;
            }
        }
        Ok((a, cache))
    }

    pub fn forward_only(&self, input: &Matrix) -> Result<Matrix> {
        Ok(self.forward(input)?.0)
    }

    /// Reverse pass. Returns parameter gradients and the gradient with
    /// respect to the input batch (for upstream encoders).
    pub fn backward(&self, cache: &ForwardCache, out_grad: &Matrix) -> Result<(Grad, Matrix)> {
        if cache.widths != self.widths {
            return Err(Error::contract("forward cache belongs to a different architecture"));
        }
        if out_grad.rows() != cache.batch || out_grad.cols() != self.out_dim() {
            return Err(Error::contract(format!(
                "output gradient shape {}x{} does not match cache batch {} and width {}",
                out_grad.rows(),
                out_grad.cols(),
                cache.batch,
                self.out_dim()
            )));
        }
        let mut grad = Grad::zeros_like(self);
        let mut gz = out_grad.clone();
        for l in (0..self.num_layers()).rev() {
            grad.weights[l] = gz.matmul_tn(&cache.inputs[l])?;
            for (j, b) in grad.biases[l].iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for r in 0..gz.rows() {
                    acc += gz.get(r, j) as f64;
                }
                *b = acc as f32;
            }
            // d/d(input of layer l) = gz · W_l, then through GELU if l > 0.
            let mut ga = gz.matmul_nt_transposed(&self.weights[l])?;
            if l > 0 {
                let z = &cache.pre[l - 1];
                for (v, zv) in ga.data_mut().iter_mut().zip(z.data()) {
                    *v *= gelu_prime(*zv);
                }
            }
            gz = ga;
        }
        Ok((grad, gz))
    }
}

impl Matrix {
    /// self · other with f64 accumulation: (m×k)·(k×n) = m×n.
    fn matmul_nt_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::contract(format!(
                "matmul inner dims {} vs {}",
                self.cols, other.rows
            )));
        }
        let mut acc = vec![0.0f64; self.rows * other.cols];
        for i in 0..self.rows {
            let a = self.row(i);
            let out = &mut acc[i * other.cols..(i + 1) * other.cols];
            for (k, &x) in a.iter().enumerate() {
                let b = other.row(k);
                for (cell, &y) in out.iter_mut().zip(b) {
                    *cell += x as f64 * y as f64;
                }
            }
        }
        let data = acc.into_iter().map(|v| v as f32).collect();
        Matrix::from_vec(self.rows, other.cols, data)
    }
}

impl Grad {
    pub fn zeros_like(mlp: &Mlp) -> Grad {
        Grad {
            weights: mlp.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            biases: mlp.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for l in 0..self.weights.len() {
            out.extend_from_slice(self.weights[l].data());
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    /// Accumulates `other * factor` in place.
    pub fn add_scaled(&mut self, other: &Grad, factor: f32) -> Result<()> {
        if self.weights.len() != other.weights.len() {
            return Err(Error::contract("gradient layer counts differ"));
        }
        for l in 0..self.weights.len() {
            if self.weights[l].data().len() != other.weights[l].data().len() {
                return Err(Error::contract("gradient shapes differ"));
            }
            for (a, b) in self.weights[l].data_mut().iter_mut().zip(other.weights[l].data()) {
                *a += b * factor;
            }
            for (a, b) in self.biases[l].iter_mut().zip(&other.biases[l]) {
                *a += b * factor;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f32) {
        for w in &mut self.weights {
            w.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Adam with bias correction. Moment buffers are `f64`: they are running
/// reductions over the whole optimization.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> AdamState {
        AdamState {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

pub const DEFAULT_LR: f64 = 3e-4;

/// One Adam update over the canonical parameter flattening.
pub fn adam_step(mlp: &mut Mlp, grad: &Grad, state: &mut AdamState) -> Result<()> {
    if state.m.len() != mlp.num_params() {
        return Err(Error::contract(format!(
            "optimizer sized for {} parameters, network has {}",
            state.m.len(),
            mlp.num_params()
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    let mut at = 0;
    for l in 0..mlp.num_layers() {
        let ncols = mlp.weights[l].cols();
        for (i, (p, g)) in mlp.weights[l]
            .data_mut()
            .iter_mut()
            .zip(grad.weights[l].data())
            .enumerate()
        {
            if !g.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite gradient at layer {l} weights[{},{}]",
                    i / ncols,
                    i % ncols
                )));
            }
            *p = adam_update(*p, *g, at, state, bc1, bc2);
            at += 1;
        }
        for (i, (p, g)) in mlp.biases[l].iter_mut().zip(&grad.biases[l]).enumerate() {
            if !g.is_finite() {
                return Err(Error::numeric(format!("non-finite gradient at layer {l} bias[{i}]")));
            }
            *p = adam_update(*p, *g, at, state, bc1, bc2);
            at += 1;
        }
    }
    Ok(())
}

fn adam_update(p: f32, g: f32, at: usize, state: &mut AdamState, bc1: f64, bc2: f64) -> f32 {
    let g = g as f64;
    state.m[at] = state.beta1 * state.m[at] + (1.0 - state.beta1) * g;
    state.v[at] = state.beta2 * state.v[at] + (1.0 - state.beta2) * g * g;
    let m_hat = state.m[at] / bc1;
    let v_hat = state.v[at] / bc2;
    (p as f64 - state.lr * m_hat / (v_hat.sqrt() + state.eps)) as f32
}

/// target ← (1 − tau)·target + tau·online, elementwise.
pub fn polyak_update(target: &mut Mlp, online: &Mlp, tau: f32) -> Result<()> {
    if target.widths != online.widths {
        return Err(Error::contract("polyak update across different architectures"));
    }
    for l in 0..target.num_layers() {
        for (t, o) in target.weights[l].data_mut().iter_mut().zip(online.weights[l].data()) {
            *t = (1.0 - tau) * *t + tau * *o;
        }
        for (t, o) in target.biases[l].iter_mut().zip(&online.biases[l]) {
            *t = (1.0 - tau) * *t + tau * *o;
        }
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CARLNN1\0";

/// Writes the network as magic, u32 width count, u32 widths, then the f32
/// canonical parameter flattening, all little-endian.
pub fn save_mlp(mlp: &Mlp, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + 4 + mlp.widths.len() * 4 + mlp.num_params() * 4);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(mlp.widths.len() as u32).to_le_bytes());
    for &w in &mlp.widths {
        bytes.extend_from_slice(&(w as u32).to_le_bytes());
    }
    for p in mlp.flatten_params() {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_mlp(path: &Path) -> Result<Mlp> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut at = 0;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if bytes.len() < at + n {
            return Err(Error::format(path, format!("truncated before {what}")));
        }
        let slice = &bytes[at..at + n];
        at += n;
        Ok(slice)
    };
    if take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let n_widths = u32::from_le_bytes(take(4, "width count")?.try_into().expect("4 bytes"));
    if n_widths < 2 || n_widths > 64 {
        return Err(Error::format(path, format!("implausible width count {n_widths}")));
    }
    let mut widths = Vec::with_capacity(n_widths as usize);
    for _ in 0..n_widths {
        let w = u32::from_le_bytes(take(4, "width")?.try_into().expect("4 bytes"));
        if w == 0 {
            return Err(Error::format(path, "zero width"));
        }
        widths.push(w as usize);
    }
    let num_params: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let mut flat = Vec::with_capacity(num_params);
    for _ in 0..num_params {
        let p = f32::from_le_bytes(take(4, "parameter")?.try_into().expect("4 bytes"));
        flat.push(p);
    }
    if at != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - at)));
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut cursor = 0;
    for l in 0..widths.len() - 1 {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let w = flat[cursor..cursor + fan_in * fan_out].to_vec();
        cursor += fan_in * fan_out;
        weights.push(Matrix::from_vec(fan_out, fan_in, w)?);
        biases.push(flat[cursor..cursor + fan_out].to_vec());
        cursor += fan_out;
    }
    Ok(Mlp { widths, weights, biases })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit;
    use crate::util::rng_from;

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let mut r1 = rng_from(11);
        let mut r2 = rng_from(11);
        let a = Mlp::init(&[3, 8, 2], &mut r1).unwrap();
        let b = Mlp::init(&[3, 8, 2], &mut r2).unwrap();
        assert_eq!(a.flatten_params(), b.flatten_params());
        assert!(a.bias(0).iter().chain(a.bias(1)).all(|&v| v == 0.0));
        assert!(matches!(Mlp::init(&[4], &mut r1), Err(Error::InvalidArgument(_))));
        assert!(matches!(Mlp::init(&[4, 0, 2], &mut r1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn init_variance_tracks_fan_in() {
        let mut rng = rng_from(3);
        let mlp = Mlp::init(&[100, 100], &mut rng).unwrap();
        let w = mlp.weight(0).data();
        let mean: f64 = w.iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64;
        let var: f64 =
            w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let expected = 1.0 / 100.0;
        assert!((var - expected).abs() < 0.2 * expected, "var {var} vs {expected}");
        let bound = (3.0f64 / 100.0).sqrt() as f32;
        assert!(w.iter().all(|&v| v.abs() <= bound));
    }

    #[test]
    fn gelu_matches_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-4);
        assert!(gelu(-10.0).abs() < 1e-4);
        // Hand value: gelu(1) under the tanh form ≈ 0.8411919906.
        assert!((gelu(1.0) - 0.841192).abs() < 1e-5);
        for &x in &[-3.0f32, -0.7, 0.3, 2.5] {
            let h = 1e-4f64;
            let fd = (testkit::shadow_gelu(x as f64 + h) - testkit::shadow_gelu(x as f64 - h))
                / (2.0 * h);
            assert!((gelu_prime(x) as f64 - fd).abs() < 1e-6, "x = {x}");
        }
    }

    #[test]
    fn zero_weight_network_outputs_its_bias() {
        let mut rng = rng_from(4);
        let mut mlp = Mlp::init(&[3, 4, 2], &mut rng).unwrap();
        for l in 0..mlp.num_layers() {
            mlp.weight_mut(l).data_mut().fill(0.0);
        }
        mlp.bias_mut(1).copy_from_slice(&[0.25, -1.5]);
        let input = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0]).unwrap();
        let out = mlp.forward_only(&input).unwrap();
        for r in 0..2 {
            assert_eq!(out.row(r), &[0.25, -1.5]);
        }
    }

    #[test]
    fn single_linear_layer_gradients_are_outer_products() {
        let mut rng = rng_from(5);
        let mlp = Mlp::init(&[3, 1], &mut rng).unwrap();
        let input = Matrix::from_vec(1, 3, vec![0.5, -2.0, 1.5]).unwrap();
        let (_, cache) = mlp.forward(&input).unwrap();
        let g = 2.0f32;
        let out_grad = Matrix::from_vec(1, 1, vec![g]).unwrap();
        let (grad, input_grad) = mlp.backward(&cache, &out_grad).unwrap();
        assert_eq!(grad.weights[0].data(), &[g * 0.5, g * -2.0, g * 1.5]);
        assert_eq!(grad.biases[0], vec![g]);
        let w = mlp.weight(0).data();
        for c in 0..3 {
            assert!((input_grad.get(0, c) - g * w[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_grads() {
        let mut rng = rng_from(6);
        let mlp = Mlp::init(&[4, 6, 3], &mut rng).unwrap();
        let input = Matrix::from_vec(2, 4, (0..8).map(|i| i as f32 * 0.1).collect()).unwrap();
        let (_, cache) = mlp.forward(&input).unwrap();
        let (grad, input_grad) = mlp.backward(&cache, &Matrix::zeros(2, 3)).unwrap();
        assert!(grad.flatten().iter().all(|&v| v == 0.0));
        assert!(input_grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rng_from(7);
        for case in 0..5 {
            let widths = [
                vec![2, 5, 3],
                vec![4, 8, 8, 2],
                vec![3, 4, 1],
                vec![5, 6, 4],
                vec![2, 3, 3, 3],
            ][case]
                .clone();
            let mlp = Mlp::init(&widths, &mut rng).unwrap();
            let report = testkit::mlp_grad_check(&mlp, 3, &mut rng).unwrap();
            assert!(
                report.max_rel_error < 1e-4,
                "case {case}: rel {} at {}",
                report.max_rel_error,
                report.worst_param
            );
        }
    }

    #[test]
    fn batched_forward_equals_rowwise_forward() {
        let mut rng = rng_from(8);
        let mlp = Mlp::init(&[3, 7, 2], &mut rng).unwrap();
        let input =
            Matrix::from_vec(4, 3, (0..12).map(|i| (i as f32 - 6.0) * 0.3).collect()).unwrap();
        let batched = mlp.forward_only(&input).unwrap();
        for r in 0..4 {
            let single = Matrix::from_vec(1, 3, input.row(r).to_vec()).unwrap();
            let out = mlp.forward_only(&single).unwrap();
            assert_eq!(out.row(0), batched.row(r), "row {r}");
        }
    }

    #[test]
    fn forward_rejects_dim_mismatch_and_backward_rejects_foreign_cache() {
        let mut rng = rng_from(9);
        let mlp = Mlp::init(&[3, 4, 2], &mut rng).unwrap();
        let bad = Matrix::zeros(1, 5);
        assert!(matches!(mlp.forward(&bad), Err(Error::InvalidArgument(_))));
        let other = Mlp::init(&[5, 4, 2], &mut rng).unwrap();
        let (_, cache) = other.forward(&Matrix::zeros(1, 5)).unwrap();
        assert!(matches!(
            mlp.backward(&cache, &Matrix::zeros(1, 2)),
            Err(Error::Contract(_))
        ));
        let (_, cache) = mlp.forward(&Matrix::zeros(2, 3)).unwrap();
        assert!(matches!(
            mlp.backward(&cache, &Matrix::zeros(1, 2)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut rng = rng_from(10);
        let mut mlp = Mlp::init(&[2, 1], &mut rng).unwrap();
        let before = mlp.flatten_params();
        let mut grad = Grad::zeros_like(&mlp);
        for w in &mut grad.weights {
            w.data_mut().fill(1.0);
        }
        for b in &mut grad.biases {
            b.fill(1.0);
        }
        let mut state = AdamState::new(mlp.num_params(), DEFAULT_LR);
        adam_step(&mut mlp, &grad, &mut state).unwrap();
        for (b, a) in before.iter().zip(mlp.flatten_params()) {
            assert!(((b - a) as f64 - DEFAULT_LR).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_zero_gradient_and_zero_lr_leave_parameters_alone() {
        let mut rng = rng_from(11);
        let mut mlp = Mlp::init(&[3, 5, 2], &mut rng).unwrap();
        let before = mlp.flatten_params();
        let zero = Grad::zeros_like(&mlp);
        let mut state = AdamState::new(mlp.num_params(), DEFAULT_LR);
        adam_step(&mut mlp, &zero, &mut state).unwrap();
        assert_eq!(mlp.flatten_params(), before);

        let mut state = AdamState::new(mlp.num_params(), 0.0);
        let mut grad = Grad::zeros_like(&mlp);
        grad.weights[0].data_mut().fill(0.7);
        adam_step(&mut mlp, &grad, &mut state).unwrap();
        assert_eq!(mlp.flatten_params(), before);
    }

    #[test]
    fn adam_runs_are_bitwise_reproducible() {
        let run = || {
            let mut rng = rng_from(12);
            let mut mlp = Mlp::init(&[4, 6, 2], &mut rng).unwrap();
            let mut state = AdamState::new(mlp.num_params(), 1e-3);
            let input = Matrix::from_vec(3, 4, (0..12).map(|i| (i % 5) as f32).collect()).unwrap();
            for step in 0..100 {
                let (out, cache) = mlp.forward(&input).unwrap();
                let mut og = out;
                og.data_mut().iter_mut().for_each(|v| *v = 0.1 * (*v + step as f32 * 0.01));
                let (grad, _) = mlp.backward(&cache, &og).unwrap();
                adam_step(&mut mlp, &grad, &mut state).unwrap();
            }
            mlp.flatten_params()
        };
        let a: Vec<u32> = run().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = run().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn adam_reports_non_finite_gradients_with_location() {
        let mut rng = rng_from(13);
        let mut mlp = Mlp::init(&[2, 3, 1], &mut rng).unwrap();
        let mut grad = Grad::zeros_like(&mlp);
        grad.weights[1].set(0, 2, f32::NAN);
        let mut state = AdamState::new(mlp.num_params(), DEFAULT_LR);
        let err = adam_step(&mut mlp, &grad, &mut state).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer 1") && msg.contains("weights[0,2]"), "{msg}");
    }

    #[test]
    fn polyak_blends_parameters() {
        let mut rng = rng_from(14);
        let online = Mlp::init(&[2, 3], &mut rng).unwrap();
        let mut target = Mlp::init(&[2, 3], &mut rng).unwrap();
        let t0 = target.flatten_params();
        polyak_update(&mut target, &online, 0.0).unwrap();
        assert_eq!(target.flatten_params(), t0);
        polyak_update(&mut target, &online, 1.0).unwrap();
        assert_eq!(target.flatten_params(), online.flatten_params());
        let mut target2 = Mlp::init(&[2, 3], &mut rng).unwrap();
        let t2 = target2.flatten_params();
        polyak_update(&mut target2, &online, 0.25).unwrap();
        for ((t, o), after) in
            t2.iter().zip(online.flatten_params()).zip(target2.flatten_params())
        {
            assert!((after - (0.75 * t + 0.25 * o)).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoints_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.carlnn");
        let mut rng = rng_from(15);
        let mlp = Mlp::init(&[3, 9, 4], &mut rng).unwrap();
        save_mlp(&mlp, &path).unwrap();
        let back = load_mlp(&path).unwrap();
        assert_eq!(back.widths(), mlp.widths());
        let a: Vec<u32> = mlp.flatten_params().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.flatten_params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);

        std::fs::write(&path, b"NOTANN\0\0rest").unwrap();
        assert!(matches!(load_mlp(&path), Err(Error::Format { .. })));
        save_mlp(&mlp, &path).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 2]).unwrap();
        assert!(matches!(load_mlp(&path), Err(Error::Format { .. })));
        std::fs::write(&path, [full.clone(), vec![0, 1]].concat()).unwrap();
        assert!(matches!(load_mlp(&path), Err(Error::Format { .. })));
    }
}
