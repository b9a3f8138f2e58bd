//! Dense 64-bit tensors with hand-written forward and backward passes for
//! the operations the encoders use, plus a finite-difference gradient check.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    /// Builds a `rows.len() x cols` matrix; every row must have `cols` entries.
    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape(format!("row of length {} != {cols}", r.len())));
            }
            values.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 0,
            1 => 1,
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.values[i * c..(i + 1) * c]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.values.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// `self · x` for a rows x cols matrix.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols());
        (0..self.rows()).map(|i| dot_unchecked(self.row(i), x)).collect()
    }

    /// `selfᵀ · y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows());
        let mut out = vec![0.0; self.cols()];
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                axpy(yi, self.row(i), &mut out);
            }
        }
        out
    }

    /// grad += y xᵀ.
    pub fn accumulate_outer(&mut self, y: &[f64], x: &[f64]) {
        let cols = self.cols();
        debug_assert_eq!(x.len(), cols);
        let g = self.grad_mut();
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                axpy(yi, x, &mut g[i * cols..(i + 1) * cols]);
            }
        }
    }

    /// grad += x (elementwise).
    pub fn accumulate(&mut self, x: &[f64]) {
        let g = self.grad_mut();
        debug_assert_eq!(g.len(), x.len());
        axpy(1.0, x, g);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor,
            trainable: true,
        }
    }
}

/// Anything that owns a fixed list of named parameter tensors.
pub trait Differentiable {
    fn params(&self) -> Vec<&ParamTensor>;
    fn params_mut(&mut self) -> Vec<&mut ParamTensor>;

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.tensor.zero_grad();
        }
    }
}

/// A free-form parameter list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet(pub Vec<ParamTensor>);

impl Differentiable for ParamSet {
    fn params(&self) -> Vec<&ParamTensor> {
        self.0.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.0.iter_mut().collect()
    }
}

fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// y += a·x
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "dot of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(dot_unchecked(a, b))
}

/// `w·x + b` for a matrix `w`.
pub fn affine(w: &Tensor, b: Option<&Tensor>, x: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() {
        return Err(Error::Shape(format!(
            "affine: weight {:?} against input of length {}",
            w.shape(),
            x.len()
        )));
    }
    let mut y = w.matvec(x);
    if let Some(b) = b {
        if b.len() != y.len() {
            return Err(Error::Shape(format!("affine bias {:?}", b.shape())));
        }
        axpy(1.0, b.values(), &mut y);
    }
    Ok(y)
}

/// Accumulates weight and bias gradients; returns the input gradient.
pub fn affine_backward(w: &mut Tensor, b: Option<&mut Tensor>, x: &[f64], dy: &[f64]) -> Vec<f64> {
    w.accumulate_outer(dy, x);
    if let Some(b) = b {
        b.accumulate(dy);
    }
    w.matvec_t(dy)
}

pub fn tanh(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

/// Gradient through tanh given its output.
pub fn tanh_backward(out: &[f64], dy: &[f64]) -> Vec<f64> {
    out.iter().zip(dy).map(|(t, g)| g * (1.0 - t * t)).collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Gradient through ReLU given its input.
pub fn relu_backward(input: &[f64], dy: &[f64]) -> Vec<f64> {
    input
        .iter()
        .zip(dy)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

/// Rows of `table` selected by `ids`, as an `ids.len() x cols` matrix.
pub fn embedding_lookup(table: &Tensor, ids: &[u32]) -> Result<Tensor> {
    let cols = table.cols();
    let mut values = Vec::with_capacity(ids.len() * cols);
    for &id in ids {
        let id = id as usize;
        if id >= table.rows() {
            return Err(Error::InvalidInput(format!(
                "token id {id} outside embedding table of {} rows",
                table.rows()
            )));
        }
        values.extend_from_slice(table.row(id));
    }
    Tensor::matrix(ids.len(), cols, values)
}

/// Scatter-adds row gradients back into the table.
pub fn embedding_backward(table: &mut Tensor, ids: &[u32], d_rows: &Tensor) {
    let cols = table.cols();
    let g = table.grad_mut();
    for (i, &id) in ids.iter().enumerate() {
        let id = id as usize;
        axpy(1.0, d_rows.row(i), &mut g[id * cols..(id + 1) * cols]);
    }
}

/// Row `i` of the result concatenates rows `i-k ..= i+k`; out-of-range rows are zeros.
pub fn window_concat(e: &Tensor, k: usize) -> Tensor {
    let (m, d) = (e.rows(), e.cols());
    let width = (2 * k + 1) * d;
    let mut out = Tensor::zeros(vec![m, width]);
    for i in 0..m {
        let row = out.row_mut(i);
        for w in 0..=2 * k {
            let src = i as isize + w as isize - k as isize;
            if src >= 0 && (src as usize) < m {
                row[w * d..(w + 1) * d].copy_from_slice(e.row(src as usize));
            }
        }
    }
    out
}

/// Folds window gradients back onto the `m x d` embedding rows.
pub fn window_concat_backward(d_windows: &Tensor, k: usize, d: usize) -> Tensor {
    let m = d_windows.rows();
    let mut de = Tensor::zeros(vec![m, d]);
    for i in 0..m {
        let row = d_windows.row(i);
        for w in 0..=2 * k {
            let src = i as isize + w as isize - k as isize;
            if src >= 0 && (src as usize) < m {
                axpy(1.0, &row[w * d..(w + 1) * d], de.row_mut(src as usize));
            }
        }
    }
    de
}

/// Cached intermediates of [`conv_context`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvForward {
    pub windows: Tensor,
    /// `F · window_i` before the ReLU.
    pub pre_activation: Tensor,
    pub output: Tensor,
}

/// `c_i = ReLU(F · window_i) + b_t`. The bias sits outside the ReLU.
pub fn conv_context(e: &Tensor, filters: &Tensor, bias: &Tensor, k: usize) -> Result<ConvForward> {
    let width = (2 * k + 1) * e.cols();
    if filters.cols() != width || bias.len() != filters.rows() {
        return Err(Error::Shape(format!(
            "conv: filters {:?}, bias {:?}, window width {width}",
            filters.shape(),
            bias.shape()
        )));
    }
    let windows = window_concat(e, k);
    let nf = filters.rows();
    let m = e.rows();
    let mut pre = Vec::with_capacity(m * nf);
    let mut out = Vec::with_capacity(m * nf);
    for i in 0..m {
        let h = filters.matvec(windows.row(i));
        out.extend(h.iter().zip(bias.values()).map(|(&x, &b)| x.max(0.0) + b));
        pre.extend(h);
    }
    Ok(ConvForward {
        windows,
        pre_activation: Tensor::matrix(m, nf, pre)?,
        output: Tensor::matrix(m, nf, out)?,
    })
}

/// Accumulates filter and bias gradients; returns the embedding gradient.
pub fn conv_context_backward(
    filters: &mut Tensor,
    bias: &mut Tensor,
    fwd: &ConvForward,
    d_out: &Tensor,
    k: usize,
) -> Tensor {
    let m = d_out.rows();
    let width = filters.cols();
    let mut d_windows = Tensor::zeros(vec![m, width]);
    for i in 0..m {
        let dc = d_out.row(i);
        bias.accumulate(dc);
        let dh = relu_backward(fwd.pre_activation.row(i), dc);
        filters.accumulate_outer(&dh, fwd.windows.row(i));
        d_windows.row_mut(i).copy_from_slice(&filters.matvec_t(&dh));
    }
    window_concat_backward(&d_windows, k, width / (2 * k + 1))
}

fn check_mask(n: usize, mask: Option<&[bool]>) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidInput("empty score vector".into()));
    }
    if let Some(mask) = mask {
        if mask.len() != n {
            return Err(Error::Shape(format!("mask length {} != {n}", mask.len())));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidInput("all positions masked".into()));
        }
    }
    Ok(())
}

fn unmasked(mask: Option<&[bool]>, i: usize) -> bool {
    mask.is_none_or(|m| m[i])
}

/// Softmax over positions where `mask` is true (all when `None`); masked
/// positions are exactly zero.
pub fn masked_softmax(scores: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    check_mask(scores.len(), mask)?;
    let max = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| unmasked(mask, i))
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| if unmasked(mask, i) { (s - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    Ok(out)
}

/// `dz_i = p_i (g_i - Σ_j p_j g_j)`.
pub fn masked_softmax_backward(out: &[f64], upstream: &[f64]) -> Vec<f64> {
    let inner = dot_unchecked(out, upstream);
    out.iter()
        .zip(upstream)
        .map(|(p, g)| p * (g - inner))
        .collect()
}

/// Euclidean projection of the unmasked scores onto the probability simplex.
///
/// Scores are shifted by their maximum first, so a unique maximum at least
/// 1 above the runner-up yields an exact one-hot vector.
pub fn sparsemax(scores: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    check_mask(scores.len(), mask)?;
    let live: Vec<usize> = (0..scores.len()).filter(|&i| unmasked(mask, i)).collect();
    let max = live
        .iter()
        .map(|&i| scores[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::InvalidInput("non-finite sparsemax input".into()));
    }
    let mut sorted: Vec<f64> = live.iter().map(|&i| scores[i] - max).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));

    // Support size: largest k with Σ_{j<k} (z_(j) - z_(k)) < 1.
    let mut support = 1;
    for (k, &zk) in sorted.iter().enumerate().skip(1) {
        let excess: f64 = sorted[..k].iter().map(|&zj| zj - zk).sum();
        if excess >= 1.0 {
            break;
        }
        support = k + 1;
    }
    let tau = (sorted[..support].iter().sum::<f64>() - 1.0) / support as f64;

    let mut out = vec![0.0; scores.len()];
    for &i in &live {
        out[i] = (scores[i] - max - tau).max(0.0);
    }
    Ok(out)
}

/// On the support S the Jacobian is `I - 11ᵀ/|S|`; zero elsewhere.
pub fn sparsemax_backward(out: &[f64], upstream: &[f64]) -> Vec<f64> {
    let (sum, count) = out
        .iter()
        .zip(upstream)
        .filter(|(&p, _)| p > 0.0)
        .fold((0.0, 0usize), |(s, c), (_, &g)| (s + g, c + 1));
    if count == 0 {
        return vec![0.0; out.len()];
    }
    let mean = sum / count as f64;
    out.iter()
        .zip(upstream)
        .map(|(&p, &g)| if p > 0.0 { g - mean } else { 0.0 })
        .collect()
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask(Vec<f64>);

impl DropoutMask {
    pub fn sample<R: Rng>(len: usize, rate: f64, rng: &mut R) -> Self {
        if rate <= 0.0 {
            return Self(vec![1.0; len]);
        }
        let scale = 1.0 / (1.0 - rate);
        Self(
            (0..len)
                .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
                .collect(),
        )
    }

    pub fn apply(&self, x: &mut [f64]) {
        x.iter_mut().zip(&self.0).for_each(|(v, m)| *v *= m);
    }

    /// Backward is the same elementwise product.
    pub fn backward(&self, dy: &mut [f64]) {
        self.apply(dy);
    }
}

/// `-ln softmax(logits)[target]` and its gradient `softmax - onehot`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::InvalidInput(format!(
            "target {target} out of {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let log_z = max + total.ln();
    let loss = log_z - logits[target];
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - log_z).exp()).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Binary cross-entropy on a logit, in the overflow-free form
/// `max(z,0) - z·y + ln(1 + e^{-|z|})`; gradient `σ(z) - y`.
pub fn binary_cross_entropy_with_logit(logit: f64, label: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - label)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many scalars per tensor, sampled with `seed`.
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            max_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.rel_error <= self.tol)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(move |t| t.rel_error > self.tol)
    }

    pub fn into_result(self) -> std::result::Result<Self, String> {
        let msgs: Vec<String> = self
            .failures()
            .map(|t| {
                format!(
                    "{}[{}]: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
                    t.name, t.worst_index, t.analytic, t.numeric, t.rel_error
                )
            })
            .collect();
        if msgs.is_empty() {
            Ok(self)
        } else {
            Err(format!("gradient check failed: {}", msgs.join("; ")))
        }
    }
}

/// Compares analytic gradients with central differences for every trainable
/// scalar (or a seeded sample of them).
///
/// `loss_fn(params, with_grad)` must return the loss and, when `with_grad`,
/// accumulate gradients into the (already zeroed) parameter buffers.
pub fn check_gradients<P, F>(params: &mut P, mut loss_fn: F, cfg: GradCheckConfig) -> GradCheckReport
where
    P: Differentiable,
    F: FnMut(&mut P, bool) -> f64,
{
    params.zero_grads();
    loss_fn(params, true);
    let analytic: Vec<Vec<f64>> = params
        .params()
        .iter()
        .map(|p| {
            p.tensor
                .grad()
                .map_or_else(|| vec![0.0; p.tensor.len()], <[f64]>::to_vec)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_tensors = analytic.len();
    let mut tensors = Vec::new();
    for t in 0..n_tensors {
        let (trainable, len, name) = {
            let p = &params.params()[t];
            (p.trainable, p.tensor.len(), p.name.clone())
        };
        if !trainable || len == 0 {
            continue;
        }
        let indices: Vec<usize> = match cfg.max_per_tensor {
            Some(limit) if limit < len => {
                let mut v = sample(&mut rng, len, limit).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        let mut worst = TensorCheck {
            name,
            checked: indices.len(),
            worst_index: indices[0],
            analytic: 0.0,
            numeric: 0.0,
            rel_error: -1.0,
        };
        for &i in &indices {
            let original = params.params()[t].tensor.values()[i];
            params.params_mut()[t].tensor.values_mut()[i] = original + cfg.eps;
            let plus = loss_fn(params, false);
            params.params_mut()[t].tensor.values_mut()[i] = original - cfg.eps;
            let minus = loss_fn(params, false);
            params.params_mut()[t].tensor.values_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[t][i];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if rel > worst.rel_error || rel.is_nan() {
                worst.worst_index = i;
                worst.analytic = a;
                worst.numeric = numeric;
                worst.rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
            }
        }
        tensors.push(worst);
    }
    params.zero_grads();
    GradCheckReport {
        tol: cfg.tol,
        tensors,
    }
}
