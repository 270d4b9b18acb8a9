//! Amortized posterior over latents: neural maps from expression rows (and
//! optionally batch one-hots) to a diagonal Gaussian per cell.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{softplus, softplus_grad};

pub const VAR_FLOOR: f64 = 1e-6;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderForm {
    /// Linear layers with softplus activations on the expression row.
    SimpleNn,
    /// Expression row concatenated with the batch one-hot, batch-norm after
    /// every hidden linear layer.
    BatchAwareNn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderWiring {
    /// Independent networks for the mean and the variance.
    Separate,
    /// One hidden trunk feeding two linear heads.
    SharedTrunk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub form: EncoderForm,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub q_latent: usize,
    pub d_covar: usize,
    #[serde(default = "default_wiring")]
    pub wiring: EncoderWiring,
}

fn default_wiring() -> EncoderWiring {
    EncoderWiring::Separate
}

impl EncoderSpec {
    pub fn new(form: EncoderForm, input_dim: usize, q_latent: usize, d_covar: usize) -> Self {
        Self {
            form,
            input_dim,
            hidden_dims: vec![128, 128],
            q_latent,
            d_covar,
            wiring: EncoderWiring::Separate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.q_latent == 0 {
            return Err(Error::config("q_latent", "must be at least 1"));
        }
        if self.input_dim == 0 {
            return Err(Error::config("input_dim", "must be at least 1"));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::config("hidden_dims", "widths must be positive"));
        }
        Ok(())
    }

    fn network_input_dim(&self) -> usize {
        match self.form {
            EncoderForm::SimpleNn => self.input_dim,
            EncoderForm::BatchAwareNn => self.input_dim + self.d_covar,
        }
    }

    fn batch_norm(&self) -> bool {
        self.form == EncoderForm::BatchAwareNn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// in × out
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..bound)),
            b: Array1::from_shape_fn(fan_out, |_| rng.gen_range(-bound..bound)),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.dim()),
            b: Array1::zeros(self.b.len()),
        }
    }

    fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients and returns `∂/∂x`.
    fn backward(&self, x: ArrayView2<f64>, g: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(&g);
        grad.b += &g.sum_axis(Axis(0));
        g.dot(&self.w.t())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }

    fn zeros_like(&self) -> Self {
        let w = self.gamma.len();
        Self {
            gamma: Array1::zeros(w),
            beta: Array1::zeros(w),
            running_mean: Array1::zeros(w),
            running_var: Array1::zeros(w),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    pub linear: Linear,
    pub norm: Option<BatchNorm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trunk {
    pub layers: Vec<HiddenLayer>,
}

/// Encoder weights. With separate wiring `trunks[0]` feeds the mean head and
/// `trunks[1]` the variance head; with a shared trunk there is one.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub trunks: Vec<Trunk>,
    pub mean_head: Linear,
    pub var_head: Linear,
}

impl EncoderParams {
    pub fn init<R: Rng>(spec: &EncoderSpec, rng: &mut R) -> Self {
        let n_trunks = match spec.wiring {
            EncoderWiring::Separate => 2,
            EncoderWiring::SharedTrunk => 1,
        };
        let mut trunks = Vec::with_capacity(n_trunks);
        let mut heads = Vec::with_capacity(2);
        for t in 0..2 {
            if t < n_trunks {
                let mut fan_in = spec.network_input_dim();
                let mut layers = Vec::new();
                for &h in &spec.hidden_dims {
                    layers.push(HiddenLayer {
                        linear: Linear::init(rng, fan_in, h),
                        norm: spec.batch_norm().then(|| BatchNorm::new(h)),
                    });
                    fan_in = h;
                }
                trunks.push(Trunk { layers });
            }
            let fan_in = spec.hidden_dims.last().copied().unwrap_or(spec.network_input_dim());
            heads.push(Linear::init(rng, fan_in, spec.q_latent));
        }
        let var_head = heads.pop().expect("two heads");
        let mean_head = heads.pop().expect("two heads");
        Self {
            trunks,
            mean_head,
            var_head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            trunks: self
                .trunks
                .iter()
                .map(|t| Trunk {
                    layers: t
                        .layers
                        .iter()
                        .map(|l| HiddenLayer {
                            linear: l.linear.zeros_like(),
                            norm: l.norm.as_ref().map(BatchNorm::zeros_like),
                        })
                        .collect(),
                })
                .collect(),
            mean_head: self.mean_head.zeros_like(),
            var_head: self.var_head.zeros_like(),
        }
    }

    /// Trainable arrays, in a fixed order, keyed by path.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (t, trunk) in self.trunks.iter().enumerate() {
            for (i, l) in trunk.layers.iter().enumerate() {
                out.push((format!("encoder.trunk{t}.layer{i}.w"), slice(&l.linear.w)));
                out.push((format!("encoder.trunk{t}.layer{i}.b"), l.linear.b.as_slice().unwrap()));
                if let Some(bn) = &l.norm {
                    out.push((format!("encoder.trunk{t}.layer{i}.bn.gamma"), bn.gamma.as_slice().unwrap()));
                    out.push((format!("encoder.trunk{t}.layer{i}.bn.beta"), bn.beta.as_slice().unwrap()));
                }
            }
        }
        out.push(("encoder.mean_head.w".into(), slice(&self.mean_head.w)));
        out.push(("encoder.mean_head.b".into(), self.mean_head.b.as_slice().unwrap()));
        out.push(("encoder.var_head.w".into(), slice(&self.var_head.w)));
        out.push(("encoder.var_head.b".into(), self.var_head.b.as_slice().unwrap()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (t, trunk) in self.trunks.iter_mut().enumerate() {
            for (i, l) in trunk.layers.iter_mut().enumerate() {
                out.push((format!("encoder.trunk{t}.layer{i}.w"), slice_mut(&mut l.linear.w)));
                out.push((format!("encoder.trunk{t}.layer{i}.b"), l.linear.b.as_slice_mut().unwrap()));
                if let Some(bn) = &mut l.norm {
                    out.push((format!("encoder.trunk{t}.layer{i}.bn.gamma"), bn.gamma.as_slice_mut().unwrap()));
                    out.push((format!("encoder.trunk{t}.layer{i}.bn.beta"), bn.beta.as_slice_mut().unwrap()));
                }
            }
        }
        out.push(("encoder.mean_head.w".into(), slice_mut(&mut self.mean_head.w)));
        out.push(("encoder.mean_head.b".into(), self.mean_head.b.as_slice_mut().unwrap()));
        out.push(("encoder.var_head.w".into(), slice_mut(&mut self.var_head.w)));
        out.push(("encoder.var_head.b".into(), self.var_head.b.as_slice_mut().unwrap()));
        out
    }

    /// Batch-norm running statistics (not trained by gradient).
    pub fn buffers_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (t, trunk) in self.trunks.iter_mut().enumerate() {
            for (i, l) in trunk.layers.iter_mut().enumerate() {
                if let Some(bn) = &mut l.norm {
                    out.push((format!("encoder.trunk{t}.layer{i}.bn.running_mean"), bn.running_mean.as_slice_mut().unwrap()));
                    out.push((format!("encoder.trunk{t}.layer{i}.bn.running_var"), bn.running_var.as_slice_mut().unwrap()));
                }
            }
        }
        out
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// averages.
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        for (trunk, per_layer) in self.trunks.iter_mut().zip(&stats.0) {
            for (layer, s) in trunk.layers.iter_mut().zip(per_layer) {
                if let (Some(bn), Some((mean, var_unbiased))) = (&mut layer.norm, s) {
                    bn.running_mean = &bn.running_mean * (1.0 - BN_MOMENTUM) + &(mean * BN_MOMENTUM);
                    bn.running_var = &bn.running_var * (1.0 - BN_MOMENTUM) + &(var_unbiased * BN_MOMENTUM);
                }
            }
        }
    }
}

pub(crate) fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

pub(crate) fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub mean: Array2<f64>,
    pub var: Array2<f64>,
}

/// Per-trunk, per-layer `(batch mean, unbiased batch variance)` from a
/// training-mode pass.
#[derive(Debug, Clone, Default)]
pub struct BatchStats(pub Vec<Vec<Option<(Array1<f64>, Array1<f64>)>>>);

struct LayerCache {
    input: Array2<f64>,
    pre_norm: Array2<f64>,
    norm: Option<NormCache>,
    pre_act: Array2<f64>,
}

struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    batch_stats: bool,
}

struct TrunkCache {
    layers: Vec<LayerCache>,
    output: Array2<f64>,
}

/// Intermediate values kept for the backward pass.
pub struct EncoderCache {
    trunks: Vec<TrunkCache>,
    var_pre: Array2<f64>,
}

fn trunk_forward(trunk: &Trunk, x: Array2<f64>, mode: Mode) -> (TrunkCache, Vec<Option<(Array1<f64>, Array1<f64>)>>) {
    let mut h = x;
    let mut layers = Vec::with_capacity(trunk.layers.len());
    let mut stats = Vec::with_capacity(trunk.layers.len());
    for layer in &trunk.layers {
        let z = layer.linear.forward(h.view());
        let (pre_act, norm, stat) = match &layer.norm {
            None => (z.clone(), None, None),
            Some(bn) => {
                let b = z.nrows() as f64;
                let (mean, var, batch_stats) = match mode {
                    Mode::Train => {
                        let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
                        let var = z.var_axis(Axis(0), 0.0);
                        (mean, var, true)
                    }
                    Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone(), false),
                };
                let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                let xhat = (&z - &mean) * &inv_std;
                let out = &xhat * &bn.gamma + &bn.beta;
                let stat = batch_stats.then(|| {
                    let unbiased = if b > 1.0 { &var * (b / (b - 1.0)) } else { var.clone() };
                    (mean.clone(), unbiased)
                });
                (
                    out,
                    Some(NormCache {
                        xhat,
                        inv_std,
                        batch_stats,
                    }),
                    stat,
                )
            }
        };
        let next = pre_act.mapv(softplus);
        layers.push(LayerCache {
            input: h,
            pre_norm: z,
            norm,
            pre_act,
        });
        stats.push(stat);
        h = next;
    }
    (TrunkCache { layers, output: h }, stats)
}

fn trunk_backward(trunk: &Trunk, cache: &TrunkCache, g_out: Array2<f64>, grad: &mut Trunk) -> Array2<f64> {
    let mut g = g_out;
    for ((layer, lc), lg) in trunk.layers.iter().zip(&cache.layers).zip(grad.layers.iter_mut()).rev() {
        let g_pre_act = g * &lc.pre_act.mapv(softplus_grad);
        let g_z = match (&layer.norm, &lc.norm, &mut lg.norm) {
            (Some(bn), Some(nc), Some(bg)) => {
                bg.gamma += &(&g_pre_act * &nc.xhat).sum_axis(Axis(0));
                bg.beta += &g_pre_act.sum_axis(Axis(0));
                let g_xhat = &g_pre_act * &bn.gamma;
                if nc.batch_stats {
                    let b = g_xhat.nrows() as f64;
                    let sum_g = g_xhat.sum_axis(Axis(0));
                    let sum_gx = (&g_xhat * &nc.xhat).sum_axis(Axis(0));
                    let inner = &g_xhat * b - &sum_g - &(&nc.xhat * &sum_gx);
                    inner * &(&nc.inv_std / b)
                } else {
                    g_xhat * &nc.inv_std
                }
            }
            _ => g_pre_act,
        };
        let _ = &lc.pre_norm;
        g = layer.linear.backward(lc.input.view(), g_z.view(), &mut lg.linear);
    }
    g
}

fn network_input(spec: &EncoderSpec, rows: ArrayView2<f64>, phi: ArrayView2<f64>) -> Result<Array2<f64>> {
    if rows.ncols() != spec.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "encoder expects {} inputs, got {}",
            spec.input_dim,
            rows.ncols()
        )));
    }
    match spec.form {
        EncoderForm::SimpleNn => Ok(rows.to_owned()),
        EncoderForm::BatchAwareNn => {
            if phi.ncols() != spec.d_covar || phi.nrows() != rows.nrows() {
                return Err(Error::ShapeMismatch(format!(
                    "covariates {:?} for {} rows and D_covar={}",
                    phi.dim(),
                    rows.nrows(),
                    spec.d_covar
                )));
            }
            Ok(concatenate![Axis(1), rows, phi])
        }
    }
}

/// Forward pass keeping the intermediates for [`encode_backward`].
pub fn encode_with_cache(
    spec: &EncoderSpec,
    params: &EncoderParams,
    rows: ArrayView2<f64>,
    phi: ArrayView2<f64>,
    mode: Mode,
) -> Result<(LatentPosterior, EncoderCache, BatchStats)> {
    let input = network_input(spec, rows, phi)?;
    let mut caches = Vec::with_capacity(params.trunks.len());
    let mut stats = Vec::with_capacity(params.trunks.len());
    for trunk in &params.trunks {
        let (c, s) = trunk_forward(trunk, input.clone(), mode);
        caches.push(c);
        stats.push(s);
    }
    let mean = params.mean_head.forward(caches[0].output.view());
    let var_src = &caches[caches.len() - 1].output;
    let var_pre = params.var_head.forward(var_src.view());
    let var = var_pre.mapv(|v| softplus(v) + VAR_FLOOR);
    Ok((
        LatentPosterior { mean, var },
        EncoderCache { trunks: caches, var_pre },
        BatchStats(stats),
    ))
}

/// `q(x_n)` for each row. Training mode normalizes with batch statistics but
/// does not touch the running averages; see
/// [`EncoderParams::update_running_stats`].
pub fn encode(
    spec: &EncoderSpec,
    params: &EncoderParams,
    rows: ArrayView2<f64>,
    phi: ArrayView2<f64>,
    mode: Mode,
) -> Result<LatentPosterior> {
    Ok(encode_with_cache(spec, params, rows, phi, mode)?.0)
}

/// Accumulates into `grad` the parameter gradients given `∂L/∂mean` and
/// `∂L/∂var`.
pub fn encode_backward(
    params: &EncoderParams,
    cache: &EncoderCache,
    g_mean: ArrayView2<f64>,
    g_var: ArrayView2<f64>,
    grad: &mut EncoderParams,
) {
    let g_var_pre = &g_var * &cache.var_pre.mapv(softplus_grad);
    let last = cache.trunks.len() - 1;
    let g_mean_trunk = params
        .mean_head
        .backward(cache.trunks[0].output.view(), g_mean, &mut grad.mean_head);
    let g_var_trunk = params
        .var_head
        .backward(cache.trunks[last].output.view(), g_var_pre.view(), &mut grad.var_head);
    if last == 0 {
        let g = g_mean_trunk + g_var_trunk;
        trunk_backward(&params.trunks[0], &cache.trunks[0], g, &mut grad.trunks[0]);
    } else {
        trunk_backward(&params.trunks[0], &cache.trunks[0], g_mean_trunk, &mut grad.trunks[0]);
        trunk_backward(&params.trunks[1], &cache.trunks[1], g_var_trunk, &mut grad.trunks[1]);
    }
}

/// Max relative error between backprop and central differences for the
/// test loss `Σ mean + Σ var`.
pub fn encoder_grad_check(
    spec: &EncoderSpec,
    params: &EncoderParams,
    rows: ArrayView2<f64>,
    phi: ArrayView2<f64>,
    mode: Mode,
) -> Result<f64> {
    let loss = |p: &EncoderParams| -> Result<f64> {
        let post = encode(spec, p, rows, phi, mode)?;
        Ok(post.mean.sum() + post.var.sum())
    };
    let (post, cache, _) = encode_with_cache(spec, params, rows, phi, mode)?;
    let mut grad = params.zeros_like();
    let ones_m = Array2::ones(post.mean.dim());
    let ones_v = Array2::ones(post.var.dim());
    encode_backward(params, &cache, ones_m.view(), ones_v.view(), &mut grad);
    let analytic: Vec<f64> = grad.tensors().into_iter().flat_map(|(_, s)| s.to_vec()).collect();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let n = analytic.len();
    for k in 0..n {
        let mut up = params.clone();
        bump(&mut up, k, h);
        let mut dn = params.clone();
        bump(&mut dn, k, -h);
        let fd = (loss(&up)? - loss(&dn)?) / (2.0 * h);
        let err = (analytic[k] - fd).abs() / fd.abs().max(analytic[k].abs()).max(1e-2);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn bump(p: &mut EncoderParams, flat_index: usize, h: f64) {
    let mut k = flat_index;
    for (_, s) in p.tensors_mut() {
        if k < s.len() {
            s[k] += h;
            return;
        }
        k -= s.len();
    }
    panic!("flat index out of range");
}
