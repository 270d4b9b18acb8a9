//! Sparse variational GP decoder: inducing-point posterior, marginal `q(f)`,
//! KL terms, and the mini-batch ELBO with its reverse-mode gradient.

use std::ops::Range;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gaussian_pipeline, library_normalize, raw_counts, CountDataset, PipelineTag};
use crate::encoder::{
    encode, encode_backward, encode_with_cache, slice, slice_mut, BatchStats, EncoderParams, EncoderSpec,
    LatentPosterior, Mode,
};
use crate::error::{Error, Result};
use crate::kernels::{
    diag_backward, gram, gram_backward, gram_square, kernel_diag, mean_backward, mean_function, mean_matrix, softplus,
    softplus_grad, softplus_inv, KernelForm, KernelGrads, KernelParams, KernelSpec,
};
use crate::likelihoods::{loglik_row_grad, row_normalizer, LikelihoodSpec, DEFAULT_NB_SCALE};
use crate::linalg::{chol_inverse, jittered_cholesky, log_det_from_chol};

pub const DEFAULT_INDUCING: usize = 64;
pub const FVAR_FLOOR: f64 = 1e-10;
/// Initial `S_d` is this multiple of the identity.
pub const S_INIT: f64 = 0.1;
const GENE_CHUNK: usize = 16;
const EXPORT_CHUNK: usize = 512;

/// Static shape and form of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kernel: KernelSpec,
    pub likelihood: LikelihoodSpec,
    pub encoder: EncoderSpec,
    pub n_genes: usize,
    pub n_inducing: usize,
    /// Needed for per-cell log-scales of the learned-scale likelihood.
    pub n_cells: usize,
    /// Per-gene standardization in the Gaussian pipeline.
    #[serde(default)]
    pub gaussian_standardize: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.likelihood.validate()?;
        self.encoder.validate()?;
        if self.n_inducing == 0 {
            return Err(Error::config("n_inducing", "must be at least 1"));
        }
        if self.n_genes == 0 {
            return Err(Error::config("n_genes", "must be at least 1"));
        }
        if self.encoder.q_latent != self.kernel.q_latent {
            return Err(Error::config("q_latent", "encoder and kernel disagree"));
        }
        if self.encoder.d_covar != self.kernel.d_covar {
            return Err(Error::config("d_covar", "encoder and kernel disagree"));
        }
        Ok(())
    }
}

/// Every trainable quantity, in unconstrained form. The same type holds
/// gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub raw_sigma_f2: f64,
    pub raw_lengthscales: Array1<f64>,
    pub raw_nu: f64,
    pub raw_period_lengthscale: f64,
    pub mu_f: f64,
    /// D × D_covar.
    pub zeta: Array2<f64>,
    /// D × (Q + D_covar), AugmentedLinear only.
    pub w: Option<Array2<f64>>,
    /// Inducing locations, M × Q.
    pub z: Array2<f64>,
    /// Pseudo-covariates of the inducing points before the row softmax.
    pub pseudo_phi_raw: Array2<f64>,
    /// `m_d − μ_u` for each gene, D × M.
    pub q_mean: Array2<f64>,
    /// Lower-triangular factors of `S_d`, D × M × M.
    pub q_chol: Array3<f64>,
    pub raw_sigma_y2: f64,
    /// Per-cell log library scale (learned-scale likelihood only, else empty).
    pub log_scale: Array1<f64>,
}

impl ModelParams {
    pub fn init<R: Rng>(spec: &ModelSpec, rng: &mut R) -> Self {
        let k = &spec.kernel;
        let (m, d) = (spec.n_inducing, spec.n_genes);
        let encoder = EncoderParams::init(&spec.encoder, rng);
        let z = Array2::from_shape_fn((m, k.q_latent), |_| rng.sample::<f64, _>(StandardNormal));
        let mut q_chol = Array3::zeros((d, m, m));
        let diag = S_INIT.sqrt();
        for g in 0..d {
            for i in 0..m {
                q_chol[[g, i, i]] = diag;
            }
        }
        let sigma_y2 = match spec.likelihood {
            LikelihoodSpec::Gaussian { sigma_y2 } => sigma_y2,
            _ => 1.0,
        };
        let n_scales = match spec.likelihood {
            LikelihoodSpec::NbLearnedScale { .. } => spec.n_cells,
            _ => 0,
        };
        let one = softplus_inv(1.0);
        Self {
            encoder,
            raw_sigma_f2: one,
            raw_lengthscales: Array1::from_elem(k.q_latent, one),
            raw_nu: one,
            raw_period_lengthscale: one,
            mu_f: 0.0,
            zeta: Array2::zeros((d, k.d_covar)),
            w: (k.form == KernelForm::AugmentedLinear).then(|| Array2::zeros((d, k.augmented_dim()))),
            z,
            pseudo_phi_raw: Array2::zeros((m, k.d_covar)),
            q_mean: Array2::zeros((d, m)),
            q_chol,
            raw_sigma_y2: softplus_inv(sigma_y2),
            log_scale: Array1::from_elem(n_scales, DEFAULT_NB_SCALE.ln()),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            raw_sigma_f2: 0.0,
            raw_lengthscales: Array1::zeros(self.raw_lengthscales.len()),
            raw_nu: 0.0,
            raw_period_lengthscale: 0.0,
            mu_f: 0.0,
            zeta: Array2::zeros(self.zeta.dim()),
            w: self.w.as_ref().map(|w| Array2::zeros(w.dim())),
            z: Array2::zeros(self.z.dim()),
            pseudo_phi_raw: Array2::zeros(self.pseudo_phi_raw.dim()),
            q_mean: Array2::zeros(self.q_mean.dim()),
            q_chol: Array3::zeros(self.q_chol.dim()),
            raw_sigma_y2: 0.0,
            log_scale: Array1::zeros(self.log_scale.len()),
        }
    }

    /// Trainable arrays keyed by path, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = self.encoder.tensors();
        out.push(("kernel.raw_sigma_f2".into(), std::slice::from_ref(&self.raw_sigma_f2)));
        out.push(("kernel.raw_lengthscales".into(), self.raw_lengthscales.as_slice().unwrap()));
        out.push(("kernel.raw_nu".into(), std::slice::from_ref(&self.raw_nu)));
        out.push(("kernel.raw_period_lengthscale".into(), std::slice::from_ref(&self.raw_period_lengthscale)));
        out.push(("mean.mu_f".into(), std::slice::from_ref(&self.mu_f)));
        out.push(("mean.zeta".into(), slice(&self.zeta)));
        if let Some(w) = &self.w {
            out.push(("mean.w".into(), slice(w)));
        }
        out.push(("inducing.z".into(), slice(&self.z)));
        out.push(("inducing.pseudo_phi_raw".into(), slice(&self.pseudo_phi_raw)));
        out.push(("inducing.q_mean".into(), slice(&self.q_mean)));
        out.push(("inducing.q_chol".into(), self.q_chol.as_slice().unwrap()));
        out.push(("likelihood.raw_sigma_y2".into(), std::slice::from_ref(&self.raw_sigma_y2)));
        out.push(("likelihood.log_scale".into(), self.log_scale.as_slice().unwrap()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = self.encoder.tensors_mut();
        out.push(("kernel.raw_sigma_f2".into(), std::slice::from_mut(&mut self.raw_sigma_f2)));
        out.push(("kernel.raw_lengthscales".into(), self.raw_lengthscales.as_slice_mut().unwrap()));
        out.push(("kernel.raw_nu".into(), std::slice::from_mut(&mut self.raw_nu)));
        out.push(("kernel.raw_period_lengthscale".into(), std::slice::from_mut(&mut self.raw_period_lengthscale)));
        out.push(("mean.mu_f".into(), std::slice::from_mut(&mut self.mu_f)));
        out.push(("mean.zeta".into(), slice_mut(&mut self.zeta)));
        if let Some(w) = &mut self.w {
            out.push(("mean.w".into(), slice_mut(w)));
        }
        out.push(("inducing.z".into(), slice_mut(&mut self.z)));
        out.push(("inducing.pseudo_phi_raw".into(), slice_mut(&mut self.pseudo_phi_raw)));
        out.push(("inducing.q_mean".into(), slice_mut(&mut self.q_mean)));
        out.push(("inducing.q_chol".into(), self.q_chol.as_slice_mut().unwrap()));
        out.push(("likelihood.raw_sigma_y2".into(), std::slice::from_mut(&mut self.raw_sigma_y2)));
        out.push(("likelihood.log_scale".into(), self.log_scale.as_slice_mut().unwrap()));
        out
    }

    pub fn kernel_params(&self) -> KernelParams {
        KernelParams {
            sigma_f2: softplus(self.raw_sigma_f2),
            lengthscales: self.raw_lengthscales.iter().map(|&v| softplus(v)).collect(),
            nu: softplus(self.raw_nu),
            period_lengthscale: softplus(self.raw_period_lengthscale),
            mu_f: self.mu_f,
            zeta: self.zeta.clone(),
            w: self.w.clone(),
        }
    }

    /// Row-softmax of the raw pseudo-covariates.
    pub fn pseudo_phi(&self) -> Array2<f64> {
        let mut out = self.pseudo_phi_raw.clone();
        for mut row in out.rows_mut() {
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        out
    }

    pub fn sigma_y2(&self) -> f64 {
        softplus(self.raw_sigma_y2)
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, s)| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub params: ModelParams,
}

impl ModelState {
    pub fn init<R: Rng>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let params = ModelParams::init(&spec, rng);
        Ok(Self { spec, params })
    }
}

/// Quantities derived from the inducing points that every evaluation reuses.
pub struct InducingFactors {
    pub kernel: KernelParams,
    pub pseudo_phi: Array2<f64>,
    /// Cholesky factor of the jittered `K_MM`.
    pub chol: Array2<f64>,
    pub kinv: Array2<f64>,
    pub jitter: f64,
}

pub fn inducing_factors(state: &ModelState) -> Result<InducingFactors> {
    let kernel = state.params.kernel_params();
    let pseudo_phi = state.params.pseudo_phi();
    let kmm = gram_square(&state.spec.kernel, &kernel, state.params.z.view(), pseudo_phi.view(), 0.0)?;
    let jc = jittered_cholesky(kmm.view())?;
    let kinv = chol_inverse(jc.factor.view());
    Ok(InducingFactors {
        kernel,
        pseudo_phi,
        chol: jc.factor,
        kinv,
        jitter: jc.jitter,
    })
}

/// Mean and variance of `q(f_d(x))`. The variance is floored at
/// [`FVAR_FLOOR`].
pub fn q_f_marginal(state: &ModelState, x: ArrayView1<f64>, phi: ArrayView1<f64>, d: usize) -> Result<(f64, f64)> {
    let f = inducing_factors(state)?;
    q_f_marginal_with(state, &f, x, phi, d)
}

pub fn q_f_marginal_with(
    state: &ModelState,
    f: &InducingFactors,
    x: ArrayView1<f64>,
    phi: ArrayView1<f64>,
    d: usize,
) -> Result<(f64, f64)> {
    let spec = &state.spec;
    if d >= spec.n_genes {
        return Err(Error::IndexOutOfRange {
            index: d,
            len: spec.n_genes,
        });
    }
    let p = &state.params;
    let x2 = x.insert_axis(Axis(0));
    let phi2 = phi.insert_axis(Axis(0));
    let kmx = gram(&spec.kernel, &f.kernel, p.z.view(), f.pseudo_phi.view(), x2, phi2)?;
    let a = f.kinv.dot(&kmx);
    let kxx = kernel_diag(&spec.kernel, &f.kernel, x2, phi2)[0];
    let mean = mean_function(&spec.kernel, &f.kernel, x2, phi2, d)?[0] + p.q_mean.row(d).dot(&a.column(0));
    let w = p.q_chol.index_axis(Axis(0), d).t().dot(&a.column(0));
    let var = kxx - a.column(0).dot(&kmx.column(0)) + w.dot(&w);
    Ok((mean, var.max(FVAR_FLOOR)))
}

/// `KL(N(mean, diag var) ‖ N(0, I))`.
pub fn kl_qx(mean: ArrayView1<f64>, var: ArrayView1<f64>) -> f64 {
    mean.iter()
        .zip(var.iter())
        .map(|(&m, &v)| 0.5 * (v + m * m - 1.0 - v.ln()))
        .sum()
}

/// `KL(q(u_d) ‖ p(u_d | Z))` for one gene.
pub fn kl_qu(state: &ModelState, d: usize) -> Result<f64> {
    if d >= state.spec.n_genes {
        return Err(Error::IndexOutOfRange {
            index: d,
            len: state.spec.n_genes,
        });
    }
    let f = inducing_factors(state)?;
    let logdet_k = log_det_from_chol(f.chol.view());
    Ok(kl_qu_gene(&state.params, &f.kinv, logdet_k, d).0)
}

/// KL for gene `d`, plus `K⁻¹L_d` for reuse by the gradient.
fn kl_qu_gene(p: &ModelParams, kinv: &Array2<f64>, logdet_k: f64, d: usize) -> (f64, Array2<f64>) {
    let l = p.q_chol.index_axis(Axis(0), d);
    let m = l.nrows();
    let kinv_l = kinv.dot(&l);
    let trace = (&kinv_l * &l).sum();
    let delta = p.q_mean.row(d);
    let maha = delta.dot(&kinv.dot(&delta));
    let logdet_s: f64 = (0..m).map(|i| 2.0 * l[[i, i]].abs().ln()).sum();
    (0.5 * (trace + maha - m as f64 + logdet_k - logdet_s), kinv_l)
}

/// Model inputs for every cell, precomputed once per dataset.
#[derive(Debug, Clone)]
pub struct TrainingData {
    /// `log1p` of library-normalized counts.
    pub enc_input: Array2<f64>,
    /// Likelihood-specific targets.
    pub targets: Array2<f64>,
    pub phi: Array2<f64>,
    /// Per-cell `f`-independent log-likelihood terms.
    pub normalizers: Vec<f64>,
    pub tag: PipelineTag,
    pub library_sizes: Vec<f64>,
}

impl TrainingData {
    pub fn from_dataset(ds: &CountDataset, likelihood: &LikelihoodSpec, gaussian_standardize: bool) -> Result<Self> {
        let processed = match *likelihood {
            LikelihoodSpec::Gaussian { .. } => gaussian_pipeline(ds, DEFAULT_NB_SCALE, gaussian_standardize)?,
            LikelihoodSpec::ApproxPoisson { scale, .. } => library_normalize(ds, scale)?,
            LikelihoodSpec::NbLearnedScale { .. } => raw_counts(ds),
        };
        likelihood.check_pipeline(&processed.tag)?;
        let enc_input = library_normalize(ds, DEFAULT_NB_SCALE)?.values.mapv(f64::ln_1p);
        let targets = processed.values;
        let normalizers = targets
            .outer_iter()
            .into_par_iter()
            .map(|row| row_normalizer(likelihood, row))
            .collect();
        Ok(Self {
            enc_input,
            targets,
            phi: ds.design().phi,
            normalizers,
            tag: processed.tag,
            library_sizes: ds.library_sizes(),
        })
    }

    pub fn n_cells(&self) -> usize {
        self.targets.nrows()
    }

    pub fn batch(&self, cells: &[usize]) -> Batch {
        Batch {
            enc_input: self.enc_input.select(Axis(0), cells),
            targets: self.targets.select(Axis(0), cells),
            phi: self.phi.select(Axis(0), cells),
            normalizers: cells.iter().map(|&c| self.normalizers[c]).collect(),
            cells: cells.to_vec(),
        }
    }
}

/// Rows of a mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub enc_input: Array2<f64>,
    pub targets: Array2<f64>,
    pub phi: Array2<f64>,
    pub normalizers: Vec<f64>,
    /// Dataset indices of the rows.
    pub cells: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Standard-normal draws for one stochastic ELBO evaluation.
#[derive(Debug, Clone)]
pub struct Noise {
    pub eps_x: Vec<Array2<f64>>,
    pub eps_f: Vec<Array2<f64>>,
}

impl Noise {
    pub fn draw<R: Rng>(rng: &mut R, b: usize, q: usize, d: usize, n_mc: usize) -> Self {
        let mut eps_x = Vec::with_capacity(n_mc);
        let mut eps_f = Vec::with_capacity(n_mc);
        for _ in 0..n_mc {
            eps_x.push(Array2::from_shape_fn((b, q), |_| rng.sample(StandardNormal)));
            eps_f.push(Array2::from_shape_fn((b, d), |_| rng.sample(StandardNormal)));
        }
        Self { eps_x, eps_f }
    }

    pub fn n_mc(&self) -> usize {
        self.eps_x.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ElboParts {
    pub elbo: f64,
    pub ell: f64,
    pub klx: f64,
    pub klu: f64,
    /// Scaled expected log-likelihood from each Monte-Carlo sample alone.
    pub ell_samples: Vec<f64>,
    /// Marginal variances raised to the floor in this evaluation.
    pub floor_events: usize,
    pub fvar_count: usize,
}

pub fn elbo_minibatch<R: Rng>(
    state: &ModelState,
    batch: &Batch,
    n_total: usize,
    n_mc: usize,
    rng: &mut R,
) -> Result<ElboParts> {
    let noise = draw_noise(state, batch, n_mc, rng)?;
    Ok(evaluate(state, batch, n_total, &noise, Mode::Train, false)?.parts)
}

/// ELBO estimate together with its exact gradient for the same draws.
pub fn elbo_grad<R: Rng>(
    state: &ModelState,
    batch: &Batch,
    n_total: usize,
    n_mc: usize,
    rng: &mut R,
) -> Result<ElboEvaluation> {
    let noise = draw_noise(state, batch, n_mc, rng)?;
    evaluate(state, batch, n_total, &noise, Mode::Train, true)
}

fn draw_noise<R: Rng>(state: &ModelState, batch: &Batch, n_mc: usize, rng: &mut R) -> Result<Noise> {
    if batch.is_empty() {
        return Err(Error::config("batch_size", "mini-batch is empty"));
    }
    if n_mc == 0 {
        return Err(Error::config("n_mc", "must be at least 1"));
    }
    Ok(Noise::draw(rng, batch.len(), state.spec.kernel.q_latent, state.spec.n_genes, n_mc))
}

pub struct ElboEvaluation {
    pub parts: ElboParts,
    /// ∂ELBO/∂params when requested.
    pub grad: Option<ModelParams>,
    /// Batch-norm statistics of the training-mode encoder pass.
    pub batch_stats: BatchStats,
}

fn gene_chunks(d: usize) -> Vec<Range<usize>> {
    (0..d).step_by(GENE_CHUNK).map(|s| s..(s + GENE_CHUNK).min(d)).collect()
}

fn lower_triangle(mut a: Array2<f64>) -> Array2<f64> {
    for i in 0..a.nrows() {
        for j in i + 1..a.ncols() {
            a[[i, j]] = 0.0;
        }
    }
    a
}

/// Adds kernel hyperparameter gradients (constrained) into `acc`.
fn add_hyper(acc: &mut KernelGrads, g: &KernelGrads) {
    acc.sigma_f2 += g.sigma_f2;
    acc.nu += g.nu;
    acc.period_lengthscale += g.period_lengthscale;
    for (a, b) in acc.lengthscales.iter_mut().zip(&g.lengthscales) {
        *a += b;
    }
}

/// Evaluates the ELBO for fixed noise, optionally with its gradient.
pub fn evaluate(
    state: &ModelState,
    batch: &Batch,
    n_total: usize,
    noise: &Noise,
    mode: Mode,
    want_grad: bool,
) -> Result<ElboEvaluation> {
    let spec = &state.spec;
    let p = &state.params;
    let ks = &spec.kernel;
    let b = batch.len();
    let dg = spec.n_genes;
    let m = spec.n_inducing;
    let n_mc = noise.n_mc();
    if batch.targets.ncols() != dg {
        return Err(Error::ShapeMismatch(format!(
            "batch has {} genes, model {}",
            batch.targets.ncols(),
            dg
        )));
    }
    let f = inducing_factors(state)?;
    let logdet_k = log_det_from_chol(f.chol.view());
    let (post, enc_cache, batch_stats) =
        encode_with_cache(&spec.encoder, &p.encoder, batch.enc_input.view(), batch.phi.view(), mode)?;
    let c_data = n_total as f64 / b as f64;

    let klx = c_data
        * post
            .mean
            .outer_iter()
            .zip(post.var.outer_iter())
            .map(|(mu, v)| kl_qx(mu, v))
            .sum::<f64>();

    let chunks = gene_chunks(dg);
    let klu_parts: Vec<(f64, Vec<Array2<f64>>)> = chunks
        .par_iter()
        .map(|r| {
            let mut kl = 0.0;
            let mut kinv_l = Vec::with_capacity(r.len());
            for d in r.clone() {
                let (v, kl_mat) = kl_qu_gene(p, &f.kinv, logdet_k, d);
                kl += v;
                if want_grad {
                    kinv_l.push(kl_mat);
                }
            }
            (kl, kinv_l)
        })
        .collect();
    let klu: f64 = klu_parts.iter().map(|(v, _)| v).sum();

    let mut grad = want_grad.then(|| p.zeros_like());
    let mut hyper = KernelGrads {
        x_a: Array2::zeros((0, ks.q_latent)),
        phi_a: Array2::zeros((0, ks.d_covar)),
        x_b: Array2::zeros((0, ks.q_latent)),
        phi_b: Array2::zeros((0, ks.d_covar)),
        sigma_f2: 0.0,
        lengthscales: vec![0.0; ks.q_latent],
        nu: 0.0,
        period_lengthscale: 0.0,
    };
    let mut g_kmm: Array2<f64> = Array2::zeros((m, m));
    let mut g_pphi: Array2<f64> = Array2::zeros((m, ks.d_covar));
    let mut g_post_mean: Array2<f64> = Array2::zeros(post.mean.dim());
    let mut g_post_var: Array2<f64> = Array2::zeros(post.var.dim());

    let lik_param = |row: usize| -> f64 {
        match spec.likelihood {
            LikelihoodSpec::Gaussian { .. } => p.sigma_y2(),
            LikelihoodSpec::ApproxPoisson { .. } => 0.0,
            LikelihoodSpec::NbLearnedScale { .. } => p.log_scale[batch.cells[row]],
        }
    };

    let mut ell_samples = Vec::with_capacity(n_mc);
    let mut floor_events = 0;
    let std_x = post.var.mapv(f64::sqrt);
    for s in 0..n_mc {
        let eps_x = &noise.eps_x[s];
        let eps_f = &noise.eps_f[s];
        let x = reparameterize(&post, eps_x);
        let kmn = gram(ks, &f.kernel, p.z.view(), f.pseudo_phi.view(), x.view(), batch.phi.view())?;
        let a = f.kinv.dot(&kmn);
        let kdiag = kernel_diag(ks, &f.kernel, x.view(), batch.phi.view());
        let qn = &kdiag - &(&a * &kmn).sum_axis(Axis(0));
        let fmean = mean_matrix(ks, &f.kernel, x.view(), batch.phi.view()) + a.t().dot(&p.q_mean.t());

        let fvar_chunks: Vec<Array2<f64>> = chunks
            .par_iter()
            .map(|r| {
                let mut out = Array2::zeros((b, r.len()));
                for (j, d) in r.clone().enumerate() {
                    let w = p.q_chol.index_axis(Axis(0), d).t().dot(&a);
                    let col = &qn + &(&w * &w).sum_axis(Axis(0));
                    out.column_mut(j).assign(&col);
                }
                out
            })
            .collect();
        let mut fvar = Array2::zeros((b, dg));
        for (r, c) in chunks.iter().zip(&fvar_chunks) {
            fvar.slice_mut(s![.., r.clone()]).assign(c);
        }
        let floored = fvar.mapv(|v: f64| !(v >= FVAR_FLOOR));
        floor_events += floored.iter().filter(|&&fl| fl).count();
        fvar.mapv_inplace(|v| v.max(FVAR_FLOOR));
        let fstd = fvar.mapv(f64::sqrt);
        let fsample = &fmean + &(&fstd * eps_f);

        let rows: Vec<_> = (0..b)
            .into_par_iter()
            .map(|n| {
                loglik_row_grad(
                    &spec.likelihood,
                    batch.targets.row(n),
                    fsample.row(n),
                    lik_param(n),
                    batch.normalizers[n],
                )
            })
            .collect::<Result<_>>()?;
        let ell_s: f64 = rows.iter().map(|r| r.value).sum();
        ell_samples.push(c_data * ell_s);

        let Some(g) = grad.as_mut() else { continue };
        let cs = c_data / n_mc as f64;
        let mut g_m = Array2::zeros((b, dg));
        for (n, r) in rows.iter().enumerate() {
            for (dst, &v) in g_m.row_mut(n).iter_mut().zip(&r.grad_f) {
                *dst = cs * v;
            }
            match spec.likelihood {
                LikelihoodSpec::Gaussian { .. } => g.raw_sigma_y2 += cs * r.grad_param,
                LikelihoodSpec::NbLearnedScale { .. } => g.log_scale[batch.cells[n]] += cs * r.grad_param,
                LikelihoodSpec::ApproxPoisson { .. } => {}
            }
        }
        let mut g_v = Array2::zeros((b, dg));
        Zip::from(&mut g_v)
            .and(&g_m)
            .and(eps_f)
            .and(&fstd)
            .and(&floored)
            .for_each(|gv, &gm, &e, &sd, &fl| {
                *gv = if fl { 0.0 } else { gm * e / (2.0 * sd) };
            });

        // Prior mean.
        let mg = mean_backward(ks, &f.kernel, x.view(), batch.phi.view(), g_m.view());
        g.mu_f += mg.mu_f;
        g.zeta += &mg.zeta;
        if let (Some(gw), Some(mgw)) = (g.w.as_mut(), mg.w.as_ref()) {
            *gw += mgw;
        }
        let mut g_x = mg.x;

        // fmean = μ + Aᵀ δᵀ
        g.q_mean += &g_m.t().dot(&a.t());
        let mut g_a = p.q_mean.t().dot(&g_m.t());

        // fvar = q + colsum((Lᵀ A)²)
        let g_q = g_v.sum_axis(Axis(1));
        let back_chunks: Vec<(Array2<f64>, Vec<Array2<f64>>)> = chunks
            .par_iter()
            .map(|r| {
                let mut ga = Array2::zeros((m, b));
                let mut gl = Vec::with_capacity(r.len());
                for d in r.clone() {
                    let l = p.q_chol.index_axis(Axis(0), d);
                    let mut gw = l.t().dot(&a);
                    let gv = g_v.column(d);
                    for mut row in gw.rows_mut() {
                        Zip::from(&mut row).and(&gv).for_each(|w, &v| *w *= 2.0 * v);
                    }
                    gl.push(lower_triangle(a.dot(&gw.t())));
                    ga += &l.dot(&gw);
                }
                (ga, gl)
            })
            .collect();
        for (r, (ga, gl)) in chunks.iter().zip(back_chunks) {
            g_a += &ga;
            for (d, gld) in r.clone().zip(gl) {
                let mut dst = g.q_chol.index_axis_mut(Axis(0), d);
                dst += &gld;
            }
        }
        // q = kdiag − colsum(A ∘ Kmn)
        let mut g_kmn = &a * &g_q.view().insert_axis(Axis(0)) * -1.0;
        g_a -= &(&kmn * &g_q.view().insert_axis(Axis(0)));
        // A = K⁻¹ Kmn
        let kinv_ga = f.kinv.dot(&g_a);
        g_kmn += &kinv_ga;
        g_kmm -= &kinv_ga.dot(&a.t());

        let kg = gram_backward(
            ks,
            &f.kernel,
            p.z.view(),
            f.pseudo_phi.view(),
            x.view(),
            batch.phi.view(),
            g_kmn.view(),
        );
        g.z += &kg.x_a;
        g_pphi += &kg.phi_a;
        g_x += &kg.x_b;
        add_hyper(&mut hyper, &kg);
        let dgrad = diag_backward(ks, &f.kernel, x.view(), batch.phi.view(), g_q.view());
        g_x += &dgrad.x_a;
        add_hyper(&mut hyper, &dgrad);

        // x = mean + √var ε
        g_post_mean += &g_x;
        g_post_var += &(&g_x * eps_x / (&std_x * 2.0));
    }

    let ell = ell_samples.iter().sum::<f64>() / n_mc as f64;
    let elbo = ell - klx - klu;
    let parts = ElboParts {
        elbo,
        ell,
        klx,
        klu,
        ell_samples,
        floor_events,
        fvar_count: n_mc * b * dg,
    };

    let Some(mut g) = grad else {
        return Ok(ElboEvaluation {
            parts,
            grad: None,
            batch_stats,
        });
    };

    // −klx
    g_post_mean.scaled_add(-c_data, &post.mean);
    g_post_var -= &(post.var.mapv(|v| 0.5 * (1.0 - 1.0 / v)) * c_data);
    encode_backward(&p.encoder, &enc_cache, g_post_mean.view(), g_post_var.view(), &mut g.encoder);

    // −klu
    let mut s_sum: Array2<f64> = Array2::zeros((m, m));
    for d in 0..dg {
        let l = p.q_chol.index_axis(Axis(0), d);
        s_sum += &l.dot(&l.t());
    }
    let delta_outer = p.q_mean.t().dot(&p.q_mean);
    let inner = &s_sum + &delta_outer;
    let kl_dk = (&f.kinv * dg as f64 - &f.kinv.dot(&inner).dot(&f.kinv)) * 0.5;
    g_kmm -= &kl_dk;
    g.q_mean -= &p.q_mean.dot(&f.kinv);
    for (r, (_, kinv_ls)) in chunks.iter().zip(&klu_parts) {
        for (d, kinv_l) in r.clone().zip(kinv_ls) {
            let l = p.q_chol.index_axis(Axis(0), d);
            let mut gl = lower_triangle(kinv_l.clone());
            for i in 0..m {
                gl[[i, i]] -= 1.0 / l[[i, i]];
            }
            let mut dst = g.q_chol.index_axis_mut(Axis(0), d);
            dst -= &gl;
        }
    }

    let kg = gram_backward(
        ks,
        &f.kernel,
        p.z.view(),
        f.pseudo_phi.view(),
        p.z.view(),
        f.pseudo_phi.view(),
        g_kmm.view(),
    );
    g.z += &kg.x_a;
    g.z += &kg.x_b;
    g_pphi += &kg.phi_a;
    g_pphi += &kg.phi_b;
    add_hyper(&mut hyper, &kg);

    g.raw_sigma_f2 += hyper.sigma_f2 * softplus_grad(p.raw_sigma_f2);
    g.raw_nu += hyper.nu * softplus_grad(p.raw_nu);
    g.raw_period_lengthscale += hyper.period_lengthscale * softplus_grad(p.raw_period_lengthscale);
    for (q, gl) in hyper.lengthscales.iter().enumerate() {
        g.raw_lengthscales[q] += gl * softplus_grad(p.raw_lengthscales[q]);
    }
    g.raw_sigma_y2 *= softplus_grad(p.raw_sigma_y2);

    // Softmax rows of the pseudo-covariates.
    for ((mut graw, pr), gp) in g
        .pseudo_phi_raw
        .outer_iter_mut()
        .zip(f.pseudo_phi.outer_iter())
        .zip(g_pphi.outer_iter())
    {
        let dot = pr.dot(&gp);
        Zip::from(&mut graw).and(&pr).and(&gp).for_each(|o, &pv, &gv| *o += pv * (gv - dot));
    }

    Ok(ElboEvaluation {
        parts,
        grad: Some(g),
        batch_stats,
    })
}

/// `mean + √var ⊙ ε`.
pub fn reparameterize(post: &LatentPosterior, eps: &Array2<f64>) -> Array2<f64> {
    &post.mean + &(post.var.mapv(f64::sqrt) * eps)
}

/// Parameter group of a tensor path, as reported by gradient checks.
pub fn param_group(path: &str) -> &'static str {
    const GROUPS: [&str; 9] = [
        "encoder",
        "kernel",
        "mean",
        "inducing.z",
        "inducing.pseudo_phi_raw",
        "inducing.q_mean",
        "inducing.q_chol",
        "likelihood.raw_sigma_y2",
        "likelihood.log_scale",
    ];
    GROUPS.into_iter().find(|g| path.starts_with(g)).unwrap_or("other")
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GroupError {
    pub group: String,
    pub max_rel_error: f64,
    pub n_checked: usize,
}

/// Compares [`evaluate`] gradients with central differences of step `h` on
/// up to `per_group` coordinates per parameter group (chosen with `rng`).
/// The relative error is scaled by `max(|analytic|, |numeric|, floor)`, the
/// floor being the larger of `1e-4` and the differencing roundoff level.
pub fn grad_check<R: Rng>(
    state: &ModelState,
    batch: &Batch,
    n_total: usize,
    noise: &Noise,
    per_group: usize,
    h: f64,
    rng: &mut R,
) -> Result<Vec<GroupError>> {
    let eval = evaluate(state, batch, n_total, noise, Mode::Train, true)?;
    let grad = eval.grad.expect("gradient requested");
    let mut coords: Vec<(String, usize, f64)> = Vec::new();
    for (path, s) in grad.tensors() {
        if path == "likelihood.log_scale" && !s.is_empty() {
            // Only cells in the batch carry gradient.
            for &c in &batch.cells {
                coords.push((path.clone(), c, s[c]));
            }
            continue;
        }
        let m = state.spec.n_inducing;
        for (i, &v) in s.iter().enumerate() {
            // Entries above the diagonal of the S factors are fixed zeros.
            if path == "inducing.q_chol" && (i % m) > (i / m) % m {
                continue;
            }
            coords.push((path.clone(), i, v));
        }
    }
    let mut by_group: Vec<(&'static str, Vec<(String, usize, f64)>)> = Vec::new();
    for c in coords {
        let g = param_group(&c.0);
        match by_group.iter_mut().find(|(name, _)| *name == g) {
            Some((_, v)) => v.push(c),
            None => by_group.push((g, vec![c])),
        }
    }
    let objective = |st: &ModelState| -> Result<f64> { Ok(evaluate(st, batch, n_total, noise, Mode::Train, false)?.parts.elbo) };
    // Central differences carry roughly ε·|ELBO|/h of roundoff.
    let floor = (1e-11 * eval.parts.elbo.abs() / h).max(1e-4);
    let mut out = Vec::new();
    for (group, mut list) in by_group {
        if list.is_empty() {
            continue;
        }
        if list.len() > per_group {
            for i in 0..per_group {
                let j = rng.gen_range(i..list.len());
                list.swap(i, j);
            }
            list.truncate(per_group);
        }
        let mut worst = 0.0f64;
        for (path, idx, analytic) in &list {
            let bumped = |delta: f64| -> Result<f64> {
                let mut st = state.clone();
                for (p, s) in st.params.tensors_mut() {
                    if &p == path {
                        s[*idx] += delta;
                    }
                }
                objective(&st)
            };
            let numeric = (bumped(h)? - bumped(-h)?) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs()).max(floor);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
        out.push(GroupError {
            group: group.to_string(),
            max_rel_error: worst,
            n_checked: list.len(),
        });
    }
    Ok(out)
}

/// Eval-mode encoding of every cell, in fixed-size chunks.
pub fn export_latents(state: &ModelState, data: &TrainingData) -> Result<LatentPosterior> {
    let n = data.n_cells();
    let q = state.spec.kernel.q_latent;
    let mut mean = Array2::zeros((n, q));
    let mut var = Array2::zeros((n, q));
    for start in (0..n).step_by(EXPORT_CHUNK) {
        let end = (start + EXPORT_CHUNK).min(n);
        let post = encode(
            &state.spec.encoder,
            &state.params.encoder,
            data.enc_input.slice(s![start..end, ..]),
            data.phi.slice(s![start..end, ..]),
            Mode::Eval,
        )?;
        mean.slice_mut(s![start..end, ..]).assign(&post.mean);
        var.slice_mut(s![start..end, ..]).assign(&post.var);
    }
    Ok(LatentPosterior { mean, var })
}

/// Exact log marginal likelihood of a Gaussian-likelihood GP at fixed `X`:
/// `log N(y_d | μ_d(X), K_XX + σ_y² I)` summed over genes.
pub fn exact_gaussian_log_marginal(
    state: &ModelState,
    x: ArrayView2<f64>,
    phi: ArrayView2<f64>,
    y: ArrayView2<f64>,
) -> Result<f64> {
    let ks = &state.spec.kernel;
    let kp = state.params.kernel_params();
    let sigma2 = state.params.sigma_y2();
    let k = gram_square(ks, &kp, x, phi, sigma2)?;
    let l = crate::linalg::cholesky(k.view()).ok_or(Error::NotPositiveDefinite { jitter: 0.0 })?;
    let logdet = log_det_from_chol(l.view());
    let mu = mean_matrix(ks, &kp, x, phi);
    let n = x.nrows() as f64;
    let mut total = 0.0;
    for d in 0..y.ncols() {
        let r = (&y.column(d) - &mu.column(d)).insert_axis(Axis(1));
        let alpha = crate::linalg::solve_lower(l.view(), r.view());
        total += -0.5 * (alpha.iter().map(|v| v * v).sum::<f64>() + logdet + n * (2.0 * std::f64::consts::PI).ln());
    }
    Ok(total)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    path: String,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    spec: ModelSpec,
    step: usize,
    seed: u64,
    tensors: Vec<TensorEntry>,
    buffers: Vec<TensorEntry>,
    data_file: String,
}

/// Checkpoint metadata read back with a state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointInfo {
    pub step: usize,
    pub seed: u64,
}

/// Writes `<stem>.json` (manifest) and `<stem>.bin` (little-endian f64s).
pub fn save_checkpoint(state: &ModelState, dir: &std::path::Path, stem: &str, info: CheckpointInfo) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let mut buffers = Vec::new();
    let mut push = |entries: &mut Vec<TensorEntry>, path: String, s: &[f64]| {
        entries.push(TensorEntry {
            path,
            offset: bytes.len() / 8,
            len: s.len(),
        });
        for v in s {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (path, s) in state.params.tensors() {
        push(&mut tensors, path, s);
    }
    let mut enc = state.params.encoder.clone();
    for (path, s) in enc.buffers_mut() {
        push(&mut buffers, path, s);
    }
    let data_file = format!("{stem}.bin");
    let manifest = CheckpointManifest {
        spec: state.spec.clone(),
        step: info.step,
        seed: info.seed,
        tensors,
        buffers,
        data_file: data_file.clone(),
    };
    std::fs::write(dir.join(&data_file), &bytes)?;
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(manifest_path: &std::path::Path) -> Result<(ModelState, CheckpointInfo)> {
    let manifest: CheckpointManifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    let dir = manifest_path.parent().unwrap_or(std::path::Path::new("."));
    let bytes = std::fs::read(dir.join(&manifest.data_file))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint("data file length is not a multiple of 8".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut state = ModelState::init(manifest.spec.clone(), &mut rng)?;
    let fill = |entries: &[TensorEntry], targets: Vec<(String, &mut [f64])>| -> Result<()> {
        if entries.len() != targets.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} arrays, manifest lists {}",
                targets.len(),
                entries.len()
            )));
        }
        for (e, (path, dst)) in entries.iter().zip(targets) {
            if e.path != path || e.len != dst.len() || e.offset + e.len > values.len() {
                return Err(Error::Checkpoint(format!("array {} does not match the model", e.path)));
            }
            dst.copy_from_slice(&values[e.offset..e.offset + e.len]);
        }
        Ok(())
    };
    fill(&manifest.tensors, state.params.tensors_mut())?;
    fill(&manifest.buffers, state.params.encoder.buffers_mut())?;
    Ok((
        state,
        CheckpointInfo {
            step: manifest.step,
            seed: manifest.seed,
        },
    ))
}
