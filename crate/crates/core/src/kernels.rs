//! Covariance functions over latent points augmented with batch covariates,
//! the matching mean functions, and reverse-mode derivatives of both.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelForm {
    /// SE-ARD over the latents plus `ν ΦΦᵀ`.
    SeArdPlusLinear,
    /// Periodic factor on latent dimension 0 times SE-ARD, plus `ν ΦΦᵀ`.
    PerSeArdPlusLinear,
    /// `ν x̃ᵀx̃'` on latents concatenated with covariates.
    AugmentedLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub form: KernelForm,
    pub q_latent: usize,
    pub d_covar: usize,
    /// Whether the SE factor of the periodic form also covers dimension 0.
    #[serde(default = "default_true")]
    pub se_covers_periodic_dim: bool,
}

fn default_true() -> bool {
    true
}

impl KernelSpec {
    pub fn new(form: KernelForm, q_latent: usize, d_covar: usize) -> Result<Self> {
        if q_latent == 0 {
            return Err(Error::config("q_latent", "must be at least 1"));
        }
        if d_covar == 0 {
            return Err(Error::config("d_covar", "must be at least 1"));
        }
        Ok(Self {
            form,
            q_latent,
            d_covar,
            se_covers_periodic_dim: true,
        })
    }

    pub fn augmented_dim(&self) -> usize {
        self.q_latent + self.d_covar
    }
}

/// Constrained kernel hyperparameters and mean-function weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub sigma_f2: f64,
    pub lengthscales: Vec<f64>,
    pub nu: f64,
    pub period_lengthscale: f64,
    pub mu_f: f64,
    /// Per-gene covariate effects, D × D_covar.
    pub zeta: Array2<f64>,
    /// Per-gene linear mean weights over augmented latents, D × (Q + D_covar).
    pub w: Option<Array2<f64>>,
}

impl KernelParams {
    pub fn default_for(spec: &KernelSpec, n_genes: usize) -> Self {
        Self {
            sigma_f2: 1.0,
            lengthscales: vec![1.0; spec.q_latent],
            nu: 1.0,
            period_lengthscale: 1.0,
            mu_f: 0.0,
            zeta: Array2::zeros((n_genes, spec.d_covar)),
            w: match spec.form {
                KernelForm::AugmentedLinear => Some(Array2::zeros((n_genes, spec.augmented_dim()))),
                _ => None,
            },
        }
    }

    pub fn validate(&self, spec: &KernelSpec) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(name, format!("must be positive, got {v}")))
            }
        };
        pos("sigma_f2", self.sigma_f2)?;
        pos("period_lengthscale", self.period_lengthscale)?;
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(Error::config("nu", format!("must be nonnegative, got {}", self.nu)));
        }
        if self.lengthscales.len() != spec.q_latent {
            return Err(Error::config("lengthscales", "length must equal q_latent"));
        }
        for &l in &self.lengthscales {
            pos("lengthscales", l)?;
        }
        if self.zeta.ncols() != spec.d_covar {
            return Err(Error::config("zeta", "columns must equal d_covar"));
        }
        if !self.zeta.iter().all(|v| v.is_finite()) {
            return Err(Error::config("zeta", "must be finite"));
        }
        if spec.form == KernelForm::AugmentedLinear {
            match &self.w {
                Some(w) if w.ncols() == spec.augmented_dim() && w.nrows() == self.zeta.nrows() => {}
                _ => return Err(Error::config("w", "AugmentedLinear needs D × (Q + D_covar) weights")),
            }
        }
        Ok(())
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of softplus, i.e. the logistic function.
pub fn softplus_grad(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// `σ_f² exp(−Σ_q (x_q − x'_q)² / 2l_q²)`.
pub fn k_se_ard(x: ArrayView1<f64>, x2: ArrayView1<f64>, p: &KernelParams) -> f64 {
    p.sigma_f2 * se_factor(x, x2, &p.lengthscales, 0)
}

fn se_factor(x: ArrayView1<f64>, x2: ArrayView1<f64>, ls: &[f64], skip: usize) -> f64 {
    let mut s = 0.0;
    for q in skip..x.len() {
        let r = (x[q] - x2[q]) / ls[q];
        s += r * r;
    }
    (-0.5 * s).exp()
}

/// `exp(−2 sin²(|x₁ − x₁'|/2) / l₁²)`.
pub fn k_periodic(x1: f64, x1b: f64, p: &KernelParams) -> f64 {
    let s = ((x1 - x1b).abs() / 2.0).sin();
    (-2.0 * s * s / (p.period_lengthscale * p.period_lengthscale)).exp()
}

/// `ν ⟨φ, φ'⟩`.
pub fn k_linear_covariates(phi_i: ArrayView1<f64>, phi_j: ArrayView1<f64>, p: &KernelParams) -> f64 {
    p.nu * phi_i.dot(&phi_j)
}

/// `ν ⟨x̃, x̃'⟩` on augmented vectors.
pub fn k_augmented_linear(xt_i: ArrayView1<f64>, xt_j: ArrayView1<f64>, p: &KernelParams) -> f64 {
    p.nu * xt_i.dot(&xt_j)
}

fn check_shapes(
    spec: &KernelSpec,
    x: ArrayView2<f64>,
    phi: ArrayView2<f64>,
    what: &str,
) -> Result<()> {
    if x.ncols() != spec.q_latent || phi.ncols() != spec.d_covar || x.nrows() != phi.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: latents {:?} and covariates {:?} for Q={} D_covar={}",
            x.dim(),
            phi.dim(),
            spec.q_latent,
            spec.d_covar
        )));
    }
    Ok(())
}

fn entry(
    spec: &KernelSpec,
    p: &KernelParams,
    xa: ArrayView1<f64>,
    pa: ArrayView1<f64>,
    xb: ArrayView1<f64>,
    pb: ArrayView1<f64>,
) -> f64 {
    match spec.form {
        KernelForm::SeArdPlusLinear => k_se_ard(xa, xb, p) + k_linear_covariates(pa, pb, p),
        KernelForm::PerSeArdPlusLinear => {
            let skip = usize::from(!spec.se_covers_periodic_dim);
            p.sigma_f2 * k_periodic(xa[0], xb[0], p) * se_factor(xa, xb, &p.lengthscales, skip)
                + k_linear_covariates(pa, pb, p)
        }
        KernelForm::AugmentedLinear => p.nu * (xa.dot(&xb) + pa.dot(&pb)),
    }
}

/// Cross-covariance block between `(X, Φ_A)` and `(X2, Φ_B)`.
pub fn gram(
    spec: &KernelSpec,
    p: &KernelParams,
    x: ArrayView2<f64>,
    phi_a: ArrayView2<f64>,
    x2: ArrayView2<f64>,
    phi_b: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    check_shapes(spec, x, phi_a, "left block")?;
    check_shapes(spec, x2, phi_b, "right block")?;
    Ok(Array2::from_shape_fn((x.nrows(), x2.nrows()), |(i, j)| {
        entry(spec, p, x.row(i), phi_a.row(i), x2.row(j), phi_b.row(j))
    }))
}

/// Square Gram block with `jitter` added on the diagonal.
pub fn gram_square(
    spec: &KernelSpec,
    p: &KernelParams,
    x: ArrayView2<f64>,
    phi: ArrayView2<f64>,
    jitter: f64,
) -> Result<Array2<f64>> {
    let mut k = gram(spec, p, x, phi, x, phi)?;
    for i in 0..k.nrows() {
        k[[i, i]] += jitter;
    }
    Ok(k)
}

/// `k(x_n, x_n)` for every row.
pub fn kernel_diag(spec: &KernelSpec, p: &KernelParams, x: ArrayView2<f64>, phi: ArrayView2<f64>) -> Array1<f64> {
    Array1::from_shape_fn(x.nrows(), |i| entry(spec, p, x.row(i), phi.row(i), x.row(i), phi.row(i)))
}

/// Gradients of a scalar objective with respect to the inputs and the
/// constrained hyperparameters of a kernel evaluation.
#[derive(Debug, Clone)]
pub struct KernelGrads {
    pub x_a: Array2<f64>,
    pub phi_a: Array2<f64>,
    pub x_b: Array2<f64>,
    pub phi_b: Array2<f64>,
    pub sigma_f2: f64,
    pub lengthscales: Vec<f64>,
    pub nu: f64,
    pub period_lengthscale: f64,
}

impl KernelGrads {
    fn zeros(spec: &KernelSpec, a: usize, b: usize) -> Self {
        Self {
            x_a: Array2::zeros((a, spec.q_latent)),
            phi_a: Array2::zeros((a, spec.d_covar)),
            x_b: Array2::zeros((b, spec.q_latent)),
            phi_b: Array2::zeros((b, spec.d_covar)),
            sigma_f2: 0.0,
            lengthscales: vec![0.0; spec.q_latent],
            nu: 0.0,
            period_lengthscale: 0.0,
        }
    }
}

/// Accumulates `g · ∂k(a, b)` into `out`, rows `ia` / `ib`.
#[allow(clippy::too_many_arguments)]
fn entry_backward(
    spec: &KernelSpec,
    p: &KernelParams,
    xa: ArrayView1<f64>,
    pa: ArrayView1<f64>,
    xb: ArrayView1<f64>,
    pb: ArrayView1<f64>,
    g: f64,
    out: &mut KernelGrads,
    ia: usize,
    ib: Option<usize>,
) {
    let q = spec.q_latent;
    // Covariate term, shared by the two SE forms: ν ⟨pa, pb⟩.
    let lin_covar = |out: &mut KernelGrads| {
        out.nu += g * pa.dot(&pb);
        for c in 0..spec.d_covar {
            out.phi_a[[ia, c]] += g * p.nu * pb[c];
            match ib {
                Some(ib) => out.phi_b[[ib, c]] += g * p.nu * pa[c],
                None => out.phi_a[[ia, c]] += g * p.nu * pb[c],
            }
        }
    };
    let add_x = |out: &mut KernelGrads, d: usize, da: f64, db: f64| {
        out.x_a[[ia, d]] += da;
        match ib {
            Some(ib) => out.x_b[[ib, d]] += db,
            None => out.x_a[[ia, d]] += db,
        }
    };
    match spec.form {
        KernelForm::SeArdPlusLinear | KernelForm::PerSeArdPlusLinear => {
            let periodic = spec.form == KernelForm::PerSeArdPlusLinear;
            let skip = usize::from(periodic && !spec.se_covers_periodic_dim);
            let se = se_factor(xa, xb, &p.lengthscales, skip);
            let per = if periodic { k_periodic(xa[0], xb[0], p) } else { 1.0 };
            let k = p.sigma_f2 * per * se;
            out.sigma_f2 += g * per * se;
            for d in skip..q {
                let diff = xa[d] - xb[d];
                let l = p.lengthscales[d];
                let dk_dxa = -k * diff / (l * l);
                add_x(out, d, g * dk_dxa, -g * dk_dxa);
                out.lengthscales[d] += g * k * diff * diff / (l * l * l);
            }
            if periodic {
                let diff = xa[0] - xb[0];
                let lp = p.period_lengthscale;
                // d/dΔ exp(−2 sin²(Δ/2)/l²) = −exp(·) sin(Δ)/l²
                let dk_dxa = -k * diff.sin() / (lp * lp);
                add_x(out, 0, g * dk_dxa, -g * dk_dxa);
                let s = (diff.abs() / 2.0).sin();
                out.period_lengthscale += g * k * 4.0 * s * s / (lp * lp * lp);
            }
            lin_covar(out);
        }
        KernelForm::AugmentedLinear => {
            out.nu += g * (xa.dot(&xb) + pa.dot(&pb));
            for d in 0..q {
                add_x(out, d, g * p.nu * xb[d], g * p.nu * xa[d]);
            }
            lin_covar_aug(spec, p, pa, pb, g, out, ia, ib);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn lin_covar_aug(
    spec: &KernelSpec,
    p: &KernelParams,
    pa: ArrayView1<f64>,
    pb: ArrayView1<f64>,
    g: f64,
    out: &mut KernelGrads,
    ia: usize,
    ib: Option<usize>,
) {
    for c in 0..spec.d_covar {
        out.phi_a[[ia, c]] += g * p.nu * pb[c];
        match ib {
            Some(ib) => out.phi_b[[ib, c]] += g * p.nu * pa[c],
            None => out.phi_a[[ia, c]] += g * p.nu * pa[c],
        }
    }
}

/// Backpropagates `G = ∂L/∂K` through `K = gram(X, Φ_A, X2, Φ_B)`.
#[allow(clippy::too_many_arguments)]
pub fn gram_backward(
    spec: &KernelSpec,
    p: &KernelParams,
    x: ArrayView2<f64>,
    phi_a: ArrayView2<f64>,
    x2: ArrayView2<f64>,
    phi_b: ArrayView2<f64>,
    g: ArrayView2<f64>,
) -> KernelGrads {
    let mut out = KernelGrads::zeros(spec, x.nrows(), x2.nrows());
    for i in 0..x.nrows() {
        for j in 0..x2.nrows() {
            let gij = g[[i, j]];
            if gij == 0.0 {
                continue;
            }
            entry_backward(
                spec,
                p,
                x.row(i),
                phi_a.row(i),
                x2.row(j),
                phi_b.row(j),
                gij,
                &mut out,
                i,
                Some(j),
            );
        }
    }
    out
}

/// Backpropagates through [`kernel_diag`]; input gradients land in `x_a`/`phi_a`.
pub fn diag_backward(
    spec: &KernelSpec,
    p: &KernelParams,
    x: ArrayView2<f64>,
    phi: ArrayView2<f64>,
    g: ArrayView1<f64>,
) -> KernelGrads {
    let mut out = KernelGrads::zeros(spec, x.nrows(), 0);
    for i in 0..x.nrows() {
        if g[i] == 0.0 {
            continue;
        }
        entry_backward(spec, p, x.row(i), phi.row(i), x.row(i), phi.row(i), g[i], &mut out, i, None);
    }
    out
}

/// Prior mean for gene `d` at each row: `μ_f + Φ ζ_d`, or `μ_f + X̃ w_d` for
/// the augmented linear form.
pub fn mean_function(
    spec: &KernelSpec,
    p: &KernelParams,
    x: ArrayView2<f64>,
    phi: ArrayView2<f64>,
    d: usize,
) -> Result<Array1<f64>> {
    let n_genes = p.zeta.nrows();
    if d >= n_genes {
        return Err(Error::IndexOutOfRange { index: d, len: n_genes });
    }
    check_shapes(spec, x, phi, "mean function")?;
    let mut out = match (spec.form, &p.w) {
        (KernelForm::AugmentedLinear, Some(w)) => {
            let wd = w.row(d);
            let (wx, wp) = wd.split_at(Axis(0), spec.q_latent);
            x.dot(&wx) + phi.dot(&wp)
        }
        _ => phi.dot(&p.zeta.row(d)),
    };
    out += p.mu_f;
    Ok(out)
}

/// Prior means for every gene at once, rows × D.
pub fn mean_matrix(spec: &KernelSpec, p: &KernelParams, x: ArrayView2<f64>, phi: ArrayView2<f64>) -> Array2<f64> {
    let mut out = match (spec.form, &p.w) {
        (KernelForm::AugmentedLinear, Some(w)) => {
            let (wx, wp) = w.view().split_at(Axis(1), spec.q_latent);
            x.dot(&wx.t()) + phi.dot(&wp.t())
        }
        _ => phi.dot(&p.zeta.t()),
    };
    out += p.mu_f;
    out
}

pub struct MeanGrads {
    pub mu_f: f64,
    pub zeta: Array2<f64>,
    pub w: Option<Array2<f64>>,
    pub x: Array2<f64>,
    pub phi: Array2<f64>,
}

/// Backpropagates `G = ∂L/∂μ` (rows × D) through [`mean_matrix`].
pub fn mean_backward(
    spec: &KernelSpec,
    p: &KernelParams,
    x: ArrayView2<f64>,
    phi: ArrayView2<f64>,
    g: ArrayView2<f64>,
) -> MeanGrads {
    let mu_f = g.sum();
    match (spec.form, &p.w) {
        (KernelForm::AugmentedLinear, Some(w)) => {
            let (wx, wp) = w.view().split_at(Axis(1), spec.q_latent);
            let gw_x = g.t().dot(&x);
            let gw_p = g.t().dot(&phi);
            let gw = ndarray::concatenate![Axis(1), gw_x, gw_p];
            MeanGrads {
                mu_f,
                zeta: Array2::zeros(p.zeta.dim()),
                w: Some(gw),
                x: g.dot(&wx),
                phi: g.dot(&wp),
            }
        }
        _ => MeanGrads {
            mu_f,
            zeta: g.t().dot(&phi),
            w: None,
            x: Array2::zeros(x.dim()),
            phi: g.dot(&p.zeta),
        },
    }
}
