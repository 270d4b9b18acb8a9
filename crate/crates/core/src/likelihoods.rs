//! Observation models: Gaussian on log-normalized data and negative binomial
//! with a softmax link over genes.

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::PipelineTag;
use crate::error::{Error, Result};

pub const DEFAULT_NB_SCALE: f64 = 5000.0;
pub const DEFAULT_NB_DISPERSION: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "form")]
pub enum LikelihoodSpec {
    /// `N(y | f, σ_y²)`; `sigma_y2` is the initial value, learned in training.
    Gaussian { sigma_y2: f64 },
    /// `NB(y | ℓ·softmax(f), r)` on rows normalized to `ℓ`.
    ApproxPoisson { scale: f64, r: f64 },
    /// `NB(y | exp(s_n)·softmax(f), r)` on raw counts, `s_n` learned per cell.
    NbLearnedScale { r: f64 },
}

impl Default for LikelihoodSpec {
    fn default() -> Self {
        LikelihoodSpec::ApproxPoisson {
            scale: DEFAULT_NB_SCALE,
            r: DEFAULT_NB_DISPERSION,
        }
    }
}

impl LikelihoodSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LikelihoodSpec::Gaussian { .. } => "gaussian",
            LikelihoodSpec::ApproxPoisson { .. } => "approx_poisson",
            LikelihoodSpec::NbLearnedScale { .. } => "nb_learned_scale",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive, got {v}")))
            }
        };
        match *self {
            LikelihoodSpec::Gaussian { sigma_y2 } => pos("sigma_y2", sigma_y2),
            LikelihoodSpec::ApproxPoisson { scale, r } => {
                pos("nb_scale", scale)?;
                pos("nb_dispersion", r)
            }
            LikelihoodSpec::NbLearnedScale { r } => pos("nb_dispersion", r),
        }
    }

    /// Checks that processed data carry the tag this likelihood consumes.
    pub fn check_pipeline(&self, tag: &PipelineTag) -> Result<()> {
        let ok = match (self, tag) {
            (LikelihoodSpec::Gaussian { .. }, PipelineTag::LogGaussian) => true,
            (LikelihoodSpec::ApproxPoisson { scale, .. }, PipelineTag::LibraryNormalized { target }) => {
                (scale - target).abs() <= 1e-9 * scale
            }
            (LikelihoodSpec::NbLearnedScale { .. }, PipelineTag::RawCounts) => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::PipelineMismatch {
                likelihood: self.name().to_string(),
                data: format!("{tag:?}"),
            })
        }
    }

    pub fn expected_pipeline(&self) -> PipelineTag {
        match *self {
            LikelihoodSpec::Gaussian { .. } => PipelineTag::LogGaussian,
            LikelihoodSpec::ApproxPoisson { scale, .. } => PipelineTag::LibraryNormalized { target: scale },
            LikelihoodSpec::NbLearnedScale { .. } => PipelineTag::RawCounts,
        }
    }
}

/// `ln Γ(y + r) − ln Γ(r)`, summing logs directly for small integer `y`.
fn ln_gamma_ratio(y: f64, r: f64) -> f64 {
    if y == 0.0 {
        return 0.0;
    }
    if y.fract() == 0.0 && y <= 256.0 {
        (0..y as u32).map(|k| (r + k as f64).ln()).sum()
    } else {
        ln_gamma(y + r) - ln_gamma(r)
    }
}

/// Terms of the NB log-pmf that depend only on `y` and `r`.
pub fn nb_log_normalizer(y: f64, r: f64) -> f64 {
    ln_gamma_ratio(y, r) - ln_gamma(y + 1.0)
}

fn nb_kernel(y: f64, mu: f64, r: f64) -> f64 {
    let log_r_mu = (r + mu).ln();
    let y_term = if y == 0.0 { 0.0 } else { y * (mu.ln() - log_r_mu) };
    -r * (mu / r).ln_1p() + y_term
}

/// Negative binomial log-pmf in mean / inverse-dispersion form. `y` may be a
/// nonnegative real (library-normalized data), using the gamma-function
/// extension of the factorials.
pub fn nb_logpmf(y: f64, mu: f64, r: f64) -> Result<f64> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::Domain(format!("negative binomial mean {mu}")));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Domain(format!("negative binomial dispersion {r}")));
    }
    if !(y >= 0.0 && y.is_finite()) {
        return Err(Error::Domain(format!("negative binomial observation {y}")));
    }
    Ok(nb_log_normalizer(y, r) + nb_kernel(y, mu, r))
}

pub fn poisson_logpmf(y: f64, mu: f64) -> f64 {
    let y_term = if y == 0.0 { 0.0 } else { y * mu.ln() };
    y_term - mu - ln_gamma(y + 1.0)
}

/// `|nb_logpmf(y, mu, r) − poisson_logpmf(y, mu)|` for `r ∈ {10², 10⁴, 10⁶}`.
pub fn nb_poisson_limit_check(mu: f64, y: f64) -> Result<[f64; 3]> {
    let pois = poisson_logpmf(y, mu);
    let mut out = [0.0; 3];
    for (slot, r) in out.iter_mut().zip([1e2, 1e4, 1e6]) {
        *slot = (nb_logpmf(y, mu, r)? - pois).abs();
    }
    Ok(out)
}

/// `ℓ · softmax(f)`, computed through a max-shifted log-sum-exp.
pub fn softmax_link(f_row: ArrayView1<f64>, scale: f64) -> Vec<f64> {
    let max = f_row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let sum: f64 = f_row.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    f_row.iter().map(|&v| scale * (v - lse).exp()).collect()
}

/// Row log-likelihood together with its derivatives.
#[derive(Debug, Clone)]
pub struct RowLik {
    pub value: f64,
    /// `∂/∂f_d`.
    pub grad_f: Vec<f64>,
    /// Derivative with respect to `σ_y²` (Gaussian) or the per-cell log-scale
    /// (learned-scale NB); zero for ApproxPoisson.
    pub grad_param: f64,
}

/// Per-cell likelihood parameter: `σ_y²` for the Gaussian form, the log
/// library scale for the learned-scale form, ignored otherwise.
pub fn loglik_row(spec: &LikelihoodSpec, y_row: ArrayView1<f64>, f_row: ArrayView1<f64>, param: f64) -> Result<f64> {
    let normalizer = row_normalizer(spec, y_row);
    Ok(loglik_row_grad(spec, y_row, f_row, param, normalizer)?.value)
}

/// Sum over genes of the `f`-independent part of the row log-likelihood.
pub fn row_normalizer(spec: &LikelihoodSpec, y_row: ArrayView1<f64>) -> f64 {
    match *spec {
        LikelihoodSpec::Gaussian { .. } => 0.0,
        LikelihoodSpec::ApproxPoisson { r, .. } | LikelihoodSpec::NbLearnedScale { r } => {
            y_row.iter().map(|&y| nb_log_normalizer(y, r)).sum()
        }
    }
}

/// Like [`loglik_row`] but with the `f`-independent normalizer supplied by
/// the caller, and returning derivatives.
pub fn loglik_row_grad(
    spec: &LikelihoodSpec,
    y_row: ArrayView1<f64>,
    f_row: ArrayView1<f64>,
    param: f64,
    normalizer: f64,
) -> Result<RowLik> {
    if y_row.len() != f_row.len() {
        return Err(Error::ShapeMismatch(format!(
            "observation row of {} genes vs latent row of {}",
            y_row.len(),
            f_row.len()
        )));
    }
    match *spec {
        LikelihoodSpec::Gaussian { .. } => {
            let s2 = param;
            if !(s2 > 0.0) {
                return Err(Error::Domain(format!("Gaussian variance {s2}")));
            }
            let d = y_row.len() as f64;
            let mut sq = 0.0;
            let grad_f: Vec<f64> = y_row
                .iter()
                .zip(f_row.iter())
                .map(|(&y, &f)| {
                    let r = y - f;
                    sq += r * r;
                    r / s2
                })
                .collect();
            let value = -0.5 * d * (2.0 * std::f64::consts::PI * s2).ln() - 0.5 * sq / s2;
            let grad_param = -0.5 * d / s2 + 0.5 * sq / (s2 * s2);
            Ok(RowLik {
                value,
                grad_f,
                grad_param,
            })
        }
        LikelihoodSpec::ApproxPoisson { scale, r } => {
            let mut out = nb_softmax_row(y_row, f_row, scale, r, normalizer)?;
            out.grad_param = 0.0;
            Ok(out)
        }
        LikelihoodSpec::NbLearnedScale { r } => nb_softmax_row(y_row, f_row, param.exp(), r, normalizer),
    }
}

/// NB row with means `scale · softmax(f)`; `grad_param` is the derivative
/// with respect to `ln scale`.
fn nb_softmax_row(y_row: ArrayView1<f64>, f_row: ArrayView1<f64>, scale: f64, r: f64, normalizer: f64) -> Result<RowLik> {
    let mu = softmax_link(f_row, scale);
    let mut value = normalizer;
    let mut h = Vec::with_capacity(mu.len());
    let mut h_sum = 0.0;
    for (&y, &m) in y_row.iter().zip(&mu) {
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::Domain(format!("negative binomial mean {m}")));
        }
        value += nb_kernel(y, m, r);
        // μ ∂/∂μ of the log-pmf.
        let hj = y - (r + y) * m / (r + m);
        h_sum += hj;
        h.push(hj);
    }
    let s: Vec<f64> = mu.iter().map(|m| m / scale).collect();
    let grad_f = h.iter().zip(&s).map(|(hj, sj)| hj - sj * h_sum).collect();
    Ok(RowLik {
        value,
        grad_f,
        grad_param: h_sum,
    })
}
