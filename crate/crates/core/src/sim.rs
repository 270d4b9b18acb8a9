//! Hierarchical Gamma–Poisson count simulation with cell-type and batch
//! effects (the core of the Splat model without dropout or BCV noise).

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::CountDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_cells_per_batch: usize,
    pub n_genes: usize,
    pub n_groups: usize,
    pub n_batches: usize,
    /// Shape of the Gamma prior on gene base means.
    pub mean_shape: f64,
    /// Rate of the Gamma prior on gene base means.
    pub mean_rate: f64,
    pub de_prob: f64,
    pub de_logfc_sigma: f64,
    pub batch_logfc_sigma: f64,
    pub lib_loc: f64,
    pub lib_scale: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_cells_per_batch: 1000,
            n_genes: 500,
            n_groups: 3,
            n_batches: 2,
            mean_shape: 0.6,
            mean_rate: 0.3,
            de_prob: 0.1,
            de_logfc_sigma: 1.0,
            batch_logfc_sigma: 0.3,
            lib_loc: 5000f64.ln(),
            lib_scale: 0.3,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let at_least_one = [
            ("n_cells_per_batch", self.n_cells_per_batch),
            ("n_genes", self.n_genes),
            ("n_groups", self.n_groups),
            ("n_batches", self.n_batches),
        ];
        for (field, v) in at_least_one {
            if v < 1 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.de_prob) {
            return Err(Error::config("de_prob", format!("must lie in [0, 1], got {}", self.de_prob)));
        }
        for (field, v) in [("mean_shape", self.mean_shape), ("mean_rate", self.mean_rate)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        for (field, v) in [
            ("de_logfc_sigma", self.de_logfc_sigma),
            ("batch_logfc_sigma", self.batch_logfc_sigma),
            ("lib_scale", self.lib_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be nonnegative, got {v}")));
            }
        }
        if !self.lib_loc.is_finite() {
            return Err(Error::config("lib_loc", "must be finite"));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells_per_batch * self.n_batches
    }
}

fn lognormal_factor(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        1.0
    } else {
        Normal::new(0.0, sigma).expect("sigma validated").sample(rng).exp()
    }
}

/// Draws a dataset. Global gene parameters come from stream 0 of the seeded
/// ChaCha generator and each cell from its own stream, so the output does
/// not depend on how cells are scheduled.
pub fn simulate(cfg: &SimConfig) -> Result<CountDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = Gamma::new(cfg.mean_shape, 1.0 / cfg.mean_rate).expect("validated");
    let lambda: Vec<f64> = (0..cfg.n_genes).map(|_| base.sample(&mut rng)).collect();

    let mut group_factor = Array2::<f64>::ones((cfg.n_groups, cfg.n_genes));
    for g in 0..cfg.n_groups {
        for d in 0..cfg.n_genes {
            if rng.gen::<f64>() < cfg.de_prob {
                group_factor[[g, d]] = lognormal_factor(&mut rng, cfg.de_logfc_sigma);
            }
        }
    }
    let mut batch_factor = Array2::<f64>::ones((cfg.n_batches, cfg.n_genes));
    for b in 0..cfg.n_batches {
        for d in 0..cfg.n_genes {
            batch_factor[[b, d]] = lognormal_factor(&mut rng, cfg.batch_logfc_sigma);
        }
    }

    // Normalized expression profile for every (group, batch) pair.
    let mut profiles = vec![vec![0.0; cfg.n_genes]; cfg.n_groups * cfg.n_batches];
    for g in 0..cfg.n_groups {
        for b in 0..cfg.n_batches {
            let p = &mut profiles[g * cfg.n_batches + b];
            for d in 0..cfg.n_genes {
                p[d] = lambda[d] * group_factor[[g, d]] * batch_factor[[b, d]];
            }
            let total: f64 = p.iter().sum();
            if total > 0.0 {
                p.iter_mut().for_each(|v| *v /= total);
            }
        }
    }

    let n = cfg.n_cells();
    let cells: Vec<(usize, Vec<u32>)> = (0..n)
        .into_par_iter()
        .map(|cell| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(cell as u64 + 1);
            let group = rng.gen_range(0..cfg.n_groups);
            let batch = cell / cfg.n_cells_per_batch;
            let lib = (cfg.lib_loc + cfg.lib_scale * rng.sample::<f64, _>(rand_distr::StandardNormal)).exp();
            let profile = &profiles[group * cfg.n_batches + batch];
            let row = profile
                .iter()
                .map(|&p| {
                    let rate = lib * p;
                    if rate > 0.0 {
                        Poisson::new(rate).expect("positive rate").sample(&mut rng) as u32
                    } else {
                        0
                    }
                })
                .collect();
            (group, row)
        })
        .collect();

    let mut counts = Array2::<u32>::zeros((n, cfg.n_genes));
    let mut celltypes = Vec::with_capacity(n);
    for (i, (group, row)) in cells.into_iter().enumerate() {
        counts.row_mut(i).iter_mut().zip(row).for_each(|(c, v)| *c = v);
        celltypes.push(format!("group{}", group + 1));
    }
    CountDataset::new(
        counts,
        (0..n).map(|i| format!("cell{}", i + 1)).collect(),
        (0..cfg.n_genes).map(|d| format!("gene{}", d + 1)).collect(),
        (0..n).map(|i| format!("batch{}", i / cfg.n_cells_per_batch + 1)).collect(),
        Some(celltypes),
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct MarginalReport {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    /// Fraction of expressed genes (mean > 0) whose variance exceeds the mean.
    pub frac_overdispersed: f64,
}

/// Per-gene sample means and (unbiased) variances.
pub fn marginal_fit_check(ds: &CountDataset) -> Result<MarginalReport> {
    let n = ds.n_cells();
    if n < 2 {
        return Err(Error::Domain("need at least two cells for variances".into()));
    }
    let mut means = Vec::with_capacity(ds.n_genes());
    let mut variances = Vec::with_capacity(ds.n_genes());
    for col in ds.counts.columns() {
        let m = col.iter().map(|&c| c as f64).sum::<f64>() / n as f64;
        let v = col.iter().map(|&c| (c as f64 - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        means.push(m);
        variances.push(v);
    }
    let expressed: Vec<usize> = (0..means.len()).filter(|&d| means[d] > 0.0).collect();
    let over = expressed.iter().filter(|&&d| variances[d] > means[d]).count();
    let frac_overdispersed = if expressed.is_empty() {
        0.0
    } else {
        over as f64 / expressed.len() as f64
    };
    Ok(MarginalReport {
        means,
        variances,
        frac_overdispersed,
    })
}
