//! Adam optimization of the ELBO with mini-batching, seeding, checkpoints,
//! and the ablation presets.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CountDataset, PipelineTag};
use crate::encoder::{EncoderForm, EncoderSpec, EncoderWiring};
use crate::error::{Error, Result};
use crate::kernels::{KernelForm, KernelSpec};
use crate::likelihoods::{LikelihoodSpec, DEFAULT_NB_DISPERSION, DEFAULT_NB_SCALE};
use crate::svgp::{
    elbo_grad, grad_check, save_checkpoint, CheckpointInfo, GroupError, ModelParams, ModelSpec, ModelState, Noise,
    TrainingData, DEFAULT_INDUCING,
};

const NOISE_STREAM: u64 = 1;
const SHUFFLE_STREAM_BASE: u64 = 1_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub q_latent: usize,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub n_mc: usize,
    /// Epochs between checkpoints; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub n_inducing: usize,
    pub hidden_dims: Vec<usize>,
    pub encoder_wiring: EncoderWiring,
    pub gaussian_standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 300,
            lr: 0.05,
            epochs: 50,
            seed: 0,
            q_latent: 10,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            n_mc: 1,
            checkpoint_every: 5,
            n_inducing: DEFAULT_INDUCING,
            hidden_dims: vec![128, 128],
            encoder_wiring: EncoderWiring::Separate,
            gaussian_standardize: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("must be nonnegative, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.q_latent == 0 {
            return Err(Error::config("q_latent", "must be at least 1"));
        }
        if self.n_mc == 0 {
            return Err(Error::config("n_mc", "must be at least 1"));
        }
        if self.n_inducing == 0 {
            return Err(Error::config("n_inducing", "must be at least 1"));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::config("adam_betas", "must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Proposed,
    SimpleNn,
    GaussianLikelihood,
    LinearKernel,
    LearnedLibrary,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Proposed,
        Preset::SimpleNn,
        Preset::GaussianLikelihood,
        Preset::LinearKernel,
        Preset::LearnedLibrary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Proposed => "proposed",
            Preset::SimpleNn => "simple_nn",
            Preset::GaussianLikelihood => "gaussian_likelihood",
            Preset::LinearKernel => "linear_kernel",
            Preset::LearnedLibrary => "learned_library",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

/// Model components selected by a preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetSpec {
    pub kernel: KernelForm,
    pub likelihood: LikelihoodSpec,
    pub encoder: EncoderForm,
    pub pipeline: PipelineTag,
}

pub fn ablation_presets(name: &str) -> Result<PresetSpec> {
    Ok(preset_spec(name.parse()?))
}

pub fn preset_spec(preset: Preset) -> PresetSpec {
    let nb = LikelihoodSpec::ApproxPoisson {
        scale: DEFAULT_NB_SCALE,
        r: DEFAULT_NB_DISPERSION,
    };
    let (kernel, likelihood, encoder) = match preset {
        Preset::Proposed => (KernelForm::SeArdPlusLinear, nb, EncoderForm::BatchAwareNn),
        Preset::SimpleNn => (KernelForm::SeArdPlusLinear, nb, EncoderForm::SimpleNn),
        Preset::GaussianLikelihood => (
            KernelForm::SeArdPlusLinear,
            LikelihoodSpec::Gaussian { sigma_y2: 1.0 },
            EncoderForm::BatchAwareNn,
        ),
        Preset::LinearKernel => (KernelForm::AugmentedLinear, nb, EncoderForm::BatchAwareNn),
        Preset::LearnedLibrary => (
            KernelForm::SeArdPlusLinear,
            LikelihoodSpec::NbLearnedScale {
                r: DEFAULT_NB_DISPERSION,
            },
            EncoderForm::BatchAwareNn,
        ),
    };
    PresetSpec {
        kernel,
        pipeline: likelihood.expected_pipeline(),
        likelihood,
        encoder,
    }
}

/// Builds the model for `preset` on `ds`, with parameters initialized from
/// `cfg.seed` and per-gene baselines set from the data.
pub fn build_model(preset: &PresetSpec, ds: &CountDataset, cfg: &TrainConfig) -> Result<(ModelState, TrainingData)> {
    cfg.validate()?;
    let data = TrainingData::from_dataset(ds, &preset.likelihood, cfg.gaussian_standardize)?;
    let d_covar = data.phi.ncols();
    let kernel = KernelSpec::new(preset.kernel, cfg.q_latent, d_covar)?;
    let spec = ModelSpec {
        kernel,
        likelihood: preset.likelihood,
        encoder: EncoderSpec {
            form: preset.encoder,
            input_dim: ds.n_genes(),
            hidden_dims: cfg.hidden_dims.clone(),
            q_latent: cfg.q_latent,
            d_covar,
            wiring: cfg.encoder_wiring,
        },
        n_genes: ds.n_genes(),
        n_inducing: cfg.n_inducing,
        n_cells: ds.n_cells(),
        gaussian_standardize: cfg.gaussian_standardize,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = ModelState::init(spec, &mut rng)?;
    init_baselines(&mut state.params, &data, &preset.likelihood);
    Ok((state, data))
}

/// Per-gene, per-batch offsets of the prior mean from the data: mean log
/// expression proportion for count likelihoods, mean target for the
/// Gaussian one. Per-cell log scales start at the observed library size.
fn init_baselines(params: &mut ModelParams, data: &TrainingData, likelihood: &LikelihoodSpec) {
    let (n, d) = data.targets.dim();
    let c = data.phi.ncols();
    let mut sums = Array2::<f64>::zeros((d, c));
    let mut counts = vec![0.0; c];
    for i in 0..n {
        let row = data.targets.row(i);
        let total: f64 = match likelihood {
            LikelihoodSpec::Gaussian { .. } => 1.0,
            _ => row.sum().max(f64::MIN_POSITIVE),
        };
        for b in 0..c {
            let w = data.phi[[i, b]];
            if w == 0.0 {
                continue;
            }
            counts[b] += w;
            for g in 0..d {
                sums[[g, b]] += w * row[g] / total;
            }
        }
    }
    for b in 0..c {
        if counts[b] == 0.0 {
            continue;
        }
        for g in 0..d {
            let mean = sums[[g, b]] / counts[b];
            params.zeta[[g, b]] = match likelihood {
                LikelihoodSpec::Gaussian { .. } => mean,
                _ => (mean + 1e-6).ln(),
            };
        }
    }
    if let LikelihoodSpec::NbLearnedScale { .. } = likelihood {
        for (s, &l) in params.log_scale.iter_mut().zip(&data.library_sizes) {
            *s = l.max(1.0).ln();
        }
    }
}

/// Adam on a flat view of every trainable tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64), eps: f64) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One descent step on `params` given the loss gradient.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        let total: usize = grads.iter().map(|g| g.len()).sum();
        if self.m.len() != total {
            self.m = vec![0.0; total];
            self.v = vec![0.0; total];
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut k = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            for (pi, &gi) in p.iter_mut().zip(g.iter()) {
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
                k += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub elbo: f64,
    pub ell: f64,
    pub klx: f64,
    pub klu: f64,
    pub floor_events: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_elbo: f64,
    pub mean_ell: f64,
    pub mean_klx: f64,
    pub mean_klu: f64,
    pub floor_events: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainLog {
    /// Per-step CSV without timing columns, so reruns are byte-identical.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["step", "epoch", "elbo", "ell", "klx", "klu", "floor_events"])
            .map_err(csv_err)?;
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                s.epoch.to_string(),
                format!("{:e}", s.elbo),
                format!("{:e}", s.ell),
                format!("{:e}", s.klx),
                format!("{:e}", s.klu),
                s.floor_events.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_timing_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["step", "wall_ms"]).map_err(csv_err)?;
        for s in &self.steps {
            w.write_record([s.step.to_string(), format!("{:.3}", s.wall_ms)])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn elbo_sequence(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.elbo).collect()
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Checkpoint(format!("{other:?}")),
    }
}

/// Where `train` writes checkpoints; `None` disables them.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint_dir: Option<PathBuf>,
}

/// Epoch order of the cells: a permutation drawn from an epoch-specific stream.
pub fn epoch_permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM_BASE + epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

pub fn train(
    mut state: ModelState,
    data: &TrainingData,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<(ModelState, TrainLog)> {
    cfg.validate()?;
    state.spec.likelihood.check_pipeline(&data.tag)?;
    let n = data.n_cells();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(NOISE_STREAM);
    let mut adam = Adam::new(cfg.lr, cfg.adam_betas, cfg.adam_eps);
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_permutation(cfg.seed, epoch, n);
        let first_step = log.steps.len();
        for cells in order.chunks(cfg.batch_size) {
            let started = Instant::now();
            let batch = data.batch(cells);
            let ev = elbo_grad(&state, &batch, n, cfg.n_mc, &mut noise_rng)?;
            let parts = &ev.parts;
            if ![parts.elbo, parts.ell, parts.klx, parts.klu].iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step,
                    elbo: parts.elbo,
                    ell: parts.ell,
                    klx: parts.klx,
                    klu: parts.klu,
                });
            }
            let mut grad = ev.grad.expect("gradient requested");
            for (_, s) in grad.tensors_mut() {
                s.iter_mut().for_each(|g| *g = -*g);
            }
            if let Some((path, _)) = grad.tensors().into_iter().find(|(_, s)| s.iter().any(|g| !g.is_finite())) {
                return Err(Error::Domain(format!("non-finite gradient in {path} at step {step}")));
            }
            state.params.encoder.update_running_stats(&ev.batch_stats);
            {
                let grads: Vec<&[f64]> = grad.tensors().into_iter().map(|(_, s)| s).collect();
                let mut params: Vec<&mut [f64]> = state.params.tensors_mut().into_iter().map(|(_, s)| s).collect();
                adam.step(&mut params, &grads);
            }
            log.steps.push(StepRecord {
                step,
                epoch,
                elbo: parts.elbo,
                ell: parts.ell,
                klx: parts.klx,
                klu: parts.klu,
                floor_events: parts.floor_events,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
            step += 1;
        }
        let recs = &log.steps[first_step..];
        let k = recs.len() as f64;
        log.epochs.push(EpochSummary {
            epoch,
            mean_elbo: recs.iter().map(|r| r.elbo).sum::<f64>() / k,
            mean_ell: recs.iter().map(|r| r.ell).sum::<f64>() / k,
            mean_klx: recs.iter().map(|r| r.klx).sum::<f64>() / k,
            mean_klu: recs.iter().map(|r| r.klu).sum::<f64>() / k,
            floor_events: recs.iter().map(|r| r.floor_events).sum(),
        });
        if let Some(dir) = &outputs.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(
                    &state,
                    dir,
                    &format!("epoch{:03}", epoch + 1),
                    CheckpointInfo { step, seed: cfg.seed },
                )?;
            }
        }
    }
    if let Some(dir) = &outputs.checkpoint_dir {
        save_checkpoint(&state, dir, "final", CheckpointInfo { step, seed: cfg.seed })?;
    }
    Ok((state, log))
}

/// Gradient check on the first `batch_size` cells with frozen noise.
pub fn gradcheck(state: &ModelState, data: &TrainingData, cfg: &TrainConfig, n_params_sampled: usize) -> Result<Vec<GroupError>> {
    let n = data.n_cells();
    let cells: Vec<usize> = (0..n.min(cfg.batch_size)).collect();
    let batch = data.batch(&cells);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Noise::draw(&mut rng, batch.len(), state.spec.kernel.q_latent, state.spec.n_genes, cfg.n_mc);
    grad_check(state, &batch, n, &noise, n_params_sampled, 1e-4, &mut rng)
}

/// Moving average with window `w` (shorter at the start).
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate, SimConfig};

    fn tiny_ds(seed: u64) -> CountDataset {
        simulate(&SimConfig {
            n_cells_per_batch: 20,
            n_genes: 12,
            seed,
            ..SimConfig::default()
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            epochs: 2,
            q_latent: 2,
            n_inducing: 4,
            hidden_dims: vec![6],
            checkpoint_every: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn presets_resolve() {
        let p = ablation_presets("proposed").unwrap();
        assert_eq!(p.kernel, KernelForm::SeArdPlusLinear);
        assert_eq!(p.encoder, EncoderForm::BatchAwareNn);
        assert_eq!(p.pipeline, PipelineTag::LibraryNormalized { target: 5000.0 });
        assert_eq!(ablation_presets("gaussian_likelihood").unwrap().pipeline, PipelineTag::LogGaussian);
        assert_eq!(ablation_presets("linear_kernel").unwrap().kernel, KernelForm::AugmentedLinear);
        assert_eq!(ablation_presets("simple_nn").unwrap().encoder, EncoderForm::SimpleNn);
        assert_eq!(ablation_presets("learned_library").unwrap().pipeline, PipelineTag::RawCounts);
        assert!(matches!(ablation_presets("bogus"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn adam_two_steps_match_reference() {
        let mut adam = Adam::new(0.1, (0.9, 0.999), 1e-8);
        let mut x = [1.0];
        let g1 = [0.5];
        adam.step(&mut [&mut x[..]], &[&g1[..]]);
        // Step 1: m̂ = g, v̂ = g², update = lr·g/(|g| + eps).
        let x1 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((x[0] - x1).abs() < 1e-12);
        let g2 = [-0.2];
        adam.step(&mut [&mut x[..]], &[&g2[..]]);
        let m = 0.9 * 0.05 + 0.1 * -0.2;
        let v = 0.999 * (0.001 * 0.25) + 0.001 * 0.04;
        let mhat = m / (1.0 - 0.81);
        let vhat = v / (1.0 - 0.999f64.powi(2));
        let x2 = x1 - 0.1 * mhat / (vhat.sqrt() + 1e-8);
        assert!((x[0] - x2).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let ds = tiny_ds(1);
        let cfg = TrainConfig { lr: 0.0, ..tiny_cfg() };
        let (state, data) = build_model(&preset_spec(Preset::Proposed), &ds, &cfg).unwrap();
        let (after, _) = train(state.clone(), &data, &cfg, &TrainOutputs::default()).unwrap();
        assert_eq!(after.params.tensors(), state.params.tensors());
    }

    #[test]
    fn same_seed_same_log() {
        let ds = tiny_ds(2);
        let cfg = tiny_cfg();
        let run = || {
            let (state, data) = build_model(&preset_spec(Preset::Proposed), &ds, &cfg).unwrap();
            train(state, &data, &cfg, &TrainOutputs::default()).unwrap().1.elbo_sequence()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shuffling_is_a_permutation() {
        for epoch in 0..3 {
            let mut p = epoch_permutation(7, epoch, 101);
            p.sort_unstable();
            assert_eq!(p, (0..101).collect::<Vec<_>>());
        }
        assert_ne!(epoch_permutation(7, 0, 50), epoch_permutation(7, 1, 50));
    }

    #[test]
    fn pipeline_mismatch_rejected() {
        let ds = tiny_ds(3);
        let cfg = tiny_cfg();
        let (state, _) = build_model(&preset_spec(Preset::Proposed), &ds, &cfg).unwrap();
        let (_, gauss_data) = build_model(&preset_spec(Preset::GaussianLikelihood), &ds, &cfg).unwrap();
        assert!(matches!(
            train(state, &gauss_data, &cfg, &TrainOutputs::default()),
            Err(Error::PipelineMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let ds = tiny_ds(4);
        let cfg = tiny_cfg();
        let (mut state, data) = build_model(&preset_spec(Preset::GaussianLikelihood), &ds, &cfg).unwrap();
        state.params.mu_f = f64::NAN;
        assert!(matches!(
            train(state, &data, &cfg, &TrainOutputs::default()),
            Err(Error::NonFiniteLoss { step: 0, .. })
        ));
    }

    #[test]
    fn checkpoints_written_and_reloadable() {
        let ds = tiny_ds(5);
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let (state, data) = build_model(&preset_spec(Preset::LearnedLibrary), &ds, &cfg).unwrap();
        let outputs = TrainOutputs {
            checkpoint_dir: Some(dir.path().to_path_buf()),
        };
        let (after, _) = train(state, &data, &cfg, &outputs).unwrap();
        assert!(dir.path().join("epoch001.json").exists());
        assert!(dir.path().join("epoch002.bin").exists());
        let (back, info) = crate::svgp::load_checkpoint(&dir.path().join("final.json")).unwrap();
        assert_eq!(back, after);
        assert_eq!(info.step, 6);
    }

    #[test]
    fn gradcheck_passes_for_all_presets() {
        let ds = tiny_ds(6);
        let cfg = TrainConfig {
            batch_size: 5,
            hidden_dims: vec![4],
            n_inducing: 2,
            q_latent: 2,
            ..TrainConfig::default()
        };
        for preset in Preset::ALL {
            let (state, data) = build_model(&preset_spec(preset), &ds.subset(&(0..40).collect::<Vec<_>>(), &[0, 1, 2, 3, 4, 5]), &cfg).unwrap();
            for g in gradcheck(&state, &data, &cfg, 25).unwrap() {
                assert!(g.max_rel_error < 1e-3, "{preset}: {g:?}");
            }
        }
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }
}
