//! Training loop: Adam with bias correction, linear warm-up into half-cycle
//! cosine decay, per-variant update routing, and per-epoch records.
//!
//! Routing: gd/fc train every bound parameter including the codebook; lc
//! trains network and projector while the frozen codebook stays untouched;
//! ema trains the network by gradient and maintains the codebook by moving
//! averages after every batch. A NaN/Inf anywhere aborts with epoch/step
//! context rather than skipping the batch.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::Dataset;
use crate::metrics::{self, fmt_sig, MetricsError};
use crate::model::{ModelError, VqModel};
use crate::quantizer::{ema_update, utilization_rate, QuantizerError, QuantizerVariant, TokenMap};
use crate::tensor::Tape;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(&'static str),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite value at epoch {epoch}, step {step}: {source}")]
    NonFinite { epoch: usize, step: u64, source: ModelError },
    #[error("non-finite gradient for parameter {name} at epoch {epoch}, step {step}")]
    NonFiniteGrad { name: String, epoch: usize, step: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Optimization schedule and batching.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Held-out fraction evaluated for PSNR/SSIM each epoch.
    pub eval_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            base_lr: 5e-4,
            warmup_epochs: 5,
            batch_size: 64,
            seed: 13,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.epochs {
            return Err(TrainError::Config("warmup_epochs must not exceed epochs"));
        }
        if self.base_lr <= 0.0 {
            return Err(TrainError::Config("base_lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(TrainError::Config("eval_fraction must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("betas must be in (0, 1)"));
        }
        Ok(())
    }
}

/// Learning rate for 1-indexed update `step`: linear ramp
/// `base_lr * step / warmup_steps` through the warm-up, then half-cycle
/// cosine decay reaching exactly zero at the final step.
pub fn lr_at(step: u64, steps_per_epoch: u64, cfg: &TrainConfig) -> f64 {
    let total = cfg.epochs as u64 * steps_per_epoch;
    if total == 0 {
        return 0.0;
    }
    let warmup = cfg.warmup_epochs as u64 * steps_per_epoch;
    if warmup > 0 && step <= warmup {
        return cfg.base_lr * step as f64 / warmup as f64;
    }
    let denom = (total - warmup).max(1);
    let t = ((step - warmup) as f64 / denom as f64).clamp(0.0, 1.0);
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// First/second moment buffers for one parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Standard bias-corrected Adam update. `t` is the 1-indexed update count.
pub fn adam_step(
    param: &mut [f32],
    grad: &[f64],
    state: &mut AdamState,
    t: u64,
    lr: f64,
    cfg: &TrainConfig,
    name: &str,
) -> Result<()> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGrad { name: name.to_string(), epoch: 0, step: t });
    }
    if state.m.is_empty() {
        state.m = vec![0.0; param.len()];
        state.v = vec![0.0; param.len()];
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] = (param[i] as f64 - lr * m_hat / (v_hat.sqrt() + cfg.eps)) as f32;
    }
    Ok(())
}

/// One row per epoch.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_r: f64,
    pub l_q: f64,
    pub loss: f64,
    pub epoch_utilization: f64,
    pub cumulative_utilization: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
}

pub const RUN_CSV_HEADER: &str =
    "epoch,l_r,l_q,loss,epoch_utilization,cumulative_utilization,psnr,ssim,wall_seconds";

impl RunRecord {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "{RUN_CSV_HEADER}")?;
        for r in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.epoch,
                fmt_sig(r.l_r),
                fmt_sig(r.l_q),
                fmt_sig(r.loss),
                fmt_sig(r.epoch_utilization),
                fmt_sig(r.cumulative_utilization),
                fmt_sig(r.psnr),
                fmt_sig(r.ssim),
                fmt_sig(r.wall_seconds),
            )?;
        }
        w.flush()
    }

    /// Equality over everything except wall-clock columns.
    pub fn metrics_eq(&self, other: &RunRecord) -> bool {
        self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.l_r == b.l_r
                    && a.l_q == b.l_q
                    && a.loss == b.loss
                    && a.epoch_utilization == b.epoch_utilization
                    && a.cumulative_utilization == b.cumulative_utilization
                    && a.psnr == b.psnr
                    && a.ssim == b.ssim
            })
    }
}

/// Everything a finished run leaves behind.
#[derive(Debug)]
pub struct TrainOutput {
    pub record: RunRecord,
    /// Token counts per codebook entry over all training traffic.
    pub cumulative_counts: Vec<u64>,
    /// Image indices held out for evaluation.
    pub eval_indices: Vec<usize>,
}

fn split_with(rng: &mut ChaCha8Rng, len: usize, eval_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let eval_count = if len >= 2 {
        ((len as f64 * eval_fraction).round() as usize).clamp(1, len - 1)
    } else {
        0
    };
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    let eval = order[..eval_count].to_vec();
    let train = order[eval_count..].to_vec();
    (train, eval)
}

/// The seeded train/eval split a run with this config will use: same seed,
/// same indices. Lets callers derive codebook features from the training
/// split alone.
pub fn holdout_split(len: usize, eval_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    split_with(&mut rng, len, eval_fraction)
}

/// Train in place. Utilization is measured over training traffic only; the
/// held-out split feeds PSNR/SSIM.
pub fn train(model: &mut VqModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n_entries = model.quant.codebook.n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let len = data.len();
    let (mut train_indices, eval_indices) = split_with(&mut rng, len, cfg.eval_fraction);
    let eval_count = eval_indices.len();
    let eval_refs: Vec<&crate::data::Image> = if eval_count > 0 {
        eval_indices.iter().map(|&i| &data.images[i]).collect()
    } else {
        vec![&data.images[0]]
    };

    let param_names = model.param_names();
    let mut adam: Vec<AdamState> = vec![AdamState::default(); param_names.len()];
    let mut record = RunRecord::default();
    let mut cumulative_counts = vec![0u64; n_entries];
    let steps_per_epoch = train_indices.len().div_ceil(cfg.batch_size) as u64;
    let mut global_step = 0u64;

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        train_indices.shuffle(&mut rng);
        let mut epoch_counts = vec![0u64; n_entries];
        let mut sum_lr = 0.0f64;
        let mut sum_lq = 0.0f64;
        let mut sum_loss = 0.0f64;
        let mut batches = 0usize;

        for chunk in train_indices.chunks(cfg.batch_size) {
            let imgs: Vec<&crate::data::Image> = chunk.iter().map(|&i| &data.images[i]).collect();
            let mut tape = Tape::new();
            let out = model
                .forward_batch(&mut tape, &imgs, None)
                .map_err(|e| TrainError::NonFinite { epoch, step: global_step + 1, source: e })?;
            if !out.total.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    step: global_step + 1,
                    source: ModelError::Config("loss is not finite".to_string()),
                });
            }
            tape.backward(out.loss).map_err(ModelError::from)?;

            global_step += 1;
            let lr = lr_at(global_step, steps_per_epoch, cfg);
            for (i, name) in param_names.iter().enumerate() {
                let grad = tape
                    .grad(out.param_ids[i])
                    .expect("bound parameters always hold gradients after backward");
                let grad = grad.to_vec();
                adam_step(model.param_mut(i), &grad, &mut adam[i], global_step, lr, cfg, name)
                    .map_err(|e| match e {
                        TrainError::NonFiniteGrad { name, .. } => {
                            TrainError::NonFiniteGrad { name, epoch, step: global_step }
                        }
                        other => other,
                    })?;
            }

            if model.quant.variant == QuantizerVariant::Ema {
                let joined = TokenMap {
                    indices: out.token_maps.iter().flat_map(|m| m.indices.iter().copied()).collect(),
                    distances: out.token_maps.iter().flat_map(|m| m.distances.iter().copied()).collect(),
                    h: 1,
                    w: out.token_maps.iter().map(|m| m.len()).sum(),
                    codebook_size: n_entries,
                };
                let mut stats = model.quant.ema.take().expect("ema variant carries stats");
                ema_update(&mut stats, &mut model.quant.codebook, &joined, &out.z_pre)?;
                model.quant.ema = Some(stats);
            }

            for map in &out.token_maps {
                for &idx in &map.indices {
                    epoch_counts[idx as usize] += 1;
                }
            }
            sum_lr += out.l_r;
            sum_lq += out.l_q;
            sum_loss += out.total;
            batches += 1;
        }

        for (c, e) in cumulative_counts.iter_mut().zip(&epoch_counts) {
            *c += e;
        }
        let epoch_used: Vec<bool> = epoch_counts.iter().map(|&c| c >= 1).collect();
        let cumulative_used: Vec<bool> = cumulative_counts.iter().map(|&c| c >= 1).collect();

        // held-out reconstruction quality via the inference path
        let (recons, _) = model.reconstruct(&eval_refs)?;
        let pairs: Vec<(&crate::data::Image, &crate::data::Image)> =
            eval_refs.iter().copied().zip(recons.iter()).collect();
        let quality = metrics::quality_report(&pairs)?;

        let b = batches.max(1) as f64;
        record.epochs.push(EpochRecord {
            epoch,
            l_r: sum_lr / b,
            l_q: sum_lq / b,
            loss: sum_loss / b,
            epoch_utilization: utilization_rate(&epoch_used),
            cumulative_utilization: utilization_rate(&cumulative_used),
            psnr: quality.mean_psnr,
            ssim: quality.mean_ssim,
            wall_seconds: t0.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainOutput { record, cumulative_counts, eval_indices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook;
    use crate::data::{gen_synthetic, SyntheticStyle};
    use crate::model::ModelConfig;
    use crate::quantizer::{Metric, QuantizerState};

    fn small_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            warmup_epochs: epochs.min(2),
            batch_size: 8,
            base_lr: 2e-3,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn small_model(variant: QuantizerVariant, n: usize, seed: u64) -> VqModel {
        let config = ModelConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            enc_hidden: vec![16],
            feature_dim: 12,
            code_dim: 4,
            variant,
            seed,
            ..ModelConfig::default()
        };
        let quant = match variant {
            QuantizerVariant::Gd | QuantizerVariant::Ema => {
                let cb = codebook::init_random(n, config.feature_dim, seed + 1);
                QuantizerState::new(variant, cb, None, Metric::L2, 1.0, 0.33, 0.99).unwrap()
            }
            QuantizerVariant::Fc => {
                let cb = codebook::init_random(n, config.code_dim, seed + 1);
                QuantizerState::new(variant, cb, None, Metric::L2, 1.0, 0.33, 0.99).unwrap()
            }
            QuantizerVariant::Lc => {
                let cb = codebook::init_random(n, 8, seed + 1);
                let proj = crate::codebook::Projector::init(8, config.code_dim, true, seed + 2);
                QuantizerState::new(variant, cb, Some(proj), Metric::L2, 1.0, 0.33, 0.99).unwrap()
            }
        };
        VqModel::new(config, quant).unwrap()
    }

    #[test]
    fn lr_schedule_endpoints_and_continuity() {
        let cfg = TrainConfig { epochs: 10, warmup_epochs: 5, ..TrainConfig::default() };
        let spe = 40u64;
        assert_eq!(lr_at(0, spe, &cfg), 0.0);
        // ramp is linear
        assert!((lr_at(1, spe, &cfg) - cfg.base_lr / 200.0).abs() < 1e-15);
        let warmup_end = 5 * spe;
        assert!((lr_at(warmup_end, spe, &cfg) - cfg.base_lr).abs() < 1e-15);
        // one past the boundary is still close to base_lr (continuity)
        let just_after = lr_at(warmup_end + 1, spe, &cfg);
        assert!((just_after - cfg.base_lr).abs() < cfg.base_lr * 1e-3);
        // final step decays to zero
        let last = lr_at(10 * spe, spe, &cfg);
        assert!(last.abs() < 1e-9, "final lr {last}");
        // monotone decay after warmup
        let mut prev = f64::INFINITY;
        for s in warmup_end..=10 * spe {
            let v = lr_at(s, spe, &cfg);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let cfg = TrainConfig::default();
        let mut p = vec![0.5f32, -0.5];
        let mut st = AdamState::default();
        adam_step(&mut p, &[0.0, 0.0], &mut st, 1, 1e-3, &cfg, "p").unwrap();
        assert_eq!(p, vec![0.5, -0.5]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        let mut p = vec![1.0f32];
        let mut st = AdamState::default();
        adam_step(&mut p, &[1.0], &mut st, 1, 0.01, &cfg, "w").unwrap();
        // bias-corrected ratio is exactly 1, so the step is -lr (up to eps)
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-6, "{}", p[0]);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let cfg = TrainConfig::default();
        let mut w = vec![1.0f32];
        let mut st = AdamState::default();
        for t in 1..=100 {
            let g = 2.0 * w[0] as f64;
            adam_step(&mut w, &[g], &mut st, t, 0.1, &cfg, "w").unwrap();
        }
        assert!(w[0].abs() < 0.2, "after 100 adam steps w = {}", w[0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradients_by_name() {
        let cfg = TrainConfig::default();
        let mut p = vec![0.0f32];
        let mut st = AdamState::default();
        let err = adam_step(&mut p, &[f64::NAN], &mut st, 1, 1e-3, &cfg, "enc.0.w").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("enc.0.w"), "{msg}");
    }

    #[test]
    fn zero_epochs_returns_empty_record_and_keeps_params() {
        let mut model = small_model(QuantizerVariant::Lc, 8, 5);
        let before = model.enc[0].w.clone();
        let ds = gen_synthetic(SyntheticStyle::Mixed, 16, 8, 1, 4).unwrap();
        let out = train(&mut model, &ds, &small_cfg(0)).unwrap();
        assert!(out.record.epochs.is_empty());
        assert_eq!(model.enc[0].w, before);
    }

    #[test]
    fn training_is_deterministic_under_a_fixed_seed() {
        let ds = gen_synthetic(SyntheticStyle::Mixed, 24, 8, 1, 9).unwrap();
        let run = || {
            let mut model = small_model(QuantizerVariant::Lc, 16, 7);
            let out = train(&mut model, &ds, &small_cfg(3)).unwrap();
            (out.record, model.enc[0].w.clone())
        };
        let (r1, w1) = run();
        let (r2, w2) = run();
        assert!(r1.metrics_eq(&r2));
        assert_eq!(w1, w2);
    }

    #[test]
    fn loss_falls_and_cumulative_utilization_is_monotone() {
        let ds = gen_synthetic(SyntheticStyle::Mixed, 48, 8, 1, 10).unwrap();
        for variant in [QuantizerVariant::Gd, QuantizerVariant::Fc, QuantizerVariant::Ema, QuantizerVariant::Lc] {
            let mut model = small_model(variant, 16, 11);
            let out = train(&mut model, &ds, &small_cfg(6)).unwrap();
            let rec = &out.record.epochs;
            assert_eq!(rec.len(), 6);
            assert!(
                rec.last().unwrap().loss < rec[0].loss,
                "{variant}: loss did not fall ({} -> {})",
                rec[0].loss,
                rec.last().unwrap().loss
            );
            for w in rec.windows(2) {
                assert!(
                    w[1].cumulative_utilization >= w[0].cumulative_utilization,
                    "{variant}: cumulative utilization decreased"
                );
                assert!(w[1].epoch == w[0].epoch + 1);
            }
            for r in rec {
                assert!(r.epoch_utilization >= 0.0 && r.epoch_utilization <= 1.0);
                assert!(r.ssim <= 1.0 && r.ssim >= -1.0);
            }
        }
    }

    #[test]
    fn lc_codebook_checksum_survives_training_while_projector_moves() {
        let ds = gen_synthetic(SyntheticStyle::Mixed, 24, 8, 1, 12).unwrap();
        let mut model = small_model(QuantizerVariant::Lc, 16, 13);
        let checksum_before = model.quant.codebook.checksum();
        let proj_before = model.quant.projector.as_ref().unwrap().weight.clone();
        train(&mut model, &ds, &small_cfg(2)).unwrap();
        assert_eq!(model.quant.codebook.checksum(), checksum_before);
        assert_ne!(model.quant.projector.as_ref().unwrap().weight, proj_before);
    }

    #[test]
    fn nan_parameters_abort_with_context() {
        let ds = gen_synthetic(SyntheticStyle::Mixed, 8, 8, 1, 14).unwrap();
        let mut model = small_model(QuantizerVariant::Gd, 8, 15);
        model.enc[0].w[0] = f32::NAN;
        let err = train(&mut model, &ds, &small_cfg(1)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epoch 1"), "{msg}");
    }

    #[test]
    fn run_record_csv_has_fixed_header() {
        let rec = RunRecord {
            epochs: vec![EpochRecord {
                epoch: 1,
                l_r: 0.125,
                l_q: 0.5,
                loss: 0.625,
                epoch_utilization: 0.75,
                cumulative_utilization: 1.0,
                psnr: 20.0,
                ssim: 0.5,
                wall_seconds: 1.25,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.csv");
        rec.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), RUN_CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "1,0.125,0.5,0.625,0.75,1,20,0.5,1.25");
    }
}
