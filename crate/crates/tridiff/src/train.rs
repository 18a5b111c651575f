//! Training loop: seeded per-epoch reshuffle, fresh per-epoch scale
//! augmentation, gradient + AdamW steps, periodic checkpointing, and a
//! per-step loss trace. Fully deterministic given the seed, including
//! across thread counts; resuming from a checkpoint reproduces the same
//! continuation because every random stream derives from (seed, epoch,
//! step, example) rather than from mutable generator state.

use crate::checkpoint::DenoiserCheckpoint;
use crate::dataset::DatasetFile;
use crate::denoiser::{gradient, DenoiserConfig, DenoiserParams, ModelError};
use crate::optim::{adamw_step, lr_at, AdamState, OptimError, OptimizerConfig};
use crate::preprocess::augment_scale;
use crate::rng::{derive, Rng};
use crate::schedule::{NoiseSchedule, ScheduleConfig, ScheduleError};
use crate::soup::{canonical_order, quantize, soup_to_mesh, QuantizedTriangleSoup};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training set")]
    EmptySet,
    #[error("config mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Worker cap; outputs never depend on it.
    #[serde(skip)]
    pub threads: usize,
    /// Steps between checkpoint hook invocations; 0 = final only.
    pub checkpoint_every: u64,
    /// Per-axis scale augmentation range, resampled every epoch.
    pub augment_scale_range: Option<(f64, f64)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 2000,
            seed: 0,
            threads: 1,
            checkpoint_every: 1000,
            augment_scale_range: Some((0.75, 1.25)),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TraceRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

pub struct TrainOutput {
    pub checkpoint: DenoiserCheckpoint,
    pub trace: Vec<TraceRow>,
    /// Set when training aborted on a non-finite loss; `checkpoint` is then
    /// the last good state.
    pub diverged: bool,
}

/// Trains from scratch or resumes from `resume`. `on_checkpoint` fires at
/// every periodic checkpoint and on the final one.
pub fn train<F>(
    dataset: &DatasetFile,
    model_cfg: &DenoiserConfig,
    schedule_cfg: &ScheduleConfig,
    opt_cfg: &OptimizerConfig,
    train_cfg: &TrainConfig,
    resume: Option<DenoiserCheckpoint>,
    mut on_checkpoint: F,
) -> Result<TrainOutput, TrainError>
where
    F: FnMut(&DenoiserCheckpoint),
{
    if dataset.records.is_empty() {
        return Err(TrainError::EmptySet);
    }
    model_cfg.validate()?;
    opt_cfg.validate()?;
    if model_cfg.categories != (1usize << dataset.header.bits) {
        return Err(TrainError::Mismatch(format!(
            "model categories {} vs dataset 2^{} = {}",
            model_cfg.categories,
            dataset.header.bits,
            1usize << dataset.header.bits
        )));
    }
    if model_cfg.max_faces != dataset.header.max_faces as usize {
        return Err(TrainError::Mismatch(format!(
            "model max_faces {} vs dataset {}",
            model_cfg.max_faces, dataset.header.max_faces
        )));
    }
    if model_cfg.class_count != dataset.header.class_names.len() {
        return Err(TrainError::Mismatch(format!(
            "model class_count {} vs dataset {}",
            model_cfg.class_count,
            dataset.header.class_names.len()
        )));
    }

    let schedule: NoiseSchedule = schedule_cfg.build()?;
    let soups: Vec<QuantizedTriangleSoup> = dataset
        .records
        .iter()
        .map(|r| r.to_soup(&dataset.header))
        .collect::<Result<_, _>>()
        .map_err(|e| TrainError::Mismatch(e.to_string()))?;

    let face_histograms: Vec<Vec<(u16, u32)>> = dataset
        .face_count_histogram()
        .into_iter()
        .map(|m| m.into_iter().collect())
        .collect();

    let (mut params, mut state, start_step) = match resume {
        Some(ckpt) => {
            if ckpt.params.config != *model_cfg {
                return Err(TrainError::Mismatch("resume checkpoint config differs".into()));
            }
            let state = ckpt
                .optimizer_state
                .unwrap_or_else(|| AdamState::new(&ckpt.params.tensors));
            (ckpt.params, state, ckpt.step)
        }
        None => {
            let params = DenoiserParams::init(model_cfg, derive(train_cfg.seed, 0x1417))?;
            let state = AdamState::new(&params.tensors);
            (params, state, 0)
        }
    };

    let n = soups.len();
    let batch_size = train_cfg.batch_size.max(1).min(n);
    let steps_per_epoch = n.div_ceil(batch_size) as u64;
    let total_steps = steps_per_epoch * train_cfg.epochs as u64;

    let make_checkpoint = |params: &DenoiserParams, state: &AdamState, step: u64| DenoiserCheckpoint {
        params: params.clone(),
        schedule: schedule_cfg.clone(),
        step,
        class_names: dataset.header.class_names.clone(),
        face_histograms: face_histograms.clone(),
        optimizer_state: Some(state.clone()),
    };

    let mut trace = Vec::new();
    let mut last_good = make_checkpoint(&params, &state, start_step);
    let mut step = start_step;

    let start_epoch = (start_step / steps_per_epoch) as usize;
    for epoch in start_epoch..train_cfg.epochs {
        // Per-epoch reshuffle, derived statelessly.
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = Rng::new(derive(derive(train_cfg.seed, 0xe90c), epoch as u64));
        for i in (1..n).rev() {
            let j = rng.next_below(i + 1);
            order.swap(i, j);
        }

        let skip_batches = if epoch == start_epoch {
            (start_step % steps_per_epoch) as usize
        } else {
            0
        };
        for b in skip_batches..steps_per_epoch as usize {
            let lo = b * batch_size;
            let hi = (lo + batch_size).min(n);
            let batch: Vec<QuantizedTriangleSoup> = order[lo..hi]
                .iter()
                .map(|&r| match train_cfg.augment_scale_range {
                    Some(range) => augment_soup(&soups[r], range, derive(derive(train_cfg.seed, 0xa06), (epoch as u64) << 32 | r as u64)),
                    None => soups[r].clone(),
                })
                .collect();
            step += 1;
            let out = match gradient(&params, &batch, &schedule, derive(train_cfg.seed, 0x9ad0_0000 + step), train_cfg.threads) {
                Ok(out) => out,
                Err(ModelError::NonFiniteLoss { .. }) => {
                    return Ok(TrainOutput {
                        checkpoint: last_good,
                        trace,
                        diverged: true,
                    });
                }
                Err(e) => return Err(e.into()),
            };
            adamw_step(&mut params.tensors, &out.grads, &mut state, opt_cfg, step)?;
            trace.push(TraceRow {
                step,
                loss: out.loss,
                lr: lr_at(step, opt_cfg),
            });
            if train_cfg.checkpoint_every > 0 && step % train_cfg.checkpoint_every == 0 {
                last_good = make_checkpoint(&params, &state, step);
                on_checkpoint(&last_good);
            }
        }
    }
    debug_assert!(step <= total_steps);

    let final_ckpt = make_checkpoint(&params, &state, step);
    on_checkpoint(&final_ckpt);
    Ok(TrainOutput {
        checkpoint: final_ckpt,
        trace,
        diverged: false,
    })
}

/// Fresh per-epoch augmentation: dequantize, scale each axis independently,
/// re-normalize, re-quantize, re-canonicalize. Falls back to the original
/// soup when the perturbed mesh degenerates.
fn augment_soup(soup: &QuantizedTriangleSoup, range: (f64, f64), seed: u64) -> QuantizedTriangleSoup {
    let mesh = match soup_to_mesh(soup) {
        Ok(m) => m,
        Err(_) => return soup.clone(),
    };
    let scaled = match augment_scale(&mesh, range, seed) {
        Ok(m) => m,
        Err(_) => return soup.clone(),
    };
    match quantize(&scaled, soup.bits(), soup.capacity()) {
        Ok(mut q) if q.real_face_count() > 0 => {
            q.class_label = soup.class_label;
            canonical_order(&q)
        }
        _ => soup.clone(),
    }
}
