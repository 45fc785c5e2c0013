//! The three-stage curriculum driver.
//!
//! Stage 1 trains the multi-branch model with L1. Stage 2 adds frequency
//! and distillation supervision with gradient clipping, EMA, and weight
//! clipping. Stage 3 runs quantization-aware training on the fused graph
//! under the three-phase schedule. Every stage selects its best
//! checkpoint by full-image PSNR on the validation split, measured on the
//! deploy-path forward (fused, quantized where applicable), and is
//! bit-deterministic given `(config, seed)`.

pub mod checkpoint;
pub mod optim;

pub use checkpoint::{
    restore_model, snapshot_model, Checkpoint, CheckpointModel, NamedTensors, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use optim::{clip_grad_norm, clip_weights, lr_at, AdamState, Ema, LrSchedule};

use crate::data::{sample_patch, stack, Dataset, MissingTeacher};
use crate::error::{Error, Result};
use crate::eval::{psnr_rgb, ssim, EvalMode, EvalSubject};
use crate::losses::{stage_loss_masked, LossWeights, Stage};
use crate::model::{fuse_model, TrainModel};
use crate::quant::{set_phase, PhaseSchedule, QatModel};
use crate::rng::derive_rng;
use crate::tensor::Tensor;

/// Resolved configuration of one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub iterations: u64,
    pub lr0: f64,
    pub lr_min: f64,
    pub warmup_steps: u64,
    /// LR patch size; clamped to the smallest LR image at runtime.
    pub patch: usize,
    pub batch: usize,
    pub grad_clip_norm: Option<f64>,
    pub ema_decay: Option<f64>,
    pub weight_clip: Option<(f32, f32)>,
    pub qat_boundaries: Option<(u64, u64)>,
    pub val_every: u64,
    pub missing_teacher: MissingTeacher,
}

pub const DEFAULT_WEIGHT_CLIP: (f32, f32) = (-1.5, 1.5);

impl StageConfig {
    /// Stage defaults; iteration counts come from the caller so the
    /// 600:200:150 ratio can be scaled to the available budget.
    pub fn defaults_for(stage: Stage, iterations: u64) -> StageConfig {
        let val_every = (iterations / 10).max(1);
        match stage {
            Stage::One => StageConfig {
                stage,
                iterations,
                lr0: 1e-3,
                lr_min: 0.0,
                warmup_steps: iterations / 20,
                patch: 128,
                batch: 8,
                grad_clip_norm: None,
                ema_decay: None,
                weight_clip: None,
                qat_boundaries: None,
                val_every,
                missing_teacher: MissingTeacher::Error,
            },
            Stage::Two => StageConfig {
                stage,
                iterations,
                lr0: 3e-5,
                lr_min: 0.0,
                warmup_steps: 0,
                patch: 160,
                batch: 8,
                grad_clip_norm: Some(1.0),
                ema_decay: Some(0.999),
                weight_clip: Some(DEFAULT_WEIGHT_CLIP),
                qat_boundaries: None,
                val_every,
                missing_teacher: MissingTeacher::Error,
            },
            Stage::Three => StageConfig {
                stage,
                iterations,
                lr0: 1e-6,
                lr_min: 0.0,
                warmup_steps: 0,
                patch: 144,
                batch: 1,
                grad_clip_norm: None,
                ema_decay: None,
                weight_clip: Some(DEFAULT_WEIGHT_CLIP),
                qat_boundaries: Some((iterations / 5, iterations * 3 / 5)),
                val_every,
                missing_teacher: MissingTeacher::Error,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch == 0 || self.patch == 0 {
            return Err(Error::invalid_argument(format!(
                "stage {} config needs positive iterations, batch, and patch",
                self.stage.number()
            )));
        }
        if !(self.lr0 > self.lr_min && self.lr_min >= 0.0) {
            return Err(Error::invalid_argument(format!(
                "learning rates must satisfy lr0 > lr_min >= 0, got {} and {}",
                self.lr0, self.lr_min
            )));
        }
        if self.warmup_steps >= self.iterations {
            return Err(Error::invalid_argument(format!(
                "warmup ({}) must be shorter than the stage ({})",
                self.warmup_steps, self.iterations
            )));
        }
        Ok(())
    }
}

/// Train/validation partition by dataset index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Holds the last `val_count` pairs (in id order) out for validation.
pub fn split_dataset(ds: &Dataset, val_count: usize) -> Result<Split> {
    if ds.len() <= val_count {
        return Err(Error::invalid_argument(format!(
            "cannot hold out {val_count} of {} images",
            ds.len()
        )));
    }
    let cut = ds.len() - val_count;
    Ok(Split {
        train: (0..cut).collect(),
        val: (cut..ds.len()).collect(),
    })
}

/// Output destinations for one stage run.
#[derive(Default)]
pub struct Sinks<'a> {
    /// CSV rows (see [`METRICS_HEADER`]); the header is written by the caller.
    pub metrics: Option<&'a mut dyn std::io::Write>,
    pub progress: Option<&'a mut dyn FnMut(String)>,
    /// Called after every completed step with the step index, the step
    /// loss, and the model state.
    pub inspect: Option<&'a mut dyn FnMut(u64, f64, &CheckpointModel)>,
}

pub const METRICS_HEADER: &str =
    "stage,step,lr,loss_total,loss_char,loss_l1,loss_dct,loss_kd,val_psnr_db,val_ssim";

struct BatchData {
    lr: Tensor,
    hr: Tensor,
    teacher: Option<Tensor>,
    kd_mask: Vec<bool>,
}

fn assemble_batch(
    cfg: &StageConfig,
    data: &Dataset,
    split: &Split,
    seed: u64,
    step: u64,
    patch: usize,
) -> Result<BatchData> {
    use rand::Rng;
    let mut rng = derive_rng(seed, &format!("stage{}-batch", cfg.stage.number()), step);
    let needs_teacher = cfg.stage != Stage::One;
    let mut lr = Vec::with_capacity(cfg.batch);
    let mut hr = Vec::with_capacity(cfg.batch);
    let mut teacher = Vec::with_capacity(cfg.batch);
    let mut kd_mask = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        let pair = &data.pairs[split.train[rng.gen_range(0..split.train.len())]];
        let teacher_img = data.teacher_for(&pair.id);
        if needs_teacher && teacher_img.is_none() && cfg.missing_teacher == MissingTeacher::Error {
            return Err(Error::invalid_argument(format!(
                "stage {} requires a teacher prediction for image '{}'",
                cfg.stage.number(),
                pair.id
            )));
        }
        let sample = sample_patch(pair, teacher_img, patch, &mut rng)?;
        kd_mask.push(sample.teacher_patch.is_some());
        teacher.push(sample.teacher_patch.unwrap_or_else(|| sample.hr_patch.clone()));
        lr.push(sample.lr_patch);
        hr.push(sample.hr_patch);
    }
    Ok(BatchData {
        lr: stack(&lr)?,
        hr: stack(&hr)?,
        teacher: needs_teacher.then(|| stack(&teacher)).transpose()?,
        kd_mask,
    })
}

fn grads_are_finite(model: &mut CheckpointModel) -> bool {
    let mut ok = true;
    let mut check = |_: String, t: &mut Tensor| {
        if let Some(g) = t.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                ok = false;
            }
        }
    };
    match model {
        CheckpointModel::Train(m) => m.for_each_param_mut(&mut check),
        CheckpointModel::Deploy(m) => m.for_each_param_mut(&mut check),
        CheckpointModel::Qat(q) => q.model.for_each_param_mut(&mut check),
    }
    ok
}

fn for_each_param(model: &mut CheckpointModel, f: &mut dyn FnMut(String, &mut Tensor)) {
    match model {
        CheckpointModel::Train(m) => m.for_each_param_mut(f),
        CheckpointModel::Deploy(m) => m.for_each_param_mut(f),
        CheckpointModel::Qat(q) => q.model.for_each_param_mut(f),
    }
}

/// Validation PSNR/SSIM on the deploy-path forward of the current weights.
fn validate(
    model: &CheckpointModel,
    ema: Option<&Ema>,
    data: &Dataset,
    split: &Split,
) -> Result<(f64, f64, NamedTensors)> {
    // the snapshot that would be checkpointed if this validation wins
    let (psnr_sum, ssim_sum, snapshot) = match model {
        CheckpointModel::Train(m) => {
            let mut candidate = m.clone();
            if let Some(ema) = ema {
                candidate.for_each_param_mut(&mut |name, t| {
                    // parameters not yet in the shadow keep their values
                    let _ = ema.apply(&name, t);
                });
            }
            let (deploy, _) = fuse_model(&candidate)?;
            let subject = EvalSubject::Deploy(&deploy);
            let mut ps = 0.0;
            let mut ss = 0.0;
            for &i in &split.val {
                let pair = &data.pairs[i];
                let pred = subject.predict(&pair.lr, EvalMode::Fp32)?;
                ps += psnr_rgb(&pred.to_tensor(), &pair.hr.to_tensor())?;
                ss += ssim(&pred.to_tensor(), &pair.hr.to_tensor())?;
            }
            let snap = snapshot_model(&CheckpointModel::Train(candidate));
            (ps, ss, snap)
        }
        CheckpointModel::Qat(q) => {
            let subject = EvalSubject::Qat(q);
            let mut ps = 0.0;
            let mut ss = 0.0;
            for &i in &split.val {
                let pair = &data.pairs[i];
                let pred = subject.predict(&pair.lr, EvalMode::FakeQuant)?;
                ps += psnr_rgb(&pred.to_tensor(), &pair.hr.to_tensor())?;
                ss += ssim(&pred.to_tensor(), &pair.hr.to_tensor())?;
            }
            (ps, ss, snapshot_model(model))
        }
        CheckpointModel::Deploy(_) => {
            return Err(Error::invalid_state(
                "validation on a bare deploy model is not part of any stage",
            ))
        }
    };
    let n = split.val.len().max(1) as f64;
    Ok((psnr_sum / n, ssim_sum / n, snapshot))
}

/// Runs (or resumes) one stage from a checkpoint, returning the completed
/// checkpoint with the best-validation weights restored into the model.
pub fn run_stage(
    cfg: &StageConfig,
    ck: Checkpoint,
    data: &Dataset,
    split: &Split,
    sinks: &mut Sinks,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if ck.stage != cfg.stage.number() {
        return Err(Error::invalid_state(format!(
            "checkpoint is for stage {}, run configured for stage {}",
            ck.stage,
            cfg.stage.number()
        )));
    }
    match (&ck.model, cfg.stage) {
        (CheckpointModel::Train(_), Stage::One | Stage::Two) => {}
        (CheckpointModel::Qat(_), Stage::Three) => {}
        (m, s) => {
            return Err(Error::invalid_state(format!(
                "stage {} cannot train a {} model; run the preceding pipeline steps first",
                s.number(),
                m.kind_name()
            )))
        }
    }
    if split.train.is_empty() {
        return Err(Error::invalid_argument("empty training split"));
    }

    let min_lr_side = split
        .train
        .iter()
        .chain(&split.val)
        .map(|&i| data.pairs[i].lr.width.min(data.pairs[i].lr.height))
        .min()
        .unwrap();
    let patch = cfg.patch.min(min_lr_side);

    let schedule = LrSchedule {
        lr0: cfg.lr0,
        lr_min: cfg.lr_min,
        warmup_steps: cfg.warmup_steps,
        total_steps: cfg.iterations,
    };
    let phase_schedule = match cfg.qat_boundaries {
        Some((t1, t2)) => Some(PhaseSchedule::new(t1, t2)?),
        None => (cfg.stage == Stage::Three)
            .then(|| PhaseSchedule::from_fractions(cfg.iterations))
            .map(Ok)
            .transpose()?,
    };

    let Checkpoint {
        stage,
        next_step,
        seed,
        mut model,
        adam,
        ema,
        mut best_psnr,
        mut best_params,
        mut skipped_nonfinite,
    } = ck;
    let mut adam = adam.unwrap_or_default();
    let mut ema = match (ema, cfg.ema_decay) {
        (Some(e), _) => Some(e),
        (None, Some(decay)) => Some(Ema::new(decay)?),
        (None, None) => None,
    };

    for step in next_step..cfg.iterations {
        if let (CheckpointModel::Qat(q), Some(ps)) = (&mut model, phase_schedule) {
            set_phase(q, step, ps);
        }

        let batch = assemble_batch(cfg, data, split, seed, step, patch)?;
        let weights = LossWeights::for_stage(cfg.stage, step, cfg.iterations);

        let (parts, finite) = match &mut model {
            CheckpointModel::Train(m) => {
                let (pred, cache) = m.forward_train(&batch.lr)?;
                let (parts, grad) = stage_loss_masked(
                    cfg.stage,
                    &pred,
                    &batch.hr,
                    batch.teacher.as_ref(),
                    &weights,
                    Some(&batch.kd_mask),
                )?;
                m.backward(&cache, &grad)?;
                (parts, grads_are_finite(&mut model))
            }
            CheckpointModel::Qat(q) => {
                let (pred, cache) = q.forward_fq(&batch.lr)?;
                let (parts, grad) = stage_loss_masked(
                    cfg.stage,
                    &pred,
                    &batch.hr,
                    batch.teacher.as_ref(),
                    &weights,
                    Some(&batch.kd_mask),
                )?;
                q.backward(&cache, &grad)?;
                (parts, grads_are_finite(&mut model))
            }
            CheckpointModel::Deploy(_) => unreachable!("rejected above"),
        };

        let lr = lr_at(step, &schedule);
        if !finite {
            skipped_nonfinite += 1;
            for_each_param(&mut model, &mut |_, t| t.zero_grad());
            if let Some(p) = sinks.progress.as_mut() {
                p(format!(
                    "stage {} step {step}: non-finite gradients, step skipped ({skipped_nonfinite} total)",
                    cfg.stage.number()
                ));
            }
        } else {
            if let Some(max_norm) = cfg.grad_clip_norm {
                // global-norm clip in two passes over the parameter tree
                let mut sq = 0f64;
                for_each_param(&mut model, &mut |_, t| {
                    if let Some(g) = t.grad() {
                        for &v in g {
                            sq += f64::from(v) * f64::from(v);
                        }
                    }
                });
                let norm = sq.sqrt();
                if norm > max_norm {
                    let scale = (max_norm / norm) as f32;
                    for_each_param(&mut model, &mut |_, t| {
                        if t.grad().is_some() {
                            for v in t.grad_mut() {
                                *v *= scale;
                            }
                        }
                    });
                }
            }

            adam.begin_step();
            for_each_param(&mut model, &mut |name, t| {
                adam.update(&name, t, lr);
            });
            if let Some((lo, hi)) = cfg.weight_clip {
                for_each_param(&mut model, &mut |_, t| {
                    for v in t.data_mut() {
                        *v = v.clamp(lo, hi);
                    }
                });
            }
            if let Some(ema) = ema.as_mut() {
                for_each_param(&mut model, &mut |name, t| {
                    ema.update(&name, t);
                });
            }
            for_each_param(&mut model, &mut |_, t| t.zero_grad());
            if let CheckpointModel::Train(m) = &mut model {
                m.bn_recalibrated = false;
            }
        }

        let is_last = step + 1 == cfg.iterations;
        let mut val_cols = (String::new(), String::new());
        if !split.val.is_empty() && (is_last || (step + 1) % cfg.val_every == 0) {
            let (vp, vs, snap) = validate(&model, ema.as_ref(), data, split)?;
            if best_psnr.map_or(true, |b| vp > b) {
                best_psnr = Some(vp);
                best_params = Some(snap);
            }
            val_cols = (format!("{vp:.4}"), format!("{vs:.5}"));
            if let Some(p) = sinks.progress.as_mut() {
                p(format!(
                    "stage {} step {}/{} loss {:.5} val psnr {:.3} dB ssim {:.4}",
                    cfg.stage.number(),
                    step + 1,
                    cfg.iterations,
                    parts.total,
                    vp,
                    vs
                ));
            }
        }

        if let Some(mw) = sinks.metrics.as_mut() {
            writeln!(
                mw,
                "{},{},{:.8e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{},{}",
                cfg.stage.number(),
                step,
                lr,
                parts.total,
                parts.charbonnier,
                parts.l1,
                parts.dct,
                parts.kd,
                val_cols.0,
                val_cols.1
            )
            .map_err(|e| Error::io("<metrics sink>", e))?;
        }
        if let Some(cb) = sinks.inspect.as_mut() {
            cb(step, parts.total, &model);
        }
    }

    // ship the best validation weights
    if let Some(best) = &best_params {
        restore_model(&mut model, best)?;
        if let CheckpointModel::Train(m) = &mut model {
            m.bn_recalibrated = false;
        }
    }

    Ok(Checkpoint {
        stage,
        next_step: cfg.iterations,
        seed,
        model,
        adam: Some(adam),
        ema,
        best_psnr,
        best_params,
        skipped_nonfinite,
    })
}

/// Fresh stage-1 checkpoint around a newly initialized model.
pub fn fresh_stage1(config: crate::model::StudentConfig, seed: u64) -> Result<Checkpoint> {
    Ok(Checkpoint {
        stage: 1,
        next_step: 0,
        seed,
        model: CheckpointModel::Train(TrainModel::init(config, seed)?),
        adam: Some(AdamState::new()),
        ema: None,
        best_psnr: None,
        best_params: None,
        skipped_nonfinite: 0,
    })
}

/// Rolls a completed stage-N checkpoint into the starting checkpoint of
/// stage N+1 (fresh optimizer, fresh best tracking).
pub fn advance_stage(ck: Checkpoint, to_stage: Stage, model: CheckpointModel) -> Checkpoint {
    Checkpoint {
        stage: to_stage.number(),
        next_step: 0,
        seed: ck.seed,
        model,
        adam: Some(AdamState::new()),
        ema: None,
        best_psnr: None,
        best_params: None,
        skipped_nonfinite: ck.skipped_nonfinite,
    }
}

/// Deterministic forward-only batches for BN recalibration.
pub fn recalibration_batches(
    data: &Dataset,
    split: &Split,
    seed: u64,
    count: usize,
    batch_size: usize,
    patch: usize,
) -> Result<Vec<Tensor>> {
    use rand::Rng;
    let min_side = split
        .train
        .iter()
        .map(|&i| data.pairs[i].lr.width.min(data.pairs[i].lr.height))
        .min()
        .ok_or_else(|| Error::invalid_argument("empty training split"))?;
    let patch = patch.min(min_side);
    (0..count)
        .map(|k| {
            let mut rng = derive_rng(seed, "recal-batch", k as u64);
            let samples: Vec<Tensor> = (0..batch_size)
                .map(|_| {
                    let pair = &data.pairs[split.train[rng.gen_range(0..split.train.len())]];
                    sample_patch(pair, None, patch, &mut rng).map(|s| s.lr_patch)
                })
                .collect::<Result<_>>()?;
            stack(&samples)
        })
        .collect()
}

/// Fuses a (recalibrated) model, attaches QAT nodes, and primes the
/// observers with one calibration batch so the very first training step
/// has calibrated parameters regardless of its phase.
pub fn instrument_for_qat(
    model: &TrainModel,
    data: &Dataset,
    split: &Split,
    seed: u64,
    batch_size: usize,
    patch: usize,
) -> Result<QatModel> {
    use rand::Rng;
    let min_side = split
        .train
        .iter()
        .map(|&i| data.pairs[i].lr.width.min(data.pairs[i].lr.height))
        .min()
        .ok_or_else(|| Error::invalid_argument("empty training split"))?;
    let patch = patch.min(min_side);
    let (deploy, _) = fuse_model(model)?;
    let mut qat = crate::quant::insert_qat(deploy);
    let calib = {
        let mut rng = derive_rng(seed, "qat-calib", 0);
        let samples: Vec<Tensor> = (0..batch_size.max(1))
            .map(|_| {
                let pair = &data.pairs[split.train[rng.gen_range(0..split.train.len())]];
                sample_patch(pair, None, patch, &mut rng).map(|s| s.lr_patch)
            })
            .collect::<Result<_>>()?;
        stack(&samples)?
    };
    qat.forward_observe_only(&calib)?;
    Ok(qat)
}

/// Prepares stage 3 from a stage-2 model: BN recalibration over
/// forward-only batches, fusion to the deploy graph, QAT node insertion,
/// and one observer-calibration pass.
pub fn prepare_qat(
    mut model: TrainModel,
    data: &Dataset,
    split: &Split,
    seed: u64,
    recal_batches: usize,
    recal_batch_size: usize,
    patch: usize,
) -> Result<QatModel> {
    let batches = recalibration_batches(data, split, seed, recal_batches, recal_batch_size, patch)?;
    crate::model::recalibrate_bn(&mut model, batches, recal_batches)?;
    instrument_for_qat(&model, data, split, seed, recal_batch_size, patch)
}

/// Validation PSNR of a checkpoint model over the split, on the deploy
/// path (used by the CLI for reporting).
pub fn validation_psnr(
    model: &CheckpointModel,
    data: &Dataset,
    split: &Split,
) -> Result<(f64, f64)> {
    let (p, s, _) = validate(model, None, data, split)?;
    Ok((p, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_dataset, SynthKind};
    use crate::model::StudentConfig;

    fn tiny_cfg() -> StudentConfig {
        StudentConfig {
            num_blocks: 2,
            channels: 6,
            num_conv3_branches: 2,
            identity_branch: true,
        }
    }

    fn tiny_dataset() -> Dataset {
        Dataset::new(make_synthetic_dataset(SynthKind::Checkerboards, 6, 24, 11).unwrap()).unwrap()
    }

    fn tiny_stage1(iters: u64) -> StageConfig {
        let mut cfg = StageConfig::defaults_for(Stage::One, iters);
        cfg.patch = 8;
        cfg.batch = 2;
        cfg.warmup_steps = 2.min(iters - 1);
        cfg.val_every = iters; // validate only at the end
        cfg
    }

    #[test]
    fn split_holds_out_tail() {
        let ds = tiny_dataset();
        let split = split_dataset(&ds, 2).unwrap();
        assert_eq!(split.train, vec![0, 1, 2, 3]);
        assert_eq!(split.val, vec![4, 5]);
        assert!(split_dataset(&ds, 6).is_err());
    }

    #[test]
    fn stage_one_runs_and_is_deterministic() {
        let ds = tiny_dataset();
        let split = split_dataset(&ds, 1).unwrap();
        let cfg = tiny_stage1(4);
        let run = || {
            let ck = fresh_stage1(tiny_cfg(), 5).unwrap();
            let out = run_stage(&cfg, ck, &ds, &split, &mut Sinks::default()).unwrap();
            match out.model {
                CheckpointModel::Train(m) => m.stem.weight.data().to_vec(),
                _ => unreachable!(),
            }
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn resume_reproduces_loss_curve_exactly() {
        let ds = tiny_dataset();
        let split = split_dataset(&ds, 1).unwrap();
        let cfg = tiny_stage1(6);

        let mut straight = Vec::new();
        {
            let mut collect = |_: u64, loss: f64, _: &CheckpointModel| straight.push(loss);
            let mut sinks = Sinks {
                inspect: Some(&mut collect),
                ..Default::default()
            };
            let ck = fresh_stage1(tiny_cfg(), 5).unwrap();
            run_stage(&cfg, ck, &ds, &split, &mut sinks).unwrap();
        }

        // interrupted at step 3, serialized, resumed
        let mut resumed = Vec::new();
        {
            let mut half_cfg = cfg.clone();
            half_cfg.iterations = 3;
            half_cfg.warmup_steps = 2;
            half_cfg.val_every = 1000; // no validation mid-run
            let mut collect = |_: u64, loss: f64, _: &CheckpointModel| resumed.push(loss);
            let mut sinks = Sinks {
                inspect: Some(&mut collect),
                ..Default::default()
            };
            let ck = fresh_stage1(tiny_cfg(), 5).unwrap();
            let mid = run_stage(&half_cfg, ck, &ds, &split, &mut sinks).unwrap();
            let bytes = mid.to_bytes();
            let restored = Checkpoint::from_bytes(&bytes).unwrap();
            let mut collect = |_: u64, loss: f64, _: &CheckpointModel| resumed.push(loss);
            let mut sinks = Sinks {
                inspect: Some(&mut collect),
                ..Default::default()
            };
            run_stage(&cfg, restored, &ds, &split, &mut sinks).unwrap();
        }
        assert_eq!(straight, resumed);
    }

    #[test]
    fn stage_mismatch_is_invalid_state() {
        let ds = tiny_dataset();
        let split = split_dataset(&ds, 1).unwrap();
        let cfg = StageConfig::defaults_for(Stage::Two, 4);
        let ck = fresh_stage1(tiny_cfg(), 5).unwrap(); // stage 1 checkpoint
        let err = run_stage(&cfg, ck, &ds, &split, &mut Sinks::default());
        assert!(matches!(err, Err(Error::InvalidState(_))));
    }

    #[test]
    fn stage_two_clips_weights_every_step() {
        let ds = tiny_dataset();
        let split = split_dataset(&ds, 1).unwrap();
        // run a short stage 1 first so stage 2 starts from something sane
        let ck = fresh_stage1(tiny_cfg(), 5).unwrap();
        let s1 = run_stage(&tiny_stage1(2), ck, &ds, &split, &mut Sinks::default()).unwrap();

        // give every train image a teacher (ground truth serves here)
        let mut ds2 = ds.clone();
        for p in &ds2.pairs {
            ds2.teacher.insert(p.id.clone(), p.hr.clone());
        }

        let mut cfg = StageConfig::defaults_for(Stage::Two, 3);
        cfg.patch = 8;
        cfg.batch = 2;
        cfg.val_every = 3;
        cfg.weight_clip = Some((-0.02, 0.02)); // aggressive so clipping bites
        let model = match s1.model.clone() {
            CheckpointModel::Train(m) => m,
            _ => unreachable!(),
        };
        let ck2 = advance_stage(s1, Stage::Two, CheckpointModel::Train(model));
        let mut seen = Vec::new();
        let mut check = |_: u64, _: f64, m: &CheckpointModel| {
            if let CheckpointModel::Train(m) = m {
                let mut max = 0f32;
                m.clone().for_each_param_mut(&mut |_, t| {
                    for &v in t.data() {
                        max = max.max(v.abs());
                    }
                });
                seen.push(max);
            }
        };
        let mut sinks = Sinks {
            inspect: Some(&mut check),
            ..Default::default()
        };
        let out = run_stage(&cfg, ck2, &ds2, &split, &mut sinks).unwrap();
        assert!(seen.iter().all(|&m| m <= 0.02 + 1e-6), "{seen:?}");
        assert!(out.ema.is_some());
    }

    #[test]
    fn stage_two_without_teacher_errors() {
        let ds = tiny_dataset(); // no teacher cache
        let split = split_dataset(&ds, 1).unwrap();
        let ck = fresh_stage1(tiny_cfg(), 5).unwrap();
        let s1 = run_stage(&tiny_stage1(2), ck, &ds, &split, &mut Sinks::default()).unwrap();
        let model = match s1.model.clone() {
            CheckpointModel::Train(m) => m,
            _ => unreachable!(),
        };
        let mut cfg = StageConfig::defaults_for(Stage::Two, 2);
        cfg.patch = 8;
        cfg.batch = 1;
        let ck2 = advance_stage(s1, Stage::Two, CheckpointModel::Train(model));
        let err = run_stage(&cfg, ck2, &ds, &split, &mut Sinks::default());
        assert!(err.is_err());
    }
}
