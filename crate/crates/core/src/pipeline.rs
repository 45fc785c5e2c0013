//! End-to-end orchestration: dataset generation, teacher-cache
//! preparation, the three training stages with BN recalibration and
//! fusion in between, deploy-graph export, and the final evaluation
//! reports. The CLI subcommands are thin wrappers over the steps here.

use crate::config::{RunConfig, TeacherMode};
use crate::data::{self, Dataset, Rgb8Image};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalMode, EvalSubject, MetricReport};
use crate::losses::Stage;
use crate::model::{fuse_model, TrainModel};
use crate::quant::export_graph;
use crate::train::{
    advance_stage, fresh_stage1, run_stage, split_dataset, Checkpoint, CheckpointModel, Sinks,
    Split, METRICS_HEADER,
};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Directory lock guarding against concurrent runs on the same outputs.
/// The lock file is removed on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<OutputLock> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".qsr.lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "pid {}", std::process::id());
                Ok(OutputLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::invalid_state(format!(
                    "output directory {dir:?} is locked by another run (remove {path:?} if stale)"
                )))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Well-known artifact names inside a run directory.
pub mod artifacts {
    pub const CONFIG: &str = "config.resolved.txt";
    pub const METRICS: &str = "metrics.csv";
    pub const STAGE1: &str = "stage1.ckpt";
    pub const STAGE2: &str = "stage2.ckpt";
    pub const RECAL: &str = "recal.ckpt";
    pub const FUSED: &str = "fused.ckpt";
    pub const STAGE3: &str = "stage3.ckpt";
    pub const GRAPH: &str = "deploy.qsr";
    pub fn eval_csv(mode: &str) -> String {
        format!("eval_{mode}.csv")
    }
}

/// Generates (or regenerates) the synthetic dataset directory.
pub fn gen_data(cfg: &RunConfig, root: &Path, force: bool) -> Result<Vec<data::ImagePair>> {
    let pairs =
        data::make_synthetic_dataset(cfg.data_kind, cfg.data_n, cfg.data_size, cfg.seed)?;
    data::save_dataset(root, &pairs, force)?;
    Ok(pairs)
}

/// Trains the proxy teacher on the train split with the stage-1 loss and
/// writes its predictions for every image into `<root>/teacher/`.
pub fn build_teacher_cache(
    cfg: &RunConfig,
    root: &Path,
    data: &mut Dataset,
    split: &Split,
    progress: &mut dyn FnMut(String),
) -> Result<()> {
    match cfg.teacher_mode {
        TeacherMode::Files => {
            if data.teacher.is_empty() {
                return Err(Error::invalid_state(format!(
                    "teacher.mode = files but {:?} holds no usable predictions",
                    root.join("teacher")
                )));
            }
            Ok(())
        }
        TeacherMode::GroundTruth => {
            for pair in &data.pairs {
                data::save_teacher(root, &pair.id, &pair.hr)?;
            }
            for pair in &data.pairs {
                data.teacher.insert(pair.id.clone(), pair.hr.clone());
            }
            Ok(())
        }
        TeacherMode::Proxy => {
            progress(format!(
                "training proxy teacher ({} blocks, {} channels, {} iterations)",
                cfg.teacher_blocks, cfg.teacher_channels, cfg.teacher_iterations
            ));
            let mut stage_cfg = crate::train::StageConfig::defaults_for(
                Stage::One,
                cfg.teacher_iterations,
            );
            stage_cfg.lr0 = cfg.teacher_lr0;
            stage_cfg.patch = cfg.teacher_patch;
            stage_cfg.batch = cfg.teacher_batch;
            stage_cfg.warmup_steps = cfg.teacher_iterations / 20;
            stage_cfg.val_every = cfg.teacher_iterations; // validate once at the end
            // independent seed stream so teacher and student draws differ
            let ck = fresh_stage1(cfg.teacher_student_config(), cfg.seed ^ 0x7eac_ce11)?;
            let done = run_stage(&stage_cfg, ck, data, split, &mut Sinks::default())?;
            let model = match done.model {
                CheckpointModel::Train(m) => m,
                _ => unreachable!(),
            };
            let (deploy, _) = fuse_model(&model)?;
            for pair in &data.pairs {
                let pred = deploy.infer(&pair.lr.to_tensor())?;
                let img = Rgb8Image::from_tensor(&pred)?;
                data::save_teacher(root, &pair.id, &img)?;
            }
            for pair in &data.pairs {
                let t = data::teacher_cache_lookup(root, pair)?.expect("just written");
                data.teacher.insert(pair.id.clone(), t);
            }
            if let Some(psnr) = done.best_psnr {
                progress(format!("proxy teacher validation psnr {psnr:.3} dB"));
            }
            Ok(())
        }
    }
}

/// Outcome of a full pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub out_dir: PathBuf,
    pub graph_path: PathBuf,
    pub fp32: MetricReport,
    pub fakequant: MetricReport,
    pub int8: MetricReport,
    pub bicubic: MetricReport,
}

/// Runs gen-data → teacher → stage 1 → stage 2 → BN recalibration →
/// fusion → QAT (stage 3) → export → evaluation, writing every artifact
/// under `out_dir`.
pub fn run_pipeline(
    cfg: &RunConfig,
    out_dir: &Path,
    progress: &mut dyn FnMut(String),
) -> Result<PipelineSummary> {
    let _lock = OutputLock::acquire(out_dir)?;
    std::fs::write(out_dir.join(artifacts::CONFIG), cfg.serialize())
        .map_err(|e| Error::io(out_dir.join(artifacts::CONFIG), e))?;

    let data_root = out_dir.join("data");
    progress(format!(
        "generating {} '{}' images of {}x{} (seed {})",
        cfg.data_n,
        cfg.data_kind.name(),
        cfg.data_size,
        cfg.data_size,
        cfg.seed
    ));
    gen_data(cfg, &data_root, true)?;
    let mut dataset = data::load_dataset(&data_root)?;
    let split = split_dataset(&dataset, cfg.data_val_count)?;

    build_teacher_cache(cfg, &data_root, &mut dataset, &split, progress)?;

    let metrics_path = out_dir.join(artifacts::METRICS);
    let mut metrics = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;

    // stage 1
    progress(format!("stage 1: {} iterations", cfg.stage1_iterations));
    let s1 = {
        let mut sinks = Sinks {
            metrics: Some(&mut metrics),
            progress: Some(progress),
            inspect: None,
        };
        run_stage(
            &cfg.stage_config(Stage::One),
            fresh_stage1(cfg.student_config(), cfg.seed)?,
            &dataset,
            &split,
            &mut sinks,
        )?
    };
    s1.save(&out_dir.join(artifacts::STAGE1))?;

    // stage 2
    progress(format!("stage 2: {} iterations", cfg.stage2_iterations));
    let s1_model = match s1.model.clone() {
        CheckpointModel::Train(m) => m,
        _ => unreachable!(),
    };
    let s2 = {
        let mut sinks = Sinks {
            metrics: Some(&mut metrics),
            progress: Some(progress),
            inspect: None,
        };
        run_stage(
            &cfg.stage_config(Stage::Two),
            advance_stage(s1, Stage::Two, CheckpointModel::Train(s1_model)),
            &dataset,
            &split,
            &mut sinks,
        )?
    };
    s2.save(&out_dir.join(artifacts::STAGE2))?;

    // recalibration + fusion + QAT insertion
    progress(format!(
        "recalibrating BN statistics over {} forward-only batches",
        cfg.recal_batches
    ));
    let s2_model = match s2.model.clone() {
        CheckpointModel::Train(m) => m,
        _ => unreachable!(),
    };
    let (recal_model, deploy, qat) = prepare_deploy(cfg, s2_model, &dataset, &split)?;
    Checkpoint {
        stage: 2,
        next_step: cfg.stage2_iterations,
        seed: cfg.seed,
        model: CheckpointModel::Train(recal_model.clone()),
        adam: None,
        ema: None,
        best_psnr: s2.best_psnr,
        best_params: None,
        skipped_nonfinite: s2.skipped_nonfinite,
    }
    .save(&out_dir.join(artifacts::RECAL))?;

    let fusion_dev = fusion_self_check(&recal_model, &deploy, &dataset)?;
    progress(format!(
        "fused deploy graph: max |train-eval - deploy| = {fusion_dev:.2e} over the validation images"
    ));
    Checkpoint {
        stage: 2,
        next_step: cfg.stage2_iterations,
        seed: cfg.seed,
        model: CheckpointModel::Deploy(deploy.clone()),
        adam: None,
        ema: None,
        best_psnr: s2.best_psnr,
        best_params: None,
        skipped_nonfinite: s2.skipped_nonfinite,
    }
    .save(&out_dir.join(artifacts::FUSED))?;

    // stage 3 (QAT)
    let s3_cfg = cfg.stage_config(Stage::Three);
    if let Some((t1, t2)) = s3_cfg.qat_boundaries {
        progress(format!(
            "stage 3: {} iterations, observers disable at step {t1}, fake-quant freezes at step {t2}",
            cfg.stage3_iterations
        ));
    }
    let s3 = {
        let mut sinks = Sinks {
            metrics: Some(&mut metrics),
            progress: Some(progress),
            inspect: None,
        };
        run_stage(
            &s3_cfg,
            advance_stage(s2, Stage::Three, CheckpointModel::Qat(qat)),
            &dataset,
            &split,
            &mut sinks,
        )?
    };
    s3.save(&out_dir.join(artifacts::STAGE3))?;

    let qat_final = match &s3.model {
        CheckpointModel::Qat(q) => q.clone(),
        _ => unreachable!(),
    };
    let graph = export_graph(&qat_final)?;
    let graph_path = out_dir.join(artifacts::GRAPH);
    graph.save(&graph_path)?;
    progress(format!("exported deploy graph to {graph_path:?}"));

    // evaluation on the held-out split
    let val_set = validation_dataset(&dataset, &split);
    let fp32 = evaluate(&EvalSubject::Deploy(&deploy), &val_set, EvalMode::Fp32)?;
    let fakequant = evaluate(&EvalSubject::Qat(&qat_final), &val_set, EvalMode::FakeQuant)?;
    let int8 = evaluate(&EvalSubject::Graph(&graph), &val_set, EvalMode::Int8)?;
    let bicubic = evaluate(&EvalSubject::Bicubic, &val_set, EvalMode::Bicubic)?;
    for report in [&fp32, &fakequant, &int8, &bicubic] {
        let path = out_dir.join(artifacts::eval_csv(report.mode.label()));
        std::fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
        progress(format!(
            "{:<9} mean psnr {:.3} dB ssim {:.4}",
            report.mode.label(),
            report.mean_psnr_db,
            report.mean_ssim
        ));
    }

    Ok(PipelineSummary {
        out_dir: out_dir.to_path_buf(),
        graph_path,
        fp32,
        fakequant,
        int8,
        bicubic,
    })
}

/// BN recalibration, fusion, and QAT preparation of a stage-2 model.
pub fn prepare_deploy(
    cfg: &RunConfig,
    model: TrainModel,
    dataset: &Dataset,
    split: &Split,
) -> Result<(TrainModel, crate::model::DeployModel, crate::quant::QatModel)> {
    let mut recal_model = model;
    let batches = crate::train::recalibration_batches(
        dataset,
        split,
        cfg.seed,
        cfg.recal_batches,
        cfg.recal_batch_size,
        cfg.stage3_patch,
    )?;
    crate::model::recalibrate_bn(&mut recal_model, batches, cfg.recal_batches)?;
    let (deploy, report) = fuse_model(&recal_model)?;
    debug_assert!(report.bn_recalibrated);
    let qat = crate::train::instrument_for_qat(
        &recal_model,
        dataset,
        split,
        cfg.seed,
        cfg.recal_batch_size,
        cfg.stage3_patch,
    )?;
    Ok((recal_model, deploy, qat))
}

/// Max elementwise deviation between the eval-mode training forward and
/// the fused deploy forward over the validation images.
pub fn fusion_self_check(
    model: &TrainModel,
    deploy: &crate::model::DeployModel,
    dataset: &Dataset,
) -> Result<f64> {
    let mut max_dev = 0f64;
    for pair in dataset.pairs.iter().take(4) {
        let x = pair.lr.to_tensor();
        let a = model.forward_eval(&x)?;
        let b = deploy.forward(&x)?;
        for (p, q) in a.data().iter().zip(b.data()) {
            max_dev = max_dev.max((f64::from(*p) - f64::from(*q)).abs());
        }
    }
    Ok(max_dev)
}

/// The held-out images as their own dataset (teacher cache not needed).
pub fn validation_dataset(dataset: &Dataset, split: &Split) -> Dataset {
    Dataset {
        pairs: split.val.iter().map(|&i| dataset.pairs[i].clone()).collect(),
        teacher: Default::default(),
    }
}
