use qsr_core::config::RunConfig;
use qsr_core::data::{make_synthetic_dataset, Dataset};
use qsr_core::eval::*;
use qsr_core::losses::Stage;
use qsr_core::train::*;
use std::time::Instant;

fn main() {
    let cfg = RunConfig::default();
    let pairs = make_synthetic_dataset(cfg.data_kind, cfg.data_n, cfg.data_size, cfg.seed).unwrap();
    let ds = Dataset::new(pairs).unwrap();
    let split = split_dataset(&ds, cfg.data_val_count).unwrap();

    // bicubic baseline on the val split
    let val = qsr_core::pipeline::validation_dataset(&ds, &split);
    let bi = evaluate(&EvalSubject::Bicubic, &val, EvalMode::Bicubic).unwrap();
    println!("bicubic val: {:.3} dB ssim {:.4}", bi.mean_psnr_db, bi.mean_ssim);

    let mut scfg = cfg.stage_config(Stage::One);
    scfg.iterations = 120;
    scfg.warmup_steps = 6;
    scfg.val_every = 20;
    let ck = fresh_stage1(cfg.student_config(), cfg.seed).unwrap();
    let t0 = Instant::now();
    let mut prog = |s: String| println!("  {s}");
    let mut sinks = Sinks { progress: Some(&mut prog), ..Default::default() };
    let out = run_stage(&scfg, ck, &ds, &split, &mut sinks).unwrap();
    println!("stage1 120 iters: {:.1} s, best val psnr {:?}", t0.elapsed().as_secs_f64(), out.best_psnr);
}
