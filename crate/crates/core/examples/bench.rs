use qsr_core::config::RunConfig;
use qsr_core::data::{make_synthetic_dataset, Dataset};
use qsr_core::losses::Stage;
use qsr_core::train::*;
use std::time::Instant;

fn main() {
    let cfg = RunConfig::default();
    let pairs = make_synthetic_dataset(cfg.data_kind, cfg.data_n, cfg.data_size, cfg.seed).unwrap();
    let ds = Dataset::new(pairs).unwrap();
    let split = split_dataset(&ds, cfg.data_val_count).unwrap();
    let mut scfg = cfg.stage_config(Stage::One);
    scfg.iterations = 12;
    scfg.warmup_steps = 2;
    scfg.val_every = 100;
    let ck = fresh_stage1(cfg.student_config(), cfg.seed).unwrap();
    let t0 = Instant::now();
    let out = run_stage(&scfg, ck, &ds, &split, &mut Sinks::default()).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("12 stage-1 iterations (batch 8, patch 32): {dt:.2} s -> {:.3} s/iter", dt / 12.0);
    let t0 = Instant::now();
    let (p, s) = validation_psnr(&out.model, &ds, &split).unwrap();
    println!("one validation pass (4 images, fuse+eval): {:.2} s, psnr {p:.2} ssim {s:.3}", t0.elapsed().as_secs_f64());
}
