use qsr_core::model::*;
use qsr_core::tensor::*;
use qsr_core::rng::derive_rng;
use rand::Rng;
use std::time::Instant;

fn t(shape: [usize; 4], seed: u64) -> Tensor {
    let mut rng = derive_rng(seed, "b", 0);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

fn main() {
    let x = t([8, 32, 32, 32], 1);
    let mut p = ConvParams::zeros(32, 32, 3);
    for v in p.weight.data_mut() { *v = 0.01; }

    let t0 = Instant::now();
    let mut y = Tensor::zeros([1,1,1,1]);
    for _ in 0..20 { y = conv2d(&x, &p).unwrap(); }
    let fwd = t0.elapsed().as_secs_f64() / 20.0;
    println!("conv2d 8x32x32x32 -> 32: {:.4} s ({:.2} GMAC/s)", fwd, 8.0*32.0*32.0*1024.0*9.0/fwd/1e9);

    let t0 = Instant::now();
    for _ in 0..10 { let _ = conv2d_grad(&x, &p, &y).unwrap(); }
    let bwd = t0.elapsed().as_secs_f64() / 10.0;
    println!("conv2d_grad: {:.4} s", bwd);

    let mut bn = BNParams::identity(32);
    let t0 = Instant::now();
    for _ in 0..20 { let _ = batch_norm(&x, &mut bn, BnMode::Train).unwrap(); }
    println!("bn fwd: {:.4} s", t0.elapsed().as_secs_f64()/20.0);
    let (yy, cache) = batch_norm(&x, &mut bn, BnMode::Train).unwrap();
    let t0 = Instant::now();
    for _ in 0..20 { let _ = batch_norm_grad(&x, &bn, &yy, BnMode::Train, cache.as_ref()).unwrap(); }
    println!("bn bwd: {:.4} s", t0.elapsed().as_secs_f64()/20.0);

    // full model step
    let cfg = StudentConfig::default();
    let mut m = TrainModel::init(cfg, 1).unwrap();
    let xin = t([8, 3, 32, 32], 2);
    let t0 = Instant::now();
    let (pred, cache) = m.forward_train(&xin).unwrap();
    println!("model fwd: {:.4} s", t0.elapsed().as_secs_f64());
    let g = Tensor::filled(pred.shape(), 1e-4);
    let t0 = Instant::now();
    m.backward(&cache, &g).unwrap();
    println!("model bwd: {:.4} s", t0.elapsed().as_secs_f64());
}
