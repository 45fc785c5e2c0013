//! The ×3 super-resolution student network in its multi-branch training
//! form and its fused single-branch deploy form.
//!
//! Training blocks sum several convolution branches (each followed by
//! BatchNorm) plus an identity-BN branch and apply ReLU. At deploy time
//! every branch folds analytically into one 3×3 convolution, so the
//! inference graph is a plain stem → conv/ReLU chain → global skip →
//! head → PixelShuffle pipeline with no normalization nodes left.

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::tensor::{
    add, batch_norm, batch_norm_grad, conv2d, conv2d_grad, pixel_shuffle, pixel_unshuffle, relu,
    relu_grad, BNParams, BnCache, BnMode, ConvParams, Tensor,
};
use rand::Rng;

/// Upscale factor. The whole artifact is specific to ×3.
pub const SCALE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StudentConfig {
    pub num_blocks: usize,
    pub channels: usize,
    /// Number of parallel 3×3 branches per block.
    pub num_conv3_branches: usize,
    pub identity_branch: bool,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            num_blocks: 8,
            channels: 32,
            num_conv3_branches: 4,
            identity_branch: true,
        }
    }
}

impl StudentConfig {
    /// Channels produced by the head convolution: one r² group per RGB
    /// channel, consumed by PixelShuffle.
    pub fn head_channels(&self) -> usize {
        3 * SCALE * SCALE
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.channels == 0 {
            return Err(Error::invalid_argument(format!(
                "student config needs at least one block and one channel, got {self:?}"
            )));
        }
        if self.num_conv3_branches == 0 {
            return Err(Error::invalid_argument(
                "student config needs at least one 3x3 branch",
            ));
        }
        Ok(())
    }
}

/// One convolution branch with its BatchNorm.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchConv {
    pub conv: ConvParams,
    pub bn: BNParams,
}

/// Multi-branch training block: `ReLU(sum of branch outputs)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBlock {
    pub conv3_branches: Vec<BranchConv>,
    pub conv1_branch: BranchConv,
    pub identity_bn: Option<BNParams>,
}

/// The student network in training form.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainModel {
    pub config: StudentConfig,
    pub stem: ConvParams,
    pub blocks: Vec<TrainBlock>,
    pub head: ConvParams,
    /// Set by [`recalibrate_bn`], cleared whenever parameters change.
    pub bn_recalibrated: bool,
}

/// The fused deploy form: no BatchNorm, no branches. Obtained only through
/// [`fuse_model`]; there is deliberately no operation that fuses it again.
#[derive(Debug, Clone, PartialEq)]
pub struct DeployModel {
    pub config: StudentConfig,
    pub stem: ConvParams,
    /// One 3×3 convolution per block, each followed by ReLU.
    pub blocks: Vec<ConvParams>,
    pub head: ConvParams,
}

/// Provenance of a fusion, returned alongside the deploy model.
#[derive(Debug, Clone, Copy)]
pub struct FusionReport {
    /// Whether the source model's BN statistics were refreshed by
    /// [`recalibrate_bn`] after the last parameter update.
    pub bn_recalibrated: bool,
}

fn init_conv(c_out: usize, c_in: usize, k: usize, rng: &mut impl Rng) -> ConvParams {
    let bound = 1.0 / ((c_in * k * k) as f32).sqrt();
    let mut p = ConvParams::zeros(c_out, c_in, k);
    for v in p.weight.data_mut() {
        *v = (rng.gen::<f32>() * 2.0 - 1.0) * bound;
    }
    for v in p.bias.data_mut() {
        *v = (rng.gen::<f32>() * 2.0 - 1.0) * bound;
    }
    p
}

impl TrainModel {
    /// Fan-in-scaled uniform initialization of every convolution; BN starts
    /// at identity (gamma 1, beta 0, mean 0, var 1).
    pub fn init(config: StudentConfig, seed: u64) -> Result<TrainModel> {
        config.validate()?;
        let c = config.channels;
        let mut rng = derive_rng(seed, "model-init", 0);
        let stem = init_conv(c, 3, 3, &mut rng);
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for _ in 0..config.num_blocks {
            let conv3_branches = (0..config.num_conv3_branches)
                .map(|_| BranchConv {
                    conv: init_conv(c, c, 3, &mut rng),
                    bn: BNParams::identity(c),
                })
                .collect();
            let conv1_branch = BranchConv {
                conv: init_conv(c, c, 1, &mut rng),
                bn: BNParams::identity(c),
            };
            let identity_bn = config.identity_branch.then(|| BNParams::identity(c));
            blocks.push(TrainBlock {
                conv3_branches,
                conv1_branch,
                identity_bn,
            });
        }
        let head = init_conv(config.head_channels(), c, 3, &mut rng);
        Ok(TrainModel {
            config,
            stem,
            blocks,
            head,
            bn_recalibrated: false,
        })
    }

    /// All-zero parameters (BN still at identity); useful as a fixture.
    pub fn zeros(config: StudentConfig) -> Result<TrainModel> {
        config.validate()?;
        let c = config.channels;
        let blocks = (0..config.num_blocks)
            .map(|_| TrainBlock {
                conv3_branches: (0..config.num_conv3_branches)
                    .map(|_| BranchConv {
                        conv: ConvParams::zeros(c, c, 3),
                        bn: BNParams::identity(c),
                    })
                    .collect(),
                conv1_branch: BranchConv {
                    conv: ConvParams::zeros(c, c, 1),
                    bn: BNParams::identity(c),
                },
                identity_bn: config.identity_branch.then(|| BNParams::identity(c)),
            })
            .collect();
        Ok(TrainModel {
            config,
            stem: ConvParams::zeros(c, 3, 3),
            blocks,
            head: ConvParams::zeros(config.head_channels(), c, 3),
            bn_recalibrated: false,
        })
    }

    /// Visits every learnable parameter in a fixed order.
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("stem.weight".into(), &mut self.stem.weight);
        f("stem.bias".into(), &mut self.stem.bias);
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            for (i, br) in block.conv3_branches.iter_mut().enumerate() {
                f(format!("block{bi}.conv3_{i}.weight"), &mut br.conv.weight);
                f(format!("block{bi}.conv3_{i}.bias"), &mut br.conv.bias);
                f(format!("block{bi}.conv3_{i}.bn.gamma"), &mut br.bn.gamma);
                f(format!("block{bi}.conv3_{i}.bn.beta"), &mut br.bn.beta);
            }
            let br = &mut block.conv1_branch;
            f(format!("block{bi}.conv1.weight"), &mut br.conv.weight);
            f(format!("block{bi}.conv1.bias"), &mut br.conv.bias);
            f(format!("block{bi}.conv1.bn.gamma"), &mut br.bn.gamma);
            f(format!("block{bi}.conv1.bn.beta"), &mut br.bn.beta);
            if let Some(bn) = block.identity_bn.as_mut() {
                f(format!("block{bi}.id.bn.gamma"), &mut bn.gamma);
                f(format!("block{bi}.id.bn.beta"), &mut bn.beta);
            }
        }
        f("head.weight".into(), &mut self.head.weight);
        f("head.bias".into(), &mut self.head.bias);
    }

    /// Visits BN running statistics (non-learnable state) in a fixed order.
    pub fn for_each_buffer_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            for (i, br) in block.conv3_branches.iter_mut().enumerate() {
                f(format!("block{bi}.conv3_{i}.bn.mean"), &mut br.bn.running_mean);
                f(format!("block{bi}.conv3_{i}.bn.var"), &mut br.bn.running_var);
            }
            let br = &mut block.conv1_branch;
            f(format!("block{bi}.conv1.bn.mean"), &mut br.bn.running_mean);
            f(format!("block{bi}.conv1.bn.var"), &mut br.bn.running_var);
            if let Some(bn) = block.identity_bn.as_mut() {
                f(format!("block{bi}.id.bn.mean"), &mut bn.running_mean);
                f(format!("block{bi}.id.bn.var"), &mut bn.running_var);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.for_each_param_mut(&mut |_, t| t.zero_grad());
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, _, _] = x.shape();
        if c != 3 {
            return Err(Error::invalid_argument(format!(
                "student network expects 3-channel input, got shape {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Training-mode forward; returns the prediction and the caches the
    /// backward pass needs. Output is not clamped: losses see raw values.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, TrainCache)> {
        self.check_input(x)?;
        let f0 = conv2d(x, &self.stem)?;
        let mut f = f0.clone();
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let input = f;
            let mut sum: Option<Tensor> = None;
            let mut conv3_out = Vec::new();
            let mut conv3_bn = Vec::new();
            for br in &mut block.conv3_branches {
                let c = conv2d(&input, &br.conv)?;
                let (y, cache) = batch_norm(&c, &mut br.bn, BnMode::Train)?;
                conv3_out.push(c);
                conv3_bn.push(cache.expect("train mode caches"));
                sum = Some(match sum {
                    None => y,
                    Some(s) => add(&s, &y)?,
                });
            }
            let c1 = conv2d(&input, &block.conv1_branch.conv)?;
            let (y1, cache1) = batch_norm(&c1, &mut block.conv1_branch.bn, BnMode::Train)?;
            let mut s = add(&sum.expect("at least one 3x3 branch"), &y1)?;
            let identity_bn = match block.identity_bn.as_mut() {
                Some(bn) => {
                    let (yi, ci) = batch_norm(&input, bn, BnMode::Train)?;
                    s = add(&s, &yi)?;
                    Some(ci.expect("train mode caches"))
                }
                None => None,
            };
            f = relu(&s);
            block_caches.push(BlockCache {
                input,
                conv3_out,
                conv3_bn,
                conv1_out: c1,
                conv1_bn: cache1.expect("train mode caches"),
                identity_bn,
                pre_act: s,
            });
        }
        let head_in = add(&f, &f0)?;
        let z = conv2d(&head_in, &self.head)?;
        let y = pixel_shuffle(&z, SCALE)?;
        Ok((
            y,
            TrainCache {
                input: x.clone(),

                blocks: block_caches,
                head_in,
            },
        ))
    }

    /// Eval-mode forward (BN uses running statistics, nothing mutates).
    /// Output is not clamped.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let f0 = conv2d(x, &self.stem)?;
        let mut f = f0.clone();
        for block in &self.blocks {
            let mut s: Option<Tensor> = None;
            for br in &block.conv3_branches {
                let c = conv2d(&f, &br.conv)?;
                let mut bn = br.bn.clone();
                let (y, _) = batch_norm(&c, &mut bn, BnMode::Eval)?;
                s = Some(match s {
                    None => y,
                    Some(acc) => add(&acc, &y)?,
                });
            }
            let c1 = conv2d(&f, &block.conv1_branch.conv)?;
            let mut bn1 = block.conv1_branch.bn.clone();
            let (y1, _) = batch_norm(&c1, &mut bn1, BnMode::Eval)?;
            let mut acc = add(&s.expect("at least one 3x3 branch"), &y1)?;
            if let Some(bn) = &block.identity_bn {
                let mut bni = bn.clone();
                let (yi, _) = batch_norm(&f, &mut bni, BnMode::Eval)?;
                acc = add(&acc, &yi)?;
            }
            f = relu(&acc);
        }
        let head_in = add(&f, &f0)?;
        let z = conv2d(&head_in, &self.head)?;
        pixel_shuffle(&z, SCALE)
    }

    /// One forward pass in BN-recalibration mode: batch statistics drive
    /// the output and refresh the running estimates; no caches, no grads.
    fn forward_recalibrate(&mut self, x: &Tensor) -> Result<()> {
        self.check_input(x)?;
        let f0 = conv2d(x, &self.stem)?;
        let mut f = f0.clone();
        for block in &mut self.blocks {
            let mut s: Option<Tensor> = None;
            for br in &mut block.conv3_branches {
                let c = conv2d(&f, &br.conv)?;
                let (y, _) = batch_norm(&c, &mut br.bn, BnMode::Recalibrate)?;
                s = Some(match s {
                    None => y,
                    Some(acc) => add(&acc, &y)?,
                });
            }
            let c1 = conv2d(&f, &block.conv1_branch.conv)?;
            let (y1, _) = batch_norm(&c1, &mut block.conv1_branch.bn, BnMode::Recalibrate)?;
            let mut acc = add(&s.expect("at least one 3x3 branch"), &y1)?;
            if let Some(bn) = block.identity_bn.as_mut() {
                let (yi, _) = batch_norm(&f, bn, BnMode::Recalibrate)?;
                acc = add(&acc, &yi)?;
            }
            f = relu(&acc);
        }
        // stem output and head have no BN; nothing further to refresh
        Ok(())
    }

    /// Backpropagates `grad_y` through the cached forward, accumulating
    /// into every parameter's gradient buffer. Returns the input gradient.
    pub fn backward(&mut self, cache: &TrainCache, grad_y: &Tensor) -> Result<Tensor> {
        let grad_z = pixel_unshuffle(grad_y, SCALE)?;
        let g_head = conv2d_grad(&cache.head_in, &self.head, &grad_z)?;
        self.head.weight.accumulate_grad(g_head.weight.data());
        self.head.bias.accumulate_grad(g_head.bias.data());

        // head input = f_N + f0: the same gradient flows to both addends
        let mut grad_f = g_head.x.clone();
        let mut grad_f0 = g_head.x;

        for (block, bc) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            let grad_s = relu_grad(&bc.pre_act, &grad_f)?;
            let mut grad_in = Tensor::zeros(bc.input.shape());
            for (i, br) in block.conv3_branches.iter_mut().enumerate() {
                let bg = batch_norm_grad(
                    &bc.conv3_out[i],
                    &br.bn,
                    &grad_s,
                    BnMode::Train,
                    Some(&bc.conv3_bn[i]),
                )?;
                br.bn.gamma.accumulate_grad(bg.gamma.data());
                br.bn.beta.accumulate_grad(bg.beta.data());
                let cg = conv2d_grad(&bc.input, &br.conv, &bg.x)?;
                br.conv.weight.accumulate_grad(cg.weight.data());
                br.conv.bias.accumulate_grad(cg.bias.data());
                grad_in = add(&grad_in, &cg.x)?;
            }
            {
                let br = &mut block.conv1_branch;
                let bg = batch_norm_grad(
                    &bc.conv1_out,
                    &br.bn,
                    &grad_s,
                    BnMode::Train,
                    Some(&bc.conv1_bn),
                )?;
                br.bn.gamma.accumulate_grad(bg.gamma.data());
                br.bn.beta.accumulate_grad(bg.beta.data());
                let cg = conv2d_grad(&bc.input, &br.conv, &bg.x)?;
                br.conv.weight.accumulate_grad(cg.weight.data());
                br.conv.bias.accumulate_grad(cg.bias.data());
                grad_in = add(&grad_in, &cg.x)?;
            }
            if let (Some(bn), Some(bn_cache)) = (block.identity_bn.as_mut(), bc.identity_bn.as_ref())
            {
                let bg = batch_norm_grad(&bc.input, bn, &grad_s, BnMode::Train, Some(bn_cache))?;
                bn.gamma.accumulate_grad(bg.gamma.data());
                bn.beta.accumulate_grad(bg.beta.data());
                grad_in = add(&grad_in, &bg.x)?;
            }
            grad_f = grad_in;
        }

        grad_f0 = add(&grad_f0, &grad_f)?;
        let g_stem = conv2d_grad(&cache.input, &self.stem, &grad_f0)?;
        self.stem.weight.accumulate_grad(g_stem.weight.data());
        self.stem.bias.accumulate_grad(g_stem.bias.data());
        Ok(g_stem.x)
    }
}

/// Per-block forward cache for [`TrainModel::backward`].
#[derive(Debug, Clone)]
pub struct BlockCache {
    input: Tensor,
    conv3_out: Vec<Tensor>,
    conv3_bn: Vec<BnCache>,
    conv1_out: Tensor,
    conv1_bn: BnCache,
    identity_bn: Option<BnCache>,
    pre_act: Tensor,
}

/// Forward cache for [`TrainModel::backward`].
#[derive(Debug, Clone)]
pub struct TrainCache {
    input: Tensor,
    blocks: Vec<BlockCache>,
    head_in: Tensor,
}

/// Folds a BatchNorm into the preceding convolution:
/// `W~ = (gamma / sqrt(var + eps)) * W` per output channel and
/// `b~ = beta + (gamma / sqrt(var + eps)) * (b - mean)`.
pub fn fuse_conv_bn(weight: &Tensor, bias: &Tensor, bn: &BNParams) -> Result<(Tensor, Tensor)> {
    let [c_out, c_in, kh, kw] = weight.shape();
    if bn.channels() != c_out {
        return Err(Error::invalid_argument(format!(
            "fuse_conv_bn: {} output channels vs {} BN channels",
            c_out,
            bn.channels()
        )));
    }
    if bn.running_var.data().iter().any(|&v| v < 0.0) {
        return Err(Error::invalid_state(
            "fuse_conv_bn: negative running variance",
        ));
    }
    let mut w = Tensor::zeros(weight.shape());
    let mut b = Tensor::zeros([c_out, 1, 1, 1]);
    let row = c_in * kh * kw;
    for o in 0..c_out {
        let t = f64::from(bn.gamma.data()[o])
            / (f64::from(bn.running_var.data()[o]) + f64::from(bn.eps)).sqrt();
        for i in 0..row {
            w.data_mut()[o * row + i] = (t * f64::from(weight.data()[o * row + i])) as f32;
        }
        b.data_mut()[o] = (f64::from(bn.beta.data()[o])
            + t * (f64::from(bias.data()[o]) - f64::from(bn.running_mean.data()[o])))
            as f32;
    }
    Ok((w, b))
}

/// Collapses a multi-branch block into one equivalent 3×3 convolution:
/// each conv-BN branch fuses via [`fuse_conv_bn`], the 1×1 branch zero-pads
/// to 3×3 at the spatial center, the identity branch becomes a BN-fused
/// center-impulse kernel, and everything sums elementwise.
pub fn fuse_block(block: &TrainBlock) -> Result<ConvParams> {
    let c = block.conv1_branch.conv.out_channels();
    for br in &block.conv3_branches {
        if br.conv.out_channels() != c || br.conv.in_channels() != c {
            return Err(Error::invalid_argument(format!(
                "fuse_block: branch channel mismatch, expected {c}x{c}, got {:?}",
                br.conv.weight.shape()
            )));
        }
    }
    let mut acc_w = vec![0f64; c * c * 9];
    let mut acc_b = vec![0f64; c];
    let mut fold = |w: &Tensor, b: &Tensor| {
        for (a, v) in acc_w.iter_mut().zip(w.data()) {
            *a += f64::from(*v);
        }
        for (a, v) in acc_b.iter_mut().zip(b.data()) {
            *a += f64::from(*v);
        }
    };

    for br in &block.conv3_branches {
        let (w, b) = fuse_conv_bn(&br.conv.weight, &br.conv.bias, &br.bn)?;
        fold(&w, &b);
    }
    {
        // 1x1 branch: fuse, then place the value at the 3x3 center
        let br = &block.conv1_branch;
        let (w1, b1) = fuse_conv_bn(&br.conv.weight, &br.conv.bias, &br.bn)?;
        let mut w = Tensor::zeros([c, c, 3, 3]);
        for o in 0..c {
            for i in 0..c {
                *w.at_mut(o, i, 1, 1) = w1.at(o, i, 0, 0);
            }
        }
        fold(&w, &b1);
    }
    if let Some(bn) = &block.identity_bn {
        // identity branch as a center-impulse kernel, then BN-fused
        let mut w = Tensor::zeros([c, c, 3, 3]);
        for o in 0..c {
            *w.at_mut(o, o, 1, 1) = 1.0;
        }
        let zero_bias = Tensor::zeros([c, 1, 1, 1]);
        let (wf, bf) = fuse_conv_bn(&w, &zero_bias, bn)?;
        fold(&wf, &bf);
    }

    let mut out = ConvParams::zeros(c, c, 3);
    for (o, a) in out.weight.data_mut().iter_mut().zip(acc_w.iter()) {
        *o = *a as f32;
    }
    for (o, a) in out.bias.data_mut().iter_mut().zip(acc_b.iter()) {
        *o = *a as f32;
    }
    Ok(out)
}

/// Fuses every block of a training model into the deploy form. Stem and
/// head copy over unchanged. The report flags whether BN statistics were
/// recalibrated beforehand; fusing without recalibration is allowed but
/// the staleness is surfaced to the caller.
pub fn fuse_model(m: &TrainModel) -> Result<(DeployModel, FusionReport)> {
    let blocks = m.blocks.iter().map(fuse_block).collect::<Result<Vec<_>>>()?;
    Ok((
        DeployModel {
            config: m.config,
            stem: m.stem.clone(),
            blocks,
            head: m.head.clone(),
        },
        FusionReport {
            bn_recalibrated: m.bn_recalibrated,
        },
    ))
}

/// Replaces all BN running statistics with statistics accumulated over up
/// to `n` forward-only batches, weighting each batch equally. Weights are
/// untouched.
pub fn recalibrate_bn(
    m: &mut TrainModel,
    batches: impl IntoIterator<Item = Tensor>,
    n: usize,
) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid_argument("recalibrate_bn: n must be >= 1"));
    }
    let mut seen = 0usize;
    for batch in batches.into_iter().take(n) {
        seen += 1;
        // momentum 1/k turns the EMA update into a running equal-weight
        // average; the k=1 step wipes the stale statistics entirely.
        let mom = 1.0 / seen as f32;
        let set_mom = |bn: &mut BNParams| bn.momentum = mom;
        for block in &mut m.blocks {
            for br in &mut block.conv3_branches {
                set_mom(&mut br.bn);
            }
            set_mom(&mut block.conv1_branch.bn);
            if let Some(bn) = block.identity_bn.as_mut() {
                set_mom(bn);
            }
        }
        m.forward_recalibrate(&batch)?;
    }
    if seen == 0 {
        return Err(Error::invalid_argument(
            "recalibrate_bn: dataset iterator yielded no batches",
        ));
    }
    // restore the default momentum for any later training
    for block in &mut m.blocks {
        for br in &mut block.conv3_branches {
            br.bn.momentum = crate::tensor::BN_DEFAULT_MOMENTUM;
        }
        block.conv1_branch.bn.momentum = crate::tensor::BN_DEFAULT_MOMENTUM;
        if let Some(bn) = block.identity_bn.as_mut() {
            bn.momentum = crate::tensor::BN_DEFAULT_MOMENTUM;
        }
    }
    m.bn_recalibrated = true;
    Ok(())
}

impl DeployModel {
    /// All-zero fused model, the checkpoint-loading fixture.
    pub fn zeros(config: StudentConfig) -> Result<DeployModel> {
        config.validate()?;
        let c = config.channels;
        Ok(DeployModel {
            config,
            stem: ConvParams::zeros(c, 3, 3),
            blocks: (0..config.num_blocks).map(|_| ConvParams::zeros(c, c, 3)).collect(),
            head: ConvParams::zeros(config.head_channels(), c, 3),
        })
    }

    /// Raw deploy forward: stem → fused conv/ReLU blocks → global skip →
    /// head → PixelShuffle. No clamping; bit-comparable with the eval-mode
    /// training forward.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let f0 = conv2d(x, &self.stem)?;
        let mut f = f0.clone();
        for conv in &self.blocks {
            f = relu(&conv2d(&f, conv)?);
        }
        let head_in = add(&f, &f0)?;
        let z = conv2d(&head_in, &self.head)?;
        pixel_shuffle(&z, SCALE)
    }

    /// Inference entry point: forward then clamp to the image domain.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.map(|v| v.clamp(0.0, 1.0)))
    }

    /// Number of convolutions in the deploy graph (blocks + stem + head).
    pub fn num_convs(&self) -> usize {
        self.blocks.len() + 2
    }

    pub fn num_params(&self) -> usize {
        let count = |p: &ConvParams| p.weight.numel() + p.bias.numel();
        count(&self.stem) + self.blocks.iter().map(count).sum::<usize>() + count(&self.head)
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("stem.weight".into(), &mut self.stem.weight);
        f("stem.bias".into(), &mut self.stem.bias);
        for (bi, conv) in self.blocks.iter_mut().enumerate() {
            f(format!("block{bi}.weight"), &mut conv.weight);
            f(format!("block{bi}.bias"), &mut conv.bias);
        }
        f("head.weight".into(), &mut self.head.weight);
        f("head.bias".into(), &mut self.head.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config() -> StudentConfig {
        StudentConfig {
            num_blocks: 2,
            channels: 4,
            num_conv3_branches: 4,
            identity_branch: true,
        }
    }

    fn random_input(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = derive_rng(seed, "test-input", 0);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    /// Randomizes BN statistics so eval mode and fusion see non-identity
    /// normalization.
    fn randomize_bn(m: &mut TrainModel, seed: u64) {
        let mut rng = derive_rng(seed, "test-bn", 0);
        let mut scramble = |bn: &mut BNParams| {
            for v in bn.gamma.data_mut() {
                *v = 0.5 + rng.gen::<f32>();
            }
            for v in bn.beta.data_mut() {
                *v = rng.gen::<f32>() - 0.5;
            }
            for v in bn.running_mean.data_mut() {
                *v = rng.gen::<f32>() - 0.5;
            }
            for v in bn.running_var.data_mut() {
                *v = 0.25 + rng.gen::<f32>();
            }
        };
        for block in &mut m.blocks {
            for br in &mut block.conv3_branches {
                scramble(&mut br.bn);
            }
            scramble(&mut block.conv1_branch.bn);
            if let Some(bn) = block.identity_bn.as_mut() {
                scramble(bn);
            }
        }
    }

    #[test]
    fn zero_model_outputs_zeros() {
        let mut m = TrainModel::zeros(small_config()).unwrap();
        // zero the identity BN gammas too, otherwise the identity branch
        // leaks the input through
        for block in &mut m.blocks {
            if let Some(bn) = block.identity_bn.as_mut() {
                bn.gamma.data_mut().fill(0.0);
            }
        }
        let x = Tensor::zeros([1, 3, 5, 5]);
        let y = m.forward_eval(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_shape_contract() {
        let mut m = TrainModel::init(small_config(), 11).unwrap();
        let x = random_input([1, 3, 16, 16], 1);
        let (y, _) = m.forward_train(&x).unwrap();
        assert_eq!(y.shape(), [1, 3, 48, 48]);
    }

    #[test]
    fn single_block_forward_matches_hand_composition() {
        let cfg = StudentConfig {
            num_blocks: 1,
            channels: 4,
            num_conv3_branches: 2,
            identity_branch: true,
        };
        let m = TrainModel::init(cfg, 5).unwrap();
        let x = random_input([1, 3, 6, 6], 2);

        let y = m.forward_eval(&x).unwrap();

        // hand-composed operator chain
        let f0 = conv2d(&x, &m.stem).unwrap();
        let block = &m.blocks[0];
        let mut s = Tensor::zeros(f0.shape());
        for br in &block.conv3_branches {
            let c = conv2d(&f0, &br.conv).unwrap();
            let mut bn = br.bn.clone();
            let (o, _) = batch_norm(&c, &mut bn, BnMode::Eval).unwrap();
            s = add(&s, &o).unwrap();
        }
        let c1 = conv2d(&f0, &block.conv1_branch.conv).unwrap();
        let mut bn1 = block.conv1_branch.bn.clone();
        let (o1, _) = batch_norm(&c1, &mut bn1, BnMode::Eval).unwrap();
        s = add(&s, &o1).unwrap();
        let mut bni = block.identity_bn.clone().unwrap();
        let (oi, _) = batch_norm(&f0, &mut bni, BnMode::Eval).unwrap();
        s = add(&s, &oi).unwrap();
        let f = relu(&s);
        let z = conv2d(&add(&f, &f0).unwrap(), &m.head).unwrap();
        let expect = pixel_shuffle(&z, SCALE).unwrap();

        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn fuse_conv_bn_identity_stats_is_noop() {
        let mut p = ConvParams::zeros(2, 2, 3);
        for (i, v) in p.weight.data_mut().iter_mut().enumerate() {
            *v = i as f32 * 0.01;
        }
        p.bias.data_mut()[0] = 0.3;
        let mut bn = BNParams::identity(2);
        bn.running_var.data_mut().fill(1.0 - bn.eps); // var + eps == 1
        let (w, b) = fuse_conv_bn(&p.weight, &p.bias, &bn).unwrap();
        assert_eq!(w.data(), p.weight.data());
        assert_eq!(b.data(), p.bias.data());
    }

    #[test]
    fn fuse_conv_bn_scalar_case() {
        // W=1, b=0, gamma=2, beta=1, mu=0.5, var+eps=0.25 -> W~=4, b~=-1
        let w = Tensor::from_vec([1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros([1, 1, 1, 1]);
        let mut bn = BNParams::identity(1);
        bn.gamma.data_mut()[0] = 2.0;
        bn.beta.data_mut()[0] = 1.0;
        bn.running_mean.data_mut()[0] = 0.5;
        bn.running_var.data_mut()[0] = 0.25 - bn.eps;
        let (wf, bf) = fuse_conv_bn(&w, &b, &bn).unwrap();
        assert!((wf.data()[0] - 4.0).abs() < 1e-5);
        assert!((bf.data()[0] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn fused_branch_matches_eval_forward() {
        let mut rng = derive_rng(3, "fuse-branch", 0);
        let mut conv = ConvParams::zeros(3, 3, 3);
        for v in conv.weight.data_mut() {
            *v = rng.gen::<f32>() - 0.5;
        }
        for v in conv.bias.data_mut() {
            *v = rng.gen::<f32>() - 0.5;
        }
        let mut bn = BNParams::identity(3);
        for v in bn.running_mean.data_mut() {
            *v = rng.gen::<f32>() - 0.5;
        }
        for v in bn.running_var.data_mut() {
            *v = 0.5 + rng.gen::<f32>();
        }
        for v in bn.gamma.data_mut() {
            *v = 0.5 + rng.gen::<f32>();
        }
        for v in bn.beta.data_mut() {
            *v = rng.gen::<f32>() - 0.5;
        }

        let x = random_input([1, 3, 5, 5], 9);
        let reference = {
            let c = conv2d(&x, &conv).unwrap();
            let mut bn2 = bn.clone();
            batch_norm(&c, &mut bn2, BnMode::Eval).unwrap().0
        };
        let (wf, bf) = fuse_conv_bn(&conv.weight, &conv.bias, &bn).unwrap();
        let fused = conv2d(
            &x,
            &ConvParams {
                weight: wf,
                bias: bf,
            },
        )
        .unwrap();
        for (a, b) in reference.data().iter().zip(fused.data()) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn fuse_block_identity_only_is_center_impulse() {
        let c = 3;
        let block = TrainBlock {
            conv3_branches: vec![BranchConv {
                conv: ConvParams::zeros(c, c, 3),
                bn: {
                    let mut bn = BNParams::identity(c);
                    bn.gamma.data_mut().fill(0.0);
                    bn
                },
            }],
            conv1_branch: BranchConv {
                conv: ConvParams::zeros(c, c, 1),
                bn: {
                    let mut bn = BNParams::identity(c);
                    bn.gamma.data_mut().fill(0.0);
                    bn
                },
            },
            identity_bn: Some({
                let mut bn = BNParams::identity(c);
                bn.running_var.data_mut().fill(1.0 - bn.eps);
                bn
            }),
        };
        let fused = fuse_block(&block).unwrap();
        for o in 0..c {
            for i in 0..c {
                for kh in 0..3 {
                    for kw in 0..3 {
                        let expect = if o == i && kh == 1 && kw == 1 { 1.0 } else { 0.0 };
                        assert_eq!(fused.weight.at(o, i, kh, kw), expect);
                    }
                }
            }
        }
        assert!(fused.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_block_pads_conv1_to_center() {
        let c = 2;
        let mut conv1 = ConvParams::zeros(c, c, 1);
        conv1.weight.data_mut().copy_from_slice(&[0.5, -0.25, 0.125, 1.0]);
        let zero_bn = || {
            let mut bn = BNParams::identity(c);
            bn.gamma.data_mut().fill(0.0);
            bn
        };
        let mut id_bn = BNParams::identity(c);
        id_bn.gamma.data_mut().fill(0.0);
        let mut conv1_bn = BNParams::identity(c);
        conv1_bn.running_var.data_mut().fill(1.0 - conv1_bn.eps);
        let block = TrainBlock {
            conv3_branches: vec![BranchConv {
                conv: ConvParams::zeros(c, c, 3),
                bn: zero_bn(),
            }],
            conv1_branch: BranchConv {
                conv: conv1.clone(),
                bn: conv1_bn,
            },
            identity_bn: Some(id_bn),
        };
        let fused = fuse_block(&block).unwrap();
        for o in 0..c {
            for i in 0..c {
                assert_eq!(fused.weight.at(o, i, 1, 1), conv1.weight.at(o, i, 0, 0));
                assert_eq!(fused.weight.at(o, i, 0, 0), 0.0);
                assert_eq!(fused.weight.at(o, i, 2, 2), 0.0);
            }
        }
    }

    #[test]
    fn fuse_block_matches_branch_sum_on_random_input() {
        for branches in [4usize, 5] {
            let cfg = StudentConfig {
                num_blocks: 1,
                channels: 4,
                num_conv3_branches: branches,
                identity_branch: true,
            };
            let mut m = TrainModel::init(cfg, 21 + branches as u64).unwrap();
            randomize_bn(&mut m, 31 + branches as u64);
            let block = &m.blocks[0];
            let x = random_input([2, 4, 7, 7], 40 + branches as u64);

            // multi-branch eval forward of just the block
            let mut s = Tensor::zeros(x.shape());
            for br in &block.conv3_branches {
                let c = conv2d(&x, &br.conv).unwrap();
                let mut bn = br.bn.clone();
                s = add(&s, &batch_norm(&c, &mut bn, BnMode::Eval).unwrap().0).unwrap();
            }
            let c1 = conv2d(&x, &block.conv1_branch.conv).unwrap();
            let mut bn1 = block.conv1_branch.bn.clone();
            s = add(&s, &batch_norm(&c1, &mut bn1, BnMode::Eval).unwrap().0).unwrap();
            let mut bni = block.identity_bn.clone().unwrap();
            s = add(&s, &batch_norm(&x, &mut bni, BnMode::Eval).unwrap().0).unwrap();
            let expect = relu(&s);

            let fused = fuse_block(block).unwrap();
            let got = relu(&conv2d(&x, &fused).unwrap());
            for (a, b) in expect.data().iter().zip(got.data()) {
                assert!((a - b).abs() <= 1e-4, "branches={branches}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn fuse_model_equivalence_and_structure() {
        let mut m = TrainModel::init(small_config(), 77).unwrap();
        randomize_bn(&mut m, 78);
        let (deploy, report) = fuse_model(&m).unwrap();
        assert!(!report.bn_recalibrated);
        assert_eq!(deploy.num_convs(), m.config.num_blocks + 2);

        let x = random_input([1, 3, 9, 9], 79);
        let a = m.forward_eval(&x).unwrap();
        let b = deploy.forward(&x).unwrap();
        let max = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0f32, f32::max);
        assert!(max <= 1e-4, "max deviation {max}");
    }

    #[test]
    fn default_deploy_parameter_count() {
        let m = TrainModel::zeros(StudentConfig::default()).unwrap();
        let (deploy, _) = fuse_model(&m).unwrap();
        let n = deploy.num_params();
        // stem 3*32*9+32, 8 blocks of 32*32*9+32, head 32*27*9+27
        assert_eq!(n, 896 + 8 * 9248 + 7803);
        let rel = (n as f64 - 82_000.0).abs() / 82_000.0;
        assert!(rel <= 0.05, "parameter count {n} deviates {rel}");
    }

    #[test]
    fn recalibrate_converges_and_keeps_weights() {
        let mut m = TrainModel::init(small_config(), 101).unwrap();
        let weights_before: Vec<f32> = {
            let mut v = Vec::new();
            m.clone().for_each_param_mut(&mut |_, t| v.extend_from_slice(t.data()));
            v
        };
        let x = random_input([4, 3, 8, 8], 102);
        recalibrate_bn(&mut m, std::iter::repeat(x.clone()).take(16), 16).unwrap();
        assert!(m.bn_recalibrated);

        let weights_after: Vec<f32> = {
            let mut v = Vec::new();
            m.clone().for_each_param_mut(&mut |_, t| v.extend_from_slice(t.data()));
            v
        };
        assert_eq!(weights_before, weights_after);

        // constant dataset: the first 3x3 branch of block 0 sees conv(stem(x));
        // its running mean must equal that activation's batch mean
        let f0 = conv2d(&x, &m.stem).unwrap();
        let c = conv2d(&f0, &m.blocks[0].conv3_branches[0].conv).unwrap();
        let [n, ch, h, w] = c.shape();
        let plane = h * w;
        for ci in 0..ch {
            let mut s = 0f64;
            for ni in 0..n {
                for v in &c.data()[(ni * ch + ci) * plane..][..plane] {
                    s += f64::from(*v);
                }
            }
            let mean = s / (n * plane) as f64;
            let rm = f64::from(m.blocks[0].conv3_branches[0].bn.running_mean.data()[ci]);
            assert!((mean - rm).abs() <= 1e-3, "channel {ci}: {mean} vs {rm}");
        }
    }

    #[test]
    fn recalibrate_rejects_empty_iterator() {
        let mut m = TrainModel::init(small_config(), 1).unwrap();
        let err = recalibrate_bn(&mut m, std::iter::empty(), 4);
        assert!(err.is_err());
    }

    #[test]
    fn recalibration_changes_fusion_when_stats_are_stale() {
        let mut m = TrainModel::init(small_config(), 55).unwrap();
        // plant wildly wrong running stats
        for block in &mut m.blocks {
            for br in &mut block.conv3_branches {
                br.bn.running_mean.data_mut().fill(5.0);
                br.bn.running_var.data_mut().fill(9.0);
            }
        }
        let (stale, report) = fuse_model(&m).unwrap();
        assert!(!report.bn_recalibrated);

        let x = random_input([4, 3, 8, 8], 56);
        recalibrate_bn(&mut m, std::iter::repeat(x.clone()).take(8), 8).unwrap();
        let (fresh, report) = fuse_model(&m).unwrap();
        assert!(report.bn_recalibrated);

        let a = stale.forward(&x).unwrap();
        let b = fresh.forward(&x).unwrap();
        let diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0f32, f32::max);
        assert!(diff > 1e-3, "stale and fresh fusion should differ, max {diff}");
    }

    #[test]
    fn deploy_infer_clamps() {
        let mut m = TrainModel::zeros(small_config()).unwrap();
        // bias the head so raw outputs go negative
        m.head.bias.data_mut().fill(-0.5);
        let (deploy, _) = fuse_model(&m).unwrap();
        let x = Tensor::zeros([1, 3, 6, 6]);
        let raw = deploy.forward(&x).unwrap();
        assert!(raw.data().iter().any(|&v| v < 0.0));
        let clamped = deploy.infer(&x).unwrap();
        assert!(clamped.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
