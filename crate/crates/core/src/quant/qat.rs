//! Quantization-aware training on the fused deploy graph.
//!
//! Fake-quant nodes sit at the graph input, on every weight tensor, after
//! every convolution output (post-ReLU inside blocks), and after the
//! global-skip addition. The three-phase curriculum drives them: phase 1
//! observes ranges and recalibrates scale/zero-point every step, phase 2
//! freezes the quantization grid, phase 3 freezes the nodes entirely and
//! gates export.

use super::{
    compute_qparams, compute_qparams_per_channel, fake_quant, fake_quant_grad, Observer,
    ObserverMode, ObserverState, QuantParams, ACT_QMAX, ACT_QMIN, WEIGHT_QMAX, WEIGHT_QMIN,
};
use crate::error::{Error, Result};
use crate::model::{DeployModel, SCALE};
use crate::tensor::{add, conv2d, conv2d_grad, pixel_shuffle, pixel_unshuffle, relu, relu_grad, Tensor};

/// Decay of the running-extrema average on activation observers.
pub const ACT_EMA_DECAY: f32 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    One,
    Two,
    Three,
}

impl Phase {
    pub fn number(self) -> u32 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
            Phase::Three => 3,
        }
    }
}

/// Step boundaries `(t1, t2)` of the curriculum: observers disable at
/// `t1`, fake-quant state freezes at `t2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseSchedule {
    pub t1: u64,
    pub t2: u64,
}

impl PhaseSchedule {
    pub fn new(t1: u64, t2: u64) -> Result<Self> {
        if t1 > t2 {
            return Err(Error::invalid_argument(format!(
                "phase boundaries out of order: t1 {t1} > t2 {t2}"
            )));
        }
        Ok(PhaseSchedule { t1, t2 })
    }

    /// Boundaries at the canonical fractions 0.2 and 0.6 of the stage length.
    pub fn from_fractions(stage_len: u64) -> Self {
        PhaseSchedule {
            t1: stage_len / 5,
            t2: stage_len * 3 / 5,
        }
    }

    pub fn phase_at(&self, step: u64) -> Phase {
        if step < self.t1 {
            Phase::One
        } else if step < self.t2 {
            Phase::Two
        } else {
            Phase::Three
        }
    }
}

/// Per-tensor activation fake-quant node.
#[derive(Debug, Clone, PartialEq)]
pub struct ActNode {
    pub observer: Observer,
    pub qp: Option<QuantParams>,
}

impl ActNode {
    fn new() -> Self {
        ActNode {
            observer: Observer::new(ObserverMode::Ema { decay: ACT_EMA_DECAY }),
            qp: None,
        }
    }

    fn observe_and_calibrate(&mut self, data: &[f32]) -> Result<()> {
        self.observer.observe(data);
        if self.observer.state == ObserverState::Active && self.observer.initialized {
            self.qp = Some(compute_qparams(
                self.observer.min,
                self.observer.max,
                ACT_QMIN,
                ACT_QMAX,
                false,
            )?);
        }
        Ok(())
    }

    fn qp(&self) -> Result<&QuantParams> {
        self.qp.as_ref().ok_or_else(|| {
            Error::invalid_state("activation quant node has no calibrated parameters")
        })
    }
}

/// Per-output-channel symmetric weight fake-quant node.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightNode {
    pub observers: Vec<Observer>,
    pub qp: Option<QuantParams>,
}

impl WeightNode {
    fn new(channels: usize) -> Self {
        WeightNode {
            observers: (0..channels).map(|_| Observer::new(ObserverMode::MinMax)).collect(),
            qp: None,
        }
    }

    fn observe_and_calibrate(&mut self, weight: &Tensor) -> Result<()> {
        let c = weight.shape()[0];
        let row = weight.numel() / c;
        let mut active = false;
        for (ci, o) in self.observers.iter_mut().enumerate() {
            o.observe(&weight.data()[ci * row..(ci + 1) * row]);
            active |= o.state == ObserverState::Active && o.initialized;
        }
        if active {
            let mins: Vec<f32> = self.observers.iter().map(|o| o.min).collect();
            let maxs: Vec<f32> = self.observers.iter().map(|o| o.max).collect();
            self.qp = Some(compute_qparams_per_channel(
                &mins,
                &maxs,
                WEIGHT_QMIN,
                WEIGHT_QMAX,
            )?);
        }
        Ok(())
    }

    fn qp(&self) -> Result<&QuantParams> {
        self.qp
            .as_ref()
            .ok_or_else(|| Error::invalid_state("weight quant node has no calibrated parameters"))
    }
}

/// The fused deploy model with fake-quant nodes attached.
#[derive(Debug, Clone, PartialEq)]
pub struct QatModel {
    pub model: DeployModel,
    pub input_node: ActNode,
    pub stem_w: WeightNode,
    pub stem_out: ActNode,
    pub block_w: Vec<WeightNode>,
    pub block_out: Vec<ActNode>,
    pub skip_out: ActNode,
    pub head_w: WeightNode,
    pub head_out: ActNode,
    pub phase: Phase,
}

/// Attaches fake-quant nodes to a fused model. Observers start active but
/// uncalibrated; run a calibration forward before quantized inference.
pub fn insert_qat(model: DeployModel) -> QatModel {
    let block_w = model
        .blocks
        .iter()
        .map(|c| WeightNode::new(c.out_channels()))
        .collect();
    let block_out = model.blocks.iter().map(|_| ActNode::new()).collect();
    QatModel {
        input_node: ActNode::new(),
        stem_w: WeightNode::new(model.stem.out_channels()),
        stem_out: ActNode::new(),
        block_w,
        block_out,
        skip_out: ActNode::new(),
        head_w: WeightNode::new(model.head.out_channels()),
        head_out: ActNode::new(),
        phase: Phase::One,
        model,
    }
}

/// Applies the curriculum phase for `step`: phase 2 disables every
/// observer (freezing the quantization grid), phase 3 marks all nodes
/// frozen. Weights stay trainable throughout.
pub fn set_phase(q: &mut QatModel, step: u64, schedule: PhaseSchedule) {
    let phase = schedule.phase_at(step);
    q.phase = phase;
    let state = match phase {
        Phase::One => ObserverState::Active,
        Phase::Two => ObserverState::Disabled,
        Phase::Three => ObserverState::Frozen,
    };
    q.for_each_observer(&mut |o| o.state = state);
}

/// Per-conv forward cache for the straight-through backward pass.
#[derive(Debug)]
struct ConvCache {
    input: Tensor,
    w_fq: Tensor,
    conv_out: Tensor,
    act_in: Tensor,
}

#[derive(Debug)]
pub struct QatCache {
    input_raw: Tensor,
    stem: ConvCache,
    blocks: Vec<ConvCache>,
    skip_sum: Tensor,
    head: ConvCache,
}

impl QatModel {
    /// Total fake-quant node count: input + one per conv output + one per
    /// weight tensor + the skip addition.
    pub fn num_nodes(&self) -> usize {
        let convs = self.model.num_convs();
        2 * convs + 2
    }

    pub fn for_each_observer(&mut self, f: &mut dyn FnMut(&mut Observer)) {
        f(&mut self.input_node.observer);
        for o in &mut self.stem_w.observers {
            f(o);
        }
        f(&mut self.stem_out.observer);
        for (w, a) in self.block_w.iter_mut().zip(self.block_out.iter_mut()) {
            for o in &mut w.observers {
                f(o);
            }
            f(&mut a.observer);
        }
        f(&mut self.skip_out.observer);
        for o in &mut self.head_w.observers {
            f(o);
        }
        f(&mut self.head_out.observer);
    }

    /// Snapshot of every node's quantization parameters, in graph order.
    pub fn qparams_snapshot(&self) -> Vec<Option<QuantParams>> {
        let mut v = vec![self.input_node.qp.clone(), self.stem_w.qp.clone(), self.stem_out.qp.clone()];
        for (w, a) in self.block_w.iter().zip(self.block_out.iter()) {
            v.push(w.qp.clone());
            v.push(a.qp.clone());
        }
        v.push(self.skip_out.qp.clone());
        v.push(self.head_w.qp.clone());
        v.push(self.head_out.qp.clone());
        v
    }

    /// Snapshot of observer state (mins, maxs, states) for freeze checks.
    pub fn observer_snapshot(&self) -> Vec<(f32, f32, ObserverState)> {
        let mut v = Vec::new();
        let mut push = |o: &Observer| v.push((o.min, o.max, o.state));
        push(&self.input_node.observer);
        self.stem_w.observers.iter().for_each(&mut push);
        push(&self.stem_out.observer);
        for (w, a) in self.block_w.iter().zip(self.block_out.iter()) {
            w.observers.iter().for_each(&mut push);
            push(&a.observer);
        }
        push(&self.skip_out.observer);
        self.head_w.observers.iter().for_each(&mut push);
        push(&self.head_out.observer);
        v
    }

    /// Calibration pass: observers see the float activations, parameters
    /// are recalibrated, and no quantization is applied, so the output is
    /// bit-equal to the plain deploy forward.
    pub fn forward_observe_only(&mut self, x: &Tensor) -> Result<Tensor> {
        self.input_node.observe_and_calibrate(x.data())?;
        self.stem_w.observe_and_calibrate(&self.model.stem.weight)?;
        let f0 = conv2d(x, &self.model.stem)?;
        self.stem_out.observe_and_calibrate(f0.data())?;
        let mut f = f0.clone();
        for i in 0..self.model.blocks.len() {
            self.block_w[i].observe_and_calibrate(&self.model.blocks[i].weight)?;
            let a = relu(&conv2d(&f, &self.model.blocks[i])?);
            self.block_out[i].observe_and_calibrate(a.data())?;
            f = a;
        }
        let s = add(&f, &f0)?;
        self.skip_out.observe_and_calibrate(s.data())?;
        self.head_w.observe_and_calibrate(&self.model.head.weight)?;
        let z = conv2d(&s, &self.model.head)?;
        self.head_out.observe_and_calibrate(z.data())?;
        pixel_shuffle(&z, SCALE)
    }

    fn observing(&self) -> bool {
        self.phase == Phase::One
    }

    /// Fake-quant forward. In phase 1 the observers run and the
    /// scale/zero-point parameters track them; later phases use the frozen
    /// grid. Returns the raw (unclamped) prediction and the backward cache.
    pub fn forward_fq(&mut self, x: &Tensor) -> Result<(Tensor, QatCache)> {
        let observing = self.observing();

        if observing {
            self.input_node.observe_and_calibrate(x.data())?;
        }
        let x_fq = fake_quant(x, self.input_node.qp()?)?;

        if observing {
            self.stem_w.observe_and_calibrate(&self.model.stem.weight)?;
        }
        let stem_wfq = fake_quant(&self.model.stem.weight, self.stem_w.qp()?)?;
        let stem_conv = conv2d(
            &x_fq,
            &crate::tensor::ConvParams {
                weight: stem_wfq.clone(),
                bias: self.model.stem.bias.clone(),
            },
        )?;
        if observing {
            self.stem_out.observe_and_calibrate(stem_conv.data())?;
        }
        let f0q = fake_quant(&stem_conv, self.stem_out.qp()?)?;

        let mut f = f0q.clone();
        let mut blocks = Vec::with_capacity(self.model.blocks.len());
        for i in 0..self.model.blocks.len() {
            if observing {
                self.block_w[i].observe_and_calibrate(&self.model.blocks[i].weight)?;
            }
            let wfq = fake_quant(&self.model.blocks[i].weight, self.block_w[i].qp()?)?;
            let conv_out = conv2d(
                &f,
                &crate::tensor::ConvParams {
                    weight: wfq.clone(),
                    bias: self.model.blocks[i].bias.clone(),
                },
            )?;
            let act = relu(&conv_out);
            if observing {
                self.block_out[i].observe_and_calibrate(act.data())?;
            }
            let fq = fake_quant(&act, self.block_out[i].qp()?)?;
            blocks.push(ConvCache {
                input: f,
                w_fq: wfq,
                conv_out,
                act_in: act,
            });
            f = fq;
        }

        let s = add(&f, &f0q)?;
        if observing {
            self.skip_out.observe_and_calibrate(s.data())?;
        }
        let sq = fake_quant(&s, self.skip_out.qp()?)?;

        if observing {
            self.head_w.observe_and_calibrate(&self.model.head.weight)?;
        }
        let head_wfq = fake_quant(&self.model.head.weight, self.head_w.qp()?)?;
        let z = conv2d(
            &sq,
            &crate::tensor::ConvParams {
                weight: head_wfq.clone(),
                bias: self.model.head.bias.clone(),
            },
        )?;
        if observing {
            self.head_out.observe_and_calibrate(z.data())?;
        }
        let zq = fake_quant(&z, self.head_out.qp()?)?;
        let y = pixel_shuffle(&zq, SCALE)?;

        Ok((
            y,
            QatCache {
                input_raw: x.clone(),
                stem: ConvCache {
                    input: x_fq,
                    w_fq: stem_wfq,
                    conv_out: stem_conv,
                    act_in: Tensor::zeros([0, 0, 0, 0]),
                },
                blocks,
                skip_sum: s,
                head: ConvCache {
                    input: sq,
                    w_fq: head_wfq,
                    conv_out: z,
                    act_in: Tensor::zeros([0, 0, 0, 0]),
                },
            },
        ))
    }

    /// Fake-quant forward without observer updates or caches, regardless
    /// of phase; the numeric path matches phase-3 training exactly.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let x_fq = fake_quant(x, self.input_node.qp()?)?;
        let stem_wfq = fake_quant(&self.model.stem.weight, self.stem_w.qp()?)?;
        let f0 = conv2d(
            &x_fq,
            &crate::tensor::ConvParams {
                weight: stem_wfq,
                bias: self.model.stem.bias.clone(),
            },
        )?;
        let f0q = fake_quant(&f0, self.stem_out.qp()?)?;
        let mut f = f0q.clone();
        for i in 0..self.model.blocks.len() {
            let wfq = fake_quant(&self.model.blocks[i].weight, self.block_w[i].qp()?)?;
            let a = relu(&conv2d(
                &f,
                &crate::tensor::ConvParams {
                    weight: wfq,
                    bias: self.model.blocks[i].bias.clone(),
                },
            )?);
            f = fake_quant(&a, self.block_out[i].qp()?)?;
        }
        let s = add(&f, &f0q)?;
        let sq = fake_quant(&s, self.skip_out.qp()?)?;
        let head_wfq = fake_quant(&self.model.head.weight, self.head_w.qp()?)?;
        let z = conv2d(
            &sq,
            &crate::tensor::ConvParams {
                weight: head_wfq,
                bias: self.model.head.bias.clone(),
            },
        )?;
        let zq = fake_quant(&z, self.head_out.qp()?)?;
        pixel_shuffle(&zq, SCALE)
    }

    /// Clamped fake-quant inference.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_eval(x)?.map(|v| v.clamp(0.0, 1.0)))
    }

    /// Straight-through backward: gradients pass through every fake-quant
    /// node where the value stayed in range and are zeroed where it
    /// clipped; conv gradients are taken at the quantized weights and
    /// routed through the weight-node mask onto the raw weights.
    pub fn backward(&mut self, cache: &QatCache, grad_y: &Tensor) -> Result<()> {
        let grad_zq = pixel_unshuffle(grad_y, SCALE)?;
        let grad_z = fake_quant_grad(&cache.head.conv_out, self.head_out.qp()?, &grad_zq)?;
        let head_fq = crate::tensor::ConvParams {
            weight: cache.head.w_fq.clone(),
            bias: self.model.head.bias.clone(),
        };
        let g_head = conv2d_grad(&cache.head.input, &head_fq, &grad_z)?;
        let g_w = fake_quant_grad(&self.model.head.weight, self.head_w.qp()?, &g_head.weight)?;
        self.model.head.weight.accumulate_grad(g_w.data());
        self.model.head.bias.accumulate_grad(g_head.bias.data());

        let grad_s = fake_quant_grad(&cache.skip_sum, self.skip_out.qp()?, &g_head.x)?;
        let mut grad_f = grad_s.clone();
        let grad_f0q_skip = grad_s;

        for i in (0..self.model.blocks.len()).rev() {
            let bc = &cache.blocks[i];
            let grad_act = fake_quant_grad(&bc.act_in, self.block_out[i].qp()?, &grad_f)?;
            let grad_conv = relu_grad(&bc.conv_out, &grad_act)?;
            let conv_fq = crate::tensor::ConvParams {
                weight: bc.w_fq.clone(),
                bias: self.model.blocks[i].bias.clone(),
            };
            let g = conv2d_grad(&bc.input, &conv_fq, &grad_conv)?;
            let g_w = fake_quant_grad(&self.model.blocks[i].weight, self.block_w[i].qp()?, &g.weight)?;
            self.model.blocks[i].weight.accumulate_grad(g_w.data());
            self.model.blocks[i].bias.accumulate_grad(g.bias.data());
            grad_f = g.x;
        }

        let grad_f0q = add(&grad_f, &grad_f0q_skip)?;
        let grad_stem_conv = fake_quant_grad(&cache.stem.conv_out, self.stem_out.qp()?, &grad_f0q)?;
        let stem_fq = crate::tensor::ConvParams {
            weight: cache.stem.w_fq.clone(),
            bias: self.model.stem.bias.clone(),
        };
        let g_stem = conv2d_grad(&cache.stem.input, &stem_fq, &grad_stem_conv)?;
        let g_w = fake_quant_grad(&self.model.stem.weight, self.stem_w.qp()?, &g_stem.weight)?;
        self.model.stem.weight.accumulate_grad(g_w.data());
        self.model.stem.bias.accumulate_grad(g_stem.bias.data());
        let _ = &cache.input_raw;
        Ok(())
    }
}
