//! Versioned binary checkpoints: model parameters, optimizer moments, EMA
//! shadow weights, stage and step counters, and the QAT node state, with a
//! CRC32 over the whole payload. The RNG needs no serialized internals:
//! every random draw derives from `(seed, stage, step)`, so the counters
//! alone make resume bit-exact.

use crate::container::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{DeployModel, StudentConfig, TrainModel};
use crate::quant::{
    insert_qat, ActNode, Granularity, Observer, ObserverMode, ObserverState, Phase, QatModel,
    QuantParams, WeightNode,
};
use crate::tensor::Tensor;
use crate::train::optim::{AdamState, Ema};
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Flat name -> (shape, values) map used for parameter snapshots.
pub type NamedTensors = BTreeMap<String, ([usize; 4], Vec<f32>)>;

/// The model stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointModel {
    Train(TrainModel),
    Deploy(DeployModel),
    Qat(QatModel),
}

impl CheckpointModel {
    pub fn kind_name(&self) -> &'static str {
        match self {
            CheckpointModel::Train(_) => "train",
            CheckpointModel::Deploy(_) => "deploy",
            CheckpointModel::Qat(_) => "qat",
        }
    }
}

/// Everything needed to resume a stage mid-run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: u32,
    pub next_step: u64,
    pub seed: u64,
    pub model: CheckpointModel,
    pub adam: Option<AdamState>,
    pub ema: Option<Ema>,
    pub best_psnr: Option<f64>,
    pub best_params: Option<NamedTensors>,
    pub skipped_nonfinite: u64,
}

fn collect_train_state(m: &TrainModel) -> NamedTensors {
    let mut out = NamedTensors::new();
    let mut m = m.clone();
    m.for_each_param_mut(&mut |name, t| {
        out.insert(name, (t.shape(), t.data().to_vec()));
    });
    m.for_each_buffer_mut(&mut |name, t| {
        out.insert(name, (t.shape(), t.data().to_vec()));
    });
    out
}

fn collect_deploy_state(m: &DeployModel) -> NamedTensors {
    let mut out = NamedTensors::new();
    let mut m = m.clone();
    m.for_each_param_mut(&mut |name, t| {
        out.insert(name, (t.shape(), t.data().to_vec()));
    });
    out
}

fn apply_named(fill: &mut dyn FnMut(&mut dyn FnMut(String, &mut Tensor)), map: &NamedTensors) -> Result<()> {
    let mut missing = Vec::new();
    let mut bad = Vec::new();
    fill(&mut |name, t| match map.get(&name) {
        None => missing.push(name),
        Some((shape, data)) => {
            if *shape != t.shape() || data.len() != t.numel() {
                bad.push(name);
            } else {
                t.data_mut().copy_from_slice(data);
            }
        }
    });
    if !missing.is_empty() || !bad.is_empty() {
        return Err(Error::invalid_state(format!(
            "checkpoint tensor mismatch: missing {missing:?}, wrong shape {bad:?}"
        )));
    }
    Ok(())
}

fn write_named(w: &mut Writer, map: &NamedTensors) {
    w.put_u32(map.len() as u32);
    for (name, (shape, data)) in map {
        w.put_str(name);
        for d in shape {
            w.put_u32(*d as u32);
        }
        w.put_f32_slice(data);
    }
}

fn read_named(r: &mut Reader) -> Result<NamedTensors> {
    let count = r.get_u32()? as usize;
    let mut out = NamedTensors::new();
    for _ in 0..count {
        let name = r.get_str()?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.get_u32()? as usize;
        }
        let numel: usize = shape.iter().product();
        let data = r.get_f32_vec(numel)?;
        out.insert(name, (shape, data));
    }
    Ok(out)
}

fn write_config(w: &mut Writer, c: &StudentConfig) {
    w.put_u32(c.num_blocks as u32);
    w.put_u32(c.channels as u32);
    w.put_u32(c.num_conv3_branches as u32);
    w.put_u8(u8::from(c.identity_branch));
}

fn read_config(r: &mut Reader) -> Result<StudentConfig> {
    Ok(StudentConfig {
        num_blocks: r.get_u32()? as usize,
        channels: r.get_u32()? as usize,
        num_conv3_branches: r.get_u32()? as usize,
        identity_branch: r.get_u8()? != 0,
    })
}

fn write_observer(w: &mut Writer, o: &Observer) {
    match o.mode {
        ObserverMode::MinMax => {
            w.put_u8(0);
            w.put_f32(0.0);
        }
        ObserverMode::Ema { decay } => {
            w.put_u8(1);
            w.put_f32(decay);
        }
    }
    w.put_u8(match o.state {
        ObserverState::Active => 0,
        ObserverState::Disabled => 1,
        ObserverState::Frozen => 2,
    });
    w.put_f32(o.min);
    w.put_f32(o.max);
    w.put_u8(u8::from(o.initialized));
}

fn read_observer(r: &mut Reader) -> Result<Observer> {
    let mode_tag = r.get_u8()?;
    let decay = r.get_f32()?;
    let mode = match mode_tag {
        0 => ObserverMode::MinMax,
        1 => ObserverMode::Ema { decay },
        other => {
            return Err(Error::Parse {
                offset: r.offset(),
                msg: format!("unknown observer mode {other}"),
            })
        }
    };
    let state = match r.get_u8()? {
        0 => ObserverState::Active,
        1 => ObserverState::Disabled,
        2 => ObserverState::Frozen,
        other => {
            return Err(Error::Parse {
                offset: r.offset(),
                msg: format!("unknown observer state {other}"),
            })
        }
    };
    let min = r.get_f32()?;
    let max = r.get_f32()?;
    let initialized = r.get_u8()? != 0;
    Ok(Observer {
        mode,
        state,
        min,
        max,
        initialized,
    })
}

fn write_qp(w: &mut Writer, qp: &Option<QuantParams>) {
    match qp {
        None => w.put_u8(0),
        Some(qp) => {
            w.put_u8(1);
            w.put_u8(match qp.granularity {
                Granularity::PerTensor => 0,
                Granularity::PerChannel => 1,
            });
            w.put_u32(qp.scales.len() as u32);
            w.put_f32_slice(&qp.scales);
            w.put_i32(qp.zero_point);
            w.put_i32(qp.qmin);
            w.put_i32(qp.qmax);
        }
    }
}

fn read_qp(r: &mut Reader) -> Result<Option<QuantParams>> {
    if r.get_u8()? == 0 {
        return Ok(None);
    }
    let granularity = match r.get_u8()? {
        0 => Granularity::PerTensor,
        1 => Granularity::PerChannel,
        other => {
            return Err(Error::Parse {
                offset: r.offset(),
                msg: format!("unknown granularity {other}"),
            })
        }
    };
    let n = r.get_u32()? as usize;
    let scales = r.get_f32_vec(n)?;
    let zero_point = r.get_i32()?;
    let qmin = r.get_i32()?;
    let qmax = r.get_i32()?;
    Ok(Some(QuantParams {
        scales,
        zero_point,
        qmin,
        qmax,
        granularity,
    }))
}

fn write_act_node(w: &mut Writer, n: &ActNode) {
    write_observer(w, &n.observer);
    write_qp(w, &n.qp);
}

fn read_act_node(r: &mut Reader) -> Result<ActNode> {
    Ok(ActNode {
        observer: read_observer(r)?,
        qp: read_qp(r)?,
    })
}

fn write_weight_node(w: &mut Writer, n: &WeightNode) {
    w.put_u32(n.observers.len() as u32);
    for o in &n.observers {
        write_observer(w, o);
    }
    write_qp(w, &n.qp);
}

fn read_weight_node(r: &mut Reader) -> Result<WeightNode> {
    let count = r.get_u32()? as usize;
    let mut observers = Vec::with_capacity(count);
    for _ in 0..count {
        observers.push(read_observer(r)?);
    }
    Ok(WeightNode {
        observers,
        qp: read_qp(r)?,
    })
}

fn write_adam(w: &mut Writer, a: &AdamState) {
    w.put_u64(a.step);
    w.put_u32(a.moments.len() as u32);
    for (name, (m, v)) in &a.moments {
        w.put_str(name);
        w.put_u32(m.len() as u32);
        w.put_f32_slice(m);
        w.put_f32_slice(v);
    }
}

fn read_adam(r: &mut Reader) -> Result<AdamState> {
    let step = r.get_u64()?;
    let count = r.get_u32()? as usize;
    let mut moments = BTreeMap::new();
    for _ in 0..count {
        let name = r.get_str()?;
        let len = r.get_u32()? as usize;
        let m = r.get_f32_vec(len)?;
        let v = r.get_f32_vec(len)?;
        moments.insert(name, (m, v));
    }
    Ok(AdamState { step, moments })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.put_u32(self.stage);
        w.put_u64(self.next_step);
        w.put_u64(self.seed);
        w.put_u64(self.skipped_nonfinite);

        match &self.model {
            CheckpointModel::Train(m) => {
                w.put_u8(1);
                write_config(&mut w, &m.config);
                w.put_u8(u8::from(m.bn_recalibrated));
                write_named(&mut w, &collect_train_state(m));
            }
            CheckpointModel::Deploy(m) => {
                w.put_u8(2);
                write_config(&mut w, &m.config);
                write_named(&mut w, &collect_deploy_state(m));
            }
            CheckpointModel::Qat(q) => {
                w.put_u8(3);
                write_config(&mut w, &q.model.config);
                write_named(&mut w, &collect_deploy_state(&q.model));
                w.put_u8(q.phase.number() as u8);
                write_act_node(&mut w, &q.input_node);
                write_weight_node(&mut w, &q.stem_w);
                write_act_node(&mut w, &q.stem_out);
                for (wn, an) in q.block_w.iter().zip(q.block_out.iter()) {
                    write_weight_node(&mut w, wn);
                    write_act_node(&mut w, an);
                }
                write_act_node(&mut w, &q.skip_out);
                write_weight_node(&mut w, &q.head_w);
                write_act_node(&mut w, &q.head_out);
            }
        }

        match &self.adam {
            None => w.put_u8(0),
            Some(a) => {
                w.put_u8(1);
                write_adam(&mut w, a);
            }
        }
        match &self.ema {
            None => w.put_u8(0),
            Some(e) => {
                w.put_u8(1);
                w.put_f64(e.decay);
                w.put_u32(e.shadow.len() as u32);
                for (name, data) in &e.shadow {
                    w.put_str(name);
                    w.put_u32(data.len() as u32);
                    w.put_f32_slice(data);
                }
            }
        }
        match (&self.best_psnr, &self.best_params) {
            (Some(p), Some(params)) => {
                w.put_u8(1);
                w.put_f64(*p);
                write_named(&mut w, params);
            }
            _ => w.put_u8(0),
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let stage = r.get_u32()?;
        let next_step = r.get_u64()?;
        let seed = r.get_u64()?;
        let skipped_nonfinite = r.get_u64()?;

        let kind = r.get_u8()?;
        let config = read_config(&mut r)?;
        let model = match kind {
            1 => {
                let bn_recalibrated = r.get_u8()? != 0;
                let map = read_named(&mut r)?;
                let mut m = TrainModel::zeros(config)?;
                apply_named(&mut |f| m.for_each_param_mut(f), &map)?;
                apply_named(&mut |f| m.for_each_buffer_mut(f), &map)?;
                m.bn_recalibrated = bn_recalibrated;
                CheckpointModel::Train(m)
            }
            2 => {
                let map = read_named(&mut r)?;
                let mut m = DeployModel::zeros(config)?;
                apply_named(&mut |f| m.for_each_param_mut(f), &map)?;
                CheckpointModel::Deploy(m)
            }
            3 => {
                let map = read_named(&mut r)?;
                let mut m = DeployModel::zeros(config)?;
                apply_named(&mut |f| m.for_each_param_mut(f), &map)?;
                let mut q = insert_qat(m);
                q.phase = match r.get_u8()? {
                    1 => Phase::One,
                    2 => Phase::Two,
                    3 => Phase::Three,
                    other => {
                        return Err(Error::Parse {
                            offset: r.offset(),
                            msg: format!("unknown phase {other}"),
                        })
                    }
                };
                q.input_node = read_act_node(&mut r)?;
                q.stem_w = read_weight_node(&mut r)?;
                q.stem_out = read_act_node(&mut r)?;
                for i in 0..q.model.blocks.len() {
                    q.block_w[i] = read_weight_node(&mut r)?;
                    q.block_out[i] = read_act_node(&mut r)?;
                }
                q.skip_out = read_act_node(&mut r)?;
                q.head_w = read_weight_node(&mut r)?;
                q.head_out = read_act_node(&mut r)?;
                CheckpointModel::Qat(q)
            }
            other => {
                return Err(Error::Parse {
                    offset: r.offset(),
                    msg: format!("unknown checkpoint model kind {other}"),
                })
            }
        };

        let adam = if r.get_u8()? == 1 {
            Some(read_adam(&mut r)?)
        } else {
            None
        };
        let ema = if r.get_u8()? == 1 {
            let decay = r.get_f64()?;
            let count = r.get_u32()? as usize;
            let mut shadow = BTreeMap::new();
            for _ in 0..count {
                let name = r.get_str()?;
                let len = r.get_u32()? as usize;
                shadow.insert(name, r.get_f32_vec(len)?);
            }
            Some(Ema { decay, shadow })
        } else {
            None
        };
        let (best_psnr, best_params) = if r.get_u8()? == 1 {
            let p = r.get_f64()?;
            let map = read_named(&mut r)?;
            (Some(p), Some(map))
        } else {
            (None, None)
        };
        r.expect_end()?;
        Ok(Checkpoint {
            stage,
            next_step,
            seed,
            model,
            adam,
            ema,
            best_psnr,
            best_params,
            skipped_nonfinite,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Snapshot of all learnable parameters and buffers of a stage model.
pub fn snapshot_model(model: &CheckpointModel) -> NamedTensors {
    match model {
        CheckpointModel::Train(m) => collect_train_state(m),
        CheckpointModel::Deploy(m) => collect_deploy_state(m),
        CheckpointModel::Qat(q) => collect_deploy_state(&q.model),
    }
}

/// Restores a snapshot produced by [`snapshot_model`].
pub fn restore_model(model: &mut CheckpointModel, snap: &NamedTensors) -> Result<()> {
    match model {
        CheckpointModel::Train(m) => {
            apply_named(&mut |f| m.for_each_param_mut(f), snap)?;
            apply_named(&mut |f| m.for_each_buffer_mut(f), snap)
        }
        CheckpointModel::Deploy(m) => apply_named(&mut |f| m.for_each_param_mut(f), snap),
        CheckpointModel::Qat(q) => apply_named(&mut |f| q.model.for_each_param_mut(f), snap),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fuse_model;

    fn small_config() -> StudentConfig {
        StudentConfig {
            num_blocks: 2,
            channels: 4,
            num_conv3_branches: 2,
            identity_branch: true,
        }
    }

    #[test]
    fn train_checkpoint_roundtrip_bit_identical() {
        let m = TrainModel::init(small_config(), 3).unwrap();
        let mut adam = AdamState::new();
        adam.step = 17;
        adam.moments.insert("stem.weight".into(), (vec![0.25; 4], vec![0.5; 4]));
        let ck = Checkpoint {
            stage: 1,
            next_step: 42,
            seed: 9,
            model: CheckpointModel::Train(m),
            adam: Some(adam),
            ema: None,
            best_psnr: Some(31.5),
            best_params: Some(NamedTensors::new()),
            skipped_nonfinite: 1,
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck, back);
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn qat_checkpoint_roundtrip() {
        let m = TrainModel::init(small_config(), 5).unwrap();
        let (deploy, _) = fuse_model(&m).unwrap();
        let mut q = insert_qat(deploy);
        let x = Tensor::filled([1, 3, 6, 6], 0.25);
        q.forward_observe_only(&x).unwrap();
        crate::quant::set_phase(&mut q, 95, crate::quant::PhaseSchedule::new(30, 90).unwrap());
        let ck = Checkpoint {
            stage: 3,
            next_step: 95,
            seed: 1,
            model: CheckpointModel::Qat(q),
            adam: Some(AdamState::new()),
            ema: None,
            best_psnr: None,
            best_params: None,
            skipped_nonfinite: 0,
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(ck, back);
    }

    #[test]
    fn crc_mismatch_refuses_load() {
        let m = TrainModel::init(small_config(), 3).unwrap();
        let ck = Checkpoint {
            stage: 1,
            next_step: 0,
            seed: 0,
            model: CheckpointModel::Train(m),
            adam: None,
            ema: None,
            best_psnr: None,
            best_params: None,
            skipped_nonfinite: 0,
        };
        let mut bytes = ck.to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn version_bump_is_rejected_with_message() {
        let m = TrainModel::init(small_config(), 3).unwrap();
        let ck = Checkpoint {
            stage: 1,
            next_step: 0,
            seed: 0,
            model: CheckpointModel::Train(m),
            adam: None,
            ema: None,
            best_psnr: None,
            best_params: None,
            skipped_nonfinite: 0,
        };
        let mut bytes = ck.to_bytes();
        // bump the version field and fix up the checksum
        bytes[4] = 2;
        let body_len = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&crc.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
    }
}
