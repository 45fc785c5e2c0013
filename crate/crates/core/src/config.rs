//! Plain-text key-value run configuration.
//!
//! One `key = value` pair per line, `#` starts a comment, every key has a
//! default, unknown keys are errors. A fully-defaulted file round-trips
//! through parse → serialize → parse unchanged. The resolved config is
//! written next to every output artifact for provenance.

use crate::data::{MissingTeacher, SynthKind};
use crate::error::{Error, Result};
use crate::losses::Stage;
use crate::model::StudentConfig;
use crate::train::StageConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherMode {
    /// Train a wider student with the stage-1 loss and cache its
    /// predictions.
    Proxy,
    /// Use pre-existing `<root>/teacher/*.png` files.
    Files,
    /// Cache the ground-truth HR images as teacher predictions.
    GroundTruth,
}

impl TeacherMode {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "proxy" => Ok(TeacherMode::Proxy),
            "files" => Ok(TeacherMode::Files),
            "ground-truth" => Ok(TeacherMode::GroundTruth),
            other => Err(Error::invalid_argument(format!(
                "unknown teacher mode '{other}' (expected proxy | files | ground-truth)"
            ))),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            TeacherMode::Proxy => "proxy",
            TeacherMode::Files => "files",
            TeacherMode::GroundTruth => "ground-truth",
        }
    }
}

/// Every tunable of the pipeline, resolved from defaults, a config file,
/// and command-line overrides, in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    pub data_kind: SynthKind,
    pub data_n: usize,
    pub data_size: usize,
    pub data_val_count: usize,
    pub data_missing_teacher: MissingTeacher,

    pub model_blocks: usize,
    pub model_channels: usize,
    pub model_conv3_branches: usize,
    pub model_identity_branch: bool,

    pub teacher_mode: TeacherMode,
    pub teacher_blocks: usize,
    pub teacher_channels: usize,
    pub teacher_conv3_branches: usize,
    pub teacher_iterations: u64,
    pub teacher_lr0: f64,
    pub teacher_batch: usize,
    pub teacher_patch: usize,

    pub stage1_iterations: u64,
    pub stage1_lr0: f64,
    pub stage1_lr_min: f64,
    pub stage1_warmup_frac: f64,
    pub stage1_patch: usize,
    pub stage1_batch: usize,

    pub stage2_iterations: u64,
    pub stage2_lr0: f64,
    pub stage2_lr_min: f64,
    pub stage2_patch: usize,
    pub stage2_batch: usize,
    pub stage2_grad_clip: f64,
    pub stage2_ema_decay: f64,

    pub stage3_iterations: u64,
    pub stage3_lr0: f64,
    pub stage3_lr_min: f64,
    pub stage3_patch: usize,
    pub stage3_batch: usize,
    pub stage3_t1_frac: f64,
    pub stage3_t2_frac: f64,

    pub clip_weight_lo: f32,
    pub clip_weight_hi: f32,

    pub recal_batches: usize,
    pub recal_batch_size: usize,

    pub val_every_frac: f64,
    pub infer_max_pixels: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            data_kind: SynthKind::Checkerboards,
            data_n: 16,
            data_size: 96,
            data_val_count: 4,
            data_missing_teacher: MissingTeacher::Error,
            model_blocks: 8,
            model_channels: 32,
            model_conv3_branches: 4,
            model_identity_branch: true,
            teacher_mode: TeacherMode::Proxy,
            teacher_blocks: 16,
            teacher_channels: 64,
            teacher_conv3_branches: 1,
            teacher_iterations: 100,
            teacher_lr0: 1e-3,
            teacher_batch: 2,
            teacher_patch: 24,
            stage1_iterations: 240,
            stage1_lr0: 1e-3,
            stage1_lr_min: 0.0,
            stage1_warmup_frac: 0.05,
            stage1_patch: 128,
            stage1_batch: 8,
            stage2_iterations: 80,
            stage2_lr0: 3e-5,
            stage2_lr_min: 0.0,
            stage2_patch: 160,
            stage2_batch: 8,
            stage2_grad_clip: 1.0,
            stage2_ema_decay: 0.999,
            stage3_iterations: 60,
            stage3_lr0: 1e-6,
            stage3_lr_min: 0.0,
            stage3_patch: 144,
            stage3_batch: 1,
            stage3_t1_frac: 0.2,
            stage3_t2_frac: 0.6,
            clip_weight_lo: -1.5,
            clip_weight_hi: 1.5,
            recal_batches: 64,
            recal_batch_size: 8,
            val_every_frac: 0.1,
            infer_max_pixels: 16_777_216,
        }
    }
}

macro_rules! config_keys {
    ($(($key:literal, $field:ident, $get:expr, $set:expr)),+ $(,)?) => {
        /// All recognized keys, in serialization order.
        pub const KEYS: &[&str] = &[$($key),+];

        impl RunConfig {
            pub fn get(&self, key: &str) -> Result<String> {
                match key {
                    $($key => { let f: fn(&RunConfig) -> String = $get; Ok(f(self)) })+
                    other => Err(Error::invalid_argument(format!("unknown config key '{other}'"))),
                }
            }

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => { let f: fn(&mut RunConfig, &str) -> Result<()> = $set; f(self, value) })+
                    other => Err(Error::invalid_argument(format!("unknown config key '{other}'"))),
                }
            }
        }
    };
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| {
        Error::invalid_argument(format!("config key '{key}': cannot parse value '{v}'"))
    })
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::invalid_argument(format!(
            "config key '{key}': expected true or false, got '{v}'"
        ))),
    }
}

config_keys![
    ("seed", seed, |c| c.seed.to_string(), |c, v| { c.seed = parse_num("seed", v)?; Ok(()) }),
    ("data.kind", data_kind, |c| c.data_kind.name().to_string(), |c, v| { c.data_kind = SynthKind::parse(v)?; Ok(()) }),
    ("data.n", data_n, |c| c.data_n.to_string(), |c, v| { c.data_n = parse_num("data.n", v)?; Ok(()) }),
    ("data.size", data_size, |c| c.data_size.to_string(), |c, v| { c.data_size = parse_num("data.size", v)?; Ok(()) }),
    ("data.val_count", data_val_count, |c| c.data_val_count.to_string(), |c, v| { c.data_val_count = parse_num("data.val_count", v)?; Ok(()) }),
    ("data.missing_teacher", data_missing_teacher, |c| match c.data_missing_teacher { MissingTeacher::SkipSample => "skip".into(), MissingTeacher::Error => "error".into() }, |c, v| {
        c.data_missing_teacher = match v {
            "skip" => MissingTeacher::SkipSample,
            "error" => MissingTeacher::Error,
            _ => return Err(Error::invalid_argument(format!("config key 'data.missing_teacher': expected skip or error, got '{v}'"))),
        };
        Ok(())
    }),
    ("model.blocks", model_blocks, |c| c.model_blocks.to_string(), |c, v| { c.model_blocks = parse_num("model.blocks", v)?; Ok(()) }),
    ("model.channels", model_channels, |c| c.model_channels.to_string(), |c, v| { c.model_channels = parse_num("model.channels", v)?; Ok(()) }),
    ("model.conv3_branches", model_conv3_branches, |c| c.model_conv3_branches.to_string(), |c, v| { c.model_conv3_branches = parse_num("model.conv3_branches", v)?; Ok(()) }),
    ("model.identity_branch", model_identity_branch, |c| c.model_identity_branch.to_string(), |c, v| { c.model_identity_branch = parse_bool("model.identity_branch", v)?; Ok(()) }),
    ("teacher.mode", teacher_mode, |c| c.teacher_mode.name().to_string(), |c, v| { c.teacher_mode = TeacherMode::parse(v)?; Ok(()) }),
    ("teacher.blocks", teacher_blocks, |c| c.teacher_blocks.to_string(), |c, v| { c.teacher_blocks = parse_num("teacher.blocks", v)?; Ok(()) }),
    ("teacher.channels", teacher_channels, |c| c.teacher_channels.to_string(), |c, v| { c.teacher_channels = parse_num("teacher.channels", v)?; Ok(()) }),
    ("teacher.conv3_branches", teacher_conv3_branches, |c| c.teacher_conv3_branches.to_string(), |c, v| { c.teacher_conv3_branches = parse_num("teacher.conv3_branches", v)?; Ok(()) }),
    ("teacher.iterations", teacher_iterations, |c| c.teacher_iterations.to_string(), |c, v| { c.teacher_iterations = parse_num("teacher.iterations", v)?; Ok(()) }),
    ("teacher.lr0", teacher_lr0, |c| format!("{:e}", c.teacher_lr0), |c, v| { c.teacher_lr0 = parse_num("teacher.lr0", v)?; Ok(()) }),
    ("teacher.batch", teacher_batch, |c| c.teacher_batch.to_string(), |c, v| { c.teacher_batch = parse_num("teacher.batch", v)?; Ok(()) }),
    ("teacher.patch", teacher_patch, |c| c.teacher_patch.to_string(), |c, v| { c.teacher_patch = parse_num("teacher.patch", v)?; Ok(()) }),
    ("stage1.iterations", stage1_iterations, |c| c.stage1_iterations.to_string(), |c, v| { c.stage1_iterations = parse_num("stage1.iterations", v)?; Ok(()) }),
    ("stage1.lr0", stage1_lr0, |c| format!("{:e}", c.stage1_lr0), |c, v| { c.stage1_lr0 = parse_num("stage1.lr0", v)?; Ok(()) }),
    ("stage1.lr_min", stage1_lr_min, |c| format!("{:e}", c.stage1_lr_min), |c, v| { c.stage1_lr_min = parse_num("stage1.lr_min", v)?; Ok(()) }),
    ("stage1.warmup_frac", stage1_warmup_frac, |c| c.stage1_warmup_frac.to_string(), |c, v| { c.stage1_warmup_frac = parse_num("stage1.warmup_frac", v)?; Ok(()) }),
    ("stage1.patch", stage1_patch, |c| c.stage1_patch.to_string(), |c, v| { c.stage1_patch = parse_num("stage1.patch", v)?; Ok(()) }),
    ("stage1.batch", stage1_batch, |c| c.stage1_batch.to_string(), |c, v| { c.stage1_batch = parse_num("stage1.batch", v)?; Ok(()) }),
    ("stage2.iterations", stage2_iterations, |c| c.stage2_iterations.to_string(), |c, v| { c.stage2_iterations = parse_num("stage2.iterations", v)?; Ok(()) }),
    ("stage2.lr0", stage2_lr0, |c| format!("{:e}", c.stage2_lr0), |c, v| { c.stage2_lr0 = parse_num("stage2.lr0", v)?; Ok(()) }),
    ("stage2.lr_min", stage2_lr_min, |c| format!("{:e}", c.stage2_lr_min), |c, v| { c.stage2_lr_min = parse_num("stage2.lr_min", v)?; Ok(()) }),
    ("stage2.patch", stage2_patch, |c| c.stage2_patch.to_string(), |c, v| { c.stage2_patch = parse_num("stage2.patch", v)?; Ok(()) }),
    ("stage2.batch", stage2_batch, |c| c.stage2_batch.to_string(), |c, v| { c.stage2_batch = parse_num("stage2.batch", v)?; Ok(()) }),
    ("stage2.grad_clip", stage2_grad_clip, |c| c.stage2_grad_clip.to_string(), |c, v| { c.stage2_grad_clip = parse_num("stage2.grad_clip", v)?; Ok(()) }),
    ("stage2.ema_decay", stage2_ema_decay, |c| c.stage2_ema_decay.to_string(), |c, v| { c.stage2_ema_decay = parse_num("stage2.ema_decay", v)?; Ok(()) }),
    ("stage3.iterations", stage3_iterations, |c| c.stage3_iterations.to_string(), |c, v| { c.stage3_iterations = parse_num("stage3.iterations", v)?; Ok(()) }),
    ("stage3.lr0", stage3_lr0, |c| format!("{:e}", c.stage3_lr0), |c, v| { c.stage3_lr0 = parse_num("stage3.lr0", v)?; Ok(()) }),
    ("stage3.lr_min", stage3_lr_min, |c| format!("{:e}", c.stage3_lr_min), |c, v| { c.stage3_lr_min = parse_num("stage3.lr_min", v)?; Ok(()) }),
    ("stage3.patch", stage3_patch, |c| c.stage3_patch.to_string(), |c, v| { c.stage3_patch = parse_num("stage3.patch", v)?; Ok(()) }),
    ("stage3.batch", stage3_batch, |c| c.stage3_batch.to_string(), |c, v| { c.stage3_batch = parse_num("stage3.batch", v)?; Ok(()) }),
    ("stage3.t1_frac", stage3_t1_frac, |c| c.stage3_t1_frac.to_string(), |c, v| { c.stage3_t1_frac = parse_num("stage3.t1_frac", v)?; Ok(()) }),
    ("stage3.t2_frac", stage3_t2_frac, |c| c.stage3_t2_frac.to_string(), |c, v| { c.stage3_t2_frac = parse_num("stage3.t2_frac", v)?; Ok(()) }),
    ("clip.weight_lo", clip_weight_lo, |c| c.clip_weight_lo.to_string(), |c, v| { c.clip_weight_lo = parse_num("clip.weight_lo", v)?; Ok(()) }),
    ("clip.weight_hi", clip_weight_hi, |c| c.clip_weight_hi.to_string(), |c, v| { c.clip_weight_hi = parse_num("clip.weight_hi", v)?; Ok(()) }),
    ("recal.batches", recal_batches, |c| c.recal_batches.to_string(), |c, v| { c.recal_batches = parse_num("recal.batches", v)?; Ok(()) }),
    ("recal.batch_size", recal_batch_size, |c| c.recal_batch_size.to_string(), |c, v| { c.recal_batch_size = parse_num("recal.batch_size", v)?; Ok(()) }),
    ("val.every_frac", val_every_frac, |c| c.val_every_frac.to_string(), |c, v| { c.val_every_frac = parse_num("val.every_frac", v)?; Ok(()) }),
    ("infer.max_pixels", infer_max_pixels, |c| c.infer_max_pixels.to_string(), |c, v| { c.infer_max_pixels = parse_num("infer.max_pixels", v)?; Ok(()) }),
];

impl RunConfig {
    /// Parses a config file on top of the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines to an existing config.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid_argument(format!(
                    "config line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Canonical text form: every key, serialization order, one per line.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.get(key).expect("registered key"));
            out.push('\n');
        }
        out
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn student_config(&self) -> StudentConfig {
        StudentConfig {
            num_blocks: self.model_blocks,
            channels: self.model_channels,
            num_conv3_branches: self.model_conv3_branches,
            identity_branch: self.model_identity_branch,
        }
    }

    pub fn teacher_student_config(&self) -> StudentConfig {
        StudentConfig {
            num_blocks: self.teacher_blocks,
            channels: self.teacher_channels,
            num_conv3_branches: self.teacher_conv3_branches,
            identity_branch: true,
        }
    }

    fn frac_steps(iterations: u64, frac: f64) -> u64 {
        (iterations as f64 * frac).round() as u64
    }

    pub fn stage_config(&self, stage: Stage) -> StageConfig {
        let mut cfg = match stage {
            Stage::One => {
                let mut c = StageConfig::defaults_for(stage, self.stage1_iterations);
                c.lr0 = self.stage1_lr0;
                c.lr_min = self.stage1_lr_min;
                c.warmup_steps = Self::frac_steps(self.stage1_iterations, self.stage1_warmup_frac);
                c.patch = self.stage1_patch;
                c.batch = self.stage1_batch;
                c
            }
            Stage::Two => {
                let mut c = StageConfig::defaults_for(stage, self.stage2_iterations);
                c.lr0 = self.stage2_lr0;
                c.lr_min = self.stage2_lr_min;
                c.patch = self.stage2_patch;
                c.batch = self.stage2_batch;
                c.grad_clip_norm = Some(self.stage2_grad_clip);
                c.ema_decay = Some(self.stage2_ema_decay);
                c.weight_clip = Some((self.clip_weight_lo, self.clip_weight_hi));
                c
            }
            Stage::Three => {
                let mut c = StageConfig::defaults_for(stage, self.stage3_iterations);
                c.lr0 = self.stage3_lr0;
                c.lr_min = self.stage3_lr_min;
                c.patch = self.stage3_patch;
                c.batch = self.stage3_batch;
                c.weight_clip = Some((self.clip_weight_lo, self.clip_weight_hi));
                c.qat_boundaries = Some((
                    Self::frac_steps(self.stage3_iterations, self.stage3_t1_frac),
                    Self::frac_steps(self.stage3_iterations, self.stage3_t2_frac),
                ));
                c
            }
        };
        cfg.val_every = ((cfg.iterations as f64 * self.val_every_frac).round() as u64).max(1);
        cfg.missing_teacher = self.data_missing_teacher;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_serialize_parse() {
        let cfg = RunConfig::default();
        let text = cfg.serialize();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, parsed);
        assert_eq!(text, parsed.serialize());
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = RunConfig::parse("stage4.iterations = 10").unwrap_err().to_string();
        assert!(err.contains("stage4.iterations"), "{err}");
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::parse("# comment\nseed = 42  # trailing\nstage1.batch = 2\n").unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.stage1_batch, 2);
        assert_eq!(cfg.stage2_batch, RunConfig::default().stage2_batch);
    }

    #[test]
    fn bad_value_names_the_key() {
        let err = RunConfig::parse("stage1.batch = banana").unwrap_err().to_string();
        assert!(err.contains("stage1.batch"), "{err}");
    }

    #[test]
    fn stage_configs_resolve_fractions() {
        let mut cfg = RunConfig::default();
        cfg.stage3_iterations = 150;
        let s3 = cfg.stage_config(Stage::Three);
        assert_eq!(s3.qat_boundaries, Some((30, 90)));
        let s1 = cfg.stage_config(Stage::One);
        assert_eq!(s1.warmup_steps, 12);
    }
}
