//! Flat text run configuration: one `key = value` per line, `#` comments,
//! dotted key groups (gen.*, disc.*, train.*, sched.*, data.*, run.*).
//! Serialization emits keys sorted, so a resolved config echoes and reloads
//! to exactly the same struct — checkpoints carry that echo verbatim.

use std::path::Path;

use crate::diffusion::{make_schedule, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::networks::{DiscriminatorConfig, GeneratorConfig};
use crate::training::TrainConfig;

/// Sub-band packets of an RGB image, and their concatenation with the
/// conditioning packet. Derived, never configured.
pub const PACKET_CHANNELS: usize = 12;
pub const COND_CHANNELS: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // gen.*
    pub gen_base_channels: usize,
    pub gen_channel_mult: Vec<usize>,
    pub gen_resnet_blocks: usize,
    pub gen_time_embed_dim: usize,
    pub gen_attention_levels: Vec<usize>,
    // disc.*
    pub disc_num_layers: usize,
    pub disc_base_channels: usize,
    pub disc_time_embed_dim: usize,
    // train.*
    pub train_lr_gen: f64,
    pub train_lr_disc: f64,
    pub train_adam_beta1: f64,
    pub train_adam_beta2: f64,
    pub train_adam_eps: f64,
    pub train_ema_decay: f64,
    pub train_lambda_rec: f64,
    pub train_r1_gamma: f64,
    pub train_lazy_reg_interval: u64,
    // sched.*
    pub sched_steps: usize,
    pub sched_beta_min: f64,
    pub sched_beta_max: f64,
    // data.*
    pub data_root: String,
    pub data_target_size: usize,
    pub data_scale_factor: usize,
    pub data_train_ratio: f64,
    pub data_split_seed: u64,
    // run.*
    pub run_seed: u64,
    pub run_batch_size: usize,
    pub run_iterations: u64,
    pub run_out_dir: String,
    pub run_checkpoint_interval: u64,
    pub run_log_interval: u64,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        let g = GeneratorConfig::default();
        let d = DiscriminatorConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            gen_base_channels: g.base_channels,
            gen_channel_mult: g.channel_mult,
            gen_resnet_blocks: g.resnet_blocks_per_level,
            gen_time_embed_dim: g.time_embed_dim,
            gen_attention_levels: g.attention_levels,
            disc_num_layers: d.num_layers,
            disc_base_channels: d.base_channels,
            disc_time_embed_dim: d.time_embed_dim,
            train_lr_gen: t.lr_gen,
            train_lr_disc: t.lr_disc,
            train_adam_beta1: t.adam_beta1,
            train_adam_beta2: t.adam_beta2,
            train_adam_eps: t.adam_eps,
            train_ema_decay: t.ema_decay,
            train_lambda_rec: t.lambda_rec,
            train_r1_gamma: t.r1_gamma,
            train_lazy_reg_interval: t.lazy_reg_interval,
            sched_steps: 4,
            sched_beta_min: 0.1,
            sched_beta_max: 20.0,
            data_root: "data".into(),
            data_target_size: 256,
            data_scale_factor: 8,
            data_train_ratio: 0.9,
            data_split_seed: 0,
            run_seed: 0,
            run_batch_size: 4,
            run_iterations: 1000,
            run_out_dir: "out".into(),
            run_checkpoint_interval: 500,
            run_log_interval: 10,
        }
    }
}

fn join_list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    let v = v.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: invalid list entry '{p}'")))
        })
        .collect()
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse::<T>()
        .map_err(|_| Error::Config(format!("{key}: invalid value '{v}'")))
}

impl RunConfig {
    /// All keys, sorted, one `key = value` per line.
    pub fn serialize(&self) -> String {
        let mut rows = vec![
            ("data.root".to_string(), self.data_root.clone()),
            ("data.scale_factor".into(), self.data_scale_factor.to_string()),
            ("data.split_seed".into(), self.data_split_seed.to_string()),
            ("data.target_size".into(), self.data_target_size.to_string()),
            ("data.train_ratio".into(), self.data_train_ratio.to_string()),
            ("disc.base_channels".into(), self.disc_base_channels.to_string()),
            ("disc.num_layers".into(), self.disc_num_layers.to_string()),
            ("disc.time_embed_dim".into(), self.disc_time_embed_dim.to_string()),
            ("gen.attention_levels".into(), join_list(&self.gen_attention_levels)),
            ("gen.base_channels".into(), self.gen_base_channels.to_string()),
            ("gen.channel_mult".into(), join_list(&self.gen_channel_mult)),
            ("gen.resnet_blocks".into(), self.gen_resnet_blocks.to_string()),
            ("gen.time_embed_dim".into(), self.gen_time_embed_dim.to_string()),
            ("run.batch_size".into(), self.run_batch_size.to_string()),
            ("run.checkpoint_interval".into(), self.run_checkpoint_interval.to_string()),
            ("run.iterations".into(), self.run_iterations.to_string()),
            ("run.log_interval".into(), self.run_log_interval.to_string()),
            ("run.out_dir".into(), self.run_out_dir.clone()),
            ("run.seed".into(), self.run_seed.to_string()),
            ("sched.beta_max".into(), self.sched_beta_max.to_string()),
            ("sched.beta_min".into(), self.sched_beta_min.to_string()),
            ("sched.steps".into(), self.sched_steps.to_string()),
            ("train.adam_beta1".into(), self.train_adam_beta1.to_string()),
            ("train.adam_beta2".into(), self.train_adam_beta2.to_string()),
            ("train.adam_eps".into(), self.train_adam_eps.to_string()),
            ("train.ema_decay".into(), self.train_ema_decay.to_string()),
            ("train.lambda_rec".into(), self.train_lambda_rec.to_string()),
            ("train.lazy_reg_interval".into(), self.train_lazy_reg_interval.to_string()),
            ("train.lr_disc".into(), self.train_lr_disc.to_string()),
            ("train.lr_gen".into(), self.train_lr_gen.to_string()),
            ("train.r1_gamma".into(), self.train_r1_gamma.to_string()),
        ];
        rows.sort();
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Apply one `key = value` assignment. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "gen.base_channels" => self.gen_base_channels = parse_num(key, value)?,
            "gen.channel_mult" => self.gen_channel_mult = parse_list(key, value)?,
            "gen.resnet_blocks" => self.gen_resnet_blocks = parse_num(key, value)?,
            "gen.time_embed_dim" => self.gen_time_embed_dim = parse_num(key, value)?,
            "gen.attention_levels" => self.gen_attention_levels = parse_list(key, value)?,
            "disc.num_layers" => self.disc_num_layers = parse_num(key, value)?,
            "disc.base_channels" => self.disc_base_channels = parse_num(key, value)?,
            "disc.time_embed_dim" => self.disc_time_embed_dim = parse_num(key, value)?,
            "train.lr_gen" => self.train_lr_gen = parse_num(key, value)?,
            "train.lr_disc" => self.train_lr_disc = parse_num(key, value)?,
            "train.adam_beta1" => self.train_adam_beta1 = parse_num(key, value)?,
            "train.adam_beta2" => self.train_adam_beta2 = parse_num(key, value)?,
            "train.adam_eps" => self.train_adam_eps = parse_num(key, value)?,
            "train.ema_decay" => self.train_ema_decay = parse_num(key, value)?,
            "train.lambda_rec" => self.train_lambda_rec = parse_num(key, value)?,
            "train.r1_gamma" => self.train_r1_gamma = parse_num(key, value)?,
            "train.lazy_reg_interval" => self.train_lazy_reg_interval = parse_num(key, value)?,
            "sched.steps" => self.sched_steps = parse_num(key, value)?,
            "sched.beta_min" => self.sched_beta_min = parse_num(key, value)?,
            "sched.beta_max" => self.sched_beta_max = parse_num(key, value)?,
            "data.root" => self.data_root = value.trim().to_string(),
            "data.target_size" => self.data_target_size = parse_num(key, value)?,
            "data.scale_factor" => self.data_scale_factor = parse_num(key, value)?,
            "data.train_ratio" => self.data_train_ratio = parse_num(key, value)?,
            "data.split_seed" => self.data_split_seed = parse_num(key, value)?,
            "run.seed" => self.run_seed = parse_num(key, value)?,
            "run.batch_size" => self.run_batch_size = parse_num(key, value)?,
            "run.iterations" => self.run_iterations = parse_num(key, value)?,
            "run.out_dir" => self.run_out_dir = value.trim().to_string(),
            "run.checkpoint_interval" => self.run_checkpoint_interval = parse_num(key, value)?,
            "run.log_interval" => self.run_log_interval = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    /// Parse a config document, starting from defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1))
            })?;
            cfg.set(key.trim(), value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Apply `key=value` strings (CLI overrides).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for ov in overrides {
            let (key, value) = ov.split_once('=').ok_or_else(|| {
                Error::Config(format!("override '{ov}' is not of the form key=value"))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn to_generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            base_channels: self.gen_base_channels,
            channel_mult: self.gen_channel_mult.clone(),
            resnet_blocks_per_level: self.gen_resnet_blocks,
            in_channels: COND_CHANNELS,
            out_channels: PACKET_CHANNELS,
            time_embed_dim: self.gen_time_embed_dim,
            attention_levels: self.gen_attention_levels.clone(),
        }
    }

    pub fn to_discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            num_layers: self.disc_num_layers,
            base_channels: self.disc_base_channels,
            in_channels: COND_CHANNELS,
            time_embed_dim: self.disc_time_embed_dim,
        }
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            lr_gen: self.train_lr_gen,
            lr_disc: self.train_lr_disc,
            adam_beta1: self.train_adam_beta1,
            adam_beta2: self.train_adam_beta2,
            adam_eps: self.train_adam_eps,
            ema_decay: self.train_ema_decay,
            lambda_rec: self.train_lambda_rec,
            r1_gamma: self.train_r1_gamma,
            lazy_reg_interval: self.train_lazy_reg_interval,
        }
    }

    pub fn make_diffusion_schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.sched_steps, self.sched_beta_min, self.sched_beta_max)
    }

    /// Cross-field checks that the typed sub-configs can't see.
    pub fn validate(&self) -> Result<()> {
        self.to_generator_config().validate()?;
        self.to_discriminator_config().validate()?;
        self.to_train_config().validate()?;
        self.make_diffusion_schedule()?;
        if self.gen_channel_mult.is_empty() {
            return Err(Error::Config("gen.channel_mult must not be empty".into()));
        }
        let levels = self.gen_channel_mult.len();
        for &l in &self.gen_attention_levels {
            if l >= levels {
                return Err(Error::Config(format!(
                    "gen.attention_levels entry {l} out of range for {levels} levels"
                )));
            }
        }
        if self.run_batch_size == 0 {
            return Err(Error::Config("run.batch_size must be at least 1".into()));
        }
        if self.run_iterations == 0 {
            return Err(Error::Config("run.iterations must be at least 1".into()));
        }
        if self.run_checkpoint_interval == 0 || self.run_log_interval == 0 {
            return Err(Error::Config(
                "run.checkpoint_interval and run.log_interval must be at least 1".into(),
            ));
        }
        if self.data_scale_factor == 0 {
            return Err(Error::Config("data.scale_factor must be at least 1".into()));
        }
        if self.data_target_size == 0
            || self.data_target_size % (2 * self.data_scale_factor) != 0
        {
            return Err(Error::Config(format!(
                "data.target_size {} must be a positive multiple of 2 * scale_factor ({})",
                self.data_target_size,
                2 * self.data_scale_factor
            )));
        }
        // The encoder halves the sub-band grid (levels - 1) times; it must
        // divide evenly all the way down.
        let packet = self.data_target_size / 2;
        let down = 1usize << (levels - 1);
        if packet % down != 0 {
            return Err(Error::Config(format!(
                "sub-band grid {packet} is not divisible by 2^{} (channel_mult depth)",
                levels - 1
            )));
        }
        if !(0.0 < self.data_train_ratio && self.data_train_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "data.train_ratio must be in (0, 1], got {}",
                self.data_train_ratio
            )));
        }
        Ok(())
    }
}
