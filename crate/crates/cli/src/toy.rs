//! Toy-world commands: training, checkpoint analysis and world dumps.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use saliency_core::environment::{World, WorldConfig};
use saliency_core::optimize::{self, Algorithm, TrainerConfig};
use saliency_core::policy::TabularPolicy;

use crate::{write_atomic, write_json, Common};

/// Flat key/value configuration shared by the toy commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub steps: usize,
    #[serde(rename = "G")]
    pub group_size: usize,
    pub epsilon: f64,
    pub kl_beta: f64,
    pub schedule: String,
    pub lr_rl: f64,
    pub lr_sft: f64,
    pub grid: usize,
    pub entries: usize,
    #[serde(rename = "K")]
    pub images_per_group: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        let t = TrainerConfig::default();
        let w = WorldConfig::default();
        Self {
            algorithm: t.algorithm,
            seed: t.seed,
            steps: t.steps,
            group_size: t.group_size,
            epsilon: t.clip_epsilon,
            kl_beta: t.kl_beta,
            schedule: t.schedule,
            lr_rl: t.lr_rl,
            lr_sft: t.lr_sft,
            grid: w.grid,
            entries: w.entries,
            images_per_group: w.group_size,
        }
    }
}

impl ToyConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }

    pub fn trainer(&self) -> TrainerConfig {
        TrainerConfig {
            algorithm: self.algorithm,
            group_size: self.group_size,
            clip_epsilon: self.epsilon,
            kl_beta: self.kl_beta,
            schedule: self.schedule.clone(),
            lr_rl: self.lr_rl,
            lr_sft: self.lr_sft,
            steps: self.steps,
            seed: self.seed,
        }
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            grid: self.grid,
            entries: self.entries,
            group_size: self.images_per_group,
            ..WorldConfig::default()
        }
    }

    pub fn world(&self) -> Result<World> {
        Ok(World::build(self.seed, &self.world_config())?)
    }
}

/// Loads the config and applies a `--seed` override.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ToyConfig> {
    let mut cfg = ToyConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn train(config: Option<&Path>, common: &Common) -> Result<()> {
    let cfg = load_config(config, common.seed)?;
    let trainer = cfg.trainer();
    trainer.validate()?;
    let world = cfg.world()?;
    let mut policy = TabularPolicy::uniform(world.vocab.clone(), world.episodes.len(), world.config.max_len)?;
    let report = optimize::train(&trainer, &world, &mut policy)?;

    let out = &common.out;
    write_atomic(&out.join("report.jsonl"), report.to_jsonl().as_bytes())?;
    write_atomic(&out.join("policy.ckpt"), policy.to_checkpoint().as_bytes())?;
    write_json(&out.join("timing.json"), &report.timing)?;

    let s = &report.summary;
    println!(
        "{} steps={} rl_steps={} sft_steps={} traces={} reward_evaluations={}",
        s.algorithm, s.steps, s.rl_steps, s.sft_steps, s.traces, s.reward_evaluations
    );
    match s.final_mean_reward {
        Some(r) => println!("final_mean_reward={r:.6}"),
        None => println!("final_mean_reward=n/a"),
    }
    println!(
        "mean_step_ms={:.6} mean_rl_step_ms={:.6}",
        report.timing.mean_step_ms, report.timing.mean_rl_step_ms
    );
    println!("wrote {}", out.display());
    Ok(())
}

pub fn analyze(checkpoint: &Path, config: Option<&Path>, samples: usize, common: &Common) -> Result<()> {
    if samples < 100 {
        bail!("analysis needs at least 100 samples, got {samples}");
    }
    let cfg = ToyConfig::load(config)?;
    let world = cfg.world()?;
    let policy = TabularPolicy::load(checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(common.seed.unwrap_or(0));
    let stats = optimize::analyze(&world, &policy, samples, cfg.group_size.max(2), &mut rng)?.rounded();
    write_json(&common.out.join("categories.json"), &stats)?;
    println!(
        "thresholds r=[{:.6}, {:.6}] c=[{:.6}, {:.6}]",
        stats.r_low, stats.r_high, stats.c_low, stats.c_high
    );
    println!(
        "HrHc={} HrLc={} LrHc={} LrLc={} (of {})",
        stats.hrhc_count, stats.hrlc_count, stats.lrhc_count, stats.lrlc_count, stats.samples
    );
    let show = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.6}"));
    println!(
        "cgpo |A| off-diagonal={} diagonal={}; grpo |A| off-diagonal={} diagonal={}",
        show(stats.cgpo_miscalibrated),
        show(stats.cgpo_calibrated),
        show(stats.grpo_miscalibrated),
        show(stats.grpo_calibrated)
    );
    Ok(())
}

pub fn dump_world(config: Option<&Path>, common: &Common) -> Result<()> {
    let cfg = load_config(config, common.seed)?;
    let world = cfg.world()?;
    world.dump(&common.out)?;
    println!(
        "world seed {}: {} entries, {} episodes -> {}",
        world.seed,
        world.lexicon.entries.len(),
        world.episodes.len(),
        common.out.display()
    );
    Ok(())
}
