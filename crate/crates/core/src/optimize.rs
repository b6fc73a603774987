//! CGPO and GRPO trainers, the interleaved RL/SFT schedule, and the
//! reward/confidence response-type analysis.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{score_response, World};
use crate::error::{Error, Result};
use crate::policy::{TabularPolicy, Trajectory};

pub const DEFAULT_CLIP_EPSILON: f64 = 0.2;
pub const DEFAULT_KL_BETA: f64 = 0.04;
pub const DEFAULT_SCHEDULE: &str = "RRRSS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Cgpo,
    Grpo,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cgpo => "cgpo",
            Self::Grpo => "grpo",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cgpo" => Ok(Self::Cgpo),
            "grpo" => Ok(Self::Grpo),
            other => Err(Error::Config(format!("unknown algorithm {other:?} (expected cgpo or grpo)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "R")]
    Rl,
    #[serde(rename = "S")]
    Sft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub algorithm: Algorithm,
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub schedule: String,
    pub lr_rl: f64,
    pub lr_sft: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Cgpo,
            group_size: 8,
            clip_epsilon: DEFAULT_CLIP_EPSILON,
            kl_beta: DEFAULT_KL_BETA,
            schedule: DEFAULT_SCHEDULE.to_string(),
            lr_rl: 0.05,
            lr_sft: 0.5,
            steps: 20_000,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !is_positive(self.clip_epsilon) {
            return fail("clip epsilon must be positive");
        }
        if self.kl_beta.is_nan() || self.kl_beta < 0.0 {
            return fail("kl_beta must be nonnegative");
        }
        if !is_positive(self.lr_rl) || !is_positive(self.lr_sft) {
            return fail("learning rates must be positive");
        }
        if self.algorithm == Algorithm::Grpo && self.group_size < 2 {
            return fail("grpo needs a group size of at least 2");
        }
        if self.schedule.is_empty() || !self.schedule.contains('R') {
            return fail("schedule must be nonempty and contain at least one R");
        }
        if let Some(c) = self.schedule.chars().find(|c| !matches!(c, 'R' | 'S')) {
            return Err(Error::Config(format!("schedule contains {c:?}; only R and S are allowed")));
        }
        Ok(())
    }
}

/// False for NaN as well as nonpositive values.
fn is_positive(x: f64) -> bool {
    x > 0.0
}

/// Signed calibration error `r − c`.
pub fn cgpo_advantage(r: f64, c: f64) -> f64 {
    r - c
}

/// Binary cross-entropy between a reward target and a confidence.
pub fn bce(r: f64, c: f64) -> f64 {
    -(r * c.ln() + (1.0 - r) * (1.0 - c).ln())
}

/// `−∂BCE(r, c)/∂c = (r − c) / (c (1 − c))`.
pub fn bce_gradient_check(r: f64, c: f64) -> Result<f64> {
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence {c} must lie strictly inside (0, 1)")));
    }
    Ok((r - c) / (c * (1.0 - c)))
}

/// Group-normalized advantages with the population standard deviation;
/// a zero-variance group gets all-zero advantages.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "group of {} rewards; at least 2 required",
            rewards.len()
        )));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / sd).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub objective: f64,
    /// `∂objective/∂log π(token_t)` for each position.
    pub weights: Vec<f64>,
    pub clipped_fraction: f64,
}

/// Token-averaged clipped surrogate `(1/T) Σ_t min(ρ_t A, clip(ρ_t, 1−ε, 1+ε) A)`.
///
/// Gradient weights are nonzero only where the unclipped branch is active.
pub fn clipped_surrogate(old_probs: &[f64], new_probs: &[f64], advantage: f64, epsilon: f64) -> Result<Surrogate> {
    if old_probs.len() != new_probs.len() {
        return Err(Error::LengthMismatch {
            left: old_probs.len(),
            right: new_probs.len(),
        });
    }
    if old_probs.is_empty() {
        return Err(Error::Empty("trajectory has no tokens"));
    }
    if !is_positive(epsilon) {
        return Err(Error::InvalidArgument("clip epsilon must be positive".into()));
    }
    if old_probs.iter().any(|&p| p <= 0.0) {
        return Err(Error::InvalidArgument("old probability must be positive".into()));
    }
    let t = old_probs.len() as f64;
    let a = advantage;
    let mut objective = 0.0;
    let mut clipped = 0usize;
    let mut weights = Vec::with_capacity(old_probs.len());
    for (&old, &new) in old_probs.iter().zip(new_probs) {
        let rho = new / old;
        let is_clipped = (a > 0.0 && rho > 1.0 + epsilon) || (a < 0.0 && rho < 1.0 - epsilon);
        if is_clipped {
            clipped += 1;
            objective += rho.clamp(1.0 - epsilon, 1.0 + epsilon) * a;
            weights.push(0.0);
        } else {
            objective += rho * a;
            weights.push(rho * a / t);
        }
    }
    Ok(Surrogate {
        objective: objective / t,
        weights,
        clipped_fraction: clipped as f64 / t,
    })
}

/// Surrogate value and logit-block gradient for a trajectory under `policy`.
pub fn surrogate_gradient(
    policy: &TabularPolicy,
    traj: &Trajectory,
    advantage: f64,
    epsilon: f64,
) -> Result<(Surrogate, Vec<f64>)> {
    let new_probs = policy.token_probs(traj.prompt, &traj.tokens)?;
    let s = clipped_surrogate(&traj.probs, &new_probs, advantage, epsilon)?;
    let grad = policy.weighted_logprob_gradient(traj.prompt, &traj.tokens, &s.weights)?;
    Ok((s, grad))
}

/// Phase of a 1-based step under a repeating R/S pattern.
pub fn isr_phase(step: usize, schedule: &str) -> Phase {
    let bytes = schedule.as_bytes();
    assert!(!bytes.is_empty() && step >= 1, "isr_phase needs a nonempty schedule and a 1-based step");
    match bytes[(step - 1) % bytes.len()] {
        b'S' => Phase::Sft,
        _ => Phase::Rl,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub prompt: usize,
    /// Reward of the sampled trace (group mean for GRPO); absent on SFT steps.
    pub reward: Option<f64>,
    pub confidence: Option<f64>,
    /// CGPO advantage, or the mean |A| of the group for GRPO.
    pub advantage: Option<f64>,
    pub clipped_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub algorithm: Algorithm,
    pub steps: usize,
    pub rl_steps: usize,
    pub sft_steps: usize,
    pub traces: usize,
    pub reward_evaluations: usize,
    /// Mean reward over the last 100 RL steps.
    pub final_mean_reward: Option<f64>,
}

/// Wall-clock measurements, kept apart from the deterministic report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_ms: f64,
    pub mean_step_ms: f64,
    pub mean_rl_step_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub records: Vec<StepRecord>,
    pub summary: TrainingSummary,
    pub timing: Timing,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ReportLine<'a> {
    Step(&'a StepRecord),
    Summary(&'a TrainingSummary),
}

pub(crate) fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn round_opt(x: Option<f64>) -> Option<f64> {
    x.map(round6)
}

impl TrainingReport {
    /// One JSON line per step followed by the summary line. Timing is not
    /// included, so identical runs produce identical text.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let r = StepRecord {
                reward: round_opt(r.reward),
                confidence: round_opt(r.confidence),
                advantage: round_opt(r.advantage),
                clipped_fraction: round_opt(r.clipped_fraction),
                ..r.clone()
            };
            out += &serde_json::to_string(&ReportLine::Step(&r)).expect("record serializes");
            out.push('\n');
        }
        let s = TrainingSummary {
            final_mean_reward: round_opt(self.summary.final_mean_reward),
            ..self.summary.clone()
        };
        out += &serde_json::to_string(&ReportLine::Summary(&s)).expect("summary serializes");
        out.push('\n');
        out
    }
}

fn check_compatible(world: &World, policy: &TabularPolicy) -> Result<()> {
    if policy.vocab() != &world.vocab {
        return Err(Error::Config("policy and world vocabularies differ".into()));
    }
    if policy.prompts() != world.episodes.len() {
        return Err(Error::Config(format!(
            "policy has {} prompts but the world has {} episodes",
            policy.prompts(),
            world.episodes.len()
        )));
    }
    Ok(())
}

fn sample_scored<R: Rng>(world: &World, policy: &TabularPolicy, prompt: usize, rng: &mut R) -> Result<Trajectory> {
    let mut traj = policy.sample(prompt, rng)?;
    traj.reward = score_response(world, world.episode(prompt)?, &traj.decoded).r_total;
    Ok(traj)
}

/// Runs `config.steps` updates on `policy` in place.
pub fn train(config: &TrainerConfig, world: &World, policy: &mut TabularPolicy) -> Result<TrainingReport> {
    config.validate()?;
    check_compatible(world, policy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let reference = policy.clone();
    let episodes = world.episodes.len();

    let mut records = Vec::with_capacity(config.steps);
    let (mut traces, mut rl_steps, mut sft_steps) = (0usize, 0usize, 0usize);
    let mut rl_time = 0.0;
    let started = Instant::now();

    for step in 1..=config.steps {
        let prompt = rng.gen_range(0..episodes);
        let phase = match config.algorithm {
            Algorithm::Cgpo => isr_phase(step, &config.schedule),
            Algorithm::Grpo => Phase::Rl,
        };
        let t0 = Instant::now();
        let record = match (config.algorithm, phase) {
            (_, Phase::Sft) => {
                policy.sft_step(prompt, &world.episodes[prompt].golden_tokens, config.lr_sft)?;
                sft_steps += 1;
                StepRecord {
                    step,
                    phase,
                    prompt,
                    reward: None,
                    confidence: None,
                    advantage: None,
                    clipped_fraction: None,
                }
            }
            (Algorithm::Cgpo, Phase::Rl) => {
                let traj = sample_scored(world, policy, prompt, &mut rng)?;
                traces += 1;
                let a = cgpo_advantage(traj.reward, traj.confidence);
                let (s, grad) = surrogate_gradient(policy, &traj, a, config.clip_epsilon)?;
                policy.apply_gradient(prompt, &grad, config.lr_rl)?;
                StepRecord {
                    step,
                    phase,
                    prompt,
                    reward: Some(traj.reward),
                    confidence: Some(traj.confidence),
                    advantage: Some(a),
                    clipped_fraction: Some(s.clipped_fraction),
                }
            }
            (Algorithm::Grpo, Phase::Rl) => {
                let g = config.group_size;
                let group = (0..g)
                    .map(|_| sample_scored(world, policy, prompt, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                traces += g;
                let rewards: Vec<f64> = group.iter().map(|t| t.reward).collect();
                let adv = grpo_advantages(&rewards)?;
                let mut grad = policy.kl_gradient(&reference, prompt)?;
                for x in grad.iter_mut() {
                    *x *= -config.kl_beta;
                }
                let mut clipped = 0.0;
                for (traj, &a) in group.iter().zip(&adv) {
                    let (s, gr) = surrogate_gradient(policy, traj, a, config.clip_epsilon)?;
                    clipped += s.clipped_fraction;
                    for (x, y) in grad.iter_mut().zip(&gr) {
                        *x += y / g as f64;
                    }
                }
                policy.apply_gradient(prompt, &grad, config.lr_rl)?;
                let n = g as f64;
                StepRecord {
                    step,
                    phase,
                    prompt,
                    reward: Some(rewards.iter().sum::<f64>() / n),
                    confidence: Some(group.iter().map(|t| t.confidence).sum::<f64>() / n),
                    advantage: Some(adv.iter().map(|a| a.abs()).sum::<f64>() / n),
                    clipped_fraction: Some(clipped / n),
                }
            }
        };
        if phase == Phase::Rl {
            rl_steps += 1;
            rl_time += t0.elapsed().as_secs_f64() * 1e3;
        }
        records.push(record);
    }

    let total_ms = started.elapsed().as_secs_f64() * 1e3;
    let rl_rewards: Vec<f64> = records.iter().filter_map(|r| r.reward).collect();
    let tail = &rl_rewards[rl_rewards.len().saturating_sub(100)..];
    let final_mean_reward = (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64);
    let per = |t: f64, n: usize| if n == 0 { 0.0 } else { t / n as f64 };
    Ok(TrainingReport {
        records,
        summary: TrainingSummary {
            algorithm: config.algorithm,
            steps: config.steps,
            rl_steps,
            sft_steps,
            traces,
            reward_evaluations: traces,
            final_mean_reward,
        },
        timing: Timing {
            total_ms,
            mean_step_ms: per(total_ms, config.steps),
            mean_rl_step_ms: per(rl_time, rl_steps),
        },
    })
}

/// Ranks (1-based, ties averaged) mapped linearly onto [−1, 1].
pub fn rank_normalize(values: &[f64]) -> Result<Vec<f64>> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("rank normalization needs at least 2 values, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j share the mean of ranks i+1..=j+1
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    Ok(ranks.into_iter().map(|k| 2.0 * (k - 1.0) / (n - 1) as f64 - 1.0).collect())
}

/// Linearly interpolated percentile of unsorted data (`p` in [0, 100]).
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("percentile of no values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quadrant {
    HrHc,
    HrLc,
    LrHc,
    LrLc,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::HrHc, Quadrant::HrLc, Quadrant::LrHc, Quadrant::LrLc];

    pub fn is_miscalibrated(self) -> bool {
        matches!(self, Quadrant::HrLc | Quadrant::LrHc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub samples: usize,
    pub r_low: f64,
    pub r_high: f64,
    pub c_low: f64,
    pub c_high: f64,
    pub hrhc_count: usize,
    pub hrlc_count: usize,
    pub lrhc_count: usize,
    pub lrlc_count: usize,
    pub hrhc_cgpo: Option<f64>,
    pub hrlc_cgpo: Option<f64>,
    pub lrhc_cgpo: Option<f64>,
    pub lrlc_cgpo: Option<f64>,
    pub hrhc_grpo: Option<f64>,
    pub hrlc_grpo: Option<f64>,
    pub lrhc_grpo: Option<f64>,
    pub lrlc_grpo: Option<f64>,
    /// Mean rank-normalized |A| over HrLc ∪ LrHc and over HrHc ∪ LrLc.
    pub cgpo_miscalibrated: Option<f64>,
    pub cgpo_calibrated: Option<f64>,
    pub grpo_miscalibrated: Option<f64>,
    pub grpo_calibrated: Option<f64>,
}

impl CategoryStats {
    pub fn count(&self, q: Quadrant) -> usize {
        match q {
            Quadrant::HrHc => self.hrhc_count,
            Quadrant::HrLc => self.hrlc_count,
            Quadrant::LrHc => self.lrhc_count,
            Quadrant::LrLc => self.lrlc_count,
        }
    }

    /// Copy with every real field rounded to 6 decimals.
    pub fn rounded(&self) -> Self {
        let o = round_opt;
        Self {
            r_low: round6(self.r_low),
            r_high: round6(self.r_high),
            c_low: round6(self.c_low),
            c_high: round6(self.c_high),
            hrhc_cgpo: o(self.hrhc_cgpo),
            hrlc_cgpo: o(self.hrlc_cgpo),
            lrhc_cgpo: o(self.lrhc_cgpo),
            lrlc_cgpo: o(self.lrlc_cgpo),
            hrhc_grpo: o(self.hrhc_grpo),
            hrlc_grpo: o(self.hrlc_grpo),
            lrhc_grpo: o(self.lrhc_grpo),
            lrlc_grpo: o(self.lrlc_grpo),
            cgpo_miscalibrated: o(self.cgpo_miscalibrated),
            cgpo_calibrated: o(self.cgpo_calibrated),
            grpo_miscalibrated: o(self.grpo_miscalibrated),
            grpo_calibrated: o(self.grpo_calibrated),
            ..self.clone()
        }
    }
}

/// Assigns a sample to a corner region; checked in the order HrHc, HrLc,
/// LrHc, LrLc so that degenerate thresholds still give one region.
pub fn quadrant(r: f64, c: f64, t: &CategoryStats) -> Option<Quadrant> {
    let (hr, lr) = (r >= t.r_high, r <= t.r_low);
    let (hc, lc) = (c >= t.c_high, c <= t.c_low);
    if hr && hc {
        Some(Quadrant::HrHc)
    } else if hr && lc {
        Some(Quadrant::HrLc)
    } else if lr && hc {
        Some(Quadrant::LrHc)
    } else if lr && lc {
        Some(Quadrant::LrLc)
    } else {
        None
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Joint reward/confidence regions with per-region mean rank-normalized |A|.
pub fn categorize_responses(samples: &[(f64, f64)], cgpo_adv: &[f64], grpo_adv: &[f64]) -> Result<CategoryStats> {
    let n = samples.len();
    if n < 10 {
        return Err(Error::InvalidArgument(format!("categorization needs at least 10 samples, got {n}")));
    }
    for len in [cgpo_adv.len(), grpo_adv.len()] {
        if len != n {
            return Err(Error::LengthMismatch { left: n, right: len });
        }
    }
    let rs: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let cs: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let cg = rank_normalize(&cgpo_adv.iter().map(|a| a.abs()).collect::<Vec<_>>())?;
    let gr = rank_normalize(&grpo_adv.iter().map(|a| a.abs()).collect::<Vec<_>>())?;
    let mut stats = CategoryStats {
        samples: n,
        r_low: percentile(&rs, 20.0)?,
        r_high: percentile(&rs, 80.0)?,
        c_low: percentile(&cs, 20.0)?,
        c_high: percentile(&cs, 80.0)?,
        hrhc_count: 0,
        hrlc_count: 0,
        lrhc_count: 0,
        lrlc_count: 0,
        hrhc_cgpo: None,
        hrlc_cgpo: None,
        lrhc_cgpo: None,
        lrlc_cgpo: None,
        hrhc_grpo: None,
        hrlc_grpo: None,
        lrhc_grpo: None,
        lrlc_grpo: None,
        cgpo_miscalibrated: None,
        cgpo_calibrated: None,
        grpo_miscalibrated: None,
        grpo_calibrated: None,
    };
    let regions: Vec<Option<Quadrant>> = samples.iter().map(|&(r, c)| quadrant(r, c, &stats)).collect();
    let pick = |q: Quadrant, adv: &[f64]| mean_of((0..n).filter(|&i| regions[i] == Some(q)).map(|i| adv[i]));
    let side = |mis: bool, adv: &[f64]| {
        mean_of((0..n).filter(|&i| regions[i].is_some_and(|q| q.is_miscalibrated() == mis)).map(|i| adv[i]))
    };
    let count = |q: Quadrant| regions.iter().filter(|&&r| r == Some(q)).count();
    stats.hrhc_count = count(Quadrant::HrHc);
    stats.hrlc_count = count(Quadrant::HrLc);
    stats.lrhc_count = count(Quadrant::LrHc);
    stats.lrlc_count = count(Quadrant::LrLc);
    stats.hrhc_cgpo = pick(Quadrant::HrHc, &cg);
    stats.hrlc_cgpo = pick(Quadrant::HrLc, &cg);
    stats.lrhc_cgpo = pick(Quadrant::LrHc, &cg);
    stats.lrlc_cgpo = pick(Quadrant::LrLc, &cg);
    stats.hrhc_grpo = pick(Quadrant::HrHc, &gr);
    stats.hrlc_grpo = pick(Quadrant::HrLc, &gr);
    stats.lrhc_grpo = pick(Quadrant::LrHc, &gr);
    stats.lrlc_grpo = pick(Quadrant::LrLc, &gr);
    stats.cgpo_miscalibrated = side(true, &cg);
    stats.cgpo_calibrated = side(false, &cg);
    stats.grpo_miscalibrated = side(true, &gr);
    stats.grpo_calibrated = side(false, &gr);
    Ok(stats)
}

/// A scored sample drawn for analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisSample {
    pub prompt: usize,
    pub reward: f64,
    pub confidence: f64,
    pub cgpo_advantage: f64,
    pub grpo_advantage: f64,
}

/// Draws `samples` responses in groups of `group_size` per prompt (prompts
/// visited round-robin) and scores them under both advantage rules.
pub fn sample_for_analysis<R: Rng>(
    world: &World,
    policy: &TabularPolicy,
    samples: usize,
    group_size: usize,
    rng: &mut R,
) -> Result<Vec<AnalysisSample>> {
    check_compatible(world, policy)?;
    if group_size < 2 {
        return Err(Error::InvalidArgument("group size must be at least 2".into()));
    }
    let mut out = Vec::with_capacity(samples + group_size);
    let mut prompt = 0;
    while out.len() < samples {
        let group = (0..group_size)
            .map(|_| sample_scored(world, policy, prompt, rng))
            .collect::<Result<Vec<_>>>()?;
        let adv = grpo_advantages(&group.iter().map(|t| t.reward).collect::<Vec<_>>())?;
        for (t, a) in group.iter().zip(adv) {
            out.push(AnalysisSample {
                prompt,
                reward: t.reward,
                confidence: t.confidence,
                cgpo_advantage: cgpo_advantage(t.reward, t.confidence),
                grpo_advantage: a,
            });
        }
        prompt = (prompt + 1) % world.episodes.len();
    }
    out.truncate(samples);
    Ok(out)
}

/// Samples a policy and categorizes the responses.
pub fn analyze<R: Rng>(
    world: &World,
    policy: &TabularPolicy,
    samples: usize,
    group_size: usize,
    rng: &mut R,
) -> Result<CategoryStats> {
    let s = sample_for_analysis(world, policy, samples, group_size, rng)?;
    let pairs: Vec<(f64, f64)> = s.iter().map(|x| (x.reward, x.confidence)).collect();
    let cg: Vec<f64> = s.iter().map(|x| x.cgpo_advantage).collect();
    let gr: Vec<f64> = s.iter().map(|x| x.grpo_advantage).collect();
    categorize_responses(&pairs, &cg, &gr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::WorldConfig;

    fn world() -> World {
        World::build(11, &WorldConfig::default()).unwrap()
    }

    fn fresh(w: &World) -> TabularPolicy {
        TabularPolicy::uniform(w.vocab.clone(), w.episodes.len(), w.config.max_len).unwrap()
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(cgpo_advantage(1.0, 1.0), 0.0);
        assert_eq!(cgpo_advantage(0.8, 0.3), 0.8 - 0.3);
        assert_eq!(cgpo_advantage(0.0, 1.0), -1.0);
        assert_eq!(grpo_advantages(&[1.0, 0.0]).unwrap(), vec![1.0, -1.0]);
        assert_eq!(grpo_advantages(&[1.0, 0.0, 0.0, 1.0]).unwrap(), vec![1.0, -1.0, -1.0, 1.0]);
        assert_eq!(grpo_advantages(&[0.7, 0.7, 0.7]).unwrap(), vec![0.0; 3]);
        assert!(grpo_advantages(&[0.7]).is_err());
    }

    #[test]
    fn grpo_shift_and_scale_invariance() {
        let base = [0.1, 0.4, 0.35, 0.9, 0.0];
        let a = grpo_advantages(&base).unwrap();
        let shifted: Vec<f64> = base.iter().map(|r| r + 3.0).collect();
        let scaled: Vec<f64> = base.iter().map(|r| r * 7.5).collect();
        for other in [grpo_advantages(&shifted).unwrap(), grpo_advantages(&scaled).unwrap()] {
            for (x, y) in a.iter().zip(&other) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bce_gradient_examples() {
        assert_eq!(bce_gradient_check(0.5, 0.5).unwrap(), 0.0);
        assert_eq!(bce_gradient_check(1.0, 0.5).unwrap(), 2.0);
        assert!(bce_gradient_check(0.5, 0.0).is_err());
        assert!(bce_gradient_check(0.5, 1.0).is_err());
    }

    #[test]
    fn surrogate_examples() {
        let old = [0.5, 0.25, 0.1];
        let s = clipped_surrogate(&old, &old, 0.7, 0.2).unwrap();
        assert!((s.objective - 0.7).abs() < 1e-15);
        assert!(s.weights.iter().all(|&w| (w - 0.7 / 3.0).abs() < 1e-15));
        assert_eq!(s.clipped_fraction, 0.0);

        let up: Vec<f64> = old.iter().map(|p| p * 1.4).collect();
        let s = clipped_surrogate(&old, &up, 0.5, 0.2).unwrap();
        assert!((s.objective - 1.2 * 0.5).abs() < 1e-12);
        assert!(s.weights.iter().all(|&w| w == 0.0));
        assert_eq!(s.clipped_fraction, 1.0);

        let down: Vec<f64> = old.iter().map(|p| p * 0.6).collect();
        let s = clipped_surrogate(&old, &down, -0.5, 0.2).unwrap();
        assert!((s.objective - 0.8 * -0.5).abs() < 1e-12);
        assert!(s.weights.iter().all(|&w| w == 0.0));

        // the min keeps the unclipped branch on the other side
        let s = clipped_surrogate(&old, &down, 0.5, 0.2).unwrap();
        assert!((s.objective - 0.6 * 0.5).abs() < 1e-12);
        assert_eq!(s.clipped_fraction, 0.0);
        assert!(clipped_surrogate(&old, &old[..2], 0.5, 0.2).is_err());
        assert!(clipped_surrogate(&old, &old, 0.5, 0.0).is_err());
    }

    #[test]
    fn isr_examples() {
        let phases: Vec<Phase> = (1..=5).map(|s| isr_phase(s, "RRRSS")).collect();
        assert_eq!(phases, [Phase::Rl, Phase::Rl, Phase::Rl, Phase::Sft, Phase::Sft]);
        assert_eq!(isr_phase(10, "RRRRS"), Phase::Sft);
        assert!((1..50).all(|s| isr_phase(s, "R") == Phase::Rl));
    }

    #[test]
    fn config_validation() {
        assert!(TrainerConfig::default().validate().is_ok());
        let bad = [
            TrainerConfig { clip_epsilon: 0.0, ..Default::default() },
            TrainerConfig { schedule: String::new(), ..Default::default() },
            TrainerConfig { schedule: "SS".into(), ..Default::default() },
            TrainerConfig { schedule: "RXS".into(), ..Default::default() },
            TrainerConfig { algorithm: Algorithm::Grpo, group_size: 1, ..Default::default() },
            TrainerConfig { lr_rl: 0.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        assert_eq!("grpo".parse::<Algorithm>().unwrap(), Algorithm::Grpo);
        assert!("ppo".parse::<Algorithm>().is_err());
    }

    #[test]
    fn zero_steps_leave_policy_unchanged() {
        let w = world();
        let mut p = fresh(&w);
        let before = p.clone();
        let cfg = TrainerConfig { steps: 0, ..Default::default() };
        let report = train(&cfg, &w, &mut p).unwrap();
        assert!(report.records.is_empty());
        assert_eq!(report.summary.traces, 0);
        assert_eq!(report.summary.final_mean_reward, None);
        assert_eq!(p, before);
    }

    #[test]
    fn schedule_bookkeeping_and_traces() {
        let w = world();
        let cfg = TrainerConfig { steps: 5, ..Default::default() };
        let report = train(&cfg, &w, &mut fresh(&w)).unwrap();
        let phases: Vec<Phase> = report.records.iter().map(|r| r.phase).collect();
        assert_eq!(phases, [Phase::Rl, Phase::Rl, Phase::Rl, Phase::Sft, Phase::Sft]);
        assert_eq!(report.summary.traces, 3);

        let grpo = TrainerConfig { steps: 5, algorithm: Algorithm::Grpo, ..Default::default() };
        assert_eq!(train(&grpo, &w, &mut fresh(&w)).unwrap().summary.traces, 40);
        let all_r = TrainerConfig { steps: 5, schedule: "R".into(), ..Default::default() };
        assert_eq!(train(&all_r, &w, &mut fresh(&w)).unwrap().summary.traces, 5);
    }

    #[test]
    fn training_is_deterministic() {
        let w = world();
        for algorithm in [Algorithm::Cgpo, Algorithm::Grpo] {
            let cfg = TrainerConfig { steps: 200, algorithm, seed: 3, ..Default::default() };
            let (mut a, mut b) = (fresh(&w), fresh(&w));
            let ra = train(&cfg, &w, &mut a).unwrap();
            let rb = train(&cfg, &w, &mut b).unwrap();
            assert_eq!(ra.to_jsonl(), rb.to_jsonl());
            assert_eq!(ra.records, rb.records);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn cgpo_advantages_are_bounded() {
        let w = world();
        let cfg = TrainerConfig { steps: 300, ..Default::default() };
        let report = train(&cfg, &w, &mut fresh(&w)).unwrap();
        for r in &report.records {
            if let (Some(rw), Some(c), Some(a)) = (r.reward, r.confidence, r.advantage) {
                assert_eq!(a, rw - c);
                assert!((-1.0..=1.0).contains(&a));
            }
        }
    }

    #[test]
    fn report_lines() {
        let w = world();
        let cfg = TrainerConfig { steps: 5, ..Default::default() };
        let text = train(&cfg, &w, &mut fresh(&w)).unwrap().to_jsonl();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0]["kind"], "step");
        assert_eq!(lines[3]["phase"], "S");
        assert!(lines[3]["reward"].is_null());
        assert_eq!(lines[5]["kind"], "summary");
        assert_eq!(lines[5]["traces"], 3);
        assert!(!text.contains("_ms"));
    }

    #[test]
    fn rank_normalize_examples() {
        assert_eq!(rank_normalize(&[3.0, 1.0, 2.0]).unwrap(), vec![1.0, -1.0, 0.0]);
        assert_eq!(rank_normalize(&[5.0, 5.0]).unwrap(), vec![0.0, 0.0]);
        let mono = rank_normalize(&[0.1, 0.2, 0.5, 0.9, 4.0]).unwrap();
        assert_eq!(mono.first(), Some(&-1.0));
        assert_eq!(mono.last(), Some(&1.0));
        assert!(mono.windows(2).all(|w| w[0] < w[1]));
        assert!(rank_normalize(&[1.0]).is_err());
    }

    #[test]
    fn percentile_matches_linear_interpolation() {
        let v = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(percentile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 5.0);
        assert_eq!(percentile(&v, 50.0).unwrap(), 3.0);
        // numpy.percentile([1,2,3,4,5], 20) == 1.8
        assert!((percentile(&v, 20.0).unwrap() - 1.8).abs() < 1e-15);
    }

    fn corner_set() -> Vec<(f64, f64)> {
        vec![
            (0.9, 0.9),
            (0.9, 0.9),
            (0.9, 0.1),
            (0.9, 0.1),
            (0.1, 0.9),
            (0.1, 0.9),
            (0.1, 0.1),
            (0.1, 0.1),
            (0.5, 0.5),
            (0.5, 0.5),
        ]
    }

    #[test]
    fn categorize_corner_set() {
        let s = corner_set();
        let cg: Vec<f64> = s.iter().map(|&(r, c)| r - c).collect();
        let gr = vec![0.0; s.len()];
        let stats = categorize_responses(&s, &cg, &gr).unwrap();
        assert_eq!((stats.r_low, stats.r_high, stats.c_low, stats.c_high), (0.1, 0.9, 0.1, 0.9));
        let counts: Vec<usize> = Quadrant::ALL.iter().map(|&q| stats.count(q)).collect();
        assert_eq!(counts, [2, 2, 2, 2]);
        assert!(stats.cgpo_miscalibrated.unwrap() > stats.cgpo_calibrated.unwrap());
        assert_eq!(stats.grpo_calibrated, Some(0.0));
        assert!(categorize_responses(&s[..9], &cg[..9], &gr[..9]).is_err());
    }

    #[test]
    fn calibrated_samples_have_zero_means() {
        let s: Vec<(f64, f64)> = (0..20).map(|i| (i as f64 / 19.0, i as f64 / 19.0)).collect();
        let cg: Vec<f64> = s.iter().map(|&(r, c)| cgpo_advantage(r, c)).collect();
        assert!(cg.iter().all(|&a| a == 0.0));
        let stats = categorize_responses(&s, &cg, &cg).unwrap();
        for m in [stats.hrhc_cgpo, stats.lrlc_cgpo] {
            assert_eq!(m, Some(0.0));
        }
    }

    #[test]
    fn untrained_policy_is_low_reward_low_confidence() {
        let w = world();
        let p = fresh(&w);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = sample_for_analysis(&w, &p, 200, 8, &mut rng).unwrap();
        assert_eq!(s.len(), 200);
        let v = w.vocab.len() as f64;
        for x in &s {
            assert!((x.confidence - 1.0 / v).abs() < 1e-12);
            assert!(x.reward < 0.5);
        }
        let stats = analyze(&w, &p, 200, 8, &mut rng).unwrap();
        let total: usize = Quadrant::ALL.iter().map(|&q| stats.count(q)).sum();
        assert!(total <= 200);
    }
}
