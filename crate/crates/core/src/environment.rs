//! A synthetic saliency token world.
//!
//! Each lexicon entry is a content token bound to a rectangle mask. Episodes
//! pick entries for a task, build the ground truth from their masks and carry
//! a golden response whose reward is exactly 1. The oracle segmenter maps an
//! expression's text back to its entry mask.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interface::{format_reward, parse_response, ReferringExpression, TaskKind};
use crate::policy::{Vocabulary, DEFAULT_MAX_LEN, EOS};
use crate::raster::{iou, save_binary_mask, union, BinaryMask};
use crate::reward::{correctness, total_reward, GroundTruth, InstanceSet, RewardBreakdown};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    /// Side length of the square masks.
    pub grid: usize,
    pub entries: usize,
    pub episodes_per_task: usize,
    /// Images per co-salient group.
    pub group_size: usize,
    /// Upper bound on objects per SOD/SIS episode.
    pub max_objects: usize,
    pub max_len: usize,
    pub max_pair_iou: f64,
    pub rejection_budget: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            grid: 32,
            entries: 8,
            episodes_per_task: 4,
            group_size: 4,
            max_objects: 3,
            max_len: DEFAULT_MAX_LEN,
            max_pair_iou: 0.3,
            rejection_budget: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LexiconEntry {
    pub text: String,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub entries: Vec<LexiconEntry>,
    pub seed: u64,
}

impl Lexicon {
    pub fn texts(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.text.as_str()).collect()
    }

    pub fn get(&self, text: &str) -> Option<&LexiconEntry> {
        self.entries.iter().find(|e| e.text == text)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.entries[0].mask.dims()
    }
}

/// Exact text lookup (trimmed, semantic flag ignored); unknown text segments
/// to an all-zero mask.
pub fn oracle_segment(lexicon: &Lexicon, expression: &ReferringExpression) -> BinaryMask {
    match lexicon.get(expression.text.trim()) {
        Some(e) => e.mask.clone(),
        None => {
            let (w, h) = lexicon.dims();
            BinaryMask::zeros(w, h).expect("lexicon masks have positive dimensions")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSpec {
    pub prompt: usize,
    pub task: TaskKind,
    /// Lexicon indices of the salient objects, in canonical order.
    pub objects: Vec<usize>,
    pub gt: GroundTruth,
    pub golden_tokens: Vec<usize>,
}

impl EpisodeSpec {
    pub fn id(&self) -> String {
        format!("ep{}", self.prompt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub seed: u64,
    pub config: WorldConfig,
    pub lexicon: Lexicon,
    pub vocab: Vocabulary,
    pub episodes: Vec<EpisodeSpec>,
}

fn random_rect(rng: &mut ChaCha8Rng, grid: usize) -> Result<BinaryMask> {
    let lo = (grid / 8).max(1);
    let hi = (grid / 3).max(lo);
    let w = rng.gen_range(lo..=hi);
    let h = rng.gen_range(lo..=hi);
    let x0 = rng.gen_range(0..=grid - w);
    let y0 = rng.gen_range(0..=grid - h);
    BinaryMask::rect(grid, grid, x0, y0, x0 + w, y0 + h)
}

/// Canonical golden response text for a task and ordered object names.
pub fn golden_text(task: TaskKind, names: &[&str]) -> String {
    let think = names.join(" ");
    let answer: Vec<String> = match task {
        TaskKind::Sod => names.iter().map(|n| format!("<rg> {n} </rg>")).collect(),
        TaskKind::Sis => names.iter().map(|n| format!("<ins> {n} </ins>")).collect(),
        TaskKind::Cosod => vec![format!("<rg> [semantic] {} </rg>", names[0])],
    };
    format!("<think> {think} </think> <answer> {} </answer>", answer.join(" "))
}

impl World {
    pub fn build(seed: u64, config: &WorldConfig) -> Result<Self> {
        let c = config;
        if c.entries < 2 {
            return Err(Error::Config("world needs at least two lexicon entries".into()));
        }
        if c.grid < 4 || c.group_size == 0 || c.max_objects == 0 || c.episodes_per_task == 0 {
            return Err(Error::Config(
                "grid >= 4 and positive group_size, max_objects, episodes_per_task required".into(),
            ));
        }
        if c.max_objects > c.entries {
            return Err(Error::Config("max_objects exceeds entry count".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut masks: Vec<BinaryMask> = Vec::with_capacity(c.entries);
        let mut attempts = 0usize;
        while masks.len() < c.entries {
            attempts += 1;
            if attempts > c.rejection_budget {
                return Err(Error::Config(format!(
                    "rejection budget of {} exhausted after placing {} of {} entries",
                    c.rejection_budget,
                    masks.len(),
                    c.entries
                )));
            }
            let cand = random_rect(&mut rng, c.grid)?;
            let mut ok = true;
            for m in &masks {
                if iou(m, &cand)? > c.max_pair_iou || *m == cand {
                    ok = false;
                    break;
                }
            }
            if ok {
                masks.push(cand);
            }
        }
        let entries: Vec<LexiconEntry> = masks
            .into_iter()
            .enumerate()
            .map(|(i, mask)| LexiconEntry {
                text: format!("obj{i}"),
                mask,
            })
            .collect();
        let lexicon = Lexicon { entries, seed };
        let vocab = Vocabulary::with_content(&lexicon.texts())?;

        let mut episodes = Vec::new();
        let indices: Vec<usize> = (0..c.entries).collect();
        for task in TaskKind::ALL {
            for _ in 0..c.episodes_per_task {
                let count = match task {
                    TaskKind::Cosod => 1,
                    _ => rng.gen_range(1..=c.max_objects),
                };
                let mut objects: Vec<usize> = indices.choose_multiple(&mut rng, count).copied().collect();
                objects.sort_unstable();
                let obj_masks: Vec<BinaryMask> = objects.iter().map(|&i| lexicon.entries[i].mask.clone()).collect();
                let gt = match task {
                    TaskKind::Sod => GroundTruth::Sod(union(&obj_masks)?.to_gray()),
                    TaskKind::Sis => GroundTruth::Sis(InstanceSet::new((c.grid, c.grid), obj_masks)?),
                    TaskKind::Cosod => GroundTruth::Cosod(vec![obj_masks[0].to_gray(); c.group_size]),
                };
                let names: Vec<&str> = objects.iter().map(|&i| lexicon.entries[i].text.as_str()).collect();
                let mut golden_tokens = vocab.encode(&golden_text(task, &names))?;
                golden_tokens.push(vocab.eos());
                if golden_tokens.len() > c.max_len {
                    return Err(Error::Config(format!(
                        "golden sequence of {} tokens exceeds max_len {}",
                        golden_tokens.len(),
                        c.max_len
                    )));
                }
                episodes.push(EpisodeSpec {
                    prompt: episodes.len(),
                    task,
                    objects,
                    gt,
                    golden_tokens,
                });
            }
        }

        let world = Self {
            seed,
            config: c.clone(),
            lexicon,
            vocab,
            episodes,
        };
        for ep in &world.episodes {
            let text = world.vocab.decode(&ep.golden_tokens);
            let r = score_response(&world, ep, &text);
            if r.r_total != 1.0 {
                return Err(Error::Format(format!(
                    "golden response for {} scores {} instead of 1",
                    ep.id(),
                    r.r_total
                )));
            }
        }
        Ok(world)
    }

    pub fn episode(&self, prompt: usize) -> Result<&EpisodeSpec> {
        self.episodes
            .get(prompt)
            .ok_or_else(|| Error::InvalidArgument(format!("no episode for prompt {prompt}")))
    }

    pub fn golden_response(&self, prompt: usize) -> Result<String> {
        Ok(self.vocab.decode(&self.episode(prompt)?.golden_tokens))
    }

    /// Writes `manifest.json` and `masks/{entry}.pgm` under `dir`.
    pub fn dump(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let masks_dir = dir.join("masks");
        fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
        for e in &self.lexicon.entries {
            save_binary_mask(&e.mask, masks_dir.join(format!("{}.pgm", e.text)))?;
        }
        let manifest = WorldManifest {
            seed: self.seed,
            config: self.config.clone(),
            vocabulary: self.vocab.tokens().to_vec(),
            entries: self
                .lexicon
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    text: e.text.clone(),
                    mask: format!("masks/{}.pgm", e.text),
                    pixels: e.mask.count(),
                })
                .collect(),
            episodes: self
                .episodes
                .iter()
                .map(|ep| ManifestEpisode {
                    id: ep.id(),
                    prompt: ep.prompt,
                    task: ep.task,
                    objects: ep.objects.iter().map(|&i| self.lexicon.entries[i].text.clone()).collect(),
                    golden: self.vocab.decode(&ep.golden_tokens),
                })
                .collect(),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldManifest {
    pub seed: u64,
    pub config: WorldConfig,
    pub vocabulary: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    pub episodes: Vec<ManifestEpisode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub text: String,
    pub mask: String,
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEpisode {
    pub id: String,
    pub prompt: usize,
    pub task: TaskKind,
    pub objects: Vec<String>,
    pub golden: String,
}

/// Parse, segment with the oracle, and score a raw response for an episode.
///
/// A structural parse failure forces `r_corr = 0`; otherwise correctness is
/// computed on whatever expressions parsed cleanly, with every expression's
/// mask broadcast over the co-salient group.
pub fn score_response(world: &World, episode: &EpisodeSpec, raw: &str) -> RewardBreakdown {
    let verdict = format_reward(raw, episode.task);
    let r_corr = match parse_response(raw) {
        Err(_) => 0.0,
        Ok(resp) => {
            let slots = episode.gt.image_count();
            let segments: Vec<Vec<BinaryMask>> = resp
                .expressions
                .iter()
                .map(|e| vec![oracle_segment(&world.lexicon, e); slots])
                .collect();
            // the world is internally consistent, so shapes always agree
            correctness(&episode.gt, &segments).unwrap_or(0.0)
        }
    };
    total_reward(r_corr, &verdict)
}

/// Whether `token` is a content fragment (not structural, not end-of-sequence).
pub fn is_content_token(vocab: &Vocabulary, token: usize) -> bool {
    let t = vocab.token(token);
    t != EOS && !crate::policy::STRUCTURAL_TOKENS.contains(&t)
}
