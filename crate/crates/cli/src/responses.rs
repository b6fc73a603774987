//! Response files: one JSON object per line, `{"id", "task", "response"}`,
//! with an optional `"episode"` naming the world episode (defaults to `id`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Duration;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use saliency_core::environment::{score_response, EpisodeSpec, World};
use saliency_core::interface::{format_reward, parse_response, serialize_expressions, ExpressionRecord, TaskKind};
use saliency_core::raster::BinaryMask;
use saliency_core::reward::{correctness, total_reward, RewardBreakdown};

use crate::adapter::{self, SegmenterRequest};
use crate::toy::load_config;
use crate::{round6, write_atomic, write_json, Common};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub id: String,
    pub task: TaskKind,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    /// 1-based line number.
    pub number: usize,
    pub record: Result<ResponseRecord, String>,
}

pub fn read_lines(path: &Path) -> Result<Vec<Line>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| Line {
            number: i + 1,
            record: serde_json::from_str(l).map_err(|e| format!("unreadable record: {e}")),
        })
        .collect())
}

/// Episode named by the record (`ep{N}`), checked against the record's task.
pub fn resolve_episode<'w>(world: &'w World, rec: &ResponseRecord) -> Result<&'w EpisodeSpec, String> {
    let name = rec.episode.as_deref().unwrap_or(&rec.id);
    let prompt: usize = name
        .strip_prefix("ep")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| format!("cannot resolve episode from {name:?} (expected ep<N>)"))?;
    let ep = world.episode(prompt).map_err(|e| e.to_string())?;
    if ep.task != rec.task {
        return Err(format!("task mismatch: record says {}, episode {} is {}", rec.task, ep.id(), ep.task));
    }
    Ok(ep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardLine {
    pub line: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<RewardBreakdown>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn rounded(b: RewardBreakdown) -> RewardBreakdown {
    RewardBreakdown {
        r_corr: round6(b.r_corr),
        r_fmt: round6(b.r_fmt),
        lambda: b.lambda,
        r_total: round6(b.r_total),
    }
}

/// Segmenter requests for every expression of every scorable line, one per
/// group image.
pub fn build_requests(world: &World, lines: &[Line]) -> Vec<SegmenterRequest> {
    let mut out = Vec::new();
    for line in lines {
        let Ok(rec) = &line.record else { continue };
        let Ok(ep) = resolve_episode(world, rec) else { continue };
        let Ok(resp) = parse_response(&rec.response) else { continue };
        let (w, h) = world.lexicon.dims();
        for (e, expr) in resp.expressions.iter().enumerate() {
            for k in 0..ep.gt.image_count() {
                out.push(SegmenterRequest {
                    id: format!("l{}_e{e}_k{k}", line.number),
                    response: rec.id.clone(),
                    image: format!("world:{}/{}/{k}", world.seed, ep.id()),
                    text: expr.text.clone(),
                    kind: expr.kind,
                    width: w,
                    height: h,
                });
            }
        }
    }
    out
}

fn score_with_masks(ep: &EpisodeSpec, line: usize, raw: &str, masks: &BTreeMap<String, BinaryMask>) -> Result<RewardBreakdown, String> {
    let verdict = format_reward(raw, ep.task);
    let r_corr = match parse_response(raw) {
        Err(_) => 0.0,
        Ok(resp) => {
            let segments: Vec<Vec<BinaryMask>> = (0..resp.expressions.len())
                .map(|e| {
                    (0..ep.gt.image_count())
                        .map(|k| {
                            let id = format!("l{line}_e{e}_k{k}");
                            masks.get(&id).cloned().ok_or_else(|| format!("no mask for {id}"))
                        })
                        .collect::<Result<Vec<_>, String>>()
                })
                .collect::<Result<_, String>>()?;
            correctness(&ep.gt, &segments).map_err(|e| e.to_string())?
        }
    };
    Ok(total_reward(r_corr, &verdict))
}

/// One output record per input line, in order.
pub fn reward_lines(world: &World, lines: &[Line], masks: Option<&BTreeMap<String, BinaryMask>>) -> Vec<RewardLine> {
    lines
        .iter()
        .map(|line| {
            let scored = line.record.clone().and_then(|rec| {
                let ep = resolve_episode(world, &rec)?;
                let b = match masks {
                    None => score_response(world, ep, &rec.response),
                    Some(m) => score_with_masks(ep, line.number, &rec.response, m)?,
                };
                Ok((rec.id, b))
            });
            match scored {
                Ok((id, b)) => RewardLine {
                    line: line.number,
                    id: Some(id),
                    breakdown: Some(rounded(b)),
                    error: None,
                },
                Err(e) => RewardLine {
                    line: line.number,
                    id: line.record.as_ref().ok().map(|r| r.id.clone()),
                    breakdown: None,
                    error: Some(e),
                },
            }
        })
        .collect()
}

pub fn reward(
    responses: &Path,
    config: Option<&Path>,
    adapter_dir: Option<&Path>,
    timeout_ms: u64,
    common: &Common,
) -> Result<()> {
    let world = load_config(config, common.seed)?.world()?;
    let lines = read_lines(responses)?;
    let masks = match adapter_dir {
        None => None,
        Some(dir) => {
            let requests = build_requests(&world, &lines);
            Some(adapter::roundtrip(dir, &requests, Duration::from_millis(timeout_ms))?)
        }
    };
    let out = reward_lines(&world, &lines, masks.as_ref());
    let mut text = String::new();
    for r in &out {
        if let Some(e) = &r.error {
            eprintln!("{}:{}: {e}", responses.display(), r.line);
        }
        text += &serde_json::to_string(r)?;
        text.push('\n');
    }
    let path = common.out.join("rewards.jsonl");
    write_atomic(&path, text.as_bytes())?;
    let errors = out.iter().filter(|r| r.error.is_some()).count();
    println!("{} records ({errors} with errors) -> {}", out.len(), path.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseLine {
    pub line: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub valid: bool,
    pub r_struct: f64,
    pub r_tag: f64,
    pub expressions: Vec<ExpressionRecord>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseSummary {
    pub lines: usize,
    pub valid: usize,
    pub invalid: usize,
    pub diagnostics: BTreeMap<String, usize>,
}

pub fn parse_lines(lines: &[Line], task: TaskKind) -> (Vec<ParseLine>, ParseSummary) {
    let mut summary = ParseSummary::default();
    let mut out = Vec::with_capacity(lines.len());
    for line in lines {
        let mut rec_out = ParseLine {
            line: line.number,
            id: None,
            valid: false,
            r_struct: 0.0,
            r_tag: 0.0,
            expressions: Vec::new(),
            diagnostics: Vec::new(),
        };
        match &line.record {
            Err(_) => rec_out.diagnostics.push("unreadable_line".into()),
            Ok(rec) => {
                rec_out.id = Some(rec.id.clone());
                let v = format_reward(&rec.response, task);
                rec_out.r_struct = v.r_struct;
                rec_out.r_tag = v.r_tag;
                rec_out.diagnostics = v.diagnostics.iter().map(|d| d.code().to_string()).collect();
                if rec.task != task {
                    rec_out.diagnostics.push("task_mismatch".into());
                }
                rec_out.valid = rec_out.diagnostics.is_empty();
                if rec_out.valid {
                    if let Ok(resp) = parse_response(&rec.response) {
                        rec_out.expressions = serialize_expressions(&resp, task, &rec.id).unwrap_or_default();
                    }
                }
            }
        }
        summary.lines += 1;
        if rec_out.valid {
            summary.valid += 1;
        } else {
            summary.invalid += 1;
        }
        for d in &rec_out.diagnostics {
            *summary.diagnostics.entry(d.clone()).or_default() += 1;
        }
        out.push(rec_out);
    }
    (out, summary)
}

pub fn parse(responses: &Path, task: TaskKind, common: &Common) -> Result<()> {
    let lines = read_lines(responses)?;
    let (records, summary) = parse_lines(&lines, task);
    let mut text = String::new();
    for r in &records {
        text += &serde_json::to_string(r)?;
        text.push('\n');
    }
    write_atomic(&common.out.join("expressions.jsonl"), text.as_bytes())?;
    write_json(&common.out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}
