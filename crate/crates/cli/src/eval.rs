//! Dataset evaluation over PGM directory layouts.
//!
//! SOD: `{pred,gt}/{id}.pgm`. SIS: `{pred,gt}/{id}/inst_{j}.pgm`. CoSOD:
//! `{pred,gt}/{group}/{k}.pgm`, averaged within each group and then across
//! groups.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use saliency_core::metrics::{average_precision, MetricReport, ScoredMask};
use saliency_core::raster::{load_binary_mask, load_mask, BinaryMask};
use saliency_core::reward::{iasm, InstanceSet};
use saliency_core::interface::TaskKind;

use crate::{round6, write_json, Common};

pub type Scores = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemScores {
    pub id: String,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub items: usize,
    pub summary: Scores,
    pub per_item: Vec<ItemScores>,
}

impl EvalReport {
    fn rounded(mut self) -> Self {
        let r = |s: &mut Scores| s.values_mut().for_each(|v| *v = round6(*v));
        r(&mut self.summary);
        self.per_item.iter_mut().for_each(|i| r(&mut i.scores));
        self
    }
}

fn map_scores(r: &MetricReport) -> Scores {
    Scores::from([
        ("S_m".to_string(), r.s_measure),
        ("E_xi".to_string(), r.e_measure),
        ("F_beta_max".to_string(), r.f_beta_max),
        ("MAE".to_string(), r.mae),
    ])
}

fn mean_scores<'a>(items: impl IntoIterator<Item = &'a Scores>) -> Scores {
    let mut sum = Scores::new();
    let mut n = 0usize;
    for s in items {
        n += 1;
        for (k, v) in s {
            *sum.entry(k.clone()).or_default() += v;
        }
    }
    sum.values_mut().for_each(|v| *v /= n as f64);
    sum
}

/// Sorted entries of `dir`, filtered by `keep`, as (stem or name, path).
fn listing(dir: &Path, keep: impl Fn(&Path) -> bool) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if !keep(&path) {
            continue;
        }
        let name = if path.is_dir() {
            path.file_name()
        } else {
            path.file_stem()
        };
        if let Some(name) = name.and_then(|n| n.to_str()) {
            out.push((name.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

fn is_pgm(p: &Path) -> bool {
    p.is_file() && p.extension().is_some_and(|e| e == "pgm")
}

/// Instance masks `inst_{j}.pgm` ordered by j.
fn instances(dir: &Path) -> Result<Vec<BinaryMask>> {
    let mut found = Vec::new();
    for (stem, path) in listing(dir, is_pgm)? {
        let j: usize = stem
            .strip_prefix("inst_")
            .and_then(|s| s.parse().ok())
            .with_context(|| format!("{}: expected inst_<index>.pgm", path.display()))?;
        found.push((j, path));
    }
    found.sort();
    found.into_iter().map(|(_, p)| Ok(load_binary_mask(&p)?)).collect()
}

fn sod_item(pred: &Path, gt: &Path) -> Result<Scores> {
    let p = load_mask(pred)?;
    let g = load_binary_mask(gt)?;
    Ok(map_scores(&MetricReport::for_maps(&p, &g)?))
}

fn sis_item(pred: &Path, gt: &Path) -> Result<Scores> {
    let gts = instances(gt)?;
    if gts.is_empty() {
        bail!("{}: no ground-truth instances", gt.display());
    }
    let preds = instances(pred)?;
    let dims = gts[0].dims();
    let pred_set = InstanceSet::new(dims, preds.clone())?;
    let gt_set = InstanceSet::new(dims, gts.clone())?;
    let scored: Vec<ScoredMask> = preds.into_iter().map(ScoredMask::unscored).collect();
    Ok(Scores::from([
        ("AP50".to_string(), average_precision(&scored, &gts, 0.5)?),
        ("AP70".to_string(), average_precision(&scored, &gts, 0.7)?),
        ("IASM".to_string(), iasm(&pred_set, &gt_set)?),
    ]))
}

fn cosod_item(pred: &Path, gt: &Path) -> Result<Scores> {
    let images = listing(gt, is_pgm)?;
    if images.is_empty() {
        bail!("{}: empty group", gt.display());
    }
    let mut per_image = Vec::new();
    let mut missing = Vec::new();
    for (k, g) in &images {
        let p = pred.join(format!("{k}.pgm"));
        if !p.is_file() {
            missing.push(k.clone());
            continue;
        }
        per_image.push(sod_item(&p, g)?);
    }
    if !missing.is_empty() {
        bail!("{}: missing images {}", pred.display(), missing.join(", "));
    }
    Ok(mean_scores(&per_image))
}

/// Evaluates every ground-truth item; all layout problems are collected and
/// reported together.
pub fn evaluate(pred_dir: &Path, gt_dir: &Path, task: TaskKind) -> Result<EvalReport> {
    let items = match task {
        TaskKind::Sod => listing(gt_dir, is_pgm)?,
        TaskKind::Sis | TaskKind::Cosod => listing(gt_dir, |p| p.is_dir())?,
    };
    if items.is_empty() {
        bail!("{}: no ground-truth items for {task}", gt_dir.display());
    }
    let mut missing = Vec::new();
    let mut problems = Vec::new();
    let mut per_item = Vec::new();
    for (id, gt) in &items {
        let pred = match task {
            TaskKind::Sod => pred_dir.join(format!("{id}.pgm")),
            _ => pred_dir.join(id),
        };
        if !pred.exists() {
            missing.push(id.clone());
            continue;
        }
        let scored = match task {
            TaskKind::Sod => sod_item(&pred, gt),
            TaskKind::Sis => sis_item(&pred, gt),
            TaskKind::Cosod => cosod_item(&pred, gt),
        };
        match scored {
            Ok(scores) => per_item.push(ItemScores { id: id.clone(), scores }),
            Err(e) => problems.push(format!("{id}: {e:#}")),
        }
    }
    if !missing.is_empty() {
        problems.insert(0, format!("missing predictions for ids: {}", missing.join(", ")));
    }
    if !problems.is_empty() {
        bail!("layout violations:\n  {}", problems.join("\n  "));
    }
    Ok(EvalReport {
        task,
        items: per_item.len(),
        summary: mean_scores(per_item.iter().map(|i| &i.scores)),
        per_item,
    })
}

pub fn run(pred: &Path, gt: &Path, task: TaskKind, common: &Common) -> Result<()> {
    let report = evaluate(pred, gt, task)?.rounded();
    let path = common.out.join("metrics.json");
    write_json(&path, &report)?;
    let line: Vec<String> = report.summary.iter().map(|(k, v)| format!("{k}={v:.6}")).collect();
    println!("{task}: {} items  {}", report.items, line.join("  "));
    println!("wrote {}", path.display());
    Ok(())
}
