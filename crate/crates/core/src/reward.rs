//! Task-adaptive correctness rewards and the total reward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interface::FormatVerdict;
use crate::metrics::{hungarian_max, s_measure};
use crate::raster::{ensure_same, iou, union, BinaryMask, GrayMask, INGEST_THRESHOLD};

/// Weight of the correctness term in the total reward.
pub const LAMBDA: f64 = 0.5;
/// Minimum IoU for a Hungarian pair to count as matched in IASM.
pub const IASM_TAU: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_corr: f64,
    pub r_fmt: f64,
    pub lambda: f64,
    pub r_total: f64,
}

/// A possibly empty set of same-sized instance masks.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSet {
    dims: (usize, usize),
    masks: Vec<BinaryMask>,
}

impl InstanceSet {
    pub fn new(dims: (usize, usize), masks: Vec<BinaryMask>) -> Result<Self> {
        if dims.0 == 0 || dims.1 == 0 {
            return Err(Error::InvalidArgument("instance set needs positive dimensions".into()));
        }
        for m in &masks {
            ensure_same(dims, m.dims())?;
        }
        Ok(Self { dims, masks })
    }

    pub fn empty(dims: (usize, usize)) -> Result<Self> {
        Self::new(dims, Vec::new())
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn masks(&self) -> &[BinaryMask] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// S-measure of the union of the per-expression masks.
pub fn correctness_sod(per_expression_masks: &[BinaryMask], gt: &GrayMask) -> Result<f64> {
    let merged = union(per_expression_masks)?;
    s_measure(&merged.to_gray(), &gt.binarize(INGEST_THRESHOLD))
}

/// Mean S-measure over a group of K images.
pub fn correctness_cosod(per_image_masks: &[BinaryMask], gts: &[GrayMask]) -> Result<f64> {
    if per_image_masks.len() != gts.len() {
        return Err(Error::LengthMismatch {
            left: per_image_masks.len(),
            right: gts.len(),
        });
    }
    if gts.is_empty() {
        return Err(Error::Empty("co-salient group"));
    }
    let mut sum = 0.0;
    for (m, g) in per_image_masks.iter().zip(gts) {
        sum += s_measure(&m.to_gray(), &g.binarize(INGEST_THRESHOLD))?;
    }
    Ok(sum / gts.len() as f64)
}

/// Instance-aligned S-measure.
///
/// Ground-truth and predicted instances are matched by maximum total IoU;
/// matched pairs with IoU below [`IASM_TAU`] are dropped afterwards. Every
/// unmatched instance on either side is paired with an all-zero mask, and the
/// result is the mean S-measure over all `I + M - |matched|` pairs.
pub fn iasm(pred: &InstanceSet, gt: &InstanceSet) -> Result<f64> {
    ensure_same(gt.dims(), pred.dims())?;
    if pred.is_empty() && gt.is_empty() {
        return Err(Error::Empty("both instance sets (aligned pair count would be zero)"));
    }
    let (w, h) = gt.dims();
    let zero = BinaryMask::zeros(w, h)?;

    let mut retained = Vec::new();
    if !pred.is_empty() && !gt.is_empty() {
        let mut overlap = Vec::with_capacity(gt.len());
        for g in gt.masks() {
            overlap.push(pred.masks().iter().map(|m| iou(g, m)).collect::<Result<Vec<_>>>()?);
        }
        let assignment = hungarian_max(&overlap)?;
        retained = assignment
            .pairs
            .into_iter()
            .filter(|&(i, j)| overlap[i][j] >= IASM_TAU)
            .collect();
    }

    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut sum = 0.0;
    for &(i, j) in &retained {
        gt_used[i] = true;
        pred_used[j] = true;
        sum += s_measure(&pred.masks()[j].to_gray(), &gt.masks()[i])?;
    }
    for (i, g) in gt.masks().iter().enumerate() {
        if !gt_used[i] {
            sum += s_measure(&zero.to_gray(), g)?;
        }
    }
    for (j, m) in pred.masks().iter().enumerate() {
        if !pred_used[j] {
            sum += s_measure(&m.to_gray(), &zero)?;
        }
    }
    let pairs = gt.len() + pred.len() - retained.len();
    Ok(sum / pairs as f64)
}

/// Ground truth for one episode of any task.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruth {
    Sod(GrayMask),
    Sis(InstanceSet),
    Cosod(Vec<GrayMask>),
}

impl GroundTruth {
    pub fn task(&self) -> crate::interface::TaskKind {
        use crate::interface::TaskKind;
        match self {
            Self::Sod(_) => TaskKind::Sod,
            Self::Sis(_) => TaskKind::Sis,
            Self::Cosod(_) => TaskKind::Cosod,
        }
    }

    /// Number of images a segmenter is asked about per expression.
    pub fn image_count(&self) -> usize {
        match self {
            Self::Cosod(g) => g.len(),
            _ => 1,
        }
    }
}

/// Task-adaptive correctness from segmenter output.
///
/// `segments[e][k]` is the mask for expression `e` on image `k`. An empty
/// expression list scores 0. SOD scores the union of the expression masks,
/// SIS treats each expression as one instance, and CoSOD unions expression
/// masks per image before averaging over the group.
pub fn correctness(gt: &GroundTruth, segments: &[Vec<BinaryMask>]) -> Result<f64> {
    if segments.is_empty() {
        return Ok(0.0);
    }
    let images = gt.image_count();
    for s in segments {
        if s.len() != images {
            return Err(Error::LengthMismatch {
                left: s.len(),
                right: images,
            });
        }
    }
    match gt {
        GroundTruth::Sod(g) => {
            let masks: Vec<BinaryMask> = segments.iter().map(|s| s[0].clone()).collect();
            correctness_sod(&masks, g)
        }
        GroundTruth::Sis(g) => {
            let masks: Vec<BinaryMask> = segments.iter().map(|s| s[0].clone()).collect();
            iasm(&InstanceSet::new(g.dims(), masks)?, g)
        }
        GroundTruth::Cosod(gts) => {
            let per_image = (0..images)
                .map(|k| union(&segments.iter().map(|s| s[k].clone()).collect::<Vec<_>>()))
                .collect::<Result<Vec<_>>>()?;
            correctness_cosod(&per_image, gts)
        }
    }
}

/// `λ·r_corr + (1 − λ)·(r_struct + r_tag)` with λ = 0.5.
pub fn total_reward(r_corr: f64, verdict: &FormatVerdict) -> RewardBreakdown {
    let r_fmt = verdict.r_fmt();
    RewardBreakdown {
        r_corr,
        r_fmt,
        lambda: LAMBDA,
        r_total: LAMBDA * r_corr + (1.0 - LAMBDA) * r_fmt,
    }
}
