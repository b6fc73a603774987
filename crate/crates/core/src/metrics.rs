//! Saliency evaluation metrics and exact maximum-weight assignment.
//!
//! S-measure and E-measure follow the widely used reference implementations
//! (Fan et al.); their small-denominator guards are `f64::EPSILON`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ensure_same, iou, BinaryMask, GrayMask};

const EPS: f64 = f64::EPSILON;
const ALPHA: f64 = 0.5;
/// β² of the F-measure.
pub const BETA_SQ: f64 = 0.3;

/// One-to-one matching over a value matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, column)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_value: f64,
}

/// A predicted instance with its ranking confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredMask {
    pub mask: BinaryMask,
    pub score: f64,
}

impl ScoredMask {
    /// Unranked predictions get score 1.0; ties keep input order.
    pub fn unscored(mask: BinaryMask) -> Self {
        Self { mask, score: 1.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub s_measure: f64,
    pub e_measure: f64,
    pub f_beta_max: f64,
    pub mae: f64,
    /// IoU threshold (percent) -> AP.
    pub ap: BTreeMap<u32, f64>,
}

impl MetricReport {
    pub fn for_maps(pred: &GrayMask, gt: &BinaryMask) -> Result<Self> {
        Ok(Self {
            s_measure: s_measure(pred, gt)?,
            e_measure: e_measure(pred, gt)?,
            f_beta_max: f_measure_max(pred, gt)?,
            mae: mae(pred, &gt.to_gray())?,
            ap: BTreeMap::new(),
        })
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn object_score(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (x, sigma) = mean_std(values);
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn s_object(pred: &GrayMask, gt: &BinaryMask) -> f64 {
    let pv = pred.values();
    let g = gt.values();
    let (n, fg_count) = (pv.len(), gt.count());
    let fg = (0..n).filter(|&i| g[i]).map(|i| pv[i]);
    let bg = (0..n).filter(|&i| !g[i]).map(|i| 1.0 - pv[i]);
    // μ·O_fg + (1 − μ)·O_bg with μ the foreground fraction
    (fg_count as f64 * object_score(fg) + (n - fg_count) as f64 * object_score(bg)) / n as f64
}

/// SSIM of one rectangular block `[x0, x1) x [y0, y1)`.
fn block_ssim(pred: &GrayMask, gt: &BinaryMask, x0: usize, x1: usize, y0: usize, y1: usize) -> f64 {
    let n = (x1 - x0) * (y1 - y0);
    if n == 0 {
        return 0.0;
    }
    let cells = || (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)));
    let g = |x, y| if gt.get(x, y) { 1.0 } else { 0.0 };
    let mx = cells().map(|(x, y)| pred.get(x, y)).sum::<f64>() / n as f64;
    let my = cells().map(|(x, y)| g(x, y)).sum::<f64>() / n as f64;
    let (sx, sy, sxy) = if n > 1 {
        let d = (n - 1) as f64;
        let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
        for (x, y) in cells() {
            let (dp, dg) = (pred.get(x, y) - mx, g(x, y) - my);
            sx += dp * dp;
            sy += dg * dg;
            sxy += dp * dg;
        }
        (sx / d, sy / d, sxy / d)
    } else {
        (0.0, 0.0, 0.0)
    };
    let num = 4.0 * mx * my * sxy;
    let den = (mx * mx + my * my) * (sx + sy);
    // |num| <= den, so a nonzero numerator never meets a zero denominator
    if num != 0.0 {
        num / den
    } else if den == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(pred: &GrayMask, gt: &BinaryMask) -> f64 {
    let (w, h) = gt.dims();
    let (mut sum_x, mut sum_y, mut n) = (0usize, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if gt.get(x, y) {
                sum_x += x;
                sum_y += y;
                n += 1;
            }
        }
    }
    // 1-based centroid = floor(mean 0-based coordinate) + 1; also the
    // exclusive end of the left/top blocks
    let cx = sum_x / n + 1;
    let cy = sum_y / n + 1;
    // area-weighted; integer areas keep the weights summing to exactly one
    let weighted = (cx * cy) as f64 * block_ssim(pred, gt, 0, cx, 0, cy)
        + (cy * (w - cx)) as f64 * block_ssim(pred, gt, cx, w, 0, cy)
        + ((h - cy) * cx) as f64 * block_ssim(pred, gt, 0, cx, cy, h)
        + ((h - cy) * (w - cx)) as f64 * block_ssim(pred, gt, cx, w, cy, h);
    weighted / (w * h) as f64
}

/// Structure measure with α = 0.5.
pub fn s_measure(pred: &GrayMask, gt: &BinaryMask) -> Result<f64> {
    ensure_same(gt.dims(), pred.dims())?;
    if gt.is_all_zero() {
        return Ok(1.0 - pred.mean());
    }
    if gt.is_all_one() {
        return Ok(pred.mean());
    }
    let s = ALPHA * s_object(pred, gt) + (1.0 - ALPHA) * s_region(pred, gt);
    Ok(s.clamp(0.0, 1.0))
}

fn sweep_thresholds() -> impl Iterator<Item = f64> {
    (0..=255u32).map(|k| k as f64 / 255.0)
}

fn enhanced_alignment(bin: &BinaryMask, gt: &BinaryMask) -> f64 {
    let n = gt.values().len();
    let sum: f64 = if gt.is_all_zero() {
        bin.values().iter().map(|&b| if b { 0.0 } else { 1.0 }).sum()
    } else if gt.is_all_one() {
        bin.values().iter().map(|&b| if b { 1.0 } else { 0.0 }).sum()
    } else {
        let mg = gt.count() as f64 / n as f64;
        let mb = bin.count() as f64 / n as f64;
        gt.values()
            .iter()
            .zip(bin.values())
            .map(|(&g, &b)| {
                let dg = g as u8 as f64 - mg;
                let db = b as u8 as f64 - mb;
                let xi = 2.0 * dg * db / (dg * dg + db * db + EPS);
                (xi + 1.0).powi(2) / 4.0
            })
            .sum()
    };
    sum / (n as f64 - 1.0 + EPS)
}

/// Enhanced-alignment measure, maximised over the 256-threshold sweep and
/// clamped to `[0, 1]`.
pub fn e_measure(pred: &GrayMask, gt: &BinaryMask) -> Result<f64> {
    ensure_same(gt.dims(), pred.dims())?;
    let best = sweep_thresholds()
        .map(|t| enhanced_alignment(&pred.binarize(t), gt))
        .fold(0.0f64, f64::max);
    Ok(best.clamp(0.0, 1.0))
}

/// F-measure at a single threshold; 0 where precision/recall are undefined.
pub fn f_measure_at(pred: &GrayMask, gt: &BinaryMask, threshold: f64) -> Result<f64> {
    ensure_same(gt.dims(), pred.dims())?;
    let positives = gt.count();
    let (mut tp, mut predicted) = (0usize, 0usize);
    for (&v, &g) in pred.values().iter().zip(gt.values()) {
        if v > threshold {
            predicted += 1;
            tp += g as usize;
        }
    }
    if predicted == 0 || positives == 0 {
        return Ok(0.0);
    }
    let p = tp as f64 / predicted as f64;
    let r = tp as f64 / positives as f64;
    let den = BETA_SQ * p + r;
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((1.0 + BETA_SQ) * p * r / den)
}

/// Maximum F-measure (β² = 0.3) over thresholds k/255. An all-zero ground
/// truth scores 0.
pub fn f_measure_max(pred: &GrayMask, gt: &BinaryMask) -> Result<f64> {
    ensure_same(gt.dims(), pred.dims())?;
    if gt.is_all_zero() {
        return Ok(0.0);
    }
    let mut best = 0.0f64;
    for t in sweep_thresholds() {
        best = best.max(f_measure_at(pred, gt, t)?);
    }
    Ok(best)
}

pub fn mae(pred: &GrayMask, gt: &GrayMask) -> Result<f64> {
    ensure_same(gt.dims(), pred.dims())?;
    let n = pred.values().len() as f64;
    Ok(pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// Maximum-value one-to-one assignment on a rectangular matrix.
///
/// The matrix is zero-padded to square and solved as a minimum-cost problem
/// on the negated values with the O(n³) shortest augmenting path method.
/// Pairs that land on padding are dropped.
pub fn hungarian_max(values: &[Vec<f64>]) -> Result<Assignment> {
    let rows = values.len();
    let cols = values.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(Error::Empty("assignment matrix"));
    }
    if let Some(r) = values.iter().find(|r| r.len() != cols) {
        return Err(Error::LengthMismatch {
            left: cols,
            right: r.len(),
        });
    }
    let n = rows.max(cols);
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            -values[i][j]
        } else {
            0.0
        }
    };

    // 1-based potentials; column 0 is the virtual source
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .filter(|&(i, j)| i < rows && j < cols)
        .collect();
    pairs.sort_unstable();
    let total_value = pairs.iter().map(|&(i, j)| values[i][j]).sum();
    Ok(Assignment { pairs, total_value })
}

/// Average precision at one IoU threshold with all-point interpolation.
///
/// Predictions are ranked by score (stable for ties); each is greedily
/// matched to the unmatched ground truth of highest IoU, counting as a true
/// positive when that IoU reaches `iou_threshold`.
pub fn average_precision(preds: &[ScoredMask], gts: &[BinaryMask], iou_threshold: f64) -> Result<f64> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "IoU threshold {iou_threshold} outside (0, 1]"
        )));
    }
    if let Some(first) = gts.first().map(BinaryMask::dims).or_else(|| preds.first().map(|p| p.mask.dims())) {
        for d in gts.iter().map(BinaryMask::dims).chain(preds.iter().map(|p| p.mask.dims())) {
            ensure_same(first, d)?;
        }
    }
    if gts.is_empty() || preds.is_empty() {
        return Ok(0.0);
    }

    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));

    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for (rank, &p) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if matched[g] {
                continue;
            }
            let o = iou(&preds[p].mask, gt)?;
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, o)) = best {
            if o >= iou_threshold {
                matched[g] = true;
                tp += 1;
            }
        }
        recall.push(tp as f64 / gts.len() as f64);
        precision.push(tp as f64 / (rank + 1) as f64);
    }

    // precision envelope, right to left
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Ok(ap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn half_plane() -> BinaryMask {
        BinaryMask::rect(8, 8, 0, 0, 4, 8).unwrap()
    }

    #[test]
    fn s_measure_perfect_and_degenerate() {
        let g = BinaryMask::rect(8, 8, 2, 1, 5, 6).unwrap();
        assert!((s_measure(&g.to_gray(), &g).unwrap() - 1.0).abs() < 1e-12);
        let z = BinaryMask::zeros(8, 8).unwrap();
        assert_eq!(s_measure(&z.to_gray(), &z).unwrap(), 1.0);
        let ones = BinaryMask::ones(8, 8).unwrap();
        assert_eq!(s_measure(&ones.to_gray(), &z).unwrap(), 0.0);
        let p = GrayMask::filled(8, 8, 0.3).unwrap();
        assert_eq!(s_measure(&p, &ones).unwrap(), p.mean());
        assert_eq!(s_measure(&p, &z).unwrap(), 1.0 - p.mean());
        assert!(s_measure(&GrayMask::filled(4, 4, 0.3).unwrap(), &z).is_err());
    }

    // pinned by an independent numpy evaluation of the object/region terms
    #[test]
    fn s_measure_uniform_half_against_left_half() {
        let s = s_measure(&GrayMask::filled(8, 8, 0.5).unwrap(), &half_plane()).unwrap();
        assert!((s - 0.525).abs() < 1e-9, "{s}");
        let s = s_measure(&BinaryMask::zeros(8, 8).unwrap().to_gray(), &half_plane()).unwrap();
        assert!((s - 0.375).abs() < 1e-9, "{s}");
    }

    #[test]
    fn e_measure_examples() {
        let g = half_plane();
        assert_eq!(e_measure(&g.to_gray(), &g).unwrap(), 1.0);
        let z = BinaryMask::zeros(8, 8).unwrap();
        assert_eq!(e_measure(&z.to_gray(), &z).unwrap(), 1.0);
        // complement: alignment -1 everywhere except the all-background
        // threshold, where every pixel scores 1/4
        let comp = BinaryMask::rect(8, 8, 4, 0, 8, 8).unwrap();
        let e = e_measure(&comp.to_gray(), &g).unwrap();
        assert!((e - 16.0 / 63.0).abs() < 1e-12, "{e}");
    }

    #[test]
    fn f_measure_examples() {
        let g = half_plane();
        assert!((f_measure_max(&g.to_gray(), &g).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(f_measure_max(&GrayMask::filled(8, 8, 0.0).unwrap(), &g).unwrap(), 0.0);
        let gt = BinaryMask::from_bits(4, 2, &[1, 1, 1, 1, 0, 0, 0, 0]).unwrap();
        let pred = BinaryMask::from_bits(4, 2, &[1, 1, 0, 0, 1, 1, 0, 0]).unwrap();
        assert!((f_measure_max(&pred.to_gray(), &gt).unwrap() - 0.5).abs() < 1e-12);
        let z = BinaryMask::zeros(4, 2).unwrap();
        assert_eq!(f_measure_max(&pred.to_gray(), &z).unwrap(), 0.0);
    }

    #[test]
    fn mae_examples() {
        let a = GrayMask::filled(3, 3, 1.0).unwrap();
        let z = GrayMask::filled(3, 3, 0.0).unwrap();
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert_eq!(mae(&a, &z).unwrap(), 1.0);
        assert_eq!(mae(&GrayMask::filled(3, 3, 0.25).unwrap(), &z).unwrap(), 0.25);
    }

    #[test]
    fn hungarian_examples() {
        let a = hungarian_max(&[vec![0.9]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.total_value, 0.9);

        let a = hungarian_max(&[vec![0.9, 0.1], vec![0.8, 0.7]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert!((a.total_value - 1.6).abs() < 1e-15);

        let a = hungarian_max(&[vec![0.5, 0.9], vec![0.9, 0.5], vec![0.1, 0.1]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert!((a.total_value - 1.8).abs() < 1e-15);

        let wide = hungarian_max(&[vec![0.1, 0.2, 0.7]]).unwrap();
        assert_eq!(wide.pairs, vec![(0, 2)]);
        assert!(hungarian_max(&[]).is_err());
        assert!(hungarian_max(&[vec![]]).is_err());
    }

    #[test]
    fn ap_examples() {
        let g = half_plane();
        let fp = BinaryMask::rect(8, 8, 4, 0, 8, 8).unwrap();
        let exact = ScoredMask { mask: g.clone(), score: 1.0 };
        assert_eq!(average_precision(std::slice::from_ref(&exact), std::slice::from_ref(&g), 0.5).unwrap(), 1.0);
        assert_eq!(average_precision(&[], std::slice::from_ref(&g), 0.5).unwrap(), 0.0);
        let preds = [
            ScoredMask { mask: g.clone(), score: 0.9 },
            ScoredMask { mask: fp.clone(), score: 0.8 },
        ];
        assert_eq!(average_precision(&preds, std::slice::from_ref(&g), 0.5).unwrap(), 1.0);
        // reversed ranking: FP first, TP second -> precision 1/2 at recall 1
        let preds = [
            ScoredMask { mask: g.clone(), score: 0.7 },
            ScoredMask { mask: fp, score: 0.8 },
        ];
        assert_eq!(average_precision(&preds, std::slice::from_ref(&g), 0.5).unwrap(), 0.5);
        assert!(average_precision(&preds, &[g], 0.0).is_err());
    }

    #[test]
    fn ap_is_deterministic() {
        let gts = [half_plane(), BinaryMask::rect(8, 8, 4, 0, 8, 4).unwrap()];
        let preds: Vec<ScoredMask> = [(0, 0, 4, 7), (4, 0, 8, 4), (0, 0, 8, 8)]
            .iter()
            .map(|&(a, b, c, d)| ScoredMask::unscored(BinaryMask::rect(8, 8, a, b, c, d).unwrap()))
            .collect();
        let first = average_precision(&preds, &gts, 0.5).unwrap();
        for _ in 0..5 {
            assert_eq!(average_precision(&preds, &gts, 0.5).unwrap().to_bits(), first.to_bits());
        }
    }

    fn random_gray(rng: &mut ChaCha8Rng, w: usize, h: usize) -> GrayMask {
        GrayMask::new(w, h, (0..w * h).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn random_binary(rng: &mut ChaCha8Rng, w: usize, h: usize) -> BinaryMask {
        BinaryMask::new(w, h, (0..w * h).map(|_| rng.gen_bool(0.4)).collect()).unwrap()
    }

    #[test]
    fn metrics_stay_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let (w, h) = (rng.gen_range(1..9), rng.gen_range(1..9));
            let p = random_gray(&mut rng, w, h);
            let g = random_binary(&mut rng, w, h);
            for v in [
                s_measure(&p, &g).unwrap(),
                e_measure(&p, &g).unwrap(),
                f_measure_max(&p, &g).unwrap(),
                mae(&p, &g.to_gray()).unwrap(),
            ] {
                assert!((0.0..=1.0).contains(&v), "{v}");
            }
        }
    }

    #[test]
    fn s_measure_identity_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 100 {
            let (w, h) = (rng.gen_range(2..12), rng.gen_range(2..12));
            let g = random_binary(&mut rng, w, h);
            if g.is_all_zero() || g.is_all_one() {
                continue;
            }
            let s = s_measure(&g.to_gray(), &g).unwrap();
            assert!((s - 1.0).abs() < 1e-9, "{s}");
            checked += 1;
        }
    }

    #[test]
    fn f_sweep_dominates_fixed_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = random_gray(&mut rng, 6, 5);
            let g = random_binary(&mut rng, 6, 5);
            let best = f_measure_max(&p, &g).unwrap();
            let t = rng.gen::<f64>();
            assert!(best >= f_measure_at(&p, &g, t).unwrap() - 1e-15 || g.is_all_zero());
        }
    }

    #[test]
    fn mae_symmetric_and_triangle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let (a, b, c) = (random_gray(&mut rng, 4, 4), random_gray(&mut rng, 4, 4), random_gray(&mut rng, 4, 4));
            assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
            assert!(mae(&a, &c).unwrap() <= mae(&a, &b).unwrap() + mae(&b, &c).unwrap() + 1e-12);
        }
    }
}
