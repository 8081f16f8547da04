//! Evaluation metrics: SoC/mSoC for gaze object prediction, AP for
//! detection, ROC AUC / L2 distance / angular error for gaze estimation,
//! and the inference-time gaze-object selection rule (max mean in-box
//! heatmap energy).

use crate::detector::loss::{giou, iou};
use crate::detector::Detections;
use crate::error::{Error, Result};
use crate::losses::heatmap_box_region;
use crate::synth::BoxXYXY;

/// IoU-style thresholds 0.50, 0.55, ..., 0.95.
pub fn threshold_grid() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

// ---------------------------------------------------------------------------
// SoC

/// Box similarity in [0, 1] used by the mSoC suite. Pluggable so the scoring
/// formula can be swapped without touching the aggregation.
pub trait BoxSimilarity {
    fn name(&self) -> &'static str;
    fn similarity(&self, a: &BoxXYXY, b: &BoxXYXY) -> Result<f64>;
}

/// Default SoC: GIoU rescaled onto [0, 1]. Equals 1 only for identical
/// boxes and still separates disjoint boxes by their distance.
pub struct GiouSoc;

impl BoxSimilarity for GiouSoc {
    fn name(&self) -> &'static str {
        "giou_soc"
    }

    fn similarity(&self, a: &BoxXYXY, b: &BoxXYXY) -> Result<f64> {
        soc(a, b)
    }
}

/// `SoC(a, b) = (GIoU(a, b) + 1) / 2`.
pub fn soc(a: &BoxXYXY, b: &BoxXYXY) -> Result<f64> {
    Ok((giou(a, b)? + 1.0) / 2.0)
}

// ---------------------------------------------------------------------------
// gaze object prediction

/// The selected gaze object for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GopPrediction {
    pub bbox: BoxXYXY,
    pub class_id: usize,
    pub score: f64,
    /// Mean heatmap energy inside the box.
    pub in_box_energy: f64,
}

/// Mean heatmap value over a normalized box mapped onto the grid.
pub fn mean_in_box_energy(heatmap: &[f64], size: usize, bbox: &BoxXYXY) -> Result<f64> {
    let clamped = BoxXYXY::new(
        bbox.x1.clamp(0.0, 1.0),
        bbox.y1.clamp(0.0, 1.0),
        bbox.x2.clamp(0.0, 1.0),
        bbox.y2.clamp(0.0, 1.0),
    );
    if !(clamped.x1 < clamped.x2 && clamped.y1 < clamped.y2) {
        return Err(Error::contract(
            "mean_in_box_energy",
            format!("box {bbox:?} degenerates after clamping"),
        ));
    }
    let region = heatmap_box_region(&clamped, size)?;
    let mut acc = 0.0;
    for y in region.y_lo..region.y_hi {
        for x in region.x_lo..region.x_hi {
            acc += heatmap[y * size + x];
        }
    }
    Ok(acc / region.count() as f64)
}

/// Picks the detection whose box holds the highest mean heatmap energy.
/// Ties break toward the higher detection score, then the lower index.
/// No detection above the score floor is a selection error (a miss).
pub fn select_gaze_object(
    heatmap: &[f64],
    size: usize,
    detections: &Detections,
    score_floor: f64,
) -> Result<GopPrediction> {
    let mut best: Option<(f64, f64, usize)> = None; // (energy, score, idx)
    for i in 0..detections.len() {
        if detections.scores[i] < score_floor {
            continue;
        }
        let bbox = detections.boxes[i].to_xyxy();
        let energy = mean_in_box_energy(heatmap, size, &bbox)?;
        let candidate = (energy, detections.scores[i], i);
        let better = match &best {
            None => true,
            Some((e, s, idx)) => {
                candidate.0 > *e
                    || (candidate.0 == *e && candidate.1 > *s)
                    || (candidate.0 == *e && candidate.1 == *s && candidate.2 < *idx)
            }
        };
        if better {
            best = Some(candidate);
        }
    }
    let (energy, score, idx) = best.ok_or_else(|| {
        Error::contract(
            "select_gaze_object",
            format!("no detection above score floor {score_floor}"),
        )
    })?;
    Ok(GopPrediction {
        bbox: detections.boxes[idx].to_xyxy(),
        class_id: detections.labels[idx],
        score,
        in_box_energy: energy,
    })
}

// ---------------------------------------------------------------------------
// mSoC suite

#[derive(Debug, Clone, PartialEq)]
pub struct MSocResult {
    /// Mean of the per-threshold success rates.
    pub mean: f64,
    /// `(threshold, success rate)` over the 0.50..0.95 grid.
    pub at: Vec<(f64, f64)>,
}

impl MSocResult {
    pub fn at_threshold(&self, tau: f64) -> f64 {
        self.at
            .iter()
            .find(|(t, _)| (t - tau).abs() < 1e-9)
            .map(|(_, v)| *v)
            .unwrap_or(f64::NAN)
    }
}

/// Per-image single-prediction mSoC. A `None` prediction (selection miss)
/// fails every threshold. `class_matched` additionally requires the class
/// to agree.
pub fn msoc_suite(
    preds: &[Option<GopPrediction>],
    gts: &[(BoxXYXY, usize)],
    class_matched: bool,
    sim: &dyn BoxSimilarity,
    thresholds: &[f64],
) -> Result<MSocResult> {
    if preds.len() != gts.len() {
        return Err(Error::contract(
            "msoc_suite",
            format!("{} predictions vs {} ground truths", preds.len(), gts.len()),
        ));
    }
    if preds.is_empty() {
        return Err(Error::contract("msoc_suite", "empty image set"));
    }
    let mut at = Vec::with_capacity(thresholds.len());
    let mut total = 0.0;
    for &tau in thresholds {
        let mut hits = 0usize;
        for (pred, (gt_box, gt_class)) in preds.iter().zip(gts) {
            let Some(p) = pred else { continue };
            if class_matched && p.class_id != *gt_class {
                continue;
            }
            if sim.similarity(&p.bbox, gt_box)? >= tau {
                hits += 1;
            }
        }
        let rate = hits as f64 / preds.len() as f64;
        at.push((tau, rate));
        total += rate;
    }
    Ok(MSocResult {
        mean: total / thresholds.len() as f64,
        at,
    })
}

// ---------------------------------------------------------------------------
// AP suite

/// All detections of one image, already argmax-labelled and scored.
#[derive(Debug, Clone, Default)]
pub struct ImageDetections {
    pub boxes: Vec<BoxXYXY>,
    pub labels: Vec<usize>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ImageGroundTruth {
    pub boxes: Vec<BoxXYXY>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    /// Mean over the threshold grid of the per-threshold class-mean AP.
    pub mean: f64,
    pub at: Vec<(f64, f64)>,
}

impl ApResult {
    pub fn at_threshold(&self, tau: f64) -> f64 {
        self.at
            .iter()
            .find(|(t, _)| (t - tau).abs() < 1e-9)
            .map(|(_, v)| *v)
            .unwrap_or(f64::NAN)
    }
}

/// Average precision of one class at one IoU threshold: greedy
/// score-ordered matching, each ground truth claimed at most once,
/// all-point interpolation under the precision envelope.
fn ap_single_class(
    dets: &[ImageDetections],
    gts: &[ImageGroundTruth],
    class: usize,
    tau: f64,
) -> Option<f64> {
    let n_gt: usize = gts
        .iter()
        .map(|g| g.labels.iter().filter(|&&l| l == class).count())
        .sum();
    if n_gt == 0 {
        return None;
    }

    // (score, image, det index), sorted by score descending; ties keep
    // (image, index) order for determinism.
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (img, d) in dets.iter().enumerate() {
        for i in 0..d.boxes.len() {
            if d.labels[i] == class {
                ranked.push((d.scores[i], img, i));
            }
        }
    }
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.boxes.len()]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut precisions = Vec::with_capacity(ranked.len());
    let mut recalls = Vec::with_capacity(ranked.len());
    for &(_, img, i) in &ranked {
        let dbox = &dets[img].boxes[i];
        let mut best: Option<(f64, usize)> = None;
        for (g, gbox) in gts[img].boxes.iter().enumerate() {
            if gts[img].labels[g] != class || claimed[img][g] {
                continue;
            }
            let v = iou(dbox, gbox);
            if best.map(|(bv, _)| v > bv).unwrap_or(true) {
                best = Some((v, g));
            }
        }
        match best {
            Some((v, g)) if v >= tau => {
                claimed[img][g] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }

    // Precision envelope (max to the right), then the area under the
    // stepwise PR curve.
    let mut envelope = precisions.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        if envelope[i + 1] > envelope[i] {
            envelope[i] = envelope[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..envelope.len() {
        ap += (recalls[i] - prev_recall) * envelope[i];
        prev_recall = recalls[i];
    }
    Some(ap)
}

/// AP over all classes and the threshold grid; classes without ground truth
/// are skipped from the class mean.
pub fn ap_suite(
    dets: &[ImageDetections],
    gts: &[ImageGroundTruth],
    num_classes: usize,
    thresholds: &[f64],
) -> Result<ApResult> {
    if dets.len() != gts.len() {
        return Err(Error::contract(
            "ap_suite",
            format!("{} detection sets vs {} ground-truth sets", dets.len(), gts.len()),
        ));
    }
    let mut at = Vec::with_capacity(thresholds.len());
    let mut total = 0.0;
    for &tau in thresholds {
        let mut acc = 0.0;
        let mut n = 0usize;
        for class in 0..num_classes {
            if let Some(ap) = ap_single_class(dets, gts, class, tau) {
                acc += ap;
                n += 1;
            }
        }
        let map = if n == 0 { 0.0 } else { acc / n as f64 };
        at.push((tau, map));
        total += map;
    }
    Ok(ApResult {
        mean: total / thresholds.len() as f64,
        at,
    })
}

// ---------------------------------------------------------------------------
// gaze estimation metrics

/// Pixel holding a normalized point (clamped to the grid).
pub fn point_to_pixel(point: (f64, f64), size: usize) -> (usize, usize) {
    let x = ((point.0 * size as f64) as usize).min(size - 1);
    let y = ((point.1 * size as f64) as usize).min(size - 1);
    (x, y)
}

/// ROC AUC of the heatmap cells as scores against a single positive cell at
/// the ground-truth gaze pixel; ties carry rank-averaged credit.
pub fn gaze_auc(heatmap: &[f64], size: usize, gt_point: (f64, f64)) -> f64 {
    let (gx, gy) = point_to_pixel(gt_point, size);
    let pos_idx = gy * size + gx;
    let pos_value = heatmap[pos_idx];
    let n = heatmap.len();

    // Average rank of the positive = (# strictly below) + (ties + 1) / 2,
    // 1-based over all cells.
    let mut below = 0usize;
    let mut ties = 0usize;
    for &v in heatmap {
        if v < pos_value {
            below += 1;
        } else if v == pos_value {
            ties += 1;
        }
    }
    let rank = below as f64 + (ties as f64 + 1.0) / 2.0;
    (rank - 1.0) / (n as f64 - 1.0)
}

/// Argmax cell of the heatmap as a normalized point; ties resolve to the
/// lowest row-major index.
pub fn heatmap_argmax_point(heatmap: &[f64], size: usize) -> (f64, f64) {
    let mut best = 0usize;
    for (i, v) in heatmap.iter().enumerate() {
        if *v > heatmap[best] {
            best = i;
        }
    }
    let (r, c) = (best / size, best % size);
    (
        (c as f64 + 0.5) / size as f64,
        (r as f64 + 0.5) / size as f64,
    )
}

/// L2 distance (normalized coordinates) and angular error in degrees between
/// the predicted gaze point (heatmap argmax) and the ground truth, both seen
/// from the head center. Degenerate gaze vectors are a contract error; the
/// caller excludes such images with a count.
pub fn l2_and_angular(
    heatmap: &[f64],
    size: usize,
    head_center: (f64, f64),
    gt_point: (f64, f64),
) -> Result<(f64, f64)> {
    let pred = heatmap_argmax_point(heatmap, size);
    let dist = ((pred.0 - gt_point.0).powi(2) + (pred.1 - gt_point.1).powi(2)).sqrt();
    let u = (pred.0 - head_center.0, pred.1 - head_center.1);
    let w = (gt_point.0 - head_center.0, gt_point.1 - head_center.1);
    let nu = (u.0 * u.0 + u.1 * u.1).sqrt();
    let nw = (w.0 * w.0 + w.1 * w.1).sqrt();
    if nu == 0.0 || nw == 0.0 {
        return Err(Error::contract(
            "l2_and_angular",
            "gaze vector coincides with the head center; angle undefined",
        ));
    }
    let cos = ((u.0 * w.0 + u.1 * w.1) / (nu * nw)).clamp(-1.0, 1.0);
    Ok((dist, cos.acos().to_degrees()))
}

// ---------------------------------------------------------------------------
// aggregated report

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub images: usize,
    pub msoc_matched: MSocResult,
    pub msoc_agnostic: MSocResult,
    /// Same detector output, but the gaze object chosen uniformly at random:
    /// the baseline the energy rule must beat.
    pub msoc_agnostic_random: MSocResult,
    pub ap: ApResult,
    pub auc: f64,
    pub dist: f64,
    pub ang_deg: f64,
    /// Images excluded from the angular mean (degenerate gaze vectors).
    pub ang_excluded: usize,
    /// Images with no detection above the score floor.
    pub misses: usize,
    /// Mean over images of the heatmap energy inside the ground-truth gaze
    /// box; the quantity the gaze box loss drives up.
    pub mean_gt_box_energy: f64,
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

impl MetricReport {
    /// CSV with header `metric,value,threshold,class_mode`, 4 fractional
    /// digits, reported thresholds 0.50 / 0.75 / 0.95 plus the mean.
    pub fn to_csv(&self) -> String {
        let mut rows = vec!["metric,value,threshold,class_mode".to_string()];
        let mut push_msoc = |name: &str, res: &MSocResult, mode: &str, rows: &mut Vec<String>| {
            rows.push(format!("{name},{},mean,{mode}", fmt4(res.mean)));
            for tau in [0.50, 0.75, 0.95] {
                rows.push(format!(
                    "{name},{},{tau:.2},{mode}",
                    fmt4(res.at_threshold(tau))
                ));
            }
        };
        push_msoc("msoc", &self.msoc_matched, "matched", &mut rows);
        push_msoc("msoc", &self.msoc_agnostic, "agnostic", &mut rows);
        push_msoc("msoc_random", &self.msoc_agnostic_random, "agnostic", &mut rows);
        rows.push(format!("ap,{},mean,-", fmt4(self.ap.mean)));
        for tau in [0.50, 0.75, 0.95] {
            rows.push(format!("ap,{},{tau:.2},-", fmt4(self.ap.at_threshold(tau))));
        }
        rows.push(format!("auc,{},-,-", fmt4(self.auc)));
        rows.push(format!("dist,{},-,-", fmt4(self.dist)));
        rows.push(format!("ang,{},-,-", fmt4(self.ang_deg)));
        rows.push(format!("ang_excluded,{},-,-", fmt4(self.ang_excluded as f64)));
        rows.push(format!("misses,{},-,-", fmt4(self.misses as f64)));
        rows.push(format!("gt_box_energy,{},-,-", fmt4(self.mean_gt_box_energy)));
        rows.push(format!("images,{},-,-", fmt4(self.images as f64)));
        rows.join("\n") + "\n"
    }
}
