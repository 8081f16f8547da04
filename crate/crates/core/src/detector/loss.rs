//! Detection loss: sigmoid focal classification plus L1 and GIoU box
//! regression over Hungarian-matched query/target pairs.

use super::hungarian::{hungarian_match, MatchResult};
use crate::error::{Error, Result};
use crate::synth::BoxXYXY;
use crate::tensor::{ops, Element, Tape, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct DetLossConfig {
    pub class_weight: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for DetLossConfig {
    fn default() -> Self {
        // DETR-family convention; matching cost and loss share the weights.
        DetLossConfig {
            class_weight: 2.0,
            l1_weight: 5.0,
            giou_weight: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

/// Ground truth for one image: class ids and cxcywh boxes in normalized
/// coordinates.
#[derive(Debug, Clone, Default)]
pub struct DetTargets {
    pub classes: Vec<usize>,
    pub boxes_cxcywh: Vec<[f64; 4]>,
}

impl DetTargets {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

// ---------------------------------------------------------------------------
// GIoU (scalar route, used by matching costs and metrics)

/// Intersection-over-union of two corner boxes.
pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU in (-1, 1]: IoU minus the enclosing-box penalty.
pub fn giou(a: &BoxXYXY, b: &BoxXYXY) -> Result<f64> {
    if a.x1 >= a.x2 || a.y1 >= a.y2 || b.x1 >= b.x2 || b.y1 >= b.y2 {
        return Err(Error::contract(
            "giou",
            format!("degenerate box: {a:?} / {b:?}"),
        ));
    }
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    let iou = inter / union;
    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    let c_area = cw * ch;
    Ok(iou - (c_area - union) / c_area)
}

// ---------------------------------------------------------------------------
// differentiable pieces

/// cxcywh `[k,4]` to corner `[k,4]` tensors.
pub fn boxes_to_corners<E: Element>(tape: &Tape<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let half = E::from_f64(0.5);
    let cx = ops::slice_cols(tape, b, 0, 1)?;
    let cy = ops::slice_cols(tape, b, 1, 2)?;
    let w = ops::slice_cols(tape, b, 2, 3)?;
    let h = ops::slice_cols(tape, b, 3, 4)?;
    let hw = ops::scale(tape, &w, half);
    let hh = ops::scale(tape, &h, half);
    let x1 = ops::sub(tape, &cx, &hw)?;
    let y1 = ops::sub(tape, &cy, &hh)?;
    let x2 = ops::add(tape, &cx, &hw)?;
    let y2 = ops::add(tape, &cy, &hh)?;
    ops::concat_cols(tape, &[x1, y1, x2, y2])
}

/// Row-wise GIoU between two `[k,4]` corner tensors; result `[k,1]`.
pub fn giou_rows<E: Element>(tape: &Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let col = |t: &Tensor<E>, i: usize| ops::slice_cols(tape, t, i, i + 1);
    let (ax1, ay1, ax2, ay2) = (col(a, 0)?, col(a, 1)?, col(a, 2)?, col(a, 3)?);
    let (bx1, by1, bx2, by2) = (col(b, 0)?, col(b, 1)?, col(b, 2)?, col(b, 3)?);

    let ix1 = ops::maximum(tape, &ax1, &bx1)?;
    let iy1 = ops::maximum(tape, &ay1, &by1)?;
    let ix2 = ops::minimum(tape, &ax2, &bx2)?;
    let iy2 = ops::minimum(tape, &ay2, &by2)?;
    let iw = ops::relu(tape, &ops::sub(tape, &ix2, &ix1)?);
    let ih = ops::relu(tape, &ops::sub(tape, &iy2, &iy1)?);
    let inter = ops::mul(tape, &iw, &ih)?;

    let area_a = ops::mul(
        tape,
        &ops::sub(tape, &ax2, &ax1)?,
        &ops::sub(tape, &ay2, &ay1)?,
    )?;
    let area_b = ops::mul(
        tape,
        &ops::sub(tape, &bx2, &bx1)?,
        &ops::sub(tape, &by2, &by1)?,
    )?;
    let union = ops::sub(tape, &ops::add(tape, &area_a, &area_b)?, &inter)?;
    let iou = ops::div(tape, &inter, &union)?;

    let cx1 = ops::minimum(tape, &ax1, &bx1)?;
    let cy1 = ops::minimum(tape, &ay1, &by1)?;
    let cx2 = ops::maximum(tape, &ax2, &bx2)?;
    let cy2 = ops::maximum(tape, &ay2, &by2)?;
    let c_area = ops::mul(
        tape,
        &ops::sub(tape, &cx2, &cx1)?,
        &ops::sub(tape, &cy2, &cy1)?,
    )?;
    let penalty = ops::div(tape, &ops::sub(tape, &c_area, &union)?, &c_area)?;
    ops::sub(tape, &iou, &penalty)
}

/// Sigmoid focal loss over all `[n_q, c]` logits: matched queries carry a
/// one-hot target, everything else is background (all-zero target). The sum
/// is normalized by `max(1, n_matched)`.
pub fn focal_loss<E: Element>(
    tape: &Tape<E>,
    logits: &Tensor<E>,
    positives: &[(usize, usize)],
    alpha: f64,
    gamma: f64,
    normalizer: usize,
) -> Result<Tensor<E>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::contract("focal_loss", "alpha must be in (0, 1)"));
    }
    if gamma < 0.0 {
        return Err(Error::contract("focal_loss", "gamma must be >= 0"));
    }
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::shape("focal_loss", format!("logits rank {}", s.len())));
    }
    let (n, c) = (s[0], s[1]);
    let mut mask = vec![E::zero(); n * c];
    for &(q, class) in positives {
        if q >= n || class >= c {
            return Err(Error::contract(
                "focal_loss",
                format!("positive ({q}, {class}) outside [{n}, {c}]"),
            ));
        }
        mask[q * c + class] = E::one();
    }
    let t = Tensor::from_vec(&[n, c], mask)?;
    let one_minus_t = ops::affine(tape, &t, -E::one(), E::one());

    let p = ops::sigmoid(tape, logits);
    let g = E::from_f64(gamma);
    let a = E::from_f64(alpha);

    // -log p = softplus(-z); -log(1-p) = softplus(z)
    let neg_z = ops::scale(tape, logits, -E::one());
    let nlp = ops::softplus(tape, &neg_z);
    let nl1p = ops::softplus(tape, logits);

    let one_minus_p = ops::affine(tape, &p, -E::one(), E::one());
    let pos = ops::scale(tape, &ops::mul(tape, &ops::pow_scalar(tape, &one_minus_p, g), &nlp)?, a);
    let neg = ops::scale(
        tape,
        &ops::mul(tape, &ops::pow_scalar(tape, &p, g), &nl1p)?,
        E::one() - a,
    );

    let terms = ops::add(
        tape,
        &ops::mul(tape, &t, &pos)?,
        &ops::mul(tape, &one_minus_t, &neg)?,
    )?;
    let total = ops::sum_all(tape, &terms)?;
    Ok(ops::scale(
        tape,
        &total,
        E::from_f64(1.0 / normalizer.max(1) as f64),
    ))
}

// ---------------------------------------------------------------------------
// matching + combined loss

/// Matching cost matrix on detached values: focal-style class cost plus L1
/// plus negative GIoU, with the loss weights.
pub fn matching_cost(
    logits: &[f64],
    boxes: &[f64],
    n_q: usize,
    n_c: usize,
    targets: &DetTargets,
    cfg: &DetLossConfig,
) -> Vec<f64> {
    let n_gt = targets.len();
    let mut cost = vec![0.0; n_q * n_gt];
    let eps = 1e-8;
    for q in 0..n_q {
        let bq = &boxes[q * 4..(q + 1) * 4];
        let pred = BoxXYXY::new(
            bq[0] - bq[2] / 2.0,
            bq[1] - bq[3] / 2.0,
            bq[0] + bq[2] / 2.0,
            bq[1] + bq[3] / 2.0,
        );
        for g in 0..n_gt {
            let z = logits[q * n_c + targets.classes[g]];
            let p = 1.0 / (1.0 + (-z).exp());
            let pos_cost = cfg.focal_alpha * (1.0 - p).powf(cfg.focal_gamma) * -(p + eps).ln();
            let neg_cost =
                (1.0 - cfg.focal_alpha) * p.powf(cfg.focal_gamma) * -(1.0 - p + eps).ln();
            let class_cost = pos_cost - neg_cost;

            let tb = &targets.boxes_cxcywh[g];
            let l1: f64 = bq.iter().zip(tb).map(|(a, b)| (a - b).abs()).sum();
            let gt = BoxXYXY::new(
                tb[0] - tb[2] / 2.0,
                tb[1] - tb[3] / 2.0,
                tb[0] + tb[2] / 2.0,
                tb[1] + tb[3] / 2.0,
            );
            let giou_cost = -giou(&pred, &gt).unwrap_or(-1.0);
            cost[q * n_gt + g] = cfg.class_weight * class_cost
                + cfg.l1_weight * l1
                + cfg.giou_weight * giou_cost;
        }
    }
    cost
}

pub struct DetLossParts<E: Element> {
    pub total: Tensor<E>,
    pub focal: Tensor<E>,
    pub l1: Tensor<E>,
    pub giou: Tensor<E>,
    pub assignment: MatchResult,
}

/// Matches queries to targets with the same cost terms as the loss, then
/// evaluates the weighted focal + L1 + GIoU loss.
pub fn det_loss<E: Element>(
    tape: &Tape<E>,
    class_logits: &Tensor<E>,
    boxes_cxcywh: &Tensor<E>,
    targets: &DetTargets,
    cfg: &DetLossConfig,
) -> Result<DetLossParts<E>> {
    let n_q = class_logits.shape()[0];
    let n_c = class_logits.shape()[1];
    let logits_f64: Vec<f64> = class_logits.data().iter().map(|v| v.to_f64_lossy()).collect();
    let boxes_f64: Vec<f64> = boxes_cxcywh.data().iter().map(|v| v.to_f64_lossy()).collect();
    let assignment = if targets.is_empty() {
        MatchResult {
            pairs: vec![],
            total_cost: 0.0,
        }
    } else {
        let cost = matching_cost(&logits_f64, &boxes_f64, n_q, n_c, targets, cfg);
        hungarian_match(&cost, n_q, targets.len())?
    };
    det_loss_matched(tape, class_logits, boxes_cxcywh, targets, assignment, cfg)
}

/// Loss under a fixed assignment; exposed so gradient checks probe a locally
/// smooth function (the assignment itself is piecewise constant).
pub fn det_loss_matched<E: Element>(
    tape: &Tape<E>,
    class_logits: &Tensor<E>,
    boxes_cxcywh: &Tensor<E>,
    targets: &DetTargets,
    assignment: MatchResult,
    cfg: &DetLossConfig,
) -> Result<DetLossParts<E>> {
    let n_gt = targets.len();
    let norm = n_gt.max(1);
    let positives: Vec<(usize, usize)> = assignment
        .pairs
        .iter()
        .map(|&(q, g)| (q, targets.classes[g]))
        .collect();
    let focal = focal_loss(
        tape,
        class_logits,
        &positives,
        cfg.focal_alpha,
        cfg.focal_gamma,
        norm,
    )?;

    let (l1, giou_loss) = if assignment.pairs.is_empty() {
        (Tensor::scalar(E::zero()), Tensor::scalar(E::zero()))
    } else {
        let q_idx: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
        let matched = ops::select_rows(tape, boxes_cxcywh, &q_idx)?;
        let mut tgt = Vec::with_capacity(assignment.pairs.len() * 4);
        for &(_, g) in &assignment.pairs {
            tgt.extend(targets.boxes_cxcywh[g].iter().map(|&v| E::from_f64(v)));
        }
        let tgt = Tensor::from_vec(&[assignment.pairs.len(), 4], tgt)?;

        let diff = ops::abs(tape, &ops::sub(tape, &matched, &tgt)?);
        let l1 = ops::scale(
            tape,
            &ops::sum_all(tape, &diff)?,
            E::from_f64(1.0 / norm as f64),
        );

        let pred_corners = boxes_to_corners(tape, &matched)?;
        let tgt_corners = boxes_to_corners(tape, &tgt)?;
        let g = giou_rows(tape, &pred_corners, &tgt_corners)?;
        let one_minus = ops::affine(tape, &g, -E::one(), E::one());
        let gl = ops::scale(
            tape,
            &ops::sum_all(tape, &one_minus)?,
            E::from_f64(1.0 / norm as f64),
        );
        (l1, gl)
    };

    let total = ops::add(
        tape,
        &ops::scale(tape, &focal, E::from_f64(cfg.class_weight)),
        &ops::add(
            tape,
            &ops::scale(tape, &l1, E::from_f64(cfg.l1_weight)),
            &ops::scale(tape, &giou_loss, E::from_f64(cfg.giou_weight)),
        )?,
    )?;

    Ok(DetLossParts {
        total,
        focal,
        l1,
        giou: giou_loss,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::gradcheck;
    use crate::tensor::Tape;

    #[test]
    fn giou_identical_boxes() {
        let a = BoxXYXY::new(0.1, 0.1, 0.4, 0.6);
        assert!((giou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn giou_hand_case_disjoint_thirds() {
        // A=(0,0,1,1), B=(2,0,3,1): IoU 0, enclosing 3, union 2 -> -1/3
        let a = BoxXYXY::new(0.0, 0.0, 1.0, 1.0);
        let b = BoxXYXY::new(2.0, 0.0, 3.0, 1.0);
        assert!((giou(&a, &b).unwrap() + 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn giou_hand_case_overlapping() {
        // A=(0,0,2,2), B=(1,1,3,3): inter 1, union 7, C 9 -> 1/7 - 2/9 = -5/63
        let a = BoxXYXY::new(0.0, 0.0, 2.0, 2.0);
        let b = BoxXYXY::new(1.0, 1.0, 3.0, 3.0);
        assert!((giou(&a, &b).unwrap() + 5.0 / 63.0).abs() < 1e-9);
    }

    #[test]
    fn giou_symmetry_and_separation_monotonicity() {
        let a = BoxXYXY::new(0.0, 0.0, 1.0, 1.0);
        let mut prev = 1.0;
        for step in 1..6 {
            let off = step as f64 * 0.7;
            let b = BoxXYXY::new(1.2 + off, 0.0, 2.2 + off, 1.0);
            let g = giou(&a, &b).unwrap();
            assert!((g - giou(&b, &a).unwrap()).abs() < 1e-12);
            assert!(g < prev, "giou must strictly decrease with separation");
            assert!(g > -1.0 && g <= 1.0);
            prev = g;
        }
    }

    #[test]
    fn giou_rejects_degenerate_boxes() {
        let a = BoxXYXY::new(0.2, 0.2, 0.2, 0.4);
        let b = BoxXYXY::new(0.0, 0.0, 1.0, 1.0);
        assert!(giou(&a, &b).is_err());
    }

    #[test]
    fn giou_rows_matches_scalar_route() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::<f64>::inactive();
        for _ in 0..50 {
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                let x1: f64 = rng.gen_range(0.0..0.7);
                let y1: f64 = rng.gen_range(0.0..0.7);
                let w: f64 = rng.gen_range(0.05..0.3);
                let h: f64 = rng.gen_range(0.05..0.3);
                BoxXYXY::new(x1, y1, x1 + w, y1 + h)
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let at = Tensor::from_vec(&[1, 4], vec![a.x1, a.y1, a.x2, a.y2]).unwrap();
            let bt = Tensor::from_vec(&[1, 4], vec![b.x1, b.y1, b.x2, b.y2]).unwrap();
            let g_tensor = giou_rows(&tape, &at, &bt).unwrap().item();
            let g_scalar = giou(&a, &b).unwrap();
            assert!((g_tensor - g_scalar).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_saturated_predictions_vanish() {
        let tape = Tape::<f64>::new();
        // Positive at (0,1) with huge logit; negatives hugely negative.
        let logits = Tensor::from_vec(&[2, 2], vec![-40.0, 40.0, -40.0, -40.0]).unwrap();
        let loss = focal_loss(&tape, &logits, &[(0, 1)], 0.25, 2.0, 1).unwrap();
        assert!(loss.item().abs() < 1e-12);
    }

    #[test]
    fn focal_single_positive_hand_value() {
        // p = 0.9, alpha 0.25, gamma 2: 0.25 * 0.01 * -ln(0.9) = 2.634e-4
        let z = (0.9f64 / 0.1).ln();
        let tape = Tape::<f64>::new();
        let logits = Tensor::from_vec(&[1, 1], vec![z]).unwrap();
        let loss = focal_loss(&tape, &logits, &[(0, 0)], 0.25, 2.0, 1).unwrap();
        let expect = 0.25 * (1.0 - 0.9f64).powi(2) * -(0.9f64.ln());
        assert!((loss.item() - expect).abs() < 1e-12);
        assert!((loss.item() - 2.634e-4).abs() < 1e-6);
    }

    #[test]
    fn focal_gamma_zero_alpha_half_is_half_cross_entropy() {
        let tape = Tape::<f64>::new();
        let logits = Tensor::from_vec(&[1, 2], vec![0.3, -0.8]).unwrap();
        let loss = focal_loss(&tape, &logits, &[(0, 0)], 0.5, 0.0, 1).unwrap();
        let p0 = 1.0 / (1.0 + (-0.3f64).exp());
        let p1 = 1.0 / (1.0 + 0.8f64.exp());
        let ce = -(p0.ln()) - (1.0 - p1).ln();
        assert!((loss.item() - 0.5 * ce).abs() < 1e-12);
    }

    #[test]
    fn focal_rejects_bad_params() {
        let tape = Tape::<f64>::new();
        let logits = Tensor::zeros(&[1, 2]).unwrap();
        assert!(focal_loss(&tape, &logits, &[], 0.0, 2.0, 1).is_err());
        assert!(focal_loss(&tape, &logits, &[], 0.25, -1.0, 1).is_err());
    }

    #[test]
    fn det_loss_perfect_predictions_near_zero() {
        let tape = Tape::<f64>::new();
        let targets = DetTargets {
            classes: vec![1],
            boxes_cxcywh: vec![[0.5, 0.5, 0.2, 0.2]],
        };
        let logits = Tensor::from_vec(&[2, 3], vec![-40.0, 40.0, -40.0, -40.0, -40.0, -40.0]).unwrap();
        let boxes = Tensor::from_vec(&[2, 4], vec![0.5, 0.5, 0.2, 0.2, 0.1, 0.1, 0.05, 0.05]).unwrap();
        let parts = det_loss(&tape, &logits, &boxes, &targets, &DetLossConfig::default()).unwrap();
        assert_eq!(parts.assignment.pairs, vec![(0, 0)]);
        assert!(parts.total.item().abs() < 1e-9, "{}", parts.total.item());
    }

    #[test]
    fn det_loss_empty_scene_is_pure_background() {
        let tape = Tape::<f64>::new();
        let targets = DetTargets::default();
        let logits = Tensor::from_vec(&[2, 2], vec![0.5, -0.5, 0.2, 0.1]).unwrap();
        let boxes = Tensor::from_vec(&[2, 4], vec![0.5; 8]).unwrap();
        let parts = det_loss(&tape, &logits, &boxes, &targets, &DetLossConfig::default()).unwrap();
        assert_eq!(parts.l1.item(), 0.0);
        assert_eq!(parts.giou.item(), 0.0);
        assert!(parts.focal.item() > 0.0);
        let cfg = DetLossConfig::default();
        assert!((parts.total.item() - cfg.class_weight * parts.focal.item()).abs() < 1e-12);
    }

    #[test]
    fn det_loss_gradcheck_fixed_assignment() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let n_q = 3;
        let n_c = 2;
        let logits: Vec<f64> = (0..n_q * n_c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let boxes: Vec<f64> = (0..n_q * 4).map(|_| rng.gen_range(0.25..0.75)).collect();
        let targets = DetTargets {
            classes: vec![0, 1],
            boxes_cxcywh: vec![[0.3, 0.3, 0.2, 0.25], [0.7, 0.6, 0.15, 0.2]],
        };
        let assignment = MatchResult {
            pairs: vec![(0, 0), (2, 1)],
            total_cost: 0.0,
        };
        let report = gradcheck(
            move |tape, ins| {
                let parts = det_loss_matched(
                    tape,
                    &ins[0],
                    &ins[1],
                    &targets,
                    assignment.clone(),
                    &DetLossConfig::default(),
                )?;
                Ok(parts.total)
            },
            &[
                Tensor::from_vec(&[n_q, n_c], logits).unwrap(),
                Tensor::from_vec(&[n_q, 4], boxes).unwrap(),
            ],
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "max err {}", report.max_error);
    }
}
