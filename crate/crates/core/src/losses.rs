//! Ground-truth heatmap synthesis and the training losses: MSE gaze loss,
//! gaze box loss (one minus mean in-box heatmap energy), the
//! energy-aggregation baseline, and the weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::BoxXYXY;
use crate::tensor::{ops, Element, Tape, Tensor};

pub const HEATMAP_SIZE: usize = 64;
pub const DEFAULT_SIGMA: f64 = 3.0;

/// Loss weights for the total objective `L = L_det + alpha L_gaze + beta L_gb`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1000.0,
            beta: 10.0,
        }
    }
}

/// A normalized box mapped onto heatmap pixels: floor on mins, ceil on
/// maxes, clamped to the grid. Half-open ranges; never empty for a valid
/// input box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRegion {
    pub x_lo: usize,
    pub x_hi: usize,
    pub y_lo: usize,
    pub y_hi: usize,
}

impl PixelRegion {
    pub fn width(&self) -> usize {
        self.x_hi - self.x_lo
    }

    pub fn height(&self) -> usize {
        self.y_hi - self.y_lo
    }

    pub fn count(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x_lo && x < self.x_hi && y >= self.y_lo && y < self.y_hi
    }
}

/// Maps normalized box corners to heatmap pixels.
pub fn heatmap_box_region(bbox: &BoxXYXY, size: usize) -> Result<PixelRegion> {
    if !(bbox.x1 < bbox.x2 && bbox.y1 < bbox.y2) {
        return Err(Error::contract(
            "heatmap_box_region",
            format!("degenerate box {bbox:?}"),
        ));
    }
    let s = size as f64;
    let x_lo = ((bbox.x1 * s).floor().max(0.0) as usize).min(size - 1);
    let y_lo = ((bbox.y1 * s).floor().max(0.0) as usize).min(size - 1);
    let x_hi = ((bbox.x2 * s).ceil() as usize).clamp(x_lo + 1, size);
    let y_hi = ((bbox.y2 * s).ceil() as usize).clamp(y_lo + 1, size);
    Ok(PixelRegion {
        x_lo,
        x_hi,
        y_lo,
        y_hi,
    })
}

/// Gaussian ground-truth heatmap on a `size x size` grid, peak-normalized so
/// the maximum is exactly 1. The gaze point maps to pixel coordinates with
/// pixel-center convention; sigma is in heatmap pixels.
pub fn gt_heatmap(gaze_point: (f64, f64), sigma_x: f64, sigma_y: f64, size: usize) -> Result<Vec<f64>> {
    let (qx, qy) = gaze_point;
    if !(0.0..=1.0).contains(&qx) || !(0.0..=1.0).contains(&qy) {
        return Err(Error::contract(
            "gt_heatmap",
            format!("gaze point ({qx}, {qy}) outside the unit square"),
        ));
    }
    if sigma_x <= 0.0 || sigma_y <= 0.0 {
        return Err(Error::contract("gt_heatmap", "sigma must be positive"));
    }
    let s = size as f64;
    let px = qx * s - 0.5;
    let py = qy * s - 0.5;
    // The 1/(2 pi sx sy) front factor cancels under peak normalization and
    // is left out.
    let mut grid = vec![0.0f64; size * size];
    let mut max = f64::NEG_INFINITY;
    for r in 0..size {
        let dy = (r as f64 - py) / sigma_y;
        for c in 0..size {
            let dx = (c as f64 - px) / sigma_x;
            let v = (-0.5 * (dx * dx + dy * dy)).exp();
            grid[r * size + c] = v;
            if v > max {
                max = v;
            }
        }
    }
    for v in &mut grid {
        *v /= max;
    }
    Ok(grid)
}

pub fn gt_heatmap_tensor<E: Element>(
    gaze_point: (f64, f64),
    sigma: f64,
    size: usize,
) -> Result<Tensor<E>> {
    let grid = gt_heatmap(gaze_point, sigma, sigma, size)?;
    Tensor::from_vec(&[size, size], grid.into_iter().map(E::from_f64).collect())
}

/// Mean squared error between predicted and ground-truth heatmaps.
pub fn gaze_loss<E: Element>(tape: &Tape<E>, m: &Tensor<E>, t: &Tensor<E>) -> Result<Tensor<E>> {
    if m.shape() != t.shape() {
        return Err(Error::shape(
            "gaze_loss",
            format!("heatmap shapes {:?} vs {:?}", m.shape(), t.shape()),
        ));
    }
    let d = ops::sub(tape, m, t)?;
    let sq = ops::mul(tape, &d, &d)?;
    ops::mean_all(tape, &sq)
}

fn region_mask<E: Element>(region: &PixelRegion, size: usize) -> Tensor<E> {
    let mut mask = vec![E::zero(); size * size];
    for y in region.y_lo..region.y_hi {
        for x in region.x_lo..region.x_hi {
            mask[y * size + x] = E::one();
        }
    }
    Tensor::from_vec(&[size, size], mask).expect("mask shape is valid")
}

fn check_heatmap_shape<E: Element>(op: &'static str, m: &Tensor<E>) -> Result<usize> {
    let s = m.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::shape(op, format!("need a square heatmap, got {s:?}")));
    }
    Ok(s[0])
}

/// `1 - mean(M)` over the gaze-box pixels. Bounded in [0, 1] for M in [0, 1].
pub fn gaze_box_loss<E: Element>(
    tape: &Tape<E>,
    m: &Tensor<E>,
    region: &PixelRegion,
) -> Result<Tensor<E>> {
    let size = check_heatmap_shape("gaze_box_loss", m)?;
    if region.count() == 0 || region.x_hi > size || region.y_hi > size {
        return Err(Error::contract(
            "gaze_box_loss",
            format!("empty or out-of-grid region {region:?}"),
        ));
    }
    let mask = region_mask::<E>(region, size);
    let masked = ops::mul(tape, m, &mask)?;
    let total = ops::sum_all(tape, &masked)?;
    // Divide (not multiply by a reciprocal) so all-ones gives exactly 0.
    let count = Tensor::scalar(E::from_f64(region.count() as f64));
    let mean_in = ops::div(tape, &total, &count)?;
    Ok(ops::affine(tape, &mean_in, -E::one(), E::one()))
}

/// `1 - (sum of M in the box) / (sum of M overall)`; the energy-aggregation
/// baseline this design is compared against.
pub fn energy_aggregation_loss<E: Element>(
    tape: &Tape<E>,
    m: &Tensor<E>,
    region: &PixelRegion,
) -> Result<Tensor<E>> {
    let size = check_heatmap_shape("energy_aggregation_loss", m)?;
    if region.count() == 0 || region.x_hi > size || region.y_hi > size {
        return Err(Error::contract(
            "energy_aggregation_loss",
            format!("empty or out-of-grid region {region:?}"),
        ));
    }
    let total_value: f64 = m.data().iter().map(|v| v.to_f64_lossy()).sum();
    if total_value <= 0.0 {
        return Err(Error::contract(
            "energy_aggregation_loss",
            "total heatmap energy must be positive",
        ));
    }
    let mask = region_mask::<E>(region, size);
    let masked = ops::mul(tape, m, &mask)?;
    let in_box = ops::sum_all(tape, &masked)?;
    let total = ops::sum_all(tape, m)?;
    let ratio = ops::div(tape, &in_box, &total)?;
    Ok(ops::affine(tape, &ratio, -E::one(), E::one()))
}

/// `L = L_det + alpha L_gaze + beta L_gb`. Rejects non-finite components so
/// the training loop can abort cleanly.
pub fn total_loss<E: Element>(
    tape: &Tape<E>,
    l_det: &Tensor<E>,
    l_gaze: &Tensor<E>,
    l_gb: &Tensor<E>,
    weights: &LossWeights,
) -> Result<Tensor<E>> {
    for (name, t) in [("L_det", l_det), ("L_gaze", l_gaze), ("L_gb", l_gb)] {
        if t.numel() != 1 {
            return Err(Error::contract("total_loss", format!("{name} must be scalar")));
        }
        if !t.item().to_f64_lossy().is_finite() {
            return Err(Error::Numeric(format!(
                "total_loss: component {name} is non-finite ({})",
                t.item()
            )));
        }
    }
    let weighted_gaze = ops::scale(tape, l_gaze, E::from_f64(weights.alpha));
    let weighted_gb = ops::scale(tape, l_gb, E::from_f64(weights.beta));
    ops::add(tape, &ops::add(tape, l_det, &weighted_gaze)?, &weighted_gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    fn center_of_pixel(c: usize, r: usize, size: usize) -> (f64, f64) {
        (
            (c as f64 + 0.5) / size as f64,
            (r as f64 + 0.5) / size as f64,
        )
    }

    #[test]
    fn gt_heatmap_peak_is_exactly_one() {
        for &(x, y) in &[(0.5, 0.5), (0.031, 0.97), (0.0, 0.0), (1.0, 1.0), (0.2031, 0.77)] {
            let g = gt_heatmap((x, y), 3.0, 3.0, 64).unwrap();
            let max = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(max, 1.0);
        }
    }

    #[test]
    fn gt_heatmap_neighbor_value() {
        // Gaze at a pixel center: one pixel away along x is exp(-1/18).
        let size = 64;
        let (qx, qy) = center_of_pixel(30, 20, size);
        let g = gt_heatmap((qx, qy), 3.0, 3.0, size).unwrap();
        assert_eq!(g[20 * size + 30], 1.0);
        let expect = (-1.0f64 / 18.0).exp();
        assert!((g[20 * size + 31] - expect).abs() < 1e-12);
        assert!((expect - 0.94595).abs() < 1e-5);
    }

    #[test]
    fn gt_heatmap_is_mirror_symmetric() {
        let size = 64;
        let (qx, qy) = center_of_pixel(32, 32, size);
        let g = gt_heatmap((qx, qy), 3.0, 3.0, size).unwrap();
        for d in 1..10usize {
            assert_eq!(g[32 * size + 32 - d], g[32 * size + 32 + d]);
            assert_eq!(g[(32 - d) * size + 32], g[(32 + d) * size + 32]);
        }
    }

    #[test]
    fn gt_heatmap_contract_errors() {
        assert!(gt_heatmap((1.2, 0.5), 3.0, 3.0, 64).is_err());
        assert!(gt_heatmap((0.5, -0.1), 3.0, 3.0, 64).is_err());
        assert!(gt_heatmap((0.5, 0.5), 0.0, 3.0, 64).is_err());
    }

    #[test]
    fn gaze_loss_identities() {
        let tape = Tape::<f64>::new();
        let t = gt_heatmap_tensor::<f64>((0.4, 0.6), 3.0, 64).unwrap();
        assert_eq!(gaze_loss(&tape, &t, &t).unwrap().item(), 0.0);

        let shifted_data: Vec<f64> = t.data().iter().map(|v| v + 0.1).collect();
        let shifted = Tensor::from_vec(&[64, 64], shifted_data).unwrap();
        let l = gaze_loss(&tape, &shifted, &t).unwrap().item();
        assert!((l - 0.01).abs() < 1e-12);
    }

    #[test]
    fn gaze_loss_matches_two_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let m_data: Vec<f64> = (0..64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let t_data: Vec<f64> = (0..64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut acc = 0.0;
        for r in 0..64 {
            for c in 0..64 {
                let d = m_data[r * 64 + c] - t_data[r * 64 + c];
                acc += d * d;
            }
        }
        let oracle = acc / (64.0 * 64.0);
        let tape = Tape::<f64>::new();
        let m = Tensor::from_vec(&[64, 64], m_data).unwrap();
        let t = Tensor::from_vec(&[64, 64], t_data).unwrap();
        let got = gaze_loss(&tape, &m, &t).unwrap().item();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn gaze_loss_shape_mismatch() {
        let tape = Tape::<f64>::new();
        let a = Tensor::<f64>::zeros(&[64, 64]).unwrap();
        let b = Tensor::<f64>::zeros(&[32, 32]).unwrap();
        assert!(gaze_loss(&tape, &a, &b).is_err());
    }

    #[test]
    fn box_region_mapping_never_empty() {
        let tiny = BoxXYXY::new(0.501, 0.501, 0.502, 0.502);
        let r = heatmap_box_region(&tiny, 64).unwrap();
        assert!(r.count() >= 1);
        let full = BoxXYXY::new(0.0, 0.0, 1.0, 1.0);
        let r = heatmap_box_region(&full, 64).unwrap();
        assert_eq!(r.count(), 64 * 64);
        assert!(heatmap_box_region(&BoxXYXY::new(0.5, 0.5, 0.5, 0.6), 64).is_err());
    }

    #[test]
    fn gaze_box_loss_exact_identities() {
        let tape = Tape::<f64>::new();
        let region = heatmap_box_region(&BoxXYXY::new(0.25, 0.25, 0.5, 0.5), 64).unwrap();

        let mut ones_in_box = vec![0.0f64; 64 * 64];
        for y in region.y_lo..region.y_hi {
            for x in region.x_lo..region.x_hi {
                ones_in_box[y * 64 + x] = 1.0;
            }
        }
        let m = Tensor::from_vec(&[64, 64], ones_in_box).unwrap();
        assert_eq!(gaze_box_loss(&tape, &m, &region).unwrap().item(), 0.0);

        let zeros = Tensor::<f64>::zeros(&[64, 64]).unwrap();
        assert_eq!(gaze_box_loss(&tape, &zeros, &region).unwrap().item(), 1.0);

        let half = Tensor::full(&[64, 64], 0.5f64).unwrap();
        assert!((gaze_box_loss(&tape, &half, &region).unwrap().item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn energy_loss_identities() {
        let tape = Tape::<f64>::new();
        // box covering exactly the left-top quadrant (25% of area)
        let region = heatmap_box_region(&BoxXYXY::new(0.0, 0.0, 0.5, 0.5), 64).unwrap();
        assert_eq!(region.count(), 32 * 32);

        // 0.5 sums exactly, so the area ratio is exact too
        let uniform = Tensor::full(&[64, 64], 0.5f64).unwrap();
        let l = energy_aggregation_loss(&tape, &uniform, &region).unwrap().item();
        assert_eq!(l, 0.75);
        let uniform = Tensor::full(&[64, 64], 0.37f64).unwrap();
        let l = energy_aggregation_loss(&tape, &uniform, &region).unwrap().item();
        assert!((l - 0.75).abs() < 1e-12);

        let mut inside_only = vec![0.0f64; 64 * 64];
        for y in 0..32 {
            for x in 0..32 {
                inside_only[y * 64 + x] = 0.8;
            }
        }
        let m = Tensor::from_vec(&[64, 64], inside_only).unwrap();
        assert_eq!(energy_aggregation_loss(&tape, &m, &region).unwrap().item(), 0.0);

        let mut outside_only = vec![0.3f64; 64 * 64];
        for y in 0..32 {
            for x in 0..32 {
                outside_only[y * 64 + x] = 0.0;
            }
        }
        let m = Tensor::from_vec(&[64, 64], outside_only).unwrap();
        assert_eq!(energy_aggregation_loss(&tape, &m, &region).unwrap().item(), 1.0);

        let zeros = Tensor::<f64>::zeros(&[64, 64]).unwrap();
        assert!(energy_aggregation_loss(&tape, &zeros, &region).is_err());
    }

    #[test]
    fn in_box_increase_strictly_decreases_both_losses() {
        let tape = Tape::<f64>::new();
        let region = heatmap_box_region(&BoxXYXY::new(0.2, 0.2, 0.6, 0.6), 64).unwrap();
        let mut data = vec![0.3f64; 64 * 64];
        let base_gb = {
            let m = Tensor::from_vec(&[64, 64], data.clone()).unwrap();
            gaze_box_loss(&tape, &m, &region).unwrap().item()
        };
        let base_eng = {
            let m = Tensor::from_vec(&[64, 64], data.clone()).unwrap();
            energy_aggregation_loss(&tape, &m, &region).unwrap().item()
        };
        data[(region.y_lo + 1) * 64 + region.x_lo + 1] += 0.2;
        let m = Tensor::from_vec(&[64, 64], data).unwrap();
        assert!(gaze_box_loss(&tape, &m, &region).unwrap().item() < base_gb);
        assert!(energy_aggregation_loss(&tape, &m, &region).unwrap().item() < base_eng);
    }

    #[test]
    fn total_loss_arithmetic() {
        let tape = Tape::<f64>::new();
        let l_det = Tensor::scalar(1.0);
        let l_gaze = Tensor::scalar(0.001);
        let l_gb = Tensor::scalar(0.05);
        let w = LossWeights::default();
        let total = total_loss(&tape, &l_det, &l_gaze, &l_gb, &w).unwrap().item();
        assert!((total - 2.5).abs() < 1e-12);

        let zero_w = LossWeights { alpha: 0.0, beta: 0.0 };
        let total = total_loss(&tape, &l_det, &l_gaze, &l_gb, &zero_w).unwrap().item();
        assert_eq!(total, 1.0);
    }

    #[test]
    fn total_loss_rejects_non_finite() {
        let tape = Tape::<f64>::new();
        let bad = Tensor::scalar(f64::NAN);
        let ok = Tensor::scalar(0.0);
        let err = total_loss(&tape, &bad, &ok, &ok, &LossWeights::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn gaze_box_loss_gradient_is_uniform_inside() {
        let tape = Tape::<f64>::new();
        let region = heatmap_box_region(&BoxXYXY::new(0.25, 0.25, 0.75, 0.75), 8).unwrap();
        let m = Tensor::leaf(&[8, 8], vec![0.4; 64]).unwrap();
        let l = gaze_box_loss(&tape, &m, &region).unwrap();
        backward(&tape, &l).unwrap();
        let g = m.grad().unwrap();
        let inv = -1.0 / region.count() as f64;
        for y in 0..8 {
            for x in 0..8 {
                let expect = if region.contains(x, y) { inv } else { 0.0 };
                assert!((g[y * 8 + x] - expect).abs() < 1e-15);
            }
        }
    }
}
