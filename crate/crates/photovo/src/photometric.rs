//! Per-pixel photometric error maps, statistical truncation, occlusion and
//! explainability masking, and the scalar two-/three-frame energies.
//!
//! Masking order: raw per-pixel errors are multiplied by the combined mask
//! first, then truncation statistics run over the still-active pixels. Each
//! directed term reduces to the mean over its active pixels, which keeps the
//! forward and backward terms balanced when their valid counts differ.

use nalgebra::Matrix4;

use crate::error::{Error, Result};
use crate::geometry::{compose, invert_rigid};
use crate::warp::{inverse_warp, Camera, DepthMap, Image, WarpResult};

/// Slack in meters when comparing sampled source depth against the
/// transformed point's depth in the occlusion test.
pub const DELTA_Z: f64 = 0.1;

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Row-major per-pixel weights in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl MaskMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected_w: width,
                expected_h: height,
                got_w: data.len() % width.max(1),
                got_h: data.len() / width.max(1),
                context: "mask buffer length",
            });
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig(
                "mask values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1.0; width * height],
        }
    }
}

/// Nonnegative per-pixel error values with an activity bit. Inactive pixels
/// hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub active: Vec<bool>,
}

impl ErrorMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
            active: vec![false; width * height],
        }
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Mean over active pixels; error when none are active.
    pub fn mean_active(&self) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (v, &a) in self.data.iter().zip(&self.active) {
            if a {
                sum += v;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::DegenerateWindow);
        }
        Ok(sum / n as f64)
    }
}

/// Which per-pixel loss the energy uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    TruncatedL1,
    L1Untruncated,
    Ssim,
}

/// 2- or 3-frame correction window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameWindow {
    Two,
    Three,
}

/// Runtime knobs for the energy: which loss, which masks, and the
/// three-frame balance factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyConfig {
    pub loss: LossKind,
    pub use_occlusion_mask: bool,
    pub use_explainability_mask: bool,
    /// Depths beyond this are trusted regardless of the occlusion test (m).
    pub d_m: f64,
    /// Weight of the adjacent-frame pair in the three-frame energy.
    pub alpha: f64,
    pub frames: FrameWindow,
    /// Use the depth comparison exactly as written in the occlusion formula
    /// (sampled source depth vs target depth) instead of the frame-consistent
    /// default (sampled source depth vs transformed depth).
    pub occlusion_literal: bool,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::TruncatedL1,
            use_occlusion_mask: true,
            use_explainability_mask: true,
            d_m: 5.0,
            alpha: 0.8,
            frames: FrameWindow::Two,
            occlusion_literal: false,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be in (0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.d_m > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "d_m must be positive, got {}",
                self.d_m
            )));
        }
        Ok(())
    }
}

/// One frame of the working set: intensity image, depth map, and an optional
/// externally supplied explainability weighting.
#[derive(Debug, Clone)]
pub struct Frame {
    pub image: Image,
    pub depth: DepthMap,
    pub explainability: Option<MaskMap>,
}

impl Frame {
    pub fn new(image: Image, depth: DepthMap, explainability: Option<MaskMap>) -> Result<Self> {
        let (w, h) = (image.width, image.height);
        if (depth.width, depth.height) != (w, h) {
            return Err(Error::DimensionMismatch {
                expected_w: w,
                expected_h: h,
                got_w: depth.width,
                got_h: depth.height,
                context: "frame depth",
            });
        }
        if let Some(m) = &explainability {
            if (m.width, m.height) != (w, h) {
                return Err(Error::DimensionMismatch {
                    expected_w: w,
                    expected_h: h,
                    got_w: m.width,
                    got_h: m.height,
                    context: "explainability mask",
                });
            }
        }
        Ok(Self {
            image,
            depth,
            explainability,
        })
    }
}

fn check_same_dims(a: (usize, usize), b: (usize, usize), context: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected_w: a.0,
            expected_h: a.1,
            got_w: b.0,
            got_h: b.1,
            context,
        });
    }
    Ok(())
}

/// Per-pixel mean-over-channels |A - B|, active where `valid` is nonzero.
pub fn photometric_l1(a: &Image, b: &Image, valid: &MaskMap) -> Result<ErrorMap> {
    check_same_dims((a.width, a.height), (b.width, b.height), "l1 images")?;
    check_same_dims((a.width, a.height), (valid.width, valid.height), "l1 valid mask")?;
    if a.channels != b.channels {
        return Err(Error::InvalidConfig(format!(
            "channel mismatch: {} vs {}",
            a.channels, b.channels
        )));
    }
    let mut out = ErrorMap::zeros(a.width, a.height);
    let inv_c = 1.0 / a.channels as f64;
    for idx in 0..a.width * a.height {
        if valid.data[idx] == 0.0 {
            continue;
        }
        let mut e = 0.0f64;
        for c in 0..a.channels {
            e += (a.data[idx * a.channels + c] as f64 - b.data[idx * b.channels + c] as f64).abs();
        }
        out.data[idx] = e * inv_c;
        out.active[idx] = true;
    }
    Ok(out)
}

/// Statistical outlier rejection: deactivate every active pixel whose error
/// is at or above mean + population standard deviation.
///
/// The statistics are recomputed from scratch on each call and carry no
/// gradient. A uniform map (zero deviation) keeps all pixels, since in that
/// case the strict comparison would reject everything.
pub fn truncate_errors(e: &ErrorMap) -> Result<ErrorMap> {
    let n = e.active_count();
    if n == 0 {
        return Err(Error::DegenerateWindow);
    }
    let mut sum = 0.0f64;
    for (v, &a) in e.data.iter().zip(&e.active) {
        if a {
            sum += v;
        }
    }
    let mean = sum / n as f64;
    let mut var = 0.0f64;
    for (v, &a) in e.data.iter().zip(&e.active) {
        if a {
            var += (v - mean) * (v - mean);
        }
    }
    let std = (var / n as f64).sqrt();
    let threshold = mean + std;

    let mut out = e.clone();
    if std == 0.0 {
        return Ok(out);
    }
    for idx in 0..out.data.len() {
        if out.active[idx] && out.data[idx] >= threshold {
            out.active[idx] = false;
            out.data[idx] = 0.0;
        }
    }
    Ok(out)
}

fn occlusion_from_warp(
    d_tgt: &DepthMap,
    warp: &WarpResult,
    d_m: f64,
    literal: bool,
) -> Result<MaskMap> {
    let sampled = warp.sampled_depth.as_ref().ok_or(Error::MissingSampledDepth)?;
    let (w, h) = (d_tgt.width, d_tgt.height);
    check_same_dims((w, h), (warp.valid.width, warp.valid.height), "occlusion warp")?;
    let mut mask = MaskMap::zeros(w, h);
    for idx in 0..w * h {
        if warp.valid.data[idx] == 0.0 {
            continue;
        }
        let target_depth = d_tgt.data[idx] as f64;
        if target_depth > d_m {
            mask.data[idx] = 1.0;
            continue;
        }
        let s = sampled[idx];
        if s <= 0.0 {
            // Source depth unavailable at the reprojection; treat as occluded.
            continue;
        }
        let reference = if literal {
            target_depth
        } else {
            warp.z_transformed[idx] - DELTA_Z
        };
        if s > reference {
            mask.data[idx] = 1.0;
        }
    }
    Ok(mask)
}

/// Occlusion mask: 1 where the reprojection target is believed visible.
///
/// A pixel passes when the source depth sampled at its reprojection is not
/// in front of the transformed point (slack DELTA_Z), or when the target
/// depth exceeds d_m (distant pixels are trusted outright). Pixels with an
/// invalid warp or unavailable source depth get 0.
pub fn occlusion_mask(d_tgt: &DepthMap, warp: &WarpResult, d_m: f64) -> Result<MaskMap> {
    occlusion_from_warp(d_tgt, warp, d_m, false)
}

/// Literal-formula variant: compares sampled source depth against the target
/// frame's own depth.
pub fn occlusion_mask_literal(d_tgt: &DepthMap, warp: &WarpResult, d_m: f64) -> Result<MaskMap> {
    occlusion_from_warp(d_tgt, warp, d_m, true)
}

/// 3x3 box statistics for SSIM at a center pixel, one channel.
#[inline]
fn window_stats(a: &Image, b: &Image, x: usize, y: usize, c: usize) -> (f64, f64, f64, f64, f64) {
    let mut sa = 0.0;
    let mut sb = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    let mut sab = 0.0;
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            let xa = (x as isize + dx) as usize;
            let ya = (y as isize + dy) as usize;
            let va = a.pixel(xa, ya, c) as f64;
            let vb = b.pixel(xa, ya, c) as f64;
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
        }
    }
    let mu_a = sa / 9.0;
    let mu_b = sb / 9.0;
    let var_a = saa / 9.0 - mu_a * mu_a;
    let var_b = sbb / 9.0 - mu_b * mu_b;
    let cov = sab / 9.0 - mu_a * mu_b;
    (mu_a, mu_b, var_a, var_b, cov)
}

#[inline]
pub(crate) fn ssim_from_stats(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2))
}

/// Per-pixel (1 - SSIM)/2 with 3x3 box statistics, averaged over channels.
///
/// Active only on interior pixels whose full 3x3 window is valid. No
/// statistical truncation is applied to SSIM errors.
pub fn ssim_error(a: &Image, b: &Image, valid: &MaskMap) -> Result<ErrorMap> {
    check_same_dims((a.width, a.height), (b.width, b.height), "ssim images")?;
    check_same_dims((a.width, a.height), (valid.width, valid.height), "ssim valid mask")?;
    if a.channels != b.channels {
        return Err(Error::InvalidConfig(format!(
            "channel mismatch: {} vs {}",
            a.channels, b.channels
        )));
    }
    let (w, h) = (a.width, a.height);
    let mut out = ErrorMap::zeros(w, h);
    if w < 3 || h < 3 {
        return Ok(out);
    }
    for y in 1..h - 1 {
        'pixel: for x in 1..w - 1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let idx = (y as isize + dy) as usize * w + (x as isize + dx) as usize;
                    if valid.data[idx] == 0.0 {
                        continue 'pixel;
                    }
                }
            }
            let mut e = 0.0;
            for c in 0..a.channels {
                let (mu_a, mu_b, var_a, var_b, cov) = window_stats(a, b, x, y, c);
                e += (1.0 - ssim_from_stats(mu_a, mu_b, var_a, var_b, cov)) * 0.5;
            }
            let idx = y * w + x;
            out.data[idx] = e / a.channels as f64;
            out.active[idx] = true;
        }
    }
    Ok(out)
}

/// Everything one directed term produces; `weights` carries the frozen
/// combined mask value for every pixel that survived masking and truncation
/// (0 elsewhere), which is what the gradient pass treats as constant.
#[derive(Debug)]
pub struct DirectedTerm {
    pub scalar: f64,
    pub error_map: ErrorMap,
    pub warp: WarpResult,
    pub weights: Vec<f64>,
    pub n_active: usize,
}

/// Run one directed error term: warp source into target, apply the loss and
/// the configured masks, truncate if the loss asks for it, reduce to a mean.
pub fn directed_term(
    tgt: &Frame,
    src: &Frame,
    transform: &Matrix4<f64>,
    camera: &Camera,
    cfg: &EnergyConfig,
) -> Result<DirectedTerm> {
    cfg.validate()?;
    let src_depth = if cfg.use_occlusion_mask {
        Some(&src.depth)
    } else {
        None
    };
    let warp = inverse_warp(
        &tgt.depth,
        transform,
        &src.image,
        &camera.intrinsics,
        &camera.rays,
        src_depth,
    )?;

    let raw = match cfg.loss {
        LossKind::TruncatedL1 | LossKind::L1Untruncated => {
            photometric_l1(&warp.warped, &tgt.image, &warp.valid)?
        }
        LossKind::Ssim => ssim_error(&warp.warped, &tgt.image, &warp.valid)?,
    };

    // Combined mask, multiplied into the raw errors before truncation.
    let n = raw.data.len();
    let mut mask = vec![1.0f64; n];
    if cfg.use_occlusion_mask {
        let occ = occlusion_from_warp(&tgt.depth, &warp, cfg.d_m, cfg.occlusion_literal)?;
        for (m, o) in mask.iter_mut().zip(&occ.data) {
            *m *= *o as f64;
        }
    }
    if cfg.use_explainability_mask {
        if let Some(e) = &tgt.explainability {
            for (m, w) in mask.iter_mut().zip(&e.data) {
                *m *= *w as f64;
            }
        }
    }

    let mut masked = ErrorMap::zeros(raw.width, raw.height);
    for idx in 0..n {
        if raw.active[idx] && mask[idx] > 0.0 {
            masked.data[idx] = mask[idx] * raw.data[idx];
            masked.active[idx] = true;
        }
    }

    let final_map = if cfg.loss == LossKind::TruncatedL1 {
        truncate_errors(&masked)?
    } else {
        masked
    };

    let n_active = final_map.active_count();
    let scalar = final_map.mean_active()?;
    let mut weights = vec![0.0f64; n];
    for idx in 0..n {
        if final_map.active[idx] {
            weights[idx] = mask[idx];
        }
    }

    Ok(DirectedTerm {
        scalar,
        error_map: final_map,
        warp,
        weights,
        n_active,
    })
}

/// One directed error: scalar mean over active pixels plus the map.
pub fn directed_error(
    tgt: &Frame,
    src: &Frame,
    transform: &Matrix4<f64>,
    camera: &Camera,
    cfg: &EnergyConfig,
) -> Result<(f64, ErrorMap)> {
    let term = directed_term(tgt, src, transform, camera, cfg)?;
    Ok((term.scalar, term.error_map))
}

/// Two-frame energy: forward plus backward directed errors, with the
/// backward transform always derived by inversion of the forward one.
pub fn energy_two_frame(
    prev: &Frame,
    cur: &Frame,
    t_cur: &Matrix4<f64>,
    camera: &Camera,
    cfg: &EnergyConfig,
) -> Result<f64> {
    let forward = directed_term(cur, prev, t_cur, camera, cfg)?;
    let backward = directed_term(prev, cur, &invert_rigid(t_cur)?, camera, cfg)?;
    Ok(forward.scalar + backward.scalar)
}

/// Three-frame energy: alpha-weighted adjacent pair plus the skip pair
/// through the composed transform.
pub fn energy_three_frame(
    prev2: &Frame,
    prev: &Frame,
    cur: &Frame,
    t_prev: &Matrix4<f64>,
    t_cur: &Matrix4<f64>,
    camera: &Camera,
    cfg: &EnergyConfig,
) -> Result<f64> {
    let pair_adjacent = energy_two_frame(prev, cur, t_cur, camera, cfg)?;
    let t_skip = compose(t_prev, t_cur);
    let skip_backward = directed_term(prev2, cur, &invert_rigid(&t_skip)?, camera, cfg)?;
    let skip_forward = directed_term(cur, prev2, &t_skip, camera, cfg)?;
    let pair_skip = skip_backward.scalar + skip_forward.scalar;
    Ok(cfg.alpha * pair_adjacent + (1.0 - cfg.alpha) * pair_skip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pose_matrix, Intrinsics};
    use crate::warp::precompute_rays;
    use nalgebra::Vector3;

    fn constant_image(w: usize, h: usize, v: f32) -> Image {
        Image::new(w, h, 1, vec![v; w * h]).unwrap()
    }

    fn ones_mask(w: usize, h: usize) -> MaskMap {
        MaskMap::new(w, h, vec![1.0; w * h]).unwrap()
    }

    fn test_camera() -> Camera {
        let k = Intrinsics::new(64.0, 64.0, 7.5, 7.5, 16, 16).unwrap();
        Camera {
            rays: precompute_rays(&k),
            intrinsics: k,
        }
    }

    fn plane_frame(camera: &Camera, v: impl Fn(usize, usize) -> f32, depth: f32) -> Frame {
        let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
        let mut img = Image::zeros(w, h, 1);
        for y in 0..h {
            for x in 0..w {
                *img.pixel_mut(x, y, 0) = v(x, y);
            }
        }
        Frame::new(img, DepthMap::new(w, h, vec![depth; w * h]).unwrap(), None).unwrap()
    }

    #[test]
    fn l1_identical_is_zero() {
        let a = constant_image(4, 4, 0.7);
        let e = photometric_l1(&a, &a, &ones_mask(4, 4)).unwrap();
        assert!(e.data.iter().all(|&v| v == 0.0));
        assert_eq!(e.active_count(), 16);
    }

    #[test]
    fn l1_constant_difference() {
        let a = constant_image(4, 4, 0.75);
        let b = constant_image(4, 4, 0.5);
        let e = photometric_l1(&a, &b, &ones_mask(4, 4)).unwrap();
        assert!(e.data.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn l1_per_pixel_values() {
        let a = Image::new(3, 1, 1, vec![0.1, 0.2, 0.9]).unwrap();
        let b = Image::new(3, 1, 1, vec![0.0, 0.0, 0.0]).unwrap();
        let e = photometric_l1(&a, &b, &ones_mask(3, 1)).unwrap();
        for (got, want) in e.data.iter().zip([0.1f64, 0.2, 0.9]) {
            assert!((got - want).abs() < 1e-7);
        }
    }

    #[test]
    fn l1_rejects_mismatched_dims() {
        let a = constant_image(4, 4, 0.5);
        let b = constant_image(3, 4, 0.5);
        assert!(photometric_l1(&a, &b, &ones_mask(4, 4)).is_err());
    }

    #[test]
    fn truncate_hand_example() {
        // {1, 2, 10}: mean 13/3, population std sqrt(438/27), threshold 8.361.
        let mut e = ErrorMap::zeros(3, 1);
        e.data = vec![1.0, 2.0, 10.0];
        e.active = vec![true, true, true];

        // Independent re-computation of the expected threshold.
        let mean = (1.0 + 2.0 + 10.0) / 3.0;
        let var = ((1.0f64 - mean).powi(2) + (2.0 - mean).powi(2) + (10.0 - mean).powi(2)) / 3.0;
        let threshold = mean + var.sqrt();
        assert!((threshold - 8.361).abs() < 1e-3);

        let t = truncate_errors(&e).unwrap();
        assert_eq!(t.data, vec![1.0, 2.0, 0.0]);
        assert_eq!(t.active, vec![true, true, false]);
    }

    #[test]
    fn truncate_uniform_keeps_everything() {
        let mut e = ErrorMap::zeros(4, 1);
        e.data = vec![0.5; 4];
        e.active = vec![true; 4];
        let t = truncate_errors(&e).unwrap();
        assert_eq!(t.active_count(), 4);
        assert_eq!(t.data, e.data);
    }

    #[test]
    fn truncate_rejects_single_outlier() {
        let n = 100;
        let mut e = ErrorMap::zeros(n, 1);
        e.data = vec![0.01; n];
        e.data[57] = 100.0;
        e.active = vec![true; n];
        let t = truncate_errors(&e).unwrap();
        assert!(!t.active[57]);
        assert_eq!(t.data[57], 0.0);
        assert_eq!(t.active_count(), n - 1);
    }

    #[test]
    fn truncate_errors_empty_is_degenerate() {
        let e = ErrorMap::zeros(4, 4);
        assert!(matches!(truncate_errors(&e), Err(Error::DegenerateWindow)));
    }

    #[test]
    fn truncation_never_grows_active_set_or_energy() {
        let mut e = ErrorMap::zeros(10, 1);
        e.data = (0..10).map(|i| i as f64 * 0.3).collect();
        e.active = vec![true; 10];
        let t = truncate_errors(&e).unwrap();
        assert!(t.active_count() <= e.active_count());
        let sum_before: f64 = e.data.iter().sum();
        let sum_after: f64 = t.data.iter().sum();
        assert!(sum_after <= sum_before);
    }

    #[test]
    fn ssim_identical_is_zero() {
        let mut a = constant_image(8, 8, 0.4);
        for y in 0..8 {
            for x in 0..8 {
                *a.pixel_mut(x, y, 0) += 0.02 * ((x * 3 + y) % 5) as f32;
            }
        }
        let e = ssim_error(&a, &a, &ones_mask(8, 8)).unwrap();
        for idx in 0..64 {
            assert!(e.data[idx].abs() < 1e-9);
        }
        // Only the 6x6 interior is active.
        assert_eq!(e.active_count(), 36);
    }

    #[test]
    fn ssim_constant_patches_closed_form() {
        let a = constant_image(8, 8, 0.75);
        let b = constant_image(8, 8, 0.25);
        let e = ssim_error(&a, &b, &ones_mask(8, 8)).unwrap();
        let (ma, mb) = (0.75f64, 0.25f64);
        let ssim = (2.0 * ma * mb + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1);
        let expected = (1.0 - ssim) * 0.5;
        for y in 1..7 {
            for x in 1..7 {
                assert!((e.data[y * 8 + x] - expected).abs() < 5e-7);
            }
        }
    }

    #[test]
    fn ssim_range_in_unit_interval() {
        let mut a = constant_image(8, 8, 0.0);
        let mut b = constant_image(8, 8, 0.0);
        for y in 0..8 {
            for x in 0..8 {
                *a.pixel_mut(x, y, 0) = ((x + y) % 2) as f32;
                *b.pixel_mut(x, y, 0) = ((x + y + 1) % 2) as f32;
            }
        }
        let e = ssim_error(&a, &b, &ones_mask(8, 8)).unwrap();
        for idx in 0..64 {
            assert!((0.0..=1.0).contains(&e.data[idx]), "{}", e.data[idx]);
        }
    }

    #[test]
    fn occlusion_identity_consistent_depths() {
        let camera = test_camera();
        let f = plane_frame(&camera, |x, y| ((x + y) % 7) as f32 / 7.0, 4.0);
        let warp = inverse_warp(
            &f.depth,
            &Matrix4::identity(),
            &f.image,
            &camera.intrinsics,
            &camera.rays,
            Some(&f.depth),
        )
        .unwrap();
        let m = occlusion_mask(&f.depth, &warp, 5.0).unwrap();
        assert!(m.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn occlusion_far_field_override() {
        let camera = test_camera();
        let tgt = plane_frame(&camera, |x, _| x as f32 / 16.0, 50.0);
        // Source depths all tiny: the depth test alone would occlude
        // everything, but target depth > d_m forces trust.
        let src_depth = DepthMap::new(16, 16, vec![0.5; 256]).unwrap();
        let warp = inverse_warp(
            &tgt.depth,
            &Matrix4::identity(),
            &tgt.image,
            &camera.intrinsics,
            &camera.rays,
            Some(&src_depth),
        )
        .unwrap();
        let m = occlusion_mask(&tgt.depth, &warp, 5.0).unwrap();
        assert!(m.data.iter().all(|&v| v == 1.0));
        // With a huge d_m the same warp is fully occluded.
        let m = occlusion_mask(&tgt.depth, &warp, 1e6).unwrap();
        assert!(m.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn occlusion_requires_sampled_depth() {
        let camera = test_camera();
        let f = plane_frame(&camera, |_, _| 0.5, 4.0);
        let warp = inverse_warp(
            &f.depth,
            &Matrix4::identity(),
            &f.image,
            &camera.intrinsics,
            &camera.rays,
            None,
        )
        .unwrap();
        assert!(matches!(
            occlusion_mask(&f.depth, &warp, 5.0),
            Err(Error::MissingSampledDepth)
        ));
    }

    #[test]
    fn occlusion_literal_variant_compares_target_depth() {
        let camera = test_camera();
        let tgt = plane_frame(&camera, |_, _| 0.5, 4.0);
        // Sampled source depth 3.5 < target 4.0: literal test occludes.
        let src_depth = DepthMap::new(16, 16, vec![3.5; 256]).unwrap();
        let warp = inverse_warp(
            &tgt.depth,
            &Matrix4::identity(),
            &tgt.image,
            &camera.intrinsics,
            &camera.rays,
            Some(&src_depth),
        )
        .unwrap();
        let literal = occlusion_mask_literal(&tgt.depth, &warp, 5.0).unwrap();
        assert!(literal.data.iter().all(|&v| v == 0.0));
        // Default variant compares against z_transformed (= 4.0) - 0.1: the
        // 0.4 m violation still occludes, but a 0.05 m one would not.
        let src_depth_close = DepthMap::new(16, 16, vec![3.95; 256]).unwrap();
        let warp2 = inverse_warp(
            &tgt.depth,
            &Matrix4::identity(),
            &tgt.image,
            &camera.intrinsics,
            &camera.rays,
            Some(&src_depth_close),
        )
        .unwrap();
        assert!(occlusion_mask(&tgt.depth, &warp2, 5.0)
            .unwrap()
            .data
            .iter()
            .all(|&v| v == 1.0));
        assert!(occlusion_mask_literal(&tgt.depth, &warp2, 5.0)
            .unwrap()
            .data
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn directed_identical_frames_identity_is_zero() {
        let camera = test_camera();
        let f = plane_frame(&camera, |x, y| ((x * 5 + y * 3) % 11) as f32 / 11.0, 4.0);
        let cfg = EnergyConfig::default();
        let (scalar, _) = directed_error(&f, &f, &Matrix4::identity(), &camera, &cfg).unwrap();
        assert_eq!(scalar, 0.0);
    }

    #[test]
    fn all_ones_masks_reproduce_unmasked_error_map() {
        let camera = test_camera();
        let (w, h) = (16, 16);
        let mut f = plane_frame(&camera, |x, y| ((x * 5 + y * 3) % 11) as f32 / 11.0, 4.0);
        let g = plane_frame(&camera, |x, y| ((x * 7 + y) % 13) as f32 / 13.0, 4.0);
        let t = pose_matrix(&Vector3::new(0.0, 0.0, 0.002), &Vector3::new(0.01, 0.0, 0.0));

        let masked_cfg = EnergyConfig::default();
        let unmasked_cfg = EnergyConfig {
            use_occlusion_mask: false,
            use_explainability_mask: false,
            ..EnergyConfig::default()
        };

        // Identity-consistent depths keep the occlusion mask at 1 everywhere,
        // and an all-ones explainability mask multiplies by exactly 1.0.
        f.explainability = Some(MaskMap::new(w, h, vec![1.0; w * h]).unwrap());
        let (s1, m1) = directed_error(&f, &g, &t, &camera, &masked_cfg).unwrap();
        let (s2, m2) = directed_error(&f, &g, &t, &camera, &unmasked_cfg).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(m1.data, m2.data);
        assert_eq!(m1.active, m2.active);
    }

    #[test]
    fn two_frame_energy_zero_at_identity() {
        let camera = test_camera();
        let f = plane_frame(&camera, |x, y| ((x * 5 + y * 3) % 11) as f32 / 11.0, 4.0);
        let e = energy_two_frame(&f, &f, &Matrix4::identity(), &camera, &EnergyConfig::default())
            .unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn two_frame_energy_symmetry() {
        let camera = test_camera();
        let a = plane_frame(&camera, |x, y| ((x * 5 + y * 3) % 11) as f32 / 11.0, 4.0);
        let b = plane_frame(&camera, |x, y| ((x * 7 + y) % 13) as f32 / 13.0, 4.0);
        let cfg = EnergyConfig::default();

        // Exact case: axis-aligned transform whose inverse round-trips
        // bit-exactly.
        let t = pose_matrix(&Vector3::zeros(), &Vector3::new(0.02, -0.01, 0.005));
        let e_fwd = energy_two_frame(&a, &b, &t, &camera, &cfg).unwrap();
        let e_swap = energy_two_frame(&b, &a, &invert_rigid(&t).unwrap(), &camera, &cfg).unwrap();
        assert_eq!(e_fwd, e_swap);

        // General rigid transform: equality up to inversion round-off.
        let t = pose_matrix(&Vector3::new(0.003, -0.002, 0.001), &Vector3::new(0.02, 0.01, -0.03));
        let e_fwd = energy_two_frame(&a, &b, &t, &camera, &cfg).unwrap();
        let e_swap = energy_two_frame(&b, &a, &invert_rigid(&t).unwrap(), &camera, &cfg).unwrap();
        assert!((e_fwd - e_swap).abs() < 1e-12);
    }

    #[test]
    fn three_frame_energy_zero_for_identical_frames() {
        let camera = test_camera();
        let f = plane_frame(&camera, |x, y| ((x * 5 + y * 3) % 11) as f32 / 11.0, 4.0);
        let cfg = EnergyConfig {
            frames: FrameWindow::Three,
            ..EnergyConfig::default()
        };
        let e = energy_three_frame(
            &f,
            &f,
            &f,
            &Matrix4::identity(),
            &Matrix4::identity(),
            &camera,
            &cfg,
        )
        .unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn three_frame_alpha_one_reduces_to_two_frame() {
        let camera = test_camera();
        let a = plane_frame(&camera, |x, y| ((x * 5 + y * 3) % 11) as f32 / 11.0, 4.0);
        let b = plane_frame(&camera, |x, y| ((x * 7 + y) % 13) as f32 / 13.0, 4.0);
        let c = plane_frame(&camera, |x, y| ((x + y * 5) % 9) as f32 / 9.0, 4.0);
        let t_prev = pose_matrix(&Vector3::zeros(), &Vector3::new(0.01, 0.0, 0.02));
        let t_cur = pose_matrix(&Vector3::new(0.001, 0.0, 0.0), &Vector3::new(0.0, 0.01, 0.015));
        let cfg3 = EnergyConfig {
            alpha: 1.0,
            frames: FrameWindow::Three,
            ..EnergyConfig::default()
        };
        let cfg2 = EnergyConfig::default();
        let e3 = energy_three_frame(&a, &b, &c, &t_prev, &t_cur, &camera, &cfg3).unwrap();
        let e2 = energy_two_frame(&b, &c, &t_cur, &camera, &cfg2).unwrap();
        assert_eq!(e3, e2);
    }

    #[test]
    fn config_validation() {
        let bad_alpha = EnergyConfig {
            alpha: 0.0,
            ..EnergyConfig::default()
        };
        assert!(bad_alpha.validate().is_err());
        let bad_dm = EnergyConfig {
            d_m: -1.0,
            ..EnergyConfig::default()
        };
        assert!(bad_dm.validate().is_err());
    }
}
