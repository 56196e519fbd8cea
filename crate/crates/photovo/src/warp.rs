//! Differentiable inverse warping: unproject target pixels with their depth,
//! rigidly transform into the source camera, project, and bilinearly sample
//! the source frame. The unprojection ray grid is computed once per sequence.

use nalgebra::Matrix4;

use crate::error::{Error, Result};
use crate::geometry::{check_rigid, Intrinsics, Z_MIN};
use crate::photometric::MaskMap;

/// Coordinates this close to an integer are snapped onto it, so that warps
/// which land on the pixel grid analytically (identity, integer shifts) do so
/// bit-exactly despite round-off in the unproject/transform/project chain.
const COORD_SNAP: f64 = 1e-9;

/// Row-major intensity image, values in [0, 1], 1 or 3 channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidConfig(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch {
                expected_w: width,
                expected_h: height,
                got_w: data.len() / channels.max(1) % width.max(1),
                got_h: data.len() / (width * channels).max(1),
                context: "image buffer length",
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("image contains non-finite values".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize, c: usize) -> &mut f32 {
        &mut self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Row-major depth map in meters; 0 marks a pixel with no valid depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected_w: width,
                expected_h: height,
                got_w: data.len() % width.max(1),
                got_h: data.len() / width.max(1),
                context: "depth buffer length",
            });
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(
                "depth contains negative or non-finite values".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn depth(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] > 0.0
    }
}

/// Per-pixel unprojection rays: ray(u,v) * d is the camera-frame point of
/// pixel (u,v) at depth d. Computed once per sequence, shared read-only.
#[derive(Debug, Clone)]
pub struct RayGrid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl RayGrid {
    #[inline]
    pub fn ray(&self, x: usize, y: usize) -> &[f64; 3] {
        &self.data[y * self.width + x]
    }
}

/// Intrinsics bundled with their precomputed ray grid.
#[derive(Debug, Clone)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub rays: RayGrid,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics) -> Self {
        Self {
            rays: precompute_rays(&intrinsics),
            intrinsics,
        }
    }
}

/// Everything produced by one inverse warp, in the target frame's grid.
#[derive(Debug, Clone)]
pub struct WarpResult {
    /// Source image sampled at the reprojected coordinates.
    pub warped: Image,
    /// 1 where the warp is usable: valid target depth, z above Z_MIN, and
    /// source coordinates inside [0, W-1] x [0, H-1].
    pub valid: MaskMap,
    /// Per-pixel source-frame coordinates (u, v); meaningless where invalid.
    pub coords: Vec<[f64; 2]>,
    /// Depth of the transformed point in the source camera frame.
    pub z_transformed: Vec<f64>,
    /// Source depth map sampled at `coords` (0 = unavailable); present only
    /// when a source depth map was supplied.
    pub sampled_depth: Option<Vec<f64>>,
}

/// Build the unprojection ray grid for fixed intrinsics.
pub fn precompute_rays(k: &Intrinsics) -> RayGrid {
    let mut data = Vec::with_capacity(k.width * k.height);
    for y in 0..k.height {
        for x in 0..k.width {
            data.push([
                (x as f64 - k.cx) / k.fx,
                (y as f64 - k.cy) / k.fy,
                1.0,
            ]);
        }
    }
    RayGrid {
        width: k.width,
        height: k.height,
        data,
    }
}

#[inline]
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < COORD_SNAP {
        r
    } else {
        x
    }
}

/// Bilinear cell setup shared by sampling and its derivative: both corner
/// indices per axis plus fractions, clamped so u = W-1 stays inside the last
/// cell and single-row/column grids stay in range.
#[inline]
fn cell(u: f64, v: f64, width: usize, height: usize) -> (usize, usize, usize, usize, f64, f64) {
    let mut x0 = u.floor() as isize;
    let mut y0 = v.floor() as isize;
    if x0 >= width as isize - 1 {
        x0 = width as isize - 2;
    }
    if y0 >= height as isize - 1 {
        y0 = height as isize - 2;
    }
    let x0 = x0.max(0) as usize;
    let y0 = y0.max(0) as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    (x0, x1, y0, y1, u - x0 as f64, v - y0 as f64)
}

#[inline]
pub fn in_bounds(u: f64, v: f64, width: usize, height: usize) -> bool {
    u >= 0.0 && v >= 0.0 && u <= (width - 1) as f64 && v <= (height - 1) as f64
}

/// Bilinear interpolation of up to 3 channels at continuous (u, v).
///
/// Returns None when (u, v) lies outside [0, W-1] x [0, H-1]; no clamping.
pub fn bilinear_sample(img: &Image, u: f64, v: f64) -> Option<[f64; 3]> {
    if !in_bounds(u, v, img.width, img.height) {
        return None;
    }
    let (x0, x1, y0, y1, fu, fv) = cell(u, v, img.width, img.height);
    let mut out = [0.0f64; 3];
    let w00 = (1.0 - fu) * (1.0 - fv);
    let w10 = fu * (1.0 - fv);
    let w01 = (1.0 - fu) * fv;
    let w11 = fu * fv;
    for (c, o) in out.iter_mut().enumerate().take(img.channels) {
        let p00 = img.pixel(x0, y0, c) as f64;
        let p10 = img.pixel(x1, y0, c) as f64;
        let p01 = img.pixel(x0, y1, c) as f64;
        let p11 = img.pixel(x1, y1, c) as f64;
        *o = w00 * p00 + w10 * p10 + w01 * p01 + w11 * p11;
    }
    Some(out)
}

/// Bilinear value plus its derivative with respect to (u, v) per channel.
/// Caller guarantees (u, v) is in bounds.
pub fn bilinear_sample_with_grad(img: &Image, u: f64, v: f64) -> ([f64; 3], [f64; 3], [f64; 3]) {
    let (x0, x1, y0, y1, fu, fv) = cell(u, v, img.width, img.height);
    let mut val = [0.0f64; 3];
    let mut du = [0.0f64; 3];
    let mut dv = [0.0f64; 3];
    for c in 0..img.channels {
        let p00 = img.pixel(x0, y0, c) as f64;
        let p10 = img.pixel(x1, y0, c) as f64;
        let p01 = img.pixel(x0, y1, c) as f64;
        let p11 = img.pixel(x1, y1, c) as f64;
        val[c] = (1.0 - fu) * (1.0 - fv) * p00
            + fu * (1.0 - fv) * p10
            + (1.0 - fu) * fv * p01
            + fu * fv * p11;
        du[c] = (1.0 - fv) * (p10 - p00) + fv * (p11 - p01);
        dv[c] = (1.0 - fu) * (p01 - p00) + fu * (p11 - p10);
    }
    (val, du, dv)
}

/// Bilinear sample of a depth map; None when out of bounds or any of the four
/// neighbors has no valid depth (an interpolated depth across a hole is
/// meaningless for the occlusion test).
pub fn bilinear_sample_depth(depth: &DepthMap, u: f64, v: f64) -> Option<f64> {
    if !in_bounds(u, v, depth.width, depth.height) {
        return None;
    }
    let (x0, x1, y0, y1, fu, fv) = cell(u, v, depth.width, depth.height);
    let p00 = depth.depth(x0, y0) as f64;
    let p10 = depth.depth(x1, y0) as f64;
    let p01 = depth.depth(x0, y1) as f64;
    let p11 = depth.depth(x1, y1) as f64;
    if p00 <= 0.0 || p10 <= 0.0 || p01 <= 0.0 || p11 <= 0.0 {
        return None;
    }
    Some(
        (1.0 - fu) * (1.0 - fv) * p00
            + fu * (1.0 - fv) * p10
            + (1.0 - fu) * fv * p01
            + fu * fv * p11,
    )
}

/// Transform a target pixel's camera point into the source frame and project.
/// Returns (u, v, z_src) with coordinates snapped; None when z_src <= Z_MIN.
#[inline]
pub fn reproject_pixel(
    ray: &[f64; 3],
    depth: f64,
    transform: &Matrix4<f64>,
    k: &Intrinsics,
) -> (f64, Option<(f64, f64)>) {
    let x = ray[0] * depth;
    let y = ray[1] * depth;
    let z = ray[2] * depth;
    let tx = transform[(0, 0)] * x + transform[(0, 1)] * y + transform[(0, 2)] * z + transform[(0, 3)];
    let ty = transform[(1, 0)] * x + transform[(1, 1)] * y + transform[(1, 2)] * z + transform[(1, 3)];
    let tz = transform[(2, 0)] * x + transform[(2, 1)] * y + transform[(2, 2)] * z + transform[(2, 3)];
    if tz <= Z_MIN {
        return (tz, None);
    }
    let u = snap(k.fx * tx / tz + k.cx);
    let v = snap(k.fy * ty / tz + k.cy);
    (tz, Some((u, v)))
}

/// Inverse warp of `src_img` into the target frame's pixel grid.
///
/// For each target pixel with valid depth: X = ray * D_tgt, X' = T X,
/// (u, v) = project(K, X'), warped = bilinear(src_img, u, v). When
/// `src_depth` is given it is sampled at the same coordinates so occlusion
/// can be tested downstream.
pub fn inverse_warp(
    d_tgt: &DepthMap,
    transform: &Matrix4<f64>,
    src_img: &Image,
    k: &Intrinsics,
    rays: &RayGrid,
    src_depth: Option<&DepthMap>,
) -> Result<WarpResult> {
    let (w, h) = (d_tgt.width, d_tgt.height);
    for (gw, gh, what) in [
        (src_img.width, src_img.height, "source image"),
        (rays.width, rays.height, "ray grid"),
        (k.width, k.height, "intrinsics"),
    ] {
        if (gw, gh) != (w, h) {
            return Err(Error::DimensionMismatch {
                expected_w: w,
                expected_h: h,
                got_w: gw,
                got_h: gh,
                context: what,
            });
        }
    }
    if let Some(sd) = src_depth {
        if (sd.width, sd.height) != (w, h) {
            return Err(Error::DimensionMismatch {
                expected_w: w,
                expected_h: h,
                got_w: sd.width,
                got_h: sd.height,
                context: "source depth",
            });
        }
    }
    check_rigid(transform)?;

    let n = w * h;
    let mut warped = Image::zeros(w, h, src_img.channels);
    let mut valid = MaskMap::zeros(w, h);
    let mut coords = vec![[0.0f64; 2]; n];
    let mut z_transformed = vec![0.0f64; n];
    let mut sampled = src_depth.map(|_| vec![0.0f64; n]);

    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let d = d_tgt.depth(x, y) as f64;
            if d <= 0.0 {
                continue;
            }
            let (tz, proj) = reproject_pixel(rays.ray(x, y), d, transform, k);
            z_transformed[idx] = tz;
            let Some((u, v)) = proj else { continue };
            coords[idx] = [u, v];
            let Some(values) = bilinear_sample(src_img, u, v) else {
                continue;
            };
            for c in 0..src_img.channels {
                *warped.pixel_mut(x, y, c) = values[c] as f32;
            }
            if let (Some(buf), Some(sd)) = (sampled.as_mut(), src_depth) {
                buf[idx] = bilinear_sample_depth(sd, u, v).unwrap_or(0.0);
            }
            valid.data[idx] = 1.0;
        }
    }

    Ok(WarpResult {
        warped,
        valid,
        coords,
        z_transformed,
        sampled_depth: sampled,
    })
}
