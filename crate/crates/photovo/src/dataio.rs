//! File ingestion and trajectory I/O: images, depth maps, masks, intrinsics,
//! pose files (KITTI 3x4 rows, TUM timestamped quaternions, 6-vector
//! relatives), and the sequence manifest tying them together.
//!
//! Every parse failure names the file (and line where applicable); nothing
//! is silently defaulted.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::DynamicImage;
use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::geometry::{check_rigid, invert_rigid, nearest_rotation, Intrinsics, PoseSE3};
use crate::photometric::{Frame, MaskMap};
use crate::warp::{Camera, DepthMap, Image};

/// Default divisor turning stored 16-bit depth values into meters.
pub const DEFAULT_DEPTH_DIVISOR: f64 = 256.0;

// ---------------------------------------------------------------------------
// Trajectories

#[derive(Debug, Clone)]
pub struct TrajectoryEntry {
    pub index: usize,
    pub timestamp: Option<f64>,
    /// Camera-to-world pose.
    pub pose: Matrix4<f64>,
}

/// Ordered absolute camera-to-world poses.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub entries: Vec<TrajectoryEntry>,
}

impl Trajectory {
    pub fn from_poses(poses: &[Matrix4<f64>], timestamps: Option<&[f64]>) -> Result<Self> {
        if let Some(ts) = timestamps {
            if ts.len() != poses.len() {
                return Err(Error::TrajectoryMismatch(format!(
                    "{} poses but {} timestamps",
                    poses.len(),
                    ts.len()
                )));
            }
        }
        let mut entries = Vec::with_capacity(poses.len());
        for (i, pose) in poses.iter().enumerate() {
            check_rigid(pose)?;
            entries.push(TrajectoryEntry {
                index: i,
                timestamp: timestamps.map(|ts| ts[i]),
                pose: *pose,
            });
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.entries
            .iter()
            .map(|e| Vector3::new(e.pose[(0, 3)], e.pose[(1, 3)], e.pose[(2, 3)]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryFormat {
    Kitti,
    Tum,
}

impl std::str::FromStr for TrajectoryFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kitti" => Ok(TrajectoryFormat::Kitti),
            "tum" => Ok(TrajectoryFormat::Tum),
            other => Err(Error::InvalidConfig(format!(
                "unknown trajectory format '{other}' (expected kitti or tum)"
            ))),
        }
    }
}

/// Write a trajectory: KITTI = 12 row-major floats of the 3x4 block per
/// line; TUM = "t tx ty tz qx qy qz qw" per line (index stands in for a
/// missing timestamp).
pub fn save_trajectory(traj: &Trajectory, format: TrajectoryFormat, path: &Path) -> Result<()> {
    let mut out = String::new();
    for e in &traj.entries {
        match format {
            TrajectoryFormat::Kitti => {
                let mut fields = Vec::with_capacity(12);
                for r in 0..3 {
                    for c in 0..4 {
                        fields.push(format!("{:.12e}", e.pose[(r, c)]));
                    }
                }
                out.push_str(&fields.join(" "));
            }
            TrajectoryFormat::Tum => {
                let t = e.timestamp.unwrap_or(e.index as f64);
                let rot = e.pose.fixed_view::<3, 3>(0, 0).into_owned();
                let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
                    rot,
                ));
                out.push_str(&format!(
                    "{:.6} {:.12e} {:.12e} {:.12e} {:.12e} {:.12e} {:.12e} {:.12e}",
                    t,
                    e.pose[(0, 3)],
                    e.pose[(1, 3)],
                    e.pose[(2, 3)],
                    q.i,
                    q.j,
                    q.k,
                    q.w
                ));
            }
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_trajectory(path: &Path, format: TrajectoryFormat) -> Result<Trajectory> {
    match format {
        TrajectoryFormat::Kitti => {
            let poses = load_poses_kitti(path)?;
            Trajectory::from_poses(&poses, None)
        }
        TrajectoryFormat::Tum => load_trajectory_tum(path),
    }
}

fn parse_floats(path: &Path, line_no: usize, line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::parse(path, line_no, format!("bad float '{tok}'")))
        })
        .collect()
}

/// KITTI pose file: one 3x4 row-major matrix (12 floats) per line. Rows must
/// be rigid to 1e-4; the rotation block is then projected onto the nearest
/// proper rotation.
pub fn load_poses_kitti(path: &Path) -> Result<Vec<Matrix4<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e.to_string()))?;
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let vals = parse_floats(path, line_no, line)?;
        if vals.len() != 12 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected 12 fields, got {}", vals.len()),
            ));
        }
        let rot = Matrix3::new(
            vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
        );
        let gram_dev = (rot.transpose() * rot - Matrix3::identity())
            .iter()
            .fold(0.0f64, |a, x| a.max(x.abs()));
        if gram_dev > 1e-4 || (rot.determinant() - 1.0).abs() > 1e-4 {
            return Err(Error::parse(
                path,
                line_no,
                format!("rotation block is not rigid (deviation {gram_dev:.2e})"),
            ));
        }
        let rot = nearest_rotation(&rot);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        m[(0, 3)] = vals[3];
        m[(1, 3)] = vals[7];
        m[(2, 3)] = vals[11];
        poses.push(m);
    }
    Ok(poses)
}

pub fn save_poses_kitti(poses: &[Matrix4<f64>], path: &Path) -> Result<()> {
    let traj = Trajectory::from_poses(poses, None)?;
    save_trajectory(&traj, TrajectoryFormat::Kitti, path)
}

fn load_trajectory_tum(path: &Path) -> Result<Trajectory> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e.to_string()))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let vals = parse_floats(path, line_no, trimmed)?;
        if vals.len() != 8 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected 8 fields (t tx ty tz qx qy qz qw), got {}", vals.len()),
            ));
        }
        let q = nalgebra::Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if q.norm() < 1e-9 {
            return Err(Error::parse(path, line_no, "zero quaternion".to_string()));
        }
        let rot = UnitQuaternion::from_quaternion(q).to_rotation_matrix();
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(rot.matrix());
        m[(0, 3)] = vals[1];
        m[(1, 3)] = vals[2];
        m[(2, 3)] = vals[3];
        entries.push(TrajectoryEntry {
            index: entries.len(),
            timestamp: Some(vals[0]),
            pose: m,
        });
    }
    Ok(Trajectory { entries })
}

/// Relative 6-vector pose file: "rx ry rz tx ty tz" per line.
pub fn load_relative_poses(path: &Path) -> Result<Vec<PoseSE3>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e.to_string()))?;
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let vals = parse_floats(path, line_no, line)?;
        if vals.len() != 6 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected 6 fields (rx ry rz tx ty tz), got {}", vals.len()),
            ));
        }
        poses.push(PoseSE3::from_params(&vals));
    }
    Ok(poses)
}

pub fn save_relative_poses(poses: &[PoseSE3], path: &Path) -> Result<()> {
    let mut out = String::new();
    for p in poses {
        let v = p.params();
        let fields: Vec<String> = v.iter().map(|x| format!("{x:.12e}")).collect();
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Relative motions T such that C_i = C_{i-1} * T, from absolute poses.
pub fn relative_from_absolute(absolute: &[Matrix4<f64>]) -> Result<Vec<PoseSE3>> {
    if absolute.len() < 2 {
        return Err(Error::TrajectoryMismatch(format!(
            "need at least 2 absolute poses, got {}",
            absolute.len()
        )));
    }
    let mut out = Vec::with_capacity(absolute.len() - 1);
    for pair in absolute.windows(2) {
        let rel = invert_rigid(&pair[0])? * pair[1];
        out.push(PoseSE3::from_matrix(&rel)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Pixel data

/// Load an 8-bit PNG/JPEG into [0,1] scalars; grayscale stays single
/// channel. `resize` applies bilinear filtering.
pub fn load_image(path: &Path, resize: Option<(usize, usize)>) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::file(path, e.to_string()))?;
    let img = match resize {
        Some((w, h)) => img.resize_exact(w as u32, h as u32, FilterType::Triangle),
        None => img,
    };
    match img {
        DynamicImage::ImageLuma8(gray) => {
            let (w, h) = gray.dimensions();
            let data = gray.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
            Image::new(w as usize, h as usize, 1, data)
        }
        DynamicImage::ImageLumaA8(gray) => {
            let (w, h) = gray.dimensions();
            let data = gray.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
            Image::new(w as usize, h as usize, 1, data)
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            let data = rgb.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
            Image::new(w as usize, h as usize, 3, data)
        }
    }
}

pub fn save_image_png(img: &Image, path: &Path) -> Result<()> {
    let quantize = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match img.channels {
        1 => {
            let buf: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
            image::GrayImage::from_raw(img.width as u32, img.height as u32, buf)
                .expect("buffer sized")
                .save(path)?;
        }
        _ => {
            let buf: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
            image::RgbImage::from_raw(img.width as u32, img.height as u32, buf)
                .expect("buffer sized")
                .save(path)?;
        }
    }
    Ok(())
}

/// Load a depth map: 16-bit grayscale PNG (value / divisor = meters, 0 =
/// invalid) or, for any other extension, a raw little-endian f32 grid with a
/// (u32 width, u32 height) header.
pub fn load_depth(path: &Path, divisor: f64) -> Result<DepthMap> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        let img = image::open(path).map_err(|e| Error::file(path, e.to_string()))?;
        match img {
            DynamicImage::ImageLuma16(gray) => {
                let (w, h) = gray.dimensions();
                let data = gray
                    .into_raw()
                    .iter()
                    .map(|&v| (v as f64 / divisor) as f32)
                    .collect();
                DepthMap::new(w as usize, h as usize, data)
            }
            _ => Err(Error::file(
                path,
                "depth PNG must be 16-bit grayscale".to_string(),
            )),
        }
    } else {
        let mut file = fs::File::open(path).map_err(|e| Error::file(path, e.to_string()))?;
        let mut header = [0u8; 8];
        file.read_exact(&mut header)
            .map_err(|e| Error::file(path, format!("short header: {e}")))?;
        let w = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let mut raw = Vec::new();
        file.read_to_end(&mut raw)?;
        if raw.len() != w * h * 4 {
            return Err(Error::file(
                path,
                format!("expected {} bytes of f32 data, got {}", w * h * 4, raw.len()),
            ));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        DepthMap::new(w, h, data)
    }
}

/// Write the raw float-grid depth format (bit-exact round trip).
pub fn save_depth_raw(depth: &DepthMap, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&(depth.width as u32).to_le_bytes())?;
    file.write_all(&(depth.height as u32).to_le_bytes())?;
    for v in &depth.data {
        file.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_depth_png16(depth: &DepthMap, divisor: f64, path: &Path) -> Result<()> {
    let buf: Vec<u16> = depth
        .data
        .iter()
        .map(|&v| ((v as f64 * divisor).round().clamp(0.0, u16::MAX as f64)) as u16)
        .collect();
    image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
        depth.width as u32,
        depth.height as u32,
        buf,
    )
    .expect("buffer sized")
    .save(path)?;
    Ok(())
}

/// 8-bit grayscale PNG mapped to [0, 1] by /255.
pub fn load_mask(path: &Path) -> Result<MaskMap> {
    let img = image::open(path).map_err(|e| Error::file(path, e.to_string()))?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let data = gray.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
    MaskMap::new(w as usize, h as usize, data)
}

pub fn save_mask_png(mask: &MaskMap, path: &Path) -> Result<()> {
    let buf: Vec<u8> = mask
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::GrayImage::from_raw(mask.width as u32, mask.height as u32, buf)
        .expect("buffer sized")
        .save(path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Intrinsics

/// Intrinsics as parsed from disk; KITTI calibration lines carry no image
/// size, so it may be absent until the first frame is seen.
#[derive(Debug, Clone, Copy)]
pub struct ParsedIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub size: Option<(usize, usize)>,
}

impl ParsedIntrinsics {
    pub fn with_size(&self, width: usize, height: usize) -> Result<Intrinsics> {
        Intrinsics::new(self.fx, self.fy, self.cx, self.cy, width, height)
    }

    pub fn into_intrinsics(self) -> Result<Intrinsics> {
        match self.size {
            Some((w, h)) => self.with_size(w, h),
            None => Err(Error::InvalidIntrinsics(
                "no image size in calibration file; plain format is 'fx fy cx cy width height'"
                    .into(),
            )),
        }
    }
}

/// Parse either "fx fy cx cy width height" (one line of 6 numbers) or KITTI
/// calibration "P0: ..."/"P2: ..." projection lines (P2 preferred).
pub fn parse_intrinsics(text: &str, path: &Path) -> Result<ParsedIntrinsics> {
    // KITTI calibration format: labeled projection matrices.
    if text.contains(':') {
        let mut best: Option<(&str, Vec<f64>)> = None;
        for (i, line) in text.lines().enumerate() {
            let Some((label, rest)) = line.split_once(':') else {
                continue;
            };
            let label = label.trim();
            if !label.starts_with('P') {
                continue;
            }
            let vals = parse_floats(path, i + 1, rest)?;
            if vals.len() != 12 {
                return Err(Error::parse(
                    path,
                    i + 1,
                    format!("projection line needs 12 values, got {}", vals.len()),
                ));
            }
            let replace = match &best {
                None => true,
                Some((old, _)) => *old != "P2" && label == "P2",
            };
            if replace {
                best = Some((label, vals));
            }
        }
        let (_, p) = best.ok_or_else(|| {
            Error::file(path, "no P0/P2 projection line found".to_string())
        })?;
        let parsed = ParsedIntrinsics {
            fx: p[0],
            fy: p[5],
            cx: p[2],
            cy: p[6],
            size: None,
        };
        if parsed.fx <= 0.0 || parsed.fy <= 0.0 {
            return Err(Error::InvalidIntrinsics(format!(
                "non-positive focal length in {}",
                path.display()
            )));
        }
        return Ok(parsed);
    }

    let vals = parse_floats(path, 1, text)?;
    if vals.len() != 6 {
        return Err(Error::parse(
            path,
            1,
            format!("expected 'fx fy cx cy width height', got {} fields", vals.len()),
        ));
    }
    let parsed = ParsedIntrinsics {
        fx: vals[0],
        fy: vals[1],
        cx: vals[2],
        cy: vals[3],
        size: Some((vals[4] as usize, vals[5] as usize)),
    };
    // Validate eagerly so bad values are reported against this file.
    parsed.with_size(vals[4] as usize, vals[5] as usize)?;
    Ok(parsed)
}

pub fn load_intrinsics(path: &Path) -> Result<Intrinsics> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e.to_string()))?;
    parse_intrinsics(&text, path)?.into_intrinsics()
}

pub fn save_intrinsics(k: &Intrinsics, path: &Path) -> Result<()> {
    fs::write(
        path,
        format!(
            "{:.12e} {:.12e} {:.12e} {:.12e} {} {}\n",
            k.fx, k.fy, k.cx, k.cy, k.width, k.height
        ),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitPoseFormat {
    /// Absolute KITTI file, converted to relatives at load.
    KittiAbsolute,
    /// Per-frame "rx ry rz tx ty tz" relatives.
    Relative6,
}

#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub image: PathBuf,
    pub depth: PathBuf,
    pub mask: Option<PathBuf>,
    pub timestamp: Option<f64>,
}

/// A sequence description: ordered frames plus intrinsics and initial-pose
/// sources. Paths are stored resolved against the manifest's directory.
#[derive(Debug, Clone)]
pub struct SequenceManifest {
    pub intrinsics: PathBuf,
    pub init_poses: Option<PathBuf>,
    pub init_poses_format: InitPoseFormat,
    pub depth_divisor: f64,
    pub resize: Option<(usize, usize)>,
    pub frames: Vec<FrameRecord>,
}

#[derive(Deserialize)]
struct ManifestFile {
    intrinsics: String,
    init_poses: Option<String>,
    init_poses_format: Option<String>,
    depth_divisor: Option<f64>,
    resize: Option<[usize; 2]>,
    frames: Vec<ManifestFrame>,
}

#[derive(Deserialize)]
struct ManifestFrame {
    image: String,
    depth: String,
    mask: Option<String>,
    timestamp: Option<f64>,
}

/// Parse and validate a TOML manifest; every referenced file must exist.
pub fn load_manifest(path: &Path) -> Result<SequenceManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e.to_string()))?;
    let parsed: ManifestFile =
        toml::from_str(&text).map_err(|e| Error::file(path, format!("manifest parse: {e}")))?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();

    let resolve = |rel: &str| -> Result<PathBuf> {
        let p = root.join(rel);
        if !p.exists() {
            return Err(Error::file(&p, "referenced file does not exist".to_string()));
        }
        Ok(p)
    };

    if parsed.frames.len() < 2 {
        return Err(Error::file(
            path,
            format!("manifest needs at least 2 frames, has {}", parsed.frames.len()),
        ));
    }
    let init_poses_format = match parsed.init_poses_format.as_deref() {
        None | Some("kitti") => InitPoseFormat::KittiAbsolute,
        Some("relative6") => InitPoseFormat::Relative6,
        Some(other) => {
            return Err(Error::file(
                path,
                format!("unknown init_poses_format '{other}' (kitti or relative6)"),
            ));
        }
    };

    let mut frames = Vec::with_capacity(parsed.frames.len());
    for f in &parsed.frames {
        frames.push(FrameRecord {
            image: resolve(&f.image)?,
            depth: resolve(&f.depth)?,
            mask: f.mask.as_deref().map(resolve).transpose()?,
            timestamp: f.timestamp,
        });
    }

    Ok(SequenceManifest {
        intrinsics: resolve(&parsed.intrinsics)?,
        init_poses: parsed.init_poses.as_deref().map(resolve).transpose()?,
        init_poses_format,
        depth_divisor: parsed.depth_divisor.unwrap_or(DEFAULT_DEPTH_DIVISOR),
        resize: parsed.resize.map(|r| (r[0], r[1])),
        frames,
    })
}

/// A fully loaded sequence ready for refinement.
pub struct LoadedSequence {
    pub camera: Camera,
    pub frames: Vec<Frame>,
    pub init_relative: Vec<PoseSE3>,
    pub timestamps: Vec<Option<f64>>,
}

/// Load all frames, the intrinsics (rescaled if the manifest resizes
/// images), and the initial poses. All grids must agree on the working
/// resolution; depth and mask files are expected at that resolution already.
pub fn load_sequence(manifest: &SequenceManifest) -> Result<LoadedSequence> {
    // The first image fixes the native resolution for sizeless intrinsics.
    let probe = load_image(&manifest.frames[0].image, None)?;
    let (native_w, native_h) = (probe.width, probe.height);
    let text = fs::read_to_string(&manifest.intrinsics)
        .map_err(|e| Error::file(&manifest.intrinsics, e.to_string()))?;
    let parsed = parse_intrinsics(&text, &manifest.intrinsics)?;
    let declared = match parsed.size {
        Some((w, h)) => parsed.with_size(w, h)?,
        None => parsed.with_size(native_w, native_h)?,
    };
    let camera_k = match manifest.resize {
        Some((w, h)) => declared.scaled(w, h)?,
        None => declared,
    };

    let mut frames = Vec::with_capacity(manifest.frames.len());
    let mut timestamps = Vec::with_capacity(manifest.frames.len());
    for record in &manifest.frames {
        let img = load_image(&record.image, manifest.resize)?;
        if (img.width, img.height) != (camera_k.width, camera_k.height) {
            return Err(Error::file(
                &record.image,
                format!(
                    "image is {}x{}, expected {}x{}",
                    img.width, img.height, camera_k.width, camera_k.height
                ),
            ));
        }
        let depth = load_depth(&record.depth, manifest.depth_divisor)?;
        if (depth.width, depth.height) != (camera_k.width, camera_k.height) {
            return Err(Error::file(
                &record.depth,
                format!(
                    "depth is {}x{}, expected {}x{}",
                    depth.width, depth.height, camera_k.width, camera_k.height
                ),
            ));
        }
        let mask = record
            .mask
            .as_deref()
            .map(|p| {
                let m = load_mask(p)?;
                if (m.width, m.height) != (camera_k.width, camera_k.height) {
                    return Err(Error::file(
                        p,
                        format!(
                            "mask is {}x{}, expected {}x{}",
                            m.width, m.height, camera_k.width, camera_k.height
                        ),
                    ));
                }
                Ok(m)
            })
            .transpose()?;
        frames.push(Frame::new(img, depth, mask)?);
        timestamps.push(record.timestamp);
    }

    let init_relative = match &manifest.init_poses {
        Some(p) => match manifest.init_poses_format {
            InitPoseFormat::KittiAbsolute => {
                let absolute = load_poses_kitti(p)?;
                if absolute.len() != frames.len() {
                    return Err(Error::file(
                        p,
                        format!("{} poses for {} frames", absolute.len(), frames.len()),
                    ));
                }
                relative_from_absolute(&absolute)?
            }
            InitPoseFormat::Relative6 => {
                let rel = load_relative_poses(p)?;
                if rel.len() != frames.len() - 1 {
                    return Err(Error::file(
                        p,
                        format!("{} relative poses for {} frames", rel.len(), frames.len()),
                    ));
                }
                rel
            }
        },
        None => vec![PoseSE3::identity(); frames.len() - 1],
    };

    Ok(LoadedSequence {
        camera: Camera::new(camera_k),
        frames,
        init_relative,
        timestamps,
    })
}
