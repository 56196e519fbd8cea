//! Deterministic synthetic scenes: textured planes (plus an optional
//! occluding rectangle) with closed-form depth, photometrically consistent
//! views, and exactly known poses. These back every oracle-style test.
//!
//! The texture is a closed-form function of world coordinates (a sum of
//! seeded sinusoids), so rendering never resamples anything: two views of
//! the same surface point produce identical intensities.

use nalgebra::{Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{invert_rigid, Intrinsics, PoseSE3, Z_MIN};
use crate::photometric::Frame;
use crate::warp::{Camera, DepthMap, Image};

/// Wavelengths (pixels, at the reference depth) and amplitudes of the eight
/// texture components. Long wavelengths dominate so that the bilinear
/// interpolation residue stays ~1e-4 while gradients remain usable.
const WAVELENGTHS_PX: [f64; 8] = [96.0, 80.0, 64.0, 52.0, 40.0, 34.0, 28.0, 24.0];
const AMPLITUDES: [f64; 8] = [0.07, 0.07, 0.06, 0.06, 0.035, 0.03, 0.025, 0.02];

#[derive(Debug, Clone)]
struct TexComponent {
    wavevector: Vector3<f64>,
    amplitude: f64,
    phase: f64,
}

/// Band-limited procedural texture over world coordinates.
#[derive(Debug, Clone)]
pub struct Texture {
    components: Vec<TexComponent>,
    bias: f64,
}

impl Texture {
    /// Texture whose components lie in the plane spanned by `e1`, `e2`, with
    /// pixel wavelengths tied to `reference_depth` and `fx`.
    fn seeded_in_plane(
        rng: &mut ChaCha8Rng,
        e1: &Vector3<f64>,
        e2: &Vector3<f64>,
        reference_depth: f64,
        fx: f64,
    ) -> Self {
        let meters_per_px = reference_depth / fx;
        let mut components = Vec::with_capacity(8);
        for (lambda_px, amp) in WAVELENGTHS_PX.iter().zip(AMPLITUDES) {
            let lambda_world = lambda_px * meters_per_px;
            let angular = std::f64::consts::TAU / lambda_world;
            let psi = rng.gen_range(0.0..std::f64::consts::TAU);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            components.push(TexComponent {
                wavevector: (e1 * psi.cos() + e2 * psi.sin()) * angular,
                amplitude: amp,
                phase,
            });
        }
        Self {
            components,
            bias: 0.5,
        }
    }

    pub fn eval(&self, point: &Vector3<f64>) -> f64 {
        let mut v = self.bias;
        for c in &self.components {
            v += c.amplitude * (c.wavevector.dot(point) + c.phase).sin();
        }
        v
    }

    pub(crate) fn scale_amplitudes(&mut self, factor: f64) {
        for c in self.components.iter_mut() {
            c.amplitude *= factor;
        }
    }

    pub(crate) fn set_bias(&mut self, bias: f64) {
        self.bias = bias;
    }

    pub(crate) fn add_component(&mut self, wavevector: Vector3<f64>, amplitude: f64, phase: f64) {
        self.components.push(TexComponent {
            wavevector,
            amplitude,
            phase,
        });
    }
}

/// Orthonormal basis of the plane orthogonal to `n`.
fn plane_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let e1 = n.cross(&helper).normalize();
    let e2 = n.cross(&e1).normalize();
    (e1, e2)
}

/// Infinite textured plane `n . X = offset` in the world frame.
#[derive(Debug, Clone)]
pub struct PlaneScene {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub texture: Texture,
    pub intrinsics: Intrinsics,
}

impl PlaneScene {
    /// Plane facing a camera at the world origin that looks down +z:
    /// `center_depth` meters away along the optical axis, tilted by the two
    /// given angles (radians) about the x and y axes.
    pub fn seeded(
        seed: u64,
        intrinsics: Intrinsics,
        center_depth: f64,
        tilt: (f64, f64),
    ) -> Result<Self> {
        Self::seeded_with_detail(seed, intrinsics, center_depth, tilt, 1.0)
    }

    /// Like `seeded`, but with all texture wavelengths divided by `detail`
    /// (detail < 1 gives a smoother surface with smaller interpolation
    /// curvature; finite-difference fixtures use that).
    pub fn seeded_with_detail(
        seed: u64,
        intrinsics: Intrinsics,
        center_depth: f64,
        tilt: (f64, f64),
        detail: f64,
    ) -> Result<Self> {
        if !(center_depth > Z_MIN) {
            return Err(Error::Scene(format!(
                "plane center depth {center_depth} not in front of the camera"
            )));
        }
        if !(detail > 0.0) {
            return Err(Error::Scene(format!("texture detail must be > 0, got {detail}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rot = crate::geometry::rodrigues_exp(&Vector3::new(tilt.0, tilt.1, 0.0));
        let normal = rot * Vector3::z();
        let offset = normal.z * center_depth;
        let (e1, e2) = plane_basis(&normal);
        let texture = Texture::seeded_in_plane(
            &mut rng,
            &e1,
            &e2,
            center_depth / detail,
            intrinsics.fx,
        );
        Ok(Self {
            normal,
            offset,
            texture,
            intrinsics,
        })
    }

    /// Ray-plane intersection parameter for a world ray; None when the hit is
    /// behind the camera or the ray is parallel to the plane.
    fn hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = (self.offset - self.normal.dot(origin)) / denom;
        if s <= Z_MIN {
            return None;
        }
        Some(s)
    }
}

fn camera_rays_world(
    k: &Intrinsics,
    cam_to_world: &Matrix4<f64>,
) -> (Vector3<f64>, Vec<Vector3<f64>>) {
    let origin = Vector3::new(cam_to_world[(0, 3)], cam_to_world[(1, 3)], cam_to_world[(2, 3)]);
    let rot = cam_to_world.fixed_view::<3, 3>(0, 0).into_owned();
    let mut dirs = Vec::with_capacity(k.width * k.height);
    for y in 0..k.height {
        for x in 0..k.width {
            let dir_cam = Vector3::new(
                (x as f64 - k.cx) / k.fx,
                (y as f64 - k.cy) / k.fy,
                1.0,
            );
            dirs.push(rot * dir_cam);
        }
    }
    (origin, dirs)
}

/// Render the plane from a camera given as a world-to-camera transform.
///
/// Depth is the ray parameter, which equals camera-frame z because the
/// camera-frame ray direction has unit z. Errors if any pixel misses the
/// plane or hits it behind the camera.
pub fn render_view(scene: &PlaneScene, world_to_cam: &Matrix4<f64>) -> Result<(Image, DepthMap)> {
    let k = &scene.intrinsics;
    let cam_to_world = invert_rigid(world_to_cam)?;
    let (origin, dirs) = camera_rays_world(k, &cam_to_world);
    let mut img = Image::zeros(k.width, k.height, 1);
    let mut depth = vec![0.0f32; k.width * k.height];
    for (idx, dir) in dirs.iter().enumerate() {
        let s = scene
            .hit(&origin, dir)
            .ok_or_else(|| Error::Scene("plane behind camera or edge-on".into()))?;
        let point = origin + dir * s;
        img.data[idx] = scene.texture.eval(&point) as f32;
        depth[idx] = s as f32;
    }
    Ok((img, DepthMap::new(k.width, k.height, depth)?))
}

/// Textured rectangle floating in front of the base plane.
#[derive(Debug, Clone)]
pub struct Occluder {
    pub center: Vector3<f64>,
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
    pub texture: Texture,
}

impl Occluder {
    fn normal(&self) -> Vector3<f64> {
        self.axis_u.cross(&self.axis_v).normalize()
    }

    /// Ray parameter of the rectangle hit, if any.
    fn hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = (n.dot(&self.center) - n.dot(origin)) / denom;
        if s <= Z_MIN {
            return None;
        }
        let local = origin + dir * s - self.center;
        if local.dot(&self.axis_u).abs() <= self.half_u
            && local.dot(&self.axis_v).abs() <= self.half_v
        {
            Some(s)
        } else {
            None
        }
    }
}

/// Base plane plus one nearer rectangle; the occluded pixel set between any
/// two cameras is computable in closed form.
#[derive(Debug, Clone)]
pub struct OccluderScene {
    pub base: PlaneScene,
    pub occluder: Occluder,
}

impl OccluderScene {
    /// Rectangle fronto-parallel to a camera at the origin looking +z, at the
    /// given depth, centered on (cx_m, cy_m) in world x/y, with half extents.
    pub fn seeded(
        seed: u64,
        base: PlaneScene,
        occluder_depth: f64,
        center_xy: (f64, f64),
        half_extents: (f64, f64),
    ) -> Result<Self> {
        if occluder_depth <= Z_MIN {
            return Err(Error::Scene("occluder behind camera".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
        let axis_u = Vector3::x();
        let axis_v = Vector3::y();
        let texture = Texture::seeded_in_plane(
            &mut rng,
            &axis_u,
            &axis_v,
            occluder_depth,
            base.intrinsics.fx,
        );
        Ok(Self {
            base,
            occluder: Occluder {
                center: Vector3::new(center_xy.0, center_xy.1, occluder_depth),
                axis_u,
                axis_v,
                half_u: half_extents.0,
                half_v: half_extents.1,
                texture,
            },
        })
    }

    /// World hit point and surface id (true = occluder) for one ray.
    fn first_hit(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
    ) -> Result<(f64, Vector3<f64>, bool)> {
        let s_base = self.base.hit(origin, dir);
        let s_occ = self.occluder.hit(origin, dir);
        let (s, on_occluder) = match (s_base, s_occ) {
            (Some(b), Some(o)) if o < b => (o, true),
            (Some(b), _) => (b, false),
            (None, Some(o)) => (o, true),
            (None, None) => {
                return Err(Error::Scene("ray misses every surface".into()));
            }
        };
        Ok((s, origin + dir * s, on_occluder))
    }
}

/// Render base plane + occluder from a world-to-camera transform.
pub fn render_occluder_view(
    scene: &OccluderScene,
    world_to_cam: &Matrix4<f64>,
) -> Result<(Image, DepthMap)> {
    let k = &scene.base.intrinsics;
    let cam_to_world = invert_rigid(world_to_cam)?;
    let (origin, dirs) = camera_rays_world(k, &cam_to_world);
    let mut img = Image::zeros(k.width, k.height, 1);
    let mut depth = vec![0.0f32; k.width * k.height];
    for (idx, dir) in dirs.iter().enumerate() {
        let (s, point, on_occluder) = scene.first_hit(&origin, dir)?;
        let tex = if on_occluder {
            &scene.occluder.texture
        } else {
            &scene.base.texture
        };
        img.data[idx] = tex.eval(&point) as f32;
        depth[idx] = s as f32;
    }
    Ok((img, DepthMap::new(k.width, k.height, depth)?))
}

/// Closed-form occlusion set: for each target pixel, whether the surface
/// point it sees is blocked by the rectangle when viewed from the source
/// camera. Points on the rectangle itself are never self-occluded.
pub fn analytic_occlusion(
    scene: &OccluderScene,
    world_to_cam_tgt: &Matrix4<f64>,
    world_to_cam_src: &Matrix4<f64>,
) -> Result<Vec<bool>> {
    let k = &scene.base.intrinsics;
    let tgt_to_world = invert_rigid(world_to_cam_tgt)?;
    let src_to_world = invert_rigid(world_to_cam_src)?;
    let (tgt_origin, dirs) = camera_rays_world(k, &tgt_to_world);
    let src_origin = Vector3::new(
        src_to_world[(0, 3)],
        src_to_world[(1, 3)],
        src_to_world[(2, 3)],
    );
    let mut occluded = vec![false; k.width * k.height];
    for (idx, dir) in dirs.iter().enumerate() {
        let (_, point, on_occluder) = scene.first_hit(&tgt_origin, dir)?;
        if on_occluder {
            continue;
        }
        let seg = point - src_origin;
        let n = scene.occluder.normal();
        let denom = n.dot(&seg);
        if denom.abs() < 1e-12 {
            continue;
        }
        let s = (n.dot(&scene.occluder.center) - n.dot(&src_origin)) / denom;
        if s <= 1e-9 || s >= 1.0 - 1e-9 {
            continue;
        }
        let local = src_origin + seg * s - scene.occluder.center;
        if local.dot(&scene.occluder.axis_u).abs() <= scene.occluder.half_u
            && local.dot(&scene.occluder.axis_v).abs() <= scene.occluder.half_v
        {
            occluded[idx] = true;
        }
    }
    Ok(occluded)
}

/// Constant-velocity sequence spec: `step` is the per-frame relative motion
/// (frame i camera coordinates to frame i-1), noise sigmas apply per axis in
/// the 6-vector space of the initial poses.
#[derive(Debug, Clone)]
pub struct SequenceSpec {
    pub frames: usize,
    pub step: PoseSE3,
    pub sigma_rot: f64,
    pub sigma_trans: f64,
    pub seed: u64,
}

/// In-memory synthetic sequence: frames, exact trajectory, perturbed inits.
#[derive(Debug, Clone)]
pub struct SyntheticBundle {
    pub camera: Camera,
    pub frames: Vec<Frame>,
    /// Camera-to-world absolute poses, first entry identity.
    pub gt_absolute: Vec<Matrix4<f64>>,
    /// Exact relative motions, one per consecutive pair.
    pub gt_relative: Vec<PoseSE3>,
    /// Noisy initializations of the relative motions.
    pub init_relative: Vec<PoseSE3>,
    pub timestamps: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 bounded away from 0.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Render a constant-velocity sequence over the plane with seeded pose noise.
pub fn make_sequence(scene: &PlaneScene, spec: &SequenceSpec) -> Result<SyntheticBundle> {
    if spec.frames < 2 {
        return Err(Error::InvalidConfig(format!(
            "sequence needs at least 2 frames, got {}",
            spec.frames
        )));
    }
    let camera = Camera::new(scene.intrinsics);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut gt_absolute = vec![Matrix4::identity()];
    for _ in 1..spec.frames {
        let last = *gt_absolute.last().unwrap();
        gt_absolute.push(last * spec.step.matrix());
    }

    let mut frames = Vec::with_capacity(spec.frames);
    for cam_to_world in &gt_absolute {
        let world_to_cam = invert_rigid(cam_to_world)?;
        let (image, depth) = render_view(scene, &world_to_cam)?;
        frames.push(Frame::new(image, depth, None)?);
    }

    let mut gt_relative = Vec::with_capacity(spec.frames - 1);
    let mut init_relative = Vec::with_capacity(spec.frames - 1);
    for _ in 1..spec.frames {
        gt_relative.push(spec.step);
        let mut r = spec.step.rotation_vector();
        let mut t = spec.step.translation();
        for i in 0..3 {
            r[i] += spec.sigma_rot * gaussian(&mut rng);
            t[i] += spec.sigma_trans * gaussian(&mut rng);
        }
        init_relative.push(PoseSE3::new(r, t));
    }

    let timestamps = (0..spec.frames).map(|i| i as f64 * 0.1).collect();
    Ok(SyntheticBundle {
        camera,
        frames,
        gt_absolute,
        gt_relative,
        init_relative,
        timestamps,
    })
}

/// Render one frame pair with an exact relative motion and no noise;
/// convenience wrapper used by tests and the pair generator.
pub fn make_pair(scene: &PlaneScene, motion: &PoseSE3, seed: u64) -> Result<SyntheticBundle> {
    make_sequence(
        scene,
        &SequenceSpec {
            frames: 2,
            step: *motion,
            sigma_rot: 0.0,
            sigma_trans: 0.0,
            seed,
        },
    )
}

pub(crate) fn in_plane_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    plane_basis(n)
}
