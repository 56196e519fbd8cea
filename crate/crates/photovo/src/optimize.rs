//! Analytic pose gradients, Adam updates, and the two-/three-frame
//! refinement loops.
//!
//! Gradients are exact derivatives of a frozen energy: masks, truncation
//! sets, and validity sets are recomputed at the current pose on every
//! iteration and then held constant through the gradient evaluation (their
//! derivative is zero almost everywhere). The chain runs through the
//! bilinear kernel, the pinhole projection, the rigid transform, and the
//! Rodrigues map; composed and inverted transforms are handled by matrix
//! adjoints, so the three-frame energy differentiates through both poses.

use std::time::Instant;

use nalgebra::{Matrix3, Matrix4};

use crate::error::{Error, Result};
use crate::geometry::{compose, invert_rigid, pose_matrix, rodrigues_jacobians, PoseSE3};
use crate::photometric::{directed_term, EnergyConfig, Frame, FrameWindow, LossKind};
use crate::warp::{bilinear_sample_with_grad, Camera};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Depth guard for frozen re-evaluations; freeze-time validity already
/// guarantees Z_MIN, this only protects finite-difference probes.
const EVAL_Z_FLOOR: f64 = 1e-6;

/// Standard Adam with bias correction and a per-coordinate learning rate.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step_count: u64,
    lr: Vec<f64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(lr: Vec<f64>) -> Self {
        let n = lr.len();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step_count: 0,
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), self.lr.len());
        debug_assert_eq!(grad.len(), self.lr.len());
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for j in 0..params.len() {
            self.m[j] = self.beta1 * self.m[j] + (1.0 - self.beta1) * grad[j];
            self.v[j] = self.beta2 * self.v[j] + (1.0 - self.beta2) * grad[j] * grad[j];
            let m_hat = self.m[j] / bc1;
            let v_hat = self.v[j] / bc2;
            params[j] -= self.lr[j] * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Refinement loop configuration. Learning rates differ between rotation
/// (radians) and translation (meters) coordinates; the previous pose of a
/// three-frame window gets both scaled by `lr_previous_factor`.
#[derive(Debug, Clone, Copy)]
pub struct RefineConfig {
    pub iterations: usize,
    pub lr_rotation: f64,
    pub lr_translation: f64,
    pub lr_previous_factor: f64,
    pub energy: EnergyConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            lr_rotation: 1e-3,
            lr_translation: 1e-2,
            lr_previous_factor: 0.1,
            energy: EnergyConfig::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if !(self.lr_rotation > 0.0) || !(self.lr_translation > 0.0) {
            return Err(Error::InvalidConfig(
                "learning rates must be positive".into(),
            ));
        }
        if !(self.lr_previous_factor >= 0.0) {
            return Err(Error::InvalidConfig(
                "previous-pose learning-rate factor must be >= 0".into(),
            ));
        }
        self.energy.validate()
    }
}

/// Outcome of one window refinement.
#[derive(Debug, Clone)]
pub struct RefineReport {
    pub initial_energy: f64,
    pub final_energy: f64,
    /// Energy at the start of each iteration (before that iteration's step).
    pub energy_trace: Vec<f64>,
    pub iterations_run: usize,
    /// Iteration index whose iterate was kept (iterations_run means the
    /// post-final-step iterate).
    pub best_iteration: usize,
    /// True when the window degenerated and the initialization was returned.
    pub fell_back: bool,
}

/// Frames of one correction window, oldest first.
#[derive(Debug, Clone, Copy)]
pub enum WindowFrames<'a> {
    Two {
        prev: &'a Frame,
        cur: &'a Frame,
    },
    Three {
        prev2: &'a Frame,
        prev: &'a Frame,
        cur: &'a Frame,
    },
}

/// The working set one refinement operates on.
#[derive(Debug, Clone, Copy)]
pub struct CorrectionWindow<'a> {
    pub camera: &'a Camera,
    pub frames: WindowFrames<'a>,
}

impl<'a> CorrectionWindow<'a> {
    pub fn param_len(&self) -> usize {
        match self.frames {
            WindowFrames::Two { .. } => 6,
            WindowFrames::Three { .. } => 12,
        }
    }

    fn frame(&self, sel: FrameSel) -> &'a Frame {
        match (self.frames, sel) {
            (WindowFrames::Two { prev, .. }, FrameSel::Prev) => prev,
            (WindowFrames::Two { cur, .. }, FrameSel::Cur) => cur,
            (WindowFrames::Three { prev2, .. }, FrameSel::Prev2) => prev2,
            (WindowFrames::Three { prev, .. }, FrameSel::Prev) => prev,
            (WindowFrames::Three { cur, .. }, FrameSel::Cur) => cur,
            (WindowFrames::Two { .. }, FrameSel::Prev2) => {
                unreachable!("two-frame window has no prev2")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FrameSel {
    Prev2,
    Prev,
    Cur,
}

/// How a term's warp transform is built from the window's pose variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TransformExpr {
    Cur,
    CurInv,
    PrevCur,
    PrevCurInv,
}

#[derive(Debug, Clone, Copy)]
struct TermPlan {
    tgt: FrameSel,
    src: FrameSel,
    expr: TransformExpr,
}

fn term_plans(window: &CorrectionWindow) -> Vec<TermPlan> {
    match window.frames {
        WindowFrames::Two { .. } => vec![
            TermPlan {
                tgt: FrameSel::Cur,
                src: FrameSel::Prev,
                expr: TransformExpr::Cur,
            },
            TermPlan {
                tgt: FrameSel::Prev,
                src: FrameSel::Cur,
                expr: TransformExpr::CurInv,
            },
        ],
        WindowFrames::Three { .. } => vec![
            TermPlan {
                tgt: FrameSel::Cur,
                src: FrameSel::Prev,
                expr: TransformExpr::Cur,
            },
            TermPlan {
                tgt: FrameSel::Prev,
                src: FrameSel::Cur,
                expr: TransformExpr::CurInv,
            },
            TermPlan {
                tgt: FrameSel::Prev2,
                src: FrameSel::Cur,
                expr: TransformExpr::PrevCurInv,
            },
            TermPlan {
                tgt: FrameSel::Cur,
                src: FrameSel::Prev2,
                expr: TransformExpr::PrevCur,
            },
        ],
    }
}

/// Pose matrices (and Rodrigues Jacobians when needed) for the current
/// parameter vector. Layout: [cur(6)] or [prev(6) | cur(6)].
struct PoseEval {
    t_prev: Option<Matrix4<f64>>,
    t_cur: Matrix4<f64>,
}

fn eval_poses(params: &[f64], param_len: usize) -> Result<PoseEval> {
    if params.len() != param_len {
        return Err(Error::InvalidConfig(format!(
            "expected {param_len} parameters, got {}",
            params.len()
        )));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFiniteEnergy("non-finite pose parameters".into()));
    }
    match param_len {
        6 => Ok(PoseEval {
            t_prev: None,
            t_cur: pose_se3_matrix(&params[0..6]),
        }),
        12 => Ok(PoseEval {
            t_prev: Some(pose_se3_matrix(&params[0..6])),
            t_cur: pose_se3_matrix(&params[6..12]),
        }),
        _ => Err(Error::InvalidConfig(
            "parameter vector must have 6 or 12 entries".into(),
        )),
    }
}

fn pose_se3_matrix(p: &[f64]) -> Matrix4<f64> {
    pose_matrix(
        &nalgebra::Vector3::new(p[0], p[1], p[2]),
        &nalgebra::Vector3::new(p[3], p[4], p[5]),
    )
}

fn apply_expr(expr: TransformExpr, poses: &PoseEval) -> Result<Matrix4<f64>> {
    Ok(match expr {
        TransformExpr::Cur => poses.t_cur,
        TransformExpr::CurInv => invert_rigid(&poses.t_cur)?,
        TransformExpr::PrevCur => {
            let t_prev = poses.t_prev.as_ref().expect("three-frame expr");
            compose(t_prev, &poses.t_cur)
        }
        TransformExpr::PrevCurInv => {
            let t_prev = poses.t_prev.as_ref().expect("three-frame expr");
            invert_rigid(&compose(t_prev, &poses.t_cur))?
        }
    })
}

/// Map the adjoint of the warp transform back to adjoints of the two pose
/// matrices, through inversion and composition as needed.
fn backprop_expr(
    expr: TransformExpr,
    g_w: &Matrix4<f64>,
    w: &Matrix4<f64>,
    poses: &PoseEval,
) -> (Option<Matrix4<f64>>, Matrix4<f64>) {
    match expr {
        TransformExpr::Cur => (None, *g_w),
        TransformExpr::CurInv => {
            let wt = w.transpose();
            (None, -(wt * g_w * wt))
        }
        TransformExpr::PrevCur => {
            let t_prev = poses.t_prev.as_ref().expect("three-frame expr");
            (
                Some(g_w * poses.t_cur.transpose()),
                t_prev.transpose() * g_w,
            )
        }
        TransformExpr::PrevCurInv => {
            let t_prev = poses.t_prev.as_ref().expect("three-frame expr");
            let wt = w.transpose();
            let g_m = -(wt * g_w * wt);
            (
                Some(g_m * poses.t_cur.transpose()),
                t_prev.transpose() * g_m,
            )
        }
    }
}

/// Contract a pose-matrix adjoint to the six (r, t) coordinates.
fn pose_coord_grad(g_t: &Matrix4<f64>, jacs: &[Matrix3<f64>; 3]) -> [f64; 6] {
    let mut g = [0.0f64; 6];
    for (k, jac) in jacs.iter().enumerate() {
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                acc += g_t[(i, j)] * jac[(i, j)];
            }
        }
        g[k] = acc;
    }
    g[3] = g_t[(0, 3)];
    g[4] = g_t[(1, 3)];
    g[5] = g_t[(2, 3)];
    g
}

/// One directed term with its frozen weighting: the per-pixel combined mask
/// values of everything that survived masking and truncation.
struct FrozenTerm {
    plan: TermPlan,
    weights: Vec<f64>,
    n_active: usize,
}

/// A snapshot of the energy with masks, truncation, and validity held fixed.
/// `value` evaluates the underlying smooth functional at any nearby
/// parameters; `value_and_grad` differentiates it analytically. At the
/// parameters it was frozen at, `value` equals the true masked energy.
pub struct FrozenEnergy {
    terms: Vec<FrozenTerm>,
    frames: FrameWindow,
    alpha: f64,
    loss: LossKind,
}

/// Freeze the energy at `params`: run the full forward pipeline (warp,
/// masks, truncation) and capture each term's active weights.
pub fn freeze_energy(
    window: &CorrectionWindow,
    params: &[f64],
    cfg: &EnergyConfig,
) -> Result<FrozenEnergy> {
    cfg.validate()?;
    let poses = eval_poses(params, window.param_len())?;
    let mut terms = Vec::new();
    for plan in term_plans(window) {
        let w = apply_expr(plan.expr, &poses)?;
        let out = directed_term(
            window.frame(plan.tgt),
            window.frame(plan.src),
            &w,
            window.camera,
            cfg,
        )?;
        terms.push(FrozenTerm {
            plan,
            weights: out.weights,
            n_active: out.n_active,
        });
    }
    Ok(FrozenEnergy {
        terms,
        frames: cfg.frames,
        alpha: cfg.alpha,
        loss: cfg.loss,
    })
}

impl FrozenEnergy {
    /// Combine per-term values the same way for both window sizes: the
    /// adjacent pair is summed first so that alpha = 1 reproduces the
    /// two-frame arithmetic bit for bit.
    fn assemble(&self, v: &[f64]) -> f64 {
        match self.frames {
            FrameWindow::Two => v[0] + v[1],
            FrameWindow::Three => self.alpha * (v[0] + v[1]) + (1.0 - self.alpha) * (v[2] + v[3]),
        }
    }

    fn assemble_grad(&self, g: &[Vec<f64>], n: usize) -> Vec<f64> {
        let mut out = vec![0.0f64; n];
        match self.frames {
            FrameWindow::Two => {
                for j in 0..n {
                    out[j] = g[0][j] + g[1][j];
                }
            }
            FrameWindow::Three => {
                for j in 0..n {
                    out[j] = self.alpha * (g[0][j] + g[1][j])
                        + (1.0 - self.alpha) * (g[2][j] + g[3][j]);
                }
            }
        }
        out
    }

    pub fn value(&self, window: &CorrectionWindow, params: &[f64]) -> Result<f64> {
        let poses = eval_poses(params, window.param_len())?;
        let mut values = Vec::with_capacity(self.terms.len());
        for term in &self.terms {
            let w = apply_expr(term.plan.expr, &poses)?;
            let v = match self.loss {
                LossKind::TruncatedL1 | LossKind::L1Untruncated => {
                    l1_term_value(window, term, &w)
                }
                LossKind::Ssim => ssim_term_value(window, term, &w),
            };
            values.push(v);
        }
        let total = self.assemble(&values);
        if !total.is_finite() {
            return Err(Error::NonFiniteEnergy(format!("energy {total}")));
        }
        Ok(total)
    }

    pub fn value_and_grad(
        &self,
        window: &CorrectionWindow,
        params: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        let n = window.param_len();
        let poses = eval_poses(params, n)?;
        let jac_cur = rodrigues_jacobians(&nalgebra::Vector3::new(
            params[n - 6],
            params[n - 5],
            params[n - 4],
        ));
        let jac_prev = if n == 12 {
            Some(rodrigues_jacobians(&nalgebra::Vector3::new(
                params[0], params[1], params[2],
            )))
        } else {
            None
        };

        let mut values = Vec::with_capacity(self.terms.len());
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(self.terms.len());
        for term in &self.terms {
            let w = apply_expr(term.plan.expr, &poses)?;
            let (v, g_w) = match self.loss {
                LossKind::TruncatedL1 | LossKind::L1Untruncated => {
                    l1_term_value_and_wgrad(window, term, &w)
                }
                LossKind::Ssim => ssim_term_value_and_wgrad(window, term, &w),
            };
            values.push(v);

            let (g_tp, g_tc) = backprop_expr(term.plan.expr, &g_w, &w, &poses);
            let mut g = vec![0.0f64; n];
            let gc = pose_coord_grad(&g_tc, &jac_cur);
            g[n - 6..n].copy_from_slice(&gc);
            if let (Some(g_tp), Some(jp)) = (g_tp, jac_prev.as_ref()) {
                let gp = pose_coord_grad(&g_tp, jp);
                g[0..6].copy_from_slice(&gp);
            }
            grads.push(g);
        }

        let total = self.assemble(&values);
        if !total.is_finite() {
            return Err(Error::NonFiniteEnergy(format!("energy {total}")));
        }
        let grad = self.assemble_grad(&grads, n);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteEnergy("non-finite gradient".into()));
        }
        Ok((total, grad))
    }
}

/// Shared per-pixel chain: camera point, transformed point, projected and
/// clamped source coordinates.
#[inline]
#[allow(clippy::too_many_arguments)]
fn pixel_chain(
    window: &CorrectionWindow,
    tgt: &Frame,
    idx: usize,
    w: &Matrix4<f64>,
) -> ([f64; 3], [f64; 3], f64, f64) {
    let k = &window.camera.intrinsics;
    let width = k.width;
    let (x, y) = (idx % width, idx / width);
    let d = tgt.depth.data[idx] as f64;
    let ray = window.camera.rays.ray(x, y);
    let px = ray[0] * d;
    let py = ray[1] * d;
    let pz = ray[2] * d;
    let tx = w[(0, 0)] * px + w[(0, 1)] * py + w[(0, 2)] * pz + w[(0, 3)];
    let ty = w[(1, 0)] * px + w[(1, 1)] * py + w[(1, 2)] * pz + w[(1, 3)];
    let tz = (w[(2, 0)] * px + w[(2, 1)] * py + w[(2, 2)] * pz + w[(2, 3)]).max(EVAL_Z_FLOOR);
    // Same snapping as the forward warp, so the frozen value at its freeze
    // point reproduces the forward scalar bit for bit.
    let u = snap_coord(k.fx * tx / tz + k.cx).clamp(0.0, (k.width - 1) as f64);
    let v = snap_coord(k.fy * ty / tz + k.cy).clamp(0.0, (k.height - 1) as f64);
    ([px, py, pz], [tx, ty, tz], u, v)
}

#[inline]
fn snap_coord(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

fn l1_term_value(window: &CorrectionWindow, term: &FrozenTerm, w: &Matrix4<f64>) -> f64 {
    let tgt = window.frame(term.plan.tgt);
    let src = window.frame(term.plan.src);
    let channels = src.image.channels;
    let inv_c = 1.0 / channels as f64;
    let mut sum = 0.0f64;
    for (idx, &weight) in term.weights.iter().enumerate() {
        if weight <= 0.0 {
            continue;
        }
        let (_, _, u, v) = pixel_chain(window, tgt, idx, w);
        let vals = bilinear_sample_with_grad(&src.image, u, v).0;
        let mut e = 0.0;
        for c in 0..channels {
            e += (vals[c] - tgt.image.data[idx * channels + c] as f64).abs();
        }
        sum += weight * (e * inv_c);
    }
    sum / term.n_active as f64
}

fn l1_term_value_and_wgrad(
    window: &CorrectionWindow,
    term: &FrozenTerm,
    w: &Matrix4<f64>,
) -> (f64, Matrix4<f64>) {
    let tgt = window.frame(term.plan.tgt);
    let src = window.frame(term.plan.src);
    let k = &window.camera.intrinsics;
    let channels = src.image.channels;
    let inv_c = 1.0 / channels as f64;
    let mut sum = 0.0f64;
    let mut g_w = Matrix4::zeros();
    for (idx, &weight) in term.weights.iter().enumerate() {
        if weight <= 0.0 {
            continue;
        }
        let (p, t, u, v) = pixel_chain(window, tgt, idx, w);
        let (vals, du, dv) = bilinear_sample_with_grad(&src.image, u, v);
        let mut e = 0.0;
        let mut g_u = 0.0;
        let mut g_v = 0.0;
        for c in 0..channels {
            let diff = vals[c] - tgt.image.data[idx * channels + c] as f64;
            e += diff.abs();
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            let coeff = weight * inv_c * sign;
            g_u += coeff * du[c];
            g_v += coeff * dv[c];
        }
        sum += weight * (e * inv_c);

        let iz = 1.0 / t[2];
        let gx = g_u * k.fx * iz;
        let gy = g_v * k.fy * iz;
        let gz = -(g_u * k.fx * t[0] + g_v * k.fy * t[1]) * iz * iz;
        accumulate_wgrad(&mut g_w, gx, gy, gz, &p);
    }
    let inv_n = 1.0 / term.n_active as f64;
    (sum * inv_n, g_w * inv_n)
}

#[inline]
fn accumulate_wgrad(g_w: &mut Matrix4<f64>, gx: f64, gy: f64, gz: f64, p: &[f64; 3]) {
    let ph = [p[0], p[1], p[2], 1.0];
    for (row, g) in [(0, gx), (1, gy), (2, gz)] {
        for (col, pv) in ph.iter().enumerate() {
            g_w[(row, col)] += g * pv;
        }
    }
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Recompute the warped source intensities for every target pixel with valid
/// depth; pixels outside active windows are computed too but never read.
fn ssim_warp_buffer(
    window: &CorrectionWindow,
    tgt: &Frame,
    src: &Frame,
    w: &Matrix4<f64>,
) -> Vec<f64> {
    let channels = src.image.channels;
    let n = tgt.depth.data.len();
    let mut buf = vec![0.0f64; n * channels];
    for idx in 0..n {
        if tgt.depth.data[idx] <= 0.0 {
            continue;
        }
        let (_, _, u, v) = pixel_chain(window, tgt, idx, w);
        let vals = bilinear_sample_with_grad(&src.image, u, v).0;
        buf[idx * channels..idx * channels + channels].copy_from_slice(&vals[..channels]);
    }
    buf
}

struct SsimWindowStats {
    mu_a: f64,
    mu_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
}

#[inline]
fn ssim_stats(
    a: &[f64],
    b: &Frame,
    idx: usize,
    width: usize,
    c: usize,
    channels: usize,
) -> SsimWindowStats {
    let mut sa = 0.0;
    let mut sb = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    let mut sab = 0.0;
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            let q = (idx as isize + dy * width as isize + dx) as usize;
            let va = a[q * channels + c];
            let vb = b.image.data[q * channels + c] as f64;
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
        }
    }
    let mu_a = sa / 9.0;
    let mu_b = sb / 9.0;
    SsimWindowStats {
        mu_a,
        mu_b,
        var_a: saa / 9.0 - mu_a * mu_a,
        var_b: sbb / 9.0 - mu_b * mu_b,
        cov: sab / 9.0 - mu_a * mu_b,
    }
}

fn ssim_term_value(window: &CorrectionWindow, term: &FrozenTerm, w: &Matrix4<f64>) -> f64 {
    let tgt = window.frame(term.plan.tgt);
    let src = window.frame(term.plan.src);
    let width = window.camera.intrinsics.width;
    let channels = src.image.channels;
    let a = ssim_warp_buffer(window, tgt, src, w);
    let inv_c = 1.0 / channels as f64;
    let mut sum = 0.0f64;
    for (idx, &weight) in term.weights.iter().enumerate() {
        if weight <= 0.0 {
            continue;
        }
        let mut s = 0.0;
        for c in 0..channels {
            let st = ssim_stats(&a, tgt, idx, width, c, channels);
            let ssim = ((2.0 * st.mu_a * st.mu_b + SSIM_C1) * (2.0 * st.cov + SSIM_C2))
                / ((st.mu_a * st.mu_a + st.mu_b * st.mu_b + SSIM_C1)
                    * (st.var_a + st.var_b + SSIM_C2));
            s += (1.0 - ssim) * 0.5;
        }
        sum += weight * (s * inv_c);
    }
    sum / term.n_active as f64
}

fn ssim_term_value_and_wgrad(
    window: &CorrectionWindow,
    term: &FrozenTerm,
    w: &Matrix4<f64>,
) -> (f64, Matrix4<f64>) {
    let tgt = window.frame(term.plan.tgt);
    let src = window.frame(term.plan.src);
    let k = &window.camera.intrinsics;
    let width = k.width;
    let channels = src.image.channels;
    let inv_c = 1.0 / channels as f64;
    let a = ssim_warp_buffer(window, tgt, src, w);

    // Pass 1: per-center SSIM value plus the adjoint scattered onto the
    // warped pixels through the 3x3 box statistics.
    let mut lambda = vec![0.0f64; a.len()];
    let mut sum = 0.0f64;
    for (idx, &weight) in term.weights.iter().enumerate() {
        if weight <= 0.0 {
            continue;
        }
        let mut s = 0.0;
        for c in 0..channels {
            let st = ssim_stats(&a, tgt, idx, width, c, channels);
            let n1 = 2.0 * st.mu_a * st.mu_b + SSIM_C1;
            let n2 = 2.0 * st.cov + SSIM_C2;
            let d1 = st.mu_a * st.mu_a + st.mu_b * st.mu_b + SSIM_C1;
            let d2 = st.var_a + st.var_b + SSIM_C2;
            let ssim = (n1 * n2) / (d1 * d2);
            s += (1.0 - ssim) * 0.5;

            // d(term)/dA_q for q in the window; the -1/2 from (1-S)/2 and the
            // channel mean fold into the shared factor.
            let shared = weight * inv_c * (-0.5);
            let ds_dmu = ssim * (2.0 * st.mu_b / n1 - 2.0 * st.mu_a / d1);
            let ds_dvar = -ssim / d2;
            let ds_dcov = 2.0 * ssim / n2;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let q = (idx as isize + dy * width as isize + dx) as usize;
                    let aq = a[q * channels + c];
                    let bq = tgt.image.data[q * channels + c] as f64;
                    let ds_daq = (ds_dmu
                        + ds_dvar * 2.0 * (aq - st.mu_a)
                        + ds_dcov * (bq - st.mu_b))
                        / 9.0;
                    lambda[q * channels + c] += shared * ds_daq;
                }
            }
        }
        sum += weight * (s * inv_c);
    }

    // Pass 2: push the per-pixel adjoints through sampling and projection.
    let mut g_w = Matrix4::zeros();
    for idx in 0..term.weights.len() {
        let mut any = false;
        for c in 0..channels {
            if lambda[idx * channels + c] != 0.0 {
                any = true;
                break;
            }
        }
        if !any {
            continue;
        }
        let (p, t, u, v) = pixel_chain(window, tgt, idx, w);
        let (_, du, dv) = bilinear_sample_with_grad(&src.image, u, v);
        let mut g_u = 0.0;
        let mut g_v = 0.0;
        for c in 0..channels {
            let l = lambda[idx * channels + c];
            g_u += l * du[c];
            g_v += l * dv[c];
        }
        let iz = 1.0 / t[2];
        let gx = g_u * k.fx * iz;
        let gy = g_v * k.fy * iz;
        let gz = -(g_u * k.fx * t[0] + g_v * k.fy * t[1]) * iz * iz;
        accumulate_wgrad(&mut g_w, gx, gy, gz, &p);
    }
    let inv_n = 1.0 / term.n_active as f64;
    (sum * inv_n, g_w * inv_n)
}

/// Energy and its analytic gradient at `params`, with masks, truncation and
/// validity frozen at these same parameters.
pub fn energy_gradient(
    window: &CorrectionWindow,
    params: &[f64],
    cfg: &EnergyConfig,
) -> Result<(f64, Vec<f64>)> {
    let frozen = freeze_energy(window, params, cfg)?;
    frozen.value_and_grad(window, params)
}

/// Energy alone, through the same frozen path the optimizer sees.
pub fn energy_value(window: &CorrectionWindow, params: &[f64], cfg: &EnergyConfig) -> Result<f64> {
    let frozen = freeze_energy(window, params, cfg)?;
    frozen.value(window, params)
}

/// Central finite-difference check of the analytic gradient on the frozen
/// functional. Returns (max relative error, worst coordinate, analytic, fd);
/// coordinates where |fd| <= `fd_floor` are skipped.
pub fn gradient_check(
    window: &CorrectionWindow,
    params: &[f64],
    cfg: &EnergyConfig,
    h: f64,
    fd_floor: f64,
) -> Result<(f64, usize, Vec<f64>, Vec<f64>)> {
    let frozen = freeze_energy(window, params, cfg)?;
    let (_, analytic) = frozen.value_and_grad(window, params)?;
    let mut fd = vec![0.0f64; params.len()];
    let mut probe = params.to_vec();
    for j in 0..params.len() {
        probe[j] = params[j] + h;
        let plus = frozen.value(window, &probe)?;
        probe[j] = params[j] - h;
        let minus = frozen.value(window, &probe)?;
        probe[j] = params[j];
        fd[j] = (plus - minus) / (2.0 * h);
    }
    let mut max_rel = 0.0f64;
    let mut worst = 0usize;
    for j in 0..params.len() {
        if fd[j].abs() <= fd_floor {
            continue;
        }
        let rel = (analytic[j] - fd[j]).abs() / fd[j].abs();
        if rel > max_rel {
            max_rel = rel;
            worst = j;
        }
    }
    Ok((max_rel, worst, analytic, fd))
}

fn lr_vector(cfg: &RefineConfig, param_len: usize) -> Vec<f64> {
    let base = [
        cfg.lr_rotation,
        cfg.lr_rotation,
        cfg.lr_rotation,
        cfg.lr_translation,
        cfg.lr_translation,
        cfg.lr_translation,
    ];
    match param_len {
        6 => base.to_vec(),
        12 => {
            let mut lr = Vec::with_capacity(12);
            lr.extend(base.iter().map(|l| l * cfg.lr_previous_factor));
            lr.extend(base);
            lr
        }
        _ => unreachable!(),
    }
}

enum LoopOutcome {
    Converged {
        best_params: Vec<f64>,
        report: RefineReport,
    },
    Degenerate,
}

/// Core descent loop: N iterations of frozen-gradient Adam, keeping the
/// best-energy iterate seen (Adam is not monotone).
fn refine_loop(
    window: &CorrectionWindow,
    params0: Vec<f64>,
    cfg: &RefineConfig,
) -> Result<LoopOutcome> {
    let mut params = params0.clone();
    let mut adam = AdamState::new(lr_vector(cfg, params.len()));
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut best_params = params0;
    let mut best_energy = f64::INFINITY;
    let mut best_iteration = 0usize;

    for it in 0..cfg.iterations {
        let (e, g) = match energy_gradient(window, &params, &cfg.energy) {
            Ok(pair) => pair,
            Err(Error::DegenerateWindow) | Err(Error::NonFiniteEnergy(_)) => {
                return Ok(LoopOutcome::Degenerate);
            }
            Err(e) => return Err(e),
        };
        trace.push(e);
        if e < best_energy {
            best_energy = e;
            best_params.copy_from_slice(&params);
            best_iteration = it;
        }
        adam.step(&mut params, &g);
    }

    // The post-final-step iterate is a candidate too.
    match energy_value(window, &params, &cfg.energy) {
        Ok(e_last) => {
            if e_last < best_energy {
                best_energy = e_last;
                best_params = params;
                best_iteration = cfg.iterations;
            }
        }
        Err(Error::DegenerateWindow) | Err(Error::NonFiniteEnergy(_)) => {
            // Last step walked out of the image; the best iterate stands.
        }
        Err(e) => return Err(e),
    }

    let report = RefineReport {
        initial_energy: trace[0],
        final_energy: best_energy,
        energy_trace: trace,
        iterations_run: cfg.iterations,
        best_iteration,
        fell_back: false,
    };
    Ok(LoopOutcome::Converged {
        best_params,
        report,
    })
}

fn fallback_report() -> RefineReport {
    RefineReport {
        initial_energy: f64::INFINITY,
        final_energy: f64::INFINITY,
        energy_trace: Vec::new(),
        iterations_run: 0,
        best_iteration: 0,
        fell_back: true,
    }
}

/// Two-frame refinement: N Adam iterations on the 6-vector of the relative
/// pose, starting from `t_init`. A degenerate window returns `t_init`
/// unchanged with the fallback flag set.
pub fn refine_two_frame(
    camera: &Camera,
    prev: &Frame,
    cur: &Frame,
    t_init: &PoseSE3,
    cfg: &RefineConfig,
) -> Result<(PoseSE3, RefineReport)> {
    cfg.validate()?;
    let window = CorrectionWindow {
        camera,
        frames: WindowFrames::Two { prev, cur },
    };
    let mut cfg = *cfg;
    cfg.energy.frames = FrameWindow::Two;
    match refine_loop(&window, t_init.params().to_vec(), &cfg)? {
        LoopOutcome::Converged {
            best_params,
            report,
        } => Ok((PoseSE3::from_params(&best_params), report)),
        LoopOutcome::Degenerate => Ok((*t_init, fallback_report())),
    }
}

/// Three-frame refinement: jointly updates the already-refined previous
/// relative pose (damped learning rate) and the current one. Returns
/// (current, previous, report); only the current pose should feed the next
/// window.
pub fn refine_three_frame(
    camera: &Camera,
    prev2: &Frame,
    prev: &Frame,
    cur: &Frame,
    t_prev: &PoseSE3,
    t_init: &PoseSE3,
    cfg: &RefineConfig,
) -> Result<(PoseSE3, PoseSE3, RefineReport)> {
    cfg.validate()?;
    let window = CorrectionWindow {
        camera,
        frames: WindowFrames::Three { prev2, prev, cur },
    };
    let mut cfg = *cfg;
    cfg.energy.frames = FrameWindow::Three;
    let mut params = Vec::with_capacity(12);
    params.extend_from_slice(&t_prev.params());
    params.extend_from_slice(&t_init.params());
    match refine_loop(&window, params, &cfg)? {
        LoopOutcome::Converged {
            best_params,
            report,
        } => Ok((
            PoseSE3::from_params(&best_params[6..12]),
            PoseSE3::from_params(&best_params[0..6]),
            report,
        )),
        LoopOutcome::Degenerate => Ok((*t_init, *t_prev, fallback_report())),
    }
}

/// Per-frame record of a sequence run.
#[derive(Debug, Clone)]
pub struct FrameRefineRecord {
    pub frame_index: usize,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub iterations: usize,
    pub fell_back: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SequenceRunReport {
    pub frames: Vec<FrameRefineRecord>,
}

/// Refine every consecutive relative pose and accumulate camera-to-world
/// absolute poses (first pose is the identity). The window size comes from
/// `cfg.energy.frames`; a three-frame run bootstraps its first window with
/// the two-frame refiner.
pub fn run_sequence(
    camera: &Camera,
    frames: &[Frame],
    init_relative: &[PoseSE3],
    cfg: &RefineConfig,
) -> Result<(Vec<Matrix4<f64>>, SequenceRunReport)> {
    cfg.validate()?;
    if frames.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "sequence needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    if init_relative.len() != frames.len() - 1 {
        return Err(Error::InvalidConfig(format!(
            "expected {} initial poses, got {}",
            frames.len() - 1,
            init_relative.len()
        )));
    }

    let mut absolute = vec![Matrix4::identity()];
    let mut report = SequenceRunReport::default();
    let mut prev_refined: Option<PoseSE3> = None;

    for i in 1..frames.len() {
        let t_init = &init_relative[i - 1];
        let started = Instant::now();
        let (refined, window_report) = match (cfg.energy.frames, &prev_refined) {
            (FrameWindow::Three, Some(t_prev)) if i >= 2 => {
                let (cur, _prev, rep) = refine_three_frame(
                    camera,
                    &frames[i - 2],
                    &frames[i - 1],
                    &frames[i],
                    t_prev,
                    t_init,
                    cfg,
                )?;
                (cur, rep)
            }
            _ => refine_two_frame(camera, &frames[i - 1], &frames[i], t_init, cfg)?,
        };
        report.frames.push(FrameRefineRecord {
            frame_index: i,
            initial_energy: window_report.initial_energy,
            final_energy: window_report.final_energy,
            iterations: window_report.iterations_run,
            fell_back: window_report.fell_back,
            seconds: started.elapsed().as_secs_f64(),
        });
        let last = *absolute.last().unwrap();
        absolute.push(compose(&last, refined.matrix()));
        prev_refined = Some(refined);
    }

    Ok((absolute, report))
}

/// Accumulate relative poses into absolute camera-to-world poses without any
/// refinement (passthrough).
pub fn accumulate_relative(init_relative: &[PoseSE3]) -> Vec<Matrix4<f64>> {
    let mut absolute = vec![Matrix4::identity()];
    for rel in init_relative {
        let last = *absolute.last().unwrap();
        absolute.push(compose(&last, rel.matrix()));
    }
    absolute
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Intrinsics;
    use crate::synth::{make_pair, make_sequence, PlaneScene, SequenceSpec};
    use nalgebra::Vector3;

    fn scene_and_pair(
        seed: u64,
        motion: &PoseSE3,
    ) -> (crate::synth::SyntheticBundle, PlaneScene) {
        let k = Intrinsics::new(140.0, 140.0, 63.5, 47.5, 128, 96).unwrap();
        let scene = PlaneScene::seeded(seed, k, 6.0, (0.12, -0.07)).unwrap();
        let bundle = make_pair(&scene, motion, seed).unwrap();
        (bundle, scene)
    }

    #[test]
    fn adam_zero_gradient_no_move() {
        let mut adam = AdamState::new(vec![0.1; 3]);
        let mut params = vec![1.0, -2.0, 3.0];
        adam.step(&mut params, &[0.0, 0.0, 0.0]);
        assert_eq!(params, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_constant_gradient_approaches_lr_sign_steps() {
        let mut adam = AdamState::new(vec![0.05; 2]);
        let mut params = vec![0.0, 0.0];
        let grad = [0.3, -0.7];
        let mut last = params.clone();
        for it in 0..300 {
            adam.step(&mut params, &grad);
            if it >= 290 {
                let step0 = params[0] - last[0];
                let step1 = params[1] - last[1];
                assert!((step0 + 0.05).abs() < 5e-4, "step0 {step0}");
                assert!((step1 - 0.05).abs() < 5e-4, "step1 {step1}");
            }
            last = params.clone();
        }
    }

    #[test]
    fn adam_quadratic_bowl_converges() {
        // f(x) = 0.5 (x - 3)^2, lr 0.05: within 1e-3 of the minimum in <= 500.
        let mut adam = AdamState::new(vec![0.05]);
        let mut x = vec![0.0f64];
        let mut reached = None;
        for it in 0..500 {
            let g = x[0] - 3.0;
            adam.step(&mut x, &[g]);
            if (x[0] - 3.0).abs() < 1e-3 {
                reached = Some(it);
                break;
            }
        }
        assert!(reached.is_some(), "ended at {}", x[0]);
    }

    #[test]
    fn gradient_zero_at_global_minimum_of_identical_frames() {
        let motion = PoseSE3::identity();
        let (bundle, _) = scene_and_pair(5, &motion);
        let window = CorrectionWindow {
            camera: &bundle.camera,
            frames: WindowFrames::Two {
                prev: &bundle.frames[0],
                cur: &bundle.frames[1],
            },
        };
        let cfg = EnergyConfig::default();
        let (e, g) = energy_gradient(&window, &PoseSE3::identity().params(), &cfg).unwrap();
        assert_eq!(e, 0.0);
        assert!(g.iter().all(|&gj| gj == 0.0), "{g:?}");
    }

    #[test]
    fn gradient_matches_fd_on_conditioned_fixtures() {
        // Trials 0..3 cover 6-d and 12-d windows and all three losses; the
        // acceptance suite runs the full 20.
        for trial in 0..4 {
            let case = crate::fixtures::gradcheck_case(trial).unwrap();
            let cfg = case.energy_config();
            let (max_rel, worst, a, fd) =
                gradient_check(&case.correction_window(), &case.params, &cfg, 1e-5, 1e-8)
                    .unwrap();
            assert!(
                max_rel < 1e-4,
                "trial {trial} {:?}: rel {max_rel} at coord {worst}: {} vs {}",
                case.loss,
                a[worst],
                fd[worst]
            );
        }
    }

    #[test]
    fn gradient_descends_toward_ground_truth_translation() {
        // GT motion is +x; starting at identity, the energy should decrease
        // along +t_x, i.e. the gradient's t_x component is negative.
        let motion = PoseSE3::new(Vector3::zeros(), Vector3::new(0.12, 0.0, 0.0));
        let (bundle, _) = scene_and_pair(31, &motion);
        let window = CorrectionWindow {
            camera: &bundle.camera,
            frames: WindowFrames::Two {
                prev: &bundle.frames[0],
                cur: &bundle.frames[1],
            },
        };
        let cfg = EnergyConfig::default();
        let (_, g) = energy_gradient(&window, &PoseSE3::identity().params(), &cfg).unwrap();
        assert!(g[3] < 0.0, "t_x gradient {}", g[3]);
    }

    #[test]
    fn refine_identical_frames_stays_at_identity() {
        let motion = PoseSE3::identity();
        let (bundle, _) = scene_and_pair(7, &motion);
        let cfg = RefineConfig::default();
        let (pose, report) = refine_two_frame(
            &bundle.camera,
            &bundle.frames[0],
            &bundle.frames[1],
            &PoseSE3::identity(),
            &cfg,
        )
        .unwrap();
        assert!(!report.fell_back);
        assert!(pose.rotation_vector().norm() < 1e-6);
        assert!(pose.translation().norm() < 1e-6);
        assert_eq!(report.final_energy, 0.0);
    }

    #[test]
    fn refine_recovers_small_offset() {
        let motion = PoseSE3::new(
            Vector3::new(0.0, 0.003, 0.0),
            Vector3::new(0.04, 0.0, 0.06),
        );
        let (bundle, _) = scene_and_pair(13, &motion);
        let cfg = RefineConfig {
            iterations: 60,
            ..RefineConfig::default()
        };
        let (pose, report) = refine_two_frame(
            &bundle.camera,
            &bundle.frames[0],
            &bundle.frames[1],
            &PoseSE3::identity(),
            &cfg,
        )
        .unwrap();
        assert!(report.final_energy <= report.initial_energy);
        let t_err = (pose.translation() - motion.translation()).norm();
        let r_err = (pose.rotation_vector() - motion.rotation_vector()).norm();
        assert!(t_err < 0.01, "t_err {t_err}");
        assert!(r_err < 0.002, "r_err {r_err}");
    }

    #[test]
    fn refine_at_ground_truth_barely_moves() {
        let motion = PoseSE3::new(
            Vector3::new(0.001, 0.002, -0.001),
            Vector3::new(0.05, -0.02, 0.07),
        );
        let (bundle, _) = scene_and_pair(17, &motion);
        let cfg = RefineConfig::default();
        let (pose, report) = refine_two_frame(
            &bundle.camera,
            &bundle.frames[0],
            &bundle.frames[1],
            &motion,
            &cfg,
        )
        .unwrap();
        assert!(report.final_energy <= report.initial_energy);
        assert!((pose.translation() - motion.translation()).norm() < 1e-3);
        assert!((pose.rotation_vector() - motion.rotation_vector()).norm() < 1e-3);
    }

    #[test]
    fn three_frame_with_alpha_one_and_zero_prev_lr_matches_two_frame() {
        let motion = PoseSE3::new(
            Vector3::new(0.0, 0.002, 0.0),
            Vector3::new(0.03, 0.0, 0.05),
        );
        let k = Intrinsics::new(140.0, 140.0, 63.5, 47.5, 128, 96).unwrap();
        let scene = PlaneScene::seeded(23, k, 6.0, (0.1, -0.05)).unwrap();
        let bundle = make_sequence(
            &scene,
            &SequenceSpec {
                frames: 3,
                step: motion,
                sigma_rot: 0.0,
                sigma_trans: 0.0,
                seed: 23,
            },
        )
        .unwrap();

        let cfg2 = RefineConfig {
            iterations: 15,
            ..RefineConfig::default()
        };
        let mut cfg3 = cfg2;
        cfg3.lr_previous_factor = 0.0;
        cfg3.energy.alpha = 1.0;

        let t_init = PoseSE3::new(
            Vector3::new(0.001, 0.0, 0.0),
            Vector3::new(0.02, 0.01, 0.04),
        );
        let (pose2, rep2) = refine_two_frame(
            &bundle.camera,
            &bundle.frames[1],
            &bundle.frames[2],
            &t_init,
            &cfg2,
        )
        .unwrap();
        let (pose3, prev3, rep3) = refine_three_frame(
            &bundle.camera,
            &bundle.frames[0],
            &bundle.frames[1],
            &bundle.frames[2],
            &motion,
            &t_init,
            &cfg3,
        )
        .unwrap();

        // Bit-identical energy traces and refined poses; untouched previous.
        assert_eq!(rep2.energy_trace, rep3.energy_trace);
        assert_eq!(pose2.params(), pose3.params());
        assert_eq!(prev3.params(), motion.params());
    }

    #[test]
    fn run_sequence_identical_frames_stays_identity() {
        let k = Intrinsics::new(120.0, 120.0, 47.5, 35.5, 96, 72).unwrap();
        let scene = PlaneScene::seeded(3, k, 8.0, (0.0, 0.05)).unwrap();
        let bundle = make_sequence(
            &scene,
            &SequenceSpec {
                frames: 4,
                step: PoseSE3::identity(),
                sigma_rot: 0.0,
                sigma_trans: 0.0,
                seed: 3,
            },
        )
        .unwrap();
        let cfg = RefineConfig {
            iterations: 5,
            ..RefineConfig::default()
        };
        let inits = vec![PoseSE3::identity(); 3];
        let (absolute, report) =
            run_sequence(&bundle.camera, &bundle.frames, &inits, &cfg).unwrap();
        assert_eq!(absolute.len(), 4);
        for m in &absolute {
            let dev: f64 = (m - Matrix4::identity())
                .iter()
                .fold(0.0f64, |acc, x| acc.max(x.abs()));
            assert!(dev < 1e-6);
        }
        assert!(report.frames.iter().all(|f| !f.fell_back));
    }

    #[test]
    fn run_sequence_two_frames_is_single_refine() {
        let motion = PoseSE3::new(Vector3::zeros(), Vector3::new(0.02, 0.0, 0.05));
        let (bundle, _) = scene_and_pair(41, &motion);
        let cfg = RefineConfig {
            iterations: 10,
            ..RefineConfig::default()
        };
        let init = bundle.init_relative.clone();
        let (absolute, report) =
            run_sequence(&bundle.camera, &bundle.frames, &init, &cfg).unwrap();
        let (pose, single) = refine_two_frame(
            &bundle.camera,
            &bundle.frames[0],
            &bundle.frames[1],
            &init[0],
            &cfg,
        )
        .unwrap();
        assert_eq!(absolute.len(), 2);
        assert_eq!(absolute[1], *pose.matrix());
        assert_eq!(report.frames[0].final_energy, single.final_energy);
    }

    #[test]
    fn degenerate_window_falls_back() {
        // All-invalid target depth: no active pixels anywhere.
        let k = Intrinsics::new(120.0, 120.0, 47.5, 35.5, 96, 72).unwrap();
        let scene = PlaneScene::seeded(3, k, 8.0, (0.0, 0.0)).unwrap();
        let bundle = make_pair(&scene, &PoseSE3::identity(), 1).unwrap();
        let dead_depth = crate::warp::DepthMap::new(96, 72, vec![0.0; 96 * 72]).unwrap();
        let broken = Frame::new(bundle.frames[0].image.clone(), dead_depth, None).unwrap();
        let t_init = PoseSE3::new(Vector3::zeros(), Vector3::new(0.1, 0.2, 0.3));
        let (pose, report) = refine_two_frame(
            &bundle.camera,
            &bundle.frames[0],
            &broken,
            &t_init,
            &RefineConfig::default(),
        )
        .unwrap();
        assert!(report.fell_back);
        assert_eq!(pose.params(), t_init.params());
    }

    #[test]
    fn accumulate_relative_passthrough() {
        let rels = vec![
            PoseSE3::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0)),
            PoseSE3::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 2.0)),
        ];
        let abs = accumulate_relative(&rels);
        assert_eq!(abs.len(), 3);
        assert_eq!(abs[2][(2, 3)], 3.0);
    }
}
