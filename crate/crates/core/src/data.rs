//! Procedural face pairs with closed-form flows, dataset manifests, real-data
//! ingestion and batching.

use std::ops::Range;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{validate_sample, FlowField, Image, LandmarkSet, Mask, Sample, View};
use crate::error::{Error, Result};
use crate::losses::Regions;

/// Yaw angles of the synthetic protocol, including the frontal pose.
pub const POSES: [i32; 13] = [-90, -75, -60, -45, -30, -15, 0, 15, 30, 45, 60, 75, 90];

pub const LEFT_EYE: Range<usize> = 0..4;
pub const RIGHT_EYE: Range<usize> = 4..8;
pub const LEFT_BROW: Range<usize> = 8..11;
pub const RIGHT_BROW: Range<usize> = 11..14;
pub const NOSE: Range<usize> = 14..18;
pub const MOUTH: Range<usize> = 18..22;
pub const CONTOUR: Range<usize> = 22..32;
/// Contour points pushed outward past the face oval.
pub const OUTER_CONTOUR: Range<usize> = 32..40;
pub const N_SEMANTIC_LANDMARKS: usize = 32;
pub const N_LANDMARKS: usize = 40;

/// Landmark groups whose crops feed the regional perceptual loss.
pub const REGION_GROUPS: [Range<usize>; 4] = [LEFT_EYE, RIGHT_EYE, NOSE, MOUTH];

/// Skin extends past the masked oval so the mask boundary sits on smooth content.
const SKIN_RADIUS: f32 = 1.22;
const OUTER_RADIUS: f32 = 1.12;
const BACKGROUND: [f32; 3] = [0.22, 0.23, 0.26];
/// Edge softness as a fraction of the resolution.
const SOFTNESS: f32 = 0.03;
/// Fraction of the face half-width hidden on the far side at 90 degrees.
const BAND_AT_90: f64 = 0.35;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-identity face layout. Positions and sizes are fractions of the
/// resolution; colors are linear RGB in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceGeometry {
    pub cx: f32,
    pub cy: f32,
    pub ax: f32,
    pub ay: f32,
    pub skin: [f32; 3],
    pub hair: [f32; 3],
    pub iris: [f32; 3],
    pub lips: [f32; 3],
    pub hairline: f32,
    pub eye_dx: f32,
    pub eye_y: f32,
    pub eye_rx: f32,
    pub eye_ry: f32,
    pub brow_dy: f32,
    pub brow_w: f32,
    pub brow_h: f32,
    pub nose_y: f32,
    pub nose_w: f32,
    pub nose_l: f32,
    pub mouth_y: f32,
    pub mouth_w: f32,
    pub mouth_h: f32,
    /// Asymmetric marking center, in oval-normalized offsets from the face center.
    pub mole: [f32; 2],
    pub mole_r: f32,
}

impl FaceGeometry {
    pub fn from_seed(seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(splitmix(seed));
        let mut u = |lo: f32, hi: f32| r.gen_range(lo..hi);
        let cx = 0.5 + u(-0.015, 0.015);
        let cy = 0.52 + u(-0.015, 0.015);
        let ax = u(0.29, 0.34);
        let ay = u(0.37, 0.42);
        let tone = u(0.45, 0.75);
        let skin = [tone + 0.08, tone - 0.02 + u(-0.04, 0.04), tone - 0.1 + u(-0.05, 0.05)];
        let hb = u(0.05, 0.55);
        let hair = [hb + u(0.0, 0.15), hb + u(-0.03, 0.05), hb * u(0.5, 1.0)];
        let iris = [u(0.08, 0.55), u(0.08, 0.55), u(0.08, 0.55)];
        let lips = [u(0.55, 0.82), u(0.18, 0.38), u(0.22, 0.4)];
        let hairline = u(0.5, 0.68);
        let eye_dx = u(0.36, 0.46) * ax;
        let eye_y = cy - u(0.18, 0.28) * ay;
        let eye_rx = u(0.13, 0.18) * ax;
        let eye_ry = u(0.06, 0.09) * ay;
        let brow_dy = u(0.13, 0.19) * ay;
        let brow_w = eye_rx * u(1.0, 1.3);
        let brow_h = u(0.03, 0.05) * ay;
        let nose_y = cy + u(0.02, 0.1) * ay;
        let nose_w = u(0.08, 0.14) * ax;
        let nose_l = u(0.15, 0.22) * ay;
        let mouth_y = cy + u(0.42, 0.52) * ay;
        let mouth_w = u(0.25, 0.38) * ax;
        let mouth_h = u(0.05, 0.09) * ay;
        let side = if u(0.0, 1.0) < 0.5 { -1.0 } else { 1.0 };
        let mole = [side * u(0.35, 0.6), u(-0.05, 0.35)];
        let mole_r = u(0.05, 0.08) * ax;
        let clamp3 = |c: [f32; 3]| c.map(|v| v.clamp(0.02, 0.95));
        Self {
            cx,
            cy,
            ax,
            ay,
            skin: clamp3(skin),
            hair: clamp3(hair),
            iris: clamp3(iris),
            lips: clamp3(lips),
            hairline,
            eye_dx,
            eye_y,
            eye_rx,
            eye_ry,
            brow_dy,
            brow_w,
            brow_h,
            nose_y,
            nose_w,
            nose_l,
            mouth_y,
            mouth_w,
            mouth_h,
            mole,
            mole_r,
        }
    }
}

/// Multiplicative horizontal gain ramp across the profile face plus a
/// global gain: the left edge of the face is scaled by `g_left`, the right by
/// `g_right`, linearly in between and constant outside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IllumModel {
    pub g_left: f32,
    pub g_right: f32,
}

impl IllumModel {
    pub fn neutral() -> Self {
        Self {
            g_left: 1.0,
            g_right: 1.0,
        }
    }

    /// Illumination variant `illum_id` of an identity; id 0 and pose 0 are
    /// neutral, otherwise the deviation from 1 grows with `|pose| / 90`.
    pub fn variant(identity_seed: u64, illum_id: u32, pose_deg: i32) -> Self {
        if illum_id == 0 || pose_deg == 0 {
            return Self::neutral();
        }
        let mut r = ChaCha8Rng::seed_from_u64(splitmix(identity_seed ^ splitmix(illum_id as u64 + 0x1111)));
        let dir = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
        let alpha = r.gen_range(0.4f32..0.6);
        let beta = r.gen_range(-0.25f32..0.25);
        let rho = pose_deg.unsigned_abs() as f32 / 90.0;
        let global = 1.0 + beta * rho;
        Self {
            g_left: global * (1.0 - dir * alpha * rho),
            g_right: global * (1.0 + dir * alpha * rho),
        }
    }

    fn gain(&self, t: f32) -> f32 {
        let t = t.clamp(-1.0, 1.0);
        self.g_left + (self.g_right - self.g_left) * (t + 1.0) * 0.5
    }
}

/// Horizontal yaw squeeze in pixel coordinates. With `u = (x - cx) / ax`,
/// `x' = cx + ax * g(u)` where `g(u) = s u + k (1 - u^2)` on `[-1, 1]` and
/// continues linearly outside. `s = 0.55 + 0.45 cos(theta)`,
/// `k = 0.2 s sin(theta)`; the far side is compressed and the center shifts
/// toward it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseMap {
    pub cx: f64,
    pub ax: f64,
    pub s: f64,
    pub k: f64,
}

impl PoseMap {
    pub fn new(geom: &FaceGeometry, pose_deg: i32, resolution: usize) -> Self {
        let th = (pose_deg as f64).to_radians();
        let s = 0.55 + 0.45 * th.cos();
        Self {
            cx: geom.cx as f64 * resolution as f64 - 0.5,
            ax: geom.ax as f64 * resolution as f64,
            s,
            k: 0.2 * s * th.sin(),
        }
    }

    fn g(&self, u: f64) -> f64 {
        let (s, k) = (self.s, self.k);
        if u > 1.0 {
            s + (s - 2.0 * k) * (u - 1.0)
        } else if u < -1.0 {
            -s + (s + 2.0 * k) * (u + 1.0)
        } else {
            s * u + k * (1.0 - u * u)
        }
    }

    fn g_inv(&self, v: f64) -> f64 {
        let (s, k) = (self.s, self.k);
        if v > s {
            1.0 + (v - s) / (s - 2.0 * k)
        } else if v < -s {
            -1.0 + (v + s) / (s + 2.0 * k)
        } else {
            2.0 * (v - k) / (s + (s * s + 4.0 * k * (k - v)).sqrt())
        }
    }

    /// Frontal x to profile x.
    pub fn forward(&self, x: f64) -> f64 {
        self.cx + self.ax * self.g((x - self.cx) / self.ax)
    }

    /// Profile x to frontal x.
    pub fn inverse(&self, xp: f64) -> f64 {
        self.cx + self.ax * self.g_inv((xp - self.cx) / self.ax)
    }
}

fn smooth_edge(d: f32, soft: f32) -> f32 {
    let t = (0.5 + d / soft).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Approximate signed distance (pixels, positive inside) to an ellipse.
fn ellipse_sd(x: f32, y: f32, cx: f32, cy: f32, rx: f32, ry: f32) -> f32 {
    let d = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();
    (1.0 - d) * rx.min(ry)
}

/// Geometry converted to pixel units for one resolution.
struct Painter {
    g: FaceGeometry,
    soft: f32,
}

impl Painter {
    fn new(geom: &FaceGeometry, resolution: usize) -> Self {
        let r = resolution as f32;
        let p = |v: f32| v * r;
        let g = FaceGeometry {
            cx: p(geom.cx) - 0.5,
            cy: p(geom.cy) - 0.5,
            ax: p(geom.ax),
            ay: p(geom.ay),
            eye_dx: p(geom.eye_dx),
            eye_y: p(geom.eye_y) - 0.5,
            eye_rx: p(geom.eye_rx),
            eye_ry: p(geom.eye_ry),
            brow_dy: p(geom.brow_dy),
            brow_w: p(geom.brow_w),
            brow_h: p(geom.brow_h),
            nose_y: p(geom.nose_y) - 0.5,
            nose_w: p(geom.nose_w),
            nose_l: p(geom.nose_l),
            mouth_y: p(geom.mouth_y) - 0.5,
            mouth_w: p(geom.mouth_w),
            mouth_h: p(geom.mouth_h),
            mole_r: p(geom.mole_r),
            ..geom.clone()
        };
        Self {
            g,
            soft: (SOFTNESS * r).max(0.75),
        }
    }

    fn oval_radius(&self, x: f32, y: f32) -> f32 {
        let g = &self.g;
        (((x - g.cx) / g.ax).powi(2) + ((y - g.cy) / g.ay).powi(2)).sqrt()
    }

    fn in_oval(&self, x: f32, y: f32) -> bool {
        self.oval_radius(x, y) <= 1.0
    }

    /// Frontal, neutrally lit color at pixel coordinates `(x, y)`.
    fn color(&self, x: f32, y: f32) -> [f32; 3] {
        let g = &self.g;
        let soft = self.soft;
        let ro = self.oval_radius(x, y);
        let a_skin = smooth_edge((SKIN_RADIUS - ro) * g.ax.min(g.ay), soft);
        let shade = 1.0 - 0.08 * ((y - g.cy) / g.ay);
        let skin = g.skin.map(|c| (c * shade).clamp(0.0, 1.0));
        let mut c = mix(BACKGROUND, skin, a_skin);

        let un = (x - g.cx) / g.ax;
        let hl = g.cy - g.ay * (g.hairline + 0.25 * un * un);
        c = mix(c, g.hair, smooth_edge(hl - y, soft) * a_skin);

        for side in [-1.0f32, 1.0] {
            let ex = g.cx + side * g.eye_dx;
            let by = g.eye_y - g.brow_dy;
            c = mix(c, g.hair.map(|v| v * 0.8), smooth_edge(ellipse_sd(x, y, ex, by, g.brow_w, g.brow_h), soft));
            c = mix(c, [0.93, 0.92, 0.9], smooth_edge(ellipse_sd(x, y, ex, g.eye_y, g.eye_rx, g.eye_ry), soft));
            let ir = g.eye_ry * 0.95;
            c = mix(c, g.iris, smooth_edge(ellipse_sd(x, y, ex, g.eye_y, ir, ir), soft));
        }

        let nose = g.skin.map(|v| v * 0.78);
        c = mix(c, nose, smooth_edge(ellipse_sd(x, y, g.cx, g.nose_y, g.nose_w, g.nose_l), soft));
        for side in [-1.0f32, 1.0] {
            let nx = g.cx + side * g.nose_w * 0.7;
            let ny = g.nose_y + g.nose_l * 0.8;
            let r = g.nose_w * 0.45;
            c = mix(c, g.skin.map(|v| v * 0.35), smooth_edge(ellipse_sd(x, y, nx, ny, r, r * 0.7), soft));
        }
        c = mix(c, g.lips, smooth_edge(ellipse_sd(x, y, g.cx, g.mouth_y, g.mouth_w, g.mouth_h), soft));

        let mx = g.cx + g.mole[0] * g.ax;
        let my = g.cy + g.mole[1] * g.ay;
        c = mix(c, [0.12, 0.08, 0.07], smooth_edge(ellipse_sd(x, y, mx, my, g.mole_r, g.mole_r), soft));
        c
    }

    fn landmarks(&self) -> Vec<[f32; 2]> {
        let g = &self.g;
        let mut pts = Vec::with_capacity(N_LANDMARKS);
        for side in [-1.0f32, 1.0] {
            let ex = g.cx + side * g.eye_dx;
            pts.extend([
                [ex - g.eye_rx, g.eye_y],
                [ex + g.eye_rx, g.eye_y],
                [ex, g.eye_y - g.eye_ry],
                [ex, g.eye_y + g.eye_ry],
            ]);
        }
        for side in [-1.0f32, 1.0] {
            let ex = g.cx + side * g.eye_dx;
            let by = g.eye_y - g.brow_dy;
            pts.extend([[ex - g.brow_w, by], [ex, by], [ex + g.brow_w, by]]);
        }
        pts.extend([
            [g.cx, g.nose_y - g.nose_l],
            [g.cx, g.nose_y + g.nose_l],
            [g.cx - g.nose_w * 0.7, g.nose_y + g.nose_l * 0.8],
            [g.cx + g.nose_w * 0.7, g.nose_y + g.nose_l * 0.8],
        ]);
        pts.extend([
            [g.cx - g.mouth_w, g.mouth_y],
            [g.cx + g.mouth_w, g.mouth_y],
            [g.cx, g.mouth_y - g.mouth_h],
            [g.cx, g.mouth_y + g.mouth_h],
        ]);
        let on_oval = |deg: f32, r: f32| {
            let a = deg.to_radians();
            [g.cx + r * g.ax * a.cos(), g.cy + r * g.ay * a.sin()]
        };
        for deg in [-30.0, 0.0, 30.0, 60.0, 90.0, 120.0, 150.0, 180.0, 210.0, 270.0] {
            pts.push(on_oval(deg, 1.0));
        }
        for deg in [-50.0, -15.0, 15.0, 50.0, 130.0, 165.0, 195.0, 230.0] {
            pts.push(on_oval(deg, OUTER_RADIUS));
        }
        pts
    }
}

/// Everything needed to render one synthetic pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFaceSpec {
    pub identity_id: u32,
    pub identity_seed: u64,
    pub geometry: FaceGeometry,
    pub pose_deg: i32,
    pub illum_id: u32,
    pub illum: IllumModel,
    pub resolution: usize,
}

impl SyntheticFaceSpec {
    pub fn new(identity_id: u32, identity_seed: u64, pose_deg: i32, illum_id: u32, resolution: usize) -> Self {
        Self {
            identity_id,
            identity_seed,
            geometry: FaceGeometry::from_seed(identity_seed),
            pose_deg,
            illum_id,
            illum: IllumModel::variant(identity_seed, illum_id, pose_deg),
            resolution,
        }
    }
}

/// Width of the far-side band (fraction of the face half-width) whose content
/// is replaced by shadow in the profile.
pub fn dropout_band_width(pose_deg: i32) -> f64 {
    let rho = pose_deg.unsigned_abs() as f64 / 90.0;
    BAND_AT_90 * rho * rho
}

fn image_from_fn(r: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Result<Image> {
    let mut v = Vec::with_capacity(r * r * 3);
    for y in 0..r {
        for x in 0..r {
            v.extend(f(y, x).map(|c| c.clamp(0.0, 1.0)));
        }
    }
    Image::from_hwc(r, r, &v)
}

/// Renders the neutral frontal view and the posed, relit profile view with
/// their exact flows and landmark correspondences.
pub fn render_synthetic(spec: &SyntheticFaceSpec) -> Result<Sample> {
    if spec.pose_deg.abs() > 90 {
        return Err(Error::invalid(format!("pose {} outside [-90, 90]", spec.pose_deg)));
    }
    let r = spec.resolution;
    if r < 16 || r % 4 != 0 {
        return Err(Error::invalid("resolution must be a multiple of 4 and at least 16"));
    }
    let painter = Painter::new(&spec.geometry, r);
    let pm = PoseMap::new(&spec.geometry, spec.pose_deg, r);
    let side = spec.pose_deg.signum() as f32;
    let band = dropout_band_width(spec.pose_deg) as f32;
    let g = &painter.g;
    let center_p = pm.forward(pm.cx) as f32;
    let half_p = (pm.s * pm.ax) as f32;

    let frontal = image_from_fn(r, |y, x| painter.color(x as f32, y as f32))?;
    let frontal_mask = Mask::from_fn(r, r, |y, x| painter.in_oval(x as f32, y as f32))?;

    // Profile pixel -> frontal x, plus the occlusion band weight there.
    let src_x: Vec<f32> = (0..r).map(|x| pm.inverse(x as f64) as f32).collect();
    let band_alpha = |x: usize, y: usize| -> f32 {
        if band <= 0.0 {
            return 0.0;
        }
        let fx = src_x[x];
        let u = side * (fx - g.cx) / g.ax;
        let ro = painter.oval_radius(fx, y as f32);
        let a_skin = smooth_edge((SKIN_RADIUS - ro) * g.ax.min(g.ay), painter.soft);
        smooth_edge((u - (1.0 - band)) * g.ax, painter.soft) * a_skin
    };
    let profile = image_from_fn(r, |y, x| {
        let fx = src_x[x];
        let mut c = painter.color(fx, y as f32);
        let a = band_alpha(x, y);
        if a > 0.0 {
            c = mix(c, g.skin.map(|v| v * 0.3), a);
        }
        let gain = spec.illum.gain((x as f32 - center_p) / half_p);
        c.map(|v| v * gain)
    })?;
    let profile_mask = Mask::from_fn(r, r, |y, x| {
        painter.in_oval(src_x[x], y as f32) && band_alpha(x, y) < 1e-3
    })?;

    let q = painter.landmarks();
    let p: Vec<[f32; 2]> = q.iter().map(|&[x, y]| [pm.forward(x as f64) as f32, y]).collect();
    let fwd = FlowField::from_fn(r, r, |_, x| [(pm.forward(x as f64) - x as f64) as f32, 0.0])?;
    let rev = FlowField::from_fn(r, r, |_, x| [(pm.inverse(x as f64) - x as f64) as f32, 0.0])?;
    Ok(Sample {
        profile: View {
            image: profile,
            mask: profile_mask,
            landmarks: LandmarkSet::new(p),
        },
        frontal: View {
            image: frontal,
            mask: frontal_mask,
            landmarks: LandmarkSet::new(q),
        },
        identity_id: spec.identity_id,
        pose_deg: spec.pose_deg,
        illum_id: spec.illum_id,
        gt_forward_flow: Some(fwd),
        gt_reverse_flow: Some(rev),
    })
}

/// One profile/frontal pair of the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub identity: u32,
    pub pose_deg: i32,
    pub illum_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    /// Directory layout `<root>/<identity dir>/<pose>_<illum>.png`.
    Real { identity_dirs: Vec<String> },
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub root: PathBuf,
    pub source: Source,
    pub seed: u64,
    pub resolution: usize,
    pub poses: Vec<i32>,
    pub illum_per_pose: u32,
    pub n_landmarks: usize,
    pub identity_seeds: Vec<u64>,
    pub train_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
    /// One neutral frontal record per test identity.
    pub gallery: Vec<Record>,
    pub records: Vec<Record>,
}

/// Knobs of the synthetic dataset beyond identity count, poses and seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub resolution: usize,
    pub illum_per_pose: u32,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            resolution: 64,
            illum_per_pose: 4,
        }
    }
}

/// Identity seed `i` of the stream rooted at `seed`.
pub fn identity_seed(seed: u64, i: u32) -> u64 {
    splitmix(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ splitmix(i as u64))
}

/// Number of training identities in the ordered 80/20 split.
pub fn train_count(n: usize) -> usize {
    ((n as f64 * 0.8).round() as usize).clamp(1, n - 1)
}

/// Deterministic synthetic manifest: identities `0..n`, the first 80% train.
pub fn build_manifest(root: &Path, n_identities: usize, poses: &[i32], seed: u64, opts: SynthOptions) -> Result<DatasetManifest> {
    if n_identities < 2 {
        return Err(Error::invalid("need at least 2 identities for a train/test split"));
    }
    if poses.is_empty() || poses.iter().any(|p| p.abs() > 90) {
        return Err(Error::invalid("poses must be non-empty and within [-90, 90]"));
    }
    if opts.illum_per_pose == 0 {
        return Err(Error::invalid("illum_per_pose must be >= 1"));
    }
    let meta = std::fs::metadata(root).map_err(|e| Error::io(root, e))?;
    if !meta.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotADirectory, "not a directory"),
        ));
    }
    let n_train = train_count(n_identities);
    let ids: Vec<u32> = (0..n_identities as u32).collect();
    let mut records = Vec::new();
    for &identity in &ids {
        for &pose_deg in poses {
            for illum_id in 1..=opts.illum_per_pose {
                records.push(Record {
                    identity,
                    pose_deg,
                    illum_id,
                });
            }
        }
    }
    let test_ids = ids[n_train..].to_vec();
    let gallery = test_ids
        .iter()
        .map(|&identity| Record {
            identity,
            pose_deg: 0,
            illum_id: 0,
        })
        .collect();
    Ok(DatasetManifest {
        version: MANIFEST_VERSION,
        root: root.to_path_buf(),
        source: Source::Synthetic,
        seed,
        resolution: opts.resolution,
        poses: poses.to_vec(),
        illum_per_pose: opts.illum_per_pose,
        n_landmarks: N_LANDMARKS,
        identity_seeds: ids.iter().map(|&i| identity_seed(seed, i)).collect(),
        train_ids: ids[..n_train].to_vec(),
        test_ids,
        gallery,
        records,
    })
}

impl DatasetManifest {
    /// Neutral frontal image of an identity.
    pub fn frontal(&self, identity: u32) -> Result<Image> {
        match &self.source {
            Source::Synthetic => {
                let seed = *self
                    .identity_seeds
                    .get(identity as usize)
                    .ok_or_else(|| Error::invalid(format!("unknown identity {identity}")))?;
                render_frontal(seed, self.resolution)
            }
            Source::Real { identity_dirs } => {
                let dir = identity_dirs
                    .get(identity as usize)
                    .ok_or_else(|| Error::invalid(format!("unknown identity {identity}")))?;
                Ok(load_frontal(&self.root.join(dir), self.resolution)?.image)
            }
        }
    }

    pub fn split_of(&self, identity: u32) -> Option<Split> {
        if self.train_ids.contains(&identity) {
            Some(Split::Train)
        } else if self.test_ids.contains(&identity) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn records_in(&self, split: Split) -> Vec<Record> {
        self.records
            .iter()
            .filter(|r| self.split_of(r.identity) == Some(split))
            .copied()
            .collect()
    }

    pub fn sample(&self, rec: &Record) -> Result<Sample> {
        match &self.source {
            Source::Synthetic => {
                let seed = *self
                    .identity_seeds
                    .get(rec.identity as usize)
                    .ok_or_else(|| Error::invalid(format!("unknown identity {}", rec.identity)))?;
                render_synthetic(&SyntheticFaceSpec::new(rec.identity, seed, rec.pose_deg, rec.illum_id, self.resolution))
            }
            Source::Real { identity_dirs } => {
                let dir = identity_dirs
                    .get(rec.identity as usize)
                    .ok_or_else(|| Error::invalid(format!("unknown identity {}", rec.identity)))?;
                let mut s = load_real_pair(&self.root.join(dir), rec.pose_deg, rec.illum_id, self.resolution)?;
                s.identity_id = rec.identity;
                Ok(s)
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::invalid(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }
}

/// Scans a real-data tree: every subdirectory of `root` is an identity and
/// must contain `0_0.png` (neutral frontal) plus any `<pose>_<illum>.png`
/// profiles. Identities are sorted by directory name and split 80/20.
pub fn scan_real(root: &Path, resolution: usize) -> Result<DatasetManifest> {
    let mut dirs: Vec<String> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    dirs.sort();
    if dirs.len() < 2 {
        return Err(Error::Ingestion {
            path: root.to_path_buf(),
            msg: "need at least 2 identity directories".into(),
        });
    }
    let mut records = Vec::new();
    let mut poses = Vec::new();
    for (i, d) in dirs.iter().enumerate() {
        let mut stems: Vec<(i32, u32)> = std::fs::read_dir(root.join(d))
            .map_err(|e| Error::io(root.join(d), e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter_map(|n| parse_stem(&n))
            .collect();
        stems.sort();
        for (pose_deg, illum_id) in stems {
            if (pose_deg, illum_id) == (0, 0) {
                continue;
            }
            if !poses.contains(&pose_deg) {
                poses.push(pose_deg);
            }
            records.push(Record {
                identity: i as u32,
                pose_deg,
                illum_id,
            });
        }
    }
    poses.sort();
    let n_landmarks = match records.first() {
        Some(r) => load_real_pair(&root.join(&dirs[r.identity as usize]), r.pose_deg, r.illum_id, resolution)?
            .frontal
            .landmarks
            .len(),
        None => 0,
    };
    let n_train = train_count(dirs.len());
    let ids: Vec<u32> = (0..dirs.len() as u32).collect();
    let test_ids = ids[n_train..].to_vec();
    Ok(DatasetManifest {
        version: MANIFEST_VERSION,
        root: root.to_path_buf(),
        gallery: test_ids
            .iter()
            .map(|&identity| Record {
                identity,
                pose_deg: 0,
                illum_id: 0,
            })
            .collect(),
        source: Source::Real { identity_dirs: dirs },
        seed: 0,
        resolution,
        poses,
        illum_per_pose: 0,
        n_landmarks,
        identity_seeds: Vec::new(),
        train_ids: ids[..n_train].to_vec(),
        test_ids,
        records,
    })
}

/// `"<pose>_<illum>.png"` to `(pose, illum)`; sidecar files are rejected.
fn parse_stem(name: &str) -> Option<(i32, u32)> {
    let stem = name.strip_suffix(".png")?;
    if stem.contains('.') {
        return None;
    }
    let (p, i) = stem.split_once('_')?;
    Some((p.parse().ok()?, i.parse().ok()?))
}

fn ingest_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(ingest_err(&path, "missing file"))
    }
}

/// 8-bit RGB PNG to a `[0, 1]` image resized to `resolution`, together with the
/// scale factors applied to x and y.
fn load_rgb(path: &Path, resolution: usize) -> Result<(Image, f32, f32)> {
    let img = image::open(path).map_err(|e| ingest_err(path, e.to_string()))?.to_rgb8();
    let (w, h) = img.dimensions();
    let resized = image::imageops::resize(&img, resolution as u32, resolution as u32, image::imageops::FilterType::Triangle);
    let v: Vec<f32> = resized.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Ok((
        Image::from_hwc(resolution, resolution, &v)?,
        resolution as f32 / w as f32,
        resolution as f32 / h as f32,
    ))
}

fn load_mask(path: &Path, resolution: usize) -> Result<Mask> {
    let img = image::open(path).map_err(|e| ingest_err(path, e.to_string()))?.to_luma8();
    let resized = image::imageops::resize(&img, resolution as u32, resolution as u32, image::imageops::FilterType::Nearest);
    let r = resolution;
    Mask::from_fn(r, r, |y, x| resized.get_pixel(x as u32, y as u32)[0] >= 128)
}

fn load_landmarks(path: &Path, sx: f32, sy: f32) -> Result<LandmarkSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace().map(|t| t.parse::<f32>());
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(x)), Some(Ok(y)), None) => {
                // Pixel centers scale about the half-pixel offset.
                pts.push([(x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5]);
            }
            _ => return Err(ingest_err(path, format!("line {}: expected `x y`", i + 1))),
        }
    }
    Ok(LandmarkSet::new(pts))
}

fn load_view(dir: &Path, stem: &str, resolution: usize) -> Result<View> {
    let img_path = require(dir.join(format!("{stem}.png")))?;
    let mask_path = require(dir.join(format!("{stem}.mask.png")))?;
    let lmk_path = require(dir.join(format!("{stem}.lmk.txt")))?;
    let (image, sx, sy) = load_rgb(&img_path, resolution)?;
    Ok(View {
        image,
        mask: load_mask(&mask_path, resolution)?,
        landmarks: load_landmarks(&lmk_path, sx, sy)?,
    })
}

/// Loads the neutral frontal view `<dir>/0_0.png` with its sidecars.
pub fn load_frontal(dir: &Path, resolution: usize) -> Result<View> {
    load_view(dir, "0_0", resolution)
}

/// Loads `<dir>/<pose>_<illum>.png` as the profile and `<dir>/0_0.png` as the
/// frontal target, each with its `.mask.png` and `.lmk.txt` sidecars.
pub fn load_real_pair(dir: &Path, pose_deg: i32, illum_id: u32, resolution: usize) -> Result<Sample> {
    let profile = load_view(dir, &format!("{pose_deg}_{illum_id}"), resolution)?;
    let frontal = load_view(dir, "0_0", resolution)?;
    if profile.landmarks.len() != frontal.landmarks.len() {
        return Err(ingest_err(
            &dir.join(format!("{pose_deg}_{illum_id}.lmk.txt")),
            format!(
                "landmark count {} does not match frontal count {}",
                profile.landmarks.len(),
                frontal.landmarks.len()
            ),
        ));
    }
    let s = Sample {
        profile,
        frontal,
        identity_id: 0,
        pose_deg,
        illum_id,
        gt_forward_flow: None,
        gt_reverse_flow: None,
    };
    if let Some(v) = validate_sample(&s).into_iter().next() {
        return Err(ingest_err(dir, v.to_string()));
    }
    Ok(s)
}

pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_rgb8()?)
        .ok_or_else(|| Error::invalid("image buffer size mismatch"))?;
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

fn save_view(dir: &Path, stem: &str, v: &View) -> Result<()> {
    save_png(&dir.join(format!("{stem}.png")), &v.image)?;
    let (h, w) = (v.mask.height(), v.mask.width());
    let bytes: Vec<u8> = v.mask.values()?.iter().map(|&m| if m > 0.5 { 255 } else { 0 }).collect();
    let m = image::GrayImage::from_raw(w as u32, h as u32, bytes).ok_or_else(|| Error::invalid("mask size mismatch"))?;
    let mp = dir.join(format!("{stem}.mask.png"));
    m.save(&mp).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(&mp, io),
        other => Error::Image(other),
    })?;
    let text: String = v.landmarks.points.iter().map(|p| format!("{} {}\n", p[0], p[1])).collect();
    let lp = dir.join(format!("{stem}.lmk.txt"));
    std::fs::write(&lp, text).map_err(|e| Error::io(&lp, e))
}

/// Writes every record of a synthetic manifest in the real-data layout under
/// `out`, one directory per identity named by its zero-padded index.
pub fn export_images(m: &DatasetManifest, out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let ids: Vec<u32> = m.train_ids.iter().chain(&m.test_ids).copied().collect();
    for id in ids {
        let dir = out.join(format!("{id:04}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut wrote_frontal = false;
        for rec in m.records.iter().filter(|r| r.identity == id) {
            let s = m.sample(rec)?;
            if !wrote_frontal {
                save_view(&dir, "0_0", &s.frontal)?;
                wrote_frontal = true;
            }
            save_view(&dir, &format!("{}_{}", rec.pose_deg, rec.illum_id), &s.profile)?;
        }
        written.push(dir);
    }
    Ok(written)
}

/// A stacked mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub profile: Tensor,
    pub frontal: Tensor,
    pub profile_mask: Tensor,
    pub frontal_mask: Tensor,
    /// `B * N` points, item-major.
    pub profile_landmarks: Vec<[f32; 2]>,
    pub frontal_landmarks: Vec<[f32; 2]>,
    pub gt_forward: Option<Tensor>,
    pub gt_reverse: Option<Tensor>,
    pub regions: Regions,
    pub identities: Vec<u32>,
    pub poses: Vec<i32>,
}

impl Batch {
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let n = samples[0].frontal.landmarks.len();
        if samples
            .iter()
            .any(|s| s.frontal.landmarks.len() != n || s.profile.landmarks.len() != n)
        {
            return Err(Error::invalid("landmark counts differ within the batch"));
        }
        let stack = |f: &dyn Fn(&Sample) -> Tensor| -> Result<Tensor> {
            let ts: Vec<Tensor> = samples.iter().map(f).collect();
            Ok(Tensor::stack(&ts, 0)?)
        };
        let flows = |f: &dyn Fn(&Sample) -> Option<&FlowField>| -> Result<Option<Tensor>> {
            if samples.iter().all(|s| f(s).is_some()) {
                let ts: Vec<Tensor> = samples.iter().map(|s| f(s).unwrap().tensor().clone()).collect();
                Ok(Some(Tensor::stack(&ts, 0)?))
            } else {
                Ok(None)
            }
        };
        let r = samples[0].frontal.image.height();
        let groups: Vec<Vec<Vec<[f32; 2]>>> = if n >= N_SEMANTIC_LANDMARKS {
            REGION_GROUPS
                .iter()
                .map(|g| samples.iter().map(|s| s.frontal.landmarks.points[g.clone()].to_vec()).collect())
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            profile: stack(&|s| s.profile.image.tensor().clone())?,
            frontal: stack(&|s| s.frontal.image.tensor().clone())?,
            profile_mask: stack(&|s| s.profile.mask.tensor().clone())?,
            frontal_mask: stack(&|s| s.frontal.mask.tensor().clone())?,
            profile_landmarks: samples.iter().flat_map(|s| s.profile.landmarks.points.clone()).collect(),
            frontal_landmarks: samples.iter().flat_map(|s| s.frontal.landmarks.points.clone()).collect(),
            gt_forward: flows(&|s| s.gt_forward_flow.as_ref())?,
            gt_reverse: flows(&|s| s.gt_reverse_flow.as_ref())?,
            regions: Regions::from_centroids(&groups, r / 4, r, r),
            identities: samples.iter().map(|s| s.identity_id).collect(),
            poses: samples.iter().map(|s| s.pose_deg).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

/// Renders the neutral frontal image of an identity.
pub fn render_frontal(identity_seed: u64, resolution: usize) -> Result<Image> {
    Ok(render_synthetic(&SyntheticFaceSpec::new(0, identity_seed, 0, 0, resolution))?
        .frontal
        .image)
}

/// Applies a left-to-right gain ramp to a whole image (augmentation).
pub fn relight(img: &Image, g_left: f32, g_right: f32) -> Result<Image> {
    let w = img.width();
    let ramp: Vec<f32> = (0..w)
        .map(|x| g_left + (g_right - g_left) * x as f32 / (w.max(2) - 1) as f32)
        .collect();
    let ramp = Tensor::from_vec(ramp, (1, 1, w), &Device::Cpu)?;
    Image::new_unchecked(img.tensor().broadcast_mul(&ramp)?.clamp(0f32, 1f32)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(pose: i32, illum: u32) -> SyntheticFaceSpec {
        SyntheticFaceSpec::new(3, identity_seed(5, 3), pose, illum, 64)
    }

    #[test]
    fn pose_map_inverse_roundtrips() {
        let g = FaceGeometry::from_seed(1);
        for pose in POSES {
            let pm = PoseMap::new(&g, pose, 64);
            for i in -40..110 {
                let x = i as f64 * 0.7;
                assert!((pm.inverse(pm.forward(x)) - x).abs() < 1e-9, "pose {pose} x {x}");
            }
        }
    }

    #[test]
    fn frontal_pose_is_identity() {
        let s = render_synthetic(&spec(0, 2)).unwrap();
        assert_eq!(s.profile.image.to_hwc().unwrap(), s.frontal.image.to_hwc().unwrap());
        let (dx, dy) = s.gt_forward_flow.unwrap().to_planes().unwrap();
        assert!(dx.iter().chain(&dy).all(|v| v.abs() < 1e-4));
        assert_eq!(IllumModel::variant(9, 2, 0), IllumModel::neutral());
    }

    #[test]
    fn samples_validate() {
        for pose in [-90, -45, 15, 60, 90] {
            let s = render_synthetic(&spec(pose, 1)).unwrap();
            assert_eq!(validate_sample(&s), vec![], "pose {pose}");
            assert_eq!(s.profile.landmarks.len(), N_LANDMARKS);
        }
    }

    #[test]
    fn profile_squeezes_the_oval() {
        let s = render_synthetic(&spec(90, 0)).unwrap();
        let fm = s.frontal.mask.count().unwrap();
        let pm = s.profile.mask.count().unwrap();
        assert!(pm < 0.7 * fm, "{pm} vs {fm}");
    }

    #[test]
    fn mirror_differs_because_of_the_marking() {
        let s = render_synthetic(&spec(0, 0)).unwrap();
        let f = s.frontal.image.tensor();
        let m = crate::warp::hflip(f).unwrap();
        let d = (f - m).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d > 0.2);
    }

    #[test]
    fn pose_out_of_range_is_rejected() {
        assert!(matches!(render_synthetic(&spec(95, 0)), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn manifest_split_and_gallery() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_manifest(dir.path(), 10, &POSES, 1, SynthOptions::default()).unwrap();
        assert_eq!(m.train_ids.len(), 8);
        assert_eq!(m.test_ids.len(), 2);
        assert_eq!(m.gallery.len(), 2);
        assert!(m.train_ids.iter().all(|i| !m.test_ids.contains(i)));
        let again = build_manifest(dir.path(), 10, &POSES, 1, SynthOptions::default()).unwrap();
        assert_eq!(m.to_json().unwrap(), again.to_json().unwrap());
        assert_eq!(train_count(2), 1);
        assert!(build_manifest(dir.path(), 1, &POSES, 1, SynthOptions::default()).is_err());
        let missing = dir.path().join("nope");
        assert!(matches!(
            build_manifest(&missing, 4, &POSES, 1, SynthOptions::default()),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn exported_pairs_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions {
            resolution: 32,
            illum_per_pose: 1,
        };
        let m = build_manifest(dir.path(), 2, &[0, 45], 3, opts).unwrap();
        let out = dir.path().join("img");
        export_images(&m, &out).unwrap();
        let s = load_real_pair(&out.join("0001"), 45, 1, 32).unwrap();
        assert!(validate_sample(&s).is_empty());
        let real = scan_real(&out, 32).unwrap();
        assert_eq!(real.records.len(), 4);
        assert!(real.sample(&real.records[1]).is_ok());
        std::fs::remove_file(out.join("0001/45_1.lmk.txt")).unwrap();
        let err = load_real_pair(&out.join("0001"), 45, 1, 32).unwrap_err();
        assert!(err.to_string().contains("45_1.lmk.txt"), "{err}");
    }

    #[test]
    fn mismatched_landmark_counts_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions {
            resolution: 32,
            illum_per_pose: 1,
        };
        let m = build_manifest(dir.path(), 2, &[30], 3, opts).unwrap();
        let out = dir.path().join("img");
        export_images(&m, &out).unwrap();
        let p = out.join("0000/30_1.lmk.txt");
        let text = std::fs::read_to_string(&p).unwrap();
        let fewer: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        std::fs::write(&p, fewer).unwrap();
        assert!(matches!(load_real_pair(&out.join("0000"), 30, 1, 32), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn batch_stacks_and_places_regions() {
        let samples: Vec<Sample> = [15, -60].iter().map(|&p| render_synthetic(&spec(p, 1)).unwrap()).collect();
        let b = Batch::from_samples(&samples).unwrap();
        assert_eq!(b.profile.dims(), &[2, 3, 64, 64]);
        assert_eq!(b.gt_forward.as_ref().unwrap().dims(), &[2, 2, 64, 64]);
        assert_eq!(b.regions.boxes.len(), 4);
        assert!(b.regions.boxes.iter().flatten().all(|x| x.is_some()));
        assert_eq!(b.regions.size, 16);
    }

    fn masked_mean_l1(a: &Tensor, b: &Tensor, m: &[f32]) -> f32 {
        let a = a.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = b.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let hw = m.len();
        let (mut s, mut n) = (0.0, 0.0);
        for c in 0..3 {
            for i in 0..hw {
                s += m[i] * (a[c * hw + i] - b[c * hw + i]).abs();
                n += m[i];
            }
        }
        s / n
    }

    fn erode(m: &[f32], r: usize, k: usize) -> Vec<f32> {
        let mut out = vec![0.0; m.len()];
        for y in k..r - k {
            for x in k..r - k {
                let mut all = true;
                for dy in 0..=2 * k {
                    for dx in 0..=2 * k {
                        all &= m[(y + dy - k) * r + x + dx - k] > 0.5;
                    }
                }
                out[y * r + x] = if all { 1.0 } else { 0.0 };
            }
        }
        out
    }

    #[test]
    fn warped_profile_matches_frontal_at_90() {
        for pose in [90, -90] {
            let s = render_synthetic(&spec(pose, 0)).unwrap();
            let fwd = s.gt_forward_flow.as_ref().unwrap();
            let w = crate::warp::bilinear_warp(s.profile.image.tensor(), fwd.tensor()).unwrap();
            let pm = crate::warp::bilinear_warp(s.profile.mask.tensor(), fwd.tensor()).unwrap();
            let pm = pm.data.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let fm = s.frontal.mask.values().unwrap();
            let vis: Vec<f32> = fm.iter().zip(&pm).map(|(a, b)| if *a > 0.5 && *b >= 1.0 - 1e-6 { 1.0 } else { 0.0 }).collect();
            let e = masked_mean_l1(&w.data, s.frontal.image.tensor(), &vis);
            assert!(e <= 2.0 / 255.0, "pose {pose}: {e}");
        }
    }

    #[test]
    fn gt_flows_are_inverse_on_eroded_mask() {
        for pose in POSES {
            let s = render_synthetic(&spec(pose, 1)).unwrap();
            let rev = s.gt_reverse_flow.as_ref().unwrap();
            let fwd = s.gt_forward_flow.as_ref().unwrap();
            let there = crate::warp::bilinear_warp(s.frontal.image.tensor(), rev.tensor()).unwrap().data;
            let back = crate::warp::bilinear_warp(&there, fwd.tensor()).unwrap().data;
            let m = erode(&s.frontal.mask.values().unwrap(), 64, 2);
            let e = masked_mean_l1(&back, s.frontal.image.tensor(), &m);
            assert!(e <= 4.0 / 255.0, "pose {pose}: {e}");
        }
    }

    #[test]
    fn illumination_gap_at_large_poses() {
        for id in 0..6 {
            for pose in [-90, -75, -60, 60, 75, 90] {
                for illum in 1..=4 {
                    let s = render_synthetic(&SyntheticFaceSpec::new(id, identity_seed(11, id), pose, illum, 64)).unwrap();
                    let rev = s.gt_reverse_flow.as_ref().unwrap();
                    let w = crate::warp::bilinear_warp(s.frontal.image.tensor(), rev.tensor()).unwrap().data;
                    let e = masked_mean_l1(&w, s.profile.image.tensor(), &s.profile.mask.values().unwrap());
                    assert!(e >= 0.05, "id {id} pose {pose} illum {illum}: {e}");
                }
            }
        }
    }

    #[test]
    fn landmark_loss_of_gt_flow_is_small() {
        for pose in POSES {
            let s = render_synthetic(&spec(pose, 2)).unwrap();
            let flow = s.gt_forward_flow.as_ref().unwrap().tensor().unsqueeze(0).unwrap();
            let l = crate::losses::landmark_flow_loss(&flow, &s.profile.landmarks.points, &s.frontal.landmarks.points).unwrap();
            let l = l.to_scalar::<f32>().unwrap();
            assert!(l < 0.5, "pose {pose}: {l}");
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render_synthetic(&spec(45, 3)).unwrap();
        let b = render_synthetic(&spec(45, 3)).unwrap();
        assert_eq!(a.profile.image.to_hwc().unwrap(), b.profile.image.to_hwc().unwrap());
    }
}
