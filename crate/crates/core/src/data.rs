//! Synthetic face data, augmentations, blur synthesis, the T-shaped pixel
//! mask, triplet assembly and hard-triplet mining.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::tensor::Tensor;

/// Image geometry `channels × height × width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    /// Default desk-scale ROI: 48×40 grayscale.
    pub const DESK: Geometry = Geometry {
        channels: 1,
        height: 48,
        width: 40,
    };

    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config("data.channels", format!("must be 1 or 3, got {}", self.channels)));
        }
        if self.height < 16 {
            return Err(Error::config("data.height", format!("must be at least 16, got {}", self.height)));
        }
        if self.width < 16 {
            return Err(Error::config("data.width", format!("must be at least 16, got {}", self.width)));
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Ranges of the degradations applied to video ROIs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Degradations {
    /// Maximum translation in pixels along each axis.
    pub shift_px: f64,
    pub rotate_deg: f64,
    /// Relative scale jitter.
    pub scale_jitter: f64,
    /// Illumination gain range.
    pub gain: (f64, f64),
    /// Maximum left-right illumination gradient across the face.
    pub gradient: f64,
    /// Maximum out-of-focus blur radius in pixels.
    pub max_blur: f64,
    pub noise_std: f64,
}

impl Default for Degradations {
    fn default() -> Self {
        Self {
            shift_px: 1.5,
            rotate_deg: 5.0,
            scale_jitter: 0.05,
            gain: (0.7, 1.1),
            gradient: 0.15,
            max_blur: 1.0,
            noise_std: 0.03,
        }
    }
}

impl Degradations {
    /// No degradation: video renders equal the clean still.
    pub fn none() -> Self {
        Self {
            shift_px: 0.0,
            rotate_deg: 0.0,
            scale_jitter: 0.0,
            gain: (1.0, 1.0),
            gradient: 0.0,
            max_blur: 0.0,
            noise_std: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_identities: usize,
    pub videos_per_identity: usize,
    pub geometry: Geometry,
    pub degradations: Degradations,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_identities: 8,
            videos_per_identity: 4,
            geometry: Geometry::DESK,
            degradations: Degradations::default(),
        }
    }
}

/// One enrolled person: a clean reference still and degraded video ROIs.
#[derive(Clone, Debug, PartialEq)]
pub struct Identity {
    pub id: usize,
    pub still: Tensor,
    pub videos: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub identities: Vec<Identity>,
    pub seed: u64,
    pub geometry: Geometry,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn n_videos(&self) -> usize {
        self.identities.iter().map(|i| i.videos.len()).sum()
    }

    /// `(identity, video index)` of every video ROI in dataset order.
    pub fn video_refs(&self) -> Vec<(usize, usize)> {
        self.identities
            .iter()
            .flat_map(|i| (0..i.videos.len()).map(move |k| (i.id, k)))
            .collect()
    }

    pub fn still(&self, id: usize) -> &Tensor {
        &self.identities[id].still
    }

    pub fn video(&self, id: usize, k: usize) -> &Tensor {
        &self.identities[id].videos[k]
    }

    /// Every still followed by every video ROI, with identity labels.
    pub fn all_rois(&self) -> (Vec<&Tensor>, Vec<usize>) {
        let mut rois: Vec<&Tensor> = self.identities.iter().map(|i| &i.still).collect();
        let mut labels: Vec<usize> = self.identities.iter().map(|i| i.id).collect();
        for i in &self.identities {
            rois.extend(i.videos.iter());
            labels.extend(std::iter::repeat_n(i.id, i.videos.len()));
        }
        (rois, labels)
    }

    fn check(&self) -> Result<()> {
        for (k, ident) in self.identities.iter().enumerate() {
            if ident.id != k {
                return Err(Error::Corrupt(format!("identity ids must be dense, found {} at {k}", ident.id)));
            }
            if ident.videos.is_empty() {
                return Err(Error::Corrupt(format!("identity {k} has no video ROIs")));
            }
            for t in std::iter::once(&ident.still).chain(&ident.videos) {
                if t.shape() != self.geometry.shape() {
                    return Err(Error::shape("dataset", t.shape(), &self.geometry.shape()));
                }
            }
        }
        Ok(())
    }
}

/// Derives an independent per-item seed.
pub fn item_seed(seed: u64, index: u64) -> u64 {
    seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Parametric face template of one identity, in face units where the image
/// height spans 1 and the origin is the image centre (v grows downwards).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceParams {
    pub background: f64,
    pub skin: f64,
    pub face_axes: (f64, f64),
    pub face_center_v: f64,
    pub hair: f64,
    pub hairline: f64,
    pub eye_v: f64,
    pub eye_u: f64,
    pub eye_axes: (f64, f64),
    pub eye_dark: f64,
    pub brow_gap: f64,
    pub brow_thick: f64,
    pub brow_tilt: f64,
    pub nose_end: f64,
    pub nose_width: f64,
    pub nose_shade: f64,
    pub mouth_v: f64,
    pub mouth_axes: (f64, f64),
    pub mouth_dark: f64,
    pub blobs: [(f64, f64, f64, f64); 3],
    pub tint: [f64; 3],
}

impl FaceParams {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let face_axes = (u(0.26, 0.33), u(0.36, 0.44));
        let mut blobs = [(0.0, 0.0, 0.0, 0.0); 3];
        for b in &mut blobs {
            let sign = if u(0.0, 1.0) < 0.5 { -1.0 } else { 1.0 };
            *b = (u(-0.2, 0.2), u(-0.25, 0.3), u(0.04, 0.08), sign * u(0.08, 0.2));
        }
        Self {
            background: u(0.1, 0.3),
            skin: u(0.55, 0.8),
            face_axes,
            face_center_v: u(-0.02, 0.04),
            hair: u(0.05, 0.35),
            hairline: u(-0.3, -0.2),
            eye_v: u(-0.1, -0.02),
            eye_u: u(0.09, 0.14),
            eye_axes: (u(0.035, 0.06), u(0.02, 0.035)),
            eye_dark: u(0.25, 0.5),
            brow_gap: u(0.04, 0.07),
            brow_thick: u(0.01, 0.02),
            brow_tilt: u(-0.3, 0.3),
            nose_end: u(0.08, 0.15),
            nose_width: u(0.02, 0.045),
            nose_shade: u(0.05, 0.1),
            mouth_v: u(0.18, 0.26),
            mouth_axes: (u(0.07, 0.12), u(0.015, 0.03)),
            mouth_dark: u(0.2, 0.4),
            blobs,
            tint: [u(0.85, 1.0), u(0.8, 0.95), u(0.7, 0.9)],
        }
    }

    /// Intensity at face coordinates `(u, v)`.
    pub fn intensity(&self, u: f64, v: f64) -> f64 {
        const EDGE: f64 = 0.012;
        let soft = |d: f64| 0.5 * (1.0 - (d / EDGE).tanh());
        let ellipse = |du: f64, dv: f64, a: f64, b: f64| {
            let r = ((du / a).powi(2) + (dv / b).powi(2)).sqrt();
            soft((r - 1.0) * a.min(b))
        };
        let (fa, fb) = self.face_axes;
        let fv = v - self.face_center_v;
        let face = ellipse(u, fv, fa, fb);
        let mut i = self.background + face * (self.skin - self.background);
        let hair = ellipse(u, fv, fa * 1.08, fb * 1.06) * soft(v - self.hairline);
        i += hair * (self.hair - i);
        let mut features = 0.0;
        for side in [-1.0, 1.0] {
            let eu = side * self.eye_u;
            features -= self.eye_dark * ellipse(u - eu, v - self.eye_v, self.eye_axes.0, self.eye_axes.1);
            let bv = self.eye_v - self.brow_gap + side * self.brow_tilt * (u - eu) * 0.5;
            let brow = soft((v - bv).abs() - self.brow_thick) * soft((u - eu).abs() - self.eye_axes.0 * 1.3);
            features -= 0.6 * self.eye_dark * brow;
        }
        let nose = soft(u.abs() - self.nose_width) * soft(self.eye_v - v) * soft(v - self.nose_end);
        features -= self.nose_shade * nose;
        features -= self.mouth_dark * ellipse(u, v - self.mouth_v, self.mouth_axes.0, self.mouth_axes.1);
        for &(bu, bv, s, a) in &self.blobs {
            features += a * (-((u - bu).powi(2) + (v - bv).powi(2)) / (2.0 * s * s)).exp();
        }
        i + face * features
    }
}

/// Pose and photometric settings of one render.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderParams {
    pub shift: (f64, f64),
    pub rotate_deg: f64,
    pub scale: f64,
    pub gain: f64,
    pub gradient: f64,
    pub blur_radius: f64,
    pub noise_std: f64,
}

impl RenderParams {
    pub const CLEAN: RenderParams = RenderParams {
        shift: (0.0, 0.0),
        rotate_deg: 0.0,
        scale: 1.0,
        gain: 1.0,
        gradient: 0.0,
        blur_radius: 0.0,
        noise_std: 0.0,
    };

    pub fn sample<R: Rng + ?Sized>(d: &Degradations, rng: &mut R) -> Self {
        let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let shift = (sym(d.shift_px), sym(d.shift_px));
        let rotate_deg = sym(d.rotate_deg);
        let scale = 1.0 + sym(d.scale_jitter);
        let gradient = sym(d.gradient);
        let gain = if d.gain.1 > d.gain.0 {
            rng.random_range(d.gain.0..=d.gain.1)
        } else {
            d.gain.0
        };
        let blur_radius = if d.max_blur > 0.0 {
            rng.random_range(0.0..=d.max_blur)
        } else {
            0.0
        };
        Self {
            shift,
            rotate_deg,
            scale,
            gain,
            gradient,
            blur_radius,
            noise_std: d.noise_std,
        }
    }
}

/// Renders a face template into a `[C, H, W]` tensor with values in [0, 1].
pub fn render_face<R: Rng + ?Sized>(
    face: &FaceParams,
    geom: Geometry,
    render: &RenderParams,
    rng: &mut R,
) -> Result<Tensor> {
    geom.validate()?;
    let (h, w) = (geom.height, geom.width);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = render.rotate_deg.to_radians().sin_cos();
    let unit = h as f64 * render.scale;
    let mut plane = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let px = x as f64 - cx - render.shift.0;
            let py = y as f64 - cy - render.shift.1;
            let (u, v) = ((c * px + s * py) / unit, (-s * px + c * py) / unit);
            let lit = render.gain * face.intensity(u, v) + render.gradient * (x as f64 - cx) / w as f64;
            plane[y * w + x] = lit;
        }
    }
    let mut img = Tensor::new(&[1, h, w], plane)?;
    if render.blur_radius >= 0.5 {
        img = synthesize_blur(&img, BlurKind::OutOfFocus {
            radius: render.blur_radius,
        })?;
    }
    let mut out = Vec::with_capacity(geom.channels * h * w);
    for ch in 0..geom.channels {
        let tint = if geom.channels == 1 { 1.0 } else { face.tint[ch] };
        out.extend(img.data().iter().map(|v| v * tint));
    }
    if render.noise_std > 0.0 {
        for v in &mut out {
            let z: f64 = StandardNormal.sample(rng);
            *v += render.noise_std * z;
        }
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(&geom.shape(), out)
}

/// Generates a deterministic synthetic still-to-video dataset.
pub fn generate_synthetic_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.geometry.validate()?;
    if cfg.n_identities < 2 {
        return Err(Error::config(
            "data.identities",
            format!("need at least 2 identities, got {}", cfg.n_identities),
        ));
    }
    if cfg.videos_per_identity == 0 {
        return Err(Error::config("data.videos_per_identity", "need at least one video ROI per identity"));
    }
    let mut identities = Vec::with_capacity(cfg.n_identities);
    for id in 0..cfg.n_identities {
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, id as u64));
        let face = FaceParams::sample(&mut rng);
        let still = render_face(&face, cfg.geometry, &RenderParams::CLEAN, &mut rng)?;
        let mut videos = Vec::with_capacity(cfg.videos_per_identity);
        for _ in 0..cfg.videos_per_identity {
            let r = RenderParams::sample(&cfg.degradations, &mut rng);
            videos.push(render_face(&face, cfg.geometry, &r, &mut rng)?);
        }
        identities.push(Identity { id, still, videos });
    }
    Ok(Dataset {
        identities,
        seed: cfg.seed,
        geometry: cfg.geometry,
    })
}

/// Geometric augmentation of a still ROI.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugmentOp {
    /// Horizontal shear factor.
    Shear(f64),
    Mirror,
    /// Rotation in degrees about the image centre.
    Rotate(f64),
    /// Translation `(dx, dy)` in pixels.
    Translate(f64, f64),
}

/// Sampling ranges for random augmentations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentRanges {
    pub rotate_deg: f64,
    pub shear: f64,
    pub translate_px: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            rotate_deg: 10.0,
            shear: 0.1,
            translate_px: 4.0,
        }
    }
}

/// Draws `count` operations cycling through shear, mirror, rotate and
/// translate with parameters uniform in `ranges`.
pub fn sample_augment_ops(ranges: &AugmentRanges, count: usize, seed: u64) -> Vec<AugmentOp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    (0..count)
        .map(|k| match k % 4 {
            0 => AugmentOp::Shear(sym(ranges.shear)),
            1 => AugmentOp::Mirror,
            2 => AugmentOp::Rotate(sym(ranges.rotate_deg)),
            _ => AugmentOp::Translate(sym(ranges.translate_px), sym(ranges.translate_px)),
        })
        .collect()
}

fn roi_dims(roi: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *roi.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::invalid_shape(op, roi.shape(), "expected [channels, height, width]")),
    }
}

/// Inverse-mapped affine warp with bilinear interpolation and replicated
/// borders; `inv` maps centred output coordinates to centred source ones.
fn warp(roi: &Tensor, inv: [[f64; 2]; 2], shift: (f64, f64)) -> Result<Tensor> {
    let (c, h, w) = roi_dims(roi, "augment_still")?;
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; roi.len()];
    let mut inside = 0usize;
    for y in 0..h {
        for x in 0..w {
            let px = x as f64 - cx - shift.0;
            let py = y as f64 - cy - shift.1;
            let sx = inv[0][0] * px + inv[0][1] * py + cx;
            let sy = inv[1][0] * px + inv[1][1] * py + cy;
            if sx >= -0.5 && sx <= w as f64 - 0.5 && sy >= -0.5 && sy <= h as f64 - 0.5 {
                inside += 1;
            }
            let fx = sx.clamp(0.0, (w - 1) as f64);
            let fy = sy.clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| roi.data()[(ch * h + yy) * w + xx];
                let top = if ax == 0.0 { p(y0, x0) } else { (1.0 - ax) * p(y0, x0) + ax * p(y0, x1) };
                let bot = if ax == 0.0 { p(y1, x0) } else { (1.0 - ax) * p(y1, x0) + ax * p(y1, x1) };
                out[(ch * h + y) * w + x] = if ay == 0.0 { top } else { (1.0 - ay) * top + ay * bot };
            }
        }
    }
    if (inside as f64) < 0.5 * (h * w) as f64 {
        return Err(Error::Geometry(format!(
            "augmentation keeps only {inside} of {} pixels in frame",
            h * w
        )));
    }
    Tensor::new(roi.shape(), out)
}

pub fn apply_augment(roi: &Tensor, op: AugmentOp) -> Result<Tensor> {
    match op {
        AugmentOp::Mirror => {
            let (c, h, w) = roi_dims(roi, "augment_still")?;
            let mut out = Vec::with_capacity(roi.len());
            for row in roi.data().chunks(w).take(c * h) {
                out.extend(row.iter().rev());
            }
            Tensor::new(roi.shape(), out)
        }
        AugmentOp::Rotate(deg) => {
            let (s, c) = deg.to_radians().sin_cos();
            warp(roi, [[c, s], [-s, c]], (0.0, 0.0))
        }
        AugmentOp::Shear(k) => warp(roi, [[1.0, -k], [0.0, 1.0]], (0.0, 0.0)),
        AugmentOp::Translate(dx, dy) => warp(roi, [[1.0, 0.0], [0.0, 1.0]], (dx, dy)),
    }
}

/// One augmented ROI per operation.
pub fn augment_still(roi: &Tensor, ops: &[AugmentOp]) -> Result<Vec<Tensor>> {
    ops.iter().map(|&op| apply_augment(roi, op)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BlurKind {
    OutOfFocus { radius: f64 },
    Motion { length: usize, angle_deg: f64 },
}

/// Normalized blur kernel as a square `[k, k]` tensor.
pub fn blur_kernel(kind: BlurKind) -> Result<Tensor> {
    match kind {
        BlurKind::OutOfFocus { radius } => {
            if !(radius >= 0.0 && radius.is_finite()) {
                return Err(Error::Domain {
                    op: "synthesize_blur",
                    reason: format!("radius must be non-negative, got {radius}"),
                });
            }
            let r = radius.floor() as isize;
            let k = (2 * r + 1) as usize;
            let mut data = vec![0.0; k * k];
            for dy in -r..=r {
                for dx in -r..=r {
                    if ((dx * dx + dy * dy) as f64) <= radius * radius {
                        data[((dy + r) as usize) * k + (dx + r) as usize] = 1.0;
                    }
                }
            }
            normalize_kernel(k, data)
        }
        BlurKind::Motion { length, angle_deg } => {
            if length == 0 {
                return Err(Error::Domain {
                    op: "synthesize_blur",
                    reason: "motion length must be at least 1".into(),
                });
            }
            let k = length | 1;
            let c = (k / 2) as isize;
            let (s, co) = angle_deg.to_radians().sin_cos();
            let mut data = vec![0.0; k * k];
            for t in 0..length {
                let off = t as f64 - (length as f64 - 1.0) / 2.0;
                let x = c + (off * co).round() as isize;
                let y = c - (off * s).round() as isize;
                data[y as usize * k + x as usize] += 1.0;
            }
            normalize_kernel(k, data)
        }
    }
}

fn normalize_kernel(k: usize, mut data: Vec<f64>) -> Result<Tensor> {
    let total: f64 = data.iter().sum();
    data.iter_mut().for_each(|v| *v /= total);
    Tensor::new(&[k, k], data)
}

/// Convolves every channel with the blur kernel, replicating borders.
pub fn synthesize_blur(roi: &Tensor, kind: BlurKind) -> Result<Tensor> {
    let (c, h, w) = roi_dims(roi, "synthesize_blur")?;
    let kernel = blur_kernel(kind)?;
    let k = kernel.shape()[0];
    if k > h || k > w {
        return Err(Error::Geometry(format!("blur kernel {k}x{k} larger than image {h}x{w}")));
    }
    if k == 1 {
        return Ok(roi.clone());
    }
    let r = (k / 2) as isize;
    let mut out = vec![0.0; roi.len()];
    for ch in 0..c {
        let plane = &roi.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for ky in 0..k as isize {
                    let sy = (y + ky - r).clamp(0, h as isize - 1) as usize;
                    for kx in 0..k as isize {
                        let wgt = kernel.data()[(ky as usize) * k + kx as usize];
                        if wgt != 0.0 {
                            let sx = (x + kx - r).clamp(0, w as isize - 1) as usize;
                            acc += wgt * plane[sy * w + sx];
                        }
                    }
                }
                out[ch * h * w + y as usize * w + x as usize] = acc;
            }
        }
    }
    Tensor::new(roi.shape(), out)
}

/// Fractions of height/width delimiting the T region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TMaskGeometry {
    pub eye_rows: (f64, f64),
    pub eye_cols: (f64, f64),
    pub nose_rows: (f64, f64),
    pub nose_cols: (f64, f64),
}

impl Default for TMaskGeometry {
    fn default() -> Self {
        Self {
            eye_rows: (0.25, 0.45),
            eye_cols: (0.10, 0.90),
            nose_rows: (0.25, 0.85),
            nose_cols: (0.40, 0.60),
        }
    }
}

/// Cell `i` of `n` lies in `[lo, hi]` when its centre fraction does.
pub fn band_contains(range: (f64, f64), i: usize, n: usize) -> bool {
    let f = (i as f64 + 0.5) / n as f64;
    f >= range.0 && f <= range.1
}

/// Per-pixel reconstruction weights emphasizing the eye band and the
/// nose/mouth column.
#[derive(Clone, Debug, PartialEq)]
pub struct TMask {
    pub grid: Tensor,
    in_t: Vec<bool>,
    pub geometry: TMaskGeometry,
}

impl TMask {
    pub fn rows(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.grid.data()[i * self.cols() + j]
    }

    pub fn in_t(&self, i: usize, j: usize) -> bool {
        self.in_t[i * self.cols() + j]
    }

    pub fn t_cells(&self) -> usize {
        self.in_t.iter().filter(|b| **b).count()
    }

    /// The grid tiled over the leading axes of `shape`, whose trailing two
    /// axes must equal the grid.
    pub fn broadcast(&self, shape: &[usize]) -> Result<Tensor> {
        let n = shape.len();
        if n < 2 || shape[n - 2] != self.rows() || shape[n - 1] != self.cols() {
            return Err(Error::shape("weighted_tmask_mse", shape, self.grid.shape()));
        }
        let reps: usize = shape[..n - 2].iter().product();
        let mut data = Vec::with_capacity(reps * self.grid.len());
        for _ in 0..reps {
            data.extend_from_slice(self.grid.data());
        }
        Tensor::new(shape, data)
    }
}

pub fn make_tmask(rows: usize, cols: usize, geom: &TMaskGeometry, cfg: &LossConfig) -> Result<TMask> {
    for (key, (lo, hi)) in [
        ("tmask.eye_rows", geom.eye_rows),
        ("tmask.eye_cols", geom.eye_cols),
        ("tmask.nose_rows", geom.nose_rows),
        ("tmask.nose_cols", geom.nose_cols),
    ] {
        if !(lo > 0.0 && hi < 1.0 && lo < hi) {
            return Err(Error::config(key, format!("fractions must satisfy 0 < lo < hi < 1, got ({lo}, {hi})")));
        }
    }
    if rows == 0 || cols == 0 {
        return Err(Error::invalid_shape("make_tmask", &[rows, cols], "empty grid"));
    }
    let mut in_t = vec![false; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let eye = band_contains(geom.eye_rows, i, rows) && band_contains(geom.eye_cols, j, cols);
            let nose = band_contains(geom.nose_rows, i, rows) && band_contains(geom.nose_cols, j, cols);
            in_t[i * cols + j] = eye || nose;
        }
    }
    if !in_t.iter().any(|b| *b) {
        return Err(Error::Degenerate {
            op: "make_tmask",
            reason: format!("T region is empty on a {rows}x{cols} grid"),
        });
    }
    let grid = in_t
        .iter()
        .map(|&t| if t { cfg.tmask_alpha } else { cfg.tmask_beta })
        .collect();
    Ok(TMask {
        grid: Tensor::new(&[rows, cols], grid)?,
        in_t,
        geometry: *geom,
    })
}

/// (target still, positive video, negative video); videos are
/// `(identity, video index)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub target: usize,
    pub positive: (usize, usize),
    pub negative: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub triplets: Vec<Triplet>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Checks label(T) == label(P) != label(N) and that every reference
    /// exists in `ds`.
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        if self.triplets.is_empty() {
            return Err(Error::Empty { op: "triplet_batch" });
        }
        for t in &self.triplets {
            let ok_ref = |(id, k): (usize, usize)| id < ds.len() && k < ds.identities[id].videos.len();
            if t.target >= ds.len() || !ok_ref(t.positive) || !ok_ref(t.negative) {
                return Err(Error::IndexOutOfRange {
                    op: "triplet_batch",
                    index: t.target,
                    len: ds.len(),
                });
            }
            if t.positive.0 != t.target || t.negative.0 == t.target {
                return Err(Error::Domain {
                    op: "triplet_batch",
                    reason: format!("label constraint violated by {t:?}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    Uniform,
    Hard,
}

/// Embeddings of every still (`[K, d]`, row = identity) and every video ROI
/// (`[V, d]` in [`Dataset::video_refs`] order).
#[derive(Clone, Debug, PartialEq)]
pub struct RoiEmbeddings {
    pub stills: Tensor,
    pub videos: Tensor,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn row(t: &Tensor, i: usize) -> &[f64] {
    let d = t.shape()[1];
    &t.data()[i * d..(i + 1) * d]
}

/// Assembles `l` triplets. Uniform sampling draws the negative identity
/// uniformly among the others; hard sampling picks, for a random target,
/// its farthest video and the nearest other-identity video.
pub fn build_triplet_batch(
    ds: &Dataset,
    l: usize,
    strategy: Sampling,
    embeddings: Option<&RoiEmbeddings>,
    seed: u64,
) -> Result<TripletBatch> {
    if ds.len() < 2 {
        return Err(Error::Degenerate {
            op: "build_triplet_batch",
            reason: "need at least two identities".into(),
        });
    }
    if l == 0 {
        return Err(Error::Empty { op: "build_triplet_batch" });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let refs = ds.video_refs();
    let emb = match strategy {
        Sampling::Hard => {
            let e = embeddings.ok_or_else(|| Error::Domain {
                op: "build_triplet_batch",
                reason: "hard sampling requires embeddings for every ROI".into(),
            })?;
            if e.stills.shape().first() != Some(&ds.len()) || e.videos.shape().first() != Some(&refs.len()) {
                return Err(Error::shape("build_triplet_batch", e.videos.shape(), &[refs.len()]));
            }
            Some(e)
        }
        Sampling::Uniform => None,
    };
    let mut triplets = Vec::with_capacity(l);
    for _ in 0..l {
        let target = rng.random_range(0..ds.len());
        let t = match emb {
            None => {
                let k = rng.random_range(0..ds.identities[target].videos.len());
                let mut neg = rng.random_range(0..ds.len() - 1);
                if neg >= target {
                    neg += 1;
                }
                let nk = rng.random_range(0..ds.identities[neg].videos.len());
                Triplet {
                    target,
                    positive: (target, k),
                    negative: (neg, nk),
                }
            }
            Some(e) => {
                let anchor = row(&e.stills, target);
                let mut pos = (usize::MAX, f64::NEG_INFINITY);
                let mut neg = (usize::MAX, f64::INFINITY);
                for (vi, &(id, _)) in refs.iter().enumerate() {
                    let d = sq_dist(anchor, row(&e.videos, vi));
                    if id == target && d > pos.1 {
                        pos = (vi, d);
                    } else if id != target && d < neg.1 {
                        neg = (vi, d);
                    }
                }
                Triplet {
                    target,
                    positive: refs[pos.0],
                    negative: refs[neg.0],
                }
            }
        };
        triplets.push(t);
    }
    let batch = TripletBatch { triplets };
    batch.validate(ds)?;
    Ok(batch)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MiningPolicy {
    /// Farthest positive and nearest negative per anchor.
    Hardest,
    /// Nearest negative farther than the (farthest) positive but within the
    /// margin of it.
    SemiHard,
}

/// Mines `(anchor, positive, negative)` row triplets from `[n, d]`
/// embeddings using squared Euclidean distances. Anchors without a positive
/// or a qualifying negative are skipped; ties go to the lowest index.
pub fn mine_hard_triplets(
    embeddings: &Tensor,
    labels: &[usize],
    policy: MiningPolicy,
    margin: f64,
) -> Vec<(usize, usize, usize)> {
    let n = labels.len();
    let mut out = Vec::new();
    for a in 0..n {
        let ea = row(embeddings, a);
        let mut pos = (usize::MAX, f64::NEG_INFINITY);
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            let d = sq_dist(ea, row(embeddings, p));
            if d > pos.1 {
                pos = (p, d);
            }
        }
        if pos.0 == usize::MAX {
            continue;
        }
        let mut neg = (usize::MAX, f64::INFINITY);
        for q in (0..n).filter(|&q| labels[q] != labels[a]) {
            let d = sq_dist(ea, row(embeddings, q));
            let qualifies = match policy {
                MiningPolicy::Hardest => true,
                MiningPolicy::SemiHard => d > pos.1 && d < pos.1 + margin,
            };
            if qualifies && d < neg.1 {
                neg = (q, d);
            }
        }
        if neg.0 != usize::MAX {
            out.push((a, pos.0, neg.0));
        }
    }
    out
}

fn to_gray8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[1, H, W]` tensor as binary PGM or `[3, H, W]` as PPM.
pub fn write_pnm(path: &Path, img: &Tensor) -> Result<()> {
    let (c, h, w) = roi_dims(img, "write_pnm")?;
    let plane = h * w;
    let buf: Vec<u8> = match c {
        1 => img.data().iter().map(|&v| to_gray8(v)).collect(),
        3 => (0..plane)
            .flat_map(|i| (0..3).map(move |ch| (ch, i)))
            .map(|(ch, i)| to_gray8(img.data()[ch * plane + i]))
            .collect(),
        _ => return Err(Error::invalid_shape("write_pnm", img.shape(), "need 1 or 3 channels")),
    };
    let color = if c == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    let file = BufWriter::new(fs::File::create(path)?);
    let encoder = image::codecs::pnm::PnmEncoder::new(file);
    image::ImageEncoder::write_image(encoder, &buf, w as u32, h as u32, color)
        .map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))
}

/// Reads a PGM/PPM into a `[C, H, W]` tensor with values in [0, 1].
pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let img = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| Error::Corrupt(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img.color().channel_count() {
        1 => {
            let g = img.to_luma8();
            Tensor::new(&[1, h, w], g.as_raw().iter().map(|&b| b as f64 / 255.0).collect())
        }
        _ => {
            let rgb = img.to_rgb8();
            let raw = rgb.as_raw();
            let mut data = vec![0.0; 3 * h * w];
            for i in 0..h * w {
                for ch in 0..3 {
                    data[ch * h * w + i] = raw[i * 3 + ch] as f64 / 255.0;
                }
            }
            Tensor::new(&[3, h, w], data)
        }
    }
}

const DATASET_FORMAT: u32 = 1;

fn roi_filename(id: usize, role: &str, k: usize, channels: usize) -> String {
    let ext = if channels == 1 { "pgm" } else { "ppm" };
    match role {
        "still" => format!("id{id:03}_still.{ext}"),
        _ => format!("id{id:03}_video{k:02}.{ext}"),
    }
}

/// Writes `images/*.pgm`, `manifest.csv` (id, role, index, filename),
/// `dataset.txt` (seed and geometry) and `tensors.bin` (exact tensor
/// records in manifest order) under `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut manifest = csv::Writer::from_path(dir.join("manifest.csv")).map_err(csv_err)?;
    manifest.write_record(["id", "role", "index", "filename"]).map_err(csv_err)?;
    let mut bin = BufWriter::new(fs::File::create(dir.join("tensors.bin"))?);
    for ident in &ds.identities {
        let entries = std::iter::once(("still", 0, &ident.still))
            .chain(ident.videos.iter().enumerate().map(|(k, v)| ("video", k, v)));
        for (role, k, t) in entries {
            let name = roi_filename(ident.id, role, k, ds.geometry.channels);
            write_pnm(&images.join(&name), t)?;
            manifest
                .write_record([ident.id.to_string(), role.to_string(), k.to_string(), format!("images/{name}")])
                .map_err(csv_err)?;
            t.write_to(&mut bin)?;
        }
    }
    manifest.flush()?;
    bin.flush()?;
    let meta = format!(
        "format: {DATASET_FORMAT}\nseed: {}\nidentities: {}\nchannels: {}\nheight: {}\nwidth: {}\n",
        ds.seed,
        ds.len(),
        ds.geometry.channels,
        ds.geometry.height,
        ds.geometry.width
    );
    fs::write(dir.join("dataset.txt"), meta)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Corrupt(format!("manifest: {e}"))
}

struct ManifestRow {
    id: usize,
    role: String,
    index: usize,
    filename: String,
}

fn read_meta(dir: &Path) -> Result<(u64, Geometry)> {
    let text = fs::read_to_string(dir.join("dataset.txt"))?;
    let get = |key: &str| -> Result<u64> {
        text.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(':')))
            .ok_or_else(|| Error::Corrupt(format!("dataset.txt lacks `{key}`")))?
            .trim()
            .parse()
            .map_err(|e| Error::Corrupt(format!("dataset.txt `{key}`: {e}")))
    };
    let format = get("format")?;
    if format != DATASET_FORMAT as u64 {
        return Err(Error::Version {
            found: format.to_string(),
            expected: DATASET_FORMAT.to_string(),
        });
    }
    let geometry = Geometry {
        channels: get("channels")? as usize,
        height: get("height")? as usize,
        width: get("width")? as usize,
    };
    Ok((get("seed")?, geometry))
}

fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::Reader::from_path(dir.join("manifest.csv")).map_err(csv_err)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::Corrupt(format!("manifest row {rec:?} is short")));
        let num = |i: usize| -> Result<usize> {
            field(i)?
                .parse()
                .map_err(|e| Error::Corrupt(format!("manifest row {rec:?}: {e}")))
        };
        rows.push(ManifestRow {
            id: num(0)?,
            role: field(1)?.to_string(),
            index: num(2)?,
            filename: field(3)?.to_string(),
        });
    }
    Ok(rows)
}

fn assemble(seed: u64, geometry: Geometry, rows: &[ManifestRow], images: Vec<Tensor>) -> Result<Dataset> {
    let mut identities: Vec<Identity> = Vec::new();
    for (r, t) in rows.iter().zip(images) {
        if r.role == "still" {
            if r.id != identities.len() {
                return Err(Error::Corrupt(format!("still for id {} out of order", r.id)));
            }
            identities.push(Identity {
                id: r.id,
                still: t,
                videos: Vec::new(),
            });
        } else if r.role == "video" {
            let ident = identities
                .last_mut()
                .filter(|i| i.id == r.id && i.videos.len() == r.index)
                .ok_or_else(|| Error::Corrupt(format!("video {} of id {} out of order", r.index, r.id)))?;
            ident.videos.push(t);
        } else {
            return Err(Error::Corrupt(format!("unknown role `{}`", r.role)));
        }
    }
    let ds = Dataset {
        identities,
        seed,
        geometry,
    };
    ds.check()?;
    Ok(ds)
}

/// Loads the exact tensors written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let (seed, geometry) = read_meta(dir)?;
    let rows = read_manifest(dir)?;
    let mut bin = BufReader::new(fs::File::open(dir.join("tensors.bin"))?);
    let images = rows
        .iter()
        .map(|_| Tensor::read_from(&mut bin))
        .collect::<Result<Vec<_>>>()?;
    assemble(seed, geometry, &rows, images)
}

/// Loads the 8-bit images listed in the manifest instead of the exact
/// tensor container.
pub fn read_dataset_images(dir: &Path) -> Result<Dataset> {
    let (seed, geometry) = read_meta(dir)?;
    let rows = read_manifest(dir)?;
    let images = rows
        .iter()
        .map(|r| read_pnm(&dir.join(&r.filename)))
        .collect::<Result<Vec<_>>>()?;
    assemble(seed, geometry, &rows, images)
}

/// Shuffled copy of `0..n` (used for epoch ordering).
pub fn shuffled_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}
