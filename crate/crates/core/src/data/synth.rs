//! Deterministic synthetic faces.
//!
//! A frontal 3-D point template (eyes, nose, mouth corners, brows, jaw and
//! inner mouth contour) is deformed by identity scale and expression, rotated
//! out of plane (yaw) and in plane (roll), projected orthographically and
//! rendered as blurred dark splats on a skin ellipse whose shading follows
//! the yaw. Appearance therefore carries the pose signal a classifier needs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetRecord, DatasetSchema};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::shape::{BBox, FlipPermutation, Point, RawAnnotation};

pub const LEFT_EYE: usize = 0;
pub const RIGHT_EYE: usize = 1;
pub const NOSE_TIP: usize = 2;
pub const MIN_LANDMARKS: usize = 5;

const ANCHORS: [[f64; 3]; 5] = [
    [-0.20, -0.12, 0.00],
    [0.20, -0.12, 0.00],
    [0.00, 0.08, 0.28],
    [-0.16, 0.28, 0.06],
    [0.16, 0.28, 0.06],
];
const BROWS: [[f64; 3]; 4] = [
    [-0.28, -0.25, 0.00],
    [-0.10, -0.26, 0.05],
    [0.10, -0.26, 0.05],
    [0.28, -0.25, 0.00],
];
const MOUTH_CENTER_Y: f64 = 0.29;
const JAW_SWEEP: f64 = 1.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Part {
    Eye,
    Nose,
    MouthCorner,
    Brow,
    /// sweep angle from the chin
    Jaw,
    /// angle around the inner mouth contour, 0 at the upper lip
    Mouth,
}

#[derive(Debug, Clone, Copy)]
struct TemplatePoint {
    pos: [f64; 3],
    part: Part,
    angle: f64,
}

/// Point layout of the frontal template for `n` landmarks.
#[derive(Debug, Clone)]
pub struct FaceTemplate {
    points: Vec<TemplatePoint>,
    flip: FlipPermutation,
}

impl FaceTemplate {
    pub fn new(n: usize) -> Result<Self> {
        if n < MIN_LANDMARKS {
            return Err(Error::Config(format!(
                "synthetic template needs at least {MIN_LANDMARKS} landmarks, got {n}"
            )));
        }
        let mut points = Vec::with_capacity(n);
        let mut perm = vec![1, 0, 2, 4, 3];
        for (i, &pos) in ANCHORS.iter().enumerate() {
            let part = match i {
                0 | 1 => Part::Eye,
                2 => Part::Nose,
                _ => Part::MouthCorner,
            };
            points.push(TemplatePoint { pos, part, angle: 0.0 });
        }
        let mut rest = n - ANCHORS.len();
        if n >= ANCHORS.len() + BROWS.len() {
            let base = points.len();
            for &pos in &BROWS {
                points.push(TemplatePoint { pos, part: Part::Brow, angle: 0.0 });
            }
            perm.extend([base + 3, base + 2, base + 1, base]);
            rest -= BROWS.len();
        }
        let n_mouth = rest / 2;
        let n_jaw = rest - n_mouth;
        let base = points.len();
        for i in 0..n_jaw {
            let t = if n_jaw == 1 {
                0.0
            } else {
                -1.0 + 2.0 * i as f64 / (n_jaw - 1) as f64
            };
            let theta = t * JAW_SWEEP;
            let pos = [0.46 * theta.sin(), 0.12 + 0.42 * theta.cos(), 0.12 * theta.cos() - 0.08];
            points.push(TemplatePoint { pos, part: Part::Jaw, angle: theta });
            perm.push(base + n_jaw - 1 - i);
        }
        let base = points.len();
        for j in 0..n_mouth {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / n_mouth as f64;
            let pos = [0.11 * phi.sin(), MOUTH_CENTER_Y - 0.05 * phi.cos(), 0.08];
            points.push(TemplatePoint { pos, part: Part::Mouth, angle: phi });
            perm.push(base + (n_mouth - j) % n_mouth);
        }
        Ok(Self {
            points,
            flip: FlipPermutation::new(perm)?,
        })
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn flip_permutation(&self) -> &FlipPermutation {
        &self.flip
    }

    /// Projects the template under `params` into face units (face width ~1,
    /// origin between the eyes and the mouth, y pointing down).
    pub fn deform(&self, params: &FaceParams) -> Vec<Point> {
        let (sy_, cy_) = params.yaw.sin_cos();
        let (sr, cr) = params.roll.sin_cos();
        self.points
            .iter()
            .map(|tp| {
                let [mut x, mut y, mut z] = tp.pos;
                match tp.part {
                    Part::Mouth => {
                        y += params.mouth_open * (0.5 - tp.angle.cos());
                    }
                    Part::MouthCorner => {
                        x += x.signum() * 0.5 * params.smile;
                        y += 0.5 * params.mouth_open - params.smile;
                    }
                    Part::Jaw => {
                        y += 0.8 * params.mouth_open * tp.angle.cos();
                    }
                    Part::Brow => {
                        y -= params.brow_raise;
                    }
                    Part::Eye | Part::Nose => {}
                }
                x *= params.scale_x;
                y *= params.scale_y;
                z *= params.scale_x;
                let xr = x * cy_ + z * sy_;
                Point::new(xr * cr - y * sr, xr * sr + y * cr)
            })
            .collect()
    }
}

/// Generator parameters behind one synthetic face.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    /// out-of-plane rotation, radians; positive turns the nose toward +x
    pub yaw: f64,
    /// in-plane rotation, radians
    pub roll: f64,
    pub mouth_open: f64,
    pub smile: f64,
    pub brow_raise: f64,
    pub scale_x: f64,
    pub scale_y: f64,
}

impl FaceParams {
    pub const NEUTRAL: FaceParams = FaceParams {
        yaw: 0.0,
        roll: 0.0,
        mouth_open: 0.0,
        smile: 0.0,
        brow_raise: 0.0,
        scale_x: 1.0,
        scale_y: 1.0,
    };

    pub fn mirrored(&self) -> FaceParams {
        FaceParams {
            yaw: -self.yaw,
            roll: -self.roll,
            ..*self
        }
    }
}

/// True generator state stored with each record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMeta {
    pub params: FaceParams,
    pub occluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_landmarks: usize,
    /// independent still images
    pub n_examples: usize,
    pub n_videos: usize,
    pub frames_per_video: usize,
    pub image_size: usize,
    pub yaw_range: f64,
    pub roll_range: f64,
    pub mouth_open_range: f64,
    pub smile_range: f64,
    pub brow_range: f64,
    /// identity scale factors are drawn from `1 +- identity_scale_range`
    pub identity_scale_range: f64,
    /// face width in pixels, `[min, max]`
    pub face_size: [f64; 2],
    pub center_jitter: f64,
    pub noise_level: f64,
    /// relative perturbation of the detection window around the ground truth
    pub detection_jitter: f64,
    /// probability that a still (or a video) contains an occluder
    pub occlusion_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_landmarks: 21,
            n_examples: 1000,
            n_videos: 0,
            frames_per_video: 60,
            image_size: 64,
            yaw_range: 1.1,
            roll_range: 0.3,
            mouth_open_range: 0.12,
            smile_range: 0.05,
            brow_range: 0.04,
            identity_scale_range: 0.08,
            face_size: [28.0, 34.0],
            center_jitter: 3.0,
            noise_level: 0.12,
            detection_jitter: 0.08,
            occlusion_prob: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.n_landmarks < MIN_LANDMARKS {
            return Err(Error::Config(format!(
                "n_landmarks must be at least {MIN_LANDMARKS}, got {}",
                self.n_landmarks
            )));
        }
        if self.n_examples + self.n_videos * self.frames_per_video == 0 {
            return Err(Error::Config("configuration generates no examples".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        let ranges = [
            self.yaw_range,
            self.roll_range,
            self.mouth_open_range,
            self.smile_range,
            self.brow_range,
            self.identity_scale_range,
            self.face_size[0],
            self.face_size[1],
            self.center_jitter,
            self.noise_level,
            self.detection_jitter,
            self.occlusion_prob,
        ];
        if ranges.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("parameter ranges must be finite and non-negative".into()));
        }
        if self.face_size[0] > self.face_size[1] || self.face_size[0] <= 0.0 {
            return Err(Error::Config("face_size must be an increasing positive range".into()));
        }
        if self.identity_scale_range >= 1.0 || self.occlusion_prob > 1.0 {
            return Err(Error::Config("identity_scale_range must be < 1 and occlusion_prob <= 1".into()));
        }
        Ok(())
    }
}

/// Symmetric bell on `[-1, 1]` (mean of three uniforms), so that frontal,
/// neutral faces are the most common.
fn bell(rng: &mut ChaCha8Rng) -> f64 {
    let s: f64 = (0..3).map(|_| rng.random::<f64>()).sum();
    s / 1.5 - 1.0
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn sample_params(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> FaceParams {
    let r = cfg.identity_scale_range;
    FaceParams {
        yaw: cfg.yaw_range * bell(rng),
        roll: cfg.roll_range * bell(rng),
        mouth_open: cfg.mouth_open_range * bell(rng).abs(),
        smile: cfg.smile_range * bell(rng),
        brow_raise: cfg.brow_range * bell(rng),
        scale_x: uniform(rng, 1.0 - r, 1.0 + r),
        scale_y: uniform(rng, 1.0 - r, 1.0 + r),
    }
}

#[derive(Debug, Clone, Copy)]
struct Placement {
    face_width: f64,
    cx: f64,
    cy: f64,
}

#[derive(Debug, Clone, Copy)]
struct Occluder {
    /// offsets and extents relative to the ground-truth window
    rel_x: f64,
    rel_y: f64,
    rel_w: f64,
    rel_h: f64,
    level: f64,
}

fn sample_occluder(rng: &mut ChaCha8Rng) -> Occluder {
    let rel_w = uniform(rng, 0.45, 0.75);
    let rel_h = uniform(rng, 0.45, 0.75);
    Occluder {
        rel_x: uniform(rng, -0.1, 1.1 - rel_w),
        rel_y: uniform(rng, -0.1, 1.1 - rel_h),
        rel_w,
        rel_h,
        level: uniform(rng, 0.1, 0.9),
    }
}

struct Renderer<'a> {
    cfg: &'a SyntheticConfig,
    template: &'a FaceTemplate,
    noise: Normal<f64>,
}

impl Renderer<'_> {
    fn landmarks(&self, params: &FaceParams, place: &Placement) -> Vec<Point> {
        self.template
            .deform(params)
            .into_iter()
            .map(|p| Point::new(place.cx + place.face_width * p.x, place.cy + place.face_width * p.y))
            .collect()
    }

    fn render(
        &self,
        params: &FaceParams,
        place: &Placement,
        points: &[Point],
        bbox: &BBox,
        occluder: Option<&Occluder>,
        rng: &mut ChaCha8Rng,
    ) -> Result<GrayImage> {
        let size = self.cfg.image_size;
        let s = place.face_width;
        // skin ellipse: center of the face, axes follow the projected width
        let (sr, cr) = params.roll.sin_cos();
        let off = Point::new(0.28 * params.scale_x * params.yaw.sin() * 0.4, 0.06 * params.scale_y);
        let ecx = place.cx + s * (off.x * cr - off.y * sr);
        let ecy = place.cy + s * (off.x * sr + off.y * cr);
        let ax = 0.52 * s * params.scale_x * (0.75 * params.yaw.cos() + 0.25);
        let ay = 0.62 * s * params.scale_y;
        let shade = 0.18 * params.yaw.sin();
        let sigma = 0.045 * s;
        let inv2s2 = 1.0 / (2.0 * sigma * sigma);
        let reach = 3.5 * sigma;
        let bg_tilt = uniform(rng, -0.08, 0.08);
        let bg_level = uniform(rng, 0.15, 0.35);

        let mut values = vec![0.0; size * size];
        for j in 0..size {
            let y = j as f64 + 0.5;
            for i in 0..size {
                let x = i as f64 + 0.5;
                let mut v = bg_level + bg_tilt * (x / size as f64 - 0.5);
                let dx = x - ecx;
                let dy = y - ecy;
                let u = (dx * cr + dy * sr) / ax;
                let w = (-dx * sr + dy * cr) / ay;
                let r2 = u * u + w * w;
                if r2 <= 1.0 {
                    v = 0.6 + shade * u - 0.08 * r2;
                } else if r2 <= 1.3 {
                    // soft edge
                    let t = (r2 - 1.0) / 0.3;
                    v = (0.6 + shade * u - 0.08) * (1.0 - t) + v * t;
                }
                for p in points {
                    let (ddx, ddy) = (x - p.x, y - p.y);
                    if ddx.abs() < reach && ddy.abs() < reach {
                        v -= 0.4 * (-(ddx * ddx + ddy * ddy) * inv2s2).exp();
                    }
                }
                values[j * size + i] = v;
            }
        }
        if let Some(o) = occluder {
            let x0 = bbox.x + o.rel_x * bbox.w;
            let y0 = bbox.y + o.rel_y * bbox.h;
            let (x1, y1) = (x0 + o.rel_w * bbox.w, y0 + o.rel_h * bbox.h);
            for j in 0..size {
                let y = j as f64 + 0.5;
                if y < y0 || y > y1 {
                    continue;
                }
                for i in 0..size {
                    let x = i as f64 + 0.5;
                    if x >= x0 && x <= x1 {
                        values[j * size + i] = o.level;
                    }
                }
            }
        }
        if self.cfg.noise_level > 0.0 {
            for v in values.iter_mut() {
                *v += self.noise.sample(rng);
            }
        }
        GrayImage::from_unit(size, size, &values)
    }

    fn detection(&self, bbox: &BBox, rng: &mut ChaCha8Rng) -> BBox {
        let j = self.cfg.detection_jitter;
        if j == 0.0 {
            return *bbox;
        }
        let n = Normal::new(0.0, j).expect("jitter validated non-negative");
        let c = bbox.center();
        let cx = c.x + n.sample(rng) * bbox.w;
        let cy = c.y + n.sample(rng) * bbox.h;
        let w = bbox.w * n.sample(rng).clamp(-3.0 * j, 3.0 * j).exp();
        let h = bbox.h * n.sample(rng).clamp(-3.0 * j, 3.0 * j).exp();
        BBox {
            x: cx - 0.5 * w,
            y: cy - 0.5 * h,
            w,
            h,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        params: FaceParams,
        place: Placement,
        occluder: Option<&Occluder>,
        index: usize,
        video: Option<(String, usize)>,
        rng: &mut ChaCha8Rng,
    ) -> Result<DatasetRecord> {
        let points = self.landmarks(&params, &place);
        let bbox = BBox::enclosing(&points)?;
        let image = self.render(&params, &place, &points, &bbox, occluder, rng)?;
        let detection = self.detection(&bbox, rng);
        let (video_id, frame_index) = match video {
            Some((v, f)) => (Some(v), Some(f)),
            None => (None, None),
        };
        Ok(DatasetRecord {
            image,
            annotation: RawAnnotation {
                points,
                bbox,
                image_ref: format!("synth-{index:06}"),
            },
            detection: Some(detection),
            video_id,
            frame_index,
            meta: Some(SyntheticMeta {
                params,
                occluded: occluder.is_some(),
            }),
        })
    }
}

/// Generates a dataset; identical configurations give identical datasets.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let template = FaceTemplate::new(cfg.n_landmarks)?;
    let renderer = Renderer {
        cfg,
        template: &template,
        noise: Normal::new(0.0, cfg.noise_level.max(f64::MIN_POSITIVE)).expect("finite std"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let center = cfg.image_size as f64 / 2.0;
    let mut records = Vec::with_capacity(cfg.n_examples + cfg.n_videos * cfg.frames_per_video);

    for index in 0..cfg.n_examples {
        let params = sample_params(cfg, &mut rng);
        let place = Placement {
            face_width: uniform(&mut rng, cfg.face_size[0], cfg.face_size[1]),
            cx: center + cfg.center_jitter * (2.0 * rng.random::<f64>() - 1.0),
            cy: center + cfg.center_jitter * (2.0 * rng.random::<f64>() - 1.0),
        };
        let occluder = (rng.random::<f64>() < cfg.occlusion_prob).then(|| sample_occluder(&mut rng));
        records.push(renderer.record(params, place, occluder.as_ref(), index, None, &mut rng)?);
    }

    for v in 0..cfg.n_videos {
        let video_id = format!("video{v:03}");
        let start = sample_params(cfg, &mut rng);
        let end = sample_params(cfg, &mut rng);
        let wobble = uniform(&mut rng, 0.5, 1.5);
        let phase = uniform(&mut rng, 0.0, std::f64::consts::TAU);
        let place0 = Placement {
            face_width: uniform(&mut rng, cfg.face_size[0], cfg.face_size[1]),
            cx: center + cfg.center_jitter * (2.0 * rng.random::<f64>() - 1.0),
            cy: center + cfg.center_jitter * (2.0 * rng.random::<f64>() - 1.0),
        };
        let episode = (rng.random::<f64>() < cfg.occlusion_prob).then(|| {
            let len = (cfg.frames_per_video / 4).max(1);
            let first = rng.random_range(0..cfg.frames_per_video.saturating_sub(len).max(1));
            (first, first + len, sample_occluder(&mut rng))
        });
        let n = cfg.frames_per_video;
        for f in 0..n {
            let t = if n > 1 { f as f64 / (n - 1) as f64 } else { 0.0 };
            let lerp = |a: f64, b: f64| a + (b - a) * t;
            let swing = (std::f64::consts::TAU * wobble * t + phase).sin();
            let params = FaceParams {
                yaw: (lerp(start.yaw, end.yaw) + 0.25 * cfg.yaw_range * swing)
                    .clamp(-cfg.yaw_range, cfg.yaw_range),
                roll: lerp(start.roll, end.roll),
                mouth_open: lerp(start.mouth_open, end.mouth_open),
                smile: lerp(start.smile, end.smile),
                brow_raise: lerp(start.brow_raise, end.brow_raise),
                scale_x: start.scale_x,
                scale_y: start.scale_y,
            };
            let place = Placement {
                cx: place0.cx + 0.5 * cfg.center_jitter * swing,
                ..place0
            };
            let occluder = episode
                .as_ref()
                .filter(|(a, b, _)| (*a..*b).contains(&f))
                .map(|(_, _, o)| o);
            let index = records.len();
            records.push(renderer.record(
                params,
                place,
                occluder,
                index,
                Some((video_id.clone(), f)),
                &mut rng,
            )?);
        }
    }

    Ok(Dataset {
        records,
        schema: DatasetSchema {
            n_points: cfg.n_landmarks,
            flip: template.flip_permutation().clone(),
            nose_index: NOSE_TIP,
            left_eye_index: LEFT_EYE,
            right_eye_index: RIGHT_EYE,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::{flip_shape, normalize_shape, Shape};

    fn small(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            n_examples: 12,
            n_videos: 2,
            frames_per_video: 5,
            seed,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_synthetic(&small(3)).unwrap();
        let b = generate_synthetic(&small(3)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small(4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_ranges_reproduce_the_template() {
        let cfg = SyntheticConfig {
            n_examples: 5,
            yaw_range: 0.0,
            roll_range: 0.0,
            mouth_open_range: 0.0,
            smile_range: 0.0,
            brow_range: 0.0,
            identity_scale_range: 0.0,
            face_size: [30.0, 30.0],
            center_jitter: 0.0,
            ..SyntheticConfig::default()
        };
        let d = generate_synthetic(&cfg).unwrap();
        let template = FaceTemplate::new(cfg.n_landmarks).unwrap().deform(&FaceParams::NEUTRAL);
        for r in &d.records {
            for (p, t) in r.annotation.points.iter().zip(&template) {
                assert!((p.x - (32.0 + 30.0 * t.x)).abs() < 1e-12);
                assert!((p.y - (32.0 + 30.0 * t.y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_few_landmarks() {
        let cfg = SyntheticConfig {
            n_landmarks: 4,
            ..small(0)
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn template_is_mirror_symmetric_under_its_permutation() {
        for n in [5, 6, 9, 10, 21, 68] {
            let t = FaceTemplate::new(n).unwrap();
            assert_eq!(t.n_points(), n);
            let pts = t.deform(&FaceParams::NEUTRAL);
            let s = Shape::from_points(&pts).unwrap();
            let f = flip_shape(&s, t.flip_permutation()).unwrap();
            for (a, b) in s.as_flat().iter().zip(f.as_flat()) {
                assert!((a - b).abs() < 1e-12, "n={n}");
            }
        }
    }

    #[test]
    fn yaw_mirror_matches_flip() {
        let t = FaceTemplate::new(21).unwrap();
        let p = FaceParams {
            yaw: 0.4,
            roll: 0.1,
            mouth_open: 0.05,
            smile: 0.02,
            ..FaceParams::NEUTRAL
        };
        let a = Shape::from_points(&t.deform(&p)).unwrap();
        let b = Shape::from_points(&t.deform(&p.mirrored())).unwrap();
        let fa = flip_shape(&a, t.flip_permutation()).unwrap();
        for (u, v) in fa.as_flat().iter().zip(b.as_flat()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn landmarks_stay_inside_the_image() {
        let d = generate_synthetic(&SyntheticConfig {
            n_examples: 300,
            ..SyntheticConfig::default()
        })
        .unwrap();
        for r in &d.records {
            let (w, h) = (r.image.width() as f64, r.image.height() as f64);
            assert!(r.annotation.points.iter().all(|p| p.x >= 0.0 && p.x <= w && p.y >= 0.0 && p.y <= h));
            normalize_shape(&r.annotation).unwrap();
        }
    }

    #[test]
    fn videos_are_ordered_and_smooth() {
        let d = generate_synthetic(&small(9)).unwrap();
        let frames: Vec<_> = d.records.iter().filter(|r| r.video_id.as_deref() == Some("video001")).collect();
        assert_eq!(frames.len(), 5);
        for (i, f) in frames.iter().enumerate() {
            assert_eq!(f.frame_index, Some(i));
        }
    }
}
