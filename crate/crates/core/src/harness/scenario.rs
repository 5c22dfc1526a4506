//! Synthetic video: colored rectangles moving with piecewise-constant
//! velocity over a faint static texture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detmetrics::{BBox, DetectionSet};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Temporary velocity override for frames `start..end`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityEpisode {
    pub start: usize,
    pub end: usize,
    pub velocity: (f64, f64),
}

/// One rectangle. Position is the top-left corner at frame 0, velocity is in
/// pixels per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub class_id: u32,
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
    pub velocity: (f64, f64),
    #[serde(default)]
    pub episodes: Vec<VelocityEpisode>,
}

impl ObjectSpec {
    pub fn velocity_at(&self, frame: usize) -> (f64, f64) {
        self.episodes
            .iter()
            .rev()
            .find(|e| (e.start..e.end).contains(&frame))
            .map_or(self.velocity, |e| e.velocity)
    }
}

/// Random speed-up episodes applied to generated objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AccelerationSpec {
    /// Chance that a generated object gets one episode.
    pub probability: f64,
    /// Episode length in frames, inclusive range.
    pub duration: (usize, usize),
    /// Velocity multiplier during the episode, inclusive range.
    pub factor: (f64, f64),
}

impl Default for AccelerationSpec {
    fn default() -> Self {
        Self {
            probability: 0.5,
            duration: (8, 24),
            factor: (2.0, 4.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSpec {
    pub width: usize,
    pub height: usize,
    pub length: usize,
    pub frame_rate: f64,
    pub num_classes: u32,
    /// Randomly generated objects, in addition to `objects`.
    pub num_objects: usize,
    /// Side length range in pixels for generated objects.
    pub size_range: (f64, f64),
    /// Speed range in pixels per frame for generated objects.
    pub speed_range: (f64, f64),
    pub acceleration: Option<AccelerationSpec>,
    /// Explicit objects, rendered before generated ones.
    pub objects: Vec<ObjectSpec>,
    /// Amplitude of the static background texture.
    pub background_noise: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            width: 96,
            height: 96,
            length: 120,
            frame_rate: 30.0,
            num_classes: 2,
            num_objects: 3,
            size_range: (12.0, 28.0),
            speed_range: (0.5, 2.0),
            acceleration: None,
            objects: Vec::new(),
            background_noise: 0.05,
        }
    }
}

fn check_range(name: &str, r: (f64, f64)) -> Result<()> {
    if !(r.0.is_finite() && r.1.is_finite() && 0.0 <= r.0 && r.0 <= r.1) {
        return Err(Error::Config(format!("{name} must satisfy 0 <= lo <= hi, got {r:?}")));
    }
    Ok(())
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 || self.length == 0 {
            return fail("width, height and length must be >= 1".into());
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return fail(format!("frame_rate must be > 0, got {}", self.frame_rate));
        }
        if self.num_classes == 0 {
            return fail("num_classes must be >= 1".into());
        }
        check_range("size_range", self.size_range)?;
        check_range("speed_range", self.speed_range)?;
        if self.num_objects > 0 && self.size_range.0 <= 0.0 {
            return fail("size_range lower bound must be > 0".into());
        }
        let (w, h) = (self.width as f64, self.height as f64);
        if self.num_objects > 0 && (self.size_range.1 > w || self.size_range.1 > h) {
            return fail(format!(
                "object size up to {} exceeds image {}x{}",
                self.size_range.1, self.width, self.height
            ));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.width > 0.0 && o.height > 0.0) {
                return fail(format!("objects[{i}]: size must be > 0"));
            }
            if o.width > w || o.height > h {
                return fail(format!("objects[{i}]: {}x{} exceeds image {}x{}", o.width, o.height, w, h));
            }
            if o.class_id >= self.num_classes {
                return fail(format!("objects[{i}]: class {} out of range", o.class_id));
            }
            if o.episodes.iter().any(|e| e.start > e.end) {
                return fail(format!("objects[{i}]: episode start after end"));
            }
        }
        if let Some(a) = &self.acceleration {
            if !(0.0..=1.0).contains(&a.probability) {
                return fail(format!("acceleration.probability must lie in [0, 1], got {}", a.probability));
            }
            if a.duration.0 > a.duration.1 {
                return fail("acceleration.duration must satisfy lo <= hi".into());
            }
            check_range("acceleration.factor", a.factor)?;
        }
        if !(self.background_noise >= 0.0) {
            return fail("background_noise must be >= 0".into());
        }
        Ok(())
    }
}

/// Rendered frames plus per-frame ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub seed: u64,
    /// Resolved motion of every object (explicit then generated).
    pub objects: Vec<ObjectSpec>,
    /// `[3, H, W]` images.
    pub frames: Vec<Tensor>,
    pub ground_truth: Vec<DetectionSet>,
}

impl Scenario {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_rate(&self) -> f64 {
        self.spec.frame_rate
    }

    /// Ground truth at `index`, or `None` outside the clip.
    pub fn gt(&self, index: i64) -> Option<&DetectionSet> {
        usize::try_from(index).ok().and_then(|i| self.ground_truth.get(i))
    }
}

/// Colors by class; classes beyond the table cycle through it with a
/// brightness shift.
fn class_color(class_id: u32) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 4] = [
        [0.95, 0.35, 0.10],
        [0.10, 0.40, 0.95],
        [0.20, 0.90, 0.30],
        [0.85, 0.85, 0.15],
    ];
    let base = PALETTE[class_id as usize % PALETTE.len()];
    let shift = 0.8f64.powi((class_id as usize / PALETTE.len()) as i32);
    base.map(|c| c * shift)
}

fn random_object(rng: &mut ChaCha8Rng, spec: &ScenarioSpec) -> ObjectSpec {
    let (lo, hi) = spec.size_range;
    let width = rng.random_range(lo..=hi);
    let height = rng.random_range(lo..=hi);
    let x = rng.random_range(0.0..=(spec.width as f64 - width));
    let y = rng.random_range(0.0..=(spec.height as f64 - height));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let speed = rng.random_range(spec.speed_range.0..=spec.speed_range.1);
    let velocity = (speed * angle.cos(), speed * angle.sin());
    let class_id = rng.random_range(0..spec.num_classes);
    let mut episodes = Vec::new();
    if let Some(a) = &spec.acceleration {
        if rng.random_bool(a.probability) {
            let len = rng.random_range(a.duration.0..=a.duration.1);
            let start = rng.random_range(0..spec.length);
            let f = rng.random_range(a.factor.0..=a.factor.1);
            episodes.push(VelocityEpisode {
                start,
                end: start + len,
                velocity: (velocity.0 * f, velocity.1 * f),
            });
        }
    }
    ObjectSpec {
        class_id,
        x,
        y,
        width,
        height,
        velocity,
        episodes,
    }
}

/// Top-left corner of every object at every frame.
fn trajectories(objects: &[ObjectSpec], length: usize) -> Vec<Vec<(f64, f64)>> {
    objects
        .iter()
        .map(|o| {
            let mut pos = Vec::with_capacity(length);
            let (mut x, mut y) = (o.x, o.y);
            for i in 0..length {
                pos.push((x, y));
                let (vx, vy) = o.velocity_at(i);
                x += vx;
                y += vy;
            }
            pos
        })
        .collect()
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Render one frame with area-coverage anti-aliasing.
fn render(spec: &ScenarioSpec, background: &[f64], boxes: &[(BBox, [f64; 3])]) -> Tensor {
    let (w, h) = (spec.width, spec.height);
    let mut img = background.to_vec();
    for (b, color) in boxes {
        let x_lo = b.x_min.floor().max(0.0) as usize;
        let x_hi = (b.x_max.ceil() as usize).min(w);
        let y_lo = b.y_min.floor().max(0.0) as usize;
        let y_hi = (b.y_max.ceil() as usize).min(h);
        for py in y_lo..y_hi {
            let cy = overlap(b.y_min, b.y_max, py as f64, py as f64 + 1.0);
            for px in x_lo..x_hi {
                let cov = cy * overlap(b.x_min, b.x_max, px as f64, px as f64 + 1.0);
                if cov <= 0.0 {
                    continue;
                }
                for (c, &col) in color.iter().enumerate() {
                    let v = &mut img[c * h * w + py * w + px];
                    *v = *v * (1.0 - cov) + col * cov;
                }
            }
        }
    }
    Tensor::new(vec![3, h, w], img).expect("image shape")
}

/// Deterministic scenario for `(spec, seed)`.
///
/// Boxes are clipped to the image; an object whose visible part is thinner
/// than one pixel is absent from that frame's ground truth.
pub fn generate_scenario(spec: &ScenarioSpec, seed: u64) -> Result<Scenario> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects = spec.objects.clone();
    for _ in 0..spec.num_objects {
        objects.push(random_object(&mut rng, spec));
    }
    let (w, h) = (spec.width as f64, spec.height as f64);
    let background: Vec<f64> = (0..3 * spec.width * spec.height)
        .map(|_| spec.background_noise * rng.random::<f64>())
        .collect();
    let paths = trajectories(&objects, spec.length);

    let mut frames = Vec::with_capacity(spec.length);
    let mut ground_truth = Vec::with_capacity(spec.length);
    for i in 0..spec.length {
        let mut visible = Vec::new();
        for (o, path) in objects.iter().zip(&paths) {
            let (x, y) = path[i];
            let b = BBox::gt(
                x.clamp(0.0, w),
                y.clamp(0.0, h),
                (x + o.width).clamp(0.0, w),
                (y + o.height).clamp(0.0, h),
                o.class_id,
            );
            if b.width() >= 1.0 && b.height() >= 1.0 {
                visible.push((b, class_color(o.class_id)));
            }
        }
        frames.push(render(spec, &background, &visible));
        ground_truth.push(DetectionSet::new(i as i64, visible.into_iter().map(|(b, _)| b).collect()));
    }
    Ok(Scenario {
        spec: spec.clone(),
        seed,
        objects,
        frames,
        ground_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_object(velocity: (f64, f64)) -> ScenarioSpec {
        ScenarioSpec {
            num_objects: 0,
            length: 20,
            objects: vec![ObjectSpec {
                class_id: 1,
                x: 10.0,
                y: 20.0,
                width: 16.0,
                height: 12.0,
                velocity,
                episodes: vec![],
            }],
            ..Default::default()
        }
    }

    #[test]
    fn static_object_has_identical_boxes() {
        let s = generate_scenario(&one_object((0.0, 0.0)), 1).unwrap();
        assert!(s.ground_truth.iter().all(|g| g.boxes == s.ground_truth[0].boxes));
        assert_eq!(s.frames[0], s.frames[19]);
    }

    #[test]
    fn constant_velocity_advances_exactly() {
        let s = generate_scenario(&one_object((2.0, 0.0)), 1).unwrap();
        for i in 0..20 {
            let b = &s.ground_truth[i].boxes[0];
            assert_eq!(b.x_min, 10.0 + 2.0 * i as f64);
            assert_eq!(b.y_min, 20.0);
        }
    }

    #[test]
    fn boxes_clip_then_vanish() {
        let mut spec = one_object((20.0, 0.0));
        spec.length = 10;
        let s = generate_scenario(&spec, 1).unwrap();
        // x = 10 + 20i; right edge clipped at 96 from frame 4, gone from frame 5
        assert_eq!(s.ground_truth[4].boxes[0].x_max, 96.0);
        assert!(s.ground_truth[5].boxes.is_empty());
        for g in &s.ground_truth {
            for b in &g.boxes {
                assert!(b.x_min >= 0.0 && b.x_max <= 96.0 && b.y_min >= 0.0 && b.y_max <= 96.0);
            }
        }
    }

    #[test]
    fn same_seed_same_scenario() {
        let spec = ScenarioSpec {
            acceleration: Some(AccelerationSpec::default()),
            ..Default::default()
        };
        let a = generate_scenario(&spec, 42).unwrap();
        let b = generate_scenario(&spec, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.ground_truth, generate_scenario(&spec, 43).unwrap().ground_truth);
    }

    #[test]
    fn oversized_object_is_config_error() {
        let mut spec = one_object((0.0, 0.0));
        spec.objects[0].width = 200.0;
        assert!(matches!(generate_scenario(&spec, 0), Err(Error::Config(_))));
        let spec = ScenarioSpec {
            size_range: (10.0, 100.0),
            ..Default::default()
        };
        assert!(matches!(generate_scenario(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn episodes_override_velocity() {
        let mut spec = one_object((1.0, 0.0));
        spec.objects[0].episodes.push(VelocityEpisode {
            start: 2,
            end: 4,
            velocity: (5.0, 0.0),
        });
        let s = generate_scenario(&spec, 0).unwrap();
        let xs: Vec<f64> = s.ground_truth[..6].iter().map(|g| g.boxes[0].x_min).collect();
        assert_eq!(xs, vec![10.0, 11.0, 12.0, 17.0, 22.0, 23.0]);
    }

    #[test]
    fn rendering_covers_box_pixels() {
        let s = generate_scenario(&one_object((0.0, 0.0)), 3).unwrap();
        let img = &s.frames[0];
        let color = class_color(1);
        // interior pixel (x=15, y=25) is fully covered
        let v = img.data()[2 * 96 * 96 + 25 * 96 + 15];
        assert!((v - color[2]).abs() < 1e-12);
    }
}
