//! Procedural motion clips: a soft-edged sprite on a noisy background, moved
//! by one of nine scripted programs. Every program draws its scene state in
//! the same order from the same distributions, so frame 0 carries no class
//! signal for the classes that start from a disc at rest. Noise is drawn once
//! per sample as a static field added to every frame, which keeps repeated
//! scene states (blink period, static) bit-identical across frames.

use super::{invalid, vtr, DataError, IndexEntry, Split, VideoSample};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MotionClass {
    TranslateLeft,
    TranslateRight,
    TranslateUp,
    TranslateDown,
    Rotate,
    Grow,
    Shrink,
    Blink,
    Static,
}

impl MotionClass {
    pub const ALL: [MotionClass; 9] = [
        MotionClass::TranslateLeft,
        MotionClass::TranslateRight,
        MotionClass::TranslateUp,
        MotionClass::TranslateDown,
        MotionClass::Rotate,
        MotionClass::Grow,
        MotionClass::Shrink,
        MotionClass::Blink,
        MotionClass::Static,
    ];

    /// The eight moving classes, the default corpus.
    pub const MOTION: [MotionClass; 8] = [
        MotionClass::TranslateLeft,
        MotionClass::TranslateRight,
        MotionClass::TranslateUp,
        MotionClass::TranslateDown,
        MotionClass::Rotate,
        MotionClass::Grow,
        MotionClass::Shrink,
        MotionClass::Blink,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MotionClass::TranslateLeft => "translate_left",
            MotionClass::TranslateRight => "translate_right",
            MotionClass::TranslateUp => "translate_up",
            MotionClass::TranslateDown => "translate_down",
            MotionClass::Rotate => "rotate",
            MotionClass::Grow => "grow",
            MotionClass::Shrink => "shrink",
            MotionClass::Blink => "blink",
            MotionClass::Static => "static",
        }
    }

    pub fn parse(s: &str) -> Result<MotionClass, DataError> {
        MotionClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| invalid(format!("unknown motion class '{s}'")))
    }
}

/// Axis-aligned sprite bounds in pixel coordinates, clamped to the canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl BBox {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn area(&self) -> f32 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    fn clamped(x0: f32, y0: f32, x1: f32, y1: f32, canvas: usize) -> BBox {
        let hi = canvas as f32;
        BBox {
            x0: x0.clamp(0.0, hi),
            y0: y0.clamp(0.0, hi),
            x1: x1.clamp(0.0, hi),
            y1: y1.clamp(0.0, hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Classes to generate; a sample's label is its class position here.
    pub classes: Vec<MotionClass>,
    pub samples_per_class: usize,
    /// Square canvas side in pixels.
    pub canvas: usize,
    /// Frames per clip.
    pub t_raw: usize,
    /// Amplitude of the per-sample static noise field.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: MotionClass::MOTION.to_vec(),
            samples_per_class: 50,
            canvas: 64,
            t_raw: 16,
            noise: 0.02,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    /// Corpus used by the distillation experiment: small canvas and clip
    /// length keep one epoch in the seconds range on a single core.
    pub fn desk() -> Self {
        SyntheticSpec {
            samples_per_class: 30,
            canvas: 40,
            t_raw: 10,
            seed: 11,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes.is_empty() {
            return Err(invalid("no classes requested"));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].contains(c) {
                return Err(invalid(format!("duplicate class '{}'", c.name())));
            }
        }
        if self.samples_per_class == 0 {
            return Err(invalid("samples_per_class must be at least 1"));
        }
        if self.canvas < 8 {
            return Err(invalid("canvas must be at least 8 pixels"));
        }
        if self.t_raw < 2 {
            return Err(invalid("need at least 2 frames"));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(invalid("noise amplitude must be in [0, 0.5]"));
        }
        Ok(())
    }

    /// Per-class train count of the 70/30 split.
    pub fn train_per_class(&self) -> usize {
        self.samples_per_class * 7 / 10
    }
}

/// Scene state shared by all programs; each interprets the same draws.
struct Scene {
    cx: f32,
    cy: f32,
    r: f32,
    color: [f32; 3],
    bg: [f32; 3],
    angle: f32,
    rate: f32,
    noise: Vec<f32>,
}

impl Scene {
    /// Draw order is fixed; changing it changes every corpus.
    fn draw(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Scene {
        let side = spec.canvas as f32;
        let cx = rng.gen_range(0.3..=0.7) * side;
        let cy = rng.gen_range(0.3..=0.7) * side;
        let r = rng.gen_range(0.10..=0.18) * side;
        let color = [
            rng.gen_range(0.4..=1.0),
            rng.gen_range(0.4..=1.0),
            rng.gen_range(0.4..=1.0),
        ];
        let bg = [
            rng.gen_range(0.0..=0.2),
            rng.gen_range(0.0..=0.2),
            rng.gen_range(0.0..=0.2),
        ];
        let angle = rng.gen_range(0.0..=std::f32::consts::TAU);
        let rate = rng.gen_range(0.5..=1.0);
        let n = spec.canvas * spec.canvas * 3;
        let amp = spec.noise;
        let noise = (0..n).map(|_| rng.gen_range(-amp..=amp)).collect();
        Scene { cx, cy, r, color, bg, angle, rate, noise }
    }
}

/// Sprite pose at one frame. `None` means the sprite is hidden.
struct Pose {
    cx: f32,
    cy: f32,
    /// Long and short radii; equal for a disc.
    a: f32,
    b: f32,
    angle: f32,
}

fn pose_at(class: MotionClass, scene: &Scene, canvas: usize, t: usize, t_raw: usize) -> Option<Pose> {
    let u = if t_raw > 1 { t as f32 / (t_raw - 1) as f32 } else { 0.0 };
    let travel = 0.35 * canvas as f32 * scene.rate * u;
    let disc = |cx: f32, cy: f32, r: f32| Pose { cx, cy, a: r, b: r, angle: 0.0 };
    match class {
        MotionClass::TranslateLeft => Some(disc(scene.cx - travel, scene.cy, scene.r)),
        MotionClass::TranslateRight => Some(disc(scene.cx + travel, scene.cy, scene.r)),
        MotionClass::TranslateUp => Some(disc(scene.cx, scene.cy - travel, scene.r)),
        MotionClass::TranslateDown => Some(disc(scene.cx, scene.cy + travel, scene.r)),
        MotionClass::Rotate => Some(Pose {
            cx: scene.cx,
            cy: scene.cy,
            a: 1.7 * scene.r,
            b: 0.5 * scene.r,
            angle: scene.angle + scene.rate * std::f32::consts::PI * u,
        }),
        MotionClass::Grow => Some(disc(scene.cx, scene.cy, scene.r * (1.0 + scene.rate * u))),
        MotionClass::Shrink => Some(disc(scene.cx, scene.cy, scene.r * (1.0 - 0.7 * scene.rate * u))),
        MotionClass::Blink => (t % 2 == 0).then(|| disc(scene.cx, scene.cy, scene.r)),
        MotionClass::Static => Some(disc(scene.cx, scene.cy, scene.r)),
    }
}

fn bbox_of(pose: &Pose, canvas: usize) -> BBox {
    let (sin, cos) = pose.angle.sin_cos();
    let hx = ((pose.a * cos).powi(2) + (pose.b * sin).powi(2)).sqrt();
    let hy = ((pose.a * sin).powi(2) + (pose.b * cos).powi(2)).sqrt();
    BBox::clamped(pose.cx - hx, pose.cy - hy, pose.cx + hx, pose.cy + hy, canvas)
}

const EDGE_SOFTNESS: f32 = 1.2;

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn render_frame(scene: &Scene, pose: Option<&Pose>, canvas: usize, out: &mut Vec<f32>) {
    let (sin, cos) = pose.map_or((0.0, 1.0), |p| p.angle.sin_cos());
    for y in 0..canvas {
        for x in 0..canvas {
            let alpha = match pose {
                None => 0.0,
                Some(p) => {
                    let dx = x as f32 + 0.5 - p.cx;
                    let dy = y as f32 + 0.5 - p.cy;
                    let xr = dx * cos + dy * sin;
                    let yr = -dx * sin + dy * cos;
                    let d = ((xr / p.a).powi(2) + (yr / p.b).powi(2)).sqrt();
                    sigmoid((1.0 - d) * p.b / EDGE_SOFTNESS)
                }
            };
            let base = (y * canvas + x) * 3;
            for c in 0..3 {
                let v = scene.bg[c] + alpha * (scene.color[c] - scene.bg[c]) + scene.noise[base + c];
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
}

/// One rendered sample with its per-frame sprite bounds and split assignment.
pub struct SynthSample {
    pub sample: VideoSample,
    pub boxes: Vec<Option<BBox>>,
    pub split: Split,
}

fn render_sample(
    spec: &SyntheticSpec,
    class: MotionClass,
    label: usize,
    id: String,
    rng: &mut ChaCha8Rng,
) -> Result<(VideoSample, Vec<Option<BBox>>), DataError> {
    let scene = Scene::draw(spec, rng);
    let mut data = Vec::with_capacity(spec.t_raw * spec.canvas * spec.canvas * 3);
    let mut boxes = Vec::with_capacity(spec.t_raw);
    for t in 0..spec.t_raw {
        let pose = pose_at(class, &scene, spec.canvas, t, spec.t_raw);
        render_frame(&scene, pose.as_ref(), spec.canvas, &mut data);
        boxes.push(pose.as_ref().map(|p| bbox_of(p, spec.canvas)));
    }
    let frames = Tensor::new(vec![spec.t_raw, spec.canvas, spec.canvas, 3], data)
        .map_err(|e| invalid(e.to_string()))?;
    let sample = VideoSample { id, frames, label };
    sample.validate()?;
    Ok((sample, boxes))
}

/// Split assignment per class: a seeded shuffle of the sample indices, first
/// 70 percent train. Independent of generation order.
fn split_assignments(spec: &SyntheticSpec, class_idx: usize) -> Vec<Split> {
    let n = spec.samples_per_class;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX - class_idx as u64);
    order.shuffle(&mut rng);
    let train_n = spec.train_per_class();
    let mut splits = vec![Split::Val; n];
    for &i in &order[..train_n] {
        splits[i] = Split::Train;
    }
    splits
}

/// Renders the whole corpus in class-major, index-minor order. Each sample
/// gets its own rng stream, so the corpus is a pure function of the spec.
pub fn generate_in_memory(spec: &SyntheticSpec) -> Result<Vec<SynthSample>, DataError> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.classes.len() * spec.samples_per_class);
    for (label, &class) in spec.classes.iter().enumerate() {
        let splits = split_assignments(spec, label);
        for i in 0..spec.samples_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(((label as u64) << 32) | i as u64);
            let id = format!("{}_{i:04}", class.name());
            let (sample, boxes) = render_sample(spec, class, label, id, &mut rng)?;
            out.push(SynthSample { sample, boxes, split: splits[i] });
        }
    }
    Ok(out)
}

/// First `per_class` pairs of each label, keeping the input order. For
/// data-starved runs on a slice of the corpus.
pub fn balanced_subset(
    pairs: &[(Tensor<f32>, usize)],
    per_class: usize,
) -> Vec<(Tensor<f32>, usize)> {
    let mut taken: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    let mut out = Vec::new();
    for (frames, label) in pairs {
        let seen = taken.entry(*label).or_insert(0);
        if *seen < per_class {
            *seen += 1;
            out.push((frames.clone(), *label));
        }
    }
    out
}

/// Train/val (frames, label) pairs, ready for the loops.
pub fn split_sets(
    samples: &[SynthSample],
) -> (Vec<(Tensor<f32>, usize)>, Vec<(Tensor<f32>, usize)>) {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for s in samples {
        let pair = (s.sample.frames.clone(), s.sample.label);
        match s.split {
            Split::Train => train.push(pair),
            Split::Val => val.push(pair),
        }
    }
    (train, val)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSummary {
    pub classes: Vec<String>,
    pub n_train: usize,
    pub n_val: usize,
    /// Hex digest over the index and every video file, in index order.
    pub checksum: String,
}

/// Writes videos/{id}.vtr plus index.tsv under `dir` and returns counts and a
/// content checksum.
pub fn generate_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<CorpusSummary, DataError> {
    let samples = generate_in_memory(spec)?;
    fs::create_dir_all(dir.join("videos"))?;
    let mut index = String::new();
    let mut hasher = Sha256::new();
    let (mut n_train, mut n_val) = (0, 0);
    let mut encoded = Vec::with_capacity(samples.len());
    for s in &samples {
        let rel = format!("videos/{}.vtr", s.sample.id);
        let bytes = vtr::encode_bytes(&s.sample)?;
        match s.split {
            Split::Train => n_train += 1,
            Split::Val => n_val += 1,
        }
        let _ = writeln!(index, "{}\t{rel}\t{}\t{}", s.sample.id, s.sample.label, s.split.as_str());
        encoded.push((rel, bytes));
    }
    hasher.update(index.as_bytes());
    for (rel, bytes) in &encoded {
        hasher.update(bytes);
        fs::write(dir.join(rel), bytes)?;
    }
    fs::write(dir.join("index.tsv"), index.as_bytes())?;
    let checksum = hasher
        .finalize()
        .iter()
        .fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        });
    Ok(CorpusSummary {
        classes: spec.classes.iter().map(|c| c.name().to_string()).collect(),
        n_train,
        n_val,
        checksum,
    })
}

/// Loads every sample listed in an index file into memory.
pub fn load_corpus(dir: &Path) -> Result<Vec<(IndexEntry, VideoSample)>, DataError> {
    let entries = super::load_index(dir)?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let (frames, label) = vtr::decode(&dir.join(&e.path))?;
        if label != e.label {
            return Err(invalid(format!(
                "label mismatch for '{}': index {} vs file {}",
                e.id, e.label, label
            )));
        }
        out.push((e.clone(), VideoSample { id: e.id, frames, label }));
    }
    Ok(out)
}
