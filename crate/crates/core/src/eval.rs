//! Validation-side machinery: top-k accuracy, multi-view inference with
//! probability averaging, and modulator magnitude maps exported as PGM images.

use crate::data::{sampling, DataError};
use crate::distill::soften;
use crate::network::{BlockRef, Model};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor, TensorError};
use rayon::prelude::*;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("eval io: {0}")]
    Io(#[from] std::io::Error),
}

/// How a raw video becomes model inputs at eval time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewSpec {
    /// Frames per clip.
    pub frames: usize,
    /// Temporal stride; None spans the video.
    pub stride: Option<usize>,
    /// Square input side after crop.
    pub target: usize,
    pub n_clips: usize,
    pub n_crops: usize,
}

impl ViewSpec {
    pub fn single(frames: usize, target: usize) -> Self {
        ViewSpec { frames, stride: None, target, n_clips: 1, n_crops: 1 }
    }

    pub fn views(&self) -> usize {
        self.n_clips * self.n_crops
    }
}

/// True when `label` ranks inside the top k. Ties break toward the lower
/// class index, which therefore wins over an equal-scored higher index.
pub fn top_k_hit(scores: &[f32], label: usize, k: usize) -> bool {
    let s = scores[label];
    let better = scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > s || (v == s && i < label))
        .count();
    better < k
}

/// Mean top-k over rows of `scores`, laid out sample-major.
pub fn top_k_accuracy(
    scores: &[f32],
    n_classes: usize,
    labels: &[usize],
    k: usize,
) -> Result<f64, TensorError> {
    if n_classes == 0 || k == 0 || scores.len() != labels.len() * n_classes {
        return Err(TensorError::invalid(
            "top_k",
            format!("{} scores, {} labels, {n_classes} classes", scores.len(), labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(TensorError::invalid("top_k", "no samples"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(TensorError::invalid("top_k", format!("label {bad} out of range")));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| top_k_hit(&scores[i * n_classes..(i + 1) * n_classes], l, k))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Logits of one prepared view, run without stochastic depth.
pub fn view_logits(
    model: &Model,
    store: &ParamStore<f32>,
    view: &Tensor<f32>,
) -> Result<Vec<f32>, TensorError> {
    let mut tape = Tape::new();
    let x = tape.constant(view.clone());
    let logits = model.forward(&mut tape, store, x, None)?;
    Ok(tape.value(logits).data().to_vec())
}

/// Class probabilities averaged over all views of one video. A single view
/// reproduces that view's softmax bit for bit.
pub fn multi_view_probs(
    model: &Model,
    store: &ParamStore<f32>,
    video: &Tensor<f32>,
    spec: &ViewSpec,
) -> Result<Vec<f64>, EvalError> {
    let views = sampling::multi_crop_views(
        video,
        spec.frames,
        spec.stride,
        spec.target,
        spec.n_clips,
        spec.n_crops,
    )?;
    let mut acc = vec![0.0f64; model.cfg.num_classes];
    for view in &views {
        let logits: Vec<f64> =
            view_logits(model, store, view)?.iter().map(|&x| x as f64).collect();
        let p = soften(&logits, 1.0)?;
        for (a, b) in acc.iter_mut().zip(p) {
            *a += b;
        }
    }
    if views.len() > 1 {
        let n = views.len() as f64;
        for a in acc.iter_mut() {
            *a /= n;
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    pub per_class_top1: Vec<f64>,
    pub per_class_counts: Vec<usize>,
    pub n_samples: usize,
    pub views_per_sample: usize,
}

/// Scores every sample with multi-view inference. Top-5 falls back to
/// top-min(5, classes) for tiny label spaces.
pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[(Tensor<f32>, usize)],
    spec: &ViewSpec,
) -> Result<EvalReport, EvalError> {
    let n_classes = model.cfg.num_classes;
    if samples.is_empty() {
        return Err(EvalError::Data(DataError::Invalid("no samples to evaluate".into())));
    }
    if let Some((_, bad)) = samples.iter().find(|(_, l)| *l >= n_classes) {
        return Err(EvalError::Data(DataError::Invalid(format!(
            "label {bad} out of range for {n_classes} classes"
        ))));
    }
    let probs: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|(video, _)| multi_view_probs(model, store, video, spec))
        .collect::<Result<_, _>>()?;
    let k5 = n_classes.min(5);
    let (mut hit1, mut hit5) = (0usize, 0usize);
    let mut class_hits = vec![0usize; n_classes];
    let mut class_counts = vec![0usize; n_classes];
    for ((_, label), p) in samples.iter().zip(&probs) {
        let row: Vec<f32> = p.iter().map(|&x| x as f32).collect();
        let t1 = top_k_hit(&row, *label, 1);
        hit1 += t1 as usize;
        hit5 += top_k_hit(&row, *label, k5) as usize;
        class_hits[*label] += t1 as usize;
        class_counts[*label] += 1;
    }
    let n = samples.len();
    Ok(EvalReport {
        top1: hit1 as f64 / n as f64,
        top5: hit5 as f64 / n as f64,
        per_class_top1: class_hits
            .iter()
            .zip(&class_counts)
            .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
            .collect(),
        per_class_counts: class_counts,
        n_samples: n,
        views_per_sample: spec.views(),
    })
}

/// Channel-collapsed modulator magnitudes of one block on one view.
#[derive(Debug, Clone)]
pub struct ModulatorMaps {
    pub block: BlockRef,
    /// Per-frame spatial map (grid height, grid width), L2 over channels.
    pub spatial: Vec<Tensor<f32>>,
    /// Per-frame scalar, L2 over positions and channels.
    pub temporal: Vec<f32>,
}

impl ModulatorMaps {
    /// Grid position of the strongest spatial response in one frame.
    pub fn spatial_argmax(&self, frame: usize) -> (usize, usize) {
        let map = &self.spatial[frame];
        let (h, w) = (map.shape()[0], map.shape()[1]);
        let mut best = (0, 0);
        let mut best_v = f32::NEG_INFINITY;
        for y in 0..h {
            for x in 0..w {
                let v = map.data()[y * w + x];
                if v > best_v {
                    best_v = v;
                    best = (y, x);
                }
            }
        }
        best
    }
}

pub fn modulator_maps(
    model: &Model,
    store: &ParamStore<f32>,
    view: &Tensor<f32>,
    block: BlockRef,
) -> Result<ModulatorMaps, TensorError> {
    let mut tape = Tape::new();
    let x = tape.constant(view.clone());
    let detail = model.forward_detailed(&mut tape, store, x, None, Some(block))?;
    let mods = detail
        .modulators
        .ok_or_else(|| TensorError::invalid("modulators", "block was not captured"))?;
    let collapse = |val: crate::tensor::Val| -> (Vec<Tensor<f32>>, Vec<f32>) {
        let m = tape.value(val);
        let s = m.shape();
        let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
        let mut frames = Vec::with_capacity(t);
        let mut scalars = Vec::with_capacity(t);
        for it in 0..t {
            let mut map = vec![0.0f32; h * w];
            let mut total = 0.0f64;
            for p in 0..h * w {
                let base = (it * h * w + p) * c;
                let sq: f64 = m.data()[base..base + c].iter().map(|&v| (v as f64).powi(2)).sum();
                map[p] = (sq as f32).sqrt();
                total += sq;
            }
            frames.push(Tensor::new(vec![h, w], map).unwrap());
            scalars.push((total as f32).sqrt());
        }
        (frames, scalars)
    };
    let (spatial, _) = collapse(mods.spatial);
    let (_, temporal) = collapse(mods.temporal);
    Ok(ModulatorMaps { block, spatial, temporal })
}

/// Min-max normalization to the full byte range; constant input maps to zero.
pub fn normalize_to_bytes(vals: &[f32]) -> Vec<u8> {
    let lo = vals.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi - lo).is_finite() || hi - lo < 1e-12 {
        return vec![0; vals.len()];
    }
    vals.iter().map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Binary PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<(), EvalError> {
    if pixels.len() != width * height || width == 0 || height == 0 {
        return Err(EvalError::Data(DataError::Invalid(format!(
            "pgm {width}x{height} needs {} pixels, got {}",
            width * height,
            pixels.len()
        ))));
    }
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), EvalError> {
    let buf = std::fs::read(path)?;
    let bad = |msg: &str| EvalError::Data(DataError::Format(format!("{}: {msg}", path.display())));
    // header: three whitespace-separated tokens after P5, # starts a comment
    let mut pos = 0usize;
    let mut token = || -> Result<String, EvalError> {
        while pos < buf.len() {
            if buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else if buf[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(EvalError::Data(DataError::Format("truncated pgm header".into())));
        }
        Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(bad("not a P5 pgm"));
    }
    let width: usize = token()?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = token()?.parse().map_err(|_| bad("bad height"))?;
    if token()? != "255" {
        return Err(bad("unsupported maxval"));
    }
    pos += 1; // the single whitespace byte after maxval
    let need = width.checked_mul(height).ok_or_else(|| bad("dimension overflow"))?;
    if buf.len() < pos || buf.len() - pos != need {
        return Err(bad("pixel payload does not match dimensions"));
    }
    Ok((width, height, buf[pos..].to_vec()))
}

/// How raw pixel coordinates land in the eval view: scale of the
/// shorter-side resize, then the center-crop offsets to subtract.
pub fn raw_to_view(raw_h: usize, raw_w: usize, target: usize) -> (f64, f64, f64) {
    if raw_h == target && raw_w == target {
        return (1.0, 0.0, 0.0);
    }
    let (scale, rh, rw) = if raw_h <= raw_w {
        let s = target as f64 / raw_h as f64;
        let rw = ((raw_w as f64 * target as f64 / raw_h as f64).round() as usize).max(target);
        (s, target, rw)
    } else {
        let s = target as f64 / raw_w as f64;
        let rh = ((raw_h as f64 * target as f64 / raw_w as f64).round() as usize).max(target);
        (s, rh, target)
    };
    let oy = ((rh - target) / 2) as f64;
    let ox = ((rw - target) / 2) as f64;
    (scale, oy, ox)
}

/// Fraction of evaluated frames whose strongest spatial-modulator cell lies
/// inside the sprite's box, both mapped into view coordinates. Frames without
/// a box are skipped. Returns (hits, checked).
pub fn bbox_hit_rate(
    model: &Model,
    store: &ParamStore<f32>,
    items: &[(&Tensor<f32>, &[Option<crate::data::synth::BBox>])],
    spec: &ViewSpec,
    block: BlockRef,
) -> Result<(usize, usize), EvalError> {
    let (mut hits, mut checked) = (0usize, 0usize);
    for (video, boxes) in items {
        let s = video.shape();
        if boxes.len() != s[0] {
            return Err(EvalError::Data(DataError::Invalid(format!(
                "{} boxes for {} frames",
                boxes.len(),
                s[0]
            ))));
        }
        let idx = sampling::eval_frame_indices(s[0], spec.frames, spec.stride);
        let view = sampling::eval_view(video, spec.frames, spec.stride, spec.target)?;
        let maps = modulator_maps(model, store, &view, block)?;
        let (scale, oy, ox) = raw_to_view(s[1], s[2], spec.target);
        for (pos, &raw_frame) in idx.iter().enumerate() {
            let Some(b) = boxes[raw_frame] else { continue };
            let map = &maps.spatial[pos];
            let (gh, gw) = (map.shape()[0], map.shape()[1]);
            let (cell_h, cell_w) =
                (spec.target as f64 / gh as f64, spec.target as f64 / gw as f64);
            let (ay, ax) = maps.spatial_argmax(pos);
            let cy = (ay as f64 + 0.5) * cell_h;
            let cx = (ax as f64 + 0.5) * cell_w;
            let inside = cx >= b.x0 as f64 * scale - ox
                && cx <= b.x1 as f64 * scale - ox
                && cy >= b.y0 as f64 * scale - oy
                && cy <= b.y1 as f64 * scale - oy;
            checked += 1;
            hits += inside as usize;
        }
    }
    Ok((hits, checked))
}

/// Writes one spatial map per frame (`ms_f00.pgm`, ...) and the temporal
/// strip (`mt.pgm`, one row). Returns the written paths.
/// One CSV line under the training metrics header; the loss and schedule
/// columns stay zero since evaluation has neither.
pub fn report_csv(report: &EvalReport) -> String {
    format!(
        "{}\n0,0,0,0,0,0,{},{}\n",
        crate::train::METRICS_HEADER,
        report.top1,
        report.top5
    )
}

pub fn export_modulator_maps(
    model: &Model,
    store: &ParamStore<f32>,
    video: &Tensor<f32>,
    spec: &ViewSpec,
    block: BlockRef,
    dir: &Path,
) -> Result<Vec<PathBuf>, EvalError> {
    let view = sampling::eval_view(video, spec.frames, spec.stride, spec.target)?;
    let maps = modulator_maps(model, store, &view, block)?;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (t, map) in maps.spatial.iter().enumerate() {
        let (h, w) = (map.shape()[0], map.shape()[1]);
        let path = dir.join(format!("ms_f{t:02}.pgm"));
        write_pgm(&path, w, h, &normalize_to_bytes(map.data()))?;
        written.push(path);
    }
    let path = dir.join("mt.pgm");
    write_pgm(&path, maps.temporal.len(), 1, &normalize_to_bytes(&maps.temporal))?;
    written.push(path);
    Ok(written)
}
