//! Clip sampling and crop geometry. Frame indices clamp rather than error on
//! short videos; crops are drawn once per clip and applied to every frame.

use super::{invalid, DataError};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingSpec {
    /// Frames per clip.
    pub frames: usize,
    /// Temporal stride; None picks floor(T_raw / frames), at least 1.
    pub stride: Option<usize>,
    pub mode: SampleMode,
}

impl SamplingSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.frames == 0 || self.stride == Some(0) {
            return Err(invalid("frames and stride must be at least 1"));
        }
        Ok(())
    }
}

pub fn effective_stride(t_raw: usize, frames: usize, stride: Option<usize>) -> usize {
    stride.unwrap_or_else(|| (t_raw / frames).max(1))
}

fn clamped_indices(t_raw: usize, start: usize, frames: usize, stride: usize) -> Vec<usize> {
    (0..frames).map(|i| (start + i * stride).min(t_raw - 1)).collect()
}

/// Centered start, truncating toward zero when the clip overshoots.
pub fn eval_frame_indices(t_raw: usize, frames: usize, stride: Option<usize>) -> Vec<usize> {
    let stride = effective_stride(t_raw, frames, stride);
    let start = (t_raw as isize - (frames * stride) as isize).max(0) as usize / 2;
    clamped_indices(t_raw, start, frames, stride)
}

/// Uniformly random start among those keeping the clip in range.
pub fn train_frame_indices(
    t_raw: usize,
    frames: usize,
    stride: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let stride = effective_stride(t_raw, frames, stride);
    let span = (frames - 1) * stride;
    let max_start = t_raw.saturating_sub(span + 1);
    let start = if max_start == 0 { 0 } else { rng.gen_range(0..=max_start) };
    clamped_indices(t_raw, start, frames, stride)
}

pub fn sample_frames(
    t_raw: usize,
    spec: &SamplingSpec,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<usize>, DataError> {
    spec.validate()?;
    if t_raw == 0 {
        return Err(invalid("empty video"));
    }
    match spec.mode {
        SampleMode::Eval => Ok(eval_frame_indices(t_raw, spec.frames, spec.stride)),
        SampleMode::Train => {
            let rng = rng.ok_or_else(|| invalid("train sampling needs an rng"))?;
            Ok(train_frame_indices(t_raw, spec.frames, spec.stride, rng))
        }
    }
}

/// Copies the listed frames into a clip tensor.
pub fn gather_frames(frames: &Tensor<f32>, indices: &[usize]) -> Result<Tensor<f32>, DataError> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(invalid("expected (T, H, W, C) frames"));
    }
    let per = s[1] * s[2] * s[3];
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        if i >= s[0] {
            return Err(invalid(format!("frame index {i} out of range {}", s[0])));
        }
        data.extend_from_slice(&frames.data()[i * per..(i + 1) * per]);
    }
    Tensor::new(vec![indices.len(), s[1], s[2], s[3]], data).map_err(|e| invalid(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

/// Random-resized-crop window: area fraction in [0.08, 1], aspect ratio
/// log-uniform in [3/4, 4/3], ten attempts, then a centered square fallback.
pub fn draw_train_crop(h: usize, w: usize, rng: &mut ChaCha8Rng) -> CropRect {
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target_area = area * rng.gen_range(0.08..=1.0);
        let log_aspect = rng.gen_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln());
        let aspect = log_aspect.exp();
        let cw = (target_area * aspect).sqrt().round() as usize;
        let ch = (target_area / aspect).sqrt().round() as usize;
        if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
            let y = rng.gen_range(0..=(h - ch));
            let x = rng.gen_range(0..=(w - cw));
            return CropRect { y, x, h: ch, w: cw };
        }
    }
    let side = h.min(w);
    CropRect { y: (h - side) / 2, x: (w - side) / 2, h: side, w: side }
}

pub fn crop_frames(frames: &Tensor<f32>, rect: CropRect) -> Result<Tensor<f32>, DataError> {
    let s = frames.shape();
    if s.len() != 4 || rect.y + rect.h > s[1] || rect.x + rect.w > s[2] || rect.h == 0 || rect.w == 0 {
        return Err(invalid(format!("crop {rect:?} outside frames {s:?}")));
    }
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    let _ = h;
    let mut data = Vec::with_capacity(t * rect.h * rect.w * c);
    for it in 0..t {
        for iy in rect.y..rect.y + rect.h {
            let row = ((it * s[1] + iy) * w + rect.x) * c;
            data.extend_from_slice(&frames.data()[row..row + rect.w * c]);
        }
    }
    Tensor::new(vec![t, rect.h, rect.w, c], data).map_err(|e| invalid(e.to_string()))
}

/// Per-frame bilinear resample with half-pixel centers, edges clamped.
pub fn resize_bilinear(frames: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let s = frames.shape();
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    if h == oh && w == ow {
        return frames.clone();
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let src = frames.data();
    let mut data = vec![0.0f32; t * oh * ow * c];
    let coord = |i: usize, scale: f64, limit: usize| -> (usize, usize, f32) {
        let p = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (limit - 1) as f64);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(limit - 1);
        (lo, hi, (p - lo as f64) as f32)
    };
    for it in 0..t {
        for oy in 0..oh {
            let (y0, y1, fy) = coord(oy, sy, h);
            for ox in 0..ow {
                let (x0, x1, fx) = coord(ox, sx, w);
                let at = |y: usize, x: usize| ((it * h + y) * w + x) * c;
                let (a, b, d, e) = (at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1));
                let out = ((it * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    let top = src[a + ch] * (1.0 - fx) + src[b + ch] * fx;
                    let bot = src[d + ch] * (1.0 - fx) + src[e + ch] * fx;
                    data[out + ch] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    Tensor::new(vec![t, oh, ow, c], data).unwrap()
}

/// Scales so the shorter side equals `target`, preserving aspect ratio.
pub fn shorter_side_resize(frames: &Tensor<f32>, target: usize) -> Tensor<f32> {
    let s = frames.shape();
    let (h, w) = (s[1], s[2]);
    if h <= w {
        let ow = ((w as f64 * target as f64 / h as f64).round() as usize).max(target);
        resize_bilinear(frames, target, ow)
    } else {
        let oh = ((h as f64 * target as f64 / w as f64).round() as usize).max(target);
        resize_bilinear(frames, oh, target)
    }
}

/// Random-resized crop in train mode; shorter-side resize plus center crop in
/// eval mode. The same window applies to every frame; output is target².
pub fn spatial_crop(
    frames: &Tensor<f32>,
    target: usize,
    mode: SampleMode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor<f32>, DataError> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(invalid("expected (T, H, W, C) frames"));
    }
    if target == 0 || s[1] < 2 || s[2] < 2 {
        return Err(invalid(format!("degenerate crop: source {s:?}, target {target}")));
    }
    match mode {
        SampleMode::Train => {
            let rng = rng.ok_or_else(|| invalid("train crop needs an rng"))?;
            let rect = draw_train_crop(s[1], s[2], rng);
            let cropped = crop_frames(frames, rect)?;
            Ok(resize_bilinear(&cropped, target, target))
        }
        SampleMode::Eval => {
            if s[1] == target && s[2] == target {
                return Ok(frames.clone());
            }
            let resized = shorter_side_resize(frames, target);
            let rs = resized.shape();
            let rect = CropRect {
                y: (rs[1] - target) / 2,
                x: (rs[2] - target) / 2,
                h: target,
                w: target,
            };
            crop_frames(&resized, rect)
        }
    }
}

/// Clip start indices for multi-view eval: one centered clip, or n uniform
/// starts from 0 to the last in-range position.
pub fn clip_starts(t_raw: usize, frames: usize, stride: usize, n_clips: usize) -> Vec<usize> {
    if n_clips <= 1 {
        let start = (t_raw as isize - (frames * stride) as isize).max(0) as usize / 2;
        return vec![start];
    }
    let span = (frames - 1) * stride;
    let max_start = t_raw.saturating_sub(span + 1);
    (0..n_clips)
        .map(|i| ((i as f64) * max_start as f64 / (n_clips - 1) as f64).round() as usize)
        .collect()
}

/// Crop windows along the longer side of the resized frames: centered when
/// n = 1, else evenly spaced from one edge to the other.
pub fn crop_offsets(rh: usize, rw: usize, target: usize, n_crops: usize) -> Vec<CropRect> {
    let (horizontal, room) = if rw >= rh { (true, rw - target) } else { (false, rh - target) };
    let offsets: Vec<usize> = if n_crops <= 1 {
        vec![room / 2]
    } else {
        (0..n_crops)
            .map(|i| ((i as f64) * room as f64 / (n_crops - 1) as f64).round() as usize)
            .collect()
    };
    offsets
        .into_iter()
        .map(|o| {
            if horizontal {
                CropRect { y: (rh - target) / 2, x: o, h: target, w: target }
            } else {
                CropRect { y: o, x: (rw - target) / 2, h: target, w: target }
            }
        })
        .collect()
}

/// The n_clips × n_crops eval views, clip-major order. (1, 1) is exactly the
/// single eval view.
pub fn multi_crop_views(
    video: &Tensor<f32>,
    frames: usize,
    stride: Option<usize>,
    target: usize,
    n_clips: usize,
    n_crops: usize,
) -> Result<Vec<Tensor<f32>>, DataError> {
    if n_clips == 0 || n_crops == 0 {
        return Err(invalid("need at least one clip and one crop"));
    }
    let s = video.shape();
    if s.len() != 4 || s[0] == 0 {
        return Err(invalid("expected non-empty (T, H, W, C) video"));
    }
    let t_raw = s[0];
    let stride = effective_stride(t_raw, frames, stride);
    let resized = if s[1] == target && s[2] == target {
        video.clone()
    } else {
        shorter_side_resize(video, target)
    };
    let rs = resized.shape().to_vec();
    let rects = crop_offsets(rs[1], rs[2], target, n_crops);
    let mut views = Vec::with_capacity(n_clips * n_crops);
    for start in clip_starts(t_raw, frames, stride, n_clips) {
        let indices: Vec<usize> = (0..frames).map(|i| (start + i * stride).min(t_raw - 1)).collect();
        let clip = gather_frames(&resized, &indices)?;
        for rect in &rects {
            views.push(crop_frames(&clip, *rect)?);
        }
    }
    Ok(views)
}

/// The canonical single eval view of a video.
pub fn eval_view(
    video: &Tensor<f32>,
    frames: usize,
    stride: Option<usize>,
    target: usize,
) -> Result<Tensor<f32>, DataError> {
    Ok(multi_crop_views(video, frames, stride, target, 1, 1)?.pop().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn gradient_video(t: usize, h: usize, w: usize) -> Tensor<f32> {
        let mut data = Vec::with_capacity(t * h * w * 3);
        for it in 0..t {
            for iy in 0..h {
                for ix in 0..w {
                    for c in 0..3 {
                        data.push(
                            (it * 31 + iy * 7 + ix * 3 + c) as f32 % 17.0 / 17.0,
                        );
                    }
                }
            }
        }
        Tensor::new(vec![t, h, w, 3], data).unwrap()
    }

    #[test]
    fn eval_indices_exact_fit_and_clamped() {
        assert_eq!(
            eval_frame_indices(64, 8, Some(8)),
            vec![0, 8, 16, 24, 32, 40, 48, 56]
        );
        assert_eq!(eval_frame_indices(4, 8, Some(1)), vec![0, 1, 2, 3, 3, 3, 3, 3]);
        // default stride spans the video: 16 frames, 8 per clip -> stride 2
        assert_eq!(eval_frame_indices(16, 8, None), vec![0, 2, 4, 6, 8, 10, 12, 14]);
    }

    #[test]
    fn train_indices_reproducible_and_in_range() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(
            train_frame_indices(30, 8, Some(2), &mut a),
            train_frame_indices(30, 8, Some(2), &mut b)
        );
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let idx = train_frame_indices(10, 8, Some(2), &mut rng);
            assert!(idx.iter().all(|&i| i < 10));
        }
    }

    #[test]
    fn eval_crop_identity_when_already_target() {
        let v = gradient_video(2, 16, 16);
        let out = spatial_crop(&v, 16, SampleMode::Eval, None).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn constant_source_stays_constant() {
        let v = Tensor::full(vec![2, 20, 30, 3], 0.42f32).unwrap();
        let e = spatial_crop(&v, 8, SampleMode::Eval, None).unwrap();
        assert!(e.data().iter().all(|&x| (x - 0.42).abs() < 1e-6));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = spatial_crop(&v, 8, SampleMode::Train, Some(&mut rng)).unwrap();
        assert!(t.data().iter().all(|&x| (x - 0.42).abs() < 1e-6));
    }

    #[test]
    fn train_crop_window_is_reproducible() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(draw_train_crop(48, 64, &mut a), draw_train_crop(48, 64, &mut b));
        let v = gradient_video(2, 48, 64);
        let mut a = ChaCha8Rng::seed_from_u64(10);
        let mut b = ChaCha8Rng::seed_from_u64(10);
        let ca = spatial_crop(&v, 16, SampleMode::Train, Some(&mut a)).unwrap();
        let cb = spatial_crop(&v, 16, SampleMode::Train, Some(&mut b)).unwrap();
        assert_eq!(ca.data(), cb.data());
    }

    #[test]
    fn resize_bilinear_known_values() {
        // one row [0, 1] widened to 4 columns with half-pixel centers
        let v = Tensor::new(vec![1, 1, 2, 1], vec![0.0f32, 1.0]).unwrap();
        let r = resize_bilinear(&v, 1, 4);
        let want = [0.0, 0.25, 0.75, 1.0];
        for (got, want) in r.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-6, "{:?}", r.data());
        }
    }

    #[test]
    fn twelve_views_and_square_crop_coincidence() {
        let v = gradient_video(16, 32, 48);
        let views = multi_crop_views(&v, 8, None, 24, 4, 3).unwrap();
        assert_eq!(views.len(), 12);
        for view in &views {
            assert_eq!(view.shape(), &[8, 24, 24, 3]);
        }
        // square source: the three crops of each clip coincide
        let sq = gradient_video(16, 40, 40);
        let views = multi_crop_views(&sq, 8, None, 24, 1, 3).unwrap();
        assert_eq!(views[0].data(), views[1].data());
        assert_eq!(views[1].data(), views[2].data());
    }

    #[test]
    fn single_view_is_the_eval_pipeline() {
        let v = gradient_video(20, 36, 50);
        let a = eval_view(&v, 8, None, 24).unwrap();
        // by hand: resize whole video, center crop, centered clip
        let idx = eval_frame_indices(20, 8, None);
        let resized = shorter_side_resize(&v, 24);
        let clip = gather_frames(&resized, &idx).unwrap();
        let rs = resized.shape();
        let rect = CropRect { y: 0, x: (rs[2] - 24) / 2, h: 24, w: 24 };
        let b = crop_frames(&clip, rect).unwrap();
        assert_eq!(a.data(), b.data());
    }

    proptest! {
        #[test]
        fn crops_are_always_target_sized(
            h in 4usize..40,
            w in 4usize..40,
            target in 2usize..24,
            seed in 0u64..50,
        ) {
            let v = Tensor::full(vec![2, h, w, 3], 0.5f32).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = spatial_crop(&v, target, SampleMode::Train, Some(&mut rng)).unwrap();
            prop_assert_eq!(t.shape(), &[2, target, target, 3]);
            let e = spatial_crop(&v, target, SampleMode::Eval, None).unwrap();
            prop_assert_eq!(e.shape(), &[2, target, target, 3]);
        }

        #[test]
        fn sampled_indices_never_escape(
            t_raw in 1usize..40,
            frames in 1usize..12,
            stride in proptest::option::of(1usize..6),
            seed in 0u64..20,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = SamplingSpec { frames, stride, mode: SampleMode::Train };
            let idx = sample_frames(t_raw, &spec, Some(&mut rng)).unwrap();
            prop_assert!(idx.iter().all(|&i| i < t_raw));
            let spec = SamplingSpec { frames, stride, mode: SampleMode::Eval };
            let idx = sample_frames(t_raw, &spec, None).unwrap();
            prop_assert!(idx.iter().all(|&i| i < t_raw));
        }
    }
}
