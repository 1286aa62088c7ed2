//! Clip extraction, clip-mean images and region-of-interest masks.

use std::fs;
use std::path::Path;

use font8x8::{UnicodeFonts, BASIC_FONTS};
use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{Frame, HeatmapVideo};
use crate::intent::{IntentionSpan, Label, Verdict};

pub const DEFAULT_THRESHOLD_FRAC: f64 = 0.5;

// Products within this distance of an integer frame boundary snap to it.
const BOUNDARY_EPS: f64 = 1e-9;

/// A contiguous run of frames borrowed from a video.
#[derive(Debug, Clone, Copy)]
pub struct Clip<'a> {
    pub frames: &'a [Frame],
    pub first_frame: usize,
    pub t_start: f64,
    pub t_end: f64,
}

impl Clip<'_> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_range(&self) -> std::ops::Range<usize> {
        self.first_frame..self.first_frame + self.frames.len()
    }
}

/// Frames whose window `[k/fps, (k+1)/fps)` meets `[t_start, t_end)`.
///
/// Times are clamped to the video. An empty interval selects the single frame
/// containing that instant.
pub fn extract_clip(video: &HeatmapVideo, t_start: f64, t_end: f64) -> Result<Clip<'_>> {
    if !(t_start <= t_end) {
        return Err(Error::range(format!("clip start {t_start} is after end {t_end}")));
    }
    let count = video.frames.len();
    if count == 0 {
        return Err(Error::Data("video has no frames".into()));
    }
    let ts = t_start.clamp(0.0, video.duration);
    let te = t_end.clamp(0.0, video.duration);
    let last_frame = count - 1;
    let first = ((ts * video.fps + BOUNDARY_EPS).floor() as usize).min(last_frame);
    let last = if te > ts {
        ((te * video.fps - BOUNDARY_EPS).ceil() as usize)
            .saturating_sub(1)
            .clamp(first, last_frame)
    } else {
        first
    };
    Ok(Clip {
        frames: &video.frames[first..=last],
        first_frame: first,
        t_start: ts,
        t_end: te,
    })
}

/// Per-pixel, per-channel mean of the clip, rounded half-up once at the end.
pub fn mean_image(clip: &Clip<'_>) -> Result<Frame> {
    let head = clip
        .frames
        .first()
        .ok_or_else(|| Error::Invariant("mean of an empty clip".into()))?;
    if clip
        .frames
        .iter()
        .any(|f| (f.width, f.height, f.channels) != (head.width, head.height, head.channels))
    {
        return Err(Error::Data("clip frames differ in shape".into()));
    }
    let mut sums = vec![0u64; head.pixels.len()];
    for frame in clip.frames {
        for (s, &v) in sums.iter_mut().zip(&frame.pixels) {
            *s += v as u64;
        }
    }
    let n = clip.frames.len() as u64;
    let pixels = sums.iter().map(|&s| ((2 * s + n) / (2 * n)) as u8).collect();
    Frame::new(
        head.width,
        head.height,
        head.channels,
        pixels,
        (clip.t_start + clip.t_end) / 2.0,
    )
}

/// Pixel rectangle `[x0, x1) x [y0, y1)`; all zero when empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub const EMPTY: BBox = BBox {
        x0: 0,
        y0: 0,
        x1: 0,
        y1: 0,
    };

    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    /// Center in normalized image coordinates.
    pub fn center_normalized(&self, width: u32, height: u32) -> (f64, f64) {
        (
            (self.x0 + self.x1) as f64 / (2.0 * width as f64),
            (self.y0 + self.y1) as f64 / (2.0 * height as f64),
        )
    }

    pub fn as_array(&self) -> [u32; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiResult {
    pub mean_image: Frame,
    /// Row-major, `width * height`.
    pub mask: Vec<bool>,
    pub bbox: BBox,
    pub label: Label,
}

impl RoiResult {
    pub fn mask_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Heat left in `mean` after removing the base image.
///
/// Overlay frames carry heat as red minus blue; grayscale frames as the excess
/// over the base.
pub fn residual_heat(mean: &Frame, base: &GrayImage) -> Result<Vec<f64>> {
    if (mean.width, mean.height) != base.dimensions() {
        return Err(Error::Data(format!(
            "mean image is {}x{} but base image is {}x{}",
            mean.width,
            mean.height,
            base.width(),
            base.height()
        )));
    }
    Ok(match mean.channels {
        3 => mean
            .pixels
            .chunks_exact(3)
            .map(|p| (p[0] as f64 - p[2] as f64).max(0.0))
            .collect(),
        _ => mean
            .pixels
            .iter()
            .zip(base.as_raw())
            .map(|(&m, &b)| (m as f64 - b as f64).max(0.0))
            .collect(),
    })
}

/// Thresholds residual heat at `threshold_frac * max` and boxes the mask.
pub fn roi_mask(mean: &Frame, base: &GrayImage, threshold_frac: f64, label: Label) -> Result<RoiResult> {
    if !(threshold_frac > 0.0 && threshold_frac <= 1.0) {
        return Err(Error::Config(format!("threshold_frac must be in (0, 1], got {threshold_frac}")));
    }
    let heat = residual_heat(mean, base)?;
    let peak = heat.iter().copied().fold(0.0, f64::max);
    let cut = threshold_frac * peak;
    let mask: Vec<bool> = heat.iter().map(|&h| peak > 0.0 && h >= cut).collect();

    let width = mean.width as usize;
    let mut bbox: Option<BBox> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = ((i % width) as u32, (i / width) as u32);
        let b = bbox.get_or_insert(BBox {
            x0: x,
            y0: y,
            x1: x + 1,
            y1: y + 1,
        });
        b.x0 = b.x0.min(x);
        b.x1 = b.x1.max(x + 1);
        b.y1 = b.y1.max(y + 1);
    }
    Ok(RoiResult {
        mean_image: mean.clone(),
        mask,
        bbox: bbox.unwrap_or(BBox::EMPTY),
        label,
    })
}

/// Clip, mean and mask for one predicted span.
pub fn span_roi(video: &HeatmapVideo, base: &GrayImage, span: &IntentionSpan, threshold_frac: f64) -> Result<RoiResult> {
    let clip = extract_clip(video, span.t_start, span.t_end)?;
    roi_mask(&mean_image(&clip)?, base, threshold_frac, span.label)
}

/// Sidecar record for one exported region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiRecord {
    pub case_id: String,
    pub label: Label,
    pub verdict: Verdict,
    pub t_start: f64,
    pub t_end: f64,
    pub bbox: [u32; 4],
    pub image: String,
}

const TINT: [u8; 3] = [255, 64, 64];
const TINT_ALPHA: f64 = 0.4;
const OUTLINE: [u8; 3] = [255, 255, 0];
const GLYPH: usize = 8;
const LINE_HEIGHT: usize = GLYPH + 2;
const MIN_OVERLAY_WIDTH: u32 = 256;

/// Base image with the mask tinted, the bbox outlined and `caption` written
/// in a strip underneath. Small images are upscaled by pixel repetition so the
/// caption stays legible.
pub fn render_overlay(base: &GrayImage, roi: &RoiResult, caption: &str) -> Result<Frame> {
    let (w, h) = base.dimensions();
    if roi.mask.len() != (w * h) as usize {
        return Err(Error::Data("mask does not match base image".into()));
    }
    let scale = MIN_OVERLAY_WIDTH.div_ceil(w).max(1);
    let (cw, ch) = (w * scale, h * scale);
    let per_line = (cw as usize / GLYPH).max(1);
    let chars: Vec<char> = caption.chars().collect();
    let lines: Vec<&[char]> = chars.chunks(per_line).collect();
    let strip = lines.len() * LINE_HEIGHT + 2;
    let total_h = ch as usize + strip;
    let mut px = vec![0u8; cw as usize * total_h * 3];

    let put = |px: &mut [u8], x: usize, y: usize, c: [u8; 3]| {
        let i = (y * cw as usize + x) * 3;
        px[i..i + 3].copy_from_slice(&c);
    };
    let bbox = roi.bbox;
    for y in 0..ch {
        for x in 0..cw {
            let (sx, sy) = (x / scale, y / scale);
            let g = base.get_pixel(sx, sy).0[0];
            let mut c = [g; 3];
            if roi.mask[(sy * w + sx) as usize] {
                for (v, t) in c.iter_mut().zip(TINT) {
                    *v = (*v as f64 * (1.0 - TINT_ALPHA) + t as f64 * TINT_ALPHA).round() as u8;
                }
            }
            let on_edge = !bbox.is_empty()
                && (bbox.x0..bbox.x1).contains(&sx)
                && (bbox.y0..bbox.y1).contains(&sy)
                && (x == bbox.x0 * scale || x == bbox.x1 * scale - 1 || y == bbox.y0 * scale || y == bbox.y1 * scale - 1);
            if on_edge {
                c = OUTLINE;
            }
            put(&mut px, x as usize, y as usize, c);
        }
    }
    for (row, line) in lines.iter().enumerate() {
        let top = ch as usize + 1 + row * LINE_HEIGHT + 1;
        for (col, &chr) in line.iter().enumerate() {
            let Some(glyph) = BASIC_FONTS.get(chr).or_else(|| BASIC_FONTS.get('?')) else {
                continue;
            };
            for (gy, bits) in glyph.iter().enumerate() {
                for gx in 0..GLYPH {
                    if bits & (1 << gx) != 0 {
                        put(&mut px, col * GLYPH + gx, top + gy, [255, 255, 255]);
                    }
                }
            }
        }
    }
    Frame::new(cw, total_h as u32, 3, px, roi.mean_image.t_center)
}

pub fn caption(span: &IntentionSpan) -> String {
    format!(
        "{} {} {:.1}-{:.1}s",
        span.label.id(),
        span.verdict.word(),
        span.t_start,
        span.t_end
    )
}

/// Writes one overlay PNG per region plus `roi.json` listing all of them.
pub fn write_overlays(
    dir: &Path,
    case_id: &str,
    base: &GrayImage,
    regions: &[(IntentionSpan, RoiResult)],
) -> Result<Vec<RoiRecord>> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let mut records = Vec::with_capacity(regions.len());
    for (i, (span, roi)) in regions.iter().enumerate() {
        let name = format!("span_{i:02}_{}.png", span.label.id());
        render_overlay(base, roi, &caption(span))?.save_png(&dir.join(&name))?;
        records.push(RoiRecord {
            case_id: case_id.to_string(),
            label: span.label,
            verdict: span.verdict,
            t_start: span.t_start,
            t_end: span.t_end,
            bbox: roi.bbox.as_array(),
            image: name,
        });
    }
    let path = dir.join("roi.json");
    fs::write(&path, serde_json::to_string_pretty(&records)?).map_err(|e| Error::file(&path, e))?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::{render_heatmap_video, RenderParams};
    use crate::ingest::{FixationRecord, GazeSession};
    use proptest::prelude::*;
    use std::path::PathBuf;

    fn video(frames: usize, fps: f64) -> HeatmapVideo {
        HeatmapVideo {
            frames: (0..frames)
                .map(|k| Frame::new(2, 1, 1, vec![k as u8, 0], (k as f64 + 0.5) / fps).unwrap())
                .collect(),
            fps,
            duration: frames as f64 / fps,
            base_image_ref: PathBuf::new(),
            params: RenderParams::default(),
        }
    }

    #[test]
    fn clip_examples() {
        let v = video(40, 4.0);
        assert_eq!(extract_clip(&v, 0.0, 10.0).unwrap().len(), 40);
        assert_eq!(extract_clip(&v, 1.0, 1.5).unwrap().frame_range(), 4..6);
        assert_eq!(extract_clip(&v, 0.0, 0.0).unwrap().frame_range(), 0..1);
        assert_eq!(extract_clip(&v, 1.6, 1.6).unwrap().frame_range(), 6..7);
        assert_eq!(extract_clip(&v, 1.1, 1.2).unwrap().frame_range(), 4..5);
        assert_eq!(extract_clip(&v, 9.9, 50.0).unwrap().frame_range(), 39..40);
        assert_eq!(extract_clip(&v, 10.0, 10.0).unwrap().frame_range(), 39..40);
        assert!(matches!(extract_clip(&v, 2.0, 1.0), Err(Error::Range(_))));
    }

    #[test]
    fn mean_examples() {
        let f = |v: u8| Frame::new(1, 1, 1, vec![v], 0.0).unwrap();
        let frames = [f(10), f(20)];
        let clip = Clip { frames: &frames, first_frame: 0, t_start: 1.0, t_end: 3.0 };
        let m = mean_image(&clip).unwrap();
        assert_eq!((m.pixels[0], m.t_center), (15, 2.0));
        let frames = [f(10), f(11)];
        let clip = Clip { frames: &frames, first_frame: 0, t_start: 0.0, t_end: 1.0 };
        assert_eq!(mean_image(&clip).unwrap().pixels[0], 11);
        let clip = Clip { frames: &[], first_frame: 0, t_start: 0.0, t_end: 1.0 };
        assert!(mean_image(&clip).is_err());
    }

    fn gray(w: u32, h: u32, v: u8) -> GrayImage {
        GrayImage::from_pixel(w, h, image::Luma([v]))
    }

    #[test]
    fn no_heat_gives_empty_mask() {
        let base = gray(4, 3, 77);
        let mean = Frame::new(4, 3, 3, vec![77; 36], 0.0).unwrap();
        let roi = roi_mask(&mean, &base, 0.5, Label::Edema).unwrap();
        assert_eq!(roi.bbox, BBox::EMPTY);
        assert_eq!(roi.mask_pixels(), 0);
        assert!(roi_mask(&mean, &gray(3, 3, 0), 0.5, Label::Edema).is_err());
        assert!(roi_mask(&mean, &base, 0.0, Label::Edema).is_err());
    }

    #[test]
    fn full_threshold_keeps_argmax() {
        let base = gray(3, 3, 0);
        let mut px = vec![0u8; 9];
        px[4] = 200;
        px[7] = 200;
        px[1] = 199;
        let mean = Frame::new(3, 3, 1, px, 0.0).unwrap();
        let roi = roi_mask(&mean, &base, 1.0, Label::Edema).unwrap();
        assert_eq!(roi.mask_pixels(), 2);
        assert_eq!(roi.bbox, BBox { x0: 1, y0: 1, x1: 2, y1: 3 });
    }

    #[test]
    fn half_max_box_matches_gaussian_width() {
        let base = gray(128, 128, 100);
        let session = GazeSession {
            case_id: "c".into(),
            image_ref: PathBuf::from("b.png"),
            fixations: vec![FixationRecord::new(0.5, 0.5, 0.0, 1.0).unwrap()],
            sentences: vec![],
            duration: 1.0,
        };
        for sigma_frac in [0.02, 0.035, 0.05] {
            let params = RenderParams { fps: 1.0, sigma_frac, ..RenderParams::default() };
            let video = render_heatmap_video(&session, &base, &params).unwrap();
            let sigma_px = sigma_frac * (128f64 * 128.0 * 2.0).sqrt();
            let roi = roi_mask(&video.frames[0], &base, 0.5, Label::Edema).unwrap();
            let fwhm = 2.0 * (2.0 * 2f64.ln()).sqrt() * sigma_px;
            for side in [roi.bbox.width(), roi.bbox.height()] {
                assert!((side as f64 - fwhm).abs() <= 2.0, "sigma {sigma_px}: side {side} vs {fwhm}");
            }
        }
    }

    #[test]
    fn overlay_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let base = gray(16, 16, 40);
        let mut mask = vec![false; 256];
        mask[5 * 16 + 5] = true;
        let roi = RoiResult {
            mean_image: Frame::new(16, 16, 1, vec![40; 256], 1.0).unwrap(),
            mask,
            bbox: BBox { x0: 5, y0: 5, x1: 6, y1: 6 },
            label: Label::Cardiomegaly,
        };
        let span = IntentionSpan::new(Label::Cardiomegaly, Verdict::Positive, 1.0, 2.5);
        let overlay = render_overlay(&base, &roi, &caption(&span)).unwrap();
        assert_eq!(overlay.width, 256);
        assert!(overlay.height > 256);
        assert_eq!(overlay.get(5 * 16, 5 * 16, 0), 255);
        let records = write_overlays(dir.path(), "c1", &base, &[(span, roi)]).unwrap();
        assert_eq!(records[0].bbox, [5, 5, 6, 6]);
        let json: Vec<RoiRecord> =
            serde_json::from_str(&fs::read_to_string(dir.path().join("roi.json")).unwrap()).unwrap();
        assert_eq!(json, records);
        assert!(dir.path().join(&records[0].image).exists());
    }

    proptest! {
        #[test]
        fn clip_grows_with_interval(start in 0.0f64..10.0, a in 0.0f64..5.0, b in 0.0f64..5.0) {
            let v = video(40, 4.0);
            let (short, long) = if a <= b { (a, b) } else { (b, a) };
            let c1 = extract_clip(&v, start, start + short).unwrap();
            let c2 = extract_clip(&v, start, start + long).unwrap();
            prop_assert!(c1.len() <= c2.len());
            prop_assert_eq!(c1.first_frame, c2.first_frame);
        }

        #[test]
        fn bbox_is_tight(w in 1u32..12, h in 1u32..12, px in prop::collection::vec(any::<u8>(), 144), frac in 0.01f64..=1.0) {
            let n = (w * h) as usize;
            let mean = Frame::new(w, h, 1, px[..n].to_vec(), 0.0).unwrap();
            let roi = roi_mask(&mean, &gray(w, h, 0), frac, Label::Edema).unwrap();
            let coords: Vec<(u32, u32)> = (0..n).filter(|&i| roi.mask[i]).map(|i| (i as u32 % w, i as u32 / w)).collect();
            if coords.is_empty() {
                prop_assert_eq!(roi.bbox, BBox::EMPTY);
            } else {
                let b = BBox {
                    x0: coords.iter().map(|c| c.0).min().unwrap(),
                    y0: coords.iter().map(|c| c.1).min().unwrap(),
                    x1: coords.iter().map(|c| c.0).max().unwrap() + 1,
                    y1: coords.iter().map(|c| c.1).max().unwrap() + 1,
                };
                prop_assert_eq!(roi.bbox, b);
            }
        }
    }
}
