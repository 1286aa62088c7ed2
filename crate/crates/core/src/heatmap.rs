//! Fixation heatmap videos.
//!
//! Frame `k` covers the window `[k/fps, (k+1)/fps)`. Its heat field is a sum of
//! unit-mass Gaussians, one per fixation, weighted by the fixation's overlap
//! with every window up to `k`, each overlap decayed by the configured
//! half-life. The weight of each frame is a closed-form sum, so frames are
//! independent and render identically on any number of threads.
//!
//! Heat is normalized by the maximum over the whole video, mapped through a
//! colormap and blended over the grayscale image with weight `alpha * heat`,
//! so pixels without heat keep the base value exactly.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use image::{GrayImage, ImageBuffer, Luma, Rgb};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{FixationRecord, GazeSession};

const FIRE_TABLE: &str = include_str!("../data/fire.cmap");

/// Gaussians are cut off at this many standard deviations.
pub const TRUNCATION_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub fps: f64,
    /// Gaussian sigma as a fraction of the image diagonal.
    pub sigma_frac: f64,
    /// Seconds for deposited heat to fall to half.
    pub decay_half_life: f64,
    pub alpha: f64,
    pub colormap: String,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            fps: 4.0,
            sigma_frac: 0.05,
            decay_half_life: 1.0,
            alpha: 0.5,
            colormap: "fire".to_string(),
        }
    }
}

impl RenderParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.fps) {
            return Err(Error::Config(format!("fps must be positive, got {}", self.fps)));
        }
        if !positive(self.sigma_frac) {
            return Err(Error::Config(format!("sigma_frac must be positive, got {}", self.sigma_frac)));
        }
        if !positive(self.decay_half_life) {
            return Err(Error::Config(format!(
                "decay_half_life must be positive, got {}",
                self.decay_half_life
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        colormap(&self.colormap)?;
        Ok(())
    }

    /// Multiplicative heat decay from one frame to the next.
    pub fn frame_decay(&self) -> f64 {
        (-1.0 / (self.fps * self.decay_half_life)).exp2()
    }
}

/// Looks up a colormap by name. Only `fire` ships; its channels satisfy
/// `r >= g >= b`, which lets region extraction recover heat as `r - b`.
pub fn colormap(name: &str) -> Result<&'static [[u8; 3]; 256]> {
    static FIRE: OnceLock<[[u8; 3]; 256]> = OnceLock::new();
    match name {
        "fire" => Ok(FIRE.get_or_init(|| {
            let mut table = [[0u8; 3]; 256];
            let rows = FIRE_TABLE.lines().filter(|l| !l.starts_with('#'));
            for (slot, row) in table.iter_mut().zip(rows) {
                let rgb: Vec<u8> = row
                    .split_whitespace()
                    .map(|v| v.parse().expect("colormap entry"))
                    .collect();
                *slot = [rgb[0], rgb[1], rgb[2]];
            }
            table
        })),
        other => Err(Error::Config(format!("unknown colormap `{other}`"))),
    }
}

/// One video frame, row-major, `channels` interleaved 8-bit values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub pixels: Vec<u8>,
    pub t_center: f64,
}

impl Frame {
    pub fn new(width: u32, height: u32, channels: u8, pixels: Vec<u8>, t_center: f64) -> Result<Frame> {
        if !matches!(channels, 1 | 3) {
            return Err(Error::Data(format!("frames have 1 or 3 channels, not {channels}")));
        }
        if pixels.len() != width as usize * height as usize * channels as usize {
            return Err(Error::Data("pixel buffer does not match frame dimensions".into()));
        }
        Ok(Frame {
            width,
            height,
            channels,
            pixels,
            t_center,
        })
    }

    pub fn len_pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn get(&self, x: u32, y: u32, c: u8) -> u8 {
        let idx = (y as usize * self.width as usize + x as usize) * self.channels as usize;
        self.pixels[idx + c as usize]
    }

    /// Rec. 601 luma of every pixel, in `[0, 255]`.
    pub fn luma(&self) -> Vec<f64> {
        match self.channels {
            1 => self.pixels.iter().map(|&v| v as f64).collect(),
            _ => self
                .pixels
                .chunks_exact(3)
                .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
                .collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        match self.channels {
            1 => ImageBuffer::<Luma<u8>, _>::from_raw(self.width, self.height, self.pixels.clone())
                .expect("dimensions checked at construction")
                .save(path)?,
            _ => ImageBuffer::<Rgb<u8>, _>::from_raw(self.width, self.height, self.pixels.clone())
                .expect("dimensions checked at construction")
                .save(path)?,
        }
        Ok(())
    }

    pub fn load_png(path: &Path, t_center: f64) -> Result<Frame> {
        let img = image::open(path)?;
        let frame = match img.color().channel_count() {
            1 => {
                let g = img.into_luma8();
                Frame::new(g.width(), g.height(), 1, g.into_raw(), t_center)?
            }
            _ => {
                let rgb = img.into_rgb8();
                Frame::new(rgb.width(), rgb.height(), 3, rgb.into_raw(), t_center)?
            }
        };
        Ok(frame)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapVideo {
    pub frames: Vec<Frame>,
    pub fps: f64,
    pub duration: f64,
    pub base_image_ref: PathBuf,
    pub params: RenderParams,
}

impl HeatmapVideo {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.frames
            .first()
            .map_or((0, 0), |f| (f.width, f.height))
    }
}

/// `ceil(duration * fps)`, at least one frame. A product within 1e-9 of an
/// integer counts as that integer.
pub fn frame_count(duration: f64, fps: f64) -> usize {
    ((duration * fps - 1e-9).ceil().max(1.0)) as usize
}

/// Index of the frame showing time `t`: `clamp(floor(t * fps), 0, f - 1)`.
pub fn frame_index_at(video: &HeatmapVideo, t: f64) -> Result<usize> {
    if !(t >= 0.0 && t <= video.duration) {
        return Err(Error::range(format!(
            "time {t} outside [0, {}]",
            video.duration
        )));
    }
    let last = video.frames.len().saturating_sub(1);
    Ok(((t * video.fps).floor() as usize).min(last))
}

/// A truncated, unit-mass Gaussian footprint clipped to the image.
#[derive(Debug, Clone)]
struct Stamp {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    weights: Vec<f64>,
}

impl Stamp {
    fn new(x: f64, y: f64, sigma: f64, width: u32, height: u32) -> Stamp {
        // Continuous pixel coordinates: pixel i spans [i, i + 1), center i + 0.5.
        let cx = x * width as f64 - 0.5;
        let cy = y * height as f64 - 0.5;
        let radius = TRUNCATION_SIGMAS * sigma;
        let clip = |v: f64, hi: u32| v.clamp(0.0, hi as f64 - 1.0) as usize;
        let x0 = clip((cx - radius).ceil(), width);
        let x1 = clip((cx + radius).floor(), width);
        let y0 = clip((cy - radius).ceil(), height);
        let y1 = clip((cy + radius).floor(), height);
        let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
        let mut weights = vec![0.0; w * h];
        let two_var = 2.0 * sigma * sigma;
        let mut total = 0.0;
        for j in 0..h {
            for i in 0..w {
                let dx = (x0 + i) as f64 - cx;
                let dy = (y0 + j) as f64 - cy;
                let r2 = dx * dx + dy * dy;
                if r2 <= radius * radius {
                    let g = (-r2 / two_var).exp();
                    weights[j * w + i] = g;
                    total += g;
                }
            }
        }
        if total > 0.0 {
            weights.iter_mut().for_each(|g| *g /= total);
        } else {
            // Sub-pixel sigma: all mass on the nearest pixel.
            let nx = clip(cx.round(), width) - x0;
            let ny = clip(cy.round(), height) - y0;
            weights[ny * w + nx] = 1.0;
        }
        Stamp {
            x0,
            y0,
            w,
            h,
            weights,
        }
    }

    fn add_to(&self, field: &mut [f64], width: usize, scale: f64) {
        for j in 0..self.h {
            let row = (self.y0 + j) * width + self.x0;
            let src = &self.weights[j * self.w..(j + 1) * self.w];
            for (dst, &g) in field[row..row + self.w].iter_mut().zip(src) {
                *dst += scale * g;
            }
        }
    }
}

/// Seconds of fixation `fix` that fall inside frame `j`'s window.
pub fn window_overlap(fix: &FixationRecord, j: usize, fps: f64) -> f64 {
    let lo = j as f64 / fps;
    let hi = (j + 1) as f64 / fps;
    (fix.t_end.min(hi) - fix.t_start.max(lo)).max(0.0)
}

/// Heat weight of `fix` in frame `k`: its overlap with window `k` plus the
/// decayed overlaps with every earlier window.
pub fn fixation_weight(fix: &FixationRecord, k: usize, params: &RenderParams) -> f64 {
    let fps = params.fps;
    let first = (fix.t_start * fps).floor() as usize;
    let last = ((fix.t_end * fps).ceil() as usize).saturating_sub(1);
    if first > k {
        return 0.0;
    }
    let decay = params.frame_decay();
    (first..=last.min(k))
        .map(|j| window_overlap(fix, j, fps) * decay.powi((k - j) as i32))
        .sum()
}

/// Renders pre-normalization heat fields for a session on a `width x height` grid.
pub struct HeatRenderer<'a> {
    fixations: &'a [FixationRecord],
    stamps: Vec<Stamp>,
    width: u32,
    height: u32,
    params: &'a RenderParams,
}

impl<'a> HeatRenderer<'a> {
    pub fn new(fixations: &'a [FixationRecord], width: u32, height: u32, params: &'a RenderParams) -> Self {
        let diag = (width as f64).hypot(height as f64);
        let sigma = params.sigma_frac * diag;
        let stamps = fixations
            .iter()
            .map(|f| Stamp::new(f.x, f.y, sigma, width, height))
            .collect();
        HeatRenderer {
            fixations,
            stamps,
            width,
            height,
            params,
        }
    }

    /// Gaussian sigma in pixels.
    pub fn sigma_px(&self) -> f64 {
        self.params.sigma_frac * (self.width as f64).hypot(self.height as f64)
    }

    /// Heat field of frame `k`, row-major.
    pub fn field(&self, k: usize) -> Vec<f64> {
        let mut field = vec![0.0; self.width as usize * self.height as usize];
        for (fix, stamp) in self.fixations.iter().zip(&self.stamps) {
            let w = fixation_weight(fix, k, self.params);
            if w > 0.0 {
                stamp.add_to(&mut field, self.width as usize, w);
            }
        }
        field
    }
}

fn blend(base: &GrayImage, field: &[f64], max_heat: f64, params: &RenderParams, t_center: f64) -> Frame {
    let cmap = colormap(&params.colormap).expect("validated colormap");
    let mut pixels = Vec::with_capacity(field.len() * 3);
    for (&b, &heat) in base.as_raw().iter().zip(field) {
        let h = if max_heat > 0.0 { heat / max_heat } else { 0.0 };
        let color = cmap[(h * 255.0).round().clamp(0.0, 255.0) as usize];
        let w = params.alpha * h;
        for c in color {
            let v = b as f64 * (1.0 - w) + w * c as f64;
            pixels.push((v + 0.5).floor().clamp(0.0, 255.0) as u8);
        }
    }
    Frame {
        width: base.width(),
        height: base.height(),
        channels: 3,
        pixels,
        t_center,
    }
}

/// Renders the fixation heatmap video of `session` over `base`.
pub fn render_heatmap_video(session: &GazeSession, base: &GrayImage, params: &RenderParams) -> Result<HeatmapVideo> {
    params.validate()?;
    if base.width() == 0 || base.height() == 0 {
        return Err(Error::Data("base image is empty".into()));
    }
    let count = frame_count(session.duration, params.fps);
    let renderer = HeatRenderer::new(&session.fixations, base.width(), base.height(), params);
    let fields: Vec<Vec<f64>> = (0..count).into_par_iter().map(|k| renderer.field(k)).collect();
    let max_heat = fields
        .iter()
        .flat_map(|f| f.iter().copied())
        .fold(0.0, f64::max);
    let frames = fields
        .par_iter()
        .enumerate()
        .map(|(k, field)| blend(base, field, max_heat, params, (k as f64 + 0.5) / params.fps))
        .collect();
    Ok(HeatmapVideo {
        frames,
        fps: params.fps,
        duration: session.duration,
        base_image_ref: session.image_ref.clone(),
        params: params.clone(),
    })
}

/// Same as [`render_heatmap_video`] on a dedicated pool of `workers` threads.
pub fn render_heatmap_video_with_workers(
    session: &GazeSession,
    base: &GrayImage,
    params: &RenderParams,
    workers: usize,
) -> Result<HeatmapVideo> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Invariant(format!("thread pool: {e}")))?;
    pool.install(|| render_heatmap_video(session, base, params))
}

/// Loads an 8-bit grayscale base image (PNG or PGM).
pub fn load_base_image(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::file(path, io),
        other => Error::Image(other),
    })?;
    Ok(img.into_luma8())
}

#[derive(Debug, Serialize, Deserialize)]
struct VideoManifest {
    fps: f64,
    duration: f64,
    frame_count: usize,
    base_image: PathBuf,
    params: RenderParams,
}

pub fn frame_file_name(k: usize) -> String {
    format!("frame_{k:05}.png")
}

/// Writes `frame_00000.png ...` and a `video.json` manifest into `dir`.
pub fn write_video_dir(video: &HeatmapVideo, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    video
        .frames
        .par_iter()
        .enumerate()
        .try_for_each(|(k, frame)| frame.save_png(&dir.join(frame_file_name(k))))?;
    let manifest = VideoManifest {
        fps: video.fps,
        duration: video.duration,
        frame_count: video.frames.len(),
        base_image: video.base_image_ref.clone(),
        params: video.params.clone(),
    };
    let path = dir.join("video.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::file(&path, e))?;
    Ok(())
}

pub fn read_video_dir(dir: &Path) -> Result<HeatmapVideo> {
    let path = dir.join("video.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
    let manifest: VideoManifest = serde_json::from_str(&text)?;
    let frames = (0..manifest.frame_count)
        .into_par_iter()
        .map(|k| Frame::load_png(&dir.join(frame_file_name(k)), (k as f64 + 0.5) / manifest.fps))
        .collect::<Result<Vec<_>>>()?;
    Ok(HeatmapVideo {
        frames,
        fps: manifest.fps,
        duration: manifest.duration,
        base_image_ref: manifest.base_image,
        params: manifest.params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session(fixations: Vec<FixationRecord>, duration: f64) -> GazeSession {
        GazeSession {
            case_id: "t".into(),
            image_ref: PathBuf::new(),
            fixations,
            sentences: vec![],
            duration,
        }
    }

    fn gray(w: u32, h: u32) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| Luma([((x * 7 + y * 3) % 200) as u8 + 20]))
    }

    fn argmax(field: &[f64]) -> usize {
        field
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    }

    #[test]
    fn no_fixations_reproduce_the_base_image() {
        let base = gray(20, 14);
        let video = render_heatmap_video(&session(vec![], 2.0), &base, &RenderParams::default()).unwrap();
        assert_eq!(video.frame_count(), 8);
        for frame in &video.frames {
            for (i, &b) in base.as_raw().iter().enumerate() {
                assert_eq!(&frame.pixels[i * 3..i * 3 + 3], &[b, b, b]);
            }
        }
    }

    #[test]
    fn zero_duration_gives_one_base_frame() {
        let base = gray(9, 9);
        let video = render_heatmap_video(&session(vec![], 0.0), &base, &RenderParams::default()).unwrap();
        assert_eq!(video.frame_count(), 1);
        assert_eq!(video.frames[0].pixels[0], base.as_raw()[0]);
    }

    #[test]
    fn centered_fixation_peaks_at_center_pixel() {
        let params = RenderParams::default();
        for (w, h) in [(31, 31), (32, 24), (17, 40)] {
            let fix = [FixationRecord::new(0.5, 0.5, 0.0, 1.0).unwrap()];
            let renderer = HeatRenderer::new(&fix, w, h, &params);
            for k in 0..4 {
                let idx = argmax(&renderer.field(k));
                assert_eq!((idx % w as usize, idx / w as usize), (((w - 1) / 2) as usize, ((h - 1) / 2) as usize));
            }
        }
    }

    #[test]
    fn timebase_is_monotone() {
        let fix = vec![FixationRecord::new(0.2, 0.3, 0.1, 0.9).unwrap()];
        let video = render_heatmap_video(&session(fix, 3.3), &gray(8, 8), &RenderParams::default()).unwrap();
        assert_eq!(video.frame_count(), 14);
        for (k, f) in video.frames.iter().enumerate() {
            assert_eq!(f.t_center, (k as f64 + 0.5) / 4.0);
        }
    }

    #[test]
    fn frame_index_examples() {
        let video = render_heatmap_video(&session(vec![], 3.0), &gray(4, 4), &RenderParams::default()).unwrap();
        assert_eq!(frame_index_at(&video, 0.0).unwrap(), 0);
        assert_eq!(frame_index_at(&video, 3.0).unwrap(), 11);
        assert_eq!(frame_index_at(&video, 2.3).unwrap(), 9);
        assert!(frame_index_at(&video, -0.1).is_err());
        assert!(frame_index_at(&video, 3.01).is_err());
    }

    #[test]
    fn weight_includes_decayed_history() {
        let params = RenderParams::default();
        let fix = FixationRecord::new(0.5, 0.5, 0.0, 0.25).unwrap();
        assert_eq!(fixation_weight(&fix, 0, &params), 0.25);
        let d = params.frame_decay();
        assert!((fixation_weight(&fix, 4, &params) - 0.25 * d.powi(4)).abs() < 1e-15);
        // Four frames at 4 fps is one half-life.
        assert!((d.powi(4) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn params_are_validated() {
        let mut p = RenderParams::default();
        p.alpha = 1.5;
        assert!(p.validate().is_err());
        let mut p = RenderParams::default();
        p.colormap = "viridis".into();
        assert!(p.validate().is_err());
        let mut p = RenderParams::default();
        p.fps = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn colormap_channels_are_ordered() {
        let cmap = colormap("fire").unwrap();
        assert_eq!(cmap[0], [0, 0, 0]);
        for c in cmap {
            assert!(c[0] >= c[1] && c[1] >= c[2]);
        }
        for w in cmap.windows(2) {
            assert!(w[1][0] >= w[0][0]);
        }
    }

    #[test]
    fn video_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let fix = vec![FixationRecord::new(0.4, 0.6, 0.0, 1.2).unwrap()];
        let video = render_heatmap_video(&session(fix, 1.5), &gray(12, 10), &RenderParams::default()).unwrap();
        write_video_dir(&video, dir.path()).unwrap();
        assert!(dir.path().join("frame_00005.png").exists());
        let back = read_video_dir(dir.path()).unwrap();
        assert_eq!(back, video);
    }
}
