//! Fixed-shape frame features and baseline intention predictors.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{Frame, HeatmapVideo};
use crate::intent::{read_sequences_jsonl, IntentionSequence, IntentionSpan, Label, Verdict};
use crate::labeler::DEFAULT_SPEECH_ONSET;
use crate::stats::lower_median;

pub const DEFAULT_MAX_FRAMES: usize = 100;
const POOL_SIDE: usize = 16;
const HIST_BINS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// 16x16 mean-pooled luma, scaled to `[0, 1]`.
    Downsample16,
    /// 64-bin luma histogram normalized to unit sum.
    IntensityHistogram,
    /// Moments of the heat overlay: mass, centroid x/y, central moments
    /// xx/yy/xy, peak value, peak position.
    HeatMoments,
}

impl FeatureKind {
    pub fn dim(self) -> usize {
        match self {
            FeatureKind::Downsample16 => POOL_SIDE * POOL_SIDE,
            FeatureKind::IntensityHistogram => HIST_BINS,
            FeatureKind::HeatMoments => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Downsample16 => "downsample16",
            FeatureKind::IntensityHistogram => "intensity_histogram",
            FeatureKind::HeatMoments => "heat_moments",
        }
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "downsample16" => Ok(FeatureKind::Downsample16),
            "intensity_histogram" => Ok(FeatureKind::IntensityHistogram),
            "heat_moments" => Ok(FeatureKind::HeatMoments),
            other => Err(Error::Config(format!("unknown feature kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    pub max_frames: usize,
    pub kind: FeatureKind,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams {
            max_frames: DEFAULT_MAX_FRAMES,
            kind: FeatureKind::Downsample16,
        }
    }
}

impl FeatureParams {
    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_frames == 0 {
            return Err(Error::Config("max_frames must be at least 1".into()));
        }
        Ok(())
    }
}

/// `max_frames x d` row-major matrix; rows at or past `valid_rows` are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    max_frames: usize,
    d: usize,
    valid_rows: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn zeros(max_frames: usize, d: usize) -> FeatureMatrix {
        FeatureMatrix {
            max_frames,
            d,
            valid_rows: 0,
            data: vec![0.0; max_frames * d],
        }
    }

    /// Builds a matrix from its valid rows, zero-padding up to `max_frames`.
    pub fn from_rows(rows: &[Vec<f64>], max_frames: usize, d: usize) -> Result<FeatureMatrix> {
        if rows.len() > max_frames {
            return Err(Error::Data(format!("{} rows exceed max_frames {max_frames}", rows.len())));
        }
        let mut m = FeatureMatrix::zeros(max_frames, d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Data(format!("row {i} has {} values, expected {d}", row.len())));
            }
            m.data[i * d..(i + 1) * d].copy_from_slice(row);
        }
        m.valid_rows = rows.len();
        Ok(m)
    }

    pub fn max_frames(&self) -> usize {
        self.max_frames
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn valid_rows(&self) -> usize {
        self.valid_rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mean of the valid rows (all zeros when there are none).
    pub fn row_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.d];
        if self.valid_rows == 0 {
            return mean;
        }
        for i in 0..self.valid_rows {
            for (m, v) in mean.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        let n = self.valid_rows as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    const MAGIC: &'static [u8; 4] = b"GKFM";

    /// Binary dump: magic `GKFM`, then `max_frames`, `d`, `valid_rows` as
    /// little-endian u32, then all `max_frames * d` values as little-endian f64.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header_field = |v: usize| {
            u32::try_from(v).map_err(|_| Error::Data(format!("{v} does not fit the dump header")))
        };
        w.write_all(Self::MAGIC)?;
        for v in [self.max_frames, self.d, self.valid_rows] {
            w.write_all(&header_field(v)?.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<FeatureMatrix> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[..4] != Self::MAGIC {
            return Err(Error::Data("not a feature dump (bad magic)".into()));
        }
        let field = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
        let (max_frames, d, valid_rows) = (field(4), field(8), field(12));
        if valid_rows > max_frames {
            return Err(Error::Data("valid_rows exceeds max_frames".into()));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != max_frames * d * 8 {
            return Err(Error::Data(format!(
                "feature dump holds {} bytes of values, expected {}",
                bytes.len(),
                max_frames * d * 8
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data[valid_rows * d..].iter().any(|&v| v != 0.0) {
            return Err(Error::Data("padding rows of feature dump are not zero".into()));
        }
        Ok(FeatureMatrix {
            max_frames,
            d,
            valid_rows,
            data,
        })
    }
}

/// Heat of an overlay frame: red minus blue, in `[0, 1]`.
///
/// The gray base contributes equally to both channels and the colormap has no
/// blue, so the difference isolates the blended heat color.
pub fn frame_heat(frame: &Frame) -> Vec<f64> {
    match frame.channels {
        3 => frame
            .pixels
            .chunks_exact(3)
            .map(|p| (p[0] as f64 - p[2] as f64).max(0.0) / 255.0)
            .collect(),
        _ => vec![0.0; frame.len_pixels()],
    }
}

fn downsample16(frame: &Frame) -> Vec<f64> {
    let (w, h) = (frame.width as usize, frame.height as usize);
    let mut sums = vec![0.0; POOL_SIDE * POOL_SIDE];
    let mut counts = vec![0usize; POOL_SIDE * POOL_SIDE];
    for (i, v) in frame.luma().into_iter().enumerate() {
        let (x, y) = (i % w, i / w);
        let cell = (y * POOL_SIDE / h) * POOL_SIDE + x * POOL_SIDE / w;
        sums[cell] += v / 255.0;
        counts[cell] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect()
}

fn intensity_histogram(frame: &Frame) -> Vec<f64> {
    let mut hist = vec![0.0; HIST_BINS];
    let luma = frame.luma();
    for v in &luma {
        let bin = ((v / 256.0 * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
        hist[bin] += 1.0;
    }
    let n = luma.len().max(1) as f64;
    hist.iter_mut().for_each(|h| *h /= n);
    hist
}

fn heat_moments(frame: &Frame) -> Vec<f64> {
    let (w, h) = (frame.width as usize, frame.height as usize);
    let heat = frame_heat(frame);
    let total: f64 = heat.iter().sum();
    if total <= 0.0 {
        return vec![0.0; 8];
    }
    let coords = |i: usize| ((i % w) as f64 + 0.5) / w as f64;
    let rows = |i: usize| ((i / w) as f64 + 0.5) / h as f64;
    let (mut cx, mut cy) = (0.0, 0.0);
    for (i, &v) in heat.iter().enumerate() {
        cx += v * coords(i);
        cy += v * rows(i);
    }
    cx /= total;
    cy /= total;
    let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
    let (mut peak, mut peak_at) = (0.0, 0);
    for (i, &v) in heat.iter().enumerate() {
        let (dx, dy) = (coords(i) - cx, rows(i) - cy);
        xx += v * dx * dx;
        yy += v * dy * dy;
        xy += v * dx * dy;
        if v > peak {
            peak = v;
            peak_at = i;
        }
    }
    vec![
        total / heat.len() as f64,
        cx,
        cy,
        xx / total,
        yy / total,
        xy / total,
        peak,
        peak_at as f64 / heat.len() as f64,
    ]
}

pub fn frame_features(frame: &Frame, kind: FeatureKind) -> Vec<f64> {
    match kind {
        FeatureKind::Downsample16 => downsample16(frame),
        FeatureKind::IntensityHistogram => intensity_histogram(frame),
        FeatureKind::HeatMoments => heat_moments(frame),
    }
}

/// Featurizes the first `max_frames` frames independently and zero-pads the rest.
pub fn extract_frame_features(video: &HeatmapVideo, params: &FeatureParams) -> Result<FeatureMatrix> {
    params.validate()?;
    if video.frames.is_empty() {
        return Err(Error::Data("video has no frames".into()));
    }
    let used = video.frames.len().min(params.max_frames);
    let rows: Vec<Vec<f64>> = video.frames[..used]
        .par_iter()
        .map(|f| frame_features(f, params.kind))
        .collect();
    FeatureMatrix::from_rows(&rows, params.max_frames, params.dim())
}

/// One training pair for the baseline predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub features: FeatureMatrix,
    pub target: IntentionSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelPrior {
    pub t_start: f64,
    pub t_end: f64,
    pub support: usize,
}

/// Median start and end per (label, verdict) over a training set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelTimePriors {
    pub entries: BTreeMap<(Label, Verdict), LabelPrior>,
}

impl LabelTimePriors {
    pub fn get(&self, label: Label, verdict: Verdict) -> Option<&LabelPrior> {
        self.entries.get(&(label, verdict))
    }
}

pub fn fit_label_priors(train: &[TrainingExample]) -> Result<LabelTimePriors> {
    if train.is_empty() {
        return Err(Error::Data("cannot fit priors on an empty training set".into()));
    }
    let mut observed: BTreeMap<(Label, Verdict), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ex in train {
        for span in &ex.target.spans {
            let entry = observed.entry((span.label, span.verdict)).or_default();
            entry.0.push(span.t_start);
            entry.1.push(span.t_end);
        }
    }
    let entries = observed
        .into_iter()
        .map(|(key, (starts, ends))| {
            let prior = LabelPrior {
                t_start: lower_median(&starts).expect("nonempty"),
                t_end: lower_median(&ends).expect("nonempty"),
                support: starts.len(),
            };
            (key, prior)
        })
        .collect();
    Ok(LabelTimePriors { entries })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn rescale(seq: &IntentionSequence, case_id: &str, duration: f64) -> IntentionSequence {
    let scale = if seq.duration == duration { 1.0 } else { duration / seq.duration };
    let spans = seq
        .spans
        .iter()
        .map(|s| {
            let t_start = (s.t_start * scale).clamp(0.0, duration);
            let t_end = (s.t_end * scale).clamp(t_start, duration);
            IntentionSpan::new(s.label, s.verdict, t_start, t_end)
        })
        .collect();
    IntentionSequence::new(case_id, duration, spans)
}

/// Nearest-neighbour predictor over row-mean feature vectors.
#[derive(Debug, Clone)]
pub struct RetrievalPredictor {
    means: Vec<Vec<f64>>,
    train: Vec<TrainingExample>,
}

impl RetrievalPredictor {
    pub fn new(train: Vec<TrainingExample>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("retrieval needs at least one training example".into()));
        }
        let means = train.iter().map(|ex| ex.features.row_mean()).collect();
        Ok(RetrievalPredictor { means, train })
    }

    /// Index of the nearest training example; ties go to the lower case id.
    pub fn nearest(&self, query: &FeatureMatrix) -> usize {
        let q = query.row_mean();
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, m) in self.means.iter().enumerate() {
            let dist = euclidean(&q, m);
            let better = dist < best_dist
                || (dist == best_dist && self.train[i].target.case_id < self.train[best].target.case_id);
            if better {
                best = i;
                best_dist = dist;
            }
        }
        best
    }

    /// The nearest neighbour's intentions, rescaled to `duration`.
    pub fn predict(&self, query: &FeatureMatrix, case_id: &str, duration: f64) -> IntentionSequence {
        rescale(&self.train[self.nearest(query)].target, case_id, duration)
    }
}

/// Convenience form of [`RetrievalPredictor::predict`] for one-off queries.
pub fn predict_retrieval(
    query: &FeatureMatrix,
    case_id: &str,
    duration: f64,
    train: &[TrainingExample],
) -> Result<IntentionSequence> {
    Ok(RetrievalPredictor::new(train.to_vec())?.predict(query, case_id, duration))
}

/// One span per non-absent report label, timed by the prior for that
/// (label, verdict) or by `(min(1.1, duration), duration)` when unseen.
pub fn predict_prior(
    case_id: &str,
    report_labels: &BTreeMap<Label, Verdict>,
    priors: &LabelTimePriors,
    duration: f64,
) -> IntentionSequence {
    let spans = report_labels
        .iter()
        .filter(|(_, v)| **v != Verdict::Absent)
        .map(|(&label, &verdict)| {
            let (t_start, t_end) = match priors.get(label, verdict) {
                Some(p) => (p.t_start, p.t_end),
                None => (DEFAULT_SPEECH_ONSET.min(duration), duration),
            };
            let t_start = t_start.clamp(0.0, duration);
            IntentionSpan::new(label, verdict, t_start, t_end.clamp(t_start, duration))
        })
        .collect();
    IntentionSequence::new(case_id, duration, spans)
}

/// Reads externally produced predictions in the prediction line format.
pub fn load_external_predictions<R: BufRead>(stream: R) -> Result<BTreeMap<String, IntentionSequence>> {
    read_sequences_jsonl(stream)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PredictorKind {
    Retrieval,
    Prior,
    External(PathBuf),
}

impl PredictorKind {
    pub fn name(&self) -> &'static str {
        match self {
            PredictorKind::Retrieval => "retrieval",
            PredictorKind::Prior => "prior",
            PredictorKind::External(_) => "external",
        }
    }

    /// Parses `retrieval`, `prior` or `external`; the latter needs `pred_file`.
    pub fn parse(name: &str, pred_file: Option<PathBuf>) -> Result<PredictorKind> {
        match (name, pred_file) {
            ("retrieval", _) => Ok(PredictorKind::Retrieval),
            ("prior", _) => Ok(PredictorKind::Prior),
            ("external", Some(p)) => Ok(PredictorKind::External(p)),
            ("external", None) => Err(Error::Config("external predictor needs a prediction file".into())),
            (other, _) => Err(Error::Config(format!("unknown predictor `{other}`"))),
        }
    }
}

impl fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What a predictor may look at for one case.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub case_id: &'a str,
    pub duration: f64,
    pub features: &'a FeatureMatrix,
    pub report_labels: &'a BTreeMap<Label, Verdict>,
}

pub trait Predictor: Send + Sync {
    fn predict(&self, query: &Query<'_>) -> IntentionSequence;
}

impl Predictor for RetrievalPredictor {
    fn predict(&self, query: &Query<'_>) -> IntentionSequence {
        RetrievalPredictor::predict(self, query.features, query.case_id, query.duration)
    }
}

impl Predictor for LabelTimePriors {
    fn predict(&self, query: &Query<'_>) -> IntentionSequence {
        predict_prior(query.case_id, query.report_labels, self, query.duration)
    }
}

/// Predictions loaded from a file; cases missing from it predict nothing.
#[derive(Debug, Clone, Default)]
pub struct ExternalPredictions(pub BTreeMap<String, IntentionSequence>);

impl Predictor for ExternalPredictions {
    fn predict(&self, query: &Query<'_>) -> IntentionSequence {
        match self.0.get(query.case_id) {
            Some(seq) => seq.clone(),
            None => IntentionSequence::empty(query.case_id, query.duration),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::RenderParams;
    use proptest::prelude::*;

    fn gray_video(frames: usize, value: u8) -> HeatmapVideo {
        HeatmapVideo {
            frames: (0..frames)
                .map(|k| Frame::new(8, 8, 3, vec![value; 8 * 8 * 3], k as f64 / 4.0).unwrap())
                .collect(),
            fps: 4.0,
            duration: frames as f64 / 4.0,
            base_image_ref: PathBuf::from("x.png"),
            params: RenderParams::default(),
        }
    }

    fn example(case_id: &str, duration: f64, value: f64, spans: Vec<IntentionSpan>) -> TrainingExample {
        TrainingExample {
            features: FeatureMatrix::from_rows(&[vec![value; 4]], 3, 4).unwrap(),
            target: IntentionSequence::new(case_id, duration, spans),
        }
    }

    #[test]
    fn padding_and_truncation() {
        let params = FeatureParams::default();
        let m = extract_frame_features(&gray_video(40, 90), &params).unwrap();
        assert_eq!((m.max_frames(), m.dim(), m.valid_rows()), (100, 256, 40));
        assert!((40..100).all(|i| m.row(i).iter().all(|&v| v.to_bits() == 0)));
        let m = extract_frame_features(&gray_video(150, 90), &params).unwrap();
        assert_eq!(m.valid_rows(), 100);
    }

    #[test]
    fn black_histogram_is_first_bin() {
        let params = FeatureParams {
            max_frames: 100,
            kind: FeatureKind::IntensityHistogram,
        };
        let m = extract_frame_features(&gray_video(3, 0), &params).unwrap();
        for i in 0..3 {
            assert_eq!(m.row(i)[0], 1.0);
            assert!(m.row(i)[1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn heat_moments_locate_a_blob() {
        let mut pixels = vec![50u8; 8 * 8 * 3];
        let idx = (2 * 8 + 6) * 3;
        pixels[idx] = 250;
        let f = Frame::new(8, 8, 3, pixels, 0.0).unwrap();
        let m = frame_features(&f, FeatureKind::HeatMoments);
        assert!((m[1] - 6.5 / 8.0).abs() < 1e-12);
        assert!((m[2] - 2.5 / 8.0).abs() < 1e-12);
        assert_eq!(&m[3..6], &[0.0, 0.0, 0.0]);
        assert!((m[6] - 200.0 / 255.0).abs() < 1e-12);
        assert!(frame_features(&gray_video(1, 7).frames[0], FeatureKind::HeatMoments)
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn prior_medians() {
        let e = |s, e| IntentionSpan::new(Label::Edema, Verdict::Positive, s, e);
        let priors = fit_label_priors(&[example("a", 20.0, 0.0, vec![e(2.0, 5.0)])]).unwrap();
        assert_eq!(
            priors.get(Label::Edema, Verdict::Positive),
            Some(&LabelPrior { t_start: 2.0, t_end: 5.0, support: 1 })
        );
        let train = [
            example("a", 20.0, 0.0, vec![e(1.0, 2.0)]),
            example("b", 20.0, 0.0, vec![e(3.0, 9.0), e(8.0, 10.0)]),
        ];
        let p = fit_label_priors(&train).unwrap();
        assert_eq!(p.get(Label::Edema, Verdict::Positive).unwrap().t_start, 3.0);
        let p = fit_label_priors(&train[..1]).unwrap();
        assert_eq!(p.get(Label::Edema, Verdict::Positive).unwrap().t_start, 1.0);
        let two = [example("a", 20.0, 0.0, vec![e(1.0, 2.0), e(3.0, 4.0)])];
        assert_eq!(fit_label_priors(&two).unwrap().get(Label::Edema, Verdict::Positive).unwrap().t_start, 1.0);
        assert!(fit_label_priors(&[]).is_err());
    }

    #[test]
    fn retrieval_examples() {
        let span = IntentionSpan::new(Label::Cardiomegaly, Verdict::Positive, 2.0, 5.0);
        let train = vec![
            example("b", 10.0, 1.0, vec![span]),
            example("a", 10.0, 3.0, vec![IntentionSpan::new(Label::Edema, Verdict::Negative, 1.0, 2.0)]),
        ];
        let q = FeatureMatrix::from_rows(&[vec![1.0; 4]], 3, 4).unwrap();
        let own = predict_retrieval(&q, "b", 10.0, &train).unwrap();
        assert_eq!(own, train[0].target);
        let scaled = predict_retrieval(&q, "q", 20.0, &train).unwrap();
        assert_eq!((scaled.spans[0].t_start, scaled.spans[0].t_end), (4.0, 10.0));
        let middle = FeatureMatrix::from_rows(&[vec![2.0; 4]], 3, 4).unwrap();
        assert_eq!(predict_retrieval(&middle, "q", 10.0, &train).unwrap().spans[0].label, Label::Edema);
    }

    #[test]
    fn prior_prediction() {
        let mut priors = LabelTimePriors::default();
        priors.entries.insert(
            (Label::Cardiomegaly, Verdict::Positive),
            LabelPrior { t_start: 0.0, t_end: 3.0, support: 4 },
        );
        let labels = BTreeMap::from([(Label::Cardiomegaly, Verdict::Positive)]);
        let seq = predict_prior("c", &labels, &priors, 10.0);
        assert_eq!(seq.spans, [IntentionSpan::new(Label::Cardiomegaly, Verdict::Positive, 0.0, 3.0)]);
        let labels = BTreeMap::from([(Label::Edema, Verdict::Positive), (Label::Pneumonia, Verdict::Absent)]);
        let seq = predict_prior("c", &labels, &priors, 30.0);
        assert_eq!(seq.spans, [IntentionSpan::new(Label::Edema, Verdict::Positive, 1.1, 30.0)]);
        let absent = BTreeMap::from([(Label::Edema, Verdict::Absent)]);
        assert!(predict_prior("c", &absent, &priors, 30.0).spans.is_empty());
        let short = predict_prior("c", &labels, &priors, 0.5);
        assert_eq!((short.spans[0].t_start, short.spans[0].t_end), (0.5, 0.5));
    }

    #[test]
    fn external_lines() {
        let text = concat!(
            r#"{"case_id":"c1","duration":5,"spans":[{"label":"Edema","verdict":"positive","t_start":1,"t_end":9}]}"#,
            "\n"
        );
        let map = load_external_predictions(text.as_bytes()).unwrap();
        assert_eq!(map.len(), 1);
        assert_eq!(map["c1"].spans[0].t_end, 5.0);
        assert!(load_external_predictions(r#"{"case_id":"c1","duration":5,"spans":[{"label":"Bogus","verdict":"positive","t_start":1,"t_end":2}]}"#.as_bytes()).is_err());
    }

    #[test]
    fn predictor_kind_parsing() {
        assert_eq!(PredictorKind::parse("prior", None).unwrap(), PredictorKind::Prior);
        assert!(PredictorKind::parse("external", None).is_err());
        assert!(PredictorKind::parse("neural", None).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let m = FeatureMatrix::from_rows(&[vec![1.5, -2.0], vec![0.25, 8.0]], 4, 2).unwrap();
        let mut bytes = Vec::new();
        m.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 16 + 4 * 2 * 8);
        assert_eq!(&bytes[..4], b"GKFM");
        assert_eq!(FeatureMatrix::read_from(bytes.as_slice()).unwrap(), m);
        bytes[0] = b'X';
        assert!(FeatureMatrix::read_from(bytes.as_slice()).is_err());
    }

    fn arb_video() -> impl Strategy<Value = HeatmapVideo> {
        (1usize..6, 1u32..20, 1u32..20).prop_flat_map(|(n, w, h)| {
            prop::collection::vec(prop::collection::vec(any::<u8>(), (w * h * 3) as usize), n).prop_map(
                move |frames| HeatmapVideo {
                    frames: frames
                        .into_iter()
                        .enumerate()
                        .map(|(k, px)| Frame::new(w, h, 3, px, k as f64).unwrap())
                        .collect(),
                    fps: 1.0,
                    duration: n as f64,
                    base_image_ref: PathBuf::new(),
                    params: RenderParams::default(),
                },
            )
        })
    }

    proptest! {
        #[test]
        fn padding_rows_are_zero(video in arb_video(), kind in prop::sample::select(vec![
            FeatureKind::Downsample16, FeatureKind::IntensityHistogram, FeatureKind::HeatMoments,
        ]), max_frames in 1usize..8) {
            let m = extract_frame_features(&video, &FeatureParams { max_frames, kind }).unwrap();
            prop_assert_eq!(m.valid_rows(), video.frames.len().min(max_frames));
            prop_assert_eq!(m.as_slice().len(), max_frames * kind.dim());
            for i in m.valid_rows()..max_frames {
                prop_assert!(m.row(i).iter().all(|v| v.to_bits() == 0));
            }
        }

        #[test]
        fn features_are_per_frame(video in arb_video(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let params = FeatureParams { max_frames: 10, kind: FeatureKind::Downsample16 };
            let base = extract_frame_features(&video, &params).unwrap();
            let mut order: Vec<usize> = (0..video.frames.len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let mut shuffled = video.clone();
            shuffled.frames = order.iter().map(|&i| video.frames[i].clone()).collect();
            let m = extract_frame_features(&shuffled, &params).unwrap();
            for (pos, &i) in order.iter().enumerate() {
                prop_assert_eq!(m.row(pos), base.row(i));
            }
        }
    }
}
