//! Scoring predicted intentions against ground truth.
//!
//! Sequence metrics (BLEU, CIDEr) run over serialized token ids; temporal
//! metrics run over spans paired by (label, verdict).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::hash::Hash;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{serialize_sequence, Vocab, BOS, EOS};
use crate::intent::{span_order, IntentionSequence, IntentionSpan, Label, Verdict};
use crate::stats::lower_median;

pub const DEFAULT_BIN_WIDTH: f64 = 0.1;
pub const MAX_NGRAM: usize = 4;
const CIDER_SCALE: f64 = 10.0;
// Keeps deltas that are exact multiples of the bin width out of the bin below.
const BIN_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub label: Label,
    pub verdict: Verdict,
    pub gt_span: IntentionSpan,
    pub pred_span: IntentionSpan,
    /// gt start minus predicted start, seconds.
    pub start_delta: f64,
    pub end_delta: f64,
}

impl MatchedPair {
    fn new(gt: IntentionSpan, pred: IntentionSpan) -> Self {
        MatchedPair {
            label: gt.label,
            verdict: gt.verdict,
            start_delta: gt.t_start - pred.t_start,
            end_delta: gt.t_end - pred.t_end,
            gt_span: gt,
            pred_span: pred,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpanMatching {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_pred: Vec<IntentionSpan>,
    pub unmatched_gt: Vec<IntentionSpan>,
}

fn group(spans: &[IntentionSpan]) -> BTreeMap<(Label, Verdict), Vec<IntentionSpan>> {
    let mut groups: BTreeMap<_, Vec<_>> = BTreeMap::new();
    for s in spans {
        groups.entry((s.label, s.verdict)).or_default().push(*s);
    }
    for g in groups.values_mut() {
        g.sort_by(span_order);
    }
    groups
}

/// Pairs the i-th predicted span with the i-th ground-truth span of each
/// (label, verdict) group, both in start order.
pub fn match_spans(pred: &IntentionSequence, gt: &IntentionSequence) -> Result<SpanMatching> {
    if pred.case_id != gt.case_id {
        return Err(Error::Data(format!(
            "cannot match prediction for {} against ground truth for {}",
            pred.case_id, gt.case_id
        )));
    }
    let mut preds = group(&pred.spans);
    let gts = group(&gt.spans);
    let mut out = SpanMatching::default();
    for (key, g) in gts {
        let p = preds.remove(&key).unwrap_or_default();
        let paired = g.len().min(p.len());
        out.pairs
            .extend(g.iter().zip(&p).map(|(g, p)| MatchedPair::new(*g, *p)));
        out.unmatched_gt.extend_from_slice(&g[paired..]);
        out.unmatched_pred.extend_from_slice(&p[paired..]);
    }
    for p in preds.into_values() {
        out.unmatched_pred.extend(p);
    }
    Ok(out)
}

/// Median time delay error for `label`: the lower median of signed start
/// deltas. `None` when the label has no pairs.
pub fn mtde(pairs: &[MatchedPair], label: Label) -> Option<f64> {
    let deltas: Vec<f64> = pairs
        .iter()
        .filter(|p| p.label == label)
        .map(|p| p.start_delta)
        .collect();
    lower_median(&deltas)
}

pub fn mtde_per_label(pairs: &[MatchedPair]) -> BTreeMap<Label, f64> {
    Label::ALL
        .into_iter()
        .filter_map(|l| mtde(pairs, l).map(|m| (l, m)))
        .collect()
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_default() += 1;
        }
    }
    counts
}

fn check_corpora<T>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Data("metric over an empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Data(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    Ok(())
}

/// Corpus-level BLEU-1 through BLEU-`max_n` with one reference per candidate.
///
/// Precision of order k is clipped matches over candidate k-grams. When
/// neither side has any k-gram the precision counts as 1; when only the
/// candidate side lacks them it is 0. Brevity penalty is
/// `exp(min(0, 1 - r / c))`.
pub fn bleu_n<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>], max_n: usize) -> Result<Vec<f64>> {
    check_corpora(candidates, references)?;
    if !(1..=MAX_NGRAM).contains(&max_n) {
        return Err(Error::Config(format!("BLEU order must be 1..=4, got {max_n}")));
    }
    let mut log_sum = 0.0;
    let mut zero = false;
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let bp = match (c, r) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ => (1.0 - r as f64 / c as f64).min(0.0).exp(),
    };
    let mut scores = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let mut matched = 0usize;
        let mut total = 0usize;
        let mut ref_total = 0usize;
        for (cand, reference) in candidates.iter().zip(references) {
            let rc = ngram_counts(reference, n);
            ref_total += rc.values().sum::<usize>();
            for (g, count) in ngram_counts(cand, n) {
                total += count;
                matched += count.min(rc.get(g).copied().unwrap_or(0));
            }
        }
        let p = match (total, ref_total) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            _ => matched as f64 / total as f64,
        };
        if p == 0.0 {
            zero = true;
        } else {
            log_sum += p.ln();
        }
        scores.push(if zero { 0.0 } else { bp * (log_sum / n as f64).exp() });
    }
    Ok(scores)
}

fn tfidf<'a, T: Eq + Hash>(counts: &HashMap<&'a [T], usize>, idf: &impl Fn(&[T]) -> f64) -> HashMap<&'a [T], f64> {
    counts.iter().map(|(g, &c)| (*g, c as f64 * idf(g))).collect()
}

/// CIDEr with one reference per case: TF-IDF n-gram vectors (idf from the
/// references), cosine per order 1..=4, averaged over orders and cases, x10.
pub fn cider<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    check_corpora(candidates, references)?;
    if candidates.len() < 2 {
        return Err(Error::Data(
            "CIDEr needs at least 2 cases; document frequencies are degenerate with 1".into(),
        ));
    }
    let n_docs = references.len() as f64;
    let mut total = 0.0;
    for n in 1..=MAX_NGRAM {
        let ref_counts: Vec<HashMap<&[T], usize>> = references.iter().map(|r| ngram_counts(r, n)).collect();
        let mut df: HashMap<&[T], usize> = HashMap::new();
        for rc in &ref_counts {
            for g in rc.keys() {
                *df.entry(*g).or_default() += 1;
            }
        }
        let idf = |g: &[T]| (n_docs / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
        for (cand, rc) in candidates.iter().zip(&ref_counts) {
            let cc = ngram_counts(cand, n);
            let (vc, vr) = (tfidf(&cc, &idf), tfidf(rc, &idf));
            let norm = |v: &HashMap<&[T], f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
            let (nc, nr) = (norm(&vc), norm(&vr));
            if nc > 0.0 && nr > 0.0 {
                let dot: f64 = vc.iter().map(|(g, x)| x * vr.get(g).copied().unwrap_or(0.0)).sum();
                total += dot / (nc * nr);
            }
        }
    }
    Ok(CIDER_SCALE * total / (MAX_NGRAM as f64 * candidates.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaKind {
    Start,
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub origin: f64,
    pub counts: BTreeMap<i64, usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Two columns, `bin_left_edge,count`, one row per occupied bin.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let io = |e: csv::Error| Error::Io(e.into());
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["bin_left_edge", "count"]).map_err(io)?;
        for (&bin, &count) in &self.counts {
            let edge = self.origin + bin as f64 * self.bin_width;
            w.write_record([format!("{edge:.6}"), count.to_string()]).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn delta_histogram(pairs: &[MatchedPair], which: DeltaKind, bin_width: f64) -> Result<Histogram> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(Error::Config(format!("bin width must be positive, got {bin_width}")));
    }
    let mut counts = BTreeMap::new();
    for p in pairs {
        let delta = match which {
            DeltaKind::Start => p.start_delta,
            DeltaKind::End => p.end_delta,
        };
        *counts.entry((delta / bin_width + BIN_EPS).floor() as i64).or_default() += 1;
    }
    Ok(Histogram {
        bin_width,
        origin: 0.0,
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Drop time tokens before computing BLEU and CIDEr.
    pub text_only: bool,
    pub bin_width: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            text_only: false,
            bin_width: DEFAULT_BIN_WIDTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_cases: usize,
    pub text_only: bool,
    pub bleu: [f64; 4],
    /// Absent when fewer than two cases were scored.
    pub cider: Option<f64>,
    pub mtde_per_label: BTreeMap<Label, f64>,
    pub precision: f64,
    pub recall: f64,
    pub n_pred_spans: usize,
    pub n_gt_spans: usize,
    pub n_matched: usize,
    pub start_hist: Histogram,
    pub end_hist: Histogram,
}

fn fraction(num: usize, den: usize, other: usize) -> f64 {
    match den {
        // Nothing predicted and nothing to find counts as perfect.
        0 if other == 0 => 1.0,
        0 => 0.0,
        _ => num as f64 / den as f64,
    }
}

/// Token ids used by the sequence metrics: the serialized sequence without
/// BOS/EOS, optionally without time tokens.
pub fn metric_tokens(seq: &IntentionSequence, vocab: &Vocab, text_only: bool) -> Result<Vec<u32>> {
    let toks = serialize_sequence(seq, vocab)?;
    let text_size = vocab.text_size() as u32;
    Ok(toks
        .ids
        .into_iter()
        .filter(|&id| id != BOS && id != EOS)
        .filter(|&id| !text_only || id < text_size)
        .collect())
}

/// Scores `preds` against `gts`. Ground-truth cases without a prediction
/// count as empty predictions.
pub fn evaluate_dataset(
    preds: &BTreeMap<String, IntentionSequence>,
    gts: &BTreeMap<String, IntentionSequence>,
    vocab: &Vocab,
    options: &EvalOptions,
) -> Result<EvaluationReport> {
    let unknown: Vec<&str> = preds.keys().filter(|k| !gts.contains_key(*k)).map(String::as_str).collect();
    if !unknown.is_empty() {
        return Err(Error::Data(format!(
            "predictions for cases missing from ground truth: {}",
            unknown.join(", ")
        )));
    }
    if gts.is_empty() {
        return Err(Error::Data("ground truth is empty".into()));
    }

    struct Scored {
        cand: Vec<u32>,
        reference: Vec<u32>,
        matching: SpanMatching,
    }
    let cases: Vec<(&IntentionSequence, IntentionSequence)> = gts
        .values()
        .map(|gt| {
            let pred = preds
                .get(&gt.case_id)
                .cloned()
                .unwrap_or_else(|| IntentionSequence::empty(gt.case_id.clone(), gt.duration));
            (gt, pred)
        })
        .collect();
    let scored: Vec<Scored> = cases
        .par_iter()
        .map(|(gt, pred)| {
            Ok(Scored {
                cand: metric_tokens(pred, vocab, options.text_only)?,
                reference: metric_tokens(gt, vocab, options.text_only)?,
                matching: match_spans(pred, gt)?,
            })
        })
        .collect::<Result<_>>()?;

    let cands: Vec<Vec<u32>> = scored.iter().map(|s| s.cand.clone()).collect();
    let refs: Vec<Vec<u32>> = scored.iter().map(|s| s.reference.clone()).collect();
    let bleu = bleu_n(&cands, &refs, MAX_NGRAM)?;
    let cider = if cands.len() >= 2 { Some(cider(&cands, &refs)?) } else { None };

    let pairs: Vec<MatchedPair> = scored.iter().flat_map(|s| s.matching.pairs.iter().cloned()).collect();
    let n_matched = pairs.len();
    let n_pred_spans = n_matched + scored.iter().map(|s| s.matching.unmatched_pred.len()).sum::<usize>();
    let n_gt_spans = n_matched + scored.iter().map(|s| s.matching.unmatched_gt.len()).sum::<usize>();
    Ok(EvaluationReport {
        n_cases: scored.len(),
        text_only: options.text_only,
        bleu: [bleu[0], bleu[1], bleu[2], bleu[3]],
        cider,
        mtde_per_label: mtde_per_label(&pairs),
        precision: fraction(n_matched, n_pred_spans, n_gt_spans),
        recall: fraction(n_matched, n_gt_spans, n_pred_spans),
        n_pred_spans,
        n_gt_spans,
        n_matched,
        start_hist: delta_histogram(&pairs, DeltaKind::Start, options.bin_width)?,
        end_hist: delta_histogram(&pairs, DeltaKind::End, options.bin_width)?,
    })
}

/// Writes `evaluation.json`, `start_hist.csv` and `end_hist.csv` into `dir`.
pub fn write_report(report: &EvaluationReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let json = dir.join("evaluation.json");
    fs::write(&json, serde_json::to_string_pretty(report)? + "\n").map_err(|e| Error::file(&json, e))?;
    for (name, hist) in [("start_hist.csv", &report.start_hist), ("end_hist.csv", &report.end_hist)] {
        let path = dir.join(name);
        let file = fs::File::create(&path).map_err(|e| Error::file(&path, e))?;
        hist.write_csv(file)?;
    }
    Ok(())
}
