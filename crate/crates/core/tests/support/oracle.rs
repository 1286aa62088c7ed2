//! Slow, direct reimplementations used as test oracles. Everything here uses
//! linear scans and plain products so it shares no code paths with the
//! library versions.

#![allow(dead_code)]

use gik_core::heatmap::Frame;
use gik_core::{IntentionSequence, IntentionSpan};

fn ngrams<T: Clone>(tokens: &[T], n: usize) -> Vec<Vec<T>> {
    if n == 0 || tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].to_vec()).collect()
}

fn count<T: PartialEq>(items: &[Vec<T>], g: &[T]) -> usize {
    items.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct<T: PartialEq + Clone>(items: &[Vec<T>]) -> Vec<Vec<T>> {
    let mut out: Vec<Vec<T>> = Vec::new();
    for x in items {
        if !out.contains(x) {
            out.push(x.clone());
        }
    }
    out
}

/// Corpus BLEU-1..=max_n as the geometric mean of modified precisions.
pub fn bleu<T: PartialEq + Clone>(cands: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Vec<f64> {
    let c: usize = cands.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c == 0 {
        if r == 0 { 1.0 } else { 0.0 }
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let mut precisions = Vec::new();
    for n in 1..=max_n {
        let (mut clipped, mut total, mut ref_total) = (0, 0, 0);
        for (cand, reference) in cands.iter().zip(refs) {
            let cg = ngrams(cand, n);
            let rg = ngrams(reference, n);
            total += cg.len();
            ref_total += rg.len();
            for g in distinct(&cg) {
                clipped += count(&cg, &g).min(count(&rg, &g));
            }
        }
        precisions.push(if total == 0 {
            if ref_total == 0 { 1.0 } else { 0.0 }
        } else {
            clipped as f64 / total as f64
        });
    }
    (1..=max_n)
        .map(|n| {
            let product: f64 = precisions[..n].iter().product();
            bp * product.powf(1.0 / n as f64)
        })
        .collect()
}

/// CIDEr with idf = ln(N / max(1, df)) over the references, cosine per order,
/// averaged over orders 1..=4 and cases, scaled by 10.
pub fn cider<T: PartialEq + Clone>(cands: &[Vec<T>], refs: &[Vec<T>]) -> f64 {
    let n_docs = refs.len() as f64;
    let mut total = 0.0;
    for n in 1..=4 {
        let ref_grams: Vec<Vec<Vec<T>>> = refs.iter().map(|r| ngrams(r, n)).collect();
        let idf = |g: &[T]| {
            let df = ref_grams.iter().filter(|rg| count(rg, g) > 0).count().max(1);
            (n_docs / df as f64).ln()
        };
        for (cand, rg) in cands.iter().zip(&ref_grams) {
            let cg = ngrams(cand, n);
            let mut keys = distinct(&cg);
            for g in distinct(rg) {
                if !keys.contains(&g) {
                    keys.push(g);
                }
            }
            let (mut dot, mut nc, mut nr) = (0.0, 0.0, 0.0);
            for g in &keys {
                let w = idf(g);
                let a = count(&cg, g) as f64 * w;
                let b = count(rg, g) as f64 * w;
                dot += a * b;
                nc += a * a;
                nr += b * b;
            }
            if nc > 0.0 && nr > 0.0 {
                total += dot / (nc.sqrt() * nr.sqrt());
            }
        }
    }
    10.0 * total / (4.0 * cands.len() as f64)
}

/// Start deltas (gt minus pred) of greedily matched spans: each ground-truth
/// span, taken in start order, claims the earliest unused prediction with the
/// same label and verdict.
pub fn matched_start_deltas(pred: &IntentionSequence, gt: &IntentionSequence) -> Vec<(IntentionSpan, f64)> {
    let by_start = |spans: &[IntentionSpan]| {
        let mut v = spans.to_vec();
        v.sort_by(|a, b| a.t_start.total_cmp(&b.t_start).then(a.t_end.total_cmp(&b.t_end)));
        v
    };
    let preds = by_start(&pred.spans);
    let mut used = vec![false; preds.len()];
    let mut out = Vec::new();
    for g in by_start(&gt.spans) {
        for (i, p) in preds.iter().enumerate() {
            if !used[i] && p.label == g.label && p.verdict == g.verdict {
                used[i] = true;
                out.push((g, g.t_start - p.t_start));
                break;
            }
        }
    }
    out
}

/// Lower median by full sort.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    (!v.is_empty()).then(|| v[(v.len() - 1) / 2])
}

/// Per-pixel mean in f64, rounded half-up.
pub fn mean_pixels(frames: &[Frame]) -> Vec<u8> {
    let len = frames[0].pixels.len();
    (0..len)
        .map(|i| {
            let sum: f64 = frames.iter().map(|f| f.pixels[i] as f64).sum();
            (sum / frames.len() as f64 + 0.5).floor() as u8
        })
        .collect()
}
