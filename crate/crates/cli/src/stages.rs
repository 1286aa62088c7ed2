//! Pipeline stages. Each stage computes in memory and has a separate writer so
//! `pipeline` can chain stages without reloading intermediate files.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use serde_json::json;

use gik_core::eval::{evaluate_dataset, write_report, EvalOptions, EvaluationReport};
use gik_core::grammar::{build_vocab, serialize_sequence, Vocab};
use gik_core::heatmap::{load_base_image, read_video_dir, render_heatmap_video, write_video_dir, HeatmapVideo};
use gik_core::ingest::{
    generate_synthetic_dataset, load_manifest, split_dataset, synthetic_base_image, write_gaze_csv,
    write_manifest, write_transcript_jsonl, Dataset, ManifestEntry, SynthConfig,
};
use gik_core::intent::{read_sequences_jsonl, write_sequences_jsonl};
use gik_core::labeler::{build_ground_truth, label_report, RuleTable};
use gik_core::predict::{
    extract_frame_features, fit_label_priors, ExternalPredictions, FeatureMatrix, Predictor, PredictorKind, Query,
    RetrievalPredictor, TrainingExample,
};
use gik_core::region::{span_roi, write_overlays, RoiResult};
use gik_core::{Error, GrayImage, IntentionSequence, IntentionSpan, Label, Result, Verdict};

use crate::config::{derive_seed, EvalSplit, RunConfig};

pub type CaseMap<T> = BTreeMap<String, T>;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::file(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

fn write_sequences(path: &Path, seqs: &CaseMap<IntentionSequence>) -> Result<()> {
    let mut w = create(path)?;
    write_sequences_jsonl(&mut w, seqs.values())?;
    w.flush()?;
    Ok(())
}

pub fn read_sequences(path: &Path) -> Result<CaseMap<IntentionSequence>> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    read_sequences_jsonl(BufReader::new(file))
}

/// Generates a synthetic dataset under `cfg.out` and returns its manifest path.
pub fn synth(cfg: &RunConfig) -> Result<PathBuf> {
    let out = &cfg.out;
    let config = SynthConfig {
        n_cases: cfg.cases,
        image_size: (cfg.image_size, cfg.image_size),
        seed: derive_seed(cfg.seed, "synth"),
        duration_range: cfg.duration_range,
        ..SynthConfig::default()
    };
    let dataset = generate_synthetic_dataset(&config)?;
    create_dir(&out.join("images"))?;
    for (i, s) in dataset.sessions.iter().enumerate() {
        synthetic_base_image(config.seed, i, config.image_size).save(out.join(&s.image_ref))?;
    }
    let mut gaze = create(&out.join("gaze.csv"))?;
    write_gaze_csv(&mut gaze, &dataset.sessions)?;
    gaze.flush()?;
    let mut transcripts = create(&out.join("transcripts.jsonl"))?;
    write_transcript_jsonl(&mut transcripts, &dataset.sessions)?;
    transcripts.flush()?;
    let entries: Vec<ManifestEntry> = dataset
        .sessions
        .iter()
        .map(|s| ManifestEntry {
            case_id: s.case_id.clone(),
            image_path: s.image_ref.clone(),
            gaze_path: "gaze.csv".into(),
            transcript_path: "transcripts.jsonl".into(),
            duration: Some(s.duration),
        })
        .collect();
    let manifest = out.join("manifest.csv");
    write_manifest(create(&manifest)?, &entries)?;
    write_json(
        &out.join("synth.json"),
        &json!({
            "cases": dataset.len(),
            "seed": config.seed,
            "image_size": [config.image_size.0, config.image_size.1],
            "duration_range": [config.duration_range.0, config.duration_range.1],
            "fixations": dataset.sessions.iter().map(|s| s.fixations.len()).sum::<usize>(),
            "sentences": dataset.sessions.iter().map(|s| s.sentences.len()).sum::<usize>(),
        }),
    )?;
    info!("synth: {} cases written to {}", dataset.len(), out.display());
    Ok(manifest)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let manifest = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --manifest".into()))?;
    load_manifest(manifest)
}

pub fn load_bases(dataset: &Dataset) -> Result<Vec<GrayImage>> {
    dataset.sessions.iter().map(|s| load_base_image(&s.image_ref)).collect()
}

pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn split(cfg: &RunConfig, dataset: &Dataset) -> Result<Split> {
    let (train, val, test) = split_dataset(dataset, derive_seed(cfg.seed, "split"), cfg.split)?;
    Ok(Split { train, val, test })
}

fn sorted_ids(ds: &Dataset) -> Vec<String> {
    let mut ids = ds.case_ids();
    ids.sort();
    ids
}

pub fn write_ingest(cfg: &RunConfig, dataset: &Dataset, split: &Split) -> Result<()> {
    create_dir(&cfg.out)?;
    let sessions: Vec<_> = dataset
        .sessions
        .iter()
        .map(|s| {
            json!({
                "case_id": s.case_id,
                "image": s.image_ref,
                "fixations": s.fixations.len(),
                "sentences": s.sentences.len(),
                "duration": s.duration,
            })
        })
        .collect();
    write_json(&cfg.out.join("sessions.json"), &sessions)?;
    write_json(
        &cfg.out.join("split.json"),
        &json!({
            "fractions": cfg.split,
            "train": sorted_ids(&split.train),
            "val": sorted_ids(&split.val),
            "test": sorted_ids(&split.test),
        }),
    )?;
    info!(
        "ingest: {} sessions, split {}/{}/{} -> {}",
        dataset.len(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        cfg.out.display()
    );
    Ok(())
}

pub struct Labels {
    pub report_labels: CaseMap<BTreeMap<Label, Verdict>>,
    pub gt: CaseMap<IntentionSequence>,
    pub vocab: Vocab,
}

pub fn label(cfg: &RunConfig, dataset: &Dataset) -> Result<Labels> {
    let rules = RuleTable::builtin();
    let mut report_labels = CaseMap::new();
    let mut gt = CaseMap::new();
    let mut corpus = Vec::with_capacity(dataset.len());
    for s in &dataset.sessions {
        let report = s.report_text();
        report_labels.insert(s.case_id.clone(), label_report(&report, rules));
        gt.insert(s.case_id.clone(), build_ground_truth(&s.case_id, &s.sentences, s.duration, rules)?);
        corpus.push(report);
    }
    if corpus.is_empty() {
        corpus.push(String::new());
    }
    let vocab = build_vocab(&corpus, cfg.vocab_size, cfg.time_bins)?;
    Ok(Labels {
        report_labels,
        gt,
        vocab,
    })
}

pub fn write_labels(cfg: &RunConfig, labels: &Labels) -> Result<()> {
    create_dir(&cfg.out)?;
    let mut w = create(&cfg.out.join("labels.jsonl"))?;
    for (case_id, map) in &labels.report_labels {
        serde_json::to_writer(&mut w, &json!({ "case_id": case_id, "labels": map }))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    write_sequences(&cfg.out.join("gt.jsonl"), &labels.gt)?;
    labels.vocab.save(&cfg.out.join("vocab.txt"))?;
    let mut w = create(&cfg.out.join("gt_tokens.txt"))?;
    for seq in labels.gt.values() {
        let toks = serialize_sequence(seq, &labels.vocab)?;
        writeln!(w, "{}\t{}", seq.case_id, toks.to_human(&labels.vocab))?;
    }
    w.flush()?;
    let spans: usize = labels.gt.values().map(|s| s.spans.len()).sum();
    info!(
        "label: {} reports, {} ground-truth spans, vocabulary {}+{} -> {}",
        labels.gt.len(),
        spans,
        labels.vocab.text_size(),
        labels.vocab.time_bins(),
        cfg.out.display()
    );
    Ok(())
}

pub fn render(cfg: &RunConfig, dataset: &Dataset, bases: &[GrayImage]) -> Result<Vec<HeatmapVideo>> {
    dataset
        .sessions
        .iter()
        .zip(bases)
        .map(|(s, base)| render_heatmap_video(s, base, &cfg.render))
        .collect()
}

/// Videos from `cfg.videos` when given, rendered afresh otherwise.
pub fn videos(cfg: &RunConfig, dataset: &Dataset, bases: &[GrayImage]) -> Result<Vec<HeatmapVideo>> {
    match &cfg.videos {
        Some(dir) => dataset
            .sessions
            .iter()
            .map(|s| read_video_dir(&dir.join(&s.case_id)))
            .collect(),
        None => render(cfg, dataset, bases),
    }
}

pub fn write_videos(cfg: &RunConfig, dataset: &Dataset, videos: &[HeatmapVideo]) -> Result<()> {
    let dir = cfg.out.join("videos");
    create_dir(&dir)?;
    for (s, v) in dataset.sessions.iter().zip(videos) {
        write_video_dir(v, &dir.join(&s.case_id))?;
    }
    let frames: usize = videos.iter().map(|v| v.frames.len()).sum();
    write_json(
        &cfg.out.join("render.json"),
        &json!({ "videos": videos.len(), "frames": frames, "params": cfg.render }),
    )?;
    info!("render: {} videos, {} frames -> {}", videos.len(), frames, dir.display());
    Ok(())
}

pub fn features(cfg: &RunConfig, dataset: &Dataset, videos: &[HeatmapVideo]) -> Result<CaseMap<FeatureMatrix>> {
    dataset
        .sessions
        .iter()
        .zip(videos)
        .map(|(s, v)| Ok((s.case_id.clone(), extract_frame_features(v, &cfg.features)?)))
        .collect()
}

pub fn write_features(cfg: &RunConfig, features: &CaseMap<FeatureMatrix>) -> Result<()> {
    let dir = cfg.out.join("features");
    create_dir(&dir)?;
    for (case_id, m) in features {
        let mut w = create(&dir.join(format!("{case_id}.gkfm")))?;
        m.write_to(&mut w)?;
        w.flush()?;
    }
    let valid: BTreeMap<&str, usize> = features.iter().map(|(k, m)| (k.as_str(), m.valid_rows())).collect();
    write_json(
        &cfg.out.join("features.json"),
        &json!({
            "kind": cfg.features.kind,
            "max_frames": cfg.features.max_frames,
            "d": cfg.features.dim(),
            "valid_rows": valid,
        }),
    )?;
    info!("features: {} matrices of {}x{} -> {}", features.len(), cfg.features.max_frames, cfg.features.dim(), dir.display());
    Ok(())
}

pub struct Predictions {
    pub predictor: PredictorKind,
    pub preds: CaseMap<IntentionSequence>,
    pub gt_eval: CaseMap<IntentionSequence>,
    pub n_train: usize,
}

pub fn predict(
    cfg: &RunConfig,
    dataset: &Dataset,
    features: &CaseMap<FeatureMatrix>,
    labels: &Labels,
) -> Result<Predictions> {
    let split = split(cfg, dataset)?;
    let eval_set = match cfg.eval_split {
        EvalSplit::Train => &split.train,
        EvalSplit::Val => &split.val,
        EvalSplit::Test => &split.test,
        EvalSplit::All => dataset,
    };
    if eval_set.is_empty() {
        return Err(Error::Config(format!("the {:?} split is empty; adjust --split", cfg.eval_split)));
    }
    let missing = |case_id: &str| Error::Invariant(format!("no stage output for case {case_id}"));
    let training: Vec<TrainingExample> = split
        .train
        .sessions
        .iter()
        .map(|s| {
            Ok(TrainingExample {
                features: features.get(&s.case_id).ok_or_else(|| missing(&s.case_id))?.clone(),
                target: labels.gt.get(&s.case_id).ok_or_else(|| missing(&s.case_id))?.clone(),
            })
        })
        .collect::<Result<_>>()?;

    let kind = cfg.predictor_kind()?;
    let predictor: Box<dyn Predictor> = match &kind {
        PredictorKind::Retrieval => Box::new(RetrievalPredictor::new(training)?),
        PredictorKind::Prior => Box::new(fit_label_priors(&training)?),
        PredictorKind::External(path) => Box::new(ExternalPredictions(read_sequences(path)?)),
    };
    let mut preds = CaseMap::new();
    let mut gt_eval = CaseMap::new();
    for s in &eval_set.sessions {
        let query = Query {
            case_id: &s.case_id,
            duration: s.duration,
            features: features.get(&s.case_id).ok_or_else(|| missing(&s.case_id))?,
            report_labels: labels.report_labels.get(&s.case_id).ok_or_else(|| missing(&s.case_id))?,
        };
        preds.insert(s.case_id.clone(), predictor.predict(&query));
        gt_eval.insert(s.case_id.clone(), labels.gt[&s.case_id].clone());
    }
    Ok(Predictions {
        predictor: kind,
        preds,
        gt_eval,
        n_train: split.train.len(),
    })
}

pub fn write_predictions(cfg: &RunConfig, p: &Predictions) -> Result<()> {
    create_dir(&cfg.out)?;
    write_sequences(&cfg.out.join("predictions.jsonl"), &p.preds)?;
    write_sequences(&cfg.out.join("gt_eval.jsonl"), &p.gt_eval)?;
    let spans: usize = p.preds.values().map(|s| s.spans.len()).sum();
    write_json(
        &cfg.out.join("predict.json"),
        &json!({
            "predictor": p.predictor.name(),
            "eval_split": cfg.eval_split,
            "train_cases": p.n_train,
            "eval_cases": p.preds.len(),
            "predicted_spans": spans,
        }),
    )?;
    info!(
        "predict: {} predictor, {} training cases, {} spans over {} cases -> {}",
        p.predictor,
        p.n_train,
        spans,
        p.preds.len(),
        cfg.out.display()
    );
    Ok(())
}

pub type CaseRegions = Vec<(IntentionSpan, RoiResult)>;

/// Region of interest for every predicted span.
pub fn extract_rois(
    cfg: &RunConfig,
    dataset: &Dataset,
    bases: &[GrayImage],
    videos: &[HeatmapVideo],
    preds: &CaseMap<IntentionSequence>,
) -> Result<CaseMap<CaseRegions>> {
    let index: BTreeMap<&str, usize> = dataset
        .sessions
        .iter()
        .enumerate()
        .map(|(i, s)| (s.case_id.as_str(), i))
        .collect();
    let unknown: Vec<&str> = preds.keys().map(String::as_str).filter(|k| !index.contains_key(k)).collect();
    if !unknown.is_empty() {
        return Err(Error::Data(format!("predictions for cases not in the manifest: {}", unknown.join(", "))));
    }
    preds
        .iter()
        .map(|(case_id, seq)| {
            let i = index[case_id.as_str()];
            let regions = seq
                .spans
                .iter()
                .map(|span| Ok((*span, span_roi(&videos[i], &bases[i], span, cfg.threshold_frac)?)))
                .collect::<Result<_>>()?;
            Ok((case_id.clone(), regions))
        })
        .collect()
}

pub fn write_rois(cfg: &RunConfig, dataset: &Dataset, bases: &[GrayImage], rois: &CaseMap<CaseRegions>) -> Result<()> {
    let dir = cfg.out.join("roi");
    create_dir(&dir)?;
    let mut records = Vec::new();
    for (case_id, regions) in rois {
        let i = dataset
            .sessions
            .iter()
            .position(|s| &s.case_id == case_id)
            .ok_or_else(|| Error::Invariant(format!("case {case_id} vanished")))?;
        records.extend(write_overlays(&dir.join(case_id), case_id, &bases[i], regions)?);
    }
    let nonempty = rois.values().flatten().filter(|(_, r)| !r.bbox.is_empty()).count();
    write_json(
        &cfg.out.join("roi_summary.json"),
        &json!({
            "cases": rois.len(),
            "spans": records.len(),
            "nonempty": nonempty,
            "threshold_frac": cfg.threshold_frac,
            "regions": records,
        }),
    )?;
    info!("extract-roi: {} of {} regions nonempty -> {}", nonempty, records.len(), dir.display());
    Ok(())
}

pub fn default_vocab(cfg: &RunConfig) -> Result<Vocab> {
    match &cfg.vocab {
        Some(path) => Vocab::load(path),
        None => build_vocab(&[""], cfg.vocab_size, cfg.time_bins),
    }
}

pub fn evaluate(
    cfg: &RunConfig,
    preds: &CaseMap<IntentionSequence>,
    gts: &CaseMap<IntentionSequence>,
    vocab: &Vocab,
) -> Result<EvaluationReport> {
    let options = EvalOptions {
        text_only: cfg.text_only,
        ..EvalOptions::default()
    };
    evaluate_dataset(preds, gts, vocab, &options)
}

pub fn write_evaluation(cfg: &RunConfig, report: &EvaluationReport) -> Result<()> {
    write_report(report, &cfg.out)?;
    let cider = report.cider.map_or("n/a".to_string(), |c| format!("{c:.3}"));
    info!(
        "evaluate: {} cases, BLEU-1..4 {:.3}/{:.3}/{:.3}/{:.3}, CIDEr {}, precision {:.3}, recall {:.3} -> {}",
        report.n_cases,
        report.bleu[0],
        report.bleu[1],
        report.bleu[2],
        report.bleu[3],
        cider,
        report.precision,
        report.recall,
        cfg.out.display()
    );
    Ok(())
}
