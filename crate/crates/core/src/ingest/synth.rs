//! Synthetic reading sessions with known gaze targets.
//!
//! Each case has one to four intentions laid out in equal time slots after a
//! short overview scan. While an intention is being voiced, fixations scatter
//! around the label's anchor disc; between intentions the gaze roams with
//! short, sparse fixations.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use image::{GrayImage, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, FixationRecord, GazeSession, SplitTag, TimedSentence};
use crate::error::{Error, Result};
use crate::intent::{Label, Verdict};
use crate::labeler::{RuleTable, DEFAULT_SPEECH_ONSET};

const ANCHOR_TABLE: &str = include_str!("../../data/anchors.tsv");

/// Radius of every label's anchor disc, in normalized units.
pub const ANCHOR_RADIUS: f64 = 0.12;

const MIN_SLOT: f64 = 5.0;
const TAIL: f64 = 0.5;
const SACCADE: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

impl Anchor {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.x).hypot(y - self.y) <= self.radius
    }
}

/// The gaze anchor disc the generator uses for `label`.
pub fn anchor(label: Label) -> Anchor {
    static TABLE: OnceLock<BTreeMap<Label, Anchor>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = BTreeMap::new();
        for line in ANCHOR_TABLE.lines().skip_while(|l| l.starts_with('#')).skip(1) {
            let fields: Vec<&str> = line.split('\t').collect();
            let label: Label = fields[0].parse().expect("anchor table label");
            let x = fields[1].parse().expect("anchor table x");
            let y = fields[2].parse().expect("anchor table y");
            table.insert(
                label,
                Anchor {
                    x,
                    y,
                    radius: ANCHOR_RADIUS,
                },
            );
        }
        assert_eq!(table.len(), Label::ALL.len(), "anchor table covers every label");
        table
    })[&label]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_cases: usize,
    /// (height, width) in pixels.
    pub image_size: (u32, u32),
    pub label_pool: Vec<Label>,
    pub seed: u64,
    /// (min, max) session duration in seconds.
    pub duration_range: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_cases: 50,
            image_size: (128, 128),
            label_pool: Label::ALL
                .into_iter()
                .filter(|&l| l != Label::NoFinding)
                .collect(),
            seed: 0,
            duration_range: (15.0, 25.0),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.duration_range;
        if self.n_cases == 0 {
            return Err(Error::Config("n_cases must be at least 1".into()));
        }
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("duration range ({lo}, {hi}) is not ordered")));
        }
        if lo < 3.0 {
            return Err(Error::Config("synthetic sessions need at least 3 s".into()));
        }
        if self.label_pool.is_empty() {
            return Err(Error::Config("label pool is empty".into()));
        }
        if self.image_size.0 < 8 || self.image_size.1 < 8 {
            return Err(Error::Config("image size must be at least 8x8".into()));
        }
        Ok(())
    }
}

fn ms(t: f64) -> f64 {
    (t * 1000.0).round() / 1000.0
}

fn case_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn sentence(rng: &mut ChaCha8Rng, label: Label, verdict: Verdict, rules: &RuleTable) -> String {
    let phrase = rules.positive_phrase(label);
    if label == Label::NoFinding {
        return phrase.to_string();
    }
    let templates: &[&str] = match verdict {
        Verdict::Negative => &["no {}", "there is no {}", "no evidence of {}"],
        Verdict::Uncertain => &["possible {}", "{} cannot be excluded", "may represent {}"],
        _ => &["there is {}", "{} is present", "{} is noted"],
    };
    let template = templates[rng.random_range(0..templates.len())];
    template.replacen("{}", phrase, 1)
}

fn push_roaming(rng: &mut ChaCha8Rng, out: &mut Vec<FixationRecord>, from: f64, to: f64) {
    let mut t = from;
    while t + 0.15 <= to {
        let x = rng.random_range(0.1..0.9);
        let y = rng.random_range(0.1..0.9);
        out.push(FixationRecord {
            x: ms(x),
            y: ms(y),
            t_start: ms(t),
            t_end: ms(t + 0.15),
        });
        t += 0.6;
    }
}

fn generate_case(config: &SynthConfig, index: usize, rules: &RuleTable) -> GazeSession {
    let mut rng = case_rng(config.seed, index);
    let (lo, hi) = config.duration_range;
    let duration = ms(if hi > lo { rng.random_range(lo..=hi) } else { lo });
    let onset = ms(DEFAULT_SPEECH_ONSET + rng.random_range(0.0..0.4));
    let available = (duration - onset - TAIL).max(0.5);
    let max_spans = ((available / MIN_SLOT).floor() as usize)
        .clamp(1, 4)
        .min(config.label_pool.len());
    let count = rng.random_range(1..=max_spans);
    let mut pool = config.label_pool.clone();
    pool.shuffle(&mut rng);
    pool.truncate(count);

    let slot = available / count as f64;
    let mut fixations = Vec::new();
    let mut sentences = Vec::new();

    // Overview scan before speech starts.
    let mut t = 0.2;
    while t + 0.15 < onset {
        let dur = rng.random_range(0.15..0.3_f64).min(onset - t);
        fixations.push(FixationRecord {
            x: ms(rng.random_range(0.15..0.85)),
            y: ms(rng.random_range(0.15..0.85)),
            t_start: ms(t),
            t_end: ms(t + dur),
        });
        t += dur + SACCADE;
    }

    let mut previous_end = onset;
    for (j, &label) in pool.iter().enumerate() {
        let slot_start = onset + j as f64 * slot;
        let start = ms(slot_start + slot * rng.random_range(0.0..0.1));
        let end = ms(start + slot * rng.random_range(0.5..0.65));
        let verdict = if label == Label::NoFinding {
            Verdict::Positive
        } else {
            match rng.random_range(0.0..1.0) {
                p if p < 0.7 => Verdict::Positive,
                p if p < 0.9 => Verdict::Negative,
                _ => Verdict::Uncertain,
            }
        };

        if j > 0 {
            push_roaming(&mut rng, &mut fixations, previous_end + 0.2, start - 0.2);
        }

        let target = anchor(label);
        let scatter = Normal::new(0.0, target.radius / 3.0).expect("positive sigma");
        let mut cursor = start;
        while end - cursor >= 0.05 {
            let f_end = (cursor + rng.random_range(0.15..0.4)).min(end);
            let x = (target.x + scatter.sample(&mut rng)).clamp(0.0, 1.0);
            let y = (target.y + scatter.sample(&mut rng)).clamp(0.0, 1.0);
            fixations.push(FixationRecord {
                x: ms(x),
                y: ms(y),
                t_start: ms(cursor),
                t_end: ms(f_end),
            });
            cursor = f_end + SACCADE;
        }
        sentences.push(TimedSentence::new(
            sentence(&mut rng, label, verdict, rules),
            start,
            end,
        ));
        previous_end = end;
    }
    push_roaming(&mut rng, &mut fixations, previous_end + 0.2, duration);
    fixations.retain(|f| f.t_end > f.t_start);

    GazeSession {
        case_id: format!("case{index:04}"),
        image_ref: format!("images/case{index:04}.png").into(),
        fixations,
        sentences,
        duration,
    }
}

/// Generates a synthetic dataset. The result is a pure function of `config`.
pub fn generate_synthetic_dataset(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let rules = RuleTable::builtin();
    let sessions = (0..config.n_cases)
        .map(|i| generate_case(config, i, rules))
        .collect();
    Dataset::new(sessions, SplitTag::Unsplit)
}

/// A deterministic chest-radiograph-like grayscale image: dark lung fields,
/// a bright mediastinum and heart shadow, faint ribs and mild noise.
pub fn synthetic_base_image(seed: u64, case_index: usize, (height, width): (u32, u32)) -> GrayImage {
    let mut rng = case_rng(seed ^ 0x5eed_1a6e, case_index);
    let noise = Normal::new(0.0, 4.0).expect("positive sigma");
    GrayImage::from_fn(width, height, |px, py| {
        let x = (px as f64 + 0.5) / width as f64;
        let y = (py as f64 + 0.5) / height as f64;
        let ellipse = |cx: f64, cy: f64, rx: f64, ry: f64| {
            ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0
        };
        let mut v: f64 = 25.0;
        if ellipse(0.5, 0.55, 0.46, 0.48) {
            v = 110.0;
        }
        if ellipse(0.3, 0.5, 0.17, 0.33) || ellipse(0.7, 0.5, 0.17, 0.33) {
            v = 55.0;
            if ((y * 14.0).fract() - 0.5).abs() < 0.08 {
                v += 25.0;
            }
        }
        if (x - 0.5).abs() < 0.06 {
            v = 170.0;
        }
        if ellipse(0.56, 0.62, 0.14, 0.11) {
            v = 160.0;
        }
        Luma([(v + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8])
    })
}
