//! Gaze sessions: fixation logs, timed transcripts, dataset manifests,
//! synthetic datasets and deterministic splits.

mod formats;
mod split;
mod synth;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use formats::{
    load_manifest, parse_gaze_csv, parse_transcript_jsonl, read_manifest, write_gaze_csv,
    write_manifest, write_transcript_jsonl, ManifestEntry,
};
pub use split::{split_dataset, split_sizes};
pub use synth::{
    anchor, generate_synthetic_dataset, synthetic_base_image, Anchor, SynthConfig, ANCHOR_RADIUS,
};

/// One gaze fixation in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixationRecord {
    pub x: f64,
    pub y: f64,
    pub t_start: f64,
    pub t_end: f64,
}

impl FixationRecord {
    pub fn new(x: f64, y: f64, t_start: f64, t_end: f64) -> Result<Self> {
        let fix = FixationRecord {
            x,
            y,
            t_start,
            t_end,
        };
        fix.validate()?;
        Ok(fix)
    }

    pub fn validate(&self) -> Result<()> {
        if !((0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)) {
            return Err(Error::range(format!(
                "fixation at ({}, {}) lies outside the unit square",
                self.x, self.y
            )));
        }
        if !(self.t_start >= 0.0 && self.t_end > self.t_start && self.t_end.is_finite()) {
            return Err(Error::range(format!(
                "fixation interval [{}, {}] must satisfy 0 <= start < end",
                self.t_start, self.t_end
            )));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

/// A transcribed sentence, optionally aligned to the session clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedSentence {
    pub text: String,
    /// `(t_start, t_end)` in seconds, or `None` when the source carries no timing.
    pub timing: Option<(f64, f64)>,
}

impl TimedSentence {
    pub fn new(text: impl Into<String>, t_start: f64, t_end: f64) -> Self {
        TimedSentence {
            text: text.into(),
            timing: Some((t_start, t_end)),
        }
    }

    pub fn untimed(text: impl Into<String>) -> Self {
        TimedSentence {
            text: text.into(),
            timing: None,
        }
    }

    pub fn t_start(&self) -> Option<f64> {
        self.timing.map(|(s, _)| s)
    }

    pub fn t_end(&self) -> Option<f64> {
        self.timing.map(|(_, e)| e)
    }
}

/// One reviewed case: what was looked at, what was said, and for how long.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeSession {
    pub case_id: String,
    pub image_ref: PathBuf,
    pub fixations: Vec<FixationRecord>,
    pub sentences: Vec<TimedSentence>,
    pub duration: f64,
}

impl GazeSession {
    /// Latest end time over fixations and timed sentences.
    pub fn max_end(&self) -> f64 {
        let fix = self.fixations.iter().map(|f| f.t_end);
        let said = self.sentences.iter().filter_map(TimedSentence::t_end);
        fix.chain(said).fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        for f in &self.fixations {
            f.validate()?;
        }
        if self
            .fixations
            .windows(2)
            .any(|w| w[0].t_start > w[1].t_start)
        {
            return Err(Error::range(format!(
                "case {}: fixations not sorted by start",
                self.case_id
            )));
        }
        if !(self.duration >= self.max_end()) {
            return Err(Error::range(format!(
                "case {}: duration {} shorter than last event at {}",
                self.case_id,
                self.duration,
                self.max_end()
            )));
        }
        Ok(())
    }

    /// Full report text: the transcript sentences joined in order.
    pub fn report_text(&self) -> String {
        self.sentences
            .iter()
            .map(|s| s.text.trim().trim_end_matches('.'))
            .collect::<Vec<_>>()
            .join(". ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Unsplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub sessions: Vec<GazeSession>,
    pub split_tag: SplitTag,
}

impl Dataset {
    pub fn new(sessions: Vec<GazeSession>, split_tag: SplitTag) -> Result<Self> {
        let mut ids: Vec<&str> = sessions.iter().map(|s| s.case_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Data(format!("duplicate case_id `{}`", w[0])));
        }
        Ok(Dataset {
            sessions,
            split_tag,
        })
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn get(&self, case_id: &str) -> Option<&GazeSession> {
        self.sessions.iter().find(|s| s.case_id == case_id)
    }

    pub fn case_ids(&self) -> Vec<String> {
        self.sessions.iter().map(|s| s.case_id.clone()).collect()
    }
}
