//! Labels, verdicts and temporally grounded intention sequences.
//!
//! An intention is a (label, verdict) pair asserted by the reader over a time
//! interval. Sequences of intentions are both the ground truth derived from
//! transcripts and the unit every predictor emits.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The fourteen canonical chest radiograph finding categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    NoFinding,
    EnlargedCardiomediastinum,
    Cardiomegaly,
    LungOpacity,
    LungLesion,
    Edema,
    Consolidation,
    Pneumonia,
    Atelectasis,
    Pneumothorax,
    PleuralEffusion,
    PleuralOther,
    Fracture,
    SupportDevices,
}

impl Label {
    pub const ALL: [Label; 14] = [
        Label::NoFinding,
        Label::EnlargedCardiomediastinum,
        Label::Cardiomegaly,
        Label::LungOpacity,
        Label::LungLesion,
        Label::Edema,
        Label::Consolidation,
        Label::Pneumonia,
        Label::Atelectasis,
        Label::Pneumothorax,
        Label::PleuralEffusion,
        Label::PleuralOther,
        Label::Fracture,
        Label::SupportDevices,
    ];

    /// Canonical identifier, e.g. `PleuralEffusion`.
    pub fn id(self) -> &'static str {
        match self {
            Label::NoFinding => "NoFinding",
            Label::EnlargedCardiomediastinum => "EnlargedCardiomediastinum",
            Label::Cardiomegaly => "Cardiomegaly",
            Label::LungOpacity => "LungOpacity",
            Label::LungLesion => "LungLesion",
            Label::Edema => "Edema",
            Label::Consolidation => "Consolidation",
            Label::Pneumonia => "Pneumonia",
            Label::Atelectasis => "Atelectasis",
            Label::Pneumothorax => "Pneumothorax",
            Label::PleuralEffusion => "PleuralEffusion",
            Label::PleuralOther => "PleuralOther",
            Label::Fracture => "Fracture",
            Label::SupportDevices => "SupportDevices",
        }
    }

    /// Lowercase word form used in token sequences, e.g. `pleural effusion`.
    pub fn phrase(self) -> &'static str {
        match self {
            Label::NoFinding => "no finding",
            Label::EnlargedCardiomediastinum => "enlarged cardiomediastinum",
            Label::Cardiomegaly => "cardiomegaly",
            Label::LungOpacity => "lung opacity",
            Label::LungLesion => "lung lesion",
            Label::Edema => "edema",
            Label::Consolidation => "consolidation",
            Label::Pneumonia => "pneumonia",
            Label::Atelectasis => "atelectasis",
            Label::Pneumothorax => "pneumothorax",
            Label::PleuralEffusion => "pleural effusion",
            Label::PleuralOther => "pleural other",
            Label::Fracture => "fracture",
            Label::SupportDevices => "support devices",
        }
    }

    pub fn words(self) -> impl Iterator<Item = &'static str> {
        self.phrase().split(' ')
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_phrase(phrase: &str) -> Option<Label> {
        Label::ALL.into_iter().find(|l| l.phrase() == phrase)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Alternative names found in reports and result tables. Some imply a verdict:
/// "Normal Heart" is a negative cardiomegaly finding.
const ALIASES: &[(&str, Label, Option<Verdict>)] = &[
    ("effusion", Label::PleuralEffusion, None),
    ("normalheart", Label::Cardiomegaly, Some(Verdict::Negative)),
    ("normal", Label::NoFinding, None),
    ("opacity", Label::LungOpacity, None),
    ("lesion", Label::LungLesion, None),
    ("supportdevice", Label::SupportDevices, None),
    ("enlargedheart", Label::Cardiomegaly, None),
];

fn squash(name: &str) -> String {
    name.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Resolves a label name written in any common form: canonical id, word
/// phrase, display name ("Pleural Effusion") or a table alias ("Effusion").
/// Returns the verdict implied by the alias, if any.
pub fn resolve_label(name: &str) -> Option<(Label, Option<Verdict>)> {
    let key = squash(name);
    if key.is_empty() {
        return None;
    }
    if let Some(label) = Label::ALL.into_iter().find(|l| squash(l.id()) == key) {
        return Some((label, None));
    }
    ALIASES
        .iter()
        .find(|(alias, _, _)| *alias == key)
        .map(|&(_, label, verdict)| (label, verdict))
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        resolve_label(s)
            .map(|(label, _)| label)
            .ok_or_else(|| Error::Data(format!("unknown label `{s}`")))
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.id())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-label outcome of report condensation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Positive,
    Negative,
    Uncertain,
    Absent,
}

impl Verdict {
    pub const ALL: [Verdict; 4] = [
        Verdict::Positive,
        Verdict::Negative,
        Verdict::Uncertain,
        Verdict::Absent,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Verdict::Positive => "positive",
            Verdict::Negative => "negative",
            Verdict::Uncertain => "uncertain",
            Verdict::Absent => "absent",
        }
    }

    pub fn from_word(word: &str) -> Option<Verdict> {
        Verdict::ALL.into_iter().find(|v| v.word() == word)
    }

    /// Aggregation rank: Positive > Uncertain > Negative > Absent.
    pub fn precedence(self) -> u8 {
        match self {
            Verdict::Positive => 3,
            Verdict::Uncertain => 2,
            Verdict::Negative => 1,
            Verdict::Absent => 0,
        }
    }

    /// The stronger of two verdicts under [`Verdict::precedence`].
    pub fn max_precedence(self, other: Verdict) -> Verdict {
        if other.precedence() > self.precedence() {
            other
        } else {
            self
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_lowercase();
        match lower.as_str() {
            "pos" | "1" => Ok(Verdict::Positive),
            "neg" | "0" => Ok(Verdict::Negative),
            "unc" | "-1" => Ok(Verdict::Uncertain),
            other => Verdict::from_word(other)
                .ok_or_else(|| Error::Data(format!("unknown verdict `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentionSpan {
    pub label: Label,
    pub verdict: Verdict,
    pub t_start: f64,
    pub t_end: f64,
}

impl IntentionSpan {
    pub fn new(label: Label, verdict: Verdict, t_start: f64, t_end: f64) -> Self {
        IntentionSpan {
            label,
            verdict,
            t_start,
            t_end,
        }
    }
}

/// Ordering used whenever spans must be listed deterministically.
pub(crate) fn span_order(a: &IntentionSpan, b: &IntentionSpan) -> std::cmp::Ordering {
    a.t_start
        .total_cmp(&b.t_start)
        .then(a.t_end.total_cmp(&b.t_end))
        .then(a.label.cmp(&b.label))
        .then(a.verdict.cmp(&b.verdict))
}

/// The intentions of one case, sorted by start time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentionSequence {
    pub case_id: String,
    pub duration: f64,
    pub spans: Vec<IntentionSpan>,
}

impl IntentionSequence {
    /// Builds a sequence, stably sorting spans by start time.
    pub fn new(case_id: impl Into<String>, duration: f64, mut spans: Vec<IntentionSpan>) -> Self {
        spans.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
        IntentionSequence {
            case_id: case_id.into(),
            duration,
            spans,
        }
    }

    pub fn empty(case_id: impl Into<String>, duration: f64) -> Self {
        IntentionSequence::new(case_id, duration, Vec::new())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return Err(Error::range(format!(
                "case {}: duration {} is not a nonnegative number",
                self.case_id, self.duration
            )));
        }
        for (i, span) in self.spans.iter().enumerate() {
            if !(span.t_start >= 0.0 && span.t_end >= span.t_start && span.t_end <= self.duration)
            {
                return Err(Error::range(format!(
                    "case {}: span {i} [{}, {}] violates 0 <= start <= end <= {}",
                    self.case_id, span.t_start, span.t_end, self.duration
                )));
            }
            if i > 0 && self.spans[i - 1].t_start > span.t_start {
                return Err(Error::range(format!(
                    "case {}: spans not sorted by start at {i}",
                    self.case_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SpanLine {
    label: String,
    verdict: String,
    t_start: f64,
    t_end: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SequenceLine {
    case_id: String,
    duration: f64,
    spans: Vec<SpanLine>,
}

/// Reads the prediction line format: one JSON object per line with keys
/// `case_id`, `duration` and `spans`. Times are clamped to `[0, duration]`;
/// lines repeating a case id are merged and re-sorted. Blank lines are skipped.
pub fn read_sequences_jsonl<R: BufRead>(reader: R) -> Result<BTreeMap<String, IntentionSequence>> {
    let mut out: BTreeMap<String, IntentionSequence> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SequenceLine =
            serde_json::from_str(&line).map_err(|e| Error::parse(lineno, e.to_string()))?;
        if !(record.duration.is_finite() && record.duration >= 0.0) {
            return Err(Error::parse(lineno, format!("bad duration {}", record.duration)));
        }
        let mut spans = Vec::with_capacity(record.spans.len());
        for span in record.spans {
            let (label, implied) = resolve_label(&span.label)
                .ok_or_else(|| Error::parse(lineno, format!("unknown label `{}`", span.label)))?;
            let verdict = match implied {
                Some(v) => v,
                None => span
                    .verdict
                    .parse()
                    .map_err(|e: Error| Error::parse(lineno, e.to_string()))?,
            };
            if !(span.t_start.is_finite() && span.t_end.is_finite()) {
                return Err(Error::parse(lineno, "non-finite span time"));
            }
            if span.t_end < span.t_start {
                return Err(Error::parse(
                    lineno,
                    format!("span end {} before start {}", span.t_end, span.t_start),
                ));
            }
            let clamp = |t: f64| t.clamp(0.0, record.duration);
            spans.push(IntentionSpan::new(
                label,
                verdict,
                clamp(span.t_start),
                clamp(span.t_end),
            ));
        }
        match out.get_mut(&record.case_id) {
            Some(existing) => {
                // FIXME: conflicting durations for a repeated case keep the larger one;
                // spans from the shorter line are not rescaled.
                existing.duration = existing.duration.max(record.duration);
                existing.spans.extend(spans);
                existing.spans.sort_by(span_order);
            }
            None => {
                spans.sort_by(span_order);
                out.insert(
                    record.case_id.clone(),
                    IntentionSequence {
                        case_id: record.case_id,
                        duration: record.duration,
                        spans,
                    },
                );
            }
        }
    }
    Ok(out)
}

/// Writes sequences in the prediction line format, one case per line.
pub fn write_sequences_jsonl<'a, W, I>(mut writer: W, sequences: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a IntentionSequence>,
{
    for seq in sequences {
        let record = SequenceLine {
            case_id: seq.case_id.clone(),
            duration: seq.duration,
            spans: seq
                .spans
                .iter()
                .map(|s| SpanLine {
                    label: s.label.id().to_string(),
                    verdict: s.verdict.word().to_string(),
                    t_start: s.t_start,
                    t_end: s.t_end,
                })
                .collect(),
        };
        serde_json::to_writer(&mut writer, &record)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolves_display_names_and_aliases() {
        assert_eq!(resolve_label("Pleural Effusion"), Some((Label::PleuralEffusion, None)));
        assert_eq!(resolve_label("PleuralEffusion"), Some((Label::PleuralEffusion, None)));
        assert_eq!(resolve_label("pleural effusion"), Some((Label::PleuralEffusion, None)));
        assert_eq!(resolve_label("Effusion"), Some((Label::PleuralEffusion, None)));
        assert_eq!(
            resolve_label("Normal Heart"),
            Some((Label::Cardiomegaly, Some(Verdict::Negative)))
        );
        assert_eq!(resolve_label("Support Devices"), Some((Label::SupportDevices, None)));
        assert_eq!(resolve_label("spleen"), None);
        assert_eq!(resolve_label(""), None);
    }

    #[test]
    fn phrases_round_trip() {
        for label in Label::ALL {
            assert_eq!(Label::from_phrase(label.phrase()), Some(label));
            assert_eq!(label.id().parse::<Label>().unwrap(), label);
        }
    }

    #[test]
    fn precedence_order() {
        use Verdict::*;
        assert_eq!(Negative.max_precedence(Positive), Positive);
        assert_eq!(Uncertain.max_precedence(Negative), Uncertain);
        assert_eq!(Absent.max_precedence(Negative), Negative);
        assert_eq!(Positive.max_precedence(Uncertain), Positive);
    }

    #[test]
    fn jsonl_clamps_and_merges_duplicates() {
        let text = concat!(
            r#"{"case_id":"c1","duration":10,"spans":[{"label":"Edema","verdict":"positive","t_start":4,"t_end":12}]}"#,
            "\n\n",
            r#"{"case_id":"c1","duration":10,"spans":[{"label":"Effusion","verdict":"negative","t_start":1,"t_end":2}]}"#,
            "\n"
        );
        let map = read_sequences_jsonl(text.as_bytes()).unwrap();
        assert_eq!(map.len(), 1);
        let seq = &map["c1"];
        assert_eq!(seq.spans.len(), 2);
        assert_eq!(seq.spans[0].label, Label::PleuralEffusion);
        assert_eq!(seq.spans[1].t_end, 10.0);
        seq.validate().unwrap();
    }

    #[test]
    fn jsonl_unknown_label_reports_line() {
        let text = concat!(
            r#"{"case_id":"c1","duration":10,"spans":[]}"#,
            "\n",
            r#"{"case_id":"c2","duration":10,"spans":[{"label":"Spleen","verdict":"positive","t_start":1,"t_end":2}]}"#,
        );
        match read_sequences_jsonl(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_write_then_read() {
        let seq = IntentionSequence::new(
            "case-9",
            12.5,
            vec![
                IntentionSpan::new(Label::Edema, Verdict::Uncertain, 3.0, 4.5),
                IntentionSpan::new(Label::Cardiomegaly, Verdict::Positive, 1.1, 12.5),
            ],
        );
        let mut buf = Vec::new();
        write_sequences_jsonl(&mut buf, [&seq]).unwrap();
        let back = read_sequences_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back["case-9"], seq);
    }
}
