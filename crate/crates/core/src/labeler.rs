//! Rule-based condensation of report sentences into per-label verdicts.
//!
//! Mentions are found by longest-phrase matching over lowercase word tokens.
//! A mention becomes Uncertain or Negative when an uncertainty or negation cue
//! sits within a fixed token window before or after it, unless a scope-break
//! word ("but", "however", ...) intervenes. Uncertainty cues are checked first
//! so that phrases such as "can not exclude" stay uncertain.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::ingest::TimedSentence;
use crate::intent::{span_order, IntentionSequence, IntentionSpan, Label, Verdict};
use crate::text;

const BUILTIN_RULES: &str = include_str!("../data/rules.tsv");

/// Default token window for cue scope.
pub const DEFAULT_WINDOW: usize = 6;
/// Start time given to spans of sentences without timing.
pub const DEFAULT_SPEECH_ONSET: f64 = 1.1;
/// Same-intention spans separated by less than this many seconds are merged.
pub const DEFAULT_MERGE_GAP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
struct MentionRule {
    words: Vec<String>,
    label: Label,
    fixed: Option<Verdict>,
}

/// Mention phrases per label plus negation and uncertainty cues.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleTable {
    mentions: Vec<MentionRule>,
    pre_negation: Vec<Vec<String>>,
    post_negation: Vec<Vec<String>>,
    pre_uncertainty: Vec<Vec<String>>,
    post_uncertainty: Vec<Vec<String>>,
    scope_breaks: Vec<Vec<String>>,
    window: usize,
    first_positive: BTreeMap<Label, String>,
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Mentions,
    PreNegation,
    PostNegation,
    PreUncertainty,
    PostUncertainty,
    ScopeBreak,
    Window,
}

impl RuleTable {
    /// The shipped table covering all fourteen labels.
    pub fn builtin() -> &'static RuleTable {
        static TABLE: OnceLock<RuleTable> = OnceLock::new();
        TABLE.get_or_init(|| RuleTable::parse(BUILTIN_RULES).expect("builtin rule table is valid"))
    }

    /// Parses the tab-separated table format. See `data/rules.tsv`.
    pub fn parse(source: &str) -> Result<RuleTable> {
        let mut table = RuleTable {
            mentions: Vec::new(),
            pre_negation: Vec::new(),
            post_negation: Vec::new(),
            pre_uncertainty: Vec::new(),
            post_uncertainty: Vec::new(),
            scope_breaks: Vec::new(),
            window: DEFAULT_WINDOW,
            first_positive: BTreeMap::new(),
        };
        let mut section = Section::None;
        let mut owners: BTreeMap<Vec<String>, Label> = BTreeMap::new();

        for (idx, raw) in source.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            if let Some(name) = line.trim().strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = match name {
                    "mentions" => Section::Mentions,
                    "pre_negation" => Section::PreNegation,
                    "post_negation" => Section::PostNegation,
                    "pre_uncertainty" => Section::PreUncertainty,
                    "post_uncertainty" => Section::PostUncertainty,
                    "scope_break" => Section::ScopeBreak,
                    "window" => Section::Window,
                    other => return Err(Error::parse(lineno, format!("unknown section [{other}]"))),
                };
                continue;
            }
            match section {
                Section::None => {
                    return Err(Error::parse(lineno, "entry before any [section] header"))
                }
                Section::Mentions => {
                    let fields: Vec<&str> = line.split('\t').collect();
                    if !(2..=3).contains(&fields.len()) {
                        return Err(Error::parse(lineno, "expected label<TAB>phrase[<TAB>verdict]"));
                    }
                    let label: Label = fields[0]
                        .trim()
                        .parse()
                        .map_err(|e: Error| Error::parse(lineno, e.to_string()))?;
                    let words = phrase_words(fields[1], lineno)?;
                    let fixed = match fields.get(2) {
                        Some(v) => Some(
                            v.parse::<Verdict>()
                                .map_err(|e| Error::parse(lineno, e.to_string()))?,
                        ),
                        None => None,
                    };
                    if let Some(prev) = owners.insert(words.clone(), label) {
                        if prev != label {
                            return Err(Error::parse(
                                lineno,
                                format!("phrase `{}` maps to both {prev} and {label}", fields[1]),
                            ));
                        }
                    }
                    if fixed.is_none() {
                        table.first_positive.entry(label).or_insert_with(|| words.join(" "));
                    }
                    table.mentions.push(MentionRule {
                        words,
                        label,
                        fixed,
                    });
                }
                Section::Window => {
                    table.window = line
                        .trim()
                        .parse()
                        .map_err(|_| Error::parse(lineno, "window must be a token count"))?;
                }
                Section::PreNegation => table.pre_negation.push(phrase_words(line, lineno)?),
                Section::PostNegation => table.post_negation.push(phrase_words(line, lineno)?),
                Section::PreUncertainty => table.pre_uncertainty.push(phrase_words(line, lineno)?),
                Section::PostUncertainty => {
                    table.post_uncertainty.push(phrase_words(line, lineno)?)
                }
                Section::ScopeBreak => table.scope_breaks.push(phrase_words(line, lineno)?),
            }
        }

        for label in Label::ALL {
            if !table.first_positive.contains_key(&label) {
                return Err(Error::Data(format!("rule table has no positive phrase for {label}")));
            }
        }
        // Longest phrases first so matching is greedy.
        table
            .mentions
            .sort_by(|a, b| b.words.len().cmp(&a.words.len()));
        Ok(table)
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// The first positive phrase listed for `label`.
    pub fn positive_phrase(&self, label: Label) -> &str {
        &self.first_positive[&label]
    }
}

fn phrase_words(phrase: &str, lineno: usize) -> Result<Vec<String>> {
    let phrase = phrase.trim();
    if phrase.chars().any(char::is_uppercase) {
        return Err(Error::parse(lineno, format!("phrase `{phrase}` must be lowercase")));
    }
    let words = text::words(phrase);
    if words.is_empty() {
        return Err(Error::parse(lineno, "empty phrase"));
    }
    Ok(words)
}

#[derive(Debug)]
struct Occurrence {
    start: usize,
    end: usize,
}

fn find_cues(tokens: &[String], covered: &[bool], cues: &[Vec<String>]) -> Vec<Occurrence> {
    let mut found = Vec::new();
    for cue in cues {
        if cue.len() > tokens.len() {
            continue;
        }
        for start in 0..=tokens.len() - cue.len() {
            let end = start + cue.len();
            if tokens[start..end] == cue[..] && !covered[start..end].iter().any(|&c| c) {
                found.push(Occurrence { start, end });
            }
        }
    }
    found
}

struct Scope<'a> {
    breaks: &'a [Occurrence],
    window: usize,
}

impl Scope<'_> {
    fn blocked(&self, from: usize, to: usize) -> bool {
        self.breaks.iter().any(|b| b.start >= from && b.end <= to)
    }

    fn before(&self, cues: &[Occurrence], start: usize) -> bool {
        cues.iter()
            .any(|c| c.end <= start && start - c.end <= self.window && !self.blocked(c.end, start))
    }

    fn after(&self, cues: &[Occurrence], end: usize) -> bool {
        cues.iter()
            .any(|c| c.start >= end && c.start - end <= self.window && !self.blocked(end, c.start))
    }
}

/// Finds label mentions in one sentence and assigns each a verdict.
///
/// At most one entry per label, in label order; a label mentioned several
/// ways keeps the strongest verdict (Positive > Uncertain > Negative).
pub fn extract_mentions(sentence: &str, rules: &RuleTable) -> Vec<(Label, Verdict)> {
    let tokens = text::words(sentence);
    let n = tokens.len();
    let mut covered = vec![false; n];
    let mut hits: Vec<(Occurrence, &MentionRule)> = Vec::new();

    let mut i = 0;
    while i < n {
        let matched = rules.mentions.iter().find(|m| {
            let len = m.words.len();
            i + len <= n && tokens[i..i + len] == m.words[..]
        });
        match matched {
            Some(rule) => {
                let end = i + rule.words.len();
                covered[i..end].iter_mut().for_each(|c| *c = true);
                hits.push((Occurrence { start: i, end }, rule));
                i = end;
            }
            None => i += 1,
        }
    }
    if hits.is_empty() {
        return Vec::new();
    }

    let pre_neg = find_cues(&tokens, &covered, &rules.pre_negation);
    let post_neg = find_cues(&tokens, &covered, &rules.post_negation);
    let pre_unc = find_cues(&tokens, &covered, &rules.pre_uncertainty);
    let post_unc = find_cues(&tokens, &covered, &rules.post_uncertainty);
    let breaks = find_cues(&tokens, &covered, &rules.scope_breaks);
    let scope = Scope {
        breaks: &breaks,
        window: rules.window,
    };

    let mut verdicts: BTreeMap<Label, Verdict> = BTreeMap::new();
    for (occ, rule) in hits {
        let verdict = match rule.fixed {
            Some(v) => v,
            None if scope.before(&pre_unc, occ.start) || scope.after(&post_unc, occ.end) => {
                Verdict::Uncertain
            }
            None if scope.before(&pre_neg, occ.start) || scope.after(&post_neg, occ.end) => {
                Verdict::Negative
            }
            None => Verdict::Positive,
        };
        verdicts
            .entry(rule.label)
            .and_modify(|v| *v = v.max_precedence(verdict))
            .or_insert(verdict);
    }
    verdicts.into_iter().collect()
}

/// Splits a report into sentences at periods and line breaks.
pub fn split_sentences(report: &str) -> impl Iterator<Item = &str> {
    report
        .split(['.', '\n'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
}

/// Condenses a full report into one verdict per label.
///
/// `NoFinding` is Positive exactly when no other label is Positive or
/// Uncertain, and Absent otherwise.
pub fn label_report(report: &str, rules: &RuleTable) -> BTreeMap<Label, Verdict> {
    let mut out: BTreeMap<Label, Verdict> =
        Label::ALL.into_iter().map(|l| (l, Verdict::Absent)).collect();
    for sentence in split_sentences(report) {
        for (label, verdict) in extract_mentions(sentence, rules) {
            let slot = out.get_mut(&label).expect("all labels present");
            *slot = slot.max_precedence(verdict);
        }
    }
    let finding = Label::ALL.into_iter().any(|l| {
        l != Label::NoFinding && matches!(out[&l], Verdict::Positive | Verdict::Uncertain)
    });
    out.insert(
        Label::NoFinding,
        if finding {
            Verdict::Absent
        } else {
            Verdict::Positive
        },
    );
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthConfig {
    pub merge_gap: f64,
    pub default_start: f64,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        GroundTruthConfig {
            merge_gap: DEFAULT_MERGE_GAP,
            default_start: DEFAULT_SPEECH_ONSET,
        }
    }
}

/// Builds the ground-truth intention sequence of one case from its transcript.
pub fn build_ground_truth(
    case_id: &str,
    sentences: &[TimedSentence],
    duration: f64,
    rules: &RuleTable,
) -> Result<IntentionSequence> {
    build_ground_truth_with(case_id, sentences, duration, rules, &GroundTruthConfig::default())
}

pub fn build_ground_truth_with(
    case_id: &str,
    sentences: &[TimedSentence],
    duration: f64,
    rules: &RuleTable,
    config: &GroundTruthConfig,
) -> Result<IntentionSequence> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::range(format!("duration must be positive, got {duration}")));
    }
    let clamp = |t: f64| t.clamp(0.0, duration);

    let mut spans = Vec::new();
    for sentence in sentences {
        let (start, end) = match sentence.timing {
            Some((s, e)) => (clamp(s), clamp(e)),
            None => (config.default_start.min(duration), duration),
        };
        let end = end.max(start);
        for (label, verdict) in extract_mentions(&sentence.text, rules) {
            spans.push(IntentionSpan::new(label, verdict, start, end));
        }
    }

    // Merge fragments of the same intention.
    spans.sort_by(|a, b| {
        (a.label, a.verdict)
            .cmp(&(b.label, b.verdict))
            .then(span_order(a, b))
    });
    let mut merged: Vec<IntentionSpan> = Vec::with_capacity(spans.len());
    for span in spans {
        match merged.last_mut() {
            Some(last)
                if last.label == span.label
                    && last.verdict == span.verdict
                    && span.t_start - last.t_end < config.merge_gap =>
            {
                last.t_end = last.t_end.max(span.t_end);
            }
            _ => merged.push(span),
        }
    }
    merged.sort_by(span_order);
    Ok(IntentionSequence {
        case_id: case_id.to_string(),
        duration,
        spans: merged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::*;
    use Verdict::*;

    fn rules() -> &'static RuleTable {
        RuleTable::builtin()
    }

    #[test]
    fn builtin_table_loads() {
        let t = rules();
        assert_eq!(t.window(), 6);
        for label in Label::ALL {
            assert!(!t.positive_phrase(label).is_empty());
        }
    }

    #[test]
    fn documented_examples() {
        assert_eq!(extract_mentions("heart size is enlarged", rules()), [(Cardiomegaly, Positive)]);
        assert_eq!(extract_mentions("no pleural effusion", rules()), [(PleuralEffusion, Negative)]);
        assert!(extract_mentions("", rules()).is_empty());
        assert!(extract_mentions("the study was reviewed", rules()).is_empty());
    }

    #[test]
    fn scope_window_and_breaks() {
        // Negation carries across a coordinated list.
        assert_eq!(
            extract_mentions("No pleural effusion or pneumothorax.", rules()),
            [(Pneumothorax, Negative), (PleuralEffusion, Negative)]
        );
        // "but" closes the negation scope.
        assert_eq!(
            extract_mentions("no effusion but there is cardiomegaly", rules()),
            [(Cardiomegaly, Positive), (PleuralEffusion, Negative)]
        );
        // Beyond the window the cue no longer applies.
        assert_eq!(
            extract_mentions("no change in the appearance of the left lower lobe atelectasis", rules()),
            [(Atelectasis, Positive)]
        );
    }

    #[test]
    fn uncertainty_beats_negation_on_one_mention() {
        assert_eq!(extract_mentions("can not exclude pneumonia", rules()), [(Pneumonia, Uncertain)]);
    }

    #[test]
    fn same_label_precedence_within_sentence() {
        assert_eq!(
            extract_mentions("small left effusion, no right effusion", rules()),
            [(PleuralEffusion, Positive)]
        );
    }

    #[test]
    fn malformed_tables_are_rejected() {
        let dup = "[mentions]\nEdema\tedema\nPneumonia\tedema\n";
        assert!(matches!(RuleTable::parse(dup), Err(Error::Parse { line: 3, .. })));
        let upper = "[mentions]\nEdema\tEdema\n";
        assert!(matches!(RuleTable::parse(upper), Err(Error::Parse { line: 2, .. })));
        let missing = "[mentions]\nEdema\tedema\n";
        assert!(matches!(RuleTable::parse(missing), Err(Error::Data(_))));
    }

    #[test]
    fn report_level_aggregation() {
        let labels = label_report("No acute findings.", rules());
        assert_eq!(labels[&NoFinding], Positive);
        assert!(Label::ALL
            .iter()
            .filter(|&&l| l != NoFinding)
            .all(|l| matches!(labels[l], Negative | Absent)));

        let empty = label_report("", rules());
        assert_eq!(empty[&NoFinding], Positive);
        assert!(Label::ALL.iter().filter(|&&l| l != NoFinding).all(|l| empty[l] == Absent));

        let mixed = label_report("No pleural effusion.\nSmall left pleural effusion.", rules());
        assert_eq!(mixed[&PleuralEffusion], Positive);
        assert_eq!(mixed[&NoFinding], Absent);
    }

    #[test]
    fn ground_truth_examples() {
        let timed = [TimedSentence::new("cardiomegaly", 2.0, 4.0)];
        let seq = build_ground_truth("c", &timed, 10.0, rules()).unwrap();
        assert_eq!(seq.spans, [IntentionSpan::new(Cardiomegaly, Positive, 2.0, 4.0)]);

        let untimed = [TimedSentence::untimed("cardiomegaly")];
        let seq = build_ground_truth("c", &untimed, 30.0, rules()).unwrap();
        assert_eq!(seq.spans, [IntentionSpan::new(Cardiomegaly, Positive, 1.1, 30.0)]);

        let seq = build_ground_truth("c", &untimed, 0.8, rules()).unwrap();
        assert_eq!(seq.spans, [IntentionSpan::new(Cardiomegaly, Positive, 0.8, 0.8)]);

        assert!(build_ground_truth("c", &untimed, 0.0, rules()).is_err());
    }

    #[test]
    fn ground_truth_merges_close_fragments() {
        let s = [
            TimedSentence::new("there is cardiomegaly", 1.0, 2.0),
            TimedSentence::new("the cardiomegaly is moderate", 2.3, 3.0),
            TimedSentence::new("cardiomegaly again", 4.0, 5.0),
            TimedSentence::new("no cardiomegaly", 2.1, 2.2),
        ];
        let seq = build_ground_truth("c", &s, 10.0, rules()).unwrap();
        assert_eq!(
            seq.spans,
            [
                IntentionSpan::new(Cardiomegaly, Positive, 1.0, 3.0),
                IntentionSpan::new(Cardiomegaly, Negative, 2.1, 2.2),
                IntentionSpan::new(Cardiomegaly, Positive, 4.0, 5.0),
            ]
        );
        seq.validate().unwrap();
    }
}
