use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, FixationRecord, GazeSession, SplitTag, TimedSentence};
use crate::error::{Error, Result};

const REQUIRED: [&str; 5] = ["case_id", "x", "y", "t_start", "t_end"];

struct GazeColumns {
    case_id: usize,
    x: usize,
    y: usize,
    t_start: usize,
    t_end: usize,
    image_size: Option<(usize, usize)>,
    duration: Option<usize>,
}

impl GazeColumns {
    fn from_header(header: &csv::StringRecord) -> Result<Self> {
        let find = |name: &str| header.iter().position(|h| h == name);
        let mut required = [0usize; 5];
        for (slot, name) in required.iter_mut().zip(REQUIRED) {
            *slot = find(name)
                .ok_or_else(|| Error::parse(1, format!("missing `{name}` column in header")))?;
        }
        let image_size = match (find("image_w"), find("image_h")) {
            (Some(w), Some(h)) => Some((w, h)),
            (None, None) => None,
            _ => return Err(Error::parse(1, "image_w and image_h must appear together")),
        };
        Ok(GazeColumns {
            case_id: required[0],
            x: required[1],
            y: required[2],
            t_start: required[3],
            t_end: required[4],
            image_size,
            duration: find("duration"),
        })
    }
}

fn number(record: &csv::StringRecord, col: usize, line: usize, name: &str) -> Result<f64> {
    let raw = &record[col];
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::parse(line, format!("`{name}` is not a number: `{raw}`")))
}

/// Parses a fixation CSV with header `case_id,x,y,t_start,t_end[,image_w,image_h]`
/// and an optional `duration` column.
///
/// When `image_w`/`image_h` are present, `x`/`y` are pixel coordinates and are
/// normalized by the declared size. Sessions come back in order of first
/// appearance, fixations sorted by start time.
pub fn parse_gaze_csv<R: Read>(stream: R) -> Result<Vec<GazeSession>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(stream);
    let header = reader
        .headers()
        .map_err(|e| Error::parse(1, e.to_string()))?
        .clone();
    let cols = GazeColumns::from_header(&header)?;

    let mut order: Vec<String> = Vec::new();
    let mut fixations: HashMap<String, Vec<FixationRecord>> = HashMap::new();
    let mut durations: HashMap<String, f64> = HashMap::new();

    for row in reader.records() {
        let record = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(Error::parse(
                line,
                format!("expected {} columns, found {}", header.len(), record.len()),
            ));
        }
        let case_id = record[cols.case_id].to_string();
        if case_id.is_empty() {
            return Err(Error::parse(line, "empty case_id"));
        }
        let mut x = number(&record, cols.x, line, "x")?;
        let mut y = number(&record, cols.y, line, "y")?;
        if let Some((wc, hc)) = cols.image_size {
            let w = number(&record, wc, line, "image_w")?;
            let h = number(&record, hc, line, "image_h")?;
            if w <= 0.0 || h <= 0.0 {
                return Err(Error::parse(line, "image size must be positive"));
            }
            x /= w;
            y /= h;
        }
        let t_start = number(&record, cols.t_start, line, "t_start")?;
        let t_end = number(&record, cols.t_end, line, "t_end")?;
        let fix = FixationRecord::new(x, y, t_start, t_end)
            .map_err(|e| Error::range(format!("line {line}: {e}")))?;
        if let Some(dc) = cols.duration {
            if !record[dc].is_empty() {
                let d = number(&record, dc, line, "duration")?;
                let slot = durations.entry(case_id.clone()).or_insert(d);
                *slot = slot.max(d);
            }
        }
        if !fixations.contains_key(&case_id) {
            order.push(case_id.clone());
        }
        fixations.entry(case_id).or_default().push(fix);
    }

    order
        .into_iter()
        .map(|case_id| {
            let mut fix = fixations.remove(&case_id).unwrap_or_default();
            fix.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
            let max_end = fix.iter().map(|f| f.t_end).fold(0.0, f64::max);
            let duration = match durations.get(&case_id) {
                Some(&d) if d < max_end => {
                    return Err(Error::range(format!(
                        "case {case_id}: duration {d} shorter than last fixation end {max_end}"
                    )))
                }
                Some(&d) => d,
                None => max_end,
            };
            Ok(GazeSession {
                case_id,
                image_ref: PathBuf::new(),
                fixations: fix,
                sentences: Vec::new(),
                duration,
            })
        })
        .collect()
}

/// Writes sessions as normalized fixation CSV including a `duration` column.
pub fn write_gaze_csv<W: Write>(writer: W, sessions: &[GazeSession]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Io(e.into());
    out.write_record(["case_id", "x", "y", "t_start", "t_end", "duration"])
        .map_err(io)?;
    for session in sessions {
        for f in &session.fixations {
            out.write_record([
                session.case_id.clone(),
                f.x.to_string(),
                f.y.to_string(),
                f.t_start.to_string(),
                f.t_end.to_string(),
                session.duration.to_string(),
            ])
            .map_err(io)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct TranscriptLine {
    case_id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t_end: Option<f64>,
}

/// Parses transcript lines `{case_id, text, t_start, t_end}`. Blank lines are
/// skipped; lines without timing yield untimed sentences, which sort after
/// the timed ones of their case.
pub fn parse_transcript_jsonl<R: BufRead>(
    stream: R,
) -> Result<BTreeMap<String, Vec<TimedSentence>>> {
    let mut out: BTreeMap<String, Vec<TimedSentence>> = BTreeMap::new();
    for (idx, line) in stream.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TranscriptLine =
            serde_json::from_str(&line).map_err(|e| Error::parse(lineno, e.to_string()))?;
        if record.text.trim().is_empty() {
            return Err(Error::parse(lineno, "empty sentence text"));
        }
        let timing = match (record.t_start, record.t_end) {
            (Some(s), Some(e)) => {
                if !(s.is_finite() && e.is_finite() && s >= 0.0) {
                    return Err(Error::range(format!("line {lineno}: bad sentence time")));
                }
                if e < s {
                    return Err(Error::range(format!(
                        "line {lineno}: sentence ends at {e} before it starts at {s}"
                    )));
                }
                Some((s, e))
            }
            (None, None) => None,
            _ => return Err(Error::parse(lineno, "t_start and t_end must appear together")),
        };
        out.entry(record.case_id).or_default().push(TimedSentence {
            text: record.text,
            timing,
        });
    }
    for sentences in out.values_mut() {
        sentences.sort_by(|a, b| {
            let key = |s: &TimedSentence| s.t_start().unwrap_or(f64::INFINITY);
            key(a).total_cmp(&key(b))
        });
    }
    Ok(out)
}

pub fn write_transcript_jsonl<W: Write>(mut writer: W, sessions: &[GazeSession]) -> Result<()> {
    for session in sessions {
        for s in &session.sentences {
            let line = TranscriptLine {
                case_id: session.case_id.clone(),
                text: s.text.clone(),
                t_start: s.t_start(),
                t_end: s.t_end(),
            };
            serde_json::to_writer(&mut writer, &line)?;
            writer.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// One manifest row. Paths are relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub image_path: PathBuf,
    pub gaze_path: PathBuf,
    pub transcript_path: PathBuf,
    pub duration: Option<f64>,
}

pub fn read_manifest<R: Read>(stream: R) -> Result<Vec<ManifestEntry>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(stream);
    let mut entries = Vec::new();
    for row in reader.deserialize::<ManifestEntry>() {
        let entry = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(line, e.to_string())
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

pub fn write_manifest<W: Write>(writer: W, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for entry in entries {
        out.serialize(entry).map_err(|e| Error::Io(e.into()))?;
    }
    out.flush()?;
    Ok(())
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::file(path, e))
}

/// Loads every case listed in a manifest into an unsplit dataset.
///
/// A case missing from its gaze file gets no fixations. The duration comes from
/// the manifest when given, otherwise from the gaze file, extended to cover the
/// last transcript sentence.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let base = path.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(open(path)?)?;
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

    let mut gaze_cache: HashMap<PathBuf, HashMap<String, GazeSession>> = HashMap::new();
    let mut transcript_cache: HashMap<PathBuf, BTreeMap<String, Vec<TimedSentence>>> =
        HashMap::new();
    let mut sessions = Vec::with_capacity(entries.len());

    for entry in entries {
        let gaze_path = resolve(&entry.gaze_path);
        if !gaze_cache.contains_key(&gaze_path) {
            let parsed = parse_gaze_csv(open(&gaze_path)?).map_err(|e| in_file(&gaze_path, e))?;
            let by_case = parsed.into_iter().map(|s| (s.case_id.clone(), s)).collect();
            gaze_cache.insert(gaze_path.clone(), by_case);
        }
        let transcript_path = resolve(&entry.transcript_path);
        if !transcript_cache.contains_key(&transcript_path) {
            let parsed = parse_transcript_jsonl(BufReader::new(open(&transcript_path)?))
                .map_err(|e| in_file(&transcript_path, e))?;
            transcript_cache.insert(transcript_path.clone(), parsed);
        }

        let gaze = gaze_cache[&gaze_path].get(&entry.case_id);
        let fixations = gaze.map(|g| g.fixations.clone()).unwrap_or_default();
        let sentences = transcript_cache[&transcript_path]
            .get(&entry.case_id)
            .cloned()
            .unwrap_or_default();
        let mut session = GazeSession {
            case_id: entry.case_id.clone(),
            image_ref: resolve(&entry.image_path),
            fixations,
            sentences,
            duration: 0.0,
        };
        session.duration = match entry.duration {
            Some(d) => d,
            None => gaze.map_or(0.0, |g| g.duration).max(session.max_end()),
        };
        session.validate()?;
        sessions.push(session);
    }
    Dataset::new(sessions, SplitTag::Unsplit)
}

fn in_file(path: &Path, err: Error) -> Error {
    match err {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        Error::Range(message) => Error::Range(format!("{}: {message}", path.display())),
        other => other,
    }
}
