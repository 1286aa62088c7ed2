//! Joint text + time token vocabulary and the intention sequence grammar.
//!
//! Ids `0..v` are text tokens (the four specials first), ids `v..v+n` are time
//! tokens. A timestamp maps to time bin `round(t / duration * (n - 1))`, so
//! bins are relative to the session duration.
//!
//! Serialized sequences follow
//!
//! ```text
//! seq  := BOS span* EOS
//! span := TIME TIME verdict-word label-word+
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::intent::{resolve_label, IntentionSequence, IntentionSpan, Label, Verdict};
use crate::text;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

pub const DEFAULT_TIME_BINS: usize = 100;
pub const DEFAULT_VOCAB_SIZE: usize = 4096;

/// Words every vocabulary must hold so any intention serializes without `<unk>`.
pub fn reserved_words() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = Vec::new();
    let candidates = Label::ALL
        .into_iter()
        .flat_map(Label::words)
        .chain(Verdict::ALL.into_iter().map(Verdict::word));
    for w in candidates {
        if !words.contains(&w) {
            words.push(w);
        }
    }
    words
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    text_tokens: Vec<String>,
    n_time: usize,
    index: HashMap<String, u32>,
}

/// What a token id stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind<'a> {
    Special(u32),
    Word(&'a str),
    Time(TimeToken),
}

impl Vocab {
    fn from_tokens(text_tokens: Vec<String>, n_time: usize) -> Result<Vocab> {
        if n_time < 2 {
            return Err(Error::Config(format!("need at least 2 time bins, got {n_time}")));
        }
        if text_tokens.len() < SPECIALS.len() || text_tokens[..4] != SPECIALS {
            return Err(Error::Config("vocabulary must start with the four special tokens".into()));
        }
        let mut index = HashMap::with_capacity(text_tokens.len());
        for (id, tok) in text_tokens.iter().enumerate() {
            if index.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{tok}`")));
            }
        }
        Ok(Vocab {
            text_tokens,
            n_time,
            index,
        })
    }

    /// Text vocabulary size `v`, specials included.
    pub fn text_size(&self) -> usize {
        self.text_tokens.len()
    }

    /// Number of time tokens `n`.
    pub fn time_bins(&self) -> usize {
        self.n_time
    }

    /// Total size `v + n`.
    pub fn len(&self) -> usize {
        self.text_tokens.len() + self.n_time
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied().filter(|&id| id >= SPECIALS.len() as u32)
    }

    pub fn time_id(&self, token: TimeToken) -> u32 {
        (self.text_tokens.len() + token.bin()) as u32
    }

    pub fn kind(&self, id: u32) -> Option<TokenKind<'_>> {
        let id_us = id as usize;
        if id_us < SPECIALS.len() {
            Some(TokenKind::Special(id))
        } else if id_us < self.text_tokens.len() {
            Some(TokenKind::Word(&self.text_tokens[id_us]))
        } else if id_us < self.len() {
            Some(TokenKind::Time(TimeToken(id_us - self.text_tokens.len())))
        } else {
            None
        }
    }

    /// Human-readable form of one token; time tokens render as `<t_k>`.
    pub fn render(&self, id: u32) -> String {
        match self.kind(id) {
            Some(TokenKind::Special(s)) => SPECIALS[s as usize].to_string(),
            Some(TokenKind::Word(w)) => w.to_string(),
            Some(TokenKind::Time(t)) => format!("<t_{}>", t.bin()),
            None => format!("<invalid_{id}>"),
        }
    }

    /// Id of a token written in human-readable form; unknown words map to `<unk>`.
    pub fn lookup(&self, token: &str) -> u32 {
        if let Some(bin) = token
            .strip_prefix("<t_")
            .and_then(|s| s.strip_suffix('>'))
            .and_then(|s| s.parse::<usize>().ok())
        {
            if bin < self.n_time {
                return self.time_id(TimeToken(bin));
            }
        }
        self.index.get(token).copied().unwrap_or(UNK)
    }

    /// Short identifier derived from the vocabulary contents.
    pub fn fingerprint(&self) -> String {
        // FNV-1a over the tokens.
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for tok in &self.text_tokens {
            for b in tok.bytes().chain([0u8]) {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        }
        format!("v{}-n{}-{hash:016x}", self.text_size(), self.n_time)
    }

    /// Vocabulary file: a `# v=<v> n=<n>` header, then one token per line,
    /// line `i` after the header holding id `i` (time tokens as `<t_k>`).
    pub fn to_file_string(&self) -> String {
        let mut out = format!("# v={} n={}\n", self.text_size(), self.n_time);
        for id in 0..self.len() as u32 {
            out.push_str(&self.render(id));
            out.push('\n');
        }
        out
    }

    pub fn parse_file(source: &str) -> Result<Vocab> {
        let mut lines = source.lines();
        let header = lines.next().ok_or_else(|| Error::parse(1, "empty vocabulary file"))?;
        let mut v = None;
        let mut n = None;
        for field in header.trim_start_matches('#').split_whitespace() {
            match field.split_once('=') {
                Some(("v", val)) => v = val.parse::<usize>().ok(),
                Some(("n", val)) => n = val.parse::<usize>().ok(),
                _ => {}
            }
        }
        let (v, n) = v
            .zip(n)
            .ok_or_else(|| Error::parse(1, "header must read `# v=<count> n=<count>`"))?;
        let body: Vec<&str> = lines.collect();
        if body.len() != v + n {
            return Err(Error::parse(
                body.len() + 1,
                format!("expected {} tokens, found {}", v + n, body.len()),
            ));
        }
        for (k, line) in body[v..].iter().enumerate() {
            if *line != format!("<t_{k}>") {
                return Err(Error::parse(v + k + 2, format!("expected time token <t_{k}>")));
            }
        }
        Vocab::from_tokens(body[..v].iter().map(|s| s.to_string()).collect(), n)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Vocab::parse_file(&text)
    }
}

/// Builds a word-level vocabulary from `corpus`.
///
/// Specials come first, then every label and verdict word, then corpus words
/// by descending frequency with ties broken lexicographically, truncated to
/// `target_size` text tokens.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], target_size: usize, time_bins: usize) -> Result<Vocab> {
    build_vocab_with(corpus, target_size, time_bins, &reserved_words())
}

/// [`build_vocab`] with an explicit list of always-included words.
pub fn build_vocab_with<S: AsRef<str>>(
    corpus: &[S],
    target_size: usize,
    time_bins: usize,
    reserved: &[&str],
) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Config("vocabulary corpus is empty".into()));
    }
    let floor = SPECIALS.len() + reserved.len();
    if target_size < floor {
        return Err(Error::Config(format!(
            "vocabulary size {target_size} cannot hold {} specials and {} reserved words",
            SPECIALS.len(),
            reserved.len()
        )));
    }
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(reserved.iter().map(|s| s.to_string()));

    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in corpus {
        for word in text::words(doc.as_ref()) {
            *counts.entry(word).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, _)| !reserved.contains(&w.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    tokens.extend(
        ranked
            .into_iter()
            .take(target_size - floor)
            .map(|(w, _)| w),
    );
    Vocab::from_tokens(tokens, time_bins)
}

/// A quantized timestamp: bin index `k` in `[0, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeToken(usize);

impl TimeToken {
    pub fn new(bin: usize, n: usize) -> Result<TimeToken> {
        if bin >= n {
            return Err(Error::range(format!("time bin {bin} outside [0, {n})")));
        }
        Ok(TimeToken(bin))
    }

    pub fn bin(self) -> usize {
        self.0
    }
}

pub fn encode_time(t: f64, duration: f64, n: usize) -> Result<TimeToken> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::range(format!("duration must be positive, got {duration}")));
    }
    if !(t >= 0.0) {
        return Err(Error::range(format!("time must be nonnegative, got {t}")));
    }
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 time bins, got {n}")));
    }
    let bin = (t.min(duration) / duration * (n - 1) as f64).round() as usize;
    Ok(TimeToken(bin))
}

pub fn decode_time(token: TimeToken, duration: f64, n: usize) -> f64 {
    (token.bin() as f64 * duration / (n - 1) as f64).min(duration)
}

/// A serialized sequence of token ids over a specific vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub vocab_ref: String,
}

impl TokenSequence {
    pub fn to_ids_string(&self) -> String {
        let parts: Vec<String> = self.ids.iter().map(u32::to_string).collect();
        parts.join(" ")
    }

    pub fn from_ids_string(source: &str, vocab: &Vocab) -> Result<TokenSequence> {
        let ids = source
            .split_whitespace()
            .enumerate()
            .map(|(i, tok)| {
                tok.parse::<u32>()
                    .ok()
                    .filter(|&id| (id as usize) < vocab.len())
                    .ok_or_else(|| Error::Grammar {
                        offset: i,
                        message: format!("`{tok}` is not a token id of this vocabulary"),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenSequence {
            ids,
            vocab_ref: vocab.fingerprint(),
        })
    }

    pub fn to_human(&self, vocab: &Vocab) -> String {
        let parts: Vec<String> = self.ids.iter().map(|&id| vocab.render(id)).collect();
        parts.join(" ")
    }

    pub fn from_human(source: &str, vocab: &Vocab) -> TokenSequence {
        TokenSequence {
            ids: source.split_whitespace().map(|t| vocab.lookup(t)).collect(),
            vocab_ref: vocab.fingerprint(),
        }
    }
}

fn word_id(vocab: &Vocab, word: &str) -> Result<u32> {
    vocab
        .word_id(word)
        .ok_or_else(|| Error::Data(format!("vocabulary lacks required word `{word}`")))
}

/// Serializes intentions as `BOS (TIME TIME verdict label-words)* EOS`, spans in
/// start order.
pub fn serialize_sequence(seq: &IntentionSequence, vocab: &Vocab) -> Result<TokenSequence> {
    let n = vocab.time_bins();
    let mut spans: Vec<&IntentionSpan> = seq.spans.iter().collect();
    spans.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));

    let mut ids = vec![BOS];
    for span in spans {
        if span.t_end > seq.duration || span.t_start > seq.duration {
            return Err(Error::range(format!(
                "case {}: span [{}, {}] exceeds duration {}",
                seq.case_id, span.t_start, span.t_end, seq.duration
            )));
        }
        ids.push(vocab.time_id(encode_time(span.t_start, seq.duration, n)?));
        ids.push(vocab.time_id(encode_time(span.t_end, seq.duration, n)?));
        ids.push(word_id(vocab, span.verdict.word())?);
        for w in span.label.words() {
            ids.push(word_id(vocab, w)?);
        }
    }
    ids.push(EOS);
    Ok(TokenSequence {
        ids,
        vocab_ref: vocab.fingerprint(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    /// Reject any deviation from the grammar.
    Strict,
    /// Repair common decoder mistakes instead of failing.
    Lenient,
}

impl fmt::Display for ParseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParseMode::Strict => "strict",
            ParseMode::Lenient => "lenient",
        })
    }
}

fn grammar(offset: usize, message: impl Into<String>) -> Error {
    Error::Grammar {
        offset,
        message: message.into(),
    }
}

/// Parses a token sequence back into intentions.
///
/// Strict mode fails with the token offset of the first violation. Lenient
/// mode drops lone time tokens and time pairs without a label, swaps reversed
/// pairs, skips unknown or special tokens, defaults a missing verdict to
/// Positive and stops at the first EOS (or the end of input).
pub fn parse_sequence(
    tokens: &TokenSequence,
    case_id: &str,
    duration: f64,
    vocab: &Vocab,
    mode: ParseMode,
) -> Result<IntentionSequence> {
    let spans = match mode {
        ParseMode::Strict => parse_strict(&tokens.ids, duration, vocab)?,
        ParseMode::Lenient => parse_lenient(&tokens.ids, duration, vocab),
    };
    Ok(IntentionSequence::new(case_id, duration, spans))
}

fn parse_strict(ids: &[u32], duration: f64, vocab: &Vocab) -> Result<Vec<IntentionSpan>> {
    let n = vocab.time_bins();
    let kind = |pos: usize| {
        vocab
            .kind(ids[pos])
            .ok_or_else(|| grammar(pos, format!("id {} outside the vocabulary", ids[pos])))
    };
    if ids.first() != Some(&BOS) {
        return Err(grammar(0, "missing bos"));
    }
    let mut spans = Vec::new();
    let mut pos = 1;
    loop {
        if pos == ids.len() {
            return Err(grammar(pos, "missing eos"));
        }
        if ids[pos] == EOS {
            if let Some(extra) = (pos + 1..ids.len()).find(|&p| ids[p] != PAD) {
                return Err(grammar(extra, "tokens after eos"));
            }
            return Ok(spans);
        }
        let start = match kind(pos)? {
            TokenKind::Time(t) => t,
            _ => return Err(grammar(pos, "expected start time token")),
        };
        pos += 1;
        if pos == ids.len() {
            return Err(grammar(pos, "missing eos"));
        }
        let end = match kind(pos)? {
            TokenKind::Time(t) => t,
            _ => return Err(grammar(pos, "expected end time token")),
        };
        if end < start {
            return Err(grammar(pos, "end before start"));
        }
        pos += 1;

        let words_at = pos;
        let mut words = Vec::new();
        while pos < ids.len() && ids[pos] != EOS {
            match kind(pos)? {
                TokenKind::Word(w) => words.push(w),
                TokenKind::Time(_) => break,
                TokenKind::Special(_) => return Err(grammar(pos, "unexpected special token")),
            }
            pos += 1;
        }
        let (verdict_word, label_words) = words
            .split_first()
            .ok_or_else(|| grammar(words_at, "time pair without words"))?;
        let verdict = Verdict::from_word(verdict_word)
            .ok_or_else(|| grammar(words_at, format!("`{verdict_word}` is not a verdict")))?;
        let label = Label::from_phrase(&label_words.join(" "))
            .ok_or_else(|| grammar(words_at + 1, "words do not name a label"))?;
        spans.push(IntentionSpan::new(
            label,
            verdict,
            decode_time(start, duration, n),
            decode_time(end, duration, n),
        ));
    }
}

enum Item<'a> {
    Time(TimeToken),
    Word(&'a str),
}

const MAX_LABEL_WORDS: usize = 3;

fn parse_lenient(ids: &[u32], duration: f64, vocab: &Vocab) -> Vec<IntentionSpan> {
    let n = vocab.time_bins();
    let items: Vec<Item> = ids
        .iter()
        .take_while(|&&id| id != EOS)
        .filter_map(|&id| match vocab.kind(id)? {
            TokenKind::Time(t) => Some(Item::Time(t)),
            TokenKind::Word(w) => Some(Item::Word(w)),
            TokenKind::Special(_) => None,
        })
        .collect();

    let mut spans = Vec::new();
    let mut i = 0;
    while i < items.len() {
        let mut times = Vec::new();
        while let Some(Item::Time(t)) = items.get(i) {
            times.push(*t);
            i += 1;
        }
        let mut words = Vec::new();
        while let Some(Item::Word(w)) = items.get(i) {
            words.push(*w);
            i += 1;
        }
        // Only the last two time tokens of a run form the pair.
        let [a, b] = match times.as_slice() {
            [.., a, b] => [*a, *b],
            _ => continue,
        };
        let (start, end) = if b < a { (b, a) } else { (a, b) };
        let t_start = decode_time(start, duration, n);
        let t_end = decode_time(end, duration, n);

        let mut verdict = Verdict::Positive;
        let mut j = 0;
        while j < words.len() {
            if let Some(v) = Verdict::from_word(words[j]) {
                verdict = v;
                j += 1;
                continue;
            }
            let longest = (1..=MAX_LABEL_WORDS.min(words.len() - j)).rev().find_map(|len| {
                let phrase = words[j..j + len].join(" ");
                let found = Label::from_phrase(&phrase)
                    .map(|l| (l, None))
                    .or_else(|| resolve_label(&phrase).filter(|_| len == 1));
                found.map(|hit| (hit, len))
            });
            match longest {
                Some(((label, implied), len)) => {
                    spans.push(IntentionSpan::new(label, implied.unwrap_or(verdict), t_start, t_end));
                    j += len;
                }
                None => j += 1,
            }
        }
    }
    spans
}
