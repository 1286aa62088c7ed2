//! Loader for the hand-traced labeler sentence corpus.

#![allow(dead_code)]

use gik_core::{Label, Verdict};

pub const SENTENCES: &str = include_str!("../fixtures/labeler_sentences.tsv");

pub struct Case {
    pub sentence: &'static str,
    pub expected: Vec<(Label, Verdict)>,
}

pub fn cases() -> Vec<Case> {
    SENTENCES
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|line| {
            let (sentence, expected) = line.split_once('\t').expect("tab-separated fixture line");
            let mut expected: Vec<(Label, Verdict)> = expected
                .split(',')
                .map(|item| {
                    let (label, verdict) = item.split_once('=').expect("Label=verdict");
                    (label.parse().expect("fixture label"), verdict.parse().expect("fixture verdict"))
                })
                .collect();
            expected.sort();
            Case { sentence, expected }
        })
        .collect()
}
