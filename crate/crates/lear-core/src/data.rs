//! Corpus and label-annotation ingestion, gold-label derivation, and the
//! synthetic corpus generator used by the acceptance experiments.
//!
//! Corpus format: JSON lines, one object per text,
//! `{"text": str, "spans": [{"start": int, "end": int, "category": str}]}`
//! with token-level indices and an *inclusive* end index. Label file: a JSON
//! array `[{"category": str, "annotation": str}]`.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::split_tokens;
use crate::error::{Error, Result};
use crate::loss::{GoldLabels, SpanMode};
use crate::tensor::Rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordSpan {
    pub start: usize,
    pub end: usize,
    pub category: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Record {
    #[serde(skip, default)]
    pub text_id: usize,
    pub text: String,
    #[serde(default)]
    pub spans: Vec<RecordSpan>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub split: Split,
    pub records: Vec<Record>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn gold_keys(&self) -> Vec<(usize, Vec<crate::metrics::SpanKey>)> {
        self.records
            .iter()
            .map(|r| {
                (
                    r.text_id,
                    r.spans
                        .iter()
                        .map(|s| (s.start, s.end, s.category.clone()))
                        .collect(),
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelEntry {
    pub category: String,
    pub annotation: String,
}

#[derive(Debug, Clone)]
pub struct LabelFile {
    pub entries: Vec<LabelEntry>,
}

impl LabelFile {
    pub fn new(entries: Vec<LabelEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::data("label file must define at least one category"));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.category.clone()) {
                return Err(Error::data(format!(
                    "duplicate category '{}' in label file",
                    e.category
                )));
            }
            if e.annotation.trim().is_empty() {
                return Err(Error::data(format!(
                    "empty annotation for category '{}'",
                    e.category
                )));
            }
        }
        Ok(LabelFile { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let entries: Vec<LabelEntry> = serde_json::from_str(&raw)
            .map_err(|e| Error::data(format!("label file {}: {e}", path.display())))?;
        LabelFile::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let raw = serde_json::to_string_pretty(&self.entries)
            .map_err(|e| Error::data(e.to_string()))?;
        std::fs::write(path, raw)?;
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.category.clone()).collect()
    }

    pub fn index_of(&self, category: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.category == category)
    }

    pub fn categories(&self) -> usize {
        self.entries.len()
    }
}

/// Loads and validates a JSONL corpus. Span indices are checked against the
/// tokenized length and categories against the label file.
pub fn load_corpus(path: &Path, labels: &LabelFile, split: Split) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut record: Record = serde_json::from_str(&line)
            .map_err(|e| Error::data_at(lineno + 1, format!("malformed JSON: {e}")))?;
        record.text_id = records.len();
        validate_record(&record, labels).map_err(|e| match e {
            Error::Data { msg, .. } => Error::data_at(lineno + 1, msg),
            other => other,
        })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::EmptyInput(format!(
            "corpus {} has no records",
            path.display()
        )));
    }
    Ok(Corpus { split, records })
}

fn validate_record(record: &Record, labels: &LabelFile) -> Result<()> {
    let n = split_tokens(&record.text).len();
    if n == 0 {
        return Err(Error::data("record has empty text"));
    }
    for span in &record.spans {
        if span.end < span.start {
            return Err(Error::data(format!(
                "span end {} before start {} in {:?}",
                span.end, span.start, record.text
            )));
        }
        if span.end >= n {
            return Err(Error::data(format!(
                "span ({}, {}) out of range for {n} tokens",
                span.start, span.end
            )));
        }
        if labels.index_of(&span.category).is_none() {
            return Err(Error::data(format!(
                "unknown category '{}' (not in label file)",
                span.category
            )));
        }
    }
    Ok(())
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for r in &corpus.records {
        let line = serde_json::to_string(r).map_err(|e| Error::data(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Builds the working vocabulary from corpus texts plus all label-annotation
/// texts and category names (min frequency one, first-seen order).
pub fn build_vocab(corpora: &[&Corpus], labels: &LabelFile) -> crate::encoder::Vocab {
    let mut texts: Vec<&str> = Vec::new();
    for c in corpora {
        for r in &c.records {
            texts.push(&r.text);
        }
    }
    for e in &labels.entries {
        texts.push(&e.annotation);
        texts.push(&e.category);
    }
    crate::encoder::Vocab::build(texts)
}

/// Expands a record's span list into start/end indicator vectors (padded to
/// `n_padded`) and, in nested mode, the gold pair matrices.
pub fn derive_gold(
    record: &Record,
    labels: &LabelFile,
    n_padded: usize,
    mode: SpanMode,
) -> GoldLabels {
    let cats = labels.categories();
    let mut starts = vec![vec![0.0; n_padded]; cats];
    let mut ends = vec![vec![0.0; n_padded]; cats];
    let mut pairs = match mode {
        SpanMode::Nested => Some(vec![vec![0.0; n_padded * n_padded]; cats]),
        SpanMode::Flat => None,
    };
    for span in &record.spans {
        let c = labels
            .index_of(&span.category)
            .expect("record validated against label file");
        starts[c][span.start] = 1.0;
        ends[c][span.end] = 1.0;
        if let Some(p) = pairs.as_mut() {
            p[c][span.start * n_padded + span.end] = 1.0;
        }
    }
    GoldLabels {
        starts,
        ends,
        pairs,
    }
}

// ---------------------------------------------------------------------------
// synthetic corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub categories: usize,
    pub sentences: usize,
    pub filler_vocab: usize,
    pub span_rate: f64,
    pub mode: SpanMode,
    /// Generate overlapping same-category spans. Requires nested mode.
    pub nested_spans: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            categories: 3,
            sentences: 30,
            filler_vocab: 20,
            span_rate: 0.9,
            mode: SpanMode::Flat,
            nested_spans: false,
        }
    }
}

const NATO: [&str; 26] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliett",
    "kilo", "lima", "mike", "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango",
    "uniform", "victor", "whiskey", "xray", "yankee", "zulu",
];

pub fn category_name(i: usize) -> String {
    if i < NATO.len() {
        NATO[i].to_string()
    } else {
        format!("{}{}", NATO[i % NATO.len()], i / NATO.len() + 1)
    }
}

fn trigger_tokens(name: &str) -> (String, String) {
    (format!("{name}mark"), format!("{name}cue"))
}

/// Generates a solvable corpus: every category c owns two trigger tokens
/// that occur only inside spans of c and also appear verbatim in c's
/// annotation, so the surface rule "trigger run = span" maps contexts to
/// spans consistently and label knowledge is informative.
pub fn synth_corpus(
    spec: &SynthSpec,
    seed: u64,
) -> Result<(Corpus, Corpus, Corpus, LabelFile)> {
    if spec.categories == 0 || spec.sentences == 0 {
        return Err(Error::Config("synth spec needs categories and sentences".into()));
    }
    if spec.nested_spans && spec.mode == SpanMode::Flat {
        return Err(Error::Config(
            "contradictory synth spec: nested spans with flat mode".into(),
        ));
    }
    if !(0.0..=1.0).contains(&spec.span_rate) {
        return Err(Error::Config("span_rate must lie in [0, 1]".into()));
    }
    let mut rng = Rng::new(seed);
    let names: Vec<String> = (0..spec.categories).map(category_name).collect();
    let labels = LabelFile::new(
        names
            .iter()
            .map(|name| {
                let (t1, t2) = trigger_tokens(name);
                LabelEntry {
                    category: name.clone(),
                    annotation: format!(
                        "a {name} span is a mention marked by the {t1} token or the {t2} token"
                    ),
                }
            })
            .collect(),
    )?;

    let fillers: Vec<String> = (0..spec.filler_vocab.max(4))
        .map(|i| format!("w{i:02}"))
        .collect();

    let dev_count = (spec.sentences / 5).max(2);
    let mut make_split = |split: Split, count: usize| -> Corpus {
        let mut records = Vec::with_capacity(count);
        for s in 0..count {
            // Primary category cycles so every category is covered.
            let primary = s % spec.categories;
            let force_pair = spec.nested_spans && s < spec.categories;
            records.push(synth_sentence(
                spec, &names, &fillers, primary, force_pair, &mut rng, records.len(),
            ));
        }
        Corpus { split, records }
    };
    let train = make_split(Split::Train, spec.sentences);
    let dev = make_split(Split::Dev, dev_count);
    let test = make_split(Split::Test, dev_count);
    Ok((train, dev, test, labels))
}

fn synth_sentence(
    spec: &SynthSpec,
    names: &[String],
    fillers: &[String],
    primary: usize,
    force_pair: bool,
    rng: &mut Rng,
    text_id: usize,
) -> Record {
    let mut tokens: Vec<String> = Vec::new();
    let mut spans: Vec<RecordSpan> = Vec::new();
    let push_filler = |tokens: &mut Vec<String>, rng: &mut Rng| {
        tokens.push(fillers[rng.below(fillers.len())].clone());
    };

    let lead = 1 + rng.below(3);
    for _ in 0..lead {
        push_filler(&mut tokens, rng);
    }

    let emit_unit = |cat: usize,
                         pair: bool,
                         tokens: &mut Vec<String>,
                         spans: &mut Vec<RecordSpan>| {
        let (t1, t2) = trigger_tokens(&names[cat]);
        let p = tokens.len();
        if pair {
            tokens.push(t1);
            tokens.push(t2);
            match spec.mode {
                SpanMode::Nested => {
                    // Rule: t1 alone is a span, and [t1 t2] is also a span.
                    spans.push(RecordSpan {
                        start: p,
                        end: p,
                        category: names[cat].clone(),
                    });
                    spans.push(RecordSpan {
                        start: p,
                        end: p + 1,
                        category: names[cat].clone(),
                    });
                }
                SpanMode::Flat => {
                    spans.push(RecordSpan {
                        start: p,
                        end: p + 1,
                        category: names[cat].clone(),
                    });
                }
            }
        } else {
            tokens.push(t1);
            spans.push(RecordSpan {
                start: p,
                end: p,
                category: names[cat].clone(),
            });
        }
    };

    // Guaranteed unit for the primary category.
    let primary_pair = force_pair || (spec.mode == SpanMode::Flat && rng.chance(0.4));
    emit_unit(primary, primary_pair, &mut tokens, &mut spans);
    push_filler(&mut tokens, rng);

    // Extra spans driven by span_rate.
    let extras = rng.below(3);
    for _ in 0..extras {
        if rng.chance(spec.span_rate) {
            let cat = rng.below(names.len());
            let pair = match spec.mode {
                SpanMode::Flat => rng.chance(0.4),
                SpanMode::Nested => rng.chance(0.5),
            };
            emit_unit(cat, pair, &mut tokens, &mut spans);
            push_filler(&mut tokens, rng);
        } else {
            push_filler(&mut tokens, rng);
        }
    }
    let tail = rng.below(2);
    for _ in 0..tail {
        push_filler(&mut tokens, rng);
    }
    spans.sort_by(|a, b| (a.start, a.end, &a.category).cmp(&(b.start, b.end, &b.category)));
    Record {
        text_id,
        text: tokens.join(" "),
        spans,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn toy_labels() -> LabelFile {
        LabelFile::new(vec![
            LabelEntry {
                category: "Die".into(),
                annotation: "a die event occurs whenever the life of a person ends".into(),
            },
            LabelEntry {
                category: "Attack".into(),
                annotation: "an attack event is a violent act causing harm".into(),
            },
        ])
        .unwrap()
    }

    #[test]
    fn load_single_record() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            r#"{"text":"john died","spans":[{"start":1,"end":1,"category":"Die"}]}"#,
        )
        .unwrap();
        let corpus = load_corpus(&path, &toy_labels(), Split::Train).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus.records[0].spans.len(), 1);
        assert_eq!(corpus.records[0].text_id, 0);
    }

    #[test]
    fn malformed_json_reports_line_number() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            "{\"text\":\"ok\",\"spans\":[]}\nnot json at all\n",
        )
        .unwrap();
        let err = load_corpus(&path, &toy_labels(), Split::Train)
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn inverted_span_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            r#"{"text":"john died","spans":[{"start":1,"end":0,"category":"Die"}]}"#,
        )
        .unwrap();
        let err = load_corpus(&path, &toy_labels(), Split::Train).unwrap_err();
        assert!(err.to_string().contains("before start"), "{err}");
    }

    #[test]
    fn unknown_category_is_named_in_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            r#"{"text":"john died","spans":[{"start":0,"end":0,"category":"Ghost"}]}"#,
        )
        .unwrap();
        let err = load_corpus(&path, &toy_labels(), Split::Train).unwrap_err();
        assert!(err.to_string().contains("Ghost"), "{err}");
    }

    #[test]
    fn out_of_range_span_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            r#"{"text":"john died","spans":[{"start":0,"end":7,"category":"Die"}]}"#,
        )
        .unwrap();
        assert!(load_corpus(&path, &toy_labels(), Split::Train).is_err());
    }

    #[test]
    fn save_load_round_trip_is_identity() {
        let (train, _, _, labels) = synth_corpus(&SynthSpec::default(), 7).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("round.jsonl");
        save_corpus(&train, &path).unwrap();
        let loaded = load_corpus(&path, &labels, Split::Train).unwrap();
        assert_eq!(loaded.len(), train.len());
        for (a, b) in loaded.records.iter().zip(&train.records) {
            assert_eq!(a.text, b.text);
            assert_eq!(a.spans, b.spans);
            assert_eq!(a.text_id, b.text_id);
        }
    }

    #[test]
    fn derive_gold_single_span() {
        let labels = toy_labels();
        let record = Record {
            text_id: 0,
            text: "john died".into(),
            spans: vec![RecordSpan {
                start: 1,
                end: 1,
                category: "Die".into(),
            }],
        };
        let gold = derive_gold(&record, &labels, 2, SpanMode::Flat);
        assert_eq!(gold.starts[0], vec![0.0, 1.0]);
        assert_eq!(gold.ends[0], vec![0.0, 1.0]);
        assert_eq!(gold.starts[1], vec![0.0, 0.0]);
        assert!(gold.pairs.is_none());
    }

    #[test]
    fn derive_gold_nested_pairs() {
        let labels = toy_labels();
        let record = Record {
            text_id: 0,
            text: "a b c d".into(),
            spans: vec![
                RecordSpan {
                    start: 0,
                    end: 3,
                    category: "Die".into(),
                },
                RecordSpan {
                    start: 1,
                    end: 2,
                    category: "Die".into(),
                },
            ],
        };
        let gold = derive_gold(&record, &labels, 4, SpanMode::Nested);
        assert_eq!(gold.starts[0], vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(gold.ends[0], vec![0.0, 0.0, 1.0, 1.0]);
        let pairs = gold.pairs.as_ref().unwrap();
        assert_eq!(pairs[0][3], 1.0);
        assert_eq!(pairs[0][4 + 2], 1.0);
        assert_eq!(pairs[0].iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn derive_gold_empty_spans_all_zero() {
        let labels = toy_labels();
        let record = Record {
            text_id: 0,
            text: "nothing here".into(),
            spans: vec![],
        };
        let gold = derive_gold(&record, &labels, 3, SpanMode::Flat);
        assert!(gold.starts.iter().all(|v| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn gold_indicators_decode_back_to_gold_spans() {
        // Perfect probabilities derived from the indicators must decode to
        // exactly the gold span set under nested decoding.
        let spec = SynthSpec {
            mode: SpanMode::Nested,
            nested_spans: true,
            ..Default::default()
        };
        let (train, _, _, labels) = synth_corpus(&spec, 11).unwrap();
        for record in train.records.iter().take(10) {
            let n = split_tokens(&record.text).len();
            let gold = derive_gold(record, &labels, n, SpanMode::Nested);
            let pair_mats: Vec<crate::tensor::Tensor> = gold
                .pairs
                .as_ref()
                .unwrap()
                .iter()
                .map(|m| crate::tensor::Tensor::from_vec(vec![n, n], m.clone()).unwrap())
                .collect();
            let pairs = crate::scoring::PairScores::from_matrices(pair_mats, n);
            let mut decoded = Vec::new();
            for c in 0..labels.categories() {
                for span in crate::decoding::nested_match(
                    &gold.starts[c],
                    &gold.ends[c],
                    &pairs,
                    c,
                    0.5,
                )
                .unwrap()
                {
                    decoded.push(RecordSpan {
                        start: span.start,
                        end: span.end,
                        category: labels.entries[c].category.clone(),
                    });
                }
            }
            decoded.sort_by(|a, b| (a.start, a.end, &a.category).cmp(&(b.start, b.end, &b.category)));
            assert_eq!(decoded, record.spans, "text: {}", record.text);
        }
    }

    #[test]
    fn synth_counts_and_determinism() {
        let spec = SynthSpec {
            categories: 3,
            sentences: 30,
            ..Default::default()
        };
        let (train, dev, test, labels) = synth_corpus(&spec, 42).unwrap();
        assert_eq!(train.len(), 30);
        assert_eq!(labels.categories(), 3);
        assert!(!dev.is_empty() && !test.is_empty());

        let (train2, _, _, _) = synth_corpus(&spec, 42).unwrap();
        for (a, b) in train.records.iter().zip(&train2.records) {
            assert_eq!(a.text, b.text);
            assert_eq!(a.spans, b.spans);
        }
        let (train3, _, _, _) = synth_corpus(&spec, 43).unwrap();
        assert!(train
            .records
            .iter()
            .zip(&train3.records)
            .any(|(a, b)| a.text != b.text));
    }

    #[test]
    fn nested_generation_contains_overlapping_spans() {
        let spec = SynthSpec {
            mode: SpanMode::Nested,
            nested_spans: true,
            ..Default::default()
        };
        let (train, _, _, _) = synth_corpus(&spec, 5).unwrap();
        let has_overlap = train.records.iter().any(|r| {
            r.spans.iter().enumerate().any(|(i, a)| {
                r.spans.iter().skip(i + 1).any(|b| {
                    a.category == b.category && a.start <= b.end && b.start <= a.end
                })
            })
        });
        assert!(has_overlap);
    }

    #[test]
    fn contradictory_synth_spec_is_rejected() {
        let spec = SynthSpec {
            nested_spans: true,
            mode: SpanMode::Flat,
            ..Default::default()
        };
        assert!(matches!(synth_corpus(&spec, 1), Err(Error::Config(_))));
    }

    #[test]
    fn triggers_only_occur_inside_spans() {
        let (train, _, _, labels) = synth_corpus(&SynthSpec::default(), 13).unwrap();
        for r in &train.records {
            let tokens = split_tokens(&r.text);
            for (i, tok) in tokens.iter().enumerate() {
                let owner = labels
                    .entries
                    .iter()
                    .position(|e| {
                        let (t1, t2) = trigger_tokens(&e.category);
                        *tok == t1 || *tok == t2
                    });
                let in_span = r
                    .spans
                    .iter()
                    .any(|s| s.start <= i && i <= s.end);
                assert_eq!(owner.is_some(), in_span, "token {tok} at {i} in {:?}", r.text);
            }
        }
    }
}
