//! Notes, annotations, sentence-level snippets and the labels derived from them.
//!
//! All offsets in this module are unicode scalar value positions (what
//! `str::chars` yields), never byte offsets.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate note id `{id}`")]
    DuplicateNote { line: usize, id: String },
    #[error("line {line}: annotation span [{start},{end}) is invalid for note `{note_id}`")]
    BadAnnotationSpan {
        line: usize,
        note_id: String,
        start: usize,
        end: usize,
    },
    #[error("annotation references unknown note `{0}`")]
    UnknownNote(String),
    #[error("cannot split {0} note(s); at least 2 are required")]
    TooFewNotes(usize),
    #[error("test fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Half-open character range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start < end, "empty span [{start},{end})");
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// True when the two ranges share at least one character.
    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Note {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub note_id: String,
    #[serde(flatten)]
    pub span: Span,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snippet {
    pub id: String,
    pub note_id: String,
    #[serde(flatten)]
    pub span: Span,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnippetLabel {
    pub snippet_id: String,
    pub positive: bool,
}

/// A snippet together with its binary label, the unit of train/test splitting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSnippet {
    #[serde(flatten)]
    pub snippet: Snippet,
    pub positive: bool,
}

/// One line of a corpus file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CorpusRecord {
    Note {
        id: String,
        text: String,
        #[serde(default)]
        meta: BTreeMap<String, String>,
    },
    Annotation {
        note_id: String,
        start: usize,
        end: usize,
        category: String,
    },
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub notes: Vec<Note>,
    pub annotations: Vec<Annotation>,
}

pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Slices `text` by a character span. Out-of-range ends are clamped.
pub fn slice_chars(text: &str, span: Span) -> &str {
    let mut indices = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
    let start = indices.nth(span.start).unwrap_or(text.len());
    let end = if span.end > span.start {
        indices.nth(span.end - span.start - 1).unwrap_or(text.len())
    } else {
        start
    };
    &text[start..end]
}

/// Parses a line-delimited corpus. Blank lines are ignored; line numbers in
/// errors are 1-based.
pub fn ingest<R: BufRead>(reader: R) -> Result<Corpus, CorpusError> {
    let mut corpus = Corpus::default();
    let mut note_lengths: HashMap<String, usize> = HashMap::new();
    let mut pending: Vec<(usize, Annotation)> = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        match record {
            CorpusRecord::Note { id, text, meta } => {
                if id.is_empty() {
                    return Err(CorpusError::Malformed {
                        line: line_no,
                        message: "note id is empty".into(),
                    });
                }
                if note_lengths.insert(id.clone(), char_len(&text)).is_some() {
                    return Err(CorpusError::DuplicateNote { line: line_no, id });
                }
                corpus.notes.push(Note { id, text, meta });
            }
            CorpusRecord::Annotation {
                note_id,
                start,
                end,
                category,
            } => {
                if start >= end {
                    return Err(CorpusError::BadAnnotationSpan {
                        line: line_no,
                        note_id,
                        start,
                        end,
                    });
                }
                let ann = Annotation {
                    note_id,
                    span: Span { start, end },
                    category,
                };
                pending.push((line_no, ann.clone()));
                corpus.annotations.push(ann);
            }
        }
    }

    // Annotations may precede their note in the stream, so bounds are checked last.
    for (line, ann) in pending {
        if let Some(&len) = note_lengths.get(&ann.note_id) {
            if ann.span.end > len {
                return Err(CorpusError::BadAnnotationSpan {
                    line,
                    note_id: ann.note_id,
                    start: ann.span.start,
                    end: ann.span.end,
                });
            }
        }
    }
    Ok(corpus)
}

/// Serializes a corpus back into its line-delimited form.
pub fn corpus_records(corpus: &Corpus) -> Vec<CorpusRecord> {
    let notes = corpus.notes.iter().map(|n| CorpusRecord::Note {
        id: n.id.clone(),
        text: n.text.clone(),
        meta: n.meta.clone(),
    });
    let anns = corpus.annotations.iter().map(|a| CorpusRecord::Annotation {
        note_id: a.note_id.clone(),
        start: a.span.start,
        end: a.span.end,
        category: a.category.clone(),
    });
    notes.chain(anns).collect()
}

/// Rule-based sentence splitter.
#[derive(Debug, Clone)]
pub struct Segmenter {
    abbreviations: HashSet<String>,
}

pub const DEFAULT_ABBREVIATIONS: &[&str] = &[
    "dr", "mr", "mrs", "ms", "vs", "e.g", "i.e", "approx", "fig", "no", "st", "b.i.d", "t.i.d",
    "q.i.d", "p.o", "q.d", "h.o", "s.p", "w.o",
];

impl Default for Segmenter {
    fn default() -> Self {
        Self::with_abbreviations(DEFAULT_ABBREVIATIONS.iter().copied())
    }
}

impl Segmenter {
    /// Abbreviations are matched case-insensitively, without their final period.
    pub fn with_abbreviations<I, S>(abbreviations: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            abbreviations: abbreviations
                .into_iter()
                .map(|a| a.as_ref().trim_end_matches('.').to_lowercase())
                .collect(),
        }
    }

    pub fn segment(&self, note: &Note) -> Vec<Snippet> {
        let chars: Vec<char> = note.text.chars().collect();
        let mut snippets = Vec::new();
        let mut seg_start = 0;
        let mut i = 0;

        while i < chars.len() {
            let c = chars[i];
            if matches!(c, '.' | '!' | '?') {
                if let Some((end, next)) = self.terminator_boundary(&chars, i) {
                    push_trimmed(&mut snippets, note, &chars, seg_start, end);
                    seg_start = next;
                    i = next;
                    continue;
                }
            } else if c == '\n' {
                if let Some(next) = blank_line_end(&chars, i) {
                    push_trimmed(&mut snippets, note, &chars, seg_start, i);
                    seg_start = next;
                    i = next;
                    continue;
                }
            }
            i += 1;
        }
        push_trimmed(&mut snippets, note, &chars, seg_start, chars.len());
        snippets
    }

    /// For a terminator at `pos`, returns `(segment_end, next_start)` when it
    /// closes a sentence.
    fn terminator_boundary(&self, chars: &[char], pos: usize) -> Option<(usize, usize)> {
        let mut end = pos + 1;
        // Runs like "?!" or "..." end together.
        while end < chars.len() && matches!(chars[end], '.' | '!' | '?') {
            end += 1;
        }
        while end < chars.len() && matches!(chars[end], ')' | ']' | '"' | '\'') {
            end += 1;
        }
        let mut next = end;
        while next < chars.len() && chars[next].is_whitespace() {
            next += 1;
        }
        if next == end || next >= chars.len() {
            return None;
        }
        let follower = chars[next];
        if !(follower.is_uppercase() || follower.is_ascii_digit()) {
            return None;
        }
        if chars[pos] == '.' {
            let prev_digit = pos > 0 && chars[pos - 1].is_ascii_digit();
            let next_digit = chars.get(pos + 1).is_some_and(|c| c.is_ascii_digit());
            if prev_digit && next_digit {
                return None;
            }
            if self.is_abbreviation(chars, pos) {
                return None;
            }
        }
        Some((end, next))
    }

    fn is_abbreviation(&self, chars: &[char], period: usize) -> bool {
        let mut start = period;
        while start > 0 && (chars[start - 1].is_alphabetic() || chars[start - 1] == '.') {
            start -= 1;
        }
        if start == period {
            return false;
        }
        let word: String = chars[start..period].iter().collect::<String>().to_lowercase();
        self.abbreviations.contains(word.trim_start_matches('.'))
    }
}

/// If `chars[pos]` is a newline that starts a blank line, returns the index
/// of the first non-whitespace character after the blank run.
fn blank_line_end(chars: &[char], pos: usize) -> Option<usize> {
    let mut j = pos + 1;
    while j < chars.len() && chars[j] != '\n' && chars[j].is_whitespace() {
        j += 1;
    }
    if j < chars.len() && chars[j] == '\n' {
        while j < chars.len() && chars[j].is_whitespace() {
            j += 1;
        }
        Some(j)
    } else {
        None
    }
}

fn push_trimmed(out: &mut Vec<Snippet>, note: &Note, chars: &[char], start: usize, end: usize) {
    let mut s = start;
    let mut e = end;
    while s < e && chars[s].is_whitespace() {
        s += 1;
    }
    while e > s && chars[e - 1].is_whitespace() {
        e -= 1;
    }
    if s == e {
        return;
    }
    out.push(Snippet {
        id: format!("{}:s{:04}", note.id, out.len()),
        note_id: note.id.clone(),
        span: Span::new(s, e),
        text: chars[s..e].iter().collect(),
    });
}

/// Segments with the default abbreviation list.
pub fn segment(note: &Note) -> Vec<Snippet> {
    Segmenter::default().segment(note)
}

/// A snippet is positive when any annotation on the same note overlaps it.
pub fn derive_labels(
    snippets: &[Snippet],
    annotations: &[Annotation],
) -> Result<Vec<SnippetLabel>, CorpusError> {
    let known: HashSet<&str> = snippets.iter().map(|s| s.note_id.as_str()).collect();
    let mut by_note: HashMap<&str, Vec<Span>> = HashMap::new();
    for ann in annotations {
        if !known.contains(ann.note_id.as_str()) {
            return Err(CorpusError::UnknownNote(ann.note_id.clone()));
        }
        by_note.entry(ann.note_id.as_str()).or_default().push(ann.span);
    }
    Ok(snippets
        .iter()
        .map(|s| SnippetLabel {
            snippet_id: s.id.clone(),
            positive: by_note
                .get(s.note_id.as_str())
                .is_some_and(|spans| spans.iter().any(|a| a.overlaps(&s.span))),
        })
        .collect())
}

/// Joins snippets with their labels by snippet id. Snippets without a label
/// are dropped.
pub fn attach_labels(snippets: &[Snippet], labels: &[SnippetLabel]) -> Vec<LabeledSnippet> {
    let by_id: HashMap<&str, bool> = labels
        .iter()
        .map(|l| (l.snippet_id.as_str(), l.positive))
        .collect();
    snippets
        .iter()
        .filter_map(|s| {
            by_id.get(s.id.as_str()).map(|&positive| LabeledSnippet {
                snippet: s.clone(),
                positive,
            })
        })
        .collect()
}

/// Seeded train/test split grouped by note id.
pub fn split(
    snippets: &[LabeledSnippet],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledSnippet>, Vec<LabeledSnippet>), CorpusError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CorpusError::BadFraction(test_fraction));
    }
    let notes: BTreeSet<&str> = snippets.iter().map(|s| s.snippet.note_id.as_str()).collect();
    if notes.len() < 2 {
        return Err(CorpusError::TooFewNotes(notes.len()));
    }
    let mut order: Vec<&str> = notes.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n = order.len();
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let test_notes: HashSet<&str> = order[..n_test].iter().copied().collect();

    let (test, train): (Vec<_>, Vec<_>) = snippets
        .iter()
        .cloned()
        .partition(|s| test_notes.contains(s.snippet.note_id.as_str()));
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn note(id: &str, text: &str) -> Note {
        Note {
            id: id.into(),
            text: text.into(),
            meta: BTreeMap::new(),
        }
    }

    fn texts(snips: &[Snippet]) -> Vec<&str> {
        snips.iter().map(|s| s.text.as_str()).collect()
    }

    #[test]
    fn ingest_counts_records() {
        let data = r#"{"kind":"note","id":"n1","text":"Pt afebrile.","meta":{"case":"c1"}}
{"kind":"note","id":"n2","text":"Wound clean."}
{"kind":"annotation","note_id":"n1","start":0,"end":2,"category":"sign"}
"#;
        let corpus = ingest(data.as_bytes()).unwrap();
        assert_eq!(corpus.notes.len(), 2);
        assert_eq!(corpus.annotations.len(), 1);
        assert_eq!(corpus.notes[0].meta["case"], "c1");
        assert_eq!(corpus.notes[1].id, "n2");
    }

    #[test]
    fn ingest_empty_stream() {
        let corpus = ingest("".as_bytes()).unwrap();
        assert_eq!(corpus, Corpus::default());
    }

    #[test]
    fn ingest_reports_truncated_line() {
        let data = "{\"kind\":\"note\",\"id\":\"a\",\"text\":\"x\"}\n{\"kind\":\"note\",\"id\":\"b\",\"text\":\"y\"}\n{\"kind\":\"note\",\"id\":\"c\",\"te\n";
        match ingest(data.as_bytes()) {
            Err(CorpusError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn ingest_rejects_duplicate_ids() {
        let data = "{\"kind\":\"note\",\"id\":\"a\",\"text\":\"x\"}\n{\"kind\":\"note\",\"id\":\"a\",\"text\":\"y\"}\n";
        assert!(matches!(
            ingest(data.as_bytes()),
            Err(CorpusError::DuplicateNote { line: 2, .. })
        ));
    }

    #[test]
    fn ingest_rejects_out_of_range_annotation() {
        let data = "{\"kind\":\"annotation\",\"note_id\":\"a\",\"start\":0,\"end\":5,\"category\":\"x\"}\n{\"kind\":\"note\",\"id\":\"a\",\"text\":\"abc\"}\n";
        assert!(matches!(
            ingest(data.as_bytes()),
            Err(CorpusError::BadAnnotationSpan { line: 1, .. })
        ));
    }

    #[test]
    fn segments_two_sentences() {
        let snips = segment(&note("n", "Pt afebrile. Wound clean."));
        assert_eq!(texts(&snips), ["Pt afebrile.", "Wound clean."]);
        assert_eq!(snips[1].span, Span::new(13, 25));
    }

    #[test]
    fn unterminated_text_is_one_snippet() {
        let snips = segment(&note("n", "no trailing period"));
        assert_eq!(texts(&snips), ["no trailing period"]);
        assert_eq!(snips[0].span, Span::new(0, 18));
    }

    #[test]
    fn decimal_point_is_not_a_boundary() {
        let snips = segment(&note("n", "WBC 12.5 elevated. Incision erythema noted."));
        assert_eq!(texts(&snips), ["WBC 12.5 elevated.", "Incision erythema noted."]);
    }

    #[test]
    fn abbreviations_and_lowercase_followers_do_not_split() {
        let snips = segment(&note("n", "Seen by Dr. Smith today. stable vs. worse? Unclear."));
        assert_eq!(texts(&snips), ["Seen by Dr. Smith today. stable vs. worse?", "Unclear."]);
    }

    #[test]
    fn blank_lines_split_and_whitespace_is_trimmed() {
        let snips = segment(&note("n", "  HPI: wound drainage\n\n  \nPlan: dressing change  "));
        assert_eq!(texts(&snips), ["HPI: wound drainage", "Plan: dressing change"]);
        for s in &snips {
            assert_eq!(slice_chars("  HPI: wound drainage\n\n  \nPlan: dressing change  ", s.span), s.text);
        }
    }

    #[test]
    fn empty_note_has_no_snippets() {
        assert!(segment(&note("n", "")).is_empty());
        assert!(segment(&note("n", " \n\n ")).is_empty());
    }

    #[test]
    fn offsets_are_characters_not_bytes() {
        let text = "Température élevée. Plaie propre.";
        let snips = segment(&note("n", text));
        assert_eq!(texts(&snips), ["Température élevée.", "Plaie propre."]);
        assert_eq!(snips[1].span.start, 20);
        assert_eq!(slice_chars(text, snips[1].span), "Plaie propre.");
    }

    fn snip(start: usize, end: usize) -> Snippet {
        Snippet {
            id: "n:s0000".into(),
            note_id: "n".into(),
            span: Span::new(start, end),
            text: String::new(),
        }
    }

    fn ann(start: usize, end: usize) -> Annotation {
        Annotation {
            note_id: "n".into(),
            span: Span::new(start, end),
            category: "evidence".into(),
        }
    }

    #[test]
    fn label_overlap_rules() {
        let s = [snip(0, 12)];
        assert!(derive_labels(&s, &[ann(5, 9)]).unwrap()[0].positive);
        assert!(!derive_labels(&s, &[ann(12, 20)]).unwrap()[0].positive);
        assert!(derive_labels(&s, &[ann(10, 20)]).unwrap()[0].positive);
        assert!(!derive_labels(&s, &[]).unwrap()[0].positive);
    }

    #[test]
    fn label_unknown_note_is_error() {
        let mut a = ann(0, 1);
        a.note_id = "ghost".into();
        assert!(matches!(
            derive_labels(&[snip(0, 3)], &[a]),
            Err(CorpusError::UnknownNote(id)) if id == "ghost"
        ));
    }

    fn labeled(note_count: usize) -> Vec<LabeledSnippet> {
        (0..note_count)
            .flat_map(|n| {
                (0..3).map(move |k| LabeledSnippet {
                    snippet: Snippet {
                        id: format!("note{n:02}:s{k:04}"),
                        note_id: format!("note{n:02}"),
                        span: Span::new(k * 10, k * 10 + 5),
                        text: "x".into(),
                    },
                    positive: k == 0,
                })
            })
            .collect()
    }

    fn note_ids(part: &[LabeledSnippet]) -> BTreeSet<String> {
        part.iter().map(|s| s.snippet.note_id.clone()).collect()
    }

    #[test]
    fn split_is_grouped_and_repeatable() {
        let data = labeled(10);
        let (train, test) = split(&data, 0.3, 7).unwrap();
        assert_eq!(note_ids(&train).len(), 7);
        assert_eq!(note_ids(&test).len(), 3);
        assert!(note_ids(&train).is_disjoint(&note_ids(&test)));
        assert_eq!(train.len() + test.len(), data.len());
        assert_eq!(split(&data, 0.3, 7).unwrap(), (train, test));
    }

    #[test]
    fn split_two_notes_half() {
        let (train, test) = split(&labeled(2), 0.5, 1).unwrap();
        assert_eq!(note_ids(&train).len(), 1);
        assert_eq!(note_ids(&test).len(), 1);
    }

    #[test]
    fn split_needs_two_notes() {
        assert!(matches!(split(&labeled(1), 0.5, 1), Err(CorpusError::TooFewNotes(1))));
        assert!(matches!(split(&labeled(3), 1.0, 1), Err(CorpusError::BadFraction(_))));
    }
}
