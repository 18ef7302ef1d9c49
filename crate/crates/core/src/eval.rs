//! Classification metrics, keyword coverage and error sampling.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Snippet, SnippetLabel};
use crate::jsonl;
use crate::rule_engine::{RuleError, RuleIndex, RuleSet};
use crate::triage::{Decision, Prediction};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{} prediction(s) have no label: {}", .0.len(), preview(.0))]
    UnlabeledPredictions(Vec<String>),
    #[error("sample size must be at least 1")]
    ZeroSample,
    #[error(transparent)]
    Rules(#[from] RuleError),
    #[error(transparent)]
    Io(#[from] jsonl::JsonlError),
}

fn preview(ids: &[String]) -> String {
    const SHOWN: usize = 10;
    let mut s = ids.iter().take(SHOWN).cloned().collect::<Vec<_>>().join(", ");
    if ids.len() > SHOWN {
        s.push_str(&format!(", ... ({} more)", ids.len() - SHOWN));
    }
    s
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, decision: Decision, positive: bool) {
        match (decision, positive) {
            (Decision::Yes, true) => self.tp += 1,
            (Decision::Yes, false) => self.fp += 1,
            (Decision::No, true) => self.fn_ += 1,
            (Decision::No, false) => self.tn += 1,
        }
    }
}

/// Joins predictions to labels on snippet id. Labels without a prediction are
/// ignored; predictions without a label are an error.
pub fn confusion<'a, I>(predictions: I, labels: &[SnippetLabel]) -> Result<ConfusionCounts, EvalError>
where
    I: IntoIterator<Item = (&'a str, Decision)>,
{
    let gold: HashMap<&str, bool> = labels.iter().map(|l| (l.snippet_id.as_str(), l.positive)).collect();
    let mut counts = ConfusionCounts::default();
    let mut missing = Vec::new();
    for (id, decision) in predictions {
        match gold.get(id) {
            Some(&positive) => counts.record(decision, positive),
            None => missing.push(id.to_string()),
        }
    }
    if missing.is_empty() {
        Ok(counts)
    } else {
        missing.sort();
        Err(EvalError::UnlabeledPredictions(missing))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Rounds half away from zero at `decimals` places. The small nudge keeps
/// values such as 0.185, which are stored just below the midpoint, rounding up.
pub fn round_half_up(x: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    let scaled = x * scale;
    (scaled.abs() + 0.5 + 1e-9).floor().copysign(scaled) / scale
}

pub fn prf(counts: &ConfusionCounts) -> Metrics {
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Metrics { precision, recall, f1 }
}

impl Metrics {
    pub fn rounded(&self, decimals: u32) -> Metrics {
        Metrics {
            precision: round_half_up(self.precision, decimals),
            recall: round_half_up(self.recall, decimals),
            f1: round_half_up(self.f1, decimals),
        }
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}/{:.2}/{:.2}", self.precision, self.recall, self.f1)
    }
}

/// Machine-readable metrics record written by `eval prf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
    pub rounded: Metrics,
    pub config_digest: String,
}

impl MetricsReport {
    pub fn new(counts: ConfusionCounts, config_digest: impl Into<String>) -> Self {
        let metrics = prf(&counts);
        Self {
            counts,
            metrics,
            rounded: metrics.rounded(2),
            config_digest: config_digest.into(),
        }
    }

    pub fn table(&self) -> String {
        let c = &self.counts;
        let mut out = format!(
            "tp={} fp={} fn={} tn={} total={}\n\n{:<10} {:>7} {:>7}\n",
            c.tp,
            c.fp,
            c.fn_,
            c.tn,
            c.total(),
            "metric",
            "value",
            "rounded"
        );
        let rows = [
            ("precision", self.metrics.precision, self.rounded.precision),
            ("recall", self.metrics.recall, self.rounded.recall),
            ("f1", self.metrics.f1, self.rounded.f1),
        ];
        for (name, value, rounded) in rows {
            out.push_str(&format!("{name:<10} {value:>7.4} {rounded:>7.2}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub reference_matched: usize,
    pub also_matched_by_generated: usize,
    pub coverage: f64,
    /// Reference-matched snippets the generated rules miss, sorted.
    #[serde(default)]
    pub uncovered: Vec<String>,
}

/// Fraction of snippets with at least one final reference match that also
/// have at least one final generated match.
pub fn coverage_with(generated: &RuleIndex, reference: &RuleIndex, snippets: &[Snippet]) -> CoverageReport {
    let mut reference_matched = 0;
    let mut also = 0;
    let mut uncovered = Vec::new();
    for snippet in snippets {
        if reference.match_snippet(snippet).is_empty() {
            continue;
        }
        reference_matched += 1;
        if generated.match_snippet(snippet).is_empty() {
            uncovered.push(snippet.id.clone());
        } else {
            also += 1;
        }
    }
    uncovered.sort();
    CoverageReport {
        reference_matched,
        also_matched_by_generated: also,
        coverage: if reference_matched == 0 {
            0.0
        } else {
            also as f64 / reference_matched as f64
        },
        uncovered,
    }
}

pub fn coverage(generated: &RuleSet, reference: &RuleSet, snippets: &[Snippet]) -> Result<CoverageReport, EvalError> {
    Ok(coverage_with(&RuleIndex::build(generated)?, &RuleIndex::build(reference)?, snippets))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Fp,
    Fn,
}

impl ErrorKind {
    pub fn file_name(&self) -> &'static str {
        match self {
            ErrorKind::Fp => "errors.fp.jsonl",
            ErrorKind::Fn => "errors.fn.jsonl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSampleHeader {
    pub error_type: ErrorKind,
    pub available: usize,
    pub sampled: usize,
    pub sample_size: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub snippet_id: String,
    pub note_id: String,
    pub text: String,
    pub decision: Decision,
    pub positive: bool,
    pub yes_count: usize,
    pub votes: usize,
    pub transcripts: serde_json::Value,
    /// Left blank for the human reviewer.
    pub category: String,
}

/// Each error file starts with a header line, then one line per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum ErrorFileLine {
    Header(ErrorSampleHeader),
    Error(ErrorSample),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorExport {
    pub fp: ErrorSampleHeader,
    #[serde(rename = "fn")]
    pub fn_: ErrorSampleHeader,
}

fn sample_indices(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut picked = rand::seq::index::sample(rng, n, k.min(n)).into_vec();
    picked.sort_unstable();
    picked
}

/// Writes seeded samples of false positives and false negatives into
/// `out_dir`. Candidates are ordered by snippet id before sampling, so the
/// sample depends only on the inputs and the seed.
pub fn export_errors(
    predictions: &[Prediction],
    labels: &[SnippetLabel],
    snippets: &[Snippet],
    sample_size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<ErrorExport, EvalError> {
    if sample_size == 0 {
        return Err(EvalError::ZeroSample);
    }
    let gold: HashMap<&str, bool> = labels.iter().map(|l| (l.snippet_id.as_str(), l.positive)).collect();
    let by_id: HashMap<&str, &Snippet> = snippets.iter().map(|s| (s.id.as_str(), s)).collect();

    let mut buckets: BTreeMap<ErrorKind, Vec<&Prediction>> = BTreeMap::new();
    let mut missing = Vec::new();
    for p in predictions {
        match gold.get(p.snippet_id.as_str()) {
            Some(true) if p.decision == Decision::No => buckets.entry(ErrorKind::Fn).or_default().push(p),
            Some(false) if p.decision == Decision::Yes => buckets.entry(ErrorKind::Fp).or_default().push(p),
            Some(_) => {}
            None => missing.push(p.snippet_id.clone()),
        }
    }
    if !missing.is_empty() {
        missing.sort();
        return Err(EvalError::UnlabeledPredictions(missing));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut headers = Vec::new();
    for kind in [ErrorKind::Fp, ErrorKind::Fn] {
        let mut candidates = buckets.remove(&kind).unwrap_or_default();
        candidates.sort_by(|a, b| a.snippet_id.cmp(&b.snippet_id));
        let picked = sample_indices(candidates.len(), sample_size, &mut rng);
        let header = ErrorSampleHeader {
            error_type: kind,
            available: candidates.len(),
            sampled: picked.len(),
            sample_size,
            seed,
            note: (candidates.len() < sample_size)
                .then(|| format!("only {} available; all included", candidates.len())),
        };
        let lines = std::iter::once(ErrorFileLine::Header(header.clone())).chain(picked.into_iter().map(|i| {
            let p = candidates[i];
            let snippet = by_id.get(p.snippet_id.as_str());
            ErrorFileLine::Error(ErrorSample {
                snippet_id: p.snippet_id.clone(),
                note_id: snippet.map(|s| s.note_id.clone()).unwrap_or_default(),
                text: snippet.map(|s| s.text.clone()).unwrap_or_default(),
                decision: p.decision,
                positive: kind == ErrorKind::Fn,
                yes_count: p.votes.yes_count,
                votes: p.votes.verdicts.len(),
                transcripts: serde_json::to_value(&p.per_run_artifacts).unwrap_or_default(),
                category: String::new(),
            })
        }));
        jsonl::write(&out_dir.join(kind.file_name()), lines)?;
        headers.push(header);
    }
    let fn_ = headers.pop().expect("two headers");
    let fp = headers.pop().expect("two headers");
    Ok(ErrorExport { fp, fn_ })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Span;
    use crate::rule_engine::Rule;
    use crate::triage::{ParsePath, RunArtifact, Verdict, VoteResult};

    fn label(id: &str, positive: bool) -> SnippetLabel {
        SnippetLabel {
            snippet_id: id.into(),
            positive,
        }
    }

    fn snippet(id: &str, text: &str) -> Snippet {
        Snippet {
            id: id.into(),
            note_id: "n".into(),
            span: Span::new(0, text.chars().count()),
            text: text.into(),
        }
    }

    fn prediction(id: &str, decision: Decision) -> Prediction {
        let verdict = Verdict {
            conclusion: decision,
            raw_response: String::new(),
            parse_path: ParsePath::StrictJson,
            format_error: false,
        };
        Prediction {
            snippet_id: id.into(),
            decision,
            votes: VoteResult::tally(vec![verdict]),
            per_run_artifacts: vec![RunArtifact { chains: vec![] }],
        }
    }

    #[test]
    fn one_of_each_cell() {
        let labels = [label("a", true), label("b", false), label("c", true), label("d", false)];
        let preds = [("a", Decision::Yes), ("b", Decision::Yes), ("c", Decision::No), ("d", Decision::No)];
        let c = confusion(preds, &labels).unwrap();
        assert_eq!(c, ConfusionCounts::new(1, 1, 1, 1));
        assert_eq!(c.total(), 4);
    }

    #[test]
    fn unlabeled_prediction_is_listed() {
        let err = confusion([("zz", Decision::Yes), ("a", Decision::No)], &[label("a", true)]).unwrap_err();
        assert!(err.to_string().contains("zz"));
    }

    #[test]
    fn zero_division_is_zero() {
        let m = prf(&ConfusionCounts::default());
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(round_half_up(0.185, 2), 0.19);
        assert_eq!(round_half_up(0.1849, 2), 0.18);
        assert_eq!(round_half_up(0.125, 2), 0.13);
        assert_eq!(round_half_up(1.0, 2), 1.0);
    }

    #[test]
    fn coverage_identity_and_half() {
        let reference = RuleSet::new("r", "1", vec![Rule::normal("r1", "abscess", "SSI"), Rule::normal("r2", "pus", "SSI")]);
        let generated = RuleSet::new("g", "1", vec![Rule::normal("g1", "abscess", "SSI")]);
        let snippets = [snippet("a", "small abscess"), snippet("b", "pus at the site"), snippet("c", "afebrile")];
        let same = coverage(&reference, &reference, &snippets).unwrap();
        assert_eq!(same.coverage, 1.0);
        let half = coverage(&generated, &reference, &snippets).unwrap();
        assert_eq!((half.reference_matched, half.also_matched_by_generated, half.coverage), (2, 1, 0.5));
        assert_eq!(half.uncovered, ["b"]);
    }

    #[test]
    fn coverage_uses_final_matches() {
        let reference = RuleSet::new(
            "r",
            "1",
            vec![Rule::normal("r1", "infection", "SSI"), Rule::pseudo("p1", "no infection", "SSI")],
        );
        let snippets = [snippet("a", "no infection noted")];
        let r = coverage(&reference, &reference, &snippets).unwrap();
        assert_eq!((r.reference_matched, r.coverage), (0, 0.0));
    }

    #[test]
    fn export_samples_are_seeded_and_capped() {
        let dir = tempfile::tempdir().unwrap();
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        let mut snippets = Vec::new();
        for i in 0..150 {
            let id = format!("fp{i:03}");
            preds.push(prediction(&id, Decision::Yes));
            labels.push(label(&id, false));
            snippets.push(snippet(&id, "text"));
        }
        for i in 0..3 {
            let id = format!("fn{i}");
            preds.push(prediction(&id, Decision::No));
            labels.push(label(&id, true));
        }
        let out = export_errors(&preds, &labels, &snippets, 100, 7, dir.path()).unwrap();
        assert_eq!((out.fp.available, out.fp.sampled), (150, 100));
        assert_eq!((out.fn_.available, out.fn_.sampled), (3, 3));
        assert!(out.fn_.note.is_some() && out.fp.note.is_none());

        let first = std::fs::read(dir.path().join("errors.fp.jsonl")).unwrap();
        export_errors(&preds, &labels, &snippets, 100, 7, dir.path()).unwrap();
        assert_eq!(first, std::fs::read(dir.path().join("errors.fp.jsonl")).unwrap());

        let lines: Vec<ErrorFileLine> = jsonl::read(&dir.path().join("errors.fn.jsonl")).unwrap();
        assert_eq!(lines.len(), 4);
        let ErrorFileLine::Error(sample) = &lines[1] else { panic!("expected a sample") };
        assert_eq!(sample.category, "");
        assert!(sample.positive);
    }

    #[test]
    fn export_with_no_errors_writes_headers() {
        let dir = tempfile::tempdir().unwrap();
        let out = export_errors(&[prediction("a", Decision::Yes)], &[label("a", true)], &[], 5, 1, dir.path()).unwrap();
        assert_eq!(out.fp.sampled + out.fn_.sampled, 0);
        let lines: Vec<ErrorFileLine> = jsonl::read(&dir.path().join("errors.fp.jsonl")).unwrap();
        assert!(matches!(lines.as_slice(), [ErrorFileLine::Header(_)]));
        assert!(matches!(export_errors(&[], &[], &[], 0, 1, dir.path()), Err(EvalError::ZeroSample)));
    }
}
