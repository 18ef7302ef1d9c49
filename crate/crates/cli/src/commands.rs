use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use rulesmith_core::batch::BatchOptions;
use rulesmith_core::corpus::{self, Annotation, LabeledSnippet, Note};
use rulesmith_core::eval::{self, MetricsReport};
use rulesmith_core::jsonl;
use rulesmith_core::keywords::{self, KeywordConfig};
use rulesmith_core::llm_gateway::{ChatBackend, HttpBackend, HttpConfig, LexiconMock, RecordingBackend, ReplayBackend};
use rulesmith_core::run::{digest, file_digest, RunManifest};
use rulesmith_core::triage::{self, Prediction, TriageConfig};
use rulesmith_core::{ExpertMode, Gateway, GuidelineDoc, PromptLibrary, RuleIndex, RuleSet, Snippet, SnippetLabel};
use serde_json::json;

use crate::config::{env, BackendKind, FileConfig, LlmSettings};
use crate::{existing, Cli, CmdResult, Command, EvalCommand, ExtractArgs, Failure, RulesCommand, ServeArgs, TriageArgs};

const NOTES: &str = "notes.jsonl";
const ANNOTATIONS: &str = "annotations.jsonl";
const SNIPPETS: &str = "snippets.jsonl";
const LABELS: &str = "labels.jsonl";
const TRAIN: &str = "train.jsonl";
const TEST: &str = "test.jsonl";
const TRIAGE_DIR: &str = "triage";
const KEYWORDS_DIR: &str = "keywords";
const GENERATED_RULES: &str = "generated_rules.jsonl";
const METRICS: &str = "metrics.json";
const COVERAGE: &str = "coverage.json";
const MATCHES: &str = "matches.jsonl";
const ERRORS_DIR: &str = "errors";

const DEFAULT_SEED: u64 = 13;
const DEFAULT_CONCEPT: &str = "TARGET";
const DEFAULT_ADDR: &str = "127.0.0.1:8080";

pub fn run(cli: &Cli, file: &FileConfig) -> CmdResult {
    let dir = cli.run_dir.as_path();
    match &cli.command {
        Command::Ingest { corpus } => ingest(dir, corpus),
        Command::Segment => segment(dir),
        Command::Label => label(dir),
        Command::Split { test_fraction, seed } => split(dir, *test_fraction, seed.or(file.seed).unwrap_or(DEFAULT_SEED)),
        Command::Triage(args) => run_triage(dir, file, args),
        Command::Extract(args) => extract(dir, file, args),
        Command::Rules(RulesCommand::Build { keywords, concept, out }) => rules_build(dir, file, keywords, concept, out),
        Command::Rules(RulesCommand::Show { rules }) => rules_show(rules),
        Command::Match { rules, text, snippets } => match_rules(dir, rules, text.as_deref(), snippets),
        Command::Eval(EvalCommand::Prf { predictions, labels }) => eval_prf(dir, predictions, labels),
        Command::Eval(EvalCommand::Coverage {
            generated,
            reference,
            snippets,
        }) => eval_coverage(dir, file, generated, reference, snippets),
        Command::ExportErrors {
            transcripts,
            labels,
            snippets,
            sample_size,
            seed,
            out,
        } => export_errors(
            dir,
            transcripts,
            labels,
            snippets,
            *sample_size,
            seed.or(file.seed).unwrap_or(DEFAULT_SEED),
            out,
        ),
        Command::Serve(args) => serve(dir, file, args),
    }
}

/// `given` if set, else `default` under the run directory; must exist.
fn input(given: &Option<PathBuf>, dir: &Path, default: &str) -> Result<PathBuf, Failure> {
    existing(&given.clone().unwrap_or_else(|| dir.join(default)))
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, Failure> {
    Ok(jsonl::read(path)?)
}

fn ensure_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(())
}

fn digest_of(path: &Path) -> String {
    file_digest(path).unwrap_or_default()
}

fn ingest(dir: &Path, corpus_path: &Path) -> CmdResult {
    let path = existing(corpus_path)?;
    let manifest = RunManifest::start("ingest", &json!({ "corpus": digest_of(&path) }));
    let reader = BufReader::new(std::fs::File::open(&path).with_context(|| format!("cannot open {}", path.display()))?);
    let corpus = corpus::ingest(reader).with_context(|| format!("invalid corpus {}", path.display()))?;
    ensure_dir(dir)?;
    jsonl::write(&dir.join(NOTES), &corpus.notes)?;
    jsonl::write(&dir.join(ANNOTATIONS), &corpus.annotations)?;
    manifest.finish(dir, &[NOTES, ANNOTATIONS])?;
    println!("ingested {} notes, {} annotations", corpus.notes.len(), corpus.annotations.len());
    Ok(())
}

fn segment(dir: &Path) -> CmdResult {
    let notes_path = input(&None, dir, NOTES)?;
    let manifest = RunManifest::start("segment", &json!({ "notes": digest_of(&notes_path) }));
    let notes: Vec<Note> = read(&notes_path)?;
    let snippets: Vec<Snippet> = notes.iter().flat_map(corpus::segment).collect();
    jsonl::write(&dir.join(SNIPPETS), &snippets)?;
    manifest.finish(dir, &[SNIPPETS])?;
    println!("{} snippets from {} notes", snippets.len(), notes.len());
    Ok(())
}

fn label(dir: &Path) -> CmdResult {
    let snippets_path = input(&None, dir, SNIPPETS)?;
    let annotations_path = input(&None, dir, ANNOTATIONS)?;
    let manifest = RunManifest::start(
        "label",
        &json!({ "snippets": digest_of(&snippets_path), "annotations": digest_of(&annotations_path) }),
    );
    let snippets: Vec<Snippet> = read(&snippets_path)?;
    let annotations: Vec<Annotation> = read(&annotations_path)?;
    let labels = corpus::derive_labels(&snippets, &annotations)?;
    jsonl::write(&dir.join(LABELS), &labels)?;
    manifest.finish(dir, &[LABELS])?;
    let positive = labels.iter().filter(|l| l.positive).count();
    println!("{} labels: {} positive, {} negative", labels.len(), positive, labels.len() - positive);
    Ok(())
}

fn split(dir: &Path, test_fraction: f64, seed: u64) -> CmdResult {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Failure::Usage(format!("--test-fraction must be in (0, 1), got {test_fraction}")));
    }
    let snippets_path = input(&None, dir, SNIPPETS)?;
    let labels_path = input(&None, dir, LABELS)?;
    let manifest = RunManifest::start(
        "split",
        &json!({
            "snippets": digest_of(&snippets_path),
            "labels": digest_of(&labels_path),
            "test_fraction": test_fraction,
            "seed": seed,
        }),
    );
    let snippets: Vec<Snippet> = read(&snippets_path)?;
    let labels: Vec<SnippetLabel> = read(&labels_path)?;
    let labeled = corpus::attach_labels(&snippets, &labels);
    let (train, test): (Vec<LabeledSnippet>, Vec<LabeledSnippet>) = corpus::split(&labeled, test_fraction, seed)?;
    jsonl::write(&dir.join(TRAIN), &train)?;
    jsonl::write(&dir.join(TEST), &test)?;
    manifest.finish(dir, &[TRAIN, TEST])?;
    println!("train {} snippets, test {} snippets (seed {seed})", train.len(), test.len());
    Ok(())
}

fn prompts(settings: &LlmSettings) -> Result<PromptLibrary, Failure> {
    match &settings.templates {
        Some(dir) => Ok(PromptLibrary::load_dir(&existing(dir)?)?),
        None => Ok(PromptLibrary::default()),
    }
}

fn prompt_digest(prompts: &PromptLibrary) -> String {
    let bodies: Vec<(&str, &str)> = prompts.templates().map(|t| (t.name.as_str(), t.body.as_str())).collect();
    digest(&json!({ "templates": bodies, "experts": prompts.experts().iter().map(|e| (&e.name, &e.instructions)).collect::<Vec<_>>(), "examples": prompts.keyword_examples() }))
}

fn gateway(settings: &LlmSettings) -> Result<Gateway, Failure> {
    let http = || {
        let mut config = HttpConfig::new(settings.base_url.clone().expect("checked when resolving"));
        config.api_key = settings.api_key.clone();
        HttpBackend::new(config)
    };
    let backend: Arc<dyn ChatBackend> = match settings.backend {
        BackendKind::Mock => Arc::new(LexiconMock::default()),
        BackendKind::Replay => Arc::new(ReplayBackend::open(settings.cassette.as_deref().expect("checked when resolving"))?),
        BackendKind::Http => Arc::new(http()),
        BackendKind::Record => Arc::new(RecordingBackend::new(
            Arc::new(http()),
            settings.cassette.clone().expect("checked when resolving"),
        )),
    };
    Ok(Gateway::from_arc(backend).with_max_in_flight(settings.concurrency))
}

fn guideline(flag: &Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> Result<(GuidelineDoc, String), Failure> {
    let path = flag
        .clone()
        .or_else(|| file.clone())
        .ok_or_else(|| Failure::Usage(format!("--{name} is required")))?;
    let path = existing(&path)?;
    Ok((GuidelineDoc::load(&path)?, digest_of(&path)))
}

fn run_triage(dir: &Path, file: &FileConfig, args: &TriageArgs) -> CmdResult {
    let settings = args.llm.resolve(file)?;
    let votes = args.votes.or(file.votes).unwrap_or(5);
    if votes.is_multiple_of(2) {
        return Err(Failure::Usage(format!("--votes must be odd, got {votes}")));
    }
    let expert_mode: ExpertMode = match args.expert_mode.clone().or_else(|| file.expert_mode.clone()) {
        Some(m) => m.parse().map_err(|e| Failure::Usage(format!("{e}")))?,
        None => ExpertMode::default(),
    };
    let (guide, guide_digest) = guideline(&args.guideline, &file.guideline, "guideline")?;
    let (annotation, annotation_digest) =
        guideline(&args.annotation_guideline, &file.annotation_guideline, "annotation-guideline")?;
    let snippets_path = input(&args.snippets, dir, SNIPPETS)?;
    let out = args.out.clone().unwrap_or_else(|| dir.join(TRIAGE_DIR));
    let prompts = prompts(&settings)?;

    let mut config = TriageConfig::new(settings.model.clone(), guide, annotation);
    config.votes = votes;
    config.expert_mode = expert_mode;
    config.temperature = args.temperature.or(file.triage_temperature).unwrap_or(config.temperature);
    config.max_tokens = settings.max_tokens;
    config.experts = prompts.experts().to_vec();
    config.prompts = prompts;

    let manifest = RunManifest::start(
        "triage",
        &json!({
            "llm": settings,
            "votes": votes,
            "expert_mode": expert_mode.to_string(),
            "temperature": config.temperature,
            "guideline": guide_digest,
            "annotation_guideline": annotation_digest,
            "prompts": prompt_digest(&config.prompts),
            "snippets": digest_of(&snippets_path),
        }),
    );
    let snippets: Vec<Snippet> = read(&snippets_path)?;
    let gw = gateway(&settings)?;
    let options = BatchOptions {
        concurrency: settings.concurrency,
        stop_after: args.stop_after,
    };
    let outcome = triage::triage_corpus(&snippets, &gw, &config, &out, &options)?;
    manifest.finish(
        &out,
        &[
            triage::PREDICTIONS_FILE,
            triage::TRANSCRIPTS_FILE,
            triage::TRIAGE_FAILURES_FILE,
            triage::TRIAGE_SUMMARY_FILE,
        ],
    )?;
    let s = &outcome.summary;
    println!(
        "triaged {}/{} snippets: {} yes, {} no, {} failed, {} format errors",
        s.predicted, s.snippets, s.yes, s.no, s.failed, s.format_errors
    );
    if s.failed > 0 {
        return Err(Failure::Op(anyhow::anyhow!(
            "{} snippet(s) failed; see {}",
            s.failed,
            out.join(triage::TRIAGE_FAILURES_FILE).display()
        )));
    }
    if !s.complete {
        println!("stopped early; run again with the same --run-dir to resume");
    }
    Ok(())
}

fn concept(flag: &Option<String>, file: &FileConfig) -> String {
    flag.clone()
        .or_else(|| file.concept.clone())
        .unwrap_or_else(|| DEFAULT_CONCEPT.to_string())
}

fn extract(dir: &Path, file: &FileConfig, args: &ExtractArgs) -> CmdResult {
    let settings = args.llm.resolve(file)?;
    let (annotation, annotation_digest) =
        guideline(&args.annotation_guideline, &file.annotation_guideline, "annotation-guideline")?;
    let snippets_path = input(&args.snippets, dir, SNIPPETS)?;
    let labels_path = input(&args.labels, dir, LABELS)?;
    let out = args.out.clone().unwrap_or_else(|| dir.join(KEYWORDS_DIR));
    let concept = concept(&args.concept, file);

    let mut config = KeywordConfig::new(settings.model.clone(), annotation);
    config.temperature = args.temperature.or(file.keyword_temperature).unwrap_or(config.temperature);
    config.max_tokens = settings.max_tokens;
    config.prompts = prompts(&settings)?;

    let manifest = RunManifest::start(
        "extract",
        &json!({
            "llm": settings,
            "temperature": config.temperature,
            "annotation_guideline": annotation_digest,
            "prompts": prompt_digest(&config.prompts),
            "snippets": digest_of(&snippets_path),
            "labels": digest_of(&labels_path),
            "concept": concept,
        }),
    );
    let snippets: Vec<Snippet> = read(&snippets_path)?;
    let labels: Vec<SnippetLabel> = read(&labels_path)?;
    let positives: Vec<Snippet> = corpus::attach_labels(&snippets, &labels)
        .into_iter()
        .filter(|l| l.positive)
        .map(|l| l.snippet)
        .collect();
    let gw = gateway(&settings)?;
    let options = BatchOptions {
        concurrency: settings.concurrency,
        stop_after: args.stop_after,
    };
    let outcome = keywords::extract_corpus(&positives, &gw, &config, &out, &options)?;
    let rules = keywords::synthesize_rules(&outcome.validated(), &concept);
    rules.save_path(&out.join(GENERATED_RULES))?;
    manifest.finish(
        &out,
        &[
            keywords::KEYWORDS_FILE,
            keywords::KEYWORD_TRANSCRIPTS_FILE,
            keywords::KEYWORD_FAILURES_FILE,
            keywords::KEYWORD_SUMMARY_FILE,
            GENERATED_RULES,
        ],
    )?;
    let s = &outcome.summary;
    println!(
        "extracted keywords from {}/{} positive snippets: {} concepts ({} kept), {} expanded, {} rules",
        s.extracted,
        s.snippets,
        s.concepts,
        s.surviving_concepts,
        s.expanded_concepts,
        rules.len()
    );
    if s.failed > 0 {
        return Err(Failure::Op(anyhow::anyhow!(
            "{} snippet(s) failed; see {}",
            s.failed,
            out.join(keywords::KEYWORD_FAILURES_FILE).display()
        )));
    }
    if !s.complete {
        println!("stopped early; run again with the same --run-dir to resume");
    }
    Ok(())
}

fn rules_build(
    dir: &Path,
    file: &FileConfig,
    keywords_dir: &Option<PathBuf>,
    concept_flag: &Option<String>,
    out: &Option<PathBuf>,
) -> CmdResult {
    let kw_dir = input(keywords_dir, dir, KEYWORDS_DIR)?;
    let kw_file = existing(&kw_dir.join(keywords::KEYWORDS_FILE))?;
    let concept = concept(concept_flag, file);
    let out = out.clone().unwrap_or_else(|| dir.join(GENERATED_RULES));
    let manifest = RunManifest::start("rules-build", &json!({ "keywords": digest_of(&kw_file), "concept": concept }));
    let rules = keywords::synthesize_rules(&keywords::load_validated(&kw_dir)?, &concept);
    if let Some(parent) = out.parent() {
        ensure_dir(parent)?;
    }
    rules.save_path(&out)?;
    let out_dir = out.parent().unwrap_or(Path::new("."));
    let name = out.file_name().and_then(|n| n.to_str()).unwrap_or(GENERATED_RULES);
    manifest.finish(out_dir, &[name])?;
    println!("{} rules written to {}", rules.len(), out.display());
    Ok(())
}

fn rules_show(path: &Path) -> CmdResult {
    let rules = RuleSet::load_path(&existing(path)?)?;
    let index = RuleIndex::build(&rules)?;
    let mut table = format!(
        "ruleset {} version {}: {} rules, {} trie nodes\n{:<16} {:<7} {:<12} {:<10} phrase\n",
        rules.name,
        rules.version,
        rules.len(),
        index.node_count(),
        "id",
        "kind",
        "concept",
        "origin"
    );
    for r in &rules.rules {
        table.push_str(&format!(
            "{:<16} {:<7} {:<12} {:<10} {}\n",
            r.id,
            r.kind.to_string(),
            r.concept,
            r.meta.get("origin").map(String::as_str).unwrap_or("-"),
            r.phrase_text()
        ));
    }
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    let _ = std::io::stdout().lock().write_all(table.as_bytes());
    Ok(())
}

fn match_rules(dir: &Path, rules_path: &Path, text: Option<&str>, snippets: &Option<PathBuf>) -> CmdResult {
    let rules = RuleSet::load_path(&existing(rules_path)?)?;
    let index = RuleIndex::build(&rules)?;
    if let Some(text) = text {
        for m in index.match_text(text) {
            println!("{}", serde_json::to_string(&m)?);
        }
        return Ok(());
    }
    let snippets_path = input(snippets, dir, SNIPPETS)?;
    let manifest = RunManifest::start(
        "match",
        &json!({ "rules": digest_of(rules_path), "snippets": digest_of(&snippets_path) }),
    );
    let snippets: Vec<Snippet> = read(&snippets_path)?;
    let lines: Vec<_> = snippets
        .iter()
        .map(|s| json!({ "snippet_id": s.id, "matches": index.match_snippet(s) }))
        .collect();
    let matched = lines.iter().filter(|l| l["matches"].as_array().is_some_and(|m| !m.is_empty())).count();
    jsonl::write(&dir.join(MATCHES), &lines)?;
    manifest.finish(dir, &[MATCHES])?;
    println!("{matched}/{} snippets matched", snippets.len());
    Ok(())
}

fn eval_prf(dir: &Path, predictions: &Option<PathBuf>, labels: &Option<PathBuf>) -> CmdResult {
    let predictions_path = input(predictions, dir, &format!("{TRIAGE_DIR}/{}", triage::PREDICTIONS_FILE))?;
    let labels_path = input(labels, dir, LABELS)?;
    let config = json!({ "predictions": digest_of(&predictions_path), "labels": digest_of(&labels_path) });
    let manifest = RunManifest::start("eval-prf", &config);
    let decisions = triage::load_decisions(&predictions_path)?;
    let labels: Vec<SnippetLabel> = read(&labels_path)?;
    let counts = eval::confusion(decisions.iter().map(|(id, d)| (id.as_str(), *d)), &labels)?;
    let report = MetricsReport::new(counts, manifest.config_digest.clone());
    ensure_dir(dir)?;
    jsonl::write_json(&dir.join(METRICS), &report)?;
    manifest.finish(dir, &[METRICS])?;
    print!("{}", report.table());
    Ok(())
}

fn eval_coverage(
    dir: &Path,
    file: &FileConfig,
    generated: &Option<PathBuf>,
    reference: &Option<PathBuf>,
    snippets: &Option<PathBuf>,
) -> CmdResult {
    let generated_path = input(generated, dir, GENERATED_RULES)?;
    let reference_path = existing(
        &reference
            .clone()
            .or_else(|| file.reference_rules.clone())
            .ok_or_else(|| Failure::Usage("--reference is required".into()))?,
    )?;
    let snippets_path = input(snippets, dir, SNIPPETS)?;
    let manifest = RunManifest::start(
        "eval-coverage",
        &json!({
            "generated": digest_of(&generated_path),
            "reference": digest_of(&reference_path),
            "snippets": digest_of(&snippets_path),
        }),
    );
    let report = eval::coverage(
        &RuleSet::load_path(&generated_path)?,
        &RuleSet::load_path(&reference_path)?,
        &read::<Snippet>(&snippets_path)?,
    )?;
    jsonl::write_json(&dir.join(COVERAGE), &report)?;
    manifest.finish(dir, &[COVERAGE])?;
    println!(
        "coverage {:.4} ({}/{} reference-matched snippets)",
        report.coverage, report.also_matched_by_generated, report.reference_matched
    );
    Ok(())
}

fn export_errors(
    dir: &Path,
    transcripts: &Option<PathBuf>,
    labels: &Option<PathBuf>,
    snippets: &Option<PathBuf>,
    sample_size: usize,
    seed: u64,
    out: &Option<PathBuf>,
) -> CmdResult {
    if sample_size == 0 {
        return Err(Failure::Usage("--sample-size must be at least 1".into()));
    }
    let transcripts_path = input(transcripts, dir, &format!("{TRIAGE_DIR}/{}", triage::TRANSCRIPTS_FILE))?;
    let labels_path = input(labels, dir, LABELS)?;
    let snippets_path = input(snippets, dir, SNIPPETS)?;
    let out = out.clone().unwrap_or_else(|| dir.join(ERRORS_DIR));
    let manifest = RunManifest::start(
        "export-errors",
        &json!({
            "transcripts": digest_of(&transcripts_path),
            "labels": digest_of(&labels_path),
            "snippets": digest_of(&snippets_path),
            "sample_size": sample_size,
            "seed": seed,
        }),
    );
    let predictions: Vec<Prediction> = read(&transcripts_path)?;
    ensure_dir(&out)?;
    let export = eval::export_errors(
        &predictions,
        &read::<SnippetLabel>(&labels_path)?,
        &read::<Snippet>(&snippets_path)?,
        sample_size,
        seed,
        &out,
    )?;
    manifest.finish(
        &out,
        &[eval::ErrorKind::Fp.file_name(), eval::ErrorKind::Fn.file_name()],
    )?;
    for h in [&export.fp, &export.fn_] {
        println!(
            "{}: {} of {} sampled{}",
            h.error_type.file_name(),
            h.sampled,
            h.available,
            h.note.as_deref().map(|n| format!(" ({n})")).unwrap_or_default()
        );
    }
    Ok(())
}

fn serve(dir: &Path, file: &FileConfig, args: &ServeArgs) -> CmdResult {
    let kw_dir = input(&args.keywords, dir, KEYWORDS_DIR)?;
    let reference_path = existing(
        &args
            .reference
            .clone()
            .or_else(|| file.reference_rules.clone())
            .ok_or_else(|| Failure::Usage("--reference is required".into()))?,
    )?;
    let snippets_path = input(&args.snippets, dir, SNIPPETS)?;
    let addr_text = args
        .addr
        .clone()
        .or_else(|| env("RULESMITH_ADDR"))
        .or_else(|| file.addr.clone())
        .unwrap_or_else(|| DEFAULT_ADDR.to_string());
    let addr = addr_text
        .parse()
        .map_err(|e| Failure::Usage(format!("bad listen address {addr_text}: {e}")))?;
    let static_dir = match args.static_dir.clone().or_else(|| file.static_dir.clone()) {
        Some(d) => Some(existing(&d)?),
        None => None,
    };
    let session = rulesmith_review::Session::open(
        &kw_dir,
        &keywords::load_validated(&kw_dir)?,
        &concept(&args.concept, file),
        &RuleSet::load_path(&reference_path)?,
        read(&snippets_path)?,
    )?;
    println!("serving on http://{addr}/ (API under {})", rulesmith_review::API_PREFIX);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(rulesmith_review::serve(session, addr, static_dir))?;
    Ok(())
}
