//! Corpus ingestion, filtering, and assembly of segmented training sequences.
//!
//! The on-disk format is UTF-8 JSON-lines, one record per line with keys
//! `id`, `question`, `solutions`, `tests`, `difficulty`, plus `provenance`
//! and optional `context` keys on pipeline outputs.

mod synthetic;
mod template;

pub use synthetic::synthetic_tasks;
pub use template::PromptTemplate;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contextgen::BridgingContext;
use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

/// One coding task: question, candidate solutions (first is the ground
/// truth), executable test strings, and a difficulty level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    pub question: String,
    pub solutions: Vec<String>,
    pub tests: Vec<String>,
    pub difficulty: Difficulty,
}

impl TaskRecord {
    /// Ground-truth solution (the first one).
    pub fn primary_solution(&self) -> &str {
        &self.solutions[0]
    }

    fn well_formed(&self) -> bool {
        !self.id.is_empty() && !self.solutions.is_empty() && !self.tests.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Primary,
    Alternate { parent: String },
}

/// A task plus its pipeline metadata as stored in the corpus file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusRecord {
    #[serde(flatten)]
    pub task: TaskRecord,
    #[serde(default = "default_provenance")]
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<BridgingContext>,
    /// Reason a record was flagged by context generation/validation, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

fn default_provenance() -> Provenance {
    Provenance::Primary
}

impl CorpusRecord {
    pub fn primary(task: TaskRecord) -> Self {
        CorpusRecord {
            task,
            provenance: Provenance::Primary,
            context: None,
            flag: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub records: Vec<CorpusRecord>,
}

impl Dataset {
    pub fn new(records: Vec<CorpusRecord>) -> Self {
        Dataset { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn provenance_map(&self) -> BTreeMap<&str, &Provenance> {
        self.records
            .iter()
            .map(|r| (r.task.id.as_str(), &r.provenance))
            .collect()
    }

    /// Checks id uniqueness and that every alternate references an id that
    /// is present as a primary record.
    pub fn validate(&self) -> Result<()> {
        let mut primaries = std::collections::BTreeSet::new();
        let mut ids = std::collections::BTreeSet::new();
        for rec in &self.records {
            if !ids.insert(rec.task.id.as_str()) {
                return Err(Error::invalid(format!(
                    "duplicate record id: {}",
                    rec.task.id
                )));
            }
            if rec.provenance == Provenance::Primary {
                primaries.insert(rec.task.id.as_str());
            }
        }
        for rec in &self.records {
            if let Provenance::Alternate { parent } = &rec.provenance {
                if !primaries.contains(parent.as_str()) {
                    return Err(Error::invalid(format!(
                        "alternate {} references missing primary {parent}",
                        rec.task.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Result of [`load_corpus`]: the parseable records plus how many lines were
/// skipped as malformed.
pub struct LoadOutcome {
    pub dataset: Dataset,
    pub skipped: usize,
}

/// Loads a JSON-lines corpus, skipping (and counting) malformed lines.
/// Large scraped corpora always contain dirt, so a bad line is a warning,
/// not an abort.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<LoadOutcome> {
    let file = std::fs::File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CorpusRecord>(&line) {
            Ok(rec) if rec.task.well_formed() => records.push(rec),
            Ok(rec) => {
                skipped += 1;
                log::warn!(
                    "{}:{}: skipping record {:?}: empty solutions/tests/id",
                    path.as_ref().display(),
                    lineno + 1,
                    rec.task.id
                );
            }
            Err(err) => {
                skipped += 1;
                log::warn!(
                    "{}:{}: skipping malformed line: {err}",
                    path.as_ref().display(),
                    lineno + 1
                );
            }
        }
    }
    Ok(LoadOutcome {
        dataset: Dataset::new(records),
        skipped,
    })
}

/// Writes a dataset as JSON-lines. Output is byte-deterministic for a given
/// dataset (struct key order, no timestamps).
pub fn save_corpus(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    if let Some(parent) = path.as_ref().parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    for rec in &ds.records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Token budget of a record: question + first solution + all tests.
///
/// Only the first (primary) solution counts; it is the one paired with the
/// record downstream.
pub fn record_token_budget(rec: &TaskRecord, tokenizer: &dyn Tokenizer) -> usize {
    tokenizer.count(&rec.question)
        + tokenizer.count(rec.primary_solution())
        + rec
            .tests
            .iter()
            .map(|t| tokenizer.count(t))
            .sum::<usize>()
}

/// Retains exactly the records whose token budget is strictly below `limit`.
pub fn token_budget_filter(ds: &Dataset, tokenizer: &dyn Tokenizer, limit: usize) -> Dataset {
    Dataset::new(
        ds.records
            .iter()
            .filter(|r| record_token_budget(&r.task, tokenizer) < limit)
            .cloned()
            .collect(),
    )
}

pub struct SampleOutcome {
    pub dataset: Dataset,
    pub added: usize,
    /// How many requested alternates could not be produced for lack of
    /// eligible records.
    pub shortfall: usize,
}

/// Derives a stable per-record seed so alternate selection does not depend
/// on traversal or worker order.
fn record_seed(seed: u64, id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(id.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Appends up to `n` alternate records, each pairing a question with one
/// uniformly sampled non-primary solution. Records are eligible when they
/// are primaries carrying at least one solution that differs (as a string)
/// from the ground truth. Same seed, same output; eligibility is sampled
/// uniformly over records irrespective of difficulty.
pub fn sample_alternates(ds: &Dataset, n: usize, seed: u64) -> SampleOutcome {
    let mut eligible: Vec<usize> = ds
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| {
            r.provenance == Provenance::Primary
                && r.task
                    .solutions
                    .iter()
                    .skip(1)
                    .any(|s| s != r.task.primary_solution())
        })
        .map(|(i, _)| i)
        .collect();
    eligible.sort_by(|&a, &b| ds.records[a].task.id.cmp(&ds.records[b].task.id));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    let take = n.min(eligible.len());
    let shortfall = n - take;
    if shortfall > 0 {
        log::warn!(
            "requested {n} alternates but only {} eligible records",
            eligible.len()
        );
    }

    let mut chosen: Vec<usize> = eligible[..take].to_vec();
    chosen.sort_unstable();

    let mut records = ds.records.clone();
    let mut added = 0usize;
    for idx in chosen {
        let parent = &ds.records[idx];
        let candidates: Vec<&String> = parent
            .task
            .solutions
            .iter()
            .skip(1)
            .filter(|s| *s != parent.task.primary_solution())
            .collect();
        let mut rec_rng = ChaCha8Rng::seed_from_u64(record_seed(seed, &parent.task.id));
        let solution = candidates[rec_rng.gen_range(0..candidates.len())].clone();
        records.push(CorpusRecord {
            task: TaskRecord {
                id: format!("{}::alt", parent.task.id),
                question: parent.task.question.clone(),
                solutions: vec![solution],
                tests: parent.task.tests.clone(),
                difficulty: parent.task.difficulty,
            },
            provenance: Provenance::Alternate {
                parent: parent.task.id.clone(),
            },
            context: None,
            flag: None,
        });
        added += 1;
    }
    SampleOutcome {
        dataset: Dataset::new(records),
        added,
        shortfall,
    }
}

/// Segment labels of a training sequence, in their required order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Question,
    Context,
    Code,
    Tests,
}

impl Segment {
    /// Loss stays active for the reasoning context, code, and tests; the
    /// question is attended to but never scored.
    pub fn in_loss(self) -> bool {
        !matches!(self, Segment::Question)
    }
}

/// Token ids with per-position segment labels and the loss mask derived
/// from them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentedSequence {
    pub tokens: Vec<u32>,
    pub segments: Vec<Segment>,
    pub loss_mask: Vec<bool>,
}

impl SegmentedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Contiguous index range covered by `segment` (empty range when the
    /// segment has no tokens).
    pub fn segment_range(&self, segment: Segment) -> std::ops::Range<usize> {
        let start = self
            .segments
            .iter()
            .position(|&s| s == segment)
            .unwrap_or(self.segments.len());
        let len = self.segments[start..]
            .iter()
            .take_while(|&&s| s == segment)
            .count();
        start..start + len
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.segments.len() || self.tokens.len() != self.loss_mask.len() {
            return Err(Error::invalid("segmented sequence length mismatch"));
        }
        for (seg, &m) in self.segments.iter().zip(&self.loss_mask) {
            if seg.in_loss() != m {
                return Err(Error::invalid("loss mask disagrees with segment labels"));
            }
        }
        let order = [
            Segment::Question,
            Segment::Context,
            Segment::Code,
            Segment::Tests,
        ];
        let mut cursor = 0usize;
        for &seg in &self.segments {
            let pos = order.iter().position(|&s| s == seg).unwrap();
            if pos < cursor {
                return Err(Error::invalid("segments out of order"));
            }
            cursor = pos;
        }
        Ok(())
    }
}

/// Renders a record and its bridging context through the template, then
/// tokenizes into the `[question][context][code][tests]` layout with the
/// loss mask dictated by the segment labels.
pub fn build_training_example(
    rec: &TaskRecord,
    ctx: &BridgingContext,
    tokenizer: &dyn Tokenizer,
    template: &PromptTemplate,
    max_len: usize,
) -> Result<SegmentedSequence> {
    let parts = [
        (Segment::Question, template.render_question(&rec.question)),
        (Segment::Context, template.render_context(ctx)),
        (Segment::Code, template.render_code(rec.primary_solution())),
        (Segment::Tests, template.render_tests(&rec.tests)),
    ];
    let mut tokens = Vec::new();
    let mut segments = Vec::new();
    for (seg, text) in &parts {
        let ids = tokenizer.encode(text);
        segments.extend(std::iter::repeat(*seg).take(ids.len()));
        tokens.extend(ids);
    }
    if let Some(eos) = tokenizer.eos_id() {
        tokens.push(eos);
        segments.push(Segment::Tests);
    }
    if tokens.len() > max_len {
        return Err(Error::ContextOverflow(format!(
            "record {}: {} tokens exceeds window {max_len}",
            rec.id,
            tokens.len()
        )));
    }
    let loss_mask = segments.iter().map(|s| s.in_loss()).collect();
    let seq = SegmentedSequence {
        tokens,
        segments,
        loss_mask,
    };
    seq.validate()?;
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::ByteTokenizer;

    fn record(id: &str, question: &str, solutions: &[&str], tests: &[&str]) -> CorpusRecord {
        CorpusRecord::primary(TaskRecord {
            id: id.into(),
            question: question.into(),
            solutions: solutions.iter().map(|s| s.to_string()).collect(),
            tests: tests.iter().map(|s| s.to_string()).collect(),
            difficulty: Difficulty::Easy,
        })
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        f
    }

    const VALID_LINE: &str = r#"{"id":"t1","question":"add","solutions":["def f(a,b):\n    return a+b"],"tests":["assert f(1,2)==3"],"difficulty":"easy"}"#;

    #[test]
    fn load_three_valid_lines() {
        let l2 = VALID_LINE.replace("t1", "t2");
        let l3 = VALID_LINE.replace("t1", "t3");
        let f = write_lines(&[VALID_LINE, &l2, &l3]);
        let out = load_corpus(f.path()).unwrap();
        assert_eq!(out.dataset.len(), 3);
        assert_eq!(out.skipped, 0);
    }

    #[test]
    fn load_empty_file() {
        let f = write_lines(&[]);
        let out = load_corpus(f.path()).unwrap();
        assert_eq!(out.dataset.len(), 0);
        assert_eq!(out.skipped, 0);
    }

    #[test]
    fn load_skips_malformed_line() {
        let l2 = VALID_LINE.replace("t1", "t2");
        let f = write_lines(&[VALID_LINE, "{not json", &l2]);
        let out = load_corpus(f.path()).unwrap();
        assert_eq!(out.dataset.len(), 2);
        assert_eq!(out.skipped, 1);
    }

    #[test]
    fn load_missing_file_is_fatal() {
        assert!(matches!(
            load_corpus("/nonexistent/corpus.jsonl"),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn budget_filter_strict_inequality() {
        // ByteTokenizer: one byte, one token. 1000 + 500 + 499 = 1999.
        let kept = record(
            "a",
            &"q".repeat(1000),
            &[&"s".repeat(500)],
            &[&"t".repeat(499)],
        );
        // 1000 + 500 + 500 = 2000 → dropped ("less than" is strict).
        let dropped = record(
            "b",
            &"q".repeat(1000),
            &[&"s".repeat(500)],
            &[&"t".repeat(500)],
        );
        let ds = Dataset::new(vec![kept, dropped]);
        let out = token_budget_filter(&ds, &ByteTokenizer, 2000);
        assert_eq!(out.len(), 1);
        assert_eq!(out.records[0].task.id, "a");
    }

    #[test]
    fn budget_filter_empty_dataset() {
        let out = token_budget_filter(&Dataset::default(), &ByteTokenizer, 2000);
        assert!(out.is_empty());
    }

    #[test]
    fn budget_filter_idempotent_and_matches_recount() {
        let ds = Dataset::new(synthetic_tasks(40, 11));
        let limit = 120;
        let once = token_budget_filter(&ds, &ByteTokenizer, limit);
        let twice = token_budget_filter(&once, &ByteTokenizer, limit);
        assert_eq!(once.len(), twice.len());
        for rec in &once.records {
            assert!(record_token_budget(&rec.task, &ByteTokenizer) < limit);
        }
        let kept_ids: std::collections::BTreeSet<_> =
            once.records.iter().map(|r| r.task.id.clone()).collect();
        for rec in &ds.records {
            if !kept_ids.contains(&rec.task.id) {
                assert!(record_token_budget(&rec.task, &ByteTokenizer) >= limit);
            }
        }
    }

    #[test]
    fn alternates_deterministic() {
        let mut recs = Vec::new();
        for i in 0..5 {
            recs.push(record(
                &format!("r{i}"),
                "q",
                &["def f():\n    return 1", "def f():\n    return 2 - 1"],
                &["assert f() == 1"],
            ));
        }
        let ds = Dataset::new(recs);
        let a = sample_alternates(&ds, 2, 7);
        let b = sample_alternates(&ds, 2, 7);
        assert_eq!(a.added, 2);
        assert_eq!(a.shortfall, 0);
        let ids_a: Vec<_> = a.dataset.records.iter().map(|r| r.task.id.clone()).collect();
        let ids_b: Vec<_> = b.dataset.records.iter().map(|r| r.task.id.clone()).collect();
        assert_eq!(ids_a, ids_b);
        let sols_a: Vec<_> = a
            .dataset
            .records
            .iter()
            .map(|r| r.task.solutions[0].clone())
            .collect();
        let sols_b: Vec<_> = b
            .dataset
            .records
            .iter()
            .map(|r| r.task.solutions[0].clone())
            .collect();
        assert_eq!(sols_a, sols_b);
        a.dataset.validate().unwrap();
    }

    #[test]
    fn alternates_clamp_with_shortfall() {
        let eligible = record("r0", "q", &["def f():\n    return 1", "def g():\n    return 1"], &["t"]);
        let ineligible = record("r1", "q", &["single"], &["t"]);
        let ds = Dataset::new(vec![eligible, ineligible]);
        let out = sample_alternates(&ds, 3000, 1);
        assert_eq!(out.added, 1);
        assert_eq!(out.shortfall, 2999);
        assert_eq!(out.dataset.len(), 3);
    }

    #[test]
    fn alternates_never_duplicate_primary() {
        let dup_only = record("d", "q", &["same", "same"], &["t"]);
        let mixed = record("m", "q", &["one", "one", "two"], &["t"]);
        let ds = Dataset::new(vec![dup_only, mixed]);
        let out = sample_alternates(&ds, 10, 3);
        // "d" has no distinct alternate and must not be sampled at all.
        assert_eq!(out.added, 1);
        let alt = out
            .dataset
            .records
            .iter()
            .find(|r| matches!(r.provenance, Provenance::Alternate { .. }))
            .unwrap();
        assert_eq!(alt.task.solutions[0], "two");
        assert_eq!(
            alt.provenance,
            Provenance::Alternate {
                parent: "m".into()
            }
        );
    }

    #[test]
    fn paper_scale_counts() {
        // 15360 primaries below the budget, 3000 alternates on top: 18360.
        let mut recs = Vec::with_capacity(15360);
        for i in 0..15360 {
            let solutions: Vec<String> = if i % 5 == 0 {
                vec!["def f():\n    return 1".into(), "def f():\n    return 2 - 1".into()]
            } else {
                vec!["def f():\n    return 1".into()]
            };
            recs.push(CorpusRecord::primary(TaskRecord {
                id: format!("t{i:05}"),
                question: "tiny".into(),
                solutions,
                tests: vec!["assert f() == 1".into()],
                difficulty: Difficulty::Medium,
            }));
        }
        let ds = Dataset::new(recs);
        let filtered = token_budget_filter(&ds, &ByteTokenizer, 2000);
        assert_eq!(filtered.len(), 15360);
        let out = sample_alternates(&filtered, 3000, 42);
        assert_eq!(out.added, 3000);
        assert_eq!(out.dataset.len(), 18360);
        out.dataset.validate().unwrap();
    }

    #[test]
    fn training_example_mask_rule() {
        let rec = record("r", "sum two ints", &["def f(a,b):\n    return a+b"], &["assert f(1,2)==3"]);
        let ctx = BridgingContext {
            intent: "add".into(),
            steps: vec!["take inputs".into(), "return their sum".into()],
            formulas: vec![],
            edge_cases: vec!["zero".into()],
            raw: String::new(),
        };
        let seq =
            build_training_example(&rec.task, &ctx, &ByteTokenizer, &PromptTemplate::default(), 4096)
                .unwrap();
        seq.validate().unwrap();
        for (seg, &m) in seq.segments.iter().zip(&seq.loss_mask) {
            assert_eq!(m, *seg != Segment::Question);
        }
        assert!(!seq.segment_range(Segment::Question).is_empty());
        assert!(!seq.segment_range(Segment::Context).is_empty());
        assert!(!seq.segment_range(Segment::Code).is_empty());
        assert!(!seq.segment_range(Segment::Tests).is_empty());
    }

    #[test]
    fn training_example_empty_context_preserves_order() {
        let rec = record("r", "q", &["def f():\n    return 0"], &["assert f()==0"]);
        let seq = build_training_example(
            &rec.task,
            &BridgingContext::empty(),
            &ByteTokenizer,
            &PromptTemplate::default(),
            4096,
        )
        .unwrap();
        seq.validate().unwrap();
        assert!(seq.segment_range(Segment::Context).is_empty());
        let q = seq.segment_range(Segment::Question);
        let c = seq.segment_range(Segment::Code);
        assert!(q.end <= c.start);
    }

    #[test]
    fn training_example_round_trips_template_text() {
        let rec = record("r", "sum", &["def f(a,b):\n    return a+b"], &["assert f(1,2)==3"]);
        let ctx = BridgingContext {
            intent: "add".into(),
            steps: vec!["sum the args".into()],
            formulas: vec!["a+b".into()],
            edge_cases: vec![],
            raw: String::new(),
        };
        let template = PromptTemplate::default();
        let rendered = template.render_full(&rec.task.question, &ctx, rec.task.primary_solution(), &rec.task.tests);
        let seq = build_training_example(&rec.task, &ctx, &ByteTokenizer, &template, 4096).unwrap();
        assert_eq!(ByteTokenizer.decode(&seq.tokens), rendered);
    }

    #[test]
    fn training_example_overflow_rejected() {
        let rec = record("r", &"q".repeat(300), &["s"], &["t"]);
        let err = build_training_example(
            &rec.task,
            &BridgingContext::empty(),
            &ByteTokenizer,
            &PromptTemplate::default(),
            64,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ContextOverflow(_)));
    }
}
