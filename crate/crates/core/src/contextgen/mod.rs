//! Bridging-context generation, validation, and quality scoring.
//!
//! A very large model is asked for a structured description of how a task is
//! solved — intent, algorithmic steps, formulas, edge cases — without
//! quoting the ground-truth code. Responses are requested as JSON, parsed
//! strictly, and checked for code leakage before they enter the corpus.

mod client;

pub use client::{ClientConfig, GeneratorClient, HttpClient, StubClient};

use serde::{Deserialize, Serialize};

use crate::corpus::TaskRecord;
use crate::error::{Error, Result};

/// Minimum length (in normalized tokens) of a verbatim run that counts as
/// leaking the solution. Short idioms such as loop headers stay legal.
pub const LEAK_RUN_TOKENS: usize = 10;

/// Structured reasoning generated for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgingContext {
    pub intent: String,
    pub steps: Vec<String>,
    #[serde(default)]
    pub formulas: Vec<String>,
    #[serde(default)]
    pub edge_cases: Vec<String>,
    /// Original response text, kept for audit.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub raw: String,
}

impl BridgingContext {
    pub fn empty() -> Self {
        BridgingContext {
            intent: String::new(),
            steps: Vec::new(),
            formulas: Vec::new(),
            edge_cases: Vec::new(),
            raw: String::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.intent.is_empty()
            && self.steps.is_empty()
            && self.formulas.is_empty()
            && self.edge_cases.is_empty()
    }
}

/// 0–10 ratings for a (context, code) pair from one judge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub context_score: u8,
    pub code_score: u8,
    pub judge_id: String,
}

/// Structured pass/fail outcome of [`validate_context`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationResult {
    pub reasons: Vec<String>,
}

impl ValidationResult {
    pub fn passed(&self) -> bool {
        self.reasons.is_empty()
    }
}

/// Lowercased word/punctuation tokens; whitespace and identifier case do
/// not affect leakage comparison.
fn normalize_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

fn contains_run(haystack: &[String], solution: &[String], run: usize) -> Option<String> {
    if solution.len() < run || haystack.len() < run {
        return None;
    }
    let windows: std::collections::HashSet<&[String]> =
        solution.windows(run).collect();
    haystack
        .windows(run)
        .find(|w| windows.contains(*w))
        .map(|w| w.join(" "))
}

/// Pure validation: schema invariants plus the verbatim-run leakage test
/// between `steps ∪ formulas` and the ground-truth solution.
pub fn validate_context(ctx: &BridgingContext, solution: &str) -> ValidationResult {
    let mut reasons = Vec::new();
    if ctx.intent.trim().is_empty() {
        reasons.push("schema: intent is empty".to_string());
    }
    if ctx.steps.is_empty() {
        reasons.push("schema: steps list is empty".to_string());
    }
    let solution_tokens = normalize_tokens(solution);
    for (kind, texts) in [("step", &ctx.steps), ("formula", &ctx.formulas)] {
        for text in texts {
            if let Some(run) = contains_run(&normalize_tokens(text), &solution_tokens, LEAK_RUN_TOKENS)
            {
                reasons.push(format!(
                    "leakage: {kind} quotes a {LEAK_RUN_TOKENS}-token run of the solution: \"{run}\""
                ));
            }
        }
    }
    ValidationResult { reasons }
}

/// Prompt sent to the generator model. Requests machine-parseable JSON with
/// the four context parts plus notes on builtins/libraries used by the
/// reference code, which get folded into the steps.
pub fn context_prompt(question: &str, solution: &str) -> String {
    format!(
        "You are given a programming question and a correct reference solution.\n\
         Describe how to solve the question WITHOUT revealing or quoting the\n\
         reference code and without direct coding hints.\n\n\
         Question:\n{question}\n\n\
         Reference solution (do NOT quote it):\n```python\n{solution}\n```\n\n\
         Reply with a single JSON object and nothing else, with keys:\n\
         - \"intent\": one sentence stating the main intention of the question\n\
         - \"steps\": an array of short algorithmic steps leading to the solution\n\
         - \"formulas\": an array of relevant mathematical formulas (may be empty)\n\
         - \"edge_cases\": an array of potential edge cases (may be empty)\n\
         - \"library_notes\": an array explaining how Python built-in features or\n\
           libraries used by the reference contribute to a clean solution (may be empty)\n"
    )
}

const REPROMPT_SUFFIX: &str = "\n\nYour previous reply could not be parsed. Reply with ONLY the \
                               JSON object described above; \"intent\" must be a non-empty string \
                               and \"steps\" a non-empty array of strings.";

#[derive(Debug, Deserialize)]
struct ContextResponse {
    intent: String,
    steps: Vec<String>,
    #[serde(default)]
    formulas: Vec<String>,
    #[serde(default)]
    edge_cases: Vec<String>,
    #[serde(default)]
    library_notes: Vec<String>,
}

/// Extracts the first top-level JSON object from a reply that may carry
/// prose around it.
fn extract_json_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escape = false;
    for (i, ch) in text[start..].char_indices() {
        if in_str {
            if escape {
                escape = false;
            } else if ch == '\\' {
                escape = true;
            } else if ch == '"' {
                in_str = false;
            }
            continue;
        }
        match ch {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..=start + i]);
                }
            }
            _ => {}
        }
    }
    None
}

fn parse_context_response(reply: &str) -> Result<BridgingContext> {
    let body = extract_json_object(reply)
        .ok_or_else(|| Error::BadResponse("no JSON object in reply".into()))?;
    let parsed: ContextResponse = serde_json::from_str(body)
        .map_err(|e| Error::BadResponse(format!("context schema: {e}")))?;
    if parsed.intent.trim().is_empty() {
        return Err(Error::BadResponse("context schema: empty intent".into()));
    }
    if parsed.steps.is_empty() {
        return Err(Error::BadResponse("context schema: empty steps".into()));
    }
    let mut steps = parsed.steps;
    steps.extend(parsed.library_notes);
    Ok(BridgingContext {
        intent: parsed.intent,
        steps,
        formulas: parsed.formulas,
        edge_cases: parsed.edge_cases,
        raw: reply.to_string(),
    })
}

/// Asks the client for a structured context for `rec`, reprompting once on
/// an unparseable reply. Transport errors surface as retryable
/// [`Error::Transport`]; a second bad reply surfaces as
/// [`Error::BadResponse`] so the caller can flag and skip the record.
pub fn generate_context(
    client: &dyn GeneratorClient,
    rec: &TaskRecord,
    solution: &str,
) -> Result<BridgingContext> {
    let prompt = context_prompt(&rec.question, solution);
    let reply = client.complete(&prompt)?;
    match parse_context_response(&reply) {
        Ok(ctx) => Ok(ctx),
        Err(_) => {
            let reply = client.complete(&format!("{prompt}{REPROMPT_SUFFIX}"))?;
            parse_context_response(&reply)
        }
    }
}

/// Single-turn rubric prompt for the quality judge.
pub fn judge_prompt(ctx: &BridgingContext, code: &str) -> String {
    format!(
        "Rate the following reasoning context and the candidate code on a scale\n\
         from 0 to 10, where 0 is entirely irrelevant and 10 is completely correct.\n\n\
         Context intent: {}\nContext steps:\n{}\n\nCandidate code:\n```python\n{code}\n```\n\n\
         Reply with exactly two integers separated by a slash, as in: 7 / 9\n\
         (first the context score, then the code score).",
        ctx.intent,
        ctx.steps
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{}. {s}", i + 1))
            .collect::<Vec<_>>()
            .join("\n"),
    )
}

fn parse_judge_reply(reply: &str, judge_id: &str) -> Result<JudgeScore> {
    let mut numbers = Vec::new();
    let mut current = String::new();
    for ch in reply.chars() {
        if ch.is_ascii_digit() {
            current.push(ch);
        } else if !current.is_empty() {
            numbers.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        numbers.push(current);
    }
    if numbers.len() < 2 {
        return Err(Error::BadResponse(format!(
            "judge reply needs two integers, got {reply:?}"
        )));
    }
    let parse = |s: &str| -> Result<u8> {
        let v: u64 = s
            .parse()
            .map_err(|_| Error::BadResponse(format!("non-numeric judge score {s:?}")))?;
        if v > 10 {
            return Err(Error::BadResponse(format!("judge score {v} outside 0–10")));
        }
        Ok(v as u8)
    };
    Ok(JudgeScore {
        context_score: parse(&numbers[0])?,
        code_score: parse(&numbers[1])?,
        judge_id: judge_id.to_string(),
    })
}

/// Asks the judge for 0–10 ratings of the context and the code, reprompting
/// once on an out-of-range or non-numeric reply.
pub fn rate_pair(
    judge: &dyn GeneratorClient,
    ctx: &BridgingContext,
    code: &str,
) -> Result<JudgeScore> {
    let prompt = judge_prompt(ctx, code);
    let reply = judge.complete(&prompt)?;
    match parse_judge_reply(&reply, judge.name()) {
        Ok(score) => Ok(score),
        Err(_) => {
            let reply = judge.complete(&format!(
                "{prompt}\n\nYour previous reply was not two integers in 0–10. \
                 Reply with exactly two integers 0–10 separated by a slash."
            ))?;
            parse_judge_reply(&reply, judge.name())
        }
    }
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::invalid(format!(
            "pearson length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("pearson needs at least two samples"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantVector);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
