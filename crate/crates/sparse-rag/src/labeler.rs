//! Two-round auto-labeling: a rater scores each (question, document) pair,
//! then a critic reviews the rater's score. The prompt texts are golden
//! files under `templates/`; formatting only substitutes the placeholders.
//!
//! Records are processed strictly in order, one request in flight at a
//! time, so a run against deterministic backends is reproducible
//! byte-for-byte. Failures never abort the run: the record keeps whatever
//! it earned and the failure is reported alongside.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Round-1 rater template, golden copy in `templates/round1_prompt.txt`.
pub const ROUND1_TEMPLATE: &str = include_str!("../templates/round1_prompt.txt");
/// Round-2 critic template, golden copy in `templates/round2_prompt.txt`.
pub const ROUND2_TEMPLATE: &str = include_str!("../templates/round2_prompt.txt");

/// Environment variable naming the live completion endpoint.
pub const ENV_BASE_URL: &str = "LABELER_BASE_URL";
/// Environment variable holding the bearer token for the endpoint.
pub const ENV_AUTH_TOKEN: &str = "LABELER_AUTH_TOKEN";

const MAX_ATTEMPTS: u32 = 3;
const BACKOFF_BASE: Duration = Duration::from_millis(50);

/// One document to label, plus everything the run learned about it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelingRecord {
    pub question: String,
    pub accepted_answers: String,
    pub title: String,
    pub document: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round1_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round2_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round1_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round2_response: Option<String>,
}

impl LabelingRecord {
    pub fn new(question: &str, accepted_answers: &str, title: &str, document: &str) -> Self {
        Self {
            question: question.into(),
            accepted_answers: accepted_answers.into(),
            title: title.into(),
            document: document.into(),
            round1_score: None,
            round2_score: None,
            round1_response: None,
            round2_response: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("question", &self.question),
            ("accepted_answers", &self.accepted_answers),
            ("title", &self.title),
            ("document", &self.document),
        ] {
            if value.is_empty() {
                return Err(Error::Labeler(format!("record missing {name}")));
            }
        }
        for (name, score) in [("round1", self.round1_score), ("round2", self.round2_score)] {
            if let Some(s) = score {
                if s != 0.0 && s != 1.0 {
                    return Err(Error::Labeler(format!("{name} score {s} not in {{0.0, 1.0}}")));
                }
            }
        }
        if self.round2_score.is_some() && self.round1_score.is_none() {
            return Err(Error::Labeler(
                "round2 score present without a round1 score".into(),
            ));
        }
        Ok(())
    }
}

fn fill(template: &str, record: &LabelingRecord) -> String {
    template
        .trim_end_matches('\n')
        .replace("<question>", &record.question)
        .replace("<answers>", &record.accepted_answers)
        .replace("<title>", &record.title)
        .replace("<document>", &record.document)
}

/// Rater prompt for one record. Pure substitution into the golden template.
pub fn format_round1_prompt(record: &LabelingRecord) -> Result<String> {
    record.validate()?;
    Ok(fill(ROUND1_TEMPLATE, record))
}

/// Critic prompt; needs the round-1 score to substitute.
pub fn format_round2_prompt(record: &LabelingRecord) -> Result<String> {
    record.validate()?;
    let score = record
        .round1_score
        .ok_or_else(|| Error::Labeler("round2 prompt needs a round1 score".into()))?;
    Ok(fill(ROUND2_TEMPLATE, record).replace("<score>", &format!("{score:.1}")))
}

/// First standalone "1.0"/"0.0"/"1"/"0" token wins; anything else is
/// unparseable and the caller records the raw response instead.
pub fn parse_score(response: &str) -> Option<f64> {
    for token in response.split_whitespace() {
        match token {
            "1.0" | "1" => return Some(1.0),
            "0.0" | "0" => return Some(0.0),
            _ => {}
        }
    }
    None
}

/// Text-in/text-out completion endpoint. The protocol is the contract; the
/// transport behind it is not.
pub trait RaterBackend {
    fn complete(&self, prompt: &str) -> Result<String>;
    fn name(&self) -> &str;
}

/// Deterministic in-process backend for tests and `--mock` runs.
#[derive(Debug)]
pub struct MockBackend {
    name: String,
    behavior: MockBehavior,
    calls: std::sync::atomic::AtomicU32,
}

#[derive(Debug, Clone)]
pub enum MockBehavior {
    /// Always the same response text.
    Fixed(String),
    /// Repeats the prompt's "previous model's score:" value ("1.0" when the
    /// prompt has none).
    EchoPrevious,
    /// Inverts the prompt's previous score ("0.0" when the prompt has none).
    FlipPrevious,
    /// Errors on the first `failures` calls, then answers with the text.
    FailFirst { failures: u32, then: String },
}

impl MockBackend {
    pub fn new(name: &str, behavior: MockBehavior) -> Self {
        Self {
            name: name.into(),
            behavior,
            calls: std::sync::atomic::AtomicU32::new(0),
        }
    }
}

fn previous_score_in(prompt: &str) -> Option<f64> {
    let tail = prompt.split("previous model's score:").nth(1)?;
    parse_score(tail)
}

impl RaterBackend for MockBackend {
    fn complete(&self, prompt: &str) -> Result<String> {
        let call = self
            .calls
            .fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        match &self.behavior {
            MockBehavior::Fixed(text) => Ok(text.clone()),
            MockBehavior::EchoPrevious => Ok(match previous_score_in(prompt) {
                Some(s) => format!("{s:.1}"),
                None => "1.0".into(),
            }),
            MockBehavior::FlipPrevious => Ok(match previous_score_in(prompt) {
                Some(s) => format!("{:.1}", 1.0 - s),
                None => "0.0".into(),
            }),
            MockBehavior::FailFirst { failures, then } => {
                if call < *failures {
                    Err(Error::Labeler(format!(
                        "{} refused call {call}",
                        self.name
                    )))
                } else {
                    Ok(then.clone())
                }
            }
        }
    }

    fn name(&self) -> &str {
        &self.name
    }
}

/// Live HTTP backend: POSTs `{"prompt": ...}` to the base URL and expects
/// `{"completion": ...}` back, bearer-authenticated when a token is set.
#[cfg(feature = "live-labeler")]
pub struct HttpBackend {
    name: String,
    base_url: String,
    auth_token: Option<String>,
    agent: ureq::Agent,
}

#[cfg(feature = "live-labeler")]
impl HttpBackend {
    pub fn new(name: &str, base_url: &str, auth_token: Option<&str>) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .build();
        Self {
            name: name.into(),
            base_url: base_url.into(),
            auth_token: auth_token.map(str::to_owned),
            agent: config.into(),
        }
    }

    /// Reads `LABELER_BASE_URL` and `LABELER_AUTH_TOKEN`.
    pub fn from_env(name: &str) -> Result<Self> {
        let base = std::env::var(ENV_BASE_URL)
            .map_err(|_| Error::Labeler(format!("{ENV_BASE_URL} is not set")))?;
        let token = std::env::var(ENV_AUTH_TOKEN).ok();
        Ok(Self::new(name, &base, token.as_deref()))
    }
}

#[cfg(feature = "live-labeler")]
impl RaterBackend for HttpBackend {
    fn complete(&self, prompt: &str) -> Result<String> {
        #[derive(Serialize)]
        struct Request<'a> {
            prompt: &'a str,
        }
        #[derive(Deserialize)]
        struct Response {
            completion: String,
        }
        let mut request = self.agent.post(&self.base_url);
        if let Some(token) = &self.auth_token {
            request = request.header("authorization", &format!("Bearer {token}"));
        }
        let body: Response = request
            .send_json(Request { prompt })
            .map_err(|e| Error::Labeler(format!("{}: {e}", self.name)))?
            .body_mut()
            .read_json()
            .map_err(|e| Error::Labeler(format!("{}: bad response body: {e}", self.name)))?;
        Ok(body.completion)
    }

    fn name(&self) -> &str {
        &self.name
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelStage {
    Round1,
    Round2,
}

/// Why one record earned no final label. The run keeps going.
#[derive(Debug, Clone, Serialize)]
pub struct RecordFailure {
    pub index: usize,
    pub stage: LabelStage,
    pub attempts: u32,
    pub reason: String,
}

#[derive(Debug)]
pub struct LabelRunReport {
    /// Input order preserved; scores and raw responses filled as earned.
    pub records: Vec<LabelingRecord>,
    pub failures: Vec<RecordFailure>,
}

impl LabelRunReport {
    /// Final labels of fully labeled records, with their indices.
    pub fn labels(&self) -> Vec<(usize, u8)> {
        self.records
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.round2_score.map(|s| (i, s as u8)))
            .collect()
    }
}

/// Calls the backend up to three times with exponential backoff. Returns
/// the response and the attempts used, or the attempts and last error.
fn call_with_retry(
    backend: &dyn RaterBackend,
    prompt: &str,
) -> std::result::Result<(String, u32), (u32, Error)> {
    let mut last = None;
    for attempt in 1..=MAX_ATTEMPTS {
        match backend.complete(prompt) {
            Ok(response) => return Ok((response, attempt)),
            Err(e) => last = Some(e),
        }
        if attempt < MAX_ATTEMPTS {
            std::thread::sleep(BACKOFF_BASE * 2u32.pow(attempt - 1));
        }
    }
    Err((MAX_ATTEMPTS, last.expect("at least one attempt ran")))
}

/// Labels every record: rater prompt, parse, critic prompt with the rater's
/// score, parse again. The critic's score is the final label. A failure in
/// either round records the reason and moves on; earlier rounds' results
/// stay on the record.
pub fn run_two_round(
    rater: &dyn RaterBackend,
    critic: &dyn RaterBackend,
    records: &[LabelingRecord],
) -> Result<LabelRunReport> {
    let mut out = Vec::with_capacity(records.len());
    let mut failures = Vec::new();
    for (index, record) in records.iter().enumerate() {
        let mut record = record.clone();
        record.round1_score = None;
        record.round2_score = None;
        record.round1_response = None;
        record.round2_response = None;

        let fail = |failures: &mut Vec<RecordFailure>, stage, attempts, reason: String| {
            failures.push(RecordFailure {
                index,
                stage,
                attempts,
                reason,
            });
        };

        let round1 = format_round1_prompt(&record)?;
        match call_with_retry(rater, &round1) {
            Ok((response, attempts)) => {
                record.round1_response = Some(response.clone());
                match parse_score(&response) {
                    Some(score) => record.round1_score = Some(score),
                    None => fail(
                        &mut failures,
                        LabelStage::Round1,
                        attempts,
                        format!("{}: unparseable response {response:?}", rater.name()),
                    ),
                }
            }
            Err((attempts, e)) => fail(&mut failures, LabelStage::Round1, attempts, e.to_string()),
        }

        if record.round1_score.is_some() {
            let round2 = format_round2_prompt(&record)?;
            match call_with_retry(critic, &round2) {
                Ok((response, attempts)) => {
                    record.round2_response = Some(response.clone());
                    match parse_score(&response) {
                        Some(score) => record.round2_score = Some(score),
                        None => fail(
                            &mut failures,
                            LabelStage::Round2,
                            attempts,
                            format!("{}: unparseable response {response:?}", critic.name()),
                        ),
                    }
                }
                Err((attempts, e)) => {
                    fail(&mut failures, LabelStage::Round2, attempts, e.to_string())
                }
            }
        }
        out.push(record);
    }
    Ok(LabelRunReport {
        records: out,
        failures,
    })
}

/// Majority decision over independent binary votes for one document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Majority {
    Zero,
    One,
    /// Exact tie; the caller decides what to do with split votes.
    Unresolved,
}

pub fn aggregate_majority(votes: &[u8]) -> Result<Majority> {
    if votes.is_empty() {
        return Err(Error::Labeler("majority vote over zero votes".into()));
    }
    if votes.iter().any(|&v| v > 1) {
        return Err(Error::Labeler("votes must be 0 or 1".into()));
    }
    let ones = votes.iter().filter(|&&v| v == 1).count();
    let zeros = votes.len() - ones;
    Ok(match ones.cmp(&zeros) {
        std::cmp::Ordering::Greater => Majority::One,
        std::cmp::Ordering::Less => Majority::Zero,
        std::cmp::Ordering::Equal => Majority::Unresolved,
    })
}

/// One JSON record per line.
pub fn write_records(path: &Path, records: &[LabelingRecord]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<LabelingRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LabelingRecord = serde_json::from_str(&line)?;
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}
