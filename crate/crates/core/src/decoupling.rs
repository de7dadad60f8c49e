//! Splitting a referring expression into a target count and one short
//! phrase per target.
//!
//! A vision-language service is prompted with four fixed parts (task
//! explanation, output constraints, a worked example, the query) and must
//! answer in the grammar
//!
//! ```text
//! K
//! 1. <phrase>
//! ...
//! K. <phrase>
//! ```
//!
//! `K = 0` means no target; the grounding stage is then skipped.

use std::fmt;
use std::time::Duration;

use base64::Engine;
use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

pub const PROMPT_GENERAL: &str = "Task Explanation: You need to process an image and a referring expression. The image may contain zero, one, or multiple target objects corresponding to the referring expression. Analyze the image to determine whether the target exists. If the target does not exist or the referring expression is empty, output a single number \"0\". If the target exists, output the number of targets and generate a unique referring expression for each target. The referring expressions must describe distinct targets unambiguously using attributes like color, position, size, etc.";

pub const PROMPT_CONSTRAINTS: &str = "You should provide a number indicating how many targets exist in the image, and then describe each target with a short, distinct phrase. Prefix each phrase with its ordinal number. The number of targets is extremely important \u{2014} please check carefully. The phrases must be accurate and distinct.";

pub const PROMPT_EXAMPLES: &str = "For example, if the referring expression is \"3 people\", you should output: \n\"3\\n1. person ...\\n2. person ...\\n3. person ...\"\nThe word \"and\" is generally used between two target items.";

const QUERY_PREFIX: &str = "The referring expression is: ";

pub const DEFAULT_RETRIES: usize = 2;
pub const DEFAULT_TIMEOUT_S: u64 = 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptParts {
    pub general: String,
    pub constraints: String,
    /// `None` only for the without-examples ablation.
    pub examples: Option<String>,
    pub query: String,
    /// Base64-encoded image bytes.
    pub image_ref: Option<String>,
}

impl PromptParts {
    /// Constraints, examples and query joined by newlines.
    pub fn user_message(&self) -> String {
        let mut parts = vec![self.constraints.as_str()];
        if let Some(e) = &self.examples {
            parts.push(e);
        }
        parts.push(&self.query);
        parts.join("\n")
    }

    pub fn with_image(mut self, bytes: &[u8]) -> Self {
        self.image_ref = Some(base64::engine::general_purpose::STANDARD.encode(bytes));
        self
    }

    pub fn request(&self) -> ServiceRequest {
        ServiceRequest {
            system: self.general.clone(),
            user: self.user_message(),
            image_b64: self.image_ref.clone(),
        }
    }
}

pub fn build_prompt(expression: &str, include_examples: bool) -> PromptParts {
    PromptParts {
        general: PROMPT_GENERAL.to_string(),
        constraints: PROMPT_CONSTRAINTS.to_string(),
        examples: include_examples.then(|| PROMPT_EXAMPLES.to_string()),
        query: format!("{QUERY_PREFIX}{expression}"),
        image_ref: None,
    }
}

/// Parsed decoupling output. `count == phrases.len()` always holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoupleResult {
    count: usize,
    phrases: Vec<String>,
    raw: String,
}

impl DecoupleResult {
    pub fn new(phrases: Vec<String>, raw: impl Into<String>) -> Self {
        Self {
            count: phrases.len(),
            phrases,
            raw: raw.into(),
        }
    }

    pub fn no_target(raw: impl Into<String>) -> Self {
        Self::new(Vec::new(), raw)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn is_no_target(&self) -> bool {
        self.count == 0
    }

    /// `"K\n1. p1\n2. p2..."`, the canonical response form.
    pub fn render(&self) -> String {
        let mut out = self.count.to_string();
        for (i, p) in self.phrases.iter().enumerate() {
            out.push_str(&format!("\n{}. {}", i + 1, p));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct ParseError {
    /// 1-based; 0 when the problem is not tied to a line.
    pub line: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    Empty,
    MalformedCount(String),
    MalformedLine(String),
    OrdinalGap { expected: usize, found: usize },
    OrdinalDuplicate { expected: usize, found: usize },
    CountMismatch { declared: usize, found: usize },
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseErrorKind::Empty => write!(f, "empty response"),
            ParseErrorKind::MalformedCount(s) => write!(f, "expected a target count, got {s:?}"),
            ParseErrorKind::MalformedLine(s) => write!(f, "expected `<n>. <phrase>`, got {s:?}"),
            ParseErrorKind::OrdinalGap { expected, found } => {
                write!(f, "ordinal gap: expected {expected}, found {found}")
            }
            ParseErrorKind::OrdinalDuplicate { expected, found } => {
                write!(f, "repeated ordinal: expected {expected}, found {found}")
            }
            ParseErrorKind::CountMismatch { declared, found } => {
                write!(f, "declared {declared} targets but found {found} phrases")
            }
        }
    }
}

fn parse_error(line: usize, kind: ParseErrorKind) -> ParseError {
    ParseError { line, kind }
}

fn is_decimal(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

/// Parses a response in the count-then-numbered-phrases grammar.
///
/// Blank lines are ignored. Ordinals must run `1..=K` in order and may be
/// followed by `.` with or without a space.
pub fn parse_response(raw: &str) -> Result<DecoupleResult, ParseError> {
    let mut lines = raw
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let (count_line, count_text) = lines.next().ok_or_else(|| parse_error(0, ParseErrorKind::Empty))?;
    if !is_decimal(count_text) {
        return Err(parse_error(count_line, ParseErrorKind::MalformedCount(count_text.into())));
    }
    let declared: usize = count_text
        .parse()
        .map_err(|_| parse_error(count_line, ParseErrorKind::MalformedCount(count_text.into())))?;

    let mut phrases = Vec::new();
    let mut last_line = count_line;
    for (line_no, text) in lines {
        last_line = line_no;
        let expected = phrases.len() + 1;
        let Some((ordinal, rest)) = text.split_once('.') else {
            return Err(parse_error(line_no, ParseErrorKind::MalformedLine(text.into())));
        };
        let ordinal = ordinal.trim_end();
        if !is_decimal(ordinal) {
            return Err(parse_error(line_no, ParseErrorKind::MalformedLine(text.into())));
        }
        let found: usize = ordinal
            .parse()
            .map_err(|_| parse_error(line_no, ParseErrorKind::MalformedLine(text.into())))?;
        if expected > declared {
            return Err(parse_error(
                line_no,
                ParseErrorKind::CountMismatch {
                    declared,
                    found: expected,
                },
            ));
        }
        if found < expected {
            return Err(parse_error(line_no, ParseErrorKind::OrdinalDuplicate { expected, found }));
        }
        if found > expected {
            return Err(parse_error(line_no, ParseErrorKind::OrdinalGap { expected, found }));
        }
        let phrase = rest.trim();
        if phrase.is_empty() {
            return Err(parse_error(line_no, ParseErrorKind::MalformedLine(text.into())));
        }
        phrases.push(phrase.to_string());
    }
    if phrases.len() != declared {
        return Err(parse_error(
            last_line,
            ParseErrorKind::CountMismatch {
                declared,
                found: phrases.len(),
            },
        ));
    }
    Ok(DecoupleResult::new(phrases, raw))
}

/// JSON body sent to the service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceRequest {
    pub system: String,
    pub user: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_b64: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceResponse {
    pub text: String,
}

/// Anything that can turn a prompt into raw response text.
pub trait ResponseSource {
    fn complete(&self, prompt: &PromptParts) -> Result<String>;
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retries: usize,
    pub include_examples: bool,
}

impl ServiceConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: None,
            timeout: Duration::from_secs(DEFAULT_TIMEOUT_S),
            retries: DEFAULT_RETRIES,
            include_examples: true,
        }
    }

    /// Reads `VLM_ENDPOINT` and `VLM_API_KEY`.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var("VLM_ENDPOINT")
            .map_err(|_| Error::domain("VLM_ENDPOINT is not set; pass --offline to use the rule-based decomposer"))?;
        let mut cfg = Self::new(endpoint);
        cfg.api_key = std::env::var("VLM_API_KEY").ok().filter(|k| !k.is_empty());
        Ok(cfg)
    }
}

/// Blocking HTTP client speaking the `{system, user, image_b64} -> {text}`
/// JSON contract.
#[derive(Debug, Clone)]
pub struct HttpService {
    config: ServiceConfig,
    agent: ureq::Agent,
}

impl HttpService {
    pub fn new(config: ServiceConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        Self { config, agent }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }
}

impl ResponseSource for HttpService {
    fn complete(&self, prompt: &PromptParts) -> Result<String> {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.config.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = req.send_json(prompt.request()).map_err(|e| match e {
            ureq::Error::Status(code, resp) => {
                let body = resp.into_string().ok();
                Error::Transport {
                    reason: format!("HTTP status {code}"),
                    raw: body,
                }
            }
            other => Error::Transport {
                reason: other.to_string(),
                raw: None,
            },
        })?;
        let body = resp.into_string().map_err(|e| Error::Transport {
            reason: format!("reading response body: {e}"),
            raw: None,
        })?;
        let parsed: ServiceResponse = serde_json::from_str(&body).map_err(|e| Error::Transport {
            reason: format!("response is not {{\"text\": ...}} JSON: {e}"),
            raw: Some(body.clone()),
        })?;
        Ok(parsed.text)
    }
}

/// Prompts `source`, parsing the reply and retrying up to `retries` extra
/// times on malformed output.
pub fn decouple_with<S: ResponseSource + ?Sized>(
    source: &S,
    expression: &str,
    image: Option<&[u8]>,
    include_examples: bool,
    retries: usize,
) -> Result<DecoupleResult> {
    let mut prompt = build_prompt(expression, include_examples);
    if let Some(bytes) = image {
        prompt = prompt.with_image(bytes);
    }
    let attempts = retries + 1;
    let mut last = None;
    for attempt in 1..=attempts {
        let raw = source.complete(&prompt)?;
        match parse_response(&raw) {
            Ok(result) => return Ok(result),
            Err(err) => {
                warn!("decoupling attempt {attempt}/{attempts} unparseable: {err}");
                last = Some((err, raw));
            }
        }
    }
    let (last, raw) = last.expect("at least one attempt");
    Err(Error::RetriesExhausted { attempts, last, raw })
}

pub fn decouple_via_service(expression: &str, image: Option<&[u8]>, config: &ServiceConfig) -> Result<DecoupleResult> {
    let service = HttpService::new(config.clone());
    decouple_with(&service, expression, image, config.include_examples, config.retries)
}

const COUNT_WORDS: [&str; 9] = ["two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];
const ORDINALS: [&str; 10] = [
    "first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth", "tenth",
];

fn leading_count(word: &str) -> Option<usize> {
    let lower = word.to_ascii_lowercase();
    if let Some(i) = COUNT_WORDS.iter().position(|w| *w == lower) {
        return Some(i + 2);
    }
    match lower.parse::<usize>() {
        Ok(n) if (2..=ORDINALS.len()).contains(&n) => Some(n),
        _ => None,
    }
}

fn expand_counted(part: &str) -> Vec<String> {
    let tokens: Vec<&str> = part.split_whitespace().collect();
    if tokens.len() >= 2 {
        if let Some(k) = leading_count(tokens[0]) {
            let head = tokens[tokens.len() - 1];
            if head.len() > 1 && head.ends_with('s') {
                let rest = tokens[1..].join(" ");
                return ORDINALS[..k].iter().map(|o| format!("{o} {rest}")).collect();
            }
        }
    }
    vec![part.to_string()]
}

/// Offline decomposition by surface rules: split on `" and "`, and expand a
/// leading count word over a plural head into that many ordinal phrases.
///
/// It has no access to the image, so it never answers "no target".
pub fn rule_based_decompose(expression: &str) -> DecoupleResult {
    let trimmed = expression.trim();
    let parts: Vec<&str> = trimmed.split(" and ").map(str::trim).filter(|p| !p.is_empty()).collect();
    let phrases: Vec<String> = if parts.is_empty() {
        vec![trimmed.to_string()]
    } else {
        parts.into_iter().flat_map(expand_counted).collect()
    };
    let mut result = DecoupleResult::new(phrases, String::new());
    result.raw = result.render();
    debug!("rule-based decomposition of {expression:?}: {:?}", result.phrases);
    result
}
