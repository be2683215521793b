//! Expert-guided prompt construction, template retrieval, answer parsing and
//! the chat-completions client used to query an external multimodal model.
//!
//! Textual priors are always sent. Visual prompts (the annotated query image
//! or, without pixels, box coordinates) are sent only for abnormal verdicts.

use std::collections::HashSet;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dbt::{ConfidenceVerdict, Decision};
use crate::feature_store::FeatureGrid;
use crate::scoring::BoundingBox;

pub const SYSTEM_INSTRUCTION: &str = "You are my industrial image inspection assistant. You will receive multiple images simultaneously, including a template image, a query image, and a query image with red bounding boxes. Based on the input images and the accompanying textual information, answer the given question. The question is multiple-choice. Respond only with the letter of the correct option (e.g., A, B, C, or D). Do not include explanations or extra text.";

pub const ANOMALOUS_PRIOR: &str = "The query image is predicted as anomalous, The position of the red bounding box on the query image is the predicted defect location.";
pub const NORMAL_PRIOR: &str = "The query image is predicted as normal.";
pub const SHORT_ANOMALOUS_PRIOR: &str = "This image is predicted as abnormal.";
pub const SHORT_NORMAL_PRIOR: &str = "This image is predicted as normal.";
pub const QUESTION: &str =
    "Answer with the option's letter from the given choices directly! Is there any defect in the object? A. Yes. B. No.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextualPrior {
    AnomalousPrior,
    NormalPrior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorStyle {
    /// Full strings with the bounding-box sentence.
    #[default]
    Detailed,
    /// One-sentence "This image is predicted as ..." forms.
    Short,
}

impl TextualPrior {
    pub fn text(self, style: PriorStyle) -> &'static str {
        match (self, style) {
            (TextualPrior::AnomalousPrior, PriorStyle::Detailed) => ANOMALOUS_PRIOR,
            (TextualPrior::NormalPrior, PriorStyle::Detailed) => NORMAL_PRIOR,
            (TextualPrior::AnomalousPrior, PriorStyle::Short) => SHORT_ANOMALOUS_PRIOR,
            (TextualPrior::NormalPrior, PriorStyle::Short) => SHORT_NORMAL_PRIOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptWarning {
    /// Abnormal verdict but no region passed the box threshold.
    NoBoxes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_instruction: String,
    pub textual_prior: TextualPrior,
    pub prior_text: String,
    /// Present exactly when the prior is anomalous.
    pub visual_boxes: Option<Vec<BoundingBox>>,
    pub template_image_id: Option<String>,
    pub question: String,
    pub low_confidence: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<PromptWarning>,
}

impl PromptBundle {
    /// Prior followed by the question, joined by one space.
    pub fn user_text(&self) -> String {
        format!("{} {}", self.prior_text, self.question)
    }
}

pub fn build_prompt(
    verdict: &ConfidenceVerdict,
    boxes: &[BoundingBox],
    template: Option<&str>,
    style: PriorStyle,
) -> PromptBundle {
    let (textual_prior, visual_boxes) = match verdict.decision {
        Decision::Abnormal => (TextualPrior::AnomalousPrior, Some(boxes.to_vec())),
        Decision::Normal => (TextualPrior::NormalPrior, None),
    };
    let mut warnings = Vec::new();
    if visual_boxes.as_ref().is_some_and(Vec::is_empty) {
        warnings.push(PromptWarning::NoBoxes);
    }
    PromptBundle {
        system_instruction: SYSTEM_INSTRUCTION.to_string(),
        textual_prior,
        prior_text: textual_prior.text(style).to_string(),
        visual_boxes,
        template_image_id: template.map(str::to_string),
        question: QUESTION.to_string(),
        low_confidence: verdict.low_confidence,
        warnings,
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Index of the training grid whose mean-pooled feature vector is most
/// cosine-similar to the query's. Ties go to the lowest index.
pub fn retrieve_template(query: &FeatureGrid, train: &[FeatureGrid]) -> Option<usize> {
    retrieve_template_pooled(&query.mean_pooled(), &train.iter().map(FeatureGrid::mean_pooled).collect::<Vec<_>>())
}

pub fn retrieve_template_pooled(query: &[f64], train: &[Vec<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in train.iter().enumerate() {
        let s = cosine(query, t);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsedAnswer {
    DefectYes,
    DefectNo,
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAnswer {
    pub raw_text: String,
    pub parsed: ParsedAnswer,
}

const YES_WORDS: [&str; 5] = ["yes", "abnormal", "defect", "defective", "anomalous"];
const NO_WORDS: [&str; 2] = ["no", "normal"];

fn negation_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"\b(no|not|without|free of|isn't|is not|aren't|are not|does not|doesn't)\s+(any\s+|a\s+|visible\s+|obvious\s+|apparent\s+)*(defects?|defective|anomal(y|ies|ous)|abnormal(ity|ities)?)\b",
        )
        .unwrap()
    })
}

/// Maps a free-text model answer to a defect decision.
///
/// Rules, first match wins, all case-insensitive:
/// 1. a leading option letter `A`/`B` standing alone (followed by end of
///    text or one of `.`, `)`, `:`, `,`, `]`) gives yes/no;
/// 2. a negated defect phrase such as "no defect" or "not anomalous" gives no;
/// 3. any of `yes`, `abnormal`, `defect(s)`, `defective`, `anomalous` gives yes;
/// 4. a standalone `no` or `normal` gives no;
/// 5. otherwise unparseable.
pub fn parse_answer(raw: &str) -> ParsedAnswer {
    let text = raw.to_lowercase();
    let body = text.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '(' | '[' | '"' | '\'' | '*'));
    let mut chars = body.chars();
    if let Some(first @ ('a' | 'b')) = chars.next() {
        if matches!(chars.next(), None | Some('.' | ')' | ':' | ',' | ']')) {
            return if first == 'a' {
                ParsedAnswer::DefectYes
            } else {
                ParsedAnswer::DefectNo
            };
        }
    }
    if negation_re().is_match(&text) {
        return ParsedAnswer::DefectNo;
    }
    let tokens: HashSet<&str> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .collect();
    let has = |w: &str| tokens.contains(w);
    if YES_WORDS.iter().any(|w| has(w)) || has("defects") {
        return ParsedAnswer::DefectYes;
    }
    if NO_WORDS.iter().any(|w| has(w)) {
        return ParsedAnswer::DefectNo;
    }
    ParsedAnswer::Unparseable
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    Image(ImageRef),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRole {
    Template,
    Query,
    AnnotatedQuery,
}

/// Reference to one image in a request. `url` is a data URL or remote URL
/// when pixels exist; without it the image is named in text on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    pub role: ImageRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
}

impl ImageRef {
    pub fn is_annotated(&self) -> bool {
        self.role == ImageRole::AnnotatedQuery
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<ContentPart>,
}

/// Attention-scaling hint attached to low-confidence requests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaasHint {
    pub alpha: f64,
    pub layers: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    /// Query image id; routing metadata, not sent on the wire.
    pub image_id: String,
    pub messages: Vec<ChatMessage>,
    pub prior: TextualPrior,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caas: Option<CaasHint>,
}

impl ChatRequest {
    pub fn images(&self) -> impl Iterator<Item = &ImageRef> {
        self.messages.iter().flat_map(|m| &m.parts).filter_map(|p| match p {
            ContentPart::Image(r) => Some(r),
            ContentPart::Text { .. } => None,
        })
    }

    pub fn has_annotated_image(&self) -> bool {
        self.images().any(ImageRef::is_annotated)
    }

    /// Body of an OpenAI-compatible `/chat/completions` request.
    pub fn to_wire(&self, model: &str, include_caas: bool) -> serde_json::Value {
        let messages: Vec<serde_json::Value> = self
            .messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                };
                if let [ContentPart::Text { text }] = m.parts.as_slice() {
                    return serde_json::json!({ "role": role, "content": text });
                }
                let content: Vec<serde_json::Value> = m
                    .parts
                    .iter()
                    .map(|p| match p {
                        ContentPart::Text { text } => serde_json::json!({ "type": "text", "text": text }),
                        ContentPart::Image(ImageRef { url: Some(url), .. }) => {
                            serde_json::json!({ "type": "image_url", "image_url": { "url": url } })
                        }
                        ContentPart::Image(r) => serde_json::json!({
                            "type": "text",
                            "text": format!("[{} image: {}]", image_role_label(r.role), r.image_id),
                        }),
                    })
                    .collect();
                serde_json::json!({ "role": role, "content": content })
            })
            .collect();
        let mut body = serde_json::json!({
            "model": model,
            "messages": messages,
            "temperature": 0.0,
            "max_tokens": 16,
        });
        if let (true, Some(h)) = (include_caas, self.caas) {
            body["caas"] = serde_json::json!({ "alpha": h.alpha, "layers": [h.layers.0, h.layers.1] });
        }
        body
    }
}

fn image_role_label(role: ImageRole) -> &'static str {
    match role {
        ImageRole::Template => "template",
        ImageRole::Query => "query",
        ImageRole::AnnotatedQuery => "annotated query",
    }
}

/// Images available for one query.
#[derive(Debug, Clone, Default)]
pub struct QueryImages {
    pub query: Option<ImageRef>,
    pub template: Option<ImageRef>,
    /// Rendered copy with red boxes, when pixel data exists.
    pub annotated: Option<ImageRef>,
}

/// Assembles the request: system instruction; template image; query image;
/// annotated query image when boxes exist; prior text and question.
pub fn assemble_request(
    image_id: &str,
    bundle: &PromptBundle,
    images: &QueryImages,
    caas: Option<CaasHint>,
) -> ChatRequest {
    let mut parts = Vec::new();
    if let Some(t) = &images.template {
        parts.push(ContentPart::Image(t.clone()));
    }
    parts.push(ContentPart::Image(images.query.clone().unwrap_or(ImageRef {
        image_id: image_id.to_string(),
        role: ImageRole::Query,
        url: None,
    })));
    if let Some(boxes) = &bundle.visual_boxes {
        match &images.annotated {
            Some(a) => parts.push(ContentPart::Image(ImageRef {
                role: ImageRole::AnnotatedQuery,
                ..a.clone()
            })),
            None if !boxes.is_empty() => {
                let coords: Vec<String> = boxes
                    .iter()
                    .map(|b| format!("({}, {}, {}, {})", b.x0, b.y0, b.x1, b.y1))
                    .collect();
                parts.push(ContentPart::Text {
                    text: format!("Red bounding boxes (x0, y0, x1, y1): {}", coords.join(", ")),
                });
            }
            None => {}
        }
    }
    parts.push(ContentPart::Text {
        text: bundle.user_text(),
    });
    ChatRequest {
        image_id: image_id.to_string(),
        messages: vec![
            ChatMessage {
                role: Role::System,
                parts: vec![ContentPart::Text {
                    text: bundle.system_instruction.clone(),
                }],
            },
            ChatMessage { role: Role::User, parts },
        ],
        prior: bundle.textual_prior,
        caas,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub raw_text: String,
    pub latency_ms: u64,
    pub status: u16,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("endpoint returned an empty completion")]
    EmptyCompletion,
    #[error("endpoint unreachable after {attempts} attempts: {last}")]
    Unreachable { attempts: u32, last: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("no chat endpoint configured and no stub selected")]
    NotConfigured,
}

impl ClientError {
    pub fn is_transient(&self) -> bool {
        match self {
            ClientError::Transport(_) => true,
            ClientError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Something that answers chat requests: an HTTP endpoint or a stub.
pub trait ChatClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts including the first.
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    pub fn no_delay() -> Self {
        Self {
            base_delay: Duration::ZERO,
            ..Self::default()
        }
    }

    pub fn delay_for(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt)
    }
}

/// Sends with exponential backoff on transient failures and parses the answer.
pub fn send_to_model(
    request: &ChatRequest,
    client: &dyn ChatClient,
    retry: &RetryPolicy,
) -> Result<(ModelAnswer, ChatResponse), ClientError> {
    let attempts = retry.max_attempts.max(1);
    let mut last = None;
    for attempt in 0..attempts {
        match client.complete(request) {
            Ok(resp) => {
                if resp.raw_text.trim().is_empty() {
                    return Err(ClientError::EmptyCompletion);
                }
                let answer = ModelAnswer {
                    parsed: parse_answer(&resp.raw_text),
                    raw_text: resp.raw_text.clone(),
                };
                return Ok((answer, resp));
            }
            Err(e) if e.is_transient() => {
                log::debug!("attempt {} for {} failed: {e}", attempt + 1, request.image_id);
                last = Some(e);
                if attempt + 1 < attempts {
                    std::thread::sleep(retry.delay_for(attempt));
                }
            }
            Err(e) => return Err(e),
        }
    }
    match last {
        Some(ClientError::Transport(msg)) => Err(ClientError::Unreachable {
            attempts,
            last: msg,
        }),
        Some(e) => Err(e),
        None => Err(ClientError::NotConfigured),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub url: Option<String>,
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    /// Attach the attention-scaling hint to low-confidence requests.
    pub send_caas_hint: bool,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: None,
            model: "qwen2.5-vl-7b-instruct".into(),
            api_key: None,
            timeout_secs: 60,
            max_in_flight: 4,
            send_caas_hint: true,
        }
    }
}

impl EndpointConfig {
    /// Applies `EAGLE_ENDPOINT`, `EAGLE_API_KEY` and `EAGLE_MODEL`.
    pub fn with_env_overrides(mut self) -> Self {
        self.apply_overrides(|k| std::env::var(k).ok());
        self
    }

    pub fn apply_overrides(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(v) = get("EAGLE_ENDPOINT") {
            self.url = Some(v);
        }
        if let Some(v) = get("EAGLE_API_KEY") {
            self.api_key = Some(v);
        }
        if let Some(v) = get("EAGLE_MODEL") {
            self.model = v;
        }
    }

    pub fn completions_url(&self) -> Option<String> {
        self.url.as_ref().map(|u| {
            let u = u.trim_end_matches('/');
            if u.ends_with("/chat/completions") {
                u.to_string()
            } else {
                format!("{u}/chat/completions")
            }
        })
    }
}

/// Blocking client for an OpenAI-compatible chat-completions endpoint.
pub struct HttpChatClient {
    url: String,
    model: String,
    api_key: Option<String>,
    include_caas: bool,
    http: reqwest::blocking::Client,
}

impl HttpChatClient {
    pub fn new(cfg: &EndpointConfig) -> Result<Self, ClientError> {
        let url = cfg.completions_url().ok_or(ClientError::NotConfigured)?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(Self {
            url,
            model: cfg.model.clone(),
            api_key: cfg.api_key.clone(),
            include_caas: cfg.send_caas_hint,
            http,
        })
    }
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

impl ChatClient for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        let started = Instant::now();
        let mut req = self
            .http
            .post(&self.url)
            .json(&request.to_wire(&self.model, self.include_caas));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| ClientError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(ClientError::Status { status, body });
        }
        let parsed: WireResponse =
            serde_json::from_str(&body).map_err(|e| ClientError::Malformed(e.to_string()))?;
        let raw_text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        Ok(ChatResponse {
            raw_text,
            latency_ms: started.elapsed().as_millis() as u64,
            status,
        })
    }
}

/// Deterministic local stand-ins for the multimodal model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StubClient {
    /// Answers the option matching the textual prior.
    EchoPrior,
    /// Answers against the prior whenever the request carries the
    /// attention-scaling hint (low-confidence images), else echoes it.
    AdversarialLowConfidence,
    /// Always returns `text`.
    Fixed { text: String },
}

impl ChatClient for StubClient {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        let echo = match request.prior {
            TextualPrior::AnomalousPrior => "A",
            TextualPrior::NormalPrior => "B",
        };
        let flip = |s: &str| if s == "A" { "B" } else { "A" };
        let raw_text = match self {
            StubClient::EchoPrior => echo.to_string(),
            StubClient::AdversarialLowConfidence if request.caas.is_some() => flip(echo).to_string(),
            StubClient::AdversarialLowConfidence => echo.to_string(),
            StubClient::Fixed { text } => text.clone(),
        };
        Ok(ChatResponse {
            raw_text,
            latency_ms: 0,
            status: 200,
        })
    }
}
