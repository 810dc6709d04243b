//! Chat-model access for every prompted step of the pipeline: request/config
//! types, an OpenAI-compatible and an Anthropic-compatible HTTP backend, a
//! deterministic scripted mock for tests and offline runs, prompt templates,
//! and the parse-retry driver that turns free-form replies into typed values.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sampling temperature used for every call.
pub const TEMPERATURE: f64 = 1.0;

/// How many model replies a step may burn trying to get parseable output
/// before the step fails.
pub const PARSE_RETRY_BUDGET: u32 = 3;

#[derive(Debug, Error)]
pub enum LlmError {
    /// Network failure or an HTTP error that survived the retry policy.
    #[error("transport failure: {0}")]
    Transport(String),
    /// Missing or rejected credentials. Raised before any request is sent
    /// when the configured key environment variable is unset.
    #[error("authentication failure: {0}")]
    Auth(String),
    /// The provider kept rate-limiting us past the retry budget.
    #[error("rate limited after retries")]
    RateLimited,
    /// The mock script has no response queued for this step.
    #[error("mock script exhausted for step '{step}'")]
    ScriptExhausted { step: ExtractionStep },
    /// No parseable reply within [`PARSE_RETRY_BUDGET`] attempts.
    #[error("could not parse '{step}' output after {attempts} attempts: {detail}")]
    ParseFailure {
        step: ExtractionStep,
        attempts: u32,
        detail: String,
    },
    /// A prompt template was missing, unreadable, or malformed.
    #[error("template error: {0}")]
    Template(String),
    /// A mock script file was missing or malformed.
    #[error("mock script error: {0}")]
    Script(String),
}

// ---------------------------------------------------------------------------
// Steps and requests
// ---------------------------------------------------------------------------

/// Every distinct kind of prompt the pipeline can issue.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionStep {
    /// Write the story itself.
    Story,
    /// Extract the character list from the story.
    Characters,
    /// Design the tile alphabet and assign character symbols.
    Tileset,
    /// Extract the ordered objectives.
    Goals,
    /// Pick the symbols that must appear on the map.
    ImportantTiles,
    /// Pick the symbols an agent can stand on.
    WalkableTiles,
    /// Pick the interactive object symbols.
    ObjectTiles,
    /// Draw the terrain-only environment sketch.
    WorldEnvironment,
    /// Draw the complete world grid.
    WorldFull,
    /// Locate each objective's target cell on a concrete grid.
    GoalPositions,
    /// Score story/world coherence 0-100.
    CoherenceJudge,
    /// Plan an agent's action sequence for one objective.
    AgentActions,
}

impl ExtractionStep {
    /// Snake-case name, also the template file stem and transcript label.
    pub fn name(self) -> &'static str {
        match self {
            ExtractionStep::Story => "story",
            ExtractionStep::Characters => "characters",
            ExtractionStep::Tileset => "tileset",
            ExtractionStep::Goals => "goals",
            ExtractionStep::ImportantTiles => "important_tiles",
            ExtractionStep::WalkableTiles => "walkable_tiles",
            ExtractionStep::ObjectTiles => "object_tiles",
            ExtractionStep::WorldEnvironment => "world_environment",
            ExtractionStep::WorldFull => "world_full",
            ExtractionStep::GoalPositions => "goal_positions",
            ExtractionStep::CoherenceJudge => "coherence_judge",
            ExtractionStep::AgentActions => "agent_actions",
        }
    }

    /// World drawing needs more room than JSON extraction.
    pub fn default_max_output_tokens(self) -> u32 {
        match self {
            ExtractionStep::WorldEnvironment | ExtractionStep::WorldFull => 8192,
            _ => 4096,
        }
    }
}

impl fmt::Display for ExtractionStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Who said a message; the system prompt travels separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }
}

/// One fully-specified model call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub step: ExtractionStep,
    pub system_prompt: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    /// A single-user-message request with the standard temperature and the
    /// step's default output budget.
    pub fn new(step: ExtractionStep, system_prompt: impl Into<String>, user: impl Into<String>) -> Self {
        ChatRequest {
            step,
            system_prompt: system_prompt.into(),
            messages: vec![ChatMessage::user(user)],
            temperature: TEMPERATURE,
            max_output_tokens: step.default_max_output_tokens(),
        }
    }
}

/// Fixed system prompt for a step.
pub fn system_prompt_for(step: ExtractionStep) -> &'static str {
    match step {
        ExtractionStep::Story => "You are a storyteller writing compact adventure stories.",
        ExtractionStep::WorldEnvironment | ExtractionStep::WorldFull => {
            "You are a level designer drawing 2D tile maps as character grids."
        }
        ExtractionStep::CoherenceJudge => {
            "You are a strict judge scoring how well a tile map depicts a story."
        }
        ExtractionStep::AgentActions => {
            "You are a game-playing agent that plans action sequences on tile maps."
        }
        _ => "You are a careful information extractor that answers in exactly the requested format.",
    }
}

// ---------------------------------------------------------------------------
// Provider configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// Replays a pre-recorded script; never touches the network.
    Mock,
    /// `POST {endpoint}/chat/completions` with a bearer token.
    OpenAiCompatible,
    /// `POST {endpoint}/v1/messages` with an `x-api-key` header.
    AnthropicCompatible,
}

/// Where and how to reach a chat model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub model_name: String,
    /// Base URL, e.g. `https://api.openai.com/v1`. Ignored by the mock.
    pub endpoint_url: String,
    /// Name of the environment variable holding the API key. Empty means
    /// no credential is attached (usable for local servers).
    pub api_key_env_var: String,
    pub request_timeout_secs: u64,
    /// Extra attempts after the first on transient failures.
    pub max_retries_per_call: u32,
    /// For the mock: JSON script file to replay. `None` means an empty
    /// script (every call fails as exhausted).
    pub mock_script_path: Option<PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Mock,
            model_name: "mock-model".to_owned(),
            endpoint_url: String::new(),
            api_key_env_var: String::new(),
            request_timeout_secs: 120,
            max_retries_per_call: 2,
            mock_script_path: None,
        }
    }
}

impl ProviderConfig {
    pub fn openai(model: impl Into<String>) -> Self {
        ProviderConfig {
            kind: ProviderKind::OpenAiCompatible,
            model_name: model.into(),
            endpoint_url: "https://api.openai.com/v1".to_owned(),
            api_key_env_var: "OPENAI_API_KEY".to_owned(),
            ..ProviderConfig::default()
        }
    }

    pub fn anthropic(model: impl Into<String>) -> Self {
        ProviderConfig {
            kind: ProviderKind::AnthropicCompatible,
            model_name: model.into(),
            endpoint_url: "https://api.anthropic.com".to_owned(),
            api_key_env_var: "ANTHROPIC_API_KEY".to_owned(),
            ..ProviderConfig::default()
        }
    }
}

// ---------------------------------------------------------------------------
// Mock scripts
// ---------------------------------------------------------------------------

/// One canned reply: consumed by the next request for its step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub step: ExtractionStep,
    pub response: String,
}

/// A replayable sequence of canned replies, kept per step in FIFO order.
/// Serializes as a bare JSON array of entries.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MockScript {
    pub entries: Vec<ScriptEntry>,
}

impl MockScript {
    pub fn push(&mut self, step: ExtractionStep, response: impl Into<String>) {
        self.entries.push(ScriptEntry { step, response: response.into() });
    }

    pub fn from_json_file(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Script(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| LlmError::Script(format!("{}: {e}", path.display())))
    }

    pub fn to_json_file(&self, path: &Path) -> Result<(), LlmError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| LlmError::Script(e.to_string()))?;
        std::fs::write(path, text + "\n")
            .map_err(|e| LlmError::Script(format!("{}: {e}", path.display())))
    }
}

/// Shortcut: a ready-to-use mock provider scripted with `responses`.
pub fn mock_script(
    responses: impl IntoIterator<Item = (ExtractionStep, String)>,
) -> Provider {
    let mut script = MockScript::default();
    for (step, response) in responses {
        script.push(step, response);
    }
    Provider::mock(script)
}

// ---------------------------------------------------------------------------
// Provider
// ---------------------------------------------------------------------------

/// One prompt/response pair as recorded in the transcript. `seq` numbers
/// exchanges from 0 in issue order; under the mock `ts_ms` equals `seq` so
/// transcripts are byte-stable, while HTTP providers record wall-clock
/// milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub seq: u64,
    pub ts_ms: u64,
    pub step: ExtractionStep,
    pub system: String,
    pub messages: Vec<ChatMessage>,
    pub response: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Exchange {
    /// All user-authored text in the exchange, newline-joined.
    pub fn user_text(&self) -> String {
        self.messages
            .iter()
            .filter(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Default)]
struct ProviderState {
    queues: BTreeMap<ExtractionStep, VecDeque<String>>,
    log: Vec<Exchange>,
}

/// A chat backend plus its exchange log. Cheap to construct; one per run.
pub struct Provider {
    config: ProviderConfig,
    state: Mutex<ProviderState>,
    http: Option<reqwest::blocking::Client>,
}

impl Provider {
    /// Builds a provider from config. For the mock kind this loads the
    /// script file if one is configured.
    pub fn new(config: ProviderConfig) -> Result<Self, LlmError> {
        let script = match (&config.kind, &config.mock_script_path) {
            (ProviderKind::Mock, Some(path)) => MockScript::from_json_file(path)?,
            _ => MockScript::default(),
        };
        Ok(Self::with_script(config, script))
    }

    /// Builds a provider with an in-memory script (mock kind only uses it).
    pub fn with_script(config: ProviderConfig, script: MockScript) -> Self {
        let http = match config.kind {
            ProviderKind::Mock => None,
            _ => reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(config.request_timeout_secs))
                .build()
                .ok(),
        };
        let mut queues: BTreeMap<ExtractionStep, VecDeque<String>> = BTreeMap::new();
        for entry in script.entries {
            queues.entry(entry.step).or_default().push_back(entry.response);
        }
        Provider {
            config,
            state: Mutex::new(ProviderState { queues, log: Vec::new() }),
            http,
        }
    }

    /// A mock provider replaying `script`.
    pub fn mock(script: MockScript) -> Self {
        Self::with_script(ProviderConfig::default(), script)
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn is_mock(&self) -> bool {
        self.config.kind == ProviderKind::Mock
    }

    /// Sends one request and returns the model's text reply. Every call is
    /// recorded in the exchange log, failures included.
    pub fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let result = match self.config.kind {
            ProviderKind::Mock => self.complete_mock(request),
            _ => self.complete_http(request),
        };
        self.record(request, &result);
        result
    }

    fn complete_mock(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let mut state = self.state.lock().expect("provider state poisoned");
        state
            .queues
            .get_mut(&request.step)
            .and_then(VecDeque::pop_front)
            .ok_or(LlmError::ScriptExhausted { step: request.step })
    }

    fn complete_http(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let api_key = if self.config.api_key_env_var.is_empty() {
            None
        } else {
            match std::env::var(&self.config.api_key_env_var) {
                Ok(key) if !key.is_empty() => Some(key),
                _ => {
                    return Err(LlmError::Auth(format!(
                        "environment variable {} is not set",
                        self.config.api_key_env_var
                    )))
                }
            }
        };
        let client = self
            .http
            .as_ref()
            .ok_or_else(|| LlmError::Transport("http client unavailable".to_owned()))?;

        let mut last_error = LlmError::Transport("no attempt made".to_owned());
        for attempt in 0..=self.config.max_retries_per_call {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(500 << (attempt - 1)));
            }
            match self.send_once(client, request, api_key.as_deref()) {
                Ok(text) => return Ok(text),
                Err(err) => {
                    let retryable = matches!(
                        err,
                        LlmError::RateLimited | LlmError::Transport(_)
                    );
                    last_error = err;
                    if !retryable {
                        break;
                    }
                }
            }
        }
        Err(last_error)
    }

    fn send_once(
        &self,
        client: &reqwest::blocking::Client,
        request: &ChatRequest,
        api_key: Option<&str>,
    ) -> Result<String, LlmError> {
        let base = self.config.endpoint_url.trim_end_matches('/');
        let (url, body) = match self.config.kind {
            ProviderKind::OpenAiCompatible => {
                let mut messages = vec![serde_json::json!({
                    "role": "system",
                    "content": request.system_prompt,
                })];
                for m in &request.messages {
                    messages.push(serde_json::json!({
                        "role": match m.role {
                            Role::User => "user",
                            Role::Assistant => "assistant",
                        },
                        "content": m.content,
                    }));
                }
                (
                    format!("{base}/chat/completions"),
                    serde_json::json!({
                        "model": self.config.model_name,
                        "messages": messages,
                        "temperature": request.temperature,
                        "max_tokens": request.max_output_tokens,
                    }),
                )
            }
            ProviderKind::AnthropicCompatible => {
                let messages: Vec<_> = request
                    .messages
                    .iter()
                    .map(|m| {
                        serde_json::json!({
                            "role": match m.role {
                                Role::User => "user",
                                Role::Assistant => "assistant",
                            },
                            "content": m.content,
                        })
                    })
                    .collect();
                (
                    format!("{base}/v1/messages"),
                    serde_json::json!({
                        "model": self.config.model_name,
                        "system": request.system_prompt,
                        "messages": messages,
                        "temperature": request.temperature,
                        "max_tokens": request.max_output_tokens,
                    }),
                )
            }
            ProviderKind::Mock => unreachable!("mock handled separately"),
        };

        let mut http_request = client.post(&url).json(&body);
        if let Some(key) = api_key {
            http_request = match self.config.kind {
                ProviderKind::AnthropicCompatible => http_request
                    .header("x-api-key", key)
                    .header("anthropic-version", "2023-06-01"),
                _ => http_request.bearer_auth(key),
            };
        }

        let response = http_request
            .send()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| LlmError::Transport(e.to_string()))?;

        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(LlmError::Auth(format!("{status}: {text}")));
        }
        if status.as_u16() == 429 {
            return Err(LlmError::RateLimited);
        }
        if !status.is_success() {
            return Err(LlmError::Transport(format!("{status}: {text}")));
        }

        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| LlmError::Transport(format!("malformed response body: {e}")))?;
        let content = match self.config.kind {
            ProviderKind::OpenAiCompatible => value["choices"][0]["message"]["content"]
                .as_str()
                .map(str::to_owned),
            ProviderKind::AnthropicCompatible => value["content"]
                .as_array()
                .map(|parts| {
                    parts
                        .iter()
                        .filter_map(|p| p["text"].as_str())
                        .collect::<Vec<_>>()
                        .join("")
                }),
            ProviderKind::Mock => unreachable!(),
        };
        content.ok_or_else(|| {
            LlmError::Transport("response body had no text content".to_owned())
        })
    }

    fn record(&self, request: &ChatRequest, result: &Result<String, LlmError>) {
        let mut state = self.state.lock().expect("provider state poisoned");
        let seq = state.log.len() as u64;
        let ts_ms = match self.config.kind {
            // Logical clock: transcripts of scripted runs are byte-stable.
            ProviderKind::Mock => seq,
            _ => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        };
        state.log.push(Exchange {
            seq,
            ts_ms,
            step: request.step,
            system: request.system_prompt.clone(),
            messages: request.messages.clone(),
            response: result.as_ref().ok().cloned(),
            error: result.as_ref().err().map(ToString::to_string),
        });
    }

    /// Snapshot of all recorded exchanges.
    pub fn exchanges(&self) -> Vec<Exchange> {
        self.state.lock().expect("provider state poisoned").log.clone()
    }

    /// Exchanges recorded at or after `offset`, for incremental flushing.
    pub fn exchanges_from(&self, offset: usize) -> Vec<Exchange> {
        let state = self.state.lock().expect("provider state poisoned");
        state.log.get(offset..).map(<[Exchange]>::to_vec).unwrap_or_default()
    }

    pub fn exchange_count(&self) -> usize {
        self.state.lock().expect("provider state poisoned").log.len()
    }
}

// ---------------------------------------------------------------------------
// Step driver
// ---------------------------------------------------------------------------

/// Runs one prompted step: sends the prompt, parses the reply, and on parse
/// failure re-prompts with the error appended — the failed reply stays in
/// the conversation — up to [`PARSE_RETRY_BUDGET`] total attempts.
///
/// Returns the parsed value together with the raw reply it came from.
pub fn run_step<T>(
    provider: &Provider,
    step: ExtractionStep,
    user_prompt: &str,
    mut parse: impl FnMut(&str) -> Result<T, String>,
) -> Result<(T, String), LlmError> {
    let mut request = ChatRequest::new(step, system_prompt_for(step), user_prompt);
    let mut last_detail = String::new();
    for attempt in 1..=PARSE_RETRY_BUDGET {
        let response = provider.complete(&request)?;
        match parse(&response) {
            Ok(value) => return Ok((value, response)),
            Err(detail) => {
                last_detail = detail;
                if attempt < PARSE_RETRY_BUDGET {
                    request.messages.push(ChatMessage::assistant(response));
                    request.messages.push(ChatMessage::user(format!(
                        "Your previous reply could not be used: {last_detail}\n\
                         Answer again, following the required format exactly."
                    )));
                }
            }
        }
    }
    Err(LlmError::ParseFailure {
        step,
        attempts: PARSE_RETRY_BUDGET,
        detail: last_detail,
    })
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

/// Prompt templates addressed by step name. Defaults are compiled in; a
/// directory of `<name>.txt` files can override any of them.
#[derive(Debug, Clone, Default)]
pub struct TemplateStore {
    dir: Option<PathBuf>,
}

impl TemplateStore {
    /// Compiled-in templates only.
    pub fn embedded() -> Self {
        TemplateStore { dir: None }
    }

    /// Overrides from `dir/<name>.txt`, falling back to the compiled-in set.
    pub fn from_dir(dir: impl Into<PathBuf>) -> Self {
        TemplateStore { dir: Some(dir.into()) }
    }

    fn source(&self, name: &str) -> Result<String, LlmError> {
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{name}.txt"));
            if path.is_file() {
                return std::fs::read_to_string(&path)
                    .map_err(|e| LlmError::Template(format!("{}: {e}", path.display())));
            }
        }
        embedded_template(name)
            .map(str::to_owned)
            .ok_or_else(|| LlmError::Template(format!("no template named '{name}'")))
    }

    /// Renders `name` with `{{placeholder}}` substitution. Placeholders are
    /// scanned in the template only — substituted values are inserted
    /// verbatim and never re-scanned, so grid or JSON content is safe.
    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> Result<String, LlmError> {
        let template = self.source(name)?;
        let mut out = String::with_capacity(template.len());
        let mut rest = template.as_str();
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after.find("}}").ok_or_else(|| {
                LlmError::Template(format!("unclosed placeholder in template '{name}'"))
            })?;
            let key = after[..end].trim();
            let value = vars
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| {
                    LlmError::Template(format!(
                        "no value supplied for placeholder '{key}' in template '{name}'"
                    ))
                })?;
            out.push_str(value);
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

fn embedded_template(name: &str) -> Option<&'static str> {
    Some(match name {
        "story" => include_str!("../templates/story.txt"),
        "characters" => include_str!("../templates/characters.txt"),
        "tileset" => include_str!("../templates/tileset.txt"),
        "goals" => include_str!("../templates/goals.txt"),
        "important_tiles" => include_str!("../templates/important_tiles.txt"),
        "walkable_tiles" => include_str!("../templates/walkable_tiles.txt"),
        "object_tiles" => include_str!("../templates/object_tiles.txt"),
        "world_environment" => include_str!("../templates/world_environment.txt"),
        "world_full" => include_str!("../templates/world_full.txt"),
        "goal_positions" => include_str!("../templates/goal_positions.txt"),
        "coherence_judge" => include_str!("../templates/coherence_judge.txt"),
        "agent_actions" => include_str!("../templates/agent_actions.txt"),
        _ => return None,
    })
}

// ---------------------------------------------------------------------------
// Reply mining
// ---------------------------------------------------------------------------

/// Contents of every ``` fenced block in `text`, in order. An opening fence
/// may carry a language tag; an unterminated final fence still counts.
pub fn fenced_blocks(text: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            match current.take() {
                Some(content) => blocks.push(content.join("\n")),
                None => current = Some(Vec::new()),
            }
        } else if let Some(content) = current.as_mut() {
            content.push(line);
        }
    }
    if let Some(content) = current {
        blocks.push(content.join("\n"));
    }
    blocks
}

/// Best-effort extraction of the JSON payload from a model reply: the last
/// fenced block that parses, else the whole trimmed text if it parses, else
/// the widest brace- or bracket-delimited slice that parses, else the
/// trimmed text as-is (letting the typed parse produce the error).
pub fn extract_json_candidate(text: &str) -> String {
    let parses = |s: &str| serde_json::from_str::<serde_json::Value>(s).is_ok();
    for block in fenced_blocks(text).into_iter().rev() {
        let block = block.trim().to_owned();
        if parses(&block) {
            return block;
        }
    }
    let trimmed = text.trim();
    if parses(trimmed) {
        return trimmed.to_owned();
    }
    for (open, close) in [('{', '}'), ('[', ']')] {
        if let (Some(start), Some(end)) = (text.find(open), text.rfind(close)) {
            if start < end && parses(&text[start..=end]) {
                return text[start..=end].to_owned();
            }
        }
    }
    trimmed.to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scripted(entries: &[(ExtractionStep, &str)]) -> Provider {
        mock_script(
            entries
                .iter()
                .map(|&(step, response)| (step, response.to_owned())),
        )
    }

    #[test]
    fn mock_replays_responses_per_step_in_order() {
        let provider = scripted(&[
            (ExtractionStep::Story, "first story"),
            (ExtractionStep::Characters, "chars"),
            (ExtractionStep::Story, "second story"),
        ]);
        let story = ChatRequest::new(ExtractionStep::Story, "s", "write");
        assert_eq!(provider.complete(&story).unwrap(), "first story");
        assert_eq!(provider.complete(&story).unwrap(), "second story");
        let chars = ChatRequest::new(ExtractionStep::Characters, "s", "extract");
        assert_eq!(provider.complete(&chars).unwrap(), "chars");
    }

    #[test]
    fn mock_exhaustion_names_the_step() {
        let provider = scripted(&[(ExtractionStep::Story, "only one")]);
        let req = ChatRequest::new(ExtractionStep::Story, "s", "write");
        provider.complete(&req).unwrap();
        let err = provider.complete(&req).unwrap_err();
        assert!(matches!(
            err,
            LlmError::ScriptExhausted { step: ExtractionStep::Story }
        ));
    }

    #[test]
    fn mock_records_every_exchange_with_logical_timestamps() {
        let provider = scripted(&[(ExtractionStep::Story, "reply")]);
        let req = ChatRequest::new(ExtractionStep::Story, "sys", "prompt text");
        provider.complete(&req).unwrap();
        let _ = provider.complete(&req); // fails, still recorded
        let log = provider.exchanges();
        assert_eq!(log.len(), 2);
        assert_eq!((log[0].seq, log[0].ts_ms), (0, 0));
        assert_eq!((log[1].seq, log[1].ts_ms), (1, 1));
        assert_eq!(log[0].response.as_deref(), Some("reply"));
        assert!(log[1].response.is_none());
        assert!(log[1].error.as_deref().unwrap().contains("exhausted"));
        assert_eq!(log[0].user_text(), "prompt text");
    }

    #[test]
    fn http_provider_fails_auth_before_any_request_when_key_env_unset() {
        let mut config = ProviderConfig::openai("test-model");
        config.api_key_env_var = "WORLDLOOM_TEST_NO_SUCH_KEY_VAR".to_owned();
        let provider = Provider::new(config).unwrap();
        let req = ChatRequest::new(ExtractionStep::Story, "s", "write");
        let err = provider.complete(&req).unwrap_err();
        assert!(matches!(err, LlmError::Auth(_)), "got {err:?}");
    }

    #[test]
    fn run_step_returns_parsed_value_and_raw_text() {
        let provider = scripted(&[(ExtractionStep::CoherenceJudge, "score: 88")]);
        let (value, raw) = run_step(
            &provider,
            ExtractionStep::CoherenceJudge,
            "judge this",
            |text| text.strip_prefix("score: ").map(str::to_owned).ok_or_else(|| "no score".into()),
        )
        .unwrap();
        assert_eq!(value, "88");
        assert_eq!(raw, "score: 88");
    }

    #[test]
    fn run_step_reprompts_with_parse_error_and_previous_reply() {
        let provider = scripted(&[
            (ExtractionStep::Goals, "not json"),
            (ExtractionStep::Goals, "[1, 2]"),
        ]);
        let (value, _) = run_step(&provider, ExtractionStep::Goals, "list goals", |text| {
            serde_json::from_str::<Vec<u32>>(&extract_json_candidate(text))
                .map_err(|e| e.to_string())
        })
        .unwrap();
        assert_eq!(value, vec![1, 2]);

        let log = provider.exchanges();
        assert_eq!(log.len(), 2);
        // Second attempt carries the failed reply and the complaint.
        let retry = &log[1];
        assert_eq!(retry.messages.len(), 3);
        assert_eq!(retry.messages[1].content, "not json");
        assert!(retry.messages[2].content.contains("could not be used"));
    }

    #[test]
    fn run_step_gives_up_after_retry_budget() {
        let provider = scripted(&[
            (ExtractionStep::Goals, "bad"),
            (ExtractionStep::Goals, "bad"),
            (ExtractionStep::Goals, "bad"),
            (ExtractionStep::Goals, "never reached"),
        ]);
        let err = run_step(&provider, ExtractionStep::Goals, "list", |_| {
            Err::<(), String>("still bad".to_owned())
        })
        .unwrap_err();
        match err {
            LlmError::ParseFailure { step, attempts, detail } => {
                assert_eq!(step, ExtractionStep::Goals);
                assert_eq!(attempts, PARSE_RETRY_BUDGET);
                assert_eq!(detail, "still bad");
            }
            other => panic!("expected ParseFailure, got {other:?}"),
        }
        assert_eq!(provider.exchange_count(), PARSE_RETRY_BUDGET as usize);
    }

    #[test]
    fn templates_render_placeholders_without_rescanning_values() {
        let store = TemplateStore::embedded();
        let rendered = store
            .render("characters", &[("story", "A tale with {{weird}} braces")])
            .unwrap();
        assert!(rendered.contains("A tale with {{weird}} braces"));
        assert!(!rendered.contains("{{story}}"));
    }

    #[test]
    fn templates_error_on_missing_placeholder_value() {
        let store = TemplateStore::embedded();
        let err = store.render("characters", &[]).unwrap_err();
        assert!(matches!(err, LlmError::Template(_)));
        assert!(err.to_string().contains("story"));
    }

    #[test]
    fn template_dir_overrides_embedded_and_falls_back() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("story.txt"), "custom {{min_paragraphs}}").unwrap();
        let store = TemplateStore::from_dir(dir.path());
        let rendered = store
            .render("story", &[("min_paragraphs", "4"), ("max_paragraphs", "5")])
            .unwrap();
        assert_eq!(rendered, "custom 4");
        // characters.txt is absent from the dir: embedded version serves.
        let fallback = store.render("characters", &[("story", "abc")]).unwrap();
        assert!(fallback.contains("abc"));
    }

    #[test]
    fn every_step_has_an_embedded_template_and_system_prompt() {
        let steps = [
            ExtractionStep::Story,
            ExtractionStep::Characters,
            ExtractionStep::Tileset,
            ExtractionStep::Goals,
            ExtractionStep::ImportantTiles,
            ExtractionStep::WalkableTiles,
            ExtractionStep::ObjectTiles,
            ExtractionStep::WorldEnvironment,
            ExtractionStep::WorldFull,
            ExtractionStep::GoalPositions,
            ExtractionStep::CoherenceJudge,
            ExtractionStep::AgentActions,
        ];
        for step in steps {
            assert!(embedded_template(step.name()).is_some(), "no template: {step}");
            assert!(!system_prompt_for(step).is_empty());
        }
    }

    #[test]
    fn json_candidate_prefers_last_parsing_fenced_block() {
        let text = "Sure!\n```json\n{\"a\": 1}\n```\nActually use:\n```json\n{\"a\": 2}\n```";
        assert_eq!(extract_json_candidate(text), "{\"a\": 2}");
    }

    #[test]
    fn json_candidate_falls_back_to_bare_and_embedded_json() {
        assert_eq!(extract_json_candidate("  [1, 2]  "), "[1, 2]");
        assert_eq!(
            extract_json_candidate("The answer is {\"k\": [1]} as requested."),
            "{\"k\": [1]}"
        );
        assert_eq!(extract_json_candidate("no json here"), "no json here");
    }

    #[test]
    fn world_steps_get_a_larger_output_budget() {
        assert_eq!(ExtractionStep::WorldFull.default_max_output_tokens(), 8192);
        assert_eq!(ExtractionStep::WorldEnvironment.default_max_output_tokens(), 8192);
        assert_eq!(ExtractionStep::Goals.default_max_output_tokens(), 4096);
        let req = ChatRequest::new(ExtractionStep::WorldFull, "s", "draw");
        assert_eq!(req.temperature, TEMPERATURE);
        assert_eq!(req.max_output_tokens, 8192);
    }

    #[test]
    fn script_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.json");
        let mut script = MockScript::default();
        script.push(ExtractionStep::Story, "once upon a time");
        script.push(ExtractionStep::WorldFull, "```\nGG\nGG\n```");
        script.to_json_file(&path).unwrap();
        let loaded = MockScript::from_json_file(&path).unwrap();
        assert_eq!(loaded, script);
        let missing = MockScript::from_json_file(&dir.path().join("nope.json"));
        assert!(matches!(missing, Err(LlmError::Script(_))));
    }
}
