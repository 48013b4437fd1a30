use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{FeedbackLabel, TemplateRegistry, UnconstrainedFeedback};
use crate::error::{AltError, Result};
use crate::rng::tag;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

fn default_timeout() -> u64 {
    60
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}
fn default_concurrency() -> usize {
    4
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            temperature: 0.0,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
            concurrency: default_concurrency(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

impl ChatRequest {
    /// Content of the last user message.
    pub fn user_content(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct ChatResponse {
    pub choices: Vec<ChatChoice>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ChatChoice {
    pub message: ChatMessage,
}

/// One round trip to a chat-completion backend. Failures should be
/// `AltError::Transport`; the client retries those.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

impl<F> ChatTransport for F
where
    F: Fn(&ChatRequest) -> Result<String> + Send + Sync,
{
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        self(request)
    }
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: String,
}

impl HttpTransport {
    pub fn new(config: &ClientConfig) -> Result<Self> {
        let api_key = std::env::var(&config.api_key_env).map_err(|_| {
            AltError::validation(format!("environment variable {} is not set", config.api_key_env))
        })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| AltError::Transport {
                attempts: 0,
                detail: e.to_string(),
            })?;
        Ok(Self {
            client,
            endpoint: config.endpoint.clone(),
            api_key,
        })
    }
}

impl std::fmt::Debug for HttpTransport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpTransport").field("endpoint", &self.endpoint).finish_non_exhaustive()
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let fail = |detail: String| AltError::Transport { attempts: 1, detail };
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(request)
            .send()
            .map_err(|e| fail(e.without_url().to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(fail(format!("HTTP {status}")));
        }
        let body: ChatResponse = resp.json().map_err(|e| fail(format!("bad response body: {e}")))?;
        body.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| fail("response has no choices".into()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    /// Substring of the rendered user message.
    pub contains: String,
    pub response: String,
}

/// Canned responses: the first rule whose substring occurs in the user
/// message wins; otherwise a fallback response is picked by hashing the
/// message, so replay does not depend on call order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockFixture {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub fallback: Vec<String>,
}

impl MockFixture {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AltError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| AltError::Format(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Default)]
pub struct MockTransport {
    fixture: MockFixture,
    fail_first: AtomicUsize,
    calls: AtomicUsize,
}

impl MockTransport {
    pub fn new(fixture: MockFixture) -> Self {
        Self {
            fixture,
            ..Self::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(Self::new(MockFixture::load(path)?))
    }

    /// Make the next `n` calls fail with a transport error.
    pub fn failing_first(self, n: usize) -> Self {
        self.fail_first.store(n, Ordering::SeqCst);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatTransport for MockTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let pending = self.fail_first.load(Ordering::SeqCst);
        if pending > 0
            && self
                .fail_first
                .compare_exchange(pending, pending - 1, Ordering::SeqCst, Ordering::SeqCst)
                .is_ok()
        {
            return Err(AltError::Transport {
                attempts: 1,
                detail: "mock transient failure".into(),
            });
        }
        let content = request.user_content();
        if let Some(rule) = self.fixture.rules.iter().find(|r| content.contains(&r.contains)) {
            return Ok(rule.response.clone());
        }
        if self.fixture.fallback.is_empty() {
            return Err(AltError::Transport {
                attempts: 1,
                detail: "mock fixture has no matching response".into(),
            });
        }
        let i = (tag(content) % self.fixture.fallback.len() as u64) as usize;
        Ok(self.fixture.fallback[i].clone())
    }
}

/// Retrying chat client bound to a template registry.
#[derive(Clone)]
pub struct LlmClient {
    pub config: ClientConfig,
    pub templates: TemplateRegistry,
    transport: Arc<dyn ChatTransport>,
}

impl LlmClient {
    pub fn new(config: ClientConfig, templates: TemplateRegistry, transport: Arc<dyn ChatTransport>) -> Self {
        Self {
            config,
            templates,
            transport,
        }
    }

    pub fn http(config: ClientConfig, templates: TemplateRegistry) -> Result<Self> {
        let transport = Arc::new(HttpTransport::new(&config)?);
        Ok(Self::new(config, templates, transport))
    }

    /// Render `template_id` and return the raw reply.
    pub fn ask(&self, template_id: &str, slots: &[(&str, &str)]) -> Result<String> {
        let (system, user) = self.templates.get(template_id)?.render(slots)?;
        let mut messages = Vec::with_capacity(2);
        if !system.is_empty() {
            messages.push(ChatMessage {
                role: "system".into(),
                content: system,
            });
        }
        messages.push(ChatMessage {
            role: "user".into(),
            content: user,
        });
        let request = ChatRequest {
            model: self.config.model.clone(),
            messages,
            temperature: self.config.temperature,
        };
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            match self.transport.complete(&request) {
                Ok(text) => return Ok(text),
                Err(AltError::Transport { detail, .. }) => {
                    log::warn!("chat request failed (attempt {}/{attempts}): {detail}", attempt + 1);
                    last = detail;
                    if attempt + 1 < attempts {
                        let wait = self.config.backoff_ms.saturating_mul(1 << attempt.min(16));
                        std::thread::sleep(Duration::from_millis(wait));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        Err(AltError::Transport { attempts, detail: last })
    }

    /// Apply `f` to every item with at most `config.concurrency` requests in
    /// flight. Results keep item order.
    pub fn map_concurrent<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
        use rayon::prelude::*;
        match rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.concurrency.max(1))
            .build()
        {
            Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
            Err(_) => items.iter().map(f).collect(),
        }
    }
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Match a reply against the allowed labels after collapsing whitespace and
/// case. Surrounding quotes and a trailing period are ignored.
pub fn parse_categorical(reply: &str, allowed: &[FeedbackLabel]) -> Result<FeedbackLabel> {
    let trimmed = reply.trim().trim_matches(|c| c == '"' || c == '\'').trim_end_matches('.');
    let key = normalize(trimmed);
    allowed
        .iter()
        .find(|l| normalize(&l.text) == key)
        .cloned()
        .ok_or_else(|| AltError::Unparseable(format!("reply {reply:?} is not an allowed label")))
}

fn tag_body<'a>(reply: &'a str, name: &str) -> Result<&'a str> {
    let open = format!("<{name}>");
    let close = format!("</{name}>");
    let start = reply
        .find(&open)
        .ok_or_else(|| AltError::Unparseable(format!("missing {open}")))?
        + open.len();
    let len = reply[start..]
        .find(&close)
        .ok_or_else(|| AltError::Unparseable(format!("missing {close}")))?;
    Ok(reply[start..start + len].trim())
}

pub fn parse_unconstrained(reply: &str) -> Result<UnconstrainedFeedback> {
    let analysis = tag_body(reply, "analysis")?.to_string();
    let feedback = tag_body(reply, "feedback")?.to_string();
    if feedback.is_empty() {
        return Err(AltError::Unparseable("empty feedback".into()));
    }
    let raw = tag_body(reply, "score")?;
    let score: u8 = raw
        .parse()
        .ok()
        .filter(|s| *s <= UnconstrainedFeedback::MAX_SCORE)
        .ok_or_else(|| AltError::Unparseable(format!("score {raw:?} is not an integer in 0..=3")))?;
    Ok(UnconstrainedFeedback {
        analysis,
        feedback,
        score,
    })
}

pub fn llm_categorical(
    client: &LlmClient,
    template_id: &str,
    prompt: &str,
    generation: &str,
    allowed: &[FeedbackLabel],
) -> Result<FeedbackLabel> {
    if allowed.is_empty() {
        return Err(AltError::validation("allowed label set is empty"));
    }
    let reply = client.ask(template_id, &[("prompt", prompt), ("generation", generation)])?;
    parse_categorical(&reply, allowed)
}

pub fn llm_unconstrained(
    client: &LlmClient,
    template_id: &str,
    prompt: &str,
    generation: &str,
) -> Result<UnconstrainedFeedback> {
    let reply = client.ask(template_id, &[("prompt", prompt), ("generation", generation)])?;
    parse_unconstrained(&reply)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::{dialogue_scheme, Encoding};

    fn client(fixture: MockFixture) -> (LlmClient, Arc<MockTransport>) {
        let mock = Arc::new(MockTransport::new(fixture));
        let cfg = ClientConfig {
            backoff_ms: 0,
            ..ClientConfig::default()
        };
        (LlmClient::new(cfg, TemplateRegistry::builtin(), mock.clone()), mock)
    }

    fn replying(text: &str) -> LlmClient {
        client(MockFixture {
            rules: vec![],
            fallback: vec![text.into()],
        })
        .0
    }

    #[test]
    fn categorical_replies() {
        let allowed = dialogue_scheme(Encoding::Textual).labels;
        let ask = |reply: &str| llm_categorical(&replying(reply), "categorical_dialogue", "Human: hi", "hello", &allowed);
        assert_eq!(ask("Harmless and helpful").unwrap().text, "Harmless and helpful");
        assert_eq!(ask("harmless and HELPFUL").unwrap().category_index, Some(1));
        assert_eq!(ask("  \"Harmful.\" ").unwrap().text, "Harmful");
        assert!(matches!(ask("Great answer"), Err(AltError::Unparseable(_))));
        assert!(llm_categorical(&replying("Harmful"), "categorical_dialogue", "a", "b", &[]).is_err());
        assert!(llm_categorical(&replying("Harmful"), "missing", "a", "b", &allowed).is_err());
    }

    #[test]
    fn unconstrained_replies() {
        let f = parse_unconstrained("<analysis>ok</analysis><feedback>Accurate, concise</feedback><score>3</score>").unwrap();
        assert_eq!(
            f,
            UnconstrainedFeedback {
                analysis: "ok".into(),
                feedback: "Accurate, concise".into(),
                score: 3
            }
        );
        assert!(parse_unconstrained("<analysis>ok</analysis><feedback>x</feedback><score>3").is_err());
        assert!(parse_unconstrained("<analysis>ok</analysis><feedback>x</feedback><score>5</score>").is_err());
        assert!(parse_unconstrained("<analysis>ok</analysis><feedback> </feedback><score>1</score>").is_err());
        assert!(parse_unconstrained("<feedback>x</feedback><score>1</score>").is_err());
    }

    #[test]
    fn rules_and_hash_fallback() {
        let fixture = MockFixture {
            rules: vec![MockRule {
                contains: "special".into(),
                response: "Harmful".into(),
            }],
            fallback: vec!["a".into(), "b".into(), "c".into()],
        };
        let (c, mock) = client(fixture);
        let slots = |g: &'static str| [("prompt", "p"), ("generation", g)];
        assert_eq!(c.ask("categorical_dialogue", &slots("very special")).unwrap(), "Harmful");
        let first = c.ask("categorical_dialogue", &slots("x")).unwrap();
        c.ask("categorical_dialogue", &slots("y")).unwrap();
        assert_eq!(c.ask("categorical_dialogue", &slots("x")).unwrap(), first);
        assert_eq!(mock.calls(), 4);
    }

    #[test]
    fn retries_then_gives_up() {
        let fixture = MockFixture {
            rules: vec![],
            fallback: vec!["Harmful".into()],
        };
        let cfg = ClientConfig {
            backoff_ms: 0,
            max_retries: 2,
            ..ClientConfig::default()
        };
        let mock = Arc::new(MockTransport::new(fixture.clone()).failing_first(2));
        let c = LlmClient::new(cfg.clone(), TemplateRegistry::builtin(), mock.clone());
        assert_eq!(c.ask("categorical_dialogue", &[("prompt", "p"), ("generation", "g")]).unwrap(), "Harmful");
        assert_eq!(mock.calls(), 3);

        let mock = Arc::new(MockTransport::new(fixture).failing_first(5));
        let c = LlmClient::new(cfg, TemplateRegistry::builtin(), mock.clone());
        let err = c.ask("categorical_dialogue", &[("prompt", "p"), ("generation", "g")]).unwrap_err();
        assert!(matches!(err, AltError::Transport { attempts: 3, .. }));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn concurrent_map_keeps_order() {
        let c = replying("x");
        let items: Vec<usize> = (0..50).collect();
        assert_eq!(c.map_concurrent(&items, |i| i * 2), (0..50).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn missing_key_is_validation_error() {
        let cfg = ClientConfig {
            api_key_env: "ALT_TEST_SURELY_UNSET_KEY".into(),
            ..ClientConfig::default()
        };
        assert_eq!(HttpTransport::new(&cfg).unwrap_err().exit_code(), 1);
    }
}
