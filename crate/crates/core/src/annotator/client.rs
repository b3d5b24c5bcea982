//! Judge transport, rate limiting and retries.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::mock::{mock_judge, MockRubric};
use super::{AnnotatorError, JudgeItem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeClientConfig {
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub requests_per_minute: u32,
    pub max_in_flight: usize,
    pub timeout_ms: u64,
    pub model: Option<String>,
    pub temperature: Option<f64>,
}

impl Default for JudgeClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8080/v1/judge".into(),
            api_key_env: "JUDGE_API_KEY".into(),
            max_retries: 3,
            backoff_base_ms: 500,
            requests_per_minute: 60,
            max_in_flight: 4,
            timeout_ms: 120_000,
            model: None,
            temperature: None,
        }
    }
}

impl JudgeClientConfig {
    pub fn validate(&self) -> Result<(), AnnotatorError> {
        if self.requests_per_minute == 0 {
            return Err(AnnotatorError::Config(
                "requests_per_minute must be > 0".into(),
            ));
        }
        if self.max_in_flight == 0 {
            return Err(AnnotatorError::Config("max_in_flight must be > 0".into()));
        }
        Ok(())
    }

    /// Delay before retry number `attempt + 1`: `base * 2^attempt`.
    pub fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.backoff_base_ms.saturating_mul(1u64 << attempt.min(30)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    /// Worth retrying: network failure, 429, 5xx.
    #[error("transient: {0}")]
    Transient(String),
    #[error("permanent: {0}")]
    Permanent(String),
    /// Credentials rejected; aborts the whole run.
    #[error("auth: {0}")]
    Auth(String),
}

/// Request body POSTed to the judge endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub prompt_id: String,
    pub prompt: String,
    pub image_ref: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

/// Response body expected from the judge endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeReply {
    pub text: String,
}

pub trait JudgeTransport: Send + Sync {
    fn send(
        &self,
        item: &JudgeItem<'_>,
        request: &JudgeRequest,
    ) -> Result<JudgeReply, TransportError>;
}

/// Answers with [`mock_judge`] output; never fails.
#[derive(Debug, Clone)]
pub struct MockTransport {
    pub rubric: MockRubric,
}

impl JudgeTransport for MockTransport {
    fn send(
        &self,
        item: &JudgeItem<'_>,
        _request: &JudgeRequest,
    ) -> Result<JudgeReply, TransportError> {
        Ok(JudgeReply {
            text: mock_judge(item.sample, item.completions, &self.rubric),
        })
    }
}

/// JSON-over-HTTP(S) transport with bearer authentication.
pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    token: String,
}

impl HttpTransport {
    /// Reads the token from the configured environment variable.
    pub fn from_env(cfg: &JudgeClientConfig) -> Result<Self, AnnotatorError> {
        let token = std::env::var(&cfg.api_key_env).map_err(|_| {
            AnnotatorError::Auth(format!(
                "environment variable {} is not set",
                cfg.api_key_env
            ))
        })?;
        Ok(Self::new(cfg, token))
    }

    pub fn new(cfg: &JudgeClientConfig, token: String) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build();
        Self {
            agent,
            endpoint: cfg.endpoint.clone(),
            token,
        }
    }
}

pub(crate) fn classify_status(code: u16, body: String) -> TransportError {
    match code {
        401 | 403 => TransportError::Auth(format!("HTTP {code}: {body}")),
        408 | 429 | 500..=599 => TransportError::Transient(format!("HTTP {code}: {body}")),
        _ => TransportError::Permanent(format!("HTTP {code}: {body}")),
    }
}

impl JudgeTransport for HttpTransport {
    fn send(
        &self,
        _item: &JudgeItem<'_>,
        request: &JudgeRequest,
    ) -> Result<JudgeReply, TransportError> {
        let resp = self
            .agent
            .post(&self.endpoint)
            .set("Authorization", &format!("Bearer {}", self.token))
            .send_json(request);
        match resp {
            Ok(r) => r
                .into_json::<JudgeReply>()
                .map_err(|e| TransportError::Permanent(format!("bad response body: {e}"))),
            Err(ureq::Error::Status(code, r)) => {
                Err(classify_status(code, r.into_string().unwrap_or_default()))
            }
            Err(ureq::Error::Transport(t)) => Err(TransportError::Transient(t.to_string())),
        }
    }
}

/// Time source for the limiter and backoff; swapped for a fake in tests.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

pub struct SystemClock {
    start: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self {
            start: Instant::now(),
        }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.start.elapsed()
    }
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }
}

/// Virtual clock: `sleep` advances time instantly. Records every sleep.
#[derive(Default)]
pub struct FakeClock {
    state: Mutex<(Duration, Vec<Duration>)>,
}

impl FakeClock {
    pub fn advance(&self, d: Duration) {
        self.state.lock().unwrap().0 += d;
    }
    pub fn sleeps(&self) -> Vec<Duration> {
        self.state.lock().unwrap().1.clone()
    }
}

impl Clock for FakeClock {
    fn now(&self) -> Duration {
        self.state.lock().unwrap().0
    }
    fn sleep(&self, d: Duration) {
        let mut s = self.state.lock().unwrap();
        s.0 += d;
        s.1.push(d);
    }
}

/// Sliding 60-second window: at most `per_minute` acquisitions in any window.
pub struct RateLimiter {
    per_minute: usize,
    window: Duration,
    issued: Mutex<VecDeque<Duration>>,
    clock: Arc<dyn Clock>,
}

impl RateLimiter {
    pub fn new(per_minute: u32, clock: Arc<dyn Clock>) -> Self {
        Self {
            per_minute: per_minute.max(1) as usize,
            window: Duration::from_secs(60),
            issued: Mutex::new(VecDeque::new()),
            clock,
        }
    }

    /// Blocks until a request may be issued, then records it.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut q = self.issued.lock().unwrap();
                let now = self.clock.now();
                while q.front().is_some_and(|&t| t + self.window <= now) {
                    q.pop_front();
                }
                if q.len() < self.per_minute {
                    q.push_back(now);
                    return;
                }
                *q.front().unwrap() + self.window - now
            };
            self.clock.sleep(wait);
        }
    }
}

/// Transport wrapped with rate limiting and exponential-backoff retries.
pub struct JudgeClient {
    pub config: JudgeClientConfig,
    transport: Arc<dyn JudgeTransport>,
    limiter: RateLimiter,
    clock: Arc<dyn Clock>,
}

impl JudgeClient {
    pub fn new(
        config: JudgeClientConfig,
        transport: Arc<dyn JudgeTransport>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, AnnotatorError> {
        config.validate()?;
        Ok(Self {
            limiter: RateLimiter::new(config.requests_per_minute, clock.clone()),
            config,
            transport,
            clock,
        })
    }

    pub fn with_system_clock(
        config: JudgeClientConfig,
        transport: Arc<dyn JudgeTransport>,
    ) -> Result<Self, AnnotatorError> {
        Self::new(config, transport, Arc::new(SystemClock::default()))
    }

    /// Offline client backed by the mock judge; limits are effectively off.
    pub fn mock(rubric: MockRubric) -> Self {
        let config = JudgeClientConfig {
            requests_per_minute: u32::MAX,
            backoff_base_ms: 0,
            ..Default::default()
        };
        Self::with_system_clock(config, Arc::new(MockTransport { rubric }))
            .expect("valid mock config")
    }

    /// Sends one request, retrying transient failures up to `max_retries` times.
    pub fn call(
        &self,
        item: &JudgeItem<'_>,
        request: &JudgeRequest,
    ) -> Result<JudgeReply, TransportError> {
        let mut attempt = 0;
        loop {
            self.limiter.acquire();
            match self.transport.send(item, request) {
                Ok(r) => return Ok(r),
                Err(TransportError::Transient(msg)) if attempt < self.config.max_retries => {
                    log::debug!(
                        "retrying {} after transient error: {msg}",
                        request.prompt_id
                    );
                    self.clock.sleep(self.config.backoff(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{CompletionSet, PromptSample, Source};
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Flaky {
        failures: usize,
        calls: AtomicUsize,
        error: TransportError,
    }

    impl JudgeTransport for Flaky {
        fn send(&self, _: &JudgeItem<'_>, _: &JudgeRequest) -> Result<JudgeReply, TransportError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(self.error.clone())
            } else {
                Ok(JudgeReply { text: "ok".into() })
            }
        }
    }

    fn fixture() -> (PromptSample, CompletionSet) {
        let s = PromptSample {
            id: "p".into(),
            image_ref: None,
            question: "q?".into(),
            source: Source::Synthetic,
        };
        let c = CompletionSet {
            prompt_id: "p".into(),
            completions: vec!["a".into()],
            sampler_temperature: 0.7,
            sampler_seed: 0,
        };
        (s, c)
    }

    fn request() -> JudgeRequest {
        JudgeRequest {
            prompt_id: "p".into(),
            prompt: "x".into(),
            image_ref: None,
            model: None,
            temperature: None,
        }
    }

    #[test]
    fn transient_failures_are_retried_with_backoff() {
        let clock = Arc::new(FakeClock::default());
        let cfg = JudgeClientConfig {
            max_retries: 4,
            backoff_base_ms: 100,
            requests_per_minute: 1000,
            ..Default::default()
        };
        let t = Arc::new(Flaky {
            failures: 3,
            calls: AtomicUsize::new(0),
            error: TransportError::Transient("503".into()),
        });
        let client = JudgeClient::new(cfg, t.clone(), clock.clone()).unwrap();
        let (s, c) = fixture();
        let item = JudgeItem {
            sample: &s,
            completions: &c,
        };
        assert!(client.call(&item, &request()).is_ok());
        assert_eq!(t.calls.load(Ordering::SeqCst), 4);
        assert_eq!(
            clock.sleeps(),
            vec![
                Duration::from_millis(100),
                Duration::from_millis(200),
                Duration::from_millis(400)
            ]
        );
    }

    #[test]
    fn retries_are_bounded_and_permanent_errors_are_not_retried() {
        let clock = Arc::new(FakeClock::default());
        let cfg = JudgeClientConfig {
            max_retries: 2,
            backoff_base_ms: 1,
            ..Default::default()
        };
        let (s, c) = fixture();
        let item = JudgeItem {
            sample: &s,
            completions: &c,
        };
        let t = Arc::new(Flaky {
            failures: 10,
            calls: AtomicUsize::new(0),
            error: TransportError::Transient("timeout".into()),
        });
        let client = JudgeClient::new(cfg.clone(), t.clone(), clock.clone()).unwrap();
        assert!(matches!(
            client.call(&item, &request()),
            Err(TransportError::Transient(_))
        ));
        assert_eq!(t.calls.load(Ordering::SeqCst), 3);

        let t = Arc::new(Flaky {
            failures: 10,
            calls: AtomicUsize::new(0),
            error: TransportError::Permanent("400".into()),
        });
        let client = JudgeClient::new(cfg, t.clone(), clock).unwrap();
        assert!(client.call(&item, &request()).is_err());
        assert_eq!(t.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn limiter_respects_window() {
        let clock = Arc::new(FakeClock::default());
        let limiter = RateLimiter::new(7, clock.clone());
        let mut times = Vec::new();
        for i in 0..40 {
            limiter.acquire();
            times.push(clock.now());
            clock.advance(Duration::from_millis(1300 * (i % 3)));
        }
        for (i, &t) in times.iter().enumerate() {
            let in_window = times[i..]
                .iter()
                .take_while(|&&u| u < t + Duration::from_secs(60))
                .count();
            assert!(in_window <= 7, "{in_window} requests within 60s of {t:?}");
        }
        // Burst of 7 is allowed immediately.
        assert_eq!(times[6], times[0] + Duration::from_millis(1300 * 6));
    }

    #[test]
    fn status_classification() {
        assert!(matches!(
            classify_status(401, String::new()),
            TransportError::Auth(_)
        ));
        assert!(matches!(
            classify_status(429, String::new()),
            TransportError::Transient(_)
        ));
        assert!(matches!(
            classify_status(503, String::new()),
            TransportError::Transient(_)
        ));
        assert!(matches!(
            classify_status(404, String::new()),
            TransportError::Permanent(_)
        ));
    }

    #[test]
    fn zero_rate_is_rejected() {
        let cfg = JudgeClientConfig {
            requests_per_minute: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
