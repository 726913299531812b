use std::collections::HashMap;
use std::time::{Duration, Instant};

use serde_json::Value;
use tracing::{debug, warn};

use super::{BackendConfig, BackendExchange, BackendMode, Role, Transport};
use crate::error::{Error, Result};

struct Endpoint {
    url: String,
    token: Option<String>,
    max_retries: u32,
    agent: ureq::Agent,
}

enum Failure {
    /// Worth retrying: connection trouble, timeouts, 5xx.
    Transient {
        timeout: bool,
        message: String,
    },
    Fatal(Error),
}

/// Live transport: one endpoint per role, JSON over HTTP POST.
pub struct HttpTransport {
    endpoints: HashMap<Role, Endpoint>,
    backoff: Duration,
}

impl HttpTransport {
    /// Build from per-role configs; roles not in live mode are left out.
    pub fn new(configs: &HashMap<Role, BackendConfig>) -> Result<Self> {
        let mut endpoints = HashMap::new();
        for (&role, cfg) in configs {
            cfg.validate()?;
            if cfg.mode != BackendMode::Live {
                continue;
            }
            let base = cfg.endpoint.as_deref().expect("validated live endpoint");
            let agent: ureq::Agent = ureq::Agent::config_builder()
                .timeout_global(Some(cfg.timeout()))
                .http_status_as_error(false)
                .build()
                .into();
            endpoints.insert(
                role,
                Endpoint {
                    url: format!("{}{}", base.trim_end_matches('/'), role.endpoint_path()),
                    token: cfg.token.clone(),
                    max_retries: cfg.max_retries,
                    agent,
                },
            );
        }
        Ok(HttpTransport {
            endpoints,
            backoff: Duration::from_millis(200),
        })
    }

    /// Base delay before the first retry; doubled on every further attempt.
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn attempt(&self, role: Role, ep: &Endpoint, request: &Value) -> std::result::Result<Value, Failure> {
        let mut req = ep.agent.post(&ep.url);
        if let Some(token) = &ep.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = match req.send_json(request) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(t)) => {
                return Err(Failure::Transient {
                    timeout: true,
                    message: format!("timeout ({t})"),
                })
            }
            Err(e @ (ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound)) => {
                return Err(Failure::Transient {
                    timeout: false,
                    message: e.to_string(),
                })
            }
            Err(e) => {
                return Err(Failure::Fatal(Error::Backend {
                    role,
                    attempts: 1,
                    message: e.to_string(),
                }))
            }
        };
        let status = resp.status().as_u16();
        if status >= 500 {
            return Err(Failure::Transient {
                timeout: false,
                message: format!("HTTP {status}"),
            });
        }
        if status >= 400 {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Failure::Fatal(Error::Backend {
                role,
                attempts: 1,
                message: format!("HTTP {status}: {body}"),
            }));
        }
        match resp.body_mut().read_json::<Value>() {
            Ok(v) => Ok(v),
            Err(ureq::Error::Timeout(t)) => Err(Failure::Transient {
                timeout: true,
                message: format!("timeout ({t})"),
            }),
            Err(e) => Err(Failure::Fatal(Error::protocol(
                role,
                format!("response is not JSON: {e}"),
            ))),
        }
    }
}

impl Transport for HttpTransport {
    fn call(&self, role: Role, request: &Value) -> Result<BackendExchange> {
        let ep = self.endpoints.get(&role).ok_or_else(|| Error::Backend {
            role,
            attempts: 0,
            message: "no live endpoint configured".into(),
        })?;
        let started = Instant::now();
        let max_attempts = ep.max_retries + 1;
        let mut last_timeout = false;
        let mut last_message = String::new();
        for attempt in 1..=max_attempts {
            if attempt > 1 {
                let delay = self.backoff * 2u32.saturating_pow(attempt - 2);
                std::thread::sleep(delay);
            }
            match self.attempt(role, ep, request) {
                Ok(response) => {
                    debug!(%role, attempt, "backend call succeeded");
                    return Ok(BackendExchange {
                        role,
                        request: request.clone(),
                        response,
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempts: attempt,
                    });
                }
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Transient { timeout, message }) => {
                    warn!(%role, attempt, %message, "transient backend failure");
                    last_timeout = timeout;
                    last_message = message;
                }
            }
        }
        if last_timeout {
            Err(Error::Timeout {
                role,
                attempts: max_attempts,
            })
        } else {
            Err(Error::Backend {
                role,
                attempts: max_attempts,
                message: last_message,
            })
        }
    }
}
