use std::time::Duration;

use serde_json::Value;
use ureq::Agent;

use super::{Backend, BackendError, Endpoints, Role};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

/// Live backend: `POST {base}/v1/<role>` with an optional bearer token.
pub struct HttpBackend {
    agent: Agent,
    endpoints: Endpoints,
}

impl HttpBackend {
    pub fn new(endpoints: Endpoints, timeout: Duration) -> Self {
        let agent: Agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent, endpoints }
    }

    pub fn url(&self, role: Role) -> String {
        format!("{}/v1/{}", self.endpoints.base(role).trim_end_matches('/'), role.path())
    }
}

impl Backend for HttpBackend {
    fn call(&self, role: Role, request: &Value) -> Result<Value, BackendError> {
        let body = serde_json::to_string(request).map_err(|e| BackendError::Malformed(e.to_string()))?;
        let mut req = self
            .agent
            .post(&self.url(role))
            .header("content-type", "application/json");
        if let Some(token) = &self.endpoints.token {
            req = req.header("authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send(body).map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .with_config()
            .limit(64 * 1024 * 1024)
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status { status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn urls_per_role() {
        let e = Endpoints {
            parser: "http://h:1/".into(),
            embedder: "http://h:2".into(),
            segmenter: "http://h:3".into(),
            pointer: "http://h:4".into(),
            reasoner: "http://h:5".into(),
            token: None,
        };
        let b = HttpBackend::new(e, DEFAULT_TIMEOUT);
        assert_eq!(b.url(Role::Parser), "http://h:1/v1/parser");
        assert_eq!(b.url(Role::Pointer), "http://h:4/v1/vlm");
        assert_eq!(b.url(Role::Reasoner), "http://h:5/v1/vlm");
    }
}
