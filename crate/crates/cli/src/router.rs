use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use elegant::backends::{BackendConfig, BackendExchange, BackendMode, HttpTransport, MockTransport, Role, Transport};
use elegant::{Error, Result};
use serde_json::Value;

/// Sends each role to its live endpoint or, failing that, to the fixture set.
pub struct Router {
    live: Option<HttpTransport>,
    mock: Option<MockTransport>,
    live_roles: Vec<Role>,
}

impl Router {
    pub fn new(backends: &BTreeMap<Role, BackendConfig>, fixtures: Option<&Path>) -> Result<Self> {
        let live_roles: Vec<Role> = backends
            .iter()
            .filter(|(_, c)| c.mode == BackendMode::Live)
            .map(|(r, _)| *r)
            .collect();
        let live = if live_roles.is_empty() {
            None
        } else {
            let configs: HashMap<Role, BackendConfig> = backends.iter().map(|(r, c)| (*r, c.clone())).collect();
            Some(HttpTransport::new(&configs)?)
        };
        let mock = fixtures.map(MockTransport::from_file).transpose()?;
        Ok(Router { live, mock, live_roles })
    }

    pub fn into_arc(self) -> Arc<dyn Transport> {
        Arc::new(self)
    }
}

impl Transport for Router {
    fn call(&self, role: Role, request: &Value) -> Result<BackendExchange> {
        if self.live_roles.contains(&role) {
            if let Some(live) = &self.live {
                return live.call(role, request);
            }
        }
        match &self.mock {
            Some(mock) => mock.call(role, request),
            None => Err(Error::Backend {
                role,
                attempts: 0,
                message: format!("no backend configured; set --backend-{role}-url or --mock-fixtures"),
            }),
        }
    }
}
