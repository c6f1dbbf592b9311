use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Everything needed to rerun a command and get the same bytes back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    pub inputs: BTreeMap<String, String>,
    pub params: BTreeMap<String, Value>,
    pub tool_version: String,
    pub fingerprint: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String]) -> Self {
        Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            inputs: BTreeMap::new(),
            params: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            fingerprint: None,
        }
    }

    pub fn input(&mut self, name: &str, path: &str) -> &mut Self {
        self.inputs.insert(name.into(), path.into());
        self
    }

    pub fn param(&mut self, name: &str, value: impl Serialize) -> &mut Self {
        self.params.insert(name.into(), serde_json::to_value(value).expect("plain data"));
        self
    }
}

/// Pretty JSON with keys in sorted order.
pub fn canonical(value: &impl Serialize) -> String {
    let v = serde_json::to_value(value).expect("plain data");
    serde_json::to_string_pretty(&v).expect("plain data")
}
