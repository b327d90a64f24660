//! Text-completion client used for claim generation, label double-checks
//! and the quality critic.
//!
//! Live mode sends `{"prompt": ...}` over a [`Transport`] and expects
//! `{"text": ...}` back. Scripted mode replays recorded responses keyed by
//! the SHA-256 of the prompt, one JSON object per line:
//! `{"prompt_sha256": "<hex>", "response": "<text>"}`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::transport::Transport;

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub prompt_sha256: String,
    pub response: String,
}

/// Recorded prompt → response pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Script {
    responses: BTreeMap<String, String>,
}

impl Script {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, prompt: &str, response: impl Into<String>) {
        self.responses.insert(prompt_hash(prompt), response.into());
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn lookup(&self, prompt: &str) -> Option<&str> {
        self.responses.get(&prompt_hash(prompt)).map(String::as_str)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let mut responses = BTreeMap::new();
        for (n, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: ScriptEntry = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
            responses.insert(e.prompt_sha256, e.response);
        }
        Ok(Self { responses })
    }

    /// Sorted by hash so the file is byte-stable.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (k, v) in &self.responses {
            out.push_str(&serde_json::to_string(&ScriptEntry { prompt_sha256: k.clone(), response: v.clone() })?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum LlmMode {
    Live(Arc<Transport>),
    Scripted(Arc<Script>),
}

#[derive(Debug, Clone)]
pub struct LlmClient {
    pub mode: LlmMode,
    /// Extra attempts after a failed live call.
    pub max_retries: u32,
}

impl LlmClient {
    pub fn live(transport: Arc<Transport>, max_retries: u32) -> Self {
        Self { mode: LlmMode::Live(transport), max_retries }
    }

    pub fn scripted(script: Script) -> Self {
        Self { mode: LlmMode::Scripted(Arc::new(script)), max_retries: 0 }
    }

    pub fn complete(&self, prompt: &str) -> Result<String> {
        match &self.mode {
            LlmMode::Scripted(script) => script.lookup(prompt).map(str::to_owned).ok_or_else(|| {
                Error::Transport(format!("scripted client has no response for prompt {}", prompt_hash(prompt)))
            }),
            LlmMode::Live(transport) => {
                let mut last = None;
                for _ in 0..=self.max_retries {
                    match transport.request(&json!({ "prompt": prompt })) {
                        Ok(reply) => {
                            return reply.get("text").and_then(|t| t.as_str()).map(str::to_owned).ok_or_else(|| {
                                Error::Transport(format!("completion reply lacks a `text` string: {reply}"))
                            })
                        }
                        Err(e) => last = Some(e),
                    }
                }
                Err(last.expect("at least one attempt"))
            }
        }
    }
}
