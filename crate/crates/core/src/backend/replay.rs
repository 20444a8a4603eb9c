use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatRequest, ChatResponse};
use crate::error::BackendError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub request: ChatRequest,
    pub response: ChatResponse,
}

/// Map from request digest to the recorded exchange.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Cassette {
    pub entries: BTreeMap<String, CassetteEntry>,
}

impl Cassette {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| BackendError::Config(format!("bad cassette {}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cassette serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A cassette shared between several recording backends.
#[derive(Debug, Clone, Default)]
pub struct SharedCassette(Arc<Mutex<Cassette>>);

impl SharedCassette {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts from previously recorded exchanges.
    pub fn from_cassette(cassette: Cassette) -> Self {
        Self(Arc::new(Mutex::new(cassette)))
    }

    pub fn snapshot(&self) -> Cassette {
        self.0.lock().expect("cassette lock").clone()
    }

    fn insert(&self, digest: String, entry: CassetteEntry) {
        self.0.lock().expect("cassette lock").entries.insert(digest, entry);
    }
}

/// Serves responses from a cassette; never touches the network.
pub struct ReplayBackend {
    id: String,
    cassette: Cassette,
}

impl ReplayBackend {
    pub fn new(id: impl Into<String>, cassette: Cassette) -> Self {
        Self { id: id.into(), cassette }
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        Ok(Self::new(format!("replay:{}", path.display()), Cassette::load(path)?))
    }
}

impl ChatBackend for ReplayBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        req.validate()?;
        let digest = req.digest();
        self.cassette
            .entries
            .get(&digest)
            .map(|e| e.response.clone())
            .ok_or(BackendError::CacheMiss { digest })
    }
}

/// Forwards to an inner backend and records every successful exchange.
pub struct RecordingBackend {
    inner: Arc<dyn ChatBackend>,
    cassette: SharedCassette,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn ChatBackend>, cassette: SharedCassette) -> Self {
        Self { inner, cassette }
    }
}

impl ChatBackend for RecordingBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let response = self.inner.complete(req)?;
        self.cassette.insert(
            req.digest(),
            CassetteEntry { request: req.clone(), response: response.clone() },
        );
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{SamplingParams, ScriptedBackend};
    use crate::domain::ChatMessage;

    fn req(text: &str, seed: i64) -> ChatRequest {
        ChatRequest::new(vec![ChatMessage::user(text)], &SamplingParams::default(), Some(seed))
    }

    #[test]
    fn replay_miss_is_reported() {
        let b = ReplayBackend::new("r", Cassette::default());
        match b.complete(&req("hi", 0)) {
            Err(BackendError::CacheMiss { digest }) => assert_eq!(digest, req("hi", 0).digest()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn recorded_session_replays_identically() {
        let tape = SharedCassette::new();
        let rec = RecordingBackend::new(Arc::new(ScriptedBackend::constant("ok")), tape.clone());
        let live: Vec<ChatResponse> = (0..3).map(|s| rec.complete(&req("q", s)).unwrap()).collect();
        let json = tape.snapshot().to_json();
        let reloaded: Cassette = serde_json::from_str(&json).unwrap();
        assert_eq!(reloaded.len(), 3);
        let replay = ReplayBackend::new("r", reloaded);
        for (s, expected) in live.iter().enumerate() {
            assert_eq!(&replay.complete(&req("q", s as i64)).unwrap(), expected);
        }
        assert!(replay.complete(&req("other", 0)).is_err());
    }
}
