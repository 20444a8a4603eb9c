use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use super::{ChatBackend, HttpBackend, HttpConfig, ReplayBackend, ScriptedBackend};
use crate::error::BackendError;

/// Builds a backend from the argument part of a `kind:argument` spec.
pub type BackendFactory = fn(&str) -> Result<Arc<dyn ChatBackend>, BackendError>;

/// Backend implementations registered by kind name.
#[derive(Clone)]
pub struct BackendRegistry {
    factories: BTreeMap<String, BackendFactory>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        Self::with_builtin()
    }
}

impl BackendRegistry {
    pub fn empty() -> Self {
        Self { factories: BTreeMap::new() }
    }

    /// `scripted:PATH`, `replay:PATH`, `http:MODEL` and `constant:TEXT`.
    pub fn with_builtin() -> Self {
        let mut reg = Self::empty();
        reg.register("scripted", |arg| Ok(Arc::new(ScriptedBackend::load(Path::new(arg))?)));
        reg.register("replay", |arg| Ok(Arc::new(ReplayBackend::load(Path::new(arg))?)));
        reg.register("http", |model| {
            let mut cfg = HttpConfig::from_env()?;
            cfg.model = Some(model.to_string()).filter(|m| !m.is_empty());
            Ok(Arc::new(HttpBackend::new(cfg)))
        });
        reg.register("constant", |text| Ok(Arc::new(ScriptedBackend::constant(text))));
        reg
    }

    pub fn register(&mut self, kind: &str, factory: BackendFactory) {
        self.factories.insert(kind.to_string(), factory);
    }

    pub fn kinds(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    /// Splits a spec into `(kind, argument)`.
    pub fn parse_spec(spec: &str) -> Result<(&str, &str), BackendError> {
        spec.split_once(':')
            .filter(|(k, _)| !k.is_empty())
            .ok_or_else(|| BackendError::Config(format!("backend spec {spec:?} is not of the form kind:argument")))
    }

    pub fn build(&self, spec: &str) -> Result<Arc<dyn ChatBackend>, BackendError> {
        let (kind, arg) = Self::parse_spec(spec)?;
        let factory = self.factories.get(kind).ok_or_else(|| {
            BackendError::Config(format!(
                "unknown backend kind {kind:?}; known: {}",
                self.kinds().collect::<Vec<_>>().join(", ")
            ))
        })?;
        factory(arg)
    }
}
