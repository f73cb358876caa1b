//! Name-keyed registries for runtime-selectable strategies.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};

/// A named collection of strategy objects.
///
/// Lookups of unknown names fail with an error listing every registered name,
/// so configuration typos surface immediately.
pub struct Registry<S: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<&'static str, Arc<S>>,
}

impl<S: ?Sized> Registry<S> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    /// Register a strategy under `name`. Registering the same name twice is an
    /// error.
    pub fn register(&mut self, name: &'static str, strategy: Arc<S>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Invalid(format!(
                "{} `{name}` is already registered",
                self.kind
            )));
        }
        self.entries.insert(name, strategy);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Arc<S>> {
        self.entries.get(name).cloned().ok_or_else(|| Error::Unknown {
            kind: self.kind,
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}
