//! Name-keyed registry of trait-object factories.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

type Factory<T, C> = Arc<dyn Fn(&C) -> Result<Box<T>, RegistryError> + Send + Sync>;

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("unknown {kind} `{name}` (available: {available})")]
    Unknown {
        kind: &'static str,
        name: String,
        available: String,
    },
    #[error("invalid configuration for {kind} `{name}`: {reason}")]
    Config {
        kind: &'static str,
        name: String,
        reason: String,
    },
}

impl RegistryError {
    pub fn config(kind: &'static str, name: &str, reason: impl Into<String>) -> Self {
        RegistryError::Config {
            kind,
            name: name.to_string(),
            reason: reason.into(),
        }
    }
}

/// Maps names (and aliases) to factories producing `Box<T>` from a config `C`.
pub struct Registry<T: ?Sized, C> {
    kind: &'static str,
    factories: BTreeMap<String, Factory<T, C>>,
    aliases: BTreeMap<String, String>,
}

impl<T: ?Sized, C> Registry<T, C> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            factories: BTreeMap::new(),
            aliases: BTreeMap::new(),
        }
    }

    /// Registers `factory` under `name`, replacing any earlier entry.
    pub fn register<F>(&mut self, name: &str, factory: F) -> &mut Self
    where
        F: Fn(&C) -> Result<Box<T>, RegistryError> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Arc::new(factory));
        self
    }

    pub fn alias(&mut self, alias: &str, target: &str) -> &mut Self {
        self.aliases.insert(alias.to_string(), target.to_string());
        self
    }

    /// Resolves an alias to its canonical name.
    pub fn canonical<'a>(&'a self, name: &'a str) -> Option<&'a str> {
        if self.factories.contains_key(name) {
            return Some(name);
        }
        self.aliases
            .get(name)
            .map(String::as_str)
            .filter(|target| self.factories.contains_key(*target))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.canonical(name).is_some()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn create(&self, name: &str, config: &C) -> Result<Box<T>, RegistryError> {
        let canonical = self.canonical(name).ok_or_else(|| RegistryError::Unknown {
            kind: self.kind,
            name: name.to_string(),
            available: self.names().collect::<Vec<_>>().join(", "),
        })?;
        (self.factories[canonical])(config)
    }
}

impl<T: ?Sized, C> fmt::Debug for Registry<T, C> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("kind", &self.kind)
            .field("names", &self.factories.keys().collect::<Vec<_>>())
            .field("aliases", &self.aliases)
            .finish()
    }
}
