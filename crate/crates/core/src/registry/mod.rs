//! Named constructors for the five plugin kinds, plus named architectures.
//!
//! Each namespace maps a name to a constructor and the config keys it declares.
//! Built-in components go through the same `register` call as user plugins.

pub mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

pub use config::{parse_config_text, read_config_file, Config, Entry, KeySpec, Provenance, Value};

use crate::criterions::Criterion;
use crate::error::{Error, Result};
use crate::lr_scheduler::LrScheduler;
use crate::model::Model;
use crate::optim::Optimizer;
use crate::task::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Namespace {
    Model,
    Criterion,
    Task,
    Optimizer,
    Scheduler,
}

impl Namespace {
    pub fn name(self) -> &'static str {
        match self {
            Namespace::Model => "model",
            Namespace::Criterion => "criterion",
            Namespace::Task => "task",
            Namespace::Optimizer => "optimizer",
            Namespace::Scheduler => "scheduler",
        }
    }
}

impl fmt::Display for Namespace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Inputs a constructor may depend on besides its config.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BuildContext {
    pub seed: u64,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

pub type Constructor<T> = Arc<dyn Fn(&Config, &BuildContext) -> Result<T> + Send + Sync>;

pub struct Plugin<T> {
    /// Who registered it; reported on conflicts.
    pub registrant: String,
    pub keys: Vec<KeySpec>,
    pub ctor: Constructor<T>,
}

impl<T> Plugin<T> {
    pub fn new<F>(registrant: &str, keys: Vec<KeySpec>, ctor: F) -> Self
    where
        F: Fn(&Config, &BuildContext) -> Result<T> + Send + Sync + 'static,
    {
        Self {
            registrant: registrant.to_string(),
            keys,
            ctor: Arc::new(ctor),
        }
    }
}

impl<T> Clone for Plugin<T> {
    fn clone(&self) -> Self {
        Self {
            registrant: self.registrant.clone(),
            keys: self.keys.clone(),
            ctor: Arc::clone(&self.ctor),
        }
    }
}

pub struct Table<T> {
    entries: BTreeMap<String, Plugin<T>>,
}

impl<T> Default for Table<T> {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }
}

/// Selects one namespace of a [`Registry`] at the type level.
pub trait Kind {
    type Product;
    const NAMESPACE: Namespace;
    fn table(registry: &Registry) -> &Table<Self::Product>;
    fn table_mut(registry: &mut Registry) -> &mut Table<Self::Product>;
}

macro_rules! kind {
    ($marker:ident, $product:ty, $ns:expr, $field:ident) => {
        pub struct $marker;

        impl Kind for $marker {
            type Product = $product;
            const NAMESPACE: Namespace = $ns;
            fn table(registry: &Registry) -> &Table<Self::Product> {
                &registry.$field
            }
            fn table_mut(registry: &mut Registry) -> &mut Table<Self::Product> {
                &mut registry.$field
            }
        }
    };
}

kind!(Models, Box<dyn Model>, Namespace::Model, models);
kind!(Criterions, Box<dyn Criterion>, Namespace::Criterion, criterions);
kind!(Tasks, Box<dyn Task>, Namespace::Task, tasks);
kind!(Optimizers, Box<dyn Optimizer>, Namespace::Optimizer, optimizers);
kind!(Schedulers, Box<dyn LrScheduler>, Namespace::Scheduler, schedulers);

/// A preset of model hyperparameters on top of a registered model.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureDef {
    pub name: String,
    pub base_model: String,
    pub overrides: Vec<(String, Value)>,
    pub registrant: String,
}

#[derive(Default)]
pub struct Registry {
    models: Table<Box<dyn Model>>,
    criterions: Table<Box<dyn Criterion>>,
    tasks: Table<Box<dyn Task>>,
    optimizers: Table<Box<dyn Optimizer>>,
    schedulers: Table<Box<dyn LrScheduler>>,
    architectures: BTreeMap<String, ArchitectureDef>,
    frozen: bool,
}

impl Registry {
    /// An empty registry.
    pub fn new() -> Self {
        Self::default()
    }

    /// A registry holding every built-in component, still open for user plugins.
    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        crate::model::register_builtins(&mut r).expect("built-in models register cleanly");
        crate::criterions::register_builtins(&mut r).expect("built-in criterions register cleanly");
        crate::optim::register_builtins(&mut r).expect("built-in optimizers register cleanly");
        crate::lr_scheduler::register_builtins(&mut r).expect("built-in schedulers register cleanly");
        crate::task::register_builtins(&mut r).expect("built-in tasks register cleanly");
        r
    }

    /// Ends the registration phase; later registrations fail.
    pub fn freeze(mut self) -> Arc<Registry> {
        self.frozen = true;
        Arc::new(self)
    }

    fn check_open(&self, name: &str) -> Result<()> {
        if self.frozen {
            return Err(Error::Invalid(format!("registry is frozen; cannot register '{name}'")));
        }
        if name.is_empty() {
            return Err(Error::Invalid("plugin name must be non-empty".into()));
        }
        Ok(())
    }

    fn existing_model_name(&self, name: &str) -> Option<String> {
        self.models
            .entries
            .get(name)
            .map(|p| p.registrant.clone())
            .or_else(|| self.architectures.get(name).map(|a| a.registrant.clone()))
    }

    pub fn register<K: Kind>(&mut self, name: &str, plugin: Plugin<K::Product>) -> Result<()> {
        self.check_open(name)?;
        let existing = if K::NAMESPACE == Namespace::Model {
            self.existing_model_name(name)
        } else {
            K::table(self).entries.get(name).map(|p| p.registrant.clone())
        };
        if let Some(existing) = existing {
            return Err(Error::RegistrationConflict {
                namespace: K::NAMESPACE,
                name: name.to_string(),
                existing,
                incoming: plugin.registrant,
            });
        }
        K::table_mut(self).entries.insert(name.to_string(), plugin);
        Ok(())
    }

    /// Architectures share the model namespace.
    pub fn register_architecture(&mut self, def: ArchitectureDef) -> Result<()> {
        self.check_open(&def.name)?;
        if let Some(existing) = self.existing_model_name(&def.name) {
            return Err(Error::RegistrationConflict {
                namespace: Namespace::Model,
                name: def.name.clone(),
                existing,
                incoming: def.registrant,
            });
        }
        let base = self.lookup::<Models>(&def.base_model)?;
        for (key, value) in &def.overrides {
            let spec = base
                .keys
                .iter()
                .find(|k| &k.key == key)
                .ok_or_else(|| Error::UnknownKey(key.clone()))?;
            if std::mem::discriminant(&spec.default) != std::mem::discriminant(value) {
                return Err(Error::ConfigValue {
                    key: key.clone(),
                    message: format!("expected {}, got {}", spec.default.type_name(), value.type_name()),
                });
            }
        }
        self.architectures.insert(def.name.clone(), def);
        Ok(())
    }

    fn lookup<K: Kind>(&self, name: &str) -> Result<&Plugin<K::Product>> {
        K::table(self).entries.get(name).ok_or_else(|| Error::Lookup {
            namespace: K::NAMESPACE,
            name: name.to_string(),
            available: self.names::<K>(),
        })
    }

    /// Registered names in sorted order (architectures included for models).
    pub fn names<K: Kind>(&self) -> Vec<String> {
        let mut names: Vec<String> = K::table(self).entries.keys().cloned().collect();
        if K::NAMESPACE == Namespace::Model {
            names.extend(self.architectures.keys().cloned());
            names.sort();
        }
        names
    }

    pub fn contains<K: Kind>(&self, name: &str) -> bool {
        K::table(self).entries.contains_key(name)
            || (K::NAMESPACE == Namespace::Model && self.architectures.contains_key(name))
    }

    pub fn architecture(&self, name: &str) -> Option<&ArchitectureDef> {
        self.architectures.get(name)
    }

    /// Base model name and architecture overrides for a model or architecture name.
    fn model_target(&self, name: &str) -> Result<(&str, &[(String, Value)])> {
        if let Some(arch) = self.architectures.get(name) {
            return Ok((&arch.base_model, &arch.overrides));
        }
        if self.models.entries.contains_key(name) {
            let (k, _) = self.models.entries.get_key_value(name).expect("checked");
            return Ok((k, &[]));
        }
        Err(Error::Lookup {
            namespace: Namespace::Model,
            name: name.to_string(),
            available: self.names::<Models>(),
        })
    }

    /// Declared keys of a component; for models, an architecture resolves to its base.
    pub fn keys<K: Kind>(&self, name: &str) -> Result<Vec<KeySpec>> {
        if K::NAMESPACE == Namespace::Model {
            let (base, _) = self.model_target(name)?;
            return Ok(self.models.entries[base].keys.clone());
        }
        Ok(self.lookup::<K>(name)?.keys.clone())
    }

    /// Architecture overrides applying to model `name` (empty for plain models).
    pub fn architecture_overrides(&self, name: &str) -> Result<Vec<(String, Value)>> {
        Ok(self.model_target(name)?.1.to_vec())
    }

    /// Defaults, then architecture overrides, then user values.
    pub fn resolve_architecture(&self, arch: &str, user: &[(String, String)]) -> Result<Config> {
        let mut config = Config::from_schema(&self.keys::<Models>(arch)?);
        for (k, v) in self.architecture_overrides(arch)? {
            config.set(&k, v, Provenance::Architecture)?;
        }
        for (k, raw) in user {
            config.set_raw(k, raw, Provenance::User)?;
        }
        Ok(config)
    }

    pub fn instantiate<K: Kind>(&self, name: &str, config: &Config, ctx: &BuildContext) -> Result<K::Product> {
        let plugin = if K::NAMESPACE == Namespace::Model {
            let (base, _) = self.model_target(name)?;
            self.lookup::<K>(base)?
        } else {
            self.lookup::<K>(name)?
        };
        let mut scoped = Config::from_schema(&plugin.keys);
        for spec in &plugin.keys {
            let entry = config.entry(&spec.key).ok_or_else(|| Error::Construction {
                component: format!("{} '{name}'", K::NAMESPACE),
                message: format!("config has no value for declared key '{}'", spec.key),
            })?;
            scoped.set(&spec.key, entry.value.clone(), entry.provenance)?;
        }
        (plugin.ctor)(&scoped, ctx).map_err(|e| match e {
            e @ (Error::Construction { .. } | Error::Io { .. }) => e,
            other => Error::Construction {
                component: format!("{} '{name}'", K::NAMESPACE),
                message: other.to_string(),
            },
        })
    }
}

/// Merges key schemas; a key declared twice must agree on its default.
pub fn merge_schemas<'a>(schemas: impl IntoIterator<Item = &'a [KeySpec]>) -> Result<Vec<KeySpec>> {
    let mut merged: BTreeMap<String, KeySpec> = BTreeMap::new();
    for schema in schemas {
        for spec in schema {
            match merged.get(&spec.key) {
                Some(prev) if prev.default != spec.default => {
                    return Err(Error::ConfigValue {
                        key: spec.key.clone(),
                        message: format!(
                            "declared twice with different defaults ({} vs {})",
                            prev.default, spec.default
                        ),
                    })
                }
                Some(_) => {}
                None => {
                    merged.insert(spec.key.clone(), spec.clone());
                }
            }
        }
    }
    Ok(merged.into_values().collect())
}
