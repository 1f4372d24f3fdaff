use std::path::Path;

use serde::Deserialize;

use jotrecon::harness::{ExperimentKind, ExperimentSpec};
use jotrecon::Error;

use crate::{EvaluateArgs, ReconstructArgs, SimulateArgs, TrainDictArgs, TrainNetArgs};

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub simulate: SimulateArgs,
    pub reconstruct: ReconstructArgs,
    pub train_dict: TrainDictArgs,
    pub train_net: TrainNetArgs,
    pub evaluate: EvaluateArgs,
    /// Partial experiment spec layered over the chosen preset.
    pub experiment: Option<toml::Table>,
}

pub fn load(path: Option<&Path>) -> Result<ConfigFile, Error> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

/// Fills every `None` field of `$args` from `$cfg`.
macro_rules! fill {
    ($args:ident, $cfg:ident; $($field:ident),* $(,)?) => {
        $(
            if $args.$field.is_none() {
                $args.$field = $cfg.$field.take();
            }
        )*
    };
}
pub(crate) use fill;

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// The preset for `kind` with the config table's keys replacing its own.
pub fn experiment_spec(kind: ExperimentKind, table: Option<toml::Table>) -> Result<ExperimentSpec, Error> {
    let preset = ExperimentSpec::preset(kind);
    let Some(table) = table else {
        return Ok(preset);
    };
    let mut base: toml::Table = toml::from_str(&preset.to_toml()?)
        .map_err(|e| Error::InvalidArgument(format!("experiment preset: {e}")))?;
    merge(&mut base, table);
    ExperimentSpec::from_toml(&toml::to_string(&base).map_err(|e| Error::InvalidArgument(e.to_string()))?)
}
