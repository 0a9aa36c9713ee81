//! Config keys exposed as command-line flags.

use aim_core::config::{RunConfig, KEYS};
use clap::{Arg, ArgMatches, Command};

/// Namespace whose keys drop their prefix on the command line.
#[derive(Clone, Copy)]
pub struct Namespaces {
    pub primary: &'static str,
    pub secondary: &'static [&'static str],
}

impl Namespaces {
    fn covers(&self, key: &str) -> bool {
        let ns = key.split('.').next().unwrap_or("");
        ns == self.primary || self.secondary.contains(&ns)
    }

    /// Long flag for `key`: `train.batch_size` is `--batch-size` under the
    /// train namespace and `--train.batch-size` elsewhere.
    pub fn flag(&self, key: &str) -> String {
        let (ns, name) = key.split_once('.').expect("namespaced key");
        let name = name.replace('_', "-");
        if ns == self.primary {
            name
        } else {
            format!("{ns}.{name}")
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &'static (&'static str, &'static str)> + '_ {
        KEYS.iter().filter(|(k, _)| self.covers(k))
    }

    /// Adds one optional string flag per covered key, with its default in the help.
    pub fn augment(&self, mut cmd: Command, defaults: &RunConfig) -> Command {
        for &(key, desc) in self.keys() {
            let default = defaults.get(key).expect("registered key");
            cmd = cmd.arg(
                Arg::new(key)
                    .long(self.flag(key))
                    .value_name("VALUE")
                    .allow_negative_numbers(true)
                    .help(format!("{desc} [config: {key}] [default: {default}]"))
                    .help_heading("Config keys"),
            );
        }
        cmd
    }

    /// `defaults`, then the config file's keys, then flags; flags win.
    pub fn resolve(&self, mut cfg: RunConfig, file: Option<&str>, matches: &ArgMatches) -> anyhow::Result<RunConfig> {
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("cannot read config {path}: {e}"))?;
            for (k, v) in aim_core::config::parse_kv(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        for &(key, _) in self.keys() {
            if let Some(v) = matches.get_one::<String>(key) {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }
}

pub const DATASET: Namespaces = Namespaces { primary: "data", secondary: &[] };
pub const TRAIN: Namespaces = Namespaces { primary: "train", secondary: &["model"] };
pub const SAMPLE: Namespaces = Namespaces { primary: "sample", secondary: &[] };

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_are_unique_per_command() {
        for ns in [DATASET, TRAIN, SAMPLE] {
            let mut flags: Vec<String> = ns.keys().map(|(k, _)| ns.flag(k)).collect();
            let n = flags.len();
            flags.sort();
            flags.dedup();
            assert_eq!(flags.len(), n);
        }
        assert_eq!(TRAIN.flag("train.batch_size"), "batch-size");
        assert_eq!(TRAIN.flag("model.d_model"), "model.d-model");
        assert_eq!(SAMPLE.flag("sample.top_k"), "top-k");
    }
}
