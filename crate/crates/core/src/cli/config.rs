//! Flat `key = value` configuration files.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use blm::BlmError;

/// Keys accepted in configuration files.
pub const KNOWN_KEYS: &[&str] = &[
    "mode",
    "variant",
    "t_max",
    "min_count",
    "d_model",
    "layers",
    "heads",
    "d_ff",
    "head_hidden",
    "dropout",
    "tie_output",
    "init_seed",
    "learning_rate",
    "weight_decay",
    "batch_size",
    "max_steps",
    "clip_norm",
    "warmup_steps",
    "seed",
    "checkpoint_every",
    "optimizer",
    "momentum",
    "beta1",
    "beta2",
    "eps",
    "strategy",
    "beam",
    "top_k",
    "samples",
    "temperature",
    "max_tokens",
    "length_penalty",
];

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self, BlmError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |message: String| BlmError::AtLine {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !KNOWN_KEYS.contains(&k) {
                return Err(BlmError::UnknownConfigKey(k.to_string()));
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(at(format!("duplicate key `{k}`")));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, BlmError> {
        match path {
            Some(p) => Self::parse(&std::fs::read_to_string(p)?, p),
            None => Ok(Self::default()),
        }
    }

    /// `flag`, else the file value, else `default`.
    pub fn resolve<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, BlmError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.resolve_opt(key, flag)?.unwrap_or(default))
    }

    /// `flag`, else the file value, if either is present.
    pub fn resolve_opt<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, BlmError>
    where
        T::Err: std::fmt::Display,
    {
        debug_assert!(KNOWN_KEYS.contains(&key), "{key}");
        if flag.is_some() {
            return Ok(flag);
        }
        self.values
            .get(key)
            .map(|raw| {
                raw.parse()
                    .map_err(|e| BlmError::Config(format!("invalid value `{raw}` for {key}: {e}")))
            })
            .transpose()
    }

    /// Resolved entries, for manifests.
    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_overrides() {
        let c = ConfigFile::parse("# toy\nd_model = 16\n\nseed=3  # inline\n", Path::new("c")).unwrap();
        assert_eq!(c.resolve("d_model", None, 8usize).unwrap(), 16);
        assert_eq!(c.resolve("d_model", Some(32usize), 8).unwrap(), 32);
        assert_eq!(c.resolve("layers", None, 2usize).unwrap(), 2);
        assert_eq!(c.resolve_opt::<u64>("seed", None).unwrap(), Some(3));
        assert_eq!(c.resolve_opt::<usize>("max_tokens", None).unwrap(), None);
        assert_eq!(c.resolve_opt("max_tokens", Some(4usize)).unwrap(), Some(4));
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let e = ConfigFile::parse("d_model = 16\nbogus_key = 1\n", Path::new("c")).unwrap_err();
        assert!(matches!(e, BlmError::UnknownConfigKey(ref k) if k == "bogus_key"));
        let e = ConfigFile::parse("d_model 16\n", Path::new("c")).unwrap_err();
        assert!(matches!(e, BlmError::AtLine { line: 1, .. }));
        let c = ConfigFile::parse("d_model = big\n", Path::new("c")).unwrap();
        assert!(c.resolve("d_model", None, 8usize).is_err());
    }
}
