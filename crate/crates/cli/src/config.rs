//! Layered settings: built-in defaults, then a `key = value` file, then flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::UsageError;

#[derive(Debug, Default)]
pub struct Layer {
    entries: BTreeMap<String, (String, usize)>,
    source: String,
}

impl Layer {
    /// Parses one `key = value` per line; `#` starts a comment.
    pub fn parse(text: &str, source: &str) -> Result<Self, UsageError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(UsageError(format!(
                    "{source}:{}: expected `key = value`",
                    i + 1
                )));
            };
            let key = k.trim().replace('_', "-");
            if key.is_empty() {
                return Err(UsageError(format!("{source}:{}: empty key", i + 1)));
            }
            if entries
                .insert(key.clone(), (v.trim().to_string(), i + 1))
                .is_some()
            {
                return Err(UsageError(format!(
                    "{source}:{}: duplicate key `{key}`",
                    i + 1
                )));
            }
        }
        Ok(Layer {
            entries,
            source: source.to_string(),
        })
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Layer::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| UsageError(format!("cannot read config {}: {e}", p.display())))?;
                Ok(Layer::parse(&text, &p.display().to_string())?)
            }
        }
    }

    /// Flag if given, else the file value, else `default`. Consumes the key.
    pub fn pick<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, UsageError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let from_file = self.entries.remove(key);
        if let Some(v) = flag {
            return Ok(v);
        }
        match from_file {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|e| {
                UsageError(format!(
                    "{}:{line}: bad value for `{key}`: {e}",
                    self.source
                ))
            }),
        }
    }

    /// Like [`Layer::pick`] for settings without a default.
    pub fn pick_opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, UsageError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let from_file = self.entries.remove(key);
        if flag.is_some() {
            return Ok(flag);
        }
        match from_file {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|e| {
                UsageError(format!(
                    "{}:{line}: bad value for `{key}`: {e}",
                    self.source
                ))
            }),
        }
    }

    /// Switches: a set flag wins, otherwise the file, otherwise off.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool, UsageError> {
        self.pick(key, flag.then_some(true), false)
    }

    /// Rejects keys no setting consumed.
    pub fn finish(self) -> Result<(), UsageError> {
        match self.entries.iter().next() {
            None => Ok(()),
            Some((k, (_, line))) => Err(UsageError(format!(
                "{}:{line}: unknown key `{k}`",
                self.source
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_default_then_file_then_flag() {
        let mut l = Layer::parse("count = 5\n# comment\nseed=9 # trailing\n", "f").unwrap();
        assert_eq!(l.pick("count", None, 1usize).unwrap(), 5);
        assert_eq!(l.pick("seed", Some(3u64), 0).unwrap(), 3);
        assert_eq!(l.pick("lr", None, 0.5f64).unwrap(), 0.5);
        l.finish().unwrap();
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        let mut l = Layer::parse("count = 5\nbogus = 1\n", "f").unwrap();
        l.pick("count", None, 0usize).unwrap();
        assert!(l.finish().unwrap_err().0.contains("bogus"));
        assert!(Layer::parse("no equals sign\n", "f").is_err());
        assert!(Layer::parse("a = 1\na = 2\n", "f").is_err());
        let mut l = Layer::parse("count = many\n", "f").unwrap();
        assert!(l.pick("count", None, 0usize).is_err());
    }

    #[test]
    fn underscores_alias_dashes() {
        let mut l = Layer::parse("k_max = 4\n", "f").unwrap();
        assert_eq!(l.pick("k-max", None, 5usize).unwrap(), 4);
    }
}
