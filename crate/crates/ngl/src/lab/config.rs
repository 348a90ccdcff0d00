//! Layered key-value configuration for the experiment runner.
//!
//! Resolution order, weakest first: built-in defaults, a plain-text
//! `key=value` file, `NGL_`-prefixed environment variables, explicit
//! flag values. The key set is fixed by the defaults; anything else is
//! a typo and gets rejected with the known keys listed.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use num::BigRational;

use crate::product::EpsSchedule;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown key {key:?} (from {layer}); known keys: {known}")]
    UnknownKey { key: String, layer: String, known: String },
    #[error("bad value {value:?} for {key}: expected {want}")]
    BadValue { key: String, value: String, want: String },
    #[error("malformed line {line} in {path}: {text:?} (expected key=value)")]
    MalformedLine { path: String, line: usize, text: String },
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
}

/// Where a value came from, for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    Default,
    File,
    Env,
    Flag,
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Env => "env",
            Source::Flag => "flag",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ConfigMap {
    values: BTreeMap<String, (String, Source)>,
}

impl ConfigMap {
    /// The defaults fix the set of legal keys.
    pub fn new(defaults: &[(&str, &str)]) -> Self {
        ConfigMap {
            values: defaults
                .iter()
                .map(|(k, v)| (k.to_string(), (v.to_string(), Source::Default)))
                .collect(),
        }
    }

    fn known(&self) -> String {
        self.values.keys().cloned().collect::<Vec<_>>().join(", ")
    }

    fn set(&mut self, key: &str, value: &str, source: Source) -> Result<(), ConfigError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = (value.to_string(), source);
                Ok(())
            }
            None => Err(ConfigError::UnknownKey {
                key: key.to_string(),
                layer: source.to_string(),
                known: self.known(),
            }),
        }
    }

    /// Apply a `key=value` file. Blank lines and `#` comments are
    /// ignored; inline comments are not supported (values may contain
    /// `#`).
    pub fn load_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::MalformedLine {
                    path: path.display().to_string(),
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            self.set(k.trim(), v.trim(), Source::File)?;
        }
        Ok(())
    }

    /// Apply `NGL_`-prefixed variables: `NGL_FIBER_DEPTH` sets
    /// `fiber_depth`. Unprefixed variables are ignored; prefixed ones
    /// that match no key are errors.
    pub fn load_env(
        &mut self,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<(), ConfigError> {
        for (k, v) in vars {
            if let Some(rest) = k.strip_prefix("NGL_") {
                self.set(&rest.to_ascii_lowercase(), &v, Source::Env)?;
            }
        }
        Ok(())
    }

    /// Apply one explicit flag value, the strongest layer.
    pub fn set_flag(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set(key, value, Source::Flag)
    }

    pub fn get(&self, key: &str) -> &str {
        &self
            .values
            .get(key)
            .unwrap_or_else(|| panic!("config key {key:?} has no default"))
            .0
    }

    pub fn source(&self, key: &str) -> Source {
        self.values.get(key).map(|(_, s)| *s).unwrap_or(Source::Default)
    }

    /// Fully resolved values, for the manifest echo.
    pub fn echo(&self) -> BTreeMap<String, String> {
        self.values.iter().map(|(k, (v, _))| (k.clone(), v.clone())).collect()
    }

    fn parse<T: FromStr>(&self, key: &str, want: &str) -> Result<T, ConfigError> {
        let raw = self.get(key);
        raw.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            value: raw.to_string(),
            want: want.to_string(),
        })
    }

    pub fn get_u32(&self, key: &str) -> Result<u32, ConfigError> {
        self.parse(key, "a nonnegative integer")
    }

    pub fn get_u64(&self, key: &str) -> Result<u64, ConfigError> {
        self.parse(key, "a nonnegative integer")
    }

    pub fn get_i64(&self, key: &str) -> Result<i64, ConfigError> {
        self.parse(key, "an integer")
    }

    pub fn get_usize(&self, key: &str) -> Result<usize, ConfigError> {
        self.parse(key, "a nonnegative integer")
    }

    pub fn get_bool(&self, key: &str) -> Result<bool, ConfigError> {
        self.parse(key, "true or false")
    }

    /// `a/b` or a plain integer.
    pub fn get_rational(&self, key: &str) -> Result<BigRational, ConfigError> {
        parse_rational(self.get(key)).ok_or_else(|| ConfigError::BadValue {
            key: key.to_string(),
            value: self.get(key).to_string(),
            want: "a rational like 1/24 or 50".to_string(),
        })
    }

    /// Comma-separated u64 list, e.g. `3,8,14`.
    pub fn get_u64_list(&self, key: &str) -> Result<Vec<u64>, ConfigError> {
        split_list(self.get(key))
            .map(|s| s.parse().ok())
            .collect::<Option<Vec<u64>>>()
            .ok_or_else(|| ConfigError::BadValue {
                key: key.to_string(),
                value: self.get(key).to_string(),
                want: "a comma-separated integer list like 3,8,14".to_string(),
            })
    }

    pub fn get_u32_list(&self, key: &str) -> Result<Vec<u32>, ConfigError> {
        split_list(self.get(key))
            .map(|s| s.parse().ok())
            .collect::<Option<Vec<u32>>>()
            .ok_or_else(|| ConfigError::BadValue {
                key: key.to_string(),
                value: self.get(key).to_string(),
                want: "a comma-separated integer list like 1,1,2,0,0".to_string(),
            })
    }

    /// `geometric` or `override:29/1000,50,28,20,1/1000`.
    pub fn get_schedule(&self, key: &str, d: u32) -> Result<EpsSchedule, ConfigError> {
        let raw = self.get(key);
        parse_schedule(raw, d).ok_or_else(|| ConfigError::BadValue {
            key: key.to_string(),
            value: raw.to_string(),
            want: "geometric, or override:<comma-separated rationals>".to_string(),
        })
    }
}

fn split_list(raw: &str) -> impl Iterator<Item = &str> {
    raw.split(',').map(str::trim).filter(|s| !s.is_empty())
}

pub fn parse_rational(raw: &str) -> Option<BigRational> {
    let raw = raw.trim();
    BigRational::from_str(raw).ok().or_else(|| {
        let (n, d) = raw.split_once('/')?;
        Some(BigRational::new(n.trim().parse().ok()?, d.trim().parse().ok()?))
    })
}

pub fn parse_schedule(raw: &str, d: u32) -> Option<EpsSchedule> {
    let raw = raw.trim();
    if raw.eq_ignore_ascii_case("geometric") {
        return Some(EpsSchedule::Geometric { d });
    }
    let list = raw.strip_prefix("override:")?;
    let entries: Option<Vec<BigRational>> = split_list(list).map(parse_rational).collect();
    let entries = entries?;
    (!entries.is_empty()).then_some(EpsSchedule::Override(entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num::BigInt;

    fn frac(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    fn base() -> ConfigMap {
        ConfigMap::new(&[
            ("depth", "15"),
            ("seed", "7"),
            ("epsilon", "1/24"),
            ("levels", "3,8,14"),
            ("eps_schedule", "geometric"),
        ])
    }

    #[test]
    fn precedence_is_flag_over_env_over_file_over_default() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.conf");
        std::fs::write(&file, "# comment\n\ndepth = 12\nseed=100\nepsilon=1/30\n").unwrap();

        let mut cfg = base();
        cfg.load_file(&file).unwrap();
        assert_eq!(cfg.get("depth"), "12");
        assert_eq!(cfg.get("seed"), "100");

        cfg.load_env([
            ("NGL_SEED".to_string(), "200".to_string()),
            ("HOME".to_string(), "/tmp/elsewhere".to_string()),
        ])
        .unwrap();
        assert_eq!(cfg.get("seed"), "200");
        assert_eq!(cfg.source("seed"), Source::Env);

        cfg.set_flag("seed", "300").unwrap();
        assert_eq!(cfg.get("seed"), "300");
        assert_eq!(cfg.source("seed"), Source::Flag);

        // Untouched keys keep their defaults.
        assert_eq!(cfg.get("levels"), "3,8,14");
        assert_eq!(cfg.source("levels"), Source::Default);
        assert_eq!(cfg.get("epsilon"), "1/30");
    }

    #[test]
    fn unknown_keys_are_rejected_from_every_layer() {
        let mut cfg = base();
        assert!(matches!(
            cfg.set_flag("depht", "12"),
            Err(ConfigError::UnknownKey { .. })
        ));
        assert!(cfg
            .load_env([("NGL_DEPHT".to_string(), "12".to_string())])
            .is_err());

        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("bad.conf");
        std::fs::write(&file, "depht=12\n").unwrap();
        assert!(cfg.load_file(&file).is_err());
    }

    #[test]
    fn malformed_file_lines_are_errors_with_position() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("bad.conf");
        std::fs::write(&file, "depth=12\nnot a pair\n").unwrap();
        let mut cfg = base();
        match cfg.load_file(&file) {
            Err(ConfigError::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected a malformed-line error, got {other:?}"),
        }
    }

    #[test]
    fn typed_getters_parse_and_complain() {
        let mut cfg = base();
        assert_eq!(cfg.get_u32("depth").unwrap(), 15);
        assert_eq!(cfg.get_rational("epsilon").unwrap(), frac(1, 24));
        assert_eq!(cfg.get_u64_list("levels").unwrap(), vec![3, 8, 14]);

        cfg.set_flag("depth", "many").unwrap();
        assert!(matches!(cfg.get_u32("depth"), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn schedules_parse_both_forms() {
        let mut cfg = base();
        assert!(matches!(
            cfg.get_schedule("eps_schedule", 3).unwrap(),
            EpsSchedule::Geometric { d: 3 }
        ));
        cfg.set_flag("eps_schedule", "override:29/1000, 50, 28, 20, 1/1000").unwrap();
        match cfg.get_schedule("eps_schedule", 3).unwrap() {
            EpsSchedule::Override(v) => {
                assert_eq!(v.len(), 5);
                assert_eq!(v[0], frac(29, 1000));
                assert_eq!(v[1], frac(50, 1));
            }
            other => panic!("expected an override schedule, got {other:?}"),
        }
        cfg.set_flag("eps_schedule", "override:").unwrap();
        assert!(cfg.get_schedule("eps_schedule", 3).is_err());
    }

    #[test]
    fn echo_is_the_resolved_view() {
        let mut cfg = base();
        cfg.set_flag("seed", "11").unwrap();
        let echo = cfg.echo();
        assert_eq!(echo["seed"], "11");
        assert_eq!(echo["depth"], "15");
        assert_eq!(echo.len(), 5);
    }
}
