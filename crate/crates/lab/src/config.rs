//! Layered run configuration: built-in defaults, then an INI file, then
//! command-line values. The resolved result is dumped as INI and hashed.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use ini::Ini;
use sha2::{Digest, Sha256};

use crate::error::{config_err, LabError, Result};

/// `(section, key, default, help)`. Order here is dump order.
pub const KEYS: &[(&str, &str, &str, &str)] = &[
    ("data", "task", "order", "order | speed"),
    ("data", "n", "2000", "videos to generate"),
    ("data", "frames", "64", "frames per video"),
    ("data", "resolution", "32", "frame side in pixels"),
    ("data", "classes", "2", "class count"),
    ("data", "noise", "12", "background noise amplitude"),
    ("data", "event_len", "8", "order task: frames per event"),
    ("data", "slow_speed", "2.0", "speed task: slowest class, px/frame"),
    ("data", "fast_speed", "4.0", "speed task: fastest class, px/frame"),
    ("data", "dot_radius", "2.0", "speed task: dot radius"),
    ("data", "seed", "1", "generator seed"),
    ("model", "family", "r2d26", "backbone family: r2d26 | r21d50"),
    ("model", "method", "fast-gru", "aggregator: fast-gru | gru | lstm | concat | avg-pool"),
    ("model", "reduction", "4", "FAST-GRU gate bottleneck factor"),
    ("model", "gate_bias", "0", "initial gate bias"),
    ("schedule", "clip_len", "8", "frames per clip L"),
    ("schedule", "clips", "8", "clips per video N"),
    ("schedule", "pattern", "1:1", "1:x | all-e | all-c"),
    ("schedule", "preset", "none", "none | faster16 | faster32"),
    ("train", "stage", "backbone", "backbone | aggregator"),
    ("train", "epochs", "10", "passes over the training set"),
    ("train", "batch_size", "16", "videos per step"),
    ("train", "lr", "0.05", "base learning rate (cosine decay)"),
    ("train", "momentum", "0.9", "SGD momentum"),
    ("train", "weight_decay", "0.0001", "L2 penalty"),
    ("train", "seed", "1", "initialization and data-order seed"),
    ("train", "augment", "true", "backbone stage: scale jitter and random crop"),
    ("train", "sampling", "random", "aggregator stage clip starts: random | uniform"),
    ("train", "feature_cache", "none", "aggregator stage: none | memory | <directory>"),
    ("eval", "top_k", "1", "report top-k accuracy"),
    ("flops", "backbone", "r21d50", "backbone for per-layer costs"),
    ("flops", "scale", "full", "full | tiny"),
    ("flops", "resolution", "224", "input side for cost accounting"),
    ("flops", "frames", "32", "clip length L"),
    ("flops", "clips", "none", "clips per video; set to cost a whole schedule"),
    ("flops", "pattern", "none", "schedule pattern when costing a video"),
    ("flops", "method", "fast-gru", "aggregator costed per step"),
    ("flops", "expensive", "r21d50", "expensive backbone family"),
    ("flops", "cheap", "r2d26", "cheap backbone family"),
    ("sweep", "patterns", "all-e,1:1,1:3,1:7", "comma-separated patterns"),
    ("sweep", "frames", "8", "comma-separated clip lengths"),
    ("sweep", "budget", "64", "frames per video L·N"),
    ("paths", "data", "", "dataset file"),
    ("paths", "test_data", "", "held-out dataset file"),
    ("paths", "out", "", "output file or checkpoint directory"),
    ("paths", "checkpoint", "", "checkpoint to evaluate"),
    ("paths", "expensive", "", "expensive backbone checkpoint"),
    ("paths", "cheap", "", "cheap backbone checkpoint"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<(String, String), String>,
}

impl Default for Config {
    fn default() -> Self {
        let values = KEYS
            .iter()
            .map(|(s, k, d, _)| ((s.to_string(), k.to_string()), d.to_string()))
            .collect();
        Self { values }
    }
}

impl Config {
    fn split(key: &str) -> Result<(String, String)> {
        let (s, k) = key
            .split_once('.')
            .ok_or_else(|| config_err(format!("config key '{}' must look like section.key", key)))?;
        let pair = (s.trim().to_string(), k.trim().to_string());
        if !KEYS.iter().any(|(ks, kk, _, _)| *ks == pair.0 && *kk == pair.1) {
            return Err(config_err(format!("unknown config key '{}.{}'", pair.0, pair.1)));
        }
        Ok(pair)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        let k = Self::split(key)?;
        self.values.insert(k, value.into());
        Ok(())
    }

    /// Overlay every key of an INI text. Unknown sections or keys are errors.
    pub fn overlay_ini(&mut self, text: &str, origin: &str) -> Result<()> {
        let ini = Ini::load_from_str(text).map_err(|e| config_err(format!("{}: {}", origin, e)))?;
        for (section, props) in ini.iter() {
            for (k, v) in props.iter() {
                let section = section.ok_or_else(|| {
                    config_err(format!("{}: key '{}' is outside any [section]", origin, k))
                })?;
                self.set(&format!("{section}.{k}"), v)
                    .map_err(|e| config_err(format!("{}: {}", origin, e)))?;
            }
        }
        Ok(())
    }

    pub fn overlay_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        self.overlay_ini(&text, &path.display().to_string())
    }

    pub fn raw(&self, key: &str) -> &str {
        let (s, k) = key.split_once('.').expect("section.key");
        self.values
            .get(&(s.to_string(), k.to_string()))
            .map(String::as_str)
            .unwrap_or_else(|| panic!("key '{key}' is not declared"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.trim()
            .parse()
            .map_err(|e| config_err(format!("{} = '{}': {}", key, raw, e)))
    }

    /// `None` for an empty value or `none`.
    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key).trim();
        if raw.is_empty() || raw.eq_ignore_ascii_case("none") {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn path(&self, key: &str) -> Result<std::path::PathBuf> {
        let raw = self.raw(key).trim();
        if raw.is_empty() {
            let flag = key.rsplit('.').next().unwrap_or(key).replace('_', "-");
            return Err(config_err(format!("missing --{} (config key {})", flag, key)));
        }
        Ok(raw.into())
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| config_err(format!("{} item '{}': {}", key, s, e))))
            .collect()
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.raw(key).trim().to_ascii_lowercase().as_str() {
            "true" | "yes" | "1" | "on" => Ok(true),
            "false" | "no" | "0" | "off" => Ok(false),
            other => Err(config_err(format!("{} = '{}' is not a boolean", key, other))),
        }
    }

    /// Every key in declaration order, as INI.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (s, k, _, _) in KEYS {
            if *s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{s}]\n"));
                section = s;
            }
            out.push_str(&format!("{} = {}\n", k, self.raw(&format!("{s}.{k}"))));
        }
        out
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.dump().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let mut c = Config::default();
        c.overlay_ini("[train]\nepochs = 3\nlr = 0.2\n", "t").unwrap();
        c.set("train.lr", "0.3").unwrap();
        assert_eq!(c.get::<usize>("train.epochs").unwrap(), 3);
        assert_eq!(c.get::<f64>("train.lr").unwrap(), 0.3);
        assert_eq!(c.get::<usize>("train.batch_size").unwrap(), 16);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = Config::default();
        assert!(c.overlay_ini("[train]\nepoch = 3\n", "t").is_err());
        assert!(c.overlay_ini("orphan = 1\n", "t").is_err());
        assert!(c.set("nosuch.key", "1").is_err());
    }

    #[test]
    fn dump_round_trips() {
        let mut c = Config::default();
        c.set("data.task", "speed").unwrap();
        c.set("paths.out", "/tmp/x y").unwrap();
        let mut d = Config::default();
        d.overlay_ini(&c.dump(), "dump").unwrap();
        assert_eq!(c, d);
        assert_eq!(c.hash(), d.hash());
        assert_ne!(c.hash(), Config::default().hash());
    }

    #[test]
    fn optional_and_list_values() {
        let c = Config::default();
        assert_eq!(c.opt::<usize>("flops.clips").unwrap(), None);
        assert_eq!(c.list::<usize>("sweep.frames").unwrap(), vec![8]);
        assert!(c.path("paths.data").is_err());
        assert!(c.bool("train.augment").unwrap());
    }
}
