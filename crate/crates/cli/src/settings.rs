//! `key=value` config files. A value given on the command line wins over
//! the file, which wins over the built-in default.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::Failure;

/// Every key any subcommand understands. Keys may be written with `-` or `_`.
pub const KNOWN_KEYS: &[&str] = &[
    "n-ids",
    "n-poses",
    "seed",
    "split",
    "noise",
    "segments",
    "rings",
    "sides",
    "mode",
    "manifest",
    "epochs",
    "batch-size",
    "lr",
    "lambda-rec",
    "lambda-edge",
    "lambda-mesh-cc",
    "lambda-mesh-ss",
    "lambda-point",
    "margin",
    "sinkhorn-eps",
    "sinkhorn-iters",
    "dims-scale",
    "dims",
    "disentangle",
    "seed-init",
    "seed-shuffle",
    "seed-reorder",
    "stage-switch-epoch",
    "checkpoint-every",
    "format",
    "which",
    "tol",
    "repeats",
];

#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('_', "-")
}

impl Settings {
    pub fn parse(text: &str, origin: &str) -> Result<Self, Failure> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Failure::usage(format!("{origin}:{}: expected key=value", i + 1)));
            };
            let key = normalize(k);
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Failure::usage(format!(
                    "{origin}:{}: unknown key `{}`",
                    i + 1,
                    k.trim()
                )));
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Settings { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        match path {
            None => Ok(Settings::default()),
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|e| Failure::io(format!("reading {}: {e}", p.display())))?;
                Self::parse(&text, &p.display().to_string())
            }
        }
    }

    pub fn opt<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, Failure>
    where
        T: FromStr,
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| Failure::usage(format!("config value for `{key}`: {e}"))),
        }
    }

    pub fn get<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, Failure>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }
}
