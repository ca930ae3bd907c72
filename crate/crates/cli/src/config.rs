//! Flat `key=value` run configuration merged under command-line flags.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Parse `key = value` lines. `#` starts a comment; keys may use `-` or `_`.
pub fn parse(text: &str, origin: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected `key=value`, got `{line}`", origin.display(), i + 1);
        };
        let key = key.trim().replace('_', "-");
        if key.is_empty() {
            bail!("{}:{}: empty key", origin.display(), i + 1);
        }
        out.insert(key, value.trim().to_string());
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse(&text, path)
}

/// How a flag consumes config values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlagKind {
    Value,
    Switch,
}

/// Insert `--key value` for every config key the subcommand accepts and the
/// command line does not already set. Keys no subcommand knows are an error.
pub fn merge(
    args: Vec<OsString>,
    config: &BTreeMap<String, String>,
    accepted: &BTreeMap<String, FlagKind>,
    known_anywhere: &BTreeSet<String>,
    insert_at: usize,
) -> Result<Vec<OsString>> {
    let given: BTreeSet<String> = args
        .iter()
        .filter_map(|a| a.to_str())
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect();
    let mut extra = Vec::new();
    for (key, value) in config {
        if key == "config" {
            bail!("config files cannot include other config files");
        }
        match accepted.get(key) {
            Some(_) if given.contains(key) => {}
            Some(FlagKind::Value) => {
                extra.push(OsString::from(format!("--{key}")));
                extra.push(OsString::from(value));
            }
            Some(FlagKind::Switch) => match value.to_ascii_lowercase().as_str() {
                "true" | "yes" | "1" | "on" => extra.push(OsString::from(format!("--{key}"))),
                "false" | "no" | "0" | "off" => {}
                other => bail!("config key `{key}` expects a boolean, got `{other}`"),
            },
            None if known_anywhere.contains(key) => {}
            None => bail!("unknown config key `{key}`"),
        }
    }
    let mut out = args;
    let at = insert_at.min(out.len());
    out.splice(at..at, extra);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_underscores() {
        let cfg = parse("# run\nmin_votes = 5\nseed=3 # trailing\n\n", Path::new("x")).unwrap();
        assert_eq!(cfg["min-votes"], "5");
        assert_eq!(cfg["seed"], "3");
        assert!(parse("novalue\n", Path::new("x")).is_err());
    }

    #[test]
    fn flags_win_over_config() {
        let cfg = parse("seed=3\nmultitask=true\nk=4", Path::new("x")).unwrap();
        let accepted = [("seed".to_string(), FlagKind::Value), ("multitask".to_string(), FlagKind::Switch)]
            .into_iter()
            .collect();
        let known = ["k".to_string()].into_iter().collect();
        let args: Vec<OsString> = ["severity", "train", "--seed", "9"].iter().map(OsString::from).collect();
        let merged = merge(args, &cfg, &accepted, &known, 2).unwrap();
        let merged: Vec<_> = merged.iter().map(|s| s.to_str().unwrap()).collect();
        assert_eq!(merged, ["severity", "train", "--multitask", "--seed", "9"]);
    }
}
