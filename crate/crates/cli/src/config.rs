//! `key = value` config files. Each key is a long flag name; values fill in flags
//! not given on the command line.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};

pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected `key = value`", n + 1);
        };
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            bail!("config line {}: empty key", n + 1);
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

/// Removes `--config FILE` from `args` and appends the file's settings as flags.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut file = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            file = Some(it.next().context("--config needs a file")?);
        } else if let Some(p) = s.strip_prefix("--config=") {
            file = Some(OsString::from(p));
        } else {
            rest.push(a);
        }
    }
    let Some(file) = file else { return Ok(rest) };
    let text = std::fs::read_to_string(Path::new(&file))
        .with_context(|| format!("reading config {}", Path::new(&file).display()))?;
    let given: Vec<String> = rest
        .iter()
        .filter_map(|a| a.to_str())
        .filter(|a| a.starts_with("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect();
    for (key, value) in parse(&text)? {
        let flag = format!("--{key}");
        if given.contains(&flag) {
            continue;
        }
        match value.as_str() {
            "true" => rest.push(flag.into()),
            "false" => {}
            _ => {
                rest.push(flag.into());
                rest.push(value.into());
            }
        }
    }
    Ok(rest)
}
