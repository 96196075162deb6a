//! `--config` files: `key=value` lines, where a key is a long flag name of
//! the chosen subcommand. Blank lines and `#` comments are ignored.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Flag arguments equivalent to the config file at `path`. A value of
/// `true` or `false` turns a switch on or leaves it off.
pub fn config_args(path: &Path) -> Result<Vec<OsString>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
    parse_config(&text).with_context(|| format!("{}", path.display()))
}

fn parse_config(text: &str) -> Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {}: expected key=value", i + 1);
        };
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        let value = value.trim();
        if key.is_empty() || key == "config" {
            bail!("line {}: invalid key `{key}`", i + 1);
        }
        match value {
            "true" => out.push(format!("--{key}").into()),
            "false" => {}
            _ => {
                out.push(format!("--{key}").into());
                out.push(value.into());
            }
        }
    }
    Ok(out)
}

/// Splices config-file flags in right after the subcommand name, so flags
/// given on the command line come later and win.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut iter = args.into_iter();
    while let Some(a) = iter.next() {
        if a == "--config" {
            let Some(p) = iter.next() else { bail!("--config needs a path") };
            path = Some(p);
        } else if let Some(p) = a.to_str().and_then(|s| s.strip_prefix("--config=")) {
            path = Some(p.into());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else { return Ok(rest) };
    let extra = config_args(Path::new(&path))?;
    // rest[0] is the program name; the subcommand is the first non-flag.
    let at = rest
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map(|p| p + 2)
        .unwrap_or(rest.len());
    rest.splice(at..at, extra);
    Ok(rest)
}
