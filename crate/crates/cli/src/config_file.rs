//! Line-oriented `key = value` config files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are the long
//! flag names of the subcommand (`ig-steps` or `ig_steps`); boolean flags
//! take `true` or `false`; list flags take a comma-separated value.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use clap::Command;

use crate::error::CliError;

pub fn parse(text: &str, path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Usage(format!(
                "{}:{}: expected `key = value`",
                path.display(),
                n + 1
            )));
        };
        let key = key.trim().replace('_', "-");
        let value = value.trim().trim_matches('"').to_string();
        if key.is_empty() {
            return Err(CliError::Usage(format!("{}:{}: empty key", path.display(), n + 1)));
        }
        entries.push((key, value));
    }
    Ok(entries)
}

/// Index of the subcommand token in `argv`, skipping global options.
fn subcommand_position(argv: &[OsString], cli: &Command) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let token = argv[i].to_string_lossy();
        if token == "--config" {
            i += 2;
            continue;
        }
        if token.starts_with('-') {
            i += 1;
            continue;
        }
        return cli.find_subcommand(token.as_ref()).map(|_| i);
    }
    None
}

/// Rewrites `argv` with the file's entries inserted right after the
/// subcommand, ahead of the flags typed on the command line.
pub fn merge(argv: &[OsString], path: &Path, cli: &Command) -> Result<Vec<OsString>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let entries = parse(&text, path)?;
    let pos = subcommand_position(argv, cli)
        .ok_or_else(|| CliError::Usage("a config file needs a subcommand".into()))?;
    let sub = cli
        .find_subcommand(argv[pos].to_string_lossy().as_ref())
        .expect("position points at a subcommand");
    let mut injected: Vec<OsString> = Vec::new();
    for (key, value) in entries {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && !a.is_global_set())
            .filter(|a| a.get_id() != "config" && a.get_id() != "verbose")
            .ok_or_else(|| {
                CliError::Usage(format!(
                    "{}: unknown key `{key}` for `{}`",
                    path.display(),
                    sub.get_name()
                ))
            })?;
        if arg.get_action().takes_values() {
            injected.push(format!("--{key}").into());
            injected.push(value.into());
        } else {
            match value.as_str() {
                "true" | "yes" | "1" => injected.push(format!("--{key}").into()),
                "false" | "no" | "0" => {}
                other => {
                    return Err(CliError::Usage(format!(
                        "{}: `{key}` is a switch, expected true or false, got `{other}`",
                        path.display()
                    )))
                }
            }
        }
    }
    let mut merged = argv[..=pos].to_vec();
    merged.extend(injected);
    merged.extend_from_slice(&argv[pos + 1..]);
    Ok(merged)
}
