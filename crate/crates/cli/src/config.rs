//! Expands `--config FILE` into ordinary flags.
//!
//! Config keys are long flag names. The expanded flags are inserted right
//! after the subcommand, so flags given on the command line win.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Command};

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        let s = arg.to_string_lossy();
        if s == "--config" {
            return iter.next().map(PathBuf::from);
        }
        if let Some(path) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(path));
        }
    }
    None
}

fn is_flag(action: &ArgAction) -> bool {
    matches!(action, ArgAction::SetTrue | ArgAction::SetFalse)
}

/// Returns `args` with the config file's pairs spliced in as flags.
pub fn expand(args: Vec<OsString>, command: &Command) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let Some(position) = args.iter().position(|a| {
        command
            .get_subcommands()
            .any(|s| a.to_str() == Some(s.get_name()))
    }) else {
        return Ok(args);
    };
    let sub = command
        .find_subcommand(args[position].to_str().unwrap_or_default())
        .expect("position points at a subcommand");
    let pairs = transduct_core::io::read_config(&path)?;

    let mut injected = Vec::new();
    for (key, value) in pairs {
        let arg = sub
            .get_arguments()
            .chain(command.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .with_context(|| {
                format!(
                    "{}: unknown key '{key}' for {}",
                    path.display(),
                    sub.get_name()
                )
            })?;
        if is_flag(arg.get_action()) {
            match value.as_str() {
                "true" => injected.push(OsString::from(format!("--{key}"))),
                "false" => {}
                _ => bail!("{}: key '{key}' expects true or false", path.display()),
            }
        } else {
            injected.push(OsString::from(format!("--{key}")));
            injected.push(OsString::from(value));
        }
    }
    let mut out = args;
    out.splice(position + 1..position + 1, injected);
    Ok(out)
}
