//! JSON config files. Keys are long flag names (dashes or underscores);
//! an object under a subcommand's name applies to that subcommand only.
//! Values become extra arguments unless the flag is already on the command
//! line, so flags always win.

use std::ffi::OsString;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Command};
use serde_json::Value;

fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(rest) = s.strip_prefix("--config=") {
            return Some(rest.into());
        }
    }
    None
}

fn subcommand_name<'a>(cmd: &'a Command, argv: &[OsString]) -> Option<&'a Command> {
    argv.iter()
        .skip(1)
        .find_map(|a| cmd.find_subcommand(a.to_string_lossy().as_ref()))
}

fn given(argv: &[OsString], long: &str) -> bool {
    let flag = format!("--{long}");
    let with_eq = format!("--{long}=");
    argv.iter().any(|a| {
        let s = a.to_string_lossy();
        s == flag || s.starts_with(&with_eq)
    })
}

fn scalar(v: &Value) -> Result<String> {
    Ok(match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        Value::Bool(b) => b.to_string(),
        other => bail!("unsupported config value {other}"),
    })
}

/// Returns `argv` extended with values from the config file, if one is named.
pub fn merge_config(cmd: &Command, argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {path:?}"))?;
    let doc: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {path:?}"))?;
    let Value::Object(top) = doc else {
        bail!("config {path:?} must be a JSON object");
    };
    let sub = subcommand_name(cmd, &argv);

    // subcommand section first so it wins over top-level keys
    let mut entries: Vec<(String, Value)> = Vec::new();
    if let Some(Value::Object(section)) = sub.and_then(|s| top.get(s.get_name())) {
        entries.extend(section.iter().map(|(k, v)| (k.clone(), v.clone())));
    }
    entries.extend(top.iter().map(|(k, v)| (k.clone(), v.clone())));

    let mut out = argv.clone();
    let mut seen = std::collections::HashSet::new();
    for (key, value) in entries {
        let long = key.replace('_', "-");
        if long == "config" || value.is_object() || !seen.insert(long.clone()) || given(&argv, &long) {
            continue;
        }
        let arg = sub
            .into_iter()
            .flat_map(|s| s.get_arguments())
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(long.as_str()));
        let Some(arg) = arg else {
            log::warn!("config key {key:?} is not a flag of this command; ignored");
            continue;
        };
        match (arg.get_action(), &value) {
            (ArgAction::SetTrue, Value::Bool(true)) => out.push(format!("--{long}").into()),
            (ArgAction::SetTrue, Value::Bool(false)) => {}
            (ArgAction::SetTrue, _) => bail!("config key {key:?} must be true or false"),
            (_, Value::Array(items)) => {
                for it in items {
                    out.push(format!("--{long}").into());
                    out.push(scalar(it)?.into());
                }
            }
            (_, v) => {
                out.push(format!("--{long}").into());
                out.push(scalar(v)?.into());
            }
        }
    }
    Ok(out)
}
