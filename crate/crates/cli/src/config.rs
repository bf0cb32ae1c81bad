//! TOML overlay for command-line flags.
//!
//! Top-level keys apply to every command; a table named after a subcommand
//! (nested for `ablate regions` and `annotate serve`) applies to that
//! subcommand only. Keys are flag names with `-` or `_`. Flags given on the
//! command line always win.

use std::collections::BTreeMap;

use clap::Command;
use toml::{Table, Value};

/// Value of `--config` in raw arguments.
pub fn config_path(args: &[String]) -> Option<String> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--" {
            break;
        }
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(v.to_string());
        }
    }
    None
}

fn takes_value(cmds: &[&Command], long: Option<&str>, short: Option<char>) -> bool {
    cmds.iter().rev().any(|c| {
        c.get_arguments().any(|a| {
            let hit = match (long, short) {
                (Some(l), _) => a.get_long() == Some(l),
                (_, Some(s)) => a.get_short() == Some(s),
                _ => false,
            };
            hit && a.get_action().takes_values()
        })
    })
}

/// Subcommand names present in `args`, outermost first.
pub fn subcommand_path(cmd: &Command, args: &[String]) -> Vec<String> {
    let mut chain: Vec<&Command> = vec![cmd];
    let mut path = Vec::new();
    let mut i = 1;
    while i < args.len() {
        let a = &args[i];
        if a == "--" {
            break;
        }
        if let Some(long) = a.strip_prefix("--") {
            if !long.contains('=') && takes_value(&chain, Some(long), None) {
                i += 1;
            }
        } else if let Some(short) = a.strip_prefix('-').filter(|s| s.len() == 1) {
            if takes_value(&chain, None, short.chars().next()) {
                i += 1;
            }
        } else if let Some(sub) = chain.last().and_then(|c| c.find_subcommand(a)) {
            path.push(sub.get_name().to_string());
            chain.push(sub);
        }
        i += 1;
    }
    path
}

fn scalars(table: &Table, into: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        if !v.is_table() {
            into.insert(k.replace('_', "-"), v.clone());
        }
    }
}

fn present(args: &[String], flag: &str) -> bool {
    let eq = format!("--{flag}=");
    let bare = format!("--{flag}");
    args.iter().any(|a| *a == bare || a.starts_with(&eq))
}

fn render(v: &Value) -> Result<String, String> {
    Ok(match v {
        Value::String(s) => s.clone(),
        Value::Integer(i) => i.to_string(),
        Value::Float(f) => f.to_string(),
        Value::Array(items) => items.iter().map(render).collect::<Result<Vec<_>, _>>()?.join(","),
        other => return Err(format!("unsupported config value {other}")),
    })
}

/// Appends every config entry whose flag is absent from `args`.
pub fn overlay(mut args: Vec<String>, table: &Table, cmd: &Command) -> Result<Vec<String>, String> {
    let path = subcommand_path(cmd, &args);
    let mut entries = BTreeMap::new();
    scalars(table, &mut entries);
    let mut scope = table;
    for name in &path {
        match scope.get(name) {
            Some(Value::Table(t)) => {
                scalars(t, &mut entries);
                scope = t;
            }
            Some(_) => return Err(format!("config key {name:?} must be a table")),
            None => break,
        }
    }
    entries.remove("config");
    for (flag, value) in entries {
        if present(&args, &flag) {
            continue;
        }
        match value {
            Value::Boolean(true) => args.push(format!("--{flag}")),
            Value::Boolean(false) => {}
            v => args.push(format!("--{flag}={}", render(&v)?)),
        }
    }
    Ok(args)
}
