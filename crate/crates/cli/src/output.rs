use std::fmt::Write as _;

use serde_json::{json, Value};

use metavox_core::{Error, Result};

use crate::Cli;

/// Records the resolved configuration and outcome of a run.
pub fn write_run_manifest(cli: &Cli, result: &Result<Value>) -> Result<()> {
    let outcome = match result {
        Ok(v) => json!({ "status": "ok", "result": v }),
        Err(e) => json!({ "status": "error", "error": e.name(), "message": e.to_string() }),
    };
    let manifest = json!({
        "tool": "metavox",
        "version": env!("CARGO_PKG_VERSION"),
        "threads": cli.threads.unwrap_or_else(rayon::current_num_threads),
        "seed": cli.seed,
        "config": serde_json::to_value(&cli.command)?,
        "outcome": outcome,
    });
    if let Some(dir) = cli.run_manifest.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&cli.run_manifest, serde_json::to_vec_pretty(&manifest)?).map_err(Error::from)
}

pub fn print(value: &Value, pretty: bool) {
    if pretty {
        let mut out = String::new();
        table(value, 0, &mut out);
        print!("{out}");
    } else {
        println!("{value}");
    }
}

fn table(value: &Value, indent: usize, out: &mut String) {
    let pad = " ".repeat(indent);
    match value {
        Value::Object(map) => {
            let width = map.keys().map(|k| k.len()).max().unwrap_or(0);
            for (k, v) in map {
                if v.is_object() || (v.is_array() && v.as_array().is_some_and(|a| a.iter().any(|x| x.is_object()))) {
                    let _ = writeln!(out, "{pad}{k}:");
                    table(v, indent + 2, out);
                } else {
                    let _ = writeln!(out, "{pad}{k:<width$}  {}", scalar(v));
                }
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                let _ = writeln!(out, "{pad}[{i}]");
                table(v, indent + 2, out);
            }
        }
        other => {
            let _ = writeln!(out, "{pad}{}", scalar(other));
        }
    }
}

fn scalar(v: &Value) -> String {
    match v {
        Value::Number(n) => match n.as_f64() {
            Some(f) if n.is_f64() => format!("{f:.6}"),
            _ => n.to_string(),
        },
        Value::String(s) => s.clone(),
        Value::Array(a) => a.iter().map(scalar).collect::<Vec<_>>().join(", "),
        other => other.to_string(),
    }
}
