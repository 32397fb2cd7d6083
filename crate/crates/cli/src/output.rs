use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Result;
use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Omit the `generated_at` field so repeated runs are byte-identical.
    #[arg(long)]
    pub no_timestamp: bool,
}

/// Serializes `report`, stamps it unless suppressed, and prints it.
pub fn emit<T: Serialize>(report: &T, out: &OutputArgs) -> Result<()> {
    let mut v = serde_json::to_value(report)?;
    if !out.no_timestamp {
        if let Value::Object(m) = &mut v {
            let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            m.insert("generated_at".into(), Value::from(secs));
        }
    }
    let text = match out.format {
        Format::Json => serde_json::to_string_pretty(&v)?,
        Format::Table => table(&v),
    };
    println!("{text}");
    Ok(())
}

/// Arrays longer than this are summarized in tables.
const TABLE_ARRAY_LIMIT: usize = 16;

/// One `dotted.path  value` row per scalar leaf.
pub fn table(v: &Value) -> String {
    let mut rows = Vec::new();
    flatten("", v, &mut rows);
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    rows.iter().map(|(k, v)| format!("{k:<width$}  {v}")).collect::<Vec<_>>().join("\n")
}

fn flatten(prefix: &str, v: &Value, rows: &mut Vec<(String, String)>) {
    let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(m) => flatten_map(m, &join, rows),
        Value::Array(a) if a.len() > TABLE_ARRAY_LIMIT => {
            rows.push((prefix.to_string(), format!("[{} items]", a.len())))
        }
        Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                flatten(&join(&i.to_string()), x, rows);
            }
        }
        Value::String(s) => rows.push((prefix.to_string(), s.clone())),
        other => rows.push((prefix.to_string(), other.to_string())),
    }
}

fn flatten_map(m: &Map<String, Value>, join: &dyn Fn(&str) -> String, rows: &mut Vec<(String, String)>) {
    for (k, x) in m {
        flatten(&join(k), x, rows);
    }
}
