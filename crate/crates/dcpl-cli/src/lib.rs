//! Command-line front end: config resolution, subcommand handlers, output
//! writers and the acceptance battery.

pub mod args;
pub mod commands;
pub mod config;
pub mod suite;

use std::collections::BTreeSet;
use std::io::Write;

use clap::Parser;
use serde_json::{json, Value};

use args::Cli;
use commands::{dispatch, Payload};
use config::{OutputFormat, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_GATE: i32 = 2;

fn open_output(cfg: &RunConfig) -> std::io::Result<Box<dyn Write>> {
    Ok(match &cfg.output {
        Some(path) => Box::new(std::io::BufWriter::new(std::fs::File::create(path)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// CSV with a leading `# config:` comment line; columns are the union of the
/// row keys in first-seen order.
pub fn write_csv(out: &mut dyn Write, cfg: &RunConfig, table: &[Value]) -> Result<(), String> {
    writeln!(out, "# config: {}", serde_json::to_string(cfg).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let mut seen = BTreeSet::new();
    let mut columns = Vec::new();
    for row in table {
        if let Some(obj) = row.as_object() {
            for k in obj.keys() {
                if seen.insert(k.clone()) {
                    columns.push(k.clone());
                }
            }
        }
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&columns).map_err(|e| e.to_string())?;
    for row in table {
        let record: Vec<String> = columns.iter().map(|c| row.get(c).map(cell).unwrap_or_default()).collect();
        w.write_record(&record).map_err(|e| e.to_string())?;
    }
    w.flush().map_err(|e| e.to_string())
}

fn emit(cfg: &RunConfig, payload: Payload) -> Result<(), String> {
    let mut out = open_output(cfg).map_err(|e| format!("cannot open output: {e}"))?;
    match (payload, cfg.format) {
        (Payload::Field(field), OutputFormat::BinaryField) => field.write_binary(&mut out).map_err(|e| e.to_string())?,
        (Payload::Report { result, .. }, OutputFormat::Json) => {
            let doc = json!({"config": cfg, "result": result});
            serde_json::to_writer_pretty(&mut out, &doc).map_err(|e| e.to_string())?;
            writeln!(out).map_err(|e| e.to_string())?;
        }
        (Payload::Report { table, .. }, OutputFormat::Csv) => write_csv(&mut out, cfg, &table)?,
        (Payload::Report { .. }, OutputFormat::BinaryField) => return Err(format!("binary-field output is only available for synth, not {}", cfg.subcommand)),
        (Payload::Field(_), _) => unreachable!("fields are only produced for binary output"),
    }
    out.flush().map_err(|e| e.to_string())
}

/// Thread count from `DCPL_THREADS`, else rayon's default.
fn init_threads() {
    if let Some(n) = std::env::var("DCPL_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    init_threads();
    let cfg = match cli.resolve() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };
    if cfg.format == OutputFormat::BinaryField && cfg.subcommand != "synth" {
        eprintln!("error: binary-field output is only available for synth");
        return EXIT_INVALID;
    }
    let outcome = match dispatch(&cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };
    if let Err(e) = emit(&cfg, outcome.payload) {
        eprintln!("error: {e}");
        return EXIT_INVALID;
    }
    if outcome.gate_held {
        EXIT_OK
    } else {
        EXIT_GATE
    }
}
