//! CSV output of run traces, summaries and reference fits, and the flat
//! `key = value` configuration format.
//!
//! Trace columns: `step, outer, inner, parameter, weighted_mean,
//! weighted_sd, k_hat, efficiency, rhat_mcmc, mode`. One row per parameter
//! per inner step. Floats use the shortest representation that parses back
//! to the same value; missing values are written as `NaN`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::ep_core::Relaxation;
use crate::error::{Error, Result};
use crate::models_builtin::BuiltinConfig;
use crate::oracle::PosteriorSummary;
use crate::orchestrator::{ConvergenceReport, RunTrace, Schedule, StepMode};

pub const TRACE_HEADER: &str =
    "step,outer,inner,parameter,weighted_mean,weighted_sd,k_hat,efficiency,rhat_mcmc,mode";

/// One parsed trace row.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub outer: usize,
    pub inner: usize,
    pub parameter: String,
    pub weighted_mean: f64,
    pub weighted_sd: f64,
    pub k_hat: f64,
    pub efficiency: f64,
    pub rhat_mcmc: f64,
    pub mode: StepMode,
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(false).from_reader(input)
}

fn trace_rows(trace: &RunTrace) -> Vec<Vec<String>> {
    let mut rows = Vec::with_capacity(trace.records.len() * trace.names.len());
    for r in &trace.records {
        for (k, name) in trace.names.iter().enumerate() {
            let rhat = if k < trace.n_phi {
                trace.mcmc_rhat(r.outer, k)
            } else {
                f64::NAN
            };
            rows.push(vec![
                r.step.to_string(),
                r.outer.to_string(),
                r.inner.to_string(),
                name.clone(),
                r.mean[k].to_string(),
                r.sd[k].to_string(),
                r.k_hat.unwrap_or(f64::NAN).to_string(),
                r.efficiency.to_string(),
                rhat.to_string(),
                r.mode.as_str().to_string(),
            ]);
        }
    }
    rows
}

fn header(text: &str) -> Vec<&str> {
    text.split(',').collect()
}

pub fn write_trace<W: Write>(trace: &RunTrace, out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(header(TRACE_HEADER)).map_err(csv_error)?;
    for row in trace_rows(trace) {
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_file(trace: &RunTrace, path: &Path) -> Result<()> {
    write_trace(trace, BufWriter::new(File::create(path)?))
}

fn csv_error(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse(format!("{other:?}")),
        }
    } else {
        Error::Parse(e.to_string())
    }
}

fn field<T: std::str::FromStr>(raw: &str, line: usize, name: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Parse(format!("line {line}: bad {name} '{raw}'")))
}

/// Data records of a CSV stream whose first record must equal `expected`;
/// every record must have the header's width.
fn records<R: Read>(input: R, expected: &str) -> Result<Vec<csv::StringRecord>> {
    let mut rows = csv_reader(input).into_records();
    let width = header(expected).len();
    match rows.next() {
        Some(Ok(h)) if h.iter().eq(header(expected)) => {}
        _ => return Err(Error::Parse(format!("missing or unexpected header (expected {expected})"))),
    }
    let mut out = Vec::new();
    for (i, rec) in rows.enumerate() {
        let rec = rec.map_err(csv_error)?;
        if rec.len() != width {
            return Err(Error::Parse(format!(
                "line {}: expected {width} fields, found {}",
                i + 2,
                rec.len()
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_trace<R: Read>(input: R) -> Result<Vec<TraceRow>> {
    records(input, TRACE_HEADER)?
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let n = i + 2;
            Ok(TraceRow {
                step: field(&f[0], n, "step")?,
                outer: field(&f[1], n, "outer")?,
                inner: field(&f[2], n, "inner")?,
                parameter: f[3].to_string(),
                weighted_mean: field(&f[4], n, "weighted_mean")?,
                weighted_sd: field(&f[5], n, "weighted_sd")?,
                k_hat: field(&f[6], n, "k_hat")?,
                efficiency: field(&f[7], n, "efficiency")?,
                rhat_mcmc: field(&f[8], n, "rhat_mcmc")?,
                mode: f[9].parse()?,
            })
        })
        .collect()
}

pub fn read_trace_file(path: &Path) -> Result<Vec<TraceRow>> {
    read_trace(File::open(path)?)
}

/// The last step of every run: the trace columns prefixed by `run`.
pub fn write_summary<W: Write>(traces: &[RunTrace], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    let mut head = vec!["run"];
    head.extend(header(TRACE_HEADER));
    w.write_record(&head).map_err(csv_error)?;
    for tr in traces {
        let rows = trace_rows(tr);
        let k = tr.names.len();
        for row in &rows[rows.len().saturating_sub(k)..] {
            let mut rec = vec![tr.run_id.to_string()];
            rec.extend(row.iter().cloned());
            w.write_record(&rec).map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub const CONVERGENCE_HEADER: &str = "parameter,rhat_runs,converged";

/// Cross-run R-hat per parameter, with the overall verdict on every row.
pub fn write_convergence<W: Write>(report: &ConvergenceReport, out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(header(CONVERGENCE_HEADER)).map_err(csv_error)?;
    for (name, r) in report.names.iter().zip(&report.rhat) {
        w.write_record([name.clone(), r.to_string(), report.converged.to_string()])
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub const REFERENCE_HEADER: &str = "reference,parameter,mean,sd,rhat,n_iterations,passed_gate";

/// Reference fits (`red`, `green`, `blue`) and optionally the simulation
/// truth, one row per parameter.
pub fn write_references<W: Write>(
    fits: &[(&str, &PosteriorSummary)],
    truth: Option<(&[String], &[f64])>,
    out: W,
) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(header(REFERENCE_HEADER)).map_err(csv_error)?;
    if let Some((names, values)) = truth {
        for (n, v) in names.iter().zip(values) {
            w.write_record(["truth", n, &v.to_string(), "NaN", "NaN", "0", "true"])
                .map_err(csv_error)?;
        }
    }
    for (label, fit) in fits {
        for (i, n) in fit.names.iter().enumerate() {
            w.write_record([
                label.to_string(),
                n.clone(),
                fit.mean[i].to_string(),
                fit.sd[i].to_string(),
                fit.rhat[i].to_string(),
                fit.n_iterations.to_string(),
                fit.passed_gate.to_string(),
            ])
            .map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One reference row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRow {
    pub reference: String,
    pub parameter: String,
    pub mean: f64,
    pub sd: f64,
}

pub fn read_references<R: Read>(input: R) -> Result<Vec<ReferenceRow>> {
    records(input, REFERENCE_HEADER)?
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let n = i + 2;
            Ok(ReferenceRow {
                reference: f[0].to_string(),
                parameter: f[1].to_string(),
                mean: field(&f[2], n, "mean")?,
                sd: field(&f[3], n, "sd")?,
            })
        })
        .collect()
}

/// Draws with one column per parameter.
pub fn write_draws<W: Write>(names: &[String], draws: &DMatrix<f64>, out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(names).map_err(csv_error)?;
    for row in draws.row_iter() {
        w.write_record(row.iter().map(f64::to_string)).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("config line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Parse(format!("config line {}: empty key or value", i + 1)));
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
}

/// Applies one configuration entry to the schedule or, failing that, to the
/// model configuration. Unknown keys are an error.
pub fn apply_config_entry(schedule: &mut Schedule, model: &mut BuiltinConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "outer_steps" | "outer" => schedule.outer_steps = num(key, value)?,
        "inner_steps" | "inner" => schedule.inner_steps = num(key, value)?,
        "initial_mcmc_iterations" | "mcmc_init_iters" => schedule.initial_mcmc_iterations = num(key, value)?,
        "mcmc_growth" => schedule.mcmc_growth = num(key, value)?,
        "n_chains" => schedule.n_chains = num(key, value)?,
        "j_tilde" | "jtilde" => schedule.j_tilde = num(key, value)?,
        "resample_warmup_steps" | "warmup_resample_steps" => schedule.resample_warmup_steps = num(key, value)?,
        "n_floor_initial" => schedule.n_floor_initial = num(key, value)?,
        "n_floor_growth" => schedule.n_floor_growth = num(key, value)?,
        "n_runs" | "runs" => schedule.n_runs = num(key, value)?,
        "relaxation" => schedule.relaxation = value.parse::<Relaxation>()?,
        _ => model.set(key, value)?,
    }
    Ok(())
}
