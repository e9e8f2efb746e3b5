use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Scheme, SweepParam};
use super::experiment::ExperimentRecord;
use super::HarnessError;

pub const CSV_HEADER: [&str; 8] =
    ["scheme", "sweep_param", "sweep_value", "avg_power_w", "ci95_w", "draws", "wall_time_ms", "flags"];

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    scheme: Scheme,
    sweep_param: SweepParam,
    sweep_value: Option<f64>,
    avg_power_w: f64,
    ci95_w: f64,
    draws: usize,
    wall_time_ms: u64,
    /// Semicolon-separated.
    flags: String,
}

/// Writes the summary columns; metadata goes only to the JSON mirror.
pub fn write_csv<W: Write>(records: &[ExperimentRecord], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(CsvRow {
            scheme: r.scheme,
            sweep_param: r.sweep_param,
            sweep_value: r.sweep_value,
            avg_power_w: r.avg_power_w,
            ci95_w: r.ci95_w,
            draws: r.draws,
            wall_time_ms: r.wall_time_ms,
            flags: r.flags.join(";"),
        })?;
    }
    if records.is_empty() {
        w.write_record(CSV_HEADER)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads records back with empty metadata.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<ExperimentRecord>, HarnessError> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(HarnessError::Input(format!("unexpected csv header {header:?}")));
    }
    rd.deserialize::<CsvRow>()
        .map(|row| {
            let row = row?;
            Ok(ExperimentRecord {
                scheme: row.scheme,
                sweep_param: row.sweep_param,
                sweep_value: row.sweep_value,
                avg_power_w: row.avg_power_w,
                ci95_w: row.ci95_w,
                draws: row.draws,
                wall_time_ms: row.wall_time_ms,
                flags: row.flags.split(';').filter(|f| !f.is_empty()).map(str::to_string).collect(),
                metadata: Default::default(),
            })
        })
        .collect()
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub records: Vec<ExperimentRecord>,
}

pub fn write_json<W: Write>(output: &ExperimentOutput, out: W) -> Result<(), HarnessError> {
    serde_json::to_writer_pretty(out, output)?;
    Ok(())
}

pub fn read_json<R: Read>(input: R) -> Result<ExperimentOutput, HarnessError> {
    Ok(serde_json::from_reader(input)?)
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, HarnessError> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}

/// Writes `<stem>.csv` and `<stem>.json` next to each other; `path` may carry either extension.
pub fn write_outputs(path: &Path, output: &ExperimentOutput) -> Result<(), HarnessError> {
    let csv_path = path.with_extension("csv");
    let json_path = path.with_extension("json");
    write_csv(&output.records, create(&csv_path)?)?;
    let mut j = create(&json_path)?;
    write_json(output, &mut j)?;
    j.flush().map_err(|source| HarnessError::Io { path: json_path, source })?;
    Ok(())
}
