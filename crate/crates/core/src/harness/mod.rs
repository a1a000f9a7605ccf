//! Command implementations behind the `budgetnas` binary: searches, λ
//! sweeps, derivation, from-scratch training, cost reports and gradient
//! checks, each writing schema-versioned result files.

mod commands;
mod config;
mod sweep;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub use commands::{
    cost_genotype, cost_supernet, derive, format_mean_std, genotype_op_costs, run_search_outcome, search,
    supernet_expected_costs, train, write_stage_log, CostReport, DeriveReport, ModelCost, SearchOutcome, SearchSummary,
    TrainSummary, STAGE_LOG_HEADER,
};
pub use config::{
    DataConfig, DatasetKind, Overrides, ReferenceLine, RunConfig, SampleSpace, SweepConfig, SweepModel,
    CONFIG_SCHEMA_VERSION, DEFAULT_BUDGET,
};
pub use sweep::{sample_lambdas, sweep, SweepRecord, TrialStatus};

/// Version stamped on every file the harness writes.
pub const OUTPUT_SCHEMA_VERSION: u32 = 1;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

/// CSV with a leading `# schema_version: N` comment line.
pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let mut f = create(path)?;
    writeln!(f, "# schema_version: {OUTPUT_SCHEMA_VERSION}").map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

/// Reader for files written by [`csv_writer`].
pub fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(f))
}

/// Reads a user-supplied input file; a missing file is an input error.
pub(crate) fn read_input(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))
}
