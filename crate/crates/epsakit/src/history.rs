use std::path::Path;

use epsakit_core::train::{History, StepRecord};

use crate::error::{Error, Result};

pub const CSV_FILE: &str = "history.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// `epoch,step,lr,loss,accuracy`, one row per optimizer step.
pub fn history_csv(records: &[StepRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))
}

/// Writes `history.csv` and `summary.json` into `dir`, creating it if needed.
pub fn write_history(dir: &Path, history: &History) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(CSV_FILE);
    std::fs::write(&csv_path, history_csv(&history.records)?).map_err(|e| Error::io(&csv_path, e))?;
    let summary_path = dir.join(SUMMARY_FILE);
    let mut json = serde_json::to_string_pretty(&history.summary)?;
    json.push('\n');
    std::fs::write(&summary_path, json).map_err(|e| Error::io(&summary_path, e))
}
