use std::path::Path;

use super::{PathBatch, TimeGrid};
use crate::{Error, Result};

/// Long-format CSV with columns `t, path_id, S_1..S_d`.
pub fn write_paths_csv<P: AsRef<Path>>(path: P, batch: &PathBatch, grid: &TimeGrid) -> Result<()> {
    if grid.n_steps() != batch.n_steps() {
        return Err(Error::Dimension(format!(
            "grid has {} steps, batch {}",
            grid.n_steps(),
            batch.n_steps()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let d = batch.dim();
    let mut header = vec!["t".to_string(), "path_id".to_string()];
    header.extend((1..=d).map(|i| format!("S_{i}")));
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for p in 0..batch.n_paths() {
        for (n, t) in grid.times().iter().enumerate() {
            let mut row = vec![t.to_string(), p.to_string()];
            row.extend((0..d).map(|i| batch.prices[[p, n, i]].to_string()));
            w.write_record(&row).map_err(|e| Error::Format(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}
