use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use super::ConvergenceReport;
use crate::error::Result;

/// Two columns `kappa,d`, one row per level.
pub fn write_dkappa_csv<W: Write>(report: &ConvergenceReport, mut w: W) -> std::io::Result<()> {
    writeln!(w, "kappa,d")?;
    for l in &report.levels {
        writeln!(w, "{},{}", l.kappa, l.d)?;
    }
    Ok(())
}

/// Writes `report.json`, `dkappa.csv` and, when the report carries them,
/// `trajectories/path<j>_N<steps>.csv`.
pub fn emit_report(report: &ConvergenceReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut json = BufWriter::new(File::create(dir.join("report.json"))?);
    serde_json::to_writer_pretty(&mut json, report)?;
    writeln!(json)?;
    json.flush()?;
    let mut csv = BufWriter::new(File::create(dir.join("dkappa.csv"))?);
    write_dkappa_csv(report, &mut csv)?;
    csv.flush()?;
    if !report.trajectories.is_empty() {
        let tdir = dir.join("trajectories");
        fs::create_dir_all(&tdir)?;
        for p in &report.trajectories {
            for t in std::iter::once(&p.reference).chain(&p.levels) {
                let name = format!("path{}_N{}.csv", p.path, t.len() - 1);
                let mut f = BufWriter::new(File::create(tdir.join(name))?);
                t.write_csv(&mut f)?;
                f.flush()?;
            }
        }
    }
    Ok(())
}
