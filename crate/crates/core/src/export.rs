//! Result files written by the CLI. Output is byte-for-byte deterministic for
//! a given result.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::measlog::write_measurements;
use crate::mission::MissionResult;

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn f(v: f64) -> String {
    format!("{v:?}")
}

/// Writes `trajectory.csv`, `users.csv`, `crb_history.csv`,
/// `measurements.csv` and `metrics.json` into `dir`, creating it if needed.
pub fn export_results(r: &MissionResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let mut w = csv::Writer::from_path(dir.join("trajectory.csv")).map_err(csv_err)?;
    w.write_record([
        "step", "true_x", "true_y", "true_z", "gps_x", "gps_y", "gps_z", "est_x", "est_y", "est_z", "retained",
    ])
    .map_err(csv_err)?;
    for i in 0..r.true_trajectory.len() {
        let t = r.true_trajectory[i];
        let g = r.gps[i];
        let e = r.estimated_trajectory[i];
        w.write_record([
            (i + 1).to_string(),
            f(t.x),
            f(t.y),
            f(t.z),
            f(g.x),
            f(g.y),
            f(g.z),
            f(e.x),
            f(e.y),
            f(e.z),
            (r.retained[i] as u8).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("users.csv")).map_err(csv_err)?;
    w.write_record(["user_id", "true_x", "true_y", "est_x", "est_y", "error"])
        .map_err(csv_err)?;
    for (k, (t, e)) in r.true_users.iter().zip(&r.estimated_users).enumerate() {
        w.write_record([(k + 1).to_string(), f(t.x), f(t.y), f(e.x), f(e.y), f(t.distance(*e))])
            .map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("crb_history.csv")).map_err(csv_err)?;
    w.write_record(["step", "crb_trace"]).map_err(csv_err)?;
    for (i, c) in r.crb_history.iter().enumerate() {
        w.write_record([(i + 1).to_string(), f(*c)]).map_err(csv_err)?;
    }
    w.flush()?;

    write_measurements(BufWriter::new(File::create(dir.join("measurements.csv"))?), &r.measurements)?;

    let json = serde_json::json!({
        "converged": r.converged,
        "unconverged_solves": r.unconverged_solves,
        "final_crb": r.crb_history.last().copied(),
        "metrics": r.metrics,
    });
    let mut out = BufWriter::new(File::create(dir.join("metrics.json"))?);
    serde_json::to_writer_pretty(&mut out, &json).map_err(|e| Error::Io(e.into()))?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}
