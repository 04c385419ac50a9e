//! CSV measurement logs: one row per ToA sample.
//!
//! Header is exactly `step,user_id,gps_x,gps_y,gps_z,toa_s`; rows are sorted
//! by `(step, user_id)`, both 1-based.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::{MeasurementSample, Vec3};

pub const HEADER: [&str; 6] = ["step", "user_id", "gps_x", "gps_y", "gps_z", "toa_s"];

pub fn read_measurements<R: Read>(reader: R) -> Result<Vec<MeasurementSample>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Schema(e.to_string()))?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != HEADER {
        return Err(Error::Schema(format!("expected header `{}`, found `{}`", HEADER.join(","), got.join(","))));
    }
    let mut out: Vec<MeasurementSample> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // data rows are numbered from 1, the header excluded
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Row { row, message: e.to_string() })?;
        let field = |j: usize| rec.get(j).unwrap_or("").trim();
        let int = |j: usize| -> Result<usize> {
            field(j).parse::<usize>().map_err(|e| Error::Row {
                row,
                message: format!("{}: {e}", HEADER[j]),
            })
        };
        let num = |j: usize| -> Result<f64> {
            let v = field(j).parse::<f64>().map_err(|e| Error::Row {
                row,
                message: format!("{}: {e}", HEADER[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Row { row, message: format!("{}: not finite", HEADER[j]) });
            }
            Ok(v)
        };
        let s = MeasurementSample {
            step: int(0)?,
            user_id: int(1)?,
            gps_pos: Vec3::new(num(2)?, num(3)?, num(4)?),
            toa: num(5)?,
        };
        if s.step == 0 || s.user_id == 0 {
            return Err(Error::Row { row, message: "step and user_id are 1-based".into() });
        }
        if s.toa < 0.0 {
            return Err(Error::Row { row, message: "negative toa".into() });
        }
        if let Some(prev) = out.last() {
            if (s.step, s.user_id) <= (prev.step, prev.user_id) {
                return Err(Error::Row { row, message: "rows not sorted by (step, user_id)".into() });
            }
            if s.step == prev.step && s.gps_pos != prev.gps_pos {
                return Err(Error::Row { row, message: "conflicting GPS fix within a step".into() });
            }
        }
        out.push(s);
    }
    Ok(out)
}

pub fn write_measurements<W: Write>(writer: W, samples: &[MeasurementSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(HEADER).map_err(csv_err)?;
    for s in samples {
        w.write_record([
            s.step.to_string(),
            s.user_id.to_string(),
            format!("{:?}", s.gps_pos.x),
            format!("{:?}", s.gps_pos.y),
            format!("{:?}", s.gps_pos.z),
            format!("{:?}", s.toa),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
