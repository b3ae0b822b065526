//! CSV reports: per-record scores and evaluation rows.

use std::io::{Read, Write};
use std::path::Path;

use crate::deviation::ScoredExample;
use crate::error::{OodError, Result};
use crate::fsutil::write_atomic;
use crate::metrics::EvalResult;

/// Column names of the scores CSV for the given layer indices.
pub fn scores_header(layers: &[usize]) -> String {
    let mut h = String::from("record_index,predicted_class,delta_total");
    for l in layers {
        h.push_str(&format!(",delta_layer_{l}"));
    }
    h
}

/// Seventeen significant digits, enough for an exact `f64` round trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_scores<W: Write>(w: &mut W, layers: &[usize], scored: &[ScoredExample]) -> Result<()> {
    writeln!(w, "{}", scores_header(layers))?;
    for (i, s) in scored.iter().enumerate() {
        write!(w, "{i},{},{}", s.predicted_class, fmt_f64(s.total_deviation))?;
        for d in &s.layer_deviations {
            write!(w, ",{}", fmt_f64(*d))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn save_scores(path: impl AsRef<Path>, layers: &[usize], scored: &[ScoredExample]) -> Result<()> {
    write_atomic(path.as_ref(), |w| write_scores(w, layers, scored))
}

/// Reads the `delta_total` column of a scores CSV, checking every row has
/// the header's column count.
pub fn read_total_deviations<R: Read>(r: R) -> Result<Vec<f64>> {
    let parse = |m: String| OodError::Parse(m);
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let headers = rdr.headers().map_err(|e| parse(e.to_string()))?.clone();
    let required = ["record_index", "predicted_class", "delta_total"];
    for (i, name) in required.iter().enumerate() {
        if headers.get(i) != Some(*name) {
            return Err(parse(format!("scores CSV column {i} must be {name:?}")));
        }
    }
    if let Some((i, h)) = headers
        .iter()
        .enumerate()
        .skip(3)
        .find(|(_, h)| !h.starts_with("delta_layer_"))
    {
        return Err(parse(format!("unexpected scores CSV column {i}: {h:?}")));
    }
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse(format!("row {row}: {e}")))?;
        if rec.len() != headers.len() {
            return Err(parse(format!(
                "row {row} has {} columns, header has {}",
                rec.len(),
                headers.len()
            )));
        }
        let v: f64 = rec[2]
            .trim()
            .parse()
            .map_err(|_| parse(format!("row {row}: bad delta_total {:?}", &rec[2])))?;
        out.push(v);
    }
    Ok(out)
}

pub fn load_total_deviations(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    read_total_deviations(std::fs::File::open(path)?)
}

pub fn save_eval(path: impl AsRef<Path>, result: &EvalResult) -> Result<()> {
    write_atomic(path.as_ref(), |w| {
        writeln!(w, "{}", EvalResult::CSV_HEADER)?;
        writeln!(w, "{}", result.csv_row())?;
        Ok(())
    })
}
