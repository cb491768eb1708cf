//! Observation series persistence.
//!
//! Two interchangeable on-disk formats, both lossless at f64 precision:
//!
//! - CSV with header `t,p_i,p_q`; floats are written with Rust's shortest
//!   round-trip formatting.
//! - a raw little-endian float64 triplet stream `(t, p_i, p_q)` per
//!   sample, no header.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector2;

use crate::model::ObservationSeries;
use crate::{Error, Result};

pub fn write_series_csv<W: Write>(series: &ObservationSeries, out: W) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "t,p_i,p_q")?;
    for (i, p) in series.samples.iter().enumerate() {
        writeln!(w, "{},{},{}", i + 1, p[0], p[1])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_series_csv<R: Read>(input: R) -> Result<ObservationSeries> {
    let reader = BufReader::new(input);
    let mut samples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if lineno == 0 {
            if line != "t,p_i,p_q" {
                return Err(Error::Parse(format!(
                    "expected header 't,p_i,p_q', got '{line}'"
                )));
            }
            continue;
        }
        let mut fields = line.split(',');
        let t: usize = next_field(&mut fields, lineno, "t")?;
        let p_i: f64 = next_field(&mut fields, lineno, "p_i")?;
        let p_q: f64 = next_field(&mut fields, lineno, "p_q")?;
        if t != samples.len() + 1 {
            return Err(Error::Parse(format!(
                "non-contiguous time index {t} at line {}",
                lineno + 1
            )));
        }
        samples.push(Vector2::new(p_i, p_q));
    }
    Ok(ObservationSeries::new(samples))
}

fn next_field<T: std::str::FromStr>(
    fields: &mut std::str::Split<'_, char>,
    lineno: usize,
    name: &str,
) -> Result<T> {
    fields
        .next()
        .ok_or_else(|| Error::Parse(format!("missing field {name} at line {}", lineno + 1)))?
        .parse()
        .map_err(|_| Error::Parse(format!("bad field {name} at line {}", lineno + 1)))
}

pub fn write_series_bin<W: Write>(series: &ObservationSeries, out: W) -> Result<()> {
    let mut w = BufWriter::new(out);
    for (i, p) in series.samples.iter().enumerate() {
        w.write_all(&((i + 1) as f64).to_le_bytes())?;
        w.write_all(&p[0].to_le_bytes())?;
        w.write_all(&p[1].to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_series_bin<R: Read>(mut input: R) -> Result<ObservationSeries> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() % 24 != 0 {
        return Err(Error::Parse(format!(
            "binary series length {} is not a multiple of 24",
            bytes.len()
        )));
    }
    let mut samples = Vec::with_capacity(bytes.len() / 24);
    for (idx, chunk) in bytes.chunks_exact(24).enumerate() {
        let t = f64::from_le_bytes(chunk[0..8].try_into().unwrap());
        let p_i = f64::from_le_bytes(chunk[8..16].try_into().unwrap());
        let p_q = f64::from_le_bytes(chunk[16..24].try_into().unwrap());
        if t != (idx + 1) as f64 {
            return Err(Error::Parse(format!(
                "non-contiguous time index {t} at record {idx}"
            )));
        }
        samples.push(Vector2::new(p_i, p_q));
    }
    Ok(ObservationSeries::new(samples))
}

pub fn save_series_csv(series: &ObservationSeries, path: &Path) -> Result<()> {
    write_series_csv(series, std::fs::File::create(path)?)
}

pub fn load_series_csv(path: &Path) -> Result<ObservationSeries> {
    read_series_csv(std::fs::File::open(path)?)
}

pub fn save_series_bin(series: &ObservationSeries, path: &Path) -> Result<()> {
    write_series_bin(series, std::fs::File::create(path)?)
}

pub fn load_series_bin(path: &Path) -> Result<ObservationSeries> {
    read_series_bin(std::fs::File::open(path)?)
}

/// Loads a series by extension: `.csv` or anything else as binary.
pub fn load_series(path: &Path) -> Result<ObservationSeries> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => load_series_csv(path),
        _ => load_series_bin(path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{simulate_flds, FldsModel, InitialState};
    use crate::rng::RngHandle;

    fn sample_series() -> ObservationSeries {
        let model = FldsModel::study_config(2).unwrap();
        let mut rng = RngHandle::new(99, 0);
        simulate_flds(&model, 257, InitialState::Random, &mut rng).unwrap().0
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let series = sample_series();
        let mut buf = Vec::new();
        write_series_csv(&series, &mut buf).unwrap();
        let back = read_series_csv(buf.as_slice()).unwrap();
        assert_eq!(series.samples, back.samples);
    }

    #[test]
    fn bin_round_trip_is_lossless() {
        let series = sample_series();
        let mut buf = Vec::new();
        write_series_bin(&series, &mut buf).unwrap();
        assert_eq!(buf.len(), series.len() * 24);
        let back = read_series_bin(buf.as_slice()).unwrap();
        assert_eq!(series.samples, back.samples);
    }

    #[test]
    fn csv_rejects_bad_header() {
        assert!(read_series_csv("a,b,c\n1,0,0\n".as_bytes()).is_err());
    }

    #[test]
    fn bin_rejects_truncated_stream() {
        let series = sample_series();
        let mut buf = Vec::new();
        write_series_bin(&series, &mut buf).unwrap();
        buf.pop();
        assert!(read_series_bin(buf.as_slice()).is_err());
    }
}
