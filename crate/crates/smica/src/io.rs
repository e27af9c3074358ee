//! File formats: CSV recordings (rows are time samples, columns are
//! channels, optional header) and JSON artifacts. All floating-point numbers
//! are written with 17 significant digits so every artifact round-trips
//! losslessly at double precision and byte-identical reruns are possible.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Result, SmicaError};
use crate::spectral::{Recording, SpectralCovarianceSet};

/// 17 significant digits: one leading digit plus 16 fractional digits in
/// scientific notation.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

struct SigDigitFormatter;

impl serde_json::ser::Formatter for SigDigitFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

/// Serialize to JSON with fixed-width floats (plus a trailing newline).
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SigDigitFormatter);
    value
        .serialize(&mut ser)
        .map_err(|e| SmicaError::Data(format!("JSON serialization failed: {e}")))?;
    out.push(b'\n');
    String::from_utf8(out).map_err(|e| SmicaError::Data(format!("JSON is not UTF-8: {e}")))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json_string(value)?)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| SmicaError::Data(format!("{}: invalid JSON: {e}", path.display())))
}

#[derive(serde::Deserialize)]
struct Sidecar {
    fs: f64,
}

/// Sampling rate for a recording: the explicit flag wins; otherwise a JSON
/// sidecar next to the input (same stem, `.json` extension) with `{"fs": x}`.
pub fn resolve_fs(input: &Path, flag: Option<f64>) -> Result<f64> {
    if let Some(fs) = flag {
        return Ok(fs);
    }
    let sidecar = input.with_extension("json");
    if sidecar.exists() {
        let parsed: Sidecar = read_json(&sidecar)?;
        return Ok(parsed.fs);
    }
    Err(SmicaError::Config(format!(
        "no sampling rate: pass --fs or provide a sidecar {}",
        sidecar.display()
    )))
}

/// Read a recording CSV. A first row with any non-numeric field is treated
/// as a header. Returns the data as `p x T` (channels by samples).
pub fn read_recording(path: &Path, fs: f64) -> Result<Recording> {
    let file = std::fs::File::open(path)
        .map_err(|e| SmicaError::Config(format!("cannot open {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut ncols = None;
    for (idx, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| SmicaError::Data(format!("{}: {e}", path.display())))?;
        let parsed: std::result::Result<Vec<f64>, _> =
            record.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(row) => {
                if let Some(n) = ncols {
                    if row.len() != n {
                        return Err(SmicaError::Data(format!(
                            "{}: row {} has {} fields, expected {n}",
                            path.display(),
                            idx + 1,
                            row.len()
                        )));
                    }
                } else {
                    ncols = Some(row.len());
                }
                rows.push(row);
            }
            Err(_) if idx == 0 => continue, // header row
            Err(e) => {
                return Err(SmicaError::Data(format!(
                    "{}: row {} is not numeric: {e}",
                    path.display(),
                    idx + 1
                )))
            }
        }
    }
    let t = rows.len();
    let p = ncols.ok_or_else(|| SmicaError::Data(format!("{} is empty", path.display())))?;
    // stored as channels x samples internally
    let data = DMatrix::from_fn(p, t, |r, s| rows[s][r]);
    Recording::new(data, fs)
}

/// Write a `rows x cols` matrix as CSV with `prefix0..prefixN` headers; time
/// runs down the rows.
pub fn write_matrix_csv(path: &Path, data: &DMatrix<f64>, transpose: bool, prefix: &str) -> Result<()> {
    let owned;
    let m: &DMatrix<f64> = if transpose {
        owned = data.transpose();
        &owned
    } else {
        data
    };
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    let header: Vec<String> = (0..m.ncols()).map(|c| format!("{prefix}{c}")).collect();
    writeln!(w, "{}", header.join(","))?;
    let mut line = String::new();
    for r in 0..m.nrows() {
        line.clear();
        for c in 0..m.ncols() {
            if c > 0 {
                line.push(',');
            }
            line.push_str(&format_f64(m[(r, c)]));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Serializable form of a [`SpectralCovarianceSet`]; each matrix is a flat
/// row-major array of length `p * p`.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct SpectraFile {
    pub bands: Vec<(f64, f64)>,
    pub counts: Vec<usize>,
    pub p: usize,
    pub mats: Vec<Vec<f64>>,
}

impl From<&SpectralCovarianceSet> for SpectraFile {
    fn from(set: &SpectralCovarianceSet) -> Self {
        SpectraFile {
            bands: set.bands.edges().to_vec(),
            counts: set.counts.clone(),
            p: set.p,
            mats: set
                .mats
                .iter()
                .map(|m| {
                    (0..m.nrows())
                        .flat_map(|r| m.row(r).iter().copied().collect::<Vec<_>>())
                        .collect()
                })
                .collect(),
        }
    }
}
