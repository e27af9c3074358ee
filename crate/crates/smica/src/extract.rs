//! Source time-course recovery and sensor-space denoising.
//!
//! The Wiener path applies the per-band gain `W_b` to the band-limited data
//! and sums over bands; content outside the modeled bands (including DC and
//! Nyquist) is discarded. The pseudo-inverse path applies `(A^T A)^{-1} A^T`
//! to the mean-removed recording and ignores the noise model.

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Result, SmicaError};
use crate::model::{self, SmicaParams};
use crate::spectral::{band_bins, BandSpec, Recording};

/// How a source estimate was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractionMethod {
    Wiener,
    PseudoInverse,
}

/// Estimated source time courses, `q x T`.
#[derive(Debug, Clone)]
pub struct SourceEstimate {
    pub data: DMatrix<f64>,
    pub method: ExtractionMethod,
    pub bands: BandSpec,
}

/// Forward half-spectrum per channel with the `T^{-1/2}` convention; entry
/// `k` of each row is bin `k`, for `k = 0..=floor(T/2)`.
fn half_spectra(data: &DMatrix<f64>) -> Vec<Vec<Complex<f64>>> {
    let p = data.nrows();
    let t = data.ncols();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(t);
    let scale = 1.0 / (t as f64).sqrt();
    let mut out = Vec::with_capacity(p);
    let mut buf = vec![Complex::new(0.0, 0.0); t];
    for r in 0..p {
        for (s, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(data[(r, s)], 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..=t / 2].iter().map(|c| c * scale).collect());
    }
    out
}

/// Inverse of [`half_spectra`] for one channel: Hermitian completion, inverse
/// transform, real part.
fn real_inverse(half: &[Complex<f64>], t: usize) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(t);
    let mut buf = vec![Complex::new(0.0, 0.0); t];
    buf[0] = half[0];
    for k in 1..=t / 2 {
        buf[k] = half[k];
        if k != t - k {
            buf[t - k] = half[k].conj();
        }
    }
    ifft.process(&mut buf);
    let scale = 1.0 / (t as f64).sqrt();
    buf.iter().map(|c| c.re * scale).collect()
}

/// Keep only the DFT bins inside `band` (half-open, DC and Nyquist always
/// dropped) and transform back; shape and sampling rate are preserved.
pub fn band_filter(rec: &Recording, band: (f64, f64)) -> Result<Recording> {
    let (lo, hi) = band;
    if !lo.is_finite() || !hi.is_finite() || lo <= 0.0 || hi <= lo {
        return Err(SmicaError::Config(format!("band [{lo}, {hi}) is empty or inverted")));
    }
    let spec = SelectedBins::for_bands(&[(lo, hi)], rec.samples(), rec.fs())?;
    let t = rec.samples();
    let spectra = half_spectra(rec.data());
    let p = rec.channels();
    let mut out = DMatrix::<f64>::zeros(p, t);
    for r in 0..p {
        let mut masked = vec![Complex::new(0.0, 0.0); t / 2 + 1];
        for &k in &spec.bins[0] {
            masked[k] = spectra[r][k];
        }
        let row = real_inverse(&masked, t);
        for s in 0..t {
            out[(r, s)] = row[s];
        }
    }
    Recording::new(out, rec.fs())
}

/// Bin selection shared by the extraction paths; one bin list per band.
struct SelectedBins {
    bins: Vec<Vec<usize>>,
}

impl SelectedBins {
    fn for_bands(edges: &[(f64, f64)], t: usize, fs: f64) -> Result<Self> {
        // reuse the estimator's assignment when there are >= 2 bands; a
        // single interval gets the same half-open treatment
        if edges.len() >= 2 {
            let spec = BandSpec::new(edges.to_vec())?;
            return Ok(Self { bins: band_bins(&spec, t, fs)? });
        }
        let (lo, hi) = edges[0];
        if hi > fs / 2.0 {
            return Err(SmicaError::Config(format!(
                "band [{lo}, {hi}) extends beyond the Nyquist frequency {}",
                fs / 2.0
            )));
        }
        let last = if t.is_multiple_of(2) { t / 2 - 1 } else { t / 2 };
        let mut bins = Vec::new();
        for k in 1..=last {
            let f = k as f64 * fs / t as f64;
            if f >= lo && f < hi {
                bins.push(k);
            }
        }
        if bins.is_empty() {
            return Err(SmicaError::Config(format!(
                "band [{lo}, {hi}) contains no DFT bin at T={t}, fs={fs}"
            )));
        }
        Ok(Self { bins: vec![bins] })
    }
}

/// Wiener source estimates: `sum_b W_b X_b` with `X_b` the band-limited data.
pub fn wiener_sources(params: &SmicaParams, rec: &Recording) -> Result<SourceEstimate> {
    if rec.channels() != params.p() {
        return Err(SmicaError::Config(format!(
            "recording has {} channels but the model expects {}",
            rec.channels(),
            params.p()
        )));
    }
    let t = rec.samples();
    let q = params.q();
    let p = params.p();
    let bins = band_bins(&params.bands, t, rec.fs())?;
    let spectra = half_spectra(rec.data());
    let mut source_spectra = vec![vec![Complex::new(0.0, 0.0); t / 2 + 1]; q];
    for (b, kb) in bins.iter().enumerate() {
        let (w, _) = model::wiener_filter(params, b)?;
        for &k in kb {
            for i in 0..q {
                let mut acc = Complex::new(0.0, 0.0);
                for (j, ch) in spectra.iter().enumerate().take(p) {
                    acc += ch[k] * w[(i, j)];
                }
                source_spectra[i][k] = acc;
            }
        }
    }
    let mut data = DMatrix::<f64>::zeros(q, t);
    for (i, half) in source_spectra.iter().enumerate() {
        let row = real_inverse(half, t);
        for s in 0..t {
            data[(i, s)] = row[s];
        }
    }
    Ok(SourceEstimate {
        data,
        method: ExtractionMethod::Wiener,
        bands: params.bands.clone(),
    })
}

/// Pseudo-inverse source estimates on the mean-removed recording:
/// `(A^T A)^{-1} A^T X`.
pub fn pinv_sources(params: &SmicaParams, rec: &Recording) -> Result<SourceEstimate> {
    if rec.channels() != params.p() {
        return Err(SmicaError::Config(format!(
            "recording has {} channels but the model expects {}",
            rec.channels(),
            params.p()
        )));
    }
    let a = &params.mixing;
    let gram = a.transpose() * a;
    let chol = nalgebra::Cholesky::new(gram).ok_or_else(|| {
        SmicaError::Numerical("mixing matrix is rank deficient; pseudo-inverse undefined".into())
    })?;
    let p = rec.channels();
    let t = rec.samples();
    let mut centered = rec.data().clone();
    for r in 0..p {
        let mean = centered.row(r).sum() / t as f64;
        for s in 0..t {
            centered[(r, s)] -= mean;
        }
    }
    let data = chol.solve(&(a.transpose() * centered));
    Ok(SourceEstimate {
        data,
        method: ExtractionMethod::PseudoInverse,
        bands: params.bands.clone(),
    })
}

/// Project Wiener sources back to sensor space with the listed sources
/// zeroed: `X_cleaned = A S_hat` after `S_hat[i] = 0` for `i` in `spurious`.
pub fn denoise(params: &SmicaParams, rec: &Recording, spurious: &[usize]) -> Result<Recording> {
    for &i in spurious {
        if i >= params.q() {
            return Err(SmicaError::Config(format!(
                "spurious source index {i} out of range (q={})",
                params.q()
            )));
        }
    }
    let mut sources = wiener_sources(params, rec)?;
    for &i in spurious {
        for s in 0..sources.data.ncols() {
            sources.data[(i, s)] = 0.0;
        }
    }
    let cleaned = &params.mixing * &sources.data;
    Recording::new(cleaned, rec.fs())
}
