//! Band-averaged empirical spectral covariance matrices.
//!
//! A multichannel recording is mapped to one symmetric covariance matrix per
//! frequency band by averaging `Re(x_k x_k^H)` over the DFT bins falling in
//! the band. The DC bin and the Nyquist bin are never used: the model assumes
//! zero-mean series and phase-invariant complex coefficients, neither of
//! which holds at those bins.

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Result, SmicaError};

/// Multichannel time series: `p` channels by `T` samples, with sampling rate.
#[derive(Debug, Clone)]
pub struct Recording {
    data: DMatrix<f64>,
    fs: f64,
}

impl Recording {
    /// Build a recording from a `p x T` matrix (rows are channels).
    pub fn new(data: DMatrix<f64>, fs: f64) -> Result<Self> {
        if !fs.is_finite() || fs <= 0.0 {
            return Err(SmicaError::Config(format!(
                "sampling rate must be a positive finite number, got {fs}"
            )));
        }
        if data.nrows() < 1 {
            return Err(SmicaError::Data("recording has no channels".into()));
        }
        if data.ncols() < 2 {
            return Err(SmicaError::Data(format!(
                "recording needs at least 2 samples, got {}",
                data.ncols()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(SmicaError::Data(
                "recording contains non-finite samples".into(),
            ));
        }
        Ok(Self { data, fs })
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }
}

/// Ordered disjoint frequency intervals, half-open `[lo, hi)` for bin
/// assignment so each DFT bin belongs to at most one band.
#[derive(Debug, Clone, PartialEq)]
pub struct BandSpec {
    edges: Vec<(f64, f64)>,
}

impl BandSpec {
    pub fn new(edges: Vec<(f64, f64)>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(SmicaError::Config(format!(
                "at least 2 bands are required for spectral diversity, got {}",
                edges.len()
            )));
        }
        let mut prev_hi = 0.0_f64;
        for (i, &(lo, hi)) in edges.iter().enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(SmicaError::Config(format!("band {i} has non-finite edges")));
            }
            if lo <= 0.0 {
                return Err(SmicaError::Config(format!(
                    "band {i} lower edge {lo} must be > 0"
                )));
            }
            if lo >= hi {
                return Err(SmicaError::Config(format!(
                    "band {i} is empty or inverted: [{lo}, {hi})"
                )));
            }
            if lo < prev_hi {
                return Err(SmicaError::Config(format!(
                    "band {i} overlaps the previous band (starts at {lo}, previous ends at {prev_hi})"
                )));
            }
            prev_hi = hi;
        }
        Ok(Self { edges })
    }

    /// `count` contiguous bands of equal width spanning `[lo, hi)`.
    pub fn uniform(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if count < 2 {
            return Err(SmicaError::Config(format!(
                "uniform band spec needs at least 2 bands, got {count}"
            )));
        }
        if !lo.is_finite() || !hi.is_finite() || lo <= 0.0 || hi <= lo {
            return Err(SmicaError::Config(format!(
                "uniform band range [{lo}, {hi}) is invalid"
            )));
        }
        let width = (hi - lo) / count as f64;
        let edges = (0..count)
            .map(|b| (lo + b as f64 * width, lo + (b + 1) as f64 * width))
            .collect();
        Self::new(edges)
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn edges(&self) -> &[(f64, f64)] {
        &self.edges
    }

    /// Restrict the spec to `[fmin, fmax]`: bands are trimmed to the range
    /// and bands left empty are dropped.
    pub fn clip(&self, fmin: Option<f64>, fmax: Option<f64>) -> Result<Self> {
        let lo_cut = fmin.unwrap_or(0.0);
        let hi_cut = fmax.unwrap_or(f64::INFINITY);
        let edges: Vec<(f64, f64)> = self
            .edges
            .iter()
            .filter_map(|&(lo, hi)| {
                let lo = lo.max(lo_cut);
                let hi = hi.min(hi_cut);
                (lo < hi).then_some((lo, hi))
            })
            .collect();
        if edges.len() < 2 {
            return Err(SmicaError::Config(format!(
                "clipping to [{lo_cut}, {hi_cut}] leaves {} band(s); at least 2 are required",
                edges.len()
            )));
        }
        Self::new(edges)
    }
}

/// One empirical covariance matrix per band plus the bin count behind each.
#[derive(Debug, Clone)]
pub struct SpectralCovarianceSet {
    pub mats: Vec<DMatrix<f64>>,
    pub counts: Vec<usize>,
    pub bands: BandSpec,
    pub p: usize,
}

/// Usable DFT bin indices `k = 1..=floor(T/2)` with DC excluded and, for even
/// `T`, the Nyquist bin excluded as well.
fn last_usable_bin(t: usize) -> usize {
    if t.is_multiple_of(2) {
        t / 2 - 1
    } else {
        t / 2
    }
}

/// Assign usable bins to bands. Bin `k` has frequency `k fs / T` and belongs
/// to band `[lo, hi)` under the half-open rule. Errors if bands reach beyond
/// the Nyquist frequency or if any band captures no bin.
pub(crate) fn band_bins(bands: &BandSpec, t: usize, fs: f64) -> Result<Vec<Vec<usize>>> {
    let nyquist = fs / 2.0;
    for (b, &(lo, hi)) in bands.edges().iter().enumerate() {
        if hi > nyquist {
            return Err(SmicaError::Config(format!(
                "band {b} [{lo}, {hi}) extends beyond the Nyquist frequency {nyquist}"
            )));
        }
    }
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); bands.len()];
    let mut band = 0usize;
    for k in 1..=last_usable_bin(t) {
        let f = k as f64 * fs / t as f64;
        while band < bands.len() && f >= bands.edges()[band].1 {
            band += 1;
        }
        if band == bands.len() {
            break;
        }
        if f >= bands.edges()[band].0 {
            bins[band].push(k);
        }
    }
    for (b, kb) in bins.iter().enumerate() {
        if kb.is_empty() {
            let (lo, hi) = bands.edges()[b];
            return Err(SmicaError::Config(format!(
                "band {b} [{lo}, {hi}) contains no DFT bin at T={t}, fs={fs}"
            )));
        }
    }
    Ok(bins)
}

/// Forward coefficients for in-range bins only: a `p x floor(T/2)` complex
/// matrix whose column `j` holds bin `k = j + 1`, with the convention
/// `x_k = T^{-1/2} sum_t X(t) exp(-2 pi i k t / T)`. Channel means are
/// removed before the transform.
pub fn fourier_coefficients(rec: &Recording) -> Result<DMatrix<Complex<f64>>> {
    let p = rec.channels();
    let t = rec.samples();
    let half = t / 2;
    let mut out = DMatrix::<Complex<f64>>::zeros(p, half);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(t);
    let scale = 1.0 / (t as f64).sqrt();
    let mut buf = vec![Complex::new(0.0, 0.0); t];
    for r in 0..p {
        let mean = rec.data().row(r).sum() / t as f64;
        for (s, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(rec.data()[(r, s)] - mean, 0.0);
        }
        fft.process(&mut buf);
        for k in 1..=half {
            out[(r, k - 1)] = buf[k] * scale;
        }
    }
    Ok(out)
}

/// Empirical band-averaged spectral covariances: for each band,
/// `(1/n_b) sum_{k in band} Re(x_k x_k^H)`, with `n_b` the bin count.
pub fn estimate_spectral_covariances(
    rec: &Recording,
    bands: &BandSpec,
) -> Result<SpectralCovarianceSet> {
    let p = rec.channels();
    let bins = band_bins(bands, rec.samples(), rec.fs())?;
    let coeffs = fourier_coefficients(rec)?;
    let mut mats = Vec::with_capacity(bands.len());
    let mut counts = Vec::with_capacity(bands.len());
    for kb in &bins {
        let mut c = DMatrix::<f64>::zeros(p, p);
        for &k in kb {
            let col = coeffs.column(k - 1);
            for a in 0..p {
                let xa = col[a];
                for b in a..p {
                    let xb = col[b];
                    // Re(x_a conj(x_b))
                    c[(a, b)] += xa.re * xb.re + xa.im * xb.im;
                }
            }
        }
        let n = kb.len();
        c /= n as f64;
        for a in 0..p {
            for b in 0..a {
                c[(a, b)] = c[(b, a)];
            }
        }
        mats.push(c);
        counts.push(n);
    }
    Ok(SpectralCovarianceSet {
        mats,
        counts,
        bands: bands.clone(),
        p,
    })
}
