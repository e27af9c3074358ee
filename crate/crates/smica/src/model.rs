//! Model parameters and the spectral-matching loss.
//!
//! The model for each band is `C_b = A diag(P_b) A^T + diag(Sigma_b)`. The
//! loss is the band sum `2 n_b KL(Chat_b, C_b)`, which equals the negative
//! Whittle log-likelihood of the recording up to a constant. Scale is not
//! identifiable (rescaling a column of `A` can be absorbed into the source
//! powers), so fitted parameters are reduced to a canonical form.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SmicaError};
use crate::spectral::{BandSpec, SpectralCovarianceSet};

/// Relative floor applied to source and noise powers; the likelihood
/// degenerates as any power reaches zero.
pub const POWER_FLOOR_REL: f64 = 1e-12;

/// Mixing matrix plus per-band diagonal source and noise powers.
#[derive(Debug, Clone)]
pub struct SmicaParams {
    /// `p x q` mixing matrix.
    pub mixing: DMatrix<f64>,
    /// `B x q` source band powers (row `b` holds the diagonal of `P_b`).
    pub source_power: DMatrix<f64>,
    /// `B x p` noise band powers (row `b` holds the diagonal of `Sigma_b`).
    pub noise_power: DMatrix<f64>,
    pub bands: BandSpec,
}

impl SmicaParams {
    pub fn new(
        mixing: DMatrix<f64>,
        source_power: DMatrix<f64>,
        noise_power: DMatrix<f64>,
        bands: BandSpec,
    ) -> Result<Self> {
        let (p, q) = mixing.shape();
        let nb = bands.len();
        if q > p {
            return Err(SmicaError::Config(format!(
                "more sources than sensors: q={q} > p={p}"
            )));
        }
        if source_power.shape() != (nb, q) {
            return Err(SmicaError::Config(format!(
                "source power shape {:?} does not match (B={nb}, q={q})",
                source_power.shape()
            )));
        }
        if noise_power.shape() != (nb, p) {
            return Err(SmicaError::Config(format!(
                "noise power shape {:?} does not match (B={nb}, p={p})",
                noise_power.shape()
            )));
        }
        if source_power.iter().chain(noise_power.iter()).any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(SmicaError::Config(
                "band powers must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            mixing,
            source_power,
            noise_power,
            bands,
        })
    }

    pub fn p(&self) -> usize {
        self.mixing.nrows()
    }

    pub fn q(&self) -> usize {
        self.mixing.ncols()
    }

    pub fn n_bands(&self) -> usize {
        self.bands.len()
    }

    /// Canonical form: unit-norm mixing columns with the squared norms folded
    /// into the source powers, the dominant entry of each column positive,
    /// and sources ordered by total power `sum_b n_b P_b[i]` descending.
    pub fn canonicalize(&self, counts: &[usize]) -> Result<SmicaParams> {
        if counts.len() != self.n_bands() {
            return Err(SmicaError::Config(format!(
                "count vector length {} does not match band count {}",
                counts.len(),
                self.n_bands()
            )));
        }
        let (p, q) = self.mixing.shape();
        let mut mixing = self.mixing.clone();
        let mut power = self.source_power.clone();
        for i in 0..q {
            let norm = mixing.column(i).norm();
            if norm > 0.0 {
                for r in 0..p {
                    mixing[(r, i)] /= norm;
                }
                for b in 0..self.n_bands() {
                    power[(b, i)] *= norm * norm;
                }
            }
            let mut peak = 0usize;
            for r in 1..p {
                if mixing[(r, i)].abs() > mixing[(peak, i)].abs() {
                    peak = r;
                }
            }
            if mixing[(peak, i)] < 0.0 {
                for r in 0..p {
                    mixing[(r, i)] = -mixing[(r, i)];
                }
            }
        }
        let mut order: Vec<usize> = (0..q).collect();
        let totals: Vec<f64> = (0..q)
            .map(|i| {
                (0..self.n_bands())
                    .map(|b| counts[b] as f64 * power[(b, i)])
                    .sum()
            })
            .collect();
        order.sort_by(|&a, &b| totals[b].partial_cmp(&totals[a]).unwrap());
        let mixing_sorted = DMatrix::from_fn(p, q, |r, i| mixing[(r, order[i])]);
        let power_sorted = DMatrix::from_fn(self.n_bands(), q, |b, i| power[(b, order[i])]);
        SmicaParams::new(
            mixing_sorted,
            power_sorted,
            self.noise_power.clone(),
            self.bands.clone(),
        )
    }
}

/// Model covariance for one band: `A diag(P_b) A^T + diag(Sigma_b)`.
pub fn model_covariance(params: &SmicaParams, b: usize) -> Result<DMatrix<f64>> {
    if b >= params.n_bands() {
        return Err(SmicaError::Config(format!(
            "band index {b} out of range (B={})",
            params.n_bands()
        )));
    }
    let p = params.p();
    let q = params.q();
    let a = &params.mixing;
    let mut c = DMatrix::<f64>::zeros(p, p);
    for i in 0..q {
        let pw = params.source_power[(b, i)];
        for r in 0..p {
            let ar = a[(r, i)] * pw;
            for s in r..p {
                c[(r, s)] += ar * a[(s, i)];
            }
        }
    }
    for r in 0..p {
        c[(r, r)] += params.noise_power[(b, r)];
        for s in 0..r {
            c[(r, s)] = c[(s, r)];
        }
    }
    Ok(c)
}

fn chol_ln_det(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Log-determinant of a symmetric PSD matrix. Cholesky when positive
/// definite; otherwise an eigenvalue fallback that returns `-inf` for a
/// singular matrix.
fn psd_ln_det(c: &DMatrix<f64>) -> f64 {
    match nalgebra::Cholesky::new(c.clone()) {
        Some(ch) => chol_ln_det(&ch),
        None => {
            let eig = c.clone().symmetric_eigen();
            let tol = 1e-14 * c.trace().abs().max(f64::MIN_POSITIVE);
            let mut acc = 0.0;
            for &l in eig.eigenvalues.iter() {
                if l <= tol {
                    return f64::NEG_INFINITY;
                }
                acc += l.ln();
            }
            acc
        }
    }
}

/// Kullback-Leibler divergence between covariance matrices:
/// `(Tr(C1 C2^{-1}) - logdet(C1 C2^{-1}) - p) / 2`. Nonnegative, and zero
/// exactly when the matrices are equal. `C1` may be singular (the result is
/// then `+inf`); a singular `C2` is an error.
pub fn kl_divergence(c1: &DMatrix<f64>, c2: &DMatrix<f64>) -> Result<f64> {
    let p = c1.nrows();
    if c1.shape() != c2.shape() || c1.nrows() != c1.ncols() {
        return Err(SmicaError::Config(format!(
            "KL divergence needs square matrices of equal size, got {:?} and {:?}",
            c1.shape(),
            c2.shape()
        )));
    }
    let chol2 = nalgebra::Cholesky::new(c2.clone()).ok_or_else(|| {
        SmicaError::Numerical("second covariance in KL divergence is not positive definite".into())
    })?;
    let solved = chol2.solve(c1);
    let trace = solved.trace();
    let ln_det1 = psd_ln_det(c1);
    let ln_det2 = chol_ln_det(&chol2);
    Ok(0.5 * (trace - (ln_det1 - ln_det2) - p as f64))
}

/// Spectral-matching loss: `sum_b 2 n_b KL(Chat_b, C_b(params))`.
pub fn loss(params: &SmicaParams, emp: &SpectralCovarianceSet) -> Result<f64> {
    check_compatible(params, emp)?;
    let mut total = 0.0;
    for b in 0..emp.mats.len() {
        let model = model_covariance(params, b)?;
        let kl = kl_divergence(&emp.mats[b], &model).map_err(|e| match e {
            SmicaError::Numerical(msg) => SmicaError::Numerical(format!("band {b}: {msg}")),
            other => other,
        })?;
        total += 2.0 * emp.counts[b] as f64 * kl;
    }
    Ok(total)
}

pub(crate) fn check_compatible(params: &SmicaParams, emp: &SpectralCovarianceSet) -> Result<()> {
    if params.p() != emp.p {
        return Err(SmicaError::Config(format!(
            "parameter sensor count {} does not match covariance set ({})",
            params.p(),
            emp.p
        )));
    }
    if params.bands != emp.bands {
        return Err(SmicaError::Config(
            "parameter bands do not match covariance set bands".into(),
        ));
    }
    Ok(())
}

/// Per-band Wiener filter and source posterior covariance:
/// `Gamma_b = (A^T Sigma_b^{-1} A + P_b^{-1})^{-1}` and
/// `W_b = Gamma_b A^T Sigma_b^{-1}`. Returns `(W_b, Gamma_b)`.
pub fn wiener_filter(params: &SmicaParams, b: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if b >= params.n_bands() {
        return Err(SmicaError::Config(format!(
            "band index {b} out of range (B={})",
            params.n_bands()
        )));
    }
    let (p, q) = (params.p(), params.q());
    let a = &params.mixing;
    // A^T Sigma^{-1}: scale column r of A^T by 1/sigma_{b,r}
    let mut at_sinv = DMatrix::<f64>::zeros(q, p);
    for r in 0..p {
        let s = params.noise_power[(b, r)];
        if !s.is_finite() || s <= 0.0 {
            return Err(SmicaError::Numerical(format!(
                "band {b}: noise power for sensor {r} is not positive"
            )));
        }
        let inv = 1.0 / s;
        for i in 0..q {
            at_sinv[(i, r)] = a[(r, i)] * inv;
        }
    }
    let mut g = &at_sinv * a;
    for i in 0..q {
        let pw = params.source_power[(b, i)];
        if !pw.is_finite() || pw <= 0.0 {
            return Err(SmicaError::Numerical(format!(
                "band {b}: source power for source {i} is not positive"
            )));
        }
        g[(i, i)] += 1.0 / pw;
    }
    let chol = nalgebra::Cholesky::new(g).ok_or_else(|| {
        SmicaError::Numerical(format!("band {b}: Wiener filter system is singular"))
    })?;
    let w = chol.solve(&at_sinv);
    let gamma = chol.inverse();
    Ok((w, gamma))
}

/// Source/noise power floor for one band, relative to the scale of the
/// empirical covariance: `1e-12 * mean(diag(Chat_b))`.
pub(crate) fn power_floor(chat: &DMatrix<f64>) -> f64 {
    POWER_FLOOR_REL * chat.trace() / chat.nrows() as f64
}

/// Serializable form of [`SmicaParams`]; matrices are stored by rows.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct ParamsFile {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    #[serde(rename = "Sigma")]
    pub sigma: Vec<Vec<f64>>,
    pub bands: Vec<(f64, f64)>,
}

impl From<&SmicaParams> for ParamsFile {
    fn from(params: &SmicaParams) -> Self {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows())
                .map(|r| m.row(r).iter().copied().collect())
                .collect()
        };
        ParamsFile {
            a: rows(&params.mixing),
            p: rows(&params.source_power),
            sigma: rows(&params.noise_power),
            bands: params.bands.edges().to_vec(),
        }
    }
}

impl ParamsFile {
    pub fn into_params(self) -> Result<SmicaParams> {
        let bands = BandSpec::new(self.bands)?;
        let to_matrix = |rows: &[Vec<f64>], what: &str| -> Result<DMatrix<f64>> {
            if rows.is_empty() {
                return Err(SmicaError::Data(format!("{what} matrix is empty")));
            }
            let ncols = rows[0].len();
            if rows.iter().any(|r| r.len() != ncols) {
                return Err(SmicaError::Data(format!("{what} matrix rows have uneven lengths")));
            }
            Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
        };
        let a = to_matrix(&self.a, "A")?;
        let p = to_matrix(&self.p, "P")?;
        let sigma = to_matrix(&self.sigma, "Sigma")?;
        SmicaParams::new(a, p, sigma, bands)
    }
}

/// Helper used across tests and baselines: total power of each source,
/// weighted by bin counts.
pub fn source_totals(params: &SmicaParams, counts: &[usize]) -> DVector<f64> {
    DVector::from_fn(params.q(), |i, _| {
        (0..params.n_bands())
            .map(|b| counts[b] as f64 * params.source_power[(b, i)])
            .sum()
    })
}
