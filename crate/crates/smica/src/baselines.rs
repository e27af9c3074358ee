//! Baseline methods fully specified by their defining equations: noiseless
//! joint diagonalization of the band covariances, and the narrow-band
//! Rayleigh-quotient spatial filter.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SmicaError};
use crate::extract::band_filter;
use crate::spectral::{Recording, SpectralCovarianceSet};

/// Ridge added to covariances before inversion-bearing steps, relative to
/// `trace / p`.
const RIDGE_REL: f64 = 1e-9;

/// Unmixing matrix found by joint diagonalization; rows are ordered by
/// diagonalized power descending.
#[derive(Debug, Clone)]
pub struct Unmixing {
    pub w: DMatrix<f64>,
    /// Final value of the joint-diagonality criterion
    /// `sum_b n_b [logdet diag(W C_b W^T) - logdet(W C_b W^T)]`.
    pub criterion: f64,
    pub converged: bool,
}

/// Options for [`jdiag_fit`].
#[derive(Debug, Clone)]
pub struct JdiagOptions {
    pub max_sweeps: usize,
    /// Relative criterion-decrease stopping threshold.
    pub tol: f64,
}

impl Default for JdiagOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 1000,
            tol: 1e-9,
        }
    }
}

fn ln_det_spd(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let chol = nalgebra::Cholesky::new(m.clone())
        .ok_or_else(|| SmicaError::Numerical(format!("{what} is not positive definite")))?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

fn criterion(transformed: &[DMatrix<f64>], weights: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (s, &w) in transformed.iter().zip(weights) {
        let diag_sum: f64 = s.diagonal().iter().map(|d| d.ln()).sum();
        total += w * (diag_sum - ln_det_spd(s, "transformed covariance")?);
    }
    Ok(total)
}

/// Minimize the joint-diagonality criterion over invertible `W` by pairwise
/// quasi-Newton updates with a backtracking step, so the criterion never
/// increases. Equivalent to the noiseless square spectral model: the
/// criterion is the spectral mismatch at zero noise, up to a constant.
pub fn jdiag_fit(emp: &SpectralCovarianceSet, opts: &JdiagOptions) -> Result<Unmixing> {
    let p = emp.p;
    let nb = emp.mats.len();
    if nb < 2 {
        return Err(SmicaError::Config("joint diagonalization needs at least 2 bands".into()));
    }
    let weights: Vec<f64> = emp.counts.iter().map(|&n| n as f64).collect();
    let total_weight: f64 = weights.iter().sum();

    // ridge keeps rank-deficient inputs invertible
    let mats: Vec<DMatrix<f64>> = emp
        .mats
        .iter()
        .map(|c| {
            let ridge = RIDGE_REL * c.trace() / p as f64;
            c + DMatrix::identity(p, p) * ridge
        })
        .collect();

    // whitening initialization from the weighted mean covariance
    let mut mean = DMatrix::<f64>::zeros(p, p);
    for (c, &w) in mats.iter().zip(&weights) {
        crate::em::add_scaled(&mut mean, w / total_weight, c);
    }
    let eig = mean.symmetric_eigen();
    let floor = 1e-12 * eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let mut w_mat = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        let lambda = eig.eigenvalues[i].max(floor);
        let scale = 1.0 / lambda.sqrt();
        for j in 0..p {
            w_mat[(i, j)] = eig.eigenvectors[(j, i)] * scale;
        }
    }

    let mut transformed: Vec<DMatrix<f64>> = mats
        .iter()
        .map(|c| {
            let m = &w_mat * c * w_mat.transpose();
            (&m + m.transpose()) * 0.5
        })
        .collect();

    let mut crit_prev = criterion(&transformed, &weights)?;
    let mut converged = false;
    for _sweep in 0..opts.max_sweeps {
        for i in 0..p {
            for j in (i + 1)..p {
                pair_update(&mut w_mat, &mut transformed, &weights, total_weight, i, j);
            }
        }
        let crit = criterion(&transformed, &weights)?;
        let decrease = crit_prev - crit;
        let done = decrease <= opts.tol * crit_prev.abs().max(f64::MIN_POSITIVE);
        crit_prev = crit;
        if done {
            converged = true;
            break;
        }
    }

    // normalize rows, fix signs, order by diagonalized power
    let mut powers = vec![0.0f64; p];
    for i in 0..p {
        let norm = w_mat.row(i).norm();
        if norm > 0.0 {
            for j in 0..p {
                w_mat[(i, j)] /= norm;
            }
            for (s, &wt) in transformed.iter().zip(&weights) {
                powers[i] += wt * s[(i, i)] / (norm * norm);
            }
        }
        let mut peak = 0usize;
        for j in 1..p {
            if w_mat[(i, j)].abs() > w_mat[(i, peak)].abs() {
                peak = j;
            }
        }
        if w_mat[(i, peak)] < 0.0 {
            for j in 0..p {
                w_mat[(i, j)] = -w_mat[(i, j)];
            }
        }
    }
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| powers[b].partial_cmp(&powers[a]).unwrap());
    let w_final = DMatrix::from_fn(p, p, |r, c| w_mat[(order[r], c)]);

    Ok(Unmixing {
        w: w_final,
        criterion: crit_prev,
        converged,
    })
}

/// One pairwise update: quasi-Newton step on the transform
/// `[[1, a], [b, 1]]` applied to components `(i, j)`, halved until the exact
/// pair criterion decreases.
fn pair_update(
    w_mat: &mut DMatrix<f64>,
    transformed: &mut [DMatrix<f64>],
    weights: &[f64],
    total_weight: f64,
    i: usize,
    j: usize,
) {
    let mut g_i = 0.0; // d/da at (0,0), halved
    let mut g_j = 0.0;
    let mut h_i = 0.0; // d2/da2 approximation, halved
    let mut h_j = 0.0;
    for (s, &w) in transformed.iter().zip(weights) {
        let sii = s[(i, i)];
        let sjj = s[(j, j)];
        let sij = s[(i, j)];
        g_i += w * sij / sii;
        g_j += w * sij / sjj;
        h_i += w * sjj / sii;
        h_j += w * sii / sjj;
    }
    let det = h_i * h_j - total_weight * total_weight;
    let (mut a, mut b) = if det > 1e-12 * h_i * h_j {
        (
            -(h_j * g_i - total_weight * g_j) / det,
            -(h_i * g_j - total_weight * g_i) / det,
        )
    } else {
        // near-proportional profiles: diagonally preconditioned gradient
        (-g_i / h_i, -g_j / h_j)
    };
    if !(a.is_finite() && b.is_finite()) {
        return;
    }

    // exact criterion change for the pair at step (a, b)
    let delta = |a: f64, b: f64| -> f64 {
        let mut d = 0.0;
        for (s, &w) in transformed.iter().zip(weights) {
            let sii = s[(i, i)];
            let sjj = s[(j, j)];
            let sij = s[(i, j)];
            let new_ii = sii + 2.0 * a * sij + a * a * sjj;
            let new_jj = sjj + 2.0 * b * sij + b * b * sii;
            if new_ii <= 0.0 || new_jj <= 0.0 {
                return f64::INFINITY;
            }
            d += w * ((new_ii / sii).ln() + (new_jj / sjj).ln());
        }
        let det_t = 1.0 - a * b;
        if det_t.abs() < 1e-300 {
            return f64::INFINITY;
        }
        d - 2.0 * total_weight * det_t.abs().ln()
    };

    let mut accepted = false;
    for _ in 0..40 {
        if delta(a, b) < 0.0 {
            accepted = true;
            break;
        }
        a *= 0.5;
        b *= 0.5;
    }
    if !accepted {
        return;
    }

    // rows of W
    for c in 0..w_mat.ncols() {
        let wi = w_mat[(i, c)];
        let wj = w_mat[(j, c)];
        w_mat[(i, c)] = wi + a * wj;
        w_mat[(j, c)] = b * wi + wj;
    }
    // congruence update of every transformed covariance
    for s in transformed.iter_mut() {
        let n = s.nrows();
        for c in 0..n {
            let si = s[(i, c)];
            let sj = s[(j, c)];
            s[(i, c)] = si + a * sj;
            s[(j, c)] = b * si + sj;
        }
        for r in 0..n {
            let si = s[(r, i)];
            let sj = s[(r, j)];
            s[(r, i)] = si + a * sj;
            s[(r, j)] = b * si + sj;
        }
    }
}

/// Spatial filter maximizing narrow-band power at unit broadband variance.
#[derive(Debug, Clone)]
pub struct SpatialFilter {
    pub w: DVector<f64>,
    pub target_freq: f64,
    pub bandwidth: f64,
}

impl SpatialFilter {
    /// Filtered series `w^T X` for a compatible recording.
    pub fn apply(&self, rec: &Recording) -> Result<DVector<f64>> {
        if rec.channels() != self.w.len() {
            return Err(SmicaError::Config(format!(
                "filter has {} weights but the recording has {} channels",
                self.w.len(),
                rec.channels()
            )));
        }
        Ok((self.w.transpose() * rec.data()).transpose())
    }
}

fn covariance_of(data: &DMatrix<f64>, centered: bool) -> DMatrix<f64> {
    let p = data.nrows();
    let t = data.ncols();
    let mut d = data.clone();
    if centered {
        for r in 0..p {
            let mean = d.row(r).sum() / t as f64;
            for s in 0..t {
                d[(r, s)] -= mean;
            }
        }
    }
    let c = &d * d.transpose() / t as f64;
    (&c + c.transpose()) * 0.5
}

fn chol_with_ridge(c: &DMatrix<f64>, what: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(ch) = nalgebra::Cholesky::new(c.clone()) {
        return Ok(ch);
    }
    let p = c.nrows();
    let ridge = RIDGE_REL * c.trace().abs().max(f64::MIN_POSITIVE) / p as f64;
    nalgebra::Cholesky::new(c + DMatrix::identity(p, p) * ridge)
        .ok_or_else(|| SmicaError::Numerical(format!("{what} is singular even after ridging")))
}

/// Spatio-spectral decomposition: the leading generalized eigenvector of
/// `(Cov(X_f), Cov(X))` with `X_f` the recording filtered to
/// `target_freq +/- bandwidth/2`, scaled so that `Var(w^T X) = 1`.
pub fn ssd(rec: &Recording, target_freq: f64, bandwidth: f64) -> Result<SpatialFilter> {
    let lo = target_freq - bandwidth / 2.0;
    let hi = target_freq + bandwidth / 2.0;
    if !lo.is_finite() || lo <= 0.0 || hi > rec.fs() / 2.0 {
        return Err(SmicaError::Config(format!(
            "narrow band [{lo}, {hi}] must lie within (0, {})",
            rec.fs() / 2.0
        )));
    }
    let narrow = band_filter(rec, (lo, hi))?;
    let cov_narrow = covariance_of(narrow.data(), false);
    let cov_broad = covariance_of(rec.data(), true);

    let chol = chol_with_ridge(&cov_broad, "broadband covariance")?;
    // reduce the pencil to a symmetric problem: with B = L L^T, the matrix
    // L^{-1} A L^{-T} has the generalized eigenvalues
    let li = chol
        .l()
        .try_inverse()
        .ok_or_else(|| SmicaError::Numerical("triangular factor not invertible".into()))?;
    let sym = &li * &cov_narrow * li.transpose();
    let sym = (&sym + sym.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut top = 0usize;
    for k in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[k] > eig.eigenvalues[top] {
            top = k;
        }
    }
    let y = eig.eigenvectors.column(top).into_owned();
    let y = &y / y.norm();
    let mut w = li.transpose() * y;
    // sign convention: dominant weight positive
    let mut peak = 0usize;
    for r in 1..w.len() {
        if w[r].abs() > w[peak].abs() {
            peak = r;
        }
    }
    if w[peak] < 0.0 {
        w = -w;
    }
    Ok(SpatialFilter {
        w,
        target_freq,
        bandwidth,
    })
}
