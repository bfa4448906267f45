//! Special functions and the small amount of dense linear algebra the model needs.
//!
//! Every function here is pure. Reductions over short vectors go through
//! [`ordered_sum`], which sums in ascending order so that results do not depend
//! on the order in which concepts are labelled.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{PaceError, Result};

/// Relative scale of the regularization added to a covariance that fails to factor.
pub const JITTER_SCALE: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// B_{2k} / (2k) for k = 1..6; the series is truncated after the x^-12 term.
const DIGAMMA_SERIES: [f64; 6] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
];

/// Digamma function Ψ(x) = d/dx ln Γ(x) for x > 0.
///
/// Shifts the argument up with Ψ(x) = Ψ(x + 1) − 1/x until x ≥ 6, then
/// evaluates the asymptotic expansion
/// `ln x − 1/(2x) − Σ B_{2k} / (2k x^{2k})`.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(PaceError::Domain(format!("digamma requires x > 0, got {x}")));
    }
    let mut shift = 0.0;
    let mut x = x;
    while x < 6.0 {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    // Horner form of the tail, highest power first.
    let mut tail = 0.0;
    for c in DIGAMMA_SERIES.iter().rev() {
        tail = (tail + c) * inv2;
    }
    Ok(shift + x.ln() - 0.5 / x - tail)
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the Gamma function for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(PaceError::Domain(format!("ln_gamma requires x > 0, got {x}")));
    }
    Ok(ln_gamma_positive(x))
}

fn ln_gamma_positive(x: f64) -> f64 {
    if x < 0.5 {
        // reflection: Γ(x)Γ(1−x) = π / sin(πx)
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma_positive(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * LN_2PI + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Sum that is invariant under any permutation of its inputs.
///
/// Values are sorted ascending (total order) before accumulation.
pub fn ordered_sum<I>(values: I) -> f64
where
    I: IntoIterator<Item = f64>,
{
    let mut buf: Vec<f64> = values.into_iter().collect();
    buf.sort_by(f64::total_cmp);
    buf.iter().sum()
}

/// Permutation-invariant dot product.
pub fn ordered_dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    ordered_sum(a.iter().zip(b.iter()).map(|(x, y)| x * y))
}

/// `log Σ exp(v_i)` computed with a max shift.
///
/// Entries equal to −∞ contribute nothing; an all −∞ input returns −∞.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(PaceError::Domain("log_sum_exp of an empty vector".into()));
    }
    if v.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(PaceError::Domain("log_sum_exp input is not finite".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(max);
    }
    Ok(max + ordered_sum(v.iter().map(|x| (x - max).exp())).ln())
}

/// Softmax of `v`, normalized with [`log_sum_exp`].
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(v)?;
    Ok(v.iter().map(|x| (x - lse).exp()).collect())
}

/// A symmetric matrix that is expected to be positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(Array2<f64>);

impl SpdMatrix {
    /// Wrap a square matrix, checking symmetry to 1e-12 relative to its largest entry.
    pub fn new(m: Array2<f64>) -> Result<Self> {
        let (r, c) = m.dim();
        if r != c || r == 0 {
            return Err(PaceError::Shape(format!(
                "covariance must be square and non-empty, got {r}x{c}"
            )));
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(PaceError::Domain("covariance has non-finite entries".into()));
        }
        let scale = m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
        let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
        for i in 0..r {
            for j in (i + 1)..r {
                if (m[[i, j]] - m[[j, i]]).abs() > tol {
                    return Err(PaceError::Domain(format!(
                        "covariance is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(SpdMatrix(m))
    }

    pub fn identity(dim: usize) -> Self {
        SpdMatrix(Array2::eye(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.diag().sum()
    }

    /// Jitter used when the raw matrix fails to factor: `1e-6 · trace / d`,
    /// falling back to `1e-6` when the trace vanishes.
    pub fn default_jitter(&self) -> f64 {
        let mean_var = self.trace() / self.dim() as f64;
        let scale = if mean_var > 0.0 && mean_var.is_finite() {
            mean_var
        } else {
            1.0
        };
        JITTER_SCALE * scale
    }

    fn with_jitter(&self, jitter: f64) -> Self {
        let mut m = self.0.clone();
        for i in 0..m.nrows() {
            m[[i, i]] += jitter;
        }
        SpdMatrix(m)
    }
}

/// Lower Cholesky factor `L` with `L Lᵀ = Σ + jitter·I`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    lower: Array2<f64>,
    log_det: f64,
    jitter: f64,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    /// log |Σ + jitter·I|.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Forward substitution: returns `L⁻¹ v`.
    pub fn solve_lower(&self, v: ArrayView1<f64>) -> Array1<f64> {
        let n = self.dim();
        let mut out = Array1::zeros(n);
        for i in 0..n {
            let mut s = v[i];
            for k in 0..i {
                s -= self.lower[[i, k]] * out[k];
            }
            out[i] = s / self.lower[[i, i]];
        }
        out
    }

    /// `vᵀ Σ⁻¹ v`.
    pub fn mahalanobis(&self, v: ArrayView1<f64>) -> f64 {
        let w = self.solve_lower(v);
        w.dot(&w)
    }
}

/// Factor `m + jitter·I`. A non-positive pivot is a singularity error.
pub fn cholesky_factor(m: &SpdMatrix, jitter: f64) -> Result<CholeskyFactor> {
    if !(jitter >= 0.0) {
        return Err(PaceError::Domain(format!("jitter must be nonnegative, got {jitter}")));
    }
    let a = &m.0;
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]] + jitter;
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(PaceError::Singular {
                concept: None,
                pivot: j,
            });
        }
        let ljj = d.sqrt();
        l[[j, j]] = ljj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / ljj;
        }
    }
    let log_det = 2.0 * l.diag().iter().map(|x| x.ln()).sum::<f64>();
    Ok(CholeskyFactor {
        lower: l,
        log_det,
        jitter,
    })
}

/// Factor `m` as is, or with [`SpdMatrix::default_jitter`] when the raw matrix fails.
pub fn factor_regularized(m: &SpdMatrix) -> Result<CholeskyFactor> {
    match cholesky_factor(m, 0.0) {
        Ok(f) => Ok(f),
        Err(PaceError::Singular { .. }) => cholesky_factor(m, m.default_jitter()),
        Err(e) => Err(e),
    }
}

/// Like [`factor_regularized`], but folds the applied jitter into the returned matrix.
pub fn regularize(m: SpdMatrix) -> Result<(SpdMatrix, CholeskyFactor)> {
    let f = factor_regularized(&m)?;
    let out = if f.jitter > 0.0 {
        m.with_jitter(f.jitter)
    } else {
        m
    };
    Ok((out, f))
}

/// `log N(e | mean, Σ)` where Σ is given by its Cholesky factor.
pub fn log_gaussian(e: ArrayView1<f64>, mean: ArrayView1<f64>, cov: &CholeskyFactor) -> Result<f64> {
    let d = cov.dim();
    if e.len() != d || mean.len() != d {
        return Err(PaceError::Shape(format!(
            "log_gaussian: point has {} dims, mean {}, covariance {d}",
            e.len(),
            mean.len()
        )));
    }
    let diff = &e - &mean;
    let q = cov.mahalanobis(diff.view());
    Ok(-0.5 * q - 0.5 * d as f64 * LN_2PI - 0.5 * cov.log_det())
}
