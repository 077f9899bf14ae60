//! Numerical kernel: local regression, weighted least squares, quantiles,
//! histogram entropy, Gaussian kernel weights and a low-rank Gaussian model
//! with conditional expectations.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatError {
    #[error("too few points: need {need}, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("degenerate design: {0}")]
    DegenerateDesign(&'static str),
    #[error("empty input")]
    EmptyInput,
    #[error("histogram masses are not a probability distribution (sum {0})")]
    NotNormalized(f64),
    #[error("rank {rank} exceeds dimension {dim}")]
    RankTooLarge { rank: usize, dim: usize },
    #[error("need at least 2 vectors, got {0}")]
    TooFewDays(usize),
    #[error("conditioning block is singular")]
    SingularConditioningBlock,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Smoothed curve evaluated on a sorted grid of abscissae.
#[derive(Debug, Clone, PartialEq)]
pub struct LoessFit {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub span: f64,
    pub degree: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoessParams {
    pub span: f64,
    pub degree: usize,
}

impl Default for LoessParams {
    fn default() -> Self {
        Self { span: 0.3, degree: 1 }
    }
}

/// Local polynomial regression with tricube weights over the `span`-nearest
/// points. Abscissae outside the data range reuse the local polynomial fitted
/// at the nearest data boundary.
pub fn loess_fit(points: &[(f64, f64)], params: LoessParams, eval_x: &[f64]) -> Result<LoessFit, StatError> {
    let LoessParams { span, degree } = params;
    if !(span > 0.0 && span <= 1.0) {
        return Err(StatError::InvalidArgument(format!("span {span} not in (0, 1]")));
    }
    if points.len() < degree + 1 {
        return Err(StatError::TooFewPoints { need: degree + 1, got: points.len() });
    }
    if eval_x.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(StatError::InvalidArgument("evaluation abscissae must be strictly increasing".into()));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let n = xs.len();
    let q = ((span * n as f64).ceil() as usize).clamp(degree + 1, n);
    let (xmin, xmax) = (xs[0], xs[n - 1]);

    let mut y = Vec::with_capacity(eval_x.len());
    for &x0 in eval_x {
        let centre = x0.clamp(xmin, xmax);
        let local = local_poly(&xs, &ys, centre, q, degree)?;
        y.push(local.eval(x0));
    }
    Ok(LoessFit { x: eval_x.to_vec(), y, span, degree })
}

struct LocalPoly {
    centre: f64,
    scale: f64,
    coef: Vec<f64>,
}

impl LocalPoly {
    fn eval(&self, x: f64) -> f64 {
        let u = (x - self.centre) / self.scale;
        self.coef.iter().rev().fold(0.0, |acc, c| acc * u + c)
    }
}

fn local_poly(xs: &[f64], ys: &[f64], x0: f64, q: usize, degree: usize) -> Result<LocalPoly, StatError> {
    let n = xs.len();
    // Grow [lo, hi) from the insertion point, taking the nearer side; ties go left.
    let mut lo = xs.partition_point(|&x| x < x0);
    let mut hi = lo;
    while hi - lo < q {
        let take_left = match (lo > 0, hi < n) {
            (true, true) => x0 - xs[lo - 1] <= xs[hi] - x0,
            (true, false) => true,
            (false, _) => false,
        };
        if take_left {
            lo -= 1;
        } else {
            hi += 1;
        }
    }
    let h = (x0 - xs[lo]).max(xs[hi - 1] - x0);
    if !(h > 0.0) {
        return Err(StatError::DegenerateDesign("all abscissae in the local window coincide"));
    }
    let m = degree + 1;
    let mut ata = vec![0.0; m * m];
    let mut atb = vec![0.0; m];
    let mut pw = vec![0.0; 2 * m - 1];
    for i in lo..hi {
        let u = (xs[i] - x0) / h;
        let r = u.abs();
        if r >= 1.0 {
            continue;
        }
        let w = (1.0 - r * r * r).powi(3);
        let mut p = w;
        for slot in pw.iter_mut() {
            *slot = p;
            p *= u;
        }
        for a in 0..m {
            atb[a] += pw[a] * ys[i];
            for b in 0..m {
                ata[a * m + b] += pw[a + b];
            }
        }
    }
    let coef = solve_small(&mut ata, &mut atb, m)
        .ok_or(StatError::DegenerateDesign("local design matrix is singular"))?;
    Ok(LocalPoly { centre: x0, scale: h, coef })
}

/// Gaussian elimination with partial pivoting on a small dense system.
fn solve_small(a: &mut [f64], b: &mut [f64], m: usize) -> Option<Vec<f64>> {
    let scale = (0..m).map(|i| a[i * m + i].abs()).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return None;
    }
    for col in 0..m {
        let piv = (col..m).max_by(|&i, &j| a[i * m + col].abs().total_cmp(&a[j * m + col].abs()))?;
        if a[piv * m + col].abs() <= 1e-12 * scale {
            return None;
        }
        if piv != col {
            for k in 0..m {
                a.swap(piv * m + k, col * m + k);
            }
            b.swap(piv, col);
        }
        for row in col + 1..m {
            let f = a[row * m + col] / a[col * m + col];
            for k in col..m {
                a[row * m + k] -= f * a[col * m + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; m];
    for row in (0..m).rev() {
        let s: f64 = (row + 1..m).map(|k| a[row * m + k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row * m + row];
    }
    Some(x)
}

/// Straight line `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub intercept: f64,
    pub slope: f64,
}

impl Line {
    pub fn eval(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

/// Exact minimiser of `sum w_i (y_i - a - b x_i)^2`.
pub fn wls_fit(points: &[(f64, f64)], weights: &[f64]) -> Result<Line, StatError> {
    if points.len() != weights.len() {
        return Err(StatError::InvalidArgument("points and weights differ in length".into()));
    }
    let mut sw = 0.0;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut first_x = None;
    let mut distinct = false;
    for (&(x, y), &w) in points.iter().zip(weights) {
        if w < 0.0 || !w.is_finite() {
            return Err(StatError::InvalidArgument(format!("weight {w} must be finite and non-negative")));
        }
        if w == 0.0 {
            continue;
        }
        sw += w;
        sx += w * x;
        sy += w * y;
        match first_x {
            None => first_x = Some(x),
            Some(x1) if x1 != x => distinct = true,
            _ => {}
        }
    }
    if !(sw > 0.0) || !distinct {
        return Err(StatError::DegenerateDesign("need two distinct abscissae with positive weight"));
    }
    let xm = sx / sw;
    let ym = sy / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&(x, y), &w) in points.iter().zip(weights) {
        let dx = x - xm;
        sxx += w * dx * dx;
        sxy += w * dx * (y - ym);
    }
    if !(sxx > 0.0) {
        return Err(StatError::DegenerateDesign("zero weighted spread in x"));
    }
    let slope = sxy / sxx;
    Ok(Line { intercept: ym - slope * xm, slope })
}

/// Linear-interpolation quantile at 1-based rank `1 + p (n - 1)`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64, StatError> {
    if values.is_empty() {
        return Err(StatError::EmptyInput);
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(StatError::InvalidArgument(format!("p = {p} not in [0, 1]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&v, p))
}

pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> Option<f64> {
    percentile(values, 0.5).ok()
}

/// Shannon entropy in nats of a normalised histogram.
pub fn entropy(masses: &[f64]) -> Result<f64, StatError> {
    let total: f64 = masses.iter().sum();
    if masses.iter().any(|&m| m < 0.0 || !m.is_finite()) || (total - 1.0).abs() > 1e-9 {
        return Err(StatError::NotNormalized(total));
    }
    let h = -masses.iter().filter(|&&m| m > 0.0).map(|&m| m * m.ln()).sum::<f64>();
    Ok(h + 0.0)
}

/// Fixed-width histogram on `[lo, hi]`, returned as masses. Values at or
/// beyond the upper edge fall in the last bin.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bin_width: f64) -> Result<Vec<f64>, StatError> {
    if values.is_empty() {
        return Err(StatError::EmptyInput);
    }
    if !(bin_width > 0.0 && hi > lo) {
        return Err(StatError::InvalidArgument("bad histogram range".into()));
    }
    let bins = ((hi - lo) / bin_width).round().max(1.0) as usize;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / bin_width).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = values.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Zero-mean Gaussian density with standard deviation `sigma`.
pub fn gaussian_weight(distance: f64, sigma: f64) -> f64 {
    let z = distance / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Ridge {
    /// `1e-6 * trace / dim` of the empirical covariance.
    #[default]
    Auto,
    Fixed(f64),
    /// Mean of the discarded eigenvalues, as in probabilistic PCA; falls back
    /// to [`Ridge::Auto`] when nothing is discarded.
    Residual,
}

/// Mean plus a covariance made of the top eigenpairs and a diagonal ridge.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedGaussianModel {
    mean: Vec<f64>,
    eigenvalues: Vec<f64>,
    /// dim x rank; columns paired with `eigenvalues`. Columns for zero
    /// eigenvalues may be zero vectors.
    eigenvectors: DMatrix<f64>,
    ridge: f64,
}

impl TruncatedGaussianModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }
    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Builds a model from an explicit covariance matrix (row-major).
    pub fn from_covariance(mean: Vec<f64>, cov: &[f64], rank: usize, ridge: f64) -> Result<Self, StatError> {
        let dim = mean.len();
        if cov.len() != dim * dim {
            return Err(StatError::InvalidArgument("covariance shape".into()));
        }
        if rank == 0 || rank > dim {
            return Err(StatError::RankTooLarge { rank, dim });
        }
        let m = DMatrix::from_row_slice(dim, dim, cov);
        let (vals, vecs) = top_eigenpairs(m, rank);
        Ok(Self { mean, eigenvalues: vals, eigenvectors: vecs, ridge })
    }

    /// Reconstructed covariance, row-major.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = self.cov_entry(i, j);
            }
        }
        out
    }

    fn cov_entry(&self, i: usize, j: usize) -> f64 {
        let mut s: f64 = (0..self.rank())
            .map(|k| self.eigenvalues[k] * self.eigenvectors[(i, k)] * self.eigenvectors[(j, k)])
            .sum();
        if i == j {
            s += self.ridge;
        }
        s
    }
}

fn top_eigenpairs(m: DMatrix<f64>, rank: usize) -> (Vec<f64>, DMatrix<f64>) {
    let dim = m.nrows();
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let mut vals = Vec::with_capacity(rank);
    let mut vecs = DMatrix::zeros(dim, rank);
    for (k, &idx) in order.iter().take(rank).enumerate() {
        let lambda = eig.eigenvalues[idx];
        if lambda > 1e-12 * top && lambda > 0.0 {
            vals.push(lambda);
            vecs.set_column(k, &eig.eigenvectors.column(idx));
        } else {
            vals.push(0.0);
        }
    }
    (vals, vecs)
}

/// Fits mean and truncated covariance from day-indexed vectors.
///
/// The covariance uses the `n - 1` denominator. When there are no more
/// vectors than dimensions, the eigenpairs come from the small Gram matrix
/// of the centred data instead of the full covariance.
pub fn fit_truncated_gaussian(vectors: &[Vec<f64>], rank: usize, ridge: Ridge) -> Result<TruncatedGaussianModel, StatError> {
    let n = vectors.len();
    if n < 2 {
        return Err(StatError::TooFewDays(n));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(StatError::InvalidArgument("vectors differ in dimension".into()));
    }
    if rank == 0 || rank > dim {
        return Err(StatError::RankTooLarge { rank, dim });
    }
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred = DMatrix::from_fn(n, dim, |i, j| vectors[i][j] - mean[j]);
    let denom = (n - 1) as f64;

    let (eigenvalues, eigenvectors) = if n <= dim {
        gram_eigenpairs(&centred, denom, rank)
    } else {
        let cov = centred.transpose() * &centred / denom;
        top_eigenpairs(cov, rank)
    };
    let trace: f64 = centred.iter().map(|x| x * x).sum::<f64>() / denom;
    let ridge = match ridge {
        Ridge::Auto => 1e-6 * trace / dim as f64,
        Ridge::Fixed(r) => r,
        Ridge::Residual => {
            let rest = (trace - eigenvalues.iter().sum::<f64>()) / (dim - rank).max(1) as f64;
            if rest > 1e-6 * trace / dim as f64 {
                rest
            } else {
                1e-6 * trace / dim as f64
            }
        }
    };
    Ok(TruncatedGaussianModel { mean, eigenvalues, eigenvectors, ridge })
}

fn gram_eigenpairs(centred: &DMatrix<f64>, denom: f64, rank: usize) -> (Vec<f64>, DMatrix<f64>) {
    let dim = centred.ncols();
    let gram = centred * centred.transpose() / denom;
    let (vals, us) = top_eigenpairs(gram, rank.min(centred.nrows()));
    let mut vecs = DMatrix::zeros(dim, rank);
    let mut out_vals = vec![0.0; rank];
    for (k, &lambda) in vals.iter().enumerate() {
        if lambda <= 0.0 {
            continue;
        }
        // X^T u / sqrt(lambda (n - 1)) is a unit eigenvector of X^T X / (n - 1).
        let v = centred.transpose() * us.column(k) / (lambda * denom).sqrt();
        vecs.set_column(k, &v);
        out_vals[k] = lambda;
    }
    (out_vals, vecs)
}

/// `E[x_u | x_o]` for every index not in `observed`, in ascending order.
pub fn conditional_expectation(
    model: &TruncatedGaussianModel,
    observed: &[usize],
    values: &[f64],
) -> Result<Vec<f64>, StatError> {
    let mut seen = vec![false; model.dim()];
    for &i in observed {
        if i >= model.dim() {
            return Err(StatError::InvalidArgument(format!("index {i} out of range")));
        }
        seen[i] = true;
    }
    let targets: Vec<usize> = (0..model.dim()).filter(|&i| !seen[i]).collect();
    conditional_mean_at(model, observed, values, &targets)
}

/// `E[x_t | x_o]` for the requested target indices.
pub fn conditional_mean_at(
    model: &TruncatedGaussianModel,
    observed: &[usize],
    values: &[f64],
    targets: &[usize],
) -> Result<Vec<f64>, StatError> {
    let dim = model.dim();
    if observed.len() != values.len() {
        return Err(StatError::InvalidArgument("observed indices and values differ in length".into()));
    }
    if observed.len() >= dim {
        return Err(StatError::InvalidArgument("observed set must be a strict subset".into()));
    }
    if observed.iter().chain(targets).any(|&i| i >= dim) {
        return Err(StatError::InvalidArgument("index out of range".into()));
    }
    if observed.is_empty() {
        return Ok(targets.iter().map(|&t| model.mean[t]).collect());
    }
    let innovation = DVector::from_iterator(observed.len(), observed.iter().zip(values).map(|(&i, &x)| x - model.mean[i]));
    let solved = if model.ridge > 0.0 {
        woodbury_solve(model, observed, &innovation)?
    } else {
        dense_solve(model, observed, &innovation)?
    };
    Ok(targets
        .iter()
        .map(|&t| {
            let cross: f64 = observed.iter().zip(solved.iter()).map(|(&o, y)| model.cov_entry(t, o) * y).sum();
            model.mean[t] + cross
        })
        .collect())
}

fn dense_solve(model: &TruncatedGaussianModel, observed: &[usize], z: &DVector<f64>) -> Result<DVector<f64>, StatError> {
    let o = observed.len();
    let block = DMatrix::from_fn(o, o, |a, b| model.cov_entry(observed[a], observed[b]));
    let top = (0..o).map(|i| block[(i, i)]).fold(0.0, f64::max);
    let chol = block.cholesky().ok_or(StatError::SingularConditioningBlock)?;
    let l = chol.l_dirty();
    let min_pivot = (0..o).map(|i| l[(i, i)]).fold(f64::INFINITY, f64::min);
    if !(top > 0.0) || min_pivot * min_pivot <= 1e-12 * top {
        return Err(StatError::SingularConditioningBlock);
    }
    Ok(chol.solve(z))
}

/// `(rho I + E L E^T)^{-1} z` through the rank-sized capacitance matrix.
fn woodbury_solve(model: &TruncatedGaussianModel, observed: &[usize], z: &DVector<f64>) -> Result<DVector<f64>, StatError> {
    let rho = model.ridge;
    let active: Vec<usize> = (0..model.rank()).filter(|&k| model.eigenvalues[k] > 0.0).collect();
    if active.is_empty() {
        return Ok(z / rho);
    }
    let e = DMatrix::from_fn(observed.len(), active.len(), |a, k| model.eigenvectors[(observed[a], active[k])]);
    let mut cap = e.transpose() * &e;
    for (k, &idx) in active.iter().enumerate() {
        cap[(k, k)] += rho / model.eigenvalues[idx];
    }
    let chol = cap.cholesky().ok_or(StatError::SingularConditioningBlock)?;
    let etz = e.transpose() * z;
    let inner = chol.solve(&etz);
    Ok((z - e * inner) / rho)
}
