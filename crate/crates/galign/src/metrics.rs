//! Generative evaluation: Fréchet distance between Gaussian feature fits,
//! unbiased kernel MMD with a polynomial kernel, and k-NN density/coverage.
//!
//! Feature extraction is pluggable. The default is the fixed-seed random
//! conv stack, which gives internally consistent comparisons without any
//! pretrained weights; reports always carry the extractor identity so
//! numbers from different extractors are never compared.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::local_align::FeatureExtractor;
use crate::scalar::{fl, Scalar};

// ---- symmetric eigendecomposition (cyclic Jacobi) ----

/// Eigenvalues and eigenvectors (columns) of a symmetric matrix.
pub fn jacobi_eigh<T: Scalar>(a: &Array2<T>) -> Result<(Array1<T>, Array2<T>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Numerical("eigh needs a square matrix".into()));
    }
    let mut m = a.clone();
    let mut v = Array2::<T>::eye(n);
    let off = |m: &Array2<T>| {
        let mut s = T::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[[i, j]] * m[[i, j]];
                }
            }
        }
        s
    };
    let frob = {
        let mut s = T::zero();
        for x in m.iter() {
            s += *x * *x;
        }
        s
    };
    let tol = fl::<T>(1e-28) * frob.max(T::one());
    for _sweep in 0..100 {
        if off(&m) <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (fl::<T>(2.0) * apq);
                let t = {
                    let denom = theta.abs() + (theta * theta + T::one()).sqrt();
                    let t = T::one() / denom;
                    if theta < T::zero() {
                        -t
                    } else {
                        t
                    }
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = Array1::from_shape_fn(n, |i| m[[i, i]]);
    Ok((eig, v))
}

/// Negative-eigenvalue clip threshold for PSD square roots.
const EIG_CLIP_TOL: f64 = 1e-6;

fn sqrt_psd<T: Scalar>(a: &Array2<T>) -> Result<Array2<T>> {
    let (eig, v) = jacobi_eigh(a)?;
    let max_eig = eig.iter().cloned().fold(T::zero(), T::max);
    let floor = -fl::<T>(EIG_CLIP_TOL) * max_eig.max(T::one());
    let mut worst = T::zero();
    for &l in eig.iter() {
        if l < worst {
            worst = l;
        }
    }
    if worst < floor {
        return Err(Error::Numerical(format!(
            "matrix square root failed: eigenvalue {} below clip tolerance {} (max eigenvalue {})",
            worst.as_f64(),
            floor.as_f64(),
            max_eig.as_f64()
        )));
    }
    let n = a.nrows();
    let mut out = Array2::<T>::zeros((n, n));
    for k in 0..n {
        let s = eig[k].max(T::zero()).sqrt();
        if s == T::zero() {
            continue;
        }
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += s * v[[i, k]] * v[[j, k]];
            }
        }
    }
    Ok(out)
}

// ---- feature statistics and Fréchet distance ----

/// Mean and covariance of a feature point cloud.
#[derive(Debug, Clone)]
pub struct FeatureStats<T: Scalar> {
    pub mean: Array1<T>,
    pub cov: Array2<T>,
    pub count: usize,
}

impl<T: Scalar> FeatureStats<T> {
    /// Unbiased covariance from `[n, d]` points; requires `n >= 2`. The
    /// covariance is explicitly symmetrized.
    pub fn from_points(points: &Array2<T>) -> Result<Self> {
        let (n, d) = points.dim();
        if n < 2 {
            return Err(Error::Config(format!(
                "need at least 2 points for feature statistics, got {n}"
            )));
        }
        let inv_n = T::one() / fl::<T>(n as f64);
        let mean = Array1::from_shape_fn(d, |j| {
            points.column(j).iter().cloned().sum::<T>() * inv_n
        });
        let inv = T::one() / fl::<T>((n - 1) as f64);
        let mut cov = Array2::<T>::zeros((d, d));
        for r in 0..n {
            for i in 0..d {
                let di = points[[r, i]] - mean[i];
                for j in i..d {
                    cov[[i, j]] += di * (points[[r, j]] - mean[j]) * inv;
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                cov[[i, j]] = cov[[j, i]];
            }
        }
        Ok(FeatureStats { mean, cov, count: n })
    }

    pub fn dims(&self) -> usize {
        self.mean.len()
    }
}

/// Fréchet distance between two Gaussian fits:
/// `||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2))`. The matrix root is
/// taken through the symmetric product `B Sa B` with `B = sqrt(Sb)`.
pub fn frechet_distance<T: Scalar>(a: &FeatureStats<T>, b: &FeatureStats<T>) -> Result<T> {
    if a.dims() != b.dims() {
        return Err(Error::Config(format!(
            "feature dimensionality mismatch: {} vs {}",
            a.dims(),
            b.dims()
        )));
    }
    let d = a.dims();
    let mut mean_term = T::zero();
    for i in 0..d {
        let diff = a.mean[i] - b.mean[i];
        mean_term += diff * diff;
    }
    let b_root = sqrt_psd(&b.cov)?;
    let inner = b_root.dot(&a.cov).dot(&b_root);
    // symmetrize against rounding before the second root
    let inner = {
        let mut s = inner.clone();
        for i in 0..d {
            for j in 0..d {
                s[[i, j]] = (inner[[i, j]] + inner[[j, i]]) * fl::<T>(0.5);
            }
        }
        s
    };
    let (eig, _) = jacobi_eigh(&inner)?;
    let max_eig = eig.iter().cloned().fold(T::zero(), T::max);
    let floor = -fl::<T>(EIG_CLIP_TOL) * max_eig.max(T::one());
    let mut tr_sqrt = T::zero();
    for &l in eig.iter() {
        if l < floor {
            return Err(Error::Numerical(format!(
                "cross-covariance root failed: eigenvalue {} below tolerance {}",
                l.as_f64(),
                floor.as_f64()
            )));
        }
        tr_sqrt += l.max(T::zero()).sqrt();
    }
    let mut trace = T::zero();
    for i in 0..d {
        trace = trace + a.cov[[i, i]] + b.cov[[i, i]];
    }
    Ok(mean_term + trace - fl::<T>(2.0) * tr_sqrt)
}

// ---- kernel MMD (KID) ----

fn poly_kernel<T: Scalar>(x: &[T], y: &[T], degree: usize) -> T {
    let d = fl::<T>(x.len() as f64);
    let mut dot = T::zero();
    for (a, b) in x.iter().zip(y.iter()) {
        dot += *a * *b;
    }
    let base = dot / d + T::one();
    let mut out = T::one();
    for _ in 0..degree {
        out *= base;
    }
    out
}

fn kid_impl<T: Scalar>(
    a: &Array2<T>,
    b: &Array2<T>,
    degree: usize,
    exclude_cross_diagonal: bool,
) -> Result<T> {
    let (m, da) = a.dim();
    let (n, db) = b.dim();
    if da != db {
        return Err(Error::Config("KID feature dimensions differ".into()));
    }
    if m < 2 || n < 2 {
        return Err(Error::Config("KID needs at least 2 points per set".into()));
    }
    let row = |p: &Array2<T>, i: usize| p.row(i).to_vec();
    let mut sum_aa = T::zero();
    for i in 0..m {
        let ri = row(a, i);
        for j in 0..m {
            if i != j {
                sum_aa += poly_kernel(&ri, &row(a, j), degree);
            }
        }
    }
    let mut sum_bb = T::zero();
    for i in 0..n {
        let ri = row(b, i);
        for j in 0..n {
            if i != j {
                sum_bb += poly_kernel(&ri, &row(b, j), degree);
            }
        }
    }
    let mut sum_ab = T::zero();
    let mut cross_terms = 0usize;
    for i in 0..m {
        let ri = row(a, i);
        for j in 0..n {
            if exclude_cross_diagonal && i == j {
                continue;
            }
            sum_ab += poly_kernel(&ri, &row(b, j), degree);
            cross_terms += 1;
        }
    }
    let mm = fl::<T>((m * (m - 1)) as f64);
    let nn = fl::<T>((n * (n - 1)) as f64);
    let cross = fl::<T>(cross_terms as f64);
    Ok(sum_aa / mm + sum_bb / nn - fl::<T>(2.0) * sum_ab / cross)
}

/// Unbiased squared MMD with the polynomial kernel `(x.y/d + 1)^degree`,
/// within-set sums excluding the diagonal.
pub fn kid<T: Scalar>(a: &Array2<T>, b: &Array2<T>, degree: usize) -> Result<T> {
    kid_impl(a, b, degree, false)
}

/// Diagnostic form with the cross-term diagonal excluded as well: on
/// `b = a` all three sums coincide and the value is exactly zero.
pub fn kid_self_diagnostic<T: Scalar>(a: &Array2<T>, degree: usize) -> Result<T> {
    kid_impl(a, a, degree, true)
}

// ---- density and coverage ----

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        let d = *x - *y;
        s += d * d;
    }
    s
}

/// k-NN density and coverage of `fake` with respect to `real`.
/// Density counts how many real k-NN balls contain each fake point
/// (normalized by `k * n_fake`); coverage is the fraction of real points
/// whose k-NN ball contains at least one fake point.
pub fn density_coverage<T: Scalar>(
    real: &Array2<T>,
    fake: &Array2<T>,
    k: usize,
) -> Result<(T, T)> {
    let (n_real, d) = real.dim();
    let (n_fake, df) = fake.dim();
    if d != df {
        return Err(Error::Config("density/coverage dimensions differ".into()));
    }
    if k == 0 || n_real <= k {
        return Err(Error::Config(format!(
            "density/coverage needs more than k={k} real points, got {n_real}"
        )));
    }
    if n_fake == 0 {
        return Err(Error::Config("density/coverage needs fake points".into()));
    }
    let real_rows: Vec<Vec<T>> = (0..n_real).map(|i| real.row(i).to_vec()).collect();
    let fake_rows: Vec<Vec<T>> = (0..n_fake).map(|i| fake.row(i).to_vec()).collect();

    // squared k-NN radius per real point (self excluded), via sorting
    let mut radius_sq = Vec::with_capacity(n_real);
    for i in 0..n_real {
        let mut dists: Vec<T> = (0..n_real)
            .filter(|&j| j != i)
            .map(|j| sq_dist(&real_rows[i], &real_rows[j]))
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        radius_sq.push(dists[k - 1]);
    }

    let mut density_hits = 0usize;
    let mut covered = vec![false; n_real];
    for f in &fake_rows {
        for i in 0..n_real {
            if sq_dist(f, &real_rows[i]) <= radius_sq[i] {
                density_hits += 1;
                covered[i] = true;
            }
        }
    }
    let density = fl::<T>(density_hits as f64) / fl::<T>((k * n_fake) as f64);
    let coverage =
        fl::<T>(covered.iter().filter(|&&c| c).count() as f64) / fl::<T>(n_real as f64);
    Ok((density, coverage))
}

// ---- run evaluation ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub frechet: f64,
    /// Raw unbiased MMD^2 (some conventions report this scaled by 100).
    pub kid: f64,
    pub kid_degree: usize,
    pub density: f64,
    pub coverage: f64,
    pub k: usize,
    pub extractor: String,
    pub extractor_seed: u64,
    pub n_translated: usize,
    pub n_target: usize,
}

impl MetricReport {
    pub fn table(&self) -> String {
        format!(
            "metric     value\n\
             frechet    {:.6}\n\
             kid        {:.8} (degree {}, raw MMD^2; x100 for the common convention)\n\
             density    {:.4} (k={})\n\
             coverage   {:.4} (k={})\n\
             extractor  {} (seed {})\n\
             samples    {} translated vs {} target",
            self.frechet,
            self.kid,
            self.kid_degree,
            self.density,
            self.k,
            self.coverage,
            self.k,
            self.extractor,
            self.extractor_seed,
            self.n_translated,
            self.n_target
        )
    }
}

/// Per-image feature vector: global average pool of the extractor's
/// coarsest tap, widened to `f64` for the metric computations.
pub fn pooled_features<T: Scalar>(
    extractor: &FeatureExtractor<T>,
    dataset: &DomainDataset<T>,
) -> Array2<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dataset.len());
    for sample in &dataset.samples {
        let stack = extractor.extract(&sample.pixels);
        let last = stack.layers.last().expect("extractor has taps");
        let (c, h, w) = last.dim();
        let inv = 1.0 / (h * w) as f64;
        let mut v = Vec::with_capacity(c);
        for ci in 0..c {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    acc += last[[ci, y, x]].as_f64();
                }
            }
            v.push(acc * inv);
        }
        rows.push(v);
    }
    let d = rows[0].len();
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
}

/// All four metrics between a translated set and the target domain.
pub fn evaluate_run<T: Scalar>(
    translated: &DomainDataset<T>,
    target: &DomainDataset<T>,
    extractor: &FeatureExtractor<T>,
    extractor_seed: u64,
    k: usize,
    kid_degree: usize,
) -> Result<MetricReport> {
    let fake = pooled_features(extractor, translated);
    let real = pooled_features(extractor, target);
    let fa = FeatureStats::from_points(&fake)?;
    let re = FeatureStats::from_points(&real)?;
    let frechet = frechet_distance(&re, &fa)?;
    let kid_v = kid(&real, &fake, kid_degree)?;
    let (density, coverage) = density_coverage(&real, &fake, k)?;
    Ok(MetricReport {
        frechet,
        kid: kid_v,
        kid_degree,
        density,
        coverage,
        k,
        extractor: extractor.id().to_string(),
        extractor_seed,
        n_translated: translated.len(),
        n_target: target.len(),
    })
}
