//! Instance normalization and its adaptive variants.
//!
//! `instance_norm` standardizes each channel over its spatial extent and
//! applies a learned affine. `adain_classic` takes the affine from target
//! image statistics. `adain_new` takes it from a predicted style code fed
//! through a per-layer projection, which bridges the code dimension to the
//! channel width of the layer it conditions.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::{fl, Scalar};

/// Numerical floor for per-channel standard deviations.
pub const NORM_EPS: f64 = 1e-5;

// Tiny additive guard inside the square root so constant channels do not
// produce a 0 * inf in the backward pass before the clamp takes over.
const VAR_GUARD: f64 = 1e-12;

/// Per-channel mean and standard deviation over spatial dimensions.
#[derive(Debug, Clone)]
pub struct ChannelStats<T: Scalar> {
    pub mean: Array1<T>,
    pub std: Array1<T>,
}

impl<T: Scalar> ChannelStats<T> {
    /// Statistics of a `[C,H,W]` tensor, std floored at [`NORM_EPS`].
    pub fn of(x: &Array3<T>) -> Self {
        let (c, h, w) = x.dim();
        let n = fl::<T>((h * w) as f64);
        let mut mean = Array1::<T>::zeros(c);
        let mut std = Array1::<T>::zeros(c);
        for ci in 0..c {
            let plane = x.index_axis(ndarray::Axis(0), ci);
            let mu = plane.sum() / n;
            let var = plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            mean[ci] = mu;
            std[ci] = (var + fl(VAR_GUARD)).sqrt().max(fl(NORM_EPS));
        }
        ChannelStats { mean, std }
    }
}

/// Mean and std nodes (shape `[C,1,1]`) of a `[C,H,W]` feature tensor.
fn stats_vars<T: Scalar>(g: &mut Graph<T>, x: Var) -> (Var, Var) {
    let mean = g.mean_axes_keep(x, &[1, 2]);
    let shape = g.shape(x).to_vec();
    let mean_b = g.broadcast_to(mean, &shape);
    let centered = g.sub(x, mean_b);
    let sq = g.mul(centered, centered);
    let var = g.mean_axes_keep(sq, &[1, 2]);
    let var_g = g.add_scalar(var, fl(VAR_GUARD));
    let std_raw = g.sqrt(var_g);
    let std = g.clamp(std_raw, fl(NORM_EPS), T::infinity());
    (mean, std)
}

fn standardize<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let shape = g.shape(x).to_vec();
    let (mean, std) = stats_vars(g, x);
    let mean_b = g.broadcast_to(mean, &shape);
    let std_b = g.broadcast_to(std, &shape);
    let centered = g.sub(x, mean_b);
    g.div(centered, std_b)
}

fn check_feature_shape<T: Scalar>(g: &Graph<T>, x: Var) -> Result<(usize, usize, usize)> {
    let s = g.shape(x);
    if s.len() != 3 {
        return Err(Error::Config(format!(
            "feature tensor must be [C,H,W], got {s:?}"
        )));
    }
    if s[1] * s[2] < 2 {
        return Err(Error::Config(
            "instance normalization needs at least 2 spatial elements".into(),
        ));
    }
    Ok((s[0], s[1], s[2]))
}

/// Per-channel standardization followed by a learned affine:
/// `gamma * (x - mean) / std + kappa`.
pub fn instance_norm<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    gamma: Var,
    kappa: Var,
) -> Result<Var> {
    let (c, _, _) = check_feature_shape(g, x)?;
    if g.shape(gamma) != [c] || g.shape(kappa) != [c] {
        return Err(Error::Config(format!(
            "instance_norm affine parameters must be [{c}]"
        )));
    }
    let shape = g.shape(x).to_vec();
    let norm = standardize(g, x);
    let g3 = g.reshape(gamma, &[c, 1, 1]);
    let gb = g.broadcast_to(g3, &shape);
    let k3 = g.reshape(kappa, &[c, 1, 1]);
    let kb = g.broadcast_to(k3, &shape);
    let scaled = g.mul(norm, gb);
    Ok(g.add(scaled, kb))
}

/// Classic adaptive instance normalization: re-color `x` with target
/// channel statistics, `std(y) * (x - mean(x)) / std(x) + mean(y)`.
pub fn adain_classic<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    y_stats: &ChannelStats<T>,
) -> Result<Var> {
    let (c, _, _) = check_feature_shape(g, x)?;
    if y_stats.mean.len() != c || y_stats.std.len() != c {
        return Err(Error::Config(format!(
            "adain_classic channel mismatch: feature has {c}, stats have {}",
            y_stats.mean.len()
        )));
    }
    let shape = g.shape(x).to_vec();
    let norm = standardize(g, x);
    let std_c = g.constant(
        y_stats
            .std
            .clone()
            .into_shape_with_order((c, 1, 1))
            .unwrap()
            .into_dyn(),
    );
    let mean_c = g.constant(
        y_stats
            .mean
            .clone()
            .into_shape_with_order((c, 1, 1))
            .unwrap()
            .into_dyn(),
    );
    let std_b = g.broadcast_to(std_c, &shape);
    let mean_b = g.broadcast_to(mean_c, &shape);
    let scaled = g.mul(norm, std_b);
    Ok(g.add(scaled, mean_b))
}

/// Affine map from the `2N` style vector `(mu || sigma)` to per-channel
/// `(gamma, beta)` pairs of one adaptive layer.
#[derive(Debug, Clone)]
pub struct StyleProjection<T: Scalar> {
    /// `[2C, 2N]`
    pub weight: Array2<T>,
    /// `[2C]`, laid out as gamma then beta
    pub bias: Array1<T>,
}

impl<T: Scalar> StyleProjection<T> {
    /// Learned projection: small random weight, bias starts at
    /// `(gamma, beta) = (1, 0)` so the layer begins as plain normalization.
    pub fn learned<R: Rng>(channels: usize, n: usize, rng: &mut R) -> Self {
        let weight = Array2::from_shape_fn((2 * channels, 2 * n), |_| {
            T::std_normal(rng) * fl(0.02)
        });
        let mut bias = Array1::<T>::zeros(2 * channels);
        for c in 0..channels {
            bias[c] = T::one();
        }
        StyleProjection { weight, bias }
    }

    /// Pass-through wiring for `N == C`: gamma takes sigma, beta takes mu,
    /// reproducing the adaptive layer exactly as the style code dictates.
    pub fn passthrough(n: usize) -> Self {
        let mut weight = Array2::<T>::zeros((2 * n, 2 * n));
        for i in 0..n {
            weight[[i, n + i]] = T::one(); // gamma_i <- sigma_i
            weight[[n + i, i]] = T::one(); // beta_i <- mu_i
        }
        StyleProjection {
            weight,
            bias: Array1::zeros(2 * n),
        }
    }

    pub fn channels(&self) -> usize {
        self.bias.len() / 2
    }
}

/// Adaptive instance normalization driven by a predicted style code:
/// `(gamma, beta) = proj(mu_y || sigma_y)`, then
/// `gamma * (x - mean(x)) / std(x) + beta`.
///
/// `mu` and `sigma` are graph nodes so gradients reach the style encoder.
pub fn adain_new<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    mu: Var,
    sigma: Var,
    proj_w: Var,
    proj_b: Var,
) -> Result<Var> {
    let (c, _, _) = check_feature_shape(g, x)?;
    let n = g.shape(mu)[0];
    if g.shape(sigma) != [n] {
        return Err(Error::Config("style code mu/sigma length mismatch".into()));
    }
    let ws = g.shape(proj_w).to_vec();
    if ws != [2 * c, 2 * n] || g.shape(proj_b) != [2 * c] {
        return Err(Error::Config(format!(
            "style projection must map [2*{n}] to [2*{c}], got weight {ws:?}"
        )));
    }
    let shape = g.shape(x).to_vec();
    let code = g.concat(0, &[mu, sigma]);
    let gamma_beta = g.vec_linear(code, proj_w, Some(proj_b));
    let gamma = g.narrow(gamma_beta, 0, 0, c);
    let beta = g.narrow(gamma_beta, 0, c, c);
    let norm = standardize(g, x);
    let g3 = g.reshape(gamma, &[c, 1, 1]);
    let gb = g.broadcast_to(g3, &shape);
    let b3 = g.reshape(beta, &[c, 1, 1]);
    let bb = g.broadcast_to(b3, &shape);
    let scaled = g.mul(norm, gb);
    Ok(g.add(scaled, bb))
}
