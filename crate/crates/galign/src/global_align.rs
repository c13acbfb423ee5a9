//! Style feature alignment between the two domain Gaussians: a likelihood
//! term on reparameterized target samples scored under the source Gaussian,
//! and a KL regularizer toward the unit Gaussian.
//!
//! Both terms ship in two sign conventions. The `literal` modes keep the
//! raw log-likelihood / negated-KL signs (unbounded below when jointly
//! minimized); the `nll`/`standard` modes are their stable negations and
//! are the training defaults. All values are clamped to `|v| <= 1e6`.

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::{fl, Scalar};
use crate::style_encoder::{StyleCode, StyleVars};

/// Magnitude guard for loss values when sigma sits near its floor.
pub const CLAMP_BOUND: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodMode {
    /// Raw log-likelihood sign: a quantity to be maximized.
    Literal,
    /// Its negation, suitable for joint minimization.
    Nll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizationMode {
    /// Negated KL divergence, which rewards spread-out codes.
    Literal,
    /// Plain KL divergence toward the unit Gaussian.
    Standard,
}

/// Source and target style codes entering the alignment loss.
#[derive(Debug, Clone)]
pub struct GaussianPair<T: Scalar> {
    pub source: StyleCode<T>,
    pub target: StyleCode<T>,
}

impl<T: Scalar> GaussianPair<T> {
    pub fn new(source: StyleCode<T>, target: StyleCode<T>) -> Result<Self> {
        source.validate()?;
        target.validate()?;
        if source.n() != target.n() {
            return Err(Error::Config(format!(
                "style code dimensions differ: {} vs {}",
                source.n(),
                target.n()
            )));
        }
        Ok(GaussianPair { source, target })
    }
}

/// Draw one unit-Gaussian noise vector of length `n`.
pub fn unit_noise<T: Scalar, R: Rng>(n: usize, rng: &mut R) -> Array1<T> {
    Array1::from_shape_fn(n, |_| T::std_normal(rng))
}

/// Differentiable reparameterized sample: `s = mu + sigma * noise`.
pub fn sample_reparam_vars<T: Scalar>(
    g: &mut Graph<T>,
    code: StyleVars,
    noise: &Array1<T>,
) -> Result<Var> {
    if g.shape(code.mu) != [noise.len()] {
        return Err(Error::Config(format!(
            "noise length {} does not match code length {}",
            noise.len(),
            g.shape(code.mu)[0]
        )));
    }
    let eps = g.constant(noise.clone().into_dyn());
    let scaled = g.mul(code.sigma, eps);
    Ok(g.add(code.mu, scaled))
}

/// Value-level reparameterized sample.
pub fn sample_reparam<T: Scalar>(code: &StyleCode<T>, noise: &Array1<T>) -> Result<Array1<T>> {
    if code.n() != noise.len() {
        return Err(Error::Config("noise length mismatch".into()));
    }
    Ok(&code.mu + &(&code.sigma * noise))
}

fn bind_code<T: Scalar>(g: &mut Graph<T>, code: &StyleCode<T>) -> StyleVars {
    StyleVars {
        mu: g.constant(code.mu.clone().into_dyn()),
        sigma: g.constant(code.sigma.clone().into_dyn()),
    }
}

/// Likelihood term: with `s = target.mu + target.sigma * noise`, the
/// literal mode is `-sum_i (s_i - mu_x_i)^2 / (2 sigma_x_i^2)`; `nll`
/// negates it.
pub fn likelihood_loss_vars<T: Scalar>(
    g: &mut Graph<T>,
    source: StyleVars,
    target: StyleVars,
    noise: &Array1<T>,
    mode: LikelihoodMode,
) -> Result<Var> {
    let s = sample_reparam_vars(g, target, noise)?;
    if g.shape(source.mu) != g.shape(s) {
        return Err(Error::Config("style code dimensions differ".into()));
    }
    let d = g.sub(s, source.mu);
    let d2 = g.mul(d, d);
    let sx2 = g.mul(source.sigma, source.sigma);
    let denom = g.mul_scalar(sx2, fl(2.0));
    let frac = g.div(d2, denom);
    let total = g.sum_all(frac);
    let signed = match mode {
        LikelihoodMode::Literal => g.neg(total),
        LikelihoodMode::Nll => total,
    };
    Ok(g.clamp(signed, fl(-CLAMP_BOUND), fl(CLAMP_BOUND)))
}

pub fn likelihood_loss<T: Scalar>(
    pair: &GaussianPair<T>,
    noise: &Array1<T>,
    mode: LikelihoodMode,
) -> Result<T> {
    let mut g = Graph::new();
    let src = bind_code(&mut g, &pair.source);
    let tgt = bind_code(&mut g, &pair.target);
    let l = likelihood_loss_vars(&mut g, src, tgt, noise, mode)?;
    Ok(g.scalar_value(l))
}

/// Closed form of `KL(N(0,1) || N(mu, sigma^2))`, summed over dimensions:
/// `sum_i [ ln sigma_i + (1 + mu_i^2) / (2 sigma_i^2) - 1/2 ]`.
pub fn kl_unit_to_gauss_vars<T: Scalar>(g: &mut Graph<T>, code: StyleVars) -> Var {
    let ln_sigma = g.ln(code.sigma);
    let mu2 = g.mul(code.mu, code.mu);
    let num = g.add_scalar(mu2, T::one());
    let s2 = g.mul(code.sigma, code.sigma);
    let denom = g.mul_scalar(s2, fl(2.0));
    let frac = g.div(num, denom);
    let term = g.add(ln_sigma, frac);
    let shifted = g.add_scalar(term, fl(-0.5));
    g.sum_all(shifted)
}

pub fn kl_unit_to_gauss<T: Scalar>(code: &StyleCode<T>) -> T {
    let mut g = Graph::new();
    let c = bind_code(&mut g, code);
    let v = kl_unit_to_gauss_vars(&mut g, c);
    g.scalar_value(v)
}

/// Regularization term: literal mode is `-KL(N(0,1) || N(mu, sigma^2))`,
/// standard mode is `+KL`.
pub fn regularization_loss_vars<T: Scalar>(
    g: &mut Graph<T>,
    code: StyleVars,
    mode: RegularizationMode,
) -> Var {
    let kl = kl_unit_to_gauss_vars(g, code);
    let signed = match mode {
        RegularizationMode::Literal => g.neg(kl),
        RegularizationMode::Standard => kl,
    };
    g.clamp(signed, fl(-CLAMP_BOUND), fl(CLAMP_BOUND))
}

pub fn regularization_loss<T: Scalar>(code: &StyleCode<T>, mode: RegularizationMode) -> T {
    let mut g = Graph::new();
    let c = bind_code(&mut g, code);
    let v = regularization_loss_vars(&mut g, c, mode);
    g.scalar_value(v)
}

#[derive(Debug, Clone, Copy)]
pub struct GlobalLossCfg<T: Scalar> {
    pub lambda_l: T,
    pub lambda_r: T,
    pub likelihood: LikelihoodMode,
    pub regularization: RegularizationMode,
}

impl<T: Scalar> Default for GlobalLossCfg<T> {
    fn default() -> Self {
        GlobalLossCfg {
            lambda_l: T::one(),
            lambda_r: T::one(),
            likelihood: LikelihoodMode::Nll,
            regularization: RegularizationMode::Standard,
        }
    }
}

/// Combined global alignment loss
/// `lambda_l * likelihood + lambda_r * regularization(source)`.
/// The regularizer acts on the source-domain Gaussian, matching the
/// formula it is defined with.
pub fn global_loss_vars<T: Scalar>(
    g: &mut Graph<T>,
    source: StyleVars,
    target: StyleVars,
    noise: &Array1<T>,
    cfg: &GlobalLossCfg<T>,
) -> Result<Var> {
    let lik = likelihood_loss_vars(g, source, target, noise, cfg.likelihood)?;
    let reg = regularization_loss_vars(g, source, cfg.regularization);
    let lw = g.mul_scalar(lik, cfg.lambda_l);
    let rw = g.mul_scalar(reg, cfg.lambda_r);
    Ok(g.add(lw, rw))
}

pub fn global_loss<T: Scalar>(
    pair: &GaussianPair<T>,
    noise: &Array1<T>,
    cfg: &GlobalLossCfg<T>,
) -> Result<T> {
    let mut g = Graph::new();
    let src = bind_code(&mut g, &pair.source);
    let tgt = bind_code(&mut g, &pair.target);
    let l = global_loss_vars(&mut g, src, tgt, noise, cfg)?;
    Ok(g.scalar_value(l))
}
