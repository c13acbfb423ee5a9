//! Patch discriminator and the adversarial losses, evaluated in log-space
//! via softplus so large logits never overflow:
//! `-log sigmoid(l) = softplus(-l)` and `-log(1 - sigmoid(l)) = softplus(l)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::norm::instance_norm;
use crate::params::{full, he_uniform, zeros, BoundParams, ParamSet};
use crate::scalar::{fl, Scalar};

const LEAK: f64 = 0.2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscriminatorCfg {
    pub base_channels: usize,
}

impl Default for DiscriminatorCfg {
    fn default() -> Self {
        DiscriminatorCfg { base_channels: 64 }
    }
}

/// Generator-side adversarial objective. The saturating form is the
/// literal `E[log(1 - D(fake))]`; the non-saturating form `-E[log D(fake)]`
/// shares its fixed point but keeps gradients alive early in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanGMode {
    Saturating,
    NonSaturating,
}

impl DiscriminatorCfg {
    pub fn init_params<T: Scalar, R: Rng>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        let c = self.base_channels;
        let widths = [(3, c), (c, 2 * c), (2 * c, 4 * c)];
        for (i, (cin, cout)) in widths.iter().enumerate() {
            let name = format!("discriminator.block{}", i + 1);
            params.insert(
                format!("{name}.conv.w"),
                he_uniform(&[*cout, *cin, 4, 4], cin * 16, rng),
            );
            params.insert(format!("{name}.conv.b"), zeros(&[*cout]));
            // normalization on the middle block only: the final block's map
            // can be as small as 1x1, where instance statistics degenerate
            if i == 1 {
                params.insert(format!("{name}.in.gamma"), full(&[*cout], T::one()));
                params.insert(format!("{name}.in.kappa"), zeros(&[*cout]));
            }
        }
        params.insert(
            "discriminator.head.w",
            he_uniform(&[1, 4 * c, 3, 3], 4 * c * 9, rng),
        );
        params.insert("discriminator.head.b", zeros(&[1]));
    }

    /// Raw patch logits: three stride-2 blocks then a 1-channel head, so a
    /// 64x64 input yields an 8x8 logit map.
    pub fn discriminate<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        img: Var,
    ) -> Result<Var> {
        let s = g.shape(img);
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Config(format!(
                "discriminator expects [3,H,W], got {s:?}"
            )));
        }
        if !s[1].is_multiple_of(8) || !s[2].is_multiple_of(8) {
            return Err(Error::Config(
                "discriminator input must be divisible by 8".into(),
            ));
        }
        let mut feat = img;
        for i in 1..=3 {
            let name = format!("discriminator.block{i}");
            let w = p.var(&format!("{name}.conv.w"));
            let b = p.var(&format!("{name}.conv.b"));
            feat = g.conv2d(feat, w, Some(b), 2, 1);
            if i == 2 {
                let gamma = p.var(&format!("{name}.in.gamma"));
                let kappa = p.var(&format!("{name}.in.kappa"));
                feat = instance_norm(g, feat, gamma, kappa)?;
            }
            feat = g.leaky_relu(feat, fl(LEAK));
        }
        let w = p.var("discriminator.head.w");
        let b = p.var("discriminator.head.b");
        Ok(g.conv2d(feat, w, Some(b), 1, 1))
    }
}

/// Discriminator objective: `-E[log D(real)] - E[log(1 - D(fake))]`,
/// averaged over patches, computed from logits in stable form.
pub fn d_loss<T: Scalar>(g: &mut Graph<T>, real_logits: Var, fake_logits: Var) -> Var {
    let neg_real = g.neg(real_logits);
    let real_term = g.softplus(neg_real);
    let fake_term = g.softplus(fake_logits);
    let rm = g.mean_all(real_term);
    let fm = g.mean_all(fake_term);
    g.add(rm, fm)
}

/// Generator objective on fake logits; see [`GanGMode`].
pub fn g_loss<T: Scalar>(g: &mut Graph<T>, fake_logits: Var, mode: GanGMode) -> Var {
    match mode {
        GanGMode::Saturating => {
            // E[log(1 - D(fake))] = -softplus(l)
            let sp = g.softplus(fake_logits);
            let m = g.mean_all(sp);
            g.neg(m)
        }
        GanGMode::NonSaturating => {
            // -E[log D(fake)] = softplus(-l)
            let neg = g.neg(fake_logits);
            let sp = g.softplus(neg);
            g.mean_all(sp)
        }
    }
}

/// Value-level helper for tests and reporting.
pub fn d_loss_value<T: Scalar>(real: &ndarray::ArrayD<T>, fake: &ndarray::ArrayD<T>) -> T {
    let mut g = Graph::new();
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let l = d_loss(&mut g, r, f);
    g.scalar_value(l)
}

pub fn g_loss_value<T: Scalar>(fake: &ndarray::ArrayD<T>, mode: GanGMode) -> T {
    let mut g = Graph::new();
    let f = g.constant(fake.clone());
    let l = g_loss(&mut g, f, mode);
    g.scalar_value(l)
}
