//! Patch-token style encoder: patch embedding with a class token, mixer
//! layers shared between the two domains, and per-domain fully-connected
//! heads that emit the parameters of a diagonal Gaussian style code.

use ndarray::{Array1, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Domain, ImageSample};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{normal, xavier_uniform, zeros, BoundParams, ParamSet};
use crate::scalar::{fl, Scalar};

/// Hard floor added to predicted standard deviations; the alignment losses
/// divide by sigma^2, so sigma must stay away from zero.
pub const SIGMA_FLOOR: f64 = 1e-4;

const LN_EPS: f64 = 1e-6;

/// How the token sequence is reduced before the per-domain head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Mean over all tokens including the class token (default).
    MeanPool,
    /// Class token only.
    ClassToken,
}

/// Gaussian style code: `mu` and strictly positive `sigma`, both length N.
#[derive(Debug, Clone)]
pub struct StyleCode<T: Scalar> {
    pub mu: Array1<T>,
    pub sigma: Array1<T>,
}

impl<T: Scalar> StyleCode<T> {
    pub fn n(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.len() != self.sigma.len() {
            return Err(Error::Config("style code mu/sigma length mismatch".into()));
        }
        let floor = fl::<T>(SIGMA_FLOOR) - fl::<T>(1e-12);
        if self.sigma.iter().any(|&s| s < floor || !s.is_finite()) {
            return Err(Error::Config("style code sigma below floor".into()));
        }
        Ok(())
    }
}

/// Graph-bound style code.
#[derive(Debug, Clone, Copy)]
pub struct StyleVars {
    pub mu: Var,
    pub sigma: Var,
}

impl StyleVars {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> StyleCode<T> {
        StyleCode {
            mu: g
                .value(self.mu)
                .clone()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap(),
            sigma: g
                .value(self.sigma)
                .clone()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StyleEncoderCfg {
    pub resolution: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub token_hidden: usize,
    pub channel_hidden: usize,
    /// Style code dimension N.
    pub n: usize,
    pub readout: Readout,
}

impl Default for StyleEncoderCfg {
    fn default() -> Self {
        StyleEncoderCfg {
            resolution: 64,
            patch: 8,
            embed_dim: 128,
            depth: 1,
            token_hidden: 256,
            channel_hidden: 256,
            n: 32,
            readout: Readout::MeanPool,
        }
    }
}

fn head_prefix(domain: Domain) -> &'static str {
    match domain {
        Domain::Source => "style_encoder.head_source",
        Domain::Target => "style_encoder.head_target",
    }
}

impl StyleEncoderCfg {
    /// Patch tokens per image (excluding the class token).
    pub fn token_count(&self) -> usize {
        let side = self.resolution / self.patch;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.resolution.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "resolution {} not divisible by patch size {}",
                self.resolution, self.patch
            )));
        }
        if self.n == 0 || self.embed_dim == 0 {
            return Err(Error::Config(
                "style code and embedding dimensions must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn init_params<T: Scalar, R: Rng>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        let d = self.embed_dim;
        let patch_len = self.patch * self.patch * 3;
        let tokens = self.token_count() + 1;
        params.insert(
            "style_encoder.shared.patch.w",
            xavier_uniform(&[d, patch_len], patch_len, d, rng),
        );
        params.insert("style_encoder.shared.cls", normal(&[d], 0.02, rng));
        params.insert("style_encoder.shared.pos", normal(&[tokens, d], 0.02, rng));
        for l in 0..self.depth {
            let p = format!("style_encoder.shared.mixer{l}");
            params.insert(format!("{p}.ln1.g"), crate::params::full(&[d], T::one()));
            params.insert(format!("{p}.ln1.b"), zeros(&[d]));
            params.insert(
                format!("{p}.w1"),
                xavier_uniform(&[self.token_hidden, tokens], tokens, self.token_hidden, rng),
            );
            params.insert(
                format!("{p}.w2"),
                xavier_uniform(&[tokens, self.token_hidden], self.token_hidden, tokens, rng),
            );
            params.insert(format!("{p}.ln2.g"), crate::params::full(&[d], T::one()));
            params.insert(format!("{p}.ln2.b"), zeros(&[d]));
            params.insert(
                format!("{p}.w3"),
                xavier_uniform(&[self.channel_hidden, d], d, self.channel_hidden, rng),
            );
            params.insert(
                format!("{p}.w4"),
                xavier_uniform(&[d, self.channel_hidden], self.channel_hidden, d, rng),
            );
        }
        for domain in [Domain::Source, Domain::Target] {
            let p = head_prefix(domain);
            params.insert(
                format!("{p}.w"),
                xavier_uniform(&[2 * self.n, d], d, 2 * self.n, rng),
            );
            params.insert(format!("{p}.b"), zeros(&[2 * self.n]));
        }
    }

    /// Cut `x` into flattened patches, project them, prepend the class
    /// token and add positional embeddings: `[3,H,W] -> [(n+1), D]`.
    pub fn patchify_embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x: Var,
    ) -> Result<Var> {
        self.validate()?;
        let s = g.shape(x);
        if s != [3, self.resolution, self.resolution] {
            return Err(Error::Config(format!(
                "style encoder expects [3,{0},{0}], got {s:?}",
                self.resolution
            )));
        }
        let d = self.embed_dim;
        let patches = g.unfold(x, self.patch); // [n, 3*P*P]
        let w = p.var("style_encoder.shared.patch.w");
        let projected = g.linear2(patches, w, None); // [n, D]
        let cls = p.var("style_encoder.shared.cls");
        let cls_row = g.reshape(cls, &[1, d]);
        let tokens = g.concat(0, &[cls_row, projected]); // [(n+1), D]
        let pos = p.var("style_encoder.shared.pos");
        Ok(g.add(tokens, pos))
    }

    /// One mixer layer: token-mixing then channel-mixing MLPs, both with
    /// residual connections and pre-layer normalization.
    pub fn mixer_layer<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        layer: usize,
        z: Var,
    ) -> Var {
        let prefix = format!("style_encoder.shared.mixer{layer}");
        let ln1g = p.var(&format!("{prefix}.ln1.g"));
        let ln1b = p.var(&format!("{prefix}.ln1.b"));
        let w1 = p.var(&format!("{prefix}.w1"));
        let w2 = p.var(&format!("{prefix}.w2"));
        let ln2g = p.var(&format!("{prefix}.ln2.g"));
        let ln2b = p.var(&format!("{prefix}.ln2.b"));
        let w3 = p.var(&format!("{prefix}.w3"));
        let w4 = p.var(&format!("{prefix}.w4"));

        // token mixing: operate across the token axis
        let t = g.layer_norm(z, ln1g, ln1b, fl(LN_EPS));
        let tt = g.transpose2(t); // [D, n+1]
        let h = g.linear2(tt, w1, None); // [D, Ht]
        let h = g.gelu(h);
        let mixed = g.linear2(h, w2, None); // [D, n+1]
        let mixed_t = g.transpose2(mixed);
        let z1 = g.add(z, mixed_t);

        // channel mixing
        let t2 = g.layer_norm(z1, ln2g, ln2b, fl(LN_EPS));
        let h2 = g.linear2(t2, w3, None); // [n+1, Hc]
        let h2 = g.gelu(h2);
        let mixed2 = g.linear2(h2, w4, None); // [n+1, D]
        g.add(z1, mixed2)
    }

    /// Full encoding path inside an existing graph.
    pub fn encode_vars<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x: Var,
        domain: Domain,
    ) -> Result<StyleVars> {
        let mut tokens = self.patchify_embed(g, p, x)?;
        for l in 0..self.depth {
            tokens = self.mixer_layer(g, p, l, tokens);
        }
        let d = self.embed_dim;
        let pooled = match self.readout {
            Readout::MeanPool => {
                let m = g.mean_axes_keep(tokens, &[0]);
                g.reshape(m, &[d])
            }
            Readout::ClassToken => {
                let c = g.narrow(tokens, 0, 0, 1);
                g.reshape(c, &[d])
            }
        };
        let hp = head_prefix(domain);
        let w = p.var(&format!("{hp}.w"));
        let b = p.var(&format!("{hp}.b"));
        let out = g.vec_linear(pooled, w, Some(b)); // [2N]
        let mu = g.narrow(out, 0, 0, self.n);
        let raw = g.narrow(out, 0, self.n, self.n);
        let sp = g.softplus(raw);
        let sigma = g.add_scalar(sp, fl(SIGMA_FLOOR));
        Ok(StyleVars { mu, sigma })
    }

    /// Value-level convenience wrapper around [`Self::encode_vars`].
    pub fn encode<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &ImageSample<T>,
        domain: Domain,
    ) -> Result<StyleCode<T>> {
        self.encode_pixels(params, &x.pixels, domain)
    }

    pub fn encode_pixels<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        pixels: &Array3<T>,
        domain: Domain,
    ) -> Result<StyleCode<T>> {
        let mut g = Graph::new();
        let bound = BoundParams::bind_all(&mut g, params, |_| false);
        let x = g.constant(pixels.clone().into_dyn());
        let vars = self.encode_vars(&mut g, &bound, x, domain)?;
        Ok(vars.values(&g))
    }
}
