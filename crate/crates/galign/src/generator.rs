//! UNet-style content encoder and style-conditioned decoder.
//!
//! The encoder is a plain strided-conv pyramid and never sees the style
//! code. Every decoder block re-normalizes its features through the
//! adaptive layer driven by the predicted target style code (or plain
//! instance normalization when the adaptive path is ablated), and a final
//! tanh keeps output pixels in `[-1, 1]`.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::norm::{adain_new, instance_norm, StyleProjection};
use crate::params::{full, he_uniform, zeros, BoundParams, ParamSet};
use crate::scalar::Scalar;
use crate::style_encoder::{StyleCode, StyleVars};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorCfg {
    pub resolution: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub channel_cap: usize,
    /// Style code dimension feeding the per-layer projections.
    pub n: usize,
    /// When false the decoder falls back to learnable instance norm
    /// (the non-adaptive baseline path).
    pub use_adain_new: bool,
}

impl Default for GeneratorCfg {
    fn default() -> Self {
        GeneratorCfg {
            resolution: 64,
            depth: 3,
            base_channels: 64,
            channel_cap: 256,
            n: 32,
            use_adain_new: true,
        }
    }
}

/// Bottleneck plus per-level skip features from the content encoder.
pub struct ContentVars {
    pub bottleneck: Var,
    pub skips: Vec<Var>,
}

/// Value-level content code.
#[derive(Debug, Clone)]
pub struct ContentCode<T: Scalar> {
    pub bottleneck: Array3<T>,
    pub skips: Vec<Array3<T>>,
}

impl GeneratorCfg {
    /// Channel widths indexed by encoder level (0 = stem output).
    pub fn channels(&self) -> Vec<usize> {
        (0..=self.depth)
            .map(|l| (self.base_channels << l).min(self.channel_cap))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("generator depth must be >= 1".into()));
        }
        if !self.resolution.is_multiple_of(1 << self.depth) {
            return Err(Error::Config(format!(
                "resolution {} not divisible by 2^depth = {}",
                self.resolution,
                1 << self.depth
            )));
        }
        Ok(())
    }

    pub fn init_params<T: Scalar, R: Rng>(&self, params: &mut ParamSet<T>, rng: &mut R) {
        let ch = self.channels();
        let conv = |params: &mut ParamSet<T>, rng: &mut R, name: &str, cin: usize, cout: usize| {
            params.insert(
                format!("{name}.w"),
                he_uniform(&[cout, cin, 3, 3], cin * 9, rng),
            );
            params.insert(format!("{name}.b"), zeros(&[cout]));
        };
        let inorm = |params: &mut ParamSet<T>, name: &str, c: usize| {
            params.insert(format!("{name}.gamma"), full(&[c], T::one()));
            params.insert(format!("{name}.kappa"), zeros(&[c]));
        };

        conv(params, rng, "generator.encoder.stem.conv", 3, ch[0]);
        inorm(params, "generator.encoder.stem.in", ch[0]);
        for l in 1..=self.depth {
            conv(
                params,
                rng,
                &format!("generator.encoder.down{l}.conv"),
                ch[l - 1],
                ch[l],
            );
            inorm(params, &format!("generator.encoder.down{l}.in"), ch[l]);
        }
        for k in 1..=self.depth {
            let cin = ch[self.depth - k + 1] + ch[self.depth - k];
            let cout = ch[self.depth - k];
            conv(
                params,
                rng,
                &format!("generator.decoder.up{k}.conv"),
                cin,
                cout,
            );
            if self.use_adain_new {
                let proj = StyleProjection::<T>::learned(cout, self.n, rng);
                params.insert(
                    format!("generator.decoder.adain_{k}.proj.w"),
                    proj.weight.into_dyn(),
                );
                params.insert(
                    format!("generator.decoder.adain_{k}.proj.b"),
                    proj.bias.into_dyn(),
                );
            } else {
                inorm(params, &format!("generator.decoder.up{k}.in"), cout);
            }
        }
        conv(params, rng, "generator.decoder.head", ch[0], 3);
    }

    fn enc_block<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        name: &str,
        x: Var,
        stride: usize,
    ) -> Result<Var> {
        let w = p.var(&format!("{name}.conv.w"));
        let b = p.var(&format!("{name}.conv.b"));
        let y = g.conv2d(x, w, Some(b), stride, 1);
        let gamma = p.var(&format!("{name}.in.gamma"));
        let kappa = p.var(&format!("{name}.in.kappa"));
        let y = instance_norm(g, y, gamma, kappa)?;
        Ok(g.relu(y))
    }

    /// Content pyramid; style never enters here.
    pub fn encode_content_vars<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x: Var,
    ) -> Result<ContentVars> {
        self.validate()?;
        let s = g.shape(x);
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Config(format!("generator expects [3,H,W], got {s:?}")));
        }
        if !s[1].is_multiple_of(1 << self.depth) || !s[2].is_multiple_of(1 << self.depth) {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by 2^depth = {}",
                s[1],
                s[2],
                1 << self.depth
            )));
        }
        let mut skips = Vec::with_capacity(self.depth);
        let mut feat = self.enc_block(g, p, "generator.encoder.stem", x, 1)?;
        for l in 1..=self.depth {
            skips.push(feat);
            feat = self.enc_block(g, p, &format!("generator.encoder.down{l}"), feat, 2)?;
        }
        Ok(ContentVars {
            bottleneck: feat,
            skips,
        })
    }

    /// Upsampling path with skip concatenation; every block applies the
    /// style-driven adaptive normalization.
    pub fn decode_vars<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        content: &ContentVars,
        code: StyleVars,
    ) -> Result<Var> {
        if self.use_adain_new && g.shape(code.mu) != [self.n] {
            return Err(Error::Config(format!(
                "style code length {} does not match generator N = {}",
                g.shape(code.mu)[0],
                self.n
            )));
        }
        let mut feat = content.bottleneck;
        for k in 1..=self.depth {
            let up = g.upsample_nearest2(feat);
            let skip = content.skips[self.depth - k];
            let cat = g.concat(0, &[up, skip]);
            let name = format!("generator.decoder.up{k}");
            let w = p.var(&format!("{name}.conv.w"));
            let b = p.var(&format!("{name}.conv.b"));
            let y = g.conv2d(cat, w, Some(b), 1, 1);
            let y = if self.use_adain_new {
                let pw = p.var(&format!("generator.decoder.adain_{k}.proj.w"));
                let pb = p.var(&format!("generator.decoder.adain_{k}.proj.b"));
                adain_new(g, y, code.mu, code.sigma, pw, pb)?
            } else {
                let gamma = p.var(&format!("{name}.in.gamma"));
                let kappa = p.var(&format!("{name}.in.kappa"));
                instance_norm(g, y, gamma, kappa)?
            };
            feat = g.relu(y);
        }
        let w = p.var("generator.decoder.head.w");
        let b = p.var("generator.decoder.head.b");
        let out = g.conv2d(feat, w, Some(b), 1, 1);
        Ok(g.tanh(out))
    }

    /// Encoder plus decoder applied sequentially.
    pub fn translate_vars<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x: Var,
        code: StyleVars,
    ) -> Result<Var> {
        let content = self.encode_content_vars(g, p, x)?;
        self.decode_vars(g, p, &content, code)
    }

    // ---- value-level convenience ----

    pub fn encode_content<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &ImageSample<T>,
    ) -> Result<ContentCode<T>> {
        let mut g = Graph::new();
        let bound = BoundParams::bind_all(&mut g, params, |_| false);
        let xv = g.constant(x.pixels.clone().into_dyn());
        let content = self.encode_content_vars(&mut g, &bound, xv)?;
        let to3 = |v: Var| {
            g.value(v)
                .clone()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap()
        };
        Ok(ContentCode {
            bottleneck: to3(content.bottleneck),
            skips: content.skips.iter().map(|&s| to3(s)).collect(),
        })
    }

    pub fn translate<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &ImageSample<T>,
        code: &StyleCode<T>,
    ) -> Result<ImageSample<T>> {
        let mut g = Graph::new();
        let bound = BoundParams::bind_all(&mut g, params, |_| false);
        let xv = g.constant(x.pixels.clone().into_dyn());
        let mu = g.constant(code.mu.clone().into_dyn());
        let sigma = g.constant(code.sigma.clone().into_dyn());
        let out = self.translate_vars(&mut g, &bound, xv, StyleVars { mu, sigma })?;
        let pixels = g
            .value(out)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        ImageSample::new(pixels, format!("translated:{}", x.source))
    }
}
