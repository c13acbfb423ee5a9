//! Minimal vision-transformer forward pass used only to extract the final
//! block's class-token attention as a spatial relevance map. The network is
//! frozen: weights come from a container file (see [`crate::checkpoint`])
//! and no gradients are ever taken through it.

use std::path::Path;

use ndarray::{Array1, Array2, Array3};

use crate::checkpoint::{Container, LeBytes};
use crate::error::{Error, Result};
use crate::scalar::{fl, Scalar};

pub struct VitAttention<T: Scalar + LeBytes> {
    pub patch: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    weights: Container<T>,
}

fn layer_norm_rows<T: Scalar>(x: &Array2<T>, g: &Array1<T>, b: &Array1<T>) -> Array2<T> {
    let eps = fl::<T>(1e-6);
    let d = x.ncols();
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / fl((d) as f64);
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / fl(d as f64);
        let inv = T::one() / (var + eps).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * g[i] + b[i];
        }
    }
    out
}

fn linear_rows<T: Scalar>(x: &Array2<T>, w: &Array2<T>, b: &Array1<T>) -> Array2<T> {
    let mut out = x.dot(&w.t());
    for mut row in out.rows_mut() {
        for (i, v) in row.iter_mut().enumerate() {
            *v += b[i];
        }
    }
    out
}

fn softmax_rows<T: Scalar>(x: &mut Array2<T>) {
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = fl::<T>(0.797_884_560_802_865_4);
    let a = fl::<T>(0.044_715);
    fl::<T>(0.5) * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

impl<T: Scalar + LeBytes> VitAttention<T> {
    /// Load from a container file; errors name the provider so a missing
    /// weight file is diagnosable from the CLI.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!(
                "attention provider `pretrained_vit`: weight file {} not found",
                path.display()
            )));
        }
        let weights = Container::<T>::load(path)?;
        let meta = &weights.meta;
        let want = |key: &str| -> Result<usize> {
            meta.get(key)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("vit weight file missing meta key `{key}`"))
                })
        };
        if meta.get("kind").and_then(|v| v.as_str()) != Some("vit_attention") {
            return Err(Error::Checkpoint(
                "weight file is not a vit_attention container".into(),
            ));
        }
        Ok(VitAttention {
            patch: want("patch")?,
            depth: want("depth")?,
            heads: want("heads")?,
            dim: want("dim")?,
            weights,
        })
    }

    pub fn from_container(weights: Container<T>) -> Result<Self> {
        let meta = weights.meta.clone();
        let want = |key: &str| -> Result<usize> {
            meta.get(key)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("vit weight file missing meta key `{key}`"))
                })
        };
        Ok(VitAttention {
            patch: want("patch")?,
            depth: want("depth")?,
            heads: want("heads")?,
            dim: want("dim")?,
            weights,
        })
    }

    fn arr2(&self, name: &str) -> Result<Array2<T>> {
        self
            .weights
            .get(name)?
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))
    }

    fn arr1(&self, name: &str) -> Result<Array1<T>> {
        self
            .weights
            .get(name)?
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))
    }

    /// Class-token attention of the final block, averaged over heads, on
    /// the patch grid: `[3,H,W] -> [H/patch, W/patch]`, raw (unnormalized).
    pub fn cls_attention_grid(&self, img: &Array3<T>) -> Result<Array2<T>> {
        let (c, h, w) = img.dim();
        if c != 3 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::Config(format!(
                "vit provider needs [3,H,W] divisible by patch {}, got [{c},{h},{w}]",
                self.patch
            )));
        }
        let (gh, gw) = (h / self.patch, w / self.patch);
        let n = gh * gw;
        let d = self.dim;

        // patch embedding
        let pw = self.arr2("vit.patch.w")?; // [D, 3*P*P]
        let pb = self.arr1("vit.patch.b")?;
        let mut tokens = Array2::<T>::zeros((n + 1, d));
        let cls = self.arr1("vit.cls")?;
        for i in 0..d {
            tokens[[0, i]] = cls[i];
        }
        for by in 0..gh {
            for bx in 0..gw {
                let t = by * gw + bx;
                for od in 0..d {
                    let mut acc = pb[od];
                    for ci in 0..3 {
                        for dy in 0..self.patch {
                            for dx in 0..self.patch {
                                let k = (ci * self.patch + dy) * self.patch + dx;
                                acc += pw[[od, k]] * img[[ci, by * self.patch + dy, bx * self.patch + dx]];
                            }
                        }
                    }
                    tokens[[t + 1, od]] = acc;
                }
            }
        }
        let pos = self.arr2("vit.pos")?; // [(n+1), D]
        if pos.nrows() != n + 1 {
            return Err(Error::Config(format!(
                "vit positional table holds {} tokens, image yields {}",
                pos.nrows(),
                n + 1
            )));
        }
        tokens += &pos;

        let dh = d / self.heads;
        let scale = T::one() / fl::<T>((dh as f64).sqrt());
        let mut last_attention: Option<Array1<T>> = None;

        for blk in 0..self.depth {
            let p = format!("vit.block{blk}");
            let ln1 = layer_norm_rows(
                &tokens,
                &self.arr1(&format!("{p}.ln1.g"))?,
                &self.arr1(&format!("{p}.ln1.b"))?,
            );
            let qkv = linear_rows(
                &ln1,
                &self.arr2(&format!("{p}.qkv.w"))?, // [3D, D]
                &self.arr1(&format!("{p}.qkv.b"))?,
            );
            let mut merged = Array2::<T>::zeros((n + 1, d));
            let mut cls_attn_avg = Array1::<T>::zeros(n);
            for head in 0..self.heads {
                let off = head * dh;
                let mut scores = Array2::<T>::zeros((n + 1, n + 1));
                for i in 0..=n {
                    for j in 0..=n {
                        let mut acc = T::zero();
                        for k in 0..dh {
                            acc += qkv[[i, off + k]] * qkv[[j, d + off + k]];
                        }
                        scores[[i, j]] = acc * scale;
                    }
                }
                softmax_rows(&mut scores);
                if blk == self.depth - 1 {
                    for j in 0..n {
                        cls_attn_avg[j] += scores[[0, j + 1]] / fl((self.heads) as f64);
                    }
                }
                for i in 0..=n {
                    for k in 0..dh {
                        let mut acc = T::zero();
                        for j in 0..=n {
                            acc += scores[[i, j]] * qkv[[j, 2 * d + off + k]];
                        }
                        merged[[i, off + k]] = acc;
                    }
                }
            }
            if blk == self.depth - 1 {
                last_attention = Some(cls_attn_avg);
            }
            let proj = linear_rows(
                &merged,
                &self.arr2(&format!("{p}.proj.w"))?,
                &self.arr1(&format!("{p}.proj.b"))?,
            );
            tokens += &proj;
            let ln2 = layer_norm_rows(
                &tokens,
                &self.arr1(&format!("{p}.ln2.g"))?,
                &self.arr1(&format!("{p}.ln2.b"))?,
            );
            let h1 = linear_rows(
                &ln2,
                &self.arr2(&format!("{p}.mlp.fc1.w"))?,
                &self.arr1(&format!("{p}.mlp.fc1.b"))?,
            )
            .mapv(gelu);
            let h2 = linear_rows(
                &h1,
                &self.arr2(&format!("{p}.mlp.fc2.w"))?,
                &self.arr1(&format!("{p}.mlp.fc2.b"))?,
            );
            tokens += &h2;
        }

        let attn = last_attention.expect("depth >= 1 enforced by loop");
        Ok(Array2::from_shape_fn((gh, gw), |(y, x)| attn[y * gw + x]))
    }
}

/// Build a random tiny ViT container, used by tests and by anyone who
/// wants a stand-in weight file with the right schema.
pub fn random_vit_container<T: Scalar + LeBytes, R: rand::Rng>(
    patch: usize,
    depth: usize,
    heads: usize,
    dim: usize,
    tokens: usize,
    rng: &mut R,
) -> Container<T> {
    use crate::params::{normal, xavier_uniform, zeros};
    let mut c = Container::new(serde_json::json!({
        "kind": "vit_attention",
        "patch": patch,
        "depth": depth,
        "heads": heads,
        "dim": dim,
    }));
    let plen = 3 * patch * patch;
    c.insert("vit.patch.w", xavier_uniform(&[dim, plen], plen, dim, rng));
    c.insert("vit.patch.b", zeros(&[dim]));
    c.insert("vit.cls", normal(&[dim], 0.02, rng));
    c.insert("vit.pos", normal(&[tokens + 1, dim], 0.02, rng));
    for b in 0..depth {
        let p = format!("vit.block{b}");
        c.insert(format!("{p}.ln1.g"), crate::params::full(&[dim], T::one()));
        c.insert(format!("{p}.ln1.b"), zeros(&[dim]));
        c.insert(
            format!("{p}.qkv.w"),
            xavier_uniform(&[3 * dim, dim], dim, 3 * dim, rng),
        );
        c.insert(format!("{p}.qkv.b"), zeros(&[3 * dim]));
        c.insert(
            format!("{p}.proj.w"),
            xavier_uniform(&[dim, dim], dim, dim, rng),
        );
        c.insert(format!("{p}.proj.b"), zeros(&[dim]));
        c.insert(format!("{p}.ln2.g"), crate::params::full(&[dim], T::one()));
        c.insert(format!("{p}.ln2.b"), zeros(&[dim]));
        c.insert(
            format!("{p}.mlp.fc1.w"),
            xavier_uniform(&[2 * dim, dim], dim, 2 * dim, rng),
        );
        c.insert(format!("{p}.mlp.fc1.b"), zeros(&[2 * dim]));
        c.insert(
            format!("{p}.mlp.fc2.w"),
            xavier_uniform(&[dim, 2 * dim], 2 * dim, dim, rng),
        );
        c.insert(format!("{p}.mlp.fc2.b"), zeros(&[dim]));
    }
    c
}
