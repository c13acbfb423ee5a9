//! Attention-weighted spatially-correlative content loss.
//!
//! A frozen attention provider highlights relevant pixels; both the source
//! image and the translated output are gated by that map, pushed through a
//! frozen feature extractor, and compared through per-query patch
//! correlation rows. Matching rows (cosine 1) mean the translation kept
//! local structure intact.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Container, LeBytes};
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{he_uniform, stream_rng, zeros, RngStream};
use crate::scalar::{fl, Scalar};
use crate::vit::VitAttention;

/// Guard under feature-vector norms before division.
const NORM_GUARD: f64 = 1e-12;

/// Guard for min-max normalization of attention maps.
const FLAT_EPS: f64 = 1e-12;

// ---- attention maps ----

/// Per-pixel relevance weights in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct AttentionMap<T: Scalar> {
    pub weights: Array2<T>,
}

impl<T: Scalar> AttentionMap<T> {
    pub fn new(weights: Array2<T>) -> Result<Self> {
        if weights
            .iter()
            .any(|&v| v < T::zero() || v > T::one() || !v.is_finite())
        {
            return Err(Error::Numerical("attention weights outside [0,1]".into()));
        }
        Ok(AttentionMap { weights })
    }

    pub fn ones(h: usize, w: usize) -> Self {
        AttentionMap {
            weights: Array2::from_elem((h, w), T::one()),
        }
    }
}

fn min_max_normalize<T: Scalar>(mut m: Array2<T>) -> Array2<T> {
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for &v in m.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo < fl(FLAT_EPS) {
        m.fill(T::zero());
        return m;
    }
    let span = hi - lo;
    m.mapv_inplace(|v| ((v - lo) / span).max(T::zero()).min(T::one()));
    m
}

/// Bilinear upsampling of a coarse grid to `h x w`.
fn bilinear_upsample<T: Scalar>(grid: &Array2<T>, h: usize, w: usize) -> Array2<T> {
    let (gh, gw) = grid.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let fy = if h > 1 {
            fl::<T>(y as f64) * fl::<T>((gh - 1) as f64) / fl::<T>((h - 1) as f64)
        } else {
            T::zero()
        };
        let fx = if w > 1 {
            fl::<T>(x as f64) * fl::<T>((gw - 1) as f64) / fl::<T>((w - 1) as f64)
        } else {
            T::zero()
        };
        let y0 = fy.floor().as_f64() as usize;
        let x0 = fx.floor().as_f64() as usize;
        let y1 = (y0 + 1).min(gh - 1);
        let x1 = (x0 + 1).min(gw - 1);
        let dy = fy - fl(y0 as f64);
        let dx = fx - fl(x0 as f64);
        let top = grid[[y0, x0]] * (T::one() - dx) + grid[[y0, x1]] * dx;
        let bot = grid[[y1, x0]] * (T::one() - dx) + grid[[y1, x1]] * dx;
        top * (T::one() - dy) + bot * dy
    })
}

fn saliency_map<T: Scalar>(pixels: &Array3<T>) -> Array2<T> {
    let (c, h, w) = pixels.dim();
    let third = T::one() / fl::<T>(c as f64);
    let gray = Array2::from_shape_fn((h, w), |(y, x)| {
        (0..c).map(|ci| pixels[[ci, y, x]]).sum::<T>() * third
    });
    let half = fl::<T>(0.5);
    let mag = Array2::from_shape_fn((h, w), |(y, x)| {
        // central differences with replicated edges
        let xm = gray[[y, x.saturating_sub(1)]];
        let xp = gray[[y, (x + 1).min(w - 1)]];
        let ym = gray[[y.saturating_sub(1), x]];
        let yp = gray[[(y + 1).min(h - 1), x]];
        let gx = (xp - xm) * half;
        let gy = (yp - ym) * half;
        (gx * gx + gy * gy).sqrt()
    });
    min_max_normalize(mag)
}

/// Frozen attention source. No gradients flow into a provider.
pub enum AttentionProvider<T: Scalar + LeBytes> {
    /// Dependency-free fallback: normalized local intensity-gradient
    /// magnitude.
    SaliencyStub,
    /// Class-token attention of a frozen vision transformer loaded from a
    /// container weight file.
    PretrainedVit(Box<VitAttention<T>>),
}

impl<T: Scalar + LeBytes> AttentionProvider<T> {
    pub fn pretrained_vit(path: &Path) -> Result<Self> {
        Ok(AttentionProvider::PretrainedVit(Box::new(
            VitAttention::load(path)?,
        )))
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttentionProvider::SaliencyStub => "saliency_stub",
            AttentionProvider::PretrainedVit(_) => "pretrained_vit",
        }
    }

    /// Attention map at image resolution, min-max normalized to `[0,1]`.
    pub fn map(&self, pixels: &Array3<T>) -> Result<AttentionMap<T>> {
        let (_, h, w) = pixels.dim();
        let weights = match self {
            AttentionProvider::SaliencyStub => saliency_map(pixels),
            AttentionProvider::PretrainedVit(vit) => {
                let grid = vit.cls_attention_grid(pixels)?;
                min_max_normalize(bilinear_upsample(&grid, h, w))
            }
        };
        AttentionMap::new(weights)
    }
}

/// Elementwise gating of an image by an attention map, broadcast over
/// channels. The map enters the graph as a constant.
pub fn apply_attention_vars<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    attn: &AttentionMap<T>,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || attn.weights.dim() != (s[1], s[2]) {
        return Err(Error::Config(format!(
            "attention map {:?} does not match image {s:?}",
            attn.weights.dim()
        )));
    }
    let a = g.constant(
        attn.weights
            .clone()
            .into_shape_with_order((1, s[1], s[2]))
            .unwrap()
            .into_dyn(),
    );
    let ab = g.broadcast_to(a, &s);
    Ok(g.mul(x, ab))
}

pub fn apply_attention<T: Scalar>(
    x: &ImageSample<T>,
    attn: &AttentionMap<T>,
) -> Result<Array3<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.pixels.clone().into_dyn());
    let out = apply_attention_vars(&mut g, xv, attn)?;
    Ok(g
        .value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap())
}

// ---- feature extraction ----

struct ExtractorLayer<T: Scalar> {
    w: ndarray::ArrayD<T>,
    b: ndarray::ArrayD<T>,
    stride: usize,
    pool_before: bool,
    tap_after: bool,
}

/// Frozen convolutional feature stack with tap points. Gradients flow
/// through it to the input image, never into its weights.
pub struct FeatureExtractor<T: Scalar> {
    id: String,
    layers: Vec<ExtractorLayer<T>>,
    tap_ids: Vec<String>,
}

/// Features from the tap layers, coarsest last.
pub struct FeatureStack<T: Scalar> {
    pub layers: Vec<Array3<T>>,
    pub tap_ids: Vec<String>,
}

impl<T: Scalar> FeatureExtractor<T> {
    /// Default extractor: a fixed-seed random conv stack with three taps at
    /// strides 2, 4 and 8, mirroring the depth layout of the pretrained
    /// 16-layer classifier option.
    pub fn random_stack(seed: u64) -> Self {
        let mut rng = stream_rng(seed, RngStream::InitExtractor, 0);
        let mut layers = Vec::new();
        let widths: [(usize, usize, usize, bool); 5] = [
            (3, 32, 2, false),
            (32, 32, 1, true),
            (32, 64, 2, false),
            (64, 64, 1, true),
            (64, 128, 2, true),
        ];
        for (cin, cout, stride, tap) in widths {
            layers.push(ExtractorLayer {
                w: he_uniform(&[cout, cin, 3, 3], cin * 9, &mut rng),
                b: zeros(&[cout]),
                stride,
                pool_before: false,
                tap_after: tap,
            });
        }
        FeatureExtractor {
            id: format!("random_stack(seed={seed})"),
            layers,
            tap_ids: vec!["stride2".into(), "stride4".into(), "stride8".into()],
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn tap_names(&self) -> &[String] {
        &self.tap_ids
    }

    /// Run the stack inside a graph, returning one node per tap.
    pub fn tap_vars(&self, g: &mut Graph<T>, x: Var) -> Vec<Var> {
        let mut feat = x;
        let mut taps = Vec::with_capacity(self.tap_ids.len());
        for layer in &self.layers {
            if layer.pool_before {
                feat = g.max_pool2(feat);
            }
            let w = g.constant(layer.w.clone());
            let b = g.constant(layer.b.clone());
            feat = g.conv2d(feat, w, Some(b), layer.stride, 1);
            feat = g.relu(feat);
            if layer.tap_after {
                taps.push(feat);
            }
        }
        taps
    }

    /// Value-level extraction.
    pub fn extract(&self, pixels: &Array3<T>) -> FeatureStack<T> {
        let mut g = Graph::new();
        let x = g.constant(pixels.clone().into_dyn());
        let taps = self.tap_vars(&mut g, x);
        FeatureStack {
            layers: taps
                .into_iter()
                .map(|t| {
                    g.value(t)
                        .clone()
                        .into_dimensionality::<ndarray::Ix3>()
                        .unwrap()
                })
                .collect(),
            tap_ids: self.tap_ids.clone(),
        }
    }

    /// Build from explicit layers (tests and custom stacks).
    #[doc(hidden)]
    #[allow(clippy::type_complexity)]
    pub fn from_raw_layers(
        id: impl Into<String>,
        specs: Vec<(ndarray::ArrayD<T>, ndarray::ArrayD<T>, usize, bool, bool)>,
        tap_ids: Vec<String>,
    ) -> Self {
        FeatureExtractor {
            id: id.into(),
            layers: specs
                .into_iter()
                .map(|(w, b, stride, pool_before, tap_after)| ExtractorLayer {
                    w,
                    b,
                    stride,
                    pool_before,
                    tap_after,
                })
                .collect(),
            tap_ids,
        }
    }
}

impl<T: Scalar + LeBytes> FeatureExtractor<T> {
    /// Pretrained 16-layer convolutional classifier (first nine convs),
    /// tapping the 4th, 7th and 9th conv outputs at strides 2, 4 and 8.
    pub fn conv16(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!(
                "feature extractor `pretrained_conv16`: weight file {} not found",
                path.display()
            )));
        }
        let c = Container::<T>::load(path)?;
        if c.meta.get("kind").and_then(|v| v.as_str()) != Some("conv16") {
            return Err(Error::Checkpoint(
                "weight file is not a conv16 container".into(),
            ));
        }
        // channels of convs 1..9; pools precede convs 3, 5 and 8
        let plan: [(usize, bool, bool); 9] = [
            (64, false, false),
            (64, false, false),
            (128, true, false),
            (128, false, true),
            (256, true, false),
            (256, false, false),
            (256, false, true),
            (512, true, false),
            (512, false, true),
        ];
        let mut layers = Vec::new();
        for (i, (cout, pool_before, tap_after)) in plan.into_iter().enumerate() {
            let w = c.get(&format!("conv16.conv{}.w", i + 1))?.clone();
            let b = c.get(&format!("conv16.conv{}.b", i + 1))?.clone();
            if w.shape()[0] != cout {
                return Err(Error::Checkpoint(format!(
                    "conv16 conv{} expects {cout} output channels, file has {}",
                    i + 1,
                    w.shape()[0]
                )));
            }
            layers.push(ExtractorLayer {
                w,
                b,
                stride: 1,
                pool_before,
                tap_after,
            });
        }
        Ok(FeatureExtractor {
            id: format!("pretrained_conv16({})", path.display()),
            layers,
            tap_ids: vec!["conv4".into(), "conv7".into(), "conv9".into()],
        })
    }
}

/// Build a randomly initialized conv16 weight container with the expected
/// schema; a stand-in for converted classifier weights.
pub fn random_conv16_container<T: Scalar + LeBytes, R: Rng>(rng: &mut R) -> Container<T> {
    let mut c = Container::new(serde_json::json!({ "kind": "conv16" }));
    let channels = [64usize, 64, 128, 128, 256, 256, 256, 512, 512];
    let mut cin = 3usize;
    for (i, &cout) in channels.iter().enumerate() {
        c.insert(
            format!("conv16.conv{}.w", i + 1),
            he_uniform(&[cout, cin, 3, 3], cin * 9, rng),
        );
        c.insert(format!("conv16.conv{}.b", i + 1), zeros(&[cout]));
        cin = cout;
    }
    c
}

// ---- spatially-correlative maps ----

/// Correlation rows for a set of query points: one row per query holding
/// normalized inner products against every key in the `(2r+1)^2` patch
/// around it (key coordinates clamped at the edges).
#[derive(Debug, Clone)]
pub struct SpatialCorrelativeMap<T: Scalar> {
    pub rows: Array2<T>,
    pub queries: Vec<(usize, usize)>,
    pub offsets: Vec<(isize, isize)>,
}

pub fn patch_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut offsets = Vec::with_capacity((2 * radius + 1) * (2 * radius + 1));
    for dy in -r..=r {
        for dx in -r..=r {
            offsets.push((dy, dx));
        }
    }
    offsets
}

/// Uniformly sampled in-bounds query points.
pub fn sample_queries<R: Rng>(
    h: usize,
    w: usize,
    count: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    (0..count)
        .map(|_| (rng.random_range(0..h), rng.random_range(0..w)))
        .collect()
}

// Additive guard inside square roots: keeps d(sqrt)/dx finite on exactly
// zero rows (dead features) without perturbing healthy magnitudes.
const SQRT_GUARD: f64 = 1e-30;

fn normalize_rows<T: Scalar>(g: &mut Graph<T>, rows: Var) -> (Var, Var) {
    // returns (normalized rows, per-row squared norm)
    let shape = g.shape(rows).to_vec();
    let sq = g.mul(rows, rows);
    let ssum = g.sum_axes_keep(sq, &[1]); // [P,1]
    let guarded = g.add_scalar(ssum, fl(SQRT_GUARD));
    let norm = g.sqrt(guarded);
    let safe = g.clamp(norm, fl(NORM_GUARD), T::infinity());
    let nb = g.broadcast_to(safe, &shape);
    (g.div(rows, nb), ssum)
}

/// Graph-level correlative map: `[C,H,W]` features and `P` queries yield a
/// `[P, (2r+1)^2]` row matrix. Feature vectors are L2-normalized before
/// the inner products.
pub fn spatial_correlative_vars<T: Scalar>(
    g: &mut Graph<T>,
    feat: Var,
    queries: &[(usize, usize)],
    radius: usize,
) -> Result<Var> {
    let s = g.shape(feat).to_vec();
    if s.len() != 3 {
        return Err(Error::Config("features must be [C,H,W]".into()));
    }
    if queries.is_empty() {
        return Err(Error::Config("empty query set".into()));
    }
    let (h, w) = (s[1], s[2]);
    if queries.iter().any(|&(y, x)| y >= h || x >= w) {
        return Err(Error::Config("query point outside feature map".into()));
    }
    let qf = g.gather_points(feat, queries);
    let (qn, _) = normalize_rows(g, qf);
    let mut cols = Vec::new();
    for (dy, dx) in patch_offsets(radius) {
        let pts: Vec<(usize, usize)> = queries
            .iter()
            .map(|&(y, x)| {
                (
                    (y as isize + dy).clamp(0, h as isize - 1) as usize,
                    (x as isize + dx).clamp(0, w as isize - 1) as usize,
                )
            })
            .collect();
        let kf = g.gather_points(feat, &pts);
        let (kn, _) = normalize_rows(g, kf);
        let prod = g.mul(qn, kn);
        cols.push(g.sum_axes_keep(prod, &[1])); // [P,1]
    }
    Ok(g.concat(1, &cols))
}

/// Value-level correlative map.
pub fn spatial_correlative_map<T: Scalar>(
    feat: &Array3<T>,
    queries: &[(usize, usize)],
    radius: usize,
) -> Result<SpatialCorrelativeMap<T>> {
    let mut g = Graph::new();
    let f = g.constant(feat.clone().into_dyn());
    let rows = spatial_correlative_vars(&mut g, f, queries, radius)?;
    let rows = g
        .value(rows)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("correlative map not finite".into()));
    }
    Ok(SpatialCorrelativeMap {
        rows,
        queries: queries.to_vec(),
        offsets: patch_offsets(radius),
    })
}

// ---- the local alignment loss ----

/// How per-layer losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerReduce {
    Mean,
    Sum,
}

#[derive(Debug, Clone)]
pub struct LocalLossCfg {
    pub num_queries: usize,
    pub patch_radius: usize,
    pub layer_reduce: LayerReduce,
}

impl Default for LocalLossCfg {
    fn default() -> Self {
        LocalLossCfg {
            num_queries: 256,
            patch_radius: 4,
            layer_reduce: LayerReduce::Mean,
        }
    }
}

/// Attention-weighted spatially-correlative loss between a source image
/// and a translation candidate, both already present in the graph.
///
/// The same attention map (computed from the source) gates both images
/// unless `attn_for_y` overrides it; the same seeded query points are used
/// on both feature stacks. Rows whose feature vectors are identically zero
/// are skipped; if every row is zero the loss is 0 and a warning is
/// logged.
#[allow(clippy::too_many_arguments)]
pub fn local_loss_vars<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    y_hat: Var,
    attn: &AttentionMap<T>,
    attn_for_y: Option<&AttentionMap<T>>,
    extractor: &FeatureExtractor<T>,
    cfg: &LocalLossCfg,
    query_seed: u64,
) -> Result<Var> {
    if g.shape(x) != g.shape(y_hat) {
        return Err(Error::Config(format!(
            "local loss inputs differ in shape: {:?} vs {:?}",
            g.shape(x),
            g.shape(y_hat)
        )));
    }
    let ax = apply_attention_vars(g, x, attn)?;
    let ay = apply_attention_vars(g, y_hat, attn_for_y.unwrap_or(attn))?;
    let taps_x = extractor.tap_vars(g, ax);
    let taps_y = extractor.tap_vars(g, ay);

    let mut layer_losses = Vec::new();
    let mut any_rows = false;
    for (layer, (&fx, &fy)) in taps_x.iter().zip(taps_y.iter()).enumerate() {
        let s = g.shape(fx).to_vec();
        let mut rng = stream_rng(query_seed, RngStream::QueryPoints, layer as u64);
        let queries = sample_queries(s[1], s[2], cfg.num_queries, &mut rng);
        let rows_x = spatial_correlative_vars(g, fx, &queries, cfg.patch_radius)?;
        let rows_y = spatial_correlative_vars(g, fy, &queries, cfg.patch_radius)?;

        // cosine between paired rows; the squared-norm route keeps
        // cos(a, a) exactly 1 so identical inputs give exactly 0
        let prod = g.mul(rows_x, rows_y);
        let dot = g.sum_axes_keep(prod, &[1]); // [P,1]
        let sqx = g.mul(rows_x, rows_x);
        let nx2 = g.sum_axes_keep(sqx, &[1]);
        let sqy = g.mul(rows_y, rows_y);
        let ny2 = g.sum_axes_keep(sqy, &[1]);
        let n2 = g.mul(nx2, ny2);
        let n2g = g.add_scalar(n2, fl(SQRT_GUARD));
        let den_raw = g.sqrt(n2g);
        let den = g.clamp(den_raw, fl(NORM_GUARD), T::infinity());
        let cos = g.div(dot, den);
        let cos = g.clamp(cos, fl(-1.0), T::one());
        let neg = g.neg(cos);
        let one_minus = g.add_scalar(neg, T::one());

        // rows with a zero-norm side are skipped (mask is data-dependent
        // but constant with respect to the graph)
        let p = cfg.num_queries;
        let mut mask = ndarray::Array2::<T>::zeros((p, 1));
        let mut live = 0usize;
        {
            let vx = g.value(nx2);
            let vy = g.value(ny2);
            for i in 0..p {
                if vx[[i, 0]] > T::zero() && vy[[i, 0]] > T::zero() {
                    mask[[i, 0]] = T::one();
                    live += 1;
                }
            }
        }
        if live == 0 {
            continue;
        }
        any_rows = true;
        let mask_c = g.constant(mask.into_dyn());
        let masked = g.mul(one_minus, mask_c);
        let total = g.sum_all(masked);
        layer_losses.push(g.mul_scalar(total, T::one() / fl(live as f64)));
    }

    if !any_rows {
        log::warn!("local loss: every correlation row was zero; returning 0");
        return Ok(g.scalar(T::zero()));
    }
    let mut acc = layer_losses[0];
    for &l in &layer_losses[1..] {
        acc = g.add(acc, l);
    }
    Ok(match cfg.layer_reduce {
        LayerReduce::Mean => g.mul_scalar(acc, T::one() / fl(layer_losses.len() as f64)),
        LayerReduce::Sum => acc,
    })
}

/// Value-level local loss.
pub fn local_loss<T: Scalar>(
    x: &ImageSample<T>,
    y_hat: &ImageSample<T>,
    attn: &AttentionMap<T>,
    extractor: &FeatureExtractor<T>,
    cfg: &LocalLossCfg,
    query_seed: u64,
) -> Result<T> {
    let mut g = Graph::new();
    let xv = g.constant(x.pixels.clone().into_dyn());
    let yv = g.constant(y_hat.pixels.clone().into_dyn());
    let l = local_loss_vars(&mut g, xv, yv, attn, None, extractor, cfg, query_seed)?;
    Ok(g.scalar_value(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_all_grads;
    use ndarray::{Array1, ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_pixels(res: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, res, res), |_| f64::uniform(&mut rng, -1.0, 1.0))
    }

    fn sample(px: Array3<f64>) -> ImageSample<f64> {
        ImageSample::new(px, "t").unwrap()
    }

    #[test]
    fn saliency_stub_is_zero_on_constant_images_and_bounded() {
        let flat = Array3::from_elem((3, 8, 8), 0.25);
        let provider = AttentionProvider::<f64>::SaliencyStub;
        let a = provider.map(&flat).unwrap();
        assert!(a.weights.iter().all(|&v| v == 0.0));

        let a = provider.map(&rand_pixels(8, 1)).unwrap();
        assert!(a.weights.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn saliency_stub_peaks_on_the_contrast_boundary() {
        // left half black, right half white: the gradient magnitude,
        // computed by brute force, is largest next to the split
        let mut px = Array3::from_elem((3, 8, 8), -1.0);
        for y in 0..8 {
            for x in 4..8 {
                for c in 0..3 {
                    px[[c, y, x]] = 1.0;
                }
            }
        }
        let a = AttentionProvider::<f64>::SaliencyStub.map(&px).unwrap();
        let best = a
            .weights
            .indexed_iter()
            .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
            .unwrap()
            .0;
        assert!(
            best.1 == 3 || best.1 == 4,
            "peak at column {} instead of the boundary",
            best.1
        );
        for y in 0..8 {
            assert_eq!(a.weights[[y, 0]], 0.0, "far columns must be flat");
            assert_eq!(a.weights[[y, 7]], 0.0);
        }
    }

    #[test]
    fn apply_attention_identities() {
        let px = rand_pixels(4, 2);
        let x = sample(px.clone());
        let ones = AttentionMap::<f64>::ones(4, 4);
        assert_eq!(apply_attention(&x, &ones).unwrap(), px);

        let zeros = AttentionMap::new(Array2::zeros((4, 4))).unwrap();
        assert!(apply_attention(&x, &zeros).unwrap().iter().all(|&v| v == 0.0));

        let bad = AttentionMap::<f64>::ones(5, 5);
        assert!(apply_attention(&x, &bad).is_err());
    }

    #[test]
    fn apply_attention_matches_scalar_products_on_2x2() {
        let px = Array3::from_shape_fn((3, 2, 2), |(c, y, x)| (c + y + x) as f64 * 0.1 - 0.2);
        let a = AttentionMap::new(ndarray::arr2(&[[0.5, 1.0], [0.0, 0.25]])).unwrap();
        let out = apply_attention(&sample(px.clone()), &a).unwrap();
        for c in 0..3 {
            for y in 0..2 {
                for x in 0..2 {
                    assert_eq!(out[[c, y, x]], px[[c, y, x]] * a.weights[[y, x]]);
                }
            }
        }
    }

    #[test]
    fn extractor_is_deterministic_with_expected_strides() {
        let e = FeatureExtractor::<f64>::random_stack(17);
        let px = rand_pixels(32, 3);
        let a = e.extract(&px);
        let b = e.extract(&px);
        assert_eq!(a.layers.len(), 3);
        assert_eq!(a.layers[0].dim(), (32, 16, 16));
        assert_eq!(a.layers[1].dim(), (64, 8, 8));
        assert_eq!(a.layers[2].dim(), (128, 4, 4));
        for (x, y) in a.layers.iter().zip(b.layers.iter()) {
            assert_eq!(x, y);
        }
        // a different seed gives a different extractor
        let e2 = FeatureExtractor::<f64>::random_stack(18);
        assert_ne!(e2.extract(&px).layers[0], a.layers[0]);
    }

    #[test]
    fn first_tap_matches_hand_convolution_on_toy() {
        // single 3x3 conv layer as the only tap
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = ArrayD::from_shape_fn(IxDyn(&[1, 1, 3, 3]), |_| f64::uniform(&mut rng, -1.0, 1.0));
        let b = ArrayD::from_elem(IxDyn(&[1]), 0.1);
        let e = FeatureExtractor::from_raw_layers(
            "toy",
            vec![(w.clone(), b.clone(), 1, false, true)],
            vec!["tap".into()],
        );
        let img = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| (y * 4 + x) as f64 * 0.1);
        let out = &e.extract(&img).layers[0];
        // brute force: zero-padded 3x3 convolution + relu
        for oy in 0..4usize {
            for ox in 0..4usize {
                let mut acc = 0.1;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let iy = oy as isize + ky as isize - 1;
                        let ix = ox as isize + kx as isize - 1;
                        if (0..4).contains(&iy) && (0..4).contains(&ix) {
                            acc += w[[0, 0, ky, kx]] * img[[0, iy as usize, ix as usize]];
                        }
                    }
                }
                assert!((out[[0, oy, ox]] - acc.max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn missing_conv16_weights_name_the_extractor() {
        let err = FeatureExtractor::<f32>::conv16(Path::new("/no/such/file.bin")).err().expect("must fail");
        assert!(err.to_string().contains("pretrained_conv16"));
    }

    #[test]
    fn conv16_extractor_loads_and_taps_at_expected_strides() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let container = random_conv16_container::<f32, _>(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("conv16.bin");
        container.save(&path).unwrap();
        let e = FeatureExtractor::<f32>::conv16(&path).unwrap();
        assert_eq!(e.tap_names(), ["conv4", "conv7", "conv9"]);
        let px = Array3::from_shape_fn((3, 16, 16), |_| f32::uniform(&mut rng, -1.0, 1.0));
        let stack = e.extract(&px);
        assert_eq!(stack.layers[0].dim(), (128, 8, 8));
        assert_eq!(stack.layers[1].dim(), (256, 4, 4));
        assert_eq!(stack.layers[2].dim(), (512, 2, 2));
    }

    #[test]
    fn vit_provider_maps_through_the_full_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let tokens = 16; // 16x16 image with 4px patches
        let container = crate::vit::random_vit_container::<f64, _>(4, 1, 2, 8, tokens, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vit.bin");
        container.save(&path).unwrap();
        let provider = AttentionProvider::<f64>::pretrained_vit(&path).unwrap();
        assert_eq!(provider.name(), "pretrained_vit");
        let px = rand_pixels(16, 79);
        let a = provider.map(&px).unwrap();
        assert_eq!(a.weights.dim(), (16, 16));
        assert!(a.weights.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // min-max normalization fills the full range
        let hi = a.weights.iter().cloned().fold(f64::MIN, f64::max);
        assert!((hi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn self_key_has_unit_similarity() {
        let feat = rand_pixels(6, 5); // treat as [3,6,6] features
        let m = spatial_correlative_map(&feat, &[(2, 3), (0, 0), (5, 5)], 1).unwrap();
        let center = m.offsets.iter().position(|&o| o == (0, 0)).unwrap();
        for p in 0..3 {
            assert!((m.rows[[p, center]] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_unit_features_give_zero_one_rows() {
        // 2x2 map, 4 channels, one basis vector per position
        let mut feat = Array3::<f64>::zeros((4, 2, 2));
        feat[[0, 0, 0]] = 1.0;
        feat[[1, 0, 1]] = 1.0;
        feat[[2, 1, 0]] = 1.0;
        feat[[3, 1, 1]] = 1.0;
        let queries = [(0usize, 0usize), (1, 1)];
        let m = spatial_correlative_map(&feat, &queries, 1).unwrap();
        // brute force over all key pairs
        for (p, &(qy, qx)) in queries.iter().enumerate() {
            for (k, &(dy, dx)) in m.offsets.iter().enumerate() {
                let ky = (qy as isize + dy).clamp(0, 1) as usize;
                let kx = (qx as isize + dx).clamp(0, 1) as usize;
                let expect = if (ky, kx) == (qy, qx) { 1.0 } else { 0.0 };
                assert_eq!(m.rows[[p, k]], expect, "query {p} offset {k}");
            }
        }
    }

    #[test]
    fn rows_match_brute_force_on_small_maps() {
        // every map up to 4x4 against an independent nested-loop oracle
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (h, w) in [(2usize, 2usize), (3, 3), (4, 4), (3, 4)] {
            let c = 5;
            let feat = Array3::from_shape_fn((c, h, w), |_| f64::uniform(&mut rng, -1.0, 1.0));
            let mut queries = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    queries.push((y, x));
                }
            }
            let radius = 2;
            let m = spatial_correlative_map(&feat, &queries, radius).unwrap();
            let guard = 1e-12f64;
            for (p, &(qy, qx)) in queries.iter().enumerate() {
                // normalized query vector
                let qn: Vec<f64> = {
                    let mut s = 0.0;
                    for ci in 0..c {
                        s += feat[[ci, qy, qx]] * feat[[ci, qy, qx]];
                    }
                    let n = s.sqrt().max(guard);
                    (0..c).map(|ci| feat[[ci, qy, qx]] / n).collect()
                };
                for (k, &(dy, dx)) in m.offsets.iter().enumerate() {
                    let ky = (qy as isize + dy).clamp(0, h as isize - 1) as usize;
                    let kx = (qx as isize + dx).clamp(0, w as isize - 1) as usize;
                    let mut s = 0.0;
                    for ci in 0..c {
                        s += feat[[ci, ky, kx]] * feat[[ci, ky, kx]];
                    }
                    let n = s.sqrt().max(guard);
                    let mut dot = 0.0;
                    for ci in 0..c {
                        dot += qn[ci] * (feat[[ci, ky, kx]] / n);
                    }
                    assert_eq!(
                        m.rows[[p, k]],
                        dot,
                        "mismatch at query {p} offset ({dy},{dx}) on {h}x{w}"
                    );
                }
            }
        }
    }

    #[test]
    fn rows_are_bounded_by_cauchy_schwarz() {
        let feat = rand_pixels(8, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let queries = sample_queries(8, 8, 32, &mut rng);
        let m = spatial_correlative_map(&feat, &queries, 3).unwrap();
        assert!(m.rows.iter().all(|&v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn empty_query_set_is_an_error() {
        let feat = rand_pixels(4, 9);
        assert!(spatial_correlative_map(&feat, &[], 1).is_err());
    }

    #[test]
    fn local_loss_of_identical_images_is_exactly_zero() {
        let e = FeatureExtractor::<f64>::random_stack(17);
        let cfg = LocalLossCfg {
            num_queries: 16,
            patch_radius: 2,
            layer_reduce: LayerReduce::Mean,
        };
        let provider = AttentionProvider::<f64>::SaliencyStub;
        for seed in 0..5 {
            let x = sample(rand_pixels(16, 20 + seed));
            let a = provider.map(&x.pixels).unwrap();
            let l = local_loss(&x, &x, &a, &e, &cfg, seed).unwrap();
            assert_eq!(l, 0.0, "identical inputs must give exactly zero");
        }
    }

    #[test]
    fn local_loss_stays_in_cosine_bounds() {
        let e = FeatureExtractor::<f64>::random_stack(17);
        let cfg = LocalLossCfg {
            num_queries: 8,
            patch_radius: 1,
            layer_reduce: LayerReduce::Mean,
        };
        let provider = AttentionProvider::<f64>::SaliencyStub;
        for seed in 0..1000u64 {
            let x = sample(rand_pixels(8, 1000 + seed));
            let y = sample(rand_pixels(8, 5000 + seed));
            let a = provider.map(&x.pixels).unwrap();
            let l = local_loss(&x, &y, &a, &e, &cfg, seed).unwrap();
            assert!((0.0..=2.0).contains(&l), "loss {l} out of [0,2]");
        }
    }

    #[test]
    fn local_loss_invariant_to_positive_feature_scaling() {
        // scaling all features of one image by c > 0 leaves every row's
        // cosine unchanged thanks to the L2 normalization
        let feat = rand_pixels(6, 30);
        let scaled = feat.mapv(|v| v * 3.7);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let queries = sample_queries(6, 6, 16, &mut rng);
        let a = spatial_correlative_map(&feat, &queries, 2).unwrap();
        let b = spatial_correlative_map(&scaled, &queries, 2).unwrap();
        for (x, y) in a.rows.iter().zip(b.rows.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn local_loss_gradient_wrt_output_matches_finite_differences() {
        let e = FeatureExtractor::<f64>::random_stack(17);
        let cfg = LocalLossCfg {
            num_queries: 6,
            patch_radius: 1,
            layer_reduce: LayerReduce::Mean,
        };
        let x = rand_pixels(8, 40);
        let y = rand_pixels(8, 41);
        let provider = AttentionProvider::<f64>::SaliencyStub;
        let attn = provider.map(&x).unwrap();
        check_all_grads(
            &[y.into_dyn()],
            |g, vars| {
                let xv = g.constant(x.clone().into_dyn());
                local_loss_vars(g, xv, vars[0], &attn, None, &e, &cfg, 7).unwrap()
            },
            1e-6,
            1e-3,
        );
        let _ = Array1::<f64>::zeros(1);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let e = FeatureExtractor::<f64>::random_stack(17);
        let cfg = LocalLossCfg::default();
        let x = sample(rand_pixels(16, 50));
        let y = sample(rand_pixels(8, 51));
        let a = AttentionProvider::<f64>::SaliencyStub.map(&x.pixels).unwrap();
        assert!(local_loss(&x, &y, &a, &e, &cfg, 0).is_err());
    }
}
