//! Training loop: alternating discriminator/generator updates under the
//! combined objective (adversarial + weighted global and local alignment),
//! deterministic under a seed, with atomic checkpoints and a line-delimited
//! history log.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Container, LeBytes};
use crate::config::RunConfig;
use crate::data::{Domain, DomainDataset, ImageSample};
use crate::error::{Error, Result};
use crate::gan::{d_loss, g_loss, DiscriminatorCfg};
use crate::generator::GeneratorCfg;
use crate::global_align::{global_loss_vars, unit_noise};
use crate::graph::Graph;
use crate::local_align::{local_loss_vars, AttentionProvider, FeatureExtractor};
use crate::params::{stream_rng, Adam, BoundParams, ParamSet, RngStream};
use crate::scalar::{fl, Scalar};
use crate::style_encoder::{StyleCode, StyleEncoderCfg};

/// Loss components of one optimizer step, reported in `f64` regardless of
/// the training scalar type.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub epoch: u64,
    pub d_loss: f64,
    pub g_adversarial: f64,
    pub global_term: f64,
    pub local_term: f64,
    pub total: f64,
    pub lambda_global: f64,
    pub lambda_local: f64,
    pub wall_ms: f64,
}

/// Where training artifacts land; all optional so tests can run in memory.
#[derive(Debug, Clone)]
pub struct RunDirs {
    pub checkpoints: PathBuf,
    pub samples: PathBuf,
    pub history: PathBuf,
}

/// Inference-time style conditioning.
pub enum StyleSource<'a, T: Scalar> {
    /// Running mean of target codes collected during training.
    RunningMean,
    /// Encode this target-domain image on the fly.
    FromImage(&'a ImageSample<T>),
}

pub struct Trainer<T: Scalar + LeBytes> {
    pub cfg: RunConfig,
    pub params: ParamSet<T>,
    pub opt_gen: Adam<T>,
    pub opt_disc: Adam<T>,
    pub step: u64,
    pub running_style: Option<StyleCode<T>>,
    style_cfg: StyleEncoderCfg,
    gen_cfg: GeneratorCfg,
    disc_cfg: DiscriminatorCfg,
    provider: AttentionProvider<T>,
    extractor: FeatureExtractor<T>,
}

fn is_disc(name: &str) -> bool {
    name.starts_with("discriminator.")
}

fn is_gen_side(name: &str) -> bool {
    name.starts_with("generator.") || name.starts_with("style_encoder.")
}

impl<T: Scalar + LeBytes> Trainer<T> {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let style_cfg = cfg.style_encoder_cfg();
        let gen_cfg = cfg.generator_cfg();
        let disc_cfg = cfg.discriminator_cfg();
        style_cfg.validate()?;
        gen_cfg.validate()?;

        let mut params = ParamSet::new();
        let seed = cfg.trainer.seed;
        style_cfg.init_params(&mut params, &mut stream_rng(seed, RngStream::InitStyle, 0));
        gen_cfg.init_params(&mut params, &mut stream_rng(seed, RngStream::InitGenerator, 0));
        disc_cfg.init_params(
            &mut params,
            &mut stream_rng(seed, RngStream::InitDiscriminator, 0),
        );

        let provider = cfg.attention_provider()?;
        let extractor = cfg.feature_extractor()?;
        let opt = |lr: f64, b1: f64, b2: f64| Adam::new(fl::<T>(lr), fl(b1), fl(b2));
        Ok(Trainer {
            opt_gen: opt(cfg.trainer.lr, cfg.trainer.adam_beta1, cfg.trainer.adam_beta2),
            opt_disc: opt(cfg.trainer.lr, cfg.trainer.adam_beta1, cfg.trainer.adam_beta2),
            step: 0,
            running_style: None,
            style_cfg,
            gen_cfg,
            disc_cfg,
            provider,
            extractor,
            params,
            cfg,
        })
    }

    fn check_finite(&self, term: &str, v: f64) -> Result<f64> {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: term.to_string(),
                step: self.step,
            });
        }
        Ok(v)
    }

    /// Discriminator update on one batch of unpaired samples. The fake
    /// image is produced with every generator-side parameter bound as a
    /// constant, so no gradient can reach the generator.
    pub fn discriminator_step(
        &mut self,
        pairs: &[(&ImageSample<T>, &ImageSample<T>)],
    ) -> Result<f64> {
        let mut grad_acc: IndexMap<String, ArrayD<T>> = IndexMap::new();
        let mut loss_acc = 0.0;
        for (x, y) in pairs {
            let mut g = Graph::new();
            let bound = BoundParams::bind_all(&mut g, &self.params, is_disc);
            let xv = g.constant(x.pixels.clone().into_dyn());
            let yv = g.constant(y.pixels.clone().into_dyn());
            let code = self.style_cfg.encode_vars(&mut g, &bound, yv, Domain::Target)?;
            let fake = self.gen_cfg.translate_vars(&mut g, &bound, xv, code)?;
            let real_logits = self.disc_cfg.discriminate(&mut g, &bound, yv)?;
            let fake_logits = self.disc_cfg.discriminate(&mut g, &bound, fake)?;
            let loss = d_loss(&mut g, real_logits, fake_logits);
            loss_acc += self.check_finite("d_loss", g.scalar_value(loss).as_f64())?;
            let grads = g.backward(loss);
            for (name, var) in bound.iter() {
                if let Some(grad) = grads.wrt(var) {
                    match grad_acc.get_mut(name) {
                        Some(acc) => *acc += grad,
                        None => {
                            grad_acc.insert(name.clone(), grad.clone());
                        }
                    }
                }
            }
        }
        let scale = fl::<T>(1.0 / pairs.len() as f64);
        for g in grad_acc.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
        self.opt_disc
            .step(&mut self.params, |name| grad_acc.get(name));
        Ok(loss_acc / pairs.len() as f64)
    }

    /// Generator-side update (generator + style encoder) on one batch.
    /// Returns `(adversarial, global, local, total)` means.
    pub fn generator_step(
        &mut self,
        pairs: &[(&ImageSample<T>, &ImageSample<T>)],
    ) -> Result<(f64, f64, f64, f64)> {
        let t = &self.cfg.trainer;
        let (lambda_g, lambda_l) = (t.lambda_global, t.lambda_local);
        // a zero weight masks the term entirely: it is neither computed
        // nor logged
        let use_global = t.use_global && lambda_g > 0.0;
        let use_local = t.use_local && lambda_l > 0.0;
        let mut grad_acc: IndexMap<String, ArrayD<T>> = IndexMap::new();
        let (mut adv_acc, mut global_acc, mut local_acc, mut total_acc) = (0.0, 0.0, 0.0, 0.0);
        let mut new_codes: Vec<StyleCode<T>> = Vec::with_capacity(pairs.len());

        for (x, y) in pairs {
            let mut g = Graph::new();
            let bound = BoundParams::bind_all(&mut g, &self.params, is_gen_side);
            let xv = g.constant(x.pixels.clone().into_dyn());
            let yv = g.constant(y.pixels.clone().into_dyn());
            let code_y = self.style_cfg.encode_vars(&mut g, &bound, yv, Domain::Target)?;
            let fake = self.gen_cfg.translate_vars(&mut g, &bound, xv, code_y)?;
            let fake_logits = self.disc_cfg.discriminate(&mut g, &bound, fake)?;
            let adv = g_loss(&mut g, fake_logits, self.cfg.gan.generator_mode);
            adv_acc += self.check_finite("g_adversarial", g.scalar_value(adv).as_f64())?;
            let mut total = adv;

            if use_global {
                let code_x = self.style_cfg.encode_vars(&mut g, &bound, xv, Domain::Source)?;
                let mut nrng = stream_rng(t.seed, RngStream::ReparamNoise, self.step);
                let noise = unit_noise::<T, _>(self.style_cfg.n, &mut nrng);
                let glob =
                    global_loss_vars(&mut g, code_x, code_y, &noise, &self.cfg.global_loss_cfg())?;
                global_acc += self.check_finite("global_loss", g.scalar_value(glob).as_f64())?;
                let weighted = g.mul_scalar(glob, fl(lambda_g));
                total = g.add(total, weighted);
            }

            if use_local {
                let attn = self.provider.map(&x.pixels)?;
                let attn_y = if self.cfg.local.recompute_attention {
                    let fake_pixels = g
                        .value(fake)
                        .clone()
                        .into_dimensionality::<ndarray::Ix3>()
                        .unwrap();
                    Some(self.provider.map(&fake_pixels)?)
                } else {
                    None
                };
                let loc = local_loss_vars(
                    &mut g,
                    xv,
                    fake,
                    &attn,
                    attn_y.as_ref(),
                    &self.extractor,
                    &self.cfg.local_loss_cfg(),
                    splitmix_pair(t.seed, self.step),
                )?;
                local_acc += self.check_finite("local_loss", g.scalar_value(loc).as_f64())?;
                let weighted = g.mul_scalar(loc, fl(lambda_l));
                total = g.add(total, weighted);
            }

            total_acc += self.check_finite("total", g.scalar_value(total).as_f64())?;
            let grads = g.backward(total);
            for (name, var) in bound.iter() {
                if let Some(grad) = grads.wrt(var) {
                    match grad_acc.get_mut(name) {
                        Some(acc) => *acc += grad,
                        None => {
                            grad_acc.insert(name.clone(), grad.clone());
                        }
                    }
                }
            }
            new_codes.push(code_y.values(&g));
        }

        let scale = fl::<T>(1.0 / pairs.len() as f64);
        for gr in grad_acc.values_mut() {
            gr.mapv_inplace(|v| v * scale);
        }
        self.opt_gen
            .step(&mut self.params, |name| grad_acc.get(name));

        // running mean of the target style code, for inference
        let momentum = fl::<T>(self.cfg.trainer.running_code_momentum);
        for code in new_codes {
            match &mut self.running_style {
                None => self.running_style = Some(code),
                Some(run) => {
                    let one_m = T::one() - momentum;
                    run.mu
                        .zip_mut_with(&code.mu, |r, &c| *r = *r * momentum + one_m * c);
                    run.sigma
                        .zip_mut_with(&code.sigma, |r, &c| *r = *r * momentum + one_m * c);
                }
            }
        }

        let n = pairs.len() as f64;
        Ok((adv_acc / n, global_acc / n, local_acc / n, total_acc / n))
    }

    /// One full optimization step: discriminator first (with the fake
    /// image detached), then the generator side.
    pub fn train_step(
        &mut self,
        x: &ImageSample<T>,
        y: &ImageSample<T>,
    ) -> Result<StepReport> {
        self.train_step_batch(&[(x, y)], 0)
    }

    pub fn train_step_batch(
        &mut self,
        pairs: &[(&ImageSample<T>, &ImageSample<T>)],
        epoch: u64,
    ) -> Result<StepReport> {
        let start = Instant::now();
        let d = self.discriminator_step(pairs)?;
        let (adv, global_term, local_term, total) = self.generator_step(pairs)?;
        let report = StepReport {
            step: self.step,
            epoch,
            d_loss: d,
            g_adversarial: adv,
            global_term,
            local_term,
            total,
            lambda_global: self.cfg.trainer.lambda_global,
            lambda_local: self.cfg.trainer.lambda_local,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.step += 1;
        Ok(report)
    }

    /// Full training run with per-epoch checkpoints, periodic sample grids
    /// and a line-delimited history log.
    pub fn fit(
        &mut self,
        source: &DomainDataset<T>,
        target: &DomainDataset<T>,
        out: Option<&RunDirs>,
    ) -> Result<Vec<StepReport>> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::Data("training needs nonempty datasets".into()));
        }
        let mut history = Vec::new();
        let mut log_file = match out {
            Some(dirs) => {
                if let Some(parent) = dirs.history.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                Some(std::fs::File::create(&dirs.history)?)
            }
            None => None,
        };
        let batch = self.cfg.trainer.batch;
        let max_steps = self.cfg.trainer.max_steps;
        let epochs = self.cfg.trainer.epochs;
        'outer: for epoch in 0..epochs {
            let order = source.epoch_order(epoch);
            for chunk in order.chunks(batch) {
                if let Some(cap) = max_steps {
                    if self.step >= cap {
                        break 'outer;
                    }
                }
                use rand::Rng;
                let mut pairing =
                    stream_rng(self.cfg.trainer.seed, RngStream::Pairing, self.step);
                let pairs: Vec<(&ImageSample<T>, &ImageSample<T>)> = chunk
                    .iter()
                    .map(|&i| {
                        let j = pairing.random_range(0..target.len());
                        (&source.samples[i], &target.samples[j])
                    })
                    .collect();
                let report = self.train_step_batch(&pairs, epoch)?;
                if let Some(f) = log_file.as_mut() {
                    let line = serde_json::to_string(&report).expect("report serializes");
                    writeln!(f, "{line}")?;
                }
                if let Some(dirs) = out {
                    if self.cfg.trainer.sample_every > 0
                        && report.step % self.cfg.trainer.sample_every == 0
                    {
                        self.emit_sample_grid(pairs[0].0, &dirs.samples, report.step)?;
                    }
                }
                history.push(report);
            }
            if let Some(dirs) = out {
                if self.cfg.trainer.checkpoint_every_epochs > 0
                    && (epoch + 1) % self.cfg.trainer.checkpoint_every_epochs == 0
                {
                    std::fs::create_dir_all(&dirs.checkpoints)?;
                    let ckpt = self.to_checkpoint();
                    ckpt.save(&dirs.checkpoints.join(format!("epoch_{epoch:04}.ckpt")))?;
                    ckpt.save(&dirs.checkpoints.join("latest.ckpt"))?;
                }
            }
        }
        // final checkpoint for capped runs that end mid-epoch
        if let Some(dirs) = out {
            std::fs::create_dir_all(&dirs.checkpoints)?;
            self.to_checkpoint().save(&dirs.checkpoints.join("latest.ckpt"))?;
        }
        Ok(history)
    }

    /// Side-by-side `input | attention | output` panel.
    fn emit_sample_grid(
        &self,
        x: &ImageSample<T>,
        dir: &Path,
        step: u64,
    ) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let attn = self.provider.map(&x.pixels)?;
        let out = self.infer(x, StyleSource::RunningMean).or_else(|_| {
            // before any generator step there is no running code yet
            self.infer_with_code(x, &self.zero_style_code())
        })?;
        let res = x.resolution();
        let mut grid = ndarray::Array3::<T>::zeros((3, res, res * 3));
        for c in 0..3 {
            for yy in 0..res {
                for xx in 0..res {
                    grid[[c, yy, xx]] = x.pixels[[c, yy, xx]];
                    // map [0,1] attention into [-1,1] grayscale
                    grid[[c, yy, res + xx]] =
                        attn.weights[[yy, xx]] * fl::<T>(2.0) - T::one();
                    grid[[c, yy, 2 * res + xx]] = out.pixels[[c, yy, xx]];
                }
            }
        }
        let img = crate::data::tensor_to_rgb(&grid);
        img.save(dir.join(format!("step_{step:06}.png")))?;
        Ok(())
    }

    fn zero_style_code(&self) -> StyleCode<T> {
        StyleCode {
            mu: ndarray::Array1::zeros(self.style_cfg.n),
            sigma: ndarray::Array1::from_elem(self.style_cfg.n, T::one()),
        }
    }

    pub fn infer_with_code(
        &self,
        x: &ImageSample<T>,
        code: &StyleCode<T>,
    ) -> Result<ImageSample<T>> {
        self.gen_cfg.translate(&self.params, x, code)
    }

    /// Translate with the stored running-mean target code or a code
    /// encoded from a given target image.
    pub fn infer(&self, x: &ImageSample<T>, style: StyleSource<'_, T>) -> Result<ImageSample<T>> {
        let code = match style {
            StyleSource::RunningMean => self
                .running_style
                .clone()
                .ok_or_else(|| {
                    Error::Config(
                        "running-mean style requested but no training step has populated it"
                            .into(),
                    )
                })?,
            StyleSource::FromImage(y) => {
                self.style_cfg.encode(&self.params, y, Domain::Target)?
            }
        };
        self.infer_with_code(x, &code)
    }

    /// Encode an image's style code with the current parameters.
    pub fn encode_style(&self, img: &ImageSample<T>, domain: Domain) -> Result<StyleCode<T>> {
        self.style_cfg.encode(&self.params, img, domain)
    }

    // ---- checkpointing ----

    pub fn to_checkpoint(&self) -> Container<T> {
        let mut c = Container::new(serde_json::json!({
            "kind": "trainer_checkpoint",
            "step": self.step,
            "opt_gen_steps": self.opt_gen.step_count(),
            "opt_disc_steps": self.opt_disc.step_count(),
            "has_running_style": self.running_style.is_some(),
            "config_toml": self.cfg.to_toml_string(),
        }));
        for (name, arr) in self.params.iter() {
            c.insert(name.clone(), arr.clone());
        }
        for (opt, tag) in [(&self.opt_gen, "gen"), (&self.opt_disc, "disc")] {
            for (name, (m, v)) in opt.moments() {
                c.insert(format!("optim.{tag}.{name}.m"), m.clone());
                c.insert(format!("optim.{tag}.{name}.v"), v.clone());
            }
        }
        if let Some(run) = &self.running_style {
            c.insert("trainer.running_style.mu", run.mu.clone().into_dyn());
            c.insert("trainer.running_style.sigma", run.sigma.clone().into_dyn());
        }
        c
    }

    pub fn from_checkpoint(container: &Container<T>) -> Result<Self> {
        let meta = &container.meta;
        if meta.get("kind").and_then(|v| v.as_str()) != Some("trainer_checkpoint") {
            return Err(Error::Checkpoint("not a trainer checkpoint".into()));
        }
        let config_toml = meta
            .get("config_toml")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Checkpoint("checkpoint lacks config snapshot".into()))?;
        let cfg: RunConfig = toml::from_str(config_toml)
            .map_err(|e| Error::Checkpoint(format!("embedded config invalid: {e}")))?;
        let mut trainer = Trainer::new(cfg)?;

        // overwrite freshly initialized parameters with stored ones
        let names: Vec<String> = trainer.params.names().cloned().collect();
        for name in &names {
            let stored = container.get(name)?;
            if stored.shape() != trainer.params.get(name).shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`"
                )));
            }
            trainer.params.get_mut(name).assign(stored);
        }
        let get_u64 = |key: &str| -> Result<u64> {
            meta.get(key)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Checkpoint(format!("missing meta `{key}`")))
        };
        trainer.step = get_u64("step")?;
        for (tag, steps, opt) in [
            ("gen", get_u64("opt_gen_steps")?, &mut trainer.opt_gen),
            ("disc", get_u64("opt_disc_steps")?, &mut trainer.opt_disc),
        ] {
            let mut moments = IndexMap::new();
            for name in &names {
                let m_name = format!("optim.{tag}.{name}.m");
                if container.arrays.contains_key(&m_name) {
                    let m = container.get(&m_name)?.clone();
                    let v = container.get(&format!("optim.{tag}.{name}.v"))?.clone();
                    moments.insert(name.clone(), (m, v));
                }
            }
            opt.restore(steps, moments);
        }
        if meta
            .get("has_running_style")
            .and_then(|v| v.as_bool())
            .unwrap_or(false)
        {
            trainer.running_style = Some(StyleCode {
                mu: container
                    .get("trainer.running_style.mu")?
                    .clone()
                    .into_dimensionality::<ndarray::Ix1>()
                    .map_err(|e| Error::Checkpoint(e.to_string()))?,
                sigma: container
                    .get("trainer.running_style.sigma")?
                    .clone()
                    .into_dimensionality::<ndarray::Ix1>()
                    .map_err(|e| Error::Checkpoint(e.to_string()))?,
            });
        }
        Ok(trainer)
    }
}

fn splitmix_pair(seed: u64, step: u64) -> u64 {
    // stable per-step seed for query sampling
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 31)
}
