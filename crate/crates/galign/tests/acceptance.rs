//! Acceptance suite: one test per release criterion, each printing a
//! single PASS line (run with `--nocapture` to see them). Tolerances are
//! pinned in code; a red test here is a release blocker.

use std::time::Instant;

use galign::config::RunConfig;
use galign::data::{generate_synthetic, Domain, DomainDataset, ImageSample};
use galign::gan::{d_loss, d_loss_value, g_loss, g_loss_value, DiscriminatorCfg, GanGMode};
use galign::global_align::{
    global_loss_vars, kl_unit_to_gauss, likelihood_loss, regularization_loss_vars, GaussianPair,
    LikelihoodMode, RegularizationMode,
};
use galign::gradcheck::check_all_grads;
use galign::graph::Graph;
use galign::local_align::{
    local_loss, local_loss_vars, sample_queries, spatial_correlative_map, AttentionProvider,
    FeatureExtractor, LayerReduce, LocalLossCfg,
};
use galign::metrics::{
    density_coverage, evaluate_run, frechet_distance, kid, FeatureStats,
};
use galign::norm::{adain_new, instance_norm, ChannelStats, StyleProjection};
use galign::params::{BoundParams, ParamSet};
use galign::scalar::Scalar;
use galign::style_encoder::{StyleCode, StyleEncoderCfg};
use galign::trainer::{StyleSource, Trainer};
use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| f64::uniform(rng, lo, hi))
}

// ---------------------------------------------------------------- 1 ----

#[test]
fn criterion_1_formula_fidelity() {
    // likelihood, literal mode: mu_x = 0, sigma_x = 1, s = 1, N = 4 -> -2
    let pair = GaussianPair::new(
        StyleCode {
            mu: Array1::zeros(4),
            sigma: Array1::from_elem(4, 1.0f64),
        },
        StyleCode {
            mu: Array1::from_elem(4, 1.0),
            sigma: Array1::from_elem(4, 0.5),
        },
    )
    .unwrap();
    let lik = likelihood_loss(&pair, &Array1::zeros(4), LikelihoodMode::Literal).unwrap();
    assert!((lik - (-2.0)).abs() < 1e-9, "literal likelihood: {lik}");

    // discriminator loss at D = 0.5 everywhere -> 2 ln 2
    let zeros = ArrayD::from_elem(IxDyn(&[1, 4, 4]), 0.0f64);
    let d = d_loss_value(&zeros, &zeros);
    assert!(
        (d - 2.0 * std::f64::consts::LN_2).abs() < 1e-9,
        "d loss at half: {d}"
    );

    // saturating generator loss at D(fake) = 0.5 -> ln(1/2)
    let s = g_loss_value(&zeros, GanGMode::Saturating);
    assert!((s - 0.5f64.ln()).abs() < 1e-9, "saturating g loss: {s}");

    println!("criterion 1 (formula fidelity): PASS");
}

// ---------------------------------------------------------------- 2 ----

#[test]
fn criterion_2_kl_monte_carlo_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for trial in 0..20 {
        let code = StyleCode {
            mu: Array1::from_shape_fn(1, |_| f64::uniform(&mut rng, -1.5, 1.5)),
            sigma: Array1::from_shape_fn(1, |_| f64::uniform(&mut rng, 0.5, 2.0)),
        };
        let analytic = kl_unit_to_gauss(&code);
        let (mu, s) = (code.mu[0], code.sigma[0]);
        let n = 1_000_000usize;
        let mut acc = 0.0;
        for _ in 0..n {
            let z = f64::std_normal(&mut rng);
            acc += -0.5 * z * z + (z - mu) * (z - mu) / (2.0 * s * s) + s.ln();
        }
        let mc = acc / n as f64;
        assert!(
            (mc - analytic).abs() < 1e-2,
            "trial {trial}: analytic {analytic} vs Monte-Carlo {mc}"
        );
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "KL oracle took {elapsed:.1}s, budget is 60s");
    println!("criterion 2 (KL Monte-Carlo oracle, {elapsed:.1}s): PASS");
}

// ---------------------------------------------------------------- 3 ----

#[test]
fn criterion_3_gradient_suite() {
    let start = Instant::now();
    let tol = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(303);

    // losses: likelihood + regularization + combined global objective
    let src_mu = rand_arr(&[4], &mut rng, -1.0, 1.0);
    let src_sg = rand_arr(&[4], &mut rng, 0.3, 1.5);
    let tgt_mu = rand_arr(&[4], &mut rng, -1.0, 1.0);
    let tgt_sg = rand_arr(&[4], &mut rng, 0.3, 1.5);
    let noise = Array1::from_shape_fn(4, |_| f64::std_normal(&mut rng));
    check_all_grads(
        &[src_mu, src_sg, tgt_mu, tgt_sg],
        |g, vars| {
            let s = galign::style_encoder::StyleVars { mu: vars[0], sigma: vars[1] };
            let t = galign::style_encoder::StyleVars { mu: vars[2], sigma: vars[3] };
            global_loss_vars(g, s, t, &noise, &Default::default()).unwrap()
        },
        1e-6,
        tol,
    );
    let code_mu = rand_arr(&[4], &mut rng, -1.0, 1.0);
    let code_sg = rand_arr(&[4], &mut rng, 0.3, 1.5);
    check_all_grads(
        &[code_mu, code_sg],
        |g, vars| {
            let c = galign::style_encoder::StyleVars { mu: vars[0], sigma: vars[1] };
            regularization_loss_vars(g, c, RegularizationMode::Standard)
        },
        1e-6,
        tol,
    );

    // local alignment loss with respect to the translated image
    let extractor = FeatureExtractor::<f64>::random_stack(17);
    let x = rand_arr(&[3, 8, 8], &mut rng, -1.0, 1.0);
    let y = rand_arr(&[3, 8, 8], &mut rng, -1.0, 1.0);
    let attn = AttentionProvider::<f64>::SaliencyStub
        .map(&x.clone().into_dimensionality::<ndarray::Ix3>().unwrap())
        .unwrap();
    let lcfg = LocalLossCfg {
        num_queries: 6,
        patch_radius: 1,
        layer_reduce: LayerReduce::Mean,
    };
    check_all_grads(
        &[y],
        |g, vars| {
            let xv = g.constant(x.clone());
            local_loss_vars(g, xv, vars[0], &attn, None, &extractor, &lcfg, 7).unwrap()
        },
        1e-6,
        tol,
    );

    // adversarial losses
    let real = rand_arr(&[1, 2, 2], &mut rng, -3.0, 3.0);
    let fake = rand_arr(&[1, 2, 2], &mut rng, -3.0, 3.0);
    check_all_grads(
        &[real, fake.clone()],
        |g, vars| d_loss(g, vars[0], vars[1]),
        1e-6,
        tol,
    );
    for mode in [GanGMode::Saturating, GanGMode::NonSaturating] {
        check_all_grads(std::slice::from_ref(&fake), |g, vars| g_loss(g, vars[0], mode), 1e-6, tol);
    }

    // layers: instance norm
    let xin = rand_arr(&[2, 3, 3], &mut rng, -1.0, 1.0);
    let gamma = rand_arr(&[2], &mut rng, 0.5, 1.5);
    let kappa = rand_arr(&[2], &mut rng, -0.5, 0.5);
    check_all_grads(
        &[xin, gamma, kappa],
        |g, vars| {
            let y = instance_norm(g, vars[0], vars[1], vars[2]).unwrap();
            let sq = g.mul(y, y);
            g.mean_all(sq)
        },
        1e-6,
        tol,
    );

    // layers: adaptive instance norm with projection
    let xa = rand_arr(&[2, 2, 2], &mut rng, -1.0, 1.0);
    let mu = rand_arr(&[3], &mut rng, -1.0, 1.0);
    let sg = rand_arr(&[3], &mut rng, 0.2, 1.5);
    let pw = rand_arr(&[4, 6], &mut rng, -0.5, 0.5);
    let pb = rand_arr(&[4], &mut rng, -0.5, 0.5);
    check_all_grads(
        &[xa, mu, sg, pw, pb],
        |g, vars| {
            let y = adain_new(g, vars[0], vars[1], vars[2], vars[3], vars[4]).unwrap();
            let sq = g.mul(y, y);
            g.mean_all(sq)
        },
        1e-6,
        tol,
    );

    // layers: mixer (all weight groups) via a tiny style encoder
    let se_cfg = StyleEncoderCfg {
        resolution: 16,
        patch: 8,
        embed_dim: 6,
        depth: 1,
        token_hidden: 5,
        channel_hidden: 7,
        n: 3,
        readout: galign::style_encoder::Readout::MeanPool,
    };
    let mut se_params = ParamSet::<f64>::new();
    se_cfg.init_params(&mut se_params, &mut rng);
    let se_names: Vec<String> = se_params.names().cloned().collect();
    let img = rand_arr(&[3, 16, 16], &mut rng, -1.0, 1.0);
    let mut inputs: Vec<ArrayD<f64>> = vec![img];
    for n in &se_names {
        inputs.push(se_params.get(n).clone());
    }
    check_all_grads(
        &inputs,
        |g, vars| {
            let mut m = indexmap::IndexMap::new();
            for (i, n) in se_names.iter().enumerate() {
                m.insert(n.clone(), vars[i + 1]);
            }
            let bound = BoundParams::from_vars(m);
            let code = se_cfg.encode_vars(g, &bound, vars[0], Domain::Source).unwrap();
            let joined = g.concat(0, &[code.mu, code.sigma]);
            let sq = g.mul(joined, joined);
            g.mean_all(sq)
        },
        1e-6,
        tol,
    );

    // layers: generator end to end on a toy
    let gen_cfg = galign::generator::GeneratorCfg {
        resolution: 8,
        depth: 2,
        base_channels: 2,
        channel_cap: 4,
        n: 2,
        use_adain_new: true,
    };
    let mut gen_params = ParamSet::<f64>::new();
    gen_cfg.init_params(&mut gen_params, &mut rng);
    let gen_names: Vec<String> = gen_params.names().cloned().collect();
    let gx = rand_arr(&[3, 8, 8], &mut rng, -0.9, 0.9);
    let gmu = rand_arr(&[2], &mut rng, -1.0, 1.0);
    let gsg = rand_arr(&[2], &mut rng, 0.2, 1.5);
    let mut inputs: Vec<ArrayD<f64>> = vec![gmu, gsg];
    for n in &gen_names {
        inputs.push(gen_params.get(n).clone());
    }
    check_all_grads(
        &inputs,
        |g, vars| {
            let mut m = indexmap::IndexMap::new();
            for (i, n) in gen_names.iter().enumerate() {
                m.insert(n.clone(), vars[i + 2]);
            }
            let bound = BoundParams::from_vars(m);
            let xv = g.constant(gx.clone());
            let code = galign::style_encoder::StyleVars { mu: vars[0], sigma: vars[1] };
            let out = gen_cfg.translate_vars(g, &bound, xv, code).unwrap();
            let sq = g.mul(out, out);
            g.mean_all(sq)
        },
        1e-6,
        tol,
    );

    // layers: discriminator end to end on a toy
    let disc_cfg = DiscriminatorCfg { base_channels: 2 };
    let mut disc_params = ParamSet::<f64>::new();
    disc_cfg.init_params(&mut disc_params, &mut rng);
    let disc_names: Vec<String> = disc_params.names().cloned().collect();
    let dx = rand_arr(&[3, 8, 8], &mut rng, -1.0, 1.0);
    let mut inputs: Vec<ArrayD<f64>> = vec![dx];
    for n in &disc_names {
        inputs.push(disc_params.get(n).clone());
    }
    check_all_grads(
        &inputs,
        |g, vars| {
            let mut m = indexmap::IndexMap::new();
            for (i, n) in disc_names.iter().enumerate() {
                m.insert(n.clone(), vars[i + 1]);
            }
            let bound = BoundParams::from_vars(m);
            let logits = disc_cfg.discriminate(g, &bound, vars[0]).unwrap();
            let sq = g.mul(logits, logits);
            g.mean_all(sq)
        },
        1e-6,
        tol,
    );

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 300.0, "gradient suite took {elapsed:.1}s, budget is 300s");
    println!("criterion 3 (finite-difference gradient suite, {elapsed:.1}s): PASS");
}

// ---------------------------------------------------------------- 4 ----

#[test]
fn criterion_4_normalization_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    // instance norm: pre-affine output statistics are (0, 1) within 1e-5
    for _ in 0..100 {
        let x3 = Array3::from_shape_fn((3, 6, 6), |_| f64::uniform(&mut rng, -1.0, 1.0));
        let mut g = Graph::<f64>::new();
        let x = g.constant(x3.into_dyn());
        let gamma = g.constant(ArrayD::from_elem(IxDyn(&[3]), 1.0));
        let kappa = g.constant(ArrayD::zeros(IxDyn(&[3])));
        let y = instance_norm(&mut g, x, gamma, kappa).unwrap();
        let out = g
            .value(y)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let stats = ChannelStats::of(&out);
        for c in 0..3 {
            assert!(stats.mean[c].abs() < 1e-5, "channel mean {}", stats.mean[c]);
            assert!((stats.std[c] - 1.0).abs() < 1e-5, "channel std {}", stats.std[c]);
        }
    }

    // adaptive instance norm: output statistics equal the projected
    // (beta, |gamma|) within 1e-5
    for _ in 0..100 {
        let c = 3;
        let n = 4;
        let x3 = Array3::from_shape_fn((c, 5, 5), |_| f64::uniform(&mut rng, -1.0, 1.0));
        let proj = StyleProjection::<f64>::learned(c, n, &mut rng);
        let mu_v = Array1::from_shape_fn(n, |_| f64::uniform(&mut rng, -1.0, 1.0));
        let sg_v = Array1::from_shape_fn(n, |_| f64::uniform(&mut rng, 0.1, 2.0));
        let code: Vec<f64> = mu_v.iter().chain(sg_v.iter()).cloned().collect();
        let mut gamma_beta = vec![0.0; 2 * c];
        for (r, gb) in gamma_beta.iter_mut().enumerate() {
            *gb = proj.bias[r] + (0..2 * n).map(|k| proj.weight[[r, k]] * code[k]).sum::<f64>();
        }
        let mut g = Graph::<f64>::new();
        let x = g.constant(x3.into_dyn());
        let mu = g.constant(mu_v.into_dyn());
        let sigma = g.constant(sg_v.into_dyn());
        let w = g.constant(proj.weight.clone().into_dyn());
        let b = g.constant(proj.bias.clone().into_dyn());
        let y = adain_new(&mut g, x, mu, sigma, w, b).unwrap();
        let out = g
            .value(y)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let stats = ChannelStats::of(&out);
        for ci in 0..c {
            assert!((stats.mean[ci] - gamma_beta[c + ci]).abs() < 1e-5);
            assert!((stats.std[ci] - gamma_beta[ci].abs()).abs() < 1e-5);
        }
    }
    println!("criterion 4 (normalization contracts): PASS");
}

// ---------------------------------------------------------------- 5 ----

#[test]
fn criterion_5_local_loss_identities() {
    let extractor = FeatureExtractor::<f64>::random_stack(17);
    let provider = AttentionProvider::<f64>::SaliencyStub;
    let cfg = LocalLossCfg {
        num_queries: 8,
        patch_radius: 1,
        layer_reduce: LayerReduce::Mean,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(505);

    // identical inputs give exactly zero
    for seed in 0..10 {
        let px = Array3::from_shape_fn((3, 16, 16), |_| f64::uniform(&mut rng, -1.0, 1.0));
        let x = ImageSample::new(px, "x").unwrap();
        let attn = provider.map(&x.pixels).unwrap();
        let l = local_loss(&x, &x, &attn, &extractor, &cfg, seed).unwrap();
        assert_eq!(l, 0.0, "identity loss must be exactly 0");
    }

    // bounded in [0, 2] over 1000 random pairs
    for seed in 0..1000u64 {
        let px = Array3::from_shape_fn((3, 8, 8), |_| f64::uniform(&mut rng, -1.0, 1.0));
        let qx = Array3::from_shape_fn((3, 8, 8), |_| f64::uniform(&mut rng, -1.0, 1.0));
        let x = ImageSample::new(px, "x").unwrap();
        let y = ImageSample::new(qx, "y").unwrap();
        let attn = provider.map(&x.pixels).unwrap();
        let l = local_loss(&x, &y, &attn, &extractor, &cfg, seed).unwrap();
        assert!((0.0..=2.0).contains(&l), "loss {l} escaped [0,2]");
    }

    // correlation rows match a brute-force evaluation exactly on all
    // feature maps up to 4x4
    for h in 2..=4usize {
        for w in 2..=4usize {
            let c = 3;
            let feat = Array3::from_shape_fn((c, h, w), |_| f64::uniform(&mut rng, -1.0, 1.0));
            let mut queries = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    queries.push((y, x));
                }
            }
            let radius = 1;
            let m = spatial_correlative_map(&feat, &queries, radius).unwrap();
            for (p, &(qy, qx)) in queries.iter().enumerate() {
                let norm = |y: usize, x: usize| -> Vec<f64> {
                    let mut s = 0.0;
                    for ci in 0..c {
                        s += feat[[ci, y, x]] * feat[[ci, y, x]];
                    }
                    let n = s.sqrt().max(1e-12);
                    (0..c).map(|ci| feat[[ci, y, x]] / n).collect()
                };
                let qn = norm(qy, qx);
                for (k, &(dy, dx)) in m.offsets.iter().enumerate() {
                    let ky = (qy as isize + dy).clamp(0, h as isize - 1) as usize;
                    let kx = (qx as isize + dx).clamp(0, w as isize - 1) as usize;
                    let kn = norm(ky, kx);
                    let dot: f64 = qn.iter().zip(kn.iter()).map(|(a, b)| a * b).sum();
                    assert_eq!(
                        m.rows[[p, k]],
                        dot,
                        "brute-force mismatch on {h}x{w} at query {p}, offset {k}"
                    );
                }
            }
        }
    }
    // sampled queries are always in bounds
    let qs = sample_queries(4, 4, 64, &mut rng);
    assert!(qs.iter().all(|&(y, x)| y < 4 && x < 4));
    println!("criterion 5 (local loss identities): PASS");
}

// ---------------------------------------------------------------- 6 ----

#[test]
fn criterion_6_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    // KID vs triple-sum brute force on all set sizes up to 20
    for n in (2..=20usize).step_by(3) {
        let m = 22 - n;
        let a = Array2::from_shape_fn((n, 4), |_| f64::uniform(&mut rng, -2.0, 2.0));
        let b = Array2::from_shape_fn((m, 4), |_| f64::uniform(&mut rng, -2.0, 2.0));
        let got = kid(&a, &b, 3).unwrap();
        // brute force
        let kern = |x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>| {
            let dot: f64 = x.iter().zip(y.iter()).map(|(p, q)| p * q).sum();
            (dot / 4.0 + 1.0).powi(3)
        };
        let mut t1 = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    t1 += kern(a.row(i), a.row(j));
                }
            }
        }
        let mut t2 = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    t2 += kern(b.row(i), b.row(j));
                }
            }
        }
        let mut t3 = 0.0;
        for i in 0..n {
            for j in 0..m {
                t3 += kern(a.row(i), b.row(j));
            }
        }
        let want =
            t1 / (n * (n - 1)) as f64 + t2 / (m * (m - 1)) as f64 - 2.0 * t3 / (n * m) as f64;
        assert!(
            (got - want).abs() < 1e-10,
            "KID brute-force mismatch at n={n}: {got} vs {want}"
        );
    }

    // density & coverage vs the O(n^2) oracle on sets up to 20
    for trial in 0..8u64 {
        let n = 5 + (trial as usize * 2) % 16;
        let m = 2 + (trial as usize * 3) % 19;
        let k = 1 + trial as usize % 3;
        let real = Array2::from_shape_fn((n, 3), |_| f64::uniform(&mut rng, -2.0, 2.0));
        let fake = Array2::from_shape_fn((m, 3), |_| f64::uniform(&mut rng, -2.0, 2.0));
        let (dens, cov) = density_coverage(&real, &fake, k).unwrap();
        let dist = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| -> f64 {
            a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
        };
        let mut hits = 0usize;
        let mut covered = vec![false; n];
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            let mut ds: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| dist(real.row(i), real.row(j)))
                .collect();
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let radius = ds[k - 1];
            for j in 0..m {
                if dist(fake.row(j), real.row(i)) <= radius {
                    hits += 1;
                    covered[i] = true;
                }
            }
        }
        let want_d = hits as f64 / (k * m) as f64;
        let want_c = covered.iter().filter(|&&c| c).count() as f64 / n as f64;
        assert_eq!(dens, want_d, "density oracle mismatch");
        assert_eq!(cov, want_c, "coverage oracle mismatch");
    }

    // Fréchet distance reproduces the 1-D closed form within 1e-9
    let a = FeatureStats {
        mean: ndarray::arr1(&[0.0]),
        cov: ndarray::arr2(&[[1.0]]),
        count: 10,
    };
    let b = FeatureStats {
        mean: ndarray::arr1(&[3.0]),
        cov: ndarray::arr2(&[[1.0]]),
        count: 10,
    };
    let d: f64 = frechet_distance(&a, &b).unwrap();
    assert!((d - 9.0).abs() < 1e-9, "1-D closed form violated: {d}");
    println!("criterion 6 (metric oracles): PASS");
}

// ---------------------------------------------------------------- 7 ----

#[test]
fn criterion_7_desk_scale_training() {
    let start = Instant::now();
    // default configuration, 64x64 synthetic corpus, 8 images per domain,
    // 200 optimizer steps, fixed seeds
    let mut cfg = RunConfig::default();
    cfg.trainer.epochs = 25; // 8 samples per epoch -> 200 steps
    cfg.trainer.max_steps = Some(200);
    let (source, target) = generate_synthetic::<f32>(&cfg.synthetic_spec()).unwrap();
    assert_eq!(source.len(), 8);
    let mut trainer = Trainer::<f32>::new(cfg.clone()).unwrap();
    let history = trainer.fit(&source, &target, None).unwrap();
    assert_eq!(history.len(), 200);

    // (a) 10-step moving average of the total generator loss at step 200
    //     is below 70% of its value at step 10
    let ma = |upto: usize| -> f64 {
        history[upto - 10..upto].iter().map(|r| r.total).sum::<f64>() / 10.0
    };
    let (ma10, ma200) = (ma(10), ma(200));
    assert!(
        ma200 < 0.7 * ma10,
        "loss failed to decay: ma@10 {ma10:.3}, ma@200 {ma200:.3}"
    );

    // (b) random-extractor Fréchet distance between translated outputs and
    //     the target domain is below the raw source-to-target distance
    let translated: Vec<ImageSample<f32>> = source
        .samples
        .iter()
        .map(|s| trainer.infer(s, StyleSource::RunningMean).unwrap())
        .collect();
    let translated = DomainDataset::new(Domain::Source, translated, 0).unwrap();
    let extractor = cfg.feature_extractor::<f32>().unwrap();
    let f_translated = evaluate_run(&translated, &target, &extractor, 17, 5, 3)
        .unwrap()
        .frechet;
    let f_source = evaluate_run(&source, &target, &extractor, 17, 5, 3)
        .unwrap()
        .frechet;
    assert!(
        f_translated < f_source,
        "translation did not move toward the target: {f_translated:.3} vs {f_source:.3}"
    );

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 900.0, "training took {elapsed:.0}s, budget is 900s");
    println!(
        "criterion 7 (desk-scale training, {elapsed:.0}s, loss {ma10:.2}->{ma200:.2}, \
         frechet {f_source:.2}->{f_translated:.2}): PASS"
    );
}

// ---------------------------------------------------------------- 8 ----

#[test]
fn criterion_8_determinism_and_ablations() {
    // bitwise-identical 50-step loss traces under identical seed + config
    let mut cfg = RunConfig::default();
    cfg.trainer.epochs = 7;
    cfg.trainer.max_steps = Some(50);
    let (source, target) = generate_synthetic::<f32>(&cfg.synthetic_spec()).unwrap();
    let run = |cfg: &RunConfig| {
        let mut t = Trainer::<f32>::new(cfg.clone()).unwrap();
        t.fit(&source, &target, None).unwrap()
    };
    let a = run(&cfg);
    let b = run(&cfg);
    assert_eq!(a.len(), 50);
    for (x, y) in a.iter().zip(b.iter()) {
        assert_eq!(
            x.total.to_bits(),
            y.total.to_bits(),
            "trace diverged at step {}",
            x.step
        );
        assert_eq!(x.d_loss.to_bits(), y.d_loss.to_bits());
        assert_eq!(x.global_term.to_bits(), y.global_term.to_bits());
        assert_eq!(x.local_term.to_bits(), y.local_term.to_bits());
    }

    // the ablation grid trains without error on the smoke corpus
    let combos = [
        (false, false, false), // baseline
        (true, false, false),  // adaptive normalization only
        (true, true, false),   // + global alignment
        (false, false, true),  // local alignment only
        (true, true, true),    // full model
    ];
    for (adain, global, local) in combos {
        let mut cfg = RunConfig::default();
        cfg.data.resolution = 32;
        cfg.data.synthetic_count = 2;
        cfg.generator.base_channels = 8;
        cfg.generator.channel_cap = 16;
        cfg.gan.base_channels = 8;
        cfg.style.embed_dim = 16;
        cfg.style.token_hidden = 16;
        cfg.style.channel_hidden = 16;
        cfg.style.n = 8;
        cfg.local.num_queries = 16;
        cfg.local.patch_radius = 2;
        cfg.trainer.epochs = 1;
        cfg.trainer.use_adain_new = adain;
        cfg.trainer.use_global = global;
        cfg.trainer.use_local = local;
        let (src, tgt) = generate_synthetic::<f32>(&cfg.synthetic_spec()).unwrap();
        let mut t = Trainer::<f32>::new(cfg).unwrap();
        let hist = t
            .fit(&src, &tgt, None)
            .unwrap_or_else(|e| panic!("ablation ({adain},{global},{local}) failed: {e}"));
        assert!(hist.iter().all(|r| r.total.is_finite()));
    }
    println!("criterion 8 (determinism and ablations): PASS");
}
