//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::cell::Cell;
use std::fs;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;

use aot_diffusion::assignment::{brute_force_solve, hungarian_solve, CostMatrix};
use aot_diffusion::data::make_two_modes;
use aot_diffusion::diagnostics::{curvature, eval_generation, paired_sign_test};
use aot_diffusion::guidance::{guided_sample, ConstantCritic, Critic, Discriminator, DiscriminatorConfig};
use aot_diffusion::model::{AnalyticDenoiser, Denoiser, DenoiserConfig, DenoiserModel};
use aot_diffusion::rng::{standard_normal_vec, substream, substream_lane, Stream};
use aot_diffusion::sampler::{heun_integrate, heun_sample, one_step_estimate, sample_endpoints, Method};
use aot_diffusion::schedule::{timesteps, LossWeighting};
use aot_diffusion::training::{train, TrainConfig};
use aot_diffusion::transport::{
    build_cost_matrix, pair_conditional, pair_independent, pair_unconditional, CostKind, PairingMode, SampleBatch,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn normal_matrix(rng: &mut aot_diffusion::rng::Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), standard_normal_vec(rng, rows * cols)).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

fn assignment_optimality() -> Outcome {
    let mut mismatches = 0;
    let mut total = 0;
    for n in 2..=7usize {
        let mut r = substream(n as u64, Stream::Data);
        for _ in 0..200 {
            let costs: Vec<f64> = (0..n * n).map(|_| r.random::<f64>()).collect();
            let m = CostMatrix::new(n, costs).unwrap();
            let h = hungarian_solve(&m);
            let b = brute_force_solve(&m).unwrap();
            if h.total_cost != b.total_cost {
                mismatches += 1;
            }
            total += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{total} matrices, {mismatches} cost mismatches"),
    )
}

struct Counting {
    inner: AnalyticDenoiser,
    calls: Cell<usize>,
}

impl Denoiser for Counting {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn denoise(&self, x: &[f64], sigma: f64) -> aot_diffusion::Result<Vec<f64>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.denoise(x, sigma)
    }
}

fn gaussian() -> AnalyticDenoiser {
    AnalyticDenoiser::IsotropicGaussian {
        mean: vec![0.0, 0.0],
        std: 1.0,
    }
}

fn nfe_accounting() -> Outcome {
    let mut bad = Vec::new();
    for n in [2usize, 8, 14, 15, 18, 64] {
        let s = timesteps(n, 0.002, 80.0, 7.0).unwrap();
        let c = Counting {
            inner: gaussian(),
            calls: Cell::new(0),
        };
        let t = heun_sample(&c, &s, &[10.0, -5.0]).unwrap();
        if c.calls.get() != 2 * n - 1 || t.nfe != 2 * n - 1 {
            bad.push(format!("n={n}: counted {} reported {}", c.calls.get(), t.nfe));
        }
    }
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            "NFE = 2n-1 for n in {2,8,14,15,18,64}".into()
        } else {
            bad.join("; ")
        },
    )
}

fn schedule_checks() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for n in [2usize, 3, 8, 18, 64, 256] {
        for rho in [1.0, 3.0, 7.0, 81.0, 421.0] {
            let s = timesteps(n, 0.002, 80.0, rho).unwrap();
            let top = (s.timesteps[0] - 80.0).abs() / 80.0;
            let bottom = (s.timesteps[n - 1] - 0.002).abs() / 0.002;
            if top > 1e-9 || bottom > 1e-9 || s.timesteps[n] != 0.0 {
                ok = false;
                notes.push(format!("endpoints off at n={n} rho={rho}"));
            }
        }
    }
    let t7 = timesteps(3, 0.002, 80.0, 7.0).unwrap().timesteps[1];
    let t90 = timesteps(3, 0.002, 80.0, 90.0).unwrap().timesteps[1];
    ok &= (t7 - 2.52).abs() / 2.52 < 0.01 && (t90 - 0.468).abs() / 0.468 < 0.01;
    notes.push(format!("t1(rho=7)={t7:.4} t1(rho=90)={t90:.4}"));
    let grid = [3.0, 5.0, 9.0, 16.0, 27.0, 47.0, 81.0, 140.0, 243.0, 421.0];
    let scheds: Vec<_> = grid.iter().map(|&r| timesteps(18, 0.002, 80.0, r).unwrap()).collect();
    let concentrated = (1..17).all(|i| scheds.windows(2).all(|w| w[1].timesteps[i] <= w[0].timesteps[i]));
    ok &= concentrated;
    notes.push(format!("interior levels non-increasing in rho: {concentrated}"));
    outcome(ok, notes.join(", "))
}

fn sampler_accuracy() -> Outcome {
    let x0 = [80.0 * 0.3, -80.0 * 1.1];
    let scale = (1.0f64 / (1.0 + 80.0 * 80.0)).sqrt();
    let exact: Vec<f64> = x0.iter().map(|v| v * scale).collect();
    let endpoint_err = |n: usize| {
        let s = timesteps(n, 0.002, 80.0, 7.0).unwrap();
        rel_err(heun_sample(&gaussian(), &s, &x0).unwrap().endpoint(), &exact)
    };
    let e64 = endpoint_err(64);
    let e128 = endpoint_err(128);

    let start = [50.0, -20.0];
    let seg_scale = ((1.0f64 + 0.002 * 0.002) / (1.0 + 80.0 * 80.0)).sqrt();
    let seg_exact: Vec<f64> = start.iter().map(|v| v * seg_scale).collect();
    let errs: Vec<f64> = [16usize, 32, 64]
        .iter()
        .map(|&n| {
            let s = timesteps(n, 0.002, 80.0, 7.0).unwrap();
            rel_err(
                heun_integrate(&gaussian(), s.levels(), &start).unwrap().endpoint(),
                &seg_exact,
            )
        })
        .collect();
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
    let second_order = ratios.iter().all(|r| (3.2..=4.8).contains(r));

    let mu = vec![0.7, -1.3];
    let pm = AnalyticDenoiser::PointMass(mu.clone());
    let s = timesteps(18, 0.002, 80.0, 7.0).unwrap();
    let point_exact = heun_sample(&pm, &s, &[33.0, 12.0]).unwrap().endpoint() == &mu[..];

    outcome(
        e64 < 1e-3 && second_order && point_exact,
        format!(
            "endpoint rel err n=64 {e64:.3e} (n=128 {e128:.3e}), convergence ratios {:.3}/{:.3}, point mass exact: {point_exact}",
            ratios[0], ratios[1]
        ),
    )
}

fn pairing_gap() -> Outcome {
    let mut wins = 0;
    let mut reductions = Vec::new();
    for trial in 0..100u64 {
        let points = normal_matrix(&mut substream(trial, Stream::Data), 256, 2);
        let noises = normal_matrix(&mut substream(trial, Stream::Noise), 256, 2);
        let batch = SampleBatch::new(points, noises, None).unwrap();
        let aot = pair_unconditional(&batch, CostKind::Euclidean).unwrap().total_cost;
        let ind = pair_independent(&batch, CostKind::Euclidean).total_cost;
        if aot < ind {
            wins += 1;
        }
        reductions.push((ind - aot) / ind);
    }
    let mean = reductions.iter().sum::<f64>() / reductions.len() as f64;
    outcome(
        wins >= 99,
        format!(
            "AOT cheaper in {wins}/100 trials, mean relative reduction {:.1}%",
            100.0 * mean
        ),
    )
}

fn relative(fd: f64, g: f64) -> f64 {
    (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6)
}

fn gradient_checks() -> Outcome {
    let cfg = DenoiserConfig {
        hidden: vec![16, 16],
        frequencies: 4,
        ..DenoiserConfig::default()
    };
    let mut model = DenoiserModel::new_random(cfg, &mut substream(21, Stream::Init)).unwrap();
    let mut r = substream(21, Stream::Data);
    let pts = normal_matrix(&mut r, 6, 2);
    let eps = normal_matrix(&mut r, 6, 2);
    let sig = [0.01, 0.1, 0.5, 2.0, 10.0, 80.0];
    let loss = |m: &DenoiserModel| {
        m.loss_and_grad(pts.view(), eps.view(), &sig, None, LossWeighting::Edm)
            .unwrap()
    };
    let g = loss(&model).grads;
    let h = 1e-5;
    let mut worst_model: f64 = 0.0;
    let mut probe = substream(21, Stream::Subsample);
    for _ in 0..20 {
        let i = probe.random_range(0..model.param_count());
        let orig = model.params()[i];
        model.params_mut()[i] = orig + h;
        let up = loss(&model).loss;
        model.params_mut()[i] = orig - h;
        let down = loss(&model).loss;
        model.params_mut()[i] = orig;
        worst_model = worst_model.max(relative((up - down) / (2.0 * h), g[i]));
    }

    let dcfg = DiscriminatorConfig {
        hidden: vec![16, 16],
        frequencies: 4,
        ..DiscriminatorConfig::default()
    };
    let mut disc = Discriminator::new(dcfg, &mut substream(22, Stream::Init)).unwrap();
    let mut worst_input: f64 = 0.0;
    let mut r = substream(22, Stream::Sampling);
    for _ in 0..20 {
        let x = standard_normal_vec(&mut r, 2);
        let sigma = standard_normal_vec(&mut r, 1)[0].exp();
        let g = disc.logit_grad(&x, sigma, None).unwrap();
        for j in 0..2 {
            let mut up = x.clone();
            up[j] += h;
            let mut dn = x.clone();
            dn[j] -= h;
            let fd = (disc.logit(&up, sigma, None).unwrap() - disc.logit(&dn, sigma, None).unwrap()) / (2.0 * h);
            worst_input = worst_input.max(relative(fd, g[j]));
        }
    }

    let x = normal_matrix(&mut r, 8, 2);
    let sigmas: Vec<f64> = standard_normal_vec(&mut r, 8).iter().map(|v| v.exp()).collect();
    let targets: Vec<f64> = (0..8).map(|i| (i % 2) as f64).collect();
    let bce = |d: &Discriminator| d.bce_loss_and_grad(x.view(), &sigmas, None, &targets).unwrap();
    let g = bce(&disc).grads;
    let mut worst_bce: f64 = 0.0;
    let mut probe = substream(22, Stream::Subsample);
    for _ in 0..20 {
        let i = probe.random_range(0..disc.params().len());
        let orig = disc.params()[i];
        disc.params_mut()[i] = orig + h;
        let up = bce(&disc).loss;
        disc.params_mut()[i] = orig - h;
        let down = bce(&disc).loss;
        disc.params_mut()[i] = orig;
        worst_bce = worst_bce.max(relative((up - down) / (2.0 * h), g[i]));
    }

    outcome(
        worst_model < 1e-4 && worst_input < 1e-4 && worst_bce < 1e-4,
        format!(
            "max relative error: denoiser loss {worst_model:.2e}, discriminator input {worst_input:.2e}, discriminator BCE {worst_bce:.2e} (20 probes each)"
        ),
    )
}

struct TwinResults {
    curvature: (f64, f64, f64),
    variance: (f64, f64, f64),
    factor: (f64, f64, f64),
    secs: f64,
    trend_ok: bool,
}

/// Trains one model per pairing mode under identical seeds and compares them
/// over 20 evaluation seeds.
fn twin_study() -> TwinResults {
    let start = Instant::now();
    let data = make_two_modes(2.0, 0.25, 8192, &mut substream_lane(0, Stream::Data, 2)).unwrap();
    let reference = make_two_modes(2.0, 0.25, 256, &mut substream_lane(1, Stream::Data, 2)).unwrap();
    let mut models = Vec::new();
    let mut trend_ok = true;
    for mode in [PairingMode::Aot, PairingMode::Independent] {
        let cfg = TrainConfig {
            pairs: 256,
            batch: 32,
            refreshes: 2000,
            mode,
            seed: 11,
            ..TrainConfig::default()
        };
        let (m, log) = train(&cfg, &data).unwrap();
        let (first, last) = log.loss_trend(0.1).unwrap();
        trend_ok &= last < first;
        models.push(m);
    }

    let s18 = timesteps(18, 0.002, 80.0, 7.0).unwrap();
    let s8 = timesteps(8, 0.002, 80.0, 81.0).unwrap();
    let mut curv = [Vec::new(), Vec::new()];
    let mut var = [Vec::new(), Vec::new()];
    let mut factor = [Vec::new(), Vec::new()];
    for seed in 0..20u64 {
        let mut r = substream(1000 + seed, Stream::Sampling);
        let inits: Vec<Vec<f64>> = (0..10)
            .map(|_| standard_normal_vec(&mut r, 2).iter().map(|v| v * 80.0).collect())
            .collect();
        let many = normal_matrix(&mut r, 256, 2) * 80.0;
        for (k, m) in models.iter().enumerate() {
            let c: f64 = inits
                .iter()
                .map(|x| curvature(&heun_sample(m, &s18, x).unwrap()).unwrap().tangent_curvature)
                .sum::<f64>()
                / inits.len() as f64;
            let est: Vec<Vec<f64>> = inits.iter().map(|x| one_step_estimate(m, x, 80.0).unwrap()).collect();
            let mean: Vec<f64> = (0..2)
                .map(|j| est.iter().map(|e| e[j]).sum::<f64>() / est.len() as f64)
                .collect();
            let v = est
                .iter()
                .map(|e| (0..2).map(|j| (e[j] - mean[j]).powi(2)).sum::<f64>())
                .sum::<f64>()
                / (est.len() - 1) as f64;
            let short = sample_endpoints(m, &s8, &many, Method::Heun).unwrap();
            let long = sample_endpoints(m, &s18, &many, Method::Heun).unwrap();
            let w_short = eval_generation(short.view(), reference.points.view(), None).unwrap().w2;
            let w_long = eval_generation(long.view(), reference.points.view(), None).unwrap().w2;
            curv[k].push(c);
            var[k].push(v);
            factor[k].push(w_short / w_long);
        }
    }
    let summary = |first: &[f64], second: &[f64]| {
        let t = paired_sign_test(first, second).unwrap();
        (t.wins as f64, t.losses as f64, t.p_value)
    };
    TwinResults {
        curvature: summary(&curv[0], &curv[1]),
        variance: summary(&var[1], &var[0]),
        factor: summary(&factor[0], &factor[1]),
        secs: start.elapsed().as_secs_f64(),
        trend_ok,
    }
}

fn twin_curvature(t: &TwinResults) -> Outcome {
    let (cw, cl, cp) = t.curvature;
    let (vw, vl, vp) = t.variance;
    outcome(
        cp < 0.05 && vp < 0.05 && t.secs < 900.0 && t.trend_ok,
        format!(
            "AOT lower curvature {cw}/{} seeds (p={cp:.2e}); AOT higher one-step variance {vw}/{} (p={vp:.2e}); losses decreasing: {}; {:.0}s",
            cw + cl,
            vw + vl,
            t.trend_ok,
            t.secs
        ),
    )
}

fn twin_factor(t: &TwinResults) -> Outcome {
    let (w, l, p) = t.factor;
    outcome(
        p < 0.05,
        format!(
            "AOT smaller W2(n=8,rho=81)/W2(n=18,rho=7) in {w}/{} seeds (p={p:.2e})",
            w + l
        ),
    )
}

fn conditional_pairing() -> Outcome {
    let mut problems = Vec::new();
    for trial in 0..10u64 {
        let mut r = substream(trial, Stream::Labels);
        let mut labels: Vec<usize> = (0..32).map(|i| i % 4).collect();
        labels.shuffle(&mut r);
        let points = normal_matrix(&mut substream(trial, Stream::Data), 32, 2);
        let noises = normal_matrix(&mut substream(trial, Stream::Noise), 32, 2);
        let batch = SampleBatch::new(points.clone(), noises.clone(), Some(labels.clone())).unwrap();
        let paired = pair_conditional(&batch, 4, CostKind::Euclidean).unwrap();
        if paired.points != points || paired.labels.as_deref() != Some(&labels[..]) {
            problems.push(format!("trial {trial}: points or labels changed"));
        }
        let mut offset = 0;
        let mut total = 0.0;
        for class in 0..4 {
            let members: Vec<usize> = (0..32).filter(|&i| labels[i] == class).collect();
            let k = members.len();
            let block = offset..offset + k;
            if members.iter().any(|&i| !block.contains(&paired.permutation[i])) {
                problems.push(format!("trial {trial}: class {class} matched outside its noise block"));
            }
            let pts = points.select(Axis(0), &members);
            let cost =
                build_cost_matrix(pts.view(), noises.slice(ndarray::s![block, ..]), CostKind::Euclidean).unwrap();
            let best = brute_force_solve(&cost).unwrap().total_cost;
            let got: f64 = members
                .iter()
                .map(|&i| {
                    let d = &points.row(i) - &paired.noises.row(i);
                    d.dot(&d).sqrt()
                })
                .sum();
            if (got - best).abs() > 1e-12 * best {
                problems.push(format!("trial {trial} class {class}: cost {got} vs optimum {best}"));
            }
            total += got;
            offset += k;
        }
        let mut seen = paired.permutation.clone();
        seen.sort_unstable();
        if seen != (0..32).collect::<Vec<_>>() || (total - paired.total_cost).abs() > 1e-12 * total {
            problems.push(format!("trial {trial}: permutation or total cost inconsistent"));
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            "10 batches (N=32, C=4): class-wise optimal, labels and order unchanged".into()
        } else {
            problems.join("; ")
        },
    )
}

fn guidance_identities() -> Outcome {
    let cfg = DenoiserConfig {
        hidden: vec![32, 32],
        ..DenoiserConfig::default()
    };
    let model = DenoiserModel::new_random(cfg, &mut substream(31, Stream::Init)).unwrap();
    let dcfg = DiscriminatorConfig {
        hidden: vec![16, 16],
        ..DiscriminatorConfig::default()
    };
    let disc = Discriminator::new(dcfg.clone(), &mut substream(32, Stream::Init)).unwrap();
    let mut flat = disc.params().to_vec();
    let n = flat.len();
    let out_w = n - 1 - 16..n - 1;
    for p in &mut flat[out_w] {
        *p = 0.0;
    }
    flat[n - 1] = 1.7;
    let constant_disc = Discriminator::from_params(dcfg, flat).unwrap();
    let constant = ConstantCritic { dim: 2, value: -0.4 };

    let s = timesteps(18, 0.002, 80.0, 7.0).unwrap();
    let mut r = substream(33, Stream::Sampling);
    let mut zero_weight_ok = true;
    let mut constant_ok = true;
    for _ in 0..5 {
        let x: Vec<f64> = standard_normal_vec(&mut r, 2).iter().map(|v| v * 80.0).collect();
        let base = heun_sample(&model, &s, &x).unwrap();
        zero_weight_ok &= guided_sample(&model, &disc, &s, &x, 0.0, None).unwrap().trajectory == base;
        for w in [0.1, 1.0, 10.0] {
            constant_ok &= guided_sample(&model, &constant, &s, &x, w, None).unwrap().trajectory == base;
            constant_ok &= guided_sample(&model, &constant_disc, &s, &x, w, None)
                .unwrap()
                .trajectory
                == base;
        }
    }
    outcome(
        zero_weight_ok && constant_ok,
        format!(
            "w=0 bit-identical: {zero_weight_ok}; constant logit bit-identical for w in {{0.1,1,10}}: {constant_ok}"
        ),
    )
}

fn reproducibility() -> Outcome {
    let dirs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut codes = Vec::new();
    let mut artifacts = Vec::new();
    for dir in &dirs {
        let out = dir.path().join("run");
        let ck = out.join("checkpoint.json");
        let samples = dir.path().join("samples.csv");
        let train_args = [
            "aotdiff",
            "--seed",
            "5",
            "train",
            "--toy",
            "two-modes",
            "--toy-count",
            "512",
            "--out",
            out.to_str().unwrap(),
            "--pairs",
            "64",
            "--batch",
            "16",
            "--refreshes",
            "20",
            "--hidden",
            "32,32",
        ];
        codes.push(aot_diffusion::cli::run(train_args));
        let sample_args = [
            "aotdiff",
            "--seed",
            "5",
            "sample",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--count",
            "64",
            "--steps",
            "8",
            "--out",
            samples.to_str().unwrap(),
        ];
        codes.push(aot_diffusion::cli::run(sample_args));
        artifacts.push((
            fs::read(&ck).unwrap_or_default(),
            fs::read(out.join("train_log.csv")).unwrap_or_default(),
            fs::read(&samples).unwrap_or_default(),
        ));
    }
    let ok_codes = codes.iter().all(|&c| c == 0);
    let (a, b) = (&artifacts[0], &artifacts[1]);
    let non_empty = !a.0.is_empty() && !a.2.is_empty();
    let same = a == b;
    outcome(
        ok_codes && non_empty && same,
        format!(
            "exit codes {codes:?}; checkpoint {} bytes, samples {} bytes; byte-identical across runs: {same}",
            a.0.len(),
            a.2.len()
        ),
    )
}

/// Runs `check` and fails it if it takes longer than `budget` seconds.
fn timed(budget: f64, check: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = check();
    let secs = start.elapsed().as_secs_f64();
    o.pass &= secs < budget;
    o.detail.push_str(&format!("; {secs:.2}s (budget {budget}s)"));
    o
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("assignment optimality", timed(10.0, assignment_optimality)),
        ("sampler NFE accounting", timed(1.0, nfe_accounting)),
        ("schedule values", schedule_checks()),
        ("sampler accuracy", timed(5.0, sampler_accuracy)),
        ("AOT pairing gap", timed(60.0, pairing_gap)),
        ("gradient checks", timed(30.0, gradient_checks)),
    ];
    let twins = twin_study();
    results.push(("twin curvature and variance", twin_curvature(&twins)));
    results.push(("twin few-step W2 factor", twin_factor(&twins)));
    results.push(("conditional pairing", timed(5.0, conditional_pairing)));
    results.push(("guidance identities", timed(5.0, guidance_identities)));
    results.push(("reproducibility", reproducibility()));

    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    for (i, (name, o)) in results.iter().enumerate() {
        println!(
            "[{}] {:>2}. {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
    }
    println!("acceptance: {}/{} passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
