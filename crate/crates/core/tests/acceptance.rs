//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dipvae::data::{generate_dataset, Dataset, FactorGrid, SHAPES_FACTOR_KINDS};
use dipvae::metrics::{evaluate, sap_score, zdiff_from_codes, EvalReport, LatentCodes, ZDiffConfig};
use dipvae::models::{init_params, Activation, BoundModel, GaussianPosterior, MlpSpec, ModelParams};
use dipvae::objectives::{
    compute_loss, covariance_stats, kl_bound_check, kl_to_standard_normal, ObjectiveConfig,
};
use dipvae::tensor::gradient_check;
use dipvae::trainer::{train, TrainConfig};
use dipvae::{Graph, Tensor};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn gradient_correctness() -> Outcome {
    let objectives = [
        ObjectiveConfig::vae(),
        ObjectiveConfig::beta_vae(4.0),
        ObjectiveConfig::dip_vae_i(10.0, 100.0),
        ObjectiveConfig::dip_vae_ii(10.0, 10.0, 200.0),
    ];
    let (batch, d, canvas) = (8, 4, 8);
    let mut worst = 0.0f64;
    let mut failures = 0;
    let mut checks = 0;
    for model_seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + model_seed);
        let hidden = rng.random_range(4..10);
        let spec = MlpSpec::new(vec![canvas * canvas, hidden], d, Activation::Tanh, model_seed).unwrap();
        let params = init_params(&spec).unwrap();
        let x_data = (0..batch * canvas * canvas).map(|_| rng.random_bool(0.3) as u8 as f64).collect();
        let x = Tensor::new(vec![batch, canvas * canvas], x_data).unwrap();
        let noise = gaussian(&mut rng, batch, d);
        for objective in &objectives {
            for (k, point) in params.tensors().into_iter().enumerate() {
                let report = gradient_check(
                    |g: &mut Graph, leaf| {
                        let vars = params
                            .tensors()
                            .into_iter()
                            .enumerate()
                            .map(|(i, t)| if i == k { leaf } else { g.constant(t.clone()) })
                            .collect();
                        let m = BoundModel::from_vars(&spec, vars);
                        let xv = g.constant(x.clone());
                        let nv = g.constant(noise.clone());
                        Ok(compute_loss(g, objective, &m, xv, nv)?.total)
                    },
                    point,
                    1e-4,
                    1e-3,
                )
                .unwrap();
                checks += 1;
                worst = worst.max(report.max_rel_error);
                if !report.passed {
                    failures += 1;
                }
            }
        }
    }
    outcome(
        failures == 0,
        format!("{checks} parameter-tensor checks, {failures} failed, max relative error {worst:.2e}"),
    )
}

fn kl_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let d = rng.random_range(1..=4);
        let mu = uniform(&mut rng, 1, d, -2.0, 2.0);
        let var = uniform(&mut rng, 1, d, 0.25, 4.0);
        let mut g = Graph::new();
        let (m, v) = (g.constant(mu.clone()), g.constant(var.clone()));
        let kl = kl_to_standard_normal(&mut g, m, v).unwrap();
        let closed = g.value(kl).item().unwrap();

        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let mut log_ratio = 0.0;
            for j in 0..d {
                let (mj, vj) = (mu.data()[j], var.data()[j]);
                let e: f64 = rng.sample(StandardNormal);
                let z = mj + vj.sqrt() * e;
                log_ratio += -0.5 * vj.ln() - 0.5 * e * e + 0.5 * z * z;
            }
            acc += log_ratio;
        }
        worst = worst.max((acc / n as f64 - closed).abs());
    }
    outcome(worst <= 1e-2, format!("max |closed form − Monte Carlo| = {worst:.4} over 10 Gaussians"))
}

fn covariance_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let (n, d) = (32, 4);
        let mu = uniform(&mut rng, n, d, -1.0, 1.0);
        let var = uniform(&mut rng, n, d, 0.1, 1.0);
        let mut g = Graph::new();
        let (m, v) = (g.constant(mu.clone()), g.constant(var.clone()));
        let stats = covariance_stats(&mut g, m, v).unwrap();
        let cov_z = g.value(stats.cov_z).clone();

        let draws = 100_000;
        let mut samples = vec![0.0; draws * d];
        for s in 0..draws {
            let i = rng.random_range(0..n);
            for j in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                samples[s * d + j] = mu.at(i, j) + var.at(i, j).sqrt() * e;
            }
        }
        let mean: Vec<f64> = (0..d)
            .map(|j| (0..draws).map(|s| samples[s * d + j]).sum::<f64>() / draws as f64)
            .collect();
        for a in 0..d {
            for b in 0..d {
                let c = (0..draws)
                    .map(|s| (samples[s * d + a] - mean[a]) * (samples[s * d + b] - mean[b]))
                    .sum::<f64>()
                    / draws as f64;
                worst = worst.max((c - cov_z.at(a, b)).abs());
            }
        }
    }
    outcome(worst <= 0.02, format!("max entrywise deviation {worst:.4} over 5 posteriors"))
}

fn factor_matrix(ds: &Dataset) -> Tensor {
    let rows: Vec<Vec<f64>> = ds.test.iter().map(|&i| ds.labels[i].as_array().to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn one_hot(ds: &Dataset) -> Tensor {
    let grid = &ds.grid;
    let sizes = [grid.shapes.len(), grid.n_x, grid.n_y, grid.n_scale, grid.n_rotation];
    let width: usize = sizes.iter().sum();
    let rows: Vec<Vec<f64>> = ds
        .test
        .iter()
        .map(|&i| {
            let f = grid.factor_index(i);
            let digits = [f.shape, f.x, f.y, f.scale, f.rotation];
            let mut row = vec![0.0; width];
            let mut offset = 0;
            for (digit, size) in digits.iter().zip(sizes) {
                row[offset + digit] = 1.0;
                offset += size;
            }
            row
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn metric_oracles() -> Outcome {
    let cfg = ZDiffConfig::default();
    let (mut sap_true, mut sap_noise, mut z_hot, mut z_const) = (f64::INFINITY, 0.0f64, f64::INFINITY, Vec::new());
    for seed in 0..5u64 {
        let ds = generate_dataset(&FactorGrid::default(), seed).unwrap();
        let factors = factor_matrix(&ds);
        let n = factors.shape()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let identical = LatentCodes::new(factors.clone(), factors.clone()).unwrap();
        sap_true = sap_true.min(sap_score(&identical, &SHAPES_FACTOR_KINDS).unwrap().score);
        let noise = LatentCodes::new(gaussian(&mut rng, n, 10), factors.clone()).unwrap();
        sap_noise = sap_noise.max(sap_score(&noise, &SHAPES_FACTOR_KINDS).unwrap().score);

        let hot = LatentCodes::new(one_hot(&ds), factors.clone()).unwrap();
        z_hot = z_hot.min(zdiff_from_codes(&hot, &cfg, seed).unwrap());
        let constant = LatentCodes::new(Tensor::zeros(&[n, 10]), factors).unwrap();
        z_const.push(zdiff_from_codes(&constant, &cfg, seed).unwrap());
    }
    let chance = 100.0 / 5.0;
    let const_ok = z_const.iter().all(|z| (z - chance).abs() <= 10.0);
    let z_const_range = z_const.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &z| (lo.min(z), hi.max(z)));
    outcome(
        sap_true >= 0.9 && sap_noise <= 0.05 && z_hot >= 95.0 && const_ok,
        format!(
            "SAP(identical) min {sap_true:.3} ≥ 0.9, SAP(noise) max {sap_noise:.3} ≤ 0.05, \
             Z-diff(one-hot) min {z_hot:.1} ≥ 95, Z-diff(constant) in [{:.1}, {:.1}] vs chance {chance}±10",
            z_const_range.0, z_const_range.1
        ),
    )
}

fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_dipvae");
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let data = p("data.cache");
    let run = |args: &[&str]| -> bool {
        Command::new(bin)
            .args(args)
            .env("RUST_LOG", "warn")
            .stdout(std::process::Stdio::null())
            .status()
            .map(|s| s.success())
            .unwrap_or(false)
    };
    let s = |path: &Path| path.to_str().unwrap().to_string();
    if !run(&["gen-data", "--out", &s(&data), "--canvas", "16", "--n-x", "6", "--n-y", "6"]) {
        return outcome(false, "gen-data failed".into());
    }
    let common = |extra: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = [
            "train", "--data", &s(&data), "--objective", "dip-vae-ii", "--epochs", "3", "--batch-size", "64",
            "--eval-every", "10", "--seed", "5",
        ]
        .iter()
        .map(|a| a.to_string())
        .collect();
        v.extend(extra.iter().map(|a| a.to_string()));
        v
    };
    let go = |args: Vec<String>| run(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let ok = go(common(&["--out", &s(&p("a.csv")), "--checkpoint", &s(&p("a.ckpt"))]))
        && go(common(&["--out", &s(&p("b.csv")), "--checkpoint", &s(&p("b.ckpt"))]))
        && go(common(&["--out", &s(&p("c.csv")), "--checkpoint", &s(&p("c.ckpt")), "--stop-after", "17"]))
        && go(common(&["--out", &s(&p("c.csv")), "--checkpoint", &s(&p("c.ckpt")), "--resume", &s(&p("c.ckpt"))]));
    if !ok {
        return outcome(false, "a train invocation failed".into());
    }
    let read = |name: &str| std::fs::read(p(name)).unwrap();
    let rerun = read("a.csv") == read("b.csv") && read("a.ckpt") == read("b.ckpt");
    let resumed = read("a.csv") == read("c.csv") && read("a.ckpt") == read("c.ckpt");
    let rows = String::from_utf8(read("a.csv")).unwrap().lines().count() - 1;
    outcome(
        rerun && resumed,
        format!("rerun identical: {rerun}, resume at step 17 identical: {resumed} ({rows} record rows)"),
    )
}

struct TrainedRun {
    label: String,
    params: ModelParams,
    report: EvalReport,
}

fn run(ds: &Dataset, label: &str, objective: ObjectiveConfig, seed: u64) -> TrainedRun {
    let cfg = TrainConfig {
        objective,
        seed,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = train(&cfg, ds).unwrap();
    let report = evaluate(&out.params, ds, &cfg.zdiff, seed).unwrap();
    println!(
        "    trained {label} seed {seed}: sap {:.4} zdiff {:.1} recon {:.5} offdiag {:.3} ({:.0}s)",
        report.sap,
        report.zdiff,
        report.recon_error,
        report.offdiag_norm,
        start.elapsed().as_secs_f64()
    );
    TrainedRun {
        label: format!("{label}/seed{seed}"),
        params: out.params,
        report,
    }
}

struct TrainedSet {
    vae: Vec<TrainedRun>,
    dip_ii: Vec<TrainedRun>,
    dip_i: Vec<TrainedRun>,
    beta4: Vec<TrainedRun>,
    beta16: Vec<TrainedRun>,
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn metric(runs: &[TrainedRun], f: impl Fn(&EvalReport) -> f64) -> f64 {
    median(runs.iter().map(|r| f(&r.report)).collect())
}

fn disentanglement_trend(t: &TrainedSet) -> Outcome {
    let (sap_v, sap_d) = (metric(&t.vae, |r| r.sap), metric(&t.dip_ii, |r| r.sap));
    let (rec_v, rec_d) = (metric(&t.vae, |r| r.recon_error), metric(&t.dip_ii, |r| r.recon_error));
    outcome(
        sap_d - sap_v >= 0.03 && rec_d <= 1.5 * rec_v,
        format!(
            "median SAP DIP-VAE-II {sap_d:.4} vs VAE {sap_v:.4} (Δ {:.4} ≥ 0.03); \
             median recon {rec_d:.5} vs {rec_v:.5} (ratio {:.2} ≤ 1.5)",
            sap_d - sap_v,
            rec_d / rec_v
        ),
    )
}

fn beta_tension(t: &TrainedSet) -> Outcome {
    // β = 1 is the plain VAE objective; its runs are shared.
    let r1 = metric(&t.vae, |r| r.recon_error);
    let r4 = metric(&t.beta4, |r| r.recon_error);
    let r16 = metric(&t.beta16, |r| r.recon_error);
    outcome(
        r1 <= r4 && r4 <= r16,
        format!("median recon β=1 {r1:.5}, β=4 {r4:.5}, β=16 {r16:.5}"),
    )
}

fn regularizer_effect(t: &TrainedSet) -> Outcome {
    let v = metric(&t.vae, |r| r.offdiag_norm);
    let d = metric(&t.dip_i, |r| r.offdiag_norm);
    outcome(
        d <= 0.5 * v,
        format!("median off-diagonal norm DIP-VAE-I {d:.4} vs VAE {v:.4} (ratio {:.3} ≤ 0.5)", d / v),
    )
}

fn kl_bound(t: &TrainedSet, ds: &Dataset) -> Outcome {
    let picks = t.vae.iter().take(2).chain(t.dip_ii.iter().take(2)).chain(t.dip_i.iter().take(1));
    let batch = ds.batch(&ds.test);
    let mut worst = f64::NEG_INFINITY;
    let mut lines = Vec::new();
    for r in picks {
        let post: GaussianPosterior = r.params.encode_values(&batch.pixels).unwrap();
        let rep = kl_bound_check(&post, 2000, 9).unwrap();
        worst = worst.max(rep.aggregate_kl - rep.mean_posterior_kl);
        lines.push(format!("{} {:.2}≤{:.2}", r.label, rep.aggregate_kl, rep.mean_posterior_kl));
    }
    outcome(
        worst <= 0.1,
        format!("max(left − right) {worst:.3} ≤ 0.1 [{}]", lines.join(", ")),
    )
}

fn report(number: usize, name: &str, f: impl FnOnce() -> Outcome, failures: &mut usize) {
    let start = Instant::now();
    let o = f();
    if !o.passed {
        *failures += 1;
    }
    println!(
        "criterion {number} {name}: {} ({:.1}s) {}",
        if o.passed { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64(),
        o.detail
    );
}

fn main() -> ExitCode {
    let mut failures = 0;
    report(1, "gradient correctness", gradient_correctness, &mut failures);
    report(2, "KL oracle", kl_oracle, &mut failures);
    report(3, "aggregate covariance identity", covariance_identity, &mut failures);
    report(4, "metric oracles", metric_oracles, &mut failures);
    report(8, "determinism", determinism, &mut failures);

    let start = Instant::now();
    let ds = generate_dataset(&FactorGrid::default(), 0).unwrap();
    let runs = |label: &str, objective: ObjectiveConfig| -> Vec<TrainedRun> {
        SEEDS.iter().map(|&s| run(&ds, label, objective, s)).collect()
    };
    let trained = TrainedSet {
        vae: runs("vae", ObjectiveConfig::vae()),
        dip_ii: runs("dip-vae-ii", ObjectiveConfig::dip_vae_ii(10.0, 10.0, 0.0)),
        dip_i: runs("dip-vae-i", ObjectiveConfig::dip_vae_i(10.0, 100.0)),
        beta4: runs("beta-vae(4)", ObjectiveConfig::beta_vae(4.0)),
        beta16: runs("beta-vae(16)", ObjectiveConfig::beta_vae(16.0)),
    };
    println!("    training took {:.0}s", start.elapsed().as_secs_f64());

    report(5, "disentanglement trend", || disentanglement_trend(&trained), &mut failures);
    report(6, "β-VAE tension trend", || beta_tension(&trained), &mut failures);
    report(7, "regularizer effect", || regularizer_effect(&trained), &mut failures);
    report(9, "KL bound diagnostic", || kl_bound(&trained, &ds), &mut failures);

    println!("acceptance: {} of 9 criteria passed", 9 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
