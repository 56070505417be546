use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use dipvae::data::load_cache;
use dipvae::metrics::LatentCodes;
use dipvae::models::{init_params, Activation, MlpSpec, ModelParams};

fn dipvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dipvae"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = dipvae(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset plus a DIP-VAE-II checkpoint trained on it, shared by tests.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("small.cache");
        let ckpt = dir.path().join("dip2.ckpt");
        ok(&["gen-data", "--out", s(&data), "--canvas", "16", "--n-x", "6", "--n-y", "6"]);
        ok(&[
            "train", "--data", s(&data), "--objective", "dip-vae-ii", "--lambda-od", "10", "--lambda-d", "10",
            "--epochs", "20", "--batch-size", "64", "--checkpoint", s(&ckpt),
        ]);
        Fixture { _dir: dir, data, ckpt }
    })
}

#[test]
fn unknown_flag_rejected() {
    let out = dipvae(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn missing_checkpoint_is_one_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let data = dir.path().join("d.cache");
    ok(&["gen-data", "--out", s(&data), "--canvas", "8", "--n-x", "2", "--n-y", "2", "--n-rotation", "2"]);
    let out = dipvae(&["eval", "--checkpoint", s(&missing), "--data", s(&data), "--out", s(&dir.path().join("e.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("nope.ckpt"), "{err}");
    assert!(!dir.path().join("e.csv").exists());
}

#[test]
fn invalid_config_fails_before_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("r.csv");
    let out = dipvae(&["train", "--objective", "beta-vae", "--beta", "0.5", "--out", s(&rec)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!rec.exists());
}

#[test]
fn eval_is_idempotent() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for out in [&a, &b] {
        ok(&["eval", "--checkpoint", s(&f.ckpt), "--data", s(&f.data), "--seed", "3", "--out", s(out)]);
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("sap,zdiff,recon_error,offdiag_norm,active_dims"));
    assert_eq!(lines.count(), 1);
}

#[test]
fn export_latents_matches_test_split() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("codes.csv");
    ok(&["export-latents", "--checkpoint", s(&f.ckpt), "--data", s(&f.data), "--out", s(&out)]);
    let text = std::fs::read_to_string(&out).unwrap();
    let header = text.lines().next().unwrap();
    let want: Vec<String> = (0..10)
        .map(|i| format!("latent_{i}"))
        .chain((0..5).map(|j| format!("factor_{j}")))
        .collect();
    assert_eq!(header, want.join(","));
    let ds = load_cache(&f.data).unwrap();
    assert_eq!(text.lines().count() - 1, ds.test.len());
    let codes = LatentCodes::read_csv(&out).unwrap();
    let model = ModelParams::load(&f.ckpt).unwrap();
    assert_eq!(codes, LatentCodes::from_model(&model, &ds).unwrap());
}

#[test]
fn export_latents_rejects_empty_test_split() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("tiny.cache");
    let ckpt = dir.path().join("m.ckpt");
    ok(&[
        "gen-data", "--out", s(&data), "--canvas", "8", "--n-x", "1", "--n-y", "1", "--n-scale", "1", "--n-rotation", "1",
    ]);
    assert!(load_cache(&data).unwrap().test.is_empty());
    let spec = MlpSpec::new(vec![64, 8], 2, Activation::Tanh, 0).unwrap();
    init_params(&spec).unwrap().save(&ckpt).unwrap();
    let out = dipvae(&["export-latents", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&dir.path().join("c.csv"))]);
    assert_eq!(out.status.code(), Some(1));
}

fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = std::fs::read(path).unwrap();
    let text_end = bytes
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'\n')
        .nth(2)
        .unwrap()
        .0;
    let header = std::str::from_utf8(&bytes[..text_end]).unwrap();
    let mut parts = header.split_whitespace();
    assert_eq!(parts.next(), Some("P5"));
    let w: usize = parts.next().unwrap().parse().unwrap();
    let h: usize = parts.next().unwrap().parse().unwrap();
    assert_eq!(parts.next(), Some("255"));
    (w, h, bytes[text_end + 1..].to_vec())
}

#[test]
fn traverse_strip_dimensions() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one.pgm");
    ok(&["traverse", "--checkpoint", s(&f.ckpt), "--data", s(&f.data), "--example", "5", "--latent", "2", "--out", s(&one)]);
    let (w, h, px) = read_pgm(&one);
    assert_eq!((w, h), (11 * 16, 16));
    assert_eq!(px.len(), w * h);

    let all = dir.path().join("all.pgm");
    ok(&["traverse", "--checkpoint", s(&f.ckpt), "--data", s(&f.data), "--steps", "5", "--out", s(&all)]);
    assert_eq!(read_pgm(&all).0, 5 * 16);
    assert_eq!(read_pgm(&all).1, 10 * 16);

    let out = dipvae(&["traverse", "--checkpoint", s(&f.ckpt), "--data", s(&f.data), "--latent", "10", "--out", s(&one)]);
    assert_eq!(out.status.code(), Some(1));
}

/// Largest per-pixel range across an 11-step ±3 sweep of `latent`, over the
/// first few test examples.
fn traversal_deviation(model: &ModelParams, ds: &dipvae::data::Dataset, latent: usize) -> f64 {
    let c = ds.grid.canvas;
    let mut worst = 0.0f64;
    for &ex in ds.test.iter().take(5) {
        let image: Vec<f64> = ds.image(ex).iter().map(|&b| b as f64).collect();
        let strip = dipvae::traverse::traverse(model, &image, c, Some(latent), 3.0, 11).unwrap();
        for r in 0..c {
            for col in 0..c {
                let vals = (0..11).map(|step| strip.pixels[r * strip.width + step * c + col]);
                let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                worst = worst.max(hi - lo);
            }
        }
    }
    worst
}

/// Variance of each latent's posterior mean over the test split.
fn latent_variances(model: &ModelParams, ds: &dipvae::data::Dataset) -> Vec<f64> {
    let codes = LatentCodes::from_model(model, ds).unwrap();
    (0..codes.latent_dim())
        .map(|j| {
            let c = codes.column(j);
            let m = c.iter().sum::<f64>() / c.len() as f64;
            c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c.len() as f64
        })
        .collect()
}

#[test]
fn inactive_latents_move_output_less_than_active_ones() {
    let f = fixture();
    let ds = load_cache(&f.data).unwrap();
    let model = ModelParams::load(&f.ckpt).unwrap();
    let variances = latent_variances(&model, &ds);
    let (inactive, active): (Vec<usize>, Vec<usize>) = (0..variances.len()).partition(|&j| variances[j] < 0.02);
    assert!(!inactive.is_empty() && !active.is_empty(), "variances {variances:?}");
    let quiet = inactive.iter().map(|&j| traversal_deviation(&model, &ds, j)).fold(0.0, f64::max);
    let loud = active.iter().map(|&j| traversal_deviation(&model, &ds, j)).fold(f64::INFINITY, f64::min);
    assert!(quiet < loud, "inactive max {quiet:.3} vs active min {loud:.3}");
}

#[test]
#[ignore = "fails at desk scale: the MLP decoder keeps nonzero weights on inactive latents, pixel range 0.2-0.6 after 20-150 epochs"]
fn inactive_latent_traversal_is_flat() {
    let f = fixture();
    let ds = load_cache(&f.data).unwrap();
    let model = ModelParams::load(&f.ckpt).unwrap();
    let variances = latent_variances(&model, &ds);
    let (quiet, var) = variances
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    assert!(var < 0.02, "no inactive latent: variances {variances:?}");
    let worst = traversal_deviation(&model, &ds, quiet);
    assert!(worst < 0.05, "latent {quiet} (variance {var:.2e}) changes pixels by {worst:.3}");
}

#[test]
fn train_writes_records_and_resumes() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let base = [
        "train", "--data", s(&f.data), "--epochs", "2", "--batch-size", "128", "--eval-every", "8", "--latent-dim", "4",
    ];
    let run = |extra: &[&str]| ok(&[&base[..], extra].concat());
    run(&["--out", s(&p("a.csv")), "--checkpoint", s(&p("a.ckpt"))]);
    run(&["--out", s(&p("b.csv")), "--checkpoint", s(&p("b.ckpt")), "--stop-after", "11"]);
    let stopped = String::from_utf8(
        run(&["--out", s(&p("b.csv")), "--checkpoint", s(&p("b.ckpt")), "--resume", s(&p("b.ckpt"))]).stdout,
    )
    .unwrap();
    assert!(stopped.starts_with("step 48"), "{stopped}");
    let a = std::fs::read_to_string(p("a.csv")).unwrap();
    assert_eq!(a, std::fs::read_to_string(p("b.csv")).unwrap());
    assert!(a.starts_with("step,total,nll,kl,dip_penalty,moment3_penalty,sap,zdiff,recon_error,offdiag_norm\n"));
    let steps: Vec<usize> = a.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, vec![8, 16, 24, 32, 40, 48]);

    let out = dipvae(&[&base[..], &["--objective", "dip-vae-i", "--resume", s(&p("b.ckpt"))]].concat());
    assert_eq!(out.status.code(), Some(1), "objective change must be rejected on resume");
}

#[test]
fn config_file_and_flags_combine() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "objective = \"beta-vae\"\nbeta = 4.0\nepochs = 1\nbatch_size = 256\nlatent_dim = 3\n").unwrap();
    let rec = dir.path().join("r.csv");
    ok(&["train", "--config", s(&cfg), "--data", s(&f.data), "--epochs", "2", "--out", s(&rec)]);
    let last = std::fs::read_to_string(&rec).unwrap();
    let step: usize = last.lines().last().unwrap().split(',').next().unwrap().parse().unwrap();
    let ds = load_cache(&f.data).unwrap();
    assert_eq!(step, 2 * (ds.train.len() / 256));

    std::fs::write(&cfg, "objective = \"beta-vae\"\nbogus = 1\n").unwrap();
    let out = dipvae(&["train", "--config", s(&cfg), "--data", s(&f.data)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    ok(&[
        "sweep", "--data", s(&f.data), "--objective", "beta-vae", "--values", "1,4,16", "--epochs", "1",
        "--batch-size", "256", "--latent-dim", "3", "--out", s(&out),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with("value,seed,sap,zdiff,recon_error,offdiag_norm,active_dims,error\n"));
}
