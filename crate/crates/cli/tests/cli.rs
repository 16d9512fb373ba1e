//! End-to-end tests driving `run` in-process: artifact formats, exit codes,
//! determinism, and the seed override. Tests that read the environment take
//! the write lock; everyone else shares reads so MAGICFLOW_SEED can never
//! leak into an unrelated run.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use magicflow_core::datagen::{gen_phantom_dataset, gen_toy2d, save_dataset, ClassProfile, ToyKind};
use magicflow_core::model::load_checkpoint;
use magicflow_core::tensor::read_ten;
use magicflow_core::Rng;

static ENV_GUARD: RwLock<()> = RwLock::new(());

fn run(args: &[&str]) -> i32 {
    magicflow_cli::run(args.iter().copied())
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

/// Two-class 2-D Gaussians, four coupling steps: trains in well under a second.
fn toy_cfg(out_dir: &Path, seed: u64, epochs: usize) -> String {
    format!(
        r#"
seed = {seed}
out_dir = "{}"

[model]
toy_steps = 4

[dataset]
kind = "conditional-gaussians"
classes = 2
n_per_class = 16
separation = 4.0

[train]
epochs = {epochs}
batch_size = 16
learning_rate = 0.005
"#,
        out_dir.display()
    )
}

fn train_toy(dir: &Path, sub: &str, seed: u64, epochs: usize) -> PathBuf {
    let out = dir.join(sub);
    let cfg = write_cfg(dir, &format!("{sub}.toml"), &toy_cfg(&out, seed, epochs));
    assert_eq!(run(&["magicflow", "train", cfg.to_str().unwrap()]), 0);
    out.join("model.ckpt")
}

fn trio() -> Vec<ClassProfile> {
    vec![
        ClassProfile::new(0, 0.02, 0.0, 0.0),
        ClassProfile::new(1, 0.08, 0.0, 0.0),
        ClassProfile::new(2, 0.02, 1.5, 0.0),
    ]
}

fn phantom_dir(dir: &Path, seed: u64, side: usize) -> PathBuf {
    let ds = gen_phantom_dataset(&trio(), 8, side, side, &Rng::new(seed)).unwrap();
    let out = dir.join(format!("ds_{seed}_{side}"));
    save_dataset(&ds, &out).unwrap();
    out
}

fn parse_metrics(text: &str) -> Vec<(String, f64, Option<(f64, f64)>)> {
    text.lines()
        .map(|line| {
            let (name, rest) = line.split_once('=').unwrap();
            match rest.split_once(" ci95=") {
                None => (name.to_string(), rest.parse().unwrap(), None),
                Some((v, ci)) => {
                    let (lo, hi) = ci.split_once(',').unwrap();
                    (
                        name.to_string(),
                        v.parse().unwrap(),
                        Some((lo.parse().unwrap(), hi.parse().unwrap())),
                    )
                }
            }
        })
        .collect()
}

#[test]
fn help_and_version_exit_zero() {
    let _g = ENV_GUARD.read().unwrap();
    assert_eq!(run(&["magicflow", "--help"]), 0);
    assert_eq!(run(&["magicflow", "--version"]), 0);
    assert_eq!(run(&["magicflow", "sample", "--help"]), 0);
}

#[test]
fn unknown_subcommand_exits_two() {
    let _g = ENV_GUARD.read().unwrap();
    assert_eq!(run(&["magicflow", "frobnicate"]), 2);
    assert_eq!(run(&["magicflow"]), 2);
}

#[test]
fn train_toy_writes_checkpoint_and_metrics() {
    let _g = ENV_GUARD.read().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_cfg(tmp.path(), "cfg.toml", &toy_cfg(&out, 0, 3));
    assert_eq!(run(&["magicflow", "train", cfg.to_str().unwrap()]), 0);

    let ckpt = fs::read(out.join("model.ckpt")).unwrap();
    assert_eq!(&ckpt[..4], b"MGFC", "checkpoint magic");

    let metrics = fs::read_to_string(out.join("train_metrics.txt")).unwrap();
    let mut nlls = Vec::new();
    for (i, line) in metrics.lines().enumerate() {
        let mut parts = line.split(' ');
        let epoch = parts.next().unwrap().strip_prefix("epoch=").unwrap();
        let nll = parts.next().unwrap().strip_prefix("nll=").unwrap();
        assert!(parts.next().is_none(), "exactly two fields per line");
        assert_eq!(epoch.parse::<usize>().unwrap(), i);
        nlls.push(nll.parse::<f64>().unwrap());
    }
    assert_eq!(nlls.len(), 3);
    assert!(
        nlls.last().unwrap() < &nlls[0],
        "training should reduce nll: {nlls:?}"
    );
}

#[test]
fn train_twice_is_byte_identical() {
    let _g = ENV_GUARD.read().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let a = train_toy(tmp.path(), "a", 3, 2);
    let b = train_toy(tmp.path(), "b", 3, 2);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "checkpoints");
    assert_eq!(
        fs::read(tmp.path().join("a/train_metrics.txt")).unwrap(),
        fs::read(tmp.path().join("b/train_metrics.txt")).unwrap(),
        "metrics lines"
    );
}

#[test]
fn sample_same_seed_bitwise_identical() {
    let _g = ENV_GUARD.read().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = train_toy(tmp.path(), "m", 0, 2);
    let ckpt = ckpt.to_str().unwrap();
    for sub in ["s1", "s2"] {
        let out = tmp.path().join(sub);
        assert_eq!(
            run(&[
                "magicflow", "sample", "--checkpoint", ckpt, "--label", "1", "--n", "2",
                "--seed", "7", "--out-dir", out.to_str().unwrap(),
            ]),
            0
        );
    }
    for name in ["sample_label1_000", "sample_label1_001"] {
        for ext in ["pgm", "ten", "scale.txt"] {
            let f1 = fs::read(tmp.path().join(format!("s1/{name}.{ext}"))).unwrap();
            let f2 = fs::read(tmp.path().join(format!("s2/{name}.{ext}"))).unwrap();
            assert_eq!(f1, f2, "{name}.{ext} must be bitwise stable");
        }
    }
    // (2,1,1) samples render channel-stacked: 1 column, 2 rows, 2 payload bytes.
    let pgm = fs::read(tmp.path().join("s1/sample_label1_000.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n1 2\n255\n"));
    assert_eq!(pgm.len(), b"P5\n1 2\n255\n".len() + 2);

    let out3 = tmp.path().join("s3");
    assert_eq!(
        run(&[
            "magicflow", "sample", "--checkpoint", ckpt, "--label", "1", "--n", "1",
            "--seed", "8", "--out-dir", out3.to_str().unwrap(),
        ]),
        0
    );
    assert_ne!(
        fs::read(tmp.path().join("s1/sample_label1_000.ten")).unwrap(),
        fs::read(tmp.path().join("s3/sample_label1_000.ten")).unwrap(),
        "a different seed draws a different sample"
    );
}

#[test]
fn classify_lines_match_model_loglikelihoods() {
    let _g = ENV_GUARD.read().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let ckpt_path = train_toy(tmp.path(), "m", 1, 2);
    let ckpt = ckpt_path.to_str().unwrap();
    let sdir = tmp.path().join("s");
    assert_eq!(
        run(&[
            "magicflow", "sample", "--checkpoint", ckpt, "--n", "2", "--seed", "5",
            "--out-dir", sdir.to_str().unwrap(),
        ]),
        0
    );
    let imgs = [
        sdir.join("sample_label0_000.ten"),
        sdir.join("sample_label0_001.ten"),
    ];
    let out = tmp.path().join("results.csv");
    assert_eq!(
        run(&[
            "magicflow", "classify", "--checkpoint", ckpt, "--out", out.to_str().unwrap(),
            imgs[0].to_str().unwrap(), imgs[1].to_str().unwrap(),
        ]),
        0
    );

    let model = load_checkpoint(&ckpt_path).unwrap();
    let mut expected = String::new();
    for img in &imgs {
        let x = read_ten(img).unwrap();
        let c = model.classify(&x).unwrap();
        expected.push_str(&format!("{},{}", img.display(), c.argmax));
        for s in &c.scores {
            expected.push_str(&format!(",{s}"));
        }
        expected.push('\n');
    }
    assert_eq!(fs::read_to_string(&out).unwrap(), expected, "CSV format is pinned");
}

#[test]
fn classify_single_class_always_argmax_zero() {
    let _g = ENV_GUARD.read().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_cfg(
        tmp.path(),
        "k1.toml",
        &format!(
            r#"
out_dir = "{}"

[model]
toy_steps = 4

[dataset]
kind = "conditional-gaussians"
classes = 1
n_per_class = 16

[train]
epochs = 1
batch_size = 16
"#,
            out.display()
        ),
    );
    assert_eq!(run(&["magicflow", "train", cfg.to_str().unwrap()]), 0);
    let ckpt = out.join("model.ckpt");
    let sdir = tmp.path().join("s");
    assert_eq!(
        run(&[
            "magicflow", "sample", "--checkpoint", ckpt.to_str().unwrap(), "--n", "3",
            "--out-dir", sdir.to_str().unwrap(),
        ]),
        0
    );
    let csv = tmp.path().join("res.csv");
    let imgs: Vec<String> = (0..3)
        .map(|i| sdir.join(format!("sample_label0_{i:03}.ten")).to_str().unwrap().into())
        .collect();
    let mut args = vec![
        "magicflow", "classify", "--checkpoint", ckpt.to_str().unwrap(),
        "--out", csv.to_str().unwrap(),
    ];
    args.extend(imgs.iter().map(|s| s.as_str()));
    assert_eq!(run(&args), 0);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3);
    for line in text.lines() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 3, "path, argmax, one loglik: {line}");
        assert_eq!(fields[1], "0");
    }
}

#[test]
fn attribute_writes_triplet_conserving_loglik() {
    let _g = ENV_GUARD.read().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let ckpt_path = train_toy(tmp.path(), "m", 2, 2);
    let ckpt = ckpt_path.to_str().unwrap();
    let sdir = tmp.path().join("s");
    assert_eq!(
        run(&[
            "magicflow", "sample", "--checkpoint", ckpt, "--label", "1",
            "--out-dir", sdir.to_str().unwrap(),
        ]),
        0
    );
    let img = sdir.join("sample_label1_000.ten");
    let adir = tmp.path().join("attr");
    assert_eq!(
        run(&[
            "magicflow", "attribute", "--checkpoint", ckpt, "--label", "1",
            "--out-dir", adir.to_str().unwrap(), img.to_str().unwrap(),
        ]),
        0
    );
    for ext in ["ten", "pgm", "scale.txt"] {
        assert!(
            adir.join(format!("sample_label1_000.attr.{ext}")).exists(),
            "missing .{ext}"
        );
    }
    let map = read_ten(&adir.join("sample_label1_000.attr.ten")).unwrap();
    let x = read_ten(&img).unwrap();
    assert_eq!(map.shape(), x.shape());
    let model = load_checkpoint(&ckpt_path).unwrap();
    let ll = model.log_likelihood(&x, 1).unwrap();
    let total: f64 = map.data().iter().sum();
    assert!(
        (total - ll).abs() < 1e-8,
        "attribution sums to the log-likelihood: {total} vs {ll}"
    );
}

#[test]
fn train_on_saved_dir_dataset() {
    let _g = ENV_GUARD.read().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let ds = gen_toy2d(ToyKind::ConditionalGaussians, 2, 12, 4.0, &Rng::new(9)).unwrap();
    let ddir = tmp.path().join("data");
    save_dataset(&ds, &ddir).unwrap();
    let out = tmp.path().join("run");
    let cfg = write_cfg(
        tmp.path(),
        "dir.toml",
        &format!(
            r#"
out_dir = "{}"

[model]
toy_steps = 4

[dataset]
kind = "dir"
path = "{}"

[train]
epochs = 1
batch_size = 8
"#,
            out.display(),
            ddir.display()
        ),
    );
    assert_eq!(run(&["magicflow", "train", cfg.to_str().unwrap()]), 0);
    assert!(out.join("model.ckpt").exists());
}

#[test]
fn reduced_schedule_trains_on_small_images() {
    let _g = ENV_GUARD.read().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    // 6x6 is even but not a multiple of 8: auto must pick the reduced schedule.
    let cfg = write_cfg(
        tmp.path(),
        "small.toml",
        &format!(
            r#"
out_dir = "{}"

[dataset]
kind = "phantom"
n_per_class = 4
height = 6
width = 6

[[dataset.profiles]]
noise_std = 0.05

[train]
epochs = 1
batch_size = 4
"#,
            out.display()
        ),
    );
    assert_eq!(run(&["magicflow", "train", cfg.to_str().unwrap()]), 0);
    let model = load_checkpoint(&out.join("model.ckpt")).unwrap();
    assert_eq!(model.config.in_shape, (1, 6, 6));
    assert_eq!(model.config.num_classes, 1);
}

#[test]
fn evaluate_identical_sets_sit_at_the_floor() {
    let _g = ENV_GUARD.read().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let real = phantom_dir(tmp.path(), 11, 16);
    let out = tmp.path().join("metrics.txt");
    assert_eq!(
        run(&[
            "magicflow", "evaluate", "--real", real.to_str().unwrap(),
            "--fake", real.to_str().unwrap(), "--embedding", "proj:8", "--k", "3",
            "--pairs", "20", "--out", out.to_str().unwrap(),
        ]),
        0
    );
    let entries = parse_metrics(&fs::read_to_string(&out).unwrap());
    let names: Vec<&str> = entries.iter().map(|(n, _, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            "fid", "kid", "precision", "recall", "density", "coverage",
            "msssim_intra", "msssim_intra_std", "msssim_inter", "msssim_inter_std",
        ]
    );
    let get = |k: &str| entries.iter().find(|(n, _, _)| n == k).unwrap().1;
    assert!(get("fid").abs() < 1e-8, "fid of a set against itself");
    assert!(get("kid").abs() < 1e-4, "kid of a set against itself");
    assert_eq!(get("precision"), 1.0);
    assert_eq!(get("recall"), 1.0);
    assert_eq!(get("density"), 1.0);
    assert_eq!(get("coverage"), 1.0);
    for (name, v, _) in &entries {
        assert!(v.is_finite(), "{name} must be finite");
    }

    let json = fs::read_to_string(tmp.path().join("metrics.json")).unwrap();
    assert!(json.contains("\"embedding\""));
    assert!(json.contains("\"fid\""));
    assert!(json.contains("\"real_count\":24"));
}

#[test]
fn evaluate_bootstrap_brackets_the_point() {
    let _g = ENV_GUARD.read().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let real = phantom_dir(tmp.path(), 11, 16);
    let fake = phantom_dir(tmp.path(), 22, 16);
    let out = tmp.path().join("metrics.txt");
    assert_eq!(
        run(&[
            "magicflow", "evaluate", "--real", real.to_str().unwrap(),
            "--fake", fake.to_str().unwrap(), "--embedding", "proj:8", "--k", "3",
            "--pairs", "20", "--bootstrap", "60", "--seed", "4",
            "--out", out.to_str().unwrap(),
        ]),
        0
    );
    let entries = parse_metrics(&fs::read_to_string(&out).unwrap());
    for key in ["fid", "kid"] {
        let (_, v, ci) = entries.iter().find(|(n, _, _)| n == key).unwrap();
        let (lo, hi) = ci.unwrap_or_else(|| panic!("{key} should carry an interval"));
        assert!(lo <= *v && *v <= hi, "{key}: {lo} <= {v} <= {hi}");
        assert!(hi > lo, "{key}: interval has width");
    }
    for key in ["precision", "recall", "density", "coverage"] {
        let (_, _, ci) = entries.iter().find(|(n, _, _)| n == key).unwrap();
        assert!(ci.is_none(), "{key} is reported as a plain scalar");
    }
}

#[test]
fn evaluate_point_sets_skip_pair_similarity() {
    let _g = ENV_GUARD.read().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let ds = gen_toy2d(ToyKind::ConditionalGaussians, 3, 16, 4.0, &Rng::new(5)).unwrap();
    let ddir = tmp.path().join("pts");
    save_dataset(&ds, &ddir).unwrap();
    let out = tmp.path().join("m.txt");
    assert_eq!(
        run(&[
            "magicflow", "evaluate", "--real", ddir.to_str().unwrap(),
            "--fake", ddir.to_str().unwrap(), "--k", "3", "--out", out.to_str().unwrap(),
        ]),
        0
    );
    let entries = parse_metrics(&fs::read_to_string(&out).unwrap());
    let names: Vec<&str> = entries.iter().map(|(n, _, _)| n.as_str()).collect();
    assert_eq!(
        names,
        ["fid", "kid", "precision", "recall", "density", "coverage"],
        "no image-pair metrics for 2-D point data"
    );
}

#[test]
fn evaluate_shape_mismatch_exits_three() {
    let _g = ENV_GUARD.read().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let real = phantom_dir(tmp.path(), 1, 16);
    let fake = phantom_dir(tmp.path(), 1, 8);
    assert_eq!(
        run(&[
            "magicflow", "evaluate", "--real", real.to_str().unwrap(),
            "--fake", fake.to_str().unwrap(),
        ]),
        3
    );
}

#[test]
fn error_paths_map_to_documented_exit_codes() {
    let _g = ENV_GUARD.read().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // 5: unreadable config.
    assert_eq!(run(&["magicflow", "train", dir.join("no.toml").to_str().unwrap()]), 5);

    // 2: malformed TOML.
    let bad = write_cfg(dir, "bad.toml", "task = [1,2\n");
    assert_eq!(run(&["magicflow", "train", bad.to_str().unwrap()]), 2);

    // 2: unknown keys at several scopes.
    for body in [
        "sed = 3\n",
        "[train]\nepoch = 5\n",
        "[dataset]\nkind = \"conditional-gaussians\"\nheight = 16\n",
        "[[dataset.profiles]]\nnoise = 0.1\n",
    ] {
        let cfg = write_cfg(dir, "typo.toml", body);
        assert_eq!(run(&["magicflow", "train", cfg.to_str().unwrap()]), 2, "body: {body}");
    }

    // 2: out-of-range values caught at parse time.
    for body in [
        "seed = -1\n",
        "[train]\nepochs = 0\n",
        "[train]\nlearning_rate = \"fast\"\n",
        "[dataset]\nquantize_bits = 17\n",
        "[dataset]\nkind = \"conditional-gaussians\"\nquantize_bits = 8\n",
        "[dataset]\nkind = \"dir\"\n",
        "[model]\nkind = \"glow\"\n",
    ] {
        let cfg = write_cfg(dir, "range.toml", body);
        assert_eq!(run(&["magicflow", "train", cfg.to_str().unwrap()]), 2, "body: {body}");
    }

    // Train something tiny so checkpoint-dependent paths have a real file.
    let ckpt_path = train_toy(dir, "m", 0, 1);
    let ckpt = ckpt_path.to_str().unwrap();

    // 5: truncated checkpoint.
    let bytes = fs::read(&ckpt_path).unwrap();
    let trunc = dir.join("trunc.ckpt");
    fs::write(&trunc, &bytes[..100]).unwrap();
    assert_eq!(run(&["magicflow", "sample", "--checkpoint", trunc.to_str().unwrap()]), 5);

    // 3: label out of range (the model has 2 classes).
    assert_eq!(
        run(&[
            "magicflow", "sample", "--checkpoint", ckpt, "--label", "9",
            "--out-dir", dir.join("s").to_str().unwrap(),
        ]),
        3
    );

    // 3: non-positive temperature.
    assert_eq!(
        run(&[
            "magicflow", "sample", "--checkpoint", ckpt, "--temperature", "-0.5",
            "--out-dir", dir.join("s").to_str().unwrap(),
        ]),
        3
    );

    // 5: classify with a missing input image.
    assert_eq!(
        run(&[
            "magicflow", "classify", "--checkpoint", ckpt,
            "--out", dir.join("r.csv").to_str().unwrap(),
            dir.join("ghost.ten").to_str().unwrap(),
        ]),
        5
    );

    // 2: bad embedding spec; 3: too few bootstrap replicates.
    let real = phantom_dir(dir, 1, 16);
    assert_eq!(
        run(&[
            "magicflow", "evaluate", "--real", real.to_str().unwrap(),
            "--fake", real.to_str().unwrap(), "--embedding", "umap:2",
        ]),
        2
    );
    assert_eq!(
        run(&[
            "magicflow", "evaluate", "--real", real.to_str().unwrap(),
            "--fake", real.to_str().unwrap(), "--bootstrap", "10",
        ]),
        3
    );
}

#[test]
fn env_seed_overrides_config_and_flags() {
    let _g = ENV_GUARD.write().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // Train with seed 0 in the file but 5 in the environment...
    let out_env = dir.join("env");
    let cfg_env = write_cfg(dir, "env.toml", &toy_cfg(&out_env, 0, 2));
    std::env::set_var("MAGICFLOW_SEED", "5");
    let code = run(&["magicflow", "train", cfg_env.to_str().unwrap()]);
    std::env::remove_var("MAGICFLOW_SEED");
    assert_eq!(code, 0);

    // ...must equal training with seed 5 in the file.
    let plain = train_toy(dir, "plain", 5, 2);
    assert_eq!(
        fs::read(out_env.join("model.ckpt")).unwrap(),
        fs::read(&plain).unwrap(),
        "environment seed must behave exactly like a config seed"
    );

    // Same rule for sampling: env seed beats the flag.
    let ckpt = plain.to_str().unwrap();
    let s_env = dir.join("s_env");
    std::env::set_var("MAGICFLOW_SEED", "7");
    let code = run(&[
        "magicflow", "sample", "--checkpoint", ckpt, "--seed", "3",
        "--out-dir", s_env.to_str().unwrap(),
    ]);
    std::env::remove_var("MAGICFLOW_SEED");
    assert_eq!(code, 0);
    let s_flag = dir.join("s_flag");
    assert_eq!(
        run(&[
            "magicflow", "sample", "--checkpoint", ckpt, "--seed", "7",
            "--out-dir", s_flag.to_str().unwrap(),
        ]),
        0
    );
    assert_eq!(
        fs::read(s_env.join("sample_label0_000.ten")).unwrap(),
        fs::read(s_flag.join("sample_label0_000.ten")).unwrap()
    );
}

#[test]
fn config_defaults_cover_every_field() {
    let cfg = magicflow_cli::RunConfig::parse("").unwrap();
    assert_eq!(cfg.seed, 0);
    assert_eq!(cfg.out_dir, PathBuf::from("out"));
    assert_eq!(cfg.model.kind, magicflow_cli::ModelKind::Auto);
    assert_eq!(cfg.model.hidden, 8);
    assert_eq!(cfg.train.epochs, 10);
    assert_eq!(cfg.train.batch_size, 32);
    assert_eq!(cfg.dataset.quantize_bits, 8, "phantom data quantizes by default");
    match &cfg.dataset.source {
        magicflow_cli::DataSource::Phantom { profiles, n_per_class, height, width } => {
            assert_eq!(profiles.len(), 3, "default class trio");
            assert_eq!((*n_per_class, *height, *width), (64, 16, 16));
            assert_eq!(profiles[1].noise_std, 0.08);
            assert_eq!(profiles[2].blur_sigma, 1.5);
        }
        other => panic!("default dataset should be the phantom trio, got {other:?}"),
    }

    let toy = magicflow_cli::RunConfig::parse("[dataset]\nkind = \"two-moons-conditional\"\n")
        .unwrap();
    assert_eq!(toy.dataset.quantize_bits, 0, "point data never quantizes by default");
}
