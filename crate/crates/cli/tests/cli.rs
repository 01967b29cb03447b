//! End-to-end tests driving the compiled `dgz` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use dgz_core::config::RunConfig;
use dgz_core::data::{self, SynthesisConfig};
use dgz_core::tensor::Tensor;
use dgz_core::trainer::Trainer;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgz"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A 16-px corpus plus a config file sized for sub-second training runs.
/// Returns the config path; the manifest inside is relative to the file.
fn tiny_setup(dir: &Path, count: usize) -> PathBuf {
    let data_dir = dir.join("data");
    let out = run(&[
        "synthesize-dataset",
        "--out",
        data_dir.to_str().unwrap(),
        "--count",
        &count.to_string(),
        "--size",
        "16",
        "--seed",
        "7",
    ]);
    assert_code(&out, 0);
    let cfg_path = data_dir.join("tiny.txt");
    fs::write(
        &cfg_path,
        "manifest=manifest.tsv\n\
         image_size=16\n\
         gen_base_width=2\n\
         gen_res_blocks=1\n\
         disc_layers=2\n\
         disc_base_width=2\n\
         cascade_widths=2,2\n\
         epochs=1\n\
         holdout=2\n\
         jitter_enlarged=0\n\
         checkpoint_every=1\n\
         seed=7\n",
    )
    .unwrap();
    cfg_path
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                files.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn synthesize_zero_count_writes_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("d");
    let out = run(&["synthesize-dataset", "--out", out_dir.to_str().unwrap(), "--count", "0"]);
    assert_code(&out, 0);
    let manifest = fs::read_to_string(out_dir.join("manifest.tsv")).unwrap();
    assert!(manifest.is_empty());
    assert!(out_dir.join("classes.tsv").exists());
    assert!(out_dir.join("resolved_config.txt").exists());
}

#[test]
fn synthesize_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = run(&[
            "synthesize-dataset",
            "--out",
            d.to_str().unwrap(),
            "--count",
            "4",
            "--size",
            "16",
            "--seed",
            "11",
        ]);
        assert_code(&out, 0);
    }
    assert_eq!(read_tree(&a), read_tree(&b));
}

#[test]
fn synthesize_200_scenes_at_64px_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let out = run(&[
        "synthesize-dataset",
        "--out",
        dir.path().join("d").to_str().unwrap(),
        "--count",
        "200",
        "--size",
        "64",
    ]);
    assert_code(&out, 0);
    assert!(t0.elapsed().as_secs() < 60, "took {:?}", t0.elapsed());
    assert_eq!(
        fs::read_to_string(dir.path().join("d/manifest.tsv")).unwrap().lines().count(),
        200
    );
}

#[test]
fn train_epochs_zero_writes_init_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path(), 3);
    let out_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--epochs",
        "0",
    ]);
    assert_code(&out, 0);
    assert!(out_dir.join("checkpoint_latest.dgz").exists());
    let log = fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1, "header only: {log:?}");
    assert!(out_dir.join("resolved_config.txt").exists());
}

#[test]
fn resume_on_fresh_dir_reports_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path(), 3);
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("fresh").to_str().unwrap(),
        "--resume",
    ]);
    assert_code(&out, 1);
    assert!(stderr(&out).contains("no checkpoint"), "{}", stderr(&out));
}

#[test]
fn resume_continues_but_rejects_structural_changes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path(), 4);
    let out_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);

    let resumed = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--resume",
        "--epochs",
        "2",
    ]);
    assert_code(&resumed, 0);

    let mismatched = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--resume",
        "--set",
        "gen_base_width=4",
    ]);
    assert_code(&mismatched, 1);
    assert!(stderr(&mismatched).contains("disagrees"), "{}", stderr(&mismatched));
}

#[test]
fn infer_matches_layout_dims_and_sigma_semantics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path(), 3);
    let out_dir = dir.path().join("run");
    assert_code(
        &run(&["train", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]),
        0,
    );
    let ck = out_dir.join("checkpoint_final.dgz");
    let layout = dir.path().join("data/layouts/scene_0000.pgm");

    let render = |name: &str, sigma: &str, seed: &str| -> Vec<u8> {
        let p = dir.path().join(name);
        let out = run(&[
            "infer",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--layout",
            layout.to_str().unwrap(),
            "--out",
            p.to_str().unwrap(),
            "--sigma",
            sigma,
            "--seed",
            seed,
        ]);
        assert_code(&out, 0);
        fs::read(&p).unwrap()
    };

    let a = render("a.ppm", "0", "0");
    let b = render("b.ppm", "0", "5");
    assert_eq!(a, b, "sigma=0 must render identically regardless of seed");
    let header = String::from_utf8_lossy(&a[..15]).into_owned();
    assert!(header.starts_with("P6") && header.contains("16 16"), "{header:?}");

    let c = render("c.ppm", "0.1", "1");
    let d = render("d.ppm", "0.1", "2");
    assert_ne!(c, d, "sigma>0 with different seeds must differ");
}

/// Largest positive f32 whose tanh equals `t` bit-exactly, if any exists.
fn exact_tanh_preimage(t: f32) -> Option<f32> {
    let (mut lo, mut hi) = (0f32.to_bits(), 5f32.to_bits());
    while lo + 1 < hi {
        let mid = lo + (hi - lo) / 2;
        if f32::from_bits(mid).tanh() < t {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let cand = f32::from_bits(hi);
    (cand.tanh() == t).then_some(cand)
}

#[test]
fn evaluate_identical_pair_prints_perfect_scores() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let entries = data::synthesize_dataset(
        &data_dir,
        &SynthesisConfig { count: 2, size: 16, master_seed: 3, ..Default::default() },
    )
    .unwrap();

    // A target byte value whose [-1, 1] encoding has an exact f32 tanh
    // preimage; a generator with zeroed weights and that preimage as its
    // head bias reproduces the constant target bit-exactly.
    let (value, bias) = (1u8..255)
        .filter_map(|k| {
            let t = data::image_to_unit(k);
            (t > 0.0).then(|| exact_tanh_preimage(t).map(|b| (k, b)))?
        })
        .next()
        .expect("some byte value has an exact preimage");
    let flat = Tensor::full(&[3, 16, 16], data::image_to_unit(value));
    for e in &entries {
        data::write_ppm(&e.target_path, &flat).unwrap();
    }

    let mut cfg = RunConfig::default();
    cfg.image_size = 16;
    cfg.gen_base_width = 2;
    cfg.gen_res_blocks = 1;
    cfg.disc_layers = 2;
    cfg.disc_base_width = 2;
    cfg.cascade_widths = vec![2, 2];
    cfg.manifest = data_dir.join("manifest.tsv").display().to_string();
    let table = data::read_class_table(&data_dir.join("classes.tsv")).unwrap();
    let mut tr = Trainer::new(cfg, &table).unwrap();
    for p in tr.models.gen.learnable_mut() {
        let constant = if p.shape() == [3] { bias } else { 0.0 };
        for v in p.data_mut() {
            *v = constant;
        }
    }
    let ck = dir.path().join("flat.dgz");
    tr.save_checkpoint(&ck).unwrap();

    let out = run(&[
        "evaluate",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--manifest",
        data_dir.join("manifest.tsv").to_str().unwrap(),
        "--out",
        dir.path().join("eval").to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("ssim 1.0000"), "{text}");
    assert!(text.contains("psnr inf"), "{text}");
    assert!(text.contains("mse 0.000000"), "{text}");
    let csv = fs::read_to_string(dir.path().join("eval/metrics.csv")).unwrap();
    assert!(csv.lines().last().unwrap().starts_with("MEAN,inf,0,0,1"), "{csv}");
}

#[test]
fn evaluate_missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "evaluate",
        "--checkpoint",
        dir.path().join("nope.dgz").to_str().unwrap(),
        "--manifest",
        dir.path().join("m.tsv").to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
}

#[test]
fn gradcheck_shipped_list_exits_zero() {
    let out = run(&["gradcheck"]);
    assert_code(&out, 0);
    let text = stdout(&out);
    let passes = text.lines().filter(|l| l.starts_with("PASS ")).count();
    assert_eq!(passes, 18, "{text}");
    assert!(!text.contains("FAIL "), "{text}");
    assert!(text.contains("18/18 gradient checks passed"), "{text}");
}

#[test]
fn gradcheck_single_op_and_unknown_op() {
    let out = run(&["gradcheck", "--op", "conv2d"]);
    assert_code(&out, 0);
    assert!(stdout(&out).contains("PASS conv2d:"), "{}", stdout(&out));

    let bad = run(&["gradcheck", "--op", "softmax"]);
    assert_code(&bad, 1);
    assert!(stderr(&bad).contains("unknown gradcheck op"), "{}", stderr(&bad));
}

#[test]
fn ablate_named_subset_emits_ten_labeled_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path(), 4);
    let out_dir = dir.path().join("ab");
    let out = run(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let csv = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("label,psnr,mse,rmse,ssim"));
    let labels: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        labels,
        ["Z0.1", "Z0.04", "Z0.4", "L_p", "L_c", "L_c+L_p", "L_c+Ins.", "L_p+Ins.",
         "L_c+L_p+Ins.", "Ours"]
    );
    let runs = fs::read_dir(&out_dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("run_"))
        .count();
    assert_eq!(runs, 10);
    for label in &labels {
        assert!(stdout(&out).contains(label), "missing {label} in stdout");
    }
}

#[test]
fn usage_and_config_errors_exit_one() {
    let out = run(&["no-such-command"]);
    assert_code(&out, 1);

    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_setup(dir.path(), 2);
    let bad_set = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
        "--set",
        "epochs",
    ]);
    assert_code(&bad_set, 1);
    assert!(stderr(&bad_set).contains("KEY=VALUE"), "{}", stderr(&bad_set));

    let bad_cfg_path = dir.path().join("bad.txt");
    fs::write(&bad_cfg_path, "epochs=1\nnot_a_key=4\n").unwrap();
    let bad_cfg = run(&[
        "train",
        "--config",
        bad_cfg_path.to_str().unwrap(),
        "--out",
        dir.path().join("o2").to_str().unwrap(),
    ]);
    assert_code(&bad_cfg, 1);
    assert!(stderr(&bad_cfg).contains("line 2"), "{}", stderr(&bad_cfg));
}

#[test]
fn help_and_version_exit_zero() {
    assert_code(&run(&["--help"]), 0);
    assert_code(&run(&["--version"]), 0);
    assert_code(&run(&["train", "--help"]), 0);
}
