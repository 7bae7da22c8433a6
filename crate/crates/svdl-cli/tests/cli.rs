//! End-to-end tests of the `svdl` binary: exit codes, file outputs, and
//! pipeline round trips.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn svdl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svdl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, out_sub: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    let out = dir.join(out_sub);
    let content = format!(
        "task = classification\n\
         variant = WGN\n\
         data.train = synthetic:sparse_signal:64\n\
         data.valid = synthetic:sparse_signal:64\n\
         data.test = synthetic:sparse_signal:64\n\
         hidden = 6\n\
         emb.dim = 4\n\
         batch = 16\n\
         epochs = 2\n\
         lr = 0.005\n\
         seed = 11\n\
         out.dir = {}\n\
         {extra}",
        out.display()
    );
    std::fs::write(&path, content).unwrap();
    path
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn train_on_synthetic_config_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.conf", "out", "");
    let out = svdl(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    for f in ["metrics.tsv", "best.ckpt", "final.ckpt"] {
        assert!(dir.path().join("out").join(f).exists(), "{f} missing");
    }
}

#[test]
fn missing_data_path_exits_3_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.conf");
    std::fs::write(
        &path,
        "task = classification\n\
         data.train = /nonexistent/data.tsv\n\
         data.valid = /nonexistent/data.tsv\n\
         data.test = /nonexistent/data.tsv\n",
    )
    .unwrap();
    let out = svdl(&["train", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(
        stderr_of(&out).contains("/nonexistent/data.tsv"),
        "{}",
        stderr_of(&out)
    );
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.conf", "out", "foo = 1\n");
    let out = svdl(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("foo"), "{}", stderr_of(&out));
}

#[test]
fn unknown_flag_and_missing_command_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = svdl(&["train", "--bogus", "x"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = svdl(&[], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

/// Train once, then drive prune -> eval -> bench through the artifacts.
#[test]
fn prune_eval_bench_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.conf", "out", "");
    let out = svdl(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let best = dir.path().join("out/best.ckpt");

    // Bench on an unpruned checkpoint is exit 7.
    let out = svdl(&["bench", "--ckpt", best.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(7), "{}", stderr_of(&out));

    // Prune with the default threshold (0.05 from the config record).
    let pdir = dir.path().join("pruned");
    let out = svdl(
        &[
            "prune",
            "--ckpt",
            best.to_str().unwrap(),
            "--out",
            pdir.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    for f in ["pruned.ckpt", "summary.tsv", "gates.csv", "snr_hist.tsv"] {
        assert!(pdir.join(f).exists(), "{f} missing");
    }
    // The summary row echoes to stdout.
    let row = stdout_of(&out);
    assert!(row.starts_with("WGN\t"), "{row}");

    // Pruned checkpoint is evaluable.
    let pruned = pdir.join("pruned.ckpt");
    let out = svdl(
        &[
            "eval",
            "--ckpt",
            pruned.to_str().unwrap(),
            "--data",
            "synthetic:sparse_signal:64",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    assert!(
        stdout_of(&out).starts_with("accuracy\t"),
        "{}",
        stdout_of(&out)
    );

    // Bench validates repeats and runs on the pruned checkpoint.
    let out = svdl(
        &[
            "bench",
            "--ckpt",
            pruned.to_str().unwrap(),
            "--repeats",
            "5",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
    let out = svdl(
        &[
            "bench",
            "--ckpt",
            pruned.to_str().unwrap(),
            "--seq-len",
            "32",
            "--repeats",
            "12",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let text = stdout_of(&out);
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("config\tdense_ns_per_step"));
    let row = lines.next().unwrap();
    let fields: Vec<&str> = row.split('\t').collect();
    assert_eq!(fields.len(), 6);
    let dense_macs: u64 = fields[4].parse().unwrap();
    let compiled_macs: u64 = fields[5].parse().unwrap();
    assert!(compiled_macs <= dense_macs);
}

/// Prune with --tau 0 prints compression 1 and a fully dense structure.
#[test]
fn prune_tau_zero_reports_unit_compression() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.conf", "out", "");
    let out = svdl(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let best = dir.path().join("out/best.ckpt");
    let pdir = dir.path().join("p0");
    let out = svdl(
        &[
            "prune",
            "--ckpt",
            best.to_str().unwrap(),
            "--tau",
            "0",
            "--out",
            pdir.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let fields: Vec<String> = stdout_of(&out)
        .trim()
        .split('\t')
        .map(|s| s.to_string())
        .collect();
    assert_eq!(fields[2], "1");
}

/// Identical config and seed give byte-identical outputs.
#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_a = write_config(dir.path(), "a.conf", "out_a", "");
    let cfg_b = write_config(dir.path(), "b.conf", "out_b", "");
    let out = svdl(&["train", "--config", cfg_a.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let out = svdl(&["train", "--config", cfg_b.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0));
    for f in ["metrics.tsv", "best.ckpt", "final.ckpt"] {
        let a = std::fs::read(dir.path().join("out_a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("out_b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
}

/// Eval of best.ckpt on the validation split reproduces the logged metric
/// byte for byte.
#[test]
fn eval_reproduces_logged_validation_metric() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.conf", "out", "");
    let out = svdl(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0));

    // Best row by the task metric (accuracy: maximum).
    let log = std::fs::read_to_string(dir.path().join("out/metrics.tsv")).unwrap();
    let best_metric = log
        .lines()
        .skip(1)
        .filter(|l| l.split('\t').nth(1) == Some("val"))
        .map(|l| l.split('\t').nth(4).unwrap().to_string())
        .max_by(|a, b| {
            a.parse::<f64>()
                .unwrap()
                .partial_cmp(&b.parse::<f64>().unwrap())
                .unwrap()
        })
        .unwrap();

    let best = dir.path().join("out/best.ckpt");
    let out = svdl(
        &[
            "eval",
            "--ckpt",
            best.to_str().unwrap(),
            "--data",
            "synthetic:sparse_signal:64",
            "--split",
            "val",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let printed = stdout_of(&out);
    let value = printed.trim().split('\t').nth(1).unwrap();
    assert_eq!(value, best_metric, "eval {value} vs logged {best_metric}");

    // Determinism of eval itself.
    let again = svdl(
        &[
            "eval",
            "--ckpt",
            best.to_str().unwrap(),
            "--data",
            "synthetic:sparse_signal:64",
            "--split",
            "val",
        ],
        dir.path(),
    );
    assert_eq!(stdout_of(&again), printed);
}

/// Bad checkpoint bytes exit 5.
#[test]
fn corrupt_checkpoint_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.ckpt");
    std::fs::write(&path, b"XVDL not a checkpoint").unwrap();
    let out = svdl(
        &[
            "eval",
            "--ckpt",
            path.to_str().unwrap(),
            "--data",
            "synthetic:sparse_signal:64",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(5), "{}", stderr_of(&out));
}

/// Classification eval data with more classes than the checkpoint exits 6.
#[test]
fn dimension_mismatch_exits_6() {
    let dir = tempfile::tempdir().unwrap();
    // Train a tiny file-based classification model.
    let train_tsv = dir.path().join("train.tsv");
    let mut rows = String::new();
    for i in 0..24 {
        rows.push_str(&format!("{}\tword{} filler text\n", i % 2, i % 5));
    }
    std::fs::write(&train_tsv, &rows).unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(
        &cfg,
        format!(
            "task = classification\n\
             variant = W\n\
             data.train = {p}\n\
             data.valid = {p}\n\
             data.test = {p}\n\
             hidden = 4\n\
             emb.dim = 3\n\
             batch = 8\n\
             epochs = 1\n\
             out.dir = {o}\n",
            p = train_tsv.display(),
            o = dir.path().join("out").display()
        ),
    )
    .unwrap();
    let out = svdl(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));

    // Evaluation data with a third class.
    let bad_tsv = dir.path().join("bad.tsv");
    std::fs::write(&bad_tsv, "2\tword1 text\n").unwrap();
    let out = svdl(
        &[
            "eval",
            "--ckpt",
            dir.path().join("out/best.ckpt").to_str().unwrap(),
            "--data",
            bad_tsv.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(6), "{}", stderr_of(&out));
}

/// An untrained model evaluates near chance on the balanced task. (A fixed
/// random network is not a uniform random predictor, so the band here is
/// looser than the binomial one; the exact coin-flip bound is checked at
/// the data layer.)
#[test]
fn untrained_model_evaluates_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.conf");
    std::fs::write(
        &path,
        format!(
            "task = classification\n\
             variant = WGN\n\
             data.train = synthetic:sparse_signal:2000\n\
             data.valid = synthetic:sparse_signal:2000\n\
             data.test = synthetic:sparse_signal:2000\n\
             hidden = 8\n\
             emb.dim = 4\n\
             epochs = 0\n\
             seed = 17\n\
             out.dir = {}\n",
            dir.path().join("out").display()
        ),
    )
    .unwrap();
    let out = svdl(&["train", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    // Test split has n_train / 2 = 1000 examples.
    let out = svdl(
        &[
            "eval",
            "--ckpt",
            dir.path().join("out/final.ckpt").to_str().unwrap(),
            "--data",
            "synthetic:sparse_signal:2000",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let acc: f64 = stdout_of(&out)
        .trim()
        .split('\t')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!((acc - 0.5).abs() < 0.1, "near-chance accuracy was {acc}");
}

/// A constant source has zero entropy: char-LM bits-per-char collapses.
#[test]
fn char_lm_on_repeated_character_reaches_zero_bpc() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("aaa.txt");
    std::fs::write(&corpus, "a".repeat(4000)).unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(
        &cfg,
        format!(
            "task = charlm\n\
             variant = W\n\
             data.train = {p}\n\
             data.valid = {p}\n\
             data.test = {p}\n\
             hidden = 4\n\
             batch = 4\n\
             epochs = 2\n\
             out.dir = {o}\n",
            p = corpus.display(),
            o = dir.path().join("out").display()
        ),
    )
    .unwrap();
    let out = svdl(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let out = svdl(
        &[
            "eval",
            "--ckpt",
            dir.path().join("out/best.ckpt").to_str().unwrap(),
            "--data",
            corpus.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let bpc: f64 = stdout_of(&out)
        .trim()
        .split('\t')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!(bpc < 0.05, "bits-per-char {bpc}");
    // The vocabulary dump exists for file-based corpora.
    assert!(dir.path().join("out/vocab.txt").exists());
}

/// The sweep writes one table row per variant.
#[test]
fn sweep_writes_combined_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sweep.conf", "sweep_out", "");
    let out = svdl(&["sweep", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let table = std::fs::read_to_string(dir.path().join("sweep_out/table.tsv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5, "{table}");
    assert_eq!(lines[0], "Method\tQuality\tCompression\tNeurons x-h\tGates");
    for (i, name) in ["Baseline", "W", "WN", "WGN"].iter().enumerate() {
        assert!(lines[i + 1].starts_with(name), "{}", lines[i + 1]);
    }
}
