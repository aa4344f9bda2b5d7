use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mdc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdc")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("exp.txt");
    fs::write(&path, format!("out = {}\n{body}", dir.join("out").display())).unwrap();
    path
}

const TINY: &str = "# tiny grid\n\
    data.n_train = 3\ndata.n_val = 1\ndata.n_eval = 2\n\
    net.context = 1\nnet.hidden = 16\nnet.embedding_dim = 4\n\
    train.learning_rate = 0.001\ntrain.batch_size = 3\ntrain.max_epochs = 2\n";

fn run_ok(args: &[&str]) -> String {
    let out = mdc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn gen_data_writes_manifest_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let cfg = cfg.to_str().unwrap();
    run_ok(&["gen-data", "--config", cfg]);
    let out = dir.path().join("out");
    let manifest = fs::read_to_string(out.join("data/manifest.csv")).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines[0], "scene_id,split,seed");
    assert_eq!(lines.len(), 1 + 6);
    assert!(manifest.contains("train-0002,train,") && manifest.contains("eval-0001,eval,"));
    assert_eq!(
        fs::read_to_string(out.join("config.txt")).unwrap(),
        fs::read_to_string(cfg).unwrap()
    );

    let first = fs::read(out.join("data/train-0000/src0.wav")).unwrap();
    run_ok(&["gen-data", "--config", cfg]);
    assert_eq!(first, fs::read(out.join("data/train-0000/src0.wav")).unwrap());
    run_ok(&["gen-data", "--config", cfg, "--seed", "9"]);
    assert_ne!(first, fs::read(out.join("data/train-0000/src0.wav")).unwrap());
}

#[test]
fn oracle_evaluation_separates_disjoint_tones() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let cfg = cfg.to_str().unwrap();
    run_ok(&["gen-data", "--config", cfg]);
    run_ok(&["evaluate", "--config", cfg, "--oracle"]);
    let reports = dir.path().join("out/reports");
    let csv = fs::read_to_string(reports.join("oracle.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "scene_id,method,alpha,seed,source_idx,si_sdr,si_sdr_i,sdr,sir,sar,permutation"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0][0], "eval-0000");
    for row in &rows {
        let si_sdr: f64 = row[5].parse().unwrap();
        assert!(si_sdr > 20.0, "{row:?}");
        assert_eq!(row[10], "0-1");
    }
    let meta = fs::read_to_string(reports.join("oracle.meta.txt")).unwrap();
    assert!(meta.contains("mask_source=oracle-ibm"));
}

#[test]
fn train_evaluate_and_mask_source_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("method = chimera-mdc\nalphas = 0, 1\n{TINY}"));
    let cfg = cfg.to_str().unwrap();
    run_ok(&["gen-data", "--config", cfg]);
    run_ok(&["train", "--config", cfg]);
    let out = dir.path().join("out");
    for id in ["chimera-mdc_a0_s0", "chimera-mdc_a1_s0"] {
        assert!(out.join(format!("checkpoints/{id}.spxe")).exists());
        let log = fs::read_to_string(out.join(format!("logs/{id}.csv"))).unwrap();
        assert!(log.starts_with("epoch,train_loss,val_loss,lr,seconds\n"));
        assert_eq!(log.lines().count(), 1 + 2);
    }
    run_ok(&["evaluate", "--config", cfg]);
    let meta = |id: &str| fs::read_to_string(out.join(format!("reports/{id}.meta.txt"))).unwrap();
    assert!(meta("chimera-mdc_a1_s0").contains("mask_source=binary-kmeans"));
    assert!(meta("chimera-mdc_a0_s0").contains("mask_source=ratio-mi"));

    // chimera-dc was never trained: its rows are reported as missing, not dropped
    let sweep = mdc(&["sweep-alpha", "--config", cfg]);
    assert_eq!(sweep.status.code(), Some(1));
    let csv = fs::read_to_string(out.join("sweep_alpha.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert_eq!(csv.lines().filter(|l| l.contains(",chimera-dc,0,missing,")).count(), 2);
    assert!(csv.lines().any(|l| l.starts_with("0,chimera-mdc,0,ratio-mi,")));
}

#[test]
fn identical_checkpoints_give_identical_compare_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("method = dc\n{TINY}"));
    let cfg = cfg.to_str().unwrap();
    run_ok(&["gen-data", "--config", cfg]);
    run_ok(&["train", "--config", cfg]);
    let ckpt = dir.path().join("out/checkpoints");
    fs::copy(ckpt.join("dc_a1_s0.spxe"), ckpt.join("mdc_a1_s0.spxe")).unwrap();
    let csv = run_ok(&["compare", "--config", cfg]);
    let strip = |prefix: &str| {
        csv.lines()
            .filter(|l| l.starts_with(prefix))
            .map(|l| l.split_once(',').unwrap().1.to_string())
            .collect::<Vec<_>>()
    };
    assert_eq!(strip("dc,").len(), 3);
    assert_eq!(strip("dc,"), strip("mdc,"));
}

#[test]
fn incomplete_grid_is_reported_with_partial_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("method = dc\n{TINY}"));
    let cfg = cfg.to_str().unwrap();
    run_ok(&["gen-data", "--config", cfg]);
    run_ok(&["train", "--config", cfg]);
    let out = mdc(&["compare", "--config", cfg]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing checkpoint") && stderr.contains("mdc_a1_s0.spxe"));
    let csv = fs::read_to_string(dir.path().join("out/compare.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("dc,0,mean,")));
    assert!(csv.lines().any(|l| l == "mdc,0,missing,,,,,"));
}

#[test]
fn gradcheck_passes_on_fresh_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let stdout = run_ok(&["gradcheck", "--config", cfg.to_str().unwrap()]);
    assert!(stdout.trim_end().ends_with("PASS"), "{stdout}");
}

#[test]
fn exit_codes_distinguish_io_from_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    assert_eq!(mdc(&["train", "--config", missing.to_str().unwrap()]).status.code(), Some(2));

    let bad = write_config(dir.path(), "train.batch_size = 4\ntrain.bogus = 1\n");
    let out = mdc(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    // no data generated yet
    let cfg = write_config(dir.path(), TINY);
    assert_eq!(mdc(&["train", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    let out = mdc(&["evaluate", "--config", cfg.to_str().unwrap(), "--checkpoint", "mdc_a1_s7"]);
    assert_eq!(out.status.code(), Some(1));
}
