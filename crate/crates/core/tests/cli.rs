//! End-to-end checks of the `tsdf` binary: workflow chaining, artifact
//! determinism, exit-code classes, and error surfacing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tsdf"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn tsdf")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "tsdf {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Every file under `dir`, keyed by relative path, with full contents.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("read_dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                files.insert(rel, std::fs::read(&path).expect("read file"));
            }
        }
    }
    files
}

#[test]
fn usage_and_help_exit_codes() {
    let bad = run(&["--definitely-not-a-flag"]);
    assert_eq!(bad.status.code(), Some(1), "usage errors exit 1");
    let unknown = run(&["frobnicate"]);
    assert_eq!(unknown.status.code(), Some(1));
    let help = run(&["--help"]);
    assert_eq!(help.status.code(), Some(0), "--help is not an error");
    let missing_seed = run(&["synth", "--out", "/tmp/x"]);
    assert_eq!(missing_seed.status.code(), Some(1), "--seed is mandatory");
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();
    let st = run(&["train", "--manifest", "/no/such.csv", "--store", "/no/such.bin", "--out", o, "--seed", "1"]);
    assert_eq!(st.status.code(), Some(2), "missing manifest is a data error");
    assert!(String::from_utf8_lossy(&st.stderr).contains("error:"));
}

#[test]
fn full_workflow_small_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let p = |s: &str| root.join(s).to_str().unwrap().to_owned();

    // --- synth: determinism across reruns with identical flags ---
    let summary = run_ok(&[
        "synth", "--out", &p("cohort"), "--seed", "11", "--patients", "48",
    ]);
    assert!(summary.contains("patients\t48"), "{summary}");
    let first = snapshot(&root.join("cohort"));
    run_ok(&["synth", "--out", &p("cohort"), "--seed", "11", "--patients", "48"]);
    assert_eq!(first, snapshot(&root.join("cohort")), "synth rerun must be bitwise identical");
    assert!(first.contains_key(Path::new("config.txt")));

    // summary class counts must equal manifest row groupings
    let manifest = std::fs::read_to_string(root.join("cohort/manifest.csv")).unwrap();
    let mut per_class = [0usize; 2];
    let mut seen = std::collections::BTreeSet::new();
    let mut visit_rows = 0usize;
    for line in manifest.lines().skip(1) {
        visit_rows += 1;
        let fields: Vec<&str> = line.split(',').collect();
        let (pid, label) = (fields[0], fields[5]);
        if seen.insert(pid.to_string()) {
            per_class[label.parse::<usize>().unwrap()] += 1;
        }
    }
    assert!(summary.contains(&format!("controls\t{}", per_class[0])), "{summary}");
    assert!(summary.contains(&format!("progressors\t{}", per_class[1])), "{summary}");

    // positive fraction is met by quota: 48 × 0.25 = 12 ± 1
    let quota = run_ok(&[
        "synth", "--out", &p("quota"), "--seed", "3", "--patients", "48", "--positive-frac", "0.25",
    ]);
    let progressors: usize = quota
        .lines()
        .find_map(|l| l.strip_prefix("progressors\t"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((progressors as i64 - 12).abs() <= 1, "quota missed: {progressors}");

    // --- pretrain: joint corpora, per-epoch log, epochs 0 ---
    let pretrain_out = run_ok(&[
        "pretrain", "--manifest", &p("cohort/manifest.csv"), "--manifest", &p("quota/manifest.csv"),
        "--out", &p("enc"), "--seed", "11", "--epochs", "2",
    ]);
    let quota_manifest = std::fs::read_to_string(root.join("quota/manifest.csv")).unwrap();
    let quota_rows = quota_manifest.lines().count() - 1;
    assert!(
        pretrain_out.contains(&format!("corpus\t{}", visit_rows + quota_rows)),
        "two manifests must merge into one corpus: {pretrain_out}"
    );
    let log = std::fs::read_to_string(root.join("enc/pretrain_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3, "header + one line per epoch: {log}");

    run_ok(&[
        "pretrain", "--manifest", &p("cohort/manifest.csv"),
        "--out", &p("enc0"), "--seed", "11", "--epochs", "0",
    ]);
    assert!(root.join("enc0/encoder.ckpt").exists(), "epochs 0 still writes the init checkpoint");
    let log0 = std::fs::read_to_string(root.join("enc0/pretrain_log.tsv")).unwrap();
    assert_eq!(log0.lines().count(), 1, "no epochs, header only");

    // --- extract: one embedding per visit, bitwise rerun, corruption ---
    let extract_out = run_ok(&[
        "extract", "--checkpoint", &p("enc/encoder.ckpt"), "--manifest", &p("cohort/manifest.csv"),
        "--out", &p("emb"), "--seed", "11",
    ]);
    assert!(extract_out.contains(&format!("embeddings\t{visit_rows}")), "{extract_out}");
    let store_bytes = std::fs::read(root.join("emb/embeddings.bin")).unwrap();
    run_ok(&[
        "extract", "--checkpoint", &p("enc/encoder.ckpt"), "--manifest", &p("cohort/manifest.csv"),
        "--out", &p("emb2"), "--seed", "11",
    ]);
    assert_eq!(
        store_bytes,
        std::fs::read(root.join("emb2/embeddings.bin")).unwrap(),
        "extract rerun must be bitwise identical"
    );

    let ckpt = std::fs::read(root.join("enc/encoder.ckpt")).unwrap();
    std::fs::write(root.join("broken.ckpt"), &ckpt[..ckpt.len() / 3]).unwrap();
    let broken = run(&[
        "extract", "--checkpoint", &p("broken.ckpt"), "--manifest", &p("cohort/manifest.csv"),
        "--out", &p("emb3"), "--seed", "11",
    ]);
    assert_eq!(broken.status.code(), Some(2), "corrupted checkpoint is a data error");

    // --- train: fold rows, mean row, checkpoints, logs ---
    let report = run_ok(&[
        "train", "--manifest", &p("cohort/manifest.csv"), "--store", &p("emb/embeddings.bin"),
        "--out", &p("run"), "--seed", "11", "--folds", "3", "--epochs", "4", "--patience", "2",
    ]);
    for fold in 1..=3 {
        assert!(report.lines().any(|l| l.starts_with(&format!("{fold}\t"))), "fold {fold} row: {report}");
        assert!(root.join(format!("run/fold{fold}.ckpt")).exists());
        let fold_log = std::fs::read_to_string(root.join(format!("run/fold{fold}_log.tsv"))).unwrap();
        assert!(fold_log.starts_with("epoch\tlr\tloss_single\tloss_seq\tloss_total\tval_acc\tval_auc"));
        assert!(fold_log.lines().count() >= 2, "at least one epoch logged");
    }
    assert!(report.lines().any(|l| l.starts_with("mean\t")), "mean row: {report}");

    // --- eval: deterministic, --compare adds the U test ---
    let eval_a = run_ok(&[
        "eval", "--checkpoint", &p("run/fold1.ckpt"), "--manifest", &p("cohort/manifest.csv"),
        "--store", &p("emb/embeddings.bin"), "--out", &p("ev1"), "--seed", "11",
    ]);
    let eval_b = run_ok(&[
        "eval", "--checkpoint", &p("run/fold1.ckpt"), "--manifest", &p("cohort/manifest.csv"),
        "--store", &p("emb/embeddings.bin"), "--out", &p("ev2"), "--seed", "11",
    ]);
    assert_eq!(eval_a, eval_b, "evaluating twice must match exactly");
    assert!(eval_a.contains("acc\t") && eval_a.contains("auc\t"), "{eval_a}");

    let compared = run_ok(&[
        "eval", "--checkpoint", &p("run/fold1.ckpt"), "--compare", &p("run/fold2.ckpt"),
        "--manifest", &p("cohort/manifest.csv"), "--store", &p("emb/embeddings.bin"),
        "--out", &p("ev3"), "--seed", "11", "--folds", "3",
    ]);
    assert!(compared.contains("U=") && compared.contains("p="), "{compared}");

    // single-class manifest: AUC is undefined and must fail loudly
    let single: String = manifest
        .lines()
        .enumerate()
        .filter(|(i, l)| *i == 0 || l.ends_with(",1"))
        .map(|(_, l)| format!("{l}\n"))
        .collect();
    std::fs::write(root.join("cohort/single.csv"), single).unwrap();
    let degenerate = run(&[
        "eval", "--checkpoint", &p("run/fold1.ckpt"), "--manifest", &p("cohort/single.csv"),
        "--store", &p("emb/embeddings.bin"), "--out", &p("ev4"), "--seed", "11",
    ]);
    assert_eq!(degenerate.status.code(), Some(2), "single-class eval is a data error");
    assert!(
        String::from_utf8_lossy(&degenerate.stderr).contains("single class"),
        "error must say why: {}",
        String::from_utf8_lossy(&degenerate.stderr)
    );

    // --- ablate: table structure for each grid ---
    let lambda = run_ok(&[
        "ablate", "--grid", "lambda", "--manifest", &p("cohort/manifest.csv"),
        "--store", &p("emb/embeddings.bin"), "--out", &p("ab_lambda"), "--seed", "11",
        "--epochs", "2", "--patience", "1",
    ]);
    assert_eq!(lambda.lines().filter(|l| l.contains('\t') && !l.contains("lambda1")).count(), 5, "{lambda}");

    let width = run_ok(&[
        "ablate", "--grid", "width", "--manifest", &p("cohort/manifest.csv"),
        "--store", &p("emb/embeddings.bin"), "--out", &p("ab_width"), "--seed", "11",
        "--epochs", "2", "--patience", "1",
    ]);
    assert_eq!(width.lines().filter(|l| l.contains('\t') && !l.contains("variant")).count(), 3, "{width}");

    let delta = run_ok(&[
        "ablate", "--grid", "delta-t", "--max", "2", "--manifest", &p("cohort/manifest.csv"),
        "--store", &p("emb/embeddings.bin"), "--out", &p("ab_delta"), "--seed", "11",
        "--epochs", "2", "--patience", "1",
    ]);
    assert_eq!(
        delta.lines().filter(|l| l.contains('\t') && !l.contains("delta_t")).count(),
        3,
        "two fixed rows + the variable row: {delta}"
    );

    // every run leaves a config echo behind
    for sub in ["cohort", "enc", "emb", "run", "ev1", "ab_lambda"] {
        let echo = std::fs::read_to_string(root.join(sub).join("config.txt")).unwrap();
        assert!(echo.contains("seed = "), "{sub}: {echo}");
    }
}
