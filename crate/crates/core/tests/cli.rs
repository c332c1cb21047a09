mod common;

use common::{decomposition_matches, pear_cli, pear_ok};
use pear::cli::{EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};

const TASK: &[&str] = &[
    "--pretrain-examples",
    "128",
    "--train-examples",
    "96",
    "--val-examples",
    "32",
    "--test-examples",
    "48",
];
const TRAIN: &[&str] = &["--warmup-epochs", "1", "--epochs", "3", "--batch-size", "32", "--seed", "4"];

fn code(dir: &std::path::Path, args: &[&str]) -> i32 {
    pear_cli(dir, args).status.code().unwrap()
}

#[test]
fn decomposed_pipeline_equals_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    for kc in [&["--kc", "sba", "--c1", "0.5", "--c2", "0.5"][..], &["--kc", "da"], &[]] {
        let (banks, accs) = decomposition_matches(dir.path(), "1", TASK, TRAIN, kc);
        assert!(banks && accs, "kc {kc:?}: banks {banks} accuracies {accs}");
    }
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["--help"]), EXIT_OK);
    assert_eq!(code(d, &[]), EXIT_USAGE);
    assert_eq!(code(d, &["frobnicate"]), EXIT_USAGE);
    assert_eq!(code(d, &["plan", "--report", "x.txt", "--ratio", "nope"]), EXIT_USAGE);
    assert_eq!(code(d, &["plan", "--report", "missing.txt"]), EXIT_DATA);

    let report = d.join("importance.txt");
    let text = pear::io::format_importance(&common::report_from(&[1.0, 2.0, 3.0, 4.0])).unwrap();
    std::fs::write(&report, text).unwrap();
    let report = report.to_str().unwrap();
    pear_ok(d, &["plan", "--report", report]);
    let out = pear_cli(d, &["plan", "--report", report, "--ratio", "0.6"]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("donors"));

    std::fs::write(d.join("junk.bank"), b"PEARBANK\x01\x00\x00\x00garbage").unwrap();
    let plan = d.join("plan.txt");
    assert_eq!(
        code(d, &["apply", "--bank", d.join("junk.bank").to_str().unwrap(), "--plan", plan.to_str().unwrap()]),
        EXIT_DATA
    );

    let backbone = d.join("backbone.bin");
    pear_ok(d, &[&["pretrain", "--pretrain-epochs", "1"], TASK].concat());
    let mut args = vec!["finetune", "--backbone", backbone.to_str().unwrap(), "--lr", "1e300"];
    args.extend_from_slice(TASK);
    args.extend_from_slice(TRAIN);
    assert_eq!(code(d, &args), EXIT_NUMERIC);
}

#[test]
fn out_dir_comes_from_env_unless_overridden() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    pear_ok(env_dir.path(), &[&["pretrain", "--pretrain-epochs", "1"], TASK].concat());
    assert!(env_dir.path().join("backbone.bin").exists());
    let flag = flag_dir.path().to_str().unwrap();
    pear_ok(env_dir.path(), &[&["--out-dir", flag, "pretrain", "--pretrain-epochs", "1"], TASK].concat());
    assert!(flag_dir.path().join("backbone.bin").exists());
    let a = std::fs::read(env_dir.path().join("backbone.bin")).unwrap();
    let b = std::fs::read(flag_dir.path().join("backbone.bin")).unwrap();
    assert_eq!(a, b);
    let leftovers: Vec<_> = std::fs::read_dir(env_dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(leftovers.len(), 1, "temporary files left behind: {leftovers:?}");
}

#[test]
fn compare_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &str| -> Vec<String> {
        [
            "compare", "--task-seeds", "1", "--seeds", "2", "--pretrain-epochs", "1", "--no-full", "--epochs", "3",
            "--warmup-epochs", "1", "--out", out,
        ]
        .iter()
        .map(|s| s.to_string())
        .chain(TASK.iter().map(|s| s.to_string()))
        .collect()
    };
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    for p in [&a, &b] {
        let owned = args(p.to_str().unwrap());
        let table = pear_ok(dir.path(), &owned.iter().map(String::as_str).collect::<Vec<_>>());
        assert!(table.contains("pear-best"));
    }
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    assert_eq!(
        code(dir.path(), &["compare", "--kc", "da"]),
        EXIT_USAGE,
        "compare must reject a fixed checkpoint"
    );
}
