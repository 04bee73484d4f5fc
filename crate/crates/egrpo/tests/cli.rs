use std::process::Command;

fn egrpo(args: &[&str], root: &std::path::Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_egrpo"))
        .args(args)
        .env("EGRPO_OUTPUT_ROOT", root)
        .output()
        .unwrap()
}

#[test]
fn plan_prints_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = egrpo(&["plan", "--output.dir", "p"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("anchor,length,target,interval,exp_entropy,truncated"));
    assert!(text.contains("\n12,2,10,"));
    assert!(dir.path().join("p/plan.txt").exists());
    assert!(dir.path().join("p/report.txt").exists());
}

#[test]
fn overrides_accept_both_forms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "merge.tau = 0 # every step its own anchor\n").unwrap();
    let out = egrpo(
        &["plan", "--config", cfg.to_str().unwrap(), "--schedule.steps=8", "--output.dir", "o"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.ends_with(",false")).count(), 4);
}

#[test]
fn exit_codes_by_category() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| egrpo(args, dir.path()).status.code().unwrap();
    assert_eq!(code(&["plan", "--schedule.stpes", "3"]), 2);
    assert_eq!(code(&["plan", "--train.clip", "2"]), 2);
    assert_eq!(code(&["plan", "--merge.tau"]), 2);
    assert_eq!(code(&["train"]), 2);
    assert_eq!(code(&["train", "--checkpoint", "/nonexistent/model.ckpt"]), 3);
    assert_eq!(code(&["ablate", "sideways", "--checkpoint", "x"]), 2);
    let bogus = dir.path().join("bogus.ckpt");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    assert_eq!(code(&["probe-variance", "--checkpoint", bogus.to_str().unwrap()]), 3);
}

#[test]
fn divergent_pretraining_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = egrpo(
        &[
            "pretrain",
            "--pretrain.lr",
            "1e300",
            "--pretrain.iterations",
            "50",
            "--pretrain.batch",
            "8",
            "--output.dir",
            "x",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
