use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn qralign(run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qralign"))
        .arg("--config")
        .arg(tiny())
        .arg("--run-dir")
        .arg(run_dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn stage_before_its_inputs_is_a_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = qralign(dir.path(), &["train", "sft"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("catalog.tsv"));

    assert_eq!(code(&qralign(dir.path(), &["gen-data"])), 0);
    let out = qralign(dir.path(), &["train", "grpo"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("sft.ckpt"));
    let out = qralign(dir.path(), &["eval"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn corrupt_artifacts_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&qralign(dir.path(), &["gen-data"])), 0);
    std::fs::write(dir.path().join("data/sft.txt"), "garbage line\n").unwrap();
    let out = qralign(dir.path(), &["train", "sft"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));

    std::fs::create_dir_all(dir.path().join("checkpoints")).unwrap();
    std::fs::write(dir.path().join("checkpoints/sft.ckpt"), "qralign-checkpoint 1\nbroken").unwrap();
    assert_eq!(code(&qralign(dir.path(), &["eval"])), 4);
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = qralign(dir.path(), &["--set", "sft.epochz=3", "gen-data"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("epochz"));
    let out = qralign(dir.path(), &["--set", "grpo.clip_eps=2", "gen-data"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("grpo.clip_eps"));
    let out = Command::new(env!("CARGO_BIN_EXE_qralign"))
        .args(["--config", "/nonexistent/qralign.toml", "gen-data"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn config_file_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_qralign"))
        .env("QRALIGN_CONFIG", tiny())
        .arg("--run-dir")
        .arg(dir.path())
        .arg("gen-data")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let catalog = std::fs::read_to_string(dir.path().join("data/catalog.tsv")).unwrap();
    assert_eq!(catalog.lines().count(), 8 * 3 * 8);
}

#[test]
fn a_held_lock_refuses_a_second_invocation() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(".qralign.lock"), "1").unwrap();
    let out = qralign(dir.path(), &["gen-data"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("locked"));
    std::fs::remove_file(dir.path().join(".qralign.lock")).unwrap();
    assert_eq!(code(&qralign(dir.path(), &["gen-data"])), 0);
    assert!(!dir.path().join(".qralign.lock").exists());
}

#[test]
fn serve_reads_stdin_and_persists_its_cache() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["gen-data"][..], &["train", "sft"]] {
        assert_eq!(code(&qralign(dir.path(), args)), 0);
    }
    let queries = std::fs::read_to_string(dir.path().join("data/eval_queries.txt")).unwrap();
    let first: Vec<&str> = queries.lines().take(3).collect();

    let serve = |verbose: bool| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_qralign"));
        cmd.arg("--config").arg(tiny()).arg("--run-dir").arg(dir.path());
        if verbose {
            cmd.arg("-v");
        }
        let mut child = cmd
            .args(["--set", "serve.model=sft", "serve"])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let input = format!("{}\n\n", first.join("\n"));
        child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
        child.wait_with_output().unwrap()
    };
    let cold = serve(true);
    assert_eq!(code(&cold), 0, "{}", stderr(&cold));
    assert_eq!(stderr(&cold).matches("cache miss").count(), 3);
    let warm = serve(true);
    assert_eq!(stderr(&warm).matches("cache hit").count(), 3);
    assert!(stderr(&warm).contains("decodes: 0"));
    assert_eq!(cold.stdout, warm.stdout);
    for line in String::from_utf8(cold.stdout).unwrap().lines() {
        let (query, _) = line.split_once('\t').unwrap();
        assert!(first.contains(&query));
    }
    let cache = std::fs::read_to_string(dir.path().join("serve/cache.tsv")).unwrap();
    assert!(cache.starts_with("qralign-cache 1 "));
    assert_eq!(cache.lines().count(), 4);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["gen-data"][..], &["train", "sft"]] {
        assert_eq!(code(&qralign(dir.path(), args)), 0);
    }
    let out = qralign(dir.path(), &["sweep", "--axis", "rewrite-number", "--values", "1,2,3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = std::fs::read_to_string(dir.path().join("sweep/rewrite_number.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("rewrite_number\t"));
    assert_eq!(String::from_utf8(out.stdout).unwrap(), table);
    let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("sweep/rewrite_number.tsv"));
}
