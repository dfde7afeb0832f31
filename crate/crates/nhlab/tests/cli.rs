use std::path::Path;
use std::process::Command;

fn nhlab(args: &[&str]) -> (i32, String, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_nhlab")).args(args).output().unwrap();
    (o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stdout).into_owned(), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn read_dir(d: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap()).map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())).collect();
    v.sort();
    v
}

#[test]
fn lambda_lemma_passes_and_reruns_identically() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a");
    let (code, out, _) = nhlab(&["lambda-lemma", "--out", a.to_str().unwrap()]);
    assert_eq!(code, 0, "{out}");
    assert!(out.lines().all(|l| l.starts_with("PASS") || l.starts_with("manifest")));
    let files = read_dir(&a);
    let names: Vec<&str> = files.iter().map(|f| f.0.as_str()).collect();
    assert_eq!(names, ["checks.csv", "lambda-lemma.csv", "lambda-lemma.json", "run.toml"]);
    let hash = out.lines().last().unwrap().trim_start_matches("manifest sha256:").to_owned();
    for (name, body) in &files {
        let first = String::from_utf8_lossy(body).lines().next().unwrap().to_owned();
        assert!(first.contains(&hash), "{name}: {first}");
    }
    let json: serde_json::Value = serde_json::from_slice(&files[2].1).unwrap();
    assert_eq!(json["manifest_sha256"], hash.as_str());
    assert_eq!(json["passed"], true);
    let csv = String::from_utf8_lossy(&files[1].1).into_owned();
    let row: Vec<&str> = csv.lines().nth(2).unwrap().split(',').collect();
    assert_eq!(row[0], "0");
    // 17 significant digits
    assert_eq!(row[1].split('e').next().unwrap().replace(['.', '-'], "").len(), 17);

    let b = t.path().join("b");
    let (code, _, _) = nhlab(&["lambda-lemma", "--config", a.join("run.toml").to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(read_dir(&a), read_dir(&b));
}

#[test]
fn failing_assertions_exit_with_two() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("c.toml");
    std::fs::write(&cfg, "[lambda_lemma]\nn_max = 0\n").unwrap();
    let o = t.path().join("o");
    let (code, out, _) = nhlab(&["lambda-lemma", "--config", cfg.to_str().unwrap(), "--out", o.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(out.contains("FAIL"));
    let csv = std::fs::read_to_string(o.join("lambda-lemma.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn errors_exit_with_one() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("c.toml");
    let o = t.path().join("o");
    let run = |text: &str, cmd: &str, extra: &[&str]| {
        std::fs::write(&cfg, text).unwrap();
        let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", o.to_str().unwrap()];
        args.extend_from_slice(extra);
        nhlab(&args)
    };
    let (c, _, e) = run("[model]\nmu = 0.0\n", "diffuse", &[]);
    assert_eq!(c, 1);
    assert!(e.contains("drift impossible"));
    let (c, _, e) = run("[model]\nmu = 0.01\n", "pendulum-check", &[]);
    assert_eq!(c, 1);
    assert!(e.contains("mu = 0"));
    let (c, _, e) = run("[model]\nspeed = 3\n", "chain", &[]);
    assert_eq!(c, 1);
    assert!(e.contains("unknown key `model.speed`"));
    let (c, _, e) = run("[diffuse]\nrho = 0.01\n", "chain", &[]);
    assert_eq!(c, 1);
    assert!(e.contains("unknown key `diffuse`"));
    let (c, _, e) = run("command = \"chain\"\n", "melnikov", &[]);
    assert_eq!(c, 1);
    assert!(e.contains("not `melnikov`"));
    let (c, _, e) = run("", "lambda-lemma", &["--precision", "256"]);
    assert_eq!(c, 1);
    assert!(e.contains("--precision"));
    let (c, _, _) = run("[model]\nsteps = 100\n", "chain", &[]);
    assert_eq!(c, 1);
    assert!(!o.exists());
}

#[test]
fn single_frequency_chain_is_trivial() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("c.toml");
    std::fs::write(&cfg, "[chain]\nomegas = [0.5]\n").unwrap();
    let o = t.path().join("o");
    let (code, out, _) = nhlab(&["chain", "--config", cfg.to_str().unwrap(), "--out", o.to_str().unwrap(), "--seed", "99"]);
    assert_eq!(code, 0, "{out}");
    let csv = std::fs::read_to_string(o.join("chain.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let toml = std::fs::read_to_string(o.join("run.toml")).unwrap();
    assert!(toml.contains("seed = 99"));
}
