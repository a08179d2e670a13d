use std::net::TcpListener;
use std::process::{Child, Command};
use std::time::{Duration, Instant};

fn mcqa() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mcqa"))
}

fn ok(cmd: &mut Command) -> serde_json::Value {
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn_server(out: &std::path::Path) -> (Server, String) {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let child = mcqa().args(["serve", "--addr", &addr, "--out"]).arg(out).spawn().unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    while std::net::TcpStream::connect(&addr).is_err() {
        assert!(Instant::now() < deadline, "server did not start");
        std::thread::sleep(Duration::from_millis(20));
    }
    (Server(child), format!("http://{addr}"))
}

#[test]
fn ingest_then_transform() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("medqa.jsonl");
    std::fs::write(
        &raw,
        concat!(
            r#"{"question":"Q1?","options":{"A":"a","B":"b","C":"c","D":"d"},"answer_idx":"B","answer":"b"}"#,
            "\n",
            r#"{"question":"Q2?","options":{"A":"a","B":"b"},"answer_idx":"Z"}"#,
            "\n"
        ),
    )
    .unwrap();
    let canonical = dir.path().join("canonical.jsonl");
    let v = ok(mcqa().args(["ingest", "--source", "medqa", "--input"]).arg(&raw).arg("--output").arg(&canonical));
    assert_eq!((v["items"].as_u64(), v["rejected"].as_u64()), (Some(1), Some(1)));
    assert!(dir.path().join("canonical.rejections.jsonl").exists());

    let shuffled = dir.path().join("shuffled.jsonl");
    let v = ok(mcqa()
        .args(["transform", "--kind", "add_noto", "--seed", "5", "--input"])
        .arg(&canonical)
        .arg("--output")
        .arg(&shuffled));
    assert_eq!(v["records"], 1);
    let line = std::fs::read_to_string(&shuffled).unwrap();
    let rec: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(rec["presented"].as_array().unwrap().len(), 5);
}

#[test]
fn server_delegation_matches_local_run() {
    let dir = tempfile::tempdir().unwrap();
    let (_server, url) = spawn_server(&dir.path().join("server-runs"));

    let local = ok(mcqa().args(["mock-demo", "--items", "3", "--out"]).arg(dir.path().join("local")));
    let remote = ok(mcqa()
        .args(["--server", &url, "mock-demo", "--items", "3", "--out"])
        .arg(dir.path().join("remote")));
    assert_eq!(local["digest"], remote["digest"]);
    assert_eq!(local["summary"], remote["summary"]);
    let scores = |d: &str| std::fs::read_to_string(dir.path().join(d).join("scores.json")).unwrap();
    assert_eq!(scores("local"), scores("remote"));
    let report = |d: &str| std::fs::read_to_string(dir.path().join(d).join("report/deltas_es_onestep.md")).unwrap();
    assert_eq!(report("local"), report("remote"));

    let manifest = dir.path().join("local/data/manifest.toml");
    let out = mcqa()
        .args(["--server", &url, "score", "--manifest"])
        .arg(&manifest)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), scores("local"));
}

#[test]
fn bad_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.toml");
    std::fs::write(&manifest, "global_seed = 1\nbaseline = \"x\"\nmystery = 3\n").unwrap();
    let out = mcqa().args(["run", "--manifest"]).arg(&manifest).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("mystery"));
}
