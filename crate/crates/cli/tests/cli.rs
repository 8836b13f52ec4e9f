use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

fn aarm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aarm"))
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn wait_healthy(url: &str) {
    let start = Instant::now();
    while start.elapsed() < Duration::from_secs(20) {
        if reqwest::blocking::get(format!("{url}/healthz")).is_ok_and(|r| r.status().is_success()) {
            return;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    panic!("gateway at {url} never became healthy");
}

fn spawn_gateway(dir: &Path, port: u16, clock: Option<&str>, extra: &[&str]) -> Server {
    let mut cmd = aarm();
    cmd.current_dir(dir).args(["serve", "--config", "gateway.json", "--listen", &format!("127.0.0.1:{port}")]).args(extra);
    cmd.env_remove("AARM_TEST_CLOCK").stdout(Stdio::null()).stderr(Stdio::null());
    if let Some(c) = clock {
        cmd.env("AARM_TEST_CLOCK", c).arg("--test-mode");
    }
    let server = Server(cmd.spawn().unwrap());
    wait_healthy(&format!("http://127.0.0.1:{port}"));
    server
}

fn emit(dir: &Path, mock: u16, clock: u16) {
    let o = aarm()
        .args(["conform", "--emit-config"])
        .arg(dir)
        .args(["--mock-listen", &format!("127.0.0.1:{mock}"), "--clock-listen", &format!("127.0.0.1:{clock}")])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", text(&o));
}

#[test]
fn conform_against_an_external_gateway_then_verify_its_receipts() {
    let dir = tempfile::tempdir().unwrap();
    let (gw, mock, clock) = (free_port(), free_port(), free_port());
    emit(dir.path(), mock, clock);
    let _server = spawn_gateway(dir.path(), gw, Some(&format!("http://127.0.0.1:{clock}/now")), &[]);
    let report = dir.path().join("report.json");
    let o = aarm()
        .args(["conform", "--target", &format!("http://127.0.0.1:{gw}")])
        .arg("--data-dir")
        .arg(dir.path().join("data"))
        .args(["--mock-listen", &format!("127.0.0.1:{mock}"), "--clock-listen", &format!("127.0.0.1:{clock}")])
        .arg("--report")
        .arg(&report)
        .output()
        .unwrap();
    let out = text(&o);
    assert!(o.status.success(), "{out}");
    assert!(out.contains("level: AARM Extended"), "{out}");
    assert!(out.contains("SKIPPED(out of scope)"), "{out}");
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["level"], "AARM Extended");

    let data = dir.path().join("data");
    let verify = |receipts: &Path| aarm().arg("verify-receipts").arg("--receipts").arg(receipts).arg("--keys").arg(data.join("keys.json")).output().unwrap();
    let o = verify(&data.join("receipts.jsonl"));
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains(" 0 invalid"));

    let mut bytes = std::fs::read(data.join("receipts.jsonl")).unwrap();
    let at = bytes.iter().position(|b| *b == b'"').unwrap() + 1;
    bytes[at] ^= 0x01;
    let tampered = dir.path().join("tampered.jsonl");
    std::fs::write(&tampered, bytes).unwrap();
    let o = verify(&tampered);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("INVALID line 1"), "{}", text(&o));
}

#[test]
fn self_hosted_conform_exits_zero_at_extended() {
    let o = aarm().args(["conform", "--parallel"]).output().unwrap();
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("level: AARM Extended"));
}

#[test]
fn partial_conform_run_reports_not_assessed() {
    let o = aarm().args(["conform", "--requirement", "R1", "--scenario", "composition_exfiltration"]).output().unwrap();
    let out = text(&o);
    assert!(o.status.success(), "{out}");
    assert!(out.contains("level: not assessed"), "{out}");
}

#[test]
fn unreachable_target_skips_and_fails_the_run() {
    let (gw, mock, clock) = (free_port(), free_port(), free_port());
    let o = aarm()
        .args(["conform", "--target", &format!("http://127.0.0.1:{gw}")])
        .args(["--mock-listen", &format!("127.0.0.1:{mock}"), "--clock-listen", &format!("127.0.0.1:{clock}")])
        .output()
        .unwrap();
    let out = text(&o);
    assert_eq!(o.status.code(), Some(1), "{out}");
    assert!(out.contains("SKIPPED(target down)"), "{out}");
    assert!(!out.contains("PASS"), "{out}");
    assert!(out.contains("level: none"), "{out}");
}

#[test]
fn console_is_served_only_when_asked_and_present() {
    let dir = tempfile::tempdir().unwrap();
    emit(dir.path(), free_port(), free_port());
    let o = aarm().current_dir(dir.path()).args(["serve", "--config", "gateway.json", "--console", "--console-dir", "missing"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("does not exist"), "{}", text(&o));

    std::fs::create_dir(dir.path().join("console")).unwrap();
    std::fs::write(dir.path().join("console/index.html"), "<title>approvals</title>").unwrap();
    let port = free_port();
    let _server = spawn_gateway(dir.path(), port, None, &["--console", "--console-dir", "console"]);
    let body = reqwest::blocking::get(format!("http://127.0.0.1:{port}/console/index.html")).unwrap().text().unwrap();
    assert!(body.contains("approvals"));
    let pending = reqwest::blocking::get(format!("http://127.0.0.1:{port}/v1/pending")).unwrap();
    assert!(pending.status().is_success());
}

#[test]
fn test_clock_is_ignored_outside_test_mode() {
    let dir = tempfile::tempdir().unwrap();
    emit(dir.path(), free_port(), free_port());
    let port = free_port();
    let mut cmd = aarm();
    cmd.current_dir(dir.path())
        .args(["serve", "--config", "gateway.json", "--listen", &format!("127.0.0.1:{port}")])
        .env("AARM_TEST_CLOCK", "http://127.0.0.1:9/now")
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .stderr(Stdio::piped());
    let mut server = Server(cmd.spawn().unwrap());
    wait_healthy(&format!("http://127.0.0.1:{port}"));
    server.0.kill().unwrap();
    let out = server.0.wait_with_output_ref();
    assert!(out.contains("ignored without --test-mode"), "{out}");
}

trait ReadStderr {
    fn wait_with_output_ref(&mut self) -> String;
}

impl ReadStderr for Child {
    fn wait_with_output_ref(&mut self) -> String {
        use std::io::Read;
        let _ = self.wait();
        let mut s = String::new();
        if let Some(e) = self.stderr.as_mut() {
            let _ = e.read_to_string(&mut s);
        }
        s
    }
}

#[test]
fn keygen_prints_the_public_key_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let key = dir.path().join("signing.key");
    let o = aarm().args(["keygen", "--out"]).arg(&key).output().unwrap();
    assert!(o.status.success(), "{}", text(&o));
    let keys: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let obj = keys.as_object().unwrap();
    assert_eq!(obj.len(), 1);
    assert_eq!(obj.keys().next().unwrap().len(), 8);
    let again = aarm().args(["keygen", "--out"]).arg(&key).output().unwrap();
    assert_eq!(again.status.code(), Some(2));
    assert!(aarm().args(["keygen", "--force", "--out"]).arg(&key).output().unwrap().status.success());
}

#[test]
fn seed_requires_test_mode() {
    let o = aarm().args(["serve", "--config", "x.json", "--seed", "7"]).output().unwrap();
    assert!(!o.status.success());
    assert!(text(&o).contains("--test-mode"), "{}", text(&o));
}
