#![cfg(unix)]

use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use hubcohort::classifier::{classify_via_plugin, ClassifierPlugin, PluginError, PluginTarget};
use hubcohort::record::MaintenanceCategory::*;

fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
    std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    path
}

fn plugin(path: PathBuf, batch_size: usize, timeout_ms: u64) -> ClassifierPlugin {
    ClassifierPlugin { target: PluginTarget::Command(path), batch_size, timeout: Duration::from_millis(timeout_ms) }
}

fn messages(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

#[tokio::test]
async fn labels_follow_plugin_output() {
    let dir = tempfile::tempdir().unwrap();
    // One label per input line, chosen by the word the line starts with.
    let p = script(
        dir.path(),
        "first-word.sh",
        r#"while IFS= read -r line; do
  case "$line" in
    fix*) echo Corrective ;;
    port*) echo Adaptive ;;
    add*) echo Perfective ;;
    *) echo Unclassified ;;
  esac
done"#,
    );
    let msgs = messages(&["fix a", "port b\nsecond line", "add c", "hello", "fix d"]);
    let labels = classify_via_plugin(&plugin(p, 2, 5_000), &msgs).await.unwrap();
    assert_eq!(labels, vec![Corrective, Adaptive, Perfective, Unclassified, Corrective]);
}

#[tokio::test]
async fn unknown_label_is_protocol_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = script(dir.path(), "banana.sh", "cat >/dev/null; echo Banana");
    let err = classify_via_plugin(&plugin(p, 8, 5_000), &messages(&["x"])).await.unwrap_err();
    assert!(matches!(err, PluginError::Protocol(_)), "{err}");
}

#[tokio::test]
async fn short_output_is_protocol_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = script(dir.path(), "short.sh", "cat >/dev/null; echo Corrective");
    let err = classify_via_plugin(&plugin(p, 8, 5_000), &messages(&["x", "y"])).await.unwrap_err();
    assert!(matches!(err, PluginError::Protocol(_)), "{err}");
}

#[tokio::test]
async fn slow_plugin_times_out() {
    let dir = tempfile::tempdir().unwrap();
    let p = script(dir.path(), "slow.sh", "sleep 5; echo Corrective");
    let start = Instant::now();
    let err = classify_via_plugin(&plugin(p, 8, 200), &messages(&["x"])).await.unwrap_err();
    assert!(matches!(err, PluginError::Timeout(_)), "{err}");
    assert!(start.elapsed() < Duration::from_secs(3));
}

#[tokio::test]
async fn missing_executable_is_unreachable() {
    let err = classify_via_plugin(&plugin("/nonexistent/plugin".into(), 8, 1_000), &messages(&["x"])).await.unwrap_err();
    assert!(matches!(err, PluginError::Unreachable(_)), "{err}");
}

#[tokio::test]
async fn endpoint_refusing_connections_is_unreachable() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let p = ClassifierPlugin {
        target: PluginTarget::Endpoint(format!("http://127.0.0.1:{port}/classify")),
        batch_size: 4,
        timeout: Duration::from_secs(2),
    };
    let err = classify_via_plugin(&p, &messages(&["x"])).await.unwrap_err();
    assert!(matches!(err, PluginError::Unreachable(_)), "{err}");
}
