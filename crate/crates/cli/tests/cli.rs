use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/corpus.jsonl")
}

fn mmseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmseq")).args(args).output().unwrap()
}

fn with_stdin(args: &[&str], input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_mmseq"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn lines(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn verify_passes_on_fixture_corpus() {
    let out = mmseq(&["--manifest", corpus().to_str().unwrap(), "verify"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let rows = lines(&out);
    assert_eq!(rows.len(), 13);
    assert!(rows[..12].iter().all(|r| r["passed"] == true));
    assert_eq!(rows[12]["summary"]["ok"], true);
}

#[test]
fn undersized_declared_kernel_fails_isolation() {
    let out = mmseq(&["--manifest", corpus().to_str().unwrap(), "--kernel", "1", "verify"]);
    assert_eq!(out.status.code(), Some(1));
    let iso = lines(&out).into_iter().find(|r| r["check"] == "document_isolation").unwrap();
    assert_eq!(iso["passed"], false);
}

#[test]
fn missing_or_empty_manifest_exits_2() {
    assert_eq!(mmseq(&["verify"]).status.code(), Some(2));
    assert_eq!(mmseq(&["--manifest", "/nonexistent/manifest.jsonl", "verify"]).status.code(), Some(2));
    let empty = tempfile::NamedTempFile::new().unwrap();
    assert_eq!(mmseq(&["--manifest", empty.path().to_str().unwrap(), "verify"]).status.code(), Some(2));
}

#[test]
fn pack_report_is_reproducible_across_thread_counts() {
    let m = corpus();
    let m = m.to_str().unwrap();
    let a = mmseq(&["--manifest", m, "--capacity", "300", "pack"]);
    let b = mmseq(&["--manifest", m, "--capacity", "300", "pack"]);
    let c = mmseq(&["--manifest", m, "--capacity", "300", "--threads", "1", "pack"]);
    assert!(a.status.success());
    assert!(!a.stdout.is_empty());
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(a.stdout, c.stdout);
    let rows = lines(&a);
    assert!(rows.len() > 2);
    for r in &rows[..rows.len() - 1] {
        assert!(r["used"].as_u64().unwrap() <= 300);
    }
}

#[test]
fn convpad_plans_have_no_violations() {
    let out = mmseq(&["--manifest", corpus().to_str().unwrap(), "--capacity", "400", "--kernel", "3", "convpad"]);
    assert!(out.status.success());
    for r in lines(&out) {
        assert_eq!(r["kernel"], 3);
        assert_eq!(r["violations"], 0);
    }
}

#[test]
fn mask_renders_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let pgm = dir.path().join("mask.pgm");
    let out = mmseq(&["--manifest", corpus().to_str().unwrap(), "mask", "--render", pgm.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(!out.stdout.is_empty());
    let bytes = std::fs::read(&pgm).unwrap();
    assert!(bytes.starts_with(b"P5\n"));
}

#[test]
fn geometry_anchors() {
    for (progress, tokens) in [("0.0", 961), ("1.0", 7921)] {
        let out = mmseq(&["geometry", "--height", "4000", "--width", "4000", "--progress", progress]);
        assert_eq!(lines(&out)[0]["vision_tokens"], tokens);
    }
}

#[test]
fn grounding_parse_render_convert() {
    let xml = r#"<points x1="10.5" y1="20.0" alt="cat">cat</points>"#;
    let parsed = with_stdin(&["grounding", "parse", "--format", "xml"], &format!("{xml}\n"));
    assert!(parsed.status.success());
    let rendered = with_stdin(&["grounding", "render", "--format", "xml"], &String::from_utf8(parsed.stdout).unwrap());
    assert_eq!(String::from_utf8(rendered.stdout).unwrap().trim(), xml);

    let tokens = with_stdin(&["grounding", "convert", "--format", "xml"], xml);
    let tokens = String::from_utf8(tokens.stdout).unwrap();
    assert!(tokens.contains("<|point_start|>(105, 200)<|point_end|>"));
    let back = with_stdin(&["grounding", "convert", "--format", "point"], &tokens);
    assert_eq!(String::from_utf8(back.stdout).unwrap().trim(), xml);

    let bx = "<|box_start|>[1, 2, 300, 400]<|box_end|>";
    let parsed = with_stdin(&["grounding", "parse", "--format", "box"], bx);
    let rendered = with_stdin(&["grounding", "render", "--format", "box"], &String::from_utf8(parsed.stdout).unwrap());
    assert_eq!(String::from_utf8(rendered.stdout).unwrap().trim(), bx);

    let bad = with_stdin(&["grounding", "parse", "--format", "xml"], r#"<points x1="10.55" y1="2.0">x</points>"#);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn config_file_applies_below_flags() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "capacity = 300\nmanifest = {:?}", corpus().to_str().unwrap()).unwrap();
    let cfg = f.path().to_str().unwrap();
    let from_file = lines(&mmseq(&["--config", cfg, "pack"]));
    assert_eq!(from_file[0]["capacity"], 300);
    let flagged = lines(&mmseq(&["--config", cfg, "--capacity", "500", "pack"]));
    assert_eq!(flagged[0]["capacity"], 500);
    let mut bad = tempfile::NamedTempFile::new().unwrap();
    writeln!(bad, "capacty = 3").unwrap();
    assert_eq!(mmseq(&["--config", bad.path().to_str().unwrap(), "pack"]).status.code(), Some(2));
}

#[test]
fn gradcheck_and_toy_forward_run() {
    let g = mmseq(&["--seed", "3", "gradcheck"]);
    assert!(g.status.success());
    let rows = lines(&g);
    let summary = &rows.last().unwrap()["summary"];
    assert!(summary["max_rel_error"].as_f64().unwrap() < 1e-5);

    let m = corpus();
    let a = mmseq(&["--manifest", m.to_str().unwrap(), "--capacity", "400", "toy-forward"]);
    let b = mmseq(&["--manifest", m.to_str().unwrap(), "--capacity", "400", "--threads", "1", "toy-forward"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let f = mmseq(&["--manifest", m.to_str().unwrap(), "--capacity", "400", "toy-forward", "--f32"]);
    for (x, y) in lines(&a).iter().zip(lines(&f)) {
        let (x, y) = (x["logit_sum"].as_f64().unwrap(), y["logit_sum"].as_f64().unwrap());
        assert!((x - y).abs() <= 1e-3 * x.abs().max(1.0));
    }
}
