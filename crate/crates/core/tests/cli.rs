use std::path::{Path, PathBuf};

use vectormorph::cli::{run, CommandOutcome, EXIT_DATA, EXIT_OK, EXIT_USAGE};

fn data(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn vm(args: &[&str]) -> CommandOutcome {
    run(std::iter::once("vectormorph").chain(args.iter().copied()))
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn help_everywhere() {
    for sub in [
        &[][..],
        &["decode"],
        &["ingest"],
        &["learn"],
        &["generate"],
        &["evaluate"],
    ] {
        let mut args = sub.to_vec();
        args.push("--help");
        let out = vm(&args);
        assert_eq!(out.exit_code, EXIT_OK, "{args:?}");
        assert!(out.summary.contains("Usage"), "{args:?}");
    }
}

#[test]
fn usage_errors() {
    assert_eq!(vm(&[]).exit_code, EXIT_USAGE);
    assert_eq!(vm(&["frobnicate"]).exit_code, EXIT_USAGE);
    assert_eq!(vm(&["decode"]).exit_code, EXIT_USAGE);
    assert_eq!(
        vm(&[
            "learn",
            "--sequences",
            "x",
            "--corpus",
            "y",
            "--out",
            "z",
            "--alpha",
            "abc"
        ])
        .exit_code,
        EXIT_USAGE
    );
    assert_eq!(
        vm(&[
            "generate",
            "--profile",
            "p",
            "--seed",
            "x",
            "--mode",
            "sideways"
        ])
        .exit_code,
        EXIT_USAGE
    );
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = vm(&[
        "learn",
        "--sequences",
        &p(dir.path(), "missing.seq"),
        "--corpus",
        &p(dir.path(), "c"),
        "--out",
        &p(dir.path(), "o"),
    ]);
    assert_eq!(out.exit_code, EXIT_DATA);
    assert!(out.diagnostics.contains("missing.seq"));
    let out = vm(&[
        "generate",
        "--profile",
        &p(dir.path(), "none.avp"),
        "--seed",
        "x",
        "--out",
        &p(dir.path(), "o.txt"),
    ]);
    assert_eq!(out.exit_code, EXIT_DATA);
    let out = vm(&["decode", "--in", "%2525252541", "--max-passes", "2"]);
    assert_eq!(out.exit_code, EXIT_DATA);
}

#[test]
fn decode_prints_trace() {
    let out = vm(&["decode", "--in", "%253Cscript%253E"]);
    assert_eq!(out.exit_code, EXIT_OK);
    assert_eq!(
        out.summary,
        "<script>\npasses: 3\nlayers: percent,percent\n"
    );
}

#[test]
fn ingest_counts() {
    let dir = tempfile::tempdir().unwrap();
    let urls = dir.path().join("urls.txt");
    std::fs::write(
        &urls,
        "# sample\nhttp://h/a?q=%22%3E%3Cscript%3Ealert(1)%3C/script%3E\n\nhttp://h/b#<svg onload=alert(1)>\nhttp://h/plain\n",
    )
    .unwrap();
    let out = vm(&[
        "ingest",
        "--input",
        urls.to_str().unwrap(),
        "--sequences",
        &p(dir.path(), "s.seq"),
        "--corpus",
        &p(dir.path(), "c.corpus"),
    ]);
    assert_eq!(out.exit_code, EXIT_OK, "{}", out.diagnostics);
    assert_eq!(out.summary.trim(), "3 urls, 2 sequences, 1 skipped");
    assert!(out.diagnostics.contains("config:"));
}

fn pipeline(dir: &Path) -> Vec<CommandOutcome> {
    let stages: [Vec<String>; 4] = [
        [
            "ingest",
            "--input",
            &data("xss_urls.txt"),
            "--sequences",
            &p(dir, "s.seq"),
            "--corpus",
            &p(dir, "c.corpus"),
            "--timestamp",
            "1700000000",
        ]
        .map(String::from)
        .to_vec(),
        [
            "learn",
            "--sequences",
            &p(dir, "s.seq"),
            "--corpus",
            &p(dir, "c.corpus"),
            "--out",
            &p(dir, "p.avp"),
            "--jobs",
            "2",
        ]
        .map(String::from)
        .to_vec(),
        [
            "generate",
            "--profile",
            &p(dir, "p.avp"),
            "--seed",
            "\"><script>alert(1)</script>x",
            "--count",
            "60",
            "--rng-seed",
            "3",
            "--obfuscate",
            "percent",
            "--out",
            &p(dir, "payloads.txt"),
        ]
        .map(String::from)
        .to_vec(),
        [
            "evaluate",
            "--payloads",
            &p(dir, "payloads.txt"),
            "--sinks",
            &data("sinks.json"),
            "--report",
            &p(dir, "report.txt"),
        ]
        .map(String::from)
        .to_vec(),
    ];
    stages
        .iter()
        .map(|args| run(std::iter::once("vectormorph".to_string()).chain(args.iter().cloned())))
        .collect()
}

#[test]
fn pipeline_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [a.path(), b.path()] {
        for out in pipeline(dir) {
            assert_eq!(out.exit_code, EXIT_OK, "{}", out.diagnostics);
        }
    }
    for f in ["s.seq", "c.corpus", "p.avp", "payloads.txt", "report.txt"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
    let payloads = std::fs::read_to_string(a.path().join("payloads.txt")).unwrap();
    assert_eq!(payloads.lines().count(), 60);
    assert!(payloads.lines().all(|l| l.contains("%3Cscript%3E")));
    let report = std::fs::read_to_string(a.path().join("report.txt")).unwrap();
    assert!(report.contains("fp rate") && report.contains("recall"));
}
