use std::io::{BufRead, BufReader, Cursor};
use std::path::Path;
use std::process::{Command, Stdio};

use ndb_cli::{run, Io, EXIT_DATA, EXIT_OK, EXIT_USAGE};

struct Outcome {
    code: i32,
    out: String,
    err: String,
}

fn ndb(args: &[&str], stdin: &str) -> Outcome {
    let mut input = Cursor::new(stdin.as_bytes().to_vec());
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("ndb").chain(args.iter().copied());
    let code = run(
        argv,
        &mut Io {
            input: &mut input,
            out: &mut out,
            err: &mut err,
            interactive: false,
        },
    );
    Outcome {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const FIG1: &str = "Nicholas lives in Washington D.C. with Sheryl.
Sheryl is Nicholas's spouse.
Teuvo was born in 1912 in Ruskala.
Sheryl's mother is Mary.
";

#[test]
fn usage_errors_exit_one() {
    let r = ndb(&["frobnicate"], "");
    assert_eq!(r.code, EXIT_USAGE);
    assert!(r.err.starts_with("ndb-error: usage:"), "{}", r.err);
    let r = ndb(&["gen", "--dbs", "2", "--bogus", "1"], "");
    assert_eq!(r.code, EXIT_USAGE);
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("f.jsonl");
    std::fs::write(&db, "").unwrap();
    let r = ndb(&["query", "--db", p(&db), "--ssg", "trained", "Who?"], "");
    assert_eq!(r.code, EXIT_USAGE, "{}", r.err);
    assert_eq!(ndb(&["--help"], "").code, EXIT_OK);
}

#[test]
fn missing_file_exits_two() {
    let r = ndb(&["query", "--db", "/nonexistent/facts.jsonl", "Who is Sheryl's husband?"], "");
    assert_eq!(r.code, EXIT_DATA);
    assert!(r.err.contains("ndb-error: io:"), "{}", r.err);
}

#[test]
fn every_run_echoes_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.jsonl");
    let r = ndb(&["gen", "--dbs", "2", "--queries-per-db", "20", "--seed", "42", "--out", p(&out)], "");
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let line = r.err.lines().find(|l| l.starts_with("ndb-config: ")).unwrap();
    let cfg: serde_json::Value = serde_json::from_str(&line["ndb-config: ".len()..]).unwrap();
    assert_eq!(cfg["command"]["gen"]["seed"], 42);
    assert_eq!(cfg["command"]["gen"]["dbs"], 2);
}

/// Facts typed into a session answer the same as the same facts loaded from
/// the log the session saved.
#[test]
fn repl_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("facts.jsonl");
    let questions = ["Who is Sheryl's husband?", "Who is Sheryl's mother?", "Where was Teuvo born?"];
    let mut script = FIG1.to_string();
    for q in questions {
        script.push_str(q);
        script.push('\n');
    }
    script.push_str(&format!(":save {}\n", p(&log)));
    let r = ndb(&["repl", "--ssg", "tfidf", "--k", "5"], &script);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(r.out.contains("{\"Nicholas\"}"), "{}", r.out);
    let in_session: Vec<&str> = r.out.lines().filter(|l| l.starts_with('{')).collect();
    assert_eq!(in_session.len(), questions.len());
    for (q, expected) in questions.iter().zip(in_session) {
        let r = ndb(&["query", "--db", p(&log), "--ssg", "tfidf", "--k", "5", q], "");
        assert_eq!(r.code, EXIT_OK, "{}", r.err);
        assert_eq!(r.out.lines().next().unwrap(), expected, "{q}");
    }
}

#[test]
fn generate_train_label_query_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d1.jsonl");
    let model = dir.path().join("ssg.bin");
    let labeled = dir.path().join("d1-ds.jsonl");
    let report = dir.path().join("out.json");
    let r = ndb(&["gen", "--dbs", "4", "--facts-per-db", "30", "--queries-per-db", "40", "--seed", "42", "--out", p(&data)], "");
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let r = ndb(&["train-ssg", "--dataset", p(&data), "--dbs", "0..3", "--epochs", "3", "--out", p(&model)], "");
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let r = ndb(&["label-distant", "--dataset", p(&data), "--out", p(&labeled)], "");
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let r = ndb(&["train-ssg", "--dataset", p(&labeled), "--labels", "distant", "--epochs", "2", "--out", p(&model)], "");
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let r = ndb(&["eval", "--dataset", p(&data), "--ssg", "tfidf", "--k", "5", "--report", p(&report)], "");
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(r.out.contains("Min/Max") && r.out.contains("Atomic"), "{}", r.out);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["overall"]["count"].as_u64().unwrap() > 0);
    let r = ndb(&["eval", "--dataset", p(&data), "--ssg", "perfect", "--dbs", "3..4"], "");
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let r = ndb(&["eval", "--dataset", p(&data), "--ssg", "trained", "--model", p(&model), "--dbs", "3..4"], "");
    assert_eq!(r.code, EXIT_OK, "{}", r.err);

    let facts = dir.path().join("facts.jsonl");
    let r = ndb(&["repl"], &format!("{FIG1}:save {}\n", p(&facts)));
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let r = ndb(&["query", "--db", p(&facts), "--ssg", "trained", "--model", p(&model), "--spj", "oracle", "--json", "Who is Sheryl's husband?"], "");
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let v: serde_json::Value = serde_json::from_str(r.out.trim()).unwrap();
    assert!(v["answers"].is_array());
}

#[test]
fn query_through_mock_server() {
    let mut server = Command::new(env!("CARGO_BIN_EXE_ndb"))
        .args(["serve-mock-spj", "--addr", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("listening on ").unwrap().to_string();

    let dir = tempfile::tempdir().unwrap();
    let facts = dir.path().join("facts.jsonl");
    assert_eq!(ndb(&["repl"], &format!("{FIG1}:save {}\n", p(&facts))).code, EXIT_OK);
    let r = ndb(&["query", "--db", p(&facts), "--spj", &url, "Who is Sheryl's husband?"], "");
    let local = ndb(&["query", "--db", p(&facts), "Who is Sheryl's husband?"], "");
    server.kill().unwrap();
    let _ = server.wait();
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert_eq!(r.out.lines().next(), Some("{\"Nicholas\"}"));
    assert_eq!(r.out.lines().next(), local.out.lines().next());

    // Nothing listens there any more.
    let r = ndb(&["query", "--db", p(&facts), "--spj", &url, "--spj-timeout-ms", "200", "Who is Sheryl's husband?"], "");
    assert_eq!(r.code, EXIT_DATA);
    assert!(r.err.contains("ndb-error: protocol:"), "{}", r.err);
}
