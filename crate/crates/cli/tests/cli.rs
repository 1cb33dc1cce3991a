use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn pacsan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pacsan")).args(args).output().expect("spawn pacsan")
}

fn corpus(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../corpus")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn run_json(dir: &Path, file: &str, extra: &[&str]) -> (i32, Value) {
    let out = dir.join(format!("{}.json", extra.join("_")));
    let mut args = vec!["run", file, "--json", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = pacsan(&args);
    let json = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    (o.status.code().unwrap(), json)
}

fn assert_schema(v: &Value) {
    let obj = v.as_object().unwrap();
    let verdict = obj["verdict"].as_str().unwrap();
    assert!(verdict == "Completed" || verdict == "Violation");
    for key in ["checks_full", "checks_fast", "allocs", "frees", "insts"] {
        assert!(obj["stats"][key].is_u64(), "stats.{key}");
    }
    assert!(obj["config"]["n"].is_u64() && obj["config"]["p"].is_u64());
    assert!(obj["config"]["seed"].is_u64() && obj["config"]["opts"].is_string());
    let optional = ["kind", "function", "inst_index", "pointer_hex", "found_id"];
    if verdict == "Violation" {
        assert!(optional.iter().all(|k| obj.contains_key(*k)));
        let hex = obj["pointer_hex"].as_str().unwrap();
        assert!(hex.starts_with("0x") && u64::from_str_radix(&hex[2..], 16).is_ok());
    } else {
        assert!(optional.iter().all(|k| !obj.contains_key(*k)));
    }
}

#[test]
fn use_after_free_exits_one_with_kind() {
    let dir = tempfile::tempdir().unwrap();
    let (code, v) = run_json(dir.path(), &corpus("cwe416_read_after_free_bad_expect=UseAfterFree.ir"), &[]);
    assert_eq!(code, 1);
    assert_eq!(v["kind"], "UseAfterFree");
    assert_eq!(v["function"], "main");
    assert_eq!(v["inst_index"], 3);
    assert_schema(&v);
}

#[test]
fn good_program_fewer_full_checks_with_opts() {
    let dir = tempfile::tempdir().unwrap();
    let file = corpus("cwe122_loop_write_good.ir");
    let (c_all, all) = run_json(dir.path(), &file, &["--opts", "all"]);
    let (c_none, none) = run_json(dir.path(), &file, &["--opts", "none"]);
    assert_eq!((c_all, c_none), (0, 0));
    assert_eq!(all["verdict"], none["verdict"]);
    assert!(all["stats"]["checks_full"].as_u64() < none["stats"]["checks_full"].as_u64());
    assert_schema(&all);
    assert_schema(&none);
}

#[test]
fn config_reports_pac_width() {
    let dir = tempfile::tempdir().unwrap();
    let file = corpus("cwe415_simple_good.ir");
    let (_, v) = run_json(dir.path(), &file, &["--n", "47"]);
    assert_eq!(v["config"]["p"], 16);
    let (_, v) = run_json(dir.path(), &file, &["--n", "52", "--seed", "9"]);
    assert_eq!((v["config"]["p"].as_u64(), v["config"]["seed"].as_u64()), (Some(11), Some(9)));
}

#[test]
fn raw_and_oracle_modes() {
    let dir = tempfile::tempdir().unwrap();
    let file = corpus("cwe416_reuse_after_realloc_bad_expect=UseAfterFree.ir");
    let (code, v) = run_json(dir.path(), &file, &["--raw"]);
    assert_eq!(code, 0, "uninstrumented runs detect nothing");
    assert_eq!(v["config"]["opts"], "raw");
    let (code, v) = run_json(dir.path(), &file, &["--oracle"]);
    assert_eq!((code, v["kind"].as_str()), (1, Some("UseAfterFree")));
}

#[test]
fn emit_prints_instrumented_ir() {
    let o = pacsan(&["run", &corpus("cwe416_read_after_free_good.ir"), "--emit"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("instrumented"));
    assert!(text.contains("pmalloc") && text.contains("check.4"));
}

#[test]
fn tool_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("broken.ir");
    std::fs::write(&bad, "func @main() -> i32 {\nentry:\n  %x = frobnicate 1\n  ret 0\n}\n").unwrap();
    let o = pacsan(&["run", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));

    assert_eq!(pacsan(&["run", "/nonexistent.ir"]).status.code(), Some(2));
    assert_eq!(pacsan(&["run", &corpus("cwe415_simple_good.ir"), "--n", "60"]).status.code(), Some(2));
    assert_eq!(pacsan(&["corpus", dir.path().join("empty").to_str().unwrap()]).status.code(), Some(2));
    let empty = tempfile::tempdir().unwrap();
    assert_eq!(pacsan(&["corpus", empty.path().to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(pacsan(&["collide", "--trials", "0"]).status.code(), Some(2));
    assert_eq!(pacsan(&["collide", "--trials", "100"]).status.code(), Some(2));
}

#[test]
fn corpus_failure_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let src = std::fs::read_to_string(corpus("cwe416_read_after_free_bad_expect=UseAfterFree.ir")).unwrap();
    std::fs::write(dir.path().join("cwe416_mislabeled_good.ir"), &src).unwrap();
    std::fs::copy(corpus("cwe415_simple_good.ir"), dir.path().join("cwe415_simple_good.ir")).unwrap();
    let o = pacsan(&["corpus", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("cwe416_mislabeled_good.ir: false positive"));
    assert!(!text.contains("cwe415_simple_good.ir:"));
}

#[test]
fn shipped_corpus_passes_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus.json");
    let o = pacsan(&["corpus", &corpus(""), "--json", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(v["false_positives"], 0);
    assert!(v["mismatches"].as_array().unwrap().is_empty());
    assert!(v["files"].as_array().unwrap().len() >= 32);
}

#[test]
fn collide_small_p() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.json");
    let o = pacsan(&["collide", "--trials", "40960", "--n", "52", "--json", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(v["p"], 11);
    assert!(v["z"].as_f64().unwrap().abs() < 6.0);
    let o = pacsan(&["collide", "--trials", "40960", "--p-override", "12"]);
    assert!(String::from_utf8(o.stdout).unwrap().contains("p = 12"));
}
