use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stnas::model::{build_discrete, default_stack_plan};
use stnas::net::NetConfig;
use stnas::space::genotype_from_json;
use stnas::tensor::Rng;

fn stnas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stnas")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = stnas(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    stnas(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_PIPE: [&str; 8] = ["--window", "8", "--frames", "4", "--jitter", "8,10", "--crop", "8"];

fn tiny_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&["gen-data", "--n-train", "16", "--n-val", "8", "--seed", "1", "--out", p(&data)]);
    data
}

#[test]
fn count_outputs() {
    let out = ok(&["count"]);
    assert!(out.contains("spatial 70312500\n"));
    assert!(out.contains("temporal 1037664180\n"));
    let out = ok(&["count", "--paper-rounded"]);
    assert!(out.contains("paper_rounded 4.9e33\n"));
    let out = ok(&["count", "--exact"]);
    let total = out.lines().find_map(|l| l.strip_prefix("total ")).unwrap();
    assert_eq!(total.len(), 34);
    assert!(total.starts_with("5323"));
    let out = ok(&["count", "--nodes", "1"]);
    assert!(out.contains("spatial 25\n") && out.contains("temporal 49\n"));
}

#[test]
fn exit_codes() {
    assert_eq!(code(&["count", "--nodes", "x"]), 2);
    assert_eq!(code(&["count", "--nodes", "0"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["random"]), 2);
    assert_eq!(code(&["gradcheck", "--op", "conv_9x9"]), 2);
    assert_eq!(code(&["cost", "--arch", "/nonexistent/g.json"]), 2);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"version\":1}").unwrap();
    assert_eq!(code(&["cost", "--arch", p(&bad)]), 2);
    assert_eq!(code(&["derive", "--alpha", p(&bad), "--out", p(&dir.path().join("g.json"))]), 2);
    assert_eq!(code(&["random", "--min-convs", "9", "--out", p(&dir.path().join("r.json"))]), 2);
}

#[test]
fn gradcheck_single_op() {
    let out = ok(&["gradcheck", "--op", "t_conv_3_1x1"]);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 6);
}

#[test]
fn cost_matches_allocation() {
    let dir = tempfile::tempdir().unwrap();
    let g_path = dir.path().join("g.json");
    ok(&["random", "--seed", "3", "--min-convs", "4", "--out", p(&g_path)]);
    let json: serde_json::Value =
        serde_json::from_str(&ok(&["cost", "--arch", p(&g_path), "--k", "1", "--channels", "16", "--input", "8x32x32"])).unwrap();
    let g = genotype_from_json(&std::fs::read_to_string(&g_path).unwrap()).unwrap();
    let net = build_discrete::<f32>(&g, &default_stack_plan(1).unwrap(), [1, 1, 8, 32, 32], &NetConfig::retrain(16, 8), &mut Rng::new(0))
        .unwrap();
    assert_eq!(json["params"].as_u64().unwrap(), net.num_params() as u64);
    assert!(json["macs"].as_u64().unwrap() > 0);
    assert_eq!(json["gflops"].as_f64().unwrap(), json["macs"].as_u64().unwrap() as f64 / 1e9);
    assert!(json["per_cell"].as_array().unwrap().len() == 9);
    let out = stnas(&["cost", "--arch", p(&g_path), "--views", "30"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains(" × 30"));
}

#[test]
fn derive_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let alpha = stnas::supernet::ArchParams::<f64>::init(4, &mut Rng::new(5)).unwrap();
    let a_path = dir.path().join("alpha.json");
    std::fs::write(&a_path, alpha.to_json()).unwrap();
    let g_path = dir.path().join("g.json");
    ok(&["derive", "--alpha", p(&a_path), "--out", p(&g_path)]);
    assert!(dir.path().join("g.config.json").exists());
    let g = genotype_from_json(&std::fs::read_to_string(&g_path).unwrap()).unwrap();
    assert_eq!(g, stnas::space::derive_genotype(&alpha).unwrap());
    let dot = dir.path().join("dot");
    ok(&["export-dot", "--arch", p(&g_path), "--out", p(&dot)]);
    for key in ["s_nc", "s_rc", "t_nc", "t_rc"] {
        let text = std::fs::read_to_string(dot.join(format!("{key}.dot"))).unwrap();
        assert!(text.starts_with(&format!("digraph {key} {{")));
    }
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    assert!(data.join("train.pvn").exists() && data.join("val.pvn").exists() && data.join("config.json").exists());
    let s = dir.path().join("search");
    let mut args = vec!["search", "--data", p(&data), "--out", p(&s), "--epochs", "2", "--step", "1", "--snapshot", "1,2"];
    args.extend(["--channels", "4", "--batch", "8"]);
    args.extend(TINY_PIPE);
    ok(&args);
    for f in ["alpha.json", "genotype_epoch1.json", "genotype_epoch2.json", "genotype.json", "metrics.jsonl", "config.json"] {
        assert!(s.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(s.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(first["phase"], "search");
    assert_eq!(first["epoch"], 1);

    let g = s.join("g_derived.json");
    ok(&["derive", "--alpha", p(&s.join("alpha.json")), "--out", p(&g)]);
    assert_eq!(std::fs::read(&g).unwrap(), std::fs::read(s.join("genotype.json")).unwrap());

    let r = dir.path().join("retrain");
    let mut args = vec!["retrain", "--arch", p(&g), "--data", p(&data), "--out", p(&r), "--epochs", "2", "--warmup", "1"];
    args.extend(["--channels", "4", "--batch", "8"]);
    args.extend(TINY_PIPE);
    ok(&args);
    let result: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(r.join("result.json")).unwrap()).unwrap();
    assert!(result["val"]["top1"].as_f64().unwrap() >= 0.0);
    assert!(r.join("model.pvnw").exists());
}

#[test]
fn search_divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let s = dir.path().join("search");
    let mut args = vec!["search", "--data", p(&data), "--out", p(&s), "--epochs", "3", "--step", "1", "--snapshot", "1"];
    args.extend(["--channels", "4", "--batch", "8", "--lr-w", "1e30", "--momentum", "0"]);
    args.extend(TINY_PIPE);
    let out = stnas(&args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}
