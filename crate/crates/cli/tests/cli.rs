use radflip::nn::engine::{EngineImage, Region};
use radflip::report::REPORT_COLUMNS;
use radflip::scanner::ROUND_COLUMNS;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// A workspace with the shipped device configs and a small, quick model.
fn workspace(lr: f64) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for f in ["dram_standard.json", "dram_mapping.json", "error_model.json"] {
        std::fs::copy(configs().join(f), dir.path().join(f)).unwrap();
    }
    let mut model: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(configs().join("model_classification.json")).unwrap()).unwrap();
    model["train_samples"] = 240.into();
    model["test_samples"] = 60.into();
    model["calib_samples"] = 60.into();
    model["train"]["epochs"] = 2.into();
    model["train"]["learning_rate"] = lr.into();
    model["exit_train"]["epochs"] = 1.into();
    std::fs::write(dir.path().join("model.json"), model.to_string()).unwrap();
    let run = serde_json::json!({
        "dram_standard": "dram_standard.json",
        "dram_mapping": "dram_mapping.json",
        "error_model": "error_model.json",
        "model": "model.json",
        "out": "out",
    });
    std::fs::write(dir.path().join("run.json"), run.to_string()).unwrap();
    dir
}

fn radflip(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radflip"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

fn trained() -> tempfile::TempDir {
    let w = workspace(3e-3);
    ok(radflip(w.path(), &["train"]));
    w
}

#[test]
fn train_is_deterministic_and_variants_differ_structurally() {
    let w = trained();
    let first: Vec<Vec<u8>> =
        ["clean", "clip", "protected"].iter().map(|v| std::fs::read(w.path().join(format!("out/{v}.rdnt"))).unwrap()).collect();
    ok(radflip(w.path(), &["train", "--out", "again"]));
    for (v, bytes) in ["clean", "clip", "protected"].iter().zip(&first) {
        assert_eq!(&std::fs::read(w.path().join(format!("again/{v}.rdnt"))).unwrap(), bytes, "{v}");
    }
    let has_exits = |b: &Vec<u8>| {
        let (img, _) = EngineImage::from_bytes(b.clone()).unwrap();
        img.layout.entries.iter().any(|e| e.region == Region::ExitTable)
    };
    assert!(!has_exits(&first[0]));
    assert!(!has_exits(&first[1]));
    assert!(has_exits(&first[2]));
    assert!(w.path().join("out/provenance.json").exists());
}

#[test]
fn scan_rows_grid_and_rerun() {
    let w = trained();
    let args = ["scan", "--engine", "out/clean.rdnt", "--area", "700+24", "--eval-samples", "16", "--page-size", "8", "--page-rows", "2"];
    ok(radflip(w.path(), &args));
    let csv = read(w.path().join("out/sensitivity.csv"));
    assert_eq!(csv.lines().count(), 1 + 24 * 8);
    let grid = read(w.path().join("out/page_grid.csv"));
    // the grid tiles the whole image: 8-byte pages of 2 rows each
    let len = std::fs::metadata(w.path().join("out/clean.rdnt")).unwrap().len() as usize;
    assert_eq!(grid.lines().count(), 1 + len.div_ceil(8) * 2);
    let first = (csv, grid);
    ok(radflip(w.path(), &args));
    assert_eq!(first, (read(w.path().join("out/sensitivity.csv")), read(w.path().join("out/page_grid.csv"))));
}

fn campaign_config(dir: &Path, name: &str, v: serde_json::Value) -> String {
    std::fs::write(dir.join(name), v.to_string()).unwrap();
    name.to_string()
}

#[test]
fn campaign_summary_matches_rounds_and_reports() {
    let w = trained();
    let cfg = campaign_config(w.path(), "c.json", serde_json::json!({"total_bits": 40, "rounds": 12, "seed": 3}));
    let mut dirs = Vec::new();
    for v in ["clean", "clip", "protected"] {
        let out = format!("res_{v}");
        ok(radflip(w.path(), &["campaign", "--engine", &format!("out/{v}.rdnt"), "--config", &cfg, "--out", &out]));
        let rounds = read(w.path().join(&out).join("rounds.csv"));
        let mut lines = rounds.lines();
        assert_eq!(lines.next().unwrap(), ROUND_COLUMNS.join(","));
        let crash_col = ROUND_COLUMNS.iter().position(|&c| c == "crash").unwrap();
        let crashes: Vec<u8> = lines.map(|l| l.split(',').nth(crash_col).unwrap().parse().unwrap()).collect();
        assert_eq!(crashes.len(), 12);
        let summary: serde_json::Value = serde_json::from_str(&read(w.path().join(&out).join("summary.json"))).unwrap();
        let rate = crashes.iter().map(|&c| f64::from(c)).sum::<f64>() / 12.0;
        assert!((summary["summary"]["crash_rate"].as_f64().unwrap() - rate).abs() < 1e-12);
        assert_eq!(summary["variant"], v);
        dirs.push(out);
    }
    // same seed, same bytes
    ok(radflip(w.path(), &["campaign", "--engine", "out/clean.rdnt", "--config", &cfg, "--out", "res_again"]));
    assert_eq!(read(w.path().join("res_clean/rounds.csv")), read(w.path().join("res_again/rounds.csv")));

    let mut args = vec!["report", "--out", "rep"];
    args.extend(dirs.iter().map(String::as_str));
    ok(radflip(w.path(), &args));
    let table = read(w.path().join("rep/report.csv"));
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), REPORT_COLUMNS.join(","));
    let variants: Vec<&str> = lines.map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(variants, ["clean", "clip", "protected"]);
    let json: Vec<serde_json::Value> = serde_json::from_str(&read(w.path().join("rep/report.json"))).unwrap();
    let keys: Vec<&String> = json[0].as_object().unwrap().keys().collect();
    let mut want: Vec<&str> = REPORT_COLUMNS.to_vec();
    want.sort();
    let mut got: Vec<&str> = keys.iter().map(|k| k.as_str()).collect();
    got.sort();
    assert_eq!(got, want);
}

#[test]
fn report_aggregates_a_hand_computed_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let res = dir.path().join("r");
    std::fs::create_dir(&res).unwrap();
    // baseline 90; rounds at 90, 75, 84 -> one crash (drop 15), mean 83
    let mut csv = ROUND_COLUMNS.join(",") + "\n";
    for (i, p) in [90.0, 75.0, 84.0].iter().enumerate() {
        let drop: f64 = 90.0 - p;
        csv += &format!("{i},{i},5,5,0,{p:.4},{drop:.4},{},0,7.0000,\n", u8::from(drop >= 10.0));
    }
    std::fs::write(res.join("rounds.csv"), csv).unwrap();
    let summary = serde_json::json!({
        "schema": "radflip-campaign/1", "mapping": "S1", "task": "classification", "variant": "clean",
        "summary": {"rounds": 3, "total_bits": 5, "area": "global", "mode": "correlated", "baseline": 90.0,
            "baseline_layers": 7.0, "mean": 83.0, "min": 75.0, "max": 90.0, "crash_rate": 1.0 / 3.0,
            "mean_layers": 7.0, "parse_failures": 0}
    });
    std::fs::write(res.join("summary.json"), summary.to_string()).unwrap();
    ok(radflip(dir.path(), &["report", "--out", "rep", "r"]));
    let table = read(dir.path().join("rep/report.csv"));
    assert_eq!(table.lines().nth(1).unwrap(), "s1,classification,clean,global,5,3,90.0000,33.3333,83.0000,75.0000,90.0000");

    // a directory written under another schema is refused
    let mut other = summary.clone();
    other["schema"] = "radflip-campaign/0".into();
    std::fs::write(res.join("summary.json"), other.to_string()).unwrap();
    let o = radflip(dir.path(), &["report", "r"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let w = workspace(3e-3);
    // malformed error model: rejected before anything runs
    std::fs::write(w.path().join("error_model.json"), r#"{"multiplicity_pmf": [0.5, 0.1]}"#).unwrap();
    let o = radflip(w.path(), &["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!w.path().join("out/clean.rdnt").exists());

    let w = trained();
    let bad_area = campaign_config(w.path(), "a.json", serde_json::json!({"total_bits": 5, "rounds": 2, "area": {"kind": "sensitive", "start": 1, "len": 99999999}}));
    let o = radflip(w.path(), &["campaign", "--engine", "out/clean.rdnt", "--config", &bad_area]);
    assert_eq!(o.status.code(), Some(2));
    // more bits than the area holds: planning fails
    let tiny = campaign_config(w.path(), "t.json", serde_json::json!({"total_bits": 100, "rounds": 2, "area": {"kind": "sensitive", "start": 800, "len": 4}, "retry_budget": 200}));
    let o = radflip(w.path(), &["campaign", "--engine", "out/clean.rdnt", "--config", &tiny]);
    assert_eq!(o.status.code(), Some(3));

    let o = radflip(w.path(), &["--scheme", "s9", "train"]);
    assert!(!o.status.success());

    let d = workspace(1e7);
    let o = radflip(d.path(), &["train"]);
    assert_eq!(o.status.code(), Some(4), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn inject_plan_matches_budget_under_each_scheme() {
    let w = trained();
    for scheme in ["s1", "s2", "s3"] {
        let out = format!("inj_{scheme}");
        ok(radflip(w.path(), &["--scheme", scheme, "--seed", "4", "inject", "--engine", "out/clean.rdnt", "--bits", "50", "--apply", "--out", &out]));
        let plan: serde_json::Value = serde_json::from_str(&read(w.path().join(&out).join("plan.json"))).unwrap();
        assert_eq!(plan["total_bits"], 50);
        let a = std::fs::read(w.path().join("out/clean.rdnt")).unwrap();
        let b = std::fs::read(w.path().join(&out).join("injected.rdnt")).unwrap();
        let flipped: u32 = a.iter().zip(&b).map(|(x, y)| (x ^ y).count_ones()).sum();
        assert_eq!(flipped, 50);
    }
}
