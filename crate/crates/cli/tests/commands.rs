use std::fs;
use std::path::Path;
use std::process::Command;

use clap::Parser;
use serde_json::Value;

use saliency_cli::{run, Cli};
use saliency_core::environment::{World, WorldConfig};
use saliency_core::raster::{save_binary_mask, BinaryMask};

fn save(m: &BinaryMask, path: std::path::PathBuf) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    save_binary_mask(m, path).unwrap();
}

fn cli(args: &[&str]) -> anyhow::Result<()> {
    run(Cli::try_parse_from(std::iter::once("saliency").chain(args.iter().copied()))?)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn read_jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn rect(x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
    BinaryMask::rect(16, 16, x0, y0, x1, y1).unwrap()
}

#[test]
fn eval_sod_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt, out) = (dir.path().join("pred"), dir.path().join("gt"), dir.path().join("out"));
    for (id, m) in [("a", rect(2, 2, 9, 7)), ("b", rect(5, 0, 16, 12))] {
        save(&m, gt.join(format!("{id}.pgm")));
        save(&m, pred.join(format!("{id}.pgm")));
    }
    cli(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--task", "sod", "--out", p(&out)]).unwrap();
    let report = read_json(&out.join("metrics.json"));
    assert_eq!(report["items"], 2);
    for key in ["S_m", "E_xi", "F_beta_max"] {
        assert_eq!(report["summary"][key], 1.0, "{key}");
    }
    assert_eq!(report["summary"]["MAE"], 0.0);
}

#[test]
fn eval_reports_missing_ids() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    fs::create_dir_all(&pred).unwrap();
    for id in ["x1", "x2"] {
        save(&rect(0, 0, 4, 4), gt.join(format!("{id}.pgm")));
    }
    let err = cli(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--task", "sod", "--out", p(dir.path())])
        .unwrap_err()
        .to_string();
    assert!(err.contains("x1, x2"), "{err}");
}

#[test]
fn eval_aggregate_is_item_mean() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt, out) = (dir.path().join("pred"), dir.path().join("gt"), dir.path().join("out"));
    let g = rect(0, 0, 8, 16);
    save(&g, gt.join("good.pgm"));
    save(&g, pred.join("good.pgm"));
    save(&g, gt.join("bad.pgm"));
    save(&rect(8, 0, 16, 16), pred.join("bad.pgm"));
    cli(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--task", "sod", "--out", p(&out)]).unwrap();
    let report = read_json(&out.join("metrics.json"));
    let items = report["per_item"].as_array().unwrap();
    assert_eq!(items[0]["id"], "bad");
    for key in ["S_m", "E_xi", "F_beta_max", "MAE"] {
        let mean = (items[0]["scores"][key].as_f64().unwrap() + items[1]["scores"][key].as_f64().unwrap()) / 2.0;
        assert!((report["summary"][key].as_f64().unwrap() - mean).abs() <= 1e-6, "{key}");
    }
    assert_eq!(items[0]["scores"]["MAE"], 1.0);
}

#[test]
fn eval_sis_and_cosod_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let (pred, gt) = (dir.path().join("sis/pred"), dir.path().join("sis/gt"));
    for (j, m) in [rect(0, 0, 5, 5), rect(8, 8, 14, 15)].iter().enumerate() {
        save(m, gt.join(format!("img/inst_{j}.pgm")));
        save(m, pred.join(format!("img/inst_{}.pgm", 1 - j)));
    }
    cli(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--task", "sis", "--out", p(&out)]).unwrap();
    let report = read_json(&out.join("metrics.json"));
    for key in ["AP50", "AP70", "IASM"] {
        assert_eq!(report["summary"][key], 1.0, "{key}");
    }

    let (pred, gt) = (dir.path().join("co/pred"), dir.path().join("co/gt"));
    for group in ["g1", "g2"] {
        for k in 0..3 {
            let m = rect(k, k, 10 + k, 12);
            save(&m, gt.join(format!("{group}/{k}.pgm")));
            save(&m, pred.join(format!("{group}/{k}.pgm")));
        }
    }
    cli(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--task", "cosod", "--out", p(&out)]).unwrap();
    let report = read_json(&out.join("metrics.json"));
    assert_eq!(report["items"], 2);
    assert_eq!(report["summary"]["S_m"], 1.0);
    assert_eq!(report["summary"]["MAE"], 0.0);
}

fn write_responses(path: &Path, lines: &[String]) {
    fs::write(path, lines.join("\n") + "\n").unwrap();
}

fn record(id: &str, task: &str, response: &str) -> String {
    serde_json::json!({"id": id, "task": task, "response": response}).to_string()
}

#[test]
fn reward_with_oracle_world() {
    let dir = tempfile::tempdir().unwrap();
    let world = World::build(4, &WorldConfig::default()).unwrap();
    let ep = &world.episodes[0];
    let golden = world.golden_response(ep.prompt).unwrap();
    let broken = golden.replace("</think>", "");
    let responses = dir.path().join("responses.jsonl");
    write_responses(
        &responses,
        &[
            record(&ep.id(), ep.task.as_str(), &golden),
            record(&ep.id(), ep.task.as_str(), &broken),
            "{not json".to_string(),
            record("ep999", "sod", &golden),
            record(&ep.id(), ep.task.as_str(), "plain text"),
        ],
    );
    let out = dir.path().join("out");
    cli(&["reward", "--responses", p(&responses), "--seed", "4", "--out", p(&out)]).unwrap();
    let recs = read_jsonl(&out.join("rewards.jsonl"));
    assert_eq!(recs.len(), 5);
    let lines: Vec<u64> = recs.iter().map(|r| r["line"].as_u64().unwrap()).collect();
    assert_eq!(lines, [1, 2, 3, 4, 5]);
    assert_eq!(recs[0]["r_total"], 1.0);
    assert_eq!(recs[0]["lambda"], 0.5);
    assert_eq!(recs[1]["r_corr"], 0.0);
    assert_eq!(recs[1]["r_fmt"], 0.5);
    assert_eq!(recs[1]["r_total"], 0.25);
    assert!(recs[2]["error"].as_str().unwrap().contains("unreadable"));
    assert!(recs[3]["error"].is_string());
    assert_eq!(recs[4]["r_total"], 0.0);
}

#[test]
fn parse_summary_counts() {
    let dir = tempfile::tempdir().unwrap();
    let responses = dir.path().join("r.jsonl");
    write_responses(
        &responses,
        &[
            record("a", "sod", "<think>t</think><answer><rg>a dog</rg></answer>"),
            record("b", "sod", "<think>t</think><answer><rg>x</rg><rg>y</rg></answer>"),
            record("c", "sod", "<think>t</think><answer><ins>cup</ins></answer>"),
            record("d", "sod", "<think>t</think><answer><rg>[semantic] z</rg></answer>"),
            record("e", "sod", "<answer><rg>a</rg></answer>"),
        ],
    );
    let out = dir.path().join("out");
    cli(&["parse", "--responses", p(&responses), "--task", "sod", "--out", p(&out)]).unwrap();
    let summary = read_json(&out.join("summary.json"));
    assert_eq!((summary["valid"].as_u64(), summary["invalid"].as_u64()), (Some(3), Some(2)));
    let recs = read_jsonl(&out.join("expressions.jsonl"));
    let groups = recs.iter().filter(|r| !r["expressions"].as_array().unwrap().is_empty()).count();
    assert_eq!(groups, 3);
    assert_eq!(recs[1]["expressions"][1]["id"], "b#1");

    // task flag disagreeing with the records: invalid verdicts, no crash
    cli(&["parse", "--responses", p(&responses), "--task", "sis", "--out", p(&out)]).unwrap();
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["valid"], 0);
    assert_eq!(summary["diagnostics"]["task_mismatch"], 5);

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    cli(&["parse", "--responses", p(&empty), "--task", "sod", "--out", p(&out)]).unwrap();
    let summary = read_json(&out.join("summary.json"));
    assert_eq!((summary["lines"].as_u64(), summary["valid"].as_u64()), (Some(0), Some(0)));
    assert_eq!(fs::read_to_string(out.join("expressions.jsonl")).unwrap(), "");
}

fn write_config(path: &Path, body: &str) {
    fs::write(path, body).unwrap();
}

#[test]
fn train_reports_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cgpo.toml");
    write_config(&cfg, "algorithm = \"cgpo\"\nseed = 3\nsteps = 300\nschedule = \"R\"\n");
    let grpo = dir.path().join("grpo.toml");
    write_config(&grpo, "algorithm = \"grpo\"\nseed = 3\nsteps = 300\nG = 8\n");
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    cli(&["train", "--config", p(&cfg), "--out", p(&a)]).unwrap();
    cli(&["train", "--config", p(&cfg), "--out", p(&b)]).unwrap();
    cli(&["train", "--config", p(&grpo), "--out", p(&c)]).unwrap();
    for f in ["report.jsonl", "policy.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let last = |d: &Path| read_jsonl(&d.join("report.jsonl")).pop().unwrap();
    assert_eq!(last(&a)["traces"], 300);
    assert_eq!(last(&c)["traces"], 2400);
    assert!(read_json(&a.join("timing.json"))["mean_step_ms"].is_number());

    let zero = dir.path().join("zero.toml");
    write_config(&zero, "steps = 0\n");
    let z = dir.path().join("z");
    cli(&["train", "--config", p(&zero), "--out", p(&z)]).unwrap();
    let lines = read_jsonl(&z.join("report.jsonl"));
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["kind"], "summary");
}

#[test]
fn train_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    write_config(&cfg, "epsilon = 0.0\n");
    assert!(cli(&["train", "--config", p(&cfg), "--out", p(dir.path())]).is_err());
    write_config(&cfg, "schedule = \"SS\"\n");
    assert!(cli(&["train", "--config", p(&cfg), "--out", p(dir.path())]).is_err());
    write_config(&cfg, "stepz = 10\n");
    let err = cli(&["train", "--config", p(&cfg), "--out", p(dir.path())]).unwrap_err();
    assert!(format!("{err:#}").contains("stepz"));
}

#[test]
fn analyze_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    write_config(&cfg, "seed = 1\nsteps = 1500\n");
    let run_dir = dir.path().join("run");
    cli(&["train", "--config", p(&cfg), "--out", p(&run_dir)]).unwrap();
    let ckpt = run_dir.join("policy.ckpt");
    let out = dir.path().join("an");
    cli(&["analyze", "--checkpoint", p(&ckpt), "--config", p(&cfg), "--samples", "400", "--seed", "2", "--out", p(&out)])
        .unwrap();
    let stats = read_json(&out.join("categories.json"));
    let total: u64 = ["hrhc_count", "hrlc_count", "lrhc_count", "lrlc_count"]
        .iter()
        .map(|k| stats[k].as_u64().unwrap())
        .sum();
    assert!(total <= 400);
    assert_eq!(stats["samples"], 400);
    assert!(cli(&["analyze", "--checkpoint", p(&ckpt), "--config", p(&cfg), "--samples", "50", "--out", p(&out)]).is_err());
    let missing = dir.path().join("nope.ckpt");
    assert!(cli(&["analyze", "--checkpoint", p(&missing), "--out", p(&out)]).is_err());
}

#[test]
fn dump_world_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    cli(&["dump-world", "--seed", "6", "--out", p(dir.path())]).unwrap();
    let m = read_json(&dir.path().join("manifest.json"));
    assert_eq!(m["seed"], 6);
    assert_eq!(m["entries"].as_array().unwrap().len(), 8);
    assert!(dir.path().join("masks/obj0.pgm").is_file());
}

#[test]
fn binary_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_saliency");
    let dir = tempfile::tempdir().unwrap();
    let ok = Command::new(exe).args(["dump-world", "--out", p(dir.path())]).output().unwrap();
    assert!(ok.status.success());
    let missing = dir.path().join("missing.jsonl");
    let bad = Command::new(exe)
        .args(["parse", "--responses", p(&missing), "--task", "sod", "--out", p(dir.path())])
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).starts_with("error:"));
}
