use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tvpr_core::ablation::AblationGrid;
use tvpr_core::config::TrainConfig;
use tvpr_core::dataset::synthetic::GeneratorConfig;

fn tvpr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tvpr"))
        .args(args)
        .env_remove("TVPR_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = tvpr(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_command_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("gen.toml"), "num_videos = 12\nseed = 3\n").unwrap();
    std::fs::write(d.join("train.toml"), "epochs = 1\nnum_frames = 4\nablation = \"visual_only\"\n").unwrap();
    let data = d.join("data");
    ok(&["gen-data", "--config", s(&d.join("gen.toml")), "--out", s(&data)]);
    let manifest = data.join("manifest.jsonl");
    assert!(manifest.exists());

    let ckpt = d.join("ckpt/model.bin");
    ok(&["train", "--config", s(&d.join("train.toml")), "--manifest", s(&manifest), "--out", s(&ckpt)]);
    for ext in ["index", "toml", "vocab"] {
        assert!(d.join(format!("ckpt/model.bin.{ext}")).exists(), "{ext}");
    }

    let report = d.join("eval.txt");
    let table = ok(&["eval", "--ckpt", s(&ckpt), "--manifest", s(&manifest), "--report", s(&report)]);
    assert_eq!(std::fs::read_to_string(&report).unwrap(), table);
    assert!(table.starts_with("# each caption queries"), "{table}");
    assert!(table.contains("split test"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("eval.txt.json")).unwrap()).unwrap();
    assert_eq!(json["queries"], 2 * json["result"]["gallery_size"].as_u64().unwrap());

    let hits = ok(&["retrieve", "--ckpt", s(&ckpt), "--manifest", s(&manifest), "--query", "a person in a red top", "--topk", "3"]);
    assert_eq!(hits.lines().count(), 3);
    assert!(hits.lines().all(|l| l.contains("synthetic_")));
}

#[test]
fn ablate_writes_table_and_record() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.toml");
    std::fs::write(
        &grid,
        "seeds = [0]\n[[cells]]\nablation = \"visual_only\"\nnum_frames = 1\n\
         [[corpora]]\nname = \"tiny\"\n[corpora.generator]\nnum_videos = 8\n\
         [train]\nepochs = 1\n[train.split]\nratios = [0.5, 0.0, 0.5]\n",
    )
    .unwrap();
    let report = dir.path().join("ablation.txt");
    let table = ok(&["ablate", "--grid", s(&grid), "--report", s(&report)]);
    assert!(table.contains("R@50") && table.contains("tiny"), "{table}");
    assert!(dir.path().join("ablation.txt.json").exists());
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let out = tvpr(&["eval", "--ckpt", "/nonexistent/ckpt", "--manifest", "/nonexistent/m.jsonl", "--report", "/tmp/x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = tvpr(&["eval", "--ckpt", "a", "--manifest", "b", "--split", "dev", "--report", "c"]);
    assert!(!out.status.success());
}

#[test]
fn shipped_configs_parse() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    GeneratorConfig::load(&root.join("gen_data.toml")).unwrap();
    let train = TrainConfig::load(&root.join("train.toml")).unwrap();
    assert_eq!(train.learning_rate, 3e-5);
    let grid = AblationGrid::load(&root.join("ablation.toml")).unwrap();
    assert_eq!(grid.cells.len(), 8);
    assert_eq!(grid.corpora[0].generator.as_ref().unwrap().identities().len(), 20);
}
