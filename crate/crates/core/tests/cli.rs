use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use retouch_core::dataset::{ground_truth_map, parse_dataset};
use retouch_core::media::{read_pnm, write_float_grid, write_pnm, FloatGrid, ImageBuffer};
use serde_json::Value;

fn retouch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_retouch"))
        .args(args)
        .env_remove("RETOUCH_BACKEND_PERCEPTION_URL")
        .env_remove("RETOUCH_BACKEND_REASONING_URL")
        .env_remove("RETOUCH_BACKEND_INPAINT_URL")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn grpo_check_passes() {
    let o = retouch(&["grpo-check"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 7);
    assert!(out.lines().all(|l| l.starts_with("PASS\t")), "{out}");
}

#[test]
fn empty_dataset_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let o = retouch(&["dataset-stats", p(&empty)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("empty dataset"));
    assert!(o.stdout.is_empty());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(retouch(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(retouch(&["grpo-check", "--bogus"]).status.code(), Some(2));
    assert_eq!(retouch(&["run-loop", "--image", "x.pnm", "--prompt", "p"]).status.code(), Some(2));
    assert_eq!(retouch(&[]).status.code(), Some(2));
}

#[test]
fn every_subcommand_has_help() {
    for sub in [
        "run-loop",
        "evaluate-saliency",
        "evaluate-reasoning",
        "dataset-stats",
        "grpo-check",
        "rasterize",
        "propose-masks",
    ] {
        let o = retouch(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(stdout(&o).contains("Usage: retouch"), "{sub}");
    }
}

#[test]
fn dataset_stats_text_and_json() {
    let data = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/synthetic50.jsonl");
    let o = retouch(&["dataset-stats", data]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.starts_with("image_count:            50\nregion_count:           73\n"), "{text}");
    let o = retouch(&["dataset-stats", data, "--json"]);
    let json: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(json["image_count"], 50);
    assert_eq!(json["category_histogram"]["face"].as_f64(), Some(24.0 / 73.0));
}

fn bump_scene(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let image = ImageBuffer::new(10, 8, 3, (0..240).map(|i| (i * 11 % 256) as u8).collect()).unwrap();
    let mut field = vec![0.0f32; 80];
    field[3 * 10 + 6] = 0.8;
    let image_path = dir.join("scene.pnm");
    let field_path = dir.join("field.fsal");
    fs::write(&image_path, write_pnm(&image)).unwrap();
    fs::write(&field_path, write_float_grid(&FloatGrid::new(10, 8, field).unwrap()).unwrap()).unwrap();
    (image_path, field_path)
}

#[test]
fn mock_loop_on_bump_scene() {
    let dir = tempfile::tempdir().unwrap();
    let (image, field) = bump_scene(dir.path());
    let out = dir.path().join("final.pnm");
    let trace = dir.path().join("trace.json");
    let args = [
        "run-loop", "--image", p(&image), "--prompt", "a cat", "--tau", "0.5", "--max-iter", "3", "--mock",
        "--mock-field", p(&field), "--decay", "0.5", "--out", p(&out), "--trace", p(&trace),
    ];
    let o = retouch(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["iterations"], 2);
    assert_eq!(report["actions_total"], 1);
    assert_eq!(report["converged"], true);

    let first = fs::read(&trace).unwrap();
    let json: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(json["stop_reason"], "converged");
    let records = json["records"].as_array().unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0]["max_saliency"].as_f64(), Some(0.800000011920929));
    assert_eq!(records[0]["actions"][0]["region_id"], records[0]["regions"][0]["id"]);
    for r in records {
        let step = r["image_after"].as_str().unwrap();
        read_pnm(&fs::read(step).unwrap()).unwrap();
    }
    assert_eq!(json["final_image"], p(&out));
    let final_img = read_pnm(&fs::read(&out).unwrap()).unwrap();
    assert_eq!((final_img.width(), final_img.height()), (10, 8));

    // same inputs, same bytes
    let again = retouch(&args);
    assert_eq!(again.stdout, o.stdout);
    assert_eq!(fs::read(&trace).unwrap(), first);
}

#[test]
fn env_backends_without_configuration_fail() {
    let dir = tempfile::tempdir().unwrap();
    let (image, _) = bump_scene(dir.path());
    let o = retouch(&["run-loop", "--image", p(&image), "--prompt", "x", "--backends", "env"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("RETOUCH_BACKEND_PERCEPTION_URL"), "{}", stderr(&o));
}

#[test]
fn rasterize_writes_a_disc() {
    let o = retouch(&["rasterize", "--x", "50", "--y", "50", "--width", "100", "--height", "100"]);
    assert_eq!(o.status.code(), Some(0));
    let mask = read_pnm(&o.stdout).unwrap();
    assert_eq!(mask.data().iter().filter(|&&v| v == 255).count(), 81);
    assert_eq!(retouch(&["rasterize", "--x", "100", "--y", "0", "--width", "100", "--height", "20"]).status.code(), Some(1));
}

#[test]
fn propose_masks_lists_regions() {
    let dir = tempfile::tempdir().unwrap();
    let (_, field) = bump_scene(dir.path());
    let masks = dir.path().join("masks");
    fs::create_dir(&masks).unwrap();
    let o = retouch(&["propose-masks", "--saliency", p(&field), "--mask-dir", p(&masks)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["area"], 9);
    assert_eq!(lines[0]["bbox"], serde_json::json!({"x0": 5, "y0": 2, "x1": 7, "y1": 4}));
    assert!(masks.join("r0.pgm").exists());
}

#[test]
fn evaluate_saliency_tsv() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("d.jsonl");
    fs::write(
        &dataset,
        concat!(
            r#"{"image_id":"a","image":"a.ppm","prompt":"p","width":40,"height":40,"regions":[{"x":10,"y":10,"category":"hand","description":"d","annotator":"m"}]}"#,
            "\n",
            r#"{"image_id":"b","image":"b.ppm","prompt":"p","width":40,"height":40,"regions":[{"x":30,"y":20,"category":"face","description":"d","annotator":"m"}]}"#,
            "\n"
        ),
    )
    .unwrap();
    let preds = dir.path().join("preds");
    fs::create_dir(&preds).unwrap();
    for record in parse_dataset(&fs::read(&dataset).unwrap()).unwrap() {
        let (truth, _) = ground_truth_map(&record, 0.0);
        fs::write(preds.join(format!("{}.fsal", record.image_id)), write_float_grid(&truth.to_grid()).unwrap()).unwrap();
    }
    let o = retouch(&["evaluate-saliency", "--dataset", p(&dataset), "--predictions", p(&preds)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "image\tauc_judd\tnss\tcc\tsim\tkld");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("mean\t"));
    let cols: Vec<f64> = lines[1].split('\t').skip(1).map(|v| v.parse().unwrap()).collect();
    // a perfect prediction
    assert_eq!(cols[2], 1.0);
    assert_eq!(cols[3], 1.0);
    assert!(cols[0] > 0.99);

    fs::remove_file(preds.join("b.fsal")).unwrap();
    assert_eq!(retouch(&["evaluate-saliency", "--dataset", p(&dataset), "--predictions", p(&preds)]).status.code(), Some(1));
}

#[test]
fn evaluate_reasoning_tsv() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("pred.jsonl");
    let truth = dir.path().join("truth.jsonl");
    fs::write(
        &preds,
        "{\"region_id\":\"r1\",\"category\":\"hand\",\"description\":\"extra finger\",\"severity\":0.9}\n\
         {\"region_id\":\"r2\",\"category\":\"face\",\"description\":\"odd eyes\",\"severity\":0.5}\n",
    )
    .unwrap();
    fs::write(
        &truth,
        "{\"region_id\":\"r1\",\"category\":\"hand\",\"description\":\"extra finger\"}\n\
         {\"region_id\":\"r2\",\"category\":\"text\",\"description\":\"odd eyes\"}\n",
    )
    .unwrap();
    let o = retouch(&["evaluate-reasoning", p(&preds), p(&truth)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o), "accuracy\trouge_l\tmeteor_lite\n0.500000\t1.000000\t0.937500\n");
}
