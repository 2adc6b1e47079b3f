use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use icvp::config::RunConfig;
use icvp::data::pfm;
use icvp::head::{compute_metrics, DisparityMap};
use icvp_cli::{config_path, log_path, read_log, read_manifest, MANIFEST};

fn icvp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icvp")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = icvp(args);
    assert_eq!(out.status.code(), Some(0), "{args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn synth(dir: &Path, cfg: &Path, count: usize) -> PathBuf {
    let out = dir.join("data");
    ok(&["synth", "--config", s(cfg), "--out-dir", s(&out), "--count", &count.to_string()]);
    out
}

#[test]
fn synth_writes_triples_and_a_manifest_of_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), "c.cfg", "data_seed = 7\n");
    let data = synth(tmp.path(), &cfg_path, 3);
    let mut names: Vec<String> = fs::read_dir(&data).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    let samples: Vec<&String> = names.iter().filter(|n| n.ends_with(".ppm") || n.ends_with(".pfm")).collect();
    assert_eq!(samples.len(), 9, "{names:?}");
    for i in 0..3 {
        for prefix in ["left", "right"] {
            assert!(names.contains(&format!("{prefix}_{i:05}.ppm")));
        }
        assert!(names.contains(&format!("gt_{i:05}.pfm")));
    }
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let manifest = read_manifest(&data.join(MANIFEST)).unwrap();
    let expected: Vec<(usize, u64)> = (0..3).map(|i| (i, cfg.synth_for(i).seed)).collect();
    assert_eq!(manifest, expected);
}

#[test]
fn synth_is_bit_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        ok(&["synth", "--out-dir", s(dir), "--count", "2", "--seed", "3"]);
    }
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
    let c = tmp.path().join("c");
    ok(&["synth", "--out-dir", s(&c), "--count", "1", "--seed", "4"]);
    assert_ne!(fs::read(a.join("left_00000.ppm")).unwrap(), fs::read(c.join("left_00000.ppm")).unwrap());
}

#[test]
fn one_epoch_on_four_samples_has_a_finite_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.cfg", "epochs = 1\nval_count = 0\n");
    let data = synth(tmp.path(), &cfg, 4);
    let weights = tmp.path().join("w.icvp");
    ok(&["train", "--config", s(&cfg), "--data-dir", s(&data), "--out", s(&weights), "--quiet"]);
    assert!(weights.exists());
    let logs = read_log(&log_path(&weights)).unwrap();
    assert_eq!(logs.len(), 1);
    assert!(logs[0].loss.is_finite() && logs[0].loss > 0.0);
    assert!(fs::read_to_string(log_path(&weights)).unwrap().starts_with("epoch,lr,loss,epe\n"));
    let echo = RunConfig::load(config_path(&weights)).unwrap();
    assert_eq!(echo, RunConfig::load(&cfg).unwrap());
}

#[test]
fn learning_rate_column_halves_at_configured_epochs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.cfg", "epochs = 5\nval_count = 1\nlr = 0.002\nlr_halve_epochs = 2, 4\n");
    let data = synth(tmp.path(), &cfg, 3);
    let weights = tmp.path().join("w.icvp");
    ok(&["train", "--config", s(&cfg), "--data-dir", s(&data), "--out", s(&weights), "--quiet"]);
    let lrs: Vec<f32> = read_log(&log_path(&weights)).unwrap().iter().map(|l| l.lr).collect();
    assert_eq!(lrs, vec![0.002, 0.001, 0.001, 0.0005, 0.0005]);
}

#[test]
fn train_rejects_ground_truth_beyond_the_disparity_range() {
    let tmp = tempfile::tempdir().unwrap();
    let wide = write_config(tmp.path(), "wide.cfg", "disparities = 14, 15\n");
    let data = synth(tmp.path(), &wide, 2);
    let narrow = write_config(tmp.path(), "narrow.cfg", "max_disparity = 12\nepochs = 1\nval_count = 0\n");
    let out = icvp(&["train", "--config", s(&narrow), "--data-dir", s(&data), "--out", s(&tmp.path().join("w"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("outside"));
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), "bad.cfg", "learning_rate = 0.1\n");
    assert_eq!(icvp(&["synth", "--config", s(&bad), "--out-dir", s(tmp.path())]).status.code(), Some(1));
    assert_eq!(icvp(&["train", "--data-dir", "x"]).status.code(), Some(1));
    assert_eq!(icvp(&["verify", "--suite", "everything"]).status.code(), Some(1));
    assert_eq!(icvp(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(icvp(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_data_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    assert_eq!(icvp(&["train", "--data-dir", s(&missing), "--out", s(&tmp.path().join("w"))]).status.code(), Some(2));
    let junk = tmp.path().join("junk.pfm");
    fs::write(&junk, b"not a pfm").unwrap();
    assert_eq!(icvp(&["eval", "--pred", s(&junk), "--gt", s(&junk)]).status.code(), Some(2));
}

#[test]
fn predict_matches_input_size_and_repeats_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.cfg", "epochs = 1\nval_count = 0\nheight = 48\nwidth = 60\n");
    let data = synth(tmp.path(), &cfg, 2);
    let weights = tmp.path().join("w.icvp");
    ok(&["train", "--config", s(&cfg), "--data-dir", s(&data), "--out", s(&weights), "--quiet"]);
    let left = data.join("left_00000.ppm");
    let right = data.join("right_00000.ppm");
    let mut outputs = Vec::new();
    for i in 0..2 {
        let out = tmp.path().join(format!("p{i}.pfm"));
        let png = tmp.path().join(format!("p{i}.png"));
        ok(&["predict", "--weights", s(&weights), "--left", s(&left), "--right", s(&right), "--out", s(&out), "--png", s(&png)]);
        let map = pfm::read_pfm(&out).unwrap();
        assert_eq!((map.width, map.height), (60, 48));
        assert!(map.values.iter().all(|&d| (0.0..=15.0).contains(&d)));
        let decoder = png::Decoder::new(std::io::BufReader::new(fs::File::open(&png).unwrap()));
        let info = decoder.read_info().unwrap().info().clone();
        assert_eq!((info.width, info.height, info.color_type), (60, 48, png::ColorType::Grayscale));
        outputs.push((fs::read(&out).unwrap(), fs::read(&png).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn predict_rejects_weights_from_another_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.cfg", "epochs = 1\nval_count = 0\n");
    let data = synth(tmp.path(), &cfg, 2);
    let weights = tmp.path().join("w.icvp");
    ok(&["train", "--config", s(&cfg), "--data-dir", s(&data), "--out", s(&weights), "--quiet"]);
    let other = write_config(tmp.path(), "other.cfg", "groups = 4\n");
    let left = data.join("left_00000.ppm");
    let out = tmp.path().join("p.pfm");
    let run = icvp(&["predict", "--weights", s(&weights), "--config", s(&other), "--left", s(&left), "--right", s(&left), "--out", s(&out)]);
    assert_eq!(run.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn eval_of_identical_maps_reports_zero_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), &write_config(tmp.path(), "c.cfg", ""), 1);
    let gt = data.join("gt_00000.pfm");
    let text = ok(&["eval", "--pred", s(&gt), "--gt", s(&gt)]);
    assert!(text.lines().any(|l| l.split_whitespace().collect::<Vec<_>>() == ["EPE", "0.000"]), "{text}");
}

#[test]
fn eval_two_pixel_case_matches_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let pred = DisparityMap::dense(2, 1, vec![1.0, 2.0]).unwrap();
    let gt = DisparityMap::dense(2, 1, vec![1.0, 4.0]).unwrap();
    let (pp, gp, csv) = (tmp.path().join("p.pfm"), tmp.path().join("g.pfm"), tmp.path().join("m.csv"));
    pfm::write_pfm(&pp, &pred).unwrap();
    pfm::write_pfm(&gp, &gt).unwrap();
    let text = ok(&["eval", "--pred", s(&pp), "--gt", s(&gp), "--thresholds", "1,2,3", "--csv", s(&csv)]);
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split_whitespace().collect()).collect();
    assert!(rows.contains(&vec!["EPE", "1.000"]), "{text}");
    assert!(rows.contains(&vec!["Bad1", "0.5000"]), "{text}");
    assert!(rows.contains(&vec!["Bad2", "0.0000"]), "{text}");

    let lib = compute_metrics(&pred, &gt, &[1.0, 2.0, 3.0]).unwrap();
    let csv = fs::read_to_string(csv).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("pixels,epe,bad1,bad2,bad3"));
    let values: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let mut expected = vec![lib.pixels as f64, lib.epe];
    expected.extend(lib.bad.iter().map(|&(_, f)| f));
    assert_eq!(values, expected);
}

#[test]
fn verify_exit_codes_follow_the_outcome() {
    let text = ok(&["verify", "--suite", "fusion", "--trials", "100", "--seed", "5"]);
    assert!(text.contains("100 trials"), "{text}");
    let corrupt = icvp(&["verify", "--suite", "fusion", "--trials", "10", "--corrupt-2d-weight"]);
    assert_eq!(corrupt.status.code(), Some(3));
    let help = ok(&["verify", "--help"]);
    assert!(!help.contains("corrupt"));
}

#[test]
fn shapes_suite_covers_every_listed_size() {
    let text = ok(&["verify", "--suite", "shapes"]);
    for side in [27, 48, 96] {
        for d in [12, 24] {
            assert!(text.lines().any(|l| l.starts_with("ok") && l.contains(&format!("H=W={side} ")) && l.contains(&format!("D={d} "))), "{text}");
        }
    }
}

#[test]
fn gradcheck_suite_passes() {
    let text = ok(&["verify", "--suite", "gradcheck"]);
    assert!(!text.contains("FAIL"), "{text}");
    assert!(text.contains(" 0 failed"), "{text}");
}

#[test]
fn two_combination_ablation_gives_two_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.cfg", "epochs = 1\nval_count = 1\n");
    let data = synth(tmp.path(), &cfg, 3);
    let csv = tmp.path().join("ablation.csv");
    let text = ok(&[
        "ablate", "--config", s(&cfg), "--data-dir", s(&data), "--combinations", "gwc+atrous+2d,atrous+2d", "--csv", s(&csv), "--quiet",
    ]);
    assert_eq!(text.lines().count(), 3, "{text}");
    let csv = fs::read_to_string(csv).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][0], rows[1][0]), ("gwc+atrous+2d", "atrous+2d"));

    // Only the layers reading the cost volume depend on its channel count:
    // the first 3D encoder conv and the final 3×3×3 conv over [up, volume].
    let c = RunConfig::load(tmp.path().join("c.cfg")).unwrap().model;
    let (w0, w1) = (c.groups, 2 * c.groups);
    let expected_gap = (c.groups - 1) * 27 * (w0 + w1);
    let params: Vec<usize> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert_eq!(params[0] - params[1], expected_gap);
}
