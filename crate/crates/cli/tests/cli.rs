use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fgt_core::geometry::{Box3D, Point3};
use fgt_core::io::{decode_gt_database, encode_points_bin, format_labels_txt, METRICS_HEADER};

const TINY: &str = "\
# small scenes so the whole pipeline runs in seconds
policy = fgt
epochs = 2
lr = 0.001
seeds = 11, 12
n_labeled = 4
n_unlabeled = 4
n_test = 3
pretrain_epochs = 1
tau_iou = 0
tau_cls = 0
score_thresh = 0
x_min = 0
x_max = 20
y_min = -10
y_max = 10
cars_min = 2
cars_max = 4
clutter_points = 200
";

fn fgt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fgt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn car(cx: f64, cy: f64) -> Box3D {
    Box3D::new(cx, cy, -0.8, 3.9, 1.6, 1.56, 0.0, 0).unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&fgt(&[])), 2);
    assert_eq!(code(&fgt(&["teleport"])), 2);
    assert_eq!(code(&fgt(&["eval", "--labels", "x", "--bogus"])), 2);
    assert_eq!(code(&fgt(&["simulate", "--config", "c.txt"])), 2);
    assert_eq!(code(&fgt(&["--help"])), 0);
}

#[test]
fn eval_perfect_detections() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("labels.txt");
    let dets = dir.path().join("dets.txt");
    fs::write(
        &labels,
        format_labels_txt(&[car(10.0, 2.0), car(20.0, -3.0)]),
    )
    .unwrap();
    fs::write(
        &dets,
        "Car 10 2 -0.8 3.9 1.6 1.56 0 0.9\nCar 20 -3 -0.8 3.9 1.6 1.56 0 0.8\n",
    )
    .unwrap();
    let o = fgt(&["eval", "--detections", p(&dets), "--labels", p(&labels)]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).trim(), "AP 1.0");

    // directories pair files by stem; scene b has no detections
    let (ld, dd) = (dir.path().join("l"), dir.path().join("d"));
    fs::create_dir_all(&ld).unwrap();
    fs::create_dir_all(&dd).unwrap();
    fs::write(ld.join("a.txt"), format_labels_txt(&[car(10.0, 2.0)])).unwrap();
    fs::write(ld.join("b.txt"), format_labels_txt(&[car(10.0, 2.0)])).unwrap();
    fs::write(dd.join("a.txt"), "Car 10 2 -0.8 3.9 1.6 1.56 0 0.9\n").unwrap();
    let o = fgt(&["eval", "--detections", p(&dd), "--labels", p(&ld)]);
    assert_eq!(stdout(&o).trim(), "AP 0.5");

    fs::write(&dets, "Car 10 2\n").unwrap();
    let o = fgt(&["eval", "--detections", p(&dets), "--labels", p(&labels)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
}

#[test]
fn gtdb_build_and_failure_cleanup() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    fs::create_dir_all(&scenes).unwrap();
    let b = car(10.0, 2.0);
    let pts: Vec<Point3> = (0..12)
        .map(|i| Point3::new(9.0 + 0.15 * i as f64, 2.0, -0.8, 0.5))
        .chain([Point3::new(30.0, 0.0, -1.5, 0.1)])
        .collect();
    fs::write(scenes.join("000.bin"), encode_points_bin(&pts)).unwrap();
    fs::write(
        scenes.join("000.txt"),
        format!("{}Truck 1 1 1 5 2 2 0\n", format_labels_txt(&[b])),
    )
    .unwrap();
    let out = dir.path().join("db.upgt");
    let o = fgt(&[
        "gtdb",
        "build",
        "--labeled-dir",
        p(&scenes),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("1 labels of unknown class skipped"));
    let db = decode_gt_database(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(db.len(), 1);
    assert_eq!(db.entries()[0].local_points.len(), 12);
    let o = fgt(&["gtdb", "inspect", p(&out)]);
    assert_eq!(stdout(&o), "entry,class,source_scene,points\n0,0,0,12\n");

    // a truncated points file fails the whole build and leaves no output
    let mut bytes = encode_points_bin(&pts);
    bytes.push(0);
    fs::write(scenes.join("001.bin"), bytes).unwrap();
    fs::write(scenes.join("001.txt"), "").unwrap();
    let out2 = dir.path().join("db2.upgt");
    let o = fgt(&[
        "gtdb",
        "build",
        "--labeled-dir",
        p(&scenes),
        "--out",
        p(&out2),
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("offset 208"));
    assert!(!out2.exists());
}

#[test]
fn simulate_is_reproducible_and_matches_split_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.txt");
    fs::write(&cfg, TINY).unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert_eq!(
        code(&fgt(&["simulate", "--config", p(&cfg), "--out", p(&a)])),
        0
    );
    assert_eq!(
        code(&fgt(&["simulate", "--config", p(&cfg), "--out", p(&b)])),
        0
    );
    let csv = fs::read_to_string(&a).unwrap();
    assert_eq!(csv, fs::read_to_string(&b).unwrap());
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    // two seeds, each with the pretrained row and one row per epoch
    assert_eq!(lines.len(), 1 + 2 * 3);
    assert!(lines[1].starts_with("11,fgt,0,bev,0.7,"));
    assert!(lines[6].starts_with("12,fgt,2,bev,0.7,"));

    let model = dir.path().join("model.upck");
    let payloads = dir.path().join("payloads");
    let split = dir.path().join("split.csv");
    let o = fgt(&[
        "server",
        "pretrain",
        "--config",
        p(&cfg),
        "--out",
        p(&model),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for shard in ["0", "1"] {
        let o = fgt(&[
            "client",
            "--config",
            p(&cfg),
            "--model",
            p(&model),
            "--out-dir",
            p(&payloads),
            "--shard",
            shard,
            "--shards",
            "2",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read_dir(&payloads).unwrap().count(), 4);
    let o = fgt(&[
        "server",
        "train",
        "--config",
        p(&cfg),
        "--model",
        p(&model),
        "--payloads",
        p(&payloads),
        "--out",
        p(&split),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let seed11: Vec<&str> = lines.iter().take(4).copied().collect();
    assert_eq!(
        fs::read_to_string(&split).unwrap(),
        seed11.join("\n") + "\n"
    );

    // a missing payload is a data error and leaves no CSV behind
    let first = fs::read_dir(&payloads)
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    fs::remove_file(first).unwrap();
    let broken = dir.path().join("broken.csv");
    let o = fgt(&[
        "server",
        "train",
        "--config",
        p(&cfg),
        "--model",
        p(&model),
        "--payloads",
        p(&payloads),
        "--out",
        p(&broken),
    ]);
    assert_eq!(code(&o), 1);
    assert!(!broken.exists());
}

#[test]
fn bad_config_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.txt");
    fs::write(&cfg, format!("{TINY}colour = red\n")).unwrap();
    let out = dir.path().join("m.csv");
    let o = fgt(&["simulate", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    let line = format!("line {}", TINY.lines().count() + 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains(&line));
    assert!(!out.exists());
}

#[test]
fn augment_analyze_writes_summary_and_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let (sum, heat) = (dir.path().join("s.csv"), dir.path().join("h.csv"));
    let o = fgt(&[
        "augment",
        "analyze",
        "--scenes",
        "2",
        "--sources",
        "2",
        "--seed",
        "7",
        "--out",
        p(&sum),
        "--heatmap",
        p(&heat),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = fs::read_to_string(&sum).unwrap();
    let rows: Vec<Vec<&str>> = s.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let names: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(names, ["gt", "rotation", "flip"]);
    let rmse: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(rmse[0] < rmse[1] && rmse[0] < rmse[2], "{s}");
    assert_eq!(rows[0][2], "0");
    let h = fs::read_to_string(&heat).unwrap();
    assert!(h.starts_with("policy,row,col,rmse\n"));
    assert!(h.lines().skip(1).all(|l| l.split(',').count() == 4));
}
