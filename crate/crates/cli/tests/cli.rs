use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn radepth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radepth"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dir_listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for entry in walk(dir) {
        let rel = entry.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
        files.push((rel, fs::read(&entry).unwrap()));
    }
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn synth_gen_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = radepth(&["synth-gen", "--out", s(out), "--scenes", "1", "--seed", "7"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(summary["scenes"], 1);
    }
    let files = dir_listing(&a);
    let names: Vec<&str> = files.iter().map(|f| f.0.as_str()).collect();
    for expected in ["image.pgm", "flow.sdm2", "gt.sdm1", "lidar.txt", "radar.txt", "meta.json"] {
        assert!(names.contains(&format!("scene_0000/{expected}").as_str()), "{names:?}");
    }
    assert_eq!(files, dir_listing(&b));

    let c = tmp.path().join("c");
    assert!(radepth(&["synth-gen", "--out", s(&c), "--scenes", "1", "--seed", "8"]).status.success());
    let hash = |d: &Path| -> serde_json::Value {
        let meta: serde_json::Value =
            serde_json::from_slice(&fs::read(d.join("scene_0000/meta.json")).unwrap()).unwrap();
        meta["scene_hash"].clone()
    };
    assert_ne!(hash(&a), hash(&c));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bogus = tmp.path().join("bogus.sdm1");
    fs::write(&bogus, b"XXXX\x01\0\0\0\x01\0\0\0\0\0\0\0").unwrap();
    let o = radepth(&["render", "--depth", s(&bogus), "--out", s(&tmp.path().join("x.pgm"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus.sdm1"));
    assert!(o.stdout.is_empty());

    let missing = tmp.path().join("missing.sdm1");
    let o = radepth(&["render", "--depth", s(&missing), "--out", s(&tmp.path().join("x.pgm"))]);
    assert_eq!(o.status.code(), Some(2));

    let blocker = tmp.path().join("file");
    fs::write(&blocker, b"").unwrap();
    let o = radepth(&["synth-gen", "--out", s(&blocker.join("sub")), "--scenes", "1", "--seed", "0"]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let o = radepth(&["train", "--data", s(tmp.path()), "--config", s(&cfg), "--out", s(&tmp.path().join("c"))]);
    assert_eq!(o.status.code(), Some(4));

    let o = radepth(&["synth-gen", "--out", s(tmp.path()), "--scenes", "1", "--noise-profile", "loud"]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(radepth(&["no-such-command"]).status.code(), Some(4));
}

#[test]
fn eval_of_reference_against_itself_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(radepth(&["synth-gen", "--out", s(&data), "--scenes", "1", "--seed", "3"]).status.success());
    let gt = data.join("scene_0000/gt.sdm1");
    let report = tmp.path().join("report.json");
    let o = radepth(&["eval", "--pred", s(&gt), "--lm", s(&gt), "--json", s(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!((r["mae"].as_f64(), r["rel"].as_f64(), r["rmse"].as_f64()), (Some(0.0), Some(0.0), Some(0.0)));
    // the scene directory form reads lidar.txt
    let o = radepth(&["eval", "--pred", s(&gt), "--lm", s(&data.join("scene_0000"))]);
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(r["evaluated_pixel_count"].as_u64().unwrap() > 1000);
    assert!(r["mae"].as_f64().unwrap() < 0.1);
}

/// synth-gen, train, infer, complete, eval and render chained on a tiny run.
#[test]
fn five_command_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(radepth(&["synth-gen", "--out", s(&data), "--scenes", "2", "--seed", "0"]).status.success());
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "epochs = 1\nlr = 1e-3\nseed = 4\n").unwrap();
    let ckpt = tmp.path().join("model.ckpt");
    let o = radepth(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ckpt), "--val", s(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log: serde_json::Value = serde_json::from_slice(o.stdout.split(|&b| b == b'\n').next().unwrap()).unwrap();
    assert_eq!(log["epoch"], 1);
    assert!(log["val_auc"].is_number());

    let scene = data.join("scene_0000");
    let em = tmp.path().join("em.sdm1");
    let o = radepth(&["infer", "--ckpt", s(&ckpt), "--scene", s(&scene), "--out", s(&em), "--tau", "0.0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dense = tmp.path().join("dense.sdm1");
    let o = radepth(&[
        "complete",
        "--em",
        s(&em),
        "--image",
        s(&scene.join("image.pgm")),
        "--out",
        s(&dense),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = radepth(&["eval", "--pred", s(&dense), "--lm", s(&scene)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["mae"].as_f64().unwrap() > 0.0);
    let png = tmp.path().join("dense.ppm");
    assert!(radepth(&["render", "--depth", s(&em), "--out", s(&png)]).status.success());
    assert!(fs::read(&png).unwrap().starts_with(b"P6\n400 192\n255\n"));

    // an exclusive threshold of 1 admits nothing
    let empty = tmp.path().join("empty.sdm1");
    let o = radepth(&["infer", "--ckpt", s(&ckpt), "--scene", s(&scene), "--out", s(&empty), "--tau", "1.0"]);
    assert!(o.status.success());
    let bytes = fs::read(&empty).unwrap();
    assert_eq!(bytes.len(), 12 + 4 * 400 * 192);
    assert!(bytes[12..].chunks_exact(4).all(|c| f32::from_le_bytes(c.try_into().unwrap()) <= 0.0));
    let o = radepth(&["infer", "--ckpt", s(&ckpt), "--scene", s(&scene), "--out", s(&empty), "--tau", "1.5"]);
    assert_eq!(o.status.code(), Some(4));
    let o = radepth(&["infer", "--ckpt", s(&cfg), "--scene", s(&scene), "--out", s(&empty)]);
    assert_eq!(o.status.code(), Some(3));
}
