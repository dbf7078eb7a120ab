//! End-to-end behaviour of the `ocmae` binary: dataset generation, training,
//! evaluation, visualization and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn ocmae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ocmae")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = ocmae(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn digest(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), Sha256::digest(fs::read(e.path()).unwrap()).to_vec())
        })
        .collect();
    files.sort();
    files
}

/// A two-epoch model small enough for a test, trained on `data`.
const TINY: &str = "preset = desk
model.d_enc = 16
model.d_dec = 16
model.enc_depth = 1
model.dec_depth = 1
model.heads_enc = 2
model.heads_dec = 2
schedule.warmup_epochs = 1
schedule.total_epochs = 2
schedule.cooldown_epochs = 0
train.batch_size = 8
train.eval_every = 1
data.split = 0.8
";

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_writes_count_pairs_and_is_byte_identical_on_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen-data", "--count", "100", "--out", path(&a)]);
    ok(&["gen-data", "--count", "100", "--out", path(&b)]);
    let files = digest(&a);
    assert_eq!(files.len(), 201);
    assert_eq!(files, digest(&b));
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 100);
    // a different seed changes the scenes
    let c = tmp.path().join("c");
    ok(&["gen-data", "--count", "100", "--out", path(&c), "--seed", "9"]);
    assert_ne!(digest(&c), files);
}

#[test]
fn gen_data_count_zero_writes_an_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--count", "0", "--out", path(tmp.path())]);
    assert_eq!(fs::read_to_string(tmp.path().join("manifest.txt")).unwrap(), "");
}

#[test]
fn configuration_errors_exit_2_and_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ocmae(&["train", "--override", "model.kk=3", "--out", path(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("model.kk"), "{}", stderr(&out));
    let out = ocmae(&["gen-data", "--count", "1", "--out", path(tmp.path()), "--override", "scene.object_count=5,1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_3_and_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("no-such-data");
    let out = ocmae(&["train", "--data", path(&missing), "--out", path(&tmp.path().join("run"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains(path(&missing)), "{}", stderr(&out));
}

#[test]
fn train_eval_and_viz_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    let cfg = tmp.path().join("tiny.txt");
    fs::write(&cfg, TINY).unwrap();
    ok(&["gen-data", "--count", "40", "--out", path(&data)]);
    let train = ok(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&run)]);
    let final_json: serde_json::Value = serde_json::from_slice(&train.stdout).unwrap();
    assert_eq!(final_json["n_images"], 8);
    let log = fs::read_to_string(run.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let ck = run.join("final.ckpt");
    let e1 = ok(&["eval", "--checkpoint", path(&ck), "--data", path(&data)]);
    let e2 = ok(&["eval", "--checkpoint", path(&ck), "--data", path(&data), "--out", path(&tmp.path().join("m.json"))]);
    assert_eq!(e1.stdout, e2.stdout);
    assert_eq!(e1.stdout, train.stdout);
    assert_eq!(fs::read(tmp.path().join("m.json")).unwrap(), e1.stdout);
    let json: serde_json::Value = serde_json::from_slice(&e1.stdout).unwrap();
    for key in ["ari", "ari_fg", "miou", "n_images"] {
        assert!(json.get(key).is_some(), "{key}");
    }

    // the checkpoint's K disagrees with the requested one
    let out = ocmae(&["eval", "--checkpoint", path(&ck), "--config", path(&cfg), "--override", "model.k=5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("model.k"), "{}", stderr(&out));

    let viz = tmp.path().join("viz");
    ok(&["viz", "--checkpoint", path(&ck), "--data", path(&data), "--n", "2", "--out", path(&viz)]);
    let mut names: Vec<String> = fs::read_dir(&viz).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["grid_000000.png", "grid_000001.png"]);
    let decoder = png::Decoder::new(fs::File::open(viz.join("grid_000000.png")).unwrap());
    let info = decoder.read_info().unwrap().info().clone();
    assert_eq!((info.width, info.height), (4 * 35, 6 * 35));
    // more grids than eval images are clamped; zero is rejected
    let many = tmp.path().join("many");
    ok(&["viz", "--checkpoint", path(&ck), "--data", path(&data), "--n", "50", "--out", path(&many)]);
    assert_eq!(fs::read_dir(&many).unwrap().count(), 8);
    let out = ocmae(&["viz", "--checkpoint", path(&ck), "--data", path(&data), "--n", "0", "--out", path(&many)]);
    assert_eq!(out.status.code(), Some(2));

    let corrupt = tmp.path().join("corrupt.ckpt");
    fs::write(&corrupt, b"OCMAE-CKPT 1\nepoch = x\n").unwrap();
    assert_eq!(ocmae(&["eval", "--checkpoint", path(&corrupt), "--data", path(&data)]).status.code(), Some(3));
}

#[test]
fn ablation_override_zeroes_the_logged_term() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    let cfg = tmp.path().join("tiny.txt");
    fs::write(&cfg, TINY).unwrap();
    ok(&["gen-data", "--count", "20", "--out", path(&data)]);
    ok(&[
        "train",
        "--config",
        path(&cfg),
        "--override",
        "ablation.no_pixel_entropy=true",
        "--override",
        "ablation.no_masking=true",
        "--data",
        path(&data),
        "--out",
        path(&run),
    ]);
    let log = fs::read_to_string(run.join("log.csv")).unwrap();
    for row in log.lines().skip(1) {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[3], "0", "{row}");
        assert_eq!(cells[6], "0", "{row}");
    }
    assert!(fs::read_to_string(run.join("config.txt")).unwrap().contains("ablation.no_pixel_entropy = true"));
}
