mod common;

use common::{duoflow, ok, read, s, Pipeline};
use duoflow::world::dataset::{Dataset, DatasetKind};
use duoflow::world::{NULL_TOKEN, TEXT_TOKENS};
use duoflow_cli::commands::sample::parse_assets;
use duoflow_cli::CliError;
use tempfile::tempdir;

fn report(dir: &std::path::Path) -> serde_json::Value {
    serde_json::from_slice(&read(&dir.join("report.json"))).unwrap()
}

#[test]
fn same_seed_gives_identical_files() {
    let d = tempdir().unwrap();
    let p = Pipeline::build(d.path());
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for out in [&a, &b] {
        ok(&["sample", "--config", p.config(), "--ckpt", s(&p.joint), "--regime", "joint", "--data", s(&p.data), "--assets", "50-55", "--view", "bottom", "--out", s(out), "--force"]);
    }
    for f in ["manifest.json", "payload.bin", "samples.csv"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    // Rerunning into the same directory reproduces every file, run.json included.
    let before: Vec<Vec<u8>> = ["manifest.json", "payload.bin", "samples.csv", "run.json"].iter().map(|f| read(&a.join(f))).collect();
    ok(&["sample", "--config", p.config(), "--ckpt", s(&p.joint), "--regime", "joint", "--data", s(&p.data), "--assets", "50-55", "--view", "bottom", "--out", s(&a), "--force"]);
    let after: Vec<Vec<u8>> = ["manifest.json", "payload.bin", "samples.csv", "run.json"].iter().map(|f| read(&a.join(f))).collect();
    assert!(before == after);
    let c = d.path().join("c");
    ok(&["sample", "--config", p.config(), "--seed", "1", "--ckpt", s(&p.joint), "--regime", "joint", "--data", s(&p.data), "--assets", "50-55", "--view", "bottom", "--out", s(&c)]);
    assert_ne!(read(&a.join("payload.bin")), read(&c.join("payload.bin")));

    let ds = Dataset::read(&a).unwrap();
    assert_eq!(ds.manifest.kind, DatasetKind::Generated);
    assert_eq!(ds.manifest.asset_ids, Some((50..=55).collect()));
    let csv = String::from_utf8(read(&a.join("samples.csv"))).unwrap();
    assert!(csv.starts_with("index,asset_id,regime,view,attrs,occupied\n0,50,joint,bottom,"), "{csv}");
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn unconditional_needs_no_condition_flags() {
    let d = tempdir().unwrap();
    let p = Pipeline::build(d.path());
    let out = d.path().join("u");
    ok(&["sample", "--config", p.config(), "--ckpt", s(&p.joint), "--regime", "uncond", "--count", "3", "--out", s(&out)]);
    let ds = Dataset::read(&out).unwrap();
    assert_eq!(ds.len(), 3);
    assert!(ds.records.iter().all(|r| r.tokens == [NULL_TOKEN; TEXT_TOKENS]));
    assert_eq!(ds.manifest.asset_ids, None);
}

#[test]
fn one_euler_step_completes() {
    let d = tempdir().unwrap();
    let p = Pipeline::build(d.path());
    let out = d.path().join("k1");
    let log = ok(&["sample", "--config", p.config(), "--ckpt", s(&p.joint), "--regime", "text", "--attrs", "box,large,red,blue,striped", "--steps", "1", "--count", "2", "--out", s(&out)]);
    assert!(log.contains("1 steps"), "{log}");
    let ds = Dataset::read(&out).unwrap();
    assert_eq!(ds.len(), 2);
    let attrs = duoflow::world::Attributes::parse("box,large,red,blue,striped").unwrap();
    assert!(ds.records.iter().all(|r| r.attrs() == Some(attrs)));
}

#[test]
fn missing_conditions_are_config_errors() {
    let d = tempdir().unwrap();
    let p = Pipeline::build(d.path());
    let c = p.config();
    let ck = s(&p.joint);
    let x = d.path().join("x");
    let out = s(&x);
    let cases: [&[&str]; 4] = [
        &["sample", "--config", c, "--ckpt", ck, "--regime", "joint", "--out", out],
        &["sample", "--config", c, "--ckpt", ck, "--regime", "joint", "--attrs", "box,large,red,blue,striped", "--out", out],
        &["sample", "--config", c, "--ckpt", ck, "--regime", "text", "--out", out],
        &["sample", "--config", c, "--ckpt", ck, "--regime", "text", "--attrs", "box,huge,red,blue,striped", "--out", out],
    ];
    for args in cases {
        let err = duoflow(args).unwrap_err();
        assert!(matches!(err, CliError::Config(_)), "{args:?}: {err}");
    }
    let err = duoflow(&["sample", "--config", c, "--ckpt", s(&p.img), "--regime", "uncond", "--out", out, "--force"]).unwrap_err();
    assert!(matches!(err, CliError::Data(_)), "{err}");
}

#[test]
fn asset_lists_parse() {
    let d = tempdir().unwrap();
    let data = d.path().join("data");
    ok(&["datagen", "--count", "20", "--out", s(&data)]);
    let ds = Dataset::read(&data).unwrap();
    assert_eq!(parse_assets("3, 7,10-12", &ds).unwrap(), vec![3, 7, 10, 11, 12]);
    assert_eq!(parse_assets("test", &ds).unwrap(), vec![18, 19]);
    assert_eq!(parse_assets("all", &ds).unwrap().len(), 20);
    for bad in ["20", "3,3", "5-2", "x", "1-", ""] {
        assert!(matches!(parse_assets(bad, &ds), Err(CliError::Config(_))), "{bad:?}");
    }
}

#[test]
fn self_evaluation_is_perfect() {
    let d = tempdir().unwrap();
    let data = d.path().join("data");
    ok(&["datagen", "--count", "40", "--out", s(&data)]);
    let out = d.path().join("ev");
    ok(&["eval", "--gt", s(&data), "--generated", s(&data), "--out", s(&out), "--export-features"]);
    let r = report(&out);
    assert_eq!(r["objects"], 40);
    assert_eq!(r["hungarian"].as_f64().unwrap(), 1.0);
    assert!(r["fd"].as_f64().unwrap() < 1e-9);
    let csv = String::from_utf8(read(&out.join("report.csv"))).unwrap();
    assert!(csv.starts_with("objects,hungarian,fd,"), "{csv}");

    // Exported generated features evaluate like the dataset they came from.
    let again = d.path().join("ev2");
    ok(&["eval", "--gt", s(&data), "--generated", s(&out.join("features_generated")), "--out", s(&again)]);
    assert_eq!(report(&again)["hungarian"], r["hungarian"]);
    assert_eq!(report(&again)["fd"], r["fd"]);
}

/// Records of `gt` relabelled so record `k` claims to be asset `ids[k]`.
fn relabelled(gt: &Dataset, ids: Vec<usize>) -> Dataset {
    let records = gt.records.iter().map(|r| r.clone()).collect();
    Dataset::from_records(DatasetKind::Generated, 0, gt.manifest.grid_resolution, gt.manifest.image_size, records, 0, Some(ids)).unwrap()
}

#[test]
fn shuffled_pairing_scores_lower() {
    let d = tempdir().unwrap();
    let data = d.path().join("data");
    ok(&["datagen", "--count", "100", "--seed", "11", "--out", s(&data)]);
    let gt = Dataset::read(&data).unwrap();
    let shuffled = d.path().join("shuffled");
    relabelled(&gt, (0..100).map(|i| (i + 1) % 100).collect()).write(&shuffled).unwrap();
    let (a, b) = (d.path().join("self"), d.path().join("shuf"));
    ok(&["eval", "--gt", s(&data), "--generated", s(&data), "--out", s(&a)]);
    ok(&["eval", "--gt", s(&data), "--generated", s(&shuffled), "--out", s(&b)]);
    let (hs, hb) = (report(&a)["hungarian"].as_f64().unwrap(), report(&b)["hungarian"].as_f64().unwrap());
    assert!(hb < hs, "shuffled {hb} vs self {hs}");
    // Same multiset of assets, so FD is unchanged up to summation order.
    assert!(report(&b)["fd"].as_f64().unwrap() < 1e-9);

    // The identity relabelling is the self pairing.
    let ordered = d.path().join("ordered");
    relabelled(&gt, (0..100).collect()).write(&ordered).unwrap();
    let c = d.path().join("ord");
    ok(&["eval", "--gt", s(&data), "--generated", s(&ordered), "--out", s(&c)]);
    assert_eq!(report(&c)["hungarian"].as_f64().unwrap(), hs);
}

#[test]
fn missing_generated_asset_is_named() {
    let d = tempdir().unwrap();
    let data = d.path().join("data");
    ok(&["datagen", "--count", "10", "--out", s(&data)]);
    let gt = Dataset::read(&data).unwrap();
    let gen = d.path().join("gen");
    let mut ids: Vec<usize> = (0..10).collect();
    ids[4] = 42;
    relabelled(&gt, ids).write(&gen).unwrap();
    let err = duoflow(&["eval", "--gt", s(&data), "--generated", s(&gen), "--out", s(&d.path().join("ev"))]).unwrap_err();
    assert!(matches!(err, CliError::Data(_)));
    assert!(err.to_string().contains("no generated sample for asset 4"), "{err}");

    // The test split is assets 9..10; ten generated samples is a count mismatch.
    let err = duoflow(&["eval", "--gt", s(&data), "--generated", s(&data), "--split", "test", "--out", s(&d.path().join("ev2"))]).unwrap_err();
    assert!(err.to_string().contains("count mismatch"), "{err}");
}

#[test]
fn eval_of_samples_pairs_by_asset_id() {
    let d = tempdir().unwrap();
    let p = Pipeline::build(d.path());
    let samples = d.path().join("s");
    ok(&["sample", "--config", p.config(), "--ckpt", s(&p.joint), "--regime", "image", "--data", s(&p.data), "--assets", "test", "--out", s(&samples)]);
    let out = d.path().join("ev");
    ok(&["eval", "--gt", s(&p.data), "--generated", s(&samples), "--split", "test", "--out", s(&out)]);
    let r = report(&out);
    assert_eq!(r["objects"], 6);
    assert_eq!(r["meta"]["pairing"], "asset id");
    let h = r["hungarian"].as_f64().unwrap();
    assert!(h.is_finite() && h <= 1.0);
}

#[test]
fn diagnose_writes_four_rows() {
    let d = tempdir().unwrap();
    let p = Pipeline::build(d.path());
    let out = d.path().join("diag");
    ok(&["diagnose", "--config", p.config(), "--ckpt", s(&p.joint), "--data", s(&p.data), "--assets", "4", "--out", s(&out)]);
    let mut rdr = csv::Reader::from_path(out.join("diagnose.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["condition", "hungarian", "fd"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let names: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(names, ["image_only_front", "image_only_bottom", "text_only", "joint_bottom_text"]);
    for r in &rows {
        assert!(r[1].parse::<f64>().unwrap().is_finite() && r[2].parse::<f64>().unwrap() >= 0.0);
        let ds = Dataset::read(&out.join("samples").join(&r[0])).unwrap();
        assert_eq!(ds.manifest.asset_ids, Some(vec![54, 55, 56, 57]));
    }

    let again = d.path().join("diag2");
    ok(&["diagnose", "--config", p.config(), "--ckpt", s(&p.joint), "--data", s(&p.data), "--assets", "4", "--out", s(&again)]);
    assert_eq!(read(&out.join("diagnose.csv")), read(&again.join("diagnose.csv")));
}

#[test]
fn diagnose_checks_the_training_dataset() {
    let d = tempdir().unwrap();
    let p = Pipeline::build(d.path());
    let other = d.path().join("other");
    ok(&["datagen", "--config", p.config(), "--seed", "4", "--out", s(&other)]);
    let out = d.path().join("diag");
    let err = duoflow(&["diagnose", "--config", p.config(), "--ckpt", s(&p.joint), "--data", s(&other), "--assets", "2", "--out", s(&out)]).unwrap_err();
    assert!(matches!(err, CliError::Data(_)), "{err}");
    ok(&["diagnose", "--config", p.config(), "--ckpt", s(&p.joint), "--data", s(&other), "--assets", "2", "--out", s(&out), "--force", "--allow-mismatch"]);
}
