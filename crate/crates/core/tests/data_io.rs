use std::fs;
use std::path::Path;

use samplenet::data::{gen_multimodal_toy, gen_unimodal_toy, load_csv, TOY_NOISE_STD};
use samplenet::diffmath::{Distribution, Rng};
use samplenet::Error;
use statrs::distribution::{ContinuousCDF, Normal};

fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn targets(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

#[test]
fn csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_unimodal_toy(50, 3, TOY_NOISE_STD, &mut Rng::new(1)).unwrap();
    let p = dir.path().join("toy.csv");
    ds.write_csv(&p).unwrap();
    let back = load_csv(&p, &targets(&["y"])).unwrap();
    assert_eq!(back.x(), ds.x());
    assert_eq!(back.y(), ds.y());
}

#[test]
fn targets_can_be_any_columns() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "m.csv", "a,t1,b,t2\n1,2,3,4\n5,6,7,8\n");
    let ds = load_csv(&p, &targets(&["t2", "t1"])).unwrap();
    assert_eq!(ds.x().data(), &[1.0, 3.0, 5.0, 7.0]);
    assert_eq!(ds.y().data(), &[4.0, 2.0, 8.0, 6.0]);
}

#[test]
fn bad_cell_reports_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "bad.csv", "x,y\n1,2\n3,oops\n");
    match load_csv(&p, &targets(&["y"])) {
        Err(Error::Parse { row, column, .. }) => {
            assert_eq!(row, 3);
            assert_eq!(column, "y");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
    let p = write(dir.path(), "nan.csv", "x,y\nNaN,2\n");
    assert!(matches!(load_csv(&p, &targets(&["y"])), Err(Error::Parse { row: 2, .. })));
}

#[test]
fn malformed_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let header_only = write(dir.path(), "h.csv", "x,y\n");
    assert!(matches!(load_csv(&header_only, &targets(&["y"])), Err(Error::Data(_))));
    let ragged = write(dir.path(), "r.csv", "x,y\n1,2\n3\n");
    assert!(matches!(load_csv(&ragged, &targets(&["y"])), Err(Error::Parse { row: 3, .. })));
    let no_target = write(dir.path(), "t.csv", "x,y\n1,2\n");
    assert!(matches!(load_csv(&no_target, &targets(&["z"])), Err(Error::Parse { .. })));
    let only_targets = write(dir.path(), "o.csv", "y\n1\n");
    assert!(matches!(load_csv(&only_targets, &targets(&["y"])), Err(Error::Data(_))));
    assert!(load_csv(&dir.path().join("missing.csv"), &targets(&["y"])).is_err());
}

#[test]
fn multimodal_toy_survives_csv() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_multimodal_toy(30, TOY_NOISE_STD, &mut Rng::new(2)).unwrap();
    let p = dir.path().join("mm.csv");
    ds.write_csv(&p).unwrap();
    assert_eq!(load_csv(&p, &targets(&["y"])).unwrap().y(), ds.y());
}

#[test]
fn normal_draws_have_gaussian_tails() {
    let n = 1_000_000;
    let z = Rng::new(99).draw(Distribution::StandardNormal, &[n]).unwrap();
    let reference = Normal::standard();
    for t in [1.0, 2.0, 3.0] {
        let expected = 2.0 * reference.sf(t);
        let got = z.data().iter().filter(|v| v.abs() > t).count() as f64 / n as f64;
        let se = (expected * (1.0 - expected) / n as f64).sqrt();
        assert!((got - expected).abs() < 5.0 * se, "P(|z| > {t}): {got} vs {expected}");
    }
    let u = Rng::new(98).draw(Distribution::Uniform01, &[n]).unwrap();
    let mean = u.data().iter().sum::<f64>() / n as f64;
    assert!((mean - 0.5).abs() < 5.0 * (1.0 / 12.0 / n as f64).sqrt());
}
