//! A small checkpoint and its predictions, recorded once. Any change to
//! initialization, serialization or the forward pass shows up here.
//!
//! FINEAS_BLESS=1 cargo test --test golden   rewrites the fixtures.

use std::path::{Path, PathBuf};

use fineas::models::{Batch, EncoderSpec, FineasModel, Model, Pooling};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn model() -> Model {
    let mut spec = EncoderSpec::new(16, 8, 1, 2);
    spec.max_len = 8;
    Model::Fineas(FineasModel::new(spec, Pooling::Mean, false, 7).unwrap())
}

fn batch() -> Batch {
    Batch::from_rows(&[vec![2, 5, 6, 3], vec![2, 9, 3], vec![2, 4, 15, 11, 12, 3]]).unwrap()
}

fn render(pred: &[f64]) -> String {
    pred.iter().map(|p| format!("{p:?}\n")).collect()
}

#[test]
fn checkpoint_and_predictions_match_recorded() {
    let m = model();
    let pred = render(&m.predict(&batch()).unwrap());
    let ckpt = fixture("golden_fineas.ckpt");
    let golden = fixture("golden_fineas_predictions.txt");
    if std::env::var_os("FINEAS_BLESS").is_some() {
        m.save(&ckpt, &[]).unwrap();
        std::fs::write(&golden, &pred).unwrap();
    }

    let dir = tempfile::tempdir().unwrap();
    let fresh = dir.path().join("m.ckpt");
    m.save(&fresh, &[]).unwrap();
    assert_eq!(std::fs::read(&fresh).unwrap(), std::fs::read(&ckpt).unwrap(), "checkpoint bytes");
    // GEMM kernels differ across CPUs in the last bits; values must agree closely
    let recorded: Vec<f64> = std::fs::read_to_string(&golden)
        .unwrap()
        .lines()
        .map(|l| l.parse().unwrap())
        .collect();
    let (loaded, _) = Model::load(&ckpt, None).unwrap();
    let now = loaded.predict(&batch()).unwrap();
    assert_eq!(now.len(), recorded.len());
    for (a, b) in now.iter().zip(&recorded) {
        assert!((a - b).abs() <= 1e-12, "{a} vs recorded {b}");
    }
}
