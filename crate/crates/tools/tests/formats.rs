use std::fs;

use dml_core::embed::{synth_gaussian_classes, SynthSpec};
use dml_core::{EmbeddingSet, Matrix};
use dml_tools::io::{decode_binary, encode_binary, load_any, load_binary, load_csv, save_any, save_binary, save_csv};
use dml_tools::ToolError;
use proptest::prelude::*;

/// A 10,000-row CSV whose values are exactly representable in f32.
fn big_csv() -> String {
    let mut s = String::new();
    for i in 0..10_000u32 {
        let a = (i as f32 * 0.37).sin();
        let b = (i as f32 * 1.1).cos() * 100.0;
        let c = i as f32 / 7.0;
        // widened so that the decimal text is exactly the f32 value
        s.push_str(&format!("{},{},{},{}\n", i % 97, a as f64, b as f64, c as f64));
    }
    s
}

#[test]
fn ten_thousand_rows_round_trip_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("big.csv");
    fs::write(&csv, big_csv()).unwrap();
    let set = load_csv(&csv, false).unwrap();
    assert_eq!((set.len(), set.dim()), (10_000, 3));

    let bin = dir.path().join("big.emb1");
    save_binary(&set, &bin).unwrap();
    let back = load_binary(&bin).unwrap();
    assert_eq!(back, set);
    let again = dir.path().join("again.emb1");
    save_binary(&back, &again).unwrap();
    assert_eq!(fs::read(&bin).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn csv_round_trip_is_exact_in_f64() {
    let dir = tempfile::tempdir().unwrap();
    let set = synth_gaussian_classes(&SynthSpec::new(3, 4, 5, 9)).unwrap();
    let path = dir.path().join("s.csv");
    save_csv(&set, &path).unwrap();
    assert_eq!(load_csv(&path, false).unwrap(), set);
}

#[test]
fn dispatch_on_extension() {
    let dir = tempfile::tempdir().unwrap();
    let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
    let set = EmbeddingSet::new(m, vec![0, 1]).unwrap();
    for name in ["a.csv", "a.emb1", "a.bin"] {
        let p = dir.path().join(name);
        save_any(&set, &p).unwrap();
        assert_eq!(load_any(&p, false).unwrap(), set, "{name}");
    }
}

#[test]
fn file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.emb1");
    fs::write(&p, b"XXXX\x01\x00\x00\x00").unwrap();
    assert!(matches!(load_binary(&p), Err(ToolError::Format { .. })));

    let set = synth_gaussian_classes(&SynthSpec::new(2, 3, 2, 1)).unwrap();
    let bytes = encode_binary(&set).unwrap();
    fs::write(&p, &bytes[..20]).unwrap();
    assert!(matches!(load_binary(&p), Err(ToolError::Truncated(_))));

    let empty = dir.path().join("e.csv");
    fs::write(&empty, "").unwrap();
    assert!(matches!(load_csv(&empty, false), Err(ToolError::EmptyInput)));
    assert!(matches!(load_csv(dir.path().join("missing.csv"), false), Err(ToolError::Io(_))));
}

#[test]
fn labels_beyond_name_table_are_rejected() {
    let set = EmbeddingSet::with_names(Matrix::from_rows(&[[1.0]]).unwrap(), vec![0], Some(vec!["a".into()])).unwrap();
    let mut bytes = encode_binary(&set).unwrap();
    // label sits right after the single f32 value
    bytes[24] = 5;
    assert!(matches!(decode_binary(&bytes), Err(ToolError::Core(_))));
}

proptest! {
    #[test]
    fn binary_round_trip(
        rows in 1usize..20,
        dim in 1usize..6,
        seed in any::<u64>(),
        names in prop::option::of(prop::collection::vec("[a-zé ]{0,8}", 4)),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * dim).map(|_| (rng.random::<f32>() * 20.0 - 10.0) as f64).collect();
        let labels: Vec<u32> = (0..rows).map(|_| rng.random_range(0..4)).collect();
        let set = EmbeddingSet::with_names(Matrix::from_vec(rows, dim, data).unwrap(), labels, names).unwrap();
        let bytes = encode_binary(&set).unwrap();
        prop_assert_eq!(decode_binary(&bytes).unwrap(), set);
        for cut in [0usize, 3, 10, bytes.len() - 1] {
            prop_assert!(decode_binary(&bytes[..cut]).is_err());
        }
    }
}
