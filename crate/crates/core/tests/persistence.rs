use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pace_core::inference::infer;
use pace_core::io::{
    encode_f64, load_dataset, load_manifest, load_model, read_array_f64, save_dataset, save_model, SavedModel,
};
use pace_core::learning::fit;
use pace_core::synth::{make_color_dataset, sample_generative, separated_bank, ColorOptions, PerturbOptions};
use pace_core::{HeadParams, PaceError, TrainConfig};

#[test]
fn generative_dataset_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bank = separated_bank(3, 4, 1.0, 5.0, 0.5, &mut rng).unwrap();
    let head = HeadParams {
        eta: Array2::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0)),
        beta: Array1::zeros(3),
    };
    let opts = PerturbOptions {
        noise_sigma: 0.1,
        attention_jitter: 0.1,
    };
    let (data, _) = sample_generative(&bank, &head, 25, 6, Some(opts), &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&data, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, data);
    let manifest = load_manifest(dir.path()).unwrap();
    assert_eq!((manifest.m, manifest.j, manifest.d), (25, 6, 4));
    assert!(manifest.has_perturbed);
}

#[test]
fn array_file_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.bin");
    let bytes = encode_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    std::fs::write(&path, &bytes).unwrap();
    assert_eq!(&bytes[..8], b"PACEARR\0");
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
    assert_eq!(bytes.len(), 8 + 4 + 16 + 48);
    let (dims, data) = read_array_f64(&path).unwrap();
    assert_eq!(dims, vec![2, 3]);
    assert_eq!(data[5], 6.0);
}

#[test]
fn damaged_files_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (data, _) = make_color_dataset(10, ColorOptions::default(), &mut rng).unwrap();
    save_dataset(&data, dir.path()).unwrap();
    let emb = dir.path().join("embeddings.bin");
    let mut bytes = std::fs::read(&emb).unwrap();
    bytes[0] = b'X';
    std::fs::write(&emb, &bytes).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(PaceError::Format { .. })));

    let truncated = dir.path().join("t.bin");
    let good = encode_f64(&[4], &[1.0, 2.0, 3.0, 4.0]);
    std::fs::write(&truncated, &good[..good.len() - 3]).unwrap();
    assert!(matches!(read_array_f64(&truncated), Err(PaceError::Format { .. })));
}

#[test]
fn saved_model_gives_identical_inference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (data, _) = make_color_dataset(40, ColorOptions::default(), &mut rng).unwrap();
    let config = TrainConfig {
        k: 5,
        epochs: 3,
        ..TrainConfig::default()
    };
    let fitted = fit(&data, &config).unwrap();
    let model = SavedModel {
        bank: fitted.bank,
        head: fitted.head,
        config: config.clone(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    save_model(&model, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back.bank, model.bank);
    assert_eq!(back.head, model.head);
    for r in &data.records {
        let a = infer(r, &model.bank, &model.head, &config).unwrap();
        let b = infer(r, &back.bank, &back.head, &back.config).unwrap();
        assert_eq!(a.theta, b.theta);
    }
}
