use hvq_core::checkpoint::{load_checkpoint, read_checkpoint_manifest, save_checkpoint};
use hvq_core::corpus::{synthesize, CorpusConfig};
use hvq_core::hierarchy::{
    train_module, CondOverride, ModuleSpec, Scale, TrainingConfig, Utterance, VqModule,
};
use hvq_core::networks::{DecoderSpec, EncoderSpec};
use hvq_core::nn::Parameterized;
use hvq_core::signal::resample;
use hvq_core::Error;

fn small_module(scale: Scale) -> VqModule {
    let mut spec = ModuleSpec::toy(scale);
    spec.encoder = EncoderSpec {
        n_blocks: 3,
        block_channels: vec![4, 4, 8],
        ..spec.encoder
    };
    spec.decoder = DecoderSpec {
        n_layers: 3,
        channels: 8,
        skip_channels: 8,
        dilation_cycle: vec![1, 2, 4],
    };
    VqModule::new(spec, &[0, 1], 1).unwrap()
}

fn corpus() -> Vec<Utterance> {
    synthesize(&CorpusConfig {
        singers: 2,
        songs_per_singer: 1,
        duration_s: 0.25,
        ..Default::default()
    })
    .unwrap()
    .into_iter()
    .map(|u| u.utterance)
    .collect()
}

fn cfg(iterations: usize) -> TrainingConfig {
    TrainingConfig {
        frame_length: 256,
        batch_size: 2,
        iterations,
        learning_rate: 1e-3,
        ..Default::default()
    }
}

#[test]
fn round_trip_reproduces_parameters_and_outputs_bit_exactly() {
    let utts = corpus();
    for scale in [Scale::Bottom, Scale::Upper] {
        let mut m = small_module(scale);
        train_module(&mut m, &utts, &cfg(3), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&path, &m, serde_json::json!({"note": "test"})).unwrap();
        let (back, manifest) = load_checkpoint(&path).unwrap();
        assert_eq!(manifest.iterations, 3);
        assert_eq!(manifest.config["note"], "test");
        assert_eq!(back.iterations, m.iterations);
        for ((na, pa), (nb, pb)) in m.named_params().into_iter().zip(back.named_params()) {
            assert_eq!(na, nb);
            assert_eq!(pa.shape, pb.shape);
            assert!(
                pa.value
                    .iter()
                    .zip(&pb.value)
                    .all(|(a, b)| a.to_bits() == b.to_bits()),
                "{na}"
            );
        }
        let w = &utts[0].audio;
        let ov = CondOverride {
            seed: 4,
            low_res: (scale == Scale::Upper).then(|| resample(w, 4000).unwrap()),
            ..Default::default()
        };
        let before = m.reconstruct(w, 0, &ov).unwrap();
        let after = back.reconstruct(w, 0, &ov).unwrap();
        assert_eq!(before.samples(), after.samples());
    }
}

#[test]
fn saving_twice_replaces_the_checkpoint_atomically() {
    let utts = corpus();
    let mut m = small_module(Scale::Bottom);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    train_module(&mut m, &utts, &cfg(1), None).unwrap();
    save_checkpoint(&path, &m, serde_json::Value::Null).unwrap();
    train_module(&mut m, &utts, &cfg(1), None).unwrap();
    save_checkpoint(&path, &m, serde_json::Value::Null).unwrap();
    assert_eq!(read_checkpoint_manifest(&path).unwrap().iterations, 2);
    let leftovers: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(leftovers, vec![std::ffi::OsString::from("ckpt")]);
}

#[test]
fn missing_or_corrupt_checkpoints_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_checkpoint(&dir.path().join("absent")).unwrap_err();
    assert_eq!(err.category(), "checkpoint");

    let m = small_module(Scale::Bottom);
    let path = dir.path().join("ckpt");
    save_checkpoint(&path, &m, serde_json::Value::Null).unwrap();
    let manifest = read_checkpoint_manifest(&path).unwrap();
    let victim = path.join(&manifest.tensors[0].file);
    let mut bytes = std::fs::read(&victim).unwrap();
    bytes.pop();
    std::fs::write(&victim, bytes).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(Error::Checkpoint { .. })
    ));
}
