//! Finite-difference check of the full module gradient on a miniature model.

use hvq_core::corpus::{synthesize, CorpusConfig};
use hvq_core::hierarchy::{ModuleSpec, Scale, TrainingItem, VqModule};
use hvq_core::networks::{DecoderSpec, EncoderSpec, FeatureEncoderSpec};
use hvq_core::nn::Parameterized;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FRAME: usize = 64;
const BETA: f64 = 0.25;

fn mini_spec(scale: Scale) -> ModuleSpec {
    let (rate, low) = match scale {
        Scale::Bottom => (4000, None),
        Scale::Upper => (8000, Some(4000)),
    };
    ModuleSpec {
        scale,
        sample_rate_hz: rate,
        encoder: EncoderSpec {
            n_blocks: 2,
            in_rate_hz: rate,
            latent_dim: 4,
            block_channels: vec![4, 6],
        },
        decoder: DecoderSpec {
            n_layers: 4,
            channels: 8,
            skip_channels: 8,
            dilation_cycle: vec![1, 2],
        },
        codebook_size: 6,
        pitch: FeatureEncoderSpec { out_dim: 3 },
        loudness: FeatureEncoderSpec { out_dim: 3 },
        singer_dim: 3,
        low_res_rate_hz: low,
    }
}

struct Setup {
    module: VqModule,
    items: Vec<TrainingItem>,
    frames: Vec<(usize, usize)>,
    noise: Vec<Vec<f64>>,
}

fn setup(scale: Scale) -> Setup {
    let corpus = synthesize(&CorpusConfig {
        singers: 2,
        songs_per_singer: 1,
        duration_s: 0.2,
        ..Default::default()
    })
    .unwrap();
    let spec = mini_spec(scale);
    let items: Vec<TrainingItem> = corpus
        .iter()
        .map(|u| TrainingItem::prepare(&spec, &u.utterance).unwrap())
        .collect();
    let module = VqModule::new(spec, &[0, 1], 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let frames = vec![(0, 40), (1, 200), (0, 300)];
    let noise = frames
        .iter()
        .map(|_| (0..FRAME).map(|_| rng.gen_range(-0.3..0.3)).collect())
        .collect();
    Setup {
        module,
        items,
        frames,
        noise,
    }
}

/// Central differences of the loss with the quantizer assignment frozen at
/// the base point, compared against the accumulated analytic gradient.
fn check_gradients(scale: Scale) {
    let Setup {
        mut module,
        items,
        frames,
        noise,
    } = setup(scale);
    module.zero_grad();
    let base = module
        .batch_loss(&items, &frames, FRAME, BETA, &noise, None, true)
        .unwrap();
    let frozen = base.quantization.clone();

    let mut candidates: Vec<(String, usize, f64)> = Vec::new();
    for (name, p) in module.named_params() {
        if p.trainable {
            candidates.extend(
                p.grad
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| (name.clone(), i, g)),
            );
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    candidates.shuffle(&mut rng);
    // every parameter group contributes, so the quantizer and encoder paths
    // are exercised alongside the decoder
    let mut picked: Vec<(String, usize, f64)> = Vec::new();
    for group in [
        "encoder",
        "codebook",
        "pitch_encoder",
        "loudness_encoder",
        "singers",
    ] {
        picked.extend(
            candidates
                .iter()
                .filter(|(n, _, g)| n.starts_with(&format!("{group}.")) && g.abs() > 1e-7)
                .take(6)
                .cloned(),
        );
    }
    let rest = 50 - picked.len();
    picked.extend(
        candidates
            .iter()
            .filter(|(n, _, g)| n.starts_with("decoder.") && g.abs() > 1e-7)
            .take(rest)
            .cloned(),
    );
    assert_eq!(picked.len(), 50);

    let h = 1e-5;
    let mut worst = 0.0f64;
    for (name, idx, analytic) in &picked {
        let mut eval = |delta: f64| {
            for (n, p) in module.named_params_mut() {
                if &n == name {
                    p.value[*idx] += delta;
                }
            }
            let l = module
                .batch_loss(&items, &frames, FRAME, BETA, &noise, Some(&frozen), false)
                .unwrap()
                .total();
            for (n, p) in module.named_params_mut() {
                if &n == name {
                    p.value[*idx] -= delta;
                }
            }
            l
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs());
        assert!(
            rel < 1e-3,
            "{name}[{idx}]: analytic {analytic:.6e} numeric {numeric:.6e} (relative error {rel:.2e})"
        );
        worst = worst.max(rel);
    }
    eprintln!("{scale:?}: worst relative error over 50 parameters {worst:.2e}");
}

#[test]
fn bottom_module_gradient_matches_finite_differences() {
    check_gradients(Scale::Bottom);
}

#[test]
fn upper_module_gradient_matches_finite_differences() {
    check_gradients(Scale::Upper);
}

#[test]
fn frozen_loss_equals_free_loss_at_the_base_point() {
    let Setup {
        mut module,
        items,
        frames,
        noise,
    } = setup(Scale::Bottom);
    let free = module
        .batch_loss(&items, &frames, FRAME, BETA, &noise, None, false)
        .unwrap();
    let frozen = module
        .batch_loss(
            &items,
            &frames,
            FRAME,
            BETA,
            &noise,
            Some(&free.quantization),
            false,
        )
        .unwrap();
    assert!((free.total() - frozen.total()).abs() < 1e-12);
    assert!((free.commitment - BETA * free.codebook).abs() < 1e-12);
}
