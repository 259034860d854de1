use sxl_core::features::{gen_synthetic, normalize_corpus, SyntheticConfig};
use sxl_core::model::ModelConfig;
use sxl_core::optim::{LinearSchedule, Schedule};
use sxl_core::trainer::{pretrain, smoothed, TrainConfig};

/// Toy preset, 200 steps: the mean Huber loss over the last 20 steps is
/// below half the mean over the first 5.
#[test]
fn toy_preset_halves_pretraining_loss() {
    let corpus = gen_synthetic(&SyntheticConfig {
        num_utts: 100,
        seed: 0,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let (seqs, _) = normalize_corpus(&corpus.sequences).unwrap();
    let model = ModelConfig::toy();
    let cfg = TrainConfig {
        batch_frames: 600,
        total_steps: 200,
        schedule: Schedule::LinearWarmupDecay(LinearSchedule {
            peak_lr: 2e-3,
            warmup_steps: 20,
            total_steps: 200,
        }),
        ..TrainConfig::default()
    };
    let ck = pretrain::<f32>(&seqs, &model, &cfg).unwrap();
    let losses: Vec<f64> = ck
        .history
        .iter()
        .filter(|h| h.metric == "huber")
        .map(|h| h.value)
        .collect();
    assert_eq!(losses.len(), 200);
    let initial = losses[..5].iter().sum::<f64>() / 5.0;
    let last = smoothed(&ck.history, "train", "huber", 20).unwrap();
    println!("initial {initial:.4} final {last:.4} ratio {:.3}", last / initial);
    assert!(last < 0.5 * initial, "initial {initial} final {last}");
}
