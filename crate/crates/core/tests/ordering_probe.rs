use std::time::Instant;

use duet_core::data::{build_vocab, gen_synthetic, SyntheticTaskConfig};
use duet_core::encoder::{EncoderConfig, SizePreset, TokenizerMode};
use duet_core::retrieval::evaluate;
use duet_core::sharing::{build, SharingSpec, Variant};
use duet_core::training::{train, LossConfig, OptimizerKind, TrainConfig};

#[test]
#[ignore]
fn ordering_probe() {
    let data_cfg = SyntheticTaskConfig {
        n_train: 2000,
        n_eval: 500,
        vocab_q: std::env::var("PROBE_VOCAB").map(|s| s.parse().unwrap()).unwrap_or(64),
        vocab_a: std::env::var("PROBE_VOCAB").map(|s| s.parse().unwrap()).unwrap_or(64),
        key_len: std::env::var("PROBE_KEYLEN").map(|s| s.parse().unwrap()).unwrap_or(3),
        seed: 1234,
    };
    let (train_pairs, eval_pairs) = gen_synthetic(&data_cfg).unwrap();
    let all: Vec<_> = train_pairs.iter().chain(eval_pairs.iter()).cloned().collect();
    let tok = build_vocab(&all, TokenizerMode::Whitespace).unwrap();
    let cfg = EncoderConfig::preset(SizePreset::Small, tok.vocab_size(), data_cfg.key_len + 1);
    let corpus: Vec<(String, String)> = eval_pairs
        .iter()
        .map(|p| (p.id.clone(), p.answer.clone()))
        .collect();

    let steps: usize = std::env::var("PROBE_STEPS").map(|s| s.parse().unwrap()).unwrap_or(200);
    let batch: usize = std::env::var("PROBE_BATCH").map(|s| s.parse().unwrap()).unwrap_or(16);
    let seeds: u64 = std::env::var("PROBE_SEEDS").map(|s| s.parse().unwrap()).unwrap_or(2);
    let tau: f64 = std::env::var("PROBE_TAU").map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let lr: f64 = std::env::var("PROBE_LR").map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let optimizer = match std::env::var("PROBE_OPT").as_deref() {
        Ok("adam") => OptimizerKind::Adam,
        _ => OptimizerKind::Adafactor,
    };

    for variant in [Variant::Sde, Variant::Ade, Variant::AdeSpl] {
        for seed in 0..seeds {
            let started = Instant::now();
            let mut model = build(&cfg, SharingSpec::for_variant(variant), seed).unwrap();
            let tc = TrainConfig {
                steps,
                batch_size: batch,
                peak_lr: lr,
                optimizer,
                seed,
                dedup_batch: false,
            };
            let log = train(
                &mut model,
                &train_pairs,
                &tok,
                &tc,
                &LossConfig { temperature: tau },
            )
            .unwrap();
            let train_s = started.elapsed().as_secs_f64();
            let eval_started = Instant::now();
            let report = evaluate(&model, &tok, &eval_pairs, &corpus).unwrap();
            let first_loss = log.steps.first().unwrap().loss;
            let last_loss = log.steps.last().unwrap().loss;
            println!(
                "{variant} seed={seed}: mrr={:.4} p@1={:.4} loss {first_loss:.3}->{last_loss:.3} train={train_s:.1}s ({:.1} ms/step) eval={:.1}s",
                report.mrr,
                report.p_at_1,
                1000.0 * train_s / steps as f64,
                eval_started.elapsed().as_secs_f64(),
            );
        }
    }
}
