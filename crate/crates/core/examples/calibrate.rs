//! Dev calibration harness: training speed and forecast skill at desk scale.

use std::time::Instant;

use axlecast::attention::AttentionConfig;
use axlecast::dataset::{split_dataset, synth_grid};
use axlecast::model::{forecast, ModelConfig, ModelVariant};
use axlecast::tasks::persistence_forecast;
use axlecast::training::{train, LossDomain, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let variant = args.get(2).map(|s| s.as_str()).unwrap_or("ssf");

    let records = synth_grid(3, 4.0, 256.0, 0.05, 42).unwrap();
    println!("dataset: {} records of {} samples", records.len(), records[0].samples.len());
    let split = split_dataset(&records, (0.7, 0.2, 0.1), 7).unwrap();

    let model_cfg = match variant {
        "sf" => ModelConfig {
            variant: ModelVariant::Sf,
            n_encoder_layers: 2,
            attention: AttentionConfig {
                d_model: 16,
                n_heads_hi: 2,
                n_heads_lo: 0,
                ..AttentionConfig::default()
            },
            elt_kernel: 5,
            mean_kernel: 5,
            variance_kernel: 5,
            dropout: 0.1,
            noise_std: 0.05,
            src_len: 128,
            tgt_len: 32,
            ..ModelConfig::default()
        },
        _ => {
            let tc: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(2);
            ModelConfig {
                variant: ModelVariant::Ssf,
                n_encoder_layers: 2,
                attention: AttentionConfig {
                    d_model: 16,
                    n_heads_hi: 1,
                    n_heads_lo: 1,
                    lo_pool_kernel: (2, 2),
                    lo_pool_stride: (2, 2),
                    ..AttentionConfig::default()
                },
                elt_kernel: 5,
                freq_resolution: 2,
                time_resolution: 16,
                mean_kernel: 5,
                variance_kernel: 5,
                dropout: 0.1,
                time_compression: tc,
                src_len: 24 / tc,
                tgt_len: 8 / tc.min(2),
                ..ModelConfig::default()
            }
        }
    };
    let train_cfg = TrainConfig {
        learning_rate: 3e-3,
        max_epochs: epochs,
        batch_size: 8,
        early_stop_patience: 60,
        seed: 11,
        loss_domain: LossDomain::for_variant(model_cfg.variant),
        windows_per_record: 4,
    };

    let t0 = Instant::now();
    let (ckpt, history) = train(&model_cfg, &train_cfg, &split).unwrap();
    let train_time = t0.elapsed();
    println!(
        "trained {} epochs in {:.1}s ({:.2}s/epoch)",
        history.len(),
        train_time.as_secs_f64(),
        train_time.as_secs_f64() / history.len() as f64
    );
    for e in history.iter().step_by((history.len() / 10).max(1)) {
        println!("  epoch {:>4}  train {:.4}  val {:.4}", e.epoch, e.train_loss, e.val_loss);
    }
    let best = history.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    println!("best val loss {best:.4}");

    // Forecast skill on test records.
    let horizon = 256usize;
    let t1 = Instant::now();
    let mut model_mse = 0.0;
    let mut persist_mse = 0.0;
    for rec in &split.test {
        let cut = rec.samples.len() - horizon;
        let mut hist = rec.clone();
        hist.samples.truncate(cut);
        let truth = &rec.samples[cut..];
        let fc = forecast(&ckpt, &hist, horizon, 0, 3).unwrap();
        let pers = persistence_forecast(&hist.samples, horizon);
        let mse = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
        };
        model_mse += mse(&fc.mean, truth);
        persist_mse += mse(&pers, truth);
    }
    model_mse /= split.test.len() as f64;
    persist_mse /= split.test.len() as f64;
    println!(
        "forecast horizon {horizon}: model MSE {model_mse:.4} vs persistence {persist_mse:.4} (ratio {:.3}), eval {:.1}s",
        model_mse / persist_mse,
        t1.elapsed().as_secs_f64()
    );
}
