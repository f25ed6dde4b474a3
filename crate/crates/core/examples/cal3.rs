//! Dev calibration: PE ablation gap and 5-seed variant ordering.
use axlecast::attention::AttentionConfig;
use axlecast::dataset::{split_dataset, synth_grid};
use axlecast::model::{forecast, ModelConfig, ModelVariant};
use axlecast::tasks::persistence_forecast;
use axlecast::training::{train, LossDomain, TrainConfig};

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn ssf_cfg() -> ModelConfig {
    ModelConfig {
        variant: ModelVariant::Ssf,
        n_encoder_layers: 2,
        attention: AttentionConfig { d_model: 16, n_heads_hi: 1, n_heads_lo: 1,
            lo_pool_kernel: (2,2), lo_pool_stride: (2,2), ..AttentionConfig::default() },
        elt_kernel: 5, freq_resolution: 2, time_resolution: 16,
        mean_kernel: 5, variance_kernel: 5, dropout: 0.1, time_compression: 2,
        src_len: 12, tgt_len: 4,
        ..ModelConfig::default()
    }
}

fn sf_cfg() -> ModelConfig {
    ModelConfig {
        variant: ModelVariant::Sf,
        n_encoder_layers: 2,
        attention: AttentionConfig { d_model: 16, n_heads_hi: 2, n_heads_lo: 0, ..AttentionConfig::default() },
        elt_kernel: 5, mean_kernel: 5, variance_kernel: 5, dropout: 0.1, noise_std: 0.05,
        src_len: 128, tgt_len: 32,
        ..ModelConfig::default()
    }
}

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "pe".into());
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(25);

    if mode == "pe" {
        let records = synth_grid(3, 4.0, 256.0, 0.05, 42).unwrap();
        let split = split_dataset(&records, (0.7, 0.2, 0.1), 7).unwrap();
        let tc = TrainConfig { learning_rate: 3e-3, max_epochs: epochs, batch_size: 8,
            early_stop_patience: 60, seed: 11, loss_domain: LossDomain::Frequency, windows_per_record: 4 };
        let mut vals = Vec::new();
        for pe in [true, false] {
            let mut cfg = ssf_cfg();
            cfg.use_positional_encoding = pe;
            let (_, hist) = train(&cfg, &tc, &split).unwrap();
            let best = hist.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
            println!("PE {}: best val {:.4} ({} epochs)", pe, best, hist.len());
            vals.push(best);
        }
        let rel = (vals[0] - vals[1]).abs() / vals[0].max(vals[1]);
        println!("relative gap {:.1}%", rel * 100.0);
    } else {
        // ordering across 5 seeds, smaller budget
        let horizon = 128usize;
        for seed in 1..=5u64 {
            let records = synth_grid(2, 3.0, 256.0, 0.05, 100 + seed).unwrap();
            let split = split_dataset(&records, (0.7, 0.2, 0.1), seed).unwrap();
            let t0 = std::time::Instant::now();
            let tc_ssf = TrainConfig { learning_rate: 3e-3, max_epochs: epochs, batch_size: 8,
                early_stop_patience: 60, seed, loss_domain: LossDomain::Frequency, windows_per_record: 3 };
            let (ssf, _) = train(&ssf_cfg(), &tc_ssf, &split).unwrap();
            let tc_sf = TrainConfig { loss_domain: LossDomain::Time, ..tc_ssf.clone() };
            let (sf, _) = train(&sf_cfg(), &tc_sf, &split).unwrap();
            let mut m_ssf = 0.0; let mut m_sf = 0.0; let mut m_p = 0.0;
            for rec in &split.test {
                let cut = rec.samples.len() - horizon;
                let mut hist = rec.clone();
                hist.samples.truncate(cut);
                let truth = &rec.samples[cut..];
                m_ssf += mse(&forecast(&ssf, &hist, horizon, 0, 3).unwrap().mean, truth);
                m_sf += mse(&forecast(&sf, &hist, horizon, 0, 3).unwrap().mean, truth);
                m_p += mse(&persistence_forecast(&hist.samples, horizon), truth);
            }
            let n = split.test.len() as f64;
            println!("seed {seed}: SSF {:.4} SF {:.4} persist {:.4} -> {} ({:.0}s)",
                m_ssf/n, m_sf/n, m_p/n, if m_ssf <= m_sf {"SSF<=SF ok"} else {"VIOLATED"},
                t0.elapsed().as_secs_f64());
        }
    }
}
