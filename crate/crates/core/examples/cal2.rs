//! Dev calibration: imputation vs linear interpolation, spike detection AUC.
use axlecast::attention::AttentionConfig;
use axlecast::dataset::{mask_gaps, split_dataset, synth_grid, derive_seed};
use axlecast::model::{ModelConfig, ModelVariant};
use axlecast::tasks::{detect_outliers, impute, linear_interpolate_gaps, Scoring};
use axlecast::training::{train, LossDomain, TrainConfig};

fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut pos: Vec<f64> = Vec::new();
    let mut neg: Vec<f64> = Vec::new();
    for (s, &l) in scores.iter().zip(labels) {
        if l { pos.push(*s) } else { neg.push(*s) }
    }
    if pos.is_empty() || neg.is_empty() { return f64::NAN; }
    let mut wins = 0.0;
    for p in &pos { for n in &neg {
        if p > n { wins += 1.0 } else if p == n { wins += 0.5 }
    }}
    wins / (pos.len() as f64 * neg.len() as f64)
}

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(25);
    let records = synth_grid(3, 4.0, 256.0, 0.05, 42).unwrap();
    let split = split_dataset(&records, (0.7, 0.2, 0.1), 7).unwrap();

    // --- SSF for imputation ---
    let ssf_cfg = ModelConfig {
        variant: ModelVariant::Ssf,
        n_encoder_layers: 2,
        attention: AttentionConfig { d_model: 16, n_heads_hi: 1, n_heads_lo: 1,
            lo_pool_kernel: (2,2), lo_pool_stride: (2,2), ..AttentionConfig::default() },
        elt_kernel: 5, freq_resolution: 2, time_resolution: 16,
        mean_kernel: 5, variance_kernel: 5, dropout: 0.1, time_compression: 2,
        src_len: 12, tgt_len: 4,
        ..ModelConfig::default()
    };
    let tc = TrainConfig { learning_rate: 3e-3, max_epochs: epochs, batch_size: 8,
        early_stop_patience: 60, seed: 11, loss_domain: LossDomain::Frequency, windows_per_record: 4 };
    let t0 = std::time::Instant::now();
    let (ssf_ckpt, hist) = train(&ssf_cfg, &tc, &split).unwrap();
    println!("ssf {} epochs in {:.0}s, best val {:.3}", hist.len(), t0.elapsed().as_secs_f64(),
        hist.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min));

    // imputation across 5 mask seeds on test records
    let min_ctx = 400usize;
    let mut wins = 0; let mut total = 0;
    for seed in 0..5u64 {
        let mut model_mse = 0.0; let mut lin_mse = 0.0; let mut n = 0.0;
        for rec in &split.test {
            // find a mask whose first gap leaves enough context
            let mut masked = None;
            for attempt in 0..50 {
                let m = mask_gaps(rec, 0.10, 2, derive_seed(seed, 100 + attempt)).unwrap();
                if m.gaps()[0].start >= min_ctx { masked = Some(m); break; }
            }
            let masked = masked.expect("mask placement");
            let filled = impute(&ssf_ckpt, &masked, 2).unwrap();
            let lin = linear_interpolate_gaps(&masked);
            for g in masked.gaps() {
                for i in g {
                    let truth = rec.samples[i];
                    model_mse += (filled.samples[i] - truth).powi(2);
                    lin_mse += (lin.samples[i] - truth).powi(2);
                    n += 1.0;
                }
            }
        }
        model_mse /= n; lin_mse /= n;
        let win = model_mse < lin_mse;
        println!("mask seed {seed}: impute MSE {model_mse:.4} vs linear {lin_mse:.4} -> {}", if win {"WIN"} else {"LOSS"});
        if win { wins += 1; }
        total += 1;
    }
    println!("imputation wins: {wins}/{total}");

    // --- SF for detection ---
    let sf_cfg = ModelConfig {
        variant: ModelVariant::Sf,
        n_encoder_layers: 2,
        attention: AttentionConfig { d_model: 16, n_heads_hi: 2, n_heads_lo: 0, ..AttentionConfig::default() },
        elt_kernel: 5, mean_kernel: 5, variance_kernel: 5, dropout: 0.1, noise_std: 0.05,
        src_len: 128, tgt_len: 32,
        ..ModelConfig::default()
    };
    let tcf = TrainConfig { learning_rate: 3e-3, max_epochs: epochs.min(15), batch_size: 8,
        early_stop_patience: 60, seed: 12, loss_domain: LossDomain::Time, windows_per_record: 4 };
    let t0 = std::time::Instant::now();
    let (sf_ckpt, hist) = train(&sf_cfg, &tcf, &split).unwrap();
    println!("sf {} epochs in {:.0}s, best val {:.4}", hist.len(), t0.elapsed().as_secs_f64(),
        hist.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min));

    let mut all_scores = Vec::new(); let mut all_labels = Vec::new();
    let healthy: Vec<_> = records.iter().filter(|r| r.condition.crack_depth_mm == 0.0).take(20).collect();
    println!("healthy records: {}", healthy.len());
    for (ri, rec) in healthy.iter().enumerate() {
        let mut spiked = (*rec).clone();
        let n = spiked.samples.len();
        let mut spike_pos = Vec::new();
        let mut rngpos = 200 + (ri * 37) % 100;
        while rngpos < n - 64 { spike_pos.push(rngpos); rngpos += 211; }
        for &p in &spike_pos { spiked.samples[p] += 10.0; }
        let report = detect_outliers(&sf_ckpt, &spiked, Some(f64::INFINITY), Scoring::Nll).unwrap();
        for (i, &start) in report.step_starts.iter().enumerate() {
            all_scores.push(report.scores[i]);
            all_labels.push(spike_pos.contains(&start));
        }
    }
    let auc_v = auc(&all_scores, &all_labels);
    let n_pos = all_labels.iter().filter(|&&l| l).count();
    println!("detection AUC {auc_v:.4} over {} steps ({n_pos} spikes)", all_scores.len());
}
