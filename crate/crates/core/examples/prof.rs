use std::time::Instant;
use axlecast::attention::AttentionConfig;
use axlecast::autodiff::Tape;
use axlecast::dataset::{synth_grid, reference_signal};
use axlecast::model::window::build_window;
use axlecast::model::{ModelConfig, ModelVariant, Model};
use axlecast::training::{TrainConfig, LossDomain};

fn main() {
    let records = synth_grid(1, 4.0, 256.0, 0.05, 42).unwrap();
    let rec = &records[0];
    let cfg = ModelConfig {
        variant: ModelVariant::Ssf,
        n_encoder_layers: 2,
        attention: AttentionConfig { d_model: 16, n_heads_hi: 1, n_heads_lo: 1, lo_pool_kernel: (2,2), lo_pool_stride: (2,2), ..AttentionConfig::default() },
        elt_kernel: 5, freq_resolution: 2, time_resolution: 16,
        mean_kernel: 5, variance_kernel: 5, dropout: 0.1, time_compression: 1,
        src_len: 24, tgt_len: 8,
        ..ModelConfig::default()
    };
    let _ = TrainConfig { loss_domain: LossDomain::Frequency, ..TrainConfig::default() };
    let model = Model::new(cfg.clone(), 1).unwrap();
    let refsig = reference_signal(&rec.condition, 5.0, 256.0).unwrap();

    let t0 = Instant::now();
    let mut w = None;
    for _ in 0..50 { w = Some(build_window(&cfg, &rec.samples, 0, 256.0, Some(&refsig.samples)).unwrap()); }
    println!("build_window: {:.2} ms", t0.elapsed().as_secs_f64()*1000.0/50.0);
    let w = w.unwrap();

    // forward only (no_grad)
    let t0 = Instant::now();
    for i in 0..50 {
        let _ = axlecast::model::forecast::bench_forward(&model, &w, &rec.condition, i as u64);
    }
    println!("forward no_grad: {:.2} ms", t0.elapsed().as_secs_f64()*1000.0/50.0);

    // forward + backward via training loss path
    let t0 = Instant::now();
    for i in 0..50 {
        let _ = axlecast::training::bench_train_step(&model, &cfg, &w, &rec.condition, i as u64);
    }
    println!("fwd+bwd train: {:.2} ms", t0.elapsed().as_secs_f64()*1000.0/50.0);
    let _ = Tape::new();
}
