use std::time::Instant;
use axlecast::attention::*;
use axlecast::autodiff::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // encoder-shaped hilo block
    let cfg = AttentionConfig { d_model: 16, n_heads_hi: 1, n_heads_lo: 1, lo_pool_kernel: (2,2), lo_pool_stride: (2,2), ..AttentionConfig::default() };
    let mut params = ParamSet::new();
    init_hilo_params(&mut params, "hilo", &cfg, &mut rng);
    let x = randn(408, 16, &mut rng);

    let t0 = Instant::now();
    for i in 0..100 {
        let mut tape = Tape::no_grad();
        let bound = params.bind(&mut tape);
        let xi = tape.input(x.clone());
        let _ = hilo_block(&mut tape, xi, (17, 24), &cfg, &bound, "hilo", i).unwrap();
    }
    println!("hilo_block fwd (L=408): {:.2} ms", t0.elapsed().as_secs_f64()*10.0);

    // decoder-shaped full attention
    let q = randn(323, 16, &mut rng);
    let t0 = Instant::now();
    for _ in 0..100 {
        let mut tape = Tape::no_grad();
        let qi = tape.input(q.clone());
        let ki = tape.input(q.clone());
        let vi = tape.input(q.clone());
        let _ = attend_full(&mut tape, qi, ki, vi, None);
    }
    println!("attend_full fwd (L=323): {:.2} ms", t0.elapsed().as_secs_f64()*10.0);

    // grid pool matrix build
    let t0 = Instant::now();
    for _ in 0..100 { let _ = grid_pool_matrix((17,24),(2,2),(2,2)).unwrap(); }
    println!("grid_pool_matrix: {:.3} ms", t0.elapsed().as_secs_f64()*10.0);

    // probsparse on encoder shape
    let k = randn(408, 8, &mut rng);
    let t0 = Instant::now();
    for i in 0..100 {
        let mut tape = Tape::no_grad();
        let qi = tape.input(k.clone());
        let ki = tape.input(k.clone());
        let vi = tape.input(k.clone());
        let _ = attend_probsparse(&mut tape, qi, ki, vi, 5.0, i);
    }
    println!("attend_probsparse (L=408, d=8): {:.2} ms", t0.elapsed().as_secs_f64()*10.0);

    // positional encoding
    let t0 = Instant::now();
    for _ in 0..100 { let _ = positional_encoding(408, 16).unwrap(); }
    println!("positional_encoding(408,16): {:.3} ms", t0.elapsed().as_secs_f64()*10.0);
}
