use axlecast::autodiff::{randn, matmul_raw, Mat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (m, k, n) in [(32usize, 16usize, 32usize), (408, 16, 16), (408, 80, 16), (323, 323, 8), (31, 408, 16)] {
        let a = randn(m, k, &mut rng);
        let b = randn(k, n, &mut rng);
        let full = a.dot(&b);
        // row subset
        let rows = [0usize, m/3, m/2, m-1];
        let mut sub = Mat::zeros((rows.len(), k));
        for (i, &r) in rows.iter().enumerate() { sub.row_mut(i).assign(&a.row(r)); }
        let part = sub.dot(&b);
        let mut bits_equal = true;
        for (i, &r) in rows.iter().enumerate() {
            for j in 0..n {
                if part[[i,j]].to_bits() != full[[r,j]].to_bits() { bits_equal = false; }
            }
        }
        // also vs naive
        let naive = matmul_raw(&a, &b);
        let max_diff = full.iter().zip(naive.iter()).map(|(x,y)| (x-y).abs()).fold(0.0, f64::max);
        println!("[{m}x{k}]x[{k}x{n}] dot-rowsubset-bitwise={bits_equal} dot-vs-naive maxdiff={max_diff:.2e}");
    }
    // speed check
    let a = randn(408, 80, &mut rng);
    let b = randn(80, 16, &mut rng);
    let t = std::time::Instant::now();
    let mut acc = 0.0;
    for _ in 0..2000 { acc += a.dot(&b)[[0,0]]; }
    let dt_dot = t.elapsed().as_secs_f64();
    let t = std::time::Instant::now();
    for _ in 0..2000 { acc += matmul_raw(&a, &b)[[0,0]]; }
    let dt_naive = t.elapsed().as_secs_f64();
    println!("gflops dot={:.2} naive={:.2} ({acc})", 2.0*408.0*80.0*16.0*2000.0/dt_dot/1e9, 2.0*408.0*80.0*16.0*2000.0/dt_naive/1e9);
}
