//! Finite-difference verification of analytic gradients.
//!
//! Each registered block builds a scalar loss over random inputs; analytic
//! gradients from the tape are compared against central differences (step
//! 1e-5) on a random subset of coordinates per tensor. The corrupted fixture
//! multiplies the analytic gradients by a wrong factor to prove the check
//! actually detects broken backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend_full, attend_probsparse, hilo_block, init_hilo_params, AttentionConfig};
use crate::autodiff::{randn, xavier, BoundParams, Mat, ParamSet, Tape, VarId};
use crate::dataset::derive_seed;
use crate::error::{AxError, Result};
use crate::model::{
    decode_tape, elt_tape, encode_sf_tape, frequency_filter_tape, sample_gaussian_tape,
    sample_head_tape, ModelConfig, ModelVariant, PassCtx,
};

const FD_STEP: f64 = 1e-5;
const SUBSET_PER_TENSOR: usize = 6;

pub const BLOCKS: [&str; 12] = [
    "linear",
    "layer_norm",
    "feed_forward",
    "full_attention",
    "probsparse_attention",
    "hilo_attention",
    "elt_embed",
    "encoder_distill",
    "decoder_layer",
    "frequency_filter",
    "sample_head",
    "gaussian_head",
];

pub const CORRUPTED_FIXTURE: &str = "corrupted_fixture";

/// Registered block names (the corrupted fixture is listed last).
pub fn list_blocks() -> Vec<&'static str> {
    let mut v = BLOCKS.to_vec();
    v.push(CORRUPTED_FIXTURE);
    v
}

/// Worst relative error between analytic and central-difference gradients
/// over `trials` random instances of `block`.
pub fn gradient_check(block: &str, trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(AxError::InvalidArgument("trials must be >= 1".into()));
    }
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t as u64));
        let err = run_block(block, &mut rng)?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Compare analytic and numeric gradients of `build` at `inputs`.
/// `corrupt` scales the analytic gradients (1.0 = faithful check).
fn check_graph<F>(build: &F, inputs: &[Mat], rng: &mut ChaCha8Rng, corrupt: f64) -> f64
where
    F: Fn(&mut Tape, &[VarId]) -> VarId,
{
    let run = |mats: &[Mat]| -> (f64, Vec<Option<Mat>>, Vec<VarId>) {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = mats.iter().map(|m| tape.input(m.clone())).collect();
        let root = build(&mut tape, &ids);
        let value = tape.value(root)[[0, 0]];
        let grads = tape.backward(root);
        (value, grads, ids)
    };
    let (_, grads, ids) = run(inputs);

    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads[ids[which]]
            .clone()
            .unwrap_or_else(|| Mat::zeros(input.dim()));
        let n = input.len();
        let coords: Vec<usize> = if n <= SUBSET_PER_TENSOR {
            (0..n).collect()
        } else {
            let mut c: Vec<usize> = (0..SUBSET_PER_TENSOR)
                .map(|_| rng.random_range(0..n))
                .collect();
            c.sort_unstable();
            c.dedup();
            c
        };
        for idx in coords {
            let (r, c) = (idx / input.ncols(), idx % input.ncols());
            let eval = |delta: f64| -> f64 {
                let mut pert = inputs.to_vec();
                pert[which][[r, c]] += delta;
                let mut tape = Tape::no_grad();
                let ids: Vec<VarId> = pert.iter().map(|m| tape.input(m.clone())).collect();
                let root = build(&mut tape, &ids);
                tape.value(root)[[0, 0]]
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let a = analytic[[r, c]] * corrupt;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

/// Random weighting matrix so the scalar loss has non-degenerate gradients.
fn loss_weights(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    randn(rows, cols, rng)
}

fn weighted_sum(tape: &mut Tape, x: VarId, w: &Mat) -> VarId {
    let wx = tape.mul_const(x, w);
    tape.sum_all(wx)
}

fn tiny_sf_cfg() -> ModelConfig {
    ModelConfig {
        variant: ModelVariant::Sf,
        n_encoder_layers: 1,
        attention: AttentionConfig {
            d_model: 8,
            n_heads_hi: 2,
            n_heads_lo: 0,
            probsparse_factor: 1.2,
            ..AttentionConfig::default()
        },
        elt_kernel: 3,
        mean_kernel: 3,
        variance_kernel: 3,
        dropout: 0.0,
        noise_std: 0.0,
        src_len: 16,
        tgt_len: 4,
        ..ModelConfig::default()
    }
}

fn run_block(block: &str, rng: &mut ChaCha8Rng) -> Result<f64> {
    let err = match block {
        "linear" => {
            let x = randn(4, 3, rng);
            let w = randn(3, 2, rng);
            let c = loss_weights(4, 2, rng);
            check_graph(
                &move |t: &mut Tape, ids: &[VarId]| {
                    let y = t.matmul(ids[0], ids[1]);
                    weighted_sum(t, y, &c)
                },
                &[x, w],
                rng,
                1.0,
            )
        }
        "layer_norm" => {
            let x = randn(5, 8, rng);
            let g = randn(1, 8, rng);
            let b = randn(1, 8, rng);
            let c = loss_weights(5, 8, rng);
            check_graph(
                &move |t: &mut Tape, ids: &[VarId]| {
                    let y = t.layer_norm(ids[0], ids[1], ids[2]);
                    weighted_sum(t, y, &c)
                },
                &[x, g, b],
                rng,
                1.0,
            )
        }
        "feed_forward" => {
            let x = randn(6, 8, rng);
            let w1 = xavier(8, 16, rng);
            let b1 = randn(1, 16, rng);
            let w2 = xavier(16, 8, rng);
            let b2 = randn(1, 8, rng);
            let c = loss_weights(6, 8, rng);
            check_graph(
                &move |t: &mut Tape, ids: &[VarId]| {
                    let h = t.matmul(ids[0], ids[1]);
                    let h = t.add_row(h, ids[2]);
                    let h = t.gelu(h);
                    let h = t.matmul(h, ids[3]);
                    let h = t.add_row(h, ids[4]);
                    weighted_sum(t, h, &c)
                },
                &[x, w1, b1, w2, b2],
                rng,
                1.0,
            )
        }
        "full_attention" => {
            let q = randn(5, 6, rng);
            let k = randn(7, 6, rng);
            let v = randn(7, 4, rng);
            let c = loss_weights(5, 4, rng);
            check_graph(
                &move |t: &mut Tape, ids: &[VarId]| {
                    let o = attend_full(t, ids[0], ids[1], ids[2], None);
                    weighted_sum(t, o, &c)
                },
                &[q, k, v],
                rng,
                1.0,
            )
        }
        "probsparse_attention" => {
            let q = randn(12, 6, rng);
            let k = randn(12, 6, rng);
            let v = randn(12, 4, rng);
            let c = loss_weights(12, 4, rng);
            check_graph(
                &move |t: &mut Tape, ids: &[VarId]| {
                    let o = attend_probsparse(t, ids[0], ids[1], ids[2], 0.8, 42);
                    weighted_sum(t, o, &c)
                },
                &[q, k, v],
                rng,
                1.0,
            )
        }
        "hilo_attention" => {
            let cfg = AttentionConfig {
                d_model: 8,
                n_heads_hi: 1,
                n_heads_lo: 1,
                probsparse_factor: 2.0,
                lo_pool_kernel: (2, 2),
                lo_pool_stride: (2, 2),
                ..AttentionConfig::default()
            };
            let mut params = ParamSet::new();
            init_hilo_params(&mut params, "hilo", &cfg, rng);
            let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
            let mut inputs: Vec<Mat> = params.iter().map(|(_, m)| m.clone()).collect();
            inputs.push(randn(12, 8, rng)); // token grid 3x4
            let c = loss_weights(12, 8, rng);
            let cfg2 = cfg.clone();
            check_graph(
                &move |t: &mut Tape, ids: &[VarId]| {
                    let bound = BoundParams::from_pairs(
                        names.iter().cloned().zip(ids[..names.len()].iter().cloned()),
                    );
                    let x = ids[names.len()];
                    let o = hilo_block(t, x, (3, 4), &cfg2, &bound, "hilo", 13).expect("valid");
                    weighted_sum(t, o, &c)
                },
                &inputs,
                rng,
                1.0,
            )
        }
        "elt_embed" => {
            let cfg = tiny_sf_cfg();
            let d = cfg.d_model();
            let k = cfg.elt_kernel;
            let names = vec![
                "elt.c1.w".to_string(),
                "elt.c1.b".to_string(),
                "elt.c2.w".to_string(),
                "elt.c2.b".to_string(),
                "cond.w".to_string(),
                "cond.b".to_string(),
            ];
            let inputs = vec![
                xavier(k, d, rng),
                randn(1, d, rng),
                xavier(k * d, d, rng),
                randn(1, d, rng),
                xavier(6, d, rng),
                randn(1, d, rng),
                randn(10, 1, rng), // signal window
                randn(1, 6, rng),  // condition features
            ];
            let c = loss_weights(10, d, rng);
            let cfg2 = cfg.clone();
            check_graph(
                &move |t: &mut Tape, ids: &[VarId]| {
                    let bound = BoundParams::from_pairs(
                        names.iter().cloned().zip(ids[..6].iter().cloned()),
                    );
                    let tokens = elt_tape(t, &cfg2, &bound, ids[6], None, ids[7], true);
                    weighted_sum(t, tokens, &c)
                },
                &inputs,
                rng,
                1.0,
            )
        }
        "encoder_distill" => {
            let cfg = tiny_sf_cfg();
            let d = cfg.d_model();
            let dh = d / 2;
            let mut names = vec!["enc0.ln.g".to_string(), "enc0.ln.b".to_string()];
            let mut inputs = vec![Mat::from_elem((1, d), 1.0), Mat::zeros((1, d))];
            for h in 0..2 {
                for w in ["wq", "wk", "wv"] {
                    names.push(format!("enc0.attn.h{h}.{w}"));
                    inputs.push(xavier(d, dh, rng));
                }
            }
            names.push("enc0.attn.wo".into());
            inputs.push(xavier(d, d, rng));
            names.push("enc0.attn.bo".into());
            inputs.push(randn(1, d, rng));
            for part in ["down", "up"] {
                names.push(format!("enc0.{part}.w"));
                inputs.push(xavier(3 * d, d, rng));
                names.push(format!("enc0.{part}.b"));
                inputs.push(randn(1, d, rng));
            }
            names.push("enc0.merge.w".into());
            inputs.push(xavier(6 * d, d, rng));
            names.push("enc0.merge.b".into());
            inputs.push(randn(1, d, rng));
            let n_params = names.len();
            inputs.push(randn(12, d, rng)); // tokens
            let c = loss_weights(6, d, rng);
            let cfg2 = cfg.clone();
            check_graph(
                &move |t: &mut Tape, ids: &[VarId]| {
                    let bound = BoundParams::from_pairs(
                        names.iter().cloned().zip(ids[..n_params].iter().cloned()),
                    );
                    let mut ctx = PassCtx::eval(5);
                    let mem = encode_sf_tape(t, &cfg2, &bound, ids[n_params], &mut ctx);
                    weighted_sum(t, mem, &c)
                },
                &inputs,
                rng,
                1.0,
            )
        }
        "decoder_layer" => {
            let cfg = tiny_sf_cfg();
            let d = cfg.d_model();
            let dh = d / 2;
            let mut names: Vec<String> = Vec::new();
            let mut inputs: Vec<Mat> = Vec::new();
            for ln in ["dec.ln1", "dec.ln2", "dec.ln3"] {
                names.push(format!("{ln}.g"));
                inputs.push(Mat::from_elem((1, d), 1.0));
                names.push(format!("{ln}.b"));
                inputs.push(Mat::zeros((1, d)));
            }
            for blockname in ["dec.self", "dec.cross"] {
                for h in 0..2 {
                    for w in ["wq", "wk", "wv"] {
                        names.push(format!("{blockname}.h{h}.{w}"));
                        inputs.push(xavier(d, dh, rng));
                    }
                }
                names.push(format!("{blockname}.wo"));
                inputs.push(xavier(d, d, rng));
                names.push(format!("{blockname}.bo"));
                inputs.push(randn(1, d, rng));
            }
            names.push("dec.ffn.w1".into());
            inputs.push(xavier(d, 2 * d, rng));
            names.push("dec.ffn.b1".into());
            inputs.push(randn(1, 2 * d, rng));
            names.push("dec.ffn.w2".into());
            inputs.push(xavier(2 * d, d, rng));
            names.push("dec.ffn.b2".into());
            inputs.push(randn(1, d, rng));
            names.push("head.mean.w".into());
            inputs.push(xavier(cfg.mean_kernel * d, 1, rng));
            names.push("head.mean.b".into());
            inputs.push(randn(1, 1, rng));
            names.push("head.var.w".into());
            inputs.push(xavier(cfg.variance_kernel * d, 1, rng));
            names.push("head.var.b".into());
            inputs.push(randn(1, 1, rng));
            let n_params = names.len();
            inputs.push(randn(6, d, rng)); // memory tokens
            inputs.push(randn(5, d, rng)); // decoder tokens
            inputs.push(randn(1, 6, rng)); // condition features
            let cmu = loss_weights(5, 1, rng);
            let cvar = loss_weights(5, 1, rng);
            let cfg2 = cfg.clone();
            check_graph(
                &move |t: &mut Tape, ids: &[VarId]| {
                    let bound = BoundParams::from_pairs(
                        names.iter().cloned().zip(ids[..n_params].iter().cloned()),
                    );
                    let mut ctx = PassCtx::eval(5);
                    let out = decode_tape(
                        t,
                        &cfg2,
                        &bound,
                        ids[n_params],
                        ids[n_params + 1],
                        None,
                        ids[n_params + 2],
                        None,
                        &mut ctx,
                    );
                    let a = weighted_sum(t, out.mu, &cmu);
                    let b = weighted_sum(t, out.positive, &cvar);
                    t.add(a, b)
                },
                &inputs,
                rng,
                1.0,
            )
        }
        "frequency_filter" => {
            let x = randn(12, 4, rng);
            let gains = randn(3, 1, rng);
            let c = loss_weights(12, 4, rng);
            check_graph(
                &move |t: &mut Tape, ids: &[VarId]| {
                    let o = frequency_filter_tape(t, ids[0], ids[1], (3, 4));
                    weighted_sum(t, o, &c)
                },
                &[x, gains],
                rng,
                1.0,
            )
        }
        "sample_head" => {
            let mu = randn(4, 3, rng);
            let raw = randn(4, 3, rng);
            let mut u = Mat::zeros((4, 3));
            for v in u.iter_mut() {
                *v = rng.random::<f64>().clamp(0.05, 0.95);
            }
            let eps = randn(4, 3, rng);
            let c = loss_weights(4, 3, rng);
            check_graph(
                &move |t: &mut Tape, ids: &[VarId]| {
                    let capped = t.min_scalar(ids[1], 30.0);
                    let e = t.exp(capped);
                    let lam = t.add_scalar(e, 1e-6);
                    let z = sample_head_tape(t, ids[0], lam, &u, &eps);
                    weighted_sum(t, z, &c)
                },
                &[mu, raw],
                rng,
                1.0,
            )
        }
        "gaussian_head" => {
            let mu = randn(4, 3, rng);
            let raw = randn(4, 3, rng);
            let eps = randn(4, 3, rng);
            let c = loss_weights(4, 3, rng);
            check_graph(
                &move |t: &mut Tape, ids: &[VarId]| {
                    let sp = t.softplus(ids[1]);
                    let var = t.add_scalar(sp, 1e-6);
                    let z = sample_gaussian_tape(t, ids[0], var, &eps);
                    weighted_sum(t, z, &c)
                },
                &[mu, raw],
                rng,
                1.0,
            )
        }
        CORRUPTED_FIXTURE => {
            // Deliberately wrong backward (analytic gradients scaled by 1.07):
            // the check must report a large error.
            let x = randn(5, 4, rng);
            let w = xavier(4, 3, rng);
            let c = loss_weights(5, 3, rng);
            check_graph(
                &move |t: &mut Tape, ids: &[VarId]| {
                    let h = t.matmul(ids[0], ids[1]);
                    let h = t.gelu(h);
                    weighted_sum(t, h, &c)
                },
                &[x, w],
                rng,
                1.07,
            )
        }
        other => {
            return Err(AxError::InvalidArgument(format!(
                "unknown gradient-check block '{other}' (known: {})",
                list_blocks().join(", ")
            )))
        }
    };
    Ok(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_block_is_essentially_exact() {
        let err = gradient_check("linear", 3, 1).unwrap();
        assert!(err < 1e-9, "linear rel err {err}");
    }

    #[test]
    fn all_blocks_pass_tolerance() {
        for block in BLOCKS {
            let err = gradient_check(block, 2, 7).unwrap();
            assert!(err < 1e-3, "block {block} rel err {err}");
        }
    }

    #[test]
    fn corrupted_fixture_is_detected() {
        let err = gradient_check(CORRUPTED_FIXTURE, 2, 7).unwrap();
        assert!(err > 1e-2, "corrupted fixture err {err} not detected");
    }

    #[test]
    fn unknown_block_is_an_error() {
        assert!(gradient_check("bogus", 1, 1).is_err());
    }
}
