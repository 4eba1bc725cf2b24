use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{DecoderKind, ModelConfig};
use crate::error::Result;
use crate::numerics::{ParameterStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Uniform,
    /// Column blocks of orthogonal `[rows, rows]` matrices.
    Orthogonal,
    Zero,
}

fn gru_shapes(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, input: usize, d: usize) {
    out.push((format!("{prefix}.W"), vec![input, 3 * d], Init::Uniform));
    out.push((format!("{prefix}.U_ru"), vec![d, 2 * d], Init::Orthogonal));
    out.push((format!("{prefix}.U_h"), vec![d, d], Init::Orthogonal));
    out.push((format!("{prefix}.b"), vec![3 * d], Init::Zero));
}

fn shapes_with_init(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (e, de, dd, a) = (cfg.d_emb, cfg.d_enc, cfg.d_dec, cfg.d_att);
    let ctx = cfg.context_width();
    let mut out = vec![
        ("emb.src".to_string(), vec![cfg.src_vocab, e], Init::Uniform),
        ("emb.tgt".to_string(), vec![cfg.tgt_vocab, e], Init::Uniform),
    ];
    gru_shapes(&mut out, "enc.fwd", e, de);
    gru_shapes(&mut out, "enc.bwd", e, de);
    out.push(("dec.init.W".into(), vec![de, dd], Init::Uniform));
    out.push(("dec.init.b".into(), vec![dd], Init::Zero));
    out.push(("att.W_z".into(), vec![ctx, a], Init::Uniform));
    out.push(("att.W_q".into(), vec![e + cfg.query_width(), a], Init::Uniform));
    out.push(("att.b".into(), vec![a], Init::Zero));
    out.push(("att.v".into(), vec![a, 1], Init::Uniform));
    match cfg.decoder {
        DecoderKind::Base => {
            gru_shapes(&mut out, "dec.gru1", e + ctx, dd);
            gru_shapes(&mut out, "dec.gru2", dd, dd);
        }
        DecoderKind::BiScale => {
            let in1 = e + 2 * dd + ctx;
            let in2 = 2 * dd + ctx;
            for (name, input) in [("h1", in1), ("g1", in1), ("h2", in2), ("g2", in2)] {
                out.push((format!("dec.bs.W_{name}"), vec![input, dd], Init::Uniform));
                out.push((format!("dec.bs.b_{name}"), vec![dd], Init::Zero));
            }
        }
    }
    out.push(("out.W_h".into(), vec![e + cfg.output_width() + ctx, dd], Init::Uniform));
    out.push(("out.b_h".into(), vec![dd], Init::Zero));
    out.push(("out.W_s".into(), vec![dd, cfg.tgt_vocab], Init::Uniform));
    out.push(("out.b_s".into(), vec![cfg.tgt_vocab], Init::Zero));
    out
}

/// Name and shape of every parameter, in store order.
pub fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    shapes_with_init(cfg)
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect()
}

/// Orthogonal blocks for recurrent matrices, Glorot-uniform elsewhere,
/// zero biases.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    for (name, shape, init) in shapes_with_init(cfg) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zero => vec![0.0; n],
            Init::Uniform => {
                let fan_in = shape[0];
                let fan_out = if shape.len() > 1 { shape[1] } else { 1 };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-limit..limit)).collect()
            }
            Init::Orthogonal => orthogonal_blocks(&mut rng, shape[0], shape[1]),
        };
        store.insert(name, Tensor::from_f64(shape, &data)?)?;
    }
    Ok(store)
}

/// `[rows, cols]` made of `cols / rows` independent orthogonal blocks.
fn orthogonal_blocks(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let blocks = cols / rows;
    let mut out = vec![0.0; rows * cols];
    for blk in 0..blocks {
        let q = orthogonal(rng, rows);
        for r in 0..rows {
            out[r * cols + blk * rows..r * cols + (blk + 1) * rows]
                .copy_from_slice(&q[r * rows..(r + 1) * rows]);
        }
    }
    out
}

/// Gram-Schmidt on Gaussian rows; returns a row-major `[n, n]` matrix.
fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis.concat()
}
