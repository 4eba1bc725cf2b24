#![allow(dead_code)]

use charnmt::model::{init_params, ModelConfig};
use charnmt::numerics::{Graph, ParameterStore, Tensor, Var};
use charnmt::textpipe::{Batch, EncodedPair};
use charnmt::trainer::batch_nll;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Step for central differences at wide precision.
pub const STEP: f64 = 1e-5;

/// Relative error with a floor on the denominator, so that two gradients
/// that are both numerically zero compare as equal.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces `out` to a scalar through fixed, unequal weights so that no
/// component of the gradient can cancel by symmetry.
pub fn probe(g: &mut Graph<'_, f64>, out: Var) -> Var {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| (0.7 * i as f64 + 0.3).sin()).collect();
    let c = g.constant(Tensor::new(shape, w).unwrap());
    let m = g.mul(out, c).unwrap();
    g.sum(m).unwrap()
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub what: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

/// Largest relative error between the analytic gradient of a scalar
/// function of leaf tensors and its central-difference estimate.
pub fn check_leaves<F>(inputs: &[Tensor<f64>], floor: f64, build: F) -> Mismatch
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.variable(x.clone()).unwrap()).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone()).unwrap()).collect();
    let loss = build(&mut g, &vars);
    let grads = g.gradients(loss).unwrap();
    let mut worst = Mismatch {
        what: String::new(),
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        error: 0.0,
    };
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        for i in 0..inputs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + STEP;
            let up = eval(&xs);
            xs[k].data_mut()[i] = orig - STEP;
            let down = eval(&xs);
            xs[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.data()[i];
            let error = relative_error(a, numeric, floor);
            if error > worst.error {
                worst = Mismatch {
                    what: format!("input {k}"),
                    index: i,
                    analytic: a,
                    numeric,
                    error,
                };
            }
        }
    }
    worst
}

pub fn batch_loss(params: &ParameterStore<f64>, cfg: &ModelConfig, batch: &Batch) -> f64 {
    let mut g = Graph::with_params(params);
    let l = batch_nll(&mut g, cfg, batch).unwrap();
    g.value(l).item()
}

/// Compares every parameter's analytic gradient of the batch loss with
/// central differences and returns the worst element.
pub fn check_model(params: &mut ParameterStore<f64>, cfg: &ModelConfig, batch: &Batch, floor: f64) -> (Mismatch, usize) {
    let analytic = {
        let mut g = Graph::with_params(params);
        let l = batch_nll(&mut g, cfg, batch).unwrap();
        g.backward(l).unwrap()
    };
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    let mut worst = Mismatch {
        what: String::new(),
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        error: 0.0,
    };
    let mut checked = 0;
    for name in names {
        let n = params.get(&name).unwrap().len();
        for i in 0..n {
            let orig = params.get(&name).unwrap().data()[i];
            params.get_mut(&name).unwrap().data_mut()[i] = orig + STEP;
            let up = batch_loss(params, cfg, batch);
            params.get_mut(&name).unwrap().data_mut()[i] = orig - STEP;
            let down = batch_loss(params, cfg, batch);
            params.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.get(&name).unwrap().data()[i];
            let error = relative_error(a, numeric, floor);
            checked += 1;
            if error > worst.error {
                worst = Mismatch {
                    what: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    error,
                };
            }
        }
    }
    (worst, checked)
}

/// Initial parameters moved off their symmetric starting point (zero
/// biases, small weights) so every gate and nonlinearity is exercised.
pub fn perturbed_params(cfg: &ModelConfig, seed: u64) -> ParameterStore<f64> {
    let mut params = init_params::<f64>(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    params
}

/// Two pairs of different lengths, so both source and target padding
/// occur. Sources hold at most `max_len - 1` symbols plus EOS.
pub fn toy_batch(src_vocab: usize, tgt_vocab: usize, max_len: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pair = |src_len: usize, tgt_len: usize| EncodedPair {
        source: (0..src_len).map(|_| rng.random_range(4..src_vocab)).collect(),
        target: (0..tgt_len).map(|_| rng.random_range(4..tgt_vocab)).collect(),
    };
    let a = pair(max_len - 1, max_len - 2);
    let b = pair(max_len / 2, 2);
    Batch::from_pairs(&[&a, &b]).unwrap()
}
