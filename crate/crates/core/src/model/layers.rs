use super::{AttentionQuery, DecoderKind, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

fn p<T: Real>(g: &mut Graph<'_, T>, prefix: &str, name: &str) -> Result<Var> {
    g.param(&format!("{prefix}.{name}"))
}

/// GRU update with the input projection `x W + b` already computed:
/// `r, u = σ(xW_ru + h U_ru)`, `h~ = tanh(xW_h + (r ⊙ h) U_h)`,
/// `h' = (1 - u) ⊙ h + u ⊙ h~`.
fn gru_projected<T: Real>(g: &mut Graph<'_, T>, prefix: &str, xw: Var, h: Var) -> Result<Var> {
    let d = g.value(h).cols();
    if g.value(xw).cols() != 3 * d {
        return Err(Error::dim("gru_cell", g.shape(xw), g.shape(h)));
    }
    let u_ru = p(g, prefix, "U_ru")?;
    let u_h = p(g, prefix, "U_h")?;
    let x_ru = g.slice_cols(xw, 0, 2 * d)?;
    let x_h = g.slice_cols(xw, 2 * d, d)?;
    let h_ru = g.matmul(h, u_ru)?;
    let pre = g.add(x_ru, h_ru)?;
    let ru = g.sigmoid(pre)?;
    let r = g.slice_cols(ru, 0, d)?;
    let u = g.slice_cols(ru, d, d)?;
    let rh = g.mul(r, h)?;
    let rh_u = g.matmul(rh, u_h)?;
    let cand_pre = g.add(x_h, rh_u)?;
    let cand = g.tanh(cand_pre)?;
    let keep = g.one_minus(u)?;
    let kept = g.mul(keep, h)?;
    let fresh = g.mul(u, cand)?;
    g.add(kept, fresh)
}

/// One GRU step on `[B, in]` inputs and `[B, d]` states, with parameters
/// `{prefix}.W`, `{prefix}.U_ru`, `{prefix}.U_h` and `{prefix}.b`.
pub fn gru_cell<T: Real>(g: &mut Graph<'_, T>, prefix: &str, x: Var, h: Var) -> Result<Var> {
    let w = p(g, prefix, "W")?;
    let b = p(g, prefix, "b")?;
    let xw = g.affine(x, w, b)?;
    gru_projected(g, prefix, xw, h)
}

/// Encoder output for a padded batch of sources.
#[derive(Clone, Debug)]
pub struct Encoding {
    /// Contexts `[B, Tx, 2 d_enc]`, forward state then backward state.
    pub z: Var,
    /// Contexts projected by the alignment network, `[B, Tx, d_att]`.
    pub zp: Var,
    /// `[B * Tx]`, true at real source positions.
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub batch: usize,
    pub steps: usize,
    /// Backward state at the first source position, `[B, d_enc]`.
    pub backward_first: Var,
}

/// Runs both encoder directions over `source` (`[B, Tx]` row-major, PAD
/// after each true length). The backward direction starts from zero at
/// each sentence's own last symbol.
pub fn encode<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    source: &[usize],
    lengths: &[usize],
) -> Result<Encoding> {
    let batch = lengths.len();
    if batch == 0 || source.is_empty() || source.len() % batch != 0 {
        return Err(Error::Contract(format!(
            "source of {} indices does not split into {batch} rows",
            source.len()
        )));
    }
    let steps = source.len() / batch;
    if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > steps) {
        return Err(Error::Contract(format!(
            "source length {bad} outside 1..={steps}"
        )));
    }
    let mask: Vec<bool> = lengths
        .iter()
        .flat_map(|&l| (0..steps).map(move |t| t < l))
        .collect();
    let table = g.param("emb.src")?;
    let x = g.embed(table, source)?;
    let x = g.reshape(x, &[batch, steps, cfg.d_emb])?;
    let zero = g.constant(Tensor::zeros(vec![batch, cfg.d_enc]));

    let mut fwd = Vec::with_capacity(steps);
    let mut bwd = vec![zero; steps];
    for (dir, prefix) in [(0, "enc.fwd"), (1, "enc.bwd")] {
        let w = p(g, prefix, "W")?;
        let b = p(g, prefix, "b")?;
        let xw_all = g.affine(x, w, b)?;
        let mut h = zero;
        for i in 0..steps {
            let t = if dir == 0 { i } else { steps - 1 - i };
            let xw = g.time_step(xw_all, t)?;
            let next = gru_projected(g, prefix, xw, h)?;
            let open: Vec<bool> = lengths.iter().map(|&l| t < l).collect();
            h = if open.iter().all(|&o| o) {
                next
            } else {
                g.select_rows(next, h, &open)?
            };
            if dir == 0 {
                fwd.push(h);
            } else {
                bwd[t] = h;
            }
        }
    }
    let f = g.stack_time(&fwd)?;
    let bk = g.stack_time(&bwd)?;
    let z = g.concat(&[f, bk])?;
    let w_z = g.param("att.W_z")?;
    let zp = g.matmul(z, w_z)?;
    Ok(Encoding {
        z,
        zp,
        mask,
        lengths: lengths.to_vec(),
        batch,
        steps,
        backward_first: bwd[0],
    })
}

impl Encoding {
    /// The same encoding repeated for `rows` decoder rows, all reading
    /// source row `src_row`.
    pub fn repeat_row<T: Real>(&self, g: &mut Graph<'_, T>, src_row: usize, rows: usize) -> Result<Encoding> {
        let idx = vec![src_row; rows];
        let pick = |g: &mut Graph<'_, T>, v: Var| -> Result<Var> {
            let s = g.shape(v).to_vec();
            let flat = g.reshape(v, &[s[0], s[1] * s[2]])?;
            let picked = g.embed(flat, &idx)?;
            g.reshape(picked, &[rows, s[1], s[2]])
        };
        let z = pick(g, self.z)?;
        let zp = pick(g, self.zp)?;
        let len = self.lengths[src_row];
        let row_mask: Vec<bool> = (0..self.steps).map(|t| t < len).collect();
        let first = g.embed(self.backward_first, &idx)?;
        Ok(Encoding {
            z,
            zp,
            mask: row_mask.repeat(rows),
            lengths: vec![len; rows],
            batch: rows,
            steps: self.steps,
            backward_first: first,
        })
    }
}

/// Gate activations and slower-layer candidate of one bi-scale step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiScaleGates {
    pub g1: Var,
    pub g2: Var,
    pub h2_candidate: Var,
}

/// Bi-scale decoder state. `h1_check` is ȟ¹ = (1-g¹)⊙h¹, `h2_hat` is
/// ĥ² = g¹⊙h² and `h2_check` is ȟ² = (1-g²)⊙h².
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiScaleState {
    pub h1: Var,
    pub h2: Var,
    pub h1_check: Var,
    pub h2_hat: Var,
    pub h2_check: Var,
    /// Absent for the initial state.
    pub gates: Option<BiScaleGates>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderState {
    Base { h1: Var, h2: Var },
    BiScale(BiScaleState),
}

impl DecoderState {
    pub fn kind(&self) -> DecoderKind {
        match self {
            DecoderState::Base { .. } => DecoderKind::Base,
            DecoderState::BiScale(_) => DecoderKind::BiScale,
        }
    }

    fn layers(&self) -> (Var, Var) {
        match *self {
            DecoderState::Base { h1, h2 } => (h1, h2),
            DecoderState::BiScale(s) => (s.h1, s.h2),
        }
    }

    pub fn query<T: Real>(&self, g: &mut Graph<'_, T>, mode: AttentionQuery) -> Result<Var> {
        let (h1, h2) = self.layers();
        match mode {
            AttentionQuery::Slower => Ok(h2),
            AttentionQuery::Faster => Ok(h1),
            AttentionQuery::Concat => g.concat(&[h1, h2]),
        }
    }

    /// Vector handed to the output network: the top layer for the base
    /// decoder, `[h¹; h²]` for the bi-scale decoder.
    pub fn output<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        match *self {
            DecoderState::Base { h2, .. } => Ok(h2),
            DecoderState::BiScale(s) => g.concat(&[s.h1, s.h2]),
        }
    }

    /// The state carried between steps, in a fixed order.
    pub fn parts(&self) -> Vec<Var> {
        match *self {
            DecoderState::Base { h1, h2 } => vec![h1, h2],
            DecoderState::BiScale(s) => vec![s.h1, s.h2, s.h1_check, s.h2_hat, s.h2_check],
        }
    }

    pub fn from_parts(kind: DecoderKind, parts: &[Var]) -> Result<Self> {
        match (kind, parts) {
            (DecoderKind::Base, &[h1, h2]) => Ok(DecoderState::Base { h1, h2 }),
            (DecoderKind::BiScale, &[h1, h2, h1_check, h2_hat, h2_check]) => {
                Ok(DecoderState::BiScale(BiScaleState {
                    h1,
                    h2,
                    h1_check,
                    h2_hat,
                    h2_check,
                    gates: None,
                }))
            }
            _ => Err(Error::Contract(format!(
                "{kind} state cannot be built from {} parts",
                parts.len()
            ))),
        }
    }

    /// Row `i` of the result is row `rows[i]` of this state.
    pub fn select<T: Real>(&self, g: &mut Graph<'_, T>, rows: &[usize]) -> Result<Self> {
        let parts = self
            .parts()
            .into_iter()
            .map(|v| g.embed(v, rows))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(self.kind(), &parts)
    }
}

/// `tanh(←z₁ W + b)` seeds the first base layer and the slower bi-scale
/// layer; the other layer starts at zero. For the bi-scale decoder
/// ȟ¹₀ = 0 and ĥ²₀ = ȟ²₀ = h²₀.
pub fn initial_state<T: Real>(g: &mut Graph<'_, T>, cfg: &ModelConfig, enc: &Encoding) -> Result<DecoderState> {
    let w = g.param("dec.init.W")?;
    let b = g.param("dec.init.b")?;
    let pre = g.affine(enc.backward_first, w, b)?;
    let seeded = g.tanh(pre)?;
    let zero = g.constant(Tensor::zeros(vec![enc.batch, cfg.d_dec]));
    Ok(match cfg.decoder {
        DecoderKind::Base => DecoderState::Base {
            h1: seeded,
            h2: zero,
        },
        DecoderKind::BiScale => DecoderState::BiScale(BiScaleState {
            h1: zero,
            h2: seeded,
            h1_check: zero,
            h2_hat: seeded,
            h2_check: seeded,
            gates: None,
        }),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    /// `[B, 2 d_enc]`.
    pub context: Var,
    /// `[B, Tx]`, zero at padded positions.
    pub alpha: Var,
}

/// Scores each context with `v · tanh(z W_z + [e; q] W_q + b)` and returns
/// the softmax-weighted context.
pub fn attend<T: Real>(g: &mut Graph<'_, T>, enc: &Encoding, e_prev: Var, query: Var) -> Result<Attention> {
    if enc.steps == 0 {
        return Err(Error::Contract("attention over an empty context set".into()));
    }
    let w_q = g.param("att.W_q")?;
    let b = g.param("att.b")?;
    let v = g.param("att.v")?;
    let q_in = g.concat(&[e_prev, query])?;
    let qp = g.affine(q_in, w_q, b)?;
    let hidden = g.add_row_broadcast(enc.zp, qp)?;
    let hidden = g.tanh(hidden)?;
    let scores = g.matmul(hidden, v)?;
    let scores = g.reshape(scores, &[enc.batch, enc.steps])?;
    let alpha = g.softmax(scores, Some(&enc.mask))?;
    let context = g.weighted_sum(alpha, enc.z)?;
    Ok(Attention { context, alpha })
}

/// Stacked GRU step: layer 1 reads `[e; c]`, layer 2 reads layer 1.
pub fn base_step<T: Real>(g: &mut Graph<'_, T>, e_prev: Var, h1: Var, h2: Var, context: Var) -> Result<DecoderState> {
    let x = g.concat(&[e_prev, context])?;
    let h1 = gru_cell(g, "dec.gru1", x, h1)?;
    let h2 = gru_cell(g, "dec.gru2", h1, h2)?;
    Ok(DecoderState::Base { h1, h2 })
}

/// One bi-scale step. The faster layer is reset by its own gate g¹, and
/// the slower layer integrates its candidate only as far as g¹ opens.
pub fn biscale_step<T: Real>(g: &mut Graph<'_, T>, e_prev: Var, prev: &BiScaleState, context: Var) -> Result<BiScaleState> {
    let affine = |g: &mut Graph<'_, T>, x: Var, name: &str| -> Result<Var> {
        let w = g.param(&format!("dec.bs.W_{name}"))?;
        let b = g.param(&format!("dec.bs.b_{name}"))?;
        g.affine(x, w, b)
    };
    let in1 = g.concat(&[e_prev, prev.h1_check, prev.h2_hat, context])?;
    let h1_pre = affine(g, in1, "h1")?;
    let h1 = g.tanh(h1_pre)?;
    let g1_pre = affine(g, in1, "g1")?;
    let g1 = g.sigmoid(g1_pre)?;
    let not_g1 = g.one_minus(g1)?;
    let h1_check = g.mul(not_g1, h1)?;
    let g1_h1 = g.mul(g1, h1)?;

    let in2 = g.concat(&[g1_h1, prev.h2_check, context])?;
    let cand_pre = affine(g, in2, "h2")?;
    let h2_candidate = g.tanh(cand_pre)?;
    let held = g.mul(not_g1, prev.h2)?;
    let moved = g.mul(g1, h2_candidate)?;
    let h2 = g.add(held, moved)?;
    let h2_hat = g.mul(g1, h2)?;
    let g2_pre = affine(g, in2, "g2")?;
    let g2 = g.sigmoid(g2_pre)?;
    let not_g2 = g.one_minus(g2)?;
    let h2_check = g.mul(not_g2, h2)?;
    Ok(BiScaleState {
        h1,
        h2,
        h1_check,
        h2_hat,
        h2_check,
        gates: Some(BiScaleGates {
            g1,
            g2,
            h2_candidate,
        }),
    })
}

/// `log softmax(tanh([e; s; c] W_h + b_h) W_s + b_s)`; accepts `[B, ·]` or
/// `[B, T, ·]` inputs.
pub fn output_log_probs<T: Real>(g: &mut Graph<'_, T>, e_prev: Var, output: Var, context: Var) -> Result<Var> {
    let x = g.concat(&[e_prev, output, context])?;
    let w_h = g.param("out.W_h")?;
    let b_h = g.param("out.b_h")?;
    let w_s = g.param("out.W_s")?;
    let b_s = g.param("out.b_s")?;
    let hidden = g.affine(x, w_h, b_h)?;
    let hidden = g.tanh(hidden)?;
    let logits = g.affine(hidden, w_s, b_s)?;
    g.log_softmax(logits)
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub state: DecoderState,
    pub embedding: Var,
    pub attention: Attention,
    /// Decoder output vector for [`output_log_probs`].
    pub output: Var,
}

/// Embeds the previous symbols, attends with the previous state as query
/// and advances the decoder.
pub fn decoder_step<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    enc: &Encoding,
    state: &DecoderState,
    prev: &[usize],
) -> Result<StepOutput> {
    let table = g.param("emb.tgt")?;
    let e = g.embed(table, prev)?;
    let query = state.query(g, cfg.attention)?;
    let attention = attend(g, enc, e, query)?;
    let next = match state {
        DecoderState::Base { h1, h2 } => base_step(g, e, *h1, *h2, attention.context)?,
        DecoderState::BiScale(s) => DecoderState::BiScale(biscale_step(g, e, s, attention.context)?),
    };
    let output = next.output(g)?;
    Ok(StepOutput {
        state: next,
        embedding: e,
        attention,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::numerics::ParameterStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn gru_store(w: f64, u: f64, b: [f64; 3]) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("c.W", t(&[1, 3], &[w, w, w])).unwrap();
        s.insert("c.U_ru", t(&[1, 2], &[u, u])).unwrap();
        s.insert("c.U_h", t(&[1, 1], &[u])).unwrap();
        s.insert("c.b", t(&[3], &b)).unwrap();
        s
    }

    fn zeroed(store: &mut ParameterStore<f64>) {
        for (_, v) in store.iter_mut() {
            v.data_mut().fill(0.0);
        }
    }

    #[test]
    fn gru_zero_weights_halves_state() {
        let store = gru_store(0.0, 0.0, [0.0; 3]);
        let mut g = Graph::with_params(&store);
        let x = g.constant(t(&[1, 1], &[0.3]));
        let h = g.constant(t(&[1, 1], &[0.8]));
        let out = gru_cell(&mut g, "c", x, h).unwrap();
        assert!((g.value(out).data()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn gru_update_gate_limits() {
        // Update gate closed: the state is carried unchanged.
        let store = gru_store(0.7, 0.4, [0.0, -1e4, 0.1]);
        let mut g = Graph::with_params(&store);
        let x = g.constant(t(&[1, 1], &[0.3]));
        let h = g.constant(t(&[1, 1], &[0.8]));
        let out = gru_cell(&mut g, "c", x, h).unwrap();
        assert_eq!(g.value(out).data()[0], 0.8);

        // Update gate open: the state becomes the candidate.
        let store = gru_store(0.7, 0.4, [0.0, 1e4, 0.1]);
        let mut g = Graph::with_params(&store);
        let x = g.constant(t(&[1, 1], &[0.3]));
        let h = g.constant(t(&[1, 1], &[0.8]));
        let out = gru_cell(&mut g, "c", x, h).unwrap();
        let r = crate::numerics::sigmoid(0.7 * 0.3 + 0.4 * 0.8);
        let cand = (0.7f64 * 0.3 + 0.1 + 0.4 * r * 0.8).tanh();
        assert!((g.value(out).data()[0] - cand).abs() < 1e-15);
    }

    fn cfg(kind: DecoderKind) -> ModelConfig {
        ModelConfig::new(9, 8, kind).with_dims(4, 5, 6)
    }

    #[test]
    fn zero_weights_give_zero_contexts_and_uniform_attention() {
        let c = cfg(DecoderKind::Base);
        let mut store = init_params::<f64>(&c, 1).unwrap();
        zeroed(&mut store);
        let mut g = Graph::with_params(&store);
        let enc = encode(&mut g, &c, &[4, 5, 6, 1], &[4]).unwrap();
        assert!(g.value(enc.z).data().iter().all(|&v| v == 0.0));
        let table = g.param("emb.tgt").unwrap();
        let e = g.embed(table, &[0]).unwrap();
        let q = g.constant(Tensor::zeros(vec![1, c.query_width()]));
        let att = attend(&mut g, &enc, e, q).unwrap();
        for &a in g.value(att.alpha).data() {
            assert!((a - 0.25).abs() < 1e-15);
        }
        let state = initial_state(&mut g, &c, &enc).unwrap();
        let step = decoder_step(&mut g, &c, &enc, &state, &[0]).unwrap();
        for v in step.state.parts() {
            assert!(g.value(v).data().iter().all(|&x| x == 0.0));
        }
        let logp = output_log_probs(&mut g, step.embedding, step.output, step.attention.context).unwrap();
        for &l in g.value(logp).data() {
            assert!((l + (8f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_position_attention_returns_that_context() {
        let c = cfg(DecoderKind::BiScale);
        let store = init_params::<f64>(&c, 2).unwrap();
        let mut g = Graph::with_params(&store);
        let enc = encode(&mut g, &c, &[5], &[1]).unwrap();
        assert_eq!(g.shape(enc.z), &[1, 1, 10]);
        let state = initial_state(&mut g, &c, &enc).unwrap();
        let step = decoder_step(&mut g, &c, &enc, &state, &[0]).unwrap();
        assert_eq!(g.value(step.attention.alpha).data(), &[1.0]);
        assert_eq!(
            g.value(step.attention.context).data(),
            g.value(enc.z).data()
        );
    }

    #[test]
    fn context_lies_in_convex_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..20 {
            let c = cfg(DecoderKind::Base);
            let store = init_params::<f64>(&c, trial).unwrap();
            let mut g = Graph::with_params(&store);
            let len = rng.random_range(1..8);
            let src: Vec<usize> = (0..len).map(|_| rng.random_range(0..9)).collect();
            let enc = encode(&mut g, &c, &src, &[len]).unwrap();
            let table = g.param("emb.tgt").unwrap();
            let e = g.embed(table, &[rng.random_range(0..8)]).unwrap();
            let qd: Vec<f64> = (0..c.query_width()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let q = g.constant(t(&[1, c.query_width()], &qd));
            let att = attend(&mut g, &enc, e, q).unwrap();
            let alpha = g.value(att.alpha).data();
            assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let z = g.value(enc.z);
            let ctx = g.value(att.context).data();
            for (k, &cv) in ctx.iter().enumerate() {
                let col: Vec<f64> = (0..len).map(|ti| z.data()[ti * 10 + k]).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert!(lo - 1e-12 <= cv && cv <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn padding_does_not_change_a_sentence_encoding() {
        let c = cfg(DecoderKind::Base);
        let store = init_params::<f64>(&c, 4).unwrap();
        let mut g = Graph::with_params(&store);
        let alone = encode(&mut g, &c, &[4, 7, 1], &[3]).unwrap();
        let padded = encode(&mut g, &c, &[4, 7, 1, 3, 3, 5, 6, 8, 1, 3], &[3, 4]).unwrap();
        let a = g.value(alone.z).data().to_vec();
        let b = &g.value(padded.z).data()[..a.len()];
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-14);
        }
        let alpha_mask: Vec<bool> = padded.mask.clone();
        assert_eq!(alpha_mask, vec![true, true, true, false, false, true, true, true, true, false]);
    }

    #[test]
    fn identical_steps_are_deterministic() {
        for kind in [DecoderKind::Base, DecoderKind::BiScale] {
            let c = cfg(kind);
            let store = init_params::<f64>(&c, 5).unwrap();
            let mut g = Graph::with_params(&store);
            let enc = encode(&mut g, &c, &[4, 5, 1], &[3]).unwrap();
            let s0 = initial_state(&mut g, &c, &enc).unwrap();
            let a = decoder_step(&mut g, &c, &enc, &s0, &[0]).unwrap();
            let b = decoder_step(&mut g, &c, &enc, &s0, &[0]).unwrap();
            for (x, y) in a.state.parts().into_iter().zip(b.state.parts()) {
                assert_eq!(g.value(x), g.value(y));
            }
        }
    }

    fn random_biscale_state(g: &mut Graph<'_, f64>, rng: &mut ChaCha8Rng, d: usize) -> BiScaleState {
        let mut v = || -> Tensor<f64> {
            let data: Vec<f64> = (0..d).map(|_| rng.random_range(-0.9..0.9)).collect();
            Tensor::new(vec![1, d], data).unwrap()
        };
        BiScaleState {
            h1: g.constant(v()),
            h2: g.constant(v()),
            h1_check: g.constant(v()),
            h2_hat: g.constant(v()),
            h2_check: g.constant(v()),
            gates: None,
        }
    }

    #[test]
    fn closed_faster_gate_freezes_slower_layer() {
        let c = cfg(DecoderKind::BiScale);
        let mut store = init_params::<f64>(&c, 6).unwrap();
        store.get_mut("dec.bs.W_g1").unwrap().data_mut().fill(0.0);
        store.get_mut("dec.bs.b_g1").unwrap().data_mut().fill(-1e4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::with_params(&store);
        let mut state = random_biscale_state(&mut g, &mut rng, 6);
        let h2_0 = g.value(state.h2).clone();
        let table = g.param("emb.tgt").unwrap();
        for step in 0..20 {
            let e = g.embed(table, &[step % 8]).unwrap();
            let cd: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ctx = g.constant(t(&[1, 10], &cd));
            state = biscale_step(&mut g, e, &state, ctx).unwrap();
            assert_eq!(g.value(state.h2), &h2_0);
            assert!(g.value(state.h2_hat).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn open_faster_gate_resets_and_fully_updates() {
        let c = cfg(DecoderKind::BiScale);
        let mut store = init_params::<f64>(&c, 7).unwrap();
        store.get_mut("dec.bs.W_g1").unwrap().data_mut().fill(0.0);
        store.get_mut("dec.bs.b_g1").unwrap().data_mut().fill(1e4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::with_params(&store);
        let mut state = random_biscale_state(&mut g, &mut rng, 6);
        let table = g.param("emb.tgt").unwrap();
        for step in 0..20 {
            let e = g.embed(table, &[step % 8]).unwrap();
            let cd: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ctx = g.constant(t(&[1, 10], &cd));
            state = biscale_step(&mut g, e, &state, ctx).unwrap();
            assert!(g.value(state.h1_check).data().iter().all(|&v| v == 0.0));
            let gates = state.gates.unwrap();
            assert_eq!(g.value(state.h2), g.value(gates.h2_candidate));
        }
    }

    #[test]
    fn gates_in_open_interval_and_reset_identity() {
        let c = cfg(DecoderKind::BiScale);
        let store = init_params::<f64>(&c, 8).unwrap();
        let mut g = Graph::with_params(&store);
        let enc = encode(&mut g, &c, &[4, 5, 6, 1], &[4]).unwrap();
        let mut state = initial_state(&mut g, &c, &enc).unwrap();
        for tok in [0, 5, 6, 7] {
            let step = decoder_step(&mut g, &c, &enc, &state, &[tok]).unwrap();
            let DecoderState::BiScale(s) = step.state else { unreachable!() };
            let gates = s.gates.unwrap();
            for gv in [gates.g1, gates.g2] {
                assert!(g.value(gv).data().iter().all(|&x| x > 0.0 && x < 1.0));
            }
            let (h1, g1, h1c) = (g.value(s.h1), g.value(gates.g1), g.value(s.h1_check));
            for i in 0..6 {
                let sum = h1c.data()[i] + g1.data()[i] * h1.data()[i];
                assert!((sum - h1.data()[i]).abs() < 1e-12);
            }
            state = step.state;
        }
    }

    #[test]
    fn output_argmax_ignores_logit_shift() {
        let c = cfg(DecoderKind::Base);
        let mut store = init_params::<f64>(&c, 10).unwrap();
        let run = |store: &ParameterStore<f64>| -> Vec<f64> {
            let mut g = Graph::with_params(store);
            let e = g.constant(t(&[1, 4], &[0.1, -0.2, 0.3, 0.5]));
            let o = g.constant(t(&[1, 6], &[0.2; 6]));
            let ctx = g.constant(t(&[1, 10], &[-0.1; 10]));
            let lp = output_log_probs(&mut g, e, o, ctx).unwrap();
            g.value(lp).data().to_vec()
        };
        let before = run(&store);
        let total: f64 = before.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        store.get_mut("out.b_s").unwrap().data_mut().iter_mut().for_each(|b| *b += 3.5);
        let after = run(&store);
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0
        };
        assert_eq!(argmax(&before), argmax(&after));
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
