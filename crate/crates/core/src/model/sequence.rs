use super::layers::{decoder_step, encode, initial_state, output_log_probs};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParameterStore, Real, Var};
use crate::textpipe::{Batch, BOS_ID};

/// Teacher-forced pass over a padded batch.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    /// `[B * T, |V_y|]` log-probabilities, row `b * T + i` predicting
    /// target position `i + 1`.
    pub log_probs: Var,
    pub targets: Vec<usize>,
    /// False where the predicted position is padding.
    pub scored: Vec<bool>,
    /// Per decoder step, `[B, Tx]` attention weights.
    pub alphas: Vec<Var>,
    pub steps: usize,
}

/// Runs encoder and decoder with the reference symbols as decoder inputs.
pub fn teacher_forced<T: Real>(g: &mut Graph<'_, T>, cfg: &ModelConfig, batch: &Batch) -> Result<TeacherForced> {
    run_rows(
        g,
        cfg,
        &batch.source,
        &batch.source_lengths,
        &batch.target,
        &batch.target_lengths,
    )
}

fn run_rows<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    source: &[usize],
    source_lengths: &[usize],
    target: &[usize],
    target_lengths: &[usize],
) -> Result<TeacherForced> {
    let rows = target_lengths.len();
    let width = target.len() / rows.max(1);
    if rows == 0 || width < 2 || width * rows != target.len() {
        return Err(Error::Contract(format!(
            "target of {} indices cannot hold {rows} rows of at least two symbols",
            target.len()
        )));
    }
    let enc = encode(g, cfg, source, source_lengths)?;
    let mut state = initial_state(g, cfg, &enc)?;
    let steps = width - 1;
    let (mut embs, mut outs, mut ctxs, mut alphas) = (vec![], vec![], vec![], vec![]);
    for i in 0..steps {
        let prev: Vec<usize> = (0..rows).map(|b| target[b * width + i]).collect();
        let step = decoder_step(g, cfg, &enc, &state, &prev)?;
        embs.push(step.embedding);
        outs.push(step.output);
        ctxs.push(step.attention.context);
        alphas.push(step.attention.alpha);
        state = step.state;
    }
    let e = g.stack_time(&embs)?;
    let o = g.stack_time(&outs)?;
    let c = g.stack_time(&ctxs)?;
    let logp = output_log_probs(g, e, o, c)?;
    let log_probs = g.reshape(logp, &[rows * steps, cfg.tgt_vocab])?;
    let mut targets = Vec::with_capacity(rows * steps);
    let mut scored = Vec::with_capacity(rows * steps);
    for (b, &len) in target_lengths.iter().enumerate() {
        for i in 0..steps {
            targets.push(target[b * width + i + 1]);
            scored.push(i + 1 < len);
        }
    }
    Ok(TeacherForced {
        log_probs,
        targets,
        scored,
        alphas,
        steps,
    })
}

/// `log p(Y | X)` with its per-position terms and the `[T_y, T_x]`
/// alignment matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceScore {
    pub total: f64,
    pub per_position: Vec<f64>,
    pub alignment: Vec<Vec<f64>>,
}

/// Scores `target` (without BOS) given `source`, both as index sequences
/// that normally end in EOS.
pub fn sequence_log_prob<T: Real>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    source: &[usize],
    target: &[usize],
) -> Result<SequenceScore> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Contract("sequence_log_prob needs nonempty sequences".into()));
    }
    let mut g = Graph::with_params(params);
    let mut tgt = Vec::with_capacity(target.len() + 1);
    tgt.push(BOS_ID);
    tgt.extend_from_slice(target);
    let tf = run_rows(&mut g, cfg, source, &[source.len()], &tgt, &[tgt.len()])?;
    let lp = g.value(tf.log_probs);
    let per_position: Vec<f64> = tf
        .targets
        .iter()
        .enumerate()
        .map(|(i, &y)| lp.row(i)[y].to_f64_lossy())
        .collect();
    let alignment = tf
        .alphas
        .iter()
        .map(|&a| g.value(a).data().iter().map(|v| v.to_f64_lossy()).collect())
        .collect();
    Ok(SequenceScore {
        total: per_position.iter().sum(),
        per_position,
        alignment,
    })
}
