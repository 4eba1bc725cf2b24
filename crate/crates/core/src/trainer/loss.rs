use crate::error::{Error, Result};
use crate::model::{teacher_forced, ModelConfig, TeacherForced};
use crate::numerics::{Graph, Real, Var};
use crate::textpipe::Batch;

/// Mean negative log-likelihood per scored (non-PAD) target symbol.
pub fn batch_nll<T: Real>(g: &mut Graph<'_, T>, cfg: &ModelConfig, batch: &Batch) -> Result<Var> {
    Ok(batch_nll_detailed(g, cfg, batch)?.0)
}

/// [`batch_nll`] together with the teacher-forced pass it was built from.
pub fn batch_nll_detailed<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    batch: &Batch,
) -> Result<(Var, TeacherForced)> {
    let tf = teacher_forced(g, cfg, batch)?;
    let count = tf.scored.iter().filter(|&&s| s).count();
    if count == 0 {
        return Err(Error::Contract("batch has no scored target symbols".into()));
    }
    let w = T::one() / T::from_usize(count).expect("count fits");
    let weights: Vec<T> = tf
        .scored
        .iter()
        .map(|&s| if s { w } else { T::zero() })
        .collect();
    let loss = g.nll(tf.log_probs, &tf.targets, &weights)?;
    Ok((loss, tf))
}
