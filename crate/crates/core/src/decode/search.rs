use std::cmp::Ordering;

use super::{check_ensemble, ensemble_log_probs, Hypothesis, Member};
use crate::error::{Error, Result};
use crate::model::{decoder_step, encode, initial_state, output_log_probs, DecoderState, Encoding, ModelConfig};
use crate::numerics::{Graph, Real};
use crate::textpipe::{BOS_ID, EOS_ID, PAD_ID};

/// Decoding state of one ensemble member.
struct Run<'a, T: Real> {
    g: Graph<'a, T>,
    cfg: &'a ModelConfig,
    enc: Encoding,
    /// Every decoder row reads source row 0 (beam search over one sentence).
    shared_source: bool,
    repeated: Option<Encoding>,
    state: DecoderState,
}

fn start<'a, T: Real>(
    members: &[Member<'a, T>],
    source: &[usize],
    lengths: &[usize],
    shared_source: bool,
) -> Result<Vec<Run<'a, T>>> {
    check_ensemble(members)?;
    members
        .iter()
        .map(|m| {
            let mut g = Graph::with_params(m.params);
            let enc = encode(&mut g, m.config, source, lengths)?;
            let state = initial_state(&mut g, m.config, &enc)?;
            Ok(Run {
                g,
                cfg: m.config,
                enc,
                shared_source,
                repeated: None,
                state,
            })
        })
        .collect()
}

/// Feeds `prev` to every member. Returns ensemble log-probabilities and
/// member-averaged attention rows, one of each per decoder row.
fn advance<T: Real>(runs: &mut [Run<'_, T>], prev: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let k = prev.len();
    let mut per_member: Vec<Vec<Vec<f64>>> = Vec::with_capacity(runs.len());
    let mut alignment: Vec<Vec<f64>> = Vec::new();
    for run in runs.iter_mut() {
        let Run {
            g,
            cfg,
            enc,
            shared_source,
            repeated,
            state,
        } = run;
        let enc_k = if !*shared_source || k == enc.batch {
            &*enc
        } else {
            if repeated.as_ref().map(|r| r.batch) != Some(k) {
                *repeated = Some(enc.repeat_row(g, 0, k)?);
            }
            repeated.as_ref().expect("just set")
        };
        let step = decoder_step(g, cfg, enc_k, state, prev)?;
        let logp = output_log_probs(g, step.embedding, step.output, step.attention.context)?;
        let lv = g.value(logp);
        per_member.push((0..k).map(|r| lv.row(r).iter().map(|v| v.to_f64_lossy()).collect()).collect());
        let av = g.value(step.attention.alpha);
        if alignment.is_empty() {
            alignment = vec![vec![0.0; av.cols()]; k];
        }
        for (r, row) in alignment.iter_mut().enumerate() {
            for (dst, a) in row.iter_mut().zip(av.row(r)) {
                *dst += a.to_f64_lossy();
            }
        }
        *state = step.state;
    }
    let m = runs.len() as f64;
    if runs.len() > 1 {
        for row in alignment.iter_mut() {
            row.iter_mut().for_each(|a| *a /= m);
        }
    }
    let combined = (0..k)
        .map(|r| {
            let rows: Vec<&[f64]> = per_member.iter().map(|pm| pm[r].as_slice()).collect();
            ensemble_log_probs(&rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((combined, alignment))
}

fn reorder<T: Real>(runs: &mut [Run<'_, T>], parents: &[usize]) -> Result<()> {
    let identity = parents.iter().enumerate().all(|(i, &p)| i == p) && parents.len() == runs[0].rows();
    if identity {
        return Ok(());
    }
    for run in runs.iter_mut() {
        run.state = run.state.select(&mut run.g, parents)?;
    }
    Ok(())
}

impl<T: Real> Run<'_, T> {
    fn rows(&self) -> usize {
        let v = self.state.parts()[0];
        self.g.shape(v)[0]
    }
}

fn check_source(source: &[usize], max_len: usize) -> Result<()> {
    if source.is_empty() {
        return Err(Error::Contract("cannot decode an empty source".into()));
    }
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    Ok(())
}

/// Index of the largest value; the lowest index wins ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Repeatedly emits the most probable symbol until EOS or `max_len`.
pub fn greedy<T: Real>(members: &[Member<'_, T>], source: &[usize], max_len: usize) -> Result<Hypothesis> {
    check_source(source, max_len)?;
    let mut runs = start(members, source, &[source.len()], true)?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        alignment: Vec::new(),
        truncated: false,
    };
    let mut prev = BOS_ID;
    for _ in 0..max_len {
        let (lp, mut al) = advance(&mut runs, &[prev])?;
        let y = argmax(&lp[0]);
        hyp.score += lp[0][y];
        hyp.tokens.push(y);
        hyp.alignment.push(al.swap_remove(0));
        if y == EOS_ID {
            return Ok(hyp);
        }
        prev = y;
    }
    hyp.truncated = true;
    Ok(hyp)
}

/// Greedy decoding of many sentences at once. Returns the emitted tokens
/// of each sentence, ending in EOS unless its `max_len` was reached.
pub fn greedy_batch<T: Real>(
    members: &[Member<'_, T>],
    sources: &[Vec<usize>],
    max_lens: &[usize],
) -> Result<Vec<Vec<usize>>> {
    if sources.len() != max_lens.len() {
        return Err(Error::Contract("one max_len per source is required".into()));
    }
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    for (s, &m) in sources.iter().zip(max_lens) {
        check_source(s, m)?;
    }
    let width = sources.iter().map(Vec::len).max().expect("non-empty");
    let lengths: Vec<usize> = sources.iter().map(Vec::len).collect();
    let mut padded = Vec::with_capacity(width * sources.len());
    for s in sources {
        padded.extend_from_slice(s);
        padded.resize(padded.len() + width - s.len(), PAD_ID);
    }
    let mut runs = start(members, &padded, &lengths, false)?;
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); sources.len()];
    let mut done: Vec<bool> = vec![false; sources.len()];
    let mut prev = vec![BOS_ID; sources.len()];
    let longest = *max_lens.iter().max().expect("non-empty");
    for t in 0..longest {
        let (lp, _) = advance(&mut runs, &prev)?;
        for (b, row) in lp.iter().enumerate() {
            if done[b] {
                prev[b] = EOS_ID;
                continue;
            }
            let y = argmax(row);
            out[b].push(y);
            prev[b] = y;
            if y == EOS_ID || t + 1 >= max_lens[b] {
                done[b] = true;
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamOptions {
    pub width: usize,
    pub max_len: usize,
    /// Rank completed hypotheses by score per emitted symbol.
    pub length_normalize: bool,
}

impl BeamOptions {
    pub fn new(width: usize, max_len: usize) -> Self {
        BeamOptions {
            width,
            max_len,
            length_normalize: false,
        }
    }
}

struct Live {
    tokens: Vec<usize>,
    score: f64,
    alignment: Vec<Vec<f64>>,
}

struct Candidate {
    total: f64,
    step: f64,
    token: usize,
    parent: usize,
}

/// Higher total first; equal totals prefer the larger step score, then
/// the lower token index, then the earlier parent. With one live
/// hypothesis this reproduces greedy argmax exactly.
fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.total
        .total_cmp(&a.total)
        .then_with(|| b.step.total_cmp(&a.step))
        .then_with(|| a.token.cmp(&b.token))
        .then_with(|| a.parent.cmp(&b.parent))
}

/// Beam search without length normalization (unless requested). The beam
/// shrinks by one for every hypothesis that emits EOS; search stops when
/// `width` hypotheses are complete, when no live hypothesis can still beat
/// the best complete one, or at `max_len`, where live hypotheses are
/// closed as truncated. Returns completed hypotheses, best first.
pub fn beam_search<T: Real>(
    members: &[Member<'_, T>],
    source: &[usize],
    options: BeamOptions,
) -> Result<Vec<Hypothesis>> {
    let BeamOptions { width, max_len, .. } = options;
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    check_source(source, max_len)?;
    let mut runs = start(members, source, &[source.len()], true)?;
    let mut live = vec![Live {
        tokens: Vec::new(),
        score: 0.0,
        alignment: Vec::new(),
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        let prev: Vec<usize> = live.iter().map(|h| *h.tokens.last().unwrap_or(&BOS_ID)).collect();
        let (lp, al) = advance(&mut runs, &prev)?;
        let room = width - pool.len();
        let mut cands: Vec<Candidate> = Vec::with_capacity(live.len() * lp[0].len());
        for (parent, (h, row)) in live.iter().zip(&lp).enumerate() {
            for (token, &step) in row.iter().enumerate() {
                cands.push(Candidate {
                    total: h.score + step,
                    step,
                    token,
                    parent,
                });
            }
        }
        if cands.len() > room {
            cands.select_nth_unstable_by(room - 1, candidate_order);
            cands.truncate(room);
        }
        cands.sort_by(candidate_order);

        let mut next = Vec::with_capacity(cands.len());
        let mut parents = Vec::with_capacity(cands.len());
        for c in cands {
            let h = &live[c.parent];
            let mut tokens = h.tokens.clone();
            tokens.push(c.token);
            let mut alignment = h.alignment.clone();
            alignment.push(al[c.parent].clone());
            if c.token == EOS_ID {
                pool.push(Hypothesis {
                    tokens,
                    score: c.total,
                    alignment,
                    truncated: false,
                });
            } else {
                parents.push(c.parent);
                next.push(Live {
                    tokens,
                    score: c.total,
                    alignment,
                });
            }
        }
        live = next;
        if live.is_empty() || pool.len() >= width {
            break;
        }
        let best_done = pool.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if !options.length_normalize && live.iter().all(|h| h.score < best_done) {
            live.clear();
            break;
        }
        reorder(&mut runs, &parents)?;
    }
    for h in live {
        pool.push(Hypothesis {
            tokens: h.tokens,
            score: h.score,
            alignment: h.alignment,
            truncated: true,
        });
    }
    let key = |h: &Hypothesis| {
        if options.length_normalize {
            h.score / h.tokens.len().max(1) as f64
        } else {
            h.score
        }
    };
    pool.sort_by(|a, b| key(b).total_cmp(&key(a)));
    Ok(pool)
}
