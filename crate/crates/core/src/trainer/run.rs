use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::checkpoint::{
    codecs_from_artifacts, Artifact, Checkpoint, SOURCE_MERGES, SOURCE_VOCAB, TARGET_MERGES, TARGET_VOCAB,
};
use super::{adam_step, batch_nll, clip_gradients, OptimizerState, TrainConfig};
use crate::decode::{default_max_len, greedy_batch, Member};
use crate::error::{Error, Result};
use crate::metrics::bleu;
use crate::model::{init_params, ModelConfig};
use crate::numerics::{Graph, ParameterStore, Precision, Real};
use crate::textpipe::{Batch, Codec, EncodedCorpus, EncodedPair, ParallelCorpus, EOS_ID};

pub const LATEST_DIR: &str = "latest";
pub const BEST_DIR: &str = "best";
pub const LOG_FILE: &str = "train.log";

/// Held-out pairs in file order, with the raw reference lines for BLEU.
#[derive(Clone, Debug)]
pub struct DevSet {
    pub batches: Vec<Batch>,
    /// Source indices with EOS appended.
    pub sources: Vec<Vec<usize>>,
    pub references: Vec<String>,
}

impl DevSet {
    /// Pairs whose source encodes to nothing are skipped; nothing else is
    /// filtered.
    pub fn new(corpus: &ParallelCorpus, source: &Codec, target: &Codec, batch_size: usize) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut references = Vec::new();
        for (s, t) in corpus.pairs() {
            let src = source.encode(s);
            if src.is_empty() {
                continue;
            }
            pairs.push(EncodedPair {
                source: src,
                target: target.encode(t),
            });
            references.push(t.to_string());
        }
        let batches = pairs
            .chunks(batch_size.max(1))
            .map(|c| Batch::from_pairs(&c.iter().collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        let sources = pairs
            .into_iter()
            .map(|mut p| {
                p.source.push(EOS_ID);
                p.source
            })
            .collect();
        Ok(DevSet {
            batches,
            sources,
            references,
        })
    }

    pub fn len(&self) -> usize {
        self.references.len()
    }

    pub fn is_empty(&self) -> bool {
        self.references.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// 1-based number of the update just applied.
    pub step: u64,
    pub epoch: u64,
    pub batch: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Validation {
    pub nll: f64,
    pub bleu: f64,
}

/// Token-weighted mean NLL over `batches`.
pub fn corpus_nll<T: Real>(params: &ParameterStore<T>, model: &ModelConfig, batches: &[Batch]) -> Result<f64> {
    let (mut total, mut tokens) = (0.0, 0usize);
    for b in batches {
        let mut g = Graph::with_params(params);
        let loss = batch_nll(&mut g, model, b)?;
        let n = b.num_target_tokens();
        total += g.value(loss).item().to_f64_lossy() * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Contract("no scored tokens to average".into()));
    }
    Ok(total / tokens as f64)
}

/// Greedy translations of `sources` (EOS-terminated indices), decoded in
/// chunks of `chunk` sentences.
pub fn greedy_translate<T: Real>(
    member: Member<'_, T>,
    target: &Codec,
    sources: &[Vec<usize>],
    chunk: usize,
) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(sources.len());
    for part in sources.chunks(chunk.max(1)) {
        let max_lens: Vec<usize> = part.iter().map(|s| default_max_len(target.unit(), s.len() - 1)).collect();
        for tokens in greedy_batch(&[member], part, &max_lens)? {
            out.push(target.detokenize(&tokens)?);
        }
    }
    Ok(out)
}

/// Owns the parameters and optimizer state of one run. The batch used at
/// any step depends only on the seed and the step number, so a resumed
/// run sees the same data as an uninterrupted one.
pub struct Trainer<'d, T> {
    pub model: ModelConfig,
    pub params: ParameterStore<T>,
    pub optimizer: OptimizerState<T>,
    pub best_dev_nll: Option<f64>,
    config: TrainConfig,
    data: &'d EncodedCorpus,
    epoch: Option<(u64, Vec<Batch>)>,
}

impl<'d, T: Real> Trainer<'d, T> {
    pub fn new(config: &TrainConfig, model: ModelConfig, data: &'d EncodedCorpus) -> Result<Self> {
        let params = init_params(&model, config.seed)?;
        let optimizer = OptimizerState::new(&params);
        Self::assemble(config, model, params, optimizer, None, data)
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(config: &TrainConfig, ck: Checkpoint<T>, data: &'d EncodedCorpus) -> Result<Self> {
        let optimizer = ck
            .optimizer
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state to resume from".into()))?;
        Self::assemble(config, ck.model, ck.params, optimizer, ck.best_dev_nll, data)
    }

    fn assemble(
        config: &TrainConfig,
        model: ModelConfig,
        params: ParameterStore<T>,
        optimizer: OptimizerState<T>,
        best_dev_nll: Option<f64>,
        data: &'d EncodedCorpus,
    ) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Domain("training corpus has no usable sentence pairs".into()));
        }
        Ok(Trainer {
            model,
            params,
            optimizer,
            best_dev_nll,
            config: config.clone(),
            data,
            epoch: None,
        })
    }

    /// Number of updates applied so far.
    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.data.len().div_ceil(self.config.batch_size) as u64
    }

    /// The batch consumed by the update after `step` completed updates.
    pub fn batch_at(&mut self, step: u64) -> Result<(u64, usize, &Batch)> {
        let nb = self.batches_per_epoch();
        let (epoch, index) = (step / nb, (step % nb) as usize);
        if self.epoch.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let seed = self.config.seed.wrapping_add(epoch);
            let bs = self.config.batch_size;
            let batches = if self.config.bucket_window > 0 {
                self.data.bucketed_batches(bs, seed, self.config.bucket_window)?
            } else {
                self.data.batches(bs, seed)?
            };
            self.epoch = Some((epoch, batches));
        }
        let batches = &self.epoch.as_ref().expect("epoch cached").1;
        Ok((epoch, index, &batches[index]))
    }

    /// Loss of the batch that the next update would use, without updating.
    pub fn next_loss(&mut self) -> Result<f64> {
        let step = self.step();
        let model = self.model.clone();
        let (_, _, batch) = self.batch_at(step)?;
        let batch = batch.clone();
        let mut g = Graph::with_params(&self.params);
        let loss = batch_nll(&mut g, &model, &batch)?;
        Ok(g.value(loss).item().to_f64_lossy())
    }

    /// One forward/backward pass, gradient clipping and Adam update.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let step = self.step();
        let model = self.model.clone();
        let (epoch, index, batch) = self.batch_at(step)?;
        let batch = batch.clone();
        let diverged = |what: &str| {
            Error::Diverged(format!(
                "{what} at step {} (epoch {epoch}, batch {index})",
                step + 1
            ))
        };
        let mut g = Graph::with_params(&self.params);
        let (loss, mut grads) = match batch_nll(&mut g, &model, &batch).and_then(|l| {
            let v = g.value(l).item().to_f64_lossy();
            Ok((v, g.backward(l)?))
        }) {
            Ok(r) => r,
            Err(Error::NonFinite { op }) => return Err(diverged(&format!("non-finite value in `{op}`"))),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(diverged(&format!("loss {loss}")));
        }
        let grad_norm = clip_gradients(&mut grads, self.config.clip)?;
        if !grad_norm.is_finite() {
            return Err(diverged(&format!("gradient norm {grad_norm}")));
        }
        adam_step(&mut self.params, &grads, &mut self.optimizer, &self.config.adam)?;
        Ok(StepReport {
            step: step + 1,
            epoch,
            batch: index,
            loss,
            grad_norm,
        })
    }

    /// Dev NLL and greedy-decoding BLEU on the current parameters.
    pub fn validate(&self, dev: &DevSet, target: &Codec) -> Result<Validation> {
        let nll = corpus_nll(&self.params, &self.model, &dev.batches)?;
        let member = Member::new(&self.params, &self.model);
        let hyps = greedy_translate(member, target, &dev.sources, self.config.batch_size)?;
        Ok(Validation {
            nll,
            bleu: bleu(&hyps, &dev.references)?.bleu,
        })
    }

    pub fn checkpoint(&self, artifacts: &[Artifact]) -> Checkpoint<T> {
        Checkpoint {
            step: self.step(),
            model: self.model.clone(),
            target_unit: self.config.target_unit,
            config_text: self.config.to_text(),
            params: self.params.clone(),
            optimizer: Some(self.optimizer.clone()),
            best_dev_nll: self.best_dev_nll,
            artifacts: artifacts.to_vec(),
        }
    }
}

/// One line of the training log: `step, loss, grad_norm, dev_nll,
/// dev_bleu`, tab-separated, `-` where no validation ran.
pub fn log_line(report: &StepReport, validation: Option<&Validation>) -> String {
    let (nll, bleu) = match validation {
        Some(v) => (format!("{:.6}", v.nll), format!("{:.4}", v.bleu)),
        None => ("-".to_string(), "-".to_string()),
    };
    format!(
        "{}\t{:.6}\t{:.6}\t{nll}\t{bleu}",
        report.step, report.loss, report.grad_norm
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub last_loss: Option<f64>,
    pub best_dev_nll: Option<f64>,
    pub latest: PathBuf,
    pub best: Option<PathBuf>,
    /// Training pairs dropped by the length limits.
    pub dropped: usize,
}

fn require<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("`{key}` must be set")))
}

fn check_exists(path: &Path) -> Result<()> {
    fs::metadata(path).map(|_| ()).map_err(|e| Error::io(path, e))
}

/// Full training run driven by `config`: loads data, trains, validates
/// every `valid_interval` steps and writes `latest`, `best` and
/// `train.log` under the output directory. `progress` receives each log
/// line as it is written.
pub fn run_training(config: &TrainConfig, progress: &mut dyn FnMut(&str)) -> Result<TrainSummary> {
    config.validate()?;
    match config.precision {
        Precision::Narrow => run_typed::<f32>(config, progress),
        Precision::Wide => run_typed::<f64>(config, progress),
    }
}

fn run_typed<T: Real>(config: &TrainConfig, progress: &mut dyn FnMut(&str)) -> Result<TrainSummary> {
    let train_src = require(&config.train_source, "train_source")?;
    let train_tgt = require(&config.train_target, "train_target")?;
    let output = require(&config.output_dir, "output_dir")?;
    let mut roles = vec![
        (SOURCE_VOCAB, require(&config.source_vocab, "source_vocab")?),
        (TARGET_VOCAB, require(&config.target_vocab, "target_vocab")?),
    ];
    if let Some(p) = &config.source_merges {
        roles.push((SOURCE_MERGES, p));
    }
    if let Some(p) = &config.target_merges {
        roles.push((TARGET_MERGES, p));
    }
    let dev_paths = match (&config.dev_source, &config.dev_target) {
        (Some(s), Some(t)) => Some((s.as_path(), t.as_path())),
        (None, None) => None,
        _ => return Err(Error::Config("`dev_source` and `dev_target` must be set together".into())),
    };
    let mut inputs: Vec<&Path> = vec![train_src, train_tgt];
    inputs.extend(roles.iter().map(|(_, p)| *p));
    if let Some((s, t)) = dev_paths {
        inputs.extend([s, t]);
    }
    if let Some(r) = &config.resume {
        inputs.push(r);
    }
    for p in inputs {
        check_exists(p)?;
    }

    let artifacts: Vec<Artifact> = roles
        .iter()
        .map(|(role, p)| Artifact::read(role, p))
        .collect::<Result<_>>()?;
    let (source, target) = codecs_from_artifacts(config.target_unit, &artifacts)?;
    let corpus = ParallelCorpus::read(train_src, train_tgt)?;
    let data = EncodedCorpus::encode(&corpus, &source, &target, config.limits());
    let dev = match dev_paths {
        Some((s, t)) => Some(DevSet::new(&ParallelCorpus::read(s, t)?, &source, &target, config.batch_size)?)
            .filter(|d| !d.is_empty()),
        None => None,
    };
    let model = config.model_config(source.vocab().len(), target.vocab().len());
    model.validate()?;

    let mut trainer = match &config.resume {
        Some(dir) => {
            let ck = Checkpoint::<T>::load(dir)?;
            if ck.model != model {
                return Err(Error::Config(format!(
                    "resume checkpoint {} conflicts with the configured model: {:?} vs {:?}",
                    dir.display(),
                    ck.model,
                    model
                )));
            }
            if ck.artifacts != artifacts {
                return Err(Error::Consistency(format!(
                    "resume checkpoint {} was trained with different vocabulary or merge files",
                    dir.display()
                )));
            }
            Trainer::resume(config, ck, &data)?
        }
        None => Trainer::new(config, model, &data)?,
    };

    fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    let log_path = output.join(LOG_FILE);
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let latest = output.join(LATEST_DIR);
    let best = output.join(BEST_DIR);
    let mut last_loss = None;

    while trainer.step() < config.max_steps {
        let report = trainer.train_step()?;
        last_loss = Some(report.loss);
        let at_boundary = report.step % config.valid_interval == 0 || report.step == config.max_steps;
        let validation = match (&dev, at_boundary) {
            (Some(d), true) => Some(trainer.validate(d, &target)?),
            _ => None,
        };
        let line = log_line(&report, validation.as_ref());
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        progress(&line);
        if let Some(v) = validation {
            if trainer.best_dev_nll.is_none_or(|b| v.nll < b) {
                trainer.best_dev_nll = Some(v.nll);
                trainer.checkpoint(&artifacts).save(&best)?;
            }
        }
        if at_boundary {
            trainer.checkpoint(&artifacts).save(&latest)?;
        }
    }
    if !latest.exists() || trainer.step() == 0 {
        trainer.checkpoint(&artifacts).save(&latest)?;
    }
    Ok(TrainSummary {
        steps: trainer.step(),
        last_loss,
        best_dev_nll: trainer.best_dev_nll,
        latest,
        best: best.exists().then_some(best),
        dropped: data.dropped,
    })
}
