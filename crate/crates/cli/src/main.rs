use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use charnmt::decode::{format_alignment, translate_corpus, Member};
use charnmt::io_util::{read_lines, read_to_string, write_atomic, write_lines};
use charnmt::metrics::{
    bleu, bleu_by_source_length, format_tsv, parse_buckets, power_of_two_buckets, word_frequencies,
    word_nll_by_frequency, WordScorer,
};
use charnmt::model::{sequence_log_prob, DecoderKind};
use charnmt::numerics::{DType, Real};
use charnmt::textpipe::{build_vocab, learn_bpe, MergeTable, ParallelCorpus, Unit, EOS, EOS_ID};
use charnmt::trainer::{
    checkpoint_dtype, parse_key_values, run_training, Checkpoint, TrainConfig, SOURCE_MERGES, SOURCE_VOCAB,
    TARGET_MERGES, TARGET_VOCAB,
};
use charnmt::{Error, Result};

#[derive(Parser)]
#[command(name = "charnmt", version, about = "Subword-to-character neural machine translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn BPE merge operations from whitespace-tokenized text.
    LearnBpe {
        #[arg(long)]
        input: PathBuf,
        /// Number of merge operations.
        #[arg(long)]
        merges: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Build a frequency-ranked vocabulary file.
    BuildVocab {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = ["subword", "char"])]
        unit: String,
        #[arg(long)]
        max_size: usize,
        #[arg(long)]
        output: PathBuf,
        /// Segment the input with these merges before counting subwords.
        #[arg(long)]
        merges: Option<PathBuf>,
    },
    /// Train a model from a `key = value` config file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` settings that take precedence over the file.
        overrides: Vec<String>,
    },
    /// Beam-search translation with one model or an ensemble.
    Translate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Beam width; 5 for subword and 15 for character targets if unset.
        #[arg(long)]
        beam: Option<usize>,
        /// Further checkpoints whose output probabilities are averaged in.
        #[arg(long, num_args = 1..)]
        ensemble: Vec<PathBuf>,
        #[arg(long)]
        dump_align: Option<PathBuf>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Rank finished hypotheses by per-symbol log-probability.
        #[arg(long)]
        normalize: bool,
        /// Refuse checkpoints built with a different decoder.
        #[arg(long)]
        decoder: Option<DecoderKind>,
    },
    /// Corpus BLEU, optionally broken down by source length.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        src: Option<PathBuf>,
        #[arg(long, requires = "src")]
        buckets: Option<String>,
    },
    /// Teacher-forced attention weights for reference translations.
    Align {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        decoder: Option<DecoderKind>,
    },
    /// Mean per-word NLL difference of two models, by training frequency.
    CompareWords {
        #[arg(long)]
        model_a: PathBuf,
        #[arg(long)]
        model_b: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Target side of the training corpus, for word counts.
        #[arg(long)]
        train_ref: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::LearnBpe { input, merges, output } => {
            let lines = read_lines(&input)?;
            let table = learn_bpe(&lines, merges)?;
            table.save(&output)?;
            println!("learned {} merges from {} lines", table.len(), lines.len());
        }
        Command::BuildVocab {
            input,
            unit,
            max_size,
            output,
            merges,
        } => {
            let unit: Unit = unit.parse()?;
            let mut lines = read_lines(&input)?;
            if let Some(m) = merges {
                if unit == Unit::Character {
                    return Err(Error::Config("--merges applies to subword vocabularies only".into()));
                }
                let table = MergeTable::load(&m)?;
                lines = lines.iter().map(|l| table.apply_line(l).join(" ")).collect();
            }
            let vocab = build_vocab(&lines, unit, max_size)?;
            vocab.save(&output)?;
            println!("wrote {} symbols", vocab.len());
        }
        Command::Train { config, overrides } => train(config.as_deref(), &overrides)?,
        Command::Translate {
            model,
            input,
            output,
            beam,
            ensemble,
            dump_align,
            max_len,
            normalize,
            decoder,
        } => {
            let mut paths = vec![model];
            paths.extend(ensemble);
            let job = TranslateJob {
                paths: &paths,
                input: &input,
                output: &output,
                beam,
                dump_align: dump_align.as_deref(),
                max_len,
                normalize,
                decoder,
            };
            match checkpoint_dtype(&paths[0])? {
                DType::F32 => job.run::<f32>()?,
                DType::F64 => job.run::<f64>()?,
            }
        }
        Command::Evaluate {
            hyp,
            reference,
            src,
            buckets,
        } => {
            let hyps = read_lines(&hyp)?;
            let refs = read_lines(&reference)?;
            if hyps.len() != refs.len() {
                return Err(Error::CorpusAlignment {
                    path: hyp,
                    detail: format!("{} lines, reference has {}", hyps.len(), refs.len()),
                });
            }
            println!("{}", bleu(&hyps, &refs)?);
            if let Some(src) = src {
                let sources = read_lines(&src)?;
                let spec = buckets.as_deref().unwrap_or("1-10,11-20,21-30,31-40,41-50,51+");
                let rows: Vec<_> = bleu_by_source_length(&hyps, &refs, &sources, &parse_buckets(spec)?)?
                    .into_iter()
                    .map(|(b, n, r)| (b, n, r.bleu))
                    .collect();
                print!("{}", format_tsv(&rows));
            }
        }
        Command::Align {
            model,
            src,
            tgt,
            output,
            decoder,
        } => {
            let ck = load_checked::<f64>(&model, decoder)?;
            let (source, target) = ck.codecs()?;
            let corpus = ParallelCorpus::read(&src, &tgt)?;
            let mut out = String::new();
            for (i, (s, t)) in corpus.pairs().enumerate() {
                let mut symbols = source.segment(s);
                let mut src_ids = source.vocab().encode(&symbols);
                src_ids.push(EOS_ID);
                symbols.push(EOS.to_string());
                let mut tgt_ids = target.encode(t);
                tgt_ids.push(EOS_ID);
                let score = sequence_log_prob(&ck.params, &ck.model, &src_ids, &tgt_ids)?;
                out.push_str(&format_alignment(i + 1, &symbols, &score.alignment));
            }
            write_atomic(&output, out.as_bytes())?;
            println!("aligned {} sentence pairs", corpus.len());
        }
        Command::CompareWords {
            model_a,
            model_b,
            src,
            reference,
            train_ref,
        } => {
            let a = Checkpoint::<f64>::load(&model_a)?;
            let b = Checkpoint::<f64>::load(&model_b)?;
            if a.artifact(SOURCE_VOCAB) != b.artifact(SOURCE_VOCAB)
                || a.artifact(SOURCE_MERGES) != b.artifact(SOURCE_MERGES)
            {
                return Err(Error::Consistency("the two models use different source pipelines".into()));
            }
            let (sa, ta) = a.codecs()?;
            let (_, tb) = b.codecs()?;
            let wa = WordScorer {
                member: Member::new(&a.params, &a.model),
                source: &sa,
                target: &ta,
            };
            let wb = WordScorer {
                member: Member::new(&b.params, &b.model),
                source: &sa,
                target: &tb,
            };
            let test = ParallelCorpus::read(&src, &reference)?;
            let freqs = word_frequencies(&read_lines(&train_ref)?);
            let buckets = power_of_two_buckets(freqs.values().copied().max().unwrap_or(0));
            let rows: Vec<_> = word_nll_by_frequency(&wa, &wb, &test, &freqs, &buckets)?
                .into_iter()
                .map(|r| (r.bucket, r.count, r.mean_diff))
                .collect();
            print!("{}", format_tsv(&rows));
        }
    }
    Ok(())
}

fn train(config: Option<&Path>, overrides: &[String]) -> Result<()> {
    let mut entries = Vec::new();
    if let Some(path) = config {
        let base = path.parent().unwrap_or(Path::new(""));
        for (k, v) in parse_key_values(&read_to_string(path)?)? {
            let v = if TrainConfig::PATH_KEYS.contains(&k.as_str()) && !v.is_empty() && Path::new(&v).is_relative() {
                base.join(&v).display().to_string()
            } else {
                v
            };
            entries.push((k, v));
        }
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
        entries.push((k.trim().to_string(), v.trim().to_string()));
    }
    let cfg = TrainConfig::from_entries(&entries)?;
    let summary = run_training(&cfg, &mut |line| {
        let step: u64 = line.split('\t').next().and_then(|s| s.parse().ok()).unwrap_or(0);
        if step % 100 == 0 || !line.ends_with("\t-") {
            println!("{line}");
        }
    })?;
    println!(
        "trained to step {}; latest checkpoint {}",
        summary.steps,
        summary.latest.display()
    );
    if let (Some(best), Some(nll)) = (&summary.best, summary.best_dev_nll) {
        println!("best checkpoint {} (dev nll {nll:.6})", best.display());
    }
    if summary.dropped > 0 {
        println!("{} training pairs exceeded the length limits", summary.dropped);
    }
    Ok(())
}

fn load_checked<T: Real>(path: &Path, decoder: Option<DecoderKind>) -> Result<Checkpoint<T>> {
    let ck = Checkpoint::<T>::load(path)?;
    if let Some(kind) = decoder {
        if kind != ck.model.decoder {
            return Err(Error::Config(format!(
                "{} holds a {} decoder, which conflicts with --decoder {kind}",
                path.display(),
                ck.model.decoder
            )));
        }
    }
    Ok(ck)
}

struct TranslateJob<'a> {
    paths: &'a [PathBuf],
    input: &'a Path,
    output: &'a Path,
    beam: Option<usize>,
    dump_align: Option<&'a Path>,
    max_len: Option<usize>,
    normalize: bool,
    decoder: Option<DecoderKind>,
}

impl TranslateJob<'_> {
    fn run<T: Real>(&self) -> Result<()> {
        let checkpoints = self
            .paths
            .iter()
            .map(|p| load_checked::<T>(p, self.decoder))
            .collect::<Result<Vec<_>>>()?;
        let (source, target) = checkpoints[0].codecs()?;
        for (p, ck) in self.paths.iter().zip(&checkpoints).skip(1) {
            ck.codecs()?;
            let same = [SOURCE_VOCAB, SOURCE_MERGES, TARGET_VOCAB, TARGET_MERGES]
                .iter()
                .all(|r| ck.artifact(r) == checkpoints[0].artifact(r))
                && ck.target_unit == checkpoints[0].target_unit;
            if !same {
                return Err(Error::Ensemble(format!(
                    "{} uses different vocabularies from {}",
                    p.display(),
                    self.paths[0].display()
                )));
            }
        }
        let members: Vec<Member<'_, T>> = checkpoints.iter().map(|c| Member::new(&c.params, &c.model)).collect();
        let lines = read_lines(self.input)?;
        let width = self.beam.unwrap_or(match target.unit() {
            Unit::Subword => 5,
            Unit::Character => 15,
        });
        let results = translate_corpus(&members, &source, &target, &lines, width, self.max_len, self.normalize)?;
        let texts: Vec<&str> = results.iter().map(|t| t.text.as_str()).collect();
        if let Some(path) = self.dump_align {
            let mut out = String::new();
            for (i, t) in results.iter().enumerate() {
                out.push_str(&format_alignment(i + 1, &t.source_symbols, &t.best.alignment));
            }
            write_atomic(path, out.as_bytes())?;
        }
        write_lines(self.output, &texts)?;
        let truncated = results.iter().filter(|t| t.best.truncated).count();
        println!(
            "translated {} sentences with beam {width} and {} model(s); {truncated} hit the length limit",
            results.len(),
            members.len()
        );
        Ok(())
    }
}
