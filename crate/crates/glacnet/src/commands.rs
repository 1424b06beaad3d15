//! The operations behind each CLI subcommand.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use glacnet_core::corpus::{build_vocab, synth_corpus, CorpusSplit, StoryRecord, SynthSpec, Vocabulary};
use glacnet_core::gradcheck::{check_tiny, GradCheckReport};
use glacnet_core::sampler::StorySampler;
use glacnet_core::train::{ablation_matrix, evaluate_perplexity, train, Ablation};

use crate::checkpoint::CheckpointFile;
use crate::config_file::RunConfig;
use crate::corpus_io::{read_corpus, read_features, write_corpus};
use crate::exempt::{exempt_ids, parse_exempt_words, read_exempt_words, DEFAULT_EXEMPT_WORDS};

/// Inputs of the `train` subcommand.
#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub corpus: PathBuf,
    pub config: PathBuf,
    pub seed: u64,
    pub out: PathBuf,
    pub validation: Option<PathBuf>,
}

fn exempt_words(config: &RunConfig) -> Result<Vec<String>> {
    match &config.exempt_file {
        Some(path) => Ok(read_exempt_words(path)?),
        None => Ok(parse_exempt_words(DEFAULT_EXEMPT_WORDS)),
    }
}

fn encode_all(vocab: &Vocabulary, path: &Path) -> Result<Vec<StoryRecord>> {
    read_corpus(path)?
        .iter()
        .map(|s| vocab.encode_story(s).map_err(Into::into))
        .collect()
}

/// Trains on `args.corpus` and writes the checkpoint. One line of metrics
/// per epoch goes to `log`.
pub fn run_train(args: &TrainArgs, log: &mut dyn Write) -> Result<CheckpointFile> {
    let mut config = RunConfig::read(&args.config)?;
    config.train.seed = args.seed;
    config.train.validate()?;

    let texts = read_corpus(&args.corpus)?;
    ensure!(!texts.is_empty(), "{}: corpus is empty", args.corpus.display());
    let dim = texts[0].validate()?;
    if dim != config.train.encoder.feature_dim {
        bail!(
            "corpus has {dim}-dimensional features but feature_dim={}",
            config.train.encoder.feature_dim
        );
    }
    let vocab = build_vocab(&texts, config.train.min_count)?;
    let wanted = config.train.decoder.vocab_size;
    if wanted != 0 && wanted != vocab.len() {
        bail!("vocab_size={wanted} but the corpus vocabulary has {} entries", vocab.len());
    }
    let words = exempt_words(&config)?;
    config.train.sampler.set_exempt(exempt_ids(&words, &vocab));

    let records = texts
        .iter()
        .map(|s| vocab.encode_story(s))
        .collect::<Result<Vec<_>, _>>()?;
    let validation = match &args.validation {
        Some(path) => encode_all(&vocab, path)?,
        None => Vec::new(),
    };
    let split = CorpusSplit::new(records, validation, Vec::new())?;

    let mut write_err = None;
    let outcome = train(&split, &vocab, &config.train, |m| {
        let line = match m.val_perplexity {
            Some(p) => format!("epoch={} train_loss={} val_perplexity={p}", m.epoch, m.train_loss),
            None => format!("epoch={} train_loss={}", m.epoch, m.train_loss),
        };
        if let Err(e) = writeln!(log, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let file = CheckpointFile {
        checkpoint: outcome.checkpoint,
        exempt_file: config.exempt_file,
    };
    file.save(&args.out)?;
    Ok(file)
}

/// Perplexity of `corpus` under the checkpoint.
pub fn run_eval(ckpt: &Path, corpus: &Path) -> Result<f64> {
    let file = CheckpointFile::load(ckpt)?;
    let records = encode_all(&file.checkpoint.vocab, corpus)?;
    ensure!(!records.is_empty(), "{}: corpus is empty", corpus.display());
    Ok(evaluate_perplexity(&file.checkpoint.model, &records)?)
}

/// Command-line overrides of the checkpoint's sampler settings.
#[derive(Clone, Debug, Default)]
pub struct GenerateArgs {
    pub greedy: bool,
    pub k: Option<f64>,
    pub n_samples: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedStory {
    pub story_id: String,
    pub sentences: Vec<Vec<String>>,
}

/// One story per record of `features`, all drawn from a single sampler
/// stream.
pub fn run_generate(ckpt: &Path, features: &Path, args: &GenerateArgs) -> Result<Vec<GeneratedStory>> {
    let file = CheckpointFile::load(ckpt)?;
    let ck = &file.checkpoint;
    let mut sampler_config = ck.config.sampler.clone();
    sampler_config.greedy |= args.greedy;
    if let Some(k) = args.k {
        sampler_config.k = k;
    }
    if let Some(n) = args.n_samples {
        sampler_config.n_samples = n;
    }
    if let Some(seed) = args.seed {
        sampler_config.seed = seed;
    }
    let mut sampler = StorySampler::new(sampler_config)?;
    read_features(features)?
        .into_iter()
        .map(|story| {
            let ids = ck
                .model
                .generate_story(&story.features, &mut sampler, None)
                .with_context(|| format!("story {}", story.story_id))?;
            Ok(GeneratedStory {
                story_id: story.story_id,
                sentences: ids
                    .iter()
                    .map(|s| ck.vocab.decode(s).into_iter().map(str::to_string).collect())
                    .collect(),
            })
        })
        .collect()
}

pub fn run_gradcheck(dims: &str) -> Result<GradCheckReport> {
    match dims {
        "tiny" => Ok(check_tiny(3)?),
        other => bail!("unknown gradient-check dimensions {other:?} (expected \"tiny\")"),
    }
}

/// Writes the six ablation configurations derived from `config` into
/// `out_dir` and returns their paths.
pub fn run_ablations(config: &Path, out_dir: &Path) -> Result<Vec<(Ablation, PathBuf)>> {
    let base = RunConfig::read(config)?;
    base.train.validate()?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    ablation_matrix(&base.train)
        .into_iter()
        .map(|(ablation, train)| {
            let path = out_dir.join(format!("{}.conf", ablation.file_stem()));
            let run = RunConfig {
                train,
                exempt_file: base.exempt_file.clone(),
            };
            fs::write(&path, format!("# {}\n{}", ablation.label(), run.to_text()))
                .with_context(|| format!("writing {}", path.display()))?;
            Ok((ablation, path))
        })
        .collect()
}

/// Writes `n` stories of the default synthetic corpus.
pub fn run_synth(out: &Path, n: usize, seed: u64) -> Result<()> {
    let stories = synth_corpus(seed, n, &SynthSpec::default())?;
    Ok(write_corpus(out, &stories)?)
}
