//! Training loop, perplexity, checkpoints and the ablation matrix.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{epoch_order, CorpusSplit, StoryRecord, Vocabulary};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::glocal::EncoderConfig;
use crate::model::{GlacNet, ModelConfig};
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
use crate::sampler::SamplerConfig;
use crate::special;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: u64,
    /// Global gradient-norm limit; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub min_count: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub sampler: SamplerConfig,
    pub plain_seq2seq: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        let decoder = DecoderConfig {
            hidden_size: encoder.glocal_dim,
            ..DecoderConfig::default()
        };
        TrainConfig {
            learning_rate: 0.001,
            weight_decay: 1e-5,
            batch_size: 64,
            epochs: 100,
            seed: 0,
            patience: 5,
            clip_norm: Some(5.0),
            min_count: 1,
            encoder,
            decoder,
            sampler: SamplerConfig::default(),
            plain_seq2seq: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate and weight decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm {c} must be positive")));
            }
        }
        if self.min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        self.sampler
            .validate()
            .map_err(|e| Error::Config(format!("{e}")))?;
        self.model_config(self.decoder.vocab_size.max(special::NAMES.len()))
            .validate()
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            decoder: DecoderConfig {
                vocab_size,
                ..self.decoder.clone()
            },
            plain_seq2seq: self.plain_seq2seq,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u64,
    /// Mean training-mode loss per scored token.
    pub train_loss: f64,
    pub val_perplexity: Option<f64>,
}

/// Everything needed to evaluate, generate from, or inspect a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: GlacNet,
    pub vocab: Vocabulary,
    pub config: TrainConfig,
    pub epoch: u64,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// Batches of one epoch. A trailing batch of a single story is merged into
/// the previous one because training-mode batch norm needs several rows.
pub fn epoch_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().map(Vec::len) == Some(1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

fn dropout_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - 1);
    rng
}

/// Trains a fresh model on `split.train`.
///
/// Each epoch visits the training stories in [`epoch_order`] and takes one
/// Adam step per batch on the mean per-token loss. When `split.validation`
/// is non-empty its perplexity is tracked, training stops after `patience`
/// epochs without improvement and the best model is returned.
pub fn train(
    split: &CorpusSplit,
    vocab: &Vocabulary,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    let records = &split.train;
    if records.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    let s = records[0].len();
    if let Some(r) = records.iter().find(|r| r.len() != s) {
        return Err(Error::Data(format!(
            "story {} has {} images; every training story must have {s}",
            r.story_id,
            r.len()
        )));
    }
    let mut model = GlacNet::new(config.model_config(vocab.len()), config.seed)?;
    let mut adam = AdamState::new(model.params().tensors());
    let adam_config = config.adam();
    let mut rng = dropout_rng(config.seed);
    let mut metrics = Vec::new();
    let mut best: Option<(f64, GlacNet, u64)> = None;
    let mut stale = 0;
    let mut epoch = 0;

    while epoch < config.epochs {
        let order = epoch_order(records.len(), epoch, config.seed);
        let mut nll = 0.0;
        let mut tokens = 0;
        for batch in epoch_batches(&order, config.batch_size) {
            let stories: Vec<&StoryRecord> = batch.iter().map(|&i| &records[i]).collect();
            let (loss, mut grads) = model.loss_and_grads(&stories, &mut rng)?;
            if let Some(max) = config.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            adam_step(model.params_mut().tensors_mut(), &grads, &mut adam, &adam_config)?;
            nll += loss.nll;
            tokens += loss.tokens;
        }
        epoch += 1;
        let val_perplexity = if split.validation.is_empty() {
            None
        } else {
            Some(evaluate_perplexity(&model, &split.validation)?)
        };
        let m = EpochMetrics {
            epoch,
            train_loss: nll / tokens as f64,
            val_perplexity,
        };
        on_epoch(&m);
        metrics.push(m);

        if let Some(ppl) = val_perplexity {
            match &best {
                Some((b, _, _)) if ppl >= *b => stale += 1,
                _ => {
                    best = Some((ppl, model.clone(), epoch));
                    stale = 0;
                }
            }
            if config.patience > 0 && stale >= config.patience {
                break;
            }
        }
    }

    let (model, epoch) = match best {
        Some((_, m, e)) => (m, e),
        None => (model, epoch),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            vocab: vocab.clone(),
            config: config.clone(),
            epoch,
            rng,
        },
        metrics,
    })
}

/// `exp(Σ loss / Σ scored tokens)` in inference mode, without any
/// generation-time penalty.
pub fn evaluate_perplexity(model: &GlacNet, records: &[StoryRecord]) -> Result<f64> {
    const CHUNK: usize = 64;
    if records.is_empty() {
        return Err(Error::Contract("perplexity of an empty record set".into()));
    }
    let mut nll = 0.0;
    let mut tokens = 0;
    let mut start = 0;
    while start < records.len() {
        let s = records[start].len();
        let mut end = start + 1;
        while end < records.len() && end - start < CHUNK && records[end].len() == s {
            end += 1;
        }
        let batch: Vec<&StoryRecord> = records[start..end].iter().collect();
        let loss = model.eval_loss(&batch)?;
        nll += loss.nll;
        tokens += loss.tokens;
        start = end;
    }
    Ok(libm::exp(nll / tokens as f64))
}

/// Rows of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Ablation {
    Seq2Seq,
    NoCascading,
    NoGlobal,
    NoLocal,
    NoCount,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Seq2Seq,
        Ablation::NoCascading,
        Ablation::NoGlobal,
        Ablation::NoLocal,
        Ablation::NoCount,
        Ablation::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Seq2Seq => "LSTM seq2seq",
            Ablation::NoCascading => "glacnet (-cascading)",
            Ablation::NoGlobal => "glacnet (-global)",
            Ablation::NoLocal => "glacnet (-local)",
            Ablation::NoCount => "glacnet (-count)",
            Ablation::Full => "glacnet",
        }
    }

    pub fn file_stem(self) -> &'static str {
        match self {
            Ablation::Seq2Seq => "seq2seq",
            Ablation::NoCascading => "no_cascading",
            Ablation::NoGlobal => "no_global",
            Ablation::NoLocal => "no_local",
            Ablation::NoCount => "no_count",
            Ablation::Full => "full",
        }
    }

    /// Config keys this row changes relative to the full model.
    pub fn changed_fields(self) -> &'static [&'static str] {
        match self {
            Ablation::Seq2Seq => &["plain_seq2seq"],
            Ablation::NoCascading => &["cascading"],
            Ablation::NoGlobal => &["use_global"],
            Ablation::NoLocal => &["use_local"],
            Ablation::NoCount => &["use_count_penalty"],
            Ablation::Full => &[],
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.encoder.use_global = true;
        c.encoder.use_local = true;
        c.decoder.cascading = true;
        c.sampler.use_count_penalty = true;
        c.plain_seq2seq = false;
        match self {
            Ablation::Seq2Seq => c.plain_seq2seq = true,
            Ablation::NoCascading => c.decoder.cascading = false,
            Ablation::NoGlobal => c.encoder.use_global = false,
            Ablation::NoLocal => c.encoder.use_local = false,
            Ablation::NoCount => c.sampler.use_count_penalty = false,
            Ablation::Full => {}
        }
        c
    }
}

/// The six ablation-study configurations derived from `base`.
pub fn ablation_matrix(base: &TrainConfig) -> Vec<(Ablation, TrainConfig)> {
    Ablation::ALL.iter().map(|&a| (a, a.apply(base))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn trailing_singleton_is_merged() {
        let order: Vec<usize> = (0..9).collect();
        let b = epoch_batches(&order, 4);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1], vec![4, 5, 6, 7, 8]);
        assert_eq!(epoch_batches(&order, 3).len(), 3);
        assert_eq!(epoch_batches(&[0], 4), vec![vec![0]]);
    }

    #[test]
    fn default_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!(c.weight_decay, 1e-5);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.decoder.embed_dim, 256);
        assert_eq!(c.decoder.hidden_size, c.encoder.glocal_dim);
        assert_eq!(c.sampler.n_samples, 100);
        let adam = c.adam();
        assert_eq!((adam.beta1, adam.beta2, adam.eps), (0.9, 0.999, 1e-8));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut c = TrainConfig::default();
        c.encoder.use_global = false;
        c.encoder.use_local = false;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.plain_seq2seq = true;
        assert!(c.validate().is_ok());
        let c = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
