//! The full story model: glocal encoder plus cascading decoder.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::StoryRecord;
use crate::decoder::{CascadeDecoder, DecodeTrace, DecoderConfig, StoryLoss};
use crate::error::{Error, Result};
use crate::glocal::{Conditioning, EncoderConfig, GlocalEncoder, GlocalVector, Phase};
use crate::params::{Bound, ParamStore};
use crate::sampler::StorySampler;
use crate::tape::{BatchNormStats, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Condition every sentence on one story summary vector instead of
    /// per-image glocal vectors; `use_global` / `use_local` are ignored.
    pub plain_seq2seq: bool,
}

impl ModelConfig {
    pub fn conditioning(&self) -> Conditioning {
        if self.plain_seq2seq {
            Conditioning::StorySummary
        } else {
            Conditioning::Glocal
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.plain_seq2seq {
            self.encoder.validate()?;
        } else {
            let probe = EncoderConfig {
                use_global: true,
                ..self.encoder.clone()
            };
            probe.validate()?;
        }
        self.decoder.validate()
    }

    /// Tiny dimensions used by gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                feature_dim: 6,
                hidden_size: 4,
                glocal_dim: 5,
                use_global: true,
                use_local: true,
                dropout: 0.2,
            },
            decoder: DecoderConfig {
                embed_dim: 3,
                hidden_size: 5,
                cascading: true,
                max_len: 8,
                vocab_size: 8,
            },
            plain_seq2seq: false,
        }
    }
}

/// Loss of one forward pass, summed over every scored token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSum {
    pub nll: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlacNet {
    config: ModelConfig,
    params: ParamStore,
    bn_stats: Vec<BatchNormStats>,
    encoder: GlocalEncoder,
    decoder: CascadeDecoder,
}

impl GlacNet {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let mut params = ParamStore::new();
        let (encoder, bn_stats) =
            GlocalEncoder::init(config.encoder.clone(), config.conditioning(), &mut params, &mut rng)?;
        let decoder = CascadeDecoder::init(
            config.decoder.clone(),
            config.encoder.glocal_dim,
            &mut params,
            &mut rng,
        )?;
        Ok(GlacNet {
            config,
            params,
            bn_stats,
            encoder,
            decoder,
        })
    }

    /// Rebuilds a model from stored tensors. Names, order and shapes must
    /// match what `config` produces.
    pub fn from_parts(config: ModelConfig, tensors: Vec<(String, Tensor)>, bn_stats: Vec<BatchNormStats>) -> Result<Self> {
        let mut model = GlacNet::new(config, 0)?;
        if tensors.len() != model.params.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (slot, (name, value)) in tensors.into_iter().enumerate() {
            let id = model
                .params
                .find(&name)
                .filter(|id| id.index() == slot)
                .ok_or_else(|| Error::Data(format!("unexpected parameter {name} at position {slot}")))?;
            if model.params.get(id).shape() != value.shape() {
                return Err(Error::shape("parameter", model.params.get(id).shape(), value.shape()));
            }
            *model.params.get_mut(id) = value;
        }
        if bn_stats.len() != model.bn_stats.len()
            || bn_stats
                .iter()
                .zip(&model.bn_stats)
                .any(|(a, b)| a.width() != b.width() || a.var.len() != b.width())
        {
            return Err(Error::Data("batch-norm statistics do not match the model".into()));
        }
        model.bn_stats = bn_stats;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &[BatchNormStats] {
        &self.bn_stats
    }

    pub fn bn_stats_mut(&mut self) -> &mut [BatchNormStats] {
        &mut self.bn_stats
    }

    pub fn encoder(&self) -> &GlocalEncoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &CascadeDecoder {
        &self.decoder
    }

    pub fn vocab_size(&self) -> usize {
        self.config.decoder.vocab_size
    }

    /// One `batch × d` constant per image position.
    pub fn feature_inputs(&self, tape: &mut Tape, stories: &[&StoryRecord]) -> Result<Vec<Var>> {
        let first = stories
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let s = first.len();
        let d = self.config.encoder.feature_dim;
        for story in stories {
            if story.len() != s {
                return Err(Error::Data(format!(
                    "story {} has {} images, batch expects {s}",
                    story.story_id,
                    story.len()
                )));
            }
            story.validate()?;
            if story.features[0].len() != d {
                return Err(Error::Data(format!(
                    "story {} has {}-dimensional features, model expects {d}",
                    story.story_id,
                    story.features[0].len()
                )));
            }
        }
        Ok((0..s)
            .map(|t| {
                let data = stories.iter().flat_map(|r| r.features[t].iter().copied()).collect();
                tape.constant(Tensor::matrix(stories.len(), d, data).expect("checked dims"))
            })
            .collect())
    }

    fn forward(
        encoder: &GlocalEncoder,
        decoder: &CascadeDecoder,
        tape: &mut Tape,
        bound: &Bound,
        features: &[Var],
        stories: &[&StoryRecord],
        phase: &mut Phase<'_>,
    ) -> Result<(Vec<GlocalVector>, StoryLoss)> {
        let glocals = encoder.forward(tape, bound, features, phase)?;
        let targets: Vec<Vec<&[usize]>> = (0..features.len())
            .map(|t| stories.iter().map(|r| r.sentences[t].as_slice()).collect())
            .collect();
        let loss = decoder.run_story_teacher_forced(tape, bound, &glocals, &targets)?;
        Ok((glocals, loss))
    }

    /// Teacher-forced forward pass on `tape`. `phase` selects training
    /// (batch statistics, dropout) or inference behaviour.
    pub fn story_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        stories: &[&StoryRecord],
        phase: &mut Phase<'_>,
    ) -> Result<(Vec<GlocalVector>, StoryLoss)> {
        let features = self.feature_inputs(tape, stories)?;
        Self::forward(&self.encoder, &self.decoder, tape, bound, &features, stories, phase)
    }

    /// Training-mode forward and backward on one batch. The objective is the
    /// mean loss per scored token; running statistics are updated.
    pub fn loss_and_grads(&mut self, stories: &[&StoryRecord], rng: &mut dyn RngCore) -> Result<(LossSum, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let features = self.feature_inputs(&mut tape, stories)?;
        let GlacNet {
            encoder,
            decoder,
            bn_stats,
            ..
        } = self;
        let mut phase = Phase::Train {
            rng,
            stats: bn_stats.as_mut_slice(),
        };
        let (_, loss) = Self::forward(encoder, decoder, &mut tape, &bound, &features, stories, &mut phase)?;
        let mean = tape.scale(loss.total, 1.0 / loss.token_count as f64);
        tape.backward(mean)?;
        let sum = LossSum {
            nll: tape.value(loss.total).data()[0],
            tokens: loss.token_count,
        };
        Ok((sum, bound.grads(&tape)))
    }

    /// Inference-mode summed loss over `stories` (equal image counts).
    pub fn eval_loss(&self, stories: &[&StoryRecord]) -> Result<LossSum> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let mut phase = Phase::Infer {
            stats: &self.bn_stats,
        };
        let (_, loss) = self.story_loss(&mut tape, &bound, stories, &mut phase)?;
        Ok(LossSum {
            nll: tape.value(loss.total).data()[0],
            tokens: loss.token_count,
        })
    }

    /// Generates one sentence per image of a single story.
    pub fn generate_story(
        &self,
        features: &[Vec<f64>],
        sampler: &mut StorySampler,
        trace: Option<&mut DecodeTrace>,
    ) -> Result<Vec<Vec<usize>>> {
        let d = self.config.encoder.feature_dim;
        if features.is_empty() {
            return Err(Error::Data("story has no images".into()));
        }
        if let Some(f) = features.iter().find(|f| f.len() != d) {
            return Err(Error::Data(format!(
                "{}-dimensional features, model expects {d}",
                f.len()
            )));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let inputs: Vec<Var> = features
            .iter()
            .map(|f| tape.constant(Tensor::row(f.clone())))
            .collect();
        let mut phase = Phase::Infer {
            stats: &self.bn_stats,
        };
        let glocals = self.encoder.forward(&mut tape, &bound, &inputs, &mut phase)?;
        self.decoder
            .run_story_generate(&mut tape, &bound, &glocals, sampler, trace)
    }
}
