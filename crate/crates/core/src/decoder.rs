//! Context-cascading sentence decoder.
//!
//! One LSTM decodes all sentences of a story in order. Its input at every
//! step is `[embedding(previous token) ; glocal vector of the sentence]`.
//! With cascading enabled the recurrent state (both `h` and `c`) at the end of
//! sentence `t` is the initial state of sentence `t + 1`; otherwise every
//! sentence starts from zero. Sentence 0 always starts from zero.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::glocal::{glocal_for_sentence, GlocalVector};
use crate::lstm::{lstm_step, LstmParams, LstmState};
use crate::params::{uniform, Bound, ParamId, ParamStore};
use crate::sampler::StorySampler;
use crate::special::{END, PAD, START};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EMBED_DIM: usize = 256;
pub const DEFAULT_MAX_LEN: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub hidden_size: usize,
    pub cascading: bool,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            embed_dim: DEFAULT_EMBED_DIM,
            hidden_size: 1024,
            cascading: true,
            max_len: DEFAULT_MAX_LEN,
            vocab_size: 0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_size == 0 || self.max_len == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if self.vocab_size <= END {
            return Err(Error::Config(format!(
                "vocabulary of {} cannot hold the reserved tokens",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Teacher-forced result of one sentence (summed over the batch).
#[derive(Clone, Copy, Debug)]
pub struct SentenceLoss {
    /// Summed cross-entropy over scored positions.
    pub loss: Var,
    pub token_count: usize,
    pub state_in: LstmState,
    pub state_out: LstmState,
}

#[derive(Clone, Debug)]
pub struct StoryLoss {
    pub sentences: Vec<SentenceLoss>,
    pub total: Var,
    pub token_count: usize,
}

/// One decoding step seen by a generation trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub sentence: usize,
    pub glocal: Vec<f64>,
    pub logits: Vec<f64>,
    pub token: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeTrace {
    pub steps: Vec<TraceStep>,
    /// Decoder `h` at the start of every sentence.
    pub initial_hidden: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeDecoder {
    config: DecoderConfig,
    glocal_dim: usize,
    embedding: ParamId,
    lstm: LstmParams,
    out_weight: ParamId,
    out_bias: ParamId,
}

/// Checks that a target sentence is `<start> … <end>`.
pub fn check_target(target: &[usize]) -> Result<()> {
    if target.len() < 2 || target[0] != START || target[target.len() - 1] != END {
        return Err(Error::Data(format!(
            "target sentence must begin with <start> and end with <end>: {target:?}"
        )));
    }
    Ok(())
}

impl CascadeDecoder {
    pub fn init(config: DecoderConfig, glocal_dim: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let v = config.vocab_size;
        let e = config.embed_dim;
        let h = config.hidden_size;
        let embedding = store.add("decoder.embedding", uniform(rng, &[v, e], 1.0));
        let lstm = LstmParams::init(store, "decoder.lstm", e + glocal_dim, h, rng);
        let out_weight = store.add(
            "decoder.out.weight",
            uniform(rng, &[v, h], 1.0 / libm::sqrt(h as f64)),
        );
        let out_bias = store.add("decoder.out.bias", Tensor::zeros(&[v]));
        Ok(CascadeDecoder {
            config,
            glocal_dim,
            embedding,
            lstm,
            out_weight,
            out_bias,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn out_bias(&self) -> ParamId {
        self.out_bias
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> LstmState {
        LstmState::zero(tape, batch, self.config.hidden_size)
    }

    /// Logits for the next token of every batch row, and the new state.
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prev_tokens: &[usize],
        glocal: Var,
        state: &LstmState,
    ) -> Result<(Var, LstmState)> {
        let gs = tape.shape(glocal);
        if gs != [prev_tokens.len(), self.glocal_dim] {
            return Err(Error::shape("decode_step", gs, &[prev_tokens.len(), self.glocal_dim]));
        }
        let emb = tape.gather(bound.var(self.embedding), prev_tokens)?;
        let input = tape.concat(&[emb, glocal], 1)?;
        let next = lstm_step(tape, bound, &self.lstm, input, state)?;
        let proj = tape.matmul_t(next.h, bound.var(self.out_weight))?;
        let logits = tape.add_row(proj, bound.var(self.out_bias))?;
        Ok((logits, next))
    }

    /// Teacher-forced pass over one sentence for every batch row.
    ///
    /// Step `i` reads ground-truth token `i` and is scored against token
    /// `i + 1`. Rows shorter than the longest one stop updating their state
    /// once their own `<end>` has been scored.
    pub fn teacher_forced_sentence(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        targets: &[&[usize]],
        glocal: Var,
        state_in: &LstmState,
    ) -> Result<SentenceLoss> {
        if targets.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        for t in targets {
            check_target(t)?;
        }
        let steps = targets.iter().map(|t| t.len() - 1).max().unwrap();
        let mut state = *state_in;
        let mut loss: Option<Var> = None;
        let mut token_count = 0;
        for i in 0..steps {
            let active: Vec<bool> = targets.iter().map(|t| i + 1 < t.len()).collect();
            let prev: Vec<usize> = targets
                .iter()
                .zip(&active)
                .map(|(t, &a)| if a { t[i] } else { PAD })
                .collect();
            let scored: Vec<Option<usize>> = targets
                .iter()
                .zip(&active)
                .map(|(t, &a)| a.then(|| t[i + 1]))
                .collect();
            let (logits, next) = self.decode_step(tape, bound, &prev, glocal, &state)?;
            let step_loss = tape.cross_entropy_sum(logits, &scored)?;
            token_count += active.iter().filter(|&&a| a).count();
            loss = Some(match loss {
                None => step_loss,
                Some(l) => tape.add(l, step_loss)?,
            });
            state = if active.iter().all(|&a| a) {
                next
            } else {
                let h = self.config.hidden_size;
                let keep: Vec<f64> = active
                    .iter()
                    .flat_map(|&a| core::iter::repeat_n(if a { 1.0 } else { 0.0 }, h))
                    .collect();
                let hold: Vec<f64> = keep.iter().map(|m| 1.0 - m).collect();
                LstmState {
                    h: blend(tape, next.h, state.h, &keep, &hold)?,
                    c: blend(tape, next.c, state.c, &keep, &hold)?,
                }
            };
        }
        debug_assert_eq!(token_count, targets.iter().map(|t| t.len() - 1).sum::<usize>());
        Ok(SentenceLoss {
            loss: loss.expect("at least one step"),
            token_count,
            state_in: *state_in,
            state_out: state,
        })
    }

    /// Teacher-forced pass over every sentence of a story batch.
    ///
    /// `targets[t][b]` is sentence `t` of batch row `b`.
    pub fn run_story_teacher_forced(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        glocals: &[GlocalVector],
        targets: &[Vec<&[usize]>],
    ) -> Result<StoryLoss> {
        if glocals.len() != targets.len() || targets.is_empty() {
            return Err(Error::Data(format!(
                "{} images but {} sentences",
                glocals.len(),
                targets.len()
            )));
        }
        let batch = targets[0].len();
        if targets.iter().any(|t| t.len() != batch) {
            return Err(Error::Data("ragged story batch".into()));
        }
        let mut sentences = Vec::with_capacity(targets.len());
        let mut carried: Option<LstmState> = None;
        for (t, sentence_targets) in targets.iter().enumerate() {
            let state_in = match carried {
                Some(s) if self.config.cascading => s,
                _ => self.zero_state(tape, batch),
            };
            let glocal = glocal_for_sentence(glocals, t)?.values;
            let result = self.teacher_forced_sentence(tape, bound, sentence_targets, glocal, &state_in)?;
            carried = Some(result.state_out);
            sentences.push(result);
        }
        let mut total = sentences[0].loss;
        for s in &sentences[1..] {
            total = tape.add(total, s.loss)?;
        }
        let token_count = sentences.iter().map(|s| s.token_count).sum();
        Ok(StoryLoss {
            sentences,
            total,
            token_count,
        })
    }

    /// Generates one sentence for a single story (`glocal` is `1 × g`).
    ///
    /// Returns the surface tokens (without `<end>`) and the state after the
    /// last decoding step. At most `max_len` steps are taken.
    pub fn generate_sentence(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        glocal: &GlocalVector,
        state_in: &LstmState,
        sampler: &mut StorySampler,
        max_len: usize,
        mut trace: Option<&mut DecodeTrace>,
    ) -> Result<(Vec<usize>, LstmState)> {
        sampler.start_sentence();
        let mut state = *state_in;
        let mut prev = START;
        let mut tokens = Vec::new();
        for _ in 0..max_len {
            let (logits, next) = self.decode_step(tape, bound, &[prev], glocal.values, &state)?;
            state = next;
            let token = sampler.choose(tape.value(logits).data())?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.steps.push(TraceStep {
                    sentence: glocal.source_index,
                    glocal: tape.value(glocal.values).data().to_vec(),
                    logits: tape.value(logits).data().to_vec(),
                    token,
                });
            }
            if token == END {
                break;
            }
            tokens.push(token);
            prev = token;
        }
        Ok((tokens, state))
    }

    /// Generates every sentence of one story. The sampler's word counter is
    /// cleared first.
    pub fn run_story_generate(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        glocals: &[GlocalVector],
        sampler: &mut StorySampler,
        mut trace: Option<&mut DecodeTrace>,
    ) -> Result<Vec<Vec<usize>>> {
        sampler.start_story();
        let mut out = Vec::with_capacity(glocals.len());
        let mut carried: Option<LstmState> = None;
        for t in 0..glocals.len() {
            let state_in = match carried {
                Some(s) if self.config.cascading => s,
                _ => self.zero_state(tape, 1),
            };
            if let Some(tr) = trace.as_deref_mut() {
                tr.initial_hidden.push(tape.value(state_in.h).data().to_vec());
            }
            let glocal = glocal_for_sentence(glocals, t)?;
            let (tokens, state_out) = self.generate_sentence(
                tape,
                bound,
                glocal,
                &state_in,
                sampler,
                self.config.max_len,
                trace.as_deref_mut(),
            )?;
            carried = Some(state_out);
            out.push(tokens);
        }
        Ok(out)
    }
}

fn blend(tape: &mut Tape, new: Var, old: Var, keep: &[f64], hold: &[f64]) -> Result<Var> {
    let a = tape.mul_const(new, keep.to_vec())?;
    let b = tape.mul_const(old, hold.to_vec())?;
    tape.add(a, b)
}
