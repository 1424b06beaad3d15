//! Glocal vector assembly.
//!
//! For every image `t` the global channel (bi-directional encoder output `t`)
//! and the local channel (raw image feature `t`) are concatenated and pushed
//! through two fully connected layers, giving one `g`-dimensional conditioning
//! vector per sentence. Ablated channels are left out of the concatenation and
//! the first layer is sized to match.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::lstm::{encode_bidirectional, LstmParams};
use crate::params::{uniform, Bound, ParamId, ParamStore};
use crate::tape::{BatchNormMode, BatchNormStats, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    /// Per-direction hidden size of the bi-directional encoder.
    pub hidden_size: usize,
    pub glocal_dim: usize,
    pub use_global: bool,
    pub use_local: bool,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            feature_dim: 2048,
            hidden_size: 512,
            glocal_dim: 1024,
            use_global: true,
            use_local: true,
            dropout: 0.5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_global && !self.use_local {
            return Err(Error::Config(
                "at least one of use_global / use_local must be enabled".into(),
            ));
        }
        if self.feature_dim == 0 || self.hidden_size == 0 || self.glocal_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// What each sentence is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// Per-image glocal vectors.
    Glocal,
    /// One story-level vector (final states of both encoder directions)
    /// shared by every sentence: the plain sequence-to-sequence baseline.
    StorySummary,
}

/// Conditioning vector of one sentence, `batch × g`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlocalVector {
    pub values: Var,
    pub source_index: usize,
}

/// Training / inference switch for the layers with batch statistics or noise.
pub enum Phase<'a> {
    Train {
        rng: &'a mut dyn RngCore,
        stats: &'a mut [BatchNormStats],
    },
    Infer {
        stats: &'a [BatchNormStats],
    },
}

impl Phase<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Phase::Train { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct FcLayer {
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

impl FcLayer {
    fn init(store: &mut ParamStore, prefix: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / libm::sqrt(input as f64);
        FcLayer {
            weight: store.add(format!("{prefix}.weight"), uniform(rng, &[output, input], bound)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[output])),
            gamma: store.add(format!("{prefix}.bn.gamma"), Tensor::full(&[output], 1.0)),
            beta: store.add(format!("{prefix}.bn.beta"), Tensor::zeros(&[output])),
        }
    }
}

/// Number of batch-norm layers in the encoder's fully connected stack.
pub const ENCODER_BN_LAYERS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct GlocalEncoder {
    config: EncoderConfig,
    conditioning: Conditioning,
    bidirectional: Option<(LstmParams, LstmParams)>,
    fc: [FcLayer; 2],
}

impl GlocalEncoder {
    /// Registers the encoder parameters and returns the initial running
    /// statistics of its batch-norm layers.
    pub fn init(
        config: EncoderConfig,
        conditioning: Conditioning,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<(Self, Vec<BatchNormStats>)> {
        let summary = conditioning == Conditioning::StorySummary;
        if !summary {
            config.validate()?;
        }
        let d = config.feature_dim;
        let h = config.hidden_size;
        let g = config.glocal_dim;
        let bidirectional = if summary || config.use_global {
            let fwd = LstmParams::init(store, "encoder.fwd", d, h, rng);
            let bwd = LstmParams::init(store, "encoder.bwd", d, h, rng);
            Some((fwd, bwd))
        } else {
            None
        };
        let input = match conditioning {
            Conditioning::StorySummary => 2 * h,
            Conditioning::Glocal => {
                (if config.use_global { 2 * h } else { 0 }) + if config.use_local { d } else { 0 }
            }
        };
        let fc = [
            FcLayer::init(store, "glocal.fc1", input, g, rng),
            FcLayer::init(store, "glocal.fc2", g, g, rng),
        ];
        let stats = (0..ENCODER_BN_LAYERS)
            .map(|_| BatchNormStats::identity(g))
            .collect();
        Ok((
            GlocalEncoder {
                config,
                conditioning,
                bidirectional,
                fc,
            },
            stats,
        ))
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn conditioning(&self) -> Conditioning {
        self.conditioning
    }

    pub fn fc_input_width(&self, store: &ParamStore) -> usize {
        store.get(self.fc[0].weight).shape()[1]
    }

    /// Bi-directional encoder outputs for `features` (one `batch × d` matrix
    /// per image), or `None` when the global channel is ablated.
    pub fn encode_global(&self, tape: &mut Tape, bound: &Bound, features: &[Var]) -> Result<Option<Vec<Var>>> {
        match &self.bidirectional {
            Some((fwd, bwd)) => encode_bidirectional(tape, bound, fwd, bwd, features).map(Some),
            None => Ok(None),
        }
    }

    /// Full encoder: bi-directional pass followed by glocal assembly.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        features: &[Var],
        phase: &mut Phase<'_>,
    ) -> Result<Vec<GlocalVector>> {
        self.check_features(tape, features)?;
        let global = self.encode_global(tape, bound, features)?;
        match self.conditioning {
            Conditioning::Glocal => self.build_glocal(tape, bound, features, global.as_deref(), phase),
            Conditioning::StorySummary => {
                let outputs = global.expect("summary mode always encodes");
                let h = self.config.hidden_size;
                let last_fwd = tape.slice_cols(outputs[outputs.len() - 1], 0, h)?;
                let first_bwd = tape.slice_cols(outputs[0], h, h)?;
                let summary = tape.concat(&[last_fwd, first_bwd], 1)?;
                let values = self.fc_stack(tape, bound, summary, phase)?;
                Ok((0..features.len())
                    .map(|t| GlocalVector {
                        values,
                        source_index: t,
                    })
                    .collect())
            }
        }
    }

    fn check_features(&self, tape: &Tape, features: &[Var]) -> Result<()> {
        let first = features
            .first()
            .ok_or_else(|| Error::Contract("story has no images".into()))?;
        let shape = tape.shape(*first).to_vec();
        if shape.len() != 2 || shape[1] != self.config.feature_dim {
            return Err(Error::shape("encoder input", &shape, &[self.config.feature_dim]));
        }
        if let Some(bad) = features.iter().find(|&&f| tape.shape(f) != shape.as_slice()) {
            return Err(Error::shape("encoder input", &shape, tape.shape(*bad)));
        }
        Ok(())
    }

    /// Concatenates the enabled channels per image and applies the fully
    /// connected stack. `global_outputs` is ignored when the global channel
    /// is ablated and required otherwise.
    pub fn build_glocal(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        features: &[Var],
        global_outputs: Option<&[Var]>,
        phase: &mut Phase<'_>,
    ) -> Result<Vec<GlocalVector>> {
        if self.conditioning != Conditioning::Glocal {
            return Err(Error::Config("build_glocal on a story-summary encoder".into()));
        }
        self.config.validate()?;
        let s = features.len();
        if s == 0 {
            return Err(Error::Contract("story has no images".into()));
        }
        let global = if self.config.use_global {
            let g = global_outputs
                .ok_or_else(|| Error::Contract("global channel enabled but no encoder outputs".into()))?;
            if g.len() != s {
                return Err(Error::Contract(format!(
                    "{} feature vectors but {} encoder outputs",
                    s,
                    g.len()
                )));
            }
            Some(g)
        } else {
            None
        };
        let batch = tape.shape(features[0])[0];

        let mut rows = Vec::with_capacity(s);
        for t in 0..s {
            let mut parts = Vec::with_capacity(2);
            if let Some(g) = global {
                parts.push(g[t]);
            }
            if self.config.use_local {
                parts.push(features[t]);
            }
            rows.push(if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 1)? });
        }
        // All images of all stories share one pass, so batch statistics span
        // `batch * S` rows.
        let stacked = if s == 1 { rows[0] } else { tape.concat(&rows, 0)? };
        let out = self.fc_stack(tape, bound, stacked, phase)?;
        (0..s)
            .map(|t| {
                let values = if s == 1 { out } else { tape.slice_rows(out, t * batch, batch)? };
                Ok(GlocalVector {
                    values,
                    source_index: t,
                })
            })
            .collect()
    }

    fn fc_stack(&self, tape: &mut Tape, bound: &Bound, x: Var, phase: &mut Phase<'_>) -> Result<Var> {
        let mut x = x;
        for (layer_index, layer) in self.fc.iter().enumerate() {
            let lin = tape.matmul_t(x, bound.var(layer.weight))?;
            let mut y = tape.add_row(lin, bound.var(layer.bias))?;
            if layer_index == 0 {
                y = tape.relu(y);
            }
            let gamma = bound.var(layer.gamma);
            let beta = bound.var(layer.beta);
            y = match phase {
                Phase::Train { rng, stats } => {
                    let bn = tape.batch_norm(y, gamma, beta, BatchNormMode::Train(&mut stats[layer_index]))?;
                    tape.dropout(bn, self.config.dropout, true, &mut **rng)?
                }
                Phase::Infer { stats } => {
                    tape.batch_norm(y, gamma, beta, BatchNormMode::Infer(&stats[layer_index]))?
                }
            };
            x = y;
        }
        Ok(x)
    }
}

/// The conditioning vector of sentence `t`.
pub fn glocal_for_sentence(glocals: &[GlocalVector], t: usize) -> Result<&GlocalVector> {
    glocals.get(t).ok_or(Error::Index {
        what: "sentence",
        index: t,
        bound: glocals.len(),
    })
}
