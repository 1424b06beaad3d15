//! Word selection at generation time.
//!
//! Every emitted word is counted for the rest of the story. Before a word is
//! picked, each non-exempt word's probability is divided by
//! `1 + k · count(word)` and the distribution is renormalized. The word is
//! then chosen as the most frequent outcome of `n_samples` independent draws.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::special;
use crate::tensor::softmax;

/// Tally of words emitted so far in the current story.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WordCounter {
    counts: BTreeMap<usize, u64>,
}

impl WordCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self, token: usize) -> u64 {
        self.counts.get(&token).copied().unwrap_or(0)
    }

    pub fn record_emission(&mut self, token: usize) {
        *self.counts.entry(token).or_insert(0) += 1;
    }

    pub fn reset(&mut self) {
        self.counts.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.counts.iter().map(|(&w, &c)| (w, c))
    }
}

pub fn record_emission(counter: &mut WordCounter, token: usize) {
    counter.record_emission(token);
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Penalty sensitivity.
    pub k: f64,
    pub n_samples: usize,
    /// Token ids whose probability is never penalized. Always holds `<end>`.
    exempt: BTreeSet<usize>,
    pub seed: u64,
    pub use_count_penalty: bool,
    /// Pick the arg-max of the (penalized) distribution instead of sampling.
    pub greedy: bool,
    /// Clear the counter at every sentence instead of every story.
    pub reset_per_sentence: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            k: 0.3,
            n_samples: 100,
            exempt: BTreeSet::from([special::END]),
            seed: 0,
            use_count_penalty: true,
            greedy: false,
            reset_per_sentence: false,
        }
    }
}

impl SamplerConfig {
    pub fn exempt(&self) -> &BTreeSet<usize> {
        &self.exempt
    }

    /// Replaces the exempt set; `<end>` is always added.
    pub fn set_exempt(&mut self, ids: impl IntoIterator<Item = usize>) {
        self.exempt = ids.into_iter().collect();
        self.exempt.insert(special::END);
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k >= 0.0) || !self.k.is_finite() {
            return Err(Error::Param(format!("penalty constant k={} must be >= 0", self.k)));
        }
        if self.n_samples == 0 {
            return Err(Error::Param("n_samples must be positive".into()));
        }
        Ok(())
    }
}

fn check_distribution(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::Contract("empty distribution".into()));
    }
    if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::Contract("distribution has negative or non-finite entries".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("distribution sums to {total}, not 1")));
    }
    Ok(())
}

/// Count-based penalty followed by renormalization.
///
/// When no probability is actually rescaled the input is returned unchanged,
/// so `k = 0` and all-zero counts are exact identities.
pub fn penalize(probs: &[f64], counter: &WordCounter, config: &SamplerConfig) -> Result<Vec<f64>> {
    if !(config.k >= 0.0) || !config.k.is_finite() {
        return Err(Error::Param(format!("penalty constant k={} must be >= 0", config.k)));
    }
    check_distribution(probs)?;
    let mut out = probs.to_vec();
    let mut changed = false;
    for (word, count) in counter.iter() {
        if word >= out.len() || count == 0 || config.exempt.contains(&word) {
            continue;
        }
        let factor = 1.0 / (1.0 + config.k * count as f64);
        if factor != 1.0 {
            out[word] *= factor;
            changed = true;
        }
    }
    if changed {
        let total: f64 = out.iter().sum();
        out.iter_mut().for_each(|p| *p /= total);
    }
    Ok(out)
}

fn draw(probs: &[f64], total: f64, rng: &mut dyn RngCore) -> usize {
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Draws `n_samples` tokens from `probs` and returns the most frequent one.
///
/// Ties go to the token with the higher probability, then the lower id.
pub fn select_word(probs: &[f64], n_samples: usize, rng: &mut dyn RngCore) -> Result<usize> {
    if n_samples == 0 {
        return Err(Error::Param("n_samples must be positive".into()));
    }
    let total: f64 = probs.iter().sum();
    if !(total > 0.0) || probs.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::Contract("cannot sample from a degenerate distribution".into()));
    }
    let mut hits = vec![0u32; probs.len()];
    for _ in 0..n_samples {
        hits[draw(probs, total, rng)] += 1;
    }
    Ok(modal_token(&hits, probs))
}

/// Token with the most hits; ties go to the higher probability, then the
/// lower id.
pub fn modal_token(hits: &[u32], probs: &[f64]) -> usize {
    let mut best = 0;
    for w in 1..hits.len().min(probs.len()) {
        let better = hits[w] > hits[best] || (hits[w] == hits[best] && probs[w] > probs[best]);
        if better {
            best = w;
        }
    }
    best
}

/// Highest-probability token, lowest id on ties.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (w, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = w;
        }
    }
    best
}

/// Word selection state for one story at a time.
#[derive(Clone, Debug)]
pub struct StorySampler {
    config: SamplerConfig,
    counter: WordCounter,
    rng: ChaCha8Rng,
}

impl StorySampler {
    pub fn new(config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(StorySampler {
            config,
            counter: WordCounter::new(),
            rng,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn counter(&self) -> &WordCounter {
        &self.counter
    }

    pub fn start_story(&mut self) {
        self.counter.reset();
    }

    pub fn start_sentence(&mut self) {
        if self.config.reset_per_sentence {
            self.counter.reset();
        }
    }

    /// The distribution words are selected from, given raw logits.
    pub fn distribution(&self, logits: &[f64]) -> Result<Vec<f64>> {
        let probs = softmax(logits);
        if self.config.use_count_penalty {
            penalize(&probs, &self.counter, &self.config)
        } else {
            Ok(probs)
        }
    }

    /// Picks the next word and counts it.
    pub fn choose(&mut self, logits: &[f64]) -> Result<usize> {
        let probs = self.distribution(logits)?;
        let token = if self.config.greedy {
            argmax(&probs)
        } else {
            select_word(&probs, self.config.n_samples, &mut self.rng)?
        };
        self.counter.record_emission(token);
        Ok(token)
    }
}

/// Share of a story's non-exempt tokens that repeat an earlier one:
/// `(n - distinct) / n`, or 0 when the story has no such tokens.
pub fn repetition_rate(sentences: &[Vec<usize>], exempt: &BTreeSet<usize>) -> f64 {
    let content: Vec<usize> = sentences
        .iter()
        .flatten()
        .copied()
        .filter(|w| !exempt.contains(w) && !special::is_reserved(*w))
        .collect();
    if content.is_empty() {
        return 0.0;
    }
    let distinct: BTreeSet<usize> = content.iter().copied().collect();
    (content.len() - distinct.len()) as f64 / content.len() as f64
}
