//! Stories, vocabulary, tokenization, shuffling and a synthetic corpus.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::check_target;
use crate::error::{Error, Result};
use crate::special::{self, END, START, UNK};

/// A story as text: `S` feature vectors and `S` tokenized sentences.
#[derive(Clone, Debug, PartialEq)]
pub struct StoryText {
    pub story_id: String,
    pub features: Vec<Vec<f64>>,
    pub sentences: Vec<Vec<String>>,
}

/// A story ready for the model: sentences are `<start> … <end>` token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct StoryRecord {
    pub story_id: String,
    pub features: Vec<Vec<f64>>,
    pub sentences: Vec<Vec<usize>>,
}

fn check_features(story_id: &str, features: &[Vec<f64>]) -> Result<usize> {
    let dim = features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Data(format!("story {story_id}: no images")))?;
    if dim == 0 {
        return Err(Error::Data(format!("story {story_id}: empty feature vector")));
    }
    if let Some((t, f)) = features.iter().enumerate().find(|(_, f)| f.len() != dim) {
        return Err(Error::Data(format!(
            "story {story_id}: image {t} has {} features, expected {dim}",
            f.len()
        )));
    }
    if features.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Data(format!("story {story_id}: non-finite feature value")));
    }
    Ok(dim)
}

impl StoryText {
    /// Checks alignment and feature consistency; returns the feature dimension.
    pub fn validate(&self) -> Result<usize> {
        if self.features.len() != self.sentences.len() {
            return Err(Error::Data(format!(
                "story {}: {} images but {} sentences",
                self.story_id,
                self.features.len(),
                self.sentences.len()
            )));
        }
        check_features(&self.story_id, &self.features)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

impl StoryRecord {
    pub fn validate(&self) -> Result<usize> {
        if self.features.len() != self.sentences.len() {
            return Err(Error::Data(format!(
                "story {}: {} images but {} sentences",
                self.story_id,
                self.features.len(),
                self.sentences.len()
            )));
        }
        for s in &self.sentences {
            check_target(s)?;
        }
        check_features(&self.story_id, &self.features)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Lowercases and splits on whitespace; every character that is neither
/// alphanumeric nor whitespace becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in lower.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            tokens.push(core::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Word ↔ id mapping. Ids 0–3 are `<pad>`, `<start>`, `<end>`, `<unk>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
    min_count: usize,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its id-ordered word list (reserved entries
    /// included), as stored in a checkpoint.
    pub fn from_words(words: Vec<String>, min_count: usize) -> Result<Self> {
        if words.len() < special::NAMES.len()
            || words.iter().zip(special::NAMES).any(|(w, r)| w != r)
        {
            return Err(Error::Data("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = BTreeMap::new();
        for (id, w) in words.iter().enumerate() {
            if index.insert(w.clone(), id).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Vocabulary {
            words,
            index,
            min_count,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// `<start> w₁ … wₙ <end>`.
    pub fn encode_sentence<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(START);
        ids.extend(tokens.iter().map(|t| self.id(t.as_ref())));
        ids.push(END);
        ids
    }

    pub fn encode_story(&self, story: &StoryText) -> Result<StoryRecord> {
        story.validate()?;
        Ok(StoryRecord {
            story_id: story.story_id.clone(),
            features: story.features.clone(),
            sentences: story.sentences.iter().map(|s| self.encode_sentence(s)).collect(),
        })
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or(special::NAMES[UNK]))
            .collect()
    }
}

/// Words seen at least `min_count` times get ids in descending frequency
/// order (ties alphabetical); the rest map to `<unk>`.
pub fn build_vocab(records: &[StoryText], min_count: usize) -> Result<Vocabulary> {
    if records.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for token in records.iter().flat_map(|r| r.sentences.iter().flatten()) {
        if special::NAMES.contains(&token.as_str()) {
            continue;
        }
        *freq.entry(token.as_str()).or_insert(0) += 1;
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().filter(|&(_, c)| c >= min_count).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let words = special::NAMES
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(w, _)| w.to_string()))
        .collect();
    Vocabulary::from_words(words, min_count)
}

/// Train / validation / test partition, disjoint by story id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<StoryRecord>,
    pub validation: Vec<StoryRecord>,
    pub test: Vec<StoryRecord>,
}

impl CorpusSplit {
    pub fn new(train: Vec<StoryRecord>, validation: Vec<StoryRecord>, test: Vec<StoryRecord>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in train.iter().chain(&validation).chain(&test) {
            if !seen.insert(r.story_id.as_str()) {
                return Err(Error::Data(format!(
                    "story {} appears more than once across splits",
                    r.story_id
                )));
            }
        }
        Ok(CorpusSplit {
            train,
            validation,
            test,
        })
    }
}

/// Permutation of `0..n_records` for one epoch, fixed by `(seed, epoch)`.
pub fn epoch_order(n_records: usize, epoch: u64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n_records).collect();
    order.shuffle(&mut rng);
    order
}

const NOUNS: [&str; 24] = [
    "dog", "cat", "boy", "girl", "car", "tree", "house", "beach", "cake", "ball", "bird", "man",
    "woman", "baby", "boat", "park", "city", "party", "flower", "horse", "bus", "river", "team",
    "family",
];
const VERBS: [&str; 14] = [
    "runs", "sits", "plays", "eats", "jumps", "smiles", "waits", "swims", "sleeps", "reads",
    "sings", "dances", "walks", "laughs",
];
const ADJECTIVES: [&str; 14] = [
    "big", "small", "red", "happy", "old", "young", "green", "tall", "little", "bright", "quiet",
    "busy", "sunny", "funny",
];

/// Shape of the synthetic corpus.
///
/// Every image carries three latent words (adjective, noun, verb). Its
/// feature vector is the sum of fixed random embeddings of those words plus
/// Gaussian noise, and its sentence is `the <adj> <noun> <verb> .`, prefixed
/// with `then` after the first image. Each story has a protagonist noun that
/// recurs with probability `protagonist_rate`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Seeds the word embeddings, shared by every corpus drawn from this spec.
    pub world_seed: u64,
    pub feature_dim: usize,
    pub images_per_story: usize,
    pub noise: f64,
    pub n_nouns: usize,
    pub n_verbs: usize,
    pub n_adjectives: usize,
    pub protagonist_rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            world_seed: 7,
            feature_dim: 32,
            images_per_story: 5,
            noise: 0.05,
            n_nouns: NOUNS.len(),
            n_verbs: VERBS.len(),
            n_adjectives: ADJECTIVES.len(),
            protagonist_rate: 0.6,
        }
    }
}

/// The latent word embeddings of a [`SynthSpec`].
#[derive(Clone, Debug)]
pub struct SynthWorld {
    spec: SynthSpec,
    adjectives: Vec<Vec<f64>>,
    nouns: Vec<Vec<f64>>,
    verbs: Vec<Vec<f64>>,
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller with u in (0, 1]
    let u: f64 = 1.0 - rng.gen::<f64>();
    let v: f64 = rng.gen();
    libm::sqrt(-2.0 * libm::log(u)) * libm::cos(core::f64::consts::TAU * v)
}

impl SynthWorld {
    pub fn new(spec: SynthSpec) -> Result<Self> {
        if spec.n_nouns == 0 || spec.n_nouns > NOUNS.len() {
            return Err(Error::Config(format!("n_nouns must be in 1..={}", NOUNS.len())));
        }
        if spec.n_verbs == 0 || spec.n_verbs > VERBS.len() {
            return Err(Error::Config(format!("n_verbs must be in 1..={}", VERBS.len())));
        }
        if spec.n_adjectives == 0 || spec.n_adjectives > ADJECTIVES.len() {
            return Err(Error::Config(format!(
                "n_adjectives must be in 1..={}",
                ADJECTIVES.len()
            )));
        }
        if spec.feature_dim == 0 || spec.images_per_story == 0 {
            return Err(Error::Config("synthetic dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.world_seed);
        let d = spec.feature_dim;
        let mut table = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..d).map(|_| gaussian(&mut rng)).collect())
                .collect()
        };
        let adjectives = table(spec.n_adjectives);
        let nouns = table(spec.n_nouns);
        let verbs = table(spec.n_verbs);
        Ok(SynthWorld {
            spec,
            adjectives,
            nouns,
            verbs,
        })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn adjectives(&self) -> &[&'static str] {
        &ADJECTIVES[..self.spec.n_adjectives]
    }

    pub fn nouns(&self) -> &[&'static str] {
        &NOUNS[..self.spec.n_nouns]
    }

    pub fn verbs(&self) -> &[&'static str] {
        &VERBS[..self.spec.n_verbs]
    }

    /// Noise-free feature vector of an image with the given latent words.
    pub fn clean_feature(&self, adjective: usize, noun: usize, verb: usize) -> Vec<f64> {
        (0..self.spec.feature_dim)
            .map(|j| self.adjectives[adjective][j] + self.nouns[noun][j] + self.verbs[verb][j])
            .collect()
    }

    /// Template sentence for image `position` of a story.
    pub fn sentence(&self, position: usize, adjective: usize, noun: usize, verb: usize) -> Vec<String> {
        let mut words = Vec::with_capacity(6);
        if position > 0 {
            words.push("then".to_string());
        }
        words.push("the".to_string());
        words.push(ADJECTIVES[adjective].to_string());
        words.push(NOUNS[noun].to_string());
        words.push(VERBS[verb].to_string());
        words.push(".".to_string());
        words
    }

    /// `n_stories` stories, deterministic given `seed`.
    pub fn generate(&self, seed: u64, n_stories: usize) -> Vec<StoryText> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = &self.spec;
        (0..n_stories)
            .map(|i| {
                let protagonist = rng.gen_range(0..spec.n_nouns);
                let mut features = Vec::with_capacity(spec.images_per_story);
                let mut sentences = Vec::with_capacity(spec.images_per_story);
                for t in 0..spec.images_per_story {
                    let noun = if rng.gen::<f64>() < spec.protagonist_rate {
                        protagonist
                    } else {
                        rng.gen_range(0..spec.n_nouns)
                    };
                    let adjective = rng.gen_range(0..spec.n_adjectives);
                    let verb = rng.gen_range(0..spec.n_verbs);
                    let mut f = self.clean_feature(adjective, noun, verb);
                    if spec.noise > 0.0 {
                        for x in &mut f {
                            *x += spec.noise * gaussian(&mut rng);
                        }
                    }
                    features.push(f);
                    sentences.push(self.sentence(t, adjective, noun, verb));
                }
                StoryText {
                    story_id: format!("synth-{seed:x}-{i:05}"),
                    features,
                    sentences,
                }
            })
            .collect()
    }
}

/// Synthetic stories drawn from `spec`; see [`SynthSpec`].
pub fn synth_corpus(seed: u64, n_stories: usize, spec: &SynthSpec) -> Result<Vec<StoryText>> {
    if n_stories == 0 {
        return Err(Error::Contract("n_stories must be at least 1".into()));
    }
    Ok(SynthWorld::new(spec.clone())?.generate(seed, n_stories))
}

/// Function words of the synthetic templates.
pub const SYNTH_FUNCTION_WORDS: [&str; 3] = ["the", "then", "."];
