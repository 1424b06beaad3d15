//! Binary checkpoint container.
//!
//! Layout (all integers little-endian `u64` unless noted, strings are a
//! length followed by UTF-8 bytes):
//!
//! ```text
//! magic "GLACNET\0" | version u32
//! config text (key=value lines)
//! epoch
//! rng: seed [u8; 32] | stream | word position u128
//! vocabulary: min_count | n | n strings
//! exempt ids: n | n ids
//! tensors: n | n × (name | rank | rank dims | values f64)
//! batch-norm stats: n | n × (width | width means f64 | width variances f64)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use glacnet_core::corpus::Vocabulary;
use glacnet_core::model::GlacNet;
use glacnet_core::tape::BatchNormStats;
use glacnet_core::train::Checkpoint;
use glacnet_core::Tensor;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::config_file::RunConfig;
use crate::IoError;

pub const MAGIC: &[u8; 8] = b"GLACNET\0";
pub const FORMAT_VERSION: u32 = 1;

/// A checkpoint together with the std-side run settings it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub checkpoint: Checkpoint,
    pub exempt_file: Option<PathBuf>,
}

impl CheckpointFile {
    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            train: self.checkpoint.config.clone(),
            exempt_file: self.exempt_file.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let ck = &self.checkpoint;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        w.string(&self.run_config().to_text());
        w.u64(ck.epoch);
        w.0.extend_from_slice(&ck.rng.get_seed());
        w.u64(ck.rng.get_stream());
        w.0.extend_from_slice(&ck.rng.get_word_pos().to_le_bytes());
        w.len(ck.vocab.min_count());
        w.len(ck.vocab.len());
        for word in ck.vocab.words() {
            w.string(word);
        }
        let exempt = ck.config.sampler.exempt();
        w.len(exempt.len());
        for &id in exempt {
            w.len(id);
        }
        let params = ck.model.params();
        w.len(params.len());
        for (name, tensor) in params.iter() {
            w.string(name);
            w.len(tensor.shape().len());
            for &d in tensor.shape() {
                w.len(d);
            }
            w.f64s(tensor.data());
        }
        let stats = ck.model.bn_stats();
        w.len(stats.len());
        for s in stats {
            w.len(s.width());
            w.f64s(&s.mean);
            w.f64s(&s.var);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IoError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(IoError::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(IoError::Format(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let run = RunConfig::parse(&r.string()?)?;
        let epoch = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let min_count = r.len()?;
        let n_words = r.len()?;
        let words = (0..n_words).map(|_| r.string()).collect::<Result<Vec<_>, _>>()?;
        let vocab = Vocabulary::from_words(words, min_count)?;

        let n_exempt = r.len()?;
        let exempt = (0..n_exempt).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;

        let n_tensors = r.len()?;
        let mut tensors = Vec::with_capacity(n_tensors.min(1024));
        for _ in 0..n_tensors {
            let name = r.string()?;
            let rank = r.len()?;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| IoError::Format(format!("tensor {name} is too large")))?;
            let data = r.f64s(numel)?;
            tensors.push((name, Tensor::new(shape, data)?));
        }

        let n_stats = r.len()?;
        let mut stats = Vec::with_capacity(n_stats.min(1024));
        for _ in 0..n_stats {
            let width = r.len()?;
            let mean = r.f64s(width)?;
            let var = r.f64s(width)?;
            stats.push(BatchNormStats { mean, var });
        }
        if r.pos != bytes.len() {
            return Err(IoError::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }

        let mut config = run.train;
        config.sampler.set_exempt(exempt);
        let model = GlacNet::from_parts(config.model_config(vocab.len()), tensors, stats)?;
        Ok(CheckpointFile {
            checkpoint: Checkpoint {
                model,
                vocab,
                config,
                epoch,
                rng,
            },
            exempt_file: run.exempt_file,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        fs::write(path, self.to_bytes()).map_err(|e| IoError::open(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let bytes = fs::read(path).map_err(|e| IoError::open(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.in_file(path))
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn string(&mut self, s: &str) {
        self.len(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }

    fn f64s(&mut self, values: &[f64]) {
        for v in values {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| IoError::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, IoError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| IoError::Format(format!("length {v} out of range")))
    }

    fn string(&mut self) -> Result<String, IoError> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| IoError::Format("invalid UTF-8 in checkpoint".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, IoError> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| IoError::Format("tensor too large".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
