#![allow(dead_code)]

use std::path::{Path, PathBuf};

use glacnet::commands::{run_synth, run_train, TrainArgs};
use glacnet::CheckpointFile;

pub const SMALL_CONFIG: &str = "\
feature_dim=32
encoder_hidden=4
glocal_dim=8
embed_dim=4
decoder_hidden=8
max_len=8
batch_size=8
epochs=2
learning_rate=0.01
";

pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new() -> Self {
        Workspace {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    pub fn synth(&self, name: &str, n: usize, seed: u64) -> PathBuf {
        let p = self.path(name);
        run_synth(&p, n, seed).unwrap();
        p
    }

    pub fn train_small(&self, corpus: &Path, seed: u64, out: &str) -> CheckpointFile {
        let args = TrainArgs {
            corpus: corpus.to_path_buf(),
            config: self.write("small.conf", SMALL_CONFIG),
            seed,
            out: self.path(out),
            validation: None,
        };
        run_train(&args, &mut Vec::new()).unwrap()
    }
}
