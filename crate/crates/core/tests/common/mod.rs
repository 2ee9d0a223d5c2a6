#![allow(dead_code)]

use std::path::Path;

use owl_core::pipeline::RunConfig;
use owl_core::{Checkpoint, ModelConfig, SeededRng, TokenCorpus};

pub fn tiny_config() -> ModelConfig {
    ModelConfig::new(16, 2, 2, 32, 48)
}

pub fn random_model(cfg: ModelConfig, seed: u64) -> Checkpoint {
    Checkpoint::random(cfg, 0.2, &mut SeededRng::new(seed)).unwrap()
}

/// Writes `model.owlc`, `calib.owlt` and `eval.owlt` into `dir` and returns a
/// config pointing at them.
pub fn write_inputs(dir: &Path, model: &Checkpoint, calib_len: usize, eval_len: usize, seed: u64) -> RunConfig {
    let mut rng = SeededRng::new(seed ^ 0x5eed);
    let vocab = model.config.vocab_size;
    model.save(dir.join("model.owlc")).unwrap();
    TokenCorpus::random(vocab, calib_len, &mut rng).save(dir.join("calib.owlt")).unwrap();
    TokenCorpus::random(vocab, eval_len, &mut rng).save(dir.join("eval.owlt")).unwrap();
    RunConfig {
        model: dir.join("model.owlc"),
        tokens: dir.join("calib.owlt"),
        eval_tokens: Some(dir.join("eval.owlt")),
        nsamples: 4,
        seqlen: 16,
        seed,
        out_dir: dir.join("out"),
        ..RunConfig::default()
    }
}
