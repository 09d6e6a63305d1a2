//! The run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cocon::lm::{LMConfig, PretrainConfig};
use cocon::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};

/// Environment variable naming the config file when `--config` is absent.
pub const CONFIG_ENV: &str = "COCON_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Training documents, one per line.
    pub corpus: PathBuf,
    /// Held-out documents for the evaluator LM and for evaluation pairs.
    pub heldout: PathBuf,
    pub vocab: PathBuf,
    pub base_checkpoint: PathBuf,
    pub self_corpus: PathBuf,
    pub cocon_checkpoint: PathBuf,
    pub evaluator_checkpoint: PathBuf,
    /// JSON-lines training metrics.
    pub metrics: PathBuf,
    /// Static playground assets served under `/ui`.
    pub ui_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        let run = Path::new("run");
        Paths {
            corpus: run.join("corpus.txt"),
            heldout: run.join("heldout.txt"),
            vocab: run.join("vocab.txt"),
            base_checkpoint: run.join("base.ckpt"),
            self_corpus: run.join("self_corpus.txt"),
            cocon_checkpoint: run.join("cocon.ckpt"),
            evaluator_checkpoint: run.join("evaluator.ckpt"),
            metrics: run.join("metrics.jsonl"),
            ui_dir: PathBuf::from("ui"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfCorpusConfig {
    pub n_samples: usize,
    pub sample_len: usize,
    pub top_p: f64,
    pub seed: u64,
}

impl Default for SelfCorpusConfig {
    fn default() -> Self {
        SelfCorpusConfig {
            n_samples: 5000,
            sample_len: 40,
            top_p: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationDefaults {
    pub tau: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub n_samples: usize,
}

impl Default for GenerationDefaults {
    fn default() -> Self {
        GenerationDefaults {
            tau: 0.0,
            top_p: 0.9,
            max_new_tokens: 20,
            n_samples: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_pairs: usize,
    pub prompt_len: usize,
    pub content_len: usize,
    pub max_new_tokens: usize,
    pub top_p: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_pairs: 100,
            prompt_len: 10,
            content_len: 10,
            max_new_tokens: 20,
            top_p: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1".into(),
            port: 8080,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    /// Target BPE vocabulary size, special tokens included.
    pub vocab_size: usize,
    pub lm: LMConfig,
    pub pretrain: PretrainConfig,
    pub self_corpus: SelfCorpusConfig,
    pub trainer: TrainerConfig,
    pub generation: GenerationDefaults,
    pub eval: EvalConfig,
    pub service: ServiceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: Paths::default(),
            vocab_size: 512,
            lm: LMConfig::default(),
            pretrain: PretrainConfig::default(),
            self_corpus: SelfCorpusConfig::default(),
            trainer: TrainerConfig::default(),
            generation: GenerationDefaults::default(),
            eval: EvalConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` if given, else the built-in defaults. Relative paths in
    /// the file resolve against the file's directory.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(dir) = path.parent() {
            cfg.paths.rebase(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.lm.validate()?;
        self.trainer.validate()?;
        if self.lm.vocab_size < self.vocab_size {
            bail!(
                "lm.vocab_size {} is smaller than the tokenizer size {}",
                self.lm.vocab_size,
                self.vocab_size
            );
        }
        if !(self.generation.top_p > 0.0 && self.generation.top_p <= 1.0) {
            bail!("generation.top_p must lie in (0, 1]");
        }
        if !(self.self_corpus.top_p > 0.0 && self.self_corpus.top_p <= 1.0) {
            bail!("self_corpus.top_p must lie in (0, 1]");
        }
        if self.pretrain.steps == 0 || self.pretrain.batch_size == 0 || self.pretrain.seq_len < 2 {
            bail!("pretrain needs steps, batch_size >= 1 and seq_len >= 2");
        }
        Ok(())
    }
}

impl Paths {
    fn rebase(&mut self, dir: &Path) {
        for p in [
            &mut self.corpus,
            &mut self.heldout,
            &mut self.vocab,
            &mut self.base_checkpoint,
            &mut self.self_corpus,
            &mut self.cocon_checkpoint,
            &mut self.evaluator_checkpoint,
            &mut self.metrics,
            &mut self.ui_dir,
        ] {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}

/// Fails with the name of the first missing input.
pub fn require(inputs: &[(&str, &Path)]) -> anyhow::Result<()> {
    for (what, path) in inputs {
        if !path.exists() {
            bail!("{what} not found at {}", path.display());
        }
    }
    Ok(())
}
