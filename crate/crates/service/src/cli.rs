//! Subcommands for the full lifecycle: corpus, tokenizer, base model, block
//! training, generation, evaluation and serving.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use cocon::block::CoConModel;
use cocon::checkpoint::{self, CheckpointMeta};
use cocon::corpus::{encode_documents, read_documents, write_documents, SegmentSampler};
use cocon::evaluation::{self, ContinueSettings};
use cocon::generator::{self, GenerationRequest, Mode};
use cocon::gradcheck::{self, GradCheckConfig};
use cocon::lm::{self, LanguageModel};
use cocon::metrics::MetricReport;
use cocon::tokenizer::{bpe_train, Vocab};
use cocon::trainer::Trainer;
use cocon::{synthetic, tensor::ParameterStore};

use crate::config::{require, RunConfig, CONFIG_ENV};
use crate::http;
use crate::lock::TrainLock;

#[derive(Debug, Parser)]
#[command(name = "cocon", version, about = "Train and run a content-conditioned language model")]
pub struct Cli {
    /// Run configuration (JSON). Built-in defaults when absent.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Cocon,
    Plain,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the effective run configuration as JSON.
    ShowConfig,
    /// Write a synthetic training corpus and a held-out split.
    SynthCorpus {
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        heldout: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Learn BPE merges from the training corpus.
    BpeTrain,
    /// Pretrain the base LM (or, with --evaluator, the evaluator LM on the held-out split).
    PretrainBase {
        #[arg(long)]
        evaluator: bool,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sample a training corpus from the frozen base LM.
    SelfCorpus {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train the block (and discriminator) on top of the frozen base LM.
    TrainCocon {
        /// Documents to train on; defaults to the self-generated corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Write an intermediate checkpoint every N steps (0 = only at the end).
        #[arg(long, default_value_t = 500)]
        checkpoint_every: usize,
    },
    /// Generate continuations of a prompt.
    Generate {
        #[arg(long)]
        prompt: String,
        /// Content input; repeat for several contents.
        #[arg(long = "content")]
        contents: Vec<String>,
        #[arg(long, allow_hyphen_values = true)]
        tau: Option<f64>,
        #[arg(long)]
        top_p: Option<f64>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = ModeArg::Cocon)]
        mode: ModeArg,
        /// Checkpoint to load instead of the configured one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Print the full result as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Score block and plain-LM continuations of held-out pairs against their contents.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference check of every training loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the HTTP API.
    Serve {
        /// Address to bind, e.g. 127.0.0.1:8080; defaults to the configured one.
        #[arg(long)]
        addr: Option<String>,
    },
}

/// Parses arguments, runs the command and maps failures to exit codes:
/// 2 for usage errors, 1 for runtime errors.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(())
        }
        Command::SynthCorpus { train, heldout, seed } => synth_corpus(&cfg, train, heldout, seed),
        Command::BpeTrain => train_bpe(&cfg),
        Command::PretrainBase { evaluator, steps } => pretrain(&cfg, evaluator, steps),
        Command::SelfCorpus { n } => self_corpus(&cfg, n),
        Command::TrainCocon {
            corpus,
            steps,
            checkpoint_every,
        } => train_cocon(&cfg, corpus, steps, checkpoint_every),
        Command::Generate {
            prompt,
            contents,
            tau,
            top_p,
            max_new_tokens,
            n_samples,
            seed,
            mode,
            checkpoint,
            json,
        } => {
            let g = &cfg.generation;
            let req = GenerationRequest {
                prompt,
                contents,
                tau: tau.unwrap_or(g.tau),
                top_p: top_p.unwrap_or(g.top_p),
                max_new_tokens: max_new_tokens.unwrap_or(g.max_new_tokens),
                n_samples: n_samples.unwrap_or(g.n_samples),
                seed,
                mode: match mode {
                    ModeArg::Cocon => Mode::Cocon,
                    ModeArg::Plain => Mode::Plain,
                },
            };
            generate(&cfg, req, checkpoint, json)
        }
        Command::Eval { checkpoint, json } => eval(&cfg, checkpoint, json),
        Command::Gradcheck { seed } => gradcheck_cmd(seed),
        Command::Serve { addr } => {
            let addr = addr.unwrap_or_else(|| format!("{}:{}", cfg.service.bind, cfg.service.port));
            require(&[
                ("checkpoint", &cfg.paths.cocon_checkpoint),
                ("vocabulary", &cfg.paths.vocab),
            ])?;
            let ui = cfg.paths.ui_dir.is_dir().then(|| cfg.paths.ui_dir.clone());
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(http::serve(&addr, cfg.paths.cocon_checkpoint.clone(), cfg.paths.vocab.clone(), ui))
        }
    }
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn synth_corpus(cfg: &RunConfig, train: usize, heldout: usize, seed: u64) -> anyhow::Result<()> {
    let docs = synthetic::documents(train + heldout, seed);
    let (a, b) = docs.split_at(train);
    for (path, part) in [(&cfg.paths.corpus, a), (&cfg.paths.heldout, b)] {
        ensure_parent(path)?;
        write_documents(path, part)?;
        eprintln!("wrote {} documents to {}", part.len(), path.display());
    }
    Ok(())
}

fn train_bpe(cfg: &RunConfig) -> anyhow::Result<()> {
    require(&[("corpus", &cfg.paths.corpus)])?;
    let docs = read_documents(&cfg.paths.corpus)?;
    let vocab = bpe_train(docs.iter().map(String::as_str), cfg.vocab_size)?;
    ensure_parent(&cfg.paths.vocab)?;
    vocab.save(&cfg.paths.vocab)?;
    eprintln!("wrote {} ids ({} merges) to {}", vocab.size(), vocab.merges().len(), cfg.paths.vocab.display());
    Ok(())
}

fn load_vocab(cfg: &RunConfig) -> anyhow::Result<Vocab> {
    require(&[("vocabulary", &cfg.paths.vocab)])?;
    Ok(Vocab::load(&cfg.paths.vocab)?)
}

fn pretrain(cfg: &RunConfig, evaluator: bool, steps: Option<usize>) -> anyhow::Result<()> {
    let (corpus, out) = if evaluator {
        (&cfg.paths.heldout, &cfg.paths.evaluator_checkpoint)
    } else {
        (&cfg.paths.corpus, &cfg.paths.base_checkpoint)
    };
    require(&[("corpus", corpus)])?;
    let vocab = load_vocab(cfg)?;
    let docs = encode_documents(&vocab, &read_documents(corpus)?);
    let mut pc = cfg.pretrain.clone();
    if let Some(s) = steps {
        pc.steps = s;
    }
    if evaluator {
        pc.seed = pc.seed.wrapping_add(1000);
    }
    let store = lm::pretrain_base(&docs, &cfg.lm, &pc, |log| {
        if log.step % 50 == 0 || log.step + 1 == pc.steps {
            eprintln!("step {:>5}  loss {:.4}", log.step, log.loss);
        }
    })?;
    ensure_parent(out)?;
    checkpoint::save(out, &CheckpointMeta::new(cfg.lm.clone()), &store)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> anyhow::Result<(CheckpointMeta, ParameterStore)> {
    require(&[("checkpoint", path)])?;
    checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn self_corpus(cfg: &RunConfig, n: Option<usize>) -> anyhow::Result<()> {
    let vocab = load_vocab(cfg)?;
    let (meta, store) = load_checkpoint(&cfg.paths.base_checkpoint)?;
    let model = CoConModel::new(meta.lm)?;
    let sc = &cfg.self_corpus;
    let docs = generator::self_generate_corpus(&model, &store, &vocab, n.unwrap_or(sc.n_samples), sc.sample_len, sc.top_p, sc.seed)?;
    ensure_parent(&cfg.paths.self_corpus)?;
    write_documents(&cfg.paths.self_corpus, &docs)?;
    eprintln!("wrote {} documents to {}", docs.len(), cfg.paths.self_corpus.display());
    Ok(())
}

fn train_cocon(cfg: &RunConfig, corpus: Option<PathBuf>, steps: Option<usize>, checkpoint_every: usize) -> anyhow::Result<()> {
    let corpus = corpus.unwrap_or_else(|| cfg.paths.self_corpus.clone());
    require(&[("training corpus", &corpus)])?;
    let vocab = load_vocab(cfg)?;
    let (meta, base) = load_checkpoint(&cfg.paths.base_checkpoint)?;
    let out = &cfg.paths.cocon_checkpoint;
    let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let _lock = TrainLock::acquire(dir)?;

    let mut tc = cfg.trainer.clone();
    if let Some(s) = steps {
        tc.steps = s;
    }
    let docs = encode_documents(&vocab, &read_documents(&corpus)?);
    let sampler = SegmentSampler::new(docs, tc.seg_len, tc.break_lo, tc.break_hi)?;
    let model = CoConModel::new(meta.lm.clone())?;
    let mut trainer = Trainer::new(model, base, sampler, tc.clone())?;
    ensure_parent(&cfg.paths.metrics)?;
    let mut metrics = BufWriter::new(File::create(&cfg.paths.metrics)?);
    let ckpt_meta = CheckpointMeta {
        lm: meta.lm,
        trainer: Some(tc.clone()),
        frozen: Vec::new(),
    };
    while trainer.steps_done() < tc.steps {
        let m = trainer.step()?;
        writeln!(metrics, "{}", serde_json::to_string(&m)?)?;
        if m.step % 25 == 0 || m.step == tc.steps {
            metrics.flush()?;
            eprintln!("{}", serde_json::to_string(&m)?);
        }
        if checkpoint_every > 0 && m.step % checkpoint_every == 0 && m.step < tc.steps {
            checkpoint::save(out, &ckpt_meta, &trainer.store)?;
        }
    }
    metrics.flush()?;
    checkpoint::save(out, &ckpt_meta, &trainer.store)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn generate(cfg: &RunConfig, req: GenerationRequest, checkpoint: Option<PathBuf>, json: bool) -> anyhow::Result<()> {
    let path = checkpoint.unwrap_or_else(|| cfg.paths.cocon_checkpoint.clone());
    require(&[("checkpoint", &path), ("vocabulary", &cfg.paths.vocab)])?;
    let m = http::Model::load(&path, &cfg.paths.vocab)?;
    if let Err((field, msg)) = req.validate() {
        bail!("{field}: {msg}");
    }
    let res = generator::generate(&req, &m.model, &m.store, &m.vocab)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&res)?);
    } else {
        for s in &res.samples {
            println!("{}", s.text);
        }
        eprintln!("seed {}  {:.0} ms", res.seed, res.elapsed_ms);
    }
    Ok(())
}

fn eval(cfg: &RunConfig, checkpoint: Option<PathBuf>, json: bool) -> anyhow::Result<()> {
    let path = checkpoint.unwrap_or_else(|| cfg.paths.cocon_checkpoint.clone());
    require(&[("held-out corpus", &cfg.paths.heldout)])?;
    let vocab = load_vocab(cfg)?;
    let (meta, store) = load_checkpoint(&path)?;
    let model = CoConModel::new(meta.lm)?;
    let evaluator = if cfg.paths.evaluator_checkpoint.exists() {
        let (m, s) = load_checkpoint(&cfg.paths.evaluator_checkpoint)?;
        Some((LanguageModel::new(m.lm)?, s))
    } else {
        eprintln!("no evaluator checkpoint at {}; perplexity omitted", cfg.paths.evaluator_checkpoint.display());
        None
    };
    let e = &cfg.eval;
    let docs = encode_documents(&vocab, &read_documents(&cfg.paths.heldout)?);
    let pairs = evaluation::sample_pairs(&docs, e.n_pairs, e.prompt_len, e.content_len, e.seed)?;
    let mut reports = Vec::new();
    for (label, mode) in [("CoCon", Mode::Cocon), ("Base LM", Mode::Plain)] {
        let settings = ContinueSettings {
            mode,
            tau: 0.0,
            top_p: e.top_p,
            max_new_tokens: e.max_new_tokens,
            seed: e.seed,
        };
        let outputs = evaluation::continue_pairs(&model, &store, &pairs, &settings)?;
        let ev = evaluator.as_ref().map(|(m, s)| (m, s));
        reports.push(evaluation::score(label, &vocab, &pairs, &outputs, ev)?);
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&reports)?);
    } else {
        print!("{}", MetricReport::table(&reports));
    }
    Ok(())
}

fn gradcheck_cmd(seed: u64) -> anyhow::Result<()> {
    let report = gradcheck::run(&GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    })?;
    for c in &report.checks {
        println!(
            "{:<10} max rel error {:.3e} over {} entries (worst {})",
            c.loss, c.max_rel_error, c.entries, c.worst_param
        );
    }
    if !report.passed() {
        bail!("gradient check failed: {:.3e} exceeds {:.0e}", report.worst(), report.tolerance);
    }
    println!("ok");
    Ok(())
}
