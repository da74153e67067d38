use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use llm2rec::config::PipelineConfig;
use llm2rec::data::Split;
use llm2rec::embedding::{embed_corpus, EmbeddingMode, EmbeddingTable};
use llm2rec::eval::{comparison_table, evaluate, init_threads_from_env, MetricsReport, RankExclusion};
use llm2rec::model::{ModelCheckpoint, StageTag};
use llm2rec::pipeline::{self, Prepared};
use llm2rec::recommender::{RecKind, RecModel};
use llm2rec::synthetic::{generate, SyntheticSpec};
use llm2rec::{Error, Result};

/// Item embeddings from a small language model trained in three stages,
/// evaluated through downstream sequential recommenders.
#[derive(Parser)]
#[command(name = "llm2rec", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (overrides `run.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Start from the reference recipe's hyperparameters instead of the
    /// desk-scale defaults.
    #[arg(long, global = true)]
    paper_defaults: bool,
    /// Candidate rule at ranking time: `seen` drops the user's history
    /// items, `none` ranks the whole catalog.
    #[arg(long, global = true)]
    rank_exclusion: Option<RankExclusion>,
    /// Interaction file; the bundled synthetic corpus if omitted.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Filter, split and print dataset statistics; writes the prepared
    /// dataset and vocabulary.
    Prep,
    /// Next-item fine-tuning from a freshly initialized model.
    TrainCsft,
    /// Masked next-token prediction under bidirectional attention.
    TrainMntp {
        /// Input checkpoint (default: <out>/ckpt_csft.bin).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Item-level contrastive learning.
    TrainIc {
        /// Input checkpoint (default: <out>/ckpt_mntp.bin).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Write the item embedding table for a checkpoint.
    Embed {
        /// Checkpoint (default: <out>/ckpt_ic.bin).
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        mode: Option<EmbeddingMode>,
        /// Output file (default: <out>/embeddings.bin).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train a downstream recommender on an embedding table.
    RecTrain {
        #[arg(long)]
        kind: Option<RecKind>,
        /// Embedding table (default: <out>/embeddings.bin).
        #[arg(long)]
        table: Option<PathBuf>,
        /// Output file (default: <out>/recommender.bin).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate a trained recommender with full ranking.
    Evaluate {
        /// Recommender file (default: <out>/recommender.bin).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Also write the machine-readable report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run every stage in order and write all artifacts.
    Pipeline {
        /// Continue from the latest stage checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Print machine reports side by side, with a relative-improvement row
    /// comparing the first against the best of the rest.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Write the synthetic clustered corpus.
    Synth {
        #[arg(long, default_value = "data/synthetic.tsv")]
        output: PathBuf,
        #[arg(long)]
        corpus_seed: Option<u64>,
    },
}

fn config(g: &Global) -> Result<PipelineConfig> {
    let mut c = PipelineConfig::load(g.config.as_deref(), g.paper_defaults)?;
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if let Some(r) = g.rank_exclusion {
        c.eval.rank_exclusion = r;
        c.rec.val_exclusion = r;
    }
    c.validate()?;
    Ok(c)
}

fn prepared(cfg: &PipelineConfig, g: &Global) -> Result<Prepared> {
    pipeline::prepare(cfg, &pipeline::load_raw(g.data.as_deref())?)
}

fn ensure_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn train_from(cfg: &PipelineConfig, g: &Global, from: Option<PathBuf>, stage: StageTag) -> Result<()> {
    let prep = prepared(cfg, g)?;
    let ckpt = match (stage, from) {
        (StageTag::Csft, None) => pipeline::init_base(cfg, &prep.vocab)?,
        (_, Some(p)) => ModelCheckpoint::load(p)?,
        (s, None) => {
            let prev = s.predecessor().unwrap_or(StageTag::Base);
            ModelCheckpoint::load(pipeline::checkpoint_path(&g.out, prev))?
        }
    };
    ensure_out(&g.out)?;
    let (next, log) = pipeline::run_stage(cfg, &prep, &ckpt, stage)?;
    let path = pipeline::checkpoint_path(&g.out, stage);
    next.save(&path)?;
    let (head, tail) = log.head_tail(20);
    println!("{stage}: {} steps, loss {head:.4} -> {tail:.4}; wrote {}", log.losses.len(), path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Synth { output, corpus_seed } => {
            let mut spec = SyntheticSpec::default();
            if let Some(s) = corpus_seed {
                spec.seed = s;
            }
            let ds = generate(&spec)?;
            ds.save(&output)?;
            println!("wrote {} ({} items, {} users)", output.display(), ds.catalog().len(), ds.users().len());
        }
        Command::Prep => {
            let cfg = config(g)?;
            let prep = prepared(&cfg, g)?;
            ensure_out(&g.out)?;
            prep.dataset.save(g.out.join(pipeline::DATASET_FILE))?;
            prep.vocab.save(g.out.join(pipeline::VOCAB_FILE))?;
            let stats = prep.dataset.stats();
            write(&g.out.join("stats.txt"), &format!("{stats}\n"))?;
            println!("{stats}");
            println!("vocabulary: {} tokens", prep.vocab.size());
        }
        Command::TrainCsft => train_from(&config(g)?, g, None, StageTag::Csft)?,
        Command::TrainMntp { from } => train_from(&config(g)?, g, from, StageTag::Mntp)?,
        Command::TrainIc { from } => train_from(&config(g)?, g, from, StageTag::Ic)?,
        Command::Embed { from, mode, output } => {
            let cfg = config(g)?;
            let prep = prepared(&cfg, g)?;
            let ckpt = ModelCheckpoint::load(from.unwrap_or_else(|| pipeline::checkpoint_path(&g.out, StageTag::Ic)))?;
            let table = embed_corpus(&ckpt, prep.dataset.catalog(), &prep.vocab, mode.unwrap_or(cfg.embed_mode), true)?;
            ensure_out(&g.out)?;
            let path = output.unwrap_or_else(|| g.out.join(pipeline::EMBEDDINGS_FILE));
            table.save(&path)?;
            println!("{} x {} {} table from stage {}; wrote {}", table.len(), table.dim, table.mode, table.stage, path.display());
        }
        Command::RecTrain { kind, table, output } => {
            let mut cfg = config(g)?;
            if let Some(k) = kind {
                cfg.set("rec.kind", &k.to_string())?;
            }
            let prep = prepared(&cfg, g)?;
            let table = if cfg.rec.kind.uses_table() {
                Some(EmbeddingTable::load(table.unwrap_or_else(|| g.out.join(pipeline::EMBEDDINGS_FILE)))?)
            } else {
                None
            };
            let (model, log) = pipeline::train_downstream(&cfg, &prep, table.as_ref())?;
            ensure_out(&g.out)?;
            let path = output.unwrap_or_else(|| g.out.join(pipeline::RECOMMENDER_FILE));
            model.save(&path)?;
            let best = &log.epochs[log.best_epoch - 1];
            println!(
                "{}: {} epochs, best epoch {} (val NDCG@10 {:.4}); wrote {}",
                cfg.rec.kind,
                log.epochs.len(),
                log.best_epoch,
                best.val_ndcg10,
                path.display()
            );
        }
        Command::Evaluate { model, split, report } => {
            let cfg = config(g)?;
            let prep = prepared(&cfg, g)?;
            let m = RecModel::load(model.unwrap_or_else(|| g.out.join(pipeline::RECOMMENDER_FILE)))?;
            let mut r = evaluate(&m, &prep.dataset, split, &cfg.eval.ks, cfg.eval.rank_exclusion)?;
            r.meta.insert("config_hash".into(), cfg.hash());
            r.meta.insert("seed".into(), cfg.seed.to_string());
            r.meta.insert("recommender".into(), m.config.kind.to_string());
            if let Some(p) = report {
                write(&p, &r.to_machine())?;
            }
            print!("{}", r.to_text(&m.config.kind.to_string()));
        }
        Command::Pipeline { resume } => {
            let cfg = config(g)?;
            let out = pipeline::run_pipeline(&cfg, g.data.as_deref(), &g.out, resume)?;
            print!("{}", out.report.to_text(&format!("{}+{}", cfg.rec.kind, out.final_stage)));
        }
        Command::Report { reports } => {
            let mut loaded = Vec::new();
            for p in &reports {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let label = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                loaded.push((label, MetricsReport::from_machine(&text)?));
            }
            let rows: Vec<(&str, &MetricsReport)> = loaded.iter().map(|(l, r)| (l.as_str(), r)).collect();
            print!("{}", comparison_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads_from_env();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
