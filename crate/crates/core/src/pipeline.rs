//! The end-to-end run: data preparation, the three training stages in
//! order, embedding extraction, downstream training and evaluation. Every
//! stage draws its randomness from a seed derived from the run seed and the
//! stage name, so a run resumed from a saved checkpoint reproduces the
//! uninterrupted run exactly.

use std::path::{Path, PathBuf};

use crate::config::PipelineConfig;
use crate::data::{build_csft_examples, InteractionDataset, Split};
use crate::embedding::{embed_corpus, EmbeddingTable};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::model::{ModelCheckpoint, StageTag};
use crate::recommender::{train_recommender, RecModel, TrainLog};
use crate::rng;
use crate::tokenizer::Vocabulary;
use crate::train::{train_csft, train_ic, train_mntp, StageLog};

/// The bundled synthetic corpus.
pub const SYNTHETIC_CORPUS: &str = include_str!("../../../data/synthetic.tsv");

/// A filtered, split corpus and the vocabulary built from its catalog.
pub struct Prepared {
    pub dataset: InteractionDataset,
    pub vocab: Vocabulary,
}

pub fn prepare(cfg: &PipelineConfig, raw: &InteractionDataset) -> Result<Prepared> {
    let dataset = raw.k_core_filter(cfg.data.k_core)?.leave_one_out_split();
    if dataset.users().is_empty() {
        return Err(Error::Parameter("no user has three or more interactions".into()));
    }
    let vocab = Vocabulary::build(dataset.catalog().titles(), cfg.data.min_count)?;
    Ok(Prepared { dataset, vocab })
}

/// Loads an interaction file, or the bundled synthetic corpus for `None`.
pub fn load_raw(path: Option<&Path>) -> Result<InteractionDataset> {
    match path {
        Some(p) => InteractionDataset::load(p),
        None => InteractionDataset::parse(SYNTHETIC_CORPUS),
    }
}

pub fn stage_seed(cfg: &PipelineConfig, label: &str) -> u64 {
    rng::derive_label(cfg.seed, label)
}

pub fn init_base(cfg: &PipelineConfig, vocab: &Vocabulary) -> Result<ModelCheckpoint> {
    ModelCheckpoint::init(cfg.model.model_config(vocab.size()), stage_seed(cfg, "init"))
}

/// Runs the stage that follows `from`'s stage.
pub fn run_stage(
    cfg: &PipelineConfig,
    prep: &Prepared,
    from: &ModelCheckpoint,
    stage: StageTag,
) -> Result<(ModelCheckpoint, StageLog)> {
    from.require_stage_for(stage)?;
    match stage {
        StageTag::Csft => {
            let mut c = cfg.csft.clone();
            c.max_items = cfg.data.max_items;
            let examples = build_csft_examples(&prep.dataset, &prep.vocab, c.max_items)?;
            train_csft(from, &examples, &c, stage_seed(cfg, "csft"))
        }
        StageTag::Mntp => {
            let enc = prep.dataset.catalog().encode_all(&prep.vocab)?;
            train_mntp(from, &enc, &cfg.mntp, stage_seed(cfg, "mntp"))
        }
        StageTag::Ic => {
            let enc = prep.dataset.catalog().encode_all(&prep.vocab)?;
            train_ic(from, &enc, &cfg.ic, stage_seed(cfg, "ic"))
        }
        StageTag::Base => Err(Error::Parameter("the base stage is initialized, not trained".into())),
    }
}

pub fn train_downstream(
    cfg: &PipelineConfig,
    prep: &Prepared,
    table: Option<&EmbeddingTable>,
) -> Result<(RecModel, TrainLog)> {
    let mut rc = cfg.rec.clone();
    rc.val_exclusion = cfg.eval.rank_exclusion;
    train_recommender(&rc, table, &prep.dataset, stage_seed(cfg, "rec"))
}

pub fn evaluate_test(cfg: &PipelineConfig, prep: &Prepared, model: &RecModel) -> Result<MetricsReport> {
    let mut r = evaluate(model, &prep.dataset, Split::Test, &cfg.eval.ks, cfg.eval.rank_exclusion)?;
    r.meta.insert("config_hash".into(), cfg.hash());
    r.meta.insert("seed".into(), cfg.seed.to_string());
    r.meta.insert("recommender".into(), model.config.kind.to_string());
    Ok(r)
}

/// File names inside the output directory.
pub fn checkpoint_path(out: &Path, stage: StageTag) -> PathBuf {
    out.join(format!("ckpt_{}.bin", stage.name()))
}

pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const RECOMMENDER_FILE: &str = "recommender.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const DATASET_FILE: &str = "dataset.tsv";
pub const REPORT_MACHINE_FILE: &str = "report.tsv";
pub const REPORT_TEXT_FILE: &str = "report.txt";

fn write_losses(out: &Path, log: &StageLog) -> Result<()> {
    let path = out.join(format!("losses_{}.txt", log.stage.name()));
    let text: String = log.losses.iter().map(|l| format!("{l:?}\n")).collect();
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn write_rec_log(out: &Path, log: &TrainLog) -> Result<()> {
    let path = out.join("rec_log.tsv");
    let mut text = format!("initial_loss\t{:?}\nbest_epoch\t{}\n", log.initial_loss, log.best_epoch);
    text.push_str("epoch\ttrain_loss\tval_ndcg@10\tval_recall@10\n");
    for e in &log.epochs {
        text.push_str(&format!("{}\t{:?}\t{:?}\t{:?}\n", e.epoch, e.train_loss, e.val_ndcg10, e.val_recall10));
    }
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub struct PipelineOutput {
    pub report: MetricsReport,
    pub final_stage: StageTag,
}

/// Runs every stage and writes all artifacts under `out`. With `resume`,
/// starts from the latest stage checkpoint already present in `out`.
pub fn run_pipeline(cfg: &PipelineConfig, data: Option<&Path>, out: &Path, resume: bool) -> Result<PipelineOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let raw = load_raw(data)?;
    let prep = prepare(cfg, &raw)?;
    prep.dataset.save(out.join(DATASET_FILE))?;
    prep.vocab.save(out.join(VOCAB_FILE))?;
    log::info!("dataset:\n{}", prep.dataset.stats());

    let mut ckpt = None;
    if resume {
        for stage in [StageTag::Ic, StageTag::Mntp, StageTag::Csft] {
            let p = checkpoint_path(out, stage);
            if p.exists() {
                let c = ModelCheckpoint::load(&p)?;
                if c.stage != stage {
                    return Err(Error::Format(format!("{} holds a {} checkpoint", p.display(), c.stage)));
                }
                log::info!("resuming from {}", p.display());
                ckpt = Some(c);
                break;
            }
        }
    }
    let mut ckpt = match ckpt {
        Some(c) => c,
        None => {
            let base = init_base(cfg, &prep.vocab)?;
            base.save(checkpoint_path(out, StageTag::Base))?;
            base
        }
    };
    for stage in [StageTag::Csft, StageTag::Mntp, StageTag::Ic] {
        if stage.predecessor() == Some(ckpt.stage) {
            log::info!("training stage {stage}");
            let (next, log) = run_stage(cfg, &prep, &ckpt, stage)?;
            next.save(checkpoint_path(out, stage))?;
            write_losses(out, &log)?;
            ckpt = next;
        }
    }

    let table = embed_corpus(&ckpt, prep.dataset.catalog(), &prep.vocab, cfg.embed_mode, true)?;
    table.save(out.join(EMBEDDINGS_FILE))?;
    let use_table = cfg.rec.kind.uses_table().then_some(&table);
    let (model, log) = train_downstream(cfg, &prep, use_table)?;
    model.save(out.join(RECOMMENDER_FILE))?;
    write_rec_log(out, &log)?;
    let mut report = evaluate_test(cfg, &prep, &model)?;
    report.meta.insert("stage".into(), ckpt.stage.to_string());
    report.meta.insert("embed_mode".into(), cfg.embed_mode.to_string());
    let machine = report.to_machine();
    let path = out.join(REPORT_MACHINE_FILE);
    std::fs::write(&path, machine).map_err(|e| Error::io(path, e))?;
    let path = out.join(REPORT_TEXT_FILE);
    let label = format!("{}+{}", cfg.rec.kind, ckpt.stage);
    std::fs::write(&path, report.to_text(&label)).map_err(|e| Error::io(path, e))?;
    Ok(PipelineOutput {
        report,
        final_stage: ckpt.stage,
    })
}
