//! Whole-pipeline determinism and resume.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use llm2rec::config::PipelineConfig;
use llm2rec::pipeline::{run_pipeline, REPORT_MACHINE_FILE};

/// A few steps of every stage at toy width.
pub fn small_config(seed: u64) -> PipelineConfig {
    let mut c = PipelineConfig::desk();
    c.seed = seed;
    c.model.d_model = 16;
    c.model.n_heads = 2;
    c.model.d_ffn = 32;
    c.model.max_context = 128;
    c.csft.steps = 12;
    c.csft.batch_size = 4;
    c.mntp.steps = 6;
    c.mntp.batch_size = 8;
    c.ic.steps = 6;
    c.ic.batch_size = 16;
    c.rec.d_rec = 16;
    c.rec.n_layers = 1;
    c.rec.max_epochs = 3;
    c.rec.patience = 2;
    c.validate().unwrap();
    c
}

pub fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

/// Names of files that differ or exist on only one side.
pub fn differences(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    let mut out: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, _)| k.clone())
        .collect();
    out.extend(b.keys().filter(|k| !a.contains_key(*k)).cloned());
    out
}

/// Files the pipeline writes after the MNTP checkpoint.
pub const AFTER_MNTP: [&str; 7] = [
    "ckpt_ic.bin",
    "losses_ic.txt",
    "embeddings.bin",
    "recommender.bin",
    "rec_log.tsv",
    "report.tsv",
    "report.txt",
];

pub struct Outcome {
    pub rerun_diffs: Vec<String>,
    pub resume_diffs: Vec<String>,
    pub files: usize,
}

/// Two clean runs in separate directories, then the second one cut back to
/// its MNTP checkpoint and resumed.
pub fn determinism(seed: u64) -> Outcome {
    let cfg = small_config(seed);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(&cfg, None, a.path(), false).unwrap();
    run_pipeline(&cfg, None, b.path(), false).unwrap();
    let fa = files(a.path());
    let rerun_diffs = differences(&fa, &files(b.path()));
    for f in AFTER_MNTP {
        fs::remove_file(b.path().join(f)).unwrap();
    }
    assert!(!b.path().join(REPORT_MACHINE_FILE).exists());
    run_pipeline(&cfg, None, b.path(), true).unwrap();
    let resume_diffs = differences(&fa, &files(b.path()));
    Outcome {
        rerun_diffs,
        resume_diffs,
        files: fa.len(),
    }
}
