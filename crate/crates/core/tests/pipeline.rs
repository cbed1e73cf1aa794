use std::fs;
use std::path::Path;

use tigmt::corpus::Language;
use tigmt::model::{Batch, Checkpoint, Mode};
use tigmt::synthetic::{transfer_pipeline, write_transfer_task, TransferSizes};
use tigmt::trainer::pipeline::{build_codec, evaluate_checkpoint};
use tigmt::trainer::{run_experiment, run_pipeline, run_stage, CorpusSelector, PipelineConfig, StageConfig, StopReason};
use tigmt::translate::Translator;

const SIZES: TransferSizes = TransferSizes {
    words: 20,
    lang_a: 300,
    lang_b: 60,
    dev: 20,
    test: 20,
};

/// Small transfer task with a tiny model and a few steps per stage.
fn tiny_config(dir: &Path, seed: u64) -> PipelineConfig {
    let files = write_transfer_task(&dir.join("data"), SIZES, seed).unwrap();
    let mut config = transfer_pipeline(&files, &dir.join("out"), seed);
    config.model.d_model = 16;
    config.model.d_ff = 32;
    config.model.layers = 1;
    config.bpe.src_merges = 20;
    config.bpe.tgt_merges = 20;
    for stage in &mut config.stages {
        stage.max_steps = Some(6);
        stage.validation_interval = 3;
        stage.token_batch = 120;
    }
    config
}

fn probe_logits(ck: &Checkpoint) -> Vec<f32> {
    let batch = Batch::from_pairs(&[(vec![4u32, 5, 6], vec![4u32, 5]), (vec![7u32], vec![6u32, 4, 5])]);
    ck.model.forward(&batch, Mode::Eval).unwrap()
}

#[test]
fn pipeline_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), 1);
    let outcomes = run_pipeline(&config).unwrap();
    assert_eq!(outcomes.len(), 2);
    let out = dir.path().join("out");
    for f in ["src.bpe", "tgt.bpe", "multilingual.ckpt", "multilingual.log", "tigrinya.ckpt", "tigrinya.log", "report.txt"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let saved = Checkpoint::load(out.join("tigrinya.ckpt")).unwrap();
    assert_eq!(saved.to_bytes(), outcomes[1].checkpoint.to_bytes());
    assert_eq!(fs::read_to_string(out.join("tigrinya.log")).unwrap(), outcomes[1].log.lines());

    let translator = Translator::load(&out.join("tigrinya.ckpt"), None, None).unwrap();
    assert_eq!(translator.model_id(), saved.model_id());
    for o in &outcomes {
        assert!(!o.log.records.is_empty());
        assert_eq!(o.log.best_step, o.log.best().map(|r| r.step));
        assert!((0.0..=100.0).contains(&o.report.bleu.unwrap()));
    }
}

#[test]
fn each_stage_starts_from_the_previous_best() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path(), 2);
    config.stages[1].max_steps = Some(0);
    let outcomes = run_pipeline(&config).unwrap();
    assert_eq!(outcomes[1].checkpoint.to_bytes(), outcomes[0].checkpoint.to_bytes());
    assert_eq!(probe_logits(&outcomes[1].checkpoint), probe_logits(&outcomes[0].checkpoint));
    assert!(outcomes[1].log.records.is_empty());
}

#[test]
fn baseline_mode_skips_the_first_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path(), 3);
    config.baseline_mode = true;
    let outcomes = run_pipeline(&config).unwrap();
    assert_eq!(outcomes.len(), 1);
    assert_eq!(outcomes[0].name, "tigrinya");
    let out = dir.path().join("out");
    assert!(out.join("baseline-tigrinya.ckpt").is_file());
    assert!(out.join("baseline-report.txt").is_file());
    assert!(!out.join("multilingual.ckpt").exists());
}

#[test]
fn three_stage_experiment_reports_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path(), 4);
    let data = dir.path().join("data");
    let lang_b = CorpusSelector::new(data.join("mix.toml")).with_language(Language::Tigrinya);
    let geez = StageConfig {
        name: "geez".into(),
        train: lang_b,
        ..config.stages[1].clone()
    };
    config.stages.insert(1, geez);
    for (stage, batch) in config.stages.iter_mut().zip([200, 100, 60]) {
        stage.token_batch = batch;
    }
    let (baseline, staged, rows) = run_experiment(&config).unwrap();
    assert_eq!(baseline.len(), 2);
    assert_eq!(staged.len(), 3);
    let names: Vec<&str> = rows.iter().map(|r| r.system_name.as_str()).collect();
    assert_eq!(names, ["baseline", "multilingual", "geez", "tigrinya"]);
    assert!(dir.path().join("out/experiment.txt").is_file());
}

#[test]
fn single_stage_pipeline_equals_manual_stage_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path(), 5);
    config.stages.truncate(1);
    let outcome = run_pipeline(&config).unwrap().remove(0);

    let stage = &config.stages[0];
    let train_corpus = stage.train.load().unwrap();
    let codec = build_codec(&train_corpus, &config.bpe);
    let start = Checkpoint::init(config.model.clone(), codec.src_vocab.clone(), codec.tgt_vocab.clone(), config.seed).unwrap();
    let train = codec.encode_corpus(&train_corpus);
    let dev = codec.encode_corpus(&stage.dev.load().unwrap());
    let (best, log) = run_stage(&start, stage, &train, &dev, &config.options()).unwrap();
    assert_eq!(best.to_bytes(), outcome.checkpoint.to_bytes());
    assert_eq!(log, outcome.log);

    let translator = Translator::new(best, codec.src_bpe, codec.tgt_bpe);
    let test = config.evaluation.test.load().unwrap();
    let report = evaluate_checkpoint(&stage.name, &translator, &test, None, config.options().eval_tokens).unwrap();
    assert_eq!(report, outcome.report);
}

#[test]
fn zero_step_stage_returns_its_start() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path(), 6);
    config.stages.truncate(1);
    config.stages[0].max_steps = Some(0);
    let outcome = run_pipeline(&config).unwrap().remove(0);
    assert!(outcome.log.records.is_empty());
    let codec = build_codec(&config.stages[0].train.load().unwrap(), &config.bpe);
    let fresh = Checkpoint::init(config.model.clone(), codec.src_vocab, codec.tgt_vocab, config.seed).unwrap();
    assert_eq!(outcome.checkpoint.to_bytes(), fresh.to_bytes());
}

#[test]
fn max_steps_bounds_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path(), 7);
    config.stages.truncate(1);
    config.stages[0].max_steps = Some(7);
    config.stages[0].validation_interval = 3;
    let outcome = run_pipeline(&config).unwrap().remove(0);
    let steps: Vec<u64> = outcome.log.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, [3, 6, 7]);
    assert_eq!(outcome.log.stop_reason, Some(StopReason::MaxSteps));
}

#[test]
fn config_files_drive_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path(), 8);
    config.stages.truncate(1);
    config.stages[0].max_steps = Some(3);
    let path = dir.path().join("pipeline.toml");
    fs::write(&path, config.to_toml()).unwrap();
    assert_eq!(PipelineConfig::load(&path).unwrap(), config);

    let out = std::process::Command::new(env!("CARGO_BIN_EXE_tigmt"))
        .args(["train", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("step=3"), "{stdout}");
    assert!(dir.path().join("out/multilingual.ckpt").is_file());
}

#[test]
fn documented_config_parses() {
    let text = r#"
output_dir = "out"
seed = 1

[model]
layers = 6
heads = 8
d_model = 512
d_ff = 2048
src_vocab = 0      # filled in from the learned vocabularies
tgt_vocab = 0
dropout = 0.1
label_smoothing = 0.1
max_position = 256

[bpe]
src_merges = 6000
tgt_merges = 6000

[evaluation]
test = { manifest = "data/test.toml" }

[[stage]]
name = "multilingual"
train = { manifest = "data/mix.toml" }
dev = { manifest = "data/dev.toml" }
token_batch = 4096
validation_interval = 1000
patience = 5

[[stage]]
name = "tigrinya"
train = { manifest = "data/mix.toml", language = "tigrinya" }
dev = { manifest = "data/dev.toml" }
token_batch = 2048
"#;
    let config = PipelineConfig::from_toml(text, Path::new("/project")).unwrap();
    assert_eq!(config.stages.len(), 2);
    assert_eq!(config.stages[1].train.language, Some(Language::Tigrinya));
    assert_eq!(config.stages[1].validation_interval, 1000);
    assert_eq!(config.output_dir, Path::new("/project/out"));
    config.validate().unwrap();
}
