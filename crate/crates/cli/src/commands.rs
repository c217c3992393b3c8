//! Command implementations: corpus synthesis, backbone pretraining, prompt
//! training, evaluation, generation, and the ablation sweep.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use spt_core::backbone::{
    load_backbone, save_backbone, Backbone, BackboneConfig, DecodeOptions, PretrainOptions,
};
use spt_core::metrics::{evaluate_corpus, MetricReport};
use spt_core::synth::generate as synth_generate;
use spt_core::text::{load_contexts, load_corpus, save_corpus, DialogueContext, Vocabulary, EOS};
use spt_core::trainer::{selection_audit, EvalStats, SelectionAudit, Trainer};

use crate::config::RunConfig;
use crate::rundir::RunDir;

pub fn cmd_synth(config: &RunConfig, out: &Path) -> Result<()> {
    let mut run = RunDir::create(out, "synth", config, config.synth.seed)?;
    let corpus = synth_generate(&config.synth)?;
    let train_path = run.file("train.jsonl");
    save_corpus(&train_path, &corpus.train)?;
    let valid_path = run.file("valid.jsonl");
    save_corpus(&valid_path, &corpus.valid)?;
    let pretrain_path = run.file("pretrain.jsonl");
    save_corpus(&pretrain_path, &corpus.pretrain)?;
    log::info!(
        "synthesized {} train / {} valid / {} pretrain dialogues across {} regimes",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.pretrain.len(),
        config.synth.regimes
    );
    run.finish(config)?;
    Ok(())
}

pub fn cmd_pretrain(config: &RunConfig, out: &Path) -> Result<()> {
    let mut run = RunDir::create(out, "pretrain", config, config.backbone.seed)?;
    let pretrain_path = config
        .data
        .pretrain
        .as_ref()
        .or(config.data.train.as_ref())
        .ok_or_else(|| config_err("data.pretrain (or data.train) is required for pretrain"))?;
    run.record_input(pretrain_path);
    let pretrain_records = load_corpus(pretrain_path)?;

    // The vocabulary must also cover the prompt-training corpus, which can
    // contain tokens absent from the pretraining split.
    let mut vocab_records = pretrain_records.clone();
    if let Some(train_path) = &config.data.train {
        run.record_input(train_path);
        vocab_records.extend(load_corpus(train_path)?);
    }
    let vocab = Vocabulary::build(&vocab_records, config.backbone.min_count)?;

    let bb_config = BackboneConfig {
        vocab_size: vocab.len(),
        hidden_dim: config.backbone.hidden_dim,
        layers: config.backbone.layers,
        heads: config.backbone.heads,
        ffn_dim: config.backbone.ffn_dim,
        max_positions: config.backbone.max_positions,
        dropout_percent: config.backbone.dropout_percent,
    };
    let mut backbone = Backbone::new(bb_config, config.backbone.seed)?;
    let sequences: Vec<Vec<usize>> = pretrain_records
        .iter()
        .map(|record| {
            let ex = spt_core::text::encode_example(
                record,
                &vocab,
                config.train.max_context_len,
            )?;
            let mut seq = ex.context_ids;
            seq.extend(ex.target_ids);
            Ok(seq)
        })
        .collect::<Result<_, spt_core::SptError>>()?;

    let opts = PretrainOptions {
        steps: config.backbone.pretrain_steps,
        lr: config.backbone.pretrain_lr,
        adam: config.backbone.adam,
        seed: config.backbone.seed,
        target_loss: config.backbone.target_loss,
        position_jitter: config.backbone.position_jitter,
        batch_size: config.backbone.pretrain_batch_size,
    };
    log::info!(
        "pretraining on {} sequences for up to {} steps",
        sequences.len(),
        opts.steps
    );
    let stats = backbone.pretrain(&sequences, &opts)?;
    log::info!(
        "pretraining finished after {} steps, final loss {:.4}",
        stats.steps_run,
        stats.final_loss
    );

    let checkpoint = run.file("backbone.sptb");
    save_backbone(&checkpoint, &backbone, &vocab)?;
    run.write_json(
        "pretrain_stats.json",
        &serde_json::json!({
            "steps_run": stats.steps_run,
            "final_loss": stats.final_loss,
            "losses": stats.losses,
            "param_count": backbone.param_count(),
            "param_hash": backbone.param_hash(),
            "vocab_size": vocab.len(),
        }),
    )?;
    run.finish(config)?;
    Ok(())
}

#[derive(Serialize)]
struct EpochMetrics {
    epoch: usize,
    steps: usize,
    mean_total: f64,
    mean_selection: f64,
    mean_contrastive: f64,
    mean_fusion: f64,
    mean_per_prompt: Vec<f64>,
    selection_entropy: f64,
    selection_counts: Vec<u64>,
    valid_perplexity: Option<f64>,
}

#[derive(Serialize)]
struct TrainMetrics {
    epochs: Vec<EpochMetrics>,
    final_valid: Option<EvalStats>,
    selection_audit: Option<SelectionAudit>,
    trainable_params: usize,
    backbone_hash: String,
}

pub fn cmd_train(config: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<()> {
    let mut run = RunDir::create(out, "train", config, config.train.seed)?;
    let (backbone, vocab) = load_backbone_artifact(config, &mut run)?;
    let train_path = config
        .data
        .train
        .as_ref()
        .ok_or_else(|| config_err("data.train is required for train"))?;
    run.record_input(train_path);
    let train_records = load_corpus(train_path)?;
    let valid_records = match &config.data.valid {
        Some(path) => {
            run.record_input(path);
            Some(load_corpus(path)?)
        }
        None => None,
    };

    let mut trainer = match resume {
        Some(checkpoint) => {
            run.record_input(checkpoint);
            Trainer::checkpoint_load(checkpoint, backbone, vocab, Some(&config.train))?
        }
        None => Trainer::new(backbone, vocab, config.train.clone())?,
    };
    let train_data = trainer.prepare(&train_records)?;
    let valid_data = valid_records
        .as_ref()
        .map(|records| trainer.prepare(records))
        .transpose()?;

    log::info!(
        "training k={} prompt_len={} for {} epochs over {} examples ({} trainable params)",
        config.train.k,
        config.train.prompt_len,
        config.train.epochs,
        train_data.len(),
        trainer.trainable_param_count()
    );

    let log_path = run.file("log.jsonl");
    let mut log_file = std::fs::File::create(&log_path)?;
    let mut epochs = Vec::new();
    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.eval.seed);
    while trainer.epoch() < config.train.epochs {
        let stats = {
            let mut records = Vec::new();
            while let Some(record) = trainer.step_batch(&train_data)? {
                serde_json::to_writer(&mut log_file, &record)?;
                log_file.write_all(b"\n")?;
                records.push(record);
            }
            trainer.finish_epoch(&records)
        };
        let valid_perplexity = match &valid_data {
            Some(data) => {
                let eval =
                    trainer.evaluate(data, config.eval.score_noise_alpha, &mut eval_rng)?;
                Some(eval.perplexity)
            }
            None => None,
        };
        log::info!(
            "epoch {}: total {:.4} (sel {:.4} con {:.4} fus {:.4}) entropy {:.3}{}",
            stats.epoch,
            stats.mean_total,
            stats.mean_selection,
            stats.mean_contrastive,
            stats.mean_fusion,
            stats.selection_entropy,
            valid_perplexity
                .map(|p| format!(" | valid ppl {:.4}", p))
                .unwrap_or_default()
        );
        epochs.push(EpochMetrics {
            epoch: stats.epoch,
            steps: stats.steps,
            mean_total: stats.mean_total,
            mean_selection: stats.mean_selection,
            mean_contrastive: stats.mean_contrastive,
            mean_fusion: stats.mean_fusion,
            mean_per_prompt: stats.mean_per_prompt,
            selection_entropy: stats.selection_entropy,
            selection_counts: stats.selection_counts,
            valid_perplexity,
        });
        let checkpoint_path = run.path.join("checkpoint.sptr");
        trainer.checkpoint_save(&checkpoint_path)?;
    }
    let checkpoint_path = run.file("checkpoint.sptr");
    trainer.checkpoint_save(&checkpoint_path)?;

    let (final_valid, audit) = match &valid_data {
        Some(data) => {
            let eval = trainer.evaluate(data, config.eval.score_noise_alpha, &mut eval_rng)?;
            let audit = selection_audit(data, &eval.selections, config.train.k);
            (Some(eval), Some(audit))
        }
        None => (None, None),
    };
    let metrics = TrainMetrics {
        epochs,
        final_valid,
        selection_audit: audit,
        trainable_params: trainer.trainable_param_count(),
        backbone_hash: trainer.backbone_hash().to_string(),
    };
    run.write_json("metrics.json", &metrics)?;
    run.finish(config)?;
    Ok(())
}

#[derive(Serialize)]
struct Prediction {
    prediction: String,
    reference: Option<String>,
    prompt_index: usize,
    regime: Option<String>,
}

pub fn cmd_eval(config: &RunConfig, out: &Path) -> Result<()> {
    let mut run = RunDir::create(out, "eval", config, config.eval.seed)?;
    let trainer = load_trainer(config, &mut run)?;
    let valid_path = config
        .data
        .valid
        .as_ref()
        .ok_or_else(|| config_err("data.valid is required for eval"))?;
    run.record_input(valid_path);
    let records = load_corpus(valid_path)?;
    let examples = trainer.prepare(&records)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.eval.seed);
    let eval = trainer.evaluate(&examples, config.eval.score_noise_alpha, &mut rng)?;
    let audit = selection_audit(&examples, &eval.selections, trainer.config().k);

    let (report, predictions) =
        generate_and_score(&trainer, &records, config, &mut rng)?;
    let predictions_path = run.file("predictions.jsonl");
    let mut f = std::fs::File::create(&predictions_path)?;
    for p in &predictions {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n")?;
    }

    println!("{}", report.render_table());
    println!(
        "  {:<16} {:>8.4}\n  {:<16} {:>8.4}",
        "perplexity", eval.perplexity, "sel. entropy", eval.selection_entropy
    );
    run.write_json(
        "metrics.json",
        &serde_json::json!({
            "report": report,
            "perplexity": eval.perplexity,
            "mean_nll": eval.mean_nll,
            "selection_entropy": eval.selection_entropy,
            "selection_audit": audit,
            "usage": trainer.bank().usage_report(),
        }),
    )?;
    run.finish(config)?;
    Ok(())
}

pub fn cmd_generate(config: &RunConfig, out: &Path, input: &Path) -> Result<()> {
    let mut run = RunDir::create(out, "generate", config, config.eval.seed)?;
    let trainer = load_trainer(config, &mut run)?;
    run.record_input(input);
    let contexts = load_contexts(input)?;
    let decode = DecodeOptions {
        strategy: config.eval.strategy.clone(),
        max_new_tokens: config.eval.max_new_tokens,
        eos_id: EOS,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.eval.seed);
    let predictions_path = run.file("predictions.jsonl");
    let mut f = std::fs::File::create(&predictions_path)?;
    for ctx in &contexts {
        let generated =
            trainer.generate(ctx, &decode, config.eval.score_noise_alpha, &mut rng)?;
        println!("[prompt {}] {}", generated.prompt_index, generated.text);
        let record = Prediction {
            prediction: generated.text,
            reference: if ctx.response.is_empty() {
                None
            } else {
                Some(ctx.response.clone())
            },
            prompt_index: generated.prompt_index,
            regime: ctx.regime.clone(),
        };
        serde_json::to_writer(&mut f, &record)?;
        f.write_all(b"\n")?;
    }
    run.write_json("usage.json", &trainer.bank().usage_report())?;
    run.finish(config)?;
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    variant: String,
    perplexity: f64,
    f1: f64,
    bleu: f64,
    rouge_l: f64,
    dist2: f64,
    selection_entropy: f64,
    agreement: f64,
}

/// Trains and evaluates the full objective, each single-loss-removed
/// variant, and the bank-size sweep, each in its own subdirectory.
pub fn cmd_ablate(config: &RunConfig, out: &Path) -> Result<()> {
    let mut run = RunDir::create(out, "ablate", config, config.train.seed)?;
    let variants: Vec<(String, Vec<String>)> = vec![
        ("full".into(), vec![]),
        ("wo_cl".into(), vec!["train.objective.lambda1=0".into()]),
        ("wo_fusion".into(), vec!["train.objective.lambda3=0".into()]),
        ("wo_sl".into(), vec!["train.objective.lambda2=0".into()]),
        ("k1".into(), vec!["train.k=1".into()]),
        ("k2".into(), vec!["train.k=2".into()]),
        ("k4".into(), vec!["train.k=4".into()]),
        ("k8".into(), vec!["train.k=8".into()]),
    ];

    let mut rows = Vec::new();
    for (name, overrides) in &variants {
        let mut value = serde_json::to_value(config)?;
        for set in overrides {
            crate::config::apply_set_public(&mut value, set)?;
        }
        let variant_config: RunConfig = serde_json::from_value(value)?;
        let variant_dir = out.join(name);
        log::info!("ablation variant {name}");
        cmd_train(&variant_config, &variant_dir, None)?;

        let row = summarize_variant(name, &variant_config, &variant_dir)?;
        rows.push(row);
    }

    println!(
        "  {:<10} {:>10} {:>8} {:>8} {:>8} {:>8} {:>9} {:>8}",
        "variant", "ppl", "F1", "BLEU", "ROUGE-L", "DIST-2", "entropy", "agree"
    );
    for r in &rows {
        println!(
            "  {:<10} {:>10.4} {:>8.4} {:>8.2} {:>8.2} {:>8.2} {:>9.3} {:>8.2}",
            r.variant,
            r.perplexity,
            r.f1,
            r.bleu,
            r.rouge_l,
            r.dist2,
            r.selection_entropy,
            r.agreement
        );
    }
    run.write_json("ablate.json", &rows)?;
    run.finish(config)?;
    Ok(())
}

fn summarize_variant(name: &str, config: &RunConfig, dir: &Path) -> Result<AblationRow> {
    // Reload the trained run and score generations against references.
    let (backbone, vocab) = load_backbone_pair(config)?;
    let trainer = Trainer::checkpoint_load(
        &dir.join("checkpoint.sptr"),
        backbone,
        vocab,
        Some(&config.train),
    )?;
    let valid_path = config
        .data
        .valid
        .as_ref()
        .ok_or_else(|| config_err("data.valid is required for ablate"))?;
    let records = load_corpus(valid_path)?;
    let examples = trainer.prepare(&records)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.eval.seed);
    let eval = trainer.evaluate(&examples, config.eval.score_noise_alpha, &mut rng)?;
    let audit = selection_audit(&examples, &eval.selections, trainer.config().k);
    let (report, _) = generate_and_score(&trainer, &records, config, &mut rng)?;
    Ok(AblationRow {
        variant: name.to_string(),
        perplexity: eval.perplexity,
        f1: report.f1,
        bleu: report.bleu,
        rouge_l: report.rouge_l,
        dist2: report.dist2,
        selection_entropy: eval.selection_entropy,
        agreement: audit.agreement,
    })
}

fn generate_and_score(
    trainer: &Trainer,
    records: &[DialogueContext],
    config: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(MetricReport, Vec<Prediction>)> {
    let decode = DecodeOptions {
        strategy: config.eval.strategy.clone(),
        max_new_tokens: config.eval.max_new_tokens,
        eos_id: EOS,
    };
    let mut predictions = Vec::with_capacity(records.len());
    let mut texts = Vec::with_capacity(records.len());
    let mut references = Vec::with_capacity(records.len());
    let mut personas = Vec::with_capacity(records.len());
    for record in records {
        let generated =
            trainer.generate(record, &decode, config.eval.score_noise_alpha, rng)?;
        texts.push(generated.text.clone());
        references.push(record.response.clone());
        personas.push(record.persona.join(" "));
        predictions.push(Prediction {
            prediction: generated.text,
            reference: Some(record.response.clone()),
            prompt_index: generated.prompt_index,
            regime: record.regime.clone(),
        });
    }
    let report = evaluate_corpus(&texts, &references, Some(&personas), config.eval.bleu_mode)?;
    Ok((report, predictions))
}

fn load_backbone_artifact(
    config: &RunConfig,
    run: &mut RunDir,
) -> Result<(Backbone, Vocabulary)> {
    let path = config
        .data
        .backbone_checkpoint
        .as_ref()
        .ok_or_else(|| config_err("data.backbone_checkpoint is required"))?;
    run.record_input(path);
    Ok(load_backbone(path)?)
}

fn load_backbone_pair(config: &RunConfig) -> Result<(Backbone, Vocabulary)> {
    let path = config
        .data
        .backbone_checkpoint
        .as_ref()
        .ok_or_else(|| config_err("data.backbone_checkpoint is required"))?;
    Ok(load_backbone(path)?)
}

fn load_trainer(config: &RunConfig, run: &mut RunDir) -> Result<Trainer> {
    let (backbone, vocab) = load_backbone_artifact(config, run)?;
    let checkpoint = config
        .data
        .run_checkpoint
        .as_ref()
        .ok_or_else(|| config_err("data.run_checkpoint is required"))?;
    run.record_input(checkpoint);
    Ok(Trainer::checkpoint_load(
        checkpoint,
        backbone,
        vocab,
        None,
    )?)
}

pub fn config_err(message: &str) -> anyhow::Error {
    anyhow!(ConfigProblem(message.to_string()))
}

/// Marker for configuration-class failures so main can exit with code 2.
#[derive(Debug)]
pub struct ConfigProblem(pub String);

impl std::fmt::Display for ConfigProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigProblem {}
