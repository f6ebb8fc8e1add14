//! Subcommand implementations. Each command reads its inputs, writes its
//! artifacts under the output directory, and drops the fully-resolved
//! configuration alongside them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ziqe::data::{generate_corpus, read_dataset, stack_frames, write_dataset, QESample};
use ziqe::dist::{fit_phi_mle, BOUNDARY_EPS};
use ziqe::errors::{Result, ZiqeError};
use ziqe::metrics::evaluate;
use ziqe::nn::{read_checkpoint, standard_suite, write_checkpoint, ParamStore};
use ziqe::qe_head::{head_kind_from_store, init_head_params};
use ziqe::rng::SplitMix64;
use ziqe::speech_bert::{ModelConfig, SpeechBert};
use ziqe::train::{
    finetune, masked_accuracy, pearson_by_length, predict_many, pretrain, FinetuneConfig,
    PretrainConfig,
};

use crate::config::{PhiMode, RunConfig};

fn write_resolved(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("resolved.config"), cfg.to_text())?;
    Ok(())
}

fn load_model(store: &ParamStore) -> Result<SpeechBert> {
    SpeechBert::new(ModelConfig::load_from(store)?)
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    write_resolved(cfg, out)?;
    let samples = generate_corpus(&cfg.synth(), &cfg.corruption(), cfg.count, cfg.seed)?;
    let samples: Vec<QESample> = samples
        .into_iter()
        .map(|mut s| -> Result<QESample> {
            s.utterance.features =
                stack_frames(&s.utterance.features, cfg.stack_window, cfg.stack_stride)?;
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let path = out.join("dataset.ds");
    write_dataset(&path, &samples)?;
    println!("wrote {} samples to {}", samples.len(), path.display());
    Ok(path)
}

pub fn cmd_pretrain(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<PathBuf> {
    write_resolved(cfg, out)?;
    let samples = read_dataset(dataset)?;
    let model = SpeechBert::new(cfg.model())?;
    let mut store = model.init_params(cfg.seed);
    let pre = PretrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        seed: cfg.seed,
        masking: cfg.masking(),
    };
    let curve = pretrain(&model, &mut store, &samples, &pre)?;
    let acc = masked_accuracy(&model, &store, &samples, &cfg.masking(), cfg.seed ^ 0xACC)?;

    let ckpt = out.join("pretrained.ckpt");
    write_checkpoint(&ckpt, &store)?;
    let mut curve_text = String::new();
    for (i, l) in curve.iter().enumerate() {
        writeln!(curve_text, "{i}\t{l:.6}").unwrap();
    }
    std::fs::write(out.join("loss_curve.txt"), curve_text)?;
    println!(
        "pretrained {} epochs, final loss {:.4}, masked accuracy {:.4}",
        curve.len(),
        curve.last().copied().unwrap_or(f64::NAN),
        acc
    );
    Ok(ckpt)
}

/// Nonzero labels clamped into the open unit interval for the Beta fit.
fn beta_samples(samples: &[QESample]) -> Vec<f64> {
    samples
        .iter()
        .filter(|s| s.wer_label > 0.0)
        .map(|s| s.wer_label.clamp(BOUNDARY_EPS, ziqe::qe_head::LABEL_CEIL))
        .collect()
}

pub fn cmd_fitphi(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<f64> {
    write_resolved(cfg, out)?;
    let samples = read_dataset(dataset)?;
    let ys = beta_samples(&samples);
    let phi = fit_phi_mle(&ys)?;
    std::fs::write(out.join("phi.txt"), format!("{phi:.12}\n"))?;
    println!("phi={phi:.6} from {} nonzero labels", ys.len());
    Ok(phi)
}

pub fn cmd_finetune(
    cfg: &RunConfig,
    dataset: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<PathBuf> {
    write_resolved(cfg, out)?;
    let samples = read_dataset(dataset)?;
    let mut store = read_checkpoint(checkpoint)?;
    let model = load_model(&store)?;
    let phi = match cfg.phi {
        PhiMode::Fixed(v) => v,
        PhiMode::Mle => fit_phi_mle(&beta_samples(&samples))?,
    };
    let mut rng = SplitMix64::new(cfg.seed ^ 0x4EAD);
    init_head_params(
        &mut store,
        model.config.d_model,
        cfg.head_hidden,
        cfg.head,
        phi,
        &mut rng,
    );
    let ft = FinetuneConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        seed: cfg.seed,
        head: cfg.head,
        freeze_backbone: cfg.freeze_backbone,
        holdout_frac: cfg.holdout_frac,
        patience: cfg.patience,
        use_expected: cfg.use_expected,
    };
    let report = finetune(&model, &mut store, &samples, &ft)?;
    let ckpt = out.join("finetuned.ckpt");
    write_checkpoint(&ckpt, &store)?;
    let mut text = String::new();
    writeln!(text, "head={}", cfg.head.name()).unwrap();
    writeln!(text, "phi={phi:.6}").unwrap();
    writeln!(text, "best_epoch={}", report.best_epoch).unwrap();
    writeln!(text, "best_holdout_pearson={:.6}", report.best_pearson).unwrap();
    for (i, (l, p)) in report
        .train_curve
        .iter()
        .zip(&report.holdout_pearson)
        .enumerate()
    {
        writeln!(text, "epoch {i}\tloss {l:.6}\tholdout_pearson {p:.6}").unwrap();
    }
    std::fs::write(out.join("finetune_report.txt"), text)?;
    println!(
        "finetuned head {} ({} epochs run), best holdout pearson {:.4}",
        cfg.head.name(),
        report.train_curve.len(),
        report.best_pearson
    );
    Ok(ckpt)
}

pub fn cmd_predict(
    cfg: &RunConfig,
    dataset: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<PathBuf> {
    write_resolved(cfg, out)?;
    let samples = read_dataset(dataset)?;
    let store = read_checkpoint(checkpoint)?;
    let model = load_model(&store)?;
    let kind = head_kind_from_store(&store)?;
    let use_expected = cfg.use_expected && kind.is_zero_inflated();
    let refs: Vec<&QESample> = samples.iter().collect();
    let preds = predict_many(&model, &store, &refs, use_expected)?;
    let mut text = String::new();
    for (s, (p, score)) in samples.iter().zip(&preds) {
        writeln!(
            text,
            "{}\t{:.6}\t{:.6}\t{:.6}",
            s.utterance.id, p.lambda_zero, p.mu, score
        )
        .unwrap();
    }
    let path = out.join("predictions.tsv");
    std::fs::write(&path, text)?;
    println!("wrote {} predictions to {}", preds.len(), path.display());
    Ok(path)
}

fn read_predictions(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(ZiqeError::Format(format!(
                "predictions line {}: expected 4 fields, got {}",
                idx + 1,
                fields.len()
            )));
        }
        let score: f64 = fields[3].parse().map_err(|_| {
            ZiqeError::Format(format!("predictions line {}: bad score {:?}", idx + 1, fields[3]))
        })?;
        out.push((fields[0].to_string(), score));
    }
    Ok(out)
}

pub fn cmd_evaluate(
    cfg: &RunConfig,
    predictions: &Path,
    dataset: &Path,
    out: &Path,
) -> Result<String> {
    write_resolved(cfg, out)?;
    let samples = read_dataset(dataset)?;
    let preds = read_predictions(predictions)?;
    if preds.len() != samples.len() {
        return Err(ZiqeError::Format(format!(
            "{} predictions for {} samples",
            preds.len(),
            samples.len()
        )));
    }
    let mut scores = Vec::with_capacity(preds.len());
    for (s, (id, score)) in samples.iter().zip(&preds) {
        if *id != s.utterance.id {
            return Err(ZiqeError::Format(format!(
                "prediction id {id} does not match dataset id {}",
                s.utterance.id
            )));
        }
        scores.push(*score);
    }
    let labels: Vec<f64> = samples.iter().map(|s| s.wer_label).collect();
    let report = evaluate(&scores, &labels, true)?;
    let lengths: Vec<usize> = samples.iter().map(|s| s.utterance.tokens.len()).collect();
    let buckets = pearson_by_length(&lengths, &scores, &labels, cfg.length_buckets)?;

    let mut text = report.to_text();
    writeln!(text, "# pearson by reference token length").unwrap();
    for (lo, hi, r) in &buckets {
        match r {
            Some(r) => writeln!(text, "len [{lo}, {hi}]: pearson {r:.6}").unwrap(),
            None => writeln!(text, "len [{lo}, {hi}]: pearson n/a").unwrap(),
        }
    }
    std::fs::write(out.join("eval.txt"), &text)?;
    let record = report.to_record();
    println!("{record}");
    Ok(record)
}

pub fn cmd_gradcheck() -> Result<()> {
    let rows = standard_suite();
    let mut failed = false;
    for row in &rows {
        let status = if row.passed() { "pass" } else { "FAIL" };
        println!("{status}\t{:.3e}\t{}", row.max_rel_error, row.name);
        failed |= !row.passed();
    }
    if failed {
        return Err(ZiqeError::Optimization("gradient check failed".into()));
    }
    Ok(())
}

pub fn cmd_dump_attention(
    cfg: &RunConfig,
    dataset: &Path,
    checkpoint: &Path,
    id: Option<&str>,
    out: &Path,
) -> Result<()> {
    write_resolved(cfg, out)?;
    let samples = read_dataset(dataset)?;
    let store = read_checkpoint(checkpoint)?;
    let model = load_model(&store)?;
    let sample = match id {
        Some(id) => samples
            .iter()
            .find(|s| s.utterance.id == id)
            .ok_or_else(|| ZiqeError::Format(format!("no sample with id {id}")))?,
        None => samples
            .first()
            .ok_or_else(|| ZiqeError::Format("empty dataset".into()))?,
    };
    let layers = model.dump_attention(
        &store,
        &sample.utterance.features,
        &sample.utterance.tokens,
    )?;
    for (i, m) in layers.iter().enumerate() {
        let mut text = String::new();
        for row in m.rows() {
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    text.push('\t');
                }
                write!(text, "{v:.6}").unwrap();
            }
            text.push('\n');
        }
        let path = out.join(format!("attention_layer{i}.tsv"));
        std::fs::write(&path, text)?;
        println!(
            "layer {i}: {}x{} written to {}",
            m.nrows(),
            m.ncols(),
            path.display()
        );
    }
    Ok(())
}
