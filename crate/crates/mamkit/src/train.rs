//! Training loop, five-trial evaluation and the run log.
//!
//! Every random draw is keyed by (seed, epoch, image id) or (seed, trial,
//! image id) through named RNG substreams, so batch composition,
//! augmentation and Gumbel noise never depend on timing; a full run is
//! bit-reproducible from its seed. Training augmentation is re-sampled every
//! epoch; the validation pass runs on the stored pixels so best-epoch
//! selection is not dominated by augmentation luck.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::augment::{lossy_roundtrip, AugmentConfig};
use crate::clustering::AssignMode;
use crate::labels::{Annotation, ManifestRecord, Split};
use crate::metrics::{aggregate, average_reports, MetricsReport, PredictionRecord};
use crate::model::MamModel;
use crate::optim::{Adam, GradAccum, TapeBinding};
use crate::rng::RngStream;
use crate::synth::image_to_tensor;
use crate::tape::Tape;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_conv: f64,
    pub lr_transformer: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            lr_conv: 2e-4,
            lr_transformer: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            max_epochs: 30,
            patience: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metrics: MetricsReport,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Decoded images pinned in memory alongside their annotations.
pub struct Corpus {
    pub records: Vec<ManifestRecord>,
    images: Vec<RgbImage>,
}

impl Corpus {
    pub fn load(root: &Path, records: Vec<ManifestRecord>) -> Result<Self> {
        let mut images = Vec::with_capacity(records.len());
        for r in &records {
            let path: PathBuf = root.join(&r.path);
            let img = image::open(&path)
                .with_context(|| format!("load {}", path.display()))?
                .to_rgb8();
            images.push(img);
        }
        Ok(Corpus { records, images })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn subset(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    fn annotation(&self, i: usize) -> Annotation {
        self.records[i].annotation().expect("validated record")
    }
}

fn augmented_tensor(
    corpus: &Corpus,
    index: usize,
    rng: &mut RngStream,
    aug: &AugmentConfig,
) -> Result<crate::tensor::Tensor> {
    let (img, _record) = lossy_roundtrip(&corpus.images[index], rng, aug)?;
    Ok(image_to_tensor(&img))
}

/// One optimizer pass over a batch: per-item tapes, mean gradient, Adam step.
/// Returns the mean loss.
#[allow(clippy::too_many_arguments)]
fn train_batch(
    model: &mut MamModel,
    corpus: &Corpus,
    batch: &[usize],
    epoch: usize,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    adam: &mut Adam,
    grads: &mut GradAccum,
) -> Result<f64> {
    grads.zero();
    let mut total = 0.0;
    for &i in batch {
        let id = corpus.records[i].id;
        let mut aug_rng = RngStream::new(cfg.seed, &format!("epoch/{epoch}/aug/{id}"));
        let x = augmented_tensor(corpus, i, &mut aug_rng, aug)?;
        let truth = corpus.annotation(i);
        let mut tape = Tape::new();
        let bind = TapeBinding::bind(&mut tape, &model.store, true);
        let img = tape.leaf(x, false);
        let mut gumbel = RngStream::new(cfg.seed, &format!("epoch/{epoch}/gumbel/{id}"));
        let logits = model.forward(
            &mut tape,
            &bind,
            img,
            AssignMode::TrainStochasticHard,
            &mut gumbel,
        )?;
        let loss = model.loss(&mut tape, &logits, &truth)?;
        total += tape.value(loss).item();
        tape.backward(loss);
        grads.accumulate_from_tape(&tape, &bind);
    }
    grads.scale(1.0 / batch.len() as f64);
    adam.step(&mut model.store, grads, cfg.lr_conv, cfg.lr_transformer);
    Ok(total / batch.len() as f64)
}

/// Forward the whole index list without gradients; returns mean loss and
/// prediction records. Augmentation draws come from `label`-keyed substreams;
/// `aug` of `None` evaluates on the stored pixels untouched.
fn evaluate_pass(
    model: &MamModel,
    corpus: &Corpus,
    indices: &[usize],
    seed: u64,
    label: &str,
    aug: Option<&AugmentConfig>,
) -> Result<(f64, Vec<PredictionRecord>)> {
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(indices.len());
    for &i in indices {
        let id = corpus.records[i].id;
        let x = match aug {
            Some(aug) => {
                let mut aug_rng = RngStream::new(seed, &format!("{label}/aug/{id}"));
                augmented_tensor(corpus, i, &mut aug_rng, aug)?
            }
            None => image_to_tensor(&corpus.images[i]),
        };
        let truth = corpus.annotation(i);
        let mut tape = Tape::new();
        let bind = TapeBinding::bind(&mut tape, &model.store, false);
        let img = tape.leaf(x, false);
        let mut unused = RngStream::new(seed, "eval/unused");
        let logits = model.forward(
            &mut tape,
            &bind,
            img,
            AssignMode::EvalDeterministicHard,
            &mut unused,
        )?;
        let loss = model.loss(&mut tape, &logits, &truth)?;
        total += tape.value(loss).item();
        preds.push(PredictionRecord {
            id,
            truth,
            pred: MamModel::predict_annotation(&tape, &logits),
        });
    }
    Ok((total / indices.len().max(1) as f64, preds))
}

/// Minimize the summed cross-entropy with Adam; early exit on validation
/// loss with the configured patience. The model is left at the best-epoch
/// parameters; if `checkpoint` is given, that snapshot is also saved there.
pub fn train(
    model: &mut MamModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    let train_idx = corpus.subset(Split::Train);
    let val_idx = corpus.subset(Split::Val);
    anyhow::ensure!(!train_idx.is_empty(), "train split is empty");
    anyhow::ensure!(!val_idx.is_empty(), "val split is empty");

    let mut adam = Adam::new(&model.store, cfg.beta1, cfg.beta2);
    let mut grads = GradAccum::zeros(&model.store);
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, Vec<crate::tensor::Tensor>)> = None;
    let mut stale = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut order = train_idx.clone();
        RngStream::new(cfg.seed, &format!("epoch/{epoch}/order")).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            loss_sum += train_batch(model, corpus, batch, epoch, cfg, aug, &mut adam, &mut grads)?;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        // Clean validation pass: augmentation noise on corrupted copies
        // would dominate the epoch-to-epoch loss comparison, so best-epoch
        // selection reads the model on the stored pixels instead.
        let (val_loss, preds) =
            evaluate_pass(model, corpus, &val_idx, cfg.seed, "val", None)?;
        let val_metrics = aggregate(&preds)?;
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_metrics,
        });

        let improved = best.as_ref().map_or(true, |(_, b, _)| val_loss < *b);
        if improved {
            let snapshot = model.store.iter().map(|p| p.value.clone()).collect();
            best = Some((epoch, val_loss, snapshot));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let (best_epoch, best_val_loss, snapshot) = best.expect("at least one epoch ran");
    for (idx, value) in snapshot.into_iter().enumerate() {
        model.store.get_mut(idx).value = value;
    }
    if let Some(path) = checkpoint {
        model.save(path)?;
    }
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_loss,
    })
}

/// Eq. 5 evaluation: `trials` passes over the test split with trial-specific
/// augmentation seeds, aggregated per Eq. 4 and averaged cell by cell.
pub fn evaluate(
    model: &MamModel,
    corpus: &Corpus,
    seed: u64,
    trials: usize,
    aug: &AugmentConfig,
) -> Result<(MetricsReport, Vec<MetricsReport>, Vec<Vec<PredictionRecord>>)> {
    anyhow::ensure!(trials >= 1, "trials must be at least 1");
    let test_idx = corpus.subset(Split::Test);
    anyhow::ensure!(!test_idx.is_empty(), "test split is empty");
    let mut reports = Vec::with_capacity(trials);
    let mut predictions = Vec::with_capacity(trials);
    for k in 0..trials {
        let (_, preds) = evaluate_pass(
            model,
            corpus,
            &test_idx,
            seed,
            &format!("trial/{k}"),
            Some(aug),
        )?;
        reports.push(aggregate(&preds)?);
        predictions.push(preds);
    }
    let averaged = average_reports(&reports)?;
    Ok((averaged, reports, predictions))
}
