//! Plain SGD training with per-group learning rates, global gradient
//! clipping, early stopping on dev accuracy and a per-epoch history log.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Document;
use crate::error::{Error, Result};
use crate::model::{forward_traced, ForwardTrace, MaskMode, ModelBundle, Phase, Variant};
use crate::rng;
use crate::scalar::Scalar;
use crate::tape::{GradAccum, NodeId, ParamGroup, Tape};
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking logs in the supervision
/// and bottleneck terms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Learning-rate multiplier for the embedding table.
    pub embed_lr_scale: f64,
    /// Learning-rate multiplier for the rationalizer group; the decoupled
    /// variant trains its rationalizer slower than its predictor.
    pub rationalizer_lr_scale: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    /// Weight of the sparsity penalty (threshold variants) or of the
    /// bottleneck divergence (the top-k variant).
    pub lambda: f64,
    /// Weight of the rationale supervision term.
    pub gamma: f64,
    pub supervised: bool,
    pub mask_mode: MaskMode,
    pub clip_norm: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn default_for(variant: Variant) -> Self {
        let (lambda, rationalizer_lr_scale) = match variant {
            Variant::Vib => (0.01, 1.0),
            Variant::Dr => (10.0, 0.1),
            _ => (10.0, 1.0),
        };
        TrainConfig {
            lr: 0.5,
            embed_lr_scale: 1.0,
            rationalizer_lr_scale,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            lambda,
            gamma: 10.0,
            supervised: true,
            mask_mode: MaskMode::HardSt,
            clip_norm: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::invalid("learning rate must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("need at least one epoch"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip norm must be positive"));
        }
        if self.embed_lr_scale < 0.0 || self.rationalizer_lr_scale < 0.0 {
            return Err(Error::invalid("learning-rate scales must be >= 0"));
        }
        Ok(())
    }

    fn group_lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Embedding => self.lr * self.embed_lr_scale,
            ParamGroup::Rationalizer => self.lr * self.rationalizer_lr_scale,
            ParamGroup::Predictor => self.lr,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_dev_acc: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub history: Vec<EpochStats>,
}

/// Builds the training objective for one document on an existing trace.
/// Returns the scalar loss node.
pub fn objective<S: Scalar>(
    tape: &mut Tape<'_, S>,
    bundle: &ModelBundle<S>,
    trace: &ForwardTrace<S>,
    doc: &Document,
    cfg: &TrainConfig,
) -> Result<NodeId> {
    let mut loss = tape.cross_entropy(trace.pred_logits, doc.label)?;
    let sparsity = S::of(bundle.cfg.sparsity);
    match bundle.cfg.variant {
        Variant::Rnp | Variant::Fr | Variant::Dr => {
            // lambda * | mean(m) - S |
            let mean = tape.mean_all(trace.soft_mask)?;
            let centred = tape.add_const(mean, -sparsity);
            let dev = tape.abs(centred)?;
            let term = tape.scale(dev, S::of(cfg.lambda));
            loss = tape.add(loss, term)?;
        }
        Variant::Vib => {
            // lambda * sum_i KL(Bern(p_i) || Bern(S))
            let floor = S::of(PROB_FLOOR);
            let ceil = S::of(1.0 - PROB_FLOOR);
            let p = tape.clamp(trace.sel_probs, floor, ceil)?;
            let np = tape.neg(p);
            let omp = tape.add_const(np, S::one());
            let lp = tape.log(p);
            let lomp = tape.log(omp);
            let t1 = tape.mul(p, lp)?;
            let t2 = tape.mul(omp, lomp)?;
            let ref1 = tape.scale(p, S::of(bundle.cfg.sparsity.ln()));
            let ref2 = tape.scale(omp, S::of((1.0 - bundle.cfg.sparsity).ln()));
            let ent = tape.add(t1, t2)?;
            let cross = tape.add(ref1, ref2)?;
            let kl = tape.sub(ent, cross)?;
            let total = tape.sum_all(kl);
            let term = tape.scale(total, S::of(cfg.lambda));
            loss = tape.add(loss, term)?;
        }
        Variant::Spectra => {}
    }
    if cfg.supervised {
        if let Some(human) = doc.unit_human_mask(bundle.cfg.level) {
            let probs = tape.value(trace.sel_probs).data().to_vec();
            let clamped = probs
                .iter()
                .zip(&human)
                .filter(|(p, h)| **h != 0 && p.as_f64() < PROB_FLOOR)
                .count();
            if clamped > 0 {
                log::warn!(
                    "supervision clamped {} vanishing selection probabilities",
                    clamped
                );
            }
            let floor = S::of(PROB_FLOOR);
            let p = tape.clamp(trace.sel_probs, floor, S::of(2.0))?;
            let lp = tape.log(p);
            let mask = Tensor::vector(
                human
                    .iter()
                    .map(|&h| if h != 0 { S::one() } else { S::zero() })
                    .collect(),
            );
            let mask = tape.leaf(mask);
            let picked = tape.mul(lp, mask)?;
            let total = tape.sum_all(picked);
            let term = tape.scale(total, S::of(-cfg.gamma));
            loss = tape.add(loss, term)?;
        }
    }
    Ok(loss)
}

/// Fraction of documents whose deterministic evaluation-phase prediction
/// matches the label.
pub fn accuracy<S: Scalar>(bundle: &ModelBundle<S>, docs: &[Document]) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::invalid("accuracy over an empty document set"));
    }
    let mut hits = 0usize;
    for doc in docs {
        let (_, pred) = crate::model::forward_doc_eval(bundle, doc)?;
        if pred.class == doc.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / docs.len() as f64)
}

fn snapshot<S: Scalar>(bundle: &ModelBundle<S>) -> Vec<Tensor<S>> {
    bundle
        .store
        .ids()
        .map(|id| bundle.store.get(id).clone())
        .collect()
}

fn restore<S: Scalar>(bundle: &mut ModelBundle<S>, snap: &[Tensor<S>]) {
    let ids: Vec<_> = bundle.store.ids().collect();
    for (id, t) in ids.into_iter().zip(snap) {
        *bundle.store.get_mut(id) = t.clone();
    }
}

/// Runs SGD and leaves the bundle at the parameters of the best dev
/// epoch (ties resolved toward the earlier epoch).
pub fn train<S: Scalar>(
    bundle: &mut ModelBundle<S>,
    train_docs: &[Document],
    dev_docs: &[Document],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_docs.is_empty() || dev_docs.is_empty() {
        return Err(Error::invalid("training needs non-empty train and dev sets"));
    }
    for doc in train_docs.iter().chain(dev_docs) {
        if doc.label >= bundle.cfg.classes {
            return Err(Error::invalid(format!(
                "label {} out of range for {} classes",
                doc.label, bundle.cfg.classes
            )));
        }
    }

    let mut accum = GradAccum::new(&bundle.store);
    let mut history = Vec::new();
    let mut best_snap = snapshot(bundle);
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut streak = 0usize;
    let mut stopped_early = false;
    let mut epochs_run = 0usize;

    for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        let mut order: Vec<usize> = (0..train_docs.len()).collect();
        let mut shuffle_rng = rng::rng_from(cfg.seed, &[1, epoch as u64]);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            accum.zero();
            let batch_loss = {
                let mut tape = Tape::new(&bundle.store);
                let mut total: Option<NodeId> = None;
                for (j, &di) in chunk.iter().enumerate() {
                    let doc = &train_docs[di];
                    let fseed = rng::mix(cfg.seed, &[2, epoch as u64, (seen + j) as u64]);
                    let trace = forward_traced(
                        &mut tape,
                        bundle,
                        &doc.tokens,
                        &doc.bounds,
                        Phase::Train,
                        cfg.mask_mode,
                        fseed,
                    )?;
                    let loss = objective(&mut tape, bundle, &trace, doc, cfg)?;
                    total = Some(match total {
                        None => loss,
                        Some(t) => tape.add(t, loss)?,
                    });
                }
                let total = total.expect("non-empty batch");
                let mean = tape.scale(total, S::of(1.0 / chunk.len() as f64));
                let value = tape.value(mean).item().as_f64();
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: batch_idx,
                        msg: format!("batch loss {}", value),
                    });
                }
                tape.backward(mean, &mut accum)?;
                value
            };
            epoch_loss += batch_loss * chunk.len() as f64;
            seen += chunk.len();

            let norm = accum.global_norm();
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    msg: format!("gradient norm {}", norm),
                });
            }
            if norm > cfg.clip_norm {
                accum.scale(S::of(cfg.clip_norm / norm));
            }
            let ids: Vec<_> = bundle.store.ids().collect();
            for id in ids {
                let lr = cfg.group_lr(bundle.store.group(id));
                if lr == 0.0 {
                    continue;
                }
                let step = S::of(lr);
                let g = accum.get(id).data().to_vec();
                let w = bundle.store.get_mut(id).data_mut();
                for (wv, gv) in w.iter_mut().zip(g) {
                    *wv = *wv - step * gv;
                }
            }
        }

        let dev_acc = accuracy(bundle, dev_docs)?;
        history.push(EpochStats {
            epoch,
            train_loss: epoch_loss / seen as f64,
            dev_acc,
        });
        if dev_acc > best_acc {
            best_acc = dev_acc;
            best_epoch = epoch;
            best_snap = snapshot(bundle);
            streak = 0;
        } else {
            streak += 1;
            if streak >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    restore(bundle, &best_snap);
    Ok(TrainOutcome {
        best_epoch,
        best_dev_acc: best_acc,
        epochs_run,
        stopped_early,
        history,
    })
}

/// Writes the per-epoch history as CSV. Floats use shortest round-trip
/// formatting so reruns produce byte-identical files.
pub fn write_history(history: &[EpochStats], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,train_loss,dev_acc\n");
    for row in history {
        out.push_str(&format!("{},{},{}\n", row.epoch, row.train_loss, row.dev_acc));
    }
    std::fs::write(path, out)?;
    Ok(())
}
