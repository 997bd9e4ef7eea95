//! The batch objective the trigger search minimises.
//!
//! Per document, with m_adv the adversarial rationale and y_x the frozen
//! clean prediction:
//!
//! * non-target: -D_z(m_adv, m_star_nt) + beta * D_y, with D_z restricted
//!   to the original (non-trigger) unit slots, so shrinking the distance
//!   between the rationale and its old self is penalised;
//! * target: D_z(m_adv, m_star_t) + beta * D_y over all slots, pulling
//!   the rationale onto the triggers.
//!
//! D_y is cross-entropy against y_x; it anchors the prediction. The batch
//! loss is the mean over documents. Gradients with respect to the trigger
//! embedding rows come straight off the tape.

use serde::{Deserialize, Serialize};

use crate::attack::layout::{fill_triggers, AdvLayout};
use crate::data::Level;
use crate::error::{Error, Result};
use crate::model::{extend_sentence_mask, forward_traced, MaskMode, ModelBundle, Phase};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    NonTarget,
    Target,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::NonTarget => "non_target",
            Mode::Target => "target",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non_target" | "non-target" => Ok(Mode::NonTarget),
            "target" => Ok(Mode::Target),
            other => Err(Error::invalid(format!("unknown attack mode {:?}", other))),
        }
    }
}

/// Distance measure between rationale and label sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    /// Mean squared error over unit masks.
    Mse,
    /// Mean absolute error over unit masks.
    Mae,
    /// Mean squared error over the masked embedding rows m * e.
    MseZ,
}

impl Measure {
    pub fn name(self) -> &'static str {
        match self {
            Measure::Mse => "mse",
            Measure::Mae => "mae",
            Measure::MseZ => "mse_z",
        }
    }
}

impl std::str::FromStr for Measure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Measure::Mse),
            "mae" => Ok(Measure::Mae),
            "mse_z" | "msez" => Ok(Measure::MseZ),
            other => Err(Error::invalid(format!("unknown measure {:?}", other))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    pub mode: Mode,
    pub measure: Measure,
    /// Weight of the prediction-anchoring term.
    pub beta: f64,
    /// Mask relaxation: straight-through hard masks by default; the soft
    /// switch drops the hard forward pass entirely (ablation, and the
    /// regime in which gradients admit finite-difference checks).
    pub mask_mode: MaskMode,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("beta must be finite and >= 0"));
        }
        Ok(())
    }
}

fn unit_tensor<S: Scalar>(mask: &[u8]) -> Tensor<S> {
    Tensor::vector(
        mask.iter()
            .map(|&v| if v != 0 { S::one() } else { S::zero() })
            .collect(),
    )
}

/// Per-slot gradient of the batch loss with respect to the trigger
/// embedding vectors, flattened group-major: entry g * n_a + i belongs to
/// token i of group g.
pub type SlotGrads<S> = Vec<Vec<S>>;

/// Evaluates the batch loss for one trigger assignment. With
/// `want_grads`, also returns the loss gradient at every trigger slot's
/// embedding vector (summed over documents).
pub fn batch_attack_loss<S: Scalar>(
    bundle: &ModelBundle<S>,
    layouts: &[AdvLayout],
    trigger_ids: &[Vec<usize>],
    cfg: &LossConfig,
    seeds: &[u64],
    want_grads: bool,
) -> Result<(f64, Option<SlotGrads<S>>)> {
    cfg.validate()?;
    if layouts.is_empty() {
        return Err(Error::Attack("attack loss over an empty batch".to_string()));
    }
    if seeds.len() != layouts.len() {
        return Err(Error::Attack(format!(
            "{} seeds for {} documents",
            seeds.len(),
            layouts.len()
        )));
    }

    let mut tape = Tape::new(&bundle.store);
    let mut doc_e_nodes = Vec::with_capacity(layouts.len());
    let mut total = None;
    for (layout, &seed) in layouts.iter().zip(seeds) {
        let tokens = fill_triggers(&layout.tokens, &layout.group_token_slots, trigger_ids)?;
        let trace = forward_traced(
            &mut tape,
            bundle,
            &tokens,
            &layout.bounds,
            Phase::Attack,
            cfg.mask_mode,
            seed,
        )?;
        let (label_units, filter) = match cfg.mode {
            Mode::NonTarget => (&layout.m_star_nt, Some(layout.original_filter.as_slice())),
            Mode::Target => (&layout.m_star_t, None),
        };
        let d_z = match cfg.measure {
            Measure::Mse | Measure::Mae => {
                let label = tape.leaf(unit_tensor(label_units));
                match cfg.measure {
                    Measure::Mse => tape.loss_mse(trace.unit_mask, label, filter)?,
                    _ => tape.loss_mae(trace.unit_mask, label, filter)?,
                }
            }
            Measure::MseZ => {
                // Compare masked embeddings instead of masks; the filter
                // then selects embedding rows.
                let (label_tok, filter_tok);
                match layout.level {
                    Level::Token => {
                        label_tok = label_units.clone();
                        filter_tok = filter.map(|f| f.to_vec());
                    }
                    Level::Sentence => {
                        label_tok = extend_sentence_mask(label_units, &layout.bounds)?;
                        filter_tok = match filter {
                            Some(f) => Some(extend_sentence_mask(f, &layout.bounds)?),
                            None => None,
                        };
                    }
                }
                let label = tape.leaf(unit_tensor(&label_tok));
                let z_adv = tape.row_scale(trace.token_mask, trace.e)?;
                let z_star = tape.row_scale(label, trace.e)?;
                tape.loss_mse(z_adv, z_star, filter_tok.as_deref())?
            }
        };
        let d_y = tape.cross_entropy(trace.pred_logits, layout.clean_class)?;
        let weighted_y = tape.scale(d_y, S::of(cfg.beta));
        let doc_loss = match cfg.mode {
            Mode::NonTarget => {
                let n = tape.neg(d_z);
                tape.add(n, weighted_y)?
            }
            Mode::Target => tape.add(d_z, weighted_y)?,
        };
        total = Some(match total {
            None => doc_loss,
            Some(t) => tape.add(t, doc_loss)?,
        });
        doc_e_nodes.push(trace.e);
    }
    let total = total.expect("non-empty batch");
    let mean = tape.scale(total, S::of(1.0 / layouts.len() as f64));
    let value = tape.value(mean).item().as_f64();
    if !value.is_finite() {
        return Err(Error::Attack(format!("non-finite attack loss {}", value)));
    }
    if !want_grads {
        return Ok((value, None));
    }

    let mut accum = crate::tape::GradAccum::new(&bundle.store);
    let grads = tape.backward(mean, &mut accum)?;
    let n_a = trigger_ids.first().map(Vec::len).unwrap_or(0);
    let dim = bundle.dim;
    let mut slot_grads = vec![vec![S::zero(); dim]; trigger_ids.len() * n_a];
    for (layout, &e_node) in layouts.iter().zip(&doc_e_nodes) {
        let ge = grads.wrt(e_node);
        for (g, slots) in layout.group_token_slots.iter().enumerate() {
            for (i, &slot) in slots.iter().enumerate() {
                let row = ge.row(slot);
                let dst = &mut slot_grads[g * n_a + i];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
    }
    Ok((value, Some(slot_grads)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::layout::{build_layout, TriggerShape};
    use crate::data::{Document, EmbeddingTable, Level};
    use crate::model::{forward, ModelConfig, Variant};
    use crate::rng;

    fn fixture() -> (ModelBundle<f64>, Vec<AdvLayout>, Vec<Vec<usize>>, Vec<u64>) {
        let entries = (0..20)
            .map(|i| {
                let row: Vec<f64> = (0..6).map(|j| ((i * 6 + j) as f64 * 0.13).sin()).collect();
                (format!("t{}", i), row)
            })
            .collect();
        let table = EmbeddingTable::from_rows(entries, 6).unwrap();
        let mut cfg = ModelConfig::default_for(Variant::Rnp);
        cfg.hidden = 6;
        let bundle = ModelBundle::new(&table, cfg, 13).unwrap();
        let docs = vec![
            Document::new(
                vec![4, 5, 6, 7, 8, 9],
                vec![(0, 3), (3, 6)],
                0,
                Some(vec![1, 1, 0, 0, 0, 0]),
                None,
            )
            .unwrap(),
            Document::new(
                vec![10, 11, 12, 13, 14],
                vec![(0, 5)],
                1,
                None,
                None,
            )
            .unwrap(),
        ];
        let shape = TriggerShape {
            positions: vec![0, -1],
            tokens_per_group: 2,
        };
        let mut layouts = Vec::new();
        for doc in &docs {
            let (r, p) = crate::model::forward_doc_eval(&bundle, doc).unwrap();
            layouts.push(build_layout(doc, Level::Token, &r.hard, p.class, &shape).unwrap());
        }
        let ids = vec![vec![15, 16], vec![17, 18]];
        let seeds: Vec<u64> = (0..layouts.len() as u64).map(|i| rng::mix(3, &[i])).collect();
        (bundle, layouts, ids, seeds)
    }

    #[test]
    fn loss_matches_hand_assembled_terms() {
        let (bundle, layouts, ids, seeds) = fixture();
        for mode in [Mode::NonTarget, Mode::Target] {
            for measure in [Measure::Mse, Measure::Mae] {
                let cfg = LossConfig {
                    mode,
                    measure,
                    beta: 0.9,
                    mask_mode: MaskMode::HardSt,
                };
                let (value, _) =
                    batch_attack_loss(&bundle, &layouts, &ids, &cfg, &seeds, false).unwrap();
                // Recompute from independent forward passes and scalar math.
                let mut expect = 0.0f64;
                for (layout, &seed) in layouts.iter().zip(&seeds) {
                    let tokens =
                        fill_triggers(&layout.tokens, &layout.group_token_slots, &ids).unwrap();
                    let (r, p) = forward(
                        &bundle,
                        &tokens,
                        &layout.bounds,
                        Phase::Attack,
                        MaskMode::HardSt,
                        seed,
                    )
                    .unwrap();
                    let (label, filter): (&[u8], Option<&[u8]>) = match mode {
                        Mode::NonTarget => (
                            &layout.m_star_nt,
                            Some(layout.original_filter.as_slice()),
                        ),
                        Mode::Target => (&layout.m_star_t, None),
                    };
                    let mut num = 0.0;
                    let mut den = 0usize;
                    for i in 0..label.len() {
                        if filter.map_or(true, |f| f[i] != 0) {
                            let d = r.hard[i] as f64 - label[i] as f64;
                            num += match measure {
                                Measure::Mse => d * d,
                                _ => d.abs(),
                            };
                            den += 1;
                        }
                    }
                    let d_z = num / den as f64;
                    let probs = {
                        let mx = p
                            .class_logits
                            .iter()
                            .cloned()
                            .fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> =
                            p.class_logits.iter().map(|&l| (l - mx).exp()).collect();
                        let z: f64 = exps.iter().sum();
                        exps.iter().map(|e| e / z).collect::<Vec<_>>()
                    };
                    let d_y = -probs[layout.clean_class].ln();
                    expect += match mode {
                        Mode::NonTarget => -d_z + 0.9 * d_y,
                        Mode::Target => d_z + 0.9 * d_y,
                    };
                }
                expect /= layouts.len() as f64;
                assert!(
                    (value - expect).abs() < 1e-9,
                    "{:?}/{:?}: got {}, expected {}",
                    mode,
                    measure,
                    value,
                    expect
                );
            }
        }
    }

    #[test]
    fn identical_inputs_replay_bitwise() {
        let (bundle, layouts, ids, seeds) = fixture();
        let cfg = LossConfig {
            mode: Mode::NonTarget,
            measure: Measure::Mse,
            beta: 0.9,
            mask_mode: MaskMode::HardSt,
        };
        let (v1, g1) = batch_attack_loss(&bundle, &layouts, &ids, &cfg, &seeds, true).unwrap();
        let (v2, g2) = batch_attack_loss(&bundle, &layouts, &ids, &cfg, &seeds, true).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(g1.unwrap(), g2.unwrap());
    }

    #[test]
    fn trigger_slot_gradients_match_finite_differences() {
        // Trigger ids 15..18 do not occur in the documents, so the batch
        // loss's derivative in their embedding rows equals the slot
        // gradients the tape reports. Soft masks keep the whole loss
        // differentiable; the straight-through contract is covered by the
        // tape's own tests.
        let (mut bundle, layouts, ids, seeds) = fixture();
        let cfg = LossConfig {
            mode: Mode::Target,
            measure: Measure::Mse,
            beta: 0.9,
            mask_mode: MaskMode::Soft,
        };
        let (_, grads) = batch_attack_loss(&bundle, &layouts, &ids, &cfg, &seeds, true).unwrap();
        let grads = grads.unwrap();
        let eps = 1e-6;
        let embed = bundle.params.embed;
        for (g, row) in ids.iter().enumerate() {
            for (i, &token) in row.iter().enumerate() {
                for d in 0..bundle.dim {
                    let flat = token * bundle.dim + d;
                    let orig = bundle.store.get(embed).data()[flat];
                    bundle.store.get_mut(embed).data_mut()[flat] = orig + eps;
                    let (up, _) =
                        batch_attack_loss(&bundle, &layouts, &ids, &cfg, &seeds, false).unwrap();
                    bundle.store.get_mut(embed).data_mut()[flat] = orig - eps;
                    let (down, _) =
                        batch_attack_loss(&bundle, &layouts, &ids, &cfg, &seeds, false).unwrap();
                    bundle.store.get_mut(embed).data_mut()[flat] = orig;
                    let fd = (up - down) / (2.0 * eps);
                    let an = grads[g * 2 + i][d];
                    let scale = an.abs().max(fd.abs());
                    if scale > 1e-7 {
                        assert!(
                            (an - fd).abs() / scale < 1e-4,
                            "slot ({}, {}) dim {}: analytic {} vs fd {}",
                            g,
                            i,
                            d,
                            an,
                            fd
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn measures_and_modes_differ() {
        let (bundle, layouts, ids, seeds) = fixture();
        let mut values = Vec::new();
        for mode in [Mode::NonTarget, Mode::Target] {
            for measure in [Measure::Mse, Measure::Mae, Measure::MseZ] {
                let cfg = LossConfig {
                    mode,
                    measure,
                    beta: 0.9,
                    mask_mode: MaskMode::HardSt,
                };
                let (v, _) = batch_attack_loss(&bundle, &layouts, &ids, &cfg, &seeds, false).unwrap();
                assert!(v.is_finite());
                values.push(v);
            }
        }
        let distinct: std::collections::BTreeSet<String> =
            values.iter().map(|v| format!("{}", v)).collect();
        assert!(distinct.len() > 3, "losses suspiciously uniform: {:?}", values);
    }

    #[test]
    fn empty_batch_rejected() {
        let (bundle, _, ids, _) = fixture();
        let cfg = LossConfig {
            mode: Mode::NonTarget,
            measure: Measure::Mse,
            beta: 0.9,
            mask_mode: MaskMode::HardSt,
        };
        assert!(batch_attack_loss(&bundle, &[], &ids, &cfg, &[], false).is_err());
    }
}
