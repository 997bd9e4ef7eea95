//! Greedy trigger search.
//!
//! Rounds proceed as follows: compute the batch loss and the gradient at
//! every trigger slot once, then sweep the slots in order. For each slot,
//! k candidate tokens are proposed (nearest neighbours of the
//! gradient-stepped embedding, a random draw, or a first-order score),
//! all candidates are evaluated against the trigger set as it stood when
//! the sweep reached that slot, and the scan accepts any candidate that
//! strictly lowers the running loss. Candidates are evaluated in parallel;
//! because substituting at one slot overwrites the same entry, a serial
//! acceptance scan over the pre-computed losses reproduces the purely
//! sequential algorithm exactly.
//!
//! The search stops after a fixed number of rounds or once no replacement
//! happened for `stop_patience` consecutive rounds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::layout::{build_layout, AdvLayout, TriggerShape};
use crate::attack::loss::{batch_attack_loss, LossConfig};
use crate::attack::TriggerSet;
use crate::data::Document;
use crate::error::{Error, Result};
use crate::knn::KnnIndex;
use crate::model::{forward_doc_eval, ModelBundle};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMethod {
    /// k nearest vocabulary embeddings of e - eta * g, via the exact
    /// kd-tree index.
    KdTree,
    /// k distinct tokens drawn uniformly (a control arm).
    Random,
    /// k smallest first-order scores (e_w - e) . g.
    HotFlip,
}

impl QueryMethod {
    pub fn name(self) -> &'static str {
        match self {
            QueryMethod::KdTree => "kd_tree",
            QueryMethod::Random => "random",
            QueryMethod::HotFlip => "hot_flip",
        }
    }
}

impl std::str::FromStr for QueryMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kd_tree" | "kd-tree" | "kd" => Ok(QueryMethod::KdTree),
            "random" => Ok(QueryMethod::Random),
            "hot_flip" | "hot-flip" | "hotflip" => Ok(QueryMethod::HotFlip),
            other => Err(Error::invalid(format!("unknown query method {:?}", other))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    pub loss: LossConfig,
    pub query: QueryMethod,
    pub shape: TriggerShape,
    /// Step length of the gradient move the neighbour query starts from.
    pub eta: f64,
    /// Candidates per slot per round.
    pub k: usize,
    /// Hard cap on rounds.
    pub rounds: usize,
    /// Rounds without any replacement before stopping.
    pub stop_patience: usize,
    /// Documents the objective is averaged over.
    pub search_batch: usize,
    pub seed: u64,
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.shape.validate()?;
        if self.shape.is_empty() {
            return Err(Error::Attack(
                "search needs at least one trigger group with at least one token".to_string(),
            ));
        }
        if self.k == 0 {
            return Err(Error::invalid("need at least one candidate per slot"));
        }
        if self.rounds == 0 {
            return Err(Error::invalid("need at least one round"));
        }
        if self.search_batch == 0 {
            return Err(Error::invalid("search batch must be positive"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("eta must be finite and positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    pub replacements: usize,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub triggers: TriggerSet,
    pub rounds: Vec<RoundRecord>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Total number of batch loss evaluations, gradient passes included.
    pub evaluations: usize,
}

fn lowest_allowed(allowed: &[bool]) -> Result<usize> {
    allowed
        .iter()
        .position(|&a| a)
        .ok_or_else(|| Error::Attack("no tokens eligible as triggers".to_string()))
}

fn propose<S: Scalar>(
    method: QueryMethod,
    bundle: &ModelBundle<S>,
    index: Option<&KnnIndex<S>>,
    allowed_ids: &[usize],
    current: usize,
    grad: &[S],
    eta: f64,
    k: usize,
    round: usize,
    slot: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let k = k.min(allowed_ids.len());
    match method {
        QueryMethod::KdTree => {
            let e = bundle.embedding_row(current);
            let query: Vec<S> = e
                .iter()
                .zip(grad)
                .map(|(&ev, &gv)| ev - S::of(eta) * gv)
                .collect();
            let hits = index
                .expect("kd index prepared for kd queries")
                .query(&query, k)?;
            Ok(hits.into_iter().map(|n| n.id).collect())
        }
        QueryMethod::Random => {
            let mut rng = rng::rng_from(seed, &[5, round as u64, slot as u64]);
            let picked = rand::seq::index::sample(&mut rng, allowed_ids.len(), k);
            Ok(picked.into_iter().map(|i| allowed_ids[i]).collect())
        }
        QueryMethod::HotFlip => {
            let e = bundle.embedding_row(current).to_vec();
            let mut scored: Vec<(f64, usize)> = allowed_ids
                .iter()
                .map(|&w| {
                    let ew = bundle.embedding_row(w);
                    let s: f64 = ew
                        .iter()
                        .zip(&e)
                        .zip(grad)
                        .map(|((&a, &b), &g)| ((a - b) * g).as_f64())
                        .sum();
                    (s, w)
                })
                .collect();
            scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores").then(a.1.cmp(&b.1)));
            Ok(scored.into_iter().take(k).map(|(_, w)| w).collect())
        }
    }
}

/// Runs the greedy search against `bundle` over (a seeded sample of)
/// `docs`. The bundle is read-only throughout.
pub fn search<S: Scalar>(
    bundle: &ModelBundle<S>,
    docs: &[Document],
    cfg: &SearchConfig,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if docs.is_empty() {
        return Err(Error::Attack("search over an empty document set".to_string()));
    }

    // Seeded sample of the search batch.
    let mut order: Vec<usize> = (0..docs.len()).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = rng::rng_from(cfg.seed, &[4]);
        order.shuffle(&mut rng);
    }
    order.truncate(cfg.search_batch.min(docs.len()));
    order.sort_unstable();

    // Clean reference outputs and adversarial layouts, once.
    let mut layouts: Vec<AdvLayout> = Vec::with_capacity(order.len());
    for &di in &order {
        let doc = &docs[di];
        let (r, p) = forward_doc_eval(bundle, doc)?;
        layouts.push(build_layout(doc, bundle.cfg.level, &r.hard, p.class, &cfg.shape)?);
    }
    let seeds: Vec<u64> = (0..layouts.len()).map(|i| rng::mix(cfg.seed, &[6, i as u64])).collect();

    let allowed = bundle.allowed_mask();
    let allowed_ids: Vec<usize> = (0..allowed.len()).filter(|&i| allowed[i]).collect();
    let init_id = lowest_allowed(&allowed)?;
    let index = match cfg.query {
        QueryMethod::KdTree => Some(KnnIndex::build(
            bundle.embedding_matrix(),
            &allowed,
        )?),
        _ => None,
    };

    let groups = cfg.shape.group_count();
    let n_a = cfg.shape.tokens_per_group;
    let mut ids: Vec<Vec<usize>> = vec![vec![init_id; n_a]; groups];

    let mut evaluations = 0usize;
    let (mut current_loss, _) =
        batch_attack_loss(bundle, &layouts, &ids, &cfg.loss, &seeds, false)?;
    evaluations += 1;
    let initial_loss = current_loss;

    let mut rounds = Vec::new();
    let mut quiet = 0usize;
    for round in 0..cfg.rounds {
        let loss_before = current_loss;
        let (_, slot_grads) =
            batch_attack_loss(bundle, &layouts, &ids, &cfg.loss, &seeds, true)?;
        evaluations += 1;
        let slot_grads = slot_grads.expect("gradients requested");

        let mut replacements = 0usize;
        for g in 0..groups {
            for i in 0..n_a {
                let slot = g * n_a + i;
                let current = ids[g][i];
                let cands = propose(
                    cfg.query,
                    bundle,
                    index.as_ref(),
                    &allowed_ids,
                    current,
                    &slot_grads[slot],
                    cfg.eta,
                    cfg.k,
                    round,
                    slot,
                    cfg.seed,
                )?;
                // Evaluate every candidate against the set as it stands at
                // slot entry; order-preserving parallel map.
                let entry_ids = ids.clone();
                let losses: Vec<Result<(usize, f64)>> = cands
                    .par_iter()
                    .filter(|&&w| w != current)
                    .map(|&w| {
                        let mut trial = entry_ids.clone();
                        trial[g][i] = w;
                        let (l, _) =
                            batch_attack_loss(bundle, &layouts, &trial, &cfg.loss, &seeds, false)?;
                        Ok((w, l))
                    })
                    .collect();
                evaluations += losses.len();
                // Serial acceptance scan in candidate order.
                for item in losses {
                    let (w, l) = item?;
                    if l < current_loss {
                        ids[g][i] = w;
                        current_loss = l;
                        replacements += 1;
                    }
                }
            }
        }

        rounds.push(RoundRecord {
            round,
            loss_before,
            loss_after: current_loss,
            replacements,
        });
        if replacements == 0 {
            quiet += 1;
            if quiet >= cfg.stop_patience {
                break;
            }
        } else {
            quiet = 0;
        }
    }

    let surfaces = ids
        .iter()
        .map(|row| row.iter().map(|&id| bundle.token(id).to_string()).collect())
        .collect();
    Ok(SearchOutcome {
        triggers: TriggerSet {
            mode: cfg.loss.mode,
            level: bundle.cfg.level,
            positions: cfg.shape.positions.clone(),
            ids,
            surfaces,
            vocab_hash: bundle.vocab_hash(),
        },
        rounds,
        initial_loss,
        final_loss: current_loss,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::loss::{Measure, Mode};
    use crate::data::{generate_synthetic, Level, SyntheticSpec};
    use crate::model::{MaskMode, ModelConfig, Variant};

    fn fixture() -> (ModelBundle<f64>, Vec<Document>) {
        let spec = SyntheticSpec {
            train_docs: 24,
            dev_docs: 8,
            test_docs: 8,
            vocab: 40,
            cues_per_class: 6,
            dim: 8,
            sentences_per_doc: 2,
            tokens_per_sentence: 5,
            sparsity: 0.3,
            distractor_rate: 0.0,
            level: Level::Token,
            seed: 77,
        };
        let data = generate_synthetic::<f64>(&spec).unwrap();
        let mut mcfg = ModelConfig::default_for(Variant::Rnp);
        mcfg.hidden = 8;
        mcfg.sparsity = 0.3;
        let bundle = ModelBundle::new(&data.table, mcfg, 4).unwrap();
        (bundle, data.train.docs)
    }

    fn config(query: QueryMethod) -> SearchConfig {
        SearchConfig {
            loss: LossConfig {
                mode: Mode::NonTarget,
                measure: Measure::Mse,
                beta: 0.9,
                mask_mode: MaskMode::HardSt,
            },
            query,
            shape: TriggerShape {
                positions: vec![0, -1],
                tokens_per_group: 2,
            },
            eta: 1e4,
            k: 5,
            rounds: 4,
            stop_patience: 2,
            search_batch: 6,
            seed: 9,
        }
    }

    #[test]
    fn losses_never_increase() {
        for query in [QueryMethod::KdTree, QueryMethod::Random, QueryMethod::HotFlip] {
            let (bundle, docs) = fixture();
            let out = search(&bundle, &docs, &config(query)).unwrap();
            assert!(out.final_loss <= out.initial_loss);
            let mut prev = f64::INFINITY;
            for r in &out.rounds {
                assert!(r.loss_after <= r.loss_before, "round {} got worse", r.round);
                assert!(r.loss_before <= prev);
                prev = r.loss_after;
            }
            // Rounds chain: each round starts where the last ended.
            for pair in out.rounds.windows(2) {
                assert_eq!(pair[0].loss_after, pair[1].loss_before);
            }
        }
    }

    #[test]
    fn same_seed_replays_bitwise() {
        let (bundle, docs) = fixture();
        let a = search(&bundle, &docs, &config(QueryMethod::KdTree)).unwrap();
        let b = search(&bundle, &docs, &config(QueryMethod::KdTree)).unwrap();
        assert_eq!(a.triggers, b.triggers);
        assert_eq!(a.final_loss, b.final_loss);
        assert_eq!(a.evaluations, b.evaluations);
        for (x, y) in a.rounds.iter().zip(&b.rounds) {
            assert_eq!(x.loss_before, y.loss_before);
            assert_eq!(x.loss_after, y.loss_after);
            assert_eq!(x.replacements, y.replacements);
        }
    }

    #[test]
    fn trigger_set_is_well_formed() {
        let (bundle, docs) = fixture();
        let out = search(&bundle, &docs, &config(QueryMethod::Random)).unwrap();
        let set = out.triggers;
        set.validate().unwrap();
        assert_eq!(set.group_count(), 2);
        assert_eq!(set.tokens_per_group(), 2);
        assert_eq!(set.vocab_hash, bundle.vocab_hash());
        for (ids, surfaces) in set.ids.iter().zip(&set.surfaces) {
            for (&id, s) in ids.iter().zip(surfaces) {
                assert!(id >= crate::data::RESERVED);
                assert_eq!(bundle.token(id), s);
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let (bundle, docs) = fixture();
        let mut c = config(QueryMethod::Random);
        c.k = 0;
        assert!(search(&bundle, &docs, &c).is_err());
        let mut c = config(QueryMethod::Random);
        c.shape.positions.clear();
        assert!(search(&bundle, &docs, &c).is_err());
        let mut c = config(QueryMethod::Random);
        c.eta = 0.0;
        assert!(search(&bundle, &docs, &c).is_err());
        let c = config(QueryMethod::Random);
        assert!(search(&bundle, &[], &c).is_err());
    }
}
