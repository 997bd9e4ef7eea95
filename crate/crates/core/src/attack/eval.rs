//! Scoring a trigger set against a document split.
//!
//! Evaluation runs the deterministic inference pass twice per document,
//! clean and with triggers inserted, and records everything the metrics
//! and reports consume. Applying a set to a bundle with a different
//! vocabulary hash is refused, which is what keeps cross-model transfer
//! honest: transfer is just evaluation of a set searched against one
//! bundle on another bundle sharing the same embedding table.

use crate::attack::layout::{build_layout, fill_triggers, AdvLayout};
use crate::attack::TriggerSet;
use crate::data::{tokenize, Document, Level};
use crate::error::{Error, Result};
use crate::model::{
    extend_sentence_mask, forward, forward_doc_eval, MaskMode, ModelBundle, Phase,
};
use crate::scalar::Scalar;

use super::loss::Mode;

/// Everything recorded about one document under attack. Unit-space
/// fields feed the metrics; token-space fields feed the reports.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SampleOutcome {
    pub label: usize,
    pub clean_class: usize,
    pub adv_class: usize,
    /// Prediction changed between the clean and attacked input.
    pub flipped: bool,
    pub clean_mask: Vec<u8>,
    pub adv_mask: Vec<u8>,
    pub m_star_nt: Vec<u8>,
    pub m_star_t: Vec<u8>,
    pub original_filter: Vec<u8>,
    pub human: Option<Vec<u8>>,
    pub human_adv: Option<Vec<u8>>,
    pub clean_units: usize,
    pub adv_units: usize,
    pub adv_tokens: Vec<usize>,
    pub adv_bounds: Vec<(usize, usize)>,
    /// Token-space indicator of the inserted trigger tokens.
    pub trigger_tokens: Vec<u8>,
    /// Token-space clean rationale carried into adversarial positions.
    pub before_tokens: Vec<u8>,
    /// Token-space adversarial rationale.
    pub after_tokens: Vec<u8>,
    /// Token-space gold rationale in adversarial positions, when annotated.
    pub human_tokens: Option<Vec<u8>>,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub samples: Vec<SampleOutcome>,
}

fn to_tokens(mask: &[u8], level: Level, bounds: &[(usize, usize)]) -> Result<Vec<u8>> {
    match level {
        Level::Token => Ok(mask.to_vec()),
        Level::Sentence => extend_sentence_mask(mask, bounds),
    }
}

/// Evaluates one trigger set over a split. An empty set degenerates to
/// two identical clean passes per document.
pub fn evaluate_attack<S: Scalar>(
    bundle: &ModelBundle<S>,
    docs: &[Document],
    set: &TriggerSet,
) -> Result<EvalOutcome> {
    set.validate()?;
    set.check_compatible(bundle)?;
    if set.level != bundle.cfg.level {
        return Err(Error::Attack(format!(
            "trigger set is {} level but the model rationalizes at {} level",
            set.level, bundle.cfg.level
        )));
    }
    if docs.is_empty() {
        return Err(Error::Attack("evaluation over an empty document set".to_string()));
    }
    let shape = set.shape();
    let mut samples = Vec::with_capacity(docs.len());
    for doc in docs {
        let (r_clean, p_clean) = forward_doc_eval(bundle, doc)?;
        let layout: AdvLayout =
            build_layout(doc, bundle.cfg.level, &r_clean.hard, p_clean.class, &shape)?;
        let adv_tokens = fill_triggers(&layout.tokens, &layout.group_token_slots, &set.ids)?;
        let (r_adv, p_adv) = forward(
            bundle,
            &adv_tokens,
            &layout.bounds,
            Phase::Eval,
            MaskMode::HardSt,
            0,
        )?;

        let mut trigger_tokens = vec![0u8; adv_tokens.len()];
        for slots in &layout.group_token_slots {
            for &s in slots {
                trigger_tokens[s] = 1;
            }
        }
        let before_tokens = to_tokens(&layout.m_star_nt, layout.level, &layout.bounds)?;
        let after_tokens = to_tokens(&r_adv.hard, layout.level, &layout.bounds)?;
        let human_tokens = match &layout.human_adv {
            Some(h) => Some(to_tokens(h, layout.level, &layout.bounds)?),
            None => None,
        };

        samples.push(SampleOutcome {
            label: doc.label,
            clean_class: p_clean.class,
            adv_class: p_adv.class,
            flipped: p_adv.class != p_clean.class,
            clean_mask: r_clean.hard,
            adv_mask: r_adv.hard,
            m_star_nt: layout.m_star_nt,
            m_star_t: layout.m_star_t,
            original_filter: layout.original_filter,
            human: layout.human,
            human_adv: layout.human_adv,
            clean_units: layout.clean_units,
            adv_units: layout.bounds.last().map(|&(_, e)| e).unwrap_or(0),
            adv_bounds: layout.bounds,
            adv_tokens,
            trigger_tokens,
            before_tokens,
            after_tokens,
            human_tokens,
        });
    }
    // Unit counts: token level counts tokens, sentence level counts
    // sentences, matching the mask lengths.
    for s in &mut samples {
        s.adv_units = s.adv_mask.len();
    }
    Ok(EvalOutcome { samples })
}

/// Builds a trigger set from hand-written group strings against a
/// bundle's vocabulary. Every group must tokenize to the same length.
pub fn fixed_trigger_set<S: Scalar>(
    bundle: &ModelBundle<S>,
    groups: &[String],
    positions: &[i64],
    mode: Mode,
) -> Result<TriggerSet> {
    if groups.len() != positions.len() {
        return Err(Error::Attack(format!(
            "{} trigger strings for {} positions",
            groups.len(),
            positions.len()
        )));
    }
    let mut ids = Vec::with_capacity(groups.len());
    let mut surfaces = Vec::with_capacity(groups.len());
    for text in groups {
        let toks = tokenize(text);
        if toks.is_empty() {
            return Err(Error::Attack(format!("trigger text {:?} has no tokens", text)));
        }
        let mut row = Vec::with_capacity(toks.len());
        for t in &toks {
            let id = bundle
                .id_of(t)
                .ok_or_else(|| Error::Attack(format!("trigger token {:?} not in vocabulary", t)))?;
            row.push(id);
        }
        ids.push(row);
        surfaces.push(toks);
    }
    let len = ids[0].len();
    if ids.iter().any(|r| r.len() != len) {
        return Err(Error::Attack(
            "trigger groups must tokenize to equal lengths".to_string(),
        ));
    }
    let set = TriggerSet {
        mode,
        level: bundle.cfg.level,
        positions: positions.to_vec(),
        ids,
        surfaces,
        vocab_hash: bundle.vocab_hash(),
    };
    set.validate()?;
    Ok(set)
}

/// The empty trigger set for a bundle: evaluation under it reproduces the
/// clean behaviour exactly.
pub fn empty_trigger_set<S: Scalar>(bundle: &ModelBundle<S>, mode: Mode) -> TriggerSet {
    TriggerSet {
        mode,
        level: bundle.cfg.level,
        positions: Vec::new(),
        ids: Vec::new(),
        surfaces: Vec::new(),
        vocab_hash: bundle.vocab_hash(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, EmbeddingTable, SyntheticSpec};
    use crate::model::{ModelConfig, Variant};

    fn fixture() -> (ModelBundle<f64>, Vec<Document>) {
        let spec = SyntheticSpec {
            train_docs: 10,
            dev_docs: 4,
            test_docs: 6,
            vocab: 40,
            cues_per_class: 6,
            dim: 8,
            sentences_per_doc: 2,
            tokens_per_sentence: 5,
            sparsity: 0.3,
            distractor_rate: 0.0,
            level: Level::Token,
            seed: 3,
        };
        let data = generate_synthetic::<f64>(&spec).unwrap();
        let mut mcfg = ModelConfig::default_for(Variant::Rnp);
        mcfg.hidden = 8;
        let bundle = ModelBundle::new(&data.table, mcfg, 8).unwrap();
        (bundle, data.test.docs)
    }

    #[test]
    fn empty_set_reproduces_clean_behaviour() {
        let (bundle, docs) = fixture();
        let set = empty_trigger_set(&bundle, Mode::NonTarget);
        let out = evaluate_attack(&bundle, &docs, &set).unwrap();
        for s in &out.samples {
            assert!(!s.flipped);
            assert_eq!(s.clean_class, s.adv_class);
            assert_eq!(s.clean_mask, s.adv_mask);
            assert_eq!(s.m_star_nt, s.clean_mask);
            assert!(s.m_star_t.iter().all(|&v| v == 0));
            assert!(s.trigger_tokens.iter().all(|&v| v == 0));
            assert_eq!(s.clean_units, s.adv_units);
        }
    }

    #[test]
    fn inserted_triggers_show_up_in_token_space() {
        let (bundle, docs) = fixture();
        let set = fixed_trigger_set(
            &bundle,
            &["pos0 neg0".to_string(), "w0 w1".to_string()],
            &[0, -1],
            Mode::Target,
        )
        .unwrap();
        let out = evaluate_attack(&bundle, &docs, &set).unwrap();
        for s in &out.samples {
            assert_eq!(
                s.trigger_tokens.iter().map(|&v| v as usize).sum::<usize>(),
                4
            );
            assert_eq!(s.adv_tokens.len(), s.clean_units + 4);
            assert_eq!(s.adv_units, s.clean_units + 4);
            // The trigger ids really sit at the flagged positions.
            let flagged: Vec<usize> = s
                .trigger_tokens
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0)
                .map(|(i, _)| s.adv_tokens[i])
                .collect();
            let mut expect: Vec<usize> = set.ids.iter().flatten().cloned().collect();
            expect.sort_unstable();
            let mut got = flagged.clone();
            got.sort_unstable();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn oov_trigger_text_names_the_token() {
        let (bundle, _) = fixture();
        let err = fixed_trigger_set(&bundle, &["zebra".to_string()], &[0], Mode::NonTarget)
            .unwrap_err()
            .to_string();
        assert!(err.contains("zebra"), "unhelpful error: {}", err);
    }

    #[test]
    fn unequal_group_lengths_rejected() {
        let (bundle, _) = fixture();
        assert!(fixed_trigger_set(
            &bundle,
            &["pos0".to_string(), "w0 w1".to_string()],
            &[0, -1],
            Mode::NonTarget,
        )
        .is_err());
    }

    #[test]
    fn foreign_vocabulary_rejected() {
        let (bundle, docs) = fixture();
        let other_entries = (0..5)
            .map(|i| (format!("x{}", i), vec![0.1 * i as f64; 4]))
            .collect();
        let other_table = EmbeddingTable::<f64>::from_rows(other_entries, 4).unwrap();
        let other = ModelBundle::new(&other_table, ModelConfig::default_for(Variant::Rnp), 0).unwrap();
        let set = empty_trigger_set(&other, Mode::NonTarget);
        assert!(evaluate_attack(&bundle, &docs, &set).is_err());
    }

    #[test]
    fn level_mismatch_rejected() {
        let (bundle, docs) = fixture();
        let mut set = empty_trigger_set(&bundle, Mode::NonTarget);
        set.level = Level::Sentence;
        assert!(evaluate_attack(&bundle, &docs, &set).is_err());
    }
}
