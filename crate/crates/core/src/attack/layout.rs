//! Adversarial input construction.
//!
//! Inserting K groups of n_a tokens into a document of L tokens yields an
//! input of exactly L + K * n_a tokens. In unit space (tokens, or
//! sentences where each group becomes its own sentence) three aligned
//! sequences are derived:
//!
//! * `m_star_nt`: the clean rationale with zero runs spliced in at the
//!   trigger slots; its norm equals the clean rationale's norm.
//! * `m_star_t`: the indicator of the trigger slots.
//! * `original_filter`: the indicator of the original slots; equal to
//!   1 - m_star_t everywhere.

use serde::{Deserialize, Serialize};

use crate::data::{validate_bounds, Document, Level};
use crate::error::{Error, Result};

/// Shape of an attack: insertion positions in clean unit space (-1 is the
/// end) and tokens per group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerShape {
    pub positions: Vec<i64>,
    pub tokens_per_group: usize,
}

impl TriggerShape {
    pub fn validate(&self) -> Result<()> {
        for &p in &self.positions {
            if p < -1 {
                return Err(Error::Attack(format!("invalid trigger position {}", p)));
            }
        }
        Ok(())
    }

    pub fn group_count(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty() || self.tokens_per_group == 0
    }
}

/// Spread positions used when only a group count is given.
pub fn default_positions(groups: usize) -> Option<Vec<i64>> {
    match groups {
        1 => Some(vec![0]),
        3 => Some(vec![0, 4, -1]),
        5 => Some(vec![0, 2, 4, 6, -1]),
        _ => None,
    }
}

/// Label sequences over adversarial unit space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSequences {
    pub m_star_nt: Vec<u8>,
    pub m_star_t: Vec<u8>,
    pub original_filter: Vec<u8>,
    /// For each clean unit, its index in adversarial unit space.
    pub orig_to_adv: Vec<usize>,
}

/// Splices zero runs into a clean unit mask. `insertions` holds, per
/// group in fixed order, the clean unit index the run precedes (already
/// clamped into `0..=clean_mask.len()`) and the run length in units.
pub fn splice_label_sequences(
    clean_mask: &[u8],
    insertions: &[(usize, usize)],
) -> LabelSequences {
    let units = clean_mask.len();
    // Stable order: by insertion point, then by group index.
    let mut order: Vec<usize> = (0..insertions.len()).collect();
    order.sort_by_key(|&g| (insertions[g].0, g));

    let total: usize = units + insertions.iter().map(|&(_, len)| len).sum::<usize>();
    let mut m_star_nt = Vec::with_capacity(total);
    let mut m_star_t = Vec::with_capacity(total);
    let mut orig_to_adv = Vec::with_capacity(units);
    let mut next = order.into_iter().peekable();
    for u in 0..=units {
        while let Some(&g) = next.peek() {
            if insertions[g].0 == u {
                next.next();
                for _ in 0..insertions[g].1 {
                    m_star_nt.push(0);
                    m_star_t.push(1);
                }
            } else {
                break;
            }
        }
        if u < units {
            orig_to_adv.push(m_star_nt.len());
            m_star_nt.push(clean_mask[u]);
            m_star_t.push(0);
        }
    }
    let original_filter = m_star_t.iter().map(|&t| 1 - t).collect();
    LabelSequences {
        m_star_nt,
        m_star_t,
        original_filter,
        orig_to_adv,
    }
}

/// One document prepared for attack: a token template whose trigger slots
/// are filled with concrete ids before each forward pass, plus the label
/// sequences and clean-side reference outputs.
#[derive(Debug, Clone)]
pub struct AdvLayout {
    pub tokens: Vec<usize>,
    pub bounds: Vec<(usize, usize)>,
    /// Adversarial token indices per group.
    pub group_token_slots: Vec<Vec<usize>>,
    /// Adversarial unit indices per group.
    pub group_unit_slots: Vec<Vec<usize>>,
    pub m_star_nt: Vec<u8>,
    pub m_star_t: Vec<u8>,
    pub original_filter: Vec<u8>,
    /// Clean rationale the labels were spliced from.
    pub clean_mask: Vec<u8>,
    /// Frozen clean prediction the fluency term anchors to.
    pub clean_class: usize,
    pub label: usize,
    /// Gold rationale in clean unit space, when annotated.
    pub human: Option<Vec<u8>>,
    /// Gold rationale carried into adversarial unit space.
    pub human_adv: Option<Vec<u8>>,
    pub clean_units: usize,
    pub level: Level,
}

impl AdvLayout {
    pub fn adv_units(&self) -> usize {
        self.m_star_t.len()
    }
}

fn clamp_position(p: i64, units: usize) -> usize {
    if p < 0 {
        units
    } else if p as usize > units {
        log::debug!("trigger position {} beyond {} units, clamped to end", p, units);
        units
    } else {
        p as usize
    }
}

/// Builds the adversarial layout for one document. `clean_mask` is the
/// model's deterministic clean rationale in unit space and `clean_class`
/// its clean prediction; both come from an evaluation-phase forward pass.
pub fn build_layout(
    doc: &Document,
    level: Level,
    clean_mask: &[u8],
    clean_class: usize,
    shape: &TriggerShape,
) -> Result<AdvLayout> {
    shape.validate()?;
    let clean_units = doc.unit_count(level);
    if clean_mask.len() != clean_units {
        return Err(Error::Attack(format!(
            "clean mask has {} units, document has {}",
            clean_mask.len(),
            clean_units
        )));
    }
    let human = doc.unit_human_mask(level);

    let n_a = shape.tokens_per_group;
    let groups = shape.group_count();
    if groups == 0 || n_a == 0 {
        // Empty attack: the layout is the clean document itself.
        let labels = splice_label_sequences(clean_mask, &[]);
        return Ok(AdvLayout {
            tokens: doc.tokens.clone(),
            bounds: doc.bounds.clone(),
            group_token_slots: vec![Vec::new(); groups],
            group_unit_slots: vec![Vec::new(); groups],
            m_star_nt: labels.m_star_nt,
            m_star_t: labels.m_star_t,
            original_filter: labels.original_filter,
            clean_mask: clean_mask.to_vec(),
            clean_class,
            label: doc.label,
            human_adv: human.clone(),
            human,
            clean_units,
            level,
        });
    }

    // Unit-space insertions, in group order.
    let insertions: Vec<(usize, usize)> = shape
        .positions
        .iter()
        .map(|&p| {
            let units_per_group = match level {
                Level::Token => n_a,
                Level::Sentence => 1,
            };
            (clamp_position(p, clean_units), units_per_group)
        })
        .collect();
    let labels = splice_label_sequences(clean_mask, &insertions);
    let human_adv = human
        .as_ref()
        .map(|h| splice_label_sequences(h, &insertions).m_star_nt);

    // Token-space template. Trigger slots hold a placeholder id 0 until
    // `fill_triggers` writes the concrete tokens.
    let mut order: Vec<usize> = (0..groups).collect();
    order.sort_by_key(|&g| (insertions[g].0, g));

    let len = doc.tokens.len();
    let mut tokens = Vec::with_capacity(len + groups * n_a);
    let mut sentence_of = Vec::with_capacity(tokens.capacity());
    let mut group_token_slots = vec![Vec::new(); groups];
    let mut group_unit_slots = vec![Vec::new(); groups];

    match level {
        Level::Token => {
            // A group inserted before token p joins the sentence containing
            // p; insertion at the very end joins the last sentence.
            let clean_sentence_of = |t: usize| -> usize {
                if t >= len {
                    doc.bounds.len() - 1
                } else {
                    doc.bounds
                        .iter()
                        .position(|&(s, e)| s <= t && t < e)
                        .expect("validated bounds cover every token")
                }
            };
            let mut next = order.into_iter().peekable();
            for t in 0..=len {
                while let Some(&g) = next.peek() {
                    if insertions[g].0 == t {
                        next.next();
                        for _ in 0..n_a {
                            group_token_slots[g].push(tokens.len());
                            group_unit_slots[g].push(tokens.len());
                            tokens.push(0);
                            sentence_of.push(clean_sentence_of(t));
                        }
                    } else {
                        break;
                    }
                }
                if t < len {
                    tokens.push(doc.tokens[t]);
                    sentence_of.push(clean_sentence_of(t));
                }
            }
        }
        Level::Sentence => {
            // Each group becomes its own sentence before clean sentence p.
            let mut next = order.into_iter().peekable();
            let mut adv_sentence = 0usize;
            for s in 0..=doc.bounds.len() {
                while let Some(&g) = next.peek() {
                    if insertions[g].0 == s {
                        next.next();
                        group_unit_slots[g].push(adv_sentence);
                        for _ in 0..n_a {
                            group_token_slots[g].push(tokens.len());
                            tokens.push(0);
                            sentence_of.push(adv_sentence);
                        }
                        adv_sentence += 1;
                    } else {
                        break;
                    }
                }
                if s < doc.bounds.len() {
                    let (b, e) = doc.bounds[s];
                    for t in b..e {
                        tokens.push(doc.tokens[t]);
                        sentence_of.push(adv_sentence);
                    }
                    adv_sentence += 1;
                }
            }
        }
    }

    // Recover contiguous bounds from the per-token sentence assignment.
    let mut bounds = Vec::new();
    let mut start = 0usize;
    for t in 1..=tokens.len() {
        if t == tokens.len() || sentence_of[t] != sentence_of[t - 1] {
            bounds.push((start, t));
            start = t;
        }
    }
    validate_bounds(&bounds, tokens.len())?;

    let adv_units = match level {
        Level::Token => tokens.len(),
        Level::Sentence => bounds.len(),
    };
    debug_assert_eq!(adv_units, labels.m_star_t.len());

    Ok(AdvLayout {
        tokens,
        bounds,
        group_token_slots,
        group_unit_slots,
        m_star_nt: labels.m_star_nt,
        m_star_t: labels.m_star_t,
        original_filter: labels.original_filter,
        clean_mask: clean_mask.to_vec(),
        clean_class,
        label: doc.label,
        human_adv,
        human,
        clean_units,
        level,
    })
}

/// Writes trigger ids into a layout's token template.
pub fn fill_triggers(
    template: &[usize],
    group_token_slots: &[Vec<usize>],
    ids: &[Vec<usize>],
) -> Result<Vec<usize>> {
    if ids.len() != group_token_slots.len() {
        return Err(Error::Attack(format!(
            "{} id groups for {} slot groups",
            ids.len(),
            group_token_slots.len()
        )));
    }
    let mut out = template.to_vec();
    for (slots, row) in group_token_slots.iter().zip(ids) {
        if slots.len() != row.len() {
            return Err(Error::Attack(format!(
                "group carries {} ids for {} slots",
                row.len(),
                slots.len()
            )));
        }
        for (&slot, &id) in slots.iter().zip(row) {
            out[slot] = id;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc() -> Document {
        // Two sentences of 4 and 3 tokens.
        Document::new(
            vec![10, 11, 12, 13, 14, 15, 16],
            vec![(0, 4), (4, 7)],
            1,
            Some(vec![0, 1, 1, 0, 0, 0, 0]),
            None,
        )
        .unwrap()
    }

    #[test]
    fn splice_preserves_norm_and_lengths() {
        let clean = [1u8, 0, 1, 1, 0];
        let seqs = splice_label_sequences(&clean, &[(0, 2), (3, 2), (5, 1)]);
        assert_eq!(seqs.m_star_nt.len(), 5 + 5);
        assert_eq!(
            seqs.m_star_nt.iter().map(|&v| v as usize).sum::<usize>(),
            clean.iter().map(|&v| v as usize).sum::<usize>()
        );
        assert_eq!(seqs.m_star_nt, vec![0, 0, 1, 0, 1, 0, 0, 1, 0, 0]);
        assert_eq!(seqs.m_star_t, vec![1, 1, 0, 0, 0, 1, 1, 0, 0, 1]);
        for (t, f) in seqs.m_star_t.iter().zip(&seqs.original_filter) {
            assert_eq!(t + f, 1);
        }
        // Original units map to their new indices.
        for (u, &adv) in seqs.orig_to_adv.iter().enumerate() {
            assert_eq!(seqs.m_star_nt[adv], clean[u]);
            assert_eq!(seqs.original_filter[adv], 1);
        }
    }

    #[test]
    fn splice_groups_at_same_position_keep_group_order() {
        let clean = [1u8, 1];
        let seqs = splice_label_sequences(&clean, &[(1, 1), (1, 2)]);
        assert_eq!(seqs.m_star_t, vec![0, 1, 1, 1, 0]);
        assert_eq!(seqs.m_star_nt, vec![1, 0, 0, 0, 1]);
    }

    #[test]
    fn token_level_layout_inserts_groups() {
        let d = doc();
        let clean_mask = [0u8, 1, 1, 0, 0, 0, 0];
        let shape = TriggerShape {
            positions: vec![0, 5, -1],
            tokens_per_group: 2,
        };
        let layout = build_layout(&d, Level::Token, &clean_mask, 1, &shape).unwrap();
        assert_eq!(layout.tokens.len(), 7 + 3 * 2);
        assert_eq!(layout.adv_units(), 13);
        // Group 0 sits at the front, group 1 inside sentence 1, group 2 at the end.
        assert_eq!(layout.group_token_slots[0], vec![0, 1]);
        assert_eq!(layout.group_token_slots[1], vec![7, 8]);
        assert_eq!(layout.group_token_slots[2], vec![11, 12]);
        // Sentence bounds stretch around the inserted tokens.
        assert_eq!(layout.bounds, vec![(0, 6), (6, 13)]);
        // Original token values survive in order.
        let originals: Vec<usize> = layout
            .tokens
            .iter()
            .enumerate()
            .filter(|(i, _)| !layout.group_token_slots.iter().flatten().any(|s| s == i))
            .map(|(_, &t)| t)
            .collect();
        assert_eq!(originals, d.tokens);
        // Label laws.
        assert_eq!(
            layout.m_star_nt.iter().map(|&v| v as usize).sum::<usize>(),
            clean_mask.iter().map(|&v| v as usize).sum::<usize>()
        );
        for slots in &layout.group_unit_slots {
            for &u in slots {
                assert_eq!(layout.m_star_t[u], 1);
                assert_eq!(layout.original_filter[u], 0);
                assert_eq!(layout.m_star_nt[u], 0);
            }
        }
        // Human rationale only ever shrinks in adversarial space.
        let human_adv = layout.human_adv.as_ref().unwrap();
        assert_eq!(
            human_adv.iter().map(|&v| v as usize).sum::<usize>(),
            d.human_mask.as_ref().unwrap().iter().map(|&v| v as usize).sum::<usize>()
        );
    }

    #[test]
    fn position_beyond_length_clamps_to_end() {
        let d = doc();
        let clean_mask = [0u8; 7];
        let shape = TriggerShape {
            positions: vec![99],
            tokens_per_group: 3,
        };
        let layout = build_layout(&d, Level::Token, &clean_mask, 0, &shape).unwrap();
        assert_eq!(layout.group_token_slots[0], vec![7, 8, 9]);
        assert_eq!(layout.bounds, vec![(0, 4), (4, 10)]);
    }

    #[test]
    fn sentence_level_groups_become_sentences() {
        let d = doc();
        let clean_mask = [1u8, 0];
        let shape = TriggerShape {
            positions: vec![1, -1],
            tokens_per_group: 2,
        };
        let layout = build_layout(&d, Level::Sentence, &clean_mask, 0, &shape).unwrap();
        assert_eq!(layout.bounds.len(), 4);
        assert_eq!(layout.bounds, vec![(0, 4), (4, 6), (6, 9), (9, 11)]);
        assert_eq!(layout.group_unit_slots[0], vec![1]);
        assert_eq!(layout.group_unit_slots[1], vec![3]);
        assert_eq!(layout.m_star_t, vec![0, 1, 0, 1]);
        assert_eq!(layout.m_star_nt, vec![1, 0, 0, 0]);
        assert_eq!(layout.group_token_slots[0], vec![4, 5]);
        assert_eq!(layout.group_token_slots[1], vec![9, 10]);
    }

    #[test]
    fn empty_shape_returns_clean_document() {
        let d = doc();
        let clean_mask = [0u8, 1, 0, 0, 1, 0, 0];
        let shape = TriggerShape {
            positions: vec![],
            tokens_per_group: 5,
        };
        let layout = build_layout(&d, Level::Token, &clean_mask, 1, &shape).unwrap();
        assert_eq!(layout.tokens, d.tokens);
        assert_eq!(layout.bounds, d.bounds);
        assert!(layout.m_star_t.iter().all(|&v| v == 0));
        assert_eq!(layout.m_star_nt, clean_mask.to_vec());
        assert!(layout.original_filter.iter().all(|&v| v == 1));
    }

    #[test]
    fn fill_triggers_writes_ids() {
        let d = doc();
        let clean_mask = [0u8; 7];
        let shape = TriggerShape {
            positions: vec![0, -1],
            tokens_per_group: 2,
        };
        let layout = build_layout(&d, Level::Token, &clean_mask, 0, &shape).unwrap();
        let filled = fill_triggers(
            &layout.tokens,
            &layout.group_token_slots,
            &[vec![40, 41], vec![42, 43]],
        )
        .unwrap();
        assert_eq!(&filled[0..2], &[40, 41]);
        assert_eq!(&filled[9..11], &[42, 43]);
        assert_eq!(&filled[2..9], &d.tokens[..]);
        assert!(fill_triggers(&layout.tokens, &layout.group_token_slots, &[vec![40], vec![42, 43]])
            .is_err());
        assert!(fill_triggers(&layout.tokens, &layout.group_token_slots, &[vec![40, 41]]).is_err());
    }

    #[test]
    fn wrong_clean_mask_length_rejected() {
        let d = doc();
        let shape = TriggerShape {
            positions: vec![0],
            tokens_per_group: 1,
        };
        assert!(build_layout(&d, Level::Token, &[1, 0], 0, &shape).is_err());
    }

    #[test]
    fn default_positions_by_group_count() {
        assert_eq!(default_positions(5).unwrap(), vec![0, 2, 4, 6, -1]);
        assert_eq!(default_positions(3).unwrap(), vec![0, 4, -1]);
        assert_eq!(default_positions(1).unwrap(), vec![0]);
        assert!(default_positions(4).is_none());
    }
}
