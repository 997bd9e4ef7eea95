//! Rationalize-then-predict model bundles.
//!
//! A bundle couples a rationalizer (per-unit selection logits plus a
//! variant-specific mask sampler) with a predictor that only sees the
//! masked embedding rows z = m * e. Five variants share the plumbing:
//!
//! * `Rnp`: per-unit binary Gumbel-Softmax masks, sparsity-penalised.
//! * `Vib`: relaxed Bernoulli masks in training, top-k at inference,
//!   with a KL bottleneck toward the target sparsity.
//! * `Spectra`: deterministic budget-constrained selection with a
//!   straight-through gradient.
//! * `Fr`: as `Rnp` but the token feature layer is shared between the
//!   rationalizer and the predictor.
//! * `Dr`: as `Rnp`; differs only in the trainer's learning-rate split.
//!
//! The default encoder scores tokens from a tanh feature layer followed by
//! a linear head over a +-w window of features; a single-layer gated
//! recurrent encoder is available behind the same interface.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Document, EmbeddingTable, Level};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tape::{GradAccum, NodeId, ParamGroup, ParamId, ParamStore, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Rnp,
    Vib,
    Spectra,
    Fr,
    Dr,
}

impl Variant {
    pub fn shares_encoder(self) -> bool {
        matches!(self, Variant::Fr)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Rnp => "rnp",
            Variant::Vib => "vib",
            Variant::Spectra => "spectra",
            Variant::Fr => "fr",
            Variant::Dr => "dr",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rnp" => Ok(Variant::Rnp),
            "vib" => Ok(Variant::Vib),
            "spectra" => Ok(Variant::Spectra),
            "fr" => Ok(Variant::Fr),
            "dr" => Ok(Variant::Dr),
            other => Err(Error::invalid(format!("unknown variant {:?}", other))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Window,
    Recurrent,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "window" => Ok(EncoderKind::Window),
            "recurrent" => Ok(EncoderKind::Recurrent),
            other => Err(Error::invalid(format!("unknown encoder {:?}", other))),
        }
    }
}

/// Which mask reaches the predictor: the straight-through hard mask
/// (default) or the soft relaxation only (ablation switch).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    HardSt,
    Soft,
}

/// Forward-pass regime. Training and attack passes sample stochastic
/// masks from the seed; evaluation is deterministic (thresholded, top-k
/// or budget selection depending on the variant).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Attack,
    Eval,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub level: Level,
    pub encoder: EncoderKind,
    pub classes: usize,
    pub hidden: usize,
    pub window: usize,
    /// Target fraction of selected units.
    pub sparsity: f64,
    /// Sampler temperature.
    pub temperature: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.hidden == 0 {
            return Err(Error::invalid("hidden size must be positive"));
        }
        if !(0.0 < self.sparsity && self.sparsity < 1.0) {
            return Err(Error::invalid("sparsity must lie in (0, 1)"));
        }
        if self.temperature <= 0.0 {
            return Err(Error::invalid("temperature must be positive"));
        }
        if self.variant.shares_encoder() && self.encoder != EncoderKind::Window {
            return Err(Error::invalid(
                "the shared-encoder variant requires the window encoder",
            ));
        }
        Ok(())
    }

    pub fn default_for(variant: Variant) -> Self {
        // Per-variant sampler temperatures follow the training recipe the
        // bundles were tuned with.
        let temperature = match variant {
            Variant::Vib => 0.1,
            Variant::Spectra => 0.5,
            _ => 1.0,
        };
        ModelConfig {
            variant,
            level: Level::Token,
            encoder: EncoderKind::Window,
            classes: 2,
            hidden: 32,
            window: 2,
            sparsity: 0.2,
            temperature,
        }
    }
}

/// Parameter handles; `pred_w1`/`pred_b1` alias the encoder feature layer
/// for the shared-encoder variant.
#[derive(Debug, Clone)]
pub struct Params {
    pub embed: ParamId,
    pub enc_wf: Option<ParamId>,
    pub enc_bf: Option<ParamId>,
    pub enc_ws: Option<ParamId>,
    pub enc_bs: Option<ParamId>,
    pub rec_wu: Option<ParamId>,
    pub rec_uu: Option<ParamId>,
    pub rec_bu: Option<ParamId>,
    pub rec_wc: Option<ParamId>,
    pub rec_uc: Option<ParamId>,
    pub rec_bc: Option<ParamId>,
    pub rec_ws: Option<ParamId>,
    pub rec_bs: Option<ParamId>,
    pub pred_w1: ParamId,
    pub pred_b1: ParamId,
    pub pred_w2: ParamId,
    pub pred_b2: ParamId,
}

pub struct ModelBundle<S> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    pub params: Params,
    pub vocab: Vec<String>,
    pub dim: usize,
}

fn gaussian<S: Scalar>(
    rng: &mut rand_chacha::ChaCha8Rng,
    shape: Vec<usize>,
    scale: f64,
) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            S::of(scale * v)
        })
        .collect();
    Tensor::new(shape, data)
}

impl<S: Scalar> ModelBundle<S> {
    /// Fresh bundle over a vocabulary; non-embedding parameters are drawn
    /// from `init_seed`, the embedding matrix is copied from the table.
    pub fn new(table: &EmbeddingTable<S>, cfg: ModelConfig, init_seed: u64) -> Result<Self> {
        let mut bundle = Self::with_shape(
            cfg,
            table.dim(),
            table.tokens().to_vec(),
            Some(table.matrix().clone()),
            init_seed,
        )?;
        debug_assert_eq!(bundle.store.get(bundle.params.embed).rows(), table.vocab_size());
        bundle.dim = table.dim();
        Ok(bundle)
    }

    /// Internal constructor shared with checkpoint loading.
    pub(crate) fn with_shape(
        cfg: ModelConfig,
        dim: usize,
        vocab: Vec<String>,
        embedding: Option<Tensor<S>>,
        init_seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if dim == 0 || vocab.is_empty() {
            return Err(Error::invalid("empty vocabulary or zero dimension"));
        }
        let mut store = ParamStore::new();
        let mut rng = rng::rng_from(init_seed, &[0xb0b]);
        let h = cfg.hidden;
        let c = cfg.classes;
        let span = 2 * cfg.window + 1;

        let embed_tensor = match embedding {
            Some(m) => {
                if m.shape() != [vocab.len(), dim] {
                    return Err(Error::shape(
                        "bundle",
                        format!("embedding {:?} for vocab {} x {}", m.shape(), vocab.len(), dim),
                    ));
                }
                m
            }
            None => Tensor::zeros(vec![vocab.len(), dim]),
        };
        let embed = store.register("embed", ParamGroup::Embedding, embed_tensor);

        let scale_d = 1.0 / (dim as f64).sqrt();
        let scale_h = 1.0 / (h as f64).sqrt();

        let mut enc_wf = None;
        let mut enc_bf = None;
        let mut enc_ws = None;
        let mut enc_bs = None;
        let mut rec = [None; 8];
        match cfg.encoder {
            EncoderKind::Window => {
                enc_wf = Some(store.register(
                    "enc.wf",
                    ParamGroup::Rationalizer,
                    gaussian(&mut rng, vec![dim, h], scale_d),
                ));
                enc_bf = Some(store.register(
                    "enc.bf",
                    ParamGroup::Rationalizer,
                    Tensor::zeros(vec![h]),
                ));
                enc_ws = Some(store.register(
                    "enc.ws",
                    ParamGroup::Rationalizer,
                    gaussian(&mut rng, vec![span * h], 1.0 / ((span * h) as f64).sqrt()),
                ));
                enc_bs = Some(store.register(
                    "enc.bs",
                    ParamGroup::Rationalizer,
                    Tensor::zeros(vec![1]),
                ));
            }
            EncoderKind::Recurrent => {
                let names = [
                    "rec.wu", "rec.uu", "rec.bu", "rec.wc", "rec.uc", "rec.bc", "rec.ws", "rec.bs",
                ];
                for (i, name) in names.iter().enumerate() {
                    let tensor = match i {
                        0 | 3 => gaussian(&mut rng, vec![dim, h], scale_d),
                        1 | 4 => gaussian(&mut rng, vec![h, h], scale_h),
                        2 | 5 => Tensor::zeros(vec![h]),
                        6 => gaussian(&mut rng, vec![h, 1], scale_h),
                        _ => Tensor::zeros(vec![1]),
                    };
                    rec[i] = Some(store.register(*name, ParamGroup::Rationalizer, tensor));
                }
            }
        }

        let (pred_w1, pred_b1) = if cfg.variant.shares_encoder() {
            (enc_wf.unwrap(), enc_bf.unwrap())
        } else {
            (
                store.register(
                    "pred.w1",
                    ParamGroup::Predictor,
                    gaussian(&mut rng, vec![dim, h], scale_d),
                ),
                store.register("pred.b1", ParamGroup::Predictor, Tensor::zeros(vec![h])),
            )
        };
        let pred_w2 = store.register(
            "pred.w2",
            ParamGroup::Predictor,
            gaussian(&mut rng, vec![h, c], scale_h),
        );
        let pred_b2 = store.register("pred.b2", ParamGroup::Predictor, Tensor::zeros(vec![c]));

        Ok(ModelBundle {
            cfg,
            store,
            params: Params {
                embed,
                enc_wf,
                enc_bf,
                enc_ws,
                enc_bs,
                rec_wu: rec[0],
                rec_uu: rec[1],
                rec_bu: rec[2],
                rec_wc: rec[3],
                rec_uc: rec[4],
                rec_bc: rec[5],
                rec_ws: rec[6],
                rec_bs: rec[7],
                pred_w1,
                pred_b1,
                pred_w2,
                pred_b2,
            },
            vocab,
            dim,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab_hash(&self) -> u64 {
        crate::data::vocab_hash(&self.vocab, self.dim)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.vocab[id]
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.vocab.iter().position(|t| t == token)
    }

    pub fn embedding_matrix(&self) -> &Tensor<S> {
        self.store.get(self.params.embed)
    }

    pub fn embedding_row(&self, id: usize) -> &[S] {
        self.embedding_matrix().row(id)
    }

    /// Tokens eligible as trigger candidates: everything non-structural.
    pub fn allowed_mask(&self) -> Vec<bool> {
        (0..self.vocab.len())
            .map(|i| i >= crate::data::RESERVED)
            .collect()
    }
}

/// Deterministic top-k mask over logits, ties to the lower index.
pub fn top_k_mask<S: Scalar>(logits: &[S], k: usize) -> Result<Vec<u8>> {
    if k == 0 || k > logits.len() {
        return Err(Error::invalid(format!(
            "top-k with k = {} over {} units",
            k,
            logits.len()
        )));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .expect("finite logits")
            .then_with(|| a.cmp(&b))
    });
    let mut mask = vec![0u8; logits.len()];
    for &i in order.iter().take(k) {
        mask[i] = 1;
    }
    Ok(mask)
}

/// Budget-constrained selection: scores above one half, keeping at most
/// `budget` of the highest, ties to the lower index. This maximises
/// sum m_i (s_i - 1/2) subject to sum m_i <= budget exactly.
pub fn budget_mask<S: Scalar>(scores: &[S], budget: usize) -> Vec<u8> {
    let half = S::of(0.5);
    let mut cands: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > half).collect();
    cands.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then_with(|| a.cmp(&b))
    });
    let mut mask = vec![0u8; scores.len()];
    for &i in cands.iter().take(budget) {
        mask[i] = 1;
    }
    mask
}

/// Broadcasts a per-sentence mask to token positions. `bounds` must
/// partition the token range.
pub fn extend_sentence_mask(units: &[u8], bounds: &[(usize, usize)]) -> Result<Vec<u8>> {
    if units.len() != bounds.len() {
        return Err(Error::invalid(format!(
            "{} mask units for {} sentences",
            units.len(),
            bounds.len()
        )));
    }
    let len = bounds.last().map(|&(_, e)| e).unwrap_or(0);
    crate::data::validate_bounds(bounds, len)?;
    let mut out = vec![0u8; len];
    for (u, &(s, e)) in bounds.iter().enumerate() {
        if units[u] != 0 {
            for v in &mut out[s..e] {
                *v = 1;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RationalizerOutput<S> {
    /// Raw per-unit selection logits.
    pub logits: Vec<S>,
    /// Soft mask in [0, 1] per unit.
    pub soft: Vec<S>,
    /// Hard mask per unit; all reported rationales use this.
    pub hard: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Prediction<S> {
    pub class_logits: Vec<S>,
    pub class: usize,
}

/// Node handles and concrete outputs of one traced forward pass.
pub struct ForwardTrace<S> {
    /// Gathered input embeddings, L x d.
    pub e: NodeId,
    /// Per-unit selection logits.
    pub unit_logits: NodeId,
    /// Soft mask node (gradient path for explanation losses).
    pub soft_mask: NodeId,
    /// Per-unit selection probabilities (supervision / KL path).
    pub sel_probs: NodeId,
    /// Per-unit mask as the predictor sees it (straight-through hard by
    /// default), before any sentence-to-token expansion.
    pub unit_mask: NodeId,
    /// Token-level mask feeding the predictor.
    pub token_mask: NodeId,
    /// Class logits node.
    pub pred_logits: NodeId,
    pub rationalizer: RationalizerOutput<S>,
    pub prediction: Prediction<S>,
}

fn argmax_lowest<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn encoder_token_logits<S: Scalar>(
    tape: &mut Tape<'_, S>,
    bundle: &ModelBundle<S>,
    e: NodeId,
) -> Result<NodeId> {
    let p = &bundle.params;
    match bundle.cfg.encoder {
        EncoderKind::Window => {
            let wf = tape.param(p.enc_wf.unwrap());
            let bf = tape.param(p.enc_bf.unwrap());
            let pre = tape.matmul(e, wf)?;
            let pre = tape.bias_row(pre, bf)?;
            let f = tape.tanh(pre);
            let wc = tape.window_concat(f, bundle.cfg.window)?;
            let ws = tape.param(p.enc_ws.unwrap());
            let bs = tape.param(p.enc_bs.unwrap());
            let s = tape.matmul(wc, ws)?;
            tape.add_scalar(s, bs)
        }
        EncoderKind::Recurrent => {
            let wu = tape.param(p.rec_wu.unwrap());
            let uu = tape.param(p.rec_uu.unwrap());
            let bu = tape.param(p.rec_bu.unwrap());
            let wc = tape.param(p.rec_wc.unwrap());
            let uc = tape.param(p.rec_uc.unwrap());
            let bc = tape.param(p.rec_bc.unwrap());
            let ws = tape.param(p.rec_ws.unwrap());
            let bs = tape.param(p.rec_bs.unwrap());
            let len = tape.value(e).rows();
            let mut h_prev = tape.leaf(Tensor::zeros(vec![bundle.cfg.hidden]));
            let mut logits = Vec::with_capacity(len);
            for t in 0..len {
                // Minimal gated unit: one update gate and a candidate state.
                let x = tape.row(e, t)?;
                let xu = tape.matmul(x, wu)?;
                let hu = tape.matmul(h_prev, uu)?;
                let su = tape.add(xu, hu)?;
                let su = tape.add(su, bu)?;
                let u = tape.sigmoid(su);
                let xc = tape.matmul(x, wc)?;
                let hc = tape.matmul(h_prev, uc)?;
                let sc = tape.add(xc, hc)?;
                let sc = tape.add(sc, bc)?;
                let c = tape.tanh(sc);
                let nu = tape.neg(u);
                let keep = tape.add_const(nu, S::one());
                let kept = tape.mul(keep, h_prev)?;
                let upd = tape.mul(u, c)?;
                h_prev = tape.add(kept, upd)?;
                let s = tape.matmul(h_prev, ws)?;
                let s = tape.add_scalar(s, bs)?;
                logits.push(s);
            }
            tape.concat(&logits)
        }
    }
}

struct MaskNodes {
    soft: NodeId,
    sel_probs: NodeId,
    z_mask_units: NodeId,
    hard: Vec<u8>,
}

fn sample_masks<S: Scalar>(
    tape: &mut Tape<'_, S>,
    bundle: &ModelBundle<S>,
    unit_logits: NodeId,
    phase: Phase,
    mode: MaskMode,
    noise: &mut rng::NoiseStream,
) -> Result<MaskNodes> {
    let cfg = &bundle.cfg;
    let tau = cfg.temperature;
    let units = tape.value(unit_logits).numel();
    let logit_vals = tape.value(unit_logits).clone();
    match cfg.variant {
        Variant::Rnp | Variant::Fr | Variant::Dr => {
            let sel_probs = tape.sigmoid(unit_logits);
            let (soft, hard) = match phase {
                Phase::Eval => {
                    let scaled = tape.scale(unit_logits, S::of(1.0 / tau));
                    let soft = tape.sigmoid(scaled);
                    let hard: Vec<u8> = logit_vals
                        .data()
                        .iter()
                        .map(|&l| u8::from(l > S::zero()))
                        .collect();
                    (soft, hard)
                }
                Phase::Train | Phase::Attack => {
                    let seed = noise.next_rng().gen::<u64>();
                    let soft = tape.binary_gumbel(unit_logits, tau, false, seed)?;
                    let hard_node = tape.binary_gumbel(unit_logits, tau, true, seed)?;
                    let hard: Vec<u8> = tape
                        .value(hard_node)
                        .data()
                        .iter()
                        .map(|&v| u8::from(v == S::one()))
                        .collect();
                    (soft, hard)
                }
            };
            let z_mask_units = z_mask_for(tape, phase, mode, soft, &hard)?;
            Ok(MaskNodes {
                soft,
                sel_probs,
                z_mask_units,
                hard,
            })
        }
        Variant::Vib => {
            let rates = tape.softplus(unit_logits);
            // Selection probability of the hard sample under the Gumbel
            // construction: P(ln r + g > 0) = 1 - exp(-r).
            let nr = tape.neg(rates);
            let enr = tape.exp(nr);
            let nenr = tape.neg(enr);
            let sel_probs = tape.add_const(nenr, S::one());
            let k = ((cfg.sparsity * units as f64).round() as usize).max(1).min(units);
            match phase {
                Phase::Train => {
                    let seed = noise.next_rng().gen::<u64>();
                    let soft = tape.relaxed_bernoulli(rates, tau, seed)?;
                    let hard: Vec<u8> = tape
                        .value(soft)
                        .data()
                        .iter()
                        .map(|&v| u8::from(v.as_f64() > 0.5))
                        .collect();
                    // Training feeds the relaxed mask itself downstream.
                    let z_mask_units = match mode {
                        MaskMode::Soft | MaskMode::HardSt => soft,
                    };
                    Ok(MaskNodes {
                        soft,
                        sel_probs,
                        z_mask_units,
                        hard,
                    })
                }
                Phase::Attack => {
                    let seed = noise.next_rng().gen::<u64>();
                    let soft = tape.relaxed_bernoulli(rates, tau, seed)?;
                    let hard = top_k_mask(logit_vals.data(), k)?;
                    let z_mask_units = z_mask_for(tape, phase, mode, soft, &hard)?;
                    Ok(MaskNodes {
                        soft,
                        sel_probs,
                        z_mask_units,
                        hard,
                    })
                }
                Phase::Eval => {
                    let lr = tape.log(rates);
                    let scaled = tape.scale(lr, S::of(1.0 / tau));
                    let soft = tape.sigmoid(scaled);
                    let hard = top_k_mask(logit_vals.data(), k)?;
                    let z_mask_units = z_mask_for(tape, phase, mode, soft, &hard)?;
                    Ok(MaskNodes {
                        soft,
                        sel_probs,
                        z_mask_units,
                        hard,
                    })
                }
            }
        }
        Variant::Spectra => {
            let probs = tape.sigmoid(unit_logits);
            let budget = (cfg.sparsity * units as f64).round() as usize;
            let hard = budget_mask(tape.value(probs).data(), budget);
            let z_mask_units = z_mask_for(tape, phase, mode, probs, &hard)?;
            Ok(MaskNodes {
                soft: probs,
                sel_probs: probs,
                z_mask_units,
                hard,
            })
        }
    }
}

fn z_mask_for<S: Scalar>(
    tape: &mut Tape<'_, S>,
    _phase: Phase,
    mode: MaskMode,
    soft: NodeId,
    hard: &[u8],
) -> Result<NodeId> {
    match mode {
        MaskMode::Soft => Ok(soft),
        MaskMode::HardSt => {
            let hard_t = Tensor::vector(
                hard.iter()
                    .map(|&h| if h != 0 { S::one() } else { S::zero() })
                    .collect(),
            );
            tape.straight_through(soft, hard_t)
        }
    }
}

/// Traced forward pass over explicit tokens and sentence bounds. The
/// prediction is a deterministic function of (tokens, parameters, seed).
pub fn forward_traced<S: Scalar>(
    tape: &mut Tape<'_, S>,
    bundle: &ModelBundle<S>,
    tokens: &[usize],
    bounds: &[(usize, usize)],
    phase: Phase,
    mode: MaskMode,
    seed: u64,
) -> Result<ForwardTrace<S>> {
    if tokens.is_empty() {
        return Err(Error::invalid("forward over empty token sequence"));
    }
    crate::data::validate_bounds(bounds, tokens.len())?;
    let p = &bundle.params;
    let e = tape.gather_param(p.embed, tokens)?;
    let tok_logits = encoder_token_logits(tape, bundle, e)?;
    let unit_logits = match bundle.cfg.level {
        Level::Token => tok_logits,
        Level::Sentence => tape.seg_mean(tok_logits, bounds)?,
    };
    let mut noise = rng::NoiseStream::new(seed);
    let masks = sample_masks(tape, bundle, unit_logits, phase, mode, &mut noise)?;
    let token_mask = match bundle.cfg.level {
        Level::Token => masks.z_mask_units,
        Level::Sentence => tape.seg_expand(masks.z_mask_units, bounds)?,
    };
    let z = tape.row_scale(token_mask, e)?;
    let pooled = tape.mean_rows(z)?;
    let w1 = tape.param(p.pred_w1);
    let b1 = tape.param(p.pred_b1);
    let pre1 = tape.matmul(pooled, w1)?;
    let pre1 = tape.add(pre1, b1)?;
    let h1 = tape.tanh(pre1);
    let w2 = tape.param(p.pred_w2);
    let b2 = tape.param(p.pred_b2);
    let pre2 = tape.matmul(h1, w2)?;
    let pred_logits = tape.add(pre2, b2)?;

    let class_logits = tape.value(pred_logits).data().to_vec();
    let class = argmax_lowest(&class_logits);
    let rationalizer = RationalizerOutput {
        logits: tape.value(unit_logits).data().to_vec(),
        soft: tape.value(masks.soft).data().to_vec(),
        hard: masks.hard,
    };
    Ok(ForwardTrace {
        e,
        unit_logits,
        soft_mask: masks.soft,
        sel_probs: masks.sel_probs,
        unit_mask: masks.z_mask_units,
        token_mask,
        pred_logits,
        rationalizer,
        prediction: Prediction {
            class_logits,
            class,
        },
    })
}

/// Untraced forward pass building its own tape.
pub fn forward<S: Scalar>(
    bundle: &ModelBundle<S>,
    tokens: &[usize],
    bounds: &[(usize, usize)],
    phase: Phase,
    mode: MaskMode,
    seed: u64,
) -> Result<(RationalizerOutput<S>, Prediction<S>)> {
    let mut tape = Tape::new(&bundle.store);
    let trace = forward_traced(&mut tape, bundle, tokens, bounds, phase, mode, seed)?;
    Ok((trace.rationalizer, trace.prediction))
}

/// Deterministic evaluation pass over a document.
pub fn forward_doc_eval<S: Scalar>(
    bundle: &ModelBundle<S>,
    doc: &Document,
) -> Result<(RationalizerOutput<S>, Prediction<S>)> {
    if doc.query.is_some() {
        return Err(Error::invalid(
            "query-conditioned documents are not supported by these models",
        ));
    }
    forward(bundle, &doc.tokens, &doc.bounds, Phase::Eval, MaskMode::HardSt, 0)
}

/// Convenience wrapper: gradient accumulator sized for a bundle.
pub fn grad_accum_for<S: Scalar>(bundle: &ModelBundle<S>) -> GradAccum<S> {
    GradAccum::new(&bundle.store)
}
