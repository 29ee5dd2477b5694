//! Contrastive alignment, image-text matching with identity-based hard
//! negatives, masked-token prediction, and the training loop that combines them.

mod train;

pub use train::{train, AdamW, EpochLoss, LrSchedule, TrainConfig, TrainState};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TrainPool;
use crate::error::{Error, Result};
use crate::model::{is_special, CmpModel, TextInput, MASK, NUM_SPECIAL};
use crate::numerics::{lit, Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

/// A caption after masking, with the selected positions and their original ids.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedText {
    pub input: TextInput,
    pub positions: Vec<usize>,
    pub originals: Vec<u32>,
    pub actions: Vec<MaskAction>,
}

/// Selects each non-special token with probability `rate`; a selected token
/// becomes `MASK` 80% of the time, a random non-special token 10% of the
/// time, and stays unchanged otherwise.
pub fn mask_tokens<R: Rng + ?Sized>(txt: &TextInput, rate: f64, vocab_size: usize, rng: &mut R) -> Result<MaskedText> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid("mask_tokens", format!("rate {rate} outside [0, 1]")));
    }
    if vocab_size <= NUM_SPECIAL as usize {
        return Err(Error::invalid("mask_tokens", "vocabulary has no ordinary tokens"));
    }
    let mut tokens = txt.tokens().to_vec();
    let (mut positions, mut originals, mut actions) = (Vec::new(), Vec::new(), Vec::new());
    for (i, t) in tokens.iter_mut().enumerate() {
        if is_special(*t) || rng.random::<f64>() >= rate {
            continue;
        }
        positions.push(i);
        originals.push(*t);
        let u: f64 = rng.random();
        let action = if u < 0.8 {
            *t = MASK;
            MaskAction::Mask
        } else if u < 0.9 {
            *t = rng.random_range(NUM_SPECIAL..vocab_size as u32);
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        actions.push(action);
    }
    Ok(MaskedText { input: TextInput::new(tokens)?, positions, originals, actions })
}

/// One positive pair of a batch with its negatives. Positions index the
/// [`TrainPool`]; `random_*` index other slots of the same batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub positive: usize,
    /// Same identity, opposite variant: supplies both `Ĩ` and its caption `T̃`.
    pub counterpart: Option<usize>,
    /// Hard negatives were requested but the identity has only one variant.
    pub fallback: bool,
    pub random_text: usize,
    /// Second random negative, used only when there is no counterpart.
    pub random_image: usize,
    pub masked: MaskedText,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub items: Vec<BatchItem>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn fallback_count(&self) -> usize {
        self.items.iter().filter(|i| i.fallback).count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cl: f64,
    pub l_itm: f64,
    pub l_mlm: f64,
    pub l_total: f64,
}

impl LossReport {
    pub fn new(l_cl: f64, l_itm: f64, l_mlm: f64) -> Self {
        Self { l_cl, l_itm, l_mlm, l_total: l_cl + l_itm + l_mlm }
    }
}

/// Row-softmaxed batch similarities `(S_I2T, S_T2I)` of unit-norm features.
pub fn similarity_matrix<T: Scalar>(g: &mut Graph<'_, T>, f_v: Var, f_t: Var, tau: f64) -> Result<(Var, Var)> {
    let logits = similarity_logits(g, f_v, f_t, tau)?;
    let i2t = g.softmax(logits, 1)?;
    let lt = g.transpose(logits)?;
    let t2i = g.softmax(lt, 1)?;
    Ok((i2t, t2i))
}

fn similarity_logits<T: Scalar>(g: &mut Graph<'_, T>, f_v: Var, f_t: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::config("model.tau", "must be positive"));
    }
    let ft = g.transpose(f_t)?;
    let sims = g.matmul(f_v, ft)?;
    g.scale(sims, lit(1.0 / tau))
}

fn diagonal(n: usize) -> Vec<usize> {
    (0..n).map(|i| i * n + i).collect()
}

fn check_square<T: Scalar>(g: &Graph<'_, T>, op: &'static str, m: Var) -> Result<usize> {
    match *g.shape(m) {
        [r, c] if r == c => Ok(r),
        ref s => Err(Error::shape(op, s, &[s[0], s[0]])),
    }
}

/// `−½ · mean_i (log S_I2T[i][i] + log S_T2I[i][i])`.
pub fn contrastive_loss<T: Scalar>(g: &mut Graph<'_, T>, s_i2t: Var, s_t2i: Var) -> Result<Var> {
    let n = check_square(g, "contrastive_loss", s_i2t)?;
    if g.shape(s_t2i) != g.shape(s_i2t) {
        return Err(Error::shape("contrastive_loss", g.shape(s_i2t), g.shape(s_t2i)));
    }
    let mut terms = Vec::with_capacity(2);
    for s in [s_i2t, s_t2i] {
        let d = g.pick(s, &diagonal(n))?;
        let l = g.ln(d)?;
        terms.push(g.mean(l)?);
    }
    let both = g.add(terms[0], terms[1])?;
    g.scale(both, lit(-0.5))
}

/// Contrastive loss straight from features through log-softmax, which stays
/// finite when a diagonal probability underflows.
pub fn contrastive_loss_from_features<T: Scalar>(g: &mut Graph<'_, T>, f_v: Var, f_t: Var, tau: f64) -> Result<Var> {
    let logits = similarity_logits(g, f_v, f_t, tau)?;
    let n = check_square(g, "contrastive_loss", logits)?;
    let lt = g.transpose(logits)?;
    let mut terms = Vec::with_capacity(2);
    for s in [logits, lt] {
        let ls = g.log_softmax(s)?;
        let d = g.pick(ls, &diagonal(n))?;
        terms.push(g.mean(d)?);
    }
    let both = g.add(terms[0], terms[1])?;
    g.scale(both, lit(-0.5))
}

pub const ITM_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ItmLoss {
    pub value: f64,
    /// Some prediction was at 0 or 1 against its label and had to be clamped.
    pub clamped: bool,
}

/// Mean binary cross-entropy of match probabilities against labels.
pub fn itm_loss(predictions: &[(f64, bool)]) -> Result<ItmLoss> {
    if predictions.is_empty() {
        return Err(Error::invalid("itm_loss", "no predictions"));
    }
    let mut clamped = false;
    let mut total = 0.0;
    for &(p_hat, label) in predictions {
        if !(0.0..=1.0).contains(&p_hat) {
            return Err(Error::invalid("itm_loss", format!("probability {p_hat} outside [0, 1]")));
        }
        let q = if label { p_hat } else { 1.0 - p_hat };
        if q < ITM_CLAMP {
            clamped = true;
        }
        total -= q.max(ITM_CLAMP).ln();
    }
    Ok(ItmLoss { value: total / predictions.len() as f64, clamped })
}

/// [`itm_loss`] on `1 × 2` head logits inside the graph.
pub fn itm_loss_logits<T: Scalar>(g: &mut Graph<'_, T>, logits: &[Var], labels: &[bool]) -> Result<Var> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::shape("itm_loss", &[logits.len()], &[labels.len()]));
    }
    let all = g.concat_rows(logits)?;
    let ls = g.log_softmax(all)?;
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| 2 * i + l as usize).collect();
    let picked = g.pick(ls, &idx)?;
    let m = g.mean(picked)?;
    g.scale(m, lit(-1.0))
}

/// Mean cross-entropy over every masked position of every caption; zero when
/// nothing was masked.
pub fn mlm_loss<T: Scalar>(g: &mut Graph<'_, T>, parts: &[(Var, &MaskedText)]) -> Result<Var> {
    let mut picked = Vec::new();
    for &(logits, masked) in parts {
        if masked.positions.is_empty() {
            continue;
        }
        let &[len, vocab] = g.shape(logits) else {
            return Err(Error::invalid("mlm_loss", "logits must be a matrix"));
        };
        if len != masked.input.len() {
            return Err(Error::shape("mlm_loss", &[len, vocab], &[masked.input.len(), vocab]));
        }
        if let Some(&bad) = masked.originals.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::invalid("mlm_loss", format!("token {bad} outside vocabulary of {vocab}")));
        }
        let ls = g.log_softmax(logits)?;
        let idx: Vec<usize> = masked
            .positions
            .iter()
            .zip(&masked.originals)
            .map(|(&p, &t)| p * vocab + t as usize)
            .collect();
        let p = g.pick(ls, &idx)?;
        picked.push(g.reshape(p, &[idx.len(), 1])?);
    }
    if picked.is_empty() {
        return g.constant(Tensor::scalar(T::zero()));
    }
    let all = g.concat_rows(&picked)?;
    let m = g.mean(all)?;
    g.scale(m, lit(-1.0))
}

/// Graph handles of the three loss terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_cl: Var,
    pub l_itm: Var,
    pub l_mlm: Var,
    pub total: Var,
}

/// Builds every loss term of a batch in `g`.
pub fn total_loss<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    model: &CmpModel<T>,
    pool: &TrainPool<'_>,
    batch: &TrainingBatch,
) -> Result<(LossVars, LossReport)> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::invalid("total_loss", "a batch needs at least two pairs"));
    }
    let visual = |g: &mut Graph<'p, T>, pos: usize| {
        let r = pool.record(pos);
        model.encode_visual(g, &r.image, &r.pose)
    };
    let mut f_v = Vec::with_capacity(n);
    let mut f_t = Vec::with_capacity(n);
    let mut pooled_v = Vec::with_capacity(n);
    let mut pooled_t = Vec::with_capacity(n);
    for item in &batch.items {
        let v = visual(g, item.positive)?;
        let t = model.encode_text(g, &pool.record(item.positive).caption)?;
        pooled_v.push(model.pool_image(g, v)?);
        pooled_t.push(model.pool_text(g, t)?);
        f_v.push(v);
        f_t.push(t);
    }
    let pv = g.concat_rows(&pooled_v)?;
    let pt = g.concat_rows(&pooled_t)?;
    let l_cl = contrastive_loss_from_features(g, pv, pt, model.config.tau)?;

    let mut logits = Vec::new();
    let mut labels = Vec::new();
    let mut mlm_parts = Vec::with_capacity(n);
    for (i, item) in batch.items.iter().enumerate() {
        let mut score = |g: &mut Graph<'p, T>, v: Var, t: Var, label: bool| -> Result<()> {
            logits.push(model.cross_encode_features(g, v, t, false)?.itm_logits);
            labels.push(label);
            Ok(())
        };
        score(g, f_v[i], f_t[i], true)?;
        match item.counterpart {
            Some(c) => {
                let v_neg = visual(g, c)?;
                let t_neg = model.encode_text(g, &pool.record(c).caption)?;
                score(g, f_v[i], t_neg, false)?;
                score(g, v_neg, f_t[i], false)?;
                score(g, f_v[i], f_t[item.random_text], false)?;
            }
            None => {
                score(g, f_v[i], f_t[item.random_text], false)?;
                score(g, f_v[item.random_image], f_t[i], false)?;
            }
        }
        let t_masked = model.encode_text(g, &item.masked.input)?;
        let out = model.cross_encode_features(g, f_v[i], t_masked, true)?;
        mlm_parts.push((out.mlm_logits.expect("requested"), &item.masked));
    }
    let l_itm = itm_loss_logits(g, &logits, &labels)?;
    let l_mlm = mlm_loss(g, &mlm_parts)?;
    let s = g.add(l_cl, l_itm)?;
    let total = g.add(s, l_mlm)?;
    let value = |v: Var| g.scalar(v).to_f64().unwrap_or(f64::NAN);
    let report = LossReport::new(value(l_cl), value(l_itm), value(l_mlm));
    Ok((LossVars { l_cl, l_itm, l_mlm, total }, report))
}
