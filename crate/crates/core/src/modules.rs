//! The differentiable module library: grounding, filtering, relocation,
//! number/date extraction, counting, soft comparisons, extremum selection,
//! time differences, and span conversion.
//!
//! Every module is a pure function of (parameters, execution context) built
//! from tape ops, so uncertainty about intermediate decisions propagates and
//! the whole program stays differentiable.

use std::cell::RefCell;

use rand_chacha::ChaCha8Rng;

use crate::annotate::{AnnotatedPassage, TimeDeltaSupport};
use crate::dist::{
    aggregate_tokens_to_dates, aggregate_tokens_to_values, normalize, CountDist, DateDist,
    NumberDist, PassageAttention, QuestionAttention, SpanDist, TimeDeltaDist, COUNT_SUPPORT,
};
use crate::encoder::{BiGru, ContextualEncoding};
use crate::error::{ModelError, Result};
use crate::params::{BoundParams, Init, ParamStore};
use crate::tensor::{Tape, Tensor};

/// Gaussian kernel width for the count distribution.
pub const COUNT_VARIANCE: f64 = 0.5;
/// Sample-set size for the soft max/min distribution.
pub const EXTREMUM_SET_SIZE: i32 = 3;
/// Attention scaling applied before the count/span recurrent heads.
pub const ATTENTION_SCALES: [f64; 4] = [1.0, 2.0, 5.0, 10.0];

/// Scaled-attention GRU head shared by the count and span modules:
/// 2-layer bidirectional GRU (input 4, hidden 20 per direction) followed by a
/// single feed-forward layer.
#[derive(Clone, Debug)]
pub struct AttentionHead {
    prefix: String,
    gru: BiGru,
    out_dim: usize,
}

pub const HEAD_HIDDEN: usize = 20;

impl AttentionHead {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let gru = BiGru::register(store, prefix, ATTENTION_SCALES.len(), HEAD_HIDDEN, 2, rng)?;
        store.add(&format!("{prefix}.ff_w"), vec![2 * HEAD_HIDDEN, out_dim], Init::Xavier, rng)?;
        store.add(&format!("{prefix}.ff_b"), vec![out_dim], Init::Zeros, rng)?;
        Ok(AttentionHead { prefix: prefix.to_string(), gru, out_dim })
    }

    /// Per-token scores: `[m] -> [m, out_dim]`.
    pub fn forward(&self, tape: &Tape, bound: &BoundParams, p_att: &Tensor) -> Result<Tensor> {
        let cols: Vec<Tensor> = ATTENTION_SCALES
            .iter()
            .map(|s| tape.scale(p_att, *s))
            .collect::<Result<_>>()?;
        let scaled = tape.stack_cols(&cols)?;
        let (hidden, _) = self.gru.run(tape, bound, &scaled)?;
        let scores = tape.matmul(&hidden, bound.get(&format!("{}.ff_w", self.prefix))?)?;
        tape.add_to_rows(&scores, bound.get(&format!("{}.ff_b", self.prefix))?)
    }
}

/// All module parameters. Shapes follow the similarity forms
/// `w^T [a ; b ; a∘b]` (vectors of length 3d) and the bilinear token-to-value
/// maps (d x d).
#[derive(Clone, Debug)]
pub struct ModuleParams {
    pub d: usize,
    pub count_head: AttentionHead,
    pub span_head: AttentionHead,
}

impl ModuleParams {
    pub fn register(store: &mut ParamStore, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        store.add("mod.w_find", vec![3 * d], Init::Xavier, rng)?;
        store.add("mod.w_filter", vec![3 * d], Init::Xavier, rng)?;
        store.add("mod.w_relocate", vec![3 * d], Init::Xavier, rng)?;
        store.add("mod.w_num", vec![d, d], Init::Xavier, rng)?;
        store.add("mod.w_date", vec![d, d], Init::Xavier, rng)?;
        let count_head = AttentionHead::register(store, "count", 1, rng)?;
        let span_head = AttentionHead::register(store, "span", 2, rng)?;
        Ok(ModuleParams { d, count_head, span_head })
    }
}

/// Per-example execution state: encodings, passage supports, and the lazily
/// computed token-to-number / token-to-date attention maps (one computation
/// per passage, shared by every module in every candidate program).
pub struct ExecutionContext<'a, 't> {
    pub tape: &'t Tape,
    pub bound: &'a BoundParams<'t>,
    pub encoding: &'a ContextualEncoding,
    pub passage: &'a AnnotatedPassage,
    pub td_support: TimeDeltaSupport,
    a_num: RefCell<Option<Tensor>>,
    a_date: RefCell<Option<Tensor>>,
}

impl<'a, 't> ExecutionContext<'a, 't> {
    pub fn new(
        tape: &'t Tape,
        bound: &'a BoundParams<'t>,
        encoding: &'a ContextualEncoding,
        passage: &'a AnnotatedPassage,
    ) -> Self {
        ExecutionContext {
            tape,
            bound,
            encoding,
            passage,
            td_support: passage.time_delta_support(),
            a_num: RefCell::new(None),
            a_date: RefCell::new(None),
        }
    }

    pub fn passage_len(&self) -> usize {
        self.passage.len()
    }

    /// Representative token index of each number mention.
    pub fn number_token_indices(&self) -> Vec<usize> {
        self.passage.number_tokens.iter().map(|n| n.index).collect()
    }

    /// Representative token index of each date mention (span start).
    pub fn date_token_indices(&self) -> Vec<usize> {
        self.passage.date_tokens.iter().map(|d| d.start).collect()
    }

    fn bilinear_token_map(&self, weight: &str, indices: &[usize]) -> Result<Tensor> {
        let tape = self.tape;
        let p = &self.encoding.p;
        let w = self.bound.get(weight)?;
        let pw = tape.matmul(p, w)?;
        let targets = tape.gather_rows(p, indices)?;
        let sim = tape.matmul(&pw, &tape.transpose(&targets)?)?;
        tape.softmax_rows(&sim)
    }

    /// Paragraph token-to-number-token attention map, rows softmaxed.
    pub fn a_num(&self) -> Result<Tensor> {
        if self.passage.number_tokens.is_empty() {
            return Err(ModelError::UnsupportedProgram("passage has no number tokens".into()));
        }
        let mut cache = self.a_num.borrow_mut();
        if cache.is_none() {
            *cache = Some(self.bilinear_token_map("mod.w_num", &self.number_token_indices())?);
        }
        Ok(cache.as_ref().unwrap().clone())
    }

    /// Paragraph token-to-date-token attention map, rows softmaxed.
    pub fn a_date(&self) -> Result<Tensor> {
        if self.passage.date_tokens.is_empty() {
            return Err(ModelError::UnsupportedProgram("passage has no date tokens".into()));
        }
        let mut cache = self.a_date.borrow_mut();
        if cache.is_none() {
            *cache = Some(self.bilinear_token_map("mod.w_date", &self.date_token_indices())?);
        }
        Ok(cache.as_ref().unwrap().clone())
    }

    /// Expected question vector under an attention: `Q^T alpha`.
    pub fn question_vector(&self, q_att: &QuestionAttention) -> Result<Tensor> {
        let qt = self.tape.transpose(&self.encoding.q)?;
        self.tape.matvec(&qt, q_att.tensor())
    }
}

/// Similarity scores `S_ij = w^T [a_i ; b_j ; a_i∘b_j]` for all row pairs,
/// decomposed as `(A w1) + (B w2)^T + (A∘w3) B^T`.
fn pairwise_similarity(tape: &Tape, a: &Tensor, b: &Tensor, w: &Tensor, d: usize) -> Result<Tensor> {
    let w1 = tape.slice(w, 0, d)?;
    let w2 = tape.slice(w, d, d)?;
    let w3 = tape.slice(w, 2 * d, d)?;
    let u = tape.matvec(a, &w1)?;
    let v = tape.matvec(b, &w2)?;
    let cross = tape.matmul(&tape.mul_cols(a, &w3)?, &tape.transpose(b)?)?;
    tape.add_outer(&cross, &u, &v)
}

impl ModuleParams {
    /// Ground attended question tokens to similar passage tokens. Output is
    /// the expected passage attention, mass 1.
    pub fn find(&self, ctx: &ExecutionContext, q_att: &QuestionAttention) -> Result<PassageAttention> {
        let tape = ctx.tape;
        let w = ctx.bound.get("mod.w_find")?;
        let sim = pairwise_similarity(tape, &ctx.encoding.q, &ctx.encoding.p, w, self.d)?;
        let a = tape.softmax_rows(&sim)?;
        let out = tape.matvec(&tape.transpose(&a)?, q_att.tensor())?;
        PassageAttention::new(out)
    }

    /// Mask the input passage attention by a question-conditioned sigmoid
    /// gate and renormalize.
    pub fn filter(
        &self,
        ctx: &ExecutionContext,
        q_att: &QuestionAttention,
        p_att: &PassageAttention,
    ) -> Result<PassageAttention> {
        let tape = ctx.tape;
        let w = ctx.bound.get("mod.w_filter")?;
        let d = self.d;
        let w1 = tape.slice(w, 0, d)?;
        let w2 = tape.slice(w, d, d)?;
        let w3 = tape.slice(w, 2 * d, d)?;
        let q = ctx.question_vector(q_att)?;
        let bias_term = tape.dot(&w1, &q)?;
        let per_token = tape.matvec(&ctx.encoding.p, &tape.add(&w2, &tape.mul(&w3, &q)?)?)?;
        let scores = tape.add(&per_token, &tape.broadcast(&bias_term, per_token.len())?)?;
        let mask = tape.sigmoid(&scores)?;
        let masked = tape.mul(&mask, p_att.tensor())?;
        PassageAttention::new(normalize(tape, &masked, false)?)
    }

    /// Re-attend to the passage, shifting mass from event spans to the
    /// argument the question asks for. Also returns the paragraph-to-
    /// paragraph map `R` for the window auxiliary loss.
    pub fn relocate(
        &self,
        ctx: &ExecutionContext,
        q_att: &QuestionAttention,
        p_att: &PassageAttention,
    ) -> Result<(PassageAttention, Tensor)> {
        let tape = ctx.tape;
        let w = ctx.bound.get("mod.w_relocate")?;
        let q = ctx.question_vector(q_att)?;
        let shifted = tape.add_to_rows(&ctx.encoding.p, &q)?;
        let sim = pairwise_similarity(tape, &shifted, &ctx.encoding.p, w, self.d)?;
        let r = tape.softmax_rows(&sim)?;
        let out = tape.matvec(&tape.transpose(&r)?, p_att.tensor())?;
        Ok((PassageAttention::new(out)?, r))
    }

    /// Expected distribution over number tokens for a passage attention.
    pub fn token_number_dist(&self, ctx: &ExecutionContext, p_att: &PassageAttention) -> Result<Tensor> {
        let a = ctx.a_num()?;
        ctx.tape.matvec(&ctx.tape.transpose(&a)?, p_att.tensor())
    }

    pub fn find_num(&self, ctx: &ExecutionContext, p_att: &PassageAttention) -> Result<NumberDist> {
        let t = self.token_number_dist(ctx, p_att)?;
        aggregate_tokens_to_values(ctx.tape, &t, ctx.passage)
    }

    pub fn find_date(&self, ctx: &ExecutionContext, p_att: &PassageAttention) -> Result<DateDist> {
        let a = ctx.a_date()?;
        let t = ctx.tape.matvec(&ctx.tape.transpose(&a)?, p_att.tensor())?;
        aggregate_tokens_to_dates(ctx.tape, &t, ctx.passage)
    }

    /// Count attended spans: scaled-attention GRU scores summed into a soft
    /// count value, then a Gaussian kernel over the supported counts 0..=9.
    pub fn count(&self, ctx: &ExecutionContext, p_att: &PassageAttention) -> Result<CountDist> {
        let tape = ctx.tape;
        let scores = self.count_head.forward(tape, ctx.bound, p_att.tensor())?;
        let col = tape.row(&tape.transpose(&scores)?, 0)?;
        let soft = tape.sigmoid(&col)?;
        let c_v = tape.sum(&soft)?;
        count_kernel(tape, &c_v)
    }

    fn value_dist_for(
        &self,
        ctx: &ExecutionContext,
        p_att: &PassageAttention,
        dates: bool,
    ) -> Result<Tensor> {
        if dates {
            Ok(self.find_date(ctx, p_att)?.tensor().clone())
        } else {
            Ok(self.find_num(ctx, p_att)?.tensor().clone())
        }
    }

    /// Soft comparison of the values associated with two passage attentions.
    /// `less_than` selects the `lt` vs `gt` direction, `dates` the support.
    /// The output is the literal weighted sum of the inputs; tie mass makes
    /// it sub-stochastic unless `renormalize` is set.
    pub fn compare(
        &self,
        ctx: &ExecutionContext,
        p1: &PassageAttention,
        p2: &PassageAttention,
        less_than: bool,
        dates: bool,
        renormalize: bool,
    ) -> Result<CompareOutput> {
        let tape = ctx.tape;
        let n1 = self.value_dist_for(ctx, p1, dates)?;
        let n2 = self.value_dist_for(ctx, p2, dates)?;
        let strict_lt = if dates {
            strict_lt_matrix(&date_order_keys(ctx.passage))
        } else {
            strict_lt_matrix(&ctx.passage.unique_numbers)
        };
        let u = ctx_support_len(ctx, dates);
        let lt = tape.tensor(vec![u, u], strict_lt)?;
        // p(a wins) under the chosen direction, for each operand.
        let p_1_lt_2 = tape.dot(&n1, &tape.matvec(&lt, &n2)?)?;
        let p_2_lt_1 = tape.dot(&n2, &tape.matvec(&lt, &n1)?)?;
        let (w1, w2) = if less_than { (p_1_lt_2, p_2_lt_1) } else { (p_2_lt_1, p_1_lt_2) };
        let mut out = tape.add(
            &tape.mul_scalar(p1.tensor(), &w1)?,
            &tape.mul_scalar(p2.tensor(), &w2)?,
        )?;
        if renormalize {
            out = normalize(tape, &out, false)?;
        }
        Ok(CompareOutput {
            out: PassageAttention::new(out)?,
            left: n1,
            right: n2,
            weight_left: w1,
            weight_right: w2,
        })
    }

    /// Distribution over year differences of the dates associated with the
    /// two attentions, marginalizing the joint.
    pub fn time_diff(
        &self,
        ctx: &ExecutionContext,
        p1: &PassageAttention,
        p2: &PassageAttention,
    ) -> Result<(TimeDeltaDist, Tensor, Tensor)> {
        let tape = ctx.tape;
        let d1 = self.find_date(ctx, p1)?.tensor().clone();
        let d2 = self.find_date(ctx, p2)?.tensor().clone();
        let years: Vec<i32> = ctx.passage.unique_dates.iter().map(|d| d.0).collect();
        let joint = tape.outer(&d1, &d2)?;
        let u = years.len();
        let mut parts = Vec::with_capacity(ctx.td_support.values.len());
        for delta in &ctx.td_support.values {
            let mut mask = vec![0.0; u * u];
            for i in 0..u {
                for j in 0..u {
                    if years[i] - years[j] == *delta {
                        mask[i * u + j] = 1.0;
                    }
                }
            }
            let m = tape.tensor(vec![u, u], mask)?;
            let masked = tape.mul(&joint, &m)?;
            let s = tape.sum(&masked)?;
            parts.push(tape.broadcast(&s, 1)?);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let dist = TimeDeltaDist::new(tape.concat(&refs)?)?;
        Ok((dist, d1, d2))
    }

    /// Select the span associated with the largest (or smallest) number via
    /// the analytic order-statistic distribution over the value support.
    pub fn find_extreme_num(
        &self,
        ctx: &ExecutionContext,
        p_att: &PassageAttention,
        largest: bool,
    ) -> Result<(PassageAttention, NumberDist)> {
        let tape = ctx.tape;
        let t = self.token_number_dist(ctx, p_att)?;
        let value_dist = aggregate_tokens_to_values(tape, &t, ctx.passage)?;
        let n = value_dist.tensor();
        let u = n.len();
        let extreme = extremum_distribution(tape, n, largest)?;
        // Share each value's extremum mass among its tokens proportionally to
        // the token's share of the value mass, then push back to the passage.
        let ratio_val = tape.guarded_div(&extreme, n, 1e-12)?;
        let value_idx = ctx.passage.number_token_value_indices();
        let k = value_idx.len();
        let mut sel = vec![0.0; k * u];
        for (j, &vi) in value_idx.iter().enumerate() {
            sel[j * u + vi] = 1.0;
        }
        let sel = tape.tensor(vec![k, u], sel)?;
        let ratio_tok = tape.matvec(&sel, &ratio_val)?;
        let redistributed = tape.matvec(&ctx.a_num()?, &ratio_tok)?;
        let out = tape.mul(p_att.tensor(), &redistributed)?;
        Ok((PassageAttention::new(out)?, value_dist))
    }

    /// Convert a passage attention into start/end span probabilities.
    pub fn span(&self, ctx: &ExecutionContext, p_att: &PassageAttention) -> Result<SpanDist> {
        let tape = ctx.tape;
        let scores = self.span_head.forward(tape, ctx.bound, p_att.tensor())?;
        let cols = tape.transpose(&scores)?;
        let start = tape.softmax_1d(&tape.row(&cols, 0)?)?;
        let end = tape.softmax_1d(&tape.row(&cols, 1)?)?;
        SpanDist::new(start, end)
    }
}

/// Output of a comparison module: the weighted attention plus the two value
/// distributions and winner weights (for traces and supervision).
pub struct CompareOutput {
    pub out: PassageAttention,
    pub left: Tensor,
    pub right: Tensor,
    pub weight_left: Tensor,
    pub weight_right: Tensor,
}

fn ctx_support_len(ctx: &ExecutionContext, dates: bool) -> usize {
    if dates {
        ctx.passage.unique_dates.len()
    } else {
        ctx.passage.unique_numbers.len()
    }
}

/// Map unique dates to totally ordered keys (lexicographic on y, m, d).
fn date_order_keys(passage: &AnnotatedPassage) -> Vec<f64> {
    // unique_dates are sorted; the rank is a valid order key.
    (0..passage.unique_dates.len()).map(|i| i as f64).collect()
}

/// Indicator matrix `L_ij = 1` iff `v_i < v_j`, row value vs column value.
fn strict_lt_matrix<T: PartialOrd>(values: &[T]) -> Vec<f64> {
    let u = values.len();
    let mut m = vec![0.0; u * u];
    for i in 0..u {
        for j in 0..u {
            if values[i] < values[j] {
                m[i * u + j] = 1.0;
            }
        }
    }
    m
}

/// Distribution of the max (or min) of `EXTREMUM_SET_SIZE` independent draws
/// from a distribution over an ascending value support, via the CDF identity
/// `p(max = v_j) = F_j^n - F_{j-1}^n` (and its mirror for the min).
pub fn extremum_distribution(tape: &Tape, n: &Tensor, largest: bool) -> Result<Tensor> {
    let u = n.len();
    let cdf = tape.cumsum(n)?;
    // F_{j-1}: prefix shifted right by one.
    let zero = tape.vector(vec![0.0])?;
    let prev_cdf = if u > 1 {
        tape.concat(&[&zero, &tape.slice(&cdf, 0, u - 1)?])?
    } else {
        zero
    };
    if largest {
        tape.sub(&tape.powi(&cdf, EXTREMUM_SET_SIZE)?, &tape.powi(&prev_cdf, EXTREMUM_SET_SIZE)?)
    } else {
        // p(min = v_j) = (total - F_{j-1})^n - (total - F_j)^n
        let total = tape.sum(n)?;
        let tb = tape.broadcast(&total, u)?;
        let upper = tape.sub(&tb, &prev_cdf)?;
        let lower = tape.sub(&tb, &cdf)?;
        tape.sub(&tape.powi(&upper, EXTREMUM_SET_SIZE)?, &tape.powi(&lower, EXTREMUM_SET_SIZE)?)
    }
}

/// Categorical distribution over counts 0..=9 centered at the soft count
/// value: `p(c) ∝ exp(-(c - c_v)^2 / (2 v^2))`.
pub fn count_kernel(tape: &Tape, c_v: &Tensor) -> Result<CountDist> {
    let support = tape.vector((0..COUNT_SUPPORT).map(|c| c as f64).collect())?;
    let diff = tape.sub(&support, &tape.broadcast(c_v, COUNT_SUPPORT)?)?;
    let sq = tape.mul(&diff, &diff)?;
    let logits = tape.scale(&sq, -1.0 / (2.0 * COUNT_VARIANCE * COUNT_VARIANCE))?;
    CountDist::new(tape.softmax_1d(&logits)?)
}
