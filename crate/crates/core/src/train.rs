//! Objectives (answer marginal likelihood, decoupled supervision, window
//! auxiliary loss, question-attention and module-output losses), count-head
//! pretraining, the curriculum training loop, and evaluation metrics.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotate::AnnotatedPassage;
use crate::data::{Answer, Category, QAExample};
use crate::dist::QuestionAttention;
use crate::encoder::{Encoder, EncoderConfig, Vocab};
use crate::error::{ModelError, Result};
use crate::modules::{AttentionHead, ExecutionContext, ModuleParams};
use crate::params::{Adam, BoundParams, GradAccum, ParamStore};
use crate::program::{execute, AnswerValue, Decoder, Program};
use crate::tensor::{Tape, Tensor};

pub const LOG_FLOOR: f64 = 1e-20;

/// Encoder + module library + program decoder sharing one parameter store.
pub struct Model {
    pub encoder: Encoder,
    pub modules: ModuleParams,
    pub decoder: Decoder,
}

impl Model {
    pub fn register(
        store: &mut ParamStore,
        config: EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Model> {
        let d = config.d();
        let encoder = Encoder::register(store, config, rng)?;
        let modules = ModuleParams::register(store, d, rng)?;
        let decoder = Decoder::register(store, d, rng)?;
        Ok(Model { encoder, modules, decoder })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs restricted to heuristically-supervised non-count examples.
    pub curriculum_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative per-epoch learning-rate decay (1.0 = constant).
    pub lr_decay: f64,
    pub clip_norm: f64,
    pub beam_size: usize,
    /// Token window of the auxiliary loss.
    pub window: usize,
    pub seed: u64,
    /// Ablation: include the window auxiliary loss.
    pub use_aux_loss: bool,
    /// Ablation: include intermediate module-output supervision.
    pub use_module_output_loss: bool,
    /// Renormalize comparison outputs instead of leaving tie mass out.
    pub renormalize_compare: bool,
    pub aux_weight: f64,
    pub question_attention_weight: f64,
    pub module_output_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            curriculum_epochs: 5,
            batch_size: 8,
            learning_rate: 0.001,
            lr_decay: 1.0,
            clip_norm: 5.0,
            beam_size: 4,
            window: 10,
            seed: 0,
            use_aux_loss: true,
            use_module_output_loss: true,
            renormalize_compare: false,
            aux_weight: 1.0,
            question_attention_weight: 1.0,
            module_output_weight: 1.0,
        }
    }
}

/// Scalar view of one example's loss terms.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub main: f64,
    pub aux: f64,
    pub question_attention: f64,
    pub module_output: f64,
    pub total: f64,
    /// Gold answer unreachable by every candidate program (floored loss).
    pub flagged: bool,
}

/// Probability mass the predicted answer distribution assigns to the gold.
pub fn answer_likelihood(
    tape: &Tape,
    answer: &AnswerValue,
    gold: &Answer,
    ctx: &ExecutionContext,
) -> Result<Tensor> {
    let zero = tape.scalar(0.0)?;
    match (answer, gold) {
        (AnswerValue::Number(n), Answer::Number { value }) => {
            match ctx.passage.number_value_index(*value) {
                Some(i) => tape.element(n.tensor(), i),
                None => Ok(zero),
            }
        }
        (AnswerValue::Count(c), Answer::Count { value }) => {
            if *value < c.probs().len() {
                tape.element(c.tensor(), *value)
            } else {
                Ok(zero)
            }
        }
        (AnswerValue::TimeDelta(t), Answer::YearDiff { value }) => {
            let mut total = zero;
            let mut seen = Vec::new();
            for delta in [*value, -*value] {
                if seen.contains(&delta) {
                    continue;
                }
                seen.push(delta);
                if let Some(i) = ctx.td_support.index_of(delta) {
                    total = tape.add(&total, &tape.element(t.tensor(), i)?)?;
                }
            }
            Ok(total)
        }
        (AnswerValue::Span(s), Answer::Span { spans, .. }) => {
            let mut total = tape.scalar(0.0)?;
            for (a, b) in spans {
                if *a < s.start.len() && *b < s.end.len() {
                    let p = tape.mul(
                        &tape.element(&s.start, *a)?,
                        &tape.element(&s.end, *b)?,
                    )?;
                    total = tape.add(&total, &p)?;
                }
            }
            Ok(total)
        }
        _ => Ok(zero),
    }
}

/// `-Σ_i α*_i log α_i` over the supervised token set.
pub fn question_attention_loss(
    tape: &Tape,
    alpha: &QuestionAttention,
    hot: &[usize],
) -> Result<Tensor> {
    let mut loss = tape.scalar(0.0)?;
    for &i in hot {
        let p = tape.element(alpha.tensor(), i)?;
        loss = tape.sub(&loss, &tape.log_floored(&p, LOG_FLOOR)?)?;
    }
    Ok(loss)
}

/// `-Σ_j N*_j log N_j` with the multi-hot target given as support indices.
pub fn module_output_loss(tape: &Tape, dist: &Tensor, hot: &[usize]) -> Result<Tensor> {
    let mut loss = tape.scalar(0.0)?;
    for &j in hot {
        let p = tape.element(dist, j)?;
        loss = tape.sub(&loss, &tape.log_floored(&p, LOG_FLOOR)?)?;
    }
    Ok(loss)
}

fn in_window_loss(
    tape: &Tape,
    map: &Tensor,
    col_positions: &[(usize, usize)],
    window: usize,
) -> Result<Tensor> {
    let rows = map.shape()[0];
    let cols = map.shape()[1];
    debug_assert_eq!(cols, col_positions.len());
    let mut ind = vec![0.0; rows * cols];
    for i in 0..rows {
        for (j, &(lo, hi)) in col_positions.iter().enumerate() {
            let dist = if i < lo {
                lo - i
            } else if i > hi {
                i - hi
            } else {
                0
            };
            if dist <= window {
                ind[i * cols + j] = 1.0;
            }
        }
    }
    let ind = tape.tensor(vec![rows, cols], ind)?;
    let masses = tape.row_sums(&tape.mul(map, &ind)?)?;
    tape.neg(&tape.sum(&tape.log_floored(&masses, LOG_FLOOR)?)?)
}

/// Window auxiliary loss `H^n + H^d + H^r`: every row of the token-to-value
/// maps (and of executed relocate maps) should keep mass within ±window.
pub fn window_aux_loss(
    tape: &Tape,
    ctx: &ExecutionContext,
    relocate_maps: &[Tensor],
    window: usize,
) -> Result<Tensor> {
    let mut loss = tape.scalar(0.0)?;
    if !ctx.passage.number_tokens.is_empty() {
        let cols: Vec<(usize, usize)> =
            ctx.passage.number_tokens.iter().map(|n| (n.index, n.index)).collect();
        loss = tape.add(&loss, &in_window_loss(tape, &ctx.a_num()?, &cols, window)?)?;
    }
    if !ctx.passage.date_tokens.is_empty() {
        let cols: Vec<(usize, usize)> =
            ctx.passage.date_tokens.iter().map(|d| (d.start, d.end)).collect();
        loss = tape.add(&loss, &in_window_loss(tape, &ctx.a_date()?, &cols, window)?)?;
    }
    let token_cols: Vec<(usize, usize)> = (0..ctx.passage_len()).map(|i| (i, i)).collect();
    for r in relocate_maps {
        loss = tape.add(&loss, &in_window_loss(tape, r, &token_cols, window)?)?;
    }
    Ok(loss)
}

/// Pre-tokenized example with parsed supervision, reused across epochs.
pub struct PreparedExample {
    pub example: QAExample,
    pub q_ids: Vec<usize>,
    pub p_ids: Vec<usize>,
    pub passage: AnnotatedPassage,
    pub program: Option<Program>,
    pub question_attention: Option<Vec<Vec<usize>>>,
}

pub fn prepare(vocab: &Vocab, examples: &[QAExample]) -> Result<Vec<PreparedExample>> {
    examples
        .iter()
        .map(|e| {
            let program = e.program.as_deref().map(Program::parse).transpose()?;
            Ok(PreparedExample {
                q_ids: vocab.ids(&e.question_tokens()),
                p_ids: vocab.ids(&e.passage_tokens()),
                passage: AnnotatedPassage::annotate(e.passage_tokens()),
                program,
                question_attention: e.question_attention.clone(),
                example: e.clone(),
            })
        })
        .collect()
}

fn value_hot_indices(passage: &AnnotatedPassage, values: &[f64]) -> Vec<usize> {
    values.iter().filter_map(|v| passage.number_value_index(*v)).collect()
}

fn date_hot_indices(passage: &AnnotatedPassage, values: &[(i32, u32, u32)]) -> Vec<usize> {
    values.iter().filter_map(|v| passage.date_value_index(*v)).collect()
}

fn trace_dist<'t>(dists: &'t [(usize, Tensor)], node: usize) -> Option<&'t Tensor> {
    dists.iter().find(|(i, _)| *i == node).map(|(_, t)| t)
}

/// Forward pass and total loss for a single example on its own tape.
pub fn example_loss(
    tape: &Tape,
    bound: &BoundParams,
    model: &Model,
    prep: &PreparedExample,
    cfg: &TrainConfig,
) -> Result<(Tensor, LossBreakdown)> {
    let enc = model.encoder.encode(tape, bound, &prep.q_ids, &prep.p_ids, None)?;
    let ctx = ExecutionContext::new(tape, bound, &enc, &prep.passage);
    let mut breakdown = LossBreakdown::default();
    let mut relocate_maps: Vec<Tensor> = Vec::new();
    let mut loss;

    if let Some(program) = &prep.program {
        // decoupled supervision: -log p(z*|q) - log p(y*|z*)
        let (lp, side) =
            model.decoder.sequence_logprob(tape, bound, &enc, &program.linearize())?;
        let (answer, trace) =
            execute(program, &side, &ctx, &model.modules, cfg.renormalize_compare)?;
        let like = answer_likelihood(tape, &answer, &prep.example.answer, &ctx)?;
        breakdown.flagged = like.scalar() < 1e-12;
        loss = tape.sub(
            &tape.neg(&lp)?,
            &tape.log_floored(&like, LOG_FLOOR)?,
        )?;
        breakdown.main = loss.scalar();

        if let Some(hot_sets) = &prep.question_attention {
            let mut q_loss = tape.scalar(0.0)?;
            for (alpha, hot) in side.iter().zip(hot_sets) {
                if !hot.is_empty() {
                    q_loss = tape.add(&q_loss, &question_attention_loss(tape, alpha, hot)?)?;
                }
            }
            breakdown.question_attention = q_loss.scalar();
            loss = tape.add(&loss, &tape.scale(&q_loss, cfg.question_attention_weight)?)?;
        }

        if cfg.use_module_output_loss {
            let mut m_loss = tape.scalar(0.0)?;
            if let Some(sup) = &prep.example.number_supervision {
                for s in sup {
                    let hot = value_hot_indices(&prep.passage, &s.values);
                    if let (Some(dist), false) =
                        (trace_dist(&trace.number_dists, s.node), hot.is_empty())
                    {
                        m_loss = tape.add(&m_loss, &module_output_loss(tape, dist, &hot)?)?;
                    }
                }
            }
            if let Some(sup) = &prep.example.date_supervision {
                for s in sup {
                    let hot = date_hot_indices(&prep.passage, &s.values);
                    if let (Some(dist), false) =
                        (trace_dist(&trace.date_dists, s.node), hot.is_empty())
                    {
                        m_loss = tape.add(&m_loss, &module_output_loss(tape, dist, &hot)?)?;
                    }
                }
            }
            breakdown.module_output = m_loss.scalar();
            loss = tape.add(&loss, &tape.scale(&m_loss, cfg.module_output_weight)?)?;
        }
        relocate_maps.extend(trace.relocate_maps);
    } else {
        // marginal likelihood over the beam, renormalized within the beam
        let cands = model.decoder.decode_beam(tape, bound, &enc, cfg.beam_size)?;
        let mut logprobs: Vec<Tensor> = Vec::new();
        let mut likes: Vec<Tensor> = Vec::new();
        for cand in &cands {
            let (answer, trace) = match execute(
                &cand.program,
                &cand.side,
                &ctx,
                &model.modules,
                cfg.renormalize_compare,
            ) {
                Ok(out) => out,
                // program unsupported on this passage (e.g. no dates):
                // contributes zero likelihood
                Err(ModelError::UnsupportedProgram(_)) => {
                    logprobs.push(tape.broadcast(&cand.logprob, 1)?);
                    likes.push(tape.vector(vec![0.0])?);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let like = answer_likelihood(tape, &answer, &prep.example.answer, &ctx)?;
            logprobs.push(tape.broadcast(&cand.logprob, 1)?);
            likes.push(tape.broadcast(&like, 1)?);
            relocate_maps.extend(trace.relocate_maps);
        }
        let lp_refs: Vec<&Tensor> = logprobs.iter().collect();
        let like_refs: Vec<&Tensor> = likes.iter().collect();
        let beam_probs = tape.softmax_1d(&tape.concat(&lp_refs)?)?;
        let likelihoods = tape.concat(&like_refs)?;
        let marginal = tape.dot(&beam_probs, &likelihoods)?;
        breakdown.flagged = marginal.scalar() < 1e-12;
        loss = tape.neg(&tape.log_floored(&marginal, LOG_FLOOR)?)?;
        breakdown.main = loss.scalar();
    }

    if cfg.use_aux_loss {
        let aux = window_aux_loss(tape, &ctx, &relocate_maps, cfg.window)?;
        breakdown.aux = aux.scalar();
        loss = tape.add(&loss, &tape.scale(&aux, cfg.aux_weight)?)?;
    }
    breakdown.total = loss.scalar();
    Ok((loss, breakdown))
}

// ---------------------------------------------------------------------------
// Count pretraining
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub heldout_accuracy: f64,
}

/// Soft count value of the head on a raw attention vector.
pub fn count_value(
    tape: &Tape,
    bound: &BoundParams,
    head: &AttentionHead,
    attention: &[f64],
) -> Result<Tensor> {
    let att = tape.vector(attention.to_vec())?;
    let scores = head.forward(tape, bound, &att)?;
    let col = tape.row(&tape.transpose(&scores)?, 0)?;
    tape.sum(&tape.sigmoid(&col)?)
}

pub fn count_accuracy(
    store: &ParamStore,
    head: &AttentionHead,
    instances: &[crate::data::CountPretrainInstance],
) -> Result<f64> {
    let hits: usize = instances
        .par_iter()
        .map(|inst| {
            let tape = Tape::new();
            let bound = store.bind(&tape)?;
            let cv = count_value(&tape, &bound, head, &inst.attention)?.scalar();
            Ok(usize::from(cv.round() as i64 == inst.label as i64))
        })
        .collect::<Result<Vec<usize>>>()?
        .iter()
        .sum();
    Ok(hits as f64 / instances.len() as f64)
}

/// Minimize `(y - c_v)^2` on streamed synthetic instances. Stops early when
/// held-out rounded accuracy reaches `target_accuracy`.
pub fn pretrain_count(
    store: &mut ParamStore,
    head: &AttentionHead,
    seed: u64,
    max_steps: usize,
    batch_size: usize,
    learning_rate: f64,
    target_accuracy: f64,
) -> Result<PretrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heldout = crate::data::generate_count_pretraining(seed.wrapping_add(1), 200);
    let mut adam = Adam::new(learning_rate, 5.0);
    let mut initial_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    let mut steps = 0;
    while steps < max_steps {
        let batch: Vec<_> =
            (0..batch_size).map(|_| crate::data::generate_count_instance(&mut rng)).collect();
        let results: Vec<(GradAccum, f64)> = batch
            .par_iter()
            .map(|inst| {
                let tape = Tape::new();
                let bound = store.bind(&tape)?;
                let cv = count_value(&tape, &bound, head, &inst.attention)?;
                let diff = tape.add_const(&cv, -(inst.label as f64))?;
                let loss = tape.mul(&diff, &diff)?;
                let grads = tape.backward(&loss)?;
                let mut acc = GradAccum::new();
                bound.accumulate(&grads, &mut acc);
                Ok((acc, loss.scalar()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = GradAccum::new();
        let mut loss_sum = 0.0;
        for (acc, l) in &results {
            total.merge(acc);
            loss_sum += l;
        }
        total.scale(1.0 / batch_size as f64);
        if !total.is_finite() {
            return Err(ModelError::Numeric("count pretraining gradients non-finite".into()));
        }
        adam.step(store, &total);
        last_loss = loss_sum / batch_size as f64;
        if initial_loss.is_nan() {
            initial_loss = last_loss;
        }
        steps += batch_size;
        // periodic held-out check
        if steps % 2048 < batch_size {
            let acc = count_accuracy(store, head, &heldout)?;
            if acc >= target_accuracy {
                return Ok(PretrainReport {
                    steps,
                    final_loss: last_loss,
                    heldout_accuracy: acc,
                });
            }
            if steps > max_steps / 2 && last_loss > initial_loss {
                return Err(ModelError::Numeric(format!(
                    "count pretraining diverged: loss {last_loss:.3} vs initial {initial_loss:.3}"
                )));
            }
        }
    }
    let acc = count_accuracy(store, head, &heldout)?;
    Ok(PretrainReport { steps, final_loss: last_loss, heldout_accuracy: acc })
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub examples: usize,
    pub main_loss: f64,
    pub aux_loss: f64,
    pub question_attention_loss: f64,
    pub module_output_loss: f64,
    pub total_loss: f64,
    pub flagged: usize,
    pub eval: EvalReport,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_em: f64,
    pub overall_f1: f64,
    /// category name -> (EM, F1, n)
    pub per_category: BTreeMap<String, (f64, f64, usize)>,
}

/// Run the full curriculum training loop. Returns per-epoch metrics; on a
/// non-finite loss the parameters are rolled back to the last finished epoch
/// and an error is returned.
pub fn train(
    store: &mut ParamStore,
    model: &Model,
    cfg: &TrainConfig,
    train_set: &[PreparedExample],
    eval_set: &[PreparedExample],
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    let mut adam = Adam::new(cfg.learning_rate, cfg.clip_norm);
    let mut metrics = Vec::new();
    let mut last_good = store.clone();
    for epoch in 1..=cfg.epochs {
        adam.lr = cfg.learning_rate * cfg.lr_decay.powi(epoch as i32 - 1);
        let curriculum = epoch <= cfg.curriculum_epochs;
        let mut indices: Vec<usize> = (0..train_set.len())
            .filter(|&i| {
                let p = &train_set[i];
                !curriculum
                    || (p.program.is_some() && p.example.category != Category::Count)
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37));
        indices.shuffle(&mut rng);

        let mut sums = LossBreakdown::default();
        let mut flagged = 0usize;
        let mut count = 0usize;
        for batch in indices.chunks(cfg.batch_size) {
            let results: Vec<(GradAccum, LossBreakdown)> = batch
                .par_iter()
                .map(|&i| {
                    let tape = Tape::new();
                    let bound = store.bind(&tape)?;
                    let (loss, breakdown) =
                        example_loss(&tape, &bound, model, &train_set[i], cfg)?;
                    let grads = tape.backward(&loss)?;
                    let mut acc = GradAccum::new();
                    bound.accumulate(&grads, &mut acc);
                    Ok((acc, breakdown))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut total = GradAccum::new();
            for (acc, b) in &results {
                total.merge(acc);
                sums.main += b.main;
                sums.aux += b.aux;
                sums.question_attention += b.question_attention;
                sums.module_output += b.module_output;
                sums.total += b.total;
                flagged += usize::from(b.flagged);
            }
            count += batch.len();
            total.scale(1.0 / batch.len() as f64);
            if !total.is_finite() || !sums.total.is_finite() {
                *store = last_good;
                return Err(ModelError::Numeric(format!(
                    "non-finite loss or gradients in epoch {epoch}; rolled back"
                )));
            }
            adam.step(store, &total);
        }
        let n = count.max(1) as f64;
        let eval = evaluate(store, model, cfg, eval_set)?;
        let epoch_metrics = EpochMetrics {
            epoch,
            examples: count,
            main_loss: sums.main / n,
            aux_loss: sums.aux / n,
            question_attention_loss: sums.question_attention / n,
            module_output_loss: sums.module_output / n,
            total_loss: sums.total / n,
            flagged,
            eval,
        };
        on_epoch(&epoch_metrics)?;
        metrics.push(epoch_metrics);
        last_good = store.clone();
    }
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// Prediction and metrics
// ---------------------------------------------------------------------------

fn format_number(v: f64) -> String {
    if v.fract().abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v}")
    }
}

pub fn gold_text(answer: &Answer) -> String {
    match answer {
        Answer::Span { text, .. } => text.clone(),
        Answer::Number { value } => format_number(*value),
        Answer::Count { value } => value.to_string(),
        Answer::YearDiff { value } => value.to_string(),
    }
}

const MAX_SPAN_LEN: usize = 10;

/// Human-readable answer text used by predictions and traces.
pub fn answer_display(answer: &AnswerValue, prep: &PreparedExample) -> String {
    match answer {
        AnswerValue::Span(s) => {
            let start = s.start.data();
            let end = s.end.data();
            let mut best = (0usize, 0usize, -1.0f64);
            for a in 0..start.len() {
                for b in a..(a + MAX_SPAN_LEN).min(end.len()) {
                    let p = start[a] * end[b];
                    if p > best.2 {
                        best = (a, b, p);
                    }
                }
            }
            prep.example.passage_tokens()[best.0..=best.1].join(" ")
        }
        AnswerValue::Number(n) => format_number(prep.passage.unique_numbers[n.argmax()]),
        AnswerValue::Count(c) => c.argmax().to_string(),
        AnswerValue::TimeDelta(t) => {
            let support = prep.passage.time_delta_support();
            support.values[t.argmax()].abs().to_string()
        }
        AnswerValue::Date(d) => {
            let (y, m, day) = prep.passage.unique_dates[d.argmax()];
            format!("{y}-{m:02}-{day:02}")
        }
    }
}

/// Decode and execute the best feasible program; returns the predicted
/// answer text together with the executed candidates (best first).
pub fn predict(
    store: &ParamStore,
    model: &Model,
    cfg: &TrainConfig,
    prep: &PreparedExample,
) -> Result<(String, Vec<(Program, f64)>)> {
    let tape = Tape::new();
    let bound = store.bind(&tape)?;
    let enc = model.encoder.encode(&tape, &bound, &prep.q_ids, &prep.p_ids, None)?;
    let ctx = ExecutionContext::new(&tape, &bound, &enc, &prep.passage);
    let cands = model.decoder.decode_beam(&tape, &bound, &enc, cfg.beam_size)?;
    let programs: Vec<(Program, f64)> =
        cands.iter().map(|c| (c.program.clone(), c.score)).collect();
    for cand in &cands {
        match execute(&cand.program, &cand.side, &ctx, &model.modules, cfg.renormalize_compare) {
            Ok((answer, _)) => return Ok((answer_display(&answer, prep), programs)),
            Err(ModelError::UnsupportedProgram(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok((String::new(), programs))
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

fn normalize_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|t| t.chars().filter(|c| c.is_alphanumeric() || *c == '.').collect::<String>())
        .map(|t| t.trim_end_matches('.').to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Lowercase, strip punctuation and articles.
pub fn normalize_answer(text: &str) -> Vec<String> {
    normalize_tokens(text).into_iter().filter(|t| !ARTICLES.contains(&t.as_str())).collect()
}

pub fn exact_match(pred: &str, gold: &str) -> bool {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    if p.len() == 1 && g.len() == 1 {
        if let (Ok(a), Ok(b)) = (p[0].parse::<f64>(), g[0].parse::<f64>()) {
            return (a - b).abs() < 1e-9;
        }
    }
    p == g
}

/// Bag-of-token F1 over lowercased, punctuation-stripped tokens.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let p = normalize_tokens(pred);
    let g = normalize_tokens(gold);
    if p.is_empty() || g.is_empty() {
        return f64::from(p == g);
    }
    let mut overlap = 0usize;
    let mut remaining = g.clone();
    for t in &p {
        if let Some(pos) = remaining.iter().position(|x| x == t) {
            remaining.remove(pos);
            overlap += 1;
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn evaluate(
    store: &ParamStore,
    model: &Model,
    cfg: &TrainConfig,
    data: &[PreparedExample],
) -> Result<EvalReport> {
    let scored: Vec<(Category, f64, f64)> = data
        .par_iter()
        .map(|prep| {
            let (pred, _) = predict(store, model, cfg, prep)?;
            let gold = gold_text(&prep.example.answer);
            let em = f64::from(exact_match(&pred, &gold));
            let f1 = match prep.example.answer {
                Answer::Span { .. } => token_f1(&pred, &gold),
                _ => em,
            };
            Ok((prep.example.category, em, f1))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    let mut em_sum = 0.0;
    let mut f1_sum = 0.0;
    for (cat, em, f1) in &scored {
        let e = per.entry(cat.name().to_string()).or_insert((0.0, 0.0, 0));
        e.0 += em;
        e.1 += f1;
        e.2 += 1;
        em_sum += em;
        f1_sum += f1;
    }
    for v in per.values_mut() {
        v.0 /= v.2 as f64;
        v.1 /= v.2 as f64;
    }
    let n = scored.len().max(1) as f64;
    Ok(EvalReport {
        overall_em: em_sum / n,
        overall_f1: f1_sum / n,
        per_category: per,
    })
}
