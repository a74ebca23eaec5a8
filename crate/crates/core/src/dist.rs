//! Probabilistic value types: attentions over tokens and distributions over
//! unique passage values, plus the token-to-value aggregation they share.
//!
//! All of these wrap tape tensors so that downstream losses stay
//! differentiable. Constructors validate the distribution invariants;
//! `PassageAttention` alone may be sub-stochastic (mass below 1), which the
//! comparison modules produce when tie mass exists.

use crate::annotate::AnnotatedPassage;
use crate::error::{ModelError, Result};
use crate::tensor::{Tape, Tensor};

const SUM_TOL: f64 = 1e-6;

fn check_nonneg(data: &[f64], what: &str) -> Result<()> {
    if data.iter().any(|v| *v < 0.0) {
        return Err(ModelError::Contract(format!("{what} has a negative entry")));
    }
    Ok(())
}

fn check_sums_to_one(data: &[f64], what: &str) -> Result<()> {
    let s: f64 = data.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(ModelError::Contract(format!("{what} sums to {s}, expected 1")));
    }
    Ok(())
}

/// Soft subset of question tokens; sums to 1.
#[derive(Clone, Debug)]
pub struct QuestionAttention(Tensor);

impl QuestionAttention {
    pub fn new(t: Tensor) -> Result<Self> {
        check_nonneg(t.data(), "question attention")?;
        check_sums_to_one(t.data(), "question attention")?;
        Ok(QuestionAttention(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn uniform(tape: &Tape, n: usize) -> Result<Self> {
        let t = tape.vector(vec![1.0 / n as f64; n])?;
        QuestionAttention::new(t)
    }
}

/// Soft subset of passage tokens; mass at most 1, possibly less.
#[derive(Clone, Debug)]
pub struct PassageAttention(Tensor);

impl PassageAttention {
    pub fn new(t: Tensor) -> Result<Self> {
        check_nonneg(t.data(), "passage attention")?;
        let mass: f64 = t.data().iter().sum();
        if mass > 1.0 + SUM_TOL {
            return Err(ModelError::Contract(format!("passage attention mass {mass} exceeds 1")));
        }
        Ok(PassageAttention(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn mass(&self) -> f64 {
        self.0.data().iter().sum()
    }
}

/// Distribution over the unique numbers of a passage.
#[derive(Clone, Debug)]
pub struct NumberDist(Tensor);

/// Distribution over the unique dates of a passage.
#[derive(Clone, Debug)]
pub struct DateDist(Tensor);

/// Distribution over count values 0..=9.
#[derive(Clone, Debug)]
pub struct CountDist(Tensor);

/// Distribution over the passage's year-difference support.
#[derive(Clone, Debug)]
pub struct TimeDeltaDist(Tensor);

macro_rules! value_dist {
    ($ty:ident, $what:expr, $strict_sum:expr) => {
        impl $ty {
            /// Constructor validating non-negativity (and total mass where the
            /// type requires a proper distribution).
            pub fn new(t: Tensor) -> Result<Self> {
                check_nonneg(t.data(), $what)?;
                if $strict_sum {
                    check_sums_to_one(t.data(), $what)?;
                } else {
                    let s: f64 = t.data().iter().sum();
                    if s > 1.0 + SUM_TOL {
                        return Err(ModelError::Contract(format!("{} mass {s} exceeds 1", $what)));
                    }
                }
                Ok($ty(t))
            }

            pub fn tensor(&self) -> &Tensor {
                &self.0
            }

            pub fn probs(&self) -> &[f64] {
                self.0.data()
            }

            pub fn argmax(&self) -> usize {
                let mut best = 0;
                for (i, v) in self.0.data().iter().enumerate() {
                    if *v > self.0.data()[best] {
                        best = i;
                    }
                }
                best
            }
        }
    };
}

// Number/date/time-delta distributions inherit the mass of the passage
// attention that produced them, so they may be sub-stochastic too.
value_dist!(NumberDist, "number distribution", false);
value_dist!(DateDist, "date distribution", false);
value_dist!(CountDist, "count distribution", true);
value_dist!(TimeDeltaDist, "time-delta distribution", false);

pub const COUNT_SUPPORT: usize = 10;

/// Start/end probabilities over passage tokens.
#[derive(Clone, Debug)]
pub struct SpanDist {
    pub start: Tensor,
    pub end: Tensor,
}

impl SpanDist {
    pub fn new(start: Tensor, end: Tensor) -> Result<Self> {
        check_nonneg(start.data(), "span start")?;
        check_nonneg(end.data(), "span end")?;
        check_sums_to_one(start.data(), "span start")?;
        check_sums_to_one(end.data(), "span end")?;
        if start.shape() != end.shape() {
            return Err(ModelError::shape("span start/end length mismatch"));
        }
        Ok(SpanDist { start, end })
    }
}

/// Normalize a non-negative vector into a distribution.
///
/// In strict mode an all-zero input is a degenerate-distribution error. The
/// default adds 1e-12 uniformly before normalizing so gradients stay finite
/// mid-training.
pub fn normalize(tape: &Tape, t: &Tensor, strict: bool) -> Result<Tensor> {
    check_nonneg(t.data(), "normalize input")?;
    let raw_sum: f64 = t.data().iter().sum();
    if strict && raw_sum <= 0.0 {
        return Err(ModelError::Domain("normalize of an all-zero vector".into()));
    }
    let shifted = if raw_sum < 1e-9 { tape.add_const(t, 1e-12)? } else { t.clone() };
    let s = tape.sum(&shifted)?;
    let inv = tape.recip(&s)?;
    tape.mul_scalar(&shifted, &inv)
}

/// Aggregation matrix from number tokens to unique values: `[U, N_tokens]`
/// with a 1 where the token carries that value.
fn aggregation_matrix(token_value_indices: &[usize], num_values: usize) -> (Vec<usize>, Vec<f64>) {
    let k = token_value_indices.len();
    let mut m = vec![0.0; num_values * k];
    for (j, &vi) in token_value_indices.iter().enumerate() {
        m[vi * k + j] = 1.0;
    }
    (vec![num_values, k], m)
}

/// Sum token-level probabilities into value-level probabilities.
/// Measure-preserving: the output sums to the input sum.
pub fn aggregate_tokens_to_values(
    tape: &Tape,
    token_dist: &Tensor,
    passage: &AnnotatedPassage,
) -> Result<NumberDist> {
    let k = passage.number_tokens.len();
    if token_dist.len() != k {
        return Err(ModelError::Contract(format!(
            "token distribution length {} != {} number tokens",
            token_dist.len(),
            k
        )));
    }
    let (shape, m) = aggregation_matrix(&passage.number_token_value_indices(), passage.unique_numbers.len());
    let agg = tape.tensor(shape, m)?;
    NumberDist::new(tape.matvec(&agg, token_dist)?)
}

/// Date analogue of [`aggregate_tokens_to_values`].
pub fn aggregate_tokens_to_dates(
    tape: &Tape,
    token_dist: &Tensor,
    passage: &AnnotatedPassage,
) -> Result<DateDist> {
    let k = passage.date_tokens.len();
    if token_dist.len() != k {
        return Err(ModelError::Contract(format!(
            "token distribution length {} != {} date tokens",
            token_dist.len(),
            k
        )));
    }
    let (shape, m) = aggregation_matrix(&passage.date_token_value_indices(), passage.unique_dates.len());
    let agg = tape.tensor(shape, m)?;
    DateDist::new(tape.matvec(&agg, token_dist)?)
}
