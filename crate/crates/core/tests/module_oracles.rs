//! Independent oracles for the probabilistic modules: every closed-form
//! result (soft comparison, time difference, order statistics) is checked
//! against brute-force enumeration, and full module chains are checked
//! against finite-difference gradients.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use modnet_core::annotate::AnnotatedPassage;
use modnet_core::dist::{PassageAttention, QuestionAttention};
use modnet_core::encoder::ContextualEncoding;
use modnet_core::gradcheck;
use modnet_core::modules::{count_kernel, extremum_distribution, ExecutionContext, ModuleParams};
use modnet_core::params::ParamStore;
use modnet_core::tensor::{Tape, Tensor};

const D: usize = 6;
const QLEN: usize = 4;

fn setup(tokens: &[&str], seed: u64) -> (ParamStore, ModuleParams, AnnotatedPassage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mp = ModuleParams::register(&mut store, D, &mut rng).unwrap();
    let passage = AnnotatedPassage::annotate(tokens.iter().map(|s| s.to_string()).collect());
    (store, mp, passage)
}

fn random_encoding(tape: &Tape, m: usize, seed: u64) -> ContextualEncoding {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mk = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
        tape.tensor(vec![r, c], (0..r * c).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap()
    };
    ContextualEncoding {
        q: mk(QLEN, D, &mut rng),
        p: mk(m, D, &mut rng),
        q_final: tape.vector(vec![0.0; D]).unwrap(),
    }
}

fn random_attention(tape: &Tape, m: usize, seed: u64) -> PassageAttention {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    PassageAttention::new(tape.vector(raw.iter().map(|v| v / s).collect()).unwrap()).unwrap()
}

const NUM_PASSAGE: [&str; 12] =
    ["he", "ran", "12", "yards", "then", "7", "yards", "then", "12", "more", "then", "30"];

const DATE_PASSAGE: [&str; 13] = [
    "war", "began", "in", "March", "1939", "and", "ended", "in", "May", "1945", "after", "1939",
    "riots",
];

#[test]
fn compare_numbers_matches_enumeration() {
    let (store, mp, passage) = setup(&NUM_PASSAGE, 1);
    let tape = Tape::new();
    let bound = store.bind(&tape).unwrap();
    let enc = random_encoding(&tape, passage.len(), 2);
    let ctx = ExecutionContext::new(&tape, &bound, &enc, &passage);
    let p1 = random_attention(&tape, passage.len(), 3);
    let p2 = random_attention(&tape, passage.len(), 4);

    let out = mp.compare(&ctx, &p1, &p2, true, false, false).unwrap();
    let n1 = out.left.data();
    let n2 = out.right.data();
    let values = &passage.unique_numbers;

    // brute-force p(N1 < N2) over all support pairs
    let mut p_lt = 0.0;
    let mut p_gt = 0.0;
    for (i, vi) in values.iter().enumerate() {
        for (j, vj) in values.iter().enumerate() {
            if vi < vj {
                p_lt += n1[i] * n2[j];
            }
            if vi > vj {
                p_gt += n1[i] * n2[j];
            }
        }
    }
    assert!((out.weight_left.scalar() - p_lt).abs() < 1e-12);
    assert!((out.weight_right.scalar() - p_gt).abs() < 1e-12);
    for k in 0..passage.len() {
        let expected = p_lt * p1.tensor().data()[k] + p_gt * p2.tensor().data()[k];
        assert!((out.out.tensor().data()[k] - expected).abs() < 1e-12);
    }
    // tie mass makes the output sub-stochastic, never super-stochastic
    assert!(out.out.mass() <= 1.0 + 1e-12);
    assert!((out.out.mass() - (p_lt + p_gt)).abs() < 1e-9);

    // the gt direction swaps the winner weights
    let gt = mp.compare(&ctx, &p1, &p2, false, false, false).unwrap();
    assert!((gt.weight_left.scalar() - p_gt).abs() < 1e-12);
    assert!((gt.weight_right.scalar() - p_lt).abs() < 1e-12);
}

#[test]
fn compare_dates_matches_enumeration() {
    let (store, mp, passage) = setup(&DATE_PASSAGE, 5);
    let u = passage.unique_dates.len();
    assert!(u >= 2);
    let tape = Tape::new();
    let bound = store.bind(&tape).unwrap();
    let enc = random_encoding(&tape, passage.len(), 6);
    let ctx = ExecutionContext::new(&tape, &bound, &enc, &passage);
    let p1 = random_attention(&tape, passage.len(), 7);
    let p2 = random_attention(&tape, passage.len(), 8);

    let out = mp.compare(&ctx, &p1, &p2, true, true, false).unwrap();
    let d1 = out.left.data();
    let d2 = out.right.data();
    let mut p_lt = 0.0;
    for i in 0..u {
        for j in 0..u {
            if passage.unique_dates[i] < passage.unique_dates[j] {
                p_lt += d1[i] * d2[j];
            }
        }
    }
    assert!((out.weight_left.scalar() - p_lt).abs() < 1e-12);
}

#[test]
fn time_diff_matches_joint_enumeration() {
    let (store, mp, passage) = setup(&DATE_PASSAGE, 9);
    let tape = Tape::new();
    let bound = store.bind(&tape).unwrap();
    let enc = random_encoding(&tape, passage.len(), 10);
    let ctx = ExecutionContext::new(&tape, &bound, &enc, &passage);
    let p1 = random_attention(&tape, passage.len(), 11);
    let p2 = random_attention(&tape, passage.len(), 12);

    let (td, d1, d2) = mp.time_diff(&ctx, &p1, &p2).unwrap();
    let support = passage.time_delta_support();
    let years: Vec<i32> = passage.unique_dates.iter().map(|d| d.0).collect();
    let mut expected = vec![0.0; support.values.len()];
    for i in 0..years.len() {
        for j in 0..years.len() {
            let k = support.index_of(years[i] - years[j]).unwrap();
            expected[k] += d1.data()[i] * d2.data()[j];
        }
    }
    for (a, b) in td.probs().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
    // the joint is fully partitioned by the delta support
    let mass: f64 = td.probs().iter().sum();
    let d1m: f64 = d1.data().iter().sum();
    let d2m: f64 = d2.data().iter().sum();
    assert!((mass - d1m * d2m).abs() < 1e-9);
}

/// Enumerate all `u^3` ordered draws of three i.i.d. samples.
fn enumerate_extremum(probs: &[f64], largest: bool) -> Vec<f64> {
    let u = probs.len();
    let mut out = vec![0.0; u];
    for a in 0..u {
        for b in 0..u {
            for c in 0..u {
                let idx = if largest {
                    a.max(b).max(c)
                } else {
                    a.min(b).min(c)
                };
                out[idx] += probs[a] * probs[b] * probs[c];
            }
        }
    }
    out
}

#[test]
fn extremum_distribution_matches_enumeration() {
    let tape = Tape::new();
    // uniform over {v1, v2}: p(max = v2) = 7/8, p(min = v2) = 1/8
    let uni = tape.vector(vec![0.5, 0.5]).unwrap();
    let mx = extremum_distribution(&tape, &uni, true).unwrap();
    assert!((mx.data()[0] - 0.125).abs() < 1e-12);
    assert!((mx.data()[1] - 0.875).abs() < 1e-12);
    let mn = extremum_distribution(&tape, &uni, false).unwrap();
    assert!((mn.data()[0] - 0.875).abs() < 1e-12);
    assert!((mn.data()[1] - 0.125).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..20 {
        let u = 1 + trial % 6;
        let raw: Vec<f64> = (0..u).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let n = tape.vector(probs.clone()).unwrap();
        for largest in [true, false] {
            let got = extremum_distribution(&tape, &n, largest).unwrap();
            let want = enumerate_extremum(&probs, largest);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "trial {trial} largest={largest}");
            }
        }
    }
}

#[test]
fn find_extreme_num_conserves_mass_and_prefers_extremes() {
    let (store, mp, passage) = setup(&NUM_PASSAGE, 14);
    let tape = Tape::new();
    let bound = store.bind(&tape).unwrap();
    let enc = random_encoding(&tape, passage.len(), 15);
    let ctx = ExecutionContext::new(&tape, &bound, &enc, &passage);
    let p = random_attention(&tape, passage.len(), 16);

    let (out_max, pre) = mp.find_extreme_num(&ctx, &p, true).unwrap();
    assert!((out_max.mass() - 1.0).abs() < 1e-9);
    let (out_min, _) = mp.find_extreme_num(&ctx, &p, false).unwrap();
    assert!((out_min.mass() - 1.0).abs() < 1e-9);

    // the downstream number distribution shifts toward the extremes
    let max_num = mp.find_num(&ctx, &out_max).unwrap();
    let min_num = mp.find_num(&ctx, &out_min).unwrap();
    let hi = passage.unique_numbers.len() - 1;
    assert!(max_num.probs()[hi] > pre.probs()[hi]);
    assert!(min_num.probs()[0] > pre.probs()[0]);
}

#[test]
fn count_kernel_matches_explicit_normalization() {
    let tape = Tape::new();
    for cv in [0.0, 2.3, 4.0, 9.7] {
        let c = count_kernel(&tape, &tape.scalar(cv).unwrap()).unwrap();
        let unnorm: Vec<f64> =
            (0..10).map(|k| (-(k as f64 - cv).powi(2) / 0.5).exp()).collect();
        let z: f64 = unnorm.iter().sum();
        for (a, b) in c.probs().iter().zip(&unnorm) {
            assert!((a - b / z).abs() < 1e-12);
        }
    }
}

/// Finite-difference check through a full module chain, treating the
/// encodings and the raw parameter vectors as differentiable inputs.
#[test]
fn module_chain_gradients_match_finite_differences() {
    let (store, mp, passage) = setup(&NUM_PASSAGE, 17);
    let m = passage.len();
    let shapes = vec![vec![QLEN, D], vec![m, D]];
    let err = gradcheck::max_rel_error(
        &shapes,
        |tape, inputs| {
            let bound = store.bind(tape)?;
            let enc = ContextualEncoding {
                q: inputs[0].clone(),
                p: inputs[1].clone(),
                q_final: tape.vector(vec![0.0; D])?,
            };
            let ctx = ExecutionContext::new(tape, &bound, &enc, &passage);
            let q = QuestionAttention::uniform(tape, QLEN)?;
            let found = mp.find(&ctx, &q)?;
            let filtered = mp.filter(&ctx, &q, &found)?;
            let (relocated, _) = mp.relocate(&ctx, &q, &filtered)?;
            let (extreme, _) = mp.find_extreme_num(&ctx, &relocated, true)?;
            let nums = mp.find_num(&ctx, &extreme)?;
            // mix into a scalar with fixed weights
            let w: Vec<f64> = (0..nums.tensor().len()).map(|i| 0.3 + 0.1 * i as f64).collect();
            let mix = tape.vector(w)?;
            tape.dot(nums.tensor(), &mix)
        },
        18,
    );
    assert!(err < 1e-3, "max rel err {err:.3e}");
}

#[test]
fn count_and_compare_gradients_match_finite_differences() {
    let (store, mp, passage) = setup(&NUM_PASSAGE, 19);
    let m = passage.len();
    let shapes = vec![vec![m], vec![m, D]];
    let err = gradcheck::max_rel_error(
        &shapes,
        |tape, inputs| {
            let bound = store.bind(tape)?;
            // squash the raw input into a positive sub-stochastic attention
            let pos = tape.sigmoid(&inputs[0])?;
            let p_att = PassageAttention::new(tape.scale(&pos, 1.0 / m as f64)?)?;
            let enc = ContextualEncoding {
                q: tape.tensor(vec![QLEN, D], vec![0.05; QLEN * D])?,
                p: inputs[1].clone(),
                q_final: tape.vector(vec![0.0; D])?,
            };
            let ctx = ExecutionContext::new(tape, &bound, &enc, &passage);
            let count = mp.count(&ctx, &p_att)?;
            let cmp = mp.compare(&ctx, &p_att, &p_att, true, false, false)?;
            let mix = tape.vector((0..10).map(|i| 0.2 + 0.05 * i as f64).collect())?;
            let a = tape.dot(count.tensor(), &mix)?;
            tape.add(&a, &tape.sum(cmp.out.tensor())?)
        },
        20,
    );
    assert!(err < 1e-3, "max rel err {err:.3e}");
}

/// Randomized mass-conservation sweep across the attention-to-attention
/// modules, varying passages, parameters, and input masses.
#[test]
fn mass_conservation_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..30 {
        let (store, mp, passage) = setup(&NUM_PASSAGE, 100 + trial);
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let enc = random_encoding(&tape, passage.len(), 200 + trial);
        let ctx = ExecutionContext::new(&tape, &bound, &enc, &passage);
        let scale: f64 = rng.gen_range(0.2..1.0);
        let base = random_attention(&tape, passage.len(), 300 + trial);
        let p = PassageAttention::new(tape.scale(base.tensor(), scale).unwrap()).unwrap();
        let q = QuestionAttention::uniform(&tape, QLEN).unwrap();

        let found = mp.find(&ctx, &q).unwrap();
        assert!((found.mass() - 1.0).abs() < 1e-9);
        let (rel, _) = mp.relocate(&ctx, &q, &p).unwrap();
        assert!((rel.mass() - scale).abs() < 1e-9);
        let nums = mp.find_num(&ctx, &p).unwrap();
        assert!((nums.probs().iter().sum::<f64>() - scale).abs() < 1e-9);
        let dates = mp.find_date(&ctx, &random_attention(&tape, passage.len(), 400 + trial));
        // this passage has no dates
        assert!(dates.is_err());
    }
}
