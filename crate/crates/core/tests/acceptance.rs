//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line. Run with `cargo test --test acceptance -- --nocapture`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use modnet_core::annotate::AnnotatedPassage;
use modnet_core::data::{
    generate_corpus, generate_count_pretraining, Category, GenConfig, QAExample,
};
use modnet_core::dist::{PassageAttention, QuestionAttention};
use modnet_core::encoder::{ContextualEncoding, EncoderConfig, Vocab};
use modnet_core::modules::{extremum_distribution, ExecutionContext, ModuleParams};
use modnet_core::params::{GradAccum, ParamStore};
use modnet_core::program::Program;
use modnet_core::tensor::Tape;
use modnet_core::train::{
    count_accuracy, evaluate, example_loss, prepare, pretrain_count, train, Model,
    PreparedExample, TrainConfig,
};

fn report(id: usize, name: &str, ok: bool) {
    println!("criterion {id} ({name}): {}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {id} ({name}) failed");
}

const MONTHS: [&str; 12] = [
    "January", "February", "March", "April", "May", "June", "July", "August", "September",
    "October", "November", "December",
];

fn numeric_passage(rng: &mut ChaCha8Rng, k: usize) -> AnnotatedPassage {
    let mut values: Vec<i64> = Vec::new();
    while values.len() < k {
        let v = rng.gen_range(1..1000);
        if !values.contains(&v) {
            values.push(v);
        }
    }
    let mut tokens = Vec::new();
    for v in &values {
        tokens.push("item".to_string());
        tokens.push(v.to_string());
        tokens.push("units".to_string());
    }
    AnnotatedPassage::annotate(tokens)
}

fn date_passage(rng: &mut ChaCha8Rng, k: usize) -> AnnotatedPassage {
    let mut years: Vec<i32> = Vec::new();
    while years.len() < k {
        let y = rng.gen_range(1900..2000);
        if !years.contains(&y) {
            years.push(y);
        }
    }
    let mut tokens = Vec::new();
    for y in &years {
        tokens.push("in".to_string());
        tokens.push(MONTHS[rng.gen_range(0..12)].to_string());
        tokens.push(y.to_string());
        tokens.push("something".to_string());
        tokens.push("occurred".to_string());
        tokens.push(".".to_string());
    }
    AnnotatedPassage::annotate(tokens)
}

fn random_attention(tape: &Tape, rng: &mut ChaCha8Rng, m: usize) -> PassageAttention {
    let mut v: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() + 1e-3).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    PassageAttention::new(tape.vector(v).unwrap()).unwrap()
}

fn synth_encoding(tape: &Tape, rng: &mut ChaCha8Rng, m: usize, qlen: usize, d: usize) -> ContextualEncoding {
    let mut rand_mat = |rows: usize| {
        let data: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-0.5..0.5)).collect();
        tape.tensor(vec![rows, d], data).unwrap()
    };
    let q = rand_mat(qlen);
    let p = rand_mat(m);
    let q_final_data: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect();
    ContextualEncoding { q, p, q_final: tape.vector(q_final_data).unwrap() }
}

/// Exhaustive p(sample of left < sample of right) over two value supports.
fn enum_less_than(left: &[f64], right: &[f64], keys: &[f64]) -> f64 {
    let mut p = 0.0;
    for (i, a) in left.iter().enumerate() {
        for (j, b) in right.iter().enumerate() {
            if keys[i] < keys[j] {
                p += a * b;
            }
        }
    }
    p
}

const D: usize = 10;
const QLEN: usize = 5;

#[test]
fn criterion_1_symbolic_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut store = ParamStore::new();
    let mp = ModuleParams::register(&mut store, D, &mut rng).unwrap();
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let dates = trial % 2 == 1;
        let k = 1 + (trial % 6);
        let passage = if dates {
            date_passage(&mut rng, k)
        } else {
            numeric_passage(&mut rng, k)
        };
        let m = passage.tokens.len();
        let enc = synth_encoding(&tape, &mut rng, m, QLEN, D);
        let ctx = ExecutionContext::new(&tape, &bound, &enc, &passage);
        let p1 = random_attention(&tape, &mut rng, m);
        let p2 = random_attention(&tape, &mut rng, m);

        let cmp = mp.compare(&ctx, &p1, &p2, true, dates, false).unwrap();
        let left = cmp.left.data().to_vec();
        let right = cmp.right.data().to_vec();
        // oracle keys: numbers order by value, dates by (y, m, d) rank
        let keys: Vec<f64> = if dates {
            let mut sorted = passage.unique_dates.clone();
            sorted.sort();
            passage
                .unique_dates
                .iter()
                .map(|d| sorted.iter().position(|x| x == d).unwrap() as f64)
                .collect()
        } else {
            passage.unique_numbers.clone()
        };
        let p_lt = enum_less_than(&left, &right, &keys);
        let p_gt = enum_less_than(&right, &left, &keys);
        worst = worst.max((cmp.weight_left.scalar() - p_lt).abs());
        worst = worst.max((cmp.weight_right.scalar() - p_gt).abs());
        let out = cmp.out.tensor().data();
        for i in 0..m {
            let expect = p_lt * p1.tensor().data()[i] + p_gt * p2.tensor().data()[i];
            worst = worst.max((out[i] - expect).abs());
        }

        if dates {
            // year-difference distribution vs joint enumeration
            let (td, d1, d2) = mp.time_diff(&ctx, &p1, &p2).unwrap();
            let years: Vec<i32> = passage.unique_dates.iter().map(|d| d.0).collect();
            let support = passage.time_delta_support();
            let mut expect = vec![0.0; support.values.len()];
            for (i, a) in d1.data().iter().enumerate() {
                for (j, b) in d2.data().iter().enumerate() {
                    let delta = years[i] - years[j];
                    expect[support.index_of(delta).unwrap()] += a * b;
                }
            }
            for (got, want) in td.probs().iter().zip(&expect) {
                worst = worst.max((got - want).abs());
            }
        } else {
            // order statistics of 3 i.i.d. draws vs explicit enumeration
            let (_, pre) = mp.find_extreme_num(&ctx, &p1, trial % 4 < 2).unwrap();
            let probs = pre.probs().to_vec();
            for largest in [true, false] {
                let got = extremum_distribution(&tape, pre.tensor(), largest).unwrap();
                let u = probs.len();
                let mut expect = vec![0.0; u];
                for a in 0..u {
                    for b in 0..u {
                        for c in 0..u {
                            let vals = [passage.unique_numbers[a], passage.unique_numbers[b], passage.unique_numbers[c]];
                            let pick = if largest {
                                vals.iter().cloned().fold(f64::MIN, f64::max)
                            } else {
                                vals.iter().cloned().fold(f64::MAX, f64::min)
                            };
                            let j = passage.unique_numbers.iter().position(|v| *v == pick).unwrap();
                            expect[j] += probs[a] * probs[b] * probs[c];
                        }
                    }
                }
                for (g, w) in got.data().iter().zip(&expect) {
                    worst = worst.max((g - w).abs());
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = worst <= 1e-12 && elapsed.as_secs_f64() < 10.0;
    println!("  max abs deviation {worst:.2e}, elapsed {:.2}s", elapsed.as_secs_f64());
    report(1, "symbolic-oracle equivalence", ok);
}

fn tiny_model(
    seed: u64,
    corpus: &[QAExample],
) -> (ParamStore, Model, Vocab, Vec<PreparedExample>) {
    let tokens: Vec<String> = corpus
        .iter()
        .flat_map(|e| e.question_tokens().into_iter().chain(e.passage_tokens()))
        .collect();
    let vocab = Vocab::build(tokens.iter().map(String::as_str));
    let cfg = EncoderConfig {
        vocab_size: vocab.len(),
        embed_dim: 12,
        hidden_dim: 8,
        num_layers: 1,
        dropout: 0.0,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::register(&mut store, cfg, &mut rng).unwrap();
    let prepared = prepare(&vocab, corpus).unwrap();
    (store, model, vocab, prepared)
}

#[test]
fn criterion_2_gradient_suite() {
    let start = Instant::now();
    let mut worst = 0.0f64;

    // (a) chain touching every module, differentiated w.r.t. module params
    {
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        let mut store = ParamStore::new();
        let mp = ModuleParams::register(&mut store, D, &mut rng).unwrap();
        let mut tokens = Vec::new();
        for (i, v) in [("first", 12), ("second", 7), ("third", 93)] {
            tokens.extend(["in", MONTHS[i.len() % 12], &(1900 + v).to_string(), i, "had", &v.to_string(), "points", "."].map(str::to_string));
        }
        let passage = AnnotatedPassage::annotate(tokens);
        let m = passage.tokens.len();
        let chain = |store: &ParamStore| -> f64 {
            let tape = Tape::new();
            let bound = store.bind(&tape).unwrap();
            let mut crng = ChaCha8Rng::seed_from_u64(7);
            let enc = synth_encoding(&tape, &mut crng, m, QLEN, D);
            let ctx = ExecutionContext::new(&tape, &bound, &enc, &passage);
            let q = QuestionAttention::uniform(&tape, QLEN).unwrap();
            let found = mp.find(&ctx, &q).unwrap();
            let filtered = mp.filter(&ctx, &q, &found).unwrap();
            let (reloc, _) = mp.relocate(&ctx, &q, &filtered).unwrap();
            let (ext_max, _) = mp.find_extreme_num(&ctx, &found, true).unwrap();
            let (ext_min, _) = mp.find_extreme_num(&ctx, &found, false).unwrap();
            let n = mp.find_num(&ctx, &ext_max).unwrap();
            let d = mp.find_date(&ctx, &found).unwrap();
            let c = mp.count(&ctx, &filtered).unwrap();
            let cmp_n = mp.compare(&ctx, &found, &reloc, true, false, false).unwrap();
            let cmp_d = mp.compare(&ctx, &found, &reloc, false, true, false).unwrap();
            let (td, _, _) = mp.time_diff(&ctx, &found, &reloc).unwrap();
            let sp = mp.span(&ctx, &ext_min).unwrap();
            let mut loss = tape.element(n.tensor(), 0).unwrap();
            for t in [
                d.tensor(), c.tensor(), cmp_n.out.tensor(), cmp_d.out.tensor(), td.tensor(),
                &sp.start, &sp.end,
            ] {
                loss = tape.add(&loss, &tape.element(t, 0).unwrap()).unwrap();
            }
            loss.scalar()
        };
        let analytic = {
            let tape = Tape::new();
            let bound = store.bind(&tape).unwrap();
            let mut crng = ChaCha8Rng::seed_from_u64(7);
            let enc = synth_encoding(&tape, &mut crng, m, QLEN, D);
            let ctx = ExecutionContext::new(&tape, &bound, &enc, &passage);
            let q = QuestionAttention::uniform(&tape, QLEN).unwrap();
            let found = mp.find(&ctx, &q).unwrap();
            let filtered = mp.filter(&ctx, &q, &found).unwrap();
            let (reloc, _) = mp.relocate(&ctx, &q, &filtered).unwrap();
            let (ext_max, _) = mp.find_extreme_num(&ctx, &found, true).unwrap();
            let (ext_min, _) = mp.find_extreme_num(&ctx, &found, false).unwrap();
            let n = mp.find_num(&ctx, &ext_max).unwrap();
            let d = mp.find_date(&ctx, &found).unwrap();
            let c = mp.count(&ctx, &filtered).unwrap();
            let cmp_n = mp.compare(&ctx, &found, &reloc, true, false, false).unwrap();
            let cmp_d = mp.compare(&ctx, &found, &reloc, false, true, false).unwrap();
            let (td, _, _) = mp.time_diff(&ctx, &found, &reloc).unwrap();
            let sp = mp.span(&ctx, &ext_min).unwrap();
            let mut loss = tape.element(n.tensor(), 0).unwrap();
            for t in [
                d.tensor(), c.tensor(), cmp_n.out.tensor(), cmp_d.out.tensor(), td.tensor(),
                &sp.start, &sp.end,
            ] {
                loss = tape.add(&loss, &tape.element(t, 0).unwrap()).unwrap();
            }
            let grads = tape.backward(&loss).unwrap();
            let mut acc = GradAccum::new();
            bound.accumulate(&grads, &mut acc);
            acc
        };
        worst = worst.max(fd_check(&mut store, &analytic, 40, 303, |s| chain(s)));
    }

    // (b) every loss term through a supervised and a marginal example
    {
        let gen = GenConfig { size: 24, seed: 5, ..GenConfig::default() };
        let corpus = generate_corpus(&gen).unwrap();
        let (mut store, model, _vocab, prepared) = tiny_model(17, &corpus);
        let cfg = TrainConfig::default();
        let supervised = prepared.iter().position(|p| p.program.is_some()).unwrap();
        let marginal = prepared.iter().position(|p| p.program.is_none()).unwrap();
        let idx = [supervised, marginal];
        let loss_of = |s: &ParamStore| -> f64 {
            idx.iter()
                .map(|&i| {
                    let tape = Tape::new();
                    let bound = s.bind(&tape).unwrap();
                    example_loss(&tape, &bound, &model, &prepared[i], &cfg).unwrap().0.scalar()
                })
                .sum()
        };
        let analytic = {
            let mut acc = GradAccum::new();
            for &i in &idx {
                let tape = Tape::new();
                let bound = store.bind(&tape).unwrap();
                let (loss, _) = example_loss(&tape, &bound, &model, &prepared[i], &cfg).unwrap();
                let grads = tape.backward(&loss).unwrap();
                bound.accumulate(&grads, &mut acc);
            }
            acc
        };
        worst = worst.max(fd_check(&mut store, &analytic, 40, 404, loss_of));
    }

    let elapsed = start.elapsed();
    let ok = worst < 1e-3 && elapsed.as_secs_f64() < 120.0;
    println!("  worst relative error {worst:.2e}, elapsed {:.1}s", elapsed.as_secs_f64());
    report(2, "finite-difference gradient suite", ok);
}

/// Central-difference check of sampled coordinates; returns the worst
/// relative error.
fn fd_check(
    store: &mut ParamStore,
    analytic: &GradAccum,
    coords: usize,
    seed: u64,
    f: impl Fn(&ParamStore) -> f64,
) -> f64 {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = Vec::new();
    for name in &names {
        for i in 0..store.get(name).unwrap().numel() {
            picks.push((name.clone(), i));
        }
    }
    picks.shuffle(&mut rng);
    picks.truncate(coords);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (name, i) in &picks {
        let numel = store.get(name).unwrap().numel();
        let mut delta = vec![0.0; numel];
        delta[*i] = h;
        store.apply_update(name, &delta);
        let up = f(store);
        delta[*i] = -2.0 * h;
        store.apply_update(name, &delta);
        let down = f(store);
        delta[*i] = h;
        store.apply_update(name, &delta);
        let fd = (up - down) / (2.0 * h);
        let an = analytic.get(name).map_or(0.0, |g| g[*i]);
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1.0));
    }
    worst
}

#[test]
fn criterion_3_mass_and_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut store = ParamStore::new();
    let mp = ModuleParams::register(&mut store, D, &mut rng).unwrap();
    let tol = 1e-9;
    let mut failures = 0usize;
    for trial in 0..1000 {
        let tape = Tape::new();
        let bound = store.bind(&tape).unwrap();
        let k = 2 + trial % 4;
        let passage = if trial % 3 == 0 {
            date_passage(&mut rng, k)
        } else {
            numeric_passage(&mut rng, k)
        };
        let m = passage.tokens.len();
        let enc = synth_encoding(&tape, &mut rng, m, QLEN, D);
        let ctx = ExecutionContext::new(&tape, &bound, &enc, &passage);
        let q = QuestionAttention::uniform(&tape, QLEN).unwrap();
        let p1 = random_attention(&tape, &mut rng, m);

        let nonneg = |v: &[f64]| v.iter().all(|x| *x >= -tol);
        let mass = |v: &[f64]| v.iter().sum::<f64>();
        let mut ok = true;

        let found = mp.find(&ctx, &q).unwrap();
        ok &= nonneg(found.tensor().data()) && (found.mass() - 1.0).abs() < tol;
        let filtered = mp.filter(&ctx, &q, &found).unwrap();
        ok &= nonneg(filtered.tensor().data()) && filtered.mass() <= 1.0 + tol;
        let (reloc, r_map) = mp.relocate(&ctx, &q, &p1).unwrap();
        ok &= nonneg(reloc.tensor().data()) && reloc.mass() <= p1.mass() + tol;
        ok &= nonneg(r_map.data());

        if trial % 3 == 0 {
            let d = mp.find_date(&ctx, &p1).unwrap();
            ok &= nonneg(d.probs()) && (mass(d.probs()) - p1.mass()).abs() < tol;
            let (td, d1, d2) = mp.time_diff(&ctx, &p1, &found).unwrap();
            ok &= nonneg(td.probs());
            ok &= (mass(td.probs()) - mass(d1.data()) * mass(d2.data())).abs() < tol;
            let cmp = mp.compare(&ctx, &p1, &found, true, true, false).unwrap();
            ok &= nonneg(cmp.out.tensor().data()) && cmp.out.mass() <= 1.0 + tol;
        } else {
            let n = mp.find_num(&ctx, &p1).unwrap();
            ok &= nonneg(n.probs()) && (mass(n.probs()) - p1.mass()).abs() < tol;
            for largest in [true, false] {
                let (att, pre) = mp.find_extreme_num(&ctx, &p1, largest).unwrap();
                ok &= nonneg(att.tensor().data());
                // extremum redistribution conserves the attended mass
                ok &= (att.mass() - mass(pre.probs())).abs() < 1e-6;
            }
            let cmp = mp.compare(&ctx, &p1, &found, false, false, false).unwrap();
            ok &= nonneg(cmp.out.tensor().data()) && cmp.out.mass() <= 1.0 + tol;
            // sub-stochastic by exactly the tie mass
            let expect_mass =
                cmp.weight_left.scalar() + cmp.weight_right.scalar();
            ok &= (cmp.out.mass() - expect_mass).abs() < tol;
        }
        let c = mp.count(&ctx, &p1).unwrap();
        ok &= nonneg(c.probs()) && (mass(c.probs()) - 1.0).abs() < tol;
        let sp = mp.span(&ctx, &p1).unwrap();
        ok &= (mass(sp.start.data()) - 1.0).abs() < tol && (mass(sp.end.data()) - 1.0).abs() < tol;

        if !ok {
            failures += 1;
        }
    }
    println!("  {failures} of 1000 randomized passes violated an invariant");
    report(3, "mass/normalization suite", failures == 0);
}

#[test]
fn criterion_4_grammar_soundness() {
    // decode from random parameters across seeds, then from briefly trained
    // parameters, and type-check every candidate
    let gen = GenConfig { size: 60, seed: 44, ..GenConfig::default() };
    let corpus = generate_corpus(&gen).unwrap();
    let mut programs = 0usize;
    let mut sound = 0usize;

    for seed in 0..4u64 {
        let (mut store, model, _vocab, prepared) = tiny_model(seed, &corpus);
        if seed == 3 {
            // trained parameters
            let cfg = TrainConfig { epochs: 2, curriculum_epochs: 2, seed, ..TrainConfig::default() };
            train(&mut store, &model, &cfg, &prepared, &[], |_| Ok(())).unwrap();
        }
        for p in &prepared {
            let tape = Tape::new();
            let bound = store.bind(&tape).unwrap();
            let enc = model.encoder.encode(&tape, &bound, &p.q_ids, &p.p_ids, None).unwrap();
            let cands = model.decoder.decode_beam(&tape, &bound, &enc, 5).unwrap();
            for c in &cands {
                programs += 1;
                let round_trip = Program::parse(&c.program.to_text()).unwrap();
                if c.program.type_check().is_ok() && round_trip.to_text() == c.program.to_text() {
                    sound += 1;
                }
            }
            if programs >= 1000 {
                break;
            }
        }
    }

    // every heuristic supervision pattern in a generated corpus parses and
    // type-checks, and all six categories are represented
    let gen = GenConfig { size: 300, seed: 45, gold_plan: true, ..GenConfig::default() };
    let sup_corpus = generate_corpus(&gen).unwrap();
    let mut categories_seen = std::collections::BTreeSet::new();
    let mut patterns_ok = true;
    for e in &sup_corpus {
        let text = e.program.as_ref().expect("gold-plan corpus is fully supervised");
        let prog = Program::parse(text).unwrap();
        patterns_ok &= prog.type_check().is_ok();
        categories_seen.insert(e.category);
    }
    let all_cats = categories_seen.len() == 6;

    println!("  {sound}/{programs} decoded programs sound; heuristic categories covered: {categories_seen:?}");
    report(
        4,
        "grammar soundness",
        programs >= 1000 && sound == programs && patterns_ok && all_cats,
    );
}

#[test]
fn criterion_5_count_pretraining() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut store = ParamStore::new();
    let mp = ModuleParams::register(&mut store, D, &mut rng).unwrap();
    let report_out = pretrain_count(&mut store, &mp.count_head, 55, 50_000, 16, 0.01, 0.93)
        .expect("count pretraining diverged");
    let heldout = generate_count_pretraining(5678, 2000);
    let acc = count_accuracy(&store, &mp.count_head, &heldout).unwrap();
    let elapsed = start.elapsed();
    println!(
        "  {} instances, held-out accuracy {acc:.3}, elapsed {:.0}s",
        report_out.steps,
        elapsed.as_secs_f64()
    );
    let ok = acc >= 0.90 && report_out.steps <= 50_000 && elapsed.as_secs_f64() < 1800.0;
    report(5, "count pretraining accuracy", ok);
}

fn end_to_end_setup() -> (Vec<QAExample>, Vec<QAExample>) {
    let train_gen = GenConfig { size: 2000, seed: 600, ..GenConfig::default() };
    let test_gen = GenConfig { size: 400, seed: 601, ..GenConfig::default() };
    (generate_corpus(&train_gen).unwrap(), generate_corpus(&test_gen).unwrap())
}

fn end_to_end_config(use_aux: bool) -> TrainConfig {
    TrainConfig {
        epochs: 20,
        curriculum_epochs: 5,
        learning_rate: 0.005,
        seed: 606,
        use_aux_loss: use_aux,
        ..TrainConfig::default()
    }
}

fn end_to_end_model(
    train_corpus: &[QAExample],
    test_corpus: &[QAExample],
    use_aux: bool,
) -> (f64, modnet_core::train::EvalReport) {
    let tokens: Vec<String> = train_corpus
        .iter()
        .flat_map(|e| e.question_tokens().into_iter().chain(e.passage_tokens()))
        .collect();
    let vocab = Vocab::build(tokens.iter().map(String::as_str));
    let cfg = end_to_end_config(use_aux);
    let enc_cfg = EncoderConfig {
        vocab_size: vocab.len(),
        embed_dim: 16,
        hidden_dim: 12,
        num_layers: 1,
        dropout: 0.0,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::register(&mut store, enc_cfg, &mut rng).unwrap();
    // count-head pretraining precedes the main run
    pretrain_count(&mut store, &model.modules.count_head, cfg.seed, 20_000, 16, 0.01, 0.90)
        .expect("count pretraining diverged");
    let train_set = prepare(&vocab, train_corpus).unwrap();
    let eval_set = prepare(&vocab, test_corpus).unwrap();
    let start = Instant::now();
    train(&mut store, &model, &cfg, &train_set, &eval_set, |m| {
        eprintln!(
            "  epoch {} loss {:.3} em {:.3}",
            m.epoch, m.total_loss, m.eval.overall_em
        );
        Ok(())
    })
    .unwrap();
    let eval = evaluate(&store, &model, &cfg, &eval_set).unwrap();
    (start.elapsed().as_secs_f64(), eval)
}

#[test]
fn criterion_6_and_7_end_to_end_learning_and_aux_ablation() {
    let (train_corpus, test_corpus) = end_to_end_setup();
    let (elapsed, eval) = end_to_end_model(&train_corpus, &test_corpus, true);

    let em = |cat: Category| eval.per_category.get(cat.name()).map_or(0.0, |v| v.0);
    let strong = [
        Category::NumberCompare,
        Category::DateCompare,
        Category::ExtractNumber,
        Category::DateDifference,
    ];
    let weak = [Category::Count, Category::ExtractArgument];
    for c in strong.iter().chain(&weak) {
        println!("  {:18} EM {:.3}", c.name(), em(*c));
    }
    println!("  elapsed {:.0}s", elapsed);
    let ok6 = strong.iter().all(|c| em(*c) >= 0.90)
        && weak.iter().all(|c| em(*c) >= 0.75)
        && elapsed < 7200.0;
    report(6, "end-to-end learning targets", ok6);

    // ablation: same corpus without the window auxiliary loss
    let (_, ablated) = end_to_end_model(&train_corpus, &test_corpus, false);
    let drop = eval.overall_f1 - ablated.overall_f1;
    println!(
        "  F1 with aux {:.3}, without {:.3}, drop {:.3}",
        eval.overall_f1, ablated.overall_f1, drop
    );
    report(7, "auxiliary-loss ablation direction", drop >= 0.05);
}

#[test]
fn criterion_8_determinism() {
    let gen = GenConfig { size: 16, seed: 88, ..GenConfig::default() };
    let corpus = generate_corpus(&gen).unwrap();
    let mut runs = Vec::new();
    for _ in 0..2 {
        let (mut store, model, _vocab, prepared) = tiny_model(88, &corpus);
        let cfg = TrainConfig { epochs: 2, curriculum_epochs: 1, seed: 88, ..TrainConfig::default() };
        let (train_set, eval_set) = prepared.split_at(12);
        let metrics = train(&mut store, &model, &cfg, train_set, eval_set, |_| Ok(())).unwrap();
        let metrics_json = serde_json::to_string(&metrics).unwrap();
        let params_json = serde_json::to_string(&store.sorted_map()).unwrap();
        runs.push((metrics_json, params_json));
    }
    let ok = runs[0] == runs[1];
    report(8, "seed determinism of metrics and checkpoints", ok);
}
