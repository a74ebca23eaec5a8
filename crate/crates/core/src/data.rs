//! Synthetic QA corpus over six question categories, heuristic program and
//! intermediate supervision derived from question/passage text, and the
//! count-head pretraining data generator.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::AnnotatedPassage;
use crate::error::{ModelError, Result};
use crate::program::{ModuleId, Program};

/// The six question categories of the corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    NumberCompare,
    DateCompare,
    ExtractNumber,
    DateDifference,
    Count,
    ExtractArgument,
}

pub const ALL_CATEGORIES: [Category; 6] = [
    Category::NumberCompare,
    Category::DateCompare,
    Category::ExtractNumber,
    Category::DateDifference,
    Category::Count,
    Category::ExtractArgument,
];

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::NumberCompare => "number-compare",
            Category::DateCompare => "date-compare",
            Category::ExtractNumber => "extract-number",
            Category::DateDifference => "date-difference",
            Category::Count => "count",
            Category::ExtractArgument => "extract-argument",
        }
    }

    pub fn from_name(name: &str) -> Option<Category> {
        ALL_CATEGORIES.iter().copied().find(|c| c.name() == name)
    }
}

/// Gold answer. Spans carry inclusive token offsets of every passage
/// occurrence of the answer text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Answer {
    Span { text: String, spans: Vec<(usize, usize)> },
    Number { value: f64 },
    Count { value: usize },
    YearDiff { value: i32 },
}

/// Multi-hot number supervision for one program node (preorder index).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeNumbers {
    pub node: usize,
    pub values: Vec<f64>,
}

/// Multi-hot date supervision for one program node (preorder index).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDates {
    pub node: usize,
    pub values: Vec<(i32, u32, u32)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QAExample {
    pub id: String,
    pub category: Category,
    pub question: String,
    pub passage: String,
    pub answer: Answer,
    /// Heuristic program supervision (textual program form).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub program: Option<String>,
    /// Per-node supervised question-token indices, preorder; empty vec for
    /// unsupervised nodes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_attention: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub number_supervision: Option<Vec<NodeNumbers>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date_supervision: Option<Vec<NodeDates>>,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

impl QAExample {
    pub fn question_tokens(&self) -> Vec<String> {
        tokenize(&self.question)
    }

    pub fn passage_tokens(&self) -> Vec<String> {
        tokenize(&self.passage)
    }
}

pub fn write_jsonl(path: &Path, examples: &[QAExample]) -> Result<()> {
    let mut out = Vec::new();
    for e in examples {
        out.extend_from_slice(serde_json::to_string(e)?.as_bytes());
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<QAExample>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Corpus generation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub size: usize,
    pub seed: u64,
    /// Relative weight per category; zero excludes a category.
    pub mix: Vec<(Category, f64)>,
    /// Fraction of examples with program + question-attention supervision.
    pub program_fraction: f64,
    /// Fraction with intermediate module-output supervision (a subset of the
    /// program-supervised examples).
    pub intermediate_fraction: f64,
    /// Debug mode: derive intermediate supervision from the generation plan
    /// instead of the question/passage heuristics.
    pub gold_plan: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            size: 2000,
            seed: 0,
            mix: ALL_CATEGORIES.iter().map(|c| (*c, 1.0)).collect(),
            program_fraction: 0.10,
            intermediate_fraction: 0.05,
            gold_plan: false,
        }
    }
}

const PLAYERS: [&str; 20] = [
    "Brady", "Akers", "Gostkowski", "Vinatieri", "Tucker", "Prater", "Folk", "Bailey", "Gould",
    "Crosby", "Manning", "Rodgers", "Brees", "Rivers", "Wilson", "Newton", "Dalton", "Stafford",
    "Ryan", "Flacco",
];
const QUARTERS: [&str; 4] = ["first", "second", "third", "fourth"];
const KINDS: [(&str, &str); 2] = [("field goal", "kicked"), ("touchdown", "scored")];
// Multi-token event descriptions used by count passages: the count head
// resolves attention spans of roughly this width, matching its pretraining.
const COUNT_KINDS: [(&str, &str); 2] = [
    ("very long range field goal attempt", "kicked"),
    ("red zone short yardage touchdown run", "scored"),
];

const GROUPS: [&str; 16] = [
    "cats", "dogs", "hawks", "larks", "goats", "mules", "bears", "wolves", "foxes", "crows",
    "swans", "seals", "hares", "moles", "toads", "finches",
];
const EVENTS: [&str; 16] = [
    "flood", "drought", "treaty", "revolt", "famine", "plague", "siege", "eclipse", "storm",
    "census", "armistice", "uprising", "blockade", "coronation", "earthquake", "landslide",
];
const PLACES: [&str; 8] =
    ["valley", "harbor", "plains", "delta", "plateau", "foothills", "marsh", "steppe"];
const MONTHS: [&str; 12] = [
    "January", "February", "March", "April", "May", "June", "July", "August", "September",
    "October", "November", "December",
];

/// One scoring event of a football-style passage.
struct FootballEvent {
    player: &'static str,
    yards: u32,
    kind: usize,
    quarter: usize,
}

fn football_passage(rng: &mut ChaCha8Rng) -> (Vec<FootballEvent>, String) {
    let n = rng.gen_range(3..=7);
    let mut yards_pool: Vec<u32> = (2..=60).collect();
    yards_pool.shuffle(rng);
    let mut players: Vec<&str> = PLAYERS.to_vec();
    players.shuffle(rng);
    let events: Vec<FootballEvent> = (0..n)
        .map(|i| FootballEvent {
            player: players[i],
            yards: yards_pool[i],
            kind: rng.gen_range(0..KINDS.len()),
            quarter: rng.gen_range(0..QUARTERS.len()),
        })
        .collect();
    let sentences: Vec<String> = events
        .iter()
        .map(|e| {
            format!(
                "{} {} a {} yard {} in the {} quarter .",
                e.player,
                KINDS[e.kind].1,
                e.yards,
                KINDS[e.kind].0,
                QUARTERS[e.quarter]
            )
        })
        .collect();
    (events, sentences.join(" "))
}

/// Long football passage for count questions: `target` events of the asked
/// (kind, quarter) cell among 10..=14 total.
fn count_passage(rng: &mut ChaCha8Rng) -> (Vec<FootballEvent>, String, usize, usize, usize) {
    let target = rng.gen_range(1..=5usize);
    let kind = rng.gen_range(0..COUNT_KINDS.len());
    let quarter = rng.gen_range(0..QUARTERS.len());
    // 7-8 sentences keep the soft count of an untrained diffuse attention
    // inside the count kernel's support so the loss has gradient from the
    // start, while staying near the head's pretraining length regime.
    let total = rng.gen_range(7..=8).max(target);
    let mut yards_pool: Vec<u32> = (2..=60).collect();
    yards_pool.shuffle(rng);
    let mut events: Vec<FootballEvent> = Vec::with_capacity(total);
    for i in 0..total {
        let (k, q) = if i < target {
            (kind, quarter)
        } else {
            // any cell except the asked one
            loop {
                let k = rng.gen_range(0..COUNT_KINDS.len());
                let q = rng.gen_range(0..QUARTERS.len());
                if (k, q) != (kind, quarter) {
                    break (k, q);
                }
            }
        };
        events.push(FootballEvent {
            player: PLAYERS[rng.gen_range(0..PLAYERS.len())],
            yards: yards_pool[i],
            kind: k,
            quarter: q,
        });
    }
    events.shuffle(rng);
    let sentences: Vec<String> = events
        .iter()
        .map(|e| {
            format!(
                "{} {} a {} yard {} in the {} quarter .",
                e.player,
                COUNT_KINDS[e.kind].1,
                e.yards,
                COUNT_KINDS[e.kind].0,
                QUARTERS[e.quarter]
            )
        })
        .collect();
    (events, sentences.join(" "), target, kind, quarter)
}

/// Plan of a history-style passage: two counted groups and two dated events.
struct HistoryPlan {
    groups: [&'static str; 2],
    counts: [u32; 2],
    events: [&'static str; 2],
    dates: [(i32, usize); 2], // (year, month index)
}

fn history_passage(rng: &mut ChaCha8Rng) -> (HistoryPlan, String) {
    let mut gs: Vec<&str> = GROUPS.to_vec();
    gs.shuffle(rng);
    let mut es: Vec<&str> = EVENTS.to_vec();
    es.shuffle(rng);
    let c1 = rng.gen_range(100..9999);
    let mut c2 = rng.gen_range(100..9999);
    while c2 == c1 {
        c2 = rng.gen_range(100..9999);
    }
    let y1 = rng.gen_range(1800..2000);
    let mut y2 = rng.gen_range(1800..2000);
    while y2 == y1 {
        y2 = rng.gen_range(1800..2000);
    }
    let plan = HistoryPlan {
        groups: [gs[0], gs[1]],
        counts: [c1, c2],
        events: [es[0], es[1]],
        dates: [(y1, rng.gen_range(0..12)), (y2, rng.gen_range(0..12))],
    };
    let place = PLACES[rng.gen_range(0..PLACES.len())];
    let text = format!(
        "there were {} {} and {} {} in the {} . in {} {} the {} occurred . in {} {} the {} occurred .",
        plan.counts[0], plan.groups[0], plan.counts[1], plan.groups[1], place,
        MONTHS[plan.dates[0].1], plan.dates[0].0, plan.events[0],
        MONTHS[plan.dates[1].1], plan.dates[1].0, plan.events[1],
    );
    (plan, text)
}

/// Inclusive token spans of every occurrence of `text` in the passage.
fn span_offsets(passage: &str, text: &str) -> Vec<(usize, usize)> {
    let toks = tokenize(passage);
    let target = tokenize(text);
    let mut out = Vec::new();
    if target.is_empty() || toks.len() < target.len() {
        return out;
    }
    for s in 0..=toks.len() - target.len() {
        if toks[s..s + target.len()] == target[..] {
            out.push((s, s + target.len() - 1));
        }
    }
    out
}

fn make_example(rng: &mut ChaCha8Rng, category: Category, id: usize) -> QAExample {
    let (question, passage, answer) = loop {
        if let Some(parts) = try_make(rng, category) {
            break parts;
        }
    };
    QAExample {
        id: format!("q{id:05}"),
        category,
        question,
        passage,
        answer,
        program: None,
        question_attention: None,
        number_supervision: None,
        date_supervision: None,
    }
}

fn try_make(rng: &mut ChaCha8Rng, category: Category) -> Option<(String, String, Answer)> {
    match category {
        Category::ExtractNumber => {
            // half on the long count-style passages so find/filter train on
            // the same phrases the count questions ask about
            let (events, passage, kinds) = if rng.gen_bool(0.5) {
                let (events, passage, _, _, _) = count_passage(rng);
                (events, passage, &COUNT_KINDS)
            } else {
                let (events, passage) = football_passage(rng);
                (events, passage, &KINDS)
            };
            let kind = rng.gen_range(0..kinds.len());
            let matching: Vec<&FootballEvent> = events.iter().filter(|e| e.kind == kind).collect();
            if matching.len() < 2 {
                return None;
            }
            let longest = rng.gen_bool(0.5);
            let sup = if longest { "longest" } else { "shortest" };
            // half the questions restrict to a quarter via filter
            if rng.gen_bool(0.5) {
                let quarter = matching[rng.gen_range(0..matching.len())].quarter;
                let in_q: Vec<&&FootballEvent> =
                    matching.iter().filter(|e| e.quarter == quarter).collect();
                let val = if longest {
                    in_q.iter().map(|e| e.yards).max()?
                } else {
                    in_q.iter().map(|e| e.yards).min()?
                };
                let question = format!(
                    "how many yards was the {sup} {} in the {} quarter ?",
                    kinds[kind].0, QUARTERS[quarter]
                );
                Some((question, passage, Answer::Number { value: f64::from(val) }))
            } else {
                let val = if longest {
                    matching.iter().map(|e| e.yards).max()?
                } else {
                    matching.iter().map(|e| e.yards).min()?
                };
                let question = format!("how many yards was the {sup} {} ?", kinds[kind].0);
                Some((question, passage, Answer::Number { value: f64::from(val) }))
            }
        }
        Category::Count => {
            let (_, passage, count, kind, quarter) = count_passage(rng);
            let question = format!(
                "how many {} were scored in the {} quarter ?",
                COUNT_KINDS[kind].0, QUARTERS[quarter]
            );
            Some((question, passage, Answer::Count { value: count }))
        }
        Category::ExtractArgument => {
            let (events, passage) = football_passage(rng);
            let kinds = &KINDS;
            // need an event whose (kind, quarter) pair is unique
            let unique: Vec<&FootballEvent> = events
                .iter()
                .filter(|e| {
                    events
                        .iter()
                        .filter(|o| o.kind == e.kind && o.quarter == e.quarter)
                        .count()
                        == 1
                })
                .collect();
            if unique.is_empty() {
                return None;
            }
            let e = unique[rng.gen_range(0..unique.len())];
            let question = format!(
                "who {} a {} in the {} quarter ?",
                kinds[e.kind].1, kinds[e.kind].0, QUARTERS[e.quarter]
            );
            let spans = span_offsets(&passage, e.player);
            Some((question, passage, Answer::Span { text: e.player.to_string(), spans }))
        }
        Category::NumberCompare => {
            let (plan, passage) = history_passage(rng);
            let fewer = rng.gen_bool(0.5);
            let cmp_word = if fewer { "fewer" } else { "more" };
            let question =
                format!("were there {cmp_word} {} or {} ?", plan.groups[0], plan.groups[1]);
            let winner = if fewer == (plan.counts[0] < plan.counts[1]) {
                plan.groups[0]
            } else {
                plan.groups[1]
            };
            let spans = span_offsets(&passage, winner);
            Some((question, passage, Answer::Span { text: winner.to_string(), spans }))
        }
        Category::DateCompare => {
            let (plan, passage) = history_passage(rng);
            let first = rng.gen_bool(0.5);
            let ord_word = if first { "first" } else { "second" };
            let question = format!(
                "what happened {ord_word} : the {} or the {} ?",
                plan.events[0], plan.events[1]
            );
            let e0_first = plan.dates[0].0 < plan.dates[1].0;
            let winner = if first == e0_first { plan.events[0] } else { plan.events[1] };
            let spans = span_offsets(&passage, winner);
            Some((question, passage, Answer::Span { text: winner.to_string(), spans }))
        }
        Category::DateDifference => {
            let (plan, passage) = history_passage(rng);
            let question = format!(
                "how many years passed between the {} and the {} ?",
                plan.events[0], plan.events[1]
            );
            let diff = (plan.dates[0].0 - plan.dates[1].0).abs();
            Some((question, passage, Answer::YearDiff { value: diff }))
        }
    }
}

/// Generate a deterministic corpus; supervision is attached by running the
/// question/passage heuristics on the configured fractions.
pub fn generate_corpus(cfg: &GenConfig) -> Result<Vec<QAExample>> {
    if cfg.size == 0 {
        return Err(ModelError::Contract("corpus size must be >= 1".into()));
    }
    let total_w: f64 = cfg.mix.iter().map(|(_, w)| w).sum();
    if total_w <= 0.0 {
        return Err(ModelError::Contract("category mix weights sum to zero".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // proportional allocation, remainder by category order
    let mut cats: Vec<Category> = Vec::with_capacity(cfg.size);
    for (c, w) in &cfg.mix {
        let n = ((cfg.size as f64) * w / total_w).floor() as usize;
        cats.extend(std::iter::repeat(*c).take(n));
    }
    let mut i = 0;
    while cats.len() < cfg.size {
        let (c, w) = cfg.mix[i % cfg.mix.len()];
        if w > 0.0 {
            cats.push(c);
        }
        i += 1;
    }
    cats.shuffle(&mut rng);

    let mut examples: Vec<QAExample> = cats
        .iter()
        .enumerate()
        .map(|(i, c)| make_example(&mut rng, *c, i))
        .collect();

    // pick the supervised subsets
    let mut order: Vec<usize> = (0..cfg.size).collect();
    order.shuffle(&mut rng);
    // gold-plan debugging supervises everything (the heuristics recover the
    // generator's plans exactly on templated questions)
    let (n_prog, n_inter) = if cfg.gold_plan {
        (cfg.size, cfg.size)
    } else {
        (
            ((cfg.size as f64) * cfg.program_fraction).round() as usize,
            ((cfg.size as f64) * cfg.intermediate_fraction).round() as usize,
        )
    };
    for (rank, &idx) in order.iter().take(n_prog).enumerate() {
        let ex = &mut examples[idx];
        let Some(sup) = heuristic_program_supervision(&ex.question_tokens()) else {
            continue;
        };
        ex.program = Some(sup.program.to_text());
        ex.question_attention = Some(sup.question_attention.clone());
        if rank < n_inter {
            let passage = AnnotatedPassage::annotate(ex.passage_tokens());
            let (nums, dates) = heuristic_module_output_supervision(
                &ex.question_tokens(),
                &passage,
                &sup.program,
                &sup.question_attention,
            );
            if !nums.is_empty() {
                ex.number_supervision = Some(nums);
            }
            if !dates.is_empty() {
                ex.date_supervision = Some(dates);
            }
        }
    }
    Ok(examples)
}

// ---------------------------------------------------------------------------
// Heuristic program supervision (question patterns)
// ---------------------------------------------------------------------------

/// A matched question pattern: the program plus per-node (preorder)
/// supervised question-token indices.
pub struct ProgramSupervision {
    pub program: Program,
    pub question_attention: Vec<Vec<usize>>,
}

fn node(m: ModuleId, children: Vec<Program>) -> Program {
    Program::new(m, children)
}

fn strip_terminal(q: &[String]) -> usize {
    if q.last().map(String::as_str) == Some("?") {
        q.len() - 1
    } else {
        q.len()
    }
}

fn position(q: &[String], word: &str) -> Option<usize> {
    q.iter().position(|t| t == word)
}

/// Match a question against the supported patterns and build the program
/// with question-attention targets. Returns `None` when nothing matches.
pub fn heuristic_program_supervision(q: &[String]) -> Option<ProgramSupervision> {
    let end = strip_terminal(q);
    let q = &q[..end];
    let range = |a: usize, b: usize| (a..b).collect::<Vec<usize>>();

    // "what happened first SPAN1 or SPAN2 ?"
    if q.len() > 3 && q[0] == "what" && q[1] == "happened" && (q[2] == "first" || q[2] == "second")
    {
        let or = position(q, "or")?;
        let mut s1 = 3;
        if q.get(s1).map(String::as_str) == Some(":") {
            s1 += 1;
        }
        if s1 >= or || or + 1 >= q.len() {
            return None;
        }
        let cmp = if q[2] == "first" { ModuleId::CompareDateLt } else { ModuleId::CompareDateGt };
        let program = node(
            ModuleId::Span,
            vec![node(cmp, vec![node(ModuleId::Find, vec![]), node(ModuleId::Find, vec![])])],
        );
        return Some(ProgramSupervision {
            program,
            question_attention: vec![vec![], vec![], range(s1, or), range(or + 1, q.len())],
        });
    }

    // "were there fewer SPAN1 or SPAN2 ?"
    if q.len() > 4 && q[0] == "were" && q[1] == "there" && (q[2] == "fewer" || q[2] == "more") {
        let or = position(q, "or")?;
        if 3 >= or || or + 1 >= q.len() {
            return None;
        }
        let cmp = if q[2] == "fewer" { ModuleId::CompareNumLt } else { ModuleId::CompareNumGt };
        let program = node(
            ModuleId::Span,
            vec![node(cmp, vec![node(ModuleId::Find, vec![]), node(ModuleId::Find, vec![])])],
        );
        return Some(ProgramSupervision {
            program,
            question_attention: vec![vec![], vec![], range(3, or), range(or + 1, q.len())],
        });
    }

    // "how many yards was the longest/shortest X [in SPAN] ?"
    if q.len() > 6
        && q[..5] == ["how", "many", "yards", "was", "the"]
        && (q[5] == "longest" || q[5] == "shortest")
    {
        let extreme = if q[5] == "longest" { ModuleId::FindMaxNum } else { ModuleId::FindMinNum };
        let in_pos = q[6..].iter().position(|t| t == "in").map(|p| p + 6);
        let x_end = in_pos.unwrap_or(q.len());
        if 6 >= x_end {
            return None;
        }
        return Some(match in_pos {
            Some(ip) => ProgramSupervision {
                program: node(
                    ModuleId::FindNum,
                    vec![node(
                        extreme,
                        vec![node(ModuleId::Filter, vec![node(ModuleId::Find, vec![])])],
                    )],
                ),
                question_attention: vec![vec![], vec![], range(ip, q.len()), range(6, x_end)],
            },
            None => ProgramSupervision {
                program: node(
                    ModuleId::FindNum,
                    vec![node(extreme, vec![node(ModuleId::Find, vec![])])],
                ),
                question_attention: vec![vec![], vec![], range(6, x_end)],
            },
        });
    }

    // "how many years passed between SPAN1 and SPAN2 ?"
    if q.len() > 6 && q[..3] == ["how", "many", "years"] {
        let between = position(q, "between")?;
        let and = q[between..].iter().position(|t| t == "and").map(|p| p + between)?;
        if between + 1 >= and || and + 1 >= q.len() {
            return None;
        }
        let program = node(
            ModuleId::TimeDiff,
            vec![node(ModuleId::Find, vec![]), node(ModuleId::Find, vec![])],
        );
        return Some(ProgramSupervision {
            program,
            question_attention: vec![vec![], range(between + 1, and), range(and + 1, q.len())],
        });
    }

    // "how many X were scored [in SPAN] ?"
    if q.len() > 4 && q[0] == "how" && q[1] == "many" {
        let were = position(q, "were")?;
        if 2 >= were {
            return None;
        }
        let in_pos = q[were..].iter().position(|t| t == "in").map(|p| p + were);
        return Some(match in_pos {
            Some(ip) if ip + 1 < q.len() => ProgramSupervision {
                program: node(
                    ModuleId::Count,
                    vec![node(ModuleId::Filter, vec![node(ModuleId::Find, vec![])])],
                ),
                question_attention: vec![vec![], range(ip, q.len()), range(2, were)],
            },
            _ => ProgramSupervision {
                program: node(ModuleId::Count, vec![node(ModuleId::Find, vec![])]),
                question_attention: vec![vec![], range(2, were)],
            },
        });
    }

    // "who VERB SPAN ?"
    if q.len() > 2
        && q[0] == "who"
        && ["kicked", "caught", "threw", "scored"].contains(&q[1].as_str())
    {
        let in_pos = q[2..].iter().position(|t| t == "in").map(|p| p + 2);
        return Some(match in_pos {
            Some(ip) if ip > 2 && ip + 1 < q.len() => ProgramSupervision {
                program: node(
                    ModuleId::Span,
                    vec![node(
                        ModuleId::Relocate,
                        vec![node(ModuleId::Filter, vec![node(ModuleId::Find, vec![])])],
                    )],
                ),
                question_attention: vec![vec![], vec![0, 1], range(ip, q.len()), range(2, ip)],
            },
            _ => ProgramSupervision {
                program: node(
                    ModuleId::Span,
                    vec![node(ModuleId::Relocate, vec![node(ModuleId::Find, vec![])])],
                ),
                question_attention: vec![vec![], vec![0, 1], range(2, q.len())],
            },
        });
    }

    None
}

// ---------------------------------------------------------------------------
// Heuristic intermediate supervision (nearest value to phrase occurrences)
// ---------------------------------------------------------------------------

/// Non-overlapping passage windows best matching `phrase`, earliest first.
/// A window scores by positional token equality; only maximal-score windows
/// (score > 0) count as occurrences.
fn fuzzy_occurrences(passage_tokens: &[String], phrase: &[String]) -> Vec<(usize, usize)> {
    let l = phrase.len();
    if l == 0 || passage_tokens.len() < l {
        return Vec::new();
    }
    let score = |s: usize| -> usize {
        (0..l).filter(|k| passage_tokens[s + k] == phrase[*k]).count()
    };
    let max_score = (0..=passage_tokens.len() - l).map(score).max().unwrap_or(0);
    if max_score == 0 {
        return Vec::new();
    }
    let mut out: Vec<(usize, usize)> = Vec::new();
    let mut s = 0;
    while s + l <= passage_tokens.len() {
        if score(s) == max_score {
            out.push((s, s + l - 1));
            s += l;
        } else {
            s += 1;
        }
    }
    out
}

fn window_distance(window: (usize, usize), lo: usize, hi: usize) -> usize {
    // distance between token ranges [window] and [lo, hi]
    if hi < window.0 {
        window.0 - hi
    } else if lo > window.1 {
        lo - window.1
    } else {
        0
    }
}

/// Nearest-number values for each occurrence window; distance ties include
/// every tied number.
fn nearest_numbers(passage: &AnnotatedPassage, occ: &[(usize, usize)]) -> Vec<f64> {
    let mut values: Vec<f64> = Vec::new();
    for &w in occ {
        let best = passage
            .number_tokens
            .iter()
            .map(|n| window_distance(w, n.index, n.index))
            .min();
        let Some(best) = best else { continue };
        for n in &passage.number_tokens {
            if window_distance(w, n.index, n.index) == best && !values.contains(&n.value) {
                values.push(n.value);
            }
        }
    }
    values
}

fn nearest_dates(passage: &AnnotatedPassage, occ: &[(usize, usize)]) -> Vec<(i32, u32, u32)> {
    let mut values: Vec<(i32, u32, u32)> = Vec::new();
    for &w in occ {
        let best = passage
            .date_tokens
            .iter()
            .map(|d| window_distance(w, d.start, d.end))
            .min();
        let Some(best) = best else { continue };
        for d in &passage.date_tokens {
            if window_distance(w, d.start, d.end) == best && !values.contains(&d.ymd()) {
                values.push(d.ymd());
            }
        }
    }
    values
}

fn phrase_of(q: &[String], indices: &[usize]) -> Vec<String> {
    indices.iter().filter_map(|i| q.get(*i).cloned()).collect()
}

/// Window within which a filter phrase must co-occur with a find phrase for
/// the occurrence to count. Kept below the template sentence gap so an event
/// right after a filtered sentence is not pulled in.
const FILTER_WINDOW: usize = 4;

/// Derive multi-hot value supervision for the nodes the training objective
/// can supervise: comparison operands, time-difference operands, and the
/// pre-selection distribution of extremum nodes.
pub fn heuristic_module_output_supervision(
    question: &[String],
    passage: &AnnotatedPassage,
    program: &Program,
    q_att: &[Vec<usize>],
) -> (Vec<NodeNumbers>, Vec<NodeDates>) {
    let mut numbers: Vec<NodeNumbers> = Vec::new();
    let mut dates: Vec<NodeDates> = Vec::new();

    // preorder enumeration with child indices
    fn walk(
        nodep: &Program,
        idx: &mut usize,
        f: &mut impl FnMut(&Program, usize, &[usize]),
    ) {
        let my = *idx;
        *idx += 1;
        let mut child_idx = Vec::new();
        for c in &nodep.children {
            child_idx.push(*idx);
            walk(c, idx, f);
        }
        f(nodep, my, &child_idx);
    }

    // occurrences of the find phrase under `root_idx`'s subtree, restricted
    // by any filter phrase on the way down
    let occurrences = |sub: &Program, sub_idx: usize| -> Vec<(usize, usize)> {
        let toks = &passage.tokens;
        let mut cur = sub;
        let mut cur_idx = sub_idx;
        let mut filter_occ: Option<Vec<(usize, usize)>> = None;
        loop {
            match cur.module {
                ModuleId::Find => {
                    let phrase = phrase_of(question, &q_att[cur_idx]);
                    let occ = fuzzy_occurrences(toks, &phrase);
                    return match &filter_occ {
                        None => occ,
                        Some(f) => occ
                            .into_iter()
                            .filter(|w| {
                                f.iter().any(|fw| window_distance(*w, fw.0, fw.1) <= FILTER_WINDOW)
                            })
                            .collect(),
                    };
                }
                ModuleId::Filter => {
                    let phrase = phrase_of(question, &q_att[cur_idx]);
                    let occ = fuzzy_occurrences(toks, &phrase);
                    if !occ.is_empty() {
                        filter_occ = Some(occ);
                    }
                    cur_idx += 1;
                    cur = &cur.children[0];
                }
                _ => {
                    if cur.children.is_empty() {
                        return Vec::new();
                    }
                    cur_idx += 1;
                    cur = &cur.children[0];
                }
            }
        }
    };

    let mut idx = 0;
    walk(program, &mut idx, &mut |n, my, child_idx| match n.module {
        ModuleId::CompareNumLt | ModuleId::CompareNumGt => {
            for (c, ci) in n.children.iter().zip(child_idx) {
                let vals = nearest_numbers(passage, &occurrences(c, *ci));
                if !vals.is_empty() {
                    numbers.push(NodeNumbers { node: *ci, values: vals });
                }
            }
        }
        ModuleId::CompareDateLt | ModuleId::CompareDateGt | ModuleId::TimeDiff => {
            for (c, ci) in n.children.iter().zip(child_idx) {
                let vals = nearest_dates(passage, &occurrences(c, *ci));
                if !vals.is_empty() {
                    dates.push(NodeDates { node: *ci, values: vals });
                }
            }
        }
        ModuleId::FindMaxNum | ModuleId::FindMinNum => {
            let vals = nearest_numbers(passage, &occurrences(&n.children[0], child_idx[0]));
            if !vals.is_empty() {
                numbers.push(NodeNumbers { node: my, values: vals });
            }
        }
        // the attention feeding count/relocate has no directly supervisable
        // output, but its associated numbers mark the right events
        ModuleId::Count | ModuleId::Relocate => {
            let vals = nearest_numbers(passage, &occurrences(&n.children[0], child_idx[0]));
            if !vals.is_empty() {
                numbers.push(NodeNumbers { node: child_idx[0], values: vals });
            }
        }
        _ => {}
    });
    numbers.sort_by_key(|n| n.node);
    dates.sort_by_key(|d| d.node);
    (numbers, dates)
}

// ---------------------------------------------------------------------------
// Count pretraining data
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CountPretrainInstance {
    pub attention: Vec<f64>,
    pub label: usize,
}

fn gaussian(rng: &mut ChaCha8Rng, std_dev: f64) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    std_dev * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// One synthetic count instance: `label` disjoint spans of high attention in
/// a vector of length 200..=600, Gaussian noise added, then normalized.
pub fn generate_count_instance(rng: &mut ChaCha8Rng) -> CountPretrainInstance {
    let m = rng.gen_range(200..=600);
    let y = rng.gen_range(0..=9usize);
    let spans: Vec<(usize, usize)> = loop {
        let mut spans: Vec<(usize, usize)> = (0..y)
            .map(|_| {
                let len = rng.gen_range(5..=15);
                let start = rng.gen_range(0..m - len);
                (start, start + len)
            })
            .collect();
        spans.sort_unstable();
        if spans.windows(2).all(|w| w[0].1 <= w[1].0) {
            break spans;
        }
    };
    let mut att = vec![0.0; m];
    for (s, e) in &spans {
        for v in &mut att[*s..*e] {
            *v = 1.0;
        }
    }
    for v in &mut att {
        // variance 0.01
        *v = (*v + gaussian(rng, 0.1)).max(0.0);
    }
    let sum: f64 = att.iter().sum();
    if sum > 1e-9 {
        for v in &mut att {
            *v /= sum;
        }
    } else {
        att.fill(1.0 / m as f64);
    }
    CountPretrainInstance { attention: att, label: y }
}

pub fn generate_count_pretraining(seed: u64, n: usize) -> Vec<CountPretrainInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| generate_count_instance(&mut rng)).collect()
}
