//! Typed programs over the module library: the grammar, a textual program
//! form, a grammar-constrained LSTM decoder with beam search, and the
//! executor that runs a decoded program against a passage.

use serde::{Deserialize, Serialize};

use rand_chacha::ChaCha8Rng;

use crate::dist::{
    CountDist, DateDist, NumberDist, PassageAttention, QuestionAttention, SpanDist, TimeDeltaDist,
};
use crate::encoder::ContextualEncoding;
use crate::error::{ModelError, Result};
use crate::modules::{ExecutionContext, ModuleParams};
use crate::params::{BoundParams, Init, ParamStore};
use crate::tensor::{Tape, Tensor};

pub const MAX_PROGRAM_LEN: usize = 12;
pub const MAX_PROGRAM_DEPTH: usize = 5;
pub const DECODER_HIDDEN: usize = 100;
pub const ACTION_EMB_DIM: usize = 100;
pub const BEAM_SIZE: usize = 4;

/// Value types flowing between modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueType {
    Attention,
    Number,
    Date,
    Count,
    TimeDelta,
    Span,
}

/// Every module in the library, in the fixed action-id order used by the
/// decoder output layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModuleId {
    Find,
    Filter,
    Relocate,
    FindNum,
    FindDate,
    Count,
    CompareNumLt,
    CompareNumGt,
    CompareDateLt,
    CompareDateGt,
    TimeDiff,
    FindMaxNum,
    FindMinNum,
    Span,
}

pub const ALL_MODULES: [ModuleId; 14] = [
    ModuleId::Find,
    ModuleId::Filter,
    ModuleId::Relocate,
    ModuleId::FindNum,
    ModuleId::FindDate,
    ModuleId::Count,
    ModuleId::CompareNumLt,
    ModuleId::CompareNumGt,
    ModuleId::CompareDateLt,
    ModuleId::CompareDateGt,
    ModuleId::TimeDiff,
    ModuleId::FindMaxNum,
    ModuleId::FindMinNum,
    ModuleId::Span,
];

pub const NUM_ACTIONS: usize = ALL_MODULES.len();

impl ModuleId {
    pub fn name(self) -> &'static str {
        match self {
            ModuleId::Find => "find",
            ModuleId::Filter => "filter",
            ModuleId::Relocate => "relocate",
            ModuleId::FindNum => "find-num",
            ModuleId::FindDate => "find-date",
            ModuleId::Count => "count",
            ModuleId::CompareNumLt => "compare-num-lt",
            ModuleId::CompareNumGt => "compare-num-gt",
            ModuleId::CompareDateLt => "compare-date-lt",
            ModuleId::CompareDateGt => "compare-date-gt",
            ModuleId::TimeDiff => "time-diff",
            ModuleId::FindMaxNum => "find-max-num",
            ModuleId::FindMinNum => "find-min-num",
            ModuleId::Span => "span",
        }
    }

    pub fn from_name(name: &str) -> Option<ModuleId> {
        ALL_MODULES.iter().copied().find(|m| m.name() == name)
    }

    pub fn action_id(self) -> usize {
        ALL_MODULES.iter().position(|m| *m == self).unwrap()
    }

    pub fn output_type(self) -> ValueType {
        match self {
            ModuleId::Find
            | ModuleId::Filter
            | ModuleId::Relocate
            | ModuleId::CompareNumLt
            | ModuleId::CompareNumGt
            | ModuleId::CompareDateLt
            | ModuleId::CompareDateGt
            | ModuleId::FindMaxNum
            | ModuleId::FindMinNum => ValueType::Attention,
            ModuleId::FindNum => ValueType::Number,
            ModuleId::FindDate => ValueType::Date,
            ModuleId::Count => ValueType::Count,
            ModuleId::TimeDiff => ValueType::TimeDelta,
            ModuleId::Span => ValueType::Span,
        }
    }

    pub fn arg_types(self) -> &'static [ValueType] {
        use ValueType::Attention as P;
        match self {
            ModuleId::Find => &[],
            ModuleId::Filter
            | ModuleId::Relocate
            | ModuleId::FindNum
            | ModuleId::FindDate
            | ModuleId::Count
            | ModuleId::FindMaxNum
            | ModuleId::FindMinNum
            | ModuleId::Span => &[P],
            ModuleId::CompareNumLt
            | ModuleId::CompareNumGt
            | ModuleId::CompareDateLt
            | ModuleId::CompareDateGt
            | ModuleId::TimeDiff => &[P, P],
        }
    }

    pub fn arity(self) -> usize {
        self.arg_types().len()
    }
}

/// Types a program root may produce as the final answer.
pub fn is_answer_type(t: ValueType) -> bool {
    !matches!(t, ValueType::Attention)
}

/// A typed program tree. Node order (for supervision and side arguments) is
/// the preorder linearization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Program {
    pub module: ModuleId,
    pub children: Vec<Program>,
}

impl Program {
    pub fn new(module: ModuleId, children: Vec<Program>) -> Self {
        Program { module, children }
    }

    pub fn len(&self) -> usize {
        1 + self.children.iter().map(Program::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(Program::depth).max().unwrap_or(0)
    }

    /// Preorder action sequence.
    pub fn linearize(&self) -> Vec<ModuleId> {
        let mut out = Vec::with_capacity(self.len());
        self.walk(&mut |node, _| out.push(node.module));
        out
    }

    fn walk<'s>(&'s self, f: &mut impl FnMut(&'s Program, usize)) {
        fn rec<'s>(node: &'s Program, idx: &mut usize, f: &mut impl FnMut(&'s Program, usize)) {
            f(node, *idx);
            *idx += 1;
            for c in &node.children {
                rec(c, idx, f);
            }
        }
        let mut idx = 0;
        rec(self, &mut idx, f);
    }

    /// Rebuild a tree from a preorder action sequence.
    pub fn from_actions(actions: &[ModuleId]) -> Result<Program> {
        fn build(actions: &[ModuleId], pos: &mut usize) -> Result<Program> {
            let m = *actions.get(*pos).ok_or_else(|| {
                ModelError::Contract("action sequence ended mid-program".into())
            })?;
            *pos += 1;
            let children = (0..m.arity())
                .map(|_| build(actions, pos))
                .collect::<Result<Vec<_>>>()?;
            Ok(Program::new(m, children))
        }
        let mut pos = 0;
        let p = build(actions, &mut pos)?;
        if pos != actions.len() {
            return Err(ModelError::Contract(format!(
                "trailing actions after complete program at position {pos}"
            )));
        }
        p.type_check()?;
        Ok(p)
    }

    /// Check argument types, root answer type, and size limits.
    pub fn type_check(&self) -> Result<()> {
        fn rec(node: &Program) -> Result<()> {
            let want = node.module.arg_types();
            if node.children.len() != want.len() {
                return Err(ModelError::Type(format!(
                    "{} takes {} arguments, got {}",
                    node.module.name(),
                    want.len(),
                    node.children.len()
                )));
            }
            for (c, w) in node.children.iter().zip(want) {
                if c.module.output_type() != *w {
                    return Err(ModelError::Type(format!(
                        "{} argument must produce {:?}, {} produces {:?}",
                        node.module.name(),
                        w,
                        c.module.name(),
                        c.module.output_type()
                    )));
                }
                rec(c)?;
            }
            Ok(())
        }
        rec(self)?;
        if !is_answer_type(self.module.output_type()) {
            return Err(ModelError::Type(format!(
                "root module {} does not produce an answer",
                self.module.name()
            )));
        }
        if self.len() > MAX_PROGRAM_LEN {
            return Err(ModelError::Type(format!(
                "program length {} exceeds {MAX_PROGRAM_LEN}",
                self.len()
            )));
        }
        if self.depth() > MAX_PROGRAM_DEPTH {
            return Err(ModelError::Type(format!(
                "program depth {} exceeds {MAX_PROGRAM_DEPTH}",
                self.depth()
            )));
        }
        Ok(())
    }

    /// Nested-call text form, e.g. `span(compare-num-lt(find(), find()))`.
    pub fn to_text(&self) -> String {
        let args: Vec<String> = self.children.iter().map(Program::to_text).collect();
        format!("{}({})", self.module.name(), args.join(", "))
    }

    pub fn parse(text: &str) -> Result<Program> {
        let mut p = Parser { text: text.as_bytes(), pos: 0 };
        let node = p.parse_node()?;
        p.skip_ws();
        if p.pos != p.text.len() {
            return Err(ModelError::Parse {
                position: p.pos,
                message: "unexpected trailing input".into(),
            });
        }
        node.type_check()?;
        Ok(node)
    }
}

struct Parser<'a> {
    text: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.text.len() && self.text[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.text.get(self.pos) == Some(&c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(ModelError::Parse {
                position: self.pos,
                message: format!("expected '{}'", c as char),
            })
        }
    }

    fn parse_node(&mut self) -> Result<Program> {
        self.skip_ws();
        let start = self.pos;
        while self
            .text
            .get(self.pos)
            .is_some_and(|c| c.is_ascii_alphanumeric() || *c == b'-')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.text[start..self.pos]).unwrap();
        let module = ModuleId::from_name(name).ok_or_else(|| ModelError::Parse {
            position: start,
            message: format!("unknown module '{name}'"),
        })?;
        self.expect(b'(')?;
        let mut children = Vec::new();
        self.skip_ws();
        if self.text.get(self.pos) != Some(&b')') {
            loop {
                children.push(self.parse_node()?);
                self.skip_ws();
                if self.text.get(self.pos) == Some(&b',') {
                    self.pos += 1;
                } else {
                    break;
                }
            }
        }
        self.expect(b')')?;
        Ok(Program::new(module, children))
    }
}

/// Slot on the top-down expansion stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    /// The root: any answer-producing type.
    Answer,
    Typed(ValueType),
}

impl Slot {
    fn accepts(self, m: ModuleId) -> bool {
        match self {
            Slot::Answer => is_answer_type(m.output_type()),
            Slot::Typed(t) => m.output_type() == t,
        }
    }

    /// Fewest actions that can complete this slot.
    fn min_len(self) -> usize {
        match self {
            Slot::Typed(ValueType::Attention) => 1,
            Slot::Typed(ValueType::TimeDelta) => 3,
            // one producer plus one attention argument
            _ => 2,
        }
    }

    /// Fewest tree levels (including this node) to complete this slot.
    fn min_depth(self) -> usize {
        match self {
            Slot::Typed(ValueType::Attention) => 1,
            _ => 2,
        }
    }
}

/// Incremental validity of a preorder action sequence under the grammar and
/// the length/depth limits. Guides both decoding and the soundness tests.
#[derive(Clone, Debug)]
pub struct GrammarState {
    /// (expected type, node depth), top of stack last.
    stack: Vec<(Slot, usize)>,
    used: usize,
}

impl Default for GrammarState {
    fn default() -> Self {
        Self::new()
    }
}

impl GrammarState {
    pub fn new() -> Self {
        GrammarState { stack: vec![(Slot::Answer, 1)], used: 0 }
    }

    pub fn is_complete(&self) -> bool {
        self.stack.is_empty()
    }

    pub fn actions_used(&self) -> usize {
        self.used
    }

    fn pending_min_len(&self) -> usize {
        self.stack.iter().map(|(s, _)| s.min_len()).sum()
    }

    /// All actions that keep the sequence completable within the limits.
    pub fn valid_actions(&self) -> Vec<ModuleId> {
        let Some(&(slot, depth)) = self.stack.last() else {
            return Vec::new();
        };
        let others: usize = self.stack[..self.stack.len() - 1]
            .iter()
            .map(|(s, _)| s.min_len())
            .sum();
        ALL_MODULES
            .iter()
            .copied()
            .filter(|m| {
                if !slot.accepts(*m) {
                    return false;
                }
                let child_min_len: usize =
                    m.arg_types().iter().map(|t| Slot::Typed(*t).min_len()).sum();
                if self.used + 1 + child_min_len + others > MAX_PROGRAM_LEN {
                    return false;
                }
                m.arg_types()
                    .iter()
                    .all(|t| depth + Slot::Typed(*t).min_depth() <= MAX_PROGRAM_DEPTH)
            })
            .collect()
    }

    /// Advance by one action; errors if the action is not currently valid.
    pub fn apply(&mut self, m: ModuleId) -> Result<()> {
        if !self.valid_actions().contains(&m) {
            return Err(ModelError::Contract(format!(
                "action {} invalid at position {}",
                m.name(),
                self.used
            )));
        }
        let (_, depth) = self.stack.pop().unwrap();
        for t in m.arg_types().iter().rev() {
            self.stack.push((Slot::Typed(*t), depth + 1));
        }
        self.used += 1;
        debug_assert!(self.used + self.pending_min_len() <= MAX_PROGRAM_LEN);
        Ok(())
    }
}

/// Grammar-constrained LSTM program decoder. Each emitted action also yields
/// the question attention used as that node's side argument.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub d: usize,
}

impl Decoder {
    pub fn register(store: &mut ParamStore, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let h = DECODER_HIDDEN;
        // row NUM_ACTIONS is the start-of-program symbol
        store.add("dec.emb", vec![NUM_ACTIONS + 1, ACTION_EMB_DIM], Init::Uniform(0.1), rng)?;
        store.add("dec.w_init", vec![h, d], Init::Xavier, rng)?;
        store.add("dec.lstm.w_x", vec![4 * h, ACTION_EMB_DIM + d], Init::Xavier, rng)?;
        store.add("dec.lstm.u_h", vec![4 * h, h], Init::Xavier, rng)?;
        store.add("dec.lstm.b", vec![4 * h], Init::Zeros, rng)?;
        store.add("dec.w_att", vec![d, h], Init::Xavier, rng)?;
        store.add("dec.w_out", vec![NUM_ACTIONS, h], Init::Xavier, rng)?;
        store.add("dec.b_out", vec![NUM_ACTIONS], Init::Zeros, rng)?;
        Ok(Decoder { d })
    }

    fn lstm_step(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        x: &Tensor,
        h: &Tensor,
        c: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let hd = DECODER_HIDDEN;
        let zx = tape.matvec(bound.get("dec.lstm.w_x")?, x)?;
        let zh = tape.matvec(bound.get("dec.lstm.u_h")?, h)?;
        let z = tape.add(&tape.add(&zx, &zh)?, bound.get("dec.lstm.b")?)?;
        let i = tape.sigmoid(&tape.slice(&z, 0, hd)?)?;
        let f = tape.sigmoid(&tape.slice(&z, hd, hd)?)?;
        let g = tape.tanh(&tape.slice(&z, 2 * hd, hd)?)?;
        let o = tape.sigmoid(&tape.slice(&z, 3 * hd, hd)?)?;
        let c_new = tape.add(&tape.mul(&f, c)?, &tape.mul(&i, &g)?)?;
        let h_new = tape.mul(&o, &tape.tanh(&c_new)?)?;
        Ok((h_new, c_new))
    }

    fn init_state(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        enc: &ContextualEncoding,
    ) -> Result<(Tensor, Tensor)> {
        let h = tape.tanh(&tape.matvec(bound.get("dec.w_init")?, &enc.q_final)?)?;
        let c = tape.vector(vec![0.0; DECODER_HIDDEN])?;
        Ok((h, c))
    }

    /// Question attention and masked action log-probabilities for one state.
    fn step_outputs(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        enc: &ContextualEncoding,
        h: &Tensor,
        valid: &[ModuleId],
    ) -> Result<(QuestionAttention, Tensor, Tensor)> {
        let att_scores = tape.matvec(&enc.q, &tape.matvec(bound.get("dec.w_att")?, h)?)?;
        let alpha = QuestionAttention::new(tape.softmax_1d(&att_scores)?)?;
        let attended = tape.matvec(&tape.transpose(&enc.q)?, alpha.tensor())?;
        let logits = tape.add(&tape.matvec(bound.get("dec.w_out")?, h)?, bound.get("dec.b_out")?)?;
        let mut mask = vec![-1e30; NUM_ACTIONS];
        for m in valid {
            mask[m.action_id()] = 0.0;
        }
        let masked = tape.add(&logits, &tape.vector(mask)?)?;
        let probs = tape.softmax_1d(&masked)?;
        Ok((alpha, attended, probs))
    }

    fn action_input(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        action_row: usize,
        attended: &Tensor,
    ) -> Result<Tensor> {
        let emb = tape.row(bound.get("dec.emb")?, action_row)?;
        tape.concat(&[&emb, attended])
    }

    /// Differentiable log p(z|q) of a fixed action sequence, plus the side
    /// question attentions per node (preorder).
    pub fn sequence_logprob(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        enc: &ContextualEncoding,
        actions: &[ModuleId],
    ) -> Result<(Tensor, Vec<QuestionAttention>)> {
        let (mut h, mut c) = self.init_state(tape, bound, enc)?;
        let mut state = GrammarState::new();
        let mut logprob = tape.scalar(0.0)?;
        let mut side = Vec::with_capacity(actions.len());
        // attended question vector consumed by the first step
        let zero_att = tape.vector(vec![0.0; self.d])?;
        let mut x = self.action_input(tape, bound, NUM_ACTIONS, &zero_att)?;
        for m in actions {
            (h, c) = self.lstm_step(tape, bound, &x, &h, &c)?;
            let valid = state.valid_actions();
            let (alpha, attended, probs) = self.step_outputs(tape, bound, enc, &h, &valid)?;
            let p = tape.element(&probs, m.action_id())?;
            logprob = tape.add(&logprob, &tape.log_floored(&p, 1e-20)?)?;
            side.push(alpha);
            state.apply(*m)?;
            x = self.action_input(tape, bound, m.action_id(), &attended)?;
        }
        if !state.is_complete() {
            return Err(ModelError::Contract("action sequence leaves open slots".into()));
        }
        Ok((logprob, side))
    }

    /// Beam-search decode the top-K complete programs. Deterministic: ties
    /// break on the action sequence.
    pub fn decode_beam(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        enc: &ContextualEncoding,
        k: usize,
    ) -> Result<Vec<BeamCandidate>> {
        struct Partial {
            state: GrammarState,
            actions: Vec<ModuleId>,
            h: Tensor,
            c: Tensor,
            x: Tensor,
            logprob: Tensor,
            score: f64,
            side: Vec<QuestionAttention>,
        }
        let (h0, c0) = self.init_state(tape, bound, enc)?;
        let zero_att = tape.vector(vec![0.0; self.d])?;
        let x0 = self.action_input(tape, bound, NUM_ACTIONS, &zero_att)?;
        let mut live = vec![Partial {
            state: GrammarState::new(),
            actions: Vec::new(),
            h: h0,
            c: c0,
            x: x0,
            logprob: tape.scalar(0.0)?,
            score: 0.0,
            side: Vec::new(),
        }];
        let mut finished: Vec<BeamCandidate> = Vec::new();
        while !live.is_empty() {
            let mut expansions: Vec<Partial> = Vec::new();
            for p in live {
                let (h, c) = self.lstm_step(tape, bound, &p.x, &p.h, &p.c)?;
                let valid = p.state.valid_actions();
                let (alpha, attended, probs) = self.step_outputs(tape, bound, enc, &h, &valid)?;
                for m in valid {
                    let prob = tape.element(&probs, m.action_id())?;
                    let lp = tape.log_floored(&prob, 1e-20)?;
                    let mut state = p.state.clone();
                    state.apply(m)?;
                    let mut actions = p.actions.clone();
                    actions.push(m);
                    let mut side = p.side.clone();
                    side.push(alpha.clone());
                    expansions.push(Partial {
                        state,
                        actions,
                        h: h.clone(),
                        c: c.clone(),
                        x: self.action_input(tape, bound, m.action_id(), &attended)?,
                        logprob: tape.add(&p.logprob, &lp)?,
                        score: p.score + lp.scalar(),
                        side,
                    });
                }
            }
            expansions.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| a.actions.iter().map(|m| m.action_id()).cmp(b.actions.iter().map(|m| m.action_id())))
            });
            expansions.truncate(k);
            live = Vec::new();
            for p in expansions {
                if p.state.is_complete() {
                    finished.push(BeamCandidate {
                        program: Program::from_actions(&p.actions)?,
                        logprob: p.logprob,
                        score: p.score,
                        side: p.side,
                    });
                } else {
                    live.push(p);
                }
            }
            if finished.len() >= k {
                break;
            }
        }
        finished.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.program.to_text().cmp(&b.program.to_text()))
        });
        finished.truncate(k);
        if finished.is_empty() {
            return Err(ModelError::Contract("beam search produced no complete program".into()));
        }
        Ok(finished)
    }
}

/// A complete decoded program with its differentiable log-probability and
/// per-node side question attentions.
pub struct BeamCandidate {
    pub program: Program,
    pub logprob: Tensor,
    pub score: f64,
    pub side: Vec<QuestionAttention>,
}

/// The final value a program produces.
pub enum AnswerValue {
    Span(SpanDist),
    Number(NumberDist),
    Date(DateDist),
    Count(CountDist),
    TimeDelta(TimeDeltaDist),
}

impl AnswerValue {
    pub fn kind(&self) -> &'static str {
        match self {
            AnswerValue::Span(_) => "span",
            AnswerValue::Number(_) => "number",
            AnswerValue::Date(_) => "date",
            AnswerValue::Count(_) => "count",
            AnswerValue::TimeDelta(_) => "time-delta",
        }
    }
}

/// Per-node record of a program execution, for traces and for attaching
/// intermediate supervision. `index` is the node's preorder position.
pub struct NodeRecord {
    pub index: usize,
    pub module: ModuleId,
    /// Raw probabilities of the node's output distribution (attention for
    /// attention-typed nodes, value-support probabilities otherwise).
    pub output: Vec<f64>,
}

/// Execution side products used by the auxiliary losses.
#[derive(Default)]
pub struct ExecTrace {
    pub nodes: Vec<NodeRecord>,
    /// Paragraph-to-paragraph maps of executed relocate nodes.
    pub relocate_maps: Vec<Tensor>,
    /// (preorder index, number-value distribution) — outputs of find-num
    /// nodes, pre-extremum distributions of find-max/min-num nodes, and the
    /// operand distributions of number comparisons (attached to the operand
    /// subtree roots).
    pub number_dists: Vec<(usize, Tensor)>,
    /// Same for date-valued distributions.
    pub date_dists: Vec<(usize, Tensor)>,
}

enum Value {
    Att(PassageAttention),
    Num(NumberDist),
    Date(DateDist),
    Count(CountDist),
    Delta(TimeDeltaDist),
    Span(SpanDist),
}

/// Run a program against a passage. `side` must hold one question attention
/// per preorder node. `renormalize` renormalizes comparison outputs.
pub fn execute(
    program: &Program,
    side: &[QuestionAttention],
    ctx: &ExecutionContext,
    mp: &ModuleParams,
    renormalize: bool,
) -> Result<(AnswerValue, ExecTrace)> {
    if side.len() != program.len() {
        return Err(ModelError::Contract(format!(
            "{} side attentions for a {}-node program",
            side.len(),
            program.len()
        )));
    }
    let mut trace = ExecTrace::default();
    let mut idx = 0;
    let value = eval(program, side, ctx, mp, renormalize, &mut idx, &mut trace)?;
    let answer = match value {
        Value::Num(n) => AnswerValue::Number(n),
        Value::Date(d) => AnswerValue::Date(d),
        Value::Count(c) => AnswerValue::Count(c),
        Value::Delta(t) => AnswerValue::TimeDelta(t),
        Value::Span(s) => AnswerValue::Span(s),
        Value::Att(_) => {
            return Err(ModelError::Type("program root produced an attention".into()))
        }
    };
    Ok((answer, trace))
}

fn eval(
    node: &Program,
    side: &[QuestionAttention],
    ctx: &ExecutionContext,
    mp: &ModuleParams,
    renormalize: bool,
    idx: &mut usize,
    trace: &mut ExecTrace,
) -> Result<Value> {
    let my_idx = *idx;
    *idx += 1;
    let q_att = &side[my_idx];
    // evaluate children left to right, remembering their preorder roots
    let mut child_idx = Vec::with_capacity(node.children.len());
    let mut args = Vec::with_capacity(node.children.len());
    for c in &node.children {
        child_idx.push(*idx);
        args.push(eval(c, side, ctx, mp, renormalize, idx, trace)?);
    }
    let att = |v: &Value| -> Result<PassageAttention> {
        match v {
            Value::Att(p) => Ok(p.clone()),
            _ => Err(ModelError::Type(format!(
                "{} expects attention arguments",
                node.module.name()
            ))),
        }
    };
    let value = match node.module {
        ModuleId::Find => Value::Att(mp.find(ctx, q_att)?),
        ModuleId::Filter => Value::Att(mp.filter(ctx, q_att, &att(&args[0])?)?),
        ModuleId::Relocate => {
            let a = att(&args[0])?;
            if !ctx.passage.number_tokens.is_empty() {
                let n = mp.find_num(ctx, &a)?;
                trace.number_dists.push((child_idx[0], n.tensor().clone()));
            }
            let (out, r) = mp.relocate(ctx, q_att, &a)?;
            trace.relocate_maps.push(r);
            Value::Att(out)
        }
        ModuleId::FindNum => {
            let n = mp.find_num(ctx, &att(&args[0])?)?;
            trace.number_dists.push((my_idx, n.tensor().clone()));
            Value::Num(n)
        }
        ModuleId::FindDate => {
            let d = mp.find_date(ctx, &att(&args[0])?)?;
            trace.date_dists.push((my_idx, d.tensor().clone()));
            Value::Date(d)
        }
        ModuleId::Count => {
            let a = att(&args[0])?;
            // expose the input attention's number grounding so intermediate
            // supervision can reach it
            if !ctx.passage.number_tokens.is_empty() {
                let n = mp.find_num(ctx, &a)?;
                trace.number_dists.push((child_idx[0], n.tensor().clone()));
            }
            Value::Count(mp.count(ctx, &a)?)
        }
        ModuleId::CompareNumLt
        | ModuleId::CompareNumGt
        | ModuleId::CompareDateLt
        | ModuleId::CompareDateGt => {
            let dates = matches!(node.module, ModuleId::CompareDateLt | ModuleId::CompareDateGt);
            let less = matches!(node.module, ModuleId::CompareNumLt | ModuleId::CompareDateLt);
            let out = mp.compare(ctx, &att(&args[0])?, &att(&args[1])?, less, dates, renormalize)?;
            if dates {
                trace.date_dists.push((child_idx[0], out.left.clone()));
                trace.date_dists.push((child_idx[1], out.right.clone()));
            } else {
                trace.number_dists.push((child_idx[0], out.left.clone()));
                trace.number_dists.push((child_idx[1], out.right.clone()));
            }
            Value::Att(out.out)
        }
        ModuleId::TimeDiff => {
            let (td, d1, d2) = mp.time_diff(ctx, &att(&args[0])?, &att(&args[1])?)?;
            trace.date_dists.push((child_idx[0], d1));
            trace.date_dists.push((child_idx[1], d2));
            Value::Delta(td)
        }
        ModuleId::FindMaxNum | ModuleId::FindMinNum => {
            let largest = node.module == ModuleId::FindMaxNum;
            let (out, pre) = mp.find_extreme_num(ctx, &att(&args[0])?, largest)?;
            trace.number_dists.push((my_idx, pre.tensor().clone()));
            Value::Att(out)
        }
        ModuleId::Span => Value::Span(mp.span(ctx, &att(&args[0])?)?),
    };
    let output = match &value {
        Value::Att(p) => p.tensor().data().to_vec(),
        Value::Num(n) => n.probs().to_vec(),
        Value::Date(d) => d.probs().to_vec(),
        Value::Count(c) => c.probs().to_vec(),
        Value::Delta(t) => t.probs().to_vec(),
        Value::Span(s) => {
            let mut v = s.start.data().to_vec();
            v.extend_from_slice(s.end.data());
            v
        }
    };
    trace.nodes.push(NodeRecord { index: my_idx, module: node.module, output });
    Ok(value)
}
