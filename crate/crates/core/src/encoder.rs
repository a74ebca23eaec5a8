//! Contextual token encodings: learned embeddings plus a shared multi-layer
//! bidirectional GRU over question and passage. The same cells are reused by
//! the count and span heads.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::params::{BoundParams, Init, ParamStore};
use crate::tensor::{Tape, Tensor};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Token vocabulary. Ids are line numbers in the vocabulary file; ids 0 and 1
/// are reserved for PAD and UNK.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn build<'a>(corpus_tokens: impl Iterator<Item = &'a str>) -> Self {
        let mut tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
        let mut index = HashMap::new();
        index.insert(tokens[0].clone(), 0);
        index.insert(tokens[1].clone(), 1);
        for t in corpus_tokens {
            if !index.contains_key(t) {
                index.insert(t.to_string(), tokens.len());
                tokens.push(t.to_string());
            }
        }
        Vocab { tokens, index }
    }

    pub fn id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK_ID)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != "<pad>" || tokens[1] != "<unk>" {
            return Err(ModelError::Contract("vocabulary missing reserved ids".into()));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocab { tokens, index })
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.tokens.join("\n"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < 2 || tokens[0] != "<pad>" || tokens[1] != "<unk>" {
            return Err(ModelError::Contract("vocabulary file missing reserved ids".into()));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocab { tokens, index })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Hidden size per direction; effective token dimension is twice this.
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        // 2-layer, 64 per direction, d = 128 effective.
        EncoderConfig { vocab_size: 2, embed_dim: 64, hidden_dim: 64, num_layers: 2, dropout: 0.0 }
    }
}

impl EncoderConfig {
    /// Effective contextual dimension (both directions).
    pub fn d(&self) -> usize {
        2 * self.hidden_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 1 || self.embed_dim < 1 || self.hidden_dim < 1 || self.num_layers < 1 {
            return Err(ModelError::Contract("encoder config values must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Contract("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One GRU direction. Weights: `w_x: [in, 3h]`, `u_h: [3h, h]`, `b: [3h]`,
/// gate order (update, reset, candidate).
#[derive(Clone, Debug)]
pub struct GruCell {
    pub prefix: String,
    pub in_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn register(store: &mut ParamStore, prefix: &str, in_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        store.add(&format!("{prefix}.w_x"), vec![in_dim, 3 * hidden_dim], Init::Xavier, rng)?;
        store.add(&format!("{prefix}.u_h"), vec![3 * hidden_dim, hidden_dim], Init::Xavier, rng)?;
        store.add(&format!("{prefix}.b"), vec![3 * hidden_dim], Init::Zeros, rng)?;
        Ok(GruCell { prefix: prefix.to_string(), in_dim, hidden_dim })
    }

    /// Precompute `X w_x + b` for a whole sequence: `[m, in] -> [m, 3h]`.
    fn input_projection(&self, tape: &Tape, bound: &BoundParams, xs: &Tensor) -> Result<Tensor> {
        let wx = tape.matmul(xs, bound.get(&format!("{}.w_x", self.prefix))?)?;
        tape.add_to_rows(&wx, bound.get(&format!("{}.b", self.prefix))?)
    }

    /// One recurrence step given the precomputed input projection row.
    fn step(&self, tape: &Tape, bound: &BoundParams, proj: &Tensor, h: &Tensor) -> Result<Tensor> {
        let hd = self.hidden_dim;
        let uh = tape.matvec(bound.get(&format!("{}.u_h", self.prefix))?, h)?;
        let z = tape.sigmoid(&tape.add(&tape.slice(proj, 0, hd)?, &tape.slice(&uh, 0, hd)?)?)?;
        let r = tape.sigmoid(&tape.add(&tape.slice(proj, hd, hd)?, &tape.slice(&uh, hd, hd)?)?)?;
        let cand_in = tape.add(&tape.slice(proj, 2 * hd, hd)?, &tape.mul(&r, &tape.slice(&uh, 2 * hd, hd)?)?)?;
        let n = tape.tanh(&cand_in)?;
        // h' = z*h + (1-z)*n
        let zh = tape.mul(&z, h)?;
        let one_minus_z = tape.add_const(&tape.neg(&z)?, 1.0)?;
        tape.add(&zh, &tape.mul(&one_minus_z, &n)?)
    }

    /// Single-cell update `gru_cell(x, h) -> h'` for direct use and testing.
    pub fn forward(&self, tape: &Tape, bound: &BoundParams, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        if x.len() != self.in_dim || h.len() != self.hidden_dim {
            return Err(ModelError::shape(format!(
                "gru_cell dims: x {:?} (want {}), h {:?} (want {})",
                x.shape(),
                self.in_dim,
                h.shape(),
                self.hidden_dim
            )));
        }
        let xs = tape.stack_rows(std::slice::from_ref(x))?;
        let proj = self.input_projection(tape, bound, &xs)?;
        let proj_row = tape.row(&proj, 0)?;
        self.step(tape, bound, &proj_row, h)
    }

    /// Run over a sequence, optionally reversed. Returns per-position hidden
    /// states in input order plus the final state.
    pub fn run(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        xs: &Tensor,
        reverse: bool,
    ) -> Result<(Vec<Tensor>, Tensor)> {
        let m = xs.shape()[0];
        let proj = self.input_projection(tape, bound, xs)?;
        let mut h = tape.vector(vec![0.0; self.hidden_dim])?;
        let mut states: Vec<Option<Tensor>> = vec![None; m];
        let order: Vec<usize> = if reverse { (0..m).rev().collect() } else { (0..m).collect() };
        for t in order {
            let proj_row = tape.row(&proj, t)?;
            h = self.step(tape, bound, &proj_row, &h)?;
            states[t] = Some(h.clone());
        }
        Ok((states.into_iter().map(Option::unwrap).collect(), h))
    }
}

/// A stack of bidirectional GRU layers over an already-embedded sequence.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub layers: Vec<(GruCell, GruCell)>,
}

impl BiGru {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let dim = if l == 0 { in_dim } else { 2 * hidden_dim };
            let fwd = GruCell::register(store, &format!("{prefix}.l{l}.fwd"), dim, hidden_dim, rng)?;
            let bwd = GruCell::register(store, &format!("{prefix}.l{l}.bwd"), dim, hidden_dim, rng)?;
            layers.push((fwd, bwd));
        }
        Ok(BiGru { layers })
    }

    /// Encode a sequence: `[m, in] -> ([m, 2h], final-state [2h])`.
    pub fn run(&self, tape: &Tape, bound: &BoundParams, xs: &Tensor) -> Result<(Tensor, Tensor)> {
        let m = xs.shape()[0];
        let mut input = xs.clone();
        let mut final_state = None;
        for (fwd, bwd) in &self.layers {
            let (fs, f_last) = fwd.run(tape, bound, &input, false)?;
            let (bs, b_last) = bwd.run(tape, bound, &input, true)?;
            let rows: Vec<Tensor> = (0..m)
                .map(|t| tape.concat(&[&fs[t], &bs[t]]))
                .collect::<Result<_>>()?;
            input = tape.stack_rows(&rows)?;
            final_state = Some(tape.concat(&[&f_last, &b_last])?);
        }
        Ok((input, final_state.expect("at least one layer")))
    }
}

/// Question and passage encodings plus the question's final recurrent state.
#[derive(Clone, Debug)]
pub struct ContextualEncoding {
    /// `[n, d]`
    pub q: Tensor,
    /// `[m, d]`
    pub p: Tensor,
    /// `[d]`, seeds the decoder state.
    pub q_final: Tensor,
}

/// Learned token embeddings plus the shared bidirectional GRU.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    gru: BiGru,
}

impl Encoder {
    pub fn register(store: &mut ParamStore, config: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        store.add("embed", vec![config.vocab_size, config.embed_dim], Init::Uniform(0.1), rng)?;
        let gru = BiGru::register(store, "enc", config.embed_dim, config.hidden_dim, config.num_layers, rng)?;
        Ok(Encoder { config, gru })
    }

    fn embed(&self, tape: &Tape, bound: &BoundParams, ids: &[usize]) -> Result<Tensor> {
        let clipped: Vec<usize> = ids
            .iter()
            .map(|&i| if i < self.config.vocab_size { i } else { UNK_ID })
            .collect();
        tape.gather_rows(bound.get("embed")?, &clipped)
    }

    fn maybe_dropout(&self, tape: &Tape, x: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let rate = self.config.dropout;
        match rng {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 - rate;
                let mask: Vec<f64> = (0..x.len())
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let m = tape.tensor(x.shape().to_vec(), mask)?;
                tape.mul(x, &m)
            }
            _ => Ok(x.clone()),
        }
    }

    /// Encode question and passage token ids with the same GRU.
    pub fn encode(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        q_ids: &[usize],
        p_ids: &[usize],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ContextualEncoding> {
        if q_ids.is_empty() || p_ids.is_empty() {
            return Err(ModelError::Contract("encode requires non-empty token lists".into()));
        }
        let q_emb = self.embed(tape, bound, q_ids)?;
        let q_emb = self.maybe_dropout(tape, &q_emb, dropout_rng.as_deref_mut())?;
        let (q, q_final) = self.gru.run(tape, bound, &q_emb)?;
        let p_emb = self.embed(tape, bound, p_ids)?;
        let p_emb = self.maybe_dropout(tape, &p_emb, dropout_rng.as_deref_mut())?;
        let (p, _) = self.gru.run(tape, bound, &p_emb)?;
        Ok(ContextualEncoding { q, p, q_final })
    }
}
