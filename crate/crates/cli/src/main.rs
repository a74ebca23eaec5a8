//! Command-line surface: corpus generation, count-head pretraining, training,
//! evaluation, and per-question execution traces.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use modnet_core::annotate::AnnotatedPassage;
use modnet_core::data::{self, Category, GenConfig};
use modnet_core::encoder::{EncoderConfig, Vocab};
use modnet_core::error::ModelError;
use modnet_core::modules::{ExecutionContext, ModuleParams};
use modnet_core::params::{Param, ParamStore};
use modnet_core::program::execute;
use modnet_core::tensor::Tape;
use modnet_core::train::{
    self, evaluate, gold_text, prepare, pretrain_count, Model, TrainConfig,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CONFIG_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "modnet", version, about = "module-network QA over text")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic QA corpus (JSONL) plus its vocabulary file.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        size: usize,
        /// Corpus path; the vocabulary is written next to it with a .vocab
        /// extension.
        #[arg(long)]
        out: PathBuf,
        /// Override a category weight, e.g. --mix count=0 (repeatable).
        #[arg(long)]
        mix: Vec<String>,
        #[arg(long, default_value_t = 0.10)]
        program_fraction: f64,
        #[arg(long, default_value_t = 0.05)]
        intermediate_fraction: f64,
        /// Debug mode: program + intermediate supervision on every example.
        #[arg(long)]
        gold_plan: bool,
    },
    /// Pretrain the count head on synthetic attention instances.
    PretrainCount {
        /// Run-config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path for the pretrained parameters.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full model on a generated corpus.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training corpus (JSONL) with a sibling .vocab file.
        #[arg(long)]
        data: PathBuf,
        /// Held-out corpus evaluated after each epoch.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Checkpoint path; metrics go next to it with a .metrics.jsonl
        /// extension.
        #[arg(long)]
        out: PathBuf,
        /// Load matching parameters (e.g. a pretrained count head) before
        /// training.
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// Ablation: drop the window auxiliary loss.
        #[arg(long)]
        no_aux_loss: bool,
        /// Ablation: drop intermediate module-output supervision.
        #[arg(long)]
        no_module_output_loss: bool,
    },
    /// Print the EM/F1 table of a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Dump the decoded programs, attentions, and module outputs for one
    /// question as JSON.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        question_id: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EncoderSettings {
    embed_dim: usize,
    hidden_dim: usize,
    num_layers: usize,
    dropout: f64,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        EncoderSettings { embed_dim: 64, hidden_dim: 64, num_layers: 2, dropout: 0.0 }
    }
}

impl EncoderSettings {
    fn to_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PretrainSettings {
    seed: u64,
    max_steps: usize,
    batch_size: usize,
    learning_rate: f64,
    target_accuracy: f64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings {
            seed: 0,
            max_steps: 50_000,
            batch_size: 16,
            learning_rate: 0.01,
            target_accuracy: 0.93,
        }
    }
}

/// On-disk run configuration; unknown keys are rejected.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    version: u32,
    encoder: EncoderSettings,
    train: TrainConfig,
    pretrain: PretrainSettings,
}

/// Self-contained model snapshot: settings, vocabulary, and parameters.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    encoder: EncoderSettings,
    train: TrainConfig,
    vocab: Vec<String>,
    params: BTreeMap<String, Param>,
}

impl Checkpoint {
    fn write(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    fn read(path: &Path) -> anyhow::Result<Checkpoint> {
        let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ckpt.version != CONFIG_VERSION {
            anyhow::bail!("unsupported checkpoint version {}", ckpt.version);
        }
        Ok(ckpt)
    }

    /// Rebuild the model and load the stored parameter values.
    fn restore(&self) -> anyhow::Result<(ParamStore, Model, Vocab)> {
        let vocab = Vocab::from_tokens(self.vocab.clone())?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::register(&mut store, self.encoder.to_config(vocab.len()), &mut rng)?;
        let loaded = ParamStore::from_map(self.params.clone())?;
        store.load_subset_from(&loaded, "")?;
        Ok((store, model, vocab))
    }
}

fn load_run_config(path: &Option<PathBuf>) -> anyhow::Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig { version: CONFIG_VERSION, ..RunConfig::default() });
    };
    let cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if cfg.version != CONFIG_VERSION {
        anyhow::bail!("unsupported config version {} (expected {CONFIG_VERSION})", cfg.version);
    }
    Ok(cfg)
}

fn vocab_path(data: &Path) -> PathBuf {
    data.with_extension("vocab")
}

fn parse_mix(overrides: &[String], base: &mut Vec<(Category, f64)>) -> anyhow::Result<()> {
    for item in overrides {
        let (name, weight) = item
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("--mix expects category=weight, got {item:?}"))?;
        let cat = Category::from_name(name)
            .ok_or_else(|| anyhow::anyhow!("unknown category {name:?}"))?;
        let w: f64 = weight.parse()?;
        if w < 0.0 {
            anyhow::bail!("mix weight for {name} must be >= 0");
        }
        base.iter_mut().find(|(c, _)| *c == cat).expect("all categories present").1 = w;
    }
    Ok(())
}

fn cmd_gen_data(
    seed: u64,
    size: usize,
    out: &Path,
    mix: &[String],
    program_fraction: f64,
    intermediate_fraction: f64,
    gold_plan: bool,
) -> anyhow::Result<()> {
    let mut cfg = GenConfig {
        size,
        seed,
        program_fraction,
        intermediate_fraction,
        gold_plan,
        ..GenConfig::default()
    };
    parse_mix(mix, &mut cfg.mix)?;
    let corpus = data::generate_corpus(&cfg)?;
    data::write_jsonl(out, &corpus)?;
    let tokens: Vec<String> = corpus
        .iter()
        .flat_map(|e| e.question_tokens().into_iter().chain(e.passage_tokens()))
        .collect();
    let vocab = Vocab::build(tokens.iter().map(String::as_str));
    vocab.save(&vocab_path(out))?;

    let mut hist: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &corpus {
        *hist.entry(e.category.name()).or_default() += 1;
    }
    let supervised = corpus.iter().filter(|e| e.program.is_some()).count();
    println!("wrote {} examples to {}", corpus.len(), out.display());
    println!("vocabulary: {} tokens -> {}", vocab.len(), vocab_path(out).display());
    println!("program-supervised: {supervised}");
    for (cat, n) in &hist {
        println!("{cat:20} {n}");
    }
    Ok(())
}

fn cmd_pretrain_count(config: &Option<PathBuf>, out: &Path) -> anyhow::Result<()> {
    let cfg = load_run_config(config)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pretrain.seed);
    // only the module parameters exist here; the count head is what trains
    let d = 2 * cfg.encoder.hidden_dim;
    let modules = ModuleParams::register(&mut store, d, &mut rng)?;
    let report = pretrain_count(
        &mut store,
        &modules.count_head,
        cfg.pretrain.seed,
        cfg.pretrain.max_steps,
        cfg.pretrain.batch_size,
        cfg.pretrain.learning_rate,
        cfg.pretrain.target_accuracy,
    )?;
    let ckpt = Checkpoint {
        version: CONFIG_VERSION,
        encoder: cfg.encoder,
        train: cfg.train,
        vocab: vec!["<pad>".into(), "<unk>".into()],
        params: store.sorted_map().into_iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
    };
    ckpt.write(out)?;
    println!(
        "pretrained count head: {} instances, final loss {:.4}, held-out accuracy {:.3}",
        report.steps, report.final_loss, report.heldout_accuracy
    );
    Ok(())
}

fn load_prepared(
    path: &Path,
    vocab: &Vocab,
) -> anyhow::Result<Vec<modnet_core::train::PreparedExample>> {
    let examples = data::read_jsonl(path)?;
    Ok(prepare(vocab, &examples)?)
}

fn cmd_train(
    config: &Option<PathBuf>,
    data_path: &Path,
    eval_data: &Option<PathBuf>,
    out: &Path,
    init_from: &Option<PathBuf>,
    no_aux_loss: bool,
    no_module_output_loss: bool,
) -> anyhow::Result<()> {
    let cfg = load_run_config(config)?;
    let mut train_cfg = cfg.train.clone();
    if no_aux_loss {
        train_cfg.use_aux_loss = false;
    }
    if no_module_output_loss {
        train_cfg.use_module_output_loss = false;
    }
    let vocab = Vocab::load(&vocab_path(data_path))?;
    let train_set = load_prepared(data_path, &vocab)?;
    let eval_set = match eval_data {
        Some(p) => load_prepared(p, &vocab)?,
        None => Vec::new(),
    };

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let model = Model::register(&mut store, cfg.encoder.to_config(vocab.len()), &mut rng)?;
    if let Some(init) = init_from {
        let init_ckpt = Checkpoint::read(init)?;
        let loaded = ParamStore::from_map(init_ckpt.params)?;
        let mut n = 0;
        for name in loaded.names().map(str::to_string).collect::<Vec<_>>() {
            if store.get(&name).is_some() {
                n += store.load_subset_from(&loaded, &name)?;
            }
        }
        println!("initialized {n} parameter tensors from {}", init.display());
    }

    let metrics_path = out.with_extension("metrics.jsonl");
    std::fs::write(&metrics_path, "")?;
    let metrics = train::train(&mut store, &model, &train_cfg, &train_set, &eval_set, |m| {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(ModelError::from)?;
        let line = serde_json::to_string(m).map_err(ModelError::from)?;
        writeln!(f, "{line}").map_err(ModelError::from)?;
        Ok(())
    })?;

    let ckpt = Checkpoint {
        version: CONFIG_VERSION,
        encoder: cfg.encoder,
        train: train_cfg,
        vocab: vocab.tokens().to_vec(),
        params: store.sorted_map().into_iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
    };
    ckpt.write(out)?;

    if let Some(last) = metrics.last() {
        println!(
            "trained {} epochs; final loss {:.4}, eval EM {:.3} F1 {:.3}",
            metrics.len(),
            last.total_loss,
            last.eval.overall_em,
            last.eval.overall_f1
        );
    }
    println!("checkpoint: {}", out.display());
    println!("metrics: {}", metrics_path.display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data_path: &Path) -> anyhow::Result<()> {
    let ckpt = Checkpoint::read(checkpoint)?;
    let (store, model, vocab) = ckpt.restore()?;
    let data = load_prepared(data_path, &vocab)?;
    let report = evaluate(&store, &model, &ckpt.train, &data)?;
    println!("{:20} {:>7} {:>7} {:>6}", "category", "EM", "F1", "n");
    for (cat, (em, f1, n)) in &report.per_category {
        println!("{cat:20} {em:7.3} {f1:7.3} {n:6}");
    }
    println!("{:20} {:7.3} {:7.3} {:6}", "overall", report.overall_em, report.overall_f1, data.len());
    Ok(())
}

#[derive(Serialize)]
struct TraceCandidate {
    program: String,
    score: f64,
}

#[derive(Serialize)]
struct TraceNode {
    index: usize,
    module: String,
    output: Vec<f64>,
}

#[derive(Serialize)]
struct TraceValueDist<T: Serialize> {
    node: usize,
    support: Vec<T>,
    probs: Vec<f64>,
}

#[derive(Serialize)]
struct TraceMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize)]
struct TraceDump {
    question_id: String,
    category: String,
    question: String,
    passage: String,
    gold_answer: String,
    candidates: Vec<TraceCandidate>,
    executed_program: String,
    answer: String,
    /// One question-attention vector per decoding step of the executed
    /// program.
    question_attentions: Vec<Vec<f64>>,
    nodes: Vec<TraceNode>,
    number_distributions: Vec<TraceValueDist<f64>>,
    date_distributions: Vec<TraceValueDist<(i32, u32, u32)>>,
    relocate_maps: Vec<TraceMatrix>,
}

fn cmd_trace(
    checkpoint: &Path,
    data_path: &Path,
    question_id: &str,
    out: &Path,
) -> anyhow::Result<()> {
    let ckpt = Checkpoint::read(checkpoint)?;
    let (store, model, vocab) = ckpt.restore()?;
    let examples = data::read_jsonl(data_path)?;
    let example = examples
        .iter()
        .find(|e| e.id == question_id)
        .ok_or_else(|| anyhow::anyhow!("question id {question_id:?} not found in {}", data_path.display()))?;

    let tape = Tape::new();
    let bound = store.bind(&tape)?;
    let q_ids = vocab.ids(&example.question_tokens());
    let p_ids = vocab.ids(&example.passage_tokens());
    let passage = AnnotatedPassage::annotate(example.passage_tokens());
    let enc = model.encoder.encode(&tape, &bound, &q_ids, &p_ids, None)?;
    let ctx = ExecutionContext::new(&tape, &bound, &enc, &passage);
    let cands = model.decoder.decode_beam(&tape, &bound, &enc, ckpt.train.beam_size)?;

    let mut executed = None;
    for cand in &cands {
        match execute(&cand.program, &cand.side, &ctx, &model.modules, ckpt.train.renormalize_compare) {
            Ok((answer, trace)) => {
                executed = Some((cand, answer, trace));
                break;
            }
            Err(ModelError::UnsupportedProgram(_)) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    let (cand, answer, trace) =
        executed.ok_or_else(|| anyhow::anyhow!("no beam candidate executable on this passage"))?;

    let prep_set = prepare(&vocab, std::slice::from_ref(example))?;
    let dump = TraceDump {
        question_id: example.id.clone(),
        category: example.category.name().to_string(),
        question: example.question.clone(),
        passage: example.passage.clone(),
        gold_answer: gold_text(&example.answer),
        candidates: cands
            .iter()
            .map(|c| TraceCandidate { program: c.program.to_text(), score: c.score })
            .collect(),
        executed_program: cand.program.to_text(),
        answer: train::answer_display(&answer, &prep_set[0]),
        question_attentions: cand.side.iter().map(|a| a.tensor().data().to_vec()).collect(),
        nodes: trace
            .nodes
            .iter()
            .map(|n| TraceNode {
                index: n.index,
                module: n.module.name().to_string(),
                output: n.output.clone(),
            })
            .collect(),
        number_distributions: trace
            .number_dists
            .iter()
            .map(|(i, t)| TraceValueDist {
                node: *i,
                support: passage.unique_numbers.clone(),
                probs: t.data().to_vec(),
            })
            .collect(),
        date_distributions: trace
            .date_dists
            .iter()
            .map(|(i, t)| TraceValueDist {
                node: *i,
                support: passage.unique_dates.clone(),
                probs: t.data().to_vec(),
            })
            .collect(),
        relocate_maps: trace
            .relocate_maps
            .iter()
            .map(|r| TraceMatrix {
                rows: r.shape()[0],
                cols: r.shape()[1],
                data: r.data().to_vec(),
            })
            .collect(),
    };
    std::fs::write(out, serde_json::to_string_pretty(&dump)?)?;
    println!("trace for {question_id}: {} -> {:?}", dump.executed_program, dump.answer);
    println!("written to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.cmd {
        Cmd::GenData { seed, size, out, mix, program_fraction, intermediate_fraction, gold_plan } => {
            cmd_gen_data(*seed, *size, out, mix, *program_fraction, *intermediate_fraction, *gold_plan)
        }
        Cmd::PretrainCount { config, out } => cmd_pretrain_count(config, out),
        Cmd::Train { config, data, eval_data, out, init_from, no_aux_loss, no_module_output_loss } => {
            cmd_train(config, data, eval_data, out, init_from, *no_aux_loss, *no_module_output_loss)
        }
        Cmd::Eval { checkpoint, data } => cmd_eval(checkpoint, data),
        Cmd::Trace { checkpoint, data, question_id, out } => {
            cmd_trace(checkpoint, data, question_id, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e
                .downcast_ref::<ModelError>()
                .is_some_and(|m| matches!(m, ModelError::Numeric(_)));
            if numeric {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
