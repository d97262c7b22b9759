//! Subcommand implementations. Each one resolves its config, writes it to
//! `<out>/config.resolved`, and writes every output file atomically.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use xt2t::checkpoint::{Checkpoint, Phase};
use xt2t::corpus::{
    generate_cipher_data, load_alignments, load_monolingual, load_parallel, pairs_to_pharaoh, pairs_to_tsv,
    sentences_to_text, CipherConfig, MonolingualCorpus, ParallelCorpus,
};
use xt2t::corruption::{make_mt, make_sc, make_tpsc, make_tsc, Task, TrainingExample};
use xt2t::eval::{
    accuracy, aer, align_pair, metrics_csv, ner_f1, qa_scores, retrieval_by_layer, retrieval_csv, rouge_l, rouge_n,
    AlignmentSet, MetricRow, RetrievalAccuracy,
};
use xt2t::io::write_atomic;
use xt2t::model::ModelConfig;
use xt2t::optim::OptimizerConfig;
use xt2t::pnat::partition_groups;
use xt2t::tasks::{constrained_greedy_decode, greedy_decode, parse_ner_output, TaskDataset, TaskKind};
use xt2t::trainer::{
    self, step_rng, Corpora, FinetunePlan, PretrainPlan, StepMetrics, FINETUNE_CSV_HEADER, PRETRAIN_CSV_HEADER,
};
use xt2t::vocab::{TokenId, Vocabulary};
use xt2t::{Error, Result};

use crate::config::RunConfig;
use crate::RunArgs;

pub const RESOLVED_CONFIG: &str = "config.resolved";

fn resolve(args: &RunArgs, defaults: &[(&str, &str)]) -> Result<RunConfig> {
    let cfg = RunConfig::resolve(defaults, args.config.as_deref(), &args.set, args.seed)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write_atomic(&args.out.join(RESOLVED_CONFIG), cfg.to_text().as_bytes())?;
    Ok(cfg)
}

/// Streams lines into a hidden temporary file and renames it into place.
struct AtomicLines {
    tmp: PathBuf,
    path: PathBuf,
    w: BufWriter<File>,
}

impl AtomicLines {
    fn create(path: &Path) -> Result<Self> {
        let name = path
            .file_name()
            .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
        let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
        let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        Ok(Self {
            tmp,
            path: path.to_path_buf(),
            w: BufWriter::new(f),
        })
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.w, "{s}").map_err(|e| Error::io(&self.tmp, e))
    }

    fn finish(self) -> Result<()> {
        let f = self.w.into_inner().map_err(|e| Error::io(&self.tmp, e.into_error()))?;
        f.sync_all().map_err(|e| Error::io(&self.tmp, e))?;
        std::fs::rename(&self.tmp, &self.path).map_err(|e| Error::io(&self.path, e))
    }
}

const GEN_DATA_KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("vocab_size", "64"),
    ("n_pairs", "20000"),
    ("n_mono", "20000"),
    ("n_test", "500"),
    ("min_len", "6"),
    ("max_len", "14"),
    ("reorder_window", "3"),
    ("branching", "4"),
    ("sentinels", "100"),
    ("vocab_max", "100000"),
];

/// Files of a generated dataset directory.
pub struct DataLayout;

impl DataLayout {
    pub const TRAIN: &'static str = "train.tsv";
    pub const TRAIN_ALIGN: &'static str = "train.align";
    pub const MONO_SRC: &'static str = "mono.src.txt";
    pub const MONO_TGT: &'static str = "mono.tgt.txt";
    pub const TEST: &'static str = "test.tsv";
    pub const TEST_ALIGN: &'static str = "test.align";
    pub const VOCAB: &'static str = "vocab.txt";
}

pub fn gen_data(args: &RunArgs) -> Result<()> {
    let c = resolve(args, GEN_DATA_KEYS)?;
    let cipher = CipherConfig {
        vocab_size: c.get("vocab_size")?,
        n_pairs: c.get("n_pairs")?,
        min_len: c.get("min_len")?,
        max_len: c.get("max_len")?,
        reorder_window: c.get("reorder_window")?,
        branching: c.get("branching")?,
    };
    let data = generate_cipher_data(&cipher, c.get("seed")?, c.get("n_mono")?, c.get("n_test")?)?;
    let joined = |s: &Vec<String>| s.join(" ");
    let lines: Vec<String> = data
        .train
        .iter()
        .flat_map(|p| [joined(&p.src), joined(&p.tgt)])
        .chain(data.mono_src.iter().map(joined))
        .chain(data.mono_tgt.iter().map(joined))
        .collect();
    let vocab = Vocabulary::build(lines.iter().map(String::as_str), c.get("vocab_max")?, c.get("sentinels")?)?;
    let out = &args.out;
    write_atomic(&out.join(DataLayout::TRAIN), pairs_to_tsv(&data.train).as_bytes())?;
    write_atomic(&out.join(DataLayout::TRAIN_ALIGN), pairs_to_pharaoh(&data.train).as_bytes())?;
    write_atomic(&out.join(DataLayout::TEST), pairs_to_tsv(&data.test).as_bytes())?;
    write_atomic(&out.join(DataLayout::TEST_ALIGN), pairs_to_pharaoh(&data.test).as_bytes())?;
    write_atomic(&out.join(DataLayout::MONO_SRC), sentences_to_text(&data.mono_src).as_bytes())?;
    write_atomic(&out.join(DataLayout::MONO_TGT), sentences_to_text(&data.mono_tgt).as_bytes())?;
    write_atomic(&out.join(DataLayout::VOCAB), vocab.to_text().as_bytes())?;
    println!(
        "wrote {} train pairs, {}+{} monolingual sentences, {} test pairs, |V|={}",
        data.train.len(),
        data.mono_src.len(),
        data.mono_tgt.len(),
        data.test.len(),
        vocab.len()
    );
    Ok(())
}

const CORRUPT_KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("task", "SC"),
    ("input", ""),
    ("vocab", ""),
    ("density", "0.5"),
    ("mean_span_len", "3"),
    ("n_groups", "3"),
];

#[derive(Serialize)]
struct DumpLine<'a> {
    task: Task,
    input: &'a str,
    target: &'a str,
    span_starts: &'a [usize],
    groups: &'a [(usize, usize)],
}

fn dump_line(ex: &TrainingExample, vocab: &Vocabulary) -> Result<String> {
    let line = DumpLine {
        task: ex.task,
        input: &vocab.decode(&ex.input)?,
        target: &vocab.decode(&ex.target)?,
        span_starts: &ex.span_starts,
        groups: &ex.groups,
    };
    serde_json::to_string(&line).map_err(|e| Error::Format(e.to_string()))
}

/// One JSON line per input sentence (SC) or pair (other tasks). Example `n`
/// draws its spans from its own random stream, so the dump is a pure
/// function of `(seed, input)`.
pub fn corrupt(args: &RunArgs) -> Result<()> {
    let c = resolve(args, CORRUPT_KEYS)?;
    let task: Task = c.str("task").parse()?;
    let vocab = Vocabulary::load(&c.path("vocab")?)?;
    let input = c.path("input")?;
    let seed: u64 = c.get("seed")?;
    let density: f64 = c.get("density")?;
    let mean: usize = c.get("mean_span_len")?;
    let n_groups: usize = c.get("n_groups")?;
    let out = args.out.join("corrupt.jsonl");
    let mut w = AtomicLines::create(&out)?;
    let mut emit = |n: usize, ex: Result<TrainingExample>| -> Result<()> {
        let mut ex = ex.map_err(|e| annotate(e, n))?;
        ex.groups = partition_groups(&ex, n_groups)?.ranges().to_vec();
        w.line(&dump_line(&ex, &vocab)?)
    };
    let count = match task {
        Task::Sc => {
            let mono = load_monolingual(&input, "mono", &vocab)?;
            for (n, s) in mono.sentences.iter().enumerate() {
                emit(n, make_sc(s, density, mean, &mut step_rng(seed, n as u64), &vocab))?;
            }
            mono.sentences.len()
        }
        _ => {
            let par = load_parallel(&input, ("src", "tgt"), &vocab)?.corpus;
            for (n, (e, f)) in par.pairs.iter().enumerate() {
                let rng = &mut step_rng(seed, n as u64);
                let ex = match task {
                    Task::Mt => make_mt(e, f),
                    Task::Tpsc => make_tpsc(e, f, density, mean, rng, &vocab),
                    _ => make_tsc(e, f, density, mean, rng, &vocab),
                };
                emit(n, ex)?;
            }
            par.pairs.len()
        }
    };
    w.finish()?;
    println!("wrote {count} {task} examples to {}", out.display());
    Ok(())
}

fn annotate(e: Error, n: usize) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("example {n}: {m}")),
        Error::Data(m) => Error::Data(format!("example {n}: {m}")),
        other => other,
    }
}

const PRETRAIN_KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("data", ""),
    ("vocab", ""),
    ("mono", ""),
    ("parallel", ""),
    ("task", "TSC"),
    ("n_groups", "3"),
    ("density", "0.5"),
    ("mean_span_len", "3"),
    ("batch_size", "16"),
    ("steps", "2000"),
    ("alpha", "0.7"),
    ("model", "desk"),
    ("d_model", ""),
    ("d_ff", ""),
    ("n_heads", ""),
    ("n_layers_enc", ""),
    ("n_layers_dec", ""),
    ("max_len", ""),
    ("lr", "3e-3"),
    ("warmup", ""),
    ("beta1", "0.9"),
    ("beta2", "0.999"),
    ("eps", "1e-6"),
    ("clip_norm", "1.0"),
    ("checkpoint_every", "0"),
    ("resume", ""),
];

const SWEEP_EXTRA_KEYS: &[(&str, &str)] = &[("densities", "0.15,0.3,0.5,1.0"), ("eval_pairs", "")];

fn data_file(c: &RunConfig, key: &str, default_name: &str) -> Result<PathBuf> {
    match (c.opt_str(key), c.opt_str("data")) {
        (Some(p), _) => Ok(PathBuf::from(p)),
        (None, Some(d)) => Ok(Path::new(d).join(default_name)),
        (None, None) => Err(Error::InvalidArgument(format!("set `{key}` or `data`"))),
    }
}

fn lang_of(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let lang = stem.rsplit('.').next().unwrap_or(&stem).to_string();
    if lang.is_empty() {
        "mono".into()
    } else {
        lang
    }
}

fn model_config(c: &RunConfig, vocab_size: usize) -> Result<ModelConfig> {
    let mut m = match c.str("model") {
        "desk" => ModelConfig::desk(vocab_size),
        "tiny" => ModelConfig::tiny(vocab_size),
        "small" => ModelConfig::small(vocab_size),
        other => return Err(Error::InvalidArgument(format!("unknown model preset {other:?}"))),
    };
    let fields: [(&str, &mut usize); 6] = [
        ("d_model", &mut m.d_model),
        ("d_ff", &mut m.d_ff),
        ("n_heads", &mut m.n_heads),
        ("n_layers_enc", &mut m.n_layers_enc),
        ("n_layers_dec", &mut m.n_layers_dec),
        ("max_len", &mut m.max_len),
    ];
    for (k, slot) in fields {
        if let Some(v) = c.opt(k)? {
            *slot = v;
        }
    }
    m.validate()?;
    Ok(m)
}

fn optimizer_config(c: &RunConfig, steps: u64) -> Result<OptimizerConfig> {
    let cfg = OptimizerConfig {
        beta1: c.get("beta1")?,
        beta2: c.get("beta2")?,
        eps: c.get("eps")?,
        base_lr: c.get("lr")?,
        warmup_steps: c.opt("warmup")?.unwrap_or((steps / 10).max(1)),
        total_steps: steps,
        clip_norm: c.get("clip_norm")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cross_task(s: &str) -> Result<Option<Task>> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    match s.parse()? {
        Task::Sc => Err(Error::InvalidArgument("task must be none, MT, TPSC or TSC".into())),
        t => Ok(Some(t)),
    }
}

struct PretrainInputs {
    vocab: Vocabulary,
    mono: Vec<MonolingualCorpus>,
    parallel: Vec<ParallelCorpus>,
}

fn load_pretrain_inputs(c: &RunConfig, task: Option<Task>) -> Result<PretrainInputs> {
    let vocab = Vocabulary::load(&data_file(c, "vocab", DataLayout::VOCAB)?)?;
    let mono_paths: Vec<PathBuf> = match c.opt_str("mono") {
        Some(list) => list.split(',').map(|s| PathBuf::from(s.trim())).collect(),
        None => vec![
            data_file(c, "mono", DataLayout::MONO_SRC)?,
            data_file(c, "mono", DataLayout::MONO_TGT)?,
        ],
    };
    let mono = mono_paths
        .iter()
        .map(|p| load_monolingual(p, &lang_of(p), &vocab))
        .collect::<Result<Vec<_>>>()?;
    let parallel = match task {
        None => Vec::new(),
        Some(_) => vec![load_parallel(&data_file(c, "parallel", DataLayout::TRAIN)?, ("src", "tgt"), &vocab)?.corpus],
    };
    Ok(PretrainInputs { vocab, mono, parallel })
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

/// Runs a pretraining job described by `c` into `out`; returns the metrics
/// of this invocation.
fn run_pretrain(c: &RunConfig, out: &Path) -> Result<Vec<StepMetrics>> {
    let task = cross_task(c.str("task"))?;
    let inputs = load_pretrain_inputs(c, task)?;
    let steps: u64 = c.get("steps")?;
    let plan = PretrainPlan {
        cross_task: task,
        n_groups: c.get("n_groups")?,
        noise_density: c.get("density")?,
        mean_span_len: c.get("mean_span_len")?,
        batch_size: c.get("batch_size")?,
        steps,
        seed: c.get("seed")?,
        alpha: c.get("alpha")?,
    };
    plan.validate()?;
    let mut state = match c.opt_str("resume") {
        Some(p) => {
            let s = Checkpoint::load(Path::new(p))?;
            if s.phase != Phase::Pretrain {
                return Err(Error::InvalidArgument(format!("{p} is not a pretraining checkpoint")));
            }
            s
        }
        None => {
            let model = model_config(c, inputs.vocab.len())?;
            trainer::init_pretrain(&model, optimizer_config(c, steps)?, &inputs.vocab, plan.seed)?
        }
    };
    let every: u64 = c.get("checkpoint_every")?;
    let corpora = Corpora {
        mono: &inputs.mono,
        parallel: &inputs.parallel,
    };
    let log = trainer::pretrain(&plan, corpora, &inputs.vocab, &mut state, |m, s| {
        if every > 0 && m.step % every == 0 && m.step < steps {
            s.save(&out.join(format!("checkpoint-{}.bin", m.step)))?;
        }
        Ok(())
    })?;
    state.save(&out.join("checkpoint.bin"))?;
    write_csv(&out.join("metrics.csv"), PRETRAIN_CSV_HEADER, log.iter().map(StepMetrics::csv_row))?;
    Ok(log)
}

pub fn pretrain(args: &RunArgs) -> Result<()> {
    let c = resolve(args, PRETRAIN_KEYS)?;
    let log = run_pretrain(&c, &args.out)?;
    match log.last() {
        Some(m) => println!(
            "step {}: loss_total {:.4} (sc {:.4}, x {:.4})",
            m.step, m.loss_total, m.loss_sc, m.loss_x
        ),
        None => println!("checkpoint already at the requested step count"),
    }
    Ok(())
}

const FINETUNE_KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("checkpoint", ""),
    ("vocab", ""),
    ("kind", "classification"),
    ("train", ""),
    ("labels", ""),
    ("steps", "500"),
    ("batch_size", "8"),
    ("lr", "1e-3"),
    ("warmup", ""),
    ("beta1", "0.9"),
    ("beta2", "0.999"),
    ("eps", "1e-6"),
    ("clip_norm", "1.0"),
    ("checkpoint_every", "0"),
    ("resume", ""),
];

fn labels_of(c: &RunConfig) -> Result<Option<Vec<String>>> {
    c.opt_str("labels").map(|_| c.list::<String>("labels")).transpose()
}

pub fn finetune(args: &RunArgs) -> Result<()> {
    let c = resolve(args, FINETUNE_KEYS)?;
    let vocab = Vocabulary::load(&c.path("vocab")?)?;
    let kind: TaskKind = c.str("kind").parse()?;
    let data = TaskDataset::load(kind, &c.path("train")?)?;
    let labels = labels_of(&c)?;
    let examples = data.format(&vocab, labels.as_deref())?;
    let steps: u64 = c.get("steps")?;
    let plan = FinetunePlan {
        batch_size: c.get("batch_size")?,
        steps,
        seed: c.get("seed")?,
    };
    let mut state = match c.opt_str("resume") {
        Some(p) => {
            let s = Checkpoint::load(Path::new(p))?;
            if s.phase != Phase::Finetune {
                return Err(Error::InvalidArgument(format!("{p} is not a fine-tuning checkpoint")));
            }
            s
        }
        None => {
            let pre = Checkpoint::load(&c.path("checkpoint")?)?;
            trainer::start_finetune(&pre, optimizer_config(&c, steps)?, &vocab)?
        }
    };
    let every: u64 = c.get("checkpoint_every")?;
    let out = &args.out;
    let log = trainer::finetune(&plan, &examples, &vocab, &mut state, |m, s| {
        if every > 0 && m.step % every == 0 && m.step < steps {
            s.save(&out.join(format!("finetune-{}.bin", m.step)))?;
        }
        Ok(())
    })?;
    state.save(&out.join("finetune.bin"))?;
    write_csv(&out.join("finetune_metrics.csv"), FINETUNE_CSV_HEADER, log.iter().map(|m| m.csv_row()))?;
    if let Some(m) = log.last() {
        println!("step {}: loss {:.4}", m.step, m.loss);
    }
    Ok(())
}

const EVAL_KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("checkpoint", ""),
    ("vocab", ""),
    ("pairs", ""),
    ("align", ""),
    ("align_layer", ""),
    ("kind", ""),
    ("test", ""),
    ("labels", ""),
    ("max_decode", "64"),
];

fn load_pairs(path: &Path, vocab: &Vocabulary) -> Result<Vec<(Vec<TokenId>, Vec<TokenId>)>> {
    let load = load_parallel(path, ("src", "tgt"), vocab)?;
    if load.rejected > 0 {
        return Err(Error::Data(format!("{}: {} malformed lines", path.display(), load.rejected)));
    }
    Ok(load.corpus.pairs)
}

fn retrieval_rows(by_layer: &[RetrievalAccuracy], rows: &mut Vec<MetricRow>) {
    for (l, r) in by_layer.iter().enumerate() {
        rows.push(MetricRow::new("retrieval_src_to_tgt", format!("layer{l}"), r.src_to_tgt));
        rows.push(MetricRow::new("retrieval_tgt_to_src", format!("layer{l}"), r.tgt_to_src));
        rows.push(MetricRow::new("retrieval_mean", format!("layer{l}"), r.mean));
    }
}

fn alignment_rows(
    params: &xt2t::model::ParameterSet,
    pairs: &[(Vec<TokenId>, Vec<TokenId>)],
    gold_path: &Path,
    layer: usize,
    rows: &mut Vec<MetricRow>,
) -> Result<()> {
    let gold = load_alignments(gold_path)?;
    if gold.len() != pairs.len() {
        return Err(Error::Data(format!("{} alignments for {} pairs", gold.len(), pairs.len())));
    }
    let (mut pred_all, mut gold_all) = (AlignmentSet::new(), AlignmentSet::new());
    // links are keyed by sentence through an offset so one corpus-level AER is computed
    let mut offset = 0;
    for ((e, f), g) in pairs.iter().zip(&gold) {
        let width = e.len().max(f.len()) + 1;
        for (i, j) in align_pair(params, e, f, layer)? {
            pred_all.insert((offset + i, offset + j));
        }
        for &(i, j) in g {
            gold_all.insert((offset + i, offset + j));
        }
        offset += width;
    }
    rows.push(MetricRow::new("aer", format!("layer{layer}"), aer(&pred_all, &gold_all, &gold_all)?));
    Ok(())
}

fn task_rows(
    params: &xt2t::model::ParameterSet,
    data: &TaskDataset,
    vocab: &Vocabulary,
    labels: Option<&[String]>,
    max_decode: usize,
    rows: &mut Vec<MetricRow>,
) -> Result<()> {
    let examples = data.format(vocab, labels)?;
    let mut decoded = Vec::with_capacity(examples.len());
    for ex in &examples {
        let d = match ex.kind {
            TaskKind::Generation => greedy_decode(params, &ex.input_ids, max_decode, vocab)?,
            _ => constrained_greedy_decode(params, ex, max_decode, vocab)?,
        };
        decoded.push(d.body);
    }
    let text = |ids: &[TokenId]| vocab.decode(ids);
    match data.kind() {
        TaskKind::Classification => {
            let preds = decoded.iter().map(|d| text(d)).collect::<Result<Vec<_>>>()?;
            let golds = examples.iter().map(|e| text(e.target_body())).collect::<Result<Vec<_>>>()?;
            rows.push(MetricRow::new("accuracy", "test", accuracy(&preds, &golds)?));
        }
        TaskKind::Qa => {
            let (mut em, mut f1) = (0.0, 0.0);
            for (d, e) in decoded.iter().zip(&examples) {
                let (a, b) = qa_scores(&text(d)?, &text(e.target_body())?);
                em += a;
                f1 += b;
            }
            let n = examples.len() as f64;
            rows.push(MetricRow::new("em", "test", em / n));
            rows.push(MetricRow::new("f1", "test", f1 / n));
        }
        TaskKind::Ner => {
            let (mut pred, mut gold) = (Vec::new(), Vec::new());
            for (k, (d, e)) in decoded.iter().zip(&examples).enumerate() {
                let src = &e.input_ids[1..e.input_ids.len() - 1];
                for ent in parse_ner_output(e.target_body(), src, vocab)? {
                    let (s, t) = ent.span.expect("gold entities occur in their source");
                    gold.push((k, ent.tag, s, t));
                }
                for (n, ent) in parse_ner_output(d, src, vocab)?.into_iter().enumerate() {
                    // unmatched predictions get positions no gold entity has
                    let (s, t) = ent.span.unwrap_or((usize::MAX, n));
                    pred.push((k, ent.tag, s, t));
                }
            }
            let prf = ner_f1(&pred, &gold);
            rows.push(MetricRow::new("precision", "test", prf.precision));
            rows.push(MetricRow::new("recall", "test", prf.recall));
            rows.push(MetricRow::new("f1", "test", prf.f1));
        }
        TaskKind::Generation => {
            let mut sums = [0.0; 3];
            for (d, e) in decoded.iter().zip(&examples) {
                let (cand, refr) = (text(d)?, text(e.target_body())?);
                sums[0] += rouge_n(&cand, &refr, 1)?.f1;
                sums[1] += rouge_n(&cand, &refr, 2)?.f1;
                sums[2] += rouge_l(&cand, &refr).f1;
            }
            let n = examples.len() as f64;
            for (name, s) in ["rouge1", "rouge2", "rougeL"].iter().zip(sums) {
                rows.push(MetricRow::new(*name, "test", s / n));
            }
        }
    }
    Ok(())
}

pub fn eval(args: &RunArgs) -> Result<()> {
    let c = resolve(args, EVAL_KEYS)?;
    let vocab = Vocabulary::load(&c.path("vocab")?)?;
    let ckpt = Checkpoint::load(&c.path("checkpoint")?)?;
    ckpt.check_vocab(&vocab)?;
    let params = &ckpt.params;
    let mut rows = Vec::new();
    let mut did_something = false;
    if let Some(p) = c.opt_str("pairs") {
        let pairs = load_pairs(Path::new(p), &vocab)?;
        let by_layer = retrieval_by_layer(params, &pairs, &vocab)?;
        write_atomic(&args.out.join("retrieval.csv"), retrieval_csv(&by_layer).as_bytes())?;
        retrieval_rows(&by_layer, &mut rows);
        if let Some(a) = c.opt_str("align") {
            let layer = c.opt("align_layer")?.unwrap_or(params.config().n_layers_enc);
            alignment_rows(params, &pairs, Path::new(a), layer, &mut rows)?;
        }
        did_something = true;
    }
    if let Some(t) = c.opt_str("test") {
        let kind: TaskKind = c
            .opt_str("kind")
            .ok_or_else(|| Error::InvalidArgument("`kind` is required with `test`".into()))?
            .parse()?;
        let data = TaskDataset::load(kind, Path::new(t))?;
        let labels = labels_of(&c)?;
        task_rows(params, &data, &vocab, labels.as_deref(), c.get("max_decode")?, &mut rows)?;
        did_something = true;
    }
    if !did_something {
        return Err(Error::InvalidArgument("nothing to evaluate: set `pairs` and/or `test`".into()));
    }
    write_atomic(&args.out.join("metrics.csv"), metrics_csv(&rows).as_bytes())?;
    for r in &rows {
        println!("{} {} {:.4}", r.metric, r.subset, r.value);
    }
    Ok(())
}

pub fn sweep_noise(args: &RunArgs) -> Result<()> {
    let keys: Vec<(&str, &str)> = PRETRAIN_KEYS.iter().chain(SWEEP_EXTRA_KEYS).copied().collect();
    let c = resolve(args, &keys)?;
    let densities: Vec<f64> = c.list("densities")?;
    if densities.is_empty() {
        return Err(Error::InvalidArgument("empty density list".into()));
    }
    if let Some(d) = densities.iter().find(|d| !(**d > 0.0 && **d <= 1.0)) {
        return Err(Error::InvalidArgument(format!("noise density {d} outside (0, 1]")));
    }
    if c.opt_str("resume").is_some() {
        return Err(Error::InvalidArgument("sweep-noise does not resume".into()));
    }
    let eval_pairs = match c.opt_str("eval_pairs") {
        Some(p) => Some(PathBuf::from(p)),
        None => c.opt_str("data").map(|d| Path::new(d).join(DataLayout::TEST)),
    };
    let mut table = String::from("density,loss_total,loss_sc,loss_x,retrieval_final\n");
    for &d in &densities {
        let dir = args.out.join(format!("density-{d}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let run = c.with("density", d);
        write_atomic(&dir.join(RESOLVED_CONFIG), run.to_text().as_bytes())?;
        let log = run_pretrain(&run, &dir)?;
        let last = log.last().copied().ok_or_else(|| Error::InvalidArgument("steps must be >= 1".into()))?;
        let retrieval = match &eval_pairs {
            Some(p) => {
                let vocab = Vocabulary::load(&data_file(&run, "vocab", DataLayout::VOCAB)?)?;
                let ckpt = Checkpoint::load(&dir.join("checkpoint.bin"))?;
                let by_layer = retrieval_by_layer(&ckpt.params, &load_pairs(p, &vocab)?, &vocab)?;
                write_atomic(&dir.join("retrieval.csv"), retrieval_csv(&by_layer).as_bytes())?;
                by_layer.last().map(|r| r.mean.to_string()).unwrap_or_default()
            }
            None => String::new(),
        };
        let _ = writeln!(
            table,
            "{d},{},{},{},{retrieval}",
            last.loss_total, last.loss_sc, last.loss_x
        );
        println!("density {d}: loss_total {:.4} retrieval {retrieval}", last.loss_total);
    }
    write_atomic(&args.out.join("sweep.csv"), table.as_bytes())
}
