//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use gtmn::checkpoint::Checkpoint;
use gtmn::corpus::{build_vocab_with, load_dataset, tokenize, FreqConfig, FreqStats, IngestConfig, Stopwords, Vocab};
use gtmn::evaluation::{build_report, load_generated, EmbeddingSource};
use gtmn::inference::{generate as generate_responses, trace_decode, DecodeConfig, GenerateConfig, MAX_DECODE_LEN};
use gtmn::metaword::{
    annotate, read_annotated, write_annotated, AnnotatedPair, AttributeSchema, MetaWord, MetaWordVariable,
};
use gtmn::model::GtmnSeq2Seq;
use gtmn::predictor::{predictor_examples, train_predictor as fit_predictor, MetaWordPredictor, PredictorConfig};
use gtmn::training::{perplexity, train as fit, AdadeltaConfig, TrainConfig, TrainingExample};
use gtmn::{gtmn::write_trace_csv, rng, synthetic};

use crate::settings::{resolve, Settings};
use crate::{usage, EvaluateArgs, GenerateArgs, PredictorArgs, PrepareArgs, SynthArgs, TraceArgs, TrainArgs};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VALID_FILE: &str = "valid.jsonl";
pub const MSG_VOCAB_FILE: &str = "msg_vocab.json";
pub const RESP_VOCAB_FILE: &str = "resp_vocab.json";
pub const STATS_FILE: &str = "freq_stats.json";

fn schema_arg(text: &str) -> Result<AttributeSchema> {
    AttributeSchema::parse(text).map_err(|e| usage(e.to_string()))
}

fn existing(path: &Path, what: &str) -> Result<PathBuf> {
    let p = resolve(path);
    if !p.exists() {
        return Err(usage(format!("{what} {} does not exist", p.display())));
    }
    Ok(p)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            let p = resolve(p);
            Box::new(BufWriter::new(
                File::create(&p).with_context(|| format!("creating {}", p.display()))?,
            ))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

pub fn prepare(a: PrepareArgs) -> Result<()> {
    let s = Settings::load(
        a.config.as_deref(),
        &[
            "attributes",
            "valid-fraction",
            "max-vocab",
            "max-tokens",
            "max-responses",
            "top-k",
            "stopwords",
            "seed",
        ],
    )?;
    let schema = schema_arg(&s.pick(a.attributes, "attributes", "all".to_string())?)?;
    let valid_fraction: f64 = s.pick(a.valid_fraction, "valid-fraction", 0.1)?;
    if !(0.0..1.0).contains(&valid_fraction) {
        return Err(usage(format!(
            "--valid-fraction must be in [0, 1), got {valid_fraction}"
        )));
    }
    let max_vocab = s.pick(a.max_vocab, "max-vocab", 2000usize)?;
    let max_tokens = s.pick(a.max_tokens, "max-tokens", 30usize)?;
    let max_responses = s.pick_opt(a.max_responses, "max-responses")?;
    let top_k = s.pick(a.top_k, "top-k", 1000usize)?;
    let stopwords = s.pick_opt(a.stopwords, "stopwords")?;
    let seed = s.pick(a.seed, "seed", 1u64)?;
    let input = existing(&a.input, "input file")?;

    let stopwords = match stopwords {
        Some(p) => Stopwords::load(&resolve(&p))?,
        None => Stopwords::default(),
    };
    let ingest = IngestConfig {
        max_tokens,
        max_responses_per_message: max_responses,
    };
    let ds = load_dataset(&input, &ingest).with_context(|| format!("reading {}", input.display()))?;
    if ds.pairs.is_empty() {
        bail!("no pairs left after filtering ({} dropped)", ds.dropped);
    }
    let n = ds.pairs.len();
    let n_valid = (n as f64 * valid_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    rand_shuffle(&mut order, seed);
    let mut valid_idx = order[..n_valid].to_vec();
    let mut train_idx = order[n_valid..].to_vec();
    valid_idx.sort_unstable();
    train_idx.sort_unstable();
    if train_idx.is_empty() {
        bail!("validation fraction leaves no training pairs");
    }
    let train_pairs: Vec<_> = train_idx.iter().map(|&i| ds.pairs[i].clone()).collect();
    let freq = FreqConfig { top_k, stopwords };
    let (mv, rv, stats) = build_vocab_with(&train_pairs, max_vocab, &freq)?;
    let annotate_all = |idx: &[usize]| -> Result<Vec<AnnotatedPair>> {
        idx.iter()
            .map(|&i| Ok(annotate(&ds.pairs[i].message, &ds.pairs[i].response, &schema, &stats)?))
            .collect()
    };
    let (train, valid) = (annotate_all(&train_idx)?, annotate_all(&valid_idx)?);

    let out = resolve(&a.out);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_annotated(&out.join(TRAIN_FILE), &train)?;
    write_annotated(&out.join(VALID_FILE), &valid)?;
    write_json(&out.join(MSG_VOCAB_FILE), &mv)?;
    write_json(&out.join(RESP_VOCAB_FILE), &rv)?;
    write_json(&out.join(STATS_FILE), &stats)?;
    println!(
        "kept {n} pairs, dropped {}; train {}, valid {}; vocab {} message / {} response; attributes {}",
        ds.dropped,
        train.len(),
        valid.len(),
        mv.len(),
        rv.len(),
        schema.id()
    );
    Ok(())
}

fn rand_shuffle(order: &mut [usize], seed: u64) {
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng::stream(seed, rng::SPLIT));
}

struct Prepared {
    train: Vec<AnnotatedPair>,
    valid: Vec<AnnotatedPair>,
    msg_vocab: Vocab,
    resp_vocab: Vocab,
    stats: FreqStats,
}

fn load_prepared(dir: &Path) -> Result<Prepared> {
    let ctx = |f: &str| format!("reading {}", dir.join(f).display());
    Ok(Prepared {
        train: read_annotated(&dir.join(TRAIN_FILE)).with_context(|| ctx(TRAIN_FILE))?,
        valid: read_annotated(&dir.join(VALID_FILE)).with_context(|| ctx(VALID_FILE))?,
        msg_vocab: read_json(&dir.join(MSG_VOCAB_FILE))?,
        resp_vocab: read_json(&dir.join(RESP_VOCAB_FILE))?,
        stats: read_json(&dir.join(STATS_FILE))?,
    })
}

fn optimizer(clip: f64) -> Result<AdadeltaConfig> {
    if !(clip >= 0.0) {
        return Err(usage(format!("--clip must be >= 0, got {clip}")));
    }
    Ok(AdadeltaConfig {
        clip_norm: (clip > 0.0).then_some(clip),
        ..AdadeltaConfig::default()
    })
}

/// Prints each record as a JSON line and appends it to `log` if given.
struct EpochSink {
    file: Option<BufWriter<File>>,
    error: Option<io::Error>,
}

impl EpochSink {
    fn new(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let p = resolve(p);
                Some(BufWriter::new(
                    File::create(&p).with_context(|| format!("creating {}", p.display()))?,
                ))
            }
            None => None,
        };
        Ok(Self { file, error: None })
    }

    fn record<T: Serialize>(&mut self, value: &T) {
        let line = serde_json::to_string(value).expect("log records serialize");
        println!("{line}");
        if let Some(f) = &mut self.file {
            if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                self.error.get_or_insert(e);
            }
        }
    }

    fn finish(self) -> Result<()> {
        match self.error {
            Some(e) => Err(e).context("writing training log"),
            None => Ok(()),
        }
    }
}

const TRAIN_KEYS: [&str; 9] = [
    "attributes",
    "d",
    "lambda",
    "batch-size",
    "max-epochs",
    "patience",
    "clip",
    "seed",
    "time-limit",
];

pub fn train(a: TrainArgs) -> Result<()> {
    let s = Settings::load(a.config.as_deref(), &TRAIN_KEYS)?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        schema: schema_arg(&s.pick(a.attributes, "attributes", "all".to_string())?)?,
        d: s.pick(a.d, "d", d.d)?,
        lambda: s.pick(a.lambda, "lambda", d.lambda)?,
        batch_size: s.pick(a.batch_size, "batch-size", d.batch_size)?,
        max_epochs: s.pick(a.max_epochs, "max-epochs", d.max_epochs)?,
        patience: s.pick(a.patience, "patience", d.patience)?,
        optimizer: optimizer(s.pick(a.clip, "clip", 5.0)?)?,
        seed: s.pick(a.seed, "seed", d.seed)?,
        max_vocab: d.max_vocab,
        time_limit: s.pick_opt(a.time_limit, "time-limit")?,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let dir = existing(&a.data, "prepared directory")?;
    let data = load_prepared(&dir)?;

    let mut init = rng::stream(cfg.seed, rng::INIT);
    let model = GtmnSeq2Seq::<f64>::new(cfg.d, cfg.schema.clone(), data.msg_vocab, data.resp_vocab, &mut init)?;
    let examples = |pairs: &[AnnotatedPair]| -> Result<Vec<TrainingExample>> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                TrainingExample::from_annotated(p, &model.spec, &data.stats)
                    .with_context(|| format!("record {}", i + 1))
            })
            .collect()
    };
    let (tr, va) = (examples(&data.train)?, examples(&data.valid)?);
    if va.is_empty() {
        bail!("the prepared directory has no validation pairs; rerun prepare with --valid-fraction > 0");
    }
    let mut sink = EpochSink::new(a.log.as_deref())?;
    let outcome = fit(model, &tr, &va, &cfg, |e| sink.record(e))?;
    sink.finish()?;
    let history = outcome
        .history
        .iter()
        .map(serde_json::to_value)
        .collect::<Result<_, _>>()?;
    let ck = Checkpoint::from_model(&outcome.model, serde_json::to_value(&cfg)?, history);
    let out = resolve(&a.out);
    ck.save(&out).with_context(|| format!("writing {}", out.display()))?;
    eprintln!("best epoch {}; checkpoint {}", outcome.best_epoch, out.display());
    Ok(())
}

pub fn train_predictor(a: PredictorArgs) -> Result<()> {
    let keys = [
        "attributes",
        "d",
        "eta",
        "batch-size",
        "max-epochs",
        "patience",
        "clip",
        "seed",
    ];
    let s = Settings::load(a.config.as_deref(), &keys)?;
    let schema = schema_arg(&s.pick(a.attributes, "attributes", "all".to_string())?)?;
    let d = PredictorConfig::default();
    let cfg = PredictorConfig {
        d: s.pick(a.d, "d", d.d)?,
        eta: s.pick(a.eta, "eta", d.eta)?,
        batch_size: s.pick(a.batch_size, "batch-size", d.batch_size)?,
        max_epochs: s.pick(a.max_epochs, "max-epochs", d.max_epochs)?,
        patience: s.pick(a.patience, "patience", d.patience)?,
        seed: s.pick(a.seed, "seed", d.seed)?,
        optimizer: optimizer(s.pick(a.clip, "clip", 5.0)?)?,
    };
    if cfg.d == 0 || cfg.batch_size == 0 || cfg.patience == 0 || !(cfg.eta >= 0.0) {
        return Err(usage(
            "predictor needs d >= 1, batch size >= 1, patience >= 1 and eta >= 0",
        ));
    }
    if schema.is_empty() {
        return Err(usage("the predictor needs at least one attribute"));
    }
    let dir = existing(&a.data, "prepared directory")?;
    let data = load_prepared(&dir)?;
    let mut init = rng::stream(cfg.seed, rng::INIT);
    let pred = MetaWordPredictor::<f64>::new(cfg.d, schema.clone(), data.msg_vocab, &mut init)?;
    let tr = predictor_examples(&pred, &data.train)?;
    let va = predictor_examples(&pred, &data.valid)?;
    let mut sink = EpochSink::new(a.log.as_deref())?;
    let (pred, history) = fit_predictor(pred, &tr, &va, &cfg, |e| sink.record(e))?;
    sink.finish()?;
    let mut config = serde_json::to_value(&cfg)?;
    config["schema"] = serde_json::Value::String(schema.id());
    let history = history.iter().map(serde_json::to_value).collect::<Result<_, _>>()?;
    let out = resolve(&a.out);
    pred.to_checkpoint(config, history)
        .save(&out)
        .with_context(|| format!("writing {}", out.display()))?;
    eprintln!("predictor checkpoint {}", out.display());
    Ok(())
}

fn load_generator(path: &Path) -> Result<GtmnSeq2Seq<f64>> {
    let p = existing(path, "checkpoint")?;
    let ck = Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))?;
    Ok(ck.to_model()?)
}

fn load_predictor(path: &Path) -> Result<MetaWordPredictor<f64>> {
    let p = existing(path, "predictor checkpoint")?;
    let ck = Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))?;
    Ok(MetaWordPredictor::from_checkpoint(&ck)?)
}

fn parse_override(text: Option<&str>, schema: &AttributeSchema) -> Result<MetaWord> {
    match text {
        Some(t) => MetaWord::parse_assignments(t, schema).map_err(|e| usage(e.to_string())),
        None => Ok(MetaWord::default()),
    }
}

fn missing_vars(schema: &AttributeSchema, mw: &MetaWord) -> Vec<&'static str> {
    schema
        .decls()
        .iter()
        .filter(|d| mw.get(d.attribute).is_none())
        .map(|d| d.attribute.key())
        .collect()
}

fn read_messages(path: &Path) -> Result<Vec<String>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if t.starts_with('{') {
            let j: serde_json::Value =
                serde_json::from_str(t).with_context(|| format!("{}: line {}", path.display(), i + 1))?;
            match j.get("message").and_then(|m| m.as_str()) {
                Some(m) => out.push(m.to_string()),
                None => bail!("{}: line {}: no \"message\" field", path.display(), i + 1),
            }
        } else {
            out.push(t.to_string());
        }
    }
    Ok(out)
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let s = Settings::load(a.config.as_deref(), &["n", "beam", "max-len", "seed", "override"])?;
    let n = s.pick(a.n, "n", 10usize)?;
    let beam = s.pick(a.beam, "beam", 5usize)?;
    let max_len = s.pick(a.max_len, "max-len", MAX_DECODE_LEN)?;
    let seed = s.pick(a.seed, "seed", 1u64)?;
    let override_text = s.pick_opt(a.overrides, "override")?;
    if n == 0 || beam == 0 || max_len == 0 {
        return Err(usage("--n, --beam and --max-len must be >= 1"));
    }
    let model = load_generator(&a.model)?;
    let overrides = parse_override(override_text.as_deref(), model.schema())?;
    let missing = missing_vars(model.schema(), &overrides);
    if !missing.is_empty() && a.predictor.is_none() {
        return Err(usage(format!(
            "variables {} are not overridden; pass --predictor or add them to --override",
            missing.join(",")
        )));
    }
    let predictor = a.predictor.as_deref().map(load_predictor).transpose()?;
    let messages = match (&a.message, &a.input) {
        (Some(m), _) => vec![m.clone()],
        (None, Some(p)) => read_messages(&existing(p, "input file")?)?,
        (None, None) => unreachable!("clap enforces one source"),
    };
    let cfg = GenerateConfig {
        samples: n,
        decode: DecodeConfig {
            beam,
            max_len,
            ..DecodeConfig::default()
        },
    };
    let mut sampler = rng::stream(seed, rng::SAMPLING);
    let mut out = output(a.out.as_deref())?;
    for m in &messages {
        let gens = generate_responses(&model, predictor.as_ref(), m, Some(&overrides), &cfg, &mut sampler)
            .with_context(|| format!("message {m:?}"))?;
        for g in gens {
            serde_json::to_writer(&mut out, &g.to_json())?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn trace(a: TraceArgs) -> Result<()> {
    let max_len = a.max_len.unwrap_or(MAX_DECODE_LEN);
    if max_len == 0 {
        return Err(usage("--max-len must be >= 1"));
    }
    let model = load_generator(&a.model)?;
    let given = parse_override(a.metaword.as_deref(), model.schema())?;
    let missing = missing_vars(model.schema(), &given);
    let dist = match (&a.predictor, missing.is_empty()) {
        (_, true) => None,
        (Some(p), false) => Some(load_predictor(p)?.predict_distributions(&a.message)?),
        (None, false) => {
            return Err(usage(format!(
                "variables {} are missing from --metaword; pass --predictor to fill them",
                missing.join(",")
            )))
        }
    };
    let mut vars = Vec::new();
    for decl in model.schema().decls() {
        let value = match given.get(decl.attribute) {
            Some(v) => v.clone(),
            None => match dist.as_ref().and_then(|d| d.get(decl.attribute)) {
                Some(v) => v.mode(),
                None => bail!("the predictor does not cover {}", decl.attribute),
            },
        };
        vars.push(MetaWordVariable {
            attribute: decl.attribute,
            value,
        });
    }
    let mw = MetaWord::new(vars)?;
    let toks = tokenize(&a.message);
    if toks.is_empty() {
        return Err(usage("--message is empty"));
    }
    let ids = model.spec.msg_vocab.encode(&toks);
    let (decoded, records) = trace_decode(&model, &ids, &mw, max_len)?;
    let mut out = output(a.out.as_deref())?;
    write_trace_csv(&mut out, &records)?;
    out.flush()?;
    eprintln!("metaword: {mw}");
    eprintln!("response: {}", decoded.words.join(" "));
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let gen_path = existing(&a.generated, "generated file")?;
    let ref_path = existing(&a.references, "reference file")?;
    let data_dir = a
        .data
        .as_deref()
        .map(|d| existing(d, "prepared directory"))
        .transpose()?;
    let generated = load_generated(&gen_path).with_context(|| format!("reading {}", gen_path.display()))?;
    let everything = IngestConfig {
        max_tokens: usize::MAX,
        max_responses_per_message: None,
    };
    let references = load_dataset(&ref_path, &everything)
        .with_context(|| format!("reading {}", ref_path.display()))?
        .pairs;
    let model = a.model.as_deref().map(load_generator).transpose()?;
    let stats: Option<FreqStats> = data_dir.map(|d| read_json(&d.join(STATS_FILE))).transpose()?;
    let embeddings = match (&a.embeddings, &model) {
        (Some(p), _) => Some(EmbeddingSource::load(&existing(p, "embedding file")?)?),
        (None, Some(m)) => Some(EmbeddingSource::from_model(m)?),
        (None, None) => None,
    };
    let full = AttributeSchema::full();
    let ppl = match (&model, &stats) {
        (Some(m), Some(st)) => {
            let examples = references
                .iter()
                .map(|p| {
                    let ann = annotate(&p.message, &p.response, &full, st)?;
                    TrainingExample::from_annotated(&ann, &m.spec, st)
                })
                .collect::<gtmn::error::Result<Vec<_>>>()?;
            Some(perplexity(m, &examples)?)
        }
        _ => None,
    };
    let report = build_report(
        &generated,
        &references,
        embeddings.as_ref(),
        stats.as_ref().map(|s| (&full, s)),
        ppl,
    )?;
    if let Some(p) = &a.json {
        let p = resolve(p);
        let mut w = BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?);
        serde_json::to_writer_pretty(&mut w, &report)?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    if a.print_json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{report}");
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    if a.pairs == 0 {
        return Err(usage("--pairs must be >= 1"));
    }
    let mut out = output(Some(&a.out))?;
    for p in synthetic::generate(a.pairs, a.seed) {
        serde_json::to_writer(&mut out, &p)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
