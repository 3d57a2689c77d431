use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use seqattr_core::data::{
    inject_label_noise, load_examples, load_jsonl, longtail_subsample, mean_ir, positive_counts, save_jsonl,
    synth_generate, write_examples, Example, PerturbationConfig, SampleRecord, Source, SyntheticRuleSpec,
};
use seqattr_core::decoder::{DecoderConfig, MaskStrategy, ModelConfig, SeqAttrModel, VisualSource};
use seqattr_core::decoding::{predict_labels, DecodeStrategy, Prediction};
use seqattr_core::encoders::{load_feature_blob, VisualEncoderConfig};
use seqattr_core::eval::{
    evaluate, export_attention_trace, named_trace, per_attribute_accuracy, similarity_matrix, write_csv, write_json,
    write_per_attribute_csv, write_reports_csv, MetricVariant, MetricsReport,
};
use seqattr_core::rng::derive_seed;
use seqattr_core::training::{load_model, TrainConfig, Trainer};
use seqattr_core::vocab::{AttributeVocabulary, OrderKind, PromptKind, PromptTemplate};
use seqattr_core::Error;

use crate::args::{
    merge, required, AblateArgs, DecodeArgs, EvalArgs, ExportVizArgs, ModelOpts, PerturbArgs, SynthArgs, TrainArgs,
    TrainOpts,
};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T> {
    s.parse().map_err(|e: Error| CliError::Usage(e.to_string()))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Core(Error::Io { path: path.into(), source: e }))
}

fn write_resolved<T: Serialize>(out: &Path, args: &T) -> Result<()> {
    create_dir(out)?;
    Ok(write_json(&out.join("config.json"), args)?)
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

impl ModelOpts {
    fn resolve(&mut self) {
        self.layers.get_or_insert(2);
        self.heads.get_or_insert(4);
        self.d_model.get_or_insert(64);
        self.d_ff.get_or_insert(256);
        self.mask.get_or_insert_with(|| "causal".into());
        self.prompt.get_or_insert_with(|| "class".into());
    }

    /// Feature width comes from the flag or the first blob; images use the
    /// built-in encoder.
    fn visual_source(&mut self, records: &[SampleRecord], base: &Path) -> Result<VisualSource> {
        let first = records
            .first()
            .ok_or_else(|| CliError::Core(Error::Invalid("dataset is empty".into())))?;
        match &first.source {
            Source::Features(p) => {
                if self.feature_width.is_none() {
                    let p = if p.is_absolute() { p.clone() } else { base.join(p) };
                    self.feature_width = Some(load_feature_blob(&p, None)?.dims2()?.1);
                }
                Ok(VisualSource::Features {
                    width: self.feature_width.unwrap(),
                })
            }
            Source::Image(_) => {
                let d = VisualEncoderConfig::default();
                let cfg = VisualEncoderConfig {
                    image_side: *self.image_side.get_or_insert(d.image_side),
                    patch_side: *self.patch_side.get_or_insert(d.patch_side),
                    layers: *self.encoder_layers.get_or_insert(d.layers),
                    d_model: self.d_model.unwrap(),
                    heads: self.heads.unwrap(),
                    d_ff: self.d_ff.unwrap(),
                    channels: 3,
                };
                Ok(VisualSource::Image(cfg))
            }
        }
    }

    fn model_config(&self, vocab: &AttributeVocabulary, visual: VisualSource, seed: u64) -> Result<ModelConfig> {
        let mask = MaskStrategy::parse(self.mask.as_deref().unwrap(), vocab.groups())
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let prompt: PromptKind = parse(self.prompt.as_deref().unwrap())?;
        Ok(ModelConfig {
            vocab: vocab.clone(),
            prompt: PromptTemplate::builtin(prompt, vocab.prompt_overrides()),
            visual,
            decoder: DecoderConfig {
                layers: self.layers.unwrap(),
                heads: self.heads.unwrap(),
                d_model: self.d_model.unwrap(),
                d_ff: self.d_ff.unwrap(),
                mask,
                vocab_size: vocab.total_size(),
            },
            seed: derive_seed(seed, "model"),
        })
    }
}

impl TrainOpts {
    fn resolve(&mut self) {
        self.epochs.get_or_insert(50);
        self.batch_size.get_or_insert(32);
        self.lr.get_or_insert(1e-3);
        self.order.get_or_insert_with(|| "canonical".into());
        self.augment.get_or_insert(false);
    }

    fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let order: OrderKind = parse(self.order.as_deref().unwrap())?;
        let mut cfg = TrainConfig {
            learning_rate: self.lr.unwrap(),
            epochs: self.epochs.unwrap(),
            batch_size: self.batch_size.unwrap(),
            seed: derive_seed(seed, "train"),
            order,
            clip_grad: self.clip_grad,
            ..TrainConfig::default()
        };
        cfg.augment.enabled = self.augment.unwrap();
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

struct Loaded {
    vocab: AttributeVocabulary,
    records: Vec<SampleRecord>,
    base: PathBuf,
}

fn load_data(data: &Path, vocab: &AttributeVocabulary) -> Result<Loaded> {
    Ok(Loaded {
        vocab: vocab.clone(),
        records: load_jsonl(data, vocab)?,
        base: base_dir(data),
    })
}

fn train_model(
    model: &mut ModelOpts,
    train: &TrainOpts,
    seed: u64,
    loaded: &Loaded,
    telemetry: Option<&Path>,
) -> Result<Trainer> {
    let visual = model.visual_source(&loaded.records, &loaded.base)?;
    let examples = load_examples(&loaded.records, &loaded.base, &visual)?;
    let model_config = model.model_config(&loaded.vocab, visual, seed)?;
    let mut trainer = Trainer::from_data(model_config, train.train_config(seed)?, &examples)?;
    run_epochs(&mut trainer, &examples, telemetry)?;
    Ok(trainer)
}

fn run_epochs(trainer: &mut Trainer, examples: &[Example], telemetry: Option<&Path>) -> Result<()> {
    let mut sink = match telemetry {
        Some(p) => Some(
            OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(true)
                .open(p)
                .map_err(|e| CliError::Core(Error::Io { path: p.into(), source: e }))?,
        ),
        None => None,
    };
    let mut io_err = None;
    trainer.fit(examples, |s| {
        if let Some(f) = sink.as_mut() {
            let line = serde_json::to_string(s).expect("stats serialize");
            if let Err(e) = writeln!(f, "{line}") {
                io_err.get_or_insert(e);
            }
        }
    })?;
    if let (Some(e), Some(p)) = (io_err, telemetry) {
        return Err(CliError::Core(Error::Io { path: p.into(), source: e }));
    }
    Ok(())
}

pub fn train(cli: TrainArgs) -> Result<()> {
    let mut a = merge(&cli, cli.config.as_deref())?;
    a.seed.get_or_insert(0);
    a.model.resolve();
    a.train.resolve();
    let out = required(&a.out, "out")?.clone();
    let vocab = AttributeVocabulary::load(required(&a.vocab, "vocab")?)?;
    let data = required(&a.data, "data")?.clone();
    let loaded = load_data(&data, &vocab)?;
    let seed = a.seed.unwrap();

    let trainer = match &a.resume {
        Some(ck) => {
            let mut trainer = Trainer::load(ck)?;
            if trainer.model.vocab().attributes() != vocab.attributes() {
                return Err(CliError::Core(Error::Config("checkpoint vocabulary differs from --vocab".into())));
            }
            trainer.config.epochs = a.train.epochs.unwrap();
            let examples = load_examples(&loaded.records, &loaded.base, &trainer.model.config().visual)?;
            write_resolved(&out, &a)?;
            run_epochs(&mut trainer, &examples, Some(&out.join("telemetry.jsonl")))?;
            trainer
        }
        None => {
            // Resolve the visual source first so the written config is complete.
            a.model.visual_source(&loaded.records, &loaded.base)?;
            write_resolved(&out, &a)?;
            train_model(&mut a.model, &a.train, seed, &loaded, Some(&out.join("telemetry.jsonl")))?
        }
    };
    trainer.save(&out.join("checkpoint.sqpr"))?;
    Ok(())
}

fn decode_all(model: &SeqAttrModel, examples: &[Example], strategy: DecodeStrategy) -> Result<Vec<Prediction>> {
    Ok(examples
        .iter()
        .map(|e| predict_labels(model, &e.visual, strategy, false))
        .collect::<seqattr_core::Result<Vec<_>>>()?)
}

fn score(model: &SeqAttrModel, examples: &[Example], strategy: DecodeStrategy, variant: MetricVariant) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(CliError::Core(Error::Invalid("evaluation set is empty".into())));
    }
    let preds: Vec<Vec<u8>> = decode_all(model, examples, strategy)?.into_iter().map(|p| p.labels).collect();
    let gts: Vec<Vec<u8>> = examples.iter().map(|e| e.labels.clone()).collect();
    Ok(evaluate(&preds, &gts, variant)?)
}

fn model_examples(model: &SeqAttrModel, data: &Path) -> Result<Vec<Example>> {
    let records = load_jsonl(data, model.vocab())?;
    Ok(load_examples(&records, &base_dir(data), &model.config().visual)?)
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    id: &'a str,
    tokens: Vec<String>,
    labels: &'a [u8],
    score: f64,
}

fn write_predictions(path: &Path, model: &SeqAttrModel, examples: &[Example], preds: &[Prediction]) -> Result<()> {
    let mut buf = String::new();
    for (e, p) in examples.iter().zip(preds) {
        let line = PredictionLine {
            id: &e.id,
            tokens: p.tokens.iter().map(|&t| model.vocab().token_name(t)).collect(),
            labels: &p.labels,
            score: p.score,
        };
        buf.push_str(&serde_json::to_string(&line).map_err(Error::from)?);
        buf.push('\n');
    }
    std::fs::write(path, buf).map_err(|e| CliError::Core(Error::Io { path: path.into(), source: e }))
}

pub fn eval(cli: EvalArgs) -> Result<()> {
    let mut a = merge(&cli, cli.config.as_deref())?;
    a.decode.get_or_insert_with(|| "greedy".into());
    a.variant.get_or_insert_with(|| "set_based".into());
    let out = required(&a.out, "out")?.clone();
    let strategy: DecodeStrategy = parse(a.decode.as_deref().unwrap())?;
    let variant: MetricVariant = parse(a.variant.as_deref().unwrap())?;
    let expected = a.vocab.as_deref().map(AttributeVocabulary::load).transpose()?;
    let model = load_model(required(&a.checkpoint, "checkpoint")?, expected.as_ref())?;
    let examples = model_examples(&model, required(&a.data, "data")?)?;
    if examples.is_empty() {
        return Err(CliError::Core(Error::Invalid("evaluation set is empty".into())));
    }
    write_resolved(&out, &a)?;
    let preds = decode_all(&model, &examples, strategy)?;
    let labels: Vec<Vec<u8>> = preds.iter().map(|p| p.labels.clone()).collect();
    let gts: Vec<Vec<u8>> = examples.iter().map(|e| e.labels.clone()).collect();
    let set_based = evaluate(&labels, &gts, MetricVariant::SetBased)?;
    let literal = evaluate(&labels, &gts, MetricVariant::Literal)?;

    #[derive(Serialize)]
    struct Metrics<'a> {
        decode: String,
        primary: &'a MetricsReport,
        set_based: &'a MetricsReport,
        literal: &'a MetricsReport,
    }
    let primary = if variant == MetricVariant::Literal { &literal } else { &set_based };
    write_json(
        &out.join("metrics.json"),
        &Metrics {
            decode: strategy.to_string(),
            primary,
            set_based: &set_based,
            literal: &literal,
        },
    )?;
    write_reports_csv(&out.join("metrics.csv"), &[set_based.clone(), literal])?;
    write_per_attribute_csv(&out.join("per_attribute.csv"), model.vocab(), &set_based.per_attribute_accuracy)?;
    write_predictions(&out.join("predictions.jsonl"), &model, &examples, &preds)
}

pub fn decode(cli: DecodeArgs) -> Result<()> {
    let mut a = merge(&cli, cli.config.as_deref())?;
    a.decode.get_or_insert_with(|| "greedy".into());
    a.trace.get_or_insert(false);
    let out = required(&a.out, "out")?.clone();
    let strategy: DecodeStrategy = parse(a.decode.as_deref().unwrap())?;
    let model = load_model(required(&a.checkpoint, "checkpoint")?, None)?;
    let examples = model_examples(&model, required(&a.data, "data")?)?;
    write_resolved(&out, &a)?;
    let with_trace = a.trace.unwrap();
    let preds = examples
        .iter()
        .map(|e| predict_labels(&model, &e.visual, strategy, with_trace))
        .collect::<seqattr_core::Result<Vec<_>>>()?;
    write_predictions(&out.join("predictions.jsonl"), &model, &examples, &preds)?;
    if with_trace {
        let traces: Vec<_> = examples
            .iter()
            .zip(&preds)
            .map(|(e, p)| named_trace(&e.id, p.trace.as_deref().unwrap_or_default(), model.vocab()))
            .collect();
        export_attention_trace(&traces, &out.join("traces.json"))?;
    }
    Ok(())
}

fn metrics_row(axis: &str, value: &str, r: &MetricsReport) -> Vec<String> {
    vec![
        axis.to_string(),
        value.to_string(),
        r.accuracy.to_string(),
        r.precision.to_string(),
        r.recall.to_string(),
        r.f1.to_string(),
    ]
}

pub fn ablate(cli: AblateArgs) -> Result<()> {
    let mut a = merge(&cli, cli.config.as_deref())?;
    a.seed.get_or_insert(0);
    a.variant.get_or_insert_with(|| "set_based".into());
    a.decode.get_or_insert_with(|| "greedy".into());
    a.model.resolve();
    a.train.resolve();
    let out = required(&a.out, "out")?.clone();
    let axis = required(&a.axis, "axis")?.clone();
    let values: Vec<String> = required(&a.values, "values")?
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if values.is_empty() {
        return Err(CliError::Usage("--values lists no settings".into()));
    }
    let variant: MetricVariant = parse(a.variant.as_deref().unwrap())?;
    let mut rows = Vec::new();
    match axis.as_str() {
        "beam" => {
            let widths = values
                .iter()
                .map(|v| match v.parse::<usize>() {
                    Ok(w) if w > 0 => Ok(w),
                    _ => Err(CliError::Usage(format!("bad beam width {v:?}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let model = load_model(required(&a.checkpoint, "checkpoint")?, None)?;
            let test = a.test.clone().or(a.data.clone());
            let examples = model_examples(&model, required(&test, "test")?)?;
            write_resolved(&out, &a)?;
            for (w, v) in widths.iter().zip(&values) {
                let r = score(&model, &examples, DecodeStrategy::Beam(*w), variant)?;
                rows.push(metrics_row(&axis, v, &r));
            }
        }
        "layers" | "mask" | "prompt" | "order" => {
            let vocab = AttributeVocabulary::load(required(&a.vocab, "vocab")?)?;
            let loaded = load_data(required(&a.data, "data")?, &vocab)?;
            let test_path = a.test.clone().unwrap_or_else(|| a.data.clone().unwrap());
            let test = load_data(&test_path, &vocab)?;
            let strategy: DecodeStrategy = parse(a.decode.as_deref().unwrap())?;
            a.model.visual_source(&loaded.records, &loaded.base)?;
            write_resolved(&out, &a)?;
            for v in &values {
                let (mut model, mut train) = (a.model.clone(), a.train.clone());
                match axis.as_str() {
                    "layers" => {
                        model.layers = Some(v.parse().map_err(|_| CliError::Usage(format!("bad layer count {v:?}")))?)
                    }
                    "mask" => model.mask = Some(v.clone()),
                    "prompt" => model.prompt = Some(v.clone()),
                    _ => train.order = Some(v.clone()),
                }
                let trainer = train_model(&mut model, &train, a.seed.unwrap(), &loaded, None)?;
                let examples = load_examples(&test.records, &test.base, &trainer.model.config().visual)?;
                let r = score(&trainer.model, &examples, strategy, variant)?;
                rows.push(metrics_row(&axis, v, &r));
            }
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown ablation axis {other:?} (expected beam, layers, mask, prompt or order)"
            )))
        }
    }
    Ok(write_csv(
        &out.join("ablation.csv"),
        &["axis", "value", "accuracy", "precision", "recall", "f1"],
        &rows,
    )?)
}

fn parse_tails(spec: &str, vocab: &AttributeVocabulary) -> Result<Vec<(usize, f64)>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (attr, frac) = item
                .rsplit_once(':')
                .ok_or_else(|| CliError::Usage(format!("tail entry {item:?} is not attribute:fraction")))?;
            let attr = attr.trim();
            let idx = attr
                .parse::<usize>()
                .ok()
                .or_else(|| vocab.index_of(attr))
                .ok_or_else(|| CliError::Usage(format!("unknown tail attribute {attr:?}")))?;
            let frac: f64 = frac
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad drop fraction in {item:?}")))?;
            Ok((idx, frac))
        })
        .collect()
}

#[derive(Serialize)]
struct PerturbReport {
    kind: String,
    records: usize,
    labels: usize,
    flips: usize,
    flip_fraction: f64,
    mean_ir_before: Option<f64>,
    mean_ir_after: Option<f64>,
    positive_counts_before: Vec<usize>,
    positive_counts_after: Vec<usize>,
}

pub fn perturb(cli: PerturbArgs) -> Result<()> {
    let mut a = merge(&cli, cli.config.as_deref())?;
    a.seed.get_or_insert(0);
    let kind = required(&a.kind, "kind")?.clone();
    let out = required(&a.out, "out")?.clone();
    let vocab = AttributeVocabulary::load(required(&a.vocab, "vocab")?)?;
    let data = required(&a.data, "data")?.clone();
    let m = vocab.len();
    let seed = derive_seed(a.seed.unwrap(), "perturb");
    let config = match kind.as_str() {
        "noise" => PerturbationConfig {
            noise_flip_prob: *a.flip_prob.get_or_insert(0.1),
            longtail: vec![],
            seed,
        },
        "longtail" => PerturbationConfig {
            noise_flip_prob: 0.0,
            longtail: parse_tails(required(&a.tail, "tail")?, &vocab)?,
            seed,
        },
        other => return Err(CliError::Usage(format!("unknown perturbation {other:?} (expected noise or longtail)"))),
    };
    config.validate(m).map_err(|e| CliError::Usage(e.to_string()))?;
    let records = load_jsonl(&data, &vocab)?;
    write_resolved(&out, &a)?;

    let (perturbed, flips) = if kind == "noise" {
        inject_label_noise(&records, config.noise_flip_prob, config.seed)?
    } else {
        (longtail_subsample(&records, &config.longtail, config.seed)?, 0)
    };
    // Keep sources readable from the output directory.
    let base = std::path::absolute(base_dir(&data))
        .map_err(|e| CliError::Core(Error::Io { path: data.clone(), source: e }))?;
    let perturbed: Vec<SampleRecord> = perturbed
        .into_iter()
        .map(|mut r| {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            match &mut r.source {
                Source::Image(p) | Source::Features(p) => fix(p),
            }
            r
        })
        .collect();
    save_jsonl(&out.join("perturbed.jsonl"), &perturbed)?;
    let labels = records.len() * m;
    let report = PerturbReport {
        kind,
        records: records.len(),
        labels,
        flips,
        flip_fraction: if labels > 0 { flips as f64 / labels as f64 } else { 0.0 },
        mean_ir_before: mean_ir(&records, m).ok(),
        mean_ir_after: mean_ir(&perturbed, m).ok(),
        positive_counts_before: positive_counts(&records, m),
        positive_counts_after: positive_counts(&perturbed, m),
    };
    Ok(write_json(&out.join("report.json"), &report)?)
}

/// Rule spec file: the generator rules plus optional attribute names and
/// groups for the written vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SynthSpecFile {
    #[serde(default)]
    names: Option<Vec<String>>,
    #[serde(default)]
    groups: Option<Vec<Vec<usize>>>,
    #[serde(flatten)]
    rules: SyntheticRuleSpec,
}

pub fn synth(cli: SynthArgs) -> Result<()> {
    let mut a = merge(&cli, cli.config.as_deref())?;
    a.n.get_or_insert(64);
    a.offset.get_or_insert(0);
    let out = required(&a.out, "out")?.clone();
    let spec_path = required(&a.spec, "spec")?;
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| CliError::Core(Error::Io { path: spec_path.clone(), source: e }))?;
    let mut spec: SynthSpecFile =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("spec {}: {e}", spec_path.display())))?;
    if let Some(s) = a.seed {
        spec.rules.seed = s;
    }
    spec.rules.validate()?;
    let m = spec.rules.num_attributes();
    let names = spec.names.clone().unwrap_or_else(|| (0..m).map(|i| format!("attr{i}")).collect());
    if names.len() != m {
        return Err(CliError::Usage(format!("{} names for {m} attributes", names.len())));
    }
    let mut vocab = AttributeVocabulary::new(names)?;
    if let Some(g) = spec.groups.clone() {
        vocab = vocab.with_groups(g)?;
    }
    write_resolved(&out, &a)?;
    let examples = synth_generate(&spec.rules, a.n.unwrap(), a.offset.unwrap(), "s")?;
    let records = write_examples(&out, &examples)?;
    save_jsonl(&out.join("data.jsonl"), &records)?;
    vocab.save(&out.join("vocab.json"))?;
    Ok(write_json(&out.join("spec.json"), &spec)?)
}

pub fn export_viz(cli: ExportVizArgs) -> Result<()> {
    let mut a = merge(&cli, cli.config.as_deref())?;
    a.decode.get_or_insert_with(|| "greedy".into());
    let out = required(&a.out, "out")?.clone();
    let strategy: DecodeStrategy = parse(a.decode.as_deref().unwrap())?;
    let model = load_model(required(&a.checkpoint, "checkpoint")?, None)?;
    let examples = model_examples(&model, required(&a.data, "data")?)?;
    let wanted: Vec<String> = a
        .samples
        .as_deref()
        .unwrap_or("")
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let mut chosen = Vec::new();
    for id in &wanted {
        let ex = examples.iter().find(|e| &e.id == id).ok_or_else(|| {
            let valid: Vec<&str> = examples.iter().map(|e| e.id.as_str()).collect();
            CliError::Core(Error::Invalid(format!(
                "unknown sample id {id:?}; valid ids: {}",
                valid.join(", ")
            )))
        })?;
        chosen.push(ex);
    }
    write_resolved(&out, &a)?;

    let names = model.vocab().attributes().to_vec();
    similarity_matrix(&model.query_embeddings()?, &names)?.write_csv(&out.join("similarity.csv"))?;
    if !examples.is_empty() {
        let preds: Vec<Vec<u8>> = decode_all(&model, &examples, strategy)?.into_iter().map(|p| p.labels).collect();
        let gts: Vec<Vec<u8>> = examples.iter().map(|e| e.labels.clone()).collect();
        let acc = per_attribute_accuracy(&preds, &gts)?;
        write_per_attribute_csv(&out.join("per_attribute.csv"), model.vocab(), &acc)?;
    }
    let traces = chosen
        .iter()
        .map(|ex| {
            let p = predict_labels(&model, &ex.visual, strategy, true)?;
            Ok(named_trace(&ex.id, p.trace.as_deref().unwrap_or_default(), model.vocab()))
        })
        .collect::<seqattr_core::Result<Vec<_>>>()?;
    Ok(export_attention_trace(&traces, &out.join("attention.json"))?)
}
