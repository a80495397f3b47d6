//! Subcommand implementations.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use cuenmt::context_encoder::{ContextItem, TextContexts, DEFAULT_MAX_DISTANCE};
use cuenmt::corpus::{
    build_documents, build_samples, choose_heldout, context_strings, read_metadata, read_pairs, split, write_samples,
    EmbeddingCache, SampleRecord, Tokenizer, WordVocab,
};
use cuenmt::embed_store::build_store;
use cuenmt::evalbench::{
    ablation_table, bleu, control_score, fit_config, make_control_task, prepare, probe_contexts, run_ablation,
    run_prepared, translate_set, write_probe_tsv, AblationSpec, ContextSource, ControlSpec, ControlTask, EvalSet,
    Prepared, PROBE_NEIGHBORS, SUPERVISION_LADDER,
};
use cuenmt::nmt_model::{load_checkpoint, save_checkpoint, TranslationModel, Variant};
use cuenmt::trainer::{init_from_base, train};
use cuenmt::vectorizer::{export_precomputed, BackendKind, BackendSpec, Vectorizer};

use crate::config::FileConfig;
use crate::data::{
    self, read_json, write_json, DataInfo, StoreInfo, CHECKPOINT, DATA_FILE, SPLITS, SRC_VOCAB, STORE_FILE, TGT_VOCAB,
    VECTORIZER_FILE,
};
use crate::manifest::ManifestBuilder;
use crate::{
    AblateArgs, Cli, Command, ControlTaskArgs, EmbedArgs, EvaluateArgs, PrepareArgs, ProbeArgs, TrainCmd, TranslateArgs,
};

/// A semantically invalid argument; exits with the usage status.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(r: cuenmt::Result<T>) -> Result<T> {
    r.map_err(|e| UsageError(e.to_string()).into())
}

struct Ctx {
    config_path: Option<PathBuf>,
    seed: u64,
    wall_time: bool,
    file: FileConfig,
}

impl Ctx {
    fn manifest(&self, command: &str) -> ManifestBuilder {
        ManifestBuilder::new(command, self.config_path.clone(), self.seed)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref()).map_err(|e| UsageError(format!("{e:#}")))?;
    let ctx = Ctx {
        config_path: cli.config,
        seed: cli.seed,
        wall_time: cli.log_wall_time,
        file,
    };
    match cli.command {
        Command::Prepare(a) => prepare_cmd(&ctx, &a),
        Command::Embed(a) => embed_cmd(&ctx, &a),
        Command::Train(a) => train_cmd(&ctx, &a),
        Command::Translate(a) => translate_cmd(&ctx, &a),
        Command::Evaluate(a) => evaluate_cmd(&ctx, &a),
        Command::Ablate(a) => ablate_cmd(&ctx, &a),
        Command::ControlTask(a) => control_task_cmd(&ctx, &a),
        Command::Probe(a) => probe_cmd(&ctx, &a),
    }
}

fn prepare_cmd(ctx: &Ctx, a: &PrepareArgs) -> Result<()> {
    if !(0.0..0.5).contains(&a.heldout_fraction) {
        bail!(UsageError(format!("--heldout-fraction must lie in [0, 0.5), got {}", a.heldout_fraction)));
    }
    let m = ctx.manifest("prepare");
    let pairs = read_pairs(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let docs = build_documents(&pairs)?;
    let metadata = match &a.meta {
        Some(p) => read_metadata(p).with_context(|| format!("reading {}", p.display()))?,
        None => HashMap::new(),
    };
    let samples = build_samples(&docs, &metadata, a.t);
    let (valid_keys, test_keys) = choose_heldout(&samples, a.heldout_fraction, ctx.seed);
    let splits = split(samples, &valid_keys, &test_keys)?;

    fs::create_dir_all(&a.out)?;
    let mut outputs = Vec::new();
    for (name, s) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
        let p = data::split_path(&a.out, name);
        write_samples(&p, s)?;
        outputs.push(p);
    }
    let src = WordVocab::build(splits.train.iter().map(|s| s.src.as_str()), a.min_count, a.max_vocab);
    let tgt = WordVocab::build(splits.train.iter().map(|s| s.tgt.as_str()), a.min_count, a.max_vocab);
    src.save(a.out.join(SRC_VOCAB))?;
    tgt.save(a.out.join(TGT_VOCAB))?;
    write_json(&a.out.join(VECTORIZER_FILE), &data::default_backend(ctx.seed))?;
    let info = DataInfo {
        include_current: !a.exclude_current,
    };
    write_json(&a.out.join(DATA_FILE), &info)?;
    outputs.extend([SRC_VOCAB, TGT_VOCAB, VECTORIZER_FILE, DATA_FILE].map(|f| a.out.join(f)));
    eprintln!(
        "{} documents; {} train, {} valid, {} test samples",
        docs.len(),
        splits.train.len(),
        splits.valid.len(),
        splits.test.len()
    );

    let mut inputs = vec![a.input.clone()];
    inputs.extend(a.meta.clone());
    let config = json!({
        "t": a.t,
        "heldout_fraction": a.heldout_fraction,
        "min_count": a.min_count,
        "max_vocab": a.max_vocab,
        "include_current": info.include_current,
        "valid_keys": valid_keys,
        "test_keys": test_keys,
    });
    m.write(&a.out, config, inputs, outputs)?;
    Ok(())
}

fn parse_backend(s: &str) -> Result<BackendKind> {
    Ok(match s {
        "hash" => BackendKind::HashNgram,
        "discrete" => BackendKind::DiscreteLookup,
        "precomputed" => BackendKind::PrecomputedImport,
        other => bail!(UsageError(format!("unknown backend {other:?}; expected hash, discrete or precomputed"))),
    })
}

fn embed_cmd(ctx: &Ctx, a: &EmbedArgs) -> Result<()> {
    let m = ctx.manifest("embed");
    let current = if a.data.join(VECTORIZER_FILE).exists() {
        read_json(&a.data.join(VECTORIZER_FILE))?
    } else {
        data::default_backend(ctx.seed)
    };
    let (kind, seed) = match &a.backend {
        Some(b) => (parse_backend(b)?, ctx.seed),
        None => (current.kind, current.seed),
    };
    let mut inputs = Vec::new();
    let table = match (kind, &a.table) {
        (BackendKind::PrecomputedImport, Some(t)) => {
            let name = t.file_name().context("--table has no file name")?;
            let dest = a.data.join(name);
            if fs::canonicalize(t)? != fs::canonicalize(&dest).unwrap_or_default() {
                fs::copy(t, &dest)?;
            }
            inputs.push(t.clone());
            Some(name.to_string_lossy().into_owned())
        }
        (BackendKind::PrecomputedImport, None) => match &current.table {
            Some(t) => Some(t.clone()),
            None => bail!(UsageError("the precomputed backend needs --table".into())),
        },
        (_, Some(_)) => bail!(UsageError("--table only applies to the precomputed backend".into())),
        (_, None) => None,
    };
    let backend = BackendSpec {
        kind,
        seed,
        dim: a.dim.unwrap_or(current.dim),
        table,
    };
    let vectorizer = Vectorizer::from_spec(&backend, &a.data)?;
    let max_distance = a.max_distance.or(ctx.file.model.max_distance).unwrap_or(DEFAULT_MAX_DISTANCE);
    let include_current = if a.include_current {
        true
    } else if a.exclude_current {
        false
    } else {
        data::data_info(&a.data)?.include_current
    };

    let mut outputs = Vec::new();
    let mut summaries = serde_json::Map::new();
    for name in SPLITS {
        let path = data::split_path(&a.data, name);
        if !path.exists() {
            continue;
        }
        inputs.push(path);
        let samples = data::load_split(&a.data, name)?;
        let contexts: Vec<TextContexts> = samples.iter().map(|s| s.text_contexts(include_current)).collect();
        let (store, index) = data::store_paths(&a.data, name);
        let summary = build_store(
            samples.iter().map(|s| s.sample_id.as_str()).zip(&contexts),
            &vectorizer,
            max_distance,
            &store,
            &index,
        )
        .with_context(|| format!("building the {name} store"))?;
        eprintln!(
            "{name}: {} samples, {} unique contexts, {} references",
            summary.samples, summary.unique, summary.references
        );
        summaries.insert(
            name.to_string(),
            json!({"samples": summary.samples, "unique": summary.unique, "references": summary.references}),
        );
        outputs.extend([store, index]);
    }
    if outputs.is_empty() {
        bail!("{} holds no split files", a.data.display());
    }
    let info = StoreInfo {
        backend,
        include_current,
        max_distance,
    };
    write_json(&a.data.join(STORE_FILE), &info)?;
    outputs.push(a.data.join(STORE_FILE));
    m.write(&a.data, json!({"store": info, "splits": summaries}), inputs, outputs)?;
    Ok(())
}

fn train_cmd(ctx: &Ctx, a: &TrainCmd) -> Result<()> {
    let m = ctx.manifest("train");
    let template = usage(a.model.resolve(&ctx.file.model, Variant::MtCue))?;
    let mut tc = usage(a.train.resolve(&ctx.file.train, ctx.seed))?;
    tc.freeze_src_encoder |= a.freeze_src_encoder;
    if a.init_from.is_some() {
        tc.fine_tune_from = a.init_from.clone();
    }

    let (vectorizer, backend) = data::load_vectorizer(&a.data)?;
    let vocabs = data::load_vocabs(&a.data)?;
    let train_samples = data::load_split(&a.data, "train")?;
    let valid_samples = data::load_split(&a.data, "valid")?;
    let mut cache = EmbeddingCache::new(&vectorizer);
    let prepared = Prepared {
        train: data::examples(&a.data, "train", &train_samples, &vocabs, &mut cache)?,
        valid: data::examples(&a.data, "valid", &valid_samples, &vocabs, &mut cache)?,
        test: EvalSet::default(),
        zero_shot: EvalSet::default(),
        tags: context_strings(&train_samples),
        embed_dim: vectorizer.dim(),
        src_vocab: vocabs.0.clone(),
        tgt_vocab: vocabs.1.clone(),
    };
    let mut cfg = fit_config(&template, &prepared);
    cfg.init_seed = ctx.seed;
    let mut inputs = vec![data::split_path(&a.data, "train"), data::split_path(&a.data, "valid")];
    let mut model = match &tc.fine_tune_from {
        Some(dir) => {
            let path = dir.join(CHECKPOINT);
            inputs.push(path.clone());
            let base = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
            init_from_base(&base, cfg.clone())?
        }
        None => TranslationModel::new(cfg.clone())?,
    };
    let report = train(&mut model, &prepared.train, &prepared.valid, &tc)?;
    eprintln!(
        "best epoch {} of {}, valid loss {:.4}",
        report.best_epoch,
        report.log.len(),
        report.best_valid_loss
    );

    fs::create_dir_all(&a.out)?;
    save_checkpoint(&model, &a.out.join(CHECKPOINT))?;
    fs::write(a.out.join("metrics.csv"), report.metrics_csv(ctx.wall_time))?;
    vocabs.0.save(a.out.join(SRC_VOCAB))?;
    vocabs.1.save(a.out.join(TGT_VOCAB))?;
    data::copy_backend(&backend, &a.data, &a.out)?;
    write_json(&a.out.join(DATA_FILE), &data::effective_info(&a.data)?)?;
    write_json(&a.out.join("train_report.json"), &report)?;
    let outputs = [CHECKPOINT, "metrics.csv", SRC_VOCAB, TGT_VOCAB, VECTORIZER_FILE, DATA_FILE, "train_report.json"]
        .map(|f| a.out.join(f))
        .to_vec();
    m.write(&a.out, json!({"model": cfg, "train": tc, "backend": backend}), inputs, outputs)?;
    Ok(())
}

struct Loaded {
    model: TranslationModel,
    src_vocab: WordVocab,
    tgt_vocab: WordVocab,
    vectorizer: Vectorizer,
    backend: BackendSpec,
    include_current: bool,
}

fn load_model_dir(dir: &Path) -> Result<Loaded> {
    let path = dir.join(CHECKPOINT);
    let model = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    let (src_vocab, tgt_vocab) = data::load_vocabs(dir)?;
    let backend: BackendSpec = read_json(&dir.join(VECTORIZER_FILE))?;
    let vectorizer = Vectorizer::from_spec(&backend, dir)?;
    Ok(Loaded {
        model,
        src_vocab,
        tgt_vocab,
        vectorizer,
        backend,
        include_current: data::data_info(dir)?.include_current,
    })
}

/// Rejects a data dir whose stores were built with another backend.
fn check_store_backend(data_dir: &Path, backend: &BackendSpec) -> Result<()> {
    if !data_dir.join(STORE_FILE).exists() {
        return Ok(());
    }
    let info: StoreInfo = read_json(&data_dir.join(STORE_FILE))?;
    let b = &info.backend;
    if (b.kind, b.seed, b.dim) != (backend.kind, backend.seed, backend.dim) {
        bail!(
            "stores in {} use {:?} seed {} dim {}, the checkpoint {:?} seed {} dim {}",
            data_dir.display(),
            b.kind,
            b.seed,
            b.dim,
            backend.kind,
            backend.seed,
            backend.dim
        );
    }
    Ok(())
}

fn manifest_dir(out: Option<&Path>) -> PathBuf {
    match out.and_then(Path::parent) {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn translate_cmd(ctx: &Ctx, a: &TranslateArgs) -> Result<()> {
    let m = ctx.manifest("translate");
    let l = load_model_dir(&a.model)?;
    let mut inputs = vec![a.model.join(CHECKPOINT)];
    let sources: Vec<String> = match &a.input {
        Some(p) => {
            inputs.push(p.clone());
            fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))?
                .lines()
                .map(str::to_string)
                .collect()
        }
        None => a.src.clone(),
    };
    let mut cache = EmbeddingCache::new(&l.vectorizer);
    let mut out = String::new();
    for src in &sources {
        let mut doc: Vec<(String, usize)> = a.doc.iter().enumerate().map(|(i, t)| (t.clone(), i + 1)).collect();
        if l.include_current {
            doc.insert(0, (src.clone(), 0));
        }
        let cs = cache.context_set(&TextContexts {
            doc,
            meta: a.meta.clone(),
        })?;
        let ids = l.model.greedy_decode(&l.src_vocab.encode(src), &cs, a.max_len)?;
        out.push_str(&l.tgt_vocab.decode(&ids));
        out.push('\n');
    }
    let mut outputs = Vec::new();
    match &a.out {
        Some(p) => {
            fs::create_dir_all(manifest_dir(Some(p)))?;
            fs::write(p, &out)?;
            outputs.push(p.clone());
        }
        None => print!("{out}"),
    }
    let config = json!({
        "src": a.src,
        "doc": a.doc,
        "meta": a.meta,
        "max_len": a.max_len,
        "include_current": l.include_current,
        "backend": l.backend,
    });
    m.write(&manifest_dir(a.out.as_deref()), config, inputs, outputs)?;
    Ok(())
}

fn check_split(name: &str) -> Result<()> {
    if SPLITS.contains(&name) {
        Ok(())
    } else {
        bail!(UsageError(format!("unknown split {name:?}; expected one of {}", SPLITS.join(", "))))
    }
}

fn evaluate_cmd(ctx: &Ctx, a: &EvaluateArgs) -> Result<()> {
    check_split(&a.split)?;
    let m = ctx.manifest("evaluate");
    let l = load_model_dir(&a.model)?;
    check_store_backend(&a.data, &l.backend)?;
    let samples = data::load_split(&a.data, &a.split)?;
    let mut cache = EmbeddingCache::new(&l.vectorizer);
    let vocabs = (l.src_vocab.clone(), l.tgt_vocab.clone());
    let set = EvalSet {
        examples: data::examples(&a.data, &a.split, &samples, &vocabs, &mut cache)?,
        references: samples.iter().map(|s| s.tgt.clone()).collect(),
    };
    let hyps = translate_set(&l.model, &l.tgt_vocab, &set)?;
    let score = bleu(&hyps, &set.references)?;
    let control = control_score(&hyps, &set.references);
    println!("bleu {score:.2}  exact {:.4}  ({} samples)", control.exact, samples.len());

    fs::create_dir_all(&a.out)?;
    let hyp_path = a.out.join("hypotheses.txt");
    fs::write(&hyp_path, hyps.iter().map(|h| format!("{h}\n")).collect::<String>())?;
    let eval_path = a.out.join("evaluation.json");
    write_json(
        &eval_path,
        &json!({"split": a.split, "samples": samples.len(), "bleu": score, "control": control}),
    )?;
    let inputs = vec![a.model.join(CHECKPOINT), data::split_path(&a.data, &a.split)];
    m.write(&a.out, json!({"split": a.split, "backend": l.backend}), inputs, vec![hyp_path, eval_path])?;
    Ok(())
}

fn ablate_cmd(ctx: &Ctx, a: &AblateArgs) -> Result<()> {
    let m = ctx.manifest("ablate");
    let template = usage(a.model.resolve(&ctx.file.model, Variant::MtCue))?;
    let tc = usage(a.train.resolve(&ctx.file.train, ctx.seed))?;
    let specs = match &a.flags {
        Some(f) if !a.table => vec![usage(AblationSpec::parse(f))?],
        _ => AblationSpec::table_rows(),
    };
    for s in &specs {
        usage(s.validate())?;
    }
    let data = data::load_text_data(&a.data)?;
    let (vectorizer, backend) = data::load_vectorizer(&a.data)?;
    let mut rows = Vec::with_capacity(specs.len());
    for spec in &specs {
        let row = run_ablation(spec, &template, &data, &vectorizer, &tc, ctx.seed)?;
        eprintln!("{}: bleu {:.2}, accuracy {:.4}", row.setting, row.bleu, row.accuracy);
        rows.push(row);
    }
    let table = ablation_table(&rows);
    print!("{table}");
    let out = a.out.clone().unwrap_or_else(|| a.data.clone());
    fs::create_dir_all(&out)?;
    let path = out.join("ablation.tsv");
    fs::write(&path, &table)?;
    let inputs = SPLITS.iter().map(|s| data::split_path(&a.data, s)).filter(|p| p.exists()).collect();
    let config = json!({"ablations": specs, "model": template, "train": tc, "backend": backend});
    m.write(&out, config, inputs, vec![path])?;
    Ok(())
}

fn parse_level(s: &str) -> Result<Option<usize>> {
    if s == "full" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| UsageError(format!("supervision level {s:?} is neither a count nor \"full\"")).into())
}

/// Writes splits, vocabularies, backend and task description of `task`.
fn write_task_dir(task: &ControlTask, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut outputs = Vec::new();
    let d = &task.data;
    for (name, s) in [("train", &d.train), ("valid", &d.valid), ("test", &d.test), ("zero_shot", &d.zero_shot)] {
        let p = data::split_path(dir, name);
        write_samples(&p, s)?;
        outputs.push(p);
    }
    WordVocab::build(d.train.iter().map(|s| s.src.as_str()), 1, None).save(dir.join(SRC_VOCAB))?;
    WordVocab::build(d.train.iter().map(|s| s.tgt.as_str()), 1, None).save(dir.join(TGT_VOCAB))?;
    outputs.extend([dir.join(SRC_VOCAB), dir.join(TGT_VOCAB)]);
    let backend = match task.spec.source {
        ContextSource::Clusters => {
            let mut rows: Vec<_> = task.embeddings.iter().collect();
            rows.sort_by(|a, b| a.0.cmp(b.0));
            let table = dir.join("embeddings.tsv");
            export_precomputed(&table, rows.into_iter().map(|(k, v)| (k.as_str(), v)))?;
            outputs.push(table);
            BackendSpec {
                kind: BackendKind::PrecomputedImport,
                seed: task.seed,
                dim: task.spec.embed_dim,
                table: Some("embeddings.tsv".into()),
            }
        }
        ContextSource::Templates => BackendSpec {
            kind: BackendKind::HashNgram,
            seed: task.seed,
            dim: task.spec.embed_dim,
            table: None,
        },
    };
    write_json(&dir.join(VECTORIZER_FILE), &backend)?;
    // sources are random words with no attribute signal
    write_json(&dir.join(DATA_FILE), &DataInfo { include_current: false })?;
    let markers: Vec<Vec<String>> = (0..task.combination_count()).map(|c| task.markers(c)).collect();
    write_json(
        &dir.join("task.json"),
        &json!({"seed": task.seed, "spec": task.spec, "combinations": task.combinations, "markers": markers}),
    )?;
    outputs.extend([dir.join(VECTORIZER_FILE), dir.join(DATA_FILE), dir.join("task.json")]);
    Ok(outputs)
}

fn control_task_cmd(ctx: &Ctx, a: &ControlTaskArgs) -> Result<()> {
    let m = ctx.manifest("control-task");
    let mut spec = match a.preset.as_deref() {
        None => ctx.file.control.clone(),
        Some("eamt") => ControlSpec::eamt(),
        Some("formality") => ControlSpec::formality(),
        Some(other) => bail!(UsageError(format!("unknown preset {other:?}; expected eamt or formality"))),
    };
    if let Some(s) = &a.supervision {
        spec.supervision = parse_level(s)?;
    }
    usage(spec.validate())?;
    let task = make_control_task(&spec, ctx.seed)?;
    let mut outputs = write_task_dir(&task, &a.out)?;
    eprintln!(
        "{} combinations; {} train, {} valid, {} test, {} zero-shot samples",
        task.combination_count(),
        task.data.train.len(),
        task.data.valid.len(),
        task.data.test.len(),
        task.data.zero_shot.len()
    );

    let mut config = json!({"control": spec});
    if a.ladder {
        let levels: Vec<Option<usize>> = match &a.levels {
            Some(l) => l.split(',').map(|s| parse_level(s.trim())).collect::<Result<_>>()?,
            None => SUPERVISION_LADDER.to_vec(),
        };
        let variants: Vec<Variant> = a
            .variants
            .split(',')
            .map(|v| usage(Variant::parse(v.trim())))
            .collect::<Result<_>>()?;
        let tc = usage(a.train.resolve(&ctx.file.train, ctx.seed))?;
        let mut results = Vec::new();
        for &level in &levels {
            let t = make_control_task(&ControlSpec { supervision: level, ..spec.clone() }, ctx.seed)?;
            let p = prepare(&t.data, &t.vectorizer()?, false)?;
            for &variant in &variants {
                let mut model_args = a.model.clone();
                model_args.variant = Some(variant.name().to_string());
                let mut cfg = usage(model_args.resolve(&ctx.file.model, variant))?;
                cfg.init_seed = ctx.seed;
                let r = run_prepared(&cfg, &p, &tc)?;
                eprintln!(
                    "supervision {}: {} accuracy {:.4}",
                    level.map_or("full".to_string(), |n| n.to_string()),
                    variant.name(),
                    r.control.exact
                );
                results.push(json!({
                    "supervision": level,
                    "variant": variant.name(),
                    "accuracy": r.control.exact,
                    "per_attribute": r.control.per_attribute,
                    "zero_shot_accuracy": r.zero_shot.map(|z| z.exact),
                    "bleu": r.bleu,
                    "best_epoch": r.report.best_epoch,
                }));
            }
        }
        let path = a.out.join("control_accuracy.json");
        write_json(&path, &results)?;
        outputs.push(path);
        config["train"] = json!(tc);
        config["levels"] = json!(levels);
        config["variants"] = json!(variants.iter().map(|v| v.name()).collect::<Vec<_>>());
    }
    m.write(&a.out, config, Vec::new(), outputs)?;
    Ok(())
}

/// `n` entries spread evenly over `items`.
fn spread<T: Clone>(items: &[T], n: usize) -> Vec<T> {
    if items.len() <= n {
        return items.to_vec();
    }
    (0..n).map(|i| items[i * items.len() / n].clone()).collect()
}

fn probe_cmd(ctx: &Ctx, a: &ProbeArgs) -> Result<()> {
    let m = ctx.manifest("probe");
    let l = load_model_dir(&a.model)?;
    let mut samples: Vec<SampleRecord> = Vec::new();
    let mut inputs = vec![a.model.join(CHECKPOINT)];
    for name in a.splits.split(',').map(str::trim) {
        check_split(name)?;
        let path = data::split_path(&a.data, name);
        if path.exists() {
            samples.extend(data::load_split(&a.data, name)?);
            inputs.push(path);
        }
    }
    let Some(first) = samples.first() else {
        bail!("no samples in splits {} of {}", a.splits, a.data.display());
    };
    let probe_src = l.src_vocab.encode(&first.src);
    let texts = spread(&context_strings(&samples), a.max_contexts);
    let mut cache = EmbeddingCache::new(&l.vectorizer);
    let items = texts
        .iter()
        .map(|t| Ok(ContextItem::new(t.clone(), cache.embed(t)?)))
        .collect::<cuenmt::Result<Vec<_>>>()?;
    let report = probe_contexts(&l.model, &l.tgt_vocab, &probe_src, &items)?;
    println!(
        "{} contexts: encoder purity {:.4}, raw purity {:.4}",
        items.len(),
        report.purity,
        report.raw_purity
    );

    fs::create_dir_all(&a.out)?;
    let tsv = a.out.join("probe.tsv");
    write_probe_tsv(&report.rows, &tsv)?;
    let summary = a.out.join("probe_summary.json");
    write_json(
        &summary,
        &json!({
            "contexts": items.len(),
            "neighbors": PROBE_NEIGHBORS,
            "probe_src": first.src,
            "purity": report.purity,
            "raw_purity": report.raw_purity,
        }),
    )?;
    let config = json!({"splits": a.splits, "max_contexts": a.max_contexts, "backend": l.backend});
    m.write(&a.out, config, inputs, vec![tsv, summary])?;
    Ok(())
}
