//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass a substring to run matching criteria only.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cuenmt::autograd::{GradBuffer, Graph};
use cuenmt::context_encoder::{qknorm_attention, ContextItem, ContextSet, DocContext, TextContexts};
use cuenmt::corpus::{build_documents, RawPair, BOS, EOS, MAX_GAP_SECONDS, MIN_OVERLAP};
use cuenmt::embed_store::{build_store, read_index, EmbeddingStore, HEADER_BYTES};
use cuenmt::evalbench::{
    bleu, make_control_task, prepare, probe_contexts, run, run_ablation, write_probe_tsv, AblationSpec, ControlSpec,
    ControlTask, RunResult,
};
use cuenmt::nmt_model::{Example, ModelConfig, TranslationModel, Variant};
use cuenmt::tensor::Matrix;
use cuenmt::trainer::TrainConfig;
use cuenmt::vectorizer::{Embedding, Vectorizer};

type Check = Result<String, String>;

struct Suite {
    filter: Vec<String>,
    failures: usize,
    ran: usize,
}

impl Suite {
    fn criterion(&mut self, name: &str, limit: Duration, f: impl FnOnce() -> Check) {
        if !self.filter.is_empty() && !self.filter.iter().any(|p| name.contains(p.as_str())) {
            return;
        }
        self.ran += 1;
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let (pass, detail) = match outcome {
            Ok(d) if took <= limit => (true, d),
            Ok(d) => (false, format!("{d}; exceeded {limit:?}")),
            Err(d) => (false, d),
        };
        if !pass {
            self.failures += 1;
        }
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag} {name}: {detail} [{:.1}s]", took.as_secs_f64());
    }
}

fn ensure(cond: bool, detail: String) -> Check {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_embedding(rng: &mut impl Rng, dim: usize) -> Embedding {
    Embedding::new((0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
}

fn random_contexts(rng: &mut impl Rng, dim: usize, doc: usize, meta: usize) -> ContextSet {
    ContextSet {
        doc: (1..=doc)
            .map(|d| DocContext {
                item: ContextItem::new(format!("doc {d}"), random_embedding(rng, dim)),
                distance: d,
            })
            .collect(),
        meta: (0..meta)
            .map(|i| ContextItem::new(format!("meta {i}"), random_embedding(rng, dim)))
            .collect(),
    }
}

fn random_tokens(rng: &mut impl Rng, vocab: usize, lens: std::ops::Range<usize>) -> Vec<u32> {
    let len = rng.random_range(lens);
    let mut v = vec![BOS];
    v.extend((0..len).map(|_| rng.random_range(4..vocab as u32)));
    v
}

fn no_context_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = |v| ModelConfig {
        init_seed: 5,
        ..ModelConfig::desk(v, 60, 70)
    };
    let base = TranslationModel::new(cfg(Variant::Base)).map_err(|e| e.to_string())?;
    let mtcue = TranslationModel::new(cfg(Variant::MtCue)).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut src = random_tokens(&mut rng, 60, 1..12);
        src.push(EOS);
        let prefix = random_tokens(&mut rng, 70, 0..10);
        let a = base.forward(&src, &ContextSet::empty(), &prefix).map_err(|e| e.to_string())?;
        let b = mtcue.forward(&src, &ContextSet::empty(), &prefix).map_err(|e| e.to_string())?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    ensure(worst < 1e-6, format!("max |Δlogit| = {worst:.2e} over 20 inputs (< 1e-6)"))
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect())
}

fn qk_norm_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_bound, mut worst_shift) = (f64::NEG_INFINITY, 0.0f64);
    for _ in 0..1000 {
        let (n, m, d) = (rng.random_range(1..8), rng.random_range(1..10), rng.random_range(1..17));
        let (q, k, v) = (random_matrix(&mut rng, n, d), random_matrix(&mut rng, m, d), random_matrix(&mut rng, m, d));
        let g = rng.random_range(0.1..30.0);
        let out = qknorm_attention(&q, &k, &v, g, None).map_err(|e| e.to_string())?;
        let max_logit = out.logits.data().iter().fold(0.0f64, |a, x| a.max(x.abs()));
        worst_bound = worst_bound.max(max_logit - g);
        let scale_rows = |mat: &Matrix, rng: &mut ChaCha8Rng| {
            let mut s = mat.clone();
            for r in 0..s.rows() {
                if rng.random_bool(0.5) {
                    s.row_mut(r).iter_mut().for_each(|x| *x *= 1000.0);
                }
            }
            s
        };
        let (q2, k2) = (scale_rows(&q, &mut rng), scale_rows(&k, &mut rng));
        let scaled = qknorm_attention(&q2, &k2, &v, g, None).map_err(|e| e.to_string())?;
        worst_shift = worst_shift.max(scaled.output.max_abs_diff(&out.output));
    }
    ensure(
        worst_bound <= 1e-5 && worst_shift < 1e-5,
        format!("max(|logit| - g) = {worst_bound:.2e} (<= 1e-5), max output change under 1000x rows = {worst_shift:.2e} (< 1e-5)"),
    )
}

fn gradient_checks() -> Check {
    let cfg = ModelConfig {
        d_model: 8,
        heads: 2,
        src_layers: 1,
        dec_layers: 1,
        cxt_layers: 1,
        ffn_src: 8,
        ffn_dec: 8,
        ffn_cxt: 8,
        embed_dim: 12,
        init_seed: 3,
        ..ModelConfig::desk(Variant::MtCue, 20, 24)
    };
    let mut model = TranslationModel::new(cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ex = Example {
        id: "grad".into(),
        src: vec![BOS, 5, 9, 7, 11, EOS],
        tgt: vec![BOS, 6, 8, 4, 13, EOS],
        context: random_contexts(&mut rng, 12, 2, 3),
    };
    let loss = |m: &TranslationModel| -> f64 {
        let mut g = Graph::new(&m.params);
        let l = m.loss(&mut g, &ex).expect("loss");
        g.value(l).get(0, 0)
    };
    let mut grads = GradBuffer::new(&model.params);
    {
        let mut g = Graph::new(&model.params);
        let l = model.loss(&mut g, &ex).map_err(|e| e.to_string())?;
        g.backward(l, &mut grads);
    }
    let h = 1e-5;
    let ids: Vec<_> = model.params.iter().map(|(id, n, _)| (id, n.to_string())).collect();
    let (mut worst, mut worst_name) = (0.0f64, String::new());
    for (id, name) in &ids {
        let (rows, cols) = model.params.value(*id).shape();
        let analytic = grads.get(*id).cloned().unwrap_or_else(|| Matrix::zeros(rows, cols));
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for _ in 0..8 {
            let (r, c) = (rng.random_range(0..rows), rng.random_range(0..cols));
            let orig = model.params.value(*id).get(r, c);
            model.params.value_mut(*id).set(r, c, orig + h);
            let up = loss(&model);
            model.params.value_mut(*id).set(r, c, orig - h);
            let down = loss(&model);
            model.params.value_mut(*id).set(r, c, orig);
            let numeric = (up - down) / (2.0 * h);
            diff += (analytic.get(r, c) - numeric).powi(2);
            scale = scale.max(analytic.get(r, c).abs()).max(numeric.abs());
        }
        // zero-gradient tensors (key biases) are compared against a floor above
        // central-difference rounding noise
        let rel = diff.sqrt() / scale.max(1e-5);
        if rel > worst {
            worst = rel;
            worst_name = name.clone();
        }
    }
    ensure(
        worst < 1e-4,
        format!("{} tensors, worst relative error {worst:.2e} ({worst_name}) (< 1e-4)", ids.len()),
    )
}

fn metadata_permutation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = TranslationModel::new(ModelConfig {
        embed_dim: 32,
        init_seed: 4,
        ..ModelConfig::desk(Variant::MtCue, 40, 40)
    })
    .map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let doc = rng.random_range(0..4);
        let meta = rng.random_range(2..7);
        let cs = random_contexts(&mut rng, 32, doc, meta);
        let mut src = random_tokens(&mut rng, 40, 1..8);
        src.push(EOS);
        let prefix = random_tokens(&mut rng, 40, 0..6);
        let a = model.forward(&src, &cs, &prefix).map_err(|e| e.to_string())?;
        let mut p = cs.clone();
        p.meta.shuffle(&mut rng);
        let b = model.forward(&src, &p, &prefix).map_err(|e| e.to_string())?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    ensure(worst < 1e-5, format!("max |Δlogit| = {worst:.2e} over 100 permutations (< 1e-5)"))
}

fn embedding_store() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pool: Vec<String> = (0..394).map(|i| format!("context sentence number {i}")).collect();
    let samples: Vec<(String, TextContexts)> = (0..10_000)
        .map(|i| {
            let doc = (1..=rng.random_range(0..4)).map(|d| (pool[rng.random_range(0..394)].clone(), d)).collect();
            let meta = (0..rng.random_range(0..3)).map(|_| pool[rng.random_range(0..394)].clone()).collect();
            (format!("s{i}"), TextContexts { doc, meta })
        })
        .collect();
    let v = Vectorizer::hash(7, 384);
    let (store_path, index_path) = (dir.path().join("ctx.bin"), dir.path().join("ctx.idx"));
    let summary = build_store(samples.iter().map(|(i, c)| (i.as_str(), c)), &v, 5, &store_path, &index_path)
        .map_err(|e| e.to_string())?;
    let store = EmbeddingStore::open(&store_path).map_err(|e| e.to_string())?;
    let index = read_index(&index_path).map_err(|e| e.to_string())?;
    let mut mismatches = 0usize;
    for ((_, ctx), entry) in samples.iter().zip(&index) {
        let got = store.lookup(entry).map_err(|e| e.to_string())?;
        let want: Vec<&String> = ctx.doc.iter().map(|(t, _)| t).chain(&ctx.meta).collect();
        if got.len() != want.len() {
            mismatches += 1;
            continue;
        }
        for ((_, _, e), text) in got.iter().zip(want) {
            if e.bits() != v.embed(text).map_err(|e| e.to_string())?.bits() {
                mismatches += 1;
            }
        }
    }
    let round_trip = index.len() == 10_000 && mismatches == 0 && summary.unique <= 394;

    let repeated: Vec<(String, TextContexts)> = (0..1000)
        .map(|i| {
            let meta = vec![format!("shared context {}", i % 100)];
            (format!("r{i}"), TextContexts { doc: Vec::new(), meta })
        })
        .collect();
    let (s2, i2) = (dir.path().join("rep.bin"), dir.path().join("rep.idx"));
    let rep = build_store(repeated.iter().map(|(i, c)| (i.as_str(), c)), &v, 5, &s2, &i2).map_err(|e| e.to_string())?;
    let payload = std::fs::metadata(&s2).map_err(|e| e.to_string())?.len() - HEADER_BYTES;
    let naive = (rep.references * 384 * 4) as u64;
    let ratio = payload as f64 / naive as f64;
    ensure(
        round_trip && ratio <= 0.10,
        format!(
            "10000 samples, {} unique rows, {mismatches} bit mismatches; 10x repetition payload ratio {ratio:.4} (<= 0.10)",
            summary.unique
        ),
    )
}

/// Pairs `a` and `b` (stream positions, `a < b`) belong together iff every
/// pair from `a` to `b` is kept and no consecutive gap between them is too
/// large.
fn same_document_oracle(stream: &[RawPair], a: usize, b: usize) -> bool {
    (a..=b).all(|i| stream[i].overlap >= MIN_OVERLAP)
        && (a..b).all(|i| stream[i + 1].start_time - stream[i].start_time <= MAX_GAP_SECONDS)
}

fn document_builder_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut violations = 0usize;
    let mut checked = 0usize;
    for s in 0..1000 {
        let n = rng.random_range(0..40);
        let mut t = 0.0;
        let stream: Vec<RawPair> = (0..n)
            .map(|i| {
                t += rng.random_range(0.0..12.0);
                RawPair {
                    src: format!("p{i}"),
                    tgt: format!("q{i}"),
                    doc_key: format!("key{s}"),
                    start_time: t,
                    overlap: if rng.random_bool(0.15) { rng.random_range(0.5..0.9) } else { rng.random_range(0.9..=1.0) },
                }
            })
            .collect();
        let docs = build_documents(&stream).map_err(|e| e.to_string())?;
        let mut doc_of = vec![None; n];
        for (d, doc) in docs.iter().enumerate() {
            for p in &doc.pairs {
                let i: usize = p.src[1..].parse().expect("pair id");
                doc_of[i] = Some(d);
            }
        }
        for a in 0..n {
            if (stream[a].overlap >= MIN_OVERLAP) != doc_of[a].is_some() {
                violations += 1;
            }
            for b in a + 1..n {
                checked += 1;
                let together = doc_of[a].is_some() && doc_of[a] == doc_of[b];
                if together != same_document_oracle(&stream, a, b) {
                    violations += 1;
                }
            }
        }
    }
    ensure(violations == 0, format!("1000 streams, {checked} pair relations, {violations} violations"))
}

fn bleu_closed_forms() -> Check {
    let c = ["the cat sat on the mat", "a b c d e"];
    let identity = bleu(&c, &c).map_err(|e| e.to_string())?;
    let short = bleu(&["a b c d"], &["a b c d e"]).map_err(|e| e.to_string())?;
    let zero = bleu(&["a b c x d"], &["a b c y d"]).map_err(|e| e.to_string())?;
    ensure(
        (identity - 100.0).abs() < 1e-9 && (short - 77.88).abs() <= 0.01 && zero == 0.0,
        format!("identity {identity:.2}, 4/5-length {short:.4} (77.88 ± 0.01), no 4-gram match {zero}"),
    )
}

fn desk_training(max_epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        warmup_steps: 100,
        batch_tokens: 1000,
        max_epochs,
        patience: 3,
        seed,
        ..TrainConfig::default()
    }
}

fn template(variant: Variant, seed: u64) -> ModelConfig {
    ModelConfig {
        init_seed: seed,
        ..ModelConfig::desk(variant, 0, 0)
    }
}

struct Shared {
    task: ControlTask,
    mtcue: RunResult,
    train_seconds: f64,
}

fn train_full(task: ControlTask) -> Result<Shared, String> {
    let start = Instant::now();
    let v = task.vectorizer().map_err(|e| e.to_string())?;
    let mtcue = run(&template(Variant::MtCue, 0), &task.data, &v, &desk_training(6, 0)).map_err(|e| e.to_string())?;
    Ok(Shared {
        task,
        mtcue,
        train_seconds: start.elapsed().as_secs_f64(),
    })
}

fn chance(task: &ControlTask) -> f64 {
    1.0 / task.combination_count() as f64
}

fn control_task(shared: &Shared) -> Check {
    let task = &shared.task;
    let v = task.vectorizer().map_err(|e| e.to_string())?;
    let base = run(&template(Variant::Base, 0), &task.data, &v, &desk_training(3, 0)).map_err(|e| e.to_string())?;
    let acc = shared.mtcue.control.exact;
    let base_acc = base.control.exact;
    ensure(
        task.combination_count() == 38 && acc >= 0.95 && (base_acc - chance(task)).abs() <= 0.05,
        format!(
            "{} combinations, {} train pairs; MtCue exact {acc:.4} (>= 0.95, BLEU {:.2}); Base exact {base_acc:.4} (chance {:.4} ± 0.05); shared MtCue training {:.1}s",
            task.combination_count(),
            task.data.train.len(),
            shared.mtcue.bleu,
            chance(task),
            shared.train_seconds
        ),
    )
}

fn few_shot_ordering() -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for level in [38, 180] {
        let mut wins = 0;
        let mut accs = Vec::new();
        for seed in 0..3 {
            let spec = ControlSpec {
                supervision: Some(level),
                ..ControlSpec::eamt()
            };
            let task = make_control_task(&spec, seed).map_err(|e| e.to_string())?;
            let v = task.vectorizer().map_err(|e| e.to_string())?;
            let p = prepare(&task.data, &v, false).map_err(|e| e.to_string())?;
            let tc = desk_training(5, seed);
            let m = cuenmt::evalbench::run_prepared(&template(Variant::MtCue, seed), &p, &tc).map_err(|e| e.to_string())?;
            let t = cuenmt::evalbench::run_prepared(&template(Variant::Tagging, seed), &p, &tc).map_err(|e| e.to_string())?;
            wins += usize::from(m.control.exact >= t.control.exact);
            accs.push(format!("{:.3}/{:.3}", m.control.exact, t.control.exact));
        }
        ok &= wins >= 2;
        lines.push(format!("supervision {level}: MtCue>=Tagging in {wins}/3 seeds (MtCue/Tagging {})", accs.join(", ")));
    }
    ensure(ok, lines.join("; "))
}

fn zero_shot_mechanism(shared: &Shared) -> Check {
    let task = &shared.task;
    let v = task.vectorizer().map_err(|e| e.to_string())?;
    let full_zs = shared.mtcue.zero_shot.as_ref().map(|z| z.exact).ok_or("no zero-shot split")?;
    let tc = desk_training(4, 0);
    let discrete = AblationSpec {
        discrete_vectorizer: true,
        ..Default::default()
    };
    let random = AblationSpec {
        random_context: true,
        ..Default::default()
    };
    let cfg = template(Variant::MtCue, 0);
    let d = run_ablation(&discrete, &cfg, &task.data, &v, &tc, 0).map_err(|e| e.to_string())?;
    let r = run_ablation(&random, &cfg, &task.data, &v, &tc, 0).map_err(|e| e.to_string())?;
    let d_zs = d.zero_shot_accuracy.ok_or("no zero-shot split")?;
    let gap = full_zs - d_zs;
    ensure(
        gap >= 0.20 && (r.accuracy - chance(task)).abs() <= 0.05,
        format!(
            "zero-shot MtCue {full_zs:.4} vs discrete_vectorizer {d_zs:.4} (gap {gap:.4} >= 0.20; discrete supervised {:.4}); random_context {:.4} (chance {:.4} ± 0.05)",
            d.accuracy,
            r.accuracy,
            chance(task)
        ),
    )
}

fn probe_purity(shared: &Shared) -> Check {
    let contexts: Vec<ContextItem> = shared
        .task
        .sample_contexts(394, 99)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|(c, _)| c)
        .collect();
    let p = prepare(&shared.task.data, &shared.task.vectorizer().map_err(|e| e.to_string())?, false)
        .map_err(|e| e.to_string())?;
    let probe_src = &p.test.examples[0].src;
    let report = probe_contexts(&shared.mtcue.model, &p.tgt_vocab, probe_src, &contexts).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("probe.tsv");
    write_probe_tsv(&report.rows, &path).map_err(|e| e.to_string())?;
    let lines = std::fs::read_to_string(&path).map_err(|e| e.to_string())?.lines().count() - 1;
    let markers: HashSet<&str> = report.rows.iter().map(|r| r.marker.as_str()).collect();
    ensure(
        lines == 394 && report.purity > report.raw_purity,
        format!(
            "{lines} rows, {} distinct decoded markers; encoder purity {:.4} > raw purity {:.4}",
            markers.len(),
            report.purity,
            report.raw_purity
        ),
    )
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut suite = Suite {
        filter,
        failures: 0,
        ran: 0,
    };
    let secs = Duration::from_secs;
    suite.criterion("no-context equivalence", secs(10), no_context_equivalence);
    suite.criterion("qk-norm suite", secs(30), qk_norm_suite);
    suite.criterion("gradient checks", secs(120), gradient_checks);
    suite.criterion("metadata permutation invariance", secs(60), metadata_permutation);
    suite.criterion("embedding store", secs(60), embedding_store);
    suite.criterion("document builder oracle", secs(60), document_builder_oracle);
    suite.criterion("bleu closed forms", secs(1), bleu_closed_forms);

    let wants = |name: &str| suite.filter.is_empty() || suite.filter.iter().any(|p| name.contains(p.as_str()));
    let needs_shared = ["control task", "zero-shot mechanism", "probe purity"].iter().any(|n| wants(n));
    let train_start = Instant::now();
    let shared = if needs_shared {
        Some(make_control_task(&ControlSpec::eamt(), 0).map_err(|e| e.to_string()).and_then(train_full))
    } else {
        None
    };
    let train_time = train_start.elapsed();
    let with_shared = |f: fn(&Shared) -> Check| {
        let shared = shared.as_ref().expect("shared model requested");
        move || shared.as_ref().map_err(|e| format!("training failed: {e}")).and_then(f)
    };
    if needs_shared {
        // the shared model's training time counts against the control-task budget
        let budget = secs(30 * 60).saturating_sub(train_time);
        suite.criterion("control task", budget, with_shared(control_task));
    }
    suite.criterion("few-shot ordering", secs(90 * 60), few_shot_ordering);
    if needs_shared {
        suite.criterion("zero-shot mechanism", secs(45 * 60), with_shared(zero_shot_mechanism));
        suite.criterion("probe purity", secs(5 * 60), with_shared(probe_purity));
    }
    println!("{} of {} criteria passed", suite.ran - suite.failures, suite.ran);
    if suite.failures > 0 {
        std::process::exit(1);
    }
}
