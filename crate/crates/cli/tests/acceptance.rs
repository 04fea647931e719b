//! Acceptance suite: one pass/fail line per criterion.
//!
//! `LEXSHORT_ACCEPTANCE=1,2,11` runs a subset. Tables and a JSON summary go to
//! `$CARGO_TARGET_TMPDIR/acceptance`.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use lexshort::commands::train::{fit, FitOptions, Validator};
use lexshort_core::data::corpus::contrastive_set;
use lexshort_core::data::{
    encode_sentence, gen_corpus, CorpusConfig, ParallelCorpus, Task, Vocabulary, BOS, EOS, PAD, UNK,
};
use lexshort_core::eval::{beam_search, contrastive_score, corpus_bleu, greedy, translate, DecodeOptions, ScoreNorm};
use lexshort_core::model::{average_checkpoints, Checkpoint, Forward, Mode, Padded};
use lexshort_core::probe::{dump_states, token_frequencies, train_probe, DumpSentence, Network, ProbeConfig};
use lexshort_core::rng::SeedStream;
use lexshort_core::shortcuts::fuse;
use lexshort_core::tensor::{grad_check, grad_check_sampled, GradCheckReport};
use lexshort_core::train::{average_last, noam_lr, TrainConfig};
use lexshort_core::{Batch, Model, ModelConfig, ShortcutKind, Tape, Tensor, Var};
use rand::Rng;
use serde::Serialize;

const SEEDS: [u64; 3] = [1, 2, 3];
const BATCH_TOKENS: usize = 500;
const DECODE_MAX_LEN: usize = 64;

#[derive(Debug, Clone, Serialize)]
struct Outcome {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
    seconds: f64,
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// One averaged lexicon-task model per (variant, seed).
struct LexiconRun {
    kind: ShortcutKind,
    seed: u64,
    model: Model<f32>,
    bleu: f64,
    train_secs: f64,
}

struct LexiconData {
    corpus: ParallelCorpus,
    vocab: Vocabulary,
}

/// State shared between criteria: the lexicon runs feed 6, 7 and 10.
struct Suite {
    out: PathBuf,
    lexicon_data: Vec<(u64, LexiconData)>,
    lexicon_runs: Option<Vec<LexiconRun>>,
}

impl Suite {
    fn lexicon_data(&mut self, seed: u64) -> Result<&LexiconData> {
        if !self.lexicon_data.iter().any(|(s, _)| *s == seed) {
            let corpus = gen_corpus(&CorpusConfig {
                task: Task::Lexicon,
                seed,
                ..CorpusConfig::default()
            })?;
            let vocab = Vocabulary::build(corpus.all_lines());
            self.lexicon_data.push((seed, LexiconData { corpus, vocab }));
        }
        Ok(&self.lexicon_data.iter().find(|(s, _)| *s == seed).unwrap().1)
    }

    fn lexicon_runs(&mut self) -> Result<&[LexiconRun]> {
        if self.lexicon_runs.is_none() {
            let mut runs = Vec::new();
            for seed in SEEDS {
                for kind in [ShortcutKind::None, ShortcutKind::Lexical, ShortcutKind::LexicalFusion] {
                    runs.push(self.train_lexicon(kind, seed)?);
                }
            }
            self.lexicon_runs = Some(runs);
        }
        Ok(self.lexicon_runs.as_deref().unwrap())
    }

    fn train_lexicon(&mut self, kind: ShortcutKind, seed: u64) -> Result<LexiconRun> {
        let dir = self.out.join("lexicon").join(format!("{kind}-{seed}"));
        let _ = fs::remove_dir_all(&dir);
        let data = self.lexicon_data(seed)?;
        let mut mc = ModelConfig::toy(data.vocab.len()).with_variant(kind);
        mc.seed = seed;
        let mut model = Model::<f32>::new(mc)?;
        let mut train = TrainConfig::toy(kind);
        train.seed = seed;
        train.validate_every = 0;
        let opts = FitOptions {
            train,
            batch_tokens: BATCH_TOKENS,
            validation_sentences: 0,
            stop_at_accuracy: None,
            decode_max_len: DECODE_MAX_LEN,
            out_dir: Some(dir.clone()),
            resume: false,
        };
        let start = Instant::now();
        fit(&mut model, &data.vocab, &data.corpus, &opts)?;
        let train_secs = start.elapsed().as_secs_f64();
        let averaged = average_last(&dir, 5)?;
        averaged.save(&dir.with_extension("ckpt"))?;
        fs::remove_dir_all(&dir)?;
        let avg = averaged.model()?;
        let srcs: Vec<Vec<usize>> = data
            .corpus
            .test
            .iter()
            .map(|p| encode_sentence(&data.vocab, &p.src))
            .collect();
        let refs: Vec<String> = data.corpus.test.iter().map(|p| p.tgt_line()).collect();
        let hyps = translate(&avg, &srcs, &DecodeOptions::new(16, DECODE_MAX_LEN))?;
        let text: Vec<String> = hyps.iter().map(|h| data.vocab.decode(h.output())).collect();
        let bleu = corpus_bleu(&text, &refs)?.score;
        eprintln!("  lexicon {kind} seed {seed}: BLEU {bleu:.2} (train {train_secs:.0} s)");
        Ok(LexiconRun {
            kind,
            seed,
            model: avg,
            bleu,
            train_secs,
        })
    }
}

fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = SeedStream::new(seed).rng();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(shape, seed, -1.0, 1.0)
}

/// Values with magnitude in [0.2, 1], far from the kink of relu.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let t = uniform(shape, seed, 0.2, 1.0);
    let signs = rnd(shape, seed ^ 0x55);
    let data = t.data().iter().zip(signs.data()).map(|(v, s)| v.copysign(*s)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(out ⊙ W)` with fixed random `W`, so every output element carries a distinct weight.
fn reduce(t: &mut Tape<f64>, out: Var, seed: u64) -> lexshort_core::Result<Var> {
    let w = t.constant(rnd(t.shape(out), seed));
    let p = t.mul(out, w)?;
    t.sum(p)
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> lexshort_core::Result<Var>>;

fn op_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> {
    let s = |shape: &[usize], seed: u64| rnd(shape, seed);
    let bcast = s(&[2, 3, 3], 90);
    vec![
        (
            "add",
            vec![s(&[2, 3], 1), s(&[2, 3], 2)],
            Box::new(|t, v| {
                let o = t.add(v[0], v[1])?;
                reduce(t, o, 100)
            }),
        ),
        (
            "sub",
            vec![s(&[2, 3], 3), s(&[2, 3], 4)],
            Box::new(|t, v| {
                let o = t.sub(v[0], v[1])?;
                reduce(t, o, 101)
            }),
        ),
        (
            "mul",
            vec![s(&[2, 3], 5), s(&[2, 3], 6)],
            Box::new(|t, v| {
                let o = t.mul(v[0], v[1])?;
                reduce(t, o, 102)
            }),
        ),
        (
            "add_row",
            vec![s(&[2, 3, 4], 7), s(&[4], 8)],
            Box::new(|t, v| {
                let o = t.add_row(v[0], v[1])?;
                reduce(t, o, 103)
            }),
        ),
        (
            "mul_row",
            vec![s(&[2, 3, 4], 9), s(&[4], 10)],
            Box::new(|t, v| {
                let o = t.mul_row(v[0], v[1])?;
                reduce(t, o, 104)
            }),
        ),
        (
            "scale",
            vec![s(&[3, 4], 11)],
            Box::new(|t, v| {
                let o = t.scale(v[0], -0.7)?;
                reduce(t, o, 105)
            }),
        ),
        (
            "add_broadcast_constant",
            vec![s(&[2, 2, 3, 3], 12)],
            Box::new(move |t, v| {
                let o = t.add_broadcast_constant(v[0], &bcast)?;
                reduce(t, o, 106)
            }),
        ),
        (
            "reshape",
            vec![s(&[2, 3, 4], 13)],
            Box::new(|t, v| {
                let o = t.reshape(v[0], &[6, 4])?;
                reduce(t, o, 107)
            }),
        ),
        (
            "matmul",
            vec![s(&[2, 3, 4], 14), s(&[2, 4, 5], 15)],
            Box::new(|t, v| {
                let o = t.matmul(v[0], v[1])?;
                reduce(t, o, 108)
            }),
        ),
        (
            "matmul shared rhs",
            vec![s(&[2, 3, 4], 16), s(&[4, 5], 17)],
            Box::new(|t, v| {
                let o = t.matmul(v[0], v[1])?;
                reduce(t, o, 109)
            }),
        ),
        (
            "matmul_nt",
            vec![s(&[2, 3, 4], 18), s(&[2, 5, 4], 19)],
            Box::new(|t, v| {
                let o = t.matmul_nt(v[0], v[1])?;
                reduce(t, o, 110)
            }),
        ),
        (
            "matmul_ex ta",
            vec![s(&[2, 4, 3], 20), s(&[2, 4, 5], 21)],
            Box::new(|t, v| {
                let o = t.matmul_ex(v[0], v[1], true, false)?;
                reduce(t, o, 111)
            }),
        ),
        (
            "matmul_ex ta tb",
            vec![s(&[2, 4, 3], 22), s(&[2, 5, 4], 23)],
            Box::new(|t, v| {
                let o = t.matmul_ex(v[0], v[1], true, true)?;
                reduce(t, o, 112)
            }),
        ),
        (
            "softmax axis 0",
            vec![s(&[2, 3, 4], 24)],
            Box::new(|t, v| {
                let o = t.softmax(v[0], 0)?;
                reduce(t, o, 113)
            }),
        ),
        (
            "softmax axis 1",
            vec![s(&[2, 3, 4], 25)],
            Box::new(|t, v| {
                let o = t.softmax(v[0], 1)?;
                reduce(t, o, 114)
            }),
        ),
        (
            "softmax axis 2",
            vec![s(&[2, 3, 4], 26)],
            Box::new(|t, v| {
                let o = t.softmax(v[0], 2)?;
                reduce(t, o, 115)
            }),
        ),
        (
            "sigmoid",
            vec![uniform(&[3, 4], 27, -4.0, 4.0)],
            Box::new(|t, v| {
                let o = t.sigmoid(v[0])?;
                reduce(t, o, 116)
            }),
        ),
        (
            "relu",
            vec![away_from_zero(&[3, 4], 28)],
            Box::new(|t, v| {
                let o = t.relu(v[0])?;
                reduce(t, o, 117)
            }),
        ),
        (
            "normalize",
            vec![s(&[3, 5], 29)],
            Box::new(|t, v| {
                let o = t.normalize(v[0], 1e-6)?;
                reduce(t, o, 118)
            }),
        ),
        (
            "gather",
            vec![s(&[6, 4], 30)],
            Box::new(|t, v| {
                let o = t.gather(v[0], &[0, 2, 2, 5, 1, 0], &[2, 3])?;
                reduce(t, o, 119)
            }),
        ),
        (
            "concat axis 0",
            vec![s(&[1, 3, 4], 31), s(&[2, 3, 4], 32)],
            Box::new(|t, v| {
                let o = t.concat(&[v[0], v[1]], 0)?;
                reduce(t, o, 120)
            }),
        ),
        (
            "concat axis 2",
            vec![s(&[2, 3, 4], 33), s(&[2, 3, 2], 34)],
            Box::new(|t, v| {
                let o = t.concat(&[v[0], v[1]], 2)?;
                reduce(t, o, 121)
            }),
        ),
        (
            "narrow",
            vec![s(&[2, 5, 3], 35)],
            Box::new(|t, v| {
                let o = t.narrow(v[0], 1, 1, 3)?;
                reduce(t, o, 122)
            }),
        ),
        (
            "split",
            vec![s(&[2, 3, 4], 36)],
            Box::new(|t, v| {
                let parts = t.split(v[0], 2, &[1, 3])?;
                let a = reduce(t, parts[0], 123)?;
                let b = reduce(t, parts[1], 124)?;
                t.add(a, b)
            }),
        ),
        (
            "permute",
            vec![s(&[2, 3, 4, 2], 37)],
            Box::new(|t, v| {
                let o = t.permute(v[0], &[0, 2, 1, 3])?;
                reduce(t, o, 125)
            }),
        ),
        (
            "dropout",
            vec![s(&[4, 5], 38)],
            Box::new(|t, v| {
                let mut rng = SeedStream::new(7).rng();
                let o = t.dropout(v[0], 0.3, &mut rng)?;
                reduce(t, o, 126)
            }),
        ),
        (
            "blend",
            vec![uniform(&[3, 4], 39, 0.05, 0.95), s(&[3, 4], 40), s(&[3, 4], 41)],
            Box::new(|t, v| {
                let o = t.blend(v[0], v[1], v[2])?;
                reduce(t, o, 127)
            }),
        ),
        (
            "cross_entropy",
            vec![s(&[4, 5], 42)],
            Box::new(|t, v| t.cross_entropy(v[0], &[0, 3, 4, 1], &[1.0, 0.5, 0.0, 2.0], 0.1)),
        ),
        (
            "sum",
            vec![s(&[3, 4], 43)],
            Box::new(|t, v| {
                let o = t.sum(v[0])?;
                t.scale(o, 1.3)
            }),
        ),
        (
            "mean",
            vec![s(&[3, 4], 44)],
            Box::new(|t, v| {
                let o = t.mean(v[0])?;
                t.scale(o, 1.3)
            }),
        ),
    ]
}

fn random_batch(vocab: usize, sizes: &[(usize, usize)], seed: u64) -> Batch {
    let mut rng = SeedStream::new(seed).rng();
    let mut seq = |n: usize| -> Vec<usize> {
        let mut s: Vec<usize> = (0..n - 1).map(|_| rng.gen_range(4..vocab)).collect();
        s.push(EOS);
        s
    };
    let (src, tgt) = sizes.iter().map(|&(a, b)| (seq(a), seq(b))).unzip();
    Batch::new(src, tgt).unwrap()
}

fn model_check(
    model: &Model<f64>,
    batch: &Batch,
    dropout_seed: Option<u64>,
    sample: Option<usize>,
) -> Result<GradCheckReport> {
    let inputs: Vec<Tensor<f64>> = model.params().tensors().to_vec();
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let mode = match dropout_seed {
            Some(s) => Mode::Train(SeedStream::new(s).rng()),
            None => Mode::Eval,
        };
        let mut fw = Forward::with_vars(model, tape, vars.to_vec(), mode);
        Ok(fw.loss(batch)?.loss)
    };
    Ok(match sample {
        None => grad_check(f, &inputs, 1e-5)?,
        Some(n) => grad_check_sampled(f, &inputs, 1e-5, n, 11)?,
    })
}

fn c1_gradients(_: &mut Suite) -> Result<Verdict> {
    let start = Instant::now();
    let mut op_worst = (0.0f64, "");
    for (name, inputs, f) in op_cases() {
        let r = grad_check(f, &inputs, 1e-5).with_context(|| format!("op {name}"))?;
        ensure!(r.checked > 0, "op {name} checked nothing");
        if r.max_rel_error > op_worst.0 || op_worst.1.is_empty() {
            op_worst = (r.max_rel_error, name);
        }
    }
    let ops_count = op_cases().len();

    let mut model_worst = (0.0f64, String::new());
    let mut note = |r: &GradCheckReport, label: String| {
        if r.max_rel_error >= model_worst.0 {
            model_worst = (r.max_rel_error, label);
        }
    };
    let small_batch = random_batch(12, &[(3, 3), (2, 4)], 5);
    for kind in ShortcutKind::ALL {
        let mut c = ModelConfig::toy(12).with_variant(kind);
        c.d_model = 8;
        c.head_count = 2;
        c.d_ff = 8;
        c.seed = 3;
        let model = Model::<f64>::new(c)?;
        note(&model_check(&model, &small_batch, None, None)?, format!("small {kind}"));
        if matches!(kind, ShortcutKind::Lexical | ShortcutKind::LexicalFusion) {
            note(
                &model_check(&model, &small_batch, Some(9), None)?,
                format!("small {kind} with dropout"),
            );
        }
    }
    let toy_batch = random_batch(30, &[(6, 5), (4, 6)], 6);
    for kind in ShortcutKind::ALL {
        let mut c = ModelConfig::toy(30).with_variant(kind);
        c.seed = 4;
        let model = Model::<f64>::new(c)?;
        note(&model_check(&model, &toy_batch, None, Some(6))?, format!("toy {kind}"));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = op_worst.0 <= 1e-5 && model_worst.0 <= 1e-4 && secs < 120.0;
    Ok(verdict(
        pass,
        format!(
            "{ops_count} op cases worst {:.2e} ({}); full models worst {:.2e} ({}); {secs:.1} s",
            op_worst.0, op_worst.1, model_worst.0, model_worst.1
        ),
    ))
}

fn logits_of(model: &Model<f32>, batch: &Batch) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let mut f = model.forward(&mut tape, Mode::Eval);
    let src = Padded::new(&batch.src)?;
    let len = batch.tgt.iter().map(Vec::len).max().unwrap_or(0);
    let input = Padded::shifted(&batch.tgt, len)?;
    let enc = f.encode(&src)?;
    let dec = f.decode(&input, &enc)?;
    Ok(tape.value(dec.logits).clone())
}

fn c2_baseline_equivalence(_: &mut Suite) -> Result<Verdict> {
    let start = Instant::now();
    let batch = random_batch(40, &[(7, 6), (3, 8), (9, 2)], 12);
    let mut worst = 0.0f64;
    for kind in [ShortcutKind::Lexical, ShortcutKind::SelfPlusDecToEnc] {
        let mut c = ModelConfig::toy(40);
        c.seed = 21;
        let baseline = Model::<f32>::new(c.clone())?;
        let mut shortcut = Model::<f32>::new(c.with_variant(kind))?;
        for (name, tensor) in baseline.params().iter() {
            *shortcut
                .params_mut()
                .get_mut(name)
                .context("shared parameter missing")? = tensor.clone();
        }
        let biases: Vec<String> = shortcut
            .params()
            .names()
            .iter()
            .filter(|n| n.ends_with(".sc.bk") || n.ends_with(".sc.bv"))
            .cloned()
            .collect();
        ensure!(!biases.is_empty(), "{kind} has no gate biases");
        for name in biases {
            shortcut.params_mut().get_mut(&name).unwrap().data_mut().fill(-1e4);
        }
        worst = worst.max(logits_of(&baseline, &batch)?.max_abs_diff(&logits_of(&shortcut, &batch)?));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        worst <= 1e-5 && secs < 10.0,
        format!("max |logit diff| {worst:.2e} over lexical and dec2enc+self; {secs:.2} s"),
    ))
}

fn convex<T: lexshort_core::Real>(seed: u64) -> Result<usize> {
    let mut rng = SeedStream::new(seed).rng();
    let n = 10_000;
    let mut r = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for i in 0..n {
        let scale = 10f64.powi(rng.gen_range(-3..4));
        r.push(match i % 10 {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen::<f64>(),
        });
        let x = rng.gen_range(-1.0..1.0) * scale;
        a.push(x);
        b.push(if i % 17 == 0 {
            x
        } else {
            rng.gen_range(-1.0..1.0) * scale
        });
    }
    let mk = |v: &[f64]| Tensor::<T>::new(vec![n], v.iter().map(|&x| T::of(x)).collect()).unwrap();
    let mut tape = Tape::<T>::new();
    let (rv, av, bv) = (tape.constant(mk(&r)), tape.constant(mk(&a)), tape.constant(mk(&b)));
    let out = fuse(&mut tape, rv, av, bv)?;
    let (o, a, b) = (tape.value(out).data(), tape.value(av).data(), tape.value(bv).data());
    Ok((0..n)
        .filter(|&i| !(a[i].min(b[i]) <= o[i] && o[i] <= a[i].max(b[i])))
        .count())
}

fn c3_gate_convexity(_: &mut Suite) -> Result<Verdict> {
    let bad32 = convex::<f32>(31)?;
    let bad64 = convex::<f64>(32)?;
    Ok(verdict(
        bad32 == 0 && bad64 == 0,
        format!("10^4 triples each in f32 and f64: {bad32} and {bad64} outside [min, max]"),
    ))
}

fn c4_schedule(_: &mut Suite) -> Result<Verdict> {
    let closed = 1.0 / (512f64.sqrt() * 4000f64.sqrt());
    let got = noam_lr(4000, 512, 4000)?;
    let err = (got - closed).abs();
    let rates: Vec<f64> = (1..=20_000)
        .map(|s| noam_lr(s, 512, 4000))
        .collect::<lexshort_core::Result<_>>()?;
    let up = (1..4000).all(|i| rates[i] > rates[i - 1]);
    let down = (4000..20_000).all(|i| rates[i] < rates[i - 1]);
    Ok(verdict(
        err <= 1e-12 && up && down,
        format!("|lr(4000) - closed form| = {err:.1e}; rises to step 4000: {up}; decays after: {down}"),
    ))
}

fn c5_copy_convergence(suite: &mut Suite) -> Result<Verdict> {
    let mut table = String::from("variant,seed,steps,stopped_early,valid_accuracy,test_accuracy,seconds\n");
    let mut all = true;
    let mut worst_acc = 1.0f64;
    let mut slowest = 0.0f64;
    for seed in SEEDS {
        let corpus = gen_corpus(&CorpusConfig {
            task: Task::Copy,
            seed,
            ..CorpusConfig::default()
        })?;
        let vocab = Vocabulary::build(corpus.all_lines());
        let test = Validator::new(&vocab, &corpus.test, DECODE_MAX_LEN, 64);
        for kind in [
            ShortcutKind::None,
            ShortcutKind::Lexical,
            ShortcutKind::LexicalFusion,
            ShortcutKind::NonLexical,
        ] {
            let mut mc = ModelConfig::toy(vocab.len()).with_variant(kind);
            mc.seed = seed;
            let mut model = Model::<f32>::new(mc)?;
            let mut train = TrainConfig::toy(kind);
            train.seed = seed;
            let opts = FitOptions {
                train,
                batch_tokens: BATCH_TOKENS,
                validation_sentences: 0,
                stop_at_accuracy: Some(0.995),
                decode_max_len: DECODE_MAX_LEN,
                out_dir: None,
                resume: false,
            };
            let start = Instant::now();
            let fitted = fit(&mut model, &vocab, &corpus, &opts)?;
            let secs = start.elapsed().as_secs_f64();
            let valid = fitted.validation.last().map_or(0.0, |s| s.accuracy);
            let acc = test.score(&model, &vocab, fitted.outcome.last_step)?.accuracy;
            let ok = acc >= 0.99 && fitted.outcome.last_step <= 3000 && secs < 900.0;
            all &= ok;
            worst_acc = worst_acc.min(acc);
            slowest = slowest.max(secs);
            eprintln!(
                "  copy {kind} seed {seed}: {} steps, test accuracy {acc:.4}, {secs:.0} s",
                fitted.outcome.last_step
            );
            writeln!(
                table,
                "{kind},{seed},{},{},{valid:.4},{acc:.4},{secs:.1}",
                fitted.outcome.last_step, fitted.outcome.stopped_early
            )?;
        }
    }
    fs::write(suite.out.join("copy_convergence.csv"), &table)?;
    Ok(verdict(
        all,
        format!("12 runs; lowest test sequence accuracy {worst_acc:.4}; slowest run {slowest:.0} s"),
    ))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn c6_lexicon_bleu(suite: &mut Suite) -> Result<Verdict> {
    let out = suite.out.clone();
    let runs = suite.lexicon_runs()?;
    let mut table = String::from("variant,seed,bleu,train_seconds\n");
    for r in runs {
        writeln!(table, "{},{},{:.4},{:.1}", r.kind, r.seed, r.bleu, r.train_secs)?;
    }
    fs::write(out.join("lexicon_bleu.csv"), &table)?;
    let m = |k: ShortcutKind| mean(runs.iter().filter(|r| r.kind == k).map(|r| r.bleu));
    let (none, lexical, fusion) = (
        m(ShortcutKind::None),
        m(ShortcutKind::Lexical),
        m(ShortcutKind::LexicalFusion),
    );
    Ok(verdict(
        fusion >= lexical && lexical >= none - 0.5,
        format!("mean beam-16 test BLEU over 3 seeds: fusion {fusion:.2}, lexical {lexical:.2}, none {none:.2}"),
    ))
}

fn c7_probes(suite: &mut Suite) -> Result<Verdict> {
    let out = suite.out.clone();
    suite.lexicon_runs()?;
    let cfg = ProbeConfig::default();
    let mut rows: Vec<(ShortcutKind, u64, Network, f64, f64)> = Vec::new();
    let mut table = String::from("variant,seed,network,layer0,top\n");
    let runs = suite.lexicon_runs.take().unwrap();
    for r in &runs {
        let data = suite.lexicon_data(r.seed)?;
        let pairs = &data.corpus.test[..500.min(data.corpus.test.len())];
        let sentences: Vec<DumpSentence> = pairs
            .iter()
            .map(|p| DumpSentence::from_pair(&data.vocab, p, Task::Lexicon))
            .collect();
        let freq = token_frequencies(&data.vocab, &data.corpus.train);
        let dump = dump_states(&r.model, &sentences, &freq, 64)?;
        let top = r.model.config().n_layers;
        for network in Network::BOTH {
            let l0 = train_probe(&dump, network, 0, &cfg)?.accuracy;
            let lt = train_probe(&dump, network, top, &cfg)?.accuracy;
            writeln!(table, "{},{},{},{l0:.4},{lt:.4}", r.kind, r.seed, network.as_str())?;
            eprintln!(
                "  probe {} seed {} {}: layer 0 {l0:.4}, top {lt:.4}",
                r.kind,
                r.seed,
                network.as_str()
            );
            rows.push((r.kind, r.seed, network, l0, lt));
        }
    }
    suite.lexicon_runs = Some(runs);
    fs::write(out.join("probe_accuracy.csv"), &table)?;
    let hard = rows.iter().all(|&(_, _, _, l0, lt)| l0 >= 0.99 && lt <= l0);
    let worst_l0 = rows.iter().map(|r| r.3).fold(1.0, f64::min);
    let top_of = |kind, seed, net| {
        rows.iter()
            .find(|r| r.0 == kind && r.1 == seed && r.2 == net)
            .map(|r| r.4)
    };
    let mut soft = String::new();
    for kind in [ShortcutKind::Lexical, ShortcutKind::LexicalFusion] {
        for network in Network::BOTH {
            let pairs: Vec<(Option<f64>, Option<f64>)> = SEEDS
                .iter()
                .map(|&s| (top_of(kind, s, network), top_of(ShortcutKind::None, s, network)))
                .collect();
            let wins = pairs.iter().filter(|(a, b)| a <= b).count();
            let ties = pairs.iter().filter(|(a, b)| a == b).count();
            let _ = write!(
                soft,
                "; {kind} {} top <= none in {wins}/3 seeds ({ties} ties)",
                network.as_str()
            );
        }
    }
    Ok(verdict(
        hard,
        format!(
            "lowest layer-0 accuracy {worst_l0:.4}; top <= layer 0 everywhere: {}{soft} (soft)",
            rows.iter().all(|r| r.4 <= r.3)
        ),
    ))
}

fn c8_beam(_: &mut Suite) -> Result<Verdict> {
    let corpus = gen_corpus(&CorpusConfig {
        task: Task::Copy,
        size: 1200,
        seed: 8,
        ..CorpusConfig::default()
    })?;
    let vocab = Vocabulary::build(corpus.all_lines());
    let mut mc = ModelConfig::toy(vocab.len());
    mc.seed = 8;
    let model = Model::<f32>::new(mc.with_variant(ShortcutKind::LexicalFusion))?;
    let srcs: Vec<Vec<usize>> = corpus.train[..100]
        .iter()
        .map(|p| encode_sentence(&vocab, &p.src))
        .collect();
    let opts = DecodeOptions::new(1, 20);
    let greedy_out = greedy(&model, &srcs, &opts)?;
    let mut mismatched = 0;
    for (src, g) in srcs.iter().zip(&greedy_out) {
        if beam_search(&model, src, &opts)?[0].tokens != g.tokens {
            mismatched += 1;
        }
    }

    let mut oracle_misses = 0;
    let cases = 20;
    for seed in 0..cases {
        let mut c = ModelConfig::toy(6);
        c.seed = 100 + seed;
        let model = Model::<f64>::new(c)?;
        let src = vec![4 + (seed as usize % 2), 5, EOS];
        let mut opts = DecodeOptions::new(16, 2);
        opts.banned = vec![PAD, BOS, EOS, UNK];
        let best = &beam_search(&model, &src, &opts)?[0];
        let candidates: Vec<Vec<usize>> = [4, 5].iter().flat_map(|&a| [4, 5].map(|b| vec![a, b])).collect();
        let batch = Batch::new(vec![src.clone(); candidates.len()], candidates.clone())?;
        let scores = model.sequence_log_probs(&batch)?;
        let argmax = (0..scores.len())
            .max_by(|&i, &j| scores[i].total_cmp(&scores[j]))
            .unwrap();
        if best.tokens != candidates[argmax] || (best.log_prob - scores[argmax]).abs() > 1e-9 {
            oracle_misses += 1;
        }
    }
    Ok(verdict(
        mismatched == 0 && oracle_misses == 0,
        format!("beam 1 vs greedy: {mismatched}/100 differ; beam 16 vs enumeration: {oracle_misses}/{cases} differ"),
    ))
}

fn c9_averaging(suite: &mut Suite) -> Result<Verdict> {
    let dir = suite.out.join("averaging");
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir)?;
    let mut c = ModelConfig::toy(20).with_variant(ShortcutKind::LexicalFusion);
    c.seed = 9;
    let model = Model::<f32>::new(c)?;
    let ckpt = Checkpoint::from_model(&model, 10, None);
    let copies: Vec<PathBuf> = (0..5).map(|i| dir.join(format!("copy{i}.ckpt"))).collect();
    for p in &copies {
        ckpt.save(p)?;
    }
    let bits = |m: &Model<f32>| -> Vec<u32> {
        m.params()
            .tensors()
            .iter()
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    let identical = bits(&average_checkpoints(&copies)?.model()?) == bits(&model);

    let filled = |v: f32| {
        let mut m = model.clone();
        for t in m.params_mut().tensors_mut() {
            t.data_mut().fill(v);
        }
        m
    };
    let pair = [dir.join("zeros.ckpt"), dir.join("twos.ckpt")];
    Checkpoint::from_model(&filled(0.0), 1, None).save(&pair[0])?;
    Checkpoint::from_model(&filled(2.0), 2, None).save(&pair[1])?;
    let ones = bits(&average_checkpoints(&pair)?.model()?) == bits(&filled(1.0));
    Ok(verdict(
        identical && ones,
        format!("5 identical copies average bit-exactly: {identical}; mean of 0s and 2s is exactly 1s: {ones}"),
    ))
}

fn c10_contrastive(suite: &mut Suite) -> Result<Verdict> {
    suite.lexicon_runs()?;
    let runs = suite.lexicon_runs.take().unwrap();
    let mut trained = Vec::new();
    let mut untrained = Vec::new();
    let mut chance = 0.5;
    for r in runs.iter().filter(|r| r.kind == ShortcutKind::LexicalFusion) {
        let data = suite.lexicon_data(r.seed)?;
        let records = contrastive_set(&data.corpus.test);
        let rep = contrastive_score(&r.model, &data.vocab, &records, ScoreNorm::Raw, 64)?;
        trained.push(rep.accuracy);
        let mut c = r.model.config().clone();
        c.seed = 1000 + r.seed;
        let fresh = Model::<f32>::new(c)?;
        let rep0 = contrastive_score(&fresh, &data.vocab, &records, ScoreNorm::Raw, 64)?;
        chance = rep0.chance;
        untrained.push(rep0.accuracy);
    }
    suite.lexicon_runs = Some(runs);
    let pass = trained.iter().all(|&a| a >= 0.95) && untrained.iter().all(|&a| (a - chance).abs() <= 0.1);
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(", ");
    Ok(verdict(
        pass,
        format!(
            "fusion trained [{}]; untrained [{}] vs chance {chance:.2}",
            fmt(&trained),
            fmt(&untrained)
        ),
    ))
}

fn c11_bleu(_: &mut Suite) -> Result<Verdict> {
    let corpus = gen_corpus(&CorpusConfig {
        task: Task::Lexicon,
        size: 600,
        seed: 11,
        ..CorpusConfig::default()
    })?;
    let lines: Vec<String> = corpus.train.iter().map(|p| p.tgt_line()).collect();
    let identity = corpus_bleu(&lines, &lines)?.score;

    let clipped = corpus_bleu(&["the the the cat sat on the mat"], &["the cat sat on the mat"])?.score;
    // Clipped n-gram precisions 6/8, 5/7, 4/6, 3/5; hypothesis longer than reference.
    let clipped_oracle = 100.0 * (6.0 / 8.0 * 5.0 / 7.0 * 4.0 / 6.0 * 3.0 / 5.0f64).powf(0.25);
    let short = corpus_bleu(&["the cat sat on"], &["the cat sat on the mat"])?.score;
    // All precisions 1; brevity penalty exp(1 - 6/4).
    let short_oracle = 100.0 * (-0.5f64).exp();
    let e1 = (clipped - clipped_oracle).abs();
    let e2 = (short - short_oracle).abs();
    Ok(verdict(
        (identity - 100.0).abs() <= 1e-9 && e1 <= 1e-6 && e2 <= 1e-6,
        format!("identity {identity:.6}; clipped fixture {clipped:.6} (err {e1:.1e}); brevity fixture {short:.6} (err {e2:.1e})"),
    ))
}

type Criterion = (u8, &'static str, fn(&mut Suite) -> Result<Verdict>);

const CRITERIA: [Criterion; 11] = [
    (1, "gradient integrity", c1_gradients),
    (2, "baseline equivalence", c2_baseline_equivalence),
    (3, "gate convexity", c3_gate_convexity),
    (4, "learning-rate schedule", c4_schedule),
    (5, "copy-task convergence", c5_copy_convergence),
    (6, "lexicon BLEU ordering", c6_lexicon_bleu),
    (7, "probing accuracy by layer", c7_probes),
    (8, "beam search correctness", c8_beam),
    (9, "checkpoint averaging", c9_averaging),
    (10, "contrastive sense accuracy", c10_contrastive),
    (11, "BLEU oracle", c11_bleu),
];

/// Cheap criteria first; 6, 7 and 10 share one set of trained models.
const ORDER: [u8; 11] = [3, 4, 11, 9, 2, 8, 1, 5, 6, 7, 10];

fn selection() -> Result<BTreeSet<u8>> {
    match std::env::var("LEXSHORT_ACCEPTANCE") {
        Ok(list) if !list.trim().is_empty() => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u8>()
                    .with_context(|| format!("bad criterion id {s:?}"))
            })
            .collect(),
        _ => Ok(CRITERIA.iter().map(|c| c.0).collect()),
    }
}

fn write_report(dir: &Path, outcomes: &[Outcome]) -> Result<()> {
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(outcomes)?)?;
    Ok(())
}

fn main() -> ExitCode {
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if let Err(e) = fs::create_dir_all(&out) {
        eprintln!("cannot create {}: {e}", out.display());
        return ExitCode::FAILURE;
    }
    let selected = match selection() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e:#}");
            return ExitCode::FAILURE;
        }
    };
    let mut suite = Suite {
        out: out.clone(),
        lexicon_data: Vec::new(),
        lexicon_runs: None,
    };
    let mut outcomes = Vec::new();
    for id in ORDER.iter().filter(|id| selected.contains(id)) {
        let (id, name, check) = CRITERIA[usize::from(*id) - 1];
        let start = Instant::now();
        let (pass, detail) = match check(&mut suite) {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        let seconds = start.elapsed().as_secs_f64();
        println!(
            "[{}] {id} {name}: {detail} ({seconds:.1} s)",
            if pass { "PASS" } else { "FAIL" }
        );
        outcomes.push(Outcome {
            id,
            name,
            pass,
            detail,
            seconds,
        });
    }
    outcomes.sort_by_key(|o| o.id);
    println!("\nsummary:");
    for o in &outcomes {
        println!("[{}] {} {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.name);
    }
    if let Err(e) = write_report(&out, &outcomes) {
        eprintln!("cannot write report: {e:#}");
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!(
        "{} passed, {failed} failed; tables in {}",
        outcomes.len() - failed,
        out.display()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
