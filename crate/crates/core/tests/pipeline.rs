//! End-to-end paths through the library: generation, training, checkpoints,
//! averaging and contrastive scoring.

use lexshort_core::data::corpus::ContrastiveRecord;
use lexshort_core::data::{encode_pairs, gen_corpus, BatchStream, CorpusConfig, Task, Vocabulary};
use lexshort_core::eval::{contrastive_score, ScoreNorm};
use lexshort_core::model::Checkpoint;
use lexshort_core::train::{average_last, list_checkpoints, TrainConfig, Trainer};
use lexshort_core::{Batch, Model, ModelConfig, ShortcutKind};

fn tiny(vocab: usize, kind: ShortcutKind) -> ModelConfig {
    let mut c = ModelConfig::toy(vocab).with_variant(kind);
    c.n_layers = 1;
    c.d_model = 16;
    c.head_count = 2;
    c.d_ff = 32;
    c.dropout_rate = 0.0;
    c
}

fn short_run(steps: u64) -> TrainConfig {
    TrainConfig {
        warmup_steps: 10,
        total_steps: steps,
        checkpoint_every: 10,
        validate_every: 0,
        lr_scale: 2.0,
        ..TrainConfig::default()
    }
}

#[test]
fn memorizing_one_record_ranks_its_correct_sense_first() {
    let vocab = Vocabulary::build(["a b", "x_1 y", "x_2 y"]);
    let record = ContrastiveRecord {
        source: "a b".into(),
        correct: "x_1 y".into(),
        incorrect: vec!["x_2 y".into()],
    };
    let mut src = vocab.encode("a b");
    src.push(lexshort_core::data::EOS);
    let mut tgt = vocab.encode("x_1 y");
    tgt.push(lexshort_core::data::EOS);
    let mut model = Model::<f32>::new(tiny(vocab.len(), ShortcutKind::LexicalFusion)).unwrap();
    let before = contrastive_score(&model, &vocab, std::slice::from_ref(&record), ScoreNorm::Raw, 8).unwrap();
    assert_eq!(before.total, 1);
    let batches = std::iter::repeat_with(|| Batch::new(vec![src.clone()], vec![tgt.clone()]));
    Trainer::new(short_run(60)).run(&mut model, batches).unwrap();
    let after = contrastive_score(&model, &vocab, &[record], ScoreNorm::Raw, 8).unwrap();
    assert_eq!(after.accuracy, 1.0);
}

#[test]
fn training_writes_checkpoints_that_average_and_reload() {
    let corpus = gen_corpus(&CorpusConfig {
        task: Task::Copy,
        size: 200,
        ..CorpusConfig::default()
    })
    .unwrap();
    let vocab = Vocabulary::build(corpus.all_lines());
    let dir = tempfile::tempdir().unwrap();
    let mut model = Model::<f32>::new(tiny(vocab.len(), ShortcutKind::Lexical)).unwrap();
    let stream = BatchStream::new(encode_pairs(&vocab, &corpus.train), 200, 3).unwrap();
    let outcome = Trainer::new(short_run(40))
        .output(dir.path())
        .vocab(&vocab)
        .run(&mut model, stream)
        .unwrap();
    assert_eq!(outcome.last_step, 40);
    let first = outcome.metrics.first().unwrap().loss;
    let last = outcome.metrics.last().unwrap().loss;
    assert!(last < first, "loss {first} -> {last}");

    let found = list_checkpoints(dir.path()).unwrap();
    assert_eq!(
        found.iter().map(|(s, _)| *s).collect::<Vec<_>>(),
        vec![0, 10, 20, 30, 40]
    );
    let newest = Checkpoint::load(&found[4].1).unwrap();
    assert_eq!(newest.model().unwrap().params().checksum(), model.params().checksum());
    assert_eq!(newest.manifest.vocab.as_ref(), Some(&vocab));

    let a = Checkpoint::load(&found[3].1).unwrap().model().unwrap();
    let b = newest.model().unwrap();
    let avg = average_last(dir.path(), 2).unwrap().model().unwrap();
    for ((x, y), m) in a
        .params()
        .tensors()
        .iter()
        .zip(b.params().tensors())
        .zip(avg.params().tensors())
    {
        for ((&x, &y), &m) in x.data().iter().zip(y.data()).zip(m.data()) {
            let mid = (f64::from(x) + f64::from(y)) / 2.0;
            assert!((f64::from(m) - mid).abs() <= 1e-6 * mid.abs().max(1.0));
        }
    }
}
