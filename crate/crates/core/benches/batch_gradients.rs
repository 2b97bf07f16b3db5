use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use multiattn::combination::{CombinationConfig, Strategy};
use multiattn::exec::Execution;
use multiattn::model::{ModelConfig, MultiSourceModel, SourceKind};
use multiattn::recurrent::DecoderKind;
use multiattn::tasks::{gen_masked_copy, masked_copy_vocab, MaskedCopyParams};

fn batch_gradients(c: &mut Criterion) {
    let params = MaskedCopyParams { n: 32, ..Default::default() };
    let vocab = masked_copy_vocab(params.vocab_size, params.max_len);
    let data = gen_masked_copy(1, &params).unwrap();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for strategy in [Strategy::Concat, Strategy::Flat, Strategy::Hierarchical] {
        let config = ModelConfig::new(
            vec![SourceKind::Text, SourceKind::Text],
            CombinationConfig::new(strategy, false, false),
            DecoderKind::Cgru,
        );
        let model = MultiSourceModel::new(config, vocab.clone(), 1).unwrap();
        let batch: Vec<_> = data.iter().map(|e| model.encode_example(e).unwrap()).collect();
        for (name, mode) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
            group.bench_with_input(BenchmarkId::new(name, strategy.name()), &mode, |b, &mode| {
                b.iter(|| model.batch_gradients_with(&batch, mode).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, batch_gradients);
criterion_main!(benches);
