use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rulesmith_bench::{ruleset, text, vocabulary};
use rulesmith_core::RuleIndex;

fn matching(c: &mut Criterion) {
    let vocab = vocabulary(3000);
    let input = text(1000, &vocab, 1);
    let mut group = c.benchmark_group("find_matches_1000_tokens");
    group.throughput(Throughput::Elements(1000));
    for n in [100, 1_000, 10_000] {
        let index = RuleIndex::build(&ruleset(n, &vocab, 2)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &index, |b, index| {
            b.iter(|| index.match_text(std::hint::black_box(&input)))
        });
    }
    group.finish();
}

fn build(c: &mut Criterion) {
    let vocab = vocabulary(3000);
    let rules = ruleset(10_000, &vocab, 3);
    c.bench_function("build_index_10000_rules", |b| b.iter(|| RuleIndex::build(std::hint::black_box(&rules)).unwrap()));
}

criterion_group!(benches, matching, build);
criterion_main!(benches);
