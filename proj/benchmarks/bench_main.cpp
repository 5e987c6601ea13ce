#include <benchmark/benchmark.h>

#include "cozinb/distributions.hpp"
#include "cozinb/eval.hpp"
#include "cozinb/generative.hpp"
#include "cozinb/inference.hpp"
#include "cozinb/kernel_net.hpp"
#include "cozinb/special.hpp"

using namespace cozinb;

namespace {

HyperParams bench_hp(int K) {
    HyperParams hp;
    hp.K = K;
    hp.d_h = 8;
    hp.d_l = 8;
    hp.encoder_hidden = {64};
    hp.decoder_hidden = {32};
    return hp;
}

SyntheticCorpus bench_corpus(int J, int M) {
    SynthConfig sc;
    sc.J = J;
    sc.M = M;
    sc.hp = bench_hp(10);
    sc.seed = 1;
    sc.planted = PlantedConfig{};
    return sample_corpus(sc);
}

}  // namespace

static void BM_Digamma(benchmark::State& state) {
    double x = 0.01;
    for (auto _ : state) {
        benchmark::DoNotOptimize(special::digamma(x));
        x = x < 100.0 ? x * 1.01 : 0.01;
    }
}
BENCHMARK(BM_Digamma);

static void BM_CrtMean(benchmark::State& state) {
    const auto n = static_cast<std::uint64_t>(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(crt_mean(n, 0.7));
}
BENCHMARK(BM_CrtMean)->Arg(10)->Arg(1000);

static void BM_CrtSample(benchmark::State& state) {
    Rng rng(3);
    const auto n = static_cast<std::uint64_t>(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(crt_sample(n, 0.7, rng));
}
BENCHMARK(BM_CrtSample)->Arg(10)->Arg(1000);

static void BM_EncoderForwardBackward(benchmark::State& state) {
    const SyntheticCorpus syn = bench_corpus(50, static_cast<int>(state.range(0)));
    const HyperParams hp = bench_hp(10);
    Rng rng(2);
    const MlpWeights w = MlpWeights::init(MlpSpec::make(static_cast<int>(syn.corpus.counts.cols()), hp.encoder_hidden, hp.d_h, hp.activation), rng);
    MlpGrads g = MlpGrads::zeros_like(w);
    const Vector up = Vector::Ones(hp.d_h);
    std::size_t j = 0;
    for (auto _ : state) {
        MlpCache cache;
        benchmark::DoNotOptimize(encode(w, syn.corpus.counts.row(j), &cache));
        mlp_backward(w, cache, up, g);
        j = (j + 1) % syn.corpus.counts.rows();
    }
}
BENCHMARK(BM_EncoderForwardBackward)->Arg(200)->Arg(2000);

static void BM_UpdateLocal(benchmark::State& state) {
    const int K = static_cast<int>(state.range(0));
    const SyntheticCorpus syn = bench_corpus(100, 200);
    const HyperParams hp = bench_hp(K);
    const GlobalState g = init_global(hp, 200, 4);
    const GlobalExpectations e = GlobalExpectations::compute(g);
    const InferenceOptions opts;
    std::size_t j = 0;
    for (auto _ : state) {
        LocalState s;
        update_local(syn.corpus.counts.row(j), g, e, hp, opts, LocalSettings{}, s);
        benchmark::DoNotOptimize(s.nu.data());
        j = (j + 1) % syn.corpus.counts.rows();
    }
}
BENCHMARK(BM_UpdateLocal)->Arg(10)->Arg(50);

static void BM_FitEpoch(benchmark::State& state) {
    const SyntheticCorpus syn = bench_corpus(200, 200);
    FitSettings st;
    st.hp = bench_hp(20);
    st.schedule.max_epochs = 1;
    st.schedule.batch_size = 50;
    st.opts.threads = static_cast<int>(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(fit(syn.corpus.counts, st).trace.size());
}
BENCHMARK(BM_FitEpoch)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

static void BM_HeldoutPerplexity(benchmark::State& state) {
    const SyntheticCorpus syn = bench_corpus(200, 200);
    const HyperParams hp = bench_hp(20);
    const GlobalState g = init_global(hp, 200, 5);
    const HeldoutSplit split = split_heldout(syn.corpus.counts, 0.5, 6, 0.5);
    for (auto _ : state) {
        benchmark::DoNotOptimize(heldout_perplexity(split.test_observed, split.test_target, g, hp, InferenceOptions{},
                                                    LocalSettings{}));
    }
}
BENCHMARK(BM_HeldoutPerplexity)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
