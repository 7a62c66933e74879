// Parallel kernels against their serial references, plus a whole-model
// forward pass. Run with --benchmark_filter=... to pick one.
#include <benchmark/benchmark.h>

#include <vector>

#include "tap/kernels.hpp"
#include "tap/model.hpp"

namespace k = tap::kernels;

namespace {

std::vector<float> noise(std::size_t n, std::uint64_t seed) {
  tap::Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  return v;
}

// Range 0: 0 = reference, 1 = parallel.
template <class Ref, class Par>
void dispatch(benchmark::State& state, Ref ref, Par par) {
  const bool parallel = state.range(0) == 1;
  state.SetLabel(parallel ? "parallel" : "reference");
  for (auto _ : state) {
    if (parallel) {
      par();
    } else {
      ref();
    }
    benchmark::ClobberMemory();
  }
}

void BM_Gemm(benchmark::State& state) {
  const int n = 256;
  const auto a = noise(n * n, 1), b = noise(n * n, 2);
  std::vector<float> c(n * n);
  dispatch(
      state, [&] { k::reference::gemm(false, false, n, n, n, 1.f, a.data(), n, b.data(), n, 0.f, c.data(), n); },
      [&] { k::gemm(false, false, n, n, n, 1.f, a.data(), n, b.data(), n, 0.f, c.data(), n); });
  state.SetItemsProcessed(state.iterations() * 2LL * n * n * n);
}

k::ConvGeometry conv_geometry() {
  k::ConvGeometry g;
  g.in_channels = 16;
  g.out_channels = 16;
  g.kernel = 3;
  g.pad = 1;
  g.batch = 32;
  g.in_height = 24;
  g.in_width = 14;
  return g;
}

void BM_ConvForward(benchmark::State& state) {
  const auto g = conv_geometry();
  const auto x = noise(static_cast<std::size_t>(g.input_size()), 3);
  const auto w = noise(static_cast<std::size_t>(g.weight_size()), 4);
  std::vector<float> y(static_cast<std::size_t>(g.output_size()));
  dispatch(state, [&] { k::reference::conv2d_forward(g, x, w, y); }, [&] { k::conv2d_forward(g, x, w, y); });
}

void BM_ConvBackwardWeight(benchmark::State& state) {
  const auto g = conv_geometry();
  const auto x = noise(static_cast<std::size_t>(g.input_size()), 5);
  const auto dy = noise(static_cast<std::size_t>(g.output_size()), 6);
  std::vector<float> dw(static_cast<std::size_t>(g.weight_size()));
  dispatch(
      state, [&] { k::reference::conv2d_backward_weight(g, x, dy, dw); },
      [&] { k::conv2d_backward_weight(g, x, dy, dw); });
}

void BM_MaxPool(benchmark::State& state) {
  k::PoolGeometry g;
  g.channels = 16;
  g.batch = 32;
  g.in_height = 24;
  g.in_width = 14;
  const auto x = noise(static_cast<std::size_t>(g.planes() * g.in_height * g.in_width), 7);
  std::vector<float> y(static_cast<std::size_t>(g.output_size()));
  std::vector<std::int32_t> arg(y.size());
  dispatch(
      state, [&] { k::reference::maxpool_forward(g, x, y, arg); }, [&] { k::maxpool_forward(g, x, y, arg); });
}

void BM_InputPool(benchmark::State& state) {
  const int h = tap::model::kInputHeight, w = tap::model::kInputWidth, f = 20;
  const auto image = noise(static_cast<std::size_t>(h) * w * 4, 8);
  std::vector<float> out(static_cast<std::size_t>(4) * (h / f) * (w / f));
  dispatch(
      state, [&] { k::reference::pool_interleaved_to_cnhw(image, h, w, 4, f, 1, 0, out); },
      [&] { k::pool_interleaved_to_cnhw(image, h, w, 4, f, 1, 0, out); });
}

void BM_SquaredDistances(benchmark::State& state) {
  const int rows = 4000, dim = 512;
  const auto m = noise(static_cast<std::size_t>(rows) * dim, 9);
  const auto q = noise(dim, 10);
  std::vector<double> out(rows);
  dispatch(
      state, [&] { k::reference::squared_distances(m, rows, dim, q, out); },
      [&] { k::squared_distances(m, rows, dim, q, out); });
}

void BM_ModelPredict(benchmark::State& state) {
  const tap::model::Classifier model(tap::nn::ArchConfig::desk(), 1);
  tap::RgbImage image(1080, 1920);
  for (std::size_t i = 0; i < image.pixels.size(); ++i) image.pixels[i] = static_cast<std::uint8_t>(i * 31 % 251);
  const auto input = tap::model::encode_input(image, {100, 200, 600, 400});
  for (auto _ : state) benchmark::DoNotOptimize(model.predict(input));
}

}  // namespace

BENCHMARK(BM_Gemm)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvForward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvBackwardWeight)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_MaxPool)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_InputPool)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_SquaredDistances)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ModelPredict)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
