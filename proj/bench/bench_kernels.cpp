// Serial reference vs OpenMP kernels. Usage: kbalign_bench [repeats]

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <random>
#include <set>
#include <vector>

#include "kbalign/kb.hpp"
#include "kbalign/kernels.hpp"
#include "kbalign/matcher.hpp"

using namespace kbalign;

namespace {

int repeats = 5;

double best_of(const std::function<void()>& f) {
  double best = 1e300;
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  return best;
}

void row(const char* name, const std::function<void()>& serial, const std::function<void()>& parallel) {
  const double s = best_of(serial), p = best_of(parallel);
  std::printf("%-28s %10.2f %10.2f %8.2fx\n", name, 1e3 * s, 1e3 * p, s / p);
}

std::vector<float> randn(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<float> g;
  std::vector<float> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc > 1) repeats = std::max(1, std::atoi(argv[1]));
  std::mt19937_64 rng(1);
  std::printf("threads %d, best of %d\n", omp_get_max_threads(), repeats);
  std::printf("%-28s %10s %10s %9s\n", "kernel", "serial ms", "omp ms", "speedup");

  {
    const std::size_t n = 2048, in = 256, out = 1024;
    auto x = randn(rng, n * in), w = randn(rng, out * in), b = randn(rng, out), dy = randn(rng, n * out);
    std::vector<float> y(n * out), dx(n * in), dw(out * in), db(out);
    ConstMatrixView<float> X{x.data(), n, in}, W{w.data(), out, in}, DY{dy.data(), n, out};
    MatrixView<float> Y{y.data(), n, out}, DX{dx.data(), n, in}, DW{dw.data(), out, in};
    row("linear_forward 2048x256x1024", [&] { kernels::serial::linear_forward<float>(X, W, b.data(), Y); },
        [&] { kernels::parallel::linear_forward<float>(X, W, b.data(), Y); });
    row("linear_backward", [&] { kernels::serial::linear_backward<float>(X, W, DY, DX, DW, db.data()); },
        [&] { kernels::parallel::linear_backward<float>(X, W, DY, DX, DW, db.data()); });
  }
  {
    const std::size_t rows = 500000, d = 300;
    auto t = randn(rng, rows * d), q = randn(rng, d);
    std::vector<float> out(rows);
    ConstMatrixView<float> T{t.data(), rows, d};
    row("squared_distances 500k x 300", [&] { kernels::serial::squared_distances<float>(T, q, out); },
        [&] { kernels::parallel::squared_distances<float>(T, q, out); });
    row("cosine_distances 500k x 300", [&] { kernels::serial::cosine_distances<float>(T, q, out); },
        [&] { kernels::parallel::cosine_distances<float>(T, q, out); });
  }
  {
    std::uniform_int_distribution<TokenId> tok(2, 59999);
    std::uniform_int_distribution<std::size_t> len(1, 4);
    std::vector<KnowledgeEntry> entries;
    std::set<std::vector<TokenId>> seen;
    while (entries.size() < 500000) {
      KnowledgeEntry e;
      for (std::size_t k = len(rng); k > 0; --k) e.key.push_back(tok(rng));
      if (!seen.insert(e.key).second) continue;
      e.surface = "e";
      e.vector = {0.0f};
      entries.push_back(std::move(e));
    }
    const auto index = KnowledgeIndex::from_keyed(entries, 1, 0, {});
    std::vector<TokenSequence> corpus(40000);
    std::bernoulli_distribution copy(0.3);
    std::uniform_int_distribution<std::size_t> pick(0, entries.size() - 1);
    for (auto& s : corpus) {
      while (s.ids.size() < 25) {
        if (copy(rng)) {
          for (TokenId t : entries[pick(rng)].key) s.ids.push_back(t);
        } else {
          s.ids.push_back(tok(rng));
        }
      }
    }
    row("match_corpus 1M tokens", [&] { (void)serial::match_corpus(corpus, index); },
        [&] { (void)parallel::match_corpus(corpus, index); });
  }
}
