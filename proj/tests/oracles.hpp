// Slow reference implementations used by unit and acceptance tests.
#pragma once

#include "ranwatch/detect.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <vector>

namespace ranwatch::testing {

/// Generalized ESD by full recomputation at every step: O(n^2 k).
inline std::set<std::size_t> naive_esd(const std::vector<double>& x, double alpha, std::size_t k_max, bool robust) {
  const std::size_t n = x.size();
  std::vector<std::size_t> alive(n);
  for (std::size_t i = 0; i < n; ++i) alive[i] = i;

  auto median_of = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size();
    return m % 2 == 1 ? v[m / 2] : (v[m / 2 - 1] + v[m / 2]) / 2.0;
  };

  std::vector<std::size_t> removed;
  std::size_t j = 0;
  for (std::size_t i = 1; i <= k_max; ++i) {
    std::vector<double> v;
    for (auto idx : alive) v.push_back(x[idx]);
    double center = 0.0, spread = 0.0;
    bool done = false;
    if (robust) {
      center = median_of(v);
      std::vector<double> dev;
      for (double a : v) dev.push_back(std::abs(a - center));
      spread = 1.4826 * median_of(dev);
      done = spread > 0.0;
    }
    if (!done) {
      double sum = 0.0;
      for (double a : v) sum += a;
      center = sum / static_cast<double>(v.size());
      double ss = 0.0;
      for (double a : v) ss += (a - center) * (a - center);
      spread = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t p = 0; p < alive.size(); ++p) {
      const double d = std::abs(x[alive[p]] - center);
      if (d > best) {
        best = d;
        arg = p;
      }
    }
    const double r = spread > 0.0 ? best / spread : 0.0;
    removed.push_back(alive[arg]);
    alive.erase(alive.begin() + static_cast<std::ptrdiff_t>(arg));

    const double cnt = static_cast<double>(n - i + 1);
    const double df = static_cast<double>(n - i - 1);
    const double t = detect::t_quantile(1.0 - alpha / (2.0 * cnt), df);
    const double lambda = static_cast<double>(n - i) * t / std::sqrt((df + t * t) * cnt);
    if (r > lambda) j = i;
  }
  return {removed.begin(), removed.begin() + static_cast<std::ptrdiff_t>(j)};
}

/// Seeded test series of length n. The seed picks one of four shapes:
/// Gaussian, Gaussian with a few large outliers, heavy-tailed, and coarsely
/// quantized data with many repeated values (which exercises tie-breaking
/// and zero MAD).
inline std::vector<double> esd_test_series(std::uint64_t seed, std::size_t n) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<double> x(n);
  switch (seed % 4) {
    case 0:
      for (auto& v : x) v = n01(rng);
      break;
    case 1: {
      for (auto& v : x) v = n01(rng);
      std::uniform_int_distribution<int> count(1, 8);
      std::uniform_real_distribution<double> mag(3.0, 15.0);
      for (int c = count(rng); c > 0; --c) x[pick(rng)] += (rng() % 2 ? 1.0 : -1.0) * mag(rng);
      break;
    }
    case 2: {
      std::student_t_distribution<double> t3(3.0);
      for (auto& v : x) v = t3(rng);
      break;
    }
    default: {
      std::bernoulli_distribution zero(0.6);
      for (auto& v : x) v = zero(rng) ? 0.0 : std::round(2.0 * n01(rng)) / 2.0;
      x[pick(rng)] = 9.0;
      x[pick(rng)] = 9.0;
      break;
    }
  }
  return x;
}

inline std::set<std::size_t> flagged(const std::vector<bool>& flags) {
  std::set<std::size_t> out;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    if (flags[i]) out.insert(i);
  }
  return out;
}

}  // namespace ranwatch::testing
