/* Copyright 2026 The ElasticEP Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

namespace elasticep {

using BigInt = boost::multiprecision::cpp_int;
using Rational = boost::multiprecision::cpp_rational;

/// C(n, k), zero when k < 0, k > n or n < 0.
inline BigInt binomial(long n, long k) {
  if (n < 0 || k < 0 || k > n) return 0;
  k = std::min(k, n - k);
  BigInt r = 1;
  for (long i = 1; i <= k; ++i) {
    r *= (n - k + i);
    r /= i;
  }
  return r;
}

/// Visits every k-subset of {0..n-1} in lexicographic order. The callback
/// receives the current subset as a sorted vector and may return false to stop.
template <typename Fn>
void for_each_combination(int n, int k, Fn&& fn) {
  if (k < 0 || k > n) return;
  std::vector<int> idx(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) idx[static_cast<std::size_t>(i)] = i;
  while (true) {
    if (!fn(static_cast<const std::vector<int>&>(idx))) return;
    int i = k - 1;
    while (i >= 0 && idx[static_cast<std::size_t>(i)] == n - k + i) --i;
    if (i < 0) return;
    ++idx[static_cast<std::size_t>(i)];
    for (int j = i + 1; j < k; ++j) idx[static_cast<std::size_t>(j)] = idx[static_cast<std::size_t>(j - 1)] + 1;
  }
}

/// Exact probability with a floating point view for reporting.
struct Probability {
  Rational value{0};

  Probability() = default;
  explicit Probability(Rational v) : value(std::move(v)) {}
  Probability(const BigInt& num, const BigInt& den) : value(num, den) {}

  BigInt numerator() const { return boost::multiprecision::numerator(value); }
  BigInt denominator() const { return boost::multiprecision::denominator(value); }
  double real() const { return value.convert_to<double>(); }
  std::string str() const { return numerator().str() + "/" + denominator().str(); }

  friend bool operator==(const Probability& a, const Probability& b) { return a.value == b.value; }
  friend bool operator<(const Probability& a, const Probability& b) { return a.value < b.value; }
  friend bool operator<=(const Probability& a, const Probability& b) { return a.value <= b.value; }
  friend bool operator>=(const Probability& a, const Probability& b) { return a.value >= b.value; }
};

}  // namespace elasticep
