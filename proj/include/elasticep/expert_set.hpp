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

#include <bit>
#include <cstdint>
#include <vector>

namespace elasticep {

/// Dense set of expert ids backed by 64-bit words.
class ExpertSet {
 public:
  ExpertSet() = default;
  explicit ExpertSet(int n_experts) : n_(n_experts), words_((static_cast<std::size_t>(n_experts) + 63) / 64, 0) {}

  int universe() const { return n_; }

  void insert(int e) { words_[static_cast<std::size_t>(e) >> 6] |= bit(e); }
  void erase(int e) { words_[static_cast<std::size_t>(e) >> 6] &= ~bit(e); }
  bool contains(int e) const { return (words_[static_cast<std::size_t>(e) >> 6] & bit(e)) != 0; }

  ExpertSet& operator|=(const ExpertSet& o) {
    for (std::size_t i = 0; i < words_.size(); ++i) words_[i] |= o.words_[i];
    return *this;
  }

  int size() const {
    int s = 0;
    for (auto w : words_) s += std::popcount(w);
    return s;
  }

  bool full() const { return size() == n_; }

  bool includes(const ExpertSet& sub) const {
    for (std::size_t i = 0; i < words_.size(); ++i)
      if ((sub.words_[i] & ~words_[i]) != 0) return false;
    return true;
  }

  /// |this \ other|
  int count_missing_from(const ExpertSet& other) const {
    int s = 0;
    for (std::size_t i = 0; i < words_.size(); ++i) s += std::popcount(words_[i] & ~other.words_[i]);
    return s;
  }

  std::vector<int> elements() const {
    std::vector<int> out;
    for (int e = 0; e < n_; ++e)
      if (contains(e)) out.push_back(e);
    return out;
  }

  bool operator==(const ExpertSet&) const = default;
  auto operator<=>(const ExpertSet&) const = default;

 private:
  static std::uint64_t bit(int e) { return std::uint64_t{1} << (static_cast<unsigned>(e) & 63u); }

  int n_ = 0;
  std::vector<std::uint64_t> words_;
};

}  // namespace elasticep
