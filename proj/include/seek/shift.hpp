#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "seek/model.hpp"
#include "seek/tensor.hpp"

namespace seek {

// pre: added to y_l before the non-linearity. post: added to z_l after it.
enum class Side : std::uint8_t { Pre, Post };

struct ShiftKey {
  LayerId layer;
  Side side;
  friend auto operator<=>(const ShiftKey&, const ShiftKey&) = default;
};

// Shift on one boundary: a uniform offset, an optional dense vector and sorted
// sparse entries. The effective shift of element i is (uniform + dense[i]) + sparse[i].
class BoundaryShift {
 public:
  double uniform() const noexcept { return uniform_; }
  const std::vector<double>& dense() const noexcept { return dense_; }
  const std::vector<std::pair<std::size_t, double>>& sparse() const noexcept { return sparse_; }

  void add_uniform(double v) { uniform_ += v; }

  void add_dense(std::span<const double> v) {
    if (dense_.empty()) {
      dense_.assign(v.begin(), v.end());
      return;
    }
    if (dense_.size() != v.size()) {
      throw StructuralError("dense shift length " + std::to_string(v.size()) + " vs " +
                            std::to_string(dense_.size()));
    }
    for (std::size_t i = 0; i < v.size(); ++i) dense_[i] += v[i];
  }

  void add_at(std::size_t index, double v) {
    auto it = std::lower_bound(sparse_.begin(), sparse_.end(), index,
                               [](const auto& e, std::size_t i) { return e.first < i; });
    if (it != sparse_.end() && it->first == index) {
      it->second += v;
    } else {
      sparse_.insert(it, {index, v});
    }
  }

  BoundaryShift& operator+=(const BoundaryShift& other) {
    uniform_ += other.uniform_;
    if (!other.dense_.empty()) add_dense(other.dense_);
    for (const auto& [i, v] : other.sparse_) add_at(i, v);
    return *this;
  }

  // True when every entry lies inside a boundary of n elements.
  bool fits(std::size_t n) const {
    if (!dense_.empty() && dense_.size() != n) return false;
    return sparse_.empty() || sparse_.back().first < n;
  }

  std::vector<double> materialize(std::size_t n) const {
    if (!fits(n)) throw StructuralError("shift does not fit a boundary of size " + std::to_string(n));
    std::vector<double> out(n, uniform_);
    if (!dense_.empty()) {
      for (std::size_t i = 0; i < n; ++i) out[i] += dense_[i];
    }
    for (const auto& [i, v] : sparse_) out[i] += v;
    return out;
  }

  void apply(std::span<double> values) const {
    if (!fits(values.size())) {
      throw StructuralError("shift does not fit a boundary of size " + std::to_string(values.size()));
    }
    if (dense_.empty() && sparse_.empty()) {
      for (double& v : values) v += uniform_;
      return;
    }
    const std::vector<double> total = materialize(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] += total[i];
  }

  friend bool operator==(const BoundaryShift&, const BoundaryShift&) = default;

 private:
  double uniform_ = 0.0;
  std::vector<double> dense_;
  std::vector<std::pair<std::size_t, double>> sparse_;
};

// The adversary's control surface: shifts keyed by (non-linear layer, side).
// An absent key means a zero shift.
class ShiftSet {
 public:
  ShiftSet& add_uniform(LayerId layer, Side side, double v) {
    entries_[{layer, side}].add_uniform(v);
    return *this;
  }
  ShiftSet& add_dense(LayerId layer, Side side, std::span<const double> v) {
    entries_[{layer, side}].add_dense(v);
    return *this;
  }
  ShiftSet& add_at(LayerId layer, Side side, std::size_t index, double v) {
    entries_[{layer, side}].add_at(index, v);
    return *this;
  }
  ShiftSet& add_at(LayerId layer, Side side, std::span<const std::size_t> indices, double v) {
    BoundaryShift& b = entries_[{layer, side}];
    for (std::size_t i : indices) b.add_at(i, v);
    return *this;
  }

  ShiftSet& operator+=(const ShiftSet& other) {
    for (const auto& [key, shift] : other.entries_) entries_[key] += shift;
    return *this;
  }
  friend ShiftSet operator+(ShiftSet a, const ShiftSet& b) { return a += b; }

  bool empty() const noexcept { return entries_.empty(); }
  const std::map<ShiftKey, BoundaryShift>& entries() const noexcept { return entries_; }

  const BoundaryShift* find(LayerId layer, Side side) const {
    auto it = entries_.find({layer, side});
    return it == entries_.end() ? nullptr : &it->second;
  }

  std::vector<double> materialize(LayerId layer, Side side, std::size_t n) const {
    const BoundaryShift* b = find(layer, side);
    return b ? b->materialize(n) : std::vector<double>(n, 0.0);
  }

  // Rejects keys on non-malleable boundaries and entries that overrun their tensor.
  void validate(const ModelGraph& model) const {
    for (const auto& [key, shift] : entries_) {
      const auto n = model.boundary_size(key.layer, key.side == Side::Post);
      if (!n) {
        throw StructuralError("shift targets layer " + std::to_string(key.layer) + (key.side == Side::Post ? " post" : " pre") +
                              "-side, which is not a malleable boundary");
      }
      if (!shift.fits(*n)) {
        throw StructuralError("shift on layer " + std::to_string(key.layer) + " does not fit its size " +
                              std::to_string(*n));
      }
    }
  }

  friend bool operator==(const ShiftSet&, const ShiftSet&) = default;

 private:
  std::map<ShiftKey, BoundaryShift> entries_;
};

struct QueryInput {
  Tensor x0;
  ShiftSet shifts;
};

inline QueryInput with_shifts(QueryInput q, const ShiftSet& extra) {
  q.shifts += extra;
  return q;
}

}  // namespace seek
