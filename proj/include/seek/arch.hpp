#pragma once

// Architecture strings: tokens joined by '-'
//   conv{c}x{kh}x{kw}   stride-1 same-padded convolution with c output channels
//   fc{n}               fully-connected layer with n outputs
//   r                   ReLU
//   mpr{p} | mpr{p}s{s} p x p max-pool (stride s, default p) followed by ReLU
//   res{...}            residual block: the enclosed tokens form one branch and
//                       the block input is the identity skip; both meet in an Add
// The final token must be an fc layer; an Argmax is appended after it.
// Example: conv8x3x3-r-res{conv8x3x3-r-conv8x3x3}-r-fc16-r-fc4

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "seek/model.hpp"

namespace seek {

inline Shape parse_shape(std::string_view text) {
  Shape shape;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = std::min(text.find('x', start), text.size());
    const std::string part(text.substr(start, end - start));
    if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos) {
      throw StructuralError("invalid shape '" + std::string(text) + "'");
    }
    shape.push_back(std::stoul(part));
    if (shape.back() == 0) throw StructuralError("invalid shape '" + std::string(text) + "'");
    start = end + 1;
  }
  return shape;
}

namespace detail {

inline std::vector<std::string> split_arch(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  int depth = 0;
  for (char ch : text) {
    if (ch == '{') ++depth;
    if (ch == '}') {
      if (--depth < 0) throw StructuralError("unbalanced braces in architecture '" + std::string(text) + "'");
    }
    if (ch == '-' && depth == 0) {
      tokens.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (depth != 0) throw StructuralError("unbalanced braces in architecture '" + std::string(text) + "'");
  tokens.push_back(cur);
  for (const std::string& t : tokens) {
    if (t.empty()) throw StructuralError("empty token in architecture '" + std::string(text) + "'");
  }
  return tokens;
}

inline std::optional<std::vector<std::size_t>> match_numbers(const std::string& token, std::string_view prefix,
                                                            char sep, std::size_t count_min,
                                                            std::size_t count_max) {
  if (token.rfind(prefix, 0) != 0) return std::nullopt;
  std::vector<std::size_t> nums;
  std::string rest = token.substr(prefix.size());
  std::size_t start = 0;
  while (start <= rest.size()) {
    const std::size_t end = std::min(rest.find(sep, start), rest.size());
    const std::string part = rest.substr(start, end - start);
    if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos) return std::nullopt;
    nums.push_back(std::stoul(part));
    start = end + 1;
  }
  if (nums.size() < count_min || nums.size() > count_max) return std::nullopt;
  for (std::size_t n : nums) {
    if (n == 0) return std::nullopt;
  }
  return nums;
}

class ArchBuilder {
 public:
  ArchBuilder(const Shape& input_shape, std::mt19937_64* rng) : rng_(rng) {
    LayerSpec in;
    in.id = next_id_++;
    in.kind = LayerKind::Input;
    in.params = InputParams{input_shape};
    shapes_[in.id] = input_shape;
    layers_.push_back(std::move(in));
    current_ = 0;
  }

  void run(const std::vector<std::string>& tokens) {
    for (const std::string& t : tokens) emit(t);
  }

  ModelGraph finish() {
    if (layers_.back().kind != LayerKind::FullyConnected) {
      throw StructuralError("architecture must end with an fc layer");
    }
    LayerSpec out;
    out.id = next_id_++;
    out.kind = LayerKind::Argmax;
    out.inputs = {current_};
    const LayerId output = out.id;
    layers_.push_back(std::move(out));
    return ModelGraph(std::move(layers_), output);
  }

 private:
  void emit(const std::string& t) {
    if (t == "r") {
      push_simple(LayerKind::ReLU, std::monostate{}, shapes_.at(current_));
    } else if (t.rfind("res{", 0) == 0) {
      if (t.back() != '}') throw StructuralError("malformed residual block '" + t + "'");
      const LayerId skip = current_;
      const LayerKind skip_kind = kind_of(skip);
      if (skip_kind != LayerKind::ReLU && skip_kind != LayerKind::MaxPoolReLU) {
        throw StructuralError("residual block must start after a non-linear layer");
      }
      run(split_arch(std::string_view(t).substr(4, t.size() - 5)));
      if (shapes_.at(current_) != shapes_.at(skip)) {
        throw StructuralError("residual branch changes shape " + shape_string(shapes_.at(skip)) + " -> " +
                              shape_string(shapes_.at(current_)));
      }
      LayerSpec add;
      add.id = next_id_++;
      add.kind = LayerKind::Add;
      add.inputs = {current_, skip};
      shapes_[add.id] = shapes_.at(current_);
      current_ = add.id;
      layers_.push_back(std::move(add));
    } else if (auto n = match_numbers(t, "conv", 'x', 3, 3)) {
      const Shape& in = shapes_.at(current_);
      if (in.size() != 3) throw StructuralError("conv needs a [C, H, W] input, got " + shape_string(in));
      const std::size_t cout = (*n)[0], kh = (*n)[1], kw = (*n)[2];
      if (kh % 2 == 0 || kw % 2 == 0) throw StructuralError("conv kernels must be odd: '" + t + "'");
      ConvParams p;
      const double bound = 1.0 / std::sqrt(static_cast<double>(in[0] * kh * kw));
      p.weight = draw(Shape{cout, in[0], kh, kw}, bound);
      p.bias = draw(Shape{cout}, bound);
      p.pad_h = (kh - 1) / 2;
      p.pad_w = (kw - 1) / 2;
      push_simple(LayerKind::Convolution, std::move(p), Shape{cout, in[1], in[2]});
    } else if (auto n = match_numbers(t, "fc", 'x', 1, 1)) {
      const std::size_t n_in = shape_size(shapes_.at(current_));
      FcParams p;
      const double bound = 1.0 / std::sqrt(static_cast<double>(n_in));
      p.weight = draw(Shape{(*n)[0], n_in}, bound);
      p.bias = draw(Shape{(*n)[0]}, bound);
      push_simple(LayerKind::FullyConnected, std::move(p), Shape{(*n)[0]});
    } else if (auto n = match_numbers(t, "mpr", 's', 1, 2)) {
      const Shape& in = shapes_.at(current_);
      PoolParams p{(*n)[0], (*n)[0], n->size() > 1 ? (*n)[1] : (*n)[0], n->size() > 1 ? (*n)[1] : (*n)[0]};
      if (in.size() != 3 || in[1] < p.kernel_h || in[2] < p.kernel_w || (in[1] - p.kernel_h) % p.stride_h ||
          (in[2] - p.kernel_w) % p.stride_w) {
        throw StructuralError("'" + t + "' does not tile input " + shape_string(in));
      }
      Shape out{in[0], (in[1] - p.kernel_h) / p.stride_h + 1, (in[2] - p.kernel_w) / p.stride_w + 1};
      push_simple(LayerKind::MaxPoolReLU, p, out);
    } else {
      throw StructuralError("unknown architecture token '" + t + "'");
    }
  }

  void push_simple(LayerKind kind, LayerParams params, Shape out) {
    LayerSpec l;
    l.id = next_id_++;
    l.kind = kind;
    l.inputs = {current_};
    l.params = std::move(params);
    shapes_[l.id] = std::move(out);
    current_ = l.id;
    layers_.push_back(std::move(l));
  }

  Tensor draw(Shape shape, double bound) {
    Tensor t(std::move(shape));
    if (rng_) {
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (double& v : t.values()) v = dist(*rng_);
    }
    return t;
  }

  LayerKind kind_of(LayerId id) const {
    for (const LayerSpec& l : layers_) {
      if (l.id == id) return l.kind;
    }
    throw StructuralError("unknown layer");
  }

  std::mt19937_64* rng_;
  std::vector<LayerSpec> layers_;
  std::map<LayerId, Shape> shapes_;
  LayerId next_id_ = 0;
  LayerId current_;
};

}  // namespace detail

// Topology only, all parameters zero.
inline ModelGraph build_architecture(std::string_view arch, const Shape& input_shape) {
  detail::ArchBuilder b(input_shape, nullptr);
  b.run(detail::split_arch(arch));
  return b.finish();
}

// Weights and biases uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], deterministic per seed.
inline ModelGraph random_model(std::string_view arch, const Shape& input_shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  detail::ArchBuilder b(input_shape, &rng);
  b.run(detail::split_arch(arch));
  return b.finish();
}

}  // namespace seek
