#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "zonosafe/random.hpp"
#include "zonosafe/zonotope.hpp"

namespace zonosafe {

enum class LayerKind { Dense, Tanh };

struct Layer {
  LayerKind kind = LayerKind::Dense;
  Mat weight;  // Dense only
  Vec bias;    // Dense only

  static Layer dense(Mat w, Vec b) { return {LayerKind::Dense, std::move(w), std::move(b)}; }
  static Layer tanh() { return {LayerKind::Tanh, Mat(), Vec()}; }
};

/// Feed-forward network of Dense and element-wise Tanh layers.
class Mlp {
 public:
  Mlp() = default;

  explicit Mlp(std::vector<Layer> layers) : layers_(std::move(layers)) { validate(); }

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& mutable_layers() { return layers_; }
  Eigen::Index input_dim() const { return input_dim_; }
  Eigen::Index output_dim() const { return output_dim_; }

  /// Number of trainable scalars.
  Eigen::Index parameter_count() const {
    Eigen::Index n = 0;
    for (const auto& l : layers_) {
      if (l.kind == LayerKind::Dense) n += l.weight.size() + l.bias.size();
    }
    return n;
  }

  void validate() {
    Eigen::Index width = -1;
    input_dim_ = -1;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      if (l.kind != LayerKind::Dense) continue;
      if (l.weight.rows() != l.bias.size()) {
        throw std::invalid_argument("Mlp: layer " + std::to_string(i) + " bias size does not match weight rows");
      }
      if (width >= 0 && l.weight.cols() != width) {
        throw std::invalid_argument("Mlp: layer " + std::to_string(i) + " expects input width " +
                                    std::to_string(l.weight.cols()) + " but previous layer emits " +
                                    std::to_string(width));
      }
      if (input_dim_ < 0) input_dim_ = l.weight.cols();
      width = l.weight.rows();
    }
    if (input_dim_ < 0) throw std::invalid_argument("Mlp: needs at least one Dense layer");
    output_dim_ = width;
  }

 private:
  std::vector<Layer> layers_;
  Eigen::Index input_dim_ = 0;
  Eigen::Index output_dim_ = 0;
};

/// Dense-Tanh-...-Dense network with widths[0] inputs and widths.back()
/// outputs, Glorot-uniform weights and zero biases.
inline Mlp make_tanh_mlp(const std::vector<int>& widths, Rng& rng) {
  if (widths.size() < 2) throw std::invalid_argument("make_tanh_mlp: need at least input and output width");
  std::vector<Layer> layers;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const int fan_in = widths[i];
    const int fan_out = widths[i + 1];
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    Mat w(fan_out, fan_in);
    for (Eigen::Index c = 0; c < w.cols(); ++c)
      for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = rng.uniform(-limit, limit);
    layers.push_back(Layer::dense(std::move(w), Vec::Zero(fan_out)));
    if (i + 2 < widths.size()) layers.push_back(Layer::tanh());
  }
  return Mlp(std::move(layers));
}

inline Vec forward_point(const Mlp& net, const Vec& x) {
  detail::require_dim(net.input_dim(), x.size(), "forward_point");
  Vec a = x;
  for (const auto& l : net.layers()) {
    if (l.kind == LayerKind::Dense) {
      a = l.weight * a + l.bias;
    } else {
      a = a.array().tanh().matrix();
    }
  }
  return a;
}

/// Relaxations chosen at each Tanh layer during a set pass, indexed by layer.
using RelaxationTape = std::vector<std::vector<TanhRelaxation>>;

/// Sound set image of X under the network. If `frozen` is given, its
/// relaxations are reused instead of recomputing them from interval hulls;
/// the result is then only sound when they were computed for the same input.
/// If `tape` is given, the relaxations actually used are recorded.
inline Zonotope forward_set(const Mlp& net, const Zonotope& x, const RelaxationTape* frozen = nullptr,
                            RelaxationTape* tape = nullptr) {
  detail::require_dim(net.input_dim(), x.dim(), "forward_set");
  Zonotope z = x;
  if (tape) tape->assign(net.layers().size(), {});
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    const auto& l = net.layers()[i];
    if (l.kind == LayerKind::Dense) {
      z = affine_map(l.weight, l.bias, z);
    } else {
      auto rel = frozen ? (*frozen)[i] : tanh_relaxations(z);
      z = apply_tanh_relaxations(z, rel);
      if (tape) (*tape)[i] = std::move(rel);
    }
  }
  return z;
}

/// Parameter gradients laid out like the network's layers (empty for Tanh).
struct MlpGradient {
  std::vector<Mat> weight;
  std::vector<Vec> bias;

  static MlpGradient zeros_like(const Mlp& net) {
    MlpGradient g;
    for (const auto& l : net.layers()) {
      g.weight.push_back(l.kind == LayerKind::Dense ? Mat(Mat::Zero(l.weight.rows(), l.weight.cols())) : Mat());
      g.bias.push_back(l.kind == LayerKind::Dense ? Vec(Vec::Zero(l.bias.size())) : Vec());
    }
    return g;
  }

  MlpGradient& operator+=(const MlpGradient& o) {
    for (std::size_t i = 0; i < weight.size(); ++i) {
      if (weight[i].size()) weight[i] += o.weight[i];
      if (bias[i].size()) bias[i] += o.bias[i];
    }
    return *this;
  }

  MlpGradient& operator*=(double s) {
    for (auto& w : weight) w *= s;
    for (auto& b : bias) b *= s;
    return *this;
  }
};

struct PointBackward {
  MlpGradient params;
  Vec input;
};

/// Reverse-mode gradient of `upstream . forward_point(net, x)`, accumulated
/// into `grad` when given.
inline Vec backward_point(const Mlp& net, const Vec& x, const Vec& upstream, MlpGradient& grad) {
  detail::require_dim(net.input_dim(), x.size(), "backward_point");
  detail::require_dim(net.output_dim(), upstream.size(), "backward_point upstream");
  const auto& layers = net.layers();
  std::vector<Vec> acts;
  acts.reserve(layers.size() + 1);
  acts.push_back(x);
  for (const auto& l : layers) {
    const Vec& a = acts.back();
    acts.push_back(l.kind == LayerKind::Dense ? Vec(l.weight * a + l.bias) : Vec(a.array().tanh().matrix()));
  }
  Vec g = upstream;
  for (std::size_t i = layers.size(); i-- > 0;) {
    const auto& l = layers[i];
    if (l.kind == LayerKind::Dense) {
      grad.weight[i].noalias() += g * acts[i].transpose();
      grad.bias[i] += g;
      g = l.weight.transpose() * g;
    } else {
      g = g.cwiseProduct((1.0 - acts[i + 1].array().square()).matrix());
    }
  }
  return g;
}

inline PointBackward backward_point(const Mlp& net, const Vec& x, const Vec& upstream) {
  PointBackward out{MlpGradient::zeros_like(net), Vec()};
  out.input = backward_point(net, x, upstream, out.params);
  return out;
}

/// Intermediate sets of a set pass, kept for the reverse sweep.
struct SetForwardTape {
  std::vector<Zonotope> inputs;  // input to each layer
  RelaxationTape relaxations;
  Zonotope output;
};

inline SetForwardTape forward_set_tape(const Mlp& net, const Zonotope& x, const RelaxationTape* frozen = nullptr) {
  detail::require_dim(net.input_dim(), x.dim(), "forward_set_tape");
  SetForwardTape tape;
  tape.relaxations.assign(net.layers().size(), {});
  Zonotope z = x;
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    const auto& l = net.layers()[i];
    tape.inputs.push_back(z);
    if (l.kind == LayerKind::Dense) {
      z = affine_map(l.weight, l.bias, z);
    } else {
      auto rel = frozen ? (*frozen)[i] : tanh_relaxations(z);
      z = apply_tanh_relaxations(z, rel);
      tape.relaxations[i] = std::move(rel);
    }
  }
  tape.output = std::move(z);
  return tape;
}

/// Gradient with respect to the input set's center and generators.
struct SetInputGradient {
  Vec center;
  Mat generators;
};

/// Reverse sweep through a recorded set pass. The relaxation slopes and
/// error terms are treated as constants, so center and generators are affine
/// in the layer parameters along the recorded path.
inline SetInputGradient backward_set(const Mlp& net, const SetForwardTape& tape, const Vec& d_center,
                                     const Mat& d_generators, MlpGradient& grad) {
  const auto& layers = net.layers();
  Vec dc = d_center;
  Mat dg = d_generators;
  for (std::size_t i = layers.size(); i-- > 0;) {
    const auto& l = layers[i];
    const Zonotope& in = tape.inputs[i];
    if (l.kind == LayerKind::Dense) {
      grad.weight[i].noalias() += dc * in.center().transpose();
      if (in.order() > 0) grad.weight[i].noalias() += dg * in.generators().transpose();
      grad.bias[i] += dc;
      dc = l.weight.transpose() * dc;
      dg = l.weight.transpose() * dg;
    } else {
      const auto& rel = tape.relaxations[i];
      Vec slope(static_cast<Eigen::Index>(rel.size()));
      for (std::size_t k = 0; k < rel.size(); ++k) slope[static_cast<Eigen::Index>(k)] = rel[k].slope;
      dc = slope.cwiseProduct(dc);
      // Trailing n columns are the constant error generators.
      Mat kept = slope.asDiagonal() * dg.leftCols(in.order());
      dg = std::move(kept);
    }
  }
  return {dc, dg};
}

}  // namespace zonosafe
