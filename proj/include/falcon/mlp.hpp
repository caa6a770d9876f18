#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "falcon/rng.hpp"

namespace falcon {

/// Fully-connected network with tanh hidden layers and a linear output,
/// parameters in one flat vector (checkpointing, optimizers, and
/// finite-difference checks all operate on that vector). Scalar is float for
/// training and double for the gradient-check instantiation.
template <typename Scalar>
class Mlp {
 public:
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  Mlp() = default;

  /// sizes = [input, hidden..., output]; final-layer weights are scaled by
  /// final_gain (small for actor means so initial actions stay near zero).
  Mlp(std::vector<int> sizes, Rng& rng, double final_gain = 1.0)
      : sizes_(std::move(sizes)) {
    if (sizes_.size() < 2) throw std::invalid_argument("Mlp needs at least two sizes");
    int total = 0;
    for (size_t l = 0; l + 1 < sizes_.size(); ++l) {
      layers_.push_back({total, total + sizes_[l + 1] * sizes_[l], sizes_[l + 1], sizes_[l]});
      total += sizes_[l + 1] * sizes_[l] + sizes_[l + 1];
    }
    params_.resize(total);
    for (size_t l = 0; l < layers_.size(); ++l) {
      const Layer& ly = layers_[l];
      double limit = std::sqrt(6.0 / (ly.rows + ly.cols));
      if (l + 1 == layers_.size()) limit *= final_gain;
      for (int i = 0; i < ly.rows * ly.cols; ++i) {
        params_[ly.w_offset + i] = static_cast<Scalar>(rng.uniform(-limit, limit));
      }
      for (int i = 0; i < ly.rows; ++i) params_[ly.b_offset + i] = Scalar(0);
    }
  }

  int input_size() const { return sizes_.front(); }
  int output_size() const { return sizes_.back(); }
  const std::vector<int>& sizes() const { return sizes_; }

  Vec& params() { return params_; }
  const Vec& params() const { return params_; }
  int parameter_count() const { return static_cast<int>(params_.size()); }

  /// Cached per-layer activations for the backward pass.
  struct Workspace {
    std::vector<Mat> act;  // act[0] = input, act[l+1] = post-activation of layer l
  };

  /// x is input-dim x batch; returns output-dim x batch.
  Mat forward(const Mat& x, Workspace* ws = nullptr) const {
    if (x.rows() != sizes_.front()) {
      throw std::invalid_argument("Mlp::forward: input has wrong dimension");
    }
    if (ws) {
      ws->act.clear();
      ws->act.push_back(x);
    }
    Mat h = x;
    for (size_t l = 0; l < layers_.size(); ++l) {
      h = (weight(l) * h).colwise() + bias(l);
      if (l + 1 < layers_.size()) h = h.array().tanh().matrix();
      if (ws) ws->act.push_back(h);
    }
    return h;
  }

  /// Accumulates dLoss/dparams into grad given dLoss/doutput (out x batch).
  void backward(const Workspace& ws, const Mat& d_output, Vec& grad) const {
    if (grad.size() != params_.size()) grad.setZero(params_.size());
    Mat delta = d_output;
    for (int l = static_cast<int>(layers_.size()) - 1; l >= 0; --l) {
      const Mat& input = ws.act[l];
      grad_weight(l, grad).noalias() += delta * input.transpose();
      grad_bias(l, grad) += delta.rowwise().sum();
      if (l > 0) {
        delta = (weight(l).transpose() * delta).eval();
        // tanh' = 1 - act^2 on the post-activation values
        delta.array() *= (Scalar(1) - ws.act[l].array().square());
      }
    }
  }

  Eigen::Map<const Mat> weight(size_t l) const {
    const Layer& ly = layers_[l];
    return {params_.data() + ly.w_offset, ly.rows, ly.cols};
  }
  Eigen::Map<const Vec> bias(size_t l) const {
    const Layer& ly = layers_[l];
    return {params_.data() + ly.b_offset, ly.rows};
  }

  template <typename OtherScalar>
  Mlp<OtherScalar> cast() const {
    Mlp<OtherScalar> out;
    out.sizes_ = sizes_;
    for (const auto& ly : layers_) out.layers_.push_back({ly.w_offset, ly.b_offset, ly.rows, ly.cols});
    out.params_ = params_.template cast<OtherScalar>();
    return out;
  }

  struct Layer {
    int w_offset, b_offset, rows, cols;
  };

  template <typename S>
  friend class Mlp;

 private:
  Eigen::Map<Mat> grad_weight(size_t l, Vec& grad) const {
    const Layer& ly = layers_[l];
    return {grad.data() + ly.w_offset, ly.rows, ly.cols};
  }
  Eigen::Map<Vec> grad_bias(size_t l, Vec& grad) const {
    const Layer& ly = layers_[l];
    return {grad.data() + ly.b_offset, ly.rows};
  }

  std::vector<int> sizes_;
  std::vector<Layer> layers_;
  Vec params_;
};

/// Adam over a flat parameter vector.
template <typename Scalar>
class Adam {
 public:
  Adam() = default;
  explicit Adam(int size, Scalar beta1 = Scalar(0.9), Scalar beta2 = Scalar(0.999),
                Scalar eps = Scalar(1e-8))
      : beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.setZero(size);
    v_.setZero(size);
  }

  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  void step(Vec& params, const Vec& grad, Scalar lr) {
    ++t_;
    m_ = beta1_ * m_ + (Scalar(1) - beta1_) * grad;
    v_ = beta2_ * v_ + (Scalar(1) - beta2_) * grad.cwiseProduct(grad);
    Scalar c1 = Scalar(1) - std::pow(beta1_, Scalar(t_));
    Scalar c2 = Scalar(1) - std::pow(beta2_, Scalar(t_));
    params -= (lr / c1) * m_.cwiseQuotient(((v_ / c2).cwiseSqrt().array() + eps_).matrix());
  }

 private:
  Vec m_, v_;
  long t_ = 0;
  Scalar beta1_ = Scalar(0.9), beta2_ = Scalar(0.999), eps_ = Scalar(1e-8);
};

/// Diagonal-Gaussian policy: state-dependent mean, state-independent log-std
/// vector clamped to [-4, 1].
template <typename Scalar>
struct GaussianPolicy {
  using Vec = typename Mlp<Scalar>::Vec;
  using Mat = typename Mlp<Scalar>::Mat;

  Mlp<Scalar> mean;
  Vec log_std;

  static constexpr double kLogStdMin = -4.0;
  static constexpr double kLogStdMax = 1.0;

  GaussianPolicy() = default;
  GaussianPolicy(std::vector<int> sizes, Rng& rng, double log_std_init,
                 double final_gain = 1.0)
      : mean(std::move(sizes), rng, final_gain) {
    log_std = Vec::Constant(mean.output_size(),
                            static_cast<Scalar>(std::clamp(log_std_init, kLogStdMin, kLogStdMax)));
  }

  int action_size() const { return mean.output_size(); }

  void clamp_log_std() {
    log_std = log_std.cwiseMax(Scalar(kLogStdMin)).cwiseMin(Scalar(kLogStdMax));
  }

  Vec std() const { return log_std.array().exp(); }

  /// log N(a | mu, sigma) summed over action dimensions, per batch column.
  Vec log_prob(const Mat& mu, const Mat& actions) const {
    const Scalar log_2pi = Scalar(std::log(2.0 * M_PI));
    Vec sigma = std();
    Vec out = Vec::Zero(mu.cols());
    for (int c = 0; c < mu.cols(); ++c) {
      Scalar s = 0;
      for (int i = 0; i < mu.rows(); ++i) {
        Scalar z = (actions(i, c) - mu(i, c)) / sigma[i];
        s += Scalar(-0.5) * z * z - log_std[i] - Scalar(0.5) * log_2pi;
      }
      out[c] = s;
    }
    return out;
  }

  /// Entropy of the diagonal Gaussian (state-independent).
  Scalar entropy() const {
    const Scalar c = Scalar(0.5) * (Scalar(1) + Scalar(std::log(2.0 * M_PI)));
    return log_std.sum() + c * Scalar(log_std.size());
  }

  Mat sample(const Mat& mu, Rng& rng) const {
    Vec sigma = std();
    Mat a = mu;
    for (int c = 0; c < a.cols(); ++c) {
      for (int i = 0; i < a.rows(); ++i) {
        a(i, c) += sigma[i] * static_cast<Scalar>(rng.normal());
      }
    }
    return a;
  }
};

}  // namespace falcon
