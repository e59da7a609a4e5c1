#pragma once

#include <cmath>
#include <string>

#include "sarnet/errors.hpp"
#include "sarnet/numerics/ops.hpp"
#include "sarnet/numerics/tape.hpp"

namespace sarnet {

enum class Mode { kTrain, kServe };

struct BatchNormConfig {
  double momentum = 0.9;
  double epsilon = 1e-5;
};

/// Batch normalization over feature columns. Scale/shift are trainable; the running
/// mean/variance live in the same store as non-trainable entries so they checkpoint.
class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(ParameterStore& store, const std::string& prefix, std::size_t features, BatchNormConfig config = {})
      : config_(config),
        scale_(&store.add(prefix + ".scale", Tensor({1, features}, 1.0))),
        shift_(&store.add(prefix + ".shift", Tensor({1, features}, 0.0))),
        running_mean_(&store.add(prefix + ".running_mean", Tensor({1, features}, 0.0), false)),
        running_var_(&store.add(prefix + ".running_var", Tensor({1, features}, 1.0), false)) {}

  std::size_t features() const { return scale_->value.cols(); }
  const BatchNormConfig& config() const { return config_; }
  const Tensor& running_mean() const { return running_mean_->value; }
  const Tensor& running_var() const { return running_var_->value; }
  Parameter& scale() { return *scale_; }
  Parameter& shift() { return *shift_; }

  /// Training mode normalizes with batch statistics and folds them into the
  /// running estimates; serve mode is the fixed affine map from running statistics.
  Var forward(Var x, Mode mode, bool update_running = true) {
    Tape& tape = *x.tape();
    require(x.value().cols() == features(), "batch norm width mismatch");
    if (mode == Mode::kServe)
      return batch_norm_infer(x, tape.param(*scale_), tape.param(*shift_), running_mean_->value,
                              running_var_->value, config_.epsilon);
    Var out = batch_norm_train(x, tape.param(*scale_), tape.param(*shift_), config_.epsilon);
    if (update_running) fold_statistics(x.value());
    return out;
  }

 private:
  void fold_statistics(const Tensor& x) {
    const std::size_t n = x.rows();
    const double nd = static_cast<double>(n);
    for (std::size_t c = 0; c < features(); ++c) {
      double mean = 0.0;
      for (std::size_t r = 0; r < n; ++r) mean += x(r, c);
      mean /= nd;
      double var = 0.0;
      for (std::size_t r = 0; r < n; ++r) var += (x(r, c) - mean) * (x(r, c) - mean);
      var /= nd;
      running_mean_->value[c] = config_.momentum * running_mean_->value[c] + (1.0 - config_.momentum) * mean;
      running_var_->value[c] = config_.momentum * running_var_->value[c] + (1.0 - config_.momentum) * var;
    }
  }

  BatchNormConfig config_;
  Parameter* scale_ = nullptr;
  Parameter* shift_ = nullptr;
  Parameter* running_mean_ = nullptr;
  Parameter* running_var_ = nullptr;
};

/// Value-level batch normalization for a batch x features tensor.
inline Tensor batch_norm(const Tensor& x, BatchNorm& state, Mode mode) {
  Tape tape;
  Var out = state.forward(tape.constant(x), mode);
  return out.value();
}

}  // namespace sarnet
