#pragma once

#include "osd/common.hpp"
#include "osd/dataset.hpp"

#include <filesystem>
#include <vector>

namespace osd::neural {

using io::Dataset;
using io::StateMatrix;

enum class Kind { Mlp, ResNet };
/// Identity: y + Block(y). Affine: (P y + p) + Block(y), P initialized to I.
enum class Shortcut { Identity, Affine };

/// Input scaling (x - mu) / (sqrt(sigma) + epsilon), sigma being the per-feature variance.
struct Normalization {
  Vec8 mu = Vec8::Zero();
  Vec8 sigma = Vec8::Ones();
  double epsilon = 1e-8;

  static Normalization fit(const StateMatrix& X);
};

struct NetSpec {
  Kind kind = Kind::ResNet;
  int input_dim = kStateDim;
  int output_dim = 1;
  int depth = 12;  // residual blocks (ResNet) or ReLU layers (Mlp)
  int width = 16;
  Shortcut shortcut = Shortcut::Affine;
  Normalization norm;

  void validate() const;
};

struct Layer {
  Eigen::MatrixXd W;  // out x in
  Eigen::VectorXd b;
};

/// Layers in evaluation order. ResNet: lift, then per block W1, W2 [, P], then output.
/// Mlp: depth ReLU layers, then output.
struct NetParams {
  std::vector<Layer> layers;

  std::size_t parameter_count() const;
  Eigen::VectorXd flatten() const;
  void unflatten(const Eigen::VectorXd& theta);
  /// Same shapes, all zero.
  NetParams zeros_like() const;
};

/// (rows, cols) of every layer implied by the spec.
std::vector<std::pair<int, int>> layer_shapes(const NetSpec& spec);

NetParams init(const NetSpec& spec, std::uint64_t seed);

/// Rounds every weight and the normalization to single precision (deployment form).
void round_to_float(NetSpec& spec, NetParams& params);

double forward(const NetParams& params, const NetSpec& spec, const Vec8& x);
/// One output per row of X.
Eigen::VectorXd forward_batch(const NetParams& params, const NetSpec& spec, const StateMatrix& X);

struct LossGradient {
  double loss = 0.0;  // mean squared error
  NetParams grad;
};

/// Exact gradient of the mean squared error over the rows of X against u.
LossGradient gradient(const NetParams& params, const NetSpec& spec, const StateMatrix& X,
                      const Eigen::VectorXd& u);

struct GradientCheck {
  double max_relative_error = 0.0;
  int coordinates = 0;
};

/// Compares `gradient` with central differences of step h on randomly chosen
/// coordinates. Relative error is |g - fd| / max(|g|, |fd|, floor).
GradientCheck check_gradient(const NetParams& params, const NetSpec& spec, const StateMatrix& X,
                             const Eigen::VectorXd& u, int n_coordinates, std::uint64_t seed,
                             double h = 1e-6, double floor = 1e-6);

struct TrainConfig {
  int batch_size = 1024;
  double learning_rate = 1e-3;
  double learning_rate_min = 1e-5;  // cosine decay floor
  int epochs = 100;
  long steps = 0;  // > 0 overrides epochs: exact number of gradient steps
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double validation_fraction = 0.05;
  std::uint64_t seed = 1;
  int patience = 0;        // evaluations without improvement before stopping; 0 disables
  long eval_interval = 0;  // steps between validations; 0 selects about 100 evaluations

  void validate() const;
};

struct TrainLogEntry {
  long step;
  double train_loss;
  double val_loss;
  double learning_rate;
};

struct TrainLog {
  long steps = 0;  // gradient steps actually taken
  long best_step = 0;
  double best_val_loss = 0.0;
  std::size_t train_size = 0, val_size = 0;
  std::vector<TrainLogEntry> entries;
};

struct TrainResult {
  NetSpec spec;  // with the fitted normalization
  NetParams params;
  TrainLog log;
};

/// Adam on the mean squared error with cosine learning-rate decay. Normalization
/// statistics come from the training split. The best-validation checkpoint is
/// returned in deployment (single-precision) form.
TrainResult train(NetSpec spec, const Dataset& data, const TrainConfig& config);

struct Footprint {
  std::size_t parameter_count = 0;
  std::size_t param_bytes = 0;     // weights and biases at the declared precision
  std::size_t file_bytes = 0;      // serialized weights file
  std::size_t peak_ram_bytes = 0;  // largest layer plus activation buffers
  int matmul_count = 0;            // affine maps per forward pass
};

Footprint footprint(const NetSpec& spec, const NetParams& params, int precision_bytes = 4);

void save_weights(const std::filesystem::path& path, const NetSpec& spec, const NetParams& params);
std::pair<NetSpec, NetParams> load_weights(const std::filesystem::path& path);

}  // namespace osd::neural
