// Recurrent graph-convolutional reconstruction model (GConvLSTM + ReLU +
// linear head) with exact reverse-mode gradients and a small trainer.
#pragma once

#include "ranwatch/dataset.hpp"

#include <Eigen/Core>
#include <Eigen/SparseCore>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ranwatch::nn {

class ShapeError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Raised when a loss or gradient stops being finite.
class DivergenceError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::size_t embed_dim = 64;
  std::size_t depth = 2;
  std::size_t cheb_order = 2;
  std::size_t history = 192;
  std::size_t horizon = 1;
  std::size_t feature_dim = 1;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct TensorSpec {
  std::string name;
  std::vector<std::size_t> dims;

  std::size_t size() const;
  friend bool operator==(const TensorSpec&, const TensorSpec&) = default;
};

using Manifest = std::vector<TensorSpec>;

/// Ordered tensor layout for a configuration:
///   layer{l}.cheb{k}  (in_l + d) x 4d   gate maps, gates ordered i, f, g, o
///   layer{l}.bias     4d
///   head.weight       d x (F * horizon)
///   head.bias         F * horizon
/// Tensors are stored row-major and back to back in the flat vector.
Manifest model_manifest(const ModelConfig& cfg);
std::size_t manifest_size(const Manifest& m);

/// Flat parameter vector plus its shape manifest; the unit of exchange in FL.
struct ModelWeights {
  Manifest manifest;
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
};

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> dims;
  std::vector<double> data;
};

std::vector<NamedTensor> unflatten(const ModelWeights& w);
ModelWeights flatten(const std::vector<NamedTensor>& tensors);

/// Uniform in +-sqrt(6 / (fan_in + fan_out)) for matrices, zero biases.
ModelWeights init_weights(const ModelConfig& cfg, std::uint64_t seed);

/// Writes `<stem>.json` (config + manifest) and `<stem>.bin` (little-endian f64).
void save_checkpoint(const std::filesystem::path& stem, const ModelConfig& cfg, const ModelWeights& w);
/// Loads a checkpoint; throws ShapeError unless its manifest equals the one for `cfg`.
ModelWeights load_checkpoint(const std::filesystem::path& stem, const ModelConfig& cfg);
ModelConfig read_checkpoint_config(const std::filesystem::path& stem);

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Scaled normalized Laplacian 2 L_sym / lambda_max - I with lambda_max = 2,
/// after adding the reverse of every edge. Isolated nodes have a zero row in
/// L_sym, so with no edges at all the operator is -I.
SparseMatrix scaled_laplacian(const Eigen::Matrix<long, 2, Eigen::Dynamic>& edge_index,
                              const Eigen::VectorXd& edge_attr, std::size_t n_nodes);

/// sum_k T_k(L) x W_k with the Chebyshev recursion T_0 = I, T_1 = L,
/// T_k = 2 L T_{k-1} - T_{k-2}. `weights` holds one F_in x F_out matrix per order.
Eigen::MatrixXd cheb_conv(const Eigen::MatrixXd& x, const SparseMatrix& lap,
                          std::span<const Eigen::MatrixXd> weights);
Eigen::MatrixXd cheb_conv(const Eigen::MatrixXd& x, const Eigen::Matrix<long, 2, Eigen::Dynamic>& edge_index,
                          const Eigen::VectorXd& edge_attr, std::span<const Eigen::MatrixXd> weights);

struct LstmState {
  Eigen::MatrixXd h;
  Eigen::MatrixXd c;
};

/// One recurrent layer: Chebyshev gate maps over [x_t, h] and the gate bias.
struct LstmLayerParams {
  std::vector<Eigen::MatrixXd> cheb;  // each (F_in + d) x 4d
  Eigen::RowVectorXd bias;            // 4d

  std::size_t hidden() const { return static_cast<std::size_t>(bias.size() / 4); }
};

LstmState gconv_lstm_step(const Eigen::MatrixXd& x_t, const LstmState& state, const LstmLayerParams& params,
                          const SparseMatrix& lap);

struct LossMode {
  enum class Kind { mse, mse_reg } kind = Kind::mse;
  double lambda = 0.0;

  static LossMode mse() { return {}; }
  static LossMode regularized(double l) { return {Kind::mse_reg, l}; }
  bool regularized() const { return kind == Kind::mse_reg; }
};

/// Mean squared error over all elements, plus lambda * ||w - w_star||^2 in
/// regularized mode.
double loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target, const LossMode& mode,
            std::span<const double> w = {}, std::span<const double> w_star = {});

/// Batch targets as an n x (F * horizon) matrix in prediction layout.
Eigen::MatrixXd batch_targets(const WindowBatch& batch);

class Model {
public:
  Model(ModelConfig cfg, ModelWeights weights);
  static Model initialized(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const ModelWeights& weights() const { return weights_; }
  std::size_t num_params() const { return weights_.size(); }
  void set_values(std::span<const double> values);

  LstmLayerParams layer_params(std::size_t layer) const;

  /// n x (F * horizon) predictions for every node copy in the batch.
  Eigen::MatrixXd forward(const WindowBatch& batch) const;

private:
  ModelConfig cfg_;
  ModelWeights weights_;
};

struct Gradient {
  double loss = 0.0;  // objective value, including any penalty
  double mse = 0.0;   // data term only
  std::vector<double> grad;
};

/// Exact gradient of the loss with respect to every parameter.
Gradient backward(const Model& model, const WindowBatch& batch, const LossMode& mode,
                  std::span<const double> anchor = {});

enum class Optimizer { sgd, adaptive_moments };

struct TrainConfig {
  double learning_rate = 3e-3;
  std::size_t batch_size = 64;
  std::size_t epochs = 1;
  LossMode loss;
  Optimizer optimizer = Optimizer::adaptive_moments;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainResult {
  std::vector<double> epoch_mse;  // mean data loss seen during each epoch
};

/// `cfg.epochs` passes over the batches in a seeded shuffled order. Throws
/// DivergenceError on a non-finite loss.
TrainResult train(Model& model, const BatchSource& batches, const TrainConfig& cfg,
                  std::span<const double> anchor = {});

/// Element-weighted mean squared error over every batch.
double evaluate_mse(const Model& model, const BatchSource& batches);

}  // namespace ranwatch::nn
