#include "ranwatch/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace ranwatch::nn {

// ---------------------------------------------------------------------------
// Configuration and weights

void ModelConfig::validate() const {
  if (embed_dim == 0 || depth == 0 || cheb_order == 0 || history == 0 || horizon == 0 || feature_dim == 0) {
    throw ShapeError("model dimensions must all be positive");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"embed_dim", c.embed_dim}, {"depth", c.depth},     {"cheb_order", c.cheb_order},
       {"history", c.history},     {"horizon", c.horizon}, {"feature_dim", c.feature_dim}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.depth = j.value("depth", d.depth);
  c.cheb_order = j.value("cheb_order", d.cheb_order);
  c.history = j.value("history", d.history);
  c.horizon = j.value("horizon", d.horizon);
  c.feature_dim = j.value("feature_dim", d.feature_dim);
}

std::size_t TensorSpec::size() const {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

Manifest model_manifest(const ModelConfig& cfg) {
  cfg.validate();
  const auto d = cfg.embed_dim;
  Manifest m;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const auto in = l == 0 ? cfg.feature_dim : d;
    for (std::size_t k = 0; k < cfg.cheb_order; ++k) {
      m.push_back({"layer" + std::to_string(l) + ".cheb" + std::to_string(k), {in + d, 4 * d}});
    }
    m.push_back({"layer" + std::to_string(l) + ".bias", {4 * d}});
  }
  m.push_back({"head.weight", {d, cfg.feature_dim * cfg.horizon}});
  m.push_back({"head.bias", {cfg.feature_dim * cfg.horizon}});
  return m;
}

std::size_t manifest_size(const Manifest& m) {
  std::size_t n = 0;
  for (const auto& t : m) n += t.size();
  return n;
}

std::vector<NamedTensor> unflatten(const ModelWeights& w) {
  if (manifest_size(w.manifest) != w.values.size()) throw ShapeError("weights do not match manifest");
  std::vector<NamedTensor> out;
  auto it = w.values.begin();
  for (const auto& spec : w.manifest) {
    auto n = static_cast<std::ptrdiff_t>(spec.size());
    out.push_back({spec.name, spec.dims, std::vector<double>(it, it + n)});
    it += n;
  }
  return out;
}

ModelWeights flatten(const std::vector<NamedTensor>& tensors) {
  ModelWeights w;
  for (const auto& t : tensors) {
    TensorSpec spec{t.name, t.dims};
    if (spec.size() != t.data.size()) throw ShapeError("tensor '" + t.name + "' data does not match its dims");
    w.manifest.push_back(std::move(spec));
    w.values.insert(w.values.end(), t.data.begin(), t.data.end());
  }
  return w;
}

ModelWeights init_weights(const ModelConfig& cfg, std::uint64_t seed) {
  ModelWeights w{model_manifest(cfg), {}};
  w.values.reserve(manifest_size(w.manifest));
  std::mt19937_64 rng(seed);
  for (const auto& spec : w.manifest) {
    if (spec.dims.size() == 1) {
      w.values.insert(w.values.end(), spec.size(), 0.0);
      continue;
    }
    double bound = std::sqrt(6.0 / static_cast<double>(spec.dims[0] + spec.dims[1]));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (std::size_t i = 0; i < spec.size(); ++i) w.values.push_back(u(rng));
  }
  return w;
}

namespace {

nlohmann::json manifest_json(const Manifest& m) {
  auto arr = nlohmann::json::array();
  for (const auto& t : m) arr.push_back({{"name", t.name}, {"dims", t.dims}});
  return arr;
}

std::filesystem::path with_ext(const std::filesystem::path& stem, const char* ext) {
  auto p = stem;
  p += ext;
  return p;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& stem, const ModelConfig& cfg, const ModelWeights& w) {
  {
    std::ofstream js(with_ext(stem, ".json"));
    if (!js) throw ShapeError("cannot write checkpoint '" + stem.string() + "'");
    nlohmann::json j = {{"config", cfg}, {"tensors", manifest_json(w.manifest)}, {"count", w.size()}};
    js << j.dump(2) << '\n';
  }
  std::ofstream bin(with_ext(stem, ".bin"), std::ios::binary);
  if (!bin) throw ShapeError("cannot write checkpoint '" + stem.string() + "'");
  for (double v : w.values) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
    bin.write(reinterpret_cast<const char*>(bytes), 8);
  }
}

ModelConfig read_checkpoint_config(const std::filesystem::path& stem) {
  std::ifstream js(with_ext(stem, ".json"));
  if (!js) throw ShapeError("cannot open checkpoint '" + stem.string() + "'");
  return nlohmann::json::parse(js).at("config").get<ModelConfig>();
}

ModelWeights load_checkpoint(const std::filesystem::path& stem, const ModelConfig& cfg) {
  std::ifstream js(with_ext(stem, ".json"));
  if (!js) throw ShapeError("cannot open checkpoint '" + stem.string() + "'");
  auto j = nlohmann::json::parse(js);
  ModelWeights w{model_manifest(cfg), {}};
  if (j.at("tensors") != manifest_json(w.manifest)) {
    throw ShapeError("checkpoint manifest does not match the model configuration");
  }
  const auto n = manifest_size(w.manifest);
  std::ifstream bin(with_ext(stem, ".bin"), std::ios::binary);
  w.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    unsigned char bytes[8];
    if (!bin.read(reinterpret_cast<char*>(bytes), 8)) throw ShapeError("checkpoint weight file is truncated");
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
    w.values[i] = std::bit_cast<double>(bits);
  }
  if (bin.peek() != std::char_traits<char>::eof()) throw ShapeError("checkpoint weight file has trailing data");
  return w;
}

// ---------------------------------------------------------------------------
// Graph operator and layers

SparseMatrix scaled_laplacian(const Eigen::Matrix<long, 2, Eigen::Dynamic>& edge_index,
                              const Eigen::VectorXd& edge_attr, std::size_t n_nodes) {
  if (edge_attr.size() != edge_index.cols()) throw ShapeError("edge_attr length does not match edge count");
  const auto n = static_cast<Eigen::Index>(n_nodes);
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(static_cast<std::size_t>(edge_index.cols()) * 2);
  for (Eigen::Index e = 0; e < edge_index.cols(); ++e) {
    auto u = edge_index(0, e), v = edge_index(1, e);
    if (u < 0 || v < 0 || u >= n || v >= n) throw ShapeError("edge endpoint out of range");
    double w = edge_attr(e);
    if (!(w >= 0.0)) throw ShapeError("edge weights must be nonnegative");
    trip.emplace_back(u, v, w);
    if (u != v) trip.emplace_back(v, u, w);
  }
  SparseMatrix adj(n, n);
  adj.setFromTriplets(trip.begin(), trip.end());

  Eigen::VectorXd deg = Eigen::VectorXd::Zero(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (SparseMatrix::InnerIterator it(adj, r); it; ++it) deg(r) += it.value();
  }
  Eigen::VectorXd inv_sqrt = (deg.array() > 0.0).select(deg.array().rsqrt(), 0.0);

  // L_sym - I = -D^-1/2 A D^-1/2 on connected nodes and -1 on isolated ones.
  std::vector<Eigen::Triplet<double>> out;
  out.reserve(static_cast<std::size_t>(adj.nonZeros() + n));
  for (Eigen::Index r = 0; r < n; ++r) {
    if (deg(r) <= 0.0) {
      out.emplace_back(r, r, -1.0);
      continue;
    }
    for (SparseMatrix::InnerIterator it(adj, r); it; ++it) {
      out.emplace_back(r, it.col(), -it.value() * inv_sqrt(r) * inv_sqrt(it.col()));
    }
  }
  SparseMatrix lap(n, n);
  lap.setFromTriplets(out.begin(), out.end());
  return lap;
}

namespace {

// [T_0 z, T_1 z, ..., T_{K-1} z] side by side.
Eigen::MatrixXd cheb_basis(const Eigen::MatrixXd& z, const SparseMatrix& lap, std::size_t order) {
  const auto n = z.rows(), m = z.cols();
  Eigen::MatrixXd tz(n, m * static_cast<Eigen::Index>(order));
  tz.leftCols(m) = z;
  if (order > 1) tz.middleCols(m, m).noalias() = lap * z;
  for (Eigen::Index k = 2; k < static_cast<Eigen::Index>(order); ++k) {
    tz.middleCols(k * m, m).noalias() = 2.0 * (lap * tz.middleCols((k - 1) * m, m));
    tz.middleCols(k * m, m) -= tz.middleCols((k - 2) * m, m);
  }
  return tz;
}

// Adjoint of cheb_basis: gradient w.r.t. z given gradients w.r.t. each T_k z.
Eigen::MatrixXd cheb_basis_adjoint(Eigen::MatrixXd g, const SparseMatrix& lap, std::size_t order, Eigen::Index m) {
  for (auto k = static_cast<Eigen::Index>(order) - 1; k >= 2; --k) {
    g.middleCols((k - 1) * m, m).noalias() += 2.0 * (lap.transpose() * g.middleCols(k * m, m));
    g.middleCols((k - 2) * m, m) -= g.middleCols(k * m, m);
  }
  Eigen::MatrixXd dz = g.leftCols(m);
  if (order > 1) dz.noalias() += lap.transpose() * g.middleCols(m, m);
  return dz;
}

Eigen::ArrayXXd sigmoid(const Eigen::ArrayXXd& x) { return 1.0 / (1.0 + (-x).exp()); }

void check_lap(const SparseMatrix& lap, Eigen::Index n) {
  if (lap.rows() != n || lap.cols() != n) throw ShapeError("graph operator does not match node count");
}

}  // namespace

Eigen::MatrixXd cheb_conv(const Eigen::MatrixXd& x, const SparseMatrix& lap,
                          std::span<const Eigen::MatrixXd> weights) {
  if (weights.empty()) throw ShapeError("Chebyshev order must be at least 1");
  check_lap(lap, x.rows());
  for (const auto& w : weights) {
    if (w.rows() != x.cols() || w.cols() != weights.front().cols()) throw ShapeError("Chebyshev weight shape mismatch");
  }
  auto tz = cheb_basis(x, lap, weights.size());
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(x.rows(), weights.front().cols());
  for (std::size_t k = 0; k < weights.size(); ++k) {
    y.noalias() += tz.middleCols(static_cast<Eigen::Index>(k) * x.cols(), x.cols()) * weights[k];
  }
  return y;
}

Eigen::MatrixXd cheb_conv(const Eigen::MatrixXd& x, const Eigen::Matrix<long, 2, Eigen::Dynamic>& edge_index,
                          const Eigen::VectorXd& edge_attr, std::span<const Eigen::MatrixXd> weights) {
  return cheb_conv(x, scaled_laplacian(edge_index, edge_attr, static_cast<std::size_t>(x.rows())), weights);
}

namespace {

struct StepCache {
  Eigen::MatrixXd tz;  // n x K(in + d)
  Eigen::ArrayXXd i, f, g, o, c_prev, c, tanh_c;
};

// Gate pre-activations are tz * W + b with W the stacked (K(in + d)) x 4d map.
template <typename W, typename B>
LstmState lstm_cell(const Eigen::MatrixXd& x, const LstmState& s, const W& w, const B& b, const SparseMatrix& lap,
                    std::size_t order, StepCache* cache) {
  const auto n = x.rows();
  const auto d = s.h.cols();
  Eigen::MatrixXd z(n, x.cols() + d);
  z << x, s.h;
  Eigen::MatrixXd tz = cheb_basis(z, lap, order);
  Eigen::MatrixXd pre = tz * w;
  pre.rowwise() += b;

  Eigen::ArrayXXd i = sigmoid(pre.leftCols(d).array());
  Eigen::ArrayXXd f = sigmoid(pre.middleCols(d, d).array());
  Eigen::ArrayXXd g = pre.middleCols(2 * d, d).array().tanh();
  Eigen::ArrayXXd o = sigmoid(pre.rightCols(d).array());
  Eigen::ArrayXXd c = f * s.c.array() + i * g;
  Eigen::ArrayXXd tc = c.tanh();
  LstmState next{(o * tc).matrix(), c.matrix()};
  if (cache) {
    *cache = {std::move(tz), std::move(i), std::move(f), std::move(g), std::move(o), s.c.array(), std::move(c),
              std::move(tc)};
  }
  return next;
}

}  // namespace

LstmState gconv_lstm_step(const Eigen::MatrixXd& x_t, const LstmState& state, const LstmLayerParams& params,
                          const SparseMatrix& lap) {
  const auto d = static_cast<Eigen::Index>(params.hidden());
  if (params.cheb.empty()) throw ShapeError("Chebyshev order must be at least 1");
  if (params.bias.size() != 4 * d) throw ShapeError("gate bias must have length 4d");
  if (state.h.rows() != x_t.rows() || state.c.rows() != x_t.rows() || state.h.cols() != d || state.c.cols() != d) {
    throw ShapeError("LSTM state shape does not match the input");
  }
  check_lap(lap, x_t.rows());
  const auto m = x_t.cols() + d;
  Eigen::MatrixXd w(m * static_cast<Eigen::Index>(params.cheb.size()), 4 * d);
  for (std::size_t k = 0; k < params.cheb.size(); ++k) {
    if (params.cheb[k].rows() != m || params.cheb[k].cols() != 4 * d) throw ShapeError("gate weight shape mismatch");
    w.middleRows(static_cast<Eigen::Index>(k) * m, m) = params.cheb[k];
  }
  return lstm_cell(x_t, state, w, params.bias, lap, params.cheb.size(), nullptr);
}

// ---------------------------------------------------------------------------
// Loss

double loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target, const LossMode& mode,
            std::span<const double> w, std::span<const double> w_star) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) throw ShapeError("prediction/target shape mismatch");
  if (pred.size() == 0) throw ShapeError("empty prediction");
  double mse = (pred - target).squaredNorm() / static_cast<double>(pred.size());
  if (!mode.regularized()) return mse;
  if (w.size() != w_star.size()) throw ShapeError("regularizer needs weight vectors of equal length");
  double pen = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) pen += (w[i] - w_star[i]) * (w[i] - w_star[i]);
  return mse + mode.lambda * pen;
}

Eigen::MatrixXd batch_targets(const WindowBatch& batch) {
  const auto n = batch.y.d0, f = batch.y.d1, h = batch.y.d2;
  Eigen::MatrixXd y(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(f * h));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < f * h; ++j) y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = batch.y.data[i * f * h + j];
  }
  return y;
}

// ---------------------------------------------------------------------------
// Model

namespace {

using ConstRowMap = Eigen::Map<const RowMatrix>;
using RowMap = Eigen::Map<RowMatrix>;

struct Offsets {
  std::vector<std::size_t> layer_w, layer_b;
  std::size_t head_w = 0, head_b = 0;
};

Offsets offsets_for(const ModelConfig& cfg) {
  Offsets o;
  std::size_t pos = 0;
  const auto d = cfg.embed_dim;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const auto in = l == 0 ? cfg.feature_dim : d;
    o.layer_w.push_back(pos);
    pos += cfg.cheb_order * (in + d) * 4 * d;
    o.layer_b.push_back(pos);
    pos += 4 * d;
  }
  o.head_w = pos;
  pos += d * cfg.feature_dim * cfg.horizon;
  o.head_b = pos;
  return o;
}

struct LayerTape {
  std::vector<StepCache> steps;
  std::vector<Eigen::MatrixXd> h;  // output sequence
};

struct ForwardTape {
  std::vector<LayerTape> layers;
  Eigen::MatrixXd relu;  // ReLU of the final top-layer state
  Eigen::MatrixXd out;
};

void check_batch(const ModelConfig& cfg, const WindowBatch& batch) {
  if (batch.x.d1 != cfg.feature_dim || batch.x.d2 != cfg.history) {
    throw ShapeError("batch x is " + std::to_string(batch.x.d1) + "x" + std::to_string(batch.x.d2) +
                     " per node, model expects " + std::to_string(cfg.feature_dim) + "x" + std::to_string(cfg.history));
  }
  if (batch.y.d0 != 0 && (batch.y.d0 != batch.x.d0 || batch.y.d1 != cfg.feature_dim || batch.y.d2 != cfg.horizon)) {
    throw ShapeError("batch y does not match the model's horizon");
  }
  if (batch.graph.num_nodes() != batch.x.d0) throw ShapeError("batched graph does not match node count");
}

ForwardTape run_forward(const ModelConfig& cfg, std::span<const double> w, const WindowBatch& batch, bool keep) {
  check_batch(cfg, batch);
  const auto off = offsets_for(cfg);
  const auto n = static_cast<Eigen::Index>(batch.x.d0);
  const auto d = static_cast<Eigen::Index>(cfg.embed_dim);
  const auto F = static_cast<Eigen::Index>(cfg.feature_dim);
  const auto lap = scaled_laplacian(batch.graph.edge_index, batch.graph.edge_attr, batch.x.d0);

  ForwardTape tape;
  tape.layers.resize(cfg.depth);
  std::vector<Eigen::MatrixXd> inputs(cfg.history, Eigen::MatrixXd(n, F));
  for (std::size_t t = 0; t < cfg.history; ++t) {
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index f = 0; f < F; ++f) {
        inputs[t](i, f) = batch.x(static_cast<std::size_t>(i), static_cast<std::size_t>(f), t);
      }
    }
  }

  Eigen::MatrixXd last;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const auto in = l == 0 ? F : d;
    const auto rows = static_cast<Eigen::Index>(cfg.cheb_order) * (in + d);
    ConstRowMap wl(w.data() + off.layer_w[l], rows, 4 * d);
    Eigen::Map<const Eigen::RowVectorXd> bl(w.data() + off.layer_b[l], 4 * d);
    LstmState s{Eigen::MatrixXd::Zero(n, d), Eigen::MatrixXd::Zero(n, d)};
    auto& lt = tape.layers[l];
    if (keep) lt.steps.resize(cfg.history);
    std::vector<Eigen::MatrixXd> outputs;
    outputs.reserve(cfg.history);
    for (std::size_t t = 0; t < cfg.history; ++t) {
      s = lstm_cell(inputs[t], s, wl, bl, lap, cfg.cheb_order, keep ? &lt.steps[t] : nullptr);
      outputs.push_back(s.h);
    }
    last = s.h;
    inputs = std::move(outputs);
    if (keep) lt.h = inputs;
  }

  const auto out_dim = static_cast<Eigen::Index>(cfg.feature_dim * cfg.horizon);
  ConstRowMap wh(w.data() + off.head_w, d, out_dim);
  Eigen::Map<const Eigen::RowVectorXd> bh(w.data() + off.head_b, out_dim);
  tape.relu = last.cwiseMax(0.0);
  tape.out = tape.relu * wh;
  tape.out.rowwise() += bh;
  return tape;
}

}  // namespace

Model::Model(ModelConfig cfg, ModelWeights weights) : cfg_(cfg), weights_(std::move(weights)) {
  if (weights_.manifest != model_manifest(cfg_)) throw ShapeError("weights manifest does not match model configuration");
  if (weights_.values.size() != manifest_size(weights_.manifest)) throw ShapeError("weight vector has the wrong length");
}

Model Model::initialized(const ModelConfig& cfg, std::uint64_t seed) { return Model(cfg, init_weights(cfg, seed)); }

void Model::set_values(std::span<const double> values) {
  if (values.size() != weights_.values.size()) throw ShapeError("weight vector has the wrong length");
  std::copy(values.begin(), values.end(), weights_.values.begin());
}

LstmLayerParams Model::layer_params(std::size_t layer) const {
  if (layer >= cfg_.depth) throw ShapeError("layer index out of range");
  const auto off = offsets_for(cfg_);
  const auto d = static_cast<Eigen::Index>(cfg_.embed_dim);
  const auto in = layer == 0 ? static_cast<Eigen::Index>(cfg_.feature_dim) : d;
  LstmLayerParams p;
  const double* base = weights_.values.data() + off.layer_w[layer];
  for (std::size_t k = 0; k < cfg_.cheb_order; ++k) {
    p.cheb.emplace_back(ConstRowMap(base + k * static_cast<std::size_t>((in + d) * 4 * d), in + d, 4 * d));
  }
  p.bias = Eigen::Map<const Eigen::RowVectorXd>(weights_.values.data() + off.layer_b[layer], 4 * d);
  return p;
}

Eigen::MatrixXd Model::forward(const WindowBatch& batch) const {
  return run_forward(cfg_, weights_.values, batch, false).out;
}

Gradient backward(const Model& model, const WindowBatch& batch, const LossMode& mode, std::span<const double> anchor) {
  const auto& cfg = model.config();
  std::span<const double> w = model.weights().values;
  if (mode.regularized() && anchor.size() != w.size()) {
    throw ShapeError("regularized loss needs an anchor of length " + std::to_string(w.size()));
  }
  auto tape = run_forward(cfg, w, batch, true);
  const Eigen::MatrixXd target = batch_targets(batch);
  if (target.rows() != tape.out.rows() || target.cols() != tape.out.cols()) throw ShapeError("target shape mismatch");

  Gradient g;
  g.grad.assign(w.size(), 0.0);
  const auto off = offsets_for(cfg);
  const auto d = static_cast<Eigen::Index>(cfg.embed_dim);
  const auto F = static_cast<Eigen::Index>(cfg.feature_dim);
  const auto n = tape.out.rows();
  const auto lap = scaled_laplacian(batch.graph.edge_index, batch.graph.edge_attr, batch.x.d0);

  const Eigen::MatrixXd resid = tape.out - target;
  g.mse = resid.squaredNorm() / static_cast<double>(resid.size());
  g.loss = g.mse;
  if (!std::isfinite(g.mse)) throw DivergenceError("non-finite loss");

  // Head.
  const Eigen::MatrixXd dout = resid * (2.0 / static_cast<double>(resid.size()));
  const auto out_dim = dout.cols();
  RowMap(g.grad.data() + off.head_w, d, out_dim).noalias() = tape.relu.transpose() * dout;
  Eigen::Map<Eigen::RowVectorXd>(g.grad.data() + off.head_b, out_dim) = dout.colwise().sum();
  ConstRowMap wh(w.data() + off.head_w, d, out_dim);
  Eigen::MatrixXd dlast = (dout * wh.transpose()).cwiseProduct((tape.relu.array() > 0.0).cast<double>().matrix());

  // Recurrent layers, top to bottom. dh_in[t] is the gradient arriving at
  // layer l's output h_t from above.
  std::vector<Eigen::MatrixXd> dh_in(cfg.history, Eigen::MatrixXd::Zero(n, d));
  dh_in.back() = dlast;
  for (auto l = static_cast<std::ptrdiff_t>(cfg.depth) - 1; l >= 0; --l) {
    const auto lu = static_cast<std::size_t>(l);
    const auto in = l == 0 ? F : d;
    const auto m = in + d;
    const auto rows = static_cast<Eigen::Index>(cfg.cheb_order) * m;
    ConstRowMap wl(w.data() + off.layer_w[lu], rows, 4 * d);
    RowMap gw(g.grad.data() + off.layer_w[lu], rows, 4 * d);
    Eigen::Map<Eigen::RowVectorXd> gb(g.grad.data() + off.layer_b[lu], 4 * d);

    std::vector<Eigen::MatrixXd> dx(cfg.history);
    Eigen::ArrayXXd dh_next = Eigen::ArrayXXd::Zero(n, d);
    Eigen::ArrayXXd dc_next = Eigen::ArrayXXd::Zero(n, d);
    Eigen::MatrixXd dpre(n, 4 * d);
    for (auto t = static_cast<std::ptrdiff_t>(cfg.history) - 1; t >= 0; --t) {
      const auto& s = tape.layers[lu].steps[static_cast<std::size_t>(t)];
      Eigen::ArrayXXd dh = dh_in[static_cast<std::size_t>(t)].array() + dh_next;
      Eigen::ArrayXXd dct = dc_next + dh * s.o * (1.0 - s.tanh_c.square());
      dpre.leftCols(d) = (dct * s.g * s.i * (1.0 - s.i)).matrix();
      dpre.middleCols(d, d) = (dct * s.c_prev * s.f * (1.0 - s.f)).matrix();
      dpre.middleCols(2 * d, d) = (dct * s.i * (1.0 - s.g.square())).matrix();
      dpre.rightCols(d) = (dh * s.tanh_c * s.o * (1.0 - s.o)).matrix();
      dc_next = dct * s.f;

      gw.noalias() += s.tz.transpose() * dpre;
      gb += dpre.colwise().sum();
      Eigen::MatrixXd dz = cheb_basis_adjoint(dpre * wl.transpose(), lap, cfg.cheb_order, m);
      dx[static_cast<std::size_t>(t)] = dz.leftCols(in);
      dh_next = dz.rightCols(d).array();
    }
    dh_in = std::move(dx);
  }

  if (mode.regularized()) {
    double pen = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      double diff = w[i] - anchor[i];
      pen += diff * diff;
      g.grad[i] += 2.0 * mode.lambda * diff;
    }
    g.loss += mode.lambda * pen;
  }
  if (!std::isfinite(g.loss)) throw DivergenceError("non-finite loss");
  return g;
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ShapeError("learning rate must be nonnegative");
  if (batch_size == 0) throw ShapeError("batch size must be positive");
  if (loss.lambda < 0.0) throw ShapeError("regularization factor must be nonnegative");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"learning_rate", c.learning_rate},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"loss", c.loss.regularized() ? "mse_reg" : "mse"},
       {"lambda", c.loss.lambda},
       {"optimizer", c.optimizer == Optimizer::sgd ? "sgd" : "adaptive_moments"},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  auto loss = j.value("loss", std::string("mse"));
  if (loss != "mse" && loss != "mse_reg") throw ShapeError("unknown loss '" + loss + "'");
  c.loss = {loss == "mse" ? LossMode::Kind::mse : LossMode::Kind::mse_reg, j.value("lambda", 0.0)};
  auto opt = j.value("optimizer", std::string("adaptive_moments"));
  if (opt != "sgd" && opt != "adaptive_moments") throw ShapeError("unknown optimizer '" + opt + "'");
  c.optimizer = opt == "sgd" ? Optimizer::sgd : Optimizer::adaptive_moments;
  c.seed = j.value("seed", d.seed);
}

TrainResult train(Model& model, const BatchSource& batches, const TrainConfig& cfg, std::span<const double> anchor) {
  cfg.validate();
  if (batches.size() == 0) throw ShapeError("no training batches");
  std::vector<double> w = model.weights().values;
  const auto n = w.size();
  std::vector<double> m1(n, 0.0), m2(n, 0.0);
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::uint64_t step = 0;

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(batches.size());
  TrainResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    double count = 0.0;
    for (auto b : order) {
      auto batch = batches.at(b);
      Gradient g;
      try {
        g = backward(model, batch, cfg.loss, anchor);
      } catch (const DivergenceError&) {
        throw DivergenceError("non-finite loss in epoch " + std::to_string(epoch + 1));
      }
      const auto elems = static_cast<double>(batch.y.data.size());
      sum += g.mse * elems;
      count += elems;

      ++step;
      if (cfg.optimizer == Optimizer::sgd) {
        for (std::size_t i = 0; i < n; ++i) w[i] -= cfg.learning_rate * g.grad[i];
      } else {
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        for (std::size_t i = 0; i < n; ++i) {
          m1[i] = beta1 * m1[i] + (1.0 - beta1) * g.grad[i];
          m2[i] = beta2 * m2[i] + (1.0 - beta2) * g.grad[i] * g.grad[i];
          w[i] -= cfg.learning_rate * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + eps);
        }
      }
      model.set_values(w);
    }
    result.epoch_mse.push_back(sum / count);
  }
  return result;
}

double evaluate_mse(const Model& model, const BatchSource& batches) {
  double sum = 0.0, count = 0.0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    auto batch = batches.at(b);
    sum += (model.forward(batch) - batch_targets(batch)).squaredNorm();
    count += static_cast<double>(batch.y.data.size());
  }
  if (count == 0.0) throw ShapeError("no evaluation batches");
  return sum / count;
}

}  // namespace ranwatch::nn
