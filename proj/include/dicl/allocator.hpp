#pragma once

// Per-client budget allocator: a three-layer perceptron
//   linear(dim -> W) -> ReLU -> linear(W -> W) -> ReLU -> linear(W -> classes) -> softmax
// over frozen query embeddings, trained with minibatch SGD on cross-entropy.
// Gradients are derived by hand for this fixed architecture.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "dicl/embedder.hpp"
#include "dicl/error.hpp"
#include "dicl/oracle.hpp"
#include "dicl/seeding.hpp"

namespace dicl {

struct TrainConfig {
  std::size_t epochs = 800;
  double learning_rate = 0.003;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  double validation_fraction = 0.0;
  std::size_t width = 300;

  void validate() const {
    if (epochs == 0) throw ValidationError("epochs must be > 0");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
      throw ValidationError("learning_rate must be finite and >= 0");
    if (batch_size == 0) throw ValidationError("batch_size must be >= 1");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
      throw ValidationError("validation_fraction must be in [0, 1)");
    if (width == 0) throw ValidationError("width must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},           {"learning_rate", c.learning_rate},
       {"batch_size", c.batch_size},   {"seed", c.seed},
       {"validation_fraction", c.validation_fraction}, {"width", c.width},
       {"optimizer", "sgd"}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
  c.width = j.value("width", c.width);
}

// Weights are stored (out x in) so a layer computes W * x + b.
struct AllocatorModel {
  std::size_t client_id = 0;
  Eigen::MatrixXd w1, w2, w3;
  Eigen::VectorXd b1, b2, b3;

  std::size_t dim() const noexcept { return static_cast<std::size_t>(w1.cols()); }
  std::size_t width() const noexcept { return static_cast<std::size_t>(w1.rows()); }
  std::size_t num_classes() const noexcept { return static_cast<std::size_t>(w3.rows()); }

  std::size_t parameter_count() const noexcept {
    return static_cast<std::size_t>(w1.size() + b1.size() + w2.size() + b2.size() + w3.size() + b3.size());
  }

  bool operator==(const AllocatorModel& o) const {
    return client_id == o.client_id && w1 == o.w1 && w2 == o.w2 && w3 == o.w3 && b1 == o.b1 &&
           b2 == o.b2 && b3 == o.b3;
  }
};

// Flat parameter layout, shared by the model file blob and the gradient
// checker: layer 1 weights as [dim][W] (input-major), layer 1 bias [W],
// layer 2 weights [W][W], bias [W], layer 3 weights [W][classes], bias
// [classes].
inline std::vector<double> flatten(const Eigen::MatrixXd& w1, const Eigen::VectorXd& b1,
                                   const Eigen::MatrixXd& w2, const Eigen::VectorXd& b2,
                                   const Eigen::MatrixXd& w3, const Eigen::VectorXd& b3) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(w1.size() + b1.size() + w2.size() + b2.size() + w3.size() + b3.size()));
  auto put = [&](const Eigen::MatrixXd& w, const Eigen::VectorXd& b) {
    for (Eigen::Index i = 0; i < w.cols(); ++i)
      for (Eigen::Index o = 0; o < w.rows(); ++o) out.push_back(w(o, i));
    for (Eigen::Index o = 0; o < b.size(); ++o) out.push_back(b(o));
  };
  put(w1, b1);
  put(w2, b2);
  put(w3, b3);
  return out;
}

inline std::vector<double> parameters(const AllocatorModel& m) {
  return flatten(m.w1, m.b1, m.w2, m.b2, m.w3, m.b3);
}

inline void set_parameters(AllocatorModel& m, std::span<const double> flat) {
  if (flat.size() != m.parameter_count())
    throw ValidationError("parameter blob has " + std::to_string(flat.size()) + " values, model needs " +
                          std::to_string(m.parameter_count()));
  std::size_t pos = 0;
  auto take = [&](Eigen::MatrixXd& w, Eigen::VectorXd& b) {
    for (Eigen::Index i = 0; i < w.cols(); ++i)
      for (Eigen::Index o = 0; o < w.rows(); ++o) w(o, i) = flat[pos++];
    for (Eigen::Index o = 0; o < b.size(); ++o) b(o) = flat[pos++];
  };
  take(m.w1, m.b1);
  take(m.w2, m.b2);
  take(m.w3, m.b3);
}

inline AllocatorModel init_model(std::size_t dim, std::size_t width, std::size_t num_classes, std::uint64_t seed,
                                 std::size_t client_id = 0) {
  if (dim == 0 || width == 0 || num_classes == 0)
    throw ValidationError("allocator dimensions must be positive");
  Rng rng(seed);
  auto layer = [&](std::size_t out, std::size_t in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Eigen::MatrixXd w(out, in);
    // Column-major fill order is part of the determinism contract.
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      double x;
      do x = u(rng);
      while (x == -bound);
      w.data()[i] = x;
    }
    return w;
  };
  AllocatorModel m;
  m.client_id = client_id;
  m.w1 = layer(width, dim);
  m.b1 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(width));
  m.w2 = layer(width, width);
  m.b2 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(width));
  m.w3 = layer(num_classes, width);
  m.b3 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(num_classes));
  return m;
}

namespace detail {

inline Eigen::Map<const Eigen::VectorXd> as_vector(std::span<const double> e) {
  return {e.data(), static_cast<Eigen::Index>(e.size())};
}

inline void check_input(const AllocatorModel& m, std::size_t n) {
  if (n != m.dim())
    throw ValidationError("allocator expects " + std::to_string(m.dim()) + "-dimensional input, got " +
                          std::to_string(n));
}

}  // namespace detail

inline Eigen::VectorXd logits(const AllocatorModel& m, std::span<const double> e) {
  detail::check_input(m, e.size());
  const Eigen::VectorXd h1 = (m.w1 * detail::as_vector(e) + m.b1).cwiseMax(0.0);
  const Eigen::VectorXd h2 = (m.w2 * h1 + m.b2).cwiseMax(0.0);
  return m.w3 * h2 + m.b3;
}

// Softmax with max-shift, so large logits never overflow.
inline std::vector<double> softmax(const Eigen::VectorXd& z) {
  const double shift = z.maxCoeff();
  Eigen::VectorXd p = (z.array() - shift).exp();
  p /= p.sum();
  return {p.data(), p.data() + p.size()};
}

inline std::vector<double> forward(const AllocatorModel& m, std::span<const double> e) {
  return softmax(logits(m, e));
}

struct Gradients {
  Eigen::MatrixXd w1, w2, w3;
  Eigen::VectorXd b1, b2, b3;

  std::vector<double> flat() const { return flatten(w1, b1, w2, b2, w3, b3); }
};

// Mean cross-entropy over the batch columns of `inputs` (dim x B), computed
// from logits via log-sum-exp. Fills `grad` when non-null.
inline double loss_and_gradients(const AllocatorModel& m, const Eigen::MatrixXd& inputs,
                                 std::span<const std::size_t> labels, Gradients* grad) {
  detail::check_input(m, static_cast<std::size_t>(inputs.rows()));
  const Eigen::Index batch = inputs.cols();
  if (batch == 0 || static_cast<std::size_t>(batch) != labels.size())
    throw ValidationError("batch inputs and labels disagree in size");

  const Eigen::MatrixXd z1 = (m.w1 * inputs).colwise() + m.b1;
  const Eigen::MatrixXd h1 = z1.cwiseMax(0.0);
  const Eigen::MatrixXd z2 = (m.w2 * h1).colwise() + m.b2;
  const Eigen::MatrixXd h2 = z2.cwiseMax(0.0);
  const Eigen::MatrixXd z3 = (m.w3 * h2).colwise() + m.b3;

  const Eigen::RowVectorXd shift = z3.colwise().maxCoeff();
  const Eigen::MatrixXd expz = (z3.rowwise() - shift).array().exp();
  const Eigen::RowVectorXd sums = expz.colwise().sum();

  double loss = 0.0;
  for (Eigen::Index b = 0; b < batch; ++b) {
    const auto y = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(b)]);
    if (y >= z3.rows()) throw ValidationError("label exceeds allocator class count");
    loss += shift(b) + std::log(sums(b)) - z3(y, b);
  }
  loss /= static_cast<double>(batch);
  if (!grad) return loss;

  Eigen::MatrixXd dz3 = expz.array().rowwise() / sums.array();
  for (Eigen::Index b = 0; b < batch; ++b) dz3(static_cast<Eigen::Index>(labels[static_cast<std::size_t>(b)]), b) -= 1.0;
  dz3 /= static_cast<double>(batch);

  grad->w3 = dz3 * h2.transpose();
  grad->b3 = dz3.rowwise().sum();
  const Eigen::MatrixXd dz2 = ((m.w3.transpose() * dz3).array() * (z2.array() > 0.0).cast<double>()).matrix();
  grad->w2 = dz2 * h1.transpose();
  grad->b2 = dz2.rowwise().sum();
  const Eigen::MatrixXd dz1 = ((m.w2.transpose() * dz2).array() * (z1.array() > 0.0).cast<double>()).matrix();
  grad->w1 = dz1 * inputs.transpose();
  grad->b1 = dz1.rowwise().sum();
  return loss;
}

// The slice of a budget dataset that supervises one client's allocator.
struct ClientExamples {
  Eigen::MatrixXd inputs;  // dim x N
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
};

inline ClientExamples client_examples(const BudgetDataset& b, std::size_t client) {
  if (client >= b.num_clients)
    throw ValidationError("client " + std::to_string(client) + " out of range for " +
                          std::to_string(b.num_clients) + " clients");
  ClientExamples out;
  out.num_classes = b.num_classes();
  out.inputs.resize(static_cast<Eigen::Index>(b.dim()), static_cast<Eigen::Index>(b.records.size()));
  for (std::size_t j = 0; j < b.records.size(); ++j) {
    out.inputs.col(static_cast<Eigen::Index>(j)) = detail::as_vector(b.records[j].embedding);
    out.labels.push_back(b.records[j].classes.at(client));
  }
  return out;
}

struct TrainResult {
  AllocatorModel model;
  std::vector<double> epoch_losses;       // mean training loss per epoch
  std::vector<double> validation_losses;  // empty without a validation split
  std::size_t selected_epoch = 0;         // 1-based epoch of the returned model
};

inline TrainResult train(const ClientExamples& data, const TrainConfig& cfg, std::size_t client_id = 0) {
  cfg.validate();
  if (data.size() == 0) throw ValidationError("cannot train an allocator on an empty dataset");
  for (std::size_t y : data.labels)
    if (y >= data.num_classes) throw ValidationError("budget class label exceeds num_classes");

  const auto dim = static_cast<std::size_t>(data.inputs.rows());
  TrainResult result;
  result.model = init_model(dim, cfg.width, data.num_classes, derive_seed(cfg.seed, "init", client_id), client_id);
  AllocatorModel& m = result.model;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::size_t> val_idx;
  if (cfg.validation_fraction > 0.0 && data.size() > 1) {
    Rng split_rng(derive_seed(cfg.seed, "validation", client_id));
    std::shuffle(order.begin(), order.end(), split_rng);
    auto n_val = static_cast<std::size_t>(std::llround(cfg.validation_fraction * static_cast<double>(data.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, data.size() - 1);
    val_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    order.erase(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::sort(val_idx.begin(), val_idx.end());
    std::sort(order.begin(), order.end());
  }
  const std::vector<std::size_t> train_idx = order;

  Eigen::MatrixXd val_inputs(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(val_idx.size()));
  std::vector<std::size_t> val_labels;
  for (std::size_t j = 0; j < val_idx.size(); ++j) {
    val_inputs.col(static_cast<Eigen::Index>(j)) = data.inputs.col(static_cast<Eigen::Index>(val_idx[j]));
    val_labels.push_back(data.labels[val_idx[j]]);
  }

  AllocatorModel best = m;
  double best_val = std::numeric_limits<double>::infinity();
  Gradients g;
  Eigen::MatrixXd batch_inputs;
  std::vector<std::size_t> batch_labels;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle", epoch * 1000003ULL + client_id));
    order = train_idx;
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      batch_inputs.resize(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(stop - start));
      batch_labels.clear();
      for (std::size_t j = start; j < stop; ++j) {
        batch_inputs.col(static_cast<Eigen::Index>(j - start)) = data.inputs.col(static_cast<Eigen::Index>(order[j]));
        batch_labels.push_back(data.labels[order[j]]);
      }
      const double loss = loss_and_gradients(m, batch_inputs, batch_labels, &g);
      if (!std::isfinite(loss))
        throw Error("allocator training diverged for client " + std::to_string(client_id) + ": loss " +
                    std::to_string(loss) + " at epoch " + std::to_string(epoch + 1) + ", batch starting at " +
                    std::to_string(start) + " (learning rate " + std::to_string(cfg.learning_rate) + ")");
      epoch_loss += loss * static_cast<double>(stop - start);
      m.w1 -= cfg.learning_rate * g.w1;
      m.b1 -= cfg.learning_rate * g.b1;
      m.w2 -= cfg.learning_rate * g.w2;
      m.b2 -= cfg.learning_rate * g.b2;
      m.w3 -= cfg.learning_rate * g.w3;
      m.b3 -= cfg.learning_rate * g.b3;
    }
    result.epoch_losses.push_back(epoch_loss / static_cast<double>(order.size()));

    if (!val_idx.empty()) {
      const double val = loss_and_gradients(m, val_inputs, val_labels, nullptr);
      result.validation_losses.push_back(val);
      if (val < best_val) {
        best_val = val;
        best = m;
        result.selected_epoch = epoch + 1;
      }
    }
  }
  if (val_idx.empty()) {
    result.selected_epoch = cfg.epochs;
  } else {
    m = std::move(best);
  }
  return result;
}

// Argmax over logits, lowest index on ties.
inline std::size_t predict_class(const AllocatorModel& m, std::span<const double> e) {
  const Eigen::VectorXd z = logits(m, e);
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < z.size(); ++i)
    if (z(i) > z(best)) best = i;
  return static_cast<std::size_t>(best);
}

inline std::size_t predict_budget(const AllocatorModel& m, std::span<const double> e, std::size_t delta) {
  return dequantize(predict_class(m, e), delta);
}

// ---------------------------------------------------------------------------
// Persistence: <base>.json metadata plus <base>.bin, the little-endian f64
// parameter blob in the `flatten` layout.
// ---------------------------------------------------------------------------

struct ModelMetadata {
  std::size_t delta = 1;
  TrainConfig train_config;
  std::size_t selected_epoch = 0;
};

inline void save_model(const AllocatorModel& m, const ModelMetadata& meta, const std::filesystem::path& base) {
  auto json_path = base;
  json_path += ".json";
  auto bin_path = base;
  bin_path += ".bin";
  nlohmann::json j = {{"schema_version", 1},
                      {"client_id", m.client_id},
                      {"dim", m.dim()},
                      {"width", m.width()},
                      {"num_classes", m.num_classes()},
                      {"delta", meta.delta},
                      {"train_config", meta.train_config},
                      {"selected_epoch", meta.selected_epoch},
                      {"init", "uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero bias"},
                      {"layout", "w1[dim][width] b1[width] w2[width][width] b2[width] w3[width][classes] b3[classes]"},
                      {"parameter_count", m.parameter_count()}};
  std::ofstream meta_out(json_path);
  if (!meta_out) throw Error("cannot write model metadata " + json_path.string());
  meta_out << j.dump(2) << '\n';
  std::ofstream blob(bin_path, std::ios::binary);
  if (!blob) throw Error("cannot write model parameters " + bin_path.string());
  for (double x : parameters(m)) detail::write_le<double>(blob, x);
}

inline std::pair<AllocatorModel, ModelMetadata> load_model(const std::filesystem::path& base) {
  auto json_path = base;
  json_path += ".json";
  auto bin_path = base;
  bin_path += ".bin";
  std::ifstream meta_in(json_path);
  if (!meta_in) throw ValidationError("cannot open model metadata " + json_path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(meta_in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad model metadata: ") + e.what(), 0);
  }
  ModelMetadata meta;
  meta.delta = j.at("delta").get<std::size_t>();
  meta.train_config = j.at("train_config").get<TrainConfig>();
  meta.selected_epoch = j.value("selected_epoch", std::size_t{0});
  AllocatorModel m = init_model(j.at("dim").get<std::size_t>(), j.at("width").get<std::size_t>(),
                                j.at("num_classes").get<std::size_t>(), 0, j.at("client_id").get<std::size_t>());
  std::ifstream blob(bin_path, std::ios::binary);
  if (!blob) throw ValidationError("cannot open model parameters " + bin_path.string());
  std::vector<double> flat(m.parameter_count());
  for (double& x : flat) x = detail::read_le<double>(blob);
  if (blob.peek() != std::char_traits<char>::eof()) throw ParseError("trailing bytes in parameter blob", 0);
  for (double x : flat)
    if (!std::isfinite(x)) throw ValidationError("model parameters must be finite");
  set_parameters(m, flat);
  return {std::move(m), meta};
}

}  // namespace dicl
