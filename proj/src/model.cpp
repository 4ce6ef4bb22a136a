// SPDX-License-Identifier: Apache-2.0

#include "leaf/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

#include "leaf/rng.hpp"

namespace leaf {

using ad::DenseArray;
using ad::Graph;
using ad::NodeId;
using json = nlohmann::json;

const char* to_string(Capacity c) { return c == Capacity::teacher ? "teacher" : "student"; }

Capacity capacity_from_string(const std::string& s) {
  if (s == "teacher") return Capacity::teacher;
  if (s == "student") return Capacity::student;
  throw std::invalid_argument("unknown capacity tag '" + s + "'");
}

void ModelConfig::validate() const {
  if (vocab_size < 2) throw std::invalid_argument("ModelConfig: vocab_size must be >= 2");
  if (d_model < 4) throw std::invalid_argument("ModelConfig: d_model must be >= 4");
  if (n_layers < 1) throw std::invalid_argument("ModelConfig: n_layers must be >= 1");
  if (max_seq_len < 2) throw std::invalid_argument("ModelConfig: max_seq_len must be >= 2");
  if (d_ff < 1) throw std::invalid_argument("ModelConfig: d_ff must be >= 1");
}

void validate_pair(const ModelConfig& teacher, const ModelConfig& student) {
  teacher.validate();
  student.validate();
  if (teacher.vocab_size != student.vocab_size) {
    throw std::invalid_argument("teacher and student vocabularies differ");
  }
  if (teacher.d_model <= student.d_model || teacher.n_layers <= student.n_layers) {
    throw std::invalid_argument("teacher must exceed student in both d_model and n_layers");
  }
}

namespace {

// Offsets into ModelParams::tensors.
constexpr std::size_t kTokEmb = 0;
constexpr std::size_t kPosEmb = 1;
constexpr std::size_t kFirstLayer = 2;
constexpr std::size_t kPerLayer = 8;
enum LayerSlot : std::size_t { wq = 0, wk, wv, wo, w1, b1, w2, b2 };

std::size_t layer_tensor(std::size_t layer, LayerSlot slot) { return kFirstLayer + layer * kPerLayer + slot; }
std::size_t out_weight(const ModelConfig& c) { return kFirstLayer + static_cast<std::size_t>(c.n_layers) * kPerLayer; }

}  // namespace

std::vector<TensorSpec> parameter_layout(const ModelConfig& cfg) {
  cfg.validate();
  const auto v = static_cast<std::size_t>(cfg.vocab_size);
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto f = static_cast<std::size_t>(cfg.d_ff);
  std::vector<TensorSpec> out{{"tok_emb", {v, d}}, {"pos_emb", {static_cast<std::size_t>(cfg.max_seq_len), d}}};
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    out.push_back({p + "wq", {d, d}});
    out.push_back({p + "wk", {d, d}});
    out.push_back({p + "wv", {d, d}});
    out.push_back({p + "wo", {d, d}});
    out.push_back({p + "w1", {d, f}});
    out.push_back({p + "b1", {1, f}});
    out.push_back({p + "w2", {f, d}});
    out.push_back({p + "b2", {1, d}});
  }
  out.push_back({"w_out", {d, v}});
  out.push_back({"b_out", {1, v}});
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.size();
  return n;
}

std::vector<double> ModelParams::flatten() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const auto& t : tensors) flat.insert(flat.end(), t.values().begin(), t.values().end());
  return flat;
}

ModelParams ModelParams::unflatten(const ModelConfig& cfg, std::span<const double> flat) {
  ModelParams p{cfg, {}};
  std::size_t at = 0;
  for (const auto& spec : parameter_layout(cfg)) {
    DenseArray t(spec.shape);
    if (at + t.size() > flat.size()) throw std::invalid_argument("parameter list too short for config");
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(at), t.size(), t.values().begin());
    at += t.size();
    if (!t.all_finite()) throw std::invalid_argument("non-finite parameter in " + spec.name);
    p.tensors.push_back(std::move(t));
  }
  if (at != flat.size()) throw std::invalid_argument("parameter list longer than config requires");
  return p;
}

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  const double a = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  ModelParams p{cfg, {}};
  for (const auto& spec : parameter_layout(cfg)) {
    DenseArray t(spec.shape);
    for (double& v : t.values()) v = rng.uniform(-a, a);
    p.tensors.push_back(std::move(t));
  }
  return p;
}

void validate_tokens(const ModelConfig& cfg, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw std::invalid_argument("empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw std::invalid_argument("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                                std::to_string(cfg.max_seq_len));
  }
  for (TokenId t : tokens) {
    if (t < 0 || t >= cfg.vocab_size) {
      throw std::invalid_argument("token id " + std::to_string(t) + " outside vocabulary of size " +
                                  std::to_string(cfg.vocab_size));
    }
  }
}

ForwardNodes build_forward(Graph& g, const ModelParams& params, std::span<const TokenId> tokens,
                           GradTarget target) {
  const ModelConfig& cfg = params.config;
  validate_tokens(cfg, tokens);
  const std::size_t n = tokens.size();

  ForwardNodes out;
  const bool param_grad = target == GradTarget::parameters;
  out.params.reserve(params.tensors.size());
  for (const auto& t : params.tensors) out.params.push_back(g.input(t, param_grad));
  auto P = [&](std::size_t i) { return out.params[i]; };

  std::vector<std::size_t> ids(tokens.begin(), tokens.end());
  if (target == GradTarget::embeddings) {
    const DenseArray& table = params.tensors[kTokEmb];
    DenseArray rows({n, table.cols()});
    for (std::size_t i = 0; i < n; ++i) {
      auto src = table.row(ids[i]);
      std::copy(src.begin(), src.end(), rows.row(i).begin());
    }
    out.embeddings = g.input(std::move(rows), true);
  } else {
    out.embeddings = g.gather_rows(P(kTokEmb), ids);
  }

  std::vector<std::size_t> positions(n);
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  NodeId x = g.add(out.embeddings, g.gather_rows(P(kPosEmb), positions));

  const double att_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  for (std::size_t l = 0; l < static_cast<std::size_t>(cfg.n_layers); ++l) {
    const NodeId h = g.layer_norm(x);
    const NodeId q = g.matmul(h, P(layer_tensor(l, wq)));
    const NodeId k = g.matmul(h, P(layer_tensor(l, wk)));
    const NodeId v = g.matmul(h, P(layer_tensor(l, wv)));
    const NodeId scores = g.scale(g.matmul(q, g.transpose(k)), att_scale);
    const NodeId attn = g.softmax_rows(scores, /*causal=*/true);
    x = g.add(x, g.matmul(g.matmul(attn, v), P(layer_tensor(l, wo))));

    const NodeId h2 = g.layer_norm(x);
    const NodeId hidden = g.relu(g.add(g.matmul(h2, P(layer_tensor(l, w1))), P(layer_tensor(l, b1))));
    x = g.add(x, g.add(g.matmul(hidden, P(layer_tensor(l, w2))), P(layer_tensor(l, b2))));
  }
  const NodeId hf = g.layer_norm(x);
  const std::size_t wout = out_weight(cfg);
  out.logits = g.add(g.matmul(hf, P(wout)), P(wout + 1));
  return out;
}

DenseArray forward_logits(const ModelParams& params, std::span<const TokenId> tokens) {
  Graph g;
  const ForwardNodes f = build_forward(g, params, tokens, GradTarget::none);
  return g.value(f.logits);
}

NodeId nll_node(Graph& g, NodeId logits, std::span<const TokenId> tokens, const std::vector<bool>& target_mask) {
  const std::size_t n = tokens.size();
  if (target_mask.size() != n) throw std::invalid_argument("nll: target mask length differs from sequence");
  if (n > 0 && target_mask[0]) throw std::invalid_argument("nll: position 0 cannot be a target");
  const auto count = static_cast<std::size_t>(std::count(target_mask.begin(), target_mask.end(), true));
  if (count == 0) throw std::invalid_argument("nll: empty target mask");

  const std::size_t vocab = g.value(logits).cols();
  DenseArray weights({n - 1, vocab});
  for (std::size_t t = 1; t < n; ++t) {
    if (target_mask[t]) weights.at(t - 1, static_cast<std::size_t>(tokens[t])) = 1.0 / static_cast<double>(count);
  }
  const NodeId logp = g.log_softmax_rows(g.slice_rows(logits, 0, n - 1));
  return g.scale(g.sum(g.mul(g.constant(std::move(weights)), logp)), -1.0);
}

double nll_loss(const ModelParams& params, std::span<const TokenId> tokens, const std::vector<bool>& target_mask) {
  Graph g;
  const ForwardNodes f = build_forward(g, params, tokens, GradTarget::none);
  return g.value(nll_node(g, f.logits, tokens, target_mask))[0];
}

std::size_t argmax(std::span<const double> row) {
  return static_cast<std::size_t>(std::distance(row.begin(), std::max_element(row.begin(), row.end())));
}

TokenSeq greedy_decode(const ModelParams& params, std::span<const TokenId> prompt, int max_new, TokenId stop_token) {
  if (prompt.empty()) throw std::invalid_argument("greedy_decode: empty prompt");
  TokenSeq seq(prompt.begin(), prompt.end());
  for (int step = 0; step < max_new; ++step) {
    if (seq.size() >= static_cast<std::size_t>(params.config.max_seq_len)) break;
    const DenseArray logits = forward_logits(params, seq);
    const auto next = static_cast<TokenId>(argmax(logits.row(logits.rows() - 1)));
    seq.push_back(next);
    if (next == stop_token) break;
  }
  return seq;
}

bool greedy_matches(const ModelParams& params, std::span<const TokenId> context, std::span<const TokenId> target) {
  if (context.empty()) throw std::invalid_argument("greedy_matches: empty context");
  if (target.empty()) return true;
  if (context.size() + target.size() > static_cast<std::size_t>(params.config.max_seq_len)) return false;
  TokenSeq seq(context.begin(), context.end());
  seq.insert(seq.end(), target.begin(), target.end());
  const DenseArray logits = forward_logits(params, seq);
  for (std::size_t j = 0; j < target.size(); ++j) {
    if (static_cast<TokenId>(argmax(logits.row(context.size() + j - 1))) != target[j]) return false;
  }
  return true;
}

std::vector<double> token_grad_norms(const ModelParams& params, std::span<const TokenId> tokens,
                                     const std::vector<bool>& context_mask, const std::vector<bool>& target_mask,
                                     SensitivityReduction reduction) {
  const std::size_t n = tokens.size();
  if (context_mask.size() != n) throw std::invalid_argument("token_grad_norms: context mask length mismatch");
  for (std::size_t i = 0; i < n; ++i) {
    if (context_mask[i] && target_mask.at(i)) {
      throw std::invalid_argument("token_grad_norms: position " + std::to_string(i) + " is both context and target");
    }
  }
  Graph g;
  const ForwardNodes f = build_forward(g, params, tokens, GradTarget::embeddings);
  const NodeId loss = nll_node(g, f.logits, tokens, target_mask);
  g.backward(loss);
  const DenseArray& grad = g.grad(f.embeddings);

  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!context_mask[i]) continue;
    double acc = 0.0;
    for (double v : grad.row(i)) acc += reduction == SensitivityReduction::l2 ? v * v : std::abs(v);
    out[i] = reduction == SensitivityReduction::l2 ? std::sqrt(acc) : acc;
  }
  return out;
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr const char* kJsonFormat = "leaf-checkpoint";
constexpr int kCheckpointVersion = 1;
constexpr char kBinaryMagic[8] = {'L', 'E', 'A', 'F', 'C', 'K', 'P', 'T'};

json config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_layers", c.n_layers},
          {"max_seq_len", c.max_seq_len}, {"d_ff", c.d_ff}, {"capacity", to_string(c.capacity)}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.capacity = capacity_from_string(j.at("capacity").get<std::string>());
  c.validate();
  return c;
}

template <typename T>
void write_le(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little, "binary checkpoints assume a little-endian host");
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("binary checkpoint truncated");
  return v;
}

}  // namespace

void save_checkpoint_json(const ModelParams& params, const std::filesystem::path& path) {
  json j = {{"format", kJsonFormat},
            {"version", kCheckpointVersion},
            {"config", config_to_json(params.config)},
            {"params", params.flatten()}};
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os << j.dump() << '\n';
}

ModelParams load_checkpoint_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read checkpoint " + path.string());
  const json j = json::parse(is);
  if (j.value("format", "") != kJsonFormat) throw std::runtime_error(path.string() + ": not a leaf checkpoint");
  if (j.at("version").get<int>() != kCheckpointVersion) {
    throw std::runtime_error(path.string() + ": unsupported checkpoint version");
  }
  const auto flat = j.at("params").get<std::vector<double>>();
  return ModelParams::unflatten(config_from_json(j.at("config")), flat);
}

void save_checkpoint_binary(const ModelParams& params, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kBinaryMagic, sizeof(kBinaryMagic));
  write_le<std::uint32_t>(os, kCheckpointVersion);
  const ModelConfig& c = params.config;
  for (int v : {c.vocab_size, c.d_model, c.n_layers, c.max_seq_len, c.d_ff, static_cast<int>(c.capacity)}) {
    write_le<std::int32_t>(os, v);
  }
  const auto flat = params.flatten();
  write_le<std::uint64_t>(os, flat.size());
  for (double v : flat) write_le<double>(os, v);
}

ModelParams load_checkpoint_binary(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint " + path.string());
  char magic[sizeof(kBinaryMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kBinaryMagic, sizeof(magic)) != 0) {
    throw std::runtime_error(path.string() + ": bad checkpoint magic");
  }
  if (read_le<std::uint32_t>(is) != kCheckpointVersion) {
    throw std::runtime_error(path.string() + ": unsupported checkpoint version");
  }
  ModelConfig c;
  c.vocab_size = read_le<std::int32_t>(is);
  c.d_model = read_le<std::int32_t>(is);
  c.n_layers = read_le<std::int32_t>(is);
  c.max_seq_len = read_le<std::int32_t>(is);
  c.d_ff = read_le<std::int32_t>(is);
  const auto cap = read_le<std::int32_t>(is);
  if (cap != 0 && cap != 1) throw std::runtime_error(path.string() + ": bad capacity tag");
  c.capacity = static_cast<Capacity>(cap);
  c.validate();
  const auto count = read_le<std::uint64_t>(is);
  std::vector<double> flat(count);
  for (auto& v : flat) v = read_le<double>(is);
  return ModelParams::unflatten(c, flat);
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint " + path.string());
  char head[sizeof(kBinaryMagic)] = {};
  is.read(head, sizeof(head));
  if (is.gcount() == sizeof(head) && std::memcmp(head, kBinaryMagic, sizeof(head)) == 0) {
    return load_checkpoint_binary(path);
  }
  return load_checkpoint_json(path);
}

// ------------------------------------------------------------------ training

Adam::Adam(const ModelParams& params, AdamConfig cfg) : cfg_(cfg), m_(zero_grads(params)), v_(zero_grads(params)) {}

void Adam::step(ModelParams& params, const std::vector<DenseArray>& grads) {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.tensors.size(); ++k) {
    auto p = params.tensors[k].values();
    auto g = grads[k].values();
    auto m = m_[k].values();
    auto v = v_[k].values();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      p[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
    }
  }
}

std::vector<DenseArray> zero_grads(const ModelParams& params) {
  std::vector<DenseArray> out;
  out.reserve(params.tensors.size());
  for (const auto& t : params.tensors) out.emplace_back(t.shape());
  return out;
}

void accumulate(std::vector<DenseArray>& into, const Graph& g, std::span<const NodeId> params, double weight) {
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto dst = into[k].values();
    auto src = g.grad(params[k]).values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += weight * src[i];
  }
}

std::vector<double> train_supervised(ModelParams& params, std::span<const SupervisedExample> data,
                                     const TrainConfig& cfg) {
  if (cfg.batch_size < 1) throw std::invalid_argument("train_supervised: batch_size must be >= 1");
  std::vector<double> history;
  if (data.empty()) return history;
  Adam opt(params, cfg.adam);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto batch = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t stop = std::min(order.size(), start + batch);
      const double weight = 1.0 / static_cast<double>(stop - start);
      auto grads = zero_grads(params);
      for (std::size_t b = start; b < stop; ++b) {
        const SupervisedExample& ex = data[order[b]];
        Graph g;
        const ForwardNodes f = build_forward(g, params, ex.tokens, GradTarget::parameters);
        const NodeId loss = nll_node(g, f.logits, ex.tokens, ex.target_mask);
        g.backward(loss);
        accumulate(grads, g, f.params, weight);
        epoch_loss += g.value(loss)[0];
      }
      opt.step(params, grads);
    }
    history.push_back(epoch_loss / static_cast<double>(data.size()));
  }
  return history;
}

}  // namespace leaf
