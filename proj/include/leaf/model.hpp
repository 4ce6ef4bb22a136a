// SPDX-License-Identifier: Apache-2.0
//
// Miniature causal sequence model: token + learned position embeddings,
// pre-norm single-head self-attention blocks with a ReLU feed-forward, and a
// linear output projection. Instantiated at teacher and student capacity.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "leaf/autodiff.hpp"
#include "leaf/tokens.hpp"

namespace leaf {

enum class Capacity { teacher, student };

const char* to_string(Capacity c);
Capacity capacity_from_string(const std::string& s);

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 16;
  int n_layers = 1;
  int max_seq_len = 32;
  int d_ff = 64;
  Capacity capacity = Capacity::student;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Throws unless `teacher` is strictly larger than `student` in both width and
/// depth and the two share a vocabulary.
void validate_pair(const ModelConfig& teacher, const ModelConfig& student);

struct TensorSpec {
  std::string name;
  ad::Shape shape;
};

std::vector<TensorSpec> parameter_layout(const ModelConfig& cfg);

struct ModelParams {
  ModelConfig config;
  std::vector<ad::DenseArray> tensors;  // ordered as parameter_layout(config)

  std::size_t parameter_count() const;
  std::vector<double> flatten() const;
  static ModelParams unflatten(const ModelConfig& cfg, std::span<const double> flat);
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

enum class GradTarget { none, parameters, embeddings };

struct ForwardNodes {
  std::vector<ad::NodeId> params;
  ad::NodeId embeddings;  // gathered token embedding rows [len, d_model]
  ad::NodeId logits;      // [len, vocab]
};

void validate_tokens(const ModelConfig& cfg, std::span<const TokenId> tokens);

ForwardNodes build_forward(ad::Graph& g, const ModelParams& params, std::span<const TokenId> tokens,
                           GradTarget target);

ad::DenseArray forward_logits(const ModelParams& params, std::span<const TokenId> tokens);

/// Mean negative log-likelihood over target positions. target_mask[t] marks
/// token t as a target predicted from the prefix [0, t); position 0 can
/// never be a target.
ad::NodeId nll_node(ad::Graph& g, ad::NodeId logits, std::span<const TokenId> tokens,
                    const std::vector<bool>& target_mask);
double nll_loss(const ModelParams& params, std::span<const TokenId> tokens,
                const std::vector<bool>& target_mask);

/// Argmax with the lowest index winning ties.
std::size_t argmax(std::span<const double> row);

TokenSeq greedy_decode(const ModelParams& params, std::span<const TokenId> prompt, int max_new,
                       TokenId stop_token);

/// True iff greedy decoding from `context` would emit exactly `target` as its
/// next |target| tokens. Equivalent to greedy_decode + compare (by induction
/// over steps) but needs a single forward pass.
bool greedy_matches(const ModelParams& params, std::span<const TokenId> context,
                    std::span<const TokenId> target);

enum class SensitivityReduction { l2, abs_sum };

/// Per-position sensitivity: norm of d(nll over targets)/d(embedding row i)
/// for context positions, 0 elsewhere.
std::vector<double> token_grad_norms(const ModelParams& params, std::span<const TokenId> tokens,
                                     const std::vector<bool>& context_mask,
                                     const std::vector<bool>& target_mask,
                                     SensitivityReduction reduction = SensitivityReduction::l2);

// Checkpoints. JSON round-trips exactly (shortest round-trip double
// formatting); binary stores raw IEEE-754 little-endian doubles.
void save_checkpoint_json(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint_json(const std::filesystem::path& path);
void save_checkpoint_binary(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint_binary(const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);  // dispatch on content

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(const ModelParams& params, AdamConfig cfg);
  void step(ModelParams& params, const std::vector<ad::DenseArray>& grads);
  long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<ad::DenseArray> m_;
  std::vector<ad::DenseArray> v_;
  long t_ = 0;
};

std::vector<ad::DenseArray> zero_grads(const ModelParams& params);
void accumulate(std::vector<ad::DenseArray>& into, const ad::Graph& g, std::span<const ad::NodeId> params,
                double weight);

struct SupervisedExample {
  TokenSeq tokens;
  std::vector<bool> target_mask;
};

struct TrainConfig {
  int epochs = 10;
  int batch_size = 16;
  AdamConfig adam;
  std::uint64_t seed = 0;
};

/// Teacher-forced NLL training with Adam; returns the mean loss per epoch.
/// Batch order is a deterministic function of cfg.seed.
std::vector<double> train_supervised(ModelParams& params, std::span<const SupervisedExample> data,
                                     const TrainConfig& cfg);

}  // namespace leaf
