#pragma once

// Structure-aware encoder-decoder.
//
//   encode     transformer encoder; per attention head m the inductor measures
//              o^c (per gap) and o^d (per token) from h* = Conv(h^1), then
//              derives the boundary distribution and p_d = A_m
//   broadcast  K-best forests over the heads, one graph-attention layer per
//              forest, readout with the decoder state as query, fused into
//              the cross-attention memory
//   decode     causal decoder with tied output embedding

#include <Eigen/Dense>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <vector>

#include "structie/forest.hpp"
#include "structie/optim.hpp"
#include "structie/rng.hpp"
#include "structie/synstruct.hpp"
#include "structie/tensor.hpp"

namespace structie {

struct LossWeights {
  double lm = 1.0;
  double dep = 1.0;
  double con = 1.0;
  double sdr = 1.0;
};

struct ModelConfig {
  int vocab = 0;
  int d_model = 64;
  int layers = 2;
  int heads = 4;
  int ffn = 0;  // 0 selects 2 * d_model
  int kbest = 3;
  int max_len = 64;
  HeadMode head_mode = HeadMode::kMarginal;
  DistributionOptions distribution;
  /// Inject forest features into decoding.
  bool use_sb = true;
  /// +1 penalizes overlap between heads, -1 is the literal printed sign.
  double sdr_sign = 1.0;
  /// Literal all-pairs dependency objective instead of the induced-head target.
  bool dep_all_pairs = false;
  LossWeights weights;
  double mask_rate = 0.15;
  double mean_span = 3.0;
  double init_scale = 1.0;

  int ffn_width() const { return ffn > 0 ? ffn : 2 * d_model; }
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// ---------------------------------------------------------------------------
// Differentiable structure operations

/// [left | right] boundary probabilities (n x 2n) from oc (1 x n-1) and od (1 x n).
Tensor boundary_op(const Tensor& oc, const Tensor& od, const DistributionOptions& options);
/// p_d (n x n) from the boundary tensor of boundary_op and head scores (1 x n).
Tensor head_op(const Tensor& bounds, const Tensor& scores, HeadMode mode);

/// Additive adjustments to the measurements, shared by every head.
struct ProfileActions {
  std::vector<double> oc;  // n - 1
  std::vector<double> od;  // n
};

struct HeadStructure {
  Tensor oc;      // 1 x (n-1), adjusted when actions were applied
  Tensor od;      // 1 x n
  Tensor scores;  // 1 x n
  Tensor bounds;  // n x 2n
  Tensor pd;      // n x n
  DistanceProfile profile;
  BoundaryDistribution bounds_value;
  Eigen::MatrixXd pd_value;
};

struct EncoderOutput {
  Tensor h1;     // all input rows
  Tensor hL;     // all input rows
  Tensor hstar;  // sentence rows
  int offset = 0;
  int n = 0;
  std::vector<HeadStructure> heads;

  std::vector<DistanceProfile> profiles() const;
  std::vector<Eigen::MatrixXd> head_matrices() const;
};

/// Forests plus their graph-attention node states.
struct ForestGraph {
  DepForest dep;
  ConForest con;
  Tensor dep_nodes;  // n x d
  Tensor con_nodes;  // |spans| x d
};

/// Masked copy of a sentence: contiguous spans replaced by sentinel ids.
struct Corruption {
  std::vector<int> input;
  int masked = 0;
};
Corruption corrupt(std::span<const int> ids, double rate, double mean_span, int first_sentinel, int sentinels,
                   Rng& rng);

struct PosttrainLosses {
  Tensor lm;
  Tensor dep;
  Tensor con;
  Tensor sdr;
  Tensor total;
};

class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  /// Structure is induced over input rows [offset, offset + n).
  EncoderOutput encode(std::span<const int> ids, int offset, int n, const ProfileActions* actions = nullptr) const;

  /// (Re)computes the per-head structures of an encoding, optionally under
  /// adjusted measurements; the hidden states are left untouched.
  void induce(EncoderOutput& enc, const ProfileActions* actions) const;

  ForestGraph build_graph(const EncoderOutput& enc) const;

  /// Log-probabilities (T x vocab) of the next token after every prefix
  /// position; `graph` may be null (no broadcasting).
  Tensor decoder_log_probs(const EncoderOutput& enc, const ForestGraph* graph, std::span<const int> prefix) const;

  /// Next-token distribution (1 x vocab) after the prefix (which starts with bos).
  Tensor next_token_distribution(const EncoderOutput& enc, const ForestGraph* graph,
                                 std::span<const int> prefix) const;

  /// Teacher-forced -log p(target, eos | input).
  Tensor sequence_nll(const EncoderOutput& enc, const ForestGraph* graph, std::span<const int> target) const;

  std::vector<int> greedy_decode(const EncoderOutput& enc, const ForestGraph* graph, int max_steps) const;

  Tensor loss_dep(const EncoderOutput& enc) const;
  Tensor loss_con(const EncoderOutput& enc, const ForestGraph& graph) const;
  Tensor loss_sdr(const EncoderOutput& enc) const;

  /// Corrupt, encode, reconstruct; structure losses on the corrupted encoding.
  PosttrainLosses posttrain_losses(std::span<const int> sentence, Rng& rng) const;

  /// Graph used for decoding under the current configuration (null when SB is off).
  const ForestGraph* decoding_graph(const std::optional<ForestGraph>& graph) const;

 private:
  struct Attention {
    Tensor wq, wk, wv, wo;
  };
  struct Norm {
    Tensor gain, bias;
  };
  struct Feedforward {
    Tensor w1, b1, w2, b2;
  };
  struct EncoderLayer {
    Norm ln1, ln2;
    Attention attn;
    Feedforward ff;
  };
  struct DecoderLayer {
    Norm ln1, ln2, ln3;
    Attention self_attn, cross_attn;
    Feedforward ff;
    Tensor sb_query_dep, sb_query_con, sb_proj;
  };
  struct InductorHead {
    Tensor w, vc, vd, q;
  };

  Attention make_attention(const std::string& prefix, Rng& rng);
  Norm make_norm(const std::string& prefix);
  Feedforward make_ff(const std::string& prefix, Rng& rng);

  Tensor embed(std::span<const int> ids) const;
  Tensor attend(const Attention& a, const Tensor& x, const Tensor& memory, const Tensor& mask) const;
  Tensor fused_cross_attend(const Attention& a, const Tensor& e, const Tensor& hL, const Tensor& alpha) const;
  Tensor feedforward(const Feedforward& f, const Tensor& x) const;
  Tensor norm(const Norm& n, const Tensor& x) const;
  Tensor gat(const Tensor& nodes, std::span<const Index2> edges, const Tensor& log_weights, const Tensor& w_in,
             const Tensor& a_src, const Tensor& a_dst) const;

  ModelConfig config_;
  ParameterStore params_;
  Tensor emb_, out_bias_;
  Eigen::MatrixXd positions_;
  std::vector<EncoderLayer> enc_;
  std::vector<DecoderLayer> dec_;
  Norm enc_final_, dec_final_;
  Tensor conv_kernel_, conv_bias_;
  std::vector<InductorHead> inductor_;
  Tensor gat_dep_in_, gat_dep_src_, gat_dep_dst_;
  Tensor gat_con_in_, gat_con_src_, gat_con_dst_;
};

}  // namespace structie
