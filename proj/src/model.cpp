#include "structie/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "structie/data.hpp"
#include "structie/error.hpp"

namespace structie {

namespace {

constexpr double kMasked = -1e30;
constexpr double kLogFloor = 1e-12;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMat> view(const Tensor& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

Tensor safe_log(const Tensor& t) { return log(add_scalar(t, kLogFloor)); }

Tensor causal_mask(std::size_t t) {
  std::vector<double> m(t * t, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = i + 1; j < t; ++j) m[i * t + j] = kMasked;
  }
  return Tensor::constant({t, t}, std::move(m));
}

/// Constant |spans| x n matrix averaging the rows of each span.
Tensor span_averager(const ConForest& forest, int n) {
  const std::size_t rows = forest.spans.size();
  std::vector<double> a(rows * static_cast<std::size_t>(n), 0.0);
  for (std::size_t k = 0; k < rows; ++k) {
    const Span s = forest.spans[k].span;
    for (int i = s.l; i <= s.r; ++i) a[k * static_cast<std::size_t>(n) + static_cast<std::size_t>(i)] = 1.0 / s.width();
  }
  return Tensor::constant({rows, static_cast<std::size_t>(n)}, std::move(a));
}

double span_prob(const BoundaryDistribution& b, int i, Span s) { return b.left(i, s.l) * b.right(i, s.r); }

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void ModelConfig::validate() const {
  if (vocab <= Vocab::kReserved) throw ConfigError("model vocab must exceed the reserved id range");
  if (d_model < 1 || heads < 1) throw ConfigError("d_model and heads must be positive");
  if (d_model % heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by heads " + std::to_string(heads));
  }
  if (layers < 2) throw ConfigError("at least two layers are needed (h^1 and h^L must differ)");
  if (kbest < 1) throw ConfigError("kbest must be at least 1");
  if (max_len < 2) throw ConfigError("max_len must be at least 2");
  if (mask_rate < 0.0 || mask_rate >= 1.0) throw ConfigError("mask_rate must lie in [0, 1)");
  if (mean_span < 1.0) throw ConfigError("mean_span must be at least 1");
  if (sdr_sign != 1.0 && sdr_sign != -1.0) throw ConfigError("sdr_sign must be +1 or -1");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab", c.vocab},
                     {"d_model", c.d_model},
                     {"layers", c.layers},
                     {"heads", c.heads},
                     {"ffn", c.ffn},
                     {"kbest", c.kbest},
                     {"max_len", c.max_len},
                     {"head_mode", c.head_mode == HeadMode::kMarginal ? "marginal" : "single_span"},
                     {"sentinel", c.distribution.sentinel},
                     {"max_temperature", c.distribution.max_temperature},
                     {"use_sb", c.use_sb},
                     {"sdr_sign", c.sdr_sign},
                     {"dep_all_pairs", c.dep_all_pairs},
                     {"loss_weights", {{"lm", c.weights.lm}, {"dep", c.weights.dep}, {"con", c.weights.con},
                                       {"sdr", c.weights.sdr}}},
                     {"mask_rate", c.mask_rate},
                     {"mean_span", c.mean_span},
                     {"init_scale", c.init_scale}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.vocab = j.value("vocab", d.vocab);
  c.d_model = j.value("d_model", d.d_model);
  c.layers = j.value("layers", d.layers);
  c.heads = j.value("heads", d.heads);
  c.ffn = j.value("ffn", d.ffn);
  c.kbest = j.value("kbest", d.kbest);
  c.max_len = j.value("max_len", d.max_len);
  const std::string mode = j.value("head_mode", std::string("marginal"));
  if (mode == "marginal") {
    c.head_mode = HeadMode::kMarginal;
  } else if (mode == "single_span") {
    c.head_mode = HeadMode::kSingleSpan;
  } else {
    throw ConfigError("unknown head_mode '" + mode + "'");
  }
  c.distribution.sentinel = j.value("sentinel", d.distribution.sentinel);
  c.distribution.max_temperature = j.value("max_temperature", d.distribution.max_temperature);
  c.use_sb = j.value("use_sb", d.use_sb);
  c.sdr_sign = j.value("sdr_sign", d.sdr_sign);
  c.dep_all_pairs = j.value("dep_all_pairs", d.dep_all_pairs);
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    c.weights.lm = w.value("lm", 1.0);
    c.weights.dep = w.value("dep", 1.0);
    c.weights.con = w.value("con", 1.0);
    c.weights.sdr = w.value("sdr", 1.0);
  }
  c.mask_rate = j.value("mask_rate", d.mask_rate);
  c.mean_span = j.value("mean_span", d.mean_span);
  c.init_scale = j.value("init_scale", d.init_scale);
}

// ---------------------------------------------------------------------------
// Structure operations

Tensor boundary_op(const Tensor& oc, const Tensor& od, const DistributionOptions& options) {
  const std::size_t n = od.cols();
  if (od.rows() != 1 || oc.rows() != 1 || oc.cols() + 1 != n) {
    throw ShapeError("boundary_op: expected oc 1x(n-1) and od 1xn, got " + to_string(oc.shape()) + " and " +
                     to_string(od.shape()));
  }
  DistanceProfile profile(oc.to_vector(), od.to_vector());
  const BoundaryDistribution b = boundary_distribution(profile, options);
  std::vector<double> value(n * 2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      value[i * 2 * n + j] = b.left(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      value[i * 2 * n + n + j] = b.right(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
  }
  return make_result({n, 2 * n}, std::move(value), {oc, od},
                     [oc, od, profile = std::move(profile), options, n](std::span<const double> g) {
                       Eigen::MatrixXd gl(n, n), gr(n, n);
                       for (std::size_t i = 0; i < n; ++i) {
                         for (std::size_t j = 0; j < n; ++j) {
                           gl(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = g[i * 2 * n + j];
                           gr(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = g[i * 2 * n + n + j];
                         }
                       }
                       const ProfileGradient pg = boundary_distribution_vjp(profile, gl, gr, options);
                       if (oc.requires_grad() && n > 1) {
                         auto acc = oc.grad_accumulator();
                         for (std::size_t k = 0; k + 1 < n; ++k) acc[k] += pg.oc[k];
                       }
                       if (od.requires_grad()) {
                         auto acc = od.grad_accumulator();
                         for (std::size_t k = 0; k < n; ++k) acc[k] += pg.od[k];
                       }
                     });
}

namespace {

BoundaryDistribution split_bounds(const Tensor& bounds) {
  const auto n = static_cast<Eigen::Index>(bounds.rows());
  const auto m = view(bounds);
  return {m.leftCols(n), m.rightCols(n)};
}

}  // namespace

Tensor head_op(const Tensor& bounds, const Tensor& scores, HeadMode mode) {
  const std::size_t n = bounds.rows();
  if (bounds.cols() != 2 * n || scores.rows() != 1 || scores.cols() != n) {
    throw ShapeError("head_op: expected bounds nx2n and scores 1xn, got " + to_string(bounds.shape()) + " and " +
                     to_string(scores.shape()));
  }
  BoundaryDistribution b = split_bounds(bounds);
  std::vector<double> s = scores.to_vector();
  const Eigen::MatrixXd pd = head_marginal(b, s, mode);
  std::vector<double> value(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) value[i * n + j] = pd(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  return make_result({n, n}, std::move(value), {bounds, scores},
                     [bounds, scores, b = std::move(b), s = std::move(s), mode, n](std::span<const double> g) {
                       Eigen::MatrixXd go(n, n);
                       for (std::size_t i = 0; i < n; ++i) {
                         for (std::size_t j = 0; j < n; ++j) {
                           go(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = g[i * n + j];
                         }
                       }
                       const HeadMarginalGradient hg = head_marginal_vjp(b, s, go, mode);
                       if (bounds.requires_grad()) {
                         auto acc = bounds.grad_accumulator();
                         for (std::size_t i = 0; i < n; ++i) {
                           for (std::size_t j = 0; j < n; ++j) {
                             acc[i * 2 * n + j] += hg.left(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
                             acc[i * 2 * n + n + j] +=
                                 hg.right(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
                           }
                         }
                       }
                       if (scores.requires_grad()) {
                         auto acc = scores.grad_accumulator();
                         for (std::size_t k = 0; k < n; ++k) acc[k] += hg.scores[k];
                       }
                     });
}

std::vector<DistanceProfile> EncoderOutput::profiles() const {
  std::vector<DistanceProfile> out;
  for (const auto& h : heads) out.push_back(h.profile);
  return out;
}

std::vector<Eigen::MatrixXd> EncoderOutput::head_matrices() const {
  std::vector<Eigen::MatrixXd> out;
  for (const auto& h : heads) out.push_back(h.pd_value);
  return out;
}

Corruption corrupt(std::span<const int> ids, double rate, double mean_span, int first_sentinel, int sentinels,
                   Rng& rng) {
  const int n = static_cast<int>(ids.size());
  Corruption c;
  if (rate <= 0.0 || n == 0) {
    c.input.assign(ids.begin(), ids.end());
    return c;
  }
  const int target = std::min(n, std::max(1, static_cast<int>(std::lround(rate * n))));
  std::vector<bool> masked(static_cast<std::size_t>(n), false);
  const auto max_len = static_cast<std::uint64_t>(std::max(1.0, 2.0 * mean_span - 1.0));
  int spans = 0;
  for (int attempt = 0; attempt < 64 && c.masked < target && spans < sentinels; ++attempt) {
    const int len = std::min(target - c.masked, 1 + static_cast<int>(rng.below(max_len)));
    const int start = static_cast<int>(rng.below(static_cast<std::uint64_t>(n - len + 1)));
    bool clash = false;
    for (int i = std::max(0, start - 1); i <= std::min(n - 1, start + len); ++i) clash = clash || masked[static_cast<std::size_t>(i)];
    if (clash) continue;
    for (int i = start; i < start + len; ++i) masked[static_cast<std::size_t>(i)] = true;
    c.masked += len;
    ++spans;
  }
  int next = 0;
  for (int i = 0; i < n; ++i) {
    if (!masked[static_cast<std::size_t>(i)]) {
      c.input.push_back(ids[static_cast<std::size_t>(i)]);
    } else if (i == 0 || !masked[static_cast<std::size_t>(i - 1)]) {
      c.input.push_back(first_sentinel + next++);
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Model

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto v = static_cast<std::size_t>(config_.vocab);
  const auto f = static_cast<std::size_t>(config_.ffn_width());
  const double s = config_.init_scale;
  const double sd = s / std::sqrt(static_cast<double>(d));

  emb_ = params_.add_normal("emb", {v, d}, sd, rng);
  out_bias_ = params_.add_constant("out.bias", {1, v}, 0.0);

  positions_.resize(config_.max_len, config_.d_model);
  for (int p = 0; p < config_.max_len; ++p) {
    for (int k = 0; k < config_.d_model; ++k) {
      const double rate = std::pow(10000.0, -2.0 * (k / 2) / static_cast<double>(config_.d_model));
      positions_(p, k) = (k % 2 == 0 ? std::sin(p * rate) : std::cos(p * rate)) * sd;
    }
  }

  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = "enc." + std::to_string(l) + ".";
    enc_.push_back({make_norm(p + "ln1"), make_norm(p + "ln2"), make_attention(p + "attn", rng), make_ff(p + "ff", rng)});
  }
  enc_final_ = make_norm("enc.final");
  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = "dec." + std::to_string(l) + ".";
    DecoderLayer layer{make_norm(p + "ln1"), make_norm(p + "ln2"), make_norm(p + "ln3"),
                       make_attention(p + "self", rng), make_attention(p + "cross", rng), make_ff(p + "ff", rng),
                       Tensor(), Tensor(), Tensor()};
    layer.sb_query_dep = params_.add_normal(p + "sb.query_dep", {d, d}, sd, rng);
    layer.sb_query_con = params_.add_normal(p + "sb.query_con", {d, d}, sd, rng);
    layer.sb_proj = params_.add_normal(p + "sb.proj", {2 * d, d}, s / std::sqrt(2.0 * static_cast<double>(d)), rng);
    dec_.push_back(std::move(layer));
  }
  dec_final_ = make_norm("dec.final");
  (void)f;

  conv_kernel_ = params_.add_normal("hsi.conv.kernel", {3 * d, d}, s / std::sqrt(3.0 * static_cast<double>(d)), rng);
  conv_bias_ = params_.add_constant("hsi.conv.bias", {1, d}, 0.0);
  for (int m = 0; m < config_.heads; ++m) {
    const std::string p = "hsi." + std::to_string(m) + ".";
    InductorHead h;
    h.w = params_.add_normal(p + "W", {2 * d, d}, s / std::sqrt(2.0 * static_cast<double>(d)), rng);
    h.vc = params_.add_normal(p + "Vc", {d, 1}, sd * 2.0, rng);
    h.vd = params_.add_normal(p + "Vd", {d, 1}, sd * 2.0, rng);
    h.q = params_.add_normal(p + "q", {d, 1}, sd, rng);
    inductor_.push_back(std::move(h));
  }
  gat_dep_in_ = params_.add_normal("sb.dep.in", {d, d}, sd, rng);
  gat_dep_src_ = params_.add_normal("sb.dep.src", {d, 1}, sd, rng);
  gat_dep_dst_ = params_.add_normal("sb.dep.dst", {d, 1}, sd, rng);
  gat_con_in_ = params_.add_normal("sb.con.in", {d, d}, sd, rng);
  gat_con_src_ = params_.add_normal("sb.con.src", {d, 1}, sd, rng);
  gat_con_dst_ = params_.add_normal("sb.con.dst", {d, 1}, sd, rng);
}

Model::Attention Model::make_attention(const std::string& prefix, Rng& rng) {
  const auto d = static_cast<std::size_t>(config_.d_model);
  const double sd = config_.init_scale / std::sqrt(static_cast<double>(d));
  return {params_.add_normal(prefix + ".q", {d, d}, sd, rng), params_.add_normal(prefix + ".k", {d, d}, sd, rng),
          params_.add_normal(prefix + ".v", {d, d}, sd, rng), params_.add_normal(prefix + ".o", {d, d}, sd, rng)};
}

Model::Norm Model::make_norm(const std::string& prefix) {
  const auto d = static_cast<std::size_t>(config_.d_model);
  return {params_.add_constant(prefix + ".gain", {1, d}, 1.0), params_.add_constant(prefix + ".bias", {1, d}, 0.0)};
}

Model::Feedforward Model::make_ff(const std::string& prefix, Rng& rng) {
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto f = static_cast<std::size_t>(config_.ffn_width());
  const double s = config_.init_scale;
  return {params_.add_normal(prefix + ".w1", {d, f}, s / std::sqrt(static_cast<double>(d)), rng),
          params_.add_constant(prefix + ".b1", {1, f}, 0.0),
          params_.add_normal(prefix + ".w2", {f, d}, s / std::sqrt(static_cast<double>(f)), rng),
          params_.add_constant(prefix + ".b2", {1, d}, 0.0)};
}

Tensor Model::embed(std::span<const int> ids) const {
  if (ids.empty()) throw Error("cannot embed an empty sequence");
  if (static_cast<int>(ids.size()) > config_.max_len) {
    throw Error("sequence of length " + std::to_string(ids.size()) + " exceeds max_len " +
                std::to_string(config_.max_len));
  }
  std::vector<std::size_t> rows;
  rows.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= config_.vocab) throw Error("token id " + std::to_string(id) + " outside the vocabulary");
    rows.push_back(static_cast<std::size_t>(id));
  }
  const std::size_t t = ids.size();
  const auto d = static_cast<std::size_t>(config_.d_model);
  std::vector<double> pos(t * d);
  for (std::size_t p = 0; p < t; ++p) {
    for (std::size_t k = 0; k < d; ++k) pos[p * d + k] = positions_(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(k));
  }
  return add(gather_rows(emb_, rows), Tensor::constant({t, d}, std::move(pos)));
}

Tensor Model::norm(const Norm& n, const Tensor& x) const { return layer_norm(x, n.gain, n.bias); }

Tensor Model::feedforward(const Feedforward& f, const Tensor& x) const {
  return add_row(matmul(gelu(add_row(matmul(x, f.w1), f.b1)), f.w2), f.b2);
}

Tensor Model::attend(const Attention& a, const Tensor& x, const Tensor& memory, const Tensor& mask) const {
  const Tensor q = matmul(x, a.wq);
  const Tensor k = matmul(memory, a.wk);
  const Tensor v = matmul(memory, a.wv);
  const auto dh = static_cast<std::size_t>(config_.d_model / config_.heads);
  std::vector<Tensor> parts;
  for (int h = 0; h < config_.heads; ++h) {
    const std::size_t c = static_cast<std::size_t>(h) * dh;
    parts.push_back(scaled_dot_attention(slice_cols(q, c, dh), slice_cols(k, c, dh), slice_cols(v, c, dh), mask));
  }
  return matmul(config_.heads == 1 ? parts[0] : concat_cols(parts), a.wo);
}

// Cross-attention whose memory for decoder position t is h^L + alpha_t (x) e_t,
// computed without materializing the per-position memories.
Tensor Model::fused_cross_attend(const Attention& a, const Tensor& e, const Tensor& hL, const Tensor& alpha) const {
  const Tensor q = matmul(e, a.wq);
  const Tensor hk = matmul(hL, a.wk);
  const Tensor hv = matmul(hL, a.wv);
  const Tensor ek = matmul(e, a.wk);
  const Tensor ev = matmul(e, a.wv);
  const auto dh = static_cast<std::size_t>(config_.d_model / config_.heads);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> parts;
  for (int h = 0; h < config_.heads; ++h) {
    const std::size_t c = static_cast<std::size_t>(h) * dh;
    const Tensor qh = slice_cols(q, c, dh);
    const Tensor base = matmul(qh, transpose(slice_cols(hk, c, dh)));
    const Tensor self = row_sum(mul(qh, slice_cols(ek, c, dh)));
    const Tensor weights = softmax_rows(scale(add(base, mul_col(alpha, self)), inv));
    parts.push_back(add(matmul(weights, slice_cols(hv, c, dh)), mul_col(slice_cols(ev, c, dh), row_sum(mul(weights, alpha)))));
  }
  return matmul(config_.heads == 1 ? parts[0] : concat_cols(parts), a.wo);
}

EncoderOutput Model::encode(std::span<const int> ids, int offset, int n, const ProfileActions* actions) const {
  if (n < 1 || offset < 0 || offset + n > static_cast<int>(ids.size())) {
    throw Error("sentence range [" + std::to_string(offset) + ", " + std::to_string(offset + n) +
                ") is outside the input of length " + std::to_string(ids.size()));
  }
  if (actions && (static_cast<int>(actions->od.size()) != n || static_cast<int>(actions->oc.size()) != n - 1)) {
    throw StructureError("action lengths do not match the sentence length");
  }
  EncoderOutput out;
  out.offset = offset;
  out.n = n;
  Tensor x = embed(ids);
  for (std::size_t l = 0; l < enc_.size(); ++l) {
    const Tensor xn = norm(enc_[l].ln1, x);
    x = add(x, attend(enc_[l].attn, xn, xn, Tensor()));
    x = add(x, feedforward(enc_[l].ff, norm(enc_[l].ln2, x)));
    if (l == 0) out.h1 = x;
  }
  out.hL = norm(enc_final_, x);

  const Tensor sentence = slice_rows(out.h1, static_cast<std::size_t>(offset), static_cast<std::size_t>(n));
  out.hstar = conv1d(sentence, conv_kernel_, conv_bias_);
  induce(out, actions);
  return out;
}

void Model::induce(EncoderOutput& enc, const ProfileActions* actions) const {
  const int n = enc.n;
  if (actions && (static_cast<int>(actions->od.size()) != n || static_cast<int>(actions->oc.size()) != n - 1)) {
    throw StructureError("action lengths do not match the sentence length");
  }
  const auto un = static_cast<std::size_t>(n);
  const Tensor top = slice_rows(enc.hL, static_cast<std::size_t>(enc.offset), un);
  const Tensor self_pair = concat_cols({enc.hstar, enc.hstar});
  const Tensor gap_pair =
      n > 1 ? concat_cols({slice_rows(enc.hstar, 0, un - 1), slice_rows(enc.hstar, 1, un - 1)}) : Tensor();
  enc.heads.clear();
  for (const auto& head : inductor_) {
    HeadStructure hs;
    hs.od = transpose(matmul(tanh(matmul(self_pair, head.w)), head.vd));
    hs.oc = n > 1 ? transpose(matmul(tanh(matmul(gap_pair, head.w)), head.vc)) : Tensor::constant({1, 0}, {});
    if (actions) {
      hs.od = add(hs.od, Tensor::row(actions->od));
      if (n > 1) hs.oc = add(hs.oc, Tensor::row(actions->oc));
    }
    hs.scores = transpose(matmul(top, head.q));
    hs.bounds = boundary_op(hs.oc, hs.od, config_.distribution);
    hs.pd = head_op(hs.bounds, hs.scores, config_.head_mode);
    hs.profile = DistanceProfile(hs.oc.to_vector(), hs.od.to_vector());
    hs.bounds_value = split_bounds(hs.bounds);
    hs.pd_value = view(hs.pd);
    enc.heads.push_back(std::move(hs));
  }
}

Tensor Model::gat(const Tensor& nodes, std::span<const Index2> edges, const Tensor& log_weights, const Tensor& w_in,
                  const Tensor& a_src, const Tensor& a_dst) const {
  const Tensor x = matmul(nodes, w_in);
  const std::size_t count = x.rows();
  std::vector<double> base(count * count, kMasked);
  for (std::size_t i = 0; i < count; ++i) base[i * count + i] = 0.0;
  for (const auto& e : edges) base[e.row * count + e.col] = 0.0;
  Tensor mask = Tensor::constant({count, count}, std::move(base));
  if (!edges.empty()) mask = scatter_add(mask, edges, log_weights);
  const Tensor raw = tanh(outer_add(matmul(x, a_dst), transpose(matmul(x, a_src))));
  const Tensor alpha = softmax_rows(add(raw, mask));
  return tanh(matmul(alpha, x));
}

ForestGraph Model::build_graph(const EncoderOutput& enc) const {
  const int n = enc.n;
  const auto un = static_cast<std::size_t>(n);
  const double inv_heads = 1.0 / static_cast<double>(enc.heads.size());
  ForestGraph g;
  const auto matrices = enc.head_matrices();
  g.dep = compact_dep_forest(matrices, config_.kbest);
  const auto profiles = enc.profiles();
  std::vector<BoundaryDistribution> bounds;
  for (const auto& h : enc.heads) bounds.push_back(h.bounds_value);
  g.con = compact_con_forest(profiles, bounds);
  const Tensor sentence = slice_rows(enc.h1, static_cast<std::size_t>(enc.offset), un);

  // Dependency forest: token nodes, arcs weighted by the mean head probability.
  std::vector<Index2> arc_pos;
  for (const auto& wa : g.dep.arcs) {
    if (wa.arc.head < 0) continue;
    arc_pos.push_back({static_cast<std::size_t>(wa.arc.dep), static_cast<std::size_t>(wa.arc.head)});
  }
  std::vector<Index2> dep_edges;
  Tensor dep_logw;
  if (!arc_pos.empty()) {
    Tensor acc;
    for (const auto& h : enc.heads) {
      const Tensor p = pick(h.pd, arc_pos);
      acc = acc.defined() ? add(acc, p) : p;
    }
    const Tensor logw = safe_log(scale(acc, inv_heads));
    dep_logw = concat_cols({logw, logw});
    dep_edges = arc_pos;
    for (const auto& e : arc_pos) dep_edges.push_back({e.col, e.row});
  }
  g.dep_nodes = gat(sentence, dep_edges, dep_logw, gat_dep_in_, gat_dep_src_, gat_dep_dst_);

  // Constituency forest: span nodes, tree edges weighted by the child span weight.
  const std::size_t spans = g.con.spans.size();
  std::vector<Index2> left_pos, right_pos;
  std::vector<double> agg_values;
  std::vector<std::pair<std::size_t, std::size_t>> owners;
  for (std::size_t k = 0; k < spans; ++k) {
    const Span s = g.con.spans[k].span;
    for (int i = s.l; i <= s.r; ++i) {
      left_pos.push_back({static_cast<std::size_t>(i), static_cast<std::size_t>(s.l)});
      right_pos.push_back({static_cast<std::size_t>(i), un + static_cast<std::size_t>(s.r)});
      owners.emplace_back(left_pos.size() - 1, k);
    }
  }
  std::vector<double> agg(left_pos.size() * spans, 0.0);
  for (const auto& [t, k] : owners) agg[t * spans + k] = 1.0 / g.con.spans[k].span.width();
  Tensor acc;
  for (const auto& h : enc.heads) {
    const Tensor p = mul(pick(h.bounds, left_pos), pick(h.bounds, right_pos));
    acc = acc.defined() ? add(acc, p) : p;
  }
  const Tensor span_w = scale(matmul(acc, Tensor::constant({left_pos.size(), spans}, std::move(agg))), inv_heads);
  std::vector<Index2> con_edges;
  std::vector<Index2> child_pos;
  for (const auto& [parent, child] : g.con.edges) {
    con_edges.push_back({static_cast<std::size_t>(parent), static_cast<std::size_t>(child)});
    child_pos.push_back({0, static_cast<std::size_t>(child)});
  }
  for (const auto& [parent, child] : g.con.edges) {
    con_edges.push_back({static_cast<std::size_t>(child), static_cast<std::size_t>(parent)});
  }
  Tensor con_logw;
  if (!child_pos.empty()) {
    const Tensor w = safe_log(pick(span_w, child_pos));
    con_logw = concat_cols({w, w});
  }
  const Tensor span_nodes = matmul(span_averager(g.con, n), sentence);
  g.con_nodes = gat(span_nodes, con_edges, con_logw, gat_con_in_, gat_con_src_, gat_con_dst_);
  return g;
}

const ForestGraph* Model::decoding_graph(const std::optional<ForestGraph>& graph) const {
  return config_.use_sb && graph ? &*graph : nullptr;
}

Tensor Model::decoder_log_probs(const EncoderOutput& enc, const ForestGraph* graph, std::span<const int> prefix) const {
  Tensor x = embed(prefix);
  const Tensor mask = causal_mask(prefix.size());
  const double inv_d = 1.0 / std::sqrt(static_cast<double>(config_.d_model));
  const Tensor hL_t = graph ? transpose(enc.hL) : Tensor();
  const Tensor gd_t = graph ? transpose(graph->dep_nodes) : Tensor();
  const Tensor gc_t = graph ? transpose(graph->con_nodes) : Tensor();
  for (const auto& layer : dec_) {
    const Tensor xn = norm(layer.ln1, x);
    x = add(x, attend(layer.self_attn, xn, xn, mask));
    const Tensor e = norm(layer.ln2, x);
    if (graph) {
      const Tensor beta_d = softmax_rows(scale(matmul(matmul(e, layer.sb_query_dep), gd_t), inv_d));
      const Tensor beta_c = softmax_rows(scale(matmul(matmul(e, layer.sb_query_con), gc_t), inv_d));
      const Tensor u = matmul(concat_cols({matmul(beta_d, graph->dep_nodes), matmul(beta_c, graph->con_nodes)}),
                              layer.sb_proj);
      const Tensor alpha = softmax_rows(scale(matmul(u, hL_t), inv_d));
      x = add(x, fused_cross_attend(layer.cross_attn, e, enc.hL, alpha));
    } else {
      x = add(x, attend(layer.cross_attn, e, enc.hL, Tensor()));
    }
    x = add(x, feedforward(layer.ff, norm(layer.ln3, x)));
  }
  x = norm(dec_final_, x);
  return log_softmax_rows(add_row(matmul(x, transpose(emb_)), out_bias_));
}

Tensor Model::next_token_distribution(const EncoderOutput& enc, const ForestGraph* graph,
                                      std::span<const int> prefix) const {
  const Tensor lp = decoder_log_probs(enc, graph, prefix);
  return exp(slice_rows(lp, lp.rows() - 1, 1));
}

Tensor Model::sequence_nll(const EncoderOutput& enc, const ForestGraph* graph, std::span<const int> target) const {
  std::vector<int> prefix{Vocab::kBos};
  prefix.insert(prefix.end(), target.begin(), target.end());
  const Tensor lp = decoder_log_probs(enc, graph, prefix);
  std::vector<Index2> gold;
  for (std::size_t t = 0; t < target.size(); ++t) gold.push_back({t, static_cast<std::size_t>(target[t])});
  gold.push_back({target.size(), static_cast<std::size_t>(Vocab::kEos)});
  return scale(sum(pick(lp, gold)), -1.0);
}

std::vector<int> Model::greedy_decode(const EncoderOutput& enc, const ForestGraph* graph, int max_steps) const {
  NoGradGuard guard;
  std::vector<int> prefix{Vocab::kBos};
  const int limit = std::min(max_steps, config_.max_len - 1);
  for (int step = 0; step < limit; ++step) {
    const Tensor lp = decoder_log_probs(enc, graph, prefix);
    const auto last = lp.data().subspan((lp.rows() - 1) * lp.cols(), lp.cols());
    const int best = static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
    if (best == Vocab::kEos) break;
    prefix.push_back(best);
  }
  return {prefix.begin() + 1, prefix.end()};
}

Tensor Model::loss_dep(const EncoderOutput& enc) const {
  Tensor total = Tensor::scalar(0.0);
  const auto un = static_cast<std::size_t>(enc.n);
  for (const auto& h : enc.heads) {
    if (config_.dep_all_pairs) {
      total = add(total, scale(sum(safe_log(h.pd)), -1.0));
      continue;
    }
    const DepTree tree = build_dep_tree(h.profile);
    std::vector<Index2> pos;
    for (std::size_t i = 0; i < un; ++i) {
      const int head = tree.head[i];
      pos.push_back({i, head < 0 ? i : static_cast<std::size_t>(head)});
    }
    total = add(total, scale(sum(safe_log(pick(h.pd, pos))), -1.0));
  }
  return total;
}

Tensor Model::loss_con(const EncoderOutput& enc, const ForestGraph& graph) const {
  const int n = enc.n;
  const auto un = static_cast<std::size_t>(n);
  const std::size_t k_max = static_cast<std::size_t>(config_.kbest);
  const Tensor top = slice_rows(enc.hL, static_cast<std::size_t>(enc.offset), un);
  const Tensor span_means = matmul(span_averager(graph.con, n), top);
  const Tensor phi = transpose(cosine_similarity(graph.con_nodes, span_means));  // 1 x |spans|

  Tensor total = Tensor::scalar(0.0);
  std::vector<Index2> phi_pos;   // candidate span index per slot
  std::vector<Index2> slot_pos;  // (group, slot)
  std::size_t groups = 0;
  for (const auto& h : enc.heads) {
    std::vector<Index2> left_pos, right_pos;
    for (int i = 0; i < n; ++i) {
      std::vector<std::size_t> cand;
      for (std::size_t s = 0; s < graph.con.spans.size(); ++s) {
        if (graph.con.spans[s].span.contains(i)) cand.push_back(s);
      }
      std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) {
        return span_prob(h.bounds_value, i, graph.con.spans[a].span) > span_prob(h.bounds_value, i, graph.con.spans[b].span);
      });
      if (cand.size() > k_max) cand.resize(k_max);
      for (std::size_t slot = 0; slot < cand.size(); ++slot) {
        const Span s = graph.con.spans[cand[slot]].span;
        left_pos.push_back({static_cast<std::size_t>(i), static_cast<std::size_t>(s.l)});
        right_pos.push_back({static_cast<std::size_t>(i), un + static_cast<std::size_t>(s.r)});
        phi_pos.push_back({0, cand[slot]});
        slot_pos.push_back({groups, slot});
      }
      ++groups;
    }
    const Tensor pc = mul(pick(h.bounds, left_pos), pick(h.bounds, right_pos));
    total = add(total, scale(sum(safe_log(pc)), -1.0));
  }
  std::vector<double> base(groups * k_max, kMasked);
  for (const auto& p : slot_pos) base[p.row * k_max + p.col] = 0.0;
  const Tensor grid = scatter_add(Tensor::constant({groups, k_max}, std::move(base)), slot_pos, pick(phi, phi_pos));
  return add(total, scale(sum(pick(log_softmax_rows(grid), slot_pos)), -1.0));
}

Tensor Model::loss_sdr(const EncoderOutput& enc) const {
  Tensor total = Tensor::scalar(0.0);
  if (enc.heads.size() < 2) return total;
  for (std::size_t m = 0; m < enc.heads.size(); ++m) {
    for (std::size_t k = m + 1; k < enc.heads.size(); ++k) {
      total = add(total, frobenius_norm(mul(enc.heads[m].pd, enc.heads[k].pd)));
    }
  }
  // Ordered pairs (m, k) and (k, m) contribute equally.
  return scale(total, 2.0 * config_.sdr_sign);
}

PosttrainLosses Model::posttrain_losses(std::span<const int> sentence, Rng& rng) const {
  const Corruption c =
      corrupt(sentence, config_.mask_rate, config_.mean_span, Vocab::kFirstSentinel, Vocab::kNumSentinels, rng);
  const EncoderOutput enc = encode(c.input, 0, static_cast<int>(c.input.size()));
  const std::optional<ForestGraph> graph = build_graph(enc);
  PosttrainLosses out;
  out.lm = sequence_nll(enc, decoding_graph(graph), sentence);
  out.dep = loss_dep(enc);
  out.con = loss_con(enc, *graph);
  out.sdr = loss_sdr(enc);
  const auto& w = config_.weights;
  out.total = add(add(scale(out.lm, w.lm), scale(out.dep, w.dep)), add(scale(out.con, w.con), scale(out.sdr, w.sdr)));
  return out;
}

}  // namespace structie
