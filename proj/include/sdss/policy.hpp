#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdss/dataset.hpp"
#include "sdss/decision.hpp"
#include "sdss/error.hpp"
#include "sdss/rng.hpp"

namespace sdss {

// ---------------------------------------------------------------------------
// History features

/// Encodes the raw stage-t history (o_1, a_1, y_1, ..., o_t) as
/// (o_1, onehot(a_1), y_1, ..., o_t), optionally standardized with stored stats.
class FeatureMap {
 public:
  FeatureMap() = default;

  FeatureMap(std::vector<StageSpec> spec, bool standardize) : spec_(std::move(spec)), standardize_(standardize) {
    mean_.resize(spec_.size());
    sd_.resize(spec_.size());
    for (int t = 0; t < stages(); ++t) {
      mean_[t].assign(dim(t), 0.0);
      sd_[t].assign(dim(t), 1.0);
    }
  }

  int stages() const { return static_cast<int>(spec_.size()); }
  const std::vector<StageSpec>& spec() const { return spec_; }
  bool standardize() const { return standardize_; }

  std::size_t dim(int t) const {
    std::size_t d = 0;
    for (int s = 0; s < t; ++s) d += static_cast<std::size_t>(spec_[s].cov_dim + spec_[s].k + 1);
    return d + static_cast<std::size_t>(spec_[t].cov_dim);
  }

  void encode_raw(int t, std::span<const double> raw, std::span<double> out) const {
    std::size_t r = 0, o = 0;
    for (int s = 0; s < t; ++s) {
      for (int j = 0; j < spec_[s].cov_dim; ++j) out[o++] = raw[r++];
      const int a = static_cast<int>(raw[r++]);
      if (a < 1 || a > spec_[s].k) throw InvalidArgument("FeatureMap: action in history out of range");
      for (int j = 1; j <= spec_[s].k; ++j) out[o++] = (j == a) ? 1.0 : 0.0;
      out[o++] = raw[r++];
    }
    for (int j = 0; j < spec_[t].cov_dim; ++j) out[o++] = raw[r++];
    if (r != raw.size()) throw InvalidArgument("FeatureMap: raw history length does not match stage layout");
    if (standardize_)
      for (std::size_t i = 0; i < o; ++i) out[i] = (out[i] - mean_[t][i]) / sd_[t][i];
  }

  /// Features of row i at stage t, taken directly from the dataset.
  void encode(const Dataset& ds, int t, std::size_t i, std::span<double> out) const {
    std::size_t o = 0;
    for (int s = 0; s < t; ++s) {
      for (double v : ds.obs(s, i)) out[o++] = v;
      const int a = ds.action(s, i);
      for (int j = 1; j <= spec_[s].k; ++j) out[o++] = (j == a) ? 1.0 : 0.0;
      out[o++] = ds.reward(s, i);
    }
    for (double v : ds.obs(t, i)) out[o++] = v;
    if (standardize_)
      for (std::size_t j = 0; j < o; ++j) out[j] = (out[j] - mean_[t][j]) / sd_[t][j];
  }

  /// Learns per-feature mean/SD from `ds`. Constant columns keep SD 1.
  void fit(const Dataset& ds) {
    if (!standardize_) return;
    detail::require(!ds.empty(), "FeatureMap::fit: empty dataset");
    const bool was = standardize_;
    standardize_ = false;
    for (int t = 0; t < stages(); ++t) {
      const std::size_t d = dim(t);
      std::vector<double> x(d), s1(d, 0.0), s2(d, 0.0);
      for (std::size_t i = 0; i < ds.size(); ++i) {
        encode(ds, t, i, x);
        for (std::size_t j = 0; j < d; ++j) {
          s1[j] += x[j];
          s2[j] += x[j] * x[j];
        }
      }
      const double n = static_cast<double>(ds.size());
      for (std::size_t j = 0; j < d; ++j) {
        mean_[t][j] = s1[j] / n;
        const double var = std::max(0.0, s2[j] / n - mean_[t][j] * mean_[t][j]);
        sd_[t][j] = var > 1e-24 ? std::sqrt(var) : 1.0;
      }
    }
    standardize_ = was;
  }

  const std::vector<double>& mean(int t) const { return mean_[t]; }
  const std::vector<double>& sd(int t) const { return sd_[t]; }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["standardize"] = standardize_;
    j["stages"] = nlohmann::json::array();
    for (int t = 0; t < stages(); ++t)
      j["stages"].push_back({{"k", spec_[t].k}, {"cov_dim", spec_[t].cov_dim}, {"mean", mean_[t]}, {"sd", sd_[t]}});
    return j;
  }

  static FeatureMap from_json(const nlohmann::json& j) {
    std::vector<StageSpec> spec;
    for (const auto& s : j.at("stages")) spec.push_back({s.at("k").get<int>(), s.at("cov_dim").get<int>()});
    FeatureMap f(spec, j.at("standardize").get<bool>());
    for (int t = 0; t < f.stages(); ++t) {
      f.mean_[t] = j["stages"][t].at("mean").get<std::vector<double>>();
      f.sd_[t] = j["stages"][t].at("sd").get<std::vector<double>>();
      detail::require(f.mean_[t].size() == f.dim(t) && f.sd_[t].size() == f.dim(t),
                      "FeatureMap: stored stats do not match the stage layout");
    }
    return f;
  }

 private:
  std::vector<StageSpec> spec_;
  bool standardize_ = true;
  std::vector<std::vector<double>> mean_, sd_;
};

// ---------------------------------------------------------------------------
// Architectures and parameter layout

enum class Activation { ReLU, ELU };
enum class InitScheme { He, Xavier };

struct StageArch {
  bool mlp = false;
  int depth = 1;
  int width = 16;
  Activation activation = Activation::ReLU;
  double dropout = 0.0;

  static StageArch linear() { return {}; }
  static StageArch make_mlp(int depth, int width, Activation act = Activation::ReLU, double dropout = 0.0) {
    return {true, depth, width, act, dropout};
  }
};

struct LayerSlice {
  int stage = 0;
  int layer = 0;
  int in = 0;
  int out = 0;
  std::size_t w_offset = 0;  // row-major out x in
  std::size_t b_offset = 0;  // valid when the arch has biases
};

/// Relative-score model for every stage: one trunk per stage with k_t - 1 linear heads.
/// Parameters are laid out stage-major, then layer-major; within a layer the weight
/// matrix (row-major, out x in) precedes the bias vector.
class Policy {
 public:
  Policy() = default;

  Policy(FeatureMap features, std::vector<StageArch> arch, bool include_bias = true)
      : features_(std::move(features)), arch_(std::move(arch)), bias_(include_bias) {
    detail::require(static_cast<int>(arch_.size()) == features_.stages(), "Policy: one StageArch per stage");
    std::size_t off = 0;
    layers_.resize(arch_.size());
    for (int t = 0; t < stages(); ++t) {
      const auto& a = arch_[t];
      if (a.mlp) {
        detail::require(a.depth >= 1 && a.width >= 1, "Policy: MLP needs depth >= 1 and width >= 1");
        detail::require(a.dropout >= 0.0 && a.dropout < 1.0, "Policy: dropout rate must be in [0, 1)");
      }
      int in = static_cast<int>(features_.dim(t));
      const int heads = features_.spec()[t].k - 1;
      const int hidden = a.mlp ? a.depth : 0;
      for (int l = 0; l <= hidden; ++l) {
        const int out = (l == hidden) ? heads : a.width;
        LayerSlice s{t, l, in, out, off, 0};
        off += static_cast<std::size_t>(in) * out;
        if (bias_) {
          s.b_offset = off;
          off += out;
        }
        layers_[t].push_back(s);
        in = out;
      }
    }
    size_ = off;
  }

  int stages() const { return features_.stages(); }
  std::size_t size() const { return size_; }
  int heads(int t) const { return features_.spec()[t].k - 1; }
  bool include_bias() const { return bias_; }
  const FeatureMap& features() const { return features_; }
  FeatureMap& features() { return features_; }
  const std::vector<StageArch>& arch() const { return arch_; }
  const std::vector<LayerSlice>& layers(int t) const { return layers_[t]; }

  /// Activations recorded by a forward pass; a backward pass must use the cache of the
  /// forward pass it differentiates.
  struct Cache {
    int stage = -1;
    std::vector<std::vector<double>> input;  // input to each layer (post-activation, post-dropout)
    std::vector<std::vector<double>> pre;    // pre-activation of hidden layers
    std::vector<std::vector<double>> mask;   // dropout scale per hidden unit (empty when off)
  };

  /// g_t(h) for encoded features `x`. Dropout is sampled only when `rng` is provided and
  /// `train` is set.
  void forward(std::span<const double> theta, int t, std::span<const double> x, std::span<double> out,
               Cache* cache = nullptr, bool train = false, Rng* rng = nullptr) const {
    check_theta(theta);
    const auto& L = layers_[t];
    const auto& a = arch_[t];
    if (x.size() != static_cast<std::size_t>(L.front().in))
      throw InvalidArgument("Policy::forward: feature length does not match stage layout");
    if (out.size() != static_cast<std::size_t>(heads(t))) throw InvalidArgument("Policy::forward: bad output size");
    if (cache) {
      cache->stage = t;
      cache->input.resize(L.size());
      cache->pre.resize(L.size());
      cache->mask.resize(L.size());
    }
    const bool drop = train && rng && a.mlp && a.dropout > 0.0;
    std::vector<double> cur(x.begin(), x.end()), next;
    for (std::size_t l = 0; l < L.size(); ++l) {
      const auto& s = L[l];
      if (cache) cache->input[l] = cur;
      next.assign(s.out, 0.0);
      const double* W = theta.data() + s.w_offset;
      for (int o = 0; o < s.out; ++o) {
        double acc = bias_ ? theta[s.b_offset + o] : 0.0;
        const double* row = W + static_cast<std::size_t>(o) * s.in;
        for (int i = 0; i < s.in; ++i) acc += row[i] * cur[i];
        next[o] = acc;
      }
      const bool last = (l + 1 == L.size());
      if (!last) {
        if (cache) cache->pre[l] = next;
        for (auto& v : next) v = activate(a.activation, v);
        if (drop) {
          std::bernoulli_distribution keep(1.0 - a.dropout);
          std::vector<double> m(s.out);
          for (int o = 0; o < s.out; ++o) {
            m[o] = keep(*rng) ? 1.0 / (1.0 - a.dropout) : 0.0;
            next[o] *= m[o];
          }
          if (cache) cache->mask[l] = std::move(m);
        } else if (cache) {
          cache->mask[l].clear();
        }
      }
      cur.swap(next);
    }
    std::copy(cur.begin(), cur.end(), out.begin());
  }

  /// grad_out += (d g_t / d theta)^T upstream, using the activations in `cache`.
  void backward(std::span<const double> theta, const Cache& cache, std::span<const double> upstream,
                std::span<double> grad_out) const {
    check_theta(theta);
    if (grad_out.size() != size_) throw InvalidArgument("Policy::backward: gradient buffer has wrong size");
    const int t = cache.stage;
    if (t < 0 || t >= stages() || cache.input.size() != layers_[t].size())
      throw ContractViolation("Policy::backward: cache does not come from a forward pass of this policy");
    const auto& L = layers_[t];
    if (upstream.size() != static_cast<std::size_t>(heads(t)))
      throw InvalidArgument("Policy::backward: upstream has wrong size");
    std::vector<double> delta(upstream.begin(), upstream.end()), prev;
    for (std::size_t l = L.size(); l-- > 0;) {
      const auto& s = L[l];
      const auto& in = cache.input[l];
      if (in.size() != static_cast<std::size_t>(s.in))
        throw ContractViolation("Policy::backward: cached activations have the wrong shape");
      for (int o = 0; o < s.out; ++o) {
        const double d = delta[o];
        if (d == 0.0) continue;
        double* gW = grad_out.data() + s.w_offset + static_cast<std::size_t>(o) * s.in;
        for (int i = 0; i < s.in; ++i) gW[i] += d * in[i];
        if (bias_) grad_out[s.b_offset + o] += d;
      }
      if (l == 0) break;
      // back through the previous hidden layer's dropout and activation
      prev.assign(s.in, 0.0);
      const double* W = theta.data() + s.w_offset;
      for (int o = 0; o < s.out; ++o) {
        const double d = delta[o];
        if (d == 0.0) continue;
        const double* row = W + static_cast<std::size_t>(o) * s.in;
        for (int i = 0; i < s.in; ++i) prev[i] += d * row[i];
      }
      const auto& mask = cache.mask[l - 1];
      const auto& pre = cache.pre[l - 1];
      if (!mask.empty() && mask.size() != prev.size())
        throw ContractViolation("Policy::backward: dropout mask does not match the layer");
      for (int i = 0; i < s.in; ++i) {
        double g = prev[i] * activate_deriv(arch_[t].activation, pre[i]);
        if (!mask.empty()) g *= mask[i];
        prev[i] = g;
      }
      delta.swap(prev);
    }
  }

  std::vector<double> init(InitScheme scheme, std::uint64_t seed) const {
    std::vector<double> theta(size_, 0.0);
    Rng rng = make_rng(seed);
    reinit(theta, scheme, rng);
    return theta;
  }

  /// He: N(0, 2/fan_in); Xavier: U(-1/sqrt(fan_in), 1/sqrt(fan_in)). Biases are zero.
  void reinit(std::span<double> theta, InitScheme scheme, Rng& rng) const {
    check_theta(theta);
    for (const auto& stage : layers_) {
      for (const auto& s : stage) {
        const double fan = std::max(1, s.in);
        const std::size_t nw = static_cast<std::size_t>(s.in) * s.out;
        if (scheme == InitScheme::He) {
          std::normal_distribution<double> d(0.0, std::sqrt(2.0 / fan));
          for (std::size_t i = 0; i < nw; ++i) theta[s.w_offset + i] = d(rng);
        } else {
          const double r = 1.0 / std::sqrt(fan);
          std::uniform_real_distribution<double> d(-r, r);
          for (std::size_t i = 0; i < nw; ++i) theta[s.w_offset + i] = d(rng);
        }
        if (bias_)
          for (int o = 0; o < s.out; ++o) theta[s.b_offset + o] = 0.0;
      }
    }
  }

  /// Relative scores for a raw history (o_1, a_1, y_1, ..., o_t); evaluation mode.
  std::vector<double> scores_raw(std::span<const double> theta, int t, std::span<const double> raw) const {
    std::vector<double> x(features_.dim(t)), g(heads(t));
    features_.encode_raw(t, raw, x);
    forward(theta, t, x, g);
    return g;
  }

  int decide_raw(std::span<const double> theta, int t, std::span<const double> raw) const {
    const auto g = scores_raw(theta, t, raw);
    return pred(trans(g));
  }

  nlohmann::json arch_json() const {
    nlohmann::json j;
    j["include_bias"] = bias_;
    j["stages"] = nlohmann::json::array();
    for (const auto& a : arch_) {
      j["stages"].push_back({{"kind", a.mlp ? "mlp" : "linear"},
                             {"depth", a.depth},
                             {"width", a.width},
                             {"activation", a.activation == Activation::ReLU ? "relu" : "elu"},
                             {"dropout", a.dropout}});
    }
    j["layout"] = nlohmann::json::array();
    for (const auto& st : layers_)
      for (const auto& s : st)
        j["layout"].push_back({{"stage", s.stage + 1},
                               {"layer", s.layer},
                               {"in", s.in},
                               {"out", s.out},
                               {"w_offset", s.w_offset},
                               {"b_offset", bias_ ? nlohmann::json(s.b_offset) : nlohmann::json(nullptr)}});
    j["size"] = size_;
    return j;
  }

  static std::vector<StageArch> arch_from_json(const nlohmann::json& j) {
    std::vector<StageArch> out;
    for (const auto& s : j.at("stages")) {
      StageArch a;
      a.mlp = s.at("kind").get<std::string>() == "mlp";
      a.depth = s.at("depth").get<int>();
      a.width = s.at("width").get<int>();
      a.activation = s.at("activation").get<std::string>() == "elu" ? Activation::ELU : Activation::ReLU;
      a.dropout = s.at("dropout").get<double>();
      out.push_back(a);
    }
    return out;
  }

 private:
  static double activate(Activation a, double v) {
    if (a == Activation::ReLU) return v > 0.0 ? v : 0.0;
    return v > 0.0 ? v : std::expm1(v);
  }
  static double activate_deriv(Activation a, double v) {
    if (a == Activation::ReLU) return v > 0.0 ? 1.0 : 0.0;
    return v > 0.0 ? 1.0 : std::exp(v);
  }
  void check_theta(std::span<const double> theta) const {
    if (theta.size() != size_) throw InvalidArgument("Policy: parameter vector has wrong length");
  }

  FeatureMap features_;
  std::vector<StageArch> arch_;
  bool bias_ = true;
  std::vector<std::vector<LayerSlice>> layers_;
  std::size_t size_ = 0;
};

/// Linear policy for every stage of `spec`.
inline Policy linear_policy(const std::vector<StageSpec>& spec, bool standardize = true, bool bias = true) {
  return Policy(FeatureMap(spec, standardize), std::vector<StageArch>(spec.size(), StageArch::linear()), bias);
}

inline DecisionRule policy_rule(const Policy& policy, std::vector<double> theta) {
  return [policy, theta = std::move(theta)](int t, std::span<const double> raw) {
    return policy.decide_raw(theta, t, raw);
  };
}

// ---------------------------------------------------------------------------
// Checkpoints: <prefix>.json manifest + <prefix>.bin little-endian float64 parameters

inline void save_checkpoint(const std::string& prefix, const Policy& policy, std::span<const double> theta,
                            const nlohmann::json& extra = {}) {
  detail::require(theta.size() == policy.size(), "save_checkpoint: parameter vector has wrong length");
  nlohmann::json j;
  j["arch"] = policy.arch_json();
  j["features"] = policy.features().to_json();
  j["theta_file"] = prefix + ".bin";
  j["theta_format"] = "float64-le";
  if (!extra.is_null()) j["extra"] = extra;
  std::ofstream(prefix + ".json") << j.dump(2) << '\n';
  std::ofstream bin(prefix + ".bin", std::ios::binary);
  for (double v : theta) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap64(u);
    bin.write(reinterpret_cast<const char*>(&u), 8);
  }
  if (!bin) throw InvalidArgument("save_checkpoint: cannot write " + prefix + ".bin");
}

struct Checkpoint {
  Policy policy;
  std::vector<double> theta;
  nlohmann::json extra;
};

inline Checkpoint load_checkpoint(const std::string& prefix) {
  std::ifstream in(prefix + ".json");
  if (!in) throw InvalidArgument("load_checkpoint: missing " + prefix + ".json");
  const auto j = nlohmann::json::parse(in);
  Checkpoint c;
  c.policy = Policy(FeatureMap::from_json(j.at("features")), Policy::arch_from_json(j.at("arch")),
                    j.at("arch").at("include_bias").get<bool>());
  std::ifstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw InvalidArgument("load_checkpoint: missing " + prefix + ".bin");
  c.theta.resize(c.policy.size());
  for (auto& v : c.theta) {
    std::uint64_t u = 0;
    bin.read(reinterpret_cast<char*>(&u), 8);
    if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap64(u);
    std::memcpy(&v, &u, 8);
  }
  if (!bin) throw InvalidArgument("load_checkpoint: parameter file is shorter than the layout");
  if (j.contains("extra")) c.extra = j["extra"];
  return c;
}

}  // namespace sdss
