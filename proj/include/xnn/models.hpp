#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "xnn/autodiff.hpp"
#include "xnn/common.hpp"
#include "xnn/gxnn.hpp"
#include "xnn/ops.hpp"
#include "xnn/rng.hpp"
#include "xnn/sxnn.hpp"

namespace xnn {

enum class ModelKind { cnn3d, sxcnn, gxcnn };

inline const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::cnn3d: return "cnn3d";
    case ModelKind::sxcnn: return "sxcnn";
    case ModelKind::gxcnn: return "gxcnn";
  }
  return "?";
}

inline ModelKind model_kind_from(const std::string& s) {
  if (s == "cnn3d") return ModelKind::cnn3d;
  if (s == "sxcnn") return ModelKind::sxcnn;
  if (s == "gxcnn") return ModelKind::gxcnn;
  fail("unknown model kind '", s, "'");
}

struct ModelConfig {
  ModelKind kind = ModelKind::sxcnn;
  std::string preset = "appendixD";
  int depth = 5;
  int hidden = 64;
  int kernel = 3;        // hidden-layer kernel (stride 1, same padding)
  int embed_kernel = 4;  // first-layer embedding kernel
  int embed_stride = 4;
  int hidden_stride = 1;  // stride of the hidden-layer convs
  int in_channels = 1;
  int cnn3d_stride = 2;
  int cnn3d_first_stride = 2;  // stride of the first conv layer
  int cnn3d_pad_depth = 3;     // zero-extension depth for rank-2 inputs
  std::uint64_t seed = 0;
};

/// Presets: "table1" is the matched depth-4 / width-128 comparison setting;
/// "appendixD" is the per-model narrative setting (CNN 3x32, SXCNN 5x64,
/// GXCNN 1 lift + 4 XConv at 32).
inline ModelConfig model_preset(ModelKind kind, const std::string& preset, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.kind = kind;
  cfg.preset = preset;
  cfg.seed = seed;
  if (kind == ModelKind::cnn3d) {
    cfg.depth = 3;
    cfg.hidden = 32;
  } else if (preset == "table1") {
    cfg.depth = 4;
    cfg.hidden = 128;
  } else if (preset == "appendixD") {
    cfg.depth = 5;
    cfg.hidden = (kind == ModelKind::gxcnn) ? 32 : 64;
  } else {
    fail("unknown preset '", preset, "' (expected table1 or appendixD)");
  }
  return cfg;
}

inline std::string serialize_config(const ModelConfig& c) {
  std::ostringstream os;
  os << "kind=" << to_string(c.kind) << "\n"
     << "preset=" << c.preset << "\n"
     << "depth=" << c.depth << "\n"
     << "hidden=" << c.hidden << "\n"
     << "kernel=" << c.kernel << "\n"
     << "embed_kernel=" << c.embed_kernel << "\n"
     << "embed_stride=" << c.embed_stride << "\n"
     << "hidden_stride=" << c.hidden_stride << "\n"
     << "in_channels=" << c.in_channels << "\n"
     << "cnn3d_stride=" << c.cnn3d_stride << "\n"
     << "cnn3d_first_stride=" << c.cnn3d_first_stride << "\n"
     << "cnn3d_pad_depth=" << c.cnn3d_pad_depth << "\n"
     << "seed=" << c.seed << "\n";
  return os.str();
}

inline ModelConfig parse_config(std::istream& is) {
  ModelConfig c;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, "config: bad line '", line, "'");
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "kind") c.kind = model_kind_from(val);
    else if (key == "preset") c.preset = val;
    else if (key == "depth") c.depth = std::stoi(val);
    else if (key == "hidden") c.hidden = std::stoi(val);
    else if (key == "kernel") c.kernel = std::stoi(val);
    else if (key == "embed_kernel") c.embed_kernel = std::stoi(val);
    else if (key == "embed_stride") c.embed_stride = std::stoi(val);
    else if (key == "hidden_stride") c.hidden_stride = std::stoi(val);
    else if (key == "in_channels") c.in_channels = std::stoi(val);
    else if (key == "cnn3d_stride") c.cnn3d_stride = std::stoi(val);
    else if (key == "cnn3d_first_stride") c.cnn3d_first_stride = std::stoi(val);
    else if (key == "cnn3d_pad_depth") c.cnn3d_pad_depth = std::stoi(val);
    else if (key == "seed") c.seed = std::stoull(val);
    else fail("config: unknown key '", key, "'");
  }
  require(c.depth >= 1 && c.hidden >= 1, "config: depth and hidden must be positive");
  return c;
}

struct Model {
  ModelConfig cfg;
  ParamStore params;
};

// ---------------------------------------------------------------------------
// Layer specs derived from a config (shared between build and forward).
// ---------------------------------------------------------------------------

namespace detail {

inline ConvSpec sx_embed_conv(const ModelConfig& c) {
  ConvSpec s;
  s.kernel = c.embed_kernel;
  s.stride = c.embed_stride;
  s.padding = c.embed_kernel == c.embed_stride ? Padding::valid : Padding::same;
  s.in_channels = c.in_channels;
  s.out_channels = c.hidden;
  s.spatial_arity = 1;
  return s;
}

inline ConvSpec sx_hidden_conv(const ModelConfig& c) {
  ConvSpec s;
  s.kernel = c.kernel;
  s.stride = c.hidden_stride;
  s.padding = Padding::same;
  s.in_channels = c.hidden;
  s.out_channels = c.hidden;
  s.spatial_arity = 1;
  return s;
}

inline LiftSpec gx_lift_spec(const ModelConfig& c) {
  LiftSpec s;
  s.conv.kernel = c.embed_kernel;
  s.conv.stride = c.embed_stride;
  s.conv.padding = c.embed_kernel == c.embed_stride ? Padding::valid : Padding::same;
  s.conv.in_channels = c.in_channels;
  s.conv.out_channels = c.hidden;
  s.conv.spatial_arity = 2;
  s.lead_pool = PoolMode::avg;
  s.agg = Aggregation::max;
  s.phi = PhiKind::ignore_node;
  return s;
}

inline SubsequentSpec gx_xconv_spec(const ModelConfig& c) {
  SubsequentSpec s;
  s.psi = SubsequentSpec::Psi::conv_pair;
  s.conv.kernel = c.kernel;
  s.conv.stride = 1;
  s.conv.padding = Padding::same;
  s.conv.in_channels = c.hidden;
  s.conv.out_channels = c.hidden;
  s.conv.spatial_arity = 2;
  s.agg = Aggregation::max;
  s.phi = PhiKind::node_neighbor_max;
  return s;
}

inline ConvSpec cnn3d_conv(const ModelConfig& c, int layer) {
  ConvSpec s;
  s.kernel = c.kernel;
  s.stride = layer == 0 ? c.cnn3d_first_stride : c.cnn3d_stride;
  s.padding = Padding::same;
  s.in_channels = layer == 0 ? c.in_channels : c.hidden;
  s.out_channels = c.hidden;
  s.spatial_arity = 3;  // used through the internal trailing-conv path
  return s;
}

inline Tensor conv_trailing_var_or_plain(const Tensor& x, const Tensor& w, const Tensor& b,
                                         const ConvSpec& s) {
  return conv_trailing(x, w, b, s.kernel, s.stride, s.padding, s.spatial_arity);
}

inline Var conv_trailing_var_or_plain(const Var& x, const Var& w, const Var& b,
                                      const ConvSpec& s) {
  return conv_trailing_var(x, w, b, s.kernel, s.stride, s.padding, s.spatial_arity);
}

inline Tensor init_uniform(CounterRng& rng, std::vector<std::size_t> shape, int spatial_rank,
                           std::size_t fan_in) {
  Tensor t(std::move(shape), spatial_rank);
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

inline void add_conv_params(ParamStore& ps, CounterRng& rng, const std::string& prefix,
                            const ConvSpec& s) {
  std::size_t taps = 1;
  std::vector<std::size_t> wshape;
  for (int d = 0; d < s.spatial_arity; ++d) {
    wshape.push_back(static_cast<std::size_t>(s.kernel));
    taps *= static_cast<std::size_t>(s.kernel);
  }
  wshape.push_back(static_cast<std::size_t>(s.in_channels));
  wshape.push_back(static_cast<std::size_t>(s.out_channels));
  const std::size_t fan_in = taps * static_cast<std::size_t>(s.in_channels);
  ps.add(prefix + ".w", init_uniform(rng, wshape, static_cast<int>(wshape.size()) - 1, fan_in));
  ps.add(prefix + ".b",
         init_uniform(rng, {static_cast<std::size_t>(s.out_channels)}, 0, fan_in));
}

inline void add_norm_params(ParamStore& ps, const std::string& prefix, int channels) {
  Tensor g({static_cast<std::size_t>(channels)}, 0);
  for (std::size_t i = 0; i < g.numel(); ++i) g[i] = 1.0;
  ps.add(prefix + ".g", g);
  ps.add(prefix + ".b", Tensor({static_cast<std::size_t>(channels)}, 0));
}

}  // namespace detail

inline Model build(const ModelConfig& cfg) {
  require(cfg.depth >= 1 && cfg.hidden >= 1, "build: depth and hidden must be positive");
  require(cfg.kernel >= 1 && cfg.embed_kernel >= 1 && cfg.embed_stride >= 1,
          "build: kernel sizes and strides must be positive");
  Model m;
  m.cfg = cfg;
  CounterRng rng(cfg.seed, 0x1417);
  ParamStore& ps = m.params;

  switch (cfg.kind) {
    case ModelKind::sxcnn: {
      for (int l = 0; l < cfg.depth; ++l) {
        const ConvSpec s = l == 0 ? detail::sx_embed_conv(cfg) : detail::sx_hidden_conv(cfg);
        detail::add_conv_params(ps, rng, "sx" + std::to_string(l), s);
        detail::add_norm_params(ps, "ln" + std::to_string(l), cfg.hidden);
      }
      break;
    }
    case ModelKind::gxcnn: {
      const LiftSpec lift = detail::gx_lift_spec(cfg);
      detail::add_conv_params(ps, rng, "lift", lift.conv);
      detail::add_norm_params(ps, "ln0", cfg.hidden);
      const SubsequentSpec xc = detail::gx_xconv_spec(cfg);
      for (int l = 1; l < cfg.depth; ++l) {
        detail::add_conv_params(ps, rng, "xc" + std::to_string(l) + ".node", xc.conv);
        detail::add_conv_params(ps, rng, "xc" + std::to_string(l) + ".nbr", xc.conv);
        detail::add_norm_params(ps, "ln" + std::to_string(l), cfg.hidden);
      }
      break;
    }
    case ModelKind::cnn3d: {
      for (int l = 0; l < cfg.depth; ++l) {
        detail::add_conv_params(ps, rng, "c" + std::to_string(l), detail::cnn3d_conv(cfg, l));
        detail::add_norm_params(ps, "ln" + std::to_string(l), cfg.hidden);
      }
      break;
    }
  }
  const std::size_t head_in = static_cast<std::size_t>(cfg.hidden);
  ps.add("head.w", detail::init_uniform(rng, {head_in, 1}, 1, head_in));
  ps.add("head.b", detail::init_uniform(rng, {1}, 0, head_in));
  return m;
}

inline std::size_t param_count(const Model& m) { return m.params.total_elements(); }

/// Reshapes inputs of spatial rank 2..5 into the rank-3 form the baseline CNN
/// consumes: rank 2 gains a zero-extended depth axis, ranks 4 and 5 flatten
/// their trailing spatial axes into the third one.
inline Tensor adapt_input_cnn3d(const Tensor& x, const ModelConfig& cfg) {
  const int k = x.spatial_rank();
  require(k >= 2 && k <= 5, "adapt_input_cnn3d: spatial rank must be in 2..5, got ", k);
  if (k == 3) return x;
  if (k == 2) {
    Tensor y = reshape(x, {x.extent(0), x.extent(1), 1, x.channels()}, 3);
    const std::size_t depth = static_cast<std::size_t>(std::max(1, cfg.cnn3d_pad_depth));
    if (depth > 1) y = zero_pad_axis(y, 2, 0, depth - 1);
    return y;
  }
  std::size_t flat = 1;
  for (int a = 2; a < k; ++a) flat *= x.extent(static_cast<std::size_t>(a));
  return reshape(x, {x.extent(0), x.extent(1), flat, x.channels()}, 3);
}

// ---------------------------------------------------------------------------
// Forward pass, generic over the evaluation context (plain tensors or tape).
// ---------------------------------------------------------------------------

template <class Ctx>
typename Ctx::value_type model_forward(const ModelConfig& cfg, Ctx& ctx,
                                       const typename Ctx::value_type& x) {
  using T = typename Ctx::value_type;
  const Tensor& xv = detail::plain(x);
  require(xv.channels() == static_cast<std::size_t>(cfg.in_channels),
          "model_forward: input has ", xv.channels(), " channels, config expects ",
          cfg.in_channels);

  T pooled = x;  // placeholder; replaced below
  switch (cfg.kind) {
    case ModelKind::sxcnn: {
      require(xv.spatial_rank() >= 1, "sxcnn: need at least one spatial axis");
      T h = x;
      for (int l = 0; l < cfg.depth; ++l) {
        const ConvSpec s = l == 0 ? detail::sx_embed_conv(cfg) : detail::sx_hidden_conv(cfg);
        h = axial_conv(h, ctx("sx" + std::to_string(l) + ".w"),
                       ctx("sx" + std::to_string(l) + ".b"), s, Aggregation::max,
                       PermSet::cyclic, PoolMode::max);
        h = layer_norm_channels(h, ctx("ln" + std::to_string(l) + ".g"),
                                ctx("ln" + std::to_string(l) + ".b"));
        h = relu(h);
      }
      pooled = global_pool(h, PoolMode::max);
      break;
    }
    case ModelKind::gxcnn: {
      require(xv.spatial_rank() >= 1, "gxcnn: need at least one spatial axis");
      const LiftSpec lift_spec = detail::gx_lift_spec(cfg);
      AxialFeatures<T> h = xv.spatial_rank() == 1
                               ? lift_1d(x, lift_spec, ctx("lift.w"), ctx("lift.b"))
                               : lift(x, lift_spec, ctx("lift.w"), ctx("lift.b"));
      for (auto& f : h.feats) {
        f = layer_norm_channels(f, ctx("ln0.g"), ctx("ln0.b"));
        f = relu(f);
      }
      const SubsequentSpec xc = detail::gx_xconv_spec(cfg);
      for (int l = 1; l < cfg.depth; ++l) {
        SubParams<T> sp;
        const std::string base = "xc" + std::to_string(l);
        sp.node_w = ctx(base + ".node.w");
        sp.node_b = ctx(base + ".node.b");
        sp.nbr_w = ctx(base + ".nbr.w");
        sp.nbr_b = ctx(base + ".nbr.b");
        h = subsequent(h, xc, sp);
        for (auto& f : h.feats) {
          f = layer_norm_channels(f, ctx("ln" + std::to_string(l) + ".g"),
                                  ctx("ln" + std::to_string(l) + ".b"));
          f = relu(f);
        }
      }
      // Axial max pooling: halve every spatial axis of every feature.
      for (auto& f : h.feats) {
        const Tensor& fv = detail::plain(f);
        std::vector<int> axes;
        std::vector<std::size_t> targets;
        for (int a = 0; a < fv.spatial_rank(); ++a) {
          const std::size_t n = fv.extent(static_cast<std::size_t>(a));
          if (n > 1) {
            axes.push_back(a);
            targets.push_back((n + 1) / 2);
          }
        }
        if (!axes.empty()) f = adaptive_pool(f, axes, targets, PoolMode::max);
      }
      pooled = global_pool(pool_features(h, Aggregation::max), PoolMode::max);
      break;
    }
    case ModelKind::cnn3d: {
      require(xv.spatial_rank() == 3,
              "cnn3d: spatial rank must be 3 (route other ranks through adapt_input_cnn3d)");
      T h = x;
      for (int l = 0; l < cfg.depth; ++l) {
        const ConvSpec s = detail::cnn3d_conv(cfg, l);
        h = detail::conv_trailing_var_or_plain(h, ctx("c" + std::to_string(l) + ".w"),
                                               ctx("c" + std::to_string(l) + ".b"), s);
        h = layer_norm_channels(h, ctx("ln" + std::to_string(l) + ".g"),
                                ctx("ln" + std::to_string(l) + ".b"));
        h = relu(h);
      }
      pooled = global_pool(h, PoolMode::max);
      break;
    }
  }

  T logit = dense_channels(pooled, ctx("head.w"), ctx("head.b"));
  return reshape(logit, {1}, 0);
}

/// Plain inference logit.
inline double forward_logit(const Model& m, const Tensor& x) {
  TensorCtx ctx{&m.params};
  return model_forward(m.cfg, ctx, x).as_scalar();
}

// ---------------------------------------------------------------------------
// Checkpointing: parameters as XNNP next to a UTF-8 key-value config file.
// ---------------------------------------------------------------------------

inline void save_model(const Model& m, const std::string& path) {
  m.params.save(path);
  std::ofstream os(path + ".cfg");
  require(bool(os), "save_model: cannot open ", path, ".cfg");
  os << serialize_config(m.cfg);
  require(bool(os), "save_model: write failed");
}

inline Model load_model(const std::string& path) {
  Model m;
  std::ifstream is(path + ".cfg");
  require(bool(is), "load_model: cannot open ", path, ".cfg");
  m.cfg = parse_config(is);
  m.params = ParamStore::load(path);
  return m;
}

}  // namespace xnn
