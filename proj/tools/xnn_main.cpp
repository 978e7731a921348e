// Command-line front end: dataset generation, training, evaluation,
// equivariance checking, parameter counting, and attention benchmarks.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include "xnn/bench.hpp"
#include "xnn/equiv.hpp"
#include "xnn/gpdata.hpp"
#include "xnn/models.hpp"
#include "xnn/train.hpp"

namespace {

int resolve_threads(int flag_value) {
  if (flag_value > 0) return flag_value;
  if (const char* env = std::getenv("XNN_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

xnn::GPSampleSet generate_parallel(int dim, std::size_t n_per_class, std::uint64_t seed,
                                   std::size_t grid_side, int threads) {
  using namespace xnn;
  GPSampleSet set;
  set.dimension = dim;
  set.grid_side = grid_side == 0 ? default_grid_side(dim) : grid_side;
  set.seed = seed;
  const std::size_t total = 2 * n_per_class;
  set.samples.resize(total);
  // Per-sample rng streams make the result independent of scheduling.
  auto worker = [&](std::size_t begin, std::size_t step) {
    for (std::size_t i = begin; i < total; i += step) {
      CounterRng rng(seed, i);
      const bool rbf = (i % 2 == 0);
      KernelSpec spec =
          sample_kernel_spec(rbf ? KernelSpec::Kind::rbf : KernelSpec::Kind::periodic, rng);
      set.samples[i].x = normalize(sample_gp_grid(dim, set.grid_side, spec, rng));
      set.samples[i].label = rbf ? 1 : 0;
    }
  };
  const int t = std::max(1, threads);
  if (t == 1) {
    worker(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < t; ++w) pool.emplace_back(worker, static_cast<std::size_t>(w), t);
    for (auto& th : pool) th.join();
  }
  return set;
}

std::string shape_string(const xnn::Tensor& t) {
  std::string s = "(";
  for (std::size_t i = 0; i < t.shape().size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(t.shape()[i]);
  }
  return s + ")";
}

std::vector<std::size_t> parse_shape(const std::string& spec) {
  std::vector<std::size_t> shape;
  std::string token;
  for (char c : spec + ",") {
    if (c == ',') {
      if (!token.empty()) shape.push_back(static_cast<std::size_t>(std::stoull(token)));
      token.clear();
    } else {
      token += c;
    }
  }
  xnn::require(!shape.empty(), "bench: empty --shape");
  return shape;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace xnn;
  CLI::App app{"xnn: dimension-agnostic axial network toolkit"};
  app.require_subcommand(1);
  int threads_flag = 0;
  app.add_option("--threads", threads_flag, "worker thread cap (default: XNN_THREADS or all)");

  // gen-data ---------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic GP dataset");
  int gd_dim = 2;
  std::size_t gd_n = 100;
  std::uint64_t gd_seed = 0;
  std::string gd_out;
  std::size_t gd_side = 0;
  gen->add_option("--dim", gd_dim, "dimension d")->required()->check(CLI::Range(2, 5));
  gen->add_option("--n-per-class", gd_n, "samples per kernel class")
      ->required()
      ->check(CLI::Range(std::size_t{1}, std::size_t{1000000}));
  gen->add_option("--seed", gd_seed, "rng seed");
  gen->add_option("--out", gd_out, "output XNND path")->required();
  gen->add_option("--grid-side", gd_side, "grid side override (default 2^(7-d))");

  // train ------------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "train a model on an XNND dataset");
  std::string tr_model = "gxcnn", tr_preset = "appendixD", tr_data, tr_out, tr_metrics,
              tr_config;
  std::uint64_t tr_seed = 0;
  int tr_epochs = 10, tr_depth = 0, tr_hidden = 0, tr_kernel = 0;
  int tr_embed_kernel = 0, tr_embed_stride = 0, tr_hidden_stride = 0;
  double tr_lr = 1e-3, tr_val_frac = 0.2;
  std::size_t tr_batch = 64;
  tr->add_option("--model", tr_model, "cnn3d | sxcnn | gxcnn")->required();
  tr->add_option("--preset", tr_preset, "table1 | appendixD");
  tr->add_option("--data", tr_data, "XNND dataset path")->required();
  tr->add_option("--seed", tr_seed, "training + init seed");
  tr->add_option("--out", tr_out, "checkpoint output path (XNNP + .cfg)");
  tr->add_option("--metrics", tr_metrics, "metrics CSV output path");
  tr->add_option("--config", tr_config, "model config file (flags override)");
  tr->add_option("--epochs", tr_epochs, "epochs (0 = evaluation only)");
  tr->add_option("--lr", tr_lr, "learning rate");
  tr->add_option("--batch", tr_batch, "batch size");
  tr->add_option("--val-frac", tr_val_frac, "validation fraction of the dataset");
  tr->add_option("--depth", tr_depth, "override layer count");
  tr->add_option("--kernel", tr_kernel, "override hidden-layer kernel size");
  tr->add_option("--embed-kernel", tr_embed_kernel, "override embedding kernel");
  tr->add_option("--embed-stride", tr_embed_stride, "override embedding stride");
  tr->add_option("--hidden-stride", tr_hidden_stride, "override hidden-layer stride");
  tr->add_option("--hidden", tr_hidden, "override hidden width");

  // eval -------------------------------------------------------------------
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string ev_ckpt, ev_data;
  double ev_val_frac = 0.0;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--data", ev_data, "XNND dataset path")->required();
  ev->add_option("--val-frac", ev_val_frac, "evaluate only the trailing fraction (0 = all)");

  // check-equiv ------------------------------------------------------------
  auto* ce = app.add_subcommand("check-equiv", "run equivariance property sweeps");
  std::string ce_target = "sxnn", ce_model = "gxcnn", ce_preset = "appendixD";
  int ce_rank = 3, ce_trials = 10;
  std::uint64_t ce_seed = 0;
  ce->add_option("--target", ce_target, "sxnn | gxnn | model")->required();
  ce->add_option("--rank", ce_rank, "spatial rank")->check(CLI::Range(1, 5));
  ce->add_option("--trials", ce_trials, "random trials");
  ce->add_option("--seed", ce_seed, "rng seed");
  ce->add_option("--model", ce_model, "model kind when --target model");
  ce->add_option("--preset", ce_preset, "model preset when --target model");

  // param-count ------------------------------------------------------------
  auto* pc = app.add_subcommand("param-count", "print model parameter counts");
  std::string pc_model, pc_preset = "table1";
  int pc_rank = 3;
  pc->add_option("--model", pc_model, "cnn3d | sxcnn | gxcnn (default: all)");
  pc->add_option("--preset", pc_preset, "table1 | appendixD");
  pc->add_option("--rank", pc_rank, "input spatial rank (counts are rank-independent)");

  // bench ------------------------------------------------------------------
  auto* be = app.add_subcommand("bench", "micro-benchmarks");
  std::string be_op = "attention", be_shape = "16,16,16";
  std::size_t be_channels = 32;
  int be_heads = 4;
  std::uint64_t be_seed = 0;
  be->add_option("--op", be_op, "benchmark target (attention)");
  be->add_option("--shape", be_shape, "comma-separated spatial lengths");
  be->add_option("--channels", be_channels, "embedding channels");
  be->add_option("--heads", be_heads, "attention heads");
  be->add_option("--seed", be_seed, "rng seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    app.exit(e);
    return 2;
  }

  try {
    const int threads = resolve_threads(threads_flag);

    if (*gen) {
      GPSampleSet set = generate_parallel(gd_dim, gd_n, gd_seed, gd_side, threads);
      save_dataset(set, gd_out);
      std::printf("dimension=%d shape=%s count=%zu rng=%s seed=%llu out=%s\n", set.dimension,
                  shape_string(set.samples[0].x).c_str(), set.samples.size(),
                  CounterRng::kAlgorithm, static_cast<unsigned long long>(set.seed),
                  gd_out.c_str());
      return 0;
    }

    if (*tr) {
      ModelConfig cfg = model_preset(model_kind_from(tr_model), tr_preset, tr_seed);
      if (!tr_config.empty()) {
        std::ifstream is(tr_config);
        require(bool(is), "cannot open config file ", tr_config);
        cfg = parse_config(is);
        cfg.seed = tr_seed;
      }
      if (tr_depth > 0) cfg.depth = tr_depth;
      if (tr_hidden > 0) cfg.hidden = tr_hidden;
      if (tr_kernel > 0) cfg.kernel = tr_kernel;
      if (tr_embed_kernel > 0) cfg.embed_kernel = tr_embed_kernel;
      if (tr_embed_stride > 0) cfg.embed_stride = tr_embed_stride;
      if (tr_hidden_stride > 0) cfg.hidden_stride = tr_hidden_stride;

      GPSampleSet data = load_dataset(tr_data);
      require(!data.samples.empty(), "dataset is empty");
      GPSampleSet train_set = data, val_set = data;
      if (tr_val_frac > 0.0) {
        std::tie(train_set, val_set) = split(data, 1.0 - tr_val_frac);
      } else {
        val_set.samples.clear();
      }

      Model model = build(cfg);
      std::printf("model=%s preset=%s depth=%d hidden=%d params=%zu train=%zu val=%zu\n",
                  to_string(cfg.kind), cfg.preset.c_str(), cfg.depth, cfg.hidden,
                  param_count(model), train_set.samples.size(), val_set.samples.size());

      Metrics metrics;
      if (tr_epochs == 0) {
        EpochMetrics em;
        em.epoch = 0;
        const EvalResult tr_r = evaluate(model, train_set);
        em.train_loss = tr_r.loss;
        em.train_acc = tr_r.accuracy;
        if (!val_set.samples.empty()) {
          const EvalResult va = evaluate(model, val_set);
          em.val_loss = va.loss;
          em.val_acc = va.accuracy;
        }
        metrics.epochs.push_back(em);
        std::printf("eval-only train_loss=%.6f train_acc=%.4f val_loss=%.6f val_acc=%.4f\n",
                    em.train_loss, em.train_acc, em.val_loss, em.val_acc);
      } else {
        TrainConfig tc;
        tc.learning_rate = tr_lr;
        tc.batch_size = tr_batch;
        tc.epochs = tr_epochs;
        tc.seed = tr_seed;
        metrics = train_model(model, train_set, val_set, tc);
        for (const auto& e : metrics.epochs)
          std::printf("epoch=%d train_loss=%.6f train_acc=%.4f val_loss=%.6f val_acc=%.4f "
                      "seconds=%.2f\n",
                      e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc,
                      e.train_seconds + e.val_seconds);
        std::printf("final val_acc=%.4f\n",
                    metrics.epochs.empty() ? 0.0 : metrics.epochs.back().val_acc);
      }
      if (!tr_metrics.empty()) write_metrics_csv(metrics, tr_metrics);
      if (!tr_out.empty()) save_model(model, tr_out);
      return 0;
    }

    if (*ev) {
      Model model = load_model(ev_ckpt);
      GPSampleSet data = load_dataset(ev_data);
      if (ev_val_frac > 0.0) data = split(data, 1.0 - ev_val_frac).second;
      const EvalResult r = evaluate(model, data);
      std::printf("samples=%zu loss=%.6f accuracy=%.4f\n", data.samples.size(), r.loss,
                  r.accuracy);
      return 0;
    }

    if (*ce) {
      double residual = 0.0;
      if (ce_target == "sxnn") {
        const auto res = checks::sxnn_equivariance_sweep(ce_rank, ce_trials, ce_seed);
        residual = res.max_residual;
        std::printf("MAX_RESIDUAL=%.3e\n", residual);
        if (res.exact_violation) {
          std::printf("FAIL: max-aggregation branches were not bitwise equivariant\n");
          return 1;
        }
        return residual <= checks::kEquivRelTol ? 0 : 1;
      }
      if (ce_target == "gxnn") {
        if (ce_rank < 2) {
          std::printf("MAX_RESIDUAL=0\n");  // singleton permutation group
          return 0;
        }
        const auto a = checks::gxnn_equivariance_sweep(ce_rank, ce_trials, ce_seed);
        const auto b = checks::psi_structural_sweep(ce_rank, ce_trials, ce_seed + 1);
        residual = std::max(a.max_residual, b.max_residual);
        std::printf("MAX_RESIDUAL=%.3e\n", residual);
        return residual <= checks::kEquivRelTol ? 0 : 1;
      }
      if (ce_target == "model") {
        const ModelKind kind = model_kind_from(ce_model);
        if (kind == ModelKind::cnn3d) {
          residual = checks::cnn3d_counterexample(ce_trials, ce_seed);
          std::printf("MAX_RESIDUAL=%.3e\n", residual);
          std::printf("note: cnn3d is not axis-permutation invariant (expected); "
                      "informational only\n");
          return 0;
        }
        const auto res =
            checks::model_invariance_sweep(kind, ce_preset, ce_rank, ce_trials, ce_seed);
        residual = res.max_residual;
        std::printf("MAX_RESIDUAL=%.3e\n", residual);
        return residual <= checks::kLogitInvTol ? 0 : 1;
      }
      std::fprintf(stderr, "unknown --target '%s'\n", ce_target.c_str());
      return 2;
    }

    if (*pc) {
      auto report = [&](ModelKind kind) {
        const Model m = build(model_preset(kind, pc_preset, 0));
        std::printf("%s preset=%s rank=%d params=%zu\n", to_string(kind), pc_preset.c_str(),
                    pc_rank, param_count(m));
        return param_count(m);
      };
      if (!pc_model.empty()) {
        report(model_kind_from(pc_model));
      } else {
        report(ModelKind::cnn3d);
        const std::size_t sx = report(ModelKind::sxcnn);
        const std::size_t gx = report(ModelKind::gxcnn);
        std::printf("gxcnn/sxcnn ratio=%.2f\n",
                    static_cast<double>(gx) / static_cast<double>(sx));
      }
      return 0;
    }

    if (*be) {
      if (be_op != "attention") {
        std::fprintf(stderr, "bench: unsupported --op '%s'\n", be_op.c_str());
        return 2;
      }
      const auto shape = parse_shape(be_shape);
      require(be_channels % static_cast<std::size_t>(be_heads) == 0,
              "bench: channels must divide by heads");
      const auto r = bench_axial_attention(shape, be_channels, be_heads, be_seed);
      std::printf("axial: score_macs=%llu entries_per_row=%.1f wall=%.3fs\n",
                  static_cast<unsigned long long>(r.axial_macs), r.axial_entries_per_row,
                  r.axial_seconds);
      std::printf("flat:  score_macs=%llu entries_per_row=%.1f wall=%.3fs\n",
                  static_cast<unsigned long long>(r.flat_macs), r.flat_entries_per_row,
                  r.flat_seconds);
      std::printf("MULT_RATIO=%.6e\n", r.per_row_ratio);
      return 0;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 2;
}
