#pragma once

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <string>
#include <vector>

#include "iclab/config.hpp"
#include "iclab/convergence.hpp"
#include "iclab/infotheory.hpp"
#include "iclab/trainer.hpp"

namespace iclab {
namespace cli {

// Exit contract shared by every subcommand.
inline constexpr int kPass = 0;
inline constexpr int kFail = 1;
inline constexpr int kUsage = 2;

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f << text;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  write_text(path, j.dump(2) + "\n");
}

inline std::string shape_x(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

inline std::filesystem::path prepare_out_dir(const std::string& configured) {
  const std::string resolved = iclab::detail::resolve_output_dir(configured);
  std::filesystem::create_directories(resolved);
  return resolved;
}

}  // namespace detail

/// Exact gated-joint sweep: every record must satisfy both closed forms
/// (information scales by p^2, marginal entropy by p plus the gate entropy).
inline int run_verify_theorem1(const std::vector<double>& p_list, std::size_t trials,
                               double tolerance, std::uint64_t seed,
                               const std::string& out_opt) {
  const auto out_dir = detail::prepare_out_dir(out_opt);
  Rng rng(seed);
  nlohmann::json records = nlohmann::json::array();
  std::string csv = "p_keep,mi_orig,mi_gated,mi_ratio,mi_residual,entropy_residual,tolerance,pass\n";
  std::size_t passed = 0;
  double worst_mi = 0, worst_entropy = 0;
  for (double p : p_list) {
    for (std::size_t t = 0; t < trials; ++t) {
      const std::size_t side = t % 2 == 0 ? 3 : 5;
      DiscreteJoint j = DiscreteJoint::random(rng, side, side);
      Theorem1Report r = verify_theorem1(j, p, tolerance);
      records.push_back({{"p_keep", r.p_keep},
                         {"mi_orig", r.mi_orig},
                         {"mi_gated", r.mi_gated},
                         {"mi_ratio", r.mi_ratio},
                         {"mi_residual", r.mi_residual},
                         {"entropy_residual", r.entropy_residual},
                         {"tolerance", r.tolerance},
                         {"pass", r.pass}});
      using iclab::detail::fmt_real;
      csv += fmt_real(r.p_keep) + "," + fmt_real(r.mi_orig) + "," + fmt_real(r.mi_gated) + "," +
             fmt_real(r.mi_ratio) + "," + fmt_real(r.mi_residual) + "," +
             fmt_real(r.entropy_residual) + "," + fmt_real(r.tolerance) + "," +
             (r.pass ? "1" : "0") + "\n";
      passed += r.pass ? 1 : 0;
      worst_mi = std::max(worst_mi, r.mi_residual);
      worst_entropy = std::max(worst_entropy, r.entropy_residual);
    }
  }
  const std::size_t total = records.size();
  detail::write_json(out_dir / "theorem1.json",
                     {{"p_keep_values", p_list},
                      {"trials_per_p", trials},
                      {"tolerance", tolerance},
                      {"seed", seed},
                      {"records", records},
                      {"all_pass", passed == total}});
  detail::write_text(out_dir / "theorem1.csv", csv);
  if (passed == total)
    std::printf("theorem1: %zu/%zu records pass (max mi residual %.3g, max entropy residual %.3g) -> %s\n",
                passed, total, worst_mi, worst_entropy, (out_dir / "theorem1.json").c_str());
  else
    std::printf("theorem1: FAIL %zu/%zu records exceed tolerance %g -> %s\n", total - passed,
                total, tolerance, (out_dir / "theorem1.json").c_str());
  return passed == total ? kPass : kFail;
}

/// Monte-Carlo sweep of the gated-correlation closed form over every (p, c)
/// combination; each estimate must land within its own 3-sigma band.
inline int run_verify_correlation(const std::vector<double>& p_list,
                                  const std::vector<double>& c_list, std::size_t samples,
                                  std::uint64_t seed, const std::string& out_opt) {
  const auto out_dir = detail::prepare_out_dir(out_opt);
  Rng master(seed);
  nlohmann::json records = nlohmann::json::array();
  std::string csv = "p_keep,c_target,c_before,c_after,predicted,residual,mc_stderr,n_samples,pass\n";
  std::size_t passed = 0, stream = 0;
  double worst_z = 0;
  for (double p : p_list) {
    for (double c : c_list) {
      Rng sub = master.child(stream++);
      CorrelationReport r = correlation_scaling_check(sub, p, c, samples);
      records.push_back({{"p_keep", r.p_keep},
                         {"c_target", r.c_target},
                         {"c_before", r.c_before},
                         {"c_after", r.c_after},
                         {"predicted", r.predicted},
                         {"residual", r.residual},
                         {"mc_stderr", r.mc_stderr},
                         {"n_samples", r.n_samples},
                         {"pass", r.pass}});
      using iclab::detail::fmt_real;
      csv += fmt_real(r.p_keep) + "," + fmt_real(r.c_target) + "," + fmt_real(r.c_before) + "," +
             fmt_real(r.c_after) + "," + fmt_real(r.predicted) + "," + fmt_real(r.residual) +
             "," + fmt_real(r.mc_stderr) + "," + std::to_string(r.n_samples) + "," +
             (r.pass ? "1" : "0") + "\n";
      passed += r.pass ? 1 : 0;
      if (r.mc_stderr > 0) worst_z = std::max(worst_z, r.residual / r.mc_stderr);
    }
  }
  const std::size_t total = records.size();
  detail::write_json(out_dir / "correlation.json", {{"p_keep_values", p_list},
                                                    {"c_values", c_list},
                                                    {"n_samples", samples},
                                                    {"seed", seed},
                                                    {"records", records},
                                                    {"all_pass", passed == total}});
  detail::write_text(out_dir / "correlation.csv", csv);
  if (passed == total)
    std::printf("correlation: %zu/%zu checks within 3 sigma (worst z %.2f) -> %s\n", passed,
                total, worst_z, (out_dir / "correlation.json").c_str());
  else
    std::printf("correlation: FAIL %zu/%zu checks outside 3 sigma -> %s\n", total - passed, total,
                (out_dir / "correlation.json").c_str());
  return passed == total ? kPass : kFail;
}

/// Gradient-descent race between a whitened and a planted-kappa design.
/// Passes when the whitened racer is at least kappa/10 times faster, the
/// scale-aware form of the >= 10x requirement at kappa = 100.
inline int run_whiten_race(double kappa, std::size_t dim, double tol, std::uint64_t seed,
                           const std::string& out_opt) {
  const auto out_dir = detail::prepare_out_dir(out_opt);
  Rng rng(seed);
  RacePair pair = linreg_gd_race(rng, dim, kappa, tol);
  const double speedup = pair.whitened.iterations_to_tol > 0
                             ? double(pair.correlated.iterations_to_tol) /
                                   double(pair.whitened.iterations_to_tol)
                             : std::numeric_limits<double>::infinity();
  const double required = kappa / 10.0;
  const bool pass = speedup >= required;
  auto report_json = [](const ConditioningReport& r) {
    return nlohmann::json{{"kappa", r.kappa},
                          {"iterations", r.iterations_to_tol},
                          {"final_loss", r.final_loss}};
  };
  detail::write_json(out_dir / "race.json", {{"kappa_target", kappa},
                                             {"dim", dim},
                                             {"tol", tol},
                                             {"seed", seed},
                                             {"whitened", report_json(pair.whitened)},
                                             {"correlated", report_json(pair.correlated)},
                                             {"speedup", speedup},
                                             {"required_speedup", required},
                                             {"pass", pass}});
  using iclab::detail::fmt_real;
  detail::write_text(out_dir / "race.csv",
                     "racer,kappa,iterations,final_loss\n"
                     "whitened," + fmt_real(pair.whitened.kappa) + "," +
                         std::to_string(pair.whitened.iterations_to_tol) + "," +
                         fmt_real(pair.whitened.final_loss) + "\n" +
                         "correlated," + fmt_real(pair.correlated.kappa) + "," +
                         std::to_string(pair.correlated.iterations_to_tol) + "," +
                         fmt_real(pair.correlated.final_loss) + "\n");
  std::printf("race: kappa %g -> whitened %zu iters, correlated %zu iters, speedup %.1fx (need >= %.1f): %s -> %s\n",
              kappa, pair.whitened.iterations_to_tol, pair.correlated.iterations_to_tol, speedup,
              required, pass ? "pass" : "FAIL", (out_dir / "race.json").c_str());
  return pass ? kPass : kFail;
}

/// Per-sample sign coherence of the classifier-head weight gradient on a live
/// batch from the configured network and data. A rectifier-fed head must be
/// exactly coherent; a normalize-and-gate-fed head of width >= 4 must not be.
inline int run_diagnose_zigzag(const std::string& config_path, std::size_t samples) {
  RunConfig cfg = load_config(config_path);
  const auto out_dir = detail::prepare_out_dir(cfg.output_dir);

  const NetSpec spec = cfg.net_spec();
  Rng master(cfg.seed);
  Rng init = master.child(0);
  Rng drop = master.child(3);
  auto net = build_network<double>(spec, init);
  auto* seq = dynamic_cast<Sequential<double>*>(net.get());
  if (seq == nullptr || seq->size() < 2) throw Error("diagnose-zigzag: unexpected net shape");

  DataBundle data = load_data(cfg.data_source());
  const std::size_t b = std::min<std::size_t>(samples, data.train.size());
  if (b < 2) throw ValueError("diagnose-zigzag: need at least 2 probe samples");

  const Shape& s = data.train.images.shape();
  const std::size_t per = s[1] * s[2] * s[3];
  TensorD x({b, s[1], s[2], s[3]});
  for (std::size_t i = 0; i < b * per; ++i) x[i] = double(data.train.images[i]);
  std::vector<std::size_t> labels(data.train.labels.begin(), data.train.labels.begin() + long(b));

  // body in training mode so batch statistics and gates are live
  TensorD h = x;
  for (std::size_t i = 0; i + 1 < seq->size(); ++i) h = seq->at(i).forward(h, true, &drop);
  if (h.rank() != 2) throw Error("diagnose-zigzag: head input is not a feature matrix");
  const std::size_t d = h.dim(1);
  TensorD logits = seq->at(seq->size() - 1).forward(h, true, &drop);
  auto [loss, dlogits] = softmax_cross_entropy(logits, labels);
  (void)loss;
  const std::size_t k = logits.dim(1);

  std::string csv = "sample,coherent_fraction,rows_measured\n";
  double frac_sum = 0, frac_min = 1, frac_max = 0;
  std::size_t measured = 0;
  for (std::size_t bi = 0; bi < b; ++bi) {
    TensorD g({k, d});
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t i = 0; i < d; ++i) g.at(j, i) = dlogits.at(bi, j) * h.at(bi, i);
    SignCoherenceReport rep = sign_coherence(g);
    if (rep.empty) continue;
    ++measured;
    frac_sum += rep.coherent_fraction;
    frac_min = std::min(frac_min, rep.coherent_fraction);
    frac_max = std::max(frac_max, rep.coherent_fraction);
    csv += std::to_string(bi) + "," + iclab::detail::fmt_real(rep.coherent_fraction) + "," +
           std::to_string(rep.n_rows_measured) + "\n";
  }
  if (measured == 0) {
    std::printf("zigzag[%s]: FAIL no measurable gradient rows\n", layout_name(spec.layout));
    return kFail;
  }
  const double mean = frac_sum / double(measured);

  std::size_t negatives = 0;
  for (std::size_t i = 0; i < h.size(); ++i) negatives += h[i] < 0 ? 1 : 0;
  const double negative_feed = double(negatives) / double(h.size());

  const bool relu_fed = spec.layout == UnitLayout::kBaseline;
  const bool pass = relu_fed ? mean == 1.0 : (d >= 4 && mean < 0.5);
  detail::write_json(out_dir / "zigzag.json",
                     {{"layout", layout_name(spec.layout)},
                      {"head_feed", relu_fed ? "relu" : "ic"},
                      {"head_width", d},
                      {"samples_measured", measured},
                      {"mean_coherence", mean},
                      {"min_coherence", frac_min},
                      {"max_coherence", frac_max},
                      {"negative_feed_fraction", negative_feed},
                      {"threshold", relu_fed ? "== 1" : "< 0.5"},
                      {"pass", pass}});
  detail::write_text(out_dir / "zigzag.csv", csv);
  std::printf("zigzag[%s]: %s-fed head width %zu, mean row coherence %g over %zu samples (need %s): %s -> %s\n",
              layout_name(spec.layout), relu_fed ? "relu" : "ic", d, mean, measured,
              relu_fed ? "== 1" : "< 0.5", pass ? "pass" : "FAIL",
              (out_dir / "zigzag.json").c_str());
  return pass ? kPass : kFail;
}

/// Layer-by-layer shape walk plus parameter and weighted-layer counts for the
/// configured architecture; fails if the walked count disagrees with the
/// depth formula.
inline int run_arch_dump(const std::string& config_path) {
  RunConfig cfg = load_config(config_path);
  const auto out_dir = detail::prepare_out_dir(cfg.output_dir);

  const NetSpec spec = cfg.net_spec();
  Rng rng(cfg.seed);
  auto net = build_network<float>(spec, rng);
  const std::size_t params = parameter_count(*net);
  const std::size_t weighted = weighted_layer_count(*net);
  const std::vector<LayerShape> shapes = forward_shapes(spec);

  nlohmann::json layers = nlohmann::json::array();
  std::string csv = "index,layer,output_shape\n";
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    layers.push_back({{"name", shapes[i].name}, {"output_shape", shapes[i].shape}});
    csv += std::to_string(i) + "," + shapes[i].name + "," + detail::shape_x(shapes[i].shape) + "\n";
  }
  const char* formula = spec.bottleneck ? "9n+2" : "6n+2";
  const bool pass = weighted == spec.weighted_layers();
  detail::write_json(out_dir / "arch.json",
                     {{"layout", layout_name(spec.layout)},
                      {"family", spec.bottleneck ? "bottleneck" : "plain"},
                      {"n", spec.n},
                      {"num_classes", spec.num_classes},
                      {"input_shape", Shape{spec.in_channels, spec.input_hw, spec.input_hw}},
                      {"parameter_count", params},
                      {"weighted_layers", weighted},
                      {"depth_formula", formula},
                      {"pass", pass},
                      {"layers", layers}});
  detail::write_text(out_dir / "layers.csv", csv);
  std::printf("arch[%s n=%zu %s]: %zu parameters, %zu weighted layers (%s %s): %s -> %s\n",
              layout_name(spec.layout), spec.n, spec.bottleneck ? "bottleneck" : "plain", params,
              weighted, formula, pass ? "ok" : "mismatch", pass ? "pass" : "FAIL",
              (out_dir / "arch.json").c_str());
  return pass ? kPass : kFail;
}

/// Full training run; per-epoch progress goes to stderr, the summary line and
/// artifacts follow the training-loop contract.
inline int run_train(const std::string& config_path) {
  RunConfig cfg = load_config(config_path);
  try {
    TrainResult res = train_run(cfg, [&](const EpochRecord& r) {
      std::fprintf(stderr, "epoch %zu/%zu  train %.4f / %.2f%%  test %.4f / %.2f%%  %lld ms\n",
                   r.epoch + 1, cfg.epochs, r.train_loss, 100.0 * r.train_acc, r.test_loss,
                   100.0 * r.test_acc, static_cast<long long>(r.wall_ms));
    });
    double best = 0;
    for (const EpochRecord& r : res.records) best = std::max(best, r.test_acc);
    std::printf("train: %zu epochs, final test acc %.4f, best %.4f: pass -> %s\n",
                res.records.size(), res.records.back().test_acc, best, res.output_dir.c_str());
    return kPass;
  } catch (const DivergenceError& e) {
    std::printf("train: FAIL %s\n", e.what());
    return kFail;
  }
}

}  // namespace cli

/// Entry point behind main(). Args exclude the program name and arrive in
/// command-line order. Exit codes: 0 every check passed, 1 a check failed,
/// 2 usage or configuration error.
inline int cli_main(std::vector<std::string> args) {
  CLI::App app{"independent-component layer lab: train networks and check the layer's closed forms"};
  app.require_subcommand(1);

  std::vector<double> t1_p{0.05, 0.25, 0.5, 0.75, 0.95};
  std::size_t t1_trials = 100;
  double t1_tol = 1e-10;
  std::uint64_t t1_seed = 1;
  std::string t1_out = "out";
  CLI::App* t1 = app.add_subcommand("verify-theorem1",
                                    "check information decay by p^2 and the entropy identity on "
                                    "random discrete joints");
  t1->add_option("--p", t1_p, "keep probabilities, comma separated")->delimiter(',');
  t1->add_option("--trials", t1_trials, "random joints per keep probability");
  t1->add_option("--tolerance", t1_tol, "absolute residual bound in bits");
  t1->add_option("--seed", t1_seed, "joint-sampling seed");
  t1->add_option("--out", t1_out, "output directory");

  std::vector<double> co_p{0.5, 0.95};
  std::vector<double> co_c{0.0, 0.3, 0.8};
  std::size_t co_samples = 1'000'000;
  std::uint64_t co_seed = 1;
  std::string co_out = "out";
  CLI::App* co = app.add_subcommand("verify-correlation",
                                    "Monte-Carlo check that gating scales correlation by p");
  co->add_option("--p", co_p, "keep probabilities, comma separated")->delimiter(',');
  co->add_option("--c", co_c, "planted correlations, comma separated")->delimiter(',');
  co->add_option("--samples", co_samples, "Monte-Carlo sample count per combination");
  co->add_option("--seed", co_seed, "sampling seed");
  co->add_option("--out", co_out, "output directory");

  double ra_kappa = 100.0;
  std::size_t ra_dim = 8;
  double ra_tol = 1e-8;
  std::uint64_t ra_seed = 1;
  std::string ra_out = "out";
  CLI::App* ra = app.add_subcommand("whiten-race",
                                    "race gradient descent on whitened vs ill-conditioned least squares");
  ra->add_option("--kappa", ra_kappa, "planted condition number");
  ra->add_option("--dim", ra_dim, "feature dimension (2..64)");
  ra->add_option("--tol", ra_tol, "loss tolerance both racers must reach");
  ra->add_option("--seed", ra_seed, "design-sampling seed");
  ra->add_option("--out", ra_out, "output directory");

  std::string zz_config;
  std::size_t zz_samples = 64;
  CLI::App* zz = app.add_subcommand("diagnose-zigzag",
                                    "measure per-sample sign coherence of the classifier-head "
                                    "gradient for the configured network");
  zz->add_option("config", zz_config, "run config file")->required();
  zz->add_option("--samples", zz_samples, "probe batch size");

  std::string ad_config;
  CLI::App* ad = app.add_subcommand("arch-dump",
                                    "dump layer shapes, parameter count and weighted-layer count");
  ad->add_option("config", ad_config, "run config file")->required();

  std::string tr_config;
  CLI::App* tr = app.add_subcommand("train", "run the training loop described by a config file");
  tr->add_option("config", tr_config, "run config file")->required();

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : cli::kUsage;
  }

  try {
    if (t1->parsed()) return cli::run_verify_theorem1(t1_p, t1_trials, t1_tol, t1_seed, t1_out);
    if (co->parsed()) return cli::run_verify_correlation(co_p, co_c, co_samples, co_seed, co_out);
    if (ra->parsed()) return cli::run_whiten_race(ra_kappa, ra_dim, ra_tol, ra_seed, ra_out);
    if (zz->parsed()) return cli::run_diagnose_zigzag(zz_config, zz_samples);
    if (ad->parsed()) return cli::run_arch_dump(ad_config);
    if (tr->parsed()) return cli::run_train(tr_config);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return cli::kUsage;
  } catch (const SpecError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return cli::kUsage;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return cli::kUsage;
  } catch (const ValueError& e) {
    std::fprintf(stderr, "argument error: %s\n", e.what());
    return cli::kUsage;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return cli::kUsage;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return cli::kFail;
  }
  return cli::kUsage;
}

}  // namespace iclab
