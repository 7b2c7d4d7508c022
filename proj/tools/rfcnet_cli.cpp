// rfcnet: analysis, verification, training, evaluation and prediction for
// the loose-dense-connection segmentation network.
//
// Exit codes: 0 success, 1 runtime/check failure, 2 usage error.

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rfcnet/analysis.hpp"
#include "rfcnet/data.hpp"
#include "rfcnet/gradcheck.hpp"
#include "rfcnet/model.hpp"
#include "rfcnet/train.hpp"

namespace {

std::vector<int> parse_kernel_list(const std::string& text) {
  std::vector<int> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t pos = 0;
      out.push_back(std::stoi(item, &pos));
      if (pos != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw rfc::ArgumentError("--kernels: '" + item + "' is not an integer");
    }
  }
  if (out.empty()) throw rfc::ArgumentError("--kernels: empty list");
  return out;
}

std::uint64_t seed_from_env_or(std::uint64_t fallback) {
  const char* env = std::getenv("RFCNET_SEED");
  if (!env || !*env) return fallback;
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(env, &pos);
    if (env[pos] != '\0') throw std::invalid_argument(env);
    return v;
  } catch (const std::exception&) {
    throw rfc::ArgumentError(std::string("RFCNET_SEED is not an unsigned integer: '") + env + "'");
  }
}

// Model-shape flags shared by the commands that build a fresh network.
struct CommonFlags {
  std::string preset;
  int m = 0;
  std::string kernels;
  int depth = 3;
  int width = 16;
  int classes = 2;
  std::string merge = "concat";
  std::uint64_t seed = 1;
  CLI::Option* seed_opt = nullptr;

  void add_to(CLI::App* cmd) {
    auto* preset_opt =
        cmd->add_option("--preset", preset, "published configuration: a [m=3,k=3,5,7], b [m=3,k=3,3,3], "
                                            "c [m=2,k=3,5], d [m=2,k=3,3]")
            ->check(CLI::IsMember({"a", "b", "c", "d"}));
    auto* m_opt = cmd->add_option("--m", m, "tree fan-out (children per group)");
    auto* kernels_opt =
        cmd->add_option("--kernels", kernels, "comma-separated kernel cycle, one entry per branch rank");
    preset_opt->excludes(m_opt);
    preset_opt->excludes(kernels_opt);
    cmd->add_option("--depth", depth, "tree levels (leaf groups = m^depth)")->capture_default_str();
    cmd->add_option("--width", width, "channels per tree group (also the stem width)")
        ->capture_default_str();
    cmd->add_option("--classes", classes, "output classes")->capture_default_str();
    cmd->add_option("--merge", merge, "strong/loose merge mode")
        ->check(CLI::IsMember({"concat", "add"}))
        ->capture_default_str();
    seed_opt = cmd->add_option("--seed", seed, "RNG seed (default: $RFCNET_SEED or 1)");
  }

  rfc::RfcConfig to_config() const {
    rfc::RfcConfig cfg;
    if (!preset.empty()) cfg = rfc::RfcConfig::preset(preset[0]);
    if (m > 0) cfg.m = m;
    if (!kernels.empty()) cfg.kernels = parse_kernel_list(kernels);
    cfg.depth = depth;
    cfg.width = width;
    cfg.stem1 = width;
    cfg.stem2 = width;
    cfg.num_classes = classes;
    cfg.merge = rfc::merge_mode_from_string(merge);
    cfg.seed = (seed_opt && seed_opt->count() > 0) ? seed : seed_from_env_or(seed);
    cfg.validate();
    return cfg;
  }
};

std::string describe(const rfc::RfcConfig& cfg) {
  std::ostringstream os;
  os << "m=" << cfg.m << " kernels=";
  for (std::size_t i = 0; i < cfg.kernels.size(); ++i) os << (i ? "," : "") << cfg.kernels[i];
  os << " depth=" << cfg.depth << " width=" << cfg.width << " merge=" << rfc::to_string(cfg.merge)
     << " classes=" << cfg.num_classes << " seed=" << cfg.seed;
  return os.str();
}

int cmd_analyze(const rfc::RfcConfig& cfg, int input_h, int input_w, bool csv) {
  rfc::RfcModel<float> model = rfc::build_rfc_net<float>(cfg);
  const rfc::CostReport report = rfc::count_flops(model, input_h, input_w);
  if (csv) {
    std::cout << report.to_csv();
    return 0;
  }
  std::cout << "model: " << describe(cfg) << "\n\n";
  std::cout << report.to_text();

  std::int64_t analytic = 0, enumerated = 0;
  for (const auto& row : report.rows)
    if (row.analytic_params) {
      analytic += *row.analytic_params;
      enumerated += row.weight_params;
    }
  std::cout << "\ntree reconciliation: closed-form " << analytic << " weights vs enumerated "
            << enumerated;
  if (report.concat_correction > 0)
    std::cout << " (enumerated carries +" << report.concat_correction
              << " weights because concat merge doubles each fuse kernel input)";
  else
    std::cout << " (exact match)";
  std::cout << "\n\nreference configurations at " << input_h << "x" << input_w << ":\n"
            << rfc::compare_presets(input_h, input_w);
  return 0;
}

int cmd_chains(const rfc::RfcConfig& cfg) {
  const auto chains = rfc::enumerate_chains(cfg);
  std::cout << "leaf kernels rf\n";
  for (const auto& chain : chains) {
    std::cout << chain.leaf_index << " ";
    for (std::size_t i = 0; i < chain.kernel_sequence.size(); ++i)
      std::cout << (i ? "," : "") << chain.kernel_sequence[i];
    std::cout << " " << rfc::receptive_field(chain, cfg) << "\n";
  }
  return 0;
}

int cmd_gradcheck(rfc::RfcConfig cfg, bool tiny, int input_size, double eps, double tolerance) {
  if (tiny) {
    cfg.depth = 2;
    cfg.width = 4;
    cfg.stem1 = 4;
    cfg.stem2 = 4;
    input_size = 16;
  }
  if (input_size % 4 != 0 || input_size < 8)
    throw rfc::ArgumentError("--input-size must be a multiple of 4 and >= 8");

  rfc::RfcModel<double> model = rfc::build_rfc_net<double>(cfg);
  rfc::Rng rng(cfg.seed + 17);
  rfc::Tensor<double> x =
      rfc::Tensor<double>::uniform({1, 3, input_size, input_size}, 0.0, 1.0, rng);
  x.set_requires_grad(true);
  rfc::ClassMask target = rfc::ClassMask::zeros(1, input_size, input_size);
  for (auto& id : target.ids) id = rng.uniform_int(0, cfg.num_classes - 1);
  const std::int64_t min_kept =
      std::max<std::int64_t>(1, static_cast<std::int64_t>(input_size) * input_size / 16);

  const std::function<rfc::Tensor<double>()> f = [&]() {
    return rfc::ohem_ce(model.forward(x), target, 0.7, min_kept);
  };

  double worst = rfc::grad_check<double>(f, x, eps);
  std::int64_t coords = x.numel();
  for (auto& [name, param] : model.named_parameters()) {
    worst = std::max(worst, rfc::grad_check<double>(f, param, eps));
    coords += param.numel();
  }
  std::cout << "gradcheck: max relative error " << std::scientific << std::setprecision(3) << worst
            << " over " << coords << " coordinates (tolerance " << tolerance << ")\n";
  if (worst > tolerance) {
    std::cerr << "gradcheck FAILED\n";
    return 1;
  }
  std::cout << "gradcheck PASS\n";
  return 0;
}

struct DataFlags {
  int synthetic_count = 0;  // 0 = not requested
  CLI::Option* synthetic_opt = nullptr;
  std::string data_dir;
  std::vector<int> size{64, 64};
  std::string manifest;
  int threads = 1;

  void add_to(CLI::App* cmd, bool with_manifest = true) {
    synthetic_opt = cmd->add_option("--synthetic", synthetic_count,
                                    "use N generated shape images (bare flag: N=40)")
                        ->expected(0, 1);
    cmd->add_option("--data", data_dir, "dataset directory holding images/ and masks/");
    cmd->add_option("--size", size, "target sample size H W")->expected(2)->capture_default_str();
    if (with_manifest)
      cmd->add_option("--manifest", manifest, "filename,split manifest restricting --data");
    cmd->add_option("--threads", threads, "parallel file-loading threads (math is always serial)")
        ->capture_default_str();
  }

  bool synthetic_requested() const { return synthetic_opt && synthetic_opt->count() > 0; }

  int resolved_synthetic_count() const {
    if (!synthetic_requested()) return 0;
    return synthetic_opt->results().empty() || synthetic_count <= 0 ? 40 : synthetic_count;
  }
};

int cmd_train(const CommonFlags& common, const DataFlags& data, rfc::TrainConfig tc, double val_frac,
              const std::string& out_path, const std::string& log_path) {
  const rfc::RfcConfig cfg = common.to_config();
  tc.seed = cfg.seed;
  tc.validate();
  if (!(val_frac > 0.0 && val_frac < 1.0))
    throw rfc::ArgumentError("--val-frac must be in (0, 1)");
  if (data.synthetic_requested() == !data.data_dir.empty())
    throw rfc::ArgumentError("train needs exactly one of --synthetic or --data");

  std::vector<rfc::Sample> train_set, val_set;
  if (data.synthetic_requested()) {
    const int count = data.resolved_synthetic_count();
    std::vector<rfc::Sample> samples =
        rfc::gen_synthetic(count, data.size[0], data.size[1], cfg.seed);
    const int val_n = std::max(1, static_cast<int>(std::lround(count * val_frac)));
    if (count - val_n < 1) throw rfc::ArgumentError("--val-frac leaves no training samples");
    train_set.assign(samples.begin(), samples.end() - val_n);
    val_set.assign(samples.end() - val_n, samples.end());
  } else if (!data.manifest.empty()) {
    rfc::LoadOptions opts;
    opts.threads = data.threads;
    opts.manifest = data.manifest;
    opts.split = "train";
    train_set = rfc::load_directory(data.data_dir, data.size[0], data.size[1], opts).samples;
    opts.split = "val";
    val_set = rfc::load_directory(data.data_dir, data.size[0], data.size[1], opts).samples;
  } else {
    rfc::LoadOptions opts;
    opts.threads = data.threads;
    rfc::DirectoryDataset all = rfc::load_directory(data.data_dir, data.size[0], data.size[1], opts);
    const int count = static_cast<int>(all.samples.size());
    const int val_n = std::max(1, static_cast<int>(std::lround(count * val_frac)));
    if (count - val_n < 1) throw rfc::IoError("--val-frac leaves no training samples");
    train_set.assign(all.samples.begin(), all.samples.end() - val_n);
    val_set.assign(all.samples.end() - val_n, all.samples.end());
  }

  std::cerr << "training on " << train_set.size() << " samples, validating on " << val_set.size()
            << " (" << describe(cfg) << ")\n";
  rfc::RfcModel<float> model = rfc::build_rfc_net<float>(cfg);
  const rfc::TrainHistory history = rfc::train_loop(model, train_set, val_set, tc, &std::cout, out_path);

  if (!log_path.empty()) {
    std::ofstream log(log_path);
    if (!log) throw rfc::IoError("cannot open " + log_path + " for writing");
    log << history.to_csv();
  }
  std::cout << "best val_miou " << std::fixed << std::setprecision(6) << history.best_miou
            << " at epoch " << history.converged_epoch << "\n";
  if (!out_path.empty()) std::cout << "checkpoint written to " << out_path << "\n";
  return 0;
}

std::vector<rfc::Sample> eval_samples(const DataFlags& data, std::uint64_t seed,
                                      const std::string& split) {
  if (data.synthetic_requested() == !data.data_dir.empty())
    throw rfc::ArgumentError("need exactly one of --synthetic or --data");
  if (data.synthetic_requested())
    return rfc::gen_synthetic(data.resolved_synthetic_count(), data.size[0], data.size[1], seed);
  rfc::LoadOptions opts;
  opts.threads = data.threads;
  opts.manifest = data.manifest;
  opts.split = split;
  return rfc::load_directory(data.data_dir, data.size[0], data.size[1], opts).samples;
}

int cmd_eval(const std::string& checkpoint, const DataFlags& data, std::uint64_t seed,
             const std::string& split, bool per_image) {
  rfc::RfcModel<float> model = rfc::load_checkpoint(checkpoint);
  const std::vector<rfc::Sample> samples = eval_samples(data, seed, split);
  const double score = rfc::evaluate(model, samples, !per_image);
  std::cout << "miou " << std::fixed << std::setprecision(6) << score << " over " << samples.size()
            << " samples\n";
  return 0;
}

int cmd_predict(const std::string& checkpoint, const DataFlags& data, std::uint64_t seed,
                const std::string& out_dir) {
  namespace fs = std::filesystem;
  rfc::RfcModel<float> model = rfc::load_checkpoint(checkpoint);
  if (data.synthetic_requested() == !data.data_dir.empty())
    throw rfc::ArgumentError("need exactly one of --synthetic or --data");
  fs::create_directories(out_dir);

  std::vector<std::string> stems;
  std::vector<rfc::Sample> samples;
  if (data.synthetic_requested()) {
    samples = rfc::gen_synthetic(data.resolved_synthetic_count(), data.size[0], data.size[1], seed);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      std::ostringstream name;
      name << "synthetic_" << std::setw(3) << std::setfill('0') << i;
      stems.push_back(name.str());
    }
  } else {
    // Prediction needs images only; masks are optional here.
    const fs::path image_dir = fs::path(data.data_dir) / "images";
    if (!fs::is_directory(image_dir)) throw rfc::IoError("missing directory " + image_dir.string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(image_dir))
      if (entry.is_regular_file()) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw rfc::IoError("no images found in " + image_dir.string());
    const int padded_h = (data.size[0] + 3) / 4 * 4;
    const int padded_w = (data.size[1] + 3) / 4 * 4;
    for (const auto& file : files) {
      const rfc::Raster raster = rfc::read_pnm(file.string());
      rfc::Sample sample;
      sample.image =
          rfc::reflect_pad_to(rfc::raster_to_image(raster, data.size[0], data.size[1]), padded_h, padded_w);
      sample.content_h = data.size[0];
      sample.content_w = data.size[1];
      samples.push_back(std::move(sample));
      stems.push_back(file.stem().string());
    }
  }

  for (std::size_t i = 0; i < samples.size(); ++i) {
    rfc::Tensor<float> logits = model.forward(samples[i].image);
    const rfc::ClassMask pred =
        rfc::argmax_mask(logits, samples[i].content_h, samples[i].content_w);
    rfc::save_mask(pred, 0, (fs::path(out_dir) / (stems[i] + "_pred.pgm")).string());
  }
  std::cout << "wrote " << samples.size() << " masks to " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"analysis, verification, training and inference for the "
               "loose-dense-connection segmentation network"};
  app.require_subcommand(1);

  // analyze
  auto* analyze = app.add_subcommand("analyze", "parameter/FLOP report with reference figures");
  CommonFlags analyze_common;
  analyze_common.add_to(analyze);
  std::vector<int> input_size{224, 224};
  analyze->add_option("--input-size", input_size, "analysis input H W")->expected(2)->capture_default_str();
  bool csv = false;
  analyze->add_flag("--csv", csv, "emit the per-layer table as CSV only");

  // chains
  auto* chains = app.add_subcommand("chains", "list every root-to-leaf kernel chain and its receptive field");
  CommonFlags chains_common;
  chains_common.add_to(chains);

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the full model at 64-bit");
  CommonFlags gradcheck_common;
  gradcheck_common.add_to(gradcheck);
  bool tiny = false;
  gradcheck->add_flag("--tiny", tiny, "shrink to depth 2 / width 4 / 16x16 input");
  int gc_input = 24;
  gradcheck->add_option("--input-size", gc_input, "square input side")->capture_default_str();
  // 1e-6 balances truncation against roundoff and keeps the window narrow
  // enough that ReLU kinks near the test point stay outside it.
  double gc_eps = 1e-6, gc_tol = 1e-4;
  gradcheck->add_option("--eps", gc_eps, "central-difference step")->capture_default_str();
  gradcheck->add_option("--tolerance", gc_tol, "max relative error to pass")->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "run the training recipe and save the best checkpoint");
  CommonFlags train_common;
  train_common.add_to(train);
  DataFlags train_data;
  train_data.add_to(train);
  rfc::TrainConfig tc;
  train->add_option("--epochs", tc.epochs)->capture_default_str();
  train->add_option("--batch", tc.batch_size)->capture_default_str();
  train->add_option("--lr", tc.base_lr)->capture_default_str();
  train->add_option("--momentum", tc.momentum)->capture_default_str();
  train->add_option("--wd", tc.weight_decay)->capture_default_str();
  train->add_option("--step-size", tc.step_size, "epochs per learning-rate decay step")->capture_default_str();
  train->add_option("--gamma", tc.gamma, "learning-rate decay factor")->capture_default_str();
  train->add_option("--ohem-threshold", tc.ohem_threshold)->capture_default_str();
  train->add_option("--ohem-min-frac", tc.ohem_min_kept_fraction,
                    "minimum kept fraction of batch pixels")->capture_default_str();
  double val_frac = 0.2;
  train->add_option("--val-frac", val_frac, "validation fraction when no manifest is given")
      ->capture_default_str();
  std::string train_out = "rfcnet.ckpt", train_log;
  train->add_option("--out", train_out, "checkpoint path")->capture_default_str();
  train->add_option("--log", train_log, "per-epoch history CSV path");

  // eval
  auto* eval = app.add_subcommand("eval", "mean IoU of a checkpoint on a dataset");
  std::string eval_ckpt;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
  DataFlags eval_data;
  eval_data.add_to(eval);
  std::string eval_split = "val";
  eval->add_option("--split", eval_split, "manifest split to evaluate")->capture_default_str();
  bool per_image = false;
  eval->add_flag("--per-image", per_image, "average per-image mIoU instead of pooling the confusion");
  std::uint64_t eval_seed = 1;
  auto* eval_seed_opt = eval->add_option("--seed", eval_seed, "seed for --synthetic");

  // predict
  auto* predict = app.add_subcommand("predict", "write predicted mask rasters");
  std::string predict_ckpt, predict_out = "predictions";
  predict->add_option("--checkpoint", predict_ckpt, "checkpoint path")->required();
  DataFlags predict_data;
  predict_data.add_to(predict, /*with_manifest=*/false);
  predict->add_option("--out", predict_out, "output directory")->capture_default_str();
  std::uint64_t predict_seed = 1;
  auto* predict_seed_opt = predict->add_option("--seed", predict_seed, "seed for --synthetic");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    std::cerr << "run with --help for usage\n";
    return 2;
  }

  try {
    if (app.got_subcommand(analyze))
      return cmd_analyze(analyze_common.to_config(), input_size[0], input_size[1], csv);
    if (app.got_subcommand(chains)) return cmd_chains(chains_common.to_config());
    if (app.got_subcommand(gradcheck))
      return cmd_gradcheck(gradcheck_common.to_config(), tiny, gc_input, gc_eps, gc_tol);
    if (app.got_subcommand(train))
      return cmd_train(train_common, train_data, tc, val_frac, train_out, train_log);
    if (app.got_subcommand(eval))
      return cmd_eval(eval_ckpt, eval_data,
                      eval_seed_opt->count() ? eval_seed : seed_from_env_or(eval_seed), eval_split,
                      per_image);
    if (app.got_subcommand(predict))
      return cmd_predict(predict_ckpt, predict_data,
                         predict_seed_opt->count() ? predict_seed : seed_from_env_or(predict_seed),
                         predict_out);
    std::cerr << "error: no subcommand\n";
    return 2;
  } catch (const rfc::ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const rfc::DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
