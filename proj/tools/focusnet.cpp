// focusnet: data generation, training, evaluation, prediction, gradient
// checks and model accounting from one binary.
//
// Failures print a single line `error:<category>: <message>` on stderr and
// exit nonzero. Commands that write files stage them in a temporary sibling
// and rename on success, so a failed run leaves nothing behind.

#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "focusnet/blas_env.hpp"
#include "focusnet/data.hpp"
#include "focusnet/gradcheck_suite.hpp"
#include "focusnet/model.hpp"
#include "focusnet/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace focusnet;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitCheck = 3;

// ---------------------------------------------------------------------------
// Configuration files

struct RunConfig {
  ModelConfig model = ModelConfig::alpha_tiny();
  LossConfig loss;
  TrainConfig train = TrainConfig::desk();
};

std::optional<ModelConfig> builtin_preset(std::string name) {
  if (name.ends_with(".json")) name.resize(name.size() - 5);
  if (name == "alpha-tiny") return ModelConfig::alpha_tiny();
  if (name == "alpha-lite") return ModelConfig::alpha_lite();
  return std::nullopt;
}

json parse_json_file(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    fail(Errc::format, "cannot parse '" + path.string() + "': " + e.what());
  }
}

// A config file is either a bare model config or {model, loss, train}.
RunConfig run_config_from_json(const json& j) {
  RunConfig rc;
  require(j.is_object(), Errc::config, "config must be a JSON object");
  const bool sectioned = j.contains("model") || j.contains("loss") || j.contains("train");
  if (!sectioned) {
    rc.model = ModelConfig::from_json(j);
    return rc;
  }
  for (const auto& [key, _] : j.items())
    require(key == "model" || key == "loss" || key == "train", Errc::config,
            "unknown config section '" + key + "'");
  if (j.contains("model")) rc.model = ModelConfig::from_json(j["model"]);
  if (j.contains("loss")) rc.loss = LossConfig::from_json(j["loss"]);
  if (j.contains("train")) rc.train = TrainConfig::from_json(j["train"]);
  return rc;
}

// Resolution order: an existing path, then $FOCUSNET_CONFIG_DIR/<name>, then
// the built-in presets alpha-tiny and alpha-lite.
RunConfig load_run_config(const std::string& name) {
  if (fs::exists(name)) return run_config_from_json(parse_json_file(name));
  if (const char* dir = std::getenv("FOCUSNET_CONFIG_DIR")) {
    for (const fs::path& p : {fs::path(dir) / name, fs::path(dir) / (name + ".json")})
      if (fs::exists(p)) return run_config_from_json(parse_json_file(p));
  }
  if (auto preset = builtin_preset(name)) {
    RunConfig rc;
    rc.model = *preset;
    return rc;
  }
  fail(Errc::io, "config '" + name + "' not found");
}

// ---------------------------------------------------------------------------
// Staged output

// A temporary sibling directory that replaces `target` on commit() and is
// removed otherwise.
class StagedDir {
 public:
  explicit StagedDir(fs::path target) : target_(std::move(target)) {
    require(!fs::exists(target_) || (fs::is_directory(target_) && fs::is_empty(target_)),
            Errc::io, "output '" + target_.string() + "' already exists and is not empty");
    const fs::path parent = fs::absolute(target_).parent_path();
    require(fs::is_directory(parent), Errc::io,
            "parent directory '" + parent.string() + "' does not exist");
    staging_ = parent / ("." + target_.filename().string() + ".staging-" +
                         std::to_string(::getpid()));
    fs::remove_all(staging_);
    fs::create_directory(staging_);
  }
  StagedDir(const StagedDir&) = delete;
  StagedDir& operator=(const StagedDir&) = delete;
  ~StagedDir() {
    std::error_code ec;
    if (!committed_) fs::remove_all(staging_, ec);
  }

  const fs::path& path() const { return staging_; }

  void commit() {
    if (fs::exists(target_)) fs::remove(target_);  // empty by construction
    fs::rename(staging_, target_);
    committed_ = true;
  }

 private:
  fs::path target_, staging_;
  bool committed_ = false;
};

void write_text(const fs::path& path, const std::string& text) {
  require(fs::is_directory(fs::absolute(path).parent_path()), Errc::io,
          "directory of '" + path.string() + "' does not exist");
  write_file_atomic(path, text);
}

// ---------------------------------------------------------------------------
// Commands

struct GenDataArgs {
  std::string out;
  std::size_t count = 8;
  std::vector<std::size_t> size{64, 64};
  std::uint64_t seed = 0;
  std::size_t channels = 3;
  double val_fraction = 0.0;
  double noise = 0.05;
};

int gen_data(const GenDataArgs& a) {
  SynthSpec spec;
  spec.count = a.count;
  spec.height = a.size[0];
  spec.width = a.size[1];
  spec.seed = a.seed;
  spec.channels = a.channels;
  spec.val_fraction = a.val_fraction;
  spec.noise_sigma = a.noise;
  const Dataset ds = generate_synthetic(spec);
  StagedDir out(a.out);
  save_dataset(out.path(), ds);
  out.commit();
  std::cout << "wrote " << ds.size() << " images (" << ds.train_indices.size() << " train, "
            << ds.val_indices.size() << " val) to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::optional<std::string> config;
  std::string data, out;
  std::optional<std::size_t> epochs, batch, max_steps;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> loss, variant, block;
  std::optional<double> lr, stop_at_dice;
  bool resume = false;
  bool quiet = false;
};

int train(const TrainArgs& a) {
  // A resumed run defaults to the configuration it was started with.
  RunConfig rc = a.resume && !a.config
                     ? run_config_from_json(parse_json_file(fs::path(a.out) / "config.json"))
                     : load_run_config(a.config.value_or("alpha-tiny"));
  if (a.epochs) rc.train.max_epochs = *a.epochs;
  if (a.batch) rc.train.batch_size = *a.batch;
  if (a.max_steps) rc.train.max_steps = *a.max_steps;
  if (a.seed) rc.train.seed = *a.seed;
  if (a.lr) rc.train.adam.lr = *a.lr;
  if (a.stop_at_dice) rc.train.stop_at_train_dice = *a.stop_at_dice;
  if (a.loss) rc.loss.wrapper = *a.loss == "all" ? LossWrapper::all : LossWrapper::none;
  if (a.variant) rc.model = apply_variant(rc.model, *a.variant);
  if (a.block) rc.model.block_kind = parse_block_kind(*a.block);
  rc.model.validate();
  rc.train.validate();
  rc.train.deep_supervision = rc.train.deep_supervision || rc.model.deep_supervision;

  const Dataset data = load_dataset(a.data);
  Model model = Model::build(rc.model, rc.train.seed);

  auto report = [&](const EpochRecord& r) {
    if (a.quiet) return;
    std::cout << "epoch " << r.epoch << " steps " << r.steps << " lr " << r.lr << " loss "
              << r.train_loss << " dice " << r.train_dice;
    if (r.val_loss) std::cout << " val_loss " << *r.val_loss << " val_dice " << *r.val_dice;
    std::cout << std::endl;
  };
  auto summary = [](const TrainResult& res) {
    std::cout << "trained " << res.history.size() << " epochs, " << res.steps << " steps";
    if (res.best_epoch)
      std::cout << "; best epoch " << *res.best_epoch << " loss " << res.best_loss;
    std::cout << "\n";
  };

  if (a.resume) {
    // Resume continues in place: state.fns1 is the commit point.
    require(fs::exists(fs::path(a.out) / "state.fns1"), Errc::io,
            "nothing to resume in '" + a.out + "'");
    Trainer trainer(model, data, rc.train, rc.loss, fs::path(a.out));
    trainer.on_epoch(report);
    trainer.resume();
    summary(trainer.run());
    return 0;
  }
  StagedDir out(a.out);
  Trainer trainer(model, data, rc.train, rc.loss, out.path());
  trainer.on_epoch(report);
  summary(trainer.run());
  out.commit();
  return 0;
}

// The checkpoint's config.json sidecar unless --config is given.
RunConfig config_for_weights(const fs::path& weights, const std::string& config) {
  if (!config.empty()) return load_run_config(config);
  const fs::path sidecar = weights.parent_path() / "config.json";
  require(fs::exists(sidecar), Errc::io,
          "no config.json next to '" + weights.string() + "'; pass --config");
  return run_config_from_json(parse_json_file(sidecar));
}

struct EvalArgs {
  std::string weights, data, report, config;
  double threshold = 0.5;
};

int eval(const EvalArgs& a) {
  require(a.threshold >= 0.0 && a.threshold <= 1.0, Errc::argument,
          "threshold must lie in [0, 1]");
  const RunConfig rc = config_for_weights(a.weights, a.config);
  const Model model = Model::load(a.weights, rc.model);
  const Dataset data = load_dataset(a.data);
  const EvalReport r = evaluate(model, data, a.threshold);
  const fs::path report(a.report);
  fs::path csv = report;
  csv.replace_extension(".roc.csv");
  write_text(csv, r.roc_csv());
  try {
    json doc = r.to_json();
    doc["config"] = {{"model", rc.model.to_json()}, {"loss", rc.loss.to_json()}};
    doc["weights"] = a.weights;
    write_text(report, doc.dump(2) + "\n");
  } catch (...) {
    fs::remove(csv);
    throw;
  }
  const auto& g = r.global;
  std::cout << "images " << r.images << " dice " << g.dice.value << " jaccard " << g.jaccard.value
            << " auc " << (r.roc ? std::to_string(r.roc->auc) : std::string("n/a")) << "\n";
  return 0;
}

struct PredictArgs {
  std::string weights, input, out, config;
};

int predict_cmd(const PredictArgs& a) {
  const RunConfig rc = config_for_weights(a.weights, a.config);
  const Model model = Model::load(a.weights, rc.model);
  const auto tensors = load_fnt1(a.input);
  require(!tensors.empty(), Errc::format, "input '" + a.input + "' holds no tensors");
  const NamedTensor* in = &tensors.front();
  for (const auto& t : tensors)
    if (t.name == "images") in = &t;
  const Tensor pred = predict(model, in->tensor);
  require(fs::is_directory(fs::absolute(a.out).parent_path()), Errc::io,
          "directory of '" + a.out + "' does not exist");
  save_fnt1(a.out, {{"prediction", pred}});
  std::cout << "wrote prediction " << shape_str(pred.shape()) << " to " << a.out << "\n";
  return 0;
}

struct GradcheckArgs {
  double tol = 1e-5;
  std::uint64_t seed = 0;
  std::size_t instances = 100;
  std::optional<std::string> only;
};

int gradcheck(const GradcheckArgs& a) {
  require(a.tol > 0.0, Errc::argument, "tolerance must be positive");
  require(a.instances >= 1, Errc::argument, "instances must be at least 1");
  GradCheckOptions opt;
  opt.tol = a.tol;
  std::size_t failed = 0, ran = 0;
  const auto t0 = std::chrono::steady_clock::now();
  for (const GradCase& c : gradcheck_cases()) {
    if (a.only && c.name != *a.only) continue;
    ++ran;
    const GradCaseResult r = run_grad_case(c, a.instances, a.seed, opt);
    std::printf("%-30s %s instances %zu checked %zu kinks %zu max_rel %.3e\n", r.name.c_str(),
                r.passed ? "ok  " : "FAIL", r.instances, r.checked, r.nonsmooth,
                r.max_rel_error);
    if (!r.passed) ++failed;
  }
  require(ran > 0, Errc::argument, "no gradcheck case named '" + a.only.value_or("") + "'");
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%zu cases, %zu failed, %.1fs\n", ran, failed, secs);
  std::fflush(stdout);
  char tol[32];
  std::snprintf(tol, sizeof tol, "%g", a.tol);
  require(failed == 0, Errc::check,
          std::to_string(failed) + " gradient check case(s) failed at tolerance " + tol);
  return 0;
}

struct FlopsArgs {
  std::string config = "alpha-tiny";
  std::vector<std::size_t> size{64, 64};
  bool json_out = false;
};

int flops(const FlopsArgs& a) {
  const RunConfig rc = load_run_config(a.config);
  const Model model = Model::build(rc.model, 0);
  const Shape input{rc.model.in_channels, a.size[0], a.size[1]};
  if (a.json_out) {
    std::cout << json{{"params", model.count_params()}, {"flops", model.count_flops(input)}}.dump()
              << "\n";
  } else {
    std::cout << model.summary(input);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  ensure_blas_kernels(argv);

  CLI::App app{"focusnet: attention-based segmentation networks on a small autodiff core"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every command");

  GenDataArgs gd;
  auto* c_gen = app.add_subcommand("gen-data", "Generate a synthetic blob segmentation dataset");
  c_gen->add_option("--out", gd.out, "Output directory")->required();
  c_gen->add_option("--count", gd.count, "Number of images")->check(CLI::PositiveNumber);
  c_gen->add_option("--size", gd.size, "Height and width")->expected(2);
  c_gen->add_option("--seed", gd.seed, "Generator seed");
  c_gen->add_option("--channels", gd.channels, "Image channels")->check(CLI::PositiveNumber);
  c_gen->add_option("--val-fraction", gd.val_fraction, "Fraction held out for validation")
      ->check(CLI::Range(0.0, 1.0));
  c_gen->add_option("--noise", gd.noise, "Pixel noise sigma")->check(CLI::NonNegativeNumber);

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a model on a dataset directory");
  c_train->add_option("--config", tr.config, "Config file or preset (alpha-tiny, alpha-lite)");
  c_train->add_option("--data", tr.data, "Dataset directory")->required();
  c_train->add_option("--out", tr.out, "Output directory")->required();
  c_train->add_option("--epochs", tr.epochs, "Maximum epochs");
  c_train->add_option("--batch", tr.batch, "Batch size");
  c_train->add_option("--seed", tr.seed, "Seed for initialization, shuffling and dropout");
  c_train->add_option("--loss", tr.loss, "Loss wrapper: all (adaptive log) or hl (plain hybrid)")
      ->check(CLI::IsMember({"all", "hl"}));
  c_train->add_option("--variant", tr.variant, "Ablation variant")
      ->check(CLI::IsMember({"full", "md", "res_a", "ch", "cs"}));
  c_train->add_option("--block", tr.block, "Block kind")
      ->check(CLI::IsMember({"group_attention", "basic", "identity_preact", "resnext",
                             "resnext_se", "res_a", "concat_horizontal"}));
  c_train->add_option("--lr", tr.lr, "Adam learning rate");
  c_train->add_option("--max-steps", tr.max_steps, "Stop after this many optimizer steps");
  c_train->add_option("--stop-at-dice", tr.stop_at_dice,
                      "Stop once an epoch's training Dice reaches this value");
  c_train->add_flag("--resume", tr.resume, "Continue the run saved in --out");
  c_train->add_flag("--quiet", tr.quiet, "Suppress per-epoch lines");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Evaluate saved weights on a dataset");
  c_eval->add_option("--weights", ev.weights, "FNT1 weights")->required();
  c_eval->add_option("--data", ev.data, "Dataset directory")->required();
  c_eval->add_option("--threshold", ev.threshold, "Positive when the probability exceeds this");
  c_eval->add_option("--report", ev.report, "Report JSON path (ROC goes to <stem>.roc.csv)")
      ->required();
  c_eval->add_option("--config", ev.config, "Config (default: config.json beside the weights)");

  PredictArgs pr;
  auto* c_pred = app.add_subcommand("predict", "Predict masks for an FNT1 image tensor");
  c_pred->add_option("--weights", pr.weights, "FNT1 weights")->required();
  c_pred->add_option("--input", pr.input, "FNT1 file with an (N,C,H,W) tensor")->required();
  c_pred->add_option("--out", pr.out, "Output FNT1 path")->required();
  c_pred->add_option("--config", pr.config, "Config (default: config.json beside the weights)");

  GradcheckArgs gc;
  auto* c_gc = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  c_gc->add_option("--tol", gc.tol, "Maximum relative error");
  c_gc->add_option("--seed", gc.seed, "Base seed");
  c_gc->add_option("--instances", gc.instances, "Random instances per case");
  c_gc->add_option("--only", gc.only, "Run a single case by name");

  FlopsArgs fl;
  auto* c_flops = app.add_subcommand("flops", "Print the parameter and FLOP summary");
  c_flops->add_option("--config", fl.config, "Config file or preset");
  c_flops->add_option("--size", fl.size, "Input height and width")->expected(2);
  c_flops->add_flag("--json", fl.json_out, "Print only the totals as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "error:argument: " << msg << "\n";
    return kExitUsage;
  }

  try {
    if (*c_gen) return gen_data(gd);
    if (*c_train) return train(tr);
    if (*c_eval) return eval(ev);
    if (*c_pred) return predict_cmd(pr);
    if (*c_gc) return gradcheck(gc);
    if (*c_flops) return flops(fl);
  } catch (const Error& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "error:" << errc_name(e.code()) << ": " << msg << "\n";
    return e.code() == Errc::check ? kExitCheck
           : e.code() == Errc::argument ? kExitUsage
                                        : kExitFailure;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error:io: " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "error:internal: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
