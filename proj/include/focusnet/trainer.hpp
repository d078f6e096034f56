#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "focusnet/data.hpp"
#include "focusnet/loss.hpp"
#include "focusnet/metrics.hpp"
#include "focusnet/model.hpp"
#include "focusnet/optim.hpp"

namespace focusnet {

struct TrainConfig {
  std::size_t batch_size = 8;
  std::size_t max_epochs = 50;
  AdamOptions adam;
  std::size_t lr_step_epoch = 30;  // lr is multiplied by lr_factor from this epoch on
  double lr_factor = 0.1;
  std::uint64_t seed = 0;
  std::size_t max_steps = 0;  // 0 = no limit
  std::optional<double> stop_at_train_dice;
  bool deep_supervision = false;

  /// Desk-scale defaults: batch 4, everything else as above.
  static TrainConfig desk() {
    TrainConfig c;
    c.batch_size = 4;
    return c;
  }

  void validate() const {
    require(batch_size >= 1, Errc::config, "batch_size must be at least 1");
    require(max_epochs >= 1, Errc::config, "max_epochs must be at least 1");
    require(adam.lr >= 0.0 && adam.eps > 0.0 && adam.beta1 >= 0.0 && adam.beta1 < 1.0 &&
                adam.beta2 >= 0.0 && adam.beta2 < 1.0,
            Errc::config, "invalid Adam hyperparameters");
    require(lr_factor > 0.0, Errc::config, "lr_factor must be positive");
  }

  double lr_at(std::size_t epoch) const {
    return epoch >= lr_step_epoch ? adam.lr * lr_factor : adam.lr;
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"batch_size", batch_size},
                     {"max_epochs", max_epochs},
                     {"lr", adam.lr},
                     {"beta1", adam.beta1},
                     {"beta2", adam.beta2},
                     {"adam_eps", adam.eps},
                     {"lr_step_epoch", lr_step_epoch},
                     {"lr_factor", lr_factor},
                     {"seed", seed},
                     {"max_steps", max_steps},
                     {"deep_supervision", deep_supervision}};
    j["stop_at_train_dice"] =
        stop_at_train_dice ? nlohmann::json(*stop_at_train_dice) : nlohmann::json(nullptr);
    return j;
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    static const std::set<std::string> known{
        "batch_size", "max_epochs", "lr",        "beta1",     "beta2",           "adam_eps",
        "lr_step_epoch", "lr_factor", "seed",    "max_steps", "stop_at_train_dice",
        "deep_supervision"};
    require(j.is_object(), Errc::config, "train config must be a JSON object");
    for (const auto& [key, _] : j.items())
      require(known.contains(key), Errc::config, "unknown train config key '" + key + "'");
    TrainConfig c = desk();
    try {
      c.batch_size = j.value("batch_size", c.batch_size);
      c.max_epochs = j.value("max_epochs", c.max_epochs);
      c.adam.lr = j.value("lr", c.adam.lr);
      c.adam.beta1 = j.value("beta1", c.adam.beta1);
      c.adam.beta2 = j.value("beta2", c.adam.beta2);
      c.adam.eps = j.value("adam_eps", c.adam.eps);
      c.lr_step_epoch = j.value("lr_step_epoch", c.lr_step_epoch);
      c.lr_factor = j.value("lr_factor", c.lr_factor);
      c.seed = j.value("seed", c.seed);
      c.max_steps = j.value("max_steps", c.max_steps);
      c.deep_supervision = j.value("deep_supervision", c.deep_supervision);
      if (j.contains("stop_at_train_dice") && !j["stop_at_train_dice"].is_null())
        c.stop_at_train_dice = j["stop_at_train_dice"].get<double>();
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::config, std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t steps = 0;  // optimizer steps completed at the end of this epoch
  double lr = 0.0;
  double train_loss = 0.0;  // mean over minibatches
  double train_dice = 0.0;  // hard Dice of the train-mode predictions, pooled over the epoch
  std::optional<double> val_loss, val_dice, val_jaccard;

  /// The quantity used for checkpoint selection.
  double monitored_loss() const { return val_loss.value_or(train_loss); }

  nlohmann::json to_json() const {
    auto opt = [](const std::optional<double>& v) {
      return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
    };
    return {{"epoch", epoch},           {"steps", steps},          {"lr", lr},
            {"train_loss", train_loss}, {"train_dice", train_dice}, {"val_loss", opt(val_loss)},
            {"val_dice", opt(val_dice)}, {"val_jaccard", opt(val_jaccard)}};
  }

  static EpochRecord from_json(const nlohmann::json& j) {
    auto opt = [&](const char* k) -> std::optional<double> {
      if (j.at(k).is_null()) return std::nullopt;
      return j.at(k).get<double>();
    };
    EpochRecord r;
    r.epoch = j.at("epoch").get<std::size_t>();
    r.steps = j.at("steps").get<std::size_t>();
    r.lr = j.at("lr").get<double>();
    r.train_loss = j.at("train_loss").get<double>();
    r.train_dice = j.at("train_dice").get<double>();
    r.val_loss = opt("val_loss");
    r.val_dice = opt("val_dice");
    r.val_jaccard = opt("val_jaccard");
    return r;
  }
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t steps = 0;
  std::optional<std::size_t> best_epoch;
  double best_loss = 0.0;
  bool reached_dice_target = false;
};

/// Loss and metrics of an eval-mode pass over a subset.
struct Validation {
  double loss = 0.0;
  ConfusionCounts counts;
};

/// Writes `history.jsonl`, `best.fnt1`, `last.fnt1`, `config.json` and the
/// resumable `state.fns1` into `out_dir` when one is given.
class Trainer {
 public:
  Trainer(Model& model, const Dataset& data, TrainConfig train_cfg, LossConfig loss_cfg,
          std::optional<std::filesystem::path> out_dir = std::nullopt)
      : model_(&model),
        data_(&data),
        cfg_(std::move(train_cfg)),
        loss_cfg_(loss_cfg),
        out_dir_(std::move(out_dir)),
        adam_(model.params(), cfg_.adam) {
    cfg_.validate();
    loss_cfg_.validate();
    data.validate();
    const Shape& s = data.images.shape();
    require(s[1] == model.config().in_channels, Errc::shape,
            "dataset has " + std::to_string(s[1]) + " channels, model expects " +
                std::to_string(model.config().in_channels));
    const std::size_t mult = model.config().spatial_multiple();
    require(s[2] % mult == 0 && s[3] % mult == 0, Errc::shape,
            "dataset images " + shape_str(s) + " are not divisible by " + std::to_string(mult));
  }

  /// Optional per-epoch observer (progress printing).
  void on_epoch(std::function<void(const EpochRecord&)> f) { on_epoch_ = std::move(f); }

  const TrainResult& result() const noexcept { return result_; }
  Adam& optimizer() noexcept { return adam_; }

  TrainResult run() {
    if (out_dir_) {
      std::filesystem::create_directories(*out_dir_);
      write_file_atomic(*out_dir_ / "config.json", config_json().dump(2) + "\n");
    }
    for (std::size_t epoch = result_.history.size(); epoch < cfg_.max_epochs; ++epoch) {
      if (limit_reached()) break;
      EpochRecord rec = run_epoch(epoch);
      result_.history.push_back(rec);
      if (!result_.best_epoch || rec.monitored_loss() < result_.best_loss) {
        result_.best_epoch = epoch;
        result_.best_loss = rec.monitored_loss();
        if (out_dir_) model_->save(*out_dir_ / "best.fnt1");
      }
      if (cfg_.stop_at_train_dice && rec.train_dice >= *cfg_.stop_at_train_dice)
        result_.reached_dice_target = true;
      if (out_dir_) persist(rec);
      if (on_epoch_) on_epoch_(rec);
    }
    return result_;
  }

  /// Eval-mode loss and pooled counts over `indices` (threshold 0.5).
  Validation validate(const std::vector<std::size_t>& indices) const {
    Validation v;
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < indices.size(); b += cfg_.batch_size) {
      const std::size_t e = std::min(indices.size(), b + cfg_.batch_size);
      auto [x, y] = data_->batch(std::span(indices).subspan(b, e - b));
      const Var pred = model_->forward(Var(std::move(x)), Context{Mode::eval, 0});
      loss_sum += segmentation_loss(pred, y, loss_cfg_).item();
      v.counts += confusion(y, pred.value());
      ++batches;
    }
    v.loss = loss_sum / static_cast<double>(batches);
    return v;
  }

  /// Exact trainer state: parameters, running statistics, Adam moments,
  /// epoch/step counters and the best monitored loss.
  std::vector<NamedTensor> state() const {
    std::vector<NamedTensor> out = model_->state();
    for (auto& t : adam_.state()) out.push_back(std::move(t));
    out.push_back({"trainer.epochs", Tensor::scalar(static_cast<double>(result_.history.size()))});
    out.push_back({"trainer.steps", Tensor::scalar(static_cast<double>(result_.steps))});
    out.push_back({"trainer.best_epoch",
                   Tensor::scalar(result_.best_epoch ? static_cast<double>(*result_.best_epoch)
                                                     : -1.0)});
    out.push_back({"trainer.best_loss", Tensor::scalar(result_.best_loss)});
    return out;
  }

  /// Restores from `state.fns1` and the first completed epochs of
  /// `history.jsonl` in the output directory.
  void resume() {
    require(out_dir_.has_value(), Errc::argument, "resume needs an output directory");
    const auto tensors = load_fns1(*out_dir_ / "state.fns1");
    std::vector<NamedTensor> params;
    for (const auto& t : tensors)
      if (!t.name.starts_with("adam.") && !t.name.starts_with("trainer.")) params.push_back(t);
    model_->load_state(params);
    adam_.load_state(tensors);
    const auto epochs = static_cast<std::size_t>(find_tensor(tensors, "trainer.epochs").item());
    result_.steps = static_cast<std::size_t>(find_tensor(tensors, "trainer.steps").item());
    const double best = find_tensor(tensors, "trainer.best_epoch").item();
    result_.best_epoch =
        best < 0 ? std::nullopt : std::optional<std::size_t>(static_cast<std::size_t>(best));
    result_.best_loss = find_tensor(tensors, "trainer.best_loss").item();

    result_.history.clear();
    std::ifstream in(*out_dir_ / "history.jsonl");
    std::string line;
    while (result_.history.size() < epochs && std::getline(in, line)) {
      try {
        result_.history.push_back(EpochRecord::from_json(nlohmann::json::parse(line)));
      } catch (const nlohmann::json::exception& e) {
        fail(Errc::format, std::string("history.jsonl: ") + e.what());
      }
    }
    require(result_.history.size() == epochs, Errc::format,
            "history.jsonl has fewer records than the saved state");
    in.close();
    std::string kept;
    for (const auto& r : result_.history) kept += r.to_json().dump() + "\n";
    write_file_atomic(*out_dir_ / "history.jsonl", kept);
    if (cfg_.stop_at_train_dice && !result_.history.empty() &&
        result_.history.back().train_dice >= *cfg_.stop_at_train_dice)
      result_.reached_dice_target = true;
  }

  nlohmann::json config_json() const {
    return {{"model", model_->config().to_json()},
            {"loss", loss_cfg_.to_json()},
            {"train", cfg_.to_json()}};
  }

 private:
  bool limit_reached() const {
    return result_.reached_dice_target || (cfg_.max_steps && result_.steps >= cfg_.max_steps);
  }

  EpochRecord run_epoch(std::size_t epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = cfg_.lr_at(epoch);
    std::vector<std::size_t> order = data_->train_indices;
    Rng rng(mix_seed(cfg_.seed, epoch));
    rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    ConfusionCounts counts;
    for (std::size_t b = 0; b < order.size(); b += cfg_.batch_size) {
      if (cfg_.max_steps && result_.steps >= cfg_.max_steps) break;
      const std::size_t e = std::min(order.size(), b + cfg_.batch_size);
      auto [x, y] = data_->batch(std::span(order).subspan(b, e - b));
      const Context ctx{Mode::train, mix_seed(cfg_.seed ^ 0xD509D509ULL, result_.steps)};
      const Model::Output out = model_->forward_all(Var(std::move(x)), ctx);
      Var loss = segmentation_loss(out.prediction, y, loss_cfg_);
      if (cfg_.deep_supervision)
        for (const Var& head : out.scale_heads)
          loss = add(loss, scale(segmentation_loss(head, y, loss_cfg_),
                                 1.0 / static_cast<double>(out.scale_heads.size())));
      check_finite(loss, out.prediction, epoch);
      loss.backward();
      adam_.step(rec.lr);
      model_->params().zero_grad();
      ++result_.steps;

      loss_sum += loss.item();
      counts += confusion(y, out.prediction.value());
      ++batches;
    }
    rec.steps = result_.steps;
    rec.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    rec.train_dice = Metrics::from_counts(counts).dice.value;
    if (!data_->val_indices.empty()) {
      const Validation v = validate(data_->val_indices);
      const Metrics m = Metrics::from_counts(v.counts);
      rec.val_loss = v.loss;
      rec.val_dice = m.dice.value;
      rec.val_jaccard = m.jaccard.value;
    }
    return rec;
  }

  void check_finite(const Var& loss, const Var& prediction, std::size_t epoch) const {
    if (std::isfinite(loss.item())) return;
    std::ostringstream os;
    os << "non-finite loss " << loss.item() << " at epoch " << epoch << ", step "
       << result_.steps << "; prediction finite: " << (prediction.value().all_finite() ? "yes" : "no");
    for (const auto& e : model_->params().entries())
      if (!e.var.value().all_finite()) {
        os << "; first non-finite parameter: " << e.name;
        break;
      }
    fail(Errc::numeric, os.str());
  }

  void persist(const EpochRecord& rec) {
    // The state file is the commit point for resume; history may run ahead of
    // it by one line after a crash and is truncated on resume.
    std::ofstream h(*out_dir_ / "history.jsonl", rec.epoch == 0 ? std::ios::trunc : std::ios::app);
    require(static_cast<bool>(h), Errc::io, "cannot write history.jsonl");
    h << rec.to_json().dump() << "\n";
    h.close();
    model_->save(*out_dir_ / "last.fnt1");
    save_fns1(*out_dir_ / "state.fns1", state());
  }

  Model* model_;
  const Dataset* data_;
  TrainConfig cfg_;
  LossConfig loss_cfg_;
  std::optional<std::filesystem::path> out_dir_;
  Adam adam_;
  TrainResult result_;
  std::function<void(const EpochRecord&)> on_epoch_;
};

// ---------------------------------------------------------------------------
// Evaluation

struct EvalReport {
  double threshold = 0.5;
  std::size_t images = 0;
  ConfusionCounts counts;
  Metrics global;
  Metrics per_image_mean;  // mean over images where each metric is defined
  std::vector<Metrics> per_image;
  std::optional<RocCurve> roc;  // absent when the masks hold a single class

  nlohmann::json to_json() const {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& m : per_image) per.push_back(m.to_json());
    return {{"threshold", threshold},
            {"images", images},
            {"counts", counts.to_json()},
            {"global", global.to_json()},
            {"per_image_mean", per_image_mean.to_json()},
            {"per_image", per},
            {"auc", roc ? nlohmann::json(roc->auc) : nlohmann::json(nullptr)},
            {"roc_points", roc ? roc->points.size() : 0}};
  }

  std::string roc_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "fpr,tpr\n";
    if (roc)
      for (const auto& [f, t] : roc->points) os << f << ',' << t << '\n';
    return os.str();
  }
};

/// Eval-mode predictions for every image, in dataset order.
inline Tensor predict(const Model& model, const Tensor& images, std::size_t batch_size = 8) {
  require(images.ndim() == 4, Errc::shape, "predict expects (N,C,H,W) images");
  const std::size_t N = images.dim(0);
  const std::size_t per = images.size() / N;
  Tensor out({N, 1, images.dim(2), images.dim(3)});
  const std::size_t per_out = out.size() / N;
  for (std::size_t b = 0; b < N; b += batch_size) {
    const std::size_t n = std::min(N, b + batch_size) - b;
    Shape s = images.shape();
    s[0] = n;
    std::vector<double> chunk(images.ptr() + b * per, images.ptr() + (b + n) * per);
    const Var pred = model.forward(Var(Tensor(s, std::move(chunk))), Context{Mode::eval, 0});
    std::copy_n(pred.value().ptr(), n * per_out, out.ptr() + b * per_out);
  }
  return out;
}

inline EvalReport evaluate(const Model& model, const Dataset& data, double threshold = 0.5) {
  require(data.size() > 0, Errc::argument, "cannot evaluate an empty dataset");
  require(data.images.dim(1) == model.config().in_channels, Errc::shape,
          "dataset channel count does not match the model");
  const Tensor pred = predict(model, data.images);
  EvalReport r;
  r.threshold = threshold;
  r.images = data.size();
  const std::size_t per = pred.size() / r.images;
  double sums[6] = {}, defined[6] = {};
  for (std::size_t n = 0; n < r.images; ++n) {
    const auto c = confusion(data.masks.data().subspan(n * per, per),
                             pred.data().subspan(n * per, per), threshold);
    r.counts += c;
    const Metrics m = Metrics::from_counts(c);
    r.per_image.push_back(m);
    const Ratio* fields[6] = {&m.precision, &m.recall, &m.accuracy, &m.dice, &m.jaccard, &m.f1};
    for (int i = 0; i < 6; ++i)
      if (fields[i]->defined) {
        sums[i] += fields[i]->value;
        defined[i] += 1;
      }
  }
  r.global = Metrics::from_counts(r.counts);
  Ratio* means[6] = {&r.per_image_mean.precision, &r.per_image_mean.recall,
                     &r.per_image_mean.accuracy,  &r.per_image_mean.dice,
                     &r.per_image_mean.jaccard,   &r.per_image_mean.f1};
  for (int i = 0; i < 6; ++i) *means[i] = Ratio::of(sums[i], defined[i]);
  if (r.counts.tp + r.counts.fn > 0 && r.counts.fp + r.counts.tn > 0)
    r.roc = roc(pred.data(), data.masks.data());
  return r;
}

}  // namespace focusnet
