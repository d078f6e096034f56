#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "focusnet/blocks.hpp"
#include "focusnet/fnt1.hpp"

namespace focusnet {

using json = nlohmann::json;

enum class DecoderMode { multiscale, plain };

inline std::string_view decoder_mode_name(DecoderMode m) {
  return m == DecoderMode::multiscale ? "multiscale" : "plain";
}

inline std::string_view combine_mode_name(CombineMode m) {
  return m == CombineMode::permutation_equivariant_1x1 ? "permutation_equivariant_1x1"
                                                       : "channel_shuffle";
}

struct ModelConfig {
  std::size_t in_channels = 3;
  std::size_t scales = 4;
  std::vector<std::size_t> widths{16, 32, 64, 128};
  std::size_t first_kernel = 5;
  std::size_t body_kernel = 3;
  std::size_t attention_kernel = 1;
  double bottleneck_dropout = 0.5;
  DecoderMode decoder_mode = DecoderMode::multiscale;
  BlockKind block_kind = BlockKind::group_attention;
  CombineMode combine_mode = CombineMode::permutation_equivariant_1x1;
  double leaky_slope = 0.3;
  std::size_t se_reduction = 8;
  std::size_t cardinality = 4;
  bool deep_supervision = false;

  /// S=4, widths [16,32,64,128]; trained on 64x64 inputs.
  static ModelConfig alpha_tiny() { return ModelConfig{}; }

  /// The lightweight preset: widths [8,16,32,64].
  static ModelConfig alpha_lite() {
    ModelConfig c;
    c.widths = {8, 16, 32, 64};
    return c;
  }

  bool uses_groups() const {
    return block_kind == BlockKind::group_attention ||
           block_kind == BlockKind::concat_horizontal;
  }

  BlockOptions block_options() const {
    return BlockOptions{leaky_slope, se_reduction, body_kernel, attention_kernel, cardinality};
  }

  std::size_t spatial_multiple() const { return std::size_t{1} << (scales - 1); }

  void validate() const {
    require(in_channels > 0, Errc::config, "in_channels must be positive");
    require(scales >= 1 && scales <= 16, Errc::config, "scales must lie in [1, 16]");
    require(widths.size() == scales, Errc::config,
            "widths must list exactly " + std::to_string(scales) + " entries");
    for (std::size_t w : widths) {
      require(w > 0, Errc::config, "widths must be positive");
      if (uses_groups())
        require(w % kFilterGroups == 0, Errc::config,
                "width " + std::to_string(w) + " is not divisible by 4 (filter groups)");
    }
    for (std::size_t k : {first_kernel, body_kernel, attention_kernel})
      require(k % 2 == 1, Errc::config, "kernel sizes must be odd");
    require(bottleneck_dropout >= 0.0 && bottleneck_dropout < 1.0, Errc::config,
            "bottleneck_dropout must lie in [0, 1)");
    require(leaky_slope >= 0.0, Errc::config, "leaky_slope must be non-negative");
    require(se_reduction > 0 && cardinality > 0, Errc::config,
            "se_reduction and cardinality must be positive");
  }

  json to_json() const {
    return json{{"in_channels", in_channels},
                {"scales", scales},
                {"widths", widths},
                {"first_kernel", first_kernel},
                {"body_kernel", body_kernel},
                {"attention_kernel", attention_kernel},
                {"bottleneck_dropout", bottleneck_dropout},
                {"decoder_mode", decoder_mode_name(decoder_mode)},
                {"block_kind", block_kind_name(block_kind)},
                {"combine_mode", combine_mode_name(combine_mode)},
                {"leaky_slope", leaky_slope},
                {"se_reduction", se_reduction},
                {"cardinality", cardinality},
                {"deep_supervision", deep_supervision}};
  }

  /// Missing keys keep their defaults; unknown keys are rejected.
  static ModelConfig from_json(const json& j) {
    require(j.is_object(), Errc::config, "model config must be a JSON object");
    static const std::set<std::string> known{
        "in_channels", "scales", "widths", "first_kernel", "body_kernel",
        "attention_kernel", "bottleneck_dropout", "decoder_mode", "block_kind",
        "combine_mode", "leaky_slope", "se_reduction", "cardinality", "deep_supervision"};
    for (const auto& [key, _] : j.items())
      require(known.contains(key), Errc::config, "unknown model config key '" + key + "'");
    ModelConfig c;
    try {
      if (j.contains("in_channels")) c.in_channels = j.at("in_channels").get<std::size_t>();
      if (j.contains("scales")) c.scales = j.at("scales").get<std::size_t>();
      if (j.contains("widths")) c.widths = j.at("widths").get<std::vector<std::size_t>>();
      if (j.contains("first_kernel")) c.first_kernel = j.at("first_kernel").get<std::size_t>();
      if (j.contains("body_kernel")) c.body_kernel = j.at("body_kernel").get<std::size_t>();
      if (j.contains("attention_kernel"))
        c.attention_kernel = j.at("attention_kernel").get<std::size_t>();
      if (j.contains("bottleneck_dropout"))
        c.bottleneck_dropout = j.at("bottleneck_dropout").get<double>();
      if (j.contains("decoder_mode")) {
        const auto s = j.at("decoder_mode").get<std::string>();
        require(s == "multiscale" || s == "plain", Errc::config,
                "decoder_mode must be multiscale or plain");
        c.decoder_mode = s == "plain" ? DecoderMode::plain : DecoderMode::multiscale;
      }
      if (j.contains("block_kind"))
        c.block_kind = parse_block_kind(j.at("block_kind").get<std::string>());
      if (j.contains("combine_mode")) {
        const auto s = j.at("combine_mode").get<std::string>();
        require(s == "permutation_equivariant_1x1" || s == "channel_shuffle", Errc::config,
                "combine_mode must be permutation_equivariant_1x1 or channel_shuffle");
        c.combine_mode = s == "channel_shuffle" ? CombineMode::channel_shuffle
                                                : CombineMode::permutation_equivariant_1x1;
      }
      if (j.contains("leaky_slope")) c.leaky_slope = j.at("leaky_slope").get<double>();
      if (j.contains("se_reduction")) c.se_reduction = j.at("se_reduction").get<std::size_t>();
      if (j.contains("cardinality")) c.cardinality = j.at("cardinality").get<std::size_t>();
      if (j.contains("deep_supervision"))
        c.deep_supervision = j.at("deep_supervision").get<bool>();
    } catch (const json::exception& e) {
      fail(Errc::config, std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Applies an ablation variant: full | md | res_a | ch | cs.
inline ModelConfig apply_variant(ModelConfig c, std::string_view variant) {
  if (variant == "full") {
    c.decoder_mode = DecoderMode::multiscale;
    c.block_kind = BlockKind::group_attention;
    c.combine_mode = CombineMode::permutation_equivariant_1x1;
  } else if (variant == "md") {
    c.decoder_mode = DecoderMode::plain;
  } else if (variant == "res_a") {
    c.block_kind = BlockKind::res_a;
  } else if (variant == "ch") {
    c.block_kind = BlockKind::concat_horizontal;
  } else if (variant == "cs") {
    c.combine_mode = CombineMode::channel_shuffle;
  } else {
    fail(Errc::argument, "unknown variant '" + std::string(variant) + "'");
  }
  return c;
}

inline ModelConfig load_model_config(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(Errc::format, "cannot parse '" + path.string() + "': " + e.what());
  }
  return ModelConfig::from_json(j);
}

/// Additive encoder-decoder skip.
inline Var skip_connect(const Var& encoder, const Var& decoder) {
  return add(decoder, encoder);
}

/// conv-bn-LeakyReLU-conv-sigmoid head producing a one-channel map.
struct SegmentationHead {
  std::string name;
  Conv2d conv1;
  BatchNorm2d bn;
  Conv2d conv2;
  double slope = 0.3;

  static SegmentationHead make(Builder& b, const std::string& name, std::size_t in,
                               std::size_t hidden, const ModelConfig& cfg) {
    SegmentationHead h;
    h.name = name;
    h.slope = cfg.leaky_slope;
    h.conv1 = Conv2d::make(b, name + ".conv1", conv_spec(cfg.body_kernel, in, hidden, false));
    h.bn = BatchNorm2d::make(b, name + ".bn", hidden);
    h.conv2 = Conv2d::make(b, name + ".conv2", conv_spec(cfg.attention_kernel, hidden, 1, true));
    return h;
  }

  Var operator()(const Var& x, const Context& ctx) const {
    FlopScope scope(name);
    return sigmoid(conv2(leaky_relu(bn(conv1(x), ctx), slope)));
  }
};

using AnyBlock = std::variant<GroupAttentionBlock, VariantBlock>;

inline Var run_block(const AnyBlock& b, const Var& x, const Context& ctx) {
  return std::visit([&](const auto& blk) { return blk(x, ctx); }, b);
}

// Parameter names (declaration order):
//   stem.conv.weight, stem.bn.{gamma,beta,running_mean,running_var}
//   block{i}.*  i = 0..S-2 encoder, S-1 bottleneck, S..2S-2 decoder (coarse to fine)
//     group attention: entry.weight, pair{j}.attn.{bn1,conv1,bn2,conv2,gate}.*,
//       pair{j}.res.{bn1,conv1,bn2,conv2}.*, pair{j}.post.*, combine.*,
//       se.{reduce,expand}.weight   (concat_horizontal: pair{j}.left replaces attn)
//     variant kinds: proj.weight then the kind's layers (see VariantBlock)
//   multiscale: head{s}.{conv1,bn,conv2}.* for s = 0..S-1 (0 = full resolution)
//   final.{conv1,bn,conv2}.*
class Model {
 public:
  struct Output {
    Var prediction;               // (N,1,H,W) in (0,1)
    std::vector<Var> scale_heads;  // multiscale mode, upsampled, scale 0 first
  };

  static Model build(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model m;
    m.config_ = config;
    m.store_ = std::make_unique<ParamStore>();
    Rng rng(seed);
    Builder b{*m.store_, rng};
    const auto& w = config.widths;
    const std::size_t S = config.scales;
    m.stem_conv_ = Conv2d::make(
        b, "stem.conv", conv_spec(config.first_kernel, config.in_channels, w[0], false));
    m.stem_bn_ = BatchNorm2d::make(b, "stem.bn", w[0]);

    std::size_t index = 0;
    auto make_block = [&](std::size_t in, std::size_t out) {
      const std::string name = "block" + std::to_string(index++);
      const BlockOptions opt = config.block_options();
      if (config.uses_groups()) {
        const PairMode pm = config.block_kind == BlockKind::concat_horizontal
                                ? PairMode::concat_horizontal
                                : PairMode::hadamard;
        m.blocks_.emplace_back(
            GroupAttentionBlock::make(b, name, in, out, opt, config.combine_mode, pm));
      } else {
        m.blocks_.emplace_back(VariantBlock::make(b, name, config.block_kind, in, out, opt, true));
      }
    };
    for (std::size_t i = 0; i + 1 < S; ++i) make_block(i == 0 ? w[0] : w[i - 1], w[i]);
    make_block(S >= 2 ? w[S - 2] : w[0], w[S - 1]);
    for (std::size_t i = S - 1; i-- > 0;) make_block(w[i + 1], w[i]);

    const std::size_t hidden = w[0];
    if (config.decoder_mode == DecoderMode::multiscale) {
      for (std::size_t s = 0; s < S; ++s)
        m.heads_.push_back(
            SegmentationHead::make(b, "head" + std::to_string(s), w[s], hidden, config));
      m.final_ = SegmentationHead::make(b, "final", S, hidden, config);
    } else {
      m.final_ = SegmentationHead::make(b, "final", w[0], hidden, config);
    }
    return m;
  }

  const ModelConfig& config() const noexcept { return config_; }
  ParamStore& params() noexcept { return *store_; }
  const ParamStore& params() const noexcept { return *store_; }

  Output forward_all(const Var& x, const Context& ctx) const {
    const std::size_t S = config_.scales;
    require(x.value().ndim() == 4 && x.dim(1) == config_.in_channels, Errc::shape,
            "model expects (N," + std::to_string(config_.in_channels) + ",H,W) input, got " +
                shape_str(x.shape()));
    const std::size_t mult = config_.spatial_multiple();
    require(x.dim(2) % mult == 0 && x.dim(3) % mult == 0, Errc::shape,
            "input H and W must be divisible by " + std::to_string(mult));

    Var h;
    {
      FlopScope scope("stem");
      h = leaky_relu(stem_bn_(stem_conv_(x), ctx), config_.leaky_slope);
    }
    std::vector<Var> encoder;
    for (std::size_t i = 0; i + 1 < S; ++i) {
      encoder.push_back(run_block(blocks_[i], h, ctx));
      FlopScope scope("pool" + std::to_string(i));
      h = max_pool2(encoder.back());
    }
    h = run_block(blocks_[S - 1], h, ctx);
    {
      FlopScope scope("bottleneck.dropout");
      h = dropout(h, config_.bottleneck_dropout, ctx.mode, ctx.dropout_seed);
    }
    std::vector<Var> scale_out(S);
    scale_out[S - 1] = h;
    for (std::size_t k = 0; k + 1 < S; ++k) {
      const std::size_t scale = S - 2 - k;
      const Var up = upsample_repeat2(h);
      const Var d = run_block(blocks_[S + k], up, ctx);
      FlopScope scope("skip" + std::to_string(scale));
      h = skip_connect(encoder[scale], d);
      scale_out[scale] = h;
    }

    Output out;
    if (config_.decoder_mode == DecoderMode::plain) {
      out.prediction = final_(scale_out[0], ctx);
      return out;
    }
    for (std::size_t s = 0; s < S; ++s) {
      Var m = heads_[s](scale_out[s], ctx);
      for (std::size_t u = 0; u < s; ++u) m = upsample_repeat2(m);
      out.scale_heads.push_back(m);
    }
    out.prediction = final_(concat_channels(out.scale_heads), ctx);
    return out;
  }

  Var forward(const Var& x, const Context& ctx) const { return forward_all(x, ctx).prediction; }

  std::size_t count_params() const { return store_->trainable_count(); }

  /// Eval-mode FLOPs for one input of `input_shape` (C,H,W or N,C,H,W; N is
  /// ignored and counted as 1).
  FlopCounter count_flops_detail(const Shape& input_shape) const {
    Shape s = input_shape;
    if (s.size() == 4) s.erase(s.begin());
    require(s.size() == 3, Errc::shape, "count_flops: expected (C,H,W) shape");
    FlopCounter counter;
    {
      CountFlops guard(counter);
      const Var x(Tensor::zeros({1, s[0], s[1], s[2]}));
      Context ctx{Mode::eval, 0};
      forward(x, ctx);
    }
    return counter;
  }

  std::uint64_t count_flops(const Shape& input_shape) const {
    return count_flops_detail(input_shape).total();
  }

  /// Per-layer report in declaration order, then unparameterized ops.
  std::string summary(const Shape& input_shape) const {
    const FlopCounter counter = count_flops_detail(input_shape);
    std::map<std::string, std::uint64_t> flops_by_scope;
    std::vector<std::string> scope_order;
    for (const auto& e : counter.entries()) {
      if (!flops_by_scope.contains(e.scope)) scope_order.push_back(e.scope);
      flops_by_scope[e.scope] += e.flops;
    }
    std::vector<std::string> layers;
    std::map<std::string, std::size_t> params_by_layer;
    for (const auto& e : store_->entries()) {
      const std::string layer = e.name.substr(0, e.name.rfind('.'));
      if (!params_by_layer.contains(layer)) layers.push_back(layer);
      params_by_layer[layer] += e.trainable ? e.var.value().size() : 0;
    }
    std::ostringstream os;
    os << "model " << block_kind_name(config_.block_kind) << " "
       << decoder_mode_name(config_.decoder_mode) << " input " << shape_str(input_shape) << "\n";
    os << "layer\tparams\tflops\n";
    std::uint64_t listed = 0;
    for (const auto& layer : layers) {
      const std::uint64_t f = flops_by_scope.contains(layer) ? flops_by_scope[layer] : 0;
      listed += f;
      os << layer << '\t' << params_by_layer[layer] << '\t' << f << '\n';
    }
    for (const auto& scope : scope_order) {
      if (params_by_layer.contains(scope)) continue;
      listed += flops_by_scope[scope];
      os << scope << " (ops)\t0\t" << flops_by_scope[scope] << '\n';
    }
    os << "total params\t" << count_params() << "\n";
    os << "total flops\t" << counter.total() << "\n";
    return os.str();
  }

  /// All named tensors (parameters and running statistics).
  std::vector<NamedTensor> state() const {
    std::vector<NamedTensor> out;
    for (const auto& e : store_->entries()) out.push_back({e.name, e.var.value()});
    return out;
  }

  /// Replaces every named tensor; the name set and shapes must match exactly.
  void load_state(const std::vector<NamedTensor>& tensors) {
    std::map<std::string, const Tensor*> incoming;
    for (const auto& t : tensors) {
      require(incoming.emplace(t.name, &t.tensor).second, Errc::format,
              "duplicate tensor '" + t.name + "' in checkpoint");
      require(store_->contains(t.name), Errc::config,
              "checkpoint has unknown parameter '" + t.name + "'");
    }
    for (const auto& e : store_->entries()) {
      auto it = incoming.find(e.name);
      require(it != incoming.end(), Errc::config,
              "checkpoint is missing parameter '" + e.name + "'");
      require(it->second->shape() == e.var.shape(), Errc::config,
              "parameter '" + e.name + "' has shape " + shape_str(it->second->shape()) +
                  ", model expects " + shape_str(e.var.shape()));
    }
    for (const auto& e : store_->entries()) {
      Var v = e.var;
      v.mutable_value() = *incoming.at(e.name);
    }
  }

  void save(const std::filesystem::path& path) const { save_fnt1(path, state()); }

  static Model load(const std::filesystem::path& path, const ModelConfig& config) {
    const auto tensors = load_fnt1(path);
    Model m = build(config, 0);
    m.load_state(tensors);
    return m;
  }

 private:
  ModelConfig config_;
  std::unique_ptr<ParamStore> store_;
  Conv2d stem_conv_;
  BatchNorm2d stem_bn_;
  std::vector<AnyBlock> blocks_;
  std::vector<SegmentationHead> heads_;
  SegmentationHead final_;
};

}  // namespace focusnet
