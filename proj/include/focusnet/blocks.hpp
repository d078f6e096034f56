#pragma once

#include <array>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "focusnet/params.hpp"

namespace focusnet {

struct BlockOptions {
  double leaky_slope = 0.3;
  std::size_t se_reduction = 8;
  std::size_t body_kernel = 3;       // feature extraction
  std::size_t attention_kernel = 1;  // convolutions preceding a sigmoid gate
  std::size_t cardinality = 4;       // ResNeXt branches
};

// ---------------------------------------------------------------------------
// Squeeze and excitation: GAP -> reduce (ReLU) -> expand (sigmoid) -> scale.

struct SqueezeExcite {
  std::string name;
  std::size_t channels = 0;
  std::size_t latent = 0;
  Dense reduce;  // (c, c/r)
  Dense expand;  // (c/r, c)

  static SqueezeExcite make(Builder& b, const std::string& name, std::size_t channels,
                            std::size_t reduction) {
    require(reduction > 0 && channels % reduction == 0, Errc::config,
            name + ": squeeze-excite reduction " + std::to_string(reduction) +
                " does not divide " + std::to_string(channels) + " channels");
    SqueezeExcite se;
    se.name = name;
    se.channels = channels;
    se.latent = channels / reduction;
    se.reduce = Dense::make(b, name + ".reduce", channels, se.latent);
    se.expand = Dense::make(b, name + ".expand", se.latent, channels);
    return se;
  }

  /// Per-channel gates in (0,1), shape (N, C).
  Var gates(const Var& x) const {
    require(x.value().ndim() == 4 && x.dim(1) == channels, Errc::shape,
            name + ": expected " + std::to_string(channels) + " channels, got " +
                shape_str(x.shape()));
    FlopScope scope(name);
    return sigmoid(expand(relu(reduce(global_avg_pool(x)))));
  }

  Var operator()(const Var& x) const {
    const Var g = gates(x);
    FlopScope scope(name);
    return scale_channels(x, g);
  }
};

inline Var squeeze_excite(const Var& i2, const SqueezeExcite& p) { return p(i2); }

// ---------------------------------------------------------------------------
// FocusNet attention module.
//
//   F1  = sigmoid(conv1x1(relu(conv(relu(conv(F))))))   per-pixel map
//   I2  = relu(conv(relu(conv(F))))                      feature branch
//   s   = SE(I2)
//   P   = F1 (.) s
//   F2  = SA(P)                                          second SE stage
//   out = F + F2

struct FocusNetAttention {
  std::string name;
  std::size_t channels = 0;
  Conv2d pixel1, pixel2, pixel_gate;
  Conv2d feature1, feature2;
  SqueezeExcite se;
  SqueezeExcite sa;

  struct Trace {
    Var f1, i2, s, p, f2, out;
  };

  static FocusNetAttention make(Builder& b, const std::string& name, std::size_t channels,
                                const BlockOptions& opt = {}) {
    FocusNetAttention m;
    m.name = name;
    m.channels = channels;
    const std::size_t k = opt.body_kernel, ka = opt.attention_kernel;
    m.pixel1 = Conv2d::make(b, name + ".pixel.conv1", conv_spec(k, channels, channels, true));
    m.pixel2 = Conv2d::make(b, name + ".pixel.conv2", conv_spec(k, channels, channels, true));
    m.pixel_gate = Conv2d::make(b, name + ".pixel.gate", conv_spec(ka, channels, channels, true));
    m.feature1 = Conv2d::make(b, name + ".feature.conv1", conv_spec(k, channels, channels, true));
    m.feature2 = Conv2d::make(b, name + ".feature.conv2", conv_spec(k, channels, channels, true));
    const std::size_t r = std::min(opt.se_reduction, channels);
    m.se = SqueezeExcite::make(b, name + ".se", channels, r);
    m.sa = SqueezeExcite::make(b, name + ".sa", channels, r);
    return m;
  }

  Trace trace(const Var& f) const {
    require(f.value().ndim() == 4 && f.dim(1) == channels, Errc::shape,
            name + ": expected " + std::to_string(channels) + " channels, got " +
                shape_str(f.shape()));
    FlopScope scope(name);
    Trace t;
    t.f1 = sigmoid(pixel_gate(relu(pixel2(relu(pixel1(f))))));
    t.i2 = relu(feature2(relu(feature1(f))));
    t.s = se(t.i2);
    t.p = mul(t.f1, t.s);
    t.f2 = sa(t.p);
    t.out = add(f, t.f2);
    return t;
  }

  Var operator()(const Var& f) const { return trace(f).out; }
};

inline Var focusnet_attention(const Var& f, const FocusNetAttention& p) { return p(f); }

// ---------------------------------------------------------------------------
// Sub-blocks of the residual group attention block.

/// bn-LeakyReLU-conv, bn-LeakyReLU-conv, conv-sigmoid: a per-pixel map in
/// (0,1) with the shape of its input.
struct AttentionSubblock {
  std::string name;
  BatchNorm2d bn1, bn2;
  Conv2d conv1, conv2, gate;
  double slope = 0.3;

  static AttentionSubblock make(Builder& b, const std::string& name, std::size_t width,
                                const BlockOptions& opt) {
    AttentionSubblock a;
    a.name = name;
    a.slope = opt.leaky_slope;
    a.bn1 = BatchNorm2d::make(b, name + ".bn1", width);
    a.conv1 = Conv2d::make(b, name + ".conv1", conv_spec(opt.body_kernel, width, width, false));
    a.bn2 = BatchNorm2d::make(b, name + ".bn2", width);
    a.conv2 = Conv2d::make(b, name + ".conv2", conv_spec(opt.body_kernel, width, width, true));
    a.gate = Conv2d::make(b, name + ".gate", conv_spec(opt.attention_kernel, width, width, true));
    return a;
  }

  Var operator()(const Var& x, const Context& ctx) const {
    FlopScope scope(name);
    Var h = conv1(leaky_relu(bn1(x, ctx), slope));
    h = conv2(leaky_relu(bn2(h, ctx), slope));
    return sigmoid(gate(h));
  }
};

/// x + F(x) with F = two bn-LeakyReLU-conv operations.
struct ResidualSubblock {
  std::string name;
  BatchNorm2d bn1, bn2;
  Conv2d conv1, conv2;
  double slope = 0.3;

  static ResidualSubblock make(Builder& b, const std::string& name, std::size_t width,
                               const BlockOptions& opt) {
    ResidualSubblock r;
    r.name = name;
    r.slope = opt.leaky_slope;
    r.bn1 = BatchNorm2d::make(b, name + ".bn1", width);
    r.conv1 = Conv2d::make(b, name + ".conv1", conv_spec(opt.body_kernel, width, width, false));
    r.bn2 = BatchNorm2d::make(b, name + ".bn2", width);
    r.conv2 = Conv2d::make(b, name + ".conv2", conv_spec(opt.body_kernel, width, width, true));
    return r;
  }

  Var residual(const Var& x, const Context& ctx) const {
    FlopScope scope(name);
    const Var h = conv1(leaky_relu(bn1(x, ctx), slope));
    return conv2(leaky_relu(bn2(h, ctx), slope));
  }

  Var operator()(const Var& x, const Context& ctx) const {
    const Var f = residual(x, ctx);
    FlopScope scope(name);
    return add(x, f);
  }
};

inline Var attention_subblock(const Var& x, const AttentionSubblock& p, const Context& ctx) {
  return p(x, ctx);
}
inline Var residual_subblock(const Var& x, const ResidualSubblock& p, const Context& ctx) {
  return p(x, ctx);
}

// ---------------------------------------------------------------------------
// Channel shuffle: out[k] = in[(k mod g) * (C/g) + k / g].

inline std::vector<std::size_t> channel_shuffle_permutation(std::size_t channels,
                                                            std::size_t groups) {
  require(groups > 0 && channels % groups == 0, Errc::shape,
          "channel_shuffle: " + std::to_string(channels) +
              " channels not divisible by " + std::to_string(groups) + " groups");
  const std::size_t per = channels / groups;
  std::vector<std::size_t> perm(channels);
  for (std::size_t k = 0; k < channels; ++k) perm[k] = (k % groups) * per + k / groups;
  return perm;
}

inline std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t k = 0; k < perm.size(); ++k) inv[perm[k]] = k;
  return inv;
}

inline Var channel_shuffle(const Var& x, std::size_t groups) {
  require(x.value().ndim() == 4, Errc::shape, "channel_shuffle: expected NCHW input");
  return permute_channels(x, channel_shuffle_permutation(x.dim(1), groups));
}

// ---------------------------------------------------------------------------
// Residual group attention block.
//
// entry 1x1 -> split into 4 groups -> pairs (0,1), (2,3): the left group of a
// pair is the attention group and gates the feature group to its right,
// A = attention(g_left) (.) residual(g_right) -> per-pair 1x1 to 2*(C/4)
// -> concat -> combine (1x1 or channel shuffle) -> SE -> + entry output.

enum class CombineMode { permutation_equivariant_1x1, channel_shuffle };
/// concat_horizontal replaces the hadamard gating by residual sub-blocks on
/// both groups of a pair, concatenated depthwise.
enum class PairMode { hadamard, concat_horizontal };

inline constexpr std::size_t kFilterGroups = 4;

struct GroupAttentionBlock {
  struct Pair {
    std::optional<AttentionSubblock> attn;  // hadamard mode
    std::optional<ResidualSubblock> left;   // concat_horizontal mode
    ResidualSubblock res;
    Conv2d post;
  };

  std::string name;
  std::size_t in_channels = 0;
  std::size_t width = 0;        // C_b
  std::size_t group_width = 0;  // C_b / 4
  CombineMode combine_mode = CombineMode::permutation_equivariant_1x1;
  PairMode pair_mode = PairMode::hadamard;
  Conv2d entry;
  std::array<Pair, 2> pairs;
  std::optional<Conv2d> combine;
  SqueezeExcite se;
  /// Position k of the combine input holds concat chunk concat_order[k]
  /// (chunks are C_b/4 wide: pair 0 yields chunks 0,1 and pair 1 chunks 2,3).
  std::array<std::size_t, kFilterGroups> concat_order{0, 1, 2, 3};

  static GroupAttentionBlock make(Builder& b, const std::string& name,
                                  std::size_t in_channels, std::size_t width,
                                  const BlockOptions& opt,
                                  CombineMode combine_mode = CombineMode::permutation_equivariant_1x1,
                                  PairMode pair_mode = PairMode::hadamard) {
    require(width > 0 && width % kFilterGroups == 0, Errc::config,
            name + ": block width " + std::to_string(width) + " is not divisible by 4");
    GroupAttentionBlock blk;
    blk.name = name;
    blk.in_channels = in_channels;
    blk.width = width;
    blk.group_width = width / kFilterGroups;
    blk.combine_mode = combine_mode;
    blk.pair_mode = pair_mode;
    const std::size_t c = blk.group_width;
    blk.entry = Conv2d::make(b, name + ".entry", conv_spec(1, in_channels, width, false));
    for (std::size_t j = 0; j < blk.pairs.size(); ++j) {
      const std::string pn = name + ".pair" + std::to_string(j);
      Pair& p = blk.pairs[j];
      if (pair_mode == PairMode::hadamard) {
        p.attn = AttentionSubblock::make(b, pn + ".attn", c, opt);
        p.res = ResidualSubblock::make(b, pn + ".res", c, opt);
        p.post = Conv2d::make(b, pn + ".post", conv_spec(1, c, 2 * c, true));
      } else {
        p.left = ResidualSubblock::make(b, pn + ".left", c, opt);
        p.res = ResidualSubblock::make(b, pn + ".res", c, opt);
        p.post = Conv2d::make(b, pn + ".post", conv_spec(1, 2 * c, 2 * c, true));
      }
    }
    if (combine_mode == CombineMode::permutation_equivariant_1x1)
      blk.combine = Conv2d::make(b, name + ".combine", conv_spec(1, width, width, true));
    blk.se = SqueezeExcite::make(b, name + ".se", width, std::min(opt.se_reduction, width));
    return blk;
  }

  /// Entry 1x1 output: the four groups and the residual skip.
  Var entry_output(const Var& x) const {
    require(x.value().ndim() == 4 && x.dim(1) == in_channels, Errc::shape,
            name + ": expected " + std::to_string(in_channels) + " input channels, got " +
                shape_str(x.shape()));
    return entry(x);
  }

  Var operator()(const Var& x, const Context& ctx) const {
    FlopScope scope(name);
    const Var m = entry_output(x);
    const std::size_t c = group_width;
    std::vector<Var> chunks;
    for (std::size_t j = 0; j < pairs.size(); ++j) {
      const Pair& p = pairs[j];
      const Var g_left = slice_channels(m, (2 * j) * c, c);
      const Var g_right = slice_channels(m, (2 * j + 1) * c, c);
      Var a;
      if (pair_mode == PairMode::hadamard) {
        const Var map = (*p.attn)(g_left, ctx);
        const Var feat = p.res(g_right, ctx);
        FlopScope ps(name + ".pair" + std::to_string(j));
        a = mul(map, feat);
      } else {
        a = concat_channels({(*p.left)(g_left, ctx), p.res(g_right, ctx)});
      }
      const Var u = p.post(a);
      chunks.push_back(slice_channels(u, 0, c));
      chunks.push_back(slice_channels(u, c, c));
    }
    std::vector<Var> ordered;
    for (std::size_t k = 0; k < kFilterGroups; ++k) ordered.push_back(chunks.at(concat_order[k]));
    const Var cat = concat_channels(ordered);
    const Var mixed = combine ? (*combine)(cat) : channel_shuffle(cat, kFilterGroups);
    const Var recal = se(mixed);
    return add(recal, m);
  }
};

inline Var group_attention_block(const Var& x, const GroupAttentionBlock& p, const Context& ctx) {
  return p(x, ctx);
}

// ---------------------------------------------------------------------------
// Comparison residual blocks. All have the additive-skip form y = x + F(x).
//
//   basic            relu(x + bn(conv(relu(bn(conv(x))))))
//   identity_preact  x + conv(relu(bn(conv(relu(bn(x))))))
//   resnext          x + sum_i T_i(x),  T_i = bn(1x1(relu(bn(3x3(relu(bn(1x1(x))))))))
//   resnext_se       x + SE(sum_i T_i(x))
//   res_a            x + sigmoid(conv1x1(residual_subblock(x))) (.) x

enum class BlockKind {
  group_attention,
  basic,
  identity_preact,
  resnext,
  resnext_se,
  res_a,
  concat_horizontal,
};

inline std::string_view block_kind_name(BlockKind k) {
  switch (k) {
    case BlockKind::group_attention: return "group_attention";
    case BlockKind::basic: return "basic";
    case BlockKind::identity_preact: return "identity_preact";
    case BlockKind::resnext: return "resnext";
    case BlockKind::resnext_se: return "resnext_se";
    case BlockKind::res_a: return "res_a";
    case BlockKind::concat_horizontal: return "concat_horizontal";
  }
  return "?";
}

inline BlockKind parse_block_kind(std::string_view s) {
  for (BlockKind k : {BlockKind::group_attention, BlockKind::basic, BlockKind::identity_preact,
                      BlockKind::resnext, BlockKind::resnext_se, BlockKind::res_a,
                      BlockKind::concat_horizontal})
    if (block_kind_name(k) == s) return k;
  fail(Errc::config, "unknown block kind '" + std::string(s) + "'");
}

struct VariantBlock {
  struct Branch {
    Conv2d reduce, mid, expand;
    BatchNorm2d bn_a, bn_b, bn_c;
  };

  std::string name;
  BlockKind kind = BlockKind::basic;
  std::size_t in_channels = 0;
  std::size_t channels = 0;
  std::optional<Conv2d> proj;  // 1x1 width adapter in front of the block
  std::vector<Conv2d> convs;
  std::vector<BatchNorm2d> bns;
  std::vector<Branch> branches;
  std::optional<SqueezeExcite> se;
  std::optional<ResidualSubblock> body;
  std::optional<Conv2d> gate;
  double slope = 0.3;

  static VariantBlock make(Builder& b, const std::string& name, BlockKind kind,
                           std::size_t in_channels, std::size_t channels,
                           const BlockOptions& opt, bool with_projection) {
    require(kind != BlockKind::group_attention && kind != BlockKind::concat_horizontal,
            Errc::config, name + ": not a variant block kind");
    require(with_projection || in_channels == channels, Errc::shape,
            name + ": width change requires a projection");
    VariantBlock v;
    v.name = name;
    v.kind = kind;
    v.in_channels = in_channels;
    v.channels = channels;
    v.slope = opt.leaky_slope;
    const std::size_t k = opt.body_kernel, C = channels;
    if (with_projection)
      v.proj = Conv2d::make(b, name + ".proj", conv_spec(1, in_channels, C, false));
    switch (kind) {
      case BlockKind::basic:
        v.convs.push_back(Conv2d::make(b, name + ".conv1", conv_spec(k, C, C, false)));
        v.bns.push_back(BatchNorm2d::make(b, name + ".bn1", C));
        v.convs.push_back(Conv2d::make(b, name + ".conv2", conv_spec(k, C, C, false)));
        v.bns.push_back(BatchNorm2d::make(b, name + ".bn2", C));
        break;
      case BlockKind::identity_preact:
        v.bns.push_back(BatchNorm2d::make(b, name + ".bn1", C));
        v.convs.push_back(Conv2d::make(b, name + ".conv1", conv_spec(k, C, C, false)));
        v.bns.push_back(BatchNorm2d::make(b, name + ".bn2", C));
        v.convs.push_back(Conv2d::make(b, name + ".conv2", conv_spec(k, C, C, true)));
        break;
      case BlockKind::resnext:
      case BlockKind::resnext_se: {
        const std::size_t card = opt.cardinality;
        require(card > 0 && C % card == 0, Errc::config,
                name + ": width " + std::to_string(C) + " not divisible by cardinality " +
                    std::to_string(card));
        const std::size_t d = C / card;
        for (std::size_t i = 0; i < card; ++i) {
          const std::string bn = name + ".branch" + std::to_string(i);
          Branch br;
          br.reduce = Conv2d::make(b, bn + ".reduce", conv_spec(1, C, d, false));
          br.bn_a = BatchNorm2d::make(b, bn + ".bn_a", d);
          br.mid = Conv2d::make(b, bn + ".mid", conv_spec(k, d, d, false));
          br.bn_b = BatchNorm2d::make(b, bn + ".bn_b", d);
          br.expand = Conv2d::make(b, bn + ".expand", conv_spec(1, d, C, false));
          br.bn_c = BatchNorm2d::make(b, bn + ".bn_c", C);
          v.branches.push_back(std::move(br));
        }
        if (kind == BlockKind::resnext_se)
          v.se = SqueezeExcite::make(b, name + ".se", C, std::min(opt.se_reduction, C));
        break;
      }
      case BlockKind::res_a:
        v.body = ResidualSubblock::make(b, name + ".res", C, opt);
        v.gate = Conv2d::make(b, name + ".gate", conv_spec(opt.attention_kernel, C, C, true));
        break;
      default:
        break;
    }
    return v;
  }

  Var branch(std::size_t i, const Var& x, const Context& ctx) const {
    const Branch& br = branches.at(i);
    Var h = relu(br.bn_a(br.reduce(x), ctx));
    h = relu(br.bn_b(br.mid(h), ctx));
    return br.bn_c(br.expand(h), ctx);
  }

  Var operator()(const Var& input, const Context& ctx) const {
    FlopScope scope(name);
    require(input.value().ndim() == 4 && input.dim(1) == in_channels, Errc::shape,
            name + ": expected " + std::to_string(in_channels) + " input channels, got " +
                shape_str(input.shape()));
    const Var x = proj ? (*proj)(input) : input;
    switch (kind) {
      case BlockKind::basic: {
        Var h = relu(bns[0](convs[0](x), ctx));
        h = bns[1](convs[1](h), ctx);
        return relu(add(x, h));
      }
      case BlockKind::identity_preact: {
        Var h = convs[0](relu(bns[0](x, ctx)));
        h = convs[1](relu(bns[1](h, ctx)));
        return add(x, h);
      }
      case BlockKind::resnext:
      case BlockKind::resnext_se: {
        Var agg = branch(0, x, ctx);
        for (std::size_t i = 1; i < branches.size(); ++i) agg = add(agg, branch(i, x, ctx));
        if (se) agg = (*se)(agg);
        return add(x, agg);
      }
      case BlockKind::res_a: {
        const Var a = sigmoid((*gate)((*body)(x, ctx)));
        return add(x, mul(a, x));
      }
      default:
        fail(Errc::config, name + ": unsupported kind");
    }
  }
};

inline Var variant_block(const Var& x, const VariantBlock& p, const Context& ctx) {
  return p(x, ctx);
}

}  // namespace focusnet
