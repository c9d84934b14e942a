#pragma once

// Declarative model descriptions and their instantiated parameter state.
// A ModelSpec is an ordered list of layer descriptors; build-time shape
// inference checks that consecutive layers are compatible so a bad spec
// fails before any training starts. Residual blocks are encoded with a
// save/add marker pair so the forward walk stays a flat loop.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "plab/ops.hpp"
#include "plab/rng.hpp"
#include "plab/tensor.hpp"

namespace plab {

enum class LayerKind {
  Conv,
  Linear,
  BatchNorm,
  ReLU,
  GlobalAvgPool,
  Flatten,
  SaveInput,
  AddSaved,
};

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Linear: return "linear";
    case LayerKind::BatchNorm: return "bn";
    case LayerKind::ReLU: return "relu";
    case LayerKind::GlobalAvgPool: return "gap";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::SaveInput: return "save";
    case LayerKind::AddSaved: return "add";
  }
  return "?";
}

struct LayerDesc {
  LayerKind kind{};
  int out = 0;       // conv/linear output channels or features
  int kernel = 0;    // conv kernel size (1 or 3)
  int stride = 1;
  int pad = 0;
  bool bias = false;
  bool proj = false;  // AddSaved: saved branch goes through 1x1 conv + BN
  int group = -1;     // parameter group id ("layer" in reports)
};

struct ModelSpec {
  std::string kind;       // fc | allcnn | vardepth | reslite
  Shape input;            // [C,H,W]
  int classes = 10;
  std::vector<LayerDesc> layers;
  int num_groups = 0;
};

namespace detail {

struct ShapeCursor {
  int c = 0, h = 0, w = 0;
  bool flat = false;
  int feat = 0;
};

// Walks the descriptor list, validating compatibility; returns final feature
// count (logits width).
inline int infer_shapes(const ModelSpec& spec) {
  require(spec.input.size() == 3,
          msg("model input must be [C,H,W], got ", shape_str(spec.input)));
  ShapeCursor cur{spec.input[0], spec.input[1], spec.input[2], false, 0};
  std::vector<ShapeCursor> saved;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerDesc& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::Conv: {
        require(!cur.flat, msg("layer ", i, ": conv after flatten"));
        require(l.kernel == 1 || l.kernel == 3,
                msg("layer ", i, ": conv kernel must be 1 or 3, got ",
                    l.kernel));
        require(l.stride == 1 || l.stride == 2,
                msg("layer ", i, ": conv stride must be 1 or 2, got ",
                    l.stride));
        const int ho = (cur.h + 2 * l.pad - l.kernel) / l.stride + 1;
        const int wo = (cur.w + 2 * l.pad - l.kernel) / l.stride + 1;
        require(ho >= 1 && wo >= 1,
                msg("layer ", i, ": conv output empty at input ", cur.h, "x",
                    cur.w, " kernel ", l.kernel, " stride ", l.stride));
        cur.c = l.out;
        cur.h = ho;
        cur.w = wo;
        break;
      }
      case LayerKind::Linear:
        require(cur.flat, msg("layer ", i, ": linear before flatten"));
        cur.feat = l.out;
        break;
      case LayerKind::BatchNorm:
      case LayerKind::ReLU:
        break;
      case LayerKind::GlobalAvgPool:
        require(!cur.flat, msg("layer ", i, ": pooling after flatten"));
        cur.flat = true;
        cur.feat = cur.c;
        break;
      case LayerKind::Flatten:
        require(!cur.flat, msg("layer ", i, ": flatten twice"));
        cur.flat = true;
        cur.feat = cur.c * cur.h * cur.w;
        break;
      case LayerKind::SaveInput:
        saved.push_back(cur);
        break;
      case LayerKind::AddSaved: {
        require(!saved.empty(), msg("layer ", i, ": add without saved input"));
        ShapeCursor s = saved.back();
        saved.pop_back();
        if (l.proj) {
          s.c = l.out;
          s.h = (s.h - 1) / l.stride + 1;
          s.w = (s.w - 1) / l.stride + 1;
        }
        require(!cur.flat && !s.flat && s.c == cur.c && s.h == cur.h &&
                    s.w == cur.w,
                msg("layer ", i, ": residual shapes differ, main ", cur.c, "x",
                    cur.h, "x", cur.w, " vs skip ", s.c, "x", s.h, "x", s.w));
        break;
      }
    }
  }
  require(saved.empty(), "model ends with unconsumed saved inputs");
  require(cur.flat, "model must end in flattened features");
  return cur.feat;
}

}  // namespace detail

inline void validate(const ModelSpec& spec) {
  const int feat = detail::infer_shapes(spec);
  require(feat == spec.classes,
          msg("model produces ", feat, " logits but spec declares ",
              spec.classes, " classes"));
}

// Canonical content hash; identical specs hash identically across runs.
inline std::uint64_t spec_hash(const ModelSpec& spec) {
  std::string s = spec.kind + "|" + shape_str(spec.input) + "|" +
                  std::to_string(spec.classes);
  for (const LayerDesc& l : spec.layers)
    s += msg("|", layer_kind_name(l.kind), ",", l.out, ",", l.kernel, ",",
             l.stride, ",", l.pad, ",", int(l.bias), ",", int(l.proj), ",",
             l.group);
  return fnv1a(s);
}

// ---------------------------------------------------------------------------
// Builders

// Hidden blocks are linear + batch-norm + ReLU (so no linear bias); the output
// layer is a plain linear with bias.
inline ModelSpec build_fc(Shape input, const std::vector<int>& hidden,
                          int classes = 10) {
  require(!hidden.empty(), "build_fc: no hidden layers");
  for (int h : hidden) require(h >= 1, "build_fc: hidden size must be >= 1");
  ModelSpec spec;
  spec.kind = "fc";
  spec.input = std::move(input);
  spec.classes = classes;
  spec.layers.push_back({LayerKind::Flatten});
  int g = 0;
  for (int h : hidden) {
    spec.layers.push_back(
        {LayerKind::Linear, h, 0, 1, 0, false, false, g});
    spec.layers.push_back({LayerKind::BatchNorm, 0, 0, 1, 0, false, false, g});
    spec.layers.push_back({LayerKind::ReLU});
    ++g;
  }
  spec.layers.push_back(
      {LayerKind::Linear, classes, 0, 1, 0, true, false, g});
  spec.num_groups = g + 1;
  validate(spec);
  return spec;
}

// Widths scale by `width_scale`, rounded to the nearest multiple of 4 with a
// floor of 8; the class head is never scaled.
inline int scale_width(int w, double width_scale) {
  require(width_scale > 0, "width scale must be positive");
  const int scaled = int(std::lround(w * width_scale / 4.0)) * 4;
  return std::max(8, scaled);
}

namespace detail {

inline void push_conv_block(ModelSpec& spec, int out, int kernel, int stride,
                            int& g) {
  spec.layers.push_back({LayerKind::Conv, out, kernel, stride,
                         kernel == 3 ? 1 : 0, false, false, g});
  spec.layers.push_back({LayerKind::BatchNorm, 0, 0, 1, 0, false, false, g});
  spec.layers.push_back({LayerKind::ReLU});
  ++g;
}

}  // namespace detail

// conv 96 - conv 96 - conv 192 s2 - conv 192 - conv 192 - conv 192 s2 -
// conv 192 - conv1 192 - conv1 classes - global average pool. Every conv,
// the 1x1 tail included, is a conv + BN + ReLU block.
inline ModelSpec build_allcnn(Shape input, double width_scale = 1.0,
                              int classes = 10) {
  const int w96 = scale_width(96, width_scale);
  const int w192 = scale_width(192, width_scale);
  ModelSpec spec;
  spec.kind = "allcnn";
  spec.input = std::move(input);
  spec.classes = classes;
  int g = 0;
  detail::push_conv_block(spec, w96, 3, 1, g);
  detail::push_conv_block(spec, w96, 3, 1, g);
  detail::push_conv_block(spec, w192, 3, 2, g);
  detail::push_conv_block(spec, w192, 3, 1, g);
  detail::push_conv_block(spec, w192, 3, 1, g);
  detail::push_conv_block(spec, w192, 3, 2, g);
  detail::push_conv_block(spec, w192, 3, 1, g);
  detail::push_conv_block(spec, w192, 1, 1, g);
  detail::push_conv_block(spec, classes, 1, 1, g);
  spec.layers.push_back({LayerKind::GlobalAvgPool});
  spec.num_groups = g;
  validate(spec);
  return spec;
}

// conv 96 - [conv 96*2^(i-1) - conv 96*2^i s2] for i in 1..n - conv 96*2^n -
// conv1 96*2^n - conv1 classes - global average pool.
inline ModelSpec build_vardepth(Shape input, int n, double width_scale = 1.0,
                                int classes = 10) {
  require(n >= 1, "build_vardepth: n must be >= 1");
  {
    int h = input[1];
    for (int i = 0; i < n; ++i) h = (h - 1) / 2 + 1;
    require(h >= 1 && (input[1] >> n) >= 1,
            msg("build_vardepth: n=", n, " too deep for ", input[1], "x",
                input[2], " input"));
  }
  ModelSpec spec;
  spec.kind = "vardepth";
  spec.input = std::move(input);
  spec.classes = classes;
  int g = 0;
  detail::push_conv_block(spec, scale_width(96, width_scale), 3, 1, g);
  for (int i = 1; i <= n; ++i) {
    detail::push_conv_block(spec, scale_width(96 << (i - 1), width_scale), 3,
                            1, g);
    detail::push_conv_block(spec, scale_width(96 << i, width_scale), 3, 2, g);
  }
  detail::push_conv_block(spec, scale_width(96 << n, width_scale), 3, 1, g);
  detail::push_conv_block(spec, scale_width(96 << n, width_scale), 1, 1, g);
  detail::push_conv_block(spec, classes, 1, 1, g);
  spec.layers.push_back({LayerKind::GlobalAvgPool});
  spec.num_groups = g;
  validate(spec);
  return spec;
}

// Desk-scale residual classifier: stem conv, four stages of two-conv blocks
// with identity or projected skips, global average pool, linear head. Stage
// widths are 64/128/256/512 scaled.
inline ModelSpec build_reslite(Shape input,
                               const std::vector<int>& blocks_per_stage,
                               double width_scale = 1.0, int classes = 10) {
  require(blocks_per_stage.size() >= 1 && blocks_per_stage.size() <= 4,
          "build_reslite: 1 to 4 stages");
  for (int b : blocks_per_stage)
    require(b >= 1, "build_reslite: each stage needs at least one block");
  ModelSpec spec;
  spec.kind = "reslite";
  spec.input = std::move(input);
  spec.classes = classes;
  int g = 0;
  const int base[4] = {64, 128, 256, 512};
  int width = scale_width(base[0], width_scale);
  detail::push_conv_block(spec, width, 3, 1, g);
  int in_ch = width;
  for (std::size_t s = 0; s < blocks_per_stage.size(); ++s) {
    const int out_ch = scale_width(base[s], width_scale);
    for (int b = 0; b < blocks_per_stage[s]; ++b) {
      const int stride = (b == 0 && s > 0) ? 2 : 1;
      const bool needs_proj = stride != 1 || in_ch != out_ch;
      spec.layers.push_back({LayerKind::SaveInput});
      spec.layers.push_back(
          {LayerKind::Conv, out_ch, 3, stride, 1, false, false, g});
      spec.layers.push_back(
          {LayerKind::BatchNorm, 0, 0, 1, 0, false, false, g});
      spec.layers.push_back({LayerKind::ReLU});
      ++g;
      spec.layers.push_back(
          {LayerKind::Conv, out_ch, 3, 1, 1, false, false, g});
      spec.layers.push_back(
          {LayerKind::BatchNorm, 0, 0, 1, 0, false, false, g});
      ++g;
      spec.layers.push_back({LayerKind::AddSaved, out_ch, 1, stride, 0, false,
                             needs_proj, needs_proj ? g : -1});
      if (needs_proj) ++g;
      spec.layers.push_back({LayerKind::ReLU});
      in_ch = out_ch;
    }
  }
  spec.layers.push_back({LayerKind::GlobalAvgPool});
  spec.layers.push_back(
      {LayerKind::Linear, classes, 0, 1, 0, true, false, g});
  ++g;
  spec.num_groups = g;
  validate(spec);
  return spec;
}

// ---------------------------------------------------------------------------
// Instantiated state

struct ParamInfo {
  TensorPtr tensor;
  std::string name;
  int group = -1;
  bool trainable = true;  // false for running stats and frozen tensors
  bool buffer = false;    // running stats; never touched by optimizers
};

struct ModelState {
  ModelSpec spec;
  std::uint64_t seed = 0;
  std::vector<ParamInfo> params;
  // For each layer desc, indices into params (meaning depends on kind).
  std::vector<std::vector<int>> layer_params;

  ModelState() = default;

  // Deep copy; sweep arms clone the initial state instead of re-initializing.
  ModelState(const ModelState& other)
      : spec(other.spec), seed(other.seed), layer_params(other.layer_params) {
    params.reserve(other.params.size());
    for (const ParamInfo& p : other.params) {
      ParamInfo q = p;
      q.tensor = std::make_shared<Tensor>(*p.tensor);
      params.push_back(std::move(q));
    }
  }
  ModelState& operator=(const ModelState& other) {
    if (this != &other) {
      ModelState tmp(other);
      *this = std::move(tmp);
    }
    return *this;
  }
  ModelState(ModelState&&) = default;
  ModelState& operator=(ModelState&&) = default;

  ParamInfo* find(const std::string& name) {
    for (ParamInfo& p : params)
      if (p.name == name) return &p;
    return nullptr;
  }
};

namespace detail {

inline int add_param(ModelState& st, Shape shape, const std::string& name,
                     int group, bool trainable, bool buffer) {
  ParamInfo p;
  p.tensor = make_tensor(std::move(shape));
  p.tensor->is_param = true;
  p.tensor->name = name;
  p.name = name;
  p.group = group;
  p.trainable = trainable;
  p.buffer = buffer;
  st.params.push_back(std::move(p));
  return int(st.params.size()) - 1;
}

inline void init_uniform_fanin(Tensor& t, int fan_in, Rng& rng) {
  const double bound = std::sqrt(1.0 / double(fan_in));
  for (double& v : t.values) v = rng.uniform(-bound, bound);
}

// gamma=1, beta=0, running mean/var = 0/1.
inline void add_bn_params(ModelState& st, int channels, const std::string& base,
                          int group, std::vector<int>& slot) {
  const int ig = add_param(st, {channels}, base + ".gamma", group, true, false);
  std::fill(st.params[std::size_t(ig)].tensor->values.begin(),
            st.params[std::size_t(ig)].tensor->values.end(), 1.0);
  slot.push_back(ig);
  slot.push_back(add_param(st, {channels}, base + ".beta", group, true, false));
  slot.push_back(
      add_param(st, {channels}, base + ".running_mean", group, false, true));
  const int iv =
      add_param(st, {channels}, base + ".running_var", group, false, true);
  std::fill(st.params[std::size_t(iv)].tensor->values.begin(),
            st.params[std::size_t(iv)].tensor->values.end(), 1.0);
  slot.push_back(iv);
}

}  // namespace detail

// Builds parameter tensors with fan-in-scaled uniform weights
// (bound = sqrt(1/fan_in)), zero biases, identity batch-norm. Each parameter
// tensor draws from its own substream of `seed`, so the values do not depend
// on how other tensors are sized.
inline ModelState init_model(const ModelSpec& spec, std::uint64_t seed) {
  validate(spec);
  ModelState st;
  st.spec = spec;
  st.seed = seed;

  detail::ShapeCursor cur{spec.input[0], spec.input[1], spec.input[2], false,
                          0};
  std::vector<detail::ShapeCursor> saved;
  int param_stream = 0;
  auto next_rng = [&]() {
    return Rng(derive_seed(seed, "init", std::uint64_t(param_stream++)));
  };

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerDesc& l = spec.layers[i];
    std::vector<int> slot;
    switch (l.kind) {
      case LayerKind::Conv: {
        const std::string base = msg("g", l.group, ".conv", i);
        const int iw = detail::add_param(
            st, {l.out, cur.c, l.kernel, l.kernel}, base + ".w", l.group, true,
            false);
        Rng rng = next_rng();
        detail::init_uniform_fanin(*st.params[std::size_t(iw)].tensor,
                                   cur.c * l.kernel * l.kernel, rng);
        slot.push_back(iw);
        if (l.bias)
          slot.push_back(detail::add_param(st, {l.out}, base + ".b", l.group,
                                           true, false));
        else
          slot.push_back(-1);
        cur.c = l.out;
        cur.h = (cur.h + 2 * l.pad - l.kernel) / l.stride + 1;
        cur.w = (cur.w + 2 * l.pad - l.kernel) / l.stride + 1;
        break;
      }
      case LayerKind::Linear: {
        const int in_feat = cur.feat;
        const std::string base = msg("g", l.group, ".linear", i);
        const int iw = detail::add_param(st, {l.out, in_feat}, base + ".w",
                                         l.group, true, false);
        Rng rng = next_rng();
        detail::init_uniform_fanin(*st.params[std::size_t(iw)].tensor, in_feat,
                                   rng);
        slot.push_back(iw);
        if (l.bias)
          slot.push_back(detail::add_param(st, {l.out}, base + ".b", l.group,
                                           true, false));
        else
          slot.push_back(-1);
        cur.feat = l.out;
        break;
      }
      case LayerKind::BatchNorm: {
        const int ch = cur.flat ? cur.feat : cur.c;
        detail::add_bn_params(st, ch, msg("g", l.group, ".bn", i), l.group,
                              slot);
        break;
      }
      case LayerKind::ReLU:
        break;
      case LayerKind::GlobalAvgPool:
        cur.flat = true;
        cur.feat = cur.c;
        break;
      case LayerKind::Flatten:
        cur.flat = true;
        cur.feat = cur.c * cur.h * cur.w;
        break;
      case LayerKind::SaveInput:
        saved.push_back(cur);
        break;
      case LayerKind::AddSaved: {
        detail::ShapeCursor s = saved.back();
        saved.pop_back();
        if (l.proj) {
          const std::string base = msg("g", l.group, ".proj", i);
          const int iw = detail::add_param(st, {l.out, s.c, 1, 1},
                                           base + ".w", l.group, true, false);
          Rng rng = next_rng();
          detail::init_uniform_fanin(*st.params[std::size_t(iw)].tensor, s.c,
                                     rng);
          slot.push_back(iw);
          detail::add_bn_params(st, l.out, base + ".bn", l.group, slot);
        }
        break;
      }
    }
    st.layer_params.push_back(std::move(slot));
  }
  return st;
}

// Forward to logits. `training` selects batch-norm behavior; running stats
// update in place in training mode, which is why the state is mutable here.
inline TensorPtr forward(ModelState& st, Tape* tape, const TensorPtr& x,
                         bool training) {
  require(x->ndim() == 4, msg("forward: input must be [N,C,H,W], got ",
                              shape_str(x->shape)));
  require(x->dim(1) == st.spec.input[0] && x->dim(2) == st.spec.input[1] &&
              x->dim(3) == st.spec.input[2],
          msg("forward: input ", shape_str(x->shape),
              " does not match model input ", shape_str(st.spec.input)));
  auto P = [&](int idx) { return st.params[std::size_t(idx)].tensor; };
  TensorPtr cur = x;
  std::vector<TensorPtr> saved;
  for (std::size_t i = 0; i < st.spec.layers.size(); ++i) {
    const LayerDesc& l = st.spec.layers[i];
    const std::vector<int>& slot = st.layer_params[i];
    switch (l.kind) {
      case LayerKind::Conv:
        cur = conv2d(tape, cur, P(slot[0]),
                     slot[1] >= 0 ? P(slot[1]) : nullptr, l.stride, l.pad);
        break;
      case LayerKind::Linear:
        cur = linear(tape, cur, P(slot[0]),
                     slot[1] >= 0 ? P(slot[1]) : nullptr);
        break;
      case LayerKind::BatchNorm:
        cur = batchnorm(tape, cur, P(slot[0]), P(slot[1]), P(slot[2]),
                        P(slot[3]), training);
        break;
      case LayerKind::ReLU:
        cur = relu(tape, cur);
        break;
      case LayerKind::GlobalAvgPool:
        cur = global_avg_pool(tape, cur);
        break;
      case LayerKind::Flatten:
        cur = flatten(tape, cur);
        break;
      case LayerKind::SaveInput:
        saved.push_back(cur);
        break;
      case LayerKind::AddSaved: {
        TensorPtr skip = saved.back();
        saved.pop_back();
        if (l.proj) {
          skip = conv2d(tape, skip, P(slot[0]), nullptr, l.stride, 0);
          skip = batchnorm(tape, skip, P(slot[1]), P(slot[2]), P(slot[3]),
                           P(slot[4]), training);
        }
        cur = add(tape, cur, skip);
        break;
      }
    }
  }
  return cur;
}

// ---------------------------------------------------------------------------
// Parameter views

inline std::vector<TensorPtr> trainable_tensors(ModelState& st) {
  std::vector<TensorPtr> out;
  for (ParamInfo& p : st.params)
    if (p.trainable && !p.buffer) out.push_back(p.tensor);
  return out;
}

inline std::int64_t trainable_count(const ModelState& st) {
  std::int64_t n = 0;
  for (const ParamInfo& p : st.params)
    if (p.trainable && !p.buffer) n += p.tensor->size();
  return n;
}

inline std::int64_t param_count(const ModelState& st) {
  std::int64_t n = 0;
  for (const ParamInfo& p : st.params)
    if (!p.buffer) n += p.tensor->size();
  return n;
}

inline std::vector<double> flatten_trainable_values(const ModelState& st) {
  std::vector<double> out;
  out.reserve(std::size_t(trainable_count(st)));
  for (const ParamInfo& p : st.params)
    if (p.trainable && !p.buffer)
      out.insert(out.end(), p.tensor->values.begin(), p.tensor->values.end());
  return out;
}

inline std::vector<double> flatten_trainable_grads(const ModelState& st) {
  std::vector<double> out;
  out.reserve(std::size_t(trainable_count(st)));
  for (const ParamInfo& p : st.params) {
    if (!p.trainable || p.buffer) continue;
    if (p.tensor->has_grad())
      out.insert(out.end(), p.tensor->grad.begin(), p.tensor->grad.end());
    else
      out.insert(out.end(), std::size_t(p.tensor->size()), 0.0);
  }
  return out;
}

inline void scatter_trainable_values(ModelState& st,
                                     const std::vector<double>& flat) {
  require(std::int64_t(flat.size()) == trainable_count(st),
          msg("scatter: ", flat.size(), " values for ", trainable_count(st),
              " trainable parameters"));
  std::size_t off = 0;
  for (ParamInfo& p : st.params) {
    if (!p.trainable || p.buffer) continue;
    std::copy(flat.begin() + std::ptrdiff_t(off),
              flat.begin() + std::ptrdiff_t(off + p.tensor->values.size()),
              p.tensor->values.begin());
    off += p.tensor->values.size();
  }
}

inline void zero_grads(ModelState& st) {
  for (ParamInfo& p : st.params) p.tensor->zero_grad();
}

// group id -> indices into st.params (buffers excluded)
inline std::map<int, std::vector<int>> group_params(const ModelState& st) {
  std::map<int, std::vector<int>> out;
  for (std::size_t i = 0; i < st.params.size(); ++i) {
    const ParamInfo& p = st.params[i];
    if (p.buffer || p.group < 0) continue;
    out[p.group].push_back(int(i));
  }
  return out;
}

// Freeze or unfreeze a single named tensor; unknown names are an error.
inline void set_trainable(ModelState& st, const std::string& name,
                          bool trainable) {
  ParamInfo* p = st.find(name);
  require(p != nullptr, msg("set_trainable: no parameter named '", name, "'"));
  require(!p->buffer, msg("set_trainable: '", name, "' is a running buffer"));
  p->trainable = trainable;
}

}  // namespace plab
