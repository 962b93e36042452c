// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <fstream>
#include <variant>

#include "sgr/etf.hpp"

namespace sgr {

enum class Activation : std::uint8_t { Relu = 0, Identity = 1 };

struct Layer {
  Tensor weight;  // d_out×d_in
  Tensor bias;    // d_out
  Activation activation = Activation::Relu;

  std::size_t in_width() const { return weight.cols(); }
  std::size_t out_width() const { return weight.rows(); }
};

struct Block {
  std::vector<Layer> layers;

  std::size_t in_width() const { return layers.front().in_width(); }
  std::size_t out_width() const { return layers.back().out_width(); }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Layer& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }
};

// Learnable auxiliary classifier: linear+relu, then linear.
struct MlpHead {
  Layer hidden;
  Layer classifier;
};

using AuxHead = std::variant<EtfClassifier, MlpHead>;

struct LocalModule {
  Block block;
  AuxHead head;
  std::optional<Tensor> delta_out;
};

struct Network {
  std::vector<LocalModule> modules;
  std::size_t classes = 0;

  std::size_t in_width() const { return modules.front().block.in_width(); }
};

inline Layer init_layer(std::size_t d_in, std::size_t d_out, Activation act, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(d_in));
  return {rand_uniform(Shape{d_out, d_in}, rng, -a, a), Tensor(Shape{d_out}), act};
}

// Block of relu layers with widths [d_in, h_1, ..., d_out].
inline Block init_params(const std::vector<std::size_t>& widths, std::uint64_t seed) {
  if (widths.size() < 2) throw std::invalid_argument("init_params needs at least one layer");
  auto rng = make_rng(seed, 0xB10C);
  Block b;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i)
    b.layers.push_back(init_layer(widths[i], widths[i + 1], Activation::Relu, rng));
  return b;
}

inline std::vector<Tensor*> parameters(LocalModule& m) {
  std::vector<Tensor*> ps;
  for (Layer& l : m.block.layers) {
    ps.push_back(&l.weight);
    ps.push_back(&l.bias);
  }
  if (auto* h = std::get_if<MlpHead>(&m.head)) {
    ps.push_back(&h->hidden.weight);
    ps.push_back(&h->hidden.bias);
    ps.push_back(&h->classifier.weight);
    ps.push_back(&h->classifier.bias);
  }
  return ps;
}

inline std::vector<const Tensor*> parameters(const LocalModule& m) {
  std::vector<const Tensor*> out;
  for (Tensor* p : parameters(const_cast<LocalModule&>(m))) out.push_back(p);
  return out;
}

inline Var apply_layer(Var x, Var w, Var b, Activation act) {
  Var y = bias_add(matmul(x, w, false, true), b);
  return act == Activation::Relu ? relu(y) : y;
}

inline Tensor apply_layer(const Tensor& x, const Layer& l) {
  Tensor y = bias_add(matmul(x, l.weight, false, true), l.bias);
  return l.activation == Activation::Relu ? relu(y) : y;
}

// A module recorded on a tape. `params` follows parameters(module) order.
struct ModuleGraph {
  std::vector<Var> params;
  Var output;
  Var logits;
};

inline Var record_block(Tape& tape, const Block& block, Var input, bool trainable, std::vector<Var>& params) {
  Var h = input;
  for (const Layer& l : block.layers) {
    Var w = tape.leaf(l.weight, trainable);
    Var b = tape.leaf(l.bias, trainable);
    params.push_back(w);
    params.push_back(b);
    h = apply_layer(h, w, b, l.activation);
  }
  return h;
}

inline Var record_head(Tape& tape, const AuxHead& head, Var features, bool trainable, std::vector<Var>& params) {
  if (const auto* etf = std::get_if<EtfClassifier>(&head)) return etf_logits(features, *etf);
  const auto& mlp = std::get<MlpHead>(head);
  const std::size_t first = params.size();
  for (const Layer* l : {&mlp.hidden, &mlp.classifier}) {
    params.push_back(tape.leaf(l->weight, trainable));
    params.push_back(tape.leaf(l->bias, trainable));
  }
  Var z = apply_layer(features, params[first], params[first + 1], mlp.hidden.activation);
  return apply_layer(z, params[first + 2], params[first + 3], mlp.classifier.activation);
}

inline ModuleGraph record_module(Tape& tape, const LocalModule& m, Var input, bool trainable) {
  ModuleGraph g;
  g.output = record_block(tape, m.block, input, trainable, g.params);
  g.logits = record_head(tape, m.head, g.output, trainable, g.params);
  return g;
}

inline void check_width(const Tensor& input, std::size_t width, const char* what) {
  require_matrix(input, what);
  if (input.cols() != width)
    throw DimensionError(std::string(what) + ": input width " + std::to_string(input.cols()) + ", module expects " +
                         std::to_string(width));
}

inline Tensor forward_module(const LocalModule& m, const Tensor& input) {
  check_width(input, m.block.in_width(), "forward_module");
  Tensor h = input;
  for (const Layer& l : m.block.layers) h = apply_layer(h, l);
  return h;
}

inline Tensor head_logits(const AuxHead& head, const Tensor& features) {
  if (const auto* etf = std::get_if<EtfClassifier>(&head)) return matmul(features, etf->M, false, true);
  const auto& mlp = std::get<MlpHead>(head);
  return apply_layer(apply_layer(features, mlp.hidden), mlp.classifier);
}

enum class SgrUse : std::uint8_t { Off, Measure, Optimize };

struct StepOptions {
  SgrUse sgr = SgrUse::Optimize;
  double lambda = 1.0;
  bool normalize = true;
  double eps = 1e-12;
};

struct LossRecord {
  double local = 0.0;
  double sgr = 0.0;
  double total = 0.0;
  bool has_sgr = false;
};

struct StepResult {
  std::vector<Tensor> grads;  // parameters(module) order
  Tensor output;              // pre-update forward value
  Tensor delta_out;           // ∂L_k/∂output at pre-update parameters
  Tensor logits;
  LossRecord loss;
};

// One local step: L_k = CE(head(block(input))), plus λ·mse(n(∂L_k/∂input), n(delta_pre))
// when optimizing the reconciliation term. Gradients include the second-order
// path through ∂L_k/∂input. The module itself is not modified.
inline StepResult module_local_step(const LocalModule& m, const Tensor& input, std::span<const std::size_t> labels,
                                    const std::optional<Tensor>& delta_pre, const StepOptions& opt) {
  check_width(input, m.block.in_width(), "module_local_step");
  if (opt.lambda < 0.0) throw std::invalid_argument("module_local_step: lambda must be >= 0");
  const bool use_sgr = opt.sgr != SgrUse::Off;
  if (use_sgr) {
    if (!delta_pre) throw std::invalid_argument("module_local_step: delta_pre is required for modules after the first");
    require_same_shape(*delta_pre, input, "module_local_step delta_pre");
  }

  Tape tape;
  Var x = tape.leaf(input, use_sgr);
  ModuleGraph g = record_module(tape, m, x, true);
  Var local = softmax_cross_entropy(g.logits, labels);

  StepResult r;
  r.output = g.output.value();
  r.logits = g.logits.value();
  r.delta_out = tape.grad(local, {g.output})[0];
  r.loss.local = local.value().item();

  Var total = local;
  if (use_sgr) {
    Var now = tape.grad_graph(local, {x})[0];
    Var pre = tape.constant(*delta_pre);
    if (opt.normalize) {
      now = l2_normalize_rows(now, opt.eps);
      pre = l2_normalize_rows(pre, opt.eps);
    }
    Var s = mse(now, pre);
    r.loss.sgr = s.value().item();
    r.loss.has_sgr = true;
    if (opt.sgr == SgrUse::Optimize) total = add(local, scale(s, opt.lambda));
  }
  r.loss.total = total.value().item();
  r.grads = tape.grad(total, g.params);
  return r;
}

enum class HeadMode : std::uint8_t { BpFree, LocalBp };

struct HeadSpec {
  HeadMode mode = HeadMode::BpFree;
  std::size_t classes = 10;
  std::size_t hidden = 64;  // local-BP head width
};

// Splits the layers of `widths` = [d_0, ..., d_L] into K contiguous modules
// (earlier modules take the remainder) and attaches one auxiliary head each.
inline Network build_network(const std::vector<std::size_t>& widths, std::size_t K, const HeadSpec& head,
                             std::uint64_t seed) {
  if (K < 1) throw std::invalid_argument("build_network needs K >= 1");
  if (widths.size() < 2) throw std::invalid_argument("build_network needs at least one layer");
  for (std::size_t w : widths)
    if (w == 0) throw std::invalid_argument("build_network: widths must be positive");
  const std::size_t L = widths.size() - 1;
  if (K > L) throw std::invalid_argument("build_network: more modules than layers");
  if (head.mode == HeadMode::BpFree && L != K)
    throw std::invalid_argument("build_network: BP-free mode needs exactly one layer per module");
  if (head.classes < 2) throw std::invalid_argument("build_network: need at least two classes");

  Network net;
  net.classes = head.classes;
  std::size_t layer = 0;
  for (std::size_t k = 0; k < K; ++k) {
    const std::size_t count = L / K + (k < L % K ? 1 : 0);
    std::vector<std::size_t> w(widths.begin() + static_cast<std::ptrdiff_t>(layer),
                               widths.begin() + static_cast<std::ptrdiff_t>(layer + count + 1));
    layer += count;
    LocalModule m;
    m.block = init_params(w, seed * 1000003ULL + k);
    const std::size_t d = m.block.out_width();
    if (head.mode == HeadMode::BpFree) {
      if (d < head.classes)
        throw std::invalid_argument("build_network: ETF head needs module width >= class count");
      m.head = make_etf(head.classes, d, seed * 1000003ULL + 500 + k);
    } else {
      auto rng = make_rng(seed * 1000003ULL + 700 + k, 0x4EAD);
      MlpHead h{init_layer(d, head.hidden, Activation::Relu, rng),
                init_layer(head.hidden, head.classes, Activation::Identity, rng)};
      m.head = std::move(h);
    }
    net.modules.push_back(std::move(m));
  }
  return net;
}

inline std::size_t parameter_count(const Network& net) {
  std::size_t n = 0;
  for (const LocalModule& m : net.modules) n += m.block.parameter_count();
  return n;
}

// Backbone features after every module.
inline Tensor forward_features(const Network& net, const Tensor& x) {
  Tensor h = x;
  for (const LocalModule& m : net.modules) h = forward_module(m, h);
  return h;
}

// Inference logits: backbone plus the last module's head.
inline Tensor network_logits(const Network& net, const Tensor& x) {
  return head_logits(net.modules.back().head, forward_features(net, x));
}

// ---------------------------------------------------------------------------
// Checkpoints: "SGR1", u32 module count, then per module a dims header,
// parameters as little-endian f64 in parameters() order, and the head payload.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f64s(std::ostream& os, const Tensor& t) {
  for (double v : t.values()) {
    const auto u = std::bit_cast<std::uint64_t>(v);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
  }
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("checkpoint truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline Tensor get_f64s(std::istream& is, Shape shape) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("checkpoint truncated");
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    v = std::bit_cast<double>(u);
  }
  return t;
}

inline void put_layer_dims(std::ostream& os, const Layer& l) {
  put_u32(os, static_cast<std::uint32_t>(l.out_width()));
  put_u32(os, static_cast<std::uint32_t>(l.in_width()));
  put_u32(os, static_cast<std::uint32_t>(l.activation));
}

inline Layer get_layer_dims(std::istream& is) {
  const std::uint32_t out = get_u32(is), in = get_u32(is), act = get_u32(is);
  if (out == 0 || in == 0 || act > 1) throw std::runtime_error("checkpoint: bad layer header");
  return {Tensor(Shape{out, in}), Tensor(Shape{out}), static_cast<Activation>(act)};
}

}  // namespace detail

inline void save_checkpoint(const Network& net, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  os.write("SGR1", 4);
  detail::put_u32(os, static_cast<std::uint32_t>(net.modules.size()));
  detail::put_u32(os, static_cast<std::uint32_t>(net.classes));
  for (const LocalModule& m : net.modules) {
    detail::put_u32(os, static_cast<std::uint32_t>(m.block.layers.size()));
    for (const Layer& l : m.block.layers) detail::put_layer_dims(os, l);
    for (const Layer& l : m.block.layers) {
      detail::put_f64s(os, l.weight);
      detail::put_f64s(os, l.bias);
    }
    if (const auto* etf = std::get_if<EtfClassifier>(&m.head)) {
      detail::put_u32(os, 0);
      detail::put_u32(os, static_cast<std::uint32_t>(etf->classes()));
      detail::put_u32(os, static_cast<std::uint32_t>(etf->dim()));
      detail::put_f64s(os, etf->M);
    } else {
      const auto& h = std::get<MlpHead>(m.head);
      detail::put_u32(os, 1);
      detail::put_layer_dims(os, h.hidden);
      detail::put_layer_dims(os, h.classifier);
      for (const Layer* l : {&h.hidden, &h.classifier}) {
        detail::put_f64s(os, l->weight);
        detail::put_f64s(os, l->bias);
      }
    }
  }
  if (!os) throw std::runtime_error("error writing checkpoint: " + path);
}

inline Network load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "SGR1") throw std::runtime_error("checkpoint: bad magic");
  Network net;
  const std::uint32_t K = detail::get_u32(is);
  net.classes = detail::get_u32(is);
  for (std::uint32_t k = 0; k < K; ++k) {
    LocalModule m;
    const std::uint32_t nl = detail::get_u32(is);
    for (std::uint32_t i = 0; i < nl; ++i) m.block.layers.push_back(detail::get_layer_dims(is));
    for (Layer& l : m.block.layers) {
      l.weight = detail::get_f64s(is, l.weight.shape());
      l.bias = detail::get_f64s(is, l.bias.shape());
    }
    const std::uint32_t kind = detail::get_u32(is);
    if (kind == 0) {
      const std::uint32_t c = detail::get_u32(is), d = detail::get_u32(is);
      m.head = EtfClassifier{detail::get_f64s(is, Shape{c, d})};
    } else if (kind == 1) {
      MlpHead h{detail::get_layer_dims(is), detail::get_layer_dims(is)};
      for (Layer* l : {&h.hidden, &h.classifier}) {
        l->weight = detail::get_f64s(is, l->weight.shape());
        l->bias = detail::get_f64s(is, l->bias.shape());
      }
      m.head = std::move(h);
    } else {
      throw std::runtime_error("checkpoint: unknown head kind");
    }
    net.modules.push_back(std::move(m));
  }
  return net;
}

}  // namespace sgr
