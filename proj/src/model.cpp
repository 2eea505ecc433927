#include "pil/model.hpp"

#include <cmath>
#include <cstring>
#include <iomanip>
#include <sstream>

#include "pil/errors.hpp"
#include "pil/ops.hpp"
#include "pil/rng.hpp"

namespace pil {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

bool counts_toward_tap(const Layer& layer) {
  return std::holds_alternative<ConvLayer>(layer) || std::holds_alternative<PoolLayer>(layer);
}

std::string layer_label(const NetworkSpec& spec, std::size_t i) {
  return "layer " + std::to_string(i) + " (" + layer_kind(spec.layers[i]) + ")";
}

}  // namespace

std::string layer_kind(const Layer& layer) {
  return std::visit(overloaded{
                        [](const ConvLayer&) { return std::string("conv"); },
                        [](const PoolLayer&) { return std::string("pool"); },
                        [](const ReluLayer&) { return std::string("relu"); },
                        [](const FlattenLayer&) { return std::string("flatten"); },
                        [](const FcLayer&) { return std::string("fc"); },
                    },
                    layer);
}

nlohmann::json spec_to_json(const NetworkSpec& spec) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& layer : spec.layers) {
    nlohmann::json j = {{"type", layer_kind(layer)}};
    std::visit(overloaded{
                   [&](const ConvLayer& c) {
                     j["out_channels"] = c.out_channels;
                     j["kernel"] = c.kernel;
                     j["stride"] = c.stride;
                     j["pad"] = c.pad;
                   },
                   [&](const PoolLayer& p) {
                     j["k"] = p.k;
                     j["stride"] = p.stride;
                   },
                   [](const ReluLayer&) {},
                   [](const FlattenLayer&) {},
                   [&](const FcLayer& f) { j["out_dim"] = f.out_dim; },
               },
               layer);
    layers.push_back(std::move(j));
  }
  return {{"layers", layers},
          {"input_shape", spec.input_shape},
          {"tap_layer_index", spec.tap_layer_index},
          {"output_dim", spec.output_dim}};
}

NetworkSpec spec_from_json(const nlohmann::json& j) {
  NetworkSpec spec;
  try {
    for (const auto& l : j.at("layers")) {
      const auto type = l.at("type").get<std::string>();
      if (type == "conv") {
        spec.layers.emplace_back(ConvLayer{l.at("out_channels").get<std::size_t>(), l.at("kernel").get<std::size_t>(),
                                           l.at("stride").get<std::size_t>(), l.at("pad").get<std::size_t>()});
      } else if (type == "pool") {
        spec.layers.emplace_back(PoolLayer{l.at("k").get<std::size_t>(), l.at("stride").get<std::size_t>()});
      } else if (type == "relu") {
        spec.layers.emplace_back(ReluLayer{});
      } else if (type == "flatten") {
        spec.layers.emplace_back(FlattenLayer{});
      } else if (type == "fc") {
        spec.layers.emplace_back(FcLayer{l.at("out_dim").get<std::size_t>()});
      } else {
        throw BuildError("unknown layer type '" + type + "'");
      }
    }
    spec.input_shape = j.at("input_shape").get<Shape>();
    spec.tap_layer_index = j.at("tap_layer_index").get<std::size_t>();
    spec.output_dim = j.at("output_dim").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw BuildError(std::string("malformed network spec: ") + e.what());
  }
  return spec;
}

ShapeTrace infer_shapes(const NetworkSpec& spec) {
  if (spec.input_shape.size() != 3 || shape_numel(spec.input_shape) == 0) {
    throw BuildError("input_shape must be [C,H,W] with positive extents, got " + shape_string(spec.input_shape));
  }
  if (spec.output_dim == 0) throw BuildError("output_dim must be positive");
  if (spec.tap_layer_index == 0) throw BuildError("tap_layer_index is 1-based; 0 addresses no layer");

  ShapeTrace trace;
  Shape cur = spec.input_shape;
  std::size_t ordinal = 0;
  std::optional<std::size_t> tap_at;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Layer& layer = spec.layers[i];
    auto fail = [&](const std::string& why) {
      return BuildError(layer_label(spec, i) + ": " + why + " (input " + shape_string(cur) + ")");
    };
    std::visit(overloaded{
                   [&](const ConvLayer& c) {
                     if (cur.size() != 3) throw fail("conv needs a spatial input");
                     if (c.out_channels == 0 || c.kernel == 0 || c.stride == 0) {
                       throw fail("conv needs positive out_channels, kernel and stride");
                     }
                     if (c.kernel > cur[1] + 2 * c.pad || c.kernel > cur[2] + 2 * c.pad) {
                       throw fail("kernel larger than padded input");
                     }
                     cur = {c.out_channels, (cur[1] + 2 * c.pad - c.kernel) / c.stride + 1,
                            (cur[2] + 2 * c.pad - c.kernel) / c.stride + 1};
                   },
                   [&](const PoolLayer& p) {
                     if (cur.size() != 3) throw fail("pool needs a spatial input");
                     if (p.k == 0 || p.stride == 0) throw fail("pool needs positive k and stride");
                     if (p.k > cur[1] || p.k > cur[2]) throw fail("pool window larger than input");
                     cur = {cur[0], (cur[1] - p.k) / p.stride + 1, (cur[2] - p.k) / p.stride + 1};
                   },
                   [&](const ReluLayer&) {},
                   [&](const FlattenLayer&) {
                     if (cur.size() != 3) throw fail("flatten needs a spatial input");
                     cur = {shape_numel(cur)};
                   },
                   [&](const FcLayer& f) {
                     if (cur.size() != 1) throw fail("fc needs a flattened input");
                     if (f.out_dim == 0) throw fail("fc needs a positive out_dim");
                     cur = {f.out_dim};
                   },
               },
               layer);
    trace.layer_outputs.push_back(cur);
    if (counts_toward_tap(layer)) {
      ++ordinal;
      if (ordinal == spec.tap_layer_index) {
        tap_at = i;
        if (i + 1 < spec.layers.size() && std::holds_alternative<ReluLayer>(spec.layers[i + 1])) tap_at = i + 1;
      }
    }
  }
  if (!tap_at) {
    throw BuildError("tap_layer_index " + std::to_string(spec.tap_layer_index) + " exceeds the " +
                     std::to_string(ordinal) + " conv/pool layers");
  }
  if (cur.size() != 1 || cur[0] != spec.output_dim) {
    throw BuildError("network output " + shape_string(cur) + " does not match output_dim " +
                     std::to_string(spec.output_dim));
  }
  trace.tap_position = *tap_at;
  trace.tap_shape = trace.layer_outputs[*tap_at];
  trace.output_shape = cur;
  return trace;
}

namespace {

NetworkSpec make_profile(Shape input, const std::vector<std::size_t>& channels,
                         const std::vector<std::size_t>& pool_after, std::size_t hidden, std::size_t tap,
                         std::size_t output_dim) {
  NetworkSpec spec;
  spec.input_shape = std::move(input);
  for (std::size_t i = 0; i < channels.size(); ++i) {
    spec.layers.emplace_back(ConvLayer{channels[i], 3, 1, 1});
    spec.layers.emplace_back(ReluLayer{});
    if (std::find(pool_after.begin(), pool_after.end(), i + 1) != pool_after.end()) {
      spec.layers.emplace_back(PoolLayer{2, 2});
    }
  }
  spec.layers.emplace_back(FlattenLayer{});
  spec.layers.emplace_back(FcLayer{hidden});
  spec.layers.emplace_back(ReluLayer{});
  spec.layers.emplace_back(FcLayer{output_dim});
  spec.tap_layer_index = tap;
  spec.output_dim = output_dim;
  return spec;
}

}  // namespace

std::map<std::string, NetworkSpec> predefined_profiles() {
  constexpr std::size_t kPoseDim = 63;  // 21 joints x 3
  std::map<std::string, NetworkSpec> profiles;
  // 14 conv + 4 pool; the 18th conv/pool layer is the last conv.
  profiles["paper"] = make_profile({3, 256, 256}, {64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512, 512},
                                   {2, 4, 8, 12}, 512, 18, kPoseDim);
  // 6 conv + 2 pool; tap at the last conv (8th conv/pool layer).
  profiles["desk"] = make_profile({3, 32, 32}, {16, 16, 32, 32, 64, 64}, {1, 2}, 128, 8, kPoseDim);
  return profiles;
}

NetworkSpec profile(const std::string& name) {
  auto profiles = predefined_profiles();
  auto it = profiles.find(name);
  if (it == profiles.end()) throw LookupError("unknown network profile '" + name + "'");
  return it->second;
}

NetworkSpec with_input_channels(NetworkSpec spec, std::size_t channels) {
  if (spec.input_shape.empty()) throw BuildError("spec has no input shape");
  spec.input_shape[0] = channels;
  return spec;
}

NetworkSpec teacher_spec(const std::string& profile_name) { return with_input_channels(profile(profile_name), 1); }

NetworkSpec student_spec(const std::string& profile_name) { return with_input_channels(profile(profile_name), 3); }

Network Network::build(const NetworkSpec& spec, std::uint64_t seed) {
  Network net(spec, infer_shapes(spec));
  Shape cur = spec.input_shape;
  std::size_t conv_id = 0, fc_id = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Layer& layer = spec.layers[i];
    if (const auto* c = std::get_if<ConvLayer>(&layer)) {
      const std::size_t fan_in = cur[0] * c->kernel * c->kernel;
      const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
      Tensor w({c->out_channels, cur[0], c->kernel, c->kernel});
      const std::string prefix = "conv" + std::to_string(++conv_id);
      // One stream per layer: layers of equal shape get equal weights across
      // networks built from one seed, whatever the input channel count.
      Rng rng(derive_seed(seed, prefix));
      for (double& v : w.data()) v = stddev * rng.normal();
      net.params_.push_back({prefix + ".weight", std::move(w)});
      net.params_.push_back({prefix + ".bias", Tensor({c->out_channels}, 0.0)});
    } else if (const auto* f = std::get_if<FcLayer>(&layer)) {
      const std::size_t fan_in = cur[0];
      const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
      Tensor w({fan_in, f->out_dim});
      const std::string prefix = "fc" + std::to_string(++fc_id);
      Rng rng(derive_seed(seed, prefix));
      for (double& v : w.data()) v = stddev * rng.normal();
      net.params_.push_back({prefix + ".weight", std::move(w)});
      net.params_.push_back({prefix + ".bias", Tensor({f->out_dim}, 0.0)});
    }
    cur = net.trace_.layer_outputs[i];
  }
  for (auto& p : net.params_) p.value.set_requires_grad(true);
  return net;
}

Network Network::from_parameters(const NetworkSpec& spec, std::vector<Parameter> params) {
  Network reference = build(spec, 0);
  if (params.size() != reference.params_.size()) {
    throw BuildError("expected " + std::to_string(reference.params_.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& want = reference.params_[i];
    if (params[i].name != want.name || params[i].value.shape() != want.value.shape()) {
      throw BuildError("parameter " + std::to_string(i) + " is '" + params[i].name + "' " +
                       shape_string(params[i].value.shape()) + ", expected '" + want.name + "' " +
                       shape_string(want.value.shape()));
    }
    params[i].value.set_requires_grad(true);
    params[i].value.clear_grad();
  }
  reference.params_ = std::move(params);
  return reference;
}

template <typename Self>
ForwardResult Network::run(Self& self, Graph& graph, const Tensor& batch) {
  const NetworkSpec& spec = self.spec_;
  const Shape& bs = batch.shape();
  if (bs.size() != 4 || bs[1] != spec.input_shape[0] || bs[2] != spec.input_shape[1] ||
      bs[3] != spec.input_shape[2]) {
    throw ShapeError("network expects [N," + std::to_string(spec.input_shape[0]) + "," +
                     std::to_string(spec.input_shape[1]) + "," + std::to_string(spec.input_shape[2]) +
                     "] input, got " + shape_string(bs));
  }
  Var x = graph.constant(batch);
  ForwardResult result;
  std::size_t param = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Layer& layer = spec.layers[i];
    if (const auto* c = std::get_if<ConvLayer>(&layer)) {
      Var w = graph.parameter(self.params_[param].value);
      Var b = graph.parameter(self.params_[param + 1].value);
      param += 2;
      x = conv2d(x, w, b, c->stride, c->pad);
    } else if (const auto* p = std::get_if<PoolLayer>(&layer)) {
      x = maxpool2d(x, p->k, p->stride);
    } else if (std::holds_alternative<ReluLayer>(layer)) {
      x = relu(x);
    } else if (std::holds_alternative<FlattenLayer>(layer)) {
      x = flatten(x);
    } else if (std::holds_alternative<FcLayer>(layer)) {
      Var w = graph.parameter(self.params_[param].value);
      Var b = graph.parameter(self.params_[param + 1].value);
      param += 2;
      x = fully_connected(x, w, b);
    }
    if (i == self.trace_.tap_position) result.tap = {spec.tap_layer_index, x};
  }
  result.pose = x;
  return result;
}

ForwardResult Network::forward(Graph& graph, const Tensor& batch) { return run(*this, graph, batch); }

ForwardResult Network::forward(Graph& graph, const Tensor& batch) const { return run(*this, graph, batch); }

void Network::freeze() {
  for (auto& p : params_) {
    p.value.set_requires_grad(false);
    p.value.clear_grad();
  }
  if (!frozen_) frozen_digest_ = digest();
  frozen_ = true;
}

std::uint64_t Network::digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const void* bytes, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& p : params_) {
    feed(p.name.data(), p.name.size());
    for (std::uint64_t d : p.value.shape()) feed(&d, sizeof d);
    feed(p.value.data().data(), p.value.numel() * sizeof(double));
  }
  return h;
}

std::vector<NamedTensor> Network::trainable() {
  std::vector<NamedTensor> out;
  for (auto& p : params_) {
    if (p.value.requires_grad()) out.push_back({p.name, &p.value});
  }
  return out;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

std::string digest_hex(std::uint64_t digest) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << digest;
  return os.str();
}

}  // namespace pil
