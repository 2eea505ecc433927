#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "pil/graph.hpp"
#include "pil/optim.hpp"
#include "pil/tensor.hpp"

namespace pil {

struct ConvLayer {
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;
  friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

struct PoolLayer {
  std::size_t k = 2;
  std::size_t stride = 2;
  friend bool operator==(const PoolLayer&, const PoolLayer&) = default;
};

struct ReluLayer {
  friend bool operator==(const ReluLayer&, const ReluLayer&) = default;
};

struct FlattenLayer {
  friend bool operator==(const FlattenLayer&, const FlattenLayer&) = default;
};

struct FcLayer {
  std::size_t out_dim = 0;
  friend bool operator==(const FcLayer&, const FcLayer&) = default;
};

using Layer = std::variant<ConvLayer, PoolLayer, ReluLayer, FlattenLayer, FcLayer>;

std::string layer_kind(const Layer& layer);

/// Declarative network description.
///
/// `tap_layer_index` is the 1-based ordinal of the tapped layer when counting
/// only conv and pool layers in order. The tap captures that layer's output
/// after the ReLU that immediately follows it, if any.
struct NetworkSpec {
  std::vector<Layer> layers;
  Shape input_shape;  // [C,H,W]
  std::size_t tap_layer_index = 0;
  std::size_t output_dim = 0;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

nlohmann::json spec_to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const nlohmann::json& j);

/// Result of symbolic shape propagation (batch axis omitted).
struct ShapeTrace {
  std::vector<Shape> layer_outputs;
  /// Position in `layers` whose output the tap captures.
  std::size_t tap_position = 0;
  Shape tap_shape;
  Shape output_shape;
};

/// Propagates shapes through the layer list; throws BuildError naming the
/// first inconsistent layer.
ShapeTrace infer_shapes(const NetworkSpec& spec);

/// Network profiles keyed by name, in their student (3-channel) form.
std::map<std::string, NetworkSpec> predefined_profiles();
/// Throws LookupError for an unknown profile.
NetworkSpec profile(const std::string& name);
NetworkSpec with_input_channels(NetworkSpec spec, std::size_t channels);
/// Privileged-modality branch: 1 input channel.
NetworkSpec teacher_spec(const std::string& profile_name);
/// Hard-modality branch: 3 input channels.
NetworkSpec student_spec(const std::string& profile_name);

struct ActivationTap {
  std::size_t layer_index = 0;
  Var value;
};

struct ForwardResult {
  Var pose;
  ActivationTap tap;
};

struct Parameter {
  std::string name;
  Tensor value;
};

class Network {
 public:
  /// He-style fan-in initialization for weights, zero biases; deterministic in `seed`.
  static Network build(const NetworkSpec& spec, std::uint64_t seed);
  /// Rebuilds a network from explicit parameters, validating names and shapes.
  static Network from_parameters(const NetworkSpec& spec, std::vector<Parameter> params);

  const NetworkSpec& spec() const { return spec_; }
  const ShapeTrace& shapes() const { return trace_; }

  /// Records the forward pass of `batch` [N,C,H,W] into `graph`. Trainable
  /// parameters become gradient leaves.
  ForwardResult forward(Graph& graph, const Tensor& batch);
  /// Same pass with every parameter held constant.
  ForwardResult forward(Graph& graph, const Tensor& batch) const;

  /// Disables gradients on all parameters and records their digest. Idempotent.
  void freeze();
  bool frozen() const { return frozen_; }
  /// Digest recorded at the first freeze().
  std::optional<std::uint64_t> frozen_digest() const { return frozen_digest_; }

  /// FNV-1a digest of parameter names, shapes and raw bytes.
  std::uint64_t digest() const;

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::vector<NamedTensor> trainable();
  std::size_t parameter_count() const;

 private:
  Network(NetworkSpec spec, ShapeTrace trace) : spec_(std::move(spec)), trace_(std::move(trace)) {}

  template <typename Self>
  static ForwardResult run(Self& self, Graph& graph, const Tensor& batch);

  NetworkSpec spec_;
  ShapeTrace trace_;
  std::vector<Parameter> params_;
  bool frozen_ = false;
  std::optional<std::uint64_t> frozen_digest_;
};

std::string digest_hex(std::uint64_t digest);

}  // namespace pil
