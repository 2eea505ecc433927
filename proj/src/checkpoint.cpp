#include "pil/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include "pil/errors.hpp"

namespace pil {

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    static_assert(std::is_unsigned_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    le(bits);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::span<const std::uint8_t> bytes(std::size_t n) {
    if (n > in_.size() - pos_) throw IoError("checkpoint truncated at byte " + std::to_string(pos_));
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename T>
  T le() {
    auto b = bytes(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(b[i]) << (8 * i));
    return v;
  }
  double f64() {
    const auto bits = le<std::uint64_t>();
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes("PLCK", 4);
  w.le<std::uint32_t>(Checkpoint::kVersion);
  w.le(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& p : ckpt.tensors) {
    w.le(static_cast<std::uint32_t>(p.name.size()));
    w.bytes(p.name.data(), p.name.size());
    w.le(static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape()) w.le(static_cast<std::uint64_t>(d));
    for (double v : p.value.data()) w.f64(v);
  }
  nlohmann::json doc = {{"network_spec", spec_to_json(ckpt.spec)}};
  if (!ckpt.meta.empty()) doc["meta"] = ckpt.meta;
  const std::string json = doc.dump();
  w.le(static_cast<std::uint64_t>(json.size()));
  w.bytes(json.data(), json.size());
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.bytes(4);
  if (std::memcmp(magic.data(), "PLCK", 4) != 0) throw IoError("not a PLCK checkpoint");
  const auto version = r.le<std::uint32_t>();
  if (version != Checkpoint::kVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  const auto count = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.le<std::uint32_t>();
    auto name = r.bytes(name_len);
    const auto rank = r.le<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.le<std::uint64_t>());
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = r.f64();
    try {
      ckpt.tensors.push_back({std::string(name.begin(), name.end()), Tensor(std::move(shape), std::move(values))});
    } catch (const ShapeError& e) {
      throw IoError(std::string("bad tensor in checkpoint: ") + e.what());
    }
  }
  const auto json_len = r.le<std::uint64_t>();
  auto json = r.bytes(static_cast<std::size_t>(json_len));
  if (!r.done()) throw IoError("trailing bytes after checkpoint payload");
  try {
    const auto doc = nlohmann::json::parse(json.begin(), json.end());
    ckpt.spec = spec_from_json(doc.at("network_spec"));
    if (doc.contains("meta")) ckpt.meta = doc.at("meta");
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad checkpoint header: ") + e.what());
  } catch (const BuildError& e) {
    throw IoError(std::string("bad checkpoint spec: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  // Write-then-rename so an interrupted save never leaves a torn file behind.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

Checkpoint checkpoint_of(const Network& net, nlohmann::json meta) {
  Checkpoint ckpt;
  ckpt.spec = net.spec();
  for (const auto& p : net.parameters()) {
    Tensor copy = p.value;
    copy.clear_grad();
    copy.set_requires_grad(false);
    ckpt.tensors.push_back({p.name, std::move(copy)});
  }
  ckpt.meta = std::move(meta);
  return ckpt;
}

Network network_from_checkpoint(const Checkpoint& ckpt) {
  return Network::from_parameters(ckpt.spec, ckpt.tensors);
}

}  // namespace pil
