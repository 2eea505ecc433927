#include "pil/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <cstring>
#include <fstream>
#include <set>

#include "pil/errors.hpp"
#include "pil/pgm.hpp"
#include "pil/rng.hpp"

namespace pil {

namespace {

void check_range(const AngleRange& r, const std::string& what) {
  if (!(r.min < r.max) || !std::isfinite(r.min) || !std::isfinite(r.max)) {
    throw ArgumentError(what + " range must satisfy min < max");
  }
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1.0 - s), q = v * (1.0 - s * f), t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

struct Bone {
  std::size_t parent;
  std::size_t child;
};

std::vector<Bone> bones_of(const SkeletonConfig& cfg) {
  std::vector<Bone> bones;
  for (std::size_t c = 0; c < cfg.chains; ++c) {
    for (std::size_t i = 0; i < cfg.joints_per_chain; ++i) {
      const std::size_t child = 1 + c * cfg.joints_per_chain + i;
      bones.push_back({i == 0 ? 0 : child - 1, child});
    }
  }
  return bones;
}

double depth_unit(double z, const SkeletonConfig& cfg) {
  return std::clamp((z - cfg.depth_range.min) / (cfg.depth_range.max - cfg.depth_range.min), 0.0, 1.0);
}

}  // namespace

void SkeletonConfig::validate() const {
  if (chains == 0 || joints_per_chain == 0) throw ArgumentError("skeleton needs at least one chain and joint");
  const std::size_t n_bones = chains * joints_per_chain;
  if (bone_lengths.size() != n_bones || flex_ranges.size() != n_bones || lift_ranges.size() != n_bones) {
    throw ArgumentError("skeleton expects " + std::to_string(n_bones) + " bone lengths and angle ranges");
  }
  if (chain_base_angles.size() != chains) throw ArgumentError("one base angle per chain is required");
  for (double l : bone_lengths) {
    if (!(l > 0.0) || !std::isfinite(l)) throw ArgumentError("bone lengths must be positive");
  }
  for (const auto& r : flex_ranges) check_range(r, "flex");
  for (const auto& r : lift_ranges) check_range(r, "lift");
  check_range(roll_range, "roll");
  check_range(depth_range, "depth");
  if (!(scale_range.min > 0.0 && scale_range.min <= scale_range.max)) {
    throw ArgumentError("scale range must be positive with min <= max");
  }
  if (root_jitter < 0.0 || root_depth_jitter < 0.0) throw ArgumentError("jitter must be non-negative");
}

SkeletonConfig SkeletonConfig::hand21() {
  SkeletonConfig cfg;
  cfg.chains = 5;
  cfg.joints_per_chain = 4;
  cfg.chain_base_angles = {-1.0, -0.45, 0.0, 0.4, 0.8};
  for (std::size_t c = 0; c < cfg.chains; ++c) {
    const bool thumb = c == 0;
    const std::array<double, 4> lengths = thumb ? std::array<double, 4>{4.0, 3.0, 2.5, 2.0}
                                                : std::array<double, 4>{5.0, 3.0, 2.5, 2.0};
    for (std::size_t i = 0; i < 4; ++i) {
      cfg.bone_lengths.push_back(lengths[i]);
      cfg.flex_ranges.push_back(i == 0 ? AngleRange{-0.1, 0.1} : AngleRange{-0.25, 0.25});
      cfg.lift_ranges.push_back(i == 0 ? AngleRange{-0.2, 0.2} : AngleRange{-0.1, 0.35});
    }
  }
  return cfg;
}

nlohmann::json to_json(const SkeletonConfig& cfg) {
  auto ranges = [](const std::vector<AngleRange>& rs) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& r : rs) a.push_back({r.min, r.max});
    return a;
  };
  return {{"chains", cfg.chains},
          {"joints_per_chain", cfg.joints_per_chain},
          {"bone_lengths", cfg.bone_lengths},
          {"flex_ranges", ranges(cfg.flex_ranges)},
          {"lift_ranges", ranges(cfg.lift_ranges)},
          {"chain_base_angles", cfg.chain_base_angles},
          {"roll_range", {cfg.roll_range.min, cfg.roll_range.max}},
          {"scale_range", {cfg.scale_range.min, cfg.scale_range.max}},
          {"root_jitter", cfg.root_jitter},
          {"depth_range", {cfg.depth_range.min, cfg.depth_range.max}},
          {"root_depth_jitter", cfg.root_depth_jitter}};
}

nlohmann::json to_json(const RenderConfig& cfg) {
  return {{"height", cfg.height},
          {"width", cfg.width},
          {"bone_width", cfg.bone_width},
          {"noise", cfg.noise},
          {"blobs", cfg.blobs},
          {"same_hue_fraction", cfg.same_hue_fraction},
          {"blob_aspect_max", cfg.blob_aspect_max},
          {"blank_background", cfg.blank_background},
          {"margin", cfg.margin},
          {"max_attempts", cfg.max_attempts}};
}

nlohmann::json to_json(const GeneratorConfig& cfg) {
  return {{"skeleton", to_json(cfg.skeleton)}, {"render", to_json(cfg.render)}};
}

GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
  GeneratorConfig cfg;
  auto range = [](const nlohmann::json& a) { return AngleRange{a.at(0).get<double>(), a.at(1).get<double>()}; };
  try {
    if (j.contains("skeleton")) {
      const auto& s = j.at("skeleton");
      SkeletonConfig& k = cfg.skeleton;
      k.chains = s.value("chains", k.chains);
      k.joints_per_chain = s.value("joints_per_chain", k.joints_per_chain);
      if (s.contains("bone_lengths")) k.bone_lengths = s.at("bone_lengths").get<std::vector<double>>();
      if (s.contains("flex_ranges")) {
        k.flex_ranges.clear();
        for (const auto& r : s.at("flex_ranges")) k.flex_ranges.push_back(range(r));
      }
      if (s.contains("lift_ranges")) {
        k.lift_ranges.clear();
        for (const auto& r : s.at("lift_ranges")) k.lift_ranges.push_back(range(r));
      }
      if (s.contains("chain_base_angles")) {
        k.chain_base_angles = s.at("chain_base_angles").get<std::vector<double>>();
      }
      if (s.contains("roll_range")) k.roll_range = range(s.at("roll_range"));
      if (s.contains("scale_range")) k.scale_range = range(s.at("scale_range"));
      if (s.contains("depth_range")) k.depth_range = range(s.at("depth_range"));
      k.root_jitter = s.value("root_jitter", k.root_jitter);
      k.root_depth_jitter = s.value("root_depth_jitter", k.root_depth_jitter);
    }
    if (j.contains("render")) {
      const auto& r = j.at("render");
      RenderConfig& c = cfg.render;
      c.height = r.value("height", c.height);
      c.width = r.value("width", c.width);
      c.bone_width = r.value("bone_width", c.bone_width);
      c.noise = r.value("noise", c.noise);
      c.blobs = r.value("blobs", c.blobs);
      c.same_hue_fraction = r.value("same_hue_fraction", c.same_hue_fraction);
      c.blob_aspect_max = r.value("blob_aspect_max", c.blob_aspect_max);
      c.blank_background = r.value("blank_background", c.blank_background);
      c.margin = r.value("margin", c.margin);
      c.max_attempts = r.value("max_attempts", c.max_attempts);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError(std::string("malformed generator config: ") + e.what());
  }
  cfg.skeleton.validate();
  return cfg;
}

PoseSample sample_pose(const GeneratorConfig& cfg, std::uint64_t seed, AngleMode mode) {
  const SkeletonConfig& sk = cfg.skeleton;
  sk.validate();
  const RenderConfig& rc = cfg.render;
  Rng rng(derive_seed(seed, "pose"));
  const bool random = mode == AngleMode::Random;
  auto draw = [&](const AngleRange& r) { return random ? rng.uniform(r.min, r.max) : r.mid(); };

  const double cx = 0.5 * static_cast<double>(rc.width);
  // Fingers extend upwards, so the wrist sits below the center.
  const double cy = 0.5 * static_cast<double>(rc.height) + 0.15 * static_cast<double>(rc.height);
  for (std::size_t attempt = 0; attempt < std::max<std::size_t>(rc.max_attempts, 1); ++attempt) {
    PoseSample out;
    out.joints.assign(sk.joint_count(), {0.0, 0.0, 0.0});
    const double roll = draw(sk.roll_range);
    out.scale_factor = random ? rng.uniform(sk.scale_range.min, sk.scale_range.max) : sk.scale_range.mid();
    const double jitter_x = random ? rng.uniform(-sk.root_jitter, sk.root_jitter) : 0.0;
    const double jitter_y = random ? rng.uniform(-sk.root_jitter, sk.root_jitter) : 0.0;
    const double root_z = random ? rng.uniform(-sk.root_depth_jitter, sk.root_depth_jitter) : 0.0;
    out.joints[0] = {cx + jitter_x, cy + jitter_y, root_z};
    for (std::size_t c = 0; c < sk.chains; ++c) {
      double heading = sk.chain_base_angles[c] + roll;
      double lift = 0.0;
      std::array<double, 3> prev = out.joints[0];
      for (std::size_t i = 0; i < sk.joints_per_chain; ++i) {
        const std::size_t b = c * sk.joints_per_chain + i;
        heading += draw(sk.flex_ranges[b]);
        lift += draw(sk.lift_ranges[b]);
        const double len = sk.bone_lengths[b] * out.scale_factor;
        // heading is measured from "up" (-y); positive lift moves towards the camera (-z).
        const std::array<double, 3> dir{std::sin(heading) * std::cos(lift), -std::cos(heading) * std::cos(lift),
                                        -std::sin(lift)};
        std::array<double, 3> next{prev[0] + len * dir[0], prev[1] + len * dir[1], prev[2] + len * dir[2]};
        out.joints[1 + b] = next;
        prev = next;
      }
    }
    const bool inside = std::all_of(out.joints.begin(), out.joints.end(), [&](const auto& p) {
      return p[0] >= rc.margin && p[0] <= static_cast<double>(rc.width) - rc.margin && p[1] >= rc.margin &&
             p[1] <= static_cast<double>(rc.height) - rc.margin;
    });
    if (inside) return out;
    if (!random) break;
  }
  throw ArgumentError("skeleton does not fit the " + std::to_string(rc.width) + "x" + std::to_string(rc.height) +
                      " frame after " + std::to_string(rc.max_attempts) + " attempts");
}

Tensor normalize_pose(const Joints& joints, const SkeletonConfig& cfg, SampleMeta& meta) {
  if (joints.size() != cfg.joint_count()) throw ShapeError("joint count does not match skeleton");
  double longest = 0.0;
  for (const auto& bone : bones_of(cfg)) {
    const auto& a = joints[bone.parent];
    const auto& b = joints[bone.child];
    longest = std::max(longest, std::hypot(b[0] - a[0], b[1] - a[1], b[2] - a[2]));
  }
  meta.root = joints[0];
  meta.scale = longest;
  Tensor pose({3 * joints.size()});
  for (std::size_t j = 0; j < joints.size(); ++j) {
    for (std::size_t d = 0; d < 3; ++d) pose[3 * j + d] = (joints[j][d] - meta.root[d]) / meta.scale;
  }
  return pose;
}

Joints denormalize_pose(const Tensor& pose, const SampleMeta& meta) {
  if (pose.numel() % 3 != 0) throw ShapeError("pose length must be a multiple of 3");
  Joints joints(pose.numel() / 3);
  for (std::size_t j = 0; j < joints.size(); ++j) {
    for (std::size_t d = 0; d < 3; ++d) joints[j][d] = pose[3 * j + d] * meta.scale + meta.root[d];
  }
  return joints;
}

Sample render_pair(const Joints& joints, const GeneratorConfig& cfg, std::uint64_t seed) {
  const SkeletonConfig& sk = cfg.skeleton;
  const RenderConfig& rc = cfg.render;
  if (joints.size() != sk.joint_count()) throw ShapeError("joint count does not match skeleton");
  const std::size_t H = rc.height, W = rc.width;
  Rng rng(derive_seed(seed, "render"));

  Sample s;
  s.image_hard = Tensor({3, H, W}, 0.0);
  s.image_priv = Tensor({1, H, W}, 0.0);
  s.mask = Tensor({1, H, W}, 1.0);
  s.meta.seed = seed;
  s.pose = normalize_pose(joints, sk, s.meta);

  // Color draws happen first so they do not depend on the background settings.
  const double hue = rng.uniform();
  const auto fg = hsv_to_rgb(hue, rng.uniform(0.5, 1.0), rng.uniform(0.7, 1.0));
  const bool same_hue = rng.uniform() < rc.same_hue_fraction;

  // Background.
  const std::size_t plane = H * W;
  auto hard = s.image_hard.data();
  if (!rc.blank_background) {
    std::array<double, 3> base{rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5)};
    for (std::size_t c = 0; c < 3; ++c) std::fill_n(hard.begin() + static_cast<std::ptrdiff_t>(c * plane), plane, base[c]);
    for (std::size_t b = 0; b < rc.blobs; ++b) {
      const double bx = rng.uniform(0.0, static_cast<double>(W));
      const double by = rng.uniform(0.0, static_cast<double>(H));
      const double sigma = rng.uniform(2.0, 6.0);
      // Elongated blobs resemble limbs; minor axis = sigma / aspect.
      const double aspect = rng.uniform(1.0, rc.blob_aspect_max);
      const double angle = rng.uniform(0.0, std::numbers::pi);
      const double ca = std::cos(angle), sa = std::sin(angle);
      const double inv_major = 1.0 / (2.0 * sigma * sigma);
      const double inv_minor = aspect * aspect * inv_major;
      const double amp = rng.uniform(0.3, 0.8);
      const double blob_hue = same_hue ? hue + rng.uniform(-0.05, 0.05) : rng.uniform();
      const auto color = hsv_to_rgb(blob_hue, rng.uniform(0.4, 1.0), rng.uniform(0.5, 1.0));
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          const double dx = static_cast<double>(x) + 0.5 - bx, dy = static_cast<double>(y) + 0.5 - by;
          const double u = dx * ca + dy * sa, v = -dx * sa + dy * ca;
          const double g = amp * std::exp(-(u * u * inv_major + v * v * inv_minor));
          for (std::size_t c = 0; c < 3; ++c) {
            double& px = hard[c * plane + y * W + x];
            px = std::min(1.0, px + g * color[c]);
          }
        }
      }
    }
  }

  // Foreground: nearest bone wins at every covered pixel.
  const double radius = 0.5 * rc.bone_width;
  const auto bones = bones_of(sk);
  auto priv = s.image_priv.data();
  auto mask = s.mask.data();
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      double best_z = std::numeric_limits<double>::infinity();
      for (const auto& bone : bones) {
        const auto& a = joints[bone.parent];
        const auto& b = joints[bone.child];
        const double ex = b[0] - a[0], ey = b[1] - a[1];
        const double len2 = ex * ex + ey * ey;
        double t = len2 > 0.0 ? ((px - a[0]) * ex + (py - a[1]) * ey) / len2 : 0.0;
        t = std::clamp(t, 0.0, 1.0);
        const double qx = a[0] + t * ex - px, qy = a[1] + t * ey - py;
        if (qx * qx + qy * qy <= radius * radius) best_z = std::min(best_z, a[2] + t * (b[2] - a[2]));
      }
      if (!std::isfinite(best_z)) continue;
      const std::size_t i = y * W + x;
      const double depth = depth_unit(best_z, sk);
      priv[i] = 1.0 - 0.8 * depth;
      mask[i] = 0.0;
      const double shade = 0.55 + 0.45 * (1.0 - depth);
      for (std::size_t c = 0; c < 3; ++c) hard[c * plane + i] = fg[c] * shade;
    }
  }

  if (rc.noise > 0.0) {
    for (double& v : hard) v = std::clamp(v + rng.uniform(-rc.noise, rc.noise), 0.0, 1.0);
  }
  return s;
}

Sample generate_sample(const GeneratorConfig& cfg, std::uint64_t seed) {
  const PoseSample pose = sample_pose(cfg, seed);
  return render_pair(pose.joints, cfg, seed);
}

nlohmann::json to_json(const Manifest& m) {
  return {{"version", m.version},
          {"skeleton_config", to_json(m.config.skeleton)},
          {"render_config", to_json(m.config.render)},
          {"n", m.n},
          {"split_seed", m.split_seed},
          {"train_seeds", m.train_seeds},
          {"test_seeds", m.test_seeds}};
}

Manifest manifest_from_json(const nlohmann::json& j) {
  Manifest m;
  try {
    m.version = j.at("version").get<int>();
    if (m.version != 1) throw IoError("unsupported manifest version " + std::to_string(m.version));
    nlohmann::json gen = {{"skeleton", j.at("skeleton_config")}};
    if (j.contains("render_config")) gen["render"] = j.at("render_config");
    m.config = generator_config_from_json(gen);
    m.n = j.at("n").get<std::size_t>();
    m.split_seed = j.at("split_seed").get<std::uint64_t>();
    m.train_seeds = j.at("train_seeds").get<std::vector<std::uint64_t>>();
    m.test_seeds = j.at("test_seeds").get<std::vector<std::uint64_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed manifest: ") + e.what());
  }
  if (m.train_seeds.size() + m.test_seeds.size() != m.n) throw IoError("manifest seed lists do not add up to n");
  return m;
}

void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << to_json(m).dump(2) << '\n';
  if (!out) throw IoError("failed writing manifest " + path.string());
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("cannot parse manifest " + path.string() + ": " + e.what());
  }
  return manifest_from_json(j);
}

Manifest make_manifest(std::size_t n, const GeneratorConfig& cfg, std::uint64_t split_seed) {
  if (n < 2) throw ArgumentError("a dataset needs at least 2 samples");
  cfg.skeleton.validate();
  Manifest m;
  m.config = cfg;
  m.n = n;
  m.split_seed = split_seed;
  Rng rng(derive_seed(split_seed, "sample-seeds"));
  std::set<std::uint64_t> seen;
  std::vector<std::uint64_t> seeds;
  while (seeds.size() < n) {
    const std::uint64_t s = rng.next();
    if (seen.insert(s).second) seeds.push_back(s);
  }
  const std::size_t n_train = n * 4 / 5;
  m.train_seeds.assign(seeds.begin(), seeds.begin() + static_cast<std::ptrdiff_t>(n_train));
  m.test_seeds.assign(seeds.begin() + static_cast<std::ptrdiff_t>(n_train), seeds.end());
  return m;
}

Dataset materialize(const Manifest& manifest) {
  Dataset d;
  d.manifest = manifest;
  d.train.reserve(manifest.train_seeds.size());
  d.test.reserve(manifest.test_seeds.size());
  for (auto s : manifest.train_seeds) d.train.push_back(generate_sample(manifest.config, s));
  for (auto s : manifest.test_seeds) d.test.push_back(generate_sample(manifest.config, s));
  return d;
}

Dataset make_dataset(std::size_t n, const GeneratorConfig& cfg, std::uint64_t split_seed) {
  return materialize(make_manifest(n, cfg, split_seed));
}

namespace {

void write_f64(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (double v : t.data()) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
    out.write(reinterpret_cast<const char*>(bytes), 8);
  }
  if (!out) throw IoError("failed writing " + path.string());
}

GrayImage plane_image(const Tensor& t, std::size_t channel) {
  const std::size_t h = t.dim(1), w = t.dim(2);
  GrayImage img{w, h, std::vector<std::uint8_t>(h * w)};
  for (std::size_t i = 0; i < h * w; ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(t[channel * h * w + i], 0.0, 1.0)));
  }
  return img;
}

void export_split(const std::vector<Sample>& samples, const std::filesystem::path& dir) {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    const auto sample_dir = dir / (std::to_string(i) + "_" + std::to_string(s.meta.seed));
    std::error_code ec;
    std::filesystem::create_directories(sample_dir, ec);
    if (ec) throw IoError("cannot create " + sample_dir.string() + ": " + ec.message());
    write_f64(sample_dir / "image_hard.f64", s.image_hard);
    write_f64(sample_dir / "image_priv.f64", s.image_priv);
    write_f64(sample_dir / "mask.f64", s.mask);
    write_f64(sample_dir / "pose.f64", s.pose);
    const char* names[] = {"hard_r.pgm", "hard_g.pgm", "hard_b.pgm"};
    for (std::size_t c = 0; c < 3; ++c) write_pgm(sample_dir / names[c], plane_image(s.image_hard, c));
    write_pgm(sample_dir / "priv.pgm", plane_image(s.image_priv, 0));
    write_pgm(sample_dir / "mask.pgm", plane_image(s.mask, 0));
  }
}

}  // namespace

void export_raw(const Dataset& data, const std::filesystem::path& dir) {
  export_split(data.train, dir / "train");
  export_split(data.test, dir / "test");
}

Tensor downsample_mask(const Tensor& mask, std::size_t h, std::size_t w) {
  const Shape& s = mask.shape();
  const bool batched = s.size() == 4;
  if (!(s.size() == 3 || batched) || s[s.size() - 3] != 1) {
    throw ShapeError("mask must be [1,H,W] or [N,1,H,W], got " + shape_string(s));
  }
  const std::size_t H = s[s.size() - 2], W = s[s.size() - 1];
  if (h == 0 || w == 0 || h > H || w > W) {
    throw ArgumentError("downsample_mask cannot resize " + std::to_string(H) + "x" + std::to_string(W) + " to " +
                        std::to_string(h) + "x" + std::to_string(w));
  }
  const std::size_t n = batched ? s[0] : 1;
  Tensor out(batched ? Shape{n, 1, h, w} : Shape{1, h, w});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t y = 0; y < h; ++y) {
      const std::size_t sy = y * H / h;
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t sx = x * W / w;
        out[(b * h + y) * w + x] = mask[(b * H + sy) * W + sx] >= 0.5 ? 1.0 : 0.0;
      }
    }
  }
  return out;
}

}  // namespace pil
