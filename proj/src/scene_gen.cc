#include "dcp/scene_gen.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

#include "dcp/errors.h"
#include "dcp/parallel.h"
#include "dcp/rng.h"

namespace dcp {

namespace {

constexpr std::array<std::array<float, 3>, 16> kPalette = {{
    {0.55f, 0.55f, 0.50f},  // 0 background / impervious
    {0.85f, 0.20f, 0.20f},
    {0.20f, 0.70f, 0.25f},
    {0.20f, 0.30f, 0.85f},
    {0.90f, 0.80f, 0.20f},
    {0.75f, 0.30f, 0.80f},
    {0.20f, 0.80f, 0.80f},
    {0.95f, 0.55f, 0.15f},
    {0.45f, 0.25f, 0.10f},
    {0.60f, 0.90f, 0.55f},
    {0.95f, 0.65f, 0.75f},
    {0.15f, 0.15f, 0.35f},
    {0.35f, 0.55f, 0.20f},
    {0.70f, 0.70f, 0.95f},
    {0.95f, 0.95f, 0.85f},
    {0.40f, 0.10f, 0.30f},
}};

// Shapes placed per 128 x 128 area at density 1.
constexpr double kShapesPerUnitArea = 14.0;
constexpr float kTextureAmplitude = 0.04f;

}  // namespace

Tensor Image::to_tensor() const {
  std::vector<double> v(data.begin(), data.end());
  return Tensor({height, width, channels}, std::move(v));
}

void WorldSpec::validate() const {
  if (num_classes < 2 || num_classes > kPalette.size()) {
    throw ConfigError("num_classes must be in [2, 16], got " +
                      std::to_string(num_classes));
  }
  if (view_size == 0 || view_size > world_size) {
    throw ConfigError("view size " + std::to_string(view_size) +
                      " must be in [1, world size " +
                      std::to_string(world_size) + "]");
  }
  if (shape_density < 0.0) throw ConfigError("shape_density must be >= 0");
}

std::array<float, 3> class_color(std::size_t cls) {
  if (cls >= kPalette.size()) {
    throw InputError("class id " + std::to_string(cls) + " has no colour");
  }
  return kPalette[cls];
}

World generate_world(const WorldSpec& spec) {
  spec.validate();
  const std::size_t n = spec.world_size;
  auto rng = make_rng(spec.seed, streams::kWorld);
  World w{Image(n, n, 3), ClassMask(n, n, 0)};

  const double area_scale = static_cast<double>(n * n) / (128.0 * 128.0);
  const auto shape_count = static_cast<std::size_t>(
      std::lround(spec.shape_density * kShapesPerUnitArea * area_scale));
  std::uniform_int_distribution<std::size_t> cls_dist(1, spec.num_classes - 1);
  std::uniform_int_distribution<int> kind_dist(0, 2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double s = static_cast<double>(n) / 128.0;

  for (std::size_t i = 0; i < shape_count; ++i) {
    const auto cls = static_cast<std::uint8_t>(cls_dist(rng));
    const int kind = kind_dist(rng);
    const double cy = unit(rng) * n;
    const double cx = unit(rng) * n;
    double hy = 0, hx = 0;
    bool horizontal = false;
    if (kind == 0) {  // rectangle
      hy = (6.0 + 14.0 * unit(rng)) * s;
      hx = (6.0 + 14.0 * unit(rng)) * s;
    } else if (kind == 1) {  // ellipse
      hy = (6.0 + 12.0 * unit(rng)) * s;
      hx = (6.0 + 12.0 * unit(rng)) * s;
    } else {  // strip
      horizontal = unit(rng) < 0.5;
      const double half_width = (2.5 + 2.5 * unit(rng)) * s;
      const double half_length = (30.0 + 34.0 * unit(rng)) * s;
      hy = horizontal ? half_width : half_length;
      hx = horizontal ? half_length : half_width;
    }
    const auto y0 = static_cast<std::ptrdiff_t>(std::floor(cy - hy));
    const auto y1 = static_cast<std::ptrdiff_t>(std::ceil(cy + hy));
    const auto x0 = static_cast<std::ptrdiff_t>(std::floor(cx - hx));
    const auto x1 = static_cast<std::ptrdiff_t>(std::ceil(cx + hx));
    for (std::ptrdiff_t y = std::max<std::ptrdiff_t>(0, y0);
         y < std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(n), y1); ++y) {
      for (std::ptrdiff_t x = std::max<std::ptrdiff_t>(0, x0);
           x < std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(n), x1); ++x) {
        const double dy = (y + 0.5 - cy) / hy;
        const double dx = (x + 0.5 - cx) / hx;
        const bool inside = kind == 1 ? (dy * dy + dx * dx <= 1.0)
                                      : (std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0);
        if (inside) w.mask.at(y, x) = cls;
      }
    }
  }

  std::uniform_real_distribution<float> texture(-kTextureAmplitude,
                                                kTextureAmplitude);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const auto& c = kPalette[w.mask.at(y, x)];
      for (std::size_t ch = 0; ch < 3; ++ch) {
        w.image.at(y, x, ch) = std::clamp(c[ch] + texture(rng), 0.0f, 1.0f);
      }
    }
  }
  return w;
}

View crop(const World& world, std::size_t offset_y, std::size_t offset_x,
          std::size_t size) {
  const std::size_t n = world.image.height;
  if (offset_y + size > n || offset_x + size > world.image.width) {
    throw InputError("crop of size " + std::to_string(size) + " at (" +
                     std::to_string(offset_y) + "," + std::to_string(offset_x) +
                     ") leaves the world");
  }
  View v{Image(size, size, world.image.channels), ClassMask(size, size),
         offset_y, offset_x};
  const std::size_t c = world.image.channels;
  for (std::size_t y = 0; y < size; ++y) {
    const float* src =
        world.image.data.data() + ((offset_y + y) * world.image.width + offset_x) * c;
    std::copy_n(src, size * c, v.image.data.data() + y * size * c);
    for (std::size_t x = 0; x < size; ++x) {
      v.mask.at(y, x) = world.mask.at(offset_y + y, offset_x + x);
    }
  }
  return v;
}

std::vector<View> crop_views(const World& world, const WorldSpec& spec,
                             std::size_t count, std::mt19937_64& rng) {
  if (spec.view_size > world.image.height || spec.view_size > world.image.width) {
    throw InputError("view size " + std::to_string(spec.view_size) +
                     " larger than world " + std::to_string(world.image.height));
  }
  std::uniform_int_distribution<std::size_t> off_y(
      0, world.image.height - spec.view_size);
  std::uniform_int_distribution<std::size_t> off_x(
      0, world.image.width - spec.view_size);
  std::vector<View> views;
  views.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t y = off_y(rng);
    const std::size_t x = off_x(rng);
    views.push_back(crop(world, y, x, spec.view_size));
  }
  return views;
}

std::string_view to_string(NoiseKind kind) {
  switch (kind) {
    case NoiseKind::kGaussian: return "gaussian";
    case NoiseKind::kOcclusion: return "occlusion";
    case NoiseKind::kBlur: return "blur";
  }
  return "unknown";
}

NoiseKind parse_noise_kind(std::string_view name) {
  if (name == "gaussian") return NoiseKind::kGaussian;
  if (name == "occlusion") return NoiseKind::kOcclusion;
  if (name == "blur") return NoiseKind::kBlur;
  throw InputError("unknown noise kind '" + std::string(name) + "'");
}

Image add_gaussian_noise(const Image& view, double sigma, std::mt19937_64& rng) {
  Image out = view;
  if (sigma <= 0.0) return out;
  std::normal_distribution<double> dist(0.0, sigma);
  for (float& v : out.data) {
    v = static_cast<float>(std::clamp(v + dist(rng), 0.0, 1.0));
  }
  return out;
}

Image occlude(const Image& view, double min_area, double max_area,
              std::mt19937_64& rng) {
  if (!(min_area > 0.0 && min_area <= max_area && max_area <= 1.0)) {
    throw ConfigError("occlusion area range must satisfy 0 < min <= max <= 1");
  }
  const std::size_t h = view.height, w = view.width;
  const double total = static_cast<double>(h * w);
  std::uniform_real_distribution<double> frac(min_area, max_area);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::size_t rh = h, rw = w;
  for (;;) {
    const double area = frac(rng) * total;
    const double min_w = std::max(1.0, area / static_cast<double>(h));
    rw = static_cast<std::size_t>(
        std::lround(min_w + unit(rng) * (static_cast<double>(w) - min_w)));
    rw = std::clamp<std::size_t>(rw, 1, w);
    rh = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(area / static_cast<double>(rw))), 1, h);
    const double got = static_cast<double>(rh * rw) / total;
    if (got >= min_area && got <= max_area) break;
  }
  std::uniform_int_distribution<std::size_t> oy(0, h - rh);
  std::uniform_int_distribution<std::size_t> ox(0, w - rw);
  const std::size_t y0 = oy(rng), x0 = ox(rng);
  Image out = view;
  for (std::size_t y = y0; y < y0 + rh; ++y) {
    for (std::size_t x = x0; x < x0 + rw; ++x) {
      for (std::size_t c = 0; c < out.channels; ++c) out.at(y, x, c) = 0.0f;
    }
  }
  return out;
}

Image box_blur5(const Image& view) {
  Image out = view;
  const auto h = static_cast<std::ptrdiff_t>(view.height);
  const auto w = static_cast<std::ptrdiff_t>(view.width);
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < view.channels; ++c) {
        double acc = 0.0;
        int count = 0;
        for (std::ptrdiff_t dy = -2; dy <= 2; ++dy) {
          for (std::ptrdiff_t dx = -2; dx <= 2; ++dx) {
            const std::ptrdiff_t yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
            acc += view.at(yy, xx, c);
            ++count;
          }
        }
        out.at(y, x, c) = static_cast<float>(acc / count);
      }
    }
  }
  return out;
}

Image degrade(const Image& view, const NoiseConfig& config, std::mt19937_64& rng) {
  const auto has = [&](NoiseKind k) {
    return std::find(config.kinds.begin(), config.kinds.end(), k) !=
           config.kinds.end();
  };
  Image out = view;
  if (has(NoiseKind::kGaussian)) out = add_gaussian_noise(out, config.gaussian_sigma, rng);
  if (has(NoiseKind::kBlur)) out = box_blur5(out);
  if (has(NoiseKind::kOcclusion)) {
    out = occlude(out, config.occlusion_min_area, config.occlusion_max_area, rng);
  }
  return out;
}

Image second_sensor_transform(const Image& view) {
  Image out(view.height, view.width, view.channels);
  // Channel remap: a different spectral response per band.
  for (std::size_t y = 0; y < view.height; ++y) {
    for (std::size_t x = 0; x < view.width; ++x) {
      const float r = view.at(y, x, 0), g = view.at(y, x, 1), b = view.at(y, x, 2);
      out.at(y, x, 0) = std::clamp(0.8f * g + 0.1f, 0.0f, 1.0f);
      out.at(y, x, 1) = std::clamp(0.7f * b + 0.2f * r + 0.05f, 0.0f, 1.0f);
      out.at(y, x, 2) = std::clamp(0.9f * r, 0.0f, 1.0f);
    }
  }
  // Resolution round trip: 2x2 mean, then nearest-neighbour back up.
  Image result = out;
  for (std::size_t y = 0; y + 1 < view.height; y += 2) {
    for (std::size_t x = 0; x + 1 < view.width; x += 2) {
      for (std::size_t c = 0; c < view.channels; ++c) {
        const float m = 0.25f * (out.at(y, x, c) + out.at(y + 1, x, c) +
                                 out.at(y, x + 1, c) + out.at(y + 1, x + 1, c));
        result.at(y, x, c) = result.at(y + 1, x, c) = result.at(y, x + 1, c) =
            result.at(y + 1, x + 1, c) = m;
      }
    }
  }
  return result;
}

std::string_view to_string(ExperimentMode mode) {
  switch (mode) {
    case ExperimentMode::kHomoCis: return "homo-cis";
    case ExperimentMode::kHomoPis: return "homo-pis";
    case ExperimentMode::kHeteroPis: return "hetero-pis";
  }
  return "unknown";
}

ExperimentMode parse_mode(std::string_view name) {
  if (name == "homo-cis") return ExperimentMode::kHomoCis;
  if (name == "homo-pis") return ExperimentMode::kHomoPis;
  if (name == "hetero-pis") return ExperimentMode::kHeteroPis;
  throw InputError("invalid experiment mode '" + std::string(name) + "'");
}

void SceneConfig::validate() const {
  world.validate();
  if (num_platforms < 2) throw ConfigError("need at least 2 platforms");
  if (num_platforms > 65535) throw ConfigError("too many platforms");
  if (!(noise.degrade_probability >= 0.0 && noise.degrade_probability <= 1.0)) {
    throw ConfigError("degrade_probability must be in [0, 1]");
  }
}

SceneSample make_sample(const SceneConfig& config, std::uint64_t index) {
  config.validate();
  auto rng = make_rng(config.world.seed, streams::kSample, index);
  WorldSpec ws = config.world;
  ws.seed = rng();
  const World world = generate_world(ws);
  const std::size_t n = config.num_platforms;

  std::vector<View> views = crop_views(world, ws, n, rng);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  const std::size_t victim = pick(rng);
  if (config.mode != ExperimentMode::kHomoCis && ws.view_size < ws.world_size) {
    // No partner may hold the victim's exact view.
    std::uniform_int_distribution<std::size_t> off(0, ws.world_size - ws.view_size);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == victim) continue;
      while (views[j].offset_y == views[victim].offset_y &&
             views[j].offset_x == views[victim].offset_x) {
        views[j] = crop(world, off(rng), off(rng), ws.view_size);
      }
    }
  }

  SceneSample s;
  s.mode = config.mode;
  s.seed = config.world.seed;
  s.index = index;
  s.victim = victim;
  s.degraded.assign(n, false);
  std::bernoulli_distribution degrade_coin(config.noise.degrade_probability);
  const bool degraded = degrade_coin(rng);
  const Image clean_victim = views[victim].image;
  if (degraded) {
    views[victim].image = degrade(clean_victim, config.noise, rng);
    s.degraded[victim] = true;
  }
  if (config.mode == ExperimentMode::kHomoCis && degraded) {
    std::uniform_int_distribution<std::size_t> other(0, n - 2);
    std::size_t twin = other(rng);
    if (twin >= victim) ++twin;
    views[twin].image = clean_victim;
    views[twin].mask = views[victim].mask;
    views[twin].offset_y = views[victim].offset_y;
    views[twin].offset_x = views[victim].offset_x;
    s.clean_twin = twin;
  }
  if (config.mode == ExperimentMode::kHeteroPis) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j != victim) views[j].image = second_sensor_transform(views[j].image);
    }
  }
  for (auto& v : views) {
    s.views.push_back(std::move(v.image));
    s.masks.push_back(std::move(v.mask));
  }
  return s;
}

std::vector<SceneSample> assemble_mode(const SceneConfig& config,
                                       std::size_t count, std::uint64_t first,
                                       unsigned threads) {
  config.validate();
  std::vector<SceneSample> out(count);
  parallel_for(count, threads,
               [&](std::size_t i) { out[i] = make_sample(config, first + i); });
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

constexpr const char* kManifestName = "manifest.txt";
constexpr const char* kManifestHeader = "dcp-dataset 1";

std::string sample_file(std::uint64_t index, const char* what) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "sample_%06llu_%s.dcpt",
                static_cast<unsigned long long>(index), what);
  return buf;
}

std::string join_kinds(const std::vector<NoiseKind>& kinds) {
  if (kinds.empty()) return "none";
  std::string out;
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    if (i) out += ',';
    out += to_string(kinds[i]);
  }
  return out;
}

std::vector<NoiseKind> split_kinds(const std::string& text) {
  std::vector<NoiseKind> out;
  if (text == "none") return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_noise_kind(item));
  return out;
}

template <class T>
T expect_field(std::istream& in, const std::string& key) {
  std::string got;
  T value{};
  if (!(in >> got) || got != key || !(in >> value)) {
    throw FormatError("dataset manifest: expected field '" + key + "'");
  }
  return value;
}

}  // namespace

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const SceneConfig& c = dataset.config;
  std::ofstream m(dir / kManifestName);
  if (!m) throw FormatError("cannot write manifest in " + dir.string());
  m.precision(17);
  m << kManifestHeader << '\n'
    << "mode " << to_string(c.mode) << '\n'
    << "platforms " << c.num_platforms << '\n'
    << "world_size " << c.world.world_size << '\n'
    << "view_size " << c.world.view_size << '\n'
    << "classes " << c.world.num_classes << '\n'
    << "density " << c.world.shape_density << '\n'
    << "seed " << c.world.seed << '\n'
    << "noise " << join_kinds(c.noise.kinds) << '\n'
    << "sigma " << c.noise.gaussian_sigma << '\n'
    << "occlusion_min " << c.noise.occlusion_min_area << '\n'
    << "occlusion_max " << c.noise.occlusion_max_area << '\n'
    << "degrade_probability " << c.noise.degrade_probability << '\n'
    << "samples " << dataset.samples.size() << '\n';
  for (const SceneSample& s : dataset.samples) {
    const std::size_t n = s.num_platforms();
    const std::size_t h = s.views.at(0).height, w = s.views.at(0).width;
    const std::size_t ch = s.views.at(0).channels;
    Tensor views({n, h, w, ch});
    Tensor masks({n, h, w});
    for (std::size_t p = 0; p < n; ++p) {
      if (s.views[p].height != h || s.views[p].width != w) {
        throw InputError("save_dataset: views of one sample differ in size");
      }
      std::copy(s.views[p].data.begin(), s.views[p].data.end(),
                views.data().begin() + static_cast<std::ptrdiff_t>(p * h * w * ch));
      std::copy(s.masks[p].labels.begin(), s.masks[p].labels.end(),
                masks.data().begin() + static_cast<std::ptrdiff_t>(p * h * w));
    }
    const std::string vf = sample_file(s.index, "views");
    const std::string mf = sample_file(s.index, "masks");
    save_tensor(dir / vf, views);
    save_tensor(dir / mf, masks);
    std::string bits;
    for (bool d : s.degraded) bits += d ? '1' : '0';
    m << "sample " << s.index << ' ' << s.seed << ' ' << to_string(s.mode) << ' '
      << s.victim << ' '
      << (s.clean_twin ? std::to_string(*s.clean_twin) : std::string("-")) << ' '
      << bits << ' ' << vf << ' ' << mf << '\n';
  }
  if (!m) throw FormatError("failed writing manifest in " + dir.string());
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream m(dir / kManifestName);
  if (!m) throw FormatError("no manifest in " + dir.string());
  std::string header;
  std::getline(m, header);
  if (header != kManifestHeader) {
    throw FormatError("unrecognised dataset manifest header '" + header + "'");
  }
  Dataset d;
  SceneConfig& c = d.config;
  // Bad values inside the manifest are format errors of the file.
  const auto checked = [](auto&& parse) {
    try {
      return parse();
    } catch (const std::invalid_argument& e) {
      throw FormatError(std::string("dataset manifest: ") + e.what());
    }
  };
  const auto manifest_mode = [&](const std::string& name) {
    return checked([&] { return parse_mode(name); });
  };
  c.mode = manifest_mode(expect_field<std::string>(m, "mode"));
  c.num_platforms = expect_field<std::size_t>(m, "platforms");
  c.world.world_size = expect_field<std::size_t>(m, "world_size");
  c.world.view_size = expect_field<std::size_t>(m, "view_size");
  c.world.num_classes = expect_field<std::size_t>(m, "classes");
  c.world.shape_density = expect_field<double>(m, "density");
  c.world.seed = expect_field<std::uint64_t>(m, "seed");
  const std::string kinds = expect_field<std::string>(m, "noise");
  c.noise.kinds = checked([&] { return split_kinds(kinds); });
  c.noise.gaussian_sigma = expect_field<double>(m, "sigma");
  c.noise.occlusion_min_area = expect_field<double>(m, "occlusion_min");
  c.noise.occlusion_max_area = expect_field<double>(m, "occlusion_max");
  c.noise.degrade_probability = expect_field<double>(m, "degrade_probability");
  const auto count = expect_field<std::size_t>(m, "samples");
  checked([&] {
    c.validate();
    return 0;
  });

  for (std::size_t i = 0; i < count; ++i) {
    std::string tag, mode, twin, bits, vf, mf;
    SceneSample s;
    if (!(m >> tag >> s.index >> s.seed >> mode >> s.victim >> twin >> bits >> vf >>
          mf) ||
        tag != "sample") {
      throw FormatError("dataset manifest: malformed sample line " +
                        std::to_string(i));
    }
    s.mode = manifest_mode(mode);
    const Tensor views = load_tensor(dir / vf);
    const Tensor masks = load_tensor(dir / mf);
    if (views.rank() != 4 || masks.rank() != 3 || views.dim(0) != bits.size() ||
        masks.dim(0) != bits.size() || views.dim(1) != masks.dim(1) ||
        views.dim(2) != masks.dim(2)) {
      throw FormatError("dataset sample " + std::to_string(s.index) +
                        ": tensor dims " + shape_to_string(views.shape()) + " / " +
                        shape_to_string(masks.shape()) + " disagree with manifest");
    }
    const std::size_t n = views.dim(0), h = views.dim(1), w = views.dim(2),
                      ch = views.dim(3);
    if (s.victim >= n) throw FormatError("dataset manifest: victim out of range");
    for (std::size_t p = 0; p < n; ++p) {
      Image img(h, w, ch);
      for (std::size_t k = 0; k < h * w * ch; ++k) {
        img.data[k] = static_cast<float>(views[p * h * w * ch + k]);
      }
      ClassMask mask(h, w);
      for (std::size_t k = 0; k < h * w; ++k) {
        const double v = masks[p * h * w + k];
        if (!(v >= 0.0 && v < static_cast<double>(c.world.num_classes)) ||
            v != std::floor(v)) {
          throw FormatError("dataset sample " + std::to_string(s.index) +
                            ": invalid class id in mask");
        }
        mask.labels[k] = static_cast<std::uint8_t>(v);
      }
      s.views.push_back(std::move(img));
      s.masks.push_back(std::move(mask));
      if (bits[p] != '0' && bits[p] != '1') {
        throw FormatError("dataset manifest: bad degradation flags '" + bits + "'");
      }
      s.degraded.push_back(bits[p] == '1');
    }
    if (twin != "-") {
      std::size_t t = 0;
      try {
        t = std::stoul(twin);
      } catch (const std::exception&) {
        throw FormatError("dataset manifest: bad clean twin '" + twin + "'");
      }
      if (t >= n) throw FormatError("dataset manifest: clean twin out of range");
      s.clean_twin = t;
    }
    d.samples.push_back(std::move(s));
  }
  std::string extra;
  if (m >> extra) {
    throw FormatError("dataset manifest: unexpected content '" + extra +
                      "' after " + std::to_string(count) + " samples");
  }
  return d;
}

}  // namespace dcp
