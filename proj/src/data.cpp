#include "moby/data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

namespace moby {

bool Dataset::labeled() const {
  return !records.empty() && std::all_of(records.begin(), records.end(), [](const ImageRecord& r) { return r.label.has_value(); });
}

ChannelStats compute_stats(const std::vector<ImageRecord>& records) {
  if (records.empty()) throw ContractError("cannot compute statistics of an empty dataset");
  const Index channels = records.front().image.channels;
  ChannelStats stats{std::vector<double>(static_cast<std::size_t>(channels), 0.0),
                     std::vector<double>(static_cast<std::size_t>(channels), 0.0)};
  double count = 0;
  for (const auto& r : records) {
    for (Index c = 0; c < channels; ++c) stats.mean[static_cast<std::size_t>(c)] += r.image.plane(c).cast<double>().sum();
    count += static_cast<double>(r.image.size * r.image.size);
  }
  for (auto& m : stats.mean) m /= count;
  for (const auto& r : records) {
    for (Index c = 0; c < channels; ++c) {
      stats.stddev[static_cast<std::size_t>(c)] +=
          (r.image.plane(c).cast<double>() - stats.mean[static_cast<std::size_t>(c)]).square().sum();
    }
  }
  for (auto& s : stats.stddev) s = std::max(std::sqrt(s / count), 1e-6);
  return stats;
}

namespace {

using Color = std::array<float, 3>;

float luminance(const Color& c) { return 0.299f * c[0] + 0.587f * c[1] + 0.114f * c[2]; }

Color random_color(Rng& rng) {
  return {static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform())};
}

// Inside test in shape-local coordinates (unit radius).
bool inside_shape(Index kind, double x, double y) {
  const double r = std::hypot(x, y);
  auto plus = [](double a, double b) {
    return (std::abs(a) <= 0.3 && std::abs(b) <= 0.95) || (std::abs(b) <= 0.3 && std::abs(a) <= 0.95);
  };
  switch (kind) {
    case 0:
      return r <= 1.0;
    case 1:
      return std::max(std::abs(x), std::abs(y)) <= 0.8;
    case 2: {
      // Vertices (0, -0.9), (0.85, 0.6), (-0.85, 0.6); image y grows downwards.
      const double edge = 1.5 / 0.85;
      return y <= 0.6 && y >= -0.9 + edge * std::abs(x);
    }
    case 3:
      return plus(x, y);
    case 4:
      return r >= 0.6 && r <= 1.0;
    case 5:
      return std::abs(x) + std::abs(y) <= 1.0;
    case 6: {
      const double c = std::numbers::sqrt2 / 2;
      return plus(c * (x + y), c * (y - x));
    }
    case 7: {
      const double m = std::max(std::abs(x), std::abs(y));
      return m <= 0.85 && m >= 0.5;
    }
    case 8:
      return r <= 1.0 && y >= 0.0;
    default:
      return std::hypot(x + 0.5, y) <= 0.42 || std::hypot(x - 0.5, y) <= 0.42;
  }
}

void add_noise_and_clamp(Image& img, double sigma, Rng& rng) {
  for (Index i = 0; i < img.pixels.size(); ++i) img.pixels[i] += static_cast<float>(sigma * rng.normal());
  img.pixels = img.pixels.max(0.0f).min(1.0f);
}

Image render_shape(Index kind, Index size, Rng& rng) {
  const Color bg = random_color(rng);
  Color fg = random_color(rng);
  while (std::abs(luminance(fg) - luminance(bg)) < 0.25f) fg = random_color(rng);
  const double cx = rng.uniform(0.38, 0.62), cy = rng.uniform(0.38, 0.62);
  const double radius = rng.uniform(0.2, 0.3);
  const double angle = rng.uniform(-10.0, 10.0) * std::numbers::pi / 180.0;
  const double grad_angle = rng.uniform(0.0, 2 * std::numbers::pi);
  const double grad_amp = rng.uniform(0.0, 0.15);
  const double ca = std::cos(angle), sa = std::sin(angle);

  Image img(3, size);
  for (Index y = 0; y < size; ++y) {
    for (Index x = 0; x < size; ++x) {
      double cover = 0.0;
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          const double u = (static_cast<double>(x) + 0.25 + 0.5 * sx) / static_cast<double>(size) - cx;
          const double v = (static_cast<double>(y) + 0.25 + 0.5 * sy) / static_cast<double>(size) - cy;
          cover += inside_shape(kind, (ca * u + sa * v) / radius, (-sa * u + ca * v) / radius) ? 0.25 : 0.0;
        }
      }
      const double u = static_cast<double>(x) / static_cast<double>(size) - 0.5;
      const double v = static_cast<double>(y) / static_cast<double>(size) - 0.5;
      const double shade = grad_amp * (std::cos(grad_angle) * u + std::sin(grad_angle) * v);
      for (Index c = 0; c < 3; ++c) {
        const double b = bg[static_cast<std::size_t>(c)] + shade;
        img.at(c, y, x) = static_cast<float>(b * (1.0 - cover) + fg[static_cast<std::size_t>(c)] * cover);
      }
    }
  }
  add_noise_and_clamp(img, 0.03, rng);
  return img;
}

double fract(double v) { return v - std::floor(v); }

Image render_texture(Index kind, Index size, Rng& rng) {
  const Color a = random_color(rng);
  Color b = random_color(rng);
  while (std::abs(luminance(a) - luminance(b)) < 0.2f) b = random_color(rng);
  const double theta = rng.uniform(0.0, std::numbers::pi);
  const double freq = rng.uniform(2.5, 5.0);
  const double phase = rng.uniform(0.0, 1.0);
  const double ox = rng.uniform(0.3, 0.7), oy = rng.uniform(0.3, 0.7);
  std::array<std::array<double, 4>, 5> blobs{};  // x, y, width, weight
  for (auto& g : blobs) g = {rng.uniform(), rng.uniform(), rng.uniform(0.08, 0.2), rng.uniform(-1.0, 1.0)};
  const double ct = std::cos(theta), st = std::sin(theta);

  Image img(3, size);
  for (Index y = 0; y < size; ++y) {
    for (Index x = 0; x < size; ++x) {
      const double u0 = (static_cast<double>(x) + 0.5) / static_cast<double>(size);
      const double v0 = (static_cast<double>(y) + 0.5) / static_cast<double>(size);
      const double u = ct * u0 + st * v0, v = -st * u0 + ct * v0;
      double t = 0.0;
      switch (kind) {
        case 0:  // stripes
          t = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * (freq * u + phase));
          break;
        case 1:  // checks
          t = (std::sin(2 * std::numbers::pi * freq * u) * std::sin(2 * std::numbers::pi * freq * v) > 0) ? 1.0 : 0.0;
          break;
        case 2: {  // dot lattice
          const double du = fract(freq * u + phase) - 0.5, dv = fract(freq * v + phase) - 0.5;
          t = std::hypot(du, dv) < 0.25 ? 1.0 : 0.0;
          break;
        }
        case 3: {  // smooth blobs
          for (const auto& g : blobs) {
            t += g[3] * std::exp(-(std::pow(u0 - g[0], 2) + std::pow(v0 - g[1], 2)) / (2 * g[2] * g[2]));
          }
          t = 0.5 + 0.5 * std::tanh(2 * t);
          break;
        }
        case 4:  // concentric rings
          t = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * (freq * std::hypot(u0 - ox, v0 - oy) + phase));
          break;
        case 5: {  // zigzag
          const double tri = std::abs(fract(freq * u) - 0.5);
          t = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * (freq * v + 1.5 * tri + phase));
          break;
        }
        case 6: {  // thin grid lines
          const double du = std::abs(fract(freq * u + phase) - 0.5), dv = std::abs(fract(freq * v + phase) - 0.5);
          t = std::max(du, dv) > 0.4 ? 1.0 : 0.0;
          break;
        }
        default:  // radial spokes
          t = 0.5 + 0.5 * std::sin(2.0 * std::round(freq) * std::atan2(v0 - oy, u0 - ox) + 2 * std::numbers::pi * phase);
          break;
      }
      for (Index c = 0; c < 3; ++c) {
        img.at(c, y, x) = static_cast<float>(a[static_cast<std::size_t>(c)] * (1.0 - t) + b[static_cast<std::size_t>(c)] * t);
      }
    }
  }
  add_noise_and_clamp(img, 0.03, rng);
  return img;
}

template <typename Render>
Dataset generate(Index classes, Index limit, Index count, std::uint64_t seed, Index size, const char* name, Render render) {
  if (classes < 2 || classes > limit) {
    throw ConfigError(std::string(name) + " supports 2.." + std::to_string(limit) + " classes, got " + std::to_string(classes));
  }
  if (count <= 0) throw ConfigError(std::string(name) + " count must be positive");
  if (size < 4) throw ConfigError(std::string(name) + " image size must be at least 4");
  Dataset data;
  data.channels = 3;
  data.size = size;
  data.num_classes = classes;
  data.records.reserve(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) {
    Rng rng = Rng::derive(seed, {tag(Stream::kCorpus), static_cast<std::uint64_t>(i)});
    const Index label = i % classes;
    data.records.push_back({render(label, size, rng), label});
  }
  data.stats = compute_stats(data.records);
  return data;
}

// Little-endian encoding independent of the host byte order.
template <typename U>
void put(std::ostream& out, U v) {
  std::array<char, sizeof(U)> bytes;
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  out.write(bytes.data(), bytes.size());
}

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  template <typename U>
  U get(const char* field) {
    std::array<unsigned char, sizeof(U)> bytes;
    if (!in_.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
      throw ParseError(std::string("unexpected end of file reading ") + field, offset_);
    }
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    offset_ += sizeof(U);
    return static_cast<U>(v);
  }

  /// Reads n bytes or throws at `start` naming `what`.
  void bytes(char* dst, std::size_t n, const std::string& what, std::uint64_t start) {
    if (!in_.read(dst, static_cast<std::streamsize>(n))) throw ParseError(what, start);
    offset_ += n;
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }
  std::uint64_t offset() const { return offset_; }

 private:
  std::istream& in_;
  std::uint64_t offset_ = 0;
};

}  // namespace

Dataset synthetic_shapes(Index classes, Index count, std::uint64_t seed, Index size) {
  return generate(classes, kMaxShapeClasses, count, seed, size, "synthetic_shapes", render_shape);
}

Dataset tiny_natural(Index classes, Index count, std::uint64_t seed, Index size) {
  return generate(classes, kMaxTextureClasses, count, seed, size, "tiny_natural", render_texture);
}

void write_dataset(std::ostream& out, const Dataset& data) {
  if (data.size <= 0 || data.size > 0xffff || data.channels <= 0 || data.channels > 0xff) {
    throw ConfigError("dataset size or channel count does not fit the file header");
  }
  const bool labeled = data.labeled();
  out.write("MBDS", 4);
  put<std::uint32_t>(out, kDatasetVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(data.records.size()));
  put<std::uint16_t>(out, static_cast<std::uint16_t>(data.size));
  put<std::uint8_t>(out, static_cast<std::uint8_t>(data.channels));
  put<std::uint8_t>(out, labeled ? 1 : 0);
  for (const auto& r : data.records) {
    if (r.image.size != data.size || r.image.channels != data.channels) throw ShapeError("record shape differs from dataset shape");
    for (Index i = 0; i < r.image.pixels.size(); ++i) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(r.image.pixels[i]));
    if (labeled) {
      if (*r.label < 0 || *r.label > 0xffff) throw ConfigError("label does not fit in 16 bits");
      put<std::uint16_t>(out, static_cast<std::uint16_t>(*r.label));
    }
  }
  if (!out) throw Error("failed writing dataset");
}

void write_dataset(const std::string& path, const Dataset& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_dataset(out, data);
}

Dataset read_dataset(std::istream& in) {
  Reader reader(in);
  std::array<char, 4> magic{};
  reader.bytes(magic.data(), 4, "file too short for magic", 0);
  if (std::memcmp(magic.data(), "MBDS", 4) != 0) throw ParseError("bad magic, expected MBDS", 0);
  const auto version = reader.get<std::uint32_t>("version");
  if (version != kDatasetVersion) throw ParseError("unsupported dataset version " + std::to_string(version), 4);
  const auto count = reader.get<std::uint32_t>("record count");
  const auto size = reader.get<std::uint16_t>("image size");
  if (size == 0) throw ParseError("image size must be positive", 12);
  const auto channels = reader.get<std::uint8_t>("channel count");
  if (channels == 0) throw ParseError("channel count must be positive", 14);
  const auto label_flag = reader.get<std::uint8_t>("label flag");
  if (label_flag > 1) throw ParseError("label flag must be 0 or 1", 15);

  Dataset data;
  data.size = size;
  data.channels = channels;
  const Index values = static_cast<Index>(channels) * size * size;
  const std::uint64_t record_bytes = 4 * static_cast<std::uint64_t>(values) + (label_flag ? 2 : 0);
  std::vector<char> buffer(static_cast<std::size_t>(record_bytes));
  Index max_label = -1;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint64_t start = reader.offset();
    reader.bytes(buffer.data(), buffer.size(),
                 "record " + std::to_string(i) + " of " + std::to_string(count) + " is missing or truncated", start);
    ImageRecord rec{Image(channels, size), std::nullopt};
    for (Index k = 0; k < values; ++k) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(buffer[static_cast<std::size_t>(4 * k + b)])) << (8 * b);
      const float v = std::bit_cast<float>(bits);
      if (!(v >= 0.0f && v <= 1.0f)) throw ParseError("pixel value outside [0, 1]", start + 4 * static_cast<std::uint64_t>(k));
      rec.image.pixels[k] = v;
    }
    if (label_flag) {
      const auto lo = static_cast<unsigned char>(buffer[buffer.size() - 2]);
      const auto hi = static_cast<unsigned char>(buffer[buffer.size() - 1]);
      rec.label = static_cast<Index>(lo | (hi << 8));
      max_label = std::max(max_label, *rec.label);
    }
    data.records.push_back(std::move(rec));
  }
  if (!reader.at_end()) throw ParseError("trailing bytes after " + std::to_string(count) + " records", reader.offset());
  data.num_classes = max_label + 1;
  if (!data.records.empty()) data.stats = compute_stats(data.records);
  return data;
}

Dataset read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open dataset file " + path);
  return read_dataset(in);
}

void DatasetConfig::validate() const {
  if (source.empty()) throw ConfigError("dataset source must not be empty");
  if (count <= 0) throw ConfigError("dataset count must be positive");
  if (test_count < 0) throw ConfigError("dataset test_count must be non-negative");
  if (image_size < 4) throw ConfigError("dataset image_size must be at least 4");
  if (source == "synthetic_shapes" && (classes < 2 || classes > kMaxShapeClasses)) {
    throw ConfigError("dataset classes must lie in [2, " + std::to_string(kMaxShapeClasses) + "] for synthetic_shapes");
  }
  if (source == "tiny_natural" && (classes < 2 || classes > kMaxTextureClasses)) {
    throw ConfigError("dataset classes must lie in [2, " + std::to_string(kMaxTextureClasses) + "] for tiny_natural");
  }
}

DatasetSplit load_dataset(const DatasetConfig& config) {
  config.validate();
  DatasetSplit split;
  const std::uint64_t test_seed = mix64(config.seed ^ 0x7e57da7a5e7ULL);
  if (config.source == "synthetic_shapes" || config.source == "tiny_natural") {
    auto gen = config.source == "synthetic_shapes" ? synthetic_shapes : tiny_natural;
    split.train = gen(config.classes, config.count, config.seed, config.image_size);
    if (config.test_count > 0) split.test = gen(config.classes, config.test_count, test_seed, config.image_size);
  } else {
    split.train = read_dataset(config.source);
    if (!config.test_source.empty()) {
      split.test = read_dataset(config.test_source);
    } else if (config.test_count > 0) {
      const auto n = static_cast<Index>(split.train.records.size());
      if (config.test_count >= n) throw ConfigError("dataset test_count must be smaller than the file's record count");
      split.test = split.train;
      split.test.records.assign(split.train.records.end() - config.test_count, split.train.records.end());
      split.train.records.resize(static_cast<std::size_t>(n - config.test_count));
    }
    if (split.train.records.empty()) throw ConfigError("dataset file " + config.source + " has no records");
    split.train.stats = compute_stats(split.train.records);
    split.test.num_classes = split.train.num_classes = std::max(split.train.num_classes, split.test.num_classes);
  }
  split.test.stats = split.train.stats;
  split.test.size = split.train.size;
  split.test.channels = split.train.channels;
  return split;
}

AugmentationPolicy AugmentationPolicy::view1() {
  AugmentationPolicy p;
  p.id = PolicyId::kView1;
  p.blur_p = 1.0;
  p.solarize_p = 0.0;
  return p;
}

AugmentationPolicy AugmentationPolicy::view2(bool with_solarize) {
  AugmentationPolicy p;
  p.id = PolicyId::kView2;
  p.blur_p = 0.1;
  p.solarize_p = with_solarize ? 0.2 : 0.0;
  return p;
}

AugmentationPolicy AugmentationPolicy::crop_flip() {
  AugmentationPolicy p;
  p.id = PolicyId::kEval;
  p.jitter_p = 0.0;
  p.grayscale_p = 0.0;
  return p;
}

AugmentationPolicy AugmentationPolicy::identity(PolicyId id) {
  AugmentationPolicy p;
  p.id = id;
  p.scale_min = p.scale_max = 1.0;
  p.ratio_min = p.ratio_max = 1.0;
  p.flip_p = p.jitter_p = p.grayscale_p = p.blur_p = p.solarize_p = 0.0;
  return p;
}

void AugmentationPolicy::validate() const {
  auto prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1]");
  };
  if (!(scale_min > 0.0 && scale_min <= scale_max && scale_max <= 1.0)) {
    throw ConfigError("crop scale range must satisfy 0 < scale_min <= scale_max <= 1");
  }
  if (!(ratio_min > 0.0 && ratio_min <= ratio_max)) throw ConfigError("crop ratio range must satisfy 0 < ratio_min <= ratio_max");
  prob(flip_p, "flip_p");
  prob(jitter_p, "jitter_p");
  prob(grayscale_p, "grayscale_p");
  prob(blur_p, "blur_p");
  prob(solarize_p, "solarize_p");
  if (brightness < 0 || contrast < 0 || saturation < 0 || !(hue >= 0 && hue <= 0.5)) {
    throw ConfigError("color jitter strengths must be non-negative and hue at most 0.5");
  }
  if (!(blur_sigma_min > 0 && blur_sigma_min <= blur_sigma_max)) throw ConfigError("blur sigma range must be positive and ordered");
}

CropBox sample_crop(Index size, const AugmentationPolicy& policy, Rng& rng) {
  const double area = static_cast<double>(size * size);
  const double log_lo = std::log(policy.ratio_min), log_hi = std::log(policy.ratio_max);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(policy.scale_min, policy.scale_max);
    const double ratio = std::exp(rng.uniform(log_lo, log_hi));
    const auto w = static_cast<Index>(std::lround(std::sqrt(target * ratio)));
    const auto h = static_cast<Index>(std::lround(std::sqrt(target / ratio)));
    if (w > 0 && h > 0 && w <= size && h <= size) {
      const auto top = static_cast<Index>(rng.below(static_cast<std::uint64_t>(size - h + 1)));
      const auto left = static_cast<Index>(rng.below(static_cast<std::uint64_t>(size - w + 1)));
      return {top, left, h, w};
    }
  }
  // Centre crop of the whole image, narrowed to the admissible aspect range.
  Index w = size, h = size;
  if (1.0 < policy.ratio_min) {
    h = static_cast<Index>(std::lround(static_cast<double>(w) / policy.ratio_min));
  } else if (1.0 > policy.ratio_max) {
    w = static_cast<Index>(std::lround(static_cast<double>(h) * policy.ratio_max));
  }
  return {(size - h) / 2, (size - w) / 2, h, w};
}

Image resize_box(const Image& image, const CropBox& box, Index out) {
  Image dst(image.channels, out);
  const double sy = static_cast<double>(box.height) / static_cast<double>(out);
  const double sx = static_cast<double>(box.width) / static_cast<double>(out);
  const auto last = static_cast<double>(image.size - 1);
  for (Index oy = 0; oy < out; ++oy) {
    const double fy = std::clamp(static_cast<double>(box.top) + (static_cast<double>(oy) + 0.5) * sy - 0.5, 0.0, last);
    const auto y0 = static_cast<Index>(fy);
    const Index y1 = std::min(y0 + 1, image.size - 1);
    const auto wy = static_cast<float>(fy - static_cast<double>(y0));
    for (Index ox = 0; ox < out; ++ox) {
      const double fx = std::clamp(static_cast<double>(box.left) + (static_cast<double>(ox) + 0.5) * sx - 0.5, 0.0, last);
      const auto x0 = static_cast<Index>(fx);
      const Index x1 = std::min(x0 + 1, image.size - 1);
      const auto wx = static_cast<float>(fx - static_cast<double>(x0));
      for (Index c = 0; c < image.channels; ++c) {
        const float top = image.at(c, y0, x0) * (1.0f - wx) + image.at(c, y0, x1) * wx;
        const float bottom = image.at(c, y1, x0) * (1.0f - wx) + image.at(c, y1, x1) * wx;
        dst.at(c, oy, ox) = top * (1.0f - wy) + bottom * wy;
      }
    }
  }
  return dst;
}

Image random_resized_crop(const Image& image, const AugmentationPolicy& policy, Index out, Rng& rng) {
  return resize_box(image, sample_crop(image.size, policy, rng), out);
}

void horizontal_flip(Image& image) {
  for (Index c = 0; c < image.channels; ++c) {
    for (Index y = 0; y < image.size; ++y) {
      auto row = image.pixels.segment((c * image.size + y) * image.size, image.size);
      row.reverseInPlace();
    }
  }
}

namespace {

void clamp01(Image& image) { image.pixels = image.pixels.max(0.0f).min(1.0f); }

Eigen::ArrayXf gray_plane(const Image& image) {
  if (image.channels != 3) return image.plane(0);
  return 0.299f * image.plane(0) + 0.587f * image.plane(1) + 0.114f * image.plane(2);
}

}  // namespace

void adjust_brightness(Image& image, double factor) {
  image.pixels *= static_cast<float>(factor);
  clamp01(image);
}

void adjust_contrast(Image& image, double factor) {
  const float m = gray_plane(image).mean();
  image.pixels = (image.pixels - m) * static_cast<float>(factor) + m;
  clamp01(image);
}

void adjust_saturation(Image& image, double factor) {
  if (image.channels != 3) return;
  const Eigen::ArrayXf g = gray_plane(image);
  for (Index c = 0; c < 3; ++c) image.plane(c) = (image.plane(c) - g) * static_cast<float>(factor) + g;
  clamp01(image);
}

void adjust_hue(Image& image, double shift) {
  if (image.channels != 3 || shift == 0.0) return;
  const Index n = image.size * image.size;
  for (Index i = 0; i < n; ++i) {
    float& r = image.pixels[i];
    float& g = image.pixels[n + i];
    float& b = image.pixels[2 * n + i];
    const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
    const float delta = mx - mn;
    if (delta <= 0.0f) continue;  // grey pixels have no hue
    float h;
    if (mx == r) {
      h = (g - b) / delta;
    } else if (mx == g) {
      h = 2.0f + (b - r) / delta;
    } else {
      h = 4.0f + (r - g) / delta;
    }
    h = static_cast<float>(fract(static_cast<double>(h) / 6.0 + shift)) * 6.0f;
    const float s = delta / mx, v = mx;
    const int sector = std::min(static_cast<int>(h), 5);
    const float f = h - static_cast<float>(sector);
    const float p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (sector) {
      case 0: r = v, g = t, b = p; break;
      case 1: r = q, g = v, b = p; break;
      case 2: r = p, g = v, b = t; break;
      case 3: r = p, g = q, b = v; break;
      case 4: r = t, g = p, b = v; break;
      default: r = v, g = p, b = q; break;
    }
  }
  clamp01(image);
}

void to_grayscale(Image& image) {
  if (image.channels != 3) return;
  const Eigen::ArrayXf g = gray_plane(image);
  for (Index c = 0; c < 3; ++c) image.plane(c) = g;
}

void gaussian_blur(Image& image, double sigma) {
  const double side = std::exp(-1.0 / (2.0 * sigma * sigma));
  const auto w_side = static_cast<float>(side / (1.0 + 2.0 * side));
  const auto w_mid = static_cast<float>(1.0 / (1.0 + 2.0 * side));
  const Index s = image.size;
  if (s < 2) return;
  auto reflect = [s](Index i) { return i < 0 ? -i : (i >= s ? 2 * s - 2 - i : i); };
  Image tmp = image;
  for (Index c = 0; c < image.channels; ++c) {
    for (Index y = 0; y < s; ++y) {
      for (Index x = 0; x < s; ++x) {
        tmp.at(c, y, x) = w_side * image.at(c, y, reflect(x - 1)) + w_mid * image.at(c, y, x) + w_side * image.at(c, y, reflect(x + 1));
      }
    }
    for (Index y = 0; y < s; ++y) {
      for (Index x = 0; x < s; ++x) {
        image.at(c, y, x) = w_side * tmp.at(c, reflect(y - 1), x) + w_mid * tmp.at(c, y, x) + w_side * tmp.at(c, reflect(y + 1), x);
      }
    }
  }
}

void solarize(Image& image, float threshold) {
  image.pixels = (image.pixels >= threshold).select(1.0f - image.pixels, image.pixels);
}

void normalize(Image& image, const ChannelStats& stats) {
  if (static_cast<Index>(stats.mean.size()) != image.channels || stats.stddev.size() != stats.mean.size()) {
    throw ShapeError("normalization statistics do not match the image channels");
  }
  for (Index c = 0; c < image.channels; ++c) {
    const auto m = static_cast<float>(stats.mean[static_cast<std::size_t>(c)]);
    const auto inv = static_cast<float>(1.0 / stats.stddev[static_cast<std::size_t>(c)]);
    image.plane(c) = (image.plane(c) - m) * inv;
  }
}

Image augment(const Image& image, const AugmentationPolicy& policy, Index out, Rng& rng) {
  // Every draw happens unconditionally and in a fixed order, so one
  // transform's probability never shifts another transform's randomness.
  const CropBox box = sample_crop(image.size, policy, rng);
  const bool flip = rng.bernoulli(policy.flip_p);
  const bool jitter = rng.bernoulli(policy.jitter_p);
  std::array<int, 4> order{0, 1, 2, 3};
  for (int i = 3; i > 0; --i) std::swap(order[static_cast<std::size_t>(i)], order[rng.below(static_cast<std::uint64_t>(i + 1))]);
  const double brightness = rng.uniform(1 - policy.brightness, 1 + policy.brightness);
  const double contrast = rng.uniform(1 - policy.contrast, 1 + policy.contrast);
  const double saturation = rng.uniform(1 - policy.saturation, 1 + policy.saturation);
  const double hue = rng.uniform(-policy.hue, policy.hue);
  const bool gray = rng.bernoulli(policy.grayscale_p);
  const bool blur = rng.bernoulli(policy.blur_p);
  const double sigma = rng.uniform(policy.blur_sigma_min, policy.blur_sigma_max);
  const bool solar = rng.bernoulli(policy.solarize_p);

  Image img = resize_box(image, box, out);
  if (flip) horizontal_flip(img);
  if (jitter) {
    for (int op : order) {
      switch (op) {
        case 0: adjust_brightness(img, std::max(brightness, 0.0)); break;
        case 1: adjust_contrast(img, std::max(contrast, 0.0)); break;
        case 2: adjust_saturation(img, std::max(saturation, 0.0)); break;
        default: adjust_hue(img, hue); break;
      }
    }
  }
  if (gray) to_grayscale(img);
  if (blur) gaussian_blur(img, sigma);
  if (solar) solarize(img);
  return img;
}

Image eval_transform(const Image& image, Index out, const ChannelStats& stats) {
  const auto resized = static_cast<Index>(std::lround(1.14 * static_cast<double>(out)));
  const Image big = resize_box(image, {0, 0, image.size, image.size}, resized);
  const Index off = (resized - out) / 2;
  Image img = resize_box(big, {off, off, out, out}, out);
  normalize(img, stats);
  return img;
}

ViewPair two_view_augment(const ImageRecord& record, const AugmentationPolicy& first, const AugmentationPolicy& second,
                          const ChannelStats& stats, std::uint64_t seed, Index epoch, Index index, Index out) {
  const bool same_id = first.id == second.id;
  auto stream = [&](const AugmentationPolicy& p, std::uint64_t slot) {
    const std::uint64_t key = same_id ? 100 + slot : static_cast<std::uint64_t>(p.id);
    return Rng::derive(seed, {tag(Stream::kAugment), static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(index), key});
  };
  Rng r1 = stream(first, 0), r2 = stream(second, 1);
  ViewPair pair{augment(record.image, first, out, r1), augment(record.image, second, out, r2), index};
  normalize(pair.v1, stats);
  normalize(pair.v2, stats);
  return pair;
}

std::vector<Index> epoch_order(Index n, std::uint64_t seed, Index epoch) {
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng = Rng::derive(seed, {tag(Stream::kShuffle), static_cast<std::uint64_t>(epoch)});
  for (Index i = n - 1; i > 0; --i) std::swap(order[static_cast<std::size_t>(i)], order[rng.below(static_cast<std::uint64_t>(i + 1))]);
  return order;
}

template <typename Scalar>
Tensor<Scalar> stack_images(const std::vector<Image>& images) {
  if (images.empty()) throw ContractError("stack_images needs at least one image");
  const Index c = images.front().channels, s = images.front().size, per = c * s * s;
  Tensor<Scalar> out = Tensor<Scalar>::uninitialized({static_cast<Index>(images.size()), c, s, s});
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].channels != c || images[i].size != s) throw ShapeError("stack_images: images differ in shape");
    out.data().segment(static_cast<Index>(i) * per, per) = images[i].pixels.template cast<Scalar>();
  }
  return out;
}

PairLoader::PairLoader(const Dataset& data, AugmentationPolicy first, AugmentationPolicy second, Index batch_size,
                       std::uint64_t seed, Index out_size)
    : data_(&data),
      first_(first),
      second_(second),
      batch_size_(batch_size),
      batches_per_epoch_(0),
      seed_(seed),
      out_size_(out_size > 0 ? out_size : data.size) {
  first_.validate();
  second_.validate();
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  batches_per_epoch_ = static_cast<Index>(data.records.size()) / batch_size;
  if (batches_per_epoch_ == 0) {
    throw ConfigError("batch_size " + std::to_string(batch_size) + " exceeds the dataset size " + std::to_string(data.records.size()));
  }
}

template <typename Scalar>
PairBatch<Scalar> PairLoader::batch(Index step) const {
  if (step < 0) throw IndexError("loader step must be non-negative");
  const Index epoch = step / batches_per_epoch_, within = step % batches_per_epoch_;
  const auto order = epoch_order(static_cast<Index>(data_->records.size()), seed_, epoch);
  std::vector<Image> v1, v2;
  PairBatch<Scalar> out;
  for (Index i = 0; i < batch_size_; ++i) {
    const Index idx = order[static_cast<std::size_t>(within * batch_size_ + i)];
    ViewPair pair = two_view_augment(data_->records[static_cast<std::size_t>(idx)], first_, second_, data_->stats, seed_, epoch, idx, out_size_);
    v1.push_back(std::move(pair.v1));
    v2.push_back(std::move(pair.v2));
    out.sources.push_back(idx);
  }
  out.view1 = stack_images<Scalar>(v1);
  out.view2 = stack_images<Scalar>(v2);
  return out;
}

template Tensor<float> stack_images(const std::vector<Image>&);
template Tensor<double> stack_images(const std::vector<Image>&);
template PairBatch<float> PairLoader::batch(Index) const;
template PairBatch<double> PairLoader::batch(Index) const;

}  // namespace moby
