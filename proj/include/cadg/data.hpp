#pragma once

// Synthetic multi-domain image classification data.
//
// A class is a shape identity (disk, square, cross, triangle, then regular
// polygons with 5..12 sides). A domain is a style transform layered on top of
// the rendered shape; the geometry that defines the label is the same in every
// domain. Every sample is rendered from its own RNG stream keyed by
// (seed, domain, class, index), so the dataset is a pure function of its
// parameters.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cadg/binary_io.hpp"
#include "cadg/tensor.hpp"

namespace cadg {

struct GeneratorParams {
  std::size_t classes = 4;
  std::size_t domains = 4;
  std::size_t per_cell = 200;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 1;
  std::uint64_t seed = 0;
};

inline constexpr std::size_t kMaxShapeClasses = 12;
inline constexpr std::size_t kDomainStyles = 5;

inline const char* shape_name(std::size_t cls) {
  static const char* names[kMaxShapeClasses] = {"disk",     "square",   "cross",   "triangle",
                                                "pentagon", "hexagon",  "heptagon", "octagon",
                                                "nonagon",  "decagon",  "hendecagon", "dodecagon"};
  return cls < kMaxShapeClasses ? names[cls] : "?";
}

inline const char* style_name(std::size_t domain) {
  static const char* names[kDomainStyles] = {"plain", "inverted", "sinusoid", "gradient",
                                             "salt-pepper"};
  return names[domain % kDomainStyles];
}

struct Sample {
  int domain = 0;
  int label = 0;
  std::vector<double> pixels;  // H*W*C, row-major, values in [0,1]
};

class DomainDataset {
 public:
  DomainDataset() = default;

  DomainDataset(std::size_t classes, std::size_t domains, std::size_t height, std::size_t width,
                std::size_t channels, std::uint64_t seed, std::vector<Sample> samples)
      : classes_(classes), domains_(domains), height_(height), width_(width), channels_(channels),
        seed_(seed), samples_(std::move(samples)) {
    rebuild_index();
  }

  std::size_t classes() const { return classes_; }
  std::size_t domains() const { return domains_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t channels() const { return channels_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t size() const { return samples_.size(); }
  std::size_t pixels_per_image() const { return height_ * width_ * channels_; }

  /// Sample ids of one (domain, class) cell.
  const std::vector<std::size_t>& cell(std::size_t domain, std::size_t cls) const {
    return index_.at(domain).at(cls);
  }

  std::vector<std::size_t> domain_ids(std::size_t domain) const {
    std::vector<std::size_t> ids;
    for (const auto& c : index_.at(domain)) ids.insert(ids.end(), c.begin(), c.end());
    std::sort(ids.begin(), ids.end());
    return ids;
  }

  /// Raw access without touching the access counters (serialization, tests).
  const Sample& peek(std::size_t id) const { return samples_.at(id); }
  const std::vector<Sample>& samples() const { return samples_; }

  /// Counted access; every training/evaluation read goes through here.
  const Sample& fetch(std::size_t id) const {
    const Sample& s = samples_.at(id);
    ++access_counts_[static_cast<std::size_t>(s.domain)];
    return s;
  }

  /// [B,H,W,C] tensor of the given samples plus their labels.
  std::pair<Tensor, std::vector<int>> batch(std::span<const std::size_t> ids) const {
    const std::size_t px = pixels_per_image();
    std::vector<double> values(ids.size() * px);
    std::vector<int> labels(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const Sample& s = fetch(ids[i]);
      std::copy(s.pixels.begin(), s.pixels.end(), values.begin() + static_cast<std::ptrdiff_t>(i * px));
      labels[i] = s.label;
    }
    return {Tensor(Shape{ids.size(), height_, width_, channels_}, values), std::move(labels)};
  }

  const std::vector<std::uint64_t>& access_counts() const { return access_counts_; }
  void reset_access_counts() const { std::fill(access_counts_.begin(), access_counts_.end(), 0); }

  bool operator==(const DomainDataset& o) const {
    if (classes_ != o.classes_ || domains_ != o.domains_ || height_ != o.height_ ||
        width_ != o.width_ || channels_ != o.channels_ || seed_ != o.seed_ ||
        samples_.size() != o.samples_.size()) {
      return false;
    }
    for (std::size_t i = 0; i < samples_.size(); ++i) {
      const auto& a = samples_[i];
      const auto& b = o.samples_[i];
      if (a.domain != b.domain || a.label != b.label || a.pixels.size() != b.pixels.size() ||
          std::memcmp(a.pixels.data(), b.pixels.data(), a.pixels.size() * sizeof(double)) != 0) {
        return false;
      }
    }
    return true;
  }

 private:
  void rebuild_index() {
    index_.assign(domains_, std::vector<std::vector<std::size_t>>(classes_));
    const std::size_t px = pixels_per_image();
    for (std::size_t i = 0; i < samples_.size(); ++i) {
      const auto& s = samples_[i];
      if (s.domain < 0 || static_cast<std::size_t>(s.domain) >= domains_ || s.label < 0 ||
          static_cast<std::size_t>(s.label) >= classes_) {
        throw FormatError("sample " + std::to_string(i) + " has domain/label out of range");
      }
      if (s.pixels.size() != px) throw FormatError("sample " + std::to_string(i) + " has wrong pixel count");
      index_[static_cast<std::size_t>(s.domain)][static_cast<std::size_t>(s.label)].push_back(i);
    }
    for (std::size_t d = 0; d < domains_; ++d) {
      for (std::size_t c = 0; c < classes_; ++c) {
        if (index_[d][c].empty()) {
          throw FormatError("domain " + std::to_string(d) + " has no samples of class " +
                            std::to_string(c));
        }
      }
    }
    access_counts_.assign(domains_, 0);
  }

  std::size_t classes_ = 0, domains_ = 0, height_ = 0, width_ = 0, channels_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<Sample> samples_;
  std::vector<std::vector<std::vector<std::size_t>>> index_;
  mutable std::vector<std::uint64_t> access_counts_;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t x) {
  // splitmix64 finalizer
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b,
                                 std::uint64_t c) {
  return mix_seed(mix_seed(mix_seed(mix_seed(seed) ^ a) ^ b) ^ c);
}

/// Whether (u, v), in shape-local coordinates, lies inside shape `cls` of radius r.
inline bool inside_shape(std::size_t cls, double u, double v, double r) {
  switch (cls) {
    case 0:
      return u * u + v * v <= r * r;
    case 1:
      return std::abs(u) <= 0.8 * r && std::abs(v) <= 0.8 * r;
    case 2:
      return (std::abs(u) <= r && std::abs(v) <= 0.3 * r) ||
             (std::abs(u) <= 0.3 * r && std::abs(v) <= r);
    default: {
      const std::size_t sides = cls == 3 ? 3 : cls + 1;  // class 4 -> pentagon
      const double sector = 2.0 * std::numbers::pi / static_cast<double>(sides);
      double theta = std::atan2(v, u);
      if (theta < 0) theta += 2.0 * std::numbers::pi;
      const double local = std::fmod(theta, sector) - sector / 2.0;
      const double edge = r * std::cos(sector / 2.0) / std::cos(local);
      return std::sqrt(u * u + v * v) <= edge;
    }
  }
}

inline std::vector<double> render_sample(const GeneratorParams& p, std::size_t domain,
                                         std::size_t cls, std::size_t index) {
  std::mt19937_64 rng(stream_seed(p.seed, domain, cls, index));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double h = static_cast<double>(p.height), w = static_cast<double>(p.width);
  const double size = std::min(h, w);
  const double cy = h * (0.38 + 0.24 * unit(rng));
  const double cx = w * (0.38 + 0.24 * unit(rng));
  const double r = size * (0.22 + 0.1 * unit(rng));
  const double angle = 0.5 * (unit(rng) - 0.5);  // small jitter; orientation stays recognizable
  const double fg = 0.75 + 0.25 * unit(rng);
  const double bg = 0.15 * unit(rng);
  const double ca = std::cos(angle), sa = std::sin(angle);

  std::vector<double> gray(p.height * p.width);
  for (std::size_t y = 0; y < p.height; ++y) {
    for (std::size_t x = 0; x < p.width; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          const double dy = static_cast<double>(y) + 0.25 + 0.5 * sy - cy;
          const double dx = static_cast<double>(x) + 0.25 + 0.5 * sx - cx;
          hits += inside_shape(cls, ca * dx + sa * dy, -sa * dx + ca * dy, r) ? 1 : 0;
        }
      }
      gray[y * p.width + x] = bg + (fg - bg) * hits / 4.0;
    }
  }

  switch (domain % kDomainStyles) {
    case 0:
      break;
    case 1:
      for (auto& g : gray) g = 1.0 - g;
      break;
    case 2: {
      const double fy = 2.0 + 3.0 * unit(rng), fx = 2.0 + 3.0 * unit(rng);
      const double phase = 2.0 * std::numbers::pi * unit(rng);
      for (std::size_t y = 0; y < p.height; ++y) {
        for (std::size_t x = 0; x < p.width; ++x) {
          const double wave = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi *
                                                       (fy * y / h + fx * x / w) + phase);
          auto& g = gray[y * p.width + x];
          g = 0.65 * g + 0.35 * wave;
        }
      }
      break;
    }
    case 3: {
      const double dir = 2.0 * std::numbers::pi * unit(rng);
      const double gy = std::sin(dir), gx = std::cos(dir);
      for (std::size_t y = 0; y < p.height; ++y) {
        for (std::size_t x = 0; x < p.width; ++x) {
          const double t = 0.5 + 0.5 * (gy * (2.0 * y / h - 1.0) + gx * (2.0 * x / w - 1.0)) /
                                     std::numbers::sqrt2;
          auto& g = gray[y * p.width + x];
          g = g + 0.6 * t;
        }
      }
      break;
    }
    case 4:
      for (auto& g : gray) {
        const double roll = unit(rng);
        if (roll < 0.06) g = 0.0;
        else if (roll < 0.12) g = 1.0;
      }
      break;
  }

  std::vector<double> pixels(p.height * p.width * p.channels);
  for (std::size_t i = 0; i < gray.size(); ++i) {
    const double g = std::clamp(gray[i], 0.0, 1.0);
    for (std::size_t c = 0; c < p.channels; ++c) pixels[i * p.channels + c] = g;
  }
  return pixels;
}

}  // namespace detail

inline DomainDataset generate_synthetic(const GeneratorParams& p) {
  if (p.classes < 2) throw ConfigError("generate: need at least 2 classes");
  if (p.classes > kMaxShapeClasses) {
    throw ConfigError("generate: " + std::to_string(p.classes) + " classes exceeds the shape vocabulary of " +
                      std::to_string(kMaxShapeClasses));
  }
  if (p.domains < 3) throw ConfigError("generate: need at least 3 domains (2 sources + 1 held out)");
  if (p.per_cell == 0 || p.height == 0 || p.width == 0 || p.channels == 0) {
    throw ConfigError("generate: per_cell and image extents must be positive");
  }
  std::vector<Sample> samples;
  samples.reserve(p.domains * p.classes * p.per_cell);
  for (std::size_t d = 0; d < p.domains; ++d) {
    for (std::size_t c = 0; c < p.classes; ++c) {
      for (std::size_t j = 0; j < p.per_cell; ++j) {
        samples.push_back({static_cast<int>(d), static_cast<int>(c), detail::render_sample(p, d, c, j)});
      }
    }
  }
  return DomainDataset(p.classes, p.domains, p.height, p.width, p.channels, p.seed,
                       std::move(samples));
}

// ---------------------------------------------------------------------------
// Splits

struct SplitSpec {
  double val_fraction = 0.2;
  std::uint64_t split_seed = 0;
};

/// A subset of a dataset restricted to some domains, indexed by (slot, class)
/// where slot enumerates `domains` in order. The dataset must outlive the view.
struct DatasetView {
  const DomainDataset* dataset = nullptr;
  std::vector<std::size_t> domains;
  std::vector<std::vector<std::vector<std::size_t>>> cells;  // [slot][class] -> ids

  std::vector<std::size_t> ids() const {
    std::vector<std::size_t> out;
    for (const auto& slot : cells) {
      for (const auto& c : slot) out.insert(out.end(), c.begin(), c.end());
    }
    std::sort(out.begin(), out.end());
    return out;
  }
  std::size_t size() const { return ids().size(); }
};

/// Per source domain and class, a seeded shuffle puts round(val_fraction * n)
/// ids in validation and the rest in training.
inline std::pair<DatasetView, DatasetView> split(const DomainDataset& ds, const SplitSpec& spec,
                                                 std::span<const std::size_t> source_domains) {
  if (!(spec.val_fraction > 0.0 && spec.val_fraction < 1.0)) {
    throw ConfigError("split: val_fraction must lie in (0,1)");
  }
  DatasetView train{&ds, {source_domains.begin(), source_domains.end()}, {}};
  DatasetView val{&ds, {source_domains.begin(), source_domains.end()}, {}};
  for (std::size_t d : source_domains) {
    if (d >= ds.domains()) throw ConfigError("split: domain " + std::to_string(d) + " out of range");
    auto& train_slot = train.cells.emplace_back(ds.classes());
    auto& val_slot = val.cells.emplace_back(ds.classes());
    for (std::size_t c = 0; c < ds.classes(); ++c) {
      std::vector<std::size_t> ids = ds.cell(d, c);
      std::mt19937_64 rng(detail::stream_seed(spec.split_seed, d, c, 0x5u));
      std::shuffle(ids.begin(), ids.end(), rng);
      const auto n_val = static_cast<std::size_t>(std::llround(spec.val_fraction * static_cast<double>(ids.size())));
      if (n_val >= ids.size()) {
        throw ConfigError("split: domain " + std::to_string(d) + " class " + std::to_string(c) +
                          " has no training samples left");
      }
      val_slot[c].assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_val));
      train_slot[c].assign(ids.begin() + static_cast<std::ptrdiff_t>(n_val), ids.end());
      std::sort(val_slot[c].begin(), val_slot[c].end());
      std::sort(train_slot[c].begin(), train_slot[c].end());
    }
  }
  return {std::move(train), std::move(val)};
}

// ---------------------------------------------------------------------------
// Pair sampling

struct PairBatch {
  Tensor x_p;
  Tensor x_q;
  std::vector<int> y;
  std::vector<int> domain_p;
  std::vector<int> domain_q;
};

/// Draws B independent same-class pairs from two distinct training domains:
/// class uniform, unordered domain pair uniform, orientation uniform, and
/// samples uniform within their cells.
template <typename Rng>
PairBatch sample_pair_batch(const DatasetView& view, std::size_t batch, Rng& rng) {
  const std::size_t m = view.domains.size();
  if (m < 2) throw ConfigError("sample_pair_batch: need at least 2 training domains");
  if (batch == 0) throw ConfigError("sample_pair_batch: batch must be positive");
  const std::size_t k = view.dataset->classes();
  const std::size_t pairs = m * (m - 1) / 2;
  std::uniform_int_distribution<std::size_t> pick_class(0, k - 1);
  std::uniform_int_distribution<std::size_t> pick_pair(0, pairs - 1);
  std::bernoulli_distribution flip(0.5);

  std::vector<std::size_t> ids_p(batch), ids_q(batch);
  PairBatch out;
  out.y.resize(batch);
  out.domain_p.resize(batch);
  out.domain_q.resize(batch);
  for (std::size_t r = 0; r < batch; ++r) {
    const std::size_t cls = pick_class(rng);
    std::size_t pair = pick_pair(rng), a = 0;
    while (pair >= m - 1 - a) {
      pair -= m - 1 - a;
      ++a;
    }
    std::size_t b = a + 1 + pair;
    if (flip(rng)) std::swap(a, b);
    const auto& cell_p = view.cells[a][cls];
    const auto& cell_q = view.cells[b][cls];
    if (cell_p.empty() || cell_q.empty()) throw ConfigError("sample_pair_batch: empty training cell");
    ids_p[r] = cell_p[std::uniform_int_distribution<std::size_t>(0, cell_p.size() - 1)(rng)];
    ids_q[r] = cell_q[std::uniform_int_distribution<std::size_t>(0, cell_q.size() - 1)(rng)];
    out.y[r] = static_cast<int>(cls);
    out.domain_p[r] = static_cast<int>(view.domains[a]);
    out.domain_q[r] = static_cast<int>(view.domains[b]);
  }
  out.x_p = view.dataset->batch(ids_p).first;
  out.x_q = view.dataset->batch(ids_q).first;
  return out;
}

/// Uniform draw of single samples from the pooled view (the ERM input).
template <typename Rng>
std::vector<std::size_t> sample_ids(const std::vector<std::size_t>& pool, std::size_t batch, Rng& rng) {
  if (pool.empty()) throw ConfigError("sample_ids: empty pool");
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::vector<std::size_t> out(batch);
  for (auto& id : out) id = pool[pick(rng)];
  return out;
}

// ---------------------------------------------------------------------------
// Dataset file:
//   "CADGDS1" | u32 classes | u32 domains | u32 H | u32 W | u32 C | u64 seed | u64 count
//   | count x { u32 domain | u32 label | f64 pixels[H*W*C] }

inline constexpr std::string_view kDatasetMagic = "CADGDS1";

inline void write_dataset(std::ostream& os, const DomainDataset& ds) {
  io::write_magic(os, kDatasetMagic);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.classes()));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.domains()));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.height()));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.width()));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.channels()));
  io::write_le<std::uint64_t>(os, ds.seed());
  io::write_le<std::uint64_t>(os, ds.size());
  for (const auto& s : ds.samples()) {
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.domain));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.label));
    for (double v : s.pixels) io::write_f64(os, v);
  }
}

inline DomainDataset read_dataset(std::istream& is) {
  io::expect_magic(is, kDatasetMagic);
  const auto classes = io::read_le<std::uint32_t>(is, "classes");
  const auto domains = io::read_le<std::uint32_t>(is, "domains");
  const auto h = io::read_le<std::uint32_t>(is, "height");
  const auto w = io::read_le<std::uint32_t>(is, "width");
  const auto c = io::read_le<std::uint32_t>(is, "channels");
  const auto seed = io::read_le<std::uint64_t>(is, "seed");
  const auto count = io::read_le<std::uint64_t>(is, "sample count");
  if (classes == 0 || domains == 0 || h == 0 || w == 0 || c == 0 || h > 4096 || w > 4096 || c > 16) {
    throw FormatError("dataset header has implausible extents");
  }
  const std::size_t px = std::size_t{h} * w * c;
  std::vector<Sample> samples;
  for (std::uint64_t i = 0; i < count; ++i) {
    Sample s;
    s.domain = static_cast<int>(io::read_le<std::uint32_t>(is, "sample domain"));
    s.label = static_cast<int>(io::read_le<std::uint32_t>(is, "sample label"));
    s.pixels.resize(px);
    for (auto& v : s.pixels) v = io::read_f64(is, "pixels");
    samples.push_back(std::move(s));
  }
  io::expect_eof(is);
  return DomainDataset(classes, domains, h, w, c, seed, std::move(samples));
}

inline void save_dataset(const std::filesystem::path& path, const DomainDataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_dataset(os, ds);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline DomainDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return read_dataset(is);
}

}  // namespace cadg
