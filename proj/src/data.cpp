#include "trfeddis/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>

namespace trfeddis::data {

using specfun::RngStream;

void DomainSpec::validate(std::size_t channels) const {
  if (!channel_scale.empty() && channel_scale.size() != channels) {
    throw DataError("domain spec: " + std::to_string(channel_scale.size()) + " channel scales for " +
                    std::to_string(channels) + " channels");
  }
  for (double s : channel_scale) {
    if (!(s > 0.0)) throw DataError("domain spec: channel scales must be positive");
  }
  if (!(noise_sigma >= 0.0)) throw DataError("domain spec: noise sigma must be >= 0");
  if (!std::isfinite(rotation_deg) || !std::isfinite(brightness)) {
    throw DataError("domain spec: rotation and brightness must be finite");
  }
}

nd::Shape Dataset::sample_shape() const {
  if (inputs.rank() == 0) return {};
  return nd::Shape(inputs.shape().begin() + 1, inputs.shape().end());
}

void Dataset::validate() const {
  if (inputs.rank() < 2 || inputs.dim(0) != labels.size()) {
    throw DataError("dataset: inputs " + nd::to_string(inputs.shape()) + " do not match " +
                    std::to_string(labels.size()) + " labels");
  }
  for (auto y : labels) {
    if (y >= num_classes) throw DataError("dataset: label " + std::to_string(y) + " out of range");
  }
}

void SyntheticConfig::validate() const {
  if (num_domains < 2) throw DataError("synthetic: need at least 2 domains");
  if (num_classes < 2) throw DataError("synthetic: need at least 2 classes");
  if (image_size < 4) throw DataError("synthetic: image size must be >= 4");
  if (channels == 0) throw DataError("synthetic: channels must be >= 1");
  if (train_per_domain == 0) throw DataError("synthetic: empty training split");
  if (!(blob_sigma > 0.0) || !(ring_radius >= 0.0) || !(jitter >= 0.0) ||
      !(amplitude_spread >= 0.0) || amplitude_spread >= 2.0) {
    throw DataError("synthetic: invalid template parameters");
  }
  if (!domains.empty() && domains.size() != num_domains) {
    throw DataError("synthetic: " + std::to_string(domains.size()) + " domain specs for " +
                    std::to_string(num_domains) + " domains");
  }
  for (const auto& d : domains) d.validate(channels);
}

std::vector<DomainSpec> default_domains(std::size_t num_domains, std::size_t channels) {
  std::vector<DomainSpec> out(num_domains);
  for (std::size_t d = 0; d < num_domains; ++d) {
    auto& s = out[d];
    s.rotation_deg = 90.0 * static_cast<double>(d % 4);
    s.channel_scale.resize(channels);
    for (std::size_t c = 0; c < channels; ++c) {
      // cycle a falling ramp so each domain weights the channels differently
      const std::size_t r = (c + d) % channels;
      s.channel_scale[c] = 1.0 - 0.5 * static_cast<double>(r) / static_cast<double>(std::max<std::size_t>(channels, 2) - 1);
    }
    s.brightness = 0.1 * static_cast<double>(d);
    s.noise_sigma = 0.05 + 0.05 * static_cast<double>(d % 4);
  }
  return out;
}

nd::Tensor rotate_image(const nd::Tensor& image, double degrees) {
  if (image.rank() != 3) throw nd::ShapeError("rotate_image: expected [C,H,W], got " + nd::to_string(image.shape()));
  const std::size_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  const double rad = degrees * std::numbers::pi / 180.0;
  double cs = std::cos(rad), sn = std::sin(rad);
  // snap so quarter turns land exactly on the grid
  if (std::abs(cs) < 1e-12) cs = 0.0;
  if (std::abs(sn) < 1e-12) sn = 0.0;
  const double cy = 0.5 * static_cast<double>(h - 1), cx = 0.5 * static_cast<double>(w - 1);
  nd::Tensor out(image.shape());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      // inverse map: output pixel pulls from the source rotated by -angle
      const double sx = cs * dx + sn * dy + cx;
      const double sy = -sn * dx + cs * dy + cy;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double ax = sx - fx, ay = sy - fy;
      const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
      for (std::size_t c = 0; c < ch; ++c) {
        const float* plane = image.data().data() + c * h * w;
        auto px = [&](long yy, long xx) -> double {
          if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) return 0.0;
          return plane[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
        };
        double v = (1 - ay) * ((1 - ax) * px(y0, x0) + (ax > 0 ? ax * px(y0, x0 + 1) : 0.0));
        if (ay > 0) v += ay * ((1 - ax) * px(y0 + 1, x0) + (ax > 0 ? ax * px(y0 + 1, x0 + 1) : 0.0));
        out[(c * h + y) * w + x] = static_cast<float>(v);
      }
    }
  }
  return out;
}

namespace {

// Balanced labels in a stream-shuffled order: class k appears floor(n/K) or
// floor(n/K)+1 times, with the remainder going to the lowest classes.
std::vector<std::size_t> balanced_labels(std::size_t n, std::size_t k, RngStream& rng) {
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i % k;
  for (std::size_t i = n; i > 1; --i) std::swap(labels[i - 1], labels[rng.below(i)]);
  return labels;
}

Dataset render_split(const SyntheticConfig& cfg, const DomainSpec& spec, std::size_t n, RngStream& rng) {
  const std::size_t ch = cfg.channels, sz = cfg.image_size, plane = sz * sz;
  Dataset ds;
  ds.num_classes = cfg.num_classes;
  ds.labels = balanced_labels(n, cfg.num_classes, rng);
  ds.inputs = nd::Tensor({n, ch, sz, sz});
  const double centre = 0.5 * static_cast<double>(sz - 1);
  const double radius = cfg.ring_radius * static_cast<double>(sz);
  const double inv2s2 = 1.0 / (2.0 * cfg.blob_sigma * cfg.blob_sigma);
  nd::Tensor img({ch, sz, sz});
  for (std::size_t i = 0; i < n; ++i) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(ds.labels[i]) /
                         static_cast<double>(cfg.num_classes);
    const double bx = centre + radius * std::cos(angle) + cfg.jitter * specfun::standard_normal(rng);
    const double by = centre + radius * std::sin(angle) + cfg.jitter * specfun::standard_normal(rng);
    const double amp = 1.0 + cfg.amplitude_spread * (rng.uniform() - 0.5);
    for (std::size_t y = 0; y < sz; ++y) {
      for (std::size_t x = 0; x < sz; ++x) {
        const double dx = static_cast<double>(x) - bx, dy = static_cast<double>(y) - by;
        const float v = static_cast<float>(amp * std::exp(-(dx * dx + dy * dy) * inv2s2));
        for (std::size_t c = 0; c < ch; ++c) img[c * plane + y * sz + x] = v;
      }
    }
    nd::Tensor rotated = spec.rotation_deg == 0.0 ? img : rotate_image(img, spec.rotation_deg);
    float* dst = ds.inputs.data().data() + i * ch * plane;
    for (std::size_t c = 0; c < ch; ++c) {
      const double scale = spec.channel_scale.empty() ? 1.0 : spec.channel_scale[c];
      for (std::size_t p = 0; p < plane; ++p) {
        double v = scale * rotated[c * plane + p] + spec.brightness;
        if (spec.noise_sigma > 0.0) v += spec.noise_sigma * specfun::standard_normal(rng);
        dst[c * plane + p] = static_cast<float>(v);
      }
    }
  }
  return ds;
}

}  // namespace

std::vector<DomainData> make_synthetic(const SyntheticConfig& config) {
  config.validate();
  const auto specs = config.domains.empty() ? default_domains(config.num_domains, config.channels)
                                            : config.domains;
  std::vector<DomainData> out;
  out.reserve(config.num_domains);
  for (std::size_t d = 0; d < config.num_domains; ++d) {
    RngStream rng(config.base_seed, specfun::stream_key(specfun::StreamPurpose::kData, d));
    DomainData dd;
    dd.spec = specs[d];
    dd.train = render_split(config, specs[d], config.train_per_domain, rng);
    dd.test = render_split(config, specs[d], config.test_per_domain, rng);
    out.push_back(std::move(dd));
  }
  return out;
}

// ---------------------------------------------------------------------------
// IDX

namespace {

struct IdxContents {
  IdxType type;
  nd::Shape dims;
  std::vector<unsigned char> payload;
};

std::uint32_t read_be32(const unsigned char* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) |
         std::uint32_t{p[3]};
}

void write_be32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

IdxContents parse_idx(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError("idx: cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = " in " + path.string();
  if (bytes.size() < 4) throw IdxTruncated("idx: header truncated" + where);
  if (bytes[0] != 0 || bytes[1] != 0) throw IdxBadMagic("idx: bad magic" + where);
  IdxContents c;
  if (bytes[2] == 0x08) {
    c.type = IdxType::kUnsignedByte;
  } else if (bytes[2] == 0x0D) {
    c.type = IdxType::kFloat32;
  } else {
    char code[8];
    std::snprintf(code, sizeof code, "0x%02X", bytes[2]);
    throw IdxUnsupportedType(std::string("idx: unsupported type code ") + code + where);
  }
  const std::size_t ndim = bytes[3];
  if (ndim == 0) throw IdxBadMagic("idx: zero dimensions" + where);
  if (bytes.size() < 4 + 4 * ndim) throw IdxTruncated("idx: dimension table truncated" + where);
  for (std::size_t i = 0; i < ndim; ++i) c.dims.push_back(read_be32(bytes.data() + 4 + 4 * i));
  const std::size_t elem = c.type == IdxType::kFloat32 ? 4 : 1;
  const std::size_t need = nd::numel(c.dims) * elem;
  const std::size_t offset = 4 + 4 * ndim;
  if (bytes.size() - offset < need) {
    throw IdxTruncated("idx: payload has " + std::to_string(bytes.size() - offset) + " bytes, expected " +
                       std::to_string(need) + where);
  }
  c.payload.assign(bytes.begin() + static_cast<long>(offset), bytes.begin() + static_cast<long>(offset + need));
  return c;
}

}  // namespace

nd::Tensor read_idx(const std::filesystem::path& path) {
  auto c = parse_idx(path);
  nd::Tensor out(c.dims);
  if (c.type == IdxType::kUnsignedByte) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(c.payload[i]) / 255.0f;
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) {
      const std::uint32_t bits = read_be32(c.payload.data() + 4 * i);
      std::memcpy(&out[i], &bits, 4);
    }
  }
  return out;
}

std::vector<std::size_t> read_idx_labels(const std::filesystem::path& path) {
  auto c = parse_idx(path);
  if (c.type != IdxType::kUnsignedByte || c.dims.size() != 1) {
    throw IdxUnsupportedType("idx: label file must be a one-dimensional byte array: " + path.string());
  }
  return {c.payload.begin(), c.payload.end()};
}

void write_idx(const std::filesystem::path& path, const nd::Tensor& t, IdxType type) {
  if (t.rank() == 0 || t.rank() > 255) throw IdxError("idx: cannot store rank " + std::to_string(t.rank()));
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IdxError("idx: cannot write " + path.string());
  const unsigned char head[4] = {0, 0, static_cast<unsigned char>(type), static_cast<unsigned char>(t.rank())};
  os.write(reinterpret_cast<const char*>(head), 4);
  for (auto d : t.shape()) write_be32(os, static_cast<std::uint32_t>(d));
  if (type == IdxType::kUnsignedByte) {
    std::vector<char> buf(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const float v = std::clamp(t[i], 0.0f, 1.0f);
      buf[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f)));
    }
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  } else {
    for (float v : t.data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      write_be32(os, bits);
    }
  }
  if (!os) throw IdxError("idx: write failed for " + path.string());
}

void write_idx_labels(const std::filesystem::path& path, const std::vector<std::size_t>& labels) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IdxError("idx: cannot write " + path.string());
  const unsigned char head[4] = {0, 0, 0x08, 1};
  os.write(reinterpret_cast<const char*>(head), 4);
  write_be32(os, static_cast<std::uint32_t>(labels.size()));
  for (auto y : labels) {
    if (y > 255) throw IdxError("idx: label " + std::to_string(y) + " does not fit a byte");
    os.put(static_cast<char>(y));
  }
  if (!os) throw IdxError("idx: write failed for " + path.string());
}

Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                         std::size_t num_classes) {
  Dataset ds;
  ds.inputs = read_idx(images);
  if (ds.inputs.rank() == 3) {
    const auto& s = ds.inputs.shape();
    ds.inputs = ds.inputs.reshaped({s[0], 1, s[1], s[2]});
  }
  ds.labels = read_idx_labels(labels);
  ds.num_classes = num_classes;
  ds.validate();
  return ds;
}

nd::Tensor corrupt_gaussian(const nd::Tensor& x, double sigma, RngStream& rng) {
  if (!(sigma >= 0.0)) throw DataError("corrupt_gaussian: sigma must be >= 0");
  nd::Tensor out = x;
  if (sigma == 0.0) return out;
  for (auto& v : out.data()) v = static_cast<float>(v + sigma * specfun::standard_normal(rng));
  return out;
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size,
                                                    RngStream* rng, bool shuffle, BatchMode mode) {
  if (batch_size == 0) throw DataError("batches: batch size must be >= 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle) {
    if (rng == nullptr) throw DataError("batches: shuffling needs a random stream");
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng->below(i)]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    if (end - start < batch_size && mode == BatchMode::kTrain) break;
    out.emplace_back(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end));
  }
  return out;
}

Batch gather(const Dataset& ds, const std::vector<std::size_t>& indices) {
  const std::size_t per = ds.size() == 0 ? 0 : ds.inputs.size() / ds.size();
  nd::Shape shape = ds.sample_shape();
  shape.insert(shape.begin(), indices.size());
  Batch b{nd::Tensor(shape), {}};
  b.labels.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::size_t i = indices[r];
    if (i >= ds.size()) throw DataError("gather: index " + std::to_string(i) + " out of range");
    std::copy_n(ds.inputs.data().begin() + static_cast<long>(i * per), per,
                b.inputs.data().begin() + static_cast<long>(r * per));
    b.labels.push_back(ds.labels[i]);
  }
  return b;
}

std::vector<Batch> batches(const Dataset& ds, std::size_t batch_size, RngStream* rng, bool shuffle,
                           BatchMode mode) {
  std::vector<Batch> out;
  for (const auto& idx : batch_indices(ds.size(), batch_size, rng, shuffle, mode)) out.push_back(gather(ds, idx));
  return out;
}

}  // namespace trfeddis::data
