#pragma once

// Client datasets: a synthetic multi-domain image generator where every domain
// shares the label marginal but sees differently transformed inputs, IDX file
// ingestion, Gaussian input corruption, and mini-batching.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "trfeddis/specfun.hpp"
#include "trfeddis/tensor.hpp"

namespace trfeddis::data {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IdxError : public DataError {
 public:
  using DataError::DataError;
};
class IdxBadMagic : public IdxError {
 public:
  using IdxError::IdxError;
};
class IdxTruncated : public IdxError {
 public:
  using IdxError::IdxError;
};
class IdxUnsupportedType : public IdxError {
 public:
  using IdxError::IdxError;
};

/// Per-domain input transform, applied in this order: rotation about the image
/// centre, per-channel scale, brightness offset, additive pixel noise.
struct DomainSpec {
  double rotation_deg = 0.0;
  std::vector<double> channel_scale;  // one per channel; empty means all 1
  double brightness = 0.0;
  double noise_sigma = 0.0;

  void validate(std::size_t channels) const;
  friend bool operator==(const DomainSpec&, const DomainSpec&) = default;
};

struct Dataset {
  nd::Tensor inputs;                // [N, ...]
  std::vector<std::size_t> labels;  // [N], each < num_classes
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  nd::Shape sample_shape() const;
  void validate() const;
};

/// One client's data: disjoint train and test samples from the same domain.
struct DomainData {
  DomainSpec spec;
  Dataset train;
  Dataset test;
};

struct SyntheticConfig {
  std::uint64_t base_seed = 1;
  std::size_t num_domains = 4;
  std::size_t train_per_domain = 2000;
  std::size_t test_per_domain = 500;
  std::size_t num_classes = 5;
  std::size_t image_size = 12;
  std::size_t channels = 3;
  double blob_sigma = 1.6;       // template blob width in pixels
  double ring_radius = 0.3;      // blob centre distance from image centre, fraction of size
  double jitter = 0.6;           // per-sample centre jitter (pixels, std)
  double amplitude_spread = 0.3; // per-sample amplitude drawn from 1 +- spread/2
  /// One spec per domain; empty selects default_domains(num_domains, channels).
  std::vector<DomainSpec> domains;

  void validate() const;
};

/// Rotations in steps of 90 degrees, channel-scale permutations, rising
/// brightness and noise. Domain 0 is close to the untransformed templates.
std::vector<DomainSpec> default_domains(std::size_t num_domains, std::size_t channels);

/// Generates one DomainData per domain. Class counts are identical in every
/// domain and split; output depends only on the config.
std::vector<DomainData> make_synthetic(const SyntheticConfig& config);

/// Rotates each [H,W] plane of a [C,H,W] image about its centre by bilinear
/// resampling; pixels sourced from outside the image are 0.
nd::Tensor rotate_image(const nd::Tensor& image, double degrees);

enum class IdxType : std::uint8_t { kUnsignedByte = 0x08, kFloat32 = 0x0D };

/// Parses a big-endian IDX file. Byte payloads are scaled to [0,1].
nd::Tensor read_idx(const std::filesystem::path& path);

/// Byte-typed IDX file as unscaled integers (label files).
std::vector<std::size_t> read_idx_labels(const std::filesystem::path& path);

/// Writes `t` as IDX. kUnsignedByte stores round(255 * clamp(v, 0, 1)).
void write_idx(const std::filesystem::path& path, const nd::Tensor& t,
               IdxType type = IdxType::kFloat32);

/// Writes class indices as a one-dimensional byte IDX file.
void write_idx_labels(const std::filesystem::path& path, const std::vector<std::size_t>& labels);

/// Images from an IDX file plus labels from another. Rank-3 image files
/// ([N,H,W]) gain a channel axis.
Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                         std::size_t num_classes);

/// x + sigma * N(0,1) per element, no clipping. Returns an exact copy when sigma == 0.
nd::Tensor corrupt_gaussian(const nd::Tensor& x, double sigma, specfun::RngStream& rng);

struct Batch {
  nd::Tensor inputs;
  std::vector<std::size_t> labels;
};

enum class BatchMode { kTrain, kEval };

/// Index lists for one epoch. Train mode drops the final short batch; eval
/// mode keeps it. `rng` is only consulted when shuffling.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size,
                                                    specfun::RngStream* rng, bool shuffle,
                                                    BatchMode mode);

/// Copies the selected samples into a contiguous batch.
Batch gather(const Dataset& ds, const std::vector<std::size_t>& indices);

/// All batches of one epoch.
std::vector<Batch> batches(const Dataset& ds, std::size_t batch_size, specfun::RngStream* rng,
                           bool shuffle, BatchMode mode);

}  // namespace trfeddis::data
