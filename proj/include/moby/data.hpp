#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <iosfwd>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "moby/random.hpp"
#include "moby/tensor.hpp"

namespace moby {

/// Channel-major (C, H, W) float image with values in [0, 1] before
/// normalization.
struct Image {
  Index channels = 3;
  Index size = 0;
  Eigen::ArrayXf pixels;

  Image() = default;
  Image(Index channels_, Index size_) : channels(channels_), size(size_), pixels(Eigen::ArrayXf::Zero(channels_ * size_ * size_)) {}

  float& at(Index c, Index y, Index x) { return pixels[(c * size + y) * size + x]; }
  float at(Index c, Index y, Index x) const { return pixels[(c * size + y) * size + x]; }
  auto plane(Index c) { return pixels.segment(c * size * size, size * size); }
  auto plane(Index c) const { return pixels.segment(c * size * size, size * size); }
};

struct ImageRecord {
  Image image;
  std::optional<Index> label;
};

/// Per-channel mean and standard deviation of raw pixels.
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

struct Dataset {
  Index channels = 3;
  Index size = 32;
  Index num_classes = 0;  // 0 when unlabeled
  std::vector<ImageRecord> records;
  ChannelStats stats;

  bool labeled() const;
};

ChannelStats compute_stats(const std::vector<ImageRecord>& records);

/// Colored geometric shapes, one shape family per class, with position,
/// scale, rotation, color, background and noise as nuisance factors.
/// Labels cycle through the classes so every class is equally frequent.
Dataset synthetic_shapes(Index classes, Index count, std::uint64_t seed, Index size = 32);

/// Procedural textures (stripes, checks, dots, blobs, rings, ...), one
/// family per class, with random scale, phase, orientation and palette.
Dataset tiny_natural(Index classes, Index count, std::uint64_t seed, Index size = 32);

inline constexpr Index kMaxShapeClasses = 10;
inline constexpr Index kMaxTextureClasses = 8;

// Dataset file, little-endian:
//   "MBDS" | u32 version | u32 count | u16 size | u8 channels | u8 label_flag
//   then per record: channels*size*size float32 pixels (C, H, W) [+ u16 label]
inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::uint64_t kDatasetHeaderBytes = 16;

void write_dataset(std::ostream& out, const Dataset& data);
void write_dataset(const std::string& path, const Dataset& data);
/// Throws ParseError carrying the byte offset of the first bad field.
Dataset read_dataset(std::istream& in);
Dataset read_dataset(const std::string& path);

struct DatasetConfig {
  std::string source = "synthetic_shapes";  // builtin id or dataset file path
  std::string test_source;                 // optional file with held-out records
  Index classes = 8;
  Index count = 5000;
  Index test_count = 1000;
  Index image_size = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

struct DatasetSplit {
  Dataset train;
  Dataset test;
};

/// Builtin sources generate train and test from disjoint streams. A file
/// source without test_source holds out its last test_count records.
/// Normalization statistics always come from the training part.
DatasetSplit load_dataset(const DatasetConfig& config);

enum class PolicyId : std::uint64_t { kView1 = 1, kView2 = 2, kEval = 3 };

struct AugmentationPolicy {
  PolicyId id = PolicyId::kView1;
  double scale_min = 0.08;
  double scale_max = 1.0;
  double ratio_min = 3.0 / 4.0;
  double ratio_max = 4.0 / 3.0;
  double flip_p = 0.5;
  double jitter_p = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.2;
  double hue = 0.1;
  double grayscale_p = 0.2;
  double blur_p = 0.0;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 2.0;
  double solarize_p = 0.0;

  /// Blur always, never solarize.
  static AugmentationPolicy view1();
  /// Rare blur, occasional solarization.
  static AugmentationPolicy view2(bool solarize = true);
  /// Random resized crop and flip only, as used to train linear probes.
  static AugmentationPolicy crop_flip();
  /// Every probability zero and the crop pinned to the full image.
  static AugmentationPolicy identity(PolicyId id);

  void validate() const;
};

/// Crop rectangle in source pixels.
struct CropBox {
  Index top = 0;
  Index left = 0;
  Index height = 0;
  Index width = 0;

  bool operator==(const CropBox&) const = default;
};

/// Area fraction uniform in [scale_min, scale_max], log aspect ratio uniform
/// in [log ratio_min, log ratio_max]; after 10 rejected draws, the largest
/// centred box with an admissible aspect ratio.
CropBox sample_crop(Index size, const AugmentationPolicy& policy, Rng& rng);

/// Bilinear resize of a box to out x out (pixel centres aligned, edges clamped).
Image resize_box(const Image& image, const CropBox& box, Index out);

Image random_resized_crop(const Image& image, const AugmentationPolicy& policy, Index out, Rng& rng);

void horizontal_flip(Image& image);
void adjust_brightness(Image& image, double factor);
void adjust_contrast(Image& image, double factor);
void adjust_saturation(Image& image, double factor);
void adjust_hue(Image& image, double shift);
void to_grayscale(Image& image);
/// 3x3 Gaussian kernel, reflected borders.
void gaussian_blur(Image& image, double sigma);
void solarize(Image& image, float threshold = 0.5f);
void normalize(Image& image, const ChannelStats& stats);

/// Crop, flip, jitter, grayscale, blur, solarize per the policy; no normalization.
Image augment(const Image& image, const AugmentationPolicy& policy, Index out, Rng& rng);

/// Resize to round(1.14 * out), centre crop out x out, normalize.
Image eval_transform(const Image& image, Index out, const ChannelStats& stats);

struct ViewPair {
  Image v1;
  Image v2;
  Index source = 0;
};

/// Each view draws from a stream keyed by (seed, epoch, index, policy id),
/// so swapping the two policies swaps the views and nothing else. Two
/// policies sharing an id fall back to keying on the view slot.
ViewPair two_view_augment(const ImageRecord& record, const AugmentationPolicy& first, const AugmentationPolicy& second,
                          const ChannelStats& stats, std::uint64_t seed, Index epoch, Index index, Index out);

/// Deterministic permutation of [0, n) for an epoch.
std::vector<Index> epoch_order(Index n, std::uint64_t seed, Index epoch);

/// Stacks equally sized images into [b, C, s, s].
template <typename Scalar>
Tensor<Scalar> stack_images(const std::vector<Image>& images);

template <typename Scalar>
struct PairBatch {
  Tensor<Scalar> view1;
  Tensor<Scalar> view2;
  std::vector<Index> sources;
};

/// Batches of view pairs over shuffled epochs (last partial batch dropped).
/// Batch contents depend only on (seed, global step), never on call order.
class PairLoader {
 public:
  PairLoader(const Dataset& data, AugmentationPolicy first, AugmentationPolicy second, Index batch_size,
             std::uint64_t seed, Index out_size = 0);

  Index batch_size() const { return batch_size_; }
  Index batches_per_epoch() const { return batches_per_epoch_; }

  template <typename Scalar>
  PairBatch<Scalar> batch(Index step) const;

 private:
  const Dataset* data_;
  AugmentationPolicy first_;
  AugmentationPolicy second_;
  Index batch_size_;
  Index batches_per_epoch_;
  std::uint64_t seed_;
  Index out_size_;
};

/// Produces loader batches for steps [begin, end) on a worker thread and
/// hands them over through a bounded FIFO. Output equals calling
/// loader.batch(step) in order.
template <typename Scalar>
class Prefetcher {
 public:
  Prefetcher(const PairLoader& loader, Index begin, Index end, std::size_t capacity = 2)
      : loader_(loader), next_(begin), end_(end), capacity_(capacity), worker_([this] { run(); }) {}

  Prefetcher(const Prefetcher&) = delete;
  Prefetcher& operator=(const Prefetcher&) = delete;

  ~Prefetcher() {
    {
      std::lock_guard lock(mutex_);
      stop_ = true;
    }
    cv_.notify_all();
    worker_.join();
  }

  /// Next batch in step order; std::nullopt once all steps were delivered.
  std::optional<PairBatch<Scalar>> next() {
    std::unique_lock lock(mutex_);
    cv_.wait(lock, [&] { return !ready_.empty() || done_; });
    if (error_) std::rethrow_exception(error_);
    if (ready_.empty()) return std::nullopt;
    PairBatch<Scalar> out = std::move(ready_.front());
    ready_.pop_front();
    cv_.notify_all();
    return out;
  }

 private:
  void run() {
    try {
      for (Index step = next_; step < end_; ++step) {
        PairBatch<Scalar> b = loader_.template batch<Scalar>(step);
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [&] { return ready_.size() < capacity_ || stop_; });
        if (stop_) return;
        ready_.push_back(std::move(b));
        cv_.notify_all();
      }
    } catch (...) {
      std::lock_guard lock(mutex_);
      error_ = std::current_exception();
    }
    std::lock_guard lock(mutex_);
    done_ = true;
    cv_.notify_all();
  }

  const PairLoader& loader_;
  Index next_;
  Index end_;
  std::size_t capacity_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<PairBatch<Scalar>> ready_;
  std::exception_ptr error_;
  bool stop_ = false;
  bool done_ = false;
  std::thread worker_;
};

}  // namespace moby
