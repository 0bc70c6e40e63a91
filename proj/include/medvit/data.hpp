#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "medvit/tensor.hpp"

namespace medvit::data {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split { Train, Val, Test };

std::string split_name(Split split);
Split parse_split(const std::string& name);

struct Dataset {
  Tensor images;  // [N,C,H,W] in [0,1]
  std::vector<int> labels;
  Split split = Split::Train;
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t side() const { return images.dim(2); }
  /// Throws DataError if labels or pixel values break the invariants.
  void validate() const;
  /// Gathers the listed samples into a fresh batch.
  std::pair<Tensor, std::vector<int>> batch(const std::vector<std::size_t>& indices) const;
  Tensor image(std::size_t i) const;
};

/// Raw IDX payload: big-endian extents and unsigned bytes.
struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> bytes;
};

/// Accepts u8 magics 0x801 (labels), 0x803 (N,H,W), 0x804 (N,H,W,C).
IdxArray read_idx(std::istream& in);
void write_idx(std::ostream& out, const IdxArray& array);

struct IdxOptions {
  bool to_rgb = false;      // replicate single-channel images to three channels
  std::size_t resize = 0;   // nearest-neighbour resize to this side (0 keeps it)
  std::size_t classes = 0;  // 0 infers max label + 1
  Split split = Split::Train;
};

Dataset load_idx(const std::string& images_path, const std::string& labels_path, const IdxOptions& opts = {});
/// Pixels are rounded to the nearest byte; 1-channel sets use 0x803 and
/// multi-channel sets 0x804.
void save_idx(const Dataset& dataset, const std::string& images_path, const std::string& labels_path);

/// Nearest-neighbour resize of [N,C,H,W] to a square side.
Tensor resize_nearest(const Tensor& images, std::size_t side);

/// Classes are fixed random images; samples are clipped noisy copies.
Dataset make_prototype_dataset(std::size_t n, std::size_t classes, std::size_t channels, std::size_t side,
                               double noise, std::uint64_t seed, std::uint64_t prototype_seed);

/// Binary task whose label is the sign of the channel-0 mean shift; a
/// margin of at least the noise amplitude makes it linearly separable.
Dataset make_separable_dataset(std::size_t n, std::size_t channels, std::size_t side, double margin,
                               std::uint64_t seed);

}  // namespace medvit::data
