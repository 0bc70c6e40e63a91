#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "medvit/model.hpp"
#include "medvit/train.hpp"

namespace medvit {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Version 1 stores values as 32-bit floats, version 2 as 64-bit doubles.
/// Both are little-endian.
enum class Precision : std::uint32_t { F32 = 1, F64 = 2 };

struct Checkpoint {
  Precision precision = Precision::F64;
  std::string config;  // JSON model document
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
};

inline constexpr char kCheckpointMagic[9] = "MVT2CKPT";

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Model state (parameters and buffers), plus optimizer moments under
/// "opt.m.<name>" / "opt.v.<name>" and the counters "opt.step" and
/// "opt.epoch" when an optimizer is given.
Checkpoint make_checkpoint(const MedViTModel& model, const train::AdamW* optimizer = nullptr,
                           std::size_t epoch = 0, Precision precision = Precision::F64);
/// Copies every model tensor out of the checkpoint. Throws naming the first
/// tensor that is missing, unknown or of the wrong shape.
void restore_model(MedViTModel& model, const Checkpoint& ckpt);
/// Restores moments and step count; returns the stored epoch.
std::size_t restore_optimizer(train::AdamW& optimizer, const Checkpoint& ckpt);

/// Convenience for a trainer: model, optimizer and epoch in one file.
void save_training_state(const std::string& path, train::Trainer& trainer, Precision precision = Precision::F64);
void load_training_state(const std::string& path, train::Trainer& trainer);

}  // namespace medvit
