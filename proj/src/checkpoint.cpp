#include "medvit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>

#include "medvit/config.hpp"

namespace medvit {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

namespace {

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const char* what) {
  T v;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
  }
  return v;
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in, const char* what) {
  const auto n = get<std::uint32_t>(in, what);
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
  return s;
}

constexpr const char* kOpt = "opt.";

}  // namespace

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  out.write(kCheckpointMagic, 8);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.precision));
  put_string(out, ckpt.config);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    put_string(out, name);
    if (t.rank() > 255) throw CheckpointError("tensor '" + name + "' has too many axes");
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : t.values()) {
      if (ckpt.precision == Precision::F32) {
        put<float>(out, static_cast<float>(v));
      } else {
        put<double>(out, v);
      }
    }
  }
  if (!out) throw CheckpointError("checkpoint write failed");
}

Checkpoint read_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8)) throw CheckpointError("checkpoint truncated while reading magic");
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw CheckpointError("not a checkpoint (bad magic)");
  Checkpoint ckpt;
  const auto version = get<std::uint32_t>(in, "version");
  if (version != 1 && version != 2) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  ckpt.precision = static_cast<Precision>(version);
  ckpt.config = get_string(in, "config");
  const auto count = get<std::uint32_t>(in, "tensor count");
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = get_string(in, "tensor name");
    if (!seen.insert(name).second) throw CheckpointError("duplicate tensor '" + name + "' in checkpoint");
    const auto rank = get<std::uint8_t>(in, "tensor rank");
    Shape shape;
    for (std::uint8_t a = 0; a < rank; ++a) shape.push_back(get<std::uint32_t>(in, "tensor extent"));
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) {
      v = ckpt.precision == Precision::F32 ? static_cast<double>(get<float>(in, "tensor values"))
                                           : get<double>(in, "tensor values");
    }
    ckpt.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write '" + path + "'");
  write_checkpoint(out, ckpt);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open '" + path + "'");
  return read_checkpoint(in);
}

Checkpoint make_checkpoint(const MedViTModel& model, const train::AdamW* optimizer, std::size_t epoch,
                           Precision precision) {
  Checkpoint ckpt;
  ckpt.precision = precision;
  ckpt.config = model_config_json(model.config());
  for (const auto& p : model.state()) ckpt.tensors.emplace_back(p.name, p.tensor.clone());
  if (optimizer != nullptr) {
    const auto& opt = *optimizer;
    const auto& params = opt.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      ckpt.tensors.emplace_back(std::string(kOpt) + "m." + params[i].name, opt.first_moments()[i].clone());
      ckpt.tensors.emplace_back(std::string(kOpt) + "v." + params[i].name, opt.second_moments()[i].clone());
    }
    ckpt.tensors.emplace_back("opt.step", Tensor::scalar(static_cast<double>(opt.steps())));
    ckpt.tensors.emplace_back("opt.epoch", Tensor::scalar(static_cast<double>(epoch)));
  }
  return ckpt;
}

void restore_model(MedViTModel& model, const Checkpoint& ckpt) {
  const ParameterList state = model.state();
  std::set<std::string> names;
  for (const auto& p : state) names.insert(p.name);
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.rfind(kOpt, 0) == 0) continue;
    if (!names.count(name)) throw CheckpointError("checkpoint tensor '" + name + "' is unknown to this model");
  }
  for (const auto& p : state) {
    const Tensor* src = ckpt.find(p.name);
    if (src == nullptr) throw CheckpointError("checkpoint lacks tensor '" + p.name + "'");
    if (src->shape() != p.tensor.shape()) {
      throw CheckpointError("tensor '" + p.name + "' has shape " + to_string(src->shape()) + " in the checkpoint but " +
                            to_string(p.tensor.shape()) + " in the model");
    }
  }
  for (const auto& p : state) {
    Tensor dst = p.tensor;
    const Tensor* src = ckpt.find(p.name);
    std::copy(src->values().begin(), src->values().end(), dst.values().begin());
  }
}

std::size_t restore_optimizer(train::AdamW& optimizer, const Checkpoint& ckpt) {
  const auto& params = optimizer.params();
  auto fetch = [&](const std::string& name, const Shape& shape) -> const Tensor& {
    const Tensor* t = ckpt.find(name);
    if (t == nullptr) throw CheckpointError("checkpoint lacks tensor '" + name + "'");
    if (t->shape() != shape) throw CheckpointError("tensor '" + name + "' has shape " + to_string(t->shape()));
    return *t;
  };
  const Tensor& step = fetch("opt.step", {});
  const Tensor& epoch = fetch("opt.epoch", {});
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Shape& shape = params[i].tensor.shape();
    const Tensor& m = fetch(std::string(kOpt) + "m." + params[i].name, shape);
    const Tensor& v = fetch(std::string(kOpt) + "v." + params[i].name, shape);
    std::copy(m.values().begin(), m.values().end(), optimizer.first_moments()[i].values().begin());
    std::copy(v.values().begin(), v.values().end(), optimizer.second_moments()[i].values().begin());
  }
  optimizer.set_steps(static_cast<std::uint64_t>(step.item()));
  return static_cast<std::size_t>(epoch.item());
}

void save_training_state(const std::string& path, train::Trainer& trainer, Precision precision) {
  save_checkpoint(path, make_checkpoint(trainer.model(), &trainer.optimizer(), trainer.epoch(), precision));
}

void load_training_state(const std::string& path, train::Trainer& trainer) {
  const Checkpoint ckpt = load_checkpoint(path);
  restore_model(trainer.model(), ckpt);
  trainer.set_epoch(restore_optimizer(trainer.optimizer(), ckpt));
}

}  // namespace medvit
