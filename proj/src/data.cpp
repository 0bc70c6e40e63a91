#include "medvit/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>

#include "medvit/ops.hpp"

namespace medvit::data {

std::string split_name(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw DataError("unknown split '" + name + "'");
}

void Dataset::validate() const {
  if (!images.defined() || images.rank() != 4) throw DataError("dataset images must be [N,C,H,W]");
  if (images.dim(0) != labels.size()) {
    throw DataError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                    std::to_string(labels.size()) + " labels");
  }
  if (classes == 0) throw DataError("dataset class count is zero");
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= classes) {
      throw DataError("label " + std::to_string(l) + " outside [0," + std::to_string(classes) + ")");
    }
  }
  for (double v : images.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw DataError("pixel value outside [0,1]");
  }
}

std::pair<Tensor, std::vector<int>> Dataset::batch(const std::vector<std::size_t>& indices) const {
  const std::size_t per = images.numel() / std::max<std::size_t>(size(), 1);
  Shape shape = images.shape();
  shape[0] = indices.size();
  std::vector<double> values(indices.size() * per);
  std::vector<int> out_labels;
  out_labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t j = indices[i];
    if (j >= size()) throw DataError("batch index " + std::to_string(j) + " out of range");
    std::copy_n(images.data() + j * per, per, values.begin() + static_cast<std::ptrdiff_t>(i * per));
    out_labels.push_back(labels[j]);
  }
  return {Tensor(std::move(shape), std::move(values)), std::move(out_labels)};
}

Tensor Dataset::image(std::size_t i) const {
  auto [x, l] = batch({i});
  return ops::reshape(x, {x.dim(1), x.dim(2), x.dim(3)});
}

namespace {

std::uint32_t read_be32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw DataError("idx: truncated header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

void write_be32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

}  // namespace

IdxArray read_idx(std::istream& in) {
  const std::uint32_t magic = read_be32(in);
  if ((magic >> 8) != 0x08) {
    throw DataError("idx: bad magic 0x" + [&] {
      char buf[16];
      std::snprintf(buf, sizeof buf, "%08x", magic);
      return std::string(buf);
    }() + " (only unsigned-byte payloads are supported)");
  }
  const std::uint32_t rank = magic & 0xff;
  if (rank != 1 && rank != 3 && rank != 4) throw DataError("idx: unsupported rank " + std::to_string(rank));
  IdxArray out;
  std::uint64_t total = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    out.dims.push_back(read_be32(in));
    total *= out.dims.back();
  }
  out.bytes.resize(total);
  in.read(reinterpret_cast<char*>(out.bytes.data()), static_cast<std::streamsize>(total));
  if (static_cast<std::uint64_t>(in.gcount()) != total) {
    throw DataError("idx: truncated payload, expected " + std::to_string(total) + " bytes, got " +
                    std::to_string(in.gcount()));
  }
  return out;
}

void write_idx(std::ostream& out, const IdxArray& array) {
  write_be32(out, 0x0800u | static_cast<std::uint32_t>(array.dims.size()));
  for (auto d : array.dims) write_be32(out, d);
  out.write(reinterpret_cast<const char*>(array.bytes.data()), static_cast<std::streamsize>(array.bytes.size()));
}

Tensor resize_nearest(const Tensor& images, std::size_t side) {
  if (images.rank() != 4) throw ShapeError("resize_nearest: expected [N,C,H,W], got " + to_string(images.shape()));
  if (side == 0) throw ShapeError("resize_nearest: zero target side");
  const std::size_t N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  std::vector<double> out(N * C * side * side);
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    for (std::size_t y = 0; y < side; ++y) {
      const std::size_t sy = y * H / side;
      for (std::size_t x = 0; x < side; ++x) {
        out[(nc * side + y) * side + x] = images.data()[(nc * H + sy) * W + x * W / side];
      }
    }
  }
  return Tensor({N, C, side, side}, std::move(out));
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path, const IdxOptions& opts) {
  std::ifstream img_in(images_path, std::ios::binary), lab_in(labels_path, std::ios::binary);
  if (!img_in) throw DataError("cannot open '" + images_path + "'");
  if (!lab_in) throw DataError("cannot open '" + labels_path + "'");
  const IdxArray img = read_idx(img_in);
  const IdxArray lab = read_idx(lab_in);
  if (img.dims.size() < 3) throw DataError("idx: image file must be rank 3 or 4");
  if (lab.dims.size() != 1) throw DataError("idx: label file must be rank 1");
  if (img.dims[0] != lab.dims[0]) {
    throw DataError("idx: " + std::to_string(img.dims[0]) + " images but " + std::to_string(lab.dims[0]) +
                    " labels");
  }
  const std::size_t N = img.dims[0], H = img.dims[1], W = img.dims[2];
  const std::size_t C_in = img.dims.size() == 4 ? img.dims[3] : 1;
  const std::size_t C = (opts.to_rgb && C_in == 1) ? 3 : C_in;
  std::vector<double> values(N * C * H * W);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t src_c = C_in == 1 ? 0 : c;
      for (std::size_t p = 0; p < H * W; ++p) {
        values[(n * C + c) * H * W + p] = img.bytes[(n * H * W + p) * C_in + src_c] / 255.0;
      }
    }
  }
  Dataset ds;
  ds.images = Tensor({N, C, H, W}, std::move(values));
  if (opts.resize != 0 && (opts.resize != H || opts.resize != W)) ds.images = resize_nearest(ds.images, opts.resize);
  ds.labels.assign(lab.bytes.begin(), lab.bytes.end());
  int max_label = -1;
  for (int l : ds.labels) max_label = std::max(max_label, l);
  ds.classes = opts.classes != 0 ? opts.classes : static_cast<std::size_t>(max_label + 1);
  ds.split = opts.split;
  ds.validate();
  return ds;
}

void save_idx(const Dataset& dataset, const std::string& images_path, const std::string& labels_path) {
  dataset.validate();
  const std::size_t N = dataset.size(), C = dataset.channels(), H = dataset.images.dim(2),
                    W = dataset.images.dim(3);
  if (N > 0xffffffffu || H > 0xffffffffu || W > 0xffffffffu) throw DataError("idx: extents too large");
  for (int l : dataset.labels) {
    if (l > 255) throw DataError("idx: labels above 255 do not fit a byte");
  }
  IdxArray img;
  img.dims = {static_cast<std::uint32_t>(N), static_cast<std::uint32_t>(H), static_cast<std::uint32_t>(W)};
  if (C != 1) img.dims.push_back(static_cast<std::uint32_t>(C));
  img.bytes.resize(N * C * H * W);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t p = 0; p < H * W; ++p) {
        const double v = dataset.images.data()[(n * C + c) * H * W + p];
        img.bytes[(n * H * W + p) * C + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  IdxArray lab;
  lab.dims = {static_cast<std::uint32_t>(N)};
  lab.bytes.assign(dataset.labels.begin(), dataset.labels.end());
  std::ofstream img_out(images_path, std::ios::binary), lab_out(labels_path, std::ios::binary);
  if (!img_out) throw DataError("cannot write '" + images_path + "'");
  if (!lab_out) throw DataError("cannot write '" + labels_path + "'");
  write_idx(img_out, img);
  write_idx(lab_out, lab);
  if (!img_out || !lab_out) throw DataError("idx: write failed");
}

Dataset make_prototype_dataset(std::size_t n, std::size_t classes, std::size_t channels, std::size_t side,
                               double noise, std::uint64_t seed, std::uint64_t prototype_seed) {
  if (classes == 0 || n == 0) throw DataError("prototype dataset needs samples and classes");
  const std::size_t per = channels * side * side;
  Rng proto_rng(prototype_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> protos(classes * per);
  for (auto& p : protos) p = unit(proto_rng);

  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, noise);
  Dataset ds;
  ds.classes = classes;
  std::vector<double> values(n * per);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % classes);
    ds.labels.push_back(label);
    for (std::size_t p = 0; p < per; ++p) {
      values[i * per + p] = std::clamp(protos[static_cast<std::size_t>(label) * per + p] + gauss(rng), 0.0, 1.0);
    }
  }
  ds.images = Tensor({n, channels, side, side}, std::move(values));
  return ds;
}

Dataset make_separable_dataset(std::size_t n, std::size_t channels, std::size_t side, double margin,
                               std::uint64_t seed) {
  if (n == 0 || channels == 0) throw DataError("separable dataset needs samples and channels");
  if (margin <= 0.0 || margin > 0.25) throw DataError("separable dataset margin must lie in (0, 0.25]");
  const std::size_t hw = side * side, per = channels * hw;
  Rng rng(seed);
  std::uniform_real_distribution<double> jitter(-0.2, 0.2);
  Dataset ds;
  ds.classes = 2;
  std::vector<double> values(n * per);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    ds.labels.push_back(label);
    const double shift = label == 1 ? margin : -margin;
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t p = 0; p < hw; ++p) {
        values[i * per + c * hw + p] = 0.5 + jitter(rng) + (c == 0 ? shift : 0.0);
      }
    }
  }
  ds.images = Tensor({n, channels, side, side}, std::move(values));
  return ds;
}

}  // namespace medvit::data
