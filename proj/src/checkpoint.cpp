// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#include "flow4d/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "flow4d/error.hpp"

namespace flow4d {

namespace {

constexpr std::array<char, 4> kMagic{'F', '4', 'D', 'C'};
constexpr std::string_view kKindPrefix = "kind:";

template <typename T>
void put_le(std::ostream& os, T v) {
  static_assert(std::is_unsigned_v<T>);
  std::array<char, sizeof(T)> bytes{};
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(bytes.data(), bytes.size());
}

template <typename T>
T get_le(std::istream& is) {
  std::array<unsigned char, sizeof(T)> bytes{};
  if (!is.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) throw FormatError("checkpoint truncated");
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(bytes[i]) << (8 * i);
  return v;
}

std::uint64_t element_count(const std::vector<std::uint64_t>& dims) {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

}  // namespace

Tensor Tensor::vector(std::vector<double> v) {
  Tensor t;
  t.dims = {v.size()};
  t.values = std::move(v);
  return t;
}

Tensor Tensor::from_matrix(const diffnet::Matrix& m) {
  Tensor t;
  t.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  t.values.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) t.values.push_back(m(i, j));
  }
  return t;
}

diffnet::Matrix Tensor::to_matrix() const {
  Eigen::Index rows = 1;
  Eigen::Index cols = 1;
  if (dims.size() == 1) {
    cols = static_cast<Eigen::Index>(dims[0]);
  } else if (dims.size() == 2) {
    rows = static_cast<Eigen::Index>(dims[0]);
    cols = static_cast<Eigen::Index>(dims[1]);
  } else if (!dims.empty()) {
    throw FormatError("tensor of rank " + std::to_string(dims.size()) + " is not a matrix");
  }
  diffnet::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = values[static_cast<std::size_t>(i * cols + j)];
  }
  return m;
}

diffnet::Vector Tensor::to_vector() const {
  return Eigen::Map<const diffnet::Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

void Checkpoint::add(std::string name, Tensor t) {
  if (element_count(t.dims) != t.values.size()) throw FormatError("tensor '" + name + "': dims do not match value count");
  if (contains(name)) throw FormatError("duplicate checkpoint entry '" + name + "'");
  entries_.emplace_back(std::move(name), std::move(t));
}

void Checkpoint::add_params(const diffnet::ParamStore& params, std::string_view prefix) {
  for (const auto& [name, p] : params) {
    Tensor t = Tensor::from_matrix(p.value);
    t.dims.assign(p.shape.begin(), p.shape.end());
    add(std::string(prefix) + name, std::move(t));
  }
}

void Checkpoint::load_params(diffnet::ParamStore& params, std::string_view prefix) const {
  for (auto& [name, p] : params) {
    const Tensor& t = at(std::string(prefix) + name);
    std::vector<std::uint64_t> expect(p.shape.begin(), p.shape.end());
    if (t.dims != expect) throw FormatError("checkpoint entry '" + name + "' has an unexpected shape");
    diffnet::Matrix m = t.to_matrix();
    if (m.rows() != p.value.rows() || m.cols() != p.value.cols()) {
      throw FormatError("checkpoint entry '" + name + "' has an unexpected shape");
    }
    p.value = std::move(m);
    p.grad.setZero();
  }
}

bool Checkpoint::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

const Tensor& Checkpoint::at(std::string_view name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw FormatError("checkpoint has no entry '" + std::string(name) + "'");
}

void Checkpoint::set_kind(std::string_view kind, double version) {
  add(std::string(kKindPrefix) + std::string(kind), Tensor::scalar(version));
}

void Checkpoint::require_kind(std::string_view kind, double version) const {
  const std::string key = std::string(kKindPrefix) + std::string(kind);
  if (!contains(key)) {
    std::string found = "unknown";
    for (const auto& [n, _] : entries_) {
      if (n.starts_with(kKindPrefix)) found = n.substr(kKindPrefix.size());
    }
    throw VersionError("checkpoint holds a '" + found + "' model, expected '" + std::string(kind) + "'");
  }
  const double stored = at(key).values.at(0);
  if (stored != version) {
    throw VersionError("'" + std::string(kind) + "' checkpoint version " + std::to_string(static_cast<int>(stored)) +
                       " is not supported (expected " + std::to_string(static_cast<int>(version)) + ")");
  }
}

void Checkpoint::write(std::ostream& os) const {
  os.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(os, kFormatVersion);
  put_le<std::uint64_t>(os, entries_.size());
  for (const auto& [name, t] : entries_) {
    put_le<std::uint64_t>(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_le<std::uint64_t>(os, t.dims.size());
    for (auto d : t.dims) put_le<std::uint64_t>(os, d);
    for (double v : t.values) put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw FormatError("failed writing checkpoint");
}

Checkpoint Checkpoint::read(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) throw FormatError("not a F4DC checkpoint (bad magic)");
  const auto version = get_le<std::uint32_t>(is);
  if (version != kFormatVersion) {
    throw VersionError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kFormatVersion) + ")");
  }
  Checkpoint ck;
  const auto count = get_le<std::uint64_t>(is);
  for (std::uint64_t e = 0; e < count; ++e) {
    const auto len = get_le<std::uint64_t>(is);
    if (len > (1u << 20)) throw FormatError("checkpoint entry name too long");
    std::string name(len, '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(len))) throw FormatError("checkpoint truncated");
    Tensor t;
    const auto rank = get_le<std::uint64_t>(is);
    if (rank > 8) throw FormatError("checkpoint entry '" + name + "' has implausible rank");
    for (std::uint64_t r = 0; r < rank; ++r) t.dims.push_back(get_le<std::uint64_t>(is));
    const std::uint64_t n = element_count(t.dims);
    if (n > (std::uint64_t{1} << 32)) throw FormatError("checkpoint entry '" + name + "' too large");
    t.values.resize(n);
    for (auto& v : t.values) v = std::bit_cast<double>(get_le<std::uint64_t>(is));
    ck.add(std::move(name), std::move(t));
  }
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path.string() + "' for writing");
  write(os);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint '" + path.string() + "'");
  return read(is);
}

}  // namespace flow4d
