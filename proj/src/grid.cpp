// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#include "flow4d/grid.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "flow4d/error.hpp"

namespace flow4d {

namespace {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string read_header_line(std::istream& is, const char* what) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError(std::string("missing ") + what + " header");
  return line;
}

}  // namespace

const char* label_name(std::uint8_t label) {
  switch (label) {
    case kBackground: return "background";
    case kLV: return "LV";
    case kLVM: return "LVM";
    case kRV: return "RV";
    case kLA: return "LA";
    case kRA: return "RA";
    case kUnknown: return "unknown";
    default: return "invalid";
  }
}

std::string Dims::str() const {
  return std::to_string(nx) + "x" + std::to_string(ny) + "x" + std::to_string(nz);
}

Dims Dims::parse(const std::string& text) {
  Dims d;
  std::string t = text;
  std::replace(t.begin(), t.end(), 'x', ',');
  std::replace(t.begin(), t.end(), ',', ' ');
  std::istringstream is(t);
  if (!(is >> d.nx >> d.ny >> d.nz) || d.nx < 1 || d.ny < 1 || d.nz < 1) {
    throw InvalidArgument("invalid dims '" + text + "' (expected X,Y,Z)");
  }
  return d;
}

LabelGrid::LabelGrid(Dims dims, double voxel_size, std::uint8_t fill)
    : dims_(dims), voxel_size_(voxel_size), labels_(dims.voxels(), fill) {
  if (dims.nx < 1 || dims.ny < 1 || dims.nz < 1) throw InvalidArgument("grid dims must be positive, got " + dims.str());
  if (!(voxel_size > 0.0)) throw InvalidArgument("voxel size must be positive");
}

std::size_t LabelGrid::count(std::uint8_t label) const {
  return static_cast<std::size_t>(std::count(labels_.begin(), labels_.end(), label));
}

void ShapeSequence::validate() const {
  for (const auto& f : frames) {
    if (f.dims() != frames.front().dims() || f.voxel_size() != frames.front().voxel_size()) {
      throw DimensionError("sequence frames differ in dims: " + frames.front().dims().str() + " vs " + f.dims().str());
    }
  }
}

void write_grid(std::ostream& os, const LabelGrid& grid) {
  const Dims& d = grid.dims();
  os << "F4DGRID v1 " << d.nx << ' ' << d.ny << ' ' << d.nz << ' ' << format_double(grid.voxel_size()) << '\n';
  os.write(reinterpret_cast<const char*>(grid.labels().data()), static_cast<std::streamsize>(grid.size()));
  if (!os) throw FormatError("failed writing grid");
}

LabelGrid read_grid(std::istream& is) {
  std::istringstream header(read_header_line(is, "F4DGRID"));
  std::string magic, version;
  Dims d;
  double voxel_size = 0.0;
  header >> magic >> version;
  if (magic != "F4DGRID") throw FormatError("not a F4DGRID file");
  if (version != "v1") throw VersionError("unsupported F4DGRID version '" + version + "'");
  if (!(header >> d.nx >> d.ny >> d.nz >> voxel_size)) throw FormatError("malformed F4DGRID header");
  LabelGrid grid(d, voxel_size);
  if (!is.read(reinterpret_cast<char*>(grid.data().data()), static_cast<std::streamsize>(grid.size()))) {
    throw FormatError("F4DGRID payload truncated");
  }
  for (auto v : grid.labels()) {
    if (v > kUnknown) throw FormatError("F4DGRID contains invalid class id " + std::to_string(v));
  }
  return grid;
}

void save_grid(const std::filesystem::path& path, const LabelGrid& grid) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path.string() + "' for writing");
  write_grid(os, grid);
}

LabelGrid load_grid(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open grid file '" + path.string() + "'");
  return read_grid(is);
}

void write_sequence(std::ostream& os, const ShapeSequence& seq) {
  os << "F4DSEQ v1 " << seq.frames.size() << '\n';
  for (const auto& f : seq.frames) write_grid(os, f);
}

ShapeSequence read_sequence(std::istream& is) {
  std::istringstream header(read_header_line(is, "F4DSEQ"));
  std::string magic, version;
  std::size_t m = 0;
  header >> magic >> version;
  if (magic != "F4DSEQ") throw FormatError("not a F4DSEQ file");
  if (version != "v1") throw VersionError("unsupported F4DSEQ version '" + version + "'");
  if (!(header >> m)) throw FormatError("malformed F4DSEQ header");
  ShapeSequence seq;
  seq.frames.reserve(m);
  for (std::size_t i = 0; i < m; ++i) seq.frames.push_back(read_grid(is));
  seq.validate();
  return seq;
}

void save_sequence(const std::filesystem::path& path, const ShapeSequence& seq) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path.string() + "' for writing");
  write_sequence(os, seq);
}

ShapeSequence load_sequence(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open sequence file '" + path.string() + "'");
  return read_sequence(is);
}

}  // namespace flow4d
