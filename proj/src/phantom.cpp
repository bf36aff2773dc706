// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#include "flow4d/phantom.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include <nlohmann/json.hpp>

#include "flow4d/error.hpp"

namespace flow4d::phantom {

namespace {

Eigen::Matrix3d rotation_matrix(const Vec3& axis_angle) {
  const double angle = axis_angle.norm();
  if (angle == 0.0) return Eigen::Matrix3d::Identity();
  return Eigen::AngleAxisd(angle, axis_angle / angle).toRotationMatrix();
}

// Grid voxel index -> reference-grid coordinate along one axis.
double to_reference(int i, int n, int ref) {
  return (static_cast<double>(i) + 0.5) * static_cast<double>(ref) / static_cast<double>(n) - 0.5;
}

bool inside(const Vec3& q, const Vec3& center, const Vec3& radii) {
  const Vec3 d = (q - center).cwiseQuotient(radii);
  return d.squaredNorm() <= 1.0;
}

int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

}  // namespace

Vec3 SubjectParams::heart_center() const {
  Vec3 c = Vec3::Zero();
  for (const auto& ch : chambers) c += ch.center;
  return c / 4.0;
}

SubjectParams canonical_subject() {
  SubjectParams s;
  s.chambers[kChamberLV] = {Vec3(19.0, 15.5, 14.0), Vec3(5.0, 5.0, 7.5), 0.25, Phase::ventricular};
  s.chambers[kChamberRV] = {Vec3(10.0, 15.5, 14.0), Vec3(4.5, 6.0, 7.0), 0.25, Phase::ventricular};
  s.chambers[kChamberLA] = {Vec3(19.0, 15.5, 29.0), Vec3(5.0, 5.0, 5.0), 0.175, Phase::atrial};
  s.chambers[kChamberRA] = {Vec3(10.0, 15.5, 29.0), Vec3(5.0, 5.0, 5.5), 0.175, Phase::atrial};
  s.shell_width = 2.3;
  return s;
}

SubjectParams generate_subject(std::uint64_t seed, const SubjectRanges& r) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  SubjectParams s = canonical_subject();
  s.seed = seed;
  for (auto& ch : s.chambers) {
    for (int a = 0; a < 3; ++a) ch.center[a] += r.center_jitter * unit(rng);
    for (int a = 0; a < 3; ++a) ch.radii[a] *= 1.0 + r.radius_jitter * unit(rng);
    const bool ventricular = ch.phase == Phase::ventricular;
    std::uniform_real_distribution<double> amp(ventricular ? r.ventricular_amp_min : r.atrial_amp_min,
                                               ventricular ? r.ventricular_amp_max : r.atrial_amp_max);
    ch.amplitude = amp(rng);
  }
  s.shell_width = std::uniform_real_distribution<double>(r.shell_min, r.shell_max)(rng);
  // Per-component bound keeps the total angle within max_rotation_deg.
  const double bound = r.max_rotation_deg * std::numbers::pi / 180.0 / std::sqrt(3.0);
  for (int a = 0; a < 3; ++a) s.rotation[a] = bound * unit(rng);
  return s;
}

bool fits_inside(const SubjectParams& s, double margin) {
  const Eigen::Matrix3d rot = rotation_matrix(s.rotation);
  const Vec3 h = s.heart_center();
  const Vec3 upper(kReferenceDims.nx - 1, kReferenceDims.ny - 1, kReferenceDims.nz - 1);
  for (int c = 0; c < 4; ++c) {
    const ChamberParams& ch = s.chambers[c];
    if ((ch.radii.array() <= 0.0).any() || ch.amplitude < 0.0 || ch.amplitude >= 1.0) return false;
    Vec3 radii = ch.radii;
    if (c == kChamberLV) radii.array() += s.shell_width;
    const Vec3 center = h + rot * (ch.center - h);
    for (int i = 0; i < 3; ++i) {
      const double extent = (rot.row(i).transpose().cwiseProduct(radii)).norm();
      if (center[i] - extent < margin || center[i] + extent > upper[i] - margin) return false;
    }
  }
  return s.shell_width > 0.0;
}

double contraction(double u) { return 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * u)); }

double chamber_scale(const ChamberParams& ch, int tau, int frames) {
  if (frames < 1) throw InvalidArgument("frame count must be >= 1");
  if (tau < 1) throw InvalidArgument("frame index must be >= 1, got " + std::to_string(tau));
  // Reducing the phase to an integer first makes frame tau and tau + M identical bit for bit.
  const int phase = (tau - 1) % frames;
  double u = static_cast<double>(phase) / static_cast<double>(frames);
  if (ch.phase == Phase::atrial) u += 0.5;
  return 1.0 - ch.amplitude * contraction(u);
}

LabelGrid render_frame(const SubjectParams& s, int tau, int frames, Dims dims, double voxel_size) {
  if (tau < 1) throw InvalidArgument("render_frame: frame index must be >= 1, got " + std::to_string(tau));
  LabelGrid grid(dims, voxel_size);
  const Eigen::Matrix3d rot_t = rotation_matrix(s.rotation).transpose();
  const Vec3 h = s.heart_center();

  std::array<Vec3, 4> radii;
  for (int c = 0; c < 4; ++c) radii[c] = s.chambers[c].radii * chamber_scale(s.chambers[c], tau, frames);
  const Vec3 lv_outer = radii[kChamberLV].array() + s.shell_width;

  for (int k = 0; k < dims.nz; ++k) {
    for (int j = 0; j < dims.ny; ++j) {
      for (int i = 0; i < dims.nx; ++i) {
        const Vec3 p(to_reference(i, dims.nx, kReferenceDims.nx), to_reference(j, dims.ny, kReferenceDims.ny),
                     to_reference(k, dims.nz, kReferenceDims.nz));
        const Vec3 q = h + rot_t * (p - h);
        std::uint8_t label = kBackground;
        if (inside(q, s.chambers[kChamberLV].center, radii[kChamberLV])) {
          label = kLV;
        } else if (inside(q, s.chambers[kChamberLV].center, lv_outer)) {
          label = kLVM;
        } else if (inside(q, s.chambers[kChamberRV].center, radii[kChamberRV])) {
          label = kRV;
        } else if (inside(q, s.chambers[kChamberLA].center, radii[kChamberLA])) {
          label = kLA;
        } else if (inside(q, s.chambers[kChamberRA].center, radii[kChamberRA])) {
          label = kRA;
        }
        grid.at(i, j, k) = label;
      }
    }
  }
  return grid;
}

ShapeSequence render_sequence(const SubjectParams& s, int frames, Dims dims, double voxel_size) {
  if (frames < 1) throw InvalidArgument("sequence needs at least one frame");
  ShapeSequence seq;
  seq.frames.reserve(static_cast<std::size_t>(frames));
  for (int tau = 1; tau <= frames; ++tau) seq.frames.push_back(render_frame(s, tau, frames, dims, voxel_size));
  return seq;
}

// ------------------------------------------------------------ slice simulation

const char* view_name(View v) {
  switch (v) {
    case View::sax: return "sax";
    case View::lax2ch: return "lax2ch";
    case View::lax4ch: return "lax4ch";
  }
  return "sax";
}

View parse_view(const std::string& name) {
  if (name == "sax") return View::sax;
  if (name == "lax2ch") return View::lax2ch;
  if (name == "lax4ch") return View::lax4ch;
  throw FormatError("unknown view '" + name + "'");
}

PlaneDef axis_plane(View view, int index, int axis, int position, Dims dims) {
  PlaneDef p;
  p.view = view;
  p.index = index;
  p.origin = Vec3::Zero();
  p.origin[axis] = position;
  const std::array<int, 3> n{dims.nx, dims.ny, dims.nz};
  const int a = axis == 0 ? 1 : 0;
  const int b = axis == 2 ? 1 : 2;
  p.u = Vec3::Unit(a);
  p.v = Vec3::Unit(b);
  p.nu = n[a];
  p.nv = n[b];
  return p;
}

SliceSimConfig default_slice_config(Dims dims) {
  SliceSimConfig c;
  const double sz = static_cast<double>(dims.nz) / kReferenceDims.nz;
  c.sax_first = std::max(0, round_half_up(4.0 * sz));
  c.sax_spacing = std::max(1, round_half_up(4.0 * sz));
  c.sax_count = 6;
  const SubjectParams canon = canonical_subject();
  auto to_grid = [](double ref_coord, int n, int ref) {
    return round_half_up((ref_coord + 0.5) * static_cast<double>(n) / static_cast<double>(ref) - 0.5);
  };
  const int x_lv = to_grid(canon.chambers[kChamberLV].center.x(), dims.nx, kReferenceDims.nx);
  const int y_mid = to_grid(canon.heart_center().y(), dims.ny, kReferenceDims.ny);
  c.lax.push_back(axis_plane(View::lax2ch, 0, 0, x_lv, dims));
  c.lax.push_back(axis_plane(View::lax4ch, 0, 1, y_mid, dims));
  return c;
}

std::vector<PlaneDef> sax_planes(const SliceSimConfig& config, Dims dims) {
  std::vector<PlaneDef> planes;
  for (int k = 0; k < config.sax_count; ++k) {
    planes.push_back(axis_plane(View::sax, k, 2, config.sax_first + k * config.sax_spacing, dims));
  }
  return planes;
}

namespace {

void check_plane(const PlaneDef& p, Dims dims) {
  const Vec3 lo(-0.5, -0.5, -0.5);
  const Vec3 hi(dims.nx - 0.5, dims.ny - 0.5, dims.nz - 0.5);
  const Vec3 far = p.origin + (p.nu - 1) * p.u + (p.nv - 1) * p.v;
  for (const Vec3& c : {p.origin, far}) {
    if ((c.array() < lo.array()).any() || (c.array() > hi.array()).any() || p.nu < 1 || p.nv < 1) {
      throw InvalidArgument(std::string(view_name(p.view)) + " plane " + std::to_string(p.index) +
                            " lies outside the " + dims.str() + " grid");
    }
  }
}

}  // namespace

SliceStack extract_slices(const LabelGrid& grid, const SliceSimConfig& config) {
  if (config.lambda < 0.0) throw InvalidArgument("corruption level lambda must be >= 0");
  std::vector<PlaneDef> planes = sax_planes(config, grid.dims());
  planes.insert(planes.end(), config.lax.begin(), config.lax.end());
  for (const auto& p : planes) check_plane(p, grid.dims());

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  SliceStack stack;
  stack.dims = grid.dims();
  stack.voxel_size = grid.voxel_size();
  for (const auto& p : planes) {
    Slice s;
    s.plane = p;
    s.shift = Eigen::Vector2d(config.lambda * normal(rng), config.lambda * normal(rng));
    s.labels.assign(static_cast<std::size_t>(p.nu) * static_cast<std::size_t>(p.nv), kBackground);
    for (int b = 0; b < p.nv; ++b) {
      for (int a = 0; a < p.nu; ++a) {
        const Vec3 pos = p.origin + (a + s.shift.x()) * p.u + (b + s.shift.y()) * p.v;
        const int i = round_half_up(pos.x());
        const int j = round_half_up(pos.y());
        const int k = round_half_up(pos.z());
        if (grid.contains(i, j, k)) s.labels[static_cast<std::size_t>(b * p.nu + a)] = grid.at(i, j, k);
      }
    }
    stack.slices.push_back(std::move(s));
  }
  return stack;
}

LabelGrid rasterize_slices(const SliceStack& stack, Dims dims) {
  LabelGrid out(dims, stack.voxel_size > 0.0 ? stack.voxel_size : 1.0, kUnknown);
  for (bool lax_pass : {false, true}) {
    for (const auto& s : stack.slices) {
      if ((s.plane.view != View::sax) != lax_pass) continue;
      const PlaneDef& p = s.plane;
      for (int b = 0; b < p.nv; ++b) {
        for (int a = 0; a < p.nu; ++a) {
          const Vec3 pos = p.origin + a * p.u + b * p.v;
          const int i = round_half_up(pos.x());
          const int j = round_half_up(pos.y());
          const int k = round_half_up(pos.z());
          if (out.contains(i, j, k)) out.at(i, j, k) = s.labels[static_cast<std::size_t>(b * p.nu + a)];
        }
      }
    }
  }
  return out;
}

void save_slices(const std::filesystem::path& path, const SliceStack& stack) {
  using nlohmann::json;
  json j;
  j["format"] = "F4DSLICES v1";
  j["dims"] = {stack.dims.nx, stack.dims.ny, stack.dims.nz};
  j["voxel_size"] = stack.voxel_size;
  j["slices"] = json::array();
  for (const auto& s : stack.slices) {
    const PlaneDef& p = s.plane;
    j["slices"].push_back({{"view", view_name(p.view)},
                           {"index", p.index},
                           {"origin", {p.origin.x(), p.origin.y(), p.origin.z()}},
                           {"u", {p.u.x(), p.u.y(), p.u.z()}},
                           {"v", {p.v.x(), p.v.y(), p.v.z()}},
                           {"nu", p.nu},
                           {"nv", p.nv},
                           {"shift", {s.shift.x(), s.shift.y()}},
                           {"labels", s.labels}});
  }
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open '" + path.string() + "' for writing");
  os << j.dump() << '\n';
}

SliceStack load_slices(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open slice file '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
    if (j.at("format") != "F4DSLICES v1") throw VersionError("unsupported slice format in '" + path.string() + "'");
    SliceStack stack;
    stack.dims = {j.at("dims")[0], j.at("dims")[1], j.at("dims")[2]};
    stack.voxel_size = j.at("voxel_size");
    auto vec3 = [](const nlohmann::json& a) { return Vec3(a[0].get<double>(), a[1].get<double>(), a[2].get<double>()); };
    for (const auto& js : j.at("slices")) {
      Slice s;
      s.plane.view = parse_view(js.at("view"));
      s.plane.index = js.at("index");
      s.plane.origin = vec3(js.at("origin"));
      s.plane.u = vec3(js.at("u"));
      s.plane.v = vec3(js.at("v"));
      s.plane.nu = js.at("nu");
      s.plane.nv = js.at("nv");
      s.shift = Eigen::Vector2d(js.at("shift")[0].get<double>(), js.at("shift")[1].get<double>());
      s.labels = js.at("labels").get<std::vector<std::uint8_t>>();
      if (s.labels.size() != static_cast<std::size_t>(s.plane.nu) * static_cast<std::size_t>(s.plane.nv)) {
        throw FormatError("slice label count does not match its plane size in '" + path.string() + "'");
      }
      stack.slices.push_back(std::move(s));
    }
    return stack;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed slice file '" + path.string() + "': " + e.what());
  }
}

}  // namespace flow4d::phantom
