// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "flow4d/grid.hpp"

namespace flow4d::phantom {

using Vec3 = Eigen::Vector3d;

/// Subject geometry is expressed in voxel coordinates of this reference grid
/// and rescaled per axis when rendering at other resolutions.
inline constexpr Dims kReferenceDims{32, 32, 40};

enum class Phase { ventricular, atrial };

enum Chamber : int { kChamberLV = 0, kChamberRV = 1, kChamberLA = 2, kChamberRA = 3 };

struct ChamberParams {
  Vec3 center = Vec3::Zero();
  Vec3 radii = Vec3::Ones();
  double amplitude = 0.0;
  Phase phase = Phase::ventricular;
};

struct SubjectParams {
  std::array<ChamberParams, 4> chambers;  // LV, RV, LA, RA
  double shell_width = 2.0;               // LV myocardium thickness
  Vec3 rotation = Vec3::Zero();           // axis-angle, radians
  std::uint64_t seed = 0;

  Vec3 heart_center() const;
};

/// Sampling ranges for generate_subject (reference-grid voxels).
struct SubjectRanges {
  double radius_jitter = 0.15;
  double center_jitter = 1.5;
  double ventricular_amp_min = 0.15;
  double ventricular_amp_max = 0.35;
  double atrial_amp_min = 0.10;
  double atrial_amp_max = 0.25;
  double shell_min = 2.0;
  double shell_max = 2.6;
  double max_rotation_deg = 5.0;
};

SubjectParams canonical_subject();
SubjectParams generate_subject(std::uint64_t seed, const SubjectRanges& ranges = {});

/// True when every chamber (LV including its myocardial shell) at full size
/// stays at least `margin` voxels inside the reference grid.
bool fits_inside(const SubjectParams& subject, double margin = 1.0);

/// Contraction profile g(u) = (1 - cos 2 pi u) / 2.
double contraction(double u);
/// Radius scale of a chamber at frame tau (1-based) of an M-frame cycle.
double chamber_scale(const ChamberParams& chamber, int tau, int frames);

LabelGrid render_frame(const SubjectParams& subject, int tau, int frames, Dims dims = kReferenceDims,
                       double voxel_size = 1.0);
ShapeSequence render_sequence(const SubjectParams& subject, int frames, Dims dims = kReferenceDims,
                              double voxel_size = 1.0);

// ------------------------------------------------------------ slice simulation

enum class View { sax, lax2ch, lax4ch };

const char* view_name(View v);
View parse_view(const std::string& name);

/// A planar sampling lattice: pixel (a, b) sits at origin + a*u + b*v.
struct PlaneDef {
  View view = View::sax;
  int index = 0;
  Vec3 origin = Vec3::Zero();
  Vec3 u = Vec3::UnitX();
  Vec3 v = Vec3::UnitY();
  int nu = 0;
  int nv = 0;
};

struct Slice {
  PlaneDef plane;
  std::vector<std::uint8_t> labels;  // nu * nv, u-fastest
  Eigen::Vector2d shift = Eigen::Vector2d::Zero();
};

struct SliceStack {
  Dims dims;
  double voxel_size = 1.0;
  std::vector<Slice> slices;
};

struct SliceSimConfig {
  double lambda = 0.0;      // in-plane shift std dev (voxels)
  double lambda_max = 2.0;  // training draws lambda ~ U[0, lambda_max]
  int sax_count = 6;
  int sax_first = 4;
  int sax_spacing = 4;
  std::vector<PlaneDef> lax;
  std::uint64_t seed = 0;
};

/// SAX z-planes plus two-chamber (x = LV centre) and four-chamber
/// (y = common chamber centre) long-axis planes, scaled to `dims`.
SliceSimConfig default_slice_config(Dims dims = kReferenceDims);
std::vector<PlaneDef> sax_planes(const SliceSimConfig& config, Dims dims);
PlaneDef axis_plane(View view, int index, int axis, int position, Dims dims);

SliceStack extract_slices(const LabelGrid& grid, const SliceSimConfig& config);
/// Voxels under a slice's nominal position take that slice's label; all
/// others are kUnknown. SAX slices are written first, LAX slices last.
LabelGrid rasterize_slices(const SliceStack& stack, Dims dims);

void save_slices(const std::filesystem::path& path, const SliceStack& stack);
SliceStack load_slices(const std::filesystem::path& path);

}  // namespace flow4d::phantom
