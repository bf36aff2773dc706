// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <deque>
#include <filesystem>
#include <set>
#include <sstream>

#include "flow4d/error.hpp"
#include "flow4d/grid.hpp"
#include "flow4d/phantom.hpp"

using namespace flow4d;
using namespace flow4d::phantom;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("flow4d_test_" + name);
}

std::vector<std::size_t> class_volumes(const LabelGrid& g) {
  std::vector<std::size_t> v(kNumClasses, 0);
  for (auto l : g.labels()) ++v[l];
  return v;
}

}  // namespace

TEST_CASE("generate_subject is deterministic and seed dependent") {
  const auto a = generate_subject(17);
  const auto b = generate_subject(17);
  const auto c = generate_subject(18);
  CHECK(render_frame(a, 3, 20) == render_frame(b, 3, 20));
  CHECK(a.shell_width == b.shell_width);
  CHECK(a.chambers[0].center == b.chambers[0].center);
  CHECK(a.chambers[0].center != c.chambers[0].center);
}

TEST_CASE("subjects 0..99 fit inside the grid") {
  CHECK(fits_inside(canonical_subject()));
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    INFO("seed " << seed);
    CHECK(fits_inside(generate_subject(seed)));
  }
}

TEST_CASE("amplitude distribution matches configured ranges") {
  const int n = 1000;
  double vent = 0.0, atr = 0.0;
  for (int s = 0; s < n; ++s) {
    const auto p = generate_subject(static_cast<std::uint64_t>(s) + 5000);
    vent += p.chambers[kChamberLV].amplitude;
    atr += p.chambers[kChamberLA].amplitude;
    for (const auto& ch : p.chambers) {
      const bool v = ch.phase == Phase::ventricular;
      CHECK(ch.amplitude >= (v ? 0.15 : 0.10));
      CHECK(ch.amplitude <= (v ? 0.35 : 0.25));
    }
  }
  // Uniform on [lo, hi]: mean (lo+hi)/2, sd (hi-lo)/sqrt(12).
  const double se_v = 0.20 / std::sqrt(12.0) / std::sqrt(n);
  const double se_a = 0.15 / std::sqrt(12.0) / std::sqrt(n);
  CHECK(std::abs(vent / n - 0.25) < 3 * se_v);
  CHECK(std::abs(atr / n - 0.175) < 3 * se_a);
}

TEST_CASE("frames are exactly periodic") {
  const auto s = generate_subject(3);
  for (int m : {2, 7, 20}) {
    for (int tau = 1; tau <= m; ++tau) {
      CHECK(render_frame(s, tau, m) == render_frame(s, tau + m, m));
      CHECK(render_frame(s, tau, m) == render_frame(s, tau + 3 * m, m));
    }
  }
  CHECK_THROWS_AS(render_frame(s, 0, 20), InvalidArgument);
}

TEST_CASE("static heart when amplitudes are zero") {
  auto s = generate_subject(9);
  for (auto& ch : s.chambers) ch.amplitude = 0.0;
  const auto seq = render_sequence(s, 8);
  for (const auto& f : seq.frames) CHECK(f == seq.frames.front());
}

TEST_CASE("volume extrema follow the contraction profile") {
  const int m = 20;
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const auto s = generate_subject(seed);
    std::vector<std::size_t> lv, la, vent, atr;
    for (int tau = 1; tau <= m; ++tau) {
      const auto v = class_volumes(render_frame(s, tau, m));
      lv.push_back(v[kLV]);
      la.push_back(v[kLA]);
      vent.push_back(v[kLV] + v[kRV]);
      atr.push_back(v[kLA] + v[kRA]);
    }
    const auto argmin = [](const auto& v) { return std::min_element(v.begin(), v.end()) - v.begin(); };
    const auto argmax = [](const auto& v) { return std::max_element(v.begin(), v.end()) - v.begin(); };
    CHECK(argmin(lv) + 1 == m / 2 + 1);
    CHECK(argmax(la) + 1 == m / 2 + 1);
    CHECK(argmax(vent) == 0);
    CHECK(argmin(atr) == 0);
  }
}

TEST_CASE("labels are valid and the myocardium is a shell around the LV") {
  for (std::uint64_t seed : {0u, 11u, 42u}) {
    const auto s = generate_subject(seed);
    const auto g = render_frame(s, 6, 20);
    const auto v = class_volumes(g);
    for (int c = 1; c < kNumClasses; ++c) CHECK(v[c] > 0);
    // Multi-source BFS from LV through LVM voxels (26-neighbourhood).
    const Dims& d = g.dims();
    std::vector<int> dist(g.size(), -1);
    std::deque<std::array<int, 3>> queue;
    for (int k = 0; k < d.nz; ++k)
      for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i)
          if (g.at(i, j, k) == kLV) {
            dist[g.index(i, j, k)] = 0;
            queue.push_back({i, j, k});
          }
    while (!queue.empty()) {
      const auto [i, j, k] = queue.front();
      queue.pop_front();
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int x = i + dx, y = j + dy, z = k + dz;
            if (!g.contains(x, y, z) || g.at(x, y, z) != kLVM || dist[g.index(x, y, z)] >= 0) continue;
            dist[g.index(x, y, z)] = dist[g.index(i, j, k)] + 1;
            queue.push_back({x, y, z});
          }
    }
    const int max_steps = static_cast<int>(std::ceil(s.shell_width)) + 1;
    for (std::size_t idx = 0; idx < g.size(); ++idx) {
      if (g[idx] != kLVM) continue;
      CHECK(dist[idx] >= 1);
      CHECK(dist[idx] <= max_steps);
    }
  }
}

TEST_CASE("rendering at another resolution keeps the anatomy") {
  const auto s = canonical_subject();
  const auto g = render_frame(s, 1, 20, Dims{16, 16, 20}, 2.0);
  const auto v = class_volumes(g);
  for (int c = 1; c < kNumClasses; ++c) CHECK(v[c] > 0);
  CHECK(g.voxel_size() == 2.0);
}

TEST_CASE("zero-shift SAX slices equal grid planes") {
  const auto g = render_frame(generate_subject(4), 5, 20);
  auto cfg = default_slice_config(g.dims());
  cfg.lambda = 0.0;
  const auto stack = extract_slices(g, cfg);
  REQUIRE(stack.slices.size() == 8);
  for (const auto& s : stack.slices) {
    CHECK(s.shift.isZero());
    if (s.plane.view != View::sax) continue;
    const int z = static_cast<int>(s.plane.origin.z());
    for (int j = 0; j < g.dims().ny; ++j)
      for (int i = 0; i < g.dims().nx; ++i) CHECK(s.labels[j * g.dims().nx + i] == g.at(i, j, z));
  }
}

TEST_CASE("four-chamber view through the chamber centres shows all classes") {
  const auto s = canonical_subject();
  const auto g = render_frame(s, 1, 20);
  auto cfg = default_slice_config(g.dims());
  const auto stack = extract_slices(g, cfg);
  bool found = false;
  for (const auto& sl : stack.slices) {
    if (sl.plane.view != View::lax4ch) continue;
    found = true;
    const std::set<std::uint8_t> classes(sl.labels.begin(), sl.labels.end());
    for (std::uint8_t c = 1; c < kNumClasses; ++c) CHECK(classes.count(c) == 1);
  }
  CHECK(found);
}

TEST_CASE("slice shift statistics") {
  const auto g = render_frame(canonical_subject(), 1, 20);
  auto cfg = default_slice_config(g.dims());
  std::vector<double> xs, ys;
  double mean_mag_prev = -1.0;
  for (double lambda : {0.5, 1.0, 2.0}) {
    cfg.lambda = lambda;
    xs.clear();
    ys.clear();
    double mag = 0.0;
    for (std::uint64_t seed = 0; xs.size() < 1000; ++seed) {
      cfg.seed = seed;
      for (const auto& s : extract_slices(g, cfg).slices) {
        xs.push_back(s.shift.x());
        ys.push_back(s.shift.y());
        mag += s.shift.norm();
      }
    }
    mag /= static_cast<double>(xs.size());
    CHECK(mag >= mean_mag_prev);
    mean_mag_prev = mag;
    if (lambda == 2.0) {
      for (const auto* v : {&xs, &ys}) {
        double m = 0.0, ss = 0.0;
        for (double x : *v) m += x;
        m /= static_cast<double>(v->size());
        for (double x : *v) ss += (x - m) * (x - m);
        const double sd = std::sqrt(ss / static_cast<double>(v->size() - 1));
        CHECK(sd >= 1.8);
        CHECK(sd <= 2.2);
      }
    }
  }
}

TEST_CASE("planes outside the grid are rejected") {
  const LabelGrid g(Dims{8, 8, 8});
  SliceSimConfig cfg;
  cfg.sax_first = 2;
  cfg.sax_spacing = 3;
  cfg.sax_count = 3;  // z = 2, 5, 8 -> 8 is outside
  CHECK_THROWS_AS(extract_slices(g, cfg), InvalidArgument);
  cfg.sax_count = 2;
  CHECK_NOTHROW(extract_slices(g, cfg));
}

TEST_CASE("rasterize: empty stack, full coverage, single shifted slice") {
  const auto g = render_frame(generate_subject(8), 2, 20);
  SliceStack empty;
  empty.dims = g.dims();
  const auto blank = rasterize_slices(empty, g.dims());
  CHECK(blank.count(kUnknown) == g.size());

  SliceSimConfig full;
  full.sax_first = 0;
  full.sax_spacing = 1;
  full.sax_count = g.dims().nz;
  CHECK(rasterize_slices(extract_slices(g, full), g.dims()) == g);

  SliceSimConfig one;
  one.sax_first = 20;
  one.sax_count = 1;
  one.lambda = 1.5;
  one.seed = 99;
  const auto stack = extract_slices(g, one);
  REQUIRE(stack.slices.size() == 1);
  CHECK(!stack.slices[0].shift.isZero());
  const auto r = rasterize_slices(stack, g.dims());
  CHECK(r.size() - r.count(kUnknown) == static_cast<std::size_t>(g.dims().nx * g.dims().ny));
  for (int k = 0; k < g.dims().nz; ++k)
    for (int j = 0; j < g.dims().ny; ++j)
      for (int i = 0; i < g.dims().nx; ++i) {
        if (k == 20) {
          CHECK(r.at(i, j, k) == stack.slices[0].labels[j * g.dims().nx + i]);
        } else {
          CHECK(r.at(i, j, k) == kUnknown);
        }
      }
}

TEST_CASE("grid and sequence files round-trip") {
  const auto seq = render_sequence(generate_subject(1), 4, Dims{10, 12, 14}, 1.25);
  const auto gp = temp_path("grid.f4dgrid");
  save_grid(gp, seq.frames[2]);
  CHECK(load_grid(gp) == seq.frames[2]);
  const auto sp = temp_path("seq.f4dseq");
  save_sequence(sp, seq);
  CHECK(load_sequence(sp) == seq);

  std::stringstream bad("F4DGRID v2 2 2 2 1\n01234567");
  CHECK_THROWS_AS(read_grid(bad), VersionError);
  std::stringstream bad_label(std::string("F4DGRID v1 1 1 2 1\n") + char(0) + char(9));
  CHECK_THROWS_AS(read_grid(bad_label), FormatError);
  std::stringstream junk("NOTAGRID");
  CHECK_THROWS_AS(read_grid(junk), FormatError);
  std::filesystem::remove(gp);
  std::filesystem::remove(sp);
}

TEST_CASE("slice stacks round-trip through JSON") {
  const auto g = render_frame(generate_subject(2), 1, 20);
  auto cfg = default_slice_config(g.dims());
  cfg.lambda = 1.0;
  cfg.seed = 5;
  const auto stack = extract_slices(g, cfg);
  const auto p = temp_path("slices.json");
  save_slices(p, stack);
  const auto back = load_slices(p);
  REQUIRE(back.slices.size() == stack.slices.size());
  for (std::size_t i = 0; i < stack.slices.size(); ++i) {
    CHECK(back.slices[i].labels == stack.slices[i].labels);
    CHECK(back.slices[i].shift == stack.slices[i].shift);
    CHECK(back.slices[i].plane.origin == stack.slices[i].plane.origin);
  }
  CHECK(rasterize_slices(back, g.dims()) == rasterize_slices(stack, g.dims()));
  std::filesystem::remove(p);
}
