// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>
#include <string>
#include <vector>

#include "cli.hpp"
#include "flow4d/autoenc.hpp"
#include "flow4d/cardiacflow.hpp"
#include "flow4d/completion.hpp"
#include "flow4d/error.hpp"
#include "flow4d/fm.hpp"
#include "flow4d/metrics.hpp"
#include "flow4d/phantom.hpp"

namespace py = pybind11;
using namespace flow4d;

namespace {

using LabelArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

// Grids cross the boundary as (nz, ny, nx) uint8 arrays, which matches the x-fastest voxel order.
LabelArray to_array(const LabelGrid& g) {
  const Dims& d = g.dims();
  LabelArray a({d.nz, d.ny, d.nx});
  std::memcpy(a.mutable_data(), g.labels().data(), g.size());
  return a;
}

LabelGrid to_grid(const LabelArray& a, double voxel_size = 1.0) {
  if (a.ndim() != 3) throw DimensionError("expected a 3-D (z, y, x) label array, got " + std::to_string(a.ndim()) + "-D");
  const Dims d{static_cast<int>(a.shape(2)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0))};
  LabelGrid g(d, voxel_size);
  std::memcpy(g.data().data(), a.data(), g.size());
  return g;
}

LabelArray to_array(const ShapeSequence& s) {
  if (s.frames.empty()) return LabelArray(std::vector<py::ssize_t>{0, 0, 0, 0});
  const Dims& d = s.frames.front().dims();
  LabelArray a({static_cast<py::ssize_t>(s.frames.size()), static_cast<py::ssize_t>(d.nz),
                static_cast<py::ssize_t>(d.ny), static_cast<py::ssize_t>(d.nx)});
  for (std::size_t f = 0; f < s.frames.size(); ++f) {
    std::memcpy(a.mutable_data() + f * d.voxels(), s.frames[f].labels().data(), d.voxels());
  }
  return a;
}

ShapeSequence to_sequence(const LabelArray& a) {
  if (a.ndim() != 4) throw DimensionError("expected a 4-D (t, z, y, x) label array, got " + std::to_string(a.ndim()) + "-D");
  ShapeSequence s;
  const Dims d{static_cast<int>(a.shape(3)), static_cast<int>(a.shape(2)), static_cast<int>(a.shape(1))};
  for (py::ssize_t f = 0; f < a.shape(0); ++f) {
    LabelGrid g(d);
    std::memcpy(g.data().data(), a.data() + static_cast<std::size_t>(f) * d.voxels(), d.voxels());
    s.frames.push_back(std::move(g));
  }
  return s;
}

std::vector<LabelGrid> to_grids(const std::vector<LabelArray>& arrays) {
  std::vector<LabelGrid> out;
  out.reserve(arrays.size());
  for (const auto& a : arrays) out.push_back(to_grid(a));
  return out;
}

Dims to_dims(const std::vector<int>& v) {
  if (v.size() != 3) throw DimensionError("dims must be (nx, ny, nz)");
  return Dims{v[0], v[1], v[2]};
}

std::vector<metrics::VolumeCurve> curves_of(const std::vector<LabelArray>& seqs) {
  std::vector<metrics::VolumeCurve> out;
  for (const auto& a : seqs) out.push_back(metrics::volume_curve(to_sequence(a), 1.0));
  return out;
}

}  // namespace

PYBIND11_MODULE(_flow4d, m) {
  m.doc() = "Flow-matching cardiac shape generation and completion";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<InvalidArgument>(m, "InvalidArgument", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
  py::register_exception<NonFiniteError>(m, "NonFiniteError", PyExc_ArithmeticError);
  py::register_exception<UndefinedMetric>(m, "UndefinedMetric", PyExc_ValueError);

  m.def(
      "phantom_sequence",
      [](std::uint64_t seed, int frames, const std::vector<int>& dims) {
        return to_array(phantom::render_sequence(phantom::generate_subject(seed), frames, to_dims(dims)));
      },
      py::arg("seed"), py::arg("frames") = 20, py::arg("dims") = std::vector<int>{32, 32, 40});
  m.def(
      "corrupt",
      [](const LabelArray& grid, double lambda, std::uint64_t seed) {
        const LabelGrid g = to_grid(grid);
        return to_array(completion::corrupt(g, phantom::default_slice_config(g.dims()), lambda, seed));
      },
      py::arg("grid"), py::arg("lam"), py::arg("seed"));

  m.def("load_grid", [](const std::filesystem::path& p) { return to_array(load_grid(p)); });
  m.def("save_grid", [](const std::filesystem::path& p, const LabelArray& a) { save_grid(p, to_grid(a)); });
  m.def("load_sequence", [](const std::filesystem::path& p) { return to_array(load_sequence(p)); });
  m.def("save_sequence", [](const std::filesystem::path& p, const LabelArray& a) { save_sequence(p, to_sequence(a)); });

  m.def("pgk_distance", &cardiacflow::pgk_distance, py::arg("m"), py::arg("tau"), py::arg("frames"));
  m.def(
      "pgk_encode",
      [](long long tau, int frames, double sigma) { return cardiacflow::pgk_encode(tau, frames, sigma).values; },
      py::arg("tau"), py::arg("frames"), py::arg("sigma") = 1.5);

  m.def(
      "dsc", [](const LabelArray& a, const LabelArray& b, int cls) { return metrics::dsc(to_grid(a), to_grid(b), cls); },
      py::arg("a"), py::arg("b"), py::arg("cls"));
  m.def(
      "hd95",
      [](const LabelArray& a, const LabelArray& b, int cls, double voxel_size) {
        return metrics::hd95(to_grid(a, voxel_size), to_grid(b, voxel_size), cls);
      },
      py::arg("a"), py::arg("b"), py::arg("cls"), py::arg("voxel_size") = 1.0);
  m.def("cycle_dsc", [](const LabelArray& seq) { return metrics::cycle_dsc(to_sequence(seq)); });
  m.def("vfid", [](const std::vector<LabelArray>& generated, const std::vector<LabelArray>& reference) {
    const auto a = curves_of(generated);
    const auto b = curves_of(reference);
    return metrics::vfid(a, b);
  });
  m.def("paired_ttest", [](const std::vector<double>& x, const std::vector<double>& y) {
    const auto r = metrics::paired_ttest(x, y);
    return py::make_tuple(r.t, r.p, r.dof);
  });

  py::class_<autoenc::AutoencoderModel>(m, "Autoencoder")
      .def_static("load", &autoenc::AutoencoderModel::load)
      .def_static(
          "train",
          [](const std::vector<LabelArray>& grids, std::size_t latent_dim, int epochs, std::uint64_t seed,
             int max_shift, double weight_decay) {
            const auto data = to_grids(grids);
            if (data.empty()) throw InvalidArgument("train: empty dataset");
            patchnet::CodecSpec spec;
            spec.dims = data.front().dims();
            spec.latent_dim = latent_dim;
            autoenc::TrainConfig cfg;
            cfg.epochs = epochs;
            cfg.seed = seed;
            cfg.max_shift = max_shift;
            cfg.weight_decay = weight_decay;
            py::gil_scoped_release release;
            return autoenc::train_autoencoder(data, spec, cfg).model;
          },
          py::arg("grids"), py::arg("latent_dim") = 32, py::arg("epochs") = 40, py::arg("seed") = 0,
          py::arg("max_shift") = 0, py::arg("weight_decay") = 0.0)
      .def("save", &autoenc::AutoencoderModel::save)
      .def_property_readonly("latent_dim", &autoenc::AutoencoderModel::latent_dim)
      .def("encode", [](const autoenc::AutoencoderModel& ae, const LabelArray& g) { return ae.encode(to_grid(g)); })
      .def("decode", [](const autoenc::AutoencoderModel& ae, const Eigen::VectorXd& z) {
        return to_array(ae.decode_labels(z));
      });

  py::class_<fm::FlowModel>(m, "LatentFlow")
      .def_static("load", &fm::FlowModel::load)
      .def("save", &fm::FlowModel::save)
      .def(
          "sample",
          [](const fm::FlowModel& f, std::size_t n, int steps, std::uint64_t seed) {
            return fm::sample_lrf(f, n, steps, seed);
          },
          py::arg("n"), py::arg("steps") = 100, py::arg("seed") = 0)
      .def(
          "generate",
          [](const fm::FlowModel& f, const autoenc::AutoencoderModel& ae, std::size_t n, int steps, std::uint64_t seed) {
            std::vector<LabelArray> out;
            for (const auto& g : fm::generate_lrf(f, ae, n, steps, seed)) out.push_back(to_array(g));
            return out;
          },
          py::arg("ae"), py::arg("n"), py::arg("steps") = 100, py::arg("seed") = 0);

  py::class_<cardiacflow::CardiacFlowModel>(m, "CardiacFlow")
      .def_static("load", &cardiacflow::CardiacFlowModel::load)
      .def("save", &cardiacflow::CardiacFlowModel::save)
      .def(
          "generate",
          [](const cardiacflow::CardiacFlowModel& cf, const autoenc::AutoencoderModel& ae, std::uint64_t seed,
             int steps) { return to_array(cf.generate_sequence(ae, seed, steps)); },
          py::arg("ae"), py::arg("seed"), py::arg("steps") = 1)
      .def(
          "generate_latents",
          [](const cardiacflow::CardiacFlowModel& cf, std::uint64_t seed, int steps) {
            return cf.generate_latents(seed, steps);
          },
          py::arg("seed"), py::arg("steps") = 1);

  py::class_<completion::CompletionModel>(m, "Completion")
      .def_static("load", &completion::CompletionModel::load)
      .def("save", &completion::CompletionModel::save)
      .def(
          "complete",
          [](const completion::CompletionModel& c, const LabelArray& sparse, bool preserve_observed) {
            return to_array(c.complete(to_grid(sparse), preserve_observed));
          },
          py::arg("sparse"), py::arg("preserve_observed") = true);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        py::gil_scoped_release release;
        return cli::run(args);
      },
      py::arg("args"));
}
