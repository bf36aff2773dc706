// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "flow4d/autoenc.hpp"
#include "flow4d/cardiacflow.hpp"
#include "flow4d/error.hpp"
#include "flow4d/metrics.hpp"
#include "support/gradcheck.hpp"

using namespace flow4d;
using namespace flow4d::cardiacflow;

namespace {

CardiacFlowSpec small_spec(int frames, std::size_t latent) {
  CardiacFlowSpec s;
  s.frames = frames;
  s.embed_dim = 4;
  s.latent_dim = latent;
  s.fusion_hidden = {8, 8};
  s.flow_hidden = {16, 16};
  s.time_embed = 8;
  return s;
}

std::vector<Matrix> random_latents(std::size_t subjects, int frames, Eigen::Index dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<Matrix> out;
  for (std::size_t s = 0; s < subjects; ++s) {
    Matrix m(frames, dim);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    out.push_back(m);
  }
  return out;
}

}  // namespace

TEST_CASE("PGK distance matches the brute-force circular distance") {
  for (long long m_frames : {2, 3, 20, 50}) {
    for (long long m = 1; m <= m_frames; ++m) {
      for (long long tau = 1; tau <= m_frames; ++tau) {
        const long long diff = std::llabs(m - tau);
        const double oracle = static_cast<double>(std::min(diff, m_frames - diff));
        CHECK(pgk_distance(m, tau, m_frames) == oracle);
        CHECK(pgk_distance(m, tau + m_frames, m_frames) == oracle);
        CHECK(pgk_distance(m, tau - 3 * m_frames, m_frames) == oracle);
      }
    }
  }
  CHECK_THROWS_AS(pgk_distance(1, 1, 1), InvalidArgument);
}

TEST_CASE("PGK kernel values, symmetry and row sums") {
  const auto e = pgk_encode(5, 20, 1.5);
  CHECK(e.values(4) == doctest::Approx(0.26596).epsilon(1e-4));
  CHECK(e.values(3) == doctest::Approx(0.21296).epsilon(1e-4));
  CHECK(e.values(5) == e.values(3));
  Eigen::Index arg = 0;
  e.values.maxCoeff(&arg);
  CHECK(arg == 4);
  const double sum = e.values.sum();
  for (int m_frames : {3, 20, 50}) {
    const double ref = pgk_encode(1, m_frames, 1.5).values.sum();
    for (int tau = 1; tau <= m_frames; ++tau) {
      const auto k = pgk_encode(tau, m_frames, 1.5);
      CHECK(std::abs(k.values.sum() - ref) < 1e-12);
      k.values.maxCoeff(&arg);
      CHECK(arg == tau - 1);
      for (int m = 1; m <= m_frames; ++m) CHECK(k.values(m - 1) == pgk_encode(m, m_frames, 1.5).values(tau - 1));
    }
  }
  CHECK(sum > 0.0);
  CHECK_THROWS_AS(pgk_encode(1, 20, 0.0), InvalidArgument);
  CHECK_THROWS_AS(pgk_encode(1, 20, -1.0), InvalidArgument);
}

TEST_CASE("embedding prior: hand-computed covariance and shrinkage") {
  Matrix e(2, 2);
  e << 1, 0, -1, 0;
  const auto p = embedding_prior(e);
  CHECK(p.mean.isZero(0.0));
  CHECK(p.cov(0, 0) == 2.0 + 1e-6);
  CHECK(p.cov(1, 1) == 1e-6);
  CHECK(p.cov(0, 1) == 0.0);
  const auto same = embedding_prior(Matrix::Constant(5, 3, 0.7));
  CHECK((same.cov - 1e-6 * Matrix::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-18);
  CHECK_THROWS_AS(embedding_prior(Matrix::Zero(1, 3)), InvalidArgument);
}

TEST_CASE("prior samples have the prior moments") {
  GaussianPrior p{Vector(2), Matrix(2, 2)};
  p.mean << 1.0, -2.0;
  p.cov << 2.0, 0.6, 0.6, 0.5;
  std::mt19937_64 rng(3);
  Matrix s(20000, 2);
  for (Eigen::Index i = 0; i < s.rows(); ++i) s.row(i) = sample_gaussian(p, rng).transpose();
  const Vector mean = s.colwise().mean().transpose();
  const Matrix c = s.rowwise() - mean.transpose();
  const Matrix cov = c.transpose() * c / double(s.rows() - 1);
  CHECK((mean - p.mean).norm() < 0.05);
  CHECK((cov - p.cov).norm() < 0.08);
}

TEST_CASE("initial value: zero network, periodicity and encodings") {
  auto zero = CardiacFlowModel::zeros(small_spec(6, 3), 2);
  CHECK(zero.initial_value(Vector::Ones(4), 2).isZero(0.0));
  CardiacFlowModel model(small_spec(6, 3), 2, 1);
  const Vector eps = Vector::LinSpaced(4, -1.0, 1.0);
  CHECK(model.initial_value(eps, 2) == model.initial_value(eps, 8));
  CHECK(model.initial_value(eps, 2) != model.initial_value(eps, 3));
  CHECK(model.frame_encoding(3).size() == 6);
  CHECK_THROWS_AS(model.initial_value(Vector::Ones(3), 1), DimensionError);
  CHECK_THROWS_AS(model.frame_encoding(0), InvalidArgument);
  auto scalar_spec = small_spec(6, 3);
  scalar_spec.encoding = FrameEncoding::scalar;
  CardiacFlowModel scalar(scalar_spec, 2, 1);
  CHECK(scalar.frame_encoding(3).size() == 1);
  CHECK(scalar.frame_encoding(3)(0) == 0.5);
  CHECK(scalar.frame_encoding(9)(0) == 0.5);
}

TEST_CASE("fusion and embedding gradients agree with finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (auto encoding : {FrameEncoding::pgk, FrameEncoding::scalar}) {
      auto spec = small_spec(5, 3);
      spec.encoding = encoding;
      spec.flow_frame_conditioning = seed % 2 == 1;
      CardiacFlowModel model(spec, 3, seed);
      std::mt19937_64 rng(seed + 50);
      std::normal_distribution<double> n(0.0, 0.4);
      for (auto& [name, p] : model.params())
        for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = n(rng);
      const std::vector<Eigen::Index> subjects{0, 2, 2, 1};
      const std::vector<long long> taus{1, 3, 5, 2};
      const std::vector<double> t{0.1, 0.4, 0.0, 0.9};
      const Matrix z1 = Matrix::Random(4, 3);
      Vector tv(4), omt(4);
      for (int i = 0; i < 4; ++i) {
        tv(i) = t[static_cast<std::size_t>(i)];
        omt(i) = 1.0 - tv(i);
      }
      const Matrix enc = model.frame_encodings(taus);
      auto loss = [&](diffnet::Tape& tape, diffnet::ParamStore& s) {
        auto eps = diffnet::gather_rows(tape.param(s.at("cf.embed")), subjects);
        auto z0 = model.initial_values(tape, eps, taus);
        auto zt = diffnet::add(diffnet::scale_rows(z0, omt), tape.constant(tv.asDiagonal() * z1));
        auto target = diffnet::sub(tape.constant(z1), z0);
        return fm::fm_loss(tape, model.flow(), s, zt, target, t, spec.flow_frame_conditioning ? &enc : nullptr);
      };
      auto r = flow4d::testing::check_gradients(model.params(), loss, 1e-5, 20, seed);
      INFO("seed " << seed << " worst " << r.worst_name << " rel " << r.worst_relative);
      CHECK(r.failures == 0);
    }
  }
}

TEST_CASE("training: input validation, frozen embeddings and determinism") {
  const auto spec = small_spec(4, 3);
  CardiacTrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.seed = 2;
  auto data = random_latents(3, 4, 3, 1);
  CHECK_THROWS_AS(train_cardiacflow(random_latents(3, 5, 3, 1), spec, cfg), DimensionError);
  CHECK_THROWS_AS(train_cardiacflow(random_latents(3, 4, 2, 1), spec, cfg), DimensionError);

  auto a = train_cardiacflow(data, spec, cfg);
  auto b = train_cardiacflow(data, spec, cfg);
  CHECK(a.epoch_losses == b.epoch_losses);
  CHECK(a.model.embeddings() == b.model.embeddings());
  CHECK(a.model.embeddings() != CardiacFlowModel(spec, 3, cfg.seed).embeddings());

  auto frozen = spec;
  frozen.train_embeddings = false;
  auto f = train_cardiacflow(data, frozen, cfg);
  CHECK(f.model.embeddings() == CardiacFlowModel(frozen, 3, cfg.seed).embeddings());
  CHECK(f.model.has_prior());

  CHECK(a.model.generate_latents(5, 1) == b.model.generate_latents(5, 1));
  CHECK(a.model.generate_latents(5, 1).rows() == 4);
  CHECK(a.model.generate_latents(5, 1) != a.model.generate_latents(6, 1));
  CHECK_THROWS_AS(CardiacFlowModel(spec, 3, 0).generate_latents(1, 1), StateError);

  const auto path = std::filesystem::temp_directory_path() / "flow4d_test_cf.ckpt";
  a.model.save(path);
  auto loaded = CardiacFlowModel::load(path);
  std::filesystem::remove(path);
  CHECK(loaded.generate_latents(5, 3) == a.model.generate_latents(5, 3));
  CHECK(loaded.prior().cov == a.model.prior().cov);
}

TEST_CASE("noise-initialised variant uses a standard-normal prior") {
  auto spec = small_spec(4, 3);
  spec.init = InitValue::noise;
  CardiacTrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  auto r = train_cardiacflow(random_latents(2, 4, 3, 3), spec, cfg);
  CHECK(r.model.prior().mean.isZero(0.0));
  CHECK(r.model.prior().cov == Matrix::Identity(4, 4));
  CHECK(r.model.embeddings() == CardiacFlowModel(spec, 2, cfg.seed).embeddings());
}

TEST_CASE("single subject, two frames: one-step generation reproduces both frames") {
  patchnet::CodecSpec cs;
  cs.dims = Dims{8, 8, 8};
  cs.latent_dim = 4;
  cs.encoder_hidden = {16};
  cs.decoder_hidden = {32};
  cs.frequencies = 1;
  std::vector<LabelGrid> frames(2, LabelGrid(cs.dims));
  for (int k = 1; k < 7; ++k)
    for (int j = 1; j < 7; ++j)
      for (int i = 1; i < 7; ++i) {
        frames[0].at(i, j, k) = i < 4 ? kLV : kRV;
        frames[1].at(i, j, k) = (i < 3 && k < 5) ? kLV : kLA;
      }
  autoenc::TrainConfig ac;
  ac.epochs = 400;
  ac.batch_size = 2;
  ac.patch_fraction = 1.0;
  ac.learning_rate = 1e-2;
  ac.final_learning_rate = 1e-3;
  auto ae = autoenc::train_autoencoder(frames, cs, ac).model;
  for (const auto& g : frames) REQUIRE(metrics::dsc(g, ae.decode_labels(ae.encode(g)), kLV) > 0.95);

  ShapeSequence seq;
  seq.frames = frames;
  const ShapeSequence seqs[1] = {seq};
  auto latents = encode_sequences(ae, seqs);
  auto spec = small_spec(2, 4);
  CardiacTrainConfig cfg;
  cfg.epochs = 1500;
  cfg.batch_size = 8;
  cfg.iterations_per_epoch = 1;
  cfg.learning_rate = 3e-3;
  cfg.final_learning_rate = 1e-4;
  auto model = train_cardiacflow(latents, spec, cfg).model;
  const Vector eps = model.embeddings().row(0).transpose();
  CHECK(model.prior().mean == eps);
  const std::vector<long long> taus{1, 2};
  const Matrix z = model.latents_for(eps, taus, 1);
  for (int f = 0; f < 2; ++f) {
    const LabelGrid g = ae.decode_labels(ae.destandardize(z.row(f).transpose()));
    double total = 0.0;
    int n = 0;
    for (auto c : metrics::kForegroundClasses) {
      if (frames[static_cast<std::size_t>(f)].count(c) == 0) continue;
      total += metrics::dsc(frames[static_cast<std::size_t>(f)], g, c);
      ++n;
    }
    CHECK(total / n >= 0.9);
  }
}
