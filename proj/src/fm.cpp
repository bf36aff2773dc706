// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#include "flow4d/fm.hpp"

#include <cmath>
#include <string>

#include "flow4d/error.hpp"
#include "flow4d/parallel.hpp"

namespace flow4d::fm {

namespace {

constexpr double kModelVersion = 1.0;
const std::string kPrefix = "lrf";

Tensor sizes_tensor(const std::vector<std::size_t>& v) {
  std::vector<double> d;
  for (auto x : v) d.push_back(static_cast<double>(x));
  return Tensor::vector(std::move(d));
}

std::vector<std::size_t> tensor_sizes(const Tensor& t) {
  std::vector<std::size_t> out;
  for (double v : t.values) out.push_back(static_cast<std::size_t>(v));
  return out;
}

}  // namespace

void TimeSampler::validate() const {
  if (kind == SamplerKind::beta && !(a > 0.0 && b > 0.0)) {
    throw InvalidArgument("Beta time sampler needs a > 0 and b > 0");
  }
}

const char* sampler_name(SamplerKind k) { return k == SamplerKind::beta ? "beta" : "uniform"; }

SamplerKind parse_sampler(const std::string& name) {
  if (name == "uniform") return SamplerKind::uniform;
  if (name == "beta") return SamplerKind::beta;
  throw InvalidArgument("unknown time sampler '" + name + "' (expected uniform or beta)");
}

double sample_beta(double a, double b, std::mt19937_64& rng) {
  std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
  for (;;) {
    const double x = ga(rng);
    const double y = gb(rng);
    const double s = x + y;
    if (s > 0.0 && std::isfinite(s)) return std::clamp(x / s, 0.0, 1.0);
  }
}

double sample_time(const TimeSampler& sampler, std::mt19937_64& rng) {
  sampler.validate();
  if (sampler.kind == SamplerKind::beta) return sample_beta(sampler.a, sampler.b, rng);
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

PathSample make_path_sample(const Vector& z0, const Vector& z1, double t) {
  if (z0.size() != z1.size()) {
    throw DimensionError("path endpoints differ in length: " + std::to_string(z0.size()) + " vs " +
                         std::to_string(z1.size()));
  }
  if (!(t >= 0.0 && t <= 1.0)) throw InvalidArgument("path time must lie in [0, 1]");
  PathSample s;
  s.t = t;
  s.z0 = z0;
  s.z1 = z1;
  s.zt = (1.0 - t) * z0 + t * z1;
  s.target = z1 - z0;
  return s;
}

Matrix time_embedding(std::span<const double> t, std::size_t size) {
  const std::size_t half = size / 2;
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(t.size()), static_cast<Eigen::Index>(size));
  for (std::size_t k = 0; k < half; ++k) {
    const double w = half > 1 ? std::exp(std::log(32.0) * static_cast<double>(k) / static_cast<double>(half - 1)) : 1.0;
    for (std::size_t r = 0; r < t.size(); ++r) {
      out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(2 * k)) = std::sin(w * t[r]);
      out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(2 * k + 1)) = std::cos(w * t[r]);
    }
  }
  if (size % 2 == 1) {
    for (std::size_t r = 0; r < t.size(); ++r) out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(size - 1)) = t[r];
  }
  return out;
}

void FlowSpec::validate() const {
  if (dim < 1 || time_embed < 1 || hidden.empty() || steps < 1) {
    throw InvalidArgument("flow spec needs dim, time embedding, hidden layers and steps >= 1");
  }
}

FlowNet::FlowNet(FlowSpec spec, std::string prefix) : spec_(std::move(spec)) {
  spec_.validate();
  diffnet::ModulatedMlpSpec m;
  m.input_dim = spec_.dim;
  m.hidden_dims = spec_.hidden;
  m.output_dim = spec_.dim;
  m.conditioning_dim = spec_.time_embed + spec_.extra_cond;
  m.activation = spec_.activation;
  mlp_ = diffnet::ModulatedMlp(m, std::move(prefix));
}

Matrix FlowNet::conditioning(std::span<const double> t, const Matrix* extra) const {
  Matrix emb = time_embedding(t, spec_.time_embed);
  if (spec_.extra_cond == 0) {
    if (extra != nullptr && extra->size() > 0) throw DimensionError("flow net takes no extra conditioning");
    return emb;
  }
  if (extra == nullptr || extra->cols() != static_cast<Eigen::Index>(spec_.extra_cond) || extra->rows() != emb.rows()) {
    throw DimensionError("flow net needs " + std::to_string(spec_.extra_cond) + " extra conditioning features per row");
  }
  Matrix out(emb.rows(), emb.cols() + extra->cols());
  out << emb, *extra;
  return out;
}

Var FlowNet::velocity(diffnet::Tape& tape, diffnet::ParamStore& store, Var zt, std::span<const double> t,
                      const Matrix* extra) const {
  if (static_cast<Eigen::Index>(t.size()) != zt.rows()) throw DimensionError("one time value per row required");
  return mlp_.forward(tape, store, zt, tape.constant(conditioning(t, extra)));
}

Matrix FlowNet::velocity(const diffnet::ParamStore& store, const Matrix& zt, double t, const Matrix* extra) const {
  const std::vector<double> ts(static_cast<std::size_t>(zt.rows()), t);
  return mlp_.infer(store, zt, conditioning(ts, extra));
}

Matrix integrate_euler(const VelocityField& field, const Matrix& z0, int steps) {
  if (steps < 1) throw InvalidArgument("Euler integration needs at least one step");
  if (!z0.allFinite()) throw NonFiniteError("Euler integration: initial state is not finite");
  Matrix z = z0;
  const double h = 1.0 / static_cast<double>(steps);
  for (int i = 0; i < steps; ++i) {
    const Matrix v = field(z, static_cast<double>(i) / static_cast<double>(steps));
    if (v.rows() != z.rows() || v.cols() != z.cols()) throw DimensionError("velocity field changed the state shape");
    z += h * v;
    if (!z.allFinite()) throw NonFiniteError("Euler integration produced a non-finite state at step " + std::to_string(i));
  }
  return z;
}

Vector integrate_euler(const VelocityField& field, const Vector& z0, int steps) {
  return integrate_euler(field, Matrix(z0.transpose()), steps).row(0).transpose();
}

Var fm_loss(diffnet::Tape& tape, const FlowNet& net, diffnet::ParamStore& store, Var zt, Var target,
            std::span<const double> t, const Matrix* extra) {
  if (zt.rows() == 0) throw InvalidArgument("flow-matching loss of an empty batch");
  return diffnet::mean_row_sqnorm(diffnet::sub(net.velocity(tape, store, zt, t, extra), target));
}

FlowModel::FlowModel(FlowSpec spec, std::uint64_t seed) : net_(std::move(spec), kPrefix) {
  std::mt19937_64 rng(seed);
  net_.init(params_, rng);
}

FlowModel FlowModel::zeros(FlowSpec spec) {
  FlowModel m(std::move(spec), 0);
  for (auto& [_, p] : m.params_) p.value.setZero();
  return m;
}

VelocityField FlowModel::field() const {
  return [this](const Matrix& z, double t) { return velocity(z, t); };
}

void write_flow_spec(Checkpoint& c, const std::string& prefix, const FlowSpec& s) {
  c.add(prefix + ".spec.shape",
        Tensor::vector({double(s.dim), double(s.time_embed), double(s.extra_cond),
                        double(static_cast<int>(s.activation)), double(s.steps)}));
  c.add(prefix + ".spec.hidden", sizes_tensor(s.hidden));
}

FlowSpec read_flow_spec(const Checkpoint& c, const std::string& prefix) {
  const Vector shape = c.at(prefix + ".spec.shape").to_vector();
  if (shape.size() != 5) throw FormatError("malformed flow spec in checkpoint");
  FlowSpec s;
  s.dim = static_cast<std::size_t>(shape(0));
  s.time_embed = static_cast<std::size_t>(shape(1));
  s.extra_cond = static_cast<std::size_t>(shape(2));
  s.activation = static_cast<diffnet::Activation>(static_cast<int>(shape(3)));
  s.steps = static_cast<int>(shape(4));
  s.hidden = tensor_sizes(c.at(prefix + ".spec.hidden"));
  return s;
}

Checkpoint FlowModel::to_checkpoint() const {
  Checkpoint c;
  c.set_kind(kCheckpointKind, kModelVersion);
  write_flow_spec(c, kPrefix, spec());
  c.add(kPrefix + ".sampler",
        Tensor::vector({sampler_.kind == SamplerKind::beta ? 1.0 : 0.0, sampler_.a, sampler_.b}));
  c.add_params(params_);
  return c;
}

FlowModel FlowModel::from_checkpoint(const Checkpoint& ckpt) {
  ckpt.require_kind(kCheckpointKind, kModelVersion);
  FlowModel m = zeros(read_flow_spec(ckpt, kPrefix));
  ckpt.load_params(m.params_);
  const Vector s = ckpt.at(kPrefix + ".sampler").to_vector();
  m.sampler_ = {s(0) != 0.0 ? SamplerKind::beta : SamplerKind::uniform, s(1), s(2)};
  return m;
}

double fm_loss(FlowModel& model, std::span<const PathSample> batch) {
  if (batch.empty()) throw InvalidArgument("flow-matching loss of an empty batch");
  const auto d = static_cast<Eigen::Index>(model.spec().dim);
  Matrix zt(static_cast<Eigen::Index>(batch.size()), d), target(zt.rows(), d);
  std::vector<double> t;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].zt.size() != d || batch[i].target.size() != d) throw DimensionError("path sample has wrong dimension");
    zt.row(static_cast<Eigen::Index>(i)) = batch[i].zt.transpose();
    target.row(static_cast<Eigen::Index>(i)) = batch[i].target.transpose();
    t.push_back(batch[i].t);
  }
  diffnet::Tape tape;
  Var loss = fm_loss(tape, model.net(), model.params(), tape.constant(zt), tape.constant(target), t);
  tape.backward(loss);
  return loss.scalar();
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finalizer over the pair.
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Matrix noise_rows(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Matrix out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(stream_seed(seed, i));
    for (std::size_t j = 0; j < dim; ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = normal(rng);
  }
  return out;
}

FlowTrainResult train_lrf(const Matrix& latents, const TimeSampler& sampler, const FlowSpec& spec,
                          const FlowTrainConfig& config) {
  if (latents.rows() == 0) throw InvalidArgument("train_lrf: empty latent dataset");
  if (latents.cols() != static_cast<Eigen::Index>(spec.dim)) {
    throw DimensionError("latents have " + std::to_string(latents.cols()) + " columns, flow dim is " +
                         std::to_string(spec.dim));
  }
  if (!latents.allFinite()) throw NonFiniteError("train_lrf: latents contain non-finite values");
  sampler.validate();
  FlowTrainResult result{FlowModel(spec, config.seed), {}};
  FlowModel& model = result.model;
  model.set_sampler(sampler);
  std::mt19937_64 rng(stream_seed(config.seed, 0xF10));
  std::normal_distribution<double> normal(0.0, 1.0);
  diffnet::Adam adam({config.learning_rate});
  const auto n = static_cast<std::size_t>(latents.rows());
  const std::size_t batches = (n + config.batch_size - 1) / config.batch_size;
  const std::uint64_t total = static_cast<std::uint64_t>(config.epochs) * batches;
  const auto d = latents.cols();
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = autoenc::permutation(n, rng);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * config.batch_size;
      const std::size_t hi = std::min(n, lo + config.batch_size);
      const auto rows = static_cast<Eigen::Index>(hi - lo);
      Matrix zt(rows, d), target(rows, d);
      std::vector<double> t(hi - lo);
      for (Eigen::Index r = 0; r < rows; ++r) {
        const auto z1 = latents.row(static_cast<Eigen::Index>(order[lo + static_cast<std::size_t>(r)]));
        Eigen::RowVectorXd z0(d);
        for (Eigen::Index j = 0; j < d; ++j) z0(j) = normal(rng);
        const double tt = sample_time(sampler, rng);
        t[static_cast<std::size_t>(r)] = tt;
        zt.row(r) = (1.0 - tt) * z0 + tt * z1;
        target.row(r) = z1 - z0;
      }
      diffnet::Tape tape;
      model.params().zero_grad();
      Var loss = fm_loss(tape, model.net(), model.params(), tape.constant(std::move(zt)), tape.constant(std::move(target)), t);
      tape.backward(loss);
      adam.set_learning_rate(autoenc::cosine_schedule(config.learning_rate, config.final_learning_rate,
                                                      adam.step_count(), total));
      adam.step(model.params());
      loss_sum += loss.scalar() * static_cast<double>(rows);
    }
    const double mean = loss_sum / static_cast<double>(n);
    result.epoch_losses.push_back(mean);
    if (config.on_epoch) config.on_epoch(epoch + 1, mean);
  }
  return result;
}

Matrix sample_lrf(const FlowModel& model, std::size_t n, int steps, std::uint64_t seed) {
  if (n == 0) return Matrix(0, static_cast<Eigen::Index>(model.spec().dim));
  return model.integrate(noise_rows(n, model.spec().dim, seed), steps);
}

std::vector<LabelGrid> generate_lrf(const FlowModel& model, const autoenc::AutoencoderModel& ae, std::size_t n,
                                    int steps, std::uint64_t seed, int threads) {
  if (model.spec().dim != ae.latent_dim()) {
    throw DimensionError("flow dim " + std::to_string(model.spec().dim) + " differs from autoencoder latent dim " +
                         std::to_string(ae.latent_dim()));
  }
  const Matrix z = sample_lrf(model, n, steps, seed);
  std::vector<LabelGrid> out(n, LabelGrid(ae.dims()));
  parallel_for(n, threads, [&](std::size_t i) {
    out[i] = ae.decode_labels(ae.destandardize(z.row(static_cast<Eigen::Index>(i)).transpose()));
  });
  return out;
}

}  // namespace flow4d::fm
