// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "flow4d/autoenc.hpp"
#include "flow4d/cardiacflow.hpp"
#include "flow4d/completion.hpp"
#include "flow4d/error.hpp"
#include "flow4d/fm.hpp"
#include "flow4d/metrics.hpp"
#include "flow4d/parallel.hpp"
#include "flow4d/phantom.hpp"

namespace flow4d::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using diffnet::Matrix;

constexpr const char* kVersion = "0.1.0";
constexpr const char* kCommandList =
    "Commands:\n"
    "  phantom gen            render phantom 3D+t sequences\n"
    "  phantom slices         simulate misaligned multi-view slices\n"
    "  train ae               train the shape autoencoder\n"
    "  encode                 write standardized latents of a dataset\n"
    "  train lrf              train a latent rectified flow\n"
    "  train cardiacflow      train the periodic 3D+t generator\n"
    "  train completion       train the label-completion network\n"
    "  generate lrf           sample 3D shapes from a latent flow\n"
    "  generate cardiacflow   sample 3D+t sequences\n"
    "  complete               complete sparse slice stacks into sequences\n"
    "  eval                   DSC, HD95, cycle-DSC and vFID reports\n"
    "  ablate cardiacflow     ablation study over generator variants\n"
    "  render                 PPM slices of a grid or sequence\n"
    "Every run writes its resolved config next to its outputs; `--config FILE` reruns it.";

void log(const std::string& msg) { std::cerr << "[flow4d] " << msg << '\n'; }

// ------------------------------------------------------------ registry

struct Command {
  std::string path;
  CLI::App* app = nullptr;
  bool out_is_dir = false;
  std::string out;
  std::vector<std::pair<std::string, std::function<json()>>> values;
  std::function<void()> action;
};

template <typename T>
json to_json(const T& v) {
  return json(v);
}

struct Schedule {
  int epochs = 0;
  std::size_t batch_size = 1;
  double lr = 0.0;
  double final_lr = 0.0;
};

template <typename Config>
Schedule schedule_of(const Config& c) {
  return {c.epochs, c.batch_size, c.learning_rate, c.final_learning_rate};
}

template <typename Config>
void apply(const Schedule& s, Config& c) {
  c.epochs = s.epochs;
  c.batch_size = s.batch_size;
  c.learning_rate = s.lr;
  c.final_learning_rate = s.final_lr;
}

class Registry {
 public:
  Command& add(CLI::App* parent, const std::string& name, const std::string& path, const std::string& help,
               bool out_is_dir) {
    auto cmd = std::make_unique<Command>();
    cmd->path = path;
    cmd->app = parent->add_subcommand(name, help);
    cmd->out_is_dir = out_is_dir;
    cmd->app->add_option("--out", cmd->out, out_is_dir ? "Output directory" : "Output file")->required();
    Command* raw = cmd.get();
    raw->values.emplace_back("out", [raw] { return json(raw->out); });
    commands_.push_back(std::move(cmd));
    return *raw;
  }

  template <typename T>
  CLI::Option* option(Command& c, const std::string& key, T& var, const std::string& help) {
    c.values.emplace_back(key, [&var] { return to_json(var); });
    return c.app->add_option("--" + key, var, help)->capture_default_str();
  }

  void schedule(Command& c, Schedule& s, const std::string& batch_help) {
    option(c, "epochs", s.epochs, "Epochs");
    option(c, "batch-size", s.batch_size, batch_help);
    option(c, "lr", s.lr, "Initial learning rate");
    option(c, "final-lr", s.final_lr, "Final learning rate of the cosine schedule");
  }

  CLI::Option* flag(Command& c, const std::string& key, bool& var, const std::string& help) {
    c.values.emplace_back(key, [&var] { return json(var); });
    return c.app->add_flag("--" + key, var, help);
  }

  Command* selected() const {
    for (const auto& c : commands_) {
      if (c->app->parsed()) return c.get();
    }
    return nullptr;
  }

 private:
  std::vector<std::unique_ptr<Command>> commands_;
};

// --------------------------------------------------------------- helpers

std::vector<fs::path> list_files(const fs::path& dir, const std::vector<std::string>& suffixes) {
  if (!fs::is_directory(dir)) throw InvalidArgument("not a directory: '" + dir.string() + "'");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string name = e.path().filename().string();
    for (const auto& s : suffixes) {
      if (name.size() > s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0) {
        out.push_back(e.path());
        break;
      }
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string stem_of(const fs::path& p) {
  std::string name = p.filename().string();
  const auto dot = name.find('.');
  return dot == std::string::npos ? name : name.substr(0, dot);
}

struct NamedSequence {
  std::string name;
  ShapeSequence seq;
};

std::vector<NamedSequence> load_sequences(const fs::path& dir) {
  std::vector<NamedSequence> out;
  for (const auto& p : list_files(dir, {".seq", ".grid"})) {
    if (p.extension() == ".seq") {
      out.push_back({stem_of(p), load_sequence(p)});
    } else {
      ShapeSequence s;
      s.frames.push_back(load_grid(p));
      out.push_back({stem_of(p), std::move(s)});
    }
  }
  if (out.empty()) throw InvalidArgument("no .seq or .grid files in '" + dir.string() + "'");
  return out;
}

std::vector<LabelGrid> load_frames(const fs::path& dir) {
  std::vector<LabelGrid> out;
  for (auto& s : load_sequences(dir)) {
    for (auto& g : s.seq.frames) out.push_back(std::move(g));
  }
  return out;
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      const long v = std::stol(item);
      if (v < 1) throw InvalidArgument("");
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw InvalidArgument("expected a comma-separated list of positive sizes, got '" + text + "'");
    }
  }
  if (out.empty()) throw InvalidArgument("expected a comma-separated list of positive sizes, got '" + text + "'");
  return out;
}

std::string numbered(const std::string& prefix, std::size_t i, const std::string& ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04zu", i);
  return prefix + buf + ext;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write '" + path.string() + "'");
  os << text;
  if (!os) throw FormatError("write failed for '" + path.string() + "'");
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

fm::TimeSampler make_sampler(const std::string& kind, double a, double b) {
  fm::TimeSampler s{fm::parse_sampler(kind), a, b};
  s.validate();
  return s;
}

// ---------------------------------------------------------------- render

struct Rgb {
  std::uint8_t r, g, b;
};

constexpr Rgb kPalette[7] = {{0, 0, 0},     {220, 50, 47},  {133, 153, 0},  {38, 139, 210},
                             {181, 137, 0}, {211, 54, 130}, {128, 128, 128}};

std::string render_ppm(const LabelGrid& g, phantom::View view, int index, int scale) {
  const Dims d = g.dims();
  int w = 0, h = 0, limit = 0;
  switch (view) {
    case phantom::View::sax: w = d.nx; h = d.ny; limit = d.nz; break;
    case phantom::View::lax2ch: w = d.ny; h = d.nz; limit = d.nx; break;
    case phantom::View::lax4ch: w = d.nx; h = d.nz; limit = d.ny; break;
  }
  if (index < 0 || index >= limit) {
    throw InvalidArgument(std::string("plane ") + phantom::view_name(view) + " index " + std::to_string(index) +
                          " is outside the grid (0.." + std::to_string(limit - 1) + ")");
  }
  std::string out = "P6\n" + std::to_string(w * scale) + " " + std::to_string(h * scale) + "\n255\n";
  for (int row = h - 1; row >= 0; --row) {
    std::string line;
    for (int col = 0; col < w; ++col) {
      std::uint8_t label = 0;
      switch (view) {
        case phantom::View::sax: label = g.at(col, row, index); break;
        case phantom::View::lax2ch: label = g.at(index, col, row); break;
        case phantom::View::lax4ch: label = g.at(col, index, row); break;
      }
      const Rgb c = kPalette[std::min<int>(label, 6)];
      for (int s = 0; s < scale; ++s) {
        line.push_back(static_cast<char>(c.r));
        line.push_back(static_cast<char>(c.g));
        line.push_back(static_cast<char>(c.b));
      }
    }
    for (int s = 0; s < scale; ++s) out += line;
  }
  return out;
}

// -------------------------------------------------------------- commands

struct Options {
  int threads = 1;

  // phantom gen
  std::size_t subjects = 16;
  int frames = 20;
  std::string dims = "32,32,40";
  std::uint64_t seed = 0;

  // phantom slices
  std::string data;
  double lambda = -1.0;
  double lambda_max = 2.0;

  // train ae
  std::size_t latent_dim = patchnet::CodecSpec{}.latent_dim;
  Schedule ae_schedule = schedule_of(autoenc::TrainConfig{});
  double patch_fraction = 0.25;
  double weight_decay = 0.0;
  int max_shift = 0;
  std::string encoder_hidden = "256,128";
  std::string decoder_hidden = "128,128,128";
  int frequencies = 2;

  // encode / lrf
  std::string ae;
  std::string latents;
  std::string sampler = "uniform";
  double beta_a = 0.1;
  double beta_b = 2.0;
  std::string hidden = "128,128,128";
  std::size_t time_embed = 16;
  int lrf_steps = fm::FlowSpec{}.steps;
  int sample_steps = 0;
  Schedule lrf_schedule = schedule_of(fm::FlowTrainConfig{});
  std::string model;
  std::size_t n = 16;

  // cardiacflow
  std::string seqs;
  double sigma = 1.5;
  std::size_t embed_dim = 16;
  std::string frame_encoding = "pgk";
  std::string init_value = "learned";
  std::string time_sampler = "beta";
  std::string fusion_hidden = "64,64";
  std::string flow_hidden = "256,256,256";
  bool flow_frame_conditioning = false;
  bool freeze_embeddings = false;
  std::size_t iterations = 0;
  int cardiac_steps = 1;
  Schedule cardiac_schedule = schedule_of(cardiacflow::CardiacTrainConfig{});

  // completion
  std::string real;
  std::string lrf;
  std::string mix = "0.25:0.75";
  std::size_t completion_latent_dim = completion::default_spec(Dims{}).latent_dim;
  std::size_t steps_per_epoch = 0;
  Schedule completion_schedule = schedule_of(completion::CompletionTrainConfig{});
  bool fixed_synthetic = false;
  std::string slices;
  bool no_preserve_observed = false;

  // eval / ablate / render
  std::string pred;
  std::string ref;
  std::string metrics = "dsc,hd95,cycledsc,vfid";
  std::size_t seeds = 3;
  std::string variants = "full,scalar-enc,noise-init,uniform-t";
  std::string input;
  int frame = 1;
  std::string view = "sax";
  int index = -1;
  int scale = 4;
};

void cmd_phantom_gen(const Options& o, const std::string& out) {
  const Dims dims = Dims::parse(o.dims);
  if (o.frames < 1) throw InvalidArgument("--frames must be >= 1");
  fs::create_directories(out);
  parallel_for(o.subjects, o.threads, [&](std::size_t i) {
    const auto subject = phantom::generate_subject(o.seed + i);
    save_sequence(fs::path(out) / numbered("subject_", i, ".seq"), phantom::render_sequence(subject, o.frames, dims));
  });
  log("wrote " + std::to_string(o.subjects) + " sequences of " + std::to_string(o.frames) + " frames to " + out);
}

void cmd_phantom_slices(const Options& o, const std::string& out) {
  const auto files = load_sequences(o.data);
  fs::create_directories(out);
  parallel_for(files.size(), o.threads, [&](std::size_t i) {
    const auto& item = files[i];
    auto cfg = phantom::default_slice_config(item.seq.frames.front().dims());
    cfg.lambda_max = o.lambda_max;
    std::mt19937_64 rng(fm::stream_seed(o.seed, i));
    std::uniform_real_distribution<double> u(0.0, o.lambda_max);
    const fs::path dir = fs::path(out) / item.name;
    fs::create_directories(dir);
    for (std::size_t f = 0; f < item.seq.frames.size(); ++f) {
      cfg.lambda = o.lambda >= 0.0 ? o.lambda : u(rng);
      cfg.seed = rng();
      char name[32];
      std::snprintf(name, sizeof(name), "frame_%03zu.slices", f + 1);
      phantom::save_slices(dir / name, phantom::extract_slices(item.seq.frames[f], cfg));
    }
  });
  log("wrote slice stacks for " + std::to_string(files.size()) + " sequences to " + out);
}

void cmd_train_ae(const Options& o, const std::string& out) {
  const auto data = load_frames(o.data);
  patchnet::CodecSpec spec;
  spec.dims = data.front().dims();
  spec.latent_dim = o.latent_dim;
  spec.encoder_hidden = parse_sizes(o.encoder_hidden);
  spec.decoder_hidden = parse_sizes(o.decoder_hidden);
  spec.frequencies = o.frequencies;
  autoenc::TrainConfig cfg;
  apply(o.ae_schedule, cfg);
  cfg.patch_fraction = o.patch_fraction;
  cfg.weight_decay = o.weight_decay;
  cfg.max_shift = o.max_shift;
  cfg.seed = o.seed;
  cfg.on_epoch = [](int e, double l) { log("ae epoch " + std::to_string(e) + " loss " + format_double(l)); };
  log("training autoencoder on " + std::to_string(data.size()) + " grids");
  auto res = autoenc::train_autoencoder(data, spec, cfg);
  res.model.save(out);
}

void cmd_encode(const Options& o, const std::string& out) {
  const auto ae = autoenc::AutoencoderModel::load(o.ae);
  const auto seqs = load_sequences(o.data);
  fs::create_directories(out);
  std::ostringstream os;
  os << "file,frame";
  for (std::size_t j = 0; j < ae.latent_dim(); ++j) os << ",z" << j;
  os << '\n';
  for (const auto& s : seqs) {
    const Matrix z = ae.standardize_rows(ae.encode_batch(s.seq.frames));
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      os << s.name << ',' << r + 1;
      for (Eigen::Index j = 0; j < z.cols(); ++j) os << ',' << format_double(z(r, j));
      os << '\n';
    }
  }
  write_text(fs::path(out) / "latents.csv", os.str());
}

Matrix read_latents(const fs::path& dir) {
  const fs::path path = fs::is_directory(dir) ? dir / "latents.csv" : dir;
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open latents '" + path.string() + "'");
  std::string line;
  std::getline(is, line);
  std::vector<std::vector<double>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    int col = 0;
    while (std::getline(ss, cell, ',')) {
      if (col++ < 2) continue;
      row.push_back(std::stod(cell));
    }
    if (!rows.empty() && row.size() != rows.front().size()) throw FormatError("ragged latents file '" + path.string() + "'");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw FormatError("latents file '" + path.string() + "' has no rows");
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return m;
}

void cmd_train_lrf(const Options& o, const std::string& out) {
  const Matrix latents = read_latents(o.latents);
  fm::FlowSpec spec;
  spec.dim = static_cast<std::size_t>(latents.cols());
  spec.hidden = parse_sizes(o.hidden);
  spec.time_embed = o.time_embed;
  spec.steps = o.lrf_steps;
  fm::FlowTrainConfig cfg;
  apply(o.lrf_schedule, cfg);
  cfg.seed = o.seed;
  cfg.on_epoch = [](int e, double l) { log("lrf epoch " + std::to_string(e) + " loss " + format_double(l)); };
  auto res = fm::train_lrf(latents, make_sampler(o.sampler, o.beta_a, o.beta_b), spec, cfg);
  res.model.save(out);
}

void cmd_generate_lrf(const Options& o, const std::string& out) {
  const auto flow = fm::FlowModel::load(o.model);
  const auto ae = autoenc::AutoencoderModel::load(o.ae);
  const int steps = o.sample_steps > 0 ? o.sample_steps : flow.spec().steps;
  const auto grids = fm::generate_lrf(flow, ae, o.n, steps, o.seed, o.threads);
  fs::create_directories(out);
  for (std::size_t i = 0; i < grids.size(); ++i) save_grid(fs::path(out) / numbered("sample_", i, ".grid"), grids[i]);
  log("wrote " + std::to_string(grids.size()) + " samples to " + out);
}

cardiacflow::CardiacFlowSpec cardiac_spec(const Options& o, int frames, std::size_t latent_dim) {
  cardiacflow::CardiacFlowSpec s;
  s.frames = frames;
  s.sigma = o.sigma;
  s.embed_dim = o.embed_dim;
  s.latent_dim = latent_dim;
  s.fusion_hidden = parse_sizes(o.fusion_hidden);
  s.flow_hidden = parse_sizes(o.flow_hidden);
  s.time_embed = o.time_embed;
  s.encoding = cardiacflow::parse_encoding(o.frame_encoding);
  s.init = cardiacflow::parse_init(o.init_value);
  s.sampler = make_sampler(o.time_sampler, o.beta_a, o.beta_b);
  s.train_embeddings = !o.freeze_embeddings;
  s.flow_frame_conditioning = o.flow_frame_conditioning;
  s.validate();
  return s;
}

cardiacflow::CardiacTrainConfig cardiac_config(const Options& o, std::uint64_t seed) {
  cardiacflow::CardiacTrainConfig cfg;
  apply(o.cardiac_schedule, cfg);
  cfg.iterations_per_epoch = o.iterations;
  cfg.seed = seed;
  return cfg;
}

std::vector<ShapeSequence> sequences_only(std::vector<NamedSequence>&& named) {
  std::vector<ShapeSequence> out;
  for (auto& s : named) out.push_back(std::move(s.seq));
  return out;
}

void cmd_train_cardiacflow(const Options& o, const std::string& out) {
  const auto ae = autoenc::AutoencoderModel::load(o.ae);
  const auto seqs = sequences_only(load_sequences(o.seqs));
  const auto latents = cardiacflow::encode_sequences(ae, seqs, o.threads);
  const auto spec = cardiac_spec(o, static_cast<int>(seqs.front().frames.size()), ae.latent_dim());
  auto cfg = cardiac_config(o, o.seed);
  cfg.on_epoch = [](int e, double l) {
    if (e % 10 == 0) log("cardiacflow epoch " + std::to_string(e) + " loss " + format_double(l));
  };
  auto res = cardiacflow::train_cardiacflow(latents, spec, cfg);
  res.model.save(out);
}

std::vector<ShapeSequence> generate_sequences(const cardiacflow::CardiacFlowModel& model,
                                              const autoenc::AutoencoderModel& ae, std::size_t n, int steps,
                                              std::uint64_t seed, int threads) {
  std::vector<ShapeSequence> out(n);
  parallel_for(n, threads, [&](std::size_t i) {
    out[i] = model.generate_sequence(ae, fm::stream_seed(seed, i), steps);
  });
  return out;
}

void cmd_generate_cardiacflow(const Options& o, const std::string& out) {
  const auto model = cardiacflow::CardiacFlowModel::load(o.model);
  const auto ae = autoenc::AutoencoderModel::load(o.ae);
  const auto seqs = generate_sequences(model, ae, o.n, o.cardiac_steps, o.seed, o.threads);
  fs::create_directories(out);
  for (std::size_t i = 0; i < seqs.size(); ++i) save_sequence(fs::path(out) / numbered("sample_", i, ".seq"), seqs[i]);
  log("wrote " + std::to_string(seqs.size()) + " sequences to " + out);
}

void cmd_train_completion(const Options& o, const std::string& out) {
  const auto real = load_frames(o.real);
  const auto mix = completion::parse_mix(o.mix);
  std::unique_ptr<fm::FlowModel> flow;
  std::unique_ptr<autoenc::AutoencoderModel> ae;
  std::unique_ptr<completion::SyntheticSource> source;
  if (mix.synthetic_count(o.completion_schedule.batch_size) > 0) {
    if (o.lrf.empty() || o.ae.empty()) throw InvalidArgument("a synthetic mix needs --lrf and --ae");
    flow = std::make_unique<fm::FlowModel>(fm::FlowModel::load(o.lrf));
    ae = std::make_unique<autoenc::AutoencoderModel>(autoenc::AutoencoderModel::load(o.ae));
    source = std::make_unique<completion::SyntheticSource>(*flow, *ae, o.lrf_steps);
  }
  auto spec = completion::default_spec(real.front().dims());
  spec.latent_dim = o.completion_latent_dim;
  spec.encoder_hidden = parse_sizes(o.encoder_hidden);
  spec.decoder_hidden = parse_sizes(o.decoder_hidden);
  completion::CompletionTrainConfig cfg;
  apply(o.completion_schedule, cfg);
  cfg.steps_per_epoch = o.steps_per_epoch;
  cfg.patch_fraction = o.patch_fraction;
  cfg.slices = phantom::default_slice_config(spec.dims);
  cfg.slices.lambda_max = o.lambda_max;
  cfg.seed = o.seed;
  cfg.on_epoch = [](int e, double l) { log("completion epoch " + std::to_string(e) + " loss " + format_double(l)); };
  completion::MixSpec m = mix;
  m.resample_each_epoch = !o.fixed_synthetic;
  auto res = completion::train_completion(real, m, source.get(), spec, cfg);
  res.model.save(out);
}

void cmd_complete(const Options& o, const std::string& out) {
  const auto model = completion::CompletionModel::load(o.model);
  std::vector<fs::path> groups;
  for (const auto& e : fs::directory_iterator(o.slices)) {
    if (e.is_directory()) groups.push_back(e.path());
  }
  std::sort(groups.begin(), groups.end());
  if (groups.empty()) groups.push_back(o.slices);
  fs::create_directories(out);
  for (const auto& dir : groups) {
    const auto files = list_files(dir, {".slices"});
    if (files.empty()) throw InvalidArgument("no .slices files in '" + dir.string() + "'");
    std::vector<phantom::SliceStack> stacks;
    for (const auto& f : files) stacks.push_back(phantom::load_slices(f));
    const auto seq = completion::complete_sequence(model, stacks, static_cast<int>(stacks.size()), o.threads,
                                                   !o.no_preserve_observed);
    save_sequence(fs::path(out) / (dir.filename().string() + ".seq"), seq);
  }
  log("completed " + std::to_string(groups.size()) + " sequences into " + out);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<metrics::VolumeCurve> curves_of(const std::vector<NamedSequence>& seqs) {
  std::vector<metrics::VolumeCurve> out;
  for (const auto& s : seqs) out.push_back(metrics::volume_curve(s.seq, s.seq.frames.front().voxel_size()));
  return out;
}

void cmd_eval(const Options& o, const std::string& out) {
  const auto wanted = split_list(o.metrics);
  bool dsc = false, hd = false, cyc = false, fid = false;
  for (const auto& m : wanted) {
    if (m == "dsc") dsc = true;
    else if (m == "hd95") hd = true;
    else if (m == "cycledsc") cyc = true;
    else if (m == "vfid") fid = true;
    else throw InvalidArgument("unknown metric '" + m + "' (expected dsc, hd95, cycledsc, vfid)");
  }
  const auto pred = load_sequences(o.pred);
  const bool need_ref = dsc || hd || fid;
  std::vector<NamedSequence> ref;
  if (need_ref) ref = load_sequences(o.ref.empty() ? throw InvalidArgument("--ref is required for dsc, hd95 and vfid")
                                                   : o.ref);
  std::map<std::string, const ShapeSequence*> by_name;
  for (const auto& r : ref) by_name[r.name] = &r.seq;

  std::ostringstream os;
  os << "subject_id,frame,class,metric,value\n";
  if (dsc || hd) {
    std::size_t pairs = 0;
    for (const auto& p : pred) {
      const auto it = by_name.find(p.name);
      if (it == by_name.end()) continue;
      const ShapeSequence& r = *it->second;
      if (r.frames.size() != p.seq.frames.size()) {
        throw DimensionError("'" + p.name + "' has " + std::to_string(p.seq.frames.size()) + " frames, reference has " +
                             std::to_string(r.frames.size()));
      }
      for (std::size_t f = 0; f < r.frames.size(); ++f) {
        if (p.seq.frames[f].dims() != r.frames[f].dims()) {
          throw DimensionError("'" + p.name + "' frame " + std::to_string(f + 1) + " has dims " +
                               p.seq.frames[f].dims().str() + " but the reference has dims " +
                               r.frames[f].dims().str());
        }
      }
      ++pairs;
      std::vector<std::string> rows(p.seq.frames.size());
      parallel_for(p.seq.frames.size(), o.threads, [&](std::size_t f) {
        std::string text;
        for (auto c : metrics::kForegroundClasses) {
          const std::string prefix = p.name + "," + std::to_string(f + 1) + "," + label_name(c) + ",";
          if (dsc) text += prefix + "dsc," + format_double(metrics::dsc(p.seq.frames[f], r.frames[f], c)) + "\n";
          if (hd) {
            double v = std::nan("");
            try {
              v = metrics::hd95(p.seq.frames[f], r.frames[f], c);
            } catch (const UndefinedMetric&) {
            }
            text += prefix + "hd95," + format_double(v) + "\n";
          }
        }
        rows[f] = std::move(text);
      });
      for (const auto& t : rows) os << t;
    }
    if (pairs == 0) throw InvalidArgument("no prediction in '" + o.pred + "' has a same-named reference in '" + o.ref + "'");
  }
  if (cyc) {
    for (const auto& p : pred) os << p.name << ",,foreground,cycledsc," << format_double(metrics::cycle_dsc(p.seq)) << '\n';
  }
  if (fid) {
    const auto a = curves_of(pred);
    const auto b = curves_of(ref);
    os << "all,,,vfid," << format_double(metrics::vfid(a, b)) << '\n';
  }
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  write_text(out, os.str());
}

void cmd_ablate_cardiacflow(const Options& o, const std::string& out) {
  const auto ae = autoenc::AutoencoderModel::load(o.ae);
  auto train = load_sequences(o.seqs);
  const auto reference = o.ref.empty() ? train : load_sequences(o.ref);
  const auto ref_curves = curves_of(reference);
  const auto seqs = sequences_only(std::move(train));
  const auto latents = cardiacflow::encode_sequences(ae, seqs, o.threads);
  const int frames = static_cast<int>(seqs.front().frames.size());
  std::ostringstream os;
  os << "variant,seed,metric,value\n";
  for (const auto& variant : split_list(o.variants)) {
    Options v = o;
    if (variant == "scalar-enc") v.frame_encoding = "scalar";
    else if (variant == "noise-init") v.init_value = "noise";
    else if (variant == "uniform-t") v.time_sampler = "uniform";
    else if (variant != "full") throw InvalidArgument("unknown variant '" + variant + "'");
    const auto spec = cardiac_spec(v, frames, ae.latent_dim());
    for (std::size_t s = 0; s < o.seeds; ++s) {
      const std::uint64_t seed = o.seed + s;
      log("ablation " + variant + " seed " + std::to_string(seed));
      const auto model = cardiacflow::train_cardiacflow(latents, spec, cardiac_config(o, seed)).model;
      const auto gen = generate_sequences(model, ae, o.n, o.cardiac_steps, fm::stream_seed(seed, 0xAB), o.threads);
      std::vector<metrics::VolumeCurve> curves;
      double cycle = 0.0;
      for (const auto& g : gen) {
        curves.push_back(metrics::volume_curve(g, g.frames.front().voxel_size()));
        cycle += metrics::cycle_dsc(g);
      }
      os << variant << ',' << seed << ",vfid," << format_double(metrics::vfid(curves, ref_curves)) << '\n';
      os << variant << ',' << seed << ",cycledsc," << format_double(cycle / static_cast<double>(gen.size())) << '\n';
    }
  }
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  write_text(out, os.str());
}

void cmd_render(const Options& o, const std::string& out) {
  const fs::path in(o.input);
  ShapeSequence seq;
  if (in.extension() == ".seq") seq = load_sequence(in);
  else seq.frames.push_back(load_grid(in));
  if (o.frame < 1 || o.frame > static_cast<int>(seq.frames.size())) {
    throw InvalidArgument("frame " + std::to_string(o.frame) + " outside 1.." + std::to_string(seq.frames.size()));
  }
  if (o.scale < 1) throw InvalidArgument("--scale must be >= 1");
  const LabelGrid& g = seq.frames[static_cast<std::size_t>(o.frame - 1)];
  const auto view = phantom::parse_view(o.view);
  const Dims d = g.dims();
  const int limit = view == phantom::View::sax ? d.nz : view == phantom::View::lax2ch ? d.nx : d.ny;
  const int index = o.index >= 0 ? o.index : limit / 2;
  const std::string image = render_ppm(g, view, index, o.scale);
  fs::create_directories(out);
  char name[96];
  std::snprintf(name, sizeof(name), "_f%03d_%s%03d.ppm", o.frame, phantom::view_name(view), index);
  write_text(fs::path(out) / (stem_of(in) + name), image);
}

// ------------------------------------------------------------ config io

fs::path config_path(const Command& c) {
  return c.out_is_dir ? fs::path(c.out) / "config.json" : fs::path(c.out + ".config.json");
}

std::vector<std::string> args_from_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open config '" + path.string() + "'");
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw FormatError("config '" + path.string() + "' is not valid JSON");
  }
  if (!j.is_object() || !j.contains("command") || !j["command"].is_string()) {
    throw FormatError("config '" + path.string() + "' lacks a \"command\" entry");
  }
  if (j.value("flow4d_config", 0) != 1) throw VersionError("config '" + path.string() + "' has an unsupported version");
  std::vector<std::string> args;
  if (j.contains("threads")) {
    args.push_back("--threads");
    args.push_back(j["threads"].dump());
  }
  std::stringstream ss(j["command"].get<std::string>());
  std::string word;
  while (ss >> word) args.push_back(word);
  for (const auto& [key, value] : j.items()) {
    if (key == "command" || key == "threads" || key == "flow4d_config") continue;
    if (value.is_boolean()) {
      if (value.get<bool>()) args.push_back("--" + key);
      continue;
    }
    args.push_back("--" + key);
    args.push_back(value.is_string() ? value.get<std::string>() : value.dump());
  }
  return args;
}

}  // namespace

int run(const std::vector<std::string>& input) {
  std::vector<std::string> args = input;
  // `--config FILE` expands in place into the recorded command line; later flags override it.
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" || args[i].rfind("--config=", 0) == 0) {
      std::string file;
      std::size_t span = 1;
      if (args[i] == "--config") {
        if (i + 1 >= args.size()) {
          std::cerr << "flow4d: error: --config needs a file\n";
          return 2;
        }
        file = args[i + 1];
        span = 2;
      } else {
        file = args[i].substr(9);
      }
      try {
        auto expanded = args_from_config(file);
        args.erase(args.begin() + static_cast<long>(i), args.begin() + static_cast<long>(i + span));
        args.insert(args.begin() + static_cast<long>(i), expanded.begin(), expanded.end());
      } catch (const std::exception& e) {
        std::cerr << "flow4d: error: " << e.what() << '\n';
        return 1;
      }
      break;
    }
  }

  CLI::App app("flow4d: flow-matching cardiac shape generation and completion on procedural phantoms", "flow4d");
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.footer(kCommandList);
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  Options o;
  app.add_option("--threads", o.threads, "Worker threads for parallel stages")->capture_default_str();
  app.add_option("--config", "Rerun from a resolved config file");

  Registry reg;
  auto* phantom_app = app.add_subcommand("phantom", "Procedural phantom data")->require_subcommand(1);
  auto* train_app = app.add_subcommand("train", "Model training")->require_subcommand(1);
  auto* generate_app = app.add_subcommand("generate", "Sampling")->require_subcommand(1);
  auto* ablate_app = app.add_subcommand("ablate", "Ablation studies")->require_subcommand(1);
  for (auto* a : {phantom_app, train_app, generate_app, ablate_app}) a->fallthrough();

  {
    auto& c = reg.add(phantom_app, "gen", "phantom gen", "Render phantom 3D+t sequences", true);
    reg.option(c, "subjects", o.subjects, "Number of subjects");
    reg.option(c, "frames", o.frames, "Frames per cycle M");
    reg.option(c, "dims", o.dims, "Grid dims X,Y,Z");
    reg.option(c, "seed", o.seed, "Seed of the first subject");
    c.action = [&o, &c] { cmd_phantom_gen(o, c.out); };
  }
  {
    auto& c = reg.add(phantom_app, "slices", "phantom slices", "Simulate misaligned multi-view slices", true);
    reg.option(c, "data", o.data, "Directory of sequences")->required();
    reg.option(c, "lambda", o.lambda, "Shift level; negative draws U[0, lambda-max] per frame");
    reg.option(c, "lambda-max", o.lambda_max, "Upper shift level");
    reg.option(c, "seed", o.seed, "Seed");
    c.action = [&o, &c] { cmd_phantom_slices(o, c.out); };
  }
  {
    auto& c = reg.add(train_app, "ae", "train ae", "Train the shape autoencoder", false);
    reg.option(c, "data", o.data, "Directory of sequences or grids")->required();
    reg.option(c, "latent-dim", o.latent_dim, "Latent dimension d");
    reg.schedule(c, o.ae_schedule, "Grids per step");
    reg.option(c, "patch-fraction", o.patch_fraction, "Decoder patches scored per grid and step");
    reg.option(c, "weight-decay", o.weight_decay, "Decoupled weight decay");
    reg.option(c, "max-shift", o.max_shift, "Random translation augmentation in voxels per axis");
    reg.option(c, "encoder-hidden", o.encoder_hidden, "Encoder hidden widths");
    reg.option(c, "decoder-hidden", o.decoder_hidden, "Decoder hidden widths");
    reg.option(c, "frequencies", o.frequencies, "Fourier position frequencies");
    reg.option(c, "seed", o.seed, "Seed");
    c.action = [&o, &c] { cmd_train_ae(o, c.out); };
  }
  {
    auto& c = reg.add(&app, "encode", "encode", "Write standardized latents of a dataset", true);
    reg.option(c, "ae", o.ae, "Autoencoder checkpoint")->required();
    reg.option(c, "data", o.data, "Directory of sequences or grids")->required();
    c.action = [&o, &c] { cmd_encode(o, c.out); };
  }
  {
    auto& c = reg.add(train_app, "lrf", "train lrf", "Train a latent rectified flow", false);
    reg.option(c, "latents", o.latents, "Directory holding latents.csv")->required();
    reg.option(c, "sampler", o.sampler, "Time sampler: uniform or beta");
    reg.option(c, "beta-a", o.beta_a, "Beta sampler a");
    reg.option(c, "beta-b", o.beta_b, "Beta sampler b");
    reg.option(c, "hidden", o.hidden, "Velocity network hidden widths");
    reg.option(c, "time-embed", o.time_embed, "Time embedding size");
    reg.option(c, "steps", o.lrf_steps, "Default Euler steps T");
    reg.schedule(c, o.lrf_schedule, "Latents per step");
    reg.option(c, "seed", o.seed, "Seed");
    c.action = [&o, &c] { cmd_train_lrf(o, c.out); };
  }
  {
    auto& c = reg.add(generate_app, "lrf", "generate lrf", "Sample shapes from a latent flow", true);
    reg.option(c, "model", o.model, "Flow checkpoint")->required();
    reg.option(c, "ae", o.ae, "Autoencoder checkpoint")->required();
    reg.option(c, "n", o.n, "Number of samples");
    reg.option(c, "steps", o.sample_steps, "Euler steps T (0: model default)");
    reg.option(c, "seed", o.seed, "Seed");
    c.action = [&o, &c] { cmd_generate_lrf(o, c.out); };
  }
  auto cardiac_options = [&](Command& c) {
    reg.option(c, "sigma", o.sigma, "PGK width");
    reg.option(c, "beta-a", o.beta_a, "Beta sampler a");
    reg.option(c, "beta-b", o.beta_b, "Beta sampler b");
    reg.option(c, "embed-dim", o.embed_dim, "Subject embedding size k");
    reg.option(c, "frame-encoding", o.frame_encoding, "pgk or scalar");
    reg.option(c, "init-value", o.init_value, "learned or noise");
    reg.option(c, "time-sampler", o.time_sampler, "beta or uniform");
    reg.option(c, "fusion-hidden", o.fusion_hidden, "Fusion network hidden widths");
    reg.option(c, "flow-hidden", o.flow_hidden, "Velocity network hidden widths");
    reg.option(c, "time-embed", o.time_embed, "Time embedding size");
    reg.flag(c, "flow-frame-conditioning", o.flow_frame_conditioning, "Also feed the frame encoding to the flow");
    reg.flag(c, "freeze-embeddings", o.freeze_embeddings, "Keep subject embeddings at their initial values");
    reg.schedule(c, o.cardiac_schedule, "Samples per step");
    reg.option(c, "iterations", o.iterations, "Steps per epoch (0: subjects * M / batch)");
    reg.option(c, "seed", o.seed, "Seed");
  };
  {
    auto& c = reg.add(train_app, "cardiacflow", "train cardiacflow", "Train the periodic 3D+t generator", false);
    reg.option(c, "seqs", o.seqs, "Directory of training sequences")->required();
    reg.option(c, "ae", o.ae, "Autoencoder checkpoint")->required();
    cardiac_options(c);
    c.action = [&o, &c] { cmd_train_cardiacflow(o, c.out); };
  }
  {
    auto& c = reg.add(generate_app, "cardiacflow", "generate cardiacflow", "Sample 3D+t sequences", true);
    reg.option(c, "model", o.model, "CardiacFlow checkpoint")->required();
    reg.option(c, "ae", o.ae, "Autoencoder checkpoint")->required();
    reg.option(c, "n", o.n, "Number of sequences");
    reg.option(c, "steps", o.cardiac_steps, "Euler steps T");
    reg.option(c, "seed", o.seed, "Seed");
    c.action = [&o, &c] { cmd_generate_cardiacflow(o, c.out); };
  }
  {
    auto& c = reg.add(train_app, "completion", "train completion", "Train the label-completion network", false);
    reg.option(c, "real", o.real, "Directory of real sequences or grids")->required();
    reg.option(c, "lrf", o.lrf, "Latent flow checkpoint for synthetic shapes");
    reg.option(c, "ae", o.ae, "Autoencoder checkpoint for synthetic shapes");
    reg.option(c, "mix", o.mix, "REAL:SYNTHETIC fractions");
    reg.flag(c, "fixed-synthetic", o.fixed_synthetic, "Draw one synthetic pool before training");
    reg.option(c, "steps", o.lrf_steps, "Euler steps T for synthetic shapes");
    reg.option(c, "lambda-max", o.lambda_max, "Training shift levels U[0, lambda-max]");
    reg.option(c, "latent-dim", o.completion_latent_dim, "Latent dimension");
    reg.option(c, "encoder-hidden", o.encoder_hidden, "Encoder hidden widths");
    reg.option(c, "decoder-hidden", o.decoder_hidden, "Decoder hidden widths");
    reg.schedule(c, o.completion_schedule, "Grids per step");
    reg.option(c, "steps-per-epoch", o.steps_per_epoch, "Steps per epoch (0: real pool / batch)");
    reg.option(c, "patch-fraction", o.patch_fraction, "Decoder patches scored per grid and step");
    reg.option(c, "seed", o.seed, "Seed");
    c.action = [&o, &c] { cmd_train_completion(o, c.out); };
  }
  {
    auto& c = reg.add(&app, "complete", "complete", "Complete slice stacks into sequences", true);
    reg.option(c, "model", o.model, "Completion checkpoint")->required();
    reg.option(c, "slices", o.slices, "Directory of per-sequence slice directories")->required();
    reg.flag(c, "no-preserve-observed", o.no_preserve_observed, "Use the network argmax on observed voxels too");
    c.action = [&o, &c] { cmd_complete(o, c.out); };
  }
  {
    auto& c = reg.add(&app, "eval", "eval", "Evaluation report", false);
    reg.option(c, "pred", o.pred, "Directory of predicted sequences or grids")->required();
    reg.option(c, "ref", o.ref, "Directory of reference sequences or grids");
    reg.option(c, "metrics", o.metrics, "Comma list of dsc, hd95, cycledsc, vfid");
    c.action = [&o, &c] { cmd_eval(o, c.out); };
  }
  {
    auto& c = reg.add(ablate_app, "cardiacflow", "ablate cardiacflow", "Generator ablation study", false);
    reg.option(c, "seqs", o.seqs, "Directory of training sequences")->required();
    reg.option(c, "ae", o.ae, "Autoencoder checkpoint")->required();
    reg.option(c, "ref", o.ref, "Reference sequences for vFID (default: training set)");
    reg.option(c, "seeds", o.seeds, "Seeds per variant");
    reg.option(c, "variants", o.variants, "Comma list of full, scalar-enc, noise-init, uniform-t");
    reg.option(c, "n", o.n, "Generated sequences per run");
    reg.option(c, "steps", o.cardiac_steps, "Euler steps T");
    cardiac_options(c);
    c.action = [&o, &c] { cmd_ablate_cardiacflow(o, c.out); };
  }
  {
    auto& c = reg.add(&app, "render", "render", "PPM slice of a grid or sequence", true);
    reg.option(c, "input", o.input, "Grid or sequence file")->required();
    reg.option(c, "frame", o.frame, "Frame (1-based)");
    reg.option(c, "view", o.view, "sax, lax2ch or lax4ch");
    reg.option(c, "index", o.index, "Plane index along the view axis (negative: middle)");
    reg.option(c, "scale", o.scale, "Pixels per voxel");
    c.action = [&o, &c] { cmd_render(o, c.out); };
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion&) {
    std::cout << kVersion << '\n';
    return 0;
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "flow4d: error: " << msg << " (see --help)\n";
    return 2;
  }

  Command* cmd = reg.selected();
  if (cmd == nullptr) {
    std::cerr << "flow4d: error: no command given (see --help)\n";
    return 2;
  }
  if (o.threads < 1) {
    std::cerr << "flow4d: error: --threads must be >= 1\n";
    return 2;
  }
  try {
    cmd->action();
    json resolved;
    resolved["flow4d_config"] = 1;
    resolved["command"] = cmd->path;
    resolved["threads"] = o.threads;
    for (const auto& [key, get] : cmd->values) resolved[key] = get();
    write_text(config_path(*cmd), resolved.dump(2) + "\n");
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "flow4d: error: " << msg << '\n';
    return 1;
  }
  return 0;
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace flow4d::cli
