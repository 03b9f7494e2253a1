#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "funkflow/errors.hpp"
#include "funkflow/flow_model.hpp"
#include "funkflow/flow_train.hpp"
#include "funkflow/pk_sim.hpp"

namespace funkflow::io {

using nlohmann::json;
namespace fs = std::filesystem;

inline constexpr int kCheckpointVersion = 1;

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << text;
}

inline json parse_json(const std::string& text, const std::string& origin) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(origin + ": malformed JSON: " + e.what());
  }
}

inline json read_json(const fs::path& path) { return parse_json(read_text(path), path.string()); }

namespace detail {

template <class T>
T get(const json& j, const std::string& key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw ValidationError(where + "." + key + ": missing field");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(where + "." + key + ": wrong type");
  }
}

template <class T>
T get_or(const json& j, const std::string& key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  return get<T>(j, key, where);
}

inline pk::Interval interval(const json& j, const std::string& key, pk::Interval fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  const auto v = get<std::vector<double>>(j, key, where);
  if (v.size() != 2) throw ValidationError(where + "." + key + ": expected [lo, hi]");
  return {v[0], v[1]};
}

inline pk::IntInterval int_interval(const json& j, const std::string& key, pk::IntInterval fallback,
                                    const std::string& where) {
  if (!j.contains(key)) return fallback;
  const auto v = get<std::vector<long>>(j, key, where);
  if (v.size() != 2) throw ValidationError(where + "." + key + ": expected [lo, hi]");
  return {v[0], v[1]};
}

}  // namespace detail

// Field names mirror the MetaStudyPrior members. Missing fields keep
// their defaults.
inline pk::MetaStudyPrior prior_from_json(const json& j) {
  using namespace detail;
  const std::string w = "prior";
  if (!j.is_object()) throw ValidationError("prior: expected an object");
  pk::MetaStudyPrior p;
  p.drug_id_options = get_or(j, "drug_id_options", p.drug_id_options, w);
  p.num_individuals_range = int_interval(j, "num_individuals_range", p.num_individuals_range, w);
  p.num_peripherals_range = int_interval(j, "num_peripherals_range", p.num_peripherals_range, w);
  p.solver_method = get_or(j, "solver_method", p.solver_method, w);
  p.time_start = get_or(j, "time_start", p.time_start, w);
  p.time_stop = get_or(j, "time_stop", p.time_stop, w);
  p.time_num_steps = get_or(j, "time_num_steps", p.time_num_steps, w);
  auto ranges = [&](const std::string& n, pk::ParamRanges& r) {
    r.log_mean = interval(j, "log_" + n + "_mean_range", r.log_mean, w);
    r.log_std = interval(j, "log_" + n + "_std_range", r.log_std, w);
    r.tmag = interval(j, n + "_tmag_range", r.tmag, w);
    r.tscl = interval(j, n + "_tscl_range", r.tscl, w);
  };
  ranges("k_a", p.k_a);
  ranges("k_e", p.k_e);
  ranges("V", p.V);
  ranges("k_1p", p.k_1p);
  ranges("k_p1", p.k_p1);
  p.rel_ruv_range = interval(j, "rel_ruv_range", p.rel_ruv_range, w);
  p.dose_range = interval(j, "dose_range", p.dose_range, w);
  p.oral_probability = get_or(j, "oral_probability", p.oral_probability, w);
  p.validate();
  return p;
}

inline json prior_to_json(const pk::MetaStudyPrior& p) {
  json j;
  j["drug_id_options"] = p.drug_id_options;
  j["num_individuals_range"] = {p.num_individuals_range.lo, p.num_individuals_range.hi};
  j["num_peripherals_range"] = {p.num_peripherals_range.lo, p.num_peripherals_range.hi};
  j["solver_method"] = p.solver_method;
  j["time_start"] = p.time_start;
  j["time_stop"] = p.time_stop;
  j["time_num_steps"] = p.time_num_steps;
  auto ranges = [&](const std::string& n, const pk::ParamRanges& r) {
    j["log_" + n + "_mean_range"] = {r.log_mean.lo, r.log_mean.hi};
    j["log_" + n + "_std_range"] = {r.log_std.lo, r.log_std.hi};
    j[n + "_tmag_range"] = {r.tmag.lo, r.tmag.hi};
    j[n + "_tscl_range"] = {r.tscl.lo, r.tscl.hi};
  };
  ranges("k_a", p.k_a);
  ranges("k_e", p.k_e);
  ranges("V", p.V);
  ranges("k_1p", p.k_1p);
  ranges("k_p1", p.k_p1);
  j["rel_ruv_range"] = {p.rel_ruv_range.lo, p.rel_ruv_range.hi};
  j["dose_range"] = {p.dose_range.lo, p.dose_range.hi};
  j["oral_probability"] = p.oral_probability;
  return j;
}

inline json study_to_json(const pk::Study& s) {
  json inds = json::array();
  for (const auto& ind : s.individuals) {
    inds.push_back({{"id", ind.id},
                    {"dose_amount", ind.dose.amount},
                    {"route", pk::to_string(ind.dose.route)},
                    {"times", ind.times},
                    {"concentrations", ind.concentrations}});
  }
  return {{"study_id", s.study_id}, {"seed", s.seed}, {"individuals", inds}};
}

inline pk::Study study_from_json(const json& j) {
  using detail::get;
  if (!j.is_object()) throw ValidationError("study: expected an object");
  pk::Study s;
  s.study_id = get<std::string>(j, "study_id", "study");
  s.seed = get<std::uint64_t>(j, "seed", "study");
  if (!j.contains("individuals") || !j["individuals"].is_array())
    throw ValidationError("study.individuals: missing or not an array");
  const auto& arr = j["individuals"];
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string w = "study.individuals[" + std::to_string(i) + "]";
    pk::IndividualRecord r;
    r.id = get<std::string>(arr[i], "id", w);
    r.dose.amount = get<double>(arr[i], "dose_amount", w);
    const auto route = get<std::string>(arr[i], "route", w);
    if (route == "oral")
      r.dose.route = pk::Route::Oral;
    else if (route == "iv")
      r.dose.route = pk::Route::Intravenous;
    else
      throw ValidationError(w + ".route: expected \"oral\" or \"iv\", got \"" + route + "\"");
    r.times = get<std::vector<double>>(arr[i], "times", w);
    r.concentrations = get<std::vector<double>>(arr[i], "concentrations", w);
    s.individuals.push_back(std::move(r));
  }
  s.validate();
  return s;
}

inline void save_study(const fs::path& path, const pk::Study& s) { write_text(path, study_to_json(s).dump(1) + "\n"); }

inline pk::Study load_study(const fs::path& path) {
  try {
    return study_from_json(read_json(path));
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

// A single study file, or every *.json in a directory in name order.
inline std::vector<pk::Study> load_studies(const fs::path& path) {
  if (!fs::exists(path)) throw ValidationError("no such file or directory: " + path.string());
  if (!fs::is_directory(path)) return {load_study(path)};
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(path))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<pk::Study> out;
  for (const auto& f : files) out.push_back(load_study(f));
  if (out.empty()) throw ValidationError("no study files in " + path.string());
  return out;
}

inline json model_config_to_json(const flow::ModelConfig& c) {
  return {{"hidden", c.hidden},
          {"encoder_depth", c.encoder_depth},
          {"decoder_depth", c.decoder_depth},
          {"heads", c.heads},
          {"ffn_expansion", c.ffn_expansion},
          {"dropout", c.dropout},
          {"f_max", c.f_max},
          {"sigma_min", c.sigma_min},
          {"kernel_variance", c.kernel.variance},
          {"kernel_length_scale", c.kernel.length_scale},
          {"jitter", c.jitter},
          {"route_encoding", {{"iv", 0}, {"oral", 1}}}};
}

inline flow::ModelConfig model_config_from_json(const json& j, flow::ModelConfig c = {}) {
  using detail::get_or;
  const std::string w = "model";
  if (!j.is_object()) throw ValidationError("model: expected an object");
  c.hidden = get_or(j, "hidden", c.hidden, w);
  c.encoder_depth = get_or(j, "encoder_depth", c.encoder_depth, w);
  c.decoder_depth = get_or(j, "decoder_depth", c.decoder_depth, w);
  c.heads = get_or(j, "heads", c.heads, w);
  c.ffn_expansion = get_or(j, "ffn_expansion", c.ffn_expansion, w);
  c.dropout = get_or(j, "dropout", c.dropout, w);
  c.f_max = get_or(j, "f_max", c.f_max, w);
  c.sigma_min = get_or(j, "sigma_min", c.sigma_min, w);
  c.kernel.variance = get_or(j, "kernel_variance", c.kernel.variance, w);
  c.kernel.length_scale = get_or(j, "kernel_length_scale", c.kernel.length_scale, w);
  c.jitter = get_or(j, "jitter", c.jitter, w);
  c.validate();
  return c;
}

inline json train_config_to_json(const flow::TrainConfig& c) {
  return {{"epochs", c.epochs},         {"batch_size", c.batch_size},   {"learning_rate", c.base_lr},
          {"warmup_epochs", c.warmup_epochs}, {"weight_decay", c.weight_decay}, {"clip_norm", c.clip_norm},
          {"seed", c.seed},             {"checkpoint_every", c.checkpoint_every}};
}

inline flow::TrainConfig train_config_from_json(const json& j, flow::TrainConfig c = {}) {
  using detail::get_or;
  const std::string w = "train";
  if (!j.is_object()) throw ValidationError("train: expected an object");
  c.epochs = get_or(j, "epochs", c.epochs, w);
  c.batch_size = get_or(j, "batch_size", c.batch_size, w);
  c.base_lr = get_or(j, "learning_rate", c.base_lr, w);
  c.warmup_epochs = get_or(j, "warmup_epochs", c.warmup_epochs, w);
  c.weight_decay = get_or(j, "weight_decay", c.weight_decay, w);
  c.clip_norm = get_or(j, "clip_norm", c.clip_norm, w);
  c.seed = get_or(j, "seed", c.seed, w);
  c.checkpoint_every = get_or(j, "checkpoint_every", c.checkpoint_every, w);
  if (c.epochs < 0 || c.batch_size == 0 || c.base_lr < 0.0 || c.clip_norm <= 0.0)
    throw ValidationError("train: invalid configuration values");
  return c;
}

// Checkpoint layout: <dir>/manifest.json + <dir>/params.bin, the blob holding
// little-endian f64 values of every tensor in manifest order.
struct Checkpoint {
  flow::ModelConfig config;
  ParamStore params;
  json training = json::object();
  std::uint64_t master_seed = 0;
};

namespace detail {

inline std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  std::uint64_t r = 0;
  for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
  return r;
}

}  // namespace detail

inline void save_checkpoint(const fs::path& dir, const Checkpoint& ck) {
  fs::create_directories(dir);
  json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["dtype"] = "f64-le";
  manifest["model_config"] = model_config_to_json(ck.config);
  manifest["master_seed"] = ck.master_seed;
  manifest["training"] = ck.training;
  json params = json::array();
  for (const auto& [name, t] : ck.params) params.push_back({{"name", name}, {"shape", t.shape}});
  manifest["params"] = params;
  write_text(dir / "manifest.json", manifest.dump(1) + "\n");

  std::ofstream blob(dir / "params.bin", std::ios::binary);
  if (!blob) throw ValidationError("cannot write " + (dir / "params.bin").string());
  for (const auto& [_, t] : ck.params)
    for (double v : t.data) {
      const std::uint64_t bits = detail::to_le(std::bit_cast<std::uint64_t>(v));
      blob.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
}

inline Checkpoint load_checkpoint(const fs::path& dir) {
  const json m = read_json(dir / "manifest.json");
  using detail::get;
  const int version = get<int>(m, "format_version", "manifest");
  if (version != kCheckpointVersion)
    throw ValidationError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  if (get<std::string>(m, "dtype", "manifest") != "f64-le") throw ValidationError("checkpoint dtype must be f64-le");
  Checkpoint ck;
  ck.config = model_config_from_json(m.at("model_config"));
  ck.master_seed = get<std::uint64_t>(m, "master_seed", "manifest");
  if (m.contains("training")) ck.training = m["training"];

  const auto& list = m.at("params");
  if (!list.is_array()) throw ValidationError("manifest.params: expected an array");
  for (std::size_t i = 0; i < list.size(); ++i) {
    const std::string w = "manifest.params[" + std::to_string(i) + "]";
    ck.params.add(get<std::string>(list[i], "name", w), get<std::vector<std::size_t>>(list[i], "shape", w));
  }
  // Layout must match what this configuration builds.
  Rng dummy(0);
  const flow::FlowModel reference(ck.config, dummy);
  try {
    reference.params().check_layout(ck.params);
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("checkpoint manifest does not match model configuration: ") + e.what());
  }

  const std::string blob = read_text(dir / "params.bin");
  const std::size_t expected = 8 * ck.params.total_size();
  if (blob.size() != expected)
    throw ValidationError("checkpoint blob has " + std::to_string(blob.size()) + " bytes, expected " +
                          std::to_string(expected));
  std::size_t off = 0;
  for (auto& [_, t] : ck.params)
    for (double& v : t.data) {
      std::uint64_t bits;
      std::memcpy(&bits, blob.data() + off, sizeof bits);
      off += sizeof bits;
      v = std::bit_cast<double>(detail::to_le(bits));
    }
  return ck;
}

inline std::string loss_history_csv(const std::vector<flow::EpochStats>& h) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,mean_loss,lr\n";
  for (const auto& e : h) out << e.epoch << ',' << e.mean_loss << ',' << e.lr << '\n';
  return out.str();
}

}  // namespace funkflow::io
