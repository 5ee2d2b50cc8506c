#ifndef FUNDUSAM_CONFIG_HPP
#define FUNDUSAM_CONFIG_HPP

// Run configuration and its text form.
//
// The file format is one `key = value` per line; `#` starts a comment and blank
// lines are ignored. Unknown keys, malformed values and duplicate keys are
// errors. Keys absent from the file keep the preset's value. Serialisation
// writes every key in a fixed order, so two equal configurations always produce
// the same text.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fundusam/data.hpp"
#include "fundusam/losses.hpp"
#include "fundusam/model.hpp"
#include "fundusam/optim.hpp"
#include "fundusam/peft.hpp"

namespace fundusam {

struct SynthSettings {
  int count = 64;
  SyntheticConfig sample;
};

struct RunConfig {
  ModelConfig model;
  LossWeights loss;
  TrainMode mode = TrainMode::Scratch;
  AdamConfig adam;
  int batch_size = 8;
  int epochs = 40;
  std::uint64_t seed = 42;
  std::string data_root = "data";
  std::string output_dir = "runs";
  PolarGrid grid;
  double margin = 1.5;
  double split_ratio = 0.8;
  bool use_polar = true;
  SynthSettings synth;

  /// Desk-scale defaults: batch 8, 40 epochs, 256 px input.
  static RunConfig desk() { return {}; }

  /// Published schedule: batch 32, 150 epochs, lr 1e-4.
  static RunConfig published() {
    RunConfig c;
    c.batch_size = 32;
    c.epochs = 150;
    c.adam.lr = 1e-4;
    return c;
  }

  /// Small network and images for smoke runs and determinism checks.
  static RunConfig tiny() {
    RunConfig c;
    c.model.encoder.image_size = 64;
    c.model.encoder.patch_size = 8;
    c.model.encoder.embed_dim = 32;
    c.model.encoder.depth = 2;
    c.model.encoder.num_heads = 2;
    c.model.encoder.window_size = 4;
    c.model.encoder.global_blocks = {1};
    c.model.encoder.neck_dim = 32;
    c.model.decoder.dim = 32;
    c.model.decoder.heads = 2;
    c.model.decoder.mlp_dim = 64;
    c.model.cbam.channel.reduction_ratio = 4;
    c.grid.num_radii = 64;
    c.grid.num_angles = 64;
    c.batch_size = 4;
    c.epochs = 2;
    c.adam.lr = 1e-3;
    c.synth.count = 10;
    c.synth.sample.image_size = 96;
    c.synth.sample.disc_axis_min = 14.0;
    c.synth.sample.disc_axis_max = 20.0;
    return c;
  }

  static RunConfig preset(std::string_view name) {
    if (name == "desk") return desk();
    if (name == "published") return published();
    if (name == "tiny") return tiny();
    throw ConfigError("unknown preset: " + std::string(name));
  }

  [[nodiscard]] PreprocessConfig preprocess_config() const {
    return {grid, margin, model.encoder.image_size, use_polar};
  }

  void validate() const {
    try {
      model.validate();
      loss.validate();
      grid.validate();
      synth.sample.validate();
    } catch (const InvalidArgument& e) {
      throw ConfigError(e.what());
    }
    if (!(adam.lr > 0.0) || !(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0) ||
        !(adam.eps > 0.0)) {
      throw ConfigError("optimizer hyperparameters out of range");
    }
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (!(margin >= 1.0)) throw ConfigError("polar.margin must be >= 1");
    if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw ConfigError("data.split_ratio must lie in (0,1)");
    if (synth.count < 1) throw ConfigError("synth.count must be >= 1");
    if (data_root.empty() || output_dir.empty()) throw ConfigError("paths must not be empty");
  }
};

namespace detail {

template <typename N>
N parse_number(const std::string& key, const std::string& text) {
  N v{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  const auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc() || res.ptr != last) throw ConfigError(key + ": not a valid number: '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct ConfigKey {
  std::string name;
  bool architecture;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename Field>
ConfigKey int_key(std::string name, bool arch, Field field) {
  return {name, arch, [field](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); },
          [field, name](RunConfig& c, const std::string& v) {
            field(c) = parse_number<std::remove_reference_t<decltype(field(c))>>(name, v);
          }};
}

template <typename Field>
ConfigKey real_key(std::string name, bool arch, Field field) {
  return {name, arch, [field](const RunConfig& c) { return format_double(field(const_cast<RunConfig&>(c))); },
          [field, name](RunConfig& c, const std::string& v) { field(c) = parse_number<double>(name, v); }};
}

template <typename Field>
ConfigKey bool_key(std::string name, bool arch, Field field) {
  return {name, arch, [field](const RunConfig& c) { return std::string(field(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [field, name](RunConfig& c, const std::string& v) { field(c) = parse_bool(name, v); }};
}

template <typename Field>
ConfigKey string_key(std::string name, Field field) {
  return {name, false, [field](const RunConfig& c) { return field(const_cast<RunConfig&>(c)); },
          [field](RunConfig& c, const std::string& v) { field(c) = v; }};
}

inline std::string join_blocks(const std::set<int>& s) {
  std::string out;
  for (int b : s) out += (out.empty() ? "" : ",") + std::to_string(b);
  return out;
}

inline std::set<int> split_blocks(const std::string& key, const std::string& text) {
  std::set<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.insert(parse_number<int>(key, item));
  }
  return out;
}

// Every recognised key, in serialisation order.
inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    k.push_back(int_key("model.image_size", true, [](RunConfig& c) -> int& { return c.model.encoder.image_size; }));
    k.push_back(int_key("model.patch_size", true, [](RunConfig& c) -> int& { return c.model.encoder.patch_size; }));
    k.push_back(int_key("model.in_channels", true, [](RunConfig& c) -> int& { return c.model.encoder.in_channels; }));
    k.push_back(int_key("model.embed_dim", true, [](RunConfig& c) -> int& { return c.model.encoder.embed_dim; }));
    k.push_back(int_key("model.depth", true, [](RunConfig& c) -> int& { return c.model.encoder.depth; }));
    k.push_back(int_key("model.num_heads", true, [](RunConfig& c) -> int& { return c.model.encoder.num_heads; }));
    k.push_back(int_key("model.window_size", true, [](RunConfig& c) -> int& { return c.model.encoder.window_size; }));
    k.push_back({"model.global_blocks", true,
                 [](const RunConfig& c) { return join_blocks(c.model.encoder.global_blocks); },
                 [](RunConfig& c, const std::string& v) {
                   c.model.encoder.global_blocks = split_blocks("model.global_blocks", v);
                 }});
    k.push_back(real_key("model.mlp_ratio", true, [](RunConfig& c) -> double& { return c.model.encoder.mlp_ratio; }));
    k.push_back(int_key("model.neck_dim", true, [](RunConfig& c) -> int& { return c.model.encoder.neck_dim; }));
    k.push_back(bool_key("model.use_adapter", true, [](RunConfig& c) -> bool& { return c.model.use_adapter; }));
    k.push_back(bool_key("model.use_cbam", true, [](RunConfig& c) -> bool& { return c.model.use_cbam; }));

    k.push_back(int_key("adapter.bottleneck_dim", true, [](RunConfig& c) -> int& { return c.model.adapter.bottleneck_dim; }));
    k.push_back(real_key("adapter.bottleneck_ratio", true,
                         [](RunConfig& c) -> double& { return c.model.adapter.bottleneck_ratio; }));
    k.push_back({"adapter.activation", true,
                 [](const RunConfig& c) { return std::string(activation_name(c.model.adapter.activation)); },
                 [](RunConfig& c, const std::string& v) {
                   try {
                     c.model.adapter.activation = parse_activation(v);
                   } catch (const InvalidArgument& e) {
                     throw ConfigError(std::string("adapter.activation: ") + e.what());
                   }
                 }});
    k.push_back(real_key("adapter.residual_scale", true,
                         [](RunConfig& c) -> double& { return c.model.adapter.residual_scale; }));
    k.push_back({"adapter.up_init", true,
                 [](const RunConfig& c) {
                   return std::string(c.model.adapter.up_init == UpInit::Zero ? "zero" : "small_random");
                 },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "zero") {
                     c.model.adapter.up_init = UpInit::Zero;
                   } else if (v == "small_random") {
                     c.model.adapter.up_init = UpInit::SmallRandom;
                   } else {
                     throw ConfigError("adapter.up_init: expected zero or small_random, got '" + v + "'");
                   }
                 }});

    k.push_back(int_key("cbam.spatial_kernel", true, [](RunConfig& c) -> int& { return c.model.cbam.spatial.kernel; }));
    k.push_back(int_key("cbam.reduction_ratio", true,
                        [](RunConfig& c) -> int& { return c.model.cbam.channel.reduction_ratio; }));
    k.push_back(bool_key("cbam.spatial_on_pixels", true,
                         [](RunConfig& c) -> bool& { return c.model.cbam.spatial_on_pixels; }));

    k.push_back(int_key("decoder.dim", true, [](RunConfig& c) -> int& { return c.model.decoder.dim; }));
    k.push_back(int_key("decoder.heads", true, [](RunConfig& c) -> int& { return c.model.decoder.heads; }));
    k.push_back(int_key("decoder.mlp_dim", true, [](RunConfig& c) -> int& { return c.model.decoder.mlp_dim; }));
    k.push_back(int_key("decoder.depth", true, [](RunConfig& c) -> int& { return c.model.decoder.depth; }));

    k.push_back(real_key("loss.w_disc", false, [](RunConfig& c) -> double& { return c.loss.disc; }));
    k.push_back(real_key("loss.w_cup", false, [](RunConfig& c) -> double& { return c.loss.cup; }));
    k.push_back(real_key("loss.w_contain", false, [](RunConfig& c) -> double& { return c.loss.contain; }));

    k.push_back({"train.mode", false, [](const RunConfig& c) { return std::string(mode_name(c.mode)); },
                 [](RunConfig& c, const std::string& v) {
                   try {
                     c.mode = parse_mode(v);
                   } catch (const InvalidArgument& e) {
                     throw ConfigError(std::string("train.mode: ") + e.what());
                   }
                 }});
    k.push_back(real_key("train.lr", false, [](RunConfig& c) -> double& { return c.adam.lr; }));
    k.push_back(real_key("train.beta1", false, [](RunConfig& c) -> double& { return c.adam.beta1; }));
    k.push_back(real_key("train.beta2", false, [](RunConfig& c) -> double& { return c.adam.beta2; }));
    k.push_back(real_key("train.eps", false, [](RunConfig& c) -> double& { return c.adam.eps; }));
    k.push_back(int_key("train.batch_size", false, [](RunConfig& c) -> int& { return c.batch_size; }));
    k.push_back(int_key("train.epochs", false, [](RunConfig& c) -> int& { return c.epochs; }));
    k.push_back(int_key("train.seed", false, [](RunConfig& c) -> std::uint64_t& { return c.seed; }));

    k.push_back(string_key("paths.data_root", [](RunConfig& c) -> std::string& { return c.data_root; }));
    k.push_back(string_key("paths.output_dir", [](RunConfig& c) -> std::string& { return c.output_dir; }));

    k.push_back(int_key("polar.num_radii", false, [](RunConfig& c) -> int& { return c.grid.num_radii; }));
    k.push_back(int_key("polar.num_angles", false, [](RunConfig& c) -> int& { return c.grid.num_angles; }));
    k.push_back(real_key("polar.margin", false, [](RunConfig& c) -> double& { return c.margin; }));
    k.push_back(bool_key("polar.enabled", false, [](RunConfig& c) -> bool& { return c.use_polar; }));
    k.push_back(real_key("data.split_ratio", false, [](RunConfig& c) -> double& { return c.split_ratio; }));

    k.push_back(int_key("synth.count", false, [](RunConfig& c) -> int& { return c.synth.count; }));
    k.push_back(int_key("synth.image_size", false, [](RunConfig& c) -> int& { return c.synth.sample.image_size; }));
    k.push_back(real_key("synth.disc_axis_min", false,
                         [](RunConfig& c) -> double& { return c.synth.sample.disc_axis_min; }));
    k.push_back(real_key("synth.disc_axis_max", false,
                         [](RunConfig& c) -> double& { return c.synth.sample.disc_axis_max; }));
    k.push_back(real_key("synth.cdr_min", false, [](RunConfig& c) -> double& { return c.synth.sample.cdr_min; }));
    k.push_back(real_key("synth.cdr_max", false, [](RunConfig& c) -> double& { return c.synth.sample.cdr_max; }));
    k.push_back({"synth.contrast", false,
                 [](const RunConfig& c) {
                   return std::string(c.synth.sample.contrast == Contrast::High ? "high" : "low");
                 },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "high") {
                     c.synth.sample.contrast = Contrast::High;
                   } else if (v == "low") {
                     c.synth.sample.contrast = Contrast::Low;
                   } else {
                     throw ConfigError("synth.contrast: expected high or low, got '" + v + "'");
                   }
                 }});
    k.push_back(real_key("synth.noise_sigma", false,
                         [](RunConfig& c) -> double& { return c.synth.sample.noise_sigma; }));
    k.push_back(int_key("synth.vessels", false, [](RunConfig& c) -> int& { return c.synth.sample.vessels; }));
    k.push_back(int_key("synth.seed", false, [](RunConfig& c) -> std::uint64_t& { return c.synth.sample.seed; }));
    return k;
  }();
  return keys;
}

}  // namespace detail

/// Applies `key = value` lines on top of `base`. Throws ConfigError with the line number.
inline RunConfig parse_config(const std::string& text, RunConfig base = RunConfig::desk()) {
  const auto& keys = detail::config_keys();
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "line " + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto it = std::find_if(keys.begin(), keys.end(), [&](const auto& k) { return k.name == key; });
    if (it == keys.end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    try {
      it->set(base, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  base.validate();
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = RunConfig::desk()) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

/// Canonical text: every key, fixed order. `architecture_only` keeps only keys
/// that change the parameter set.
inline std::string serialize_config(const RunConfig& c, bool architecture_only = false) {
  std::string out;
  for (const auto& k : detail::config_keys()) {
    if (architecture_only && !k.architecture) continue;
    out += k.name + " = " + k.get(c) + "\n";
  }
  return out;
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t architecture_hash(const RunConfig& c) { return fnv1a(serialize_config(c, true)); }

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Model configuration derived from the run, with the init seed tied to the run seed.
inline ModelConfig model_config(const RunConfig& c) {
  ModelConfig m = c.model;
  m.init_seed = c.seed;
  return m;
}

}  // namespace fundusam

#endif  // FUNDUSAM_CONFIG_HPP
