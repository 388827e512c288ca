#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "eac/common.hpp"
#include "eac/data.hpp"
#include "eac/trainer.hpp"

namespace eac {

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline double parse_double_field(const std::string& field, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(msg(field, ": cannot parse '", v, "' as a number"));
  }
}

inline long long parse_int_field(const std::string& field, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(msg(field, ": cannot parse '", v, "' as an integer"));
  }
}

inline std::uint64_t parse_u64_field(const std::string& field, const std::string& v) {
  try {
    std::size_t used = 0;
    const std::uint64_t x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(msg(field, ": cannot parse '", v, "' as an unsigned integer"));
  }
}

inline bool parse_bool_field(const std::string& field, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(msg(field, ": cannot parse '", v, "' as a boolean"));
}

inline std::vector<int> parse_int_list_field(const std::string& field, const std::string& v) {
  std::vector<int> out;
  if (trim(v).empty()) return out;
  std::istringstream in(v);
  std::string item;
  while (std::getline(in, item, ','))
    out.push_back(static_cast<int>(parse_int_field(field, trim(item))));
  return out;
}

inline std::string format_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

inline std::string format_int_list(const std::vector<int>& v) {
  std::ostringstream out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out << ",";
    out << v[i];
  }
  return out.str();
}

} // namespace detail

/// Sets one ExperimentConfig field addressed as section.key. Unknown
/// sections or keys are hard errors; this same dispatch backs both the file
/// parser and command-line overrides, so precedence is purely call order.
inline void set_config_field(ExperimentConfig& cfg, const std::string& section,
                             const std::string& key, const std::string& value) {
  using namespace detail;
  const std::string field = section + "." + key;
  if (section == "dataset") {
    if (key == "train_path") cfg.train_path = value;
    else if (key == "test_path") cfg.test_path = value;
    else if (key == "format") cfg.format = parse_dataset_format(value);
    else if (key == "classes") cfg.classes = static_cast<int>(parse_int_field(field, value));
    else if (key == "train_subset") cfg.train_subset = parse_u64_field(field, value);
    else if (key == "test_subset") cfg.test_subset = parse_u64_field(field, value);
    else throw ConfigError(msg("unknown config key '", field, "'"));
  } else if (section == "noise") {
    if (key == "rate") cfg.noise.rate = parse_double_field(field, value);
    else if (key == "seed") cfg.noise.seed = parse_u64_field(field, value);
    else throw ConfigError(msg("unknown config key '", field, "'"));
  } else if (section == "erase") {
    if (key == "probability") cfg.erase.probability = parse_double_field(field, value);
    else if (key == "area_min") cfg.erase.area_min = parse_double_field(field, value);
    else if (key == "area_max") cfg.erase.area_max = parse_double_field(field, value);
    else if (key == "aspect_min") cfg.erase.aspect_min = parse_double_field(field, value);
    else if (key == "aspect_max") cfg.erase.aspect_max = parse_double_field(field, value);
    else if (key == "fill") cfg.erase.fill = parse_double_field(field, value);
    else throw ConfigError(msg("unknown config key '", field, "'"));
  } else if (section == "model") {
    if (key == "widths") cfg.backbone.stage_widths = parse_int_list_field(field, value);
    else if (key == "strides") cfg.backbone.stage_strides = parse_int_list_field(field, value);
    else if (key == "kernel") cfg.backbone.kernel_size = static_cast<int>(parse_int_field(field, value));
    else if (key == "head_bias") cfg.head_bias = parse_bool_field(field, value);
    else if (key == "seed") cfg.model_seed = parse_u64_field(field, value);
    else throw ConfigError(msg("unknown config key '", field, "'"));
  } else if (section == "train") {
    if (key == "variant") cfg.variant = parse_variant(value);
    else if (key == "lambda") cfg.lambda = parse_double_field(field, value);
    else if (key == "batch_size") cfg.batch_size = static_cast<int>(parse_int_field(field, value));
    else if (key == "epochs") cfg.epochs = static_cast<int>(parse_int_field(field, value));
    else if (key == "lr") cfg.lr = parse_double_field(field, value);
    else if (key == "lr_gamma") cfg.lr_gamma = parse_double_field(field, value);
    else if (key == "weight_decay") cfg.weight_decay = parse_double_field(field, value);
    else if (key == "weight_decay_mode") cfg.weight_decay_mode = parse_weight_decay_mode(value);
    else if (key == "flip_probability") cfg.flip_probability = parse_double_field(field, value);
    else if (key == "data_seed") cfg.data_seed = parse_u64_field(field, value);
    else if (key == "eval_every") cfg.eval_every = static_cast<int>(parse_int_field(field, value));
    else if (key == "checkpoint_every") cfg.checkpoint_every = static_cast<int>(parse_int_field(field, value));
    else if (key == "deterministic") cfg.deterministic = parse_bool_field(field, value);
    else if (key == "final_window") cfg.final_window = static_cast<int>(parse_int_field(field, value));
    else throw ConfigError(msg("unknown config key '", field, "'"));
  } else {
    throw ConfigError(msg("unknown config section '[", section, "]'"));
  }
}

/// Override addressed as "section.key" (the CLI's --set syntax).
inline void apply_override(ExperimentConfig& cfg, const std::string& dotted,
                           const std::string& value) {
  const auto dot = dotted.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == dotted.size())
    throw ConfigError(msg("override key '", dotted, "' must look like section.key"));
  set_config_field(cfg, dotted.substr(0, dot), dotted.substr(dot + 1), value);
}

inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ConfigError(msg("config line ", lineno, ": malformed section '", t, "'"));
      section = detail::trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(msg("config line ", lineno, ": expected key = value, got '", t, "'"));
    if (section.empty())
      throw ConfigError(msg("config line ", lineno, ": key outside any [section]"));
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string value = detail::trim(t.substr(eq + 1));
    set_config_field(cfg, section, key, value);
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(msg("cannot open config '", path.string(), "'"));
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

/// Canonical text form: every field, fixed order, lossless numerics.
/// parse(serialize(cfg)) == cfg.
inline std::string serialize_config(const ExperimentConfig& cfg) {
  using namespace detail;
  std::ostringstream out;
  out << "[dataset]\n";
  out << "train_path = " << cfg.train_path << "\n";
  out << "test_path = " << cfg.test_path << "\n";
  out << "format = " << to_string(cfg.format) << "\n";
  out << "classes = " << cfg.classes << "\n";
  out << "train_subset = " << cfg.train_subset << "\n";
  out << "test_subset = " << cfg.test_subset << "\n";
  out << "\n[noise]\n";
  out << "rate = " << format_double(cfg.noise.rate) << "\n";
  out << "seed = " << cfg.noise.seed << "\n";
  out << "\n[erase]\n";
  out << "probability = " << format_double(cfg.erase.probability) << "\n";
  out << "area_min = " << format_double(cfg.erase.area_min) << "\n";
  out << "area_max = " << format_double(cfg.erase.area_max) << "\n";
  out << "aspect_min = " << format_double(cfg.erase.aspect_min) << "\n";
  out << "aspect_max = " << format_double(cfg.erase.aspect_max) << "\n";
  out << "fill = " << format_double(cfg.erase.fill) << "\n";
  out << "\n[model]\n";
  out << "widths = " << format_int_list(cfg.backbone.stage_widths) << "\n";
  out << "strides = " << format_int_list(cfg.backbone.stage_strides) << "\n";
  out << "kernel = " << cfg.backbone.kernel_size << "\n";
  out << "head_bias = " << (cfg.head_bias ? "true" : "false") << "\n";
  out << "seed = " << cfg.model_seed << "\n";
  out << "\n[train]\n";
  out << "variant = " << to_string(cfg.variant) << "\n";
  out << "lambda = " << format_double(cfg.lambda) << "\n";
  out << "batch_size = " << cfg.batch_size << "\n";
  out << "epochs = " << cfg.epochs << "\n";
  out << "lr = " << format_double(cfg.lr) << "\n";
  out << "lr_gamma = " << format_double(cfg.lr_gamma) << "\n";
  out << "weight_decay = " << format_double(cfg.weight_decay) << "\n";
  out << "weight_decay_mode = " << to_string(cfg.weight_decay_mode) << "\n";
  out << "flip_probability = " << format_double(cfg.flip_probability) << "\n";
  out << "data_seed = " << cfg.data_seed << "\n";
  out << "eval_every = " << cfg.eval_every << "\n";
  out << "checkpoint_every = " << cfg.checkpoint_every << "\n";
  out << "deterministic = " << (cfg.deterministic ? "true" : "false") << "\n";
  out << "final_window = " << cfg.final_window << "\n";
  return out.str();
}

/// Identity of a run's full configuration (seeds included, since the
/// serialization carries them).
inline std::uint64_t config_hash(const ExperimentConfig& cfg) {
  const std::string text = serialize_config(cfg);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  detail::fnv1a(h, text.data(), text.size());
  return h;
}

inline std::string config_hash_hex(const ExperimentConfig& cfg) {
  std::ostringstream out;
  out << std::hex << config_hash(cfg);
  return out.str();
}

} // namespace eac
