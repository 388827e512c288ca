#pragma once

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eac/analysis.hpp"
#include "eac/config.hpp"
#include "eac/trainer.hpp"

namespace eac {

struct RunRecord {
  std::string config_hash;
  std::string variant;
  double noise_rate = 0.0;
  double lambda = 0.0;
  double final_accuracy = 0.0;
  bool auroc_defined = false;
  double auroc = std::numeric_limits<double>::quiet_NaN();
  std::string config_path, history_path, checkpoint_path, manifest_path, separation_path;
  std::uint64_t model_seed = 0, data_seed = 0, noise_seed = 0;
  std::string started_at, finished_at;
};

inline nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json j{{"config_hash", r.config_hash},
                   {"variant", r.variant},
                   {"noise_rate", r.noise_rate},
                   {"lambda", r.lambda},
                   {"final_accuracy", r.final_accuracy},
                   {"config_path", r.config_path},
                   {"history_path", r.history_path},
                   {"checkpoint_path", r.checkpoint_path},
                   {"manifest_path", r.manifest_path},
                   {"separation_path", r.separation_path},
                   {"seeds", {{"model", r.model_seed}, {"data", r.data_seed}, {"noise", r.noise_seed}}},
                   {"started_at", r.started_at},
                   {"finished_at", r.finished_at}};
  j["auroc"] = r.auroc_defined ? nlohmann::json(r.auroc) : nlohmann::json();
  return j;
}

inline RunRecord run_record_from_json(const nlohmann::json& j) {
  RunRecord r;
  r.config_hash = j.at("config_hash").get<std::string>();
  r.variant = j.at("variant").get<std::string>();
  r.noise_rate = j.at("noise_rate").get<double>();
  r.lambda = j.at("lambda").get<double>();
  r.final_accuracy = j.at("final_accuracy").get<double>();
  if (!j.at("auroc").is_null()) {
    r.auroc = j.at("auroc").get<double>();
    r.auroc_defined = true;
  }
  r.config_path = j.at("config_path").get<std::string>();
  r.history_path = j.at("history_path").get<std::string>();
  r.checkpoint_path = j.at("checkpoint_path").get<std::string>();
  r.manifest_path = j.at("manifest_path").get<std::string>();
  r.separation_path = j.at("separation_path").get<std::string>();
  r.model_seed = j.at("seeds").at("model").get<std::uint64_t>();
  r.data_seed = j.at("seeds").at("data").get<std::uint64_t>();
  r.noise_seed = j.at("seeds").at("noise").get<std::uint64_t>();
  r.started_at = j.at("started_at").get<std::string>();
  r.finished_at = j.at("finished_at").get<std::string>();
  return r;
}

namespace detail {

inline std::string utc_now_iso() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError(msg("cannot write '", tmp.string(), "'"));
    out << text;
    if (!out.flush()) throw IoError(msg("short write to '", tmp.string(), "'"));
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError(msg("rename to '", path.string(), "' failed: ", ec.message()));
}

inline std::string compact_number(double v) {
  std::ostringstream out;
  out << v;
  return out.str();
}

} // namespace detail

inline void save_run_record(const std::filesystem::path& path, const RunRecord& r) {
  detail::write_text_atomic(path, to_json(r).dump(2) + "\n");
}

inline std::optional<RunRecord> try_load_run_record(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  try {
    nlohmann::json j;
    in >> j;
    return run_record_from_json(j);
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

/// One full experiment cell: train, diagnose, persist. A cell directory
/// containing a run_record.json whose config hash matches is considered
/// complete and is returned as-is (the grid's resume contract); the record
/// file is written atomically, so it doubles as the completion marker.
template <typename T = float>
RunRecord run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                         bool resume = true, std::ostream* log = nullptr) {
  cfg.validate();
  const std::string hash = config_hash_hex(cfg);
  const auto record_path = out_dir / "run_record.json";
  if (resume) {
    if (auto existing = try_load_run_record(record_path)) {
      if (existing->config_hash == hash) {
        if (log) *log << "cell " << out_dir << " already complete, skipping\n";
        return *existing;
      }
      throw ConfigError(msg("cell '", out_dir.string(),
                            "' holds a run of a different config (hash ",
                            existing->config_hash, " vs ", hash, "); refusing to reuse"));
    }
  }
  std::filesystem::create_directories(out_dir);
  RunRecord record;
  record.config_hash = hash;
  record.variant = to_string(cfg.variant);
  record.noise_rate = cfg.noise.rate;
  record.lambda = cfg.lambda;
  record.model_seed = cfg.model_seed;
  record.data_seed = cfg.data_seed;
  record.noise_seed = cfg.noise.seed;
  record.started_at = detail::utc_now_iso();

  const auto config_path = out_dir / "config.ini";
  detail::write_text_atomic(config_path, serialize_config(cfg));

  FitOptions opts;
  opts.out_dir = out_dir;
  opts.resume = resume;
  opts.log = log;
  FitResult<T> result = fit<T>(cfg, opts);

  // Fig.-6-style diagnostics on the noised training set
  Dataset<T> train = load_dataset<T>(cfg.train_path, cfg.format, cfg.classes, cfg.train_subset);
  apply_manifest(train, result.manifest);
  const auto records = per_sample_records(result.model, train);
  const SeparationReport report = loss_separation(records);
  const auto separation_path = out_dir / "separation.json";
  save_separation_report(separation_path, report);

  record.final_accuracy = final_accuracy(result.history, cfg.final_window);
  record.auroc_defined = report.auroc_defined;
  record.auroc = report.auroc;
  record.config_path = config_path.string();
  record.history_path = (out_dir / "history.jsonl").string();
  record.checkpoint_path = (out_dir / "checkpoint_final.eac").string();
  record.manifest_path = (out_dir / "noise_manifest.csv").string();
  record.separation_path = separation_path.string();
  record.finished_at = detail::utc_now_iso();
  save_run_record(record_path, record);
  return record;
}

struct CellResult {
  ExperimentConfig config;
  std::filesystem::path dir;
  std::optional<RunRecord> record; // empty = failed
  std::string error;
};

inline std::string cell_table_csv(const std::vector<CellResult>& cells) {
  std::ostringstream out;
  out << "rate,variant,lambda,seed,final_accuracy,auroc\n";
  out.precision(10);
  for (const auto& cell : cells) {
    if (!cell.record) continue;
    const RunRecord& r = *cell.record;
    out << r.noise_rate << "," << r.variant << "," << r.lambda << "," << r.model_seed
        << "," << r.final_accuracy << ",";
    if (r.auroc_defined) out << r.auroc;
    out << "\n";
  }
  return out.str();
}

/// Runs every cell of a config list under out_dir/cells/<name>; failures
/// are recorded and the remaining cells still run. The table is rewritten
/// after every cell so partial progress is always on disk.
inline std::vector<CellResult> run_cells(const std::vector<std::pair<std::string, ExperimentConfig>>& cells,
                                         const std::filesystem::path& out_dir,
                                         const std::string& table_name,
                                         std::ostream* log = nullptr) {
  std::vector<CellResult> results;
  std::filesystem::create_directories(out_dir / "cells");
  for (const auto& [name, cfg] : cells) {
    CellResult res;
    res.config = cfg;
    res.dir = out_dir / "cells" / name;
    if (log) *log << "=== cell " << name << " ===\n";
    try {
      res.record = run_experiment<float>(cfg, res.dir, true, log);
    } catch (const Error& e) {
      res.error = e.what();
      if (log) *log << "cell " << name << " failed: " << e.what() << "\n";
    }
    results.push_back(std::move(res));
    detail::write_text_atomic(out_dir / table_name, cell_table_csv(results));
  }
  return results;
}

/// Table-3/5-style grid: the cross product of noise rates and variants.
inline std::vector<CellResult> run_grid(const ExperimentConfig& base,
                                        const std::vector<double>& rates,
                                        const std::vector<EacVariant>& variants,
                                        const std::filesystem::path& out_dir,
                                        std::ostream* log = nullptr) {
  std::vector<std::pair<std::string, ExperimentConfig>> cells;
  for (double rate : rates)
    for (EacVariant variant : variants) {
      ExperimentConfig cfg = base;
      cfg.noise.rate = rate;
      cfg.variant = variant;
      cells.emplace_back(msg("r", detail::compact_number(rate), "_", to_string(variant),
                             "_l", detail::compact_number(cfg.lambda)),
                         cfg);
    }
  return run_cells(cells, out_dir, "grid.csv", log);
}

/// λ sweep at fixed variant and noise rate.
inline std::vector<CellResult> run_sweep_lambda(const ExperimentConfig& base,
                                                const std::vector<double>& lambdas,
                                                const std::filesystem::path& out_dir,
                                                std::ostream* log = nullptr) {
  std::vector<std::pair<std::string, ExperimentConfig>> cells;
  for (double lambda : lambdas) {
    ExperimentConfig cfg = base;
    cfg.lambda = lambda;
    cells.emplace_back(msg("r", detail::compact_number(cfg.noise.rate), "_",
                           to_string(cfg.variant), "_l", detail::compact_number(lambda)),
                       cfg);
  }
  return run_cells(cells, out_dir, "sweep_lambda.csv", log);
}

} // namespace eac
