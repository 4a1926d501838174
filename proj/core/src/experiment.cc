#include "dualfed/experiment.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dualfed/errors.h"
#include "dualfed/serialize.h"
#include "json.hpp"

namespace dualfed {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

PreparedData prepare_data(const RunConfig& config) {
  PreparedData out;
  if (config.source == DataSource::kSynthetic) {
    SyntheticData synth = generate_synthetic(config.synthetic);
    for (ClientData& c : synth.clients) {
      out.clients.push_back(std::make_shared<const ClientData>(std::move(c)));
    }
    out.probe = std::move(synth.probe.x);
    return out;
  }
  const std::size_t classes = config.synthetic.num_classes;
  std::vector<Dataset> tests;
  for (std::size_t m = 0; m < config.flatfile.train.size(); ++m) {
    ClientData c{load_flatfile(config.flatfile.train[m], classes),
                 load_flatfile(config.flatfile.test[m], classes)};
    tests.push_back(c.test);
    out.clients.push_back(std::make_shared<const ClientData>(std::move(c)));
  }
  if (config.flatfile.probe) {
    out.probe = load_flatfile(*config.flatfile.probe, classes).x;
  } else {
    out.probe = concat(tests).x;
  }
  return out;
}

FederationSetup make_setup(const RunConfig& config, const PreparedData& data,
                           std::uint64_t seed) {
  FederationSetup s;
  s.arch = config.arch;
  s.train = config.train;
  s.variant = config.variant();
  s.clients = data.clients;
  s.probe = data.probe;
  s.seed = seed;
  s.eval_every = config.eval_every;
  s.threads = config.threads;
  return s;
}

std::pair<double, double> mean_std(const std::vector<double>& values) {
  if (values.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size());
  return {mean, std::sqrt(var)};
}

namespace {

std::string seed_file(const char* stem, std::uint64_t seed, const char* ext) {
  return std::string(stem) + "_seed" + std::to_string(seed) + ext;
}

void dump_clients(const fs::path& dir, std::uint64_t seed, std::size_t round,
                  const std::vector<ClientState>& clients, std::vector<fs::path>* written) {
  fs::create_directories(dir);
  for (const ClientState& c : clients) {
    const fs::path p = dir / ("seed" + std::to_string(seed) + "_round" + std::to_string(round) +
                              "_client" + std::to_string(c.client_id) + ".csv");
    dump_representations(c.params, c.data->test, p);
    if (written) written->push_back(p);
  }
}

json row_json(const MetricsRow& r) {
  json j;
  j["round"] = r.round;
  j["mean_acc_global"] = r.mean_acc_global;
  j["mean_acc_personal"] = r.mean_acc_personal;
  j["mean_acc_ensemble"] = r.mean_acc_ensemble;
  j["mean_sep_z"] = r.mean_separation_z;
  j["mean_sep_u"] = r.mean_separation_u;
  j["cka_z"] = std::isnan(r.cka_z) ? json(nullptr) : json(r.cka_z);
  j["cka_u"] = std::isnan(r.cka_u) ? json(nullptr) : json(r.cka_u);
  return j;
}

double num_or_nan(const json& j) {
  return j.is_null() ? std::nan("") : j.get<double>();
}

MetricsRow row_from_json(const json& j) {
  MetricsRow r;
  r.round = j.at("round").get<std::size_t>();
  r.mean_acc_global = j.at("mean_acc_global").get<double>();
  r.mean_acc_personal = j.at("mean_acc_personal").get<double>();
  r.mean_acc_ensemble = j.at("mean_acc_ensemble").get<double>();
  r.mean_separation_z = j.at("mean_sep_z").get<double>();
  r.mean_separation_u = j.at("mean_sep_u").get<double>();
  r.cka_z = num_or_nan(j.at("cka_z"));
  r.cka_u = num_or_nan(j.at("cka_u"));
  return r;
}

}  // namespace

Summary run_experiment(const RunConfig& config) {
  RunConfig cfg = config;
  validate_config(cfg);
  const PreparedData data = prepare_data(cfg);
  const fs::path out = cfg.output_dir;
  fs::create_directories(out);
  write_file_atomic(out / "config.resolved", to_config_text(cfg));

  Summary summary;
  summary.label = cfg.display_label();
  summary.method = cfg.variant().name();
  summary.rounds = cfg.train.rounds;
  std::vector<double> headlines;

  for (std::uint64_t seed : cfg.seeds) {
    FederationSetup setup = make_setup(cfg, data, seed);
    if (cfg.checkpoint_every > 0) {
      setup.on_round = [&cfg, &out, seed](const ServerState& server,
                                          const std::vector<ClientState>& clients) {
        if (server.round % cfg.checkpoint_every != 0) return;
        Checkpoint ck;
        ck.seed = seed;
        ck.round = server.round;
        ck.server = server.global_params;
        for (const ClientState& c : clients) ck.clients.push_back(export_slots(c.params));
        fs::create_directories(out / "checkpoints");
        write_checkpoint(out / "checkpoints" /
                             ("seed" + std::to_string(seed) + "_round" +
                              std::to_string(server.round) + ".ckpt"),
                         ck);
      };
    }
    FederationResult result = run_federation(setup);
    const std::size_t m = setup.clients.size();
    write_file_atomic(out / seed_file("metrics", seed, ".csv"), metrics_csv(result.metrics, m));
    write_file_atomic(out / seed_file("ledger", seed, ".csv"), result.server.ledger.to_csv());
    if (cfg.dump_reps) dump_clients(out / "reps", seed, result.server.round, result.clients, nullptr);

    SeedResult sr;
    sr.seed = seed;
    sr.best_mean_ensemble = result.best_mean_ensemble;
    sr.best_round = result.best_round;
    if (!result.metrics.empty()) sr.final_row = result.metrics.back();
    sr.comm_bytes = result.server.ledger.total_bytes();
    headlines.push_back(sr.best_mean_ensemble);
    summary.seeds.push_back(std::move(sr));
  }
  std::tie(summary.headline_mean, summary.headline_std) = mean_std(headlines);
  write_summary(out / "summary.json", summary);
  return summary;
}

void write_summary(const fs::path& path, const Summary& summary) {
  json j;
  j["label"] = summary.label;
  j["method"] = summary.method;
  j["rounds"] = summary.rounds;
  j["headline"] = {{"metric", "best_mean_ensemble"},
                   {"mean", summary.headline_mean},
                   {"std", summary.headline_std}};
  json seeds = json::array();
  for (const SeedResult& s : summary.seeds) {
    json e;
    e["seed"] = s.seed;
    e["best_mean_ensemble"] = s.best_mean_ensemble;
    e["best_round"] = s.best_round;
    e["comm_bytes"] = s.comm_bytes;
    e["final"] = row_json(s.final_row);
    seeds.push_back(std::move(e));
  }
  j["seeds"] = std::move(seeds);
  write_file_atomic(path, j.dump(2) + "\n");
}

Summary load_summary(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open summary " + path.string());
  json j;
  try {
    in >> j;
    Summary s;
    s.label = j.at("label").get<std::string>();
    s.method = j.at("method").get<std::string>();
    s.rounds = j.at("rounds").get<std::size_t>();
    s.headline_mean = j.at("headline").at("mean").get<double>();
    s.headline_std = j.at("headline").at("std").get<double>();
    for (const json& e : j.at("seeds")) {
      SeedResult r;
      r.seed = e.at("seed").get<std::uint64_t>();
      r.best_mean_ensemble = e.at("best_mean_ensemble").get<double>();
      r.best_round = e.at("best_round").get<std::size_t>();
      r.comm_bytes = e.at("comm_bytes").get<std::uint64_t>();
      r.final_row = row_from_json(e.at("final"));
      s.seeds.push_back(std::move(r));
    }
    return s;
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::string format_mean_std(double mean, double std) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f\xC2\xB1%.2f", 100.0 * mean, 100.0 * std);
  return buf;
}

ComparisonTable compare_summaries(const std::vector<Summary>& summaries) {
  if (summaries.empty()) throw Error("compare: need at least one summary");
  ComparisonTable t;
  t.columns = {"method",         "best_ensemble",  "final_global", "final_personal",
               "final_ensemble", "comm_bytes"};
  for (const Summary& s : summaries) {
    std::vector<double> best, g, p, e, bytes;
    for (const SeedResult& r : s.seeds) {
      best.push_back(r.best_mean_ensemble);
      g.push_back(r.final_row.mean_acc_global);
      p.push_back(r.final_row.mean_acc_personal);
      e.push_back(r.final_row.mean_acc_ensemble);
      bytes.push_back(static_cast<double>(r.comm_bytes));
    }
    auto cell = [](const std::vector<double>& v) {
      const auto [m, sd] = mean_std(v);
      return format_mean_std(m, sd);
    };
    char b[32];
    std::snprintf(b, sizeof(b), "%.0f", mean_std(bytes).first);
    t.rows.push_back({s.label, cell(best), cell(g), cell(p), cell(e), b});
  }

  std::ostringstream csv;
  for (std::size_t c = 0; c < t.columns.size(); ++c) csv << (c ? "," : "") << t.columns[c];
  csv << '\n';
  for (const auto& row : t.rows) {
    for (std::size_t c = 0; c < row.size(); ++c) csv << (c ? "," : "") << row[c];
    csv << '\n';
  }
  t.csv = csv.str();

  // Column widths in code points; the ± sign is two bytes but one column.
  auto width = [](const std::string& s) {
    std::size_t w = 0;
    for (unsigned char ch : s) w += (ch & 0xC0) != 0x80 ? 1 : 0;
    return w;
  };
  std::vector<std::size_t> widths(t.columns.size());
  for (std::size_t c = 0; c < t.columns.size(); ++c) widths[c] = width(t.columns[c]);
  for (const auto& row : t.rows)
    for (std::size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], width(row[c]));
  std::ostringstream text;
  auto emit = [&](const std::vector<std::string>& row) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      text << (c ? "  " : "") << row[c];
      if (c + 1 < row.size()) text << std::string(widths[c] - width(row[c]), ' ');
    }
    text << '\n';
  };
  emit(t.columns);
  for (const auto& row : t.rows) emit(row);
  t.text = text.str();
  return t;
}

ComparisonTable compare_runs(const std::vector<fs::path>& summary_paths) {
  std::vector<Summary> summaries;
  for (const fs::path& p : summary_paths) {
    if (!fs::exists(p)) throw IoError("missing summary file " + p.string());
    summaries.push_back(load_summary(p));
  }
  return compare_summaries(summaries);
}

std::vector<fs::path> dump_reps_at(const RunConfig& config, std::size_t round) {
  RunConfig cfg = config;
  if (round < 1) throw ConfigError("--round", "must be >= 1");
  cfg.train.rounds = round;
  validate_config(cfg);
  const PreparedData data = prepare_data(cfg);
  std::vector<fs::path> written;
  for (std::uint64_t seed : cfg.seeds) {
    FederationSetup setup = make_setup(cfg, data, seed);
    setup.eval_every = round;
    FederationResult result = run_federation(setup);
    dump_clients(cfg.output_dir / "reps", seed, round, result.clients, &written);
  }
  return written;
}

}  // namespace dualfed
