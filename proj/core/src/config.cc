#include "dualfed/config.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "dualfed/errors.h"

namespace dualfed {

MethodVariant RunConfig::variant() const {
  MethodVariant v = make_variant(method, mu);
  if (personalize) v = with_tag_overrides(v, *personalize);
  return v;
}

std::string RunConfig::display_label() const {
  return label.empty() ? std::string(method_name(method)) : label;
}

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in{std::string(s)};
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double to_double(std::string_view key, std::string_view raw) {
  const std::string s = trim(raw);
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw ConfigError(std::string(key), "expected a number, got '" + s + "'");
  }
  return v;
}

std::uint64_t to_u64(std::string_view key, std::string_view raw) {
  const std::string s = trim(raw);
  std::uint64_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw ConfigError(std::string(key), "expected a non-negative integer, got '" + s + "'");
  }
  return v;
}

std::size_t to_size(std::string_view key, std::string_view raw) {
  return static_cast<std::size_t>(to_u64(key, raw));
}

bool to_bool(std::string_view key, std::string_view raw) {
  const std::string s = trim(raw);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError(std::string(key), "expected true or false, got '" + s + "'");
}

std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

template <typename T, typename F>
std::string join(const std::vector<T>& items, F&& f) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ",";
    out += f(items[i]);
  }
  return out;
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

TagPolicy parse_personalize(std::string_view key, std::string_view raw) {
  TagPolicy tags{Tag::kGlobal, Tag::kGlobal, Tag::kGlobal, Tag::kGlobal};
  const std::string s = trim(raw);
  if (s == "none") return tags;
  for (const std::string& item : split_list(s)) {
    if (item == "encoder") {
      tags.encoder = Tag::kPersonal;
    } else if (item == "projector") {
      tags.projector = Tag::kPersonal;
    } else if (item == "personal_classifier") {
      tags.personal_classifier = Tag::kPersonal;
    } else if (item == "global_classifier") {
      tags.global_classifier = Tag::kPersonal;
    } else {
      throw ConfigError(std::string(key),
                        "unknown group '" + item +
                            "' (use encoder, projector, personal_classifier, global_classifier "
                            "or none)");
    }
  }
  return tags;
}

std::string format_personalize(const TagPolicy& tags) {
  std::vector<std::string> items;
  if (tags.encoder == Tag::kPersonal) items.push_back("encoder");
  if (tags.projector == Tag::kPersonal) items.push_back("projector");
  if (tags.personal_classifier == Tag::kPersonal) items.push_back("personal_classifier");
  if (tags.global_classifier == Tag::kPersonal) items.push_back("global_classifier");
  return items.empty() ? "none" : join(items, [](const std::string& s) { return s; });
}

struct KeySpec {
  std::string key;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<KeySpec>& registry() {
  static const std::vector<KeySpec> specs = [] {
    std::vector<KeySpec> k;
    auto add = [&k](std::string key, std::function<void(RunConfig&, std::string_view)> set,
                    std::function<std::string(const RunConfig&)> get) {
      k.push_back({std::move(key), std::move(set), std::move(get)});
    };

    add("method.name",
        [](RunConfig& c, std::string_view v) { c.method = parse_method(trim(v)); },
        [](const RunConfig& c) { return std::string(method_name(c.method)); });
    add("method.mu", [](RunConfig& c, std::string_view v) { c.mu = to_double("method.mu", v); },
        [](const RunConfig& c) { return fmt(c.mu); });
    add("method.personalize",
        [](RunConfig& c, std::string_view v) {
          const std::string s = trim(v);
          if (s == "default" || s.empty()) {
            c.personalize.reset();
          } else {
            c.personalize = parse_personalize("method.personalize", s);
          }
        },
        [](const RunConfig& c) {
          return c.personalize ? format_personalize(*c.personalize) : std::string("default");
        });

    add("arch.encoder_widths",
        [](RunConfig& c, std::string_view v) {
          c.arch.encoder_widths.clear();
          for (const auto& item : split_list(v))
            c.arch.encoder_widths.push_back(to_size("arch.encoder_widths", item));
        },
        [](const RunConfig& c) {
          return join(c.arch.encoder_widths, [](std::size_t w) { return std::to_string(w); });
        });
    add("arch.encoder_bn",
        [](RunConfig& c, std::string_view v) { c.arch.encoder_bn = to_bool("arch.encoder_bn", v); },
        [](const RunConfig& c) { return fmt_bool(c.arch.encoder_bn); });
    add("arch.projector_depth",
        [](RunConfig& c, std::string_view v) {
          c.arch.projector_depth = to_size("arch.projector_depth", v);
        },
        [](const RunConfig& c) { return std::to_string(c.arch.projector_depth); });
    add("arch.projector_hidden",
        [](RunConfig& c, std::string_view v) {
          c.arch.projector_hidden = to_size("arch.projector_hidden", v);
        },
        [](const RunConfig& c) { return std::to_string(c.arch.projector_hidden); });
    add("arch.projector_out",
        [](RunConfig& c, std::string_view v) {
          c.arch.projector_out = to_size("arch.projector_out", v);
        },
        [](const RunConfig& c) { return std::to_string(c.arch.projector_out); });
    add("arch.projector_bn",
        [](RunConfig& c, std::string_view v) {
          c.arch.projector_bn = to_bool("arch.projector_bn", v);
        },
        [](const RunConfig& c) { return fmt_bool(c.arch.projector_bn); });
    add("arch.bn_momentum",
        [](RunConfig& c, std::string_view v) {
          c.arch.bn.momentum = to_double("arch.bn_momentum", v);
        },
        [](const RunConfig& c) { return fmt(c.arch.bn.momentum); });
    add("arch.bn_epsilon",
        [](RunConfig& c, std::string_view v) { c.arch.bn.epsilon = to_double("arch.bn_epsilon", v); },
        [](const RunConfig& c) { return fmt(c.arch.bn.epsilon); });

    add("train.lr", [](RunConfig& c, std::string_view v) { c.train.lr = to_double("train.lr", v); },
        [](const RunConfig& c) { return fmt(c.train.lr); });
    add("train.momentum",
        [](RunConfig& c, std::string_view v) { c.train.momentum = to_double("train.momentum", v); },
        [](const RunConfig& c) { return fmt(c.train.momentum); });
    add("train.batch_size",
        [](RunConfig& c, std::string_view v) { c.train.batch_size = to_size("train.batch_size", v); },
        [](const RunConfig& c) { return std::to_string(c.train.batch_size); });
    add("train.local_epochs",
        [](RunConfig& c, std::string_view v) {
          c.train.local_epochs = to_size("train.local_epochs", v);
        },
        [](const RunConfig& c) { return std::to_string(c.train.local_epochs); });
    add("train.rounds",
        [](RunConfig& c, std::string_view v) { c.train.rounds = to_size("train.rounds", v); },
        [](const RunConfig& c) { return std::to_string(c.train.rounds); });
    add("train.strategy",
        [](RunConfig& c, std::string_view v) {
          const std::string s = trim(v);
          if (s == "stage_wise" || s == "stagewise") {
            c.train.strategy = Strategy::kStageWise;
          } else if (s == "simultaneous") {
            c.train.strategy = Strategy::kSimultaneous;
          } else {
            throw ConfigError("train.strategy", "expected stage_wise or simultaneous, got '" + s + "'");
          }
        },
        [](const RunConfig& c) {
          return std::string(c.train.strategy == Strategy::kStageWise ? "stage_wise"
                                                                      : "simultaneous");
        });

    add("loss.tau", [](RunConfig& c, std::string_view v) { c.train.loss.tau = to_double("loss.tau", v); },
        [](const RunConfig& c) { return fmt(c.train.loss.tau); });
    add("loss.lambda",
        [](RunConfig& c, std::string_view v) { c.train.loss.lambda = to_double("loss.lambda", v); },
        [](const RunConfig& c) { return fmt(c.train.loss.lambda); });

    add("data.source",
        [](RunConfig& c, std::string_view v) {
          const std::string s = trim(v);
          if (s == "synthetic") {
            c.source = DataSource::kSynthetic;
          } else if (s == "flatfile") {
            c.source = DataSource::kFlatfile;
          } else {
            throw ConfigError("data.source", "expected synthetic or flatfile, got '" + s + "'");
          }
        },
        [](const RunConfig& c) {
          return std::string(c.source == DataSource::kSynthetic ? "synthetic" : "flatfile");
        });
    add("data.num_domains",
        [](RunConfig& c, std::string_view v) {
          c.synthetic.num_domains = to_size("data.num_domains", v);
        },
        [](const RunConfig& c) { return std::to_string(c.synthetic.num_domains); });
    add("data.num_classes",
        [](RunConfig& c, std::string_view v) {
          c.synthetic.num_classes = to_size("data.num_classes", v);
        },
        [](const RunConfig& c) { return std::to_string(c.synthetic.num_classes); });
    add("data.input_dim",
        [](RunConfig& c, std::string_view v) { c.synthetic.input_dim = to_size("data.input_dim", v); },
        [](const RunConfig& c) { return std::to_string(c.synthetic.input_dim); });
    add("data.train_per_client",
        [](RunConfig& c, std::string_view v) {
          c.synthetic.train_per_client = to_size("data.train_per_client", v);
        },
        [](const RunConfig& c) { return std::to_string(c.synthetic.train_per_client); });
    add("data.test_per_client",
        [](RunConfig& c, std::string_view v) {
          c.synthetic.test_per_client = to_size("data.test_per_client", v);
        },
        [](const RunConfig& c) { return std::to_string(c.synthetic.test_per_client); });
    add("data.probe_per_domain",
        [](RunConfig& c, std::string_view v) {
          c.synthetic.probe_per_domain = to_size("data.probe_per_domain", v);
        },
        [](const RunConfig& c) { return std::to_string(c.synthetic.probe_per_domain); });
    add("data.prototype_sigma",
        [](RunConfig& c, std::string_view v) {
          c.synthetic.prototype_sigma = to_double("data.prototype_sigma", v);
        },
        [](const RunConfig& c) { return fmt(c.synthetic.prototype_sigma); });
    add("data.noise_sigma",
        [](RunConfig& c, std::string_view v) {
          c.synthetic.noise_sigma = to_double("data.noise_sigma", v);
        },
        [](const RunConfig& c) { return fmt(c.synthetic.noise_sigma); });
    add("data.domain_shift",
        [](RunConfig& c, std::string_view v) {
          c.synthetic.domain_shift = to_double("data.domain_shift", v);
        },
        [](const RunConfig& c) { return fmt(c.synthetic.domain_shift); });
    add("data.bias_sigma",
        [](RunConfig& c, std::string_view v) {
          c.synthetic.bias_sigma = to_double("data.bias_sigma", v);
        },
        [](const RunConfig& c) { return fmt(c.synthetic.bias_sigma); });
    add("data.difficulty",
        [](RunConfig& c, std::string_view v) {
          c.synthetic.difficulty.clear();
          for (const auto& item : split_list(v))
            c.synthetic.difficulty.push_back(to_double("data.difficulty", item));
        },
        [](const RunConfig& c) {
          return c.synthetic.difficulty.empty() ? std::string()
                                                : join(c.synthetic.difficulty, fmt);
        });
    add("data.seed",
        [](RunConfig& c, std::string_view v) { c.synthetic.seed = to_u64("data.seed", v); },
        [](const RunConfig& c) { return std::to_string(c.synthetic.seed); });
    add("data.train_files",
        [](RunConfig& c, std::string_view v) {
          c.flatfile.train.clear();
          for (const auto& item : split_list(v)) c.flatfile.train.emplace_back(item);
        },
        [](const RunConfig& c) {
          return join(c.flatfile.train, [](const std::filesystem::path& p) { return p.string(); });
        });
    add("data.test_files",
        [](RunConfig& c, std::string_view v) {
          c.flatfile.test.clear();
          for (const auto& item : split_list(v)) c.flatfile.test.emplace_back(item);
        },
        [](const RunConfig& c) {
          return join(c.flatfile.test, [](const std::filesystem::path& p) { return p.string(); });
        });
    add("data.probe_file",
        [](RunConfig& c, std::string_view v) {
          const std::string s = trim(v);
          if (s.empty()) {
            c.flatfile.probe.reset();
          } else {
            c.flatfile.probe = s;
          }
        },
        [](const RunConfig& c) {
          return c.flatfile.probe ? c.flatfile.probe->string() : std::string();
        });

    add("run.seeds",
        [](RunConfig& c, std::string_view v) {
          c.seeds.clear();
          for (const auto& item : split_list(v)) c.seeds.push_back(to_u64("run.seeds", item));
        },
        [](const RunConfig& c) {
          return join(c.seeds, [](std::uint64_t s) { return std::to_string(s); });
        });
    add("run.output_dir",
        [](RunConfig& c, std::string_view v) { c.output_dir = trim(v); },
        [](const RunConfig& c) { return c.output_dir.string(); });
    add("run.eval_every",
        [](RunConfig& c, std::string_view v) { c.eval_every = to_size("run.eval_every", v); },
        [](const RunConfig& c) { return std::to_string(c.eval_every); });
    add("run.dump_reps",
        [](RunConfig& c, std::string_view v) { c.dump_reps = to_bool("run.dump_reps", v); },
        [](const RunConfig& c) { return fmt_bool(c.dump_reps); });
    add("run.checkpoint_every",
        [](RunConfig& c, std::string_view v) {
          c.checkpoint_every = to_size("run.checkpoint_every", v);
        },
        [](const RunConfig& c) { return std::to_string(c.checkpoint_every); });
    add("run.threads",
        [](RunConfig& c, std::string_view v) { c.threads = to_size("run.threads", v); },
        [](const RunConfig& c) { return std::to_string(c.threads); });
    add("run.label", [](RunConfig& c, std::string_view v) { c.label = trim(v); },
        [](const RunConfig& c) { return c.label; });
    return k;
  }();
  return specs;
}

const KeySpec* lookup(std::string_view key) {
  for (const KeySpec& s : registry())
    if (s.key == key) return &s;
  return nullptr;
}

// First line of a flat file tells us the feature width.
std::size_t flatfile_width(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("data.train_files", "cannot open " + path.string());
  std::string header;
  std::getline(in, header);
  const auto cols = static_cast<std::size_t>(std::count(header.begin(), header.end(), ','));
  if (cols == 0) throw ConfigError("data.train_files", path.string() + " has no feature columns");
  return cols;
}

}  // namespace

void set_config_value(RunConfig& config, std::string_view key, std::string_view value) {
  const KeySpec* spec = lookup(key);
  if (spec == nullptr) throw ConfigError(std::string(key), "unknown key");
  spec->set(config, value);
}

RunConfig parse_config_text(std::string_view text) {
  RunConfig config;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no), "expected 'key = value'");
    }
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError(key, "repeated key");
    set_config_value(config, key, value);
  }
  return config;
}

RunConfig parse_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config", "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

void validate_config(RunConfig& config) {
  config.train.validate();
  if (config.train.rounds < 1) throw ConfigError("train.rounds", "must be >= 1");
  if (config.seeds.empty()) throw ConfigError("run.seeds", "need at least one seed");
  if (config.eval_every < 1) throw ConfigError("run.eval_every", "must be >= 1");
  if (config.threads < 1) throw ConfigError("run.threads", "must be >= 1");
  if (config.method == Method::kFedProx && !(config.mu >= 0.0))
    throw ConfigError("method.mu", "must be >= 0");
  {
    std::set<std::uint64_t> unique(config.seeds.begin(), config.seeds.end());
    if (unique.size() != config.seeds.size()) throw ConfigError("run.seeds", "repeated seed");
  }
  (void)config.variant();  // rejects personalize overrides on single-head methods

  config.arch.num_classes = config.synthetic.num_classes;
  if (config.source == DataSource::kSynthetic) {
    config.synthetic.validate();
    config.arch.input_dim = config.synthetic.input_dim;
  } else {
    const FlatfileSpec& f = config.flatfile;
    if (f.train.empty()) throw ConfigError("data.train_files", "need one file per client");
    if (f.test.size() != f.train.size())
      throw ConfigError("data.test_files", "need exactly one test file per train file");
    if (config.synthetic.num_classes < 2) throw ConfigError("data.num_classes", "must be >= 2");
    config.arch.input_dim = flatfile_width(f.train.front());
  }
  config.arch.validate();
}

std::string to_config_text(const RunConfig& config) {
  std::string out;
  for (const KeySpec& s : registry()) out += s.key + " = " + s.get(config) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const KeySpec& s : registry()) keys.push_back(s.key);
  return keys;
}

}  // namespace dualfed
