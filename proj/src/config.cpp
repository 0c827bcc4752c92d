// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#include "dkfac/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace dkfac {

namespace {

std::string join(const std::vector<std::string>& items, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i)
      out += sep;
    out += items[i];
  }
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos)
    return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream iss(s);
  while (std::getline(iss, cur, sep))
    out.push_back(cur);
  if (!s.empty() && s.back() == sep)
    out.emplace_back();
  return out;
}

template <typename T>
bool parse_integer(const std::string& text, T& out) {
  const std::string s = trim(text);
  if (s.empty())
    return false;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

bool parse_real(const std::string& text, double& out) {
  const std::string s = trim(text);
  if (s.empty())
    return false;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end && std::isfinite(out);
}

bool parse_bool(const std::string& text, bool& out) {
  const std::string s = trim(text);
  if (s == "true" || s == "1") {
    out = true;
    return true;
  }
  if (s == "false" || s == "0") {
    out = false;
    return true;
  }
  return false;
}

struct KeyDef {
  std::function<std::string(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
KeyDef integer_key(T RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& v) -> std::string {
            T parsed{};
            if (!parse_integer(v, parsed))
              return "expected an integer, got '" + v + "'";
            c.*member = parsed;
            return "";
          },
          [member](const RunConfig& c) { return std::to_string(c.*member); }};
}

KeyDef real_key(std::function<double&(RunConfig&)> ref) {
  return {[ref](RunConfig& c, const std::string& v) -> std::string {
            double parsed = 0.0;
            if (!parse_real(v, parsed))
              return "expected a finite number, got '" + v + "'";
            ref(c) = parsed;
            return "";
          },
          [ref](const RunConfig& c) {
            RunConfig copy = c;
            return format_real(ref(copy));
          }};
}

KeyDef bool_key(bool RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& v) -> std::string {
            bool parsed = false;
            if (!parse_bool(v, parsed))
              return "expected true or false, got '" + v + "'";
            c.*member = parsed;
            return "";
          },
          [member](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); }};
}

KeyDef string_key(std::string RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& v) -> std::string {
            c.*member = trim(v);
            return "";
          },
          [member](const RunConfig& c) { return c.*member; }};
}

const std::map<std::string, KeyDef>& key_table() {
  static const std::map<std::string, KeyDef> table = [] {
    std::map<std::string, KeyDef> t;
    t["optimizer"] = string_key(&RunConfig::optimizer);
    t["workers"] = integer_key(&RunConfig::workers);
    t["parallel"] = bool_key(&RunConfig::parallel);
    t["global_batch"] = integer_key(&RunConfig::global_batch);
    t["grad_accumulation_steps"] = integer_key(&RunConfig::grad_accumulation_steps);
    t["epochs"] = integer_key(&RunConfig::epochs);
    t["seed"] = integer_key(&RunConfig::seed);
    t["layers"] = string_key(&RunConfig::layers);
    t["dataset"] = string_key(&RunConfig::dataset);
    t["synth_classes"] = integer_key(&RunConfig::synth_classes);
    t["synth_per_class"] = integer_key(&RunConfig::synth_per_class);
    t["synth_val_per_class"] = integer_key(&RunConfig::synth_val_per_class);
    t["synth_channels"] = integer_key(&RunConfig::synth_channels);
    t["synth_height"] = integer_key(&RunConfig::synth_height);
    t["synth_width"] = integer_key(&RunConfig::synth_width);
    t["idx_train_images"] = string_key(&RunConfig::idx_train_images);
    t["idx_train_labels"] = string_key(&RunConfig::idx_train_labels);
    t["idx_val_images"] = string_key(&RunConfig::idx_val_images);
    t["idx_val_labels"] = string_key(&RunConfig::idx_val_labels);
    t["alpha_mixup"] = real_key([](RunConfig& c) -> double& { return c.alpha_mixup; });
    t["lambda_mode"] = string_key(&RunConfig::lambda_mode);
    t["erase_p"] = real_key([](RunConfig& c) -> double& { return c.erase.p; });
    t["erase_s_min"] = real_key([](RunConfig& c) -> double& { return c.erase.s_min; });
    t["erase_s_max"] = real_key([](RunConfig& c) -> double& { return c.erase.s_max; });
    t["erase_r_min"] = real_key([](RunConfig& c) -> double& { return c.erase.r_min; });
    t["erase_r_max"] = real_key([](RunConfig& c) -> double& { return c.erase.r_max; });
    t["gamma0"] = real_key([](RunConfig& c) -> double& { return c.damping.gamma0; });
    t["gamma_target"] = real_key([](RunConfig& c) -> double& { return c.damping.gamma_target; });
    t["rho_bn"] = real_key([](RunConfig& c) -> double& { return c.damping.rho_bn; });
    t["t_warmup"] = {[](RunConfig& c, const std::string& v) -> std::string {
                       std::int64_t parsed = 0;
                       if (!parse_integer(v, parsed))
                         return "expected an integer, got '" + v + "'";
                       c.damping.t_warmup = parsed;
                       return "";
                     },
                     [](const RunConfig& c) { return std::to_string(c.damping.t_warmup); }};
    t["eta0"] = real_key([](RunConfig& c) -> double& { return c.lr.eta0; });
    t["m0"] = real_key([](RunConfig& c) -> double& { return c.lr.m0; });
    t["e_start"] = real_key([](RunConfig& c) -> double& { return c.lr.e_start; });
    t["e_end"] = real_key([](RunConfig& c) -> double& { return c.lr.e_end; });
    t["p_decay"] = real_key([](RunConfig& c) -> double& { return c.lr.p_decay; });
    t["lr_schedule"] = {[](RunConfig& c, const std::string& v) -> std::string {
                          const auto s = trim(v);
                          if (s == "polynomial")
                            c.lr_schedule = LrSchedule::polynomial;
                          else if (s == "constant")
                            c.lr_schedule = LrSchedule::constant;
                          else
                            return "expected polynomial or constant, got '" + v + "'";
                          return "";
                        },
                        [](const RunConfig& c) {
                          return std::string(c.lr_schedule == LrSchedule::constant ? "constant"
                                                                                   : "polynomial");
                        }};
    t["staleness"] = {[](RunConfig& c, const std::string& v) -> std::string {
                        try {
                          c.staleness = parse_interval_heuristic(trim(v));
                        } catch (const std::exception&) {
                          return "expected off, rampup or step13, got '" + v + "'";
                        }
                        return "";
                      },
                      [](const RunConfig& c) { return to_string(c.staleness); }};
    t["fresh_floor"] = integer_key(&RunConfig::fresh_floor);
    t["a_multiplier"] = integer_key(&RunConfig::a_multiplier);
    t["bn_fim_mode"] = {[](RunConfig& c, const std::string& v) -> std::string {
                          const auto s = trim(v);
                          if (s == "full")
                            c.bn_fim_mode = BnFimMode::full;
                          else if (s == "diagonal")
                            c.bn_fim_mode = BnFimMode::diagonal;
                          else
                            return "expected full or diagonal, got '" + v + "'";
                          return "";
                        },
                        [](const RunConfig& c) { return to_string(c.bn_fim_mode); }};
    t["rescale_weights"] = bool_key(&RunConfig::rescale_weights);
    t["rescale_bn"] = bool_key(&RunConfig::rescale_bn);
    t["factor_ema"] = real_key([](RunConfig& c) -> double& { return c.factor_ema; });
    t["threshold"] = real_key([](RunConfig& c) -> double& { return c.threshold; });
    t["sgd_eta0"] = real_key([](RunConfig& c) -> double& { return c.sgd_eta0; });
    t["sgd_m0"] = real_key([](RunConfig& c) -> double& { return c.sgd_m0; });
    t["bytes_per_real"] = integer_key(&RunConfig::bytes_per_real);
    t["eval_every"] = integer_key(&RunConfig::eval_every);
    return t;
  }();
  return table;
}

struct PresetRow {
  std::size_t batch;
  double alpha_mixup, gamma0, gamma_target, rho_bn;
  std::int64_t t_warmup;
  double p_decay, e_start, e_end, eta0, m0;
};

// BS, alpha_mixup, gamma0, gamma_target, rho_bn, t_warmup, p_decay, e_start, e_end, eta0, m0
constexpr PresetRow kPresets[] = {
    {4096, 0.4, 2.5e-2, 2.5e-4, 16, 313, 11, 1, 53, 8.18e-3, 0.997},
    {8192, 0.4, 2.5e-2, 2.5e-4, 16, 157, 8, 1, 53.5, 1.25e-2, 0.993},
    {16384, 0.4, 2.5e-2, 2.5e-4, 32, 79, 8, 1, 53.5, 2.5e-2, 0.985},
    {32768, 0.6, 2.0e-2, 2.0e-4, 16, 59, 3.5, 1.5, 49.5, 3.0e-2, 0.97},
    {65536, 0.6, 1.5e-2, 1.5e-4, 16, 40, 2.9, 2, 64.5, 4.0e-2, 0.95},
    {131072, 1.0, 1.0e-2, 1.0e-4, 8, 30, 2.9, 3, 107.6, 7.0e-2, 0.93},
};

struct LayerToken {
  std::string kind;
  std::string out;  // number or "classes"
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool bias = true;
  bool relu = false;
};

std::vector<LayerToken> tokenize_layers(const std::string& text, std::vector<std::string>& problems) {
  std::vector<LayerToken> out;
  if (trim(text).empty()) {
    problems.push_back("layers: empty architecture");
    return out;
  }
  for (const auto& raw : split(text, ',')) {
    const auto parts = split(trim(raw), ':');
    const std::string tok = trim(raw);
    LayerToken lt;
    lt.kind = parts.empty() ? "" : parts[0];
    std::size_t next = 1;
    auto bad = [&](const std::string& why) { problems.push_back("layers: '" + tok + "' " + why); };
    if (lt.kind == "fc") {
      if (parts.size() < 2) {
        bad("needs an output size");
        continue;
      }
      lt.out = parts[1];
      std::size_t n = 0;
      if (lt.out != "classes" && (!parse_integer(lt.out, n) || n == 0)) {
        bad("has a bad output size");
        continue;
      }
      next = 2;
    } else if (lt.kind == "conv") {
      std::size_t n = 0;
      if (parts.size() < 3 || !parse_integer(parts[1], n) || n == 0 ||
          !parse_integer(parts[2], lt.kernel) || lt.kernel == 0) {
        bad("needs conv:<out>:<kernel>");
        continue;
      }
      lt.out = parts[1];
      next = 3;
    } else if (lt.kind == "bn") {
      next = 1;
    } else {
      bad("has unknown layer kind");
      continue;
    }
    bool ok = true;
    for (std::size_t i = next; i < parts.size(); ++i) {
      const auto& opt = parts[i];
      if (opt == "relu") {
        lt.relu = true;
      } else if (opt == "nobias" && lt.kind != "bn") {
        lt.bias = false;
      } else if (lt.kind == "conv" && opt.size() > 1 && opt[0] == 's' &&
                 parse_integer(opt.substr(1), lt.stride) && lt.stride > 0) {
      } else if (lt.kind == "conv" && opt.size() > 1 && opt[0] == 'p' &&
                 parse_integer(opt.substr(1), lt.padding)) {
      } else {
        bad("has unknown option '" + opt + "'");
        ok = false;
      }
    }
    if (ok)
      out.push_back(lt);
  }
  return out;
}

} // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::runtime_error("invalid configuration:\n  " + join(problems, "\n  ")),
      problems_(std::move(problems)) {}

std::string format_real(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc())
    return "nan";
  return std::string(buf, ptr);
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, def] : key_table())
      k.push_back(name);
    return k;
  }();
  return keys;
}

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& row : kPresets)
      n.push_back("bs" + std::to_string(row.batch));
    return n;
  }();
  return names;
}

RunConfig preset(const std::string& name) {
  for (const auto& row : kPresets) {
    if (name != "bs" + std::to_string(row.batch))
      continue;
    RunConfig c;
    c.global_batch = row.batch;
    c.alpha_mixup = row.alpha_mixup;
    c.damping = {row.gamma0, row.gamma_target, row.rho_bn, row.t_warmup};
    c.lr = {row.eta0, row.m0, row.e_start, row.e_end, row.p_decay};
    return c;
  }
  throw ConfigError({"unknown preset '" + name + "' (expected one of " +
                     join(preset_names(), ", ") + ")"});
}

std::string set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& table = key_table();
  const auto it = table.find(key);
  if (it == table.end())
    return "unknown key '" + key + "'";
  const auto err = it->second.set(cfg, value);
  return err.empty() ? err : key + ": " + err;
}

std::string get_key(const RunConfig& cfg, const std::string& key) {
  const auto& table = key_table();
  const auto it = table.find(key);
  if (it == table.end())
    throw ConfigError({"unknown key '" + key + "'"});
  return it->second.get(cfg);
}

void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& source,
                       std::vector<std::string>& problems) {
  std::istringstream iss(text);
  std::string line;
  std::set<std::string> seen;
  for (std::size_t lineno = 1; std::getline(iss, line); ++lineno) {
    const auto hash = line.find('#');
    if (hash != std::string::npos)
      line.erase(hash);
    line = trim(line);
    if (line.empty())
      continue;
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      problems.push_back(where + "expected key = value");
      continue;
    }
    const std::string key = trim(line.substr(0, eq));
    if (!seen.insert(key).second) {
      problems.push_back(where + "duplicate key '" + key + "'");
      continue;
    }
    const auto err = set_key(cfg, key, line.substr(eq + 1));
    if (!err.empty())
      problems.push_back(where + err);
  }
}

void apply_override(RunConfig& cfg, const std::string& assignment,
                    std::vector<std::string>& problems) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    problems.push_back("--set " + assignment + ": expected key=value");
    return;
  }
  const auto err = set_key(cfg, trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
  if (!err.empty())
    problems.push_back("--set: " + err);
}

std::vector<std::string> validate(const RunConfig& c) {
  std::vector<std::string> p;
  auto check = [&](bool ok, const std::string& msg) {
    if (!ok)
      p.push_back(msg);
  };
  check(c.optimizer == "kfac" || c.optimizer == "sgd", "optimizer: expected kfac or sgd");
  check(c.workers >= 1, "workers: must be at least 1");
  check(c.global_batch >= 1, "global_batch: must be at least 1");
  check(c.workers == 0 || c.global_batch % c.workers == 0,
        "global_batch: must be divisible by workers");
  check(c.grad_accumulation_steps >= 1, "grad_accumulation_steps: must be at least 1");
  check(c.epochs >= 1, "epochs: must be at least 1");

  Shape3 input{1, 28, 28};
  std::size_t classes = 10;
  if (c.dataset == "synth") {
    input = {c.synth_channels, c.synth_height, c.synth_width};
    classes = c.synth_classes;
    check(c.synth_channels >= 1 && c.synth_height >= 1 && c.synth_width >= 1,
          "synth_channels/height/width: must be at least 1");
    check(c.synth_classes >= 2, "synth_classes: must be at least 2");
    check(c.synth_classes <= 2 * input.count(),
          "synth_classes: at most 2 * channels * height * width");
    check(c.synth_per_class >= 1, "synth_per_class: must be at least 1");
    check(c.synth_classes * c.synth_per_class >= c.effective_batch(),
          "synth_per_class: training set smaller than one effective batch");
  } else if (c.dataset == "idx") {
    check(!c.idx_train_images.empty() && !c.idx_train_labels.empty(),
          "idx_train_images/idx_train_labels: required when dataset = idx");
    check(c.idx_val_images.empty() == c.idx_val_labels.empty(),
          "idx_val_images/idx_val_labels: give both or neither");
  } else {
    p.push_back("dataset: expected synth or idx");
  }
  {
    std::vector<std::string> lp;
    tokenize_layers(c.layers, lp);
    if (lp.empty() && c.dataset == "synth" && input.count() > 0 && classes >= 1) {
      try {
        parse_layers(c.layers, input, classes);
      } catch (const std::exception& e) {
        lp.push_back(e.what());
      }
    }
    p.insert(p.end(), lp.begin(), lp.end());
  }

  check(c.alpha_mixup >= 0.0, "alpha_mixup: must be >= 0 (0 disables mixup)");
  check(c.lambda_mode == "batch" || c.lambda_mode == "sample",
        "lambda_mode: expected batch or sample");
  try {
    c.erase.validate();
  } catch (const std::exception& e) {
    p.push_back(std::string("erase: ") + e.what());
  }

  check(c.damping.gamma0 > 0.0, "gamma0: must be > 0");
  check(c.damping.gamma_target > 0.0, "gamma_target: must be > 0");
  check(c.damping.rho_bn > 1.0, "rho_bn: must be > 1");
  check(c.damping.gamma_target < c.damping.gamma0,
        "gamma_target: must be below gamma0 (damping decays during warmup)");
  check(c.damping.t_warmup >= 1, "t_warmup: must be at least 1");
  check(c.lr.eta0 > 0.0, "eta0: must be > 0");
  check(c.lr.m0 >= 0.0 && c.lr.m0 < 1.0, "m0: must lie in [0, 1)");
  check(c.lr.e_end > c.lr.e_start, "e_end: must exceed e_start");
  check(c.lr.e_start >= 0.0, "e_start: must be >= 0");
  check(c.lr.p_decay > 0.0, "p_decay: must be > 0");

  check(c.fresh_floor >= 0, "fresh_floor: must be >= 0");
  check(c.a_multiplier >= 1, "a_multiplier: must be at least 1");
  check(c.factor_ema >= 0.0 && c.factor_ema < 1.0, "factor_ema: must lie in [0, 1)");
  check(c.threshold > 0.0, "threshold: must be > 0");
  check(c.sgd_eta0 > 0.0, "sgd_eta0: must be > 0");
  check(c.sgd_m0 >= 0.0 && c.sgd_m0 < 1.0, "sgd_m0: must lie in [0, 1)");
  check(c.bytes_per_real == 2 || c.bytes_per_real == 4 || c.bytes_per_real == 8,
        "bytes_per_real: expected 2, 4 or 8");
  check(c.eval_every >= 1, "eval_every: must be at least 1");
  return p;
}

void require_valid(const RunConfig& cfg) {
  auto problems = validate(cfg);
  if (!problems.empty())
    throw ConfigError(std::move(problems));
}

std::string serialize(const RunConfig& cfg) {
  std::ostringstream oss;
  for (const auto& [name, def] : key_table()) {
    const auto v = def.get(cfg);
    oss << name << " =" << (v.empty() ? "" : " " + v) << "\n";
  }
  return oss.str();
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::vector<std::string> problems;
  apply_config_text(cfg, text, "config", problems);
  // Keys that did parse are still range-checked, so one run reports everything.
  for (auto& p : validate(cfg))
    problems.push_back(std::move(p));
  if (!problems.empty())
    throw ConfigError(std::move(problems));
  return cfg;
}

std::vector<LayerSpec> parse_layers(const std::string& text, Shape3 input, std::size_t classes) {
  std::vector<std::string> problems;
  const auto tokens = tokenize_layers(text, problems);
  if (!problems.empty())
    throw ConfigError(std::move(problems));
  std::vector<LayerSpec> specs;
  Shape3 cur = input;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto& t = tokens[i];
    LayerSpec s;
    try {
      if (t.kind == "fc") {
        std::size_t out = classes;
        if (t.out != "classes")
          parse_integer(t.out, out);
        s = fully_connected_spec(cur, out, t.bias, t.relu);
      } else if (t.kind == "conv") {
        std::size_t out = 0;
        parse_integer(t.out, out);
        s = conv2d_spec(cur, out, t.kernel, t.stride, t.padding, t.bias, t.relu);
      } else {
        s = batch_norm_spec(cur, t.relu);
      }
      s.validate();
    } catch (const std::exception& e) {
      throw ConfigError({"layers: layer " + std::to_string(i) + " (" + t.kind +
                         "): " + e.what()});
    }
    cur = s.out_dims;
    specs.push_back(s);
  }
  if (cur.count() != classes)
    throw ConfigError({"layers: network output has " + std::to_string(cur.count()) +
                       " values but there are " + std::to_string(classes) + " classes"});
  return specs;
}

} // namespace dkfac
