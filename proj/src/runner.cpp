// Copyright 2026 The dkfac Authors
// SPDX-License-Identifier: Apache-2.0

#include "dkfac/runner.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dkfac/random.hpp"

namespace dkfac {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kCheckpointFormat = "dkfac-checkpoint-1";
constexpr std::size_t kEvalChunk = 512;

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in)
    throw IoError("cannot read " + path.string());
  std::ostringstream oss;
  oss << in.rdbuf();
  return oss.str();
}

std::string opt_real(const std::optional<double>& v) { return v ? format_real(*v) : ""; }

Batch slice_batch(const Batch& b, std::size_t begin, std::size_t end) {
  auto in_shape = b.inputs.shape();
  auto lab_shape = b.labels.shape();
  in_shape[0] = end - begin;
  lab_shape[0] = end - begin;
  const std::size_t in_stride = b.inputs.stride0();
  const std::size_t lab_stride = b.labels.stride0();
  Batch out;
  out.inputs = Tensor(in_shape, std::vector<double>(b.inputs.storage().begin() + begin * in_stride,
                                                     b.inputs.storage().begin() + end * in_stride));
  out.labels = Tensor(lab_shape, std::vector<double>(b.labels.storage().begin() + begin * lab_stride,
                                                      b.labels.storage().begin() + end * lab_stride));
  return out;
}

json tensor_json(const Tensor& t) { return {{"shape", t.shape()}, {"data", t.storage()}}; }

Tensor tensor_from(const json& j) {
  auto shape = j.at("shape").get<std::vector<std::size_t>>();
  if (shape.empty())
    return {};
  return Tensor(std::move(shape), j.at("data").get<std::vector<double>>());
}

json matrix_json(const DenseMatrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.storage()}};
}

DenseMatrix matrix_from(const json& j) {
  return DenseMatrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                     j.at("data").get<std::vector<double>>());
}

json optional_int(const std::optional<std::int64_t>& v) { return v ? json(*v) : json(nullptr); }

std::optional<std::int64_t> optional_int_from(const json& j) {
  if (j.is_null())
    return std::nullopt;
  return j.get<std::int64_t>();
}

json diff_json(const std::vector<DiffRecord>& history) {
  json out = json::array();
  for (const auto& d : history)
    out.push_back({{"iteration", d.iteration},
                   {"kind", d.kind},
                   {"p", {d.summary.p5, d.summary.p25, d.summary.p50, d.summary.p75, d.summary.p95}}});
  return out;
}

std::vector<DiffRecord> diff_from(const json& j) {
  std::vector<DiffRecord> out;
  for (const auto& d : j) {
    const auto p = d.at("p").get<std::vector<double>>();
    if (p.size() != 5)
      throw IoError("checkpoint: malformed diff history");
    out.push_back({d.at("iteration").get<std::int64_t>(), d.at("kind").get<std::string>(),
                   {p[0], p[1], p[2], p[3], p[4]}});
  }
  return out;
}

json read_checkpoint_json(const fs::path& path) {
  const auto text = read_text(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError("checkpoint " + path.string() + " is not valid JSON: " + e.what());
  }
  if (j.value("format", "") != kCheckpointFormat)
    throw IoError("checkpoint " + path.string() + " has an unknown format");
  return j;
}

KfacOptions kfac_options(const RunConfig& cfg) {
  KfacOptions o;
  o.staleness = {cfg.staleness, cfg.fresh_floor, cfg.a_multiplier};
  o.bn_mode = cfg.bn_fim_mode;
  o.rescale_weights = cfg.rescale_weights;
  o.rescale_bn = cfg.rescale_bn;
  o.factor_ema = cfg.factor_ema;
  o.parallel = cfg.parallel;
  o.bytes_per_real = cfg.bytes_per_real;
  return o;
}

} // namespace

void write_metrics_row(std::ostream& os, const MetricsRow& r) {
  os << r.iteration << ',' << format_real(r.epoch) << ',' << format_real(r.lr) << ','
     << format_real(r.momentum) << ',' << opt_real(r.damping) << ',' << format_real(r.train_loss)
     << ',' << opt_real(r.train_acc) << ',' << opt_real(r.val_acc) << ','
     << (r.refresh_flag ? 1 : 0) << ',' << opt_real(r.diff_a_p50) << ','
     << opt_real(r.diff_g_p50) << ',' << opt_real(r.diff_f_p50) << ',' << r.stage3_bytes << ','
     << r.stage6_bytes << '\n';
}

void write_diff_history_csv(std::ostream& os, const std::vector<DiffRecord>& history) {
  os << "iteration,kind,p5,p25,p50,p75,p95\n";
  for (const auto& d : history)
    os << d.iteration << ',' << d.kind << ',' << format_real(d.summary.p5) << ','
       << format_real(d.summary.p25) << ',' << format_real(d.summary.p50) << ','
       << format_real(d.summary.p75) << ',' << format_real(d.summary.p95) << '\n';
}

std::pair<Dataset, std::optional<Dataset>> load_datasets(const RunConfig& cfg) {
  Dataset train;
  std::optional<Dataset> val;
  if (cfg.dataset == "synth") {
    const Shape3 dims{cfg.synth_channels, cfg.synth_height, cfg.synth_width};
    train = synth_gaussian_classes(cfg.synth_classes, cfg.synth_per_class, dims, cfg.seed);
    if (cfg.synth_val_per_class > 0) {
      const auto val_seed = keyed_rng({cfg.seed, static_cast<std::uint64_t>(Stream::validation)})();
      val = synth_gaussian_classes(cfg.synth_classes, cfg.synth_val_per_class, dims, val_seed);
    }
  } else {
    for (const auto& p : {cfg.idx_train_images, cfg.idx_train_labels, cfg.idx_val_images,
                          cfg.idx_val_labels})
      if (!p.empty() && !fs::exists(p))
        throw IoError("cannot open " + p);
    train = load_idx(cfg.idx_train_images, cfg.idx_train_labels);
    if (!cfg.idx_val_images.empty()) {
      val = load_idx(cfg.idx_val_images, cfg.idx_val_labels);
      val->class_count = std::max(val->class_count, train.class_count);
      train.class_count = val->class_count;
    }
  }
  const auto standardizer = Standardizer::fit(train);
  standardizer.apply(train);
  if (val)
    standardizer.apply(*val);
  return {std::move(train), std::move(val)};
}

RunConfig resolve_config(const std::optional<std::string>& preset_name,
                         const std::optional<fs::path>& config_path,
                         const std::vector<std::string>& overrides, const char* env_seed) {
  RunConfig cfg = preset_name ? preset(*preset_name) : RunConfig{};
  std::vector<std::string> problems;
  if (config_path)
    apply_config_text(cfg, read_text(*config_path), config_path->string(), problems);
  for (const auto& o : overrides)
    apply_override(cfg, o, problems);
  if (env_seed && *env_seed) {
    const auto err = set_key(cfg, "seed", env_seed);
    if (!err.empty())
      problems.push_back("KFAC_SEED: " + err);
  }
  // Keys that did parse are still range-checked, so one run reports everything.
  for (auto& p : validate(cfg))
    problems.push_back(std::move(p));
  if (!problems.empty())
    throw ConfigError(std::move(problems));
  return cfg;
}

Trainer::Trainer(RunConfig cfg) : Trainer(cfg, load_datasets(cfg)) {}

Trainer::Trainer(RunConfig cfg, std::pair<Dataset, std::optional<Dataset>> data)
    : cfg_(std::move(cfg)), train_(std::move(data.first)), val_(std::move(data.second)),
      cluster_(parse_layers(cfg_.layers, train_.sample_shape(), train_.class_count), cfg_.workers,
               cfg_.seed, kfac_options(cfg_)) {
  require_valid(cfg_);
  ipe_ = static_cast<std::int64_t>(train_.size() / cfg_.effective_batch());
  if (ipe_ == 0)
    throw ConfigError({"global_batch: training set of " + std::to_string(train_.size()) +
                       " samples is smaller than one effective batch"});
  gamma_ = cfg_.damping.gamma0;
  mixup_.resize(cfg_.workers);
  for (auto& m : mixup_)
    m.alpha_mixup = cfg_.alpha_mixup;
}

StepScalars Trainer::scalars() const {
  StepScalars s;
  s.iteration = t_;
  s.epoch_index = t_ / ipe_;
  s.epoch = static_cast<double>(t_) / static_cast<double>(ipe_);
  LrMomentumConfig lr = cfg_.lr;
  if (cfg_.optimizer == "sgd") {
    lr.eta0 = cfg_.sgd_eta0;
    lr.m0 = cfg_.sgd_m0;
  }
  if (cfg_.lr_schedule == LrSchedule::constant) {
    s.eta = lr.eta0;
    s.momentum = lr.m0;
  } else {
    s.eta = learning_rate(lr, s.epoch);
    s.momentum = momentum(lr, s.eta);
  }
  s.gamma = gamma_;
  s.gamma_bn = bn_damping(gamma_, cfg_.damping.rho_bn);
  return s;
}

std::vector<std::vector<Batch>> Trainer::build_shards(const EpochPlan& plan, std::size_t it) {
  const std::size_t p = cfg_.workers;
  const std::size_t shard = plan.shard_size();
  const std::size_t micro = cfg_.global_batch / p;
  const auto shape = train_.sample_shape();
  const auto t = static_cast<std::uint64_t>(t_);
  std::vector<std::vector<Batch>> shards(p);
  for (std::size_t w = 0; w < p; ++w) {
    Batch b = make_batch(train_, plan.shard(it, w));
    if (cfg_.erase.p > 0.0) {
      for (std::size_t n = 0; n < shard; ++n) {
        auto rng = keyed_rng({cfg_.seed, static_cast<std::uint64_t>(Stream::erase), t, w * shard + n});
        random_erase(b.inputs.slice(n), shape.channels, shape.height, shape.width, cfg_.erase, rng);
      }
    }
    if (cfg_.alpha_mixup > 0.0) {
      const double a = cfg_.alpha_mixup;
      if (cfg_.lambda_mode == "sample") {
        std::vector<double> lambdas(shard);
        for (std::size_t n = 0; n < shard; ++n) {
          auto rng = keyed_rng(
              {cfg_.seed, static_cast<std::uint64_t>(Stream::mixup_lambda), t, w * shard + n});
          lambdas[n] = sample_beta(a, a, rng);
        }
        b = running_mixup(mixup_[w], b, lambdas);
      } else {
        auto rng = keyed_rng({cfg_.seed, static_cast<std::uint64_t>(Stream::mixup_lambda), t});
        b = running_mixup(mixup_[w], b, sample_beta(a, a, rng));
      }
    }
    for (std::size_t k = 0; k < cfg_.grad_accumulation_steps; ++k)
      shards[w].push_back(slice_batch(b, k * micro, (k + 1) * micro));
  }
  return shards;
}

double Trainer::evaluate(const Dataset& d) const {
  const Network& net = cluster_.network(0);
  std::size_t correct = 0;
  const auto shape = d.sample_shape();
  for (std::size_t begin = 0; begin < d.size(); begin += kEvalChunk) {
    const std::size_t end = std::min(d.size(), begin + kEvalChunk);
    const std::size_t stride = d.images.stride0();
    Tensor inputs({end - begin, shape.channels, shape.height, shape.width},
                  std::vector<double>(d.images.storage().begin() + begin * stride,
                                      d.images.storage().begin() + end * stride));
    const auto pred = argmax_rows(predict(net, inputs));
    for (std::size_t n = 0; n < pred.size(); ++n)
      correct += pred[n] == d.labels[begin + n] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(d.size());
}

TrainResult Trainer::run(const TrainOptions& opts) {
  const bool kfac = cfg_.optimizer == "kfac";
  const std::int64_t total = static_cast<std::int64_t>(cfg_.epochs) * ipe_;
  const bool resumed = t_ > 0;

  std::ofstream metrics;
  if (opts.out_dir) {
    std::error_code ec;
    fs::create_directories(*opts.out_dir, ec);
    const auto path = *opts.out_dir / opts.metrics_name;
    const bool append = resumed && fs::exists(path);
    metrics.open(path, append ? std::ios::app : std::ios::trunc);
    if (!metrics)
      throw IoError("cannot write " + path.string());
    if (!append)
      metrics << kMetricsHeader << '\n';
  }

  TrainResult result;
  result.iterations_per_epoch = ipe_;
  std::optional<EpochPlan> plan;
  std::int64_t plan_epoch_index = -1;
  while (t_ < total) {
    const std::int64_t epoch_index = t_ / ipe_;
    const auto it = static_cast<std::size_t>(t_ % ipe_);
    if (epoch_index != plan_epoch_index) {
      plan = plan_epoch(train_, cfg_.effective_batch(), cfg_.workers, cfg_.seed, epoch_index);
      plan_epoch_index = epoch_index;
    }
    const auto shards = build_shards(*plan, it);
    const StepScalars sc = scalars();
    IterationTrace trace = kfac ? cluster_.kfac_iteration(shards, sc) : cluster_.sgd_iteration(shards, sc);
    if (!std::isfinite(trace.loss))
      throw DivergenceError("non-finite training loss at iteration " + std::to_string(t_));

    MetricsRow row;
    row.iteration = t_;
    row.epoch = sc.epoch;
    row.lr = sc.eta;
    row.momentum = sc.momentum;
    if (kfac)
      row.damping = sc.gamma;
    row.train_loss = trace.loss;
    row.refresh_flag = trace.refreshed;
    auto record = [&](const std::vector<double>& v, const char* kind) -> std::optional<double> {
      if (v.empty())
        return std::nullopt;
      const auto s = percentiles(v);
      diffs_.push_back({t_, kind, s});
      return s.p50;
    };
    row.diff_a_p50 = record(trace.diff_a, "A");
    row.diff_g_p50 = record(trace.diff_g, "G");
    row.diff_f_p50 = record(trace.diff_f, "Fbn");
    row.stage3_bytes = trace.stage3_bytes;
    row.stage6_bytes = trace.stage6_bytes;

    const std::int64_t next = t_ + 1;
    if (next % static_cast<std::int64_t>(cfg_.eval_every) == 0 || next % ipe_ == 0 || next == total) {
      row.train_acc = evaluate(train_);
      if (val_)
        row.val_acc = evaluate(*val_);
      result.final_train_acc = *row.train_acc;
      result.final_val_acc = row.val_acc;
      if (!result.iterations_to_threshold && *row.train_acc >= cfg_.threshold)
        result.iterations_to_threshold = next;
    }

    if (kfac)
      gamma_ = damping_step(cfg_.damping, gamma_);
    t_ = next;

    result.final_loss = trace.loss;
    result.stage3_bytes += trace.stage3_bytes;
    result.stage6_bytes += trace.stage6_bytes;
    ++result.iterations;
    if (metrics) {
      write_metrics_row(metrics, row);
      metrics.flush();
    }
    if (opts.on_iteration)
      opts.on_iteration(trace, row);
    result.rows.push_back(row);
    result.traces.push_back(std::move(trace));
    if (opts.stop_at_threshold && result.iterations_to_threshold)
      break;
  }

  if (opts.out_dir) {
    const auto ledger_path = *opts.out_dir / "ledger.csv";
    std::ostringstream ledger_text;
    cluster_.ledger().write_csv(ledger_text);
    std::string text = ledger_text.str();
    const bool append = resumed && fs::exists(ledger_path);
    if (append)
      text.erase(0, text.find('\n') + 1);
    std::ofstream ledger(ledger_path, append ? std::ios::app : std::ios::trunc);
    ledger << text;

    std::ofstream fim(*opts.out_dir / "fim_memory.csv");
    write_fim_memory_csv(fim, fim_memory_report(specs(), cfg_.bytes_per_real));
    if (!ledger || !fim || !metrics)
      throw IoError("failed writing outputs in " + opts.out_dir->string());
    if (opts.write_checkpoint)
      save_checkpoint(*opts.out_dir / "checkpoint.json");
  }
  return result;
}

void Trainer::save_checkpoint(const fs::path& path) const {
  json j;
  j["format"] = kCheckpointFormat;
  j["config"] = serialize(cfg_);
  j["iteration"] = t_;
  j["gamma"] = gamma_;
  json workers = json::array();
  for (std::size_t w = 0; w < cluster_.worker_count(); ++w) {
    const Worker& wk = cluster_.workers()[w];
    json layers = json::array();
    for (const auto& layer : wk.net)
      layers.push_back({{"weights", tensor_json(layer.record.weights)},
                        {"velocity", tensor_json(layer.record.velocity)},
                        {"running_mean", layer.running.mean},
                        {"running_var", layer.running.var}});
    json pairs = json::array();
    for (const auto& [l, p] : wk.curvature.pairs)
      pairs.push_back({{"layer", l},
                       {"a_factor", matrix_json(p.a_factor)},
                       {"g_factor", matrix_json(p.g_factor)},
                       {"a_inv", matrix_json(p.a_inv)},
                       {"g_inv", matrix_json(p.g_inv)},
                       {"last_refresh", optional_int(p.last_refresh)}});
    json blocks = json::array();
    for (const auto& [l, b] : wk.curvature.bn_blocks)
      blocks.push_back({{"layer", l},
                        {"mode", to_string(b.mode)},
                        {"full", matrix_json(b.full)},
                        {"diag", b.diag},
                        {"damping", b.damping},
                        {"last_refresh", optional_int(b.last_refresh)}});
    const MixupState& m = mixup_.at(w);
    workers.push_back({{"layers", layers},
                       {"pairs", pairs},
                       {"bn_blocks", blocks},
                       {"mixup",
                        {{"initialized", m.initialized},
                         {"prev_inputs", tensor_json(m.prev_inputs)},
                         {"prev_labels", tensor_json(m.prev_labels)}}}});
  }
  j["workers"] = workers;
  j["diff_history"] = diff_json(diffs_);

  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out)
      throw IoError("cannot write " + tmp.string());
    out << j.dump();
    if (!out)
      throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec)
    throw IoError("cannot move checkpoint into place at " + path.string());
}

void Trainer::load_checkpoint(const fs::path& path) {
  const json j = read_checkpoint_json(path);
  try {
    const auto& workers = j.at("workers");
    if (workers.size() != cluster_.worker_count())
      throw IoError("checkpoint has " + std::to_string(workers.size()) + " workers, config has " +
                    std::to_string(cluster_.worker_count()));
    auto& pool = cluster_.workers();
    for (std::size_t w = 0; w < pool.size(); ++w) {
      const auto& wj = workers[w];
      auto& net = pool[w].net;
      if (wj.at("layers").size() != net.size())
        throw IoError("checkpoint architecture does not match the config");
      for (std::size_t l = 0; l < net.size(); ++l) {
        const auto& lj = wj.at("layers")[l];
        auto weights = tensor_from(lj.at("weights"));
        if (weights.shape() != net[l].record.weights.shape())
          throw IoError("checkpoint layer " + std::to_string(l) + " has a different shape");
        net[l].record.weights = std::move(weights);
        net[l].record.velocity = tensor_from(lj.at("velocity"));
        net[l].running.mean = lj.at("running_mean").get<std::vector<double>>();
        net[l].running.var = lj.at("running_var").get<std::vector<double>>();
      }
      auto& cur = pool[w].curvature;
      cur = {};
      for (const auto& pj : wj.at("pairs")) {
        KroneckerPair p;
        p.a_factor = matrix_from(pj.at("a_factor"));
        p.g_factor = matrix_from(pj.at("g_factor"));
        p.a_inv = matrix_from(pj.at("a_inv"));
        p.g_inv = matrix_from(pj.at("g_inv"));
        p.last_refresh = optional_int_from(pj.at("last_refresh"));
        cur.pairs[pj.at("layer").get<std::size_t>()] = std::move(p);
      }
      for (const auto& bj : wj.at("bn_blocks")) {
        BnFisherBlock b;
        b.mode = bj.at("mode").get<std::string>() == "diagonal" ? BnFimMode::diagonal : BnFimMode::full;
        b.full = matrix_from(bj.at("full"));
        b.diag = bj.at("diag").get<std::vector<double>>();
        b.damping = bj.at("damping").get<double>();
        b.last_refresh = optional_int_from(bj.at("last_refresh"));
        cur.bn_blocks[bj.at("layer").get<std::size_t>()] = std::move(b);
      }
      const auto& mj = wj.at("mixup");
      mixup_[w].initialized = mj.at("initialized").get<bool>();
      mixup_[w].prev_inputs = tensor_from(mj.at("prev_inputs"));
      mixup_[w].prev_labels = tensor_from(mj.at("prev_labels"));
    }
    t_ = j.at("iteration").get<std::int64_t>();
    gamma_ = j.at("gamma").get<double>();
    diffs_ = diff_from(j.at("diff_history"));
  } catch (const json::exception& e) {
    throw IoError("checkpoint " + path.string() + " is malformed: " + e.what());
  } catch (const std::invalid_argument& e) {
    throw IoError("checkpoint " + path.string() + " is malformed: " + e.what());
  }
}

RunConfig checkpoint_config(const fs::path& path) {
  const json j = read_checkpoint_json(path);
  return parse_config(j.at("config").get<std::string>());
}

std::vector<DiffRecord> checkpoint_diff_history(const fs::path& path) {
  const json j = read_checkpoint_json(path);
  return diff_from(j.at("diff_history"));
}

} // namespace dkfac
