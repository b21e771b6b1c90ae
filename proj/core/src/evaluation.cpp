#include "trus/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <ostream>
#include <random>
#include <set>
#include <thread>

#include <json.hpp>

#include "trus/error.hpp"
#include "trus/prototype.hpp"
#include "trus/registry.hpp"
#include "trus/text.hpp"

namespace trus {
using nlohmann::json;

namespace {

constexpr std::uint64_t kTextStream = 0x7E47;
constexpr std::uint64_t kResampleStream = 0xA11CE;

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::string indexed_id(std::string_view prefix, std::size_t i) {
  std::string num = std::to_string(i);
  if (num.size() < 3) num.insert(0, 3 - num.size(), '0');
  return std::string(prefix) + "-" + num;
}

ToySpeaker population_speaker(const EvalConfig& cfg, const std::string& prefix, std::size_t i) {
  return ToySpeaker::from_seed(indexed_id(prefix, i), mix_seed(mix_seed(cfg.seed, fnv1a64(prefix)), i),
                               cfg.model.channels);
}

ToySpeaker training_speaker(const EvalConfig& cfg, std::size_t i) {
  return population_speaker(cfg, cfg.training_prefix, i);
}

ToySpeaker fresh_speaker(const EvalConfig& cfg, std::size_t i) { return population_speaker(cfg, cfg.unseen_prefix, i); }

unsigned worker_count(const EvalConfig& cfg) {
  const unsigned n = cfg.threads ? cfg.threads : std::thread::hardware_concurrency();
  return std::max(1u, n);
}

template <typename Fn>
void parallel_for(std::size_t n, unsigned threads, Fn fn) {
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

struct Subject {
  ToySpeaker speaker;
  std::string condition;
  ActivationTape reference;  // pooled
  std::vector<std::uint64_t> text_seeds;
  std::vector<SynthesisOutput> baseline;  // tapes dropped
  std::vector<std::uint64_t> baseline_digest;
};

struct RunResult {
  double sim_baseline = 0.0;
  double sim_steered = 0.0;
  double content_error = 0.0;
  std::size_t cells_steered = 0;
  bool identical = false;
};

// Either a numeric k or the all-layers band.
struct Threshold {
  std::optional<double> k;
  std::string label() const { return k ? band_name(*k) : std::string(band_label(Band::All)); }
};

class SuiteRunner {
 public:
  explicit SuiteRunner(const EvalConfig& cfg) : cfg_(cfg), model_(cfg.model), threads_(worker_count(cfg)) {}

  const ToyModel& model() const { return model_; }

  void add(std::string_view condition, std::vector<ToySpeaker> speakers) {
    const std::size_t first = subjects_.size();
    for (auto& sp : speakers) {
      Subject s;
      s.condition = std::string(condition);
      for (std::size_t j = 0; j < cfg_.text_seeds_per_speaker; ++j) {
        s.text_seeds.push_back(mix_seed(mix_seed(sp.seed, kTextStream), j));
      }
      s.speaker = std::move(sp);
      s.baseline.resize(s.text_seeds.size());
      s.baseline_digest.resize(s.text_seeds.size());
      subjects_.push_back(std::move(s));
    }
    const std::size_t runs_per = cfg_.text_seeds_per_speaker + 1;
    parallel_for((subjects_.size() - first) * runs_per, threads_, [&](std::size_t i) {
      Subject& s = subjects_[first + i / runs_per];
      const std::size_t j = i % runs_per;
      if (j == 0) {
        s.reference = model_.reference_tape(s.speaker).to_pooled();
      } else {
        SynthesisOutput out = model_.synthesize(s.speaker, s.text_seeds[j - 1]);
        s.baseline_digest[j - 1] = tape_digest(out.tape);
        out.tape = {};
        s.baseline[j - 1] = std::move(out);
      }
    });
  }

  const std::vector<Subject>& subjects() const { return subjects_; }

  std::vector<ActivationTape> retain_references(std::size_t n) const {
    std::vector<ActivationTape> out;
    for (const auto& s : subjects_) {
      if (s.condition == kRetain && out.size() < n) out.push_back(s.reference);
    }
    return out;
  }

  // One block: register every opt-out subject against `proto`, then run the
  // serving pipeline for the first `retain_count` retain subjects and every
  // opt-out subject.
  void run_block(const IdPrototype& proto, const Threshold& threshold, std::size_t retain_count,
                 EvalReport& report) const {
    const double register_alpha = cfg_.alpha > 0.0 ? cfg_.alpha : kDefaultAlpha;
    const std::string band = threshold.label();
    const std::size_t n = proto.pool_size();

    std::vector<std::size_t> scope;
    std::size_t retained = 0;
    for (std::size_t i = 0; i < subjects_.size(); ++i) {
      if (subjects_[i].condition != kRetain) {
        scope.push_back(i);
      } else if (retained < retain_count) {
        scope.push_back(i);
        ++retained;
      }
    }

    OptOutPool pool(kDefaultMatchThreshold);
    for (std::size_t i : scope) {
      const Subject& s = subjects_[i];
      if (s.condition == kRetain) continue;
      OptOutRecord rec = make_optout_record(s.speaker.id, s.reference, proto, threshold.k.value_or(cfg_.k),
                                            register_alpha);
      if (!threshold.k) {
        rec.mask = band_mask(compute_profile(s.reference, proto, cfg_.k), Band::All);
        std::erase_if(rec.mask.cells, [&](const Cell& c) { return !rec.steering.has(c); });
      }
      pool.insert(std::move(rec));
    }

    const std::size_t per = cfg_.text_seeds_per_speaker;
    std::vector<RunResult> results(scope.size() * per);
    const ActivationHook passthrough = [](Cell, const FrameMatrix&) { return std::optional<FrameMatrix>{}; };
    parallel_for(results.size(), threads_, [&](std::size_t i) {
      const Subject& s = subjects_[scope[i / per]];
      const std::size_t j = i % per;
      const OptOutRecord* match = pool.match_reference(s.reference);
      const ActivationHook hook = match ? make_steering_hook(*match, cfg_.alpha) : passthrough;
      const SynthesisOutput out = model_.synthesize(s.speaker, s.text_seeds[j], hook);
      const SynthesisOutput& base = s.baseline[j];
      RunResult& r = results[i];
      r.sim_baseline = identity_similarity(base, s.speaker);
      r.sim_steered = identity_similarity(out, s.speaker);
      r.content_error = content_error(base, out, s.speaker);
      r.cells_steered = out.steered_cells_applied.size();
      r.identical = out.output_frames == base.output_frames && out.output_embedding == base.output_embedding &&
                    tape_digest(out.tape) == s.baseline_digest[j];
    });

    auto row = [&](const std::string& cond, const std::string& id, const char* metric, double value,
                   std::uint64_t seed) {
      report.rows.push_back(EvalRow{cond, id, metric, value, band, n, cfg_.alpha, seed});
    };

    for (std::string_view cond : {kRetain, kSeenOptOut, kUnseenOptOut}) {
      ConditionSummary sum;
      sum.condition = std::string(cond);
      sum.band = band;
      sum.n = n;
      sum.alpha = cfg_.alpha;
      sum.bit_identical = true;
      for (std::size_t a = 0; a < scope.size(); ++a) {
        const Subject& s = subjects_[scope[a]];
        if (s.condition != cond) continue;
        const OptOutRecord* match = pool.match_reference(s.reference);
        const std::size_t layers = match ? match->mask.selected_layers.size() : 0;
        const std::size_t mask_cells = match ? match->mask.size() : 0;
        ++sum.speakers;
        sum.mean_layers_selected += static_cast<double>(layers);
        if (mask_cells > 0) ++sum.speakers_with_mask;
        row(sum.condition, s.speaker.id, "layers_selected", static_cast<double>(layers), s.speaker.seed);
        row(sum.condition, s.speaker.id, "mask_cells", static_cast<double>(mask_cells), s.speaker.seed);
        for (std::size_t j = 0; j < per; ++j) {
          const RunResult& r = results[a * per + j];
          const std::uint64_t seed = s.text_seeds[j];
          row(sum.condition, s.speaker.id, "similarity_baseline", r.sim_baseline, seed);
          row(sum.condition, s.speaker.id, "similarity_steered", r.sim_steered, seed);
          row(sum.condition, s.speaker.id, "content_error", r.content_error, seed);
          row(sum.condition, s.speaker.id, "cells_steered", static_cast<double>(r.cells_steered), seed);
          row(sum.condition, s.speaker.id, "bit_identical", r.identical ? 1.0 : 0.0, seed);
          ++sum.runs;
          sum.mean_similarity_baseline += r.sim_baseline;
          sum.mean_similarity_steered += r.sim_steered;
          sum.mean_content_error += r.content_error;
          sum.mean_cells_steered += static_cast<double>(r.cells_steered);
          sum.bit_identical = sum.bit_identical && r.identical;
        }
      }
      if (sum.speakers == 0) continue;
      const double runs = static_cast<double>(sum.runs);
      sum.mean_similarity_baseline /= runs;
      sum.mean_similarity_steered /= runs;
      sum.mean_content_error /= runs;
      sum.mean_cells_steered /= runs;
      sum.mean_layers_selected /= static_cast<double>(sum.speakers);
      report.summaries.push_back(sum);
    }
  }

 private:
  const EvalConfig& cfg_;
  ToyModel model_;
  unsigned threads_;
  std::vector<Subject> subjects_;
};

std::vector<ToySpeaker> training_range(const EvalConfig& cfg, std::size_t first, std::size_t count) {
  std::vector<ToySpeaker> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(training_speaker(cfg, first + i));
  return out;
}

std::vector<ToySpeaker> fresh_range(const EvalConfig& cfg, std::size_t count) {
  std::vector<ToySpeaker> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(fresh_speaker(cfg, i));
  return out;
}

void check_disjoint(const std::vector<Subject>& subjects) {
  std::set<std::string> ids;
  std::set<std::uint64_t> seeds;
  for (const auto& s : subjects) {
    if (!ids.insert(s.speaker.id).second || !seeds.insert(s.speaker.seed).second) {
      fail(ErrorCode::ConfigError, "speaker " + s.speaker.id + " appears in more than one condition");
    }
  }
}

std::size_t max_pool(const EvalConfig& cfg) {
  return *std::max_element(cfg.pool_sizes.begin(), cfg.pool_sizes.end());
}

// Pooled reference tapes of the resampling population: training speakers
// after every index the suites use.
std::vector<ActivationTape> resample_population(const EvalConfig& cfg, const ToyModel& model) {
  const std::size_t first = std::max(max_pool(cfg), cfg.n_retain) + cfg.n_optout_seen;
  const auto speakers = training_range(cfg, first, cfg.resample_population);
  std::vector<ActivationTape> tapes(speakers.size());
  parallel_for(speakers.size(), worker_count(cfg),
               [&](std::size_t i) { tapes[i] = model.reference_tape(speakers[i]).to_pooled(); });
  return tapes;
}

double resample_variance(const EvalConfig& cfg, const std::vector<ActivationTape>& population, std::size_t n,
                         std::vector<EvalRow>* rows) {
  if (n > population.size()) {
    fail(ErrorCode::ConfigError, "pool size " + std::to_string(n) + " exceeds the resampling population");
  }
  std::mt19937_64 rng(mix_seed(cfg.seed, kResampleStream + n));
  std::vector<std::size_t> order(population.size());
  std::vector<double> sum;
  std::vector<double> sum_sq;
  for (std::size_t r = 0; r < cfg.resamples; ++r) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<ActivationTape> chosen;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng() % (order.size() - i));
      std::swap(order[i], order[j]);
      chosen.push_back(population[order[i]]);
    }
    const IdPrototype proto = build_prototype(chosen);
    std::size_t idx = 0;
    for (const auto& cell : proto.cells()) {
      if (sum.empty()) {
        sum.assign(proto.layers() * proto.steps() * proto.channels(), 0.0);
        sum_sq.assign(sum.size(), 0.0);
      }
      for (float v : cell) {
        sum[idx] += v;
        sum_sq[idx] += static_cast<double>(v) * v;
        ++idx;
      }
    }
  }
  const double m = static_cast<double>(cfg.resamples);
  double total = 0.0;
  for (std::size_t i = 0; i < sum.size(); ++i) {
    const double mean = sum[i] / m;
    total += std::max(0.0, sum_sq[i] / m - mean * mean);
  }
  const double variance = total / static_cast<double>(sum.size());
  if (rows) {
    rows->push_back(EvalRow{"prototype", "retain-pool", "cell_variance", variance, band_name(cfg.k), n, cfg.alpha,
                            mix_seed(cfg.seed, kResampleStream + n)});
  }
  return variance;
}

json config_to_json(const EvalConfig& c) {
  json model = {{"layers", c.model.layers},
                {"steps", c.model.steps},
                {"channels", c.model.channels},
                {"frames", c.model.frames},
                {"identity_gain", c.model.identity_gain},
                {"content_seed", c.model.content_seed},
                {"weight_seed", c.model.weight_seed},
                {"mixing_scale", c.model.mixing_scale},
                {"mixing_noise", c.model.mixing_noise}};
  return {{"model", model},
          {"seed", c.seed},
          {"training_prefix", c.training_prefix},
          {"unseen_prefix", c.unseen_prefix},
          {"n_retain", c.n_retain},
          {"n_optout_seen", c.n_optout_seen},
          {"n_optout_unseen", c.n_optout_unseen},
          {"text_seeds_per_speaker", c.text_seeds_per_speaker},
          {"k", c.k},
          {"alpha", c.alpha},
          {"pool_sizes", c.pool_sizes},
          {"resamples", c.resamples},
          {"resample_population", c.resample_population}};
}

EvalConfig config_from_json(const json& j) {
  EvalConfig c;
  const json& m = j.at("model");
  c.model.layers = m.at("layers").get<std::uint16_t>();
  c.model.steps = m.at("steps").get<std::uint16_t>();
  c.model.channels = m.at("channels").get<std::uint32_t>();
  c.model.frames = m.at("frames").get<std::uint32_t>();
  c.model.identity_gain = m.at("identity_gain").get<std::vector<double>>();
  c.model.content_seed = m.at("content_seed").get<std::uint64_t>();
  c.model.weight_seed = m.at("weight_seed").get<std::uint64_t>();
  c.model.mixing_scale = m.at("mixing_scale").get<double>();
  c.model.mixing_noise = m.at("mixing_noise").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.training_prefix = j.at("training_prefix").get<std::string>();
  c.unseen_prefix = j.at("unseen_prefix").get<std::string>();
  c.n_retain = j.at("n_retain").get<std::size_t>();
  c.n_optout_seen = j.at("n_optout_seen").get<std::size_t>();
  c.n_optout_unseen = j.at("n_optout_unseen").get<std::size_t>();
  c.text_seeds_per_speaker = j.at("text_seeds_per_speaker").get<std::size_t>();
  c.k = j.at("k").get<double>();
  c.alpha = j.at("alpha").get<double>();
  c.pool_sizes = j.at("pool_sizes").get<std::vector<std::size_t>>();
  c.resamples = j.at("resamples").get<std::size_t>();
  c.resample_population = j.at("resample_population").get<std::size_t>();
  return c;
}

std::string manifest_with_subjects(std::string_view suite, const EvalConfig& cfg,
                                   const std::vector<Subject>& subjects) {
  json j = json::parse(make_manifest(suite, cfg));
  json speakers = json::array();
  for (const auto& s : subjects) {
    speakers.push_back({{"id", s.speaker.id},
                        {"condition", s.condition},
                        {"seed", s.speaker.seed},
                        {"text_seeds", s.text_seeds}});
  }
  j["speakers"] = speakers;
  return j.dump(2) + "\n";
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

void EvalConfig::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorCode::ConfigError, what); };
  model.validate();
  if (training_prefix.empty() || unseen_prefix.empty()) bad("speaker prefixes must not be empty");
  if (n_retain < 1) bad("n_retain must be >= 1");
  if (n_optout_seen < 1 || n_optout_unseen < 1) bad("each opt-out condition needs at least one speaker");
  if (text_seeds_per_speaker < 1) bad("text_seeds_per_speaker must be >= 1");
  if (!std::isfinite(k)) bad("k must be finite");
  if (!std::isfinite(alpha) || alpha < 0.0) bad("alpha must be a finite non-negative number");
  if (pool_sizes.empty()) bad("pool_sizes must not be empty");
  std::set<std::size_t> distinct(pool_sizes.begin(), pool_sizes.end());
  if (distinct.size() != pool_sizes.size() || *distinct.begin() < 1) bad("pool sizes must be distinct and >= 1");
  if (resamples < 2) bad("resamples must be >= 2");
  if (resample_population < *distinct.rbegin()) bad("resample_population must cover the largest pool size");
}

double ConditionSummary::relative_similarity_drop() const noexcept {
  return (mean_similarity_baseline - mean_similarity_steered) / mean_similarity_baseline;
}

const ConditionSummary& EvalReport::summary(std::string_view condition, std::string_view band,
                                            std::size_t n) const {
  for (const auto& s : summaries) {
    if (s.condition == condition && s.band == band && s.n == n) return s;
  }
  fail(ErrorCode::ValidationError, "no summary for " + std::string(condition) + " band " + std::string(band) +
                                       " N=" + std::to_string(n));
}

std::vector<std::pair<std::string, std::size_t>> EvalReport::blocks() const {
  std::vector<std::pair<std::string, std::size_t>> out;
  for (const auto& s : summaries) {
    std::pair<std::string, std::size_t> key{s.band, s.n};
    if (std::find(out.begin(), out.end(), key) == out.end()) out.push_back(key);
  }
  return out;
}

std::string band_name(double k) { return format_number(k); }

EvalReport run_suppression_suite(const EvalConfig& config) {
  config.validate();
  SuiteRunner runner(config);
  runner.add(kRetain, training_range(config, 0, config.n_retain));
  runner.add(kSeenOptOut, training_range(config, config.n_retain, config.n_optout_seen));
  runner.add(kUnseenOptOut, fresh_range(config, config.n_optout_unseen));
  check_disjoint(runner.subjects());

  EvalReport report;
  report.suite = "suppression";
  const IdPrototype proto = build_prototype(runner.retain_references(config.n_retain));
  runner.run_block(proto, Threshold{config.k}, config.n_retain, report);
  report.manifest_json = manifest_with_subjects(report.suite, config, runner.subjects());
  return report;
}

EvalReport run_suppression_suite(const ToyConfig& model, std::size_t n_retain, std::size_t n_optout_seen,
                                 std::size_t n_optout_unseen, double k, double alpha) {
  EvalConfig cfg;
  cfg.model = model;
  cfg.n_retain = n_retain;
  cfg.n_optout_seen = n_optout_seen;
  cfg.n_optout_unseen = n_optout_unseen;
  cfg.k = k;
  cfg.alpha = alpha;
  return run_suppression_suite(cfg);
}

EvalReport run_threshold_ablation(const EvalConfig& config) {
  config.validate();
  SuiteRunner runner(config);
  runner.add(kRetain, training_range(config, 0, config.n_retain));
  runner.add(kSeenOptOut, training_range(config, config.n_retain, config.n_optout_seen));
  runner.add(kUnseenOptOut, fresh_range(config, config.n_optout_unseen));
  check_disjoint(runner.subjects());

  EvalReport report;
  report.suite = "threshold";
  const IdPrototype proto = build_prototype(runner.retain_references(config.n_retain));
  for (Band band : kAblationBands) runner.run_block(proto, Threshold{band_k(band)}, config.n_retain, report);
  report.manifest_json = manifest_with_subjects(report.suite, config, runner.subjects());
  return report;
}

EvalReport run_pool_ablation(const EvalConfig& config) {
  config.validate();
  const std::size_t largest = max_pool(config);
  SuiteRunner runner(config);
  runner.add(kRetain, training_range(config, 0, largest));
  runner.add(kSeenOptOut, training_range(config, largest, config.n_optout_seen));
  runner.add(kUnseenOptOut, fresh_range(config, config.n_optout_unseen));
  check_disjoint(runner.subjects());

  EvalReport report;
  report.suite = "pool";
  for (std::size_t n : config.pool_sizes) {
    const IdPrototype proto = build_prototype(runner.retain_references(n));
    runner.run_block(proto, Threshold{config.k}, n, report);
  }
  const auto population = resample_population(config, runner.model());
  for (std::size_t n : config.pool_sizes) {
    report.prototype_variance[n] = resample_variance(config, population, n, &report.rows);
  }
  report.manifest_json = manifest_with_subjects(report.suite, config, runner.subjects());
  return report;
}

double prototype_resampling_variance(const EvalConfig& config, std::size_t n) {
  config.validate();
  const ToyModel model(config.model);
  return resample_variance(config, resample_population(config, model), n, nullptr);
}

std::string make_manifest(std::string_view suite, const EvalConfig& config) {
  json j = {{"suite", suite}, {"config", config_to_json(config)}};
  return j.dump(2) + "\n";
}

EvalReport replay_manifest(std::string_view manifest_json) {
  EvalConfig cfg;
  std::string suite;
  try {
    const json j = json::parse(manifest_json);
    suite = j.at("suite").get<std::string>();
    cfg = config_from_json(j.at("config"));
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, std::string("malformed manifest: ") + e.what());
  }
  if (suite == "suppression") return run_suppression_suite(cfg);
  if (suite == "threshold") return run_threshold_ablation(cfg);
  if (suite == "pool") return run_pool_ablation(cfg);
  fail(ErrorCode::ConfigError, "unknown suite \"" + suite + "\"");
}

void write_report_csv(const EvalReport& report, std::ostream& out) {
  out << "condition,speaker_id,metric,value,k,N,alpha,seed\n";
  for (const auto& r : report.rows) {
    out << csv_field(r.condition) << ',' << csv_field(r.speaker_id) << ',' << r.metric << ','
        << format_number(r.value) << ',' << csv_field(r.band) << ',' << r.n << ',' << format_number(r.alpha) << ','
        << r.seed << '\n';
  }
}

void write_summary_csv(const EvalReport& report, std::ostream& out) {
  out << "condition,k,N,alpha,speakers,runs,similarity_baseline,similarity_steered,relative_drop,content_error,"
         "cells_steered,layers_selected,speakers_with_mask,bit_identical\n";
  for (const auto& s : report.summaries) {
    out << s.condition << ',' << csv_field(s.band) << ',' << s.n << ',' << format_number(s.alpha) << ','
        << s.speakers << ',' << s.runs << ',' << format_number(s.mean_similarity_baseline) << ','
        << format_number(s.mean_similarity_steered) << ',' << format_number(s.relative_similarity_drop()) << ','
        << format_number(s.mean_content_error) << ',' << format_number(s.mean_cells_steered) << ','
        << format_number(s.mean_layers_selected) << ',' << s.speakers_with_mask << ','
        << (s.bit_identical ? 1 : 0) << '\n';
  }
}

}  // namespace trus
