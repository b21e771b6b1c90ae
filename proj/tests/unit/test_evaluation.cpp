#include <catch_amalgamated.hpp>

#include <set>
#include <sstream>

#include "fixtures.hpp"
#include "trus/evaluation.hpp"

using namespace trus;
using fixture::thrown;

namespace {

EvalConfig small() {
  EvalConfig c;
  c.model.layers = 4;
  c.model.steps = 6;
  c.model.channels = 32;
  c.model.frames = 8;
  c.n_retain = 8;
  c.n_optout_seen = 4;
  c.n_optout_unseen = 4;
  c.pool_sizes = {4, 8};
  c.resamples = 4;
  c.resample_population = 24;
  c.threads = 1;
  return c;
}

}  // namespace

TEST_CASE("suppression suite separates retain and opt-out speakers") {
  const EvalReport r = run_suppression_suite(small());
  CHECK(r.suite == "suppression");
  REQUIRE(r.blocks().size() == 1);
  const auto& retain = r.summary(kRetain, "1", 8);
  CHECK(retain.bit_identical);
  CHECK(retain.mean_cells_steered == 0.0);
  CHECK(retain.speakers == 8);
  CHECK(retain.runs == 16);
  for (auto cond : {kSeenOptOut, kUnseenOptOut}) {
    const auto& s = r.summary(cond, "1", 8);
    CHECK(s.speakers == 4);
    CHECK_FALSE(s.bit_identical);
    CHECK(s.mean_similarity_steered < s.mean_similarity_baseline);
    CHECK(s.alpha == kDefaultAlpha);
  }
  CHECK(thrown([&] { r.summary(kRetain, "0", 8); }) == ErrorCode::ValidationError);
}

TEST_CASE("alpha = 0 reproduces the baseline bit for bit") {
  EvalConfig c = small();
  c.alpha = 0.0;
  const EvalReport r = run_suppression_suite(c);
  for (auto cond : {kRetain, kSeenOptOut, kUnseenOptOut}) {
    const auto& s = r.summary(cond, "1", 8);
    CHECK(s.bit_identical);
    CHECK(s.mean_similarity_steered == s.mean_similarity_baseline);
    CHECK(s.mean_content_error == 0.0);
  }
}

TEST_CASE("overlapping populations are rejected") {
  EvalConfig c = small();
  c.unseen_prefix = c.training_prefix;
  CHECK(thrown([&] { run_suppression_suite(c); }) == ErrorCode::ConfigError);
  c = small();
  c.resamples = 1;
  CHECK(thrown([&] { run_pool_ablation(c); }) == ErrorCode::ConfigError);
  c = small();
  c.resample_population = 4;
  CHECK(thrown([&] { run_pool_ablation(c); }) == ErrorCode::ConfigError);
  c = small();
  c.alpha = -1;
  CHECK(thrown([&] { run_suppression_suite(c); }) == ErrorCode::ConfigError);
}

TEST_CASE("threshold ablation bands are monotone") {
  const EvalReport r = run_threshold_ablation(small());
  const std::vector<std::string> bands{"-1", "0", "1", "all"};
  REQUIRE(r.blocks().size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(r.blocks()[i].first == bands[i]);
  for (auto cond : {kSeenOptOut, kUnseenOptOut}) {
    for (std::size_t i = 1; i < 4; ++i) {
      const auto& lo = r.summary(cond, bands[i - 1], 8);
      const auto& hi = r.summary(cond, bands[i], 8);
      CHECK(lo.mean_cells_steered <= hi.mean_cells_steered);
      CHECK(lo.mean_similarity_steered >= hi.mean_similarity_steered);
    }
  }
  for (const auto& b : bands) CHECK(r.summary(kRetain, b, 8).bit_identical);
}

TEST_CASE("pool ablation reports every N and prototype variance") {
  const EvalReport r = run_pool_ablation(small());
  REQUIRE(r.blocks().size() == 2);
  CHECK(r.blocks()[0].second == 4);
  CHECK(r.blocks()[1].second == 8);
  CHECK(r.summary(kRetain, "1", 4).speakers == 4);
  CHECK(r.summary(kSeenOptOut, "1", 4).speakers == r.summary(kSeenOptOut, "1", 8).speakers);
  REQUIRE(r.prototype_variance.size() == 2);
  CHECK(r.prototype_variance.at(8) < r.prototype_variance.at(4));
  CHECK(r.prototype_variance.at(4) == prototype_resampling_variance(small(), 4));
  std::set<std::size_t> ns;
  for (const auto& row : r.rows) ns.insert(row.n);
  CHECK(ns == std::set<std::size_t>{4, 8});
}

TEST_CASE("manifest replays to the same report") {
  const EvalReport r = run_threshold_ablation(small());
  const EvalReport again = replay_manifest(r.manifest_json);
  CHECK(again == r);
  CHECK(run_threshold_ablation(small()) == r);

  EvalConfig threaded = small();
  threaded.threads = 3;
  CHECK(run_threshold_ablation(threaded).rows == r.rows);
  CHECK(thrown([] { replay_manifest("{}"); }).has_value());
}

TEST_CASE("report CSV layout") {
  const EvalReport r = run_suppression_suite(small());
  std::ostringstream out;
  write_report_csv(r, out);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "condition,speaker_id,metric,value,k,N,alpha,seed");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 7);
  }
  CHECK(rows == r.rows.size());
  // Per speaker two rows, per run five rows.
  CHECK(rows == 16 * 2 + 32 * 5);

  std::ostringstream sum;
  write_summary_csv(r, sum);
  const std::string text = sum.str();
  CHECK(std::count(text.begin(), text.end(), '\n') == 4);
}
