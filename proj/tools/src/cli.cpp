#include "trus_cli/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <set>

#include <CLI11.hpp>

#include "trus/error.hpp"
#include "trus/evaluation.hpp"
#include "trus/prototype.hpp"
#include "trus/registry.hpp"
#include "trus/selection.hpp"
#include "trus/tape.hpp"
#include "trus/text.hpp"
#include "trus/toy_model.hpp"

namespace trus::cli {
namespace fs = std::filesystem;

namespace {

struct ModelFlags {
  std::uint16_t layers = 8;
  std::uint16_t steps = 16;
  std::uint32_t channels = 64;
  std::uint32_t frames = 32;
  std::uint64_t weight_seed = ToyConfig{}.weight_seed;
  std::uint64_t content_seed = ToyConfig{}.content_seed;

  ToyConfig config() const {
    ToyConfig c;
    c.layers = layers;
    c.steps = steps;
    c.channels = channels;
    c.frames = frames;
    c.weight_seed = weight_seed;
    c.content_seed = content_seed;
    c.validate();
    return c;
  }
};

void add_model_flags(CLI::App* cmd, ModelFlags& m) {
  cmd->add_option("--layers,-L", m.layers, "Toy model layers")->capture_default_str();
  cmd->add_option("--steps,-T", m.steps, "Flow steps")->capture_default_str();
  cmd->add_option("--channels,-d", m.channels, "Channels")->capture_default_str();
  cmd->add_option("--frames,-F", m.frames, "Frames per utterance")->capture_default_str();
  cmd->add_option("--weight-seed", m.weight_seed, "Toy model weight seed")->capture_default_str();
  cmd->add_option("--content-seed", m.content_seed, "Toy model content seed")->capture_default_str();
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void check_k(double k) {
  if (!std::isfinite(k)) fail(ErrorCode::ConfigError, "--k must be finite");
}

void check_alpha(double alpha, bool allow_zero) {
  if (!std::isfinite(alpha) || alpha < 0.0 || (!allow_zero && alpha == 0.0)) {
    fail(ErrorCode::ConfigError, allow_zero ? "--alpha must be >= 0" : "--alpha must be > 0");
  }
}

void require_file(const fs::path& path, const char* what, ExitCode code, int& status) {
  if (!fs::is_regular_file(path)) {
    status = code;
    fail(code == kMissing ? ErrorCode::MissingMetadata : ErrorCode::IoError,
         std::string(what) + " " + path.string() + " not found");
  }
}

IdPrototype open_prototype(const fs::path& path, int& status) {
  require_file(path, "prototype", kMissing, status);
  return load_prototype(path);
}

std::vector<fs::path> list_tapes(const fs::path& dir) {
  if (!fs::is_directory(dir)) fail(ErrorCode::IoError, "tape directory " + dir.string() + " not found");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".tape") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

int exit_for(ErrorCode code, bool registering) {
  switch (code) {
    case ErrorCode::ConfigError:
    case ErrorCode::InvalidStrength: return kConfig;
    case ErrorCode::EmptyPool: return kInsufficient;
    case ErrorCode::DuplicateSpeaker: return registering ? kDuplicateId : kBadInput;
    case ErrorCode::MissingMetadata: return kMissing;
    default: return kBadInput;
  }
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Speaker opt-out steering engine with a toy flow-matching synthesizer", "trus"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML or INI file with option defaults (flags win)");

  std::function<int()> action;
  int status = kOk;
  bool registering = false;

  // toy-tapes
  struct {
    fs::path dir;
    std::size_t count = 30;
    std::size_t start = 0;
    std::string prefix = "speaker";
    bool pooled = false;
    ModelFlags model;
  } tt;
  auto* toy = app.add_subcommand("toy-tapes", "Record reference tapes of toy speakers");
  toy->add_option("--out", tt.dir, "Output directory")->required();
  toy->add_option("--count", tt.count, "Number of speakers")->capture_default_str();
  toy->add_option("--start", tt.start, "First speaker index")->capture_default_str();
  toy->add_option("--prefix", tt.prefix, "Speaker id prefix")->capture_default_str();
  toy->add_flag("--pooled", tt.pooled, "Write frame-pooled tapes");
  add_model_flags(toy, tt.model);
  toy->callback([&] {
    action = [&]() -> int {
      const ToyModel model(tt.model.config());
      fs::create_directories(tt.dir);
      for (std::size_t i = tt.start; i < tt.start + tt.count; ++i) {
        std::string num = std::to_string(i);
        if (num.size() < 3) num.insert(0, 3 - num.size(), '0');
        const ToySpeaker speaker = ToySpeaker::from_id(tt.prefix + "-" + num, tt.model.channels);
        ActivationTape tape = model.reference_tape(speaker);
        if (tt.pooled) tape = tape.to_pooled();
        write_tape_file(tape, tt.dir / (speaker.id + ".tape"));
      }
      out << "wrote " << tt.count << " tapes to " << tt.dir.string() << "\n";
      return kOk;
    };
  });

  // build-prototype
  struct {
    fs::path tapes;
    fs::path out;
    std::size_t n = kDefaultPoolSize;
  } bp;
  auto* build = app.add_subcommand("build-prototype", "Average N retain tapes into an ID-prototype");
  build->add_option("--tapes", bp.tapes, "Directory of .tape files")->required();
  build->add_option("--out", bp.out, "Prototype output path")->required();
  build->add_option("--n", bp.n, "Retain pool size")->capture_default_str();
  build->callback([&] {
    action = [&]() -> int {
      if (bp.n < 1) fail(ErrorCode::ConfigError, "--n must be >= 1");
      const auto paths = list_tapes(bp.tapes);
      if (paths.size() < bp.n) {
        fail(ErrorCode::EmptyPool, "need " + std::to_string(bp.n) + " tapes, found " + std::to_string(paths.size()));
      }
      std::vector<ActivationTape> tapes;
      std::set<std::string> seen;
      for (const auto& p : paths) {
        ActivationTape t = read_tape_file(p);
        if (!seen.insert(t.speaker_id()).second) {
          fail(ErrorCode::DuplicateSpeaker, "speaker \"" + t.speaker_id() + "\" appears in more than one tape");
        }
        if (tapes.size() < bp.n) tapes.push_back(std::move(t));
      }
      const IdPrototype proto = build_prototype(tapes);
      if (bp.out.has_parent_path()) fs::create_directories(bp.out.parent_path());
      save_prototype(proto, bp.out);
      out << "N=" << proto.pool_size() << "\n";
      out << "source_ids=";
      for (std::size_t i = 0; i < proto.source_ids().size(); ++i) out << (i ? "," : "") << proto.source_ids()[i];
      out << "\n";
      return kOk;
    };
  });

  // register
  struct {
    std::string id;
    fs::path tape;
    fs::path prototype;
    fs::path registry;
    double k = kDefaultK;
    double alpha = kDefaultAlpha;
  } rg;
  auto* reg = app.add_subcommand("register", "Register an opt-out speaker");
  reg->add_option("--id", rg.id, "Speaker id")->required();
  reg->add_option("--tape", rg.tape, "Reference tape")->required();
  reg->add_option("--prototype", rg.prototype, "Prototype path")->required();
  reg->add_option("--registry", rg.registry, "Registry directory")->required();
  reg->add_option("--k", rg.k, "Layer threshold multiplier")->capture_default_str();
  reg->add_option("--alpha", rg.alpha, "Steering strength")->capture_default_str();
  reg->callback([&] {
    registering = true;
    action = [&]() -> int {
      check_k(rg.k);
      check_alpha(rg.alpha, false);
      const IdPrototype proto = open_prototype(rg.prototype, status);
      require_file(rg.tape, "tape", kBadInput, status);
      const ActivationTape tape = read_tape_file(rg.tape);
      Registry registry(rg.registry);
      const OptOutRecord rec = registry.register_optout(rg.id, tape, proto, rg.k, rg.alpha);
      out << "speaker=" << rec.speaker_id << " layers=" << rec.mask.selected_layers.size()
          << " cells=" << rec.mask.size() << " mu=" << format_number(rec.profile.mu)
          << " sigma=" << format_number(rec.profile.sigma) << " tau=" << format_number(rec.profile.tau)
          << " version=" << registry.version() << "\n";
      return kOk;
    };
  });

  // unregister
  struct {
    std::string id;
    fs::path registry;
  } ur;
  auto* unreg = app.add_subcommand("unregister", "Remove an opt-out speaker");
  unreg->add_option("--id", ur.id, "Speaker id")->required();
  unreg->add_option("--registry", ur.registry, "Registry directory")->required();
  unreg->callback([&] {
    action = [&]() -> int {
      if (!fs::is_directory(ur.registry)) {
        status = kMissing;
        fail(ErrorCode::IoError, "registry " + ur.registry.string() + " not found");
      }
      Registry registry(ur.registry);
      if (!registry.remove_optout(ur.id)) {
        err << "speaker \"" << ur.id << "\" is not registered\n";
        return kBadInput;
      }
      out << "removed=" << ur.id << " version=" << registry.version() << "\n";
      return kOk;
    };
  });

  // synth
  struct {
    std::string speaker;
    fs::path tape;
    std::uint64_t text_seed = 1;
    fs::path registry;
    bool no_steer = false;
    std::optional<double> alpha;
    fs::path out;
    ModelFlags model;
  } sy;
  auto* synth = app.add_subcommand("synth", "Synthesize with the toy model, steering registered speakers");
  auto* sp_opt = synth->add_option("--speaker", sy.speaker, "Toy speaker id");
  auto* tp_opt = synth->add_option("--tape", sy.tape, "Reference tape (speaker id taken from it)");
  sp_opt->excludes(tp_opt);
  synth->add_option("--text-seed", sy.text_seed, "Content seed of the utterance")->capture_default_str();
  synth->add_option("--registry", sy.registry, "Registry directory");
  synth->add_flag("--no-steer", sy.no_steer, "Disable the opt-out pipeline");
  synth->add_option("--alpha", sy.alpha, "Override the record's steering strength");
  synth->add_option("--out", sy.out, "Write the synthesis tape here");
  add_model_flags(synth, sy.model);
  synth->callback([&] {
    action = [&]() -> int {
      if (sy.speaker.empty() && sy.tape.empty()) fail(ErrorCode::ConfigError, "one of --speaker or --tape is required");
      if (sy.alpha) check_alpha(*sy.alpha, true);
      const ToyModel model(sy.model.config());
      const ToyConfig& cfg = model.config();

      ActivationTape reference;
      std::string id = sy.speaker;
      if (!sy.tape.empty()) {
        require_file(sy.tape, "tape", kBadInput, status);
        reference = read_tape_file(sy.tape);
        id = reference.speaker_id();
      }
      const ToySpeaker speaker = ToySpeaker::from_id(id, cfg.channels);
      if (sy.tape.empty()) reference = model.reference_tape(speaker);
      if (reference.layers() != cfg.layers || reference.steps() != cfg.steps || reference.channels() != cfg.channels) {
        fail(ErrorCode::ShapeMismatch, "reference tape does not match the model shape");
      }

      std::optional<OptOutRecord> record;
      double match_similarity = 0.0;
      if (!sy.no_steer) {
        if (sy.registry.empty() || !fs::is_directory(sy.registry)) {
          status = kMissing;
          fail(ErrorCode::IoError, "registry " + sy.registry.string() + " not found");
        }
        Registry registry(sy.registry);
        if (const auto best = registry.best_match(reference)) match_similarity = best->similarity;
        record = registry.match_reference(reference);
        if (record && (record->steering.layers() != cfg.layers || record->steering.steps() != cfg.steps ||
                       record->steering.channels() != cfg.channels)) {
          fail(ErrorCode::ShapeMismatch, "record for \"" + record->speaker_id + "\" does not match the model shape");
        }
      }

      ActivationHook hook;
      if (record) hook = make_steering_hook(*record, sy.alpha);
      const SynthesisOutput result = model.synthesize(speaker, sy.text_seed, hook);
      if (!sy.out.empty()) write_tape_file(result.tape, sy.out);

      out << "speaker=" << speaker.id << " text_seed=" << sy.text_seed << " matched=" << (record ? 1 : 0)
          << " match=" << (record ? record->speaker_id : std::string("-"))
          << " match_similarity=" << format_number(match_similarity)
          << " cells_steered=" << result.steered_cells_applied.size()
          << " identity_similarity=" << format_number(identity_similarity(result, speaker))
          << " digest=" << hex(tape_digest(result.tape)) << "\n";
      return kOk;
    };
  });

  // analyze
  struct {
    fs::path tape;
    fs::path prototype;
    fs::path out;
    double k = kDefaultK;
  } an;
  auto* analyze = app.add_subcommand("analyze", "Per-cell similarity profile against the prototype");
  analyze->add_option("--tape", an.tape, "Opt-out tape")->required();
  analyze->add_option("--prototype", an.prototype, "Prototype path")->required();
  analyze->add_option("--out", an.out, "CSV output path")->required();
  analyze->add_option("--k", an.k, "Layer threshold multiplier")->capture_default_str();
  analyze->callback([&] {
    action = [&]() -> int {
      check_k(an.k);
      const IdPrototype proto = open_prototype(an.prototype, status);
      require_file(an.tape, "tape", kBadInput, status);
      const ActivationTape tape = read_tape_file(an.tape);
      const SimilarityProfile profile = compute_profile(tape, proto, an.k);
      const InterventionMask mask = select_mask(profile);
      std::ofstream csv(an.out, std::ios::trunc);
      if (!csv) fail(ErrorCode::SinkFailure, "cannot write " + an.out.string());
      write_profile_csv(profile, csv);
      csv.flush();
      if (!csv) fail(ErrorCode::SinkFailure, "write to " + an.out.string() + " failed");
      out << "mu=" << format_number(profile.mu) << " sigma=" << format_number(profile.sigma)
          << " tau=" << format_number(profile.tau) << " layers=" << mask.selected_layers.size()
          << " cells=" << mask.size() << " degenerate=" << profile.degenerate_cells << "\n";
      return kOk;
    };
  });

  // ablate
  EvalConfig ev;
  std::string suite;
  fs::path report_dir;
  ModelFlags ev_model;
  auto* ablate = app.add_subcommand("ablate", "Run an evaluation suite and write CSV reports");
  ablate->add_option("--suite", suite, "suppression, threshold or pool")
      ->required()
      ->check(CLI::IsMember({"suppression", "threshold", "pool"}));
  ablate->add_option("--out", report_dir, "Report directory")->required();
  ablate->add_option("--seed", ev.seed, "Suite seed")->capture_default_str();
  ablate->add_option("--k", ev.k, "Layer threshold multiplier")->capture_default_str();
  ablate->add_option("--alpha", ev.alpha, "Steering strength")->capture_default_str();
  ablate->add_option("--n", ev.n_retain, "Retain pool size")->capture_default_str();
  ablate->add_option("--train-prefix", ev.training_prefix, "Training speaker id prefix")->capture_default_str();
  ablate->add_option("--unseen-prefix", ev.unseen_prefix, "Unseen speaker id prefix")->capture_default_str();
  ablate->add_option("--n-seen", ev.n_optout_seen, "Seen opt-out speakers")->capture_default_str();
  ablate->add_option("--n-unseen", ev.n_optout_unseen, "Unseen opt-out speakers")->capture_default_str();
  ablate->add_option("--text-seeds", ev.text_seeds_per_speaker, "Utterances per speaker")->capture_default_str();
  ablate->add_option("--pool-sizes", ev.pool_sizes, "Pool sizes for the pool suite")->capture_default_str();
  ablate->add_option("--resamples", ev.resamples, "Prototype resamples per pool size")->capture_default_str();
  ablate->add_option("--population", ev.resample_population, "Resampling population")->capture_default_str();
  ablate->add_option("--threads", ev.threads, "Worker threads (0 = all cores)")->capture_default_str();
  add_model_flags(ablate, ev_model);
  ablate->callback([&] {
    action = [&]() -> int {
      ev.model = ev_model.config();
      EvalReport report;
      if (suite == "suppression") {
        report = run_suppression_suite(ev);
      } else if (suite == "threshold") {
        report = run_threshold_ablation(ev);
      } else {
        report = run_pool_ablation(ev);
      }
      fs::create_directories(report_dir);
      {
        std::ofstream f(report_dir / (suite + ".csv"), std::ios::trunc);
        write_report_csv(report, f);
        std::ofstream s(report_dir / (suite + "_summary.csv"), std::ios::trunc);
        write_summary_csv(report, s);
        std::ofstream m(report_dir / (suite + "_manifest.json"), std::ios::trunc);
        m << report.manifest_json;
        if (!f || !s || !m) fail(ErrorCode::SinkFailure, "cannot write reports to " + report_dir.string());
      }
      for (const auto& [band, n] : report.blocks()) {
        out << "block k=" << band << " N=" << n << "\n";
        for (const auto& s : report.summaries) {
          if (s.band != band || s.n != n) continue;
          out << "  " << s.condition << " speakers=" << s.speakers
              << " similarity_baseline=" << format_number(s.mean_similarity_baseline)
              << " similarity_steered=" << format_number(s.mean_similarity_steered)
              << " content_error=" << format_number(s.mean_content_error)
              << " cells_steered=" << format_number(s.mean_cells_steered)
              << " layers_selected=" << format_number(s.mean_layers_selected) << "\n";
        }
      }
      for (const auto& [n, v] : report.prototype_variance) {
        out << "prototype_variance N=" << n << " value=" << format_number(v) << "\n";
      }
      return kOk;
    };
  });

  // tape-info
  fs::path info_path;
  auto* info = app.add_subcommand("tape-info", "Print a tape header");
  info->add_option("--tape", info_path, "Tape path")->required();
  info->callback([&] {
    action = [&]() -> int {
      require_file(info_path, "tape", kBadInput, status);
      const ActivationTape tape = read_tape_file(info_path);
      const TapeHeader& h = tape.header();
      out << "version=" << h.version << " layers=" << h.num_layers << " steps=" << h.num_steps
          << " channels=" << h.channels << " frames=" << h.frames << " pooled=" << (h.pooled ? 1 : 0)
          << " speaker_id=" << h.speaker_id << " bytes=" << (h.encoded_size() + h.payload_size())
          << " digest=" << hex(tape_digest(tape)) << "\n";
      return kOk;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kBadInput;
  }

  try {
    return action();
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return status != kOk ? status : exit_for(e.code(), registering);
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kBadInput;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"trus"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace trus::cli
