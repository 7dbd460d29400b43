#include "dapnet/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>

#include "dapnet/config.hpp"
#include "dapnet/errors.hpp"
#include "dapnet/evaluation.hpp"
#include "dapnet/synthetic.hpp"
#include "dapnet/training.hpp"

namespace dapnet::cli {
namespace fs = std::filesystem;

namespace {

// Thrown for invocation problems that map to the usage exit code.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  std::string run_id;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool with_config = true) {
  if (with_config) {
    cmd->add_option("--config", o.config_path, "Config file (key = value lines)");
    cmd->add_option("--set", o.overrides, "Override a config key (key=value), repeatable");
  }
  cmd->add_option("--out", o.out, "Output root (default: $DAPNET_OUT, then output_dir)");
  cmd->add_option("--run-id", o.run_id, "Run folder name under the output root");
}

std::vector<Override> parse_overrides(const std::vector<std::string>& raw) {
  std::vector<Override> out;
  for (const auto& s : raw) out.push_back(parse_override(s));
  return out;
}

ExperimentConfig resolve_config(const CommonOptions& o) {
  const auto overrides = parse_overrides(o.overrides);
  if (o.config_path.empty()) return parse_config("", overrides);
  if (!fs::exists(o.config_path)) throw UsageError("config not found: " + o.config_path);
  return load_config(o.config_path, overrides);
}

std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << v;
  return os.str();
}

fs::path run_directory(const CommonOptions& o, const std::string& command, const std::string& fallback_root,
                       std::uint32_t hash) {
  fs::path root;
  if (!o.out.empty()) {
    root = o.out;
  } else if (const char* env = std::getenv("DAPNET_OUT"); env && *env) {
    root = env;
  } else {
    root = fallback_root;
  }
  std::string id = o.run_id;
  if (id.empty()) {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    localtime_r(&now, &tm);
    std::ostringstream os;
    os << command << '-' << std::put_time(&tm, "%Y%m%d-%H%M%S") << '-' << hex32(hash);
    id = os.str();
  }
  const auto dir = root / id;
  fs::create_directories(dir);
  return dir;
}

int cmd_train(const CommonOptions& o, const std::string& resume, std::ostream& out) {
  const auto cfg = resolve_config(o);
  if (!resume.empty() && !fs::exists(resume)) throw UsageError("checkpoint not found: " + resume);
  const auto dir = run_directory(o, "train", cfg.output_dir, config_hash(cfg));
  save_config(cfg, dir / "config.resolved.cfg");
  TrainOptions opts{.run_dir = dir, .progress = &out};
  if (!resume.empty()) opts.resume_from = resume;
  const auto result = train(cfg, opts);
  out << "checkpoint " << result.final_checkpoint.string() << '\n';
  out << "run_dir " << dir.string() << '\n';
  return kExitOk;
}

int cmd_evaluate(const CommonOptions& o, const std::string& checkpoint, const std::string& domain,
                 bool overlays, std::ostream& out) {
  if (!fs::exists(checkpoint)) throw UsageError("checkpoint not found: " + checkpoint);
  auto loaded = load_checkpoint(checkpoint);
  // The checkpoint's own config is the base; --config/--set may repoint data.
  ExperimentConfig cfg = loaded.cfg;
  if (!o.config_path.empty()) cfg = resolve_config(o);
  for (const auto& [k, v] : parse_overrides(o.overrides)) apply_override(cfg, k, v);
  validate(cfg);
  if (cfg.channel_width_scale != loaded.cfg.channel_width_scale) {
    throw UsageError("channel_width_scale differs from the checkpoint's");
  }
  const auto dir = run_directory(o, "evaluate", cfg.output_dir, config_hash(cfg));
  save_config(cfg, dir / "config.resolved.cfg");

  std::vector<std::pair<Domain, std::string>> targets;
  if (domain == "source" || domain == "both") targets.emplace_back(Domain::Source, cfg.source_manifest);
  if (domain == "target" || domain == "both") targets.emplace_back(Domain::Target, cfg.target_manifest);
  auto& net = loaded.state.models.generator;
  for (const auto& [d, manifest_path] : targets) {
    if (manifest_path.empty()) throw UsageError(std::string(to_string(d)) + "_manifest is not set");
    const auto manifest = load_manifest(manifest_path);
    const std::string dataset = std::string(to_string(d)) + "_test";
    const auto samples = load_samples(manifest, d, Split::Test, true);
    const auto report = evaluate_dataset(net, samples, cfg, dataset);
    write_report(report, dir / ("report_" + dataset + ".json"));
    write_per_image_csv(report, dir / ("per_image_" + dataset + ".csv"));
    if (overlays) emit_overlays(net, samples, cfg, dir / ("overlays_" + dataset));
    out << dataset << " acc " << report.pixel_accuracy << " iou " << report.iou << '\n';
  }
  out << "run_dir " << dir.string() << '\n';
  return kExitOk;
}

int cmd_ablate(const CommonOptions& o, std::ostream& out) {
  const auto cfg = resolve_config(o);
  const auto dir = run_directory(o, "ablate", cfg.output_dir, config_hash(cfg));
  save_config(cfg, dir / "config.resolved.cfg");
  const auto entries = run_ablation(cfg, dir, &out);
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : entries) {
    j.push_back({{"variant", std::string(to_string(e.variant))},
                 {"source", e.source.to_json()},
                 {"target", e.target.to_json()},
                 {"batch_sequence_hash", e.batch_sequence_hash}});
    out << to_string(e.variant) << " source iou " << e.source.iou << " target iou " << e.target.iou << '\n';
  }
  std::ofstream(dir / "ablation.json") << j.dump(2) << '\n';
  out << "run_dir " << dir.string() << '\n';
  return kExitOk;
}

struct SynthArgs {
  std::uint64_t seed = 0;
  int n = 0;
  int n_test = 0;
  int size = 128;
  std::string style = "stainA";
  std::string domain;
  bool paired = false;
};

int cmd_synth(const CommonOptions& o, const SynthArgs& a, std::ostream& out) {
  SynthOptions opts;
  opts.seed = a.seed;
  opts.n_images = a.n;
  opts.n_test = a.n_test;
  opts.size = a.size;
  opts.style = parse_stain_style(a.style);
  opts.paired = a.paired;
  if (a.domain == "source") opts.domain = Domain::Source;
  else if (a.domain == "target") opts.domain = Domain::Target;
  else if (!a.domain.empty()) throw ConfigError("invalid value for 'domain': expected source|target");

  const auto dir = run_directory(o, "synth", "runs", static_cast<std::uint32_t>(a.seed));
  std::ofstream(dir / "synth.cfg") << "seed = " << a.seed << "\nn = " << a.n << "\nn_test = " << a.n_test
                                   << "\nsize = " << a.size << "\nstyle = " << a.style
                                   << "\npaired = " << (a.paired ? "true" : "false") << "\ndomain = "
                                   << (a.domain.empty() ? "default" : a.domain) << '\n';
  const auto manifest = generate_synthetic_dataset(opts, dir);
  out << "manifest " << (dir / "manifest.csv").string() << '\n' << manifest.summary() << '\n';
  return kExitOk;
}

int cmd_report(const std::vector<std::string>& reports, const std::vector<std::string>& paired,
               std::ostream& out) {
  if (reports.empty() && paired.empty()) throw UsageError("report: pass --reports and/or --paired");
  nlohmann::json result = nlohmann::json::object();
  if (!reports.empty()) {
    std::map<std::pair<std::string, std::string>, std::vector<MetricsReport>> groups;
    for (const auto& p : reports) {
      auto r = read_report(p);
      groups[{r.dataset, std::string(to_string(r.variant))}].push_back(std::move(r));
    }
    nlohmann::json summaries = nlohmann::json::array();
    for (const auto& [key, group] : groups) {
      if (group.size() < 2) {
        out << key.first << ' ' << key.second << ": single run, acc " << group[0].pixel_accuracy << " iou "
            << group[0].iou << '\n';
        continue;
      }
      const auto s = summarize_runs(group);
      summaries.push_back(s.to_json());
      out << key.first << ' ' << key.second << ": " << s.str() << '\n';
    }
    result["summaries"] = summaries;
  }
  if (!paired.empty()) {
    if (paired.size() != 2) throw UsageError("--paired takes exactly two report files");
    const auto a = read_report(paired[0]);
    const auto b = read_report(paired[1]);
    if (a.per_image.size() != b.per_image.size()) throw UsageError("paired reports cover different image sets");
    std::vector<double> ia;
    std::vector<double> ib;
    for (std::size_t i = 0; i < a.per_image.size(); ++i) {
      if (a.per_image[i].id != b.per_image[i].id) throw UsageError("paired reports list images in different order");
      ia.push_back(a.per_image[i].iou);
      ib.push_back(b.per_image[i].iou);
    }
    const auto t = paired_t_test(ia, ib);
    result["paired_t_test"] = {{"t", t.t}, {"p", t.p}, {"df", t.df}, {"degenerate", t.degenerate}};
    out << "paired t-test on per-image IoU: t " << t.t << " p " << t.p << " df " << t.df
        << (t.degenerate ? " (degenerate)" : "") << '\n';
  }
  out << result.dump() << '\n';
  return kExitOk;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dual-level adversarial domain adaptation for gland segmentation"};
  app.name("dapnet");
  app.require_subcommand(1, 1);

  CommonOptions common;
  std::string resume;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  add_common(train_cmd, common);
  train_cmd->add_option("--resume", resume, "Continue from a checkpoint");

  std::string checkpoint;
  std::string domain = "both";
  bool overlays = false;
  auto* eval_cmd = app.add_subcommand("evaluate", "Evaluate a checkpoint on test splits");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--domain", domain, "source|target|both")->check(CLI::IsMember({"source", "target", "both"}));
  eval_cmd->add_flag("--overlays", overlays, "Write image/ground-truth/prediction PNGs");

  auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate NA, IA, FA and FULL");
  add_common(ablate_cmd, common);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth-gen", "Generate a synthetic stain corpus");
  add_common(synth_cmd, common, /*with_config=*/false);
  synth_cmd->add_option("--seed", synth.seed)->required();
  synth_cmd->add_option("--n", synth.n, "Number of images")->required();
  synth_cmd->add_option("--n-test", synth.n_test, "Images assigned to the test split");
  synth_cmd->add_option("--size", synth.size, "Image side in pixels");
  synth_cmd->add_option("--style", synth.style, "stainA|stainB");
  synth_cmd->add_option("--domain", synth.domain, "source|target (default from style)");
  synth_cmd->add_flag("--paired", synth.paired, "Share geometry across styles");

  std::vector<std::string> reports;
  std::vector<std::string> paired;
  auto* report_cmd = app.add_subcommand("report", "Summarize MetricsReport files");
  report_cmd->add_option("--reports", reports, "Reports to summarize (mean ± SD)");
  report_cmd->add_option("--paired", paired, "Two reports for a paired t-test on per-image IoU");

  if (!args.empty() && !args.front().starts_with("-")) {
    const auto subs = app.get_subcommands([](CLI::App*) { return true; });
    const bool known = std::any_of(subs.begin(), subs.end(), [&](CLI::App* s) { return s->get_name() == args.front(); });
    if (!known) {
      err << "error: usage: unknown subcommand '" << args.front() << "'\n";
      return kExitUsage;
    }
  }

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: usage: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(common, resume, out);
    if (*eval_cmd) return cmd_evaluate(common, checkpoint, domain, overlays, out);
    if (*ablate_cmd) return cmd_ablate(common, out);
    if (*synth_cmd) return cmd_synth(common, synth, out);
    if (*report_cmd) return cmd_report(reports, paired, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  err << "error: usage: no subcommand\n";
  return kExitUsage;
}

}  // namespace dapnet::cli
