#include "cli.hpp"

#include "a3/config.hpp"
#include "a3/errors.hpp"
#include "a3/pipeline.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

namespace a3 {

namespace {

std::string dashed(std::string key) {
  for (char& c : key) {
    if (c == '_') c = '-';
  }
  return key;
}

// Every RunConfig key becomes a `--key-name` option on the subcommand.
struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App& app) {
    app.add_option("--config", config_path, "flat `key = value` config file");
    for (const ConfigKey& key : config_keys()) {
      options[key.name] = app.add_option("--" + dashed(key.name), values[key.name], key.help);
    }
  }

  RunConfig resolve() const {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config_file(config_path);
    for (const ConfigKey& key : config_keys()) {
      if (options.at(key.name)->count() > 0) cfg.set(key.name, values.at(key.name));
    }
    cfg.validate();
    return cfg;
  }
};

struct Sub {
  CLI::App* app = nullptr;
  ConfigFlags flags;
};

class MetricsFile {
 public:
  explicit MetricsFile(const std::string& path) {
    if (path.empty()) return;
    out_ = std::make_unique<std::ofstream>(path, std::ios::trunc);
    if (!*out_) throw IoError("cannot open for writing: " + path);
  }
  MetricsSink sink() {
    if (!out_) return {};
    return [this](const MetricsRecord& r) { *out_ << r.to_json() << '\n'; };
  }

 private:
  std::unique_ptr<std::ofstream> out_;
};

std::string format_acc(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

// Adapting and evaluating against a bundle reuses the bundle's data spec so
// image sizes always agree.
RunConfig with_bundle_spec(RunConfig cfg, const DatasetBundle& bundle) {
  cfg.data = bundle.spec;
  cfg.validate();
  return cfg;
}

EncoderParams best_encoder(const Checkpoint& ckpt) {
  if (ckpt.tensors.count(std::string(kTargetEncoder) + ".projection")) return target_encoder(ckpt);
  return source_encoder(ckpt);
}

void write_embeddings(const std::string& dir, std::int64_t stage, const NamedTensors& tensors) {
  save_tensor_file((std::filesystem::path(dir) / ("embeds_stage" + std::to_string(stage) + ".bin")).string(),
                   kEmbeddingMagic, tensors);
}

int cmd_gen(const RunConfig& cfg, const std::string& out_path, std::ostream& out) {
  DomainSpec spec = cfg.data;
  spec.seed = cfg.seed;
  const DatasetBundle bundle = generate_domain_pair(spec);
  save_bundle(out_path, bundle);
  out << "wrote " << out_path << ": " << bundle.source.size() << " source + " << bundle.target.size()
      << " target images, side " << bundle.source.side << "\n";
  return kExitOk;
}

int cmd_pretrain(RunConfig cfg, const std::string& bundle_path, const std::string& out_path,
                 const std::string& metrics_path, std::ostream& out) {
  const DatasetBundle bundle = load_bundle(bundle_path);
  cfg = with_bundle_spec(cfg, bundle);
  const Evaluator evaluator(bundle, probe_config(cfg));
  MetricsFile metrics(metrics_path);
  PipelineHooks hooks{metrics.sink(), metrics_path.empty() ? EvalFn{} : evaluator.callback(), {}};
  Checkpoint ckpt;
  try {
    ckpt = pretrain_source(cfg, bundle.source, hooks);
  } catch (const TrainingAborted& e) {
    save_checkpoint(out_path, e.last_good());
    throw;
  }
  save_checkpoint(out_path, ckpt);
  const EvalResult r = evaluator.evaluate(source_encoder(ckpt));
  out << "wrote " << out_path << " source_probe_acc=" << format_acc(r.source_probe_acc)
      << " target_acc=" << format_acc(r.target_acc) << "\n";
  return kExitOk;
}

struct AdaptOutputs {
  std::string ckpt;
  std::string metrics;
  std::string embeddings_dir;
  std::string coreset;
};

EvalResult run_adapt(const RunConfig& cfg, const DatasetBundle& bundle, const Checkpoint& source,
                     const AdaptOutputs& outputs) {
  const Evaluator evaluator(bundle, probe_config(cfg));
  MetricsFile metrics(outputs.metrics);
  PipelineHooks hooks{metrics.sink(), outputs.metrics.empty() ? EvalFn{} : evaluator.callback(), {}};
  if (!outputs.embeddings_dir.empty()) {
    std::filesystem::create_directories(outputs.embeddings_dir);
    hooks.embeddings = [&](std::int64_t stage, const NamedTensors& t) { write_embeddings(outputs.embeddings_dir, stage, t); };
  }
  // Only the unlabeled target images reach the adaptation loop.
  const AdaptResult result = adapt(cfg, source, bundle.target, hooks);
  if (!outputs.ckpt.empty()) save_checkpoint(outputs.ckpt, result.target);
  if (!outputs.coreset.empty()) save_coreset(outputs.coreset, result.core);
  return evaluator.evaluate(target_encoder(result.target));
}

int cmd_adapt(RunConfig cfg, const std::string& bundle_path, const std::string& source_path,
              const AdaptOutputs& outputs, std::ostream& out) {
  const Checkpoint source = load_checkpoint(source_path);
  const DatasetBundle bundle = load_bundle(bundle_path);
  cfg = with_bundle_spec(cfg, bundle);
  const EvalResult r = run_adapt(cfg, bundle, source, outputs);
  out << "wrote " << outputs.ckpt << " source_probe_acc=" << format_acc(r.source_probe_acc)
      << " target_acc=" << format_acc(r.target_acc) << "\n";
  return kExitOk;
}

int cmd_eval(RunConfig cfg, const std::string& ckpt_path, const std::string& bundle_path, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const DatasetBundle bundle = load_bundle(bundle_path);
  cfg = with_bundle_spec(cfg, bundle);
  const EvalResult r = Evaluator(bundle, probe_config(cfg)).evaluate(best_encoder(ckpt));
  out << "{\"source_probe_acc\":" << format_acc(r.source_probe_acc) << ",\"target_acc\":" << format_acc(r.target_acc)
      << "}\n";
  return kExitOk;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int cmd_ablate(RunConfig cfg, const std::string& bundle_path, const std::string& source_path,
               const std::string& variants_text, const std::string& out_dir, std::ostream& out) {
  std::vector<std::string> names = split_list(variants_text);
  if (names.empty()) {
    for (const auto& v : ablation_variants()) names.push_back(v.name);
  }
  for (const auto& n : names) find_variant(n);  // reject typos before any training

  const Checkpoint source = load_checkpoint(source_path);
  const DatasetBundle bundle = load_bundle(bundle_path);
  cfg = with_bundle_spec(cfg, bundle);
  std::filesystem::create_directories(out_dir);
  const EvalResult baseline = Evaluator(bundle, probe_config(cfg)).evaluate(source_encoder(source));

  std::ostringstream table;
  table << "variant\ttarget_acc\tsource_probe_acc\tgain\n";
  table << "source_only\t" << format_acc(baseline.target_acc) << "\t" << format_acc(baseline.source_probe_acc)
        << "\t" << format_acc(0.0) << "\n";
  for (const auto& name : names) {
    RunConfig variant = cfg;
    find_variant(name).apply(variant);
    const std::filesystem::path dir(out_dir);
    AdaptOutputs outputs{(dir / ("ckpt_" + name + ".bin")).string(), (dir / ("metrics_" + name + ".jsonl")).string(),
                         "", ""};
    const EvalResult r = run_adapt(variant, bundle, source, outputs);
    table << name << "\t" << format_acc(r.target_acc) << "\t" << format_acc(r.source_probe_acc) << "\t"
          << format_acc(r.target_acc - baseline.target_acc) << "\n";
  }
  write_file((std::filesystem::path(out_dir) / "comparison.tsv").string(), table.str());
  out << table.str();
  return kExitOk;
}

int cmd_report(const std::vector<std::string>& files, std::ostream& out) {
  out << "file\trecords\tfinal_stage\tcore_set_size\ttotal\tsource_probe_acc\ttarget_acc\n";
  for (const auto& path : files) {
    const std::vector<MetricsRecord> recs = read_metrics_file(path);
    if (recs.empty()) throw IoError("metrics file is empty: " + path);
    const MetricsRecord& last = recs.back();
    char total[32];
    std::snprintf(total, sizeof(total), "%.6f", last.total);
    out << std::filesystem::path(path).filename().string() << "\t" << recs.size() << "\t" << last.stage << "\t"
        << last.core_set_size << "\t" << total << "\t" << format_acc(last.source_probe_acc) << "\t"
        << format_acc(last.target_acc) << "\n";
  }
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Source-free domain adaptation with active core-set selection"};
  app.name("a3");
  app.require_subcommand(1);

  Sub gen{app.add_subcommand("gen", "generate a synthetic source/target bundle")};
  std::string gen_out;
  gen.app->add_option("--out", gen_out, "bundle path")->required();
  gen.flags.attach(*gen.app);

  Sub pre{app.add_subcommand("pretrain", "stage-0 self-supervised source pretraining")};
  std::string pre_bundle, pre_out, pre_metrics;
  pre.app->add_option("--bundle", pre_bundle, "dataset bundle")->required();
  pre.app->add_option("--out", pre_out, "checkpoint path")->required();
  pre.app->add_option("--metrics", pre_metrics, "metrics JSONL path");
  pre.flags.attach(*pre.app);

  Sub ad{app.add_subcommand("adapt", "active adaptation cycles on the target pool")};
  std::string ad_bundle, ad_source;
  AdaptOutputs ad_out;
  ad.app->add_option("--bundle", ad_bundle, "dataset bundle")->required();
  ad.app->add_option("--source-ckpt", ad_source, "stage-0 checkpoint")->required();
  ad.app->add_option("--out", ad_out.ckpt, "target checkpoint path")->required();
  ad.app->add_option("--metrics", ad_out.metrics, "metrics JSONL path");
  ad.app->add_option("--embeddings-dir", ad_out.embeddings_dir, "directory for embeds_stage<k>.bin");
  ad.app->add_option("--coreset", ad_out.coreset, "core-set text file");
  ad.flags.attach(*ad.app);

  Sub ev{app.add_subcommand("eval", "linear-probe evaluation of a checkpoint")};
  std::string ev_ckpt, ev_bundle;
  ev.app->add_option("--ckpt", ev_ckpt, "checkpoint")->required();
  ev.app->add_option("--bundle", ev_bundle, "dataset bundle")->required();
  ev.flags.attach(*ev.app);

  Sub ab{app.add_subcommand("ablate", "run ablation variants from one source checkpoint")};
  std::string ab_bundle, ab_source, ab_variants, ab_dir = "ablation";
  ab.app->add_option("--bundle", ab_bundle, "dataset bundle")->required();
  ab.app->add_option("--source-ckpt", ab_source, "stage-0 checkpoint")->required();
  ab.app->add_option("--variants", ab_variants, "comma list (default: all six)");
  ab.app->add_option("--out-dir", ab_dir, "output directory")->capture_default_str();
  ab.flags.attach(*ab.app);

  CLI::App* rep = app.add_subcommand("report", "summarize metrics JSONL files");
  std::vector<std::string> rep_files;
  rep->add_option("files", rep_files, "metrics files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitConfig;
  }

  try {
    if (gen.app->parsed()) return cmd_gen(gen.flags.resolve(), gen_out, out);
    if (pre.app->parsed()) return cmd_pretrain(pre.flags.resolve(), pre_bundle, pre_out, pre_metrics, out);
    if (ad.app->parsed()) return cmd_adapt(ad.flags.resolve(), ad_bundle, ad_source, ad_out, out);
    if (ev.app->parsed()) return cmd_eval(ev.flags.resolve(), ev_ckpt, ev_bundle, out);
    if (ab.app->parsed()) return cmd_ablate(ab.flags.resolve(), ab_bundle, ab_source, ab_variants, ab_dir, out);
    if (rep->parsed()) return cmd_report(rep_files, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "numeric abort: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace a3
