#include "a3/config.hpp"

#include "a3/errors.hpp"
#include "a3/tensor_io.hpp"

#include <charconv>
#include <sstream>

namespace a3 {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& key, const std::string& text) {
  double v = 0.0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + text + "'");
  }
  return v;
}

long long parse_int(const std::string& key, const std::string& text) {
  long long v = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + text + "'");
}

template <typename Access>
ConfigKey real(std::string name, std::string help, Access access) {
  return {name, std::move(help), [access](const RunConfig& c) { return format_double(access(const_cast<RunConfig&>(c))); },
          [access, name](RunConfig& c, const std::string& v) { access(c) = parse_double(name, v); }};
}

template <typename Access>
ConfigKey integer(std::string name, std::string help, Access access) {
  return {name, std::move(help), [access](const RunConfig& c) { return std::to_string(access(const_cast<RunConfig&>(c))); },
          [access, name](RunConfig& c, const std::string& v) {
            using T = std::remove_reference_t<decltype(access(c))>;
            const long long parsed = parse_int(name, v);
            if constexpr (std::is_unsigned_v<T>) {
              if (parsed < 0) throw ConfigError("config key '" + name + "': must be nonnegative");
            }
            access(c) = static_cast<T>(parsed);
          }};
}

template <typename Access>
ConfigKey boolean(std::string name, std::string help, Access access) {
  return {name, std::move(help), [access](const RunConfig& c) { return access(const_cast<RunConfig&>(c)) ? "true" : "false"; },
          [access, name](RunConfig& c, const std::string& v) { access(c) = parse_bool(name, v); }};
}

template <typename Access, typename Format, typename Parse>
ConfigKey choice(std::string name, std::string help, Access access, Format format, Parse parse) {
  return {name, std::move(help), [access, format](const RunConfig& c) { return format(access(const_cast<RunConfig&>(c))); },
          [access, parse](RunConfig& c, const std::string& v) { access(c) = parse(v); }};
}

std::string format_widths(const std::vector<Index>& w) {
  std::string out;
  for (std::size_t i = 0; i < w.size(); ++i) out += (i ? "," : "") + std::to_string(w[i]);
  return out;
}

std::vector<Index> parse_widths(const std::string& text) {
  std::vector<Index> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const long long v = parse_int("hidden_widths", trim(item));
    if (v <= 0) throw ConfigError("config key 'hidden_widths': widths must be positive");
    out.push_back(static_cast<Index>(v));
  }
  if (out.empty()) throw ConfigError("config key 'hidden_widths': need at least one width");
  return out;
}

std::string uncertainty_name(UncertaintySource s) { return s == UncertaintySource::kBald ? "bald" : "entropy"; }
UncertaintySource parse_uncertainty(const std::string& v) {
  if (v == "bald") return UncertaintySource::kBald;
  if (v == "entropy") return UncertaintySource::kEntropy;
  throw ConfigError("config key 'uncertainty_source': expected bald or entropy, got '" + v + "'");
}

std::string probe_name(ProbeFeatures p) { return p == ProbeFeatures::kEmbedding ? "embedding" : "trunk"; }
ProbeFeatures parse_probe(const std::string& v) {
  if (v == "embedding") return ProbeFeatures::kEmbedding;
  if (v == "trunk") return ProbeFeatures::kTrunk;
  throw ConfigError("config key 'probe_features': expected embedding or trunk, got '" + v + "'");
}

void add_optim(std::vector<ConfigKey>& keys, const std::string& phase, OptimSpec RunConfig::*member) {
  keys.push_back(real(phase + "_lr", phase + " learning rate", [member](RunConfig& c) -> double& { return (c.*member).lr; }));
  keys.push_back(real(phase + "_momentum", phase + " SGD momentum", [member](RunConfig& c) -> double& { return (c.*member).momentum; }));
  keys.push_back(real(phase + "_weight_decay", phase + " weight decay", [member](RunConfig& c) -> double& { return (c.*member).weight_decay; }));
  keys.push_back(choice(
      phase + "_schedule", phase + " schedule: constant, cosine or multistep",
      [member](RunConfig& c) -> ScheduleKind& { return (c.*member).schedule; },
      [](ScheduleKind k) { return to_string(k); }, [](const std::string& v) { return parse_schedule(v); }));
}

std::vector<ConfigKey> build_keys() {
  std::vector<ConfigKey> k;
  k.push_back(integer("seed", "master seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; }));

  k.push_back(choice(
      "hidden_widths", "encoder hidden widths, comma separated",
      [](RunConfig& c) -> std::vector<Index>& { return c.hidden_widths; }, format_widths, parse_widths));
  k.push_back(integer("proj_dim", "embedding dimension p", [](RunConfig& c) -> Index& { return c.proj_dim; }));
  k.push_back(integer("n_prototypes", "prototype count K", [](RunConfig& c) -> Index& { return c.n_prototypes; }));
  k.push_back(integer("domain_hidden", "domain classifier hidden width", [](RunConfig& c) -> Index& { return c.domain_hidden; }));
  k.push_back(real("dropout_rate", "rotation classifier dropout rate", [](RunConfig& c) -> double& { return c.dropout_rate; }));
  k.push_back(boolean("share_prototypes", "target model scores against the frozen source prototypes",
                      [](RunConfig& c) -> bool& { return c.share_prototypes; }));

  k.push_back(real("tau", "softmax temperature", [](RunConfig& c) -> double& { return c.swap.tau; }));
  k.push_back(real("sinkhorn_epsilon", "Sinkhorn entropy regularizer", [](RunConfig& c) -> double& { return c.swap.epsilon; }));
  k.push_back(integer("sinkhorn_iters", "Sinkhorn iterations", [](RunConfig& c) -> int& { return c.swap.sinkhorn_iters; }));

  k.push_back(real("lambda1", "domain adversarial weight", [](RunConfig& c) -> double& { return c.weights.lambda1; }));
  k.push_back(real("lambda2", "entropy + VAT weight", [](RunConfig& c) -> double& { return c.weights.lambda2; }));
  k.push_back(real("grl_lambda", "gradient reversal coefficient after warmup", [](RunConfig& c) -> double& { return c.weights.grl_lambda; }));
  k.push_back(boolean("grl_warmup", "ramp the reversal coefficient from 0 over the first cycle",
                      [](RunConfig& c) -> bool& { return c.grl_warmup; }));
  k.push_back(boolean("use_dal", "enable the domain adversarial loss", [](RunConfig& c) -> bool& { return c.use_dal; }));
  k.push_back(boolean("use_entropy", "enable entropy minimization", [](RunConfig& c) -> bool& { return c.use_entropy; }));
  k.push_back(boolean("use_vat", "enable virtual adversarial training", [](RunConfig& c) -> bool& { return c.use_vat; }));
  k.push_back(real("vat_xi", "VAT finite-difference probe scale", [](RunConfig& c) -> double& { return c.vat.xi; }));
  k.push_back(real("vat_eps", "VAT perturbation radius", [](RunConfig& c) -> double& { return c.vat.eps_radius; }));
  k.push_back(integer("vat_power_iters", "VAT power iterations", [](RunConfig& c) -> int& { return c.vat.power_iters; }));

  k.push_back(choice(
      "acquisition", "hybrid, uncertainty or random", [](RunConfig& c) -> AcquisitionMode& { return c.acquisition; },
      [](AcquisitionMode m) { return to_string(m); }, [](const std::string& v) { return parse_acquisition_mode(v); }));
  k.push_back(choice("uncertainty_source", "bald (rotation model) or entropy (target prototypes)",
                     [](RunConfig& c) -> UncertaintySource& { return c.uncertainty_source; }, uncertainty_name,
                     parse_uncertainty));
  k.push_back(real("beta", "uncertainty weight in the acquisition score", [](RunConfig& c) -> double& { return c.beta; }));
  k.push_back(integer("mc_passes", "MC dropout passes", [](RunConfig& c) -> int& { return c.mc_passes; }));
  k.push_back(integer("kmeans_k", "k-means clusters for diversity", [](RunConfig& c) -> Index& { return c.kmeans_k; }));
  k.push_back(integer("kmeans_max_iter", "k-means iteration cap", [](RunConfig& c) -> int& { return c.kmeans_max_iter; }));
  k.push_back(boolean("clue_weighting", "entropy-weighted k-means", [](RunConfig& c) -> bool& { return c.clue_weighting; }));
  k.push_back(integer("budget_total", "total core-set budget", [](RunConfig& c) -> Index& { return c.budget_total; }));
  k.push_back(integer("n_cycles", "stage-0 plus adaptation stages", [](RunConfig& c) -> int& { return c.n_cycles; }));
  k.push_back(boolean("rescore_each_cycle", "rescore the remaining pool every cycle",
                      [](RunConfig& c) -> bool& { return c.rescore_each_cycle; }));
  k.push_back(boolean("warm_start", "continue target training across cycles", [](RunConfig& c) -> bool& { return c.warm_start; }));

  k.push_back(integer("batch_size", "minibatch size", [](RunConfig& c) -> Index& { return c.batch_size; }));
  k.push_back(integer("pretrain_epochs", "source pretraining epochs", [](RunConfig& c) -> int& { return c.pretrain_epochs; }));
  add_optim(k, "pretrain", &RunConfig::pretrain_opt);
  k.push_back(integer("target_epochs", "target training epochs per cycle", [](RunConfig& c) -> int& { return c.target_epochs; }));
  add_optim(k, "target", &RunConfig::target_opt);
  k.push_back(integer("rotation_epochs", "rotation model epochs per cycle", [](RunConfig& c) -> int& { return c.rotation_epochs; }));
  add_optim(k, "rotation", &RunConfig::rotation_opt);

  k.push_back(integer("probe_steps", "linear probe gradient steps", [](RunConfig& c) -> int& { return c.probe_steps; }));
  k.push_back(real("probe_lr", "linear probe learning rate", [](RunConfig& c) -> double& { return c.probe_lr; }));
  k.push_back(choice("probe_features", "probe input: embedding or trunk",
                     [](RunConfig& c) -> ProbeFeatures& { return c.probe_features; }, probe_name, parse_probe));

  k.push_back(integer("n_classes", "glyph classes", [](RunConfig& c) -> Index& { return c.data.n_classes; }));
  k.push_back(integer("samples_per_class", "samples per class and domain", [](RunConfig& c) -> Index& { return c.data.samples_per_class; }));
  k.push_back(integer("image_side", "image side in pixels", [](RunConfig& c) -> Index& { return c.data.image_side; }));
  k.push_back(real("intensity_scale", "target intensity multiplier", [](RunConfig& c) -> double& { return c.data.shift.intensity_scale; }));
  k.push_back(real("noise_sigma", "target additive noise", [](RunConfig& c) -> double& { return c.data.shift.noise_sigma; }));
  k.push_back(integer("translation_px", "target translation in pixels", [](RunConfig& c) -> int& { return c.data.shift.translation_px; }));
  k.push_back(real("contrast_gamma", "target gamma", [](RunConfig& c) -> double& { return c.data.shift.contrast_gamma; }));

  k.push_back(boolean("log_timing", "record wall-clock ms in metrics (breaks bitwise reproducibility)",
                      [](RunConfig& c) -> bool& { return c.log_timing; }));
  return k;
}

const ConfigKey& find_key(const std::string& key) {
  for (const ConfigKey& k : config_keys()) {
    if (k.name == key) return k;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = build_keys();
  return keys;
}

void RunConfig::set(const std::string& key, const std::string& value) { find_key(key).set(*this, trim(value)); }

std::string RunConfig::get(const std::string& key) const { return find_key(key).get(*this); }

std::string RunConfig::canonical_text() const {
  std::string out;
  for (const ConfigKey& k : config_keys()) out += k.name + " = " + k.get(*this) + "\n";
  return out;
}

std::uint64_t RunConfig::fingerprint() const { return fnv1a64(canonical_text()); }

void RunConfig::validate() const {
  for (Index w : hidden_widths) {
    if (w <= 0) throw ConfigError("hidden_widths must be positive");
  }
  if (proj_dim < 1 || n_prototypes < 1 || domain_hidden < 1) throw ConfigError("model sizes must be positive");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must be in [0,1)");
  if (!(swap.tau > 0.0)) throw ConfigError("tau must be positive");
  if (!(swap.epsilon > 0.0)) throw ConfigError("sinkhorn_epsilon must be positive");
  if (swap.sinkhorn_iters < 1) throw ConfigError("sinkhorn_iters must be positive");
  weights.validate();
  vat.validate();
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be finite and nonnegative");
  if (mc_passes < 2) throw ConfigError("mc_passes must be at least 2");
  if (kmeans_k < 1 || kmeans_max_iter < 1) throw ConfigError("kmeans_k and kmeans_max_iter must be positive");
  if (n_cycles < 2) throw ConfigError("n_cycles must be at least 2 (stage-0 plus one adaptation stage)");
  if (budget_total < n_cycles - 1) throw ConfigError("budget_total must allow at least one sample per adaptation stage");
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
  if (pretrain_epochs < 0 || target_epochs < 0 || rotation_epochs < 0) throw ConfigError("epoch counts must be >= 0");
  pretrain_opt.validate();
  target_opt.validate();
  rotation_opt.validate();
  if (probe_steps < 1 || !(probe_lr > 0.0)) throw ConfigError("probe_steps and probe_lr must be positive");
  data.validate();
}

RunConfig parse_config_text(const std::string& text, RunConfig base) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    try {
      base.set(key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

RunConfig load_config_file(const std::string& path, RunConfig base) { return parse_config_text(read_file(path), std::move(base)); }

std::vector<Index> cycle_budgets(Index budget_total, int n_cycles) {
  if (n_cycles < 2) throw ConfigError("n_cycles must be at least 2");
  const Index stages = n_cycles - 1;
  if (budget_total < stages) throw ConfigError("budget_total smaller than the number of adaptation stages");
  std::vector<Index> out(static_cast<std::size_t>(stages), budget_total / stages);
  for (Index i = 0; i < budget_total % stages; ++i) ++out[static_cast<std::size_t>(i)];
  return out;
}

}  // namespace a3
