#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "vflow/cli.hpp"
#include "vflow/error.hpp"

namespace vflow::cli {
namespace {

[[noreturn]] void invalid(const std::string& key, const std::string& why) {
  throw Error(Errc::ConfigInvalid, key + ": " + why);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out))
    invalid(key, "expected a finite number, got '" + v + "'");
  return out;
}

long long parse_integer(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) invalid(key, "expected an integer, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  invalid(key, "expected true or false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

std::string fmt(double x) {
  char buf[32];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, p);
}

template <class T>
std::string join(const std::vector<T>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ",";
    if constexpr (std::is_same_v<T, double>)
      out += fmt(xs[i]);
    else
      out += std::to_string(xs[i]);
  }
  return out;
}

// Typed accessors over one config field.
struct Key {
  std::function<void(Config&, const std::string&, const std::string&)> set;
  std::function<std::string(const Config&)> get;
};

template <class Field>
Key int_key(Field field, long long lo, long long hi) {
  return {[=](Config& c, const std::string& k, const std::string& v) {
            const long long x = parse_integer(k, v);
            if (x < lo || x > hi) invalid(k, "must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
            using T = std::remove_reference_t<decltype(field(c))>;
            field(c) = static_cast<T>(x);
          },
          [=](const Config& c) { return std::to_string(field(c)); }};
}

template <class Field>
Key seed_key(Field field) {
  return {[=](Config& c, const std::string& k, const std::string& v) {
            std::uint64_t x = 0;
            const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
            if (ec != std::errc() || p != v.data() + v.size()) invalid(k, "expected a nonnegative integer");
            field(c) = x;
          },
          [=](const Config& c) { return std::to_string(field(c)); }};
}

template <class Field>
Key real_key(Field field, double lo, double hi, bool open_lo = false) {
  return {[=](Config& c, const std::string& k, const std::string& v) {
            const double x = parse_double(k, v);
            if (x < lo || x > hi || (open_lo && x == lo))
              invalid(k, "must lie in " + std::string(open_lo ? "(" : "[") + fmt(lo) + ", " + fmt(hi) + "]");
            field(c) = x;
          },
          [=](const Config& c) { return fmt(field(c)); }};
}

template <class Field>
Key bool_key(Field field) {
  return {[=](Config& c, const std::string& k, const std::string& v) { field(c) = parse_bool(k, v); },
          [=](const Config& c) { return std::string(field(c) ? "true" : "false"); }};
}

template <class Field>
Key string_key(Field field, std::vector<std::string> allowed = {}) {
  return {[=](Config& c, const std::string& k, const std::string& v) {
            if (!allowed.empty() && std::find(allowed.begin(), allowed.end(), v) == allowed.end())
              invalid(k, "unknown value '" + v + "'");
            field(c) = v;
          },
          [=](const Config& c) { return field(c); }};
}

template <class Field>
Key hidden_key(Field field) {
  return {[=](Config& c, const std::string& k, const std::string& v) {
            std::vector<int> out;
            for (const auto& s : split_list(v)) {
              const long long x = parse_integer(k, s);
              if (x < 1 || x > 1 << 16) invalid(k, "layer widths must be positive");
              out.push_back(static_cast<int>(x));
            }
            if (out.empty()) invalid(k, "needs at least one layer width");
            field(c) = out;
          },
          [=](const Config& c) { return join(field(c)); }};
}

template <class Field>
Key reals_key(Field field) {
  return {[=](Config& c, const std::string& k, const std::string& v) {
            std::vector<double> out;
            for (const auto& s : split_list(v)) out.push_back(parse_double(k, s));
            field(c) = out;
          },
          [=](const Config& c) { return join(field(c)); }};
}

template <class Field>
Key activation_key(Field field) {
  return {[=](Config& c, const std::string& k, const std::string& v) {
            try {
              field(c) = parse_activation(v);
            } catch (const Error&) {
              invalid(k, "unknown activation '" + v + "'");
            }
          },
          [=](const Config& c) { return activation_name(field(c)); }};
}

#define FIELD(expr) [](auto& c) -> decltype(auto) { return (expr); }

const std::map<std::string, Key>& keys() {
  static const std::map<std::string, Key> table = [] {
    std::map<std::string, Key> k;
    k["task"] = {[](Config& c, const std::string& key, const std::string& v) {
                   if (v == "dequant")
                     c.task = Task::Dequant;
                   else if (v == "mixture")
                     c.task = Task::Mixture;
                   else
                     invalid(key, "expected dequant or mixture");
                 },
                 [](const Config& c) { return std::string(c.task == Task::Dequant ? "dequant" : "mixture"); }};

    k["data.source"] = string_key(FIELD(c.data.source), {"csv", "nursery", "quantized", "continuous", "categorical"});
    k["data.path"] = string_key(FIELD(c.data.path));
    k["data.shape"] = string_key(FIELD(c.data.shape),
                                 {"checkerboard", "two_moons", "rings", "8gaussians", "two_gaussians"});
    k["data.bins"] = int_key(FIELD(c.data.bins), 2, 100000);
    k["data.n"] = int_key(FIELD(c.data.n), 1, 100000000);
    k["data.seed"] = seed_key(FIELD(c.data.seed));
    k["data.probs"] = reals_key(FIELD(c.data.probs));
    k["data.train"] = real_key(FIELD(c.data.train), 0.0, 1.0);
    k["data.val"] = real_key(FIELD(c.data.val), 0.0, 1.0);
    k["data.test"] = real_key(FIELD(c.data.test), 0.0, 1.0);
    k["data.split_seed"] = seed_key(FIELD(c.data.split_seed));

    k["dequant.dim"] = int_key(FIELD(c.dequant.dim), 1, 1024);
    k["dequant.embed_dim"] = int_key(FIELD(c.dequant.embed_dim), 1, 1024);
    k["dequant.shared_flow"] = bool_key(FIELD(c.dequant.shared_flow));
    k["dequant.cells_exact"] = bool_key(FIELD(c.dequant.cells_exact));
    k["dequant.blocks"] = int_key(FIELD(c.dequant.flow.blocks), 0, 1024);
    k["dequant.hidden"] = hidden_key(FIELD(c.dequant.flow.hidden));
    k["dequant.activation"] = activation_key(FIELD(c.dequant.flow.activation));
    k["dequant.clamp"] = real_key(FIELD(c.dequant.flow.log_scale_clamp), 0.0, 100.0, true);
    k["dequant.freeze_box"] = bool_key(FIELD(c.dequant.freeze_box));
    k["dequant.anchor_std"] = real_key(FIELD(c.dequant.anchor_std), 0.0, 1e6, true);
    k["dequant.box_half_width"] = real_key(FIELD(c.dequant.box_half_width), 0.0, 1e6, true);
    k["dequant.base_dof"] = real_key(FIELD(c.dequant.base_dof), 0.0, 1e6);
    k["dequant.base_log_std"] = real_key(FIELD(c.dequant_base_log_std), -20.0, 20.0);

    k["density.blocks"] = int_key(FIELD(c.density.blocks), 0, 1024);
    k["density.hidden"] = hidden_key(FIELD(c.density.hidden));
    k["density.activation"] = activation_key(FIELD(c.density.activation));
    k["density.clamp"] = real_key(FIELD(c.density.log_scale_clamp), 0.0, 100.0, true);

    k["mixture.components"] = int_key(FIELD(c.mixture.components), 1, 100000);
    k["mixture.pre_blocks"] = int_key(FIELD(c.mixture.pre_blocks), 0, 1024);
    k["mixture.comp_blocks"] = int_key(FIELD(c.mixture.comp_blocks), 0, 1024);
    k["mixture.hidden"] = hidden_key(FIELD(c.mixture.hidden));
    k["mixture.activation"] = activation_key(FIELD(c.mixture.activation));
    k["mixture.clamp"] = real_key(FIELD(c.mixture.log_scale_clamp), 0.0, 100.0, true);
    k["mixture.base_std"] = real_key(FIELD(c.mixture.base_std), 0.0, 1e6, true);
    k["mixture.base_dof"] = real_key(FIELD(c.mixture.base_dof), 0.0, 1e6);
    k["mixture.embed_dim"] = int_key(FIELD(c.mixture.embed_dim), 1, 1024);
    k["mixture.freeze_box"] = bool_key(FIELD(c.mixture.freeze_box));
    k["mixture.box_pad"] = real_key(FIELD(c.mixture.box_pad), 0.0, 1e6);
    k["mixture.init_subsample"] = int_key(FIELD(c.mixture.init_subsample), 1, 100000000);

    k["train.lr"] = real_key(FIELD(c.train.adam.lr), 0.0, 10.0, true);
    k["train.beta1"] = real_key(FIELD(c.train.adam.beta1), 0.0, 1.0);
    k["train.beta2"] = real_key(FIELD(c.train.adam.beta2), 0.0, 1.0);
    k["train.clip_norm"] = real_key(FIELD(c.train.adam.clip_norm), 0.0, 1e12);
    k["train.min_lr_fraction"] = real_key(FIELD(c.train.min_lr_fraction), 0.0, 1.0, true);
    k["train.batch_size"] = int_key(FIELD(c.train.batch_size), 1, 100000000);
    k["train.epochs"] = int_key(FIELD(c.train.epochs), 0, 10000000);
    k["train.patience"] = int_key(FIELD(c.train.patience), 0, 10000000);
    k["train.seed"] = seed_key(FIELD(c.train.seed));
    k["train.eval_samples"] = int_key(FIELD(c.train.eval_samples), 1, 100000);

    k["output.dir"] = string_key(FIELD(c.out_dir));
    k["eval.split"] = string_key(FIELD(c.eval_split), {"train", "val", "test", "all"});
    k["eval.samples"] = int_key(FIELD(c.eval_samples), 1, 100000);
    k["plot.bounds"] = reals_key(FIELD(c.plot_bounds));
    return k;
  }();
  return table;
}

#undef FIELD

// Cross-field checks; run once every key has been read.
void validate(const Config& c) {
  const DataSpec& d = c.data;
  const bool discrete_source = d.source == "nursery" || d.source == "quantized" || d.source == "categorical";
  if (c.task == Task::Mixture && discrete_source)
    invalid("data.source", "'" + d.source + "' is discrete; the mixture task needs continuous rows");
  if (c.task == Task::Dequant && d.source == "continuous")
    invalid("data.source", "continuous rows need the mixture task");
  if (d.source == "csv" && d.path.empty()) invalid("data.path", "required for csv sources");
  if (d.source == "categorical") {
    if (d.probs.size() < 2) invalid("data.probs", "needs at least two probabilities");
    double total = 0.0;
    for (double p : d.probs) {
      if (p <= 0.0) invalid("data.probs", "probabilities must be positive");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) invalid("data.probs", "must sum to one");
  }
  if (std::abs(d.train + d.val + d.test - 1.0) > 1e-9) invalid("data.train", "split ratios must sum to one");
  if (d.train <= 0.0) invalid("data.train", "training fraction must be positive");
  if (!c.plot_bounds.empty()) {
    const auto& b = c.plot_bounds;
    if (b.size() != 4 || !(b[0] < b[1]) || !(b[2] < b[3]))
      invalid("plot.bounds", "expected x_lo,x_hi,y_lo,y_hi with lo < hi");
  }
  if (c.out_dir.empty()) invalid("output.dir", "must not be empty");
}

}  // namespace

Config config_from_entries(const std::map<std::string, std::string>& entries) {
  Config c;
  for (const auto& [key, value] : entries) {
    const auto it = keys().find(key);
    if (it == keys().end()) invalid(key, "unknown key");
    it->second.set(c, key, value);
  }
  validate(c);
  return c;
}

Config parse_config(const std::string& text) {
  std::map<std::string, std::string> entries;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(Errc::ConfigInvalid, "line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw Error(Errc::ConfigInvalid, "line " + std::to_string(lineno) + ": empty key");
    if (!entries.emplace(key, trim(line.substr(eq + 1))).second) invalid(key, "given twice");
  }
  return config_from_entries(entries);
}

Config load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(Errc::Io, "cannot read config " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::map<std::string, std::string> config_entries(const Config& config) {
  std::map<std::string, std::string> out;
  for (const auto& [key, k] : keys()) out[key] = k.get(config);
  return out;
}

std::string format_config(const Config& config) {
  std::string out;
  for (const auto& [key, value] : config_entries(config)) out += key + " = " + value + "\n";
  return out;
}

}  // namespace vflow::cli
