#include "ncd/run_config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "ncd/errors.hpp"

namespace ncd {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto res = std::from_chars(value.data(), end, out);
  if (res.ec != std::errc() || res.ptr != end)
    throw ConfigError("invalid value '" + value + "' for " + key);
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on") return true;
  if (value == "false" || value == "0" || value == "off") return false;
  throw ConfigError("invalid value '" + value + "' for " + key + " (expected true or false)");
}

std::string number_text(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

const char* bool_text(bool b) { return b ? "true" : "false"; }

std::vector<std::size_t> parse_dims(const std::string& key, const std::string& value) {
  std::vector<std::size_t> dims;
  std::stringstream ss(value);
  for (std::string part; std::getline(ss, part, ',');)
    dims.push_back(parse_number<std::size_t>(key, trim(part)));
  return dims;
}

// Applies a train key; returns false when the key is not a training setting.
bool set_train(TrainConfig& t, const std::string& key, const std::string& v) {
  if (key == "pretrain-epochs") t.pretrain_epochs = parse_number<int>(key, v);
  else if (key == "train-epochs") t.train_epochs = parse_number<int>(key, v);
  else if (key == "batch-size") t.batch_size = parse_number<std::size_t>(key, v);
  else if (key == "learning-rate") t.learning_rate = parse_number<double>(key, v);
  else if (key == "weight-decay") t.weight_decay = parse_number<double>(key, v);
  else if (key == "eps-min") t.eps_min = parse_number<double>(key, v);
  else if (key == "tau") t.tau = parse_number<double>(key, v);
  else if (key == "loss-td") t.losses.td = parse_bool(key, v);
  else if (key == "loss-ce") t.losses.ce = parse_bool(key, v);
  else if (key == "loss-ss") t.losses.ss = parse_bool(key, v);
  else if (key == "stlclu") t.stlclu = parse_bool(key, v);
  else if (key == "eps-growth") t.schedule.eps_growth = parse_number<double>(key, v);
  else if (key == "min-pts-decrement") t.schedule.min_pts_decrement = parse_number<std::size_t>(key, v);
  else if (key == "min-pts-floor") t.schedule.min_pts_floor = parse_number<std::size_t>(key, v);
  else if (key == "cluster-cosine") t.cluster_cosine = parse_bool(key, v);
  else if (key == "refresh-actions") t.refresh_actions = parse_bool(key, v);
  else if (key == "feature-dim") t.feature_dim = parse_number<std::size_t>(key, v);
  else if (key == "heads") t.heads = parse_number<std::size_t>(key, v);
  else if (key == "pseudo-slots") t.pseudo_slots = parse_number<int>(key, v);
  else if (key == "seed") t.seed = parse_number<std::uint64_t>(key, v);
  else return false;
  return true;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    out.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return out;
}

std::string TrainConfig::to_text() const {
  std::ostringstream out;
  out << "pretrain-epochs=" << pretrain_epochs << '\n'
      << "train-epochs=" << train_epochs << '\n'
      << "batch-size=" << batch_size << '\n'
      << "learning-rate=" << number_text(learning_rate) << '\n'
      << "weight-decay=" << number_text(weight_decay) << '\n'
      << "eps-min=" << number_text(eps_min) << '\n'
      << "tau=" << number_text(tau) << '\n'
      << "loss-td=" << bool_text(losses.td) << '\n'
      << "loss-ce=" << bool_text(losses.ce) << '\n'
      << "loss-ss=" << bool_text(losses.ss) << '\n'
      << "stlclu=" << bool_text(stlclu) << '\n'
      << "eps-growth=" << number_text(schedule.eps_growth) << '\n'
      << "min-pts-decrement=" << schedule.min_pts_decrement << '\n'
      << "min-pts-floor=" << schedule.min_pts_floor << '\n'
      << "cluster-cosine=" << bool_text(cluster_cosine) << '\n'
      << "refresh-actions=" << bool_text(refresh_actions) << '\n'
      << "feature-dim=" << feature_dim << '\n'
      << "heads=" << heads << '\n'
      << "pseudo-slots=" << pseudo_slots << '\n'
      << "seed=" << seed << '\n';
  return out.str();
}

TrainConfig TrainConfig::from_text(const std::string& text) {
  TrainConfig t;
  for (const auto& [key, value] : parse_key_values(text))
    if (!set_train(t, key, value)) throw ConfigError("unknown training config key '" + key + "'");
  t.validate();
  return t;
}

void RunConfig::set_seed(std::uint64_t seed) {
  train.seed = seed;
  data.seed = seed;
}

void RunConfig::validate() const {
  data.validate();
  train.validate();
  if (eval.queries_per_class < 1) throw ConfigError("queries-per-class must be at least 1");
  if (eval.drop_probability < 0.0 || eval.drop_probability >= 1.0)
    throw ConfigError("drop-probability must be in [0, 1)");
  if (eval.eval_every < 0) throw ConfigError("eval-every must be non-negative");
}

void RunConfig::set(const std::string& key, const std::string& v) {
  if (key == "seed") set_seed(parse_number<std::uint64_t>(key, v));
  else if (set_train(train, key, v)) return;
  else if (key == "labeled-classes") data.num_labeled_classes = parse_number<int>(key, v);
  else if (key == "novel-classes") data.num_novel_classes = parse_number<int>(key, v);
  else if (key == "samples-per-class") data.samples_per_class = parse_number<int>(key, v);
  else if (key == "latent-dim") data.latent_dim = parse_number<std::size_t>(key, v);
  else if (key == "modality-dims") data.modality_dims = parse_dims(key, v);
  else if (key == "sigma-between") data.sigma_between = parse_number<double>(key, v);
  else if (key == "sigma-within") data.sigma_within = parse_number<double>(key, v);
  else if (key == "sigma-observation") data.sigma_observation = parse_number<double>(key, v);
  else if (key == "queries-per-class") eval.queries_per_class = parse_number<int>(key, v);
  else if (key == "drop-probability") eval.drop_probability = parse_number<double>(key, v);
  else if (key == "drop-modality") {
    if (v.empty() || v == "none") eval.drop_modality.reset();
    else eval.drop_modality = parse_number<std::size_t>(key, v);
  } else if (key == "eval-every") eval.eval_every = parse_number<int>(key, v);
  else if (key == "dataset") dataset = v;
  else throw ConfigError("unknown config key '" + key + "'");
}

std::string RunConfig::to_text() const {
  std::ostringstream out;
  out << "labeled-classes=" << data.num_labeled_classes << '\n'
      << "novel-classes=" << data.num_novel_classes << '\n'
      << "samples-per-class=" << data.samples_per_class << '\n'
      << "latent-dim=" << data.latent_dim << '\n'
      << "modality-dims=";
  for (std::size_t i = 0; i < data.modality_dims.size(); ++i)
    out << (i ? "," : "") << data.modality_dims[i];
  out << '\n'
      << "sigma-between=" << number_text(data.sigma_between) << '\n'
      << "sigma-within=" << number_text(data.sigma_within) << '\n'
      << "sigma-observation=" << number_text(data.sigma_observation) << '\n'
      << train.to_text()
      << "queries-per-class=" << eval.queries_per_class << '\n'
      << "drop-probability=" << number_text(eval.drop_probability) << '\n'
      << "drop-modality=" << (eval.drop_modality ? std::to_string(*eval.drop_modality) : "none") << '\n'
      << "eval-every=" << eval.eval_every << '\n'
      << "dataset=" << dataset << '\n';
  return out.str();
}

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig cfg;
  for (const auto& [key, value] : parse_key_values(text)) cfg.set(key, value);
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return from_text(text.str());
}

}  // namespace ncd
