#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "ncd/errors.hpp"
#include "ncd/trainer.hpp"

namespace ncd {

using num::Tensor;

namespace {

constexpr const char* kMagic = "ncd-checkpoint v1";

std::string hex64(std::uint64_t x) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(x));
  return buf;
}

std::string exact(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

std::uint64_t mix_double(std::uint64_t h, double x) {
  const auto bits = std::bit_cast<std::uint64_t>(x);
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  return fnv1a64(std::string_view(bytes, 8), h);
}

void write_doubles(std::ostream& out, std::span<const double> values) {
  std::string buf(values.size() * 8, '\0');
  for (std::size_t k = 0; k < values.size(); ++k) {
    const auto bits = std::bit_cast<std::uint64_t>(values[k]);
    for (int i = 0; i < 8; ++i) buf[k * 8 + i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

void read_doubles(std::istream& in, std::span<double> values, const std::string& what) {
  std::string buf(values.size() * 8, '\0');
  in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(in.gcount()) != buf.size())
    throw ParseError("checkpoint: truncated data for " + what);
  for (std::size_t k = 0; k < values.size(); ++k) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[k * 8 + i])) << (8 * i);
    values[k] = std::bit_cast<double>(bits);
  }
}

class HeaderReader {
 public:
  explicit HeaderReader(std::istream& in) : in_(in) {}

  std::string line() {
    std::string s;
    if (!std::getline(in_, s)) throw ParseError("checkpoint: truncated header after line " + std::to_string(n_));
    ++n_;
    return s;
  }

  // Reads "key rest" and returns rest.
  std::string field(const std::string& key) {
    const std::string s = line();
    if (s.rfind(key + " ", 0) != 0 && s != key)
      throw ParseError("checkpoint: line " + std::to_string(n_) + ": expected '" + key + "'");
    return s.size() > key.size() ? s.substr(key.size() + 1) : std::string();
  }

  template <typename T>
  T number(const std::string& key) {
    return parse<T>(field(key), key);
  }

  template <typename T>
  T parse(const std::string& text, const std::string& what) {
    T value{};
    const auto* end = text.data() + text.size();
    auto res = std::from_chars(text.data(), end, value);
    if (res.ec != std::errc() || res.ptr != end)
      throw ParseError("checkpoint: line " + std::to_string(n_) + ": bad value for " + what);
    return value;
  }

  std::vector<std::string> words(const std::string& text) {
    std::istringstream ss(text);
    std::vector<std::string> out;
    for (std::string w; ss >> w;) out.push_back(w);
    return out;
  }

 private:
  std::istream& in_;
  int n_ = 0;
};

}  // namespace

std::string config_digest(const TrainConfig& config, const TrainingView& data) {
  std::uint64_t h = fnv1a64(config.to_text());
  h = fnv1a64("classes " + std::to_string(data.num_labeled_classes) + " " +
                  std::to_string(data.num_novel_classes),
              h);
  for (const auto& m : data.modalities)
    h = fnv1a64("m" + std::to_string(m.id) + ":" + std::to_string(m.dim), h);
  for (const auto& s : data.samples) {
    h = fnv1a64("s" + std::to_string(s.id) + ":" + std::to_string(static_cast<int>(s.label.kind)) +
                    ":" + std::to_string(s.label.label),
                h);
    for (const auto& mod : s.modalities) {
      if (!mod) {
        h = fnv1a64("NA", h);
        continue;
      }
      for (double x : *mod) h = mix_double(h, x);
    }
  }
  return hex64(h);
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  std::ostringstream out;
  out << kMagic << '\n';
  out << "digest " << config_digest(config_, data_) << '\n';
  const std::string cfg = config_.to_text();
  std::size_t cfg_lines = 0;
  for (char ch : cfg) cfg_lines += ch == '\n';
  out << "config " << cfg_lines << '\n' << cfg;
  out << "pretrain-done " << pretrain_done_ << '\n';
  out << "train-done " << train_done_ << '\n';
  out << "iteration " << iteration_ << '\n';
  out << "train-step " << train_step_ << '\n';
  out << "adam-steps " << adam_.steps() << '\n';
  out << "greedy-rng " << greedy_rng_.state() << '\n';
  if (calibrated_)
    out << "calibrated " << exact(calibrated_->eps) << ' ' << calibrated_->min_pts << '\n';
  else
    out << "calibrated none\n";
  out << "store " << store_.first_id() << ' ' << store_.id_limit() << ' ' << store_.next_fresh()
      << ' ' << store_.size() << '\n';
  for (const auto& [id, label] : store_.entries()) out << id << ' ' << label << '\n';
  const auto params = model_.parameters();
  out << "params " << params.size() << '\n';
  for (const auto* p : params) {
    out << p->name;
    for (auto extent : p->var.shape()) out << ' ' << extent;
    out << '\n';
  }
  out << "end-header\n";
  for (std::size_t i = 0; i < params.size(); ++i) {
    write_doubles(out, params[i]->var.value().data());
    write_doubles(out, adam_.first_moments()[i].data());
    write_doubles(out, adam_.second_moments()[i].data());
  }

  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream file(tmp, std::ios::binary | std::ios::trunc);
    if (!file) throw IoError("cannot write checkpoint " + tmp.string());
    const std::string bytes = out.str();
    file.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!file) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Trainer Trainer::load_checkpoint(const std::filesystem::path& path, const TrainingView& data,
                                 const TrainConfig* expected) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open checkpoint " + path.string());
  HeaderReader header(file);
  if (header.line() != kMagic) throw ParseError("checkpoint: " + path.string() + " is not a checkpoint");
  const std::string digest = header.field("digest");
  const auto cfg_lines = header.number<std::size_t>("config");
  std::string cfg_text;
  for (std::size_t i = 0; i < cfg_lines; ++i) cfg_text += header.line() + '\n';
  TrainConfig config;
  try {
    config = TrainConfig::from_text(cfg_text);
  } catch (const ConfigError& e) {
    throw ParseError(std::string("checkpoint: invalid stored config: ") + e.what());
  }

  if (expected && config_digest(*expected, data) != digest)
    throw IncompatibilityError("checkpoint " + path.string() + " was written for a different configuration (digest " +
                               digest + ", expected " + config_digest(*expected, data) + ")");
  if (config_digest(config, data) != digest)
    throw IncompatibilityError("checkpoint " + path.string() + " does not match this dataset (digest " + digest + ")");

  Trainer t(config, data);
  t.pretrain_done_ = header.number<int>("pretrain-done");
  t.train_done_ = header.number<int>("train-done");
  t.iteration_ = header.number<std::int64_t>("iteration");
  t.train_step_ = header.number<std::int64_t>("train-step");
  const auto adam_steps = header.number<std::int64_t>("adam-steps");
  t.greedy_rng_.set_state(header.field("greedy-rng"));

  const auto cal = header.words(header.field("calibrated"));
  if (cal.size() == 2) {
    t.calibrated_ = ClusterParams{header.parse<double>(cal[0], "calibrated eps"),
                                  header.parse<std::size_t>(cal[1], "calibrated min-pts")};
  } else if (cal.size() != 1 || cal[0] != "none") {
    throw ParseError("checkpoint: bad calibrated line");
  }

  const auto st = header.words(header.field("store"));
  if (st.size() != 4) throw ParseError("checkpoint: bad store line");
  const int first = header.parse<int>(st[0], "store first id");
  const int limit = header.parse<int>(st[1], "store id limit");
  const int next = header.parse<int>(st[2], "store next id");
  const auto count = header.parse<std::size_t>(st[3], "store size");
  std::map<std::int64_t, int> entries;
  for (std::size_t i = 0; i < count; ++i) {
    const auto w = header.words(header.line());
    if (w.size() != 2) throw ParseError("checkpoint: bad store entry");
    entries[header.parse<std::int64_t>(w[0], "sample id")] = header.parse<int>(w[1], "label");
  }
  if (first != t.store_.first_id() || limit != t.store_.id_limit())
    throw IncompatibilityError("checkpoint: pseudo-label range differs from the model's class head");
  try {
    t.store_ = PseudoLabelStore::restore(first, limit, next, std::move(entries));
  } catch (const ContractError& e) {
    throw ParseError(std::string("checkpoint: inconsistent pseudo-label store: ") + e.what());
  }

  auto params = t.model_.parameters();
  const auto n_params = header.number<std::size_t>("params");
  if (n_params != params.size())
    throw IncompatibilityError("checkpoint has " + std::to_string(n_params) + " parameters, model has " +
                               std::to_string(params.size()));
  for (auto* p : params) {
    const auto w = header.words(header.line());
    num::Shape shape;
    for (std::size_t i = 1; i < w.size(); ++i) shape.push_back(header.parse<std::size_t>(w[i], "shape"));
    if (w.empty() || w[0] != p->name || shape != p->var.shape())
      throw IncompatibilityError("checkpoint parameter '" + (w.empty() ? std::string() : w[0]) +
                                 "' does not match model parameter " + p->name + " " +
                                 num::shape_string(p->var.shape()));
  }
  if (header.line() != "end-header") throw ParseError("checkpoint: missing end-header");

  for (std::size_t i = 0; i < params.size(); ++i) {
    read_doubles(file, params[i]->value().data(), params[i]->name);
    read_doubles(file, t.adam_.first_moments()[i].data(), params[i]->name + " first moment");
    read_doubles(file, t.adam_.second_moments()[i].data(), params[i]->name + " second moment");
  }
  if (file.peek() != std::char_traits<char>::eof()) throw ParseError("checkpoint: trailing bytes");
  t.adam_.set_steps(adam_steps);
  return t;
}

}  // namespace ncd
