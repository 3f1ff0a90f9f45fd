#include "ncd/datagen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "ncd/errors.hpp"
#include "ncd/rng.hpp"

namespace ncd {

namespace {

constexpr const char* kMagic = "ncd-dataset v1";
constexpr const char* kMissing = "NA";

void validate_samples(const std::vector<ModalitySpec>& modalities,
                      const std::vector<MultiModalSample>& samples,
                      const std::vector<int>& hidden, int k_l, int k_u) {
  if (hidden.size() != samples.size())
    throw ContractError("dataset: hidden class count does not match sample count");
  for (std::size_t j = 0; j < modalities.size(); ++j) {
    if (modalities[j].id != j) throw ContractError("dataset: modality ids must be contiguous from 0");
    if (modalities[j].dim == 0) throw ContractError("dataset: modality dimension must be >= 1");
  }
  std::set<std::int64_t> ids;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (!ids.insert(s.id).second)
      throw ContractError("dataset: duplicate sample id " + std::to_string(s.id));
    if (s.modalities.size() != modalities.size())
      throw ContractError("dataset: sample " + std::to_string(s.id) + " has wrong modality count");
    if (s.present_count() == 0)
      throw ContractError("dataset: sample " + std::to_string(s.id) + " has no modalities");
    for (std::size_t j = 0; j < modalities.size(); ++j) {
      if (s.modalities[j] && s.modalities[j]->size() != modalities[j].dim)
        throw ContractError("dataset: sample " + std::to_string(s.id) + " modality " +
                            std::to_string(j) + " has wrong dimension");
    }
    if (hidden[i] < 0 || hidden[i] >= k_l + k_u)
      throw ContractError("dataset: sample " + std::to_string(s.id) + " hidden class out of range");
    if (s.label.kind == LabelKind::kGroundTruth && (s.label.label < 0 || s.label.label >= k_l))
      throw ContractError("dataset: sample " + std::to_string(s.id) +
                          " ground-truth class outside the labeled set");
    if (s.label.kind == LabelKind::kPseudo && s.label.label < k_l)
      throw ContractError("dataset: sample " + std::to_string(s.id) +
                          " pseudo-label collides with a labeled class");
  }
}

std::string format_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

}  // namespace

std::size_t MultiModalSample::present_count() const {
  return static_cast<std::size_t>(
      std::count_if(modalities.begin(), modalities.end(), [](const auto& m) { return m.has_value(); }));
}

Dataset::Dataset(std::vector<ModalitySpec> modalities, std::vector<MultiModalSample> samples,
                 std::vector<int> hidden_classes, int num_labeled_classes,
                 int num_novel_classes, std::uint64_t seed)
    : modalities_(std::move(modalities)),
      samples_(std::move(samples)),
      hidden_(std::move(hidden_classes)),
      num_labeled_classes_(num_labeled_classes),
      num_novel_classes_(num_novel_classes),
      seed_(seed) {
  validate_samples(modalities_, samples_, hidden_, num_labeled_classes_, num_novel_classes_);
}

TrainingView Dataset::training_view() const {
  return TrainingView{modalities_, samples_, num_labeled_classes_, num_novel_classes_};
}

Dataset Dataset::with_samples(std::vector<MultiModalSample> samples) const {
  return Dataset(modalities_, std::move(samples), hidden_, num_labeled_classes_,
                 num_novel_classes_, seed_);
}

void GeneratorConfig::validate() const {
  if (num_labeled_classes < 0 || num_novel_classes < 0)
    throw ConfigError("labeled-classes / novel-classes must be non-negative");
  if (num_labeled_classes + num_novel_classes == 0)
    throw ConfigError("labeled-classes + novel-classes must be at least 1");
  if (samples_per_class <= 0) throw ConfigError("samples-per-class must be at least 1");
  if (latent_dim == 0) throw ConfigError("latent-dim must be at least 1");
  if (modality_dims.empty()) throw ConfigError("modality-dims must list at least one modality");
  for (auto d : modality_dims)
    if (d == 0) throw ConfigError("modality-dims entries must be at least 1");
  if (!(sigma_between > 0.0)) throw ConfigError("sigma-between must be positive");
  if (!(sigma_within > 0.0)) throw ConfigError("sigma-within must be positive");
  if (!(sigma_observation >= 0.0)) throw ConfigError("sigma-observation must be non-negative");
}

Dataset generate_dataset(const GeneratorConfig& config) {
  config.validate();
  Rng rng(config.seed, "data");
  const int classes = config.num_labeled_classes + config.num_novel_classes;
  const std::size_t latent = config.latent_dim;

  std::vector<std::vector<double>> means(classes, std::vector<double>(latent));
  for (auto& mu : means)
    for (auto& v : mu) v = rng.normal(0.0, config.sigma_between);

  // Projection A_j has entries N(0, 1/latent) so observations keep the latent scale.
  const double proj_scale = 1.0 / std::sqrt(static_cast<double>(latent));
  std::vector<std::vector<double>> projections;
  for (auto dim : config.modality_dims) {
    std::vector<double> a(dim * latent);
    for (auto& v : a) v = rng.normal(0.0, proj_scale);
    projections.push_back(std::move(a));
  }

  std::vector<ModalitySpec> specs;
  for (std::size_t j = 0; j < config.modality_dims.size(); ++j)
    specs.push_back({j, config.modality_dims[j]});

  std::vector<MultiModalSample> samples;
  std::vector<int> hidden;
  std::vector<double> z(latent);
  std::int64_t next_id = 0;
  for (int c = 0; c < classes; ++c) {
    for (int k = 0; k < config.samples_per_class; ++k) {
      for (std::size_t i = 0; i < latent; ++i) z[i] = rng.normal(means[c][i], config.sigma_within);
      MultiModalSample s;
      s.id = next_id++;
      for (std::size_t j = 0; j < specs.size(); ++j) {
        std::vector<double> x(specs[j].dim);
        for (std::size_t r = 0; r < x.size(); ++r) {
          double acc = 0.0;
          for (std::size_t i = 0; i < latent; ++i) acc += projections[j][r * latent + i] * z[i];
          x[r] = acc + rng.normal(0.0, config.sigma_observation);
        }
        s.modalities.emplace_back(std::move(x));
      }
      s.label = c < config.num_labeled_classes ? LabelState::ground_truth(c) : LabelState::unlabeled();
      samples.push_back(std::move(s));
      hidden.push_back(c);
    }
  }
  return Dataset(std::move(specs), std::move(samples), std::move(hidden),
                 config.num_labeled_classes, config.num_novel_classes, config.seed);
}

Dataset drop_modalities(const Dataset& ds, double p, std::uint64_t seed) {
  if (!(p >= 0.0) || p >= 1.0) throw ConfigError("drop probability must be in [0, 1)");
  Rng rng(seed, "drop");
  std::vector<MultiModalSample> samples = ds.samples();
  for (auto& s : samples) {
    std::vector<ModalityVector> original = s.modalities;
    for (auto& m : s.modalities)
      if (rng.uniform() < p) m.reset();
    if (s.present_count() == 0) {
      std::vector<std::size_t> candidates;
      for (std::size_t j = 0; j < original.size(); ++j)
        if (original[j]) candidates.push_back(j);
      const std::size_t keep = candidates[rng.below(candidates.size())];
      s.modalities[keep] = original[keep];
    }
  }
  return ds.with_samples(std::move(samples));
}

Dataset remove_modality(const Dataset& ds, std::size_t modality) {
  if (modality >= ds.modalities().size())
    throw ConfigError("drop-modality: unknown modality id " + std::to_string(modality));
  std::vector<MultiModalSample> samples = ds.samples();
  for (auto& s : samples)
    if (s.modalities[modality] && s.present_count() > 1) s.modalities[modality].reset();
  return ds.with_samples(std::move(samples));
}

QueryTargetSplit split_query_target(const Dataset& ds, int per_class_queries,
                                    std::uint64_t seed, std::span<const int> classes) {
  if (per_class_queries < 0) throw SplitError("per-class query count must be non-negative");
  std::map<int, std::vector<std::size_t>> members;
  const auto& hidden = ds.hidden_classes();
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    if (classes.empty() || std::find(classes.begin(), classes.end(), hidden[i]) != classes.end())
      members[hidden[i]].push_back(i);
  }
  Rng rng(seed, "split");
  QueryTargetSplit split;
  for (auto& [cls, idx] : members) {
    if (static_cast<int>(idx.size()) <= per_class_queries)
      throw SplitError("class " + std::to_string(cls) + " has " + std::to_string(idx.size()) +
                       " samples; needs more than " + std::to_string(per_class_queries));
    rng.shuffle(idx.begin(), idx.end());
    split.queries.insert(split.queries.end(), idx.begin(), idx.begin() + per_class_queries);
    split.targets.insert(split.targets.end(), idx.begin() + per_class_queries, idx.end());
  }
  std::sort(split.queries.begin(), split.queries.end());
  std::sort(split.targets.begin(), split.targets.end());
  return split;
}

std::string serialize_dataset(const Dataset& ds) {
  std::ostringstream out;
  out << kMagic << '\n';
  out << "seed " << ds.seed() << '\n';
  out << "classes " << ds.num_labeled_classes() << ' ' << ds.num_novel_classes() << '\n';
  out << "modalities " << ds.modalities().size();
  for (const auto& m : ds.modalities()) out << ' ' << m.dim;
  out << '\n';
  out << "samples " << ds.size() << '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& s = ds.samples()[i];
    const char kind = s.label.kind == LabelKind::kGroundTruth ? 'G'
                      : s.label.kind == LabelKind::kPseudo    ? 'P'
                                                              : 'U';
    out << s.id << ' ' << ds.hidden_classes()[i] << ' ' << kind << ' ' << s.label.label;
    for (std::size_t j = 0; j < s.modalities.size(); ++j) {
      out << " m" << j;
      if (!s.modalities[j]) {
        out << ' ' << kMissing;
      } else {
        for (double v : *s.modalities[j]) out << ' ' << format_double(v);
      }
    }
    out << '\n';
  }
  out << "end\n";
  return out.str();
}

namespace {

class LineReader {
 public:
  explicit LineReader(const std::string& text) : in_(text) {}

  std::istringstream next(const char* what) {
    std::string line;
    if (!std::getline(in_, line))
      throw ParseError("dataset: unexpected end of file at line " + std::to_string(line_ + 1) +
                       " (expected " + what + ")");
    ++line_;
    return std::istringstream(line);
  }

  std::size_t line() const { return line_; }

  [[noreturn]] void fail(const std::string& message) const {
    throw ParseError("dataset: line " + std::to_string(line_) + ": " + message);
  }

 private:
  std::istringstream in_;
  std::size_t line_ = 0;
};

template <typename T>
T read_value(std::istringstream& in, const LineReader& reader, const char* what) {
  std::string token;
  if (!(in >> token)) reader.fail(std::string("missing ") + what);
  T value{};
  auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
  if (ec != std::errc() || ptr != token.data() + token.size())
    reader.fail(std::string("malformed ") + what + " '" + token + "'");
  return value;
}

void expect_keyword(std::istringstream& in, const LineReader& reader, const char* keyword) {
  std::string token;
  if (!(in >> token) || token != keyword) reader.fail(std::string("expected '") + keyword + "'");
}

}  // namespace

Dataset parse_dataset(const std::string& text) {
  LineReader reader(text);
  {
    auto line = reader.next("header");
    std::string magic;
    std::getline(line, magic);
    if (magic != kMagic) reader.fail("not an ncd dataset file");
  }
  auto seed_line = reader.next("seed");
  expect_keyword(seed_line, reader, "seed");
  const auto seed = read_value<std::uint64_t>(seed_line, reader, "seed");

  auto class_line = reader.next("classes");
  expect_keyword(class_line, reader, "classes");
  const int k_l = read_value<int>(class_line, reader, "labeled class count");
  const int k_u = read_value<int>(class_line, reader, "novel class count");

  auto mod_line = reader.next("modalities");
  expect_keyword(mod_line, reader, "modalities");
  const auto m = read_value<std::size_t>(mod_line, reader, "modality count");
  std::vector<ModalitySpec> specs;
  for (std::size_t j = 0; j < m; ++j)
    specs.push_back({j, read_value<std::size_t>(mod_line, reader, "modality dimension")});

  auto count_line = reader.next("samples");
  expect_keyword(count_line, reader, "samples");
  const auto count = read_value<std::size_t>(count_line, reader, "sample count");

  std::vector<MultiModalSample> samples;
  std::vector<int> hidden;
  samples.reserve(count);
  hidden.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    auto line = reader.next("sample record");
    MultiModalSample s;
    s.id = read_value<std::int64_t>(line, reader, "sample id");
    hidden.push_back(read_value<int>(line, reader, "hidden class"));
    std::string kind;
    if (!(line >> kind)) reader.fail("missing label kind");
    const int label = read_value<int>(line, reader, "label");
    if (kind == "G") s.label = LabelState::ground_truth(label);
    else if (kind == "P") s.label = LabelState::pseudo(label);
    else if (kind == "U") s.label = LabelState::unlabeled();
    else reader.fail("unknown label kind '" + kind + "'");

    s.modalities.resize(m);
    std::string token;
    std::size_t expected = 0;
    while (line >> token) {
      if (token.size() < 2 || token[0] != 'm') reader.fail("expected modality tag, got '" + token + "'");
      std::size_t j = 0;
      auto [ptr, ec] = std::from_chars(token.data() + 1, token.data() + token.size(), j);
      if (ec != std::errc() || ptr != token.data() + token.size())
        reader.fail("malformed modality tag '" + token + "'");
      if (j >= m) reader.fail("unknown modality id " + std::to_string(j));
      if (j != expected) reader.fail("modality id " + std::to_string(j) + " out of order");
      ++expected;
      const auto pos = line.tellg();
      std::string probe;
      line >> probe;
      if (probe == kMissing) continue;
      line.clear();
      line.seekg(pos);
      std::vector<double> values(specs[j].dim);
      for (auto& v : values) v = read_value<double>(line, reader, "feature value");
      s.modalities[j] = std::move(values);
    }
    if (expected != m) reader.fail("sample record lists " + std::to_string(expected) +
                                   " of " + std::to_string(m) + " modalities");
    samples.push_back(std::move(s));
  }
  auto end_line = reader.next("end marker");
  expect_keyword(end_line, reader, "end");

  try {
    return Dataset(std::move(specs), std::move(samples), std::move(hidden), k_l, k_u, seed);
  } catch (const ContractError& e) {
    throw ParseError(std::string("dataset: invalid content: ") + e.what());
  }
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  const std::string text = serialize_dataset(ds);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_dataset(buffer.str());
}

std::vector<std::vector<std::size_t>> batch_iterator(std::size_t num_samples,
                                                     std::size_t batch_size,
                                                     std::uint64_t seed, int epoch) {
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  if (num_samples == 0) throw ContractError("batch_iterator: empty dataset");
  std::vector<std::size_t> order(num_samples);
  for (std::size_t i = 0; i < num_samples; ++i) order[i] = i;
  Rng rng(seed, "batching/" + std::to_string(epoch));
  rng.shuffle(order.begin(), order.end());
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < num_samples; start += batch_size) {
    const std::size_t end = std::min(num_samples, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

double nearest_centroid_accuracy(const Dataset& ds) {
  if (ds.size() == 0) return 0.0;
  std::size_t width = 0;
  for (const auto& m : ds.modalities()) width += m.dim;
  auto flatten = [&](const MultiModalSample& s) {
    std::vector<double> v;
    v.reserve(width);
    for (std::size_t j = 0; j < s.modalities.size(); ++j) {
      if (s.modalities[j]) v.insert(v.end(), s.modalities[j]->begin(), s.modalities[j]->end());
      else v.insert(v.end(), ds.modalities()[j].dim, 0.0);
    }
    return v;
  };
  std::map<int, std::pair<std::vector<double>, std::size_t>> centroids;
  std::vector<std::vector<double>> flat;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    flat.push_back(flatten(ds.samples()[i]));
    auto& [sum, n] = centroids[ds.hidden_classes()[i]];
    if (sum.empty()) sum.assign(width, 0.0);
    for (std::size_t k = 0; k < width; ++k) sum[k] += flat.back()[k];
    ++n;
  }
  for (auto& [cls, entry] : centroids)
    for (auto& v : entry.first) v /= static_cast<double>(entry.second);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (const auto& [cls, entry] : centroids) {
      double d = 0.0;
      for (std::size_t k = 0; k < width; ++k) {
        const double diff = flat[i][k] - entry.first[k];
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = cls;
      }
    }
    if (best == ds.hidden_classes()[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

}  // namespace ncd
