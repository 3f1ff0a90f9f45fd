#include "cli.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "ncd/errors.hpp"
#include "ncd/evalkit.hpp"
#include "ncd/pipeline.hpp"
#include "ncd/run_config.hpp"
#include "ncd/stlclu.hpp"

namespace ncd::cli {

namespace fs = std::filesystem;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIncompatible = 4;
constexpr int kExitIo = 5;

// Value following `flag` in argv, accepting both "--flag v" and "--flag=v".
std::optional<std::string> prescan(int argc, char** argv, const std::string& flag) {
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == flag && i + 1 < argc) return std::string(argv[i + 1]);
    if (arg.rfind(flag + "=", 0) == 0) return arg.substr(flag.size() + 1);
  }
  return std::nullopt;
}

// Options shared by generate/train/ablate that map onto RunConfig fields.
void add_data_options(CLI::App& app, RunConfig& cfg) {
  app.add_option("--labeled-classes", cfg.data.num_labeled_classes, "Labeled classes K_l");
  app.add_option("--novel-classes", cfg.data.num_novel_classes, "Novel classes K_u");
  app.add_option("--samples-per-class", cfg.data.samples_per_class, "Samples per class");
  app.add_option("--latent-dim", cfg.data.latent_dim, "Latent dimension of class means");
  app.add_option("--modality-dims", cfg.data.modality_dims, "Feature width of each modality")
      ->delimiter(',');
  app.add_option("--sigma-between", cfg.data.sigma_between, "Spread of class means");
  app.add_option("--sigma-within", cfg.data.sigma_within, "Spread of samples around their class mean");
  app.add_option("--sigma-observation", cfg.data.sigma_observation, "Observation noise per modality");
}

void add_train_options(CLI::App& app, RunConfig& cfg) {
  auto& t = cfg.train;
  app.add_option("--dataset", cfg.dataset, "Dataset file; generated from the config when empty");
  app.add_option("--pretrain-epochs", t.pretrain_epochs, "Pre-training epochs on labeled data");
  app.add_option("--train-epochs", t.train_epochs, "Training epochs");
  app.add_option("--batch-size", t.batch_size, "Minibatch size");
  app.add_option("--learning-rate,--lr", t.learning_rate, "Initial learning rate");
  app.add_option("--weight-decay", t.weight_decay, "Decoupled weight decay");
  app.add_option("--eps-min", t.eps_min, "Exploration floor");
  app.add_option("--tau", t.tau, "Contrastive temperature");
  app.add_option("--feature-dim", t.feature_dim, "Fused feature width");
  app.add_option("--heads", t.heads, "Attention heads");
  app.add_option("--pseudo-slots", t.pseudo_slots, "Class-head outputs for pseudo classes (0: four times the novel count)");
  app.add_option("--eps-growth", t.schedule.eps_growth, "Per-epoch DBSCAN radius growth");
  app.add_option("--min-pts-decrement", t.schedule.min_pts_decrement, "Per-epoch DBSCAN min-pts decrement");
  app.add_option("--min-pts-floor", t.schedule.min_pts_floor, "Lowest DBSCAN min-pts");
  app.add_flag("--cluster-cosine", t.cluster_cosine, "Cluster L2-normalized actions");
  app.add_flag("!--stale-actions", t.refresh_actions,
               "Cluster the actions emitted during the epoch instead of recomputing them");
  app.add_flag_callback("--no-td", [&t] { t.losses.td = false; }, "Disable the temporal-difference loss");
  app.add_flag_callback("--no-ce", [&t] { t.losses.ce = false; }, "Disable the cross-entropy loss");
  app.add_flag_callback("--no-ss", [&t] { t.losses.ss = false; }, "Disable the self-supervised loss");
  app.add_flag_callback("--no-stlclu", [&t] { t.stlclu = false; }, "Disable pseudo-labeling");
  app.add_option("--queries-per-class", cfg.eval.queries_per_class, "Retrieval queries per novel class");
  app.add_option("--drop-probability", cfg.eval.drop_probability, "Probability of dropping each modality");
  app.add_option("--eval-every", cfg.eval.eval_every, "Epochs between evaluations (0: last only)");
}

void add_common(CLI::App& app, RunConfig& cfg, std::string& config_path,
                std::vector<std::string>& sets) {
  app.add_option("--config", config_path, "Key=value config file (flags override it)");
  app.add_option("--seed", [&cfg](const CLI::results_t& r) {
    std::uint64_t seed = 0;
    const auto& s = r.front();
    auto res = std::from_chars(s.data(), s.data() + s.size(), seed);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) return false;
    cfg.set_seed(seed);
    return true;
  }, "Seed for every random stream")->default_str(std::to_string(cfg.seed()));
  app.add_option("--set", sets, "Extra key=value settings, applied after the other flags");
}

void apply_sets(RunConfig& cfg, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("cannot write " + path.string());
}

struct Embeddings {
  std::vector<std::int64_t> ids;
  std::vector<Point> points;
  std::vector<int> labels;  // -1 when unlabeled
  bool has_labels = false;
};

Embeddings read_embeddings(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  Embeddings e;
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": empty embeddings file");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) header.push_back(cell);
  }
  if (header.size() < 2 || header[0] != "id")
    throw ParseError(path.string() + ":1: expected a header starting with 'id'");
  e.has_labels = header.back() == "label";
  const std::size_t width = header.size() - 1 - (e.has_labels ? 1 : 0);
  if (width == 0) throw ParseError(path.string() + ":1: no coordinate columns");
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != header.size())
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                       std::to_string(header.size()) + " columns, got " + std::to_string(cells.size()));
    auto number = [&](const std::string& s, auto& value) {
      auto res = std::from_chars(s.data(), s.data() + s.size(), value);
      if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw ParseError(path.string() + ":" + std::to_string(line_no) + ": bad number '" + s + "'");
    };
    std::int64_t id = 0;
    number(cells[0], id);
    Point p(width);
    for (std::size_t k = 0; k < width; ++k) number(cells[1 + k], p[k]);
    int label = -1;
    if (e.has_labels && !cells.back().empty()) number(cells.back(), label);
    e.ids.push_back(id);
    e.points.push_back(std::move(p));
    e.labels.push_back(label);
  }
  return e;
}

int cmd_cluster(const fs::path& input, const fs::path& output, std::optional<double> eps,
                std::optional<std::size_t> min_pts, int epochs, const RelaxationSchedule& schedule,
                std::ostream& out) {
  if (epochs < 1) throw ConfigError("--epochs must be at least 1");
  schedule.validate();
  const Embeddings e = read_embeddings(input);
  ClusterParams base;
  if (eps && min_pts) {
    base = {*eps, *min_pts};
  } else {
    std::vector<Point> labeled;
    std::vector<int> labels;
    for (std::size_t i = 0; i < e.points.size(); ++i)
      if (e.labels[i] >= 0) {
        labeled.push_back(e.points[i]);
        labels.push_back(e.labels[i]);
      }
    if (labeled.empty()) throw ConfigError("cluster: give --eps and --min-pts or a labeled embeddings file");
    base = calibrate(labeled, labels).params;
    if (eps) base.eps = *eps;
    if (min_pts) base.min_pts = *min_pts;
  }
  base.validate();

  std::ofstream assignments(output);
  if (!assignments) throw IoError("cannot open " + output.string() + " for writing");
  fs::path stats_path = output;
  stats_path.replace_extension();
  stats_path += "_stats.csv";
  std::ofstream stats(stats_path);
  if (!stats) throw IoError("cannot open " + stats_path.string() + " for writing");
  assignments << "epoch,id,cluster\n";
  stats << "epoch,eps,min_pts,clusters,noise\n";
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const ClusterParams params = relax(base, schedule, epoch);
    const auto labels = dbscan(e.points, params);
    int clusters = 0;
    std::size_t noise = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      assignments << epoch + 1 << ',' << e.ids[i] << ',' << labels[i] << '\n';
      clusters = std::max(clusters, labels[i] + 1);
      noise += labels[i] == kNoise;
    }
    stats << epoch + 1 << ',' << format_number(params.eps) << ',' << params.min_pts << ',' << clusters
          << ',' << noise << '\n';
    out << "epoch " << epoch + 1 << ": eps " << format_number(params.eps) << " min-pts " << params.min_pts
        << " clusters " << clusters << " noise " << noise << '\n';
  }
  if (!assignments || !stats) throw IoError("failed writing cluster output");
  return 0;
}

}  // namespace

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-agent novel class discovery on multi-modal data", "ncd"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  RunConfig cfg;
  std::string config_path;
  std::vector<std::string> sets;
  try {
    // Config-file values become the defaults that flags override.
    if (auto path = prescan(argc, argv, "--config")) {
      cfg = RunConfig::load(*path);
    } else if (auto resume = prescan(argc, argv, "--resume")) {
      const fs::path snapshot = fs::path(*resume).parent_path() / "config.txt";
      if (fs::exists(snapshot)) cfg = RunConfig::load(snapshot);
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  }

  // generate
  auto* gen = app.add_subcommand("generate", "Generate a synthetic multi-modal dataset");
  std::string gen_out;
  add_common(*gen, cfg, config_path, sets);
  add_data_options(*gen, cfg);
  gen->add_option("--out", gen_out, "Dataset file to write")->required();

  // train
  auto* train = app.add_subcommand("train", "Pre-train and train, writing metrics and a checkpoint");
  std::string out_root, run_dir, resume;
  std::optional<int> max_epochs;
  bool quiet = false;
  add_common(*train, cfg, config_path, sets);
  add_data_options(*train, cfg);
  add_train_options(*train, cfg);
  train->add_option("--out-root", out_root, "Root for run directories (default $NCD_OUTPUT_ROOT or ./runs)");
  train->add_option("--run-dir", run_dir, "Exact run directory, overriding the digest-named one");
  train->add_option("--resume", resume, "Checkpoint to continue from");
  train->add_option("--max-epochs", max_epochs, "Stop after this many epochs (resumable)");
  train->add_flag("--quiet", quiet, "No per-epoch progress lines");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  std::string checkpoint, eval_dataset, eval_out;
  std::optional<std::size_t> drop_modality;
  std::optional<int> queries_per_class;
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--dataset", eval_dataset, "Dataset file (default: the run's config snapshot)");
  eval->add_option("--drop-modality", drop_modality, "Remove this modality before evaluating");
  eval->add_option("--queries-per-class", queries_per_class, "Retrieval queries per novel class (default: the run's setting)");
  eval->add_option("--out", eval_out, "Output directory (default: <checkpoint dir>/eval)");

  // cluster
  auto* cluster = app.add_subcommand("cluster", "Run strict-to-loose DBSCAN on an embeddings CSV");
  std::string cluster_in, cluster_out;
  std::optional<double> cluster_eps;
  std::optional<std::size_t> cluster_min_pts;
  int cluster_epochs = 1;
  RelaxationSchedule schedule;
  cluster->add_option("--input", cluster_in, "CSV with id, coordinates and an optional label column")->required();
  cluster->add_option("--out", cluster_out, "Assignments CSV")->required();
  cluster->add_option("--eps", cluster_eps, "Radius (calibrated on labeled rows when omitted)");
  cluster->add_option("--min-pts", cluster_min_pts, "Density threshold, self included");
  cluster->add_option("--epochs", cluster_epochs, "Number of progressively looser snapshots");
  cluster->add_option("--eps-growth", schedule.eps_growth, "Per-epoch radius growth");
  cluster->add_option("--min-pts-decrement", schedule.min_pts_decrement, "Per-epoch min-pts decrement");
  cluster->add_option("--min-pts-floor", schedule.min_pts_floor, "Lowest min-pts");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Train the loss/pseudo-labeling component grid over seeds");
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string ablate_out = "ablation.csv";
  add_common(*ablate, cfg, config_path, sets);
  add_data_options(*ablate, cfg);
  add_train_options(*ablate, cfg);
  ablate->add_option("--seeds", seeds, "Seeds to average over")->delimiter(',');
  ablate->add_option("--out-root", out_root, "Root for run directories");
  ablate->add_option("--summary", ablate_out, "Summary CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    apply_sets(cfg, sets);
    if (*gen) {
      cfg.data.seed = cfg.seed();
      cfg.data.validate();
      const Dataset ds = generate_dataset(cfg.data);
      save_dataset(ds, gen_out);
      nlohmann::json manifest;
      manifest["tool_version"] = kToolVersion;
      manifest["seed"] = cfg.seed();
      manifest["config_digest"] = run_digest(cfg);
      manifest["artifacts"] = {fs::path(gen_out).filename().string()};
      write_json(gen_out + ".manifest.json", manifest);
      out << "wrote " << ds.size() << " samples to " << gen_out << '\n';
      return 0;
    }
    if (*train) {
      RunOptions options;
      options.max_epochs = max_epochs;
      if (!quiet) options.log = &out;
      if (!resume.empty()) {
        options.resume = true;
        options.run_dir = fs::path(resume).parent_path();
        if (fs::path(resume).filename() != "checkpoint.bin")
          throw ConfigError("--resume expects the checkpoint.bin inside a run directory");
      } else if (!run_dir.empty()) {
        options.run_dir = run_dir;
      } else {
        options.run_dir = default_run_dir(cfg, out_root.empty() ? std::nullopt
                                                                : std::optional<fs::path>(out_root));
      }
      const auto summary = run_experiment(cfg, options);
      out << "run directory: " << summary.run_dir.string() << '\n';
      if (summary.final_report) {
        const auto& r = *summary.final_report;
        out << "map " << format_number(r.retrieval.map) << " nn " << format_number(r.retrieval.nn)
            << " ndcg " << format_number(r.retrieval.ndcg) << " anmrr " << format_number(r.retrieval.anmrr)
            << " ncd-accuracy " << format_number(r.ncd_accuracy) << '\n';
      }
      return 0;
    }
    if (*eval) {
      const fs::path ckpt_path = checkpoint;
      const fs::path snapshot = ckpt_path.parent_path() / "config.txt";
      RunConfig run_cfg = fs::exists(snapshot) ? RunConfig::load(snapshot) : RunConfig{};
      if (!eval_dataset.empty()) {
        run_cfg.dataset = eval_dataset;
        run_cfg.eval.drop_probability = 0.0;
      }
      if (queries_per_class) run_cfg.eval.queries_per_class = *queries_per_class;
      if (drop_modality) run_cfg.eval.drop_modality = drop_modality;
      const Dataset ds = prepare_dataset(run_cfg);
      Trainer trainer = Trainer::load_checkpoint(ckpt_path, ds.training_view());
      const auto report = evaluate_model(trainer.model(), trainer.store(), ds, run_cfg.eval, run_cfg.seed());
      const fs::path dir = eval_out.empty() ? ckpt_path.parent_path() / "eval" : fs::path(eval_out);
      const auto written = write_eval_artifacts(report, dir);
      nlohmann::json manifest;
      manifest["tool_version"] = kToolVersion;
      manifest["checkpoint"] = ckpt_path.string();
      manifest["drop_modality"] =
          run_cfg.eval.drop_modality ? nlohmann::json(*run_cfg.eval.drop_modality) : nlohmann::json();
      for (const auto& p : written) manifest["artifacts"].push_back(p.filename().string());
      manifest["artifacts"].push_back("manifest.json");
      write_json(dir / "manifest.json", manifest);
      out << "map " << format_number(report.retrieval.map) << " nn " << format_number(report.retrieval.nn)
          << " ndcg " << format_number(report.retrieval.ndcg) << " anmrr "
          << format_number(report.retrieval.anmrr) << " ncd-accuracy " << format_number(report.ncd_accuracy)
          << '\n';
      return 0;
    }
    if (*cluster) return cmd_cluster(cluster_in, cluster_out, cluster_eps, cluster_min_pts, cluster_epochs, schedule, out);
    if (*ablate) {
      struct Variant {
        const char* name;
        bool td, ce, ss, stlclu;
      };
      static constexpr Variant kGrid[] = {
          {"ce", false, true, false, false},         {"ce+td", true, true, false, false},
          {"ce+ss", false, true, true, false},       {"ce+td+ss", true, true, true, false},
          {"ce+stlclu", false, true, false, true},   {"ce+td+ss+stlclu", true, true, true, true},
      };
      std::ofstream summary(ablate_out);
      if (!summary) throw IoError("cannot open " + ablate_out + " for writing");
      summary << "variant,seed,map,nn,ndcg,anmrr,ncd_accuracy\n";
      for (const auto& v : kGrid) {
        for (auto seed : seeds) {
          RunConfig run_cfg = cfg;
          run_cfg.set_seed(seed);
          run_cfg.train.losses = {v.td, v.ce, v.ss};
          run_cfg.train.stlclu = v.stlclu;
          RunOptions options;
          options.run_dir = default_run_dir(run_cfg, out_root.empty() ? std::nullopt
                                                                      : std::optional<fs::path>(out_root));
          const auto result = run_experiment(run_cfg, options);
          const auto& r = *result.final_report;
          summary << v.name << ',' << seed << ',' << format_number(r.retrieval.map) << ','
                  << format_number(r.retrieval.nn) << ',' << format_number(r.retrieval.ndcg) << ','
                  << format_number(r.retrieval.anmrr) << ',' << format_number(r.ncd_accuracy) << '\n';
          out << v.name << " seed " << seed << ": map " << format_number(r.retrieval.map) << '\n';
        }
      }
      return 0;
    }
  } catch (const NonFiniteError& e) {
    err << "numerical abort: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const IncompatibilityError& e) {
    err << "incompatible: " << e.what() << '\n';
    return kExitIncompatible;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << '\n';
    return kExitIo;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DimensionError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "i/o error: " << e.what() << '\n';
    return kExitIo;
  }
  return 0;
}

}  // namespace ncd::cli
