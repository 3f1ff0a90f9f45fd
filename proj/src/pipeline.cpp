#include "ncd/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "ncd/errors.hpp"

namespace ncd {

namespace fs = std::filesystem;

namespace {

std::string fmt(double x) { return format_number(x); }

// Keeps the first `lines` lines of a file (header included).
void truncate_lines(const fs::path& path, std::size_t lines) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot reopen " + path.string() + " for resume");
  std::string kept, line;
  for (std::size_t i = 0; i < lines && std::getline(in, line); ++i) kept += line + '\n';
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << kept;
  if (!out) throw IoError("failed rewriting " + path.string());
}

std::ofstream open_csv(const fs::path& path, bool append, const char* header) {
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  if (!append) out << header << '\n';
  return out;
}

std::string eval_cells(const std::optional<EvalSnapshot>& eval) {
  if (!eval) return ",";
  return fmt(eval->ncd_accuracy) + "," + fmt(eval->map);
}

}  // namespace

Dataset prepare_dataset(const RunConfig& config) {
  Dataset ds = config.dataset.empty() ? generate_dataset(config.data) : load_dataset(config.dataset);
  if (config.eval.drop_probability > 0.0)
    ds = drop_modalities(ds, config.eval.drop_probability, config.seed());
  return ds;
}

EvalReport evaluate_model(const Model& model, const PseudoLabelStore& store, const Dataset& full,
                          const EvalOptions& options, std::uint64_t seed) {
  const Dataset ds = options.drop_modality ? remove_modality(full, *options.drop_modality) : full;
  std::vector<int> novel;
  for (int c = 0; c < ds.num_novel_classes(); ++c) novel.push_back(ds.num_labeled_classes() + c);
  const auto split = split_query_target(ds, options.queries_per_class, seed, novel);
  const auto& samples = ds.samples();
  const auto& hidden = ds.hidden_classes();

  auto labeled = [&](const std::vector<std::size_t>& indices) {
    LabeledFeatures f;
    f.features = compute_actions(model, samples, ds.modalities(), indices);
    for (auto i : indices) {
      f.ids.push_back(samples[i].id);
      f.classes.push_back(hidden[i]);
    }
    return f;
  };
  const LabeledFeatures queries = labeled(split.queries);
  const LabeledFeatures targets = labeled(split.targets);
  const auto run = build_run(queries, targets);

  EvalReport report;
  report.retrieval = retrieval_metrics(run);
  report.pr = pr_curve(run);
  report.queries = split.queries.size();
  report.targets = split.targets.size();

  std::vector<int> predicted, truth;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].label.kind == LabelKind::kGroundTruth) continue;
    const auto p = store.get(samples[i].id);
    predicted.push_back(p ? *p : -1);
    truth.push_back(hidden[i]);
  }
  report.ncd_accuracy = truth.empty() ? 0.0 : ncd_accuracy(predicted, truth);

  const std::size_t d = queries.features.cols();
  report.embeddings.features = num::Tensor({report.queries + report.targets, d});
  auto out = report.embeddings.features.data();
  std::copy(queries.features.data().begin(), queries.features.data().end(), out.begin());
  std::copy(targets.features.data().begin(), targets.features.data().end(),
            out.subspan(queries.features.size()).begin());
  for (const auto* f : {&queries, &targets}) {
    report.embeddings.ids.insert(report.embeddings.ids.end(), f->ids.begin(), f->ids.end());
    report.embeddings.classes.insert(report.embeddings.classes.end(), f->classes.begin(), f->classes.end());
  }
  return report;
}

std::vector<fs::path> write_eval_artifacts(const EvalReport& report, const fs::path& dir) {
  fs::create_directories(dir);
  std::vector<fs::path> written;
  {
    const auto path = dir / "metrics.csv";
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "map,nn,ndcg,anmrr,ncd_accuracy,queries,targets\n"
        << fmt(report.retrieval.map) << ',' << fmt(report.retrieval.nn) << ','
        << fmt(report.retrieval.ndcg) << ',' << fmt(report.retrieval.anmrr) << ','
        << fmt(report.ncd_accuracy) << ',' << report.queries << ',' << report.targets << '\n';
    if (!out) throw IoError("failed writing " + path.string());
    written.push_back(path);
  }
  write_pr_curve_csv(dir / "pr_curve.csv", report.pr);
  written.push_back(dir / "pr_curve.csv");
  const auto& e = report.embeddings;
  export_embeddings(dir / "embeddings.csv", e.ids, e.features, e.classes);
  written.push_back(dir / "embeddings.csv");
  if (e.ids.size() >= 2) {
    const auto pca = pca_project(e.features, 2);
    export_embeddings(dir / "embeddings_pca.csv", e.ids, pca.projection, e.classes);
    written.push_back(dir / "embeddings_pca.csv");
  }
  return written;
}

std::string run_digest(const RunConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(config.to_text())));
  return buf;
}

fs::path default_run_dir(const RunConfig& config, const std::optional<fs::path>& root) {
  fs::path base;
  if (root) base = *root;
  else if (const char* env = std::getenv("NCD_OUTPUT_ROOT"); env && *env) base = env;
  else base = "runs";
  return base / (run_digest(config).substr(0, 8) + "-s" + std::to_string(config.seed()));
}

RunSummary run_experiment(const RunConfig& config, const RunOptions& options) {
  using Clock = std::chrono::steady_clock;
  const auto started = Clock::now();
  config.validate();

  RunSummary summary;
  summary.run_dir = options.run_dir;
  const fs::path dir = options.run_dir;
  fs::create_directories(dir);
  const fs::path ckpt = dir / "checkpoint.bin";
  const fs::path epochs_csv = dir / "epochs.csv";
  const fs::path iterations_csv = dir / "iterations.csv";
  const fs::path stlclu_csv = dir / "stlclu.csv";
  const fs::path config_txt = dir / "config.txt";

  const Dataset ds = prepare_dataset(config);
  const TrainingView view = ds.training_view();

  std::optional<Trainer> trainer;
  if (options.resume) {
    if (!fs::exists(ckpt)) throw IoError("no checkpoint to resume at " + ckpt.string());
    trainer.emplace(Trainer::load_checkpoint(ckpt, view, &config.train));
    const std::size_t done = static_cast<std::size_t>(trainer->completed_pretrain_epochs() +
                                                      trainer->completed_train_epochs());
    truncate_lines(epochs_csv, 1 + done);
    truncate_lines(iterations_csv, 1 + static_cast<std::size_t>(trainer->iterations_done()));
    truncate_lines(stlclu_csv,
                   1 + (config.train.stlclu ? static_cast<std::size_t>(trainer->completed_train_epochs()) : 0));
  } else {
    trainer.emplace(config.train, view);
    std::ofstream out(config_txt);
    out << config.to_text();
    if (!out) throw IoError("cannot write " + config_txt.string());
  }

  auto epochs_out = open_csv(epochs_csv, options.resume,
                             "phase,epoch,l_td,l_ce,l_ss,loss,reward_mean,epsilon,lr,coverage,ncd_accuracy,map");
  auto iter_out = open_csv(iterations_csv, options.resume,
                           "iteration,phase,epoch,epsilon,lr,l_td,l_ce,l_ss,loss,reward_mean,batch_size");
  auto stl_out = open_csv(stlclu_csv, options.resume,
                          "epoch,eps,min_pts,clusters,new_labels,skipped_clusters,coverage");

  const int total_epochs = config.train.pretrain_epochs + config.train.train_epochs;
  TrainCallbacks callbacks;
  callbacks.on_iteration = [&](const IterationRecord& r) {
    iter_out << r.iteration << ',' << phase_name(r.phase) << ',' << r.epoch << ',' << fmt(r.epsilon) << ','
             << fmt(r.lr) << ',' << fmt(r.losses.l_td) << ',' << fmt(r.losses.l_ce) << ','
             << fmt(r.losses.l_ss) << ',' << fmt(r.losses.total) << ',' << fmt(r.reward_mean) << ','
             << r.batch_size << '\n';
  };
  int epochs_done = trainer->completed_pretrain_epochs() + trainer->completed_train_epochs();
  callbacks.evaluate = [&](const Model& model, const PseudoLabelStore& store) {
    const int global = epochs_done + 1;
    EvalSnapshot snap;
    const bool due = config.eval.eval_every > 0 ? global % config.eval.eval_every == 0 : false;
    if (!due && global != total_epochs) return std::optional<EvalSnapshot>{};
    const auto report = evaluate_model(model, store, ds, config.eval, config.seed());
    snap.ncd_accuracy = report.ncd_accuracy;
    snap.map = report.retrieval.map;
    return std::optional<EvalSnapshot>{snap};
  };

  int ran = 0;
  while (!trainer->finished() && (!options.max_epochs || ran < *options.max_epochs)) {
    EpochRecord rec = trainer->run_epoch(callbacks);
    ++epochs_done;
    ++ran;
    const auto& l = rec.mean_losses;
    epochs_out << phase_name(rec.phase) << ',' << rec.epoch << ',' << fmt(l.l_td) << ',' << fmt(l.l_ce) << ','
               << fmt(l.l_ss) << ',' << fmt(l.total) << ',' << fmt(rec.reward_mean) << ','
               << fmt(rec.epsilon) << ',' << fmt(rec.lr) << ',' << fmt(rec.coverage) << ','
               << eval_cells(rec.eval) << '\n';
    if (rec.stlclu) {
      const auto& s = *rec.stlclu;
      stl_out << s.epoch << ',' << fmt(s.eps) << ',' << s.min_pts << ',' << s.clusters << ','
              << s.new_labels << ',' << s.skipped_clusters << ',' << fmt(s.coverage) << '\n';
    }
    epochs_out.flush();
    iter_out.flush();
    stl_out.flush();
    if (!epochs_out || !iter_out || !stl_out) throw IoError("failed writing metrics in " + dir.string());
    trainer->save_checkpoint(ckpt);
    if (options.log) {
      *options.log << phase_name(rec.phase) << " epoch " << rec.epoch << " loss " << fmt(l.total)
                   << " coverage " << fmt(rec.coverage);
      if (rec.eval) *options.log << " ncd-acc " << fmt(rec.eval->ncd_accuracy) << " map " << fmt(rec.eval->map);
      *options.log << '\n';
    }
    summary.epochs.push_back(std::move(rec));
  }
  summary.finished = trainer->finished();

  std::vector<fs::path> artifacts = {dir / "manifest.json", config_txt, epochs_csv, iterations_csv, stlclu_csv, ckpt};
  if (summary.finished) {
    summary.final_report = evaluate_model(trainer->model(), trainer->store(), ds, config.eval, config.seed());
    for (auto& p : write_eval_artifacts(*summary.final_report, dir)) artifacts.push_back(p);
  }

  nlohmann::json manifest;
  manifest["config_digest"] = run_digest(config);
  manifest["checkpoint_digest"] = config_digest(config.train, view);
  manifest["seed"] = config.seed();
  manifest["tool_version"] = kToolVersion;
  manifest["finished"] = summary.finished;
  manifest["completed_epochs"] = epochs_done;
  for (const auto& p : artifacts) manifest["artifacts"].push_back(p.filename().string());
  manifest["timings"]["wall_seconds"] = std::chrono::duration<double>(Clock::now() - started).count();
  const fs::path manifest_path = dir / "manifest.json";
  std::ofstream mout(manifest_path);
  mout << manifest.dump(2) << '\n';
  if (!mout) throw IoError("cannot write " + manifest_path.string());
  return summary;
}

}  // namespace ncd
