#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "preftok/analysis.hpp"
#include "preftok/checkpoint.hpp"
#include "preftok/config.hpp"
#include "preftok/dataset.hpp"
#include "preftok/stage1_trainer.hpp"
#include "preftok/stage2_reward.hpp"

namespace preftok {

namespace cli {

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
};

inline void apply(Config& c, const Overrides& o) {
  if (o.seed) {
    c.stage1.seed = *o.seed;
    c.stage2.seed = *o.seed;
  }
  c.stage1.threads = o.threads;
}

inline int ingest(const std::string& edges, const std::string& fv, const std::string& ft,
                  const std::filesystem::path& out_dir, std::ostream& out) {
  const auto data = make_dataset(parse_edges(edges), parse_feature_matrix(fv),
                                 parse_feature_matrix(ft));
  save_dataset(data, out_dir);
  out << "users\t" << data.user_count << "\nitems\t" << data.item_count() << "\ntrain\t"
      << data.split.train.size() << "\nvalid\t" << data.split.valid.size() << "\ntest\t"
      << data.split.test.size() << '\n';
  return 0;
}

inline int train_stage1_cmd(const Config& config, const std::filesystem::path& data_dir,
                            const std::filesystem::path& out_dir, std::ostream& out) {
  const auto data = load_dataset(data_dir);
  std::filesystem::create_directories(out_dir);
  std::ofstream metrics(out_dir / "metrics.tsv");
  std::ofstream epochs(out_dir / "epochs.tsv");
  epochs.precision(9);
  epochs << "epoch\tmean_total\tprobe_bpr\tprobe_rq\tprobe_cm\tprobe_total\n";
  const auto run = train_stage1(data, config.stage1, &metrics,
                                [&](const StageOneModel& model, const EpochSummary& s) {
                                  save_stage1(model, out_dir / "checkpoint");
                                  epochs << s.epoch << '\t' << s.mean.total << '\t'
                                         << s.probe.bpr << '\t' << s.probe.rq << '\t'
                                         << s.probe.cm << '\t' << s.probe.total << '\n';
                                });
  if (run.epochs.empty()) save_stage1(run.model, out_dir / "checkpoint");
  const double auc = evaluate_auc(run.model, data.split.test, 100, config.stage1.seed);
  out << "epochs\t" << run.epochs.size() << "\nsteps\t" << run.model.step << "\ntest_auc\t"
      << auc << '\n';
  return 0;
}

inline int export_tokens_cmd(const std::filesystem::path& checkpoint,
                             const std::filesystem::path& out_path, std::ostream& out) {
  const auto model = load_stage1(checkpoint);
  if (out_path.has_parent_path()) std::filesystem::create_directories(out_path.parent_path());
  export_tokens(model, out_path);
  out << "records\t" << 2 * (model.user_count() + model.item_count()) << '\n';
  return 0;
}

inline int analyze_prefix_cmd(const std::filesystem::path& checkpoint, const std::string& modality,
                              bool use_base, const std::optional<std::string>& out_path,
                              std::ostream& out) {
  const auto model = load_stage1(checkpoint);
  const auto codes = item_codes(model, parse_modality(modality));
  const auto rows =
      prefix_similarity_table(codes.tokens, use_base ? codes.base : codes.reconstructions);
  const auto table = format_prefix_table(rows);
  if (out_path) {
    write_file_bytes(*out_path, table);
  } else {
    out << table;
  }
  return 0;
}

inline int train_stage2_cmd(const std::filesystem::path& checkpoint, const Config& config,
                            const std::filesystem::path& out_dir, std::ostream& out) {
  auto model = load_stage1(checkpoint);
  const auto& cfg = config.stage2;
  const auto gen = ToyGenerator::seeded(model.config.dim_v, model.config.dim_t, cfg, cfg.seed);
  const auto proj =
      SharedSpaceProjector::seeded(cfg.image_dim, cfg.vocab, cfg.shared_dim, cfg.seed + 1);
  auto problem = build_stage2_problem(model, gen, proj, cfg);
  std::filesystem::create_directories(out_dir);
  std::ofstream trace(out_dir / "reward_trace.tsv");
  const auto run = train_stage2(std::move(problem), gen, proj, cfg, &trace);
  std::ofstream epochs(out_dir / "epoch_rewards.tsv");
  epochs.precision(9);
  epochs << "epoch\tR_p_v\tR_p_t\tR_crs\tobjective\n";
  for (std::size_t e = 0; e < run.epoch_rewards.size(); ++e) {
    const auto& r = run.epoch_rewards[e];
    epochs << e << '\t' << r.personal_v << '\t' << r.personal_t << '\t' << r.consistency
           << '\t' << r.objective << '\n';
  }
  model.visual.codebooks = run.problem.visual;
  model.text.codebooks = run.problem.text;
  save_stage1(model, out_dir / "checkpoint");
  out << "trainable_parameters\t" << run.problem.trainable_parameters() << "\nobjective_start\t"
      << run.epoch_rewards.front().objective << "\nobjective_end\t"
      << run.epoch_rewards.back().objective << '\n';
  return 0;
}

inline int eval_cmd(const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir,
                    const std::string& split, std::size_t negatives, std::uint64_t seed,
                    std::ostream& out) {
  const auto model = load_stage1(checkpoint);
  const auto data = load_dataset(data_dir);
  const auto& heldout = split == "valid" ? data.split.valid : data.split.test;
  out << "auc\t" << evaluate_auc(model, heldout, negatives, seed) << '\n';
  return 0;
}

inline int report_params_cmd(const Config& config, bool json, std::ostream& out) {
  const auto r = param_count_report(config);
  if (json) {
    nlohmann::ordered_json j;
    j["codebook_v"] = r.codebook_v;
    j["codebook_t"] = r.codebook_t;
    j["embeddings_v"] = r.embeddings_v;
    j["embeddings_t"] = r.embeddings_t;
    j["scorer"] = r.scorer;
    j["stage1_trainable"] = r.stage1_trainable();
    j["stage2_trainable"] = r.stage2_trainable();
    out << j.dump() << '\n';
  } else {
    out << format_param_report(r);
  }
  return 0;
}

}  // namespace cli

// Exit codes: 0 success (including --help), 1 usage error, 2 runtime failure.
inline int cli_dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout,
                        std::ostream& err = std::cerr) {
  CLI::App app{"Discrete multimodal preference tokens: learning, reward tuning, analysis",
               "preftok"};
  app.require_subcommand(1);
  cli::Overrides overrides;
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "Override every random seed");
  app.add_option("--threads", overrides.threads, "Worker threads (computation is sequential)");

  std::string edges, fv, ft, out_dir, data_dir, config_name = "desk", checkpoint, out_path;
  std::string modality = "v", split = "test";
  std::string table_out;
  bool use_base = false, json = false;
  std::size_t negatives = 100;

  auto* ingest = app.add_subcommand("ingest", "Parse edges/features and write the 8:1:1 split");
  ingest->add_option("--edges", edges, "user<TAB>item<TAB>timestamp file")->required();
  ingest->add_option("--features-v", fv, "Visual item features (FMAT)")->required();
  ingest->add_option("--features-t", ft, "Text item features (FMAT)")->required();
  ingest->add_option("--out", out_dir, "Output dataset directory")->required();

  auto* train1 = app.add_subcommand("train-stage1", "Learn embeddings and codebooks");
  train1->add_option("--config", config_name, "Config file or profile name (desk, full)");
  train1->add_option("--data", data_dir, "Dataset directory from ingest")->required();
  train1->add_option("--out", out_dir, "Output directory")->required();

  auto* exp = app.add_subcommand("export-tokens", "Write JSON-lines token records");
  exp->add_option("--checkpoint", checkpoint, "Stage-1 checkpoint directory")->required();
  exp->add_option("--out", out_path, "Token file path")->required();

  auto* prefix = app.add_subcommand("analyze-prefix", "Prefix-similarity table over items");
  prefix->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  prefix->add_option("--modality", modality, "v or t")->check(CLI::IsMember({"v", "t"}));
  prefix->add_flag("--base-embeddings", use_base, "Use continuous embeddings, not reconstructions");
  prefix->add_option("--out", table_out, "TSV output path (default stdout)");

  auto* train2 = app.add_subcommand("train-stage2", "Reward-weighted codebook fine-tuning");
  train2->add_option("--checkpoint", checkpoint, "Stage-1 checkpoint directory")->required();
  train2->add_option("--config", config_name, "Config file or profile name");
  train2->add_option("--out", out_dir, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Held-out sampled AUC");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  eval->add_option("--data", data_dir, "Dataset directory")->required();
  eval->add_option("--split", split, "valid or test")->check(CLI::IsMember({"valid", "test"}));
  eval->add_option("--negatives", negatives, "Sampled negatives per positive");

  auto* params = app.add_subcommand("report-params", "Parameter accounting");
  params->add_option("--config", config_name, "Config file or profile name");
  params->add_flag("--json", json, "Machine-readable output");

  std::vector<const char*> argv{"preftok"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 1;
  }
  if (*seed_opt) overrides.seed = seed_value;

  try {
    auto config = load_config(config_name);
    cli::apply(config, overrides);
    const std::uint64_t seed = overrides.seed.value_or(config.stage1.seed);
    if (*ingest) return cli::ingest(edges, fv, ft, out_dir, out);
    if (*train1) return cli::train_stage1_cmd(config, data_dir, out_dir, out);
    if (*exp) return cli::export_tokens_cmd(checkpoint, out_path, out);
    if (*prefix) {
      return cli::analyze_prefix_cmd(checkpoint, modality, use_base,
                                     table_out.empty() ? std::nullopt
                                                       : std::optional<std::string>(table_out),
                                     out);
    }
    if (*train2) return cli::train_stage2_cmd(checkpoint, config, out_dir, out);
    if (*eval) return cli::eval_cmd(checkpoint, data_dir, split, negatives, seed, out);
    if (*params) return cli::report_params_cmd(config, json, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace preftok
