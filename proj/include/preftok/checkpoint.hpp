#pragma once

// Checkpoint directory layout (all matrices FMAT, float32):
//   manifest.txt                 key=value: config, counts, step
//   train.tsv                    training edges (graph adjacency)
//   base_{users,items}_{v,t}.fmat
//   codebook_{v,t}/manifest.txt  L, K, d, decay, alpha, step
//   codebook_{v,t}/level_<l>.fmat, ema_count_<l>.fmat, ema_sum_<l>.fmat
//   scorer.fmat                  1 x P flat scorer parameters
//   adam_<block>.fmat            2 x P (first, second moment)

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "preftok/config.hpp"
#include "preftok/fmat.hpp"
#include "preftok/stage1_trainer.hpp"

namespace preftok {

namespace detail {

inline std::map<std::string, std::string> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

inline const std::string& manifest_value(const std::map<std::string, std::string>& m,
                                         const std::string& key) {
  const auto it = m.find(key);
  if (it == m.end()) throw Error("manifest missing key '" + key + "'");
  return it->second;
}

inline Matrix<float> vector_as_row(std::span<const double> v) {
  Matrix<float> m(1, v.size());
  for (std::size_t k = 0; k < v.size(); ++k) m.storage()[k] = static_cast<float>(v[k]);
  return m;
}

inline void save_adam(const std::filesystem::path& path, const AdamState& s) {
  Matrix<float> m(2, s.first_moment.size());
  for (std::size_t k = 0; k < s.first_moment.size(); ++k) {
    m(0, k) = static_cast<float>(s.first_moment[k]);
    m(1, k) = static_cast<float>(s.second_moment[k]);
  }
  write_fmat(path, m);
}

inline AdamState load_adam(const std::filesystem::path& path, std::size_t step) {
  const auto m = read_fmat(path);
  if (m.rows() != 2 && m.size() != 0) throw Error(path.string() + ": expected 2 rows");
  AdamState s(m.cols());
  for (std::size_t k = 0; k < m.cols(); ++k) {
    s.first_moment[k] = m(0, k);
    s.second_moment[k] = m(1, k);
  }
  s.step = step;
  if (m.cols() == 0) {
    s.first_moment.clear();
    s.second_moment.clear();
  }
  return s;
}

}  // namespace detail

template <typename Real>
void save_codebooks(const CodebookStack<Real>& stack, const std::filesystem::path& dir,
                    double decay, double alpha, std::size_t step) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  manifest.precision(17);
  manifest << "L=" << stack.levels() << "\nK=" << stack.size() << "\nd=" << stack.dim
           << "\ndecay=" << decay << "\nalpha=" << alpha << "\nstep=" << step << "\n";
  write_file_bytes(dir / "manifest.txt", manifest.str());
  for (std::size_t l = 0; l < stack.levels(); ++l) {
    const auto suffix = std::to_string(l + 1) + ".fmat";
    write_fmat(dir / ("level_" + suffix), stack.codes[l]);
    write_fmat(dir / ("ema_count_" + suffix), detail::vector_as_row(stack.cluster_size[l]));
    write_fmat(dir / ("ema_sum_" + suffix), stack.code_sum[l]);
  }
}

inline CodebookStack<double> load_codebooks(const std::filesystem::path& dir) {
  const auto manifest = detail::read_manifest(dir / "manifest.txt");
  const auto levels = std::stoul(detail::manifest_value(manifest, "L"));
  const auto size = std::stoul(detail::manifest_value(manifest, "K"));
  const auto dim = std::stoul(detail::manifest_value(manifest, "d"));
  auto stack = CodebookStack<double>::zeros(levels, size, dim);
  for (std::size_t l = 0; l < levels; ++l) {
    const auto suffix = std::to_string(l + 1) + ".fmat";
    const auto codes = read_fmat(dir / ("level_" + suffix));
    const auto count = read_fmat(dir / ("ema_count_" + suffix));
    const auto sum = read_fmat(dir / ("ema_sum_" + suffix));
    if (codes.rows() != size || codes.cols() != dim || count.size() != size ||
        sum.rows() != size || sum.cols() != dim) {
      throw Error(dir.string() + ": codebook level " + std::to_string(l + 1) +
                  " does not match manifest shape");
    }
    stack.codes[l] = codes.cast<double>();
    stack.code_sum[l] = sum.cast<double>();
    for (std::size_t k = 0; k < size; ++k) stack.cluster_size[l][k] = count.storage()[k];
  }
  return stack;
}

inline void save_stage1(const StageOneModel& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  manifest << format_config(Config{model.config, {}, 0, 0});
  manifest << "user_count=" << model.user_count() << "\nitem_count=" << model.item_count()
           << "\nstep=" << model.step
           << "\ncodebooks_ready=" << (model.codebooks_ready ? 1 : 0)
           << "\nadam_steps=" << model.adam_scorer.step << "\n";
  write_file_bytes(dir / "manifest.txt", manifest.str());
  write_edges(dir / "train.tsv", model.train);
  for (auto m : {Modality::kVisual, Modality::kText}) {
    const auto& mm = model.modal(m);
    const std::string tag = modality_name(m);
    write_fmat(dir / ("base_users_" + tag + ".fmat"), mm.base.users);
    write_fmat(dir / ("base_items_" + tag + ".fmat"), mm.base.items);
    save_codebooks(mm.codebooks, dir / ("codebook_" + tag), model.config.ema_decay,
                   model.config.alpha, model.step);
    detail::save_adam(dir / ("adam_users_" + tag + ".fmat"), mm.adam_users);
    detail::save_adam(dir / ("adam_items_" + tag + ".fmat"), mm.adam_items);
  }
  write_fmat(dir / "scorer.fmat", detail::vector_as_row(model.scorer.params()));
  detail::save_adam(dir / "adam_scorer.fmat", model.adam_scorer);
}

inline StageOneModel load_stage1(const std::filesystem::path& dir) {
  const auto manifest = detail::read_manifest(dir / "manifest.txt");
  std::istringstream cfg_text([&] {
    std::string s;
    for (const auto& [k, v] : manifest) {
      if (k == "user_count" || k == "item_count" || k == "step" ||
          k == "codebooks_ready" || k == "adam_steps") {
        continue;
      }
      s += k + "=" + v + "\n";
    }
    return s;
  }());
  const auto config = parse_config(cfg_text);
  StageOneModel model;
  model.config = config.stage1;
  model.train = parse_edges(dir / "train.tsv");
  model.step = std::stoul(detail::manifest_value(manifest, "step"));
  model.codebooks_ready = detail::manifest_value(manifest, "codebooks_ready") == "1";
  const auto users = std::stoul(detail::manifest_value(manifest, "user_count"));
  const auto items = std::stoul(detail::manifest_value(manifest, "item_count"));
  const auto adam_steps = std::stoul(detail::manifest_value(manifest, "adam_steps"));
  for (auto m : {Modality::kVisual, Modality::kText}) {
    auto& mm = model.modal(m);
    const std::string tag = modality_name(m);
    mm.graph = build_modal_graph(model.train, m, FeatureMatrix(items, 0), users);
    mm.plan = PropagationPlan::build(mm.graph, model.config.layers);
    mm.base.users = read_fmat(dir / ("base_users_" + tag + ".fmat")).cast<double>();
    mm.base.items = read_fmat(dir / ("base_items_" + tag + ".fmat")).cast<double>();
    mm.base.items_trainable = !model.config.freeze_items;
    mm.codebooks = load_codebooks(dir / ("codebook_" + tag));
    mm.adam_users = detail::load_adam(dir / ("adam_users_" + tag + ".fmat"), adam_steps);
    mm.adam_items = detail::load_adam(dir / ("adam_items_" + tag + ".fmat"),
                                      model.config.freeze_items ? 0 : adam_steps);
    const std::size_t dim = m == Modality::kVisual ? model.config.dim_v : model.config.dim_t;
    if (mm.base.users.rows() != users || mm.base.items.rows() != items ||
        mm.base.users.cols() != dim || mm.codebooks.dim != dim) {
      throw Error(dir.string() + ": checkpoint tables disagree with manifest");
    }
  }
  const auto scorer = read_fmat(dir / "scorer.fmat");
  model.scorer = MlpScorer(model.config.dim_t + model.config.dim_v,
                           model.config.scorer_hidden());
  if (scorer.size() != model.scorer.parameter_count()) {
    throw Error(dir.string() + ": scorer parameter count mismatch");
  }
  for (std::size_t k = 0; k < scorer.size(); ++k) {
    model.scorer.params()[k] = scorer.storage()[k];
  }
  model.adam_scorer = detail::load_adam(dir / "adam_scorer.fmat", adam_steps);
  return model;
}

}  // namespace preftok
