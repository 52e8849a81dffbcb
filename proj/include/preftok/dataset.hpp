#pragma once

#include <filesystem>
#include <string>

#include "preftok/data_ingest.hpp"
#include "preftok/fmat.hpp"

namespace preftok {

// Output of `preftok ingest`: the temporal split plus both feature matrices.
struct Dataset {
  DatasetSplit split;
  FeatureMatrix features_v;
  FeatureMatrix features_t;
  std::size_t user_count = 0;

  std::size_t item_count() const { return features_v.rows(); }

  const FeatureMatrix& features(Modality m) const {
    return m == Modality::kVisual ? features_v : features_t;
  }
};

inline std::size_t user_bound(const DatasetSplit& s) {
  return std::max({s.train.user_bound(), s.valid.user_bound(), s.test.user_bound()});
}

inline void check_dataset(const Dataset& d) {
  if (d.features_v.rows() != d.features_t.rows()) {
    throw Error("visual and text feature matrices disagree on item count (" +
                std::to_string(d.features_v.rows()) + " vs " +
                std::to_string(d.features_t.rows()) + ")");
  }
  for (const auto* set : {&d.split.train, &d.split.valid, &d.split.test}) {
    if (set->item_bound() > d.item_count()) {
      throw Error("edge references item " + std::to_string(set->item_bound() - 1) +
                  " outside feature matrix with " + std::to_string(d.item_count()) +
                  " rows");
    }
  }
}

inline Dataset make_dataset(const InteractionSet& edges, FeatureMatrix features_v,
                            FeatureMatrix features_t) {
  Dataset d;
  d.split = temporal_split(edges);
  d.features_v = std::move(features_v);
  d.features_t = std::move(features_t);
  d.user_count = user_bound(d.split);
  check_dataset(d);
  return d;
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_edges(dir / "train.tsv", d.split.train);
  write_edges(dir / "valid.tsv", d.split.valid);
  write_edges(dir / "test.tsv", d.split.test);
  write_fmat(dir / "features_v.fmat", d.features_v);
  write_fmat(dir / "features_t.fmat", d.features_t);
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset d;
  d.split.train = parse_edges(dir / "train.tsv");
  d.split.valid = parse_edges(dir / "valid.tsv");
  d.split.test = parse_edges(dir / "test.tsv");
  d.features_v = read_fmat(dir / "features_v.fmat");
  d.features_t = read_fmat(dir / "features_t.fmat");
  d.user_count = user_bound(d.split);
  check_dataset(d);
  return d;
}

}  // namespace preftok
