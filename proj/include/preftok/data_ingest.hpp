#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "preftok/fmat.hpp"
#include "preftok/matrix.hpp"

namespace preftok {

struct Interaction {
  std::uint32_t user = 0;
  std::uint32_t item = 0;
  std::int64_t timestamp = 0;

  bool operator==(const Interaction&) const = default;
};

struct InteractionSet {
  std::vector<Interaction> edges;

  std::size_t size() const { return edges.size(); }
  bool empty() const { return edges.empty(); }

  // One past the largest id, or 0 when empty.
  std::size_t user_bound() const {
    std::size_t n = 0;
    for (const auto& e : edges) n = std::max<std::size_t>(n, e.user + 1);
    return n;
  }
  std::size_t item_bound() const {
    std::size_t n = 0;
    for (const auto& e : edges) n = std::max<std::size_t>(n, e.item + 1);
    return n;
  }
};

using FeatureMatrix = Matrix<float>;

struct DatasetSplit {
  InteractionSet train;
  InteractionSet valid;
  InteractionSet test;
};

namespace detail {

inline std::int64_t parse_integer_field(std::string_view field,
                                        std::size_t line_no,
                                        const char* name) {
  std::int64_t value = 0;
  const auto* first = field.data();
  const auto* last = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (field.empty() || ec != std::errc() || ptr != last) {
    throw Error("line " + std::to_string(line_no) + ": " + name +
                " field '" + std::string(field) + "' is not an integer");
  }
  return value;
}

}  // namespace detail

// Parses `user<TAB>item<TAB>timestamp` lines. Duplicate (user, item) pairs
// collapse onto their first occurrence, carrying the earliest timestamp.
inline InteractionSet parse_edges(std::istream& in) {
  InteractionSet out;
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;

    std::array<std::string_view, 3> fields;
    std::string_view rest = line;
    for (std::size_t f = 0; f < 3; ++f) {
      const auto tab = rest.find('\t');
      if (f < 2) {
        if (tab == std::string_view::npos) {
          throw Error("line " + std::to_string(line_no) +
                      ": expected 3 tab-separated fields");
        }
        fields[f] = rest.substr(0, tab);
        rest.remove_prefix(tab + 1);
      } else {
        if (tab != std::string_view::npos) {
          throw Error("line " + std::to_string(line_no) +
                      ": expected 3 tab-separated fields");
        }
        fields[f] = rest;
      }
    }
    const auto user = detail::parse_integer_field(fields[0], line_no, "user");
    const auto item = detail::parse_integer_field(fields[1], line_no, "item");
    const auto ts = detail::parse_integer_field(fields[2], line_no, "timestamp");
    if (user < 0 || item < 0 || user > UINT32_MAX || item > UINT32_MAX) {
      throw Error("line " + std::to_string(line_no) + ": ids must be non-negative");
    }
    const auto key = std::make_pair(static_cast<std::uint32_t>(user),
                                    static_cast<std::uint32_t>(item));
    if (auto it = seen.find(key); it != seen.end()) {
      auto& kept = out.edges[it->second];
      kept.timestamp = std::min(kept.timestamp, ts);
      continue;
    }
    seen.emplace(key, out.edges.size());
    out.edges.push_back({key.first, key.second, ts});
  }
  return out;
}

inline InteractionSet parse_edges(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open edge file " + path.string());
  try {
    return parse_edges(in);
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

inline std::string format_edges(const InteractionSet& set) {
  std::ostringstream out;
  for (const auto& e : set.edges) {
    out << e.user << '\t' << e.item << '\t' << e.timestamp << '\n';
  }
  return out.str();
}

inline void write_edges(const std::filesystem::path& path,
                        const InteractionSet& set) {
  write_file_bytes(path, format_edges(set));
}

inline FeatureMatrix parse_feature_matrix(const std::filesystem::path& path) {
  return read_fmat(path);
}

// Sorts ascending by (timestamp, user, item) and cuts floor(r0*n) train,
// floor(r1*n) valid, remainder test.
inline DatasetSplit temporal_split(const InteractionSet& interactions,
                                   std::array<double, 3> ratios = {0.8, 0.1, 0.1}) {
  for (double r : ratios) {
    if (!(r > 0.0)) throw Error("split ratios must be positive");
  }
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) {
    throw Error("split ratios must sum to 1");
  }
  const std::size_t n = interactions.size();
  if (n < 3) {
    throw Error("temporal split needs at least 3 edges, got " + std::to_string(n));
  }
  auto sorted = interactions.edges;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
    return std::tie(a.timestamp, a.user, a.item) <
           std::tie(b.timestamp, b.user, b.item);
  });
  // The epsilon absorbs products like 0.8*n landing a few ulps under an
  // integer.
  const auto cut = [n](double r) {
    return static_cast<std::size_t>(std::floor(r * static_cast<double>(n) + 1e-9));
  };
  const std::size_t n_train = cut(ratios[0]);
  const std::size_t n_valid = cut(ratios[1]);

  DatasetSplit split;
  split.train.edges.assign(sorted.begin(), sorted.begin() + n_train);
  split.valid.edges.assign(sorted.begin() + n_train,
                           sorted.begin() + n_train + n_valid);
  split.test.edges.assign(sorted.begin() + n_train + n_valid, sorted.end());
  return split;
}

// Users carry no content features, so each user vector is drawn per column
// from Normal(mean_j, std_j) of the item features (population std).
template <typename Real = double>
Matrix<Real> init_user_embeddings(const FeatureMatrix& features,
                                  std::size_t user_count, std::uint64_t seed) {
  if (features.rows() == 0) {
    throw Error("cannot initialize users: feature matrix has no items");
  }
  const std::size_t d = features.cols();
  std::vector<double> mean(d, 0.0), stddev(d, 0.0);
  for (std::size_t i = 0; i < features.rows(); ++i) {
    for (std::size_t j = 0; j < d; ++j) mean[j] += features(i, j);
  }
  for (auto& m : mean) m /= static_cast<double>(features.rows());
  for (std::size_t i = 0; i < features.rows(); ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = features(i, j) - mean[j];
      stddev[j] += diff * diff;
    }
  }
  for (auto& s : stddev) s = std::sqrt(s / static_cast<double>(features.rows()));

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix<Real> users(user_count, d);
  for (std::size_t u = 0; u < user_count; ++u) {
    for (std::size_t j = 0; j < d; ++j) {
      const double z = normal(rng);
      users(u, j) = static_cast<Real>(stddev[j] == 0.0 ? mean[j]
                                                       : mean[j] + stddev[j] * z);
    }
  }
  return users;
}

struct ModalGraph {
  Modality modality = Modality::kVisual;
  std::size_t user_count = 0;
  std::size_t item_count = 0;
  std::vector<std::vector<std::uint32_t>> user_items;  // sorted
  std::vector<std::vector<std::uint32_t>> item_users;  // sorted
  FeatureMatrix item_features;

  std::size_t user_degree(std::size_t u) const { return user_items[u].size(); }
  std::size_t item_degree(std::size_t i) const { return item_users[i].size(); }
  std::size_t edge_count() const {
    std::size_t n = 0;
    for (const auto& items : user_items) n += items.size();
    return n;
  }
};

// `user_count` of 0 means "one past the largest user id in `train`".
inline ModalGraph build_modal_graph(const InteractionSet& train, Modality modality,
                                    const FeatureMatrix& features,
                                    std::size_t user_count = 0) {
  ModalGraph g;
  g.modality = modality;
  g.user_count = std::max(user_count, train.user_bound());
  g.item_count = features.rows();
  g.item_features = features;
  g.user_items.resize(g.user_count);
  g.item_users.resize(g.item_count);
  for (const auto& e : train.edges) {
    if (e.item >= g.item_count) {
      throw Error("item id " + std::to_string(e.item) +
                  " outside feature matrix with " + std::to_string(g.item_count) +
                  " rows");
    }
    g.user_items[e.user].push_back(e.item);
    g.item_users[e.item].push_back(e.user);
  }
  for (auto& v : g.user_items) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  }
  for (auto& v : g.item_users) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  }
  return g;
}

}  // namespace preftok
