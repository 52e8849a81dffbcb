#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "preftok/config.hpp"
#include "preftok/fmat.hpp"
#include "preftok/gcn_encoder.hpp"
#include "preftok/quantizer.hpp"
#include "preftok/stage1_trainer.hpp"

namespace preftok {

enum class EntityKind { kUser, kItem };

struct TokenRecord {
  EntityKind kind = EntityKind::kUser;
  std::uint32_t id = 0;
  Modality modality = Modality::kVisual;
  TokenSequence tokens;

  bool operator==(const TokenRecord&) const = default;
};

// Users first, then items; within an entity the visual record precedes the
// text record.
inline std::vector<TokenRecord> collect_token_records(const StageOneModel& model) {
  const auto final_v = propagate(model.visual.graph, model.visual.plan, model.visual.base);
  const auto final_t = propagate(model.text.graph, model.text.plan, model.text.base);
  std::vector<TokenRecord> out;
  out.reserve(2 * (model.user_count() + model.item_count()));
  auto emit = [&](EntityKind kind, std::size_t count) {
    for (std::uint32_t id = 0; id < count; ++id) {
      for (auto m : {Modality::kVisual, Modality::kText}) {
        const auto& table = m == Modality::kVisual ? final_v : final_t;
        const auto row = kind == EntityKind::kUser ? table.users.row(id) : table.items.row(id);
        out.push_back({kind, id, m,
                       quantize(std::span<const double>(row), model.modal(m).codebooks).tokens});
      }
    }
  };
  emit(EntityKind::kUser, model.user_count());
  emit(EntityKind::kItem, model.item_count());
  return out;
}

inline std::string format_token_records(const std::vector<TokenRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["kind"] = r.kind == EntityKind::kUser ? "user" : "item";
    j["id"] = r.id;
    j["modality"] = modality_name(r.modality);
    j["tokens"] = r.tokens.indices;
    out += j.dump();
    out += '\n';
  }
  return out;
}

// Validates every record: kind, modality, length `levels`, indices in
// [1, codebook_size]. Zero for either bound skips that check.
inline std::vector<TokenRecord> parse_token_records(std::istream& in, std::size_t levels = 0,
                                                    std::size_t codebook_size = 0) {
  std::vector<TokenRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto where = "token file line " + std::to_string(line_no) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(where + e.what());
    }
    TokenRecord r;
    try {
      const auto kind = j.at("kind").get<std::string>();
      if (kind != "user" && kind != "item") throw Error(where + "unknown kind '" + kind + "'");
      r.kind = kind == "user" ? EntityKind::kUser : EntityKind::kItem;
      r.id = j.at("id").get<std::uint32_t>();
      r.modality = parse_modality(j.at("modality").get<std::string>());
      r.tokens.indices = j.at("tokens").get<std::vector<std::uint32_t>>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(where + e.what());
    }
    if (levels && r.tokens.size() != levels) {
      throw Error(where + "expected " + std::to_string(levels) + " tokens, got " +
                  std::to_string(r.tokens.size()));
    }
    for (auto t : r.tokens.indices) {
      if (t < 1 || (codebook_size && t > codebook_size)) {
        throw Error(where + "token " + std::to_string(t) + " outside [1, " +
                    std::to_string(codebook_size) + "]");
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline void export_tokens(const StageOneModel& model, const std::filesystem::path& path) {
  write_file_bytes(path, format_token_records(collect_token_records(model)));
}

// Literal text interleaved with user ({U}) and item ({I}) placeholder slots.
class PromptTemplate {
 public:
  enum class Slot { kText, kUser, kItem };
  struct Piece {
    Slot slot = Slot::kText;
    std::string text;
  };

  static PromptTemplate parse(const std::string& text) {
    PromptTemplate t;
    std::string literal;
    std::size_t pos = 0;
    auto flush = [&] {
      if (!literal.empty()) t.pieces_.push_back({Slot::kText, literal});
      literal.clear();
    };
    while (pos < text.size()) {
      bool matched = false;
      for (const auto& [token, slot] : kPlaceholders) {
        if (text.compare(pos, token.size(), token) == 0) {
          flush();
          t.pieces_.push_back({slot, {}});
          pos += token.size();
          matched = true;
          break;
        }
      }
      if (!matched) literal += text[pos++];
    }
    flush();
    return t;
  }

  std::size_t user_slots() const { return count(Slot::kUser); }
  std::size_t item_slots() const { return count(Slot::kItem); }
  const std::vector<Piece>& pieces() const { return pieces_; }

 private:
  inline static const std::vector<std::pair<std::string, Slot>> kPlaceholders = {
      {"{U_*}", Slot::kUser}, {"{I_*}", Slot::kItem}, {"{U}", Slot::kUser}, {"{I}", Slot::kItem}};

  std::size_t count(Slot s) const {
    return static_cast<std::size_t>(std::count_if(
        pieces_.begin(), pieces_.end(), [s](const Piece& p) { return p.slot == s; }));
  }

  std::vector<Piece> pieces_;
};

// The poster prompt with L user slots then L item slots.
inline std::string poster_prompt_template(std::size_t levels, const std::string& title) {
  std::string u, i;
  for (std::size_t l = 0; l < levels; ++l) {
    u += "{U}";
    i += "{I}";
  }
  return "a personalized movie poster for " + u + ", this movie " + i + " named " + title;
}

using PromptSegment = std::variant<std::string, std::vector<double>>;

// Replaces the k-th {U} slot with user_codes[k] and the k-th {I} slot with
// item_codes[k]. Literal segments are whitespace-trimmed; empty ones vanish.
inline std::vector<PromptSegment> render_prompt(const PromptTemplate& tmpl,
                                                const std::vector<std::vector<double>>& user_codes,
                                                const std::vector<std::vector<double>>& item_codes) {
  if (tmpl.user_slots() != user_codes.size() || tmpl.item_slots() != item_codes.size()) {
    throw Error("prompt has " + std::to_string(tmpl.user_slots()) + " user / " +
                std::to_string(tmpl.item_slots()) + " item slots, got " +
                std::to_string(user_codes.size()) + " / " + std::to_string(item_codes.size()) +
                " code vectors");
  }
  std::vector<PromptSegment> out;
  std::size_t next_user = 0, next_item = 0;
  for (const auto& piece : tmpl.pieces()) {
    switch (piece.slot) {
      case PromptTemplate::Slot::kText: {
        const auto b = piece.text.find_first_not_of(" \t\n");
        if (b == std::string::npos) break;
        const auto e = piece.text.find_last_not_of(" \t\n");
        out.emplace_back(piece.text.substr(b, e - b + 1));
        break;
      }
      case PromptTemplate::Slot::kUser:
        out.emplace_back(user_codes[next_user++]);
        break;
      case PromptTemplate::Slot::kItem:
        out.emplace_back(item_codes[next_item++]);
        break;
    }
  }
  return out;
}

// Looks up each level's code for the user and item tokens, then renders.
inline std::vector<PromptSegment> render_prompt(const PromptTemplate& tmpl,
                                                const TokenSequence& user,
                                                const TokenSequence& item,
                                                const CodebookStack<double>& stack) {
  auto lookup = [&](const TokenSequence& t) {
    std::vector<std::vector<double>> codes;
    for (std::size_t l = 0; l < t.size(); ++l) {
      if (l >= stack.levels() || t[l] < 1 || t[l] > stack.size()) {
        throw Error("prompt token out of range at level " + std::to_string(l + 1));
      }
      const auto e = stack.code(l, t[l]);
      codes.emplace_back(e.begin(), e.end());
    }
    return codes;
  };
  return render_prompt(tmpl, lookup(user), lookup(item));
}

struct PrefixRow {
  std::size_t prefix_len = 0;
  double avg_pairwise_cos = 0.0;  // NaN when no group has two members
  std::size_t min_group = 0;
  std::size_t max_group = 0;
  std::size_t n_groups = 0;
  std::size_t n_singletons = 0;
  std::size_t n_pairs = 0;
};

inline double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = std::sqrt(squared_norm(a)), nb = std::sqrt(squared_norm(b));
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

// For each prefix length p, groups items by their first p tokens and pools
// the cosine similarity of every within-group pair. Group sizes range over
// all groups, singletons included; singletons add no pairs.
inline std::vector<PrefixRow> prefix_similarity_table(
    const std::vector<TokenSequence>& tokens,
    const std::vector<std::vector<double>>& reconstructions) {
  if (tokens.size() < 2) throw Error("prefix analysis needs at least 2 items");
  if (tokens.size() != reconstructions.size()) {
    throw Error("prefix analysis: token and reconstruction counts differ");
  }
  const std::size_t levels = tokens.front().size();
  std::vector<PrefixRow> out;
  for (std::size_t p = 1; p <= levels; ++p) {
    std::map<std::vector<std::uint32_t>, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i].size() != levels) throw Error("prefix analysis: ragged token lengths");
      groups[{tokens[i].indices.begin(), tokens[i].indices.begin() + p}].push_back(i);
    }
    PrefixRow row;
    row.prefix_len = p;
    row.n_groups = groups.size();
    row.min_group = tokens.size();
    double sum = 0.0;
    for (const auto& [prefix, members] : groups) {
      row.min_group = std::min(row.min_group, members.size());
      row.max_group = std::max(row.max_group, members.size());
      if (members.size() == 1) ++row.n_singletons;
      for (std::size_t a = 0; a < members.size(); ++a) {
        for (std::size_t b = a + 1; b < members.size(); ++b) {
          sum += cosine(reconstructions[members[a]], reconstructions[members[b]]);
          ++row.n_pairs;
        }
      }
    }
    row.avg_pairwise_cos =
        row.n_pairs ? sum / static_cast<double>(row.n_pairs) : std::nan("");
    out.push_back(row);
  }
  return out;
}

inline std::string format_prefix_table(const std::vector<PrefixRow>& rows) {
  std::ostringstream out;
  out.precision(6);
  out << std::fixed;
  out << "prefix_len\tavg_pairwise_cos\tmin_group\tmax_group\tn_groups\n";
  for (const auto& r : rows) {
    out << r.prefix_len << '\t' << r.avg_pairwise_cos << '\t' << r.min_group << '\t'
        << r.max_group << '\t' << r.n_groups << '\n';
  }
  return out.str();
}

// Item tokens and reconstructions for one modality of a trained model.
struct ItemCodes {
  std::vector<TokenSequence> tokens;
  std::vector<std::vector<double>> reconstructions;
  std::vector<std::vector<double>> base;  // propagated continuous embeddings
};

inline ItemCodes item_codes(const StageOneModel& model, Modality m) {
  const auto& mm = model.modal(m);
  const auto final = propagate(mm.graph, mm.plan, mm.base);
  ItemCodes out;
  for (std::size_t i = 0; i < final.items.rows(); ++i) {
    const auto row = final.items.row(i);
    auto q = quantize(std::span<const double>(row), mm.codebooks);
    out.tokens.push_back(std::move(q.tokens));
    out.reconstructions.push_back(std::move(q.reconstruction));
    out.base.emplace_back(row.begin(), row.end());
  }
  return out;
}

struct ParamReport {
  std::size_t codebook_v = 0;
  std::size_t codebook_t = 0;
  std::size_t embeddings_v = 0;
  std::size_t embeddings_t = 0;
  std::size_t scorer = 0;

  std::size_t stage1_trainable() const { return embeddings_v + embeddings_t + scorer; }
  std::size_t stage2_trainable() const { return codebook_v + codebook_t; }
};

inline ParamReport param_count_report(const Config& c) {
  const auto& s = c.stage1;
  ParamReport r;
  r.codebook_v = s.levels * s.codebook_size * s.dim_v;
  r.codebook_t = s.levels * s.codebook_size * s.dim_t;
  const std::size_t item_blocks = s.freeze_items ? 0 : c.items;
  r.embeddings_v = (c.users + item_blocks) * s.dim_v;
  r.embeddings_t = (c.users + item_blocks) * s.dim_t;
  const std::size_t h = s.scorer_hidden();
  r.scorer = h * (s.dim_v + s.dim_t) + 2 * h + 1;
  return r;
}

inline std::string format_param_report(const ParamReport& r) {
  std::ostringstream out;
  out << "component\tparameters\n"
      << "codebook_v\t" << r.codebook_v << '\n'
      << "codebook_t\t" << r.codebook_t << '\n'
      << "embeddings_v\t" << r.embeddings_v << '\n'
      << "embeddings_t\t" << r.embeddings_t << '\n'
      << "scorer\t" << r.scorer << '\n'
      << "stage1_trainable\t" << r.stage1_trainable() << '\n'
      << "stage2_trainable\t" << r.stage2_trainable() << '\n';
  return out.str();
}

}  // namespace preftok
