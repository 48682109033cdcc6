#pragma once

// Logit lens: where does each steering vector point in unembedding space?

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "steerlab/error.hpp"
#include "steerlab/model/params.hpp"
#include "steerlab/model/tokenizer.hpp"
#include "steerlab/numcore/kernels.hpp"
#include "steerlab/numcore/tensor.hpp"

namespace steerlab {

inline constexpr int kDefaultTopK = 50;

// Trailing spaces are part of the prompt text.
inline constexpr std::string_view kClusterPrompt =
    "You will be given a list of tokens together with a score. \n"
    "You should translate all non-english tokens and suggest the main topics \n"
    "that unite the biggest subsets of tokens in the list.\n"
    "\n";

// c(v) = <s, u_v> / (|s| |u_v|) for every row u_v of W_U; zero rows score 0.
inline Tensor cosine_alignment(const Tensor& s, const Tensor& unembedding) {
  if (s.rank() != 1) throw DimensionError("cosine_alignment: steering vector must be rank 1, got " + shape_str(s.shape()));
  if (unembedding.rank() != 2 || unembedding.cols() != s.size()) {
    throw DimensionError("cosine_alignment: W_U " + shape_str(unembedding.shape()) + " does not match vector " +
                         shape_str(s.shape()));
  }
  require_finite(s, "cosine_alignment");
  const std::size_t d = s.size();
  const double s_norm = std::sqrt(kernel::dot(s.ptr(), s.ptr(), d));
  if (s_norm == 0.0) throw InputError("cosine_alignment: untrained vector (zero norm)");
  Tensor out({unembedding.rows()});
  for (std::size_t v = 0; v < unembedding.rows(); ++v) {
    const double* u = unembedding.ptr() + v * d;
    const double u_norm = std::sqrt(kernel::dot(u, u, d));
    if (u_norm == 0.0) continue;
    const double c = kernel::dot(s.ptr(), u, d) / (s_norm * u_norm);
    out[v] = std::clamp(c, -1.0, 1.0);
  }
  return out;
}

struct LensEntry {
  std::string token;  // escaped display form
  TokenId id = 0;
  double score = 0.0;
};

struct LensLayer {
  int layer = 0;
  std::vector<LensEntry> top;
};

struct LensReport {
  std::string source;
  int top_k = kDefaultTopK;
  std::vector<LensLayer> layers;
};

// Descending by score, ties by ascending id.
inline std::vector<LensEntry> top_tokens(const Tensor& scores, const Tokenizer& tok, int top_k = kDefaultTopK) {
  const std::size_t v = scores.size();
  if (top_k < 1 || static_cast<std::size_t>(top_k) > v) {
    throw ParameterError("top_tokens: top_k " + std::to_string(top_k) + " outside [1, " + std::to_string(v) + "]");
  }
  if (static_cast<int>(v) != tok.size()) throw DimensionError("top_tokens: score count does not match vocabulary");
  std::vector<TokenId> ids(v);
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(), [&](TokenId a, TokenId b) {
    if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)]) {
      return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    }
    return a < b;
  });
  std::vector<LensEntry> out;
  for (int i = 0; i < top_k; ++i) {
    const TokenId id = ids[static_cast<std::size_t>(i)];
    out.push_back({tok.display(id), id, scores[static_cast<std::size_t>(id)]});
  }
  return out;
}

inline LensReport lens_report(const SteeringBank& bank, const Tensor& unembedding, const Tokenizer& tok,
                              int top_k = kDefaultTopK, std::string source = {}) {
  if (bank.vectors.empty()) throw InputError("lens: steering bank is empty");
  LensReport r;
  r.source = std::move(source);
  r.top_k = top_k;
  for (std::size_t l = 0; l < bank.vectors.size(); ++l) {
    try {
      r.layers.push_back({static_cast<int>(l), top_tokens(cosine_alignment(bank.vectors[l], unembedding), tok, top_k)});
    } catch (const InputError& e) {
      throw InputError("lens: layer " + std::to_string(l) + ": " + e.what());
    }
  }
  return r;
}

inline nlohmann::json to_json(const LensLayer& l) {
  nlohmann::json top = nlohmann::json::array();
  for (const auto& e : l.top) top.push_back({{"token", e.token}, {"id", e.id}, {"score", e.score}});
  return {{"layer", l.layer}, {"top", top}};
}

inline nlohmann::json to_json(const LensReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : r.layers) layers.push_back(to_json(l));
  return {{"source", r.source}, {"top_k", r.top_k}, {"layers", layers}};
}

inline std::string format_score(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", x);
  return buf;
}

// Clustering prompt for one layer: fixed preamble, then the scored tokens.
inline std::string export_cluster_prompt(const LensLayer& layer) {
  if (layer.top.empty()) throw InputError("export_cluster_prompt: empty token list");
  std::string out(kClusterPrompt);
  out += "<list>\n";
  for (const auto& e : layer.top) out += e.token + "\t" + format_score(e.score) + "\n";
  out += "</list>\n";
  return out;
}

inline std::filesystem::path prompt_path(const std::filesystem::path& dir, int layer) {
  return dir / ("lens_layer" + std::to_string(layer) + ".prompt.txt");
}

inline std::vector<std::filesystem::path> write_cluster_prompts(const LensReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  for (const auto& l : r.layers) {
    const auto p = prompt_path(dir, l.layer);
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + p.string());
    f << export_cluster_prompt(l);
    written.push_back(p);
  }
  return written;
}

}  // namespace steerlab
