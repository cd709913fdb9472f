#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mimco/augment.hpp"
#include "mimco/dataset.hpp"
#include "mimco/linalg.hpp"
#include "mimco/vit.hpp"

namespace mimco {

template <typename S>
struct EmbeddingSet {
  std::vector<std::string> ids;
  std::vector<int> labels;
  Mat<S> features;  // one row per sample

  std::size_t size() const { return ids.size(); }
  void check() const {
    if (static_cast<Eigen::Index>(ids.size()) != features.rows() || ids.size() != labels.size())
      throw std::invalid_argument("embeddings: ids, labels and feature rows must align");
  }
};

// ---------------------------------------------------------------------------
// Embedding computation
// ---------------------------------------------------------------------------

// Deterministic eval-time features: resize + normalize, full (unmasked)
// forward, mean pool over tokens.
template <typename S>
EmbeddingSet<S> compute_embeddings(VitParams<S>& encoder, const Dataset& data,
                                   const AugmentationConfig& aug, int batch_size = 64) {
  if (data.items.empty()) throw std::invalid_argument("embeddings: empty dataset");
  if (batch_size <= 0) throw std::invalid_argument("embeddings: batch size must be positive");
  EmbeddingSet<S> out;
  out.features.resize(static_cast<Eigen::Index>(data.items.size()), encoder.cfg.embed_dim);
  out.ids.reserve(data.items.size());
  out.labels.reserve(data.items.size());

  std::vector<Image> views;
  std::vector<const Image*> ptrs;
  for (std::size_t start = 0; start < data.items.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(data.items.size(), start + static_cast<std::size_t>(batch_size));
    views.clear();
    ptrs.clear();
    for (std::size_t i = start; i < end; ++i) {
      views.push_back(eval_transform(data.items[i].image, aug));
      out.ids.push_back(data.items[i].id);
      out.labels.push_back(data.items[i].label);
    }
    for (const auto& v : views) ptrs.push_back(&v);
    Mat<S> px = images_to_batch<S>(ptrs);
    FeatureMap<S> fm = encode_batch(encoder, px, nullptr);
    out.features.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(end - start)) =
        global_average_pool(fm);
  }
  out.check();
  return out;
}

// Full token-level features for the pattern probe, stacked per image.
template <typename S>
Mat<S> compute_patch_features(VitParams<S>& encoder, const Dataset& data,
                              const AugmentationConfig& aug, int batch_size = 64) {
  if (data.items.empty()) throw std::invalid_argument("patch features: empty dataset");
  const int T = encoder.cfg.tokens();
  Mat<S> out(static_cast<Eigen::Index>(data.items.size()) * T, encoder.cfg.embed_dim);
  std::vector<Image> views;
  std::vector<const Image*> ptrs;
  for (std::size_t start = 0; start < data.items.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(data.items.size(), start + static_cast<std::size_t>(batch_size));
    views.clear();
    ptrs.clear();
    for (std::size_t i = start; i < end; ++i) views.push_back(eval_transform(data.items[i].image, aug));
    for (const auto& v : views) ptrs.push_back(&v);
    Mat<S> px = images_to_batch<S>(ptrs);
    FeatureMap<S> fm = encode_batch(encoder, px, nullptr);
    out.middleRows(static_cast<Eigen::Index>(start) * T, static_cast<Eigen::Index>(end - start) * T) =
        fm.values;
  }
  return out;
}

// ---------------------------------------------------------------------------
// k-nearest-neighbor classification
// ---------------------------------------------------------------------------

struct KnnResult {
  int correct = 0;
  int total = 0;
  double accuracy = 0.0;
};

// Cosine-similarity k-NN with majority vote. When vote counts tie, the tied
// class containing the single nearest neighbor wins (equivalently: the tied
// class whose best member is most similar).
template <typename S>
KnnResult knn_eval(const EmbeddingSet<S>& train, const EmbeddingSet<S>& eval, int k) {
  train.check();
  eval.check();
  if (k <= 0) throw std::invalid_argument("knn: k must be positive");
  if (train.size() == 0) throw std::invalid_argument("knn: empty reference set");
  const int kk = std::min<int>(k, static_cast<int>(train.size()));

  Mat<S> tn = normalized_rows(train.features);
  Mat<S> en = normalized_rows(eval.features);
  KnnResult res;
  res.total = static_cast<int>(eval.size());

  std::vector<int> order(train.size());
  for (Eigen::Index i = 0; i < en.rows(); ++i) {
    Vec<S> sims = tn * en.row(i).transpose();
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + kk, order.end(), [&](int a, int b) {
      if (sims(a) != sims(b)) return sims(a) > sims(b);
      return a < b;  // deterministic tie order
    });

    std::map<int, int> votes;
    std::map<int, S> best_sim;
    for (int j = 0; j < kk; ++j) {
      const int label = train.labels[static_cast<std::size_t>(order[j])];
      ++votes[label];
      auto it = best_sim.find(label);
      if (it == best_sim.end() || sims(order[j]) > it->second) best_sim[label] = sims(order[j]);
    }
    int best_label = -1;
    int best_count = -1;
    S best_tie = -std::numeric_limits<S>::infinity();
    for (const auto& [label, count] : votes) {
      const S tie = best_sim.at(label);
      if (count > best_count || (count == best_count && tie > best_tie)) {
        best_label = label;
        best_count = count;
        best_tie = tie;
      }
    }
    if (best_label == eval.labels[static_cast<std::size_t>(i)]) ++res.correct;
  }
  res.accuracy = res.total > 0 ? static_cast<double>(res.correct) / res.total : 0.0;
  return res;
}

// ---------------------------------------------------------------------------
// Retrieval mean average precision
// ---------------------------------------------------------------------------

struct RetrievalResult {
  double mean_ap = 0.0;
  int evaluated = 0;
  int skipped = 0;  // queries with no relevant database entries
};

// Ranks the database by cosine similarity for every query and averages the
// per-query average precision. Database entries sharing the query's id are
// skipped, so a set can be evaluated against itself. topk = 0 ranks the full
// database; otherwise AP is computed over the top-k ranks with the usual
// min(relevant, k) normalizer.
template <typename S>
RetrievalResult retrieval_map(const EmbeddingSet<S>& queries, const EmbeddingSet<S>& database,
                              int topk = 0) {
  queries.check();
  database.check();
  if (database.size() == 0) throw std::invalid_argument("retrieval: empty database");
  if (topk < 0) throw std::invalid_argument("retrieval: topk must be nonnegative");

  Mat<S> qn = normalized_rows(queries.features);
  Mat<S> dn = normalized_rows(database.features);

  RetrievalResult res;
  double ap_sum = 0.0;
  std::vector<int> order;
  for (Eigen::Index qi = 0; qi < qn.rows(); ++qi) {
    Vec<S> sims = dn * qn.row(qi).transpose();
    order.clear();
    int relevant_total = 0;
    for (std::size_t di = 0; di < database.size(); ++di) {
      if (database.ids[di] == queries.ids[static_cast<std::size_t>(qi)]) continue;
      order.push_back(static_cast<int>(di));
      if (database.labels[di] == queries.labels[static_cast<std::size_t>(qi)]) ++relevant_total;
    }
    if (relevant_total == 0) {
      ++res.skipped;
      continue;
    }
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (sims(a) != sims(b)) return sims(a) > sims(b);
      return a < b;
    });

    const int depth = topk > 0 ? std::min<int>(topk, static_cast<int>(order.size()))
                               : static_cast<int>(order.size());
    const int denom = topk > 0 ? std::min(relevant_total, topk) : relevant_total;
    int hits = 0;
    double ap = 0.0;
    for (int rank = 0; rank < depth; ++rank) {
      if (database.labels[static_cast<std::size_t>(order[rank])] ==
          queries.labels[static_cast<std::size_t>(qi)]) {
        ++hits;
        ap += static_cast<double>(hits) / (rank + 1);
      }
    }
    ap_sum += ap / denom;
    ++res.evaluated;
  }
  res.mean_ap = res.evaluated > 0 ? ap_sum / res.evaluated : 0.0;
  return res;
}

// ---------------------------------------------------------------------------
// Patch pattern probe
// ---------------------------------------------------------------------------

struct PatchRef {
  int image = 0;
  int token = 0;
};

struct PatchMatch {
  int image = 0;
  int token = 0;
  double similarity = 0.0;
};

// Most similar token features across the corpus, never from the query's own
// image. patch_features holds batch*tokens rows in feature-map order.
template <typename S>
std::vector<PatchMatch> patch_pattern_topk(const Mat<S>& patch_features, int batch, int tokens,
                                           PatchRef query, int k) {
  if (batch <= 0 || tokens <= 0 || patch_features.rows() != static_cast<Eigen::Index>(batch) * tokens)
    throw std::invalid_argument("pattern: feature rows must equal batch * tokens");
  if (query.image < 0 || query.image >= batch || query.token < 0 || query.token >= tokens)
    throw std::invalid_argument("pattern: query index out of range");
  if (k <= 0) throw std::invalid_argument("pattern: k must be positive");

  Mat<S> fn = normalized_rows(patch_features);
  Vec<S> sims = fn * fn.row(static_cast<Eigen::Index>(query.image) * tokens + query.token).transpose();

  std::vector<int> order;
  order.reserve(static_cast<std::size_t>((batch - 1)) * tokens);
  for (Eigen::Index r = 0; r < sims.size(); ++r)
    if (static_cast<int>(r / tokens) != query.image) order.push_back(static_cast<int>(r));
  const int kk = std::min<int>(k, static_cast<int>(order.size()));
  std::partial_sort(order.begin(), order.begin() + kk, order.end(), [&](int a, int b) {
    if (sims(a) != sims(b)) return sims(a) > sims(b);
    return a < b;
  });

  std::vector<PatchMatch> out;
  out.reserve(static_cast<std::size_t>(kk));
  for (int j = 0; j < kk; ++j) {
    PatchMatch m;
    m.image = order[static_cast<std::size_t>(j)] / tokens;
    m.token = order[static_cast<std::size_t>(j)] % tokens;
    m.similarity = static_cast<double>(sims(order[static_cast<std::size_t>(j)]));
    out.push_back(m);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Embedding CSV round trip
// ---------------------------------------------------------------------------

// id,label,f0..fD-1 with enough digits that float32 values survive the
// round trip bit-exactly.
template <typename S>
void export_embeddings(const EmbeddingSet<S>& set, const std::string& path) {
  set.check();
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("embeddings: cannot open " + path + " for writing");
  f << "id,label";
  for (Eigen::Index d = 0; d < set.features.cols(); ++d) f << ",f" << d;
  f << "\n";
  for (std::size_t i = 0; i < set.size(); ++i) {
    if (set.ids[i].find(',') != std::string::npos || set.ids[i].find('\n') != std::string::npos)
      throw std::invalid_argument("embeddings: id '" + set.ids[i] + "' contains a delimiter");
    f << set.ids[i] << ',' << set.labels[i];
    for (Eigen::Index d = 0; d < set.features.cols(); ++d) {
      std::ostringstream v;
      v << std::setprecision(std::numeric_limits<float>::max_digits10)
        << static_cast<float>(set.features(static_cast<Eigen::Index>(i), d));
      f << ',' << v.str();
    }
    f << "\n";
  }
  if (!f) throw std::runtime_error("embeddings: short write to " + path);
}

template <typename S>
EmbeddingSet<S> load_embeddings(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("embeddings: cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("embeddings: " + path + " is empty");
  // header defines the dimension
  Eigen::Index dim = 0;
  {
    std::stringstream ss(line);
    std::string col;
    int n = 0;
    while (std::getline(ss, col, ',')) ++n;
    if (n < 3) throw std::runtime_error("embeddings: header must be id,label,f0,...");
    dim = n - 2;
  }
  EmbeddingSet<S> set;
  std::vector<std::vector<S>> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    if (!std::getline(ss, field, ',')) throw std::runtime_error("embeddings: malformed row");
    set.ids.push_back(field);
    if (!std::getline(ss, field, ',')) throw std::runtime_error("embeddings: missing label");
    set.labels.push_back(std::stoi(field));
    std::vector<S> vals;
    vals.reserve(static_cast<std::size_t>(dim));
    while (std::getline(ss, field, ',')) vals.push_back(static_cast<S>(std::stof(field)));
    if (static_cast<Eigen::Index>(vals.size()) != dim)
      throw std::runtime_error("embeddings: row width does not match header");
    rows.push_back(std::move(vals));
  }
  set.features.resize(static_cast<Eigen::Index>(rows.size()), dim);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (Eigen::Index d = 0; d < dim; ++d) set.features(static_cast<Eigen::Index>(i), d) = rows[i][static_cast<std::size_t>(d)];
  set.check();
  return set;
}

}  // namespace mimco
