// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "trialign/datamodel.hpp"
#include "trialign/encoder.hpp"
#include "trialign/error.hpp"
#include "trialign/linalg.hpp"

namespace trialign {

enum class PromptAveraging {
  normalize_then_mean,  // project, normalize each template, average, re-normalize
  mean_then_normalize,  // project, average, normalize
};

/// Class embedding from several templated prompts of one class name.
inline Vector prompt_average(const std::vector<Vector>& template_vectors, const ModelState& state,
                             PromptAveraging order = PromptAveraging::normalize_then_mean) {
  require(!template_vectors.empty(), ErrorCode::invalid_argument, "prompt averaging needs at least one template");
  Vector mean(state.config.embed_dim, 0.0);
  for (const Vector& raw : template_vectors) {
    const Vector v = order == PromptAveraging::normalize_then_mean ? project_text(raw, state)
                                                                   : project_raw(raw, state, Modality::text);
    for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += v[k];
  }
  for (double& x : mean) x /= static_cast<double>(template_vectors.size());
  return normalized(mean, "averaged prompt embedding");
}

/// Expands each template's "{}" placeholder with a class name.
inline std::vector<std::string> expand_templates(const std::vector<std::string>& templates, const std::string& name) {
  std::vector<std::string> out;
  for (const auto& t : templates) {
    std::string s = t;
    if (auto pos = s.find("{}"); pos != std::string::npos) s.replace(pos, 2, name);
    out.push_back(std::move(s));
  }
  return out;
}

/// One template per non-empty, non-comment line.
inline std::vector<std::string> load_templates(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::io, "template file not found: " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    out.push_back(line);
  }
  return out;
}

struct ClassEmbeddingSet {
  std::vector<std::string> labels;
  Matrix vectors;  // one unit row per label

  std::size_t size() const { return labels.size(); }

  void validate() const {
    require(!labels.empty(), ErrorCode::invalid_argument, "class set is empty");
    require(vectors.rows() == labels.size(), ErrorCode::dim_mismatch, "one class vector per label is required");
    std::set<std::string> seen;
    for (std::size_t c = 0; c < labels.size(); ++c) {
      require(seen.insert(labels[c]).second, ErrorCode::duplicate_id, "duplicate class label '" + labels[c] + "'");
      require(std::abs(norm(vectors.row(c)) - 1.0) <= 1e-6, ErrorCode::invalid_argument,
              "class vector of '" + labels[c] + "' is not unit-norm");
    }
  }

  /// Normalizes each row on the way in.
  static ClassEmbeddingSet from_vectors(std::vector<std::string> labels, const std::vector<Vector>& raw) {
    require(labels.size() == raw.size(), ErrorCode::dim_mismatch, "one class vector per label is required");
    std::vector<Vector> rows;
    for (std::size_t c = 0; c < raw.size(); ++c) rows.push_back(normalized(raw[c], "class vector of '" + labels[c] + "'"));
    ClassEmbeddingSet set{std::move(labels), Matrix::from_rows(rows)};
    set.validate();
    return set;
  }
};

struct ScoredLabel {
  std::size_t class_index = 0;
  std::string label;
  double score = 0.0;
  bool operator==(const ScoredLabel&) const = default;
};

struct Prediction {
  std::string id;
  std::vector<ScoredLabel> ranked;
  bool operator==(const Prediction&) const = default;
};

/// Top-k classes per shape by cosine score, ties broken by class index.
inline std::vector<Prediction> zero_shot_classify(const std::vector<std::string>& ids, const Matrix& shape_embeddings,
                                                  const ClassEmbeddingSet& classes, std::size_t k) {
  classes.validate();
  require(shape_embeddings.rows() == ids.size(), ErrorCode::dim_mismatch, "one embedding row per id is required");
  require(shape_embeddings.cols() == classes.vectors.cols(), ErrorCode::dim_mismatch,
          "shape embeddings have dim " + std::to_string(shape_embeddings.cols()) + ", class vectors have dim " +
              std::to_string(classes.vectors.cols()));
  require(k >= 1 && k <= classes.size(), ErrorCode::invalid_argument,
          "k must lie in [1, " + std::to_string(classes.size()) + "]");
  std::vector<Prediction> out;
  out.reserve(ids.size());
  std::vector<ScoredLabel> scores(classes.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (std::size_t c = 0; c < classes.size(); ++c)
      scores[c] = {c, classes.labels[c], dot(shape_embeddings.row(i), classes.vectors.row(c))};
    std::partial_sort(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(k), scores.end(),
                      [](const ScoredLabel& a, const ScoredLabel& b) {
                        return a.score != b.score ? a.score > b.score : a.class_index < b.class_index;
                      });
    out.push_back({ids[i], std::vector<ScoredLabel>(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(k))});
  }
  return out;
}

/// Fraction of predictions whose true label is among the first k.
inline double topk_accuracy(const std::vector<Prediction>& predictions,
                            const std::map<std::string, std::string>& ground_truth, std::size_t k) {
  require(!predictions.empty(), ErrorCode::invalid_argument, "no predictions to score");
  std::size_t hits = 0;
  for (const Prediction& p : predictions) {
    auto it = ground_truth.find(p.id);
    require(it != ground_truth.end(), ErrorCode::not_found, "no ground-truth label for '" + p.id + "'");
    require(p.ranked.size() >= k, ErrorCode::invalid_argument,
            "'" + p.id + "' has fewer than " + std::to_string(k) + " predictions");
    for (std::size_t r = 0; r < k; ++r)
      if (p.ranked[r].label == it->second) {
        ++hits;
        break;
      }
  }
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

// ---------------------------------------------------------------------------
// Few-shot linear probing

struct LabeledEmbeddings {
  Matrix x;
  std::vector<std::string> labels;
};

struct ProbeConfig {
  std::size_t shots = 1;
  std::size_t seeds = 10;
  double l2 = 1e-3;
  std::size_t max_iterations = 500;
  double learning_rate = 1.0;

  void validate() const {
    require(shots >= 1, ErrorCode::invalid_argument, "shots must be positive");
    require(seeds >= 1, ErrorCode::invalid_argument, "seeds must be positive");
    require(l2 >= 0.0 && learning_rate > 0.0, ErrorCode::invalid_argument, "probe solver settings are invalid");
  }
};

struct ProbeResult {
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  std::vector<double> per_seed;
};

/// L2-regularized multinomial logistic regression fitted by full-batch
/// gradient descent. Weights are classes x dim.
class SoftmaxClassifier {
 public:
  static SoftmaxClassifier fit(const Matrix& x, const std::vector<std::size_t>& y, std::size_t classes,
                               const ProbeConfig& config) {
    const std::size_t n = x.rows(), d = x.cols();
    SoftmaxClassifier clf;
    clf.w_ = Matrix(classes, d);
    clf.b_.assign(classes, 0.0);
    Matrix gw(classes, d);
    Vector gb(classes), p(classes);
    for (std::size_t it = 0; it < config.max_iterations; ++it) {
      std::fill(gw.data().begin(), gw.data().end(), 0.0);
      std::fill(gb.begin(), gb.end(), 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        clf.probabilities(x.row(i), p);
        p[y[i]] -= 1.0;
        for (std::size_t c = 0; c < classes; ++c) {
          gb[c] += p[c];
          auto g = gw.row(c);
          for (std::size_t k = 0; k < d; ++k) g[k] += p[c] * x(i, k);
        }
      }
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t c = 0; c < classes; ++c) {
        clf.b_[c] -= config.learning_rate * gb[c] * inv_n;
        for (std::size_t k = 0; k < d; ++k)
          clf.w_(c, k) -= config.learning_rate * (gw(c, k) * inv_n + config.l2 * clf.w_(c, k));
      }
    }
    return clf;
  }

  std::size_t predict(std::span<const double> x) const {
    Vector p(b_.size());
    probabilities(x, p);
    return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
  }

 private:
  void probabilities(std::span<const double> x, Vector& p) const {
    double mx = -INFINITY;
    for (std::size_t c = 0; c < b_.size(); ++c) {
      p[c] = b_[c] + dot(w_.row(c), x);
      mx = std::max(mx, p[c]);
    }
    double s = 0.0;
    for (double& v : p) s += (v = std::exp(v - mx));
    for (double& v : p) v /= s;
  }

  Matrix w_;
  Vector b_;
};

/// For each seed: sample `shots` examples per class, fit, and score on `test`.
inline ProbeResult linear_probe(const LabeledEmbeddings& train, const LabeledEmbeddings& test,
                                const ProbeConfig& config, Rng& rng) {
  config.validate();
  require(train.x.rows() == train.labels.size() && test.x.rows() == test.labels.size(), ErrorCode::dim_mismatch,
          "one label per embedding row is required");
  require(test.x.rows() >= 1, ErrorCode::invalid_argument, "probe test set is empty");
  require(train.x.cols() == test.x.cols(), ErrorCode::dim_mismatch, "train and test embeddings differ in dim");

  std::map<std::string, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < train.labels.size(); ++i) by_class[train.labels[i]].push_back(i);
  require(!by_class.empty(), ErrorCode::invalid_argument, "probe training set is empty");
  std::vector<std::string> class_names;
  for (const auto& [label, rows] : by_class) {
    require(rows.size() >= config.shots, ErrorCode::insufficient_data,
            "class '" + label + "' has " + std::to_string(rows.size()) + " examples, " +
                std::to_string(config.shots) + " shots requested");
    class_names.push_back(label);
  }

  ProbeResult result;
  for (std::size_t s = 0; s < config.seeds; ++s) {
    Matrix x(class_names.size() * config.shots, train.x.cols());
    std::vector<std::size_t> y;
    std::size_t row = 0;
    for (std::size_t c = 0; c < class_names.size(); ++c) {
      std::vector<std::size_t> pool = by_class[class_names[c]];
      std::shuffle(pool.begin(), pool.end(), rng);
      for (std::size_t k = 0; k < config.shots; ++k, ++row) {
        std::copy(train.x.row(pool[k]).begin(), train.x.row(pool[k]).end(), x.row(row).begin());
        y.push_back(c);
      }
    }
    const auto clf = SoftmaxClassifier::fit(x, y, class_names.size(), config);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < test.x.rows(); ++i)
      if (class_names[clf.predict(test.x.row(i))] == test.labels[i]) ++correct;
    result.per_seed.push_back(static_cast<double>(correct) / static_cast<double>(test.x.rows()));
  }
  const double n = static_cast<double>(result.per_seed.size());
  result.mean_accuracy = std::accumulate(result.per_seed.begin(), result.per_seed.end(), 0.0) / n;
  double var = 0.0;
  for (double a : result.per_seed) var += (a - result.mean_accuracy) * (a - result.mean_accuracy);
  result.std_accuracy = std::sqrt(var / n);
  return result;
}

}  // namespace trialign
