// SPDX-License-Identifier: Apache-2.0
// Acceptance report: one PASS/FAIL line per criterion. Exit status is
// non-zero when any line fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "trialign/trialign.hpp"

namespace trialign {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail << "first failure: " << what << "; ";
    pass = pass && ok;
  }
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string temp_path(const std::string& name) {
  return (fs::temp_directory_path() / ("trialign-acceptance-" + name)).string();
}

double zero_shot_top1(const synthetic::Data& d, const ModelState& s) {
  std::vector<std::string> labels, ids;
  std::vector<Vector> rows;
  for (const auto& [label, keys] : d.class_templates) {
    std::vector<Vector> raw;
    for (const auto& k : keys) raw.push_back(d.train.cache.text(k));
    labels.push_back(label);
    rows.push_back(prompt_average(raw, s));
  }
  for (const auto& r : d.test.records) ids.push_back(r.id);
  const auto classes = ClassEmbeddingSet::from_vectors(labels, rows);
  return topk_accuracy(zero_shot_classify(ids, embed_shapes(d.test.records, s), classes, 1), d.test.split_labels, 1);
}

void p1(Outcome& o) {
  const auto t0 = Clock::now();
  Rng rng(101);
  for (int rep = 0; rep < 20; ++rep) {
    const auto b = oracle::random_batch(1, 7, rng);
    o.require(std::abs(contrastive_loss(b, 0.05 + 0.1 * rep)) <= 1e-12, "n=1 loss not zero");
  }
  double worst = 0.0;
  std::bernoulli_distribution coin(0.3);
  for (std::size_t n = 1; n <= 8; ++n)
    for (int rep = 0; rep < 50; ++rep) {
      const auto b = oracle::random_batch(n, 1 + rep % 9, rng);
      NegativeMask mask(n);
      if (rep % 2)
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j)
            if (coin(rng)) mask.exclude(i, j);
      const double tau = std::uniform_real_distribution<double>(0.02, 3.0)(rng);
      worst = std::max(worst, std::abs(contrastive_loss(b, tau, mask) - oracle::naive_loss(b, tau, mask)));
    }
  o.require(worst <= 1e-10, "oracle mismatch");
  const double secs = seconds_since(t0);
  o.require(secs < 1.0, "runtime");
  o.detail << "max |loss - oracle| " << worst << ", " << secs << " s";
}

void p2(Outcome& o) {
  const auto t0 = Clock::now();
  Rng rng(202);
  EncoderConfig cfg;
  cfg.point_feature_dims = {5, 7};
  cfg.head_dims = {6, 4};
  cfg.embed_dim = 4;
  cfg.text_dim = 3;
  cfg.image_dim = 5;
  std::size_t instances = 0, attempts = 0, checked = 0;
  double worst = 0.0;
  while (instances < 20 && ++attempts < 2000) {
    const std::size_t n = 2 + attempts % 3;
    Dataset d;
    d.cache = EmbeddingCache(cfg.text_dim, cfg.image_dim);
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_real_distribution<double> u(-1, 1), c(0, 1);
    for (std::size_t i = 0; i < n; ++i) {
      ShapeRecord r;
      r.id = "s" + std::to_string(i);
      for (int p = 0; p < 5; ++p) r.points.push_back({u(rng), u(rng), u(rng), c(rng), c(rng), c(rng)});
      auto vec = [&](std::size_t dim) {
        std::vector<float> v(dim);
        for (float& x : v) x = static_cast<float>(g(rng));
        return v;
      };
      d.cache.add_text(r.id + "/t", vec(cfg.text_dim));
      d.cache.add_image(r.id + "/i", vec(cfg.image_dim));
      r.text_candidates[TextSource::raw] = {r.id + "/t"};
      r.image_view_keys = {r.id + "/i"};
      d.manifest.records.push_back(std::move(r));
    }
    ModelState state = ModelState::initialize(cfg, rng);
    state.params.back() = std::log(0.4);
    bool smooth = true;
    for (const auto& r : d.manifest.records)
      smooth = smooth && oracle::encoder_kink_margin(point_features(r.points, 6), state) >= 1e-3;
    if (!smooth) continue;
    std::vector<const ShapeRecord*> shapes;
    for (const auto& r : d.manifest.records) shapes.push_back(&r);
    NegativeMask mask(n);
    if (n > 2) mask.exclude(2, 0);
    detail::BatchForward f;
    try {
      Rng draw(9);
      f = detail::forward_batch(shapes, d.cache, state, draw, nullptr);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::degenerate) throw;
      continue;
    }
    const auto grad = detail::backward_batch(f, contrastive_loss_grad(f.batch, state.tau(), mask), state);
    auto loss_at = [&](const std::vector<double>& params) {
      ModelState s = state;
      s.params = params;
      Rng draw(9);
      return oracle::naive_loss(detail::forward_batch(shapes, d.cache, s, draw, nullptr).batch, std::exp(params.back()),
                                mask);
    };
    for (std::size_t i = 0; i < grad.size(); ++i, ++checked)
      worst = std::max(worst, oracle::relative_error(grad[i], oracle::central_difference(loss_at, state.params, i, 1e-4)));
    ++instances;
  }
  o.require(instances >= 20, "too few smooth instances");
  o.require(worst <= 1e-5, "gradient mismatch");
  const double secs = seconds_since(t0);
  o.require(secs < 30.0, "runtime");
  o.detail << instances << " instances, " << checked << " coordinates, max rel err " << worst << ", " << secs << " s";
}

void p3(Outcome& o) {
  AlignedBatch b;
  b.HP = Matrix::from_rows({{1, 0}, {0, 1}});
  b.HT = b.HP;
  b.HI = b.HP;
  const double loss = contrastive_loss(b, 1.0);
  // Independent scalar evaluation of ln(1 + e^-1).
  const double expected = 0.31326168751822286;
  o.require(std::abs(loss - expected) <= 1e-9, "worked value");
  o.detail.precision(17);
  o.detail << "loss " << loss;
}

void p4(Outcome& o) {
  Rng rng(404);
  // Neighbor tables with coarse coordinates (many ties) up to n = 512.
  for (std::size_t n : {2u, 9u, 64u, 200u, 512u}) {
    Matrix emb(n, 3);
    std::uniform_int_distribution<int> coarse(-2, 2);
    for (std::size_t i = 0; i < n; ++i) {
      Vector v;
      do v = {double(coarse(rng)), double(coarse(rng)), double(coarse(rng))};
      while (norm(v) == 0.0);
      const Vector u = normalized(v);
      for (std::size_t k = 0; k < 3; ++k) emb(i, k) = u[k];
    }
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back("id" + std::to_string((i * 7919) % 100000));
    for (std::size_t k : {std::size_t{1}, std::size_t{10}, n})
      o.require(build_neighbor_table(ids, emb, k) == oracle::brute_force_knn(ids, emb, k), "knn n=" + std::to_string(n));
  }
  // Seeded batches: s*m distinct members.
  std::size_t plans = 0;
  for (const MiningConfig c : {MiningConfig{2, 3, 4, 0.1}, MiningConfig{8, 5, 10, 0.1}, MiningConfig{}}) {
    const std::size_t n = c.batch_size() * 3;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back("s" + std::to_string(i));
    const auto table = build_neighbor_table(ids, oracle::random_unit_rows(n, 6, rng), c.knn_depth);
    for (const auto& plan : build_seeded_batches(table, c, rng, 20)) {
      const std::set<std::size_t> distinct(plan.indices.begin(), plan.indices.end());
      o.require(plan.indices.size() == c.seeds * c.group_size && distinct.size() == plan.indices.size(),
                "batch members not distinct");
      ++plans;
    }
  }
  o.require(MiningConfig{}.batch_size() == 200, "default batch size");
  // Mask against the direct inequality.
  std::size_t asymmetric = 0;
  for (int rep = 0; rep < 40; ++rep) {
    const std::size_t s = 4, m = 5, n = s * m;
    BatchPlan plan;
    for (std::size_t i = 0; i < n; ++i) {
      plan.indices.push_back(i);
      plan.seed_of.push_back(i / m);
    }
    const Matrix HT = oracle::random_unit_rows(n, 3, rng), HI = oracle::random_unit_rows(n, 3, rng);
    const double delta = rep % 2 ? 0.1 : 0.4;
    const auto mask = false_negative_mask(plan, HT, HI, delta);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double tji = 0, tii = 0;
        for (std::size_t k = 0; k < 3; ++k) {
          tji += HT(j, k) * HI(i, k);
          tii += HT(i, k) * HI(i, k);
        }
        o.require(mask(i, j) == (i != j && i / m == j / m && tji + delta > tii), "mask mismatch");
        asymmetric += mask(i, j) != mask(j, i);
      }
  }
  o.require(asymmetric > 0, "no directional asymmetry observed");
  o.detail << plans << " batch plans, " << asymmetric << " asymmetric mask pairs";
}

void p5(Outcome& o) {
  synthetic::Config sc;
  sc.seed = 1;
  auto d = synthetic::generate(sc);
  EncoderConfig e;
  e.point_feature_dims = {32, 64};
  e.head_dims = {64, 32};
  e.embed_dim = 32;
  e.text_dim = sc.text_dim;
  e.image_dim = sc.image_dim;
  TrainConfig t;
  t.batch_size = 40;
  t.lr0 = 3e-3;
  t.optimizer = OptimizerKind::adam;
  t.max_epochs = 30;
  t.round1_max_epochs = 15;
  t.mining = {8, 5, 10, 0.1};
  t.seed = 7;
  const auto t0 = Clock::now();
  const auto result = train(d.train, e, t);
  const double secs = seconds_since(t0);
  const double acc = zero_shot_top1(d, result.state);
  o.require(d.test.records.size() == 200, "held-out size");
  o.require(acc >= 0.90, "accuracy");
  o.require(secs < 600.0, "training time");
  o.detail << "10 classes, " << d.test.records.size() << " held-out, top-1 " << acc << ", train " << secs << " s";
}

void p6(Outcome& o) {
  int wins = 0, within = 0;
  double sum_mined = 0, sum_random = 0;
  std::ostringstream per_seed;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    synthetic::Config sc;
    sc.seed = seed;
    sc.confusable_pairs = 3;
    sc.train_per_class = {60, 60, 40, 40, 20, 20, 40, 40, 20, 20};
    sc.test_per_class = 50;
    sc.shape_jitter = 0.3;
    sc.confusable_stretch = 1.2;
    const auto d = synthetic::generate(sc);
    EncoderConfig e;
    e.point_feature_dims = {32, 64};
    e.head_dims = {64, 32};
    e.embed_dim = 32;
    e.text_dim = sc.text_dim;
    e.image_dim = sc.image_dim;
    TrainConfig t;
    t.batch_size = 40;
    t.lr0 = 3e-3;
    t.lr_decay = 0.99;
    t.optimizer = OptimizerKind::adam;
    t.max_epochs = 20;
    t.round1_max_epochs = 10;
    t.mining = {8, 5, 10, 0.1};
    t.val_fraction = 0.0;
    t.seed = 1000 + seed;
    const auto mined = train(d.train, e, t);
    t.hard_mining = false;
    const auto random = train(d.train, e, t);
    o.require(mined.report.epochs.back().steps == random.report.epochs.back().steps, "unequal step budgets");
    const double a = zero_shot_top1(d, mined.last), b = zero_shot_top1(d, random.last);
    wins += a > b;
    within += a >= b - 0.01;
    sum_mined += a;
    sum_random += b;
    per_seed << (seed > 1 ? " " : "") << a << "/" << b;
  }
  o.require(within == 10, "mined below random - 0.01 on some seed");
  o.require(wins >= 7, "fewer than 7 strict wins");
  o.detail << "mined/random per seed " << per_seed.str() << "; wins " << wins << "/10, within " << within
           << "/10, mean " << sum_mined / 10 << " vs " << sum_random / 10;
}

void p7(Outcome& o) {
  Rng rng(707);
  const std::size_t n = 10000, d = 16;
  Matrix raw = oracle::random_unit_rows(n, d, rng);
  for (std::size_t i = 0; i < 50; ++i)
    for (std::size_t k = 0; k < d; ++k) raw(n - 1 - i, k) = raw(i * 11, k);  // exact ties
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back("row" + std::to_string(i));
  const auto idx = build_index(ids, raw);
  auto cos = [&](std::size_t i, const Vector& q) {
    double dq = 0, nq = 0;
    for (std::size_t k = 0; k < d; ++k) {
      dq += idx.rows(i, k) * q[k];
      nq += q[k] * q[k];
    }
    return dq / std::sqrt(nq);
  };
  std::normal_distribution<double> g(0.0, 3.0);
  for (int rep = 0; rep < 4; ++rep) {
    Vector a(d), b(d);
    for (auto& x : a) x = g(rng);
    for (auto& x : b) x = g(rng);
    if (rep == 0) a.assign(idx.rows.row(11).begin(), idx.rows.row(11).end());  // a duplicated row
    std::vector<double> single, joint;
    for (std::size_t i = 0; i < n; ++i) {
      single.push_back(cos(i, a));
      joint.push_back(std::min(cos(i, a), cos(i, b)));
    }
    for (std::size_t k : {1u, 10u, 100u}) {
      const auto hs = query(idx, a, k), hj = query_joint(idx, a, b, k);
      const auto es = oracle::selection_rank(single, k), ej = oracle::selection_rank(joint, k);
      o.require(hs.size() == k && hj.size() == k, "hit count");
      for (std::size_t r = 0; r < k; ++r) {
        o.require(hs[r].row == es[r].first && std::abs(hs[r].score - es[r].second) <= 1e-12, "query order");
        o.require(hj[r].row == ej[r].first && std::abs(hj[r].score - ej[r].second) <= 1e-12, "joint order");
      }
    }
  }
  const double h = std::sqrt(2.0) / 2;
  const auto fixture = build_index({"x", "y", "diag"}, std::vector<Vector>{{1, 0}, {0, 1}, {h, h}});
  const auto top = query_joint(fixture, Vector{1, 0}, Vector{0, 1}, 3);
  o.require(top[0].id == "diag", "bisector not first");
  const Vector out = renorm_for_conditioning(oracle::random_unit(768, rng));
  // 0.5 * sqrt(768), evaluated independently.
  o.require(std::abs(norm(out) - 13.856406460551018) <= 1e-9, "renorm");
  o.detail.precision(17);
  o.detail << n << " rows; joint fixture top " << top[0].id << "; renorm " << norm(out);
}

LabeledEmbeddings clusters(std::size_t per_class, std::size_t classes, double spread, Rng& rng) {
  std::normal_distribution<double> g(0.0, spread);
  LabeledEmbeddings out{Matrix(per_class * classes, classes), {}};
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t k = 0; k < classes; ++k) out.x(c * per_class + i, k) = (k == c ? 1.0 : 0.0) + g(rng);
      out.labels.push_back("class" + std::to_string(c));
    }
  return out;
}

void p8(Outcome& o) {
  Rng rng(808);
  for (int rep = 0; rep < 10; ++rep) {
    const Matrix shapes = oracle::random_unit_rows(60, 6, rng);
    Matrix class_rows = oracle::random_unit_rows(8, 6, rng);
    for (std::size_t k = 0; k < 6; ++k) class_rows(2, k) = class_rows(6, k);
    std::vector<std::string> labels, ids;
    for (int c = 0; c < 8; ++c) labels.push_back("L" + std::to_string(c));
    for (int i = 0; i < 60; ++i) ids.push_back("s" + std::to_string(i));
    const auto preds = zero_shot_classify(ids, shapes, ClassEmbeddingSet{labels, class_rows}, 5);
    for (std::size_t i = 0; i < 60; ++i) {
      std::vector<double> scores;
      for (std::size_t c = 0; c < 8; ++c) {
        double s = 0;
        for (std::size_t k = 0; k < 6; ++k) s += shapes(i, k) * class_rows(c, k);
        scores.push_back(s);
      }
      const auto expected = oracle::selection_rank(scores, 5);
      for (std::size_t r = 0; r < 5; ++r)
        o.require(preds[i].ranked[r].class_index == expected[r].first &&
                      std::abs(preds[i].ranked[r].score - expected[r].second) <= 1e-12,
                  "zero-shot oracle");
    }
  }
  auto ranked = [](const std::string& id) {
    Prediction p{id, {}};
    const std::vector<std::string> order = {"x", "y", "z", "w", "v"};
    for (std::size_t i = 0; i < order.size(); ++i) p.ranked.push_back({i, order[i], 1.0 - 0.1 * i});
    return p;
  };
  const std::vector<Prediction> preds = {ranked("a"), ranked("b"), ranked("c")};
  const std::map<std::string, std::string> truth = {{"a", "x"}, {"b", "y"}, {"c", "w"}};
  const double t1 = topk_accuracy(preds, truth, 1), t3 = topk_accuracy(preds, truth, 3), t5 = topk_accuracy(preds, truth, 5);
  o.require(std::abs(t1 - 1.0 / 3) < 1e-15 && std::abs(t3 - 2.0 / 3) < 1e-15 && t5 == 1.0, "top-k fixture");

  ProbeConfig config;
  config.shots = 4;
  const auto sep = linear_probe(clusters(20, 2, 0.05, rng), clusters(50, 2, 0.05, rng), config, rng);
  o.require(sep.mean_accuracy == 1.0, "separable probe");
  auto train = clusters(20, 10, 0.3, rng), test = clusters(100, 10, 0.3, rng);
  std::shuffle(train.labels.begin(), train.labels.end(), rng);
  std::shuffle(test.labels.begin(), test.labels.end(), rng);
  const auto shuffled = linear_probe(train, test, config, rng);
  o.require(std::abs(shuffled.mean_accuracy - 0.1) <= 0.05, "shuffled probe");
  o.require(shuffled.per_seed.size() == 10, "probe seeds");
  o.detail << "top-k " << t1 << "/" << t3 << "/" << t5 << "; probe separable " << sep.mean_accuracy << ", shuffled "
           << shuffled.mean_accuracy;
}

synthetic::Data small_data() {
  synthetic::Config c;
  c.classes = 4;
  c.train_count = 30;
  c.test_per_class = 2;
  c.points = 48;
  c.text_dim = 12;
  c.image_dim = 12;
  c.seed = 9;
  return synthetic::generate(c);
}

TrainConfig small_train() {
  TrainConfig t;
  t.batch_size = 24;
  t.lr0 = 0.05;
  t.max_epochs = 6;
  t.round1_max_epochs = 3;
  t.mining = {4, 3, 5, 0.1};
  t.seed = 7;
  return t;
}

EncoderConfig small_encoder() {
  EncoderConfig e;
  e.point_feature_dims = {16, 32};
  e.head_dims = {32, 16};
  e.embed_dim = 16;
  e.text_dim = e.image_dim = 12;
  return e;
}

void p9(Outcome& o) {
  const auto d = small_data();
  std::vector<std::vector<std::uint8_t>> ckpts;
  std::vector<std::string> reports;
  for (int run = 0; run < 2; ++run) {
    const auto r = train(d.train, small_encoder(), small_train());
    const std::string path = temp_path("det" + std::to_string(run) + ".ckpt");
    save_checkpoint(r.state, path);
    ckpts.push_back(read_bytes(path));
    fs::remove(path);
    reports.push_back(report_json(r.report).dump());
  }
  o.require(!ckpts[0].empty() && ckpts[0] == ckpts[1], "checkpoints differ");
  o.require(reports[0] == reports[1], "reports differ");
  o.detail << "checkpoint " << ckpts[0].size() << " bytes, report " << reports[0].size() << " bytes, identical";
}

void p10(Outcome& o) {
  const auto d = small_data();
  const std::string path = temp_path("frozen.bin");
  save_cache(d.train.cache, path);
  const auto before = read_bytes(path);
  Dataset loaded{d.train.manifest, load_cache(path)};
  train(loaded, small_encoder(), small_train());
  o.require(read_bytes(path) == before, "cache file changed");
  o.require(encode_cache(loaded.cache) == before, "in-memory cache changed");
  fs::remove(path);
  o.detail << before.size() << " cache bytes unchanged";
}

void s1(Outcome& o) {
  const std::string path = std::string(TRIALIGN_FIXTURE_DIR) + "/golden_cache.bin";
  const EmbeddingCache c = load_cache(path);
  o.require(c.text_raw("chair/raw") == std::vector<float>{0.5f, -1.25f, 3.0f}, "chair/raw");
  o.require(c.text_raw("chair/caption") == std::vector<float>{1e-3f, 2.0f, -0.0f} &&
                std::signbit(c.text_raw("chair/caption")[2]),
            "chair/caption");
  o.require(c.text_raw("lamp/raw") == std::vector<float>{7.75f, 0.125f, -6.5f}, "lamp/raw");
  o.require(c.image_raw("lamp/view0") == std::vector<float>{-1.5f, 0.25f, 1e-7f, 65504.0f}, "lamp/view0");
  o.require(encode_cache(c) == read_bytes(path), "re-encode differs");
  o.detail << "golden fixture " << read_bytes(path).size() << " bytes";
}

}  // namespace
}  // namespace trialign

int main() {
  using namespace trialign;
  const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria = {
      {"P1 loss correctness", p1},     {"P2 gradient check", p2},      {"P3 worked value", p3},
      {"P4 mining correctness", p4},   {"P5 synthetic alignment", p5}, {"P6 hard-mining benefit", p6},
      {"P7 retrieval", p7},            {"P8 evaluation kit", p8},      {"P9 determinism", p9},
      {"P10 frozen cache", p10},       {"S1 cache round-trip", s1},
  };
  int failures = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    try {
      run(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "exception: " << e.what();
    }
    failures += !o.pass;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.str().c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
