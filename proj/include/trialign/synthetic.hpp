// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "trialign/datamodel.hpp"
#include "trialign/error.hpp"

// Synthetic tri-modal data with known class structure: each latent class has
// a text prototype, an image prototype and a parametric surface generator.
// Used by the end-to-end tests and the `synth` CLI command.

namespace trialign::synthetic {

enum class Solid { ellipsoid, box, cylinder, cone, torus };

struct ClassShape {
  Solid solid = Solid::ellipsoid;
  std::array<double, 3> extent = {1, 1, 1};
};

/// The ten base classes, distinguishable by solid type and aspect ratio.
inline std::vector<ClassShape> base_classes() {
  return {
      {Solid::ellipsoid, {1.0, 1.0, 1.0}}, {Solid::box, {1.0, 1.0, 1.0}},      {Solid::box, {0.5, 0.5, 1.5}},
      {Solid::box, {1.5, 1.5, 0.3}},       {Solid::cylinder, {0.6, 0.6, 1.5}}, {Solid::cylinder, {1.2, 1.2, 0.25}},
      {Solid::cone, {0.8, 0.8, 1.4}},      {Solid::torus, {1.0, 1.0, 0.3}},    {Solid::ellipsoid, {1.6, 0.5, 0.5}},
      {Solid::box, {1.8, 0.4, 0.4}},
  };
}

struct Config {
  std::size_t classes = 10;
  std::vector<std::size_t> train_per_class = {};  // empty: train_count for every class
  std::size_t train_count = 40;
  std::size_t test_per_class = 20;
  std::size_t points = 128;
  std::size_t text_dim = 32;
  std::size_t image_dim = 32;
  std::size_t views = 3;
  std::size_t templates = 3;
  double image_noise = 0.1;     // per component, prototypes are N(0, 1)
  double text_noise = 0.1;
  double template_noise = 0.05;
  double point_noise = 0.01;
  double shape_jitter = 0.1;    // relative per-axis extent jitter
  // Class 2p+1 becomes a near copy of class 2p for p < confusable_pairs:
  // stretched geometry and a correlated text prototype.
  std::size_t confusable_pairs = 0;
  double confusable_stretch = 1.3;
  double confusable_text_corr = 0.7;
  std::uint64_t seed = 1;
};

struct Data {
  Dataset train;                  // labeled; cache holds every key below
  DatasetManifest test;           // held-out shapes with labels, same cache
  std::vector<std::string> labels;
  std::map<std::string, std::vector<std::string>> class_templates;  // label -> text keys
};

inline PointCloud sample_solid(const ClassShape& shape, std::size_t n, double noise, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const auto [ax, ay, az] = shape.extent;
  const double two_pi = 2.0 * std::numbers::pi;
  PointCloud pts;
  pts.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    double x = 0, y = 0, z = 0;
    switch (shape.solid) {
      case Solid::ellipsoid: {
        double gx = gauss(rng), gy = gauss(rng), gz = gauss(rng);
        const double len = std::sqrt(gx * gx + gy * gy + gz * gz) + 1e-12;
        x = ax * gx / len, y = ay * gy / len, z = az * gz / len;
        break;
      }
      case Solid::box: {
        const std::array<double, 3> area = {ay * az, ax * az, ax * ay};
        const double pick = u(rng) * (area[0] + area[1] + area[2]);
        const int axis = pick < area[0] ? 0 : (pick < area[0] + area[1] ? 1 : 2);
        const double side = u(rng) < 0.5 ? -1.0 : 1.0;
        x = ax * (2 * u(rng) - 1), y = ay * (2 * u(rng) - 1), z = az * (2 * u(rng) - 1);
        (axis == 0 ? x : axis == 1 ? y : z) = side * (axis == 0 ? ax : axis == 1 ? ay : az);
        break;
      }
      case Solid::cylinder: {
        const double r = 0.5 * (ax + ay);
        const double side_area = two_pi * r * 2 * az, cap_area = 2 * std::numbers::pi * r * r;
        const double t = two_pi * u(rng);
        if (u(rng) * (side_area + cap_area) < side_area) {
          x = ax * std::cos(t), y = ay * std::sin(t), z = az * (2 * u(rng) - 1);
        } else {
          const double s = std::sqrt(u(rng));
          x = ax * s * std::cos(t), y = ay * s * std::sin(t), z = u(rng) < 0.5 ? -az : az;
        }
        break;
      }
      case Solid::cone: {
        const double t = two_pi * u(rng);
        if (u(rng) < 0.7) {
          const double h = 1.0 - std::sqrt(u(rng));  // height fraction, denser at the base
          x = ax * (1 - h) * std::cos(t), y = ay * (1 - h) * std::sin(t), z = az * (2 * h - 1);
        } else {
          const double s = std::sqrt(u(rng));
          x = ax * s * std::cos(t), y = ay * s * std::sin(t), z = -az;
        }
        break;
      }
      case Solid::torus: {
        const double a = two_pi * u(rng), b = two_pi * u(rng);
        const double tube = az;
        x = ax * (1 + tube * std::cos(b)) * std::cos(a) / (1 + tube);
        y = ay * (1 + tube * std::cos(b)) * std::sin(a) / (1 + tube);
        z = tube * std::sin(b);
        break;
      }
    }
    pts.push_back({x + noise * gauss(rng), y + noise * gauss(rng), z + noise * gauss(rng), 0, 0, 0});
  }
  return pts;
}

namespace detail {

inline std::vector<double> gaussian_vector(std::size_t dim, double sigma, Rng& rng) {
  std::normal_distribution<double> g(0.0, sigma);
  std::vector<double> v(dim);
  for (double& x : v) x = g(rng);
  return v;
}

inline std::vector<float> noisy(const std::vector<double>& proto, double sigma, Rng& rng) {
  std::normal_distribution<double> g(0.0, sigma);
  std::vector<float> v(proto.size());
  for (std::size_t i = 0; i < proto.size(); ++i) v[i] = static_cast<float>(proto[i] + g(rng));
  return v;
}

}  // namespace detail

inline Data generate(const Config& config) {
  require(config.classes >= 1 && config.classes <= 10, ErrorCode::invalid_argument,
          "synthetic generator supports 1 to 10 classes");
  require(2 * config.confusable_pairs <= config.classes, ErrorCode::invalid_argument,
          "too many confusable pairs for the class count");
  require(config.train_per_class.empty() || config.train_per_class.size() == config.classes,
          ErrorCode::invalid_argument, "train_per_class needs one count per class");
  require(config.points >= 1 && config.views >= 1 && config.templates >= 1, ErrorCode::invalid_argument,
          "synthetic counts must be positive");
  Rng rng(config.seed);

  auto shapes = base_classes();
  shapes.resize(config.classes);
  std::vector<std::vector<double>> text_proto(config.classes), image_proto(config.classes);
  for (std::size_t c = 0; c < config.classes; ++c) {
    text_proto[c] = detail::gaussian_vector(config.text_dim, 1.0, rng);
    image_proto[c] = detail::gaussian_vector(config.image_dim, 1.0, rng);
  }
  const double rho = config.confusable_text_corr;
  for (std::size_t p = 0; p < config.confusable_pairs; ++p) {
    const std::size_t a = 2 * p, b = 2 * p + 1;
    shapes[b] = shapes[a];
    shapes[b].extent[2] *= config.confusable_stretch;
    for (std::size_t k = 0; k < config.text_dim; ++k)
      text_proto[b][k] = rho * text_proto[a][k] + std::sqrt(1 - rho * rho) * text_proto[b][k];
  }

  Data data;
  EmbeddingCache cache(config.text_dim, config.image_dim);
  for (std::size_t c = 0; c < config.classes; ++c) data.labels.push_back("class" + std::to_string(c));

  auto make_shape = [&](const std::string& id, std::size_t c) {
    ShapeRecord r;
    r.id = id;
    r.dataset_tag = "synthetic";
    ClassShape s = shapes[c];
    std::uniform_real_distribution<double> jitter(1 - config.shape_jitter, 1 + config.shape_jitter);
    for (double& e : s.extent) e *= jitter(rng);
    r.points = sample_solid(s, config.points, config.point_noise, rng);
    std::uniform_real_distribution<double> base(0.2, 0.8);
    const double cr = base(rng), cg = base(rng), cb = base(rng);
    for (Point& p : r.points) p.r = cr, p.g = cg, p.b = cb;
    cache.add_text(id + "/raw", detail::noisy(text_proto[c], config.text_noise, rng));
    cache.add_text(id + "/caption", detail::noisy(text_proto[c], config.text_noise, rng));
    r.text_candidates[TextSource::raw] = {id + "/raw"};
    r.text_candidates[TextSource::caption] = {id + "/caption"};
    for (std::size_t v = 0; v < config.views; ++v) {
      const std::string key = id + "/view" + std::to_string(v);
      cache.add_image(key, detail::noisy(image_proto[c], config.image_noise, rng));
      r.image_view_keys.push_back(key);
    }
    return r;
  };

  for (std::size_t c = 0; c < config.classes; ++c) {
    const std::size_t count = config.train_per_class.empty() ? config.train_count : config.train_per_class[c];
    for (std::size_t i = 0; i < count; ++i) {
      const std::string id = "train-c" + std::to_string(c) + "-" + std::to_string(i);
      data.train.manifest.records.push_back(make_shape(id, c));
      data.train.manifest.split_labels[id] = data.labels[c];
    }
  }
  for (std::size_t c = 0; c < config.classes; ++c)
    for (std::size_t i = 0; i < config.test_per_class; ++i) {
      const std::string id = "test-c" + std::to_string(c) + "-" + std::to_string(i);
      data.test.records.push_back(make_shape(id, c));
      data.test.split_labels[id] = data.labels[c];
    }
  for (std::size_t c = 0; c < config.classes; ++c)
    for (std::size_t t = 0; t < config.templates; ++t) {
      const std::string key = "template/" + data.labels[c] + "/" + std::to_string(t);
      cache.add_text(key, detail::noisy(text_proto[c], config.template_noise, rng));
      data.class_templates[data.labels[c]].push_back(key);
    }
  data.train.cache = std::move(cache);
  return data;
}

}  // namespace trialign::synthetic
