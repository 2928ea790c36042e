// SPDX-License-Identifier: Apache-2.0
// trialign command-line driver. Every command prints one JSON document on
// stdout; failures print {"error": {"code", "message"}} and exit non-zero.
// Log lines go to stderr, filtered by TRIALIGN_LOG (error|warn|info|debug).

#include <CLI11.hpp>
#include <httplib.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "trialign/http.hpp"
#include "trialign/trialign.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace trialign;

namespace {

enum class Level { error = 0, warn = 1, info = 2, debug = 3 };

Level log_level() {
  static const Level level = [] {
    const char* env = std::getenv("TRIALIGN_LOG");
    const std::string v = env ? env : "warn";
    if (v == "error") return Level::error;
    if (v == "info") return Level::info;
    if (v == "debug") return Level::debug;
    return Level::warn;
  }();
  return level;
}

void log(Level level, const std::string& msg) {
  static const char* names[] = {"error", "warn", "info", "debug"};
  if (level <= log_level()) std::cerr << "[" << names[static_cast<int>(level)] << "] " << msg << "\n";
}

// Options shared by the subcommands; unset ones fall back to the config file.
struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string manifest, cache, checkpoint, out, index;
  std::optional<std::size_t> k;
};

struct Config {
  json doc = json::object();
  fs::path base = ".";

  static Config load(const std::string& path) {
    Config c;
    if (path.empty()) return c;
    c.doc = read_json_file(path);
    require(c.doc.is_object(), ErrorCode::parse, path + ": config must be a JSON object");
    c.base = fs::path(path).parent_path();
    return c;
  }

  // Flag value wins; otherwise a path from the config, relative to its file.
  std::string path(const std::string& flag, const char* key, bool required = true) const {
    if (!flag.empty()) return flag;
    if (doc.contains(key)) {
      const fs::path p(doc[key].get<std::string>());
      return (p.is_absolute() ? p : base / p).string();
    }
    require(!required, ErrorCode::invalid_argument, std::string("missing --") + key + " (or '" + key + "' in config)");
    return {};
  }

  template <class T>
  T section(const char* key) const {
    return doc.contains(key) ? doc[key].get<T>() : T{};
  }
};

void emit(const json& j) { std::cout << j.dump(2) << std::endl; }

void write_json(const json& j, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::io, "cannot open for writing: " + path);
  out << j.dump(2) << '\n';
}

void ensure_parent(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

// Encoder config from the file; projection dims default to the cache's.
EncoderConfig encoder_for(const Config& cfg, const EmbeddingCache& cache) {
  EncoderConfig e = cfg.section<EncoderConfig>("encoder");
  const json section = cfg.doc.value("encoder", json::object());
  if (!section.contains("text_dim")) e.text_dim = cache.text_dim();
  if (!section.contains("image_dim")) e.image_dim = cache.image_dim();
  return e;
}

std::vector<std::string> ids_of(const DatasetManifest& m) {
  std::vector<std::string> ids;
  for (const auto& r : m.records) ids.push_back(r.id);
  return ids;
}

// ---------------------------------------------------------------------------

synthetic::Config synth_config(const json& j) {
  synthetic::Config c;
  detail::reject_unknown(j,
                         {"classes", "train_per_class", "train_count", "test_per_class", "points", "text_dim",
                          "image_dim", "views", "templates", "image_noise", "text_noise", "template_noise",
                          "point_noise", "shape_jitter", "confusable_pairs", "confusable_stretch",
                          "confusable_text_corr", "seed"},
                         "synthetic config");
  detail::read(j, "classes", c.classes);
  detail::read(j, "train_per_class", c.train_per_class);
  detail::read(j, "train_count", c.train_count);
  detail::read(j, "test_per_class", c.test_per_class);
  detail::read(j, "points", c.points);
  detail::read(j, "text_dim", c.text_dim);
  detail::read(j, "image_dim", c.image_dim);
  detail::read(j, "views", c.views);
  detail::read(j, "templates", c.templates);
  detail::read(j, "image_noise", c.image_noise);
  detail::read(j, "text_noise", c.text_noise);
  detail::read(j, "template_noise", c.template_noise);
  detail::read(j, "point_noise", c.point_noise);
  detail::read(j, "shape_jitter", c.shape_jitter);
  detail::read(j, "confusable_pairs", c.confusable_pairs);
  detail::read(j, "confusable_stretch", c.confusable_stretch);
  detail::read(j, "confusable_text_corr", c.confusable_text_corr);
  detail::read(j, "seed", c.seed);
  return c;
}

json cmd_synth(const Common& o) {
  const Config cfg = Config::load(o.config);
  synthetic::Config sc = synth_config(cfg.doc.value("synthetic", json::object()));
  if (o.seed) sc.seed = *o.seed;
  require(!o.out.empty(), ErrorCode::invalid_argument, "synth needs --out <directory>");
  fs::create_directories(o.out);
  const auto data = synthetic::generate(sc);
  const fs::path dir(o.out);
  save_cache(data.train.cache, (dir / "cache.bin").string());
  write_manifest(data.train.manifest, (dir / "train.jsonl").string(), PointStorage::inline_json, "cache.bin");
  write_manifest(data.test, (dir / "test.jsonl").string(), PointStorage::inline_json, "cache.bin");
  json classes = json::object();
  for (const auto& [label, keys] : data.class_templates) classes[label] = keys;
  write_json(classes, (dir / "classes.json").string());
  log(Level::info, "wrote synthetic dataset to " + o.out);
  return {{"train_shapes", data.train.manifest.records.size()},
          {"test_shapes", data.test.records.size()},
          {"classes", data.labels.size()},
          {"text_dim", sc.text_dim},
          {"image_dim", sc.image_dim},
          {"cache", (dir / "cache.bin").string()},
          {"train_manifest", (dir / "train.jsonl").string()},
          {"test_manifest", (dir / "test.jsonl").string()},
          {"classes_file", (dir / "classes.json").string()}};
}

json cmd_prepare(const Common& o, bool sidecar) {
  const Config cfg = Config::load(o.config);
  const std::string in = cfg.path(o.manifest, "manifest");
  require(!o.out.empty(), ErrorCode::invalid_argument, "prepare needs --out <manifest>");
  RawManifest raw = read_manifest_entries(in);
  if (!o.cache.empty()) raw.cache_path = o.cache;
  Rng rng(o.seed.value_or(cfg.doc.value("seed", std::uint64_t{0})));
  std::size_t sampled = 0;
  for (auto& e : raw.entries)
    if (e.mesh) {
      e.record.points = sample_surface_points(*e.mesh, e.num_points, rng);
      e.mesh.reset();
      ++sampled;
    }
  const DatasetManifest manifest = to_manifest(raw);
  const EmbeddingCache cache = load_cache(raw.cache_path);
  validate(manifest, cache);
  ensure_parent(o.out);
  const auto out_dir = fs::absolute(fs::path(o.out)).parent_path();
  const std::string cache_ref = fs::relative(fs::absolute(raw.cache_path), out_dir).string();
  write_manifest(manifest, o.out, sidecar ? PointStorage::sidecar : PointStorage::inline_json, cache_ref);
  return {{"records", manifest.records.size()}, {"meshes_sampled", sampled}, {"labels", manifest.split_labels.size()},
          {"manifest", o.out}, {"cache", cache_ref}};
}

json cmd_train(const Common& o) {
  const Config cfg = Config::load(o.config);
  TrainConfig tc = cfg.section<TrainConfig>("train");
  require(o.seed.has_value() || cfg.doc.contains("seed") || (cfg.doc.contains("train") && cfg.doc["train"].contains("seed")),
          ErrorCode::invalid_argument, "train needs a seed: pass --seed or set 'seed' in the config");
  if (cfg.doc.contains("seed")) tc.seed = cfg.doc["seed"].get<std::uint64_t>();
  if (o.seed) tc.seed = *o.seed;
  const Dataset data = load_dataset(cfg.path(o.manifest, "manifest"));
  const EncoderConfig ec = encoder_for(cfg, data.cache);
  const std::string out_dir = cfg.path(o.out, "out", false).empty() ? "." : cfg.path(o.out, "out", false);
  fs::create_directories(out_dir);
  const std::string ckpt = o.checkpoint.empty() ? (fs::path(out_dir) / "model.ckpt").string() : o.checkpoint;
  const std::string metrics_path = (fs::path(out_dir) / "metrics.jsonl").string();
  std::ofstream metrics(metrics_path, std::ios::trunc);
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochMetrics& m) {
    metrics << json(m).dump() << '\n';
    log(Level::info, "epoch " + std::to_string(m.epoch) + " round " + std::to_string(m.round) + " train " +
                         std::to_string(m.train_loss) + " val " + std::to_string(m.val_loss));
  };
  log(Level::info, "training " + std::to_string(parameter_count(ec)) + " parameters on " +
                       std::to_string(data.manifest.records.size()) + " shapes");
  const TrainResult result = train(data, ec, tc, hooks);
  ensure_parent(ckpt);
  save_checkpoint(result.state, ckpt);
  const json report = report_json(result.report);
  write_json(report, (fs::path(out_dir) / "report.json").string());
  log(Level::info, "wall time " + std::to_string(result.report.wall_time_seconds) + " s");
  return {{"checkpoint", ckpt},
          {"report", report},
          {"metrics", metrics_path},
          {"parameters", result.state.params.size()},
          {"tau", result.state.tau()}};
}

// Classes file: {label: [text keys]} | {label: {"vector": [...]}} |
// {label: {"raw_vectors": [[...], ...]}}. Keys and raw vectors go through
// the text projection and prompt averaging; "vector" is already aligned.
ClassEmbeddingSet load_classes(const json& doc, const EmbeddingCache& cache, const ModelState& state,
                               PromptAveraging order) {
  require(doc.is_object() && !doc.empty(), ErrorCode::parse, "classes must be a non-empty JSON object");
  std::vector<std::string> labels;
  std::vector<Vector> rows;
  for (const auto& [label, spec] : doc.items()) {
    labels.push_back(label);
    if (spec.is_array()) {
      std::vector<Vector> templates;
      for (const auto& key : spec) templates.push_back(cache.text(key.get<std::string>()));
      rows.push_back(prompt_average(templates, state, order));
    } else if (spec.contains("vector")) {
      rows.push_back(spec["vector"].get<Vector>());
    } else {
      rows.push_back(prompt_average(spec.at("raw_vectors").get<std::vector<Vector>>(), state, order));
    }
  }
  for (std::size_t c = 0; c < rows.size(); ++c)
    require(rows[c].size() == state.config.embed_dim, ErrorCode::dim_mismatch,
            "class vector of '" + labels[c] + "' has dim " + std::to_string(rows[c].size()) + ", checkpoint embed_dim is " +
                std::to_string(state.config.embed_dim));
  return ClassEmbeddingSet::from_vectors(labels, rows);
}

json cmd_eval(const Common& o) {
  const Config cfg = Config::load(o.config);
  const Dataset data = load_dataset(cfg.path(o.manifest, "manifest"));
  const ModelState state = load_checkpoint(cfg.path(o.checkpoint, "checkpoint"));
  const std::string order_name = cfg.doc.value("prompt_averaging", std::string("normalize_then_mean"));
  require(order_name == "normalize_then_mean" || order_name == "mean_then_normalize", ErrorCode::parse,
          "prompt_averaging must be 'normalize_then_mean' or 'mean_then_normalize'");
  const auto order =
      order_name == "normalize_then_mean" ? PromptAveraging::normalize_then_mean : PromptAveraging::mean_then_normalize;
  const ClassEmbeddingSet classes = load_classes(read_json_file(cfg.path("", "classes")), data.cache, state, order);
  std::vector<ShapeRecord> labeled;
  for (const auto& r : data.manifest.records)
    if (data.manifest.split_labels.count(r.id)) labeled.push_back(r);
  require(!labeled.empty(), ErrorCode::insufficient_data, "manifest has no labeled shapes to evaluate");
  DatasetManifest sub;
  sub.records = labeled;
  const std::size_t max_k = std::min(classes.size(), o.k.value_or(cfg.doc.value("k", std::size_t{5})));
  const auto predictions = zero_shot_classify(ids_of(sub), embed_shapes(labeled, state), classes, max_k);
  json topk = json::object();
  for (std::size_t k : {std::size_t{1}, std::size_t{3}, std::size_t{5}, max_k})
    if (k <= max_k) topk["top" + std::to_string(k)] = topk_accuracy(predictions, data.manifest.split_labels, k);
  json out = {{"shapes", labeled.size()}, {"classes", classes.size()}, {"accuracy", topk}};
  if (!o.out.empty()) {
    json per_shape = json::array();
    for (const auto& p : predictions) {
      json ranked = json::array();
      for (const auto& s : p.ranked) ranked.push_back({{"label", s.label}, {"score", s.score}});
      per_shape.push_back({{"id", p.id}, {"truth", data.manifest.split_labels.at(p.id)}, {"ranked", ranked}});
    }
    write_json({{"summary", out}, {"predictions", per_shape}}, o.out);
  }
  return out;
}

LabeledEmbeddings labeled_embeddings(const Dataset& data, const ModelState& state) {
  std::vector<ShapeRecord> labeled;
  LabeledEmbeddings out;
  for (const auto& r : data.manifest.records)
    if (auto it = data.manifest.split_labels.find(r.id); it != data.manifest.split_labels.end()) {
      labeled.push_back(r);
      out.labels.push_back(it->second);
    }
  require(!labeled.empty(), ErrorCode::insufficient_data, "manifest has no labeled shapes");
  out.x = embed_shapes(labeled, state);
  return out;
}

json cmd_probe(const Common& o) {
  const Config cfg = Config::load(o.config);
  const ModelState state = load_checkpoint(cfg.path(o.checkpoint, "checkpoint"));
  const Dataset train_data = load_dataset(cfg.path(o.manifest, "train_manifest"));
  const Dataset test_data = load_dataset(cfg.path("", "test_manifest"));
  ProbeConfig pc = cfg.section<ProbeConfig>("probe");
  const auto shots = cfg.doc.value("shots", std::vector<std::size_t>{pc.shots});
  const auto train_set = labeled_embeddings(train_data, state);
  const auto test_set = labeled_embeddings(test_data, state);
  Rng rng(o.seed.value_or(cfg.doc.value("seed", std::uint64_t{0})));
  json curve = json::array();
  for (std::size_t s : shots) {
    pc.shots = s;
    const ProbeResult r = linear_probe(train_set, test_set, pc, rng);
    curve.push_back({{"shots", s}, {"mean", r.mean_accuracy}, {"std", r.std_accuracy}, {"per_seed", r.per_seed}});
  }
  return {{"curve", curve}, {"seeds", pc.seeds}};
}

json cmd_index(const Common& o, const std::string& embeddings_file) {
  const Config cfg = Config::load(o.config);
  require(!o.out.empty(), ErrorCode::invalid_argument, "index needs --out <index file>");
  RetrievalIndex index;
  if (!embeddings_file.empty()) {
    // {"ids": [...], "vectors": [[...]], "metadata": {id: {k: v}}}
    const json doc = read_json_file(embeddings_file);
    index = build_index(doc.at("ids").get<std::vector<std::string>>(), doc.at("vectors").get<std::vector<Vector>>(),
                        doc.value("metadata", std::map<std::string, Metadata>{}));
  } else {
    const Dataset data = load_dataset(cfg.path(o.manifest, "manifest"));
    const ModelState state = load_checkpoint(cfg.path(o.checkpoint, "checkpoint"));
    std::map<std::string, Metadata> meta;
    for (const auto& r : data.manifest.records) {
      meta[r.id]["dataset"] = r.dataset_tag;
      if (auto it = data.manifest.split_labels.find(r.id); it != data.manifest.split_labels.end())
        meta[r.id]["label"] = it->second;
    }
    index = build_index(ids_of(data.manifest), embed_shapes(data.manifest.records, state), std::move(meta));
  }
  ensure_parent(o.out);
  save_index(index, o.out);
  return {{"index", o.out}, {"size", index.size()}, {"dim", index.dim()}};
}

std::optional<ModelState> optional_model(const Config& cfg, const Common& o) {
  const std::string path = cfg.path(o.checkpoint, "checkpoint", false);
  if (path.empty()) return std::nullopt;
  return load_checkpoint(path);
}

json cmd_retrieve(const Common& o, const std::string& query_file, const std::vector<std::string>& joint, bool renorm) {
  const Config cfg = Config::load(o.config);
  const QueryService service(load_index(cfg.path(o.index, "index")), optional_model(cfg, o));
  const std::size_t k = o.k.value_or(cfg.doc.value("k", std::size_t{10}));
  json request;
  std::string path;
  if (!joint.empty()) {
    require(joint.size() == 2, ErrorCode::invalid_argument, "--joint takes exactly two query files");
    request = {{"a", read_json_file(joint[0])}, {"b", read_json_file(joint[1])}, {"k", k}};
    path = "/query_joint";
  } else {
    require(!query_file.empty(), ErrorCode::invalid_argument, "retrieve needs --query <file> or --joint <a> <b>");
    const json q = read_json_file(query_file);
    request = q.is_array() ? json{{"vector", q}} : q;
    request["k"] = k;
    path = "/query";
  }
  auto response = service.handle("POST", path, request.dump());
  if (response.status != 200) {
    const auto code = response.body["code"].get<std::string>();
    ErrorCode ec = ErrorCode::invalid_argument;
    for (int c = 0; c <= static_cast<int>(ErrorCode::not_found); ++c)
      if (to_string(static_cast<ErrorCode>(c)) == code) ec = static_cast<ErrorCode>(c);
    fail(ec, response.body["message"].get<std::string>());
  }
  if (renorm) {
    const auto index = service.snapshot();
    for (auto& hit : response.body["results"]) {
      const auto row = index->rows.row(*index->find(hit["id"].get<std::string>()));
      hit["conditioning_vector"] = renorm_for_conditioning(row);
    }
  }
  return response.body;
}

int cmd_serve(const Common& o, const std::string& host, int port) {
  const Config cfg = Config::load(o.config);
  const QueryService service(load_index(cfg.path(o.index, "index")), optional_model(cfg, o));
  httplib::Server server;
  bind_http(server, service);
  const int bound = port == 0 ? server.bind_to_any_port(host) : (server.bind_to_port(host, port) ? port : -1);
  require(bound > 0, ErrorCode::io, "cannot bind " + host + ":" + std::to_string(port));
  // Announce the address as the command's JSON output, then block.
  std::cout << json{{"listening", host}, {"port", bound}, {"size", service.snapshot()->size()}}.dump() << std::endl;
  log(Level::info, "serving on " + host + ":" + std::to_string(bound));
  server.listen_after_bind();
  return 0;
}

int report_error(const std::string& code, const std::string& message) {
  std::cout << json{{"error", {{"code", code}, {"message", message}}}}.dump(2) << std::endl;
  log(Level::error, code + ": " + message);
  return 1;
}

void add_common(CLI::App* cmd, Common& o, bool with_k = false) {
  cmd->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "random seed");
  cmd->add_option("--manifest", o.manifest, "dataset manifest (JSON lines)");
  cmd->add_option("--cache", o.cache, "embedding cache");
  cmd->add_option("--checkpoint", o.checkpoint, "model checkpoint");
  cmd->add_option("--out", o.out, "output path");
  if (with_k) cmd->add_option("-k", o.k, "number of results");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"trialign: tri-modal contrastive alignment of point clouds with text and image embeddings"};
  app.require_subcommand(1);
  Common o;
  bool sidecar = false;
  std::string embeddings_file, query_file, host = "127.0.0.1";
  std::vector<std::string> joint;
  bool renorm = false;
  int port = 8080;

  auto* synth = app.add_subcommand("synth", "generate a synthetic labeled dataset");
  add_common(synth, o);
  auto* prepare = app.add_subcommand("prepare", "validate a manifest, sample meshes, write a normalized manifest");
  add_common(prepare, o);
  prepare->add_flag("--sidecar", sidecar, "store points in binary sidecar files");
  auto* train_cmd = app.add_subcommand("train", "train the point encoder and projections");
  add_common(train_cmd, o);
  auto* eval = app.add_subcommand("eval", "zero-shot classification report");
  add_common(eval, o, true);
  auto* probe = app.add_subcommand("probe", "few-shot linear probe curves");
  add_common(probe, o);
  auto* index_cmd = app.add_subcommand("index", "build a retrieval index");
  add_common(index_cmd, o);
  index_cmd->add_option("--embeddings", embeddings_file, "JSON file of precomputed embeddings")->check(CLI::ExistingFile);
  auto* retrieve = app.add_subcommand("retrieve", "query a retrieval index");
  add_common(retrieve, o, true);
  retrieve->add_option("--index", o.index, "retrieval index file");
  retrieve->add_option("--query", query_file, "query JSON file")->check(CLI::ExistingFile);
  retrieve->add_option("--joint", joint, "two query JSON files for a joint query")->expected(2)->check(CLI::ExistingFile);
  retrieve->add_flag("--renorm", renorm, "attach conditioning-scaled vectors to the results");
  auto* serve = app.add_subcommand("serve", "run the HTTP retrieval service");
  add_common(serve, o);
  serve->add_option("--index", o.index, "retrieval index file");
  serve->add_option("--host", host, "bind address");
  serve->add_option("--port", port, "port (0 picks a free one)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage", e.what()) + 1;
  }

  try {
    json result;
    if (*synth) result = cmd_synth(o);
    if (*prepare) result = cmd_prepare(o, sidecar);
    if (*train_cmd) result = cmd_train(o);
    if (*eval) result = cmd_eval(o);
    if (*probe) result = cmd_probe(o);
    if (*index_cmd) result = cmd_index(o, embeddings_file);
    if (*retrieve) result = cmd_retrieve(o, query_file, joint, renorm);
    if (*serve) return cmd_serve(o, host, port);
    emit(result);
    return 0;
  } catch (const Error& e) {
    return report_error(to_string(e.code()), e.what());
  } catch (const nlohmann::json::exception& e) {
    return report_error(to_string(ErrorCode::parse), e.what());
  } catch (const std::exception& e) {
    return report_error("internal", e.what());
  }
}
