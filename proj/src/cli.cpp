#include "deepwaste/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <map>
#include <memory>

#include "CLI11.hpp"
#include "deepwaste/dataset.hpp"
#include "deepwaste/errors.hpp"
#include "deepwaste/evaluation.hpp"
#include "deepwaste/file_util.hpp"
#include "deepwaste/head.hpp"
#include "deepwaste/model_io.hpp"
#include "deepwaste/service.hpp"
#include "json.hpp"

namespace deepwaste {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path resolve_model_dir(const std::optional<std::string>& flag, const char* env,
                           const std::optional<std::string>& config) {
  if (flag && !flag->empty()) return *flag;
  if (env && *env) return env;
  if (config && !config->empty()) return *config;
  return "model";
}

namespace {

struct FileConfig {
  std::optional<std::string> model_dir;
  std::optional<std::string> dataset_root;
  ServiceConfig service;
};

FileConfig load_config(const std::string& path) {
  FileConfig c;
  if (path.empty()) return c;
  json doc;
  try {
    doc = json::parse(read_file(path));
    if (doc.contains("model_dir")) c.model_dir = doc["model_dir"].get<std::string>();
    if (doc.contains("dataset_root")) c.dataset_root = doc["dataset_root"].get<std::string>();
    c.service.host = doc.value("host", c.service.host);
    c.service.port = doc.value("port", c.service.port);
    c.service.cors_origin = doc.value("cors_origin", c.service.cors_origin);
    if (doc.contains("label_notes")) c.service.label_notes = doc["label_notes"].get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    throw FormatError("config " + path + ": " + e.what());
  }
  return c;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

struct Context {
  std::ostream& out;
  std::ostream& err;
  bool json_output = false;
  std::string config_path;
  std::optional<std::string> model_flag;
  std::optional<std::string> dataset_flag;
  bool no_fold = false;
  unsigned threads = 0;

  FileConfig config() const { return load_config(config_path); }
  fs::path model_dir() const { return resolve_model_dir(model_flag, std::getenv("DEEPWASTE_MODEL_DIR"), config().model_dir); }
  Model load(bool fold) const { return load_model_dir(model_dir(), fold); }
  fs::path dataset_root() const {
    if (dataset_flag && !dataset_flag->empty()) return *dataset_flag;
    if (auto c = config().dataset_root) return *c;
    return "dataset";
  }
  DatasetStore store() const { return DatasetStore(dataset_root()); }

  void emit(const json& doc) const { out << doc.dump(2) << "\n"; }
};

std::vector<DatasetItem> split_items(const DatasetStore& store, const std::string& split) {
  ItemFilter f;
  if (split != "all") f.split = parse_split(split);
  return store.list(f);
}

int cmd_classify(const Context& ctx, const std::string& image) {
  const Model model = ctx.load(!ctx.no_fold);
  const std::string bytes = read_file(image);
  const Prediction p =
      classify_bytes(model, std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
  const json doc = classify_response(model, p, ctx.config().service.label_notes);
  if (ctx.json_output) {
    ctx.emit(doc);
    return 0;
  }
  ctx.out << p.label << "\n";
  for (const auto& row : doc["predictions"]) {
    ctx.out << "  " << row["label"].get<std::string>() << " " << fixed(row["confidence"].get<double>(), 4) << "\n";
  }
  if (doc.contains("note")) ctx.out << "  note: " << doc["note"].get<std::string>() << "\n";
  ctx.out << "  " << fixed(p.latency_ms, 1) << " ms, model " << model.model_id().substr(0, 12) << "\n";
  return 0;
}

int cmd_evaluate(const Context& ctx, const std::string& split) {
  const DatasetStore store = ctx.store();
  const auto items = split_items(store, split);
  const Model model = ctx.load(!ctx.no_fold);
  const EvalReport report = evaluate(model, store, items, ctx.threads);
  if (ctx.json_output) {
    json doc = report.to_json();
    doc["split"] = split;
    ctx.emit(doc);
  } else {
    ctx.out << report.to_table();
  }
  return 0;
}

struct TrainArgs {
  std::string split = "train";
  std::string out_dir;
  std::string loss_csv;
  bool raw_features = false;
  TrainConfig cfg;
};

int cmd_train_head(const Context& ctx, const TrainArgs& args) {
  const DatasetStore store = ctx.store();
  const auto items = split_items(store, args.split);
  const Model base = ctx.load(false);
  // folded features equal unfolded ones to float rounding
  const LabeledFeatures data = extract_dataset_features(base.with_folded_batchnorm(), store, items, ctx.threads);
  std::vector<std::size_t> labels;
  for (std::size_t y : data.labels) {
    const auto name = category_labels()[y];
    const auto it = std::find(base.labels().begin(), base.labels().end(), name);
    if (it == base.labels().end()) throw InvalidArgument("model has no class '" + name + "'");
    labels.push_back(static_cast<std::size_t>(it - base.labels().begin()));
  }
  TrainConfig cfg = args.cfg;
  cfg.standardize = !args.raw_features;
  const TrainResult result = train_head(data.features, labels, base.labels(), cfg);
  const Model trained = attach_head(base, result.head);
  save_model_dir(trained, args.out_dir);
  if (!args.loss_csv.empty()) write_loss_csv(args.loss_csv, result.loss_history);
  const double accuracy = head_accuracy(result.head, data.features, labels);
  if (ctx.json_output) {
    ctx.emit({{"items", items.size()},
              {"epochs", args.cfg.epochs},
              {"final_loss", result.loss_history.back()},
              {"train_accuracy", accuracy},
              {"model_id", trained.model_id()},
              {"out", args.out_dir}});
  } else {
    ctx.out << "trained on " << items.size() << " items for " << args.cfg.epochs << " epochs\n"
            << "final loss " << fixed(result.loss_history.back(), 6) << ", training accuracy "
            << fixed(accuracy, 4) << "\n"
            << "saved " << args.out_dir << " (model " << trained.model_id().substr(0, 12) << ")\n";
  }
  return 0;
}

void print_stats(const Context& ctx, const DatasetStats& s) {
  if (ctx.json_output) {
    ctx.emit(stats_to_json(s));
    return;
  }
  for (std::size_t k = 0; k < kNumCategories; ++k) ctx.out << category_labels()[k] << " " << s.per_class[k] << "\n";
  ctx.out << "total " << s.total << "\n";
}

void print_items(const Context& ctx, const std::vector<DatasetItem>& items) {
  if (ctx.json_output) {
    json arr = json::array();
    for (const auto& item : items) arr.push_back(item_to_json(item));
    ctx.emit({{"items", arr}, {"count", items.size()}});
    return;
  }
  for (const auto& item : items) {
    ctx.out << item.id.substr(0, 12) << " " << category_name(item.label) << " " << split_name(item.split) << " "
            << source_name(item.source) << (item.metadata.empty() ? "" : " " + item.metadata) << "\n";
  }
}

int cmd_bench(const Context& ctx, std::size_t runs, std::size_t warmup, bool compare_fold) {
  const Model model = ctx.load(false);
  Rng rng(1);
  const InputSpec& spec = model.input_spec();
  Tensor input({1, spec.channels, spec.height, spec.width});
  for (float& v : input.data()) v = static_cast<float>(rng.uniform(-2, 2));
  json doc{{"model_id", model.model_id()}, {"architecture", model.architecture()}};
  if (compare_fold) {
    const auto c = compare_latency(model, model.with_folded_batchnorm(), input, runs, warmup);
    doc["unfolded"] = c.a.to_json();
    doc["folded"] = c.b.to_json();
  } else {
    doc["latency"] = latency_benchmark(ctx.no_fold ? model : model.with_folded_batchnorm(), input, runs, warmup)
                         .to_json();
  }
  if (ctx.json_output) {
    ctx.emit(doc);
    return 0;
  }
  for (const char* key : {"latency", "unfolded", "folded"}) {
    if (!doc.contains(key)) continue;
    const auto& s = doc[key];
    ctx.out << key << ": runs " << s["runs"].get<std::size_t>() << ", mean " << fixed(s["mean_ms"], 2) << " ms, p50 "
            << fixed(s["p50_ms"], 2) << ", p95 " << fixed(s["p95_ms"], 2) << ", min " << fixed(s["min_ms"], 2)
            << ", max " << fixed(s["max_ms"], 2) << "\n";
  }
  return 0;
}

int cmd_serve(const Context& ctx, const std::optional<std::string>& host, const std::optional<int>& port,
              const std::optional<std::string>& cors, bool no_dataset) {
  FileConfig fc = ctx.config();
  ServiceConfig sc = fc.service;
  if (host) sc.host = *host;
  if (port) sc.port = *port;
  if (cors) sc.cors_origin = *cors;
  const fs::path dir = ctx.model_dir();
  const Model model = load_model_dir(dir, !ctx.no_fold);
  json manifest;
  try {
    manifest = json::parse(read_file(dir / std::string(kManifestFileName)));
  } catch (const json::exception&) {
    manifest = nullptr;
  }
  std::shared_ptr<DatasetStore> store;
  if (!no_dataset) store = std::make_shared<DatasetStore>(ctx.dataset_root());
  Service service(model, store, sc, manifest);
  const int bound = service.bind();
  ctx.err << "serving model " << model.model_id().substr(0, 12) << " on http://" << sc.host << ":" << bound << "\n";
  ctx.err.flush();
  service.run();
  return 0;
}

int cmd_model_init(const Context& ctx, const std::string& arch, std::uint64_t seed, const std::string& out,
                   std::size_t input_size) {
  InputSpec spec;
  spec.height = spec.width = input_size;
  const Model model = make_random_model(arch, seed, category_labels(), spec);
  save_model_dir(model, out);
  if (ctx.json_output) {
    ctx.emit({{"model_id", model.model_id()}, {"architecture", arch}, {"out", out}});
  } else {
    ctx.out << "wrote " << arch << " (seed " << seed << ") to " << out << ", model " << model.model_id().substr(0, 12)
            << "\n";
  }
  return 0;
}

// First positional word when it names no subcommand, else "".
std::string unknown_subcommand(CLI::App& app, int argc, const char* const* argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg.rfind("--", 0) == 0) {
      const bool takes_value = arg == "--config" || arg == "--model" || arg == "--dataset" || arg == "--threads";
      i += takes_value ? 1 : 0;
      continue;
    }
    if (arg.rfind("-", 0) == 0) continue;
    for (const auto* sub : app.get_subcommands({})) {
      if (sub->get_name() == arg) return "";
    }
    return arg;
  }
  return "";
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Waste image classifier: inference, evaluation, head training, dataset and service.", "deepwaste"};
  app.require_subcommand(1);
  app.fallthrough();
  Context ctx{out, err, false, {}, {}, {}, false, 0};
  app.add_flag("--json", ctx.json_output, "Machine-readable output");
  app.add_option("--config", ctx.config_path, "JSON config file");
  app.add_option("--model", ctx.model_flag, "Model directory (overrides DEEPWASTE_MODEL_DIR and the config)");
  app.add_option("--dataset", ctx.dataset_flag, "Dataset root");
  app.add_flag("--no-fold", ctx.no_fold, "Keep batch norms separate at inference");
  app.add_option("--threads", ctx.threads, "Worker threads (0 = all cores)");

  std::string image;
  auto* classify = app.add_subcommand("classify", "Classify one PNG/JPEG image");
  classify->add_option("image", image, "Image file")->required();

  std::string split = "test";
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Per-class AP, mAP and confusion matrix on a split");
  evaluate_cmd->add_option("--split", split, "train, val, test, unassigned or all")->capture_default_str();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train-head", "Train the classifier head on frozen backbone features");
  train_cmd->add_option("--split", train.split, "Training split")->capture_default_str();
  train_cmd->add_option("--out", train.out_dir, "Output model directory")->required();
  train_cmd->add_option("--epochs", train.cfg.epochs)->capture_default_str();
  train_cmd->add_option("--lr", train.cfg.learning_rate)->capture_default_str();
  train_cmd->add_option("--momentum", train.cfg.momentum)->capture_default_str();
  train_cmd->add_option("--batch", train.cfg.batch_size)->capture_default_str();
  train_cmd->add_option("--decay", train.cfg.weight_decay)->capture_default_str();
  train_cmd->add_option("--seed", train.cfg.seed)->capture_default_str();
  train_cmd->add_option("--loss-csv", train.loss_csv, "Write epoch,mean_loss rows here");
  train_cmd->add_flag("--no-standardize", train.raw_features, "Train on raw feature values");

  auto* dataset = app.add_subcommand("dataset", "Manage the annotated image store");
  dataset->require_subcommand(1);
  dataset->fallthrough();
  std::string add_image, add_label, add_metadata, add_source = "bundled";
  auto* ds_add = dataset->add_subcommand("add", "Add an image");
  ds_add->add_option("image", add_image)->required();
  ds_add->add_option("--label", add_label, "trash, recycle or compost")->required();
  ds_add->add_option("--metadata", add_metadata, "Capture notes");
  ds_add->add_option("--source", add_source, "bundled or user_contributed")->capture_default_str();
  auto* ds_stats = dataset->add_subcommand("stats", "Per-class counts");
  SplitRatios ratios;
  std::uint64_t split_seed = 0;
  auto* ds_split = dataset->add_subcommand("split", "Stratified train/val/test assignment");
  ds_split->add_option("--train", ratios.train)->capture_default_str();
  ds_split->add_option("--val", ratios.val)->capture_default_str();
  ds_split->add_option("--test", ratios.test)->capture_default_str();
  ds_split->add_option("--seed", split_seed)->capture_default_str();
  std::string archive;
  auto* ds_export = dataset->add_subcommand("export", "Write a tar archive of the store");
  ds_export->add_option("archive", archive)->required();
  auto* ds_import = dataset->add_subcommand("import", "Merge a tar archive into the store");
  ds_import->add_option("archive", archive)->required();
  auto* ds_list = dataset->add_subcommand("list", "List items");
  std::string f_label, f_split, f_source;
  ds_list->add_option("--label", f_label);
  ds_list->add_option("--split", f_split);
  ds_list->add_option("--source", f_source);
  std::size_t synth_count = 300, synth_size = 64;
  std::uint64_t synth_seed = 0;
  auto* ds_synth = dataset->add_subcommand("synth", "Add procedurally drawn shape images");
  ds_synth->add_option("--count", synth_count)->capture_default_str();
  ds_synth->add_option("--seed", synth_seed)->capture_default_str();
  ds_synth->add_option("--size", synth_size)->capture_default_str();

  std::size_t runs = 10, warmup = 1;
  bool compare_fold = false;
  auto* bench = app.add_subcommand("bench", "Single-image forward latency");
  bench->add_option("--runs", runs)->capture_default_str();
  bench->add_option("--warmup", warmup)->capture_default_str();
  bench->add_flag("--compare-fold", compare_fold, "Interleave unfolded and folded runs");

  std::optional<std::string> host, cors;
  std::optional<int> port;
  bool no_dataset = false;
  auto* serve = app.add_subcommand("serve", "Run the HTTP service");
  serve->add_option("--host", host);
  serve->add_option("--port", port);
  serve->add_option("--cors-origin", cors);
  serve->add_flag("--no-dataset", no_dataset, "Serve classification only");

  auto* model_cmd = app.add_subcommand("model", "Model utilities");
  model_cmd->require_subcommand(1);
  model_cmd->fallthrough();
  std::string arch(kArchResNet50), init_out;
  std::uint64_t init_seed = 0;
  std::size_t input_size = 224;
  auto* init = model_cmd->add_subcommand("init", "Write a seeded random-weight model");
  init->add_option("--arch", arch)->check(CLI::IsMember({std::string(kArchResNet50), std::string(kArchMobileNetV1)}))
      ->capture_default_str();
  init->add_option("--seed", init_seed)->capture_default_str();
  init->add_option("--input-size", input_size)->capture_default_str();
  init->add_option("--out", init_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    const std::string unknown = unknown_subcommand(app, argc, argv);
    if (!unknown.empty()) {
      err << "error: unknown subcommand '" << unknown << "'\n\n" << app.help();
    } else {
      err << "error: " << e.what() << "\n\n" << app.help();
    }
    return 2;
  }

  try {
    if (*classify) return cmd_classify(ctx, image);
    if (*evaluate_cmd) return cmd_evaluate(ctx, split);
    if (*train_cmd) return cmd_train_head(ctx, train);
    if (*bench) return cmd_bench(ctx, runs, warmup, compare_fold);
    if (*serve) return cmd_serve(ctx, host, port, cors, no_dataset);
    if (*init) return cmd_model_init(ctx, arch, init_seed, init_out, input_size);
    if (*dataset) {
      DatasetStore store = ctx.store();
      if (*ds_add) {
        const auto added = store.add_item(read_file(add_image), add_label, add_metadata, parse_source(add_source));
        if (ctx.json_output) {
          ctx.emit({{"id", added.item.id}, {"created", added.created}, {"item", item_to_json(added.item)}});
        } else {
          out << (added.created ? "added " : "already present ") << added.item.id << "\n";
        }
      } else if (*ds_stats) {
        print_stats(ctx, store.stats());
      } else if (*ds_split) {
        const auto m = store.assign_splits(ratios, split_seed);
        std::array<std::size_t, 4> counts{};
        for (const auto& item : m.items) ++counts[static_cast<std::size_t>(item.split)];
        if (ctx.json_output) {
          ctx.emit({{"train", counts[0]}, {"val", counts[1]}, {"test", counts[2]}, {"seed", split_seed}});
        } else {
          out << "train " << counts[0] << "\nval " << counts[1] << "\ntest " << counts[2] << "\n";
        }
      } else if (*ds_export) {
        store.export_archive(archive);
        if (!ctx.json_output) out << "exported " << store.stats().total << " items to " << archive << "\n";
        else ctx.emit({{"items", store.stats().total}, {"archive", archive}});
      } else if (*ds_import) {
        const std::size_t added = store.import_archive(archive);
        if (!ctx.json_output) out << "imported " << added << " new items\n";
        else ctx.emit({{"added", added}});
      } else if (*ds_list) {
        print_items(ctx, store.list(ItemFilter::parse({{"label", f_label}, {"split", f_split}, {"source", f_source}})));
      } else if (*ds_synth) {
        std::size_t added = 0;
        for (const auto& s : make_synthetic_shapes(synth_count, synth_seed, synth_size)) {
          const auto png = encode_png(s.image);
          added += store.add_item(std::span<const std::uint8_t>(png), category_name(s.label),
                                  "synthetic seed " + std::to_string(synth_seed), ItemSource::kBundled)
                       .created;
        }
        if (!ctx.json_output) out << "added " << added << " synthetic images\n";
        else ctx.emit({{"added", added}});
      }
      return 0;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace deepwaste
