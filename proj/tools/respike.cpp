#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "respike/respike.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct Failure {
  int exit_code;
  std::string message;
};

void check(int status, const std::string& what) {
  if (status == RSPK_OK) return;
  // bad values that reached the library are still usage errors
  throw Failure{status == RSPK_E_INVALID ? kExitUsage : kExitRuntime,
                what + ": " + rspk_status_name(status) + ": " + rspk_last_error()};
}

std::string take(char* s) {
  std::string out = s ? s : "";
  rspk_string_free(s);
  return out;
}

json read_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw Failure{kExitRuntime, "cannot open config " + path};
  try {
    json j = json::parse(in);
    if (!j.is_object()) throw Failure{kExitUsage, path + ": config must be a JSON object"};
    return j;
  } catch (const json::exception& e) {
    throw Failure{kExitUsage, path + ": " + e.what()};
  }
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Failure{kExitRuntime, "cannot create " + dir + ": " + ec.message()};
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Failure{kExitRuntime, "cannot write " + path};
  out << text << '\n';
}

std::vector<std::size_t> parse_list(const std::string& text, const char* flag) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size() || v < 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw Failure{kExitUsage, std::string(flag) + ": '" + item + "' is not a non-negative integer"};
    }
  }
  if (out.empty()) throw Failure{kExitUsage, std::string(flag) + ": empty list"};
  return out;
}

// Options of the active subcommand as given on the command line, for the log.
json given_options(const CLI::App* sub) {
  json j = json::object();
  for (const CLI::Option* opt : sub->get_options()) {
    if (opt->count() == 0 || opt->get_name() == "--help") continue;
    const auto& r = opt->results();
    j[opt->get_name()] = r.size() == 1 ? json(r[0]) : json(r);
  }
  return j;
}

// Resolves the config document, prints it and keeps a copy under --out.
json log_resolved(const std::string& command, const json& doc, const CLI::App* sub,
                  const std::string& out_dir) {
  char* text = nullptr;
  check(rspk_resolve_config(doc.dump().c_str(), &text), "config");
  json resolved = json::parse(take(text));
  json record = {{"command", command}, {"options", given_options(sub)}, {"config", resolved}};
  std::fprintf(stderr, "resolved config: %s\n", record.dump().c_str());
  if (!out_dir.empty()) write_text((fs::path(out_dir) / "config.json").string(), record.dump(2));
  return resolved;
}

void log_checkpoint(const std::string& command, rspk_model* model, const CLI::App* sub,
                    const std::string& out_dir) {
  char* text = nullptr;
  check(rspk_model_config(model, &text), "model config");
  json record = {{"command", command},
                 {"options", given_options(sub)},
                 {"config", {{"model", json::parse(take(text))}}}};
  std::fprintf(stderr, "resolved config: %s\n", record.dump().c_str());
  if (!out_dir.empty()) write_text((fs::path(out_dir) / "config.json").string(), record.dump(2));
}

struct ModelHandle {
  rspk_model* m = nullptr;
  ~ModelHandle() { rspk_model_free(m); }
};

std::string summary(const rspk_energy& e) {
  char* text = nullptr;
  check(rspk_energy_summary(&e, &text), "energy summary");
  return take(text);
}

void print_epoch(size_t epoch, double loss, double train_acc, double val_acc, void*) {
  std::printf("epoch %zu loss=%.6f train_acc=%.4f val_acc=%.4f\n", epoch, loss, train_acc, val_acc);
  std::fflush(stdout);
}

void print_warning(const char* message, void*) { std::fprintf(stderr, "warning: %s\n", message); }

// Flags shared by train and sweep-stride that overlay the config document.
struct TrainFlags {
  std::string config, data, out, ablation, input, precision = "f32";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, stride, batch_size;
  std::optional<double> lr;
  bool grad_clip = false;

  void add_to(CLI::App* sub, bool with_stride) {
    sub->add_option("--config", config, "JSON config with optional data/model/train sections")
        ->check(CLI::ExistingFile);
    sub->add_option("--data", data, "dataset directory (manifest.json + clips/)")
        ->required()
        ->check(CLI::ExistingDirectory);
    sub->add_option("--out", out, "output directory")->required();
    sub->add_option("--seed", seed, "seed for initialization, shuffling and augmentation");
    sub->add_option("--epochs", epochs, "training epochs");
    if (with_stride) sub->add_option("--stride", stride, "segment length s (T must be >= s)");
    sub->add_option("--lr", lr, "initial learning rate (cosine decay to 0 by default)");
    sub->add_option("--batch-size", batch_size, "clips per batch");
    sub->add_option("--ablation", ablation, "architecture variant")
        ->check(CLI::IsMember({"hybrid", "ann-only", "snn-only", "no-attn"}));
    sub->add_option("--input", input,
                    "frames fed to the branches: key-res (hybrids), all, key or res; "
                    "single-branch variants default to all")
        ->check(CLI::IsMember({"key-res", "all", "key", "res"}));
    sub->add_option("--precision", precision, "tensor precision")
        ->check(CLI::IsMember({"f32", "f64"}))
        ->capture_default_str();
    sub->add_flag("--grad-clip", grad_clip, "clip gradients to global norm 5.0");
  }

  json overlay() const {
    json doc = read_config(config);
    json& model = doc["model"];
    json& train = doc["train"];
    if (model.is_null()) model = json::object();
    if (train.is_null()) train = json::object();
    if (seed) {
      train["seed"] = *seed;
      model["init_seed"] = *seed;
    }
    if (epochs) train["epochs"] = *epochs;
    if (stride) model["stride"] = *stride;
    if (lr) train["lr"] = *lr;
    if (batch_size) train["batch_size"] = *batch_size;
    if (grad_clip) train["clip_norm"] = 5.0;
    if (!ablation.empty()) model["arch"] = ablation;
    if (!input.empty()) {
      model["input"] = input;
    } else if ((ablation == "ann-only" || ablation == "snn-only") &&
               model.value("input", "key-res") == "key-res") {
      model["input"] = "all";
    }
    return doc;
  }

  int precision_code() const { return precision == "f64" ? RSPK_F64 : RSPK_F32; }
};

// Builds a model matching the dataset, trains it and returns test accuracy.
double train_one(const json& doc, const TrainFlags& f, const std::string& out_dir,
                 rspk_model** model_out) {
  const std::string text = doc.dump();
  ModelHandle model;
  check(rspk_model_create(text.c_str(), f.data.c_str(), f.precision_code(), &model.m), "model");
  const std::string metrics = (fs::path(out_dir) / "metrics.csv").string();
  check(rspk_train(model.m, text.c_str(), f.data.c_str(), metrics.c_str(), print_epoch, nullptr),
        "train");
  check(rspk_model_save(model.m, (fs::path(out_dir) / "checkpoint").string().c_str()), "save");
  rspk_eval ev{};
  check(rspk_evaluate(model.m, f.data.c_str(), "test", &ev), "evaluate");
  std::printf("test_acc=%.4f test_loss=%.6f clips=%zu\n", ev.accuracy, ev.loss, ev.clips);
  *model_out = model.m;
  model.m = nullptr;
  return ev.accuracy;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid ANN-SNN action recognition on key and residual frames"};
  app.require_subcommand(1);
  rspk_set_log_callback(print_warning, nullptr);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic moving-shape dataset");
  std::string gen_config, gen_out;
  std::optional<std::uint64_t> gen_seed;
  std::optional<std::size_t> gen_classes, gen_train, gen_test, gen_frames, gen_size;
  std::optional<double> gen_noise;
  gen->add_option("--config", gen_config, "JSON config; its data section is used")
      ->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "dataset directory to write")->required();
  gen->add_option("--seed", gen_seed, "master seed; clip seeds derive from it");
  gen->add_option("--classes", gen_classes, "motion classes (8 directions, 9-10 add expand/contract)");
  gen->add_option("--train-per-class", gen_train, "training clips per class");
  gen->add_option("--test-per-class", gen_test, "test clips per class");
  gen->add_option("--frames", gen_frames, "frames per clip");
  gen->add_option("--size", gen_size, "frame height and width");
  gen->add_option("--noise", gen_noise, "std of additive Gaussian pixel noise");

  // decompose
  auto* dec = app.add_subcommand("decompose", "split one clip into key and residual frames");
  std::string dec_clip, dec_out;
  std::size_t dec_stride = 4;
  dec->add_option("--clip", dec_clip, "clip file (RSPK, [T, c, h, w])")
      ->required()
      ->check(CLI::ExistingFile);
  dec->add_option("--stride", dec_stride, "segment length s")->capture_default_str();
  dec->add_option("--out", dec_out, "directory for keys.rspk, residuals.rspk, sparsity.csv")
      ->required();

  // train
  auto* tr = app.add_subcommand("train", "train one model; writes metrics.csv and checkpoint/");
  TrainFlags tf;
  tf.add_to(tr, true);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_ckpt, ev_data, ev_split = "test", ev_out;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  ev->add_option("--data", ev_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--split", ev_split, "split to evaluate")
      ->check(CLI::IsMember({"train", "val", "test"}))
      ->capture_default_str();
  ev->add_option("--out", ev_out, "directory for eval.json");

  // profile
  auto* pr = app.add_subcommand("profile", "FLOPs, SyOPs and energy of a checkpoint or a published row");
  std::string pr_ckpt, pr_data, pr_split = "test", pr_out, pr_row;
  std::size_t pr_clips = 100;
  std::uint64_t pr_seed = 1;
  bool pr_list = false;
  auto* pr_ckpt_opt = pr->add_option("--checkpoint", pr_ckpt, "checkpoint directory")
                          ->check(CLI::ExistingDirectory);
  auto* pr_data_opt = pr->add_option("--data", pr_data, "dataset directory for spike-rate measurement")
                          ->check(CLI::ExistingDirectory);
  pr->add_option("--split", pr_split, "split to sample clips from")
      ->check(CLI::IsMember({"train", "val", "test"}))
      ->capture_default_str();
  pr->add_option("--clips", pr_clips, "clips sampled for spike rates (0 = all)")->capture_default_str();
  pr->add_option("--seed", pr_seed, "seed of the clip sample")->capture_default_str();
  pr->add_option("--out", pr_out, "directory for energy_report.json");
  auto* pr_row_opt = pr->add_option("--table4", pr_row,
                                    "use a built-in published row instead of a checkpoint "
                                    "(see --list-table4)");
  auto* pr_list_opt = pr->add_flag("--list-table4", pr_list, "print the built-in rows and exit");
  pr_row_opt->excludes(pr_ckpt_opt)->excludes(pr_data_opt)->excludes(pr_list_opt);
  pr_ckpt_opt->needs(pr_data_opt);

  // sweep-stride
  auto* sw = app.add_subcommand("sweep-stride",
                                "train, evaluate and profile one model per stride; writes sweep.csv");
  TrainFlags sf;
  sf.add_to(sw, false);
  std::string sw_strides = "2,4,8,16";
  std::size_t sw_clips = 100;
  sw->add_option("--strides", sw_strides, "comma-separated strides")->capture_default_str();
  sw->add_option("--clips", sw_clips, "test clips sampled for spike rates (0 = all)")
      ->capture_default_str();

  // attn-dump
  auto* at = app.add_subcommand("attn-dump",
                                "render cross-attention of query tokens over the key frame");
  std::string at_ckpt, at_data, at_split = "test", at_out, at_queries = "0";
  std::size_t at_clip = 0, at_stage = 4, at_topk = 5;
  at->add_option("--checkpoint", at_ckpt, "checkpoint of a hybrid model")
      ->required()
      ->check(CLI::ExistingDirectory);
  at->add_option("--data", at_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  at->add_option("--split", at_split, "split holding the clip")
      ->check(CLI::IsMember({"train", "val", "test"}))
      ->capture_default_str();
  at->add_option("--clip", at_clip, "clip index within the split")->capture_default_str();
  at->add_option("--stage", at_stage, "fusion stage 1-4")
      ->check(CLI::Range(1, 4))
      ->capture_default_str();
  at->add_option("--query", at_queries, "comma-separated query token indices")->capture_default_str();
  at->add_option("--top-k", at_topk, "key tokens outlined and listed per query")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  at->add_option("--out", at_out, "directory for attn_q<i>.ppm and attention.csv")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (gen->parsed()) {
      json doc = read_config(gen_config);
      json& d = doc["data"];
      if (d.is_null()) d = json::object();
      if (gen_seed) d["seed"] = *gen_seed;
      if (gen_classes) d["num_classes"] = *gen_classes;
      if (gen_train) d["train_per_class"] = *gen_train;
      if (gen_test) d["test_per_class"] = *gen_test;
      if (gen_frames) d["frames"] = *gen_frames;
      if (gen_size) d["height"] = d["width"] = *gen_size;
      if (gen_noise) d["noise"] = *gen_noise;
      json resolved = log_resolved("gen-data", doc, gen, "");
      std::size_t n = 0;
      check(rspk_gen_data(json{{"data", resolved["data"]}}.dump().c_str(), gen_out.c_str(), &n),
            "gen-data");
      std::printf("wrote %zu clips to %s\n", n, gen_out.c_str());
    } else if (dec->parsed()) {
      std::fprintf(stderr, "resolved config: %s\n",
                   json({{"command", "decompose"}, {"options", given_options(dec)}}).dump().c_str());
      rspk_sparsity st{};
      check(rspk_decompose(dec_clip.c_str(), dec_stride, dec_out.c_str(), &st), "decompose");
      std::printf("frames=%zu stride=%zu segments=%zu dropped=%zu residual_nonzero=%.6f\n", st.frames,
                  st.stride, st.segments, st.dropped_frames, st.nonzero_fraction);
    } else if (tr->parsed()) {
      ensure_dir(tf.out);
      json resolved = log_resolved("train", tf.overlay(), tr, tf.out);
      rspk_model* m = nullptr;
      train_one(resolved, tf, tf.out, &m);
      rspk_model_free(m);
    } else if (ev->parsed()) {
      ModelHandle model;
      check(rspk_model_load(ev_ckpt.c_str(), &model.m), "load");
      if (!ev_out.empty()) ensure_dir(ev_out);
      log_checkpoint("eval", model.m, ev, ev_out);
      rspk_eval r{};
      check(rspk_evaluate(model.m, ev_data.c_str(), ev_split.c_str(), &r), "evaluate");
      std::printf("split=%s acc=%.4f loss=%.6f clips=%zu\n", ev_split.c_str(), r.accuracy, r.loss,
                  r.clips);
      if (!ev_out.empty()) {
        write_text((fs::path(ev_out) / "eval.json").string(),
                   json({{"split", ev_split}, {"accuracy", r.accuracy}, {"loss", r.loss},
                         {"clips", r.clips}})
                       .dump(2));
      }
    } else if (pr->parsed()) {
      if (!pr_out.empty()) ensure_dir(pr_out);
      const std::string report =
          pr_out.empty() ? std::string() : (fs::path(pr_out) / "energy_report.json").string();
      if (pr_list) {
        char* rows = nullptr;
        check(rspk_table4_rows(&rows), "table4");
        std::printf("%s\n", take(rows).c_str());
      } else if (!pr_row.empty()) {
        std::fprintf(stderr, "resolved config: %s\n",
                     json({{"command", "profile"}, {"options", given_options(pr)}}).dump().c_str());
        rspk_energy e{};
        double published = 0;
        check(rspk_table4(pr_row.c_str(), report.empty() ? nullptr : report.c_str(), &e, &published),
              "profile");
        std::printf("%s (published %.2f mJ)\n", summary(e).c_str(), published);
      } else {
        if (pr_ckpt.empty()) throw Failure{kExitUsage, "profile needs --checkpoint and --data, or --table4"};
        ModelHandle model;
        check(rspk_model_load(pr_ckpt.c_str(), &model.m), "load");
        log_checkpoint("profile", model.m, pr, pr_out);
        rspk_energy e{};
        check(rspk_profile(model.m, pr_data.c_str(), pr_split.c_str(), pr_clips, pr_seed,
                           report.empty() ? nullptr : report.c_str(), &e),
              "profile");
        std::printf("%s\n", summary(e).c_str());
      }
    } else if (sw->parsed()) {
      const std::vector<std::size_t> strides = parse_list(sw_strides, "--strides");
      ensure_dir(sf.out);
      json base = sf.overlay();
      log_resolved("sweep-stride", base, sw, sf.out);
      std::ofstream csv(fs::path(sf.out) / "sweep.csv");
      if (!csv) throw Failure{kExitRuntime, "cannot write " + sf.out + "/sweep.csv"};
      csv << "stride,acc,energy_mj\n";
      for (std::size_t s : strides) {
        json doc = base;
        doc["model"]["stride"] = s;
        const std::string dir = (fs::path(sf.out) / ("stride_" + std::to_string(s))).string();
        ensure_dir(dir);
        json resolved = log_resolved("sweep-stride", doc, sw, dir);
        std::printf("stride %zu\n", s);
        ModelHandle model;
        const double acc = train_one(resolved, sf, dir, &model.m);
        rspk_energy e{};
        check(rspk_profile(model.m, sf.data.c_str(), "test", sw_clips, 1,
                           (fs::path(dir) / "energy_report.json").string().c_str(), &e),
              "profile");
        std::printf("%s\n", summary(e).c_str());
        char line[128];
        std::snprintf(line, sizeof line, "%zu,%.6f,%.9g\n", s, acc, e.energy_mj);
        csv << line << std::flush;
      }
      if (!csv) throw Failure{kExitRuntime, "failed writing sweep.csv"};
    } else if (at->parsed()) {
      const std::vector<std::size_t> queries = parse_list(at_queries, "--query");
      ModelHandle model;
      check(rspk_model_load(at_ckpt.c_str(), &model.m), "load");
      ensure_dir(at_out);
      log_checkpoint("attn-dump", model.m, at, at_out);
      check(rspk_attn_dump(model.m, at_data.c_str(), at_split.c_str(), at_clip, at_stage - 1,
                           queries.data(), queries.size(), at_topk, at_out.c_str()),
            "attn-dump");
      std::printf("wrote %zu attention map(s) to %s\n", queries.size(), at_out.c_str());
    }
  } catch (const Failure& f) {
    std::fprintf(stderr, "error: %s\n", f.message.c_str());
    return f.exit_code;
  }
  return 0;
}
