#include "commands.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>

#include "json.hpp"
#include "matchformer/config.hpp"
#include "matchformer/errors.hpp"
#include "matchformer/evalkit.hpp"
#include "matchformer/parallel.hpp"
#include "matchformer/trainer.hpp"

namespace fs = std::filesystem;
using namespace matchformer;
using nlohmann::ordered_json;

namespace mfcli {

namespace {

const std::vector<std::string> kRunKeys = {
    "seed",        "height",         "width",        "tau",         "theta",         "window",
    "fine_temperature", "steps",     "lr",           "batch",       "lambda_coarse", "lambda_fine",
    "fine_gate",   "gate_window",    "noise_sigma",  "heldout_pairs", "heldout_seed"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double get_double(const KeyValues& kv, const std::string& key, double dflt) {
  auto it = kv.find(key);
  if (it == kv.end()) return dflt;
  try {
    std::size_t used = 0;
    const double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(key);
    return v;
  } catch (const std::logic_error&) {
    throw ConfigError("config key '" + key + "': '" + it->second + "' is not a number");
  }
}

std::int64_t get_int(const KeyValues& kv, const std::string& key, std::int64_t dflt) {
  const double v = get_double(kv, key, static_cast<double>(dflt));
  if (v != std::floor(v)) throw ConfigError("config key '" + key + "' must be an integer");
  return static_cast<std::int64_t>(v);
}

/// Everything a run needs, merged from defaults, the config file and flags.
struct Resolved {
  KeyValues kv;
  ModelConfig model;
  TrainConfig train;
  MatchOptions match;
  std::uint64_t seed = 0;
  std::int64_t height = 64;
  std::int64_t width = 64;
};

Resolved resolve(const Options& o, bool default_toy, std::int64_t default_h, std::int64_t default_w) {
  Resolved r;
  if (!o.config.empty()) r.kv = load_key_values(o.config);
  auto set = [&](const std::string& k, const std::string& v) { r.kv[k] = v; };
  if (o.variant) set("variant", *o.variant);
  if (o.attention) set("attention", *o.attention);
  if (o.seed) set("seed", std::to_string(*o.seed));
  if (o.tau) set("tau", num(*o.tau));
  if (o.theta) set("theta", num(*o.theta));
  if (o.window) set("window", std::to_string(*o.window));
  if (o.height) set("height", std::to_string(*o.height));
  if (o.width) set("width", std::to_string(*o.width));
  if (o.steps) set("steps", std::to_string(*o.steps));
  if (o.lr) set("lr", num(*o.lr));
  if (!r.kv.count("toy")) r.kv["toy"] = default_toy ? "true" : "false";

  r.model = model_config_from(r.kv, kRunKeys);
  r.seed = static_cast<std::uint64_t>(get_int(r.kv, "seed", 0));
  r.height = get_int(r.kv, "height", default_h);
  r.width = get_int(r.kv, "width", default_w);

  MatchOptions m;
  m.tau = get_double(r.kv, "tau", m.tau);
  m.theta = get_double(r.kv, "theta", m.theta);
  m.window = static_cast<int>(get_int(r.kv, "window", m.window));
  m.fine_temperature = get_double(r.kv, "fine_temperature", m.fine_temperature);
  if (!(m.tau > 0)) throw ConfigError("tau must be positive");
  if (m.theta < 0 || m.theta >= 1) throw ConfigError("theta must lie in [0, 1)");
  if (m.window < 1 || m.window % 2 == 0) throw ConfigError("window must be a positive odd number");
  r.match = m;

  TrainConfig& t = r.train;
  t.steps = static_cast<int>(get_int(r.kv, "steps", t.steps));
  t.adam.lr = get_double(r.kv, "lr", t.adam.lr);
  t.batch = static_cast<int>(get_int(r.kv, "batch", t.batch));
  t.lambda_coarse = get_double(r.kv, "lambda_coarse", t.lambda_coarse);
  t.lambda_fine = get_double(r.kv, "lambda_fine", t.lambda_fine);
  t.fine_gate = get_double(r.kv, "fine_gate", t.fine_gate);
  t.gate_window = static_cast<int>(get_int(r.kv, "gate_window", t.gate_window));
  t.noise_sigma = get_double(r.kv, "noise_sigma", t.noise_sigma);
  t.heldout_pairs = static_cast<int>(get_int(r.kv, "heldout_pairs", t.heldout_pairs));
  t.heldout_seed = static_cast<std::uint64_t>(get_int(r.kv, "heldout_seed", static_cast<std::int64_t>(t.heldout_seed)));
  t.seed = r.seed;
  t.height = r.height;
  t.width = r.width;
  t.match = m;
  return r;
}

ordered_json resolved_json(const Resolved& r) {
  ordered_json j;
  for (const auto& [k, v] : config_key_values(r.model)) j["model"][k] = v;
  j["model"]["description"] = describe(r.model);
  j["seed"] = r.seed;
  j["height"] = r.height;
  j["width"] = r.width;
  j["match"] = {{"tau", r.match.tau},
                {"theta", r.match.theta},
                {"window", r.match.window},
                {"fine_temperature", r.match.fine_temperature}};
  const TrainConfig& t = r.train;
  j["train"] = {{"steps", t.steps},
                {"lr", t.adam.lr},
                {"batch", t.batch},
                {"lambda_coarse", t.lambda_coarse},
                {"lambda_fine", t.lambda_fine},
                {"fine_gate", t.fine_gate},
                {"gate_window", t.gate_window},
                {"noise_sigma", t.noise_sigma},
                {"heldout_pairs", t.heldout_pairs},
                {"heldout_seed", t.heldout_seed}};
  return j;
}

fs::path make_out_dir(const std::string& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw IoError(out, "cannot create output directory");
  return fs::path(out);
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_manifest_json(const fs::path& dir, const Options& o, const ordered_json& config, ordered_json results,
                         const std::vector<std::string>& outputs) {
  ordered_json j;
  j["command"] = o.command;
  j["argv"] = o.argv;
  j["timestamp"] = utc_timestamp();
  j["threads"] = thread_count();
  j["config"] = config;
  j["results"] = std::move(results);
  j["outputs"] = outputs;
  const fs::path p = dir / "manifest.json";
  std::ofstream f(p);
  if (!f) throw IoError(p.string(), "cannot open for writing");
  f << j.dump(2) << '\n';
  if (!f) throw IoError(p.string(), "write failed");
}

std::string whc(const Shape& s) {
  return std::to_string(s[3]) + "x" + std::to_string(s[2]) + "x" + std::to_string(s[1]);
}

Model model_for(const Options& o, const Resolved& r) {
  if (!o.checkpoint.empty()) return load_checkpoint(o.checkpoint);
  return Model(r.model, r.seed);
}

}  // namespace

int cmd_shapes(const Options& o) {
  const Resolved r = resolve(o, false, 480, 640);
  const ModelConfig& cfg = r.model;
  cfg.check_input(r.height, r.width);
  const auto levels = pyramid_shapes(cfg, 1, r.height, r.width);
  std::cout << "MatchFormer-" << to_string(cfg.variant) << "-" << to_string(cfg.attention) << " at " << r.width
            << "x" << r.height << " (W x H x C)\n";
  std::printf("%-8s %-6s %-6s %-14s %-8s %-6s %-3s %s\n", "stage", "scale", "embed", "output", "layers", "heads",
              "R", "schedule");
  for (int i = 0; i < kStages; ++i) {
    const StageConfig& s = cfg.stages[i];
    const std::string embed = std::to_string(s.kernel) + "/" + std::to_string(s.stride) + "/" + std::to_string(s.padding);
    std::printf("stage%-3d 1/%-4d %-6s %-14s %-8d %-6d %-3d %s\n", i + 1, cfg.stage_scale(i), embed.c_str(),
                whc(levels[i]).c_str(), s.layers, s.heads, s.reduction, format_flags(s.cross_flags).c_str());
  }
  const Shape coarse{1, cfg.coarse_channels, r.height / cfg.coarse_scale(), r.width / cfg.coarse_scale()};
  const Shape fine{1, cfg.fine_channels, r.height / cfg.fine_scale(), r.width / cfg.fine_scale()};
  std::cout << "output  coarse " << whc(coarse) << " (1/" << cfg.coarse_scale() << ")  fine " << whc(fine) << " (1/"
            << cfg.fine_scale() << ")\n";
  return kExitOk;
}

int cmd_match(const Options& o) {
  const Resolved r = resolve(o, true, 0, 0);
  const Image a = read_pgm(o.image_a);
  const Image b = read_pgm(o.image_b);
  if (a.height != b.height || a.width != b.width)
    throw ShapeError("match: images differ in size (" + std::to_string(a.width) + "x" + std::to_string(a.height) +
                     " vs " + std::to_string(b.width) + "x" + std::to_string(b.height) + ")");
  const Model model = model_for(o, r);
  model.config().check_input(a.height, a.width);
  if (o.checkpoint.empty()) std::cerr << "note: no --checkpoint, using an untrained model from seed " << r.seed << '\n';

  const MatchSet m = match_pair(to_tensor(a), to_tensor(b), model, r.match);
  const fs::path dir = make_out_dir(o.out);
  save_matches((dir / "matches.tsv").string(), m);
  write_ppm((dir / "overlay.ppm").string(), render_overlay(a, b, m));
  if (m.empty()) std::cerr << "warning: no matches above theta " << r.match.theta << '\n';
  std::cout << m.size() << " matches written to " << (dir / "matches.tsv").string() << '\n';

  ordered_json cfg = resolved_json(r);
  for (const auto& [k, v] : config_key_values(model.config())) cfg["model"][k] = v;
  cfg["model"]["description"] = describe(model.config());
  cfg["height"] = a.height;
  cfg["width"] = a.width;
  cfg.erase("train");
  cfg["checkpoint"] = o.checkpoint;
  cfg["image_a"] = o.image_a;
  cfg["image_b"] = o.image_b;
  write_manifest_json(dir, o, cfg, {{"matches", m.size()}}, {"matches.tsv", "overlay.ppm"});
  return kExitOk;
}

int cmd_train(const Options& o) {
  const Resolved r = resolve(o, true, 64, 64);
  r.model.check_input(r.height, r.width);
  const fs::path dir = make_out_dir(o.out);
  Model model(r.model, r.seed);
  std::cout << "training " << describe(r.model) << ", " << model.params().scalar_count() << " parameters, "
            << r.train.steps << " steps at " << r.width << "x" << r.height << '\n';

  const int every = std::max(1, r.train.steps / 20);
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult res = train_toy(model, r.train, [&](const StepMetrics& s) {
    if ((s.step + 1) % every != 0 && s.step + 1 != r.train.steps) return;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("step %5d  coarse %.4f  fine %.4f  precision %.3f%s  %.0fs\n", s.step + 1, s.loss_coarse,
                s.loss_fine, s.precision, s.fine_active ? "" : "  (fine off)", secs);
    std::fflush(stdout);
  });
  save_checkpoint((dir / "checkpoint.txt").string(), model);
  save_metrics_csv((dir / "metrics.csv").string(), res.log);
  std::printf("held-out coarse precision@1cell %.4f (%lld/%lld)\n", res.heldout.value(),
              static_cast<long long>(res.heldout.correct), static_cast<long long>(res.heldout.total));

  ordered_json results = {{"heldout_precision", res.heldout.value()},
                          {"heldout_correct", res.heldout.correct},
                          {"heldout_total", res.heldout.total}};
  if (!res.log.empty()) {
    results["final_loss_coarse"] = res.log.back().loss_coarse;
    results["final_loss_fine"] = res.log.back().loss_fine;
  }
  write_manifest_json(dir, o, resolved_json(r), results, {"checkpoint.txt", "metrics.csv"});
  return kExitOk;
}

int cmd_eval(const Options& o) {
  const Resolved r = resolve(o, true, 64, 64);
  const auto entries = load_manifest(o.manifest);
  RansacOptions ransac;
  ransac.seed = r.seed;
  EvalReport rep;
  ordered_json cfg = resolved_json(r);
  if (!o.checkpoint.empty()) {
    const Model model = load_checkpoint(o.checkpoint);
    model.config().check_input(r.height, r.width);
    for (const auto& [k, v] : config_key_values(model.config())) cfg["model"][k] = v;
    cfg["model"]["description"] = describe(model.config());
    rep = evaluate_model(model, entries, r.height, r.width, r.match, ransac);
  } else {
    if (o.matches.size() != entries.size())
      throw ConfigError("eval: " + std::to_string(entries.size()) + " manifest entries but " +
                        std::to_string(o.matches.size()) + " match files");
    EvalAccumulator acc;
    for (std::size_t i = 0; i < entries.size(); ++i) acc.add(load_matches(o.matches[i]), entries[i].h, r.width, r.height, ransac);
    rep = acc.report();
    cfg.erase("model");
  }
  const fs::path dir = make_out_dir(o.out);
  std::ofstream csv(dir / "report.csv");
  if (!csv) throw IoError((dir / "report.csv").string(), "cannot open for writing");
  write_report_csv(csv, rep);
  print_report(std::cout, rep);
  cfg["manifest"] = o.manifest;
  cfg["checkpoint"] = o.checkpoint;
  cfg["matches"] = o.matches;
  write_manifest_json(dir, o, cfg,
                      {{"pairs", rep.pairs}, {"acc@1px", rep.acc1}, {"acc@3px", rep.acc3}, {"acc@5px", rep.acc5}},
                      {"report.csv"});
  return kExitOk;
}

int cmd_bench(const Options& o) {
  const Resolved r = resolve(o, false, 480, 640);
  const ModelConfig& cfg = r.model;
  cfg.check_input(r.height, r.width);
  const FlopsBreakdown core = flops_count(cfg, r.height, r.width, false, r.match.window);
  const FlopsBreakdown full = flops_count(cfg, r.height, r.width, true, r.match.window);

  std::map<std::string, double> by_part;
  for (const auto& it : full.items) {
    const auto dot = it.scope.find('.', it.scope.find('.') + 1);
    by_part[it.scope.substr(0, dot)] += it.flops;
  }
  std::cout << "MatchFormer-" << to_string(cfg.variant) << "-" << to_string(cfg.attention) << " at " << r.width
            << "x" << r.height << ", both streams\n";
  for (const auto& [part, f] : by_part) std::printf("  %-22s %10.3f GFLOPs\n", part.c_str(), f / 1e9);
  for (const char* kind : {"conv", "linear", "attention", "matcher"})
    std::printf("  kind %-17s %10.3f GFLOPs\n", kind, full.total(kind) / 1e9);
  std::printf("total without matcher  %10.3f GFLOPs\n", core.gflops());
  std::printf("total with matcher     %10.3f GFLOPs\n", full.gflops());

  // Reference GFLOPs at 640x480, for comparison only.
  static const std::map<std::string, double> reported = {
      {"lite-la", 97}, {"large-la", 389}, {"lite-sea", 140}, {"large-sea", 414}};
  const std::string key = to_string(cfg.variant) + "-" + to_string(cfg.attention);
  if (auto it = reported.find(key); it != reported.end() && r.height == 480 && r.width == 640 && !r.kv.count("channels") &&
                                    r.kv.at("toy") == "false")
    std::printf("reference              %10.0f GFLOPs (ratio %.3f)\n", it->second, core.gflops() / it->second);

  ordered_json results = {{"gflops", core.gflops()}, {"gflops_with_matcher", full.gflops()}};
  if (!o.no_runtime) {
    Model model(cfg, r.seed);
    std::mt19937_64 rng(r.seed);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<double> px(static_cast<std::size_t>(2 * r.height * r.width));
    for (auto& v : px) v = u(rng);
    const Tensor images = Tensor::from({2, 1, r.height, r.width}, std::move(px));
    NoGradGuard ng;
    std::vector<double> ms;
    for (int k = 0; k < o.repeats; ++k) {
      const auto t0 = std::chrono::steady_clock::now();
      const FusionOutput out = model.forward_joint(images);
      ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    std::sort(ms.begin(), ms.end());
    std::printf("forward (encoder + decoder, %d threads) median %.1f ms over %d runs\n", thread_count(),
                ms[ms.size() / 2], o.repeats);
    results["forward_ms_median"] = ms[ms.size() / 2];
  }
  const fs::path dir = make_out_dir(o.out);
  std::ofstream csv(dir / "flops.csv");
  if (!csv) throw IoError((dir / "flops.csv").string(), "cannot open for writing");
  csv << "scope,kind,flops\n";
  for (const auto& it : full.items) csv << it.scope << ',' << it.kind << ',' << num(it.flops) << '\n';
  write_manifest_json(dir, o, resolved_json(r), results, {"flops.csv"});
  return kExitOk;
}

int cmd_gen(const Options& o) {
  const Resolved r = resolve(o, true, 64, 64);
  const fs::path dir = make_out_dir(o.out);
  std::vector<ManifestEntry> entries;
  std::vector<std::string> outputs = {"manifest.tsv"};
  for (int i = 0; i < o.count; ++i) {
    const std::uint64_t seed = r.seed + static_cast<std::uint64_t>(i);
    const PairSample s = make_pair(seed, r.train.bounds, r.height, r.width, r.train.noise_sigma);
    char stem[32];
    std::snprintf(stem, sizeof stem, "pair_%04d", i);
    write_pgm((dir / (std::string(stem) + "_a.pgm")).string(), s.a);
    write_pgm((dir / (std::string(stem) + "_b.pgm")).string(), s.b);
    outputs.push_back(std::string(stem) + "_a.pgm");
    outputs.push_back(std::string(stem) + "_b.pgm");
    entries.push_back({seed, s.h});
    if (o.exact_matches) {
      MatchSet m;
      for (std::int64_t y = 4; y < r.height; y += 8)
        for (std::int64_t x = 4; x < r.width; x += 8) {
          const Point2 q = s.h.apply({static_cast<double>(x), static_cast<double>(y)});
          if (q.x >= 0 && q.y >= 0 && q.x <= static_cast<double>(r.width - 1) && q.y <= static_cast<double>(r.height - 1))
            m.push_back({static_cast<double>(x), static_cast<double>(y), q.x, q.y, 1.0});
        }
      save_matches((dir / (std::string(stem) + "_gt.tsv")).string(), m);
      outputs.push_back(std::string(stem) + "_gt.tsv");
    }
  }
  save_manifest((dir / "manifest.tsv").string(), entries);
  std::cout << entries.size() << " pairs written to " << dir.string() << '\n';
  write_manifest_json(dir, o, resolved_json(r), {{"pairs", entries.size()}}, outputs);
  return kExitOk;
}

}  // namespace mfcli
