#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "commands.hpp"
#include "matchformer/errors.hpp"

using namespace mfcli;

namespace {

void add_common(CLI::App* s, Options& o) {
  s->add_option("--variant", o.variant, "Model size: lite or large")->check(CLI::IsMember({"lite", "large"}));
  s->add_option("--attention", o.attention, "Attention kind: la, sea or full")
      ->check(CLI::IsMember({"la", "sea", "full"}));
  s->add_option("--config", o.config, "key = value configuration file");
  s->add_option("--seed", o.seed, "Random seed");
  s->add_option("--out", o.out, "Output directory");
  s->add_option("--tau", o.tau, "Coarse score temperature");
  s->add_option("--theta", o.theta, "Coarse confidence threshold");
  s->add_option("--window", o.window, "Fine window size (odd)");
}

void add_extent(CLI::App* s, Options& o) {
  s->add_option("--height", o.height, "Image height in pixels");
  s->add_option("--width", o.width, "Image width in pixels");
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  for (int i = 0; i < argc; ++i) o.argv.emplace_back(argv[i]);

  CLI::App app{"Desk-scale MatchFormer: build, train, match and evaluate"};
  app.require_subcommand(1);

  auto* selftest = app.add_subcommand("selftest", "Run the invariant suite");
  add_common(selftest, o);
  selftest->add_flag("--quick", o.quick, "Skip the slowest groups");
  selftest->add_flag("--inject-fault", o.inject_fault)->group("");

  auto* shapes = app.add_subcommand("shapes", "Print per-stage and output shapes");
  add_common(shapes, o);
  add_extent(shapes, o);

  auto* match = app.add_subcommand("match", "Match two PGM images");
  add_common(match, o);
  match->add_option("image_a", o.image_a, "First image (PGM)")->required();
  match->add_option("image_b", o.image_b, "Second image (PGM)")->required();
  match->add_option("--checkpoint", o.checkpoint, "Model checkpoint; a fresh model from --seed otherwise");

  auto* train = app.add_subcommand("train", "Train a toy model on synthetic homography pairs");
  add_common(train, o);
  add_extent(train, o);
  train->add_option("--steps", o.steps, "Adam steps");
  train->add_option("--lr", o.lr, "Learning rate");

  auto* eval = app.add_subcommand("eval", "Evaluate a model or saved matches against a manifest");
  add_common(eval, o);
  add_extent(eval, o);
  eval->add_option("--manifest", o.manifest, "Manifest of pair seeds and homographies")->required();
  auto* ck = eval->add_option("--checkpoint", o.checkpoint, "Model to evaluate on the manifest pairs");
  auto* mt = eval->add_option("--matches", o.matches, "Match files, one per manifest entry");
  ck->excludes(mt);

  auto* bench = app.add_subcommand("bench", "FLOPs breakdown and forward runtime");
  add_common(bench, o);
  add_extent(bench, o);
  bench->add_flag("--no-runtime", o.no_runtime, "Only print the analytic counts");
  bench->add_option("--repeats", o.repeats, "Timed forward passes")->check(CLI::PositiveNumber);

  auto* gen = app.add_subcommand("gen", "Write synthetic pairs and their manifest");
  add_common(gen, o);
  add_extent(gen, o);
  gen->add_option("--count", o.count, "Number of pairs")->check(CLI::PositiveNumber);
  gen->add_flag("--exact-matches", o.exact_matches, "Also write ground-truth match files");

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

  const std::map<std::string, int (*)(const Options&)> dispatch = {
      {"selftest", cmd_selftest}, {"shapes", cmd_shapes}, {"match", cmd_match}, {"train", cmd_train},
      {"eval", cmd_eval},         {"bench", cmd_bench},   {"gen", cmd_gen}};
  o.command = app.get_subcommands().front()->get_name();
  try {
    return dispatch.at(o.command)(o);
  } catch (const matchformer::IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const matchformer::ConfigError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const matchformer::ShapeError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const matchformer::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const matchformer::DegenerateError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}
