// Command-line front end: one subcommand per pipeline stage. Every run is
// seeded; artifacts (checkpoints, JSON-lines logs, metric reports) land in
// the --out directory (default: $PTK_ROOT or ./runs).

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "ptk/pipeline.hpp"

namespace {

using ptk::harness::RunSpec;

std::string default_out() {
  const char* root = std::getenv("PTK_ROOT");
  return root ? std::string(root) : std::string("./runs");
}

int execute(const RunSpec& spec, const std::string& out) {
  try {
    auto artifacts = ptk::pipeline::run_stage(spec, out);
    for (const auto& a : artifacts) std::cout << "wrote " << a << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

void add_common(CLI::App* cmd, RunSpec& spec, std::string& out) {
  cmd->add_option("--seed", spec.seed, "run seed (mandatory)")->required();
  cmd->add_option("--out", out, "output directory");
  cmd->add_option("--arch", spec.options["arch"], "architecture description file");
  cmd->add_option("--corpus", spec.options["corpus"], "synthetic corpus size");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-stage vision pretraining toolkit"};
  app.require_subcommand(1);
  std::string out = default_out();

  RunSpec amateur_spec;
  amateur_spec.stage = "amateur";
  std::string amateur_config;
  auto* am = app.add_subcommand("pretrain-amateur", "multi-modal pretraining (global + local)");
  am->add_option("--config", amateur_config, "JSON run spec")->required();
  am->add_option("--out", out, "output directory");

  RunSpec expert_spec;
  expert_spec.stage = "expert";
  auto* ex = app.add_subcommand("pretrain-expert", "single-task multi-dataset pretraining");
  ex->add_option("--task", expert_spec.options["task"], "cls | patch | pixel")->required();
  ex->add_option("--datasets", expert_spec.options["datasets"], "comma-separated dataset ids");
  ex->add_option("--scheme", expert_spec.options["scheme"], "natural | unified | partial");
  ex->add_option("--synonyms", expert_spec.options["synonyms"],
                 "partial merge pairs, ds:label=ds:label,...");
  ex->add_option("--init", expert_spec.options["init"], "initialization checkpoint");
  ex->add_option("--steps", expert_spec.options["steps"], "training steps");
  add_common(ex, expert_spec, out);

  RunSpec gen_spec;
  gen_spec.stage = "generalist";
  auto* ge = app.add_subcommand("pretrain-generalist", "multi-task unification of experts");
  ge->add_option("--experts", gen_spec.options["experts"], "comma-separated expert checkpoints")
      ->required();
  ge->add_option("--scheme", gen_spec.options["scheme"],
                 "hard_sharing | same_level | low_level | high_level | cross_level");
  ge->add_option("--module", gen_spec.options["module"], "non_linear | channel");
  ge->add_option("--steps", gen_spec.options["steps"], "training steps");
  add_common(ge, gen_spec, out);

  RunSpec adapt_spec;
  adapt_spec.stage = "adapt";
  auto* ad = app.add_subcommand("adapt", "multi-stage fine-tuning to a downstream task");
  ad->add_option("--init", adapt_spec.options["init"], "pretrained checkpoint")->required();
  ad->add_option("--rerepresenter", adapt_spec.options["rerepresenter"],
                 "re-representer checkpoint, or 'train'");
  ad->add_option("--task", adapt_spec.options["task"], "downstream dataset id");
  ad->add_option("--contrastive", adapt_spec.options["contrastive"], "on | off");
  ad->add_option("--percent", adapt_spec.options["percent"], "percentage-shot split");
  add_common(ad, adapt_spec, out);

  RunSpec bench_spec;
  bench_spec.stage = "benchmark";
  auto* be = app.add_subcommand("benchmark", "linear-probe evaluation suite");
  be->add_option("--model", bench_spec.options["model"], "model checkpoint")->required();
  be->add_option("--suite", bench_spec.options["suite"],
                 "comma-separated tasks (classification,depth)");
  be->add_option("--percent", bench_spec.options["percent"], "percentage-shot split");
  be->add_option("--protocol", bench_spec.options["protocol"], "lbfgs | sgd");
  add_common(be, bench_spec, out);

  RunSpec nas_spec;
  nas_spec.stage = "nas";
  auto* na = app.add_subcommand("nas-search", "architecture search over the unified space");
  na->add_option("--space", nas_spec.options["space"], "search space JSON file");
  na->add_option("--budget", nas_spec.options["budget"], "architectures to evaluate");
  na->add_option("--topk", nas_spec.options["topk"], "architectures to keep");
  na->add_option("--oracle", nas_spec.options["oracle"], "surrogate | proxy-train");
  na->add_option("--target-flops", nas_spec.options["target_flops"], "reward target MACs");
  add_common(na, nas_spec, out);

  CLI11_PARSE(app, argc, argv);

  auto scrub = [](RunSpec& spec) {
    // drop empty optional flags so stage defaults apply
    for (auto it = spec.options.begin(); it != spec.options.end();)
      it = it->second.empty() ? spec.options.erase(it) : std::next(it);
  };

  if (am->parsed()) {
    std::ifstream f(amateur_config);
    if (!f.good()) {
      std::cerr << "error: cannot open config " << amateur_config << "\n";
      return 1;
    }
    std::stringstream ss;
    ss << f.rdbuf();
    try {
      RunSpec spec = ptk::harness::parse_run_spec(ss.str());
      return execute(spec, out);
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 1;
    }
  }
  for (auto [cmd, spec] : {std::pair{ex, &expert_spec}, {ge, &gen_spec}, {ad, &adapt_spec},
                           {be, &bench_spec}, {na, &nas_spec}}) {
    if (cmd->parsed()) {
      scrub(*spec);
      return execute(*spec, out);
    }
  }
  return 0;
}
