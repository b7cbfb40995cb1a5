#include <iostream>

#include <CLI11.hpp>

#include "hhlab/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"hhlab: linear-attention feature map experiments"};
  app.require_subcommand(1);

  hhlab::RunOptions opt;
  std::string config, out, resume;
  std::uint64_t seed = 0;
  std::size_t max_n = 0;

  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "key=value config file");
    sub->add_option("--out", out, "output directory (must not exist unless --force)");
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_flag("--dry-run", opt.dry_run, "print the resolved config and exit");
    sub->add_flag("--force", opt.force, "reuse an existing output directory");
    sub->add_flag("--tiny", opt.tiny, "desk-scale defaults");
  };
  auto* recall = app.add_subcommand("recall", "train toy transformers on associative recall");
  auto* distill = app.add_subcommand("distill", "distill hedgehog maps against a frozen teacher");
  auto* analyze = app.add_subcommand("analyze", "entropy, monotonicity and KL panel");
  auto* bench = app.add_subcommand("bench", "attention timing and memory scaling");
  for (auto* sub : {recall, distill, analyze, bench}) add_common(sub);
  auto* resume_opt = distill->add_option("--resume", resume, "continue from a distill checkpoint directory");
  analyze->add_flag("--export", opt.export_attention, "dump attention matrices as CSV");
  auto* max_n_opt = bench->add_option("--max-n", max_n, "drop sequence lengths above this");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : hhlab::kExitConfig;
  }

  const auto* sub = app.get_subcommands().front();
  if (sub->count("--config")) opt.config = config;
  if (sub->count("--out")) opt.out = out;
  if (sub->count("--seed")) opt.seed = seed;
  if (*resume_opt) opt.resume = resume;
  if (*max_n_opt) opt.max_n = max_n;
  return hhlab::run_command(sub->get_name(), opt, std::cout, std::cerr);
}
