#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "corelm/cli.hpp"

namespace {

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("-c,--config", args.path, "Run configuration (section.key = value)")->required();
  cmd->add_option("--set", args.overrides, "Override one key, e.g. --set eval.store_mode=reset");
}

corelm::RunConfig resolve(const ConfigArgs& args) {
  corelm::RunConfig config = corelm::RunConfig::load(args.path);
  for (const auto& o : args.overrides) config.set(o);
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"corelm: entity-aware language model training and evaluation"};
  app.require_subcommand(1);

  ConfigArgs prepare_args, pretrain_args, finetune_args, eval_args;
  std::string input;
  auto* prepare = app.add_subcommand("prepare-data", "Parse, split, expand and tokenize an annotated corpus");
  add_config_options(prepare, prepare_args);
  prepare->add_option("--input", input, "Corpus file; overrides paths.corpus");

  auto* pretrain = app.add_subcommand("pretrain", "Train the base decoder");
  add_config_options(pretrain, pretrain_args);

  auto* finetune = app.add_subcommand("finetune", "Attach Entity-Gating to the base model and fine-tune it");
  add_config_options(finetune, finetune_args);

  std::string task;
  auto* eval = app.add_subcommand("eval", "Score a model and write a report");
  add_config_options(eval, eval_args);
  eval->add_option("task", task, "ppl, lambada or cbt")->required()->check(CLI::IsMember({"ppl", "lambada", "cbt"}));

  std::string report_a, report_b;
  auto* compare = app.add_subcommand("compare", "Paired t-test between two reports over the same examples");
  compare->add_option("report_a", report_a)->required();
  compare->add_option("report_b", report_b)->required();

  std::string store;
  auto* inspect = app.add_subcommand("inspect-entities", "List stored entity vectors with their norms");
  inspect->add_option("store", store, "Entity store archive")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error[usage]: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*prepare) {
      auto config = resolve(prepare_args);
      if (!input.empty()) config.set("paths.corpus=" + input);
      std::cout << corelm::cmd_prepare_data(config, std::cerr).string() << "\n";
    } else if (*pretrain) {
      std::cout << corelm::cmd_pretrain(resolve(pretrain_args), std::cerr).string() << "\n";
    } else if (*finetune) {
      std::cout << corelm::cmd_finetune(resolve(finetune_args), std::cerr).string() << "\n";
    } else if (*eval) {
      std::cout << corelm::cmd_eval(resolve(eval_args), task, std::cout).string() << "\n";
    } else if (*compare) {
      corelm::cmd_compare(report_a, report_b, std::cout);
    } else if (*inspect) {
      corelm::cmd_inspect_entities(store, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error[" << corelm::error_category(e) << "]: " << e.what() << "\n";
    return corelm::exit_code_for(e);
  }
  return 0;
}
