// Writes the bundled synthetic dataset plus a training config.

#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "kbalign/toy_world.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate the synthetic entity/attribute dataset", "make_toy_data"};
  std::string out = "data/toy";
  std::uint64_t seed = 101;
  std::string ablate = "food";
  std::size_t pretrain_epochs = 10, finetune_epochs = 15;
  double lambda = 1.0;
  app.add_option("--out", out, "Output directory");
  app.add_option("--seed", seed, "World seed");
  app.add_option("--ablate", ablate, "Domain written to keywords.txt");
  app.add_option("--pretrain-epochs", pretrain_epochs);
  app.add_option("--finetune-epochs", finetune_epochs);
  app.add_option("--lambda", lambda);
  CLI11_PARSE(app, argc, argv);

  try {
    kbalign::ToyWorldOptions options;
    options.seed = seed;
    const auto world = kbalign::make_toy_world(options);
    kbalign::write_toy_world(world, out, ablate);

    const auto g = kbalign::toy_graph_options();
    auto config = kbalign::toy_train_config(world.vocab_tokens.size(), g.dim);
    config.pretrain_epochs = pretrain_epochs;
    config.finetune_epochs = finetune_epochs;
    config.lambda = lambda;
    auto j = config.to_json();
    j["paths"] = {{"vocab", "vocab.txt"},
                  {"corpus", "corpus.txt"},
                  {"task_train", "task_train.jsonl"},
                  {"task_test", "task_test.jsonl"},
                  {"head", "classification"}};
    j["graph"] = {{"dim", g.dim}, {"epochs", g.epochs}, {"lr", g.learning_rate}, {"margin", g.margin}, {"seed", g.seed}};
    std::ofstream f(std::filesystem::path(out) / "config.json");
    f << j.dump(2) << '\n';
    std::cout << "wrote " << world.entities.size() << " entities, " << world.corpus.size() << " corpus lines, "
              << world.train.size() << "/" << world.test.size() << " task examples to " << out << '\n';
  } catch (const kbalign::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
