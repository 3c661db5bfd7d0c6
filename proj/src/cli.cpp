// Copyright 2026 The MIM Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "mim/cli.hpp"

#include <atomic>
#include <chrono>
#include <csignal>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "mim/retrieval.hpp"
#include "mim/service.hpp"
#include "mim/synthdata.hpp"
#include "mim/training.hpp"

namespace mim {

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig:
    case ErrorKind::kValidation: return kExitConfig;
    case ErrorKind::kIo:
    case ErrorKind::kFormat:
    case ErrorKind::kParse:
    case ErrorKind::kCheckpoint: return kExitIo;
    default: return kExitRuntime;
  }
}

namespace {

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop = true; }

struct SeedOptions {
  std::uint64_t seed = 0;
  bool nondeterministic = false;
  CLI::Option* flag = nullptr;

  void add(CLI::App* app) {
    flag = app->add_option("--seed", seed, "Seed for every stochastic step");
    app->add_flag("--nondeterministic", nondeterministic, "Draw a fresh seed");
  }
  /// Resolved seed; draws one when nondeterministic.
  std::uint64_t resolve(std::ostream& err) {
    if (flag->count() > 0 && nondeterministic) {
      throw ConfigError("--seed and --nondeterministic are exclusive");
    }
    if (flag->count() > 0) return seed;
    if (!nondeterministic) {
      throw ConfigError("--seed is required (or pass --nondeterministic)");
    }
    std::random_device rd;
    seed = (static_cast<std::uint64_t>(rd()) << 32) | rd();
    err << "nondeterministic run, drew seed " << seed << "\n";
    return seed;
  }
};

void add_corpus_options(CLI::App* app, CorpusConfig& c) {
  app->add_option("--n-products", c.n_products, "Queried products");
  app->add_option("--n-queries-per-product", c.n_queries_per_product, "Query images per product");
  app->add_option("--n-distractors", c.n_distractors, "Index-only products");
  app->add_option("--n-train-products", c.n_train_products, "Products in the training split");
  app->add_option("--concept-dim", c.concept_dim, "Latent concept dimension");
  app->add_option("--image-feature-dim", c.image_feature_dim, "Image feature dimension");
  app->add_option("--vocab-size", c.vocab_size, "Token vocabulary size");
  app->add_option("--background-pool-size", c.background_pool_size, "Shared backgrounds");
  app->add_option("--noise-catalog", c.noise_catalog, "Catalog image noise scale");
  app->add_option("--noise-query", c.noise_query, "Query image noise scale");
  app->add_option("--background-strength", c.background_strength, "Query background scale");
  app->add_option("--product-text-density", c.product_text_density,
                  "Fraction of coordinates named in product text");
  app->add_option("--query-text-density", c.query_text_density,
                  "Fraction of coordinates named in query text");
  app->add_option("--text-levels", c.text_levels, "Quantization levels per coordinate");
  app->add_option("--n-filler-tokens", c.n_filler_tokens, "Filler words per product text");
  app->add_option("--synonym-rate", c.synonym_rate, "Chance a query word is a synonym");
  app->add_option("--query-text-noise", c.query_text_noise,
                  "Perception noise on coordinates named in query text");
  app->add_option("--n-query-texts-per-product", c.n_query_texts_per_product,
                  "Query strings per training product");
  app->add_option("--train-backdrop-strength", c.train_backdrop_strength,
                  "Listing backdrop scale in training catalog images");
  app->add_option("--train-backdrop-rate", c.train_backdrop_rate,
                  "Chance a training query shares its listing backdrop");
}

void add_train_options(CLI::App* app, TrainConfig& c, bool with_mode) {
  if (with_mode) {
    app->add_option_function<std::string>(
           "--mode", [&c](const std::string& m) { c.mode = parse_train_mode(m); },
           "image_only, three_tower or four_tower")
        ->default_str(to_string(c.mode));
  }
  app->add_option("--steps", c.steps, "Optimizer steps");
  app->add_option("--batch", c.batch, "Local batch size B");
  app->add_option("--shards", c.shards, "Shard count N_g");
  app->add_option("--lr", c.lr, "Adam learning rate");
  app->add_option("--weight-decay", c.weight_decay, "Decoupled weight decay");
  app->add_option("--checkpoint-every", c.checkpoint_every, "Steps between checkpoints, 0 for none");
  app->add_option("--embed-dim", c.towers.embed_dim, "Embedding dimension");
  std::string dims;
  for (Index h : c.towers.hidden_dims) dims += (dims.empty() ? "" : ",") + std::to_string(h);
  app->add_option("--hidden-dims", c.towers.hidden_dims, "Image trunk widths")
      ->delimiter(',')
      ->default_str(dims);
  app->add_option("--max-tokens", c.towers.max_tokens, "Token sequence cap");
  app->add_option("--temperature-init", c.towers.temperature_init, "Initial temperature");
  app->add_option("--token-init-scale", c.towers.token_init_scale, "Token embedding init scale");
}

std::vector<WeightCell> parse_grid(const std::string& s) {
  std::vector<WeightCell> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("grid cell '" + item + "' is not w_q:w_c");
    try {
      out.push_back({std::stod(item.substr(0, colon)), std::stod(item.substr(colon + 1))});
    } catch (const std::logic_error&) {
      throw ConfigError("grid cell '" + item + "' is not w_q:w_c");
    }
  }
  return out;
}

void write_json(const nlohmann::json& j, const std::string& path, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << j.dump(2) << "\n";
    return;
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f << j.dump(2) << "\n";
  if (!f) throw IoError("failed writing " + path);
}

Corpus load_corpus(const std::filesystem::path& dir, std::ostream& err) {
  Corpus c = read_corpus(dir);
  err << "corpus " << dir.string() << ": " << c.products.size() << " products, "
      << c.distractors.size() << " distractors, " << c.queries.size() << " queries, "
      << c.train_products.size() << " training products\n";
  return c;
}

void take_dims(TrainConfig& t, const Corpus& corpus) {
  t.towers.image_feature_dim = corpus.config.image_feature_dim;
  t.towers.vocab_size = corpus.config.vocab_size;
}

void write_train_outputs(const TrainConfig& config, const TrainResult& result, std::ostream& err) {
  std::filesystem::create_directories(config.out_dir);
  write_json(config, (config.out_dir / "train_config.json").string(), err);
  err << "wrote " << (config.out_dir / "model.mimc").string() << " (temperature "
      << temperature(result.model) << ", final loss "
      << (result.log.records.empty() ? 0.0 : result.log.records.back().total) << ")\n";
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multimodal image-match: data, training, retrieval and serving", "mim"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "TOML file; keys under [<subcommand>] mirror the flags");

  // gen-data
  CorpusConfig corpus_cfg;
  SeedOptions gen_seed;
  std::string gen_out;
  CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic corpus");
  gen_seed.add(gen);
  gen->add_option("--out", gen_out, "Output directory")->required();
  add_corpus_options(gen, corpus_cfg);

  // train
  TrainConfig train_cfg;
  SeedOptions train_seed;
  std::string train_corpus, train_out;
  CLI::App* tr = app.add_subcommand("train", "Train a model from scratch");
  train_seed.add(tr);
  tr->add_option("--corpus", train_corpus, "Corpus directory")->required();
  tr->add_option("--out", train_out, "Output directory")->required();
  add_train_options(tr, train_cfg, true);

  // finetune
  TrainConfig ft_cfg;
  ft_cfg.mode = TrainMode::kFourTower;
  SeedOptions ft_seed;
  std::string ft_base, ft_corpus, ft_out;
  CLI::App* ft = app.add_subcommand("finetune", "Fine-tune a checkpoint with four towers");
  ft_seed.add(ft);
  ft->add_option("--base", ft_base, "Starting checkpoint")->required();
  ft->add_option("--corpus", ft_corpus, "Corpus directory")->required();
  ft->add_option("--out", ft_out, "Output directory")->required();
  ft->add_option("--finetune-lr-scale", ft_cfg.finetune_lr_scale, "Multiplies --lr");
  add_train_options(ft, ft_cfg, false);

  // export-embeddings
  std::string ex_ckpt, ex_corpus, ex_out;
  CLI::App* ex = app.add_subcommand("export-embeddings", "Write embedding files");
  ex->add_option("--checkpoint", ex_ckpt, "Model checkpoint")->required();
  ex->add_option("--corpus", ex_corpus, "Corpus directory")->required();
  ex->add_option("--out", ex_out, "Output directory")->required();

  // build-index
  std::string bi_emb, bi_out;
  double bi_wc = 0.5;
  CLI::App* bi = app.add_subcommand("build-index", "Build a fused index from embeddings");
  bi->add_option("--embeddings", bi_emb, "Directory written by export-embeddings")->required();
  bi->add_option("--w-c", bi_wc, "Catalog-side fusion weight");
  bi->add_option("--out", bi_out, "Index file")->required();

  // eval
  std::string ev_ckpt, ev_corpus, ev_task = "multimodal", ev_grid, ev_out;
  bool ev_full = false;
  CLI::App* ev = app.add_subcommand("eval", "Recall@k over the evaluation queries");
  ev->add_option("--checkpoint", ev_ckpt, "Model checkpoint")->required();
  ev->add_option("--corpus", ev_corpus, "Corpus directory")->required();
  ev->add_option("--task", ev_task, "image_to_image, image_to_multimodal or multimodal");
  ev->add_option("--grid", ev_grid, "Weight cells as w_q:w_c,w_q:w_c");
  ev->add_flag("--full-grid", ev_full, "Search w_q and w_c over the full grid");
  ev->add_option("--out", ev_out, "Report file, stdout when omitted");

  // serve
  ServiceConfig sv;
  std::string sv_ckpt, sv_corpus, sv_index, sv_emb;
  CLI::App* se = app.add_subcommand("serve", "Serve search over HTTP");
  se->add_option("--checkpoint", sv_ckpt, "Model checkpoint")->required();
  se->add_option("--corpus", sv_corpus, "Corpus directory")->required();
  se->add_option("--index", sv_index, "Index file from build-index");
  se->add_option("--embeddings", sv_emb, "Embedding directory, when no --index");
  se->add_option("--host", sv.host, "Listen address");
  se->add_option("--port", sv.port, "Listen port, 0 for any");
  se->add_option("--w-c", sv.w_c, "Catalog-side fusion weight");
  se->add_option("--default-w-q", sv.default_w_q, "Query-side weight when none is given");
  se->add_option("--default-k", sv.default_k, "Results when k is not given");
  se->add_flag("--evaluation-mode", sv.evaluation_mode, "Expose ground-truth links");

  std::vector<std::string> argv_store = {"mim"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  }

  CLI::App* used = app.get_subcommands().front();
  // Printed as a config section so it can be fed back through --config.
  err << "# effective config\n[" << used->get_name() << "]\n" << used->config_to_str(true, false);

  try {
    if (used == gen) {
      corpus_cfg.seed = gen_seed.resolve(err);
      corpus_cfg.validate();
      write_corpus(generate_corpus(corpus_cfg), gen_out);
      err << "wrote corpus to " << gen_out << "\n";
    } else if (used == tr) {
      train_cfg.seed = train_seed.resolve(err);
      train_cfg.corpus = train_corpus;
      train_cfg.out_dir = train_out;
      const Corpus corpus = load_corpus(train_corpus, err);
      take_dims(train_cfg, corpus);
      train_cfg.validate();
      const TrainResult r = train(train_cfg, corpus, &err);
      write_train_outputs(train_cfg, r, err);
    } else if (used == ft) {
      ft_cfg.seed = ft_seed.resolve(err);
      ft_cfg.corpus = ft_corpus;
      ft_cfg.out_dir = ft_out;
      const Corpus corpus = load_corpus(ft_corpus, err);
      const TowerParams base = load_checkpoint(ft_base);
      ft_cfg.towers = base.config;
      ft_cfg.towers.towers = 4;
      ft_cfg.validate();
      const TrainResult r = finetune(base, ft_cfg, corpus, &err);
      write_train_outputs(ft_cfg, r, err);
    } else if (used == ex) {
      const TowerParams model = load_checkpoint(ex_ckpt);
      export_embeddings(model, load_corpus(ex_corpus, err), ex_out);
      err << "wrote embeddings to " << ex_out << "\n";
    } else if (used == bi) {
      check_fusion_weight(bi_wc);
      const RetrievalIndex index = index_from_embeddings(bi_emb, bi_wc);
      save_index(index, bi_out);
      err << "wrote index of " << index.size() << " products to " << bi_out << "\n";
    } else if (used == ev) {
      const Task task = parse_task(ev_task);
      std::vector<WeightCell> grid;
      if (ev_full && !ev_grid.empty()) throw ConfigError("--full-grid and --grid are exclusive");
      if (ev_full) {
        if (task != Task::kMultimodal) throw ConfigError("--full-grid needs --task multimodal");
        grid = default_grid(task, true);
      } else if (!ev_grid.empty()) {
        grid = parse_grid(ev_grid);
      }
      const TowerParams model = load_checkpoint(ev_ckpt);
      const EvalReport rep = evaluate(model, load_corpus(ev_corpus, err), task, grid);
      write_json(rep, ev_out, out);
      err << to_string(task) << " best (w_q " << rep.best.weights.w_q << ", w_c "
          << rep.best.weights.w_c << "): recall@1 " << rep.best.recall_at_1 << ", recall@5 "
          << rep.best.recall_at_5 << ", recall@10 " << rep.best.recall_at_10 << "\n";
    } else if (used == se) {
      sv.checkpoint = sv_ckpt;
      sv.corpus_dir = sv_corpus;
      sv.index_path = sv_index;
      sv.embeddings_dir = sv_emb;
      auto snap = load_snapshot(sv);
      SearchService service(snap, sv);
      HttpServer server(service);
      const int port = server.bind(sv.host, sv.port);
      g_stop = false;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::thread watcher([&] {
        while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
        server.stop();
      });
      err << "serving " << snap->index.size() << " products on http://" << sv.host << ":"
          << port << std::endl;
      try {
        server.serve();
      } catch (...) {
        g_stop = true;
        watcher.join();
        throw;
      }
      g_stop = true;
      watcher.join();
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace mim
