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

// Acceptance runner: one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "mim/cli.hpp"
#include "mim/losses.hpp"
#include "mim/retrieval.hpp"
#include "mim/service.hpp"
#include "mim/synthdata.hpp"
#include "mim/training.hpp"
// After Eigen: resolv.h defines _res.
#include "httplib.h"

namespace fs = std::filesystem;
using namespace mim;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double x, int digits = 4) {
  std::ostringstream s;
  s << std::setprecision(digits) << x;
  return s.str();
}

std::string sci(double x) {
  std::ostringstream s;
  s << std::scientific << std::setprecision(2) << x;
  return s.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Tensor random_unit_rows(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t(rows, cols);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = n(rng);
  for (Index r = 0; r < rows; ++r) t.row(r).normalize();
  return t;
}

// ---------------------------------------------------------------------------
// Shared trained models, keyed by mode and seed.

struct Lab {
  fs::path work;
  Index steps = 0;
  int seeds = 3;
  std::map<std::uint64_t, Corpus> corpora;
  std::map<std::pair<std::string, std::uint64_t>, TowerParams> models;
  std::map<std::pair<std::string, std::uint64_t>, EvalInputs> embedded;

  const Corpus& corpus(std::uint64_t seed) {
    auto it = corpora.find(seed);
    if (it != corpora.end()) return it->second;
    CorpusConfig cc;
    cc.seed = seed;
    return corpora.emplace(seed, generate_corpus(cc)).first->second;
  }

  TrainConfig train_config(std::uint64_t seed, TrainMode mode) const {
    TrainConfig tc;
    tc.seed = seed;
    tc.mode = mode;
    if (steps > 0) tc.steps = steps;
    return tc;
  }

  /// "image_only", "three_tower", "four_tower" or "finetune".
  const TowerParams& model(const std::string& kind, std::uint64_t seed) {
    const auto key = std::make_pair(kind, seed);
    auto it = models.find(key);
    if (it != models.end()) return it->second;
    const auto t0 = std::chrono::steady_clock::now();
    TowerParams m;
    if (kind == "finetune") {
      m = finetune(model("three_tower", seed), train_config(seed, TrainMode::kFourTower),
                   corpus(seed))
              .model;
    } else {
      m = train(train_config(seed, parse_train_mode(kind)), corpus(seed)).model;
    }
    std::cerr << "  trained " << kind << " seed " << seed << " in "
              << fmt(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(),
                     3)
              << " s\n";
    return models.emplace(key, std::move(m)).first->second;
  }

  const EvalInputs& inputs(const std::string& kind, std::uint64_t seed) {
    const auto key = std::make_pair(kind, seed);
    auto it = embedded.find(key);
    if (it != embedded.end()) return it->second;
    return embedded.emplace(key, embed_for_eval(model(kind, seed), corpus(seed))).first->second;
  }

  RecallCell best(const std::string& kind, std::uint64_t seed, Task task) {
    return evaluate(inputs(kind, seed), task).best;
  }
};

// ---------------------------------------------------------------------------

Outcome a1() {
  double worst = 0.0;
  for (Index m : {2, 8, 64}) {
    Tape tape;
    Tensor same = Tensor::Zero(m, 4);
    same.col(0).setOnes();
    const Var a = tape.constant(same);
    const Var tau = tape.constant(Tensor::Constant(1, 1, 0.07));
    const double l = pair_infonce(a, a, tau).scalar();
    worst = std::max(worst, std::abs(l - std::log(static_cast<double>(m))));
  }
  Tape tape;
  const Var e = tape.constant(Tensor::Identity(2, 2));
  const double sep = pair_infonce(e, e, tape.constant(Tensor::Constant(1, 1, 1.0))).scalar();
  const double sep_err = std::abs(sep - std::log1p(std::exp(-1.0)));
  return {worst <= 1e-12 && sep_err <= 1e-9,
          "max |L - ln M| = " + sci(worst) + "; separated pair " + fmt(sep, 7) + " (error " +
              sci(sep_err) + ")"};
}

Outcome a2() {
  CorpusConfig cc;
  cc.n_products = 8;
  cc.n_distractors = 0;
  cc.n_train_products = 16;
  TowerConfig small;
  small.hidden_dims = {12, 10};
  small.embed_dim = 6;
  small.max_tokens = 16;
  double worst = 0.0;
  std::size_t checked = 0;
  std::vector<std::string> failures;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    cc.seed = seed;
    const Corpus corpus = generate_corpus(cc);
    const TrainingSet data(corpus);
    std::mt19937_64 rng(seed);
    const RawBatch batch = data.sample_batch(4, 1, rng).front();
    for (int towers : {3, 4}) {
      small.towers = towers;
      TowerParams m = init_towers(small, seed + 10);
      const TrainMode mode = towers == 3 ? TrainMode::kThreeTower : TrainMode::kFourTower;
      LossFunction fn = [&](Tape& tape, ParamSet&) {
        TowerGraph g(tape, m);
        const AlignedBatch b = encode_batch(g, batch, mode);
        return (towers == 3 ? loss_3tower(b, g.temperature()) : loss_4tower(b, g.temperature()))
            .total;
      };
      const GradCheckReport r = grad_check(fn, m.params, 1e-4);
      for (const auto& e : r.entries) worst = std::max(worst, e.max_rel_error);
      checked += r.entries.size();
      for (const auto& f : r.failures()) {
        failures.push_back("seed " + std::to_string(seed) + " " + std::to_string(towers) +
                           "-tower " + f);
      }
    }
  }
  std::string detail = std::to_string(checked) + " parameter checks, worst relative error " +
                       sci(worst);
  if (!failures.empty()) detail += "; first failure: " + failures.front();
  return {failures.empty(), detail};
}

RawBatch slice(const RawBatch& b, Index begin, Index n) {
  RawBatch out;
  out.query_images = b.query_images.middleRows(begin, n);
  out.catalog_images = b.catalog_images.middleRows(begin, n);
  auto sub = [&](const auto& v) {
    using V = std::decay_t<decltype(v)>;
    return V(v.begin() + begin, v.begin() + begin + n);
  };
  out.product_texts = sub(b.product_texts);
  out.query_texts = sub(b.query_texts);
  out.product_ids = sub(b.product_ids);
  return out;
}

Outcome a3() {
  CorpusConfig cc;
  cc.n_products = 8;
  cc.n_distractors = 0;
  cc.n_train_products = 64;
  const Corpus corpus = generate_corpus(cc);
  const TrainingSet data(corpus);
  double loss_gap = 0.0, grad_gap = 0.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::mt19937_64 rng(seed);
    const RawBatch pool = data.sample_batch(16, 1, rng).front();
    TowerConfig tc;
    tc.towers = 4;
    TowerParams m = init_towers(tc, seed);
    for (TrainMode mode : {TrainMode::kImageOnly, TrainMode::kThreeTower, TrainMode::kFourTower}) {
      std::vector<double> totals;
      std::vector<std::map<std::string, Tensor>> grads;
      for (Index shards : {1, 2, 4}) {
        const Index b = 16 / shards;
        m.params.zero_grad();
        Tape tape;
        TowerGraph g(tape, m);
        std::vector<AlignedBatch> parts;
        for (Index s = 0; s < shards; ++s) parts.push_back(encode_batch(g, slice(pool, s * b, b), mode));
        const AlignedBatch all = gather_shards(parts);
        const Var tau = g.temperature();
        const LossTerms t = mode == TrainMode::kImageOnly   ? loss_image_only(all, tau)
                            : mode == TrainMode::kThreeTower ? loss_3tower(all, tau)
                                                             : loss_4tower(all, tau);
        // Every pair term, not only the sum.
        for (const auto& p : t.pairs) totals.push_back(p.loss.scalar());
        totals.push_back(t.total.scalar());
        tape.backward(t.total);
        std::map<std::string, Tensor> gs;
        for (const auto& [name, p] : m.params) gs[name] = p.grad;
        grads.push_back(std::move(gs));
      }
      const std::size_t per = totals.size() / 3;
      for (std::size_t i = 0; i < per; ++i) {
        for (std::size_t s = 1; s < 3; ++s) {
          loss_gap = std::max(loss_gap, std::abs(totals[s * per + i] - totals[i]));
        }
      }
      for (std::size_t s = 1; s < 3; ++s) {
        for (const auto& [name, g0] : grads[0]) {
          if (g0.size() == 0) continue;
          grad_gap = std::max(grad_gap, (grads[s].at(name) - g0).cwiseAbs().maxCoeff());
        }
      }
    }
  }
  return {loss_gap <= 1e-12, "max loss difference across N_g in {1, 2, 4} = " + sci(loss_gap) +
                                 " (gradients " + sci(grad_gap) + ")"};
}

Outcome a4() {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<Index> size(1, 10000), kk(1, 50), dimd(2, 64);
  std::uniform_real_distribution<double> wc(0.0, 1.0);
  int mismatches = 0, queries = 0, ties = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const Index n = size(rng), d = trial % 4 == 0 ? dimd(rng) : 64, k = kk(rng);
    RowMatrix<float> img = random_unit_rows(n, d, rng).cast<float>();
    RowMatrix<float> txt = random_unit_rows(n, d, rng).cast<float>();
    // Duplicates force equal scores.
    for (Index r = 3; r < n; r += 11) {
      img.row(r) = img.row(r - 3);
      txt.row(r) = txt.row(r - 3);
    }
    std::vector<ProductId> ids(static_cast<std::size_t>(n));
    std::iota(ids.begin(), ids.end(), static_cast<ProductId>(trial * 100000));
    std::shuffle(ids.begin(), ids.end(), rng);
    const RetrievalIndex index = build_index(ids, img, txt, std::round(wc(rng) * 20) / 20);
    for (int qn = 0; qn < 3; ++qn) {
      Vector<float> q = qn == 0 ? Vector<float>(index.fused().row(static_cast<Index>(
                                                    rng() % static_cast<std::uint64_t>(n)))
                                                    .transpose())
                                : Vector<float>(random_unit_rows(1, d, rng).row(0).transpose().cast<float>());
      SearchResult brute;
      for (Index r = 0; r < n; ++r) {
        brute.push_back({index.product_ids()[static_cast<std::size_t>(r)],
                         score(index.fused().row(r).data(), q.data(), d)});
      }
      std::sort(brute.begin(), brute.end(), [](const Hit& a, const Hit& b) {
        return a.score != b.score ? a.score > b.score : a.product_id < b.product_id;
      });
      brute.resize(static_cast<std::size_t>(std::min(n, k)));
      for (std::size_t i = 1; i < brute.size(); ++i) ties += brute[i].score == brute[i - 1].score;
      mismatches += search(index, q, k) != brute;
      ++queries;
    }
  }
  return {mismatches == 0, std::to_string(queries) + " queries on 200 indices, " +
                               std::to_string(ties) + " tied neighbours, " +
                               std::to_string(mismatches) + " mismatches"};
}

Outcome a5(Lab& lab) {
  bool pass = true;
  std::string d;
  for (int s = 0; s < lab.seeds; ++s) {
    const double img = lab.best("image_only", s, Task::kImageToImage).recall_at_1;
    const double three = lab.best("three_tower", s, Task::kImageToImage).recall_at_1;
    pass = pass && three - img >= 0.05;
    d += (s ? "; " : "") + std::string("seed ") + std::to_string(s) + " " + fmt(img) + " -> " +
         fmt(three) + " (+" + fmt(three - img, 3) + ")";
  }
  return {pass, "image_to_image r@1 " + d};
}

Outcome a6(Lab& lab) {
  bool pass = true;
  std::string d;
  for (int s = 0; s < lab.seeds; ++s) {
    const double i2i = lab.best("three_tower", s, Task::kImageToImage).recall_at_1;
    const double i2m = lab.best("three_tower", s, Task::kImageToMultimodal).recall_at_1;
    pass = pass && i2m - i2i >= 0.02;
    d += (s ? "; " : "") + std::string("seed ") + std::to_string(s) + " " + fmt(i2i) + " -> " +
         fmt(i2m) + " (+" + fmt(i2m - i2i, 3) + ")";
  }
  return {pass, "3-tower r@1 image_to_image -> image_to_multimodal " + d};
}

Outcome a7(Lab& lab) {
  bool gain = true;
  int ft_wins = 0;
  std::string d;
  for (int s = 0; s < lab.seeds; ++s) {
    const double three = lab.best("three_tower", s, Task::kMultimodal).recall_at_1;
    const double four = lab.best("four_tower", s, Task::kMultimodal).recall_at_1;
    const double ft = lab.best("finetune", s, Task::kMultimodal).recall_at_1;
    gain = gain && four - three >= 0.03;
    ft_wins += ft >= four;
    d += (s ? "; " : "") + std::string("seed ") + std::to_string(s) + " 3T " + fmt(three) +
         " 4T " + fmt(four) + " FT " + fmt(ft);
  }
  return {gain && ft_wins >= 2, "multimodal r@1 " + d + "; finetune >= scratch in " +
                                    std::to_string(ft_wins) + "/" + std::to_string(lab.seeds)};
}

Outcome a8(Lab& lab) {
  bool pass = true;
  std::string d;
  for (int s = 0; s < lab.seeds; ++s) {
    const RecallCell b = lab.best("four_tower", s, Task::kMultimodal);
    pass = pass && b.weights.w_q > 0.0 && b.weights.w_q < 1.0;
    d += (s ? ", " : "") + fmt(b.weights.w_q, 3);
  }
  return {pass, "best w_q per seed (w_c 0.5): " + d};
}

Outcome a9(Lab& lab) {
  std::vector<std::string> train_steps;
  if (lab.steps > 0) train_steps = {"--steps", std::to_string(lab.steps)};
  std::ostringstream sink;
  std::vector<fs::path> runs = {lab.work / "pipeline_a", lab.work / "pipeline_b"};
  for (const fs::path& r : runs) {
    fs::remove_all(r);
    std::vector<std::vector<std::string>> cmds = {
        {"gen-data", "--seed", "11", "--out", (r / "corpus").string()},
        {"train", "--seed", "11", "--mode", "four_tower", "--corpus", (r / "corpus").string(),
         "--out", (r / "model").string()},
        {"eval", "--checkpoint", (r / "model" / "model.mimc").string(), "--corpus",
         (r / "corpus").string(), "--task", "multimodal", "--out", (r / "report.json").string()}};
    cmds[1].insert(cmds[1].end(), train_steps.begin(), train_steps.end());
    for (const auto& c : cmds) {
      const int code = run(c, sink, sink);
      if (code != 0) return {false, c.front() + " exited " + std::to_string(code)};
    }
  }
  const bool ckpt = slurp(runs[0] / "model" / "model.mimc") == slurp(runs[1] / "model" / "model.mimc");
  const bool report = slurp(runs[0] / "report.json") == slurp(runs[1] / "report.json");
  bool corpus = true;
  for (const auto& e : fs::directory_iterator(runs[0] / "corpus")) {
    corpus = corpus && slurp(e.path()) == slurp(runs[1] / "corpus" / e.path().filename());
  }
  return {ckpt && report && corpus,
          std::string("corpus ") + (corpus ? "identical" : "differs") + ", checkpoint " +
              (ckpt ? "identical" : "differs") + ", report " + (report ? "identical" : "differs")};
}

Outcome a10(Lab& lab) {
  const fs::path dir = lab.work / "service";
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_corpus(lab.corpus(0), dir / "corpus");
  save_checkpoint(lab.model("four_tower", 0), dir / "model.mimc");
  std::ostringstream sink;
  if (run({"export-embeddings", "--checkpoint", (dir / "model.mimc").string(), "--corpus",
           (dir / "corpus").string(), "--out", (dir / "emb").string()},
          sink, sink) != 0 ||
      run({"build-index", "--embeddings", (dir / "emb").string(), "--out",
           (dir / "index.mimx").string()},
          sink, sink) != 0) {
    return {false, "artifact build failed: " + sink.str()};
  }

  ServiceConfig sc;
  sc.checkpoint = dir / "model.mimc";
  sc.corpus_dir = dir / "corpus";
  sc.index_path = dir / "index.mimx";
  SearchService service(load_snapshot(sc), sc);
  HttpServer server(service);
  const int port = server.bind("127.0.0.1", 0);
  std::thread loop([&] { server.serve(); });

  // The library side loads the same files on its own.
  const TowerParams model = load_checkpoint(sc.checkpoint);
  const Corpus corpus = read_corpus(sc.corpus_dir);
  const RetrievalIndex index = load_index(sc.index_path);
  const TokenScheme scheme(corpus.config);

  httplib::Client client("127.0.0.1", port);
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<Index> kk(1, 50);
  int bad = 0, hits = 0;
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const QueryRecord& q = corpus.queries[rng() % corpus.queries.size()];
    json req;
    const Vector<double> x =
        Eigen::Map<const Eigen::VectorXf>(q.query_image.data(),
                                          static_cast<Index>(q.query_image.size()))
            .cast<double>();
    if (i % 4 == 3) {
      req["query_image_features"] = q.query_image;
    } else {
      req["query_image_id"] = q.query_id;
    }
    TokenSeq text;
    switch (i % 3) {
      case 0: break;
      case 1:
        text = q.query_text;
        req["query_text"] = text;
        break;
      default: {
        const std::string words = scheme.decode(corpus.queries[rng() % corpus.queries.size()].query_text);
        text = scheme.encode(words);
        req["query_text"] = words;
      }
    }
    const double w_q = unit(rng);
    req["w_q"] = w_q;
    const Index k = kk(rng);
    req["k"] = k;

    Vector<float> v = encode_image(model, x, ImageRole::kQuery);
    if (!text.empty()) v = fuse(v, encode_text(model, text, TextRole::kQuery), w_q);
    const SearchResult lib = search(index, v, k);

    auto res = client.Post("/search", req.dump(), "application/json");
    if (!res || res->status != 200) {
      ++bad;
      continue;
    }
    const json got = json::parse(res->body)["results"];
    bool same = got.size() == lib.size();
    for (std::size_t j = 0; same && j < lib.size(); ++j) {
      const double diff = std::abs(got[j]["score"].get<double>() - lib[j].score);
      worst = std::max(worst, diff);
      same = got[j]["product_id"].get<ProductId>() == lib[j].product_id && diff <= 1e-6;
      hits += same;
    }
    bad += !same;
  }
  server.stop();
  loop.join();
  return {bad == 0, "100 requests, " + std::to_string(bad) + " mismatched, " +
                        std::to_string(hits) + " hits compared, max score difference " +
                        sci(worst)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string only;
  std::string work = (fs::temp_directory_path() / "mim_acceptance").string();
  Lab lab;
  app.add_option("--only", only, "Comma-separated ids, e.g. A1,A4");
  app.add_option("--work-dir", work, "Scratch directory");
  app.add_option("--steps", lab.steps, "Training steps per model (0 keeps the default)");
  CLI11_PARSE(app, argc, argv);
  lab.work = work;
  fs::create_directories(lab.work);

  std::set<std::string> want;
  std::stringstream ss(only);
  for (std::string id; std::getline(ss, id, ',');) want.insert(id);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> checks = {
      {"A1", a1},
      {"A2", a2},
      {"A3", a3},
      {"A4", a4},
      {"A5", [&] { return a5(lab); }},
      {"A6", [&] { return a6(lab); }},
      {"A7", [&] { return a7(lab); }},
      {"A8", [&] { return a8(lab); }},
      {"A9", [&] { return a9(lab); }},
      {"A10", [&] { return a10(lab); }},
  };
  int failed = 0;
  for (const auto& [id, fn] : checks) {
    if (!want.empty() && !want.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << id << " " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << "  [" << fmt(secs, 3)
              << " s]" << std::endl;
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
