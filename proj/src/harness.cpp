#include "comem/harness.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

namespace comem {

bool exact_match(const TokenSeq& predicted, const TokenSeq& gold, const VocabLayout& vocab) {
  auto strip = [&](const TokenSeq& s) {
    TokenSeq out;
    for (TokenId t : s)
      if (t != vocab.pad && t != vocab.end) out.push_back(t);
    return out;
  };
  return strip(predicted) == strip(gold);
}

const char* method_name(Method m) {
  switch (m) {
    case Method::kNone: return "none";
    case Method::kRag: return "rag";
    case Method::kFastv: return "fastv";
    case Method::kVlmMem: return "vlm_mem";
    case Method::kVlmMemAttn: return "vlm_mem_attn";
    case Method::kComem: return "comem";
  }
  return "?";
}

Method method_from_name(const std::string& name) {
  if (name == "none") return Method::kNone;
  if (name == "rag") return Method::kRag;
  if (name == "fastv") return Method::kFastv;
  if (name == "vlm_mem") return Method::kVlmMem;
  if (name == "vlm_mem_attn") return Method::kVlmMemAttn;
  if (name == "comem") return Method::kComem;
  throw InvalidInput("unknown method '" + name + "'");
}

int eval_threads() {
  if (const char* env = std::getenv("COMEM_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return 2;
}

namespace {

InstanceRecord eval_instance(const Backbone& model, const LoraSet* lora, const QFormer* qformer,
                             const World& world, const Dataset& dataset,
                             const ImageEmbedder& embedder, const VectorIndex& index,
                             const EvalConfig& cfg, const QAInstance& qa) {
  InstanceRecord rec;
  rec.qa_id = qa.id;
  rec.split = split_name(qa.split);
  rec.gold = qa.answer_token;

  const bool needs_retrieval = cfg.method != Method::kNone;
  if (needs_retrieval) {
    auto r = retrieve(index, embedder, qa.query_image, cfg.k);
    rec.retrieved_ids = r.ids;
  }

  EmbeddingSequence query =
      embed_query(model, &qa.query_image, qa.question, cfg.text_only);
  const long budget = model.config.max_context - cfg.max_new_tokens;

  EmbeddingSequence prompt;
  LayerwiseMemory layer_mem;
  const LayerwiseMemory* injected = nullptr;
  switch (cfg.method) {
    case Method::kNone:
      prompt = query;
      break;
    case Method::kRag: {
      auto p = build_rag_prompt(model, world, dataset, rec.retrieved_ids, qa.language, query,
                                budget, cfg.text_only);
      prompt = std::move(p.seq);
      rec.truncated_items = p.truncated_items;
      break;
    }
    case Method::kFastv: {
      auto p = build_fastv_prompt(model, world, dataset, rec.retrieved_ids, qa.language, query,
                                  budget, cfg.fastv_keep);
      prompt = std::move(p.seq);
      rec.truncated_items = p.truncated_items;
      break;
    }
    case Method::kVlmMem:
    case Method::kVlmMemAttn: {
      const double keep = cfg.method == Method::kVlmMemAttn ? cfg.attn_keep : 1.0;
      layer_mem = build_layerwise_memory(model, world, dataset, rec.retrieved_ids, qa.language,
                                         cfg.band, keep);
      injected = &layer_mem;
      prompt = query;
      break;
    }
    case Method::kComem: {
      auto memories = compress_items(model, lora, *qformer, world, dataset, rec.retrieved_ids,
                                     qa.language);
      prompt = build_comem_prompt(memories, query, static_cast<int>(budget));
      break;
    }
  }

  rec.context_length = prompt.length();
  rec.predicted = model.decode_answer(prompt, cfg.max_new_tokens, world.vocab.end, injected);
  rec.correct = exact_match(rec.predicted, {qa.answer_token}, world.vocab);
  return rec;
}

}  // namespace

EvalReport evaluate(const Backbone& model, const LoraSet* lora, const QFormer* qformer,
                    const World& world, const Dataset& dataset, const ImageEmbedder& embedder,
                    const VectorIndex& index, const EvalConfig& cfg) {
  if (cfg.method == Method::kComem && qformer == nullptr)
    throw InvalidInput("evaluate: continuous-memory method needs a trained compressor checkpoint");
  if (cfg.k < 1) throw InvalidInput("evaluate: k must be >= 1");

  std::vector<const QAInstance*> pool;
  for (Split s : {Split::kUnseenQuestion, Split::kUnseenEntity}) {
    auto split = dataset.split(s);
    const std::size_t limit = cfg.limit_per_split > 0
                                  ? std::min<std::size_t>(split.size(),
                                                          static_cast<std::size_t>(cfg.limit_per_split))
                                  : split.size();
    pool.insert(pool.end(), split.begin(), split.begin() + static_cast<long>(limit));
  }

  std::vector<InstanceRecord> records(pool.size());
  const int n_threads = std::max(1, std::min<int>(eval_threads(), static_cast<int>(pool.size())));
  if (n_threads <= 1) {
    for (std::size_t i = 0; i < pool.size(); ++i)
      records[i] = eval_instance(model, lora, qformer, world, dataset, embedder, index, cfg,
                                 *pool[i]);
  } else {
    std::vector<std::thread> workers;
    std::atomic<std::size_t> next{0};
    for (int t = 0; t < n_threads; ++t) {
      workers.emplace_back([&]() {
        for (;;) {
          const std::size_t i = next.fetch_add(1);
          if (i >= pool.size()) return;
          records[i] = eval_instance(model, lora, qformer, world, dataset, embedder, index, cfg,
                                     *pool[i]);
        }
      });
    }
    for (auto& w : workers) w.join();
  }

  EvalReport report;
  report.method = method_name(cfg.method);
  report.k = cfg.k;
  report.seed = cfg.seed;
  report.config_digest = cfg.config_digest;
  report.n_instances = static_cast<long>(records.size());

  long correct_q = 0, correct_e = 0, total_context = 0;
  for (const auto& rec : records) {
    total_context += rec.context_length;
    report.truncation_total += rec.truncated_items;
    if (rec.split == split_name(Split::kUnseenQuestion)) {
      ++report.n_unseen_question;
      correct_q += rec.correct ? 1 : 0;
    } else {
      ++report.n_unseen_entity;
      correct_e += rec.correct ? 1 : 0;
    }
  }
  report.acc_unseen_question =
      report.n_unseen_question ? static_cast<double>(correct_q) / report.n_unseen_question : 0.0;
  report.acc_unseen_entity =
      report.n_unseen_entity ? static_cast<double>(correct_e) / report.n_unseen_entity : 0.0;
  report.acc_all = report.n_instances
                       ? static_cast<double>(correct_q + correct_e) / report.n_instances
                       : 0.0;
  report.mean_context_length =
      report.n_instances ? static_cast<double>(total_context) / report.n_instances : 0.0;
  report.per_instance = std::move(records);
  return report;
}

std::vector<SweepCurve> long_context_sweep(const Backbone& model, const LoraSet* lora,
                                           const QFormer* qformer, const World& world,
                                           const Dataset& dataset, const ImageEmbedder& embedder,
                                           const VectorIndex& index,
                                           const std::vector<Method>& methods,
                                           const std::vector<int>& k_grid,
                                           const EvalConfig& base_cfg) {
  for (std::size_t i = 1; i < k_grid.size(); ++i)
    if (k_grid[i] <= k_grid[i - 1]) throw InvalidInput("sweep grid must be strictly increasing");

  std::vector<SweepCurve> curves;
  for (Method m : methods) {
    SweepCurve curve;
    curve.swept = "k";
    curve.method = method_name(m);
    for (int k : k_grid) {
      EvalConfig cfg = base_cfg;
      cfg.method = m;
      cfg.k = k;
      EvalReport r = evaluate(model, lora, qformer, world, dataset, embedder, index, cfg);
      SweepPoint p;
      p.value = k;
      p.acc_unseen_question = r.acc_unseen_question;
      p.acc_unseen_entity = r.acc_unseen_entity;
      p.acc_all = r.acc_all;
      p.mean_context_length = r.mean_context_length;
      p.truncation_total = r.truncation_total;
      curve.points.push_back(p);
    }
    curves.push_back(std::move(curve));
  }
  return curves;
}

namespace {
using json = nlohmann::ordered_json;

json record_to_json(const InstanceRecord& r) {
  return json{{"qa_id", r.qa_id},
              {"split", r.split},
              {"retrieved_ids", r.retrieved_ids},
              {"context_length", r.context_length},
              {"truncated_items", r.truncated_items},
              {"predicted", r.predicted},
              {"gold", r.gold},
              {"correct", r.correct}};
}

InstanceRecord record_from_json(const json& j) {
  InstanceRecord r;
  r.qa_id = j.at("qa_id").get<std::int64_t>();
  r.split = j.at("split").get<std::string>();
  r.retrieved_ids = j.at("retrieved_ids").get<std::vector<std::int64_t>>();
  r.context_length = j.at("context_length").get<long>();
  r.truncated_items = j.at("truncated_items").get<long>();
  r.predicted = j.at("predicted").get<TokenSeq>();
  r.gold = j.at("gold").get<TokenId>();
  r.correct = j.at("correct").get<bool>();
  return r;
}

}  // namespace

std::string eval_report_to_json(const EvalReport& r) {
  json j;
  j["method"] = r.method;
  j["k"] = r.k;
  j["seed"] = r.seed;
  j["config_digest"] = r.config_digest;
  j["n_instances"] = r.n_instances;
  j["n_unseen_question"] = r.n_unseen_question;
  j["n_unseen_entity"] = r.n_unseen_entity;
  j["acc_unseen_question"] = r.acc_unseen_question;
  j["acc_unseen_entity"] = r.acc_unseen_entity;
  j["acc_all"] = r.acc_all;
  j["mean_context_length"] = r.mean_context_length;
  j["truncation_total"] = r.truncation_total;
  json per = json::array();
  for (const auto& rec : r.per_instance) per.push_back(record_to_json(rec));
  j["per_instance"] = per;
  return j.dump(2) + "\n";
}

EvalReport eval_report_from_json(const std::string& text) {
  const json j = json::parse(text);
  EvalReport r;
  r.method = j.at("method").get<std::string>();
  r.k = j.at("k").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.config_digest = j.at("config_digest").get<std::string>();
  r.n_instances = j.at("n_instances").get<long>();
  r.n_unseen_question = j.at("n_unseen_question").get<long>();
  r.n_unseen_entity = j.at("n_unseen_entity").get<long>();
  r.acc_unseen_question = j.at("acc_unseen_question").get<double>();
  r.acc_unseen_entity = j.at("acc_unseen_entity").get<double>();
  r.acc_all = j.at("acc_all").get<double>();
  r.mean_context_length = j.at("mean_context_length").get<double>();
  r.truncation_total = j.at("truncation_total").get<long>();
  for (const auto& rec : j.at("per_instance")) r.per_instance.push_back(record_from_json(rec));
  return r;
}

void save_eval_report(const std::string& path, const EvalReport& report) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_eval_report: cannot open '" + path + "'");
  os << eval_report_to_json(report);
  if (!os) throw std::runtime_error("save_eval_report: write failed for '" + path + "'");
}

EvalReport load_eval_report(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_eval_report: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return eval_report_from_json(ss.str());
}

namespace {

std::string format_double(double v) {
  std::ostringstream ss;
  ss.precision(10);
  ss << v;
  return ss.str();
}

}  // namespace

std::string sweep_to_csv(const std::vector<SweepCurve>& curves) {
  std::ostringstream ss;
  ss << "method,axis,value,acc_unseen_question,acc_unseen_entity,acc_all,"
        "mean_context_length,truncation_total\n";
  for (const auto& c : curves)
    for (const auto& p : c.points)
      ss << c.method << ',' << c.swept << ',' << format_double(p.value) << ','
         << format_double(p.acc_unseen_question) << ',' << format_double(p.acc_unseen_entity)
         << ',' << format_double(p.acc_all) << ',' << format_double(p.mean_context_length) << ','
         << p.truncation_total << '\n';
  return ss.str();
}

void save_sweep_csv(const std::string& path, const std::vector<SweepCurve>& curves) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_sweep_csv: cannot open '" + path + "'");
  os << sweep_to_csv(curves);
  if (!os) throw std::runtime_error("save_sweep_csv: write failed for '" + path + "'");
}

std::string sweep_to_json(const std::vector<SweepCurve>& curves) {
  json arr = json::array();
  for (const auto& c : curves) {
    json pts = json::array();
    for (const auto& p : c.points)
      pts.push_back({{"value", p.value},
                     {"acc_unseen_question", p.acc_unseen_question},
                     {"acc_unseen_entity", p.acc_unseen_entity},
                     {"acc_all", p.acc_all},
                     {"mean_context_length", p.mean_context_length},
                     {"truncation_total", p.truncation_total}});
    arr.push_back({{"method", c.method}, {"axis", c.swept}, {"points", pts}});
  }
  return arr.dump(2) + "\n";
}

std::vector<SweepCurve> sweep_from_json(const std::string& text) {
  const json arr = json::parse(text);
  std::vector<SweepCurve> curves;
  for (const auto& cj : arr) {
    SweepCurve c;
    c.method = cj.at("method").get<std::string>();
    c.swept = cj.at("axis").get<std::string>();
    for (const auto& pj : cj.at("points")) {
      SweepPoint p;
      p.value = pj.at("value").get<double>();
      p.acc_unseen_question = pj.at("acc_unseen_question").get<double>();
      p.acc_unseen_entity = pj.at("acc_unseen_entity").get<double>();
      p.acc_all = pj.at("acc_all").get<double>();
      p.mean_context_length = pj.at("mean_context_length").get<double>();
      p.truncation_total = pj.at("truncation_total").get<long>();
      c.points.push_back(p);
    }
    curves.push_back(std::move(c));
  }
  return curves;
}

}  // namespace comem
