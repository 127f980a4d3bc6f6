#ifndef COMEM_HARNESS_HPP
#define COMEM_HARNESS_HPP

#include "comem/pipeline.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace comem {

// Token-sequence equality after stripping padding and end-of-answer tokens.
bool exact_match(const TokenSeq& predicted, const TokenSeq& gold, const VocabLayout& vocab);

enum class Method { kNone, kRag, kFastv, kVlmMem, kVlmMemAttn, kComem };

const char* method_name(Method m);
Method method_from_name(const std::string& name);

struct EvalConfig {
  Method method = Method::kNone;
  int k = 10;                     // retrieved items per query
  double fastv_keep = 0.5;        // kept fraction of patch positions
  double attn_keep = 0.25;        // kept fraction for the attention-selected variant
  std::vector<int> band = {2, 3}; // injection layers for layerwise memory
  int max_new_tokens = 2;
  bool text_only = false;         // inference model sees no images
  int limit_per_split = 0;        // 0 = all instances
  std::uint64_t seed = 0;
  std::string config_digest;
};

struct InstanceRecord {
  std::int64_t qa_id = 0;
  std::string split;
  std::vector<std::int64_t> retrieved_ids;
  long context_length = 0;
  long truncated_items = 0;
  TokenSeq predicted;
  TokenId gold = 0;
  bool correct = false;
};

struct EvalReport {
  std::string method;
  int k = 0;
  std::uint64_t seed = 0;
  std::string config_digest;
  long n_instances = 0;
  long n_unseen_question = 0, n_unseen_entity = 0;
  double acc_unseen_question = 0.0, acc_unseen_entity = 0.0, acc_all = 0.0;
  double mean_context_length = 0.0;
  long truncation_total = 0;
  std::vector<InstanceRecord> per_instance;

  bool operator==(const EvalReport&) const = default;
};

// Runs the two unseen splits. The compressor (and optional adapters) are
// required for the continuous-memory method and rejected otherwise absent.
// Evaluation is read-only and parallel over instances; COMEM_THREADS caps
// the worker count.
EvalReport evaluate(const Backbone& model, const LoraSet* lora, const QFormer* qformer,
                    const World& world, const Dataset& dataset, const ImageEmbedder& embedder,
                    const VectorIndex& index, const EvalConfig& cfg);

struct SweepPoint {
  double value = 0.0;
  double acc_unseen_question = 0.0, acc_unseen_entity = 0.0, acc_all = 0.0;
  double mean_context_length = 0.0;
  long truncation_total = 0;
};

struct SweepCurve {
  std::string swept;  // "k" | "data" | "params"
  std::string method;
  std::vector<SweepPoint> points;
};

// One evaluation per (method, k) over the given grid.
std::vector<SweepCurve> long_context_sweep(const Backbone& model, const LoraSet* lora,
                                           const QFormer* qformer, const World& world,
                                           const Dataset& dataset, const ImageEmbedder& embedder,
                                           const VectorIndex& index,
                                           const std::vector<Method>& methods,
                                           const std::vector<int>& k_grid,
                                           const EvalConfig& base_cfg);

std::string eval_report_to_json(const EvalReport& report);
EvalReport eval_report_from_json(const std::string& json_text);
void save_eval_report(const std::string& path, const EvalReport& report);
EvalReport load_eval_report(const std::string& path);

std::string sweep_to_csv(const std::vector<SweepCurve>& curves);
void save_sweep_csv(const std::string& path, const std::vector<SweepCurve>& curves);
std::string sweep_to_json(const std::vector<SweepCurve>& curves);
std::vector<SweepCurve> sweep_from_json(const std::string& json_text);

int eval_threads();  // from COMEM_THREADS, default 2, min 1

}  // namespace comem

#endif  // COMEM_HARNESS_HPP
