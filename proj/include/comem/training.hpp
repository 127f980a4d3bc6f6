#ifndef COMEM_TRAINING_HPP
#define COMEM_TRAINING_HPP

#include "comem/harness.hpp"
#include "comem/lora.hpp"
#include "comem/pipeline.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace comem {

// Expands shorthand targets ("wq","wk","wv","wo") across all blocks, or
// accepts fully qualified weight names. Adapters start as the identity
// delta (B = 0); the base weight stays frozen on the adapted path.
LoraSet attach_lora(const Backbone& model, const std::vector<std::string>& targets, int rank,
                    double alpha, std::uint64_t seed);

struct TrainableFraction {
  long trainable = 0;
  long encoder_scope_total = 0;  // one backbone + compressor + adapters
  long deployment_total = 0;     // encoder and inference copies + compressor + adapters

  double encoder_scope() const {
    return encoder_scope_total ? static_cast<double>(trainable) / encoder_scope_total : 0.0;
  }
  double deployment() const {
    return deployment_total ? static_cast<double>(trainable) / deployment_total : 0.0;
  }
};

// Exact integer parameter accounting over backbone, compressor and adapters.
TrainableFraction trainable_fraction(const Backbone& model, const QFormer* qformer,
                                     const LoraSet* lora);

class Adam {
 public:
  Adam(std::vector<ParamGroup*> params, double lr, double beta1, double beta2, double eps);

  // Applies one update from the accumulated gradients scaled by grad_scale
  // (typically 1/batch), then zeroes them. Frozen groups are skipped.
  void step(double grad_scale);

 private:
  std::vector<ParamGroup*> params_;
  std::vector<Matrix> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

struct TrainingSample {
  std::int64_t qa_id = -1;
  ImageGrid query_image;
  TokenSeq question;
  std::vector<std::int64_t> retrieved_ids;  // descending retrieval score
  TokenId answer_token = 0;
  int language = 0;
};

struct TrainCurve {
  std::vector<double> losses;  // one entry per optimizer step
};

// Cross-entropy on the answer and end tokens of a teacher-forced prompt.
// Returns the loss; with accumulate=true also backpropagates through the
// inference pass, the compressor and the adapted encoder pass.
double comem_example_loss(const Backbone& encoder, const LoraSet* lora, const QFormer& qformer,
                          const Backbone& inference, bool inference_text_only, const World& world,
                          const Dataset& dataset, const TrainingSample& sample);
double comem_example_step(Backbone& encoder, LoraSet* lora, QFormer& qformer,
                          Backbone& inference, bool inference_text_only, const World& world,
                          const Dataset& dataset, const TrainingSample& sample);

struct TrainConfig {
  int epochs = 1;
  int batch_size = 8;
  double lr = 3e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::uint64_t seed = 0;
};

// Trains compressor and adapters; every backbone group must be frozen.
TrainCurve train_memory_encoder(Backbone& encoder, LoraSet& lora, QFormer& qformer,
                                Backbone& inference, bool inference_text_only, const World& world,
                                const Dataset& dataset, const std::vector<TrainingSample>& samples,
                                const TrainConfig& cfg);

struct PretrainConfig {
  long n_samples = 12000;  // per epoch; prompts are regenerated each epoch
  int epochs = 2;
  int batch_size = 16;
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int k_min = 1, k_max = 4;
  double multilingual_fraction = 0.3;
  bool text_only = false;
  std::uint64_t seed = 7;
};

// Full-parameter training on concatenation-style prompts drawn from the
// train split; produces the frozen competence that retrieval-augmented
// prompting and memory reading both rely on.
TrainCurve pretrain_backbone(Backbone& model, const World& world, const Dataset& dataset,
                             const ImageEmbedder& embedder, const VectorIndex& index,
                             const PretrainConfig& cfg);

struct SynthesisConfig {
  int k = 3;
  int multilingual_base = 200;  // retained samples to permute into each language
  std::uint64_t seed = 0;
};

struct SynthesisResult {
  std::vector<TrainingSample> samples;
  long probes = 0;
  long retained_base = 0;
  long multilingual_candidates = 0;
  long retained_multilingual = 0;

  double retention_fraction() const {
    return probes ? static_cast<double>(retained_base) / probes : 0.0;
  }
};

// Runs the frozen teacher in concatenation mode over the train split and
// keeps only the samples it answers correctly; a slice of those is then
// re-verified under each permuted vocabulary.
SynthesisResult synthesize_dataset(const Backbone& teacher, const World& world,
                                   const Dataset& dataset, const ImageEmbedder& embedder,
                                   const VectorIndex& index, const SynthesisConfig& cfg);

void save_training_samples(const std::string& path, const SynthesisResult& result);
SynthesisResult load_training_samples(const std::string& path, const Dataset& dataset);

void save_memory_encoder(const std::string& path, const QFormer& qformer, const LoraSet& lora);
struct MemoryEncoder {
  QFormer qformer;
  LoraSet lora;
};
MemoryEncoder load_memory_encoder(const std::string& path, const Backbone& model);

void save_loss_curve_csv(const std::string& path, const TrainCurve& curve);

}  // namespace comem

#endif  // COMEM_TRAINING_HPP
