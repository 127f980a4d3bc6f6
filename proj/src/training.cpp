#include "comem/training.hpp"

#include "comem/tensor_io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace comem {

LoraSet attach_lora(const Backbone& model, const std::vector<std::string>& targets, int rank,
                    double alpha, std::uint64_t seed) {
  const int d = model.config.d_model;
  if (rank < 1 || rank > d)
    throw InvalidInput("attach_lora: rank must lie in [1, d_model]");

  const std::vector<std::string> leaves = {"wq", "wk", "wv", "wo"};
  std::vector<std::string> full_names;
  for (const auto& t : targets) {
    if (std::find(leaves.begin(), leaves.end(), t) != leaves.end()) {
      for (int l = 0; l < model.config.n_layers; ++l)
        full_names.push_back("blocks." + std::to_string(l) + ".attn." + t);
      continue;
    }
    bool known = false;
    for (int l = 0; l < model.config.n_layers && !known; ++l)
      for (const auto& leaf : leaves)
        if (t == "blocks." + std::to_string(l) + ".attn." + leaf) {
          known = true;
          break;
        }
    if (!known) throw InvalidInput("attach_lora: unknown target '" + t + "'");
    full_names.push_back(t);
  }
  std::vector<std::string> unique;
  for (const auto& n : full_names)
    if (std::find(unique.begin(), unique.end(), n) == unique.end()) unique.push_back(n);

  LoraSet set;
  set.config.rank = rank;
  set.config.alpha = alpha;
  set.config.targets = targets;
  for (const auto& name : unique) {
    LoraAdapter ad;
    ad.target = name;
    Rng rng(mix_seed(seed, fnv1a64("lora." + name)));
    ad.a = ParamGroup("lora." + name + ".a", rng.gaussian_matrix(rank, d, 0.05));
    ad.b = ParamGroup("lora." + name + ".b", Matrix::Zero(d, rank));
    ad.scale = alpha / static_cast<double>(rank);
    set.adapters.push_back(std::move(ad));
  }
  return set;
}

TrainableFraction trainable_fraction(const Backbone& model, const QFormer* qformer,
                                     const LoraSet* lora) {
  TrainableFraction f;
  long backbone_total = 0;
  model.visit_params(ConstParamVisitor([&](const ParamGroup& g) {
    backbone_total += g.size();
    if (g.trainable) f.trainable += g.size();
  }));
  long extra_total = 0;
  auto count_extra = [&](const ParamGroup& g) {
    extra_total += g.size();
    if (g.trainable) f.trainable += g.size();
  };
  if (qformer) qformer->visit_params(ConstParamVisitor(count_extra));
  if (lora) lora->visit_params(ConstParamVisitor(count_extra));

  f.encoder_scope_total = backbone_total + extra_total;
  f.deployment_total = 2 * backbone_total + extra_total;
  return f;
}

Adam::Adam(std::vector<ParamGroup*> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const ParamGroup* p : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::step(double grad_scale) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ParamGroup& p = *params_[i];
    if (!p.trainable) continue;
    Matrix g = p.grad * grad_scale;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
    p.value.array() -=
        lr_ * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps_);
    p.zero_grad();
  }
}

namespace {

// Teacher-forced sequence: prompt rows followed by [answer, end] token rows
// embedded with the inference model's vocabulary.
struct SupervisedPrompt {
  EmbeddingSequence full;
  std::vector<long> loss_rows;
  std::vector<int> targets;
};

SupervisedPrompt with_answer(const Backbone& inference, const EmbeddingSequence& prompt,
                             TokenId answer, TokenId end) {
  SupervisedPrompt sp;
  EmbeddingSequence ans = inference.embed_multimodal(nullptr, {answer, end});
  sp.full = concat_sequences(prompt, ans);
  const long p = prompt.length();
  sp.loss_rows = {p - 1, p};
  sp.targets = {answer, end};
  return sp;
}

double head_loss_forward(const Backbone& model, const Matrix& h_final,
                         const std::vector<long>& rows, const std::vector<int>& targets) {
  Matrix h_sel(static_cast<long>(rows.size()), h_final.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    h_sel.row(static_cast<long>(i)) = h_final.row(rows[i]);
  Matrix logits = model.logits_from_hidden(h_sel);
  return nn::cross_entropy(logits, targets).loss;
}

// Also accumulates head/final-norm gradients and scatters d(hidden) rows.
double head_loss_backward(Backbone& model, const Matrix& h_final, const std::vector<long>& rows,
                          const std::vector<int>& targets, Matrix& d_hidden) {
  Matrix h_sel(static_cast<long>(rows.size()), h_final.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    h_sel.row(static_cast<long>(i)) = h_final.row(rows[i]);
  Matrix normed = nn::layer_norm(h_sel, model.lnf_gamma.value, model.lnf_beta.value);
  Matrix logits = normed * model.lm_head.value;
  auto ce = nn::cross_entropy(logits, targets);
  model.lm_head.accumulate(normed.transpose() * ce.d_logits);
  Matrix d_normed = ce.d_logits * model.lm_head.value.transpose();
  Matrix d_sel = nn::layer_norm_backward(d_normed, h_sel, model.lnf_gamma.value,
                                         &model.lnf_gamma, &model.lnf_beta);
  for (std::size_t i = 0; i < rows.size(); ++i)
    d_hidden.row(rows[i]) += d_sel.row(static_cast<long>(i));
  return ce.loss;
}

long resolve_source_layer(const QFormerConfig& cfg, int n_layers) {
  long idx = cfg.source_layer < 0 ? n_layers + cfg.source_layer : cfg.source_layer;
  if (idx < 0 || idx >= n_layers)
    throw InvalidInput("qformer source layer out of range");
  return idx;
}

}  // namespace

double comem_example_loss(const Backbone& encoder, const LoraSet* lora, const QFormer& qformer,
                          const Backbone& inference, bool inference_text_only, const World& world,
                          const Dataset& dataset, const TrainingSample& sample) {
  auto memories = compress_items(encoder, lora, qformer, world, dataset, sample.retrieved_ids,
                                 sample.language);
  EmbeddingSequence query =
      embed_query(inference, &sample.query_image, sample.question, inference_text_only);
  EmbeddingSequence prompt =
      build_comem_prompt(memories, query, inference.config.max_context - 2);
  auto sp = with_answer(inference, prompt, sample.answer_token, world.vocab.end);

  Backbone::EncodeOptions opt;
  opt.causal = true;
  opt.want_traces = false;
  EncoderStates st = inference.encode(sp.full, opt);
  return head_loss_forward(inference, st.per_layer_hidden.back(), sp.loss_rows, sp.targets);
}

double comem_example_step(Backbone& encoder, LoraSet* lora, QFormer& qformer,
                          Backbone& inference, bool inference_text_only, const World& world,
                          const Dataset& dataset, const TrainingSample& sample) {
  if (encoder.config.d_model != inference.config.d_model)
    throw InvalidInput("memory encoder and inference model must share d_model");
  const long source_layer = resolve_source_layer(qformer.config, encoder.config.n_layers);
  if (source_layer != encoder.config.n_layers - 1)
    throw InvalidInput("training requires the final encoder layer as compressor source");

  // Encode and compress each retrieved item, keeping caches for backward.
  const std::size_t n_items = sample.retrieved_ids.size();
  std::vector<EmbeddingSequence> item_seqs(n_items);
  std::vector<ForwardCache> item_caches(n_items);
  std::vector<Matrix> item_sources(n_items);
  std::vector<QFormerCache> q_caches(n_items);
  std::vector<MemoryVectors> memories(n_items);

  Backbone::EncodeOptions enc_opt;
  enc_opt.causal = false;
  enc_opt.want_traces = false;
  enc_opt.lora = lora;
  for (std::size_t i = 0; i < n_items; ++i) {
    const auto& item = dataset.item_by_id(sample.retrieved_ids[i]);
    item_seqs[i] = embed_item(encoder, world, item, sample.language, false);
    EncoderStates st = encoder.encode(item_seqs[i], enc_opt, &item_caches[i]);
    item_sources[i] = st.per_layer_hidden.back();
    memories[i].source_item_id = item.id;
    memories[i].vectors = qformer.compress_source(item_sources[i], &q_caches[i]);
  }

  EmbeddingSequence query =
      embed_query(inference, &sample.query_image, sample.question, inference_text_only);
  EmbeddingSequence prompt =
      build_comem_prompt(memories, query, inference.config.max_context - 2);
  auto sp = with_answer(inference, prompt, sample.answer_token, world.vocab.end);

  Backbone::EncodeOptions inf_opt;
  inf_opt.causal = true;
  inf_opt.want_traces = false;
  ForwardCache inf_cache;
  EncoderStates st = inference.encode(sp.full, inf_opt, &inf_cache);

  Matrix d_hidden = Matrix::Zero(sp.full.length(), inference.config.d_model);
  const double loss = head_loss_backward(inference, st.per_layer_hidden.back(), sp.loss_rows,
                                         sp.targets, d_hidden);

  Matrix d_content =
      inference.backward_from_hidden(inf_cache, sp.full, d_hidden, nullptr, true);

  // Route memory-row gradients back through the compressor and the adapted
  // encoder pass of each item.
  const long k = qformer.config.k;
  for (std::size_t i = 0; i < n_items; ++i) {
    Matrix d_memory = d_content.middleRows(static_cast<long>(i) * k, k);
    Matrix d_source;
    qformer.backward(q_caches[i], item_sources[i], d_memory, &d_source);
    encoder.backward_from_hidden(item_caches[i], item_seqs[i], d_source, lora, false);
  }
  return loss;
}

TrainCurve train_memory_encoder(Backbone& encoder, LoraSet& lora, QFormer& qformer,
                                Backbone& inference, bool inference_text_only, const World& world,
                                const Dataset& dataset, const std::vector<TrainingSample>& samples,
                                const TrainConfig& cfg) {
  if (samples.empty()) throw InvalidInput("train_memory_encoder: empty dataset");
  encoder.visit_params(ConstParamVisitor([](const ParamGroup& g) {
    if (g.trainable)
      throw InvalidInput("train_memory_encoder: encoder base weights must be frozen, found '" +
                         g.name + "' trainable");
  }));
  inference.visit_params(ConstParamVisitor([](const ParamGroup& g) {
    if (g.trainable)
      throw InvalidInput("train_memory_encoder: inference model must stay frozen, found '" +
                         g.name + "' trainable");
  }));

  std::vector<ParamGroup*> trainables;
  qformer.visit_params([&](ParamGroup& g) { trainables.push_back(&g); });
  lora.visit_params(ParamVisitor([&](ParamGroup& g) { trainables.push_back(&g); }));
  Adam opt(trainables, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);

  TrainCurve curve;
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0u);
  long step_index = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(cfg.seed, fnv1a64("epoch"), static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    std::size_t i = 0;
    while (i < order.size()) {
      const std::size_t batch_begin = i;
      const std::size_t batch_end =
          std::min(order.size(), i + static_cast<std::size_t>(cfg.batch_size));
      double batch_loss = 0.0;
      for (; i < batch_end; ++i)
        batch_loss += comem_example_step(encoder, &lora, qformer, inference, inference_text_only,
                                         world, dataset, samples[order[i]]);
      const double denom = static_cast<double>(batch_end - batch_begin);
      const double mean_loss = batch_loss / denom;
      if (!std::isfinite(mean_loss))
        throw std::runtime_error("train_memory_encoder: non-finite loss at step " +
                                 std::to_string(step_index));
      opt.step(1.0 / denom);
      curve.losses.push_back(mean_loss);
      ++step_index;
    }
  }
  return curve;
}

TrainCurve pretrain_backbone(Backbone& model, const World& world, const Dataset& dataset,
                             const ImageEmbedder& embedder, const VectorIndex& index,
                             const PretrainConfig& cfg) {
  if (cfg.n_samples < 1) throw InvalidInput("pretrain: need at least one sample");
  if (cfg.k_min < 1 || cfg.k_max < cfg.k_min) throw InvalidInput("pretrain: bad k range");
  model.set_trainable(true);
  Adam opt(model.param_groups(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);

  const int train_entities = world.n_train_entities();
  const int n_attr = world.config.n_attributes;
  TrainCurve curve;
  long step_index = 0;

  Backbone::EncodeOptions enc_opt;
  enc_opt.causal = true;
  enc_opt.want_traces = false;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    long done_in_batch = 0;
    double batch_loss = 0.0;
    for (long i = 0; i < cfg.n_samples; ++i) {
      const std::uint64_t stream =
          mix_seed(cfg.seed, fnv1a64("pretrain"),
                   static_cast<std::uint64_t>(epoch) * 0x100000000ULL +
                       static_cast<std::uint64_t>(i));
      Rng rng(stream);

      const int entity = static_cast<int>(rng.next(static_cast<std::uint64_t>(train_entities)));
      int attr = static_cast<int>(rng.next(static_cast<std::uint64_t>(n_attr - 1)));
      if (attr >= world.holdout_attr[static_cast<std::size_t>(entity)]) ++attr;
      const int k = cfg.k_min + static_cast<int>(rng.next(
                                    static_cast<std::uint64_t>(cfg.k_max - cfg.k_min + 1)));
      const int language =
          (world.config.n_languages > 0 && rng.uniform() < cfg.multilingual_fraction)
              ? 1 + static_cast<int>(rng.next(static_cast<std::uint64_t>(world.config.n_languages)))
              : 0;

      const ImageGrid query_image =
          render_entity(world, entity, mix_seed(stream, fnv1a64("query_image")));
      TokenSeq question = make_question_tokens(world, attr, mix_seed(stream, fnv1a64("question")));
      TokenId answer = world.vocab.value_token(world.fact(entity, attr));
      if (language > 0) {
        question = permute_tokens(world, question, language);
        answer = permute_tokens(world, {answer}, language)[0];
      }

      auto retrieved = retrieve(index, embedder, query_image, k).ids;
      const std::int64_t supporting =
          static_cast<std::int64_t>(entity) * n_attr + attr;
      if (std::find(retrieved.begin(), retrieved.end(), supporting) == retrieved.end())
        retrieved[static_cast<std::size_t>(rng.next(retrieved.size()))] = supporting;

      EmbeddingSequence query =
          embed_query(model, &query_image, question, cfg.text_only);
      auto prompt = build_rag_prompt(model, world, dataset, retrieved, language, query,
                                     model.config.max_context - 2, cfg.text_only);
      auto sp = with_answer(model, prompt.seq, answer, world.vocab.end);

      ForwardCache cache;
      EncoderStates st = model.encode(sp.full, enc_opt, &cache);
      Matrix d_hidden = Matrix::Zero(sp.full.length(), model.config.d_model);
      batch_loss += head_loss_backward(model, st.per_layer_hidden.back(), sp.loss_rows,
                                       sp.targets, d_hidden);
      model.backward_from_hidden(cache, sp.full, d_hidden, nullptr, false);
      ++done_in_batch;

      if (done_in_batch == cfg.batch_size || i + 1 == cfg.n_samples) {
        const double mean_loss = batch_loss / static_cast<double>(done_in_batch);
        if (!std::isfinite(mean_loss))
          throw std::runtime_error("pretrain: non-finite loss at step " +
                                   std::to_string(step_index));
        opt.step(1.0 / static_cast<double>(done_in_batch));
        curve.losses.push_back(mean_loss);
        ++step_index;
        done_in_batch = 0;
        batch_loss = 0.0;
      }
    }
  }
  return curve;
}

SynthesisResult synthesize_dataset(const Backbone& teacher, const World& world,
                                   const Dataset& dataset, const ImageEmbedder& embedder,
                                   const VectorIndex& index, const SynthesisConfig& cfg) {
  if (cfg.k < 1) throw InvalidInput("synthesize_dataset: k must be >= 1");
  SynthesisResult result;

  auto teacher_correct = [&](const TrainingSample& s) {
    EmbeddingSequence query = embed_query(teacher, &s.query_image, s.question, false);
    auto prompt = build_rag_prompt(teacher, world, dataset, s.retrieved_ids, s.language, query,
                                   teacher.config.max_context - 2, false);
    TokenSeq predicted = teacher.decode_answer(prompt.seq, 2, world.vocab.end);
    return exact_match(predicted, {s.answer_token}, world.vocab);
  };

  for (const auto& qa : dataset.instances) {
    if (qa.split != Split::kTrain) continue;
    ++result.probes;
    TrainingSample s;
    s.qa_id = qa.id;
    s.query_image = qa.query_image;
    s.question = qa.question;
    s.answer_token = qa.answer_token;
    s.language = 0;
    s.retrieved_ids = retrieve(index, embedder, qa.query_image, cfg.k).ids;
    if (teacher_correct(s)) {
      result.samples.push_back(std::move(s));
      ++result.retained_base;
    }
  }

  // Vocabulary-permuted variants of a retained slice, re-verified so every
  // emitted sample stays teacher-correct.
  const long base = std::min<long>(cfg.multilingual_base, result.retained_base);
  std::vector<std::size_t> pick(static_cast<std::size_t>(result.retained_base));
  std::iota(pick.begin(), pick.end(), 0u);
  Rng ml_rng(mix_seed(cfg.seed, fnv1a64("multilingual_pick")));
  ml_rng.shuffle(pick);
  pick.resize(static_cast<std::size_t>(base));
  std::sort(pick.begin(), pick.end());

  std::vector<TrainingSample> multilingual;
  for (std::size_t idx : pick) {
    const TrainingSample& s0 = result.samples[idx];
    for (int lang = 1; lang <= world.config.n_languages; ++lang) {
      ++result.multilingual_candidates;
      TrainingSample s = s0;
      s.language = lang;
      s.question = permute_tokens(world, s0.question, lang);
      s.answer_token = permute_tokens(world, {s0.answer_token}, lang)[0];
      if (teacher_correct(s)) {
        multilingual.push_back(std::move(s));
        ++result.retained_multilingual;
      }
    }
  }
  result.samples.insert(result.samples.end(), multilingual.begin(), multilingual.end());
  return result;
}

namespace {
using json = nlohmann::ordered_json;
}

void save_training_samples(const std::string& path, const SynthesisResult& result) {
  json j;
  j["kind"] = "training_samples";
  j["probes"] = result.probes;
  j["retained_base"] = result.retained_base;
  j["multilingual_candidates"] = result.multilingual_candidates;
  j["retained_multilingual"] = result.retained_multilingual;
  json samples = json::array();
  for (const auto& s : result.samples)
    samples.push_back({{"qa_id", s.qa_id},
                       {"question", s.question},
                       {"retrieved_ids", s.retrieved_ids},
                       {"answer", s.answer_token},
                       {"language", s.language}});
  j["samples"] = samples;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_training_samples: cannot open '" + path + "'");
  os << j.dump(2) << '\n';
  if (!os) throw std::runtime_error("save_training_samples: write failed for '" + path + "'");
}

SynthesisResult load_training_samples(const std::string& path, const Dataset& dataset) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_training_samples: cannot open '" + path + "'");
  json j;
  is >> j;
  if (j.at("kind").get<std::string>() != "training_samples")
    throw std::runtime_error("load_training_samples: wrong file kind");
  SynthesisResult result;
  result.probes = j.at("probes").get<long>();
  result.retained_base = j.at("retained_base").get<long>();
  result.multilingual_candidates = j.at("multilingual_candidates").get<long>();
  result.retained_multilingual = j.at("retained_multilingual").get<long>();
  for (const auto& sj : j.at("samples")) {
    TrainingSample s;
    s.qa_id = sj.at("qa_id").get<std::int64_t>();
    s.question = sj.at("question").get<TokenSeq>();
    s.retrieved_ids = sj.at("retrieved_ids").get<std::vector<std::int64_t>>();
    s.answer_token = sj.at("answer").get<TokenId>();
    s.language = sj.at("language").get<int>();
    // Query images live in the world file; resolve through the instance.
    for (const auto& qa : dataset.instances)
      if (qa.id == s.qa_id) {
        s.query_image = qa.query_image;
        break;
      }
    if (s.query_image.pixels.size() == 0)
      throw std::runtime_error("load_training_samples: unknown qa id " +
                               std::to_string(s.qa_id));
    result.samples.push_back(std::move(s));
  }
  return result;
}

void save_memory_encoder(const std::string& path, const QFormer& qformer, const LoraSet& lora) {
  json manifest;
  manifest["kind"] = "memory_encoder";
  manifest["qformer"] = {{"k", qformer.config.k},
                         {"n_layers", qformer.config.n_layers},
                         {"shared", qformer.config.shared},
                         {"d_model", qformer.config.d_model},
                         {"n_heads", qformer.config.n_heads},
                         {"d_ff", qformer.config.d_ff},
                         {"source_layer", qformer.config.source_layer},
                         {"seed", qformer.init_seed}};
  json targets = json::array();
  for (const auto& ad : lora.adapters) targets.push_back(ad.target);
  manifest["lora"] = {{"rank", lora.config.rank},
                      {"alpha", lora.config.alpha},
                      {"targets", targets}};

  std::vector<NamedTensor> tensors;
  qformer.visit_params(ConstParamVisitor(
      [&](const ParamGroup& g) { tensors.push_back({g.name, g.value}); }));
  lora.visit_params(ConstParamVisitor(
      [&](const ParamGroup& g) { tensors.push_back({g.name, g.value}); }));

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_memory_encoder: cannot open '" + path + "'");
  write_json_block(os, manifest.dump());
  write_tensor_container(os, tensors);
  if (!os) throw std::runtime_error("save_memory_encoder: write failed for '" + path + "'");
}

MemoryEncoder load_memory_encoder(const std::string& path, const Backbone& model) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_memory_encoder: cannot open '" + path + "'");
  const json manifest = json::parse(read_json_block(is));
  if (manifest.at("kind").get<std::string>() != "memory_encoder")
    throw std::runtime_error("load_memory_encoder: wrong file kind");

  const auto& qj = manifest.at("qformer");
  QFormerConfig qcfg;
  qcfg.k = qj.at("k").get<int>();
  qcfg.n_layers = qj.at("n_layers").get<int>();
  qcfg.shared = qj.at("shared").get<bool>();
  qcfg.d_model = qj.at("d_model").get<int>();
  qcfg.n_heads = qj.at("n_heads").get<int>();
  qcfg.d_ff = qj.at("d_ff").get<int>();
  qcfg.source_layer = qj.at("source_layer").get<int>();

  MemoryEncoder enc{QFormer::init(qcfg, qj.at("seed").get<std::uint64_t>()),
                    attach_lora(model,
                                manifest.at("lora").at("targets").get<std::vector<std::string>>(),
                                manifest.at("lora").at("rank").get<int>(),
                                manifest.at("lora").at("alpha").get<double>(), 0)};

  auto tensors = read_tensor_container(is);
  std::size_t idx = 0;
  auto assign = [&](ParamGroup& g) {
    if (idx >= tensors.size() || tensors[idx].name != g.name)
      throw std::runtime_error("load_memory_encoder: tensor order mismatch at '" + g.name + "'");
    g.value = tensors[idx].value;
    ++idx;
  };
  enc.qformer.visit_params(assign);
  enc.lora.visit_params(ParamVisitor(assign));
  return enc;
}

void save_loss_curve_csv(const std::string& path, const TrainCurve& curve) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_loss_curve_csv: cannot open '" + path + "'");
  os << "step,loss\n";
  os.precision(12);
  for (std::size_t i = 0; i < curve.losses.size(); ++i)
    os << i << ',' << curve.losses[i] << '\n';
  if (!os) throw std::runtime_error("save_loss_curve_csv: write failed for '" + path + "'");
}

}  // namespace comem
