#include "comem/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace comem {

RagConcat rag_concat(const std::vector<EmbeddingSequence>& items, const EmbeddingSequence& query,
                     long position_budget) {
  if (query.length() > position_budget)
    throw ContextOverflow(query.length(), position_budget);

  long total = query.length();
  std::size_t kept = items.size();
  for (const auto& it : items) total += it.length();
  RagConcat out;
  while (kept > 0 && total > position_budget) {
    total -= items[kept - 1].length();
    --kept;
    ++out.truncated_items;
  }

  EmbeddingSequence seq = EmbeddingSequence::empty(static_cast<int>(query.d_model()));
  for (std::size_t i = 0; i < kept; ++i) seq = concat_sequences(seq, items[i]);
  out.seq = concat_sequences(seq, query);
  return out;
}

std::vector<double> received_attention(const EncoderStates& states) {
  if (states.attention_traces.empty())
    throw InvalidInput("received_attention: no attention traces collected");
  const long n = states.length();
  std::vector<double> score(static_cast<std::size_t>(n), 0.0);
  long count = 0;
  for (const auto& layer : states.attention_traces) {
    for (const auto& head : layer) {
      if (head.cols() != n)
        throw InvalidInput("received_attention: traces do not cover the sequence");
      for (long j = 0; j < n; ++j) score[static_cast<std::size_t>(j)] += head.col(j).sum();
      ++count;
    }
  }
  for (auto& s : score) s /= static_cast<double>(count);
  return score;
}

namespace {

// Top-m indices by score, ties toward the lower index, returned ascending.
std::vector<long> top_indices(const std::vector<double>& scores, long m) {
  std::vector<long> order(scores.size());
  std::iota(order.begin(), order.end(), 0L);
  std::stable_sort(order.begin(), order.end(), [&](long a, long b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  order.resize(static_cast<std::size_t>(std::min<long>(m, static_cast<long>(order.size()))));
  std::sort(order.begin(), order.end());
  return order;
}

EmbeddingSequence gather_rows(const EmbeddingSequence& seq, const std::vector<long>& rows) {
  EmbeddingSequence out;
  out.vectors.resize(static_cast<long>(rows.size()), seq.d_model());
  out.origins.reserve(rows.size());
  out.token_ids.reserve(rows.size());

  std::vector<long> patch_row_of(static_cast<std::size_t>(seq.length()), -1);
  long pr = 0;
  for (long i = 0; i < seq.length(); ++i)
    if (seq.origins[static_cast<std::size_t>(i)] == Origin::kPatch) patch_row_of[static_cast<std::size_t>(i)] = pr++;

  std::vector<long> kept_patches;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const long i = rows[r];
    out.vectors.row(static_cast<long>(r)) = seq.vectors.row(i);
    out.origins.push_back(seq.origins[static_cast<std::size_t>(i)]);
    out.token_ids.push_back(seq.token_ids[static_cast<std::size_t>(i)]);
    if (patch_row_of[static_cast<std::size_t>(i)] >= 0)
      kept_patches.push_back(patch_row_of[static_cast<std::size_t>(i)]);
  }
  out.patch_raw.resize(static_cast<long>(kept_patches.size()), seq.patch_raw.cols());
  for (std::size_t r = 0; r < kept_patches.size(); ++r)
    out.patch_raw.row(static_cast<long>(r)) = seq.patch_raw.row(kept_patches[r]);
  return out;
}

}  // namespace

EmbeddingSequence fastv_prune(const EncoderStates& item_states, const EmbeddingSequence& item_seq,
                              double keep_ratio) {
  if (!(keep_ratio > 0.0 && keep_ratio <= 1.0))
    throw InvalidInput("fastv_prune: keep_ratio must lie in (0, 1]");
  if (item_states.length() != item_seq.length())
    throw InvalidInput("fastv_prune: states/sequence length mismatch");

  std::vector<long> patch_positions;
  for (long i = 0; i < item_seq.length(); ++i)
    if (item_seq.origins[static_cast<std::size_t>(i)] == Origin::kPatch)
      patch_positions.push_back(i);
  if (patch_positions.empty()) return item_seq;

  const auto score = received_attention(item_states);
  std::vector<double> patch_scores;
  patch_scores.reserve(patch_positions.size());
  for (long p : patch_positions) patch_scores.push_back(score[static_cast<std::size_t>(p)]);

  const long keep = static_cast<long>(
      std::ceil(keep_ratio * static_cast<double>(patch_positions.size())));
  const auto kept_local = top_indices(patch_scores, keep);

  std::vector<bool> keep_row(static_cast<std::size_t>(item_seq.length()), true);
  for (long p : patch_positions) keep_row[static_cast<std::size_t>(p)] = false;
  for (long local : kept_local)
    keep_row[static_cast<std::size_t>(patch_positions[static_cast<std::size_t>(local)])] = true;

  std::vector<long> rows;
  for (long i = 0; i < item_seq.length(); ++i)
    if (keep_row[static_cast<std::size_t>(i)]) rows.push_back(i);
  return gather_rows(item_seq, rows);
}

SelectionMask attn_select(const EncoderStates& states, double keep_ratio) {
  if (!(keep_ratio > 0.0 && keep_ratio <= 1.0))
    throw InvalidInput("attn_select: keep_ratio must lie in (0, 1]");
  SelectionMask mask;
  mask.keep_ratio = keep_ratio;
  const long n = states.length();
  if (n == 0) return mask;
  const auto score = received_attention(states);
  const long keep = static_cast<long>(std::ceil(keep_ratio * static_cast<double>(n)));
  mask.kept = top_indices(score, keep);
  return mask;
}

LayerwiseMemory vlm_as_memory(const Backbone& model, const std::vector<EmbeddingSequence>& items,
                              const std::vector<int>& band, double keep_ratio) {
  if (band.empty()) throw InvalidInput("vlm_as_memory: empty layer band");
  for (int l : band)
    if (l < 0 || l >= model.config.n_layers)
      throw InvalidInput("vlm_as_memory: band layer " + std::to_string(l) + " out of range");
  std::vector<int> sorted_band = band;
  std::sort(sorted_band.begin(), sorted_band.end());

  LayerwiseMemory mem;
  mem.band = sorted_band;
  mem.states.resize(sorted_band.size());
  for (std::size_t b = 0; b < sorted_band.size(); ++b)
    mem.states[b].resize(0, model.config.d_model);

  Backbone::EncodeOptions opt;
  opt.causal = false;
  opt.want_traces = true;
  for (const auto& item : items) {
    EncoderStates st = model.encode(item, opt);
    std::vector<long> rows;
    if (keep_ratio < 1.0) {
      rows = attn_select(st, keep_ratio).kept;
    } else {
      rows.resize(static_cast<std::size_t>(st.length()));
      std::iota(rows.begin(), rows.end(), 0L);
    }
    for (std::size_t b = 0; b < sorted_band.size(); ++b) {
      const int layer = sorted_band[b];
      const Matrix& source = layer == 0 ? st.embeddings
                                        : st.per_layer_hidden[static_cast<std::size_t>(layer - 1)];
      Matrix selected(static_cast<long>(rows.size()), source.cols());
      for (std::size_t r = 0; r < rows.size(); ++r)
        selected.row(static_cast<long>(r)) = source.row(rows[r]);
      Matrix grown(mem.states[b].rows() + selected.rows(), source.cols());
      if (mem.states[b].rows() > 0) grown.topRows(mem.states[b].rows()) = mem.states[b];
      if (selected.rows() > 0) grown.bottomRows(selected.rows()) = selected;
      mem.states[b] = std::move(grown);
    }
  }
  return mem;
}

EncoderStates inject_layerwise(const Backbone& model, const EmbeddingSequence& query,
                               const LayerwiseMemory& memory, bool causal) {
  Backbone::EncodeOptions opt;
  opt.causal = causal;
  opt.want_traces = true;
  opt.injected = &memory;
  return model.encode(query, opt);
}

}  // namespace comem
