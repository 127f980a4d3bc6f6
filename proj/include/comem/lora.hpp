#ifndef COMEM_LORA_HPP
#define COMEM_LORA_HPP

#include "comem/types.hpp"

#include <string>
#include <vector>

namespace comem {

struct LoraConfig {
  int rank = 16;
  double alpha = 16.0;
  // Shorthand projection names ("wq", "wk", "wv", "wo"), expanded across
  // all backbone layers on attach.
  std::vector<std::string> targets = {"wq", "wv"};

  double scale() const { return alpha / static_cast<double>(rank); }
};

// Low-rank delta attached to one frozen weight. Adapted forward is
// y = x W + scale * (x A^T) B^T, i.e. W + scale * (B A) in column form.
// B starts at zero, so the adapted map equals the base map at init.
struct LoraAdapter {
  std::string target;  // fully qualified weight name, e.g. "blocks.2.attn.wq"
  ParamGroup a;        // rank x d_in, seeded gaussian
  ParamGroup b;        // d_out x rank, zero
  double scale = 1.0;
};

struct LoraSet {
  LoraConfig config;
  std::vector<LoraAdapter> adapters;

  const LoraAdapter* find(const std::string& target) const {
    for (const auto& ad : adapters)
      if (ad.target == target) return &ad;
    return nullptr;
  }
  LoraAdapter* find(const std::string& target) {
    for (auto& ad : adapters)
      if (ad.target == target) return &ad;
    return nullptr;
  }

  void visit_params(const ParamVisitor& fn) {
    for (auto& ad : adapters) {
      fn(ad.a);
      fn(ad.b);
    }
  }
  void visit_params(const ConstParamVisitor& fn) const {
    for (const auto& ad : adapters) {
      fn(ad.a);
      fn(ad.b);
    }
  }

  long param_count() const {
    long n = 0;
    visit_params(ConstParamVisitor([&](const ParamGroup& g) { n += g.size(); }));
    return n;
  }
};

}  // namespace comem

#endif  // COMEM_LORA_HPP
