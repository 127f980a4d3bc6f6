#ifndef COMEM_TYPES_HPP
#define COMEM_TYPES_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace comem {

// All in-memory math is double precision; on-disk payloads are float32.
using Scalar = double;
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using MatrixConstRef = Eigen::Ref<const Matrix>;

using TokenId = int;
using TokenSeq = std::vector<TokenId>;

// A named tensor with a gradient buffer of the same shape. Frozen groups
// never receive gradient: backward passes skip them entirely, so grad
// stays exactly zero.
struct ParamGroup {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;

  ParamGroup() = default;
  ParamGroup(std::string n, Matrix v, bool train = true)
      : name(std::move(n)), value(std::move(v)),
        grad(Matrix::Zero(value.rows(), value.cols())), trainable(train) {}

  void zero_grad() { grad.setZero(); }
  long size() const { return static_cast<long>(value.size()); }

  // Adds g to grad, but only for trainable groups.
  void accumulate(const MatrixConstRef& g) {
    if (trainable) grad += g;
  }
};

using ParamVisitor = std::function<void(ParamGroup&)>;
using ConstParamVisitor = std::function<void(const ParamGroup&)>;

// Raised when an input violates an operation's preconditions.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised when an assembled sequence would exceed the context budget.
// Carries the amount by which the budget is exceeded so callers can
// report how much truncation would be required.
class ContextOverflow : public std::runtime_error {
 public:
  ContextOverflow(long required, long budget)
      : std::runtime_error("context overflow: need " + std::to_string(required) +
                           " positions, budget " + std::to_string(budget) +
                           " (truncate " + std::to_string(required - budget) + ")"),
        required_positions(required), context_budget(budget) {}
  long required_positions;
  long context_budget;
  long overflow() const { return required_positions - context_budget; }
};

// FNV-1a over bytes; used for per-tensor init streams and config digests.
inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// splitmix64: stateless seeded hashing for reproducible derived streams.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream));
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return mix_seed(mix_seed(seed, a), b);
}

// Deterministic RNG wrapper. All randomness in the project flows through
// explicitly seeded instances of this.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return real_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double gaussian() { return normal_(engine_); }
  // Uniform integer in [0, n).
  std::uint64_t next(std::uint64_t n) {
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
  }
  std::mt19937_64& engine() { return engine_; }

  Matrix gaussian_matrix(long rows, long cols, double stddev) {
    Matrix m(rows, cols);
    for (long i = 0; i < rows; ++i)
      for (long j = 0; j < cols; ++j) m(i, j) = stddev * gaussian();
    return m;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  std::uniform_real_distribution<double> real_{0.0, 1.0};
  std::normal_distribution<double> normal_{0.0, 1.0};
};

inline bool all_finite(const MatrixConstRef& m) { return m.allFinite(); }

}  // namespace comem

#endif  // COMEM_TYPES_HPP
