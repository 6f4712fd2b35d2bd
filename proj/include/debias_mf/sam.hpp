#pragma once

// Self-adaptive attention weights: a text-conditioned, column-constant weight
// matrix W(X) with w_j >= 1, fitted by minimizing the spectral norm of the
// masked residual I o W - J. The fit only sees the indicator pattern, never
// the ratings or the factor matrices.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "debias_mf/data.hpp"
#include "debias_mf/encoder.hpp"
#include "debias_mf/matrix.hpp"
#include "debias_mf/textprep.hpp"

namespace debias_mf {

// log(1 + e^z) without overflow.
double softplus(double z);
double sigmoid(double z);

// w = 1 + softplus(z): strictly above 1, tending to 1 as z -> -inf.
double weight_from_logit(double z);

class LinearOperator {
 public:
  virtual ~LinearOperator() = default;
  virtual std::size_t rows() const = 0;
  virtual std::size_t cols() const = 0;
  // y = A x
  virtual void apply(std::span<const double> x, std::span<double> y) const = 0;
  // x = A^T y
  virtual void apply_transpose(std::span<const double> y, std::span<double> x) const = 0;
};

class DenseOperator final : public LinearOperator {
 public:
  explicit DenseOperator(Matrix a) : a_(std::move(a)) {}
  std::size_t rows() const override { return a_.rows(); }
  std::size_t cols() const override { return a_.cols(); }
  void apply(std::span<const double> x, std::span<double> y) const override;
  void apply_transpose(std::span<const double> y, std::span<double> x) const override;
  const Matrix& matrix() const { return a_; }

 private:
  Matrix a_;
};

// M = I o W - J with W column-constant: M(i, j) = w_j - 1 where observed and
// -1 elsewhere. Products run over the sparse pattern plus a rank-one all-ones
// correction, O(|Omega| + m + n) each. Holds a reference to the indicator.
class MaskedResidual final : public LinearOperator {
 public:
  MaskedResidual(const IndicatorView& indicator, std::vector<double> weights, int threads = 1);

  std::size_t rows() const override { return indicator_->rows(); }
  std::size_t cols() const override { return indicator_->cols(); }
  void apply(std::span<const double> x, std::span<double> y) const override;
  void apply_transpose(std::span<const double> y, std::span<double> x) const override;

  double entry(std::size_t i, std::size_t j) const;
  Matrix to_dense() const;
  std::span<const double> weights() const { return weights_; }

 private:
  const IndicatorView* indicator_;
  std::vector<double> weights_;
  int threads_;
};

struct PowerIterationOptions {
  // Stop when |A^T u - value v| <= tol * max(1, value), i.e. the eigen-residual
  // of A^T A is within tol * value * max(1, value).
  double tol = 1e-8;
  std::size_t max_iters = 1000;
  std::uint64_t seed = 0;
  // Starting right vector; a seeded Gaussian start when empty.
  std::vector<double> warm_start;
};

struct SpectralResult {
  double value = 0.0;
  std::vector<double> left;   // unit, length rows
  std::vector<double> right;  // unit, length cols
  std::size_t iterations = 0;
  bool converged = false;
};

// Largest singular value by power iteration on A^T A. When max_iters runs out
// the latest estimate is returned with converged = false.
SpectralResult spectral_norm(const LinearOperator& op, const PowerIterationOptions& options = {});

enum class SamObjective { kSpectral, kFrobenius };

SamObjective parse_sam_objective(const std::string& name);
std::string to_string(SamObjective objective);

// Raw head outputs z_j and the derived weights w_j = 1 + softplus(z_j).
struct HeadWeights {
  std::vector<double> logits;
  std::vector<double> weights;
};

HeadWeights weights_from_text(const EncoderParams& head, const Corpus& corpus, int threads = 1);

struct SamEvaluationOptions {
  SamObjective objective = SamObjective::kSpectral;
  PowerIterationOptions power;
  int threads = 1;
};

struct SamEvaluation {
  double objective = 0.0;
  EncoderParams gradient;            // d objective / d head parameters
  std::vector<double> weights;       // w_j
  std::vector<double> weight_gradient;  // d objective / d w_j
  std::vector<double> right_vector;  // top right singular vector (spectral only)
  bool converged = true;             // power iteration reached tolerance
};

// Spectral objective ||I o W - J||_2 with subgradient u1 v1^T restricted to
// observed entries: d/dw_j = (sum over observed i of u1[i]) * v1[j].
// Frobenius objective: sum_ij (I_ij w_j - 1)^2.
SamEvaluation objective_and_gradient(const EncoderParams& head, const Corpus& corpus,
                                     const IndicatorView& indicator,
                                     const SamEvaluationOptions& options = {});

// Objective value for explicit weights (no head).
double sam_objective(std::span<const double> weights, const IndicatorView& indicator,
                     const SamEvaluationOptions& options = {});

struct SamFitConfig {
  double learning_rate = 1.0;  // largest step tried
  std::size_t max_iters = 200;
  double tol = 1e-7;           // stop when the relative decrease falls below
  double armijo = 1e-4;
  std::size_t max_halvings = 40;
  SamEvaluationOptions evaluation;
};

struct SamModel {
  EncoderParams head;
  std::vector<double> weights;  // per item, each >= 1
  std::vector<double> objective_trace;  // one entry per accepted iterate
  std::size_t iterations = 0;
  bool converged = false;       // stopped on tol or a stalled line search
  bool power_converged = true;  // every accepted evaluation's power iteration converged
};

// Gradient descent with halving backtracking (Armijo) on the chosen
// objective; w >= 1 holds by construction. Throws NumericalError if the
// objective becomes non-finite at an accepted point.
SamModel fit_sam(EncoderParams head, const Corpus& corpus, const IndicatorView& indicator,
                 const SamFitConfig& config);

// "item_index,weight" rows with 17 significant digits.
void write_weights_csv(std::span<const double> weights, const std::filesystem::path& path);
std::vector<double> read_weights_csv(const std::filesystem::path& path);

}  // namespace debias_mf
