#include "debias_mf/sam.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "debias_mf/error.hpp"
#include "debias_mf/kernels.hpp"
#include "debias_mf/parallel.hpp"

namespace debias_mf {

double softplus(double z) {
  return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double weight_from_logit(double z) { return 1.0 + softplus(z); }

void DenseOperator::apply(std::span<const double> x, std::span<double> y) const {
  kernels::active().gemv(a_.values().data(), x.data(), y.data(), a_.rows(), a_.cols());
}

void DenseOperator::apply_transpose(std::span<const double> y, std::span<double> x) const {
  std::fill(x.begin(), x.end(), 0.0);
  for (std::size_t r = 0; r < a_.rows(); ++r) {
    kernels::active().axpy(y[r], a_.row(r).data(), x.data(), a_.cols());
  }
}

MaskedResidual::MaskedResidual(const IndicatorView& indicator, std::vector<double> weights,
                               int threads)
    : indicator_(&indicator), weights_(std::move(weights)), threads_(threads) {
  if (weights_.size() != indicator.cols()) {
    throw UsageError("weight vector length must equal the indicator's column count");
  }
}

void MaskedResidual::apply(std::span<const double> x, std::span<double> y) const {
  const double total = std::accumulate(x.begin(), x.end(), 0.0);
  parallel_for(rows(), threads_, [&](std::size_t i) {
    double s = 0.0;
    for (const auto j : indicator_->row(i)) s += weights_[j] * x[j];
    y[i] = s - total;
  });
}

void MaskedResidual::apply_transpose(std::span<const double> y, std::span<double> x) const {
  const double total = std::accumulate(y.begin(), y.end(), 0.0);
  parallel_for(cols(), threads_, [&](std::size_t j) {
    double s = 0.0;
    for (const auto i : indicator_->col(j)) s += y[i];
    x[j] = weights_[j] * s - total;
  });
}

double MaskedResidual::entry(std::size_t i, std::size_t j) const {
  return indicator_->contains(i, j) ? weights_[j] - 1.0 : -1.0;
}

Matrix MaskedResidual::to_dense() const {
  Matrix out(rows(), cols(), -1.0);
  for (std::size_t i = 0; i < rows(); ++i) {
    for (const auto j : indicator_->row(i)) out(i, j) = weights_[j] - 1.0;
  }
  return out;
}

SpectralResult spectral_norm(const LinearOperator& op, const PowerIterationOptions& options) {
  const std::size_t m = op.rows(), n = op.cols();
  if (m == 0 || n == 0) throw UsageError("spectral norm of an empty operator");
  SpectralResult out;
  std::vector<double> v(n), u(m);
  if (options.warm_start.size() == n) {
    v = options.warm_start;
  } else {
    std::mt19937_64 rng(options.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& x : v) x = normal(rng);
  }
  const auto normalize = [](std::vector<double>& x) {
    const double norm = std::sqrt(kernels::squared_norm(x));
    if (norm > 0.0) {
      for (auto& e : x) e /= norm;
    }
    return norm;
  };
  if (normalize(v) == 0.0) {
    std::fill(v.begin(), v.end(), 0.0);
    v[0] = 1.0;
  }

  // Stops on the eigen-residual |A^T A v - sigma^2 v| <= tol * sigma *
  // max(1, sigma), which bounds the error of sigma^2 by the same amount even
  // when the top singular values are nearly tied.
  std::vector<double> w(n);
  double sigma = 0.0;
  while (out.iterations < options.max_iters) {
    ++out.iterations;
    op.apply(v, u);
    sigma = normalize(u);
    if (sigma == 0.0) {
      // A v = 0 for a generic start means A = 0.
      std::fill(u.begin(), u.end(), 0.0);
      u[0] = 1.0;
      out.converged = true;
      break;
    }
    op.apply_transpose(u, w);
    double residual = 0.0;
    for (std::size_t j = 0; j < n; ++j) residual += (w[j] - sigma * v[j]) * (w[j] - sigma * v[j]);
    if (std::sqrt(residual) <= options.tol * std::max(1.0, sigma)) {
      out.converged = true;
      break;
    }
    v.swap(w);
    normalize(v);
  }
  if (!out.converged) {
    op.apply(v, u);
    sigma = normalize(u);
  }
  out.value = sigma;
  out.left = std::move(u);
  out.right = std::move(v);
  return out;
}

SamObjective parse_sam_objective(const std::string& name) {
  if (name == "spectral") return SamObjective::kSpectral;
  if (name == "frobenius") return SamObjective::kFrobenius;
  throw UsageError("unknown SAM objective '" + name + "' (expected spectral or frobenius)");
}

std::string to_string(SamObjective objective) {
  return objective == SamObjective::kSpectral ? "spectral" : "frobenius";
}

namespace {

struct HeadPass {
  std::vector<EncoderOutput> outputs;
  HeadWeights weights;
};

HeadPass run_head(const EncoderParams& head, const Corpus& corpus, int threads) {
  if (head.config().output_dim != 1) throw UsageError("the weight head must have output_dim 1");
  HeadPass pass;
  const std::size_t n = corpus.num_items();
  pass.outputs.resize(n);
  pass.weights.logits.resize(n);
  pass.weights.weights.resize(n);
  parallel_for(n, threads, [&](std::size_t j) {
    pass.outputs[j] = forward(head, corpus.sequence(j));
    const double z = pass.outputs[j].value[0];
    pass.weights.logits[j] = z;
    pass.weights.weights[j] = weight_from_logit(z);
  });
  return pass;
}

// Objective and d objective / d w for explicit weights.
double evaluate_weights(std::span<const double> weights, const IndicatorView& indicator,
                        const SamEvaluationOptions& options, std::vector<double>* weight_grad,
                        std::vector<double>* right, bool* converged) {
  const std::size_t m = indicator.rows(), n = indicator.cols();
  if (weight_grad != nullptr) weight_grad->assign(n, 0.0);
  if (options.objective == SamObjective::kFrobenius) {
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double c = static_cast<double>(indicator.col(j).size());
      const double d = weights[j] - 1.0;
      total += c * d * d + (static_cast<double>(m) - c);
      if (weight_grad != nullptr) (*weight_grad)[j] = 2.0 * c * d;
    }
    if (converged != nullptr) *converged = true;
    return total;
  }
  const MaskedResidual residual(indicator, std::vector<double>(weights.begin(), weights.end()),
                                options.threads);
  auto result = spectral_norm(residual, options.power);
  if (weight_grad != nullptr) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (const auto i : indicator.col(j)) s += result.left[i];
      (*weight_grad)[j] = s * result.right[j];
    }
  }
  if (converged != nullptr) *converged = result.converged;
  if (right != nullptr) *right = std::move(result.right);
  return result.value;
}

}  // namespace

HeadWeights weights_from_text(const EncoderParams& head, const Corpus& corpus, int threads) {
  return run_head(head, corpus, threads).weights;
}

double sam_objective(std::span<const double> weights, const IndicatorView& indicator,
                     const SamEvaluationOptions& options) {
  if (weights.size() != indicator.cols()) throw UsageError("one weight per item is required");
  return evaluate_weights(weights, indicator, options, nullptr, nullptr, nullptr);
}

SamEvaluation objective_and_gradient(const EncoderParams& head, const Corpus& corpus,
                                     const IndicatorView& indicator,
                                     const SamEvaluationOptions& options) {
  if (corpus.num_items() != indicator.cols()) {
    throw UsageError("corpus has " + std::to_string(corpus.num_items()) + " items, indicator has " +
                     std::to_string(indicator.cols()));
  }
  auto pass = run_head(head, corpus, options.threads);
  SamEvaluation out;
  out.weights = std::move(pass.weights.weights);
  out.objective = evaluate_weights(out.weights, indicator, options, &out.weight_gradient,
                                   &out.right_vector, &out.converged);
  out.gradient = EncoderParams(head.config());
  for (std::size_t j = 0; j < out.weights.size(); ++j) {
    const double upstream = out.weight_gradient[j] * sigmoid(pass.weights.logits[j]);
    if (upstream == 0.0) continue;
    backward_accumulate(head, pass.outputs[j], std::span<const double>(&upstream, 1), out.gradient);
  }
  return out;
}

SamModel fit_sam(EncoderParams head, const Corpus& corpus, const IndicatorView& indicator,
                 const SamFitConfig& config) {
  SamEvaluationOptions options = config.evaluation;
  auto current = objective_and_gradient(head, corpus, indicator, options);
  if (!std::isfinite(current.objective)) {
    throw NumericalError("SAM objective is not finite at the initial head parameters");
  }
  SamModel model;
  model.objective_trace.push_back(current.objective);
  model.power_converged = current.converged;

  double step = config.learning_rate;
  while (config.learning_rate > 0.0 && model.iterations < config.max_iters) {
    const double grad_sq = kernels::squared_norm(current.gradient.values());
    if (!(grad_sq > 0.0)) {
      model.converged = true;
      break;
    }
    options.power.warm_start = current.right_vector;
    bool accepted = false;
    EncoderParams trial;
    SamEvaluation candidate;
    for (std::size_t h = 0; h <= config.max_halvings; ++h) {
      trial = head;
      kernels::axpy(-step, current.gradient.values(), trial.values());
      candidate = objective_and_gradient(trial, corpus, indicator, options);
      if (std::isfinite(candidate.objective) &&
          candidate.objective <= current.objective - config.armijo * step * grad_sq) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      model.converged = true;
      break;
    }
    const double decrease = current.objective - candidate.objective;
    head = std::move(trial);
    current = std::move(candidate);
    if (!head.all_finite()) throw NumericalError("SAM head parameters became non-finite");
    ++model.iterations;
    model.objective_trace.push_back(current.objective);
    model.power_converged = model.power_converged && current.converged;
    if (decrease <= config.tol * std::max(1.0, std::abs(current.objective))) {
      model.converged = true;
      break;
    }
    step = std::min(2.0 * step, config.learning_rate);
  }
  model.weights = std::move(current.weights);
  model.head = std::move(head);
  return model;
}

void write_weights_csv(std::span<const double> weights, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "item_index,weight\n" << std::setprecision(17);
  for (std::size_t j = 0; j < weights.size(); ++j) out << j << ',' << weights[j] << '\n';
}

std::vector<double> read_weights_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<double> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || (line_no == 1 && line.rfind("item_index", 0) == 0)) continue;
    std::istringstream fields(line);
    std::size_t index = 0;
    char comma = 0;
    double w = 0.0;
    if (!(fields >> index >> comma >> w) || comma != ',' || index != out.size()) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected item_index,weight");
    }
    out.push_back(w);
  }
  return out;
}

}  // namespace debias_mf
