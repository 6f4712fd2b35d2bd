#include "debias_mf/encoder.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "json.hpp"

#include "debias_mf/error.hpp"
#include "debias_mf/kernels.hpp"

namespace debias_mf {
namespace {

constexpr const char* kMagic = "DEBIAS_MF_ENCODER 1";

}  // namespace

EncoderKind parse_encoder_kind(const std::string& name) {
  if (name == "conv") return EncoderKind::kConv;
  if (name == "average") return EncoderKind::kAverage;
  throw UsageError("unknown encoder kind '" + name + "' (expected conv or average)");
}

std::string to_string(EncoderKind kind) {
  return kind == EncoderKind::kConv ? "conv" : "average";
}

std::size_t EncoderConfig::pooled_dim() const {
  return kind == EncoderKind::kConv ? filters * windows.size() : embed_dim;
}

std::size_t EncoderConfig::min_length() const {
  if (kind == EncoderKind::kAverage) return 1;
  return windows.empty() ? 1 : *std::max_element(windows.begin(), windows.end());
}

void EncoderConfig::validate() const {
  if (vocab_size < 2 || embed_dim == 0 || output_dim == 0) {
    throw UsageError("encoder needs vocab_size >= 2 and positive embed/output dims");
  }
  if (kind == EncoderKind::kConv) {
    if (filters == 0 || windows.empty()) throw UsageError("conv encoder needs filters and windows");
    for (auto w : windows) {
      if (w == 0) throw UsageError("window sizes must be positive");
    }
  }
}

EncoderParams::EncoderParams(EncoderConfig config) : config_(std::move(config)) {
  config_.validate();
  std::size_t offset = 0;
  embedding_offset_ = offset;
  offset += config_.vocab_size * config_.embed_dim;
  if (config_.kind == EncoderKind::kConv) {
    for (auto w : config_.windows) {
      filter_offsets_.push_back(offset);
      offset += config_.filters * w * config_.embed_dim;
      bias_offsets_.push_back(offset);
      offset += config_.filters;
    }
  }
  dense_offset_ = offset;
  offset += config_.output_dim * config_.pooled_dim();
  dense_bias_offset_ = offset;
  offset += config_.output_dim;
  values_.assign(offset, 0.0);
}

EncoderParams EncoderParams::random(EncoderConfig config, std::uint64_t seed, double scale) {
  EncoderParams p(std::move(config));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(-scale, scale);
  for (auto& v : p.values_) v = uniform(rng);
  for (auto& v : p.embedding(0)) v = 0.0;
  for (std::size_t w = 0; w < p.filter_offsets_.size(); ++w) {
    for (auto& v : p.filter_bias(w)) v = 0.0;
  }
  for (auto& v : p.dense_bias()) v = 0.0;
  return p;
}

std::span<double> EncoderParams::embedding(std::size_t token) {
  return {values_.data() + embedding_offset_ + token * config_.embed_dim, config_.embed_dim};
}
std::span<const double> EncoderParams::embedding(std::size_t token) const {
  return {values_.data() + embedding_offset_ + token * config_.embed_dim, config_.embed_dim};
}
std::span<double> EncoderParams::filter_weights(std::size_t w) {
  return {values_.data() + filter_offsets_.at(w),
          config_.filters * config_.windows[w] * config_.embed_dim};
}
std::span<const double> EncoderParams::filter_weights(std::size_t w) const {
  return {values_.data() + filter_offsets_.at(w),
          config_.filters * config_.windows[w] * config_.embed_dim};
}
std::span<double> EncoderParams::filter_bias(std::size_t w) {
  return {values_.data() + bias_offsets_.at(w), config_.filters};
}
std::span<const double> EncoderParams::filter_bias(std::size_t w) const {
  return {values_.data() + bias_offsets_.at(w), config_.filters};
}
std::span<double> EncoderParams::dense_weights() {
  return {values_.data() + dense_offset_, config_.output_dim * config_.pooled_dim()};
}
std::span<const double> EncoderParams::dense_weights() const {
  return {values_.data() + dense_offset_, config_.output_dim * config_.pooled_dim()};
}
std::span<double> EncoderParams::dense_bias() {
  return {values_.data() + dense_bias_offset_, config_.output_dim};
}
std::span<const double> EncoderParams::dense_bias() const {
  return {values_.data() + dense_bias_offset_, config_.output_dim};
}

void EncoderParams::set_zero() { std::fill(values_.begin(), values_.end(), 0.0); }

bool EncoderParams::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void EncoderParams::save(const std::filesystem::path& path, std::uint64_t seed) const {
  nlohmann::json header;
  header["kind"] = to_string(config_.kind);
  header["vocab_size"] = config_.vocab_size;
  header["embed_dim"] = config_.embed_dim;
  header["filters"] = config_.filters;
  header["windows"] = config_.windows;
  header["output_dim"] = config_.output_dim;
  header["num_params"] = values_.size();
  header["seed"] = seed;
  header["dtype"] = "float64-le";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << kMagic << '\n' << header.dump() << '\n';
  static_assert(std::endian::native == std::endian::little, "encoder files are little-endian");
  out.write(reinterpret_cast<const char*>(values_.data()),
            static_cast<std::streamsize>(values_.size() * sizeof(double)));
}

EncoderParams EncoderParams::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string magic, header_line;
  if (!std::getline(in, magic) || magic != kMagic || !std::getline(in, header_line)) {
    throw DataError(path.string() + ": not an encoder parameter file");
  }
  EncoderConfig cfg;
  std::size_t count = 0;
  try {
    const auto header = nlohmann::json::parse(header_line);
    cfg.kind = parse_encoder_kind(header.at("kind").get<std::string>());
    cfg.vocab_size = header.at("vocab_size").get<std::size_t>();
    cfg.embed_dim = header.at("embed_dim").get<std::size_t>();
    cfg.filters = header.at("filters").get<std::size_t>();
    cfg.windows = header.at("windows").get<std::vector<std::size_t>>();
    cfg.output_dim = header.at("output_dim").get<std::size_t>();
    count = header.at("num_params").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": bad encoder header: " + e.what());
  }
  EncoderParams p(cfg);
  if (p.size() != count) throw DataError(path.string() + ": parameter count mismatch");
  in.read(reinterpret_cast<char*>(p.values_.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (in.gcount() != static_cast<std::streamsize>(count * sizeof(double))) {
    throw DataError(path.string() + ": truncated parameter data");
  }
  return p;
}

EncoderOutput forward(const EncoderParams& params, std::span<const std::uint32_t> sequence) {
  const auto& cfg = params.config();
  const std::size_t length = sequence.size();
  const std::size_t e = cfg.embed_dim;
  if (length < cfg.min_length()) {
    throw UsageError("sequence of length " + std::to_string(length) +
                     " is shorter than the widest convolution window");
  }
  EncoderOutput out;
  out.tokens.assign(sequence.begin(), sequence.end());
  out.embedded.resize(length * e);
  for (std::size_t t = 0; t < length; ++t) {
    if (sequence[t] >= cfg.vocab_size) throw UsageError("token id outside the vocabulary");
    const auto row = params.embedding(sequence[t]);
    std::copy(row.begin(), row.end(), out.embedded.begin() + static_cast<std::ptrdiff_t>(t * e));
  }

  const auto& k = kernels::active();
  out.pooled.assign(cfg.pooled_dim(), 0.0);
  if (cfg.kind == EncoderKind::kConv) {
    out.argmax.assign(cfg.pooled_dim(), 0);
    std::vector<double> activation(cfg.filters);
    for (std::size_t w = 0; w < cfg.windows.size(); ++w) {
      const std::size_t h = cfg.windows[w];
      const auto weights = params.filter_weights(w);
      const auto bias = params.filter_bias(w);
      double* pooled = out.pooled.data() + w * cfg.filters;
      std::uint32_t* argmax = out.argmax.data() + w * cfg.filters;
      for (std::size_t t = 0; t + h <= length; ++t) {
        k.gemv(weights.data(), out.embedded.data() + t * e, activation.data(), cfg.filters, h * e);
        for (std::size_t q = 0; q < cfg.filters; ++q) {
          const double a = std::tanh(activation[q] + bias[q]);
          if (t == 0 || a > pooled[q]) {
            pooled[q] = a;
            argmax[q] = static_cast<std::uint32_t>(t);
          }
        }
      }
    }
  } else {
    for (std::size_t t = 0; t < length; ++t) {
      if (sequence[t] == 0) continue;
      k.axpy(1.0, out.embedded.data() + t * e, out.pooled.data(), e);
      ++out.counted;
    }
    if (out.counted > 0) {
      const double inv = 1.0 / static_cast<double>(out.counted);
      for (auto& v : out.pooled) v *= inv;
    }
  }

  out.value.resize(cfg.output_dim);
  k.gemv(params.dense_weights().data(), out.pooled.data(), out.value.data(), cfg.output_dim,
         cfg.pooled_dim());
  const auto dense_bias = params.dense_bias();
  for (std::size_t o = 0; o < cfg.output_dim; ++o) out.value[o] += dense_bias[o];
  return out;
}

void backward_accumulate(const EncoderParams& params, const EncoderOutput& output,
                         std::span<const double> upstream, EncoderParams& grad) {
  const auto& cfg = params.config();
  if (upstream.size() != cfg.output_dim) {
    throw UsageError("upstream gradient has length " + std::to_string(upstream.size()) +
                     ", expected " + std::to_string(cfg.output_dim));
  }
  if (!(grad.config() == cfg)) throw UsageError("gradient buffer has a different configuration");
  const std::size_t e = cfg.embed_dim;
  const std::size_t pooled_dim = cfg.pooled_dim();
  if (output.pooled.size() != pooled_dim || output.embedded.size() != output.tokens.size() * e) {
    throw UsageError("encoder output does not match these parameters");
  }
  const auto& k = kernels::active();

  // Dense layer.
  auto dense_grad = grad.dense_weights();
  auto dense_bias_grad = grad.dense_bias();
  const auto dense = params.dense_weights();
  std::vector<double> pooled_grad(pooled_dim, 0.0);
  for (std::size_t o = 0; o < cfg.output_dim; ++o) {
    if (upstream[o] == 0.0) continue;
    k.axpy(upstream[o], output.pooled.data(), dense_grad.data() + o * pooled_dim, pooled_dim);
    dense_bias_grad[o] += upstream[o];
    k.axpy(upstream[o], dense.data() + o * pooled_dim, pooled_grad.data(), pooled_dim);
  }

  if (cfg.kind == EncoderKind::kConv) {
    std::vector<double> embedded_grad(output.embedded.size(), 0.0);
    bool touched = false;
    for (std::size_t w = 0; w < cfg.windows.size(); ++w) {
      const std::size_t width = cfg.windows[w] * e;
      const auto weights = params.filter_weights(w);
      auto weights_grad = grad.filter_weights(w);
      auto bias_grad = grad.filter_bias(w);
      for (std::size_t q = 0; q < cfg.filters; ++q) {
        const std::size_t unit = w * cfg.filters + q;
        const double a = output.pooled[unit];
        const double pre_grad = pooled_grad[unit] * (1.0 - a * a);
        if (pre_grad == 0.0) continue;
        const std::size_t t = output.argmax[unit];
        k.axpy(pre_grad, output.embedded.data() + t * e, weights_grad.data() + q * width, width);
        bias_grad[q] += pre_grad;
        k.axpy(pre_grad, weights.data() + q * width, embedded_grad.data() + t * e, width);
        touched = true;
      }
    }
    if (touched) {
      for (std::size_t t = 0; t < output.tokens.size(); ++t) {
        k.axpy(1.0, embedded_grad.data() + t * e, grad.embedding(output.tokens[t]).data(), e);
      }
    }
  } else if (output.counted > 0) {
    const double inv = 1.0 / static_cast<double>(output.counted);
    for (std::size_t t = 0; t < output.tokens.size(); ++t) {
      if (output.tokens[t] == 0) continue;
      k.axpy(inv, pooled_grad.data(), grad.embedding(output.tokens[t]).data(), e);
    }
  }
}

EncoderParams backward(const EncoderParams& params, const EncoderOutput& output,
                       std::span<const double> upstream) {
  EncoderParams grad(params.config());
  backward_accumulate(params, output, upstream, grad);
  return grad;
}

EncoderVariant encoder_variant(EncoderKind kind) {
  return {kind, &forward,
          static_cast<EncoderParams (*)(const EncoderParams&, const EncoderOutput&,
                                        std::span<const double>)>(&backward)};
}

}  // namespace debias_mf
