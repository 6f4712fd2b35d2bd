#pragma once

// Convolutional text encoder with hand-written backpropagation.
//
// conv:    embedding lookup -> 1-D convolution per window size -> tanh ->
//          max over time -> concatenate -> dense
// average: embedding lookup -> mean over non-pad positions -> dense
//
// The same code serves as the item document model (output dim d) and as the
// scalar weight head used by the SAM fit (output dim 1).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace debias_mf {

enum class EncoderKind { kConv, kAverage };

EncoderKind parse_encoder_kind(const std::string& name);
std::string to_string(EncoderKind kind);

struct EncoderConfig {
  EncoderKind kind = EncoderKind::kConv;
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 50;
  std::size_t filters = 50;  // per window size
  std::vector<std::size_t> windows{3, 4, 5};
  std::size_t output_dim = 50;

  // Width of the pooled feature vector feeding the dense layer.
  std::size_t pooled_dim() const;
  // Shortest sequence forward() accepts.
  std::size_t min_length() const;
  void validate() const;

  bool operator==(const EncoderConfig&) const = default;
};

// All parameters live in one flat buffer so optimizers, gradient checks and
// serialization can treat them as a vector. Gradients use the same type.
class EncoderParams {
 public:
  EncoderParams() = default;
  explicit EncoderParams(EncoderConfig config);  // all zeros

  // Weights uniform in [-scale, scale]; biases and the pad embedding zero.
  static EncoderParams random(EncoderConfig config, std::uint64_t seed, double scale = 0.05);

  const EncoderConfig& config() const { return config_; }
  std::size_t size() const { return values_.size(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  std::span<double> embedding(std::size_t token);
  std::span<const double> embedding(std::size_t token) const;
  // filters x (window * embed_dim), row-major
  std::span<double> filter_weights(std::size_t window_index);
  std::span<const double> filter_weights(std::size_t window_index) const;
  std::span<double> filter_bias(std::size_t window_index);
  std::span<const double> filter_bias(std::size_t window_index) const;
  // output_dim x pooled_dim, row-major
  std::span<double> dense_weights();
  std::span<const double> dense_weights() const;
  std::span<double> dense_bias();
  std::span<const double> dense_bias() const;

  void set_zero();
  bool all_finite() const;

  // Binary file: a magic line, a one-line JSON header (shapes, kind, seed),
  // then the flat parameters as little-endian doubles.
  void save(const std::filesystem::path& path, std::uint64_t seed = 0) const;
  static EncoderParams load(const std::filesystem::path& path);

 private:
  EncoderConfig config_;
  std::vector<double> values_;
  std::size_t embedding_offset_ = 0;
  std::vector<std::size_t> filter_offsets_;
  std::vector<std::size_t> bias_offsets_;
  std::size_t dense_offset_ = 0;
  std::size_t dense_bias_offset_ = 0;
};

struct EncoderOutput {
  std::vector<double> value;  // output_dim

  // Cached for backward.
  std::vector<std::uint32_t> tokens;
  std::vector<double> embedded;        // length x embed_dim
  std::vector<double> pooled;          // pooled_dim, post-activation for conv
  std::vector<std::uint32_t> argmax;   // conv: winning position per pooled unit
  std::size_t counted = 0;             // average: number of non-pad tokens
};

// Throws UsageError when the sequence is shorter than the widest window or
// holds ids outside the vocabulary.
EncoderOutput forward(const EncoderParams& params, std::span<const std::uint32_t> sequence);

// Adds d(upstream . output)/d(params) into grad, which must share params'
// configuration. Throws UsageError on a shape mismatch.
void backward_accumulate(const EncoderParams& params, const EncoderOutput& output,
                         std::span<const double> upstream, EncoderParams& grad);

EncoderParams backward(const EncoderParams& params, const EncoderOutput& output,
                       std::span<const double> upstream);

struct EncoderVariant {
  EncoderKind kind;
  EncoderOutput (*forward)(const EncoderParams&, std::span<const std::uint32_t>);
  EncoderParams (*backward)(const EncoderParams&, const EncoderOutput&, std::span<const double>);
};

// Both variants share forward()/backward(); the parameter config carries the
// kind. The pair is returned so callers can select by name.
EncoderVariant encoder_variant(EncoderKind kind);

}  // namespace debias_mf
