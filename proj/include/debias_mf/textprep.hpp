#pragma once

// Item documents: tokenization, a frequency-capped vocabulary, and fixed
// length token-id sequences.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace debias_mf {

class RatingDataset;

inline constexpr std::uint32_t kPadId = 0;
inline constexpr std::uint32_t kUnknownId = 1;

// Lowercases and splits on runs of non-alphanumeric characters.
std::vector<std::string> tokenize(std::string_view text);

class Vocabulary {
 public:
  Vocabulary() = default;

  // Ids 0 and 1 are pad and unknown; tokens follow in rank order from 2.
  static Vocabulary from_ranked_tokens(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size() + 2; }
  std::uint32_t id(std::string_view token) const;
  // "<pad>" and "<unk>" for the specials.
  std::string_view token(std::uint32_t id) const;
  std::span<const std::string> tokens() const { return tokens_; }

  // Two-column "token<TAB>id" file, specials included.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::uint32_t> ids_;
};

// Keeps the max_size most frequent tokens across documents, ties broken
// lexicographically. Throws DataError when every document is empty.
Vocabulary build_vocabulary(std::span<const std::string> documents, std::size_t max_size);

// Exactly `length` ids: out-of-vocabulary tokens map to kUnknownId, the
// document prefix is kept when too long, and kPadId fills the remainder.
std::vector<std::uint32_t> encode(std::string_view document, const Vocabulary& vocab,
                                  std::size_t length);

// n x L token ids, row j holding item j's document.
class Corpus {
 public:
  Corpus() = default;
  Corpus(std::size_t length, std::size_t vocab_size,
         std::vector<std::vector<std::uint32_t>> sequences);

  std::size_t num_items() const { return num_items_; }
  std::size_t length() const { return length_; }
  std::size_t vocab_size() const { return vocab_size_; }
  std::span<const std::uint32_t> sequence(std::size_t item) const {
    return {ids_.data() + item * length_, length_};
  }

 private:
  std::size_t num_items_ = 0;
  std::size_t length_ = 0;
  std::size_t vocab_size_ = 0;
  std::vector<std::uint32_t> ids_;
};

Corpus encode_corpus(std::span<const std::string> documents, const Vocabulary& vocab,
                     std::size_t length);

// Document file: one "raw_item_id<TAB>text" per line.
std::unordered_map<std::int64_t, std::string> read_documents(const std::filesystem::path& path);
void write_documents(const std::filesystem::path& path, std::span<const std::int64_t> item_ids,
                     std::span<const std::string> documents);

// Orders documents by the dataset's item indices. Items without a raw-id
// table are matched by index; items without a document get an empty one.
std::vector<std::string> align_documents(
    const RatingDataset& data, const std::unordered_map<std::int64_t, std::string>& docs,
    std::size_t* missing = nullptr);

}  // namespace debias_mf
