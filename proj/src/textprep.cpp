#include "debias_mf/textprep.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <map>

#include "debias_mf/data.hpp"
#include "debias_mf/error.hpp"

namespace debias_mf {

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  for (const char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      out.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

Vocabulary Vocabulary::from_ranked_tokens(std::vector<std::string> tokens) {
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  v.ids_.reserve(v.tokens_.size());
  for (std::size_t k = 0; k < v.tokens_.size(); ++k) {
    if (!v.ids_.emplace(v.tokens_[k], static_cast<std::uint32_t>(k + 2)).second) {
      throw DataError("duplicate vocabulary token '" + v.tokens_[k] + "'");
    }
  }
  return v;
}

std::uint32_t Vocabulary::id(std::string_view token) const {
  const auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnknownId : it->second;
}

std::string_view Vocabulary::token(std::uint32_t id) const {
  if (id == kPadId) return "<pad>";
  if (id == kUnknownId) return "<unk>";
  if (id - 2 >= tokens_.size()) throw UsageError("token id out of range");
  return tokens_[id - 2];
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "<pad>\t" << kPadId << "\n<unk>\t" << kUnknownId << '\n';
  for (std::size_t k = 0; k < tokens_.size(); ++k) out << tokens_[k] << '\t' << k + 2 << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    std::uint32_t id = 0;
    const char* first = line.data() + (tab == std::string::npos ? line.size() : tab + 1);
    const char* last = line.data() + line.size();
    if (tab == std::string::npos || std::from_chars(first, last, id).ec != std::errc()) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected token<TAB>id");
    }
    if (id < 2) continue;
    if (id != tokens.size() + 2) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": ids must be contiguous");
    }
    tokens.push_back(line.substr(0, tab));
  }
  return from_ranked_tokens(std::move(tokens));
}

Vocabulary build_vocabulary(std::span<const std::string> documents, std::size_t max_size) {
  std::map<std::string, std::size_t> counts;
  for (const auto& doc : documents) {
    for (auto& tok : tokenize(doc)) ++counts[std::move(tok)];
  }
  if (counts.empty()) throw DataError("cannot build a vocabulary: every document is empty");
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  // counts is lexicographic already; a stable sort by frequency keeps ties in that order.
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > max_size) ranked.resize(max_size);
  std::vector<std::string> tokens;
  tokens.reserve(ranked.size());
  for (auto& [tok, count] : ranked) tokens.push_back(std::move(tok));
  return Vocabulary::from_ranked_tokens(std::move(tokens));
}

std::vector<std::uint32_t> encode(std::string_view document, const Vocabulary& vocab,
                                  std::size_t length) {
  if (length == 0) throw UsageError("sequence length must be at least 1");
  std::vector<std::uint32_t> out;
  out.reserve(length);
  for (const auto& tok : tokenize(document)) {
    if (out.size() == length) break;
    out.push_back(vocab.id(tok));
  }
  out.resize(length, kPadId);
  return out;
}

Corpus::Corpus(std::size_t length, std::size_t vocab_size,
               std::vector<std::vector<std::uint32_t>> sequences)
    : num_items_(sequences.size()), length_(length), vocab_size_(vocab_size) {
  if (length == 0) throw UsageError("corpus sequence length must be at least 1");
  ids_.reserve(num_items_ * length_);
  for (const auto& seq : sequences) {
    if (seq.size() != length_) throw DataError("corpus row has the wrong length");
    for (const auto id : seq) {
      if (id >= vocab_size_) throw DataError("corpus token id outside the vocabulary");
    }
    ids_.insert(ids_.end(), seq.begin(), seq.end());
  }
}

Corpus encode_corpus(std::span<const std::string> documents, const Vocabulary& vocab,
                     std::size_t length) {
  std::vector<std::vector<std::uint32_t>> rows;
  rows.reserve(documents.size());
  for (const auto& doc : documents) rows.push_back(encode(doc, vocab, length));
  return Corpus(length, vocab.size(), std::move(rows));
}

std::unordered_map<std::int64_t, std::string> read_documents(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::unordered_map<std::int64_t, std::string> docs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    std::int64_t id = 0;
    if (tab == std::string::npos ||
        std::from_chars(line.data(), line.data() + tab, id).ec != std::errc()) {
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": expected raw_item_id<TAB>text");
    }
    docs[id] = line.substr(tab + 1);
  }
  return docs;
}

void write_documents(const std::filesystem::path& path, std::span<const std::int64_t> item_ids,
                     std::span<const std::string> documents) {
  if (item_ids.size() != documents.size()) throw UsageError("ids and documents differ in length");
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (std::size_t k = 0; k < documents.size(); ++k) {
    out << item_ids[k] << '\t' << documents[k] << '\n';
  }
}

std::vector<std::string> align_documents(
    const RatingDataset& data, const std::unordered_map<std::int64_t, std::string>& docs,
    std::size_t* missing) {
  std::vector<std::string> out(data.num_items());
  std::size_t absent = 0;
  for (std::size_t j = 0; j < out.size(); ++j) {
    const std::int64_t key =
        data.item_ids().empty() ? static_cast<std::int64_t>(j) : data.item_ids()[j];
    if (const auto it = docs.find(key); it != docs.end()) {
      out[j] = it->second;
    } else {
      ++absent;
    }
  }
  if (missing != nullptr) *missing = absent;
  return out;
}

}  // namespace debias_mf
