#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"

#include "debias_mf/data.hpp"
#include "debias_mf/error.hpp"
#include "debias_mf/textprep.hpp"

using namespace debias_mf;
namespace fs = std::filesystem;

TEST_CASE("tokenize lowercases and splits on non-alphanumeric runs") {
  CHECK(tokenize("Hello, World!! 42x") == std::vector<std::string>{"hello", "world", "42x"});
  CHECK(tokenize("  ...  ").empty());
}

TEST_CASE("vocabulary ranks by frequency with lexicographic ties") {
  const std::vector<std::string> docs = {"a a b", "b c"};
  const auto vocab = build_vocabulary(docs, 2);
  CHECK(vocab.size() == 4);
  CHECK(vocab.id("a") == 2);
  CHECK(vocab.id("b") == 3);
  CHECK(vocab.id("c") == kUnknownId);
  CHECK(vocab.token(kPadId) == "<pad>");

  const auto specials = build_vocabulary(docs, 0);
  CHECK(specials.size() == 2);

  const std::vector<std::string> empty = {"", "  "};
  CHECK_THROWS_AS(build_vocabulary(empty, 10), DataError);
}

TEST_CASE("vocabulary size counts distinct tokens up to the cap") {
  std::vector<std::string> docs;
  for (int k = 0; k < 120; ++k) docs.push_back("tok" + std::to_string(k) + " common");
  CHECK(build_vocabulary(docs, 50).size() == 52);
  CHECK(build_vocabulary(docs, 1000).size() == 121 + 2);
  CHECK(build_vocabulary(docs, 1).id("common") == 2);
}

TEST_CASE("encode pads, truncates and maps unknowns") {
  const std::vector<std::string> docs = {"a b"};
  const auto vocab = build_vocabulary(docs, 10);
  CHECK(encode("", vocab, 5) == std::vector<std::uint32_t>{0, 0, 0, 0, 0});
  CHECK(encode("x y", vocab, 3) == std::vector<std::uint32_t>{1, 1, 0});
  CHECK(encode("b a b a", vocab, 2) == std::vector<std::uint32_t>{vocab.id("b"), vocab.id("a")});

  std::string long_doc;
  for (int k = 0; k < 600; ++k) long_doc += (k % 2 ? "a " : "b ");
  const auto ids = encode(long_doc, vocab, 500);
  CHECK(ids.size() == 500);
  CHECK(ids.front() == vocab.id("b"));
  CHECK(std::count(ids.begin(), ids.end(), kPadId) == 0);
}

TEST_CASE("known tokens within the length survive encoding") {
  const std::vector<std::string> docs = {"the quick brown fox", "lazy dog"};
  const auto vocab = build_vocabulary(docs, 100);
  const auto ids = encode(docs[0], vocab, 6);
  const auto tokens = tokenize(docs[0]);
  for (std::size_t t = 0; t < tokens.size(); ++t) CHECK(vocab.token(ids[t]) == tokens[t]);
}

TEST_CASE("vocabulary save and load round trip") {
  const std::vector<std::string> docs = {"alpha beta beta gamma"};
  const auto vocab = build_vocabulary(docs, 10);
  const auto path = fs::temp_directory_path() / "debias_mf_vocab.tsv";
  vocab.save(path);
  const auto back = Vocabulary::load(path);
  CHECK(back.size() == vocab.size());
  CHECK(back.id("beta") == vocab.id("beta"));
  CHECK(back.id("zeta") == kUnknownId);
}

TEST_CASE("corpus encoding and document alignment by raw id") {
  const auto path = fs::temp_directory_path() / "debias_mf_docs.tsv";
  std::ofstream(path) << "7\tseven text\n3\tthree text\n";
  const auto docs = read_documents(path);
  CHECK(docs.size() == 2);

  RatingDataset data(1, 3, {{0, 0, 1.0}, {0, 1, 1.0}, {0, 2, 1.0}});
  data.set_ids({1}, {3, 5, 7});
  std::size_t missing = 0;
  const auto aligned = align_documents(data, docs, &missing);
  CHECK(missing == 1);
  CHECK(aligned[0] == "three text");
  CHECK(aligned[1].empty());
  CHECK(aligned[2] == "seven text");

  const auto vocab = build_vocabulary(aligned, 10);
  const auto corpus = encode_corpus(aligned, vocab, 4);
  CHECK(corpus.num_items() == 3);
  CHECK(corpus.sequence(1)[0] == kPadId);
  for (std::size_t j = 0; j < 3; ++j) {
    for (auto id : corpus.sequence(j)) CHECK(id < vocab.size());
  }
}
