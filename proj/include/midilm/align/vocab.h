#pragma once

// Word vocabulary with byte fallback, built from a training corpus.

#include <map>
#include <string>
#include <vector>

#include "midilm/align/train.h"

namespace midilm::align {

class TextVocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kSep = 3;
  static constexpr int kFirstByte = 4;
  static constexpr int kFirstWord = kFirstByte + 256;

  TextVocab() = default;

  /// Words of `texts` (after tokenize_text) ordered by descending count, then
  /// lexicographically, until max_size ids are used.
  static TextVocab build(const std::vector<std::string>& texts, int max_size = 512);

  int size() const { return kFirstWord + static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

  /// Known words map to one id; other tokens are spelled as byte ids.
  std::vector<int> encode(const std::string& text) const;
  /// Words joined by single spaces; runs of byte ids form one word.
  std::string decode(const std::vector<int>& ids) const;

  std::string to_json() const;
  static TextVocab from_json(const std::string& text);

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

/// [BOS question SEP answer EOS] with the answer and EOS masked in.
TrainExample make_example(const std::string& id, const Vec& pooled, const std::string& question,
                          const std::string& answer, const TextVocab& vocab);

/// [BOS question SEP], the decoding prompt.
std::vector<int> make_prompt(const std::string& question, const TextVocab& vocab);

}  // namespace midilm::align
