#include "midilm/align/vocab.h"

#include <algorithm>
#include <unordered_map>

#include "json.hpp"
#include "midilm/textmetrics.h"

namespace midilm::align {

TextVocab TextVocab::build(const std::vector<std::string>& texts, int max_size) {
  if (max_size < kFirstWord) {
    throw AlignError(AlignErrc::InvalidConfig, "vocabulary needs at least " + std::to_string(kFirstWord) + " ids");
  }
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& t : texts) {
    for (auto& tok : metrics::tokenize_text(t)) ++counts[tok];
  }
  std::vector<std::pair<std::string, std::size_t>> ordered(counts.begin(), counts.end());
  std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  TextVocab v;
  const auto capacity = static_cast<std::size_t>(max_size - kFirstWord);
  for (std::size_t i = 0; i < ordered.size() && i < capacity; ++i) {
    v.index_[ordered[i].first] = kFirstWord + static_cast<int>(v.words_.size());
    v.words_.push_back(ordered[i].first);
  }
  return v;
}

std::vector<int> TextVocab::encode(const std::string& text) const {
  std::vector<int> ids;
  for (const auto& tok : metrics::tokenize_text(text)) {
    auto it = index_.find(tok);
    if (it != index_.end()) {
      ids.push_back(it->second);
    } else {
      for (unsigned char c : tok) ids.push_back(kFirstByte + c);
    }
  }
  return ids;
}

std::string TextVocab::decode(const std::vector<int>& ids) const {
  std::string out;
  bool in_bytes = false;
  for (int id : ids) {
    if (id < kFirstByte || id >= size()) {
      in_bytes = false;
      continue;
    }
    if (id < kFirstWord) {
      if (!in_bytes && !out.empty()) out += ' ';
      out += static_cast<char>(id - kFirstByte);
      in_bytes = true;
    } else {
      if (!out.empty()) out += ' ';
      out += words_[static_cast<std::size_t>(id - kFirstWord)];
      in_bytes = false;
    }
  }
  return out;
}

std::string TextVocab::to_json() const {
  nlohmann::ordered_json j;
  j["format"] = "midilm-vocab-1";
  j["specials"] = {"<pad>", "<bos>", "<eos>", "<sep>"};
  j["byte_fallback"] = 256;
  j["words"] = words_;
  return j.dump(1);
}

TextVocab TextVocab::from_json(const std::string& text) {
  TextVocab v;
  try {
    auto j = nlohmann::json::parse(text);
    for (const auto& w : j.at("words")) {
      v.index_[w.get<std::string>()] = kFirstWord + static_cast<int>(v.words_.size());
      v.words_.push_back(w.get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw AlignError(AlignErrc::BadWeights, std::string("bad vocabulary file: ") + e.what());
  }
  return v;
}

TrainExample make_example(const std::string& id, const Vec& pooled, const std::string& question,
                          const std::string& answer, const TextVocab& vocab) {
  TrainExample ex;
  ex.id = id;
  ex.pooled = pooled;
  ex.ids = make_prompt(question, vocab);
  ex.mask.assign(ex.ids.size(), 0);
  for (int a : vocab.encode(answer)) {
    ex.ids.push_back(a);
    ex.mask.push_back(1);
  }
  ex.ids.push_back(TextVocab::kEos);
  ex.mask.push_back(1);
  return ex;
}

std::vector<int> make_prompt(const std::string& question, const TextVocab& vocab) {
  std::vector<int> ids{TextVocab::kBos};
  for (int q : vocab.encode(question)) ids.push_back(q);
  ids.push_back(TextVocab::kSep);
  return ids;
}

}  // namespace midilm::align
