#include "midilm/annotate.h"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "json.hpp"
#include "midilm/align/rng.h"
#include "midilm/io.h"

namespace midilm::annotate {
namespace {

using ojson = nlohmann::ordered_json;

constexpr std::array<TagSource, 8> kAllSources = {
    TagSource::Genre,           TagSource::Style, TagSource::Background, TagSource::ExpressiveIntent,
    TagSource::PerceivedEmotion, TagSource::Tempo, TagSource::Key,        TagSource::TimeSignature};

std::string trim(const std::string& s) {
  const auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
  auto b = std::find_if_not(s.begin(), s.end(), is_space);
  auto e = std::find_if_not(s.rbegin(), s.rend(), is_space).base();
  return b < e ? std::string(b, e) : std::string();
}

bool is_tag_field(TagSource s) { return static_cast<int>(s) < 5; }

ojson features_to_json(const features::FeatureSummary& f) {
  ojson j;
  j["tempo_bpm"] = f.tempo_bpm;
  j["key"] = features::key_name(f.key);
  j["key_confidence"] = f.key.confidence;
  j["time_signature"] = {f.timesig.numerator, f.timesig.denominator};
  j["duration_s"] = f.duration_s;
  return j;
}

features::FeatureSummary features_from_json(const ojson& j) {
  features::FeatureSummary f;
  f.tempo_bpm = j.at("tempo_bpm").get<double>();
  f.key = features::parse_key(j.at("key").get<std::string>());
  f.key.confidence = j.value("key_confidence", 0.0);
  const auto& ts = j.at("time_signature");
  f.timesig = {ts.at(0).get<int>(), ts.at(1).get<int>()};
  f.duration_s = j.value("duration_s", 0.0);
  return f;
}

ojson parse_line(const std::string& line, const char* what) {
  try {
    ojson j = ojson::parse(line);
    if (!j.is_object()) throw AnnotateError(AnnotateErrc::InvalidInput, std::string(what) + ": not a JSON object");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw AnnotateError(AnnotateErrc::InvalidInput, std::string(what) + ": " + e.what());
  }
}

/// Index of the closing brace matching the first '{', honoring JSON strings.
std::optional<std::pair<std::size_t, std::size_t>> first_brace_span(const std::string& text) {
  const std::size_t open = text.find('{');
  if (open == std::string::npos) return std::nullopt;
  int depth = 0;
  bool in_string = false;
  bool escaped = false;
  for (std::size_t i = open; i < text.size(); ++i) {
    const char c = text[i];
    if (in_string) {
      if (escaped) escaped = false;
      else if (c == '\\') escaped = true;
      else if (c == '"') in_string = false;
      continue;
    }
    if (c == '"') in_string = true;
    else if (c == '{') ++depth;
    else if (c == '}' && --depth == 0) return std::make_pair(open, i + 1);
  }
  return std::nullopt;
}

std::uint64_t fnv1a(std::uint64_t h, const std::string& s) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

const std::array<std::vector<const char*>, 8> kQuestions = {{
    {"What genre does this music belong to?", "Which genre best describes this piece?",
     "How would you classify the genre of this music?"},
    {"What is the style of this music?", "Which stylistic period or style does this piece reflect?",
     "How would you describe the musical style here?"},
    {"What is the background of this composition?", "Can you tell me about the origin of this piece?",
     "What is known about how this music came to be?"},
    {"What does the composer aim to express in this music?", "What is the expressive intent of this piece?",
     "What is this music trying to convey?"},
    {"What emotion does this music evoke?", "How does this piece make a listener feel?",
     "What mood is perceived in this music?"},
    {"What is the tempo of this music?", "How fast is this piece?", "At roughly what tempo is this music played?"},
    {"What key is this music in?", "Which key is this piece written in?", "What is the tonal center of this music?"},
    {"What is the time signature of this music?", "What meter does this piece use?",
     "How many beats are in each bar of this music?"},
}};

std::string feature_answer(TagSource s, const features::FeatureSummary& f) {
  switch (s) {
    case TagSource::Tempo: return "The tempo is about " + std::to_string(std::lround(f.tempo_bpm)) + " BPM.";
    case TagSource::Key: return "The piece is in " + features::key_name(f.key) + ".";
    case TagSource::TimeSignature:
      return "The time signature is " + std::to_string(f.timesig.numerator) + "/" +
             std::to_string(f.timesig.denominator) + ".";
    default: break;
  }
  throw AnnotateError(AnnotateErrc::InvalidInput, "not a feature field");
}

std::string sentence(const std::string& label, const std::string& value) {
  std::string s = label + ": " + value;
  if (s.back() != '.' && s.back() != '!' && s.back() != '?') s += '.';
  return s;
}

}  // namespace

const char* tag_source_name(TagSource s) {
  switch (s) {
    case TagSource::Genre: return "Genre";
    case TagSource::Style: return "Style";
    case TagSource::Background: return "Background";
    case TagSource::ExpressiveIntent: return "ExpressiveIntent";
    case TagSource::PerceivedEmotion: return "PerceivedEmotion";
    case TagSource::Tempo: return "Tempo";
    case TagSource::Key: return "Key";
    case TagSource::TimeSignature: return "TimeSignature";
  }
  return "?";
}

TagSource parse_tag_source(const std::string& name) {
  for (TagSource s : kAllSources)
    if (name == tag_source_name(s)) return s;
  throw AnnotateError(AnnotateErrc::InvalidInput, "unknown tag source '" + name + "'");
}

const char* grounding_name(Grounding g) { return g == Grounding::Piece ? "Piece" : "Clip"; }

Grounding parse_grounding(const std::string& name) {
  if (name == "Piece") return Grounding::Piece;
  if (name == "Clip") return Grounding::Clip;
  throw AnnotateError(AnnotateErrc::InvalidInput, "unknown grounding '" + name + "'");
}

const std::string& AnnotationRecord::tag(TagSource source) const {
  return const_cast<AnnotationRecord*>(this)->tag(source);
}

std::string& AnnotationRecord::tag(TagSource source) {
  switch (source) {
    case TagSource::Genre: return genre;
    case TagSource::Style: return style;
    case TagSource::Background: return background;
    case TagSource::ExpressiveIntent: return expressive_intent;
    case TagSource::PerceivedEmotion: return perceived_emotion;
    default: break;
  }
  throw AnnotateError(AnnotateErrc::InvalidInput, std::string(tag_source_name(source)) + " is not a tag field");
}

bool AnnotationRecord::valid_tagged() const {
  for (std::size_t i = 0; i < kTagFields.size(); ++i)
    if (tag(kAllSources[i]) != kSentinel) return true;
  return false;
}

std::string AnnotationRecord::to_json() const {
  ojson j;
  j["piece_id"] = piece_id;
  for (std::size_t i = 0; i < kTagFields.size(); ++i) j[kTagFields[i]] = tag(kAllSources[i]);
  j["features"] = features ? features_to_json(*features) : ojson(nullptr);
  j["source_digest"] = source_digest;
  return j.dump();
}

AnnotationRecord AnnotationRecord::from_json(const std::string& line) {
  const ojson j = parse_line(line, "annotation record");
  AnnotationRecord r;
  try {
    r.piece_id = j.at("piece_id").get<std::string>();
    for (std::size_t i = 0; i < kTagFields.size(); ++i) r.tag(kAllSources[i]) = j.at(kTagFields[i]).get<std::string>();
    if (j.contains("features") && !j["features"].is_null()) r.features = features_from_json(j["features"]);
    r.source_digest = j.value("source_digest", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw AnnotateError(AnnotateErrc::InvalidInput, std::string("annotation record: ") + e.what());
  }
  return r;
}

std::string QaPair::to_json() const {
  ojson j;
  j["clip_id"] = clip_id;
  j["question"] = question;
  j["answer"] = answer;
  j["tag_source"] = tag_source_name(tag_source);
  j["grounding"] = grounding_name(grounding);
  return j.dump();
}

QaPair QaPair::from_json(const std::string& line) {
  const ojson j = parse_line(line, "qa pair");
  try {
    QaPair p;
    p.clip_id = j.at("clip_id").get<std::string>();
    p.question = j.at("question").get<std::string>();
    p.answer = j.at("answer").get<std::string>();
    p.tag_source = parse_tag_source(j.at("tag_source").get<std::string>());
    p.grounding = parse_grounding(j.at("grounding").get<std::string>());
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw AnnotateError(AnnotateErrc::InvalidInput, std::string("qa pair: ") + e.what());
  }
}

LlmRequest build_annotation_prompt(const std::string& title, const std::string& composer,
                                   const std::string& source_text) {
  std::string p;
  p += "You annotate classical piano music from reference text.\n";
  p += "Piece title: " + title + "\n";
  p += "Composer: " + composer + "\n\n";
  p += "Using only the source text below, fill in these five fields:\n";
  p += "- genre: the musical genre or form\n";
  p += "- style: the style or period\n";
  p += "- background: the composition background\n";
  p += "- expressive_intent: what the composer intended to express\n";
  p += "- perceived_emotion: the emotion a listener would perceive\n\n";
  p += "If the source text does not support a field, write exactly \"" + std::string(kSentinel) +
       "\" for that field. Do not guess or add outside knowledge.";
  if (source_text.empty()) p += " The source text is empty, so every field must be \"" + std::string(kSentinel) + "\".";
  p += "\n\nReply with a single JSON object and nothing else, using exactly these keys:\n";
  p += "{\"genre\": string, \"style\": string, \"background\": string, \"expressive_intent\": string, "
       "\"perceived_emotion\": string}\n\n";
  p += "Source text:\n<<<\n" + source_text + "\n>>>\n";
  return LlmRequest{p, 0.0, 512};
}

AnnotationRecord parse_annotation_response(const std::string& text, const std::string& piece_id,
                                           const std::optional<features::FeatureSummary>& features,
                                           const std::string& source_digest) {
  const auto span = first_brace_span(text);
  if (!span) throw AnnotateError(AnnotateErrc::MalformedResponse, "response contains no JSON object");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text.substr(span->first, span->second - span->first));
  } catch (const nlohmann::json::exception& e) {
    throw AnnotateError(AnnotateErrc::MalformedResponse, std::string("response object is not JSON: ") + e.what());
  }
  AnnotationRecord r;
  r.piece_id = piece_id;
  r.features = features;
  r.source_digest = source_digest;
  for (std::size_t i = 0; i < kTagFields.size(); ++i) {
    auto it = j.find(kTagFields[i]);
    std::string value = kSentinel;
    if (it != j.end() && it->is_string()) {
      std::string t = trim(it->get<std::string>());
      if (!t.empty()) value = t;
    }
    r.tag(kAllSources[i]) = value;
  }
  return r;
}

std::string sha256_hex(const std::string& data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 computation failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::string source_digest(const std::string& title, const std::string& composer, const std::string& source_text) {
  std::string blob = kTemplateVersion;
  for (const std::string* part : {&title, &composer, &source_text}) {
    blob += '\0';
    blob += std::to_string(part->size());
    blob += ':';
    blob += *part;
  }
  return sha256_hex(blob);
}

std::size_t question_template_count(TagSource source) { return kQuestions[static_cast<std::size_t>(source)].size(); }

std::vector<QaPair> gen_qa(const AnnotationRecord& record, const std::vector<std::string>& clip_ids,
                           std::uint64_t seed, const std::map<std::string, features::FeatureSummary>* clip_features) {
  if (!record.valid_tagged() && !record.features)
    throw AnnotateError(AnnotateErrc::NoContent, "record " + record.piece_id + " has no tags and no features");
  std::vector<QaPair> out;
  for (const std::string& clip : clip_ids) {
    const features::FeatureSummary* feats = record.features ? &*record.features : nullptr;
    Grounding feature_grounding = Grounding::Piece;
    if (clip_features) {
      auto it = clip_features->find(clip);
      if (it != clip_features->end()) {
        feats = &it->second;
        feature_grounding = Grounding::Clip;
      }
    }
    for (TagSource s : kAllSources) {
      std::string answer;
      Grounding g = Grounding::Piece;
      if (is_tag_field(s)) {
        if (record.tag(s) == kSentinel) continue;
        answer = record.tag(s);
      } else {
        if (!feats) continue;
        answer = feature_answer(s, *feats);
        g = feature_grounding;
      }
      std::uint64_t h = 0xCBF29CE484222325ULL;
      for (int b = 0; b < 8; ++b) h = fnv1a(h, std::string(1, static_cast<char>((seed >> (8 * b)) & 0xFF)));
      h = fnv1a(h, clip);
      h = fnv1a(h, std::string(1, '\0'));
      h = fnv1a(h, tag_source_name(s));
      const auto& templates = kQuestions[static_cast<std::size_t>(s)];
      out.push_back(QaPair{clip, templates[h % templates.size()], answer, s, g});
    }
  }
  return out;
}

std::string gen_caption_target(const AnnotationRecord& record) {
  if (!record.valid_tagged())
    throw AnnotateError(AnnotateErrc::NoContent, "record " + record.piece_id + " has no tags for a caption");
  static const std::array<const char*, 5> labels = {"Genre", "Style", "Background", "Expressive intent",
                                                    "Perceived emotion"};
  std::vector<std::string> parts;
  for (std::size_t i = 0; i < kTagFields.size(); ++i) {
    const std::string& v = record.tag(kAllSources[i]);
    if (v != kSentinel) parts.push_back(sentence(labels[i], v));
  }
  if (record.features) {
    const auto& f = *record.features;
    parts.push_back("It is in " + features::key_name(f.key) + " at about " + std::to_string(std::lround(f.tempo_bpm)) +
                    " BPM in " + std::to_string(f.timesig.numerator) + "/" + std::to_string(f.timesig.denominator) +
                    " time.");
  }
  std::string out;
  for (const auto& p : parts) out += (out.empty() ? "" : " ") + p;
  return out;
}

std::string DatasetEntry::to_json() const {
  ojson j;
  j["clip_id"] = clip_id;
  j["piece_id"] = piece_id;
  j["task"] = task;
  j["question"] = question;
  j["answer"] = answer;
  j["tag_source"] = tag_source ? ojson(tag_source_name(*tag_source)) : ojson(nullptr);
  j["grounding"] = grounding_name(grounding);
  return j.dump();
}

DatasetEntry DatasetEntry::from_json(const std::string& line) {
  const ojson j = parse_line(line, "dataset entry");
  try {
    DatasetEntry e;
    e.clip_id = j.at("clip_id").get<std::string>();
    e.piece_id = j.at("piece_id").get<std::string>();
    e.task = j.at("task").get<std::string>();
    e.question = j.at("question").get<std::string>();
    e.answer = j.at("answer").get<std::string>();
    if (!j.at("tag_source").is_null()) e.tag_source = parse_tag_source(j["tag_source"].get<std::string>());
    e.grounding = parse_grounding(j.at("grounding").get<std::string>());
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw AnnotateError(AnnotateErrc::InvalidInput, std::string("dataset entry: ") + ex.what());
  }
}

std::string Dataset::manifest_json() const {
  auto clips = [](const std::vector<DatasetEntry>& es) {
    std::set<std::string> ids;
    for (const auto& e : es) ids.insert(e.clip_id);
    return ids.size();
  };
  ojson j;
  j["template_version"] = kTemplateVersion;
  j["split_seed"] = split_seed;
  j["test_fraction"] = 0.1;
  j["counts"] = {{"train_entries", train.size()}, {"test_entries", test.size()},
                 {"train_clips", clips(train)},   {"test_clips", clips(test)},
                 {"train_pieces", train_pieces.size()}, {"test_pieces", test_pieces.size()}};
  j["train_pieces"] = train_pieces;
  j["test_pieces"] = test_pieces;
  return j.dump(2) + "\n";
}

Dataset assemble_dataset(const std::vector<AnnotationRecord>& records, const std::vector<segment::Clip>& clips,
                         const std::vector<QaPair>& qa, std::uint64_t split_seed) {
  std::map<std::string, const AnnotationRecord*> by_piece;
  for (const auto& r : records)
    if (!by_piece.emplace(r.piece_id, &r).second)
      throw AnnotateError(AnnotateErrc::IdMismatch, "duplicate record for piece " + r.piece_id);

  std::map<std::string, std::vector<const segment::Clip*>> clips_of;
  std::map<std::string, const segment::Clip*> clip_by_id;
  for (const auto& c : clips) {
    if (!by_piece.count(c.piece_id))
      throw AnnotateError(AnnotateErrc::IdMismatch, "clip " + c.clip_id() + " has no annotation record");
    if (!clip_by_id.emplace(c.clip_id(), &c).second)
      throw AnnotateError(AnnotateErrc::IdMismatch, "duplicate clip " + c.clip_id());
    clips_of[c.piece_id].push_back(&c);
  }
  std::map<std::string, std::vector<const QaPair*>> qa_of;
  for (const auto& p : qa) {
    if (!clip_by_id.count(p.clip_id))
      throw AnnotateError(AnnotateErrc::IdMismatch, "qa pair references unknown clip " + p.clip_id);
    qa_of[p.clip_id].push_back(&p);
  }

  Dataset ds;
  ds.split_seed = split_seed;
  std::vector<std::string> pieces;
  for (const auto& [id, r] : by_piece) pieces.push_back(id);
  align::Rng rng(split_seed);
  for (std::size_t i = pieces.size(); i > 1; --i) std::swap(pieces[i - 1], pieces[rng.below(i)]);
  const std::size_t n_test = static_cast<std::size_t>(std::lround(0.1 * static_cast<double>(pieces.size())));
  std::set<std::string> test_set(pieces.begin(), pieces.begin() + static_cast<std::ptrdiff_t>(n_test));

  for (const auto& [id, record] : by_piece) {
    const bool is_test = test_set.count(id) > 0;
    (is_test ? ds.test_pieces : ds.train_pieces).push_back(id);
    auto& out = is_test ? ds.test : ds.train;
    auto cs = clips_of[id];
    std::sort(cs.begin(), cs.end(), [](auto* a, auto* b) { return a->index < b->index; });
    const std::string caption = record->valid_tagged() ? gen_caption_target(*record) : std::string();
    for (const segment::Clip* c : cs) {
      const std::string cid = c->clip_id();
      if (!caption.empty()) out.push_back(DatasetEntry{cid, id, "caption", kCaptionQuestion, caption, std::nullopt, Grounding::Piece});
      for (const QaPair* p : qa_of[cid])
        out.push_back(DatasetEntry{cid, id, "qa", p->question, p->answer, p->tag_source, p->grounding});
    }
  }
  return ds;
}

void write_dataset(const Dataset& dataset, const std::string& dir) {
  auto jsonl = [](const std::vector<DatasetEntry>& es) {
    std::string s;
    for (const auto& e : es) s += e.to_json() + "\n";
    return s;
  };
  io::write_file_atomic(dir + "/train.jsonl", jsonl(dataset.train));
  io::write_file_atomic(dir + "/test.jsonl", jsonl(dataset.test));
  io::write_file_atomic(dir + "/manifest.json", dataset.manifest_json());
}

}  // namespace midilm::annotate
