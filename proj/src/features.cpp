#include "midilm/features.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>

namespace midilm::features {

double estimate_tempo(const midi::Timeline& timeline) {
  const auto& map = timeline.tempo_map;
  if (map.empty()) return 60'000'000.0 / midi::kDefaultUsPerQuarter;
  if (timeline.end_tick <= 0) return map.front().bpm();
  double weighted = 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < map.size() && map[i].tick < timeline.end_tick; ++i) {
    midi::Tick stop = i + 1 < map.size() ? std::min(map[i + 1].tick, timeline.end_tick) : timeline.end_tick;
    double seconds = static_cast<double>(stop - map[i].tick) * map[i].us_per_quarter /
                     (timeline.ticks_per_quarter * 1e6);
    weighted += seconds * map[i].bpm();
    total += seconds;
  }
  return weighted / total;
}

std::array<double, 12> pitch_class_histogram(const midi::MidiPiece& piece) {
  std::array<double, 12> hist{};
  for (const auto& n : piece.notes) hist[static_cast<std::size_t>(n.pitch % 12)] += static_cast<double>(n.duration_tick);
  return hist;
}

double key_correlation(const std::array<double, 12>& histogram, int tonic, Mode mode) {
  const auto& profile = mode == Mode::Major ? kMajorProfile : kMinorProfile;
  // Summation runs in tonic-relative order so transposed inputs give
  // bit-identical correlations.
  auto h = [&](int j) { return histogram[static_cast<std::size_t>((j + tonic) % 12)]; };
  double mean_h = 0.0;
  double mean_p = 0.0;
  for (int j = 0; j < 12; ++j) {
    mean_h += h(j);
    mean_p += profile[static_cast<std::size_t>(j)];
  }
  mean_h /= 12.0;
  mean_p /= 12.0;
  double cov = 0.0;
  double var_h = 0.0;
  double var_p = 0.0;
  for (int j = 0; j < 12; ++j) {
    double dh = h(j) - mean_h;
    double dp = profile[static_cast<std::size_t>(j)] - mean_p;
    cov += dh * dp;
    var_h += dh * dh;
    var_p += dp * dp;
  }
  if (var_h <= 0.0) return 0.0;
  return cov / std::sqrt(var_h * var_p);
}

Key estimate_key(const midi::MidiPiece& piece) {
  if (piece.notes.empty()) throw FeatureError(FeatureErrc::EmptyPiece, "key estimation needs at least one note");
  auto hist = pitch_class_histogram(piece);
  Key best;
  best.confidence = -INFINITY;
  for (Mode mode : {Mode::Major, Mode::Minor}) {
    for (int tonic = 0; tonic < 12; ++tonic) {
      double r = key_correlation(hist, tonic, mode);
      if (r > best.confidence) best = Key{tonic, mode, r};
    }
  }
  return best;
}

midi::TimeSignature dominant_time_signature(const midi::Timeline& timeline) {
  const auto& map = timeline.timesig_map;
  if (map.empty()) return {4, 4};
  std::vector<std::pair<midi::TimeSignature, midi::Tick>> totals;  // first-occurrence order
  for (std::size_t i = 0; i < map.size(); ++i) {
    midi::Tick start = std::min(map[i].tick, timeline.end_tick);
    midi::Tick stop = i + 1 < map.size() ? std::min(map[i + 1].tick, timeline.end_tick) : timeline.end_tick;
    auto it = std::find_if(totals.begin(), totals.end(), [&](const auto& t) { return t.first == map[i].sig; });
    if (it == totals.end()) {
      totals.emplace_back(map[i].sig, stop - start);
    } else {
      it->second += stop - start;
    }
  }
  auto best = totals.begin();
  for (auto it = totals.begin(); it != totals.end(); ++it) {
    if (it->second > best->second) best = it;
  }
  return best->first;
}

FeatureSummary summarize(const midi::MidiPiece& piece) {
  FeatureSummary s;
  s.tempo_bpm = estimate_tempo(piece.timeline);
  s.key = estimate_key(piece);
  s.timesig = dominant_time_signature(piece.timeline);
  s.duration_s = midi::duration_seconds(piece);
  return s;
}

namespace {

constexpr std::array<const char*, 12> kSharpNames = {"C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"};
constexpr std::array<const char*, 12> kFlatNames = {"C", "Db", "D", "Eb", "E", "F", "Gb", "G", "Ab", "A", "Bb", "B"};

}  // namespace

std::string tonic_name(int pitch_class, Mode mode) {
  pitch_class = ((pitch_class % 12) + 12) % 12;
  // Relative major decides sharps vs flats; six-accidental keys use sharps.
  int major = mode == Mode::Major ? pitch_class : (pitch_class + 3) % 12;
  static constexpr std::array<bool, 12> kFlatMajor = {false, true, false, true, false, true,
                                                      false, true, true, false, true, false};
  return kFlatMajor[static_cast<std::size_t>(major)] ? kFlatNames[static_cast<std::size_t>(pitch_class)]
                                                     : kSharpNames[static_cast<std::size_t>(pitch_class)];
}

std::string key_name(const Key& key) {
  return tonic_name(key.tonic, key.mode) + (key.mode == Mode::Major ? " major" : " minor");
}

Key parse_key(const std::string& text) {
  std::string s;
  for (char c : text) {
    if (!std::isspace(static_cast<unsigned char>(c))) s.push_back(c);
  }
  if (s.empty()) throw FeatureError(FeatureErrc::InvalidKey, "empty key");
  static const std::map<char, int> kLetters = {{'C', 0}, {'D', 2}, {'E', 4}, {'F', 5}, {'G', 7}, {'A', 9}, {'B', 11}};
  auto letter = kLetters.find(static_cast<char>(std::toupper(static_cast<unsigned char>(s[0]))));
  if (letter == kLetters.end()) throw FeatureError(FeatureErrc::InvalidKey, "bad key tonic in '" + text + "'");
  int pc = letter->second;
  std::size_t i = 1;
  if (i < s.size() && s[i] == '#') {
    ++pc;
    ++i;
  } else if (i < s.size() && s[i] == 'b') {
    --pc;
    ++i;
  }
  std::string rest = s.substr(i);
  std::transform(rest.begin(), rest.end(), rest.begin(), [](unsigned char c) { return std::tolower(c); });
  Mode mode;
  if (rest.empty() || rest == "major" || rest == "maj") {
    mode = Mode::Major;
  } else if (rest == "m" || rest == "min" || rest == "minor") {
    mode = Mode::Minor;
  } else {
    throw FeatureError(FeatureErrc::InvalidKey, "bad key mode in '" + text + "'");
  }
  return Key{((pc % 12) + 12) % 12, mode, 0.0};
}

}  // namespace midilm::features
