#include "midilm/abc.h"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace midilm::abc {

namespace {

constexpr std::array<char, 7> kLetters = {'C', 'D', 'E', 'F', 'G', 'A', 'B'};
constexpr std::array<int, 7> kNaturalPc = {0, 2, 4, 5, 7, 9, 11};
constexpr int kGrid = 8;  // 32nd notes per quarter
constexpr int kUnit = 4;  // 32nds per L:1/8

/// Number of sharps (> 0) or flats (< 0) in the signature of a major key.
int fifths_of_major(int pc) {
  static constexpr std::array<int, 12> kFifths = {0, -5, 2, -3, 4, -1, 6, 1, -4, 3, -2, 5};
  return kFifths[static_cast<std::size_t>(pc)];
}

struct KeySignature {
  std::array<int, 7> alteration{};  // per letter index
  bool flats = false;

  explicit KeySignature(const features::Key& key) {
    int major = key.mode == features::Mode::Major ? key.tonic : (key.tonic + 3) % 12;
    int fifths = fifths_of_major(major);
    flats = fifths < 0;
    static constexpr std::array<int, 7> kSharpOrder = {3, 0, 4, 1, 5, 2, 6};  // F C G D A E B
    static constexpr std::array<int, 7> kFlatOrder = {6, 2, 5, 1, 4, 0, 3};   // B E A D G C F
    for (int i = 0; i < std::abs(fifths); ++i) {
      if (fifths > 0) {
        alteration[static_cast<std::size_t>(kSharpOrder[static_cast<std::size_t>(i)])] = 1;
      } else {
        alteration[static_cast<std::size_t>(kFlatOrder[static_cast<std::size_t>(i)])] = -1;
      }
    }
  }
};

struct Spelling {
  int letter = 0;  // index into kLetters
  int alteration = 0;
  int octave = 4;  // scientific pitch octave of the letter
};

Spelling spell(int midi_pitch, const KeySignature& sig) {
  const int pc = midi_pitch % 12;
  int letter = -1;
  int alt = 0;
  for (int l = 0; l < 7 && letter < 0; ++l) {
    int a = sig.alteration[static_cast<std::size_t>(l)];
    if ((kNaturalPc[static_cast<std::size_t>(l)] + a + 12) % 12 == pc) {
      letter = l;
      alt = a;
    }
  }
  for (int l = 0; l < 7 && letter < 0; ++l) {
    if (kNaturalPc[static_cast<std::size_t>(l)] == pc) letter = l;
  }
  for (int l = 0; l < 7 && letter < 0; ++l) {
    int target = sig.flats ? (pc + 1) % 12 : (pc + 11) % 12;
    if (kNaturalPc[static_cast<std::size_t>(l)] == target) {
      letter = l;
      alt = sig.flats ? -1 : 1;
    }
  }
  int base = midi_pitch - alt - kNaturalPc[static_cast<std::size_t>(letter)];
  return Spelling{letter, alt, base / 12 - 1};
}

std::string multiplier(long long thirty_seconds) {
  long long num = thirty_seconds;
  long long den = kUnit;
  long long g = std::gcd(num, den);
  num /= g;
  den /= g;
  if (den == 1) return num == 1 ? "" : std::to_string(num);
  return (num == 1 ? "" : std::to_string(num)) + "/" + std::to_string(den);
}

std::string note_text(const Spelling& s, long long duration, std::map<std::pair<int, int>, int>& bar_state,
                      const KeySignature& sig) {
  std::string out;
  auto key = std::make_pair(s.letter, s.octave);
  auto it = bar_state.find(key);
  int current = it != bar_state.end() ? it->second : sig.alteration[static_cast<std::size_t>(s.letter)];
  if (current != s.alteration) {
    switch (s.alteration) {
      case -2: out += "__"; break;
      case -1: out += "_"; break;
      case 0: out += "="; break;
      case 1: out += "^"; break;
      default: out += "^^"; break;
    }
    bar_state[key] = s.alteration;
  }
  char letter = kLetters[static_cast<std::size_t>(s.letter)];
  if (s.octave >= 5) {
    out += static_cast<char>(std::tolower(letter));
    out.append(static_cast<std::size_t>(s.octave - 5), '\'');
  } else {
    out += letter;
    out.append(static_cast<std::size_t>(4 - s.octave), ',');
  }
  out += multiplier(duration);
  return out;
}

struct QNote {
  long long on = 0;
  long long off = 0;
  int pitch = 0;
};

std::string render_voice(std::vector<QNote> notes, long long bar_len, const KeySignature& sig) {
  std::sort(notes.begin(), notes.end(), [](const QNote& a, const QNote& b) {
    return std::tie(a.on, a.pitch, a.off) < std::tie(b.on, b.pitch, b.off);
  });
  long long last = 0;
  std::set<long long> cuts;
  for (const auto& n : notes) {
    cuts.insert(n.on);
    cuts.insert(n.off);
    last = std::max(last, n.off);
  }
  for (long long b = 0; b <= last; b += bar_len) cuts.insert(b);
  std::vector<long long> bounds(cuts.begin(), cuts.end());

  std::ostringstream body;
  std::map<std::pair<int, int>, int> bar_state;
  int bars_on_line = 0;
  bool need_space = false;
  for (std::size_t i = 0; i + 1 < bounds.size(); ++i) {
    const long long from = bounds[i];
    const long long to = bounds[i + 1];
    if (from > 0 && from % bar_len == 0) {
      body << " |";
      bar_state.clear();
      if (++bars_on_line == 4) {
        body << '\n';
        bars_on_line = 0;
        need_space = false;
      } else {
        need_space = true;
      }
    }
    if (need_space) body << ' ';
    need_space = true;
    std::vector<const QNote*> sounding;
    for (const auto& n : notes) {
      if (n.on <= from && from < n.off) sounding.push_back(&n);
    }
    if (sounding.empty()) {
      body << 'z' << multiplier(to - from);
      continue;
    }
    if (sounding.size() > 1) body << '[';
    for (const QNote* n : sounding) {
      body << note_text(spell(n->pitch, sig), to - from, bar_state, sig);
      if (n->off > to) body << '-';
    }
    if (sounding.size() > 1) body << ']';
  }
  body << " |";
  return body.str();
}

}  // namespace

std::string key_field(const features::Key& key) {
  return features::tonic_name(key.tonic, key.mode) + (key.mode == features::Mode::Minor ? "m" : "");
}

AbcDocument to_abc(const midi::MidiPiece& piece, std::optional<features::Key> key_hint) {
  if (piece.notes.empty()) throw AbcError(AbcErrc::EmptyPiece, "piece has no notes");
  const auto& tl = piece.timeline;
  const features::Key key = key_hint ? *key_hint : features::estimate_key(piece);
  const midi::TimeSignature meter = features::dominant_time_signature(tl);
  const long long tpq = tl.ticks_per_quarter;

  AbcDocument doc;
  std::string title = piece.title.value_or("Untitled");
  std::replace(title.begin(), title.end(), '\n', ' ');
  std::replace(title.begin(), title.end(), '\r', ' ');
  doc.header = {{'X', "1"},
                {'T', title},
                {'M', std::to_string(meter.numerator) + "/" + std::to_string(meter.denominator)},
                {'L', "1/8"},
                {'Q', "1/4=" + std::to_string(std::lround(features::estimate_tempo(tl)))},
                {'K', key_field(key)}};
  doc.loss_report.dropped_tempo_changes = tl.tempo_map.empty() ? 0 : tl.tempo_map.size() - 1;
  doc.loss_report.dropped_timesig_changes = tl.timesig_map.empty() ? 0 : tl.timesig_map.size() - 1;

  auto quantize = [&](long long tick) { return (2 * tick * kGrid + tpq) / (2 * tpq); };
  auto on_grid = [&](long long tick) { return (tick * kGrid) % tpq == 0; };
  const long long bar_len = std::max<long long>(1, meter.numerator * 32LL / meter.denominator);

  std::map<int, std::vector<QNote>> by_track;
  for (const auto& n : piece.notes) {
    QNote q{quantize(n.onset_tick), quantize(n.end_tick()), n.pitch};
    bool moved = !on_grid(n.onset_tick) || !on_grid(n.end_tick());
    if (q.off <= q.on) {
      q.off = q.on + 1;
      moved = true;
    }
    if (moved) ++doc.loss_report.quantized_notes;
    by_track[n.track].push_back(q);
  }

  const KeySignature sig(key);
  for (auto& [track, notes] : by_track) {
    doc.voices.push_back(AbcVoice{std::to_string(track + 1), render_voice(std::move(notes), bar_len, sig)});
  }
  return doc;
}

std::string AbcDocument::render() const {
  std::string out;
  for (const auto& [field, value] : header) {
    out += field;
    out += ':';
    out += value;
    out += '\n';
  }
  for (const auto& v : voices) {
    out += "V:" + v.id + "\n";
    out += v.body;
    out += '\n';
  }
  return out;
}

std::vector<Violation> validate_abc(const AbcDocument& doc) { return validate_abc_text(doc.render()); }

namespace {

bool is_int(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

bool is_fraction(const std::string& s) {
  auto slash = s.find('/');
  return slash != std::string::npos && is_int(s.substr(0, slash)) && is_int(s.substr(slash + 1)) &&
         std::stol(s.substr(slash + 1)) > 0;
}

std::string check_header_value(char field, const std::string& value) {
  switch (field) {
    case 'X':
      return is_int(value) ? "" : "X: expects an integer";
    case 'T':
      return "";
    case 'M':
      return is_fraction(value) ? "" : "M: expects n/d";
    case 'L':
      return is_fraction(value) && value.rfind("1/", 0) == 0 ? "" : "L: expects 1/n";
    case 'Q': {
      auto eq = value.find('=');
      if (eq == std::string::npos) return is_int(value) ? "" : "Q: expects 1/4=n";
      return is_fraction(value.substr(0, eq)) && is_int(value.substr(eq + 1)) ? "" : "Q: expects 1/4=n";
    }
    case 'K':
      try {
        features::parse_key(value);
        return "";
      } catch (const Error&) {
        return "K: unknown key '" + value + "'";
      }
    default:
      return "unexpected header field";
  }
}

class BodyScanner {
 public:
  BodyScanner(const std::string& line, int line_no, std::vector<Violation>& out)
      : s_(line), line_(line_no), out_(out) {}

  void run() {
    bool after_note = false;
    while (i_ < s_.size()) {
      char c = s_[i_];
      if (c == ' ' || c == '\t') {
        ++i_;
        after_note = false;
      } else if (c == '|') {
        ++i_;
        after_note = false;
      } else if (c == '-') {
        if (!after_note) report("tie without a preceding note");
        ++i_;
        after_note = false;
      } else if (c == '[') {
        after_note = chord();
      } else if (c == ']') {
        report("unbalanced ']'");
        ++i_;
        after_note = false;
      } else if (c == 'z') {
        ++i_;
        duration();
        after_note = false;
      } else if (starts_note(c)) {
        after_note = note();
      } else {
        report(std::string("invalid character '") + c + "'");
        skip_word();
        after_note = false;
      }
    }
  }

 private:
  static bool is_letter(char c) { return (c >= 'A' && c <= 'G') || (c >= 'a' && c <= 'g'); }
  static bool starts_note(char c) { return is_letter(c) || c == '^' || c == '_' || c == '='; }

  void report(const std::string& message, std::size_t at = std::string::npos) {
    out_.push_back(Violation{line_, static_cast<int>((at == std::string::npos ? i_ : at) + 1), message});
  }

  void skip_word() {
    while (i_ < s_.size() && s_[i_] != ' ' && s_[i_] != '\t' && s_[i_] != '|') ++i_;
  }

  bool duration() {
    std::size_t start = i_;
    bool any_digit = false;
    bool zero = false;
    std::string num;
    while (i_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[i_]))) num += s_[i_++];
    if (!num.empty()) {
      any_digit = true;
      zero = std::stol(num) == 0;
    }
    if (i_ < s_.size() && s_[i_] == '/') {
      ++i_;
      std::string den;
      while (i_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[i_]))) den += s_[i_++];
      if (!den.empty() && std::stol(den) == 0) {
        report("zero denominator", start);
        return false;
      }
    }
    if (any_digit && zero) {
      report("zero duration", start);
      return false;
    }
    return true;
  }

  bool note() {
    std::size_t start = i_;
    if (s_[i_] == '^' || s_[i_] == '_') {
      char acc = s_[i_++];
      if (i_ < s_.size() && s_[i_] == acc) ++i_;
    } else if (s_[i_] == '=') {
      ++i_;
    }
    if (i_ >= s_.size() || !is_letter(s_[i_])) {
      report("accidental without a pitch letter", start);
      skip_word();
      return false;
    }
    ++i_;
    while (i_ < s_.size() && (s_[i_] == ',' || s_[i_] == '\'')) ++i_;
    return duration();
  }

  bool chord() {
    std::size_t open = i_++;
    int notes = 0;
    while (true) {
      if (i_ >= s_.size()) {
        report("unbalanced '['", open);
        return false;
      }
      char c = s_[i_];
      if (c == ']') {
        ++i_;
        if (notes == 0) {
          report("empty chord", open);
          return false;
        }
        return true;
      }
      if (starts_note(c)) {
        if (!note()) return false;
        ++notes;
        if (i_ < s_.size() && s_[i_] == '-') ++i_;
        continue;
      }
      report("unbalanced '['", open);
      return false;
    }
  }

  const std::string& s_;
  int line_;
  std::vector<Violation>& out_;
  std::size_t i_ = 0;
};

}  // namespace

std::vector<Violation> validate_abc_text(const std::string& text) {
  std::vector<Violation> out;
  std::vector<std::string> lines;
  {
    std::string cur;
    for (char c : text) {
      if (c == '\n') {
        lines.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    if (!cur.empty()) lines.push_back(cur);
  }
  static constexpr std::array<char, 6> kOrder = {'X', 'T', 'M', 'L', 'Q', 'K'};
  std::size_t ln = 0;
  for (char field : kOrder) {
    if (ln >= lines.size() || lines[ln].size() < 2 || lines[ln][0] != field || lines[ln][1] != ':') {
      out.push_back(Violation{static_cast<int>(ln + 1), 1, std::string("expected header field ") + field + ":"});
      continue;
    }
    std::string problem = check_header_value(field, lines[ln].substr(2));
    if (!problem.empty()) out.push_back(Violation{static_cast<int>(ln + 1), 3, problem});
    ++ln;
  }
  for (; ln < lines.size(); ++ln) {
    const std::string& line = lines[ln];
    if (line.rfind("V:", 0) == 0) {
      if (line.size() == 2) out.push_back(Violation{static_cast<int>(ln + 1), 3, "voice marker without an id"});
      continue;
    }
    if (!line.empty() && line.back() == '\r') {
      out.push_back(Violation{static_cast<int>(ln + 1), static_cast<int>(line.size()), "CR line ending"});
    }
    BodyScanner(line, static_cast<int>(ln + 1), out).run();
  }
  return out;
}

}  // namespace midilm::abc
