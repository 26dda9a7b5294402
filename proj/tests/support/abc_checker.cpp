#include "abc_checker.h"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <deque>
#include <sstream>

namespace midilm::testing {

int abc_key_fifths(const std::string& k) {
  static const std::map<std::string, int> kKeys = {
      {"C", 0},    {"G", 1},    {"D", 2},    {"A", 3},    {"E", 4},    {"B", 5},    {"F#", 6},   {"C#", 7},
      {"F", -1},   {"Bb", -2},  {"Eb", -3},  {"Ab", -4},  {"Db", -5},  {"Gb", -6},  {"Cb", -7},  {"Am", 0},
      {"Em", 1},   {"Bm", 2},   {"F#m", 3},  {"C#m", 4},  {"G#m", 5},  {"D#m", 6},  {"A#m", 7},  {"Dm", -1},
      {"Gm", -2},  {"Cm", -3},  {"Fm", -4},  {"Bbm", -5}, {"Ebm", -6}, {"Abm", -7},
  };
  auto it = kKeys.find(k);
  return it == kKeys.end() ? 99 : it->second;
}

namespace {

int letter_pc(char upper) {
  switch (upper) {
    case 'C': return 0;
    case 'D': return 2;
    case 'E': return 4;
    case 'F': return 5;
    case 'G': return 7;
    case 'A': return 9;
    case 'B': return 11;
  }
  return -1;
}

struct Cursor {
  const std::string& s;
  std::size_t i = 0;
  bool done() const { return i >= s.size(); }
  char peek() const { return done() ? '\0' : s[i]; }
};

struct Parsed {
  int pitch = 0;
  std::int64_t duration = 0;
  bool tie = false;
};

std::int64_t read_multiplier(Cursor& c, std::string& error) {
  std::int64_t num = 0, den = 1;
  bool has_num = false;
  while (std::isdigit(static_cast<unsigned char>(c.peek()))) {
    num = num * 10 + (c.s[c.i++] - '0');
    has_num = true;
  }
  if (!has_num) num = 1;
  if (c.peek() == '/') {
    ++c.i;
    den = 0;
    bool has_den = false;
    while (std::isdigit(static_cast<unsigned char>(c.peek()))) {
      den = den * 10 + (c.s[c.i++] - '0');
      has_den = true;
    }
    if (!has_den) den = 2;
  }
  if (den == 0 || (4 * num) % den != 0) {
    error = "duration not on the 1/32 grid";
    return 0;
  }
  return 4 * num / den;  // L:1/8 = four 32nds
}

}  // namespace

AbcReading read_abc(const std::string& text) {
  AbcReading r;
  std::istringstream lines(text);
  std::string line;
  std::vector<std::string> bodies;
  while (std::getline(lines, line)) {
    if (line.size() >= 2 && line[1] == ':' && std::isalpha(static_cast<unsigned char>(line[0]))) {
      if (line[0] == 'V') {
        r.voice_ids.push_back(line.substr(2));
        bodies.emplace_back();
      } else if (bodies.empty()) {
        r.header[line[0]] = line.substr(2);
      } else {
        r.errors.push_back("header field inside a voice body");
      }
    } else if (!bodies.empty()) {
      bodies.back() += line + "\n";
    } else if (!line.empty()) {
      r.errors.push_back("text before the first voice: " + line);
    }
  }
  if (r.header['L'] != "1/8") r.errors.push_back("unit length is not 1/8");
  const int fifths = abc_key_fifths(r.header['K']);
  if (fifths == 99) r.errors.push_back("unknown key " + r.header['K']);
  std::map<char, int> key_acc;
  static const char kSharpOrder[] = "FCGDAEB";
  static const char kFlatOrder[] = "BEADGCF";
  for (int i = 0; i < std::abs(fifths) && fifths != 99; ++i)
    key_acc[fifths > 0 ? kSharpOrder[i] : kFlatOrder[i]] = fifths > 0 ? 1 : -1;

  for (std::size_t v = 0; v < bodies.size(); ++v) {
    Cursor c{bodies[v]};
    std::int64_t now = 0, bar_start = 0;
    std::map<std::pair<char, int>, int> bar_acc;
    std::deque<std::pair<int, std::size_t>> open_ties;  // (pitch, note index) awaiting continuation
    std::vector<std::int64_t> bars;
    std::string error;

    auto read_note = [&](Parsed& out) -> bool {
      int acc = 0;
      bool explicit_acc = false;
      while (c.peek() == '^' || c.peek() == '_' || c.peek() == '=') {
        explicit_acc = true;
        acc += c.peek() == '^' ? 1 : c.peek() == '_' ? -1 : 0;
        ++c.i;
      }
      const char raw = c.peek();
      const char upper = static_cast<char>(std::toupper(static_cast<unsigned char>(raw)));
      if (letter_pc(upper) < 0) {
        error = std::string("expected a note letter, got '") + raw + "'";
        return false;
      }
      ++c.i;
      int octave = std::islower(static_cast<unsigned char>(raw)) ? 5 : 4;
      while (c.peek() == '\'' || c.peek() == ',') octave += c.s[c.i++] == '\'' ? 1 : -1;
      const auto slot = std::make_pair(upper, octave);
      if (explicit_acc) bar_acc[slot] = acc;
      else if (auto it = bar_acc.find(slot); it != bar_acc.end()) acc = it->second;
      else acc = key_acc.count(upper) ? key_acc[upper] : 0;
      out.pitch = 12 * (octave + 1) + letter_pc(upper) + acc;
      out.duration = read_multiplier(c, error);
      out.tie = c.peek() == '-';
      if (out.tie) ++c.i;
      return error.empty();
    };

    auto place = [&](const Parsed& n) {
      auto it = std::find_if(open_ties.begin(), open_ties.end(), [&](auto& t) {
        const auto& prev = r.notes[t.second];
        return t.first == n.pitch && prev.onset + prev.duration == now;
      });
      std::size_t idx;
      if (it != open_ties.end()) {
        idx = it->second;
        r.notes[idx].duration += n.duration;
        open_ties.erase(it);
      } else {
        idx = r.notes.size();
        r.notes.push_back({v, now, n.duration, n.pitch});
      }
      if (n.tie) open_ties.emplace_back(n.pitch, idx);
    };

    while (!c.done() && error.empty()) {
      const char ch = c.peek();
      if (ch == ' ' || ch == '\n') {
        ++c.i;
      } else if (ch == '|') {
        ++c.i;
        bars.push_back(now - bar_start);
        bar_start = now;
        bar_acc.clear();
      } else if (ch == 'z') {
        ++c.i;
        now += read_multiplier(c, error);
      } else if (ch == '[') {
        ++c.i;
        std::vector<Parsed> chord;
        while (error.empty() && c.peek() != ']') {
          if (c.done()) {
            error = "unterminated chord";
            break;
          }
          Parsed n;
          if (read_note(n)) chord.push_back(n);
        }
        if (!error.empty()) break;
        ++c.i;
        if (chord.size() < 2) error = "chord with fewer than two notes";
        for (const auto& n : chord)
          if (n.duration != chord.front().duration) error = "chord notes of different lengths";
        for (const auto& n : chord) place(n);
        now += chord.front().duration;
      } else {
        Parsed n;
        if (!read_note(n)) break;
        place(n);
        now += n.duration;
      }
    }
    if (!open_ties.empty() && error.empty()) error = "tie at the end of the voice";
    if (!error.empty()) r.errors.push_back("voice " + std::to_string(v + 1) + ": " + error);
    if (now > bar_start) bars.push_back(now - bar_start);
    r.voice_lengths.push_back(now);
    r.bars.push_back(bars);
  }
  return r;
}

}  // namespace midilm::testing
