#include "midilm/octuple.h"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

namespace midilm::octuple {

using midi::Tick;
using midi::TimeSignature;

std::vector<TimeSignature> default_timesig_vocab() {
  std::vector<TimeSignature> vocab;
  for (int den = 1; den <= 64; den *= 2) {
    for (int num = 1; num <= 2 * den; ++num) vocab.push_back({num, den});
  }
  return vocab;
}

void QuantConfig::validate() const {
  auto fail = [](const std::string& what) { throw OctupleError(OctupleErrc::InvalidConfig, what); };
  if (positions_per_bar_unit < 1 || positions_per_bar_unit > 480) fail("positions_per_bar_unit must be in [1, 480]");
  if (duration_bins < 1 || velocity_bins < 1 || velocity_bins > 127 || tempo_bins < 1 || max_bars < 1) {
    fail("bin counts must be positive");
  }
  if (instrument_vocab_size < 1 || instrument_vocab_size > 129) fail("instrument_vocab_size must be in [1, 129]");
  if (timesig_vocab.empty()) fail("timesig_vocab is empty");
  for (std::size_t i = 0; i < timesig_vocab.size(); ++i) {
    const auto& s = timesig_vocab[i];
    if (s.numerator < 1 || s.denominator < 1 || (s.denominator & (s.denominator - 1)) != 0) {
      fail("timesig_vocab entry is not a valid signature");
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (timesig_vocab[j] == s) fail("timesig_vocab contains duplicates");
    }
  }
}

int QuantConfig::velocity_bin_width() const { return (127 + velocity_bins - 1) / velocity_bins; }

int QuantConfig::timesig_index(const TimeSignature& sig) const {
  auto it = std::find(timesig_vocab.begin(), timesig_vocab.end(), sig);
  return it == timesig_vocab.end() ? -1 : static_cast<int>(it - timesig_vocab.begin());
}

int QuantConfig::nearest_timesig_index(const TimeSignature& sig) const {
  const double ratio = static_cast<double>(sig.numerator) / sig.denominator;
  int best = 0;
  double best_dist = INFINITY;
  for (std::size_t i = 0; i < timesig_vocab.size(); ++i) {
    double d = std::abs(static_cast<double>(timesig_vocab[i].numerator) / timesig_vocab[i].denominator - ratio);
    if (d < best_dist) {
      best_dist = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

int QuantConfig::positions_in_bar(const TimeSignature& sig) const {
  return (sig.numerator * positions_per_bar_unit + sig.denominator - 1) / sig.denominator;
}

int velocity_to_bin(int velocity, const QuantConfig& cfg) {
  return std::clamp((velocity - 1) / cfg.velocity_bin_width(), 0, cfg.velocity_bins - 1);
}

int bin_to_velocity(int bin, const QuantConfig& cfg) {
  int w = cfg.velocity_bin_width();
  return std::clamp(bin * w + w / 2, 1, 127);
}

int bpm_to_tempo_bin(double bpm, const QuantConfig& cfg) {
  double bin = std::round(12.0 * std::log2(bpm / kTempoBinBaseBpm));
  return static_cast<int>(std::clamp(bin, 0.0, static_cast<double>(cfg.tempo_bins - 1)));
}

double tempo_bin_to_bpm(int bin) { return kTempoBinBaseBpm * std::exp2(bin / 12.0); }

std::array<int, 8> field_vocab_sizes(const QuantConfig& cfg) {
  int max_positions = 1;
  for (const auto& s : cfg.timesig_vocab) max_positions = std::max(max_positions, cfg.positions_in_bar(s));
  return {cfg.max_bars,      max_positions,      cfg.instrument_vocab_size,
          128,               cfg.duration_bins,  cfg.velocity_bins,
          cfg.tempo_bins,    static_cast<int>(cfg.timesig_vocab.size())};
}

BarLayout::BarLayout(const midi::Timeline& timeline, const QuantConfig& cfg)
    : timeline_(timeline), ppu_(cfg.positions_per_bar_unit) {
  std::vector<midi::TimeSigPoint> remapped;
  for (const auto& p : timeline_.timesig_map) {
    int idx = cfg.timesig_index(p.sig);
    if (idx < 0) {
      idx = cfg.nearest_timesig_index(p.sig);
      ++remapped_;
    }
    TimeSignature sig = cfg.timesig_vocab[static_cast<std::size_t>(idx)];
    if (!remapped.empty() && remapped.back().sig == sig) continue;
    remapped.push_back({p.tick, sig});
  }
  if (remapped.empty()) remapped.push_back({0, cfg.timesig_vocab.front()});
  timeline_.timesig_map = std::move(remapped);

  grid_ = midi::bar_grid(timeline_);
  for (Tick t : grid_) grid_sig_.push_back(cfg.timesig_index(midi::timesig_at(timeline_, t)));

  const auto& last = timeline_.timesig_map.back();
  tail_sig_ = last.sig;
  if (last.tick <= timeline_.end_tick) {
    tail_start_ = last.tick;
    tail_first_bar_ = static_cast<int>(std::lower_bound(grid_.begin(), grid_.end(), last.tick) - grid_.begin());
  } else {
    // Signature change past the end: keep extending the segment that covers end_tick.
    auto seg = std::upper_bound(timeline_.timesig_map.begin(), timeline_.timesig_map.end(), timeline_.end_tick,
                                [](Tick t, const midi::TimeSigPoint& p) { return t < p.tick; });
    --seg;
    tail_start_ = seg->tick;
    tail_sig_ = seg->sig;
    tail_first_bar_ = static_cast<int>(std::lower_bound(grid_.begin(), grid_.end(), seg->tick) - grid_.begin());
  }
}

Tick BarLayout::bar_start(int bar) const {
  if (bar < static_cast<int>(grid_.size())) return grid_[static_cast<std::size_t>(bar)];
  const Tick unit = static_cast<Tick>(tail_sig_.numerator) * 4 * timeline_.ticks_per_quarter;
  return tail_start_ + static_cast<Tick>(bar - tail_first_bar_) * unit / tail_sig_.denominator;
}

int BarLayout::bar_of(Tick tick) const {
  if (tick < grid_.back()) {
    auto it = std::upper_bound(grid_.begin(), grid_.end(), tick);
    return static_cast<int>(it - grid_.begin()) - 1;
  }
  const Tick unit = static_cast<Tick>(tail_sig_.numerator) * 4 * timeline_.ticks_per_quarter;
  int bar = tail_first_bar_ + static_cast<int>((tick - tail_start_) * tail_sig_.denominator / unit);
  bar = std::max(bar, static_cast<int>(grid_.size()) - 1);
  while (bar_start(bar + 1) <= tick) ++bar;
  while (bar > 0 && bar_start(bar) > tick) --bar;
  return bar;
}

int BarLayout::timesig_index(int bar) const {
  if (bar < static_cast<int>(grid_sig_.size())) return grid_sig_[static_cast<std::size_t>(bar)];
  return grid_sig_.back();
}

Tick BarLayout::position_tick(int bar, int position) const {
  return bar_start(bar) + static_cast<Tick>(position) * 4 * timeline_.ticks_per_quarter / ppu_;
}

TokenizeResult tokenize(const midi::MidiPiece& piece, const QuantConfig& cfg) {
  cfg.validate();
  if (piece.notes.empty()) throw OctupleError(OctupleErrc::EmptyPiece, "piece has no notes");

  BarLayout layout(piece.timeline, cfg);
  TokenizeResult result;
  result.remapped_timesigs = layout.remapped();
  if (layout.remapped() > 0) {
    result.warnings.push_back(std::to_string(layout.remapped()) +
                              " time signature(s) outside the vocab remapped by bar-length ratio");
  }

  const Tick tpq = piece.timeline.ticks_per_quarter;
  const Tick ppu = cfg.positions_per_bar_unit;
  // round-half-up of ticks * ppu / (4 * tpq)
  auto to_units = [&](Tick ticks) { return (2 * ticks * ppu + 4 * tpq) / (8 * tpq); };

  result.tokens.reserve(piece.notes.size());
  for (const auto& note : piece.notes) {
    int bar = layout.bar_of(note.onset_tick);
    Tick position = to_units(note.onset_tick - layout.bar_start(bar));
    if (position * 4 * tpq >= layout.bar_length(bar) * ppu) {
      ++bar;
      position = 0;
    }
    if (bar >= cfg.max_bars) {
      ++result.truncated;
      continue;
    }
    OctupleToken t;
    t.bar = bar;
    t.position = static_cast<int>(position);
    if (cfg.keep_programs) {
      t.instrument = note.channel == midi::kDrumChannel ? kDrumInstrument : note.program;
      t.instrument = std::min(t.instrument, cfg.instrument_vocab_size - 1);
    }
    t.pitch = note.pitch;
    t.duration = static_cast<int>(std::clamp<Tick>(to_units(note.duration_tick), 0, cfg.duration_bins - 1));
    t.velocity = velocity_to_bin(note.velocity, cfg);
    Tick snapped = layout.position_tick(bar, t.position);
    t.tempo = bpm_to_tempo_bin(60'000'000.0 / midi::tempo_at(piece.timeline, snapped), cfg);
    t.timesig = layout.timesig_index(bar);
    result.tokens.push_back(t);
  }
  if (result.truncated > 0) {
    result.warnings.push_back(std::to_string(result.truncated) + " note(s) beyond max_bars=" +
                              std::to_string(cfg.max_bars) + " truncated");
  }
  std::sort(result.tokens.begin(), result.tokens.end());
  return result;
}

void check_token(const OctupleToken& token, const QuantConfig& cfg) {
  auto sizes = field_vocab_sizes(cfg);
  auto fields = token.fields();
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (fields[i] < 0 || fields[i] >= sizes[i]) {
      throw OctupleError(OctupleErrc::TokenOutOfRange, std::string("field ") + kFieldNames[i] + " = " +
                                                           std::to_string(fields[i]) + " outside [0, " +
                                                           std::to_string(sizes[i]) + ")");
    }
  }
  const auto& sig = cfg.timesig_vocab[static_cast<std::size_t>(token.timesig)];
  if (token.position >= cfg.positions_in_bar(sig)) {
    throw OctupleError(OctupleErrc::TokenOutOfRange, "position " + std::to_string(token.position) +
                                                         " outside a bar of " + std::to_string(sig.numerator) +
                                                         "/" + std::to_string(sig.denominator));
  }
}

midi::MidiPiece detokenize(const std::vector<OctupleToken>& tokens, const QuantConfig& cfg) {
  cfg.validate();
  constexpr Tick kTpq = 480;
  midi::MidiPiece piece;
  piece.timeline.ticks_per_quarter = static_cast<int>(kTpq);
  if (tokens.empty()) {
    midi::normalize(piece);
    return piece;
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    check_token(tokens[i], cfg);
    if (i > 0 && tokens[i] < tokens[i - 1]) {
      throw OctupleError(OctupleErrc::TokenOutOfRange, "tokens are not sorted at index " + std::to_string(i));
    }
    if (i > 0 && tokens[i].bar == tokens[i - 1].bar && tokens[i].timesig != tokens[i - 1].timesig) {
      throw OctupleError(OctupleErrc::TokenOutOfRange, "conflicting time signatures in bar " +
                                                           std::to_string(tokens[i].bar));
    }
    if (i > 0 && tokens[i].bar == tokens[i - 1].bar && tokens[i].position == tokens[i - 1].position &&
        tokens[i].tempo != tokens[i - 1].tempo) {
      throw OctupleError(OctupleErrc::TokenOutOfRange, "conflicting tempi at one onset in bar " +
                                                           std::to_string(tokens[i].bar));
    }
  }

  // Signature per bar: carried forward from the last bar with tokens.
  const int bars = tokens.back().bar + 1;
  std::vector<int> sig_of_bar(static_cast<std::size_t>(bars), tokens.front().timesig);
  {
    std::size_t t = 0;
    int current = tokens.front().timesig;
    for (int b = 0; b < bars; ++b) {
      if (t < tokens.size() && tokens[t].bar == b) current = tokens[t].timesig;
      while (t < tokens.size() && tokens[t].bar == b) ++t;
      sig_of_bar[static_cast<std::size_t>(b)] = current;
    }
  }
  std::vector<Tick> bar_start(static_cast<std::size_t>(bars) + 1, 0);
  for (int b = 0; b < bars; ++b) {
    const auto& sig = cfg.timesig_vocab[static_cast<std::size_t>(sig_of_bar[static_cast<std::size_t>(b)])];
    bar_start[static_cast<std::size_t>(b) + 1] = bar_start[static_cast<std::size_t>(b)] +
                                                 midi::bar_length_ticks(static_cast<int>(kTpq), sig);
    if (b == 0 || sig_of_bar[static_cast<std::size_t>(b)] != sig_of_bar[static_cast<std::size_t>(b) - 1]) {
      piece.timeline.timesig_map.push_back({bar_start[static_cast<std::size_t>(b)], sig});
    }
  }

  const Tick ppu = cfg.positions_per_bar_unit;
  int current_tempo = -1;
  for (const auto& t : tokens) {
    Tick onset = bar_start[static_cast<std::size_t>(t.bar)] + t.position * 4 * kTpq / ppu;
    if (t.tempo != current_tempo) {
      int us = static_cast<int>(std::lround(60'000'000.0 / tempo_bin_to_bpm(t.tempo)));
      piece.timeline.tempo_map.push_back({current_tempo < 0 ? 0 : onset, us});
      current_tempo = t.tempo;
    }
    midi::NoteEvent n;
    n.pitch = t.pitch;
    n.velocity = bin_to_velocity(t.velocity, cfg);
    n.onset_tick = onset;
    n.duration_tick = t.duration == 0 ? 1 : t.duration * 4 * kTpq / ppu;
    n.channel = t.instrument == kDrumInstrument ? midi::kDrumChannel : 0;
    n.program = t.instrument == kDrumInstrument ? 0 : t.instrument;
    piece.notes.push_back(n);
  }
  midi::normalize(piece);
  return piece;
}

void write_tokens(std::ostream& out, const std::vector<OctupleToken>& tokens) {
  for (const auto& t : tokens) {
    auto f = t.fields();
    out << f[0];
    for (std::size_t i = 1; i < f.size(); ++i) out << ' ' << f[i];
    out << '\n';
  }
}

std::vector<OctupleToken> read_tokens(std::istream& in) {
  std::vector<OctupleToken> tokens;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::array<int, 8> f{};
    for (auto& v : f) {
      if (!(ls >> v)) {
        throw OctupleError(OctupleErrc::ParseError, "line " + std::to_string(line_no) + ": expected 8 integers");
      }
    }
    std::string extra;
    if (ls >> extra) {
      throw OctupleError(OctupleErrc::ParseError, "line " + std::to_string(line_no) + ": trailing data");
    }
    tokens.push_back(OctupleToken::from_fields(f));
  }
  return tokens;
}

}  // namespace midilm::octuple
