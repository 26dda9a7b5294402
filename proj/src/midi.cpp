#include "midilm/midi.h"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <tuple>

namespace midilm::midi {

namespace {

enum class RawKind { NoteOn, NoteOff, Program, Tempo, TimeSig, EndOfTrack };

struct RawEvent {
  Tick tick = 0;
  int track = 0;
  std::size_t order = 0;
  RawKind kind = RawKind::NoteOn;
  int channel = 0;
  int a = 0;
  int b = 0;
};

/// Big-endian cursor over one chunk. Every read is bounds checked.
class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, MidiErrc on_eof) : bytes_(bytes), on_eof_(on_eof) {}

  bool at_end() const { return pos_ >= bytes_.size(); }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }

  std::uint8_t peek() {
    need(1);
    return bytes_[pos_];
  }

  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>((bytes_[pos_] << 8) | bytes_[pos_ + 1]);
    pos_ += 2;
    return v;
  }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = (std::uint32_t{bytes_[pos_]} << 24) | (std::uint32_t{bytes_[pos_ + 1]} << 16) |
                      (std::uint32_t{bytes_[pos_ + 2]} << 8) | std::uint32_t{bytes_[pos_ + 3]};
    pos_ += 4;
    return v;
  }

  /// Variable-length quantity, at most four bytes.
  std::uint32_t vlq() {
    std::uint32_t value = 0;
    for (int i = 0; i < 4; ++i) {
      std::uint8_t byte = u8();
      value = (value << 7) | (byte & 0x7F);
      if ((byte & 0x80) == 0) return value;
    }
    throw MidiError(MidiErrc::MalformedTrack, "variable-length quantity longer than 4 bytes");
  }

  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

 private:
  void need(std::size_t n) const {
    if (n > remaining()) throw MidiError(on_eof_, "unexpected end of data");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  MidiErrc on_eof_;
};

std::uint8_t data_byte(Reader& r) {
  std::uint8_t b = r.u8();
  if (b & 0x80) throw MidiError(MidiErrc::MalformedTrack, "status byte where a data byte was expected");
  return b;
}

/// Parses one MTrk body into raw events with absolute ticks. Returns the
/// tick of the last event (end of track).
Tick parse_track(std::span<const std::uint8_t> body, int track, std::vector<RawEvent>& out,
                 std::optional<std::string>& track_name, std::vector<std::string>& warnings) {
  Reader r(body, MidiErrc::TruncatedTrack);
  Tick tick = 0;
  int running = -1;
  std::size_t order = 0;
  auto push = [&](RawKind kind, int channel, int a, int b) {
    out.push_back(RawEvent{tick, track, order++, kind, channel, a, b});
  };

  while (!r.at_end()) {
    tick += r.vlq();
    int status = r.peek();
    if (status & 0x80) {
      r.u8();
    } else if (running < 0) {
      throw MidiError(MidiErrc::MalformedTrack, "data byte without running status in track " + std::to_string(track));
    } else {
      status = running;
    }

    if (status == 0xFF) {
      running = -1;
      int type = r.u8();
      auto data = r.take(r.vlq());
      if (type == 0x2F) break;
      if (type == 0x51) {
        if (data.size() != 3) {
          warnings.push_back("ignored tempo event with length " + std::to_string(data.size()));
          continue;
        }
        int us = (data[0] << 16) | (data[1] << 8) | data[2];
        if (us <= 0) {
          warnings.push_back("ignored zero tempo event at tick " + std::to_string(tick));
          continue;
        }
        push(RawKind::Tempo, 0, us, 0);
      } else if (type == 0x58) {
        if (data.size() < 2 || data[0] == 0 || data[1] > 8) {
          warnings.push_back("ignored malformed time signature at tick " + std::to_string(tick));
          continue;
        }
        push(RawKind::TimeSig, 0, data[0], 1 << data[1]);
      } else if (type == 0x03 && !track_name && !data.empty()) {
        track_name = std::string(data.begin(), data.end());
      }
      continue;
    }
    if (status == 0xF0 || status == 0xF7) {
      running = -1;
      r.take(r.vlq());
      continue;
    }
    if (status > 0xF0) {
      throw MidiError(MidiErrc::MalformedTrack, "system message in file at tick " + std::to_string(tick));
    }

    running = status;
    int channel = status & 0x0F;
    switch (status & 0xF0) {
      case 0x80: {
        int pitch = data_byte(r);
        data_byte(r);
        push(RawKind::NoteOff, channel, pitch, 0);
        break;
      }
      case 0x90: {
        int pitch = data_byte(r);
        int velocity = data_byte(r);
        push(velocity == 0 ? RawKind::NoteOff : RawKind::NoteOn, channel, pitch, velocity);
        break;
      }
      case 0xC0:
        push(RawKind::Program, channel, data_byte(r), 0);
        break;
      case 0xD0:
        data_byte(r);
        break;
      default:  // 0xA0, 0xB0, 0xE0
        data_byte(r);
        data_byte(r);
        break;
    }
  }
  return tick;
}

template <typename Point, typename Value>
void normalize_map(std::vector<Point>& points, Value default_value, Value Point::*field) {
  std::stable_sort(points.begin(), points.end(), [](const Point& x, const Point& y) { return x.tick < y.tick; });
  std::vector<Point> out;
  for (const Point& p : points) {
    if (!out.empty() && out.back().tick == p.tick) {
      out.back() = p;
    } else {
      out.push_back(p);
    }
  }
  if (out.empty() || out.front().tick > 0) {
    Point first;
    first.tick = 0;
    first.*field = default_value;
    out.insert(out.begin(), first);
  }
  std::vector<Point> collapsed;
  for (const Point& p : out) {
    if (!collapsed.empty() && collapsed.back().*field == p.*field) continue;
    collapsed.push_back(p);
  }
  points = std::move(collapsed);
}

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

}  // namespace

void normalize(MidiPiece& piece) {
  Timeline& tl = piece.timeline;
  if (tl.ticks_per_quarter <= 0) throw MidiError(MidiErrc::InvalidPiece, "ticks_per_quarter must be positive");
  normalize_map(tl.tempo_map, kDefaultUsPerQuarter, &TempoPoint::us_per_quarter);
  normalize_map(tl.timesig_map, TimeSignature{4, 4}, &TimeSigPoint::sig);
  for (const auto& t : tl.tempo_map) {
    if (t.tick < 0 || t.us_per_quarter <= 0) throw MidiError(MidiErrc::InvalidPiece, "invalid tempo entry");
  }
  for (const auto& t : tl.timesig_map) {
    if (t.tick < 0 || t.sig.numerator <= 0 || !is_power_of_two(t.sig.denominator)) {
      throw MidiError(MidiErrc::InvalidPiece, "invalid time signature entry");
    }
  }
  for (const auto& n : piece.notes) {
    if (n.pitch < 0 || n.pitch > 127 || n.velocity < 1 || n.velocity > 127 || n.duration_tick <= 0 ||
        n.onset_tick < 0 || n.channel < 0 || n.channel > 15 || n.program < 0 || n.program > 127) {
      throw MidiError(MidiErrc::InvalidPiece, "note violates NoteEvent invariants");
    }
    tl.end_tick = std::max(tl.end_tick, n.end_tick());
  }
  std::stable_sort(piece.notes.begin(), piece.notes.end(), [](const NoteEvent& x, const NoteEvent& y) {
    return std::tie(x.onset_tick, x.track, x.pitch) < std::tie(y.onset_tick, y.track, y.pitch);
  });
}

MidiPiece parse_smf(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 14 || !std::equal(bytes.begin(), bytes.begin() + 4, "MThd")) {
    throw MidiError(MidiErrc::MalformedHeader, "missing MThd header");
  }
  Reader file(bytes, MidiErrc::MalformedHeader);
  file.take(4);
  std::uint32_t header_len = file.u32();
  if (header_len < 6 || header_len > file.remaining()) {
    throw MidiError(MidiErrc::MalformedHeader, "bad MThd chunk length " + std::to_string(header_len));
  }
  auto header = file.take(header_len);
  Reader h(header, MidiErrc::MalformedHeader);
  int format = h.u16();
  int declared_tracks = h.u16();
  int division = h.u16();
  if (format == 2) throw MidiError(MidiErrc::UnsupportedFormat, "format 2 files are not supported");
  if (format > 2) throw MidiError(MidiErrc::UnsupportedFormat, "unknown SMF format " + std::to_string(format));
  if (division & 0x8000) throw MidiError(MidiErrc::UnsupportedFormat, "SMPTE time division is not supported");
  if (division == 0) throw MidiError(MidiErrc::MalformedHeader, "zero ticks per quarter");

  MidiPiece piece;
  piece.timeline.ticks_per_quarter = division;
  std::vector<RawEvent> events;
  std::vector<Tick> track_end;
  int track = 0;
  while (file.remaining() > 0) {
    if (file.remaining() < 8) {
      piece.warnings.push_back("ignored " + std::to_string(file.remaining()) + " trailing bytes");
      break;
    }
    auto id = file.take(4);
    std::uint32_t len = file.u32();
    if (len > file.remaining()) {
      throw MidiError(MidiErrc::TruncatedTrack, "chunk length " + std::to_string(len) + " exceeds file size");
    }
    auto body = file.take(len);
    if (!std::equal(id.begin(), id.end(), "MTrk")) continue;
    std::optional<std::string> name;
    track_end.push_back(parse_track(body, track, events, name, piece.warnings));
    if (track == 0 && name) piece.title = name;
    ++track;
  }
  if (track < declared_tracks) {
    piece.warnings.push_back("header declares " + std::to_string(declared_tracks) + " tracks, found " +
                             std::to_string(track));
  }

  std::stable_sort(events.begin(), events.end(), [](const RawEvent& x, const RawEvent& y) {
    return std::tie(x.tick, x.track, x.order) < std::tie(y.tick, y.track, y.order);
  });

  struct Open {
    Tick onset;
    int velocity;
    int program;
  };
  std::map<std::tuple<int, int, int>, std::deque<Open>> open;  // (track, channel, pitch) FIFO
  int program[16] = {};
  std::size_t zero_length = 0;
  auto emit = [&](int trk, int channel, int pitch, const Open& o, Tick off) {
    if (off <= o.onset) {
      ++zero_length;
      return;
    }
    piece.notes.push_back(NoteEvent{pitch, o.velocity, o.onset, off - o.onset, trk, channel, o.program});
  };

  for (const RawEvent& e : events) {
    switch (e.kind) {
      case RawKind::Program:
        program[e.channel] = e.a;
        break;
      case RawKind::NoteOn:
        open[{e.track, e.channel, e.a}].push_back(Open{e.tick, e.b, program[e.channel]});
        break;
      case RawKind::NoteOff: {
        auto it = open.find({e.track, e.channel, e.a});
        if (it == open.end() || it->second.empty()) break;
        Open o = it->second.front();
        it->second.pop_front();
        emit(e.track, e.channel, e.a, o, e.tick);
        break;
      }
      case RawKind::Tempo:
        piece.timeline.tempo_map.push_back(TempoPoint{e.tick, e.a});
        break;
      case RawKind::TimeSig:
        piece.timeline.timesig_map.push_back(TimeSigPoint{e.tick, TimeSignature{e.a, e.b}});
        break;
      case RawKind::EndOfTrack:
        break;
    }
  }

  for (auto& [key, fifo] : open) {
    auto [trk, channel, pitch] = key;
    for (const Open& o : fifo) {
      piece.warnings.push_back("dangling note-on (pitch " + std::to_string(pitch) + ", tick " +
                               std::to_string(o.onset) + ") closed at end of track " + std::to_string(trk));
      emit(trk, channel, pitch, o, track_end[static_cast<std::size_t>(trk)]);
    }
  }
  if (zero_length > 0) {
    piece.warnings.push_back("dropped " + std::to_string(zero_length) + " zero-length notes");
  }

  Tick end = 0;
  for (Tick t : track_end) end = std::max(end, t);
  piece.timeline.end_tick = end;
  normalize(piece);
  return piece;
}

MidiPiece read_smf(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MidiError(MidiErrc::MalformedHeader, "cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_smf(bytes);
  } catch (const MidiError& e) {
    throw MidiError(e.kind(), path + ": " + e.what());
  }
}

double ticks_to_seconds_unchecked(const Timeline& timeline, double tick) {
  const auto& map = timeline.tempo_map;
  const double tpq = timeline.ticks_per_quarter;
  double seconds = 0.0;
  double start = 0.0;
  int us = map.empty() ? kDefaultUsPerQuarter : map.front().us_per_quarter;
  for (std::size_t i = 1; i < map.size() && static_cast<double>(map[i].tick) < tick; ++i) {
    seconds += (static_cast<double>(map[i].tick) - start) * us / (tpq * 1e6);
    start = static_cast<double>(map[i].tick);
    us = map[i].us_per_quarter;
  }
  return seconds + (tick - start) * us / (tpq * 1e6);
}

double ticks_to_seconds(const Timeline& timeline, Tick tick) {
  if (tick < 0 || tick > timeline.end_tick) {
    throw MidiError(MidiErrc::TickOutOfRange,
                    "tick " + std::to_string(tick) + " outside [0, " + std::to_string(timeline.end_tick) + "]");
  }
  return ticks_to_seconds_unchecked(timeline, static_cast<double>(tick));
}

double seconds_to_ticks_exact(const Timeline& timeline, double seconds) {
  const auto& map = timeline.tempo_map;
  const double tpq = timeline.ticks_per_quarter;
  double elapsed = 0.0;
  double start = 0.0;
  int us = map.empty() ? kDefaultUsPerQuarter : map.front().us_per_quarter;
  for (std::size_t i = 1; i < map.size(); ++i) {
    double segment = (static_cast<double>(map[i].tick) - start) * us / (tpq * 1e6);
    if (elapsed + segment > seconds) break;
    elapsed += segment;
    start = static_cast<double>(map[i].tick);
    us = map[i].us_per_quarter;
  }
  return start + (seconds - elapsed) * tpq * 1e6 / us;
}

Tick seconds_to_tick(const Timeline& timeline, double seconds) {
  if (seconds <= 0.0) return 0;
  Tick lo = 0;
  Tick hi = timeline.end_tick;
  if (ticks_to_seconds(timeline, hi) <= seconds) return hi;
  while (hi - lo > 1) {
    Tick mid = lo + (hi - lo) / 2;
    if (ticks_to_seconds(timeline, mid) <= seconds) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return lo;
}

Tick bar_length_ticks(int ticks_per_quarter, const TimeSignature& sig) {
  return static_cast<Tick>(sig.numerator) * 4 * ticks_per_quarter / sig.denominator;
}

std::vector<Tick> bar_grid(const Timeline& timeline) {
  std::vector<Tick> grid;
  const auto& map = timeline.timesig_map;
  if (map.empty()) {
    for (Tick t = 0; t <= timeline.end_tick; t += bar_length_ticks(timeline.ticks_per_quarter, {4, 4})) {
      grid.push_back(t);
    }
    return grid;
  }
  for (std::size_t i = 0; i < map.size(); ++i) {
    Tick start = map[i].tick;
    if (start > timeline.end_tick) break;
    Tick stop = i + 1 < map.size() ? map[i + 1].tick : timeline.end_tick + 1;
    const auto& sig = map[i].sig;
    const Tick unit = static_cast<Tick>(sig.numerator) * 4 * timeline.ticks_per_quarter;
    for (Tick k = 0;; ++k) {
      Tick t = start + k * unit / sig.denominator;
      if (t >= stop || t > timeline.end_tick) break;
      if (k > 0 && t == grid.back()) continue;  // sub-tick bars at tiny resolutions
      grid.push_back(t);
    }
  }
  return grid;
}

TimeSignature timesig_at(const Timeline& timeline, Tick tick) {
  const auto& map = timeline.timesig_map;
  auto it = std::upper_bound(map.begin(), map.end(), tick, [](Tick t, const TimeSigPoint& p) { return t < p.tick; });
  if (it == map.begin()) return TimeSignature{4, 4};
  return std::prev(it)->sig;
}

int tempo_at(const Timeline& timeline, Tick tick) {
  const auto& map = timeline.tempo_map;
  auto it = std::upper_bound(map.begin(), map.end(), tick, [](Tick t, const TempoPoint& p) { return t < p.tick; });
  if (it == map.begin()) return kDefaultUsPerQuarter;
  return std::prev(it)->us_per_quarter;
}

double duration_seconds(const MidiPiece& piece) {
  return ticks_to_seconds_unchecked(piece.timeline, static_cast<double>(piece.timeline.end_tick));
}

}  // namespace midilm::midi
