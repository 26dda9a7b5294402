#include <cmath>
#include <functional>
#include <ostream>

#include "midilm/abc.h"
#include "midilm/align/rng.h"
#include "midilm/align/train.h"
#include "midilm/annotate.h"
#include "midilm/cli.h"
#include "midilm/features.h"
#include "midilm/octuple.h"
#include "midilm/textmetrics.h"

namespace midilm::cli {
namespace {

constexpr int kMajorSteps[] = {0, 2, 4, 5, 7, 9, 11, 12};
constexpr int kHarmonicMinorSteps[] = {0, 2, 3, 5, 7, 8, 11, 12};

midi::MidiPiece scale_piece(int tonic, features::Mode mode) {
  midi::MidiPiece p;
  p.timeline.tempo_map = {{0, midi::kDefaultUsPerQuarter}};
  p.timeline.timesig_map = {{0, {4, 4}}};
  const int* steps = mode == features::Mode::Major ? kMajorSteps : kHarmonicMinorSteps;
  for (int i = 0; i < 8; ++i) p.notes.push_back({60 + tonic + steps[i], 80, i * 480, 480, 0, 0, 0});
  p.timeline.end_tick = 8 * 480;
  return p;
}

/// Random on-grid piece: eighth-note grid, one or two voices.
midi::MidiPiece random_piece(align::Rng& rng) {
  midi::MidiPiece p;
  p.timeline.tempo_map = {{0, 400000 + static_cast<int>(rng.below(400000))}};
  p.timeline.timesig_map = {{0, {rng.below(2) ? 3 : 4, 4}}};
  const int n = 4 + static_cast<int>(rng.below(24));
  for (int i = 0; i < n; ++i) {
    const int onset = static_cast<int>(rng.below(64)) * 240;
    const int dur = (1 + static_cast<int>(rng.below(4))) * 240;
    p.notes.push_back({36 + static_cast<int>(rng.below(60)), 1 + static_cast<int>(rng.below(127)), onset, dur,
                       static_cast<int>(rng.below(2)), 0, 0});
  }
  midi::normalize(p);
  return p;
}

std::size_t lcs_brute(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::size_t best = 0;
  for (std::uint32_t mask = 0; mask < (1u << a.size()); ++mask) {
    std::size_t j = 0, len = 0;
    bool ok = true;
    for (std::size_t i = 0; i < a.size() && ok; ++i) {
      if (!(mask >> i & 1u)) continue;
      while (j < b.size() && b[j] != a[i]) ++j;
      if (j == b.size()) ok = false;
      else ++j, ++len;
    }
    if (ok) best = std::max(best, len);
  }
  return best;
}

bool check_keys() {
  for (int tonic = 0; tonic < 12; ++tonic)
    for (auto mode : {features::Mode::Major, features::Mode::Minor}) {
      const auto k = features::estimate_key(scale_piece(tonic, mode));
      if (k.tonic != tonic || k.mode != mode) return false;
    }
  return true;
}

bool check_tokenizer() {
  align::Rng rng(7);
  const octuple::QuantConfig cfg;
  for (int i = 0; i < 50; ++i) {
    const auto t1 = octuple::tokenize(random_piece(rng), cfg).tokens;
    const auto t2 = octuple::tokenize(octuple::detokenize(t1, cfg), cfg).tokens;
    if (t1 != t2) return false;
    for (const auto& t : t1) octuple::check_token(t, cfg);
  }
  return true;
}

bool check_abc() {
  align::Rng rng(11);
  for (int i = 0; i < 50; ++i)
    if (!abc::validate_abc(abc::to_abc(random_piece(rng))).empty()) return false;
  return true;
}

bool check_lcs() {
  align::Rng rng(3);
  const char* words[] = {"a", "b", "c", "d"};
  for (int i = 0; i < 100; ++i) {
    std::vector<std::string> a(rng.below(9)), b(rng.below(9));
    for (auto& w : a) w = words[rng.below(4)];
    for (auto& w : b) w = words[rng.below(4)];
    if (metrics::lcs_length(a, b) != lcs_brute(a, b)) return false;
  }
  return true;
}

bool check_identity_scores() {
  const std::vector<std::string> texts = {"a calm nocturne in e flat major", "the tempo is about 120 bpm ."};
  const auto rep = metrics::evaluate({"0", "1"}, texts, texts);
  return rep.bleu == 1.0 && rep.rouge_l == 1.0;
}

bool check_lr_schedule() {
  align::TrainConfig cfg;
  cfg.total_steps = 1000;
  const int w = align::warmup_steps(cfg);
  return align::lr_schedule(w, cfg) == 5e-4 && align::lr_schedule(cfg.total_steps, cfg) == 0.0 &&
         std::abs(align::lr_schedule(w + 1, cfg) - 5e-4) < 1e-6;
}

bool check_sha256() {
  return annotate::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad";
}

}  // namespace

bool selftest(std::ostream& out) {
  const std::vector<std::pair<const char*, std::function<bool()>>> checks = {
      {"key estimation on 24 scales", check_keys},
      {"tokenizer fixed point", check_tokenizer},
      {"abc documents validate", check_abc},
      {"lcs against brute force", check_lcs},
      {"identical texts score 1", check_identity_scores},
      {"learning-rate schedule endpoints", check_lr_schedule},
      {"sha-256 test vector", check_sha256},
  };
  bool all = true;
  for (const auto& [name, fn] : checks) {
    bool ok = false;
    try {
      ok = fn();
    } catch (const std::exception& e) {
      out << "  (" << e.what() << ")\n";
    }
    out << (ok ? "PASS " : "FAIL ") << name << "\n";
    all = all && ok;
  }
  return all;
}

}  // namespace midilm::cli
