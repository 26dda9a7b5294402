#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "midilm/abc.h"
#include "midilm/align/train.h"
#include "midilm/align/vocab.h"
#include "midilm/align/weights.h"
#include "midilm/annotate.h"
#include "midilm/cli.h"
#include "midilm/features.h"
#include "midilm/io.h"
#include "midilm/midi.h"
#include "midilm/segment.h"
#include "midilm/textmetrics.h"

namespace midilm::cli {
namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

struct Common {
  std::string config_path;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  unsigned jobs = 1;
};

void add_common(CLI::App* app, Common& c, bool with_jobs) {
  app->add_option("--config", c.config_path, "Pipeline configuration file (JSON)");
  c.seed_opt = app->add_option("--seed", c.seed, "Seed overriding the configuration for this stage");
  if (with_jobs) app->add_option("--jobs", c.jobs, "Parallel workers")->check(CLI::Range(1u, 256u));
}

PipelineConfig load_config(const Common& c) {
  return c.config_path.empty() ? PipelineConfig{} : PipelineConfig::load(c.config_path);
}

bool seeded(const Common& c) { return c.seed_opt != nullptr && c.seed_opt->count() > 0; }

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. The first exception
/// (lowest index) is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, unsigned jobs, Fn fn) {
  std::vector<std::exception_ptr> errors(n);
  auto worker = [&](std::size_t first, std::size_t stride) {
    for (std::size_t i = first; i < n; i += stride) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::min<std::size_t>(std::max(1u, jobs), n);
  if (threads <= 1) {
    worker(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker, t, threads);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

void emit(const std::string& path, const std::string& data, std::ostream& out) {
  if (path.empty() || path == "-") out << data;
  else io::write_file_atomic(path, data);
}

std::string stem(const std::string& path) { return fs::path(path).stem().string(); }

std::string midi_path(const std::string& dir, const std::string& piece_id) {
  return (fs::path(dir) / (piece_id + ".mid")).string();
}

ojson features_json(const std::string& piece_id, const features::FeatureSummary& f) {
  ojson j;
  j["piece_id"] = piece_id;
  j["tempo_bpm"] = f.tempo_bpm;
  j["key"] = features::key_name(f.key);
  j["key_confidence"] = f.key.confidence;
  j["time_signature"] = {f.timesig.numerator, f.timesig.denominator};
  j["duration_s"] = f.duration_s;
  return j;
}

template <typename T, typename Parse>
std::vector<T> read_jsonl(const std::string& path, Parse parse) {
  std::vector<T> out;
  std::size_t line_no = 0;
  for (const auto& line : io::read_lines(path)) {
    ++line_no;
    try {
      out.push_back(parse(line));
    } catch (const Error& e) {
      throw Error(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

ojson parse_object(const std::string& line) {
  try {
    ojson j = ojson::parse(line);
    if (!j.is_object()) throw Error("expected a JSON object");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(e.what());
  }
}

std::string get_string(const ojson& j, const char* key) {
  if (!j.contains(key) || !j[key].is_string()) throw Error(std::string("missing string field '") + key + "'");
  return j[key].get<std::string>();
}

// ---------------------------------------------------------------- clips ---

/// Clip lookup plus lazily computed pooled encoder features.
class ClipLibrary {
 public:
  ClipLibrary(const std::string& clips_path, std::string midi_dir, octuple::QuantConfig quant)
      : midi_dir_(std::move(midi_dir)), quant_(std::move(quant)) {
    for (auto& c : read_jsonl<segment::Clip>(clips_path, segment::clip_from_json)) clips_.emplace(c.clip_id(), c);
  }

  const segment::Clip& clip(const std::string& id) const {
    auto it = clips_.find(id);
    if (it == clips_.end()) throw Error("unknown clip '" + id + "'");
    return it->second;
  }

  align::Vec pooled(const std::string& clip_id, const align::StubEncoder& encoder) {
    if (auto it = pooled_.find(clip_id); it != pooled_.end()) return it->second;
    const segment::Clip& c = clip(clip_id);
    auto [it, inserted] = tokens_.try_emplace(c.piece_id);
    if (inserted) {
      const midi::MidiPiece piece = midi::read_smf(midi_path(midi_dir_, c.piece_id));
      it->second = {piece.timeline, octuple::tokenize(piece, quant_).tokens};
    }
    const auto sliced = segment::slice_tokens(it->second.second, it->second.first, c, quant_);
    if (sliced.empty()) throw Error("clip '" + clip_id + "' has no notes");
    align::Vec v = align::mean_pool(align::encode(sliced, encoder));
    pooled_.emplace(clip_id, v);
    return v;
  }

 private:
  std::string midi_dir_;
  octuple::QuantConfig quant_;
  std::map<std::string, segment::Clip> clips_;
  std::map<std::string, std::pair<midi::Timeline, std::vector<octuple::OctupleToken>>> tokens_;
  std::map<std::string, align::Vec> pooled_;
};

std::vector<annotate::DatasetEntry> read_dataset(const std::string& path) {
  return read_jsonl<annotate::DatasetEntry>(path, annotate::DatasetEntry::from_json);
}

std::vector<align::TrainExample> build_examples(const std::vector<annotate::DatasetEntry>& entries,
                                                ClipLibrary& clips, const align::AlignModel& model,
                                                const align::TextVocab& vocab) {
  std::map<std::string, std::string> context;
  for (const auto& e : entries) {
    std::string& c = context[e.clip_id];
    c += (c.empty() ? "" : " ") + e.answer;
  }
  std::vector<align::TrainExample> out;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    auto ex = align::make_example(e.clip_id + "#" + std::to_string(i), clips.pooled(e.clip_id, model.encoder),
                                  e.question, e.answer, vocab);
    ex.context_ids = vocab.encode(context[e.clip_id]);
    out.push_back(std::move(ex));
  }
  return out;
}

// ------------------------------------------------------------- commands ---

struct ParseArgs {
  Common common;
  std::string input, out;
};

int cmd_parse(const ParseArgs& a, std::ostream& out, std::ostream& err) {
  const midi::MidiPiece p = midi::read_smf(a.input);
  for (const auto& w : p.warnings) err << a.input << ": warning: " << w << "\n";
  ojson j;
  j["ticks_per_quarter"] = p.timeline.ticks_per_quarter;
  j["end_tick"] = p.timeline.end_tick;
  j["title"] = p.title ? ojson(*p.title) : ojson(nullptr);
  j["composer"] = p.composer ? ojson(*p.composer) : ojson(nullptr);
  j["tempo_map"] = ojson::array();
  for (const auto& t : p.timeline.tempo_map) j["tempo_map"].push_back({{"tick", t.tick}, {"us_per_quarter", t.us_per_quarter}});
  j["timesig_map"] = ojson::array();
  for (const auto& t : p.timeline.timesig_map)
    j["timesig_map"].push_back({{"tick", t.tick}, {"numerator", t.sig.numerator}, {"denominator", t.sig.denominator}});
  j["notes"] = ojson::array();
  for (const auto& n : p.notes)
    j["notes"].push_back({{"pitch", n.pitch},
                          {"velocity", n.velocity},
                          {"onset_tick", n.onset_tick},
                          {"duration_tick", n.duration_tick},
                          {"track", n.track},
                          {"channel", n.channel},
                          {"program", n.program}});
  j["warnings"] = p.warnings;
  emit(a.out, j.dump(2) + "\n", out);
  return kExitOk;
}

struct TokenizeArgs {
  Common common;
  std::string input, out;
};

int cmd_tokenize(const TokenizeArgs& a, std::ostream& out, std::ostream& err) {
  const PipelineConfig cfg = load_config(a.common);
  const midi::MidiPiece p = midi::read_smf(a.input);
  const auto r = octuple::tokenize(p, cfg.quant);
  for (const auto& w : r.warnings) err << a.input << ": warning: " << w << "\n";
  std::ostringstream s;
  octuple::write_tokens(s, r.tokens);
  emit(a.out, s.str(), out);
  return kExitOk;
}

struct SegmentArgs {
  Common common;
  std::vector<std::string> inputs;
  std::string out;
  double target_s = 20.0;
  int count = 3;
};

int cmd_segment(const SegmentArgs& a, std::ostream& out, std::ostream&) {
  std::vector<std::string> chunks(a.inputs.size());
  parallel_for(a.inputs.size(), a.common.jobs, [&](std::size_t i) {
    const midi::MidiPiece p = midi::read_smf(a.inputs[i]);
    for (const auto& c : segment::select_clips(p, stem(a.inputs[i]), a.target_s, a.count))
      chunks[i] += segment::clip_to_json(c) + "\n";
  });
  std::string all;
  for (const auto& c : chunks) all += c;
  emit(a.out, all, out);
  return kExitOk;
}

struct AbcArgs {
  Common common;
  std::string input, out;
};

int cmd_abc(const AbcArgs& a, std::ostream& out, std::ostream& err) {
  midi::MidiPiece p = midi::read_smf(a.input);
  if (!p.title) p.title = stem(a.input);
  const abc::AbcDocument doc = abc::to_abc(p);
  const auto violations = abc::validate_abc(doc);
  if (!violations.empty()) {
    for (const auto& v : violations) err << "abc:" << v.line << ":" << v.column << ": " << v.message << "\n";
    err << "error: generated ABC failed validation\n";
    return kExitInternal;
  }
  const auto& l = doc.loss_report;
  err << "loss: quantized_notes=" << l.quantized_notes << " dropped_tempo_changes=" << l.dropped_tempo_changes
      << " dropped_timesig_changes=" << l.dropped_timesig_changes << "\n";
  emit(a.out, doc.render(), out);
  return kExitOk;
}

struct FeaturesArgs {
  Common common;
  std::vector<std::string> inputs;
  std::string out;
};

int cmd_features(const FeaturesArgs& a, std::ostream& out, std::ostream&) {
  std::vector<std::string> lines(a.inputs.size());
  parallel_for(a.inputs.size(), a.common.jobs, [&](std::size_t i) {
    lines[i] = features_json(stem(a.inputs[i]), features::summarize(midi::read_smf(a.inputs[i]))).dump() + "\n";
  });
  std::string all;
  for (const auto& l : lines) all += l;
  emit(a.out, all, out);
  return kExitOk;
}

struct AnnotateArgs {
  Common common;
  std::string sources, midi_dir, responses, cache, out, llm_log;
};

struct SourceDoc {
  std::string piece_id, title, composer, text;
};

int cmd_annotate(const AnnotateArgs& a, std::ostream& out, std::ostream& err) {
  const PipelineConfig cfg = load_config(a.common);
  const std::string midi_dir = a.midi_dir.empty() ? cfg.input_dir : a.midi_dir;
  const std::string cache = a.cache.empty() ? cfg.cache_dir : a.cache;

  auto docs = read_jsonl<SourceDoc>(a.sources, [](const std::string& line) {
    const ojson j = parse_object(line);
    SourceDoc d{get_string(j, "piece_id"), get_string(j, "title"), get_string(j, "composer"), ""};
    if (j.contains("source_text")) d.text = get_string(j, "source_text");
    if (d.piece_id.empty() || d.title.empty() || d.composer.empty())
      throw Error("piece_id, title and composer must be non-empty");
    return d;
  });
  std::sort(docs.begin(), docs.end(), [](const SourceDoc& x, const SourceDoc& y) { return x.piece_id < y.piece_id; });
  for (std::size_t i = 1; i < docs.size(); ++i)
    if (docs[i].piece_id == docs[i - 1].piece_id) throw Error(a.sources + ": duplicate piece_id " + docs[i].piece_id);

  std::unique_ptr<llm::LlmClient> client;
  std::mutex client_mutex;
  std::mutex log_mutex;
  std::string log_text;
  auto live_client = [&]() -> llm::LlmClient& {
    std::lock_guard lock(client_mutex);
    if (!client) {
      client = std::make_unique<llm::LlmClient>(cfg.llm, llm::make_http_transport(cfg.llm));
      client->set_log_sink([&](const std::string& line) {
        std::lock_guard l(log_mutex);
        log_text += line + "\n";
      });
    }
    return *client;
  };

  std::vector<std::string> lines(docs.size());
  parallel_for(docs.size(), a.common.jobs, [&](std::size_t i) {
    const SourceDoc& d = docs[i];
    const std::string digest = annotate::source_digest(d.title, d.composer, d.text);
    const std::string cached = cache.empty() ? "" : (fs::path(cache) / (digest + ".txt")).string();
    const std::string replay = a.responses.empty() ? "" : (fs::path(a.responses) / (d.piece_id + ".txt")).string();
    std::string response;
    if (!cached.empty() && fs::exists(cached)) {
      response = io::read_file(cached);
    } else if (!replay.empty() && fs::exists(replay)) {
      response = io::read_file(replay);
    } else {
      response = live_client().complete(annotate::build_annotation_prompt(d.title, d.composer, d.text), digest);
    }
    if (!cached.empty() && !fs::exists(cached)) io::write_file_atomic(cached, response);

    std::optional<features::FeatureSummary> feats;
    if (!midi_dir.empty()) feats = features::summarize(midi::read_smf(midi_path(midi_dir, d.piece_id)));
    try {
      lines[i] = annotate::parse_annotation_response(response, d.piece_id, feats, digest).to_json() + "\n";
    } catch (const Error& e) {
      throw Error("piece " + d.piece_id + ": " + e.what());
    }
  });
  if (!a.llm_log.empty() && !log_text.empty()) io::write_file_atomic(a.llm_log, log_text);

  std::string all;
  std::size_t valid = 0;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    all += lines[i];
    if (annotate::AnnotationRecord::from_json(lines[i]).valid_tagged()) ++valid;
  }
  err << "annotated " << docs.size() << " pieces, " << valid << " valid-tagged\n";
  emit(a.out, all, out);
  return kExitOk;
}

std::vector<annotate::AnnotationRecord> read_records(const std::string& path) {
  return read_jsonl<annotate::AnnotationRecord>(path, annotate::AnnotationRecord::from_json);
}

struct GenQaArgs {
  Common common;
  std::string annotations, clips, midi_dir, out;
  bool paraphrase = false;
};

int cmd_gen_qa(const GenQaArgs& a, std::ostream& out, std::ostream& err) {
  const PipelineConfig cfg = load_config(a.common);
  const std::uint64_t seed = seeded(a.common) ? a.common.seed : cfg.qa_seed;
  auto records = read_records(a.annotations);
  std::sort(records.begin(), records.end(), [](const auto& x, const auto& y) { return x.piece_id < y.piece_id; });
  std::map<std::string, std::vector<segment::Clip>> clips_of;
  for (auto& c : read_jsonl<segment::Clip>(a.clips, segment::clip_from_json)) clips_of[c.piece_id].push_back(c);

  std::vector<annotate::QaPair> all;
  for (const auto& r : records) {
    auto& clips = clips_of[r.piece_id];
    std::sort(clips.begin(), clips.end(), [](const auto& x, const auto& y) { return x.index < y.index; });
    std::vector<std::string> ids;
    std::map<std::string, features::FeatureSummary> clip_features;
    std::optional<midi::MidiPiece> piece;
    for (const auto& c : clips) {
      ids.push_back(c.clip_id());
      if (!a.midi_dir.empty()) {
        if (!piece) piece = midi::read_smf(midi_path(a.midi_dir, r.piece_id));
        clip_features.emplace(c.clip_id(), features::summarize(segment::clip_piece(*piece, c)));
      }
    }
    if (ids.empty()) {
      err << "warning: piece " << r.piece_id << " has no clips\n";
      continue;
    }
    try {
      auto pairs = annotate::gen_qa(r, ids, seed, a.midi_dir.empty() ? nullptr : &clip_features);
      all.insert(all.end(), pairs.begin(), pairs.end());
    } catch (const annotate::AnnotateError& e) {
      if (e.kind() != annotate::AnnotateErrc::NoContent) throw;
      err << "warning: " << e.what() << "; skipped\n";
    }
  }
  if (a.paraphrase) {
    llm::LlmClient client(cfg.llm, llm::make_http_transport(cfg.llm));
    llm::paraphrase_questions(all, client);
  }
  std::string text;
  for (const auto& p : all) text += p.to_json() + "\n";
  err << "generated " << all.size() << " pairs\n";
  emit(a.out, text, out);
  return kExitOk;
}

struct AssembleArgs {
  Common common;
  std::string annotations, clips, qa, out_dir;
};

int cmd_assemble(const AssembleArgs& a, std::ostream&, std::ostream& err) {
  const PipelineConfig cfg = load_config(a.common);
  const std::uint64_t seed = seeded(a.common) ? a.common.seed : cfg.split_seed;
  const auto ds = annotate::assemble_dataset(
      read_records(a.annotations), read_jsonl<segment::Clip>(a.clips, segment::clip_from_json),
      read_jsonl<annotate::QaPair>(a.qa, annotate::QaPair::from_json), seed);
  annotate::write_dataset(ds, a.out_dir);
  err << "train " << ds.train.size() << " entries / " << ds.train_pieces.size() << " pieces, test " << ds.test.size()
      << " entries / " << ds.test_pieces.size() << " pieces\n";
  return kExitOk;
}

struct TrainArgs {
  Common common;
  std::string stage, data, clips, midi_dir, init, out, loss_log;
  int pretrain_epochs = -1;
};

int cmd_train(const TrainArgs& a, std::ostream&, std::ostream& err) {
  PipelineConfig cfg = load_config(a.common);
  const align::Stage stage = align::parse_stage(a.stage);
  if (seeded(a.common)) {
    cfg.train.seed = a.common.seed;
    cfg.align.seed = a.common.seed;
  }
  if (stage == align::Stage::InstructionTuning && a.init.empty()) throw Error("train --stage 2 needs --init");
  const std::string midi_dir = a.midi_dir.empty() ? cfg.input_dir : a.midi_dir;
  if (midi_dir.empty()) throw Error("train needs --midi-dir (or paths.input_dir in the config)");

  const auto entries = read_dataset(a.data);
  ClipLibrary clips(a.clips, midi_dir, cfg.quant);
  align::Checkpoint ck;
  const bool fresh = a.init.empty();
  if (fresh) {
    std::vector<std::string> texts;
    for (const auto& e : entries) {
      texts.push_back(e.question);
      texts.push_back(e.answer);
    }
    ck.model = align::AlignModel::create(cfg.align);
    ck.vocab = align::TextVocab::build(texts, cfg.align.vocab_size);
  } else {
    ck = align::load_checkpoint(a.init);
  }
  const auto examples = build_examples(entries, clips, ck.model, ck.vocab);

  std::string log;
  auto sink = [&log](const align::LossPoint& p) {
    log += ojson{{"step", p.step}, {"lr", p.lr}, {"loss", p.loss}}.dump() + "\n";
  };
  if (fresh) {
    align::TrainConfig pc = cfg.train;
    pc.epochs = a.pretrain_epochs >= 0 ? a.pretrain_epochs : cfg.pretrain.epochs;
    pc.max_lr = cfg.pretrain.max_lr;
    pc.seed = cfg.pretrain.seed;
    pc.total_steps = 0;
    if (pc.epochs > 0) {
      const auto r = align::pretrain_lm(ck.model, examples, pc);
      err << "pretrain: " << r.curve.size() << " steps, last batch loss " << r.curve.back().loss << "\n";
    }
  }
  const double before = align::dataset_loss(ck.model, examples);
  align::TrainConfig tc = cfg.train;
  tc.stage = stage;
  const auto r = stage == align::Stage::Alignment ? align::train_stage1(ck.model, examples, tc, sink)
                                                  : align::train_stage2(ck.model, examples, tc, sink);
  const double after = align::dataset_loss(ck.model, examples);
  err << "stage " << a.stage << ": " << r.curve.size() << " steps, loss " << before << " -> " << after << "\n";
  align::save_checkpoint(a.out, ck.model, ck.vocab);
  if (!a.loss_log.empty()) io::write_file_atomic(a.loss_log, log);
  return kExitOk;
}

struct DecodeArgs {
  Common common;
  std::string checkpoint, data, clips, midi_dir, out, gold_out;
  int max_new = 0;
};

int cmd_decode(const DecodeArgs& a, std::ostream& out, std::ostream&) {
  const PipelineConfig cfg = load_config(a.common);
  const std::string midi_dir = a.midi_dir.empty() ? cfg.input_dir : a.midi_dir;
  if (midi_dir.empty()) throw Error("decode needs --midi-dir (or paths.input_dir in the config)");
  const align::Checkpoint ck = align::load_checkpoint(a.checkpoint);
  const auto entries = read_dataset(a.data);
  ClipLibrary clips(a.clips, midi_dir, cfg.quant);
  const int max_new = a.max_new > 0 ? a.max_new : ck.model.config.max_seq;
  std::string pred, gold;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    const align::Mat prefix = align::project(clips.pooled(e.clip_id, ck.model.encoder), ck.model.projection);
    const auto ids = align::greedy_decode(prefix, align::make_prompt(e.question, ck.vocab), ck.model.lm,
                                          ck.model.lora.empty() ? nullptr : &ck.model.lora, max_new,
                                          align::TextVocab::kEos);
    const std::string id = e.clip_id + "#" + std::to_string(i);
    pred += ojson{{"id", id}, {"text", ck.vocab.decode(ids)}}.dump() + "\n";
    gold += ojson{{"id", id}, {"text", e.answer}}.dump() + "\n";
  }
  emit(a.out, pred, out);
  if (!a.gold_out.empty()) io::write_file_atomic(a.gold_out, gold);
  return kExitOk;
}

struct EvalArgs {
  Common common;
  std::string pred, gold, out, embeddings;
  std::size_t hash_dim = 0;
};

int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream&) {
  auto read_texts = [](const std::string& path) {
    return read_jsonl<std::pair<std::string, std::string>>(path, [](const std::string& line) {
      const ojson j = parse_object(line);
      return std::make_pair(get_string(j, "id"), get_string(j, "text"));
    });
  };
  const auto pred = read_texts(a.pred);
  std::map<std::string, std::string> gold;
  for (auto& [id, text] : read_texts(a.gold))
    if (!gold.emplace(id, text).second) throw Error(a.gold + ": duplicate id " + id);
  std::vector<std::string> ids, hyps, refs;
  std::set<std::string> seen;
  for (const auto& [id, text] : pred) {
    auto it = gold.find(id);
    if (it == gold.end()) throw Error(a.pred + ": id " + id + " has no gold text");
    if (!seen.insert(id).second) throw Error(a.pred + ": duplicate id " + id);
    ids.push_back(id);
    hyps.push_back(text);
    refs.push_back(it->second);
  }
  if (ids.size() != gold.size()) throw Error(a.gold + ": " + std::to_string(gold.size() - ids.size()) + " ids have no prediction");

  std::unique_ptr<metrics::EmbeddingProvider> provider;
  if (!a.embeddings.empty()) provider = std::make_unique<metrics::FileEmbeddingProvider>(a.embeddings);
  else if (a.hash_dim > 0) provider = std::make_unique<metrics::HashEmbeddingProvider>(a.hash_dim, a.common.seed);
  metrics::EvalOptions opts;
  opts.provider = provider.get();
  opts.jobs = a.common.jobs;
  emit(a.out, metrics::evaluate(ids, hyps, refs, opts).to_json() + "\n", out);
  return kExitOk;
}

const std::vector<std::string> kSubcommands = {"parse",    "tokenize", "segment", "abc",    "features", "annotate",
                                               "gen-qa",   "assemble", "train",   "decode", "eval",     "selftest"};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"MIDI to language-model pipeline: parsing, tokenization, annotation data and alignment training",
               "midilm"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  ParseArgs parse_a;
  auto* parse = app.add_subcommand("parse", "Parse a Standard MIDI File into notes JSON");
  add_common(parse, parse_a.common, false);
  parse->add_option("input", parse_a.input, "MIDI file")->required();
  parse->add_option("-o,--out", parse_a.out, "Output file (default stdout)");

  TokenizeArgs tok_a;
  auto* tok = app.add_subcommand("tokenize", "Convert a MIDI file to octuple tokens, one per line");
  add_common(tok, tok_a.common, false);
  tok->add_option("input", tok_a.input, "MIDI file")->required();
  tok->add_option("-o,--out", tok_a.out, "Output file (default stdout)");

  SegmentArgs seg_a;
  auto* seg = app.add_subcommand("segment", "Select non-overlapping clips; writes clip JSONL");
  add_common(seg, seg_a.common, true);
  seg->add_option("inputs", seg_a.inputs, "MIDI files (piece id = file stem)")->required();
  seg->add_option("-o,--out", seg_a.out, "Output file (default stdout)");
  seg->add_option("--target", seg_a.target_s, "Clip length in seconds")->capture_default_str();
  seg->add_option("--count", seg_a.count, "Clips per piece")->capture_default_str();

  AbcArgs abc_a;
  auto* abc_cmd = app.add_subcommand("abc", "Convert a MIDI file to ABC notation");
  add_common(abc_cmd, abc_a.common, false);
  abc_cmd->add_option("input", abc_a.input, "MIDI file")->required();
  abc_cmd->add_option("-o,--out", abc_a.out, "Output file (default stdout)");

  FeaturesArgs feat_a;
  auto* feat = app.add_subcommand("features", "Estimate tempo, key and time signature; writes JSONL");
  add_common(feat, feat_a.common, true);
  feat->add_option("inputs", feat_a.inputs, "MIDI files (piece id = file stem)")->required();
  feat->add_option("-o,--out", feat_a.out, "Output file (default stdout)");

  AnnotateArgs ann_a;
  auto* ann = app.add_subcommand("annotate", "Query the LLM for tags and write annotation JSONL");
  add_common(ann, ann_a.common, true);
  ann->add_option("--sources", ann_a.sources, "JSONL of {piece_id, title, composer, source_text}")->required();
  ann->add_option("--midi-dir", ann_a.midi_dir, "Directory of <piece_id>.mid for features (default paths.input_dir)");
  ann->add_option("--responses", ann_a.responses, "Directory of recorded <piece_id>.txt responses to replay");
  ann->add_option("--cache", ann_a.cache, "Response cache keyed by source digest (default paths.cache_dir)");
  ann->add_option("--llm-log", ann_a.llm_log, "JSONL log of live LLM requests and responses");
  ann->add_option("-o,--out", ann_a.out, "Output file (default stdout)");

  GenQaArgs qa_a;
  auto* qa = app.add_subcommand("gen-qa", "Generate template Q&A pairs per clip");
  add_common(qa, qa_a.common, false);
  qa->add_option("--annotations", qa_a.annotations, "Annotation JSONL")->required();
  qa->add_option("--clips", qa_a.clips, "Clip JSONL")->required();
  qa->add_option("--midi-dir", qa_a.midi_dir, "Directory of <piece_id>.mid; grounds feature answers in each clip");
  qa->add_flag("--paraphrase", qa_a.paraphrase, "Paraphrase questions with the LLM");
  qa->add_option("-o,--out", qa_a.out, "Output file (default stdout)");

  AssembleArgs asm_a;
  auto* assemble = app.add_subcommand("assemble", "Split pieces 90/10 and write train/test JSONL and a manifest");
  add_common(assemble, asm_a.common, false);
  assemble->add_option("--annotations", asm_a.annotations, "Annotation JSONL")->required();
  assemble->add_option("--clips", asm_a.clips, "Clip JSONL")->required();
  assemble->add_option("--qa", asm_a.qa, "Q&A JSONL")->required();
  assemble->add_option("-o,--out", asm_a.out_dir, "Output directory")->required();

  TrainArgs train_a;
  auto* train = app.add_subcommand("train", "Run stage 1 (projection) or stage 2 (projection + LoRA) training");
  add_common(train, train_a.common, false);
  train->add_option("--stage", train_a.stage, "1 (alignment) or 2 (instruction tuning)")
      ->required()
      ->check(CLI::IsMember({"1", "2", "alignment", "instruction_tuning"}));
  train->add_option("--data", train_a.data, "Dataset JSONL (from assemble)")->required();
  train->add_option("--clips", train_a.clips, "Clip JSONL")->required();
  train->add_option("--midi-dir", train_a.midi_dir, "Directory of <piece_id>.mid (default paths.input_dir)");
  train->add_option("--init", train_a.init, "Checkpoint to start from (required for stage 2)");
  train->add_option("--pretrain-epochs", train_a.pretrain_epochs,
                    "Language-model pretraining epochs for a fresh model (default pretrain.epochs)");
  train->add_option("--loss-log", train_a.loss_log, "JSONL loss log of {step, lr, loss} for this stage");
  train->add_option("-o,--out", train_a.out, "Checkpoint directory to write")->required();

  DecodeArgs dec_a;
  auto* dec = app.add_subcommand("decode", "Greedy-decode answers for a dataset; writes {id, text} JSONL");
  add_common(dec, dec_a.common, false);
  dec->add_option("--checkpoint", dec_a.checkpoint, "Checkpoint directory")->required();
  dec->add_option("--data", dec_a.data, "Dataset JSONL")->required();
  dec->add_option("--clips", dec_a.clips, "Clip JSONL")->required();
  dec->add_option("--midi-dir", dec_a.midi_dir, "Directory of <piece_id>.mid (default paths.input_dir)");
  dec->add_option("--max-new", dec_a.max_new, "Token limit per answer (default max_seq)");
  dec->add_option("--gold-out", dec_a.gold_out, "Also write the reference answers as {id, text} JSONL");
  dec->add_option("-o,--out", dec_a.out, "Output file (default stdout)");

  EvalArgs eval_a;
  auto* eval = app.add_subcommand("eval", "Score predictions against gold texts (BLEU, METEOR, ROUGE-L, BERTScore)");
  add_common(eval, eval_a.common, true);
  eval->add_option("--pred", eval_a.pred, "Predictions JSONL of {id, text}")->required();
  eval->add_option("--gold", eval_a.gold, "Gold JSONL of {id, text}")->required();
  eval->add_option("--embeddings", eval_a.embeddings, "Word vectors file (\"token v1 ... vd\") for BERTScore");
  eval->add_option("--hash-dim", eval_a.hash_dim, "Use seeded hash embeddings of this size for BERTScore");
  eval->add_option("-o,--out", eval_a.out, "Report file (default stdout)");

  Common self_a;
  auto* self = app.add_subcommand("selftest", "Run the built-in oracle checks");
  add_common(self, self_a, false);

  if (!args.empty() && !args[0].empty() && args[0][0] != '-' &&
      std::find(kSubcommands.begin(), kSubcommands.end(), args[0]) == kSubcommands.end()) {
    err << "error: unknown subcommand '" << args[0] << "' (try --help)\n";
    return kExitInput;
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitInput;
  }

  try {
    if (*parse) return cmd_parse(parse_a, out, err);
    if (*tok) return cmd_tokenize(tok_a, out, err);
    if (*seg) return cmd_segment(seg_a, out, err);
    if (*abc_cmd) return cmd_abc(abc_a, out, err);
    if (*feat) return cmd_features(feat_a, out, err);
    if (*ann) return cmd_annotate(ann_a, out, err);
    if (*qa) return cmd_gen_qa(qa_a, out, err);
    if (*assemble) return cmd_assemble(asm_a, out, err);
    if (*train) return cmd_train(train_a, out, err);
    if (*dec) return cmd_decode(dec_a, out, err);
    if (*eval) return cmd_eval(eval_a, out, err);
    if (*self) {
      load_config(self_a);
      return selftest(out) ? kExitOk : kExitInternal;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  err << "error: no subcommand\n";
  return kExitInput;
}

}  // namespace midilm::cli
