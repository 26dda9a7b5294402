#include <fstream>
#include <set>

#include "json.hpp"
#include "midilm/align/weights.h"
#include "midilm/cli.h"
#include "midilm/io.h"

namespace midilm::cli {
namespace {

using json = nlohmann::json;

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw CliError(CliErrc::ConfigParse, where + ": expected an object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw CliError(CliErrc::ConfigParse, where + ": unknown key '" + k + "'");
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

json quant_to_json(const octuple::QuantConfig& q) {
  json sigs = json::array();
  for (const auto& s : q.timesig_vocab) sigs.push_back({s.numerator, s.denominator});
  return json{{"positions_per_bar_unit", q.positions_per_bar_unit},
              {"duration_bins", q.duration_bins},
              {"velocity_bins", q.velocity_bins},
              {"tempo_bins", q.tempo_bins},
              {"max_bars", q.max_bars},
              {"timesig_vocab", sigs},
              {"instrument_vocab_size", q.instrument_vocab_size},
              {"keep_programs", q.keep_programs}};
}

octuple::QuantConfig quant_from_json(const json& j) {
  reject_unknown(j,
                 {"positions_per_bar_unit", "duration_bins", "velocity_bins", "tempo_bins", "max_bars",
                  "timesig_vocab", "instrument_vocab_size", "keep_programs"},
                 "quant");
  octuple::QuantConfig q;
  read(j, "positions_per_bar_unit", q.positions_per_bar_unit);
  read(j, "duration_bins", q.duration_bins);
  read(j, "velocity_bins", q.velocity_bins);
  read(j, "tempo_bins", q.tempo_bins);
  read(j, "max_bars", q.max_bars);
  if (j.contains("timesig_vocab")) {
    q.timesig_vocab.clear();
    for (const auto& s : j.at("timesig_vocab")) {
      auto v = s.get<std::vector<int>>();
      if (v.size() != 2) throw CliError(CliErrc::ConfigParse, "quant.timesig_vocab entries are [numerator, denominator]");
      q.timesig_vocab.push_back({v[0], v[1]});
    }
  }
  read(j, "instrument_vocab_size", q.instrument_vocab_size);
  read(j, "keep_programs", q.keep_programs);
  return q;
}

json llm_to_json(const llm::EndpointConfig& c) {
  return json{{"url", c.url},
              {"model", c.model},
              {"timeout_s", c.timeout_s},
              {"max_attempts", c.max_attempts},
              {"backoff_initial_s", c.backoff_initial_s},
              {"api_key_env", c.api_key_env}};
}

llm::EndpointConfig llm_from_json(const json& j) {
  reject_unknown(j, {"url", "model", "timeout_s", "max_attempts", "backoff_initial_s", "api_key_env"}, "llm");
  llm::EndpointConfig c;
  read(j, "url", c.url);
  read(j, "model", c.model);
  read(j, "timeout_s", c.timeout_s);
  read(j, "max_attempts", c.max_attempts);
  read(j, "backoff_initial_s", c.backoff_initial_s);
  read(j, "api_key_env", c.api_key_env);
  return c;
}

}  // namespace

bool operator==(const octuple::QuantConfig& a, const octuple::QuantConfig& b) {
  return a.positions_per_bar_unit == b.positions_per_bar_unit && a.duration_bins == b.duration_bins &&
         a.velocity_bins == b.velocity_bins && a.tempo_bins == b.tempo_bins && a.max_bars == b.max_bars &&
         a.timesig_vocab == b.timesig_vocab && a.instrument_vocab_size == b.instrument_vocab_size &&
         a.keep_programs == b.keep_programs;
}

bool operator==(const llm::EndpointConfig& a, const llm::EndpointConfig& b) {
  return a.url == b.url && a.model == b.model && a.timeout_s == b.timeout_s && a.max_attempts == b.max_attempts &&
         a.backoff_initial_s == b.backoff_initial_s && a.api_key_env == b.api_key_env;
}

bool operator==(const PipelineConfig& a, const PipelineConfig& b) {
  return a.input_dir == b.input_dir && a.output_dir == b.output_dir && a.cache_dir == b.cache_dir &&
         a.quant == b.quant && a.align == b.align && a.train == b.train && a.pretrain == b.pretrain &&
         a.split_seed == b.split_seed && a.qa_seed == b.qa_seed && a.llm == b.llm;
}

void PipelineConfig::validate() const {
  std::vector<std::pair<const char*, const std::string*>> paths = {
      {"input_dir", &input_dir}, {"output_dir", &output_dir}, {"cache_dir", &cache_dir}};
  for (std::size_t i = 0; i < paths.size(); ++i)
    for (std::size_t k = i + 1; k < paths.size(); ++k)
      if (!paths[i].second->empty() && *paths[i].second == *paths[k].second)
        throw CliError(CliErrc::ConfigParse,
                       std::string("paths.") + paths[i].first + " and paths." + paths[k].first + " are the same");
  if (pretrain.epochs < 0 || !(pretrain.max_lr > 0.0))
    throw CliError(CliErrc::ConfigParse, "pretrain needs epochs >= 0 and max_lr > 0");
  if (llm.max_attempts < 1 || !(llm.timeout_s > 0.0) || llm.backoff_initial_s < 0.0)
    throw CliError(CliErrc::ConfigParse, "llm needs max_attempts >= 1, timeout_s > 0, backoff_initial_s >= 0");
  try {
    quant.validate();
    align.validate();
    train.validate();
  } catch (const Error& e) {
    throw CliError(CliErrc::ConfigParse, e.what());
  }
}

std::string PipelineConfig::to_json() const {
  json j;
  j["paths"] = {{"input_dir", input_dir}, {"output_dir", output_dir}, {"cache_dir", cache_dir}};
  j["quant"] = quant_to_json(quant);
  j["align"] = align;
  j["train"] = train;
  j["pretrain"] = {{"epochs", pretrain.epochs}, {"max_lr", pretrain.max_lr}, {"seed", pretrain.seed}};
  j["split_seed"] = split_seed;
  j["qa_seed"] = qa_seed;
  j["llm"] = llm_to_json(llm);
  return j.dump(2) + "\n";
}

PipelineConfig PipelineConfig::from_json(const std::string& text) {
  PipelineConfig c;
  try {
    const json j = json::parse(text);
    reject_unknown(j, {"paths", "quant", "align", "train", "pretrain", "split_seed", "qa_seed", "llm"}, "config");
    if (j.contains("paths")) {
      const auto& p = j["paths"];
      reject_unknown(p, {"input_dir", "output_dir", "cache_dir"}, "paths");
      read(p, "input_dir", c.input_dir);
      read(p, "output_dir", c.output_dir);
      read(p, "cache_dir", c.cache_dir);
    }
    if (j.contains("quant")) c.quant = quant_from_json(j["quant"]);
    if (j.contains("align")) c.align = j["align"].get<align::AlignConfig>();
    if (j.contains("train")) c.train = j["train"].get<align::TrainConfig>();
    if (j.contains("pretrain")) {
      const auto& p = j["pretrain"];
      reject_unknown(p, {"epochs", "max_lr", "seed"}, "pretrain");
      read(p, "epochs", c.pretrain.epochs);
      read(p, "max_lr", c.pretrain.max_lr);
      read(p, "seed", c.pretrain.seed);
    }
    read(j, "split_seed", c.split_seed);
    read(j, "qa_seed", c.qa_seed);
    if (j.contains("llm")) c.llm = llm_from_json(j["llm"]);
  } catch (const json::exception& e) {
    throw CliError(CliErrc::ConfigParse, std::string("config: ") + e.what());
  } catch (const CliError&) {
    throw;
  } catch (const Error& e) {
    throw CliError(CliErrc::ConfigParse, std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::load(const std::string& path) {
  try {
    return from_json(io::read_file(path));
  } catch (const CliError& e) {
    throw CliError(CliErrc::ConfigParse, path + ": " + e.what());
  }
}

}  // namespace midilm::cli
