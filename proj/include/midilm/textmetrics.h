#pragma once

// Caption and answer quality metrics: BLEU, METEOR, ROUGE-L and an
// embedding-based greedy-matching score with a pluggable embedding source.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "midilm/error.h"

namespace midilm::metrics {

enum class MetricErrc { EmptyCorpus, LengthMismatch, ProviderDimensionMismatch, BadEmbeddingFile };
using MetricError = KindedError<MetricErrc>;

using Tokens = std::vector<std::string>;

/// Lowercases ASCII letters, splits on whitespace and makes every ASCII
/// punctuation character its own token.
Tokens tokenize_text(const std::string& text);

/// Corpus BLEU from pooled clipped n-gram counts, one reference per
/// hypothesis. A zero match count for n >= 2 is smoothed to 1/(total + 1).
double bleu(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs, int max_n = 4);

/// BLEU of a single pair (a one-sentence corpus).
double sentence_bleu(const Tokens& hyp, const Tokens& ref, int max_n = 4);

std::size_t lcs_length(const Tokens& a, const Tokens& b);
double rouge_l(const Tokens& hyp, const Tokens& ref, double beta = 1.0);

/// Porter (1980) suffix-stripping stemmer. Tokens that are not all
/// lowercase ASCII letters are returned unchanged.
std::string porter_stem(const std::string& word);

struct MeteorAlignment {
  std::size_t exact = 0;
  std::size_t stemmed = 0;
  std::size_t chunks = 0;
  /// (hyp index, ref index), sorted by hyp index.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;

  std::size_t matches() const { return exact + stemmed; }
};

struct MeteorOptions {
  bool use_stemming = true;
  /// Search budget; when exhausted the best alignment found so far is used.
  std::size_t node_limit = 2'000'000;
};

/// Alignment with the most exact matches, then the most total matches, then
/// the fewest chunks. Ties resolve to the first alignment in search order.
MeteorAlignment meteor_align(const Tokens& hyp, const Tokens& ref, const MeteorOptions& opts = {});

/// Score from an alignment: Fmean * (1 - 0.5 * (chunks / matches)^3).
double meteor_score(const MeteorAlignment& alignment, std::size_t hyp_len, std::size_t ref_len);
double meteor(const Tokens& hyp, const Tokens& ref, const MeteorOptions& opts = {});

/// Maps tokens to fixed-dimension vectors.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::size_t dim() const = 0;
  virtual std::vector<std::vector<double>> embed(const Tokens& tokens) const = 0;
  /// Short description recorded in metric reports.
  virtual std::string name() const = 0;
};

/// Seeded pseudo-random nonnegative vectors keyed by token text.
class HashEmbeddingProvider : public EmbeddingProvider {
 public:
  explicit HashEmbeddingProvider(std::size_t dim = 64, std::uint64_t seed = 0);
  std::size_t dim() const override { return dim_; }
  std::vector<std::vector<double>> embed(const Tokens& tokens) const override;
  std::string name() const override;

 private:
  std::size_t dim_;
  std::uint64_t seed_;
};

/// Vectors read from a text file with one "token v1 v2 ... vd" line per
/// token. Unknown tokens map to the zero vector.
class FileEmbeddingProvider : public EmbeddingProvider {
 public:
  explicit FileEmbeddingProvider(const std::string& path);
  std::size_t dim() const override { return dim_; }
  std::vector<std::vector<double>> embed(const Tokens& tokens) const override;
  std::string name() const override { return "file:" + path_; }

 private:
  std::string path_;
  std::size_t dim_ = 0;
  std::map<std::string, std::vector<double>> table_;
};

struct PrfScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Greedy cosine matching without baseline rescaling. Zero vectors have
/// similarity 0 with everything. Either side empty gives (0, 0, 0).
PrfScore bert_score(const Tokens& hyp, const Tokens& ref, const EmbeddingProvider& provider);

struct SampleScores {
  std::string id;
  double bleu = 0.0;  // sentence level
  double meteor = 0.0;
  double rouge_l = 0.0;
  std::optional<double> bert_score;  // F1
};

struct MetricReport {
  double bleu = 0.0;     // pooled corpus counts
  double meteor = 0.0;   // mean over samples
  double rouge_l = 0.0;  // mean over samples
  std::optional<double> bert_score;
  std::vector<SampleScores> per_sample;
  std::map<std::string, std::string> variants;

  std::string to_json() const;
};

struct EvalOptions {
  const EmbeddingProvider* provider = nullptr;  // no embedding score when null
  unsigned jobs = 1;
  double rouge_beta = 1.0;
  MeteorOptions meteor;
};

/// Scores aligned hypothesis/reference lists. Results do not depend on jobs.
MetricReport evaluate(const std::vector<std::string>& ids, const std::vector<std::string>& hyps,
                      const std::vector<std::string>& refs, const EvalOptions& opts = {});

}  // namespace midilm::metrics
