#include "midilm/textmetrics.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "json.hpp"

namespace midilm::metrics {

namespace {

bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }
bool is_punct(unsigned char c) { return c < 0x80 && std::ispunct(c) != 0; }

struct NgramStats {
  std::vector<std::size_t> matched;
  std::vector<std::size_t> total;
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;

  explicit NgramStats(int max_n) : matched(static_cast<std::size_t>(max_n)), total(static_cast<std::size_t>(max_n)) {}

  void add(const NgramStats& o) {
    for (std::size_t i = 0; i < matched.size(); ++i) {
      matched[i] += o.matched[i];
      total[i] += o.total[i];
    }
    hyp_len += o.hyp_len;
    ref_len += o.ref_len;
  }
};

std::string join_ngram(const Tokens& t, std::size_t start, std::size_t n) {
  std::string key;
  for (std::size_t i = 0; i < n; ++i) {
    key += t[start + i];
    key += '\x1f';
  }
  return key;
}

NgramStats ngram_stats(const Tokens& hyp, const Tokens& ref, int max_n) {
  NgramStats s(max_n);
  s.hyp_len = hyp.size();
  s.ref_len = ref.size();
  for (int n = 1; n <= max_n; ++n) {
    const auto un = static_cast<std::size_t>(n);
    std::unordered_map<std::string, std::size_t> ref_counts;
    for (std::size_t i = 0; i + un <= ref.size(); ++i) ++ref_counts[join_ngram(ref, i, un)];
    std::unordered_map<std::string, std::size_t> hyp_counts;
    for (std::size_t i = 0; i + un <= hyp.size(); ++i) ++hyp_counts[join_ngram(hyp, i, un)];
    std::size_t matched = 0;
    std::size_t total = 0;
    for (const auto& [gram, count] : hyp_counts) {
      total += count;
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) matched += std::min(count, it->second);
    }
    s.matched[un - 1] = matched;
    s.total[un - 1] = total;
  }
  return s;
}

double bleu_from_stats(const NgramStats& s) {
  if (s.hyp_len == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t i = 0; i < s.matched.size(); ++i) {
    double p;
    if (i == 0) {
      if (s.matched[0] == 0) return 0.0;
      p = static_cast<double>(s.matched[0]) / static_cast<double>(s.total[0]);
    } else if (s.matched[i] == 0) {
      p = 1.0 / static_cast<double>(s.total[i] + 1);
    } else {
      p = static_cast<double>(s.matched[i]) / static_cast<double>(s.total[i]);
    }
    log_sum += std::log(p);
  }
  double geo = std::exp(log_sum / static_cast<double>(s.matched.size()));
  double c = static_cast<double>(s.hyp_len);
  double r = static_cast<double>(s.ref_len);
  double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return geo * bp;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// Branch-and-bound search over one-to-one alignments, hyp positions in order.
class MeteorSearch {
 public:
  MeteorSearch(const Tokens& hyp, const Tokens& ref, const MeteorOptions& opts) : opts_(opts) {
    std::unordered_map<std::string, int> word_ids;
    std::unordered_map<std::string, int> stem_ids;
    auto intern = [](std::unordered_map<std::string, int>& m, const std::string& s) {
      return m.emplace(s, static_cast<int>(m.size())).first->second;
    };
    auto encode = [&](const Tokens& t, std::vector<int>& w, std::vector<int>& s) {
      for (const auto& tok : t) {
        w.push_back(intern(word_ids, tok));
        s.push_back(opts.use_stemming ? intern(stem_ids, porter_stem(tok)) : w.back());
      }
    };
    encode(hyp, hw_, hs_);
    encode(ref, rw_, rs_);
    if (!opts.use_stemming) stem_ids = word_ids;
    hyp_rem_w_.assign(word_ids.size(), 0);
    ref_free_w_.assign(word_ids.size(), 0);
    hyp_rem_s_.assign(std::max(stem_ids.size(), word_ids.size()), 0);
    ref_free_s_.assign(hyp_rem_s_.size(), 0);
    for (std::size_t i = 0; i < hw_.size(); ++i) {
      ++hyp_rem_w_[static_cast<std::size_t>(hw_[i])];
      ++hyp_rem_s_[static_cast<std::size_t>(hs_[i])];
    }
    for (std::size_t j = 0; j < rw_.size(); ++j) {
      ++ref_free_w_[static_cast<std::size_t>(rw_[j])];
      ++ref_free_s_[static_cast<std::size_t>(rs_[j])];
    }
    target_exact_ = bound(hyp_rem_w_, ref_free_w_);
    target_total_ = bound(hyp_rem_s_, ref_free_s_);
    used_.assign(rw_.size(), false);
  }

  MeteorAlignment run() {
    best_.chunks = std::numeric_limits<std::size_t>::max();
    if (target_total_ == 0) {
      best_.chunks = 0;
      return best_;
    }
    dfs(0, 0, 0, 0);
    return best_;
  }

 private:
  static std::size_t bound(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    std::size_t s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::min(a[i], b[i]);
    return s;
  }

  void set_used(std::size_t j, bool used) {
    used_[j] = used;
    auto& w = ref_free_w_[static_cast<std::size_t>(rw_[j])];
    auto& st = ref_free_s_[static_cast<std::size_t>(rs_[j])];
    if (used) {
      --w;
      --st;
    } else {
      ++w;
      ++st;
    }
  }

  void dfs(std::size_t i, std::size_t exact, std::size_t total, std::size_t chunks) {
    if (++nodes_ > opts_.node_limit && best_.chunks != std::numeric_limits<std::size_t>::max()) return;
    if (chunks >= best_.chunks) return;
    if (exact + bound(hyp_rem_w_, ref_free_w_) < target_exact_) return;
    if (total + bound(hyp_rem_s_, ref_free_s_) < target_total_) return;
    if (total == target_total_) {
      if (exact < target_exact_) return;
      best_.exact = exact;
      best_.stemmed = total - exact;
      best_.chunks = chunks;
      best_.pairs = pairs_;
      return;
    }
    if (i == hw_.size()) return;
    --hyp_rem_w_[static_cast<std::size_t>(hw_[i])];
    --hyp_rem_s_[static_cast<std::size_t>(hs_[i])];

    const bool can_extend = !pairs_.empty() && pairs_.back().first + 1 == i;
    const std::size_t extend_j = can_extend ? pairs_.back().second + 1 : rw_.size();
    auto try_ref = [&](std::size_t j) {
      if (used_[j]) return;
      bool is_exact = hw_[i] == rw_[j];
      if (!is_exact && hs_[i] != rs_[j]) return;
      set_used(j, true);
      pairs_.emplace_back(i, j);
      dfs(i + 1, exact + (is_exact ? 1 : 0), total + 1, chunks + (j == extend_j ? 0 : 1));
      pairs_.pop_back();
      set_used(j, false);
    };
    if (extend_j < rw_.size()) try_ref(extend_j);
    for (std::size_t j = 0; j < rw_.size(); ++j) {
      if (j != extend_j) try_ref(j);
    }
    dfs(i + 1, exact, total, chunks);

    ++hyp_rem_w_[static_cast<std::size_t>(hw_[i])];
    ++hyp_rem_s_[static_cast<std::size_t>(hs_[i])];
  }

  MeteorOptions opts_;
  std::vector<int> hw_, hs_, rw_, rs_;
  std::vector<std::size_t> hyp_rem_w_, ref_free_w_, hyp_rem_s_, ref_free_s_;
  std::vector<bool> used_;
  std::vector<std::pair<std::size_t, std::size_t>> pairs_;
  std::size_t target_exact_ = 0;
  std::size_t target_total_ = 0;
  std::size_t nodes_ = 0;
  MeteorAlignment best_;
};

}  // namespace

Tokens tokenize_text(const std::string& text) {
  Tokens out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    auto c = static_cast<unsigned char>(ch);
    if (is_space(c)) {
      flush();
    } else if (is_punct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur += (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : ch;
    }
  }
  flush();
  return out;
}

double bleu(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs, int max_n) {
  if (hyps.empty()) throw MetricError(MetricErrc::EmptyCorpus, "BLEU needs at least one hypothesis");
  if (hyps.size() != refs.size()) {
    throw MetricError(MetricErrc::LengthMismatch, "BLEU: " + std::to_string(hyps.size()) + " hypotheses but " +
                                                      std::to_string(refs.size()) + " references");
  }
  NgramStats pooled(max_n);
  for (std::size_t i = 0; i < hyps.size(); ++i) pooled.add(ngram_stats(hyps[i], refs[i], max_n));
  return bleu_from_stats(pooled);
}

double sentence_bleu(const Tokens& hyp, const Tokens& ref, int max_n) {
  return bleu_from_stats(ngram_stats(hyp, ref, max_n));
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0);
  std::vector<std::size_t> cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const Tokens& hyp, const Tokens& ref, double beta) {
  if (hyp.empty() || ref.empty()) return 0.0;
  double l = static_cast<double>(lcs_length(hyp, ref));
  if (l == 0.0) return 0.0;
  double p = l / static_cast<double>(hyp.size());
  double r = l / static_cast<double>(ref.size());
  double b2 = beta * beta;
  return (1.0 + b2) * p * r / (r + b2 * p);
}

MeteorAlignment meteor_align(const Tokens& hyp, const Tokens& ref, const MeteorOptions& opts) {
  return MeteorSearch(hyp, ref, opts).run();
}

double meteor_score(const MeteorAlignment& a, std::size_t hyp_len, std::size_t ref_len) {
  const std::size_t m = a.matches();
  if (m == 0 || hyp_len == 0 || ref_len == 0) return 0.0;
  double p = static_cast<double>(m) / static_cast<double>(hyp_len);
  double r = static_cast<double>(m) / static_cast<double>(ref_len);
  double fmean = 10.0 * p * r / (r + 9.0 * p);
  double frag = static_cast<double>(a.chunks) / static_cast<double>(m);
  double penalty = 0.5 * frag * frag * frag;
  return fmean * (1.0 - penalty);
}

double meteor(const Tokens& hyp, const Tokens& ref, const MeteorOptions& opts) {
  return meteor_score(meteor_align(hyp, ref, opts), hyp.size(), ref.size());
}

HashEmbeddingProvider::HashEmbeddingProvider(std::size_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {}

std::vector<std::vector<double>> HashEmbeddingProvider::embed(const Tokens& tokens) const {
  std::vector<std::vector<double>> out;
  out.reserve(tokens.size());
  for (const auto& tok : tokens) {
    std::uint64_t state = fnv1a(tok) ^ splitmix64(seed_);
    std::vector<double> v(dim_);
    for (std::size_t k = 0; k < dim_; ++k) {
      state = splitmix64(state);
      v[k] = static_cast<double>(state >> 11) * 0x1.0p-53;
    }
    out.push_back(std::move(v));
  }
  return out;
}

std::string HashEmbeddingProvider::name() const {
  return "hash(dim=" + std::to_string(dim_) + ",seed=" + std::to_string(seed_) + ")";
}

FileEmbeddingProvider::FileEmbeddingProvider(const std::string& path) : path_(path) {
  std::ifstream in(path);
  if (!in) throw MetricError(MetricErrc::BadEmbeddingFile, "cannot open embedding file " + path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ss(line);
    std::string token;
    if (!(ss >> token)) continue;
    std::vector<double> v;
    std::string num;
    while (ss >> num) {
      try {
        std::size_t used = 0;
        v.push_back(std::stod(num, &used));
        if (used != num.size()) throw std::invalid_argument(num);
      } catch (const std::exception&) {
        throw MetricError(MetricErrc::BadEmbeddingFile,
                          path + ":" + std::to_string(line_no) + ": bad number '" + num + "'");
      }
    }
    if (dim_ == 0) dim_ = v.size();
    if (v.size() != dim_ || dim_ == 0) {
      throw MetricError(MetricErrc::ProviderDimensionMismatch,
                        path + ":" + std::to_string(line_no) + ": expected " + std::to_string(dim_) + " values");
    }
    table_[token] = std::move(v);
  }
  if (dim_ == 0) throw MetricError(MetricErrc::BadEmbeddingFile, path + ": no vectors");
}

std::vector<std::vector<double>> FileEmbeddingProvider::embed(const Tokens& tokens) const {
  std::vector<std::vector<double>> out;
  out.reserve(tokens.size());
  for (const auto& tok : tokens) {
    auto it = table_.find(tok);
    out.push_back(it != table_.end() ? it->second : std::vector<double>(dim_, 0.0));
  }
  return out;
}

PrfScore bert_score(const Tokens& hyp, const Tokens& ref, const EmbeddingProvider& provider) {
  if (hyp.empty() || ref.empty()) return {};
  auto h = provider.embed(hyp);
  auto r = provider.embed(ref);
  const std::size_t d = provider.dim();
  auto check = [&](const std::vector<std::vector<double>>& vs, std::size_t n) {
    if (vs.size() != n) {
      throw MetricError(MetricErrc::ProviderDimensionMismatch, "provider returned the wrong number of vectors");
    }
    for (const auto& v : vs) {
      if (v.size() != d) {
        throw MetricError(MetricErrc::ProviderDimensionMismatch,
                          "provider returned a " + std::to_string(v.size()) + "-d vector, expected " +
                              std::to_string(d));
      }
    }
  };
  check(h, hyp.size());
  check(r, ref.size());
  std::vector<double> hn(h.size());
  std::vector<double> rn(r.size());
  for (std::size_t i = 0; i < h.size(); ++i) hn[i] = norm(h[i]);
  for (std::size_t j = 0; j < r.size(); ++j) rn[j] = norm(r[j]);
  std::vector<double> best_h(h.size(), -std::numeric_limits<double>::infinity());
  std::vector<double> best_r(r.size(), -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < h.size(); ++i) {
    for (std::size_t j = 0; j < r.size(); ++j) {
      double sim = 0.0;
      if (hn[i] > 0.0 && rn[j] > 0.0) {
        double dot = 0.0;
        for (std::size_t k = 0; k < d; ++k) dot += h[i][k] * r[j][k];
        sim = dot / (hn[i] * rn[j]);
      }
      best_h[i] = std::max(best_h[i], sim);
      best_r[j] = std::max(best_r[j], sim);
    }
  }
  PrfScore s;
  for (double v : best_h) s.precision += v;
  for (double v : best_r) s.recall += v;
  s.precision /= static_cast<double>(h.size());
  s.recall /= static_cast<double>(r.size());
  s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["bleu"] = bleu;
  j["meteor"] = meteor;
  j["rouge_l"] = rouge_l;
  j["bert_score"] = bert_score ? nlohmann::ordered_json(*bert_score) : nlohmann::ordered_json(nullptr);
  j["variants"] = variants;
  auto samples = nlohmann::ordered_json::array();
  for (const auto& s : per_sample) {
    nlohmann::ordered_json o;
    o["id"] = s.id;
    o["bleu"] = s.bleu;
    o["meteor"] = s.meteor;
    o["rouge_l"] = s.rouge_l;
    o["bert_score"] = s.bert_score ? nlohmann::ordered_json(*s.bert_score) : nlohmann::ordered_json(nullptr);
    samples.push_back(std::move(o));
  }
  j["per_sample"] = std::move(samples);
  return j.dump(2);
}

MetricReport evaluate(const std::vector<std::string>& ids, const std::vector<std::string>& hyps,
                      const std::vector<std::string>& refs, const EvalOptions& opts) {
  if (hyps.empty()) throw MetricError(MetricErrc::EmptyCorpus, "nothing to evaluate");
  if (hyps.size() != refs.size() || ids.size() != hyps.size()) {
    throw MetricError(MetricErrc::LengthMismatch, "ids, predictions and references differ in length");
  }
  const std::size_t n = hyps.size();
  MetricReport report;
  report.per_sample.resize(n);
  std::vector<NgramStats> stats(n, NgramStats(4));

  auto work = [&](std::size_t i) {
    Tokens h = tokenize_text(hyps[i]);
    Tokens r = tokenize_text(refs[i]);
    SampleScores& s = report.per_sample[i];
    s.id = ids[i];
    stats[i] = ngram_stats(h, r, 4);
    s.bleu = bleu_from_stats(stats[i]);
    s.meteor = meteor(h, r, opts.meteor);
    s.rouge_l = rouge_l(h, r, opts.rouge_beta);
    if (opts.provider != nullptr) s.bert_score = bert_score(h, r, *opts.provider).f1;
  };
  const unsigned jobs = std::max(1u, std::min<unsigned>(opts.jobs, static_cast<unsigned>(n)));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < jobs; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < n; i += jobs) work(i);
      });
    }
    for (auto& th : pool) th.join();
  }

  NgramStats pooled(4);
  double bert_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    pooled.add(stats[i]);
    report.meteor += report.per_sample[i].meteor;
    report.rouge_l += report.per_sample[i].rouge_l;
    if (report.per_sample[i].bert_score) bert_sum += *report.per_sample[i].bert_score;
  }
  report.bleu = bleu_from_stats(pooled);
  report.meteor /= static_cast<double>(n);
  report.rouge_l /= static_cast<double>(n);
  if (opts.provider != nullptr) report.bert_score = bert_sum / static_cast<double>(n);

  std::ostringstream beta;
  beta << opts.rouge_beta;
  report.variants = {
      {"tokenizer", "lowercase, whitespace split, ASCII punctuation as separate tokens"},
      {"bleu", "corpus, pooled clipped counts, n=1..4 uniform weights, zero counts for n>=2 smoothed to 1/(total+1)"},
      {"meteor", std::string("exact") + (opts.meteor.use_stemming ? "+porter-stem" : "") +
                     " matching, Fmean=10PR/(R+9P), penalty=0.5*(chunks/matches)^3, corpus mean"},
      {"rouge_l", "LCS F-measure, beta=" + beta.str() + ", corpus mean"},
      {"bert_score", opts.provider != nullptr ? "greedy cosine F1, no rescaling, provider " + opts.provider->name()
                                              : "not computed"}};
  return report;
}

}  // namespace midilm::metrics
