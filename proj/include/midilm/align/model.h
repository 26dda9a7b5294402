#pragma once

// Stub music encoder, projection to prefix embeddings, and a small pre-norm
// decoder-only language model with optional LoRA adapters on the attention
// query and value matrices.

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "midilm/align/config.h"
#include "midilm/octuple.h"

namespace midilm::align {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// Name and storage of one parameter block. Vectors are n x 1 matrices.
using ParamRef = std::pair<std::string, Mat*>;
using ConstParamRef = std::pair<std::string, const Mat*>;

/// Sum of eight per-field embedding tables.
struct StubEncoder {
  std::array<Mat, 8> tables;  // field_sizes[f] x M
  bool loaded = false;        // tables came from a weights file

  void init(const AlignConfig& cfg, std::uint64_t seed);
  int dim() const { return static_cast<int>(tables[0].cols()); }
};

struct Projection {
  Mat W;  // k*T x M
  Mat b;  // k*T x 1
  int prefix_count = 1;

  void init(const AlignConfig& cfg, std::uint64_t seed);
};

struct LmLayer {
  Mat ln1_g, ln1_b;
  Mat wq, wk, wv, wo;  // T x T, applied as x * W^T
  Mat ln2_g, ln2_b;
  Mat w1, b1;  // 4T x T, 4T x 1
  Mat w2, b2;  // T x 4T, T x 1
};

struct TinyLm {
  Mat tok_emb;  // V x T
  Mat pos_emb;  // max_seq x T
  std::vector<LmLayer> layers;
  Mat lnf_g, lnf_b;
  Mat head;  // V x T
  int heads = 4;

  void init(const AlignConfig& cfg, std::uint64_t seed);
  int dim() const { return static_cast<int>(tok_emb.cols()); }
  int vocab() const { return static_cast<int>(tok_emb.rows()); }
  int max_seq() const { return static_cast<int>(pos_emb.rows()); }
};

/// W_eff = W + (alpha / rank) * B * A.
struct LoraAdapter {
  Mat A;  // rank x d_in
  Mat B;  // d_out x rank, zero at init
  int rank = 8;
  double alpha = 16.0;
  std::string target;  // e.g. "lm.layer0.wq"

  double scale() const { return alpha / static_cast<double>(rank); }
  Mat delta() const { return scale() * B * A; }
};

/// Two adapters per layer: index 2*l targets wq, 2*l + 1 targets wv.
struct LoraSet {
  std::vector<LoraAdapter> adapters;

  void init(const AlignConfig& cfg, std::uint64_t seed);
  bool empty() const { return adapters.empty(); }
  const LoraAdapter& q(std::size_t layer) const { return adapters[2 * layer]; }
  const LoraAdapter& v(std::size_t layer) const { return adapters[2 * layer + 1]; }
};

struct AlignModel {
  AlignConfig config;
  StubEncoder encoder;
  Projection projection;
  TinyLm lm;
  LoraSet lora;  // empty until stage 2

  /// Randomly initialized model; LoRA is not attached.
  static AlignModel create(const AlignConfig& cfg);
  void attach_lora();

  std::vector<ParamRef> encoder_params();
  std::vector<ParamRef> projection_params();
  std::vector<ParamRef> lm_params();
  std::vector<ParamRef> lora_params();
  std::vector<ParamRef> all_params();
  std::vector<ConstParamRef> all_params() const;
};

/// Row i is the sum of the eight field embeddings of token i.
Mat encode(const std::vector<octuple::OctupleToken>& tokens, const StubEncoder& enc);
Vec mean_pool(const Mat& hidden);
/// k x T prefix rows.
Mat project(const Vec& pooled, const Projection& proj);

/// Logits for every position of [prefix rows; embedded text], (k + n) x V.
Mat forward_lm(const Mat& prefix, const std::vector<int>& text_ids, const TinyLm& lm, const LoraSet* adapters = nullptr);

/// Row-wise softmax, max-shifted.
Mat softmax_rows(const Mat& logits);

/// Mean next-token cross-entropy over answer positions. Logits row r
/// predicts the token after row r, so text position p (p >= 1) with
/// answer_mask[p] set is scored against row (rows - n) + p - 1.
double masked_cross_entropy(const Mat& logits, const std::vector<int>& text_ids, const std::vector<std::uint8_t>& answer_mask);

/// FNV-1a over the raw bytes of the given blocks, in order.
std::uint64_t checksum(const std::vector<ConstParamRef>& params);
std::uint64_t checksum(const std::vector<ParamRef>& params);

}  // namespace midilm::align
