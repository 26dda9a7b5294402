#pragma once

// Batched forward and backward passes of the language model over several
// sequences stacked row-wise. Dense products run on the stacked rows;
// attention and adapters run per sequence.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "midilm/align/model.h"

namespace midilm::align {

struct SeqView {
  const Mat* prefix = nullptr;                      // k x T; null or 0 rows for text only
  const std::vector<int>* ids = nullptr;            // text ids
  const std::vector<std::uint8_t>* mask = nullptr;  // answer positions, same length as ids
  const LoraSet* lora = nullptr;                    // null or empty for the base model
};

struct BackwardRequest {
  bool prefix = false;
  bool lora = false;
  bool base = false;
};

struct BatchGrads {
  std::vector<Mat> prefix;        // per sequence, k x T
  std::map<std::string, Mat> blocks;  // keyed like AlignModel parameter names
};

class BatchEngine {
 public:
  explicit BatchEngine(const TinyLm& lm) : lm_(lm) {}

  /// Mean over sequences of each sequence's mean answer-token loss.
  double forward(const std::vector<SeqView>& seqs, bool keep_cache);

  /// Full logits for one sequence (every row), no cache kept.
  Mat logits(const SeqView& seq);

  const std::vector<double>& sequence_losses() const { return seq_loss_; }

  /// Gradients of the last cached forward. All sequences must share one
  /// adapter set when lora gradients are requested.
  BatchGrads backward(const BackwardRequest& req);

 private:
  struct LayerCache {
    Mat x_in, xhat1, xn1, q, k, v, att, x_mid, xhat2, xn2, h1, g;
    Vec rstd1, rstd2;
    std::vector<Mat> probs;  // per sequence and head
  };

  void embed(const std::vector<SeqView>& seqs, Mat& x);
  /// With `last_rows` (and no cache) the result holds only those rows.
  Mat run_layers(Mat x, bool keep_cache, const std::vector<std::size_t>* last_rows);
  Mat last_layer_rows(Mat x, const std::vector<std::size_t>& rows);

  const TinyLm& lm_;
  std::vector<SeqView> seqs_;
  std::vector<std::size_t> offsets_;
  std::vector<std::size_t> lengths_;
  std::vector<LayerCache> cache_;
  Mat x_final_in_, xhat_f_, xf_;
  Vec rstd_f_;
  std::vector<std::size_t> sel_rows_;
  std::vector<int> sel_targets_;
  std::vector<double> sel_weight_;
  Mat probs_;
  std::vector<double> seq_loss_;
};

}  // namespace midilm::align
