#include "midilm/align/engine.h"

#include <cmath>
#include <limits>

namespace midilm::align {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

void layer_norm(const Mat& x, const Mat& g, const Mat& b, Mat& xhat, Vec& rstd, Mat& y) {
  const double inv_n = 1.0 / static_cast<double>(x.cols());
  Vec mu = x.rowwise().sum() * inv_n;
  xhat = x.colwise() - mu;
  rstd = ((xhat.array().square().rowwise().sum() * inv_n) + kLnEps).rsqrt().matrix();
  xhat = (xhat.array().colwise() * rstd.array()).matrix();
  y = ((xhat.array().rowwise() * g.col(0).transpose().array()).rowwise() + b.col(0).transpose().array()).matrix();
}

Mat layer_norm_backward(const Mat& dy, const Mat& xhat, const Vec& rstd, const Mat& g, Mat* dg, Mat* db) {
  if (dg != nullptr) *dg += (dy.array() * xhat.array()).colwise().sum().transpose().matrix();
  if (db != nullptr) *db += dy.colwise().sum().transpose();
  const double inv_n = 1.0 / static_cast<double>(dy.cols());
  Mat dxhat = (dy.array().rowwise() * g.col(0).transpose().array()).matrix();
  Vec m1 = dxhat.rowwise().sum() * inv_n;
  Vec m2 = (dxhat.array() * xhat.array()).rowwise().sum().matrix() * inv_n;
  Mat dx = ((dxhat.colwise() - m1).array() - xhat.array().colwise() * m2.array()).matrix();
  return (dx.array().colwise() * rstd.array()).matrix();
}

Mat gelu(const Mat& x) {
  return (0.5 * x.array() * (1.0 + (kGeluC * (x.array() + kGeluA * x.array().cube())).tanh())).matrix();
}

Mat gelu_grad(const Mat& x) {
  auto t = (kGeluC * (x.array() + kGeluA * x.array().cube())).tanh();
  return (0.5 * (1.0 + t) + 0.5 * x.array() * (1.0 - t.square()) * kGeluC * (1.0 + 3.0 * kGeluA * x.array().square()))
      .matrix();
}

std::string layer_name(std::size_t l, const char* part) { return "lm.layer" + std::to_string(l) + "." + part; }
std::string lora_name(std::size_t l, const char* which, const char* part) {
  return "lora.layer" + std::to_string(l) + "." + which + "." + part;
}

bool has_lora(const SeqView& s) { return s.lora != nullptr && !s.lora->empty(); }

/// Adds the adapter term of every sequence to `out` (rows stacked like `xn`).
void add_lora(const std::vector<SeqView>& seqs, const std::vector<std::size_t>& offsets,
              const std::vector<std::size_t>& lengths, const Mat& xn, std::size_t adapter, Mat& out) {
  std::size_t s = 0;
  while (s < seqs.size()) {
    std::size_t e = s + 1;
    while (e < seqs.size() && seqs[e].lora == seqs[s].lora) ++e;
    if (has_lora(seqs[s])) {
      const LoraAdapter& a = seqs[s].lora->adapters[adapter];
      const auto off = static_cast<Eigen::Index>(offsets[s]);
      const auto rows = static_cast<Eigen::Index>(offsets[e - 1] + lengths[e - 1] - offsets[s]);
      Mat u = xn.middleRows(off, rows) * a.A.transpose();
      out.middleRows(off, rows).noalias() += a.scale() * (u * a.B.transpose());
    }
    s = e;
  }
}

}  // namespace

void BatchEngine::embed(const std::vector<SeqView>& seqs, Mat& x) {
  seqs_ = seqs;
  offsets_.clear();
  lengths_.clear();
  std::size_t total = 0;
  for (const auto& s : seqs) {
    const std::size_t k = s.prefix != nullptr ? static_cast<std::size_t>(s.prefix->rows()) : 0;
    const std::size_t len = k + s.ids->size();
    if (len == 0) throw AlignError(AlignErrc::EmptySequence, "empty sequence");
    if (len > static_cast<std::size_t>(lm_.max_seq())) {
      throw AlignError(AlignErrc::SequenceTooLong, "sequence of " + std::to_string(len) + " rows exceeds max_seq " +
                                                       std::to_string(lm_.max_seq()));
    }
    if (k > 0 && s.prefix->cols() != lm_.dim()) throw AlignError(AlignErrc::ShapeMismatch, "prefix width != lm_dim");
    offsets_.push_back(total);
    lengths_.push_back(len);
    total += len;
  }
  x.resize(static_cast<Eigen::Index>(total), lm_.dim());
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const auto off = static_cast<Eigen::Index>(offsets_[s]);
    const Eigen::Index k = seqs[s].prefix != nullptr ? seqs[s].prefix->rows() : 0;
    if (k > 0) x.middleRows(off, k) = *seqs[s].prefix;
    const auto& ids = *seqs[s].ids;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (ids[p] < 0 || ids[p] >= lm_.vocab()) {
        throw AlignError(AlignErrc::FieldOutOfRange, "token id " + std::to_string(ids[p]) + " outside vocabulary");
      }
      x.row(off + k + static_cast<Eigen::Index>(p)) = lm_.tok_emb.row(ids[p]);
    }
    x.middleRows(off, static_cast<Eigen::Index>(lengths_[s])) +=
        lm_.pos_emb.topRows(static_cast<Eigen::Index>(lengths_[s]));
  }
}

Mat BatchEngine::run_layers(Mat x, bool keep_cache, const std::vector<std::size_t>* last_rows) {
  const auto T = static_cast<Eigen::Index>(lm_.dim());
  const auto H = static_cast<Eigen::Index>(lm_.heads);
  const Eigen::Index dh = T / H;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  cache_.clear();
  if (keep_cache) cache_.resize(lm_.layers.size());
  for (std::size_t l = 0; l < lm_.layers.size(); ++l) {
    const LmLayer& L = lm_.layers[l];
    if (last_rows != nullptr && !keep_cache && l + 1 == lm_.layers.size()) return last_layer_rows(std::move(x), *last_rows);
    LayerCache local;
    LayerCache& c = keep_cache ? cache_[l] : local;
    c.x_in = x;
    layer_norm(x, L.ln1_g, L.ln1_b, c.xhat1, c.rstd1, c.xn1);
    c.q.noalias() = c.xn1 * L.wq.transpose();
    c.k.noalias() = c.xn1 * L.wk.transpose();
    c.v.noalias() = c.xn1 * L.wv.transpose();
    add_lora(seqs_, offsets_, lengths_, c.xn1, 2 * l, c.q);
    add_lora(seqs_, offsets_, lengths_, c.xn1, 2 * l + 1, c.v);
    c.att.resize(x.rows(), T);
    c.probs.resize(seqs_.size() * static_cast<std::size_t>(H));
    for (std::size_t s = 0; s < seqs_.size(); ++s) {
      const auto off = static_cast<Eigen::Index>(offsets_[s]);
      const auto n = static_cast<Eigen::Index>(lengths_[s]);
      for (Eigen::Index h = 0; h < H; ++h) {
        Mat sc = c.q.block(off, h * dh, n, dh) * c.k.block(off, h * dh, n, dh).transpose() * inv_sqrt;
        for (Eigen::Index i = 0; i < n; ++i) {
          double mx = sc.row(i).head(i + 1).maxCoeff();
          double sum = 0.0;
          for (Eigen::Index j = 0; j <= i; ++j) {
            sc(i, j) = std::exp(sc(i, j) - mx);
            sum += sc(i, j);
          }
          sc.row(i).head(i + 1) /= sum;
          sc.row(i).tail(n - i - 1).setZero();
        }
        c.att.block(off, h * dh, n, dh).noalias() = sc * c.v.block(off, h * dh, n, dh);
        c.probs[s * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)] = std::move(sc);
      }
    }
    c.x_mid = x;
    c.x_mid.noalias() += c.att * L.wo.transpose();
    layer_norm(c.x_mid, L.ln2_g, L.ln2_b, c.xhat2, c.rstd2, c.xn2);
    c.h1.noalias() = c.xn2 * L.w1.transpose();
    c.h1.rowwise() += L.b1.col(0).transpose();
    c.g = gelu(c.h1);
    x = c.x_mid;
    x.noalias() += c.g * L.w2.transpose();
    x.rowwise() += L.b2.col(0).transpose();
  }
  return x;
}

Mat BatchEngine::last_layer_rows(Mat x, const std::vector<std::size_t>& rows) {
  // Keys and values are needed for every row; queries, attention output and
  // the MLP only for the rows whose logits are read.
  const LmLayer& L = lm_.layers.back();
  const std::size_t l = lm_.layers.size() - 1;
  const auto T = static_cast<Eigen::Index>(lm_.dim());
  const auto H = static_cast<Eigen::Index>(lm_.heads);
  const Eigen::Index dh = T / H;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Mat xhat, xn;
  Vec rstd;
  layer_norm(x, L.ln1_g, L.ln1_b, xhat, rstd, xn);
  Mat k = xn * L.wk.transpose();
  Mat v = xn * L.wv.transpose();
  add_lora(seqs_, offsets_, lengths_, xn, 2 * l + 1, v);
  const auto n_out = static_cast<Eigen::Index>(rows.size());
  Mat xn_sel(n_out, T);
  Mat x_sel(n_out, T);
  for (Eigen::Index i = 0; i < n_out; ++i) {
    xn_sel.row(i) = xn.row(static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)]));
    x_sel.row(i) = x.row(static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)]));
  }
  Mat q = xn_sel * L.wq.transpose();
  Mat att(n_out, T);
  std::size_t s = 0;
  for (Eigen::Index i = 0; i < n_out; ++i) {
    const std::size_t row = rows[static_cast<std::size_t>(i)];
    while (row >= offsets_[s] + lengths_[s]) ++s;
    if (seqs_[s].lora != nullptr && !seqs_[s].lora->empty()) {
      const LoraAdapter& a = seqs_[s].lora->adapters[2 * l];
      q.row(i).noalias() += a.scale() * ((xn_sel.row(i) * a.A.transpose()) * a.B.transpose());
    }
    const auto off = static_cast<Eigen::Index>(offsets_[s]);
    const auto upto = static_cast<Eigen::Index>(row) - off + 1;
    for (Eigen::Index h = 0; h < H; ++h) {
      Eigen::RowVectorXd sc = q.block(i, h * dh, 1, dh) * k.block(off, h * dh, upto, dh).transpose() * inv_sqrt;
      sc = (sc.array() - sc.maxCoeff()).exp().matrix();
      sc /= sc.sum();
      att.block(i, h * dh, 1, dh).noalias() = sc * v.block(off, h * dh, upto, dh);
    }
  }
  Mat x_mid = x_sel;
  x_mid.noalias() += att * L.wo.transpose();
  Mat xhat2, xn2;
  Vec rstd2;
  layer_norm(x_mid, L.ln2_g, L.ln2_b, xhat2, rstd2, xn2);
  Mat h1 = xn2 * L.w1.transpose();
  h1.rowwise() += L.b1.col(0).transpose();
  Mat out = x_mid;
  out.noalias() += gelu(h1) * L.w2.transpose();
  out.rowwise() += L.b2.col(0).transpose();
  return out;
}

double BatchEngine::forward(const std::vector<SeqView>& seqs, bool keep_cache) {
  Mat x;
  embed(seqs, x);

  sel_rows_.clear();
  sel_targets_.clear();
  sel_weight_.clear();
  std::vector<std::size_t> seq_of_row;
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const auto& ids = *seqs[s].ids;
    const auto& mask = *seqs[s].mask;
    if (mask.size() != ids.size()) throw AlignError(AlignErrc::ShapeMismatch, "answer mask length != text length");
    const std::size_t k = lengths_[s] - ids.size();
    std::size_t count = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (mask[p] == 0) continue;
      if (p == 0 && k == 0) throw AlignError(AlignErrc::EmptyMask, "first token has no predecessor to predict it");
      sel_rows_.push_back(offsets_[s] + k + p - 1);
      sel_targets_.push_back(ids[p]);
      seq_of_row.push_back(s);
      ++count;
    }
    if (count == 0) throw AlignError(AlignErrc::EmptyMask, "sequence has no answer positions");
    for (std::size_t i = 0; i < count; ++i) {
      sel_weight_.push_back(1.0 / (static_cast<double>(count) * static_cast<double>(seqs.size())));
    }
  }

  const auto T = static_cast<Eigen::Index>(lm_.dim());
  Mat sel;
  if (keep_cache) {
    x_final_in_ = run_layers(std::move(x), true, nullptr);
    sel.resize(static_cast<Eigen::Index>(sel_rows_.size()), T);
    for (std::size_t i = 0; i < sel_rows_.size(); ++i) {
      sel.row(static_cast<Eigen::Index>(i)) = x_final_in_.row(static_cast<Eigen::Index>(sel_rows_[i]));
    }
  } else {
    sel = run_layers(std::move(x), false, &sel_rows_);
    x_final_in_.resize(0, 0);
  }
  Mat xf;
  layer_norm(sel, lm_.lnf_g, lm_.lnf_b, xhat_f_, rstd_f_, xf);
  Mat logits = xf * lm_.head.transpose();
  probs_ = softmax_rows(logits);

  seq_loss_.assign(seqs.size(), 0.0);
  std::vector<std::size_t> counts(seqs.size(), 0);
  for (std::size_t i = 0; i < sel_rows_.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    double mx = logits.row(r).maxCoeff();
    double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    seq_loss_[seq_of_row[i]] += lse - logits(r, sel_targets_[i]);
    ++counts[seq_of_row[i]];
  }
  double total = 0.0;
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    seq_loss_[s] /= static_cast<double>(counts[s]);
    total += seq_loss_[s];
  }
  xf_ = std::move(xf);
  if (!keep_cache) cache_.clear();
  return total / static_cast<double>(seqs.size());
}

Mat BatchEngine::logits(const SeqView& seq) {
  Mat x;
  embed({seq}, x);
  x = run_layers(std::move(x), false, nullptr);
  Mat xhat;
  Vec rstd;
  Mat xf;
  layer_norm(x, lm_.lnf_g, lm_.lnf_b, xhat, rstd, xf);
  return xf * lm_.head.transpose();
}

BatchGrads BatchEngine::backward(const BackwardRequest& req) {
  if (cache_.size() != lm_.layers.size()) throw AlignError(AlignErrc::ShapeMismatch, "backward without a cached forward");
  const LoraSet* shared = seqs_.empty() ? nullptr : seqs_[0].lora;
  for (const auto& s : seqs_) {
    if (s.lora != shared) throw AlignError(AlignErrc::ShapeMismatch, "backward needs one shared adapter set");
  }
  const bool lora_on = shared != nullptr && !shared->empty();
  const auto T = static_cast<Eigen::Index>(lm_.dim());
  const auto H = static_cast<Eigen::Index>(lm_.heads);
  const Eigen::Index dh = T / H;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  BatchGrads out;
  auto block = [&](const std::string& name, const Mat& like) -> Mat& {
    auto [it, inserted] = out.blocks.try_emplace(name, Mat::Zero(like.rows(), like.cols()));
    return it->second;
  };

  Mat dlogits = probs_;
  for (std::size_t i = 0; i < sel_rows_.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    dlogits(r, sel_targets_[i]) -= 1.0;
    dlogits.row(r) *= sel_weight_[i];
  }
  if (req.base) block("lm.head", lm_.head).noalias() += dlogits.transpose() * xf_;
  Mat dxf = dlogits * lm_.head;
  Mat dsel = layer_norm_backward(dxf, xhat_f_, rstd_f_, lm_.lnf_g, req.base ? &block("lm.lnf_g", lm_.lnf_g) : nullptr,
                                 req.base ? &block("lm.lnf_b", lm_.lnf_b) : nullptr);
  Mat dx = Mat::Zero(x_final_in_.rows(), T);
  for (std::size_t i = 0; i < sel_rows_.size(); ++i) dx.row(static_cast<Eigen::Index>(sel_rows_[i])) += dsel.row(static_cast<Eigen::Index>(i));

  for (std::size_t li = lm_.layers.size(); li-- > 0;) {
    const LmLayer& L = lm_.layers[li];
    const LayerCache& c = cache_[li];
    // MLP branch.
    if (req.base) {
      block(layer_name(li, "w2"), L.w2).noalias() += dx.transpose() * c.g;
      block(layer_name(li, "b2"), L.b2) += dx.colwise().sum().transpose();
    }
    Mat dh1 = ((dx * L.w2).array() * gelu_grad(c.h1).array()).matrix();
    if (req.base) {
      block(layer_name(li, "w1"), L.w1).noalias() += dh1.transpose() * c.xn2;
      block(layer_name(li, "b1"), L.b1) += dh1.colwise().sum().transpose();
    }
    Mat dxn2 = dh1 * L.w1;
    dx += layer_norm_backward(dxn2, c.xhat2, c.rstd2, L.ln2_g,
                              req.base ? &block(layer_name(li, "ln2_g"), L.ln2_g) : nullptr,
                              req.base ? &block(layer_name(li, "ln2_b"), L.ln2_b) : nullptr);
    // Attention branch.
    if (req.base) block(layer_name(li, "wo"), L.wo).noalias() += dx.transpose() * c.att;
    Mat datt = dx * L.wo;
    Mat dq(dx.rows(), T), dk(dx.rows(), T), dv(dx.rows(), T);
    for (std::size_t s = 0; s < seqs_.size(); ++s) {
      const auto off = static_cast<Eigen::Index>(offsets_[s]);
      const auto n = static_cast<Eigen::Index>(lengths_[s]);
      for (Eigen::Index h = 0; h < H; ++h) {
        const Mat& p = c.probs[s * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)];
        auto dO = datt.block(off, h * dh, n, dh);
        Mat dp = dO * c.v.block(off, h * dh, n, dh).transpose();
        dv.block(off, h * dh, n, dh).noalias() = p.transpose() * dO;
        Vec rowdot = (dp.array() * p.array()).rowwise().sum().matrix();
        Mat ds = (p.array() * (dp.colwise() - rowdot).array()).matrix() * inv_sqrt;
        dq.block(off, h * dh, n, dh).noalias() = ds * c.k.block(off, h * dh, n, dh);
        dk.block(off, h * dh, n, dh).noalias() = ds.transpose() * c.q.block(off, h * dh, n, dh);
      }
    }
    if (req.base) {
      block(layer_name(li, "wq"), L.wq).noalias() += dq.transpose() * c.xn1;
      block(layer_name(li, "wk"), L.wk).noalias() += dk.transpose() * c.xn1;
      block(layer_name(li, "wv"), L.wv).noalias() += dv.transpose() * c.xn1;
    }
    Mat dxn1 = dq * L.wq;
    dxn1.noalias() += dk * L.wk;
    dxn1.noalias() += dv * L.wv;
    if (lora_on) {
      const char* names[2] = {"q", "v"};
      const Mat* grads[2] = {&dq, &dv};
      for (int w = 0; w < 2; ++w) {
        const LoraAdapter& a = shared->adapters[2 * li + static_cast<std::size_t>(w)];
        Mat du = a.scale() * (*grads[w] * a.B);
        if (req.lora) {
          Mat u = c.xn1 * a.A.transpose();
          block(lora_name(li, names[w], "B"), a.B).noalias() += a.scale() * (grads[w]->transpose() * u);
          block(lora_name(li, names[w], "A"), a.A).noalias() += du.transpose() * c.xn1;
        }
        dxn1.noalias() += du * a.A;
      }
    }
    dx += layer_norm_backward(dxn1, c.xhat1, c.rstd1, L.ln1_g,
                              req.base ? &block(layer_name(li, "ln1_g"), L.ln1_g) : nullptr,
                              req.base ? &block(layer_name(li, "ln1_b"), L.ln1_b) : nullptr);
  }

  for (std::size_t s = 0; s < seqs_.size(); ++s) {
    const auto off = static_cast<Eigen::Index>(offsets_[s]);
    const Eigen::Index k = seqs_[s].prefix != nullptr ? seqs_[s].prefix->rows() : 0;
    if (req.prefix) out.prefix.push_back(dx.middleRows(off, k));
    if (req.base) {
      const auto n = static_cast<Eigen::Index>(lengths_[s]);
      block("lm.pos_emb", lm_.pos_emb).topRows(n) += dx.middleRows(off, n);
      Mat& te = block("lm.tok_emb", lm_.tok_emb);
      const auto& ids = *seqs_[s].ids;
      for (std::size_t p = 0; p < ids.size(); ++p) te.row(ids[p]) += dx.row(off + k + static_cast<Eigen::Index>(p));
    }
  }
  return out;
}

}  // namespace midilm::align
