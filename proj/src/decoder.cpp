#include "decoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace gcp::detail {

namespace {

constexpr double kLayerNormEps = 1e-5;

// Site ids keep dropout masks of different sublayers independent.
enum Site : std::uint64_t { kSelfSite = 1, kCrossSite = 2, kFfnSite = 3 };

struct View {
  const double* p;
  std::size_t rows;
  std::size_t cols;
};

View view(const GcpModel& m, std::size_t offset, std::size_t rows, std::size_t cols) {
  return {m.parameters().data() + offset, rows, cols};
}

// Y = X W + b, W is in x out.
Mat linear(const Mat& x, View w, const double* b) {
  Mat y(x.rows, w.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double* yr = y.row(i);
    for (std::size_t o = 0; o < w.cols; ++o) yr[o] = b[o];
    const double* xr = x.row(i);
    for (std::size_t k = 0; k < w.rows; ++k) {
      const double xv = xr[k];
      const double* wr = w.p + k * w.cols;
      for (std::size_t o = 0; o < w.cols; ++o) yr[o] += xv * wr[o];
    }
  }
  return y;
}

// Accumulates dW += X^T dY, db += colsum(dY); returns dX = dY W^T.
Mat linear_backward(const Mat& x, View w, const Mat& dy, double* dw, double* db) {
  Mat dx(x.rows, w.rows);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const double* xr = x.row(i);
    const double* dyr = dy.row(i);
    double* dxr = dx.row(i);
    for (std::size_t o = 0; o < w.cols; ++o) db[o] += dyr[o];
    for (std::size_t k = 0; k < w.rows; ++k) {
      const double* wr = w.p + k * w.cols;
      double* dwr = dw + k * w.cols;
      double acc = 0.0;
      for (std::size_t o = 0; o < w.cols; ++o) {
        dwr[o] += xr[k] * dyr[o];
        acc += dyr[o] * wr[o];
      }
      dxr[k] = acc;
    }
  }
  return dx;
}

Mat layer_norm(const Mat& x, const double* gain, const double* bias, LayerNormCache* cache) {
  Mat y(x.rows, x.cols);
  if (cache) {
    cache->xhat = Mat(x.rows, x.cols);
    cache->inv_std.assign(x.rows, 0.0);
  }
  const double n = static_cast<double>(x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const double* xr = x.row(i);
    double mean = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) mean += xr[j];
    mean /= n;
    double var = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < x.cols; ++j) {
      const double h = (xr[j] - mean) * inv;
      y.at(i, j) = gain[j] * h + bias[j];
      if (cache) cache->xhat.at(i, j) = h;
    }
    if (cache) cache->inv_std[i] = inv;
  }
  return y;
}

Mat layer_norm_backward(const LayerNormCache& cache, const double* gain, const Mat& dy,
                        double* dgain, double* dbias) {
  Mat dx(dy.rows, dy.cols);
  const double n = static_cast<double>(dy.cols);
  std::vector<double> dh(dy.cols);
  for (std::size_t i = 0; i < dy.rows; ++i) {
    double sum_dh = 0.0;
    double sum_dh_h = 0.0;
    for (std::size_t j = 0; j < dy.cols; ++j) {
      const double h = cache.xhat.at(i, j);
      dgain[j] += dy.at(i, j) * h;
      dbias[j] += dy.at(i, j);
      dh[j] = dy.at(i, j) * gain[j];
      sum_dh += dh[j];
      sum_dh_h += dh[j] * h;
    }
    const double inv = cache.inv_std[i];
    for (std::size_t j = 0; j < dy.cols; ++j) {
      dx.at(i, j) = inv / n * (n * dh[j] - sum_dh - cache.xhat.at(i, j) * sum_dh_h);
    }
  }
  return dx;
}

Mat attention(const GcpModel& m, const ModelLayout::Attention& p, const Mat& xq, const Mat& xkv,
              bool causal, AttentionCache* cache) {
  const auto& cfg = m.config();
  const std::size_t dim = cfg.dim;
  const std::size_t heads = cfg.n_heads;
  const std::size_t dh = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* params = m.parameters().data();

  Mat q = linear(xq, view(m, p.wq, dim, dim), params + p.bq);
  Mat k = linear(xkv, view(m, p.wk, dim, dim), params + p.bk);
  Mat v = linear(xkv, view(m, p.wv, dim, dim), params + p.bv);
  const std::size_t t = xq.rows;
  const std::size_t s = xkv.rows;
  Mat concat(t, dim);
  std::vector<Mat> probs;
  if (cache) probs.reserve(heads);
  std::vector<double> row(s);
  for (std::size_t h = 0; h < heads; ++h) {
    Mat ph(t, s);
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < t; ++i) {
      const std::size_t visible = causal ? std::min(s, i + 1) : s;
      double max_score = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < visible; ++j) {
        double acc = 0.0;
        for (std::size_t e = 0; e < dh; ++e) acc += q.at(i, off + e) * k.at(j, off + e);
        row[j] = acc * scale;
        max_score = std::max(max_score, row[j]);
      }
      double total = 0.0;
      for (std::size_t j = 0; j < visible; ++j) {
        row[j] = std::exp(row[j] - max_score);
        total += row[j];
      }
      for (std::size_t j = 0; j < visible; ++j) ph.at(i, j) = row[j] / total;
      for (std::size_t j = 0; j < visible; ++j) {
        const double w = ph.at(i, j);
        for (std::size_t e = 0; e < dh; ++e) concat.at(i, off + e) += w * v.at(j, off + e);
      }
    }
    if (cache) probs.push_back(std::move(ph));
  }
  Mat out = linear(concat, view(m, p.wo, dim, dim), params + p.bo);
  if (cache) {
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->concat = std::move(concat);
  }
  return out;
}

// Returns (d xq, d xkv).
std::pair<Mat, Mat> attention_backward(const GcpModel& m, const ModelLayout::Attention& p,
                                       const AttentionCache& c, const Mat& xq, const Mat& xkv,
                                       const Mat& d_out, double* grad) {
  const auto& cfg = m.config();
  const std::size_t dim = cfg.dim;
  const std::size_t heads = cfg.n_heads;
  const std::size_t dh = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t t = xq.rows;
  const std::size_t s = xkv.rows;

  Mat d_concat = linear_backward(c.concat, view(m, p.wo, dim, dim), d_out, grad + p.wo, grad + p.bo);
  Mat dq(t, dim), dk(s, dim), dv(s, dim);
  std::vector<double> dp(s);
  for (std::size_t h = 0; h < heads; ++h) {
    const Mat& ph = c.probs[h];
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < t; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < s; ++j) {
        const double w = ph.at(i, j);
        double acc = 0.0;
        for (std::size_t e = 0; e < dh; ++e) {
          acc += d_concat.at(i, off + e) * c.v.at(j, off + e);
          dv.at(j, off + e) += w * d_concat.at(i, off + e);
        }
        dp[j] = acc;
        dot += acc * w;
      }
      for (std::size_t j = 0; j < s; ++j) {
        const double ds = ph.at(i, j) * (dp[j] - dot) * scale;
        if (ds == 0.0) continue;
        for (std::size_t e = 0; e < dh; ++e) {
          dq.at(i, off + e) += ds * c.k.at(j, off + e);
          dk.at(j, off + e) += ds * c.q.at(i, off + e);
        }
      }
    }
  }
  Mat dxq = linear_backward(xq, view(m, p.wq, dim, dim), dq, grad + p.wq, grad + p.bq);
  Mat dxkv = linear_backward(xkv, view(m, p.wk, dim, dim), dk, grad + p.wk, grad + p.bk);
  Mat dxv = linear_backward(xkv, view(m, p.wv, dim, dim), dv, grad + p.wv, grad + p.bv);
  for (std::size_t i = 0; i < dxkv.data.size(); ++i) dxkv.data[i] += dxv.data[i];
  return {std::move(dxq), std::move(dxkv)};
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_grad(double x) {
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

std::vector<double> dropout_mask(const DropoutPlan& plan, std::size_t block, Site site,
                                 std::size_t rows, std::size_t cols) {
  std::vector<double> mask(rows * cols, 1.0);
  if (!plan.enabled()) return mask;
  const double keep = 1.0 - plan.rate;
  const std::uint64_t key = mix_key(mix_key(plan.key, block), site);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = counter_uniform(key, i) < keep ? 1.0 / keep : 0.0;
  }
  return mask;
}

void add_masked(Mat& x, const Mat& y, const std::vector<double>& mask) {
  for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += y.data[i] * mask[i];
}

Mat masked(const Mat& d, const std::vector<double>& mask) {
  Mat out = d;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= mask[i];
  return out;
}

}  // namespace

Mat rows_to_mat(const std::vector<Vec>& rows, std::size_t cols) {
  Mat m(rows.size(), cols);
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), m.row(i));
  return m;
}

Mat decoder_forward(const GcpModel& model, const Mat& input, const Mat& memory,
                    const DropoutPlan& dropout, PassCache* cache) {
  const auto& layout = model.layout();
  const double* params = model.parameters().data();
  const std::size_t ffn = model.config().ffn_dim;
  const std::size_t dim = model.config().dim;
  if (cache) cache->blocks.assign(layout.blocks.size(), {});

  Mat x = input;
  for (std::size_t bi = 0; bi < layout.blocks.size(); ++bi) {
    const auto& bp = layout.blocks[bi];
    BlockCache* bc = cache ? &cache->blocks[bi] : nullptr;
    if (bc) bc->x_in = x;

    Mat a = layer_norm(x, params + bp.ln1_gain, params + bp.ln1_bias, bc ? &bc->ln1 : nullptr);
    Mat s = attention(model, bp.self_attn, a, a, true, bc ? &bc->self_attn : nullptr);
    auto mask1 = dropout_mask(dropout, bi, kSelfSite, s.rows, s.cols);
    add_masked(x, s, mask1);

    if (bc) {
      bc->a = std::move(a);
      bc->mask1 = std::move(mask1);
      bc->x1 = x;
    }

    Mat b = layer_norm(x, params + bp.ln2_gain, params + bp.ln2_bias, bc ? &bc->ln2 : nullptr);
    Mat c = attention(model, bp.cross_attn, b, memory, false, bc ? &bc->cross_attn : nullptr);
    auto mask2 = dropout_mask(dropout, bi, kCrossSite, c.rows, c.cols);
    add_masked(x, c, mask2);
    if (bc) {
      bc->b = std::move(b);
      bc->mask2 = std::move(mask2);
      bc->x2 = x;
    }

    Mat d = layer_norm(x, params + bp.ln3_gain, params + bp.ln3_bias, bc ? &bc->ln3 : nullptr);
    Mat pre = linear(d, View{params + bp.ffn_w1, dim, ffn}, params + bp.ffn_b1);
    Mat act(pre.rows, pre.cols);
    for (std::size_t i = 0; i < pre.data.size(); ++i) act.data[i] = gelu(pre.data[i]);
    Mat f = linear(act, View{params + bp.ffn_w2, ffn, dim}, params + bp.ffn_b2);
    auto mask3 = dropout_mask(dropout, bi, kFfnSite, f.rows, f.cols);
    add_masked(x, f, mask3);
    if (bc) {
      bc->d = std::move(d);
      bc->ffn_pre = std::move(pre);
      bc->ffn_act = std::move(act);
      bc->mask3 = std::move(mask3);
    }
  }
  return x;
}

Mat decoder_backward(const GcpModel& model, const PassCache& cache, const Mat& memory,
                     Mat d_out, double* grad, Mat& d_memory) {
  const auto& layout = model.layout();
  const double* params = model.parameters().data();
  const std::size_t ffn = model.config().ffn_dim;
  const std::size_t dim = model.config().dim;

  Mat dx = std::move(d_out);
  for (std::size_t bi = layout.blocks.size(); bi-- > 0;) {
    const auto& bp = layout.blocks[bi];
    const BlockCache& bc = cache.blocks[bi];

    // x3 = x2 + drop(FFN(LN3(x2)))
    Mat df = masked(dx, bc.mask3);
    Mat dact = linear_backward(bc.ffn_act, View{params + bp.ffn_w2, ffn, dim}, df,
                               grad + bp.ffn_w2, grad + bp.ffn_b2);
    for (std::size_t i = 0; i < dact.data.size(); ++i) dact.data[i] *= gelu_grad(bc.ffn_pre.data[i]);
    Mat dd = linear_backward(bc.d, View{params + bp.ffn_w1, dim, ffn}, dact, grad + bp.ffn_w1,
                             grad + bp.ffn_b1);
    Mat dln3 = layer_norm_backward(bc.ln3, params + bp.ln3_gain, dd, grad + bp.ln3_gain,
                                   grad + bp.ln3_bias);
    for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dln3.data[i];

    // x2 = x1 + drop(Cross(LN2(x1), M))
    Mat dc = masked(dx, bc.mask2);
    auto [db, dmem] = attention_backward(model, bp.cross_attn, bc.cross_attn, bc.b, memory, dc, grad);
    for (std::size_t i = 0; i < dmem.data.size(); ++i) d_memory.data[i] += dmem.data[i];
    Mat dln2 = layer_norm_backward(bc.ln2, params + bp.ln2_gain, db, grad + bp.ln2_gain,
                                   grad + bp.ln2_bias);
    for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dln2.data[i];

    // x1 = x + drop(Self(LN1(x)))
    Mat ds = masked(dx, bc.mask1);
    auto [daq, dakv] = attention_backward(model, bp.self_attn, bc.self_attn, bc.a, bc.a, ds, grad);
    for (std::size_t i = 0; i < daq.data.size(); ++i) daq.data[i] += dakv.data[i];
    Mat dln1 = layer_norm_backward(bc.ln1, params + bp.ln1_gain, daq, grad + bp.ln1_gain,
                                   grad + bp.ln1_bias);
    for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += dln1.data[i];
  }
  return dx;
}

}  // namespace gcp::detail
