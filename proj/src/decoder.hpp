#pragma once

// Forward and backward passes of the prototype decoder. Internal to the
// library; the public surface lives in gcp/gcp_model.hpp.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "gcp/gcp_model.hpp"
#include "seeding.hpp"

namespace gcp::detail {

/// Dense row-major matrix.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double* row(std::size_t i) { return data.data() + i * cols; }
  const double* row(std::size_t i) const { return data.data() + i * cols; }
  double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

Mat rows_to_mat(const std::vector<Vec>& rows, std::size_t cols);

struct DropoutPlan {
  double rate = 0.0;
  std::uint64_t key = 0;
  bool enabled() const { return rate > 0.0; }
};

struct LayerNormCache {
  Mat xhat;
  std::vector<double> inv_std;
};

struct AttentionCache {
  Mat q, k, v;
  std::vector<Mat> probs;  // one T x S matrix per head
  Mat concat;
};

struct BlockCache {
  Mat x_in;
  LayerNormCache ln1;
  Mat a;
  AttentionCache self_attn;
  std::vector<double> mask1;
  Mat x1;
  LayerNormCache ln2;
  Mat b;
  AttentionCache cross_attn;
  std::vector<double> mask2;
  Mat x2;
  LayerNormCache ln3;
  Mat d;
  Mat ffn_pre;
  Mat ffn_act;
  std::vector<double> mask3;
};

struct PassCache {
  std::vector<BlockCache> blocks;
};

/// Runs every decoder block on `input` (T x D) with cross-attention over
/// `memory` (S x D). Fills `cache` when non-null.
Mat decoder_forward(const GcpModel& model, const Mat& input, const Mat& memory,
                    const DropoutPlan& dropout, PassCache* cache);

/// Backpropagates `d_out` (T x D). Parameter gradients are added into
/// `grad`; memory gradients into `d_memory`. Returns d input.
Mat decoder_backward(const GcpModel& model, const PassCache& cache, const Mat& memory,
                     Mat d_out, double* grad, Mat& d_memory);

}  // namespace gcp::detail
