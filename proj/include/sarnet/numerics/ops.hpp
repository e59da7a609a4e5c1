#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "sarnet/errors.hpp"
#include "sarnet/numerics/tape.hpp"
#include "sarnet/numerics/tensor.hpp"

// Differentiable primitives over rank-2 tensors. Every op records its forward
// and its local gradient rule on the input's tape.

namespace sarnet {

namespace kernels {

// c[n x m] += a[n x k] * b[k x m]
inline void gemm_acc(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = c + i * m;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[k x m] += a[n x k]^T * g[n x m]
inline void gemm_at_acc(const double* __restrict a, const double* __restrict g, double* __restrict c, std::size_t n, std::size_t k,
                        std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * grow[j];
    }
  }
}

// c[n x k] += g[n x m] * b[k x m]^T
inline void gemm_bt_acc(const double* __restrict g, const double* __restrict b, double* __restrict c, std::size_t n, std::size_t k,
                        std::size_t m) {
  std::vector<double> bt(m * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < m; ++j) bt[j * k + p] = b[p * m + j];
  gemm_acc(g, bt.data(), c, n, m, k);
}

}  // namespace kernels

namespace detail {

inline void require_rank2(const Tensor& t, const char* op) {
  require(t.rank() == 2, std::string(op) + ": expected rank-2 input, got " + shape_string(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_rank2(av, "matmul");
  detail::require_rank2(bv, "matmul");
  require(av.cols() == bv.rows(),
          "matmul: inner dimensions differ " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  return a.tape()->record(
      {a, b},
      [](TensorRefs in) {
        const Tensor& x = *in[0];
        const Tensor& w = *in[1];
        Tensor out = Tensor::zeros(x.rows(), w.cols());
        kernels::gemm_acc(x.data(), w.data(), out.data(), x.rows(), x.cols(), w.cols());
        return out;
      },
      [](TensorRefs in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        const Tensor& x = *in[0];
        const Tensor& w = *in[1];
        if (gin[0]) kernels::gemm_bt_acc(g.data(), w.data(), gin[0]->data(), x.rows(), x.cols(), w.cols());
        if (gin[1]) kernels::gemm_at_acc(x.data(), g.data(), gin[1]->data(), x.rows(), x.cols(), w.cols());
      });
}

inline Var add(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  return a.tape()->record(
      {a, b},
      [](TensorRefs in) {
        Tensor out = *in[0];
        out += *in[1];
        return out;
      },
      [](TensorRefs, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        if (gin[0]) *gin[0] += g;
        if (gin[1]) *gin[1] += g;
      });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "sub");
  return a.tape()->record(
      {a, b},
      [](TensorRefs in) {
        Tensor out = *in[0];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] -= (*in[1])[i];
        return out;
      },
      [](TensorRefs, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        if (gin[0]) *gin[0] += g;
        if (gin[1])
          for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] -= g[i];
      });
}

/// Element-wise product.
inline Var mul(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "mul");
  return a.tape()->record(
      {a, b},
      [](TensorRefs in) {
        Tensor out = *in[0];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*in[1])[i];
        return out;
      },
      [](TensorRefs in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        if (gin[0])
          for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * (*in[1])[i];
        if (gin[1])
          for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i] * (*in[0])[i];
      });
}

inline Var scale(Var a, double factor) {
  return a.tape()->record(
      {a},
      [factor](TensorRefs in) {
        Tensor out = *in[0];
        for (double& v : out.values()) v *= factor;
        return out;
      },
      [factor](TensorRefs, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += factor * g[i];
      });
}

/// a[n x m] + row[1 x m], broadcast over rows.
inline Var add_row(Var a, Var row) {
  const Tensor& av = a.value();
  const Tensor& rv = row.value();
  detail::require_rank2(av, "add_row");
  require(rv.rank() == 2 && rv.rows() == 1 && rv.cols() == av.cols(),
          "add_row: row shape " + shape_string(rv.shape()) + " incompatible with " + shape_string(av.shape()));
  return a.tape()->record(
      {a, row},
      [](TensorRefs in) {
        Tensor out = *in[0];
        const std::size_t m = out.cols();
        for (std::size_t r = 0; r < out.rows(); ++r)
          for (std::size_t c = 0; c < m; ++c) out(r, c) += (*in[1])[c];
        return out;
      },
      [](TensorRefs, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        if (gin[0]) *gin[0] += g;
        if (gin[1]) {
          const std::size_t m = g.cols();
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < m; ++c) (*gin[1])[c] += g(r, c);
        }
      });
}

/// a[n x m] * row[1 x m] element-wise, broadcast over rows.
inline Var mul_row(Var a, Var row) {
  const Tensor& av = a.value();
  const Tensor& rv = row.value();
  detail::require_rank2(av, "mul_row");
  require(rv.rank() == 2 && rv.rows() == 1 && rv.cols() == av.cols(),
          "mul_row: row shape " + shape_string(rv.shape()) + " incompatible with " + shape_string(av.shape()));
  return a.tape()->record(
      {a, row},
      [](TensorRefs in) {
        Tensor out = *in[0];
        const std::size_t m = out.cols();
        for (std::size_t r = 0; r < out.rows(); ++r)
          for (std::size_t c = 0; c < m; ++c) out(r, c) *= (*in[1])[c];
        return out;
      },
      [](TensorRefs in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        const Tensor& x = *in[0];
        const Tensor& rv = *in[1];
        const std::size_t m = g.cols();
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < m; ++c) {
            if (gin[0]) (*gin[0])(r, c) += g(r, c) * rv[c];
            if (gin[1]) (*gin[1])[c] += g(r, c) * x(r, c);
          }
      });
}

inline Var relu(Var a) {
  return a.tape()->record(
      {a},
      [](TensorRefs in) {
        Tensor out = *in[0];
        for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
        return out;
      },
      [](TensorRefs in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        for (std::size_t i = 0; i < g.size(); ++i)
          if ((*in[0])[i] > 0.0) (*gin[0])[i] += g[i];
      });
}

inline double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
  return a.tape()->record(
      {a},
      [](TensorRefs in) {
        Tensor out = *in[0];
        for (double& v : out.values()) v = logistic(v);
        return out;
      },
      [](TensorRefs, const Tensor& out, const Tensor& g, std::span<Tensor* const> gin) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * out[i] * (1.0 - out[i]);
      });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t n = parts[0].value().rows();
  for (const Var& p : parts) {
    detail::require_rank2(p.value(), "concat_cols");
    require(p.value().rows() == n, "concat_cols: row counts differ");
  }
  return parts[0].tape()->record(
      parts,
      [](TensorRefs in) {
        const std::size_t rows = in[0]->rows();
        std::size_t total = 0;
        for (const Tensor* t : in) total += t->cols();
        Tensor out = Tensor::zeros(rows, total);
        std::size_t offset = 0;
        for (const Tensor* t : in) {
          const std::size_t w = t->cols();
          for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(t->data() + r * w, w, out.data() + r * total + offset);
          offset += w;
        }
        return out;
      },
      [](TensorRefs in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        const std::size_t rows = g.rows();
        const std::size_t total = g.cols();
        std::size_t offset = 0;
        for (std::size_t k = 0; k < in.size(); ++k) {
          const std::size_t w = in[k]->cols();
          if (gin[k])
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < w; ++c) (*gin[k])(r, c) += g[r * total + offset + c];
          offset += w;
        }
      });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t m = parts[0].value().cols();
  for (const Var& p : parts) {
    detail::require_rank2(p.value(), "concat_rows");
    require(p.value().cols() == m, "concat_rows: column counts differ");
  }
  if (parts.size() == 1) return parts[0];
  return parts[0].tape()->record(
      parts,
      [](TensorRefs in) {
        std::size_t rows = 0;
        for (const Tensor* t : in) rows += t->rows();
        Tensor out = Tensor::zeros(rows, in[0]->cols());
        double* dst = out.data();
        for (const Tensor* t : in) dst = std::copy_n(t->data(), t->size(), dst);
        return out;
      },
      [](TensorRefs in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < in.size(); ++k) {
          const std::size_t n = in[k]->size();
          if (gin[k])
            for (std::size_t i = 0; i < n; ++i) (*gin[k])[i] += g[offset + i];
          offset += n;
        }
      });
}

/// Rows [begin, end).
inline Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  detail::require_rank2(a.value(), "slice_rows");
  require(begin <= end && end <= a.value().rows(), "slice_rows: range out of bounds");
  return a.tape()->record(
      {a},
      [begin, end](TensorRefs in) {
        const std::size_t m = in[0]->cols();
        Tensor out = Tensor::zeros(end - begin, m);
        std::copy_n(in[0]->data() + begin * m, (end - begin) * m, out.data());
        return out;
      },
      [begin](TensorRefs in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        const std::size_t m = in[0]->cols();
        double* dst = gin[0]->data() + begin * m;
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
      });
}

/// Gathers rows by index (repeats allowed); the gradient scatter-adds back.
inline Var take_rows(Var a, std::vector<std::size_t> index) {
  detail::require_rank2(a.value(), "take_rows");
  const std::size_t n = a.value().rows();
  for (std::size_t i : index) require(i < n, "take_rows: index " + std::to_string(i) + " out of range");
  return a.tape()->record(
      {a},
      [index](TensorRefs in) {
        const std::size_t m = in[0]->cols();
        Tensor out = Tensor::zeros(index.size(), m);
        for (std::size_t r = 0; r < index.size(); ++r)
          std::copy_n(in[0]->data() + index[r] * m, m, out.data() + r * m);
        return out;
      },
      [index](TensorRefs in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        const std::size_t m = in[0]->cols();
        for (std::size_t r = 0; r < index.size(); ++r) {
          double* dst = gin[0]->data() + index[r] * m;
          const double* src = g.data() + r * m;
          for (std::size_t c = 0; c < m; ++c) dst[c] += src[c];
        }
      });
}

/// Embedding lookup: table is D x N, output row r is column index[r] of the table.
inline Var embed_columns(Var table, std::vector<std::size_t> index) {
  detail::require_rank2(table.value(), "embed_columns");
  const std::size_t n = table.value().cols();
  for (std::size_t i : index)
    require(i < n, "embedding index " + std::to_string(i) + " out of range for vocabulary of " + std::to_string(n));
  return table.tape()->record(
      {table},
      [index](TensorRefs in) {
        const Tensor& e = *in[0];
        const std::size_t d = e.rows();
        Tensor out = Tensor::zeros(index.size(), d);
        for (std::size_t r = 0; r < index.size(); ++r)
          for (std::size_t k = 0; k < d; ++k) out(r, k) = e(k, index[r]);
        return out;
      },
      [index](TensorRefs in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        const std::size_t d = in[0]->rows();
        for (std::size_t r = 0; r < index.size(); ++r)
          for (std::size_t k = 0; k < d; ++k) (*gin[0])(k, index[r]) += g(r, k);
      });
}

/// Additive score offset applied to masked positions before the softmax.
inline constexpr double kMaskedScore = -1e9;

/// Softmax over contiguous segments of a P x 1 score column. Segment s spans
/// rows [offsets[s], offsets[s+1]). Positions with mask 0 get score + kMaskedScore
/// and their weight is then forced to exactly zero.
inline Var segment_softmax(Var scores, std::vector<std::size_t> offsets, std::vector<char> mask) {
  const Tensor& sv = scores.value();
  detail::require_rank2(sv, "segment_softmax");
  require(sv.cols() == 1, "segment_softmax: scores must be a column");
  require(!offsets.empty() && offsets.front() == 0 && offsets.back() == sv.rows(),
          "segment_softmax: offsets do not cover the score column");
  require(mask.size() == sv.rows(), "segment_softmax: mask length differs from score count");
  return scores.tape()->record(
      {scores},
      [offsets, mask](TensorRefs in) {
        const Tensor& s = *in[0];
        Tensor out = Tensor::zeros(s.rows(), 1);
        for (std::size_t seg = 0; seg + 1 < offsets.size(); ++seg) {
          const std::size_t b = offsets[seg], e = offsets[seg + 1];
          if (b == e) continue;
          double top = -std::numeric_limits<double>::infinity();
          for (std::size_t p = b; p < e; ++p) top = std::max(top, s[p] + (mask[p] ? 0.0 : kMaskedScore));
          double total = 0.0;
          for (std::size_t p = b; p < e; ++p) {
            out[p] = std::exp(s[p] + (mask[p] ? 0.0 : kMaskedScore) - top);
            total += out[p];
          }
          for (std::size_t p = b; p < e; ++p) out[p] = mask[p] ? out[p] / total : 0.0;
        }
        return out;
      },
      [offsets](TensorRefs, const Tensor& w, const Tensor& g, std::span<Tensor* const> gin) {
        for (std::size_t seg = 0; seg + 1 < offsets.size(); ++seg) {
          const std::size_t b = offsets[seg], e = offsets[seg + 1];
          double dot = 0.0;
          for (std::size_t p = b; p < e; ++p) dot += w[p] * g[p];
          for (std::size_t p = b; p < e; ++p) (*gin[0])[p] += w[p] * (g[p] - dot);
        }
      });
}

/// out[s] = sum over rows p of segment s of weights[p] * x[p]; empty segments give zero rows.
inline Var segment_weighted_sum(Var weights, Var x, std::vector<std::size_t> offsets) {
  const Tensor& wv = weights.value();
  const Tensor& xv = x.value();
  detail::require_rank2(wv, "segment_weighted_sum");
  detail::require_rank2(xv, "segment_weighted_sum");
  require(wv.cols() == 1 && wv.rows() == xv.rows(), "segment_weighted_sum: weight column does not align with rows");
  require(!offsets.empty() && offsets.front() == 0 && offsets.back() == xv.rows(),
          "segment_weighted_sum: offsets do not cover the rows");
  return weights.tape()->record(
      {weights, x},
      [offsets](TensorRefs in) {
        const Tensor& w = *in[0];
        const Tensor& xs = *in[1];
        const std::size_t m = xs.cols();
        Tensor out = Tensor::zeros(offsets.size() - 1, m);
        for (std::size_t seg = 0; seg + 1 < offsets.size(); ++seg)
          for (std::size_t p = offsets[seg]; p < offsets[seg + 1]; ++p)
            for (std::size_t c = 0; c < m; ++c) out(seg, c) += w[p] * xs(p, c);
        return out;
      },
      [offsets](TensorRefs in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        const Tensor& w = *in[0];
        const Tensor& xs = *in[1];
        const std::size_t m = xs.cols();
        for (std::size_t seg = 0; seg + 1 < offsets.size(); ++seg)
          for (std::size_t p = offsets[seg]; p < offsets[seg + 1]; ++p) {
            if (gin[0]) {
              double dot = 0.0;
              for (std::size_t c = 0; c < m; ++c) dot += g(seg, c) * xs(p, c);
              (*gin[0])[p] += dot;
            }
            if (gin[1])
              for (std::size_t c = 0; c < m; ++c) (*gin[1])(p, c) += w[p] * g(seg, c);
          }
      });
}

inline Var softmax_rows(Var a) {
  detail::require_rank2(a.value(), "softmax_rows");
  return a.tape()->record(
      {a},
      [](TensorRefs in) {
        Tensor out = *in[0];
        const std::size_t m = out.cols();
        for (std::size_t r = 0; r < out.rows(); ++r) {
          auto row = out.row_span(r);
          const double top = *std::max_element(row.begin(), row.end());
          double total = 0.0;
          for (double& v : row) {
            v = std::exp(v - top);
            total += v;
          }
          for (std::size_t c = 0; c < m; ++c) row[c] /= total;
        }
        return out;
      },
      [](TensorRefs, const Tensor& w, const Tensor& g, std::span<Tensor* const> gin) {
        const std::size_t m = w.cols();
        for (std::size_t r = 0; r < w.rows(); ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < m; ++c) dot += w(r, c) * g(r, c);
          for (std::size_t c = 0; c < m; ++c) (*gin[0])(r, c) += w(r, c) * (g(r, c) - dot);
        }
      });
}

/// Per-row inner product of two n x m tensors, giving n x 1.
inline Var row_dot(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "row_dot");
  detail::require_rank2(a.value(), "row_dot");
  return a.tape()->record(
      {a, b},
      [](TensorRefs in) {
        const Tensor& x = *in[0];
        const Tensor& y = *in[1];
        Tensor out = Tensor::zeros(x.rows(), 1);
        for (std::size_t r = 0; r < x.rows(); ++r)
          for (std::size_t c = 0; c < x.cols(); ++c) out[r] += x(r, c) * y(r, c);
        return out;
      },
      [](TensorRefs in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        const Tensor& x = *in[0];
        const Tensor& y = *in[1];
        for (std::size_t r = 0; r < x.rows(); ++r)
          for (std::size_t c = 0; c < x.cols(); ++c) {
            if (gin[0]) (*gin[0])(r, c) += g[r] * y(r, c);
            if (gin[1]) (*gin[1])(r, c) += g[r] * x(r, c);
          }
      });
}

inline Var sum_all(Var a) {
  return a.tape()->record(
      {a},
      [](TensorRefs in) {
        double total = 0.0;
        for (double v : in[0]->values()) total += v;
        return Tensor::scalar(total);
      },
      [](TensorRefs, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        for (double& v : gin[0]->values()) v += g[0];
      });
}

inline Var mean_all(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum_all(a), 1.0 / n);
}

/// Training-mode batch normalization over rows: normalizes each column by its
/// batch mean and biased batch variance, then applies scale and shift (both 1 x m).
inline Var batch_norm_train(Var x, Var scale_row, Var shift_row, double epsilon) {
  const Tensor& xv = x.value();
  detail::require_rank2(xv, "batch_norm_train");
  require(xv.rows() >= 2, "batch normalization in training mode needs a batch of at least 2 rows, got " +
                              std::to_string(xv.rows()));
  require(scale_row.value().shape() == Shape{1, xv.cols()} && shift_row.value().shape() == Shape{1, xv.cols()},
          "batch_norm_train: scale/shift must be 1 x features");
  return x.tape()->record(
      {x, scale_row, shift_row},
      [epsilon](TensorRefs in) {
        const Tensor& xs = *in[0];
        const std::size_t n = xs.rows(), m = xs.cols();
        Tensor out = Tensor::zeros(n, m);
        for (std::size_t c = 0; c < m; ++c) {
          double mean = 0.0;
          for (std::size_t r = 0; r < n; ++r) mean += xs(r, c);
          mean /= static_cast<double>(n);
          double var = 0.0;
          for (std::size_t r = 0; r < n; ++r) var += (xs(r, c) - mean) * (xs(r, c) - mean);
          var /= static_cast<double>(n);
          const double inv = 1.0 / std::sqrt(var + epsilon);
          for (std::size_t r = 0; r < n; ++r) out(r, c) = (xs(r, c) - mean) * inv * (*in[1])[c] + (*in[2])[c];
        }
        return out;
      },
      [epsilon](TensorRefs in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        const Tensor& xs = *in[0];
        const std::size_t n = xs.rows(), m = xs.cols();
        const double nd = static_cast<double>(n);
        std::vector<double> xhat(n);
        for (std::size_t c = 0; c < m; ++c) {
          double mean = 0.0;
          for (std::size_t r = 0; r < n; ++r) mean += xs(r, c);
          mean /= nd;
          double var = 0.0;
          for (std::size_t r = 0; r < n; ++r) var += (xs(r, c) - mean) * (xs(r, c) - mean);
          var /= nd;
          const double inv = 1.0 / std::sqrt(var + epsilon);
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t r = 0; r < n; ++r) {
            xhat[r] = (xs(r, c) - mean) * inv;
            sum_g += g(r, c);
            sum_gx += g(r, c) * xhat[r];
          }
          if (gin[1]) (*gin[1])[c] += sum_gx;
          if (gin[2]) (*gin[2])[c] += sum_g;
          if (gin[0]) {
            const double gamma = (*in[1])[c];
            for (std::size_t r = 0; r < n; ++r)
              (*gin[0])(r, c) += gamma * inv / nd * (nd * g(r, c) - sum_g - xhat[r] * sum_gx);
          }
        }
      });
}

/// Inference-mode batch normalization: a fixed per-column affine map built from
/// running statistics.
inline Var batch_norm_infer(Var x, Var scale_row, Var shift_row, Tensor running_mean, Tensor running_var,
                            double epsilon) {
  const Tensor& xv = x.value();
  detail::require_rank2(xv, "batch_norm_infer");
  const std::size_t m = xv.cols();
  require(running_mean.size() == m && running_var.size() == m, "batch_norm_infer: running statistic width");
  std::vector<double> inv(m);
  for (std::size_t c = 0; c < m; ++c) inv[c] = 1.0 / std::sqrt(running_var[c] + epsilon);
  return x.tape()->record(
      {x, scale_row, shift_row},
      [inv, running_mean](TensorRefs in) {
        const Tensor& xs = *in[0];
        Tensor out = Tensor::zeros(xs.rows(), xs.cols());
        for (std::size_t r = 0; r < xs.rows(); ++r)
          for (std::size_t c = 0; c < xs.cols(); ++c)
            out(r, c) = (xs(r, c) - running_mean[c]) * inv[c] * (*in[1])[c] + (*in[2])[c];
        return out;
      },
      [inv, running_mean](TensorRefs in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        const Tensor& xs = *in[0];
        for (std::size_t r = 0; r < xs.rows(); ++r)
          for (std::size_t c = 0; c < xs.cols(); ++c) {
            const double xhat = (xs(r, c) - running_mean[c]) * inv[c];
            if (gin[0]) (*gin[0])(r, c) += g(r, c) * inv[c] * (*in[1])[c];
            if (gin[1]) (*gin[1])[c] += g(r, c) * xhat;
            if (gin[2]) (*gin[2])[c] += g(r, c);
          }
      });
}

inline constexpr double kProbabilityFloor = 1e-7;

/// Weighted binary cross-entropy over an n x 1 probability column, normalized by
/// the total weight. Probabilities are clamped to [1e-7, 1 - 1e-7]; the clamp
/// passes no gradient.
inline Var weighted_bce(Var probs, std::vector<double> labels, std::vector<double> weights) {
  const Tensor& pv = probs.value();
  detail::require_rank2(pv, "weighted_bce");
  require(pv.cols() == 1, "weighted_bce: probabilities must be a column");
  require(labels.size() == pv.rows() && weights.size() == pv.rows(), "weighted_bce: label/weight count mismatch");
  double total_weight = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] == 0.0 || labels[i] == 1.0, "label must be 0 or 1, got " + std::to_string(labels[i]));
    require(weights[i] >= 0.0, "sample weight must be nonnegative");
    total_weight += weights[i];
  }
  require(total_weight > 0.0, "weighted_bce: total weight is zero");
  return probs.tape()->record(
      {probs},
      [labels, weights, total_weight](TensorRefs in) {
        double loss = 0.0;
        for (std::size_t i = 0; i < labels.size(); ++i) {
          const double p = std::clamp((*in[0])[i], kProbabilityFloor, 1.0 - kProbabilityFloor);
          loss += weights[i] * (labels[i] == 1.0 ? -std::log(p) : -std::log(1.0 - p));
        }
        return Tensor::scalar(loss / total_weight);
      },
      [labels, weights, total_weight](TensorRefs in, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
        for (std::size_t i = 0; i < labels.size(); ++i) {
          const double p = (*in[0])[i];
          if (p < kProbabilityFloor || p > 1.0 - kProbabilityFloor) continue;
          const double d = labels[i] == 1.0 ? -1.0 / p : 1.0 / (1.0 - p);
          (*gin[0])[i] += g[0] * weights[i] * d / total_weight;
        }
      });
}

}  // namespace sarnet
