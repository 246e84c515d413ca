// SPDX-FileCopyrightText: 2026 The ScaleForge Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "scaleforge/error.hpp"
#include "scaleforge/rng.hpp"
#include "scaleforge/tensor.hpp"

// Differentiable primitives. Every op here is covered by the finite-difference
// suite in gradcheck.hpp.
namespace scaleforge {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

inline Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
    if (t.rank() != r) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(t.shape()));
    }
}

inline std::size_t last_dim(const Tensor& t) { return t.shape().empty() ? 1 : t.shape().back(); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

/// a + b. b may equal a's shape or be a vector matching a's last axis (row broadcast).
inline Tensor add(const Tensor& a, const Tensor& b) {
    const bool broadcast = a.shape() != b.shape();
    if (broadcast && !(b.rank() == 1 && b.dim(0) == detail::last_dim(a))) {
        throw ShapeError("add: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t n = a.numel();
    const std::size_t cols = b.numel();
    std::vector<double> out(n);
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = ad[i] + bd[broadcast ? i % cols : i];
    }
    return detail::make_result(a.shape(), std::move(out), {a, b}, [broadcast, cols](detail::Node& self) {
        auto& pa = detail::parent(self, 0);
        auto& pb = detail::parent(self, 1);
        const std::size_t n = self.grad.size();
        if (pa.requires_grad) {
            for (std::size_t i = 0; i < n; ++i) pa.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            for (std::size_t i = 0; i < n; ++i) pb.grad[broadcast ? i % cols : i] += self.grad[i];
        }
    });
}

/// Elementwise a * b with the same broadcast rule as add().
inline Tensor mul(const Tensor& a, const Tensor& b) {
    const bool broadcast = a.shape() != b.shape();
    if (broadcast && !(b.rank() == 1 && b.dim(0) == detail::last_dim(a))) {
        throw ShapeError("mul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t n = a.numel();
    const std::size_t cols = b.numel();
    std::vector<double> out(n);
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = ad[i] * bd[broadcast ? i % cols : i];
    }
    return detail::make_result(a.shape(), std::move(out), {a, b}, [broadcast, cols](detail::Node& self) {
        auto& pa = detail::parent(self, 0);
        auto& pb = detail::parent(self, 1);
        const std::size_t n = self.grad.size();
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t j = broadcast ? i % cols : i;
            if (pa.requires_grad) pa.grad[i] += self.grad[i] * pb.data[j];
            if (pb.requires_grad) pb.grad[j] += self.grad[i] * pa.data[i];
        }
    });
}

inline Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (double& v : out) v *= c;
    return detail::make_result(x.shape(), std::move(out), {x}, [c](detail::Node& self) {
        auto& p = detail::parent(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * c;
    });
}

/// x / s for a one-element tensor s.
inline Tensor div_scalar(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) {
        throw ShapeError("div_scalar: divisor must have one element, got " + shape_str(s.shape()));
    }
    const double sv = s.item();
    std::vector<double> out(x.data().begin(), x.data().end());
    for (double& v : out) v /= sv;
    return detail::make_result(x.shape(), std::move(out), {x, s}, [](detail::Node& self) {
        auto& px = detail::parent(self, 0);
        auto& ps = detail::parent(self, 1);
        const double sv = ps.data[0];
        double acc = 0.0;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (px.requires_grad) px.grad[i] += self.grad[i] / sv;
            acc += self.grad[i] * px.data[i];
        }
        if (ps.requires_grad) ps.grad[0] -= acc / (sv * sv);
    });
}

/// Clamp into [lo, hi]; gradient passes only where the input was inside.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
    std::vector<double> out(x.data().begin(), x.data().end());
    for (double& v : out) v = std::clamp(v, lo, hi);
    return detail::make_result(x.shape(), std::move(out), {x}, [lo, hi](detail::Node& self) {
        auto& p = detail::parent(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (p.data[i] >= lo && p.data[i] <= hi) p.grad[i] += self.grad[i];
        }
    });
}

namespace detail {
// tanh-approximation constants: sqrt(2/pi) and the cubic coefficient.
inline constexpr double kGeluC = 0.7978845608028654;
inline constexpr double kGeluA = 0.044715;
}  // namespace detail

/// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline Tensor gelu(const Tensor& x) {
    std::vector<double> out(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = xd[i];
        out[i] = 0.5 * v * (1.0 + std::tanh(detail::kGeluC * (v + detail::kGeluA * v * v * v)));
    }
    return detail::make_result(x.shape(), std::move(out), {x}, [](detail::Node& self) {
        auto& p = detail::parent(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double v = p.data[i];
            const double t = std::tanh(detail::kGeluC * (v + detail::kGeluA * v * v * v));
            const double dt = (1.0 - t * t) * detail::kGeluC * (1.0 + 3.0 * detail::kGeluA * v * v);
            p.grad[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
        }
    });
}

/// Inverted dropout. Identity (the same tensor) when !training or p == 0.
inline Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
    if (p < 0.0 || p >= 1.0) {
        throw ConfigError("dropout: p must be in [0, 1), got " + std::to_string(p));
    }
    if (!training || p == 0.0) {
        return x;
    }
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(x.numel());
    std::vector<double> out(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        mask[i] = rng.uniform() >= p ? keep_scale : 0.0;
        out[i] = xd[i] * mask[i];
    }
    return detail::make_result(x.shape(), std::move(out), {x}, [mask = std::move(mask)](detail::Node& self) {
        auto& px = detail::parent(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] * mask[i];
    });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout
// ---------------------------------------------------------------------------

/// [m,k] x [k,n] -> [m,n]. The kernel is Eigen's single-threaded GEMM.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0);
    const std::size_t k = a.dim(1);
    const std::size_t n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    std::vector<double> out(m * n);
    {
        detail::ConstMapMat A(a.data().data(), m, k);
        detail::ConstMapMat B(b.data().data(), k, n);
        detail::MapMat C(out.data(), m, n);
        C.noalias() = A * B;
    }
    return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
        auto& pa = detail::parent(self, 0);
        auto& pb = detail::parent(self, 1);
        detail::ConstMapMat G(self.grad.data(), m, n);
        if (pa.requires_grad) {
            detail::ConstMapMat B(pb.data.data(), k, n);
            detail::MapMat dA(pa.grad.data(), m, k);
            dA.noalias() += G * B.transpose();
        }
        if (pb.requires_grad) {
            detail::ConstMapMat A(pa.data.data(), m, k);
            detail::MapMat dB(pb.grad.data(), k, n);
            dB.noalias() += A.transpose() * G;
        }
    });
}

inline Tensor transpose(const Tensor& x) {
    detail::require_rank(x, 2, "transpose");
    const std::size_t r = x.dim(0);
    const std::size_t c = x.dim(1);
    std::vector<double> out(r * c);
    auto xd = x.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xd[i * c + j];
    return detail::make_result({c, r}, std::move(out), {x}, [r, c](detail::Node& self) {
        auto& p = detail::parent(self, 0);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) p.grad[i * c + j] += self.grad[j * r + i];
    });
}

/// Rectangular block x[row0 : row0+rows, col0 : col0+cols] of a matrix.
inline Tensor slice(const Tensor& x, std::size_t row0, std::size_t rows, std::size_t col0, std::size_t cols) {
    detail::require_rank(x, 2, "slice");
    const std::size_t width = x.dim(1);
    if (row0 + rows > x.dim(0) || col0 + cols > width) {
        throw ShapeError("slice: block out of range for " + shape_str(x.shape()));
    }
    std::vector<double> out(rows * cols);
    auto xd = x.data();
    for (std::size_t i = 0; i < rows; ++i)
        std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>((row0 + i) * width + col0), cols,
                    out.begin() + static_cast<std::ptrdiff_t>(i * cols));
    return detail::make_result({rows, cols}, std::move(out), {x}, [=](detail::Node& self) {
        auto& p = detail::parent(self, 0);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) p.grad[(row0 + i) * width + col0 + j] += self.grad[i * cols + j];
    });
}

/// Stacks matrices along axis 0 (axis = 0) or axis 1 (axis = 1).
inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) {
        throw ShapeError("concat: no inputs");
    }
    for (const auto& p : parts) detail::require_rank(p, 2, "concat");
    if (axis != 0 && axis != 1) {
        throw ShapeError("concat: axis must be 0 or 1");
    }
    const std::size_t fixed = axis == 0 ? parts[0].dim(1) : parts[0].dim(0);
    std::size_t total = 0;
    for (const auto& p : parts) {
        if ((axis == 0 ? p.dim(1) : p.dim(0)) != fixed) {
            throw ShapeError("concat: mismatched extents " + shape_str(p.shape()));
        }
        total += axis == 0 ? p.dim(0) : p.dim(1);
    }
    const std::size_t rows = axis == 0 ? total : fixed;
    const std::size_t cols = axis == 0 ? fixed : total;
    std::vector<double> out(rows * cols);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        auto pd = p.data();
        if (axis == 0) {
            std::copy(pd.begin(), pd.end(), out.begin() + static_cast<std::ptrdiff_t>(off * cols));
            off += p.dim(0);
        } else {
            const std::size_t pc = p.dim(1);
            for (std::size_t i = 0; i < rows; ++i)
                std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(i * pc), pc,
                            out.begin() + static_cast<std::ptrdiff_t>(i * cols + off));
            off += pc;
        }
    }
    return detail::make_result({rows, cols}, std::move(out), parts,
                               [axis, rows, cols, offsets = std::move(offsets)](detail::Node& self) {
                                   for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                       auto& p = *self.parents[k];
                                       if (!p.requires_grad) continue;
                                       if (axis == 0) {
                                           const std::size_t base = offsets[k] * cols;
                                           for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[base + i];
                                       } else {
                                           const std::size_t pc = p.shape[1];
                                           for (std::size_t i = 0; i < rows; ++i)
                                               for (std::size_t j = 0; j < pc; ++j)
                                                   p.grad[i * pc + j] += self.grad[i * cols + offsets[k] + j];
                                       }
                                   }
                               });
}

/// Sets entries above the diagonal (column > row) of a square score matrix to -inf.
inline Tensor causal_mask_fill(const Tensor& scores) {
    detail::require_rank(scores, 2, "causal_mask_fill");
    const std::size_t r = scores.dim(0);
    const std::size_t c = scores.dim(1);
    std::vector<double> out(scores.data().begin(), scores.data().end());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = i + 1; j < c; ++j) out[i * c + j] = -std::numeric_limits<double>::infinity();
    return detail::make_result(scores.shape(), std::move(out), {scores}, [c](detail::Node& self) {
        auto& p = detail::parent(self, 0);
        const std::size_t r = self.grad.size() / c;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j <= i && j < c; ++j) p.grad[i * c + j] += self.grad[i * c + j];
    });
}

// ---------------------------------------------------------------------------
// Normalization and probabilities (all along the last axis)
// ---------------------------------------------------------------------------

/// (x - mean) / sqrt(var + eps) * gain + bias, with population variance.
/// eps = 0 on a constant row divides by zero (NaN), as the formula says.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
    const std::size_t d = detail::last_dim(x);
    if (d == 0) {
        throw ShapeError("layer_norm: last axis is empty");
    }
    if (gain.numel() != d || bias.numel() != d) {
        throw ShapeError("layer_norm: gain/bias must have " + std::to_string(d) + " elements");
    }
    if (eps < 0.0) {
        throw ConfigError("layer_norm: eps must be non-negative");
    }
    const std::size_t rows = x.numel() / d;
    std::vector<double> out(x.numel());
    std::vector<double> xhat(x.numel());
    std::vector<double> rstd(rows);
    auto xd = x.data();
    auto gd = gain.data();
    auto bd = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xd.data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(d);
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (row[j] - mean) * rstd[r];
            out[r * d + j] = xhat[r * d + j] * gd[j] + bd[j];
        }
    }
    return detail::make_result(
        x.shape(), std::move(out), {x, gain, bias},
        [d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& self) {
            auto& px = detail::parent(self, 0);
            auto& pg = detail::parent(self, 1);
            auto& pb = detail::parent(self, 2);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* g = self.grad.data() + r * d;
                const double* xh = xhat.data() + r * d;
                double mean_dxh = 0.0;
                double mean_dxh_xh = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double dxh = g[j] * pg.data[j];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh[j];
                    if (pg.requires_grad) pg.grad[j] += g[j] * xh[j];
                    if (pb.requires_grad) pb.grad[j] += g[j];
                }
                if (!px.requires_grad) continue;
                mean_dxh /= static_cast<double>(d);
                mean_dxh_xh /= static_cast<double>(d);
                for (std::size_t j = 0; j < d; ++j) {
                    const double dxh = g[j] * pg.data[j];
                    px.grad[r * d + j] += rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                }
            }
        });
}

/// Softmax with max subtraction. -inf entries map to exactly 0; NaN propagates.
inline Tensor softmax(const Tensor& x) {
    const std::size_t n = detail::last_dim(x);
    if (n == 0) {
        throw ShapeError("softmax: last axis is empty");
    }
    const std::size_t rows = x.numel() / n;
    std::vector<double> out(x.numel());
    auto xd = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xd.data() + r * n;
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            out[r * n + j] = std::exp(row[j] - mx);
            s += out[r * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= s;
    }
    return detail::make_result(x.shape(), std::move(out), {x}, [n, rows](detail::Node& self) {
        auto& p = detail::parent(self, 0);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.data.data() + r * n;
            const double* g = self.grad.data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
            for (std::size_t j = 0; j < n; ++j) p.grad[r * n + j] += y[j] * (g[j] - dot);
        }
    });
}

namespace detail {

// log-softmax of one row: writes log-probabilities. Uses log1p around the
// arg-max so near-certain rows keep relative precision.
inline void log_softmax_row(const double* row, std::size_t n, double* out) {
    std::size_t am = 0;
    for (std::size_t j = 1; j < n; ++j)
        if (row[j] > row[am]) am = j;
    const double mx = row[am];
    double rest = 0.0;
    for (std::size_t j = 0; j < n; ++j)
        if (j != am) rest += std::exp(row[j] - mx);
    const double tail = std::log1p(rest);
    for (std::size_t j = 0; j < n; ++j) out[j] = (row[j] - mx) - tail;
}

}  // namespace detail

/// Mean over rows of (1-ls) * NLL(target) + ls * mean_j NLL(j).
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, double label_smoothing = 0.0) {
    detail::require_rank(logits, 2, "cross_entropy");
    const std::size_t t = logits.dim(0);
    const std::size_t v = logits.dim(1);
    if (targets.size() != t) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(t) + " rows");
    }
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
        throw ConfigError("cross_entropy: label_smoothing must be in [0, 1)");
    }
    if (t == 0) {
        throw ShapeError("cross_entropy: no rows");
    }
    std::vector<double> logp(t * v);
    std::vector<int> tg(targets.begin(), targets.end());
    double total = 0.0;
    auto ld = logits.data();
    for (std::size_t r = 0; r < t; ++r) {
        if (tg[r] < 0 || static_cast<std::size_t>(tg[r]) >= v) {
            throw ShapeError("cross_entropy: target " + std::to_string(tg[r]) + " out of range [0, " +
                             std::to_string(v) + ")");
        }
        detail::log_softmax_row(ld.data() + r * v, v, logp.data() + r * v);
        double mean_lp = 0.0;
        for (std::size_t j = 0; j < v; ++j) mean_lp += logp[r * v + j];
        mean_lp /= static_cast<double>(v);
        const double nll = -logp[r * v + static_cast<std::size_t>(tg[r])];
        total += label_smoothing == 0.0 ? nll : (1.0 - label_smoothing) * nll - label_smoothing * mean_lp;
    }
    const double loss = total / static_cast<double>(t);
    return detail::make_result(
        {1}, {loss}, {logits},
        [t, v, label_smoothing, logp = std::move(logp), tg = std::move(tg)](detail::Node& self) {
            auto& p = detail::parent(self, 0);
            const double g = self.grad[0] / static_cast<double>(t);
            const double uniform = label_smoothing / static_cast<double>(v);
            for (std::size_t r = 0; r < t; ++r) {
                for (std::size_t j = 0; j < v; ++j) {
                    double d = std::exp(logp[r * v + j]) - uniform;
                    if (static_cast<int>(j) == tg[r]) d -= 1.0 - label_smoothing;
                    p.grad[r * v + j] += g * d;
                }
            }
        });
}

/// Per-row negative log-likelihood, no tape. Used by evaluation.
inline std::vector<double> token_nll(const Tensor& logits, std::span<const int> targets) {
    detail::require_rank(logits, 2, "token_nll");
    const std::size_t t = logits.dim(0);
    const std::size_t v = logits.dim(1);
    if (targets.size() != t) {
        throw ShapeError("token_nll: target count mismatch");
    }
    std::vector<double> lp(v);
    std::vector<double> out(t);
    for (std::size_t r = 0; r < t; ++r) {
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v) {
            throw ShapeError("token_nll: target out of range");
        }
        detail::log_softmax_row(logits.data().data() + r * v, v, lp.data());
        out[r] = -lp[static_cast<std::size_t>(targets[r])];
    }
    return out;
}

/// Row i scaled to x_i / (||x_i|| + eps).
inline Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-9) {
    detail::require_rank(x, 2, "l2_normalize_rows");
    const std::size_t rows = x.dim(0);
    const std::size_t d = x.dim(1);
    std::vector<double> out(x.numel());
    std::vector<double> norms(rows);
    auto xd = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        double ss = 0.0;
        for (std::size_t j = 0; j < d; ++j) ss += xd[r * d + j] * xd[r * d + j];
        norms[r] = std::sqrt(ss);
        const double s = norms[r] + eps;
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xd[r * d + j] / s;
    }
    return detail::make_result(x.shape(), std::move(out), {x},
                               [rows, d, eps, norms = std::move(norms)](detail::Node& self) {
                                   auto& p = detail::parent(self, 0);
                                   for (std::size_t r = 0; r < rows; ++r) {
                                       const double s = norms[r] + eps;
                                       double gx = 0.0;
                                       for (std::size_t j = 0; j < d; ++j) gx += self.grad[r * d + j] * p.data[r * d + j];
                                       const double k = norms[r] > 0.0 ? gx / (s * s * norms[r]) : 0.0;
                                       for (std::size_t j = 0; j < d; ++j)
                                           p.grad[r * d + j] += self.grad[r * d + j] / s - p.data[r * d + j] * k;
                                   }
                               });
}

/// Multiplies each row by the power of two that brings its largest magnitude
/// into [0.5, 1). Exact in floating point, so x and 2^k x give identical output.
/// The factor is treated as a constant for differentiation.
inline Tensor dyadic_rescale_rows(const Tensor& x) {
    detail::require_rank(x, 2, "dyadic_rescale_rows");
    const std::size_t rows = x.dim(0);
    const std::size_t d = x.dim(1);
    std::vector<double> out(x.numel());
    std::vector<double> factors(rows, 1.0);
    auto xd = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        double mx = 0.0;
        for (std::size_t j = 0; j < d; ++j) mx = std::max(mx, std::abs(xd[r * d + j]));
        if (mx > 0.0 && std::isfinite(mx)) {
            int e = 0;
            std::frexp(mx, &e);
            factors[r] = std::ldexp(1.0, -e);
        }
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xd[r * d + j] * factors[r];
    }
    return detail::make_result(x.shape(), std::move(out), {x}, [d, factors = std::move(factors)](detail::Node& self) {
        auto& p = detail::parent(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * factors[i / d];
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return detail::make_result({1}, {s}, {x}, [](detail::Node& self) {
        auto& p = detail::parent(self, 0);
        for (double& g : p.grad) g += self.grad[0];
    });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

/// Column means of a matrix: [n, c] -> [c].
inline Tensor mean_rows(const Tensor& x) {
    detail::require_rank(x, 2, "mean_rows");
    const std::size_t n = x.dim(0);
    const std::size_t c = x.dim(1);
    std::vector<double> out(c, 0.0);
    auto xd = x.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j] += xd[i * c + j];
    for (double& v : out) v /= static_cast<double>(n);
    return detail::make_result({c}, std::move(out), {x}, [n, c](detail::Node& self) {
        auto& p = detail::parent(self, 0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) p.grad[i * c + j] += self.grad[j] / static_cast<double>(n);
    });
}

/// sum_i x_i * w_i with constant weights w.
inline Tensor dot_const(const Tensor& x, std::vector<double> w) {
    if (w.size() != x.numel()) {
        throw ShapeError("dot_const: weight length mismatch");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += x[i] * w[i];
    return detail::make_result({1}, {s}, {x}, [w = std::move(w)](detail::Node& self) {
        auto& p = detail::parent(self, 0);
        for (std::size_t i = 0; i < w.size(); ++i) p.grad[i] += self.grad[0] * w[i];
    });
}

// ---------------------------------------------------------------------------
// Indexing (embeddings and expert dispatch)
// ---------------------------------------------------------------------------

/// Rows of table [V, d] selected by ids -> [n, d].
inline Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
    detail::require_rank(table, 2, "embedding_lookup");
    const std::size_t v = table.dim(0);
    const std::size_t d = table.dim(1);
    std::vector<int> idx(ids.begin(), ids.end());
    std::vector<double> out(idx.size() * d);
    auto td = table.data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= v) {
            throw ShapeError("embedding_lookup: id " + std::to_string(idx[i]) + " out of range [0, " +
                             std::to_string(v) + ")");
        }
        std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(idx[i]) * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    const std::size_t n = idx.size();
    return detail::make_result({n, d}, std::move(out), {table}, [d, idx = std::move(idx)](detail::Node& self) {
        auto& p = detail::parent(self, 0);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) p.grad[static_cast<std::size_t>(idx[i]) * d + j] += self.grad[i * d + j];
    });
}

/// x[rows] for a matrix x -> [rows.size(), d].
inline Tensor gather_rows(const Tensor& x, std::vector<std::size_t> rows) {
    detail::require_rank(x, 2, "gather_rows");
    const std::size_t d = x.dim(1);
    std::vector<double> out(rows.size() * d);
    auto xd = x.data();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= x.dim(0)) throw ShapeError("gather_rows: row out of range");
        std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(rows[i] * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    const std::size_t m = rows.size();
    return detail::make_result({m, d}, std::move(out), {x}, [d, rows = std::move(rows)](detail::Node& self) {
        auto& p = detail::parent(self, 0);
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) p.grad[rows[i] * d + j] += self.grad[i * d + j];
    });
}

/// Sum of parts scattered into an [n, d] zero matrix: out[rows_k[i]] += parts_k[i],
/// applied in the order given.
inline Tensor scatter_add_rows(std::size_t n, std::size_t d, const std::vector<std::vector<std::size_t>>& rows,
                               const std::vector<Tensor>& parts) {
    if (rows.size() != parts.size()) {
        throw ShapeError("scatter_add_rows: rows/parts count mismatch");
    }
    std::vector<double> out(n * d, 0.0);
    for (std::size_t k = 0; k < parts.size(); ++k) {
        detail::require_rank(parts[k], 2, "scatter_add_rows");
        if (parts[k].dim(0) != rows[k].size() || parts[k].dim(1) != d) {
            throw ShapeError("scatter_add_rows: part " + std::to_string(k) + " has shape " +
                             shape_str(parts[k].shape()));
        }
        auto pd = parts[k].data();
        for (std::size_t i = 0; i < rows[k].size(); ++i) {
            if (rows[k][i] >= n) throw ShapeError("scatter_add_rows: row out of range");
            for (std::size_t j = 0; j < d; ++j) out[rows[k][i] * d + j] += pd[i * d + j];
        }
    }
    return detail::make_result({n, d}, std::move(out), parts, [d, rows](detail::Node& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            auto& p = *self.parents[k];
            if (!p.requires_grad) continue;
            for (std::size_t i = 0; i < rows[k].size(); ++i)
                for (std::size_t j = 0; j < d; ++j) p.grad[i * d + j] += self.grad[rows[k][i] * d + j];
        }
    });
}

/// Elements x[i, cols[i][j]] -> [n, k]; entries with keep[i][j] == false become 0.
inline Tensor gather_cols(const Tensor& x, const std::vector<std::vector<std::size_t>>& cols,
                          const std::vector<std::vector<bool>>& keep = {}) {
    detail::require_rank(x, 2, "gather_cols");
    const std::size_t n = x.dim(0);
    const std::size_t c = x.dim(1);
    if (cols.size() != n) throw ShapeError("gather_cols: index rows mismatch");
    const std::size_t k = n ? cols[0].size() : 0;
    std::vector<std::size_t> flat(n * k);
    std::vector<double> mask(n * k, 1.0);
    std::vector<double> out(n * k);
    for (std::size_t i = 0; i < n; ++i) {
        if (cols[i].size() != k) throw ShapeError("gather_cols: ragged index rows");
        for (std::size_t j = 0; j < k; ++j) {
            if (cols[i][j] >= c) throw ShapeError("gather_cols: column out of range");
            flat[i * k + j] = i * c + cols[i][j];
            if (!keep.empty() && !keep[i][j]) mask[i * k + j] = 0.0;
            out[i * k + j] = mask[i * k + j] * x[flat[i * k + j]];
        }
    }
    return detail::make_result({n, k}, std::move(out), {x},
                               [flat = std::move(flat), mask = std::move(mask)](detail::Node& self) {
                                   auto& p = detail::parent(self, 0);
                                   for (std::size_t i = 0; i < flat.size(); ++i) p.grad[flat[i]] += mask[i] * self.grad[i];
                               });
}

/// Each row divided by its sum. All-zero rows stay zero.
inline Tensor row_normalize(const Tensor& x) {
    detail::require_rank(x, 2, "row_normalize");
    const std::size_t n = x.dim(0);
    const std::size_t k = x.dim(1);
    std::vector<double> out(x.numel());
    std::vector<double> sums(n);
    auto xd = x.data();
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += xd[i * k + j];
        sums[i] = s;
        for (std::size_t j = 0; j < k; ++j) out[i * k + j] = s != 0.0 ? xd[i * k + j] / s : 0.0;
    }
    return detail::make_result(x.shape(), std::move(out), {x}, [n, k, sums = std::move(sums)](detail::Node& self) {
        auto& p = detail::parent(self, 0);
        for (std::size_t i = 0; i < n; ++i) {
            const double s = sums[i];
            if (s == 0.0) continue;
            double gx = 0.0;
            for (std::size_t j = 0; j < k; ++j) gx += self.grad[i * k + j] * p.data[i * k + j];
            for (std::size_t j = 0; j < k; ++j) p.grad[i * k + j] += self.grad[i * k + j] / s - gx / (s * s);
        }
    });
}

/// Elements x[i, j] for (i, j) pairs -> 1-D [m].
inline Tensor gather_elements(const Tensor& x, const std::vector<std::pair<std::size_t, std::size_t>>& at) {
    detail::require_rank(x, 2, "gather_elements");
    const std::size_t c = x.dim(1);
    std::vector<std::size_t> flat(at.size());
    std::vector<double> out(at.size());
    for (std::size_t i = 0; i < at.size(); ++i) {
        if (at[i].first >= x.dim(0) || at[i].second >= c) throw ShapeError("gather_elements: out of range");
        flat[i] = at[i].first * c + at[i].second;
        out[i] = x[flat[i]];
    }
    const std::size_t m = at.size();
    return detail::make_result({m}, std::move(out), {x}, [flat = std::move(flat)](detail::Node& self) {
        auto& p = detail::parent(self, 0);
        for (std::size_t i = 0; i < flat.size(); ++i) p.grad[flat[i]] += self.grad[i];
    });
}

/// Row i of x [m, d] multiplied by w[i] (w is 1-D [m]).
inline Tensor row_scale(const Tensor& x, const Tensor& w) {
    detail::require_rank(x, 2, "row_scale");
    const std::size_t m = x.dim(0);
    const std::size_t d = x.dim(1);
    if (w.numel() != m) throw ShapeError("row_scale: need one weight per row");
    std::vector<double> out(x.numel());
    auto xd = x.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xd[i * d + j] * w[i];
    return detail::make_result(x.shape(), std::move(out), {x, w}, [m, d](detail::Node& self) {
        auto& px = detail::parent(self, 0);
        auto& pw = detail::parent(self, 1);
        for (std::size_t i = 0; i < m; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                if (px.requires_grad) px.grad[i * d + j] += self.grad[i * d + j] * pw.data[i];
                acc += self.grad[i * d + j] * px.data[i * d + j];
            }
            if (pw.requires_grad) pw.grad[i] += acc;
        }
    });
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// i.i.d. N(0, std^2) samples: each value is z * std with z from rng.normal().
inline Tensor randn_init(Shape shape, double std, Rng& rng, bool requires_grad = false) {
    if (!(std > 0.0)) {
        throw ConfigError("randn_init: std must be positive, got " + std::to_string(std));
    }
    if (shape.empty() || shape_numel(shape) == 0) {
        throw ShapeError("randn_init: empty shape");
    }
    std::vector<double> data(shape_numel(shape));
    for (double& v : data) v = rng.normal() * std;
    return Tensor::from(std::move(shape), std::move(data), requires_grad);
}

}  // namespace scaleforge
