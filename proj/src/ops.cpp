#include "peftlab/ops.h"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "peftlab/errors.h"

namespace peftlab {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using Stride = Eigen::OuterStride<>;
using SMapR = Eigen::Map<MatR, 0, Stride>;
using CSMapR = Eigen::Map<const MatR, 0, Stride>;

bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
    for (const auto* t : ts) {
        if (t->requires_grad()) return true;
    }
    return false;
}

void require_matrix(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_to_string(t.shape()));
    }
}

CMapR as_matrix(const Tensor& t) {
    return CMapR(t.values().data(), static_cast<Eigen::Index>(t.rows()),
                 static_cast<Eigen::Index>(t.cols()));
}

CMapR as_matrix(std::span<const double> data, std::size_t rows, std::size_t cols) {
    return CMapR(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

// Map over t's gradient accumulator (allocated as zeros on first use).
MapR grad_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
    Tensor h = t;
    return MapR(h.mutable_grad().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                             " vs " + shape_to_string(b.shape()));
    }
}

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: inner dimensions differ for " + shape_to_string(a.shape()) +
                             " x " + shape_to_string(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n);
    MapR(out.data(), m, n).noalias() = as_matrix(a) * as_matrix(b);
    Tensor c({m, n}, std::move(out));
    if (tape.recording() && any_requires_grad({&a, &b})) {
        tape.record(c, [a, b, m, k, n](std::span<const double> g) {
            auto gm = as_matrix(g, m, n);
            if (a.requires_grad()) grad_matrix(a, m, k).noalias() += gm * as_matrix(b).transpose();
            if (b.requires_grad()) grad_matrix(b, k, n).noalias() += as_matrix(a).transpose() * gm;
        });
    }
    return c;
}

Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_nt");
    require_matrix(b, "matmul_nt");
    if (a.cols() != b.cols()) {
        throw DimensionError("matmul_nt: inner dimensions differ for " + shape_to_string(a.shape()) +
                             " x " + shape_to_string(b.shape()) + "^T");
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    std::vector<double> out(m * n);
    MapR(out.data(), m, n).noalias() = as_matrix(a) * as_matrix(b).transpose();
    Tensor c({m, n}, std::move(out));
    if (tape.recording() && any_requires_grad({&a, &b})) {
        tape.record(c, [a, b, m, k, n](std::span<const double> g) {
            auto gm = as_matrix(g, m, n);
            if (a.requires_grad()) grad_matrix(a, m, k).noalias() += gm * as_matrix(b);
            if (b.requires_grad()) grad_matrix(b, n, k).noalias() += gm.transpose() * as_matrix(a);
        });
    }
    return c;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    auto av = a.values(), bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    Tensor c(a.shape(), std::move(out));
    if (tape.recording() && any_requires_grad({&a, &b})) {
        tape.record(c, [a, b](std::span<const double> g) {
            accumulate_grad(a, g);
            accumulate_grad(b, g);
        });
    }
    return c;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    const bool row_broadcast = a.shape() != b.shape();
    if (row_broadcast && !(b.rank() == 1 && b.numel() == a.cols())) {
        throw DimensionError("mul: shape mismatch " + shape_to_string(a.shape()) + " vs " +
                             shape_to_string(b.shape()));
    }
    const std::size_t w = row_broadcast ? b.numel() : a.numel();
    auto av = a.values(), bv = b.values();
    std::vector<double> out(av.size());
    for (std::size_t r = 0; r < out.size(); r += w) {
        for (std::size_t j = 0; j < w; ++j) out[r + j] = av[r + j] * bv[j];
    }
    Tensor c(a.shape(), std::move(out));
    if (tape.recording() && any_requires_grad({&a, &b})) {
        tape.record(c, [a, b, w](std::span<const double> g) {
            auto av = a.values(), bv = b.values();
            if (a.requires_grad()) {
                Tensor ga = a;
                auto da = ga.mutable_grad();
                for (std::size_t r = 0; r < g.size(); r += w) {
                    for (std::size_t j = 0; j < w; ++j) da[r + j] += g[r + j] * bv[j];
                }
            }
            if (b.requires_grad()) {
                Tensor gb = b;
                auto db = gb.mutable_grad();
                for (std::size_t r = 0; r < g.size(); r += w) {
                    for (std::size_t j = 0; j < w; ++j) db[j] += g[r + j] * av[r + j];
                }
            }
        });
    }
    return c;
}

Tensor scale(Tape& tape, const Tensor& a, double factor) {
    auto av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
    Tensor c(a.shape(), std::move(out));
    if (tape.recording() && a.requires_grad()) {
        tape.record(c, [a, factor](std::span<const double> g) {
            std::vector<double> da(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * factor;
            accumulate_grad(a, da);
        });
    }
    return c;
}

Tensor relu(Tape& tape, const Tensor& x) {
    auto xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    Tensor c(x.shape(), std::move(out));
    if (tape.recording() && x.requires_grad()) {
        tape.record(c, [x](std::span<const double> g) {
            auto xv = x.values();
            std::vector<double> dx(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] = xv[i] > 0.0 ? g[i] : 0.0;
            accumulate_grad(x, dx);
        });
    }
    return c;
}

Tensor rms_norm(Tape& tape, const Tensor& x, const Tensor& gain, double eps) {
    if (gain.rank() != 1 || gain.numel() != x.cols()) {
        throw DimensionError("rms_norm: gain " + shape_to_string(gain.shape()) +
                             " does not match last axis of " + shape_to_string(x.shape()));
    }
    const std::size_t rows = x.rows(), d = x.cols();
    auto xv = x.values(), gv = gain.values();
    std::vector<double> inv_rms(rows);
    std::vector<double> out(xv.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * d;
        double ss = 0.0;
        for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
        inv_rms[r] = inv;
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xr[j] * inv * gv[j];
    }
    Tensor c(x.shape(), std::move(out));
    if (tape.recording() && any_requires_grad({&x, &gain})) {
        tape.record(c, [x, gain, rows, d, inv_rms = std::move(inv_rms)](std::span<const double> g) {
            auto xv = x.values(), gv = gain.values();
            std::vector<double> dx(x.requires_grad() ? xv.size() : 0);
            std::vector<double> dg(gain.requires_grad() ? d : 0, 0.0);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* xr = xv.data() + r * d;
                const double* gr = g.data() + r * d;
                const double inv = inv_rms[r];
                if (!dg.empty()) {
                    for (std::size_t j = 0; j < d; ++j) dg[j] += gr[j] * xr[j] * inv;
                }
                if (!dx.empty()) {
                    // dx = inv * (dxhat - xhat * mean(dxhat * xhat))
                    double dot = 0.0;
                    for (std::size_t j = 0; j < d; ++j) dot += gr[j] * gv[j] * xr[j] * inv;
                    dot /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        dx[r * d + j] = inv * (gr[j] * gv[j] - xr[j] * inv * dot);
                    }
                }
            }
            if (!dx.empty()) accumulate_grad(x, dx);
            if (!dg.empty()) accumulate_grad(gain, dg);
        });
    }
    return c;
}

Tensor embedding_lookup(Tape& tape, const Tensor& table, std::span<const TokenId> ids) {
    require_matrix(table, "embedding_lookup");
    if (ids.empty()) throw DimensionError("embedding_lookup: empty id list");
    const std::size_t vocab = table.rows(), d = table.cols();
    auto tv = table.values();
    std::vector<double> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw DataError("embedding_lookup: id " + std::to_string(ids[i]) + " outside table of " +
                            std::to_string(vocab) + " rows");
        }
        std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
    }
    Tensor c({ids.size(), d}, std::move(out));
    if (tape.recording() && table.requires_grad()) {
        std::vector<TokenId> saved(ids.begin(), ids.end());
        tape.record(c, [table, d, saved = std::move(saved)](std::span<const double> g) {
            std::vector<double> dt(table.numel(), 0.0);
            for (std::size_t i = 0; i < saved.size(); ++i) {
                double* row = dt.data() + static_cast<std::size_t>(saved[i]) * d;
                for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
            }
            accumulate_grad(table, dt);
        });
    }
    return c;
}

Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " +
                             shape_to_string(x.shape()));
    }
    const auto& shape = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    const std::size_t len = shape[axis];
    auto xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                const double e = std::exp(xv[base + j * inner] - mx);
                out[base + j * inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
        }
    }
    Tensor c(shape, std::move(out));
    if (tape.recording() && x.requires_grad()) {
        std::weak_ptr<detail::TensorImpl> weak_out = c.impl();
        tape.record(c, [x, weak_out, outer, inner, len](std::span<const double> g) {
            const auto& p = weak_out.lock()->values;
            std::vector<double> dx(g.size());
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * p[base + j * inner];
                    for (std::size_t j = 0; j < len; ++j) {
                        const std::size_t idx = base + j * inner;
                        dx[idx] = p[idx] * (g[idx] - dot);
                    }
                }
            }
            accumulate_grad(x, dx);
        });
    }
    return c;
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const TokenId> targets,
                     TokenId ignore_index) {
    require_matrix(logits, "cross_entropy");
    const std::size_t n = logits.rows(), vocab = logits.cols();
    if (targets.size() != n) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(n) + " logit rows");
    }
    std::size_t counted = 0;
    for (auto t : targets) {
        if (t == ignore_index) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
            throw DataError("cross_entropy: target id " + std::to_string(t) + " outside vocabulary of " +
                            std::to_string(vocab));
        }
        ++counted;
    }
    auto lv = logits.values();
    std::vector<double> probs(counted ? lv.size() : 0);
    double total = 0.0;
    if (counted) {
        for (std::size_t r = 0; r < n; ++r) {
            if (targets[r] == ignore_index) continue;
            const double* row = lv.data() + r * vocab;
            const double mx = *std::max_element(row, row + vocab);
            double z = 0.0;
            for (std::size_t j = 0; j < vocab; ++j) {
                probs[r * vocab + j] = std::exp(row[j] - mx);
                z += probs[r * vocab + j];
            }
            for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] /= z;
            total -= row[targets[r]] - mx - std::log(z);
        }
        total /= static_cast<double>(counted);
    }
    Tensor loss = Tensor::scalar(total);
    if (tape.recording() && logits.requires_grad()) {
        std::vector<TokenId> saved(targets.begin(), targets.end());
        tape.record(loss, [logits, vocab, counted, ignore_index, saved = std::move(saved),
                           probs = std::move(probs)](std::span<const double> g) {
            std::vector<double> dl(logits.numel(), 0.0);
            if (counted) {
                const double s = g[0] / static_cast<double>(counted);
                for (std::size_t r = 0; r < saved.size(); ++r) {
                    if (saved[r] == ignore_index) continue;
                    for (std::size_t j = 0; j < vocab; ++j) dl[r * vocab + j] = s * probs[r * vocab + j];
                    dl[r * vocab + static_cast<std::size_t>(saved[r])] -= s;
                }
            }
            accumulate_grad(logits, dl);
        });
    }
    return loss;
}

Tensor sum(Tape& tape, const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    Tensor c = Tensor::scalar(s);
    if (tape.recording() && x.requires_grad()) {
        tape.record(c, [x](std::span<const double> g) {
            accumulate_grad(x, std::vector<double>(x.numel(), g[0]));
        });
    }
    return c;
}

Tensor l1_norm(Tape& tape, const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += std::abs(v);
    Tensor c = Tensor::scalar(s);
    if (tape.recording() && x.requires_grad()) {
        tape.record(c, [x](std::span<const double> g) {
            auto xv = x.values();
            std::vector<double> dx(xv.size());
            for (std::size_t i = 0; i < xv.size(); ++i) {
                dx[i] = xv[i] > 0.0 ? g[0] : (xv[i] < 0.0 ? -g[0] : 0.0);
            }
            accumulate_grad(x, dx);
        });
    }
    return c;
}

Tensor attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                 std::size_t n_heads, const AttentionMask& mask) {
    require_matrix(q, "attention");
    require_matrix(k, "attention");
    require_matrix(v, "attention");
    const std::size_t m = q.rows(), n = k.rows(), d = q.cols();
    if (k.cols() != d || v.cols() != d || v.rows() != n) {
        throw DimensionError("attention: q " + shape_to_string(q.shape()) + ", k " +
                             shape_to_string(k.shape()) + ", v " + shape_to_string(v.shape()) +
                             " are inconsistent");
    }
    if (n_heads == 0 || d % n_heads != 0) {
        throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " +
                             std::to_string(n_heads) + " heads");
    }
    if (!mask.key_valid.empty() && mask.key_valid.size() != n) {
        throw DimensionError("attention: key mask has " + std::to_string(mask.key_valid.size()) +
                             " entries for " + std::to_string(n) + " keys");
    }
    if (mask.causal && m > n) {
        throw DimensionError("attention: causal mask needs at least as many keys as queries");
    }
    const std::size_t dh = d / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto sd = static_cast<Eigen::Index>(d);
    const auto em = static_cast<Eigen::Index>(m), en = static_cast<Eigen::Index>(n),
               edh = static_cast<Eigen::Index>(dh);
    const double neg_inf = -std::numeric_limits<double>::infinity();
    std::vector<std::size_t> invalid;
    for (std::size_t j = 0; j < mask.key_valid.size(); ++j) {
        if (!mask.key_valid[j]) invalid.push_back(j);
    }

    // Contiguous per-head copies (q pre-scaled) and probabilities [m x n].
    struct Head {
        MatR q, k, v, p;
    };
    std::vector<Head> heads(n_heads);
    std::vector<double> out(m * d);
    for (std::size_t h = 0; h < n_heads; ++h) {
        Head& hd = heads[h];
        hd.q = CSMapR(q.values().data() + h * dh, em, edh, Stride(sd)) * inv_sqrt;
        hd.k = CSMapR(k.values().data() + h * dh, en, edh, Stride(sd));
        hd.v = CSMapR(v.values().data() + h * dh, en, edh, Stride(sd));
        hd.p.noalias() = hd.q * hd.k.transpose();
        for (std::size_t i = 0; i < m; ++i) {
            double* row = hd.p.data() + i * n;
            const std::size_t visible = mask.causal ? i + 1 + (n - m) : n;
            std::fill(row + visible, row + n, 0.0);
            for (std::size_t j : invalid) {
                if (j < visible) row[j] = neg_inf;
            }
            Eigen::Map<Eigen::ArrayXd> r(row, static_cast<Eigen::Index>(visible));
            const double mx = r.maxCoeff();
            if (mx == neg_inf) {
                r.setZero();
                continue;
            }
            r = (r - mx).exp();
            for (std::size_t j : invalid) {
                if (j < visible) row[j] = 0.0;
            }
            r *= 1.0 / r.sum();
        }
        SMapR(out.data() + h * dh, em, edh, Stride(sd)).noalias() = hd.p * hd.v;
    }
    Tensor c({m, d}, std::move(out));
    if (tape.recording() && any_requires_grad({&q, &k, &v})) {
        tape.record(c, [q, k, v, n_heads, m, n, d, dh, inv_sqrt,
                        heads = std::move(heads)](std::span<const double> g) {
            const auto sd = static_cast<Eigen::Index>(d);
            const auto em = static_cast<Eigen::Index>(m), en = static_cast<Eigen::Index>(n),
                       edh = static_cast<Eigen::Index>(dh);
            Tensor gq = q, gk = k, gv = v;
            double* dq = q.requires_grad() ? gq.mutable_grad().data() : nullptr;
            double* dk = k.requires_grad() ? gk.mutable_grad().data() : nullptr;
            double* dv = v.requires_grad() ? gv.mutable_grad().data() : nullptr;
            MatR go(em, edh), ds(em, en);
            for (std::size_t h = 0; h < n_heads; ++h) {
                const Head& hd = heads[h];
                go = CSMapR(g.data() + h * dh, em, edh, Stride(sd));
                if (dv) SMapR(dv + h * dh, en, edh, Stride(sd)).noalias() += hd.p.transpose() * go;
                if (!dq && !dk) continue;
                ds.noalias() = go * hd.v.transpose();
                const Eigen::VectorXd dot = (ds.array() * hd.p.array()).rowwise().sum();
                ds.array() = hd.p.array() * (ds.array().colwise() - dot.array());
                if (dq) SMapR(dq + h * dh, em, edh, Stride(sd)).noalias() += (ds * hd.k) * inv_sqrt;
                if (dk) SMapR(dk + h * dh, en, edh, Stride(sd)).noalias() += ds.transpose() * hd.q;
            }
        });
    }
    return c;
}

}  // namespace peftlab
