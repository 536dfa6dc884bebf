#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "peftlab/tensor.h"

namespace peftlab {

using TokenId = std::int32_t;

// Every op records its adjoint on `tape` when any input requires grad.
// Inputs that do not require grad never receive a gradient.

// [m x k] x [k x n] -> [m x n]
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
// [m x k] x [n x k]^T -> [m x n]
Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b);

// Same-shape elementwise sum.
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
// Elementwise product; `b` may also be a vector over a's last axis.
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double factor);
Tensor relu(Tape& tape, const Tensor& x);

// Normalizes each row of x by its root-mean-square, then multiplies by gain.
Tensor rms_norm(Tape& tape, const Tensor& x, const Tensor& gain, double eps = 1e-6);

// Gathers rows of table [V x d] -> [ids.size() x d].
Tensor embedding_lookup(Tape& tape, const Tensor& table, std::span<const TokenId> ids);

// Max-stabilized softmax along `axis`.
Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis);

// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
// Rows whose target equals ignore_index are skipped; zero counted rows give 0.
Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const TokenId> targets,
                     TokenId ignore_index);

Tensor sum(Tape& tape, const Tensor& x);
// Sum of absolute values. The subgradient at 0 is taken as 0.
Tensor l1_norm(Tape& tape, const Tensor& x);

struct AttentionMask {
    bool causal = false;
    // Optional key-validity flags (1 = attend); empty means all keys valid.
    std::vector<std::uint8_t> key_valid;
};

// Scaled dot-product multi-head attention over row-major projections:
// q [m x d], k [n x d], v [n x d] with d split into n_heads contiguous
// column blocks. Query rows with no visible key produce zeros.
Tensor attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                 std::size_t n_heads, const AttentionMask& mask);

}  // namespace peftlab
