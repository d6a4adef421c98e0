#pragma once

#include <array>
#include <functional>
#include <memory>
#include <vector>

#include "forge/tensor.hpp"

namespace forge::ad {

// Reverse-mode autodiff over Tensor. Each op allocates a Node; the graph is
// whatever is reachable from a Var, so independent graphs can be built
// concurrently (node ids come from an atomic counter). Node creation order is
// a valid topological order, which backward() exploits.
struct Node {
    Tensor val;
    Tensor grad;  // allocated lazily on first accumulation
    uint64_t id = 0;
    bool needs_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backfn;  // reads this->grad, accumulates into parents

    void accumulate(const Tensor& g) {
        if (grad.empty()) grad = Tensor::zeros(val.dims());
        grad.add_(g);
    }
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    bool defined() const { return n_ != nullptr; }
    const Tensor& val() const { return n_->val; }
    const Tensor& grad() const { return n_->grad; }
    bool needs_grad() const { return n_->needs_grad; }
    Node* node() const { return n_.get(); }
    const std::shared_ptr<Node>& ptr() const { return n_; }

    double item() const { return n_->val[0]; }

private:
    std::shared_ptr<Node> n_;
};

Var constant(Tensor t);
Var leaf(Tensor t, bool needs_grad = true);

// Seeds `root` with `seed` (ones for scalars when omitted) and accumulates
// gradients into every reachable node with needs_grad.
void backward(const Var& root);
void backward(const Var& root, const Tensor& seed);

// ---- elementwise / scalar ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var exp(const Var& a);
Var log(const Var& a);
Var recip(const Var& a);
Var sigmoid(const Var& a);
Var softplus(const Var& a);
Var silu(const Var& a);
Var square(const Var& a);

// x * s where s is a 1-element Var (broadcast scalar).
Var scale_by_var(const Var& x, const Var& s);

// ---- reductions ----
Var sum_all(const Var& a);
Var mean_all(const Var& a);

// ---- matrix ops (rank-2 operands) ----
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
Var transpose2d(const Var& a);
Var softmax_rows(const Var& a);
Var logsumexp_rows(const Var& a);   // (n, m) -> (n)
Var take_diag(const Var& a);        // (n, n) -> (n)
Var layer_norm_rows(const Var& a, double eps = 1e-6);
Var l2_normalize_rows(const Var& a);
Var add_rowvec(const Var& x, const Var& v);  // (n, d) + (d)
Var mul_rowvec(const Var& x, const Var& v);  // (n, d) * (d)
Var slice_cols(const Var& a, int64_t c0, int64_t len);
Var slice_rows(const Var& a, int64_t r0, int64_t len);
Var repeat_rows(const Var& a, int64_t k);  // each row repeated k times
Var reshape(const Var& a, std::vector<int64_t> dims);

// Concatenate along axis 0; all trailing dims must match.
Var concat_axis0(const std::vector<Var>& parts);

// ---- conv / pool on (C, T, H, W) ----
struct Conv3dSpec {
    std::array<int64_t, 3> kernel;   // (kt, kh, kw)
    std::array<int64_t, 3> stride;   // (st, sh, sw)
    std::array<int64_t, 3> padding;  // zeros
};
// x: (Cin, T, H, W), w: (Cout, Cin, kt, kh, kw), b: (Cout)
Var conv3d(const Var& x, const Var& w, const Var& b, const Conv3dSpec& spec);

// Max pool; out-of-range taps are ignored (equivalent to -inf padding).
Var max_pool3d(const Var& x, const Conv3dSpec& spec);

// (C, T, H, W) -> (C): mean over T, H, W.
Var global_avg_pool(const Var& x);

std::array<int64_t, 3> conv3d_out_dims(const std::array<int64_t, 3>& in,
                                       const Conv3dSpec& spec);

}  // namespace forge::ad
