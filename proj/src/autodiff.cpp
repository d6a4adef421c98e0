#include "forge/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

namespace forge::ad {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

std::atomic<uint64_t> g_next_id{1};

std::shared_ptr<Node> make_node(Tensor val, std::vector<Var> parents) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    n->parents.reserve(parents.size());
    for (const auto& p : parents) {
        n->parents.push_back(p.ptr());
        n->needs_grad = n->needs_grad || p.needs_grad();
    }
    return n;
}

void maybe_acc(Node& parent, const Tensor& g) {
    if (parent.needs_grad) parent.accumulate(g);
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a.val().same_shape(b.val()))
        throw ContractViolation(std::string(op) + ": shape mismatch, " + a.val().shape_str() +
                                " vs " + b.val().shape_str());
}

double stable_softplus(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace

Var constant(Tensor t) {
    auto n = make_node(std::move(t), {});
    n->needs_grad = false;
    return Var(n);
}

Var leaf(Tensor t, bool needs_grad) {
    auto n = make_node(std::move(t), {});
    n->needs_grad = needs_grad;
    return Var(n);
}

void backward(const Var& root, const Tensor& seed) {
    if (!root.needs_grad()) return;
    root.node()->accumulate(seed);

    // Reachable set, then process in descending creation id (a topo order).
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root.node()};
    seen.insert(root.node());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (auto& p : n->parents) {
            if (p->needs_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });
    for (Node* n : order) {
        if (n->backfn && !n->grad.empty()) n->backfn(*n);
    }
}

void backward(const Var& root) {
    backward(root, Tensor::full(root.val().dims(), 1.0));
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out = a.val();
    out.add_(b.val());
    auto n = make_node(std::move(out), {a, b});
    if (n->needs_grad)
        n->backfn = [](Node& n) {
            maybe_acc(*n.parents[0], n.grad);
            maybe_acc(*n.parents[1], n.grad);
        };
    return Var(n);
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out = a.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b.val()[i];
    auto n = make_node(std::move(out), {a, b});
    if (n->needs_grad)
        n->backfn = [](Node& n) {
            maybe_acc(*n.parents[0], n.grad);
            if (n.parents[1]->needs_grad) {
                Tensor g = n.grad;
                g.scale_(-1.0);
                n.parents[1]->accumulate(g);
            }
        };
    return Var(n);
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out = a.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b.val()[i];
    auto n = make_node(std::move(out), {a, b});
    if (n->needs_grad)
        n->backfn = [](Node& n) {
            const Tensor& av = n.parents[0]->val;
            const Tensor& bv = n.parents[1]->val;
            if (n.parents[0]->needs_grad) {
                Tensor g = n.grad;
                for (int64_t i = 0; i < g.numel(); ++i) g[i] *= bv[i];
                n.parents[0]->accumulate(g);
            }
            if (n.parents[1]->needs_grad) {
                Tensor g = n.grad;
                for (int64_t i = 0; i < g.numel(); ++i) g[i] *= av[i];
                n.parents[1]->accumulate(g);
            }
        };
    return Var(n);
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double s) {
    Tensor out = a.val();
    out.scale_(s);
    auto n = make_node(std::move(out), {a});
    if (n->needs_grad)
        n->backfn = [s](Node& n) {
            Tensor g = n.grad;
            g.scale_(s);
            n.parents[0]->accumulate(g);
        };
    return Var(n);
}

Var add_scalar(const Var& a, double s) {
    Tensor out = a.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += s;
    auto n = make_node(std::move(out), {a});
    if (n->needs_grad)
        n->backfn = [](Node& n) { n.parents[0]->accumulate(n.grad); };
    return Var(n);
}

Var exp(const Var& a) {
    Tensor out = a.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
    auto n = make_node(std::move(out), {a});
    if (n->needs_grad)
        n->backfn = [](Node& n) {
            Tensor g = n.grad;
            for (int64_t i = 0; i < g.numel(); ++i) g[i] *= n.val[i];
            n.parents[0]->accumulate(g);
        };
    return Var(n);
}

Var log(const Var& a) {
    Tensor out = a.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
    auto n = make_node(std::move(out), {a});
    if (n->needs_grad)
        n->backfn = [](Node& n) {
            Tensor g = n.grad;
            const Tensor& x = n.parents[0]->val;
            for (int64_t i = 0; i < g.numel(); ++i) g[i] /= x[i];
            n.parents[0]->accumulate(g);
        };
    return Var(n);
}

Var recip(const Var& a) {
    Tensor out = a.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / out[i];
    auto n = make_node(std::move(out), {a});
    if (n->needs_grad)
        n->backfn = [](Node& n) {
            Tensor g = n.grad;
            for (int64_t i = 0; i < g.numel(); ++i) g[i] *= -n.val[i] * n.val[i];
            n.parents[0]->accumulate(g);
        };
    return Var(n);
}

Var sigmoid(const Var& a) {
    Tensor out = a.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
    auto n = make_node(std::move(out), {a});
    if (n->needs_grad)
        n->backfn = [](Node& n) {
            Tensor g = n.grad;
            for (int64_t i = 0; i < g.numel(); ++i) g[i] *= n.val[i] * (1.0 - n.val[i]);
            n.parents[0]->accumulate(g);
        };
    return Var(n);
}

Var softplus(const Var& a) {
    Tensor out = a.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = stable_softplus(out[i]);
    auto n = make_node(std::move(out), {a});
    if (n->needs_grad)
        n->backfn = [](Node& n) {
            Tensor g = n.grad;
            const Tensor& x = n.parents[0]->val;
            for (int64_t i = 0; i < g.numel(); ++i) g[i] *= 1.0 / (1.0 + std::exp(-x[i]));
            n.parents[0]->accumulate(g);
        };
    return Var(n);
}

Var silu(const Var& a) {
    Tensor out = a.val();
    for (int64_t i = 0; i < out.numel(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-out[i]));
        out[i] *= s;
    }
    auto n = make_node(std::move(out), {a});
    if (n->needs_grad)
        n->backfn = [](Node& n) {
            Tensor g = n.grad;
            const Tensor& x = n.parents[0]->val;
            for (int64_t i = 0; i < g.numel(); ++i) {
                double s = 1.0 / (1.0 + std::exp(-x[i]));
                g[i] *= s * (1.0 + x[i] * (1.0 - s));
            }
            n.parents[0]->accumulate(g);
        };
    return Var(n);
}

Var square(const Var& a) {
    Tensor out = a.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= out[i];
    auto n = make_node(std::move(out), {a});
    if (n->needs_grad)
        n->backfn = [](Node& n) {
            Tensor g = n.grad;
            const Tensor& x = n.parents[0]->val;
            for (int64_t i = 0; i < g.numel(); ++i) g[i] *= 2.0 * x[i];
            n.parents[0]->accumulate(g);
        };
    return Var(n);
}

Var scale_by_var(const Var& x, const Var& s) {
    if (s.val().numel() != 1) throw ContractViolation("scale_by_var: scale must be a scalar");
    double sv = s.val()[0];
    Tensor out = x.val();
    out.scale_(sv);
    auto n = make_node(std::move(out), {x, s});
    if (n->needs_grad)
        n->backfn = [sv](Node& n) {
            if (n.parents[0]->needs_grad) {
                Tensor g = n.grad;
                g.scale_(sv);
                n.parents[0]->accumulate(g);
            }
            if (n.parents[1]->needs_grad) {
                const Tensor& xv = n.parents[0]->val;
                double acc = 0.0;
                for (int64_t i = 0; i < xv.numel(); ++i) acc += n.grad[i] * xv[i];
                n.parents[1]->accumulate(Tensor::scalar(acc));
            }
        };
    return Var(n);
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Var sum_all(const Var& a) {
    double acc = 0.0;
    for (int64_t i = 0; i < a.val().numel(); ++i) acc += a.val()[i];
    auto n = make_node(Tensor::scalar(acc), {a});
    if (n->needs_grad)
        n->backfn = [](Node& n) {
            n.parents[0]->accumulate(Tensor::full(n.parents[0]->val.dims(), n.grad[0]));
        };
    return Var(n);
}

Var mean_all(const Var& a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(a.val().numel()));
}

// ---------------------------------------------------------------------------
// matrix ops
// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    if (av.rank() != 2 || bv.rank() != 2) throw ContractViolation("matmul: rank-2 operands required");
    int64_t m = trans_a ? av.dim(1) : av.dim(0);
    int64_t k = trans_a ? av.dim(0) : av.dim(1);
    int64_t kb = trans_b ? bv.dim(1) : bv.dim(0);
    int64_t nn = trans_b ? bv.dim(0) : bv.dim(1);
    if (k != kb)
        throw ContractViolation("matmul: inner dims mismatch, " + av.shape_str() + " x " + bv.shape_str());

    Tensor out({m, nn});
    {
        CMap A(av.data(), av.dim(0), av.dim(1));
        CMap B(bv.data(), bv.dim(0), bv.dim(1));
        MMap C(out.data(), m, nn);
        if (!trans_a && !trans_b) C.noalias() = A * B;
        else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
        else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
        else C.noalias() = A.transpose() * B.transpose();
    }
    auto n = make_node(std::move(out), {a, b});
    if (n->needs_grad)
        n->backfn = [trans_a, trans_b](Node& n) {
            const Tensor& av = n.parents[0]->val;
            const Tensor& bv = n.parents[1]->val;
            CMap A(av.data(), av.dim(0), av.dim(1));
            CMap B(bv.data(), bv.dim(0), bv.dim(1));
            CMap G(n.grad.data(), n.grad.dim(0), n.grad.dim(1));
            if (n.parents[0]->needs_grad) {
                Tensor da(av.dims());
                MMap DA(da.data(), av.dim(0), av.dim(1));
                // d op(A) = G * op(B)^T; transpose back if A was transposed.
                if (!trans_a) {
                    if (!trans_b) DA.noalias() = G * B.transpose();
                    else DA.noalias() = G * B;
                } else {
                    if (!trans_b) DA.noalias() = B * G.transpose();
                    else DA.noalias() = B.transpose() * G.transpose();
                }
                n.parents[0]->accumulate(da);
            }
            if (n.parents[1]->needs_grad) {
                Tensor db(bv.dims());
                MMap DB(db.data(), bv.dim(0), bv.dim(1));
                if (!trans_b) {
                    if (!trans_a) DB.noalias() = A.transpose() * G;
                    else DB.noalias() = A * G;
                } else {
                    if (!trans_a) DB.noalias() = G.transpose() * A;
                    else DB.noalias() = G.transpose() * A.transpose();
                }
                n.parents[1]->accumulate(db);
            }
        };
    return Var(n);
}

Var transpose2d(const Var& a) {
    const Tensor& av = a.val();
    if (av.rank() != 2) throw ContractViolation("transpose2d: rank-2 required");
    Tensor out({av.dim(1), av.dim(0)});
    for (int64_t i = 0; i < av.dim(0); ++i)
        for (int64_t j = 0; j < av.dim(1); ++j) out.at(j, i) = av.at(i, j);
    auto n = make_node(std::move(out), {a});
    if (n->needs_grad)
        n->backfn = [](Node& n) {
            const Tensor& g = n.grad;
            Tensor dx(n.parents[0]->val.dims());
            for (int64_t i = 0; i < g.dim(0); ++i)
                for (int64_t j = 0; j < g.dim(1); ++j) dx.at(j, i) = g.at(i, j);
            n.parents[0]->accumulate(dx);
        };
    return Var(n);
}

Var softmax_rows(const Var& a) {
    const Tensor& av = a.val();
    if (av.rank() != 2) throw ContractViolation("softmax_rows: rank-2 required");
    Tensor out(av.dims());
    int64_t rows = av.dim(0), cols = av.dim(1);
    for (int64_t i = 0; i < rows; ++i) {
        double mx = -1e300;
        for (int64_t j = 0; j < cols; ++j) mx = std::max(mx, av.at(i, j));
        double denom = 0.0;
        for (int64_t j = 0; j < cols; ++j) {
            double e = std::exp(av.at(i, j) - mx);
            out.at(i, j) = e;
            denom += e;
        }
        for (int64_t j = 0; j < cols; ++j) out.at(i, j) /= denom;
    }
    auto n = make_node(std::move(out), {a});
    if (n->needs_grad)
        n->backfn = [](Node& n) {
            const Tensor& y = n.val;
            const Tensor& g = n.grad;
            Tensor dx(y.dims());
            for (int64_t i = 0; i < y.dim(0); ++i) {
                double dot = 0.0;
                for (int64_t j = 0; j < y.dim(1); ++j) dot += g.at(i, j) * y.at(i, j);
                for (int64_t j = 0; j < y.dim(1); ++j)
                    dx.at(i, j) = y.at(i, j) * (g.at(i, j) - dot);
            }
            n.parents[0]->accumulate(dx);
        };
    return Var(n);
}

Var logsumexp_rows(const Var& a) {
    const Tensor& av = a.val();
    if (av.rank() != 2) throw ContractViolation("logsumexp_rows: rank-2 required");
    int64_t rows = av.dim(0), cols = av.dim(1);
    Tensor out({rows});
    for (int64_t i = 0; i < rows; ++i) {
        double mx = -1e300;
        for (int64_t j = 0; j < cols; ++j) mx = std::max(mx, av.at(i, j));
        double s = 0.0;
        for (int64_t j = 0; j < cols; ++j) s += std::exp(av.at(i, j) - mx);
        out[i] = mx + std::log(s);
    }
    auto n = make_node(std::move(out), {a});
    if (n->needs_grad)
        n->backfn = [](Node& n) {
            const Tensor& x = n.parents[0]->val;
            Tensor dx(x.dims());
            for (int64_t i = 0; i < x.dim(0); ++i)
                for (int64_t j = 0; j < x.dim(1); ++j)
                    dx.at(i, j) = n.grad[i] * std::exp(x.at(i, j) - n.val[i]);
            n.parents[0]->accumulate(dx);
        };
    return Var(n);
}

Var take_diag(const Var& a) {
    const Tensor& av = a.val();
    if (av.rank() != 2 || av.dim(0) != av.dim(1))
        throw ContractViolation("take_diag: square matrix required, got " + av.shape_str());
    int64_t nn = av.dim(0);
    Tensor out({nn});
    for (int64_t i = 0; i < nn; ++i) out[i] = av.at(i, i);
    auto n = make_node(std::move(out), {a});
    if (n->needs_grad)
        n->backfn = [](Node& n) {
            Tensor dx(n.parents[0]->val.dims());
            for (int64_t i = 0; i < dx.dim(0); ++i) dx.at(i, i) = n.grad[i];
            n.parents[0]->accumulate(dx);
        };
    return Var(n);
}

Var layer_norm_rows(const Var& a, double eps) {
    const Tensor& av = a.val();
    if (av.rank() != 2) throw ContractViolation("layer_norm_rows: rank-2 required");
    int64_t rows = av.dim(0), cols = av.dim(1);
    Tensor out(av.dims());
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    for (int64_t i = 0; i < rows; ++i) {
        double mu = 0.0;
        for (int64_t j = 0; j < cols; ++j) mu += av.at(i, j);
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (int64_t j = 0; j < cols; ++j) {
            double d = av.at(i, j) - mu;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(i)] = inv;
        for (int64_t j = 0; j < cols; ++j) out.at(i, j) = (av.at(i, j) - mu) * inv;
    }
    auto n = make_node(std::move(out), {a});
    if (n->needs_grad)
        n->backfn = [inv_std](Node& n) {
            const Tensor& y = n.val;
            const Tensor& g = n.grad;
            int64_t rows = y.dim(0), cols = y.dim(1);
            Tensor dx(y.dims());
            for (int64_t i = 0; i < rows; ++i) {
                double gmean = 0.0, gydot = 0.0;
                for (int64_t j = 0; j < cols; ++j) {
                    gmean += g.at(i, j);
                    gydot += g.at(i, j) * y.at(i, j);
                }
                gmean /= static_cast<double>(cols);
                gydot /= static_cast<double>(cols);
                double inv = (*inv_std)[static_cast<size_t>(i)];
                for (int64_t j = 0; j < cols; ++j)
                    dx.at(i, j) = inv * (g.at(i, j) - gmean - y.at(i, j) * gydot);
            }
            n.parents[0]->accumulate(dx);
        };
    return Var(n);
}

Var l2_normalize_rows(const Var& a) {
    const Tensor& av = a.val();
    if (av.rank() != 2) throw ContractViolation("l2_normalize_rows: rank-2 required");
    int64_t rows = av.dim(0), cols = av.dim(1);
    Tensor out(av.dims());
    auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    for (int64_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < cols; ++j) s += av.at(i, j) * av.at(i, j);
        double r = std::sqrt(s);
        if (r < 1e-300) throw ContractViolation("l2_normalize_rows: zero row");
        (*norms)[static_cast<size_t>(i)] = r;
        for (int64_t j = 0; j < cols; ++j) out.at(i, j) = av.at(i, j) / r;
    }
    auto n = make_node(std::move(out), {a});
    if (n->needs_grad)
        n->backfn = [norms](Node& n) {
            const Tensor& y = n.val;
            const Tensor& g = n.grad;
            Tensor dx(y.dims());
            for (int64_t i = 0; i < y.dim(0); ++i) {
                double dot = 0.0;
                for (int64_t j = 0; j < y.dim(1); ++j) dot += g.at(i, j) * y.at(i, j);
                double r = (*norms)[static_cast<size_t>(i)];
                for (int64_t j = 0; j < y.dim(1); ++j)
                    dx.at(i, j) = (g.at(i, j) - y.at(i, j) * dot) / r;
            }
            n.parents[0]->accumulate(dx);
        };
    return Var(n);
}

Var add_rowvec(const Var& x, const Var& v) {
    const Tensor& xv = x.val();
    const Tensor& vv = v.val();
    if (xv.rank() != 2 || vv.rank() != 1 || vv.dim(0) != xv.dim(1))
        throw ContractViolation("add_rowvec: shapes " + xv.shape_str() + " and " + vv.shape_str());
    Tensor out = xv;
    for (int64_t i = 0; i < xv.dim(0); ++i)
        for (int64_t j = 0; j < xv.dim(1); ++j) out.at(i, j) += vv[j];
    auto n = make_node(std::move(out), {x, v});
    if (n->needs_grad)
        n->backfn = [](Node& n) {
            maybe_acc(*n.parents[0], n.grad);
            if (n.parents[1]->needs_grad) {
                Tensor dv({n.grad.dim(1)});
                for (int64_t i = 0; i < n.grad.dim(0); ++i)
                    for (int64_t j = 0; j < n.grad.dim(1); ++j) dv[j] += n.grad.at(i, j);
                n.parents[1]->accumulate(dv);
            }
        };
    return Var(n);
}

Var mul_rowvec(const Var& x, const Var& v) {
    const Tensor& xv = x.val();
    const Tensor& vv = v.val();
    if (xv.rank() != 2 || vv.rank() != 1 || vv.dim(0) != xv.dim(1))
        throw ContractViolation("mul_rowvec: shapes " + xv.shape_str() + " and " + vv.shape_str());
    Tensor out = xv;
    for (int64_t i = 0; i < xv.dim(0); ++i)
        for (int64_t j = 0; j < xv.dim(1); ++j) out.at(i, j) *= vv[j];
    auto n = make_node(std::move(out), {x, v});
    if (n->needs_grad)
        n->backfn = [](Node& n) {
            const Tensor& xv = n.parents[0]->val;
            const Tensor& vv = n.parents[1]->val;
            if (n.parents[0]->needs_grad) {
                Tensor dx = n.grad;
                for (int64_t i = 0; i < dx.dim(0); ++i)
                    for (int64_t j = 0; j < dx.dim(1); ++j) dx.at(i, j) *= vv[j];
                n.parents[0]->accumulate(dx);
            }
            if (n.parents[1]->needs_grad) {
                Tensor dv({xv.dim(1)});
                for (int64_t i = 0; i < xv.dim(0); ++i)
                    for (int64_t j = 0; j < xv.dim(1); ++j) dv[j] += n.grad.at(i, j) * xv.at(i, j);
                n.parents[1]->accumulate(dv);
            }
        };
    return Var(n);
}

Var slice_cols(const Var& a, int64_t c0, int64_t len) {
    const Tensor& av = a.val();
    if (av.rank() != 2 || c0 < 0 || c0 + len > av.dim(1))
        throw ContractViolation("slice_cols: out of range");
    Tensor out({av.dim(0), len});
    for (int64_t i = 0; i < av.dim(0); ++i)
        for (int64_t j = 0; j < len; ++j) out.at(i, j) = av.at(i, c0 + j);
    auto n = make_node(std::move(out), {a});
    if (n->needs_grad)
        n->backfn = [c0](Node& n) {
            Tensor dx(n.parents[0]->val.dims());
            for (int64_t i = 0; i < n.grad.dim(0); ++i)
                for (int64_t j = 0; j < n.grad.dim(1); ++j) dx.at(i, c0 + j) = n.grad.at(i, j);
            n.parents[0]->accumulate(dx);
        };
    return Var(n);
}

Var slice_rows(const Var& a, int64_t r0, int64_t len) {
    const Tensor& av = a.val();
    if (av.rank() != 2 || r0 < 0 || r0 + len > av.dim(0))
        throw ContractViolation("slice_rows: out of range");
    Tensor out({len, av.dim(1)});
    std::memcpy(out.data(), av.data() + r0 * av.dim(1),
                static_cast<size_t>(len * av.dim(1)) * sizeof(double));
    auto n = make_node(std::move(out), {a});
    if (n->needs_grad)
        n->backfn = [r0](Node& n) {
            Tensor dx(n.parents[0]->val.dims());
            std::memcpy(dx.data() + r0 * dx.dim(1), n.grad.data(),
                        static_cast<size_t>(n.grad.numel()) * sizeof(double));
            n.parents[0]->accumulate(dx);
        };
    return Var(n);
}

Var repeat_rows(const Var& a, int64_t k) {
    const Tensor& av = a.val();
    if (av.rank() != 2 || k < 1) throw ContractViolation("repeat_rows: rank-2 and k >= 1 required");
    Tensor out({av.dim(0) * k, av.dim(1)});
    for (int64_t i = 0; i < av.dim(0); ++i)
        for (int64_t r = 0; r < k; ++r)
            std::memcpy(out.data() + (i * k + r) * av.dim(1), av.data() + i * av.dim(1),
                        static_cast<size_t>(av.dim(1)) * sizeof(double));
    auto n = make_node(std::move(out), {a});
    if (n->needs_grad)
        n->backfn = [k](Node& n) {
            const Tensor& av = n.parents[0]->val;
            Tensor dx(av.dims());
            for (int64_t i = 0; i < av.dim(0); ++i)
                for (int64_t r = 0; r < k; ++r)
                    for (int64_t j = 0; j < av.dim(1); ++j)
                        dx.at(i, j) += n.grad.at(i * k + r, j);
            n.parents[0]->accumulate(dx);
        };
    return Var(n);
}

Var reshape(const Var& a, std::vector<int64_t> dims) {
    Tensor out = a.val().reshaped(std::move(dims));
    auto n = make_node(std::move(out), {a});
    if (n->needs_grad)
        n->backfn = [](Node& n) {
            n.parents[0]->accumulate(n.grad.reshaped(n.parents[0]->val.dims()));
        };
    return Var(n);
}

Var concat_axis0(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractViolation("concat_axis0: empty input");
    std::vector<int64_t> dims = parts[0].val().dims();
    int64_t total = 0;
    int64_t inner = parts[0].val().numel() / std::max<int64_t>(dims[0], 1);
    for (const auto& p : parts) {
        const auto& d = p.val().dims();
        if (d.size() != dims.size() || !std::equal(d.begin() + 1, d.end(), dims.begin() + 1))
            throw ContractViolation("concat_axis0: trailing dims mismatch");
        total += d[0];
    }
    dims[0] = total;
    Tensor out(dims);
    int64_t off = 0;
    for (const auto& p : parts) {
        std::memcpy(out.data() + off, p.val().data(),
                    static_cast<size_t>(p.val().numel()) * sizeof(double));
        off += p.val().numel();
    }
    auto n = make_node(std::move(out), parts);
    if (n->needs_grad)
        n->backfn = [inner](Node& n) {
            (void)inner;
            int64_t off = 0;
            for (auto& p : n.parents) {
                if (p->needs_grad) {
                    Tensor g(p->val.dims());
                    std::memcpy(g.data(), n.grad.data() + off,
                                static_cast<size_t>(p->val.numel()) * sizeof(double));
                    p->accumulate(g);
                }
                off += p->val.numel();
            }
        };
    return Var(n);
}

// ---------------------------------------------------------------------------
// conv / pool
// ---------------------------------------------------------------------------

std::array<int64_t, 3> conv3d_out_dims(const std::array<int64_t, 3>& in, const Conv3dSpec& s) {
    std::array<int64_t, 3> out{};
    for (int i = 0; i < 3; ++i) {
        int64_t eff = in[static_cast<size_t>(i)] + 2 * s.padding[static_cast<size_t>(i)] -
                      s.kernel[static_cast<size_t>(i)];
        if (eff < 0) throw ContractViolation("conv3d: kernel larger than padded input");
        out[static_cast<size_t>(i)] = eff / s.stride[static_cast<size_t>(i)] + 1;
    }
    return out;
}

namespace {

// cols: (To*Ho*Wo, Cin*kt*kh*kw)
Tensor im2col(const Tensor& x, const Conv3dSpec& s, const std::array<int64_t, 3>& out) {
    int64_t cin = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto [kt, kh, kw] = s.kernel;
    auto [st, sh, sw] = s.stride;
    auto [pt, ph, pw] = s.padding;
    int64_t N = out[0] * out[1] * out[2];
    int64_t K = cin * kt * kh * kw;
    Tensor cols({N, K});
    double* cp = cols.data();
    const double* xp = x.data();
    int64_t n = 0;
    for (int64_t to = 0; to < out[0]; ++to) {
        int64_t t0 = to * st - pt;
        for (int64_t ho = 0; ho < out[1]; ++ho) {
            int64_t h0 = ho * sh - ph;
            for (int64_t wo = 0; wo < out[2]; ++wo, ++n) {
                int64_t w0 = wo * sw - pw;
                double* row = cp + n * K;
                int64_t k = 0;
                for (int64_t c = 0; c < cin; ++c) {
                    const double* xc = xp + c * T * H * W;
                    for (int64_t dt = 0; dt < kt; ++dt) {
                        int64_t t = t0 + dt;
                        bool tin = (t >= 0 && t < T);
                        for (int64_t dh = 0; dh < kh; ++dh) {
                            int64_t h = h0 + dh;
                            bool hin = tin && (h >= 0 && h < H);
                            for (int64_t dw = 0; dw < kw; ++dw, ++k) {
                                int64_t w = w0 + dw;
                                row[k] = (hin && w >= 0 && w < W) ? xc[(t * H + h) * W + w] : 0.0;
                            }
                        }
                    }
                }
            }
        }
    }
    return cols;
}

void col2im_acc(const Tensor& dcols, const Conv3dSpec& s, const std::array<int64_t, 3>& out,
                Tensor& dx) {
    int64_t cin = dx.dim(0), T = dx.dim(1), H = dx.dim(2), W = dx.dim(3);
    auto [kt, kh, kw] = s.kernel;
    auto [st, sh, sw] = s.stride;
    auto [pt, ph, pw] = s.padding;
    int64_t K = cin * kt * kh * kw;
    double* xp = dx.data();
    const double* cp = dcols.data();
    int64_t n = 0;
    for (int64_t to = 0; to < out[0]; ++to) {
        int64_t t0 = to * st - pt;
        for (int64_t ho = 0; ho < out[1]; ++ho) {
            int64_t h0 = ho * sh - ph;
            for (int64_t wo = 0; wo < out[2]; ++wo, ++n) {
                int64_t w0 = wo * sw - pw;
                const double* row = cp + n * K;
                int64_t k = 0;
                for (int64_t c = 0; c < cin; ++c) {
                    double* xc = xp + c * T * H * W;
                    for (int64_t dt = 0; dt < kt; ++dt) {
                        int64_t t = t0 + dt;
                        bool tin = (t >= 0 && t < T);
                        for (int64_t dh = 0; dh < kh; ++dh) {
                            int64_t h = h0 + dh;
                            bool hin = tin && (h >= 0 && h < H);
                            for (int64_t dw = 0; dw < kw; ++dw, ++k) {
                                int64_t w = w0 + dw;
                                if (hin && w >= 0 && w < W) xc[(t * H + h) * W + w] += row[k];
                            }
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Var conv3d(const Var& x, const Var& w, const Var& b, const Conv3dSpec& spec) {
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    if (xv.rank() != 4 || wv.rank() != 5)
        throw ContractViolation("conv3d: x must be (C,T,H,W), w must be (O,C,kt,kh,kw)");
    if (xv.dim(0) != wv.dim(1))
        throw ContractViolation("conv3d: channel mismatch, input " + xv.shape_str() + " vs kernel " +
                                wv.shape_str());
    int64_t cout = wv.dim(0);
    auto out_dims = conv3d_out_dims({xv.dim(1), xv.dim(2), xv.dim(3)}, spec);
    int64_t N = out_dims[0] * out_dims[1] * out_dims[2];
    int64_t K = wv.numel() / cout;

    Tensor cols = im2col(xv, spec, out_dims);
    Tensor out_mat({N, cout});
    {
        CMap C(cols.data(), N, K);
        CMap Wm(wv.data(), cout, K);
        MMap O(out_mat.data(), N, cout);
        O.noalias() = C * Wm.transpose();
    }
    Tensor out({cout, out_dims[0], out_dims[1], out_dims[2]});
    for (int64_t co = 0; co < cout; ++co) {
        double bias = b.val()[co];
        for (int64_t nidx = 0; nidx < N; ++nidx)
            out[co * N + nidx] = out_mat[nidx * cout + co] + bias;
    }

    auto n = make_node(std::move(out), {x, w, b});
    if (n->needs_grad)
        n->backfn = [spec, out_dims, N, K, cout](Node& n) {
            const Tensor& xv = n.parents[0]->val;
            const Tensor& wv = n.parents[1]->val;
            // gmat: (N, Cout) from grad layout (Cout, N)
            Tensor gmat({N, cout});
            for (int64_t co = 0; co < cout; ++co)
                for (int64_t nidx = 0; nidx < N; ++nidx)
                    gmat[nidx * cout + co] = n.grad[co * N + nidx];
            if (n.parents[2]->needs_grad) {
                Tensor db({cout});
                for (int64_t nidx = 0; nidx < N; ++nidx)
                    for (int64_t co = 0; co < cout; ++co) db[co] += gmat[nidx * cout + co];
                n.parents[2]->accumulate(db);
            }
            bool need_x = n.parents[0]->needs_grad;
            bool need_w = n.parents[1]->needs_grad;
            if (!need_x && !need_w) return;
            CMap G(gmat.data(), N, cout);
            if (need_w) {
                Tensor cols = im2col(xv, spec, out_dims);
                CMap C(cols.data(), N, K);
                Tensor dw(wv.dims());
                MMap DW(dw.data(), cout, K);
                DW.noalias() = G.transpose() * C;
                n.parents[1]->accumulate(dw);
            }
            if (need_x) {
                Tensor dcols({N, K});
                CMap Wm(wv.data(), cout, K);
                MMap DC(dcols.data(), N, K);
                DC.noalias() = G * Wm;
                Tensor dx(xv.dims());
                col2im_acc(dcols, spec, out_dims, dx);
                n.parents[0]->accumulate(dx);
            }
        };
    return Var(n);
}

Var max_pool3d(const Var& x, const Conv3dSpec& spec) {
    const Tensor& xv = x.val();
    if (xv.rank() != 4) throw ContractViolation("max_pool3d: x must be (C,T,H,W)");
    int64_t C = xv.dim(0), T = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    auto out_dims = conv3d_out_dims({T, H, W}, spec);
    Tensor out({C, out_dims[0], out_dims[1], out_dims[2]});
    auto arg = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out.numel()));
    auto [kt, kh, kw] = spec.kernel;
    auto [st, sh, sw] = spec.stride;
    auto [pt, ph, pw] = spec.padding;
    int64_t o = 0;
    for (int64_t c = 0; c < C; ++c) {
        const double* xc = xv.data() + c * T * H * W;
        for (int64_t to = 0; to < out_dims[0]; ++to)
            for (int64_t ho = 0; ho < out_dims[1]; ++ho)
                for (int64_t wo = 0; wo < out_dims[2]; ++wo, ++o) {
                    double best = -1e300;
                    int64_t best_idx = -1;
                    for (int64_t dt = 0; dt < kt; ++dt) {
                        int64_t t = to * st - pt + dt;
                        if (t < 0 || t >= T) continue;
                        for (int64_t dh = 0; dh < kh; ++dh) {
                            int64_t h = ho * sh - ph + dh;
                            if (h < 0 || h >= H) continue;
                            for (int64_t dw = 0; dw < kw; ++dw) {
                                int64_t w = wo * sw - pw + dw;
                                if (w < 0 || w >= W) continue;
                                int64_t idx = (t * H + h) * W + w;
                                if (xc[idx] > best) {
                                    best = xc[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    if (best_idx < 0) throw ContractViolation("max_pool3d: empty window");
                    out[o] = best;
                    (*arg)[static_cast<size_t>(o)] = c * T * H * W + best_idx;
                }
    }
    auto n = make_node(std::move(out), {x});
    if (n->needs_grad)
        n->backfn = [arg](Node& n) {
            Tensor dx(n.parents[0]->val.dims());
            for (int64_t o = 0; o < n.grad.numel(); ++o)
                dx[(*arg)[static_cast<size_t>(o)]] += n.grad[o];
            n.parents[0]->accumulate(dx);
        };
    return Var(n);
}

Var global_avg_pool(const Var& x) {
    const Tensor& xv = x.val();
    if (xv.rank() < 2) throw ContractViolation("global_avg_pool: rank >= 2 required");
    int64_t C = xv.dim(0);
    int64_t inner = xv.numel() / C;
    Tensor out({C});
    for (int64_t c = 0; c < C; ++c) {
        double s = 0.0;
        const double* p = xv.data() + c * inner;
        for (int64_t i = 0; i < inner; ++i) s += p[i];
        out[c] = s / static_cast<double>(inner);
    }
    auto n = make_node(std::move(out), {x});
    if (n->needs_grad)
        n->backfn = [inner](Node& n) {
            Tensor dx(n.parents[0]->val.dims());
            for (int64_t c = 0; c < n.grad.numel(); ++c) {
                double g = n.grad[c] / static_cast<double>(inner);
                double* p = dx.data() + c * inner;
                for (int64_t i = 0; i < inner; ++i) p[i] = g;
            }
            n.parents[0]->accumulate(dx);
        };
    return Var(n);
}

}  // namespace forge::ad
