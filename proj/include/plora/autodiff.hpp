#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "plora/errors.hpp"
#include "plora/tensor.hpp"

namespace plora {

// Handle into a Tape.
struct Var {
    std::uint32_t id = 0;
};

// Reverse-mode tape. One tape per training step, single writer.
// backward() walks nodes in exact reverse execution order; gradients of
// nodes never touched by the loss stay exactly zero.
class Tape {
  public:
    // Adjoint rule: receives the tape (to accumulate into input grads) and
    // the gradient flowing into this node's output.
    using BackwardFn = std::function<void(Tape&, const Tensor&)>;

    struct Node {
        Tensor value;
        Tensor grad;  // same shape, zero-initialized
        BackwardFn backward;
        const char* op;
    };

    Var push(Tensor value, const char* op) {
        check_finite(value, op);
        Node n;
        n.grad = Tensor(value.shape);
        n.value = std::move(value);
        n.op = op;
        nodes_.push_back(std::move(n));
        return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    void set_backward(Var v, BackwardFn fn) { nodes_[v.id].backward = std::move(fn); }

    Var leaf(Tensor value) { return push(std::move(value), "leaf"); }
    Var constant(Tensor value) { return push(std::move(value), "const"); }

    const Tensor& value(Var v) const { return nodes_[v.id].value; }
    const Tensor& grad(Var v) const { return nodes_[v.id].grad; }
    std::size_t size() const { return nodes_.size(); }
    const char* op_name(std::size_t i) const { return nodes_[i].op; }

    void add_grad(Var v, const Tensor& g) {
        Tensor& dst = nodes_[v.id].grad;
        for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += g.data[i];
    }

    // Seeds d(loss)/d(loss) = 1 and replays the tape backward.
    // `visited` (optional) records op names in visit order, for order auditing.
    void backward(Var loss, std::vector<const char*>* visited = nullptr) {
        if (value(loss).numel() != 1) {
            throw ContractError("backward() target must be a scalar");
        }
        nodes_[loss.id].grad.data[0] = 1.0;
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            if (visited) visited->push_back(nodes_[i].op);
            if (nodes_[i].backward) nodes_[i].backward(*this, nodes_[i].grad);
        }
    }

  private:
    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Primitives. Forward values come from the plain *_value routines in
// tensor.hpp; each op records its adjoint rule on the tape.
// ---------------------------------------------------------------------------

// C = A * B.  dA = dC * B^T, dB = A^T * dC.
inline Var matmul(Tape& t, Var a, Var b) {
    Var out = t.push(matmul_value(t.value(a), t.value(b)), "matmul");
    t.set_backward(out, [a, b](Tape& tp, const Tensor& dc) {
        tp.add_grad(a, matmul_nt_value(dc, tp.value(b)));
        tp.add_grad(b, matmul_tn_value(tp.value(a), dc));
    });
    return out;
}

// C = A * B^T  (A: [m,k], B: [n,k]).  dA = dC * B, dB = dC^T * A.
inline Var matmul_nt(Tape& t, Var a, Var b) {
    Var out = t.push(matmul_nt_value(t.value(a), t.value(b)), "matmul_nt");
    t.set_backward(out, [a, b](Tape& tp, const Tensor& dc) {
        tp.add_grad(a, matmul_value(dc, tp.value(b)));
        tp.add_grad(b, matmul_tn_value(dc, tp.value(a)));
    });
    return out;
}

inline Var add(Tape& t, Var a, Var b) {
    Var out = t.push(add_value(t.value(a), t.value(b)), "add");
    t.set_backward(out, [a, b](Tape& tp, const Tensor& dc) {
        tp.add_grad(a, dc);
        tp.add_grad(b, dc);
    });
    return out;
}

// X: [m,n] plus bias b: [n] broadcast over rows.  db = column sums of dC.
inline Var add_bias_rows(Tape& t, Var x, Var b) {
    const Tensor& xv = t.value(x);
    const Tensor& bv = t.value(b);
    if (xv.rank() != 2 || bv.rank() != 1 || xv.shape[1] != bv.shape[0]) {
        throw ShapeError("add_bias_rows shape mismatch: " + xv.shape_str() + " + " +
                         bv.shape_str());
    }
    Tensor c = xv;
    const std::size_t m = xv.shape[0], n = xv.shape[1];
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) c.data[i * n + j] += bv.data[j];
    Var out = t.push(std::move(c), "add_bias_rows");
    t.set_backward(out, [x, b, m, n](Tape& tp, const Tensor& dc) {
        tp.add_grad(x, dc);
        Tensor db({n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) db.data[j] += dc.data[i * n + j];
        tp.add_grad(b, db);
    });
    return out;
}

inline Var scale(Tape& t, Var a, double s) {
    Var out = t.push(scale_value(t.value(a), s), "scale");
    t.set_backward(out, [a, s](Tape& tp, const Tensor& dc) {
        tp.add_grad(a, scale_value(dc, s));
    });
    return out;
}

// Tanh-approximation GELU with its exact derivative.
namespace detail {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace detail

inline Var gelu(Tape& t, Var a) {
    Tensor y = t.value(a);
    for (double& v : y.data) {
        const double u = detail::kGeluC * (v + detail::kGeluA * v * v * v);
        v = 0.5 * v * (1.0 + std::tanh(u));
    }
    Var out = t.push(std::move(y), "gelu");
    t.set_backward(out, [a](Tape& tp, const Tensor& dc) {
        const Tensor& x = tp.value(a);
        Tensor dx(x.shape);
        for (std::size_t i = 0; i < x.data.size(); ++i) {
            const double v = x.data[i];
            const double u = detail::kGeluC * (v + detail::kGeluA * v * v * v);
            const double th = std::tanh(u);
            const double du = detail::kGeluC * (1.0 + 3.0 * detail::kGeluA * v * v);
            dx.data[i] = dc.data[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
        }
        tp.add_grad(a, dx);
    });
    return out;
}

// Row-wise softmax with per-row max subtraction. Rows sum to 1 within 1e-12.
inline Tensor softmax_rows_value(const Tensor& m) {
    if (m.rank() != 2) throw ShapeError("softmax_rows expects rank-2, got " + m.shape_str());
    Tensor y = m;
    const std::size_t r = m.shape[0], c = m.shape[1];
    for (std::size_t i = 0; i < r; ++i) {
        double* row = &y.data[i * c];
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            row[j] = std::exp(row[j] - mx);
            z += row[j];
        }
        for (std::size_t j = 0; j < c; ++j) row[j] /= z;
    }
    return y;
}

// dX_row = Y_row ∘ (dY_row − (dY_row · Y_row))
inline Var softmax_rows(Tape& t, Var a) {
    Var out = t.push(softmax_rows_value(t.value(a)), "softmax_rows");
    t.set_backward(out, [a, out](Tape& tp, const Tensor& dc) {
        const Tensor& y = tp.value(out);
        const std::size_t r = y.shape[0], c = y.shape[1];
        Tensor dx(y.shape);
        for (std::size_t i = 0; i < r; ++i) {
            const double* yr = &y.data[i * c];
            const double* dr = &dc.data[i * c];
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += dr[j] * yr[j];
            for (std::size_t j = 0; j < c; ++j) dx.data[i * c + j] = yr[j] * (dr[j] - dot);
        }
        tp.add_grad(a, dx);
    });
    return out;
}

// Softmax over the causal prefix: row i is normalized over columns 0..i,
// columns > i are exactly zero. Keeps -inf out of the tape entirely.
inline Var causal_softmax_rows(Tape& t, Var a) {
    const Tensor& m = t.value(a);
    if (m.rank() != 2 || m.shape[0] != m.shape[1]) {
        throw ShapeError("causal_softmax_rows expects square rank-2, got " + m.shape_str());
    }
    const std::size_t n = m.shape[0];
    Tensor y(m.shape);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = &m.data[i * n];
        double mx = row[0];
        for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            y.data[i * n + j] = std::exp(row[j] - mx);
            z += y.data[i * n + j];
        }
        for (std::size_t j = 0; j <= i; ++j) y.data[i * n + j] /= z;
    }
    Var out = t.push(std::move(y), "causal_softmax_rows");
    t.set_backward(out, [a, out, n](Tape& tp, const Tensor& dc) {
        const Tensor& y2 = tp.value(out);
        Tensor dx({n, n});
        for (std::size_t i = 0; i < n; ++i) {
            const double* yr = &y2.data[i * n];
            const double* dr = &dc.data[i * n];
            double dot = 0.0;
            for (std::size_t j = 0; j <= i; ++j) dot += dr[j] * yr[j];
            for (std::size_t j = 0; j <= i; ++j) dx.data[i * n + j] = yr[j] * (dr[j] - dot);
        }
        tp.add_grad(a, dx);
    });
    return out;
}

// y_i = gain_i * x_i / sqrt(mean(x^2) + eps), rows independently.
// Accepts rank-1 (single row) or rank-2 input.
inline Var rms_norm_rows(Tape& t, Var x, Var gain, double eps) {
    if (eps <= 0.0) throw ContractError("rms_norm eps must be > 0");
    const Tensor& xv = t.value(x);
    const Tensor& gv = t.value(gain);
    const std::size_t n = xv.rank() == 1 ? xv.shape[0] : xv.shape[1];
    const std::size_t rws = xv.rank() == 1 ? 1 : xv.shape[0];
    if (xv.rank() > 2 || gv.rank() != 1 || gv.shape[0] != n) {
        throw ShapeError("rms_norm shape mismatch: " + xv.shape_str() + " with gain " +
                         gv.shape_str());
    }
    Tensor y = xv;
    for (std::size_t i = 0; i < rws; ++i) {
        double* row = &y.data[i * n];
        double ms = 0.0;
        for (std::size_t j = 0; j < n; ++j) ms += row[j] * row[j];
        const double r = std::sqrt(ms / static_cast<double>(n) + eps);
        for (std::size_t j = 0; j < n; ++j) row[j] = gv.data[j] * row[j] / r;
    }
    Var out = t.push(std::move(y), "rms_norm");
    t.set_backward(out, [x, gain, eps, n, rws](Tape& tp, const Tensor& dc) {
        const Tensor& xv2 = tp.value(x);
        const Tensor& gv2 = tp.value(gain);
        Tensor dx(xv2.shape);
        Tensor dg(gv2.shape);
        const double dn = static_cast<double>(n);
        for (std::size_t i = 0; i < rws; ++i) {
            const double* row = &xv2.data[i * n];
            const double* dr = &dc.data[i * n];
            double ms = 0.0;
            for (std::size_t j = 0; j < n; ++j) ms += row[j] * row[j];
            const double r = std::sqrt(ms / dn + eps);
            double s = 0.0;  // sum_j dy_j * g_j * x_j
            for (std::size_t j = 0; j < n; ++j) s += dr[j] * gv2.data[j] * row[j];
            const double r3 = r * r * r;
            for (std::size_t j = 0; j < n; ++j) {
                dx.data[i * n + j] = dr[j] * gv2.data[j] / r - row[j] * s / (dn * r3);
                dg.data[j] += dr[j] * row[j] / r;
            }
        }
        tp.add_grad(x, dx);
        tp.add_grad(gain, dg);
    });
    return out;
}

inline Var rms_norm(Tape& t, Var x, Var gain, double eps) { return rms_norm_rows(t, x, gain, eps); }

// Gather rows of the embedding table E: [V,d] by token id. dE accumulates by scatter-add.
inline Var embed_rows(Tape& t, Var table, const std::vector<int>& ids) {
    const Tensor& e = t.value(table);
    if (e.rank() != 2) throw ShapeError("embed_rows expects rank-2 table, got " + e.shape_str());
    const std::size_t v = e.shape[0], d = e.shape[1];
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= v) {
            throw IndexError("token id " + std::to_string(id) + " out of range [0," +
                             std::to_string(v) + ")");
        }
    }
    Tensor y({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(&e.data[static_cast<std::size_t>(ids[i]) * d], d, &y.data[i * d]);
    Var out = t.push(std::move(y), "embed_rows");
    t.set_backward(out, [table, ids, d](Tape& tp, const Tensor& dc) {
        Tensor de(tp.value(table).shape);
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t j = 0; j < d; ++j)
                de.data[static_cast<std::size_t>(ids[i]) * d + j] += dc.data[i * d + j];
        tp.add_grad(table, de);
    });
    return out;
}

// Select rows of X by index (duplicates allowed). dX scatter-adds.
inline Var gather_rows(Tape& t, Var x, const std::vector<std::size_t>& idx) {
    const Tensor& xv = t.value(x);
    if (xv.rank() != 2) throw ShapeError("gather_rows expects rank-2, got " + xv.shape_str());
    const std::size_t d = xv.shape[1];
    for (std::size_t i : idx) {
        if (i >= xv.shape[0]) throw IndexError("gather_rows index " + std::to_string(i) +
                                               " out of range for " + xv.shape_str());
    }
    Tensor y({idx.size(), d});
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(&xv.data[idx[i] * d], d, &y.data[i * d]);
    Var out = t.push(std::move(y), "gather_rows");
    t.set_backward(out, [x, idx, d](Tape& tp, const Tensor& dc) {
        Tensor dx(tp.value(x).shape);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) dx.data[idx[i] * d + j] += dc.data[i * d + j];
        tp.add_grad(x, dx);
    });
    return out;
}

// out = X with rows R added at the given (unique) row indices; all other rows
// of X pass through bitwise untouched. The P-LoRA residual injection.
inline Var add_rows_at(Tape& t, Var x, Var r, const std::vector<std::size_t>& idx) {
    const Tensor& xv = t.value(x);
    const Tensor& rv = t.value(r);
    if (xv.rank() != 2 || rv.rank() != 2 || rv.shape[0] != idx.size() ||
        rv.shape[1] != xv.shape[1]) {
        throw ShapeError("add_rows_at shape mismatch: " + xv.shape_str() + " += " +
                         rv.shape_str() + " at " + std::to_string(idx.size()) + " rows");
    }
    const std::size_t d = xv.shape[1];
    Tensor y = xv;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= xv.shape[0]) throw IndexError("add_rows_at index out of range");
        for (std::size_t j = 0; j < d; ++j) y.data[idx[i] * d + j] += rv.data[i * d + j];
    }
    Var out = t.push(std::move(y), "add_rows_at");
    t.set_backward(out, [x, r, idx, d](Tape& tp, const Tensor& dc) {
        tp.add_grad(x, dc);
        Tensor dr(tp.value(r).shape);
        for (std::size_t i = 0; i < idx.size(); ++i)
            std::copy_n(&dc.data[idx[i] * d], d, &dr.data[i * d]);
        tp.add_grad(r, dr);
    });
    return out;
}

// Columns [c0, c0+w) of X.
inline Var slice_cols(Tape& t, Var x, std::size_t c0, std::size_t w) {
    const Tensor& xv = t.value(x);
    if (xv.rank() != 2 || c0 + w > xv.shape[1]) {
        throw ShapeError("slice_cols [" + std::to_string(c0) + "," + std::to_string(c0 + w) +
                         ") out of range for " + xv.shape_str());
    }
    const std::size_t m = xv.shape[0], n = xv.shape[1];
    Tensor y({m, w});
    for (std::size_t i = 0; i < m; ++i)
        std::copy_n(&xv.data[i * n + c0], w, &y.data[i * w]);
    Var out = t.push(std::move(y), "slice_cols");
    t.set_backward(out, [x, c0, w, m, n](Tape& tp, const Tensor& dc) {
        Tensor dx({m, n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) dx.data[i * n + c0 + j] = dc.data[i * w + j];
        tp.add_grad(x, dx);
    });
    return out;
}

// Horizontal concatenation of equal-height blocks.
inline Var concat_cols(Tape& t, const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat_cols needs at least one part");
    const std::size_t m = t.value(parts[0]).shape[0];
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    for (Var p : parts) {
        const Tensor& pv = t.value(p);
        if (pv.rank() != 2 || pv.shape[0] != m) {
            throw ShapeError("concat_cols row mismatch at part with shape " + pv.shape_str());
        }
        widths.push_back(pv.shape[1]);
        total += pv.shape[1];
    }
    Tensor y({m, total});
    std::size_t off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const Tensor& pv = t.value(parts[p]);
        for (std::size_t i = 0; i < m; ++i)
            std::copy_n(&pv.data[i * widths[p]], widths[p], &y.data[i * total + off]);
        off += widths[p];
    }
    Var out = t.push(std::move(y), "concat_cols");
    t.set_backward(out, [parts, widths, m, total](Tape& tp, const Tensor& dc) {
        std::size_t off2 = 0;
        for (std::size_t p = 0; p < parts.size(); ++p) {
            Tensor dp({m, widths[p]});
            for (std::size_t i = 0; i < m; ++i)
                std::copy_n(&dc.data[i * total + off2], widths[p], &dp.data[i * widths[p]]);
            tp.add_grad(parts[p], dp);
            off2 += widths[p];
        }
    });
    return out;
}

// Mean of scalar nodes; the batch-loss reducer.
inline Var mean_scalars(Tape& t, const std::vector<Var>& xs) {
    if (xs.empty()) throw ContractError("mean_scalars needs at least one input");
    double s = 0.0;
    for (Var x : xs) {
        if (t.value(x).numel() != 1) throw ShapeError("mean_scalars input must be scalar");
        s += t.value(x).data[0];
    }
    const double inv = 1.0 / static_cast<double>(xs.size());
    Var out = t.push(Tensor::scalar(s * inv), "mean_scalars");
    t.set_backward(out, [xs, inv](Tape& tp, const Tensor& dc) {
        for (Var x : xs) tp.add_grad(x, Tensor::scalar(dc.data[0] * inv));
    });
    return out;
}

// Scalar projection sum(x ∘ w) against a fixed weight tensor.
inline Var weighted_sum(Tape& t, Var x, const Tensor& w) {
    const Tensor& xv = t.value(x);
    if (!xv.same_shape(w)) {
        throw ShapeError("weighted_sum shape mismatch: " + xv.shape_str() + " vs " +
                         w.shape_str());
    }
    double s = 0.0;
    for (std::size_t i = 0; i < xv.data.size(); ++i) s += xv.data[i] * w.data[i];
    Var out = t.push(Tensor::scalar(s), "weighted_sum");
    t.set_backward(out, [x, w](Tape& tp, const Tensor& dc) {
        Tensor dx = w;
        for (double& v : dx.data) v *= dc.data[0];
        tp.add_grad(x, dx);
    });
    return out;
}

// Masked mean next-token loss. Loss mask entries are 0/1; targets are checked
// only where the mask is set. Empty mask: loss is 0 and *empty_mask is set.
inline Var cross_entropy(Tape& t, Var logits, const std::vector<int>& targets,
                         const std::vector<std::uint8_t>& loss_mask, bool* empty_mask = nullptr) {
    const Tensor& lv = t.value(logits);
    if (lv.rank() != 2) throw ShapeError("cross_entropy expects rank-2 logits");
    const std::size_t T = lv.shape[0], V = lv.shape[1];
    if (targets.size() != T || loss_mask.size() != T) {
        throw ContractError("cross_entropy: targets/loss_mask length must equal rows (" +
                            std::to_string(T) + ")");
    }
    std::size_t m = 0;
    double total = 0.0;
    for (std::size_t i = 0; i < T; ++i) {
        if (!loss_mask[i]) continue;
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= V) {
            throw IndexError("cross_entropy target " + std::to_string(targets[i]) +
                             " out of range [0," + std::to_string(V) + ")");
        }
        const double* row = &lv.data[i * V];
        double mx = row[0];
        for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < V; ++j) z += std::exp(row[j] - mx);
        total += mx + std::log(z) - row[static_cast<std::size_t>(targets[i])];
        ++m;
    }
    if (empty_mask) *empty_mask = (m == 0);
    const double inv = m ? 1.0 / static_cast<double>(m) : 0.0;
    Var out = t.push(Tensor::scalar(total * inv), "cross_entropy");
    t.set_backward(out, [logits, targets, loss_mask, inv, T, V](Tape& tp, const Tensor& dc) {
        if (inv == 0.0) return;
        const Tensor& lv2 = tp.value(logits);
        Tensor dl({T, V});
        const double g = dc.data[0] * inv;
        for (std::size_t i = 0; i < T; ++i) {
            if (!loss_mask[i]) continue;
            const double* row = &lv2.data[i * V];
            double mx = row[0];
            for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
            double z = 0.0;
            for (std::size_t j = 0; j < V; ++j) z += std::exp(row[j] - mx);
            for (std::size_t j = 0; j < V; ++j)
                dl.data[i * V + j] = g * (std::exp(row[j] - mx) / z);
            dl.data[i * V + static_cast<std::size_t>(targets[i])] -= g;
        }
        tp.add_grad(logits, dl);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Finite-difference oracle. Central differences, O(h^2). Independent of the
// tape: it only re-evaluates f.
// ---------------------------------------------------------------------------

inline std::vector<double> finite_diff_grad(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> theta, double h = 1e-5) {
    if (h <= 0.0) throw ContractError("finite_diff_grad: h must be > 0");
    std::vector<double> g(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double orig = theta[i];
        theta[i] = orig + h;
        const double fp = f(theta);
        theta[i] = orig - h;
        const double fm = f(theta);
        theta[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("finite_diff_grad: non-finite f evaluation at coordinate " +
                               std::to_string(i));
        }
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

// |a-b| / max(1, |a|, |b|): relative for large values, absolute below 1.
inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

}  // namespace plora
