#include "saessv/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

#include "saessv/error.hpp"

namespace saessv::nd {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

MapC as_mat(const Tensor& t) { return MapC(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())); }
Map as_mat(Tensor& t) { return Map(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())); }

Graph& graph_of(Var a) {
    if (!a.graph) throw GraphError("unbound variable");
    return *a.graph;
}

Graph& graph_of(Var a, Var b) {
    if (a.graph != b.graph) throw GraphError("operands live on different graphs");
    return graph_of(a);
}

enum class Broadcast { same, row };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
    if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::same;
    if (b.rows() == 1 && b.cols() == a.cols() && b.rank() <= 2) return Broadcast::row;
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

// Reduce a gradient shaped like `a` onto a broadcast row operand.
Tensor reduce_rows(const Tensor& g, const Shape& row_shape) {
    Tensor out(row_shape, 0.0);
    const auto cols = g.cols();
    for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t c = 0; c < cols; ++c) out[c] += g[r * cols + c];
    }
    return out;
}

template <typename F, typename D>
Var unary(Var a, F forward, D derivative) {
    auto& g = graph_of(a);
    const Tensor& x = a.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = forward(x[i]);
    return g.record(std::move(out), {a}, [a, derivative](Graph& gr, const Tensor& go) {
        const Tensor& xv = gr.value(a);
        Tensor ga(xv.shape());
        for (std::size_t i = 0; i < xv.numel(); ++i) ga[i] = go[i] * derivative(xv[i]);
        gr.accumulate(a, ga);
    });
}

}  // namespace

namespace kernel {

void matmul(const Tensor& a, const Tensor& b, Tensor& out) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    if (out.rows() != a.rows() || out.cols() != b.cols() || out.rank() != 2) out = Tensor(Shape{a.rows(), b.cols()});
    as_mat(out).noalias() = as_mat(a) * as_mat(b);
}

void matmul_at_b(const Tensor& a, const Tensor& b, Tensor& out) {
    if (a.rows() != b.rows()) throw ShapeError("matmul_at_b: row counts differ");
    if (out.rows() != a.cols() || out.cols() != b.cols() || out.rank() != 2) out = Tensor(Shape{a.cols(), b.cols()});
    as_mat(out).noalias() = as_mat(a).transpose() * as_mat(b);
}

void matmul_a_bt(const Tensor& a, const Tensor& b, Tensor& out) {
    if (a.cols() != b.cols()) throw ShapeError("matmul_a_bt: column counts differ");
    if (out.rows() != a.rows() || out.cols() != b.rows() || out.rank() != 2) out = Tensor(Shape{a.rows(), b.rows()});
    as_mat(out).noalias() = as_mat(a) * as_mat(b).transpose();
}

void softmax_inplace(std::span<double> row) {
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (auto& v : row) {
        v = std::exp(v - mx);
        total += v;
    }
    for (auto& v : row) v /= total;
}

}  // namespace kernel

Var matmul(Var a, Var b) {
    auto& g = graph_of(a, b);
    Tensor out;
    kernel::matmul(a.value(), b.value(), out);
    return g.record(std::move(out), {a, b}, [a, b](Graph& gr, const Tensor& go) {
        if (gr.requires_grad(a)) {
            Tensor ga;
            kernel::matmul_a_bt(go, gr.value(b), ga);
            gr.accumulate(a, ga);
        }
        if (gr.requires_grad(b)) {
            Tensor gb;
            kernel::matmul_at_b(gr.value(a), go, gb);
            gr.accumulate(b, gb);
        }
    });
}

Var transpose(Var a) {
    auto& g = graph_of(a);
    const Tensor& x = a.value();
    Tensor out(Shape{x.cols(), x.rows()});
    as_mat(out) = as_mat(x).transpose();
    return g.record(std::move(out), {a}, [a](Graph& gr, const Tensor& go) {
        Tensor ga(gr.value(a).shape());
        as_mat(ga) = as_mat(go).transpose();
        gr.accumulate(a, ga);
    });
}

Var add(Var a, Var b) {
    auto& g = graph_of(a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    const auto kind = broadcast_kind(x, y, "add");
    Tensor out = x;
    const auto cols = x.cols();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += kind == Broadcast::same ? y[i] : y[i % cols];
    return g.record(std::move(out), {a, b}, [a, b, kind](Graph& gr, const Tensor& go) {
        gr.accumulate(a, go);
        if (gr.requires_grad(b)) gr.accumulate(b, kind == Broadcast::same ? go : reduce_rows(go, gr.value(b).shape()));
    });
}

Var sub(Var a, Var b) {
    auto& g = graph_of(a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    const auto kind = broadcast_kind(x, y, "sub");
    Tensor out = x;
    const auto cols = x.cols();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= kind == Broadcast::same ? y[i] : y[i % cols];
    return g.record(std::move(out), {a, b}, [a, b, kind](Graph& gr, const Tensor& go) {
        gr.accumulate(a, go);
        if (gr.requires_grad(b)) {
            Tensor gb = kind == Broadcast::same ? go : reduce_rows(go, gr.value(b).shape());
            for (auto& v : gb.data()) v = -v;
            gr.accumulate(b, gb);
        }
    });
}

Var mul(Var a, Var b) {
    auto& g = graph_of(a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    const auto kind = broadcast_kind(x, y, "mul");
    const auto cols = x.cols();
    Tensor out = x;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= kind == Broadcast::same ? y[i] : y[i % cols];
    return g.record(std::move(out), {a, b}, [a, b, kind](Graph& gr, const Tensor& go) {
        const Tensor& xv = gr.value(a);
        const Tensor& yv = gr.value(b);
        const auto c = xv.cols();
        if (gr.requires_grad(a)) {
            Tensor ga = go;
            for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= kind == Broadcast::same ? yv[i] : yv[i % c];
            gr.accumulate(a, ga);
        }
        if (gr.requires_grad(b)) {
            Tensor prod = go;
            for (std::size_t i = 0; i < prod.numel(); ++i) prod[i] *= xv[i];
            gr.accumulate(b, kind == Broadcast::same ? prod : reduce_rows(prod, yv.shape()));
        }
    });
}

Var scale(Var a, double factor) {
    return unary(
        a, [factor](double x) { return factor * x; }, [factor](double) { return factor; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var relu(Var a) {
    return unary(
        a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var exp(Var a) {
    return unary(
        a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var log(Var a) {
    for (double x : a.value().data()) {
        if (!(x > 0.0)) throw DomainError("log of non-positive value");
    }
    return unary(
        a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var square(Var a) {
    return unary(
        a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var abs(Var a) {
    return unary(
        a, [](double x) { return std::fabs(x); }, [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

namespace {

// Softmax whose row r only sees columns [0, r + offset].
Var masked_softmax(Var a, bool causal) {
    auto& g = graph_of(a);
    const Tensor& x = a.value();
    const auto rows = x.rows();
    const auto cols = x.cols();
    if (causal && cols < rows) throw ShapeError("causal softmax needs at least as many columns as rows");
    const std::size_t offset = causal ? cols - rows : 0;
    Tensor out(x.shape(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t visible = causal ? r + offset + 1 : cols;
        std::span<double> dst(out.data().data() + r * cols, visible);
        std::copy_n(x.data().data() + r * cols, visible, dst.begin());
        kernel::softmax_inplace(dst);
    }
    return g.record(std::move(out), {a}, [a, out_id = g.size()](Graph& gr, const Tensor& go) {
        const Tensor& y = gr.value(Var{&gr, out_id});
        const auto c = y.cols();
        Tensor ga(y.shape(), 0.0);
        for (std::size_t r = 0; r < y.rows(); ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += y[r * c + j] * go[r * c + j];
            for (std::size_t j = 0; j < c; ++j) ga[r * c + j] = y[r * c + j] * (go[r * c + j] - dot);
        }
        gr.accumulate(a, ga);
    });
}

}  // namespace

Var softmax_rows(Var a) { return masked_softmax(a, false); }
Var causal_softmax_rows(Var scores) { return masked_softmax(scores, true); }

Var sum(Var a) {
    auto& g = graph_of(a);
    double total = 0.0;
    for (double x : a.value().data()) total += x;
    return g.record(Tensor::scalar(total), {a}, [a](Graph& gr, const Tensor& go) {
        gr.accumulate(a, Tensor(gr.value(a).shape(), go.item()));
    });
}

Var mean(Var a) {
    const double n = static_cast<double>(a.value().numel());
    return scale(sum(a), 1.0 / n);
}

Var mean_rows(Var a) {
    auto& g = graph_of(a);
    const Tensor& x = a.value();
    const auto rows = x.rows();
    Tensor out = reduce_rows(x, Shape{1, x.cols()});
    for (auto& v : out.data()) v /= static_cast<double>(rows);
    return g.record(std::move(out), {a}, [a](Graph& gr, const Tensor& go) {
        const Tensor& xv = gr.value(a);
        const auto r = xv.rows();
        const auto c = xv.cols();
        Tensor ga(xv.shape());
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] = go[j] / static_cast<double>(r);
        }
        gr.accumulate(a, ga);
    });
}

Var gather_rows(Var table, std::span<const std::size_t> ids) {
    auto& g = graph_of(table);
    const Tensor& t = table.value();
    const auto cols = t.cols();
    if (ids.empty()) throw ShapeError("gather_rows: empty index list");
    Tensor out(Shape{ids.size(), cols});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= t.rows()) throw ShapeError("gather_rows: index out of range");
        std::copy_n(t.data().data() + ids[i] * cols, cols, out.data().data() + i * cols);
    }
    std::vector<std::size_t> idx(ids.begin(), ids.end());
    return g.record(std::move(out), {table}, [table, idx = std::move(idx)](Graph& gr, const Tensor& go) {
        if (!gr.requires_grad(table)) return;
        Tensor& gt = gr.grad_buffer(table);
        const auto c = gt.cols();
        for (std::size_t i = 0; i < idx.size(); ++i) {
            for (std::size_t j = 0; j < c; ++j) gt[idx[i] * c + j] += go[i * c + j];
        }
    });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
    auto& g = graph_of(a);
    const Tensor& x = a.value();
    if (count == 0 || begin + count > x.cols()) throw ShapeError("slice_cols: range out of bounds");
    const auto rows = x.rows();
    const auto cols = x.cols();
    Tensor out(Shape{rows, count});
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(x.data().data() + r * cols + begin, count, out.data().data() + r * count);
    }
    return g.record(std::move(out), {a}, [a, begin, count](Graph& gr, const Tensor& go) {
        if (!gr.requires_grad(a)) return;
        Tensor& ga = gr.grad_buffer(a);
        const auto c = ga.cols();
        for (std::size_t r = 0; r < ga.rows(); ++r) {
            for (std::size_t j = 0; j < count; ++j) ga[r * c + begin + j] += go[r * count + j];
        }
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no operands");
    auto& g = graph_of(parts.front());
    const auto rows = parts.front().value().rows();
    std::size_t total = 0;
    for (auto p : parts) {
        if (p.graph != &g) throw GraphError("operands live on different graphs");
        if (p.value().rows() != rows) throw ShapeError("concat_cols: row counts differ");
        total += p.value().cols();
    }
    Tensor out(Shape{rows, total});
    std::size_t offset = 0;
    for (auto p : parts) {
        const Tensor& x = p.value();
        const auto c = x.cols();
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(x.data().data() + r * c, c, out.data().data() + r * total + offset);
        }
        offset += c;
    }
    return g.record(std::move(out), parts, [parts](Graph& gr, const Tensor& go) {
        const auto width = go.cols();
        std::size_t off = 0;
        for (auto p : parts) {
            const auto c = gr.value(p).cols();
            if (gr.requires_grad(p)) {
                Tensor& gp = gr.grad_buffer(p);
                for (std::size_t r = 0; r < gp.rows(); ++r) {
                    for (std::size_t j = 0; j < c; ++j) gp[r * c + j] += go[r * width + off + j];
                }
            }
            off += c;
        }
    });
}

Var scatter(Var values, std::span<const std::size_t> indices, std::size_t size) {
    auto& g = graph_of(values);
    const Tensor& v = values.value();
    if (v.numel() != indices.size()) throw ShapeError("scatter: values and indices differ in length");
    Tensor out(Shape{1, size}, 0.0);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= size) throw ShapeError("scatter: index out of range");
        out[indices[i]] += v[i];
    }
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    return g.record(std::move(out), {values}, [values, idx = std::move(idx)](Graph& gr, const Tensor& go) {
        Tensor gv(gr.value(values).shape());
        for (std::size_t i = 0; i < idx.size(); ++i) gv[i] = go[idx[i]];
        gr.accumulate(values, gv);
    });
}

Var layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
    auto& g = graph_of(x, gamma);
    if (beta.graph != &g) throw GraphError("operands live on different graphs");
    const Tensor& xv = x.value();
    const auto rows = xv.rows();
    const auto cols = xv.cols();
    if (gamma.value().numel() != cols || beta.value().numel() != cols) throw ShapeError("layer_norm_rows: gain/bias width");
    Tensor xhat(xv.shape());
    std::vector<double> inv_std(rows);
    Tensor out(xv.shape());
    const auto& gm = gamma.value();
    const auto& bt = beta.value();
    for (std::size_t r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += xv[r * cols + c];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double d = xv[r * cols + c] - mu;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < cols; ++c) {
            const double h = (xv[r * cols + c] - mu) * inv_std[r];
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gm[c] + bt[c];
        }
    }
    return g.record(std::move(out), {x, gamma, beta},
                    [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& gr, const Tensor& go) {
                        const auto r_n = xhat.rows();
                        const auto c_n = xhat.cols();
                        const auto& gm_v = gr.value(gamma);
                        if (gr.requires_grad(gamma) || gr.requires_grad(beta)) {
                            Tensor gg(gr.value(gamma).shape(), 0.0);
                            Tensor gb(gr.value(beta).shape(), 0.0);
                            for (std::size_t r = 0; r < r_n; ++r) {
                                for (std::size_t c = 0; c < c_n; ++c) {
                                    gg[c] += go[r * c_n + c] * xhat[r * c_n + c];
                                    gb[c] += go[r * c_n + c];
                                }
                            }
                            gr.accumulate(gamma, gg);
                            gr.accumulate(beta, gb);
                        }
                        if (gr.requires_grad(x)) {
                            Tensor gx(xhat.shape());
                            const double n = static_cast<double>(c_n);
                            for (std::size_t r = 0; r < r_n; ++r) {
                                double m1 = 0.0;
                                double m2 = 0.0;
                                for (std::size_t c = 0; c < c_n; ++c) {
                                    const double dh = go[r * c_n + c] * gm_v[c];
                                    m1 += dh;
                                    m2 += dh * xhat[r * c_n + c];
                                }
                                m1 /= n;
                                m2 /= n;
                                for (std::size_t c = 0; c < c_n; ++c) {
                                    const double dh = go[r * c_n + c] * gm_v[c];
                                    gx[r * c_n + c] = inv_std[r] * (dh - m1 - xhat[r * c_n + c] * m2);
                                }
                            }
                            gr.accumulate(x, gx);
                        }
                    });
}

Var cross_entropy(Var logits, std::span<const std::size_t> targets) {
    auto& g = graph_of(logits);
    const Tensor& x = logits.value();
    const auto rows = x.rows();
    const auto cols = x.cols();
    if (targets.size() != rows) throw ShapeError("cross_entropy: one target per logits row required");
    Tensor probs(Shape{rows, cols});
    double loss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] >= cols) throw ShapeError("cross_entropy: target out of range");
        auto row = probs.row(r);
        std::copy_n(x.data().data() + r * cols, cols, row.begin());
        const double mx = *std::max_element(row.begin(), row.end());
        double total = 0.0;
        for (double v : row) total += std::exp(v - mx);
        loss += std::log(total) + mx - row[targets[r]];
        kernel::softmax_inplace(row);
    }
    loss /= static_cast<double>(rows);
    std::vector<std::size_t> tg(targets.begin(), targets.end());
    return g.record(Tensor::scalar(loss), {logits},
                    [logits, probs = std::move(probs), tg = std::move(tg)](Graph& gr, const Tensor& go) {
                        Tensor ga = probs;
                        const auto c = ga.cols();
                        const double s = go.item() / static_cast<double>(ga.rows());
                        for (std::size_t r = 0; r < ga.rows(); ++r) ga[r * c + tg[r]] -= 1.0;
                        for (auto& v : ga.data()) v *= s;
                        gr.accumulate(logits, ga);
                    });
}

}  // namespace saessv::nd
