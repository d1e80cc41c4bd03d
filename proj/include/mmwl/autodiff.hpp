#pragma once

// Minimal dense tensor engine with reverse-mode differentiation. A Graph is a
// Wengert list: nodes are created in topological order with eagerly computed
// values, and backward() walks the list in reverse. One graph instance is
// single-threaded; distinct graphs may run on distinct threads.

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mmwl::ad {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d < 0) throw std::invalid_argument("negative dimension in shape");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + ")";
}

struct Node {
    Shape shape;
    std::vector<double> val;
    std::vector<double> grad;  // allocated lazily, same numel as val
    std::vector<double> aux;   // op-specific stash for backward
    std::vector<Node*> parents;
    std::function<void(Node&)> backward;
    bool needs_grad = false;
    int param_id = -1;  // >= 0 for trainable leaves

    int rows() const { return shape.size() >= 1 ? shape[0] : 1; }
    int cols() const { return shape.size() >= 2 ? shape[1] : 1; }
    void ensure_grad() {
        if (grad.empty()) grad.assign(val.size(), 0.0);
    }
};

namespace detail {
inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}
inline void require_2d(const Node* n, const char* op) {
    require(n->shape.size() == 2, std::string(op) + ": expected a 2-d tensor, got " + shape_str(n->shape));
}
}  // namespace detail

class Graph {
public:
    // ---- leaves ----------------------------------------------------------

    Node* value(Shape shape, std::vector<double> data) {
        detail::require(numel(shape) == data.size(), "value: data size does not match shape");
        Node* n = alloc(std::move(shape), {});
        n->val = std::move(data);
        n->needs_grad = false;
        return n;
    }

    Node* constant(Shape shape, double fill) {
        Node* n = alloc(std::move(shape), {});
        n->val.assign(numel(n->shape), fill);
        n->needs_grad = false;
        return n;
    }

    // leaf bound to external storage (copied); trainable leaves get a param id
    Node* leaf(Shape shape, const double* data, bool trainable, int param_id = -1) {
        detail::require(data != nullptr, "leaf: null data");
        Node* n = alloc(std::move(shape), {});
        n->val.assign(data, data + numel(n->shape));
        n->needs_grad = trainable && grad_enabled_;
        n->param_id = n->needs_grad ? param_id : -1;
        return n;
    }

    // Disables gradient tracking for every node created afterwards
    // (inference mode).
    void set_grad_enabled(bool on) { grad_enabled_ = on; }

    // ---- elementwise -----------------------------------------------------

    Node* add(Node* a, Node* b) { return binary(a, b, "add", BinKind::Add); }
    Node* mul(Node* a, Node* b) { return binary(a, b, "mul", BinKind::Mul); }

    Node* sub(Node* a, Node* b) { return add(a, scale(b, -1.0)); }

    Node* scale(Node* a, double c) {
        Node* n = alloc(a->shape, {a});
        n->val.resize(a->val.size());
        for (std::size_t i = 0; i < a->val.size(); ++i) n->val[i] = a->val[i] * c;
        if (n->needs_grad)
            n->backward = [c](Node& self) {
                Node* p = self.parents[0];
                if (!p->needs_grad) return;
                p->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += c * self.grad[i];
            };
        return n;
    }

    Node* relu(Node* a) {
        Node* n = alloc(a->shape, {a});
        n->val.resize(a->val.size());
        for (std::size_t i = 0; i < a->val.size(); ++i) n->val[i] = a->val[i] > 0.0 ? a->val[i] : 0.0;
        if (n->needs_grad)
            n->backward = [](Node& self) {
                Node* p = self.parents[0];
                if (!p->needs_grad) return;
                p->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    if (p->val[i] > 0.0) p->grad[i] += self.grad[i];
            };
        return n;
    }

    Node* gelu(Node* a) {
        constexpr double inv_sqrt2 = 0.7071067811865475244;
        constexpr double inv_sqrt2pi = 0.3989422804014326779;
        Node* n = alloc(a->shape, {a});
        n->val.resize(a->val.size());
        for (std::size_t i = 0; i < a->val.size(); ++i) {
            const double x = a->val[i];
            n->val[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
        }
        if (n->needs_grad)
            n->backward = [=](Node& self) {
                Node* p = self.parents[0];
                if (!p->needs_grad) return;
                p->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    const double x = p->val[i];
                    const double d = 0.5 * (1.0 + std::erf(x * inv_sqrt2)) +
                                     x * inv_sqrt2pi * std::exp(-0.5 * x * x);
                    p->grad[i] += d * self.grad[i];
                }
            };
        return n;
    }

    // ---- linear algebra ---------------------------------------------------

    Node* matmul(Node* a, Node* b) {
        detail::require_2d(a, "matmul");
        detail::require_2d(b, "matmul");
        detail::require(a->shape[1] == b->shape[0],
                        "matmul: inner dimensions differ, " + shape_str(a->shape) + " x " + shape_str(b->shape));
        const int m = a->shape[0], k = a->shape[1], n2 = b->shape[1];
        Node* n = alloc({m, n2}, {a, b});
        n->val.assign(static_cast<std::size_t>(m) * n2, 0.0);
        matmul_acc(a->val.data(), b->val.data(), n->val.data(), m, k, n2, false, false);
        if (n->needs_grad)
            n->backward = [m, k, n2](Node& self) {
                Node* a2 = self.parents[0];
                Node* b2 = self.parents[1];
                if (a2->needs_grad) {
                    a2->ensure_grad();
                    // dA += G * B^T
                    matmul_acc(self.grad.data(), b2->val.data(), a2->grad.data(), m, n2, k, false, true);
                }
                if (b2->needs_grad) {
                    b2->ensure_grad();
                    // dB += A^T * G
                    matmul_acc(a2->val.data(), self.grad.data(), b2->grad.data(), k, m, n2, true, false);
                }
            };
        return n;
    }

    Node* transpose(Node* a) {
        detail::require_2d(a, "transpose");
        const int r = a->shape[0], c = a->shape[1];
        Node* n = alloc({c, r}, {a});
        n->val.resize(a->val.size());
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                n->val[static_cast<std::size_t>(j) * r + i] = a->val[static_cast<std::size_t>(i) * c + j];
        if (n->needs_grad)
            n->backward = [r, c](Node& self) {
                Node* p = self.parents[0];
                if (!p->needs_grad) return;
                p->ensure_grad();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j)
                        p->grad[static_cast<std::size_t>(i) * c + j] +=
                            self.grad[static_cast<std::size_t>(j) * r + i];
            };
        return n;
    }

    // ---- shape ops --------------------------------------------------------

    Node* reshape(Node* a, Shape shape) {
        detail::require(numel(shape) == a->val.size(),
                        "reshape: element count mismatch, " + shape_str(a->shape) + " -> " + shape_str(shape));
        Node* n = alloc(std::move(shape), {a});
        n->val = a->val;
        if (n->needs_grad)
            n->backward = [](Node& self) {
                Node* p = self.parents[0];
                if (!p->needs_grad) return;
                p->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
            };
        return n;
    }

    Node* slice_rows(Node* a, int r0, int r1) {
        detail::require_2d(a, "slice_rows");
        detail::require(0 <= r0 && r0 < r1 && r1 <= a->shape[0], "slice_rows: bad range");
        const int c = a->shape[1];
        Node* n = alloc({r1 - r0, c}, {a});
        n->val.assign(a->val.begin() + static_cast<std::ptrdiff_t>(r0) * c,
                      a->val.begin() + static_cast<std::ptrdiff_t>(r1) * c);
        if (n->needs_grad)
            n->backward = [r0, c](Node& self) {
                Node* p = self.parents[0];
                if (!p->needs_grad) return;
                p->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    p->grad[static_cast<std::size_t>(r0) * c + i] += self.grad[i];
            };
        return n;
    }

    Node* slice_cols(Node* a, int c0, int c1) {
        detail::require_2d(a, "slice_cols");
        detail::require(0 <= c0 && c0 < c1 && c1 <= a->shape[1], "slice_cols: bad range");
        const int r = a->shape[0], c = a->shape[1], w = c1 - c0;
        Node* n = alloc({r, w}, {a});
        n->val.resize(static_cast<std::size_t>(r) * w);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < w; ++j)
                n->val[static_cast<std::size_t>(i) * w + j] = a->val[static_cast<std::size_t>(i) * c + c0 + j];
        if (n->needs_grad)
            n->backward = [r, c, c0, w](Node& self) {
                Node* p = self.parents[0];
                if (!p->needs_grad) return;
                p->ensure_grad();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < w; ++j)
                        p->grad[static_cast<std::size_t>(i) * c + c0 + j] +=
                            self.grad[static_cast<std::size_t>(i) * w + j];
            };
        return n;
    }

    Node* concat_rows(const std::vector<Node*>& parts) {
        detail::require(!parts.empty(), "concat_rows: empty list");
        const int c = parts[0]->cols();
        int rows = 0;
        for (Node* p : parts) {
            detail::require_2d(p, "concat_rows");
            detail::require(p->shape[1] == c, "concat_rows: column mismatch");
            rows += p->shape[0];
        }
        Node* n = alloc({rows, c}, parts);
        n->val.reserve(static_cast<std::size_t>(rows) * c);
        for (Node* p : parts) n->val.insert(n->val.end(), p->val.begin(), p->val.end());
        if (n->needs_grad)
            n->backward = [](Node& self) {
                std::size_t off = 0;
                for (Node* p : self.parents) {
                    if (p->needs_grad) {
                        p->ensure_grad();
                        for (std::size_t i = 0; i < p->val.size(); ++i) p->grad[i] += self.grad[off + i];
                    }
                    off += p->val.size();
                }
            };
        return n;
    }

    Node* concat_cols(const std::vector<Node*>& parts) {
        detail::require(!parts.empty(), "concat_cols: empty list");
        const int r = parts[0]->rows();
        int cols = 0;
        for (Node* p : parts) {
            detail::require_2d(p, "concat_cols");
            detail::require(p->shape[0] == r, "concat_cols: row mismatch");
            cols += p->shape[1];
        }
        Node* n = alloc({r, cols}, parts);
        n->val.resize(static_cast<std::size_t>(r) * cols);
        int off = 0;
        for (Node* p : parts) {
            const int w = p->shape[1];
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < w; ++j)
                    n->val[static_cast<std::size_t>(i) * cols + off + j] =
                        p->val[static_cast<std::size_t>(i) * w + j];
            off += w;
        }
        if (n->needs_grad)
            n->backward = [r, cols](Node& self) {
                int off2 = 0;
                for (Node* p : self.parents) {
                    const int w = p->shape[1];
                    if (p->needs_grad) {
                        p->ensure_grad();
                        for (int i = 0; i < r; ++i)
                            for (int j = 0; j < w; ++j)
                                p->grad[static_cast<std::size_t>(i) * w + j] +=
                                    self.grad[static_cast<std::size_t>(i) * cols + off2 + j];
                    }
                    off2 += w;
                }
            };
        return n;
    }

    // each row of a replicated `times` consecutive times
    Node* repeat_rows(Node* a, int times) {
        detail::require_2d(a, "repeat_rows");
        detail::require(times >= 1, "repeat_rows: times must be >= 1");
        const int r = a->shape[0], c = a->shape[1];
        Node* n = alloc({r * times, c}, {a});
        n->val.resize(static_cast<std::size_t>(r) * times * c);
        for (int i = 0; i < r; ++i)
            for (int t = 0; t < times; ++t)
                std::copy(a->val.begin() + static_cast<std::ptrdiff_t>(i) * c,
                          a->val.begin() + static_cast<std::ptrdiff_t>(i + 1) * c,
                          n->val.begin() + (static_cast<std::ptrdiff_t>(i) * times + t) * c);
        if (n->needs_grad)
            n->backward = [r, c, times](Node& self) {
                Node* p = self.parents[0];
                if (!p->needs_grad) return;
                p->ensure_grad();
                for (int i = 0; i < r; ++i)
                    for (int t = 0; t < times; ++t)
                        for (int j = 0; j < c; ++j)
                            p->grad[static_cast<std::size_t>(i) * c + j] +=
                                self.grad[(static_cast<std::size_t>(i) * times + t) * c + j];
            };
        return n;
    }

    // ---- reductions / normalization ----------------------------------------

    Node* mean_all(Node* a) {
        Node* n = alloc({1}, {a});
        double s = 0.0;
        for (double v : a->val) s += v;
        const double inv = 1.0 / static_cast<double>(a->val.size());
        n->val = {s * inv};
        if (n->needs_grad)
            n->backward = [inv](Node& self) {
                Node* p = self.parents[0];
                if (!p->needs_grad) return;
                p->ensure_grad();
                const double g = self.grad[0] * inv;
                for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += g;
            };
        return n;
    }

    // softmax along the last axis, with max subtraction
    Node* softmax_rows(Node* a) {
        detail::require(!a->shape.empty(), "softmax_rows: scalar input");
        const int c = a->shape.back();
        const std::size_t rows = a->val.size() / static_cast<std::size_t>(c);
        Node* n = alloc(a->shape, {a});
        n->val.resize(a->val.size());
        for (std::size_t r = 0; r < rows; ++r) {
            const double* x = a->val.data() + r * c;
            double* y = n->val.data() + r * c;
            double mx = x[0];
            for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
            double s = 0.0;
            for (int j = 0; j < c; ++j) {
                y[j] = std::exp(x[j] - mx);
                s += y[j];
            }
            const double inv = 1.0 / s;
            for (int j = 0; j < c; ++j) y[j] *= inv;
        }
        if (n->needs_grad)
            n->backward = [c, rows](Node& self) {
                Node* p = self.parents[0];
                if (!p->needs_grad) return;
                p->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* y = self.val.data() + r * c;
                    const double* g = self.grad.data() + r * c;
                    double dot = 0.0;
                    for (int j = 0; j < c; ++j) dot += y[j] * g[j];
                    double* out = p->grad.data() + r * c;
                    for (int j = 0; j < c; ++j) out[j] += y[j] * (g[j] - dot);
                }
            };
        return n;
    }

    // layer normalization along the last axis with learnable gain/bias
    Node* layer_norm(Node* a, Node* gamma, Node* beta, double eps = 1e-5) {
        detail::require(!a->shape.empty(), "layer_norm: scalar input");
        const int c = a->shape.back();
        detail::require(static_cast<int>(gamma->val.size()) == c && static_cast<int>(beta->val.size()) == c,
                        "layer_norm: gain/bias must match the last axis");
        const std::size_t rows = a->val.size() / static_cast<std::size_t>(c);
        Node* n = alloc(a->shape, {a, gamma, beta});
        n->val.resize(a->val.size());
        n->aux.resize(a->val.size() + rows);  // normalized values, then inv_std per row
        for (std::size_t r = 0; r < rows; ++r) {
            const double* x = a->val.data() + r * c;
            double mu = 0.0;
            for (int j = 0; j < c; ++j) mu += x[j];
            mu /= c;
            double var = 0.0;
            for (int j = 0; j < c; ++j) var += (x[j] - mu) * (x[j] - mu);
            var /= c;
            const double inv_std = 1.0 / std::sqrt(var + eps);
            n->aux[a->val.size() + r] = inv_std;
            for (int j = 0; j < c; ++j) {
                const double xn = (x[j] - mu) * inv_std;
                n->aux[r * c + j] = xn;
                n->val[r * c + j] = gamma->val[static_cast<std::size_t>(j)] * xn + beta->val[static_cast<std::size_t>(j)];
            }
        }
        if (n->needs_grad)
            n->backward = [c, rows](Node& self) {
                Node* x = self.parents[0];
                Node* gamma2 = self.parents[1];
                Node* beta2 = self.parents[2];
                const std::size_t nel = x->val.size();
                if (gamma2->needs_grad) gamma2->ensure_grad();
                if (beta2->needs_grad) beta2->ensure_grad();
                if (x->needs_grad) x->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* g = self.grad.data() + r * c;
                    const double* xn = self.aux.data() + r * c;
                    const double inv_std = self.aux[nel + r];
                    double mean_gg = 0.0, mean_ggxn = 0.0;
                    for (int j = 0; j < c; ++j) {
                        const double gg = g[j] * gamma2->val[static_cast<std::size_t>(j)];
                        mean_gg += gg;
                        mean_ggxn += gg * xn[j];
                    }
                    mean_gg /= c;
                    mean_ggxn /= c;
                    for (int j = 0; j < c; ++j) {
                        if (gamma2->needs_grad) gamma2->grad[static_cast<std::size_t>(j)] += g[j] * xn[j];
                        if (beta2->needs_grad) beta2->grad[static_cast<std::size_t>(j)] += g[j];
                        if (x->needs_grad) {
                            const double gg = g[j] * gamma2->val[static_cast<std::size_t>(j)];
                            x->grad[r * c + j] += (gg - mean_gg - xn[j] * mean_ggxn) * inv_std;
                        }
                    }
                }
            };
        return n;
    }

    // ---- convolutions -------------------------------------------------------

    // 1-d convolution, kernel size 3, replicate padding; x: P x Cin,
    // w: Cout x Cin x 3, b: Cout (optional). Output P x Cout.
    Node* conv1d(Node* x, Node* w, Node* b) {
        detail::require_2d(x, "conv1d");
        detail::require(w->shape.size() == 3 && w->shape[2] == 3,
                        "conv1d: weight must be Cout x Cin x 3, got " + shape_str(w->shape));
        detail::require(w->shape[1] == x->shape[1], "conv1d: channel mismatch");
        const int P = x->shape[0], cin = x->shape[1], cout = w->shape[0];
        if (b) detail::require(static_cast<int>(b->val.size()) == cout, "conv1d: bias size mismatch");
        std::vector<Node*> parents{x, w};
        if (b) parents.push_back(b);
        Node* n = alloc({P, cout}, parents);
        n->val.assign(static_cast<std::size_t>(P) * cout, 0.0);
        auto clampi = [P](int t) { return t < 0 ? 0 : (t >= P ? P - 1 : t); };
        for (int t = 0; t < P; ++t) {
            double* out = n->val.data() + static_cast<std::size_t>(t) * cout;
            for (int k = 0; k < 3; ++k) {
                const double* xr = x->val.data() + static_cast<std::size_t>(clampi(t + k - 1)) * cin;
                for (int co = 0; co < cout; ++co) {
                    const double* wr = w->val.data() + (static_cast<std::size_t>(co) * cin) * 3 + k;
                    double acc = 0.0;
                    for (int ci = 0; ci < cin; ++ci) acc += wr[static_cast<std::size_t>(ci) * 3] * xr[ci];
                    out[co] += acc;
                }
            }
            if (b)
                for (int co = 0; co < cout; ++co) out[co] += b->val[static_cast<std::size_t>(co)];
        }
        if (n->needs_grad)
            n->backward = [P, cin, cout, clampi](Node& self) {
                Node* x2 = self.parents[0];
                Node* w2 = self.parents[1];
                Node* b2 = self.parents.size() > 2 ? self.parents[2] : nullptr;
                if (x2->needs_grad) x2->ensure_grad();
                if (w2->needs_grad) w2->ensure_grad();
                if (b2 && b2->needs_grad) b2->ensure_grad();
                for (int t = 0; t < P; ++t) {
                    const double* g = self.grad.data() + static_cast<std::size_t>(t) * cout;
                    for (int k = 0; k < 3; ++k) {
                        const int src = clampi(t + k - 1);
                        const double* xr = x2->val.data() + static_cast<std::size_t>(src) * cin;
                        for (int co = 0; co < cout; ++co) {
                            const double gv = g[co];
                            if (gv == 0.0) continue;
                            double* wrow = w2->needs_grad
                                               ? w2->grad.data() + (static_cast<std::size_t>(co) * cin) * 3 + k
                                               : nullptr;
                            const double* wval = w2->val.data() + (static_cast<std::size_t>(co) * cin) * 3 + k;
                            double* xg = x2->needs_grad ? x2->grad.data() + static_cast<std::size_t>(src) * cin
                                                        : nullptr;
                            for (int ci = 0; ci < cin; ++ci) {
                                if (wrow) wrow[static_cast<std::size_t>(ci) * 3] += gv * xr[ci];
                                if (xg) xg[ci] += gv * wval[static_cast<std::size_t>(ci) * 3];
                            }
                        }
                    }
                    if (b2 && b2->needs_grad)
                        for (int co = 0; co < cout; ++co) b2->grad[static_cast<std::size_t>(co)] += g[co];
                }
            };
        return n;
    }

    // 2-d convolution, 3x3 kernel, zero padding 1, stride 1 or 2, no bias;
    // x: Cin x H x W, w: Cout x Cin x 3 x 3. Output Cout x Ho x Wo.
    Node* conv2d(Node* x, Node* w, int stride) {
        detail::require(x->shape.size() == 3, "conv2d: input must be C x H x W, got " + shape_str(x->shape));
        detail::require(w->shape.size() == 4 && w->shape[2] == 3 && w->shape[3] == 3,
                        "conv2d: weight must be Cout x Cin x 3 x 3, got " + shape_str(w->shape));
        detail::require(w->shape[1] == x->shape[0], "conv2d: channel mismatch");
        detail::require(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
        const int cin = x->shape[0], H = x->shape[1], W = x->shape[2], cout = w->shape[0];
        const int Ho = (H - 1) / stride + 1, Wo = (W - 1) / stride + 1;
        Node* n = alloc({cout, Ho, Wo}, {x, w});
        n->val.assign(static_cast<std::size_t>(cout) * Ho * Wo, 0.0);
        for (int co = 0; co < cout; ++co)
            for (int ci = 0; ci < cin; ++ci) {
                const double* wk = w->val.data() + (static_cast<std::size_t>(co) * cin + ci) * 9;
                const double* xp = x->val.data() + static_cast<std::size_t>(ci) * H * W;
                double* out = n->val.data() + static_cast<std::size_t>(co) * Ho * Wo;
                for (int oi = 0; oi < Ho; ++oi)
                    for (int oj = 0; oj < Wo; ++oj) {
                        const int bi = oi * stride - 1, bj = oj * stride - 1;
                        double acc = 0.0;
                        for (int ki = 0; ki < 3; ++ki) {
                            const int ii = bi + ki;
                            if (ii < 0 || ii >= H) continue;
                            for (int kj = 0; kj < 3; ++kj) {
                                const int jj = bj + kj;
                                if (jj < 0 || jj >= W) continue;
                                acc += wk[ki * 3 + kj] * xp[static_cast<std::size_t>(ii) * W + jj];
                            }
                        }
                        out[static_cast<std::size_t>(oi) * Wo + oj] += acc;
                    }
            }
        if (n->needs_grad)
            n->backward = [cin, cout, H, W, Ho, Wo, stride](Node& self) {
                Node* x2 = self.parents[0];
                Node* w2 = self.parents[1];
                if (x2->needs_grad) x2->ensure_grad();
                if (w2->needs_grad) w2->ensure_grad();
                for (int co = 0; co < cout; ++co)
                    for (int ci = 0; ci < cin; ++ci) {
                        const double* wk = w2->val.data() + (static_cast<std::size_t>(co) * cin + ci) * 9;
                        double* wg = w2->needs_grad
                                         ? w2->grad.data() + (static_cast<std::size_t>(co) * cin + ci) * 9
                                         : nullptr;
                        const double* xp = x2->val.data() + static_cast<std::size_t>(ci) * H * W;
                        double* xg = x2->needs_grad ? x2->grad.data() + static_cast<std::size_t>(ci) * H * W
                                                    : nullptr;
                        const double* g = self.grad.data() + static_cast<std::size_t>(co) * Ho * Wo;
                        for (int oi = 0; oi < Ho; ++oi)
                            for (int oj = 0; oj < Wo; ++oj) {
                                const double gv = g[static_cast<std::size_t>(oi) * Wo + oj];
                                if (gv == 0.0) continue;
                                const int bi = oi * stride - 1, bj = oj * stride - 1;
                                for (int ki = 0; ki < 3; ++ki) {
                                    const int ii = bi + ki;
                                    if (ii < 0 || ii >= H) continue;
                                    for (int kj = 0; kj < 3; ++kj) {
                                        const int jj = bj + kj;
                                        if (jj < 0 || jj >= W) continue;
                                        if (wg) wg[ki * 3 + kj] += gv * xp[static_cast<std::size_t>(ii) * W + jj];
                                        if (xg)
                                            xg[static_cast<std::size_t>(ii) * W + jj] += gv * wk[ki * 3 + kj];
                                    }
                                }
                            }
                    }
            };
        return n;
    }

    // nearest-neighbour 2x upsampling of a C x H x W map
    Node* upsample2x(Node* x) {
        detail::require(x->shape.size() == 3, "upsample2x: input must be C x H x W");
        const int C = x->shape[0], H = x->shape[1], W = x->shape[2];
        Node* n = alloc({C, 2 * H, 2 * W}, {x});
        n->val.resize(static_cast<std::size_t>(C) * 4 * H * W);
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < 2 * H; ++i)
                for (int j = 0; j < 2 * W; ++j)
                    n->val[(static_cast<std::size_t>(c) * 2 * H + i) * 2 * W + j] =
                        x->val[(static_cast<std::size_t>(c) * H + i / 2) * W + j / 2];
        if (n->needs_grad)
            n->backward = [C, H, W](Node& self) {
                Node* p = self.parents[0];
                if (!p->needs_grad) return;
                p->ensure_grad();
                for (int c = 0; c < C; ++c)
                    for (int i = 0; i < 2 * H; ++i)
                        for (int j = 0; j < 2 * W; ++j)
                            p->grad[(static_cast<std::size_t>(c) * H + i / 2) * W + j / 2] +=
                                self.grad[(static_cast<std::size_t>(c) * 2 * H + i) * 2 * W + j];
            };
        return n;
    }

    // ---- pooling / scatter --------------------------------------------------

    // max over consecutive groups of `group` rows; ties resolve to the first
    // row so gradients are deterministic
    Node* rowgroup_max(Node* x, int group) {
        detail::require_2d(x, "rowgroup_max");
        detail::require(group >= 1 && x->shape[0] % group == 0, "rowgroup_max: rows not divisible by group");
        const int G = x->shape[0] / group, C = x->shape[1];
        Node* n = alloc({G, C}, {x});
        n->val.resize(static_cast<std::size_t>(G) * C);
        n->aux.resize(static_cast<std::size_t>(G) * C);  // argmax row offsets
        for (int gi = 0; gi < G; ++gi)
            for (int c = 0; c < C; ++c) {
                int best = 0;
                double bv = x->val[static_cast<std::size_t>(gi) * group * C + c];
                for (int r = 1; r < group; ++r) {
                    const double v = x->val[(static_cast<std::size_t>(gi) * group + r) * C + c];
                    if (v > bv) {
                        bv = v;
                        best = r;
                    }
                }
                n->val[static_cast<std::size_t>(gi) * C + c] = bv;
                n->aux[static_cast<std::size_t>(gi) * C + c] = best;
            }
        if (n->needs_grad)
            n->backward = [G, C, group](Node& self) {
                Node* p = self.parents[0];
                if (!p->needs_grad) return;
                p->ensure_grad();
                for (int gi = 0; gi < G; ++gi)
                    for (int c = 0; c < C; ++c) {
                        const int r = static_cast<int>(self.aux[static_cast<std::size_t>(gi) * C + c]);
                        p->grad[(static_cast<std::size_t>(gi) * group + r) * C + c] +=
                            self.grad[static_cast<std::size_t>(gi) * C + c];
                    }
            };
        return n;
    }

    // scatter rows of an n x C matrix into a C x H x W grid at unique (i, j)
    // coordinates; unfilled cells are zero
    Node* scatter_rows_to_chw(Node* x, const std::vector<std::pair<int, int>>& coords, int H, int W) {
        detail::require_2d(x, "scatter_rows_to_chw");
        detail::require(static_cast<int>(coords.size()) == x->shape[0],
                        "scatter_rows_to_chw: one coordinate per row required");
        const int C = x->shape[1];
        std::vector<double> seen(static_cast<std::size_t>(H) * W, 0.0);
        for (const auto& [i, j] : coords) {
            detail::require(i >= 0 && i < H && j >= 0 && j < W, "scatter_rows_to_chw: coordinate out of grid");
            double& s = seen[static_cast<std::size_t>(i) * W + j];
            detail::require(s == 0.0, "scatter_rows_to_chw: duplicate coordinate");
            s = 1.0;
        }
        Node* n = alloc({C, H, W}, {x});
        n->val.assign(static_cast<std::size_t>(C) * H * W, 0.0);
        n->aux.resize(coords.size() * 2);
        for (std::size_t p = 0; p < coords.size(); ++p) {
            n->aux[p * 2] = coords[p].first;
            n->aux[p * 2 + 1] = coords[p].second;
            for (int c = 0; c < C; ++c)
                n->val[(static_cast<std::size_t>(c) * H + coords[p].first) * W + coords[p].second] =
                    x->val[p * C + c];
        }
        if (n->needs_grad)
            n->backward = [C, H, W](Node& self) {
                Node* p = self.parents[0];
                if (!p->needs_grad) return;
                p->ensure_grad();
                const std::size_t npil = self.aux.size() / 2;
                for (std::size_t pi = 0; pi < npil; ++pi) {
                    const int i = static_cast<int>(self.aux[pi * 2]);
                    const int j = static_cast<int>(self.aux[pi * 2 + 1]);
                    for (int c = 0; c < C; ++c)
                        p->grad[pi * C + c] += self.grad[(static_cast<std::size_t>(c) * H + i) * W + j];
                }
            };
        return n;
    }

    // C x H x W feature map to (H*W) x C rows (cell-major), for attention
    Node* chw_to_nc(Node* x) {
        detail::require(x->shape.size() == 3, "chw_to_nc: input must be C x H x W");
        const int C = x->shape[0], H = x->shape[1], W = x->shape[2];
        Node* n = alloc({H * W, C}, {x});
        n->val.resize(x->val.size());
        for (int c = 0; c < C; ++c)
            for (int cell = 0; cell < H * W; ++cell)
                n->val[static_cast<std::size_t>(cell) * C + c] =
                    x->val[static_cast<std::size_t>(c) * H * W + cell];
        if (n->needs_grad)
            n->backward = [C, H, W](Node& self) {
                Node* p = self.parents[0];
                if (!p->needs_grad) return;
                p->ensure_grad();
                for (int c = 0; c < C; ++c)
                    for (int cell = 0; cell < H * W; ++cell)
                        p->grad[static_cast<std::size_t>(c) * H * W + cell] +=
                            self.grad[static_cast<std::size_t>(cell) * C + c];
            };
        return n;
    }

    // ---- fused per-step attention --------------------------------------------
    // For each of P steps, multi-head attention of one query row over its own
    // group of g key/value rows: Q is P x d, K and V are (P*g) x d.
    Node* grouped_attention(Node* q, Node* k, Node* v, int group, int heads) {
        detail::require_2d(q, "grouped_attention");
        detail::require_2d(k, "grouped_attention");
        detail::require_2d(v, "grouped_attention");
        const int P = q->shape[0], d = q->shape[1];
        detail::require(d % heads == 0, "grouped_attention: width not divisible by heads");
        detail::require(k->shape[0] == P * group && k->shape[1] == d, "grouped_attention: bad key shape");
        detail::require(v->shape[0] == P * group && v->shape[1] == d, "grouped_attention: bad value shape");
        const int dh = d / heads;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        Node* n = alloc({P, d}, {q, k, v});
        n->val.assign(static_cast<std::size_t>(P) * d, 0.0);
        n->aux.resize(static_cast<std::size_t>(P) * heads * group);
        std::vector<double> scores(static_cast<std::size_t>(group));
        for (int t = 0; t < P; ++t)
            for (int h = 0; h < heads; ++h) {
                const int off = h * dh;
                const double* qr = q->val.data() + static_cast<std::size_t>(t) * d + off;
                double mx = -1e300;
                for (int r = 0; r < group; ++r) {
                    const double* kr = k->val.data() + (static_cast<std::size_t>(t) * group + r) * d + off;
                    double s = 0.0;
                    for (int u = 0; u < dh; ++u) s += qr[u] * kr[u];
                    scores[static_cast<std::size_t>(r)] = s * inv_sqrt;
                    mx = std::max(mx, scores[static_cast<std::size_t>(r)]);
                }
                double z = 0.0;
                for (int r = 0; r < group; ++r) {
                    scores[static_cast<std::size_t>(r)] = std::exp(scores[static_cast<std::size_t>(r)] - mx);
                    z += scores[static_cast<std::size_t>(r)];
                }
                double* alpha = n->aux.data() + (static_cast<std::size_t>(t) * heads + h) * group;
                double* out = n->val.data() + static_cast<std::size_t>(t) * d + off;
                for (int r = 0; r < group; ++r) {
                    alpha[r] = scores[static_cast<std::size_t>(r)] / z;
                    const double* vr = v->val.data() + (static_cast<std::size_t>(t) * group + r) * d + off;
                    for (int u = 0; u < dh; ++u) out[u] += alpha[r] * vr[u];
                }
            }
        if (n->needs_grad)
            n->backward = [P, d, dh, heads, group, inv_sqrt](Node& self) {
                Node* q2 = self.parents[0];
                Node* k2 = self.parents[1];
                Node* v2 = self.parents[2];
                if (q2->needs_grad) q2->ensure_grad();
                if (k2->needs_grad) k2->ensure_grad();
                if (v2->needs_grad) v2->ensure_grad();
                std::vector<double> dalpha(static_cast<std::size_t>(group));
                for (int t = 0; t < P; ++t)
                    for (int h = 0; h < heads; ++h) {
                        const int off = h * dh;
                        const double* alpha = self.aux.data() + (static_cast<std::size_t>(t) * heads + h) * group;
                        const double* g = self.grad.data() + static_cast<std::size_t>(t) * d + off;
                        const double* qr = q2->val.data() + static_cast<std::size_t>(t) * d + off;
                        double dot = 0.0;
                        for (int r = 0; r < group; ++r) {
                            const std::size_t row = (static_cast<std::size_t>(t) * group + r) * d + off;
                            const double* vr = v2->val.data() + row;
                            double da = 0.0;
                            for (int u = 0; u < dh; ++u) da += g[u] * vr[u];
                            dalpha[static_cast<std::size_t>(r)] = da;
                            dot += da * alpha[r];
                            if (v2->needs_grad) {
                                double* vg = v2->grad.data() + row;
                                for (int u = 0; u < dh; ++u) vg[u] += alpha[r] * g[u];
                            }
                        }
                        for (int r = 0; r < group; ++r) {
                            const double ds = alpha[r] * (dalpha[static_cast<std::size_t>(r)] - dot) * inv_sqrt;
                            if (ds == 0.0) continue;
                            const std::size_t row = (static_cast<std::size_t>(t) * group + r) * d + off;
                            if (q2->needs_grad) {
                                const double* kr = k2->val.data() + row;
                                double* qg = q2->grad.data() + static_cast<std::size_t>(t) * d + off;
                                for (int u = 0; u < dh; ++u) qg[u] += ds * kr[u];
                            }
                            if (k2->needs_grad) {
                                double* kg = k2->grad.data() + row;
                                for (int u = 0; u < dh; ++u) kg[u] += ds * qr[u];
                            }
                        }
                    }
            };
        return n;
    }

    // ---- driver ---------------------------------------------------------------

    void backward(Node* root) {
        detail::require(root->val.size() == 1, "backward: root must be scalar");
        if (!root->needs_grad) return;
        root->ensure_grad();
        root->grad[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node& n = *it;
            if (n.backward && n.needs_grad && !n.grad.empty()) n.backward(n);
        }
    }

    // trainable-leaf gradients keyed by param id (zero vector if untouched)
    std::vector<std::pair<int, std::vector<double>>> collect_param_grads() {
        std::vector<std::pair<int, std::vector<double>>> out;
        for (auto& n : nodes_)
            if (n.param_id >= 0) {
                n.ensure_grad();
                out.emplace_back(n.param_id, n.grad);
            }
        return out;
    }

    std::size_t node_count() const { return nodes_.size(); }

private:
    enum class BinKind { Add, Mul };
    enum class Bcast { Same, Row, Col, Scalar };

    Node* alloc(Shape shape, const std::vector<Node*>& parents) {
        nodes_.emplace_back();
        Node& n = nodes_.back();
        n.shape = std::move(shape);
        n.parents = parents;
        for (Node* p : parents)
            if (p->needs_grad) {
                n.needs_grad = true;
                break;
            }
        return &n;
    }

    static void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n,
                           bool ta, bool tb) {
        // c (m x n) += op(a) * op(b); op dims: a is m x k after transpose flag,
        // b is k x n after transpose flag
        if (!ta && !tb) {
            for (int i = 0; i < m; ++i)
                for (int p = 0; p < k; ++p) {
                    const double av = a[static_cast<std::size_t>(i) * k + p];
                    if (av == 0.0) continue;
                    const double* br = b + static_cast<std::size_t>(p) * n;
                    double* cr = c + static_cast<std::size_t>(i) * n;
                    for (int j = 0; j < n; ++j) cr[j] += av * br[j];
                }
        } else if (!ta && tb) {
            // b stored as n x k
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    const double* ar = a + static_cast<std::size_t>(i) * k;
                    const double* br = b + static_cast<std::size_t>(j) * k;
                    double acc = 0.0;
                    for (int p = 0; p < k; ++p) acc += ar[p] * br[p];
                    c[static_cast<std::size_t>(i) * n + j] += acc;
                }
        } else if (ta && !tb) {
            // a stored as k x m
            for (int p = 0; p < k; ++p)
                for (int i = 0; i < m; ++i) {
                    const double av = a[static_cast<std::size_t>(p) * m + i];
                    if (av == 0.0) continue;
                    const double* br = b + static_cast<std::size_t>(p) * n;
                    double* cr = c + static_cast<std::size_t>(i) * n;
                    for (int j = 0; j < n; ++j) cr[j] += av * br[j];
                }
        } else {
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (int p = 0; p < k; ++p)
                        acc += a[static_cast<std::size_t>(p) * m + i] * b[static_cast<std::size_t>(j) * k + p];
                    c[static_cast<std::size_t>(i) * n + j] += acc;
                }
        }
    }

    static Bcast bcast_mode(const Node* a, const Node* b, const char* op) {
        if (a->shape == b->shape) return Bcast::Same;
        if (b->val.size() == 1) return Bcast::Scalar;
        if (a->shape.size() == 2 && b->shape.size() == 2) {
            if (b->shape[0] == 1 && b->shape[1] == a->shape[1]) return Bcast::Row;
            if (b->shape[1] == 1 && b->shape[0] == a->shape[0]) return Bcast::Col;
        }
        throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a->shape) +
                                    " and " + shape_str(b->shape));
    }

    Node* binary(Node* a, Node* b, const char* name, BinKind kind) {
        const Bcast mode = bcast_mode(a, b, name);
        Node* n = alloc(a->shape, {a, b});
        n->val.resize(a->val.size());
        const int rows = a->rows(), cols = static_cast<int>(a->val.size()) / std::max(1, a->rows());
        auto bval = [&](std::size_t i) -> double {
            switch (mode) {
                case Bcast::Same: return b->val[i];
                case Bcast::Scalar: return b->val[0];
                case Bcast::Row: return b->val[i % static_cast<std::size_t>(cols)];
                case Bcast::Col: return b->val[i / static_cast<std::size_t>(cols)];
            }
            return 0.0;
        };
        if (kind == BinKind::Add)
            for (std::size_t i = 0; i < n->val.size(); ++i) n->val[i] = a->val[i] + bval(i);
        else
            for (std::size_t i = 0; i < n->val.size(); ++i) n->val[i] = a->val[i] * bval(i);
        if (n->needs_grad)
            n->backward = [mode, kind, rows, cols](Node& self) {
                Node* a2 = self.parents[0];
                Node* b2 = self.parents[1];
                auto bindex = [&](std::size_t i) -> std::size_t {
                    switch (mode) {
                        case Bcast::Same: return i;
                        case Bcast::Scalar: return 0;
                        case Bcast::Row: return i % static_cast<std::size_t>(cols);
                        case Bcast::Col: return i / static_cast<std::size_t>(cols);
                    }
                    return 0;
                };
                (void)rows;
                if (kind == BinKind::Add) {
                    if (a2->needs_grad) {
                        a2->ensure_grad();
                        for (std::size_t i = 0; i < self.grad.size(); ++i) a2->grad[i] += self.grad[i];
                    }
                    if (b2->needs_grad) {
                        b2->ensure_grad();
                        for (std::size_t i = 0; i < self.grad.size(); ++i) b2->grad[bindex(i)] += self.grad[i];
                    }
                } else {
                    if (a2->needs_grad) {
                        a2->ensure_grad();
                        for (std::size_t i = 0; i < self.grad.size(); ++i)
                            a2->grad[i] += self.grad[i] * b2->val[bindex(i)];
                    }
                    if (b2->needs_grad) {
                        b2->ensure_grad();
                        for (std::size_t i = 0; i < self.grad.size(); ++i)
                            b2->grad[bindex(i)] += self.grad[i] * a2->val[i];
                    }
                }
            };
        return n;
    }

    std::deque<Node> nodes_;
    bool grad_enabled_ = true;
};

}  // namespace mmwl::ad
