#include "keepfit/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <unordered_set>

namespace keepfit::ag {

namespace {

thread_local bool g_grad_enabled = true;

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

bool wants(const Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }

} // namespace

Tensor& Node::grad_buffer() {
    if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor(value.shape());
    return grad;
}

Var Var::constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
}

Var Var::parameter(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool any = false;
    if (g_grad_enabled) {
        for (const auto& in : inputs) any = any || in.requires_grad();
    }
    if (any) {
        n->requires_grad = true;
        n->inputs.reserve(inputs.size());
        for (auto& in : inputs) n->inputs.push_back(in.node());
        n->backward = std::move(backward);
    }
    return Var(std::move(n));
}

void backward(const Var& root) {
    if (!root.requires_grad()) return;
    if (root.value().size() != 1) throw ShapeError("backward: root must be scalar, got " + shape_str(root.shape()));

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->grad_buffer().fill(1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
    for (Node* n : order) {
        if (n->backward) n->grad = Tensor();
    }
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Tensor out = a.value();
    out.add_(b.value());
    return make_op(std::move(out), {a, b}, [](Node& self) {
        for (std::size_t i = 0; i < 2; ++i)
            if (wants(self, i)) self.inputs[i]->grad_buffer().add_(self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a.value();
    out.add_(b.value(), -1.0);
    return make_op(std::move(out), {a, b}, [](Node& self) {
        if (wants(self, 0)) self.inputs[0]->grad_buffer().add_(self.grad);
        if (wants(self, 1)) self.inputs[1]->grad_buffer().add_(self.grad, -1.0);
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        const Tensor& av = self.inputs[0]->value;
        const Tensor& bv = self.inputs[1]->value;
        if (wants(self, 0)) {
            Tensor& g = self.inputs[0]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
        }
        if (wants(self, 1)) {
            Tensor& g = self.inputs[1]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out = a.value();
    for (auto& v : out.storage()) v *= s;
    return make_op(std::move(out), {a}, [s](Node& self) { self.inputs[0]->grad_buffer().add_(self.grad, s); });
}

Var div_scalar(const Var& a, const Var& s) {
    if (s.value().size() != 1) throw ShapeError("div_scalar: divisor must have one element");
    const double sv = s.value()[0];
    Tensor out = a.value();
    for (auto& v : out.storage()) v /= sv;
    return make_op(std::move(out), {a, s}, [](Node& self) {
        const double sv = self.inputs[1]->value[0];
        if (wants(self, 0)) self.inputs[0]->grad_buffer().add_(self.grad, 1.0 / sv);
        if (wants(self, 1)) {
            // d(a/s)/ds = -a/s^2 = -out/s
            double acc = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * self.value[i];
            self.inputs[1]->grad_buffer()[0] += -acc / sv;
        }
    });
}

Var add_row(const Var& x, const Var& bias) {
    const std::size_t cols = x.value().cols();
    if (bias.value().size() != cols) {
        throw ShapeError("add_row: bias " + shape_str(bias.shape()) + " for " + shape_str(x.shape()));
    }
    Tensor out = x.value();
    const std::size_t rows = out.rows();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bias.value()[c];
    return make_op(std::move(out), {x, bias}, [rows, cols](Node& self) {
        if (wants(self, 0)) self.inputs[0]->grad_buffer().add_(self.grad);
        if (wants(self, 1)) {
            Tensor& g = self.inputs[1]->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad[r * cols + c];
        }
    });
}

Var relu(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.storage()) if (v < 0.0) v = 0.0;
    return make_op(std::move(out), {a}, [](Node& self) {
        Tensor& g = self.inputs[0]->grad_buffer();
        const Tensor& in = self.inputs[0]->value;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (in[i] > 0.0) g[i] += self.grad[i];
    });
}

Var gelu(const Var& a) {
    constexpr double k = 0.7978845608028654; // sqrt(2/pi)
    Tensor out = a.value();
    for (auto& v : out.storage()) v = 0.5 * v * (1.0 + std::tanh(k * (v + 0.044715 * v * v * v)));
    return make_op(std::move(out), {a}, [](Node& self) {
        Tensor& g = self.inputs[0]->grad_buffer();
        const Tensor& in = self.inputs[0]->value;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = in[i];
            const double u = k * (x + 0.044715 * x * x * x);
            const double t = std::tanh(u);
            const double du = k * (1.0 + 3.0 * 0.044715 * x * x);
            const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
            g[i] += self.grad[i] * d;
        }
    });
}

Var tanh(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.storage()) v = std::tanh(v);
    return make_op(std::move(out), {a}, [](Node& self) {
        Tensor& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (1.0 - self.value[i] * self.value[i]);
    });
}

Var exp(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.storage()) v = std::exp(v);
    return make_op(std::move(out), {a}, [](Node& self) {
        Tensor& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
    });
}

Var log_floor(const Var& a, double eps) {
    Tensor out = a.value();
    for (auto& v : out.storage()) v = std::log(std::max(v, eps));
    return make_op(std::move(out), {a}, [eps](Node& self) {
        Tensor& g = self.inputs[0]->grad_buffer();
        const Tensor& in = self.inputs[0]->value;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (in[i] > eps) g[i] += self.grad[i] / in[i];
    });
}

Var square(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.storage()) v *= v;
    return make_op(std::move(out), {a}, [](Node& self) {
        Tensor& g = self.inputs[0]->grad_buffer();
        const Tensor& in = self.inputs[0]->value;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * in[i] * self.grad[i];
    });
}

// ----------------------------------------------------------------- reductions

Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().values()) s += v;
    return make_op(Tensor::scalar(s), {a}, [](Node& self) {
        Tensor& g = self.inputs[0]->grad_buffer();
        const double gv = self.grad[0];
        for (auto& v : g.storage()) v += gv;
    });
}

Var mean(const Var& a) {
    const double n = static_cast<double>(a.value().size());
    return scale(sum(a), 1.0 / n);
}

Var sum_cols(const Var& a) {
    const std::size_t rows = a.value().rows(), cols = a.value().cols();
    Tensor out({rows, 1});
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += a.value()[r * cols + c];
        out[r] = s;
    }
    return make_op(std::move(out), {a}, [rows, cols](Node& self) {
        Tensor& g = self.inputs[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += self.grad[r];
    });
}

Var mean_row_groups(const Var& a, std::size_t group) {
    const std::size_t rows = a.value().rows(), cols = a.value().cols();
    if (group == 0 || rows % group != 0) {
        throw ShapeError("mean_row_groups: " + std::to_string(rows) + " rows not divisible by " + std::to_string(group));
    }
    const std::size_t groups = rows / group;
    Tensor out({groups, cols});
    const double inv = 1.0 / static_cast<double>(group);
    for (std::size_t gi = 0; gi < groups; ++gi)
        for (std::size_t r = 0; r < group; ++r)
            for (std::size_t c = 0; c < cols; ++c) out[gi * cols + c] += a.value()[(gi * group + r) * cols + c] * inv;
    return make_op(std::move(out), {a}, [groups, group, cols, inv](Node& self) {
        Tensor& g = self.inputs[0]->grad_buffer();
        for (std::size_t gi = 0; gi < groups; ++gi)
            for (std::size_t r = 0; r < group; ++r)
                for (std::size_t c = 0; c < cols; ++c) g[(gi * group + r) * cols + c] += self.grad[gi * cols + c] * inv;
    });
}

// ---------------------------------------------------------------------- shape

Var reshape(const Var& a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    return make_op(std::move(out), {a}, [](Node& self) {
        Tensor& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Var transpose(const Var& a) {
    return make_op(keepfit::transpose(a.value()), {a},
                   [](Node& self) { self.inputs[0]->grad_buffer().add_(keepfit::transpose(self.grad)); });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t count) {
    const std::size_t rows = a.value().rows(), cols = a.value().cols();
    if (begin + count > cols) throw ShapeError("slice_cols out of range on " + shape_str(a.shape()));
    Tensor out({rows, count});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < count; ++c) out[r * count + c] = a.value()[r * cols + begin + c];
    return make_op(std::move(out), {a}, [rows, cols, begin, count](Node& self) {
        Tensor& g = self.inputs[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < count; ++c) g[r * cols + begin + c] += self.grad[r * count + c];
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t rows = parts[0].value().rows();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.value().rows() != rows) throw ShapeError("concat_cols: row counts differ");
        total += p.value().cols();
    }
    Tensor out({rows, total});
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const std::size_t pc = p.value().cols();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < pc; ++c) out[r * total + off + c] = p.value()[r * pc + c];
        off += pc;
    }
    return make_op(std::move(out), parts, [rows, total, offsets](Node& self) {
        for (std::size_t i = 0; i < self.inputs.size(); ++i) {
            if (!wants(self, i)) continue;
            Tensor& g = self.inputs[i]->grad_buffer();
            const std::size_t pc = g.cols();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < pc; ++c) g[r * pc + c] += self.grad[r * total + offsets[i] + c];
        }
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t cols = parts[0].value().cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.value().cols() != cols) throw ShapeError("concat_rows: column counts differ");
        rows += p.value().rows();
    }
    std::vector<double> data;
    data.reserve(rows * cols);
    for (const auto& p : parts) data.insert(data.end(), p.value().storage().begin(), p.value().storage().end());
    return make_op(Tensor({rows, cols}, std::move(data)), parts, [](Node& self) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < self.inputs.size(); ++i) {
            const std::size_t n = self.inputs[i]->value.size();
            if (wants(self, i)) {
                Tensor& g = self.inputs[i]->grad_buffer();
                for (std::size_t k = 0; k < n; ++k) g[k] += self.grad[off + k];
            }
            off += n;
        }
    });
}

Var gather_rows(const Var& a, const std::vector<std::size_t>& rows) {
    const std::size_t n = a.value().rows(), cols = a.value().cols();
    Tensor out({rows.size(), cols});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= n) throw ShapeError("gather_rows: row " + std::to_string(rows[i]) + " of " + std::to_string(n));
        std::copy_n(a.value().data() + rows[i] * cols, cols, out.data() + i * cols);
    }
    return make_op(std::move(out), {a}, [rows, cols](Node& self) {
        Tensor& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t c = 0; c < cols; ++c) g[rows[i] * cols + c] += self.grad[i * cols + c];
    });
}

Var stop_gradient(const Var& a) { return Var::constant(a.value()); }

// ------------------------------------------------------------- linear algebra

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
    Tensor out = keepfit::matmul(a.value(), b.value(), trans_a, trans_b);
    return make_op(std::move(out), {a, b}, [trans_a, trans_b](Node& self) {
        const Tensor& av = self.inputs[0]->value;
        const Tensor& bv = self.inputs[1]->value;
        const Tensor& g = self.grad; // m×n
        const std::size_t m = g.dim(0), n = g.dim(1);
        const std::size_t k = trans_a ? av.dim(0) : av.dim(1);
        if (wants(self, 0)) {
            Tensor& ga = self.inputs[0]->grad_buffer();
            if (!trans_a) {
                // dA (m×k) = G · op(B)^T
                gemm(false, !trans_b, m, k, n, 1.0, g.data(), bv.data(), 1.0, ga.data());
            } else {
                // A stored k×m: dA = op(B) · G^T
                gemm(trans_b, true, k, m, n, 1.0, bv.data(), g.data(), 1.0, ga.data());
            }
        }
        if (wants(self, 1)) {
            Tensor& gb = self.inputs[1]->grad_buffer();
            if (!trans_b) {
                // dB (k×n) = op(A)^T · G
                gemm(!trans_a, false, k, n, m, 1.0, av.data(), g.data(), 1.0, gb.data());
            } else {
                // B stored n×k: dB = G^T · op(A)
                gemm(true, trans_a, n, k, m, 1.0, g.data(), av.data(), 1.0, gb.data());
            }
        }
    });
}

// ------------------------------------------------------------------- rowwise

namespace {

Tensor softmax_values(const Tensor& x) {
    Tensor out = x;
    const std::size_t rows = x.rows(), cols = x.cols();
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = out.data() + r * cols;
        const double mx = *std::max_element(row, row + cols);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            row[c] = std::exp(row[c] - mx);
            z += row[c];
        }
        for (std::size_t c = 0; c < cols; ++c) row[c] /= z;
    }
    return out;
}

// g_in += p ⊙ (g − <g, p>) row by row
void softmax_backward(const Tensor& p, const Tensor& g, Tensor& g_in) {
    const std::size_t rows = p.rows(), cols = p.cols();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* pr = p.data() + r * cols;
        const double* gr = g.data() + r * cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += pr[c] * gr[c];
        double* out = g_in.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) out[c] += pr[c] * (gr[c] - dot);
    }
}

} // namespace

Var softmax_rows(const Var& a) {
    return make_op(softmax_values(a.value()), {a},
                   [](Node& self) { softmax_backward(self.value, self.grad, self.inputs[0]->grad_buffer()); });
}

Var log_softmax_rows(const Var& a) {
    Tensor out = a.value();
    const std::size_t rows = out.rows(), cols = out.cols();
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = out.data() + r * cols;
        const double mx = *std::max_element(row, row + cols);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) z += std::exp(row[c] - mx);
        const double lz = mx + std::log(z);
        for (std::size_t c = 0; c < cols; ++c) row[c] -= lz;
    }
    return make_op(std::move(out), {a}, [rows, cols](Node& self) {
        Tensor& g = self.inputs[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            double gs = 0.0;
            for (std::size_t c = 0; c < cols; ++c) gs += self.grad[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c)
                g[r * cols + c] += self.grad[r * cols + c] - std::exp(self.value[r * cols + c]) * gs;
        }
    });
}

Var l2_normalize_rows(const Var& a) {
    const std::size_t rows = a.value().rows(), cols = a.value().cols();
    Tensor out = a.value();
    std::vector<double> norms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += out[r * cols + c] * out[r * cols + c];
        const double n = std::sqrt(s);
        if (n == 0.0) throw Error("l2_normalize_rows: row " + std::to_string(r) + " has zero norm");
        norms[r] = n;
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= n;
    }
    return make_op(std::move(out), {a}, [rows, cols, norms](Node& self) {
        Tensor& g = self.inputs[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.value.data() + r * cols;
            const double* gy = self.grad.data() + r * cols;
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += y[c] * gy[c];
            for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += (gy[c] - y[c] * dot) / norms[r];
        }
    });
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const std::size_t rows = x.value().rows(), cols = x.value().cols();
    if (gamma.value().size() != cols || beta.value().size() != cols) throw ShapeError("layer_norm: affine size mismatch");
    auto xhat = std::make_shared<Tensor>(x.value().shape());
    std::vector<double> inv_std(rows);
    Tensor out(x.value().shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.value().data() + r * cols;
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
        var /= static_cast<double>(cols);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t c = 0; c < cols; ++c) {
            const double h = (xr[c] - mu) * is;
            (*xhat)[r * cols + c] = h;
            out[r * cols + c] = h * gamma.value()[c] + beta.value()[c];
        }
    }
    return make_op(std::move(out), {x, gamma, beta}, [rows, cols, xhat, inv_std](Node& self) {
        const Tensor& gam = self.inputs[1]->value;
        const Tensor& g = self.grad;
        if (wants(self, 1)) {
            Tensor& gg = self.inputs[1]->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) gg[c] += g[r * cols + c] * (*xhat)[r * cols + c];
        }
        if (wants(self, 2)) {
            Tensor& gb = self.inputs[2]->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
        }
        if (wants(self, 0)) {
            Tensor& gx = self.inputs[0]->grad_buffer();
            const double n = static_cast<double>(cols);
            for (std::size_t r = 0; r < rows; ++r) {
                double s1 = 0.0, s2 = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    const double dh = g[r * cols + c] * gam[c];
                    s1 += dh;
                    s2 += dh * (*xhat)[r * cols + c];
                }
                for (std::size_t c = 0; c < cols; ++c) {
                    const double dh = g[r * cols + c] * gam[c];
                    gx[r * cols + c] += inv_std[r] * (dh - s1 / n - (*xhat)[r * cols + c] * s2 / n);
                }
            }
        }
    });
}

Var cross_entropy_rows(const Var& logits, const std::vector<std::size_t>& targets) {
    const std::size_t rows = logits.value().rows(), cols = logits.value().cols();
    if (targets.size() != rows) throw ShapeError("cross_entropy_rows: target count mismatch");
    for (auto t : targets)
        if (t >= cols) throw ShapeError("cross_entropy_rows: target out of range");
    Var lp = log_softmax_rows(logits);
    Tensor picked({rows, cols});
    for (std::size_t r = 0; r < rows; ++r) picked[r * cols + targets[r]] = -1.0 / static_cast<double>(rows);
    return sum(mul(lp, Var::constant(std::move(picked))));
}

Var straight_through_onehot(const Var& logits) {
    const Tensor soft = softmax_values(logits.value());
    const std::size_t rows = soft.rows(), cols = soft.cols();
    Tensor hard(soft.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* pr = soft.data() + r * cols;
        // max_element returns the first maximum, so ties go to the lowest index
        const auto best = static_cast<std::size_t>(std::max_element(pr, pr + cols) - pr);
        hard[r * cols + best] = 1.0;
    }
    return make_op(std::move(hard), {logits},
                   [soft](Node& self) { softmax_backward(soft, self.grad, self.inputs[0]->grad_buffer()); });
}

// --------------------------------------------------------------- convolution

Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride, std::size_t pad) {
    const Tensor& xv = x.value();
    const Tensor& wv = weight.value();
    if (xv.rank() != 4 || wv.rank() != 4) {
        throw ShapeError("conv2d: input " + shape_str(xv.shape()) + ", weight " + shape_str(wv.shape()));
    }
    const std::size_t B = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    const std::size_t kh = wv.dim(0), kw = wv.dim(1), Cout = wv.dim(3);
    if (wv.dim(2) != C) {
        throw ShapeError("conv2d: channel mismatch, input " + shape_str(xv.shape()) + " weight " + shape_str(wv.shape()));
    }
    if (H + 2 * pad < kh || W + 2 * pad < kw || stride == 0) throw ShapeError("conv2d: kernel larger than input");
    const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
    const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
    const std::size_t patch = kh * kw * C;
    const std::size_t npos = B * Ho * Wo;

    auto cols = std::make_shared<Tensor>(Shape{npos, patch});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                double* dst = cols->data() + ((b * Ho + oy) * Wo + ox) * patch;
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                        double* d = dst + (ky * kw + kx) * C;
                        if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(H) || ix >= static_cast<std::ptrdiff_t>(W)) {
                            std::fill_n(d, C, 0.0);
                        } else {
                            std::copy_n(xv.data() + ((b * H + iy) * W + ix) * C, C, d);
                        }
                    }
                }
            }

    Tensor out({B, Ho, Wo, Cout});
    gemm(false, false, npos, Cout, patch, 1.0, cols->data(), wv.data(), 0.0, out.data());
    const bool has_bias = static_cast<bool>(bias);
    if (has_bias) {
        if (bias.value().size() != Cout) throw ShapeError("conv2d: bias size mismatch");
        for (std::size_t p = 0; p < npos; ++p)
            for (std::size_t c = 0; c < Cout; ++c) out[p * Cout + c] += bias.value()[c];
    }

    std::vector<Var> inputs{x, weight};
    if (has_bias) inputs.push_back(bias);
    return make_op(std::move(out), std::move(inputs),
                   [=](Node& self) {
                       const Tensor& g = self.grad; // npos × Cout
                       if (wants(self, 1)) {
                           gemm(true, false, patch, Cout, npos, 1.0, cols->data(), g.data(), 1.0,
                                self.inputs[1]->grad_buffer().data());
                       }
                       if (has_bias && wants(self, 2)) {
                           Tensor& gb = self.inputs[2]->grad_buffer();
                           for (std::size_t p = 0; p < npos; ++p)
                               for (std::size_t c = 0; c < Cout; ++c) gb[c] += g[p * Cout + c];
                       }
                       if (wants(self, 0)) {
                           Tensor dcols({npos, patch});
                           gemm(false, true, npos, patch, Cout, 1.0, g.data(), self.inputs[1]->value.data(), 0.0,
                                dcols.data());
                           Tensor& gx = self.inputs[0]->grad_buffer();
                           for (std::size_t b = 0; b < B; ++b)
                               for (std::size_t oy = 0; oy < Ho; ++oy)
                                   for (std::size_t ox = 0; ox < Wo; ++ox) {
                                       const double* src = dcols.data() + ((b * Ho + oy) * Wo + ox) * patch;
                                       for (std::size_t ky = 0; ky < kh; ++ky) {
                                           const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                                                     static_cast<std::ptrdiff_t>(pad);
                                           if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                                           for (std::size_t kx = 0; kx < kw; ++kx) {
                                               const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                                         static_cast<std::ptrdiff_t>(pad);
                                               if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                                               double* d = gx.data() + ((b * H + iy) * W + ix) * C;
                                               const double* s = src + (ky * kw + kx) * C;
                                               for (std::size_t c = 0; c < C; ++c) d[c] += s[c];
                                           }
                                       }
                                   }
                       }
                   });
}

} // namespace keepfit::ag
