#include "iot/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace iot {

namespace {

Precision g_precision = Precision::f32;
thread_local bool g_grad_enabled = true;

void check_finite(const char* op, const Tensor& t) {
    const auto& d = t.data();
    for (size_t i = 0; i < d.size(); ++i) {
        if (!std::isfinite(d[i])) {
            fail(std::string(op) + ": non-finite value at flat index " + std::to_string(i));
        }
    }
}

void round_in_place(Tensor& t) {
    if (g_precision == Precision::f32) {
        for (double& v : t.data()) {
            v = static_cast<double>(static_cast<float>(v));
        }
    }
}

// Finishes an op: rounds to the active precision, rejects non-finite values,
// and wires the backward closure when recording is on.
Var make_node(const char* op, Tensor out, std::vector<Var> inputs,
              std::function<void(Node&)> backward_fn) {
    round_in_place(out);
    check_finite(op, out);
    auto node = std::make_shared<Node>();
    node->value = std::move(out);
    node->op = op;
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& in : inputs) {
            needs = needs || in.requires_grad();
        }
    }
    if (needs) {
        node->requires_grad = true;
        node->parents.reserve(inputs.size());
        for (const auto& in : inputs) {
            node->parents.push_back(in.node());
        }
        node->backward_fn = std::move(backward_fn);
    }
    return Var(std::move(node));
}

std::vector<double>* grad_target(const std::shared_ptr<Node>& n) {
    return n->requires_grad ? &n->grad_ref() : nullptr;
}

// b broadcast over a's leading axes: b.shape must equal a suffix of a.shape.
int64_t suffix_broadcast_len(const char* op, const Shape& a, const Shape& b) {
    if (b.size() > a.size()) {
        fail(std::string(op) + ": rhs rank exceeds lhs (" + shape_str(b) + " vs " + shape_str(a) + ")");
    }
    for (size_t i = 0; i < b.size(); ++i) {
        if (b[b.size() - 1 - i] != a[a.size() - 1 - i]) {
            fail(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                 " are not suffix-compatible");
        }
    }
    return shape_numel(b);
}

}  // namespace

Precision precision() { return g_precision; }
void set_precision(Precision p) { g_precision = p; }

double store_round(double v) {
    return g_precision == Precision::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        if (d <= 0) {
            fail("tensor: non-positive extent in shape " + shape_str(shape));
        }
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor Tensor::full(Shape shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data().begin(), t.data().end(), v);
    return t;
}

const Tensor& Var::value() const {
    if (!node_) fail("var: undefined");
    return node_->value;
}

double Var::scalar() const {
    if (numel() != 1) fail("var: scalar() on tensor of shape " + shape_str(shape()));
    return value()[0];
}

bool Var::requires_grad() const { return node_ && node_->requires_grad; }

std::vector<double> Var::grad() const {
    if (!node_) fail("var: undefined");
    if (node_->grad.empty()) {
        return std::vector<double>(static_cast<size_t>(numel()), 0.0);
    }
    return node_->grad;
}

void Var::zero_grad() {
    if (node_) node_->grad.clear();
}

const std::string& Var::name() const {
    static const std::string empty;
    return node_ ? node_->name : empty;
}

void Var::assign_value(const Tensor& t) {
    if (!node_ || !node_->leaf) fail("var: assign_value on non-leaf");
    if (t.shape() != node_->value.shape()) {
        fail("var: assign_value shape mismatch " + shape_str(t.shape()) + " vs " +
             shape_str(node_->value.shape()));
    }
    node_->value = t;
    round_in_place(node_->value);
    check_finite("assign_value", node_->value);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : saved_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = saved_; }

Var constant(Tensor t, std::string name) {
    round_in_place(t);
    check_finite("constant", t);
    auto node = std::make_shared<Node>();
    node->value = std::move(t);
    node->leaf = true;
    node->name = std::move(name);
    return Var(std::move(node));
}

Var parameter(Tensor t, std::string name) {
    Var v = constant(std::move(t), std::move(name));
    v.node()->requires_grad = true;
    return v;
}

void backward(const Var& loss) {
    if (!loss.defined()) fail("backward: undefined loss");
    auto root = loss.node();
    if (root->value.numel() != 1) {
        fail("backward: loss must be scalar, got shape " + shape_str(root->value.shape()));
    }
    if (!std::isfinite(root->value[0])) fail("backward: loss is non-finite");
    if (root->backward_consumed) {
        fail("backward: called twice on the same graph without reset");
    }
    root->backward_consumed = true;

    // Iterative post-order DFS; creation order is not tracked, the DAG is.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next_child] = stack.back();
        if (next_child < node->parents.size()) {
            Node* child = node->parents[next_child++].get();
            if (child->requires_grad && !visited.count(child)) {
                visited.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->grad_ref()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) {
            n->backward_fn(*n);
        }
    }
}

// ---- elementwise and structural ops -------------------------------------

Var add(const Var& a, const Var& b) {
    const Tensor& ta = a.value();
    const Tensor& tb = b.value();
    const int64_t bn = suffix_broadcast_len("add", ta.shape(), tb.shape());
    Tensor out(ta.shape());
    const int64_t n = ta.numel();
    for (int64_t i = 0; i < n; ++i) {
        out[i] = ta[i] + tb[i % bn];
    }
    return make_node("add", std::move(out), {a, b}, [a, b, bn, n](Node& self) {
        if (auto* ga = grad_target(a.node())) {
            for (int64_t i = 0; i < n; ++i) (*ga)[i] += self.grad[i];
        }
        if (auto* gb = grad_target(b.node())) {
            for (int64_t i = 0; i < n; ++i) (*gb)[i % bn] += self.grad[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    return add(a, scalar_mul(b, -1.0));
}

Var mul(const Var& a, const Var& b) {
    const Tensor& ta = a.value();
    const Tensor& tb = b.value();
    if (ta.shape() != tb.shape()) {
        fail("mul: shape mismatch " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
    }
    Tensor out(ta.shape());
    const int64_t n = ta.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = ta[i] * tb[i];
    return make_node("mul", std::move(out), {a, b}, [a, b, n](Node& self) {
        const auto& va = a.value().data();
        const auto& vb = b.value().data();
        if (auto* ga = grad_target(a.node())) {
            for (int64_t i = 0; i < n; ++i) (*ga)[i] += self.grad[i] * vb[i];
        }
        if (auto* gb = grad_target(b.node())) {
            for (int64_t i = 0; i < n; ++i) (*gb)[i] += self.grad[i] * va[i];
        }
    });
}

Var scalar_mul(const Var& a, double c) {
    const Tensor& ta = a.value();
    Tensor out(ta.shape());
    const int64_t n = ta.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = ta[i] * c;
    return make_node("scalar_mul", std::move(out), {a}, [a, c, n](Node& self) {
        if (auto* ga = grad_target(a.node())) {
            for (int64_t i = 0; i < n; ++i) (*ga)[i] += self.grad[i] * c;
        }
    });
}

Var add_scalar(const Var& a, double c) {
    const Tensor& ta = a.value();
    Tensor out(ta.shape());
    const int64_t n = ta.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = ta[i] + c;
    return make_node("add_scalar", std::move(out), {a}, [a, n](Node& self) {
        if (auto* ga = grad_target(a.node())) {
            for (int64_t i = 0; i < n; ++i) (*ga)[i] += self.grad[i];
        }
    });
}

Var mul_scalar_var(const Var& x, const Var& s) {
    if (s.numel() != 1) fail("mul_scalar_var: scale must have one element");
    const Tensor& tx = x.value();
    const double sv = s.value()[0];
    Tensor out(tx.shape());
    const int64_t n = tx.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = tx[i] * sv;
    return make_node("mul_scalar_var", std::move(out), {x, s}, [x, s, n](Node& self) {
        const double sv = s.value()[0];
        const auto& vx = x.value().data();
        if (auto* gx = grad_target(x.node())) {
            for (int64_t i = 0; i < n; ++i) (*gx)[i] += self.grad[i] * sv;
        }
        if (auto* gs = grad_target(s.node())) {
            double acc = 0.0;
            for (int64_t i = 0; i < n; ++i) acc += self.grad[i] * vx[i];
            (*gs)[0] += acc;
        }
    });
}

Var matmul(const Var& a, const Var& b) {
    const Tensor& ta = a.value();
    const Tensor& tb = b.value();
    if (ta.rank() < 2 || tb.rank() < 2) {
        fail("matmul: operands must have rank >= 2");
    }
    const int64_t m = ta.shape()[ta.rank() - 2];
    const int64_t k = ta.shape()[ta.rank() - 1];
    const int64_t kb = tb.shape()[tb.rank() - 2];
    const int64_t n = tb.shape()[tb.rank() - 1];
    if (k != kb) {
        fail("matmul: inner extents differ, " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
    }
    const bool b_batched = tb.rank() > 2;
    Shape lead(ta.shape().begin(), ta.shape().end() - 2);
    if (b_batched) {
        Shape lead_b(tb.shape().begin(), tb.shape().end() - 2);
        if (lead_b != lead) {
            fail("matmul: batch dims differ, " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
        }
    }
    int64_t batch = 1;
    for (int64_t d : lead) batch *= d;

    Shape out_shape = lead;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor out(std::move(out_shape));
    for (int64_t bt = 0; bt < batch; ++bt) {
        const double* pa = ta.data().data() + bt * m * k;
        const double* pb = tb.data().data() + (b_batched ? bt * k * n : 0);
        double* po = out.data().data() + bt * m * n;
        for (int64_t i = 0; i < m; ++i) {
            for (int64_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int64_t t = 0; t < k; ++t) acc += pa[i * k + t] * pb[t * n + j];
                po[i * n + j] = acc;
            }
        }
    }
    return make_node("matmul", std::move(out), {a, b},
                     [a, b, m, k, n, batch, b_batched](Node& self) {
        const auto& va = a.value().data();
        const auto& vb = b.value().data();
        const auto& g = self.grad;
        if (auto* ga = grad_target(a.node())) {
            // dA = dY * B^T
            for (int64_t bt = 0; bt < batch; ++bt) {
                const double* pg = g.data() + bt * m * n;
                const double* pb = vb.data() + (b_batched ? bt * k * n : 0);
                double* pa = ga->data() + bt * m * k;
                for (int64_t i = 0; i < m; ++i) {
                    for (int64_t t = 0; t < k; ++t) {
                        double acc = 0.0;
                        for (int64_t j = 0; j < n; ++j) acc += pg[i * n + j] * pb[t * n + j];
                        pa[i * k + t] += acc;
                    }
                }
            }
        }
        if (auto* gb = grad_target(b.node())) {
            // dB = A^T * dY, summed over the batch when B is unbatched.
            for (int64_t bt = 0; bt < batch; ++bt) {
                const double* pg = g.data() + bt * m * n;
                const double* pa = va.data() + bt * m * k;
                double* pb = gb->data() + (b_batched ? bt * k * n : 0);
                for (int64_t t = 0; t < k; ++t) {
                    for (int64_t j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (int64_t i = 0; i < m; ++i) acc += pa[i * k + t] * pg[i * n + j];
                        pb[t * n + j] += acc;
                    }
                }
            }
        }
    });
}

Var transpose_last2(const Var& a) {
    const Tensor& ta = a.value();
    if (ta.rank() < 2) fail("transpose: rank must be >= 2");
    const int64_t m = ta.shape()[ta.rank() - 2];
    const int64_t n = ta.shape()[ta.rank() - 1];
    Shape out_shape = ta.shape();
    std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
    const int64_t batch = ta.numel() / (m * n);
    Tensor out(std::move(out_shape));
    for (int64_t bt = 0; bt < batch; ++bt) {
        const double* p = ta.data().data() + bt * m * n;
        double* q = out.data().data() + bt * m * n;
        for (int64_t i = 0; i < m; ++i) {
            for (int64_t j = 0; j < n; ++j) q[j * m + i] = p[i * n + j];
        }
    }
    return make_node("transpose", std::move(out), {a}, [a, m, n, batch](Node& self) {
        if (auto* ga = grad_target(a.node())) {
            for (int64_t bt = 0; bt < batch; ++bt) {
                const double* pg = self.grad.data() + bt * m * n;
                double* pa = ga->data() + bt * m * n;
                for (int64_t i = 0; i < m; ++i) {
                    for (int64_t j = 0; j < n; ++j) pa[i * n + j] += pg[j * m + i];
                }
            }
        }
    });
}

Var reshape(const Var& a, Shape shape) {
    const Tensor& ta = a.value();
    if (shape_numel(shape) != ta.numel()) {
        fail("reshape: cannot view " + shape_str(ta.shape()) + " as " + shape_str(shape));
    }
    Tensor out(std::move(shape), ta.data());
    const int64_t n = ta.numel();
    return make_node("reshape", std::move(out), {a}, [a, n](Node& self) {
        if (auto* ga = grad_target(a.node())) {
            for (int64_t i = 0; i < n; ++i) (*ga)[i] += self.grad[i];
        }
    });
}

Var split_heads(const Var& x, int64_t heads) {
    const Tensor& tx = x.value();
    if (tx.rank() != 2) fail("split_heads: expected rank 2");
    const int64_t t = tx.shape()[0];
    const int64_t d = tx.shape()[1];
    if (heads <= 0 || d % heads != 0) {
        fail("split_heads: width " + std::to_string(d) + " not divisible by " + std::to_string(heads));
    }
    const int64_t dh = d / heads;
    Tensor out({heads, t, dh});
    for (int64_t h = 0; h < heads; ++h) {
        for (int64_t i = 0; i < t; ++i) {
            for (int64_t j = 0; j < dh; ++j) {
                out[(h * t + i) * dh + j] = tx[i * d + h * dh + j];
            }
        }
    }
    return make_node("split_heads", std::move(out), {x}, [x, heads, t, d, dh](Node& self) {
        if (auto* gx = grad_target(x.node())) {
            for (int64_t h = 0; h < heads; ++h) {
                for (int64_t i = 0; i < t; ++i) {
                    for (int64_t j = 0; j < dh; ++j) {
                        (*gx)[i * d + h * dh + j] += self.grad[(h * t + i) * dh + j];
                    }
                }
            }
        }
    });
}

Var merge_heads(const Var& x) {
    const Tensor& tx = x.value();
    if (tx.rank() != 3) fail("merge_heads: expected rank 3");
    const int64_t heads = tx.shape()[0];
    const int64_t t = tx.shape()[1];
    const int64_t dh = tx.shape()[2];
    const int64_t d = heads * dh;
    Tensor out({t, d});
    for (int64_t h = 0; h < heads; ++h) {
        for (int64_t i = 0; i < t; ++i) {
            for (int64_t j = 0; j < dh; ++j) {
                out[i * d + h * dh + j] = tx[(h * t + i) * dh + j];
            }
        }
    }
    return make_node("merge_heads", std::move(out), {x}, [x, heads, t, d, dh](Node& self) {
        if (auto* gx = grad_target(x.node())) {
            for (int64_t h = 0; h < heads; ++h) {
                for (int64_t i = 0; i < t; ++i) {
                    for (int64_t j = 0; j < dh; ++j) {
                        (*gx)[(h * t + i) * dh + j] += self.grad[i * d + h * dh + j];
                    }
                }
            }
        }
    });
}

Var sum_all(const Var& a) {
    const Tensor& ta = a.value();
    double acc = 0.0;
    for (double v : ta.data()) acc += v;
    const int64_t n = ta.numel();
    return make_node("sum", Tensor::scalar(acc), {a}, [a, n](Node& self) {
        if (auto* ga = grad_target(a.node())) {
            for (int64_t i = 0; i < n; ++i) (*ga)[i] += self.grad[0];
        }
    });
}

Var mean_axis(const Var& a, size_t axis) {
    const Tensor& ta = a.value();
    if (axis >= ta.rank()) fail("mean_axis: axis out of range");
    const int64_t len = ta.shape()[axis];
    int64_t outer = 1, inner = 1;
    for (size_t i = 0; i < axis; ++i) outer *= ta.shape()[i];
    for (size_t i = axis + 1; i < ta.rank(); ++i) inner *= ta.shape()[i];
    Shape out_shape;
    for (size_t i = 0; i < ta.rank(); ++i) {
        if (i != axis) out_shape.push_back(ta.shape()[i]);
    }
    if (out_shape.empty()) out_shape.push_back(1);
    Tensor out(std::move(out_shape));
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            double acc = 0.0;
            for (int64_t l = 0; l < len; ++l) acc += ta[(o * len + l) * inner + in];
            out[o * inner + in] = acc / static_cast<double>(len);
        }
    }
    return make_node("mean_axis", std::move(out), {a}, [a, len, outer, inner](Node& self) {
        if (auto* ga = grad_target(a.node())) {
            const double inv = 1.0 / static_cast<double>(len);
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t in = 0; in < inner; ++in) {
                    const double g = self.grad[o * inner + in] * inv;
                    for (int64_t l = 0; l < len; ++l) (*ga)[(o * len + l) * inner + in] += g;
                }
            }
        }
    });
}

Var index(const Var& v, int64_t i) {
    const Tensor& tv = v.value();
    if (tv.rank() != 1) fail("index: expected rank-1 input");
    if (i < 0 || i >= tv.numel()) {
        fail("index: position " + std::to_string(i) + " out of range " + shape_str(tv.shape()));
    }
    return make_node("index", Tensor::scalar(tv[i]), {v}, [v, i](Node& self) {
        if (auto* gv = grad_target(v.node())) {
            (*gv)[i] += self.grad[0];
        }
    });
}

Var concat(const std::vector<Var>& parts, size_t axis) {
    if (parts.empty()) fail("concat: empty input list");
    const Shape& base = parts[0].shape();
    if (axis >= base.size()) fail("concat: axis out of range");
    int64_t axis_total = 0;
    for (const Var& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != base.size()) fail("concat: rank mismatch");
        for (size_t i = 0; i < s.size(); ++i) {
            if (i != axis && s[i] != base[i]) {
                fail("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(base));
            }
        }
        axis_total += s[axis];
    }
    Shape out_shape = base;
    out_shape[axis] = axis_total;
    int64_t outer = 1, inner = 1;
    for (size_t i = 0; i < axis; ++i) outer *= base[i];
    for (size_t i = axis + 1; i < base.size(); ++i) inner *= base[i];
    Tensor out(out_shape);
    int64_t offset = 0;
    for (const Var& p : parts) {
        const Tensor& tp = p.value();
        const int64_t len = tp.shape()[axis];
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t l = 0; l < len; ++l) {
                for (int64_t in = 0; in < inner; ++in) {
                    out[(o * axis_total + offset + l) * inner + in] = tp[(o * len + l) * inner + in];
                }
            }
        }
        offset += len;
    }
    return make_node("concat", std::move(out), parts,
                     [parts, axis, axis_total, outer, inner](Node& self) {
        int64_t offset = 0;
        for (const Var& p : parts) {
            const int64_t len = p.shape()[axis];
            if (auto* gp = grad_target(p.node())) {
                for (int64_t o = 0; o < outer; ++o) {
                    for (int64_t l = 0; l < len; ++l) {
                        for (int64_t in = 0; in < inner; ++in) {
                            (*gp)[(o * len + l) * inner + in] +=
                                self.grad[(o * axis_total + offset + l) * inner + in];
                        }
                    }
                }
            }
            offset += len;
        }
    });
}

Var stack_rows(const std::vector<Var>& rows) {
    if (rows.empty()) fail("stack_rows: empty input list");
    std::vector<Var> reshaped;
    reshaped.reserve(rows.size());
    for (const Var& r : rows) {
        if (r.value().rank() != 1) fail("stack_rows: expected rank-1 rows");
        reshaped.push_back(reshape(r, {1, r.numel()}));
    }
    return concat(reshaped, 0);
}

Var softmax_lastdim(const Var& a) {
    const Tensor& ta = a.value();
    check_finite("softmax", ta);
    const int64_t k = ta.shape()[ta.rank() - 1];
    const int64_t slices = ta.numel() / k;
    Tensor out(ta.shape());
    for (int64_t s = 0; s < slices; ++s) {
        const double* p = ta.data().data() + s * k;
        double* q = out.data().data() + s * k;
        double mx = p[0];
        for (int64_t i = 1; i < k; ++i) mx = std::max(mx, p[i]);
        double sum = 0.0;
        for (int64_t i = 0; i < k; ++i) {
            q[i] = std::exp(p[i] - mx);
            sum += q[i];
        }
        for (int64_t i = 0; i < k; ++i) q[i] /= sum;
    }
    return make_node("softmax", std::move(out), {a}, [a, k, slices](Node& self) {
        if (auto* ga = grad_target(a.node())) {
            const auto& y = self.value.data();
            for (int64_t s = 0; s < slices; ++s) {
                const double* py = y.data() + s * k;
                const double* pg = self.grad.data() + s * k;
                double dot = 0.0;
                for (int64_t i = 0; i < k; ++i) dot += pg[i] * py[i];
                double* pa = ga->data() + s * k;
                for (int64_t i = 0; i < k; ++i) pa[i] += py[i] * (pg[i] - dot);
            }
        }
    });
}

Var log_elem(const Var& a) {
    const Tensor& ta = a.value();
    Tensor out(ta.shape());
    const int64_t n = ta.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = std::log(ta[i]);
    return make_node("log", std::move(out), {a}, [a, n](Node& self) {
        if (auto* ga = grad_target(a.node())) {
            const auto& va = a.value().data();
            for (int64_t i = 0; i < n; ++i) (*ga)[i] += self.grad[i] / va[i];
        }
    });
}

Var exp_elem(const Var& a) {
    const Tensor& ta = a.value();
    Tensor out(ta.shape());
    const int64_t n = ta.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = std::exp(ta[i]);
    return make_node("exp", std::move(out), {a}, [a, n](Node& self) {
        if (auto* ga = grad_target(a.node())) {
            const auto& y = self.value.data();
            for (int64_t i = 0; i < n; ++i) (*ga)[i] += self.grad[i] * y[i];
        }
    });
}

Var reciprocal(const Var& a) {
    const Tensor& ta = a.value();
    Tensor out(ta.shape());
    const int64_t n = ta.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = 1.0 / ta[i];
    return make_node("reciprocal", std::move(out), {a}, [a, n](Node& self) {
        if (auto* ga = grad_target(a.node())) {
            const auto& va = a.value().data();
            for (int64_t i = 0; i < n; ++i) (*ga)[i] -= self.grad[i] / (va[i] * va[i]);
        }
    });
}

Var relu(const Var& a) {
    const Tensor& ta = a.value();
    Tensor out(ta.shape());
    const int64_t n = ta.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = ta[i] > 0.0 ? ta[i] : 0.0;
    return make_node("relu", std::move(out), {a}, [a, n](Node& self) {
        if (auto* ga = grad_target(a.node())) {
            const auto& va = a.value().data();
            for (int64_t i = 0; i < n; ++i) {
                if (va[i] > 0.0) (*ga)[i] += self.grad[i];
            }
        }
    });
}

Var clamp_min(const Var& a, double floor) {
    const Tensor& ta = a.value();
    Tensor out(ta.shape());
    const int64_t n = ta.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = std::max(ta[i], floor);
    // Subgradient: pass-through strictly above the floor, zero at or below it.
    return make_node("clamp_min", std::move(out), {a}, [a, floor, n](Node& self) {
        if (auto* ga = grad_target(a.node())) {
            const auto& va = a.value().data();
            for (int64_t i = 0; i < n; ++i) {
                if (va[i] > floor) (*ga)[i] += self.grad[i];
            }
        }
    });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
    const Tensor& tx = x.value();
    const int64_t d = tx.shape()[tx.rank() - 1];
    if (gain.numel() != d || bias.numel() != d) {
        fail("layer_norm: gain/bias must have " + std::to_string(d) + " elements");
    }
    const int64_t slices = tx.numel() / d;
    Tensor out(tx.shape());
    std::vector<double> mus(slices), sigmas(slices);
    const auto& g = gain.value().data();
    const auto& b = bias.value().data();
    for (int64_t s = 0; s < slices; ++s) {
        const double* p = tx.data().data() + s * d;
        double mu = 0.0;
        for (int64_t i = 0; i < d; ++i) mu += p[i];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t i = 0; i < d; ++i) var += (p[i] - mu) * (p[i] - mu);
        var /= static_cast<double>(d);
        const double sigma = std::sqrt(var + eps);
        mus[s] = mu;
        sigmas[s] = sigma;
        double* q = out.data().data() + s * d;
        for (int64_t i = 0; i < d; ++i) q[i] = g[i] * ((p[i] - mu) / sigma) + b[i];
    }
    return make_node("layer_norm", std::move(out), {x, gain, bias},
                     [x, gain, bias, d, slices, mus = std::move(mus),
                      sigmas = std::move(sigmas)](Node& self) {
        const auto& vx = x.value().data();
        const auto& vg = gain.value().data();
        auto* gx = grad_target(x.node());
        auto* gg = grad_target(gain.node());
        auto* gb = grad_target(bias.node());
        const double dd = static_cast<double>(d);
        for (int64_t s = 0; s < slices; ++s) {
            const double* px = vx.data() + s * d;
            const double* pg = self.grad.data() + s * d;
            const double mu = mus[s];
            const double sigma = sigmas[s];
            if (gg || gb) {
                for (int64_t i = 0; i < d; ++i) {
                    const double xhat = (px[i] - mu) / sigma;
                    if (gg) (*gg)[i] += pg[i] * xhat;
                    if (gb) (*gb)[i] += pg[i];
                }
            }
            if (gx) {
                // dxhat = dy * g; dx folds the mean and variance paths.
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (int64_t i = 0; i < d; ++i) {
                    const double xhat = (px[i] - mu) / sigma;
                    const double dxhat = pg[i] * vg[i];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                double* qx = gx->data() + s * d;
                for (int64_t i = 0; i < d; ++i) {
                    const double xhat = (px[i] - mu) / sigma;
                    const double dxhat = pg[i] * vg[i];
                    qx[i] += (dxhat - sum_dxhat / dd - xhat * sum_dxhat_xhat / dd) / sigma;
                }
            }
        }
    });
}

Var embedding(const Var& table, const std::vector<int64_t>& ids) {
    const Tensor& tt = table.value();
    if (tt.rank() != 2) fail("embedding: table must be rank 2");
    const int64_t v = tt.shape()[0];
    const int64_t d = tt.shape()[1];
    const int64_t t = static_cast<int64_t>(ids.size());
    if (t == 0) fail("embedding: empty id list");
    for (int64_t i = 0; i < t; ++i) {
        if (ids[i] < 0 || ids[i] >= v) {
            fail("embedding: id " + std::to_string(ids[i]) + " out of vocabulary " + std::to_string(v));
        }
    }
    Tensor out({t, d});
    for (int64_t i = 0; i < t; ++i) {
        const double* p = tt.data().data() + ids[i] * d;
        std::copy(p, p + d, out.data().data() + i * d);
    }
    return make_node("embedding", std::move(out), {table}, [table, ids, d, t](Node& self) {
        if (auto* gt = grad_target(table.node())) {
            for (int64_t i = 0; i < t; ++i) {
                double* q = gt->data() + ids[i] * d;
                const double* pg = self.grad.data() + i * d;
                for (int64_t j = 0; j < d; ++j) q[j] += pg[j];
            }
        }
    });
}

Var masked_fill(const Var& x, const Var& mask, double value) {
    const Tensor& tx = x.value();
    const Tensor& tm = mask.value();
    const int64_t bn = suffix_broadcast_len("masked_fill", tx.shape(), tm.shape());
    Tensor out(tx.shape());
    const int64_t n = tx.numel();
    for (int64_t i = 0; i < n; ++i) {
        out[i] = tx[i] + value * tm[i % bn];
    }
    // Additive constant mask: gradient passes straight through to x.
    return make_node("masked_fill", std::move(out), {x, mask}, [x, n](Node& self) {
        if (auto* gx = grad_target(x.node())) {
            for (int64_t i = 0; i < n; ++i) (*gx)[i] += self.grad[i];
        }
    });
}

Var dropout(const Var& x, double p, RngStream stream) {
    if (p < 0.0 || p >= 1.0) fail("dropout: rate must be in [0, 1)");
    if (p == 0.0) return x;
    const Tensor& tx = x.value();
    const int64_t n = tx.numel();
    auto keep = std::make_shared<std::vector<uint8_t>>(n);
    const double scale = 1.0 / (1.0 - p);
    Tensor out(tx.shape());
    for (int64_t i = 0; i < n; ++i) {
        const bool k = stream.next_unit_open() >= p;
        (*keep)[i] = k;
        out[i] = k ? tx[i] * scale : 0.0;
    }
    return make_node("dropout", std::move(out), {x}, [x, keep, scale, n](Node& self) {
        if (auto* gx = grad_target(x.node())) {
            for (int64_t i = 0; i < n; ++i) {
                if ((*keep)[i]) (*gx)[i] += self.grad[i] * scale;
            }
        }
    });
}

Var masked_mean_rows(const Var& x, const Var& mask) {
    const Tensor& tx = x.value();
    const Tensor& tm = mask.value();
    if (tx.rank() != 2 || tm.rank() != 1 || tm.numel() != tx.shape()[0]) {
        fail("masked_mean_rows: expected x [T, d] and mask [T]");
    }
    const int64_t t = tx.shape()[0];
    const int64_t d = tx.shape()[1];
    double count = 0.0;
    for (int64_t i = 0; i < t; ++i) count += tm[i];
    if (count <= 0.0) fail("masked_mean_rows: all positions padded");
    Tensor out({d});
    for (int64_t i = 0; i < t; ++i) {
        if (tm[i] == 0.0) continue;
        for (int64_t j = 0; j < d; ++j) out[j] += tx[i * d + j] * tm[i];
    }
    for (int64_t j = 0; j < d; ++j) out[j] /= count;
    return make_node("masked_mean_rows", std::move(out), {x, mask},
                     [x, mask, t, d, count](Node& self) {
        if (auto* gx = grad_target(x.node())) {
            const auto& vm = mask.value().data();
            for (int64_t i = 0; i < t; ++i) {
                if (vm[i] == 0.0) continue;
                const double w = vm[i] / count;
                for (int64_t j = 0; j < d; ++j) (*gx)[i * d + j] += self.grad[j] * w;
            }
        }
    });
}

Var cross_entropy_ls(const Var& logits, const std::vector<int64_t>& targets, double eps,
                     int64_t pad_id) {
    const Tensor& tz = logits.value();
    check_finite("cross_entropy", tz);
    if (tz.rank() != 2) fail("cross_entropy: logits must be [T, V]");
    const int64_t t = tz.shape()[0];
    const int64_t v = tz.shape()[1];
    if (static_cast<int64_t>(targets.size()) != t) {
        fail("cross_entropy: target length mismatch");
    }
    int64_t valid = 0;
    for (int64_t i = 0; i < t; ++i) {
        if (targets[i] == pad_id) continue;
        if (targets[i] < 0 || targets[i] >= v) {
            fail("cross_entropy: target " + std::to_string(targets[i]) + " out of vocabulary");
        }
        ++valid;
    }
    if (valid == 0) fail("cross_entropy: empty target");

    double total = 0.0;
    for (int64_t i = 0; i < t; ++i) {
        if (targets[i] == pad_id) continue;
        const double* p = tz.data().data() + i * v;
        double mx = p[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, p[j]);
        double sum = 0.0, mean_z = 0.0;
        for (int64_t j = 0; j < v; ++j) {
            sum += std::exp(p[j] - mx);
            mean_z += p[j];
        }
        mean_z /= static_cast<double>(v);
        const double lse = mx + std::log(sum);
        total += lse - (1.0 - eps) * p[targets[i]] - eps * mean_z;
    }
    total /= static_cast<double>(valid);
    return make_node("cross_entropy", Tensor::scalar(total), {logits},
                     [logits, targets, eps, pad_id, t, v, valid](Node& self) {
        if (auto* gz = grad_target(logits.node())) {
            const auto& z = logits.value().data();
            const double up = self.grad[0] / static_cast<double>(valid);
            for (int64_t i = 0; i < t; ++i) {
                if (targets[i] == pad_id) continue;
                const double* p = z.data() + i * v;
                double mx = p[0];
                for (int64_t j = 1; j < v; ++j) mx = std::max(mx, p[j]);
                double sum = 0.0;
                for (int64_t j = 0; j < v; ++j) sum += std::exp(p[j] - mx);
                double* q = gz->data() + i * v;
                for (int64_t j = 0; j < v; ++j) {
                    const double softmax = std::exp(p[j] - mx) / sum;
                    double target_q = eps / static_cast<double>(v);
                    if (j == targets[i]) target_q += 1.0 - eps;
                    q[j] += up * (softmax - target_q);
                }
            }
        }
    });
}

}  // namespace iot
