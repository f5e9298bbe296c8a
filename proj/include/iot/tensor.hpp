#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "iot/error.hpp"
#include "iot/rng.hpp"

namespace iot {

// Numeric mode. f32 is the training default: every op output is rounded to
// the nearest float before use, so values match a single-precision pipeline.
// f64 exists for gradient tests only.
enum class Precision { f32, f64 };

Precision precision();
void set_precision(Precision p);

double store_round(double v);

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major value. Data is always held as double; in f32 mode every
// element is exactly representable as float (ops round on write).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape)
        : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), 0.0) {}
    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != static_cast<int64_t>(data_.size())) {
            fail("tensor: shape " + shape_str(shape_) + " does not match data length " +
                 std::to_string(data_.size()));
        }
    }

    static Tensor full(Shape shape, double v);
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    const Shape& shape() const { return shape_; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    int64_t dim(size_t i) const { return shape_[i]; }
    size_t rank() const { return shape_.size(); }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }
    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

private:
    Shape shape_;
    std::vector<double> data_;
};

struct Node;

// Handle onto a graph node. Copies share the node; the graph stays alive as
// long as some Var (typically the loss) still references it.
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    int64_t numel() const { return value().numel(); }
    double scalar() const;

    bool requires_grad() const;
    // Gradient of the most recent backward pass; zeros if this node did not
    // participate.
    std::vector<double> grad() const;
    void zero_grad();
    const std::string& name() const;

    // Leaf parameters only: overwrite the stored value between steps.
    void assign_value(const Tensor& t);

    std::shared_ptr<Node> node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

struct Node {
    Tensor value;
    std::vector<double> grad;  // empty until touched by backward
    bool requires_grad = false;
    bool leaf = false;
    bool backward_consumed = false;  // set on loss nodes once backward ran
    const char* op = "leaf";
    std::string name;
    std::vector<std::shared_ptr<Node>> parents;
    // Accumulates into parents' grads given this node's grad.
    std::function<void(Node&)> backward_fn;

    std::vector<double>& grad_ref() {
        if (grad.empty()) {
            grad.assign(static_cast<size_t>(value.numel()), 0.0);
        }
        return grad;
    }
};

// Graph recording can be disabled (inference); ops then skip parent links and
// backward closures.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool saved_;
};

// Leaf constructors. Both validate finiteness; parameters participate in
// gradients, constants never do.
Var constant(Tensor t, std::string name = "");
Var parameter(Tensor t, std::string name);

// Reverse-mode sweep from a scalar loss. Visits each reachable node exactly
// once in reverse topological order. A second call on the same loss without
// rebuilding the graph is an error.
void backward(const Var& loss);

// ---- differentiable ops ------------------------------------------------

// b's shape must equal a's shape or a trailing suffix of it (leading-batch
// expansion only; no general broadcasting).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // same shape
Var scalar_mul(const Var& a, double c);
Var add_scalar(const Var& a, double c);
// x scaled by a scalar (shape [1]) graph value.
Var mul_scalar_var(const Var& x, const Var& s);

// a: [..., m, k]; b: [..., k, n] with identical leading dims, or [k, n].
Var matmul(const Var& a, const Var& b);
Var transpose_last2(const Var& a);
Var reshape(const Var& a, Shape shape);

// [T, H*dh] -> [H, T, dh] and back.
Var split_heads(const Var& x, int64_t heads);
Var merge_heads(const Var& x);

Var sum_all(const Var& a);               // -> [1]
Var mean_axis(const Var& a, size_t axis);
Var index(const Var& v, int64_t i);      // rank-1 -> [1]
Var concat(const std::vector<Var>& parts, size_t axis);
Var stack_rows(const std::vector<Var>& rows);  // k tensors [n] -> [k, n]

Var softmax_lastdim(const Var& a);
Var log_elem(const Var& a);
Var exp_elem(const Var& a);
Var reciprocal(const Var& a);
Var relu(const Var& a);
Var clamp_min(const Var& a, double floor);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);

Var embedding(const Var& table, const std::vector<int64_t>& ids);
// out = x + value * mask; mask is a 0/1 constant, suffix-broadcast like add.
Var masked_fill(const Var& x, const Var& mask, double value = -1e9);
// Train-only inverted dropout; caller owns the stream. p == 0 is identity.
Var dropout(const Var& x, double p, RngStream stream);
// Mean of masked rows: x [T, d], mask [T] -> [d].
Var masked_mean_rows(const Var& x, const Var& mask);

// Label-smoothed token cross entropy, mean over non-pad positions:
// (1-eps) * NLL(target) + eps * mean_v NLL(v).
Var cross_entropy_ls(const Var& logits, const std::vector<int64_t>& targets, double eps,
                     int64_t pad_id);

}  // namespace iot
