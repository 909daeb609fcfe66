#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "spatialgeo/rng.hpp"

namespace spatialgeo {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty == absent
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(Node&)> backward_fn;
};

}  // namespace detail

// Dense row-major float64 tensor with reverse-mode autodiff.
//
// A Tensor is a shared handle: copies alias the same storage. Ops record a
// backward closure only when grad mode is on and some input requires grad.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);
    static Tensor eye(std::size_t n, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim() const { return shape().size(); }
    std::size_t numel() const;
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> data() const;
    // Direct write access; only for leaves (parameters, inputs). Never
    // mutate a tensor that has already been consumed by a recorded op.
    std::span<double> mutable_data();
    double item() const;
    double at(std::size_t r, std::size_t c) const;

    bool requires_grad() const;
    void set_requires_grad(bool on);
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    // Allocates (or resets) the grad buffer to zeros.
    void zero_grad();
    void clear_grad();

    // Populates grad on every reachable tensor that requires grad.
    // The tensor must hold a single element.
    void backward() const;

    // Same values, fresh storage, no graph.
    Tensor detach() const;

    detail::Node* node() const { return node_.get(); }
    const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// ---- ops -----------------------------------------------------------------
// 2-D ops take [rows x cols] tensors; biases and gains are 1-D [cols].

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_bias(const Tensor& x, const Tensor& bias);
Tensor transpose(const Tensor& a);

// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& x);
double gelu_value(double x);
Tensor tanh(const Tensor& x);

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
// out[i] = a[indices[i]]; gradients scatter-add back.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> indices);
// Rows with keep[i] == false become exact zeros and pass no gradient.
Tensor mask_rows(const Tensor& a, const std::vector<bool>& keep);

// Row softmax where entry (i, j) is masked out for j > i.
Tensor causal_softmax(const Tensor& scores);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Mean over rows of -log softmax(logits)[target].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// ---- gradient checking -----------------------------------------------------

using ScalarFn = std::function<Tensor(const Tensor&)>;

// Max over coordinates of |analytic - central difference| / (|analytic| + 1e-8).
double finite_difference_check(const ScalarFn& f, const Tensor& x, double h = 1e-5);

}  // namespace spatialgeo
