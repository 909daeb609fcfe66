#include "spatialgeo/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "spatialgeo/errors.hpp"

namespace spatialgeo {

using detail::Node;

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

std::shared_ptr<Node> make_node(Shape shape, std::vector<double> data) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    return n;
}

void ensure_grad(Node& n) {
    if (n.grad.size() != n.data.size()) n.grad.assign(n.data.size(), 0.0);
}

void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v) {
        if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite value produced");
    }
}

// Wraps the result of an op, attaching the graph only when needed.
Tensor finish(const char* op, Shape shape, std::vector<double> data,
              std::vector<std::shared_ptr<Node>> parents,
              std::function<void(Node&)> backward) {
    check_finite(data, op);
    auto out = make_node(std::move(shape), std::move(data));
    if (g_grad_enabled) {
        bool any = false;
        for (const auto& p : parents) any = any || p->requires_grad;
        if (any) {
            out->requires_grad = true;
            out->parents = std::move(parents);
            out->backward_fn = std::move(backward);
        }
    }
    return Tensor(std::move(out));
}

const Node& node_of(const Tensor& t, const char* op) {
    if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
    return *t.node();
}

void require_2d(const Tensor& t, const char* op) {
    if (node_of(t, op).shape.size() != 2) {
        throw DimensionError(std::string(op) + ": expected 2-D tensor, got " + shape_str(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (node_of(a, op).shape != node_of(b, op).shape) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---- construction ------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = shape_numel(shape);
    auto node = make_node(std::move(shape), std::vector<double>(n, value));
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("Tensor::from: " + std::to_string(values.size()) + " values for shape " +
                             shape_str(shape));
    }
    check_finite(values, "Tensor::from");
    auto node = make_node(std::move(shape), std::move(values));
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({1}, {v}, requires_grad); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.normal() * stddev;
    return from(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::eye(std::size_t n, bool requires_grad) {
    auto t = zeros({n, n}, requires_grad);
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
    return t;
}

const Shape& Tensor::shape() const { return node_of(*this, "shape").shape; }
std::size_t Tensor::numel() const { return node_of(*this, "numel").data.size(); }

std::size_t Tensor::rows() const {
    require_2d(*this, "rows");
    return node_->shape[0];
}

std::size_t Tensor::cols() const {
    require_2d(*this, "cols");
    return node_->shape[1];
}

std::span<const double> Tensor::data() const { return node_of(*this, "data").data; }
std::span<double> Tensor::mutable_data() {
    node_of(*this, "mutable_data");
    return node_->data;
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item: tensor has " + std::to_string(numel()) + " elements");
    return node_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
    const auto cs = cols();
    if (r >= rows() || c >= cs) throw IndexError("at: index out of range");
    return node_->data[r * cs + c];
}

bool Tensor::requires_grad() const { return node_of(*this, "requires_grad").requires_grad; }
void Tensor::set_requires_grad(bool on) {
    node_of(*this, "set_requires_grad");
    node_->requires_grad = on;
}

bool Tensor::has_grad() const {
    const auto& n = node_of(*this, "has_grad");
    return !n.grad.empty() || n.data.empty();
}

std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw ContractError("grad: no gradient buffer");
    return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
    if (!has_grad()) throw ContractError("grad: no gradient buffer");
    return node_->grad;
}

void Tensor::zero_grad() {
    node_of(*this, "zero_grad");
    node_->grad.assign(node_->data.size(), 0.0);
}

void Tensor::clear_grad() {
    node_of(*this, "clear_grad");
    node_->grad.clear();
}

Tensor Tensor::detach() const { return from(shape(), node_of(*this, "detach").data, false); }

void Tensor::backward() const {
    const auto& root = node_of(*this, "backward");
    if (root.data.size() != 1) throw ContractError("backward: loss must be a scalar, got " + shape_str(root.shape));
    if (!root.requires_grad) throw ContractError("backward: loss does not depend on any tracked tensor");

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    // Interior gradients are rebuilt per call; leaves accumulate.
    for (Node* n : order) {
        if (n->backward_fn) n->grad.assign(n->data.size(), 0.0);
    }
    ensure_grad(*node_);
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (!n->backward_fn) continue;
        for (auto& p : n->parents) {
            if (p->requires_grad) ensure_grad(*p);
        }
        n->backward_fn(*n);
    }
}

// ---- linear algebra ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " * " +
                             shape_str(b.shape()));
    }
    const auto& A = a.node()->data;
    const auto& B = b.node()->data;
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double* o = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            if (av == 0.0) continue;
            const double* br = B.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
        }
    }
    auto pa = a.node_ptr(), pb = b.node_ptr();
    return finish("matmul", {m, n}, std::move(out), {pa, pb}, [pa, pb, m, k, n](Node& self) {
        const auto& G = self.grad;
        if (pa->requires_grad) {
            // dA = G * B^T
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    const double* br = pb->data.data() + p * n;
                    const double* gr = G.data() + i * n;
                    for (std::size_t j = 0; j < n; ++j) s += gr[j] * br[j];
                    pa->grad[i * k + p] += s;
                }
            }
        }
        if (pb->requires_grad) {
            // dB = A^T * G
            for (std::size_t i = 0; i < m; ++i) {
                const double* gr = G.data() + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = pa->data[i * k + p];
                    if (av == 0.0) continue;
                    double* dbr = pb->grad.data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) dbr[j] += av * gr[j];
                }
            }
        }
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    const auto& A = a.node()->data;
    const auto& B = b.node()->data;
    std::vector<double> out(A.size());
    for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] + B[i];
    auto pa = a.node_ptr(), pb = b.node_ptr();
    return finish("add", a.shape(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
        for (auto* p : {pa.get(), pb.get()}) {
            if (!p->requires_grad) continue;
            for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    const auto& A = a.node()->data;
    const auto& B = b.node()->data;
    std::vector<double> out(A.size());
    for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] - B[i];
    auto pa = a.node_ptr(), pb = b.node_ptr();
    return finish("sub", a.shape(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
        if (pa->requires_grad) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    const auto& A = a.node()->data;
    const auto& B = b.node()->data;
    std::vector<double> out(A.size());
    for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] * B[i];
    auto pa = a.node_ptr(), pb = b.node_ptr();
    return finish("mul", a.shape(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
        if (pa->requires_grad) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->data[i];
        }
        if (pb->requires_grad) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->data[i];
        }
    });
}

Tensor scale(const Tensor& a, double s) {
    const auto& A = node_of(a, "scale").data;
    std::vector<double> out(A.size());
    for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i] * s;
    auto pa = a.node_ptr();
    return finish("scale", a.shape(), std::move(out), {pa}, [pa, s](Node& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * s;
    });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    require_2d(x, "add_bias");
    const std::size_t m = x.rows(), n = x.cols();
    if (node_of(bias, "add_bias").data.size() != n || bias.dim() != 1) {
        throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
    }
    const auto& X = x.node()->data;
    const auto& B = bias.node()->data;
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = X[i * n + j] + B[j];
    }
    auto px = x.node_ptr(), pb = bias.node_ptr();
    return finish("add_bias", {m, n}, std::move(out), {px, pb}, [px, pb, m, n](Node& self) {
        if (px->requires_grad) {
            for (std::size_t i = 0; i < m * n; ++i) px->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) pb->grad[j] += self.grad[i * n + j];
            }
        }
    });
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    const auto& A = a.node()->data;
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
    }
    auto pa = a.node_ptr();
    return finish("transpose", {n, m}, std::move(out), {pa}, [pa, m, n](Node& self) {
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) pa->grad[i * n + j] += self.grad[j * m + i];
        }
    });
}

// ---- elementwise nonlinearities ----------------------------------------------------

namespace {
constexpr double kGeluC = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);
}  // namespace

double gelu_value(double x) {
    return 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + kGeluC * x * x * x)));
}

Tensor gelu(const Tensor& x) {
    const auto& X = node_of(x, "gelu").data;
    std::vector<double> out(X.size());
    for (std::size_t i = 0; i < X.size(); ++i) out[i] = gelu_value(X[i]);
    auto px = x.node_ptr();
    return finish("gelu", x.shape(), std::move(out), {px}, [px](Node& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double v = px->data[i];
            const double u = kSqrt2OverPi * (v + kGeluC * v * v * v);
            const double t = std::tanh(u);
            const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluC * v * v);
            const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
            px->grad[i] += self.grad[i] * d;
        }
    });
}

Tensor tanh(const Tensor& x) {
    const auto& X = node_of(x, "tanh").data;
    std::vector<double> out(X.size());
    for (std::size_t i = 0; i < X.size(); ++i) out[i] = std::tanh(X[i]);
    auto px = x.node_ptr();
    return finish("tanh", x.shape(), std::move(out), {px}, [px](Node& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double t = self.data[i];
            px->grad[i] += self.grad[i] * (1.0 - t * t);
        }
    });
}

// ---- structural ops -------------------------------------------------------------------

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
    require_2d(a, "slice_rows");
    const std::size_t m = a.rows(), n = a.cols();
    if (start + count > m) throw IndexError("slice_rows: range exceeds " + shape_str(a.shape()));
    const auto& A = a.node()->data;
    std::vector<double> out(A.begin() + static_cast<std::ptrdiff_t>(start * n),
                            A.begin() + static_cast<std::ptrdiff_t>((start + count) * n));
    auto pa = a.node_ptr();
    return finish("slice_rows", {count, n}, std::move(out), {pa}, [pa, start, n](Node& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[start * n + i] += self.grad[i];
    });
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
    require_2d(a, "slice_cols");
    const std::size_t m = a.rows(), n = a.cols();
    if (start + count > n) throw IndexError("slice_cols: range exceeds " + shape_str(a.shape()));
    const auto& A = a.node()->data;
    std::vector<double> out(m * count);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < count; ++j) out[i * count + j] = A[i * n + start + j];
    }
    auto pa = a.node_ptr();
    return finish("slice_cols", {m, count}, std::move(out), {pa}, [pa, m, n, start, count](Node& self) {
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < count; ++j) pa->grad[i * n + start + j] += self.grad[i * count + j];
        }
    });
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    const std::size_t n = parts[0].cols();
    std::size_t m = 0;
    std::vector<std::shared_ptr<Node>> nodes;
    for (const auto& p : parts) {
        if (p.cols() != n) throw DimensionError("concat_rows: column mismatch");
        m += p.rows();
        nodes.push_back(p.node_ptr());
    }
    std::vector<double> out;
    out.reserve(m * n);
    for (const auto& p : parts) out.insert(out.end(), p.node()->data.begin(), p.node()->data.end());
    return finish("concat_rows", {m, n}, std::move(out), nodes, [nodes](Node& self) {
        std::size_t off = 0;
        for (const auto& p : nodes) {
            if (p->requires_grad) {
                for (std::size_t i = 0; i < p->data.size(); ++i) p->grad[i] += self.grad[off + i];
            }
            off += p->data.size();
        }
    });
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::size_t m = parts[0].rows();
    std::size_t n = 0;
    std::vector<std::shared_ptr<Node>> nodes;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        if (p.rows() != m) throw DimensionError("concat_cols: row mismatch");
        n += p.cols();
        widths.push_back(p.cols());
        nodes.push_back(p.node_ptr());
    }
    std::vector<double> out(m * n);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& src = nodes[k]->data;
        for (std::size_t i = 0; i < m; ++i) {
            std::copy_n(src.data() + i * widths[k], widths[k], out.data() + i * n + off);
        }
        off += widths[k];
    }
    return finish("concat_cols", {m, n}, std::move(out), nodes, [nodes, widths, m, n](Node& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < nodes.size(); ++k) {
            auto& p = *nodes[k];
            if (p.requires_grad) {
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < widths[k]; ++j) p.grad[i * widths[k] + j] += self.grad[i * n + off + j];
                }
            }
            off += widths[k];
        }
    });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> indices) {
    require_2d(a, "gather_rows");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    std::vector<double> out(idx.size() * n);
    const auto& A = a.node()->data;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= m) {
            throw IndexError("gather_rows: index " + std::to_string(idx[i]) + " out of range for " +
                             std::to_string(m) + " rows");
        }
        std::copy_n(A.data() + idx[i] * n, n, out.data() + i * n);
    }
    auto pa = a.node_ptr();
    const std::size_t rows = idx.size();
    return finish("gather_rows", {rows, n}, std::move(out), {pa}, [pa, idx = std::move(idx), n](Node& self) {
        for (std::size_t i = 0; i < idx.size(); ++i) {
            for (std::size_t j = 0; j < n; ++j) pa->grad[idx[i] * n + j] += self.grad[i * n + j];
        }
    });
}

Tensor mask_rows(const Tensor& a, const std::vector<bool>& keep) {
    require_2d(a, "mask_rows");
    const std::size_t m = a.rows(), n = a.cols();
    if (keep.size() != m) throw DimensionError("mask_rows: mask length does not match row count");
    std::vector<double> out(a.node()->data);
    for (std::size_t i = 0; i < m; ++i) {
        if (!keep[i]) std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(i * n), n, 0.0);
    }
    auto pa = a.node_ptr();
    return finish("mask_rows", {m, n}, std::move(out), {pa}, [pa, keep, m, n](Node& self) {
        for (std::size_t i = 0; i < m; ++i) {
            if (!keep[i]) continue;
            for (std::size_t j = 0; j < n; ++j) pa->grad[i * n + j] += self.grad[i * n + j];
        }
    });
}

// ---- normalization / attention ---------------------------------------------------------

Tensor causal_softmax(const Tensor& scores) {
    require_2d(scores, "causal_softmax");
    const std::size_t m = scores.rows(), n = scores.cols();
    const auto& S = scores.node()->data;
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t lim = std::min(n, i + 1);
        double mx = S[i * n];
        for (std::size_t j = 1; j < lim; ++j) mx = std::max(mx, S[i * n + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < lim; ++j) {
            out[i * n + j] = std::exp(S[i * n + j] - mx);
            z += out[i * n + j];
        }
        for (std::size_t j = 0; j < lim; ++j) out[i * n + j] /= z;
    }
    auto ps = scores.node_ptr();
    return finish("causal_softmax", {m, n}, std::move(out), {ps}, [ps, m, n](Node& self) {
        for (std::size_t i = 0; i < m; ++i) {
            const std::size_t lim = std::min(n, i + 1);
            double dot = 0.0;
            for (std::size_t j = 0; j < lim; ++j) dot += self.grad[i * n + j] * self.data[i * n + j];
            for (std::size_t j = 0; j < lim; ++j) {
                ps->grad[i * n + j] += self.data[i * n + j] * (self.grad[i * n + j] - dot);
            }
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require_2d(x, "layer_norm");
    const std::size_t m = x.rows(), n = x.cols();
    if (gain.numel() != n || bias.numel() != n) throw DimensionError("layer_norm: gain/bias width mismatch");
    const auto& X = x.node()->data;
    const auto& G = gain.node()->data;
    const auto& B = bias.node()->data;
    std::vector<double> out(m * n), xhat(m * n), rstd(m);
    for (std::size_t i = 0; i < m; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += X[i * n + j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (X[i * n + j] - mu) * (X[i * n + j] - mu);
        var /= static_cast<double>(n);
        rstd[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[i * n + j] = (X[i * n + j] - mu) * rstd[i];
            out[i * n + j] = xhat[i * n + j] * G[j] + B[j];
        }
    }
    auto px = x.node_ptr(), pg = gain.node_ptr(), pb = bias.node_ptr();
    return finish("layer_norm", {m, n}, std::move(out), {px, pg, pb},
                  [px, pg, pb, m, n, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                      const auto& G = pg->data;
                      for (std::size_t i = 0; i < m; ++i) {
                          const double* gy = self.grad.data() + i * n;
                          const double* xh = xhat.data() + i * n;
                          if (pg->requires_grad || pb->requires_grad) {
                              for (std::size_t j = 0; j < n; ++j) {
                                  if (pg->requires_grad) pg->grad[j] += gy[j] * xh[j];
                                  if (pb->requires_grad) pb->grad[j] += gy[j];
                              }
                          }
                          if (!px->requires_grad) continue;
                          double s1 = 0.0, s2 = 0.0;
                          for (std::size_t j = 0; j < n; ++j) {
                              const double g = gy[j] * G[j];
                              s1 += g;
                              s2 += g * xh[j];
                          }
                          const double inv_n = 1.0 / static_cast<double>(n);
                          for (std::size_t j = 0; j < n; ++j) {
                              const double g = gy[j] * G[j];
                              px->grad[i * n + j] += rstd[i] * (g - inv_n * s1 - xh[j] * inv_n * s2);
                          }
                      }
                  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
    require_2d(logits, "cross_entropy");
    const std::size_t m = logits.rows(), v = logits.cols();
    if (targets.size() != m) throw DimensionError("cross_entropy: one target per logit row required");
    if (m == 0) throw ContractError("cross_entropy: no positions");
    const auto& L = logits.node()->data;
    std::vector<double> probs(m * v);
    std::vector<std::size_t> tgt(targets.begin(), targets.end());
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        if (tgt[i] >= v) {
            throw IndexError("cross_entropy: target " + std::to_string(tgt[i]) + " outside vocabulary of " +
                             std::to_string(v));
        }
        const double* row = L.data() + i * v;
        const double mx = *std::max_element(row, row + v);
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            probs[i * v + j] = std::exp(row[j] - mx);
            z += probs[i * v + j];
        }
        for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= z;
        total += -(row[tgt[i]] - mx - std::log(z));
    }
    auto pl = logits.node_ptr();
    return finish("cross_entropy", {1}, {total / static_cast<double>(m)}, {pl},
                  [pl, m, v, probs = std::move(probs), tgt = std::move(tgt)](Node& self) {
                      const double g = self.grad[0] / static_cast<double>(m);
                      for (std::size_t i = 0; i < m; ++i) {
                          for (std::size_t j = 0; j < v; ++j) {
                              const double d = probs[i * v + j] - (j == tgt[i] ? 1.0 : 0.0);
                              pl->grad[i * v + j] += g * d;
                          }
                      }
                  });
}

Tensor sum(const Tensor& a) {
    const auto& A = node_of(a, "sum").data;
    double s = 0.0;
    for (double x : A) s += x;
    auto pa = a.node_ptr();
    return finish("sum", {1}, {s}, {pa}, [pa](Node& self) {
        for (auto& g : pa->grad) g += self.grad[0];
    });
}

Tensor mean(const Tensor& a) {
    const auto n = node_of(a, "mean").data.size();
    if (n == 0) throw ContractError("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

// ---- gradient check ---------------------------------------------------------------------

double finite_difference_check(const ScalarFn& f, const Tensor& x, double h) {
    Tensor probe = Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
    Tensor loss = f(probe);
    loss.backward();
    const std::vector<double> analytic(probe.grad().begin(), probe.grad().end());

    NoGradGuard guard;
    double worst = 0.0;
    auto values = probe.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double orig = values[i];
        values[i] = orig + h;
        const double fp = f(probe).item();
        values[i] = orig - h;
        const double fm = f(probe).item();
        values[i] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        worst = std::max(worst, std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + 1e-8));
    }
    return worst;
}

}  // namespace spatialgeo
