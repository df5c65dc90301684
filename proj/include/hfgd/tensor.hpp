#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

namespace hfgd {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tensor;

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;  // trainable leaf
    bool barrier = false;        // stop-gradient node: keeps its parent in the
                                 // graph for reachability analysis but passes
                                 // no gradient through
    bool freed = false;  // set once backward() dismantles the node
    std::vector<Tensor> parents;
    std::function<void(TensorImpl&)> backward_fn;
    std::vector<double> grad;  // scratch buffer, live only during backward()
};

// While alive, newly built ops record no graph (forward evaluation only).
// Used for finite differences and inference, where graph bookkeeping is waste.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

// Value-semantic handle over a shared node. Copies alias the same storage.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }
    std::int64_t dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }

    bool requires_grad() const { return impl_->requires_grad; }
    bool is_barrier() const { return impl_->barrier; }
    bool is_leaf() const { return impl_->parents.empty() && !impl_->barrier; }
    // true when gradients can flow to or through this tensor
    bool participates() const {
        return impl_->requires_grad || !impl_->parents.empty();
    }

    const std::vector<double>& data() const { return impl_->data; }
    std::vector<double>& mutable_data();  // leaves only (parameter updates)

    double value() const;  // scalar tensors only
    double at(const std::vector<std::int64_t>& idx) const;

    TensorImpl* impl() const { return impl_.get(); }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;
    friend Tensor make_node(Shape shape, std::vector<double> data,
                            std::vector<Tensor> parents,
                            std::function<void(TensorImpl&)> backward_fn);
    friend Tensor stop_gradient(const Tensor& x);
};

// --- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& x, double c);
Tensor scale(const Tensor& x, double c);
Tensor relu(const Tensor& x);       // subgradient at 0 is 0
Tensor sqrt_elem(const Tensor& x);  // caller keeps inputs strictly positive

// Per-channel broadcast over axis `axis` of x; v is 1-D with v.numel() ==
// x.shape()[axis]. The only broadcasting the engine supports besides scalars.
Tensor add_channel(const Tensor& x, const Tensor& v, int axis);
Tensor mul_channel(const Tensor& x, const Tensor& v, int axis);

// --- contractions / shape --------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);  // [M,K]x[K,N]
Tensor bmm(const Tensor& a, const Tensor& b);     // [B,M,K]x[B,K,N]
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor reshape(const Tensor& x, Shape shape);
Tensor softmax(const Tensor& x, int axis);
Tensor sum_all(const Tensor& x);  // -> scalar
Tensor mean_all(const Tensor& x);

// Mean of -log softmax(logits)[n, labels[n]] over labels != ignore_index.
// logits is [N, C]; returns a scalar. Throws if every label is ignored.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                     int ignore_index = -1);

// Identity forward; blocks gradient flow. The node stays connected to its
// parent so topology analysis can see what it cut off.
Tensor stop_gradient(const Tensor& x);

// --- graph-building API (for layers with fused custom backwards) -----------

// Wraps a computed value as a graph node. Parents that cannot take gradients
// are kept for positional access but receive nothing; if no parent
// participates (or a NoGradGuard is active) the value is returned without a
// graph.
Tensor make_node(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                 std::function<void(TensorImpl&)> backward_fn);

// Gradient accumulation buffer of `parent` during a backward sweep, or
// nullptr when the parent takes no gradient (constant or stop-gradient node).
double* grad_target_of(const Tensor& parent);

// --- backward --------------------------------------------------------------

struct NamedParam {
    std::string name;
    Tensor tensor;
};

// Gradients keyed by parameter name, in the order the parameters were given.
// Parameters the loss cannot reach get an exact all-zero entry.
class GradientMap {
public:
    void insert(std::string name, Tensor grad);
    const Tensor* find(const std::string& name) const;
    const Tensor& at(const std::string& name) const;
    double max_abs(const std::string& name) const;
    const std::vector<std::pair<std::string, Tensor>>& entries() const {
        return entries_;
    }
    size_t size() const { return entries_.size(); }

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
};

// Reverse-mode sweep from a scalar loss. Unless retain_graph is set, the
// reachable graph is dismantled afterwards and a second backward through it
// throws.
GradientMap backward(const Tensor& loss, const std::vector<NamedParam>& params,
                     bool retain_graph = false);

// --- reachability ----------------------------------------------------------

struct Reachability {
    // nodes reachable from the loss without crossing a stop-gradient
    std::unordered_set<const TensorImpl*> clean;
    // nodes reachable only by crossing at least one stop-gradient
    std::unordered_set<const TensorImpl*> shadowed;

    bool reaches(const Tensor& t) const { return clean.count(t.impl()) > 0; }
    bool blocked(const Tensor& t) const {
        return !clean.count(t.impl()) && shadowed.count(t.impl()) > 0;
    }
};

Reachability analyze_reachability(const Tensor& loss);

// --- finite differences ----------------------------------------------------

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;  // over checked coordinates
    std::int64_t checked = 0;
    bool barrier_excluded = false;  // param only reachable through a barrier:
                                    // FD of the forward pass would disagree
                                    // with autodiff by construction
    bool pass = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    bool pass = true;
    double max_rel_err = 0.0;
};

struct GradCheckOptions {
    double eps = 1e-5;
    double tol = 1e-4;
    // check at most this many coordinates per parameter (0 = all), spread
    // evenly over the parameter
    std::int64_t max_coords_per_param = 0;
};

// Central-difference check of d loss / d param against backward(). `forward`
// must rebuild the loss from the current parameter values on every call.
GradCheckReport finite_diff_check(const std::function<Tensor()>& forward,
                                  const std::vector<NamedParam>& params,
                                  const GradCheckOptions& opts = {});

double rel_err(double a, double b);

}  // namespace hfgd
