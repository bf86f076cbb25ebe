#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dispfuse/errors.hpp"
#include "dispfuse/rng.hpp"

namespace dispfuse::ad {

enum class Dtype { f32, f64 };

/// Process-wide default for tensor factories that don't name a dtype.
/// Gradient-check suites run in f64; training runs in f32.
Dtype default_dtype();
void set_default_dtype(Dtype dt);

/// Reverse-mode recording switch (thread local).
bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
private:
    bool prev_;
};

struct EnableGradGuard {
    EnableGradGuard();
    ~EnableGradGuard();
    EnableGradGuard(const EnableGradGuard&) = delete;
    EnableGradGuard& operator=(const EnableGradGuard&) = delete;
private:
    bool prev_;
};

class Tensor;
struct Node;

/// Backward rule of one recorded op: given the node's output and the
/// incoming gradient, emit one gradient per parent (empty Tensor where
/// `needed[i]` is false). Rules are written with the public op API so that
/// a backward pass can itself be recorded (gradient-penalty support).
using VjpFn = std::function<void(const Tensor& self, const Tensor& grad_out,
                                 const std::vector<char>& needed,
                                 std::vector<Tensor>& grads)>;

struct Node {
    std::vector<int> shape;
    Dtype dtype = Dtype::f32;
    std::vector<float> data_f;
    std::vector<double> data_d;
    bool requires_grad = false;

    // Graph record (empty for leaves and constants).
    std::vector<Tensor> parents;
    VjpFn vjp;
    const char* op = "";

    // Accumulated leaf gradient, populated by backward().
    std::shared_ptr<Node> grad;

    std::int64_t numel() const;
    double get(std::int64_t i) const;
    void set(std::int64_t i, double v);
};

/// Dense n-d float array participating in a reverse-mode graph.
/// Handle semantics: copies share the underlying node. Data is immutable
/// once an op has consumed the tensor; only leaves are ever written.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node(std::move(n)) {}

    static Tensor zeros(const std::vector<int>& shape, Dtype dt, bool requires_grad = false);
    static Tensor zeros(const std::vector<int>& shape);
    static Tensor full(const std::vector<int>& shape, double value, Dtype dt);
    static Tensor full(const std::vector<int>& shape, double value);
    static Tensor from_vector(const std::vector<int>& shape, const std::vector<double>& values,
                              Dtype dt);
    static Tensor from_vector(const std::vector<int>& shape, const std::vector<double>& values);
    static Tensor randn(const std::vector<int>& shape, Rng& rng, double mean, double stddev,
                        Dtype dt);
    /// Detached copy of `src` flagged as a differentiation leaf.
    static Tensor variable(const Tensor& src);

    bool defined() const { return node != nullptr; }
    const std::vector<int>& shape() const;
    std::int64_t numel() const;
    int dim(int i) const;
    Dtype dtype() const;
    bool requires_grad() const;

    /// Value copy with no graph attached (never requires grad).
    Tensor detach() const;

    double item() const;
    double at(std::int64_t i) const;
    void set(std::int64_t i, double v); // leaf construction only
    std::vector<double> to_vector() const;
    /// Raw little-endian bytes of the payload (f32 or f64 as stored).
    std::vector<unsigned char> raw_bytes() const;

    Tensor grad() const;
    void zero_grad();
    void accumulate_grad(const Tensor& g);

    std::shared_ptr<Node> node;
};

// ---- factories / constants ------------------------------------------------

Tensor zeros_like(const Tensor& t);
Tensor ones_like(const Tensor& t);
Tensor full_like(const Tensor& t, double v);

// ---- elementwise ops ------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor abs_t(const Tensor& a);
Tensor exp_t(const Tensor& a);
/// sqrt with an exact forward; the backward clamps the argument to
/// `grad_floor` so a zero input yields a finite (large) slope instead of inf.
Tensor sqrt_t(const Tensor& a, double grad_floor = 1e-12);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor clamp_min(const Tensor& a, double c);
Tensor square(const Tensor& a);

// Non-differentiable helpers (always constants).
Tensor sign_of(const Tensor& a);
Tensor greater_than(const Tensor& a, double c);

// ---- reductions / broadcasts ----------------------------------------------

Tensor sum_all(const Tensor& a);                              // -> shape {1}
Tensor mean_all(const Tensor& a);                             // -> shape {1}
Tensor broadcast_scalar(const Tensor& s, const std::vector<int>& shape);
Tensor sum_per_sample(const Tensor& a);                       // [b,...] -> [b]
Tensor broadcast_per_sample(const Tensor& v, const std::vector<int>& shape);
Tensor sum_per_channel(const Tensor& a);                      // [b,c,h,w] -> [c]
Tensor broadcast_per_channel(const Tensor& v, const std::vector<int>& shape);

// ---- structure ops ---------------------------------------------------------

Tensor concat_channels(const std::vector<Tensor>& parts);     // along dim 1
Tensor slice_channels(const Tensor& a, int start, int count); // along dim 1

// ---- convolutions -----------------------------------------------------------

/// Cross-correlation, zero padding. x:[b,ci,h,w], k:[co,ci,kh,kw].
Tensor conv2d(const Tensor& x, const Tensor& k, int stride, int pad);
/// Transposed convolution (gradient of conv2d w.r.t. its input).
/// x:[b,co,h,w], k:[co,ci,kh,kw] -> [b,ci,out_h,out_w].
Tensor conv2d_transpose(const Tensor& x, const Tensor& k, int stride, int pad,
                        int out_h, int out_w);
/// Gradient of conv2d w.r.t. the kernel. Not differentiable.
Tensor conv2d_kernel_grad(const Tensor& x, const Tensor& grad_out, int stride, int pad,
                          int kh, int kw);

/// Attaches a backward rule to a freshly computed tensor, making it a
/// recorded op with the given parents. No-op when recording is off or no
/// parent requires grad. For ops whose forward cannot be phrased in
/// existing primitives (splatting, bilinear sampling).
void attach_graph(Tensor& out, const char* op, std::vector<Tensor> parents, VjpFn vjp);

// ---- autograd ---------------------------------------------------------------

/// Accumulates gradients of a scalar root into the .grad of every reachable
/// requires-grad leaf (additively across calls).
void backward(const Tensor& root);

/// Gradients of a scalar root w.r.t. `inputs`, without touching .grad.
/// With create_graph the returned tensors carry their own graph so the
/// result can be differentiated once more.
std::vector<Tensor> grad(const Tensor& root, const std::vector<Tensor>& inputs,
                         bool create_graph = false);

/// Max over coordinates of |analytic - central difference| /
/// max(1e-12, |central difference|) for a scalar-valued f at x.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double eps);

} // namespace dispfuse::ad
