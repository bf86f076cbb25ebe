#include "dispfuse/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <unordered_map>
#include <unordered_set>

#include "dispfuse/threading.hpp"

namespace dispfuse::ad {

namespace {

std::atomic<int> g_default_dtype{static_cast<int>(Dtype::f32)};
thread_local bool g_grad_enabled = true;

std::int64_t numel_of(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ",";
    }
    return out + "]";
}

std::shared_ptr<Node> alloc_node(const std::vector<int>& shape, Dtype dt) {
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->dtype = dt;
    std::int64_t ne = numel_of(shape);
    if (dt == Dtype::f32)
        n->data_f.assign(static_cast<size_t>(ne), 0.0f);
    else
        n->data_d.assign(static_cast<size_t>(ne), 0.0);
    return n;
}

template <typename T>
T* data_ptr(Node& n);
template <>
float* data_ptr<float>(Node& n) { return n.data_f.data(); }
template <>
double* data_ptr<double>(Node& n) { return n.data_d.data(); }

template <typename T>
const T* data_ptr(const Node& n);
template <>
const float* data_ptr<float>(const Node& n) { return n.data_f.data(); }
template <>
const double* data_ptr<double>(const Node& n) { return n.data_d.data(); }

template <typename Fn>
void dispatch(Dtype dt, Fn&& fn) {
    if (dt == Dtype::f32)
        fn(float{});
    else
        fn(double{});
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dtype() != b.dtype())
        throw ConfigError(std::string(op) + ": mixed dtypes");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
}

/// Attaches a graph record to `out` when recording applies.
void record(Tensor& out, const char* op, std::vector<Tensor> parents, VjpFn vjp) {
    if (!g_grad_enabled) return;
    bool any = false;
    for (const auto& p : parents)
        if (p.requires_grad()) { any = true; break; }
    if (!any) return;
    out.node->requires_grad = true;
    out.node->parents = std::move(parents);
    out.node->vjp = std::move(vjp);
    out.node->op = op;
}

template <typename F>
Tensor unary_elementwise(const Tensor& a, F f) {
    auto out = alloc_node(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = data_ptr<T>(*a.node);
        T* po = data_ptr<T>(*out);
        std::int64_t n = a.numel();
        for (std::int64_t i = 0; i < n; ++i) po[i] = static_cast<T>(f(static_cast<double>(pa[i])));
    });
    return Tensor(out);
}

template <typename F>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, F f, const char* op) {
    check_same_dtype(a, b, op);
    check_same_shape(a, b, op);
    auto out = alloc_node(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = data_ptr<T>(*a.node);
        const T* pb = data_ptr<T>(*b.node);
        T* po = data_ptr<T>(*out);
        std::int64_t n = a.numel();
        for (std::int64_t i = 0; i < n; ++i) po[i] = static_cast<T>(f(pa[i], pb[i]));
    });
    return Tensor(out);
}

} // namespace

// ---- globals ----------------------------------------------------------------

Dtype default_dtype() { return static_cast<Dtype>(g_default_dtype.load()); }
void set_default_dtype(Dtype dt) { g_default_dtype.store(static_cast<int>(dt)); }

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
EnableGradGuard::EnableGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = true; }
EnableGradGuard::~EnableGradGuard() { g_grad_enabled = prev_; }

// ---- Node -------------------------------------------------------------------

std::int64_t Node::numel() const { return numel_of(shape); }

double Node::get(std::int64_t i) const {
    return dtype == Dtype::f32 ? static_cast<double>(data_f[static_cast<size_t>(i)])
                               : data_d[static_cast<size_t>(i)];
}

void Node::set(std::int64_t i, double v) {
    if (dtype == Dtype::f32)
        data_f[static_cast<size_t>(i)] = static_cast<float>(v);
    else
        data_d[static_cast<size_t>(i)] = v;
}

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(const std::vector<int>& shape, Dtype dt, bool requires_grad) {
    auto n = alloc_node(shape, dt);
    n->requires_grad = requires_grad;
    return Tensor(n);
}
Tensor Tensor::zeros(const std::vector<int>& shape) { return zeros(shape, default_dtype()); }

Tensor Tensor::full(const std::vector<int>& shape, double value, Dtype dt) {
    auto n = alloc_node(shape, dt);
    std::int64_t ne = n->numel();
    for (std::int64_t i = 0; i < ne; ++i) n->set(i, value);
    return Tensor(n);
}
Tensor Tensor::full(const std::vector<int>& shape, double value) {
    return full(shape, value, default_dtype());
}

Tensor Tensor::from_vector(const std::vector<int>& shape, const std::vector<double>& values,
                           Dtype dt) {
    if (numel_of(shape) != static_cast<std::int64_t>(values.size()))
        throw ConfigError("from_vector: " + shape_str(shape) + " needs " +
                          std::to_string(numel_of(shape)) + " values, got " +
                          std::to_string(values.size()));
    auto n = alloc_node(shape, dt);
    for (size_t i = 0; i < values.size(); ++i) n->set(static_cast<std::int64_t>(i), values[i]);
    return Tensor(n);
}
Tensor Tensor::from_vector(const std::vector<int>& shape, const std::vector<double>& values) {
    return from_vector(shape, values, default_dtype());
}

Tensor Tensor::randn(const std::vector<int>& shape, Rng& rng, double mean, double stddev,
                     Dtype dt) {
    auto n = alloc_node(shape, dt);
    std::int64_t ne = n->numel();
    for (std::int64_t i = 0; i < ne; ++i) n->set(i, rng.normal(mean, stddev));
    return Tensor(n);
}

Tensor Tensor::variable(const Tensor& src) {
    Tensor v = src.detach();
    v.node->requires_grad = true;
    return v;
}

const std::vector<int>& Tensor::shape() const { return node->shape; }
std::int64_t Tensor::numel() const { return node->numel(); }
int Tensor::dim(int i) const { return node->shape.at(static_cast<size_t>(i)); }
Dtype Tensor::dtype() const { return node->dtype; }
bool Tensor::requires_grad() const { return node && node->requires_grad; }

Tensor Tensor::detach() const {
    auto n = std::make_shared<Node>();
    n->shape = node->shape;
    n->dtype = node->dtype;
    n->data_f = node->data_f;
    n->data_d = node->data_d;
    return Tensor(n);
}

double Tensor::item() const {
    if (numel() != 1) throw ContractViolation("item(): tensor is not scalar");
    return node->get(0);
}

double Tensor::at(std::int64_t i) const { return node->get(i); }

void Tensor::set(std::int64_t i, double v) {
    if (node->vjp) throw ContractViolation("set(): tensor is not a leaf");
    node->set(i, v);
}

std::vector<double> Tensor::to_vector() const {
    std::int64_t n = numel();
    std::vector<double> out(static_cast<size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = node->get(i);
    return out;
}

std::vector<unsigned char> Tensor::raw_bytes() const {
    std::vector<unsigned char> out;
    if (dtype() == Dtype::f32) {
        out.resize(node->data_f.size() * sizeof(float));
        std::memcpy(out.data(), node->data_f.data(), out.size());
    } else {
        out.resize(node->data_d.size() * sizeof(double));
        std::memcpy(out.data(), node->data_d.data(), out.size());
    }
    return out;
}

Tensor Tensor::grad() const { return node->grad ? Tensor(node->grad) : Tensor(); }
void Tensor::zero_grad() { node->grad.reset(); }

void Tensor::accumulate_grad(const Tensor& g) {
    if (!node->grad) {
        node->grad = g.detach().node;
    } else {
        NoGradGuard ng;
        node->grad = add(Tensor(node->grad), g).node;
    }
}

// ---- constants --------------------------------------------------------------

Tensor zeros_like(const Tensor& t) { return Tensor::zeros(t.shape(), t.dtype()); }
Tensor ones_like(const Tensor& t) { return Tensor::full(t.shape(), 1.0, t.dtype()); }
Tensor full_like(const Tensor& t, double v) { return Tensor::full(t.shape(), v, t.dtype()); }

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    Tensor out = binary_elementwise(a, b, [](auto x, auto y) { return x + y; }, "add");
    record(out, "add", {a, b},
           [](const Tensor&, const Tensor& g, const std::vector<char>& need,
              std::vector<Tensor>& gs) {
               if (need[0]) gs[0] = g;
               if (need[1]) gs[1] = g;
           });
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    Tensor out = binary_elementwise(a, b, [](auto x, auto y) { return x - y; }, "sub");
    record(out, "sub", {a, b},
           [](const Tensor&, const Tensor& g, const std::vector<char>& need,
              std::vector<Tensor>& gs) {
               if (need[0]) gs[0] = g;
               if (need[1]) gs[1] = neg(g);
           });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    Tensor out = binary_elementwise(a, b, [](auto x, auto y) { return x * y; }, "mul");
    record(out, "mul", {a, b},
           [a, b](const Tensor&, const Tensor& g, const std::vector<char>& need,
                  std::vector<Tensor>& gs) {
               if (need[0]) gs[0] = mul(g, b);
               if (need[1]) gs[1] = mul(g, a);
           });
    return out;
}

Tensor divide(const Tensor& a, const Tensor& b) {
    Tensor out = binary_elementwise(a, b, [](auto x, auto y) { return x / y; }, "div");
    record(out, "div", {a, b},
           [a, b](const Tensor& self, const Tensor& g, const std::vector<char>& need,
                  std::vector<Tensor>& gs) {
               if (need[0]) gs[0] = divide(g, b);
               if (need[1]) gs[1] = neg(divide(mul(g, self), b));
           });
    return out;
}

Tensor add_scalar(const Tensor& a, double c) {
    Tensor out = unary_elementwise(a, [c](double x) { return x + c; });
    record(out, "add_scalar", {a},
           [](const Tensor&, const Tensor& g, const std::vector<char>& need,
              std::vector<Tensor>& gs) {
               if (need[0]) gs[0] = g;
           });
    return out;
}

Tensor mul_scalar(const Tensor& a, double c) {
    Tensor out = unary_elementwise(a, [c](double x) { return x * c; });
    record(out, "mul_scalar", {a},
           [c](const Tensor&, const Tensor& g, const std::vector<char>& need,
               std::vector<Tensor>& gs) {
               if (need[0]) gs[0] = mul_scalar(g, c);
           });
    return out;
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor abs_t(const Tensor& a) {
    Tensor out = unary_elementwise(a, [](double x) { return std::abs(x); });
    record(out, "abs", {a},
           [a](const Tensor&, const Tensor& g, const std::vector<char>& need,
               std::vector<Tensor>& gs) {
               if (need[0]) gs[0] = mul(g, sign_of(a));
           });
    return out;
}

Tensor exp_t(const Tensor& a) {
    Tensor out = unary_elementwise(a, [](double x) { return std::exp(x); });
    record(out, "exp", {a},
           [](const Tensor& self, const Tensor& g, const std::vector<char>& need,
              std::vector<Tensor>& gs) {
               if (need[0]) gs[0] = mul(g, self);
           });
    return out;
}

Tensor sqrt_t(const Tensor& a, double grad_floor) {
    Tensor out = unary_elementwise(a, [](double x) { return std::sqrt(x); });
    record(out, "sqrt", {a},
           [a, grad_floor](const Tensor&, const Tensor& g, const std::vector<char>& need,
                           std::vector<Tensor>& gs) {
               if (need[0])
                   gs[0] = divide(mul_scalar(g, 0.5),
                                 sqrt_t(clamp_min(a, grad_floor), grad_floor));
           });
    return out;
}

Tensor sigmoid(const Tensor& a) {
    Tensor out = unary_elementwise(a, [](double x) {
        return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    });
    record(out, "sigmoid", {a},
           [](const Tensor& self, const Tensor& g, const std::vector<char>& need,
              std::vector<Tensor>& gs) {
               if (need[0]) gs[0] = mul(g, mul(self, add_scalar(neg(self), 1.0)));
           });
    return out;
}

Tensor relu(const Tensor& a) {
    Tensor out = unary_elementwise(a, [](double x) { return x > 0 ? x : 0.0; });
    record(out, "relu", {a},
           [a](const Tensor&, const Tensor& g, const std::vector<char>& need,
               std::vector<Tensor>& gs) {
               if (need[0]) gs[0] = mul(g, greater_than(a, 0.0));
           });
    return out;
}

Tensor clamp_min(const Tensor& a, double c) {
    Tensor out = unary_elementwise(a, [c](double x) { return x < c ? c : x; });
    record(out, "clamp_min", {a},
           [a, c](const Tensor&, const Tensor& g, const std::vector<char>& need,
                  std::vector<Tensor>& gs) {
               if (need[0]) gs[0] = mul(g, greater_than(a, c));
           });
    return out;
}

Tensor square(const Tensor& a) { return mul(a, a); }

Tensor sign_of(const Tensor& a) {
    NoGradGuard ng;
    return unary_elementwise(a, [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor greater_than(const Tensor& a, double c) {
    NoGradGuard ng;
    return unary_elementwise(a, [c](double x) { return x > c ? 1.0 : 0.0; });
}

// ---- reductions / broadcasts --------------------------------------------------

Tensor sum_all(const Tensor& a) {
    auto out = alloc_node({1}, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = data_ptr<T>(*a.node);
        T acc = 0;
        std::int64_t n = a.numel();
        for (std::int64_t i = 0; i < n; ++i) acc += pa[i];
        data_ptr<T>(*out)[0] = acc;
    });
    Tensor t(out);
    std::vector<int> shp = a.shape();
    record(t, "sum_all", {a},
           [shp](const Tensor&, const Tensor& g, const std::vector<char>& need,
                 std::vector<Tensor>& gs) {
               if (need[0]) gs[0] = broadcast_scalar(g, shp);
           });
    return t;
}

Tensor mean_all(const Tensor& a) {
    return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor broadcast_scalar(const Tensor& s, const std::vector<int>& shape) {
    if (s.numel() != 1) throw ContractViolation("broadcast_scalar: source not scalar");
    auto out = alloc_node(shape, s.dtype());
    dispatch(s.dtype(), [&](auto tag) {
        using T = decltype(tag);
        T v = data_ptr<T>(*s.node)[0];
        T* po = data_ptr<T>(*out);
        std::int64_t n = out->numel();
        for (std::int64_t i = 0; i < n; ++i) po[i] = v;
    });
    Tensor t(out);
    record(t, "broadcast_scalar", {s},
           [](const Tensor&, const Tensor& g, const std::vector<char>& need,
              std::vector<Tensor>& gs) {
               if (need[0]) gs[0] = sum_all(g);
           });
    return t;
}

Tensor sum_per_sample(const Tensor& a) {
    if (a.shape().empty()) throw ContractViolation("sum_per_sample: rank-0 input");
    int b = a.dim(0);
    std::int64_t per = a.numel() / b;
    auto out = alloc_node({b}, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = data_ptr<T>(*a.node);
        T* po = data_ptr<T>(*out);
        for (int i = 0; i < b; ++i) {
            T acc = 0;
            const T* row = pa + static_cast<std::int64_t>(i) * per;
            for (std::int64_t j = 0; j < per; ++j) acc += row[j];
            po[i] = acc;
        }
    });
    Tensor t(out);
    std::vector<int> shp = a.shape();
    record(t, "sum_per_sample", {a},
           [shp](const Tensor&, const Tensor& g, const std::vector<char>& need,
                 std::vector<Tensor>& gs) {
               if (need[0]) gs[0] = broadcast_per_sample(g, shp);
           });
    return t;
}

Tensor broadcast_per_sample(const Tensor& v, const std::vector<int>& shape) {
    if (v.shape().size() != 1 || shape.empty() || v.dim(0) != shape[0])
        throw ContractViolation("broadcast_per_sample: batch size mismatch");
    auto out = alloc_node(shape, v.dtype());
    int b = shape[0];
    std::int64_t per = out->numel() / b;
    dispatch(v.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pv = data_ptr<T>(*v.node);
        T* po = data_ptr<T>(*out);
        for (int i = 0; i < b; ++i) {
            T val = pv[i];
            T* row = po + static_cast<std::int64_t>(i) * per;
            for (std::int64_t j = 0; j < per; ++j) row[j] = val;
        }
    });
    Tensor t(out);
    record(t, "broadcast_per_sample", {v},
           [](const Tensor&, const Tensor& g, const std::vector<char>& need,
              std::vector<Tensor>& gs) {
               if (need[0]) gs[0] = sum_per_sample(g);
           });
    return t;
}

Tensor sum_per_channel(const Tensor& a) {
    if (a.shape().size() != 4) throw ContractViolation("sum_per_channel: expects [b,c,h,w]");
    int b = a.dim(0), c = a.dim(1);
    std::int64_t hw = static_cast<std::int64_t>(a.dim(2)) * a.dim(3);
    auto out = alloc_node({c}, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = data_ptr<T>(*a.node);
        T* po = data_ptr<T>(*out);
        for (int ch = 0; ch < c; ++ch) {
            T acc = 0;
            for (int i = 0; i < b; ++i) {
                const T* row = pa + (static_cast<std::int64_t>(i) * c + ch) * hw;
                for (std::int64_t j = 0; j < hw; ++j) acc += row[j];
            }
            po[ch] = acc;
        }
    });
    Tensor t(out);
    std::vector<int> shp = a.shape();
    record(t, "sum_per_channel", {a},
           [shp](const Tensor&, const Tensor& g, const std::vector<char>& need,
                 std::vector<Tensor>& gs) {
               if (need[0]) gs[0] = broadcast_per_channel(g, shp);
           });
    return t;
}

Tensor broadcast_per_channel(const Tensor& v, const std::vector<int>& shape) {
    if (v.shape().size() != 1 || shape.size() != 4 || v.dim(0) != shape[1])
        throw ContractViolation("broadcast_per_channel: channel count mismatch");
    auto out = alloc_node(shape, v.dtype());
    int b = shape[0], c = shape[1];
    std::int64_t hw = static_cast<std::int64_t>(shape[2]) * shape[3];
    dispatch(v.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pv = data_ptr<T>(*v.node);
        T* po = data_ptr<T>(*out);
        for (int i = 0; i < b; ++i)
            for (int ch = 0; ch < c; ++ch) {
                T val = pv[ch];
                T* row = po + (static_cast<std::int64_t>(i) * c + ch) * hw;
                for (std::int64_t j = 0; j < hw; ++j) row[j] = val;
            }
    });
    Tensor t(out);
    record(t, "broadcast_per_channel", {v},
           [](const Tensor&, const Tensor& g, const std::vector<char>& need,
              std::vector<Tensor>& gs) {
               if (need[0]) gs[0] = sum_per_channel(g);
           });
    return t;
}

// ---- structure ----------------------------------------------------------------

Tensor concat_channels(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ConfigError("concat_channels: no inputs");
    const auto& s0 = parts[0].shape();
    if (s0.size() != 4) throw ContractViolation("concat_channels: expects [b,c,h,w]");
    int b = s0[0], h = s0[2], w = s0[3];
    int ctot = 0;
    for (const auto& p : parts) {
        const auto& s = p.shape();
        if (s.size() != 4 || s[0] != b || s[2] != h || s[3] != w)
            throw ConfigError("concat_channels: incompatible part shape " + shape_str(s));
        if (p.dtype() != parts[0].dtype()) throw ConfigError("concat_channels: mixed dtypes");
        ctot += s[1];
    }
    auto out = alloc_node({b, ctot, h, w}, parts[0].dtype());
    std::int64_t hw = static_cast<std::int64_t>(h) * w;
    dispatch(parts[0].dtype(), [&](auto tag) {
        using T = decltype(tag);
        T* po = data_ptr<T>(*out);
        for (int i = 0; i < b; ++i) {
            int coff = 0;
            for (const auto& p : parts) {
                int pc = p.dim(1);
                const T* pp = data_ptr<T>(*p.node) + static_cast<std::int64_t>(i) * pc * hw;
                std::memcpy(po + (static_cast<std::int64_t>(i) * ctot + coff) * hw, pp,
                            static_cast<size_t>(pc * hw) * sizeof(T));
                coff += pc;
            }
        }
    });
    Tensor t(out);
    std::vector<int> widths;
    for (const auto& p : parts) widths.push_back(p.dim(1));
    record(t, "concat_channels", parts,
           [widths](const Tensor&, const Tensor& g, const std::vector<char>& need,
                    std::vector<Tensor>& gs) {
               int off = 0;
               for (size_t i = 0; i < widths.size(); ++i) {
                   if (need[i]) gs[i] = slice_channels(g, off, widths[i]);
                   off += widths[i];
               }
           });
    return t;
}

Tensor slice_channels(const Tensor& a, int start, int count) {
    const auto& s = a.shape();
    if (s.size() != 4) throw ContractViolation("slice_channels: expects [b,c,h,w]");
    if (start < 0 || count < 1 || start + count > s[1])
        throw ConfigError("slice_channels: range [" + std::to_string(start) + "," +
                          std::to_string(start + count) + ") outside " + std::to_string(s[1]) +
                          " channels");
    int b = s[0], c = s[1], h = s[2], w = s[3];
    auto out = alloc_node({b, count, h, w}, a.dtype());
    std::int64_t hw = static_cast<std::int64_t>(h) * w;
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = data_ptr<T>(*a.node);
        T* po = data_ptr<T>(*out);
        for (int i = 0; i < b; ++i)
            std::memcpy(po + static_cast<std::int64_t>(i) * count * hw,
                        pa + (static_cast<std::int64_t>(i) * c + start) * hw,
                        static_cast<size_t>(count * hw) * sizeof(T));
    });
    Tensor t(out);
    int c_before = start, c_after = c - start - count;
    record(t, "slice_channels", {a},
           [c_before, c_after, b, h, w](const Tensor&, const Tensor& g,
                                        const std::vector<char>& need, std::vector<Tensor>& gs) {
               if (!need[0]) return;
               std::vector<Tensor> parts;
               if (c_before > 0) parts.push_back(Tensor::zeros({b, c_before, h, w}, g.dtype()));
               parts.push_back(g);
               if (c_after > 0) parts.push_back(Tensor::zeros({b, c_after, h, w}, g.dtype()));
               gs[0] = parts.size() == 1 ? g : concat_channels(parts);
           });
    return t;
}

// ---- convolutions ----------------------------------------------------------------

namespace {

template <typename T>
void conv2d_kernel(const T* x, const T* k, T* y, int b, int ci, int h, int w, int co, int kh,
                   int kw, int stride, int pad, int oh, int ow) {
    const std::int64_t cost =
        static_cast<std::int64_t>(b) * co * ci * kh * kw * oh * ow * 2;
    parallel_for(static_cast<std::int64_t>(b) * co, cost, [&](std::int64_t t) {
        const int bi = static_cast<int>(t / co);
        const int oc = static_cast<int>(t % co);
        T* yrow = y + (static_cast<std::int64_t>(bi) * co + oc) * oh * ow;
        std::fill(yrow, yrow + static_cast<std::int64_t>(oh) * ow, T(0));
        for (int ic = 0; ic < ci; ++ic) {
            const T* xch = x + (static_cast<std::int64_t>(bi) * ci + ic) * h * w;
            const T* krow = k + ((static_cast<std::int64_t>(oc) * ci + ic) * kh) * kw;
            for (int r = 0; r < kh; ++r)
                for (int c = 0; c < kw; ++c) {
                    const T wv = krow[r * kw + c];
                    if (wv == T(0)) continue;
                    for (int orow = 0; orow < oh; ++orow) {
                        const int ir = orow * stride - pad + r;
                        if (ir < 0 || ir >= h) continue;
                        // valid output cols: 0 <= ocol*stride - pad + c < w
                        int lo = 0, hi = ow;
                        while (lo < hi && lo * stride - pad + c < 0) ++lo;
                        while (hi > lo && (hi - 1) * stride - pad + c >= w) --hi;
                        const T* xr = xch + static_cast<std::int64_t>(ir) * w - pad + c;
                        T* yr = yrow + static_cast<std::int64_t>(orow) * ow;
                        if (stride == 1) {
                            for (int oc2 = lo; oc2 < hi; ++oc2) yr[oc2] += wv * xr[oc2];
                        } else {
                            for (int oc2 = lo; oc2 < hi; ++oc2)
                                yr[oc2] += wv * xr[static_cast<std::int64_t>(oc2) * stride];
                        }
                    }
                }
        }
    });
}

template <typename T>
void conv2d_transpose_kernel(const T* x, const T* k, T* y, int b, int co, int h, int w, int ci,
                             int kh, int kw, int stride, int pad, int oh, int ow) {
    const std::int64_t cost =
        static_cast<std::int64_t>(b) * co * ci * kh * kw * h * w * 2;
    parallel_for(static_cast<std::int64_t>(b) * ci, cost, [&](std::int64_t t) {
        const int bi = static_cast<int>(t / ci);
        const int ic = static_cast<int>(t % ci);
        T* ych = y + (static_cast<std::int64_t>(bi) * ci + ic) * oh * ow;
        std::fill(ych, ych + static_cast<std::int64_t>(oh) * ow, T(0));
        for (int oc = 0; oc < co; ++oc) {
            const T* xch = x + (static_cast<std::int64_t>(bi) * co + oc) * h * w;
            const T* krow = k + ((static_cast<std::int64_t>(oc) * ci + ic) * kh) * kw;
            for (int r = 0; r < kh; ++r)
                for (int c = 0; c < kw; ++c) {
                    const T wv = krow[r * kw + c];
                    if (wv == T(0)) continue;
                    for (int irow = 0; irow < h; ++irow) {
                        const int orow = irow * stride - pad + r;
                        if (orow < 0 || orow >= oh) continue;
                        int lo = 0, hi = w;
                        while (lo < hi && lo * stride - pad + c < 0) ++lo;
                        while (hi > lo && (hi - 1) * stride - pad + c >= ow) --hi;
                        const T* xr = xch + static_cast<std::int64_t>(irow) * w;
                        T* yr = ych + static_cast<std::int64_t>(orow) * ow - pad + c;
                        if (stride == 1) {
                            for (int icol = lo; icol < hi; ++icol) yr[icol] += wv * xr[icol];
                        } else {
                            for (int icol = lo; icol < hi; ++icol)
                                yr[static_cast<std::int64_t>(icol) * stride] += wv * xr[icol];
                        }
                    }
                }
        }
    });
}

template <typename T>
void conv2d_kernel_grad_kernel(const T* x, const T* g, T* dk, int b, int ci, int h, int w,
                               int co, int oh, int ow, int kh, int kw, int stride, int pad) {
    const std::int64_t cost =
        static_cast<std::int64_t>(b) * co * ci * kh * kw * oh * ow * 2;
    parallel_for(static_cast<std::int64_t>(co) * ci, cost, [&](std::int64_t t) {
        const int oc = static_cast<int>(t / ci);
        const int ic = static_cast<int>(t % ci);
        T* krow = dk + ((static_cast<std::int64_t>(oc) * ci + ic) * kh) * kw;
        for (int r = 0; r < kh; ++r)
            for (int c = 0; c < kw; ++c) {
                T acc = 0;
                for (int bi = 0; bi < b; ++bi) {
                    const T* xch = x + (static_cast<std::int64_t>(bi) * ci + ic) * h * w;
                    const T* gch = g + (static_cast<std::int64_t>(bi) * co + oc) * oh * ow;
                    for (int orow = 0; orow < oh; ++orow) {
                        const int ir = orow * stride - pad + r;
                        if (ir < 0 || ir >= h) continue;
                        int lo = 0, hi = ow;
                        while (lo < hi && lo * stride - pad + c < 0) ++lo;
                        while (hi > lo && (hi - 1) * stride - pad + c >= w) --hi;
                        const T* xr = xch + static_cast<std::int64_t>(ir) * w - pad + c;
                        const T* gr = gch + static_cast<std::int64_t>(orow) * ow;
                        if (stride == 1) {
                            for (int oc2 = lo; oc2 < hi; ++oc2) acc += gr[oc2] * xr[oc2];
                        } else {
                            for (int oc2 = lo; oc2 < hi; ++oc2)
                                acc += gr[oc2] * xr[static_cast<std::int64_t>(oc2) * stride];
                        }
                    }
                }
                krow[r * kw + c] = acc;
            }
    });
}

} // namespace

Tensor conv2d(const Tensor& x, const Tensor& k, int stride, int pad) {
    check_same_dtype(x, k, "conv2d");
    const auto& xs = x.shape();
    const auto& ks = k.shape();
    if (xs.size() != 4 || ks.size() != 4) throw ContractViolation("conv2d: expects 4-d tensors");
    if (xs[1] != ks[1])
        throw ConfigError("conv2d: input channels " + std::to_string(xs[1]) +
                          " != kernel channels " + std::to_string(ks[1]));
    if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
    int b = xs[0], ci = xs[1], h = xs[2], w = xs[3];
    int co = ks[0], kh = ks[2], kw = ks[3];
    if (kh > h + 2 * pad || kw > w + 2 * pad)
        throw ConfigError("conv2d: kernel larger than padded input");
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (w + 2 * pad - kw) / stride + 1;
    auto out = alloc_node({b, co, oh, ow}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        conv2d_kernel<T>(data_ptr<T>(*x.node), data_ptr<T>(*k.node), data_ptr<T>(*out), b, ci, h,
                         w, co, kh, kw, stride, pad, oh, ow);
    });
    Tensor t(out);
    record(t, "conv2d", {x, k},
           [x, k, stride, pad, h, w, kh, kw](const Tensor&, const Tensor& g,
                                             const std::vector<char>& need,
                                             std::vector<Tensor>& gs) {
               if (need[0]) gs[0] = conv2d_transpose(g, k, stride, pad, h, w);
               if (need[1]) gs[1] = conv2d_kernel_grad(x, g, stride, pad, kh, kw);
           });
    return t;
}

Tensor conv2d_transpose(const Tensor& x, const Tensor& k, int stride, int pad, int out_h,
                        int out_w) {
    check_same_dtype(x, k, "conv2d_transpose");
    const auto& xs = x.shape();
    const auto& ks = k.shape();
    if (xs.size() != 4 || ks.size() != 4)
        throw ContractViolation("conv2d_transpose: expects 4-d tensors");
    if (xs[1] != ks[0])
        throw ConfigError("conv2d_transpose: input channels " + std::to_string(xs[1]) +
                          " != kernel out-channels " + std::to_string(ks[0]));
    int b = xs[0], co = xs[1], h = xs[2], w = xs[3];
    int ci = ks[1], kh = ks[2], kw = ks[3];
    // The forward conv with these parameters must map (out_h, out_w) back to (h, w).
    if ((out_h + 2 * pad - kh) / stride + 1 != h || (out_w + 2 * pad - kw) / stride + 1 != w)
        throw ConfigError("conv2d_transpose: output size inconsistent with stride/pad");
    auto out = alloc_node({b, ci, out_h, out_w}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        conv2d_transpose_kernel<T>(data_ptr<T>(*x.node), data_ptr<T>(*k.node), data_ptr<T>(*out),
                                   b, co, h, w, ci, kh, kw, stride, pad, out_h, out_w);
    });
    Tensor t(out);
    record(t, "conv2d_transpose", {x, k},
           [x, k, stride, pad, kh, kw](const Tensor&, const Tensor& g,
                                       const std::vector<char>& need, std::vector<Tensor>& gs) {
               if (need[0]) gs[0] = conv2d(g, k, stride, pad);
               if (need[1]) gs[1] = conv2d_kernel_grad(g, x, stride, pad, kh, kw);
           });
    return t;
}

Tensor conv2d_kernel_grad(const Tensor& x, const Tensor& grad_out, int stride, int pad, int kh,
                          int kw) {
    check_same_dtype(x, grad_out, "conv2d_kernel_grad");
    const auto& xs = x.shape();
    const auto& gs = grad_out.shape();
    if (xs.size() != 4 || gs.size() != 4)
        throw ContractViolation("conv2d_kernel_grad: expects 4-d tensors");
    if (grad_enabled() && (x.requires_grad() || grad_out.requires_grad()))
        throw ContractViolation(
            "conv2d_kernel_grad is not differentiable; detach its inputs first");
    int b = xs[0], ci = xs[1], h = xs[2], w = xs[3];
    int co = gs[1], oh = gs[2], ow = gs[3];
    if (gs[0] != b) throw ConfigError("conv2d_kernel_grad: batch mismatch");
    auto out = alloc_node({co, ci, kh, kw}, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        conv2d_kernel_grad_kernel<T>(data_ptr<T>(*x.node), data_ptr<T>(*grad_out.node),
                                     data_ptr<T>(*out), b, ci, h, w, co, oh, ow, kh, kw, stride,
                                     pad);
    });
    return Tensor(out);
}

void attach_graph(Tensor& out, const char* op, std::vector<Tensor> parents, VjpFn vjp) {
    record(out, op, std::move(parents), std::move(vjp));
}

// ---- autograd ---------------------------------------------------------------------

namespace {

struct Sweep {
    std::vector<Node*> order; // topological, leaves last
    std::unordered_map<Node*, Tensor> handles;

    void build(const Tensor& root) {
        // Iterative post-order DFS over parent edges.
        std::vector<std::pair<Node*, size_t>> stack;
        std::unordered_set<Node*> visited;
        handles[root.node.get()] = root;
        stack.emplace_back(root.node.get(), 0);
        visited.insert(root.node.get());
        while (!stack.empty()) {
            auto& [n, idx] = stack.back();
            if (idx < n->parents.size()) {
                Node* p = n->parents[idx].node.get();
                Tensor ph = n->parents[idx];
                ++idx;
                if (p->requires_grad && !visited.count(p)) {
                    visited.insert(p);
                    handles[p] = ph;
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        std::reverse(order.begin(), order.end()); // root first
    }
};

} // namespace

std::vector<Tensor> grad(const Tensor& root, const std::vector<Tensor>& inputs,
                         bool create_graph) {
    if (!root.defined()) throw ContractViolation("grad: undefined root");
    if (root.numel() != 1) throw ContractViolation("grad: root must be scalar");

    Sweep sweep;
    sweep.build(root);

    // needed[n]: true iff some requested input is reachable from n.
    std::unordered_set<Node*> targets;
    for (const auto& t : inputs) targets.insert(t.node.get());
    std::unordered_map<Node*, char> needed;
    for (auto it = sweep.order.rbegin(); it != sweep.order.rend(); ++it) {
        Node* n = *it;
        char v = targets.count(n) ? 1 : 0;
        if (!v)
            for (const auto& p : n->parents)
                if (p.node->requires_grad && needed[p.node.get()]) { v = 1; break; }
        needed[n] = v;
    }

    std::unordered_map<Node*, Tensor> gmap;
    gmap[root.node.get()] = Tensor::full({1}, 1.0, root.dtype());

    for (Node* n : sweep.order) {
        if (!needed[n] || !n->vjp) continue;
        auto git = gmap.find(n);
        if (git == gmap.end()) continue; // not on a live path from root
        Tensor gout = git->second;
        std::vector<char> need_parent(n->parents.size(), 0);
        bool any = false;
        for (size_t i = 0; i < n->parents.size(); ++i) {
            Node* p = n->parents[i].node.get();
            if (p->requires_grad && needed[p]) { need_parent[i] = 1; any = true; }
        }
        if (!any) continue;
        std::vector<Tensor> pgrads(n->parents.size());
        if (create_graph) {
            EnableGradGuard eg;
            n->vjp(sweep.handles[n], gout, need_parent, pgrads);
            for (size_t i = 0; i < n->parents.size(); ++i) {
                if (!need_parent[i] || !pgrads[i].defined()) continue;
                Node* p = n->parents[i].node.get();
                auto existing = gmap.find(p);
                if (existing == gmap.end())
                    gmap[p] = pgrads[i];
                else
                    existing->second = add(existing->second, pgrads[i]);
            }
        } else {
            NoGradGuard ng;
            n->vjp(sweep.handles[n], gout, need_parent, pgrads);
            for (size_t i = 0; i < n->parents.size(); ++i) {
                if (!need_parent[i] || !pgrads[i].defined()) continue;
                Node* p = n->parents[i].node.get();
                auto existing = gmap.find(p);
                if (existing == gmap.end())
                    gmap[p] = pgrads[i];
                else
                    existing->second = add(existing->second, pgrads[i]);
            }
        }
    }

    std::vector<Tensor> out;
    out.reserve(inputs.size());
    for (const auto& t : inputs) {
        auto it = gmap.find(t.node.get());
        if (it == gmap.end())
            out.push_back(Tensor::zeros(t.shape(), t.dtype()));
        else
            out.push_back(it->second);
    }
    return out;
}

void backward(const Tensor& root) {
    if (!root.defined()) throw ContractViolation("backward: undefined root");
    if (root.numel() != 1) throw ContractViolation("backward: root must be scalar");

    Sweep sweep;
    sweep.build(root);
    std::vector<Tensor> leaves;
    for (Node* n : sweep.order)
        if (!n->vjp && n->requires_grad) leaves.push_back(sweep.handles[n]);
    auto gs = grad(root, leaves, false);
    for (size_t i = 0; i < leaves.size(); ++i) leaves[i].accumulate_grad(gs[i]);
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
    if (eps <= 0) throw ContractViolation("grad_check: eps must be positive");
    Tensor xv = Tensor::variable(x);
    Tensor y = f(xv);
    if (y.numel() != 1) throw ContractViolation("grad_check: f must be scalar-valued");
    Tensor analytic = grad(y, {xv}, false)[0];

    double worst = 0.0;
    std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        Tensor xp = x.detach();
        Tensor xm = x.detach();
        xp.set(i, x.at(i) + eps);
        xm.set(i, x.at(i) - eps);
        double fp = f(xp).item();
        double fm = f(xm).item();
        double numeric = (fp - fm) / (2.0 * eps);
        double err = std::abs(analytic.at(i) - numeric) / std::max(1e-12, std::abs(numeric));
        if (std::isnan(fp) || std::isnan(fm) || std::isnan(numeric))
            return std::nan("");
        if (err > worst) worst = err;
    }
    return worst;
}

} // namespace dispfuse::ad
