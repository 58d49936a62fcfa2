#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "protoneck/errors.hpp"

namespace protoneck {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

inline std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int d = static_cast<int>(s.size()) - 2; d >= 0; --d) st[d] = st[d + 1] * s[d + 1];
    return st;
}

class Tape;

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    Tape* tape = nullptr;  // tape that recorded this tensor, if any
    int64_t node = -1;
};

inline void ensure_grad(TensorImpl& t) {
    if (t.grad.size() != t.data.size()) t.grad.assign(t.data.size(), 0.0);
}

// Value-semantics handle onto a shared immutable-after-construction buffer.
// Gradients live beside the data and are filled by Tape::backward.
class Tensor {
public:
    Tensor() : impl_(std::make_shared<TensorImpl>()) {}

    static Tensor zeros(Shape s, bool requires_grad = false) {
        return filled(std::move(s), 0.0, requires_grad);
    }
    static Tensor filled(Shape s, double v, bool requires_grad = false) {
        Tensor t;
        t.impl_->data.assign(static_cast<size_t>(shape_numel(s)), v);
        t.impl_->shape = std::move(s);
        t.impl_->requires_grad = requires_grad;
        return t;
    }
    static Tensor from_data(Shape s, std::vector<double> d, bool requires_grad = false) {
        if (shape_numel(s) != static_cast<int64_t>(d.size()))
            throw shape_error("from_data: shape " + shape_str(s) + " does not match " +
                              std::to_string(d.size()) + " values");
        Tensor t;
        t.impl_->shape = std::move(s);
        t.impl_->data = std::move(d);
        t.impl_->requires_grad = requires_grad;
        return t;
    }
    static Tensor scalar(double v, bool requires_grad = false) {
        return from_data({1}, {v}, requires_grad);
    }

    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
    int64_t dim(int d) const {
        if (d < 0) d += rank();
        return impl_->shape[static_cast<size_t>(d)];
    }

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool b) { impl_->requires_grad = b; }

    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<double>& grad() const { return impl_->grad; }
    std::vector<double>& grad() { return impl_->grad; }
    void zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

    double item() const {
        if (numel() != 1) throw contract_error("item: tensor has " + std::to_string(numel()) + " elements");
        return impl_->data[0];
    }
    double at(std::initializer_list<int64_t> idx) const {
        auto st = row_major_strides(impl_->shape);
        int64_t off = 0;
        size_t d = 0;
        for (int64_t i : idx) off += i * st[d++];
        return impl_->data[static_cast<size_t>(off)];
    }

    Tensor detach() const {
        Tensor t;
        t.impl_->shape = impl_->shape;
        t.impl_->data = impl_->data;
        return t;
    }

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Dynamic tape, rebuilt per forward pass. Declaring one activates it for the
// enclosing scope (RAII, nestable); ops record only while a tape is active and
// some input requires a gradient. Single-threaded by contract: one tape, one
// optimizer state, no shared mutation.
class Tape {
public:
    Tape() : prev_(current_ref()) { current_ref() = this; }
    ~Tape() { current_ref() = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current() { return current_ref(); }

    int64_t record(std::function<void()> fn, std::shared_ptr<TensorImpl> out) {
        nodes_.push_back(std::move(fn));
        outs_.push_back(std::move(out));
        return static_cast<int64_t>(nodes_.size()) - 1;
    }
    size_t size() const { return nodes_.size(); }

    // Reverse sweep from a scalar loss. Each node runs exactly once per call.
    // Leaf gradients accumulate across calls; op-output gradients are scratch
    // and reset every sweep, so a second backward adds exactly one more
    // contribution instead of compounding.
    void backward(const Tensor& loss) {
        if (loss.numel() != 1)
            throw contract_error("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        if (loss.impl()->tape != this)
            throw contract_error("backward: loss is not on the active tape");
        for (auto& o : outs_)
            if (!o->grad.empty()) std::fill(o->grad.begin(), o->grad.end(), 0.0);
        ensure_grad(*loss.impl());
        loss.impl()->grad[0] = 1.0;
        for (int64_t i = static_cast<int64_t>(nodes_.size()) - 1; i >= 0; --i) nodes_[static_cast<size_t>(i)]();
    }

private:
    static Tape*& current_ref() {
        static thread_local Tape* t = nullptr;
        return t;
    }
    std::vector<std::function<void()>> nodes_;
    std::vector<std::shared_ptr<TensorImpl>> outs_;
    Tape* prev_;
};

inline void backward(const Tensor& loss) {
    if (!Tape::current()) throw contract_error("backward: no active tape");
    Tape::current()->backward(loss);
}

namespace detail {

inline bool want_grad(std::initializer_list<const Tensor*> ins) {
    if (!Tape::current()) return false;
    for (const Tensor* t : ins)
        if ((*t).requires_grad()) return true;
    return false;
}

inline void mark(Tensor& out, std::function<void()> fn) {
    out.set_requires_grad(true);
    out.impl()->tape = Tape::current();
    out.impl()->node = Tape::current()->record(std::move(fn), out.impl());
}

// Strides of `in` laid over the broadcast output coordinate system
// (0 where the input dimension is missing or has extent 1).
inline std::vector<int64_t> bcast_strides(const Shape& in, const Shape& out) {
    auto st = row_major_strides(in);
    std::vector<int64_t> r(out.size(), 0);
    int off = static_cast<int>(out.size()) - static_cast<int>(in.size());
    for (size_t d = 0; d < out.size(); ++d) {
        int di = static_cast<int>(d) - off;
        if (di >= 0 && in[static_cast<size_t>(di)] != 1) r[d] = st[static_cast<size_t>(di)];
    }
    return r;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    size_t r = std::max(a.size(), b.size());
    Shape out(r, 1);
    for (size_t d = 0; d < r; ++d) {
        int64_t da = d < r - a.size() ? 1 : a[d - (r - a.size())];
        int64_t db = d < r - b.size() ? 1 : b[d - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw shape_error(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                              " are not broadcastable");
        out[d] = std::max(da, db);
    }
    return out;
}

template <class F>
inline void for_each_bcast(const Shape& out, const std::vector<int64_t>& sa,
                           const std::vector<int64_t>& sb, F&& f) {
    int r = static_cast<int>(out.size());
    int64_t n = shape_numel(out);
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    int64_t ia = 0, ib = 0;
    for (int64_t o = 0;;) {
        f(o, ia, ib);
        if (++o == n) return;
        for (int d = r - 1; d >= 0; --d) {
            ia += sa[static_cast<size_t>(d)];
            ib += sb[static_cast<size_t>(d)];
            if (++idx[static_cast<size_t>(d)] < out[static_cast<size_t>(d)]) break;
            ia -= sa[static_cast<size_t>(d)] * out[static_cast<size_t>(d)];
            ib -= sb[static_cast<size_t>(d)] * out[static_cast<size_t>(d)];
            idx[static_cast<size_t>(d)] = 0;
        }
    }
}

// fwd(a,b) -> value; da(a,b) and db(a,b) are the local partials.
template <class Fwd, class Da, class Db>
inline Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Da da, Db db) {
    Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
    auto sa = bcast_strides(a.shape(), out_shape);
    auto sb = bcast_strides(b.shape(), out_shape);
    Tensor out = Tensor::zeros(out_shape);
    {
        const double* ad = a.data().data();
        const double* bd = b.data().data();
        double* od = out.data().data();
        for_each_bcast(out_shape, sa, sb,
                       [&](int64_t o, int64_t ia, int64_t ib) { od[o] = fwd(ad[ia], bd[ib]); });
    }
    if (want_grad({&a, &b})) {
        auto ai = a.impl();
        auto bi = b.impl();
        auto oi = out.impl();
        mark(out, [=]() {
            if (oi->grad.empty()) return;
            const double* ad = ai->data.data();
            const double* bd = bi->data.data();
            const double* g = oi->grad.data();
            bool ga = ai->requires_grad, gb = bi->requires_grad;
            if (ga) ensure_grad(*ai);
            if (gb) ensure_grad(*bi);
            for_each_bcast(oi->shape, bcast_strides(ai->shape, oi->shape),
                           bcast_strides(bi->shape, oi->shape), [&](int64_t o, int64_t ia, int64_t ib) {
                               if (ga) ai->grad[static_cast<size_t>(ia)] += g[o] * da(ad[ia], bd[ib]);
                               if (gb) bi->grad[static_cast<size_t>(ib)] += g[o] * db(ad[ia], bd[ib]);
                           });
        });
    }
    return out;
}

// dfdx(x, y) is evaluated from the saved forward buffers.
template <class Fwd, class Dfdx>
inline Tensor unary_op(const Tensor& x, Fwd fwd, Dfdx dfdx) {
    Tensor out = Tensor::zeros(x.shape());
    const double* xd = x.data().data();
    double* od = out.data().data();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) od[i] = fwd(xd[i]);
    if (want_grad({&x})) {
        auto xi = x.impl();
        auto oi = out.impl();
        mark(out, [=]() {
            if (oi->grad.empty()) return;
            ensure_grad(*xi);
            const double* xd2 = xi->data.data();
            const double* yd = oi->data.data();
            const double* g = oi->grad.data();
            int64_t m = static_cast<int64_t>(xi->data.size());
            for (int64_t i = 0; i < m; ++i) xi->grad[static_cast<size_t>(i)] += g[i] * dfdx(xd2[i], yd[i]);
        });
    }
    return out;
}

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}
// Ties route the gradient to the first argument.
inline Tensor minimum(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "minimum", [](double x, double y) { return x <= y ? x : y; },
        [](double x, double y) { return x <= y ? 1.0 : 0.0; },
        [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}
inline Tensor maximum(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "maximum", [](double x, double y) { return x >= y ? x : y; },
        [](double x, double y) { return x >= y ? 1.0 : 0.0; },
        [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

inline Tensor relu(const Tensor& x) {
    return detail::unary_op(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}
inline Tensor sigmoid(const Tensor& x) {
    return detail::unary_op(
        x,
        [](double v) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}
inline Tensor exp(const Tensor& x) {
    return detail::unary_op(
        x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}
inline Tensor log(const Tensor& x) {
    return detail::unary_op(
        x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}
inline Tensor sqrt(const Tensor& x) {
    return detail::unary_op(
        x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}
inline Tensor abs(const Tensor& x) {
    return detail::unary_op(
        x, [](double v) { return std::fabs(v); },
        [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}
inline Tensor neg(const Tensor& x) {
    return detail::unary_op(
        x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}
inline Tensor scale(const Tensor& x, double s) {
    return detail::unary_op(
        x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}
inline Tensor add_scalar(const Tensor& x, double c) {
    return detail::unary_op(
        x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// Batched matrix product over the trailing two dimensions; leading batch
// dimensions broadcast. Backward: a.grad += g b^T, b.grad += a^T g.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw shape_error("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
                          " and " + shape_str(b.shape()));
    int64_t m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
    if (k != k2)
        throw shape_error("matmul: inner dimensions differ: " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    Shape ba(a.shape().begin(), a.shape().end() - 2);
    Shape bb(b.shape().begin(), b.shape().end() - 2);
    Shape batch = detail::broadcast_shape(ba, bb, "matmul");
    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor out = Tensor::zeros(out_shape);

    auto sa = detail::bcast_strides(ba, batch);
    auto sb = detail::bcast_strides(bb, batch);
    const int64_t amat = m * k, bmat = k * n, omat = m * n;
    {
        const double* ad = a.data().data();
        const double* bd = b.data().data();
        double* od = out.data().data();
        detail::for_each_bcast(batch, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
            detail::ECMap A(ad + ia * amat, m, k);
            detail::ECMap B(bd + ib * bmat, k, n);
            detail::EMap C(od + o * omat, m, n);
            C.noalias() = A * B;
        });
    }
    if (detail::want_grad({&a, &b})) {
        auto ai = a.impl();
        auto bi = b.impl();
        auto oi = out.impl();
        detail::mark(out, [=]() {
            if (oi->grad.empty()) return;
            bool ga = ai->requires_grad, gb = bi->requires_grad;
            if (ga) ensure_grad(*ai);
            if (gb) ensure_grad(*bi);
            const double* ad = ai->data.data();
            const double* bd = bi->data.data();
            const double* g = oi->grad.data();
            detail::for_each_bcast(batch, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
                detail::ECMap A(ad + ia * amat, m, k);
                detail::ECMap B(bd + ib * bmat, k, n);
                detail::ECMap G(g + o * omat, m, n);
                if (ga) {
                    detail::EMap GA(ai->grad.data() + ia * amat, m, k);
                    GA.noalias() += G * B.transpose();
                }
                if (gb) {
                    detail::EMap GB(bi->grad.data() + ib * bmat, k, n);
                    GB.noalias() += A.transpose() * G;
                }
            });
        });
    }
    return out;
}

inline Tensor transpose2d(const Tensor& x) {
    if (x.rank() != 2) throw shape_error("transpose2d: expected rank 2, got " + shape_str(x.shape()));
    int64_t m = x.dim(0), n = x.dim(1);
    Tensor out = Tensor::zeros({n, m});
    const double* xd = x.data().data();
    double* od = out.data().data();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) od[j * m + i] = xd[i * n + j];
    if (detail::want_grad({&x})) {
        auto xi = x.impl();
        auto oi = out.impl();
        detail::mark(out, [=]() {
            if (oi->grad.empty()) return;
            ensure_grad(*xi);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j)
                    xi->grad[static_cast<size_t>(i * n + j)] += oi->grad[static_cast<size_t>(j * m + i)];
        });
    }
    return out;
}

inline Tensor reshape(const Tensor& x, Shape s) {
    if (shape_numel(s) != x.numel())
        throw shape_error("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(s));
    Tensor out = Tensor::from_data(std::move(s), x.data());
    if (detail::want_grad({&x})) {
        auto xi = x.impl();
        auto oi = out.impl();
        detail::mark(out, [=]() {
            if (oi->grad.empty()) return;
            ensure_grad(*xi);
            for (size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
        });
    }
    return out;
}

inline Tensor index_select(const Tensor& x, int axis, const std::vector<int64_t>& idx) {
    if (axis < 0) axis += x.rank();
    if (axis < 0 || axis >= x.rank())
        throw contract_error("index_select: invalid axis for shape " + shape_str(x.shape()));
    for (int64_t i : idx)
        if (i < 0 || i >= x.dim(axis))
            throw contract_error("index_select: index " + std::to_string(i) + " out of range for " +
                                 shape_str(x.shape()));
    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = static_cast<int64_t>(idx.size());
    Tensor out = Tensor::zeros(out_shape);

    auto xst = row_major_strides(x.shape());
    int64_t ax_stride = xst[static_cast<size_t>(axis)];
    int64_t extent = x.dim(axis);
    // Decompose positions as (outer, sel, inner).
    int64_t inner = ax_stride;
    int64_t outer = x.numel() / (extent * inner);
    int64_t nsel = static_cast<int64_t>(idx.size());
    const double* xd = x.data().data();
    double* od = out.data().data();
    for (int64_t u = 0; u < outer; ++u)
        for (int64_t s = 0; s < nsel; ++s) {
            const double* src = xd + u * extent * inner + idx[static_cast<size_t>(s)] * inner;
            double* dst = od + (u * nsel + s) * inner;
            std::copy(src, src + inner, dst);
        }
    if (detail::want_grad({&x})) {
        auto xi = x.impl();
        auto oi = out.impl();
        auto sel = idx;
        detail::mark(out, [=]() {
            if (oi->grad.empty()) return;
            ensure_grad(*xi);
            for (int64_t u = 0; u < outer; ++u)
                for (int64_t s = 0; s < nsel; ++s) {
                    const double* g = oi->grad.data() + (u * nsel + s) * inner;
                    double* dst = xi->grad.data() + u * extent * inner + sel[static_cast<size_t>(s)] * inner;
                    for (int64_t i = 0; i < inner; ++i) dst[i] += g[i];
                }
        });
    }
    return out;
}

inline Tensor concat(const std::vector<Tensor>& ts, int axis) {
    if (ts.empty()) throw contract_error("concat: no tensors");
    int r = ts[0].rank();
    if (axis < 0) axis += r;
    Shape out_shape = ts[0].shape();
    int64_t total = 0;
    for (const Tensor& t : ts) {
        if (t.rank() != r) throw shape_error("concat: rank mismatch");
        for (int d = 0; d < r; ++d)
            if (d != axis && t.dim(d) != out_shape[static_cast<size_t>(d)])
                throw shape_error("concat: shape mismatch " + shape_str(t.shape()) + " vs " +
                                  shape_str(ts[0].shape()));
        total += t.dim(axis);
    }
    out_shape[static_cast<size_t>(axis)] = total;
    Tensor out = Tensor::zeros(out_shape);

    auto ost = row_major_strides(out_shape);
    int64_t inner = ost[static_cast<size_t>(axis)];
    int64_t outer = out.numel() / (total * inner);
    double* od = out.data().data();
    int64_t off = 0;
    bool rec = false;
    for (const Tensor& t : ts) rec = rec || t.requires_grad();
    rec = rec && Tape::current() != nullptr;
    std::vector<int64_t> offsets;
    for (const Tensor& t : ts) {
        int64_t e = t.dim(axis);
        const double* td = t.data().data();
        for (int64_t u = 0; u < outer; ++u)
            std::copy(td + u * e * inner, td + (u + 1) * e * inner, od + (u * total + off) * inner);
        offsets.push_back(off);
        off += e;
    }
    if (rec) {
        std::vector<std::shared_ptr<TensorImpl>> ins;
        for (const Tensor& t : ts) ins.push_back(t.impl());
        auto oi = out.impl();
        detail::mark(out, [=]() {
            if (oi->grad.empty()) return;
            for (size_t ti = 0; ti < ins.size(); ++ti) {
                auto& xi = ins[ti];
                if (!xi->requires_grad) continue;
                ensure_grad(*xi);
                int64_t e = xi->shape[static_cast<size_t>(axis)];
                int64_t o0 = offsets[ti];
                for (int64_t u = 0; u < outer; ++u) {
                    const double* g = oi->grad.data() + (u * total + o0) * inner;
                    double* dst = xi->grad.data() + u * e * inner;
                    for (int64_t i = 0; i < e * inner; ++i) dst[i] += g[i];
                }
            }
        });
    }
    return out;
}

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor out = Tensor::from_data({1}, {s});
    if (detail::want_grad({&x})) {
        auto xi = x.impl();
        auto oi = out.impl();
        detail::mark(out, [=]() {
            if (oi->grad.empty()) return;
            ensure_grad(*xi);
            double g = oi->grad[0];
            for (size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += g;
        });
    }
    return out;
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

namespace detail {
// Iterate lines along `axis`: calls f(base_offset, stride, extent).
template <class F>
inline void for_each_line(const Shape& shape, int axis, F&& f) {
    auto st = row_major_strides(shape);
    int64_t stride = st[static_cast<size_t>(axis)];
    int64_t extent = shape[static_cast<size_t>(axis)];
    int64_t n = shape_numel(shape);
    int64_t block = stride * extent;
    for (int64_t base = 0; base < n; base += block)
        for (int64_t i = 0; i < stride; ++i) f(base + i, stride, extent);
}

inline int norm_axis(const Tensor& x, int axis, const char* op) {
    if (axis < 0) axis += x.rank();
    if (axis < 0 || axis >= x.rank())
        throw contract_error(std::string(op) + ": invalid axis for shape " + shape_str(x.shape()));
    return axis;
}
}  // namespace detail

inline Tensor sum_axis(const Tensor& x, int axis) {
    axis = detail::norm_axis(x, axis, "sum_axis");
    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = 1;
    Tensor out = Tensor::zeros(out_shape);
    // Output line index = compressed position of the line.
    int64_t li = 0;
    const double* xd = x.data().data();
    double* od = out.data().data();
    detail::for_each_line(x.shape(), axis, [&](int64_t base, int64_t stride, int64_t extent) {
        double s = 0.0;
        for (int64_t j = 0; j < extent; ++j) s += xd[base + j * stride];
        od[li++] = s;
    });
    if (detail::want_grad({&x})) {
        auto xi = x.impl();
        auto oi = out.impl();
        detail::mark(out, [=]() {
            if (oi->grad.empty()) return;
            ensure_grad(*xi);
            int64_t k = 0;
            detail::for_each_line(xi->shape, axis, [&](int64_t base, int64_t stride, int64_t extent) {
                double g = oi->grad[static_cast<size_t>(k++)];
                for (int64_t j = 0; j < extent; ++j) xi->grad[static_cast<size_t>(base + j * stride)] += g;
            });
        });
    }
    return out;
}

// Per-line maximum as a constant (no gradient); used for stable log-sum-exp.
inline Tensor max_axis_detached(const Tensor& x, int axis) {
    axis = detail::norm_axis(x, axis, "max_axis_detached");
    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = 1;
    Tensor out = Tensor::zeros(out_shape);
    int64_t li = 0;
    const double* xd = x.data().data();
    double* od = out.data().data();
    detail::for_each_line(x.shape(), axis, [&](int64_t base, int64_t stride, int64_t extent) {
        double m = xd[base];
        for (int64_t j = 1; j < extent; ++j) m = std::max(m, xd[base + j * stride]);
        od[li++] = m;
    });
    return out;
}

// Exp-normalization along `axis` with max-subtraction; sums to 1 per line.
inline Tensor softmax_axis(const Tensor& x, int axis) {
    axis = detail::norm_axis(x, axis, "softmax_axis");
    Tensor out = Tensor::zeros(x.shape());
    const double* xd = x.data().data();
    double* od = out.data().data();
    detail::for_each_line(x.shape(), axis, [&](int64_t base, int64_t stride, int64_t extent) {
        double m = xd[base];
        for (int64_t j = 1; j < extent; ++j) m = std::max(m, xd[base + j * stride]);
        double s = 0.0;
        for (int64_t j = 0; j < extent; ++j) {
            double e = std::exp(xd[base + j * stride] - m);
            od[base + j * stride] = e;
            s += e;
        }
        for (int64_t j = 0; j < extent; ++j) od[base + j * stride] /= s;
    });
    if (detail::want_grad({&x})) {
        auto xi = x.impl();
        auto oi = out.impl();
        detail::mark(out, [=]() {
            if (oi->grad.empty()) return;
            ensure_grad(*xi);
            const double* y = oi->data.data();
            const double* g = oi->grad.data();
            detail::for_each_line(xi->shape, axis, [&](int64_t base, int64_t stride, int64_t extent) {
                double dot = 0.0;
                for (int64_t j = 0; j < extent; ++j) dot += g[base + j * stride] * y[base + j * stride];
                for (int64_t j = 0; j < extent; ++j) {
                    int64_t p = base + j * stride;
                    xi->grad[static_cast<size_t>(p)] += y[p] * (g[p] - dot);
                }
            });
        });
    }
    return out;
}

// (x - mean) / sqrt(var + 1e-5) * gain + bias along `axis`; gain and bias are
// rank-1 with the extent of the normalized axis. Variance is biased (1/N).
inline Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, int axis) {
    axis = detail::norm_axis(x, axis, "layernorm");
    int64_t extent = x.dim(axis);
    if (gain.numel() != extent || bias.numel() != extent)
        throw shape_error("layernorm: gain/bias extents " + shape_str(gain.shape()) + "/" +
                          shape_str(bias.shape()) + " do not match axis extent " + std::to_string(extent));
    constexpr double kEps = 1e-5;
    Tensor out = Tensor::zeros(x.shape());
    const double* xd = x.data().data();
    const double* gd = gain.data().data();
    const double* bd = bias.data().data();
    double* od = out.data().data();
    detail::for_each_line(x.shape(), axis, [&](int64_t base, int64_t stride, int64_t n) {
        double mu = 0.0;
        for (int64_t j = 0; j < n; ++j) mu += xd[base + j * stride];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            double d = xd[base + j * stride] - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        double inv = 1.0 / std::sqrt(var + kEps);
        for (int64_t j = 0; j < n; ++j)
            od[base + j * stride] = (xd[base + j * stride] - mu) * inv * gd[j] + bd[j];
    });
    if (detail::want_grad({&x, &gain, &bias})) {
        auto xi = x.impl();
        auto gi = gain.impl();
        auto bi = bias.impl();
        auto oi = out.impl();
        detail::mark(out, [=]() {
            if (oi->grad.empty()) return;
            bool wx = xi->requires_grad, wg = gi->requires_grad, wb = bi->requires_grad;
            if (wx) ensure_grad(*xi);
            if (wg) ensure_grad(*gi);
            if (wb) ensure_grad(*bi);
            const double* xd2 = xi->data.data();
            const double* gd2 = gi->data.data();
            const double* g = oi->grad.data();
            detail::for_each_line(xi->shape, axis, [&](int64_t base, int64_t stride, int64_t n) {
                double mu = 0.0;
                for (int64_t j = 0; j < n; ++j) mu += xd2[base + j * stride];
                mu /= static_cast<double>(n);
                double var = 0.0;
                for (int64_t j = 0; j < n; ++j) {
                    double d = xd2[base + j * stride] - mu;
                    var += d * d;
                }
                var /= static_cast<double>(n);
                double inv = 1.0 / std::sqrt(var + kEps);
                double mg = 0.0, mgx = 0.0;
                for (int64_t j = 0; j < n; ++j) {
                    int64_t p = base + j * stride;
                    double xh = (xd2[p] - mu) * inv;
                    double gh = g[p] * gd2[j];
                    mg += gh;
                    mgx += gh * xh;
                }
                mg /= static_cast<double>(n);
                mgx /= static_cast<double>(n);
                for (int64_t j = 0; j < n; ++j) {
                    int64_t p = base + j * stride;
                    double xh = (xd2[p] - mu) * inv;
                    if (wx) xi->grad[static_cast<size_t>(p)] += (g[p] * gd2[j] - mg - xh * mgx) * inv;
                    if (wg) gi->grad[static_cast<size_t>(j)] += g[p] * xh;
                    if (wb) bi->grad[static_cast<size_t>(j)] += g[p];
                }
            });
        });
    }
    return out;
}

inline bool all_finite(const Tensor& t) {
    for (double v : t.data())
        if (!std::isfinite(v)) return false;
    return true;
}

inline void check_finite(const Tensor& t, const std::string& stage) {
    if (!all_finite(t)) throw numeric_error("non-finite values at stage '" + stage + "'");
}

// ---------------------------------------------------------------------------
// Optimizer

struct NamedParam {
    std::string name;
    Tensor tensor;
};

struct AdamState {
    std::vector<std::vector<double>> m, v;
    int64_t step = 0;
};

inline void adam_init(AdamState& st, const std::vector<NamedParam>& params) {
    st.m.clear();
    st.v.clear();
    st.step = 0;
    for (const auto& p : params) {
        st.m.emplace_back(p.tensor.numel(), 0.0);
        st.v.emplace_back(p.tensor.numel(), 0.0);
    }
}

// Bias-corrected adaptive update; deterministic given identical inputs.
inline void adam_step(std::vector<NamedParam>& params, AdamState& st, double lr, double beta1 = 0.9,
                      double beta2 = 0.999, double eps = 1e-8) {
    if (st.m.size() != params.size())
        throw contract_error("adam_step: state does not match parameter list");
    ++st.step;
    double c1 = 1.0 - std::pow(beta1, static_cast<double>(st.step));
    double c2 = 1.0 - std::pow(beta2, static_cast<double>(st.step));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& t = params[pi].tensor;
        if (st.m[pi].size() != static_cast<size_t>(t.numel()))
            throw contract_error("adam_step: state shape mismatch for parameter '" + params[pi].name + "'");
        const double* g = t.has_grad() ? t.grad().data() : nullptr;
        auto& m = st.m[pi];
        auto& v = st.v[pi];
        double* d = t.data().data();
        for (size_t i = 0; i < m.size(); ++i) {
            double gi = g ? g[i] : 0.0;
            if (!std::isfinite(gi))
                throw training_error("non-finite gradient for parameter '" + params[pi].name + "'");
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            double mh = m[i] / c1;
            double vh = v[i] / c2;
            d[i] -= lr * mh / (std::sqrt(vh) + eps);
        }
    }
}

inline void zero_grads(std::vector<NamedParam>& params) {
    for (auto& p : params) p.tensor.zero_grad();
}

// Rescales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
inline double clip_grad_norm(std::vector<NamedParam>& params, double max_norm) {
    double sq = 0;
    for (auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad()) sq += g * g;
    }
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
        double s = max_norm / norm;
        for (auto& p : params) {
            if (!p.tensor.has_grad()) continue;
            for (double& g : p.tensor.grad()) g *= s;
        }
    }
    return norm;
}

}  // namespace protoneck
