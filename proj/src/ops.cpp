#include "aurec/ops.hpp"

#include <array>
#include <cmath>
#include <cstring>

#include "aurec/kernels.hpp"

namespace aurec::ops {

namespace {

constexpr int kMaxRank = 8;

int normalize_axis(int axis, int rank) {
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank)
        throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                             std::to_string(rank));
    return axis;
}

void check_same_dtype(const Tensor& a, const Tensor& b) {
    if (a.dtype() != b.dtype())
        throw UsageError(std::string("dtype mismatch: ") + dtype_name(a.dtype()) + " vs " +
                         dtype_name(b.dtype()));
}

// (outer, len, inner) decomposition of one axis.
void axis_decomp(const Shape& s, int axis, int64_t& outer, int64_t& len, int64_t& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    len = s[static_cast<size_t>(axis)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

template <typename F>
void with_dtype(DType dt, F&& f) {
    if (dt == DType::f32) f(float{});
    else f(double{});
}

bool tracked(std::initializer_list<const Tensor*> ts) {
    if (!Tape::active()) return false;
    for (const Tensor* t : ts)
        if (t->requires_grad()) return true;
    return false;
}

void mark_and_record(Tensor& out, std::function<void()> fn) {
    out.impl()->requires_grad = true;
    Tape::active()->record(out.impl(), std::move(fn));
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
    const size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
    Shape out(r);
    for (size_t i = 0; i < r; ++i) {
        const int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
        const int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
        if (da != db && da != 1 && db != 1)
            throw DimensionError("shapes " + shape_str(a) + " and " + shape_str(b) +
                                 " are not broadcastable");
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `in` aligned to the broadcast shape `out` (0 on broadcast axes).
std::array<int64_t, kMaxRank> bcast_strides(const Shape& in, const Shape& out) {
    std::array<int64_t, kMaxRank> st{};
    const size_t r = out.size(), ri = in.size();
    int64_t stride = 1;
    for (size_t i = ri; i-- > 0;) {
        const size_t oi = i + (r - ri);
        st[oi] = (in[i] == 1 && out[oi] != 1) ? 0 : stride;
        stride *= in[i];
    }
    return st;
}

// Odometer walk over `dims` applying f(out_flat, off_a, off_b).
template <typename F>
void bcast_walk(const Shape& dims, const std::array<int64_t, kMaxRank>& sa,
                const std::array<int64_t, kMaxRank>& sb, F&& f) {
    const int rank = static_cast<int>(dims.size());
    const int64_t n = shape_numel(dims);
    std::array<int64_t, kMaxRank> coords{};
    int64_t oa = 0, ob = 0;
    for (int64_t i = 0; i < n; ++i) {
        f(i, oa, ob);
        for (int ax = rank - 1; ax >= 0; --ax) {
            ++coords[static_cast<size_t>(ax)];
            oa += sa[static_cast<size_t>(ax)];
            ob += sb[static_cast<size_t>(ax)];
            if (coords[static_cast<size_t>(ax)] < dims[static_cast<size_t>(ax)]) break;
            coords[static_cast<size_t>(ax)] = 0;
            oa -= sa[static_cast<size_t>(ax)] * dims[static_cast<size_t>(ax)];
            ob -= sb[static_cast<size_t>(ax)] * dims[static_cast<size_t>(ax)];
        }
    }
}

enum class BinKind { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinKind kind) {
    check_same_dtype(a, b);
    const Shape oshape = broadcast_shape(a.shape(), b.shape());
    Tensor out = Tensor::empty(oshape, a.dtype());
    const bool same = a.shape() == oshape && b.shape() == oshape;
    with_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>().data();
        const T* pb = b.data<T>().data();
        T* py = out.data<T>().data();
        const int64_t n = out.numel();
        if (same) {
            switch (kind) {
                case BinKind::Add:
#pragma omp parallel for schedule(static)
                    for (int64_t i = 0; i < n; ++i) py[i] = pa[i] + pb[i];
                    break;
                case BinKind::Sub:
#pragma omp parallel for schedule(static)
                    for (int64_t i = 0; i < n; ++i) py[i] = pa[i] - pb[i];
                    break;
                case BinKind::Mul:
#pragma omp parallel for schedule(static)
                    for (int64_t i = 0; i < n; ++i) py[i] = pa[i] * pb[i];
                    break;
            }
        } else {
            const auto sa = bcast_strides(a.shape(), oshape);
            const auto sb = bcast_strides(b.shape(), oshape);
            switch (kind) {
                case BinKind::Add:
                    bcast_walk(oshape, sa, sb,
                               [&](int64_t i, int64_t oa, int64_t ob) { py[i] = pa[oa] + pb[ob]; });
                    break;
                case BinKind::Sub:
                    bcast_walk(oshape, sa, sb,
                               [&](int64_t i, int64_t oa, int64_t ob) { py[i] = pa[oa] - pb[ob]; });
                    break;
                case BinKind::Mul:
                    bcast_walk(oshape, sa, sb,
                               [&](int64_t i, int64_t oa, int64_t ob) { py[i] = pa[oa] * pb[ob]; });
                    break;
            }
        }
    });
    if (tracked({&a, &b})) {
        mark_and_record(out, [a, b, out, kind, oshape, same]() {
            if (!out.impl()->grad_allocated()) return;
            with_dtype(a.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* dy = out.grad<T>().data();
                const int64_t n = out.numel();
                T* da = nullptr;
                T* db = nullptr;
                if (a.requires_grad()) {
                    a.impl()->ensure_grad();
                    da = const_cast<TensorImpl*>(a.impl().get())->dtype == DType::f32
                             ? reinterpret_cast<T*>(a.impl()->grad32.data())
                             : reinterpret_cast<T*>(a.impl()->grad64.data());
                }
                if (b.requires_grad()) {
                    b.impl()->ensure_grad();
                    db = b.impl()->dtype == DType::f32 ? reinterpret_cast<T*>(b.impl()->grad32.data())
                                                       : reinterpret_cast<T*>(b.impl()->grad64.data());
                }
                const T* pa = a.data<T>().data();
                const T* pb = b.data<T>().data();
                if (same) {
                    switch (kind) {
                        case BinKind::Add:
                            if (da)
                                for (int64_t i = 0; i < n; ++i) da[i] += dy[i];
                            if (db)
                                for (int64_t i = 0; i < n; ++i) db[i] += dy[i];
                            break;
                        case BinKind::Sub:
                            if (da)
                                for (int64_t i = 0; i < n; ++i) da[i] += dy[i];
                            if (db)
                                for (int64_t i = 0; i < n; ++i) db[i] -= dy[i];
                            break;
                        case BinKind::Mul:
                            if (da)
                                for (int64_t i = 0; i < n; ++i) da[i] += dy[i] * pb[i];
                            if (db)
                                for (int64_t i = 0; i < n; ++i) db[i] += dy[i] * pa[i];
                            break;
                    }
                } else {
                    const auto sa = bcast_strides(a.shape(), oshape);
                    const auto sb = bcast_strides(b.shape(), oshape);
                    bcast_walk(oshape, sa, sb, [&](int64_t i, int64_t oa, int64_t ob) {
                        switch (kind) {
                            case BinKind::Add:
                                if (da) da[oa] += dy[i];
                                if (db) db[ob] += dy[i];
                                break;
                            case BinKind::Sub:
                                if (da) da[oa] += dy[i];
                                if (db) db[ob] -= dy[i];
                                break;
                            case BinKind::Mul:
                                if (da) da[oa] += dy[i] * pb[ob];
                                if (db) db[ob] += dy[i] * pa[oa];
                                break;
                        }
                    });
                }
            });
        });
    }
    return out;
}

template <typename T>
T* grad_ptr(const Tensor& t) {
    t.impl()->ensure_grad();
    if constexpr (std::is_same_v<T, float>) return t.impl()->grad32.data();
    else return t.impl()->grad64.data();
}

template <typename T>
const T* grad_cptr(const Tensor& t) {
    if constexpr (std::is_same_v<T, float>) return t.impl()->grad32.data();
    else return t.impl()->grad64.data();
}

enum class UnKind { Relu, LeakyRelu, Elu, Log, Clamp, Affine };

Tensor unary(const Tensor& x, UnKind kind, double p0 = 0.0, double p1 = 0.0) {
    Tensor out = Tensor::empty(x.shape(), x.dtype());
    with_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>().data();
        T* py = out.data<T>().data();
        const int64_t n = x.numel();
        const T a0 = static_cast<T>(p0), a1 = static_cast<T>(p1);
        switch (kind) {
            case UnKind::Relu:
#pragma omp parallel for schedule(static)
                for (int64_t i = 0; i < n; ++i) py[i] = px[i] > T(0) ? px[i] : T(0);
                break;
            case UnKind::LeakyRelu:
#pragma omp parallel for schedule(static)
                for (int64_t i = 0; i < n; ++i) py[i] = px[i] > T(0) ? px[i] : a0 * px[i];
                break;
            case UnKind::Elu:
                for (int64_t i = 0; i < n; ++i) py[i] = kern::elu(px[i]);
                break;
            case UnKind::Log:
                for (int64_t i = 0; i < n; ++i) {
                    if (!(px[i] > T(0)))
                        throw DomainError("log of non-positive value " + std::to_string(px[i]));
                    py[i] = std::log(px[i]);
                }
                break;
            case UnKind::Clamp:
                for (int64_t i = 0; i < n; ++i) py[i] = std::min(std::max(px[i], a0), a1);
                break;
            case UnKind::Affine:
#pragma omp parallel for schedule(static)
                for (int64_t i = 0; i < n; ++i) py[i] = a0 * px[i] + a1;
                break;
        }
    });
    if (tracked({&x})) {
        mark_and_record(out, [x, out, kind, p0, p1]() {
            if (!out.impl()->grad_allocated() || !x.requires_grad()) return;
            with_dtype(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* px = x.data<T>().data();
                const T* dy = grad_cptr<T>(out);
                T* dx = grad_ptr<T>(x);
                const int64_t n = x.numel();
                const T a0 = static_cast<T>(p0), a1 = static_cast<T>(p1);
                switch (kind) {
                    case UnKind::Relu:
#pragma omp parallel for schedule(static)
                        for (int64_t i = 0; i < n; ++i)
                            if (px[i] > T(0)) dx[i] += dy[i];
                        break;
                    case UnKind::LeakyRelu:
#pragma omp parallel for schedule(static)
                        for (int64_t i = 0; i < n; ++i) dx[i] += dy[i] * (px[i] > T(0) ? T(1) : a0);
                        break;
                    case UnKind::Elu:
                        for (int64_t i = 0; i < n; ++i)
                            dx[i] += dy[i] * (px[i] > T(0) ? T(1) : std::exp(px[i]));
                        break;
                    case UnKind::Log:
                        for (int64_t i = 0; i < n; ++i) dx[i] += dy[i] / px[i];
                        break;
                    case UnKind::Clamp:
                        for (int64_t i = 0; i < n; ++i)
                            if (px[i] >= a0 && px[i] <= a1) dx[i] += dy[i];
                        break;
                    case UnKind::Affine:
#pragma omp parallel for schedule(static)
                        for (int64_t i = 0; i < n; ++i) dx[i] += dy[i] * a0;
                        break;
                }
            });
        });
    }
    return out;
}

} // namespace

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                             " changes element count");
    Tensor out = Tensor::empty(std::move(shape), x.dtype());
    with_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        std::memcpy(out.data<T>().data(), x.data<T>().data(),
                    sizeof(T) * static_cast<size_t>(x.numel()));
    });
    if (tracked({&x})) {
        mark_and_record(out, [x, out]() {
            if (!out.impl()->grad_allocated() || !x.requires_grad()) return;
            with_dtype(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* dy = grad_cptr<T>(out);
                T* dx = grad_ptr<T>(x);
                for (int64_t i = 0; i < x.numel(); ++i) dx[i] += dy[i];
            });
        });
    }
    return out;
}

Tensor narrow(const Tensor& x, int axis, int64_t start, int64_t len) {
    const int ax = normalize_axis(axis, x.rank());
    const int64_t extent = x.shape()[static_cast<size_t>(ax)];
    if (start < 0 || len <= 0 || start + len > extent)
        throw DimensionError("narrow [" + std::to_string(start) + "," + std::to_string(start + len) +
                             ") out of range for extent " + std::to_string(extent));
    Shape oshape = x.shape();
    oshape[static_cast<size_t>(ax)] = len;
    Tensor out = Tensor::empty(oshape, x.dtype());
    int64_t outer, axlen, inner;
    axis_decomp(x.shape(), ax, outer, axlen, inner);
    with_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>().data();
        T* py = out.data<T>().data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(py + o * len * inner, px + (o * axlen + start) * inner,
                        sizeof(T) * static_cast<size_t>(len * inner));
    });
    if (tracked({&x})) {
        mark_and_record(out, [x, out, ax, start, len]() {
            if (!out.impl()->grad_allocated() || !x.requires_grad()) return;
            int64_t outer, axlen, inner;
            axis_decomp(x.shape(), ax, outer, axlen, inner);
            with_dtype(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* dy = grad_cptr<T>(out);
                T* dx = grad_ptr<T>(x);
                for (int64_t o = 0; o < outer; ++o) {
                    T* dst = dx + (o * axlen + start) * inner;
                    const T* src = dy + o * len * inner;
                    for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                }
            });
        });
    }
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw UsageError("concat of zero tensors");
    const int ax = normalize_axis(axis, parts[0].rank());
    Shape oshape = parts[0].shape();
    int64_t total = 0;
    for (const Tensor& p : parts) {
        check_same_dtype(parts[0], p);
        if (p.rank() != parts[0].rank())
            throw DimensionError("concat rank mismatch");
        for (int i = 0; i < p.rank(); ++i)
            if (i != ax && p.shape()[static_cast<size_t>(i)] != oshape[static_cast<size_t>(i)])
                throw DimensionError("concat shape mismatch at axis " + std::to_string(i));
        total += p.shape()[static_cast<size_t>(ax)];
    }
    oshape[static_cast<size_t>(ax)] = total;
    Tensor out = Tensor::empty(oshape, parts[0].dtype());
    int64_t outer, olen, inner;
    axis_decomp(oshape, ax, outer, olen, inner);
    with_dtype(out.dtype(), [&](auto tag) {
        using T = decltype(tag);
        T* py = out.data<T>().data();
        int64_t off = 0;
        for (const Tensor& p : parts) {
            const int64_t plen = p.shape()[static_cast<size_t>(ax)];
            const T* px = p.data<T>().data();
            for (int64_t o = 0; o < outer; ++o)
                std::memcpy(py + (o * olen + off) * inner, px + o * plen * inner,
                            sizeof(T) * static_cast<size_t>(plen * inner));
            off += plen;
        }
    });
    bool rec = false;
    for (const Tensor& p : parts)
        if (p.requires_grad()) rec = true;
    if (Tape::active() && rec) {
        mark_and_record(out, [parts, out, ax]() {
            if (!out.impl()->grad_allocated()) return;
            int64_t outer, olen, inner;
            axis_decomp(out.shape(), ax, outer, olen, inner);
            with_dtype(out.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* dy = grad_cptr<T>(out);
                int64_t off = 0;
                for (const Tensor& p : parts) {
                    const int64_t plen = p.shape()[static_cast<size_t>(ax)];
                    if (p.requires_grad()) {
                        T* dx = grad_ptr<T>(p);
                        for (int64_t o = 0; o < outer; ++o) {
                            const T* src = dy + (o * olen + off) * inner;
                            T* dst = dx + o * plen * inner;
                            for (int64_t i = 0; i < plen * inner; ++i) dst[i] += src[i];
                        }
                    }
                    off += plen;
                }
            });
        });
    }
    return out;
}

Tensor stack(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw UsageError("stack of zero tensors");
    const int rank = parts[0].rank();
    if (axis < 0) axis += rank + 1;
    if (axis < 0 || axis > rank) throw DimensionError("stack axis out of range");
    std::vector<Tensor> reshaped;
    reshaped.reserve(parts.size());
    for (const Tensor& p : parts) {
        if (p.shape() != parts[0].shape()) throw DimensionError("stack shape mismatch");
        Shape s = p.shape();
        s.insert(s.begin() + axis, 1);
        reshaped.push_back(reshape(p, s));
    }
    return concat(reshaped, axis);
}

Tensor transpose(const Tensor& x, const std::vector<int>& perm) {
    const int rank = x.rank();
    if (static_cast<int>(perm.size()) != rank) throw DimensionError("transpose perm rank mismatch");
    std::vector<bool> seen(static_cast<size_t>(rank), false);
    Shape oshape(static_cast<size_t>(rank));
    for (int i = 0; i < rank; ++i) {
        const int p = perm[static_cast<size_t>(i)];
        if (p < 0 || p >= rank || seen[static_cast<size_t>(p)])
            throw DimensionError("transpose perm is not a permutation");
        seen[static_cast<size_t>(p)] = true;
        oshape[static_cast<size_t>(i)] = x.shape()[static_cast<size_t>(p)];
    }
    Tensor out = Tensor::empty(oshape, x.dtype());
    // in-strides aligned to out axes
    std::array<int64_t, kMaxRank> xst{};
    {
        std::array<int64_t, kMaxRank> st{};
        int64_t s = 1;
        for (int i = rank; i-- > 0;) {
            st[static_cast<size_t>(i)] = s;
            s *= x.shape()[static_cast<size_t>(i)];
        }
        for (int i = 0; i < rank; ++i) xst[static_cast<size_t>(i)] = st[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    }
    const std::array<int64_t, kMaxRank> zero{};
    with_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>().data();
        T* py = out.data<T>().data();
        bcast_walk(oshape, xst, zero, [&](int64_t i, int64_t ox, int64_t) { py[i] = px[ox]; });
    });
    if (tracked({&x})) {
        mark_and_record(out, [x, out, xst, oshape]() {
            if (!out.impl()->grad_allocated() || !x.requires_grad()) return;
            const std::array<int64_t, kMaxRank> zero{};
            with_dtype(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* dy = grad_cptr<T>(out);
                T* dx = grad_ptr<T>(x);
                bcast_walk(oshape, xst, zero, [&](int64_t i, int64_t ox, int64_t) { dx[ox] += dy[i]; });
            });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinKind::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinKind::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinKind::Mul); }

Tensor relu(const Tensor& x) { return unary(x, UnKind::Relu); }
Tensor leaky_relu(const Tensor& x, double slope) { return unary(x, UnKind::LeakyRelu, slope); }
Tensor elu(const Tensor& x) { return unary(x, UnKind::Elu); }
Tensor log(const Tensor& x) { return unary(x, UnKind::Log); }
Tensor clamp(const Tensor& x, double lo, double hi) { return unary(x, UnKind::Clamp, lo, hi); }
Tensor affine(const Tensor& x, double scale, double shift) {
    return unary(x, UnKind::Affine, scale, shift);
}

namespace {
Tensor l2n_impl(const Tensor& x, int axis, bool guard) {
    const int ax = normalize_axis(axis, x.rank());
    int64_t outer, len, inner;
    axis_decomp(x.shape(), ax, outer, len, inner);
    Tensor out = Tensor::empty(x.shape(), x.dtype());
    with_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const bool zero = kern::l2_normalize_fwd(x.data<T>().data(), out.data<T>().data(), outer,
                                                 len, inner, guard);
        if (zero && !guard) throw DomainError("l2_normalize of a zero vector");
    });
    if (tracked({&x})) {
        mark_and_record(out, [x, out, outer, len, inner]() {
            if (!out.impl()->grad_allocated() || !x.requires_grad()) return;
            with_dtype(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                kern::l2_normalize_bwd(x.data<T>().data(), out.data<T>().data(), grad_cptr<T>(out),
                                       grad_ptr<T>(x), outer, len, inner);
            });
        });
    }
    return out;
}
} // namespace

Tensor l2_normalize(const Tensor& x, int axis) { return l2n_impl(x, axis, false); }
Tensor l2_normalize_guarded(const Tensor& x, int axis) { return l2n_impl(x, axis, true); }

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace {
Tensor reduce_full(const Tensor& x, bool take_mean) {
    Tensor out = Tensor::empty(Shape{}, x.dtype());
    const int64_t n = x.numel();
    with_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>().data();
        T s = T(0);
        for (int64_t i = 0; i < n; ++i) s += px[i];
        out.data<T>()[0] = take_mean ? s / static_cast<T>(n) : s;
    });
    if (tracked({&x})) {
        mark_and_record(out, [x, out, take_mean, n]() {
            if (!out.impl()->grad_allocated() || !x.requires_grad()) return;
            with_dtype(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T g = grad_cptr<T>(out)[0] * (take_mean ? T(1) / static_cast<T>(n) : T(1));
                T* dx = grad_ptr<T>(x);
#pragma omp parallel for schedule(static)
                for (int64_t i = 0; i < n; ++i) dx[i] += g;
            });
        });
    }
    return out;
}

Tensor reduce_axis(const Tensor& x, int axis, bool take_mean) {
    const int ax = normalize_axis(axis, x.rank());
    int64_t outer, len, inner;
    axis_decomp(x.shape(), ax, outer, len, inner);
    if (len == 0) throw DomainError("reduction over an empty axis");
    Shape oshape = x.shape();
    oshape.erase(oshape.begin() + ax);
    Tensor out = Tensor::empty(oshape, x.dtype());
    with_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kern::reduce_sum_fwd(x.data<T>().data(), out.data<T>().data(), outer, len, inner,
                             take_mean ? T(1) / static_cast<T>(len) : T(1));
    });
    if (tracked({&x})) {
        mark_and_record(out, [x, out, outer, len, inner, take_mean]() {
            if (!out.impl()->grad_allocated() || !x.requires_grad()) return;
            with_dtype(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                kern::reduce_sum_bwd(grad_cptr<T>(out), grad_ptr<T>(x), outer, len, inner,
                                     take_mean ? T(1) / static_cast<T>(len) : T(1));
            });
        });
    }
    return out;
}
} // namespace

Tensor sum(const Tensor& x) { return reduce_full(x, false); }
Tensor mean(const Tensor& x) { return reduce_full(x, true); }
Tensor sum(const Tensor& x, int axis) { return reduce_axis(x, axis, false); }
Tensor mean(const Tensor& x, int axis) { return reduce_axis(x, axis, true); }

Tensor global_avg_pool_2d(const Tensor& x) {
    if (x.rank() < 3) throw DimensionError("global_avg_pool_2d needs rank >= 3, got " +
                                           shape_str(x.shape()));
    const int64_t W = x.shape()[static_cast<size_t>(x.rank() - 1)];
    const int64_t H = x.shape()[static_cast<size_t>(x.rank() - 2)];
    const int64_t len = H * W;
    const int64_t outer = x.numel() / len;
    Shape oshape(x.shape().begin(), x.shape().end() - 2);
    Tensor out = Tensor::empty(oshape, x.dtype());
    with_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kern::reduce_sum_fwd(x.data<T>().data(), out.data<T>().data(), outer, len, int64_t{1},
                             T(1) / static_cast<T>(len));
    });
    if (tracked({&x})) {
        mark_and_record(out, [x, out, outer, len]() {
            if (!out.impl()->grad_allocated() || !x.requires_grad()) return;
            with_dtype(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                kern::reduce_sum_bwd(grad_cptr<T>(out), grad_ptr<T>(x), outer, len, int64_t{1},
                                     T(1) / static_cast<T>(len));
            });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// NN primitives
// ---------------------------------------------------------------------------

namespace {
Tensor conv2d_impl(const Tensor& x, const Tensor& w, const Tensor* bias, int stride, int pad) {
    if (x.rank() != 4 || w.rank() != 4)
        throw DimensionError("conv2d expects x [B,C,H,W] and kernel [Co,C,kh,kw]");
    check_same_dtype(x, w);
    if (stride < 1) throw UsageError("conv2d stride must be positive");
    if (pad < 0) throw UsageError("conv2d padding must be non-negative");
    kern::Conv2dDims d{};
    d.B = x.dim(0), d.C = x.dim(1), d.H = x.dim(2), d.W = x.dim(3);
    d.Co = w.dim(0), d.KH = w.dim(2), d.KW = w.dim(3);
    d.stride = stride, d.pad = pad;
    if (w.dim(1) != d.C)
        throw DimensionError("conv2d channel mismatch: input has " + std::to_string(d.C) +
                             ", kernel expects " + std::to_string(w.dim(1)));
    if (d.H + 2 * pad < d.KH || d.W + 2 * pad < d.KW)
        throw DimensionError("conv2d kernel larger than padded input");
    d.OH = (d.H + 2 * pad - d.KH) / stride + 1;
    d.OW = (d.W + 2 * pad - d.KW) / stride + 1;
    if (bias) {
        check_same_dtype(x, *bias);
        if (bias->rank() != 1 || bias->dim(0) != d.Co)
            throw DimensionError("conv2d bias must have shape [Co]");
    }
    Tensor out = Tensor::empty({d.B, d.Co, d.OH, d.OW}, x.dtype());
    with_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kern::conv2d_fwd(x.data<T>().data(), w.data<T>().data(),
                         bias ? bias->data<T>().data() : nullptr, out.data<T>().data(), d);
    });
    Tensor bias_t = bias ? *bias : Tensor();
    if (tracked({&x, &w, bias ? bias : &x})) {
        mark_and_record(out, [x, w, bias_t, out, d]() {
            if (!out.impl()->grad_allocated()) return;
            with_dtype(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* dy = grad_cptr<T>(out);
                if (x.requires_grad())
                    kern::conv2d_bwd_input(dy, w.data<T>().data(), grad_ptr<T>(x), d);
                if (w.requires_grad())
                    kern::conv2d_bwd_weight(x.data<T>().data(), dy, grad_ptr<T>(w), d);
                if (bias_t.defined() && bias_t.requires_grad())
                    kern::conv2d_bwd_bias(dy, grad_ptr<T>(bias_t), d);
            });
        });
    }
    return out;
}

Tensor conv1d_impl(const Tensor& x, const Tensor& w, const Tensor* bias, int pad) {
    if (x.rank() != 3 || w.rank() != 3)
        throw DimensionError("conv1d expects x [B,C,L] and kernel [Co,C,k]");
    check_same_dtype(x, w);
    if (pad < 0) throw UsageError("conv1d padding must be non-negative");
    kern::Conv1dDims d{};
    d.B = x.dim(0), d.C = x.dim(1), d.L = x.dim(2);
    d.Co = w.dim(0), d.K = w.dim(2), d.pad = pad;
    if (w.dim(1) != d.C)
        throw DimensionError("conv1d channel mismatch: input has " + std::to_string(d.C) +
                             ", kernel expects " + std::to_string(w.dim(1)));
    if (d.L + 2 * pad < d.K) throw DimensionError("conv1d kernel larger than padded input");
    d.OL = d.L + 2 * pad - d.K + 1;
    if (bias) {
        check_same_dtype(x, *bias);
        if (bias->rank() != 1 || bias->dim(0) != d.Co)
            throw DimensionError("conv1d bias must have shape [Co]");
    }
    Tensor out = Tensor::empty({d.B, d.Co, d.OL}, x.dtype());
    with_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kern::conv1d_fwd(x.data<T>().data(), w.data<T>().data(),
                         bias ? bias->data<T>().data() : nullptr, out.data<T>().data(), d);
    });
    Tensor bias_t = bias ? *bias : Tensor();
    if (tracked({&x, &w, bias ? bias : &x})) {
        mark_and_record(out, [x, w, bias_t, out, d]() {
            if (!out.impl()->grad_allocated()) return;
            with_dtype(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* dy = grad_cptr<T>(out);
                kern::conv1d_bwd(x.data<T>().data(), w.data<T>().data(), dy,
                                 x.requires_grad() ? grad_ptr<T>(x) : nullptr,
                                 w.requires_grad() ? grad_ptr<T>(w) : nullptr,
                                 bias_t.defined() && bias_t.requires_grad() ? grad_ptr<T>(bias_t)
                                                                            : nullptr,
                                 d);
            });
        });
    }
    return out;
}
} // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
    return conv2d_impl(x, w, nullptr, stride, pad);
}
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    return conv2d_impl(x, w, &bias, stride, pad);
}
Tensor conv1d(const Tensor& x, const Tensor& w, int pad) { return conv1d_impl(x, w, nullptr, pad); }
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, int pad) {
    return conv1d_impl(x, w, &bias, pad);
}

namespace {
Tensor linear_impl(const Tensor& x, const Tensor& w, const Tensor* bias) {
    if (w.rank() != 2) throw DimensionError("linear weight must be [dout,din]");
    check_same_dtype(x, w);
    if (x.rank() < 1 || x.shape().back() != w.dim(1))
        throw DimensionError("linear: trailing extent of " + shape_str(x.shape()) +
                             " must equal din=" + std::to_string(w.dim(1)));
    const int64_t din = w.dim(1), dout = w.dim(0);
    const int64_t rows = x.numel() / din;
    if (bias) {
        check_same_dtype(x, *bias);
        if (bias->rank() != 1 || bias->dim(0) != dout)
            throw DimensionError("linear bias must have shape [dout]");
    }
    Shape oshape = x.shape();
    oshape.back() = dout;
    Tensor out = Tensor::empty(oshape, x.dtype());
    with_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        // out[rows,dout] (+)= x[rows,din] * w[dout,din]^T
        kern::gemm_nt(rows, dout, din, x.data<T>().data(), w.data<T>().data(),
                      out.data<T>().data());
        if (bias) {
            T* py = out.data<T>().data();
            const T* pb = bias->data<T>().data();
            for (int64_t rI = 0; rI < rows; ++rI)
                for (int64_t j = 0; j < dout; ++j) py[rI * dout + j] += pb[j];
        }
    });
    Tensor bias_t = bias ? *bias : Tensor();
    if (tracked({&x, &w, bias ? bias : &x})) {
        mark_and_record(out, [x, w, bias_t, out, rows, din, dout]() {
            if (!out.impl()->grad_allocated()) return;
            with_dtype(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* dy = grad_cptr<T>(out);
                if (x.requires_grad())
                    kern::gemm_nn(rows, din, dout, dy, w.data<T>().data(), grad_ptr<T>(x), true);
                if (w.requires_grad())
                    kern::gemm_tn(dout, din, rows, dy, x.data<T>().data(), grad_ptr<T>(w), true);
                if (bias_t.defined() && bias_t.requires_grad()) {
                    T* db = grad_ptr<T>(bias_t);
                    for (int64_t rI = 0; rI < rows; ++rI)
                        for (int64_t j = 0; j < dout; ++j) db[j] += dy[rI * dout + j];
                }
            });
        });
    }
    return out;
}
} // namespace

Tensor linear(const Tensor& x, const Tensor& w) { return linear_impl(x, w, nullptr); }
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    return linear_impl(x, w, &bias);
}

Tensor softmax(const Tensor& x, int axis) {
    const int ax = normalize_axis(axis, x.rank());
    int64_t outer, len, inner;
    axis_decomp(x.shape(), ax, outer, len, inner);
    Tensor out = Tensor::empty(x.shape(), x.dtype());
    with_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kern::softmax_fwd(x.data<T>().data(), out.data<T>().data(), outer, len, inner);
    });
    if (tracked({&x})) {
        mark_and_record(out, [x, out, outer, len, inner]() {
            if (!out.impl()->grad_allocated() || !x.requires_grad()) return;
            with_dtype(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                kern::softmax_bwd(out.data<T>().data(), grad_cptr<T>(out), grad_ptr<T>(x), outer,
                                  len, inner);
            });
        });
    }
    return out;
}

Tensor gat(const Tensor& nodes, const Tensor& w, const Tensor& r,
           const std::vector<uint8_t>& neighbors, double slope) {
    if (nodes.rank() != 3) throw DimensionError("gat nodes must be [F,N,b]");
    check_same_dtype(nodes, w);
    check_same_dtype(nodes, r);
    kern::GatDims d{};
    d.F = nodes.dim(0), d.N = nodes.dim(1), d.b = nodes.dim(2), d.slope = slope;
    if (w.rank() != 2 || w.dim(0) != d.b || w.dim(1) != d.b)
        throw DimensionError("gat weight must be [b,b]");
    if (r.rank() != 1 || r.dim(0) != 2 * d.b) throw DimensionError("gat attention vector must be [2b]");
    if (static_cast<int64_t>(neighbors.size()) != d.F * d.N * d.N)
        throw DimensionError("gat neighbor mask size mismatch");
    for (int64_t f = 0; f < d.F; ++f)
        for (int64_t n = 0; n < d.N; ++n)
            if (!neighbors[static_cast<size_t>((f * d.N + n) * d.N + n)])
                throw UsageError("gat: node " + std::to_string(n) + " lacks a self-loop");
    Tensor out = Tensor::empty(nodes.shape(), nodes.dtype());
    auto nbr = std::make_shared<std::vector<uint8_t>>(neighbors);
    const bool rec = tracked({&nodes, &w, &r});
    with_dtype(nodes.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto u = std::make_shared<std::vector<T>>(static_cast<size_t>(d.F * d.N * d.b));
        auto alpha = std::make_shared<std::vector<T>>(static_cast<size_t>(d.F * d.N * d.N));
        auto h = std::make_shared<std::vector<T>>(static_cast<size_t>(d.F * d.N * d.b));
        kern::gat_fwd(nodes.data<T>().data(), w.data<T>().data(), r.data<T>().data(), nbr->data(),
                      out.data<T>().data(), u->data(), alpha->data(), h->data(), d);
        if (rec) {
            mark_and_record(out, [nodes, w, r, out, nbr, u, alpha, h, d]() {
                if (!out.impl()->grad_allocated()) return;
                using TT = T;
                kern::gat_bwd(nodes.data<TT>().data(), w.data<TT>().data(), r.data<TT>().data(),
                              nbr->data(), u->data(), alpha->data(), h->data(), grad_cptr<TT>(out),
                              nodes.requires_grad() ? grad_ptr<TT>(nodes) : nullptr,
                              w.requires_grad() ? grad_ptr<TT>(w) : nullptr,
                              r.requires_grad() ? grad_ptr<TT>(r) : nullptr, d);
            });
        }
    });
    return out;
}

} // namespace aurec::ops
