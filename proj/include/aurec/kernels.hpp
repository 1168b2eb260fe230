#pragma once

// Low-level numeric kernels. Everything here is deterministic by
// construction: each output element is produced by exactly one thread with a
// fixed accumulation order, so results do not depend on the schedule or the
// thread count. Gradient kernels accumulate (+=) into their destination.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace aurec::kern {

// ---------------------------------------------------------------------------
// GEMM, row-major. nn: C = A[M,K]*B[K,N]; nt: C += A[M,K]*B[N,K]^T;
// tn: C = A[K,M]^T*B[K,N]. *_serial variants are for use inside loops that
// are already parallel.
// ---------------------------------------------------------------------------

// Fixed 8-lane accumulation so the reduction vectorizes without relaxing FP
// semantics; the lane split is the same for every call.
template <typename T>
inline T dot(const T* a, const T* b, int64_t n) {
    T acc[8] = {T(0), T(0), T(0), T(0), T(0), T(0), T(0), T(0)};
    int64_t k = 0;
    for (; k + 8 <= n; k += 8)
        for (int64_t j = 0; j < 8; ++j) acc[j] += a[k + j] * b[k + j];
    T tail = T(0);
    for (; k < n; ++k) tail += a[k] * b[k];
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

template <typename T>
void gemm_nn_serial(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, bool accumulate) {
    for (int64_t m = 0; m < M; ++m) {
        T* crow = C + m * N;
        if (!accumulate)
            for (int64_t n = 0; n < N; ++n) crow[n] = T(0);
        const T* arow = A + m * K;
        for (int64_t k = 0; k < K; ++k) {
            const T a = arow[k];
            const T* brow = B + k * N;
            for (int64_t n = 0; n < N; ++n) crow[n] += a * brow[n];
        }
    }
}

template <typename T>
void gemm_tn_serial(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, bool accumulate) {
    for (int64_t m = 0; m < M; ++m) {
        T* crow = C + m * N;
        if (!accumulate)
            for (int64_t n = 0; n < N; ++n) crow[n] = T(0);
        for (int64_t k = 0; k < K; ++k) {
            const T a = A[k * M + m];
            const T* brow = B + k * N;
            for (int64_t n = 0; n < N; ++n) crow[n] += a * brow[n];
        }
    }
}

template <typename T>
void gemm_nn(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int64_t m = 0; m < M; ++m) {
        T* crow = C + m * N;
        if (!accumulate)
            for (int64_t n = 0; n < N; ++n) crow[n] = T(0);
        const T* arow = A + m * K;
        for (int64_t k = 0; k < K; ++k) {
            const T a = arow[k];
            const T* brow = B + k * N;
            for (int64_t n = 0; n < N; ++n) crow[n] += a * brow[n];
        }
    }
}

template <typename T>
void gemm_nt(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C) {
#pragma omp parallel for schedule(static)
    for (int64_t m = 0; m < M; ++m) {
        const T* arow = A + m * K;
        T* crow = C + m * N;
        for (int64_t n = 0; n < N; ++n) crow[n] += dot(arow, B + n * K, K);
    }
}

template <typename T>
void gemm_tn(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int64_t m = 0; m < M; ++m) {
        T* crow = C + m * N;
        if (!accumulate)
            for (int64_t n = 0; n < N; ++n) crow[n] = T(0);
        for (int64_t k = 0; k < K; ++k) {
            const T a = A[k * M + m];
            const T* brow = B + k * N;
            for (int64_t n = 0; n < N; ++n) crow[n] += a * brow[n];
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d: x [B,C,H,W], w [Co,C,kh,kw], y [B,Co,OH,OW]; cross-correlation.
// ---------------------------------------------------------------------------

struct Conv2dDims {
    int64_t B, C, H, W, Co, KH, KW, OH, OW;
    int64_t stride, pad;
};

template <typename T>
void im2col(const T* x, const Conv2dDims& d, T* col) {
    // col [C*KH*KW, OH*OW]
    const int64_t owh = d.OH * d.OW;
    for (int64_t c = 0; c < d.C; ++c) {
        const T* xc = x + c * d.H * d.W;
        for (int64_t kh = 0; kh < d.KH; ++kh) {
            for (int64_t kw = 0; kw < d.KW; ++kw) {
                T* crow = col + ((c * d.KH + kh) * d.KW + kw) * owh;
                for (int64_t oh = 0; oh < d.OH; ++oh) {
                    const int64_t ih = oh * d.stride + kh - d.pad;
                    T* dst = crow + oh * d.OW;
                    if (ih < 0 || ih >= d.H) {
                        for (int64_t ow = 0; ow < d.OW; ++ow) dst[ow] = T(0);
                        continue;
                    }
                    const T* src = xc + ih * d.W;
                    for (int64_t ow = 0; ow < d.OW; ++ow) {
                        const int64_t iw = ow * d.stride + kw - d.pad;
                        dst[ow] = (iw >= 0 && iw < d.W) ? src[iw] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, const Conv2dDims& d, T* x) {
    const int64_t owh = d.OH * d.OW;
    for (int64_t c = 0; c < d.C; ++c) {
        T* xc = x + c * d.H * d.W;
        for (int64_t kh = 0; kh < d.KH; ++kh) {
            for (int64_t kw = 0; kw < d.KW; ++kw) {
                const T* crow = col + ((c * d.KH + kh) * d.KW + kw) * owh;
                for (int64_t oh = 0; oh < d.OH; ++oh) {
                    const int64_t ih = oh * d.stride + kh - d.pad;
                    if (ih < 0 || ih >= d.H) continue;
                    T* dst = xc + ih * d.W;
                    const T* src = crow + oh * d.OW;
                    for (int64_t ow = 0; ow < d.OW; ++ow) {
                        const int64_t iw = ow * d.stride + kw - d.pad;
                        if (iw >= 0 && iw < d.W) dst[iw] += src[ow];
                    }
                }
            }
        }
    }
}

template <typename T>
void conv2d_fwd(const T* x, const T* w, const T* bias, T* y, const Conv2dDims& d) {
    const int64_t ck = d.C * d.KH * d.KW;
    const int64_t owh = d.OH * d.OW;
    const bool pointwise = d.KH == 1 && d.KW == 1 && d.stride == 1 && d.pad == 0;
#pragma omp parallel
    {
        std::vector<T> col;
        if (!pointwise) col.resize(static_cast<size_t>(ck * owh));
#pragma omp for schedule(static)
        for (int64_t b = 0; b < d.B; ++b) {
            const T* xb = x + b * d.C * d.H * d.W;
            T* yb = y + b * d.Co * owh;
            if (pointwise) {
                gemm_nn_serial(d.Co, owh, ck, w, xb, yb, false);
            } else {
                im2col(xb, d, col.data());
                gemm_nn_serial(d.Co, owh, ck, w, col.data(), yb, false);
            }
            if (bias)
                for (int64_t co = 0; co < d.Co; ++co) {
                    const T bv = bias[co];
                    T* row = yb + co * owh;
                    for (int64_t i = 0; i < owh; ++i) row[i] += bv;
                }
        }
    }
}

template <typename T>
void conv2d_bwd_input(const T* dy, const T* w, T* dx, const Conv2dDims& d) {
    const int64_t ck = d.C * d.KH * d.KW;
    const int64_t owh = d.OH * d.OW;
#pragma omp parallel
    {
        std::vector<T> dcol(static_cast<size_t>(ck * owh));
#pragma omp for schedule(static)
        for (int64_t b = 0; b < d.B; ++b) {
            const T* dyb = dy + b * d.Co * owh;
            gemm_tn_serial(ck, owh, d.Co, w, dyb, dcol.data(), false);
            col2im_add(dcol.data(), d, dx + b * d.C * d.H * d.W);
        }
    }
}

template <typename T>
void conv2d_bwd_weight(const T* x, const T* dy, T* dw, const Conv2dDims& d) {
    const int64_t ck = d.C * d.KH * d.KW;
    const int64_t owh = d.OH * d.OW;
    const bool pointwise = d.KH == 1 && d.KW == 1 && d.stride == 1 && d.pad == 0;
    std::vector<T> col;
    if (!pointwise) col.resize(static_cast<size_t>(ck * owh));
    // Samples accumulate sequentially so the result is independent of the
    // thread count; parallelism lives inside the GEMM.
    for (int64_t b = 0; b < d.B; ++b) {
        const T* xb = x + b * d.C * d.H * d.W;
        const T* colp = xb;
        if (!pointwise) {
            im2col(xb, d, col.data());
            colp = col.data();
        }
        gemm_nt(d.Co, ck, owh, dy + b * d.Co * owh, colp, dw);
    }
}

template <typename T>
void conv2d_bwd_bias(const T* dy, T* db, const Conv2dDims& d) {
    const int64_t owh = d.OH * d.OW;
    for (int64_t b = 0; b < d.B; ++b)
        for (int64_t co = 0; co < d.Co; ++co) {
            const T* row = dy + (b * d.Co + co) * owh;
            T s = T(0);
            for (int64_t i = 0; i < owh; ++i) s += row[i];
            db[co] += s;
        }
}

// ---------------------------------------------------------------------------
// conv1d: x [B,C,L], w [Co,C,K], y [B,Co,OL]; stride 1.
// ---------------------------------------------------------------------------

struct Conv1dDims {
    int64_t B, C, L, Co, K, OL;
    int64_t pad;
};

template <typename T>
void conv1d_fwd(const T* x, const T* w, const T* bias, T* y, const Conv1dDims& d) {
#pragma omp parallel for schedule(static)
    for (int64_t bc = 0; bc < d.B * d.Co; ++bc) {
        const int64_t b = bc / d.Co, co = bc % d.Co;
        const T* xb = x + b * d.C * d.L;
        T* yo = y + bc * d.OL;
        for (int64_t t = 0; t < d.OL; ++t) {
            T s = bias ? bias[co] : T(0);
            for (int64_t c = 0; c < d.C; ++c) {
                const T* xc = xb + c * d.L;
                const T* wc = w + (co * d.C + c) * d.K;
                for (int64_t j = 0; j < d.K; ++j) {
                    const int64_t i = t + j - d.pad;
                    if (i >= 0 && i < d.L) s += xc[i] * wc[j];
                }
            }
            yo[t] = s;
        }
    }
}

template <typename T>
void conv1d_bwd(const T* x, const T* w, const T* dy, T* dx, T* dw, T* db, const Conv1dDims& d) {
    if (dx) {
#pragma omp parallel for schedule(static)
        for (int64_t bc = 0; bc < d.B * d.C; ++bc) {
            const int64_t b = bc / d.C, c = bc % d.C;
            T* dxc = dx + bc * d.L;
            for (int64_t i = 0; i < d.L; ++i) {
                T s = T(0);
                for (int64_t co = 0; co < d.Co; ++co) {
                    const T* dyo = dy + (b * d.Co + co) * d.OL;
                    const T* wc = w + (co * d.C + c) * d.K;
                    for (int64_t j = 0; j < d.K; ++j) {
                        const int64_t t = i - j + d.pad;
                        if (t >= 0 && t < d.OL) s += dyo[t] * wc[j];
                    }
                }
                dxc[i] += s;
            }
        }
    }
    if (dw) {
        for (int64_t b = 0; b < d.B; ++b)
            for (int64_t co = 0; co < d.Co; ++co) {
                const T* dyo = dy + (b * d.Co + co) * d.OL;
                for (int64_t c = 0; c < d.C; ++c) {
                    const T* xc = x + (b * d.C + c) * d.L;
                    T* dwc = dw + (co * d.C + c) * d.K;
                    for (int64_t j = 0; j < d.K; ++j) {
                        T s = T(0);
                        for (int64_t t = 0; t < d.OL; ++t) {
                            const int64_t i = t + j - d.pad;
                            if (i >= 0 && i < d.L) s += dyo[t] * xc[i];
                        }
                        dwc[j] += s;
                    }
                }
            }
    }
    if (db) {
        for (int64_t b = 0; b < d.B; ++b)
            for (int64_t co = 0; co < d.Co; ++co) {
                const T* dyo = dy + (b * d.Co + co) * d.OL;
                T s = T(0);
                for (int64_t t = 0; t < d.OL; ++t) s += dyo[t];
                db[co] += s;
            }
    }
}

// ---------------------------------------------------------------------------
// Sliced kernels over an (outer, len, inner) decomposition of one axis.
// ---------------------------------------------------------------------------

template <typename T>
void softmax_fwd(const T* x, T* y, int64_t outer, int64_t len, int64_t inner) {
#pragma omp parallel for schedule(static)
    for (int64_t oi = 0; oi < outer * inner; ++oi) {
        const int64_t o = oi / inner, i = oi % inner;
        const T* xs = x + o * len * inner + i;
        T* ys = y + o * len * inner + i;
        T m = xs[0];
        for (int64_t l = 1; l < len; ++l) m = std::max(m, xs[l * inner]);
        assert(!std::isnan(static_cast<double>(m)) && "softmax over NaN input");
        T s = T(0);
        for (int64_t l = 0; l < len; ++l) {
            const T e = std::exp(xs[l * inner] - m);
            ys[l * inner] = e;
            s += e;
        }
        const T inv = T(1) / s;
        for (int64_t l = 0; l < len; ++l) ys[l * inner] *= inv;
    }
}

template <typename T>
void softmax_bwd(const T* y, const T* dy, T* dx, int64_t outer, int64_t len, int64_t inner) {
#pragma omp parallel for schedule(static)
    for (int64_t oi = 0; oi < outer * inner; ++oi) {
        const int64_t o = oi / inner, i = oi % inner;
        const T* ys = y + o * len * inner + i;
        const T* dys = dy + o * len * inner + i;
        T* dxs = dx + o * len * inner + i;
        T dotv = T(0);
        for (int64_t l = 0; l < len; ++l) dotv += ys[l * inner] * dys[l * inner];
        for (int64_t l = 0; l < len; ++l) dxs[l * inner] += ys[l * inner] * (dys[l * inner] - dotv);
    }
}

template <typename T>
void reduce_sum_fwd(const T* x, T* y, int64_t outer, int64_t len, int64_t inner, T scale) {
#pragma omp parallel for schedule(static)
    for (int64_t oi = 0; oi < outer * inner; ++oi) {
        const int64_t o = oi / inner, i = oi % inner;
        const T* xs = x + o * len * inner + i;
        T s = T(0);
        for (int64_t l = 0; l < len; ++l) s += xs[l * inner];
        y[o * inner + i] = s * scale;
    }
}

template <typename T>
void reduce_sum_bwd(const T* dy, T* dx, int64_t outer, int64_t len, int64_t inner, T scale) {
#pragma omp parallel for schedule(static)
    for (int64_t oi = 0; oi < outer * inner; ++oi) {
        const int64_t o = oi / inner, i = oi % inner;
        const T g = dy[o * inner + i] * scale;
        T* dxs = dx + o * len * inner + i;
        for (int64_t l = 0; l < len; ++l) dxs[l * inner] += g;
    }
}

// y = x / ||x|| per slice. Slices whose norm is zero produce zeros when
// `guard` is set (the caller rejects them otherwise); their adjoint is
// defined as zero. Returns whether a zero-norm slice was seen.
template <typename T>
bool l2_normalize_fwd(const T* x, T* y, int64_t outer, int64_t len, int64_t inner, bool guard) {
    bool saw_zero = false;
    for (int64_t oi = 0; oi < outer * inner; ++oi) {
        const int64_t o = oi / inner, i = oi % inner;
        const T* xs = x + o * len * inner + i;
        T* ys = y + o * len * inner + i;
        T sq = T(0);
        for (int64_t l = 0; l < len; ++l) sq += xs[l * inner] * xs[l * inner];
        if (sq == T(0)) {
            saw_zero = true;
            if (!guard) return true;
            for (int64_t l = 0; l < len; ++l) ys[l * inner] = T(0);
            continue;
        }
        const T inv = T(1) / std::sqrt(sq);
        for (int64_t l = 0; l < len; ++l) ys[l * inner] = xs[l * inner] * inv;
    }
    return saw_zero;
}

template <typename T>
void l2_normalize_bwd(const T* x, const T* y, const T* dy, T* dx, int64_t outer, int64_t len,
                      int64_t inner) {
    for (int64_t oi = 0; oi < outer * inner; ++oi) {
        const int64_t o = oi / inner, i = oi % inner;
        const T* xs = x + o * len * inner + i;
        const T* ys = y + o * len * inner + i;
        const T* dys = dy + o * len * inner + i;
        T* dxs = dx + o * len * inner + i;
        T sq = T(0);
        for (int64_t l = 0; l < len; ++l) sq += xs[l * inner] * xs[l * inner];
        if (sq == T(0)) continue; // guarded slice: zero adjoint
        const T inv = T(1) / std::sqrt(sq);
        T dotv = T(0);
        for (int64_t l = 0; l < len; ++l) dotv += ys[l * inner] * dys[l * inner];
        for (int64_t l = 0; l < len; ++l)
            dxs[l * inner] += (dys[l * inner] - ys[l * inner] * dotv) * inv;
    }
}

// ---------------------------------------------------------------------------
// Graph attention over per-frame node sets.
// nodes [F,N,b]; W [b,b]; r [2b]; nbr [F,N,N] with row n = the neighborhood
// of node n (self-loop included). Saved context: u = nodes*W^T, alpha,
// h (pre-activation aggregate).
// ---------------------------------------------------------------------------

struct GatDims {
    int64_t F, N, b;
    double slope; // LeakyReLU negative slope
};

template <typename T>
inline T elu(T v) {
    return v > T(0) ? v : std::expm1(v);
}

template <typename T>
void gat_fwd(const T* nodes, const T* W, const T* r, const uint8_t* nbr, T* out, T* u, T* alpha,
             T* h, const GatDims& d) {
    const int64_t N = d.N, b = d.b;
    const T slope = static_cast<T>(d.slope);
#pragma omp parallel
    {
        std::vector<T> s1(static_cast<size_t>(N)), s2(static_cast<size_t>(N));
#pragma omp for schedule(static)
        for (int64_t f = 0; f < d.F; ++f) {
            const T* V = nodes + f * N * b;
            T* uf = u + f * N * b;
            T* af = alpha + f * N * N;
            T* hf = h + f * N * b;
            T* of = out + f * N * b;
            const uint8_t* nf = nbr + f * N * N;
            // u_n = W v_n  (row n of u = v_n * W^T)
            for (int64_t n = 0; n < N; ++n)
                for (int64_t i = 0; i < b; ++i) uf[n * b + i] = dot(W + i * b, V + n * b, b);
            for (int64_t n = 0; n < N; ++n) {
                s1[static_cast<size_t>(n)] = dot(r, uf + n * b, b);
                s2[static_cast<size_t>(n)] = dot(r + b, uf + n * b, b);
            }
            for (int64_t n = 0; n < N; ++n) {
                const uint8_t* row = nf + n * N;
                T m = -std::numeric_limits<T>::infinity();
                for (int64_t mi = 0; mi < N; ++mi) {
                    if (!row[mi]) {
                        af[n * N + mi] = T(0);
                        continue;
                    }
                    const T z = s1[static_cast<size_t>(n)] + s2[static_cast<size_t>(mi)];
                    const T e = z > T(0) ? z : slope * z;
                    af[n * N + mi] = e;
                    m = std::max(m, e);
                }
                assert(m > -std::numeric_limits<T>::infinity() && "node with empty neighborhood");
                T s = T(0);
                for (int64_t mi = 0; mi < N; ++mi) {
                    if (!row[mi]) continue;
                    const T e = std::exp(af[n * N + mi] - m);
                    af[n * N + mi] = e;
                    s += e;
                }
                const T inv = T(1) / s;
                for (int64_t mi = 0; mi < N; ++mi)
                    if (row[mi]) af[n * N + mi] *= inv;
                for (int64_t i = 0; i < b; ++i) {
                    T acc = T(0);
                    for (int64_t mi = 0; mi < N; ++mi)
                        if (row[mi]) acc += af[n * N + mi] * uf[mi * b + i];
                    hf[n * b + i] = acc;
                    of[n * b + i] = elu(acc);
                }
            }
        }
    }
}

template <typename T>
void gat_bwd(const T* nodes, const T* W, const T* r, const uint8_t* nbr, const T* u,
             const T* alpha, const T* h, const T* dout, T* dnodes, T* dW, T* dr, const GatDims& d) {
    const int64_t N = d.N, b = d.b;
    const T slope = static_cast<T>(d.slope);
    std::vector<T> du(static_cast<size_t>(N * b));
    std::vector<T> dh(static_cast<size_t>(b));
    std::vector<T> dalpha(static_cast<size_t>(N));
    std::vector<T> ds1(static_cast<size_t>(N)), ds2(static_cast<size_t>(N));
    std::vector<T> s1(static_cast<size_t>(N)), s2(static_cast<size_t>(N));
    // Frames accumulate into shared dW/dr; processed serially for a
    // thread-count-independent result. Per-frame work is small.
    for (int64_t f = 0; f < d.F; ++f) {
        const T* V = nodes + f * N * b;
        const T* uf = u + f * N * b;
        const T* af = alpha + f * N * N;
        const T* hf = h + f * N * b;
        const T* dof = dout + f * N * b;
        const uint8_t* nf = nbr + f * N * N;
        std::fill(du.begin(), du.end(), T(0));
        std::fill(ds1.begin(), ds1.end(), T(0));
        std::fill(ds2.begin(), ds2.end(), T(0));
        for (int64_t n = 0; n < N; ++n) {
            s1[static_cast<size_t>(n)] = dot(r, uf + n * b, b);
            s2[static_cast<size_t>(n)] = dot(r + b, uf + n * b, b);
        }
        for (int64_t n = 0; n < N; ++n) {
            const uint8_t* row = nf + n * N;
            // through phi
            for (int64_t i = 0; i < b; ++i) {
                const T hv = hf[n * b + i];
                dh[static_cast<size_t>(i)] = dof[n * b + i] * (hv > T(0) ? T(1) : std::exp(hv));
            }
            // through the weighted aggregation
            T dotad = T(0);
            for (int64_t mi = 0; mi < N; ++mi) {
                if (!row[mi]) {
                    dalpha[static_cast<size_t>(mi)] = T(0);
                    continue;
                }
                dalpha[static_cast<size_t>(mi)] = dot(dh.data(), uf + mi * b, b);
                const T a = af[n * N + mi];
                for (int64_t i = 0; i < b; ++i) du[static_cast<size_t>(mi * b + i)] += a * dh[static_cast<size_t>(i)];
                dotad += a * dalpha[static_cast<size_t>(mi)];
            }
            // through the neighborhood softmax and the LeakyReLU
            for (int64_t mi = 0; mi < N; ++mi) {
                if (!row[mi]) continue;
                const T dea = af[n * N + mi] * (dalpha[static_cast<size_t>(mi)] - dotad);
                const T z = s1[static_cast<size_t>(n)] + s2[static_cast<size_t>(mi)];
                const T dz = dea * (z > T(0) ? T(1) : slope);
                ds1[static_cast<size_t>(n)] += dz;
                ds2[static_cast<size_t>(mi)] += dz;
            }
        }
        // s1_n = r1.u_n, s2_n = r2.u_n
        for (int64_t n = 0; n < N; ++n) {
            for (int64_t i = 0; i < b; ++i) {
                du[static_cast<size_t>(n * b + i)] += ds1[static_cast<size_t>(n)] * r[i] +
                                                      ds2[static_cast<size_t>(n)] * r[b + i];
                if (dr) {
                    dr[i] += ds1[static_cast<size_t>(n)] * uf[n * b + i];
                    dr[b + i] += ds2[static_cast<size_t>(n)] * uf[n * b + i];
                }
            }
        }
        // u = V W^T: dV += du W, dW += du^T V
        if (dnodes) gemm_nn_serial(N, b, b, du.data(), W, dnodes + f * N * b, true);
        if (dW) gemm_tn_serial(b, b, N, du.data(), V, dW, true);
    }
}

} // namespace aurec::kern
