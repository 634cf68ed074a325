#include "polyseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace polyseg {

namespace {

// Row-major matrix products. Every output element accumulates its k-terms in
// ascending order on a single thread, so results are bitwise independent of
// the worker count.

// C (M x N) = A (M x K) * B (K x N)
void gemm_nn(std::int64_t M, std::int64_t K, std::int64_t N, const real* A, const real* B,
             real* C, bool accumulate) {
    constexpr std::int64_t kBlock = 512;
#pragma omp parallel for schedule(static) num_threads(thread_count())
    for (std::int64_t i = 0; i < M; ++i) {
        real* Ci = C + i * N;
        if (!accumulate) std::fill(Ci, Ci + N, real(0));
        const real* Ai = A + i * K;
        for (std::int64_t j0 = 0; j0 < N; j0 += kBlock) {
            const std::int64_t j1 = std::min(j0 + kBlock, N);
            for (std::int64_t k = 0; k < K; ++k) {
                const real a = Ai[k];
                const real* Bk = B + k * N;
                for (std::int64_t j = j0; j < j1; ++j) Ci[j] += a * Bk[j];
            }
        }
    }
}

// C (M x N) = A^T * B with A stored (K x M): C[i,j] = sum_k A[k,i] * B[k,j]
void gemm_tn(std::int64_t M, std::int64_t K, std::int64_t N, const real* A, const real* B,
             real* C, bool accumulate) {
    constexpr std::int64_t kBlock = 512;
#pragma omp parallel for schedule(static) num_threads(thread_count())
    for (std::int64_t i = 0; i < M; ++i) {
        real* Ci = C + i * N;
        if (!accumulate) std::fill(Ci, Ci + N, real(0));
        for (std::int64_t j0 = 0; j0 < N; j0 += kBlock) {
            const std::int64_t j1 = std::min(j0 + kBlock, N);
            for (std::int64_t k = 0; k < K; ++k) {
                const real a = A[k * M + i];
                const real* Bk = B + k * N;
                for (std::int64_t j = j0; j < j1; ++j) Ci[j] += a * Bk[j];
            }
        }
    }
}

// C (M x N) = A * B^T with B stored (N x K): C[i,j] = sum_k A[i,k] * B[j,k].
// B is transposed into a scratch buffer first so the inner loop is the same
// vectorizable row-axpy as gemm_nn (dot-product reductions do not vectorize
// under strict FP semantics).
void gemm_nt(std::int64_t M, std::int64_t K, std::int64_t N, const real* A, const real* B,
             real* C, bool accumulate) {
    thread_local std::vector<real> scratch;
    scratch.resize(static_cast<std::size_t>(K * N));
    real* Bt = scratch.data();
    constexpr std::int64_t kTile = 64;
#pragma omp parallel for schedule(static) num_threads(thread_count())
    for (std::int64_t k0 = 0; k0 < K; k0 += kTile) {
        const std::int64_t k1 = std::min(k0 + kTile, K);
        for (std::int64_t j0 = 0; j0 < N; j0 += kTile) {
            const std::int64_t j1 = std::min(j0 + kTile, N);
            for (std::int64_t j = j0; j < j1; ++j)
                for (std::int64_t k = k0; k < k1; ++k) Bt[k * N + j] = B[j * K + k];
        }
    }
    gemm_nn(M, K, N, A, Bt, C, accumulate);
}

// one sample (C, H, W) -> col (C*k*k, OH*OW)
void im2col(const real* x, int C, int H, int W, int k, int stride, int pad, int OH, int OW,
            real* col) {
    const std::int64_t plane = static_cast<std::int64_t>(OH) * OW;
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                real* row = col + ((static_cast<std::int64_t>(c) * k + ky) * k + kx) * plane;
                for (int oy = 0; oy < OH; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    real* dst = row + static_cast<std::int64_t>(oy) * OW;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst, dst + OW, real(0));
                        continue;
                    }
                    const real* src = x + (static_cast<std::int64_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        dst[ox] = (ix >= 0 && ix < W) ? src[ix] : real(0);
                    }
                }
            }
}

// adjoint of im2col: scatter-add col back onto the image
void col2im_add(const real* col, int C, int H, int W, int k, int stride, int pad, int OH, int OW,
                real* x) {
    const std::int64_t plane = static_cast<std::int64_t>(OH) * OW;
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const real* row = col + ((static_cast<std::int64_t>(c) * k + ky) * k + kx) * plane;
                for (int oy = 0; oy < OH; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    const real* src = row + static_cast<std::int64_t>(oy) * OW;
                    real* dst = x + (static_cast<std::int64_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) dst[ix] += src[ox];
                    }
                }
            }
}

}  // namespace

Tensor4 conv2d(const Tensor4& x, const Tensor4& kernel, const Tensor4& bias, int stride, int pad,
               Graph* g) {
    const Shape4 xs = x.shape();
    const Shape4 ks = kernel.shape();
    if (ks.h != ks.w || ks.h < 1 || ks.h > 3)
        throw ShapeError("conv2d: kernel must be square with size in {1,2,3}");
    if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2");
    if (pad < 0) throw ShapeError("conv2d: pad must be non-negative");
    if (ks.c != xs.c) throw ShapeError("conv2d: kernel Cin does not match input channels");
    if (bias.shape() != Shape4{1, ks.n, 1, 1})
        throw ShapeError("conv2d: bias must have shape (1, Cout, 1, 1)");

    const int k = ks.h;
    const int OH = (xs.h + 2 * pad - k) / stride + 1;
    const int OW = (xs.w + 2 * pad - k) / stride + 1;
    if (xs.h + 2 * pad < k || xs.w + 2 * pad < k || OH < 1 || OW < 1)
        throw ShapeError("conv2d: output would be empty");

    const std::int64_t K = static_cast<std::int64_t>(xs.c) * k * k;
    const std::int64_t plane = static_cast<std::int64_t>(OH) * OW;
    const std::int64_t in_plane = static_cast<std::int64_t>(xs.h) * xs.w;

    Tensor4 out(Shape4{xs.n, ks.n, OH, OW});
    std::vector<real> col(static_cast<std::size_t>(K * plane));
    for (int n = 0; n < xs.n; ++n) {
        im2col(x.values().data() + n * xs.c * in_plane, xs.c, xs.h, xs.w, k, stride, pad, OH, OW,
               col.data());
        real* out_n = out.values().data() + static_cast<std::int64_t>(n) * ks.n * plane;
        gemm_nn(ks.n, K, plane, kernel.values().data(), col.data(), out_n, false);
        for (int co = 0; co < ks.n; ++co) {
            const real b = bias.values()[static_cast<std::size_t>(co)];
            real* row = out_n + co * plane;
            for (std::int64_t j = 0; j < plane; ++j) row[j] += b;
        }
    }

    if (g) {
        Tensor4 xc = x, kc = kernel, bc = bias, oc = out;
        g->record(out, [xc, kc, bc, oc, stride, pad, k, OH, OW, K, plane, in_plane]() mutable {
            const Shape4 xs2 = xc.shape();
            const int cout = kc.shape().n;
            std::vector<real> col(static_cast<std::size_t>(K * plane));
            std::vector<real> dcol(static_cast<std::size_t>(K * plane));
            for (int n = 0; n < xs2.n; ++n) {
                const real* dout_n =
                    oc.grads().data() + static_cast<std::int64_t>(n) * cout * plane;
                // bias gradient
                for (int co = 0; co < cout; ++co) {
                    real acc = 0;
                    const real* row = dout_n + co * plane;
                    for (std::int64_t j = 0; j < plane; ++j) acc += row[j];
                    bc.grads()[static_cast<std::size_t>(co)] += acc;
                }
                // weight gradient: dW += dOut_n * col^T
                im2col(xc.values().data() + n * xs2.c * in_plane, xs2.c, xs2.h, xs2.w, k, stride,
                       pad, OH, OW, col.data());
                gemm_nt(cout, plane, K, dout_n, col.data(), kc.grads().data(), true);
                // data gradient: dcol = W^T * dOut_n, then scatter back
                gemm_tn(K, cout, plane, kc.values().data(), dout_n, dcol.data(), false);
                col2im_add(dcol.data(), xs2.c, xs2.h, xs2.w, k, stride, pad, OH, OW,
                           xc.grads().data() + n * xs2.c * in_plane);
            }
        });
    }
    return out;
}

Tensor4 maxpool2x2(const Tensor4& x, Graph* g) {
    const Shape4 xs = x.shape();
    if (xs.h % 2 != 0 || xs.w % 2 != 0)
        throw ShapeError("maxpool2x2: spatial dims must be even");

    Tensor4 out(Shape4{xs.n, xs.c, xs.h / 2, xs.w / 2});
    std::vector<std::uint32_t> argmax(static_cast<std::size_t>(out.numel()));

    const real* xv = x.values().data();
    real* ov = out.values().data();
    const int OH = xs.h / 2, OW = xs.w / 2;
    std::size_t oi = 0;
    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * xs.c + c) *
                                     static_cast<std::size_t>(xs.h) * xs.w;
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox, ++oi) {
                    // fixed scan order; first occurrence wins on ties
                    std::size_t best = base + static_cast<std::size_t>(2 * oy) * xs.w + 2 * ox;
                    real bv = xv[best];
                    const std::size_t c01 = best + 1, c10 = best + xs.w, c11 = best + xs.w + 1;
                    if (xv[c01] > bv) { bv = xv[c01]; best = c01; }
                    if (xv[c10] > bv) { bv = xv[c10]; best = c10; }
                    if (xv[c11] > bv) { bv = xv[c11]; best = c11; }
                    ov[oi] = bv;
                    argmax[oi] = static_cast<std::uint32_t>(best);
                }
        }

    if (g) {
        Tensor4 xc = x, oc = out;
        g->record(out, [xc, oc, argmax = std::move(argmax)]() mutable {
            const std::size_t count = oc.grads().size();
            for (std::size_t i = 0; i < count; ++i) xc.grads()[argmax[i]] += oc.grads()[i];
        });
    }
    return out;
}

namespace {

// gather dOut (N,Cout,2H,2W) into tmp rows ((co*2+ky)*2+kx, y*W+x) for one sample
void deconv_gather(const real* dout, int cout, int H, int W, real* tmp) {
    for (int co = 0; co < cout; ++co)
        for (int ky = 0; ky < 2; ++ky)
            for (int kx = 0; kx < 2; ++kx) {
                real* row = tmp + ((static_cast<std::int64_t>(co) * 2 + ky) * 2 + kx) *
                                      (static_cast<std::int64_t>(H) * W);
                for (int y = 0; y < H; ++y) {
                    const real* src =
                        dout + (static_cast<std::int64_t>(co) * 2 * H + 2 * y + ky) * 2 * W + kx;
                    real* dst = row + static_cast<std::int64_t>(y) * W;
                    for (int x = 0; x < W; ++x) dst[x] = src[2 * x];
                }
            }
}

void deconv_scatter(const real* tmp, int cout, int H, int W, real* out) {
    for (int co = 0; co < cout; ++co)
        for (int ky = 0; ky < 2; ++ky)
            for (int kx = 0; kx < 2; ++kx) {
                const real* row = tmp + ((static_cast<std::int64_t>(co) * 2 + ky) * 2 + kx) *
                                            (static_cast<std::int64_t>(H) * W);
                for (int y = 0; y < H; ++y) {
                    real* dst =
                        out + (static_cast<std::int64_t>(co) * 2 * H + 2 * y + ky) * 2 * W + kx;
                    const real* src = row + static_cast<std::int64_t>(y) * W;
                    for (int x = 0; x < W; ++x) dst[2 * x] = src[x];
                }
            }
}

}  // namespace

Tensor4 deconv2x2(const Tensor4& x, const Tensor4& kernel, Graph* g) {
    const Shape4 xs = x.shape();
    const Shape4 ks = kernel.shape();
    if (ks.h != 2 || ks.w != 2) throw ShapeError("deconv2x2: kernel spatial size must be 2");
    if (ks.n != xs.c) throw ShapeError("deconv2x2: kernel Cin does not match input channels");

    const int cout = ks.c;
    const std::int64_t plane = static_cast<std::int64_t>(xs.h) * xs.w;
    Tensor4 out(Shape4{xs.n, cout, 2 * xs.h, 2 * xs.w});

    // kernel viewed as (Cin x Cout*4); tmp rows are per (co, ky, kx)
    std::vector<real> tmp(static_cast<std::size_t>(cout) * 4 * plane);
    for (int n = 0; n < xs.n; ++n) {
        const real* x_n = x.values().data() + n * xs.c * plane;
        gemm_tn(static_cast<std::int64_t>(cout) * 4, xs.c, plane, kernel.values().data(), x_n,
                tmp.data(), false);
        deconv_scatter(tmp.data(), cout, xs.h, xs.w,
                       out.values().data() + static_cast<std::int64_t>(n) * cout * 4 * plane);
    }

    if (g) {
        Tensor4 xc = x, kc = kernel, oc = out;
        g->record(out, [xc, kc, oc, cout, plane]() mutable {
            const Shape4 xs2 = xc.shape();
            std::vector<real> dtmp(static_cast<std::size_t>(cout) * 4 * plane);
            for (int n = 0; n < xs2.n; ++n) {
                deconv_gather(oc.grads().data() + static_cast<std::int64_t>(n) * cout * 4 * plane,
                              cout, xs2.h, xs2.w, dtmp.data());
                // dX = K (Cin x Cout*4) * dtmp
                gemm_nn(xs2.c, static_cast<std::int64_t>(cout) * 4, plane, kc.values().data(),
                        dtmp.data(), xc.grads().data() + n * xs2.c * plane, true);
                // dK += x_n * dtmp^T
                gemm_nt(xs2.c, plane, static_cast<std::int64_t>(cout) * 4,
                        xc.values().data() + n * xs2.c * plane, dtmp.data(), kc.grads().data(),
                        true);
            }
        });
    }
    return out;
}

Tensor4 batchnorm(const Tensor4& x, const Tensor4& gamma, const Tensor4& beta,
                  Tensor4& running_mean, Tensor4& running_var, bool training, real momentum,
                  real eps, Graph* g) {
    const Shape4 xs = x.shape();
    const Shape4 want{1, xs.c, 1, 1};
    if (gamma.shape() != want || beta.shape() != want || running_mean.shape() != want ||
        running_var.shape() != want)
        throw ShapeError("batchnorm: per-channel parameters must have shape (1, C, 1, 1)");

    const std::int64_t plane = static_cast<std::int64_t>(xs.h) * xs.w;
    const std::int64_t per_channel = static_cast<std::int64_t>(xs.n) * plane;
    Tensor4 out(xs);

    std::vector<real> mean(static_cast<std::size_t>(xs.c)), invstd(static_cast<std::size_t>(xs.c));
    if (training) {
        for (int c = 0; c < xs.c; ++c) {
            real sum = 0;
            for (int n = 0; n < xs.n; ++n) {
                const real* src = x.values().data() + (static_cast<std::int64_t>(n) * xs.c + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) sum += src[i];
            }
            const real mu = sum / static_cast<real>(per_channel);
            real ss = 0;
            for (int n = 0; n < xs.n; ++n) {
                const real* src = x.values().data() + (static_cast<std::int64_t>(n) * xs.c + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    const real d = src[i] - mu;
                    ss += d * d;
                }
            }
            const real var = ss / static_cast<real>(per_channel);  // population variance
            mean[c] = mu;
            invstd[c] = real(1) / std::sqrt(var + eps);
            running_mean.values()[c] = (real(1) - momentum) * running_mean.values()[c] + momentum * mu;
            running_var.values()[c] = (real(1) - momentum) * running_var.values()[c] + momentum * var;
        }
    } else {
        for (int c = 0; c < xs.c; ++c) {
            mean[c] = running_mean.values()[c];
            invstd[c] = real(1) / std::sqrt(running_var.values()[c] + eps);
        }
    }

    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
            const real* src = x.values().data() + (static_cast<std::int64_t>(n) * xs.c + c) * plane;
            real* dst = out.values().data() + (static_cast<std::int64_t>(n) * xs.c + c) * plane;
            const real gc = gamma.values()[c], bc = beta.values()[c];
            const real mu = mean[c], is = invstd[c];
            for (std::int64_t i = 0; i < plane; ++i) dst[i] = gc * (src[i] - mu) * is + bc;
        }

    if (g) {
        Tensor4 xc = x, gc = gamma, bc = beta, oc = out;
        g->record(out, [xc, gc, bc, oc, mean = std::move(mean), invstd = std::move(invstd),
                        training, plane, per_channel]() mutable {
            const Shape4 xs2 = xc.shape();
            for (int c = 0; c < xs2.c; ++c) {
                const real mu = mean[c], is = invstd[c], gv = gc.values()[c];
                real sum_dy = 0, sum_dy_xhat = 0;
                for (int n = 0; n < xs2.n; ++n) {
                    const std::int64_t base = (static_cast<std::int64_t>(n) * xs2.c + c) * plane;
                    const real* dy = oc.grads().data() + base;
                    const real* xv = xc.values().data() + base;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        sum_dy += dy[i];
                        sum_dy_xhat += dy[i] * (xv[i] - mu) * is;
                    }
                }
                gc.grads()[c] += sum_dy_xhat;
                bc.grads()[c] += sum_dy;
                const real inv_m = real(1) / static_cast<real>(per_channel);
                for (int n = 0; n < xs2.n; ++n) {
                    const std::int64_t base = (static_cast<std::int64_t>(n) * xs2.c + c) * plane;
                    const real* dy = oc.grads().data() + base;
                    const real* xv = xc.values().data() + base;
                    real* dx = xc.grads().data() + base;
                    if (training) {
                        for (std::int64_t i = 0; i < plane; ++i) {
                            const real xhat = (xv[i] - mu) * is;
                            dx[i] += gv * is * (dy[i] - sum_dy * inv_m - xhat * sum_dy_xhat * inv_m);
                        }
                    } else {
                        for (std::int64_t i = 0; i < plane; ++i) dx[i] += gv * is * dy[i];
                    }
                }
            }
        });
    }
    return out;
}

Tensor4 relu(const Tensor4& x, Graph* g) {
    Tensor4 out(x.shape());
    const real* xv = x.values().data();
    real* ov = out.values().data();
    const std::size_t count = x.values().size();
    for (std::size_t i = 0; i < count; ++i) ov[i] = xv[i] > real(0) ? xv[i] : real(0);

    if (g) {
        Tensor4 xc = x, oc = out;
        g->record(out, [xc, oc]() mutable {
            const std::size_t count = xc.values().size();
            for (std::size_t i = 0; i < count; ++i)
                if (xc.values()[i] > real(0)) xc.grads()[i] += oc.grads()[i];
        });
    }
    return out;
}

Tensor4 concat_channels(const Tensor4& a, const Tensor4& b, Graph* g) {
    const Shape4 as = a.shape(), bs = b.shape();
    if (as.n != bs.n || as.h != bs.h || as.w != bs.w)
        throw ShapeError("concat_channels: batch/spatial dims must match");

    const std::size_t plane = static_cast<std::size_t>(as.h) * as.w;
    Tensor4 out(Shape4{as.n, as.c + bs.c, as.h, as.w});
    for (int n = 0; n < as.n; ++n) {
        std::memcpy(out.values().data() + static_cast<std::size_t>(n) * (as.c + bs.c) * plane,
                    a.values().data() + static_cast<std::size_t>(n) * as.c * plane,
                    static_cast<std::size_t>(as.c) * plane * sizeof(real));
        std::memcpy(out.values().data() +
                        (static_cast<std::size_t>(n) * (as.c + bs.c) + as.c) * plane,
                    b.values().data() + static_cast<std::size_t>(n) * bs.c * plane,
                    static_cast<std::size_t>(bs.c) * plane * sizeof(real));
    }

    if (g) {
        Tensor4 ac = a, bc = b, oc = out;
        g->record(out, [ac, bc, oc, plane]() mutable {
            const Shape4 as2 = ac.shape(), bs2 = bc.shape();
            for (int n = 0; n < as2.n; ++n) {
                const real* dout =
                    oc.grads().data() + static_cast<std::size_t>(n) * (as2.c + bs2.c) * plane;
                real* da = ac.grads().data() + static_cast<std::size_t>(n) * as2.c * plane;
                real* db = bc.grads().data() + static_cast<std::size_t>(n) * bs2.c * plane;
                for (std::size_t i = 0; i < static_cast<std::size_t>(as2.c) * plane; ++i)
                    da[i] += dout[i];
                for (std::size_t i = 0; i < static_cast<std::size_t>(bs2.c) * plane; ++i)
                    db[i] += dout[static_cast<std::size_t>(as2.c) * plane + i];
            }
        });
    }
    return out;
}

Tensor4 add(const Tensor4& a, const Tensor4& b, Graph* g) {
    if (a.shape() != b.shape()) throw ShapeError("add: shapes must match");
    Tensor4 out(a.shape());
    const std::size_t count = out.values().size();
    for (std::size_t i = 0; i < count; ++i) out.values()[i] = a.values()[i] + b.values()[i];
    if (g) {
        Tensor4 ac = a, bc = b, oc = out;
        g->record(out, [ac, bc, oc]() mutable {
            const std::size_t count = oc.grads().size();
            for (std::size_t i = 0; i < count; ++i) {
                ac.grads()[i] += oc.grads()[i];
                bc.grads()[i] += oc.grads()[i];
            }
        });
    }
    return out;
}

Tensor4 mul(const Tensor4& a, const Tensor4& b, Graph* g) {
    if (a.shape() != b.shape()) throw ShapeError("mul: shapes must match");
    Tensor4 out(a.shape());
    const std::size_t count = out.values().size();
    for (std::size_t i = 0; i < count; ++i) out.values()[i] = a.values()[i] * b.values()[i];
    if (g) {
        Tensor4 ac = a, bc = b, oc = out;
        g->record(out, [ac, bc, oc]() mutable {
            const std::size_t count = oc.grads().size();
            for (std::size_t i = 0; i < count; ++i) {
                ac.grads()[i] += oc.grads()[i] * bc.values()[i];
                bc.grads()[i] += oc.grads()[i] * ac.values()[i];
            }
        });
    }
    return out;
}

Tensor4 sum_all(const Tensor4& x, Graph* g) {
    Tensor4 out(Shape4{1, 1, 1, 1});
    real acc = 0;
    for (real v : x.values()) acc += v;
    out.values()[0] = acc;
    if (g) {
        Tensor4 xc = x, oc = out;
        g->record(out, [xc, oc]() mutable {
            const real go = oc.grads()[0];
            for (real& dv : xc.grads()) dv += go;
        });
    }
    return out;
}

Tensor4 weighted_cross_entropy(const Tensor4& logits, const LabelBatch& target,
                               const ClassWeights& weights, Graph* g) {
    const Shape4 ls = logits.shape();
    if (ls.c != 3) throw ShapeError("weighted_cross_entropy: logits must have 3 channels");
    if (target.n != ls.n || target.h != ls.h || target.w != ls.w)
        throw ShapeError("weighted_cross_entropy: target dims must match logits");
    weights.validate();
    for (std::uint8_t t : target.v)
        if (t > 2) throw LabelError("weighted_cross_entropy: label outside {0,1,2}");

    const std::int64_t plane = static_cast<std::int64_t>(ls.h) * ls.w;
    std::vector<real> probs(logits.values().size());
    const real* lv = logits.values().data();

    real total = 0;
    for (int n = 0; n < ls.n; ++n) {
        const std::int64_t base = static_cast<std::int64_t>(n) * 3 * plane;
        real slice_loss = 0;
        for (std::int64_t i = 0; i < plane; ++i) {
            const real l0 = lv[base + i];
            const real l1 = lv[base + plane + i];
            const real l2 = lv[base + 2 * plane + i];
            const real m = std::max(l0, std::max(l1, l2));
            const real e0 = std::exp(l0 - m), e1 = std::exp(l1 - m), e2 = std::exp(l2 - m);
            const real z = e0 + e1 + e2;
            probs[static_cast<std::size_t>(base + i)] = e0 / z;
            probs[static_cast<std::size_t>(base + plane + i)] = e1 / z;
            probs[static_cast<std::size_t>(base + 2 * plane + i)] = e2 / z;
            const real lse = m + std::log(z);
            const int t = target.v[static_cast<std::size_t>(n) * plane + i];
            const real lt = t == 0 ? l0 : (t == 1 ? l1 : l2);
            slice_loss += weights[t] * (lse - lt);
        }
        total += slice_loss / static_cast<real>(plane);
    }

    Tensor4 out(Shape4{1, 1, 1, 1});
    out.values()[0] = total / static_cast<real>(ls.n);

    if (g) {
        Tensor4 lc = logits, oc = out;
        g->record(out, [lc, oc, probs = std::move(probs), target, weights, plane]() mutable {
            const Shape4 ls2 = lc.shape();
            const real scale = oc.grads()[0] / (static_cast<real>(ls2.n) * static_cast<real>(plane));
            for (int n = 0; n < ls2.n; ++n) {
                const std::int64_t base = static_cast<std::int64_t>(n) * 3 * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    const int t = target.v[static_cast<std::size_t>(n) * plane + i];
                    const real w = weights[t];
                    for (int c = 0; c < 3; ++c) {
                        const std::size_t idx = static_cast<std::size_t>(base + c * plane + i);
                        const real delta = c == t ? real(1) : real(0);
                        lc.grads()[idx] += scale * w * (probs[idx] - delta);
                    }
                }
            }
        });
    }
    return out;
}

Tensor4 softmax_channels(const Tensor4& logits) {
    const Shape4 ls = logits.shape();
    Tensor4 out(ls);
    const std::int64_t plane = static_cast<std::int64_t>(ls.h) * ls.w;
    const real* lv = logits.values().data();
    real* ov = out.values().data();
    for (int n = 0; n < ls.n; ++n) {
        const std::int64_t base = static_cast<std::int64_t>(n) * ls.c * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
            real m = lv[base + i];
            for (int c = 1; c < ls.c; ++c) m = std::max(m, lv[base + c * plane + i]);
            real z = 0;
            for (int c = 0; c < ls.c; ++c) {
                const real e = std::exp(lv[base + c * plane + i] - m);
                ov[base + c * plane + i] = e;
                z += e;
            }
            for (int c = 0; c < ls.c; ++c) ov[base + c * plane + i] /= z;
        }
    }
    return out;
}

}  // namespace polyseg
