#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include <cblas.h>

#include "asrl/error.hpp"
#include "asrl/image.hpp"
#include "asrl/params.hpp"

namespace asrl {

struct PolicyOutput {
  std::vector<double> logits;
  std::vector<double> probs;
  std::vector<double> log_probs;
  double value = 0.0;
};

// d loss / d outputs for one batch element.
struct OutputGrad {
  std::vector<double> dlogits;
  double dvalue = 0.0;
};

// Log-softmax with max subtraction.
inline void softmax_into(std::span<const double> logits, std::vector<double>& probs, std::vector<double>& log_probs) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  const double lz = std::log(z) + mx;
  probs.resize(logits.size());
  log_probs.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    log_probs[i] = logits[i] - lz;
    probs[i] = std::exp(log_probs[i]);
  }
}

// Activations kept for the reverse pass, one block per chunk of up to
// kChunk batch elements. Per-chunk layouts:
//   cols1 [K1][b*P1], a1 [C1][b*P1], cols2 [K2][b*P2], a2 [C2][b*P2],
//   x [b][Flat], h [b][Hidden].
inline constexpr int kChunk = 16;

template <typename T>
struct ChunkActivations {
  int batch = 0;
  std::vector<T> cols1, a1, cols2, a2, x, h;
};

template <typename T>
struct ForwardCache {
  int batch = 0;
  std::vector<ChunkActivations<T>> chunks;
};

namespace detail {

// Row-major C = alpha * op(A) op(B) + beta * C on a single BLAS thread.
inline void gemm(bool ta, bool tb, int M, int N, int K, float alpha, const float* A, int lda, const float* B, int ldb,
                 float beta, float* C, int ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, M, N, K, alpha, A, lda, B,
              ldb, beta, C, ldc);
}

inline void gemm(bool ta, bool tb, int M, int N, int K, double alpha, const double* A, int lda, const double* B,
                 int ldb, double beta, double* C, int ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, M, N, K, alpha, A, lda, B,
              ldb, beta, C, ldc);
}

inline const bool kSingleThreadedBlas = [] {
  openblas_set_num_threads(1);
  return true;
}();

template <typename T>
void im2col_input(std::span<const ImageTensor> obs, std::vector<T>& cols) {
  using namespace arch;
  const int B = static_cast<int>(obs.size());
  const std::size_t N = static_cast<std::size_t>(B) * kP1;
  cols.resize(static_cast<std::size_t>(kK1) * N);
  for (int b = 0; b < B; ++b) {
    const float* img = obs[b].data.data();
    for (int ci = 0; ci < kChannels; ++ci)
      for (int ky = 0; ky < kKernel; ++ky)
        for (int kx = 0; kx < kKernel; ++kx) {
          const int k = (ci * kKernel + ky) * kKernel + kx;
          T* dst = cols.data() + k * N + static_cast<std::size_t>(b) * kP1;
          for (int oy = 0; oy < kH1; ++oy) {
            const float* src = img + (ci * kHeight + oy * kStride + ky) * kWidth + kx;
            for (int ox = 0; ox < kH1; ++ox) dst[oy * kH1 + ox] = static_cast<T>(src[ox * kStride]);
          }
        }
  }
}

template <typename T>
void im2col_hidden(const std::vector<T>& a1, int B, std::vector<T>& cols) {
  using namespace arch;
  const std::size_t N1 = static_cast<std::size_t>(B) * kP1;
  const std::size_t N2 = static_cast<std::size_t>(B) * kP2;
  cols.resize(static_cast<std::size_t>(kK2) * N2);
  for (int ci = 0; ci < kConv1Out; ++ci)
    for (int ky = 0; ky < kKernel; ++ky)
      for (int kx = 0; kx < kKernel; ++kx) {
        const int k = (ci * kKernel + ky) * kKernel + kx;
        for (int b = 0; b < B; ++b) {
          const T* src = a1.data() + ci * N1 + static_cast<std::size_t>(b) * kP1;
          T* dst = cols.data() + k * N2 + static_cast<std::size_t>(b) * kP2;
          for (int oy = 0; oy < kH2; ++oy)
            for (int ox = 0; ox < kH2; ++ox)
              dst[oy * kH2 + ox] = src[(oy * kStride + ky) * kH1 + ox * kStride + kx];
        }
      }
}

template <typename T>
void col2im_hidden(const std::vector<T>& dcols, int B, std::vector<T>& da1) {
  using namespace arch;
  const std::size_t N1 = static_cast<std::size_t>(B) * kP1;
  const std::size_t N2 = static_cast<std::size_t>(B) * kP2;
  da1.assign(static_cast<std::size_t>(kConv1Out) * N1, T(0));
  for (int ci = 0; ci < kConv1Out; ++ci)
    for (int ky = 0; ky < kKernel; ++ky)
      for (int kx = 0; kx < kKernel; ++kx) {
        const int k = (ci * kKernel + ky) * kKernel + kx;
        for (int b = 0; b < B; ++b) {
          T* dst = da1.data() + ci * N1 + static_cast<std::size_t>(b) * kP1;
          const T* src = dcols.data() + k * N2 + static_cast<std::size_t>(b) * kP2;
          for (int oy = 0; oy < kH2; ++oy)
            for (int ox = 0; ox < kH2; ++ox)
              dst[(oy * kStride + ky) * kH1 + ox * kStride + kx] += src[oy * kH2 + ox];
        }
      }
}

// out[co][n] = relu(bias[co] + sum_k w[co][k] * cols[k][n])
template <typename T>
void conv_relu(const T* w, const T* bias, const std::vector<T>& cols, int cout, int kdim, std::size_t N,
               std::vector<T>& out) {
  out.resize(static_cast<std::size_t>(cout) * N);
  for (int co = 0; co < cout; ++co) std::fill_n(out.data() + co * N, N, bias[co]);
  const int n = static_cast<int>(N);
  gemm(false, false, cout, n, kdim, T(1), w, kdim, cols.data(), n, T(1), out.data(), n);
  for (auto& v : out) v = v > T(0) ? v : T(0);
}

// Reverse of conv_relu given d out (already masked by the ReLU).
template <typename T>
void conv_backward(const T* w, const std::vector<T>& cols, const std::vector<T>& dz, int cout, int kdim,
                   std::size_t N, T* dw, T* db, std::vector<T>* dcols) {
  const int n = static_cast<int>(N);
  for (int co = 0; co < cout; ++co) {
    const T* d = dz.data() + co * N;
    T sb = 0;
#pragma omp simd reduction(+ : sb)
    for (std::size_t i = 0; i < N; ++i) sb += d[i];
    db[co] += sb;
  }
  gemm(false, true, cout, kdim, n, T(1), dz.data(), n, cols.data(), n, T(1), dw, kdim);
  if (dcols) {
    dcols->resize(static_cast<std::size_t>(kdim) * N);
    gemm(true, false, kdim, n, cout, T(1), w, kdim, dz.data(), n, T(0), dcols->data(), n);
  }
}

}  // namespace detail

inline void check_obs_shapes(std::span<const ImageTensor> obs) {
  for (const auto& o : obs)
    if (o.channels != kChannels || o.height != kHeight || o.width != kWidth || o.size() != kImageSize)
      throw ShapeError("forward: observation must be 3x32x32");
}

namespace detail {

template <typename T>
void forward_chunk(const ParamSet<T>& params, std::span<const ImageTensor> obs, ChunkActivations<T>& c,
                   std::span<PolicyOutput> out) {
  using namespace arch;
  const int B = static_cast<int>(obs.size());
  const int A = params.n_actions();
  c.batch = B;
  const std::size_t N1 = static_cast<std::size_t>(B) * kP1;
  const std::size_t N2 = static_cast<std::size_t>(B) * kP2;
  im2col_input(obs, c.cols1);
  conv_relu(params.conv1_w(), params.conv1_b(), c.cols1, kConv1Out, kK1, N1, c.a1);
  im2col_hidden(c.a1, B, c.cols2);
  conv_relu(params.conv2_w(), params.conv2_b(), c.cols2, kConv2Out, kK2, N2, c.a2);

  c.x.resize(static_cast<std::size_t>(B) * kFlat);
  for (int co = 0; co < kConv2Out; ++co)
    for (int b = 0; b < B; ++b)
      std::copy_n(c.a2.data() + co * N2 + static_cast<std::size_t>(b) * kP2, kP2,
                  c.x.data() + static_cast<std::size_t>(b) * kFlat + co * kP2);

  c.h.resize(static_cast<std::size_t>(B) * kHidden);
  for (int b = 0; b < B; ++b) std::copy_n(params.fc_b(), kHidden, c.h.data() + static_cast<std::size_t>(b) * kHidden);
  gemm(false, false, B, kHidden, kFlat, T(1), c.x.data(), kFlat, params.fc_w(), kHidden, T(1), c.h.data(), kHidden);
  for (auto& v : c.h) v = v > T(0) ? v : T(0);

  std::vector<T> lg(A);
  for (int b = 0; b < B; ++b) {
    const T* h = c.h.data() + static_cast<std::size_t>(b) * kHidden;
    std::copy_n(params.pi_b(), A, lg.data());
    T v = params.v_b()[0];
    for (int k = 0; k < kHidden; ++k) {
      const T hk = h[k];
      const T* wr = params.pi_w() + k * A;
      for (int a = 0; a < A; ++a) lg[a] += hk * wr[a];
      v += hk * params.v_w()[k];
    }
    auto& o = out[b];
    o.logits.assign(lg.begin(), lg.end());
    o.value = static_cast<double>(v);
    softmax_into(o.logits, o.probs, o.log_probs);
  }
}

template <typename T>
void backward_chunk(const ParamSet<T>& params, const ChunkActivations<T>& c, std::span<const OutputGrad> grads,
                    Gradient<T>& grad) {
  using namespace arch;
  const int B = c.batch;
  const int A = params.n_actions();
  const std::size_t N1 = static_cast<std::size_t>(B) * kP1;
  const std::size_t N2 = static_cast<std::size_t>(B) * kP2;

  // Heads.
  std::vector<T> dh(static_cast<std::size_t>(B) * kHidden, T(0));
  std::vector<T> dl(A);
  for (int b = 0; b < B; ++b) {
    const T* h = c.h.data() + static_cast<std::size_t>(b) * kHidden;
    T* dhb = dh.data() + static_cast<std::size_t>(b) * kHidden;
    for (int a = 0; a < A; ++a) dl[a] = static_cast<T>(grads[b].dlogits[a]);
    const T dv = static_cast<T>(grads[b].dvalue);
    for (int a = 0; a < A; ++a) grad.pi_b()[a] += dl[a];
    grad.v_b()[0] += dv;
    for (int k = 0; k < kHidden; ++k) {
      const T* wr = params.pi_w() + k * A;
      T* gr = grad.pi_w() + k * A;
      T s = params.v_w()[k] * dv;
      for (int a = 0; a < A; ++a) {
        gr[a] += h[k] * dl[a];
        s += wr[a] * dl[a];
      }
      grad.v_w()[k] += h[k] * dv;
      dhb[k] = h[k] > T(0) ? s : T(0);
    }
  }

  // Dense layer.
  std::vector<T> dx(static_cast<std::size_t>(B) * kFlat);
  for (int b = 0; b < B; ++b)
    for (int j = 0; j < kHidden; ++j) grad.fc_b()[j] += dh[static_cast<std::size_t>(b) * kHidden + j];
  gemm(false, true, B, kFlat, kHidden, T(1), dh.data(), kHidden, params.fc_w(), kHidden, T(0), dx.data(), kFlat);
  gemm(true, false, kFlat, kHidden, B, T(1), c.x.data(), kFlat, dh.data(), kHidden, T(1), grad.fc_w(), kHidden);

  // conv2
  std::vector<T> dz2(static_cast<std::size_t>(kConv2Out) * N2);
  for (int co = 0; co < kConv2Out; ++co)
    for (int b = 0; b < B; ++b) {
      const std::size_t base = co * N2 + static_cast<std::size_t>(b) * kP2;
      const T* dxb = dx.data() + static_cast<std::size_t>(b) * kFlat + co * kP2;
      for (int p = 0; p < kP2; ++p) dz2[base + p] = c.a2[base + p] > T(0) ? dxb[p] : T(0);
    }
  std::vector<T> dcols2;
  conv_backward(params.conv2_w(), c.cols2, dz2, kConv2Out, kK2, N2, grad.conv2_w(), grad.conv2_b(), &dcols2);

  // conv1
  std::vector<T> dz1;
  col2im_hidden(dcols2, B, dz1);
  for (std::size_t i = 0; i < dz1.size(); ++i)
    if (!(c.a1[i] > T(0))) dz1[i] = T(0);
  conv_backward(params.conv1_w(), c.cols1, dz1, kConv1Out, kK1, N1, grad.conv1_w(), grad.conv1_b(),
                static_cast<std::vector<T>*>(nullptr));
}

}  // namespace detail

// Evaluates the policy and value heads for a batch.
template <typename T>
std::vector<PolicyOutput> forward(const ParamSet<T>& params, std::span<const ImageTensor> obs,
                                  ForwardCache<T>* cache = nullptr) {
  check_obs_shapes(obs);
  const int B = static_cast<int>(obs.size());
  std::vector<PolicyOutput> out(B);
  ChunkActivations<T> scratch;
  if (cache) {
    cache->batch = B;
    cache->chunks.resize((B + kChunk - 1) / kChunk);
  }
  for (int start = 0, ci = 0; start < B; start += kChunk, ++ci) {
    const int n = std::min(kChunk, B - start);
    auto& act = cache ? cache->chunks[ci] : scratch;
    detail::forward_chunk(params, obs.subspan(start, n), act, std::span<PolicyOutput>(out).subspan(start, n));
  }
  return out;
}

template <typename T>
std::vector<PolicyOutput> forward(const ParamSet<T>& params, const std::vector<ImageTensor>& obs,
                                  ForwardCache<T>* cache = nullptr) {
  return forward(params, std::span<const ImageTensor>(obs), cache);
}

// Exact reverse-mode gradient of sum_b <grads[b], outputs[b]> w.r.t. params,
// using activations from a prior forward() call on the same params.
template <typename T>
Gradient<T> backward(const ParamSet<T>& params, const ForwardCache<T>& cache, std::span<const OutputGrad> grads) {
  const int A = params.n_actions();
  if (static_cast<int>(grads.size()) != cache.batch) throw ShapeError("backward: one output gradient per batch element");
  for (const auto& g : grads)
    if (static_cast<int>(g.dlogits.size()) != A) throw ShapeError("backward: dlogits length != |A|");
  Gradient<T> grad(A);
  int start = 0;
  for (const auto& act : cache.chunks) {
    detail::backward_chunk(params, act, grads.subspan(start, act.batch), grad);
    start += act.batch;
  }
  return grad;
}

template <typename T>
Gradient<T> backward(const ParamSet<T>& params, const ForwardCache<T>& cache, const std::vector<OutputGrad>& grads) {
  return backward(params, cache, std::span<const OutputGrad>(grads));
}

template <typename T>
Gradient<T> backward(const ParamSet<T>& params, std::span<const ImageTensor> obs, std::span<const OutputGrad> grads) {
  ForwardCache<T> cache;
  forward(params, obs, &cache);
  return backward(params, cache, grads);
}

}  // namespace asrl
