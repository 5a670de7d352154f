#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "unitlm/error.hpp"

namespace unitlm {

// Dense row-major tensor of rank 1 or 2.
template <typename T>
struct Tensor {
    std::vector<int> dims;
    std::vector<T> v;

    static Tensor vec(int n) {
        Tensor t;
        t.dims = {n};
        t.v.assign(static_cast<size_t>(n), T(0));
        return t;
    }
    static Tensor mat(int r, int c) {
        Tensor t;
        t.dims = {r, c};
        t.v.assign(static_cast<size_t>(r) * c, T(0));
        return t;
    }

    int rank() const { return static_cast<int>(dims.size()); }
    int rows() const { return dims[0]; }
    int cols() const { return rank() == 2 ? dims[1] : 1; }
    size_t size() const { return v.size(); }

    T* row(int r) { return v.data() + static_cast<size_t>(r) * dims[1]; }
    const T* row(int r) const { return v.data() + static_cast<size_t>(r) * dims[1]; }

    T* data() { return v.data(); }
    const T* data() const { return v.data(); }

    void zero() { v.assign(v.size(), T(0)); }
};

template <typename To, typename From>
Tensor<To> cast_tensor(const Tensor<From>& t) {
    Tensor<To> out;
    out.dims = t.dims;
    out.v.resize(t.v.size());
    for (size_t i = 0; i < t.v.size(); ++i) {
        out.v[i] = static_cast<To>(t.v[i]);
    }
    return out;
}

namespace kern {

template <typename T>
T dot(const T* a, const T* b, int n) {
    T acc = T(0);
#pragma omp simd reduction(+ : acc)
    for (int i = 0; i < n; ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

template <typename T>
void axpy(T* y, T a, const T* x, int n) {
#pragma omp simd
    for (int i = 0; i < n; ++i) {
        y[i] += a * x[i];
    }
}

// y = W x + b, W is out_dim x in_dim row-major, b may be null
template <typename T>
void matvec(const T* w, const T* b, const T* x, T* y, int out_dim, int in_dim) {
    for (int o = 0; o < out_dim; ++o) {
        y[o] = dot(w + static_cast<size_t>(o) * in_dim, x, in_dim) + (b ? b[o] : T(0));
    }
}

// dx += W^T dy
template <typename T>
void matvec_t_acc(const T* w, const T* dy, T* dx, int out_dim, int in_dim) {
    for (int o = 0; o < out_dim; ++o) {
        axpy(dx, dy[o], w + static_cast<size_t>(o) * in_dim, in_dim);
    }
}

// dW += dy (outer) x
template <typename T>
void outer_acc(T* dw, const T* dy, const T* x, int out_dim, int in_dim) {
    for (int o = 0; o < out_dim; ++o) {
        axpy(dw + static_cast<size_t>(o) * in_dim, dy[o], x, in_dim);
    }
}

// in-place softmax with max subtraction; returns log of the normalizer
// so -log p[j] can be recovered as log_z - (x_orig[j] - max)
template <typename T>
T softmax_inplace(T* x, int n) {
    T mx = x[0];
    for (int i = 1; i < n; ++i) {
        mx = x[i] > mx ? x[i] : mx;
    }
    T z = T(0);
    for (int i = 0; i < n; ++i) {
        x[i] = std::exp(x[i] - mx);
        z += x[i];
    }
    T inv = T(1) / z;
    for (int i = 0; i < n; ++i) {
        x[i] *= inv;
    }
    return std::log(z) + mx;
}

template <typename T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865475)));
}

template <typename T>
T gelu_grad(T x) {
    T cdf = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475)));
    T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014327);
    return cdf + x * pdf;
}

} // namespace kern
} // namespace unitlm
