#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "spvit/tensor.hpp"

namespace spvit {

// Cyclic Jacobi eigensolver for a symmetric matrix (row-major n x n).
// Returns eigenvalues sorted descending. Adequate for the small matrices the
// rank checks use.
inline std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::size_t n) {
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
        if (off < 1e-300) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a[p * n + q];
                if (std::abs(apq) < 1e-300) continue;
                const double app = a[p * n + p];
                const double aqq = a[q * n + q];
                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (std::size_t i = 0; i < n; ++i) {
                    const double aip = a[i * n + p];
                    const double aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double api = a[p * n + i];
                    const double aqi = a[q * n + i];
                    a[p * n + i] = c * api - s * aqi;
                    a[q * n + i] = s * api + c * aqi;
                }
            }
        }
    }
    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = a[i * n + i];
    std::sort(eig.begin(), eig.end(), std::greater<double>());
    return eig;
}

// Singular values of an [m x n] matrix, sorted descending, via one-sided
// Jacobi column orthogonalization. Unlike the Gram-matrix route this does
// not square the condition number, so trailing singular values resolve to
// roughly machine epsilon relative to the largest.
inline std::vector<double> singular_values(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("singular_values: need rank 2, got " + a.shape_str());
    std::size_t m = a.shape[0], n = a.shape[1];
    // Tall column-major working copy (transpose first when wide).
    std::vector<double> cm;
    if (m >= n) {
        cm.assign(m * n, 0.0);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) cm[j * m + i] = a.data[i * n + j];
    } else {
        std::swap(m, n);
        cm = a.data;  // a^T in column-major is a's row-major layout
    }
    for (int sweep = 0; sweep < 60; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double app = 0.0, aqq = 0.0, apq = 0.0;
                const double* cp = &cm[p * m];
                const double* cq = &cm[q * m];
                for (std::size_t i = 0; i < m; ++i) {
                    app += cp[i] * cp[i];
                    aqq += cq[i] * cq[i];
                    apq += cp[i] * cq[i];
                }
                if (std::abs(apq) <= 1e-18 * std::sqrt(app * aqq) || apq == 0.0) continue;
                rotated = true;
                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double cs = 1.0 / std::sqrt(1.0 + t * t);
                const double sn = cs * t;
                double* mp = &cm[p * m];
                double* mq = &cm[q * m];
                for (std::size_t i = 0; i < m; ++i) {
                    const double vp = mp[i], vq = mq[i];
                    mp[i] = cs * vp - sn * vq;
                    mq[i] = sn * vp + cs * vq;
                }
            }
        }
        if (!rotated) break;
    }
    std::vector<double> sv(n);
    for (std::size_t j = 0; j < n; ++j) {
        double norm = 0.0;
        for (std::size_t i = 0; i < m; ++i) norm += cm[j * m + i] * cm[j * m + i];
        sv[j] = std::sqrt(norm);
    }
    std::sort(sv.begin(), sv.end(), std::greater<double>());
    return sv;
}

}  // namespace spvit
