#include "keepfit/tensor.hpp"

#include <algorithm>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>

namespace keepfit {

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != shape_numel(shape_)) {
        throw ShapeError("tensor: " + std::to_string(data_.size()) + " values for shape " + shape_str(shape_));
    }
}

std::size_t Tensor::dim(std::size_t i) const {
    if (i >= shape_.size()) throw ShapeError("tensor: dim " + std::to_string(i) + " of " + shape_str(shape_));
    return shape_[i];
}

std::size_t Tensor::rows() const {
    if (shape_.empty()) return 0;
    return cols() == 0 ? 0 : data_.size() / cols();
}

std::size_t Tensor::cols() const { return shape_.empty() ? 0 : shape_.back(); }

double Tensor::item() const {
    if (data_.size() != 1) throw ShapeError("tensor: item() on shape " + shape_str(shape_));
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
        throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::add_(const Tensor& other, double alpha) {
    if (other.size() != size()) throw ShapeError("add_: " + shape_str(shape_) + " vs " + shape_str(other.shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += alpha * other.data_[i];
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, const double* b, double beta, double* c) {
    if (beta == 0.0) {
        std::fill(c, c + m * n, 0.0);
    } else if (beta != 1.0) {
        for (std::size_t i = 0; i < m * n; ++i) c[i] *= beta;
    }
    if (!trans_a && !trans_b) {
        // A m×k, B k×n
        for (std::size_t i = 0; i < m; ++i) {
            double* ci = c + i * n;
            const double* ai = a + i * k;
            for (std::size_t p = 0; p < k; ++p) {
                const double av = alpha * ai[p];
                if (av == 0.0) continue;
                const double* bp = b + p * n;
                for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
            }
        }
    } else if (!trans_a && trans_b) {
        // A m×k, B n×k
        for (std::size_t i = 0; i < m; ++i) {
            const double* ai = a + i * k;
            for (std::size_t j = 0; j < n; ++j) {
                const double* bj = b + j * k;
                double s = 0.0;
                for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
                c[i * n + j] += alpha * s;
            }
        }
    } else if (trans_a && !trans_b) {
        // A k×m, B k×n
        for (std::size_t p = 0; p < k; ++p) {
            const double* ap = a + p * m;
            const double* bp = b + p * n;
            for (std::size_t i = 0; i < m; ++i) {
                const double av = alpha * ap[i];
                if (av == 0.0) continue;
                double* ci = c + i * n;
                for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
            }
        }
    } else {
        // A k×m, B n×k
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * b[j * k + p];
                c[i * n + j] += alpha * s;
            }
        }
    }
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("matmul expects matrices, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t m = trans_a ? a.dim(1) : a.dim(0);
    const std::size_t ka = trans_a ? a.dim(0) : a.dim(1);
    const std::size_t kb = trans_b ? b.dim(1) : b.dim(0);
    const std::size_t n = trans_b ? b.dim(0) : b.dim(1);
    if (ka != kb) {
        throw ShapeError("matmul inner dims differ: " + shape_str(a.shape()) + (trans_a ? "^T" : "") + " * " +
                         shape_str(b.shape()) + (trans_b ? "^T" : ""));
    }
    Tensor c({m, n});
    gemm(trans_a, trans_b, m, n, ka, 1.0, a.data(), b.data(), 0.0, c.data());
    return c;
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose expects a matrix, got " + shape_str(a.shape()));
    const std::size_t r = a.dim(0), c = a.dim(1);
    Tensor t({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) t[j * r + i] = a[i * c + j];
    return t;
}

std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

} // namespace keepfit
