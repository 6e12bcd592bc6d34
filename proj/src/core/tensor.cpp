// Copyright 2026 the kvcat authors
// SPDX-License-Identifier: Apache-2.0

#include "tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace kvcat {

Tensor::Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    int64_t n = 1;
    for (int64_t d : shape_) {
        if (d <= 0) throw ShapeError("tensor dimensions must be strictly positive");
        n *= d;
    }
    data_.assign(static_cast<size_t>(n), 0.0);
}

Tensor Tensor::full(std::vector<int64_t> shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
}

Tensor Tensor::scalar(double value) {
    Tensor t({1});
    t.at(0) = value;
    return t;
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    int64_t r = static_cast<int64_t>(rows.size());
    int64_t c = static_cast<int64_t>(rows.begin()->size());
    Tensor t({r, c});
    int64_t i = 0;
    for (const auto& row : rows) {
        if (static_cast<int64_t>(row.size()) != c) throw ShapeError("ragged row list");
        for (double v : row) t.data_[static_cast<size_t>(i++)] = v;
    }
    return t;
}

Tensor Tensor::from_vector(std::vector<int64_t> shape, std::vector<double> data) {
    Tensor t(std::move(shape));
    if (t.data_.size() != data.size()) throw ShapeError("data length does not match shape");
    t.data_ = std::move(data);
    return t;
}

Tensor Tensor::identity(int64_t n) {
    Tensor t({n, n});
    for (int64_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

int64_t Tensor::rows() const {
    if (shape_.size() == 2) return shape_[0];
    if (shape_.size() == 1) return 1;
    throw ShapeError("rows() requires rank 1 or 2, got shape " + shape_str());
}

int64_t Tensor::cols() const {
    if (shape_.size() == 2) return shape_[1];
    if (shape_.size() == 1) return shape_[0];
    throw ShapeError("cols() requires rank 1 or 2, got shape " + shape_str());
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << "x";
        os << shape_[i];
    }
    os << "]";
    return os.str();
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    const int64_t m = trans_a ? a.cols() : a.rows();
    const int64_t ka = trans_a ? a.rows() : a.cols();
    const int64_t kb = trans_b ? b.cols() : b.rows();
    const int64_t n = trans_b ? b.rows() : b.cols();
    if (ka != kb) {
        throw ShapeError("matmul inner dimension mismatch: " + a.shape_str() + (trans_a ? "^T" : "") +
                         " x " + b.shape_str() + (trans_b ? "^T" : ""));
    }
    Tensor out({m, n});
    auto am = a.mat();
    auto bm = b.mat();
    auto om = out.mat();
    if (!trans_a && !trans_b)
        om.noalias() = am * bm;
    else if (!trans_a && trans_b)
        om.noalias() = am * bm.transpose();
    else if (trans_a && !trans_b)
        om.noalias() = am.transpose() * bm;
    else
        om.noalias() = am.transpose() * bm.transpose();
    return out;
}

uint64_t tensor_checksum(const Tensor& t) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (double v : t.vec()) {
        uint64_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        for (int s = 0; s < 64; s += 8) {
            h ^= (bits >> s) & 0xffULL;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

bool tensor_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    for (int64_t i = 0; i < a.numel(); ++i) {
        if (a.at(i) != b.at(i)) return false;
    }
    return true;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff shape mismatch");
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
    return m;
}

}  // namespace kvcat
