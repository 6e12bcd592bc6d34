// Copyright 2026 the kvcat authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"

namespace kvcat {

using MatrixMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatrixMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Dense row-major tensor of 64-bit floats. Rank is the shape length;
// most model code works with rank-1 vectors and rank-2 matrices.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shape);
    Tensor(std::initializer_list<int64_t> shape) : Tensor(std::vector<int64_t>(shape)) {}

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int64_t> shape, double value);
    static Tensor scalar(double value);
    static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor from_vector(std::vector<int64_t> shape, std::vector<double> data);
    static Tensor identity(int64_t n);

    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    int64_t dim(int64_t i) const { return shape_.at(static_cast<size_t>(i)); }
    // Rank-2 accessors; rank-1 tensors are treated as single-row matrices.
    int64_t rows() const;
    int64_t cols() const;

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& at(int64_t i) { return data_[static_cast<size_t>(i)]; }
    double at(int64_t i) const { return data_[static_cast<size_t>(i)]; }
    double& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * cols() + c)]; }
    double at(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * cols() + c)]; }

    MatrixMap mat() { return MatrixMap(data(), rows(), cols()); }
    ConstMatrixMap mat() const { return ConstMatrixMap(data(), rows(), cols()); }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

    std::string shape_str() const;

private:
    std::vector<int64_t> shape_;
    std::vector<double> data_;
};

// C = A*B with optional transposes; dimensions checked.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

// FNV-1a over the raw little-endian bytes; used for determinism checks.
uint64_t tensor_checksum(const Tensor& t);

// Exact elementwise equality (bit-level up to +/-0 identification via ==).
bool tensor_equal(const Tensor& a, const Tensor& b);

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace kvcat
