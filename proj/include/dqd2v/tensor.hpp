#pragma once

#include <cstring>
#include <numeric>
#include <vector>

#include "dqd2v/common.hpp"

namespace dqd2v {

// Dense row-major tensor of doubles. Value semantics throughout; all shape
// bookkeeping is explicit (no views, no broadcasting at this level).
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<idx> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<std::size_t>(count(shape_)), 0.0);
    }

    static Tensor zeros(std::vector<idx> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<idx> shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor scalar(double v) { return full({1}, v); }

    static Tensor from(std::vector<double> values, std::vector<idx> shape) {
        require(count(shape) == static_cast<idx>(values.size()), "Tensor::from: size mismatch");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::move(values);
        return t;
    }

    const std::vector<idx>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    idx dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    idx numel() const { return static_cast<idx>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](idx i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](idx i) const { return data_[static_cast<std::size_t>(i)]; }

    double& at(idx i) { return data_[static_cast<std::size_t>(i)]; }
    double& at(idx i, idx j) { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
    double& at(idx i, idx j, idx k) {
        return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
    }
    double& at(idx i, idx j, idx k, idx l) {
        return data_[static_cast<std::size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
    }
    double at(idx i) const { return data_[static_cast<std::size_t>(i)]; }
    double at(idx i, idx j) const { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
    double at(idx i, idx j, idx k) const {
        return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
    }
    double at(idx i, idx j, idx k, idx l) const {
        return data_[static_cast<std::size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(std::vector<idx> shape) const {
        require(count(shape) == numel(), "reshape: element count mismatch");
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool equal_data(const Tensor& o) const {
        return shape_ == o.shape_ &&
               std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(double)) == 0;
    }

    static idx count(const std::vector<idx>& shape) {
        idx n = 1;
        for (idx d : shape) {
            require(d >= 0, "negative dimension");
            n *= d;
        }
        return n;
    }

private:
    std::vector<idx> shape_;
    std::vector<double> data_;
};

inline std::string shape_str(const Tensor& t) {
    std::string s = "[";
    for (int i = 0; i < t.ndim(); ++i) {
        if (i) s += ",";
        s += std::to_string(t.dim(i));
    }
    return s + "]";
}

}  // namespace dqd2v
