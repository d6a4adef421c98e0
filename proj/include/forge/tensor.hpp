#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "forge/errors.hpp"

namespace forge {

// Dense row-major tensor of doubles. Rank is small (<= 4) everywhere in this
// codebase; shapes are carried explicitly rather than templated.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int64_t> dims) : dims_(std::move(dims)) {
        data_.assign(static_cast<size_t>(count(dims_)), 0.0);
    }

    static Tensor zeros(std::vector<int64_t> dims) { return Tensor(std::move(dims)); }

    static Tensor full(std::vector<int64_t> dims, double v) {
        Tensor t(std::move(dims));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor scalar(double v) {
        Tensor t({1});
        t.data_[0] = v;
        return t;
    }

    static Tensor from(std::vector<int64_t> dims, std::vector<double> values) {
        Tensor t;
        t.dims_ = std::move(dims);
        if (static_cast<int64_t>(values.size()) != count(t.dims_))
            throw ContractViolation("Tensor::from: value count does not match shape " + shape_str(t.dims_));
        t.data_ = std::move(values);
        return t;
    }

    int rank() const { return static_cast<int>(dims_.size()); }
    int64_t dim(int i) const { return dims_[static_cast<size_t>(i)]; }
    const std::vector<int64_t>& dims() const { return dims_; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    double& at(int64_t i, int64_t j) {
        assert(rank() == 2);
        return data_[static_cast<size_t>(i * dims_[1] + j)];
    }
    double at(int64_t i, int64_t j) const { return const_cast<Tensor*>(this)->at(i, j); }

    double& at(int64_t i, int64_t j, int64_t k) {
        assert(rank() == 3);
        return data_[static_cast<size_t>((i * dims_[1] + j) * dims_[2] + k)];
    }
    double at(int64_t i, int64_t j, int64_t k) const { return const_cast<Tensor*>(this)->at(i, j, k); }

    double& at(int64_t i, int64_t j, int64_t k, int64_t l) {
        assert(rank() == 4);
        return data_[static_cast<size_t>(((i * dims_[1] + j) * dims_[2] + k) * dims_[3] + l)];
    }
    double at(int64_t i, int64_t j, int64_t k, int64_t l) const {
        return const_cast<Tensor*>(this)->at(i, j, k, l);
    }

    bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }

    Tensor reshaped(std::vector<int64_t> dims) const {
        if (count(dims) != numel())
            throw ContractViolation("reshape: element count mismatch, have " + shape_str(dims_) +
                                    ", want " + shape_str(dims));
        Tensor t = *this;
        t.dims_ = std::move(dims);
        return t;
    }

    void add_(const Tensor& o) {
        assert(same_shape(o));
        for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    }

    void scale_(double s) {
        for (double& x : data_) x *= s;
    }

    void fill_(double v) { std::fill(data_.begin(), data_.end(), v); }

    static int64_t count(const std::vector<int64_t>& dims) {
        int64_t n = 1;
        for (int64_t d : dims) n *= d;
        return n;
    }

    static std::string shape_str(const std::vector<int64_t>& dims) {
        std::string s = "(";
        for (size_t i = 0; i < dims.size(); ++i) {
            if (i) s += ", ";
            s += std::to_string(dims[i]);
        }
        s += ")";
        return s;
    }

    std::string shape_str() const { return shape_str(dims_); }

private:
    std::vector<int64_t> dims_;
    std::vector<double> data_;
};

inline void require_shape(const Tensor& t, const std::vector<int64_t>& dims, const char* what) {
    if (t.dims() != dims)
        throw ContractViolation(std::string(what) + ": expected shape " + Tensor::shape_str(dims) +
                                ", got " + t.shape_str());
}

inline bool all_finite(const Tensor& t) {
    for (int64_t i = 0; i < t.numel(); ++i)
        if (!std::isfinite(t[i])) return false;
    return true;
}

}  // namespace forge
