#include "mudi/params.hpp"

#include <cmath>

#include "mudi/errors.hpp"

namespace mudi {

Mat& ParamStore::create(const std::string& name, long rows, long cols) {
    if (entries_.count(name)) {
        throw ArgumentError("parameter already exists: " + name);
    }
    Entry e;
    e.value = Mat::Zero(rows, cols);
    e.grad = Mat::Zero(rows, cols);
    e.m = Mat::Zero(rows, cols);
    e.v = Mat::Zero(rows, cols);
    return entries_.emplace(name, std::move(e)).first->second.value;
}

Mat& ParamStore::create_xavier(const std::string& name, long rows, long cols, Rng& rng) {
    Mat& v = create(name, rows, cols);
    double scale = std::sqrt(6.0 / static_cast<double>(rows + cols));
    for (long r = 0; r < rows; ++r) {
        for (long c = 0; c < cols; ++c) {
            v(r, c) = rng.uniform(-scale, scale);
        }
    }
    return v;
}

Mat& ParamStore::create_zeros(const std::string& name, long rows, long cols) {
    return create(name, rows, cols);
}

Mat& ParamStore::create_constant(const std::string& name, long rows, long cols,
                                 double value) {
    Mat& v = create(name, rows, cols);
    v.setConstant(value);
    return v;
}

ParamStore::Entry& ParamStore::at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ArgumentError("unknown parameter: " + name);
    return it->second;
}

const ParamStore::Entry& ParamStore::at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ArgumentError("unknown parameter: " + name);
    return it->second;
}

void ParamStore::zero_grad() {
    for (auto& [name, e] : entries_) {
        e.grad.setZero();
    }
}

std::size_t ParamStore::total_scalars() const {
    std::size_t n = 0;
    for (const auto& [name, e] : entries_) {
        n += static_cast<std::size_t>(e.value.size());
    }
    return n;
}

void ParamStore::adopt(const std::string& prefix, const ParamStore& other) {
    for (const auto& [name, e] : other.entries_) {
        std::string full = prefix.empty() ? name : prefix + "." + name;
        if (entries_.count(full)) {
            throw ArgumentError("parameter collision while adopting: " + full);
        }
        entries_.emplace(full, e);
    }
}

void AdamOptimizer::step(ParamStore& params) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& [name, e] : params) {
        e.m = beta1_ * e.m + (1.0 - beta1_) * e.grad;
        e.v = beta2_ * e.v + (1.0 - beta2_) * e.grad.cwiseProduct(e.grad);
        Mat mhat = e.m / bc1;
        Mat vhat = e.v / bc2;
        e.value -= lr_ * mhat.cwiseQuotient(
                             (vhat.cwiseSqrt().array() + eps_).matrix());
    }
}

} // namespace mudi
