#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include <Eigen/Dense>

#include "mudi/rng.hpp"

namespace mudi {

using Mat = Eigen::MatrixXd;

// Named dense parameters with gradient and Adam state. Iteration order is
// the lexicographic name order (std::map), which keeps updates deterministic.
class ParamStore {
public:
    struct Entry {
        Mat value;
        Mat grad;
        Mat m; // Adam first moment
        Mat v; // Adam second moment
    };

    Mat& create(const std::string& name, long rows, long cols);
    Mat& create_xavier(const std::string& name, long rows, long cols, Rng& rng);
    Mat& create_zeros(const std::string& name, long rows, long cols);
    Mat& create_constant(const std::string& name, long rows, long cols, double value);

    bool has(const std::string& name) const { return entries_.count(name) != 0; }
    Entry& at(const std::string& name);
    const Entry& at(const std::string& name) const;
    Mat& value(const std::string& name) { return at(name).value; }
    const Mat& value(const std::string& name) const { return at(name).value; }
    Mat& grad(const std::string& name) { return at(name).grad; }

    void zero_grad();
    std::size_t size() const { return entries_.size(); }
    std::size_t total_scalars() const;

    // Ordered iteration.
    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    // Merge another store under a name prefix (used to bundle sub-modules).
    void adopt(const std::string& prefix, const ParamStore& other);

private:
    std::map<std::string, Entry> entries_;
};

// Adam with bias correction; hyperparameters fixed at construction.
class AdamOptimizer {
public:
    explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999,
                           double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(ParamStore& params);
    long steps_taken() const { return t_; }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
};

} // namespace mudi
