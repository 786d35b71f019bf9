#pragma once

#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace mudi::ad {

using Mat = Eigen::MatrixXd;

// One value in the computation graph. Nodes are owned by the Tape and only
// reference earlier nodes, so reverse creation order is a valid topological
// order for backpropagation.
struct Node {
    Mat value;
    Mat grad; // allocated lazily by ensure_grad()
    bool needs_grad = false;
    std::vector<Node*> parents;
    std::function<void(Node&)> backward_fn;
    Mat* grad_sink = nullptr; // parameter leaves accumulate here

    void ensure_grad() {
        if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
            grad = Mat::Zero(value.rows(), value.cols());
        }
    }
};

// Reverse-mode tape over dense double matrices. Build a fresh tape per
// forward pass; call backward() on a 1x1 loss node.
class Tape {
public:
    // Constant leaf (no gradient).
    Node* input(Mat v);

    // Parameter leaf: value is copied in, gradients accumulate into `grad_sink`.
    Node* param(const Mat& value, Mat& grad_sink);

    // --- arithmetic -------------------------------------------------------
    Node* add(Node* a, Node* b);
    Node* sub(Node* a, Node* b);
    Node* neg(Node* a);
    Node* mul(Node* a, Node* b);            // elementwise
    Node* cmul(Node* a, double s);          // scale by constant
    Node* cmul_mat(Node* a, const Mat& m);  // elementwise by constant matrix
    Node* cadd_mat(Node* a, const Mat& m);  // add constant matrix
    Node* add_rowvec(Node* a, Node* row);   // broadcast [1 x C] over rows

    Node* matmul(Node* a, Node* b);     // a * b
    Node* matmul_nt(Node* a, Node* b);  // a * b^T
    Node* matmul_tn(Node* a, Node* b);  // a^T * b

    // --- shape ------------------------------------------------------------
    Node* concat_cols(Node* a, Node* b);
    Node* concat_cols(const std::vector<Node*>& parts);
    Node* concat_rows(const std::vector<Node*>& parts);
    Node* slice_cols(Node* a, int c0, int ncols);
    Node* slice_rows(Node* a, int r0, int nrows);
    Node* gather_rows(Node* a, std::vector<int> idx);
    Node* gather_elems(Node* a, std::vector<std::pair<int, int>> coords); // -> [K x 1]

    // --- nonlinearities ----------------------------------------------------
    Node* leaky_relu(Node* a, double slope);
    Node* elu(Node* a);
    Node* relu(Node* a);
    Node* sigmoid(Node* a);
    Node* tanh_(Node* a);
    Node* softplus(Node* a); // numerically stable log(1 + e^x)
    Node* log_(Node* a);
    Node* exp_(Node* a);

    // --- reductions & normalizations ---------------------------------------
    Node* sum_all(Node* a);  // -> 1x1
    Node* mean_all(Node* a); // -> 1x1
    Node* row_sum(Node* a);  // [N x C] -> [N x 1]
    Node* mean_over_rows(Node* a); // [N x C] -> [1 x C]
    Node* softmax_rows(Node* a);
    Node* log_softmax_rows(Node* a);

    // Softmax over groups of rows of a column vector: scores [E x 1],
    // seg[e] in [0, nseg). Each group is normalized independently; empty
    // groups contribute nothing.
    Node* segment_softmax(Node* scores, std::vector<int> seg, int nseg);

    // Sum rows of a [E x C] into [nseg x C] by segment id.
    Node* segment_sum(Node* a, std::vector<int> seg, int nseg);

    // Per-row layer normalization with gain/bias [1 x C].
    Node* layer_norm(Node* a, Node* gain, Node* bias, double eps = 1e-5);

    // Dynamic-weighted-aggregation selection: out = b .* cp + (1-b) .* cc,
    // b = 1[gm > tau]. Backward: straight-through on gm (identity estimator),
    // exact masks on cp/cc. Soft mode blends with gm directly (differentiable).
    Node* dwa_select(Node* cp, Node* cc, Node* gm, double tau, bool hard);

    void backward(Node* root);

    std::size_t size() const { return nodes_.size(); }

private:
    Node* make(Mat v, std::vector<Node*> parents, std::function<void(Node&)> bw);

    std::deque<Node> nodes_;
};

// --- loss helpers (compose tape ops) ---------------------------------------

// Mean over all elements of w .* (softplus(z) - y .* z); `weights` may be null.
Node* bce_with_logits_mean(Tape& t, Node* logits, const Mat& targets,
                           const Mat* weights = nullptr);

// Mean negative log-likelihood of target column per row.
Node* ce_from_logits_rows(Tape& t, Node* logits, const std::vector<int>& target_cols);

// Mean squared error against a constant target.
Node* mse_mean(Tape& t, Node* pred, const Mat& target);

// Throws NumericError when the matrix contains NaN/Inf.
void check_finite(const Mat& m, const std::string& context);

} // namespace mudi::ad
