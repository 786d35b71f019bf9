#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "mudi/autodiff.hpp"
#include "mudi/errors.hpp"
#include "mudi/params.hpp"
#include "mudi/rng.hpp"

using namespace mudi;
using namespace mudi::ad;

namespace {

Mat random_mat(long rows, long cols, Rng& rng, double scale = 1.0) {
    Mat m(rows, cols);
    for (long r = 0; r < rows; ++r)
        for (long c = 0; c < cols; ++c) m(r, c) = scale * rng.gaussian();
    return m;
}

// Central finite differences against the analytic gradient for a scalar
// function of a list of parameter matrices.
void check_gradients(std::vector<Mat> params,
                     const std::function<Node*(Tape&, std::vector<Node*>&)>& build,
                     double eps = 1e-6, double tol = 1e-6) {
    std::vector<Mat> grads(params.size());
    {
        Tape tape;
        std::vector<Node*> nodes;
        for (std::size_t i = 0; i < params.size(); ++i) {
            grads[i] = Mat::Zero(params[i].rows(), params[i].cols());
            nodes.push_back(tape.param(params[i], grads[i]));
        }
        Node* loss = build(tape, nodes);
        tape.backward(loss);
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (long r = 0; r < params[i].rows(); ++r) {
            for (long c = 0; c < params[i].cols(); ++c) {
                auto eval = [&](double delta) {
                    std::vector<Mat> shifted = params;
                    shifted[i](r, c) += delta;
                    Tape tape;
                    std::vector<Node*> nodes;
                    std::vector<Mat> sink(params.size());
                    for (std::size_t k = 0; k < shifted.size(); ++k) {
                        sink[k] = Mat::Zero(shifted[k].rows(), shifted[k].cols());
                        nodes.push_back(tape.param(shifted[k], sink[k]));
                    }
                    return build(tape, nodes)->value(0, 0);
                };
                double numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                double analytic = grads[i](r, c);
                // Absolute differences below central-difference noise count
                // as exact; the denominator floor keeps near-zero gradients sane.
                double diff = std::abs(numeric - analytic);
                if (diff < 1e-9) continue;
                double denom = std::max(std::abs(numeric) + std::abs(analytic), 1e-6);
                double rel = diff / denom;
                INFO("param ", i, " entry (", r, ",", c, ") analytic=", analytic,
                     " numeric=", numeric);
                CHECK(rel < tol);
            }
        }
    }
}

} // namespace

TEST_CASE("matmul chain gradient matches finite differences") {
    Rng rng(1);
    check_gradients({random_mat(3, 4, rng), random_mat(4, 2, rng)},
                    [](Tape& t, std::vector<Node*>& p) {
                        return t.sum_all(t.tanh_(t.matmul(p[0], p[1])));
                    });
}

TEST_CASE("matmul_nt and matmul_tn gradients") {
    Rng rng(2);
    check_gradients({random_mat(3, 4, rng), random_mat(5, 4, rng)},
                    [](Tape& t, std::vector<Node*>& p) {
                        return t.mean_all(t.sigmoid(t.matmul_nt(p[0], p[1])));
                    });
    check_gradients({random_mat(4, 3, rng), random_mat(4, 5, rng)},
                    [](Tape& t, std::vector<Node*>& p) {
                        return t.mean_all(t.elu(t.matmul_tn(p[0], p[1])));
                    });
}

TEST_CASE("elementwise ops and broadcasting bias") {
    Rng rng(3);
    check_gradients(
        {random_mat(4, 3, rng), random_mat(4, 3, rng), random_mat(1, 3, rng)},
        [](Tape& t, std::vector<Node*>& p) {
            Node* x = t.mul(p[0], p[1]);
            x = t.add_rowvec(x, p[2]);
            x = t.leaky_relu(x, 0.2);
            return t.sum_all(x);
        });
}

TEST_CASE("concat, slice and gather gradients") {
    Rng rng(4);
    check_gradients(
        {random_mat(4, 3, rng), random_mat(4, 2, rng)},
        [](Tape& t, std::vector<Node*>& p) {
            Node* cat = t.concat_cols(p[0], p[1]);
            Node* sl = t.slice_cols(cat, 1, 3);
            Node* g = t.gather_rows(sl, {0, 2, 2, 3});
            return t.mean_all(t.mul(g, g));
        });
    check_gradients({random_mat(5, 3, rng)},
                    [](Tape& t, std::vector<Node*>& p) {
                        Node* s = t.slice_rows(p[0], 1, 3);
                        return t.sum_all(t.sigmoid(s));
                    });
    check_gradients({random_mat(2, 3, rng), random_mat(4, 3, rng)},
                    [](Tape& t, std::vector<Node*>& p) {
                        Node* cat = t.concat_rows({p[0], p[1]});
                        return t.mean_all(t.tanh_(cat));
                    });
}

TEST_CASE("softmax_rows and log_softmax_rows gradients") {
    Rng rng(5);
    check_gradients({random_mat(4, 6, rng, 2.0)},
                    [](Tape& t, std::vector<Node*>& p) {
                        Node* s = t.softmax_rows(p[0]);
                        Mat w = Mat::Ones(4, 6);
                        w(0, 0) = 3.0;
                        w(2, 4) = -1.5;
                        return t.sum_all(t.cmul_mat(s, w));
                    });
    check_gradients({random_mat(3, 5, rng, 2.0)},
                    [](Tape& t, std::vector<Node*>& p) {
                        return ce_from_logits_rows(t, p[0], {1, 0, 4});
                    });
}

TEST_CASE("segment softmax and segment sum gradients") {
    Rng rng(6);
    std::vector<int> seg = {0, 0, 1, 1, 1, 2};
    check_gradients({random_mat(6, 1, rng, 2.0), random_mat(6, 3, rng)},
                    [&seg](Tape& t, std::vector<Node*>& p) {
                        Node* alpha = t.segment_softmax(p[0], seg, 3);
                        Node* weighted = t.mul(p[1], t.matmul(alpha, t.input(Mat::Ones(1, 3))));
                        Node* agg = t.segment_sum(weighted, seg, 3);
                        return t.mean_all(t.tanh_(agg));
                    });
}

TEST_CASE("segment softmax sums to one per segment") {
    Rng rng(7);
    Tape t;
    Mat scores = random_mat(7, 1, rng, 3.0);
    std::vector<int> seg = {0, 0, 0, 1, 1, 2, 2};
    Node* alpha = t.segment_softmax(t.input(scores), seg, 3);
    std::vector<double> sums(3, 0.0);
    for (long i = 0; i < 7; ++i) {
        CHECK(alpha->value(i, 0) >= 0.0);
        sums[static_cast<std::size_t>(seg[static_cast<std::size_t>(i)])] += alpha->value(i, 0);
    }
    for (double s : sums) CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("layer_norm gradient matches finite differences") {
    Rng rng(8);
    check_gradients(
        {random_mat(4, 6, rng), random_mat(1, 6, rng), random_mat(1, 6, rng)},
        [](Tape& t, std::vector<Node*>& p) {
            Node* y = t.layer_norm(p[0], p[1], p[2]);
            return t.mean_all(t.mul(y, y));
        },
        1e-6, 1e-5);
}

TEST_CASE("softplus-based BCE matches the naive formula and its gradient") {
    Rng rng(9);
    Mat logits = random_mat(5, 3, rng, 2.0);
    Mat targets(5, 3);
    for (long r = 0; r < 5; ++r)
        for (long c = 0; c < 3; ++c) targets(r, c) = (rng.uniform() < 0.5) ? 0.0 : 1.0;

    Tape t;
    Node* loss = bce_with_logits_mean(t, t.input(logits), targets);
    double naive = 0.0;
    for (long r = 0; r < 5; ++r) {
        for (long c = 0; c < 3; ++c) {
            double p = 1.0 / (1.0 + std::exp(-logits(r, c)));
            naive += -(targets(r, c) * std::log(p) + (1 - targets(r, c)) * std::log(1 - p));
        }
    }
    naive /= 15.0;
    CHECK(loss->value(0, 0) == doctest::Approx(naive).epsilon(1e-10));

    check_gradients({logits}, [&targets](Tape& tt, std::vector<Node*>& p) {
        return bce_with_logits_mean(tt, p[0], targets);
    });
}

TEST_CASE("reductions: sum, mean, row_sum, mean_over_rows") {
    Rng rng(10);
    check_gradients({random_mat(3, 4, rng)}, [](Tape& t, std::vector<Node*>& p) {
        Node* rs = t.row_sum(p[0]);
        return t.mean_all(t.mul(rs, rs));
    });
    check_gradients({random_mat(3, 4, rng)}, [](Tape& t, std::vector<Node*>& p) {
        Node* mr = t.mean_over_rows(p[0]);
        return t.sum_all(t.exp_(mr));
    });
}

TEST_CASE("dwa_select soft mode is differentiable everywhere") {
    Rng rng(11);
    check_gradients(
        {random_mat(2, 5, rng), random_mat(2, 5, rng), random_mat(2, 5, rng)},
        [](Tape& t, std::vector<Node*>& p) {
            Node* gate = t.sigmoid(p[2]);
            Node* out = t.dwa_select(p[0], p[1], gate, 0.2, /*hard=*/false);
            return t.mean_all(t.mul(out, out));
        });
}

TEST_CASE("dwa_select hard mode selects elementwise and has straight-through grads") {
    Rng rng(12);
    Mat cp = random_mat(3, 4, rng);
    Mat cc = random_mat(3, 4, rng);
    Mat gm_logits = random_mat(3, 4, rng);

    Tape t;
    Mat gcp = Mat::Zero(3, 4), gcc = Mat::Zero(3, 4), ggm = Mat::Zero(3, 4);
    Node* ncp = t.param(cp, gcp);
    Node* ncc = t.param(cc, gcc);
    Node* gate = t.sigmoid(t.param(gm_logits, ggm));
    Node* out = t.dwa_select(ncp, ncc, gate, 0.5, /*hard=*/true);
    for (long r = 0; r < 3; ++r) {
        for (long c = 0; c < 4; ++c) {
            bool is_cp = out->value(r, c) == cp(r, c);
            bool is_cc = out->value(r, c) == cc(r, c);
            CHECK((is_cp || is_cc));
            double g = gate->value(r, c);
            CHECK(out->value(r, c) == (g > 0.5 ? cp(r, c) : cc(r, c)));
        }
    }
    t.backward(t.sum_all(out));
    // Straight-through: gate logits receive (cp - cc) * sigmoid'.
    for (long r = 0; r < 3; ++r) {
        for (long c = 0; c < 4; ++c) {
            double s = 1.0 / (1.0 + std::exp(-gm_logits(r, c)));
            CHECK(ggm(r, c) ==
                  doctest::Approx((cp(r, c) - cc(r, c)) * s * (1 - s)).epsilon(1e-10));
        }
    }
}

TEST_CASE("backward rejects non-scalar roots") {
    Tape t;
    Node* x = t.input(Mat::Ones(2, 2));
    CHECK_THROWS_AS(t.backward(x), ShapeError);
}

TEST_CASE("parameter reused twice accumulates both contributions") {
    Rng rng(13);
    check_gradients({random_mat(3, 3, rng)}, [](Tape& t, std::vector<Node*>& p) {
        Node* a = t.matmul(p[0], p[0]); // same node twice
        return t.sum_all(a);
    });
}

TEST_CASE("adam optimizer converges on a quadratic") {
    ParamStore params;
    params.create(std::string("x"), 1, 1);
    params.value("x")(0, 0) = 5.0;
    AdamOptimizer opt(0.1);
    for (int step = 0; step < 500; ++step) {
        params.zero_grad();
        double x = params.value("x")(0, 0);
        params.grad("x")(0, 0) = 2.0 * (x - 3.0);
        opt.step(params);
    }
    CHECK(params.value("x")(0, 0) == doctest::Approx(3.0).epsilon(1e-3));
}
