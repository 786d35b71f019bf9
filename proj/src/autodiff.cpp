#include "mudi/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mudi/errors.hpp"

namespace mudi::ad {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

} // namespace

Node* Tape::make(Mat v, std::vector<Node*> parents, std::function<void(Node&)> bw) {
    nodes_.emplace_back();
    Node& n = nodes_.back();
    n.value = std::move(v);
    n.parents = std::move(parents);
    n.backward_fn = std::move(bw);
    for (Node* p : n.parents) {
        if (p->needs_grad) {
            n.needs_grad = true;
            break;
        }
    }
    return &n;
}

Node* Tape::input(Mat v) { return make(std::move(v), {}, nullptr); }

Node* Tape::param(const Mat& value, Mat& grad_sink) {
    Node* n = make(value, {}, nullptr);
    n->needs_grad = true;
    n->grad_sink = &grad_sink;
    return n;
}

Node* Tape::add(Node* a, Node* b) {
    require(a->value.rows() == b->value.rows() && a->value.cols() == b->value.cols(),
            "add: shape mismatch");
    return make(a->value + b->value, {a, b}, [a, b](Node& n) {
        if (a->needs_grad) { a->ensure_grad(); a->grad += n.grad; }
        if (b->needs_grad) { b->ensure_grad(); b->grad += n.grad; }
    });
}

Node* Tape::sub(Node* a, Node* b) {
    require(a->value.rows() == b->value.rows() && a->value.cols() == b->value.cols(),
            "sub: shape mismatch");
    return make(a->value - b->value, {a, b}, [a, b](Node& n) {
        if (a->needs_grad) { a->ensure_grad(); a->grad += n.grad; }
        if (b->needs_grad) { b->ensure_grad(); b->grad -= n.grad; }
    });
}

Node* Tape::neg(Node* a) {
    return make(-a->value, {a}, [a](Node& n) {
        if (a->needs_grad) { a->ensure_grad(); a->grad -= n.grad; }
    });
}

Node* Tape::mul(Node* a, Node* b) {
    require(a->value.rows() == b->value.rows() && a->value.cols() == b->value.cols(),
            "mul: shape mismatch");
    return make(a->value.cwiseProduct(b->value), {a, b}, [a, b](Node& n) {
        if (a->needs_grad) { a->ensure_grad(); a->grad += n.grad.cwiseProduct(b->value); }
        if (b->needs_grad) { b->ensure_grad(); b->grad += n.grad.cwiseProduct(a->value); }
    });
}

Node* Tape::cmul(Node* a, double s) {
    return make(a->value * s, {a}, [a, s](Node& n) {
        if (a->needs_grad) { a->ensure_grad(); a->grad += n.grad * s; }
    });
}

Node* Tape::cmul_mat(Node* a, const Mat& m) {
    require(a->value.rows() == m.rows() && a->value.cols() == m.cols(),
            "cmul_mat: shape mismatch");
    return make(a->value.cwiseProduct(m), {a}, [a, m](Node& n) {
        if (a->needs_grad) { a->ensure_grad(); a->grad += n.grad.cwiseProduct(m); }
    });
}

Node* Tape::cadd_mat(Node* a, const Mat& m) {
    require(a->value.rows() == m.rows() && a->value.cols() == m.cols(),
            "cadd_mat: shape mismatch");
    return make(a->value + m, {a}, [a](Node& n) {
        if (a->needs_grad) { a->ensure_grad(); a->grad += n.grad; }
    });
}

Node* Tape::add_rowvec(Node* a, Node* row) {
    require(row->value.rows() == 1 && row->value.cols() == a->value.cols(),
            "add_rowvec: row must be [1 x C]");
    Mat v = a->value.rowwise() + row->value.row(0);
    return make(std::move(v), {a, row}, [a, row](Node& n) {
        if (a->needs_grad) { a->ensure_grad(); a->grad += n.grad; }
        if (row->needs_grad) {
            row->ensure_grad();
            row->grad.row(0) += n.grad.colwise().sum();
        }
    });
}

Node* Tape::matmul(Node* a, Node* b) {
    require(a->value.cols() == b->value.rows(), "matmul: inner dims mismatch");
    return make(a->value * b->value, {a, b}, [a, b](Node& n) {
        if (a->needs_grad) { a->ensure_grad(); a->grad += n.grad * b->value.transpose(); }
        if (b->needs_grad) { b->ensure_grad(); b->grad += a->value.transpose() * n.grad; }
    });
}

Node* Tape::matmul_nt(Node* a, Node* b) {
    require(a->value.cols() == b->value.cols(), "matmul_nt: inner dims mismatch");
    return make(a->value * b->value.transpose(), {a, b}, [a, b](Node& n) {
        if (a->needs_grad) { a->ensure_grad(); a->grad += n.grad * b->value; }
        if (b->needs_grad) { b->ensure_grad(); b->grad += n.grad.transpose() * a->value; }
    });
}

Node* Tape::matmul_tn(Node* a, Node* b) {
    require(a->value.rows() == b->value.rows(), "matmul_tn: inner dims mismatch");
    return make(a->value.transpose() * b->value, {a, b}, [a, b](Node& n) {
        if (a->needs_grad) { a->ensure_grad(); a->grad += b->value * n.grad.transpose(); }
        if (b->needs_grad) { b->ensure_grad(); b->grad += a->value * n.grad; }
    });
}

Node* Tape::concat_cols(Node* a, Node* b) {
    require(a->value.rows() == b->value.rows(), "concat_cols: row mismatch");
    Mat v(a->value.rows(), a->value.cols() + b->value.cols());
    v << a->value, b->value;
    return make(std::move(v), {a, b}, [a, b](Node& n) {
        long ca = a->value.cols();
        if (a->needs_grad) { a->ensure_grad(); a->grad += n.grad.leftCols(ca); }
        if (b->needs_grad) { b->ensure_grad(); b->grad += n.grad.rightCols(b->value.cols()); }
    });
}

Node* Tape::concat_cols(const std::vector<Node*>& parts) {
    require(!parts.empty(), "concat_cols: empty list");
    Node* out = parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i) out = concat_cols(out, parts[i]);
    return out;
}

Node* Tape::concat_rows(const std::vector<Node*>& parts) {
    require(!parts.empty(), "concat_rows: empty list");
    long cols = parts[0]->value.cols();
    long rows = 0;
    for (Node* p : parts) {
        require(p->value.cols() == cols, "concat_rows: col mismatch");
        rows += p->value.rows();
    }
    Mat v(rows, cols);
    long r = 0;
    for (Node* p : parts) {
        v.middleRows(r, p->value.rows()) = p->value;
        r += p->value.rows();
    }
    std::vector<Node*> parents = parts;
    return make(std::move(v), parents, [parents](Node& n) {
        long r = 0;
        for (Node* p : parents) {
            if (p->needs_grad) {
                p->ensure_grad();
                p->grad += n.grad.middleRows(r, p->value.rows());
            }
            r += p->value.rows();
        }
    });
}

Node* Tape::slice_cols(Node* a, int c0, int ncols) {
    require(c0 >= 0 && c0 + ncols <= a->value.cols(), "slice_cols: out of range");
    return make(a->value.middleCols(c0, ncols), {a}, [a, c0, ncols](Node& n) {
        if (a->needs_grad) {
            a->ensure_grad();
            a->grad.middleCols(c0, ncols) += n.grad;
        }
    });
}

Node* Tape::slice_rows(Node* a, int r0, int nrows) {
    require(r0 >= 0 && r0 + nrows <= a->value.rows(), "slice_rows: out of range");
    return make(a->value.middleRows(r0, nrows), {a}, [a, r0, nrows](Node& n) {
        if (a->needs_grad) {
            a->ensure_grad();
            a->grad.middleRows(r0, nrows) += n.grad;
        }
    });
}

Node* Tape::gather_rows(Node* a, std::vector<int> idx) {
    Mat v(static_cast<long>(idx.size()), a->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        require(idx[i] >= 0 && idx[i] < a->value.rows(), "gather_rows: index out of range");
        v.row(static_cast<long>(i)) = a->value.row(idx[i]);
    }
    return make(std::move(v), {a}, [a, idx = std::move(idx)](Node& n) {
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i) {
            a->grad.row(idx[i]) += n.grad.row(static_cast<long>(i));
        }
    });
}

Node* Tape::gather_elems(Node* a, std::vector<std::pair<int, int>> coords) {
    Mat v(static_cast<long>(coords.size()), 1);
    for (std::size_t i = 0; i < coords.size(); ++i) {
        auto [r, c] = coords[i];
        require(r >= 0 && r < a->value.rows() && c >= 0 && c < a->value.cols(),
                "gather_elems: index out of range");
        v(static_cast<long>(i), 0) = a->value(r, c);
    }
    return make(std::move(v), {a}, [a, coords = std::move(coords)](Node& n) {
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (std::size_t i = 0; i < coords.size(); ++i) {
            a->grad(coords[i].first, coords[i].second) += n.grad(static_cast<long>(i), 0);
        }
    });
}

Node* Tape::leaky_relu(Node* a, double slope) {
    Mat v = a->value.unaryExpr([slope](double x) { return x > 0.0 ? x : slope * x; });
    return make(std::move(v), {a}, [a, slope](Node& n) {
        if (!a->needs_grad) return;
        a->ensure_grad();
        a->grad += n.grad.cwiseProduct(
            a->value.unaryExpr([slope](double x) { return x > 0.0 ? 1.0 : slope; }));
    });
}

Node* Tape::elu(Node* a) {
    Mat v = a->value.unaryExpr([](double x) { return x > 0.0 ? x : std::expm1(x); });
    return make(std::move(v), {a}, [a](Node& n) {
        if (!a->needs_grad) return;
        a->ensure_grad();
        a->grad += n.grad.cwiseProduct(
            a->value.unaryExpr([](double x) { return x > 0.0 ? 1.0 : std::exp(x); }));
    });
}

Node* Tape::relu(Node* a) { return leaky_relu(a, 0.0); }

Node* Tape::sigmoid(Node* a) {
    Mat v = a->value.unaryExpr([](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                        : std::exp(x) / (1.0 + std::exp(x));
    });
    return make(std::move(v), {a}, [a](Node& n) {
        if (!a->needs_grad) return;
        a->ensure_grad();
        a->grad += n.grad.cwiseProduct(
            n.value.cwiseProduct(Mat::Ones(n.value.rows(), n.value.cols()) - n.value));
    });
}

Node* Tape::tanh_(Node* a) {
    Mat v = a->value.unaryExpr([](double x) { return std::tanh(x); });
    return make(std::move(v), {a}, [a](Node& n) {
        if (!a->needs_grad) return;
        a->ensure_grad();
        a->grad += n.grad.cwiseProduct(
            Mat::Ones(n.value.rows(), n.value.cols()) - n.value.cwiseProduct(n.value));
    });
}

Node* Tape::softplus(Node* a) {
    Mat v = a->value.unaryExpr([](double x) {
        return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
    });
    return make(std::move(v), {a}, [a](Node& n) {
        if (!a->needs_grad) return;
        a->ensure_grad();
        a->grad += n.grad.cwiseProduct(a->value.unaryExpr([](double x) {
            return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                            : std::exp(x) / (1.0 + std::exp(x));
        }));
    });
}

Node* Tape::log_(Node* a) {
    Mat v = a->value.unaryExpr([](double x) { return std::log(x); });
    return make(std::move(v), {a}, [a](Node& n) {
        if (!a->needs_grad) return;
        a->ensure_grad();
        a->grad += n.grad.cwiseQuotient(a->value);
    });
}

Node* Tape::exp_(Node* a) {
    Mat v = a->value.unaryExpr([](double x) { return std::exp(x); });
    return make(std::move(v), {a}, [a](Node& n) {
        if (!a->needs_grad) return;
        a->ensure_grad();
        a->grad += n.grad.cwiseProduct(n.value);
    });
}

Node* Tape::sum_all(Node* a) {
    Mat v(1, 1);
    v(0, 0) = a->value.sum();
    return make(std::move(v), {a}, [a](Node& n) {
        if (!a->needs_grad) return;
        a->ensure_grad();
        a->grad.array() += n.grad(0, 0);
    });
}

Node* Tape::mean_all(Node* a) {
    double count = static_cast<double>(a->value.size());
    Mat v(1, 1);
    v(0, 0) = a->value.sum() / count;
    return make(std::move(v), {a}, [a, count](Node& n) {
        if (!a->needs_grad) return;
        a->ensure_grad();
        a->grad.array() += n.grad(0, 0) / count;
    });
}

Node* Tape::row_sum(Node* a) {
    Mat v = a->value.rowwise().sum();
    return make(std::move(v), {a}, [a](Node& n) {
        if (!a->needs_grad) return;
        a->ensure_grad();
        a->grad += n.grad * Mat::Ones(1, a->value.cols());
    });
}

Node* Tape::mean_over_rows(Node* a) {
    double rows = static_cast<double>(a->value.rows());
    Mat v = a->value.colwise().mean();
    return make(std::move(v), {a}, [a, rows](Node& n) {
        if (!a->needs_grad) return;
        a->ensure_grad();
        a->grad += Mat::Ones(a->value.rows(), 1) * (n.grad / rows);
    });
}

Node* Tape::softmax_rows(Node* a) {
    Mat v = a->value;
    for (long r = 0; r < v.rows(); ++r) {
        double mx = v.row(r).maxCoeff();
        v.row(r) = (v.row(r).array() - mx).exp();
        v.row(r) /= v.row(r).sum();
    }
    return make(std::move(v), {a}, [a](Node& n) {
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (long r = 0; r < n.value.rows(); ++r) {
            double dot = n.grad.row(r).cwiseProduct(n.value.row(r)).sum();
            a->grad.row(r) +=
                n.value.row(r).cwiseProduct((n.grad.row(r).array() - dot).matrix());
        }
    });
}

Node* Tape::log_softmax_rows(Node* a) {
    Mat v = a->value;
    for (long r = 0; r < v.rows(); ++r) {
        double mx = v.row(r).maxCoeff();
        double lse = std::log((v.row(r).array() - mx).exp().sum()) + mx;
        v.row(r).array() -= lse;
    }
    return make(std::move(v), {a}, [a](Node& n) {
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (long r = 0; r < n.value.rows(); ++r) {
            double gsum = n.grad.row(r).sum();
            a->grad.row(r) += n.grad.row(r) - gsum * n.value.row(r).array().exp().matrix();
        }
    });
}

Node* Tape::segment_softmax(Node* scores, std::vector<int> seg, int nseg) {
    require(scores->value.cols() == 1, "segment_softmax: scores must be [E x 1]");
    require(static_cast<long>(seg.size()) == scores->value.rows(),
            "segment_softmax: segment ids size mismatch");
    long e = scores->value.rows();
    std::vector<double> mx(static_cast<std::size_t>(nseg),
                           -std::numeric_limits<double>::infinity());
    for (long i = 0; i < e; ++i) {
        mx[static_cast<std::size_t>(seg[static_cast<std::size_t>(i)])] =
            std::max(mx[static_cast<std::size_t>(seg[static_cast<std::size_t>(i)])],
                     scores->value(i, 0));
    }
    Mat v(e, 1);
    std::vector<double> denom(static_cast<std::size_t>(nseg), 0.0);
    for (long i = 0; i < e; ++i) {
        int s = seg[static_cast<std::size_t>(i)];
        v(i, 0) = std::exp(scores->value(i, 0) - mx[static_cast<std::size_t>(s)]);
        denom[static_cast<std::size_t>(s)] += v(i, 0);
    }
    for (long i = 0; i < e; ++i) {
        v(i, 0) /= denom[static_cast<std::size_t>(seg[static_cast<std::size_t>(i)])];
    }
    return make(std::move(v), {scores},
                [scores, seg = std::move(seg), nseg](Node& n) {
        if (!scores->needs_grad) return;
        scores->ensure_grad();
        std::vector<double> dot(static_cast<std::size_t>(nseg), 0.0);
        long e = n.value.rows();
        for (long i = 0; i < e; ++i) {
            dot[static_cast<std::size_t>(seg[static_cast<std::size_t>(i)])] +=
                n.grad(i, 0) * n.value(i, 0);
        }
        for (long i = 0; i < e; ++i) {
            int s = seg[static_cast<std::size_t>(i)];
            scores->grad(i, 0) +=
                n.value(i, 0) * (n.grad(i, 0) - dot[static_cast<std::size_t>(s)]);
        }
    });
}

Node* Tape::segment_sum(Node* a, std::vector<int> seg, int nseg) {
    require(static_cast<long>(seg.size()) == a->value.rows(),
            "segment_sum: segment ids size mismatch");
    Mat v = Mat::Zero(nseg, a->value.cols());
    for (long i = 0; i < a->value.rows(); ++i) {
        v.row(seg[static_cast<std::size_t>(i)]) += a->value.row(i);
    }
    return make(std::move(v), {a}, [a, seg = std::move(seg)](Node& n) {
        if (!a->needs_grad) return;
        a->ensure_grad();
        for (long i = 0; i < a->value.rows(); ++i) {
            a->grad.row(i) += n.grad.row(seg[static_cast<std::size_t>(i)]);
        }
    });
}

Node* Tape::layer_norm(Node* a, Node* gain, Node* bias, double eps) {
    long cols = a->value.cols();
    require(gain->value.rows() == 1 && gain->value.cols() == cols,
            "layer_norm: gain must be [1 x C]");
    require(bias->value.rows() == 1 && bias->value.cols() == cols,
            "layer_norm: bias must be [1 x C]");
    long rows = a->value.rows();
    Mat xhat(rows, cols);
    Mat inv_sigma(rows, 1);
    for (long r = 0; r < rows; ++r) {
        double mu = a->value.row(r).mean();
        double var = (a->value.row(r).array() - mu).square().mean();
        double is = 1.0 / std::sqrt(var + eps);
        inv_sigma(r, 0) = is;
        xhat.row(r) = (a->value.row(r).array() - mu).matrix() * is;
    }
    Mat v(rows, cols);
    for (long r = 0; r < rows; ++r) {
        v.row(r) = xhat.row(r).cwiseProduct(gain->value.row(0)) + bias->value.row(0);
    }
    return make(std::move(v), {a, gain, bias},
                [a, gain, bias, xhat = std::move(xhat),
                 inv_sigma = std::move(inv_sigma)](Node& n) {
        long rows = n.value.rows();
        long cols = n.value.cols();
        if (gain->needs_grad) {
            gain->ensure_grad();
            for (long r = 0; r < rows; ++r) {
                gain->grad.row(0) += n.grad.row(r).cwiseProduct(xhat.row(r));
            }
        }
        if (bias->needs_grad) {
            bias->ensure_grad();
            bias->grad.row(0) += n.grad.colwise().sum();
        }
        if (a->needs_grad) {
            a->ensure_grad();
            for (long r = 0; r < rows; ++r) {
                Eigen::RowVectorXd w = n.grad.row(r).cwiseProduct(gain->value.row(0));
                double mean_w = w.mean();
                double mean_wx = w.cwiseProduct(xhat.row(r)).mean() ;
                for (long c = 0; c < cols; ++c) {
                    a->grad(r, c) +=
                        inv_sigma(r, 0) * (w(c) - mean_w - xhat(r, c) * mean_wx);
                }
            }
        }
    });
}

Node* Tape::dwa_select(Node* cp, Node* cc, Node* gm, double tau, bool hard) {
    require(cp->value.rows() == cc->value.rows() && cp->value.cols() == cc->value.cols(),
            "dwa_select: branch shape mismatch");
    require(gm->value.rows() == cp->value.rows() && gm->value.cols() == cp->value.cols(),
            "dwa_select: gate shape mismatch");
    if (!hard) {
        // Soft blend: gm .* cp + (1 - gm) .* cc, fully differentiable.
        Mat v = gm->value.cwiseProduct(cp->value) +
                (Mat::Ones(gm->value.rows(), gm->value.cols()) - gm->value)
                    .cwiseProduct(cc->value);
        return make(std::move(v), {cp, cc, gm}, [cp, cc, gm](Node& n) {
            Mat ones = Mat::Ones(n.value.rows(), n.value.cols());
            if (cp->needs_grad) { cp->ensure_grad(); cp->grad += n.grad.cwiseProduct(gm->value); }
            if (cc->needs_grad) {
                cc->ensure_grad();
                cc->grad += n.grad.cwiseProduct(ones - gm->value);
            }
            if (gm->needs_grad) {
                gm->ensure_grad();
                gm->grad += n.grad.cwiseProduct(cp->value - cc->value);
            }
        });
    }
    Mat b = gm->value.unaryExpr([tau](double x) { return x > tau ? 1.0 : 0.0; });
    Mat v = b.cwiseProduct(cp->value) +
            (Mat::Ones(b.rows(), b.cols()) - b).cwiseProduct(cc->value);
    return make(std::move(v), {cp, cc, gm}, [cp, cc, gm, b = std::move(b)](Node& n) {
        Mat ones = Mat::Ones(n.value.rows(), n.value.cols());
        if (cp->needs_grad) { cp->ensure_grad(); cp->grad += n.grad.cwiseProduct(b); }
        if (cc->needs_grad) { cc->ensure_grad(); cc->grad += n.grad.cwiseProduct(ones - b); }
        if (gm->needs_grad) {
            // Straight-through: d out / d gm treated as (cp - cc).
            gm->ensure_grad();
            gm->grad += n.grad.cwiseProduct(cp->value - cc->value);
        }
    });
}

void Tape::backward(Node* root) {
    if (root->value.rows() != 1 || root->value.cols() != 1) {
        throw ShapeError("backward: root must be a 1x1 scalar");
    }
    root->ensure_grad();
    root->grad(0, 0) = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& n = *it;
        if (!n.needs_grad) continue;
        if (n.grad.size() == 0) continue; // never reached from the root
        if (n.backward_fn) n.backward_fn(n);
        if (n.grad_sink != nullptr) {
            if (n.grad_sink->size() == 0) {
                *n.grad_sink = Mat::Zero(n.value.rows(), n.value.cols());
            }
            *n.grad_sink += n.grad;
        }
    }
}

// ---------------------------------------------------------------------------
// loss helpers
// ---------------------------------------------------------------------------

Node* bce_with_logits_mean(Tape& t, Node* logits, const Mat& targets,
                           const Mat* weights) {
    // softplus(z) - y .* z  ==  -[y log s(z) + (1-y) log(1 - s(z))]
    Node* sp = t.softplus(logits);
    Node* yz = t.cmul_mat(logits, targets);
    Node* elem = t.sub(sp, yz);
    if (weights != nullptr) elem = t.cmul_mat(elem, *weights);
    return t.mean_all(elem);
}

Node* ce_from_logits_rows(Tape& t, Node* logits, const std::vector<int>& target_cols) {
    if (static_cast<long>(target_cols.size()) != logits->value.rows()) {
        throw ShapeError("ce_from_logits_rows: one target per row required");
    }
    Node* ls = t.log_softmax_rows(logits);
    std::vector<std::pair<int, int>> coords;
    coords.reserve(target_cols.size());
    for (std::size_t r = 0; r < target_cols.size(); ++r) {
        coords.push_back({static_cast<int>(r), target_cols[r]});
    }
    Node* picked = t.gather_elems(ls, std::move(coords));
    return t.neg(t.mean_all(picked));
}

Node* mse_mean(Tape& t, Node* pred, const Mat& target) {
    Node* diff = t.cadd_mat(pred, -target);
    Node* sq = t.mul(diff, diff);
    return t.mean_all(sq);
}

void check_finite(const Mat& m, const std::string& context) {
    if (!m.allFinite()) {
        throw NumericError("non-finite value in " + context);
    }
}

} // namespace mudi::ad
