#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mmcan/rng.hpp"

namespace mmcan {

// Shared storage behind Tensor handles. Gradients live next to the values and
// accumulate additively; they are zeroed explicitly, never implicitly.
struct TensorData {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;
    std::vector<double> grad;  // same length as values whenever requires_grad
    bool requires_grad = false;
};

namespace detail {
inline std::string shape_str(std::size_t r, std::size_t c) {
    return std::to_string(r) + "x" + std::to_string(c);
}
}  // namespace detail

// Lightweight handle with shared storage: copying a Tensor aliases its data,
// the way parameter tensors are shared between a model and its optimizer.
class Tensor {
public:
    Tensor() : node_(std::make_shared<TensorData>()) {}

    static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false) {
        return full(rows, cols, 0.0, requires_grad);
    }

    static Tensor full(std::size_t rows, std::size_t cols, double value, bool requires_grad = false) {
        Tensor t;
        t.node_->rows = rows;
        t.node_->cols = cols;
        t.node_->values.assign(rows * cols, value);
        t.set_requires_grad(requires_grad);
        return t;
    }

    static Tensor from_values(std::size_t rows, std::size_t cols, std::vector<double> values,
                              bool requires_grad = false) {
        if (values.size() != rows * cols) {
            throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                        " values do not fill shape " + detail::shape_str(rows, cols));
        }
        Tensor t;
        t.node_->rows = rows;
        t.node_->cols = cols;
        t.node_->values = std::move(values);
        t.set_requires_grad(requires_grad);
        return t;
    }

    static Tensor row(std::vector<double> values, bool requires_grad = false) {
        const std::size_t n = values.size();
        return from_values(1, n, std::move(values), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from_values(1, 1, {value}, requires_grad);
    }

    static Tensor identity(std::size_t n) {
        Tensor t = zeros(n, n);
        for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
        return t;
    }

    std::size_t rows() const { return node_->rows; }
    std::size_t cols() const { return node_->cols; }
    std::size_t size() const { return node_->values.size(); }

    double& at(std::size_t i, std::size_t j) { return node_->values[i * node_->cols + j]; }
    double at(std::size_t i, std::size_t j) const { return node_->values[i * node_->cols + j]; }

    std::vector<double>& values() { return node_->values; }
    const std::vector<double>& values() const { return node_->values; }

    // Scalar contents of a 1x1 tensor.
    double value() const {
        if (size() != 1) {
            throw std::invalid_argument("tensor: value() on non-scalar shape " +
                                        detail::shape_str(rows(), cols()));
        }
        return node_->values[0];
    }

    bool requires_grad() const { return node_->requires_grad; }

    void set_requires_grad(bool flag) {
        node_->requires_grad = flag;
        if (flag) {
            node_->grad.assign(node_->values.size(), 0.0);
        } else {
            node_->grad.clear();
        }
    }

    const std::vector<double>& grad() const {
        if (!node_->requires_grad) {
            throw std::logic_error("tensor: gradient requested on a tensor that does not require it");
        }
        return node_->grad;
    }

    double grad_at(std::size_t i, std::size_t j) const { return grad()[i * node_->cols + j]; }

    void zero_grad() {
        std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    // Values-only copy, detached from any gradient bookkeeping.
    Tensor detached_copy() const {
        return from_values(rows(), cols(), node_->values, false);
    }

    const std::shared_ptr<TensorData>& node() const { return node_; }
    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

private:
    std::shared_ptr<TensorData> node_;
};

// Ordered record of the primitive ops executed during a forward pass. Ops
// append themselves as they run, so the record is topologically ordered by
// construction; backward() replays it in exact reverse order.
class Tape {
public:
    Tape() { stack().push_back(this); }
    ~Tape() { stack().pop_back(); }

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current() { return stack().empty() ? nullptr : stack().back(); }

    void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

    std::size_t step_count() const { return steps_.size(); }

    void backward(const Tensor& loss) {
        if (loss.size() != 1) {
            throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                        detail::shape_str(loss.rows(), loss.cols()));
        }
        if (!loss.requires_grad()) {
            throw std::logic_error("backward: loss is detached from the tape");
        }
        if (used_) {
            throw std::logic_error("backward: tape already consumed; build a fresh tape");
        }
        used_ = true;
        loss.node()->grad[0] = 1.0;
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    }

private:
    static std::vector<Tape*>& stack() {
        static thread_local std::vector<Tape*> s;
        return s;
    }

    std::vector<std::function<void()>> steps_;
    bool used_ = false;
};

namespace detail {

inline bool tracing(std::initializer_list<const Tensor*> inputs) {
    if (Tape::current() == nullptr) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

// Marks `out` differentiable and hands the backward step to the active tape.
inline void record_step(Tensor& out, std::function<void()> step) {
    out.set_requires_grad(true);
    Tape::current()->record(std::move(step));
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: inner extents disagree, " +
                                    detail::shape_str(a.rows(), a.cols()) + " * " +
                                    detail::shape_str(b.rows(), b.cols()));
    }
    const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
    Tensor out = Tensor::zeros(r, c);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t m = 0; m < k; ++m) {
            const double av = a.at(i, m);
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < c; ++j) {
                out.at(i, j) += av * b.at(m, j);
            }
        }
    }
    if (detail::tracing({&a, &b})) {
        auto an = a.node();
        auto bn = b.node();
        auto on = out.node();
        detail::record_step(out, [an, bn, on, r, k, c] {
            if (an->requires_grad) {
                // dA = dOut * B^T
                for (std::size_t i = 0; i < r; ++i) {
                    for (std::size_t m = 0; m < k; ++m) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < c; ++j) {
                            acc += on->grad[i * c + j] * bn->values[m * c + j];
                        }
                        an->grad[i * k + m] += acc;
                    }
                }
            }
            if (bn->requires_grad) {
                // dB = A^T * dOut
                for (std::size_t m = 0; m < k; ++m) {
                    for (std::size_t j = 0; j < c; ++j) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < r; ++i) {
                            acc += an->values[i * k + m] * on->grad[i * c + j];
                        }
                        bn->grad[m * c + j] += acc;
                    }
                }
            }
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& x) {
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out = Tensor::zeros(c, r);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out.at(j, i) = x.at(i, j);
    }
    if (detail::tracing({&x})) {
        auto xn = x.node();
        auto on = out.node();
        detail::record_step(out, [xn, on, r, c] {
            if (!xn->requires_grad) return;
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    xn->grad[i * c + j] += on->grad[j * r + i];
                }
            }
        });
    }
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument("add: shape mismatch, " + detail::shape_str(a.rows(), a.cols()) +
                                    " vs " + detail::shape_str(b.rows(), b.cols()));
    }
    Tensor out = Tensor::zeros(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.values()[i] = a.values()[i] + b.values()[i];
    }
    if (detail::tracing({&a, &b})) {
        auto an = a.node();
        auto bn = b.node();
        auto on = out.node();
        detail::record_step(out, [an, bn, on] {
            const std::size_t n = on->grad.size();
            if (an->requires_grad) {
                for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                for (std::size_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i];
            }
        });
    }
    return out;
}

// x[r x c] + bias[1 x c], bias broadcast across rows.
inline Tensor add_rowvec(const Tensor& x, const Tensor& bias) {
    if (bias.rows() != 1 || bias.cols() != x.cols()) {
        throw std::invalid_argument("add_rowvec: bias shape " +
                                    detail::shape_str(bias.rows(), bias.cols()) +
                                    " does not broadcast over " +
                                    detail::shape_str(x.rows(), x.cols()));
    }
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out = Tensor::zeros(r, c);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) + bias.at(0, j);
    }
    if (detail::tracing({&x, &bias})) {
        auto xn = x.node();
        auto bn = bias.node();
        auto on = out.node();
        detail::record_step(out, [xn, bn, on, r, c] {
            if (xn->requires_grad) {
                for (std::size_t i = 0; i < r * c; ++i) xn->grad[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                for (std::size_t i = 0; i < r; ++i) {
                    for (std::size_t j = 0; j < c; ++j) bn->grad[j] += on->grad[i * c + j];
                }
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& x, double factor) {
    Tensor out = Tensor::zeros(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) out.values()[i] = x.values()[i] * factor;
    if (detail::tracing({&x})) {
        auto xn = x.node();
        auto on = out.node();
        detail::record_step(out, [xn, on, factor] {
            if (!xn->requires_grad) return;
            for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += factor * on->grad[i];
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument("mul: shape mismatch, " + detail::shape_str(a.rows(), a.cols()) +
                                    " vs " + detail::shape_str(b.rows(), b.cols()));
    }
    Tensor out = Tensor::zeros(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = a.values()[i] * b.values()[i];
    if (detail::tracing({&a, &b})) {
        auto an = a.node();
        auto bn = b.node();
        auto on = out.node();
        detail::record_step(out, [an, bn, on] {
            const std::size_t n = on->grad.size();
            if (an->requires_grad) {
                for (std::size_t i = 0; i < n; ++i) an->grad[i] += bn->values[i] * on->grad[i];
            }
            if (bn->requires_grad) {
                for (std::size_t i = 0; i < n; ++i) bn->grad[i] += an->values[i] * on->grad[i];
            }
        });
    }
    return out;
}

// Row i of x scaled by weights[0, i]; the per-row broadcast behind the
// matching gate, where one scalar multiplies a whole feature row.
inline Tensor scale_rows(const Tensor& x, const Tensor& row_weights) {
    if (row_weights.rows() != 1 || row_weights.cols() != x.rows()) {
        throw std::invalid_argument("scale_rows: weights shape " +
                                    detail::shape_str(row_weights.rows(), row_weights.cols()) +
                                    " does not match row count of " +
                                    detail::shape_str(x.rows(), x.cols()));
    }
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out = Tensor::zeros(r, c);
    for (std::size_t i = 0; i < r; ++i) {
        const double w = row_weights.at(0, i);
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) = w * x.at(i, j);
    }
    if (detail::tracing({&x, &row_weights})) {
        auto xn = x.node();
        auto wn = row_weights.node();
        auto on = out.node();
        detail::record_step(out, [xn, wn, on, r, c] {
            if (xn->requires_grad) {
                for (std::size_t i = 0; i < r; ++i) {
                    const double w = wn->values[i];
                    for (std::size_t j = 0; j < c; ++j) {
                        xn->grad[i * c + j] += w * on->grad[i * c + j];
                    }
                }
            }
            if (wn->requires_grad) {
                for (std::size_t i = 0; i < r; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        acc += xn->values[i * c + j] * on->grad[i * c + j];
                    }
                    wn->grad[i] += acc;
                }
            }
        });
    }
    return out;
}

// Concatenation along the last axis: all parts share the row count.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts given");
    const std::size_t r = parts.front().rows();
    std::size_t total = 0;
    for (const Tensor& part : parts) {
        if (part.rows() != r) {
            throw std::invalid_argument("concat_cols: row mismatch, " +
                                        detail::shape_str(part.rows(), part.cols()) + " vs " +
                                        std::to_string(r) + " rows expected");
        }
        total += part.cols();
    }
    Tensor out = Tensor::zeros(r, total);
    std::size_t offset = 0;
    for (const Tensor& part : parts) {
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < part.cols(); ++j) {
                out.at(i, offset + j) = part.at(i, j);
            }
        }
        offset += part.cols();
    }
    bool any_grad = false;
    for (const Tensor& part : parts) any_grad |= part.requires_grad();
    if (Tape::current() != nullptr && any_grad) {
        std::vector<std::shared_ptr<TensorData>> part_nodes;
        part_nodes.reserve(parts.size());
        for (const Tensor& part : parts) part_nodes.push_back(part.node());
        auto on = out.node();
        detail::record_step(out, [part_nodes, on, r, total] {
            std::size_t off = 0;
            for (const auto& pn : part_nodes) {
                const std::size_t pc = pn->cols;
                if (pn->requires_grad) {
                    for (std::size_t i = 0; i < r; ++i) {
                        for (std::size_t j = 0; j < pc; ++j) {
                            pn->grad[i * pc + j] += on->grad[i * total + off + j];
                        }
                    }
                }
                off += pc;
            }
        });
    }
    return out;
}

inline Tensor relu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out.values()[i] = x.values()[i] > 0.0 ? x.values()[i] : 0.0;
    }
    if (detail::tracing({&x})) {
        auto xn = x.node();
        auto on = out.node();
        detail::record_step(out, [xn, on] {
            if (!xn->requires_grad) return;
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                if (xn->values[i] > 0.0) xn->grad[i] += on->grad[i];
            }
        });
    }
    return out;
}

inline Tensor sigmoid(const Tensor& x) {
    Tensor out = Tensor::zeros(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x.values()[i];
        // Split by sign to avoid overflow in exp.
        out.values()[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                   : std::exp(v) / (1.0 + std::exp(v));
    }
    if (detail::tracing({&x})) {
        auto xn = x.node();
        auto on = out.node();
        detail::record_step(out, [xn, on] {
            if (!xn->requires_grad) return;
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                const double s = on->values[i];
                xn->grad[i] += s * (1.0 - s) * on->grad[i];
            }
        });
    }
    return out;
}

// Row-wise softmax, stabilized by subtracting the row maximum.
inline Tensor softmax_rows(const Tensor& x) {
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out = Tensor::zeros(r, c);
    for (std::size_t i = 0; i < r; ++i) {
        double row_max = x.at(i, 0);
        for (std::size_t j = 1; j < c; ++j) row_max = std::max(row_max, x.at(i, j));
        double denom = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double e = std::exp(x.at(i, j) - row_max);
            out.at(i, j) = e;
            denom += e;
        }
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) /= denom;
    }
    if (detail::tracing({&x})) {
        auto xn = x.node();
        auto on = out.node();
        detail::record_step(out, [xn, on, r, c] {
            if (!xn->requires_grad) return;
            for (std::size_t i = 0; i < r; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    dot += on->grad[i * c + j] * on->values[i * c + j];
                }
                for (std::size_t j = 0; j < c; ++j) {
                    xn->grad[i * c + j] += on->values[i * c + j] * (on->grad[i * c + j] - dot);
                }
            }
        });
    }
    return out;
}

// Per-row normalization to zero mean and unit variance, then gamma/beta.
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::size_t r = x.rows(), c = x.cols();
    if (gamma.rows() != 1 || gamma.cols() != c || beta.rows() != 1 || beta.cols() != c) {
        throw std::invalid_argument("layer_norm_rows: gamma/beta must be 1x" + std::to_string(c));
    }
    Tensor out = Tensor::zeros(r, c);
    std::vector<double> inv_sd(r), x_hat(r * c);
    for (std::size_t i = 0; i < r; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += x.at(i, j);
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double d = x.at(i, j) - mean;
            var += d * d;
        }
        var /= static_cast<double>(c);
        inv_sd[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) {
            const double h = (x.at(i, j) - mean) * inv_sd[i];
            x_hat[i * c + j] = h;
            out.at(i, j) = gamma.at(0, j) * h + beta.at(0, j);
        }
    }
    if (detail::tracing({&x, &gamma, &beta})) {
        auto xn = x.node();
        auto gn = gamma.node();
        auto bn = beta.node();
        auto on = out.node();
        detail::record_step(out, [xn, gn, bn, on, r, c, inv_sd = std::move(inv_sd),
                                  x_hat = std::move(x_hat)] {
            for (std::size_t i = 0; i < r; ++i) {
                double mean_dh = 0.0, mean_dh_h = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    const double g = on->grad[i * c + j];
                    const double h = x_hat[i * c + j];
                    if (gn->requires_grad) gn->grad[j] += g * h;
                    if (bn->requires_grad) bn->grad[j] += g;
                    const double dh = g * gn->values[j];
                    mean_dh += dh;
                    mean_dh_h += dh * h;
                }
                if (!xn->requires_grad) continue;
                mean_dh /= static_cast<double>(c);
                mean_dh_h /= static_cast<double>(c);
                for (std::size_t j = 0; j < c; ++j) {
                    const double dh = on->grad[i * c + j] * gn->values[j];
                    const double h = x_hat[i * c + j];
                    xn->grad[i * c + j] += inv_sd[i] * (dh - mean_dh - h * mean_dh_h);
                }
            }
        });
    }
    return out;
}

// Mean over rows: [r x c] -> [1 x c].
inline Tensor mean_rows(const Tensor& x) {
    const std::size_t r = x.rows(), c = x.cols();
    if (r == 0) throw std::invalid_argument("mean_rows: empty tensor");
    Tensor out = Tensor::zeros(1, c);
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) out.at(0, j) += x.at(i, j);
    }
    for (std::size_t j = 0; j < c; ++j) out.at(0, j) /= static_cast<double>(r);
    if (detail::tracing({&x})) {
        auto xn = x.node();
        auto on = out.node();
        detail::record_step(out, [xn, on, r, c] {
            if (!xn->requires_grad) return;
            const double inv = 1.0 / static_cast<double>(r);
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < c; ++j) xn->grad[i * c + j] += inv * on->grad[j];
            }
        });
    }
    return out;
}

inline Tensor sum_all(const Tensor& x) {
    Tensor out = Tensor::zeros(1, 1);
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    out.values()[0] = acc;
    if (detail::tracing({&x})) {
        auto xn = x.node();
        auto on = out.node();
        detail::record_step(out, [xn, on] {
            if (!xn->requires_grad) return;
            for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[0];
        });
    }
    return out;
}

// Gathers table rows by id: [vocab x d], ids[m] -> [m x d]. Gradients
// scatter-add back into the table rows, so repeated ids accumulate.
inline Tensor embed_rows(const Tensor& table, const std::vector<int>& ids) {
    const std::size_t d = table.cols();
    Tensor out = Tensor::zeros(ids.size(), d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const int id = ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= table.rows()) {
            throw std::out_of_range("embed_rows: id " + std::to_string(id) +
                                    " outside table of " + std::to_string(table.rows()) + " rows");
        }
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) = table.at(static_cast<std::size_t>(id), j);
    }
    if (detail::tracing({&table})) {
        auto tn = table.node();
        auto on = out.node();
        detail::record_step(out, [tn, on, ids, d] {
            if (!tn->requires_grad) return;
            for (std::size_t i = 0; i < ids.size(); ++i) {
                const std::size_t rowbase = static_cast<std::size_t>(ids[i]) * d;
                for (std::size_t j = 0; j < d; ++j) {
                    tn->grad[rowbase + j] += on->grad[i * d + j];
                }
            }
        });
    }
    return out;
}

// Dropout with an explicit 0/1 keep mask and inverted scaling. The masked
// form exists so gradients can be checked with the randomness held fixed.
inline Tensor dropout_masked(const Tensor& x, const std::vector<double>& keep_mask, double keep_prob) {
    if (keep_mask.size() != x.size()) {
        throw std::invalid_argument("dropout_masked: mask length " + std::to_string(keep_mask.size()) +
                                    " does not cover " + std::to_string(x.size()) + " elements");
    }
    if (keep_prob <= 0.0 || keep_prob > 1.0) {
        throw std::invalid_argument("dropout_masked: keep probability must be in (0, 1]");
    }
    const double inv_keep = 1.0 / keep_prob;
    Tensor out = Tensor::zeros(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out.values()[i] = x.values()[i] * keep_mask[i] * inv_keep;
    }
    if (detail::tracing({&x})) {
        auto xn = x.node();
        auto on = out.node();
        detail::record_step(out, [xn, on, keep_mask, inv_keep] {
            if (!xn->requires_grad) return;
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                xn->grad[i] += keep_mask[i] * inv_keep * on->grad[i];
            }
        });
    }
    return out;
}

// Train mode drops entries with probability `rate` and rescales the survivors
// by 1/(1-rate); eval mode is the identity.
inline Tensor dropout(const Tensor& x, double rate, bool train, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) {
        throw std::invalid_argument("dropout: rate must be in [0, 1)");
    }
    if (!train || rate == 0.0) return x;
    std::vector<double> keep_mask(x.size());
    for (double& m : keep_mask) m = rng.bernoulli(rate) ? 0.0 : 1.0;
    return dropout_masked(x, keep_mask, 1.0 - rate);
}

namespace detail {
constexpr double kProbClamp = 1e-12;
}

// Binary cross-entropy on a [1 x 2] probability vector; class 1 is "fake".
// Probabilities are clamped at 1e-12 inside the logs.
inline Tensor cross_entropy(const Tensor& probs, int label) {
    if (probs.rows() != 1 || probs.cols() != 2) {
        throw std::invalid_argument("cross_entropy: expected 1x2 probabilities, got " +
                                    detail::shape_str(probs.rows(), probs.cols()));
    }
    if (label != 0 && label != 1) {
        throw std::invalid_argument("cross_entropy: label must be 0 or 1, got " + std::to_string(label));
    }
    const double p1 = probs.at(0, 1);
    const double p_hit = std::max(p1, detail::kProbClamp);
    const double p_miss = std::max(1.0 - p1, detail::kProbClamp);
    Tensor out = Tensor::scalar(label == 1 ? -std::log(p_hit) : -std::log(p_miss));
    if (detail::tracing({&probs})) {
        auto pn = probs.node();
        auto on = out.node();
        detail::record_step(out, [pn, on, label, p1] {
            if (!pn->requires_grad) return;
            const double g = on->grad[0];
            if (label == 1) {
                if (p1 > detail::kProbClamp) pn->grad[1] += -g / p1;
            } else {
                if (1.0 - p1 > detail::kProbClamp) pn->grad[1] += g / (1.0 - p1);
            }
        });
    }
    return out;
}

// KL(p || q) over a pair of [1 x c] distributions, with 0*log(0) := 0 and q
// clamped at 1e-12. Gradient flows through both arguments unless
// grad_through_q is false, which treats q as a constant peer.
inline Tensor kl_divergence(const Tensor& p, const Tensor& q, bool grad_through_q = true) {
    if (p.rows() != 1 || q.rows() != 1 || p.cols() != q.cols()) {
        throw std::invalid_argument("kl_divergence: shape mismatch, " +
                                    detail::shape_str(p.rows(), p.cols()) + " vs " +
                                    detail::shape_str(q.rows(), q.cols()));
    }
    const std::size_t c = p.cols();
    double acc = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
        const double pv = p.at(0, j);
        if (pv <= 0.0) continue;
        const double qv = std::max(q.at(0, j), detail::kProbClamp);
        acc += pv * (std::log(std::max(pv, detail::kProbClamp)) - std::log(qv));
    }
    Tensor out = Tensor::scalar(acc);
    if (detail::tracing({&p, &q})) {
        auto pn = p.node();
        auto qn = q.node();
        auto on = out.node();
        detail::record_step(out, [pn, qn, on, c, grad_through_q] {
            const double g = on->grad[0];
            for (std::size_t j = 0; j < c; ++j) {
                const double pv = pn->values[j];
                const double qv = std::max(qn->values[j], detail::kProbClamp);
                if (pn->requires_grad && pv > detail::kProbClamp) {
                    pn->grad[j] += g * (std::log(pv / qv) + 1.0);
                }
                if (grad_through_q && qn->requires_grad && qn->values[j] > detail::kProbClamp) {
                    qn->grad[j] += -g * pv / qv;
                }
            }
        });
    }
    return out;
}

// Central-difference check of df/dx for a scalar-valued f. Returns the worst
// coordinate's |analytic - numeric| / max(1, |analytic|).
inline double grad_check(const std::function<Tensor()>& f, Tensor x, double step) {
    if (!x.requires_grad()) {
        throw std::invalid_argument("grad_check: x must require gradients");
    }
    x.zero_grad();
    std::vector<double> analytic;
    {
        Tape tape;
        Tensor loss = f();
        tape.backward(loss);
        analytic = x.node()->grad;
    }
    double max_rel = 0.0;
    std::vector<double>& vals = x.node()->values;
    for (std::size_t i = 0; i < vals.size(); ++i) {
        const double original = vals[i];
        vals[i] = original + step;
        const double up = f().value();
        vals[i] = original - step;
        const double down = f().value();
        vals[i] = original;
        const double numeric = (up - down) / (2.0 * step);
        const double rel = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

inline bool all_finite(const Tensor& x) {
    for (double v : x.values()) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

}  // namespace mmcan
