#pragma once

#include <Eigen/Core>
#include <vector>

#include "sttpp/common.hpp"
#include "sttpp/rng.hpp"

namespace sttpp {

enum class OutputActivation { softplus, linear };

struct MlpSpec {
    int input_dim = 1;
    std::vector<int> hidden = {32, 32};
    int output_dim = 1;
    OutputActivation output = OutputActivation::linear;

    int num_layers() const { return static_cast<int>(hidden.size()) + 1; }

    // width of layer input/output, layer k in [0, num_layers)
    int in_dim(int k) const { return k == 0 ? input_dim : hidden[k - 1]; }
    int out_dim(int k) const {
        return k == static_cast<int>(hidden.size()) ? output_dim : hidden[k];
    }

    int num_params() const {
        int n = 0;
        for (int k = 0; k < num_layers(); ++k) n += out_dim(k) * (in_dim(k) + 1);
        return n;
    }

    void require_valid() const {
        if (input_dim < 1 || output_dim < 1) throw std::invalid_argument("mlp dims must be >= 1");
        for (int w : hidden)
            if (w < 1) throw std::invalid_argument("mlp widths must be >= 1");
    }

    bool operator==(const MlpSpec&) const = default;
};

// Batched activations saved during a traced forward pass; one entry per layer.
struct MlpTrace {
    Eigen::MatrixXd input;                // N x in
    std::vector<Eigen::MatrixXd> pre;     // Z_k, N x out_dim(k)
    std::vector<Eigen::MatrixXd> post;    // A_k after activation
};

// Fully connected network with softplus hidden activations and a softplus or
// linear output layer. Parameters are plain matrices; the flat layout used by
// the optimizer is [W_0 (row-major), b_0, W_1, b_1, ...].
class Mlp {
  public:
    MlpSpec spec;
    std::vector<Eigen::MatrixXd> W;  // out x in
    std::vector<Eigen::VectorXd> b;  // out

    Mlp() = default;

    explicit Mlp(const MlpSpec& s) : spec(s) {
        spec.require_valid();
        W.resize(spec.num_layers());
        b.resize(spec.num_layers());
        for (int k = 0; k < spec.num_layers(); ++k) {
            W[k] = Eigen::MatrixXd::Zero(spec.out_dim(k), spec.in_dim(k));
            b[k] = Eigen::VectorXd::Zero(spec.out_dim(k));
        }
    }

    // Glorot-uniform weights, zero biases; the draw order (layer, row, col)
    // is part of the determinism contract.
    static Mlp init(const MlpSpec& s, std::uint64_t seed) {
        Mlp m(s);
        Rng rng(seed);
        for (int k = 0; k < s.num_layers(); ++k) {
            const double bound = std::sqrt(6.0 / (s.in_dim(k) + s.out_dim(k)));
            for (int i = 0; i < m.W[k].rows(); ++i)
                for (int j = 0; j < m.W[k].cols(); ++j) m.W[k](i, j) = rng.uniform(-bound, bound);
        }
        return m;
    }

    int num_params() const { return spec.num_params(); }

    void get_params(double* out) const {
        for (int k = 0; k < spec.num_layers(); ++k) {
            for (int i = 0; i < W[k].rows(); ++i)
                for (int j = 0; j < W[k].cols(); ++j) *out++ = W[k](i, j);
            for (int i = 0; i < b[k].size(); ++i) *out++ = b[k](i);
        }
    }

    void set_params(const double* in) {
        for (int k = 0; k < spec.num_layers(); ++k) {
            for (int i = 0; i < W[k].rows(); ++i)
                for (int j = 0; j < W[k].cols(); ++j) W[k](i, j) = *in++;
            for (int i = 0; i < b[k].size(); ++i) b[k](i) = *in++;
        }
    }

    // Batched forward; rows of X are samples.
    Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& X) const {
        if (X.cols() != spec.input_dim)
            throw DimensionMismatch("mlp input has " + std::to_string(X.cols()) +
                                    " columns, spec wants " + std::to_string(spec.input_dim));
        Eigen::MatrixXd A = X;
        for (int k = 0; k < spec.num_layers(); ++k) {
            Eigen::MatrixXd Z = (A * W[k].transpose()).rowwise() + b[k].transpose();
            if (k + 1 < spec.num_layers() || spec.output == OutputActivation::softplus)
                A = Z.unaryExpr([](double z) { return softplus(z); });
            else
                A = std::move(Z);
        }
        return A;
    }

    // Forward keeping pre/post activations for a later backward pass.
    Eigen::MatrixXd forward_traced(const Eigen::MatrixXd& X, MlpTrace& trace) const {
        if (X.cols() != spec.input_dim)
            throw DimensionMismatch("mlp input dimension mismatch");
        trace.input = X;
        trace.pre.assign(spec.num_layers(), {});
        trace.post.assign(spec.num_layers(), {});
        const Eigen::MatrixXd* A = &trace.input;
        for (int k = 0; k < spec.num_layers(); ++k) {
            trace.pre[k].noalias() = (*A) * W[k].transpose();
            trace.pre[k].rowwise() += b[k].transpose();
            if (k + 1 < spec.num_layers() || spec.output == OutputActivation::softplus)
                trace.post[k] = trace.pre[k].unaryExpr([](double z) { return softplus(z); });
            else
                trace.post[k] = trace.pre[k];
            A = &trace.post[k];
        }
        return trace.post.back();
    }

    // Reverse pass. Accumulates (adds) parameter gradients into grad, laid
    // out as in get_params, and optionally returns d/dX.
    void backward_batch(const MlpTrace& trace, const Eigen::MatrixXd& dY, double* grad,
                        Eigen::MatrixXd* dX = nullptr) const {
        const int K = spec.num_layers();
        Eigen::MatrixXd G;
        if (spec.output == OutputActivation::softplus)
            G = dY.cwiseProduct(trace.pre[K - 1].unaryExpr([](double z) { return softplus_prime(z); }));
        else
            G = dY;
        // walk layers backwards, tracking the offset of each layer's slice
        std::vector<int> offset(K);
        int off = 0;
        for (int k = 0; k < K; ++k) {
            offset[k] = off;
            off += spec.out_dim(k) * (spec.in_dim(k) + 1);
        }
        for (int k = K - 1; k >= 0; --k) {
            const Eigen::MatrixXd& A_prev = (k == 0) ? trace.input : trace.post[k - 1];
            Eigen::MatrixXd dW = G.transpose() * A_prev;
            Eigen::VectorXd db = G.colwise().sum();
            double* g = grad + offset[k];
            for (int i = 0; i < dW.rows(); ++i)
                for (int j = 0; j < dW.cols(); ++j) *g++ += dW(i, j);
            for (int i = 0; i < db.size(); ++i) *g++ += db(i);
            if (k > 0) {
                Eigen::MatrixXd dA = G * W[k];
                G = dA.cwiseProduct(
                    trace.pre[k - 1].unaryExpr([](double z) { return softplus_prime(z); }));
            } else if (dX) {
                dX->noalias() = G * W[0];
            }
        }
    }

    // Single-sample convenience wrappers.
    Eigen::VectorXd forward(const Eigen::VectorXd& x) const {
        if (x.size() != spec.input_dim) throw DimensionMismatch("mlp input dimension mismatch");
        return forward_batch(x.transpose()).row(0);
    }

    double scalar(double x) const {
        Eigen::MatrixXd X(1, 1);
        X(0, 0) = x;
        return forward_batch(X)(0, 0);
    }

    double scalar2(double x, double y) const {
        Eigen::MatrixXd X(1, 2);
        X(0, 0) = x;
        X(0, 1) = y;
        return forward_batch(X)(0, 0);
    }

    // Exact reverse-mode gradient of upstream . f(x); returns the parameter
    // gradient (flat layout) and the gradient with respect to x.
    std::pair<Eigen::VectorXd, Eigen::VectorXd> gradient(const Eigen::VectorXd& x,
                                                         const Eigen::VectorXd& upstream) const {
        if (upstream.size() != spec.output_dim)
            throw DimensionMismatch("upstream dimension mismatch");
        MlpTrace trace;
        forward_traced(x.transpose(), trace);
        Eigen::VectorXd pgrad = Eigen::VectorXd::Zero(num_params());
        Eigen::MatrixXd dX(1, spec.input_dim);
        backward_batch(trace, upstream.transpose(), pgrad.data(), &dX);
        return {pgrad, dX.row(0)};
    }
};

}  // namespace sttpp
