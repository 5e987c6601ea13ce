#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cozinb/data.hpp"
#include "cozinb/rng.hpp"

namespace cozinb {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class Activation { Tanh, Relu };

Activation parse_activation(const std::string& name);
std::string to_string(Activation a);

/// Layer widths including input and output; hidden layers use
/// `activations[i]`, the output layer is linear.
struct MlpSpec {
    std::vector<int> widths;
    std::vector<Activation> activations;

    static MlpSpec make(int input, const std::vector<int>& hidden, int output, Activation act = Activation::Tanh);
    void validate() const;
    int input_dim() const { return widths.front(); }
    int output_dim() const { return widths.back(); }
    std::size_t num_layers() const { return widths.size() - 1; }
};

struct MlpWeights {
    MlpSpec spec;
    std::vector<Matrix> weight;  // layer l: widths[l+1] x widths[l]
    std::vector<Vector> bias;
    /// Bumped on every in-place update so stale forward caches are detectable.
    std::uint64_t generation = 0;

    /// Centered uniform init with half-width 1/sqrt(fan_in); zero biases.
    static MlpWeights init(const MlpSpec& spec, Rng& rng);
    static MlpWeights zeros(const MlpSpec& spec);
    void validate() const;
    std::size_t parameter_count() const;
};

/// Gradients with the same shapes as MlpWeights.
struct MlpGrads {
    std::vector<Matrix> weight;
    std::vector<Vector> bias;

    static MlpGrads zeros_like(const MlpWeights& w);
    void set_zero();
    MlpGrads& operator+=(const MlpGrads& other);
    MlpGrads& operator*=(double s);
    bool all_finite() const;
};

/// Activations retained by a forward pass for the matching backward pass.
struct MlpCache {
    const MlpWeights* owner = nullptr;
    std::uint64_t generation = 0;
    /// Layer inputs: inputs[0] is the network input (dense), inputs[l] the
    /// post-activation of hidden layer l.
    std::vector<Vector> inputs;
    std::vector<Vector> pre;  // pre-activations per layer
    /// Sparse first-layer input when the pass came from a count row.
    SparseRow sparse_input;
    bool sparse = false;
};

/// Dense forward pass.
Vector mlp_forward(const MlpWeights& w, const Vector& x, MlpCache* cache = nullptr);

/// Encoder input transform applied to each count.
inline double encode_input(std::uint32_t count) { return std::log1p(static_cast<double>(count)); }

/// h = g(x): forward pass on a sparse count row. Only nonzero columns enter
/// the first layer.
Vector encode(const MlpWeights& encoder, const SparseRow& row, MlpCache* cache = nullptr);
/// Dense equivalent of `encode`, used as a reference path.
Vector dense_input(const SparseRow& row, int dim);

struct KernelOutput {
    double mean;       // u_f
    double log_sigma;  // ln sigma_f
};

/// Decoder on concat(h, l); head 0 is u_f, head 1 is ln sigma_f.
KernelOutput kernel_forward(const MlpWeights& decoder, const Vector& h, const Vector& l, MlpCache* cache = nullptr);

/// Reverse pass. Adds weight gradients into `grads` and returns the gradient
/// with respect to the dense network input (empty for sparse-input passes).
Vector mlp_backward(const MlpWeights& w, const MlpCache& cache, const Vector& upstream, MlpGrads& grads);

/// Adam hyperparameters and moments for an MLP.
struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    AdamConfig config;
    std::uint64_t step = 0;
    std::vector<Matrix> m_weight, v_weight;
    std::vector<Vector> m_bias, v_bias;

    static AdamState for_weights(const MlpWeights& w, AdamConfig config = {});
};

/// Bias-corrected Adam ascent step (the objective is maximised).
void adam_step(AdamState& state, MlpWeights& w, const MlpGrads& grads);

/// Adam over a flat parameter block (locations, log gamma0).
struct AdamVector {
    AdamConfig config;
    std::uint64_t step = 0;
    Eigen::ArrayXd m, v;

    explicit AdamVector(Eigen::Index n = 0, AdamConfig config = {});
    void ascend(Eigen::Ref<Eigen::ArrayXd> param, const Eigen::ArrayXd& grad);
};

}  // namespace cozinb
