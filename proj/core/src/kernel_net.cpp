#include "cozinb/kernel_net.hpp"

#include <cmath>

#include "cozinb/error.hpp"

namespace cozinb {

Activation parse_activation(const std::string& name) {
    if (name == "tanh") return Activation::Tanh;
    if (name == "relu") return Activation::Relu;
    throw ConfigError("unknown activation '" + name + "' (expected tanh or relu)");
}

std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "relu"; }

MlpSpec MlpSpec::make(int input, const std::vector<int>& hidden, int output, Activation act) {
    MlpSpec s;
    s.widths.push_back(input);
    for (int h : hidden) s.widths.push_back(h);
    s.widths.push_back(output);
    s.activations.assign(hidden.size(), act);
    s.validate();
    return s;
}

void MlpSpec::validate() const {
    if (widths.size() < 2) throw ShapeError("MlpSpec: need at least one layer");
    for (int w : widths) {
        if (w < 1) throw ShapeError("MlpSpec: layer widths must be positive");
    }
    if (activations.size() != widths.size() - 2) throw ShapeError("MlpSpec: one activation per hidden layer");
}

MlpWeights MlpWeights::zeros(const MlpSpec& spec) {
    spec.validate();
    MlpWeights w;
    w.spec = spec;
    for (std::size_t l = 0; l < spec.num_layers(); ++l) {
        w.weight.push_back(Matrix::Zero(spec.widths[l + 1], spec.widths[l]));
        w.bias.push_back(Vector::Zero(spec.widths[l + 1]));
    }
    return w;
}

MlpWeights MlpWeights::init(const MlpSpec& spec, Rng& rng) {
    MlpWeights w = zeros(spec);
    for (std::size_t l = 0; l < spec.num_layers(); ++l) {
        const double scale = 1.0 / std::sqrt(static_cast<double>(spec.widths[l]));
        Matrix& W = w.weight[l];
        // Column-major fill order is part of the reproducibility contract.
        for (Eigen::Index c = 0; c < W.cols(); ++c)
            for (Eigen::Index r = 0; r < W.rows(); ++r) W(r, c) = scale * (2.0 * rng.uniform() - 1.0);
    }
    return w;
}

void MlpWeights::validate() const {
    spec.validate();
    if (weight.size() != spec.num_layers() || bias.size() != spec.num_layers()) {
        throw ShapeError("MlpWeights: layer count does not match its MlpSpec");
    }
    for (std::size_t l = 0; l < weight.size(); ++l) {
        if (weight[l].rows() != spec.widths[l + 1] || weight[l].cols() != spec.widths[l] ||
            bias[l].size() != spec.widths[l + 1]) {
            throw ShapeError("MlpWeights: layer " + std::to_string(l) + " shape mismatch");
        }
        if (!weight[l].allFinite() || !bias[l].allFinite()) throw NumericalError("MlpWeights: non-finite entry");
    }
}

std::size_t MlpWeights::parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weight.size(); ++l) n += weight[l].size() + bias[l].size();
    return n;
}

MlpGrads MlpGrads::zeros_like(const MlpWeights& w) {
    MlpGrads g;
    for (std::size_t l = 0; l < w.weight.size(); ++l) {
        g.weight.push_back(Matrix::Zero(w.weight[l].rows(), w.weight[l].cols()));
        g.bias.push_back(Vector::Zero(w.bias[l].size()));
    }
    return g;
}

void MlpGrads::set_zero() {
    for (auto& m : weight) m.setZero();
    for (auto& b : bias) b.setZero();
}

MlpGrads& MlpGrads::operator+=(const MlpGrads& other) {
    if (other.weight.size() != weight.size()) throw ShapeError("MlpGrads: layer count mismatch");
    for (std::size_t l = 0; l < weight.size(); ++l) {
        weight[l] += other.weight[l];
        bias[l] += other.bias[l];
    }
    return *this;
}

MlpGrads& MlpGrads::operator*=(double s) {
    for (auto& m : weight) m *= s;
    for (auto& b : bias) b *= s;
    return *this;
}

bool MlpGrads::all_finite() const {
    for (std::size_t l = 0; l < weight.size(); ++l) {
        if (!weight[l].allFinite() || !bias[l].allFinite()) return false;
    }
    return true;
}

namespace {

void activate(Activation a, const Vector& z, Vector& out) {
    if (a == Activation::Tanh) {
        out = z.array().tanh().matrix();
    } else {
        out = z.array().max(0.0).matrix();
    }
}

/// d act / dz evaluated from pre-activation z and output y.
Vector activation_slope(Activation a, const Vector& z, const Vector& y) {
    if (a == Activation::Tanh) return (1.0 - y.array().square()).matrix();
    return (z.array() > 0.0).cast<double>().matrix();
}

/// Layers 1.. after the first pre-activation has been formed.
Vector forward_from_first(const MlpWeights& w, Vector z, MlpCache* cache) {
    const std::size_t L = w.spec.num_layers();
    for (std::size_t l = 0; l < L; ++l) {
        if (l > 0) z = w.weight[l] * z + w.bias[l];
        if (cache) cache->pre.push_back(z);
        if (l + 1 == L) return z;
        Vector y;
        activate(w.spec.activations[l], z, y);
        if (cache) cache->inputs.push_back(y);
        z = std::move(y);
    }
    return z;
}

void begin_cache(const MlpWeights& w, MlpCache* cache) {
    if (!cache) return;
    cache->owner = &w;
    cache->generation = w.generation;
    cache->inputs.clear();
    cache->pre.clear();
    cache->sparse_input.clear();
    cache->sparse = false;
}

}  // namespace

Vector mlp_forward(const MlpWeights& w, const Vector& x, MlpCache* cache) {
    if (x.size() != w.spec.input_dim()) {
        throw ShapeError("mlp_forward: input has " + std::to_string(x.size()) + " entries, expected " +
                         std::to_string(w.spec.input_dim()));
    }
    begin_cache(w, cache);
    if (cache) cache->inputs.push_back(x);
    Vector z = w.weight[0] * x + w.bias[0];
    return forward_from_first(w, std::move(z), cache);
}

Vector encode(const MlpWeights& encoder, const SparseRow& row, MlpCache* cache) {
    const int M = encoder.spec.input_dim();
    begin_cache(encoder, cache);
    Vector z = encoder.bias[0];
    for (const Entry& e : row) {
        if (static_cast<int>(e.col) >= M) {
            throw ShapeError("encode: column " + std::to_string(e.col) + " outside encoder input width " +
                             std::to_string(M));
        }
        z.noalias() += encode_input(e.count) * encoder.weight[0].col(e.col);
    }
    if (cache) {
        cache->sparse = true;
        cache->sparse_input = row;
        cache->inputs.emplace_back();  // placeholder for the dense input slot
    }
    return forward_from_first(encoder, std::move(z), cache);
}

Vector dense_input(const SparseRow& row, int dim) {
    Vector x = Vector::Zero(dim);
    for (const Entry& e : row) {
        if (static_cast<int>(e.col) >= dim) throw ShapeError("dense_input: column outside input width");
        x[e.col] = encode_input(e.count);
    }
    return x;
}

KernelOutput kernel_forward(const MlpWeights& decoder, const Vector& h, const Vector& l, MlpCache* cache) {
    if (h.size() + l.size() != decoder.spec.input_dim()) {
        throw ShapeError("kernel_forward: dim(h) + dim(l) = " + std::to_string(h.size() + l.size()) +
                         ", decoder expects " + std::to_string(decoder.spec.input_dim()));
    }
    if (decoder.spec.output_dim() != 2) throw ShapeError("kernel_forward: decoder must have two output heads");
    Vector x(h.size() + l.size());
    x << h, l;
    Vector out = mlp_forward(decoder, x, cache);
    return KernelOutput{out[0], out[1]};
}

Vector mlp_backward(const MlpWeights& w, const MlpCache& cache, const Vector& upstream, MlpGrads& grads) {
    const std::size_t L = w.spec.num_layers();
    if (cache.owner != &w || cache.generation != w.generation || cache.pre.size() != L ||
        cache.inputs.size() != L) {
        throw std::logic_error("mlp_backward: missing or stale forward cache");
    }
    if (upstream.size() != w.spec.output_dim()) throw ShapeError("mlp_backward: upstream gradient size mismatch");
    if (grads.weight.size() != L) throw ShapeError("mlp_backward: gradient buffer has wrong layer count");

    Vector delta = upstream;  // d objective / d pre-activation of layer l
    for (std::size_t l = L; l-- > 0;) {
        grads.bias[l] += delta;
        if (l == 0 && cache.sparse) {
            for (const Entry& e : cache.sparse_input) grads.weight[0].col(e.col) += encode_input(e.count) * delta;
            return Vector();
        }
        grads.weight[l].noalias() += delta * cache.inputs[l].transpose();
        Vector back = w.weight[l].transpose() * delta;
        if (l == 0) return back;
        delta = back.cwiseProduct(activation_slope(w.spec.activations[l - 1], cache.pre[l - 1], cache.inputs[l]));
    }
    return Vector();
}

AdamState AdamState::for_weights(const MlpWeights& w, AdamConfig config) {
    AdamState s;
    s.config = config;
    for (std::size_t l = 0; l < w.weight.size(); ++l) {
        s.m_weight.push_back(Matrix::Zero(w.weight[l].rows(), w.weight[l].cols()));
        s.v_weight.push_back(Matrix::Zero(w.weight[l].rows(), w.weight[l].cols()));
        s.m_bias.push_back(Vector::Zero(w.bias[l].size()));
        s.v_bias.push_back(Vector::Zero(w.bias[l].size()));
    }
    return s;
}

namespace {

template <typename P, typename G, typename S>
void adam_block(const AdamConfig& c, double corr1, double corr2, P& param, const G& grad, S& m, S& v) {
    m.array() = c.beta1 * m.array() + (1.0 - c.beta1) * grad.array();
    v.array() = c.beta2 * v.array() + (1.0 - c.beta2) * grad.array().square();
    param.array() += c.lr * (m.array() / corr1) / ((v.array() / corr2).sqrt() + c.eps);
}

}  // namespace

void adam_step(AdamState& state, MlpWeights& w, const MlpGrads& grads) {
    const std::size_t L = w.weight.size();
    if (grads.weight.size() != L || state.m_weight.size() != L) throw ShapeError("adam_step: layer count mismatch");
    for (std::size_t l = 0; l < L; ++l) {
        if (grads.weight[l].rows() != w.weight[l].rows() || grads.weight[l].cols() != w.weight[l].cols() ||
            grads.bias[l].size() != w.bias[l].size() || state.m_weight[l].rows() != w.weight[l].rows() ||
            state.m_weight[l].cols() != w.weight[l].cols()) {
            throw ShapeError("adam_step: shape mismatch in layer " + std::to_string(l));
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double corr1 = 1.0 - std::pow(state.config.beta1, t);
    const double corr2 = 1.0 - std::pow(state.config.beta2, t);
    for (std::size_t l = 0; l < L; ++l) {
        adam_block(state.config, corr1, corr2, w.weight[l], grads.weight[l], state.m_weight[l], state.v_weight[l]);
        adam_block(state.config, corr1, corr2, w.bias[l], grads.bias[l], state.m_bias[l], state.v_bias[l]);
    }
    ++w.generation;
}

AdamVector::AdamVector(Eigen::Index n, AdamConfig c) : config(c), m(Eigen::ArrayXd::Zero(n)), v(Eigen::ArrayXd::Zero(n)) {}

void AdamVector::ascend(Eigen::Ref<Eigen::ArrayXd> param, const Eigen::ArrayXd& grad) {
    if (param.size() != m.size() || grad.size() != m.size()) throw ShapeError("AdamVector: size mismatch");
    ++step;
    const double t = static_cast<double>(step);
    const double corr1 = 1.0 - std::pow(config.beta1, t);
    const double corr2 = 1.0 - std::pow(config.beta2, t);
    m = config.beta1 * m + (1.0 - config.beta1) * grad;
    v = config.beta2 * v + (1.0 - config.beta2) * grad.square();
    param += config.lr * (m / corr1) / ((v / corr2).sqrt() + config.eps);
}

}  // namespace cozinb
