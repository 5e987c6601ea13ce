#include "cozinb/inference.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "cozinb/distributions.hpp"
#include "cozinb/error.hpp"
#include "cozinb/eval.hpp"
#include "cozinb/parallel.hpp"
#include "cozinb/special.hpp"

namespace cozinb {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

std::pair<double, double> pi_prior(const HyperParams& hp) {
    // Beta(alpha/K, alpha(1 - 1/K)); with K = 1 the second side would vanish.
    const double pa = hp.alpha / hp.K;
    const double pb = hp.K > 1 ? hp.alpha * (1.0 - 1.0 / hp.K) : hp.alpha;
    return {pa, pb};
}

void check_finite(double v, const std::string& what) {
    if (!std::isfinite(v)) throw NumericalError("non-finite " + what);
}

void check_finite(const Eigen::ArrayXd& v, const std::string& what) {
    for (Eigen::Index k = 0; k < v.size(); ++k) {
        if (!std::isfinite(v[k])) throw NumericalError("non-finite " + what + " at factor " + std::to_string(k));
    }
}

bool kernel_active(const InferenceOptions& opts) { return opts.kernel && opts.zero_inflation; }

double row_total(const SparseRow& row) {
    double n = 0.0;
    for (const Entry& en : row) n += en.count;
    return n;
}

Eigen::ArrayXd nbar_of(const SparseRow& row, const LocalState& s) { return s.expected_counts(row); }

Eigen::ArrayXd nu_with_usage(const Eigen::ArrayXd& nbar, const Eigen::ArrayXd& nu, const InferenceOptions& opts) {
    if (!opts.zero_inflation) return Eigen::ArrayXd::Ones(nu.size());
    return (nbar > kUsageThreshold).select(Eigen::ArrayXd::Ones(nu.size()), nu);
}

/// Expected CRT table count for `nbar` customers at concentration `s0`.
double expected_tables(double nbar, double s0, const InferenceOptions& opts) {
    if (opts.gradient_crt) {
        return nbar > 0.0 ? s0 * (special::digamma(s0 + nbar) - special::digamma(s0)) : 0.0;
    }
    return crt_mean(static_cast<std::uint64_t>(std::llround(nbar)), s0);
}

/// Number of gradient chunks; fixed by the batch size only so the summation
/// order never depends on the worker count.
std::size_t gradient_chunks(std::size_t n) { return std::min<std::size_t>(n, 8); }

}  // namespace

Eigen::ArrayXd effective_nu(const SparseRow& row, const LocalState& s, const InferenceOptions& opts) {
    return nu_with_usage(nbar_of(row, s), s.nu, opts);
}

LocalState init_local(const SparseRow& row, const GlobalState& g, const GlobalExpectations& e,
                      const HyperParams& hp, const InferenceOptions& opts) {
    const int K = g.K;
    LocalState s;
    s.psi = RowArray::Constant(static_cast<Eigen::Index>(row.size()), K, 1.0 / K);
    s.nu = Eigen::ArrayXd::Constant(K, opts.zero_inflation ? 0.5 : 1.0);
    s.s0 = (e.er * s.nu).max(kShapeFloor);
    s.L_tilde = Eigen::ArrayXd::Zero(K);
    const double N = row_total(row);
    s.a_tilde = hp.a0 + N;
    s.b_tilde = hp.b0 + (e.er * s.nu).sum();
    s.theta1 = s.s0 + N / K;
    s.theta2 = Eigen::ArrayXd::Constant(K, s.a_tilde / (s.a_tilde + s.b_tilde));
    s.h = Vector::Zero(g.encoder.spec.output_dim());
    s.kernel = Eigen::ArrayXd::Zero(K);
    s.initialized = true;
    return s;
}

void compute_kernel(const SparseRow& row, const GlobalState& g, const InferenceOptions& opts,
                    const Eigen::ArrayXd* noise, LocalState& s) {
    const int K = g.K;
    s.kernel = Eigen::ArrayXd::Zero(K);
    s.kernel_noise.resize(0);
    if (!kernel_active(opts)) {
        s.h = Vector::Zero(g.encoder.spec.output_dim());
        return;
    }
    s.h = encode(g.encoder, row);
    const bool sampled = opts.kernel_sampling && noise != nullptr;
    if (sampled) {
        if (noise->size() != K) throw ShapeError("compute_kernel: noise must have K entries");
        s.kernel_noise = *noise;
    }
    for (int k = 0; k < K; ++k) {
        const KernelOutput out = kernel_forward(g.decoder, s.h, g.l.row(k).transpose());
        double f = out.mean;
        if (sampled) f += std::exp(out.log_sigma) * (*noise)[k];
        check_finite(f, "kernel value f(h_j, l_" + std::to_string(k) + ")");
        s.kernel[k] = f;
    }
}

void local_psi_step(const SparseRow& row, const GlobalExpectations& e, LocalState& s) {
    const Eigen::Index K = s.theta1.size();
    Eigen::ArrayXd dig(K);
    for (Eigen::Index k = 0; k < K; ++k) dig[k] = special::digamma(s.theta1[k]);
    for (std::size_t i = 0; i < row.size(); ++i) {
        Eigen::ArrayXd logits = dig + e.elog_phi.row(row[i].col).transpose();
        const double mx = logits.maxCoeff();
        Eigen::ArrayXd w = (logits - mx).exp();
        s.psi.row(static_cast<Eigen::Index>(i)) = (w / w.sum()).transpose();
    }
}

void local_theta_step(const SparseRow& row, LocalState& s) { s.theta1 = s.s0 + nbar_of(row, s); }

void local_p_step(const SparseRow& row, const GlobalExpectations& e, const HyperParams& hp,
                  const InferenceOptions& opts, LocalState& s) {
    const Eigen::ArrayXd nu = effective_nu(row, s, opts);
    s.a_tilde = hp.a0 + row_total(row);
    s.b_tilde = hp.b0 + (e.er * nu).sum();
    s.theta2.setConstant(s.a_tilde / (s.a_tilde + s.b_tilde));
}

void local_nu_step(const SparseRow& row, const GlobalExpectations& e, const InferenceOptions& opts, LocalState& s) {
    if (!opts.zero_inflation) {
        s.nu.setOnes();
        return;
    }
    const Eigen::ArrayXd nbar = nbar_of(row, s);
    const double eln1p = special::digamma(s.b_tilde) - special::digamma(s.a_tilde + s.b_tilde);
    for (Eigen::Index k = 0; k < s.nu.size(); ++k) {
        if (nbar[k] > kUsageThreshold) {
            s.nu[k] = 1.0;
        } else {
            s.nu[k] = special::sigmoid(e.elogit_pi[k] + s.kernel[k] + e.er[k] * eln1p);
        }
    }
}

void local_crt_step(const SparseRow& row, const GlobalExpectations& e, const InferenceOptions& opts, LocalState& s) {
    const Eigen::ArrayXd nbar = nbar_of(row, s);
    const Eigen::ArrayXd nu = nu_with_usage(nbar, s.nu, opts);
    s.s0 = (e.er * nu).max(kShapeFloor);
    for (Eigen::Index k = 0; k < nbar.size(); ++k) s.L_tilde[k] = expected_tables(nbar[k], s.s0[k], opts);
}

namespace {

int run_sweeps(const SparseRow& row, const GlobalExpectations& e, const HyperParams& hp, const InferenceOptions& opts,
               const LocalSettings& settings, bool refresh_anchor, LocalState& s) {
    int sweeps = 0;
    for (; sweeps < settings.iters;) {
        const RowArray old_psi = s.psi;
        const Eigen::ArrayXd old_nu = s.nu;
        local_psi_step(row, e, s);
        local_theta_step(row, s);
        local_p_step(row, e, hp, opts, s);
        local_nu_step(row, e, opts, s);
        if (refresh_anchor) local_crt_step(row, e, opts, s);
        ++sweeps;
        double change = (s.nu - old_nu).abs().maxCoeff();
        if (s.psi.size() > 0) change = std::max(change, (s.psi - old_psi).abs().maxCoeff());
        if (change < settings.tol) break;
    }
    if (refresh_anchor) {
        local_theta_step(row, s);
        local_p_step(row, e, hp, opts, s);
    }
    return sweeps;
}

}  // namespace

int update_local(const SparseRow& row, const GlobalState& g, const GlobalExpectations& e, const HyperParams& hp,
                 const InferenceOptions& opts, const LocalSettings& settings, LocalState& s,
                 const Eigen::ArrayXd* noise) {
    const bool fresh = !s.initialized;
    if (fresh) s = init_local(row, g, e, hp, opts);
    if (static_cast<std::size_t>(s.psi.rows()) != row.size() || s.theta1.size() != g.K) {
        throw ShapeError("update_local: state does not match the row or the model");
    }
    compute_kernel(row, g, opts, noise, s);
    // Anchors move only outside the frozen mode (or when the state is new).
    const bool refresh_anchor = fresh || !opts.freeze_gradient;
    int sweeps = run_sweeps(row, e, hp, opts, settings, refresh_anchor, s);

    // Switch-off proposals, kept only when the local objective improves:
    // factors holding a sliver of psi mass go together, factors holding about
    // one token go one at a time. Without this a selector forced to 1 by a
    // sliver of mass cannot reach 0.
    if (opts.zero_inflation && opts.local_moves && !row.empty()) {
        const Eigen::ArrayXd nbar = nbar_of(row, s);
        std::vector<std::vector<int>> proposals(1);
        for (int k = 0; k < g.K; ++k) {
            if (nbar[k] <= kUsageThreshold && s.nu[k] < 0.5) continue;
            if (nbar[k] < 0.1) {
                proposals[0].push_back(k);
            } else if (nbar[k] < 1.5) {
                proposals.push_back({k});
            }
        }
        double current = local_objective(row, s, g, e, hp, opts);
        for (const std::vector<int>& ks : proposals) {
            if (ks.empty()) continue;
            LocalState prop = s;
            for (int k : ks) {
                prop.nu[k] = 0.0;
                prop.s0[k] = kShapeFloor;
                prop.L_tilde[k] = 0.0;
                prop.theta1[k] = kShapeFloor;
                prop.psi.col(k).setZero();
            }
            const Eigen::ArrayXd rest = prop.psi.rowwise().sum();
            // Only when every row keeps some mass elsewhere.
            if (!(rest > 0.0).all()) continue;
            for (Eigen::Index i = 0; i < prop.psi.rows(); ++i) prop.psi.row(i) /= rest[i];
            sweeps += run_sweeps(row, e, hp, opts, settings, refresh_anchor, prop);
            const double value = local_objective(row, prop, g, e, hp, opts);
            if (value > current) {
                s = std::move(prop);
                current = value;
            }
        }
    }
    check_finite(s.theta1, "theta1");
    check_finite(s.nu, "nu");
    check_finite(s.L_tilde, "L_tilde");
    check_finite(s.b_tilde, "b_tilde");
    return sweeps;
}

void global_phi_step(const Batch& batch, double rho, double scale, const HyperParams& hp, GlobalState& g) {
    RowArray target = RowArray::Zero(g.K, g.M);
    for (std::size_t b = 0; b < batch.index.size(); ++b) {
        const SparseRow& row = batch.counts->row(batch.index[b]);
        const LocalState& s = *batch.locals[b];
        for (std::size_t i = 0; i < row.size(); ++i) {
            target.col(row[i].col) += row[i].count * s.psi.row(static_cast<Eigen::Index>(i)).transpose();
        }
    }
    target = hp.eta0 + scale * target;
    g.eta = (1.0 - rho) * g.eta + rho * target;
}

void global_pi_step(const Batch& batch, double rho, double scale, const HyperParams& hp,
                    const InferenceOptions& opts, GlobalState& g) {
    if (!opts.zero_inflation) return;
    Eigen::ArrayXd sum_nu = Eigen::ArrayXd::Zero(g.K);
    for (std::size_t b = 0; b < batch.index.size(); ++b) {
        sum_nu += effective_nu(batch.counts->row(batch.index[b]), *batch.locals[b], opts);
    }
    const auto [pa, pb] = pi_prior(hp);
    const double Jt = static_cast<double>(batch.index.size());
    g.tau1 = (1.0 - rho) * g.tau1 + rho * (pa + scale * sum_nu);
    g.tau2 = (1.0 - rho) * g.tau2 + rho * (pb + scale * (Jt - sum_nu));
}

void global_r_step(const Batch& batch, double rho, double scale, const HyperParams& hp,
                   const InferenceOptions& opts, GlobalState& g) {
    Eigen::ArrayXd sum_L = Eigen::ArrayXd::Zero(g.K);
    Eigen::ArrayXd sum_nu_ln1p = Eigen::ArrayXd::Zero(g.K);
    for (std::size_t b = 0; b < batch.index.size(); ++b) {
        const SparseRow& row = batch.counts->row(batch.index[b]);
        const LocalState& s = *batch.locals[b];
        const double eln1p = special::digamma(s.b_tilde) - special::digamma(s.a_tilde + s.b_tilde);
        sum_L += s.L_tilde;
        sum_nu_ln1p += effective_nu(row, s, opts) * eln1p;
    }
    const Eigen::ArrayXd shape_target = g.gamma0 + scale * sum_L;
    const Eigen::ArrayXd rate_target = hp.alpha - scale * sum_nu_ln1p;
    g.r_shape = (1.0 - rho) * g.r_shape + rho * shape_target;
    const Eigen::ArrayXd rate = (1.0 - rho) / g.r_scale + rho * rate_target;
    g.r_scale = 1.0 / rate;
}

void update_global_closed(const Batch& batch, GlobalState& g, const HyperParams& hp, double rho, std::size_t J,
                          const InferenceOptions& opts) {
    if (!(rho > 0.0 && rho <= 1.0)) throw DomainError("update_global_closed: step size must lie in (0, 1]");
    if (batch.index.empty() || batch.locals.size() != batch.index.size() || batch.counts == nullptr) {
        throw ShapeError("update_global_closed: empty or inconsistent batch");
    }
    const double scale = static_cast<double>(J) / static_cast<double>(batch.index.size());
    global_phi_step(batch, rho, scale, hp, g);
    global_pi_step(batch, rho, scale, hp, opts, g);
    global_r_step(batch, rho, scale, hp, opts, g);
    g.validate();
}

Eigen::ArrayXd table_sums(const Batch& batch, std::size_t J) {
    if (batch.locals.empty()) throw ShapeError("table_sums: empty batch");
    Eigen::ArrayXd s = Eigen::ArrayXd::Zero(batch.locals.front()->L_tilde.size());
    for (const LocalState* ls : batch.locals) s += ls->L_tilde;
    return s * (static_cast<double>(J) / static_cast<double>(batch.locals.size()));
}

Eigen::ArrayXd crt_l_prime(const Eigen::ArrayXd& sums, double gamma0) {
    Eigen::ArrayXd lp(sums.size());
    for (Eigen::Index k = 0; k < sums.size(); ++k) {
        lp[k] = crt_mean(static_cast<std::uint64_t>(std::llround(sums[k])), gamma0);
    }
    return lp;
}

double gamma0_objective(double gamma0, const Eigen::ArrayXd& sums, const Eigen::ArrayXd& l_prime,
                        const GlobalExpectations& e, const HyperParams& hp) {
    double v = (hp.e0 - 1.0) * std::log(gamma0) - hp.f0 * gamma0 + hp.e0 * std::log(hp.f0) - special::lgamma(hp.e0);
    const double lg = special::lgamma(gamma0);
    for (Eigen::Index k = 0; k < sums.size(); ++k) {
        v += gamma0 * std::log(hp.alpha) - lg + (gamma0 - 1.0) * e.elnr[k] - hp.alpha * e.er[k];
        v += l_prime[k] * std::log(gamma0) + lg - special::lgamma(gamma0 + sums[k]);
    }
    return v;
}

double gamma0_log_gradient(double gamma0, const Eigen::ArrayXd& sums, const Eigen::ArrayXd& l_prime,
                           const GlobalExpectations& e, const HyperParams& hp) {
    double d = (hp.e0 - 1.0) / gamma0 - hp.f0;
    for (Eigen::Index k = 0; k < sums.size(); ++k) {
        // The -psi(gamma0) of the r prior cancels the +psi(gamma0) of the CRT term.
        d += std::log(hp.alpha) + e.elnr[k] + l_prime[k] / gamma0 - special::digamma(gamma0 + sums[k]);
    }
    return d * gamma0;
}

double kernel_objective(const Batch& batch, const GlobalState& g, const GlobalExpectations& e,
                        const HyperParams& hp, std::size_t J, const InferenceOptions& opts) {
    double total = -0.5 * g.l.squaredNorm() / hp.b;
    if (!kernel_active(opts)) return total;
    const double scale = static_cast<double>(J) / static_cast<double>(batch.index.size());
    for (std::size_t b = 0; b < batch.index.size(); ++b) {
        const SparseRow& row = batch.counts->row(batch.index[b]);
        const LocalState& s = *batch.locals[b];
        const Eigen::ArrayXd nu = effective_nu(row, s, opts);
        const Vector h = encode(g.encoder, row);
        double v = -0.5 * h.squaredNorm() / hp.a;
        for (int k = 0; k < g.K; ++k) {
            const KernelOutput out = kernel_forward(g.decoder, h, g.l.row(k).transpose());
            double f = out.mean;
            if (s.kernel_noise.size() == g.K) f += std::exp(out.log_sigma) * s.kernel_noise[k];
            const double x = e.elogit_pi[k] + f;
            v += -nu[k] * special::softplus(-x) - (1.0 - nu[k]) * special::softplus(x);
        }
        total += scale * v;
    }
    return total;
}

GradientSet compute_gradients(const Batch& batch, const GlobalState& g, const GlobalExpectations& e,
                              const HyperParams& hp, std::size_t J, const InferenceOptions& opts) {
    if (batch.index.empty() || batch.locals.size() != batch.index.size()) {
        throw ShapeError("compute_gradients: empty or inconsistent batch");
    }
    const double scale = static_cast<double>(J) / static_cast<double>(batch.index.size());
    GradientSet out;
    out.encoder = MlpGrads::zeros_like(g.encoder);
    out.decoder = MlpGrads::zeros_like(g.decoder);
    out.l = -g.l / hp.b;

    if (kernel_active(opts)) {
        const int d_h = g.encoder.spec.output_dim();
        const int d_l = static_cast<int>(g.l.cols());
        const std::size_t n = batch.index.size();
        const std::size_t chunks = gradient_chunks(n);
        std::vector<GradientSet> partial(chunks);
        parallel_for(chunks, opts.threads, [&](std::size_t c) {
            GradientSet& p = partial[c];
            p.encoder = MlpGrads::zeros_like(g.encoder);
            p.decoder = MlpGrads::zeros_like(g.decoder);
            p.l = Matrix::Zero(g.K, d_l);
            const std::size_t lo = c * n / chunks, hi = (c + 1) * n / chunks;
            MlpCache enc_cache, dec_cache;
            for (std::size_t b = lo; b < hi; ++b) {
                const SparseRow& row = batch.counts->row(batch.index[b]);
                const LocalState& s = *batch.locals[b];
                const Eigen::ArrayXd nu = effective_nu(row, s, opts);
                const bool sampled = s.kernel_noise.size() == g.K;
                const Vector h = encode(g.encoder, row, &enc_cache);
                Vector dh = -scale * h / hp.a;
                Vector upstream(2);
                for (int k = 0; k < g.K; ++k) {
                    const KernelOutput ko = kernel_forward(g.decoder, h, g.l.row(k).transpose(), &dec_cache);
                    const double sigma_eps = sampled ? std::exp(ko.log_sigma) * s.kernel_noise[k] : 0.0;
                    const double pi_hat = special::sigmoid(e.elogit_pi[k] + ko.mean + sigma_eps);
                    const double gf = scale * (nu[k] - pi_hat);
                    upstream << gf, gf * sigma_eps;
                    const Vector din = mlp_backward(g.decoder, dec_cache, upstream, p.decoder);
                    dh += din.head(d_h);
                    p.l.row(k) += din.tail(d_l).transpose();
                }
                mlp_backward(g.encoder, enc_cache, dh, p.encoder);
            }
        });
        for (const GradientSet& p : partial) {
            out.encoder += p.encoder;
            out.decoder += p.decoder;
            out.l += p.l;
        }
    }

    const Eigen::ArrayXd sums = table_sums(batch, J);
    out.log_gamma0 = gamma0_log_gradient(g.gamma0, sums, crt_l_prime(sums, g.gamma0), e, hp);
    return out;
}

void update_global_gradient(const Batch& batch, GlobalState& g, const HyperParams& hp, std::size_t J,
                            const InferenceOptions& opts) {
    const GlobalExpectations e = GlobalExpectations::compute(g);
    g.anchor_logit = e.elogit_pi;
    const GradientSet grads = compute_gradients(batch, g, e, hp, J, opts);
    if (!std::isfinite(grads.log_gamma0)) throw NumericalError("non-finite gradient for gamma0");
    if (!grads.l.allFinite()) throw NumericalError("non-finite gradient for locations l");
    if (!grads.encoder.all_finite() || !grads.decoder.all_finite()) {
        throw NumericalError("non-finite gradient for network weights");
    }
    if (kernel_active(opts)) {
        adam_step(g.adam_encoder, g.encoder, grads.encoder);
        adam_step(g.adam_decoder, g.decoder, grads.decoder);
    }
    Eigen::Map<Eigen::ArrayXd> l_flat(g.l.data(), g.l.size());
    const Eigen::Map<const Eigen::ArrayXd> gl_flat(grads.l.data(), grads.l.size());
    g.adam_l.ascend(l_flat, gl_flat);
    Eigen::ArrayXd lg(1);
    lg[0] = std::log(g.gamma0);
    Eigen::ArrayXd dg(1);
    dg[0] = grads.log_gamma0;
    g.adam_log_gamma0.ascend(lg, dg);
    g.gamma0 = std::exp(lg[0]);
    g.validate();
}

double global_objective(const GlobalState& g, const GlobalExpectations& e, const HyperParams& hp,
                        const InferenceOptions& opts, const Eigen::ArrayXd& sums) {
    double v = 0.0;
    const double M = g.M;
    const double dir_norm = special::lgamma(M * hp.eta0) - M * special::lgamma(hp.eta0);
    std::vector<double> eta_row(g.M);
    for (int k = 0; k < g.K; ++k) {
        v += dir_norm + (hp.eta0 - 1.0) * e.elog_phi.col(k).sum();
        for (int m = 0; m < g.M; ++m) eta_row[m] = g.eta(k, m);
        v += entropy_dirichlet(eta_row);
    }
    if (opts.zero_inflation) {
        const auto [pa, pb] = pi_prior(hp);
        const double beta_norm = special::lbeta(pa, pb);
        for (int k = 0; k < g.K; ++k) {
            v += -beta_norm + (pa - 1.0) * e.eln_pi[k] + (pb - 1.0) * e.eln1m_pi[k];
            v += entropy_beta(BetaParams(g.tau1[k], g.tau2[k]));
        }
    }
    for (int k = 0; k < g.K; ++k) v += entropy_gamma(GammaParams(g.r_shape[k], g.r_scale[k]));
    v += gamma0_objective(g.gamma0, sums, crt_l_prime(sums, g.gamma0), e, hp);
    v += -0.5 * g.l.squaredNorm() / hp.b - 0.5 * static_cast<double>(g.l.size()) * (kLog2Pi + std::log(hp.b));
    return v;
}

double local_objective(const SparseRow& row, const LocalState& s, const GlobalState& g,
                       const GlobalExpectations& e, const HyperParams& hp, const InferenceOptions& opts) {
    const int K = g.K;
    const Eigen::ArrayXd nbar = nbar_of(row, s);
    const Eigen::ArrayXd nu = nu_with_usage(nbar, s.nu, opts);
    Eigen::ArrayXd dig(K);
    for (int k = 0; k < K; ++k) dig[k] = special::digamma(s.theta1[k]);

    double v = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i) {
        double t = 0.0;
        for (int k = 0; k < K; ++k) {
            const double q = s.psi(static_cast<Eigen::Index>(i), k);
            if (q > 0.0) t += q * (dig[k] + e.elog_phi(row[i].col, k) - std::log(q));
        }
        v += row[i].count * t;
    }
    for (int k = 0; k < K; ++k) {
        v += (s.s0[k] - 1.0) * dig[k] - s.theta1[k] - special::lgamma(s.s0[k]) +
             entropy_gamma(GammaParams(s.theta1[k], 1.0));
        v += s.L_tilde[k] * (e.elnr[k] - std::log(s.s0[k]));
    }
    const auto [elnp, eln1p] = e_log_beta_sides(BetaParams(s.a_tilde, s.b_tilde));
    v += -special::lbeta(hp.a0, hp.b0) + (hp.a0 - 1.0) * elnp + (hp.b0 - 1.0) * eln1p;
    v += entropy_beta(BetaParams(s.a_tilde, s.b_tilde));
    v += row_total(row) * elnp + (nu * e.er).sum() * eln1p;
    if (opts.zero_inflation) {
        for (int k = 0; k < K; ++k) {
            const double f = s.kernel[k];
            const double m = g.anchor_logit[k];
            v += nu[k] * (e.eln_pi[k] + f) + (1.0 - nu[k]) * e.eln1m_pi[k];
            v -= special::softplus(m + f) - special::softplus(m);
            v += entropy_bernoulli(nu[k]);
        }
    }
    if (kernel_active(opts)) {
        v += -0.5 * s.h.squaredNorm() / hp.a - 0.5 * static_cast<double>(s.h.size()) * (kLog2Pi + std::log(hp.a));
    }
    return v;
}

double elbo(const Batch& batch, const GlobalState& g, const HyperParams& hp, std::size_t J,
            const InferenceOptions& opts) {
    if (batch.index.empty() || batch.locals.size() != batch.index.size()) {
        throw ShapeError("elbo: empty or inconsistent batch");
    }
    const GlobalExpectations e = GlobalExpectations::compute(g);
    const double scale = static_cast<double>(J) / static_cast<double>(batch.index.size());
    double local = 0.0;
    for (std::size_t b = 0; b < batch.index.size(); ++b) {
        const SparseRow& row = batch.counts->row(batch.index[b]);
        if (static_cast<std::size_t>(batch.locals[b]->psi.rows()) != row.size()) {
            throw ShapeError("elbo: local state does not match its row");
        }
        local += local_objective(row, *batch.locals[b], g, e, hp, opts);
    }
    return global_objective(g, e, hp, opts, table_sums(batch, J)) + scale * local;
}

int prune_factors(const CountMatrix& corpus, std::vector<LocalState>& locals, GlobalState& g,
                  const HyperParams& hp, const InferenceOptions& opts, double mass_threshold) {
    if (!opts.zero_inflation) return 0;
    const std::size_t J = corpus.rows();
    if (J == 0 || locals.size() != J) throw ShapeError("prune_factors: one local state per sample required");
    Batch full{&corpus, {}, {}};
    std::vector<Eigen::ArrayXd> nbar(J);
    Eigen::ArrayXd mass = Eigen::ArrayXd::Zero(g.K), usage = Eigen::ArrayXd::Zero(g.K);
    for (std::size_t j = 0; j < J; ++j) {
        full.index.push_back(j);
        full.locals.push_back(&locals[j]);
        nbar[j] = nbar_of(corpus.row(j), locals[j]);
        mass += nbar[j];
        usage += nu_with_usage(nbar[j], locals[j].nu, opts);
    }
    const auto [pa, pb] = pi_prior(hp);
    double base = elbo(full, g, hp, J, opts);
    int accepted = 0;
    for (int k = 0; k < g.K; ++k) {
        if (mass[k] >= mass_threshold || usage[k] < 1e-6 * static_cast<double>(J)) continue;
        const double t1 = g.tau1[k], t2 = g.tau2[k], rs = g.r_shape[k], rc = g.r_scale[k];
        std::vector<double> nu_old(J), b_old(J), th2_old(J);
        for (std::size_t j = 0; j < J; ++j) {
            nu_old[j] = locals[j].nu[k];
            b_old[j] = locals[j].b_tilde;
            th2_old[j] = locals[j].theta2[0];
            if (nbar[j][k] <= kUsageThreshold) locals[j].nu[k] = 0.0;
        }
        for (int round = 0; round < 5; ++round) {
            double sum_nu = 0.0, sum_L = 0.0, sum_nu_ln1p = 0.0;
            for (std::size_t j = 0; j < J; ++j) {
                const LocalState& s = locals[j];
                const double nu = nbar[j][k] > kUsageThreshold ? 1.0 : s.nu[k];
                const double eln1p = special::digamma(s.b_tilde) - special::digamma(s.a_tilde + s.b_tilde);
                sum_nu += nu;
                sum_L += s.L_tilde[k];
                sum_nu_ln1p += nu * eln1p;
            }
            g.tau1[k] = pa + sum_nu;
            g.tau2[k] = pb + (static_cast<double>(J) - sum_nu);
            g.r_shape[k] = g.gamma0 + sum_L;
            g.r_scale[k] = 1.0 / (hp.alpha - sum_nu_ln1p);
            const double er = g.r_shape[k] * g.r_scale[k];
            const double elogit = special::digamma(g.tau1[k]) - special::digamma(g.tau2[k]);
            for (std::size_t j = 0; j < J; ++j) {
                LocalState& s = locals[j];
                const Eigen::ArrayXd nu = nu_with_usage(nbar[j], s.nu, opts);
                double b = hp.b0;
                for (int q = 0; q < g.K; ++q) b += g.r_shape[q] * g.r_scale[q] * nu[q];
                s.b_tilde = b;
                s.theta2.setConstant(s.a_tilde / (s.a_tilde + s.b_tilde));
                if (nbar[j][k] <= kUsageThreshold) {
                    const double eln1p = special::digamma(s.b_tilde) - special::digamma(s.a_tilde + s.b_tilde);
                    s.nu[k] = special::sigmoid(elogit + s.kernel[k] + er * eln1p);
                }
            }
        }
        const double proposal = elbo(full, g, hp, J, opts);
        if (proposal > base) {
            base = proposal;
            ++accepted;
            continue;
        }
        g.tau1[k] = t1;
        g.tau2[k] = t2;
        g.r_shape[k] = rs;
        g.r_scale[k] = rc;
        for (std::size_t j = 0; j < J; ++j) {
            locals[j].nu[k] = nu_old[j];
            locals[j].b_tilde = b_old[j];
            locals[j].theta2.setConstant(th2_old[j]);
        }
    }
    return accepted;
}

namespace {

/// Full-batch closed-form sweeps (rho = 1) over the corpus with the anchors
/// held, so the objective cannot decrease.
void refine(const CountMatrix& corpus, std::vector<LocalState>& locals, GlobalState& g, const HyperParams& hp,
            InferenceOptions opts, const LocalSettings& settings, int sweeps) {
    opts.freeze_gradient = true;
    Batch full{&corpus, {}, {}};
    for (std::size_t j = 0; j < corpus.rows(); ++j) {
        full.index.push_back(j);
        full.locals.push_back(&locals[j]);
    }
    for (int s = 0; s < sweeps; ++s) {
        const GlobalExpectations e = GlobalExpectations::compute(g);
        parallel_for(corpus.rows(), opts.threads, [&](std::size_t j) {
            update_local(corpus.row(j), g, e, hp, opts, settings, locals[j]);
        });
        update_global_closed(full, g, hp, 1.0, corpus.rows(), opts);
    }
}

/// Removes factor k from one sample: no selector, table or psi mass.
void clear_factor(int k, int K, LocalState& s) {
    s.nu[k] = 0.0;
    s.s0[k] = kShapeFloor;
    s.L_tilde[k] = 0.0;
    s.theta1[k] = kShapeFloor;
    if (s.psi.rows() == 0) return;
    s.psi.col(k).setZero();
    for (Eigen::Index i = 0; i < s.psi.rows(); ++i) {
        const double t = s.psi.row(i).sum();
        if (t > 0.0) {
            s.psi.row(i) /= t;
        } else {
            s.psi.row(i).setConstant(1.0 / (K - 1));
            s.psi(i, k) = 0.0;
        }
    }
}

void set_pi_from_usage(int k, double usage, GlobalState& g, const HyperParams& hp, std::size_t J) {
    const auto [pa, pb] = pi_prior(hp);
    g.tau1[k] = pa + usage;
    g.tau2[k] = pb + static_cast<double>(J) - usage;
    g.anchor_logit[k] = special::digamma(g.tau1[k]) - special::digamma(g.tau2[k]);
}

/// Puts factor k in its switched-off state: q(pi_k) with no usage, q(r_k)
/// at its prior, q(phi_k) at its prior, and no selector or table mass.
void switch_off(int k, std::vector<LocalState>& locals, GlobalState& g, const HyperParams& hp, std::size_t J) {
    set_pi_from_usage(k, 0.0, g, hp, J);
    g.r_shape[k] = g.gamma0;
    g.r_scale[k] = 1.0 / hp.alpha;
    g.eta.row(k).setConstant(hp.eta0);
    for (LocalState& s : locals) clear_factor(k, g.K, s);
}

/// Keeps factor k only in samples holding at least half a token of it.
void sparsify(int k, const std::vector<Eigen::ArrayXd>& nbar, std::vector<LocalState>& locals, GlobalState& g,
              const HyperParams& hp) {
    double usage = 0.0;
    for (std::size_t j = 0; j < locals.size(); ++j) {
        if (nbar[j][k] < 0.5) {
            clear_factor(k, g.K, locals[j]);
        } else {
            usage += 1.0;
        }
    }
    set_pi_from_usage(k, usage, g, hp, locals.size());
}

}  // namespace

int delete_factors(const CountMatrix& corpus, std::vector<LocalState>& locals, GlobalState& g,
                   const HyperParams& hp, const InferenceOptions& opts, const LocalSettings& settings) {
    if (!opts.zero_inflation || g.K < 2) return 0;
    const std::size_t J = corpus.rows();
    if (J == 0 || locals.size() != J) throw ShapeError("delete_factors: one local state per sample required");
    Eigen::ArrayXd mass = Eigen::ArrayXd::Zero(g.K), usage = Eigen::ArrayXd::Zero(g.K),
                   holding = Eigen::ArrayXd::Zero(g.K);
    std::vector<Eigen::ArrayXd> nbar(J);
    for (std::size_t j = 0; j < J; ++j) {
        nbar[j] = locals[j].expected_counts(corpus.row(j));
        mass += nbar[j];
        usage += nu_with_usage(nbar[j], locals[j].nu, opts);
        holding += (nbar[j] >= 0.5).cast<double>();
    }
    struct Proposal {
        bool sparse;
        std::vector<int> factors;
    };
    // Proposals in order: every factor without tokens that still draws
    // selector mass, switched off together; every factor whose selectors are
    // on in many samples where it holds no token, restricted to the samples
    // using it; then single low-mass factors.
    std::vector<Proposal> proposals;
    std::vector<int> idle, loose, held;
    for (int k = 0; k < g.K; ++k) {
        if (mass[k] >= 1.0) {
            held.push_back(k);
            if (usage[k] - holding[k] > 0.25 * static_cast<double>(J)) loose.push_back(k);
        } else if (usage[k] >= 1e-3 * static_cast<double>(J)) {
            idle.push_back(k);
        }
    }
    if (!idle.empty()) proposals.push_back({false, idle});
    if (!loose.empty()) proposals.push_back({true, loose});
    std::stable_sort(held.begin(), held.end(), [&](int x, int y) { return mass[x] < mass[y]; });
    if (held.size() >= 2) {
        const std::size_t n = std::min<std::size_t>(held.size() - 1, static_cast<std::size_t>(opts.delete_candidates));
        for (std::size_t i = 0; i < n; ++i) proposals.push_back({false, {held[i]}});
    }

    auto objective = [&](const std::vector<LocalState>& ls, const GlobalState& gs) {
        Batch full{&corpus, {}, {}};
        for (std::size_t j = 0; j < J; ++j) {
            full.index.push_back(j);
            full.locals.push_back(&ls[j]);
        }
        return elbo(full, gs, hp, J, opts);
    };
    int accepted = 0;
    for (const Proposal& pr : proposals) {
        std::vector<LocalState> prop_locals = locals;
        GlobalState prop = g;
        for (int k : pr.factors) {
            if (pr.sparse) {
                sparsify(k, nbar, prop_locals, prop, hp);
            } else {
                switch_off(k, prop_locals, prop, hp, J);
            }
        }
        refine(corpus, prop_locals, prop, hp, opts, settings, opts.delete_sweeps);
        refine(corpus, locals, g, hp, opts, settings, opts.delete_sweeps);
        if (objective(prop_locals, prop) > objective(locals, g)) {
            locals = std::move(prop_locals);
            g = std::move(prop);
            if (!pr.sparse) accepted += static_cast<int>(pr.factors.size());
        }
    }
    return accepted;
}

std::vector<LocalState> infer_locals(const CountMatrix& counts, const GlobalState& g, const HyperParams& hp,
                                     const InferenceOptions& opts, const LocalSettings& settings) {
    if (static_cast<int>(counts.cols()) != g.M) {
        throw DataError("corpus has " + std::to_string(counts.cols()) + " features, model expects " +
                        std::to_string(g.M));
    }
    InferenceOptions o = opts;
    o.freeze_gradient = false;
    o.kernel_sampling = false;
    o.local_moves = true;
    const GlobalExpectations e = GlobalExpectations::compute(g);
    std::vector<LocalState> out(counts.rows());
    parallel_for(counts.rows(), o.threads,
                 [&](std::size_t j) { update_local(counts.row(j), g, e, hp, o, settings, out[j]); });
    return out;
}

FitResult fit(const CountMatrix& corpus, const FitSettings& st) {
    st.hp.validate();
    st.schedule.validate();
    const std::size_t J = corpus.rows();
    if (J == 0) throw DataError("cannot fit an empty corpus");
    if (corpus.cols() == 0) throw DataError("cannot fit a corpus with no features");

    InferenceOptions opts = st.opts;
    opts.threads = resolve_threads(opts.threads);
    if (st.cavi) opts.freeze_gradient = true;
    const LocalSettings local_settings{st.schedule.local_iters, st.schedule.local_tol};

    FitResult res;
    res.global = init_global(st.hp, static_cast<int>(corpus.cols()), st.seed, st.schedule.learning_rate);
    GlobalState& g = res.global;
    res.locals.assign(J, LocalState{});

    std::size_t Jt = J;
    if (!st.cavi && st.schedule.batch_size > 0) Jt = std::min<std::size_t>(J, st.schedule.batch_size);

    const Rng root(st.seed);
    const Rng order_root = root.split(10);
    const Rng noise_root = root.split(11);
    const auto start = std::chrono::steady_clock::now();

    std::vector<std::size_t> order(J);
    double best = std::numeric_limits<double>::quiet_NaN();
    int stalled = 0;
    Batch full{&corpus, {}, {}};
    full.index.resize(J);
    std::iota(full.index.begin(), full.index.end(), std::size_t{0});

    for (int epoch = 1; epoch <= st.schedule.max_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        if (Jt < J) {
            Rng r = order_root.split(static_cast<std::uint64_t>(epoch));
            shuffle(r, order);
        }
        for (std::size_t lo = 0; lo < J; lo += Jt) {
            const std::size_t hi = std::min(J, lo + Jt);
            Batch batch{&corpus, std::vector<std::size_t>(order.begin() + lo, order.begin() + hi), {}};
            const GlobalExpectations e = GlobalExpectations::compute(g);
            const std::uint64_t it = g.iteration + 1;
            parallel_for(batch.index.size(), opts.threads, [&](std::size_t b) {
                const std::size_t j = batch.index[b];
                Eigen::ArrayXd noise;
                const Eigen::ArrayXd* np = nullptr;
                if (opts.kernel_sampling) {
                    Rng r = noise_root.split(it).split(j);
                    noise.resize(g.K);
                    for (int k = 0; k < g.K; ++k) noise[k] = r.normal();
                    np = &noise;
                }
                update_local(corpus.row(j), g, e, st.hp, opts, local_settings, res.locals[j], np);
            });
            for (std::size_t j : batch.index) batch.locals.push_back(&res.locals[j]);
            g.iteration = it;
            const double rho = st.cavi ? 1.0 : st.schedule.rho(it);
            update_global_closed(batch, g, st.hp, rho, J, opts);
            if (!opts.freeze_gradient) update_global_gradient(batch, g, st.hp, J, opts);
        }

        if (opts.prune) prune_factors(corpus, res.locals, g, st.hp, opts);
        if (opts.delete_every > 0 && epoch % opts.delete_every == 0) {
            delete_factors(corpus, res.locals, g, st.hp, opts, local_settings);
        }
        full.locals.clear();
        for (std::size_t j = 0; j < J; ++j) full.locals.push_back(&res.locals[j]);
        TraceRow row;
        row.epoch = epoch;
        row.elbo = elbo(full, g, st.hp, J, opts);
        check_finite(row.elbo, "objective at epoch " + std::to_string(epoch));
        row.val_perplexity = std::numeric_limits<double>::quiet_NaN();
        if (st.validation) {
            row.val_perplexity = heldout_perplexity(*st.validation->observed, *st.validation->target, g, st.hp, opts,
                                                    local_settings);
        }
        row.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        res.trace.push_back(row);
        if (st.on_epoch) st.on_epoch(row);

        // Relative improvement of the validation perplexity (lower is better),
        // or of the objective when there is no validation set.
        const double metric = st.validation ? row.val_perplexity : -row.elbo;
        if (std::isnan(best)) {
            best = metric;
        } else {
            const double improvement = (best - metric) / std::max(std::abs(best), 1e-300);
            if (improvement < st.schedule.tolerance) {
                ++stalled;
            } else {
                stalled = 0;
            }
            best = std::min(best, metric);
            if (stalled >= st.schedule.patience) {
                res.converged = true;
                break;
            }
        }
    }
    return res;
}

}  // namespace cozinb
