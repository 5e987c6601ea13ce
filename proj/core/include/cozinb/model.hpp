#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "cozinb/kernel_net.hpp"

namespace cozinb {

using RowArray = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Fixed scalars of the model.
struct HyperParams {
    double a = 1.0;  // prior variance of h_j
    double b = 1.0;  // prior variance of l_k
    double alpha = 1.0;
    double eta0 = 0.2;
    double a0 = 0.001;
    double b0 = 0.001;
    double e0 = 0.001;
    double f0 = 0.001;
    int K = 100;
    int d_h = 20;
    int d_l = 20;
    std::vector<int> encoder_hidden{1000, 1000, 1000};
    std::vector<int> decoder_hidden{80, 80, 80};
    Activation activation = Activation::Tanh;

    void validate() const;
};

/// Minibatch and step-size schedule. rho_t = (t + tau0)^-kappa.
struct Schedule {
    int batch_size = 0;  // 0 means full batch
    double tau0 = 1.0;
    double kappa = 0.7;
    int max_epochs = 100;
    double tolerance = 1e-4;  // relative improvement of the validation metric
    int patience = 5;
    double learning_rate = 1e-3;
    int local_iters = 15;
    double local_tol = 1e-6;

    void validate() const;
    double rho(std::uint64_t t) const;
};

/// Variational parameters shared by all samples.
struct GlobalState {
    int K = 0;
    int M = 0;
    RowArray eta;               // K x M Dirichlet parameters of q(phi_k)
    Eigen::ArrayXd tau1, tau2;  // Beta q(pi_k)
    Eigen::ArrayXd r_shape, r_scale;
    double gamma0 = 1.0;
    Matrix l;  // K x d_l locations
    MlpWeights encoder, decoder;
    AdamState adam_encoder, adam_decoder;
    AdamVector adam_l, adam_log_gamma0;
    /// Logit at which the kernel normaliser is linearised, per factor.
    Eigen::ArrayXd anchor_logit;
    std::uint64_t iteration = 0;

    /// Throws NumericalError when a positivity / finiteness invariant fails.
    void validate() const;
};

/// Seeded initialisation: eta = eta0 + U(0, 0.1), tau at the prior, r = (1, 1),
/// gamma0 = 1, l ~ N(0, b), network weights per kernel_net.
GlobalState init_global(const HyperParams& hp, int M, std::uint64_t seed, double learning_rate = 1e-3);

/// Expectations under q of the global blocks, recomputed after each update.
struct GlobalExpectations {
    RowArray elog_phi;  // M x K, feature-major so psi rows read contiguously
    RowArray mean_phi;  // M x K
    Eigen::ArrayXd er, elnr;
    Eigen::ArrayXd elogit_pi, eln_pi, eln1m_pi;

    static GlobalExpectations compute(const GlobalState& g);
};

/// Per-sample variational parameters. psi holds one row per distinct
/// feature of the sample (row-major, nnz x K).
struct LocalState {
    RowArray psi;
    Eigen::ArrayXd theta1;
    Eigen::ArrayXd theta2;  // every entry equals E[p_j]; scale of the Poisson rate
    Eigen::ArrayXd nu;
    double a_tilde = 0.0;
    double b_tilde = 0.0;
    Vector h;
    Eigen::ArrayXd L_tilde;
    /// Shape at which the CRT augmentation was linearised.
    Eigen::ArrayXd s0;
    /// Kernel mean u_f(h_j, l_k) used by the last nu update.
    Eigen::ArrayXd kernel;
    /// Standard normal draws behind a sampled kernel (empty otherwise).
    Eigen::ArrayXd kernel_noise;
    bool initialized = false;

    /// Expected token count per factor.
    Eigen::ArrayXd expected_counts(const SparseRow& row) const;
    /// E[lambda_jk] = theta1 * theta2.
    Eigen::ArrayXd rate_mean() const { return theta1 * theta2; }
    void validate(const SparseRow& row) const;
};

/// Usage threshold above which a factor's selector is forced on.
inline constexpr double kUsageThreshold = 1e-8;
/// Floor applied to the CRT linearisation point.
inline constexpr double kShapeFloor = 1e-12;

}  // namespace cozinb
