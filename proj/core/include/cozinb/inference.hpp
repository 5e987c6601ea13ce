#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "cozinb/data.hpp"
#include "cozinb/model.hpp"

namespace cozinb {

struct InferenceOptions {
    /// false runs the ablation with every selector fixed at b_jk = 1.
    bool zero_inflation = true;
    /// false forces the kernel to 0; networks are then never touched.
    bool kernel = true;
    /// Use the continuous expected count instead of its rounding in the
    /// CRT update (gradient of the relaxed Gamma ratio).
    bool gradient_crt = false;
    /// Draw f = u_f + sigma_f * eps once per evaluation instead of u_f.
    bool kernel_sampling = false;
    /// Closed-form blocks only: gradient variables and every linearisation
    /// anchor stay fixed, so each sweep is coordinate ascent on one objective.
    bool freeze_gradient = false;
    /// After each epoch, try switching off factors without expected usage
    /// (accepted only when the objective increases).
    bool prune = true;
    /// Per-sample switch-off proposals at the end of every local update.
    /// Always on in infer_locals; off in training by default because early
    /// switch-offs starve factors that are still forming.
    bool local_moves = false;
    /// Every `delete_every` epochs (0 disables), run the factor moves of
    /// delete_factors with up to `delete_candidates` single deletions.
    int delete_every = 10;
    int delete_candidates = 3;
    int delete_sweeps = 2;
    int threads = 1;
};

struct LocalSettings {
    int iters = 15;
    double tol = 1e-6;
};

/// Fresh local state for a row: nu = 0.5 (1 in the ablation), psi uniform.
LocalState init_local(const SparseRow& row, const GlobalState& g, const GlobalExpectations& e,
                      const HyperParams& hp, const InferenceOptions& opts);

/// Kernel values f_jk for all k; fills state.h and state.kernel.
/// `noise` (size K) is used only when kernel sampling is on.
void compute_kernel(const SparseRow& row, const GlobalState& g, const InferenceOptions& opts,
                    const Eigen::ArrayXd* noise, LocalState& state);

/// Closed-form local sweeps (psi, theta, p, nu, then the CRT refresh) until
/// psi moves less than `tol` or `iters` sweeps have run. Warm-starts from
/// `state` when it is initialised. Returns the number of sweeps.
int update_local(const SparseRow& row, const GlobalState& g, const GlobalExpectations& e, const HyperParams& hp,
                 const InferenceOptions& opts, const LocalSettings& settings, LocalState& state,
                 const Eigen::ArrayXd* noise = nullptr);

// Individual closed-form blocks, exposed for coordinate-optimality checks.
void local_psi_step(const SparseRow& row, const GlobalExpectations& e, LocalState& s);
void local_theta_step(const SparseRow& row, LocalState& s);
void local_p_step(const SparseRow& row, const GlobalExpectations& e, const HyperParams& hp,
                  const InferenceOptions& opts, LocalState& s);
void local_nu_step(const SparseRow& row, const GlobalExpectations& e, const InferenceOptions& opts, LocalState& s);
void local_crt_step(const SparseRow& row, const GlobalExpectations& e, const InferenceOptions& opts, LocalState& s);

/// nu with the usage constraint applied: 1 wherever the factor has
/// expected usage above kUsageThreshold (and everywhere in the ablation).
Eigen::ArrayXd effective_nu(const SparseRow& row, const LocalState& s, const InferenceOptions& opts);

/// A minibatch: rows of `counts` listed in `index`, with their local states
/// (parallel to `index`).
struct Batch {
    const CountMatrix* counts = nullptr;
    std::vector<std::size_t> index;
    std::vector<const LocalState*> locals;
};

// Individual global blocks. `scale` is J / J_t.
void global_phi_step(const Batch& batch, double rho, double scale, const HyperParams& hp, GlobalState& g);
void global_pi_step(const Batch& batch, double rho, double scale, const HyperParams& hp,
                    const InferenceOptions& opts, GlobalState& g);
void global_r_step(const Batch& batch, double rho, double scale, const HyperParams& hp,
                   const InferenceOptions& opts, GlobalState& g);

/// Stochastic natural-parameter steps for phi, pi and r. Throws when rho is
/// outside (0, 1].
void update_global_closed(const Batch& batch, GlobalState& g, const HyperParams& hp, double rho, std::size_t J,
                          const InferenceOptions& opts);

/// Gradients of the objective with respect to the gradient-managed blocks.
struct GradientSet {
    MlpGrads encoder;
    MlpGrads decoder;
    Matrix l;
    double log_gamma0 = 0.0;
};

/// Kernel part of the objective, as a function of the networks and locations:
/// sum_jk [nu ln pi_hat + (1 - nu) ln(1 - pi_hat)] with
/// pi_hat = sigmoid(E logit pi_k + f_jk), scaled by J / J_t, plus the
/// Gaussian log priors of h (scaled) and l.
double kernel_objective(const Batch& batch, const GlobalState& g, const GlobalExpectations& e,
                        const HyperParams& hp, std::size_t J, const InferenceOptions& opts);

/// gamma0 part of the objective: Gamma(e0, 1/f0) prior, E ln p(r_k | gamma0),
/// and the CRT term for the table sums with L' held at `l_prime`.
double gamma0_objective(double gamma0, const Eigen::ArrayXd& table_sums, const Eigen::ArrayXd& l_prime,
                        const GlobalExpectations& e, const HyperParams& hp);
/// d/d ln(gamma0) of gamma0_objective.
double gamma0_log_gradient(double gamma0, const Eigen::ArrayXd& table_sums, const Eigen::ArrayXd& l_prime,
                           const GlobalExpectations& e, const HyperParams& hp);
/// Scaled table sums (J/J_t) sum_j L~_jk over the batch.
Eigen::ArrayXd table_sums(const Batch& batch, std::size_t J);
/// L'_k = crt_mean(round(S_k), gamma0).
Eigen::ArrayXd crt_l_prime(const Eigen::ArrayXd& table_sums, double gamma0);

GradientSet compute_gradients(const Batch& batch, const GlobalState& g, const GlobalExpectations& e,
                              const HyperParams& hp, std::size_t J, const InferenceOptions& opts);

/// One Adam ascent step on l, ln gamma0 and both networks; refreshes the
/// kernel-normaliser anchor. Throws NumericalError on non-finite gradients.
void update_global_gradient(const Batch& batch, GlobalState& g, const HyperParams& hp, std::size_t J,
                            const InferenceOptions& opts);

/// Objective terms that do not depend on any sample.
double global_objective(const GlobalState& g, const GlobalExpectations& e, const HyperParams& hp,
                        const InferenceOptions& opts, const Eigen::ArrayXd& table_sums);
/// Objective terms of one sample (up to -sum ln x_m!).
double local_objective(const SparseRow& row, const LocalState& s, const GlobalState& g,
                       const GlobalExpectations& e, const HyperParams& hp, const InferenceOptions& opts);
/// Full objective: global terms plus (J/J_t) times the batch's local terms.
double elbo(const Batch& batch, const GlobalState& g, const HyperParams& hp, std::size_t J,
            const InferenceOptions& opts);

/// Delete move over the whole corpus: for each factor whose total expected
/// usage is below `mass_threshold`, propose nu_jk = 0 wherever the factor is
/// unused, re-fit q(pi_k), q(r_k) and those nu_jk in closed form, and keep
/// the proposal only if the objective rises. Returns the accepted count.
int prune_factors(const CountMatrix& corpus, std::vector<LocalState>& locals, GlobalState& g,
                  const HyperParams& hp, const InferenceOptions& opts, double mass_threshold = 1.0);

/// Factor moves over the whole corpus. Proposals: switch off all factors that
/// hold no tokens but keep selector mass; restrict loosely used factors to the
/// samples holding half a token or more; delete the lowest-mass factors one
/// at a time, reassigning their tokens. Proposal and current state both get
/// `delete_sweeps` full-batch closed-form sweeps with anchors held, and the
/// one with the higher objective is kept. Returns the number of deleted factors.
int delete_factors(const CountMatrix& corpus, std::vector<LocalState>& locals, GlobalState& g,
                   const HyperParams& hp, const InferenceOptions& opts, const LocalSettings& settings);

struct TraceRow {
    int epoch = 0;
    double elbo = 0.0;
    double val_perplexity = 0.0;  // NaN without a validation set
    double wall_time = 0.0;       // seconds since fit started
};

struct Validation {
    const CountMatrix* observed = nullptr;
    const CountMatrix* target = nullptr;
};

struct FitSettings {
    HyperParams hp;
    Schedule schedule;
    InferenceOptions opts;
    std::uint64_t seed = 0;
    /// Full-batch coordinate ascent: rho = 1, no gradient phase.
    bool cavi = false;
    std::optional<Validation> validation;
    /// Called after each epoch's trace row is complete.
    std::function<void(const TraceRow&)> on_epoch;
};

struct FitResult {
    GlobalState global;
    std::vector<LocalState> locals;
    std::vector<TraceRow> trace;
    bool converged = false;
};

FitResult fit(const CountMatrix& corpus, const FitSettings& settings);

/// Local inference for every row of `counts` against frozen globals.
std::vector<LocalState> infer_locals(const CountMatrix& counts, const GlobalState& g, const HyperParams& hp,
                                     const InferenceOptions& opts, const LocalSettings& settings);

}  // namespace cozinb
