#pragma once

namespace cozinb::special {

// Special functions used by every Gamma/Beta/Dirichlet expectation.
// All throw DomainError for x <= 0 (or non-finite x).

/// psi(x) = d/dx ln Gamma(x). Upward recurrence to x >= 6, then the
/// asymptotic series; absolute error below 1e-12 on (0, inf).
double digamma(double x);

/// psi'(x). Same recurrence/asymptotic scheme as digamma.
double trigamma(double x);

/// ln Gamma(x) for x > 0, Stirling series after recurrence.
double lgamma(double x);

/// ln B(a, b).
double lbeta(double a, double b);

/// ln(1 + e^x) without overflow.
double softplus(double x);

/// 1 / (1 + e^-x) without overflow.
double sigmoid(double x);

}  // namespace cozinb::special
