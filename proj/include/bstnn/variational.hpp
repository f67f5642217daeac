#pragma once

// Gaussian variational weight posteriors (Bayes by backprop), weight priors,
// KL penalties and posterior sharpening.

#include "bstnn/random.hpp"
#include "bstnn/tensor.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace bstnn {

struct VariationalInit {
    double rho = -3.0;       // sigma = softplus(-3) ~ 0.0486
    bool with_eta = true;
    double eta = 0.01;
    // When set, every mean starts at this value instead of U(-k, k).
    std::optional<double> mu_constant;
};

// Posterior q(w) = N(mu, softplus(rho)^2) per weight, plus an optional
// per-weight sharpening rate eta.
struct VariationalParameter {
    std::string name;
    Tensor mu;
    Tensor rho;
    std::optional<Tensor> eta;

    // mu ~ U(-k, k) with k = 1 / sqrt(fan_in); rho and eta constant.
    static VariationalParameter create(std::string name, Shape shape, std::size_t fan_in,
                                       Rng& rng, const VariationalInit& init = {});

    const Shape& shape() const { return mu.shape(); }
    std::size_t size() const { return mu.size(); }

    // Deep copy with fresh leaf tensors.
    VariationalParameter clone() const;

    // softplus(rho), differentiable.
    Tensor sigma() const;

    // Throws DimensionError if mu/rho/eta shapes disagree.
    void validate() const;

    std::vector<Tensor*> tensors();
    std::vector<const Tensor*> tensors() const;
};

// w = mu + softplus(rho) * eps.
Tensor sample_weight(const VariationalParameter& vp, const Tensor& eps);

struct GaussianDist {
    double mean = 0.0;
    double std = 1.0;
};

struct GaussianMixture {
    std::vector<double> weights;
    std::vector<double> means;
    std::vector<double> stds;
};

class Prior {
public:
    static Prior gaussian(double mean, double std);
    static Prior mixture(std::vector<double> weights, std::vector<double> means,
                         std::vector<double> stds);

    bool is_gaussian() const { return std::holds_alternative<GaussianDist>(variant_); }
    const GaussianDist& as_gaussian() const { return std::get<GaussianDist>(variant_); }
    const GaussianMixture& as_mixture() const { return std::get<GaussianMixture>(variant_); }

    double log_density(double x) const;
    Tensor log_density(const Tensor& x) const;

private:
    explicit Prior(std::variant<GaussianDist, GaussianMixture> v) : variant_(std::move(v)) {}
    std::variant<GaussianDist, GaussianMixture> variant_;
};

// Closed-form KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)).
double kl_gaussian_analytic(const GaussianDist& q, const GaussianDist& p);
// Sum of the closed form over weights sharing one prior.
double kl_gaussian_analytic(std::span<const double> mu_q, std::span<const double> sigma_q,
                            const GaussianDist& p);

// (1/M) sum_i [log q(x_i) - log p(x_i)], x_i ~ q. Evaluated in log space so a
// vanishing prior density never produces inf/inf.
double kl_monte_carlo(const GaussianDist& q, const Prior& p, std::size_t samples, Rng& rng);

// Differentiable KL(q || p) summed over all weights of one parameter. Gaussian
// priors use the closed form; mixtures use `mc_samples` reparameterized draws.
Tensor kl_divergence(const VariationalParameter& vp, const Prior& prior, NoiseSource& noise,
                     std::size_t mc_samples = 5);

// alpha_kl * sum over parameters of KL(q || p).
Tensor kl_loss(std::span<const VariationalParameter* const> params, const Prior& prior,
               double alpha_kl, NoiseSource& noise, std::size_t mc_samples = 5);

struct SharpeningConfig {
    double sigma0 = 0.02;
    bool enabled = false;

    void validate() const;
};

// w' = (w - eta * g_w) + sigma0 * eps'. g_w is a constant (the data-loss
// gradient at w from a first pass); eta is learnable.
Tensor sharpen(const Tensor& w, const Tensor& g_w, const VariationalParameter& vp,
               const SharpeningConfig& cfg, const Tensor& eps);

// KL(N(w - eta*g, sigma0^2) || N(w, sigma0^2)) = sum (eta*g)^2 / (2 sigma0^2).
Tensor sharpening_loss(const Tensor& eta, const Tensor& g_w, const SharpeningConfig& cfg);

} // namespace bstnn
