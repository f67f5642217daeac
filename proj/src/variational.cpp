#include "bstnn/variational.hpp"

#include "bstnn/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace bstnn {

namespace {

constexpr double kHalfLogTwoPi = 0.91893853320467274178; // 0.5 * log(2 pi)

void require_positive(double v, const char* what) {
    if (!(v > 0.0)) throw DomainError(std::string(what) + " must be positive, got " + std::to_string(v));
}

} // namespace

VariationalParameter VariationalParameter::create(std::string name, Shape shape,
                                                  std::size_t fan_in, Rng& rng,
                                                  const VariationalInit& init) {
    const std::size_t n = numel(shape);
    std::vector<double> mu(n);
    if (init.mu_constant) {
        std::fill(mu.begin(), mu.end(), *init.mu_constant);
    } else {
        const double k = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
        for (double& v : mu) v = (2.0 * rng.uniform() - 1.0) * k;
    }
    VariationalParameter vp;
    vp.name = std::move(name);
    vp.mu = Tensor::parameter(shape, std::move(mu));
    vp.rho = Tensor::parameter(shape, std::vector<double>(n, init.rho));
    if (init.with_eta) vp.eta = Tensor::parameter(shape, std::vector<double>(n, init.eta));
    return vp;
}

VariationalParameter VariationalParameter::clone() const {
    VariationalParameter copy;
    copy.name = name;
    copy.mu = Tensor::parameter(mu.shape(), {mu.data().begin(), mu.data().end()});
    copy.rho = Tensor::parameter(rho.shape(), {rho.data().begin(), rho.data().end()});
    if (eta) copy.eta = Tensor::parameter(eta->shape(), {eta->data().begin(), eta->data().end()});
    return copy;
}

Tensor VariationalParameter::sigma() const { return softplus(rho); }

void VariationalParameter::validate() const {
    if (rho.shape() != mu.shape() || (eta && eta->shape() != mu.shape())) {
        throw DimensionError("variational parameter '" + name + "': mu " + shape_string(mu.shape()) +
                             ", rho " + shape_string(rho.shape()) +
                             (eta ? ", eta " + shape_string(eta->shape()) : std::string()) +
                             " must share one shape");
    }
}

std::vector<Tensor*> VariationalParameter::tensors() {
    std::vector<Tensor*> out{&mu, &rho};
    if (eta) out.push_back(&*eta);
    return out;
}

std::vector<const Tensor*> VariationalParameter::tensors() const {
    std::vector<const Tensor*> out{&mu, &rho};
    if (eta) out.push_back(&*eta);
    return out;
}

Tensor sample_weight(const VariationalParameter& vp, const Tensor& eps) {
    if (eps.shape() != vp.shape()) {
        throw DimensionError("sample_weight: noise shape " + shape_string(eps.shape()) +
                             " does not match parameter '" + vp.name + "' shape " +
                             shape_string(vp.shape()));
    }
    return add(vp.mu, mul(vp.sigma(), eps));
}

// ---------------------------------------------------------------------------
// Priors

Prior Prior::gaussian(double mean, double std) {
    require_positive(std, "prior std");
    return Prior(GaussianDist{mean, std});
}

Prior Prior::mixture(std::vector<double> weights, std::vector<double> means,
                     std::vector<double> stds) {
    if (weights.empty() || weights.size() != means.size() || weights.size() != stds.size()) {
        throw DimensionError("mixture prior: weights, means and stds must be non-empty and equally long");
    }
    for (double s : stds) require_positive(s, "mixture component std");
    double total = 0.0;
    for (double w : weights) {
        if (w < 0.0) throw DomainError("mixture prior: negative component weight");
        total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw DomainError("mixture prior: weights sum to " + std::to_string(total) + ", expected 1");
    }
    return Prior(GaussianMixture{std::move(weights), std::move(means), std::move(stds)});
}

double Prior::log_density(double x) const {
    if (const auto* g = std::get_if<GaussianDist>(&variant_)) {
        const double z = (x - g->mean) / g->std;
        return -std::log(g->std) - kHalfLogTwoPi - 0.5 * z * z;
    }
    const auto& m = std::get<GaussianMixture>(variant_);
    double peak = -std::numeric_limits<double>::infinity();
    std::vector<double> terms(m.weights.size());
    for (std::size_t j = 0; j < terms.size(); ++j) {
        const double z = (x - m.means[j]) / m.stds[j];
        terms[j] = std::log(m.weights[j]) - std::log(m.stds[j]) - kHalfLogTwoPi - 0.5 * z * z;
        peak = std::max(peak, terms[j]);
    }
    double acc = 0.0;
    for (double t : terms) acc += std::exp(t - peak);
    return peak + std::log(acc);
}

Tensor Prior::log_density(const Tensor& x) const {
    if (const auto* g = std::get_if<GaussianDist>(&variant_)) {
        const Tensor z = scale(add_scalar(x, -g->mean), 1.0 / g->std);
        return add_scalar(scale(square(z), -0.5), -std::log(g->std) - kHalfLogTwoPi);
    }
    const auto& m = std::get<GaussianMixture>(variant_);
    return log_mixture_density(x, m.weights, m.means, m.stds);
}

// ---------------------------------------------------------------------------
// KL divergences

double kl_gaussian_analytic(const GaussianDist& q, const GaussianDist& p) {
    require_positive(q.std, "posterior sigma");
    require_positive(p.std, "prior sigma");
    const double d = q.mean - p.mean;
    return std::log(p.std / q.std) + (q.std * q.std + d * d) / (2.0 * p.std * p.std) - 0.5;
}

double kl_gaussian_analytic(std::span<const double> mu_q, std::span<const double> sigma_q,
                            const GaussianDist& p) {
    if (mu_q.size() != sigma_q.size()) {
        throw DimensionError("kl_gaussian_analytic: " + std::to_string(mu_q.size()) + " means vs " +
                             std::to_string(sigma_q.size()) + " sigmas");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < mu_q.size(); ++i) {
        total += kl_gaussian_analytic(GaussianDist{mu_q[i], sigma_q[i]}, p);
    }
    return total;
}

double kl_monte_carlo(const GaussianDist& q, const Prior& p, std::size_t samples, Rng& rng) {
    if (samples == 0) throw ContractError("kl_monte_carlo: need at least one sample");
    require_positive(q.std, "posterior sigma");
    const Prior q_density = Prior::gaussian(q.mean, q.std);
    double acc = 0.0;
    for (std::size_t i = 0; i < samples; ++i) {
        const double x = q.mean + q.std * rng.normal();
        acc += q_density.log_density(x) - p.log_density(x);
    }
    return acc / static_cast<double>(samples);
}

Tensor kl_divergence(const VariationalParameter& vp, const Prior& prior, NoiseSource& noise,
                     std::size_t mc_samples) {
    const Tensor sigma = vp.sigma();
    if (prior.is_gaussian()) {
        const GaussianDist& p = prior.as_gaussian();
        const Tensor spread = add(square(sigma), square(add_scalar(vp.mu, -p.mean)));
        const Tensor per_weight = sub(scale(spread, 1.0 / (2.0 * p.std * p.std)), log(sigma));
        const double constant = static_cast<double>(vp.size()) * (std::log(p.std) - 0.5);
        return add_scalar(sum(per_weight), constant);
    }
    if (mc_samples == 0) throw ContractError("kl_divergence: mixture prior needs mc_samples >= 1");
    // log q(w) at w = mu + sigma*eps is -log sigma - eps^2/2 - log sqrt(2 pi).
    Tensor total = Tensor::scalar(0.0);
    for (std::size_t s = 0; s < mc_samples; ++s) {
        const Tensor eps = noise.standard_normal(vp.shape());
        const Tensor w = add(vp.mu, mul(sigma, eps));
        std::vector<double> gauss(eps.size());
        for (std::size_t i = 0; i < gauss.size(); ++i) gauss[i] = -0.5 * eps[i] * eps[i] - kHalfLogTwoPi;
        const Tensor log_q = sub(Tensor(eps.shape(), std::move(gauss)), log(sigma));
        total = add(total, sum(sub(log_q, prior.log_density(w))));
    }
    return scale(total, 1.0 / static_cast<double>(mc_samples));
}

Tensor kl_loss(std::span<const VariationalParameter* const> params, const Prior& prior,
               double alpha_kl, NoiseSource& noise, std::size_t mc_samples) {
    if (alpha_kl < 0.0) throw DomainError("kl_loss: alpha_kl must be non-negative");
    if (alpha_kl == 0.0 || params.empty()) return Tensor::scalar(0.0);
    Tensor total = kl_divergence(*params[0], prior, noise, mc_samples);
    for (std::size_t i = 1; i < params.size(); ++i) {
        total = add(total, kl_divergence(*params[i], prior, noise, mc_samples));
    }
    return scale(total, alpha_kl);
}

// ---------------------------------------------------------------------------
// Posterior sharpening

void SharpeningConfig::validate() const { require_positive(sigma0, "sharpening sigma0"); }

Tensor sharpen(const Tensor& w, const Tensor& g_w, const VariationalParameter& vp,
               const SharpeningConfig& cfg, const Tensor& eps) {
    cfg.validate();
    if (!vp.eta) {
        throw ContractError("sharpen: parameter '" + vp.name + "' has no sharpening rate eta");
    }
    if (w.shape() != vp.shape() || g_w.shape() != vp.shape() || eps.shape() != vp.shape()) {
        throw DimensionError("sharpen: w " + shape_string(w.shape()) + ", g " +
                             shape_string(g_w.shape()) + ", eps " + shape_string(eps.shape()) +
                             " must match parameter '" + vp.name + "' shape " +
                             shape_string(vp.shape()));
    }
    return add(sub(w, mul(*vp.eta, g_w)), scale(eps, cfg.sigma0));
}

Tensor sharpening_loss(const Tensor& eta, const Tensor& g_w, const SharpeningConfig& cfg) {
    cfg.validate();
    if (eta.shape() != g_w.shape()) {
        throw DimensionError("sharpening_loss: eta " + shape_string(eta.shape()) + " vs gradient " +
                             shape_string(g_w.shape()));
    }
    return scale(sum(square(mul(eta, g_w))), 1.0 / (2.0 * cfg.sigma0 * cfg.sigma0));
}

} // namespace bstnn
