#include "mstm/sampler.hpp"

#include <chrono>
#include <cmath>
#include <complex>
#include <limits>

#include <unsupported/Eigen/FFT>

#include "mstm/error.hpp"
#include "mstm/rng.hpp"

namespace mstm {

namespace {

using Clock = std::chrono::steady_clock;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double safe_logpdf(const TargetDensity& t, const Eigen::VectorXd& x, long long& evals) {
    ++evals;
    const double v = t.logpdf(x);
    return std::isfinite(v) ? v : kNegInf;
}

Eigen::MatrixXd lower_factor(const Eigen::MatrixXd& cov) {
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() == Eigen::Success) return llt.matrixL();
    const double base = std::max(1e-12, cov.diagonal().cwiseAbs().maxCoeff());
    for (double jitter = 1e-10 * base; jitter < base; jitter *= 10.0) {
        llt.compute(cov + jitter * Eigen::MatrixXd::Identity(cov.rows(), cov.cols()));
        if (llt.info() == Eigen::Success) return llt.matrixL();
    }
    throw Error(ErrorCode::CovarianceNotPD, "proposal covariance is not positive definite");
}

void finish(ChainResult& r, const Clock::time_point& t0) {
    r.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    if (r.samples.rows() >= 4) {
        r.ess = ess_autocorrelation(r.samples);
        r.ess_min = r.ess.minCoeff();
        r.ess_max = r.ess.maxCoeff();
    }
}

// Robbins-Monro gain for scale tuning.
double tuning_gain(int step) { return 1.0 / std::pow(step + 1.0, 0.6); }

} // namespace

void ChainConfig::validate(int dim) const {
    require(steps > 0, ErrorCode::Config, "chain steps must be positive");
    require(effective_burn_in() >= 0 && effective_burn_in() < steps, ErrorCode::Config, "burn-in must be in [0, steps)");
    require(proposal_scale > 0.0 && step_size > 0.0 && dr_scale > 0.0, ErrorCode::Config, "scales must be positive");
    require(adapt_interval >= 1 && thin >= 1, ErrorCode::Config, "adaptation interval and thinning must be >= 1");
    require(dr_stages == 1 || dr_stages == 2, ErrorCode::Config, "1 or 2 delayed-rejection stages supported");
    require(start.size() == 0 || start.size() == dim, ErrorCode::DimensionMismatch, "start point dimension mismatch");
    require(preconditioner.size() == 0 || (preconditioner.rows() == dim && preconditioner.cols() == dim),
            ErrorCode::DimensionMismatch, "preconditioner dimension mismatch");
}

void to_json(nlohmann::json& j, const ChainResult& r) {
    j = nlohmann::json{{"rows", r.samples.rows()},         {"acceptance_rate", r.acceptance_rate},
                       {"ess_min", r.ess_min},              {"ess_max", r.ess_max},
                       {"wall_seconds", r.wall_seconds},    {"final_scale", r.final_scale},
                       {"evaluations", r.evaluations}};
}

ChainResult dram_run(const TargetDensity& target, const ChainConfig& cfg) {
    const int d = target.dim;
    cfg.validate(d);
    const auto t0 = Clock::now();
    Rng rng(cfg.seed, cfg.stream);
    ChainResult res;

    Eigen::VectorXd x = cfg.start.size() ? cfg.start : Eigen::VectorXd::Zero(d);
    double lx = safe_logpdf(target, x, res.evaluations);
    if (!std::isfinite(lx)) throw Error(ErrorCode::NonFiniteLogDensity, "log density is not finite at the chain start");

    Eigen::MatrixXd base = cfg.preconditioner.size() ? cfg.preconditioner : Eigen::MatrixXd::Identity(d, d);
    double log_scale = std::log(cfg.proposal_scale);
    // Proposal factor = exp(log_scale) * Lc. During a tuned burn-in Lc stays at
    // the initial proposal; the history covariance only takes over afterwards,
    // with the multiplier reset. Tuning the multiplier against a covariance
    // estimated from a young, sticky history lets the two drift apart.
    Eigen::MatrixXd Lc = lower_factor(base);
    Eigen::MatrixXd L = std::exp(log_scale) * Lc;
    const double target_rate = cfg.target_acceptance > 0 ? cfg.target_acceptance : 0.35;
    const int burn = cfg.effective_burn_in();
    const double am_factor = 2.38 * 2.38 / d;

    // running moments of the chain history (Welford)
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
    Eigen::MatrixXd m2 = Eigen::MatrixXd::Zero(d, d);
    long long count = 0;

    const int kept_rows = (cfg.steps - burn + cfg.thin - 1) / cfg.thin;
    res.samples.resize(kept_rows, d);
    long long accepted_after_burn = 0;
    int row = 0;

    auto log_q = [&](const Eigen::VectorXd& diff, const Eigen::MatrixXd& factor) {
        return -0.5 * factor.triangularView<Eigen::Lower>().solve(diff).squaredNorm();
    };

    for (int step = 0; step < cfg.steps; ++step) {
        const Eigen::VectorXd y1 = x + L * rng.normal_vector(d);
        const double l1 = safe_logpdf(target, y1, res.evaluations);
        const double log_a1 = std::min(0.0, l1 - lx);
        bool accepted = false;
        if (std::log(rng.uniform()) < log_a1) {
            x = y1;
            lx = l1;
            accepted = true;
        } else if (cfg.dr_stages == 2 && (cfg.dr_disable_after < 0 || step < cfg.dr_disable_after)) {
            const Eigen::MatrixXd L2 = cfg.dr_scale * L;
            const Eigen::VectorXd y2 = x + L2 * rng.normal_vector(d);
            const double l2 = safe_logpdf(target, y2, res.evaluations);
            if (std::isfinite(l2)) {
                const double a1_back = std::exp(std::min(0.0, l1 - l2));
                const double a1_fwd = std::exp(log_a1);
                if (a1_back < 1.0) {
                    const double log_ratio = l2 - lx + log_q(y1 - y2, L) - log_q(y1 - x, L) + std::log1p(-a1_back) -
                                             std::log1p(-a1_fwd);
                    if (std::log(rng.uniform()) < std::min(0.0, log_ratio)) {
                        x = y2;
                        lx = l2;
                        accepted = true;
                    }
                }
            }
        }

        const bool in_burn = step < burn;
        // tuning: Robbins-Monro during burn-in; with adaptation on it continues
        // afterwards with a restarted, diminishing gain
        if (cfg.tune && (in_burn || cfg.adapt)) {
            const int k = in_burn ? step : step - burn;
            log_scale += tuning_gain(k) * ((accepted ? 1.0 : 0.0) - target_rate);
            log_scale = std::clamp(log_scale, -30.0, 30.0);
        }
        ++count;
        const Eigen::VectorXd delta = x - mean;
        mean += delta / double(count);
        m2.noalias() += delta * (x - mean).transpose();

        const bool am_phase = cfg.adapt && !(cfg.tune && in_burn);
        const bool switching = cfg.adapt && cfg.tune && step + 1 == burn;
        if (count > 2 * d && (switching || (am_phase && (step + 1) % cfg.adapt_interval == 0))) {
            Eigen::MatrixXd cov = am_factor * m2 / double(count - 1);
            cov.diagonal().array() += 1e-10 * std::max(1.0, cov.diagonal().maxCoeff());
            Lc = lower_factor(cov);
            if (switching) log_scale = std::log(cfg.proposal_scale);
        }
        L = std::exp(log_scale) * Lc;

        if (step >= burn) {
            accepted_after_burn += accepted;
            if ((step - burn) % cfg.thin == 0) res.samples.row(row++) = x.transpose();
        }
    }
    res.acceptance_rate = double(accepted_after_burn) / double(cfg.steps - burn);
    res.final_scale = std::exp(log_scale);
    finish(res, t0);
    return res;
}

namespace {

struct MalaState {
    Eigen::VectorXd x;
    double logp = kNegInf;
    Eigen::VectorXd grad;
};

MalaState mala_eval(const TargetDensity& t, const Eigen::VectorXd& x, long long& evals) {
    MalaState s;
    s.x = x;
    ++evals;
    s.grad.resize(x.size());
    s.logp = t.logpdf_grad(x, s.grad);
    if (!std::isfinite(s.logp) || !s.grad.allFinite()) s.logp = kNegInf;
    return s;
}

// log q(to | from) up to a constant shared by both directions.
double mala_log_q(const MalaState& from, const Eigen::VectorXd& to, const Eigen::MatrixXd& P, const Eigen::MatrixXd& L,
                  double eps) {
    const Eigen::VectorXd mu = from.x + 0.5 * eps * eps * (P * from.grad);
    return -0.5 * L.triangularView<Eigen::Lower>().solve(to - mu).squaredNorm() / (eps * eps);
}

} // namespace

double premala_log_ratio(const TargetDensity& target, const Eigen::MatrixXd& P, double eps, const Eigen::VectorXd& x,
                         const Eigen::VectorXd& y) {
    require(target.has_gradient(), ErrorCode::Config, "preMALA needs a gradient");
    long long evals = 0;
    const auto sx = mala_eval(target, x, evals);
    const auto sy = mala_eval(target, y, evals);
    const Eigen::MatrixXd L = lower_factor(P);
    return sy.logp - sx.logp + mala_log_q(sy, x, P, L, eps) - mala_log_q(sx, y, P, L, eps);
}

ChainResult premala_run(const TargetDensity& target, const ChainConfig& cfg) {
    require(target.has_gradient(), ErrorCode::Config, "preMALA needs a gradient");
    const int d = target.dim;
    cfg.validate(d);
    const auto t0 = Clock::now();
    Rng rng(cfg.seed, cfg.stream);
    ChainResult res;

    const Eigen::MatrixXd P = cfg.preconditioner.size() ? cfg.preconditioner : Eigen::MatrixXd::Identity(d, d);
    const Eigen::MatrixXd L = lower_factor(P);
    MalaState cur = mala_eval(target, cfg.start.size() ? cfg.start : Eigen::VectorXd::Zero(d), res.evaluations);
    if (!cur.grad.allFinite()) throw Error(ErrorCode::NonFiniteGradient, "gradient is not finite at the chain start");
    if (!std::isfinite(cur.logp)) throw Error(ErrorCode::NonFiniteLogDensity, "log density is not finite at the chain start");

    double log_eps = std::log(cfg.step_size);
    const double target_rate = cfg.target_acceptance > 0 ? cfg.target_acceptance : 0.55;
    const int burn = cfg.effective_burn_in();
    const int kept_rows = (cfg.steps - burn + cfg.thin - 1) / cfg.thin;
    res.samples.resize(kept_rows, d);
    long long accepted_after_burn = 0;
    int row = 0;

    for (int step = 0; step < cfg.steps; ++step) {
        const double eps = std::exp(log_eps);
        const Eigen::VectorXd y = cur.x + 0.5 * eps * eps * (P * cur.grad) + eps * (L * rng.normal_vector(d));
        const MalaState prop = mala_eval(target, y, res.evaluations);
        bool accepted = false;
        double accept_prob = 0.0;
        if (std::isfinite(prop.logp)) {
            const double log_ratio =
                prop.logp - cur.logp + mala_log_q(prop, cur.x, P, L, eps) - mala_log_q(cur, y, P, L, eps);
            accept_prob = std::exp(std::min(0.0, log_ratio));
            if (rng.uniform() < accept_prob) {
                cur = prop;
                accepted = true;
            }
        }
        if (cfg.tune && step < burn) {
            log_eps += tuning_gain(step) * (accept_prob - target_rate);
            log_eps = std::clamp(log_eps, -30.0, 10.0);
        }
        if (step >= burn) {
            accepted_after_burn += accepted;
            if ((step - burn) % cfg.thin == 0) res.samples.row(row++) = cur.x.transpose();
        }
    }
    res.acceptance_rate = double(accepted_after_burn) / double(cfg.steps - burn);
    res.final_scale = std::exp(log_eps);
    finish(res, t0);
    return res;
}

Eigen::MatrixXd finite_difference_neg_hessian(const TargetDensity& target, const Eigen::VectorXd& x) {
    require(target.has_gradient(), ErrorCode::Config, "finite-difference Hessian needs a gradient");
    const int d = target.dim;
    Eigen::MatrixXd H(d, d);
    Eigen::VectorXd gp(d), gm(d);
    for (int i = 0; i < d; ++i) {
        const double h = 1e-6 * (1.0 + std::abs(x[i]));
        Eigen::VectorXd xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        target.logpdf_grad(xp, gp);
        target.logpdf_grad(xm, gm);
        H.col(i) = -(gp - gm) / (2.0 * h);
    }
    return 0.5 * (H + H.transpose());
}

MapResult find_map(const TargetDensity& target, const Eigen::VectorXd& start,
                   const std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>& neg_hessian, const MapOptions& opt) {
    require(target.has_gradient(), ErrorCode::Config, "MAP search needs a gradient");
    require(start.size() == target.dim, ErrorCode::DimensionMismatch, "start point dimension mismatch");
    MapResult r;
    Eigen::VectorXd x = start, g(target.dim);
    double f = target.logpdf_grad(x, g);
    require(std::isfinite(f), ErrorCode::NonFiniteLogDensity, "log density is not finite at the MAP start");
    require(g.allFinite(), ErrorCode::NonFiniteGradient, "gradient is not finite at the MAP start");
    auto hess = [&](const Eigen::VectorXd& p) {
        return neg_hessian ? neg_hessian(p) : finite_difference_neg_hessian(target, p);
    };
    Eigen::VectorXd gnew(target.dim);
    while (g.norm() > opt.gradient_tolerance && r.iterations < opt.max_iterations) {
        ++r.iterations;
        const Eigen::MatrixXd H = hess(x);
        Eigen::VectorXd p;
        Eigen::LLT<Eigen::MatrixXd> llt(H);
        if (llt.info() == Eigen::Success)
            p = llt.solve(g);
        else
            p = lower_factor(H.cwiseAbs().diagonal().asDiagonal()).triangularView<Eigen::Lower>().solve(g);
        double slope = g.dot(p);
        if (!(slope > 0.0)) {
            p = g;
            slope = g.squaredNorm();
        }
        double t = 1.0;
        bool ok = false;
        for (int h = 0; h < opt.max_halvings; ++h, t *= 0.5) {
            const Eigen::VectorXd trial = x + t * p;
            const double ft = target.logpdf_grad(trial, gnew);
            if (std::isfinite(ft) && gnew.allFinite() && ft >= f + opt.armijo_c * t * slope) {
                x = trial;
                f = ft;
                g = gnew;
                ok = true;
                break;
            }
        }
        if (!ok) {
            // at round-off level the objective can no longer resolve progress
            if (g.norm() <= 1e3 * opt.gradient_tolerance) break;
            throw Error(ErrorCode::LineSearchFailure,
                        "MAP line search failed (gradient norm " + std::to_string(g.norm()) + ")");
        }
    }
    r.point = x;
    r.logpdf = f;
    r.gradient_norm = g.norm();
    r.hessian = hess(x);
    r.hessian = 0.5 * (r.hessian + r.hessian.transpose());
    return r;
}

Eigen::VectorXd ess_autocorrelation(const Eigen::MatrixXd& chain) {
    const Eigen::Index n = chain.rows();
    require(n >= 4, ErrorCode::TooFewReplicates, "chain too short for an autocorrelation estimate");
    Eigen::Index nfft = 1;
    while (nfft < 2 * n) nfft <<= 1;
    Eigen::FFT<double> fft;
    Eigen::VectorXd ess(chain.cols());
    std::vector<double> buf(static_cast<std::size_t>(nfft));
    std::vector<std::complex<double>> spec;
    std::vector<double> acov;
    for (Eigen::Index c = 0; c < chain.cols(); ++c) {
        const double mean = chain.col(c).mean();
        std::fill(buf.begin(), buf.end(), 0.0);
        for (Eigen::Index k = 0; k < n; ++k) buf[static_cast<std::size_t>(k)] = chain(k, c) - mean;
        fft.fwd(spec, buf);
        for (auto& s : spec) s = std::norm(s);
        fft.inv(acov, spec);
        const double var0 = acov[0] / n;
        if (!(var0 > 0.0)) {
            ess[c] = double(n);
            continue;
        }
        auto rho = [&](Eigen::Index lag) { return acov[static_cast<std::size_t>(lag)] / n / var0; };
        // Geyer initial monotone sequence on pair sums
        double sum = 0.0;
        double previous = std::numeric_limits<double>::infinity();
        for (Eigen::Index k = 0; 2 * k + 1 < n; ++k) {
            double pair = rho(2 * k) + rho(2 * k + 1);
            if (pair <= 0.0) break;
            pair = std::min(pair, previous);
            previous = pair;
            sum += pair;
        }
        const double tau = std::max(-1.0 + 2.0 * sum, 1.0 / std::log10(double(n) + 10.0));
        ess[c] = double(n) / tau;
    }
    return ess;
}

double ess_variance_ratio(const Eigen::VectorXd& est, double target_variance) {
    if (est.size() < 20) throw Error(ErrorCode::TooFewReplicates, "variance-ratio ESS needs at least 20 replicates");
    const double m = est.mean();
    const double v = (est.array() - m).square().sum() / double(est.size() - 1);
    require(v > 0.0, ErrorCode::TooFewReplicates, "estimator replicates have zero variance");
    return target_variance / v;
}

} // namespace mstm
