// SPDX-License-Identifier: Apache-2.0
#include "gdl/sampler.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "gdl/container.hpp"
#include "gdl/rng.hpp"

namespace gdl {

namespace {

void check_step_inputs(const NoiseSchedule& sched, const Tensor& x_t, int t,
                       const Tensor& z) {
    if (t < 1 || t > sched.max_timestep)
        throw std::invalid_argument("reverse step: t outside [1, T]");
    if (z.shape() != x_t.shape())
        throw std::invalid_argument("reverse step: z shape " + shape_str(z.shape()) +
                                    " != x_t shape " + shape_str(x_t.shape()));
}

// Eq-3 posterior mean given a precomputed noise prediction.
Tensor ddpm_mean(const NoiseSchedule& sched, const Tensor& x_t, int t,
                 const Tensor& eps) {
    const double beta = sched.beta_at(t);
    const double inv = 1.0 / std::sqrt(1.0 - beta);
    const double coeff = beta / std::sqrt(1.0 - sched.alpha_bar_at(t));
    Tensor out = Tensor::zeros(x_t.shape());
    for (std::size_t i = 0; i < x_t.size(); ++i)
        out.mutable_data()[i] = inv * (x_t.at(i) - coeff * eps.at(i));
    return out;
}

Tensor tile_rows(const Tensor& row, std::size_t batch) {
    const std::size_t m = row.size();
    Tensor out = Tensor::zeros({batch, m});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < m; ++c) out.mutable_data()[b * m + c] = row.at(c);
    return out;
}

// Mean predicted probability of one class: the confidence-trace reading.
double mean_class_prob(const Tensor& logits, int target) {
    const std::size_t batch = logits.shape()[0], k = logits.shape()[1];
    double acc = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, logits.at(b * k + c));
        double z = 0.0;
        for (std::size_t c = 0; c < k; ++c) z += std::exp(logits.at(b * k + c) - mx);
        acc += std::exp(logits.at(b * k + std::size_t(target)) - mx) / z;
    }
    return acc / double(batch);
}

double mean_max_softmax(const Tensor& logits) {
    const std::size_t batch = logits.shape()[0], k = logits.shape()[1];
    double acc = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, logits.at(b * k + c));
        double z = 0.0, top = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            const double e = std::exp(logits.at(b * k + c) - mx);
            z += e;
            top = std::max(top, e);
        }
        acc += top / z;
    }
    return acc / double(batch);
}

// Applies the guidance increment -s*sigma*g to base, optionally rescaled per
// sample so its norm is rho times that sample's denoising update.
Tensor apply_guidance(const Tensor& base, const Tensor& x_t, const Tensor& grad,
                      const GuidanceSpec& spec, double sigma) {
    const double s = spec.scale;
    if (s == 0.0) return base;  // exact reduction to the unguided step
    const std::size_t batch = base.shape()[0], dim = base.shape()[1];
    Tensor out = Tensor::zeros(base.shape());
    for (std::size_t b = 0; b < batch; ++b) {
        double scale_b = 1.0;
        if (spec.grad_scaling == GuidanceSpec::GradScaling::kNormRatio) {
            double term_norm2 = 0.0, upd_norm2 = 0.0;
            for (std::size_t c = 0; c < dim; ++c) {
                const double term = s * sigma * grad.at(b * dim + c);
                const double upd = base.at(b * dim + c) - x_t.at(b * dim + c);
                term_norm2 += term * term;
                upd_norm2 += upd * upd;
            }
            if (term_norm2 > 0.0)
                scale_b = spec.norm_ratio_rho * std::sqrt(upd_norm2 / term_norm2);
        }
        for (std::size_t c = 0; c < dim; ++c)
            out.mutable_data()[b * dim + c] =
                base.at(b * dim + c) - scale_b * s * sigma * grad.at(b * dim + c);
    }
    return out;
}

}  // namespace

void GuidanceSpec::validate() const {
    if (scale < 0.0) throw std::invalid_argument("GuidanceSpec: scale must be >= 0");
    if (grad_scaling == GradScaling::kNormRatio &&
        !(norm_ratio_rho > 0.0 && norm_ratio_rho <= 1.0))
        throw std::invalid_argument("GuidanceSpec: norm-ratio rho must be in (0, 1]");
    if (mode == Mode::kNone) return;
    switch (loss_kind) {
        case LossKind::kClassNll:
            if (y_target < 0)
                throw std::invalid_argument("GuidanceSpec: y_target must be >= 0");
            break;
        case LossKind::kRegressionL1:
            if (d_target.empty_handle() || d_target.rank() != 1)
                throw std::invalid_argument("GuidanceSpec: d_target must be a vector");
            break;
        case LossKind::kDenseL1: {
            if (s_target.empty_handle() || s_target.rank() != 1)
                throw std::invalid_argument("GuidanceSpec: s_target must be a vector");
            double total = 0.0;
            for (std::size_t i = 0; i < s_target.size(); ++i) {
                if (s_target.at(i) < 0.0)
                    throw std::invalid_argument("GuidanceSpec: s_target has negative mass");
                total += s_target.at(i);
            }
            if (std::abs(total - 1.0) > 1e-6)
                throw std::invalid_argument("GuidanceSpec: s_target must sum to 1");
            break;
        }
    }
}

void SamplerConfig::validate(int max_timestep) const {
    if (steps < 1 || steps > max_timestep)
        throw std::invalid_argument("SamplerConfig: steps outside [1, T]");
    if (eta < 0.0) throw std::invalid_argument("SamplerConfig: eta must be >= 0");
    if (kind == Kind::kDdpm && steps != max_timestep)
        throw std::invalid_argument(
            "SamplerConfig: the ddpm sampler runs the full chain (steps == T); "
            "use ddim with eta = 1 for a respaced stochastic chain");
}

Tensor ddpm_step(const NoiseSchedule& sched, const NoisePredictor& model,
                 const Tensor& x_t, int t, const Tensor& z) {
    check_step_inputs(sched, x_t, t, z);
    const Tensor eps = model.predict(x_t, t);
    const Tensor mu = ddpm_mean(sched, x_t, t, eps);
    const double sigma = sched.sigma_at(t);
    Tensor out = Tensor::zeros(x_t.shape());
    for (std::size_t i = 0; i < x_t.size(); ++i)
        out.mutable_data()[i] = mu.at(i) + sigma * z.at(i);
    return out;
}

Tensor predict_x0(const NoiseSchedule& sched, const NoisePredictor& model,
                  const Tensor& x_t, int t) {
    if (t < 1 || t > sched.max_timestep)
        throw std::invalid_argument("predict_x0: t outside [1, T]");
    const double ab = sched.alpha_bar_at(t);
    if (ab <= 0.0) throw std::invalid_argument("predict_x0: alpha_bar must be positive");
    const Tensor eps = model.predict(x_t, t);
    const double inv_sqrt_ab = 1.0 / std::sqrt(ab);
    const double noise_coeff = std::sqrt(1.0 - ab);
    Tensor out = Tensor::zeros(x_t.shape());
    for (std::size_t i = 0; i < x_t.size(); ++i)
        out.mutable_data()[i] = (x_t.at(i) - noise_coeff * eps.at(i)) * inv_sqrt_ab;
    return out;
}

std::vector<int> ddim_timesteps(int max_timestep, int steps) {
    if (steps < 1 || steps > max_timestep)
        throw std::invalid_argument("ddim_timesteps: steps outside [1, T]");
    const int stride = max_timestep / steps;
    std::vector<int> ts;
    for (int k = 0; k < steps; ++k) ts.push_back(max_timestep - k * stride);
    return ts;
}

namespace {

Tensor ddim_base(const NoiseSchedule& sched, const Tensor& x_t, int t, int t_prev,
                 double eta, const Tensor& z, const Tensor& eps) {
    const double ab_t = sched.alpha_bar_at(t);
    const double ab_prev = sched.alpha_bar_at(t_prev);
    const double sigma_tilde =
        eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_prev);
    const double dir_coeff =
        std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma_tilde * sigma_tilde));
    const double inv_sqrt_ab = 1.0 / std::sqrt(ab_t);
    const double noise_coeff = std::sqrt(1.0 - ab_t);
    const double sqrt_ab_prev = std::sqrt(ab_prev);

    Tensor out = Tensor::zeros(x_t.shape());
    for (std::size_t i = 0; i < x_t.size(); ++i) {
        const double x0_hat = (x_t.at(i) - noise_coeff * eps.at(i)) * inv_sqrt_ab;
        out.mutable_data()[i] =
            sqrt_ab_prev * x0_hat + dir_coeff * eps.at(i) + sigma_tilde * z.at(i);
    }
    return out;
}

}  // namespace

Tensor ddim_step(const NoiseSchedule& sched, const NoisePredictor& model,
                 const Tensor& x_t, int t, int t_prev, double eta, const Tensor& z) {
    check_step_inputs(sched, x_t, t, z);
    if (t_prev < 0 || t_prev >= t)
        throw std::invalid_argument("ddim_step: need 0 <= t_prev < t");
    const Tensor eps = model.predict(x_t, t);
    return ddim_base(sched, x_t, t, t_prev, eta, z, eps);
}

GuidanceEval guidance_gradient(const ExpertBank& bank, const GuidanceSpec& spec,
                               const NoiseSchedule& sched, const NoisePredictor& model,
                               const Tensor& x_t, int t) {
    spec.validate();
    if (spec.mode == GuidanceSpec::Mode::kNone)
        throw std::invalid_argument("guidance_gradient: mode is none");
    const std::size_t batch = x_t.shape()[0];

    GuidanceEval result;
    GradTape tape;
    Tensor x = x_t.clone();
    x.set_requires_grad(true);

    Tensor out;
    switch (spec.mode) {
        case GuidanceSpec::Mode::kNaiveOffTheShelf:
            out = bank.forward(x, std::nullopt);
            break;
        case GuidanceSpec::Mode::kSingleNoiseAware:
            out = bank.forward(x, 1);
            result.expert = 1;
            break;
        case GuidanceSpec::Mode::kMultiExpert: {
            const int n = expert_for_timestep(bank.expert_count(), bank.max_timestep(), t);
            out = bank.forward(x, n);
            result.expert = n;
            break;
        }
        case GuidanceSpec::Mode::kGradientsOnX0Hat: {
            // The noise prediction is held constant: the loss is differentiated
            // through the affine map x_t -> x0_hat only.
            const Tensor eps = model.predict(x_t, t);
            const double ab = sched.alpha_bar_at(t);
            const double inv_sqrt_ab = 1.0 / std::sqrt(ab);
            Tensor offset = Tensor::zeros(x_t.shape());
            for (std::size_t i = 0; i < x_t.size(); ++i)
                offset.mutable_data()[i] = -std::sqrt(1.0 - ab) * inv_sqrt_ab * eps.at(i);
            const Tensor x0_hat = add(affine(x, inv_sqrt_ab, 0.0), offset);
            out = bank.forward(x0_hat, std::nullopt);
            break;
        }
        case GuidanceSpec::Mode::kTConditioned: {
            const std::vector<int> ts(batch, t);
            out = bank.forward(x, 1, ts);
            result.expert = 1;
            break;
        }
        case GuidanceSpec::Mode::kNone:
            break;  // unreachable
    }

    // The chain rule runs on the per-sample loss: batch reductions are means,
    // so the total is rescaled by the row count before differentiating.
    Tensor loss;
    switch (spec.loss_kind) {
        case GuidanceSpec::LossKind::kClassNll: {
            if (std::size_t(spec.y_target) >= out.shape()[1])
                throw std::invalid_argument("guidance: y_target outside class range");
            const std::vector<int> labels(batch, spec.y_target);
            loss = affine(nll_loss(log_softmax(out), labels), double(batch), 0.0);
            result.confidence = mean_class_prob(out, spec.y_target);
            break;
        }
        case GuidanceSpec::LossKind::kRegressionL1:
            loss = affine(l1_distance(out, tile_rows(spec.d_target, batch)),
                          double(batch), 0.0);
            result.confidence = std::numeric_limits<double>::quiet_NaN();
            break;
        case GuidanceSpec::LossKind::kDenseL1:
            loss = affine(l1_distance(softmax(out), tile_rows(spec.s_target, batch)),
                          double(batch), 0.0);
            result.confidence = mean_max_softmax(out);
            break;
    }

    tape.backward(loss);
    result.grad = Tensor::from_data(
        std::vector<double>(x.grad().begin(), x.grad().end()), x_t.shape());
    return result;
}

Tensor guided_step(const NoiseSchedule& sched, const NoisePredictor& model,
                   const ExpertBank& bank, const GuidanceSpec& spec, const Tensor& x_t,
                   int t, const Tensor& z) {
    check_step_inputs(sched, x_t, t, z);
    spec.validate();
    const Tensor eps = model.predict(x_t, t);
    const Tensor mu = ddpm_mean(sched, x_t, t, eps);
    const double sigma = sched.sigma_at(t);
    Tensor base = Tensor::zeros(x_t.shape());
    for (std::size_t i = 0; i < x_t.size(); ++i)
        base.mutable_data()[i] = mu.at(i) + sigma * z.at(i);
    if (spec.mode == GuidanceSpec::Mode::kNone) return base;

    const GuidanceEval eval = guidance_gradient(bank, spec, sched, model, x_t, t);
    return apply_guidance(base, x_t, eval.grad, spec, sigma);
}

Tensor ddim_step_guided(const NoiseSchedule& sched, const NoisePredictor& model,
                        const ExpertBank& bank, const GuidanceSpec& spec,
                        const Tensor& x_t, int t, int t_prev, double eta,
                        const Tensor& z) {
    check_step_inputs(sched, x_t, t, z);
    if (t_prev < 0 || t_prev >= t)
        throw std::invalid_argument("ddim_step_guided: need 0 <= t_prev < t");
    spec.validate();
    const Tensor eps = model.predict(x_t, t);
    const Tensor base = ddim_base(sched, x_t, t, t_prev, eta, z, eps);
    if (spec.mode == GuidanceSpec::Mode::kNone) return base;

    // The guidance increment keeps the guided_step contract: -s * sigma_t * g
    // with sigma_t the schedule's reverse-process std at t.
    const GuidanceEval eval = guidance_gradient(bank, spec, sched, model, x_t, t);
    return apply_guidance(base, x_t, eval.grad, spec, sched.sigma_at(t));
}

SampleResult sample(const NoiseSchedule& sched, const NoisePredictor& model,
                    const ExpertBank* bank, const GuidanceSpec* spec,
                    const SamplerConfig& cfg, std::size_t batch, std::size_t dim) {
    cfg.validate(sched.max_timestep);
    const bool guided = spec != nullptr && spec->mode != GuidanceSpec::Mode::kNone;
    if (guided && bank == nullptr)
        throw std::invalid_argument("sample: guidance requested without an expert bank");
    if (guided) spec->validate();

    Rng root(cfg.seed, "sampler");
    Rng init_rng = root.split("init");
    Rng noise_rng = root.split("chain");

    Tensor x = Tensor::gaussian({batch, dim}, init_rng);
    SampleResult result;
    const std::uint64_t evals_before = bank != nullptr ? bank->eval_count() : 0;

    auto record = [&](int t, const GuidanceEval& eval) {
        StepTraceRow row;
        row.t = t;
        row.expert = eval.expert;
        row.confidence = eval.confidence;
        double norm2 = 0.0;
        for (std::size_t i = 0; i < eval.grad.size(); ++i)
            norm2 += eval.grad.at(i) * eval.grad.at(i);
        row.grad_norm = std::sqrt(norm2 / double(batch));
        result.trace.push_back(row);
    };

    if (cfg.kind == SamplerConfig::Kind::kDdpm) {
        for (int t = sched.max_timestep; t >= 1; --t) {
            const Tensor z = t > 1 ? Tensor::gaussian({batch, dim}, noise_rng)
                                   : Tensor::zeros({batch, dim});
            if (guided) {
                const Tensor eps = model.predict(x, t);
                const Tensor mu = ddpm_mean(sched, x, t, eps);
                const double sigma = sched.sigma_at(t);
                Tensor base = Tensor::zeros(x.shape());
                for (std::size_t i = 0; i < x.size(); ++i)
                    base.mutable_data()[i] = mu.at(i) + sigma * z.at(i);
                const GuidanceEval eval =
                    guidance_gradient(*bank, *spec, sched, model, x, t);
                record(t, eval);
                x = apply_guidance(base, x, eval.grad, *spec, sigma);
            } else {
                x = ddpm_step(sched, model, x, t, z);
            }
        }
    } else {
        const std::vector<int> ts = ddim_timesteps(sched.max_timestep, cfg.steps);
        for (std::size_t k = 0; k < ts.size(); ++k) {
            const int t = ts[k];
            const int t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
            const Tensor z = cfg.eta > 0.0 && t_prev > 0
                                 ? Tensor::gaussian({batch, dim}, noise_rng)
                                 : Tensor::zeros({batch, dim});
            if (guided) {
                const Tensor eps = model.predict(x, t);
                const Tensor base = ddim_base(sched, x, t, t_prev, cfg.eta, z, eps);
                const GuidanceEval eval =
                    guidance_gradient(*bank, *spec, sched, model, x, t);
                record(t, eval);
                x = apply_guidance(base, x, eval.grad, *spec, sched.sigma_at(t));
            } else {
                x = ddim_step(sched, model, x, t, t_prev, cfg.eta, z);
            }
        }
    }

    result.x0 = x;
    result.guidance_evals = bank != nullptr ? bank->eval_count() - evals_before : 0;
    return result;
}

void write_trace_csv(const std::filesystem::path& path,
                     const std::vector<StepTraceRow>& trace) {
    CsvWriter csv(path, {"t", "expert", "confidence", "grad_norm"});
    for (const StepTraceRow& row : trace)
        csv.append({double(row.t), double(row.expert), row.confidence, row.grad_norm});
}

}  // namespace gdl
