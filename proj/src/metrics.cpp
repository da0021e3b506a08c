// SPDX-License-Identifier: Apache-2.0
#include "gdl/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "gdl/container.hpp"
#include "gdl/rng.hpp"
#include "json.hpp"

namespace gdl {

namespace {

constexpr double kCovEps = 1e-8;

Eigen::MatrixXd as_matrix(const Tensor& samples) {
    if (samples.rank() != 2)
        throw std::invalid_argument("frechet_gaussian: samples must be (count, dim)");
    const auto rows = Eigen::Index(samples.shape()[0]);
    const auto cols = Eigen::Index(samples.shape()[1]);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c)
            m(r, c) = samples.at(std::size_t(r) * std::size_t(cols) + std::size_t(c));
    return m;
}

struct Moments {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

Moments fit_moments(const Eigen::MatrixXd& x) {
    Moments m;
    m.mean = x.colwise().mean();
    const Eigen::MatrixXd centered = x.rowwise() - m.mean.transpose();
    m.cov = centered.transpose() * centered / double(x.rows() - 1);
    return m;
}

Eigen::MatrixXd sym_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    Eigen::VectorXd vals = es.eigenvalues();
    for (Eigen::Index i = 0; i < vals.size(); ++i)
        vals(i) = std::sqrt(std::max(0.0, vals(i)));
    return es.eigenvectors() * vals.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_gaussian(const Tensor& samples_a, const Tensor& samples_b) {
    const Eigen::MatrixXd a = as_matrix(samples_a);
    const Eigen::MatrixXd b = as_matrix(samples_b);
    if (a.cols() != b.cols())
        throw std::invalid_argument("frechet_gaussian: dimensionality differs");
    const Eigen::Index d = a.cols();
    if (a.rows() < d + 1 || b.rows() < d + 1)
        throw std::invalid_argument("frechet_gaussian: need at least dim + 1 samples each");

    Moments ma = fit_moments(a);
    Moments mb = fit_moments(b);

    // Symmetric regularization when either covariance is (near) singular.
    const double min_eig =
        std::min(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(ma.cov).eigenvalues().minCoeff(),
                 Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(mb.cov).eigenvalues().minCoeff());
    if (min_eig < 1e-10) {
        ma.cov += kCovEps * Eigen::MatrixXd::Identity(d, d);
        mb.cov += kCovEps * Eigen::MatrixXd::Identity(d, d);
    }

    const Eigen::MatrixXd sa = sym_sqrt(ma.cov);
    const Eigen::MatrixXd product = sa * mb.cov * sa;  // symmetrized Sa Sb
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(product);
    double trace_sqrt = 0.0;
    for (Eigen::Index i = 0; i < d; ++i)
        trace_sqrt += std::sqrt(std::max(0.0, es.eigenvalues()(i)));

    const double mean_term = (ma.mean - mb.mean).squaredNorm();
    const double value = mean_term + ma.cov.trace() + mb.cov.trace() - 2.0 * trace_sqrt;
    return std::max(0.0, value);
}

double target_accuracy(const Tensor& samples, int y_target, const GmmTask& task) {
    if (samples.rank() != 2 || samples.shape()[0] == 0)
        throw std::invalid_argument("target_accuracy: no samples");
    if (y_target < 0 || y_target >= task.components)
        throw std::invalid_argument("target_accuracy: y_target outside [0, K)");
    const std::vector<std::size_t> hist = class_histogram(samples, task);
    return double(hist[std::size_t(y_target)]) / double(samples.shape()[0]);
}

std::vector<std::size_t> class_histogram(const Tensor& samples, const GmmTask& task) {
    if (samples.rank() != 2 || samples.shape()[0] == 0)
        throw std::invalid_argument("class_histogram: no samples");
    const Tensor posterior = bayes_posterior(task, samples);
    const std::size_t n = samples.shape()[0], k = std::size_t(task.components);
    std::vector<std::size_t> hist(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c)
            if (posterior.at(i * k + c) > posterior.at(i * k + best)) best = c;
        ++hist[best];
    }
    return hist;
}

ConfidenceTrace confidence_curve(const ExpertBank& bank, bool use_experts,
                                 const NoiseSchedule& sched, const Tensor& x,
                                 const std::vector<int>& y,
                                 const std::vector<int>& t_grid, ConfidenceKind kind,
                                 std::uint64_t seed) {
    if (x.rank() != 2 || x.shape()[0] == 0 || x.shape()[0] != y.size())
        throw std::invalid_argument("confidence_curve: bad held-out data");
    const std::size_t batch = x.shape()[0];
    const bool time_conditioned = bank.backbone().spec().time_embed_dim != 0;

    // One noise stream for the whole grid: the same seed corrupts identically
    // across calls, so teacher and expert curves are directly comparable.
    Rng rng(seed, "confidence");
    ConfidenceTrace trace;
    for (int t : t_grid) {
        if (t < 0 || t > sched.max_timestep)
            throw std::invalid_argument("confidence_curve: t outside [0, T]");
        const Tensor eps = Tensor::gaussian(x.shape(), rng);
        const Tensor x_t = q_sample(sched, x, t, eps);

        std::optional<int> expert;
        if (use_experts)
            expert = expert_for_timestep(bank.expert_count(), bank.max_timestep(),
                                         std::max(t, 1));
        Tensor logits;
        if (time_conditioned) {
            const std::vector<int> ts(batch, t);
            logits = bank.forward(x_t, expert, ts);
        } else {
            logits = bank.forward(x_t, expert);
        }

        const std::size_t k = logits.shape()[1];
        double acc = 0.0;
        for (std::size_t b = 0; b < batch; ++b) {
            double mx = logits.at(b * k);
            for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, logits.at(b * k + c));
            double z = 0.0;
            for (std::size_t c = 0; c < k; ++c) z += std::exp(logits.at(b * k + c) - mx);
            if (kind == ConfidenceKind::kTrueClass) {
                acc += std::exp(logits.at(b * k + std::size_t(y[b])) - mx) / z;
            } else {
                double top = 0.0;
                for (std::size_t c = 0; c < k; ++c)
                    top = std::max(top, std::exp(logits.at(b * k + c) - mx));
                acc += top / z;
            }
        }
        trace.rows.push_back({t, expert.value_or(-1), acc / double(batch)});
    }
    return trace;
}

void write_confidence_csv(const std::filesystem::path& path, const ConfidenceTrace& trace) {
    CsvWriter csv(path, {"t", "expert", "confidence"});
    for (const ConfidenceTrace::Row& row : trace.rows)
        csv.append({double(row.t), double(row.expert), row.confidence});
}

void write_metric_report(const std::filesystem::path& path, const MetricReport& report) {
    nlohmann::json j;
    j["format_version"] = 1;
    j["frechet"] = report.frechet;
    j["accuracy"] = report.accuracy;
    j["per_class_frechet"] = report.per_class_frechet;
    j["per_class_count"] = report.per_class_count;
    j["guidance_mode"] = report.guidance_mode;
    j["expert_count"] = report.expert_count;
    j["scale"] = report.scale;
    j["sampler"] = report.sampler;
    j["seed"] = report.seed;
    j["trace_path"] = report.trace_path;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("write_metric_report: cannot open " + path.string());
    out << j.dump(2) << "\n";
}

double ks_test_pvalue(std::vector<double> a, std::vector<double> b) {
    if (a.empty() || b.empty())
        throw std::invalid_argument("ks_test_pvalue: empty sample set");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const double na = double(a.size()), nb = double(b.size());
    double d = 0.0;
    std::size_t ia = 0, ib = 0;
    while (ia < a.size() && ib < b.size()) {
        const double xa = a[ia], xb = b[ib];
        if (xa <= xb) ++ia;
        if (xb <= xa) ++ib;
        d = std::max(d, std::abs(double(ia) / na - double(ib) / nb));
    }
    const double ne = std::sqrt(na * nb / (na + nb));
    const double lambda = (ne + 0.12 + 0.11 / ne) * d;
    // Asymptotic Kolmogorov tail sum.
    double p = 0.0;
    double sign = 1.0;
    for (int j = 1; j <= 100; ++j) {
        const double term = std::exp(-2.0 * double(j) * double(j) * lambda * lambda);
        p += 2.0 * sign * term;
        if (term < 1e-12) break;
        sign = -sign;
    }
    return std::clamp(p, 0.0, 1.0);
}

}  // namespace gdl
