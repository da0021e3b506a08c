// SPDX-License-Identifier: Apache-2.0
#include "gdl/nets.hpp"

#include <cmath>
#include <stdexcept>

#include "gdl/rng.hpp"

namespace gdl {

namespace {

constexpr double kAdapterInitStd = 0.02;

void add_scaled_product_inplace(Tensor& weight, const Tensor& up, const Tensor& down,
                                double scale) {
    // weight (out,in) += scale * up (out,r) * down (r,in)
    const std::size_t out = weight.shape()[0], in = weight.shape()[1];
    const std::size_t r = down.shape()[0];
    double* wd = weight.mutable_data().data();
    for (std::size_t o = 0; o < out; ++o)
        for (std::size_t k = 0; k < r; ++k) {
            const double u = up.at(o * r + k) * scale;
            if (u == 0.0) continue;
            for (std::size_t i = 0; i < in; ++i) wd[o * in + i] += u * down.at(k * in + i);
        }
}

}  // namespace

void MlpSpec::validate() const {
    if (input_dim < 1 || output_dim < 1)
        throw std::invalid_argument("MlpSpec: input_dim and output_dim must be >= 1");
    for (std::size_t h : hidden_dims)
        if (h < 1) throw std::invalid_argument("MlpSpec: hidden dims must be >= 1");
    if (time_embed_dim % 2 != 0)
        throw std::invalid_argument("MlpSpec: time_embed_dim must be even");
}

Tensor time_embedding(int t, std::size_t dim, int max_timestep) {
    if (dim == 0 || dim % 2 != 0)
        throw std::invalid_argument("time_embedding: dim must be positive and even");
    if (t < 0 || t > max_timestep)
        throw std::invalid_argument("time_embedding: t outside [0, T]");
    Tensor out = Tensor::zeros({dim});
    double* d = out.mutable_data().data();
    for (std::size_t j = 0; j < dim / 2; ++j) {
        const double omega = std::pow(10000.0, -2.0 * double(j) / double(dim));
        d[2 * j] = std::sin(double(t) * omega);
        d[2 * j + 1] = std::cos(double(t) * omega);
    }
    return out;
}

Tensor time_embedding_rows(std::span<const int> ts, std::size_t dim, int max_timestep) {
    Tensor out = Tensor::zeros({ts.size(), dim});
    for (std::size_t r = 0; r < ts.size(); ++r) {
        const Tensor e = time_embedding(ts[r], dim, max_timestep);
        for (std::size_t c = 0; c < dim; ++c)
            out.mutable_data()[r * dim + c] = e.at(c);
    }
    return out;
}

Tensor run_mlp(const MlpSpec& spec, std::span<const MlpLayerView> layers, const Tensor& x) {
    if (x.rank() != 2 || x.shape()[1] != spec.first_layer_in())
        throw std::invalid_argument("run_mlp: input must be (batch, " +
                                    std::to_string(spec.first_layer_in()) + "), got " +
                                    shape_str(x.shape()));
    Tensor h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const MlpLayerView& lv = layers[i];
        Tensor y = linear(h, lv.weight, lv.bias);
        if (!lv.lora_down.empty_handle()) {
            const Tensor low = linear(linear(h, lv.lora_down, Tensor()), lv.lora_up, Tensor());
            y = add(y, affine(low, lv.lora_scale, 0.0));
        }
        if (!lv.gain.empty_handle()) y = layer_norm(y, lv.gain, lv.shift);
        const bool last = i + 1 == layers.size();
        if (!last)
            h = spec.nonlinearity == MlpSpec::Nonlinearity::kGelu ? gelu(y) : relu(y);
        else
            h = y;
    }
    return h;
}

Mlp::Mlp(MlpSpec spec, Rng& rng) : spec_(std::move(spec)) {
    spec_.validate();
    std::vector<std::size_t> dims;
    dims.push_back(spec_.first_layer_in());
    dims.insert(dims.end(), spec_.hidden_dims.begin(), spec_.hidden_dims.end());
    dims.push_back(spec_.output_dim);

    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        const std::size_t in = dims[i], out = dims[i + 1];
        Layer layer;
        layer.weight = Tensor::gaussian({out, in}, rng, std::sqrt(2.0 / double(in)));
        layer.bias = Tensor::zeros({out});
        const bool hidden = i + 2 < dims.size();
        if (hidden) {
            layer.gain = Tensor::full({out}, 1.0);
            layer.shift = Tensor::zeros({out});
        }
        layers_.push_back(std::move(layer));
    }
}

Mlp Mlp::from_layers(MlpSpec spec, std::vector<Layer> layers) {
    spec.validate();
    if (layers.size() != spec.hidden_dims.size() + 1)
        throw std::invalid_argument("Mlp::from_layers: layer count mismatch");
    return Mlp(std::move(spec), std::move(layers));
}

Mlp::Mlp(MlpSpec spec, std::vector<Layer> layers)
    : spec_(std::move(spec)), layers_(std::move(layers)) {}

Tensor Mlp::forward(const Tensor& x) const {
    if (spec_.time_embed_dim != 0)
        throw std::invalid_argument("Mlp::forward: time-conditioned model needs timesteps");
    std::vector<MlpLayerView> views;
    views.reserve(layers_.size());
    for (const Layer& l : layers_)
        views.push_back({l.weight, l.bias, l.gain, l.shift, Tensor(), Tensor(), 0.0});
    return run_mlp(spec_, views, x);
}

Tensor Mlp::forward(const Tensor& x, std::span<const int> ts, int max_timestep) const {
    if (spec_.time_embed_dim == 0)
        throw std::invalid_argument("Mlp::forward: model is not time-conditioned");
    if (x.rank() != 2 || x.shape()[0] != ts.size())
        throw std::invalid_argument("Mlp::forward: one timestep per input row required");
    const Tensor emb = time_embedding_rows(ts, spec_.time_embed_dim, max_timestep);
    const Tensor full = concat(x, emb);
    std::vector<MlpLayerView> views;
    views.reserve(layers_.size());
    for (const Layer& l : layers_)
        views.push_back({l.weight, l.bias, l.gain, l.shift, Tensor(), Tensor(), 0.0});
    return run_mlp(spec_, views, full);
}

std::vector<Tensor> Mlp::parameters() const {
    std::vector<Tensor> params;
    for (const Layer& l : layers_) {
        params.push_back(l.weight);
        params.push_back(l.bias);
        if (l.normed()) {
            params.push_back(l.gain);
            params.push_back(l.shift);
        }
    }
    return params;
}

std::size_t Mlp::parameter_count() const {
    std::size_t n = 0;
    for (const Tensor& p : parameters()) n += p.size();
    return n;
}

void Mlp::set_requires_grad(bool on) {
    for (Tensor p : parameters()) p.set_requires_grad(on);
}

Mlp Mlp::clone() const {
    std::vector<Layer> layers;
    for (const Layer& l : layers_) {
        Layer copy;
        copy.weight = l.weight.clone();
        copy.bias = l.bias.clone();
        if (l.normed()) {
            copy.gain = l.gain.clone();
            copy.shift = l.shift.clone();
        }
        layers.push_back(std::move(copy));
    }
    return Mlp(spec_, std::move(layers));
}

namespace {

void check_epsilon_spec(const MlpSpec& spec) {
    if (spec.output_dim != spec.input_dim)
        throw std::invalid_argument("EpsilonModel: output_dim must equal input_dim");
    if (spec.time_embed_dim == 0)
        throw std::invalid_argument("EpsilonModel: time conditioning required");
}

}  // namespace

EpsilonModel::EpsilonModel(MlpSpec spec, int max_timestep, Rng& rng)
    : net_(std::move(spec), rng), max_timestep_(max_timestep) {
    check_epsilon_spec(net_.spec());
}

EpsilonModel::EpsilonModel(Mlp net, int max_timestep)
    : net_(std::move(net)), max_timestep_(max_timestep) {
    check_epsilon_spec(net_.spec());
}

Tensor EpsilonModel::predict(const Tensor& x, int t) const {
    const std::vector<int> ts(x.shape()[0], t);
    return net_.forward(x, ts, max_timestep_);
}

Tensor EpsilonModel::predict_rows(const Tensor& x, std::span<const int> ts) const {
    return net_.forward(x, ts, max_timestep_);
}

std::vector<Tensor> LoraAdapter::parameters() const {
    std::vector<Tensor> params;
    for (const LayerAdapter& l : layers) {
        if (!l.down.empty_handle()) {
            params.push_back(l.down);
            params.push_back(l.up);
        }
        params.push_back(l.bias);
        if (!l.gain.empty_handle()) {
            params.push_back(l.gain);
            params.push_back(l.shift);
        }
    }
    return params;
}

std::size_t LoraAdapter::parameter_count() const {
    std::size_t n = 0;
    for (const Tensor& p : parameters()) n += p.size();
    return n;
}

ExpertBank::ExpertBank(Mlp backbone, int expert_count, int max_timestep, std::size_t rank,
                       double alpha, Rng& rng)
    : backbone_(std::move(backbone)), expert_count_(expert_count),
      max_timestep_(max_timestep) {
    if (expert_count_ < 1 || expert_count_ > max_timestep_)
        throw std::invalid_argument("ExpertBank: need 1 <= expert_count <= max_timestep");
    for (int n = 0; n < expert_count_; ++n) {
        LoraAdapter adapter;
        adapter.rank = rank;
        adapter.alpha = alpha;
        for (std::size_t i = 0; i < backbone_.layer_count(); ++i) {
            const Mlp::Layer& l = backbone_.layer(i);
            LoraAdapter::LayerAdapter la;
            if (rank > 0) {
                const std::size_t out = l.weight.shape()[0], in = l.weight.shape()[1];
                la.down = Tensor::gaussian({rank, in}, rng, kAdapterInitStd);
                la.up = Tensor::zeros({out, rank});  // zero product at init
            }
            la.bias = l.bias.clone();
            if (l.normed()) {
                la.gain = l.gain.clone();
                la.shift = l.shift.clone();
            }
            adapter.layers.push_back(std::move(la));
        }
        adapters_.push_back(std::move(adapter));
    }
}

ExpertBank::ExpertBank(Mlp backbone, int expert_count, int max_timestep,
                       std::vector<LoraAdapter> adapters)
    : backbone_(std::move(backbone)), adapters_(std::move(adapters)),
      expert_count_(expert_count), max_timestep_(max_timestep) {
    if (expert_count_ < 1 || adapters_.size() != std::size_t(expert_count_))
        throw std::invalid_argument("ExpertBank: adapter count mismatch");
}

ExpertBank::ExpertBank(ExpertBank&& other) noexcept
    : backbone_(std::move(other.backbone_)), adapters_(std::move(other.adapters_)),
      expert_count_(other.expert_count_), max_timestep_(other.max_timestep_),
      merged_(other.merged_), saved_(std::move(other.saved_)),
      eval_count_(other.eval_count_.load()) {}

ExpertBank& ExpertBank::operator=(ExpertBank&& other) noexcept {
    backbone_ = std::move(other.backbone_);
    adapters_ = std::move(other.adapters_);
    expert_count_ = other.expert_count_;
    max_timestep_ = other.max_timestep_;
    merged_ = other.merged_;
    saved_ = std::move(other.saved_);
    eval_count_.store(other.eval_count_.load());
    return *this;
}

LoraAdapter& ExpertBank::adapter(int expert) {
    if (expert < 1 || expert > expert_count_)
        throw std::invalid_argument("ExpertBank: expert index outside [1, N]");
    return adapters_[std::size_t(expert) - 1];
}

const LoraAdapter& ExpertBank::adapter(int expert) const {
    return const_cast<ExpertBank*>(this)->adapter(expert);
}

std::vector<MlpLayerView> ExpertBank::layer_views(std::optional<int> expert) const {
    std::vector<MlpLayerView> views;
    views.reserve(backbone_.layer_count());
    if (!expert.has_value() || merged_ == expert) {
        if (!expert.has_value() && merged_.has_value())
            throw std::logic_error(
                "ExpertBank: off-the-shelf forward requested while an adapter is merged");
        for (std::size_t i = 0; i < backbone_.layer_count(); ++i) {
            const Mlp::Layer& l = backbone_.layer(i);
            views.push_back({l.weight, l.bias, l.gain, l.shift, Tensor(), Tensor(), 0.0});
        }
        return views;
    }
    if (merged_.has_value())
        throw std::logic_error("ExpertBank: expert " + std::to_string(*expert) +
                               " requested while expert " + std::to_string(*merged_) +
                               " is merged");
    const LoraAdapter& a = adapter(*expert);
    for (std::size_t i = 0; i < backbone_.layer_count(); ++i) {
        const Mlp::Layer& l = backbone_.layer(i);
        const LoraAdapter::LayerAdapter& la = a.layers[i];
        views.push_back({l.weight, la.bias, la.gain, la.shift, la.down, la.up, a.scale()});
    }
    return views;
}

Tensor ExpertBank::forward(const Tensor& x, std::optional<int> expert) const {
    if (backbone_.spec().time_embed_dim != 0)
        throw std::invalid_argument("ExpertBank: time-conditioned backbone needs timesteps");
    eval_count_.fetch_add(1, std::memory_order_relaxed);
    return run_mlp(backbone_.spec(), layer_views(expert), x);
}

Tensor ExpertBank::forward(const Tensor& x, std::optional<int> expert,
                           std::span<const int> ts) const {
    const MlpSpec& spec = backbone_.spec();
    if (spec.time_embed_dim == 0)
        throw std::invalid_argument("ExpertBank: backbone is not time-conditioned");
    if (x.rank() != 2 || x.shape()[0] != ts.size())
        throw std::invalid_argument("ExpertBank: one timestep per input row required");
    eval_count_.fetch_add(1, std::memory_order_relaxed);
    const Tensor emb = time_embedding_rows(ts, spec.time_embed_dim, max_timestep_);
    return run_mlp(spec, layer_views(expert), concat(x, emb));
}

void ExpertBank::merge(int expert) {
    if (merged_.has_value())
        throw std::logic_error("ExpertBank::merge: an adapter is already merged");
    if (GradTape::active() != nullptr)
        throw std::logic_error("ExpertBank::merge: forbidden while a tape is recording");
    const LoraAdapter& a = adapter(expert);

    saved_.clear();
    for (std::size_t i = 0; i < backbone_.layer_count(); ++i) {
        Mlp::Layer& l = backbone_.layer(i);
        const LoraAdapter::LayerAdapter& la = a.layers[i];
        SavedLayer saved;
        saved.weight.assign(l.weight.data().begin(), l.weight.data().end());
        saved.bias.assign(l.bias.data().begin(), l.bias.data().end());
        if (l.normed()) {
            saved.gain.assign(l.gain.data().begin(), l.gain.data().end());
            saved.shift.assign(l.shift.data().begin(), l.shift.data().end());
        }
        saved_.push_back(std::move(saved));

        if (a.rank > 0) add_scaled_product_inplace(l.weight, la.up, la.down, a.scale());
        std::copy(la.bias.data().begin(), la.bias.data().end(),
                  l.bias.mutable_data().begin());
        if (l.normed()) {
            std::copy(la.gain.data().begin(), la.gain.data().end(),
                      l.gain.mutable_data().begin());
            std::copy(la.shift.data().begin(), la.shift.data().end(),
                      l.shift.mutable_data().begin());
        }
    }
    merged_ = expert;
}

void ExpertBank::unmerge() {
    if (!merged_.has_value())
        throw std::logic_error("ExpertBank::unmerge: no adapter is merged");
    if (GradTape::active() != nullptr)
        throw std::logic_error("ExpertBank::unmerge: forbidden while a tape is recording");
    for (std::size_t i = 0; i < backbone_.layer_count(); ++i) {
        Mlp::Layer& l = backbone_.layer(i);
        const SavedLayer& saved = saved_[i];
        std::copy(saved.weight.begin(), saved.weight.end(),
                  l.weight.mutable_data().begin());
        std::copy(saved.bias.begin(), saved.bias.end(), l.bias.mutable_data().begin());
        if (l.normed()) {
            std::copy(saved.gain.begin(), saved.gain.end(), l.gain.mutable_data().begin());
            std::copy(saved.shift.begin(), saved.shift.end(),
                      l.shift.mutable_data().begin());
        }
    }
    saved_.clear();
    merged_.reset();
}

ExpertBank::ParamCounts ExpertBank::trainable_parameter_count() const {
    ParamCounts counts;
    counts.backbone = backbone_.parameter_count();
    counts.per_expert = adapters_.empty() ? 0 : adapters_.front().parameter_count();
    return counts;
}

}  // namespace gdl
