// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gdl/tensor.hpp"

namespace gdl {

class Rng;

struct MlpSpec {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden_dims;
    std::size_t output_dim = 0;
    enum class Nonlinearity { kRelu, kGelu };
    Nonlinearity nonlinearity = Nonlinearity::kRelu;
    std::size_t time_embed_dim = 0;  // 0 = no timestep conditioning

    void validate() const;
    std::size_t first_layer_in() const { return input_dim + time_embed_dim; }
};

// Sinusoidal embedding [sin(t w_0), cos(t w_0), sin(t w_1), ...] with
// w_j = 10000^(-2j/dim).
Tensor time_embedding(int t, std::size_t dim, int max_timestep);
Tensor time_embedding_rows(std::span<const int> ts, std::size_t dim, int max_timestep);

// One linear layer as the forward pass consumes it. Hidden layers carry a
// normalization (per-feature gain/shift applied to the standardized
// activations); the output layer leaves gain/shift empty. The low-rank pair
// adds lora_scale * (x A^T) B^T to the linear output when present.
struct MlpLayerView {
    Tensor weight;  // (out, in)
    Tensor bias;    // (out,)
    Tensor gain;    // (out,) or empty
    Tensor shift;   // (out,) or empty
    Tensor lora_down;  // A: (rank, in) or empty
    Tensor lora_up;    // B: (out, rank) or empty
    double lora_scale = 0.0;
};

Tensor run_mlp(const MlpSpec& spec, std::span<const MlpLayerView> layers, const Tensor& x);

// Multilayer perceptron: linear -> norm -> nonlinearity per hidden layer,
// plain linear head. Hidden normalization keeps the trainable
// gain/shift set that experts later own.
class Mlp {
  public:
    struct Layer {
        Tensor weight;
        Tensor bias;
        Tensor gain;   // empty on the output layer
        Tensor shift;  // empty on the output layer
        bool normed() const { return !gain.empty_handle(); }
    };

    Mlp(MlpSpec spec, Rng& rng);
    static Mlp from_layers(MlpSpec spec, std::vector<Layer> layers);

    const MlpSpec& spec() const { return spec_; }
    std::size_t layer_count() const { return layers_.size(); }
    const Layer& layer(std::size_t i) const { return layers_[i]; }
    Layer& layer(std::size_t i) { return layers_[i]; }

    // x: (batch, input_dim). The time-conditioned overload appends the
    // per-row sinusoidal embedding before the first layer.
    Tensor forward(const Tensor& x) const;
    Tensor forward(const Tensor& x, std::span<const int> ts, int max_timestep) const;

    std::vector<Tensor> parameters() const;
    std::size_t parameter_count() const;
    void set_requires_grad(bool on);
    Mlp clone() const;  // deep copy of all parameter storage

  private:
    Mlp(MlpSpec spec, std::vector<Layer> layers);

    MlpSpec spec_;
    std::vector<Layer> layers_;
};

// Noise predictor interface used by the samplers; implemented by the MLP
// epsilon model and by analytic test oracles.
class NoisePredictor {
  public:
    virtual ~NoisePredictor() = default;
    virtual Tensor predict(const Tensor& x, int t) const = 0;
};

class EpsilonModel final : public NoisePredictor {
  public:
    EpsilonModel(MlpSpec spec, int max_timestep, Rng& rng);
    EpsilonModel(Mlp net, int max_timestep);

    Tensor predict(const Tensor& x, int t) const override;
    Tensor predict_rows(const Tensor& x, std::span<const int> ts) const;

    Mlp& net() { return net_; }
    const Mlp& net() const { return net_; }
    int max_timestep() const { return max_timestep_; }

  private:
    Mlp net_;
    int max_timestep_ = 0;
};

// Per-expert trainable parameters: a low-rank pair per linear layer plus
// private copies of every bias and normalization gain/shift.
struct LoraAdapter {
    struct LayerAdapter {
        Tensor down;   // A: (rank, in), Gaussian init
        Tensor up;     // B: (out, rank), zero init
        Tensor bias;   // copy of the backbone bias
        Tensor gain;   // copy, empty when the layer has no norm
        Tensor shift;  // copy, empty when the layer has no norm
    };
    std::vector<LayerAdapter> layers;
    std::size_t rank = 0;
    double alpha = 8.0;

    double scale() const { return rank == 0 ? 0.0 : alpha / double(rank); }
    std::vector<Tensor> parameters() const;
    std::size_t parameter_count() const;
};

// Frozen guidance backbone plus one adapter per expert. Expert n covers
// expert_range(N, T, n). merge() folds an adapter into the backbone weights
// so routed inference costs a plain forward pass; unmerge() restores the
// backbone bit-exactly.
class ExpertBank {
  public:
    ExpertBank(Mlp backbone, int expert_count, int max_timestep, std::size_t rank,
               double alpha, Rng& rng);
    ExpertBank(Mlp backbone, int expert_count, int max_timestep,
               std::vector<LoraAdapter> adapters);
    ExpertBank(ExpertBank&& other) noexcept;
    ExpertBank& operator=(ExpertBank&& other) noexcept;
    ExpertBank(const ExpertBank&) = delete;
    ExpertBank& operator=(const ExpertBank&) = delete;

    int expert_count() const { return expert_count_; }
    int max_timestep() const { return max_timestep_; }
    const Mlp& backbone() const { return backbone_; }
    Mlp& backbone() { return backbone_; }
    LoraAdapter& adapter(int expert);
    const LoraAdapter& adapter(int expert) const;

    // expert = nullopt evaluates the raw off-the-shelf backbone. ts is
    // required iff the backbone is time-conditioned.
    Tensor forward(const Tensor& x, std::optional<int> expert) const;
    Tensor forward(const Tensor& x, std::optional<int> expert,
                   std::span<const int> ts) const;

    void merge(int expert);
    void unmerge();
    std::optional<int> merged() const { return merged_; }

    std::uint64_t eval_count() const { return eval_count_.load(); }
    void reset_eval_count() { eval_count_.store(0); }

    struct ParamCounts {
        std::size_t per_expert = 0;
        std::size_t backbone = 0;
    };
    ParamCounts trainable_parameter_count() const;

  private:
    std::vector<MlpLayerView> layer_views(std::optional<int> expert) const;

    Mlp backbone_;
    std::vector<LoraAdapter> adapters_;
    int expert_count_ = 0;
    int max_timestep_ = 0;
    std::optional<int> merged_;
    struct SavedLayer {
        std::vector<double> weight, bias, gain, shift;
    };
    std::vector<SavedLayer> saved_;
    mutable std::atomic<std::uint64_t> eval_count_{0};
};

}  // namespace gdl
