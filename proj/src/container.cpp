// SPDX-License-Identifier: Apache-2.0
#include "gdl/container.hpp"

#include <bit>
#include <cctype>
#include <cstring>
#include <map>
#include <sstream>
#include <stdexcept>

namespace gdl {

namespace {

constexpr const char* kMagic = "gdl-container";
constexpr int kVersion = 1;

void validate_name(const std::string& name) {
    if (name.empty()) throw std::invalid_argument("container: empty tensor name");
    for (char c : name)
        if (std::isspace(static_cast<unsigned char>(c)))
            throw std::invalid_argument("container: tensor name '" + name +
                                        "' contains whitespace");
}

std::uint64_t to_le_bits(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    if constexpr (std::endian::native == std::endian::big) {
        std::uint64_t swapped = 0;
        for (int i = 0; i < 8; ++i)
            swapped |= ((bits >> (8 * i)) & 0xFFu) << (8 * (7 - i));
        bits = swapped;
    }
    return bits;
}

double from_le_bits(std::uint64_t bits) {
    if constexpr (std::endian::native == std::endian::big) {
        std::uint64_t swapped = 0;
        for (int i = 0; i < 8; ++i)
            swapped |= ((bits >> (8 * i)) & 0xFFu) << (8 * (7 - i));
        bits = swapped;
    }
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
}

Tensor meta_tensor(std::initializer_list<double> values) {
    return Tensor::from_data(std::vector<double>(values), {values.size()});
}

class TensorMap {
  public:
    explicit TensorMap(std::vector<NamedTensor> tensors) {
        for (auto& nt : tensors) map_.emplace(nt.name, nt.tensor);
    }
    const Tensor& get(const std::string& name) const {
        auto it = map_.find(name);
        if (it == map_.end())
            throw std::runtime_error("container: missing tensor '" + name + "'");
        return it->second;
    }
    bool contains(const std::string& name) const { return map_.count(name) > 0; }

  private:
    std::map<std::string, Tensor> map_;
};

std::vector<NamedTensor> mlp_tensors(const Mlp& mlp, const std::string& prefix) {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < mlp.layer_count(); ++i) {
        const Mlp::Layer& l = mlp.layer(i);
        const std::string base = prefix + "layer" + std::to_string(i) + ".";
        out.push_back({base + "weight", l.weight});
        out.push_back({base + "bias", l.bias});
        if (l.normed()) {
            out.push_back({base + "gain", l.gain});
            out.push_back({base + "shift", l.shift});
        }
    }
    return out;
}

NamedTensor mlp_meta(const Mlp& mlp, const std::string& prefix) {
    const MlpSpec& s = mlp.spec();
    std::vector<double> meta = {double(s.input_dim), double(s.output_dim),
                                double(s.time_embed_dim),
                                s.nonlinearity == MlpSpec::Nonlinearity::kGelu ? 1.0 : 0.0,
                                double(s.hidden_dims.size())};
    for (std::size_t h : s.hidden_dims) meta.push_back(double(h));
    return {prefix + "meta.arch", Tensor::from_data(meta, {meta.size()})};
}

Mlp mlp_from_map(const TensorMap& map, const std::string& prefix) {
    const Tensor& meta = map.get(prefix + "meta.arch");
    if (meta.size() < 5) throw std::runtime_error("container: truncated meta.arch");
    MlpSpec spec;
    spec.input_dim = std::size_t(meta.at(0));
    spec.output_dim = std::size_t(meta.at(1));
    spec.time_embed_dim = std::size_t(meta.at(2));
    spec.nonlinearity = meta.at(3) == 1.0 ? MlpSpec::Nonlinearity::kGelu
                                          : MlpSpec::Nonlinearity::kRelu;
    const std::size_t n_hidden = std::size_t(meta.at(4));
    if (meta.size() != 5 + n_hidden)
        throw std::runtime_error("container: meta.arch length mismatch");
    for (std::size_t i = 0; i < n_hidden; ++i)
        spec.hidden_dims.push_back(std::size_t(meta.at(5 + i)));

    std::vector<Mlp::Layer> layers;
    for (std::size_t i = 0; i <= n_hidden; ++i) {
        const std::string base = prefix + "layer" + std::to_string(i) + ".";
        Mlp::Layer layer;
        layer.weight = map.get(base + "weight").clone();
        layer.bias = map.get(base + "bias").clone();
        if (map.contains(base + "gain")) {
            layer.gain = map.get(base + "gain").clone();
            layer.shift = map.get(base + "shift").clone();
        }
        layers.push_back(std::move(layer));
    }
    return Mlp::from_layers(std::move(spec), std::move(layers));
}

}  // namespace

void write_container(const std::filesystem::path& path,
                     const std::vector<NamedTensor>& tensors) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("container: cannot open '" + path.string() +
                                       "' for writing");
    out << kMagic << " " << kVersion << "\n";
    for (const NamedTensor& nt : tensors) {
        validate_name(nt.name);
        out << "tensor " << nt.name << " f64 " << nt.tensor.rank();
        for (std::size_t d : nt.tensor.shape()) out << " " << d;
        out << "\n";
    }
    out << "data\n";
    for (const NamedTensor& nt : tensors)
        for (std::size_t i = 0; i < nt.tensor.size(); ++i) {
            const std::uint64_t bits = to_le_bits(nt.tensor.at(i));
            out.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
        }
    if (!out) throw std::runtime_error("container: write failed for '" + path.string() + "'");
}

std::vector<NamedTensor> read_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("container: cannot open '" + path.string() + "'");

    std::string line;
    if (!std::getline(in, line))
        throw std::runtime_error("container: empty file '" + path.string() + "'");
    {
        std::istringstream header(line);
        std::string magic;
        int version = -1;
        header >> magic >> version;
        if (magic != kMagic)
            throw std::runtime_error("container: bad magic in '" + path.string() + "'");
        if (version != kVersion)
            throw std::runtime_error("container: unsupported format version " +
                                     std::to_string(version));
    }

    struct Entry {
        std::string name;
        Shape shape;
    };
    std::vector<Entry> entries;
    while (std::getline(in, line)) {
        if (line == "data") break;
        std::istringstream row(line);
        std::string tag, name, dtype;
        std::size_t rank = 0;
        row >> tag >> name >> dtype >> rank;
        if (tag != "tensor" || row.fail())
            throw std::runtime_error("container: malformed manifest line '" + line + "'");
        if (dtype != "f64")
            throw std::runtime_error("container: unsupported dtype '" + dtype + "'");
        Entry e;
        e.name = name;
        for (std::size_t i = 0; i < rank; ++i) {
            std::size_t d = 0;
            row >> d;
            if (row.fail())
                throw std::runtime_error("container: truncated shape in '" + line + "'");
            e.shape.push_back(d);
        }
        entries.push_back(std::move(e));
    }
    if (line != "data")
        throw std::runtime_error("container: missing data section in '" + path.string() + "'");

    std::vector<NamedTensor> tensors;
    for (Entry& e : entries) {
        std::vector<double> data(shape_size(e.shape));
        for (double& v : data) {
            std::uint64_t bits = 0;
            in.read(reinterpret_cast<char*>(&bits), sizeof(bits));
            if (!in)
                throw std::runtime_error("container: truncated payload in '" +
                                         path.string() + "'");
            v = from_le_bits(bits);
        }
        tensors.push_back({std::move(e.name),
                           Tensor::from_data(std::move(data), std::move(e.shape))});
    }
    return tensors;
}

void save_mlp(const std::filesystem::path& path, const Mlp& mlp) {
    std::vector<NamedTensor> tensors = {mlp_meta(mlp, "")};
    auto layers = mlp_tensors(mlp, "");
    tensors.insert(tensors.end(), layers.begin(), layers.end());
    write_container(path, tensors);
}

Mlp load_mlp(const std::filesystem::path& path) {
    TensorMap map(read_container(path));
    return mlp_from_map(map, "");
}

void save_epsilon_model(const std::filesystem::path& path, const EpsilonModel& model) {
    std::vector<NamedTensor> tensors = {
        {"meta.max_timestep", meta_tensor({double(model.max_timestep())})},
        mlp_meta(model.net(), "")};
    auto layers = mlp_tensors(model.net(), "");
    tensors.insert(tensors.end(), layers.begin(), layers.end());
    write_container(path, tensors);
}

EpsilonModel load_epsilon_model(const std::filesystem::path& path) {
    TensorMap map(read_container(path));
    const int max_timestep = int(map.get("meta.max_timestep").at(0));
    return EpsilonModel(mlp_from_map(map, ""), max_timestep);
}

void save_expert_bank(const std::filesystem::path& path, const ExpertBank& bank) {
    if (bank.merged().has_value())
        throw std::logic_error("save_expert_bank: unmerge before checkpointing");
    std::vector<NamedTensor> tensors = {
        {"meta.bank",
         meta_tensor({double(bank.expert_count()), double(bank.max_timestep()),
                      double(bank.adapter(1).rank), bank.adapter(1).alpha})},
        mlp_meta(bank.backbone(), "backbone.")};
    auto backbone = mlp_tensors(bank.backbone(), "backbone.");
    tensors.insert(tensors.end(), backbone.begin(), backbone.end());

    for (int n = 1; n <= bank.expert_count(); ++n) {
        const LoraAdapter& a = bank.adapter(n);
        for (std::size_t i = 0; i < a.layers.size(); ++i) {
            const auto& la = a.layers[i];
            const std::string base =
                "expert" + std::to_string(n) + ".layer" + std::to_string(i) + ".";
            if (!la.down.empty_handle()) {
                tensors.push_back({base + "lora_down", la.down});
                tensors.push_back({base + "lora_up", la.up});
            }
            tensors.push_back({base + "bias", la.bias});
            if (!la.gain.empty_handle()) {
                tensors.push_back({base + "gain", la.gain});
                tensors.push_back({base + "shift", la.shift});
            }
        }
    }
    write_container(path, tensors);
}

ExpertBank load_expert_bank(const std::filesystem::path& path) {
    TensorMap map(read_container(path));
    const Tensor& meta = map.get("meta.bank");
    if (meta.size() != 4) throw std::runtime_error("container: bad meta.bank");
    const int expert_count = int(meta.at(0));
    const int max_timestep = int(meta.at(1));
    const std::size_t rank = std::size_t(meta.at(2));
    const double alpha = meta.at(3);

    Mlp backbone = mlp_from_map(map, "backbone.");
    std::vector<LoraAdapter> adapters;
    for (int n = 1; n <= expert_count; ++n) {
        LoraAdapter a;
        a.rank = rank;
        a.alpha = alpha;
        for (std::size_t i = 0; i < backbone.layer_count(); ++i) {
            const std::string base =
                "expert" + std::to_string(n) + ".layer" + std::to_string(i) + ".";
            LoraAdapter::LayerAdapter la;
            if (rank > 0) {
                la.down = map.get(base + "lora_down").clone();
                la.up = map.get(base + "lora_up").clone();
            }
            la.bias = map.get(base + "bias").clone();
            if (map.contains(base + "gain")) {
                la.gain = map.get(base + "gain").clone();
                la.shift = map.get(base + "shift").clone();
            }
            a.layers.push_back(std::move(la));
        }
        adapters.push_back(std::move(a));
    }
    return ExpertBank(std::move(backbone), expert_count, max_timestep, std::move(adapters));
}

void save_dataset(const std::filesystem::path& path, const Tensor& x0,
                  const std::vector<int>* labels) {
    if (x0.rank() != 2)
        throw std::invalid_argument("save_dataset: x0 must be (count, dim)");
    std::vector<NamedTensor> tensors = {{"x0", x0}};
    if (labels != nullptr) {
        if (labels->size() != x0.shape()[0])
            throw std::invalid_argument("save_dataset: label count mismatch");
        std::vector<double> y(labels->begin(), labels->end());
        tensors.push_back({"y", Tensor::from_data(std::move(y), {labels->size()})});
    }
    write_container(path, tensors);
}

Dataset load_dataset(const std::filesystem::path& path) {
    TensorMap map(read_container(path));
    Dataset ds;
    ds.x0 = map.get("x0").clone();
    if (ds.x0.rank() != 2) throw std::runtime_error("dataset: x0 must be (count, dim)");
    if (map.contains("y")) {
        const Tensor& y = map.get("y");
        if (y.size() != ds.x0.shape()[0])
            throw std::runtime_error("dataset: label count mismatch");
        ds.has_labels = true;
        for (std::size_t i = 0; i < y.size(); ++i) ds.y.push_back(int(y.at(i)));
    }
    return ds;
}

CsvWriter::CsvWriter(const std::filesystem::path& path,
                     const std::vector<std::string>& columns)
    : columns_(columns.size()) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    out_.open(path, std::ios::trunc);
    if (!out_) throw std::runtime_error("csv: cannot open '" + path.string() + "'");
    for (std::size_t i = 0; i < columns.size(); ++i)
        out_ << (i ? "," : "") << columns[i];
    out_ << "\n";
}

void CsvWriter::append(const std::vector<double>& row) {
    if (row.size() != columns_)
        throw std::invalid_argument("csv: row width " + std::to_string(row.size()) +
                                    " != header width " + std::to_string(columns_));
    out_.precision(17);
    for (std::size_t i = 0; i < row.size(); ++i) out_ << (i ? "," : "") << row[i];
    out_ << "\n";
}

}  // namespace gdl
