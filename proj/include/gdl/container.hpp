// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "gdl/nets.hpp"
#include "gdl/tensor.hpp"

namespace gdl {

// Tensor container: a versioned UTF-8 manifest followed by the raw
// little-endian f64 payloads concatenated in manifest order.
//
//   gdl-container 1
//   tensor <name> f64 <rank> <dim...>
//   ...
//   data
//   <payload bytes>
//
// Names are non-empty and free of whitespace. Readers reject unknown
// format versions.
struct NamedTensor {
    std::string name;
    Tensor tensor;
};

void write_container(const std::filesystem::path& path,
                     const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_container(const std::filesystem::path& path);

// Model checkpoints layered on the container. Hyperparameters travel as
// meta.* tensors so a checkpoint is self-describing.
void save_mlp(const std::filesystem::path& path, const Mlp& mlp);
Mlp load_mlp(const std::filesystem::path& path);

void save_epsilon_model(const std::filesystem::path& path, const EpsilonModel& model);
EpsilonModel load_epsilon_model(const std::filesystem::path& path);

void save_expert_bank(const std::filesystem::path& path, const ExpertBank& bank);
ExpertBank load_expert_bank(const std::filesystem::path& path);

// Datasets: tensor "x0" of shape (count, dim), optional labels "y" (count,).
struct Dataset {
    Tensor x0;
    std::vector<int> y;
    bool has_labels = false;
};

void save_dataset(const std::filesystem::path& path, const Tensor& x0,
                  const std::vector<int>* labels = nullptr);
Dataset load_dataset(const std::filesystem::path& path);

// Minimal CSV writer: a header row then numeric rows.
class CsvWriter {
  public:
    CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& columns);
    void append(const std::vector<double>& row);

  private:
    std::ofstream out_;
    std::size_t columns_ = 0;
};

}  // namespace gdl
