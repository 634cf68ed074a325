#pragma once

#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "polyseg/tensor.hpp"

namespace polyseg {

// Ordered, named set of model tensors: conv kernels, biases, batch-norm
// affine parameters and running statistics. Order is the registration order
// and is part of the checkpoint contract.
struct ParamEntry {
    std::string name;
    Tensor4 tensor;
    bool trainable = true;
};

class ParamSet {
public:
    Tensor4 add(const std::string& name, Tensor4 t, bool trainable = true);
    Tensor4& get(const std::string& name);
    const Tensor4& get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::vector<ParamEntry>& entries() { return entries_; }
    const std::vector<ParamEntry>& entries() const { return entries_; }

    void zero_grad();

private:
    std::vector<ParamEntry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Samples from normal(0, sqrt(2/fan_in)); deterministic per seed.
Tensor4 kaiming_normal(Shape4 shape, int fan_in, std::uint64_t seed);

struct SgdConfig {
    real momentum = 0.99;
    real weight_decay = 5e-4;
};

// Classical momentum SGD with coupled weight decay:
//   v <- mu*v + (g + wd*w);  w <- w - lr*v
// Gradients are left untouched by step().
class SgdOptimizer {
public:
    SgdOptimizer(ParamSet& params, SgdConfig cfg);

    void step(real lr);
    void zero_grad() { params_->zero_grad(); }

    std::int64_t iteration() const { return iteration_; }
    void set_iteration(std::int64_t it) { iteration_ = it; }
    const SgdConfig& config() const { return cfg_; }

    // buffers parallel the trainable entries, by name
    std::vector<std::pair<std::string, Tensor4>>& buffers() { return buffers_; }
    const std::vector<std::pair<std::string, Tensor4>>& buffers() const { return buffers_; }

private:
    ParamSet* params_;
    SgdConfig cfg_;
    std::vector<std::pair<std::string, Tensor4>> buffers_;
    std::int64_t iteration_ = 0;
};

// Checkpoint files. Weights ("PUNW1\0"): u32 entry count, then per entry
// u32 name length, UTF-8 name, 4 x u32 shape, float32 payload. Optimizer
// state ("PUNS1\0"): u32 iteration, u32 entry count, same entry layout for
// the momentum buffers. Writes are atomic (temp file + rename).
void save_checkpoint(const ParamSet& params, const std::filesystem::path& path);
void load_checkpoint(ParamSet& params, const std::filesystem::path& path);
void save_optimizer_state(const SgdOptimizer& opt, const std::filesystem::path& path);
void load_optimizer_state(SgdOptimizer& opt, const std::filesystem::path& path);

}  // namespace polyseg
