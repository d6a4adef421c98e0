#pragma once

#include <functional>
#include <map>
#include <set>
#include <string>

#include "forge/autodiff.hpp"
#include "forge/rng.hpp"
#include "forge/tensor.hpp"

namespace forge::nn {

struct Parameter {
    Tensor value;
    Tensor grad;  // same shape as value, zeroed between optimizer steps
    Tensor m, v;  // Adam moments, allocated on first step
};

// Named parameter container. std::map keeps iteration order stable, which the
// optimizer relies on for bit-reproducible runs.
class ParamStore {
public:
    Parameter& add(const std::string& name, Tensor init);
    Parameter& at(const std::string& name);
    const Parameter& at(const std::string& name) const;
    bool has(const std::string& name) const { return params_.count(name) != 0; }

    std::vector<std::string> names() const;
    size_t size() const { return params_.size(); }
    int64_t total_elements() const;

    void zero_grads();
    ParamStore clone() const;

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

private:
    std::map<std::string, Parameter> params_;
};

// Per-forward bridge between a ParamStore and an autodiff graph. Each
// parameter gets one leaf node per graph so gradients accumulate correctly
// when a parameter is used several times. In frozen mode leaves carry no
// gradient (reward-model / reference-model use).
class ParamGraph {
public:
    explicit ParamGraph(ParamStore& store, bool frozen = false)
        : store_(&store), frozen_(frozen) {}

    ad::Var operator()(const std::string& name);

    // Adds node gradients into the store (+=, so micro-batches accumulate).
    void harvest_grads();

    ParamStore& store() { return *store_; }

private:
    ParamStore* store_;
    bool frozen_;
    std::map<std::string, ad::Var> cache_;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled
};

// AdamW over a ParamStore. `trainable` restricts updates; frozen parameters
// (value, moments) are untouched bit-for-bit.
class AdamW {
public:
    explicit AdamW(AdamConfig cfg) : cfg_(cfg) {}

    void step(ParamStore& store, double lr_scale = 1.0,
              const std::set<std::string>* trainable = nullptr);

    int64_t steps_taken() const { return t_; }

private:
    AdamConfig cfg_;
    int64_t t_ = 0;
};

double global_grad_norm(const ParamStore& store, const std::set<std::string>* trainable = nullptr);
void clip_grad_norm(ParamStore& store, double max_norm,
                    const std::set<std::string>* trainable = nullptr);

// Kaiming-style init for a kernel with the given fan-in.
Tensor he_init(Rng& rng, std::vector<int64_t> dims, int64_t fan_in);

// Linear layer helper: y = x W + b with params "<name>.w" (in, out), "<name>.b" (out).
ad::Var linear(ParamGraph& p, const std::string& name, const ad::Var& x);
void add_linear(ParamStore& store, Rng& rng, const std::string& name, int64_t in, int64_t out,
                double w_scale = 1.0);

}  // namespace forge::nn
