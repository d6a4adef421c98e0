#include "forge/nn.hpp"

#include <cmath>

namespace forge::nn {

Parameter& ParamStore::add(const std::string& name, Tensor init) {
    if (params_.count(name)) throw ContractViolation("ParamStore: duplicate parameter " + name);
    Parameter p;
    p.grad = Tensor::zeros(init.dims());
    p.value = std::move(init);
    return params_.emplace(name, std::move(p)).first->second;
}

Parameter& ParamStore::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractViolation("ParamStore: unknown parameter " + name);
    return it->second;
}

const Parameter& ParamStore::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractViolation("ParamStore: unknown parameter " + name);
    return it->second;
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [k, v] : params_) out.push_back(k);
    return out;
}

int64_t ParamStore::total_elements() const {
    int64_t n = 0;
    for (const auto& [k, v] : params_) n += v.value.numel();
    return n;
}

void ParamStore::zero_grads() {
    for (auto& [k, v] : params_) v.grad.fill_(0.0);
}

ParamStore ParamStore::clone() const {
    ParamStore out;
    for (const auto& [k, v] : params_) out.add(k, v.value);
    return out;
}

ad::Var ParamGraph::operator()(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    ad::Var v = frozen_ ? ad::constant(store_->at(name).value)
                        : ad::leaf(store_->at(name).value, true);
    cache_.emplace(name, v);
    return v;
}

void ParamGraph::harvest_grads() {
    if (frozen_) return;
    for (auto& [name, var] : cache_) {
        if (!var.grad().empty()) store_->at(name).grad.add_(var.grad());
    }
}

void AdamW::step(ParamStore& store, double lr_scale, const std::set<std::string>* trainable) {
    ++t_;
    double lr = cfg_.lr * lr_scale;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : store) {
        if (trainable && !trainable->count(name)) continue;
        if (p.m.empty()) {
            p.m = Tensor::zeros(p.value.dims());
            p.v = Tensor::zeros(p.value.dims());
        }
        for (int64_t i = 0; i < p.value.numel(); ++i) {
            double g = p.grad[i];
            p.m[i] = cfg_.beta1 * p.m[i] + (1.0 - cfg_.beta1) * g;
            p.v[i] = cfg_.beta2 * p.v[i] + (1.0 - cfg_.beta2) * g * g;
            double mhat = p.m[i] / bc1;
            double vhat = p.v[i] / bc2;
            if (cfg_.weight_decay != 0.0) p.value[i] -= lr * cfg_.weight_decay * p.value[i];
            p.value[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

double global_grad_norm(const ParamStore& store, const std::set<std::string>* trainable) {
    double acc = 0.0;
    for (const auto& [name, p] : store) {
        if (trainable && !trainable->count(name)) continue;
        for (int64_t i = 0; i < p.grad.numel(); ++i) acc += p.grad[i] * p.grad[i];
    }
    return std::sqrt(acc);
}

void clip_grad_norm(ParamStore& store, double max_norm, const std::set<std::string>* trainable) {
    double norm = global_grad_norm(store, trainable);
    if (norm <= max_norm || norm == 0.0) return;
    double s = max_norm / norm;
    for (auto& [name, p] : store) {
        if (trainable && !trainable->count(name)) continue;
        p.grad.scale_(s);
    }
}

Tensor he_init(Rng& rng, std::vector<int64_t> dims, int64_t fan_in) {
    double sigma = std::sqrt(2.0 / static_cast<double>(std::max<int64_t>(fan_in, 1)));
    return rng.normal_tensor(std::move(dims), sigma);
}

void add_linear(ParamStore& store, Rng& rng, const std::string& name, int64_t in, int64_t out,
                double w_scale) {
    Tensor w = he_init(rng, {in, out}, in);
    w.scale_(w_scale);
    store.add(name + ".w", std::move(w));
    store.add(name + ".b", Tensor::zeros({out}));
}

ad::Var linear(ParamGraph& p, const std::string& name, const ad::Var& x) {
    return ad::add_rowvec(ad::matmul(x, p(name + ".w")), p(name + ".b"));
}

}  // namespace forge::nn
