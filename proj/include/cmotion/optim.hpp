#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cmotion/tensor.hpp"

namespace cmotion {

// Named parameter set with AdamW moments. Insertion order is the canonical
// order everywhere (optimizer sweep, checkpoints, checksums) so runs are
// bit-identical.
template <typename T>
struct ParamStore {
    struct Entry {
        std::string name;
        Tensor<T> tensor;
        std::vector<T> m, v;
    };
    std::vector<Entry> entries;
    std::map<std::string, size_t> index;
    int64_t step_count = 0;

    Tensor<T> add(const std::string& name, Tensor<T> init) {
        if (index.count(name)) tensor_error("ParamStore: duplicate parameter '" + name + "'");
        init.set_requires_grad(true);
        index[name] = entries.size();
        entries.push_back({name, init, {}, {}});
        return entries.back().tensor;
    }

    Tensor<T>& get(const std::string& name) {
        auto it = index.find(name);
        if (it == index.end()) tensor_error("ParamStore: unknown parameter '" + name + "'");
        return entries[it->second].tensor;
    }
    const Tensor<T>& get(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end()) tensor_error("ParamStore: unknown parameter '" + name + "'");
        return entries[it->second].tensor;
    }
    bool has(const std::string& name) const { return index.count(name) != 0; }

    int64_t total_elems() const {
        int64_t n = 0;
        for (const auto& e : entries) n += e.tensor.numel();
        return n;
    }

    void zero_grads() {
        for (auto& e : entries) e.tensor.zero_grad();
    }

    void set_requires_grad(bool rg) {
        for (auto& e : entries) e.tensor.set_requires_grad(rg);
    }

    // Any populated gradient means training leaked into this store.
    bool any_grad() const {
        for (const auto& e : entries)
            if (e.tensor.has_grad()) return true;
        return false;
    }
};

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// One decoupled-weight-decay Adam step with bias-corrected moments.
// Parameters with no populated gradient are skipped; gradients are consumed.
template <typename T>
void adamw_step(ParamStore<T>& params, const AdamWConfig& cfg) {
    params.step_count += 1;
    double t = static_cast<double>(params.step_count);
    double bc1 = 1.0 - std::pow(cfg.beta1, t);
    double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (auto& e : params.entries) {
        if (!e.tensor.has_grad()) continue;
        const auto& g = e.tensor.grad();
        for (size_t i = 0; i < g.size(); ++i)
            if (!std::isfinite(static_cast<double>(g[i])))
                tensor_error("adamw_step: non-finite gradient in parameter '" + e.name + "'");
        auto& p = e.tensor.mutable_data();
        if (e.m.empty()) {
            e.m.assign(p.size(), T(0));
            e.v.assign(p.size(), T(0));
        }
        for (size_t i = 0; i < p.size(); ++i) {
            e.m[i] = static_cast<T>(cfg.beta1) * e.m[i] + static_cast<T>(1.0 - cfg.beta1) * g[i];
            e.v[i] = static_cast<T>(cfg.beta2) * e.v[i] + static_cast<T>(1.0 - cfg.beta2) * g[i] * g[i];
            double mh = static_cast<double>(e.m[i]) / bc1;
            double vh = static_cast<double>(e.v[i]) / bc2;
            double upd = cfg.lr * (mh / (std::sqrt(vh) + cfg.eps)) + cfg.lr * cfg.weight_decay * static_cast<double>(p[i]);
            p[i] -= static_cast<T>(upd);
        }
        e.tensor.zero_grad();
    }
}

// Linear warmup to peak, then cosine decay to zero at total_steps.
inline double lr_schedule(int64_t step, int64_t warmup_steps, int64_t total_steps, double peak_lr) {
    if (total_steps <= warmup_steps) tensor_error("lr_schedule: total_steps must exceed warmup_steps");
    if (step < 0 || step > total_steps) tensor_error("lr_schedule: step " + std::to_string(step) + " outside [0, total]");
    if (step <= warmup_steps) {
        if (warmup_steps == 0) return peak_lr;
        return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    }
    double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
    return peak_lr * 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
}

// target <- mu * target + (1 - mu) * online, outside the graph.
template <typename T>
void ema_update(ParamStore<T>& target, const ParamStore<T>& online, double mu) {
    if (target.entries.size() != online.entries.size()) tensor_error("ema_update: parameter sets differ in size");
    for (size_t i = 0; i < target.entries.size(); ++i) {
        auto& te = target.entries[i];
        const auto& oe = online.entries[i];
        if (te.name != oe.name || te.tensor.shape() != oe.tensor.shape())
            tensor_error("ema_update: mismatched parameter '" + te.name + "' vs '" + oe.name + "'");
        auto& tv = te.tensor.mutable_data();
        const auto& ov = oe.tensor.data();
        for (size_t j = 0; j < tv.size(); ++j)
            tv[j] = static_cast<T>(mu) * tv[j] + static_cast<T>(1.0 - mu) * ov[j];
    }
}

template <typename T>
void copy_params(ParamStore<T>& dst, const ParamStore<T>& src) {
    if (dst.entries.size() != src.entries.size()) tensor_error("copy_params: parameter sets differ in size");
    for (size_t i = 0; i < dst.entries.size(); ++i) {
        if (dst.entries[i].name != src.entries[i].name) tensor_error("copy_params: name mismatch at " + std::to_string(i));
        dst.entries[i].tensor.mutable_data() = src.entries[i].tensor.data();
    }
}

// Max over parameter elements of |analytic - numeric| / max(|a|, |n|, 1e-8),
// central differences. loss_fn must be a pure function of the store contents.
template <typename T>
double grad_check(ParamStore<T>& params, const std::function<Tensor<T>()>& loss_fn, double h = 1e-5) {
    Tensor<T> loss = loss_fn();
    params.zero_grads();
    backward(loss);
    std::vector<std::vector<T>> analytic;
    for (auto& e : params.entries) {
        if (e.tensor.has_grad())
            analytic.push_back(e.tensor.grad());
        else
            analytic.push_back(std::vector<T>(static_cast<size_t>(e.tensor.numel()), T(0)));
    }
    params.zero_grads();

    double worst = 0.0;
    for (size_t pi = 0; pi < params.entries.size(); ++pi) {
        auto& vals = params.entries[pi].tensor.mutable_data();
        for (size_t i = 0; i < vals.size(); ++i) {
            T keep = vals[i];
            vals[i] = keep + static_cast<T>(h);
            double fp = static_cast<double>(loss_fn().item());
            vals[i] = keep - static_cast<T>(h);
            double fm = static_cast<double>(loss_fn().item());
            vals[i] = keep;
            double numeric = (fp - fm) / (2.0 * h);
            double a = static_cast<double>(analytic[pi][i]);
            double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace cmotion
