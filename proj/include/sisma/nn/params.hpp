// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "sisma/core/errors.hpp"
#include "sisma/core/tensor.hpp"

namespace sisma::nn {

// One learnable tensor with its gradient accumulator. Pointers stay valid for
// the lifetime of the owning layer; the registry never owns storage.
template <typename T>
struct ParamEntry {
    std::string name;
    Tensor<T>* value = nullptr;
    Tensor<T>* grad = nullptr;
};

template <typename T>
class ParamRegistry {
public:
    void add(const std::string& name, Tensor<T>* value, Tensor<T>* grad) {
        if (!value || !grad) throw ValidationError("ParamRegistry: null tensor for " + name);
        if (!value->same_shape(*grad))
            throw ValidationError("ParamRegistry: value/grad shape mismatch for " + name + ": " +
                                  value->shape_str() + " vs " + grad->shape_str());
        for (const auto& e : entries_)
            if (e.name == name) throw ValidationError("ParamRegistry: duplicate parameter name " + name);
        entries_.push_back({name, value, grad});
    }

    void sort_by_name() {
        std::sort(entries_.begin(), entries_.end(),
                  [](const ParamEntry<T>& a, const ParamEntry<T>& b) { return a.name < b.name; });
    }

    const std::vector<ParamEntry<T>>& entries() const { return entries_; }

    ParamEntry<T>* find(const std::string& name) {
        for (auto& e : entries_)
            if (e.name == name) return &e;
        return nullptr;
    }

    i64 total_params() const {
        i64 n = 0;
        for (const auto& e : entries_) n += e.value->numel();
        return n;
    }

    void zero_grads() {
        for (auto& e : entries_) e.grad->fill(T(0));
    }

private:
    std::vector<ParamEntry<T>> entries_;
};

} // namespace sisma::nn
