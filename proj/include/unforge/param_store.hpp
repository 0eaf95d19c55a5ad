#pragma once

#include <string>
#include <vector>

#include "unforge/errors.hpp"
#include "unforge/tensor.hpp"

namespace unforge {

// Named flat segments of trainable parameters with paired gradient buffers.
// Segment order is insertion order and is the serialization order.
template <typename T>
struct ParamStoreT {
    struct Segment {
        std::string name;
        TensorT<T> value;
        TensorT<T> grad;
        bool frozen = false;  // excluded from optimizer updates; grads still accumulate
    };

    std::vector<Segment> segments;

    int add(const std::string& name, TensorT<T> init) {
        if (index_of(name) >= 0)
            throw UsageError("param store: duplicate segment name '" + name + "'");
        Segment s;
        s.name = name;
        s.grad = TensorT<T>::zeros(init.shape);
        s.value = std::move(init);
        segments.push_back(std::move(s));
        return static_cast<int>(segments.size()) - 1;
    }

    int index_of(const std::string& name) const {
        for (std::size_t i = 0; i < segments.size(); ++i)
            if (segments[i].name == name) return static_cast<int>(i);
        return -1;
    }

    Segment& at(const std::string& name) {
        int i = index_of(name);
        if (i < 0) throw UsageError("param store: no segment named '" + name + "'");
        return segments[i];
    }

    const Segment& at(const std::string& name) const {
        return const_cast<ParamStoreT*>(this)->at(name);
    }

    void zero_grads() {
        for (auto& s : segments) s.grad.fill(T(0));
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& s : segments) n += s.value.numel();
        return n;
    }

    template <typename U>
    ParamStoreT<U> cast() const {
        ParamStoreT<U> out;
        for (const auto& s : segments) {
            int i = out.add(s.name, s.value.template cast<U>());
            out.segments[static_cast<std::size_t>(i)].frozen = s.frozen;
        }
        return out;
    }
};

using ParamStore = ParamStoreT<float>;

}  // namespace unforge
