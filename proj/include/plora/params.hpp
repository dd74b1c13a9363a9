#pragma once

#include <string>
#include <vector>

#include "plora/autodiff.hpp"
#include "plora/tensor.hpp"

namespace plora {

// Optimization groups with distinct stage policies.
enum class ParamGroup { kLlmBase, kPlora, kVision };

inline const char* group_name(ParamGroup g) {
    switch (g) {
        case ParamGroup::kLlmBase: return "llm_base";
        case ParamGroup::kPlora: return "plora";
        case ParamGroup::kVision: return "vision";
    }
    return "?";
}

// Named parameter registry. Names are stable dotted paths (block.0.attn.q.W0)
// used for checkpoints; lldr_level drives layer-wise LR decay where set.
struct ParamStore {
    struct Entry {
        std::string name;
        Tensor value;
        ParamGroup group;
        int lldr_level = -1;  // -1: no layer-wise decay
        int lldr_depth = 0;
    };

    std::vector<Entry> items;

    int add(std::string name, Tensor value, ParamGroup group, int lldr_level = -1,
            int lldr_depth = 0) {
        for (const Entry& e : items) {
            if (e.name == name) throw ContractError("duplicate parameter name: " + name);
        }
        items.push_back({std::move(name), std::move(value), group, lldr_level, lldr_depth});
        return static_cast<int>(items.size()) - 1;
    }

    Tensor& value(int id) { return items[static_cast<std::size_t>(id)].value; }
    const Tensor& value(int id) const { return items[static_cast<std::size_t>(id)].value; }

    std::size_t total_scalars() const {
        std::size_t n = 0;
        for (const Entry& e : items) n += e.value.numel();
        return n;
    }
};

// Leaf handles for one store on one tape, aligned by index.
struct BoundParams {
    std::vector<Var> vars;
    Var operator[](int id) const { return vars[static_cast<std::size_t>(id)]; }
};

inline BoundParams bind_params(Tape& t, const ParamStore& store) {
    BoundParams b;
    b.vars.reserve(store.items.size());
    for (const auto& e : store.items) b.vars.push_back(t.leaf(e.value));
    return b;
}

}  // namespace plora
