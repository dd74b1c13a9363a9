#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "plora/data.hpp"
#include "plora/errors.hpp"
#include "plora/rng.hpp"

namespace plora {

// One synthetic corpus: sampling weight is proportional to `count`.
struct DataSource {
    std::string name;
    std::uint64_t count = 0;
    std::uint64_t generator_seed = 0;
    TaskSpec task;
};

// Draw a source index with probability count_i / sum(counts).
inline std::size_t weighted_sample(const std::vector<DataSource>& sources, Rng& rng) {
    std::uint64_t total = 0;
    for (const DataSource& s : sources) total += s.count;
    if (total == 0) throw ContractError("weighted_sample: all source counts are zero");
    const double u = rng.next_uniform() * static_cast<double>(total);
    double cum = 0.0;
    for (std::size_t i = 0; i < sources.size(); ++i) {
        cum += static_cast<double>(sources[i].count);
        if (u < cum) return i;
    }
    return sources.size() - 1;
}

}  // namespace plora
