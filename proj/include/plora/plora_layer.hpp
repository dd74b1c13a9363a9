#pragma once

#include <cstdint>
#include <string>
#include <tuple>
#include <vector>

#include "plora/autodiff.hpp"
#include "plora/errors.hpp"
#include "plora/rng.hpp"
#include "plora/tensor.hpp"

namespace plora {

enum class Modality : std::uint8_t { kText = 0, kVisual = 1 };

// Per-position visual/text flag for an interleaved sequence.
struct ModalityMask {
    std::vector<Modality> flags;

    ModalityMask() = default;
    explicit ModalityMask(std::vector<Modality> f) : flags(std::move(f)) {}

    static ModalityMask all_text(std::size_t n) {
        return ModalityMask(std::vector<Modality>(n, Modality::kText));
    }
    static ModalityMask all_visual(std::size_t n) {
        return ModalityMask(std::vector<Modality>(n, Modality::kVisual));
    }
    // "VTTV..." shorthand used by tests and the sample dump.
    static ModalityMask from_string(const std::string& s) {
        std::vector<Modality> f;
        f.reserve(s.size());
        for (char c : s) {
            if (c == 'V')
                f.push_back(Modality::kVisual);
            else if (c == 'T')
                f.push_back(Modality::kText);
            else
                throw ContractError(std::string("modality mask char must be V or T, got '") + c +
                                    "'");
        }
        return ModalityMask(std::move(f));
    }

    std::size_t size() const { return flags.size(); }
    bool is_visual(std::size_t i) const { return flags[i] == Modality::kVisual; }

    std::size_t visual_count() const {
        std::size_t n = 0;
        for (Modality m : flags) n += (m == Modality::kVisual);
        return n;
    }

    std::vector<std::size_t> visual_indices() const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < flags.size(); ++i)
            if (flags[i] == Modality::kVisual) idx.push_back(i);
        return idx;
    }
    std::vector<std::size_t> text_indices() const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < flags.size(); ++i)
            if (flags[i] == Modality::kText) idx.push_back(i);
        return idx;
    }

    std::string to_string() const {
        std::string s;
        s.reserve(flags.size());
        for (Modality m : flags) s.push_back(m == Modality::kVisual ? 'V' : 'T');
        return s;
    }
};

// One linear layer with a low-rank residual that fires on visual rows only.
//   W0:  [C_out, C_in]   base weight        B0:  [C_out]       base bias
//   W_A: [C_r,  C_in]    down-projection    W_B: [C_out, C_r]  up-projection
// rank == 0 means the adapter pair is absent and forward is exactly the base map.
struct PLoRAParams {
    Tensor W0;
    Tensor B0;
    Tensor W_A;
    Tensor W_B;
    std::size_t rank = 0;
    double scale = 1.0;  // multiplier on the low-rank residual; 1.0 matches the update rule

    std::size_t c_out() const { return W0.shape[0]; }
    std::size_t c_in() const { return W0.shape[1]; }

    void validate() const {
        if (W0.rank() != 2) throw ShapeError("W0 must be rank-2, got " + W0.shape_str());
        if (B0.rank() != 1 || B0.shape[0] != c_out()) {
            throw ShapeError("B0 shape " + B0.shape_str() + " does not match W0 " +
                             W0.shape_str());
        }
        if (rank == 0) return;
        if (W_A.rank() != 2 || W_A.shape[0] != rank || W_A.shape[1] != c_in()) {
            throw ShapeError("W_A shape " + W_A.shape_str() + " does not match rank " +
                             std::to_string(rank) + ", C_in " + std::to_string(c_in()));
        }
        if (W_B.rank() != 2 || W_B.shape[0] != c_out() || W_B.shape[1] != rank) {
            throw ShapeError("W_B shape " + W_B.shape_str() + " does not match C_out " +
                             std::to_string(c_out()) + ", rank " + std::to_string(rank));
        }
    }
};

// Tape-side handles to one layer's parameters.
struct PLoRAVars {
    Var W0;
    Var B0;
    Var W_A;
    Var W_B;
    std::size_t rank = 0;
    double scale = 1.0;
};

inline PLoRAVars bind_plora(Tape& t, const PLoRAParams& p) {
    PLoRAVars v;
    v.W0 = t.leaf(p.W0);
    v.B0 = t.leaf(p.B0);
    if (p.rank > 0) {
        v.W_A = t.leaf(p.W_A);
        v.W_B = t.leaf(p.W_B);
    }
    v.rank = p.rank;
    v.scale = p.scale;
    return v;
}

// Routed forward on the tape. Base path runs over every row in one matmul;
// text rows are never revisited, so they stay bitwise equal to the base map.
inline Var plora_linear(Tape& t, Var x, const ModalityMask& mask, const PLoRAVars& p) {
    const Tensor& xv = t.value(x);
    if (xv.rank() != 2) throw ShapeError("plora_linear expects rank-2 input");
    if (mask.size() != xv.shape[0]) {
        throw ContractError("modality mask length " + std::to_string(mask.size()) +
                            " != sequence length " + std::to_string(xv.shape[0]));
    }
    Var base = add_bias_rows(t, matmul_nt(t, x, p.W0), p.B0);
    if (p.rank == 0) return base;
    const std::vector<std::size_t> vis = mask.visual_indices();
    if (vis.empty()) return base;
    Var xq = gather_rows(t, x, vis);
    Var res = matmul_nt(t, matmul_nt(t, xq, p.W_A), p.W_B);
    if (p.scale != 1.0) res = scale(t, res, p.scale);
    return add_rows_at(t, base, res, vis);
}

// Pure routed forward: X [T, C_in] -> [T, C_out].
inline Tensor plora_forward(const Tensor& x, const ModalityMask& mask, const PLoRAParams& p) {
    p.validate();
    Tape t;
    Var vx = t.constant(x);
    return t.value(plora_linear(t, vx, mask, bind_plora(t, p)));
}

// Base linear map alone: same op sequence as the text path of plora_forward.
inline Tensor linear_forward(const Tensor& x, const Tensor& w0, const Tensor& b0) {
    Tape t;
    Var vx = t.constant(x);
    Var vw = t.constant(w0);
    Var vb = t.constant(b0);
    return t.value(add_bias_rows(t, matmul_nt(t, vx, vw), vb));
}

// Dense materialization: W_txt = W0, W_vis = W0 + scale * W_B * W_A, B = B0.
inline std::tuple<Tensor, Tensor, Tensor> plora_merge(const PLoRAParams& p) {
    p.validate();
    Tensor w_vis = p.W0;
    if (p.rank > 0) {
        Tensor ba = matmul_value(p.W_B, p.W_A);  // [C_out, C_in]
        for (std::size_t i = 0; i < w_vis.data.size(); ++i)
            w_vis.data[i] += p.scale * ba.data[i];
    }
    return {w_vis, p.W0, p.B0};
}

// Adapter initialization: W_A ~ Gaussian(0, 1/C_in), W_B = 0, so a fresh
// adapter is an exact no-op.
inline PLoRAParams plora_init(std::size_t c_in, std::size_t c_out, std::size_t rank,
                              std::uint64_t seed) {
    PLoRAParams p;
    p.W0 = Tensor({c_out, c_in});
    p.B0 = Tensor({c_out});
    p.rank = rank;
    if (rank > 0) {
        p.W_A = Tensor({rank, c_in});
        p.W_B = Tensor({c_out, rank});
        Rng rng(seed);
        const double std_dev = 1.0 / std::sqrt(static_cast<double>(c_in));
        for (double& v : p.W_A.data) v = std_dev * rng.next_normal();
    }
    return p;
}

}  // namespace plora
