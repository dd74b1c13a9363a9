#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "plora/errors.hpp"
#include "plora/model.hpp"
#include "plora/plora_layer.hpp"
#include "plora/tensor.hpp"
#include "plora/vision.hpp"

namespace plora {

// On-disk layout (everything little-endian):
//   8 bytes  magic "PLORACKP"
//   4 bytes  format version (= 1)
//   4 bytes  tensor count
//   per tensor:
//     2 bytes name length, then UTF-8 name
//     1 byte  rank
//     rank * 4 bytes dims
//     IEEE-754 binary32 payload, row-major
// Values are binary64 in memory and binary32 on disk; round trips are exact
// at binary32 and byte-identical thereafter.
inline constexpr char kCheckpointMagic[8] = {'P', 'L', 'O', 'R', 'A', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Tensor value;
};

struct CheckpointMeta {
    std::int32_t stage = 0;  // 0 none, 1 calibration, 2 pretrain, 3 sft, 4 merged
    std::int64_t step = 0;
    std::uint64_t seed = 0;
};

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
}

struct ByteReader {
    const std::string& buf;
    std::size_t off = 0;

    void need(std::size_t n, const char* what) const {
        if (off + n > buf.size()) {
            throw FormatError(std::string("checkpoint truncated while reading ") + what, off);
        }
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        auto v = static_cast<std::uint16_t>(
            static_cast<std::uint8_t>(buf[off]) |
            (static_cast<std::uint16_t>(static_cast<std::uint8_t>(buf[off + 1])) << 8));
        off += 2;
        return v;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[off + i])) << (8 * i);
        off += 4;
        return v;
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<std::uint8_t>(buf[off++]);
    }
    float f32(const char* what) {
        std::uint32_t bits = u32(what);
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }
};

}  // namespace detail

inline std::string encode_tensor_table(const std::vector<NamedTensor>& table) {
    std::string out;
    out.append(kCheckpointMagic, 8);
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(table.size()));
    for (const NamedTensor& nt : table) {
        if (nt.name.size() > 0xffff) throw ContractError("tensor name too long: " + nt.name);
        if (nt.value.rank() > 0xff) throw ContractError("tensor rank too large");
        detail::put_u16(out, static_cast<std::uint16_t>(nt.name.size()));
        out.append(nt.name);
        out.push_back(static_cast<char>(nt.value.rank()));
        for (std::size_t d : nt.value.shape)
            detail::put_u32(out, static_cast<std::uint32_t>(d));
        for (double v : nt.value.data) detail::put_f32(out, static_cast<float>(v));
    }
    return out;
}

inline std::vector<NamedTensor> decode_tensor_table(const std::string& buf) {
    detail::ByteReader r{buf};
    r.need(8, "magic");
    if (std::memcmp(buf.data(), kCheckpointMagic, 8) != 0) {
        throw FormatError("bad checkpoint magic", 0);
    }
    r.off = 8;
    const std::size_t version_off = r.off;
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version),
                          version_off);
    }
    const std::uint32_t count = r.u32("tensor count");
    std::vector<NamedTensor> table;
    table.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = r.u16("name length");
        r.need(name_len, "name");
        std::string name = buf.substr(r.off, name_len);
        r.off += name_len;
        const std::uint8_t rank = r.u8("rank");
        std::vector<std::size_t> shape;
        std::size_t numel = 1;
        for (std::uint8_t d = 0; d < rank; ++d) {
            shape.push_back(r.u32("dim"));
            numel *= shape.back();
        }
        Tensor t(std::move(shape));
        for (std::size_t j = 0; j < numel; ++j)
            t.data[j] = static_cast<double>(r.f32("payload"));
        for (const NamedTensor& prev : table) {
            if (prev.name == name) {
                throw FormatError("duplicate tensor name " + name, r.off);
            }
        }
        table.push_back({std::move(name), std::move(t)});
    }
    return table;
}

// Atomic write: temp file in place, then rename.
inline void write_file_atomic(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw ContractError("cannot open for writing: " + tmp);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw ContractError("write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw ContractError("rename failed: " + tmp + " -> " + path);
    }
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ContractError("cannot open checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return buf;
}

namespace detail {

// Meta and config travel as pseudo-tensors so the whole file stays within
// the one table format. The u64 seed splits into 16-bit limbs (exact in f32).
inline std::vector<NamedTensor> meta_tensors(const CheckpointMeta& meta, const ModelConfig& mc,
                                             const VisionConfig& vc) {
    std::vector<NamedTensor> out;
    out.push_back({"meta.stage", Tensor({1}, {static_cast<double>(meta.stage)})});
    out.push_back({"meta.step", Tensor({1}, {static_cast<double>(meta.step)})});
    Tensor seed({4});
    for (int i = 0; i < 4; ++i)
        seed.data[static_cast<std::size_t>(i)] =
            static_cast<double>((meta.seed >> (16 * i)) & 0xffffULL);
    out.push_back({"meta.seed", seed});
    Tensor cfg({12});
    cfg.data = {static_cast<double>(mc.vocab_size), static_cast<double>(mc.d_model),
                static_cast<double>(mc.n_heads),    static_cast<double>(mc.n_layers),
                static_cast<double>(mc.d_mlp),      static_cast<double>(mc.max_seq_len),
                static_cast<double>(mc.plora_rank), mc.plora_scale,
                static_cast<double>(vc.depth),      static_cast<double>(vc.image_side),
                static_cast<double>(vc.patch),      0.0};
    out.push_back({"meta.config", cfg});
    return out;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Model& model,
                            const VisionEncoder& encoder, const CheckpointMeta& meta) {
    std::vector<NamedTensor> table = detail::meta_tensors(meta, model.cfg, encoder.cfg);
    for (const auto& e : model.store.items) table.push_back({e.name, e.value});
    for (const auto& e : encoder.store.items) table.push_back({e.name, e.value});
    write_file_atomic(path, encode_tensor_table(table));
}

struct LoadedCheckpoint {
    Model model;
    VisionEncoder encoder;
    CheckpointMeta meta;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::vector<NamedTensor> table = decode_tensor_table(read_file(path));
    auto find = [&](const std::string& name) -> const NamedTensor* {
        for (const NamedTensor& nt : table)
            if (nt.name == name) return &nt;
        return nullptr;
    };
    const NamedTensor* cfg_t = find("meta.config");
    const NamedTensor* stage_t = find("meta.stage");
    const NamedTensor* step_t = find("meta.step");
    const NamedTensor* seed_t = find("meta.seed");
    if (!cfg_t || !stage_t || !step_t || !seed_t || cfg_t->value.numel() != 12 ||
        seed_t->value.numel() != 4) {
        throw FormatError("checkpoint missing meta tensors", 16);
    }
    LoadedCheckpoint lc;
    const auto& c = cfg_t->value.data;
    ModelConfig mc;
    mc.vocab_size = static_cast<int>(c[0]);
    mc.d_model = static_cast<int>(c[1]);
    mc.n_heads = static_cast<int>(c[2]);
    mc.n_layers = static_cast<int>(c[3]);
    mc.d_mlp = static_cast<int>(c[4]);
    mc.max_seq_len = static_cast<int>(c[5]);
    mc.plora_rank = static_cast<int>(c[6]);
    mc.plora_scale = c[7];
    VisionConfig vc;
    vc.depth = static_cast<int>(c[8]);
    vc.image_side = static_cast<int>(c[9]);
    vc.patch = static_cast<int>(c[10]);

    lc.meta.stage = static_cast<std::int32_t>(stage_t->value.data[0]);
    lc.meta.step = static_cast<std::int64_t>(step_t->value.data[0]);
    lc.meta.seed = 0;
    for (int i = 0; i < 4; ++i) {
        lc.meta.seed |= static_cast<std::uint64_t>(
                            static_cast<std::uint16_t>(seed_t->value.data[static_cast<std::size_t>(i)]))
                        << (16 * i);
    }

    lc.model = build_model(mc, 0);
    lc.encoder = build_encoder(vc, mc.d_model, 0);
    auto assign_store = [&](ParamStore& store) {
        for (auto& e : store.items) {
            const NamedTensor* nt = find(e.name);
            if (!nt) throw FormatError("checkpoint missing tensor " + e.name, 16);
            if (nt->value.shape != e.value.shape) {
                throw FormatError("checkpoint tensor " + e.name + " has shape " +
                                      nt->value.shape_str() + ", expected " + e.value.shape_str(),
                                  16);
            }
            e.value = nt->value;
        }
    };
    assign_store(lc.model.store);
    assign_store(lc.encoder.store);

    const std::size_t expected =
        4 + lc.model.store.items.size() + lc.encoder.store.items.size();
    if (table.size() != expected) {
        throw FormatError("checkpoint has " + std::to_string(table.size()) +
                              " tensors, expected " + std::to_string(expected),
                          16);
    }
    return lc;
}

// Materialize the per-layer dense merge (W_vis = W0 + scale*W_B*W_A, W_txt,
// B) alongside every non-adapter tensor.
inline void write_merged_checkpoint(const std::string& path, const Model& model,
                                    const VisionEncoder& encoder, CheckpointMeta meta) {
    meta.stage = 4;
    std::vector<NamedTensor> table = detail::meta_tensors(meta, model.cfg, encoder.cfg);
    std::vector<std::string> adapter_owned;
    for (const auto& [prefix, ids] : model.plora_layers()) {
        PLoRAParams p = model.layer_params(*ids);
        auto [w_vis, w_txt, b] = plora_merge(p);
        table.push_back({prefix + ".W_vis", w_vis});
        table.push_back({prefix + ".W_txt", w_txt});
        table.push_back({prefix + ".B", b});
        adapter_owned.push_back(prefix + ".W0");
        adapter_owned.push_back(prefix + ".B0");
        adapter_owned.push_back(prefix + ".W_A");
        adapter_owned.push_back(prefix + ".W_B");
    }
    auto consumed = [&](const std::string& name) {
        for (const std::string& n : adapter_owned)
            if (n == name) return true;
        return false;
    };
    for (const auto& e : model.store.items) {
        if (!consumed(e.name)) table.push_back({e.name, e.value});
    }
    for (const auto& e : encoder.store.items) table.push_back({e.name, e.value});
    write_file_atomic(path, encode_tensor_table(table));
}

}  // namespace plora
