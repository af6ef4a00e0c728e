#pragma once

// Checkpoint container: an 8-byte little-endian header length, a JSON header
// (configs plus a named-parameter manifest with shapes and byte offsets), then
// raw little-endian IEEE-754 single-precision buffers in manifest order.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include "bimix/run_config.hpp"

namespace bimix {

inline constexpr const char* kCheckpointFormat = "bimix.checkpoint";
inline constexpr int kCheckpointVersion = 1;

template <typename S>
void save_checkpoint(TunedModel<S>& model, const std::string& path) {
    nlohmann::json header;
    header["format"] = kCheckpointFormat;
    header["version"] = kCheckpointVersion;
    header["seed"] = model.run_seed;
    header["model"] = {{"n_layers", model.config.n_layers},     {"n_heads", model.config.n_heads},
                       {"d_model", model.config.d_model},       {"d_mlp", model.config.d_mlp},
                       {"vocab_size", model.config.vocab_size}, {"max_seq_len", model.config.max_seq_len}};
    header["engine"] = {{"variant", to_string(model.engine.variant)},
                        {"second_pass_mask", to_string(model.engine.second_pass_mask)},
                        {"theta_init", model.engine.theta_init},
                        {"concurrent_prefill", model.engine.concurrent_prefill}};
    header["peft"] = {{"kind", to_string(model.peft.kind)},
                      {"rank", model.peft.rank},
                      {"alpha", model.peft.lora_alpha}};

    nlohmann::json manifest = nlohmann::json::array();
    std::uint64_t offset = 0;
    std::vector<const Tensor<S>*> order;
    model.visit_all([&](const std::string& name, Tensor<S>& t) {
        nlohmann::json entry;
        entry["name"] = name;
        entry["shape"] = t.shape();
        entry["offset"] = offset;
        manifest.push_back(std::move(entry));
        order.push_back(&t);
        offset += t.numel() * sizeof(float);
    });
    header["params"] = std::move(manifest);

    const std::string header_bytes = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint '" + path + "'");
    const std::uint64_t header_len = header_bytes.size();
    char len_le[8];
    for (int i = 0; i < 8; ++i) len_le[i] = static_cast<char>((header_len >> (8 * i)) & 0xFF);
    out.write(len_le, 8);
    out.write(header_bytes.data(), static_cast<std::streamsize>(header_bytes.size()));
    std::vector<float> buffer;
    for (const Tensor<S>* t : order) {
        buffer.assign(t->data().begin(), t->data().end());
        out.write(reinterpret_cast<const char*>(buffer.data()),
                  static_cast<std::streamsize>(buffer.size() * sizeof(float)));
    }
    if (!out) throw IoError("checkpoint write to '" + path + "' failed");
}

namespace ckptdetail {

inline nlohmann::json read_header(std::ifstream& in, const std::string& path) {
    char len_le[8];
    in.read(len_le, 8);
    if (!in) throw IoError("checkpoint '" + path + "': truncated header length");
    std::uint64_t header_len = 0;
    for (int i = 0; i < 8; ++i) header_len |= static_cast<std::uint64_t>(static_cast<unsigned char>(len_le[i])) << (8 * i);
    std::string header_bytes(header_len, '\0');
    in.read(header_bytes.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw IoError("checkpoint '" + path + "': truncated header");
    try {
        return nlohmann::json::parse(header_bytes);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("checkpoint '" + path + "': bad header: " + e.what());
    }
}

}  // namespace ckptdetail

// Rebuilds the model from the embedded configs, then fills every named
// parameter from the manifest. Shape mismatches and unknown or missing names
// are rejected.
template <typename S = float>
TunedModel<S> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    const nlohmann::json header = ckptdetail::read_header(in, path);
    if (!header.contains("format") || header["format"] != kCheckpointFormat) {
        throw ConfigError("checkpoint '" + path + "': not a checkpoint container");
    }

    struct Entry {
        Shape shape;
        std::uint64_t offset;
    };
    RunConfig cfg;
    std::map<std::string, Entry> manifest;
    std::uint64_t seed = 0;
    try {
        nlohmann::json wrapper;
        wrapper["model"] = header.at("model");
        wrapper["engine"] = header.at("engine");
        wrapper["peft"] = header.at("peft");
        cfg = parse_run_config(wrapper);
        seed = header.value("seed", std::uint64_t{0});
        for (const auto& e : header.at("params")) {
            Entry entry;
            entry.shape = e.at("shape").template get<Shape>();
            entry.offset = e.at("offset").template get<std::uint64_t>();
            manifest[e.at("name").template get<std::string>()] = std::move(entry);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("checkpoint '" + path + "': malformed header: " + e.what());
    }

    TunedModel<S> model = TunedModel<S>::create(cfg.model, cfg.engine, cfg.peft, 0);
    model.run_seed = seed;

    const std::streampos data_start = in.tellg();
    std::vector<float> buffer;
    model.visit_all([&](const std::string& name, Tensor<S>& t) {
        auto it = manifest.find(name);
        if (it == manifest.end()) {
            throw ConfigError("checkpoint '" + path + "': manifest is missing parameter '" + name + "'");
        }
        if (it->second.shape != t.shape()) {
            throw ConfigError("checkpoint '" + path + "': parameter '" + name + "' has shape " +
                              shape_str(it->second.shape) + ", model expects " + shape_str(t.shape()));
        }
        buffer.assign(t.numel(), 0.0f);
        in.seekg(data_start + static_cast<std::streamoff>(it->second.offset));
        in.read(reinterpret_cast<char*>(buffer.data()),
                static_cast<std::streamsize>(buffer.size() * sizeof(float)));
        if (!in) throw IoError("checkpoint '" + path + "': truncated data for '" + name + "'");
        for (std::size_t i = 0; i < buffer.size(); ++i) t.data()[i] = static_cast<S>(buffer[i]);
        manifest.erase(it);
    });
    if (!manifest.empty()) {
        throw ConfigError("checkpoint '" + path + "': manifest has " + std::to_string(manifest.size()) +
                          " parameters the model does not expect (first: '" + manifest.begin()->first + "')");
    }
    return model;
}

}  // namespace bimix
