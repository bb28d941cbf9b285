#include <bit>
#include <fstream>

#include "json.hpp"
#include "binio.hpp"
#include "selfcal/tiny_lm.hpp"

namespace selfcal::lm {

namespace {

using nlohmann::json;

constexpr std::string_view kMagic = "TLM1";

json config_to_json(const ModelConfig& c) {
    return {{"layers", c.layers},           {"heads", c.heads},
            {"model_dim", c.model_dim},     {"ffn_dim", c.ffn_dim},
            {"context_len", c.context_len}, {"vocab_size", c.vocab_size},
            {"tied_output", c.tied_output}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.layers = j.at("layers").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.model_dim = j.at("model_dim").get<std::size_t>();
    c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    c.context_len = j.at("context_len").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.tied_output = j.at("tied_output").get<bool>();
    return c;
}

}  // namespace

std::string serialize_checkpoint(const ModelCheckpoint& model) {
    model.validate();
    json manifest = json::array();
    std::string payload;
    model.weights.for_each([&](const std::string& name, const Matrix& t) {
        manifest.push_back({{"name", name},
                            {"shape", {t.rows(), t.cols()}},
                            {"dtype", "f32"},
                            {"offset", payload.size()}});
        for (double v : t.data()) {
            detail::put_le(payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        }
    });
    const json header = {{"config", config_to_json(model.config)},
                         {"tensors", manifest},
                         {"payload_bytes", payload.size()}};
    const std::string header_text = header.dump();
    std::string out(kMagic);
    detail::put_le<std::uint64_t>(out, header_text.size());
    out += header_text;
    out += payload;
    return out;
}

ModelCheckpoint deserialize_checkpoint(std::string_view bytes) {
    if (bytes.size() < kMagic.size() || bytes.substr(0, kMagic.size()) != kMagic) {
        throw CheckpointMagicError("checkpoint: bad magic bytes");
    }
    if (bytes.size() < kMagic.size() + 8) {
        throw CheckpointTruncatedError("checkpoint: truncated before header length");
    }
    const std::uint64_t header_len = detail::get_le<std::uint64_t>(bytes, kMagic.size());
    const std::size_t header_start = kMagic.size() + 8;
    if (bytes.size() - header_start < header_len) {
        throw CheckpointTruncatedError("checkpoint: truncated header");
    }
    json header;
    try {
        header = json::parse(bytes.substr(header_start, header_len));
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("checkpoint: malformed header: ") + e.what());
    }
    const std::string_view payload = bytes.substr(header_start + header_len);

    ModelCheckpoint model;
    try {
        model = ModelCheckpoint::blank(config_from_json(header.at("config")));
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("checkpoint: bad config: ") + e.what());
    } catch (const ContractViolation& e) {
        throw CheckpointShapeError(std::string("checkpoint: invalid config: ") + e.what());
    }

    const json& manifest = header.at("tensors");
    std::size_t index = 0;
    std::size_t expected_offset = 0;
    model.weights.for_each([&](const std::string& name, Matrix& t) {
        if (index >= manifest.size()) {
            throw CheckpointShapeError("checkpoint: manifest is missing tensor " + name);
        }
        const json& entry = manifest[index++];
        const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
        if (entry.at("name").get<std::string>() != name || shape.size() != 2 ||
            shape[0] != t.rows() || shape[1] != t.cols() ||
            entry.at("dtype").get<std::string>() != "f32" ||
            entry.at("offset").get<std::size_t>() != expected_offset) {
            throw CheckpointShapeError("checkpoint: tensor " + name +
                                       " does not match the declared config");
        }
        const std::size_t nbytes = t.size() * 4;
        if (payload.size() < expected_offset + nbytes) {
            throw CheckpointTruncatedError("checkpoint: payload truncated in tensor " + name);
        }
        auto data = t.data();
        for (std::size_t i = 0; i < t.size(); ++i) {
            const auto bits = detail::get_le<std::uint32_t>(payload, expected_offset + 4 * i);
            data[i] = static_cast<double>(std::bit_cast<float>(bits));
        }
        expected_offset += nbytes;
    });
    if (index != manifest.size()) {
        throw CheckpointShapeError("checkpoint: manifest has extra tensors");
    }
    if (header.value("payload_bytes", expected_offset) != expected_offset) {
        throw CheckpointShapeError("checkpoint: declared payload size does not match tensors");
    }
    if (payload.size() != expected_offset) {
        throw CheckpointShapeError("checkpoint: trailing bytes after payload");
    }
    try {
        model.validate();
    } catch (const ContractViolation& e) {
        throw CheckpointError(std::string("checkpoint: ") + e.what());
    }
    return model;
}

void save_checkpoint(const ModelCheckpoint& model, const std::filesystem::path& path) {
    const std::string bytes = serialize_checkpoint(model);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint(read_text_file(path));
}

}  // namespace selfcal::lm
