#include "patchlens/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <Eigen/Core>

#include "patchlens/errors.hpp"

namespace patchlens {

namespace {

std::size_t dtype_size(const std::string& dtype) {
    if (dtype == "F32") return 4;
    if (dtype == "F16" || dtype == "BF16") return 2;
    throw CapabilityError("unsupported tensor dtype " + dtype);
}

float bf16_to_float(std::uint16_t v) {
    const std::uint32_t bits = static_cast<std::uint32_t>(v) << 16;
    float f;
    std::memcpy(&f, &bits, sizeof f);
    return f;
}

nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw InputError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

}  // namespace

SafetensorsFile::SafetensorsFile(const std::filesystem::path& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path.string());
    std::uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), sizeof header_len);
    const auto file_size = std::filesystem::file_size(path);
    if (!in || header_len > file_size - sizeof header_len) throw InputError("truncated safetensors header in " + path.string());
    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));
    data_offset_ = sizeof header_len + header_len;
    const std::uint64_t data_size = file_size - data_offset_;

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(header);
        for (const auto& [name, v] : j.items()) {
            if (name == "__metadata__") continue;
            Entry e;
            e.dtype = v.at("dtype").get<std::string>();
            e.shape = v.at("shape").get<std::vector<std::int64_t>>();
            const auto off = v.at("data_offsets").get<std::vector<std::uint64_t>>();
            if (off.size() != 2 || off[0] > off[1] || off[1] > data_size)
                throw InputError("tensor " + name + " has bad offsets");
            e.begin = off[0];
            e.end = off[1];
            index_.emplace(name, std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError("malformed safetensors header in " + path.string() + ": " + e.what());
    }
}

std::vector<std::string> SafetensorsFile::names() const {
    std::vector<std::string> out;
    for (const auto& [n, e] : index_) out.push_back(n);
    return out;
}

const SafetensorsFile::Entry& SafetensorsFile::entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InputError("checkpoint has no tensor " + name);
    return it->second;
}

const std::vector<std::int64_t>& SafetensorsFile::shape(const std::string& name) const { return entry(name).shape; }
const std::string& SafetensorsFile::dtype(const std::string& name) const { return entry(name).dtype; }

std::vector<float> SafetensorsFile::read(const std::string& name) const {
    const auto& e = entry(name);
    std::uint64_t n = 1;
    for (auto d : e.shape) n *= static_cast<std::uint64_t>(d);
    const std::size_t width = dtype_size(e.dtype);
    if (n * width != e.end - e.begin) throw InputError("tensor " + name + " size disagrees with its shape");

    std::ifstream in(path_, std::ios::binary);
    in.seekg(static_cast<std::streamoff>(data_offset_ + e.begin));
    std::vector<char> raw(e.end - e.begin);
    in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (!in) throw InputError("cannot read tensor " + name);

    std::vector<float> out(n);
    if (e.dtype == "F32") {
        std::memcpy(out.data(), raw.data(), raw.size());
    } else {
        for (std::uint64_t i = 0; i < n; ++i) {
            std::uint16_t v;
            std::memcpy(&v, raw.data() + 2 * i, 2);
            out[i] = e.dtype == "F16" ? static_cast<float>(Eigen::numext::bit_cast<Eigen::half>(v)) : bf16_to_float(v);
        }
    }
    return out;
}

void write_safetensors(const std::filesystem::path& path, const std::map<std::string, NamedTensor>& tensors) {
    nlohmann::json header = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        std::uint64_t n = 1;
        for (auto d : t.shape) n *= static_cast<std::uint64_t>(d);
        if (n != t.data.size()) throw InputError("tensor " + name + " data disagrees with its shape");
        header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + 4 * n}}};
        offset += 4 * n;
    }
    std::string h = header.dump();
    h.append((8 - h.size() % 8) % 8, ' ');
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path.string());
    const std::uint64_t len = h.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& [name, t] : tensors)
        out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(4 * t.data.size()));
}

ModelConfig config_from_hf(const nlohmann::json& full, const std::string& id) {
    const bool wrapped = full.contains("text_config");
    const auto& j = wrapped ? full.at("text_config") : full;
    const std::string type = j.value("model_type", "llama");
    if (type != "llama" && type != "mistral" && type != "qwen2")
        throw CapabilityError("unsupported architecture '" + type + "'");
    if (j.value("hidden_act", "silu") != "silu") throw CapabilityError("only SiLU-gated FFNs are supported");
    if (j.value("attention_bias", false) || j.value("mlp_bias", false))
        throw CapabilityError("output-projection and MLP biases are not supported");
    if (j.contains("rope_scaling") && !j["rope_scaling"].is_null())
        throw CapabilityError("rope scaling is not supported");

    ModelConfig c;
    c.id = id;
    try {
        c.n_layers = j.at("num_hidden_layers").get<int>();
        c.n_heads = j.at("num_attention_heads").get<int>();
        c.n_kv_heads = j.value("num_key_value_heads", c.n_heads);
        c.d_model = j.at("hidden_size").get<int>();
        c.vocab_size = j.at("vocab_size").get<int>();
        c.ffn_hidden = j.at("intermediate_size").get<int>();
        c.rms_eps = j.value("rms_norm_eps", 1e-6f);
        c.rope_theta = j.value("rope_theta", 10000.0f);
        if (j.contains("rope_parameters") && j["rope_parameters"].contains("rope_theta"))
            c.rope_theta = j["rope_parameters"]["rope_theta"].get<float>();
        c.max_positions = j.value("max_position_embeddings", 4096);
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("incomplete model config: ") + e.what());
    }
    c.qkv_bias = type == "qwen2";
    if (j.contains("head_dim") && !j["head_dim"].is_null() && j["head_dim"].get<int>() * c.n_heads != c.d_model)
        throw CapabilityError("head_dim * num_attention_heads must equal hidden_size");

    if (full.contains("patchlens_vision")) {
        const auto& v = full["patchlens_vision"];
        c.vision = {v.at("rows").get<int>(), v.at("cols").get<int>(), v.at("image_size").get<int>()};
    } else if (full.contains("vision_config")) {
        const auto& v = full["vision_config"];
        const int size = v.value("image_size", 336);
        const int patch = v.value("patch_size", 14);
        c.vision = {size / patch, size / patch, size};
    }
    c.validate();
    return c;
}

std::shared_ptr<ModelWeights> load_checkpoint(const std::filesystem::path& dir) {
    const auto conf = read_json(dir / "config.json");
    auto w = std::make_shared<ModelWeights>();
    w->config = config_from_hf(conf, dir.filename().string());
    const auto& c = w->config;
    const SafetensorsFile st(dir / "model.safetensors");

    std::string prefix = "model.";
    std::string head = "lm_head.weight";
    if (!st.has("model.embed_tokens.weight") && st.has("language_model.model.embed_tokens.weight")) {
        prefix = "language_model.model.";
        head = "language_model.lm_head.weight";
    }
    const auto matrix = [&](const std::string& name, int rows, int cols) {
        const auto& s = st.shape(name);
        if (s.size() != 2 || s[0] != rows || s[1] != cols)
            throw InputError("tensor " + name + " has an unexpected shape");
        const auto data = st.read(name);
        return Matrix(Eigen::Map<const Matrix>(data.data(), rows, cols));
    };
    const auto vector = [&](const std::string& name, int n) {
        const auto& s = st.shape(name);
        if (s.size() != 1 || s[0] != n) throw InputError("tensor " + name + " has an unexpected shape");
        const auto data = st.read(name);
        return Vector(Eigen::Map<const Vector>(data.data(), n));
    };

    const int d = c.d_model;
    const int dh = c.head_dim();
    w->embed = matrix(prefix + "embed_tokens.weight", c.vocab_size, d);
    w->unembed = st.has(head) ? matrix(head, c.vocab_size, d) : w->embed;
    w->final_norm = vector(prefix + "norm.weight", d);
    for (int l = 0; l < c.n_layers; ++l) {
        const std::string p = prefix + "layers." + std::to_string(l) + ".";
        LayerWeights lw;
        lw.attn_norm = vector(p + "input_layernorm.weight", d);
        lw.wq = matrix(p + "self_attn.q_proj.weight", c.n_heads * dh, d);
        lw.wk = matrix(p + "self_attn.k_proj.weight", c.n_kv_heads * dh, d);
        lw.wv = matrix(p + "self_attn.v_proj.weight", c.n_kv_heads * dh, d);
        lw.wo = matrix(p + "self_attn.o_proj.weight", d, c.n_heads * dh);
        if (c.qkv_bias) {
            lw.bq = vector(p + "self_attn.q_proj.bias", c.n_heads * dh);
            lw.bk = vector(p + "self_attn.k_proj.bias", c.n_kv_heads * dh);
            lw.bv = vector(p + "self_attn.v_proj.bias", c.n_kv_heads * dh);
        }
        lw.ffn_norm = vector(p + "post_attention_layernorm.weight", d);
        lw.w_gate = matrix(p + "mlp.gate_proj.weight", c.ffn_hidden, d);
        lw.w_up = matrix(p + "mlp.up_proj.weight", c.ffn_hidden, d);
        lw.w_down = matrix(p + "mlp.down_proj.weight", d, c.ffn_hidden);
        w->layers.push_back(std::move(lw));
    }
    w->validate();
    return w;
}

void save_checkpoint(const ModelWeights& w, const std::filesystem::path& dir) {
    w.validate();
    const auto& c = w.config;
    if (c.ffn_hidden == 0) throw CapabilityError("checkpoints without an FFN cannot be expressed in llama format");
    std::filesystem::create_directories(dir);
    std::map<std::string, NamedTensor> t;
    const auto put = [&](const std::string& name, const auto& m) {
        NamedTensor nt;
        if constexpr (std::is_same_v<std::decay_t<decltype(m)>, Matrix>) nt.shape = {m.rows(), m.cols()};
        else nt.shape = {m.size()};
        nt.data.assign(m.data(), m.data() + m.size());
        t[name] = std::move(nt);
    };
    put("model.embed_tokens.weight", w.embed);
    put("lm_head.weight", w.unembed);
    put("model.norm.weight", w.final_norm);
    for (int l = 0; l < c.n_layers; ++l) {
        const auto& lw = w.layers[static_cast<std::size_t>(l)];
        const std::string p = "model.layers." + std::to_string(l) + ".";
        put(p + "input_layernorm.weight", lw.attn_norm);
        put(p + "self_attn.q_proj.weight", lw.wq);
        put(p + "self_attn.k_proj.weight", lw.wk);
        put(p + "self_attn.v_proj.weight", lw.wv);
        put(p + "self_attn.o_proj.weight", lw.wo);
        if (c.qkv_bias) {
            put(p + "self_attn.q_proj.bias", lw.bq);
            put(p + "self_attn.k_proj.bias", lw.bk);
            put(p + "self_attn.v_proj.bias", lw.bv);
        }
        put(p + "post_attention_layernorm.weight", lw.ffn_norm);
        put(p + "mlp.gate_proj.weight", lw.w_gate);
        put(p + "mlp.up_proj.weight", lw.w_up);
        put(p + "mlp.down_proj.weight", lw.w_down);
    }
    write_safetensors(dir / "model.safetensors", t);

    nlohmann::json j = {{"architectures", {c.qkv_bias ? "Qwen2ForCausalLM" : "LlamaForCausalLM"}},
                        {"model_type", c.qkv_bias ? "qwen2" : "llama"},
                        {"hidden_act", "silu"},
                        {"hidden_size", c.d_model},
                        {"intermediate_size", c.ffn_hidden},
                        {"num_hidden_layers", c.n_layers},
                        {"num_attention_heads", c.n_heads},
                        {"num_key_value_heads", c.n_kv_heads},
                        {"vocab_size", c.vocab_size},
                        {"rms_norm_eps", c.rms_eps},
                        {"rope_theta", c.rope_theta},
                        {"max_position_embeddings", c.max_positions},
                        {"tie_word_embeddings", false}};
    if (c.vision.enabled())
        j["patchlens_vision"] = {{"rows", c.vision.rows}, {"cols", c.vision.cols}, {"image_size", c.vision.image_size}};
    std::ofstream out(dir / "config.json");
    out << j.dump(2) << '\n';
}

ModelBundle load_checkpoint_bundle(const std::filesystem::path& dir, std::size_t queue_capacity) {
    ModelBundle b;
    auto weights = load_checkpoint(dir);
    b.id = weights->config.id;
    b.model = std::make_shared<ModelHandle>(weights, Capabilities{}, queue_capacity);
    auto tok = std::make_shared<Tokenizer>(Tokenizer::from_json_file(dir / "tokenizer.json"));
    if (tok->size() > weights->config.vocab_size)
        throw InputError("tokenizer has more entries than the model vocabulary");
    if (std::filesystem::exists(dir / "prompts.json")) b.templates = PromptTemplates::from_json_file(dir / "prompts.json");
    if (weights->config.vision.enabled()) {
        if (std::filesystem::is_directory(dir / "visual_blocks")) {
            b.encoder = std::make_shared<PrecomputedVisionEncoder>(dir / "visual_blocks");
        } else {
            try {
                b.encoder = std::make_shared<StubVisionEncoder>(weights, *tok);
            } catch (const InputError&) {
                b.encoder = nullptr;
            }
        }
    }
    b.tokenizer = std::move(tok);
    return b;
}

}  // namespace patchlens
