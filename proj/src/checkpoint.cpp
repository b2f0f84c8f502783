#include "xmla/checkpoint.hpp"

#include <unistd.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace xmla {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'X', 'M', 'L', 'A'};

json geometry_to_json(const AttentionGeometry& g) {
    return json{{"d", g.d},     {"n_h", g.n_h},   {"n_kv", g.n_kv}, {"d_h", g.d_h},
                {"d_qk", g.d_qk}, {"d_r", g.d_r}, {"r_q", g.r_q},   {"r_kv", g.r_kv}};
}

AttentionGeometry geometry_from_json(const json& j) {
    AttentionGeometry g;
    g.d = j.at("d").get<int64_t>();
    g.n_h = j.at("n_h").get<int64_t>();
    g.n_kv = j.at("n_kv").get<int64_t>();
    g.d_h = j.at("d_h").get<int64_t>();
    g.d_qk = j.at("d_qk").get<int64_t>();
    g.d_r = j.at("d_r").get<int64_t>();
    g.r_q = j.at("r_q").get<int64_t>();
    g.r_kv = j.at("r_kv").get<int64_t>();
    return g;
}

json config_to_json(const ModelConfig& cfg) {
    json kinds = json::array();
    for (AttentionKind k : cfg.layer_kinds) kinds.push_back(k == AttentionKind::Mla ? "mla" : "attention");
    return json{{"vocab_size", cfg.vocab_size},
                {"n_layers", cfg.n_layers},
                {"mlp_hidden", cfg.mlp_hidden},
                {"geometry", geometry_to_json(cfg.geometry)},
                {"layer_kinds", kinds},
                {"tie_embeddings", cfg.tie_embeddings},
                {"mla_layernorm", cfg.mla_layernorm},
                {"theta_base", cfg.theta_base}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig cfg;
    cfg.vocab_size = j.at("vocab_size").get<int64_t>();
    cfg.n_layers = j.at("n_layers").get<int64_t>();
    cfg.mlp_hidden = j.at("mlp_hidden").get<int64_t>();
    cfg.geometry = geometry_from_json(j.at("geometry"));
    for (const auto& k : j.at("layer_kinds")) {
        std::string s = k.get<std::string>();
        if (s == "mla")
            cfg.layer_kinds.push_back(AttentionKind::Mla);
        else if (s == "attention")
            cfg.layer_kinds.push_back(AttentionKind::Attention);
        else
            throw ConfigError("checkpoint: unknown layer kind '" + s + "'");
    }
    cfg.tie_embeddings = j.at("tie_embeddings").get<bool>();
    cfg.mla_layernorm = j.at("mla_layernorm").get<bool>();
    cfg.theta_base = j.at("theta_base").get<double>();
    return cfg;
}

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

void write_f32_payload(std::ostream& os, const Tensor& t) {
    for (double d : t.data()) {
        float f = static_cast<float>(d);
        uint32_t bits;
        std::memcpy(&bits, &f, 4);
        write_u32(os, bits);
    }
}

void read_f32_payload(std::istream& is, Tensor& t) {
    for (double& d : t.data()) {
        uint32_t bits = read_u32(is);
        float f;
        std::memcpy(&f, &bits, 4);
        d = static_cast<double>(f);
    }
}

}  // namespace

void save_checkpoint(const LmModel& model, const std::string& path) {
    auto named = const_cast<LmModel&>(model).named_params();

    json dir = json::array();
    uint64_t offset = 0;
    for (auto& [name, t] : named) {
        dir.push_back(json{{"name", name}, {"shape", t.shape()}, {"offset", offset}});
        offset += static_cast<uint64_t>(t.numel()) * 4;
    }
    json meta = json{{"config", config_to_json(model.config)}, {"tensors", dir}};
    std::string meta_str = meta.dump();

    namespace fs = std::filesystem;
    fs::path target(path);
    if (target.has_parent_path()) {
        std::error_code ec;
        if (!fs::exists(target.parent_path(), ec))
            throw IoError("checkpoint: directory does not exist: " + target.parent_path().string());
    }
    fs::path tmp = target;
    tmp += ".tmp." + std::to_string(::getpid());

    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("checkpoint: cannot open " + tmp.string() + " for writing");
        os.write(kMagic, 4);
        write_u32(os, kCheckpointVersion);
        write_u64(os, meta_str.size());
        os.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
        for (auto& [name, t] : named) write_f32_payload(os, t);
        os.flush();
        if (!os) {
            std::error_code ec;
            fs::remove(tmp, ec);
            throw IoError("checkpoint: write failed for " + tmp.string());
        }
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw IoError("checkpoint: rename to " + path + " failed: " + ec.message());
    }
}

LmModel load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open " + path);

    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("checkpoint: bad magic in " + path);
    uint32_t version = read_u32(is);
    if (version != kCheckpointVersion)
        throw IoError("checkpoint: unsupported format version " + std::to_string(version));
    uint64_t meta_len = read_u64(is);
    std::string meta_str(meta_len, '\0');
    is.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
    if (!is) throw IoError("checkpoint: truncated metadata in " + path);

    json meta;
    try {
        meta = json::parse(meta_str);
    } catch (const json::exception& e) {
        throw IoError("checkpoint: corrupt metadata in " + path + ": " + e.what());
    }

    ModelConfig cfg = config_from_json(meta.at("config"));
    LmModel model;
    model.config = cfg;
    model.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (int64_t i = 0; i < cfg.n_layers; ++i)
        model.layers[static_cast<size_t>(i)].kind = cfg.layer_kinds[static_cast<size_t>(i)];

    // Materialize tensors from the directory; shapes come from the file so
    // per-layer heterogeneous MLA ranks round-trip untouched.
    for (const auto& entry : meta.at("tensors")) {
        std::string name = entry.at("name").get<std::string>();
        Shape shape = entry.at("shape").get<Shape>();
        Tensor t(shape, 0.0);
        read_f32_payload(is, t);
        if (!is) throw IoError("checkpoint: truncated payload at tensor '" + name + "'");

        auto set_layer_tensor = [&](int64_t li, const std::string& field) {
            LayerWeights& lw = model.layers[static_cast<size_t>(li)];
            if (field == "attn_norm.gain") lw.attn_norm_gain = t;
            else if (field == "mlp_norm.gain") lw.mlp_norm_gain = t;
            else if (field == "mlp.w_gate") lw.mlp.w_gate = t;
            else if (field == "mlp.w_up") lw.mlp.w_up = t;
            else if (field == "mlp.w_down") lw.mlp.w_down = t;
            else if (field == "attn.w_q") lw.attn.w_q = t;
            else if (field == "attn.w_k") lw.attn.w_k = t;
            else if (field == "attn.w_v") lw.attn.w_v = t;
            else if (field == "attn.w_o" && lw.kind == AttentionKind::Attention) lw.attn.w_o = t;
            else if (field == "attn.w_dq") lw.mla.w_dq = t;
            else if (field == "attn.w_uq") lw.mla.w_uq = t;
            else if (field == "attn.w_qr") lw.mla.w_qr = t;
            else if (field == "attn.w_dkv") lw.mla.w_dkv = t;
            else if (field == "attn.w_uk") lw.mla.w_uk = t;
            else if (field == "attn.w_uv") lw.mla.w_uv = t;
            else if (field == "attn.w_kr") lw.mla.w_kr = t;
            else if (field == "attn.w_o") lw.mla.w_o = t;
            else if (field == "attn.ln_q.gain") {
                if (!lw.mla.ln_q) lw.mla.ln_q = LayerNormParams{Tensor(), Tensor()};
                lw.mla.ln_q->gain = t;
            } else if (field == "attn.ln_q.bias") {
                if (!lw.mla.ln_q) lw.mla.ln_q = LayerNormParams{Tensor(), Tensor()};
                lw.mla.ln_q->bias = t;
            } else if (field == "attn.ln_kv.gain") {
                if (!lw.mla.ln_kv) lw.mla.ln_kv = LayerNormParams{Tensor(), Tensor()};
                lw.mla.ln_kv->gain = t;
            } else if (field == "attn.ln_kv.bias") {
                if (!lw.mla.ln_kv) lw.mla.ln_kv = LayerNormParams{Tensor(), Tensor()};
                lw.mla.ln_kv->bias = t;
            } else {
                throw IoError("checkpoint: unknown tensor '" + name + "'");
            }
        };

        if (name == "tok_emb") model.tok_emb = t;
        else if (name == "final_norm.gain") model.final_norm_gain = t;
        else if (name == "lm_head") model.lm_head = t;
        else if (name.rfind("layers.", 0) == 0) {
            size_t dot = name.find('.', 7);
            if (dot == std::string::npos) throw IoError("checkpoint: malformed tensor name '" + name + "'");
            int64_t li = std::stoll(name.substr(7, dot - 7));
            if (li < 0 || li >= cfg.n_layers) throw IoError("checkpoint: layer index out of range in '" + name + "'");
            set_layer_tensor(li, name.substr(dot + 1));
        } else {
            throw IoError("checkpoint: unknown tensor '" + name + "'");
        }
    }
    return model;
}

}  // namespace xmla
