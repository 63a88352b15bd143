// SPDX-License-Identifier: Apache-2.0
#include "mosr/checkpoint.hpp"

#include "mosr/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace mosr {

namespace {

constexpr char kMagic[8] = {'M', 'O', 'S', 'R', 'C', 'K', 'P', '1'};
constexpr int kFormatVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes little-endian");

const char* slot_name(int s) {
    static constexpr const char* names[kLinearSlots] = {"wq", "wk", "wv", "wo", "w_up", "w_down"};
    return names[s];
}

struct TensorTable {
    std::vector<std::pair<std::string, const Mat*>> entries;

    void add(std::string name, const Mat* m) { entries.emplace_back(std::move(name), m); }
};

Mat vec_as_mat(const Vec& v) { return Mat(v.transpose()); }

Vec mat_as_vec(const Mat& m) {
    if (m.rows() != 1) throw ValidationError("checkpoint: expected a row vector");
    return m.row(0).transpose();
}

}  // namespace

nlohmann::json to_json(const ModelConfig& c) {
    return {{"vocab_size", c.vocab_size}, {"n_layers", c.n_layers}, {"hidden_dim", c.hidden_dim},
            {"n_heads", c.n_heads},       {"max_seq_len", c.max_seq_len}, {"ffn_mult", c.ffn_mult},
            {"seed", c.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.ffn_mult = j.at("ffn_mult").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const TransformerModel& model,
                     const nlohmann::json& meta, const std::map<std::string, Mat>& extra) {
    const auto& base = model.base();
    // Vectors are stored as 1 x n matrices; keep the copies alive until written.
    std::vector<Mat> vec_store;
    vec_store.reserve(4 + 4 * base.blocks.size());
    auto add_vec = [&](TensorTable& t, std::string name, const Vec& v) {
        vec_store.push_back(vec_as_mat(v));
        t.add(std::move(name), &vec_store.back());
    };

    TensorTable table;
    table.add("token_embedding", &base.token_embedding);
    table.add("position_embedding", &base.position_embedding);
    for (std::size_t l = 0; l < base.blocks.size(); ++l) {
        const auto& b = base.blocks[l];
        const std::string p = "blocks." + std::to_string(l) + ".";
        add_vec(table, p + "ln1_gain", b.ln1_gain);
        add_vec(table, p + "ln1_bias", b.ln1_bias);
        add_vec(table, p + "ln2_gain", b.ln2_gain);
        add_vec(table, p + "ln2_bias", b.ln2_bias);
        for (int s = 0; s < kLinearSlots; ++s)
            table.add(p + slot_name(s), &b.linear(static_cast<LinearSlot>(s)));
    }
    add_vec(table, "final_gain", base.final_gain);
    add_vec(table, "final_bias", base.final_bias);
    table.add("unembedding", &base.unembedding);

    nlohmann::json header;
    header["format_version"] = kFormatVersion;
    header["model_config"] = to_json(model.config());
    header["frozen"] = model.frozen();
    if (model.has_adapters()) {
        const auto& ad = model.adapters();
        header["adapters"] = {{"rank", ad.rank}, {"scale", ad.scale}};
        for (std::size_t l = 0; l < ad.layers.size(); ++l)
            for (int s = 0; s < kLinearSlots; ++s) {
                const std::string p = "adapters." + std::to_string(l) + "." + slot_name(s);
                table.add(p + ".a", &ad.layers[l][static_cast<std::size_t>(s)].a);
                table.add(p + ".b", &ad.layers[l][static_cast<std::size_t>(s)].b);
            }
    }
    for (const auto& [name, m] : extra) table.add("extra." + name, &m);
    header["meta"] = meta;

    std::uint64_t offset = 0;
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& [name, m] : table.entries) {
        tensors.push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}, {"offset", offset}});
        offset += static_cast<std::uint64_t>(m->size()) * sizeof(double);
    }
    header["tensors"] = tensors;
    header["payload_bytes"] = offset;

    const std::string header_text = header.dump();
    std::string blob;
    blob.reserve(sizeof(kMagic) + 8 + header_text.size() + offset);
    blob.append(kMagic, sizeof(kMagic));
    const std::uint64_t hlen = header_text.size();
    blob.append(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    blob += header_text;
    for (const auto& [name, m] : table.entries)
        blob.append(reinterpret_cast<const char*>(m->data()),
                    static_cast<std::size_t>(m->size()) * sizeof(double));
    write_text_file(path, blob);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    const std::string blob = read_text_file(path);
    if (blob.size() < sizeof(kMagic) + 8 || std::memcmp(blob.data(), kMagic, sizeof(kMagic)) != 0)
        throw ValidationError("not a checkpoint: " + path.string());
    std::uint64_t hlen = 0;
    std::memcpy(&hlen, blob.data() + sizeof(kMagic), sizeof(hlen));
    const std::size_t header_start = sizeof(kMagic) + 8;
    if (blob.size() < header_start + hlen) throw ValidationError("truncated checkpoint header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(blob.substr(header_start, hlen));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("corrupt checkpoint header: ") + e.what());
    }
    if (header.value("format_version", 0) != kFormatVersion)
        throw ValidationError("unsupported checkpoint format version");
    const std::size_t payload_start = header_start + hlen;
    const auto payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
    if (blob.size() != payload_start + payload_bytes) throw ValidationError("checkpoint payload size mismatch");

    std::map<std::string, Mat> tensors;
    for (const auto& t : header.at("tensors")) {
        const auto rows = t.at("rows").get<Eigen::Index>();
        const auto cols = t.at("cols").get<Eigen::Index>();
        const auto off = t.at("offset").get<std::uint64_t>();
        const std::uint64_t bytes = static_cast<std::uint64_t>(rows * cols) * sizeof(double);
        if (off + bytes > payload_bytes) throw ValidationError("checkpoint tensor out of bounds");
        Mat m(rows, cols);
        std::memcpy(m.data(), blob.data() + payload_start + off, bytes);
        tensors.emplace(t.at("name").get<std::string>(), std::move(m));
    }
    auto take = [&](const std::string& name) -> Mat {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw ValidationError("checkpoint missing tensor " + name);
        Mat m = std::move(it->second);
        tensors.erase(it);
        return m;
    };
    auto expect_shape = [](const Mat& m, Eigen::Index r, Eigen::Index c, const std::string& name) {
        if (m.rows() != r || m.cols() != c) throw ValidationError("checkpoint tensor " + name + " has wrong shape");
    };

    const ModelConfig cfg = model_config_from_json(header.at("model_config"));
    TransformerModel model(cfg);
    {
        BaseWeights& base = model.mutable_base();
        const int d = cfg.hidden_dim;
        base.token_embedding = take("token_embedding");
        expect_shape(base.token_embedding, cfg.vocab_size, d, "token_embedding");
        base.position_embedding = take("position_embedding");
        expect_shape(base.position_embedding, cfg.max_seq_len, d, "position_embedding");
        for (std::size_t l = 0; l < base.blocks.size(); ++l) {
            auto& b = base.blocks[l];
            const std::string p = "blocks." + std::to_string(l) + ".";
            b.ln1_gain = mat_as_vec(take(p + "ln1_gain"));
            b.ln1_bias = mat_as_vec(take(p + "ln1_bias"));
            b.ln2_gain = mat_as_vec(take(p + "ln2_gain"));
            b.ln2_bias = mat_as_vec(take(p + "ln2_bias"));
            for (int s = 0; s < kLinearSlots; ++s) {
                Mat& w = b.linear(static_cast<LinearSlot>(s));
                Mat loaded = take(p + slot_name(s));
                expect_shape(loaded, w.rows(), w.cols(), p + slot_name(s));
                w = std::move(loaded);
            }
        }
        base.final_gain = mat_as_vec(take("final_gain"));
        base.final_bias = mat_as_vec(take("final_bias"));
        base.unembedding = take("unembedding");
        expect_shape(base.unembedding, cfg.vocab_size, d, "unembedding");
    }
    if (header.contains("adapters")) {
        AdapterSet set;
        set.rank = header["adapters"].at("rank").get<int>();
        set.scale = header["adapters"].at("scale").get<double>();
        set.layers.resize(static_cast<std::size_t>(cfg.n_layers));
        for (std::size_t l = 0; l < set.layers.size(); ++l)
            for (int s = 0; s < kLinearSlots; ++s) {
                const std::string p = "adapters." + std::to_string(l) + "." + slot_name(s);
                auto& f = set.layers[l][static_cast<std::size_t>(s)];
                f.a = take(p + ".a");
                f.b = take(p + ".b");
            }
        model.attach(std::move(set));
    }
    if (header.value("frozen", false)) model.freeze();

    LoadedCheckpoint out{std::move(model), header.value("meta", nlohmann::json::object()), {}};
    for (auto& [name, m] : tensors) {
        if (name.rfind("extra.", 0) != 0) throw ValidationError("unexpected checkpoint tensor " + name);
        out.extra.emplace(name.substr(6), std::move(m));
    }
    return out;
}

}  // namespace mosr
