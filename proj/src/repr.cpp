// SPDX-License-Identifier: Apache-2.0
#include "mosr/repr.hpp"

#include "mosr/io.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>

namespace mosr {

Representation gather_representation(const TransformerModel& model, std::span<const int> tokens,
                                      std::span<const int> layer_ids, std::string sample_id) {
    if (tokens.empty()) throw InputError("gather_representation: empty token sequence");
    if (layer_ids.empty()) throw InputError("gather_representation: no layers requested");
    auto hidden = hidden_states(model, tokens, layer_ids);
    Representation rep;
    rep.sample_id = std::move(sample_id);
    for (int l : layer_ids) {
        Mat& m = hidden.at(l);
        if (!m.allFinite()) throw NumericError("non-finite hidden state at layer " + std::to_string(l));
        rep.layers.push_back(l);
        rep.states.push_back(m);
    }
    return rep;
}

Vec pool(const Representation& rep) {
    if (rep.states.empty() || rep.tokens() == 0) throw InputError("pool: empty representation");
    Vec acc = Vec::Zero(rep.states.front().cols());
    for (const Mat& m : rep.states) acc += m.colwise().mean().transpose();
    return acc / static_cast<double>(rep.states.size());
}

double cosine_sim(const Eigen::Ref<const Vec>& a, const Eigen::Ref<const Vec>& b) {
    if (a.size() != b.size()) throw InputError("cosine_sim: dimension mismatch");
    const double na = a.norm();
    const double nb = b.norm();
    if (na == 0.0 || nb == 0.0) throw InputError("cosine_sim: zero vector");
    return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

double rep_cosine(const Representation& a, const Representation& b) {
    if (a.layers != b.layers) throw InputError("rep_cosine: layer sets differ");
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t l = 0; l < a.states.size(); ++l) {
        const Mat& x = a.states[l];
        const Mat& y = b.states[l];
        if (x.rows() != y.rows() || x.cols() != y.cols()) throw InputError("rep_cosine: shape mismatch");
        for (Eigen::Index t = 0; t < x.rows(); ++t) {
            total += cosine_sim(x.row(t).transpose(), y.row(t).transpose());
            ++count;
        }
    }
    if (count == 0) throw InputError("rep_cosine: empty representation");
    return total / static_cast<double>(count);
}

std::string dataset_hash(std::span<const std::vector<int>> sequences) {
    std::string text;
    for (const auto& s : sequences) text += join_ints(s) + "\n";
    return sha256_hex(text);
}

OverRefusalCentroid compute_centroid(std::span<const std::vector<int>> over_refusal_sequences,
                                     const TransformerModel& frozen_model, std::span<const int> layer_ids) {
    if (over_refusal_sequences.empty()) throw InputError("compute_centroid: empty over-refusal dataset");
    OverRefusalCentroid c;
    c.vector = Vec::Zero(frozen_model.config().hidden_dim);
    for (const auto& seq : over_refusal_sequences)
        c.vector += pool(gather_representation(frozen_model, seq, layer_ids));
    c.vector /= static_cast<double>(over_refusal_sequences.size());
    c.dataset_size = over_refusal_sequences.size();
    c.layers.assign(layer_ids.begin(), layer_ids.end());
    c.dataset_hash = dataset_hash(over_refusal_sequences);
    return c;
}

double overlap_score(const Vec& pooled, const OverRefusalCentroid& centroid) {
    if (centroid.vector.norm() == 0.0) throw InputError("overlap_score: zero centroid");
    return -cosine_sim(pooled, centroid.vector);
}

double overlap_score(const Representation& rep, const OverRefusalCentroid& centroid) {
    if (!centroid.layers.empty() && rep.layers != centroid.layers)
        throw InputError("overlap_score: representation layers differ from centroid layers");
    return overlap_score(pool(rep), centroid);
}

void WeightingConfig::validate() const {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) throw InputError("temperature must be > 0");
}

std::vector<double> batch_weights(std::span<const double> scores, double temperature) {
    WeightingConfig{temperature}.validate();
    if (scores.empty()) throw InputError("batch_weights: empty batch");
    const double mx = *std::max_element(scores.begin(), scores.end());
    std::vector<double> w(scores.size());
    double total = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        w[i] = std::exp((scores[i] - mx) / temperature);
        total += w[i];
    }
    for (double& x : w) x /= total;
    return w;
}

void save_centroid(const std::filesystem::path& path, const OverRefusalCentroid& c) {
    nlohmann::json j;
    j["vector"] = std::vector<double>(c.vector.data(), c.vector.data() + c.vector.size());
    j["dataset_size"] = c.dataset_size;
    j["layers"] = c.layers;
    j["dataset_hash"] = c.dataset_hash;
    write_text_file(path, j.dump(2) + "\n");
}

OverRefusalCentroid load_centroid(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("corrupt centroid file: ") + e.what());
    }
    OverRefusalCentroid c;
    const auto v = j.at("vector").get<std::vector<double>>();
    c.vector = Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
    c.dataset_size = j.at("dataset_size").get<std::size_t>();
    c.layers = j.at("layers").get<std::vector<int>>();
    c.dataset_hash = j.at("dataset_hash").get<std::string>();
    return c;
}

}  // namespace mosr
