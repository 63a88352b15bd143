// SPDX-License-Identifier: Apache-2.0
#include "mosr/trainer.hpp"

#include "mosr/analysis.hpp"
#include "mosr/checkpoint.hpp"
#include "mosr/io.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace mosr {

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr std::uint64_t kPerturbSalt = 0xd1b54a32d192ed03ULL;

std::string key_of(const std::vector<int>& tokens) { return join_ints(tokens); }

Representation as_representation(const std::map<int, Mat>& hidden, std::span<const int> layers) {
    Representation rep;
    for (int l : layers) {
        rep.layers.push_back(l);
        rep.states.push_back(hidden.at(l));
    }
    return rep;
}

void add_scaled(AdapterSet& into, const AdapterSet& g, double factor) {
    auto dst = into.tensors();
    const auto src = g.tensors();
    for (std::size_t i = 0; i < dst.size(); ++i) *dst[i] += factor * *src[i];
}

nlohmann::json record_to_json(const StepRecord& r) {
    return {{"step", r.step},     {"c_us", r.loss.c_us},   {"c_s", r.loss.c_s},        {"erase", r.loss.erase},
            {"retain", r.loss.retain}, {"total", r.loss.total}, {"weights", r.loss.weights}};
}

StepRecord record_from_json(const nlohmann::json& j) {
    StepRecord r;
    r.step = j.at("step").get<int>();
    r.loss.c_us = j.at("c_us").get<double>();
    r.loss.c_s = j.at("c_s").get<double>();
    r.loss.erase = j.at("erase").get<double>();
    r.loss.retain = j.at("retain").get<double>();
    r.loss.total = j.at("total").get<double>();
    r.loss.weights = j.at("weights").get<std::vector<double>>();
    return r;
}

}  // namespace

void TrainConfig::validate(const ModelConfig& model) const {
    if (total_steps < 1) throw InputError("train: total_steps must be >= 1");
    if (batch_size < 1) throw InputError("train: batch_size must be >= 1");
    if (grad_accumulation < 1) throw InputError("train: grad_accumulation must be >= 1");
    if (!std::isfinite(learning_rate) || learning_rate < 0.0) throw InputError("train: learning_rate must be >= 0");
    if (!std::isfinite(loss_alpha) || loss_alpha < 0.0) throw InputError("train: loss_alpha must be >= 0");
    if (!std::isfinite(temperature) || temperature <= 0.0) throw InputError("train: temperature must be > 0");
    if (prefix_len_tokens < 0) throw InputError("train: prefix_len_tokens must be >= 0");
    if (layer_ids.empty()) throw InputError("train: layer_ids must be non-empty");
    std::set<int> seen;
    for (int l : layer_ids) {
        if (l < 0 || l >= model.n_layers)
            throw InputError("train: layer id " + std::to_string(l) + " outside [0, " + std::to_string(model.n_layers) + ")");
        if (!seen.insert(l).second) throw InputError("train: duplicate layer id " + std::to_string(l));
    }
    if (adapter_rank < 1 || adapter_rank >= model.hidden_dim)
        throw InputError("train: adapter_rank must be in [1, hidden_dim)");
    if (!std::isfinite(adapter_scale) || adapter_scale <= 0.0) throw InputError("train: adapter_scale must be > 0");
    if (!std::isfinite(adapter_init_std) || adapter_init_std < 0.0)
        throw InputError("train: adapter_init_std must be >= 0");
    if (checkpoint_every < 0) throw InputError("train: checkpoint_every must be >= 0");
}

std::vector<std::string> TrainConfig::known_keys() {
    return {"total_steps",     "batch_size",       "grad_accumulation",  "learning_rate",
            "loss_alpha",      "temperature",      "prefix_len_tokens",  "layer_ids",
            "adapter_rank",    "adapter_scale",    "adapter_init_std",   "overlap_weighting",
            "context_augmentation", "erase_norm",  "checkpoint_every",   "seed"};
}

KeyValueConfig TrainConfig::to_kv() const {
    KeyValueConfig kv;
    kv.set("total_steps", std::to_string(total_steps));
    kv.set("batch_size", std::to_string(batch_size));
    kv.set("grad_accumulation", std::to_string(grad_accumulation));
    kv.set("learning_rate", format_double(learning_rate));
    kv.set("loss_alpha", format_double(loss_alpha));
    kv.set("temperature", format_double(temperature));
    kv.set("prefix_len_tokens", std::to_string(prefix_len_tokens));
    kv.set("layer_ids", join_ints(layer_ids));
    kv.set("adapter_rank", std::to_string(adapter_rank));
    kv.set("adapter_scale", format_double(adapter_scale));
    kv.set("adapter_init_std", format_double(adapter_init_std));
    kv.set("overlap_weighting", overlap_weighting ? "on" : "off");
    kv.set("context_augmentation", context_augmentation ? "on" : "off");
    kv.set("erase_norm", to_string(erase_norm));
    kv.set("checkpoint_every", std::to_string(checkpoint_every));
    kv.set("seed", std::to_string(seed));
    return kv;
}

TrainConfig TrainConfig::from_kv(const KeyValueConfig& kv) {
    const auto unknown = kv.unknown_keys(known_keys());
    if (!unknown.empty()) throw ValidationError("train config: unknown key '" + unknown.front() + "'");
    TrainConfig c;
    auto geti = [&](const char* k, int d) { return static_cast<int>(kv.get_int(k, d)); };
    c.total_steps = geti("total_steps", c.total_steps);
    c.batch_size = geti("batch_size", c.batch_size);
    c.grad_accumulation = geti("grad_accumulation", c.grad_accumulation);
    c.learning_rate = kv.get_double("learning_rate", c.learning_rate);
    c.loss_alpha = kv.get_double("loss_alpha", c.loss_alpha);
    c.temperature = kv.get_double("temperature", c.temperature);
    c.prefix_len_tokens = geti("prefix_len_tokens", c.prefix_len_tokens);
    if (kv.has("layer_ids")) c.layer_ids = parse_int_list(kv.get("layer_ids"));
    c.adapter_rank = geti("adapter_rank", c.adapter_rank);
    c.adapter_scale = kv.get_double("adapter_scale", c.adapter_scale);
    c.adapter_init_std = kv.get_double("adapter_init_std", c.adapter_init_std);
    c.overlap_weighting = kv.get_bool("overlap_weighting", c.overlap_weighting);
    c.context_augmentation = kv.get_bool("context_augmentation", c.context_augmentation);
    if (kv.has("erase_norm")) c.erase_norm = erase_norm_from_string(kv.get("erase_norm"));
    c.checkpoint_every = geti("checkpoint_every", c.checkpoint_every);
    c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(c.seed)));
    return c;
}

std::string TrainConfig::hash() const { return sha256_hex(to_kv().to_string()); }

std::string TrainConfig::variant() const {
    if (overlap_weighting && context_augmentation) return "mosr";
    if (overlap_weighting) return "weighting";
    if (context_augmentation) return "augmentation";
    return "baseline";
}

std::string loss_csv_header() { return "step,c_us,c_s,erase,retain,total,w_min,w_max,w_mean"; }

std::string loss_csv_row(const StepRecord& r) {
    const auto& w = r.loss.weights;
    const double w_min = w.empty() ? 0.0 : *std::min_element(w.begin(), w.end());
    const double w_max = w.empty() ? 0.0 : *std::max_element(w.begin(), w.end());
    double w_sum = 0.0;
    for (double x : w) w_sum += x;
    const double w_mean = w.empty() ? 0.0 : w_sum / static_cast<double>(w.size());
    std::ostringstream out;
    out << r.step << ',' << format_double(r.loss.c_us) << ',' << format_double(r.loss.c_s) << ','
        << format_double(r.loss.erase) << ',' << format_double(r.loss.retain) << ',' << format_double(r.loss.total)
        << ',' << format_double(w_min) << ',' << format_double(w_max) << ',' << format_double(w_mean);
    return out.str();
}

TransformerModel strip_adapters(const TransformerModel& model) {
    TransformerModel out(model.config());
    out.mutable_base() = model.base();
    return out;
}

Trainer::Trainer(const TrainConfig& config, const Corpus& corpus, const ModelConfig& model_config)
    : Trainer(config, corpus,
              [&] {
                  config.validate(model_config);
                  TransformerModel live =
                      attach_adapters(TransformerModel(model_config), config.adapter_rank, config.adapter_scale);
                  if (config.adapter_init_std > 0.0) {
                      Rng perturb(config.seed ^ kPerturbSalt);
                      for (auto& slots : live.mutable_adapters().layers)
                          for (auto& f : slots)
                              for (Eigen::Index i = 0; i < f.b.size(); ++i)
                                  f.b.data()[i] = perturb.normal(0.0, config.adapter_init_std);
                  }
                  return live;
              }(),
              clone_frozen(TransformerModel(model_config))) {}

Trainer::Trainer(const TrainConfig& config, const Corpus& corpus, TransformerModel live, TransformerModel frozen)
    : config_(config),
      corpus_(&corpus),
      corpus_hash_(mosr::corpus_hash(corpus)),
      live_(std::move(live)),
      frozen_(std::move(frozen)),
      rng_(config.seed) {
    config_.validate(live_.config());
    if (corpus.unsafe.empty() || corpus.safe.empty()) throw InputError("train: unsafe and safe splits must be non-empty");
    if (corpus.over_refusal.empty()) throw InputError("train: over-refusal split is empty; centroid is not computable");
    if (config_.context_augmentation) {
        for (const auto& s : corpus.unsafe)
            if (static_cast<int>(s.response.size()) < config_.prefix_len_tokens)
                throw InputError("train: prefix_len_tokens " + std::to_string(config_.prefix_len_tokens) +
                                 " exceeds a harmful response of length " + std::to_string(s.response.size()));
    }
    const int longest_prefix = config_.context_augmentation ? config_.prefix_len_tokens : 0;
    for (const auto& s : corpus.safe) {
        const auto len = static_cast<int>(s.tokens().size()) + longest_prefix;
        if (len > live_.config().max_seq_len)
            throw InputError("train: augmented safe sequence of " + std::to_string(len) + " tokens exceeds max_seq_len");
    }
    for (std::size_t i = 0; i < corpus.unsafe.size(); ++i)
        unsafe_by_prompt_.emplace(key_of(corpus.unsafe[i].prompt), i);

    const auto or_prompts = prompts_of(corpus.over_refusal);
    centroid_ = compute_centroid(or_prompts, frozen_, config_.layer_ids);

    adam_.m = live_.adapters().zeros_like();
    adam_.v = live_.adapters().zeros_like();
    grad_buffer_ = live_.adapters().zeros_like();
}

Trainer::Prepared Trainer::prepare_unsafe(std::size_t index) const {
    return {corpus_->unsafe[index].tokens(), "u:" + std::to_string(index)};
}

Trainer::Prepared Trainer::prepare_safe(std::size_t index) const {
    const ChatSample& s = corpus_->safe[index];
    if (config_.context_augmentation && s.response_kind == ResponseKind::refusal) {
        const auto it = unsafe_by_prompt_.find(key_of(s.prompt));
        if (it != unsafe_by_prompt_.end()) {
            const auto aug = augment_context(corpus_->unsafe[it->second], s.response, config_.prefix_len_tokens);
            return {aug.tokens(), "s:" + std::to_string(index) + ":" + std::to_string(config_.prefix_len_tokens)};
        }
    }
    return {s.tokens(), "s:" + std::to_string(index) + ":0"};
}

const Representation& Trainer::frozen_rep(const Prepared& p) {
    auto it = frozen_cache_.find(p.key);
    if (it == frozen_cache_.end())
        it = frozen_cache_.emplace(p.key, gather_representation(frozen_, p.tokens, config_.layer_ids, p.key)).first;
    return it->second;
}

void Trainer::fail_numeric(const std::string& what, const std::vector<std::size_t>& us,
                           const std::vector<std::size_t>& s, const std::vector<double>& w) const {
    std::ostringstream msg;
    msg << "non-finite " << what << " at step " << step_ + 1 << "; unsafe batch [";
    for (std::size_t i = 0; i < us.size(); ++i) msg << (i ? "," : "") << us[i];
    msg << "]; safe batch [";
    for (std::size_t i = 0; i < s.size(); ++i) msg << (i ? "," : "") << s[i];
    msg << "]; weights [";
    for (std::size_t i = 0; i < w.size(); ++i) msg << (i ? "," : "") << format_double(w[i]);
    msg << "]";
    throw NumericError(msg.str());
}

void Trainer::apply_update() {
    ++adam_.updates;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(adam_.updates));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(adam_.updates));
    auto params = live_.mutable_adapters().tensors();
    auto m = adam_.m.tensors();
    auto v = adam_.v.tensors();
    auto g = grad_buffer_.tensors();
    for (std::size_t i = 0; i < params.size(); ++i) {
        *m[i] = kBeta1 * *m[i] + (1.0 - kBeta1) * *g[i];
        *v[i] = kBeta2 * *v[i] + (1.0 - kBeta2) * g[i]->cwiseAbs2();
        params[i]->array() -= config_.learning_rate * (m[i]->array() / c1) / ((v[i]->array() / c2).sqrt() + kAdamEps);
        g[i]->setZero();
    }
}

void Trainer::run_step() {
    if (finished()) return;
    const int t = step_ + 1;
    const std::size_t n = static_cast<std::size_t>(config_.batch_size);

    std::vector<std::size_t> us_idx(n), s_idx(n);
    for (auto& i : us_idx) i = rng_.below(corpus_->unsafe.size());
    for (auto& i : s_idx) i = rng_.below(corpus_->safe.size());

    const Coefficients coeff = schedule(t, config_.total_steps, config_.loss_alpha);

    std::vector<Prepared> us, s;
    for (auto i : us_idx) us.push_back(prepare_unsafe(i));
    for (auto i : s_idx) s.push_back(prepare_safe(i));

    std::vector<double> weights(n, 1.0 / static_cast<double>(n));
    if (config_.overlap_weighting) {
        std::vector<double> scores;
        for (auto i : us_idx) {
            const std::string key = "u:" + std::to_string(i);
            auto it = score_cache_.find(key);
            if (it == score_cache_.end()) {
                const auto rep = gather_representation(frozen_, corpus_->unsafe[i].prompt, config_.layer_ids);
                it = score_cache_.emplace(key, overlap_score(rep, centroid_)).first;
            }
            scores.push_back(it->second);
        }
        weights = batch_weights(scores, config_.temperature);
    }

    std::vector<Representation> frozen_us, frozen_s, live_us, live_s;
    std::vector<ForwardTrace> trace_us, trace_s;
    for (const auto& p : us) {
        frozen_us.push_back(frozen_rep(p));
        trace_us.push_back(forward_traced(live_, p.tokens, config_.layer_ids));
        live_us.push_back(as_representation(trace_us.back().hidden, config_.layer_ids));
    }
    for (const auto& p : s) {
        frozen_s.push_back(frozen_rep(p));
        trace_s.push_back(forward_traced(live_, p.tokens, config_.layer_ids));
        live_s.push_back(as_representation(trace_s.back().hidden, config_.layer_ids));
    }

    const LossTerms erase = erase_loss_terms(weights, frozen_us, live_us, config_.erase_norm);
    const LossTerms retain = retain_loss_terms(frozen_s, live_s);
    if (!std::isfinite(erase.value) || !std::isfinite(retain.value)) fail_numeric("loss", us_idx, s_idx, weights);
    LossBreakdown breakdown = total_loss(coeff, erase.value, retain.value, weights);

    const double window = static_cast<double>(config_.grad_accumulation);
    auto backprop = [&](const std::vector<ForwardTrace>& traces, const RepGradient& grads, double coefficient) {
        if (coefficient == 0.0) return;
        for (std::size_t i = 0; i < traces.size(); ++i) {
            std::map<int, Mat> grad_hidden;
            for (std::size_t j = 0; j < config_.layer_ids.size(); ++j)
                grad_hidden.emplace(config_.layer_ids[j], grads[i][j]);
            add_scaled(grad_buffer_, adapter_gradients(live_, traces[i], grad_hidden), coefficient / window);
        }
    };
    backprop(trace_us, erase.grad_live, coeff.c_us);
    backprop(trace_s, retain.grad_live, coeff.c_s);
    for (const Mat* g : grad_buffer_.tensors())
        if (!g->allFinite()) fail_numeric("gradient", us_idx, s_idx, weights);

    ++micro_steps_;
    step_ = t;
    if (micro_steps_ % config_.grad_accumulation == 0 || step_ == config_.total_steps) apply_update();
    log_.push_back({t, std::move(breakdown)});
}

void Trainer::run(std::optional<int> until) {
    const int stop = std::min(until.value_or(config_.total_steps), config_.total_steps);
    while (step_ < stop) run_step();
}

std::string Trainer::loss_csv() const {
    std::string out = loss_csv_header() + "\n";
    for (const auto& r : log_) out += loss_csv_row(r) + "\n";
    return out;
}

void Trainer::save(const std::filesystem::path& path) const {
    nlohmann::json meta;
    meta["kind"] = "train_state";
    meta["step"] = step_;
    meta["config"] = config_.to_kv().values();
    meta["config_hash"] = config_.hash();
    meta["corpus_hash"] = corpus_hash_;
    meta["variant"] = config_.variant();
    meta["rng"] = rng_.serialize();
    meta["adam_updates"] = adam_.updates;
    meta["micro_steps"] = micro_steps_;
    nlohmann::json log = nlohmann::json::array();
    for (const auto& r : log_) log.push_back(record_to_json(r));
    meta["log"] = std::move(log);
    meta["centroid"] = {{"vector", std::vector<double>(centroid_.vector.data(), centroid_.vector.data() + centroid_.vector.size())},
                        {"dataset_size", centroid_.dataset_size},
                        {"layers", centroid_.layers},
                        {"dataset_hash", centroid_.dataset_hash}};

    std::map<std::string, Mat> extra;
    const auto m = adam_.m.tensors();
    const auto v = adam_.v.tensors();
    const auto g = grad_buffer_.tensors();
    for (std::size_t i = 0; i < m.size(); ++i) {
        extra["adam_m." + std::to_string(i)] = *m[i];
        extra["adam_v." + std::to_string(i)] = *v[i];
        extra["grad." + std::to_string(i)] = *g[i];
    }
    save_checkpoint(path, live_, meta, extra);
}

Trainer Trainer::resume(const std::filesystem::path& checkpoint, const TrainConfig& config, const Corpus& corpus) {
    LoadedCheckpoint ck = load_checkpoint(checkpoint);
    const auto& meta = ck.meta;
    if (!meta.contains("config_hash") || !meta.contains("corpus_hash"))
        throw ValidationError("resume: " + checkpoint.string() + " is not a training-state checkpoint");
    if (meta.at("config_hash").get<std::string>() != config.hash())
        throw ValidationError("resume: config hash mismatch; the checkpoint was written with a different config");
    if (meta.at("corpus_hash").get<std::string>() != mosr::corpus_hash(corpus))
        throw ValidationError("resume: corpus hash mismatch");
    if (!ck.model.has_adapters()) throw ValidationError("resume: checkpoint holds no adapters");

    TransformerModel frozen = clone_frozen(strip_adapters(ck.model));
    Trainer tr(config, corpus, std::move(ck.model), std::move(frozen));
    tr.step_ = meta.at("step").get<int>();
    tr.rng_.deserialize(meta.at("rng").get<std::string>());
    tr.adam_.updates = meta.at("adam_updates").get<long long>();
    tr.micro_steps_ = meta.at("micro_steps").get<int>();
    for (const auto& r : meta.at("log")) tr.log_.push_back(record_from_json(r));

    auto m = tr.adam_.m.tensors();
    auto v = tr.adam_.v.tensors();
    auto g = tr.grad_buffer_.tensors();
    auto fetch = [&](const std::string& name, Mat* into) {
        const auto it = ck.extra.find(name);
        if (it == ck.extra.end()) throw ValidationError("resume: checkpoint lacks tensor '" + name + "'");
        if (it->second.rows() != into->rows() || it->second.cols() != into->cols())
            throw ValidationError("resume: tensor '" + name + "' has the wrong shape");
        *into = it->second;
    };
    for (std::size_t i = 0; i < m.size(); ++i) {
        fetch("adam_m." + std::to_string(i), m[i]);
        fetch("adam_v." + std::to_string(i), v[i]);
        fetch("grad." + std::to_string(i), g[i]);
    }
    return tr;
}

TrainSummary summarize(const Trainer& trainer, const Corpus& corpus) {
    if (corpus.malicious_eval.empty() || corpus.benign_eval.empty() || corpus.or_eval.empty())
        throw InputError("summarize: evaluation splits must be non-empty");
    const auto& layers = trainer.config().layer_ids;
    TrainSummary out;

    double cos_total = 0.0;
    for (const auto& s : corpus.malicious_eval) {
        const auto tokens = s.tokens();
        cos_total += rep_cosine(gather_representation(trainer.frozen(), tokens, layers),
                                gather_representation(trainer.live(), tokens, layers));
    }
    out.heldout_unsafe_cosine = cos_total / static_cast<double>(corpus.malicious_eval.size());

    std::vector<Representation> frozen_b, live_b;
    for (const auto& s : corpus.benign_eval) {
        const auto tokens = s.tokens();
        frozen_b.push_back(gather_representation(trainer.frozen(), tokens, layers));
        live_b.push_back(gather_representation(trainer.live(), tokens, layers));
    }
    out.heldout_benign_retain = retain_loss(frozen_b, live_b);

    const auto benign = prompts_of(corpus.benign_eval);
    const auto over = prompts_of(corpus.or_eval);
    const auto dist = layerwise_cosine_distance(trainer.live(), benign, over);
    for (int l : layers) out.benign_or_distance[l] = dist.at(l);
    return out;
}

}  // namespace mosr
