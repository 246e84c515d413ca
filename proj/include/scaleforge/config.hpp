// SPDX-FileCopyrightText: 2026 The ScaleForge Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scaleforge/trainer.hpp"

namespace scaleforge {

inline constexpr const char* kConfigSchema = "scaleforge.config/1";

enum class FieldType { Int, Float, String, Bool };

/// One user-settable configuration field. The command-line flag is the key
/// with underscores replaced by dashes.
struct FieldSpec {
    std::string key;
    FieldType type;
    nlohmann::json default_value;
    std::string help;

    std::string flag() const {
        std::string f = key;
        for (char& c : f)
            if (c == '_') c = '-';
        return "--" + f;
    }
};

inline const std::vector<FieldSpec>& field_registry() {
    using T = FieldType;
    static const std::vector<FieldSpec> fields = {
        {"arch", T::String, "decoder", "model shape: decoder, encoder, encoder-decoder"},
        {"layers", T::Int, 2, "layers per stack"},
        {"enc_layers", T::Int, 0, "encoder layers (0: use --layers)"},
        {"dec_layers", T::Int, 0, "decoder layers (0: use --layers)"},
        {"hidden", T::Int, 64, "model width"},
        {"heads", T::Int, 4, "attention heads"},
        {"ffn", T::Int, 256, "feed-forward inner width"},
        {"vocab", T::Int, 16, "vocabulary size (model and task)"},
        {"norm", T::String, "subln", "residual norm: postln, preln, subln, deepnorm"},
        {"experts", T::Int, 0, "experts per MoE layer (0: dense)"},
        {"top_k", T::Int, 2, "experts per token (1 or 2)"},
        {"moe_freq", T::Int, 2, "every n-th FFN is an MoE layer"},
        {"routing_dim", T::Int, 16, "router projection width"},
        {"router_temperature", T::Float, 0.07, "initial router temperature"},
        {"capacity_factor", T::Float, 0.0, "expert capacity factor (0: unlimited)"},
        {"balance_weight", T::Float, 0.01, "weight of the balance loss"},
        {"dropout", T::Float, 0.0, "dropout on embeddings and residual branches"},
        {"attn_dropout", T::Float, 0.0, "dropout on attention probabilities"},
        {"tie_embeddings", T::Bool, false, "share token embedding and output head"},
        {"gamma", T::Float, 0.0, "Sub-LN init gain (0: depth rule)"},
        {"alpha", T::Float, 0.0, "DeepNorm residual multiplier (0: depth rule)"},
        {"beta", T::Float, 0.0, "DeepNorm init gain (0: depth rule)"},
        {"clip", T::String, "none", "gradient clipping: none, vanilla, sparseclip"},
        {"xi", T::Float, 1.0, "clipping threshold"},
        {"lr", T::Float, 5e-4, "peak learning rate"},
        {"adam_beta1", T::Float, 0.9, "Adam beta1"},
        {"adam_beta2", T::Float, 0.98, "Adam beta2"},
        {"adam_eps", T::Float, 1e-8, "Adam epsilon"},
        {"weight_decay", T::Float, 0.0, "decoupled weight decay"},
        {"schedule", T::String, "polynomial_decay", "lr schedule: polynomial_decay, inverse_sqrt"},
        {"warmup", T::Int, 0, "linear warmup steps"},
        {"end_lr", T::Float, 0.0, "final lr of polynomial decay"},
        {"steps", T::Int, 1000, "training steps"},
        {"batch", T::Int, 32, "sequences per step"},
        {"seq_len", T::Int, 64, "tokens per sequence"},
        {"task", T::String, "markov_lm", "task: markov_lm, text_lm, copy_mt, reverse_mt"},
        {"markov_order", T::Int, 1, "Markov source order"},
        {"concentration", T::Float, 0.5, "Dirichlet concentration of Markov rows"},
        {"corpus_tokens", T::Int, 200000, "generated corpus length"},
        {"text_path", T::String, "", "byte-level text corpus for text_lm"},
        {"split_seed", T::Int, 1234, "seed of corpus generation and the train/valid split"},
        {"valid_sequences", T::Int, 64, "held-out sequences"},
        {"label_smoothing", T::Float, 0.0, "label smoothing of the training loss"},
        {"seed", T::Int, 1, "training seed (init, batches, dropout)"},
        {"eval_every", T::Int, 100, "validation interval in steps"},
        {"timing", T::Bool, false, "record wall-clock fields in metrics"},
        {"out", T::String, "runs/latest", "run directory"},
    };
    return fields;
}

inline const FieldSpec& field_spec(const std::string& key) {
    for (const auto& f : field_registry())
        if (f.key == key) return f;
    throw ConfigError("unknown config field '" + key + "'");
}

/// Parses a command-line string into the field's JSON type.
inline nlohmann::json parse_field_value(const FieldSpec& f, const std::string& text) {
    auto bad = [&] { return ConfigError("invalid value '" + text + "' for " + f.flag()); };
    switch (f.type) {
        case FieldType::Int: {
            if (text.empty() || text[0] == '-') throw bad();
            char* end = nullptr;
            errno = 0;
            const unsigned long long v = std::strtoull(text.c_str(), &end, 10);
            if (errno != 0 || *end != '\0') throw bad();
            return static_cast<std::uint64_t>(v);
        }
        case FieldType::Float: {
            char* end = nullptr;
            errno = 0;
            const double v = std::strtod(text.c_str(), &end);
            if (text.empty() || errno != 0 || *end != '\0' || !std::isfinite(v)) throw bad();
            return v;
        }
        case FieldType::Bool:
            if (text == "true" || text == "1") return true;
            if (text == "false" || text == "0") return false;
            throw bad();
        case FieldType::String:
            return text;
    }
    throw bad();
}

/// Type check of a value read from a config file.
inline nlohmann::json coerce_field_value(const FieldSpec& f, const nlohmann::json& v) {
    auto bad = [&] { return ConfigError("config field '" + f.key + "' has the wrong type"); };
    switch (f.type) {
        case FieldType::Int:
            if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) throw bad();
            return v.get<std::uint64_t>();
        case FieldType::Float:
            if (!v.is_number()) throw bad();
            return v.get<double>();
        case FieldType::Bool:
            if (!v.is_boolean()) throw bad();
            return v;
        case FieldType::String:
            if (!v.is_string()) throw bad();
            return v;
    }
    throw bad();
}

/// A verbatim row of a published hyperparameter table.
struct TableRow {
    std::string label;
    std::string value;
    std::string citation;
};

struct Preset {
    std::string name;
    std::string summary;
    std::string citation;  // table the values come from
    bool runnable = false;
    std::string base;      // desk presets: the full-scale preset they shrink
    nlohmann::json values;
    std::vector<TableRow> table;
};

namespace detail {

inline std::vector<TableRow> rows(const std::string& cite, std::vector<std::pair<std::string, std::string>> kv) {
    std::vector<TableRow> out;
    for (auto& [k, v] : kv) out.push_back(TableRow{k, v, cite});
    return out;
}

inline std::vector<Preset> build_presets() {
    using nlohmann::json;
    const std::string t1 = "appendix Table 1";
    const std::string t2 = "appendix Table 2";
    const std::string t3 = "appendix Table 3";
    const std::string t4 = "appendix Table 4";

    Preset lm_dense{"lm-dense", "dense language model", t1, false, "", json::object(), {}};
    lm_dense.table = rows(t1, {{"Layers", "{12, 24, 48, 96}"},
                               {"Hidden size", "1024"},
                               {"FFN inner hidden size", "4096"},
                               {"Attention heads", "16"},
                               {"Peak learning rate", "5e-4"},
                               {"Batch size", "2048"},
                               {"Adam β", "(0.9, 0.98)"},
                               {"Learning rate schedule", "Polynomial decay"},
                               {"Warmup updates", "750"},
                               {"Dropout", "0.1"},
                               {"Attention dropout", "0.1"},
                               {"Weight decay", "0.01"}});
    lm_dense.values = {{"arch", "decoder"},     {"layers", 12},        {"hidden", 1024},
                       {"ffn", 4096},           {"heads", 16},         {"lr", 5e-4},
                       {"batch", 2048},         {"adam_beta1", 0.9},   {"adam_beta2", 0.98},
                       {"schedule", "polynomial_decay"}, {"warmup", 750}, {"dropout", 0.1},
                       {"attn_dropout", 0.1},   {"weight_decay", 0.01}, {"seq_len", 128},
                       {"steps", 50000},        {"norm", "subln"},     {"clip", "none"}};

    Preset lm_sparse{"lm-sparse", "sparse (MoE) language model", t2, false, "", json::object(), {}};
    lm_sparse.table = rows(t2, {{"Layers", "12"},
                                {"Experts", "{16, 64, 256}"},
                                {"Hidden size", "1024"},
                                {"FFN inner hidden size", "4096"},
                                {"Attention heads", "16"},
                                {"MoE Frequency", "2"},
                                {"Weight of Balance Loss", "0.01"},
                                {"Peak learning rate", "5e-4"},
                                {"Batch size", "2048"},
                                {"Adam β", "(0.9, 0.98)"},
                                {"Learning rate schedule", "Polynomial decay"},
                                {"Warmup updates", "750"},
                                {"Dropout", "0.1"},
                                {"Attention dropout", "0.1"},
                                {"Weight decay", "0.01"}});
    lm_sparse.values = lm_dense.values;
    lm_sparse.values.update(json{{"experts", 16}, {"moe_freq", 2}, {"balance_weight", 0.01}});

    Preset mt_dense{"mt-dense", "dense encoder-decoder translation model", t3, false, "", json::object(), {}};
    mt_dense.table = rows(t3, {{"Layers", "{12-12, 24-24, 48-48, 96-96}"},
                               {"Hidden size", "1024"},
                               {"FFN inner hidden size", "4096"},
                               {"Attention heads", "16"},
                               {"Peak Learning rate", "5e-4"},
                               {"Learning rate schedule", "Inverse sqrt"},
                               {"Warm-up updates", "6000"},
                               {"Batch Size (tokens)", "262K"},
                               {"Adam β", "(0.9, 0.98)"},
                               {"Label smoothing", "0.1"},
                               {"Gradient clipping", "1.0"},
                               {"Dropout", "0.1"},
                               {"Weight decay", "0.0"}});
    mt_dense.values = {{"arch", "encoder-decoder"}, {"layers", 12},       {"hidden", 1024},
                       {"ffn", 4096},               {"heads", 16},        {"lr", 5e-4},
                       {"schedule", "inverse_sqrt"}, {"warmup", 6000},    {"adam_beta1", 0.9},
                       {"adam_beta2", 0.98},        {"label_smoothing", 0.1}, {"clip", "vanilla"},
                       {"xi", 1.0},                 {"dropout", 0.1},     {"weight_decay", 0.0},
                       {"task", "copy_mt"},         {"seq_len", 128},     {"norm", "subln"}};

    Preset mt_sparse{"mt-sparse", "sparse (MoE) encoder-decoder translation model", t4, false, "", json::object(), {}};
    mt_sparse.table = rows(t4, {{"Layers", "12-12"},
                                {"Experts", "{16, 64, 256}"},
                                {"Hidden size", "1024"},
                                {"FFN inner hidden size", "4096"},
                                {"Attention heads", "16"},
                                {"MoE Frequency", "2"},
                                {"Weight of Balance Loss", "0.01"},
                                {"Peak Learning rate", "5e-4"},
                                {"Learning rate schedule", "Inverse sqrt"},
                                {"Warm-up updates", "6000"},
                                {"Batch Size (tokens)", "262K"},
                                {"Adam β", "(0.9, 0.98)"},
                                {"Label smoothing", "0.1"},
                                {"Gradient clipping", "1.0"},
                                {"Dropout", "0.1"},
                                {"Weight decay", "0.0"}});
    mt_sparse.values = mt_dense.values;
    mt_sparse.values.update(
        json{{"experts", 16}, {"moe_freq", 2}, {"balance_weight", 0.01}, {"clip", "sparseclip"}});

    // Desk scale keeps every optimizer and regularization value and shrinks
    // the geometry so a run takes minutes on one core.
    const json desk = {{"layers", 2}, {"hidden", 64}, {"heads", 4},   {"ffn", 256},
                       {"seq_len", 64}, {"batch", 32}, {"steps", 2000}, {"vocab", 16}};
    auto make_desk = [&](const Preset& full, json extra) {
        Preset p{full.name + "-desk", full.summary + ", desk scale", full.citation, true, full.name, full.values,
                 full.table};
        p.values.update(desk);
        p.values.update(extra);
        return p;
    };
    std::vector<Preset> out = {lm_dense, lm_sparse, mt_dense, mt_sparse};
    out.push_back(make_desk(lm_dense, json::object()));
    out.push_back(make_desk(lm_sparse, json{{"experts", 4}}));
    out.push_back(make_desk(mt_dense, json{{"warmup", 400}}));
    out.push_back(make_desk(mt_sparse, json{{"experts", 4}, {"warmup", 400}}));
    return out;
}

}  // namespace detail

inline const std::vector<Preset>& presets() {
    static const std::vector<Preset> all = detail::build_presets();
    return all;
}

inline const Preset& find_preset(const std::string& name) {
    for (const auto& p : presets())
        if (p.name == name) return p;
    std::string known;
    for (const auto& p : presets()) known += (known.empty() ? "" : ", ") + p.name;
    throw ConfigError("unknown preset '" + name + "' (" + known + ")");
}

/// Field values after layering, with where each one came from
/// ("default", "preset", "config" or "flag").
struct ResolvedConfig {
    std::string preset;
    nlohmann::json values = nlohmann::json::object();
    std::map<std::string, std::string> sources;
    std::vector<TableRow> table;

    template <class T>
    T get(const std::string& key) const {
        return values.at(key).get<T>();
    }

    nlohmann::json echo() const {
        nlohmann::json j;
        j["schema"] = kConfigSchema;
        j["preset"] = preset;
        j["values"] = values;
        j["sources"] = sources;
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& r : table) rows.push_back({{"row", r.label}, {"value", r.value}, {"citation", r.citation}});
        j["table_values"] = rows;
        return j;
    }
};

inline void check_combination(const ResolvedConfig& c) {
    const auto clip = parse_clip_mode(c.get<std::string>("clip"));
    if (clip == ClipMode::SparseClip && c.get<std::size_t>("experts") == 0)
        throw ConfigError("clip 'sparseclip' needs an MoE model; set --experts");
    parse_arch(c.get<std::string>("arch"));
    parse_variant(c.get<std::string>("norm"));
    parse_schedule(c.get<std::string>("schedule"));
    parse_task(c.get<std::string>("task"));
}

/// defaults < preset < config file < flags. `file_values` may be a plain
/// object of fields or a config echo; `flags` holds raw command-line strings.
inline ResolvedConfig resolve_config(const std::string& preset_name, const nlohmann::json& file_values,
                                     const std::map<std::string, std::string>& flags) {
    ResolvedConfig c;
    for (const auto& f : field_registry()) {
        c.values[f.key] = f.default_value;
        c.sources[f.key] = "default";
    }
    std::string name = preset_name;
    const nlohmann::json* file = &file_values;
    if (file_values.is_object() && file_values.contains("values")) {
        if (name.empty()) name = file_values.value("preset", std::string());
        file = &file_values["values"];
    }
    if (!name.empty()) {
        const Preset& p = find_preset(name);
        c.preset = p.name;
        c.table = p.table;
        for (const auto& [k, v] : p.values.items()) {
            c.values[k] = coerce_field_value(field_spec(k), v);
            c.sources[k] = "preset";
        }
    }
    if (file->is_object()) {
        for (const auto& [k, v] : file->items()) {
            c.values[k] = coerce_field_value(field_spec(k), v);
            c.sources[k] = "config";
        }
    } else if (!file->is_null()) {
        throw ConfigError("config file must hold a JSON object");
    }
    for (const auto& [k, text] : flags) {
        c.values[k] = parse_field_value(field_spec(k), text);
        c.sources[k] = "flag";
    }
    check_combination(c);
    return c;
}

/// Concrete training options. Full-scale presets resolve but are refused here.
inline TrainOptions to_train_options(const ResolvedConfig& c) {
    if (!c.preset.empty() && !find_preset(c.preset).runnable)
        throw ConfigError("preset '" + c.preset + "' is full scale and documentation only; use '" + c.preset +
                          "-desk'");
    TrainOptions o;
    auto sz = [&](const char* k) { return c.get<std::size_t>(k); };
    auto dbl = [&](const char* k) { return c.get<double>(k); };
    auto str = [&](const char* k) { return c.get<std::string>(k); };
    auto opt_pos = [&](const char* k) { return dbl(k) > 0.0 ? std::optional<double>(dbl(k)) : std::nullopt; };

    ModelConfig& m = o.model;
    m.arch = parse_arch(str("arch"));
    m.layers_enc = m.has_encoder() ? (sz("enc_layers") > 0 ? sz("enc_layers") : sz("layers")) : 0;
    m.layers_dec = m.has_decoder() ? (sz("dec_layers") > 0 ? sz("dec_layers") : sz("layers")) : 0;
    m.hidden = sz("hidden");
    m.heads = sz("heads");
    m.ffn_inner = sz("ffn");
    m.vocab = sz("vocab");
    m.max_positions = sz("seq_len");
    m.norm = parse_variant(str("norm"));
    if (sz("experts") > 0) {
        RouterConfig r;
        r.num_experts = sz("experts");
        r.top_k = sz("top_k");
        r.routing_dim = sz("routing_dim");
        r.temperature_init = dbl("router_temperature");
        r.capacity_factor = opt_pos("capacity_factor");
        r.balance_weight = dbl("balance_weight");
        m.moe = r;
    }
    m.moe_frequency = sz("moe_freq");
    m.dropout = dbl("dropout");
    m.attn_dropout = dbl("attn_dropout");
    m.tie_embeddings = c.get<bool>("tie_embeddings");
    m.gamma = opt_pos("gamma");
    m.alpha = opt_pos("alpha");
    m.beta = opt_pos("beta");

    o.optim.peak_lr = dbl("lr");
    o.optim.beta1 = dbl("adam_beta1");
    o.optim.beta2 = dbl("adam_beta2");
    o.optim.eps = dbl("adam_eps");
    o.optim.weight_decay = dbl("weight_decay");
    o.optim.schedule = parse_schedule(str("schedule"));
    o.optim.warmup_steps = sz("warmup");
    o.optim.total_steps = sz("steps");
    o.optim.end_lr = dbl("end_lr");

    o.clip.mode = parse_clip_mode(str("clip"));
    o.clip.xi = dbl("xi");

    o.task.kind = parse_task(str("task"));
    o.task.seq_len = sz("seq_len");
    o.task.vocab = sz("vocab");
    o.task.markov_order = sz("markov_order");
    o.task.concentration = dbl("concentration");
    o.task.corpus_tokens = sz("corpus_tokens");
    o.task.text_path = str("text_path");
    o.task.split_seed = c.get<std::uint64_t>("split_seed");
    o.task.valid_sequences = sz("valid_sequences");

    o.steps = sz("steps");
    o.batch = sz("batch");
    o.seed = c.get<std::uint64_t>("seed");
    o.label_smoothing = dbl("label_smoothing");
    o.eval_every = sz("eval_every");
    o.timing = c.get<bool>("timing");
    o.out = str("out");
    o.echo = c.echo();
    o.validate();
    return o;
}

namespace detail {
inline std::size_t display_width(const std::string& s) {
    std::size_t n = 0;
    for (unsigned char c : s)
        if ((c & 0xC0) != 0x80) ++n;
    return n;
}
}  // namespace detail

/// Human-readable preset listing; full-scale presets list their table rows verbatim.
inline std::string presets_listing() {
    std::string s;
    for (const auto& p : presets()) {
        if (p.runnable) continue;
        s += p.name + ": " + p.summary + " (full scale, " + p.citation + ")\n";
        std::size_t w = 0;
        for (const auto& r : p.table) w = std::max(w, detail::display_width(r.label));
        for (const auto& r : p.table) {
            s += "  " + r.label + std::string(w - detail::display_width(r.label) + 2, ' ') + r.value + "  [" + r.citation + "]\n";
        }
        s += "\n";
    }
    for (const auto& p : presets()) {
        if (!p.runnable) continue;
        s += p.name + ": " + p.summary + " (runnable, shrinks " + p.base + ")\n ";
        const Preset& base = find_preset(p.base);
        for (const auto& [k, v] : p.values.items())
            if (!base.values.contains(k) || base.values[k] != v) s += " " + k + "=" + v.dump();
        s += "\n";
    }
    return s;
}

}  // namespace scaleforge
