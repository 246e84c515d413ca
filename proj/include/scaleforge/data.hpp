// SPDX-FileCopyrightText: 2026 The ScaleForge Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "scaleforge/blocks.hpp"
#include "scaleforge/error.hpp"
#include "scaleforge/rng.hpp"

namespace scaleforge {

enum class TaskKind { MarkovLm, TextLm, CopyMt, ReverseMt };

inline const char* task_name(TaskKind k) {
    switch (k) {
        case TaskKind::MarkovLm: return "markov_lm";
        case TaskKind::TextLm: return "text_lm";
        case TaskKind::CopyMt: return "copy_mt";
        case TaskKind::ReverseMt: return "reverse_mt";
    }
    return "?";
}

inline TaskKind parse_task(const std::string& s) {
    if (s == "markov_lm") return TaskKind::MarkovLm;
    if (s == "text_lm") return TaskKind::TextLm;
    if (s == "copy_mt") return TaskKind::CopyMt;
    if (s == "reverse_mt") return TaskKind::ReverseMt;
    throw ConfigError("unknown task '" + s + "' (markov_lm, text_lm, copy_mt, reverse_mt)");
}

struct TaskSpec {
    TaskKind kind = TaskKind::MarkovLm;
    std::size_t seq_len = 64;
    std::size_t vocab = 16;
    std::size_t markov_order = 1;
    double concentration = 0.5;
    std::size_t corpus_tokens = 200000;
    std::string text_path;
    std::uint64_t split_seed = 1234;
    double valid_fraction = 0.1;
    std::size_t valid_sequences = 64;

    bool is_lm() const { return kind == TaskKind::MarkovLm || kind == TaskKind::TextLm; }
};

/// Order-k Markov chain over V symbols. Contexts are the last k tokens encoded
/// base V (most recent token least significant); order 0 has one context.
class MarkovSource {
public:
    MarkovSource(std::size_t order, std::size_t vocab, std::vector<double> table)
        : order_(order), vocab_(vocab), table_(std::move(table)) {
        if (vocab_ < 2) throw ConfigError("markov: vocab must be >= 2");
        contexts_ = 1;
        for (std::size_t i = 0; i < order_; ++i) contexts_ *= vocab_;
        if (table_.size() != contexts_ * vocab_) throw ShapeError("markov: transition table has wrong size");
        for (std::size_t c = 0; c < contexts_; ++c) {
            double s = 0.0;
            for (std::size_t t = 0; t < vocab_; ++t) {
                const double p = table_[c * vocab_ + t];
                if (!(p >= 0.0) || !std::isfinite(p)) throw ConfigError("markov: degenerate transition row");
                s += p;
            }
            if (!(s > 0.0)) throw ConfigError("markov: degenerate transition row (all zero)");
            for (std::size_t t = 0; t < vocab_; ++t) table_[c * vocab_ + t] /= s;
        }
        compute_stationary();
    }

    /// Rows drawn from Dirichlet(concentration) via normalized Gamma samples.
    static MarkovSource random(std::size_t order, std::size_t vocab, double concentration, Rng& rng) {
        if (!(concentration > 0.0)) throw ConfigError("markov: concentration must be positive");
        if (vocab < 2) throw ConfigError("markov: vocab must be >= 2");
        std::size_t contexts = 1;
        for (std::size_t i = 0; i < order; ++i) contexts *= vocab;
        std::vector<double> table(contexts * vocab);
        for (double& v : table) v = rng.gamma(concentration);
        return MarkovSource(order, vocab, std::move(table));
    }

    static MarkovSource uniform(std::size_t vocab) { return MarkovSource(0, vocab, std::vector<double>(vocab, 1.0)); }

    /// Order 1, token i always followed by (i + 1) mod V.
    static MarkovSource cycle(std::size_t vocab) {
        std::vector<double> table(vocab * vocab, 0.0);
        for (std::size_t i = 0; i < vocab; ++i) table[i * vocab + (i + 1) % vocab] = 1.0;
        return MarkovSource(1, vocab, std::move(table));
    }

    std::size_t order() const { return order_; }
    std::size_t vocab() const { return vocab_; }
    std::size_t contexts() const { return contexts_; }
    double prob(std::size_t context, std::size_t next) const { return table_[context * vocab_ + next]; }
    const std::vector<double>& stationary() const { return stationary_; }

    std::size_t next_context(std::size_t context, std::size_t token) const {
        if (order_ == 0) return 0;
        return (context * vocab_ + token) % contexts_;
    }

    /// H = -sum_s pi(s) sum_t P(t|s) ln P(t|s), in nats per token.
    double entropy_rate() const {
        double h = 0.0;
        for (std::size_t c = 0; c < contexts_; ++c) {
            double hc = 0.0;
            for (std::size_t t = 0; t < vocab_; ++t) {
                const double p = prob(c, t);
                if (p > 0.0) hc -= p * std::log(p);
            }
            h += stationary_[c] * hc;
        }
        return h;
    }

    /// n tokens started from a stationary context.
    std::vector<int> sample(std::size_t n, Rng& rng) const {
        std::vector<int> out;
        out.reserve(n);
        std::size_t ctx = draw(stationary_, rng);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t t = draw(std::span<const double>(table_).subspan(ctx * vocab_, vocab_), rng);
            out.push_back(static_cast<int>(t));
            ctx = next_context(ctx, t);
        }
        return out;
    }

    /// Mean -ln P(x_i | previous k tokens) over positions i >= k.
    double empirical_nll(std::span<const int> tokens) const {
        if (tokens.size() <= order_) throw ConfigError("markov: sample too short");
        std::size_t ctx = 0;
        for (std::size_t i = 0; i < order_; ++i) ctx = next_context(ctx, static_cast<std::size_t>(tokens[i]));
        double total = 0.0;
        for (std::size_t i = order_; i < tokens.size(); ++i) {
            const auto t = static_cast<std::size_t>(tokens[i]);
            total -= std::log(prob(ctx, t));
            ctx = next_context(ctx, t);
        }
        return total / static_cast<double>(tokens.size() - order_);
    }

private:
    static std::size_t draw(std::span<const double> p, Rng& rng) {
        const double u = rng.uniform();
        double acc = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            acc += p[i];
            if (u < acc) return i;
        }
        // Rounding left u above the last partial sum: take the last non-zero entry.
        for (std::size_t i = p.size(); i-- > 0;)
            if (p[i] > 0.0) return i;
        return p.size() - 1;
    }

    // Power iteration on the lazy chain (I + P) / 2, which shares the
    // stationary distribution and is aperiodic.
    void compute_stationary() {
        std::vector<double> pi(contexts_, 1.0 / static_cast<double>(contexts_));
        std::vector<double> next(contexts_);
        for (int it = 0; it < 200000; ++it) {
            for (std::size_t c = 0; c < contexts_; ++c) next[c] = 0.5 * pi[c];
            for (std::size_t c = 0; c < contexts_; ++c)
                for (std::size_t t = 0; t < vocab_; ++t) next[next_context(c, t)] += 0.5 * pi[c] * prob(c, t);
            double diff = 0.0;
            for (std::size_t c = 0; c < contexts_; ++c) diff += std::abs(next[c] - pi[c]);
            pi.swap(next);
            if (diff < 1e-15) break;
        }
        stationary_ = std::move(pi);
    }

    std::size_t order_;
    std::size_t vocab_;
    std::size_t contexts_ = 1;
    std::vector<double> table_;
    std::vector<double> stationary_;
};

struct MarkovCorpus {
    MarkovSource source;
    std::vector<int> tokens;
    double entropy_rate;
};

inline MarkovCorpus generate_markov_corpus(const TaskSpec& spec, Rng& rng) {
    if (spec.vocab < 2) throw ConfigError("markov corpus: vocab must be >= 2");
    MarkovSource src = MarkovSource::random(spec.markov_order, spec.vocab, spec.concentration, rng);
    std::vector<int> tokens = src.sample(spec.corpus_tokens, rng);
    const double h = src.entropy_rate();
    return MarkovCorpus{std::move(src), std::move(tokens), h};
}

/// Token source for training and the fixed validation set.
class Dataset {
public:
    virtual ~Dataset() = default;
    virtual Batch sample_train(std::size_t batch, Rng& rng) const = 0;
    const std::vector<Batch>& valid() const { return valid_; }
    std::size_t vocab() const { return vocab_; }
    /// Entropy rate of the generating source, when known.
    virtual std::optional<double> entropy_rate() const { return std::nullopt; }

protected:
    std::vector<Batch> valid_;
    std::size_t vocab_ = 0;
};

namespace detail {

inline constexpr std::size_t kValidBatch = 16;

inline std::vector<Batch> group_batches(std::vector<Batch> singles) {
    std::vector<Batch> out;
    for (std::size_t i = 0; i < singles.size(); i += kValidBatch) {
        Batch b;
        b.batch = 0;
        b.src_len = singles[i].src_len;
        b.tgt_len = singles[i].tgt_len;
        for (std::size_t j = i; j < std::min(singles.size(), i + kValidBatch); ++j) {
            ++b.batch;
            b.src.insert(b.src.end(), singles[j].src.begin(), singles[j].src.end());
            b.tgt_in.insert(b.tgt_in.end(), singles[j].tgt_in.begin(), singles[j].tgt_in.end());
            b.targets.insert(b.targets.end(), singles[j].targets.begin(), singles[j].targets.end());
        }
        out.push_back(std::move(b));
    }
    return out;
}

}  // namespace detail

/// Next-token prediction over a token stream. The last valid_fraction of the
/// stream is held out, so train and valid windows never overlap.
class LmDataset : public Dataset {
public:
    LmDataset(std::vector<int> stream, std::size_t vocab, const TaskSpec& spec, std::optional<double> entropy = {})
        : seq_len_(spec.seq_len), entropy_(entropy) {
        vocab_ = vocab;
        const std::size_t window = seq_len_ + 1;
        const auto n_valid = static_cast<std::size_t>(static_cast<double>(stream.size()) * spec.valid_fraction);
        if (stream.size() < n_valid + window || n_valid < window)
            throw ConfigError("corpus too small for seq_len " + std::to_string(seq_len_));
        train_.assign(stream.begin(), stream.end() - static_cast<std::ptrdiff_t>(n_valid));
        std::vector<int> held(stream.end() - static_cast<std::ptrdiff_t>(n_valid), stream.end());
        std::vector<Batch> singles;
        for (std::size_t off = 0; off + window <= held.size() && singles.size() < spec.valid_sequences;
             off += window) {
            singles.push_back(window_batch(held, off));
        }
        valid_ = detail::group_batches(std::move(singles));
    }

    Batch sample_train(std::size_t batch, Rng& rng) const override {
        Batch b;
        b.batch = batch;
        b.tgt_len = seq_len_;
        const std::size_t span = train_.size() - (seq_len_ + 1) + 1;
        for (std::size_t i = 0; i < batch; ++i) {
            Batch w = window_batch(train_, static_cast<std::size_t>(rng.below(span)));
            b.tgt_in.insert(b.tgt_in.end(), w.tgt_in.begin(), w.tgt_in.end());
            b.targets.insert(b.targets.end(), w.targets.begin(), w.targets.end());
        }
        return b;
    }

    std::optional<double> entropy_rate() const override { return entropy_; }
    const std::vector<int>& train_stream() const { return train_; }

private:
    Batch window_batch(const std::vector<int>& s, std::size_t off) const {
        Batch b;
        b.tgt_len = seq_len_;
        b.tgt_in.assign(s.begin() + static_cast<std::ptrdiff_t>(off),
                        s.begin() + static_cast<std::ptrdiff_t>(off + seq_len_));
        b.targets.assign(s.begin() + static_cast<std::ptrdiff_t>(off + 1),
                         s.begin() + static_cast<std::ptrdiff_t>(off + seq_len_ + 1));
        return b;
    }

    std::size_t seq_len_;
    std::vector<int> train_;
    std::optional<double> entropy_;
};

/// Synthetic translation: copy or reverse a random source sequence.
/// Ids 0 (pad, unused) and 1 (BOS) are reserved; content ids are in [2, V).
/// A sequence belongs to the valid split iff its hash is 0 mod 8, so the two
/// splits are disjoint by construction.
class MtDataset : public Dataset {
public:
    static constexpr int kBos = 1;
    static constexpr int kFirstContent = 2;

    MtDataset(const TaskSpec& spec, Arch arch) : spec_(spec), arch_(arch) {
        vocab_ = spec.vocab;
        if (spec.vocab < 4) throw ConfigError("mt tasks need vocab >= 4");
        if (arch == Arch::Decoder) throw ConfigError("mt tasks need an encoder or encoder-decoder model");
        Rng rng = Rng::stream(spec.split_seed, "mt.valid");
        std::vector<Batch> singles;
        for (std::size_t i = 0; i < spec.valid_sequences; ++i) singles.push_back(make_pair(draw(rng, true)));
        valid_ = detail::group_batches(std::move(singles));
    }

    Batch sample_train(std::size_t batch, Rng& rng) const override {
        Batch b;
        b.batch = batch;
        for (std::size_t i = 0; i < batch; ++i) {
            Batch one = make_pair(draw(rng, false));
            b.src_len = one.src_len;
            b.tgt_len = one.tgt_len;
            b.src.insert(b.src.end(), one.src.begin(), one.src.end());
            b.tgt_in.insert(b.tgt_in.end(), one.tgt_in.begin(), one.tgt_in.end());
            b.targets.insert(b.targets.end(), one.targets.begin(), one.targets.end());
        }
        return b;
    }

    static bool in_valid_split(std::span<const int> seq) {
        std::uint64_t h = 0;
        for (int t : seq) h = Rng::splitmix64(h ^ static_cast<std::uint64_t>(t));
        return h % 8 == 0;
    }

private:
    std::vector<int> draw(Rng& rng, bool valid) const {
        const auto content = static_cast<std::uint64_t>(spec_.vocab - kFirstContent);
        for (;;) {
            std::vector<int> s(spec_.seq_len);
            for (int& t : s) t = kFirstContent + static_cast<int>(rng.below(content));
            if (in_valid_split(s) == valid) return s;
        }
    }

    Batch make_pair(const std::vector<int>& src) const {
        Batch b;
        b.src = src;
        b.src_len = src.size();
        std::vector<int> tgt = src;
        if (spec_.kind == TaskKind::ReverseMt) std::reverse(tgt.begin(), tgt.end());
        b.targets = tgt;
        if (arch_ == Arch::EncoderDecoder) {
            b.tgt_len = tgt.size();
            b.tgt_in.push_back(kBos);
            b.tgt_in.insert(b.tgt_in.end(), tgt.begin(), tgt.end() - 1);
        }
        return b;
    }

    TaskSpec spec_;
    Arch arch_;
};

/// Builds the dataset a task describes. Corpus randomness comes from the
/// task's split_seed only, so runs with different training seeds share data.
inline std::unique_ptr<Dataset> make_dataset(const TaskSpec& spec, Arch arch) {
    switch (spec.kind) {
        case TaskKind::MarkovLm: {
            if (arch != Arch::Decoder) throw ConfigError("language-model tasks need a decoder model");
            Rng rng = Rng::stream(spec.split_seed, "markov.corpus");
            MarkovCorpus c = generate_markov_corpus(spec, rng);
            return std::make_unique<LmDataset>(std::move(c.tokens), spec.vocab, spec, c.entropy_rate);
        }
        case TaskKind::TextLm: {
            if (arch != Arch::Decoder) throw ConfigError("language-model tasks need a decoder model");
            if (spec.vocab != 256) throw ConfigError("text_lm is byte-level: vocab must be 256");
            std::ifstream in(spec.text_path, std::ios::binary);
            if (!in) throw ConfigError("cannot open text corpus '" + spec.text_path + "'");
            std::vector<int> stream;
            for (auto it = std::istreambuf_iterator<char>(in); it != std::istreambuf_iterator<char>(); ++it)
                stream.push_back(static_cast<unsigned char>(*it));
            return std::make_unique<LmDataset>(std::move(stream), 256, spec);
        }
        case TaskKind::CopyMt:
        case TaskKind::ReverseMt:
            return std::make_unique<MtDataset>(spec, arch);
    }
    throw ConfigError("unknown task");
}

}  // namespace scaleforge
