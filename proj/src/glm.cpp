#include "cteach/glm.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "cteach/errors.hpp"

namespace cteach {

Pooling parse_pooling(std::string_view name) {
    if (name == "attention") return Pooling::attention;
    if (name == "max") return Pooling::max;
    if (name == "mean") return Pooling::mean;
    throw ConfigError("unknown pooling variant '" + std::string(name) + "' (attention, max, mean)");
}

std::string_view to_string(Pooling pooling) {
    switch (pooling) {
        case Pooling::attention: return "attention";
        case Pooling::max: return "max";
        case Pooling::mean: return "mean";
    }
    return "attention";
}

Negatives parse_negatives(std::string_view name) {
    if (name == "bank") return Negatives::bank;
    if (name == "bank_and_batch") return Negatives::bank_and_batch;
    throw ConfigError("unknown negative set '" + std::string(name) + "' (bank, bank_and_batch)");
}

std::string_view to_string(Negatives negatives) {
    return negatives == Negatives::bank ? "bank" : "bank_and_batch";
}

void GlmConfig::validate() const {
    if (!(temperature > 0.0)) throw ConfigError("glm temperature must be positive");
}

void TokenBank::push(std::span<const double> tokens, std::size_t batch, std::size_t channels) {
    if (batch == 0 || tokens.size() != batch * channels) throw DimensionError("token bank: malformed CLS batch");
    if (channels_ != 0 && channels != channels_) {
        throw DimensionError("token bank holds " + std::to_string(channels_) + "-channel tokens, got " +
                             std::to_string(channels));
    }
    channels_ = channels;
    if (capacity_ == 0) return;
    if (entries_.size() == capacity_) entries_.pop_front();
    entries_.push_back(Entry{batch, std::vector<double>(tokens.begin(), tokens.end())});
}

std::size_t TokenBank::token_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.batch;
    return n;
}

PooledTokens attention_pool(Tape& tape, const Tensor& cls, const DenseFeatures& features) {
    const auto b = features.batch, l = features.length(), c = features.channels();
    if (l == 0) throw DimensionError("attention_pool: no pixels");
    if (cls.rows() != b || cls.cols() != c) {
        throw DimensionError("attention_pool: CLS tokens " + shape_string(cls.shape()) + " vs features " +
                             shape_string(features.bcl_shape()));
    }
    const double temperature = std::sqrt(static_cast<double>(c));
    std::vector<Tensor> predicted, weights;
    std::vector<std::size_t> rows(l);
    for (std::size_t i = 0; i < b; ++i) {
        std::iota(rows.begin(), rows.end(), i * l);
        const std::size_t self[] = {i};
        auto r = gather_rows(tape, features.pixels, rows);
        auto logits = matmul(tape, gather_rows(tape, cls, self), transpose(tape, r));
        auto w = row_softmax(tape, logits, temperature);
        predicted.push_back(matmul(tape, w, r));
        weights.push_back(w);
    }
    return PooledTokens{concat_rows(tape, predicted), concat_rows(tape, weights)};
}

PooledTokens pool_variant(Tape& tape, const Tensor& cls, const DenseFeatures& features, Pooling pooling) {
    if (pooling == Pooling::attention) return attention_pool(tape, cls, features);
    const auto b = features.batch, l = features.length();
    std::vector<Tensor> predicted;
    std::vector<std::size_t> rows(l);
    for (std::size_t i = 0; i < b; ++i) {
        std::iota(rows.begin(), rows.end(), i * l);
        auto r = gather_rows(tape, features.pixels, rows);
        predicted.push_back(pooling == Pooling::max ? column_max(tape, r) : column_mean(tape, r));
    }
    return PooledTokens{concat_rows(tape, predicted), Tensor{}};
}

namespace {

std::vector<double> normalized(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    const double n = std::max(std::sqrt(s), 1e-12);
    std::vector<double> out(v.begin(), v.end());
    for (auto& x : out) x /= n;
    return out;
}

}  // namespace

Tensor infonce_global(Tape& tape, const Tensor& cls, const Tensor& predicted, const TokenBank& bank,
                      double temperature, Negatives negatives) {
    if (!(temperature > 0.0)) throw ConfigError("infonce_global: temperature must be positive");
    const auto b = cls.rows(), c = cls.cols();
    if (predicted.rows() != b || predicted.cols() != c) {
        throw DimensionError("infonce_global: CLS " + shape_string(cls.shape()) + " vs predicted " +
                             shape_string(predicted.shape()));
    }
    if (bank.size() > 0 && bank.channels() != c) {
        throw DimensionError("infonce_global: bank tokens have " + std::to_string(bank.channels()) +
                             " channels, expected " + std::to_string(c));
    }
    std::vector<std::vector<double>> anchors;
    for (std::size_t i = 0; i < b; ++i) anchors.push_back(normalized(cls.values().subspan(i * c, c)));
    std::vector<std::vector<double>> bank_tokens;
    for (const auto& e : bank.entries())
        for (std::size_t k = 0; k < e.batch; ++k)
            bank_tokens.push_back(normalized(std::span<const double>(e.tokens).subspan(k * c, c)));

    auto unit_pred = normalize_rows(tape, predicted);
    std::vector<Tensor> rows;
    for (std::size_t i = 0; i < b; ++i) {
        // Keys as columns of a C x K matrix; column 0 is the positive.
        std::vector<const std::vector<double>*> keys{&anchors[i]};
        if (negatives == Negatives::bank_and_batch)
            for (std::size_t j = 0; j < b; ++j)
                if (j != i) keys.push_back(&anchors[j]);
        for (const auto& t : bank_tokens) keys.push_back(&t);
        std::vector<double> kt(c * keys.size());
        for (std::size_t k = 0; k < keys.size(); ++k)
            for (std::size_t j = 0; j < c; ++j) kt[j * keys.size() + k] = (*keys[k])[j];
        const std::size_t self[] = {i};
        auto logits = matmul(tape, gather_rows(tape, unit_pred, self), Tensor::constant({c, keys.size()}, std::move(kt)));
        rows.push_back(scale(tape, logits, 1.0 / temperature));
    }
    const std::vector<int> targets(b, 0);
    return cross_entropy(tape, concat_rows(tape, rows), targets, -1);
}

}  // namespace cteach
