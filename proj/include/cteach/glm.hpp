#pragma once

// Global learning: parameter-free attention pooling of dense features under
// the teacher CLS query, and InfoNCE against a FIFO bank of past CLS tokens.

#include <cstddef>
#include <deque>
#include <span>
#include <string_view>
#include <vector>

#include "cteach/segmenter.hpp"
#include "cteach/tensor.hpp"

namespace cteach {

enum class Pooling { attention, max, mean };
enum class Negatives { bank, bank_and_batch };

Pooling parse_pooling(std::string_view name);
std::string_view to_string(Pooling pooling);
Negatives parse_negatives(std::string_view name);
std::string_view to_string(Negatives negatives);

struct GlmConfig {
    double temperature = 0.07;
    std::size_t bank_size = 24;
    Pooling pooling = Pooling::attention;
    Negatives negatives = Negatives::bank;

    void validate() const;
};

/// FIFO of the last `capacity` CLS batches, stored detached.
class TokenBank {
public:
    explicit TokenBank(std::size_t capacity = 24) : capacity_(capacity) {}

    /// Appends a B x C batch, evicting the oldest when full.
    void push(std::span<const double> tokens, std::size_t batch, std::size_t channels);
    void clear() { entries_.clear(); }

    std::size_t capacity() const { return capacity_; }
    std::size_t size() const { return entries_.size(); }
    std::size_t channels() const { return channels_; }
    std::size_t token_count() const;

    struct Entry {
        std::size_t batch = 0;
        std::vector<double> tokens;  // batch x channels
        bool operator==(const Entry&) const = default;
    };
    /// Oldest first.
    const std::deque<Entry>& entries() const { return entries_; }

    bool operator==(const TokenBank&) const = default;

private:
    std::size_t capacity_;
    std::size_t channels_ = 0;
    std::deque<Entry> entries_;
};

struct PooledTokens {
    Tensor predicted;  // B x C
    Tensor weights;    // B x L, attention pooling only
};

/// W = softmax over L of (S . R) / sqrt(C); predicted = W . R^T.
PooledTokens attention_pool(Tape& tape, const Tensor& cls, const DenseFeatures& features);

PooledTokens pool_variant(Tape& tape, const Tensor& cls, const DenseFeatures& features, Pooling pooling);

/// Mean over the batch of -log softmax of the positive pair s_i . s^_i / tau
/// against the bank tokens (plus the other batch tokens with
/// Negatives::bank_and_batch). Tokens are compared after L2 normalisation;
/// only `predicted` carries gradient.
Tensor infonce_global(Tape& tape, const Tensor& cls, const Tensor& predicted, const TokenBank& bank,
                      double temperature, Negatives negatives = Negatives::bank);

}  // namespace cteach
