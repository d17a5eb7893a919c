#pragma once

// Training loop, inference with an unseen-logit offset, and the generalized
// zero-shot metric suite.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cteach/glm.hpp"
#include "cteach/plm.hpp"
#include "cteach/segmenter.hpp"
#include "cteach/tensor.hpp"
#include "cteach/world.hpp"

namespace cteach {

struct WorldConfig {
    std::size_t vocab_size = 12;
    std::size_t unseen_count = 3;
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t channels = 32;
    std::size_t input_channels = 16;
    std::size_t region_count = 4;
    double noise_sigma = 0.1;
    double input_noise = 0.1;
    double coherence = 1.0;
    std::uint64_t seed = 2024;

    void validate() const;
};

/// The frozen part of a benchmark: vocabulary, text table and input renderer.
struct World {
    WorldConfig config;
    Vocabulary vocab;
    TextTable table;
    InputRenderer renderer;

    static World make(const WorldConfig& config);
    SceneSpec scene_spec() const;
    Scene scene(std::uint64_t seed) const;
};

struct LossToggles {
    bool nel = true;  // focal + dice
    bool ce = true;
    bool cls_token = true;
    bool generate = true;
};

/// Which pixels the focal and dice terms see: the full pseudo-labelled map,
/// or seen pixels scored over seen columns only.
enum class NelScope { full, seen_only };
NelScope parse_nel_scope(std::string_view name);
std::string_view to_string(NelScope scope);

/// Whether the current CLS batch enters the bank before or after the global
/// loss is computed.
enum class BankOrder { after_loss, before_loss };
BankOrder parse_bank_order(std::string_view name);
std::string_view to_string(BankOrder order);

struct AdamWConfig {
    double learning_rate = 1e-3;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct TrainConfig {
    AdamWConfig optim;
    std::size_t batch_size = 4;
    std::size_t iterations = 1000;
    std::uint64_t seed = 0;
    SegmenterConfig segmenter;
    GlmConfig glm;
    PlmOptions plm;
    VlaVariant vla = VlaVariant::decoder;
    std::size_t vla_hidden = 64;
    PixelLossOptions pixel;
    LossToggles losses;
    NelScope nel_scope = NelScope::full;
    BankOrder bank_order = BankOrder::after_loss;
    double gamma = 1.5;

    void validate() const;
};

struct AdamState {
    std::uint64_t step = 0;
    std::map<std::string, std::vector<double>> first;
    std::map<std::string, std::vector<double>> second;
};

struct TrainState {
    SegmenterParams segmenter;
    VlaParams vla;
    TokenBank bank;
    AdamState adam;
    std::uint64_t iteration = 0;

    std::vector<std::pair<std::string, Tensor>> parameters() const;
    /// Deep copy; plain copies share parameter storage.
    TrainState clone() const;
};

TrainState init_state(const TrainConfig& config, std::size_t teacher_dim);

/// Individual objective terms; an undefined tensor is a disabled term.
struct LossTerms {
    Tensor global;
    Tensor ce;
    Tensor focal;
    Tensor dice;
    Tensor generate;

    std::vector<std::pair<std::string_view, const Tensor*>> named() const;
};

/// Unweighted sum of the defined terms. Throws NumericError naming the first
/// non-finite term.
Tensor total_loss(Tape& tape, const LossTerms& terms);

struct StepReport {
    std::uint64_t iteration = 0;  // counter value after the step
    std::map<std::string, double> parts;
    double total = 0.0;
    std::size_t pseudo_count = 0;
};

/// Seed of scene `index` of the batch drawn at `iteration`.
std::uint64_t scene_seed(std::uint64_t train_seed, std::uint64_t iteration, std::size_t index);
std::vector<Scene> training_batch(const World& world, const TrainConfig& config, std::uint64_t iteration);

/// One optimisation step. On a non-finite loss the state is left untouched
/// and NumericError is thrown.
StepReport train_step(TrainState& state, const TrainConfig& config, const World& world,
                      std::span<const Scene> batch);

void adamw_update(const std::vector<std::pair<std::string, Tensor>>& params, AdamState& adam,
                  const AdamWConfig& config);

/// Predicted category ids for pixel-major features: argmax over the full
/// text table, unseen columns offset by gamma; ties go to the lower id.
std::vector<int> infer(std::span<const double> features, std::size_t channels, const TextTable& table,
                       const Vocabulary& vocab, double gamma);

std::vector<int> predict_scene(const SegmenterParams& params, const Scene& scene, const TextTable& table,
                               const Vocabulary& vocab, double gamma);

struct MetricsReport {
    double pacc = 0.0;
    double miou_seen = 0.0;
    double miou_unseen = 0.0;
    double hiou = 0.0;
    std::map<int, double> per_class;              // classes present in prediction or ground truth
    std::map<int, std::uint64_t> pixel_counts;    // ground-truth pixels per class
    std::uint64_t total_pixels = 0;
    std::uint64_t predicted_unseen = 0;

    bool operator==(const MetricsReport&) const = default;
};

double harmonic_iou(double miou_seen, double miou_unseen);

class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t classes = 0) : classes_(classes), counts_(classes * classes, 0) {}

    /// Throws DataError on ids outside [0, classes).
    void add(int gt, int pred, std::uint64_t count = 1);
    void add(std::span<const int> gts, std::span<const int> preds);
    void merge(const ConfusionMatrix& other);

    std::size_t classes() const { return classes_; }
    std::uint64_t at(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt) * classes_ + pred]; }

    MetricsReport report(const Vocabulary& vocab) const;

private:
    std::size_t classes_;
    std::vector<std::uint64_t> counts_;
};

MetricsReport evaluate(std::span<const int> preds, std::span<const int> gts, const Vocabulary& vocab);

/// Deterministic held-out scenes of a world.
std::vector<Scene> eval_scenes(const World& world, std::size_t count);

/// Runs inference over `scenes` with up to `threads` workers and reduces in
/// scene order.
MetricsReport evaluate_scenes(const SegmenterParams& params, std::span<const Scene> scenes, const World& world,
                              double gamma, std::size_t threads = 1);

std::string metrics_to_json(const MetricsReport& report);

// Checkpoints: "CTCK", u32 version, u64 config hash, u64 iteration, u64
// optimiser step, u64 bank capacity, u32 record count, then records of
// (u32 name length, name, u32 rank, u64 dims, f64 data); little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const TrainState& state, std::uint64_t config_hash);
/// Throws IoError on malformed bytes or a version or hash mismatch.
TrainState decode_checkpoint(std::span<const std::uint8_t> bytes, const TrainConfig& config,
                             std::size_t teacher_dim, std::uint64_t config_hash);
void save_checkpoint(const TrainState& state, std::uint64_t config_hash, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path, const TrainConfig& config, std::size_t teacher_dim,
                           std::uint64_t config_hash);

/// Loss curve CSV: header then one row per step.
std::string loss_csv_header();
std::string loss_csv_row(const StepReport& report);

}  // namespace cteach
