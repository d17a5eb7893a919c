#include "cteach/training.hpp"

#include <cmath>
#include <cstdio>
#include <set>
#include <string>

#include "cteach/errors.hpp"
#include "cteach/rng.hpp"

namespace cteach {

void WorldConfig::validate() const {
    if (vocab_size < 2 || vocab_size >= static_cast<std::size_t>(kIgnoreId)) {
        throw ConfigError("world.vocab_size must be in [2, 254]");
    }
    if (unseen_count == 0 || unseen_count >= vocab_size) {
        throw ConfigError("world.unseen_count must leave both seen and unseen categories");
    }
    if (height < 8 || width < 8) throw ConfigError("world grid must be at least 8x8");
    if (channels < 8) throw ConfigError("world.channels must be at least 8");
    if (input_channels < 4) throw ConfigError("world.input_channels must be at least 4");
    if (region_count < 2 || region_count > vocab_size) throw ConfigError("world.region_count must be in [2, vocab_size]");
    if (!(noise_sigma >= 0.0) || !(input_noise >= 0.0)) throw ConfigError("world noise levels must be non-negative");
    if (!(coherence > 0.0 && coherence <= 1.0)) throw ConfigError("world.coherence must be in (0, 1]");
}

World World::make(const WorldConfig& config) {
    config.validate();
    World w;
    w.config = config;
    w.vocab = Vocabulary::make(config.vocab_size, config.unseen_count);
    w.table = embed_categories(w.vocab, mix_seed(config.seed, 1), config.channels, config.coherence);
    w.renderer = InputRenderer::make(mix_seed(config.seed, 2), config.input_channels, config.channels);
    return w;
}

SceneSpec World::scene_spec() const {
    SceneSpec spec;
    spec.height = config.height;
    spec.width = config.width;
    spec.region_count = config.region_count;
    spec.noise_sigma = config.noise_sigma;
    spec.input_noise = config.input_noise;
    return spec;
}

Scene World::scene(std::uint64_t seed) const { return generate_scene(vocab, table, renderer, seed, scene_spec()); }

NelScope parse_nel_scope(std::string_view name) {
    if (name == "full") return NelScope::full;
    if (name == "seen_only") return NelScope::seen_only;
    throw ConfigError("unknown nel scope '" + std::string(name) + "' (full, seen_only)");
}

std::string_view to_string(NelScope scope) { return scope == NelScope::full ? "full" : "seen_only"; }

BankOrder parse_bank_order(std::string_view name) {
    if (name == "after_loss") return BankOrder::after_loss;
    if (name == "before_loss") return BankOrder::before_loss;
    throw ConfigError("unknown bank order '" + std::string(name) + "' (after_loss, before_loss)");
}

std::string_view to_string(BankOrder order) { return order == BankOrder::after_loss ? "after_loss" : "before_loss"; }

void TrainConfig::validate() const {
    if (batch_size == 0) throw ConfigError("train.batch_size must be at least 1");
    if (!(optim.learning_rate >= 0.0) || !std::isfinite(optim.learning_rate)) {
        throw ConfigError("optim.learning_rate must be finite and non-negative");
    }
    if (!(optim.weight_decay >= 0.0)) throw ConfigError("optim.weight_decay must be non-negative");
    if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0)) throw ConfigError("optim.beta1 must be in [0, 1)");
    if (!(optim.beta2 >= 0.0 && optim.beta2 < 1.0)) throw ConfigError("optim.beta2 must be in [0, 1)");
    if (!(optim.epsilon > 0.0)) throw ConfigError("optim.epsilon must be positive");
    glm.validate();
    if (plm.scales.empty()) throw ConfigError("plm.scales must not be empty");
    for (auto s : plm.scales)
        if (s == 0) throw ConfigError("plm.scales entries must be positive");
    if (!(plm.fusion_threshold > 0.0 && plm.fusion_threshold <= 1.0)) {
        throw ConfigError("plm.fusion_threshold must be in (0, 1]");
    }
    if (plm.kmeans.max_iters == 0) throw ConfigError("plm.max_iters must be at least 1");
    if (vla != VlaVariant::raw && vla_hidden == 0) throw ConfigError("model.vla_hidden must be positive");
    if (!(pixel.dice_epsilon > 0.0)) throw ConfigError("losses.dice_epsilon must be positive");
    if (!std::isfinite(gamma)) throw ConfigError("eval.gamma must be finite");
}

std::vector<std::pair<std::string, Tensor>> TrainState::parameters() const {
    auto out = segmenter.named();
    for (auto& p : vla.named()) out.push_back(std::move(p));
    return out;
}

namespace {

Tensor copy_leaf(const Tensor& t) { return t.defined() ? t.clone() : Tensor{}; }

}  // namespace

TrainState TrainState::clone() const {
    TrainState s = *this;
    for (Tensor* t : {&s.segmenter.conv1_weight, &s.segmenter.conv1_bias, &s.segmenter.conv2_weight,
                      &s.segmenter.conv2_bias, &s.segmenter.proj_weight, &s.segmenter.proj_bias, &s.vla.query,
                      &s.vla.key, &s.vla.value, &s.vla.output, &s.vla.ffn_in_weight, &s.vla.ffn_in_bias,
                      &s.vla.ffn_out_weight, &s.vla.ffn_out_bias}) {
        *t = copy_leaf(*t);
    }
    return s;
}

TrainState init_state(const TrainConfig& config, std::size_t teacher_dim) {
    config.validate();
    TrainState s;
    s.segmenter = init_segmenter(mix_seed(config.seed, 11), config.segmenter, teacher_dim);
    s.vla = init_vla(mix_seed(config.seed, 12), config.vla, teacher_dim, config.vla_hidden);
    s.bank = TokenBank(config.glm.bank_size);
    return s;
}

std::vector<std::pair<std::string_view, const Tensor*>> LossTerms::named() const {
    return {{"global", &global}, {"ce", &ce}, {"focal", &focal}, {"dice", &dice}, {"generate", &generate}};
}

Tensor total_loss(Tape& tape, const LossTerms& terms) {
    Tensor total;
    for (const auto& [name, t] : terms.named()) {
        if (!t->defined()) continue;
        if (t->size() != 1) throw DimensionError("loss term '" + std::string(name) + "' is not a scalar");
        if (!std::isfinite(t->item())) {
            throw NumericError("loss term '" + std::string(name) + "' is not finite (" + std::to_string(t->item()) +
                               ")");
        }
        total = total.defined() ? add(tape, total, *t) : *t;
    }
    return total.defined() ? total : Tensor::scalar(0.0);
}

std::uint64_t scene_seed(std::uint64_t train_seed, std::uint64_t iteration, std::size_t index) {
    return mix_seed(mix_seed(mix_seed(train_seed, 0x5ce4e), iteration), index);
}

std::vector<Scene> training_batch(const World& world, const TrainConfig& config, std::uint64_t iteration) {
    std::vector<Scene> batch;
    batch.reserve(config.batch_size);
    for (std::size_t b = 0; b < config.batch_size; ++b) batch.push_back(world.scene(scene_seed(config.seed, iteration, b)));
    return batch;
}

void adamw_update(const std::vector<std::pair<std::string, Tensor>>& params, AdamState& adam,
                  const AdamWConfig& config) {
    adam.step += 1;
    const double t = static_cast<double>(adam.step);
    const double c1 = 1.0 - std::pow(config.beta1, t);
    const double c2 = 1.0 - std::pow(config.beta2, t);
    for (const auto& [name, p] : params) {
        if (!p.has_grad()) continue;
        auto g = p.grad();
        auto& m = adam.first[name];
        auto& v = adam.second[name];
        if (m.empty()) m.assign(g.size(), 0.0);
        if (v.empty()) v.assign(g.size(), 0.0);
        Tensor handle = p;
        auto w = handle.mutable_values();
        for (std::size_t i = 0; i < g.size(); ++i) {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            const double step = (m[i] / c1) / (std::sqrt(v[i] / c2) + config.epsilon);
            w[i] -= config.learning_rate * (step + config.weight_decay * w[i]);
        }
    }
}

StepReport train_step(TrainState& state, const TrainConfig& config, const World& world,
                      std::span<const Scene> batch) {
    if (batch.empty()) throw DataError("train_step: empty batch");
    const auto& first = batch.front();
    const std::size_t c = world.config.channels;
    for (const auto& s : batch) {
        if (s.height != first.height || s.width != first.width || s.channels != c ||
            s.input_channels != state.segmenter.config.input_channels) {
            throw DimensionError("train_step: scenes in a batch must share dimensions");
        }
    }
    const std::size_t bsz = batch.size(), l = first.pixel_count();
    const auto& toggles = config.losses;

    auto params = state.parameters();
    for (auto& [name, p] : params) p.drop_grad();

    std::vector<double> cls_values;
    for (const auto& s : batch) cls_values.insert(cls_values.end(), s.cls_token.begin(), s.cls_token.end());
    const auto cls = Tensor::constant({bsz, c}, cls_values);

    Tape tape;
    const auto inputs = batch_inputs(batch);
    const auto features = segment_forward(tape, state.segmenter, inputs, bsz, first.height, first.width);

    LossTerms terms;
    TokenBank bank_after = state.bank;
    if (config.bank_order == BankOrder::before_loss) bank_after.push(cls_values, bsz, c);
    if (toggles.cls_token) {
        const auto& negatives = config.bank_order == BankOrder::before_loss ? bank_after : state.bank;
        auto pooled = pool_variant(tape, cls, features, config.glm.pooling);
        terms.global = infonce_global(tape, cls, pooled.predicted, negatives, config.glm.temperature,
                                      config.glm.negatives);
    }
    if (config.bank_order == BankOrder::after_loss) bank_after.push(cls_values, bsz, c);

    std::size_t pseudo_count = 0;
    if (toggles.ce || toggles.nel || toggles.generate) {
        std::vector<int> labels;
        labels.reserve(bsz * l);
        for (const auto& s : batch) {
            auto found = discover_pseudo_labels(s, config.plm, kPseudoBase + static_cast<int>(pseudo_count));
            pseudo_count += found.labels.pseudo_count;
            labels.insert(labels.end(), found.labels.labels.begin(), found.labels.labels.end());
        }
        std::set<int> seen_present;
        for (int y : labels)
            if (y != kIgnoreId && y < kPseudoBase) seen_present.insert(y);
        std::vector<int> pseudo_ids;
        for (std::size_t k = 0; k < pseudo_count; ++k) pseudo_ids.push_back(kPseudoBase + static_cast<int>(k));

        std::vector<int> wanted(seen_present.begin(), seen_present.end());
        if (!toggles.generate) wanted.clear();
        const std::size_t n_seen_queries = wanted.size();
        wanted.insert(wanted.end(), pseudo_ids.begin(), pseudo_ids.end());

        Tensor pseudo_classifiers;
        if (!wanted.empty()) {
            auto centroids = region_centroids(tape, features, labels, wanted);
            if (!centroids.excluded.empty()) throw InternalError("train_step: pseudo label without pixels");
            auto generated = vla_forward(tape, centroids.centroids, cls, state.vla);
            std::vector<std::size_t> seen_rows, pseudo_rows;
            for (std::size_t i = 0; i < wanted.size(); ++i) (i < n_seen_queries ? seen_rows : pseudo_rows).push_back(i);
            if (toggles.generate) {
                const std::vector<int> ids(wanted.begin(), wanted.begin() + static_cast<long>(n_seen_queries));
                terms.generate = seen_rows.empty()
                                     ? Tensor::scalar(0.0)
                                     : generate_loss(tape, gather_rows(tape, generated, seen_rows), ids, world.table);
            }
            if (!pseudo_rows.empty()) pseudo_classifiers = gather_rows(tape, generated, pseudo_rows);
        }

        if (toggles.ce || toggles.nel) {
            const auto& seen_ids = world.vocab.seen;
            auto logits = pixel_logits(tape, features.pixels, pseudo_classifiers, world.table, seen_ids);
            auto targets = encode_targets(labels, seen_ids, pseudo_ids);
            auto full = pixel_losses(tape, logits, targets, config.pixel);
            if (toggles.ce) terms.ce = full.ce;
            if (toggles.nel) {
                if (config.nel_scope == NelScope::full) {
                    terms.focal = full.focal;
                    terms.dice = full.dice;
                } else {
                    std::vector<std::size_t> seen_cols(seen_ids.size());
                    for (std::size_t i = 0; i < seen_cols.size(); ++i) seen_cols[i] = i;
                    auto seen_targets = targets;
                    for (auto& t : seen_targets)
                        if (t >= static_cast<int>(seen_ids.size())) t = -1;
                    auto seen = pixel_losses(tape, gather_cols(tape, logits, seen_cols), seen_targets, config.pixel);
                    terms.focal = seen.focal;
                    terms.dice = seen.dice;
                }
            }
        }
    }

    auto total = total_loss(tape, terms);
    StepReport report;
    for (const auto& [name, t] : terms.named()) report.parts[std::string(name)] = t->defined() ? t->item() : 0.0;
    report.total = total.item();
    report.pseudo_count = pseudo_count;

    if (total.requires_grad()) {
        tape.backward(total);
        for (const auto& [name, p] : params) {
            if (!p.has_grad()) continue;
            for (double g : p.grad()) {
                if (!std::isfinite(g)) {
                    for (auto& [n, q] : params) q.drop_grad();
                    throw NumericError("gradient of '" + name + "' is not finite");
                }
            }
        }
        adamw_update(params, state.adam, config.optim);
    }
    state.bank = std::move(bank_after);
    state.iteration += 1;
    report.iteration = state.iteration;
    return report;
}

std::string loss_csv_header() { return "iteration,global,ce,focal,dice,generate,total,pseudo_count\n"; }

std::string loss_csv_row(const StepReport& r) {
    auto num = [](double v) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    std::string row = std::to_string(r.iteration);
    for (const char* k : {"global", "ce", "focal", "dice", "generate"}) {
        auto it = r.parts.find(k);
        row += "," + num(it == r.parts.end() ? 0.0 : it->second);
    }
    row += "," + num(r.total) + "," + std::to_string(r.pseudo_count) + "\n";
    return row;
}

}  // namespace cteach
