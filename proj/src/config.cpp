#include "cteach/config.hpp"

#include <json.hpp>

#include "binary_io.hpp"
#include "cteach/errors.hpp"

namespace cteach {

using ojson = nlohmann::ordered_json;

namespace {

ojson to_ojson(const RunConfig& c) {
    const auto& t = c.train;
    ojson j;
    j["world"] = {{"vocab_size", c.world.vocab_size},
                  {"unseen_count", c.world.unseen_count},
                  {"height", c.world.height},
                  {"width", c.world.width},
                  {"channels", c.world.channels},
                  {"input_channels", c.world.input_channels},
                  {"region_count", c.world.region_count},
                  {"noise_sigma", c.world.noise_sigma},
                  {"input_noise", c.world.input_noise},
                  {"coherence", c.world.coherence},
                  {"seed", c.world.seed}};
    j["model"] = {{"hidden1", t.segmenter.hidden1},
                  {"hidden2", t.segmenter.hidden2},
                  {"vla", std::string(to_string(t.vla))},
                  {"vla_hidden", t.vla_hidden}};
    j["glm"] = {{"temperature", t.glm.temperature},
                {"bank_size", t.glm.bank_size},
                {"pooling", std::string(to_string(t.glm.pooling))},
                {"negatives", std::string(to_string(t.glm.negatives))},
                {"bank_order", std::string(to_string(t.bank_order))}};
    j["plm"] = {{"scales", t.plm.scales},
                {"fusion_threshold", t.plm.fusion_threshold},
                {"max_iters", t.plm.kmeans.max_iters},
                {"distance", std::string(to_string(t.plm.kmeans.distance))}};
    j["losses"] = {{"nel", t.losses.nel},
                   {"ce", t.losses.ce},
                   {"cls_token", t.losses.cls_token},
                   {"generate", t.losses.generate},
                   {"nel_scope", std::string(to_string(t.nel_scope))},
                   {"focal_gamma", t.pixel.focal_gamma},
                   {"dice_epsilon", t.pixel.dice_epsilon}};
    j["optim"] = {{"learning_rate", t.optim.learning_rate},
                  {"weight_decay", t.optim.weight_decay},
                  {"beta1", t.optim.beta1},
                  {"beta2", t.optim.beta2},
                  {"epsilon", t.optim.epsilon}};
    j["train"] = {{"batch_size", t.batch_size},
                  {"iterations", t.iterations},
                  {"seed", t.seed},
                  {"checkpoint_every", c.checkpoint_every}};
    j["eval"] = {{"gamma", t.gamma}, {"scene_count", c.eval.scene_count}};
    j["pseudo"] = {{"scene_count", c.pseudo.scene_count}, {"all_ignore", c.pseudo.all_ignore}};
    j["out_dir"] = c.out_dir;
    return j;
}

bool same_kind(const ojson& def, const ojson& v) {
    if (def.is_boolean()) return v.is_boolean();
    if (def.is_string()) return v.is_string();
    if (def.is_number_unsigned()) return v.is_number_unsigned();
    if (def.is_number()) return v.is_number();
    if (def.is_array()) {
        if (!v.is_array()) return false;
        for (const auto& e : v)
            if (!e.is_number_unsigned()) return false;
        return true;
    }
    return false;
}

std::string kind_name(const ojson& def) {
    if (def.is_boolean()) return "a boolean";
    if (def.is_string()) return "a string";
    if (def.is_number_unsigned()) return "a non-negative integer";
    if (def.is_number()) return "a number";
    return "an array of non-negative integers";
}

void merge(ojson& target, const ojson& user, const std::string& path) {
    if (!user.is_object()) throw ConfigError("config: '" + (path.empty() ? std::string("<root>") : path) + "' must be an object");
    for (auto it = user.begin(); it != user.end(); ++it) {
        const auto key = path.empty() ? it.key() : path + "." + it.key();
        if (!target.contains(it.key())) throw ConfigError("config: unknown key '" + key + "'");
        auto& slot = target[it.key()];
        if (slot.is_object()) {
            merge(slot, it.value(), key);
        } else {
            if (!same_kind(slot, it.value())) throw ConfigError("config: '" + key + "' must be " + kind_name(slot));
            slot = it.value();
        }
    }
}

template <class Fn>
auto with_path(const std::string& path, Fn&& fn) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        throw ConfigError("config: '" + path + "': " + e.what());
    }
}

RunConfig from_ojson(const ojson& j) {
    RunConfig c;
    auto& t = c.train;
    const auto& w = j["world"];
    c.world.vocab_size = w["vocab_size"];
    c.world.unseen_count = w["unseen_count"];
    c.world.height = w["height"];
    c.world.width = w["width"];
    c.world.channels = w["channels"];
    c.world.input_channels = w["input_channels"];
    c.world.region_count = w["region_count"];
    c.world.noise_sigma = w["noise_sigma"];
    c.world.input_noise = w["input_noise"];
    c.world.coherence = w["coherence"];
    c.world.seed = w["seed"];
    const auto& m = j["model"];
    t.segmenter.hidden1 = m["hidden1"];
    t.segmenter.hidden2 = m["hidden2"];
    t.vla = with_path("model.vla", [&] { return parse_vla_variant(m["vla"].get<std::string>()); });
    t.vla_hidden = m["vla_hidden"];
    const auto& g = j["glm"];
    t.glm.temperature = g["temperature"];
    t.glm.bank_size = g["bank_size"];
    t.glm.pooling = with_path("glm.pooling", [&] { return parse_pooling(g["pooling"].get<std::string>()); });
    t.glm.negatives = with_path("glm.negatives", [&] { return parse_negatives(g["negatives"].get<std::string>()); });
    t.bank_order = with_path("glm.bank_order", [&] { return parse_bank_order(g["bank_order"].get<std::string>()); });
    const auto& p = j["plm"];
    t.plm.scales = p["scales"].get<std::vector<std::size_t>>();
    t.plm.fusion_threshold = p["fusion_threshold"];
    t.plm.kmeans.max_iters = p["max_iters"];
    t.plm.kmeans.distance = with_path("plm.distance", [&] { return parse_distance(p["distance"].get<std::string>()); });
    const auto& l = j["losses"];
    t.losses.nel = l["nel"];
    t.losses.ce = l["ce"];
    t.losses.cls_token = l["cls_token"];
    t.losses.generate = l["generate"];
    t.nel_scope = with_path("losses.nel_scope", [&] { return parse_nel_scope(l["nel_scope"].get<std::string>()); });
    t.pixel.focal_gamma = l["focal_gamma"];
    t.pixel.dice_epsilon = l["dice_epsilon"];
    const auto& o = j["optim"];
    t.optim.learning_rate = o["learning_rate"];
    t.optim.weight_decay = o["weight_decay"];
    t.optim.beta1 = o["beta1"];
    t.optim.beta2 = o["beta2"];
    t.optim.epsilon = o["epsilon"];
    const auto& tr = j["train"];
    t.batch_size = tr["batch_size"];
    t.iterations = tr["iterations"];
    t.seed = tr["seed"];
    c.checkpoint_every = tr["checkpoint_every"];
    t.gamma = j["eval"]["gamma"];
    c.eval.scene_count = j["eval"]["scene_count"];
    c.pseudo.scene_count = j["pseudo"]["scene_count"];
    c.pseudo.all_ignore = j["pseudo"]["all_ignore"];
    c.out_dir = j["out_dir"];
    return c;
}

}  // namespace

void RunConfig::resolve() {
    world.validate();
    train.segmenter.input_channels = world.input_channels;
    train.segmenter.output_channels = world.channels;
    if (train.segmenter.hidden1 < 4 || train.segmenter.hidden2 < 4) {
        throw ConfigError("config: model hidden widths must be at least 4");
    }
    for (auto s : train.plm.scales) {
        if (s > std::min(world.height, world.width)) {
            throw ConfigError("config: 'plm.scales' entry " + std::to_string(s) + " exceeds the grid");
        }
    }
    if (eval.scene_count == 0) throw ConfigError("config: 'eval.scene_count' must be positive");
    train.validate();
}

RunConfig parse_run_config(std::string_view json_text) {
    ojson user;
    try {
        user = ojson::parse(json_text.begin(), json_text.end());
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    RunConfig defaults;
    auto merged = to_ojson(defaults);
    merge(merged, user, "");
    auto config = from_ojson(merged);
    config.resolve();
    return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::vector<std::uint8_t> bytes;
    try {
        bytes = io::read_file(path);
    } catch (const IoError&) {
        throw ConfigError("config: cannot read '" + path.string() + "'");
    }
    return parse_run_config(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

std::string run_config_to_json(const RunConfig& config) { return to_ojson(config).dump(2) + "\n"; }

std::uint64_t config_hash(const RunConfig& config) {
    auto j = to_ojson(config);
    j.erase("eval");
    j.erase("pseudo");
    j.erase("out_dir");
    j["train"].erase("iterations");
    j["train"].erase("checkpoint_every");
    const auto text = j.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string_view code_version() { return "cteach 0.1.0"; }

}  // namespace cteach
