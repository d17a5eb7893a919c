#include <cstdio>
#include <map>
#include <string>

#include "binary_io.hpp"
#include "cteach/errors.hpp"
#include "cteach/training.hpp"

namespace cteach {

namespace {

struct Record {
    Shape shape;
    std::vector<double> data;
};

void put_record(io::ByteWriter& out, const std::string& name, const Shape& shape, std::span<const double> data) {
    out.u32(static_cast<std::uint32_t>(name.size()));
    out.raw(name);
    out.u32(static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) out.u64(d);
    for (double v : data) out.f64(v);
}

std::string bank_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "bank/%04zu", i);
    return buf;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const TrainState& state, std::uint64_t config_hash) {
    const auto params = state.parameters();
    std::uint32_t count = static_cast<std::uint32_t>(params.size() + state.adam.first.size() +
                                                     state.adam.second.size() + state.bank.size());
    io::ByteWriter out;
    out.raw("CTCK");
    out.u32(kCheckpointVersion);
    out.u64(config_hash);
    out.u64(state.iteration);
    out.u64(state.adam.step);
    out.u64(state.bank.capacity());
    out.u32(count);
    for (const auto& [name, t] : params) put_record(out, name, t.shape(), t.values());
    for (const auto& [name, m] : state.adam.first) put_record(out, "adam_m/" + name, {m.size()}, m);
    for (const auto& [name, v] : state.adam.second) put_record(out, "adam_v/" + name, {v.size()}, v);
    std::size_t i = 0;
    for (const auto& e : state.bank.entries()) {
        put_record(out, bank_name(i++), {e.batch, state.bank.channels()}, e.tokens);
    }
    return std::move(out.bytes());
}

TrainState decode_checkpoint(std::span<const std::uint8_t> bytes, const TrainConfig& config,
                             std::size_t teacher_dim, std::uint64_t config_hash) {
    io::ByteReader in(bytes, "checkpoint");
    if (in.raw(4) != "CTCK") throw IoError("checkpoint: bad magic");
    if (auto version = in.u32(); version != kCheckpointVersion) {
        throw IoError("checkpoint: unsupported version " + std::to_string(version));
    }
    if (auto hash = in.u64(); hash != config_hash) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "checkpoint: config hash %016llx does not match %016llx",
                      static_cast<unsigned long long>(hash), static_cast<unsigned long long>(config_hash));
        throw IoError(buf);
    }
    const auto iteration = in.u64();
    const auto adam_step = in.u64();
    const auto capacity = in.u64();
    const auto count = in.u32();

    std::map<std::string, Record> records;
    std::vector<std::string> order;
    for (std::uint32_t r = 0; r < count; ++r) {
        const auto len = in.u32();
        auto name = in.raw(len);
        Record rec;
        const auto rank = in.u32();
        if (rank > 4) throw IoError("checkpoint: record '" + name + "' has rank " + std::to_string(rank));
        std::size_t n = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            rec.shape.push_back(in.u64());
            n *= rec.shape.back();
        }
        in.need(n * 8);
        rec.data.resize(n);
        for (auto& v : rec.data) v = in.f64();
        if (!records.emplace(name, std::move(rec)).second) throw IoError("checkpoint: duplicate record '" + name + "'");
        order.push_back(name);
    }
    if (in.remaining() != 0) throw IoError("checkpoint: trailing bytes");

    TrainState state = init_state(config, teacher_dim);
    if (capacity != state.bank.capacity()) throw IoError("checkpoint: bank capacity differs from config");
    for (auto& [name, t] : state.parameters()) {
        auto it = records.find(name);
        if (it == records.end()) throw IoError("checkpoint: missing record '" + name + "'");
        if (it->second.shape != t.shape()) {
            throw IoError("checkpoint: record '" + name + "' has shape " + shape_string(it->second.shape) +
                          ", expected " + shape_string(t.shape()));
        }
        auto dst = t.mutable_values();
        std::copy(it->second.data.begin(), it->second.data.end(), dst.begin());
        records.erase(it);
    }
    state.iteration = iteration;
    state.adam.step = adam_step;
    for (const auto& name : order) {
        auto it = records.find(name);
        if (it == records.end()) continue;
        auto& rec = it->second;
        if (name.rfind("adam_m/", 0) == 0) {
            state.adam.first[name.substr(7)] = rec.data;
        } else if (name.rfind("adam_v/", 0) == 0) {
            state.adam.second[name.substr(7)] = rec.data;
        } else if (name.rfind("bank/", 0) == 0) {
            if (rec.shape.size() != 2) throw IoError("checkpoint: bank record '" + name + "' is not a matrix");
            state.bank.push(rec.data, rec.shape[0], rec.shape[1]);
        } else {
            throw IoError("checkpoint: unexpected record '" + name + "'");
        }
    }
    return state;
}

void save_checkpoint(const TrainState& state, std::uint64_t config_hash, const std::filesystem::path& path) {
    io::write_file(path, encode_checkpoint(state, config_hash));
}

TrainState load_checkpoint(const std::filesystem::path& path, const TrainConfig& config, std::size_t teacher_dim,
                           std::uint64_t config_hash) {
    return decode_checkpoint(io::read_file(path), config, teacher_dim, config_hash);
}

}  // namespace cteach
