#include "bnn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "bnn/crc32.hpp"

namespace bnn {

namespace {

struct BnRef {
    std::string name;
    BatchNormParams* bn;
};

std::vector<BnRef> batchnorms_of(Model& model) {
    std::vector<BnRef> out;
    out.push_back({"stem.bn", model.stem_bn.get()});
    for (std::size_t i = 0; i < model.blocks.size(); ++i) {
        auto& b = model.blocks[i];
        const std::string prefix = "block" + std::to_string(i);
        for (auto [tag, unit] : {std::pair{".conv1", &b.conv1}, std::pair{".conv2", &b.conv2}}) {
            if (unit->feature_norm.bn)
                out.push_back({prefix + tag + ".fn_bn", unit->feature_norm.bn.get()});
            out.push_back({prefix + tag + ".bn", unit->bn.get()});
        }
        if (b.has_down) out.push_back({prefix + ".down.bn", b.down_bn.get()});
    }
    return out;
}

void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_f64v(std::vector<std::uint8_t>& b, const std::vector<double>& v) {
    for (double x : v) put_u64(b, std::bit_cast<std::uint64_t>(x));
}
void put_str(std::vector<std::uint8_t>& b, const std::string& s) {
    put_u32(b, static_cast<std::uint32_t>(s.size()));
    b.insert(b.end(), s.begin(), s.end());
}

struct Rd {
    const std::vector<std::uint8_t>& b;
    std::size_t pos = 0;
    void need(std::size_t n) const {
        if (pos + n > b.size()) throw std::runtime_error("checkpoint: truncated");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[pos++]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[pos++]) << (8 * i);
        return v;
    }
    std::vector<double> f64v(std::size_t n) {
        std::vector<double> v(n);
        for (auto& x : v) x = std::bit_cast<double>(u64());
        return v;
    }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(b.data() + pos), n);
        pos += n;
        return s;
    }
};

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const ExperimentConfig& cfg,
                     const DatasetStats& stats, std::uint64_t seed) {
    std::vector<std::uint8_t> bytes;
    bytes.insert(bytes.end(), {'B', 'N', 'N', 'C'});
    put_u32(bytes, 1);  // version
    put_u64(bytes, seed);
    put_u32(bytes, static_cast<std::uint32_t>(model.cfg.input_shape[1]));
    put_u32(bytes, static_cast<std::uint32_t>(model.cfg.input_shape[2]));
    put_u32(bytes, static_cast<std::uint32_t>(model.cfg.input_shape[3]));
    put_str(bytes, config_to_text(cfg));
    bytes.push_back(stats.mean.empty() ? 0 : 1);
    if (!stats.mean.empty()) {
        put_u32(bytes, static_cast<std::uint32_t>(stats.mean.size()));
        put_f64v(bytes, stats.mean);
        put_f64v(bytes, stats.stddev);
    }
    const auto params = model.parameters();
    put_u32(bytes, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        put_str(bytes, p.name);
        put_u64(bytes, static_cast<std::uint64_t>(p.tensor->size()));
        put_f64v(bytes, p.tensor->data);
    }
    auto& mutable_model = const_cast<Model&>(model);
    const auto bns = batchnorms_of(mutable_model);
    put_u32(bytes, static_cast<std::uint32_t>(bns.size()));
    for (const auto& ref : bns) {
        put_str(bytes, ref.name);
        put_u32(bytes, static_cast<std::uint32_t>(ref.bn->running_mu.size()));
        put_f64v(bytes, ref.bn->running_mu);
        put_f64v(bytes, ref.bn->running_var);
    }
    // LFI calibration flags, block order (conv1, conv2)
    std::vector<std::uint8_t> lfi;
    for (const auto& b : model.blocks) {
        lfi.push_back(b.conv1.scaling.initialized ? 1 : 0);
        lfi.push_back(b.conv2.scaling.initialized ? 1 : 0);
    }
    put_u32(bytes, static_cast<std::uint32_t>(lfi.size()));
    bytes.insert(bytes.end(), lfi.begin(), lfi.end());
    put_u32(bytes, crc32(bytes.data(), bytes.size()));

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "BNNC", 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
    const std::uint32_t stored = static_cast<std::uint32_t>(bytes[bytes.size() - 4]) |
                                 (static_cast<std::uint32_t>(bytes[bytes.size() - 3]) << 8) |
                                 (static_cast<std::uint32_t>(bytes[bytes.size() - 2]) << 16) |
                                 (static_cast<std::uint32_t>(bytes[bytes.size() - 1]) << 24);
    if (crc32(bytes.data(), bytes.size() - 4) != stored)
        throw std::runtime_error("checkpoint: CRC-32 mismatch");

    Rd r{bytes, 4};
    const std::uint32_t version = r.u32();
    if (version != 1)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    Checkpoint ck;
    ck.seed = r.u64();
    const int c = static_cast<int>(r.u32());
    const int h = static_cast<int>(r.u32());
    const int w = static_cast<int>(r.u32());
    ck.input_shape = {1, c, h, w};
    ck.cfg = parse_config_map(parse_kv_text(r.str()));
    r.need(1);
    if (bytes[r.pos++]) {
        const std::uint32_t n = r.u32();
        ck.stats.mean = r.f64v(n);
        ck.stats.stddev = r.f64v(n);
    }
    ck.model = build_model(to_model_config(ck.cfg, ck.input_shape), ck.seed);

    const std::uint32_t np = r.u32();
    auto params = ck.model.parameters();
    std::map<std::string, TensorPtr> by_name;
    for (const auto& p : params) by_name[p.name] = p.tensor;
    for (std::uint32_t i = 0; i < np; ++i) {
        const std::string name = r.str();
        const std::uint64_t n = r.u64();
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw std::runtime_error("checkpoint: unknown parameter '" + name + "'");
        if (static_cast<std::uint64_t>(it->second->size()) != n)
            throw std::runtime_error("checkpoint: size mismatch for '" + name + "'");
        it->second->data = r.f64v(n);
    }
    const std::uint32_t nb = r.u32();
    auto bns = batchnorms_of(ck.model);
    std::map<std::string, BatchNormParams*> bn_by_name;
    for (const auto& ref : bns) bn_by_name[ref.name] = ref.bn;
    for (std::uint32_t i = 0; i < nb; ++i) {
        const std::string name = r.str();
        const std::uint32_t n = r.u32();
        auto it = bn_by_name.find(name);
        if (it == bn_by_name.end())
            throw std::runtime_error("checkpoint: unknown batch norm '" + name + "'");
        it->second->running_mu = r.f64v(n);
        it->second->running_var = r.f64v(n);
    }
    const std::uint32_t nf = r.u32();
    std::vector<std::uint8_t> flags(nf);
    for (auto& f : flags) {
        r.need(1);
        f = bytes[r.pos++];
    }
    std::size_t fi = 0;
    for (auto& b : ck.model.blocks) {
        if (fi + 1 < flags.size()) {
            b.conv1.scaling.initialized = flags[fi] != 0;
            b.conv2.scaling.initialized = flags[fi + 1] != 0;
        }
        fi += 2;
    }
    return ck;
}

}  // namespace bnn
