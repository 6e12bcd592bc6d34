// Copyright 2026 the kvcat authors
// SPDX-License-Identifier: Apache-2.0

#include "checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "errors.hpp"

namespace kvcat {

namespace {

constexpr char kMagic[6] = {'K', 'V', 'C', 'A', 'T', '1'};

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

void write_f64(std::ostream& os, const double* data, size_t count) {
    // Little-endian doubles; byte-swapped write would go here on BE hosts.
    static_assert(sizeof(double) == 8);
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * 8));
}

uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("checkpoint: truncated file");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw IoError("checkpoint: truncated file");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

const std::string& ArrayFile::get(const std::string& key) const {
    for (const auto& [k, v] : meta)
        if (k == key) return v;
    throw FormatError("checkpoint header: missing key '" + key + "'");
}

bool ArrayFile::has(const std::string& key) const {
    for (const auto& [k, v] : meta)
        if (k == key) return true;
    return false;
}

const Tensor* ArrayFile::find(const std::string& name) const {
    for (const auto& [n, t] : arrays)
        if (n == name) return &t;
    return nullptr;
}

void ArrayFile::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os.write(kMagic, sizeof(kMagic));
    std::string header;
    for (const auto& [k, v] : meta) header += k + "=" + v + "\n";
    write_u64(os, header.size());
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    write_u64(os, arrays.size());
    for (const auto& [name, t] : arrays) {
        write_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(os, static_cast<uint32_t>(t.rank()));
        for (int64_t d : t.shape()) write_u64(os, static_cast<uint64_t>(d));
        write_f64(os, t.data(), static_cast<size_t>(t.numel()));
    }
    if (!os) throw IoError("write failure on '" + path + "'");
}

ArrayFile ArrayFile::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    char magic[6];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw FormatError("'" + path + "' is not a KVCAT1 file");
    ArrayFile f;
    const uint64_t hlen = read_u64(is);
    std::string header(hlen, '\0');
    is.read(header.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw IoError("checkpoint: truncated header");
    std::istringstream hs(header);
    std::string line;
    while (std::getline(hs, line)) {
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("checkpoint header: malformed line '" + line + "'");
        f.meta.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    const uint64_t count = read_u64(is);
    for (uint64_t a = 0; a < count; ++a) {
        const uint32_t nlen = read_u32(is);
        std::string name(nlen, '\0');
        is.read(name.data(), nlen);
        if (!is) throw IoError("checkpoint: truncated array name");
        const uint32_t rank = read_u32(is);
        if (rank > 8) throw FormatError("checkpoint: implausible array rank");
        std::vector<int64_t> dims(rank);
        int64_t numel = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            dims[i] = static_cast<int64_t>(read_u64(is));
            if (dims[i] <= 0) throw FormatError("checkpoint: non-positive dimension");
            numel *= dims[i];
        }
        std::vector<double> data(static_cast<size_t>(numel));
        is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(numel * 8));
        if (!is) throw IoError("checkpoint: truncated array data");
        f.arrays.emplace_back(std::move(name), Tensor::from_vector(std::move(dims), std::move(data)));
    }
    return f;
}

void config_to_meta(const ModelConfig& cfg, ArrayFile& f) {
    f.set("vocab_size", std::to_string(cfg.vocab_size));
    f.set("d_model", std::to_string(cfg.d_model));
    f.set("n_layers", std::to_string(cfg.n_layers));
    f.set("n_heads", std::to_string(cfg.n_heads));
    f.set("d_ff", std::to_string(cfg.d_ff));
    f.set("max_seq_len", std::to_string(cfg.max_seq_len));
    std::string rl;
    for (size_t i = 0; i < cfg.router_layers.size(); ++i) {
        if (i) rl += ",";
        rl += std::to_string(cfg.router_layers[i]);
    }
    f.set("router_layers", rl);
    f.set("seed", std::to_string(cfg.seed));
}

ModelConfig config_from_meta(const ArrayFile& f) {
    ModelConfig cfg;
    try {
        cfg.vocab_size = std::stoll(f.get("vocab_size"));
        cfg.d_model = std::stoll(f.get("d_model"));
        cfg.n_layers = std::stoll(f.get("n_layers"));
        cfg.n_heads = std::stoll(f.get("n_heads"));
        cfg.d_ff = std::stoll(f.get("d_ff"));
        cfg.max_seq_len = std::stoll(f.get("max_seq_len"));
        cfg.router_layers.clear();
        std::istringstream rs(f.get("router_layers"));
        std::string tok;
        while (std::getline(rs, tok, ','))
            if (!tok.empty()) cfg.router_layers.push_back(std::stoll(tok));
        cfg.seed = std::stoull(f.get("seed"));
    } catch (const std::invalid_argument&) {
        throw FormatError("checkpoint header: malformed numeric field");
    }
    cfg.validate();
    return cfg;
}

void save_checkpoint(const TransformerWeights& weights, const std::string& path) {
    ArrayFile f;
    f.set("kind", "model");
    config_to_meta(weights.config, f);
    for_each_param(weights,
                   [&](const std::string& name, const Tensor& t) { f.add(name, t); });
    f.save(path);
}

TransformerWeights load_checkpoint(const std::string& path) {
    ArrayFile f = ArrayFile::load(path);
    ModelConfig cfg = config_from_meta(f);
    TransformerWeights w = init_weights(cfg, cfg.seed);
    for_each_param(w, [&](const std::string& name, Tensor& t) {
        const Tensor* src = f.find(name);
        if (!src) throw FormatError("checkpoint: missing array '" + name + "'");
        if (!src->same_shape(t))
            throw FormatError("checkpoint: shape mismatch for '" + name + "'");
        t = *src;
    });
    return w;
}

void save_compact_cache(const CompressedPrefixCache& cache, const ModelConfig& cfg,
                        const std::string& path) {
    ArrayFile f;
    f.set("kind", "compact_cache");
    config_to_meta(cfg, f);
    f.set("budget", std::to_string(cache.budget));
    f.set("prefix_len", std::to_string(cache.prefix_len));
    f.set("has_bias", cache.has_bias ? "1" : "0");
    for (int64_t l = 0; l < cache.n_layers; ++l) {
        for (int64_t h = 0; h < cache.n_heads; ++h) {
            const std::string base = "layer" + std::to_string(l) + ".head" + std::to_string(h) + ".";
            const size_t i = static_cast<size_t>(cache.idx(l, h));
            f.add(base + "K", cache.k[i]);
            f.add(base + "V", cache.v[i]);
            if (cache.has_bias) f.add(base + "beta", cache.bias[i]);
        }
    }
    f.save(path);
}

CompressedPrefixCache load_compact_cache(const std::string& path, ModelConfig* cfg_out) {
    ArrayFile f = ArrayFile::load(path);
    ModelConfig cfg = config_from_meta(f);
    if (cfg_out) *cfg_out = cfg;
    CompressedPrefixCache c;
    c.n_layers = cfg.n_layers;
    c.n_heads = cfg.n_heads;
    c.budget = std::stoll(f.get("budget"));
    c.prefix_len = std::stoll(f.get("prefix_len"));
    c.has_bias = f.get("has_bias") == "1";
    c.d_head = cfg.d_head();
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        for (int64_t h = 0; h < cfg.n_heads; ++h) {
            const std::string base = "layer" + std::to_string(l) + ".head" + std::to_string(h) + ".";
            const Tensor* k = f.find(base + "K");
            const Tensor* v = f.find(base + "V");
            if (!k || !v) throw FormatError("compact cache: missing arrays for " + base);
            c.k.push_back(*k);
            c.v.push_back(*v);
            if (c.has_bias) {
                const Tensor* b = f.find(base + "beta");
                if (!b) throw FormatError("compact cache: missing bias for " + base);
                c.bias.push_back(*b);
            }
        }
    }
    return c;
}

}  // namespace kvcat
