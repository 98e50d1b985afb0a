#include "dqd2v/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <unordered_map>

namespace dqd2v {

namespace {

constexpr char kMagic[8] = {'D', 'Q', 'D', '2', 'V', 'C', 'K', '1'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_i64(std::ostream& out, std::int64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_str(std::ostream& out, const std::string& s) {
    write_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
void write_doubles(std::ostream& out, const double* p, idx n) {
    out.write(reinterpret_cast<const char*>(p),
              static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(n)));
}

std::uint32_t read_u32(std::istream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    require(in.good(), "checkpoint: truncated file");
    return v;
}
std::int64_t read_i64(std::istream& in) {
    std::int64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    require(in.good(), "checkpoint: truncated file");
    return v;
}
std::string read_str(std::istream& in) {
    const std::uint32_t n = read_u32(in);
    std::string s(n, '\0');
    in.read(s.data(), static_cast<std::streamsize>(n));
    require(in.good(), "checkpoint: truncated file");
    return s;
}
void read_doubles(std::istream& in, double* p, idx n) {
    in.read(reinterpret_cast<char*>(p),
            static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(n)));
    require(in.good(), "checkpoint: truncated file");
}

void check_header(std::istream& in) {
    char magic[8];
    in.read(magic, 8);
    require(in.good() && std::memcmp(magic, kMagic, 8) == 0,
            "checkpoint: bad magic (not a checkpoint file)");
    const std::uint32_t version = read_u32(in);
    if (version != kVersion)
        throw ConfigError("checkpoint: unsupported version " + std::to_string(version) +
                          " (expected " + std::to_string(kVersion) + ")");
}

}  // namespace

void save_checkpoint(const std::string& path, const RunConfig& cfg, const Model& model,
                     const nn::AdamW* opt, const std::vector<std::string>& opt_names,
                     idx step,
                     const std::vector<std::pair<std::string, std::string>>& rng_states) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), "checkpoint: cannot write " + path);
    out.write(kMagic, 8);
    write_u32(out, kVersion);
    write_str(out, config_to_json_text(cfg));
    write_i64(out, step);

    write_u32(out, static_cast<std::uint32_t>(rng_states.size()));
    for (const auto& [name, state] : rng_states) {
        write_str(out, name);
        write_str(out, state);
    }

    const nn::ParamStore& ps = model.params();
    write_u32(out, static_cast<std::uint32_t>(ps.names().size()));
    for (const auto& name : ps.names()) {
        const ag::Var v = ps.get(name);
        write_str(out, name);
        write_u32(out, static_cast<std::uint32_t>(v->val.ndim()));
        for (int i = 0; i < v->val.ndim(); ++i) write_i64(out, v->val.dim(i));
        write_doubles(out, v->val.data(), v->val.numel());
    }

    out.put(opt ? 1 : 0);
    if (opt) {
        require(opt_names.size() == opt->params().size(),
                "checkpoint: optimizer name list mismatch");
        write_i64(out, opt->t());
        write_u32(out, static_cast<std::uint32_t>(opt_names.size()));
        auto& m = const_cast<nn::AdamW*>(opt)->moments_m();
        auto& v = const_cast<nn::AdamW*>(opt)->moments_v();
        for (std::size_t i = 0; i < opt_names.size(); ++i) {
            write_str(out, opt_names[i]);
            write_doubles(out, m[i].data(), m[i].numel());
            write_doubles(out, v[i].data(), v[i].numel());
        }
    }
    require(static_cast<bool>(out), "checkpoint: write failed for " + path);
}

CheckpointMeta read_checkpoint_meta(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), "checkpoint: cannot read " + path);
    check_header(in);
    CheckpointMeta meta;
    meta.cfg = config_from_json_text(read_str(in));
    meta.step = read_i64(in);
    const std::uint32_t n_rng = read_u32(in);
    for (std::uint32_t i = 0; i < n_rng; ++i) {
        std::string name = read_str(in);
        std::string state = read_str(in);
        meta.rng_states.emplace_back(std::move(name), std::move(state));
    }
    return meta;
}

void load_checkpoint_state(const std::string& path, Model& model, nn::AdamW* opt,
                           const std::vector<std::string>& opt_names) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), "checkpoint: cannot read " + path);
    check_header(in);
    read_str(in);   // config
    read_i64(in);   // step
    const std::uint32_t n_rng = read_u32(in);
    for (std::uint32_t i = 0; i < n_rng; ++i) {
        read_str(in);
        read_str(in);
    }

    nn::ParamStore& ps = model.params();
    const std::uint32_t n_params = read_u32(in);
    require(n_params == ps.names().size(),
            "checkpoint: parameter count mismatch (different model config?)");
    for (std::uint32_t i = 0; i < n_params; ++i) {
        const std::string name = read_str(in);
        require(ps.contains(name), "checkpoint: unknown parameter " + name);
        ag::Var v = ps.get(name);
        const std::uint32_t nd = read_u32(in);
        std::vector<idx> shape;
        for (std::uint32_t d = 0; d < nd; ++d) shape.push_back(read_i64(in));
        require(shape == v->val.shape(), "checkpoint: shape mismatch for " + name);
        read_doubles(in, v->val.data(), v->val.numel());
    }

    const int has_opt = in.get();
    require(has_opt == 0 || has_opt == 1, "checkpoint: truncated file");
    if (has_opt == 1 && opt) {
        opt->set_t(read_i64(in));
        const std::uint32_t n = read_u32(in);
        require(n == opt_names.size(), "checkpoint: optimizer entry count mismatch");
        std::unordered_map<std::string, std::size_t> pos;
        for (std::size_t i = 0; i < opt_names.size(); ++i) pos[opt_names[i]] = i;
        for (std::uint32_t i = 0; i < n; ++i) {
            const std::string name = read_str(in);
            auto it = pos.find(name);
            require(it != pos.end(), "checkpoint: optimizer state for unknown param " + name);
            const std::size_t j = it->second;
            read_doubles(in, opt->moments_m()[j].data(), opt->moments_m()[j].numel());
            read_doubles(in, opt->moments_v()[j].data(), opt->moments_v()[j].numel());
        }
    } else if (has_opt == 1) {
        // skip optimizer payload
        read_i64(in);
        const std::uint32_t n = read_u32(in);
        for (std::uint32_t i = 0; i < n; ++i) {
            const std::string name = read_str(in);
            const ag::Var v = model.params().get(name);
            std::vector<double> tmp(static_cast<std::size_t>(v->val.numel()));
            read_doubles(in, tmp.data(), v->val.numel());
            read_doubles(in, tmp.data(), v->val.numel());
        }
    }
}

}  // namespace dqd2v
