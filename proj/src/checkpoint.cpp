#include "seqcond/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "seqcond/errors.hpp"

namespace seqcond {

namespace fs = std::filesystem;

void write_file_atomic(const std::string& path, const std::string& bytes) {
    const fs::path target(path);
    if (target.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(target.parent_path(), ec);
        if (ec) throw IoError("cannot create directory " + target.parent_path().string() + ": " + ec.message());
    }
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw IoError("write failed for " + tmp);
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

namespace {

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& s, std::size_t off) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(s[off + i])) << (8 * i);
    return v;
}

template <class T>
void put_tensor(std::string& out, const Tensor<T>& t) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    for (T v : t.data) {
        const U bits = std::bit_cast<U>(v);
        for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
}

template <class T>
void get_tensor(const std::string& s, std::size_t& off, Tensor<T>& t) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    for (auto& v : t.data) {
        U bits = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) bits |= U(static_cast<unsigned char>(s[off + i])) << (8 * i);
        off += sizeof(U);
        v = std::bit_cast<T>(bits);
    }
}

template <class T>
const char* dtype_of() {
    return sizeof(T) == 4 ? "f32" : "f64";
}

CheckpointManifest parse_manifest(const std::string& bytes, const std::string& path, std::size_t& payload_off) {
    const std::string where = "checkpoint " + path + ": ";
    if (bytes.size() < 16 || bytes.compare(0, 8, kCheckpointMagic) != 0) throw InputError(where + "bad magic");
    const std::uint64_t mlen = get_u64(bytes, 8);
    if (mlen > bytes.size() - 16) throw InputError(where + "manifest length exceeds file size");
    const Json j = Json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(mlen), nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw InputError(where + "manifest is not a JSON object");
    CheckpointManifest m;
    try {
        m.format_version = j.at("format_version").get<int>();
        m.dtype = j.at("dtype").get<std::string>();
        m.config_hash = j.at("config_hash").get<std::string>();
        m.config = j.at("config");
        m.step = j.at("step").get<std::uint64_t>();
        m.has_optimizer = j.at("optimizer").get<bool>();
        m.payload_bytes = j.at("payload_bytes").get<std::uint64_t>();
        for (const auto& t : j.at("tensors")) m.tensors.push_back({t.at("name").get<std::string>(), t.at("shape").get<Shape>()});
    } catch (const Json::exception& e) {
        throw InputError(where + "manifest field error: " + e.what());
    }
    if (m.format_version != kCheckpointVersion)
        throw InputError(where + "unsupported format version " + std::to_string(m.format_version));
    if (m.dtype != "f32" && m.dtype != "f64") throw InputError(where + "unknown dtype " + m.dtype);
    std::uint64_t expect = 0;
    for (const auto& t : m.tensors) {
        std::uint64_t n = 1;
        for (auto d : t.shape) n *= d;
        expect += n * m.dtype_size();
    }
    if (expect != m.payload_bytes) throw InputError(where + "manifest payload_bytes disagrees with tensor shapes");
    payload_off = 16 + mlen;
    if (bytes.size() - payload_off != m.payload_bytes)
        throw InputError(where + "payload is " + std::to_string(bytes.size() - payload_off) + " bytes, manifest says " +
                         std::to_string(m.payload_bytes));
    ModelConfig stored;
    try {
        stored = model_config_from_json(m.config);
    } catch (const InputError& e) {
        throw InputError(where + "manifest config invalid: " + e.what());
    }
    if (config_hash(stored) != m.config_hash)
        throw InputError(where + "manifest config hash " + m.config_hash + " does not match its config (" +
                         config_hash(stored) + ")");
    return m;
}

}  // namespace

CheckpointManifest read_checkpoint_manifest(const std::string& path) {
    std::size_t off = 0;
    return parse_manifest(read_file(path), path, off);
}

template <class T>
std::string encode_checkpoint(HybridLM<T>& model, const ModelConfig& cfg, AdamW<T>* opt, std::uint64_t step) {
    const auto params = model.parameters();
    Json tensors = Json::array();
    std::uint64_t payload = 0;
    auto add = [&](const std::string& name, const Tensor<T>& t) {
        tensors.push_back(Json{{"name", name}, {"shape", t.shape}});
        payload += t.size() * sizeof(T);
    };
    for (auto* p : params) add(p->name, p->value);
    if (opt) {
        auto& o = *opt;
        if (o.first_moments().size() != params.size()) throw InputError("checkpoint: optimizer does not match model");
        for (std::size_t i = 0; i < params.size(); ++i) add("adam.m/" + params[i]->name, o.first_moments()[i]);
        for (std::size_t i = 0; i < params.size(); ++i) add("adam.v/" + params[i]->name, o.second_moments()[i]);
    }
    const Json manifest{{"format_version", kCheckpointVersion},
                        {"dtype", dtype_of<T>()},
                        {"config_hash", config_hash(cfg)},
                        {"config", to_json(cfg)},
                        {"step", step},
                        {"optimizer", opt != nullptr},
                        {"optimizer_step", opt ? opt->step_count() : 0},
                        {"tensors", tensors},
                        {"payload_bytes", payload}};
    const std::string mtext = manifest.dump();
    std::string out(kCheckpointMagic, 8);
    put_u64(out, mtext.size());
    out += mtext;
    out.reserve(out.size() + payload);
    for (auto* p : params) put_tensor(out, p->value);
    if (opt) {
        auto& o = *opt;
        for (const auto& t : o.first_moments()) put_tensor(out, t);
        for (const auto& t : o.second_moments()) put_tensor(out, t);
    }
    return out;
}

template <class T>
void save_checkpoint(const std::string& path, HybridLM<T>& model, const ModelConfig& cfg, AdamW<T>* opt,
                     std::uint64_t step) {
    write_file_atomic(path, encode_checkpoint(model, cfg, opt, step));
}

template <class T>
CheckpointManifest load_checkpoint(const std::string& path, HybridLM<T>& model, AdamW<T>* opt,
                                   const ModelConfig& expected, bool force) {
    const std::string bytes = read_file(path);
    std::size_t off = 0;
    CheckpointManifest m = parse_manifest(bytes, path, off);
    const std::string where = "checkpoint " + path + ": ";
    if (m.dtype != dtype_of<T>()) throw InputError(where + "dtype " + m.dtype + " does not match precision " + dtype_of<T>());
    const std::string want = config_hash(expected);
    if (m.config_hash != want && !force)
        throw InputError(where + "config hash " + m.config_hash + " does not match the run config (" + want +
                         "); pass --force to load anyway");
    const auto params = model.parameters();
    const std::size_t n = params.size();
    if (m.tensors.size() != (m.has_optimizer ? 3 * n : n))
        throw InputError(where + "tensor count does not match the model");
    for (std::size_t i = 0; i < m.tensors.size(); ++i) {
        const Param<T>* p = params[i % n];
        if (m.tensors[i].shape != p->value.shape || !m.tensors[i].name.ends_with(p->name))
            throw InputError(where + "tensor " + m.tensors[i].name + " does not match model parameter " + p->name);
    }
    for (auto* p : params) get_tensor(bytes, off, p->value);
    if (opt && m.has_optimizer) {
        auto& ms = opt->first_moments();
        auto& vs = opt->second_moments();
        for (std::size_t i = 0; i < n; ++i) get_tensor(bytes, off, ms[i]);
        for (std::size_t i = 0; i < n; ++i) get_tensor(bytes, off, vs[i]);
        const Json j = Json::parse(bytes.begin() + 16, bytes.begin() + static_cast<std::ptrdiff_t>(16 + get_u64(bytes, 8)));
        opt->set_step_count(j.at("optimizer_step").get<std::size_t>());
    }
    return m;
}

#define SEQCOND_CKPT(T)                                                                                          \
    template std::string encode_checkpoint(HybridLM<T>&, const ModelConfig&, AdamW<T>*, std::uint64_t);   \
    template void save_checkpoint(const std::string&, HybridLM<T>&, const ModelConfig&, AdamW<T>*,        \
                                  std::uint64_t);                                                               \
    template CheckpointManifest load_checkpoint(const std::string&, HybridLM<T>&, AdamW<T>*, const ModelConfig&, \
                                                bool);
SEQCOND_CKPT(float)
SEQCOND_CKPT(double)
#undef SEQCOND_CKPT

}  // namespace seqcond
