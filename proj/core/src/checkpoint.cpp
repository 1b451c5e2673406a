#include "cellpilot/checkpoint.hpp"

#include "cellpilot/errors.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace cellpilot {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'C', 'P', 'C', 'K'};

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw FormatError("truncated checkpoint", pos);
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

std::uint32_t crc(const std::string& data, std::size_t len) {
    return static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(len)));
}

} // namespace

void write_container(const std::string& path, const nlohmann::json& meta, const std::vector<NamedArray>& arrays) {
    nlohmann::json header;
    header["format_version"] = kCheckpointFormatVersion;
    header["meta"] = meta;
    auto& table = header["arrays"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& a : arrays) {
        table.push_back({{"name", a.name},
                         {"rows", a.value.rows()},
                         {"cols", a.value.cols()},
                         {"trainable", a.trainable},
                         {"offset", offset}});
        offset += static_cast<std::uint64_t>(a.value.size());
    }
    const std::string header_text = header.dump();

    std::string out;
    out.reserve(header_text.size() + offset * sizeof(double) + 32);
    out.append(kMagic, 4);
    put<std::uint32_t>(out, kCheckpointFormatVersion);
    put<std::uint64_t>(out, header_text.size());
    out += header_text;
    for (const auto& a : arrays) {
        out.append(reinterpret_cast<const char*>(a.value.data()), static_cast<std::size_t>(a.value.size()) * sizeof(double));
    }
    put<std::uint32_t>(out, crc(out, out.size()));

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open " + tmp + " for writing");
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw IoError("failed writing " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot move checkpoint into place at " + path);
}

Container read_container(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint " + path);
    const std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (data.size() < 4 + 4 + 8 + 4 || std::memcmp(data.data(), kMagic, 4) != 0)
        throw FormatError("not a cellpilot checkpoint: " + path, 0);
    std::size_t pos = data.size() - 4;
    const auto stored = get<std::uint32_t>(data, pos);
    if (stored != crc(data, data.size() - 4)) throw FormatError("checkpoint checksum mismatch: " + path, data.size() - 4);

    pos = 4;
    const auto version = get<std::uint32_t>(data, pos);
    if (version != kCheckpointFormatVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
    const auto hlen = get<std::uint64_t>(data, pos);
    if (pos + hlen > data.size() - 4) throw FormatError("checkpoint header exceeds file", pos);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(data.substr(pos, hlen));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("checkpoint header: ") + e.what(), pos + e.byte);
    }
    pos += hlen;
    if (header.value("format_version", -1) != kCheckpointFormatVersion)
        throw FormatError("checkpoint header lacks a supported format_version", 16);

    Container c;
    c.meta = header.value("meta", nlohmann::json::object());
    const std::size_t payload = pos;
    const std::size_t payload_end = data.size() - 4;
    for (const auto& e : header.at("arrays")) {
        NamedArray a;
        a.name = e.at("name").get<std::string>();
        const auto rows = e.at("rows").get<Eigen::Index>();
        const auto cols = e.at("cols").get<Eigen::Index>();
        a.trainable = e.value("trainable", false);
        const auto off = e.at("offset").get<std::uint64_t>();
        const std::size_t begin = payload + off * sizeof(double);
        const std::size_t bytes = static_cast<std::size_t>(rows * cols) * sizeof(double);
        if (rows < 0 || cols < 0 || begin + bytes > payload_end)
            throw FormatError("array '" + a.name + "' exceeds payload", begin);
        a.value.resize(rows, cols);
        std::memcpy(a.value.data(), data.data() + begin, bytes);
        c.arrays.push_back(std::move(a));
    }
    return c;
}

void save_checkpoint(const ToyModel& model, const std::string& path) {
    nlohmann::json meta;
    meta["kind"] = "model";
    meta["model_config"] = model.config();
    meta["lora_injected"] = model.lora_injected();
    std::vector<NamedArray> arrays;
    for (const auto* p : model.parameters()) arrays.push_back({p->name, p->value, p->trainable});
    write_container(path, meta, arrays);
}

namespace {

void apply_arrays(ToyModel& model, const Container& c, const std::string& path) {
    std::size_t matched = 0;
    for (const auto& a : c.arrays) {
        ag::Parameter* p = model.find_parameter(a.name);
        if (!p) throw ConfigError("checkpoint " + path + " has unknown parameter '" + a.name + "'");
        if (p->value.rows() != a.value.rows() || p->value.cols() != a.value.cols())
            throw ConfigError("checkpoint parameter '" + a.name + "' has a different shape");
        p->value = a.value;
        p->trainable = a.trainable;
        p->zero_grad();
        ++matched;
    }
    if (matched != model.parameters().size())
        throw ConfigError("checkpoint " + path + " does not cover every model parameter");
}

} // namespace

std::unique_ptr<ToyModel> load_checkpoint(const std::string& path) {
    Container c = read_container(path);
    if (c.meta.value("kind", "") != "model") throw FormatError("checkpoint " + path + " is not a model", 0);
    ModelConfig cfg = c.meta.at("model_config").get<ModelConfig>();
    auto model = std::make_unique<ToyModel>(cfg);
    if (c.meta.value("lora_injected", false)) model->inject_lora();
    apply_arrays(*model, c, path);
    return model;
}

void load_weights(ToyModel& model, const std::string& path) {
    Container c = read_container(path);
    if (c.meta.value("kind", "") != "model") throw FormatError("checkpoint " + path + " is not a model", 0);
    ModelConfig cfg = c.meta.at("model_config").get<ModelConfig>();
    const bool injected = c.meta.value("lora_injected", false);
    if (injected != model.lora_injected())
        throw ConfigError("checkpoint LoRA state does not match the model");
    if (injected && cfg.lora_rank != model.config().lora_rank)
        throw ConfigError("checkpoint lora_rank " + std::to_string(cfg.lora_rank) + " != model lora_rank " +
                          std::to_string(model.config().lora_rank));
    ModelConfig a = cfg, b = model.config();
    a.seed = b.seed = 0;
    if (!(a == b)) throw ConfigError("checkpoint model configuration does not match the model");
    apply_arrays(model, c, path);
}

} // namespace cellpilot
