#include "pathflow/io.hpp"

#include <bit>
#include <fstream>
#include <stdexcept>

namespace pathflow::io {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

namespace {

void write_doubles(std::ofstream& out, const double* data, std::size_t n) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
}

void read_doubles(std::ifstream& in, double* data, std::size_t n) {
    in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw std::runtime_error("truncated binary payload");
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
    return in;
}

nlohmann::json read_header(std::ifstream& in, const std::filesystem::path& path) {
    std::string line;
    if (!std::getline(in, line))
        throw std::runtime_error("missing header line in " + path.string());
    return nlohmann::json::parse(line);
}

}  // namespace

nlohmann::json arch_to_json(const FieldArch& arch) {
    return {{"input_dim", arch.input_dim},
            {"hidden_widths", arch.hidden_widths},
            {"activation", to_string(arch.activation)}};
}

FieldArch arch_from_json(const nlohmann::json& j) {
    FieldArch arch;
    arch.input_dim = j.at("input_dim").get<std::size_t>();
    arch.hidden_widths = j.at("hidden_widths").get<std::vector<std::size_t>>();
    arch.activation = activation_from_string(j.at("activation").get<std::string>());
    validate_arch(arch);
    return arch;
}

void save_checkpoint(const std::filesystem::path& path, const FieldParams& params) {
    auto out = open_out(path);
    nlohmann::json header{{"format_version", kCheckpointFormat},
                          {"arch", arch_to_json(params.arch)},
                          {"n_params", params.values.size()},
                          {"version", params.version}};
    out << header.dump() << '\n';
    write_doubles(out, params.values.data(), params.values.size());
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

FieldParams load_checkpoint(const std::filesystem::path& path) {
    auto in = open_in(path);
    nlohmann::json header = read_header(in, path);
    if (header.at("format_version").get<int>() != kCheckpointFormat)
        throw std::runtime_error("unsupported checkpoint format in " + path.string());
    FieldParams p;
    p.arch = arch_from_json(header.at("arch"));
    p.version = header.at("version").get<std::int64_t>();
    std::size_t n = header.at("n_params").get<std::size_t>();
    if (n != parameter_count(p.arch))
        throw std::runtime_error("checkpoint parameter count does not match arch: " + path.string());
    p.values.resize(n);
    read_doubles(in, p.values.data(), n);
    return p;
}

void save_optimizer(const std::filesystem::path& path, const train::OptimizerState& opt) {
    auto out = open_out(path);
    nlohmann::json header{{"format_version", kCheckpointFormat},
                          {"n_params", opt.m.size()},
                          {"step", opt.step},
                          {"beta1", opt.beta1},
                          {"beta2", opt.beta2},
                          {"eps", opt.eps}};
    out << header.dump() << '\n';
    write_doubles(out, opt.m.data(), opt.m.size());
    write_doubles(out, opt.v.data(), opt.v.size());
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

train::OptimizerState load_optimizer(const std::filesystem::path& path) {
    auto in = open_in(path);
    nlohmann::json header = read_header(in, path);
    train::OptimizerState opt;
    std::size_t n = header.at("n_params").get<std::size_t>();
    opt.step = header.at("step").get<long>();
    opt.beta1 = header.at("beta1").get<double>();
    opt.beta2 = header.at("beta2").get<double>();
    opt.eps = header.at("eps").get<double>();
    opt.m.resize(n);
    opt.v.resize(n);
    read_doubles(in, opt.m.data(), n);
    read_doubles(in, opt.v.data(), n);
    return opt;
}

void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
    if (ds.forces && (ds.forces->n != ds.samples.n || ds.forces->dim != ds.samples.dim))
        throw std::invalid_argument("save_dataset: force shape mismatch");
    auto out = open_out(path);
    nlohmann::json header{{"format_version", kDatasetFormat},
                          {"n", ds.samples.n},
                          {"d", ds.samples.dim},
                          {"has_forces", ds.forces.has_value()},
                          {"source", ds.source}};
    out << header.dump() << '\n';
    write_doubles(out, ds.samples.data.data(), ds.samples.data.size());
    if (ds.forces) write_doubles(out, ds.forces->data.data(), ds.forces->data.size());
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
    auto in = open_in(path);
    nlohmann::json header = read_header(in, path);
    if (header.at("format_version").get<int>() != kDatasetFormat)
        throw std::runtime_error("unsupported dataset format in " + path.string());
    Dataset ds;
    std::size_t n = header.at("n").get<std::size_t>();
    std::size_t d = header.at("d").get<std::size_t>();
    ds.source = header.at("source");
    ds.samples = SampleBatch(n, d);
    read_doubles(in, ds.samples.data.data(), n * d);
    if (header.at("has_forces").get<bool>()) {
        ds.forces = SampleBatch(n, d);
        read_doubles(in, ds.forces->data.data(), n * d);
    }
    return ds;
}

std::string file_checksum(const std::filesystem::path& path) {
    auto in = open_in(path);
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[1 << 14];
    while (in) {
        in.read(buf, sizeof(buf));
        std::streamsize got = in.gcount();
        for (std::streamsize i = 0; i < got; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ull;
        }
    }
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
    return std::string(hex);
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    auto out = open_out(path);
    out << j.dump(2) << '\n';
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

nlohmann::json read_json(const std::filesystem::path& path) {
    auto in = open_in(path);
    return nlohmann::json::parse(in);
}

}  // namespace pathflow::io
