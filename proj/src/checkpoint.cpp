#include "hfgd/checkpoint.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hfgd/io.hpp"

namespace hfgd {

namespace fs = std::filesystem;

static std::string dims_str(const Shape& shape) {
    std::string s;
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(shape[i]);
    }
    return s;
}

void save_checkpoint(const std::string& dir, const Model& model) {
    fs::create_directories(dir);
    write_text_file((fs::path(dir) / "config.txt").string(),
                    model.config().to_kv().serialize());

    std::ofstream bin(fs::path(dir) / "params.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("checkpoint: cannot write " + dir + "/params.bin");
    std::ostringstream manifest;
    for (const auto* list : {&model.parameters(), &model.buffers()}) {
        for (const auto& e : *list) {
            manifest << e.name << '\t' << dims_str(e.tensor.shape()) << '\t'
                     << static_cast<std::int64_t>(bin.tellp()) << '\n';
            write_hfgt(bin, e.tensor.shape(), e.tensor.data());
        }
    }
    if (!bin) throw std::runtime_error("checkpoint: write to params.bin failed");
    bin.close();
    write_text_file((fs::path(dir) / "manifest.txt").string(), manifest.str());
}

Model load_checkpoint(const std::string& dir) {
    const ModelConfig cfg =
        ModelConfig::from_kv(KeyValues::parse(read_text_file((fs::path(dir) / "config.txt").string())));
    Model model(cfg, 0);

    std::set<std::string> expected;
    for (const auto* list : {&model.parameters(), &model.buffers()}) {
        for (const auto& e : *list) expected.insert(e.name);
    }

    std::ifstream bin(fs::path(dir) / "params.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("checkpoint: cannot open " + dir + "/params.bin");
    std::istringstream manifest(read_text_file((fs::path(dir) / "manifest.txt").string()));

    std::set<std::string> seen;
    std::string line;
    int lineno = 0;
    while (std::getline(manifest, line)) {
        ++lineno;
        if (line.empty()) continue;
        const size_t t1 = line.find('\t');
        const size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
        if (t2 == std::string::npos) {
            throw std::runtime_error("checkpoint: manifest line " + std::to_string(lineno) +
                                     " is not name<TAB>dims<TAB>offset");
        }
        const std::string name = line.substr(0, t1);
        const std::string dims = line.substr(t1 + 1, t2 - t1 - 1);
        const std::int64_t offset = std::stoll(line.substr(t2 + 1));
        if (!seen.insert(name).second) {
            throw std::runtime_error("checkpoint: duplicate manifest entry '" + name + "'");
        }
        bin.seekg(offset);
        HfgtRecord rec = read_hfgt(bin);
        if (rec.dtype != HfgtDtype::f64) {
            throw std::runtime_error("checkpoint: '" + name + "' is not a float64 record");
        }
        if (dims_str(rec.shape) != dims) {
            throw std::runtime_error("checkpoint: manifest dims " + dims + " for '" + name +
                                     "' do not match record dims " + dims_str(rec.shape));
        }
        model.load_value(name, rec.shape, rec.f64);
    }
    if (seen != expected) {
        for (const auto& name : expected) {
            if (!seen.count(name)) {
                throw std::runtime_error("checkpoint: manifest is missing '" + name + "'");
            }
        }
    }
    return model;
}

}  // namespace hfgd
