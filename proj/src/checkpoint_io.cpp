#include "cptlab/checkpoint_io.hpp"

#include <bit>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cptlab/corpus.hpp"

namespace cptlab {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

namespace {

json stats_json(const TrainStats& s) {
    return json{{"ce_loss", s.ce_loss}, {"kl_term", s.kl_term}, {"perplexity", s.perplexity}};
}

json read_header(std::ifstream& in, const std::string& path) {
    std::string line;
    if (!std::getline(in, line)) {
        throw ConfigError(path + ": empty checkpoint");
    }
    json h = json::parse(line);
    if (h.at("schema_version").get<int>() != kSchemaVersion) {
        throw ConfigError(path + ": unsupported checkpoint schema");
    }
    return h;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt, const std::string& base_ref) {
    json manifest = json::array();
    std::vector<const Matrix*> blobs;
    auto add = [&](const std::string& name, const Matrix& m) {
        manifest.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
        blobs.push_back(&m);
    };
    json header{{"schema_version", kSchemaVersion},
                {"model_config", ckpt.config},
                {"epoch", ckpt.epoch},
                {"stats", stats_json(ckpt.stats)}};
    if (ckpt.adapters) {
        header["adapter_config"] = ckpt.adapters->config;
        header["base_ref"] = base_ref;
        ckpt.adapters->visit(add);
    } else {
        ckpt.base->visit(add);
    }
    header["tensors"] = manifest;
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw ConfigError("cannot write " + path);
    }
    out << header.dump() << '\n';
    for (const Matrix* m : blobs) {
        out.write(reinterpret_cast<const char*>(m->data()), static_cast<std::streamsize>(m->size() * sizeof(float)));
    }
    if (!out) {
        throw RunError("short write to " + path);
    }
}

Checkpoint load_checkpoint(const std::string& path, std::shared_ptr<const Weights> base) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot read " + path);
    }
    const json h = read_header(in, path);
    Checkpoint c;
    c.config = h.at("model_config").get<ModelConfig>();
    c.epoch = h.at("epoch").get<int>();
    const auto& st = h.at("stats");
    c.stats = TrainStats{st.at("ce_loss").get<double>(), st.at("kl_term").get<double>(),
                         st.at("perplexity").get<double>()};
    const auto& manifest = h.at("tensors");
    std::size_t idx = 0;
    auto fill = [&](const std::string& name, Matrix& m) {
        if (idx >= manifest.size()) {
            throw ConfigError(path + ": manifest shorter than model");
        }
        const auto& t = manifest[idx++];
        if (t.at("name").get<std::string>() != name || t.at("rows").get<Eigen::Index>() != m.rows() ||
            t.at("cols").get<Eigen::Index>() != m.cols()) {
            throw ConfigError(path + ": tensor " + name + " does not match the model config");
        }
        in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
    };
    if (h.contains("adapter_config")) {
        if (!base) {
            throw ConfigError(path + ": adapter checkpoint needs its base weights");
        }
        c.base = std::move(base);
        Checkpoint shape = attach_adapters(c, h.at("adapter_config").get<AdapterConfig>(), 0);
        c.adapters = std::move(shape.adapters);
        c.adapters->visit(fill);
    } else {
        Weights w = Weights::zeros(c.config);
        w.visit(fill);
        c.base = std::make_shared<const Weights>(std::move(w));
    }
    if (!in || idx != manifest.size()) {
        throw ConfigError(path + ": truncated or inconsistent checkpoint");
    }
    return c;
}

std::string checkpoint_base_ref(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot read " + path);
    }
    const json h = read_header(in, path);
    return h.value("base_ref", std::string());
}

}  // namespace cptlab
