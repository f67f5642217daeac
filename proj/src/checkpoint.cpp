#include "bstnn/checkpoint.hpp"

#include "bstnn/csv.hpp"
#include "bstnn/errors.hpp"

#include <fstream>
#include <sstream>

namespace bstnn {

namespace {

nlohmann::json tensor_json(const Tensor& t) {
    return {{"shape", t.shape()}, {"data", std::vector<double>(t.data().begin(), t.data().end())}};
}

void load_tensor(Tensor& dst, const nlohmann::json& j, const std::string& what) {
    const auto shape = j.at("shape").get<Shape>();
    if (shape != dst.shape()) {
        throw DataError("checkpoint: " + what + " has shape " + shape_string(shape) + ", model expects " +
                        shape_string(dst.shape()));
    }
    const auto data = j.at("data").get<std::vector<double>>();
    if (data.size() != dst.size()) throw DataError("checkpoint: " + what + " holds " + std::to_string(data.size()) + " values");
    std::copy(data.begin(), data.end(), dst.mutable_data().begin());
}

nlohmann::json parameters_json(const std::vector<const VariationalParameter*>& params) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto* p : params) {
        nlohmann::json e{{"name", p->name}, {"mu", tensor_json(p->mu)}, {"rho", tensor_json(p->rho)}};
        if (p->eta) e["eta"] = tensor_json(*p->eta);
        out.push_back(std::move(e));
    }
    return out;
}

void load_parameters(const std::vector<VariationalParameter*>& params, const nlohmann::json& j) {
    if (!j.is_array() || j.size() != params.size()) {
        throw DataError("checkpoint: expected " + std::to_string(params.size()) + " parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        VariationalParameter& p = *params[i];
        const auto& e = j[i];
        const auto name = e.at("name").get<std::string>();
        if (name != p.name) throw DataError("checkpoint: parameter " + std::to_string(i) + " is '" + name + "', expected '" + p.name + "'");
        load_tensor(p.mu, e.at("mu"), name + ".mu");
        load_tensor(p.rho, e.at("rho"), name + ".rho");
        if (p.eta && e.contains("eta")) {
            load_tensor(*p.eta, e.at("eta"), name + ".eta");
        } else if (p.eta || e.contains("eta")) {
            throw DataError("checkpoint: parameter '" + name + "' sharpening rate presence differs from the model");
        }
    }
}

nlohmann::json graph_json(const SpatialGraph& g) {
    std::vector<double> xs, ys;
    for (const auto& c : g.coords()) {
        xs.push_back(c.x);
        ys.push_back(c.y);
    }
    return {{"x", xs},
            {"y", ys},
            {"node_ids", g.node_ids()},
            {"independent", g.independent_nodes()},
            {"adjacency", tensor_json(g.adjacency())},
            {"hash", std::to_string(g.hash())}};
}

SpatialGraph graph_from_json(const nlohmann::json& j) {
    const auto xs = j.at("x").get<std::vector<double>>();
    const auto ys = j.at("y").get<std::vector<double>>();
    if (xs.size() != ys.size()) throw DataError("checkpoint: graph coordinate lengths differ");
    std::vector<Coord> coords;
    for (std::size_t i = 0; i < xs.size(); ++i) coords.push_back({xs[i], ys[i]});
    Tensor adjacency(Shape{xs.size(), xs.size()});
    load_tensor(adjacency, j.at("adjacency"), "graph adjacency");
    SpatialGraph g(std::move(coords), std::move(adjacency), j.at("node_ids").get<std::vector<std::string>>(),
                   j.at("independent").get<std::vector<std::size_t>>());
    if (std::to_string(g.hash()) != j.at("hash").get<std::string>()) {
        throw DataError("checkpoint: graph hash mismatch, the stored graph is corrupted");
    }
    return g;
}

} // namespace

nlohmann::json checkpoint_to_json(const TrainedModel& trained, const TrainingConfig& config) {
    nlohmann::json j;
    j["version"] = kCheckpointVersion;
    j["kind"] = to_string(kind_of(trained.model));
    j["config"] = config_to_json(config);
    j["standardizer"] = standardizer_to_json(trained.standardizer);
    if (const auto* m = std::get_if<BTNNModel>(&trained.model)) {
        j["parameters"] = parameters_json(m->parameters());
    } else if (const auto* m = std::get_if<BSTNNModel>(&trained.model)) {
        j["parameters"] = parameters_json(m->parameters());
        j["graph"] = graph_json(m->graph());
    } else {
        nlohmann::json tensors = nlohmann::json::array();
        for (const Tensor* t : std::get<CompBNNModel>(trained.model).tensors()) tensors.push_back(tensor_json(*t));
        j["tensors"] = std::move(tensors);
    }
    return j;
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
    try {
        const int version = j.at("version").get<int>();
        if (version != kCheckpointVersion) {
            throw DataError("checkpoint: unsupported version " + std::to_string(version));
        }
        Checkpoint cp;
        cp.config = config_from_json(j.at("config"));
        cp.trained.standardizer = standardizer_from_json(j.at("standardizer"));
        const ModelKind kind = model_kind_from_string(j.at("kind").get<std::string>());
        // Shapes depend only on the architecture; values are overwritten below.
        Rng rng(0);
        switch (kind) {
        case ModelKind::BTNN: {
            BTNNModel m(cp.config.arch, rng);
            load_parameters(m.parameters(), j.at("parameters"));
            cp.trained.model = std::move(m);
            break;
        }
        case ModelKind::BSTNN: {
            BSTNNModel m(cp.config.arch, graph_from_json(j.at("graph")), rng);
            load_parameters(m.parameters(), j.at("parameters"));
            cp.trained.model = std::move(m);
            break;
        }
        case ModelKind::CompBNN: {
            CompBNNModel m(cp.config.arch, rng);
            const auto tensors = m.tensors();
            const auto& stored = j.at("tensors");
            if (stored.size() != tensors.size()) throw DataError("checkpoint: comparison model tensor count mismatch");
            for (std::size_t i = 0; i < tensors.size(); ++i) load_tensor(*tensors[i], stored[i], "tensor " + std::to_string(i));
            cp.trained.model = std::move(m);
            break;
        }
        }
        return cp;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint: ") + e.what());
    }
}

void save_checkpoint(const std::filesystem::path& path, const TrainedModel& trained, const TrainingConfig& config) {
    auto out = open_output(path);
    out << checkpoint_to_json(trained, config).dump() << '\n';
    if (!out) throw DataError("cannot write checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint " + path.string() + ": " + e.what());
    }
    return checkpoint_from_json(j);
}

} // namespace bstnn
