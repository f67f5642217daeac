#include "bstnn/dataset_io.hpp"

#include "bstnn/csv.hpp"
#include "bstnn/errors.hpp"

#include <cmath>
#include <fstream>
#include <map>

namespace bstnn {

namespace fs = std::filesystem;

void write_dataset(const fs::path& dir, const SpatioTemporalDataset& ds, const nlohmann::json& extra) {
    ds.validate();
    ensure_directory(dir);
    {
        auto out = open_output(dir / "nodes.csv");
        out << "node,x,y\n";
        for (std::size_t n = 0; n < ds.nodes; ++n) {
            out << ds.node_ids[n] << ',' << format_double(ds.coords[n].x) << ',' << format_double(ds.coords[n].y)
                << '\n';
        }
    }
    {
        auto out = open_output(dir / "features.csv");
        out << "time,node,channel,value\n";
        for (std::size_t t = 0; t < ds.steps; ++t) {
            const std::string time = std::to_string(ds.start_hour + static_cast<std::int64_t>(t));
            for (std::size_t n = 0; n < ds.nodes; ++n) {
                for (std::size_t d = 0; d < ds.channels; ++d) {
                    out << time << ',' << ds.node_ids[n] << ',' << ds.channel_names[d] << ','
                        << format_double(ds.feature(t, n, d)) << '\n';
                }
            }
        }
    }
    {
        auto out = open_output(dir / "targets.csv");
        out << "time,node,value,valid\n";
        for (std::size_t t = 0; t < ds.steps; ++t) {
            const std::string time = std::to_string(ds.start_hour + static_cast<std::int64_t>(t));
            for (std::size_t n = 0; n < ds.nodes; ++n) {
                out << time << ',' << ds.node_ids[n] << ',' << format_double(ds.target(t, n)) << ','
                    << (ds.is_valid(t, n) ? 1 : 0) << '\n';
            }
        }
    }
    nlohmann::json manifest = {
        {"format_version", kDatasetFormatVersion},
        {"steps", ds.steps},
        {"nodes", ds.nodes},
        {"channels", ds.channel_names},
        {"start_hour", ds.start_hour},
        {"valid_targets", ds.valid_count()},
        {"rows", {{"nodes", ds.nodes}, {"features", ds.steps * ds.nodes * ds.channels}, {"targets", ds.steps * ds.nodes}}},
        {"generator", extra},
    };
    auto out = open_output(dir / "manifest.json");
    out << manifest.dump(2) << '\n';
}

nlohmann::json read_manifest(const fs::path& dir) {
    const fs::path path = dir / "manifest.json";
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

SpatioTemporalDataset read_dataset(const fs::path& dir) {
    const nlohmann::json manifest = read_manifest(dir);
    SpatioTemporalDataset ds;
    try {
        if (manifest.at("format_version").get<int>() != kDatasetFormatVersion) {
            throw DataError((dir / "manifest.json").string() + ": unsupported format version");
        }
        ds.steps = manifest.at("steps").get<std::size_t>();
        ds.start_hour = manifest.at("start_hour").get<std::int64_t>();
        ds.channel_names = manifest.at("channels").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError((dir / "manifest.json").string() + ": " + e.what());
    }
    ds.channels = ds.channel_names.size();

    std::map<std::string, std::size_t> node_index;
    {
        CsvReader r(dir / "nodes.csv");
        const std::size_t c_node = r.column("node"), c_x = r.column("x"), c_y = r.column("y");
        while (r.next()) {
            const std::string id = r.text(c_node);
            if (!node_index.emplace(id, ds.node_ids.size()).second) {
                throw DataError((dir / "nodes.csv").string() + ":" + std::to_string(r.line()) +
                                ": duplicate node '" + id + "'");
            }
            ds.node_ids.push_back(id);
            ds.coords.push_back({r.number(c_x), r.number(c_y)});
        }
    }
    ds.nodes = ds.node_ids.size();
    if (ds.nodes == 0 || ds.steps == 0 || ds.channels == 0) throw DataError(dir.string() + ": empty dataset");
    std::map<std::string, std::size_t> channel_index;
    for (std::size_t d = 0; d < ds.channels; ++d) channel_index[ds.channel_names[d]] = d;

    auto locate = [&](const CsvReader& r, std::size_t c_time, std::size_t c_node, const fs::path& file) {
        const long long t = r.integer(c_time) - ds.start_hour;
        if (t < 0 || static_cast<std::size_t>(t) >= ds.steps) {
            throw DataError(file.string() + ":" + std::to_string(r.line()) + ": time outside the manifest span");
        }
        const auto it = node_index.find(r.text(c_node));
        if (it == node_index.end()) {
            throw DataError(file.string() + ":" + std::to_string(r.line()) + ": unknown node '" + r.text(c_node) + "'");
        }
        return static_cast<std::size_t>(t) * ds.nodes + it->second;
    };

    ds.features.assign(ds.steps * ds.nodes * ds.channels, std::nan(""));
    {
        const fs::path file = dir / "features.csv";
        CsvReader r(file);
        const std::size_t c_time = r.column("time"), c_node = r.column("node");
        const std::size_t c_channel = r.column("channel"), c_value = r.column("value");
        while (r.next()) {
            const std::size_t cell = locate(r, c_time, c_node, file);
            const auto it = channel_index.find(r.text(c_channel));
            if (it == channel_index.end()) {
                throw DataError(file.string() + ":" + std::to_string(r.line()) + ": unknown channel '" +
                                r.text(c_channel) + "'");
            }
            ds.features[cell * ds.channels + it->second] = r.number(c_value);
        }
    }
    ds.targets.assign(ds.steps * ds.nodes, std::nan(""));
    ds.valid.assign(ds.steps * ds.nodes, 0);
    {
        const fs::path file = dir / "targets.csv";
        CsvReader r(file);
        const std::size_t c_time = r.column("time"), c_node = r.column("node");
        const std::size_t c_value = r.column("value"), c_valid = r.column("valid");
        while (r.next()) {
            const std::size_t cell = locate(r, c_time, c_node, file);
            ds.targets[cell] = r.number(c_value);
            ds.valid[cell] = r.boolean(c_valid) && std::isfinite(ds.targets[cell]) ? 1 : 0;
        }
    }
    ds.validate();
    return ds;
}

} // namespace bstnn
