#pragma once

// CSV exchange format for spatio-temporal datasets:
//
//   nodes.csv     node,x,y
//   features.csv  time,node,channel,value   (long format, one row per value)
//   targets.csv   time,node,value,valid
//   manifest.json dimensions, channel names, row counts
//
// `time` is an hour index starting at the manifest's start_hour. Real data
// follows the same schema; unobserved targets may be written as "nan".

#include "bstnn/synthdata.hpp"

#include <filesystem>

#include <json.hpp>

namespace bstnn {

inline constexpr int kDatasetFormatVersion = 1;

// Writes the trio plus manifest into `dir` (created if missing). `extra` is
// merged into the manifest under "generator".
void write_dataset(const std::filesystem::path& dir, const SpatioTemporalDataset& ds,
                   const nlohmann::json& extra = nlohmann::json::object());

// Reads a dataset written by write_dataset. Missing (time, node) target rows
// become NaN and invalid; missing feature values are a DataError.
SpatioTemporalDataset read_dataset(const std::filesystem::path& dir);

nlohmann::json read_manifest(const std::filesystem::path& dir);

} // namespace bstnn
