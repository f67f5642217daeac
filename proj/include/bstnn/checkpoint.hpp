#pragma once

// Model checkpoints as JSON: architecture, training configuration,
// standardizer, every parameter buffer and, for the spatio-temporal model, the
// graph it was trained on.

#include "bstnn/training.hpp"

#include <filesystem>

#include <json.hpp>

namespace bstnn {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
    TrainedModel trained;
    TrainingConfig config;
};

nlohmann::json checkpoint_to_json(const TrainedModel& trained, const TrainingConfig& config);
// Throws DataError on a malformed document, a shape mismatch or a graph whose
// hash disagrees with the stored one.
Checkpoint checkpoint_from_json(const nlohmann::json& j);

void save_checkpoint(const std::filesystem::path& path, const TrainedModel& trained, const TrainingConfig& config);
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace bstnn
