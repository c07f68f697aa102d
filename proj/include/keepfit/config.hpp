#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "keepfit/data.hpp"
#include "keepfit/eval.hpp"
#include "keepfit/ibq.hpp"
#include "keepfit/mlm.hpp"
#include "keepfit/trainer.hpp"

namespace keepfit::config {

using nlohmann::json;

/// Every configuration key with its default, grouped by section.
json defaults();

/// Overlay `patch` onto `base`. Unknown sections or keys and values whose
/// type differs from the default throw UsageError.
void merge(json& base, const json& patch, const std::string& origin);
/// Apply one `section.key=value` override. The value is parsed as JSON when
/// possible and as a plain string otherwise.
void apply_override(json& config, const std::string& assignment);
/// defaults() overlaid with the file (if any) and then each override.
json resolve(const std::filesystem::path& file, const std::vector<std::string>& overrides);

/// One line per key: `section.key = default`.
std::string describe(const json& config);

data::SyntheticCorpusSpec corpus_spec(const json& config);
encoders::TextEncoderConfig text_encoder(const json& config);
mlm::MlmConfig mlm(const json& config);
ibq::AutoencoderConfig codebook(const json& config);
trainer::ModelConfig model(const json& config);
trainer::TrainConfig train(const json& config);
eval::EvalTask eval_task(const json& config);

} // namespace keepfit::config
