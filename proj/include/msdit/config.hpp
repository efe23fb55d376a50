#pragma once

// Run configuration: one JSON document with sections `model`, `patches`,
// `train`, `sample`, and `data`.  Every key is optional and falls back to
// the defaults below, except composite entries (a patch, a plan stage, a
// rope split) whose fields must be given completely.  Unknown sections or
// keys are rejected by name.

#include <string>

#include <json.hpp>

#include "msdit/synth.hpp"
#include "msdit/trainer.hpp"
#include "msdit/types.hpp"

namespace msdit {

struct SampleConfig {
  StagePlan single;  // the finest scale over all of [0,1]
  StagePlan multi;   // coarse start, medium middle, fine finish
  GuidanceSpec guidance;

  SampleConfig() {
    multi.stages = {{0.0, 0.3, 2}, {0.3, 0.6, 1}, {0.6, 1.0, 0}};
  }
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SampleConfig sample;
  CorpusSpec data;

  void validate() const;
};

// Strict parse: unknown sections/keys and type mismatches raise config_error
// naming the key; composite entries with missing fields name the field.
RunConfig parse_run_config(const nlohmann::json& j);

// Reads and parses a config file.  Unreadable file: io_error; invalid JSON
// or contents: config_error.
RunConfig load_run_config(const std::string& path);

}  // namespace msdit
