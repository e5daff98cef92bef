/* Copyright 2026 The skam Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

// JSON Schema (a subset of draft 2020-12) for experiment configurations, and a
// validator for that subset: type, enum, required, properties,
// additionalProperties (boolean), items, minItems, maxItems, minLength,
// minimum, maximum, exclusiveMinimum, exclusiveMaximum.
//
// docs/experiment.schema.json is a copy of kExperimentSchema; a unit test keeps
// the two identical.

#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace skam {

inline constexpr std::string_view kExperimentSchema = R"json({
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "skam experiment configuration",
  "type": "object",
  "required": ["model", "task", "training", "output_dir"],
  "additionalProperties": false,
  "properties": {
    "model": {
      "type": "object",
      "additionalProperties": false,
      "properties": {
        "depth": {"type": "integer", "minimum": 0},
        "d_model": {"type": "integer", "minimum": 1},
        "heads": {"type": "integer", "minimum": 1},
        "vocab": {"type": "integer", "minimum": 1},
        "seq_len": {"type": "integer", "minimum": 2},
        "persistent_slots": {"type": "integer", "minimum": 1},
        "transform": {
          "type": "object",
          "required": ["kind"],
          "additionalProperties": false,
          "properties": {
            "kind": {"enum": ["softmax", "sparsemax", "entmax", "norm_relu", "relumax", "topk_uniform", "topk_softmax"]},
            "alpha": {"type": "number", "exclusiveMinimum": 1},
            "k": {"type": "integer", "minimum": 1},
            "b": {"type": "number"}
          }
        },
        "gamma": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "lambda_init": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "optimizer": {
          "type": "object",
          "additionalProperties": false,
          "properties": {
            "lr": {"type": "number", "exclusiveMinimum": 0},
            "min_lr": {"type": "number", "minimum": 0},
            "betas": {"type": "array", "minItems": 2, "maxItems": 2, "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}},
            "eps": {"type": "number", "exclusiveMinimum": 0},
            "weight_decay": {"type": "number", "minimum": 0},
            "grad_clip": {"type": "number", "exclusiveMinimum": 0},
            "warmup_iters": {"type": "integer", "minimum": 0},
            "max_iters": {"type": "integer", "minimum": 1}
          }
        },
        "seed": {"type": "integer", "minimum": 0}
      }
    },
    "task": {
      "type": "object",
      "required": ["kind", "base_len"],
      "additionalProperties": false,
      "properties": {
        "kind": {"enum": ["mqmtar", "reverse", "sort"]},
        "base_len": {"type": "integer", "minimum": 1},
        "length_multiplier": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "count": {"type": "integer", "minimum": 1}
      }
    },
    "training": {
      "type": "object",
      "required": ["iters", "batch_size"],
      "additionalProperties": false,
      "properties": {
        "iters": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "eval_every": {"type": "integer", "minimum": 0},
        "eval_samples": {"type": "integer", "minimum": 1},
        "eval_multipliers": {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}},
        "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
        "log_every": {"type": "integer", "minimum": 1},
        "checkpoint_every": {"type": "integer", "minimum": 0},
        "log_elapsed": {"type": "boolean"}
      }
    },
    "output_dir": {"type": "string", "minLength": 1}
  }
}
)json";

namespace detail {

inline bool schema_type_matches(const nlohmann::json& v, const std::string& type) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "string") return v.is_string();
  if (type == "boolean") return v.is_boolean();
  if (type == "null") return v.is_null();
  if (type == "integer") return v.is_number_integer();
  if (type == "number") return v.is_number();
  return false;
}

inline void validate_node(const nlohmann::json& schema, const nlohmann::json& v, const std::string& path,
                          std::vector<std::string>& errors) {
  if (schema.contains("type")) {
    const auto& t = schema.at("type");
    bool ok = false;
    if (t.is_array()) {
      for (const auto& alt : t) ok = ok || schema_type_matches(v, alt.get<std::string>());
    } else {
      ok = schema_type_matches(v, t.get<std::string>());
    }
    if (!ok) {
      errors.push_back(path + ": expected type " + t.dump());
      return;
    }
  }
  if (schema.contains("enum")) {
    bool found = false;
    for (const auto& e : schema.at("enum")) found = found || e == v;
    if (!found) errors.push_back(path + ": value " + v.dump() + " not in " + schema.at("enum").dump());
  }
  if (v.is_number()) {
    const double x = v.get<double>();
    if (schema.contains("minimum") && x < schema.at("minimum").get<double>())
      errors.push_back(path + ": " + v.dump() + " < minimum " + schema.at("minimum").dump());
    if (schema.contains("maximum") && x > schema.at("maximum").get<double>())
      errors.push_back(path + ": " + v.dump() + " > maximum " + schema.at("maximum").dump());
    if (schema.contains("exclusiveMinimum") && x <= schema.at("exclusiveMinimum").get<double>())
      errors.push_back(path + ": " + v.dump() + " must be > " + schema.at("exclusiveMinimum").dump());
    if (schema.contains("exclusiveMaximum") && x >= schema.at("exclusiveMaximum").get<double>())
      errors.push_back(path + ": " + v.dump() + " must be < " + schema.at("exclusiveMaximum").dump());
  }
  if (v.is_string() && schema.contains("minLength") &&
      v.get<std::string>().size() < schema.at("minLength").get<std::size_t>())
    errors.push_back(path + ": string shorter than " + schema.at("minLength").dump());
  if (v.is_array()) {
    if (schema.contains("minItems") && v.size() < schema.at("minItems").get<std::size_t>())
      errors.push_back(path + ": fewer than " + schema.at("minItems").dump() + " items");
    if (schema.contains("maxItems") && v.size() > schema.at("maxItems").get<std::size_t>())
      errors.push_back(path + ": more than " + schema.at("maxItems").dump() + " items");
    if (schema.contains("items"))
      for (std::size_t i = 0; i < v.size(); ++i)
        validate_node(schema.at("items"), v[i], path + "[" + std::to_string(i) + "]", errors);
  }
  if (v.is_object()) {
    if (schema.contains("required"))
      for (const auto& r : schema.at("required"))
        if (!v.contains(r.get<std::string>())) errors.push_back(path + ": missing required '" + r.get<std::string>() + "'");
    const nlohmann::json props = schema.value("properties", nlohmann::json::object());
    const bool closed = schema.contains("additionalProperties") && schema.at("additionalProperties") == false;
    for (const auto& [key, child] : v.items()) {
      if (props.contains(key))
        validate_node(props.at(key), child, path + "." + key, errors);
      else if (closed)
        errors.push_back(path + ": unknown property '" + key + "'");
    }
  }
}

}  // namespace detail

/// Violations of `schema` by `value`, as "path: message" strings; empty when valid.
inline std::vector<std::string> validate_schema(const nlohmann::json& schema, const nlohmann::json& value) {
  std::vector<std::string> errors;
  detail::validate_node(schema, value, "$", errors);
  return errors;
}

inline std::vector<std::string> validate_experiment_json(const nlohmann::json& value) {
  static const nlohmann::json schema = nlohmann::json::parse(kExperimentSchema);
  return validate_schema(schema, value);
}

}  // namespace skam
