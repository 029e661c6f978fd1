// SPDX-License-Identifier: Apache-2.0
//
// JSON form of a Tape:
//
//   {"format": "nsid.tape", "version": 1, "inputs": n,
//    "nodes": [{"op": "input", "offset": 0, "size": 1},
//              {"op": "tanh", "args": [0]}, ...],
//    "outputs": [1]}
//
// Per-op fields: constant "value"; input/slice "offset", "size"; scale
// "factor"; power "exponent"; clamp "lo", "hi"; affine "matrix" (list of rows)
// and optional "offset".
#pragma once

#include <string>

#include "json.hpp"
#include "nsid/tape.hpp"

namespace nsid {

nlohmann::json to_json(const Tape& tape);
Tape tape_from_json(const nlohmann::json& doc);

std::string tape_to_string(const Tape& tape, int indent = 2);
Tape tape_from_string(const std::string& text);

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);
nlohmann::json vector_to_json(const Vector& v);
Vector vector_from_json(const nlohmann::json& j);

}  // namespace nsid
