// SPDX-License-Identifier: Apache-2.0
#include "nsid/tape_json.hpp"

#include "nsid/errors.hpp"

namespace nsid {

using nlohmann::json;

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const json& j) {
  if (!j.is_array()) throw ConfigError("matrix must be a list of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows == 0 ? Eigen::Index{0} : static_cast<Eigen::Index>(j.at(0).size());
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const json& row = j.at(static_cast<std::size_t>(i));
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
      throw ConfigError("matrix rows must have equal length");
    }
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = row.at(static_cast<std::size_t>(c)).get<double>();
  }
  if (!m.allFinite()) throw ConfigError("matrix has non-finite entries");
  return m;
}

json vector_to_json(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

Vector vector_from_json(const json& j) {
  if (j.is_number()) return Vector::Constant(1, j.get<double>());
  if (!j.is_array()) throw ConfigError("vector must be a list of numbers");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j.at(i).get<double>();
  if (!v.allFinite()) throw ConfigError("vector has non-finite entries");
  return v;
}

json to_json(const Tape& tape) {
  json nodes = json::array();
  for (const Node& n : tape.nodes()) {
    json j;
    j["op"] = std::string(op_name(n.kind));
    if (!n.args.empty()) j["args"] = n.args;
    switch (n.kind) {
      case OpKind::input:
      case OpKind::slice:
        j["offset"] = n.offset;
        j["size"] = n.size;
        break;
      case OpKind::constant:
        j["value"] = vector_to_json(n.vec);
        break;
      case OpKind::scale:
        j["factor"] = n.param;
        break;
      case OpKind::power:
        j["exponent"] = n.param;
        break;
      case OpKind::clamp:
        j["lo"] = n.lo;
        j["hi"] = n.hi;
        break;
      case OpKind::affine:
        j["matrix"] = matrix_to_json(n.matrix);
        j["offset"] = vector_to_json(n.vec);
        break;
      default:
        break;
    }
    nodes.push_back(std::move(j));
  }
  return json{{"format", "nsid.tape"},
              {"version", 1},
              {"inputs", tape.num_inputs()},
              {"nodes", std::move(nodes)},
              {"outputs", tape.outputs()}};
}

Tape tape_from_json(const json& doc) {
  try {
    if (doc.contains("version") && doc.at("version").get<int>() != 1) {
      throw ConfigError("unsupported tape version");
    }
    TapeBuilder b(doc.at("inputs").get<std::size_t>());
    for (const json& j : doc.at("nodes")) {
      const auto kind = op_from_name(j.at("op").get<std::string>());
      if (!kind) throw ConfigError("unknown op '" + j.at("op").get<std::string>() + "'");
      Node n;
      n.kind = *kind;
      if (j.contains("args")) n.args = j.at("args").get<std::vector<NodeId>>();
      switch (n.kind) {
        case OpKind::input:
          b.input(j.at("offset").get<std::size_t>(), j.at("size").get<std::size_t>());
          continue;
        case OpKind::slice:
          n.offset = j.at("offset").get<std::size_t>();
          n.size = j.at("size").get<std::size_t>();
          break;
        case OpKind::constant:
          n.vec = vector_from_json(j.at("value"));
          n.size = static_cast<std::size_t>(n.vec.size());
          break;
        case OpKind::scale:
          n.param = j.at("factor").get<double>();
          break;
        case OpKind::power:
          n.param = j.at("exponent").get<double>();
          break;
        case OpKind::clamp:
          n.lo = j.at("lo").get<double>();
          n.hi = j.at("hi").get<double>();
          break;
        case OpKind::affine:
          n.matrix = matrix_from_json(j.at("matrix"));
          n.vec = j.contains("offset") ? vector_from_json(j.at("offset")) : Vector::Zero(n.matrix.rows());
          break;
        default:
          break;
      }
      b.push(std::move(n));
    }
    std::vector<Var> outs;
    for (NodeId id : doc.at("outputs").get<std::vector<NodeId>>()) outs.push_back(Var{&b, id});
    return b.build(outs);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed tape JSON: ") + e.what());
  }
}

std::string tape_to_string(const Tape& tape, int indent) { return to_json(tape).dump(indent); }

Tape tape_from_string(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what());
  }
  return tape_from_json(doc);
}

}  // namespace nsid
