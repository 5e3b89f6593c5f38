#include <fstream>
#include <sstream>

#include <json.hpp>

#include "vflow/cli.hpp"
#include "vflow/error.hpp"

namespace vflow::cli {
namespace {

using nlohmann::json;

constexpr const char* kFormat = "vflow-checkpoint";

[[noreturn]] void bad(const std::string& why) { throw Error(Errc::CheckpointInvalid, why); }

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from(const json& shape, const json& rows, const std::string& name) {
  if (!shape.is_array() || shape.size() != 2 || !rows.is_array()) bad("parameter " + name + " is malformed");
  const auto R = shape[0].get<Eigen::Index>(), C = shape[1].get<Eigen::Index>();
  if (R < 0 || C < 0 || static_cast<Eigen::Index>(rows.size()) != R) bad("parameter " + name + " has the wrong row count");
  Matrix m(R, C);
  for (Eigen::Index r = 0; r < R; ++r) {
    const json& row = rows[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != C)
      bad("parameter " + name + " has a ragged row");
    for (Eigen::Index c = 0; c < C; ++c) {
      if (!row[static_cast<std::size_t>(c)].is_number()) bad("parameter " + name + " holds a non-number");
      m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
    }
  }
  return m;
}

}  // namespace

std::string dump_checkpoint(const Checkpoint& ck) {
  json j;
  j["format"] = kFormat;
  j["version"] = ck.version;
  j["config"] = ck.config;
  j["dim"] = ck.dim;
  j["columns"] = ck.columns;
  j["vocab"] = ck.vocab;
  j["dropped"] = ck.dropped;
  json params = json::array();
  for (const auto& [name, value] : ck.params) {
    for (Eigen::Index i = 0; i < value.size(); ++i)
      if (!std::isfinite(value.data()[i])) throw Error(Errc::NonFiniteInput, "parameter " + name + " is not finite");
    params.push_back({{"name", name}, {"shape", {value.rows(), value.cols()}}, {"data", matrix_json(value)}});
  }
  j["params"] = std::move(params);
  json history = json::array();
  for (const auto& r : ck.history)
    history.push_back({{"epoch", r.epoch}, {"train_nll", r.train_nll}, {"val_nll", r.val_nll}, {"seconds", r.seconds}});
  j["history"] = std::move(history);
  return j.dump(1) + "\n";
}

Checkpoint parse_checkpoint(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    bad(std::string("not a JSON document: ") + e.what());
  }
  try {
    if (!j.is_object() || j.value("format", "") != kFormat) bad("not a vflow checkpoint");
    Checkpoint ck;
    ck.version = j.at("version").get<int>();
    if (ck.version > kCheckpointVersion)
      bad("schema version " + std::to_string(ck.version) + " is newer than supported version " +
          std::to_string(kCheckpointVersion));
    if (ck.version < 1) bad("invalid schema version");
    ck.config = j.at("config").get<std::map<std::string, std::string>>();
    ck.dim = j.at("dim").get<int>();
    ck.columns = j.at("columns").get<std::vector<std::string>>();
    ck.vocab = j.at("vocab").get<std::vector<std::vector<std::string>>>();
    ck.dropped = j.at("dropped").get<std::vector<std::string>>();
    if (ck.columns.size() != ck.vocab.size()) bad("columns and vocab differ in length");
    for (const json& p : j.at("params")) {
      const std::string name = p.at("name").get<std::string>();
      ck.params.emplace_back(name, matrix_from(p.at("shape"), p.at("data"), name));
    }
    for (const json& h : j.at("history")) {
      EpochRecord r;
      r.epoch = h.at("epoch").get<int>();
      r.train_nll = h.at("train_nll").get<double>();
      r.val_nll = h.at("val_nll").get<double>();
      r.seconds = h.at("seconds").get<double>();
      ck.history.push_back(r);
    }
    return ck;
  } catch (const json::exception& e) {
    bad(std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path) {
  const std::string text = dump_checkpoint(checkpoint);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(Errc::Io, "cannot write " + path);
  f << text;
  if (!f) throw Error(Errc::Io, "short write to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(Errc::Io, "cannot read checkpoint " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_checkpoint(ss.str());
}

LoadedModel load_model(const std::string& path) {
  LoadedModel m;
  m.checkpoint = load_checkpoint(path);
  try {
    m.config = config_from_entries(m.checkpoint.config);
  } catch (const Error& e) {
    bad(std::string("stored config is invalid: ") + e.what());
  }
  try {
    for (const auto& [name, value] : m.checkpoint.params) m.store.add(name, value);
    if (m.config.task == Task::Dequant) {
      std::vector<int> cards;
      for (const auto& v : m.checkpoint.vocab) cards.push_back(static_cast<int>(v.size()));
      m.dequant = DequantModel::find(m.store, cards, m.config.dequant);
      m.density = JointDensity::find(m.store, m.dequant.total_dim(), m.config.density);
    } else {
      m.mixture = MixtureModel::find(m.store, m.checkpoint.dim, m.config.mixture);
    }
  } catch (const Error& e) {
    if (e.code() == Errc::CheckpointInvalid) throw;
    bad(std::string("parameters do not match the stored config: ") + e.what());
  }
  return m;
}

}  // namespace vflow::cli
