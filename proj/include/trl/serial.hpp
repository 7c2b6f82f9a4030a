#ifndef TRL_SERIAL_HPP
#define TRL_SERIAL_HPP

#include <string>
#include <vector>

#include <json.hpp>

#include "trl/common.hpp"
#include "trl/errors.hpp"

namespace trl::serial {

inline nlohmann::json vec_to_json(const Vec& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

inline Vec vec_from_json(const nlohmann::json& j) {
  auto data = j.get<std::vector<double>>();
  return Eigen::Map<const Vec>(data.data(), static_cast<Index>(data.size()));
}

inline nlohmann::json mat_to_json(const Mat& m) {
  nlohmann::json j;
  j["rows"] = m.rows();
  j["cols"] = m.cols();
  j["data"] = std::vector<double>(m.data(), m.data() + m.size());  // column-major
  return j;
}

inline Mat mat_from_json(const nlohmann::json& j) {
  Index rows = j.at("rows").get<Index>();
  Index cols = j.at("cols").get<Index>();
  auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<Index>(data.size()) != rows * cols)
    throw ConfigError("matrix payload size mismatch");
  return Eigen::Map<const Mat>(data.data(), rows, cols);
}

}  // namespace trl::serial

#endif
