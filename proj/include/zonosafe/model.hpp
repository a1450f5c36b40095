#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "zonosafe/certificates.hpp"
#include "zonosafe/latent_model.hpp"
#include "zonosafe/mlp.hpp"

namespace zonosafe {

inline constexpr const char* kModelFormat = "zonosafe-model-v1";

/// Linear map from latent codes to the six hand-crafted safety features.
struct TeacherHead {
  Mat W;
  Vec b;

  Vec predict(const Vec& z) const { return W * z + b; }
};

/// Everything the controller and the analytics need from training and fitting.
struct LatentSafetyModel {
  Mlp encoder;
  Mlp decoder;
  LatentDynamics dynamics;
  TeacherHead teacher;
  std::vector<BarrierHead> heads;
  std::vector<double> head_correlation;  // probe R per head
  std::vector<std::string> head_targets;  // physical margin each head regresses onto
  ConjugacyReport conjugacy;
  double margin_delta = 0.0;  // fixed margin for the point+margin baseline
  std::map<std::string, std::string> metadata;

  Eigen::Index latent_dim() const { return encoder.output_dim(); }

  const BarrierHead& head(HeadKind k) const {
    for (const auto& h : heads) {
      if (h.kind == k) return h;
    }
    throw std::out_of_range("model has no head " + std::string(head_name(k)));
  }

  void validate() const {
    if (encoder.input_dim() != 16) throw std::invalid_argument("model: encoder must take the 16-dimensional state");
    if (decoder.input_dim() != encoder.output_dim() || decoder.output_dim() != encoder.input_dim()) {
      throw std::invalid_argument("model: decoder shape does not mirror the encoder");
    }
    if (dynamics.A.size()) {
      dynamics.validate();
      if (dynamics.latent_dim() != latent_dim()) throw std::invalid_argument("model: dynamics dimension mismatch");
    }
    for (const auto& h : heads) {
      h.validate();
      if (h.w.size() != latent_dim()) throw std::invalid_argument("model: head dimension mismatch");
    }
  }
};

class ModelFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

using nlohmann::json;

inline json matrix_to_json(const Mat& m) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

inline Mat matrix_from_json(const json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw ModelFormatError("matrix data size mismatch");
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[static_cast<std::size_t>(r * cols + c)];
  return m;
}

inline json vector_to_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vec vector_from_json(const json& j) {
  const auto data = j.get<std::vector<double>>();
  return Eigen::Map<const Vec>(data.data(), static_cast<Eigen::Index>(data.size()));
}

inline json mlp_to_json(const Mlp& net) {
  json layers = json::array();
  for (const auto& l : net.layers()) {
    if (l.kind == LayerKind::Dense) {
      layers.push_back({{"kind", "dense"}, {"weight", matrix_to_json(l.weight)}, {"bias", vector_to_json(l.bias)}});
    } else {
      layers.push_back({{"kind", "tanh"}});
    }
  }
  return json{{"input_dim", net.input_dim()}, {"output_dim", net.output_dim()}, {"layers", layers}};
}

inline Mlp mlp_from_json(const json& j) {
  std::vector<Layer> layers;
  for (const auto& l : j.at("layers")) {
    const auto kind = l.at("kind").get<std::string>();
    if (kind == "dense") {
      layers.push_back(Layer::dense(matrix_from_json(l.at("weight")), vector_from_json(l.at("bias"))));
    } else if (kind == "tanh") {
      layers.push_back(Layer::tanh());
    } else {
      throw ModelFormatError("unknown layer kind '" + kind + "'");
    }
  }
  return Mlp(std::move(layers));
}

}  // namespace detail

inline nlohmann::json model_to_json(const LatentSafetyModel& m) {
  using nlohmann::json;
  json heads = json::array();
  for (std::size_t i = 0; i < m.heads.size(); ++i) {
    const auto& h = m.heads[i];
    json jh{{"name", std::string(h.name())},  {"w", detail::vector_to_json(h.w)}, {"b", h.b},
            {"lipschitz", h.lipschitz},       {"eps_dir", h.eps_dir},             {"eps_box", h.eps_box}};
    if (i < m.head_targets.size()) jh["target"] = m.head_targets[i];
    if (i < m.head_correlation.size()) jh["probe_r"] = m.head_correlation[i];
    heads.push_back(std::move(jh));
  }
  json out{{"format", kModelFormat},
           {"encoder", detail::mlp_to_json(m.encoder)},
           {"decoder", detail::mlp_to_json(m.decoder)},
           {"heads", heads},
           {"margin_delta", m.margin_delta},
           {"metadata", m.metadata}};
  if (m.dynamics.A.size()) {
    out["dynamics"] = {{"dt", m.dynamics.dt},
                       {"A", detail::matrix_to_json(m.dynamics.A)},
                       {"B", detail::matrix_to_json(m.dynamics.B)}};
  }
  if (m.teacher.W.size()) {
    out["teacher"] = {{"W", detail::matrix_to_json(m.teacher.W)}, {"b", detail::vector_to_json(m.teacher.b)}};
  }
  out["conjugacy"] = {{"eps_conj", m.conjugacy.eps_conj},
                      {"steps", m.conjugacy.steps},
                      {"head_margins", m.conjugacy.head_margins}};
  return out;
}

inline LatentSafetyModel model_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != kModelFormat) {
      throw ModelFormatError("unsupported model format '" + j.at("format").get<std::string>() + "'");
    }
    LatentSafetyModel m;
    m.encoder = detail::mlp_from_json(j.at("encoder"));
    m.decoder = detail::mlp_from_json(j.at("decoder"));
    if (j.contains("dynamics")) {
      const auto& d = j.at("dynamics");
      m.dynamics.dt = d.at("dt").get<double>();
      m.dynamics.A = detail::matrix_from_json(d.at("A"));
      m.dynamics.B = detail::matrix_from_json(d.at("B"));
    }
    if (j.contains("teacher")) {
      m.teacher.W = detail::matrix_from_json(j.at("teacher").at("W"));
      m.teacher.b = detail::vector_from_json(j.at("teacher").at("b"));
    }
    for (const auto& jh : j.at("heads")) {
      BarrierHead h;
      h.kind = head_from_name(jh.at("name").get<std::string>());
      h.w = detail::vector_from_json(jh.at("w"));
      h.b = jh.at("b").get<double>();
      h.lipschitz = jh.at("lipschitz").get<double>();
      h.eps_dir = jh.at("eps_dir").get<double>();
      h.eps_box = jh.at("eps_box").get<double>();
      m.heads.push_back(std::move(h));
      if (jh.contains("target")) m.head_targets.push_back(jh.at("target").get<std::string>());
      if (jh.contains("probe_r")) m.head_correlation.push_back(jh.at("probe_r").get<double>());
    }
    m.margin_delta = j.value("margin_delta", 0.0);
    if (j.contains("metadata")) m.metadata = j.at("metadata").get<std::map<std::string, std::string>>();
    if (j.contains("conjugacy")) {
      const auto& c = j.at("conjugacy");
      m.conjugacy.eps_conj = c.at("eps_conj").get<double>();
      m.conjugacy.steps = c.at("steps").get<std::size_t>();
      m.conjugacy.head_margins = c.at("head_margins").get<std::vector<double>>();
    }
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ModelFormatError(std::string("malformed model document: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ModelFormatError(std::string("invalid model: ") + e.what());
  }
}

inline void save_model(const LatentSafetyModel& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::ios_base::failure("cannot open '" + path + "' for writing");
  out << model_to_json(m).dump(1) << '\n';
  if (!out) throw std::ios_base::failure("failed writing '" + path + "'");
}

inline LatentSafetyModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::ios_base::failure("cannot open model file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ModelFormatError("model file '" + path + "' is not valid JSON: " + e.what());
  }
  return model_from_json(j);
}

}  // namespace zonosafe
