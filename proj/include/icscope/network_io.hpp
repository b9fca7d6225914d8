#pragma once

// Versioned JSON document for networks. Field names are documented in
// docs/schemas.md; weights are row-major.

#include <fstream>
#include <string>
#include <vector>

#include "icscope/errors.hpp"
#include "icscope/network.hpp"
#include "json.hpp"

namespace icscope {

inline constexpr const char* kNetworkFormat = "icscope.network";
inline constexpr int kNetworkVersion = 1;

inline nlohmann::json network_to_json(const Network& net) {
  nlohmann::json doc;
  doc["format"] = kNetworkFormat;
  doc["version"] = kNetworkVersion;
  doc["head"] = to_string(net.head());
  doc["dropout_rate"] = net.dropout_rate();
  doc["seed"] = net.seed();
  doc["input_shape"] = net.input_shape();
  auto layers = nlohmann::json::array();
  for (const auto& layer : net.layers()) {
    std::vector<double> weights;
    weights.reserve(static_cast<std::size_t>(layer.weight.size()));
    for (Index r = 0; r < layer.weight.rows(); ++r)
      for (Index c = 0; c < layer.weight.cols(); ++c) weights.push_back(layer.weight(r, c));
    layers.push_back({{"in", layer.in_dim()},
                      {"out", layer.out_dim()},
                      {"nonlinearity", to_string(layer.nonlinearity)},
                      {"weight", std::move(weights)},
                      {"bias", std::vector<double>(layer.bias.data(), layer.bias.data() + layer.bias.size())}});
  }
  doc["layers"] = std::move(layers);
  return doc;
}

inline Network network_from_json(const nlohmann::json& doc) {
  try {
    detail::require(doc.at("format").get<std::string>() == kNetworkFormat, "not a network document");
    detail::require(doc.at("version").get<int>() == kNetworkVersion, "unsupported network version");
    const auto head_name = doc.at("head").get<std::string>();
    detail::require(head_name == "sigmoid_binary" || head_name == "softmax", "unknown head " + head_name);
    std::vector<DenseLayer> layers;
    for (const auto& item : doc.at("layers")) {
      const auto in = item.at("in").get<Index>();
      const auto out = item.at("out").get<Index>();
      const auto weights = item.at("weight").get<std::vector<double>>();
      const auto bias = item.at("bias").get<std::vector<double>>();
      detail::require_dims(static_cast<Index>(weights.size()) == in * out, "weight array has wrong length");
      detail::require_dims(static_cast<Index>(bias.size()) == out, "bias array has wrong length");
      const auto nl = item.at("nonlinearity").get<std::string>();
      detail::require(nl == "relu" || nl == "identity", "unknown nonlinearity " + nl);
      DenseLayer layer{Matrix(out, in), Vector(out),
                       nl == "relu" ? Nonlinearity::relu : Nonlinearity::identity};
      std::size_t i = 0;
      for (Index r = 0; r < out; ++r)
        for (Index c = 0; c < in; ++c) layer.weight(r, c) = weights[i++];
      for (Index r = 0; r < out; ++r) layer.bias(r) = bias[static_cast<std::size_t>(r)];
      layers.push_back(std::move(layer));
    }
    Network net(std::move(layers),
                head_name == "softmax" ? HeadKind::softmax : HeadKind::sigmoid_binary,
                doc.at("dropout_rate").get<double>(), doc.at("seed").get<std::uint64_t>());
    if (doc.contains("input_shape")) net.set_input_shape(doc["input_shape"].get<std::vector<int>>());
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed network document: ") + e.what());
  }
}

inline void save_network(const Network& net, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << network_to_json(net).dump() << '\n';
  if (!out) throw ConfigError("failed writing " + path);
}

inline Network load_network(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse " + path + ": " + e.what());
  }
  return network_from_json(doc);
}

}  // namespace icscope
