#pragma once

#include <iomanip>

#include <openssl/evp.h>

#include <json.hpp>

#include "owseg/data.hpp"
#include "owseg/network.hpp"

namespace owseg {

inline constexpr int kCheckpointFormat = 1;

inline std::string sha256_hex(std::span<const uint8_t> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 computation failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

inline std::string sha256_hex(std::string_view s) {
  return sha256_hex(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(s.data()), s.size()));
}

inline nlohmann::json registry_to_json(const ClassRegistry& r) {
  nlohmann::json slots = nlohmann::json::object();
  for (auto [slot, cls] : r.rc_assigned()) slots[std::to_string(slot)] = cls;
  return {{"old", r.old_classes()},
          {"learned", r.learned_novel()},
          {"remaining", r.remaining_novel()},
          {"rc_total", r.rc_total()},
          {"rc_assigned", slots}};
}

inline ClassRegistry registry_from_json(const nlohmann::json& j) {
  std::map<int, ClassId> slots;
  for (const auto& [k, v] : j.at("rc_assigned").items()) slots[std::stoi(k)] = v.get<ClassId>();
  return ClassRegistry::from_parts(j.at("old").get<std::vector<ClassId>>(), j.at("learned").get<std::vector<ClassId>>(),
                                   j.at("remaining").get<std::vector<ClassId>>(), j.at("rc_total").get<int>(),
                                   std::move(slots));
}

/// Single JSON document. Doubles are printed shortest-round-trip, so loading is bit-exact.
inline std::string save_checkpoint(const Model& m) {
  nlohmann::json tensors = nlohmann::json::object();
  m.weights.for_each([&](const char* name, const Matrix& t) {
    tensors[name] = {{"rows", t.rows()}, {"cols", t.cols()},
                     {"data", std::vector<double>(t.data(), t.data() + t.size())}};
  });
  nlohmann::json j = {{"format_version", kCheckpointFormat},
                      {"stage", std::string(to_string(m.stage))},
                      {"arch", m.arch},
                      {"registry", registry_to_json(m.registry)},
                      {"weights", tensors}};
  j["lambda_th"] = m.lambda_th ? nlohmann::json(*m.lambda_th) : nlohmann::json(nullptr);
  return j.dump(1) + "\n";
}

inline Model load_checkpoint(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  try {
    if (j.at("format_version").get<int>() != kCheckpointFormat)
      throw FormatError("unsupported checkpoint format_version " + j.at("format_version").dump());
    Model m;
    m.arch = j.at("arch").get<ArchConfig>();
    m.arch.validate();
    m.stage = stage_from_string(j.at("stage").get<std::string>());
    m.registry = registry_from_json(j.at("registry"));
    if (!j.at("lambda_th").is_null()) m.lambda_th = j.at("lambda_th").get<double>();
    // Reference shapes come from a fresh init so a checkpoint cannot smuggle in mismatched tensors.
    const Model ref = init_model(m.registry, m.arch, 0, m.stage);
    std::vector<const Matrix*> expected;
    ref.weights.for_each([&](const char*, const Matrix& t) { expected.push_back(&t); });
    size_t k = 0;
    m.weights = ref.weights;
    m.weights.for_each([&](const char* name, Matrix& t) {
      const auto& rec = j.at("weights").at(name);
      const auto rows = rec.at("rows").get<Eigen::Index>(), cols = rec.at("cols").get<Eigen::Index>();
      const auto data = rec.at("data").get<std::vector<double>>();
      const Matrix& e = *expected[k++];
      if (rows != e.rows() || cols != e.cols() || static_cast<Eigen::Index>(data.size()) != rows * cols)
        throw FormatError(std::string("tensor ") + name + " has the wrong shape");
      for (double v : data)
        if (!std::isfinite(v)) throw FormatError(std::string("tensor ") + name + " holds non-finite values");
      t = Eigen::Map<const Matrix>(data.data(), rows, cols);
    });
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint: ") + e.what());
  } catch (const DomainError& e) {
    throw FormatError(std::string("inconsistent checkpoint: ") + e.what());
  }
}

}  // namespace owseg
