#include "nlran/run_config.hpp"

#include <fstream>
#include <functional>
#include <map>

namespace nlran {

using nlohmann::json;

namespace {

/// Applies each key of `j` through its setter; unknown keys and type errors
/// become ConfigError prefixed with `section`.
void apply(const json& j, const std::string& section, const std::map<std::string, std::function<void(const json&)>>& setters) {
  if (!j.is_object()) throw ConfigError(section + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown key " + section + "." + key);
    try {
      it->second(value);
    } catch (const json::exception& e) {
      throw ConfigError(section + "." + key + ": " + e.what());
    }
  }
}

json rule_to_json(const LesionRule& r) {
  return json{{"count", r.count},
              {"radius", {r.radius.lo, r.radius.hi}},
              {"intensity", r.intensity},
              {"radial_position", {r.radial_position.lo, r.radial_position.hi}}};
}

Range range_of(const json& v) {
  const auto a = v.get<std::array<double, 2>>();
  return {a[0], a[1]};
}

LesionRule rule_from_json(const json& j, const std::string& section, LesionRule r) {
  apply(j, section, {{"count", [&](const json& v) { r.count = v.get<std::array<int, 2>>(); }},
                     {"radius", [&](const json& v) { r.radius = range_of(v); }},
                     {"intensity", [&](const json& v) { r.intensity = v.get<float>(); }},
                     {"radial_position", [&](const json& v) { r.radial_position = range_of(v); }}});
  return r;
}

}  // namespace

json phantom_to_json(const PhantomSpec& s) {
  return json{{"count", s.count},
              {"slice_range", s.slice_range},
              {"height", s.height},
              {"width", s.width},
              {"reference_slices", s.reference_slices},
              {"body_intensity", s.body_intensity},
              {"lung_intensity", s.lung_intensity},
              {"vessel_intensity", s.vessel_intensity},
              {"vessel_count", s.vessel_count},
              {"texture_amplitude", s.texture_amplitude},
              {"noise_level", s.noise_level},
              {"cp", rule_to_json(s.cp)},
              {"ncp", rule_to_json(s.ncp)},
              {"max_retries", s.max_retries},
              {"seed", s.seed}};
}

PhantomSpec phantom_from_json(const json& j, PhantomSpec s) {
  apply(j, "phantom",
        {{"count", [&](const json& v) { s.count = v.get<std::size_t>(); }},
         {"slice_range", [&](const json& v) { s.slice_range = v.get<std::array<std::size_t, 2>>(); }},
         {"height", [&](const json& v) { s.height = v.get<std::size_t>(); }},
         {"width", [&](const json& v) { s.width = v.get<std::size_t>(); }},
         {"reference_slices", [&](const json& v) { s.reference_slices = v.get<std::size_t>(); }},
         {"body_intensity", [&](const json& v) { s.body_intensity = v.get<float>(); }},
         {"lung_intensity", [&](const json& v) { s.lung_intensity = v.get<float>(); }},
         {"vessel_intensity", [&](const json& v) { s.vessel_intensity = v.get<float>(); }},
         {"vessel_count", [&](const json& v) { s.vessel_count = v.get<std::array<int, 2>>(); }},
         {"texture_amplitude", [&](const json& v) { s.texture_amplitude = v.get<float>(); }},
         {"noise_level", [&](const json& v) { s.noise_level = v.get<double>(); }},
         {"cp", [&](const json& v) { s.cp = rule_from_json(v, "phantom.cp", s.cp); }},
         {"ncp", [&](const json& v) { s.ncp = rule_from_json(v, "phantom.ncp", s.ncp); }},
         {"max_retries", [&](const json& v) { s.max_retries = v.get<int>(); }},
         {"seed", [&](const json& v) { s.seed = v.get<std::uint64_t>(); }}});
  s.validate();
  return s;
}

json preprocess_to_json(const PreprocessConfig& c) {
  return json{{"target_slices", c.target_slices},
              {"crop_height", c.crop_height},
              {"crop_width", c.crop_width},
              {"use_mask", c.use_mask}};
}

PreprocessConfig preprocess_from_json(const json& j, PreprocessConfig c) {
  apply(j, "data.preprocess",
        {{"target_slices", [&](const json& v) { c.target_slices = v.get<std::size_t>(); }},
         {"crop_height", [&](const json& v) { c.crop_height = v.get<std::size_t>(); }},
         {"crop_width", [&](const json& v) { c.crop_width = v.get<std::size_t>(); }},
         {"use_mask", [&](const json& v) { c.use_mask = v.get<bool>(); }}});
  return c;
}

void RunConfig::validate() const {
  network.validate();
  train.validate();
  phantom.validate();
  const auto& p = data.preprocess;
  if (p.target_slices == 0 || p.crop_height == 0 || p.crop_width == 0) {
    throw ConfigError("data.preprocess extents must be positive");
  }
  if (Extent3{p.target_slices, p.crop_height, p.crop_width} != network.input_shape) {
    throw ConfigError("data.preprocess output " + std::to_string(p.target_slices) + "x" + std::to_string(p.crop_height) +
                      "x" + std::to_string(p.crop_width) + " does not match network.input_shape");
  }
  if (data.split_ratios[0] == 0 || data.split_ratios[1] == 0) {
    throw ConfigError("data.split_ratios needs non-zero train and validation parts");
  }
}

json RunConfig::to_json() const {
  return json{{"network", network.to_json()},
              {"train", train.to_json()},
              {"phantom", phantom_to_json(phantom)},
              {"data",
               {{"split_ratios", data.split_ratios},
                {"split_seed", data.split_seed},
                {"stratified", data.stratified},
                {"preprocess", preprocess_to_json(data.preprocess)}}},
              {"paths", {{"data_dir", paths.data_dir}, {"processed_dir", paths.processed_dir}, {"run_dir", paths.run_dir}}}};
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  apply(j, "config",
        {{"network",
          [&](const json& v) {
            if (!v.is_object()) throw ConfigError("network must be a JSON object");
            auto merged = c.network.to_json();
            merged.update(v);
            for (const auto& [key, _] : v.items()) {
              if (!c.network.to_json().contains(key)) throw ConfigError("unknown key network." + key);
            }
            c.network = NetworkConfig::from_json(merged);
          }},
         {"train", [&](const json& v) { c.train = TrainConfig::from_json(v, c.train); }},
         {"phantom", [&](const json& v) { c.phantom = phantom_from_json(v, c.phantom); }},
         {"data",
          [&](const json& v) {
            apply(v, "data",
                  {{"split_ratios", [&](const json& x) { c.data.split_ratios = x.get<std::array<std::size_t, 3>>(); }},
                   {"split_seed", [&](const json& x) { c.data.split_seed = x.get<std::uint64_t>(); }},
                   {"stratified", [&](const json& x) { c.data.stratified = x.get<bool>(); }},
                   {"preprocess", [&](const json& x) { c.data.preprocess = preprocess_from_json(x, c.data.preprocess); }}});
          }},
         {"paths", [&](const json& v) {
            apply(v, "paths",
                  {{"data_dir", [&](const json& x) { c.paths.data_dir = x.get<std::string>(); }},
                   {"processed_dir", [&](const json& x) { c.paths.processed_dir = x.get<std::string>(); }},
                   {"run_dir", [&](const json& x) { c.paths.run_dir = x.get<std::string>(); }}});
          }}});
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

}  // namespace nlran
