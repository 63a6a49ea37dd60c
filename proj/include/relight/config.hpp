#pragma once

// Run configuration (strict INI-style text: [section] + key = value, unknown
// keys rejected) and JSON run manifests.

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "relight/core.hpp"

namespace relight {

struct RunConfig {
  // [scene]
  uint64_t seed = 7;
  int frames = 3;
  int eval_frames = 1;
  int cameras_train = 12;
  int cameras_eval = 4;
  int bake_ring = 32;
  int bake_top = 8;
  int image_size = 160;
  int env_height = 16;
  int env_width = 32;
  float camera_radius = 2.6f;
  float camera_focal = 180.0f;  // pixels at image_size
  int gt_normal_res = 512;
  int gt_vis_res = 0;  // 0 disables the (heavy) ground-truth visibility rasters

  // [geometry]
  int voxel_res = 128;
  int geo_epochs = 12;
  int geo_steps = 120;
  int geo_patch = 20;
  int geo_samples = 48;
  float geo_lr = 0.05f;
  float lambda_l2 = 100.0f;
  float lambda_hard = 0.01f;
  float lambda_sigma = 0.01f;

  // [bake]
  int normal_res = 512;
  int vis_res = 256;
  int bake_samples = 96;
  int bake_image_size = 256;
  float march_step = 0.01f;
  float liftoff = 0.01f;
  int world_density_res = 128;

  // [inpaint]
  int normalnet_width = 32;
  int visnet_width = 64;
  int vis_dir_block = 64;
  int inpaint_steps = 250;
  int inpaint_crop = 128;
  float inpaint_lr = 3e-4f;
  int morph_iterations = 512;

  // [decompose]
  int material_res = 1024;
  int dec_epochs = 24;
  int dec_steps = 40;
  int dec_patch = 12;
  int dec_importance = 16;
  int dec_coarse = 64;
  float dec_sigma_d = 0.02f;
  float dec_lr_maps = 0.02f;
  float dec_lr_net = 1e-3f;
  float freeze_fraction = 0.25f;
  float lambda_smooth = 1.0f;
  float lambda_uv = 1.0f;
  float fresnel_f0 = 0.04f;
  int feature_res = 64;
  int feature_channels = 8;

  // [render]
  int render_width = 160;
  int render_height = 160;
  float opacity_threshold = 0.5f;
  int include_solid_angle = 1;

  void validate() const {
    auto positive = [](float v, const char* name) {
      if (!(v > 0)) throw ConfigError(cat("config: ", name, " must be positive"));
    };
    positive(geo_lr, "geometry.lr");
    positive(inpaint_lr, "inpaint.lr");
    positive(dec_lr_maps, "decompose.lr_maps");
    positive(dec_lr_net, "decompose.lr_net");
    positive(lambda_l2, "geometry.lambda_l2");
    positive(lambda_hard, "geometry.lambda_hard");
    positive(lambda_sigma, "geometry.lambda_sigma");
    positive(lambda_smooth, "decompose.lambda_smooth");
    positive(lambda_uv, "decompose.lambda_uv");
    if (frames < 1 || cameras_train < 1) throw ConfigError("config: scene needs frames and cameras");
    if (env_height < 1 || env_width < 1) throw ConfigError("config: bad environment size");
  }
};

namespace detail {

using ConfigField = std::pair<std::string, std::function<void(RunConfig&, const std::string&)>>;

inline std::map<std::string, std::function<void(RunConfig&, const std::string&)>>&
config_fields() {
  static auto parse_u64 = [](const std::string& v) { return std::stoull(v); };
  static std::map<std::string, std::function<void(RunConfig&, const std::string&)>> fields = {
      {"scene.seed", [](RunConfig& c, const std::string& v) { c.seed = parse_u64(v); }},
      {"scene.frames", [](RunConfig& c, const std::string& v) { c.frames = std::stoi(v); }},
      {"scene.eval_frames", [](RunConfig& c, const std::string& v) { c.eval_frames = std::stoi(v); }},
      {"scene.cameras_train", [](RunConfig& c, const std::string& v) { c.cameras_train = std::stoi(v); }},
      {"scene.cameras_eval", [](RunConfig& c, const std::string& v) { c.cameras_eval = std::stoi(v); }},
      {"scene.bake_ring", [](RunConfig& c, const std::string& v) { c.bake_ring = std::stoi(v); }},
      {"scene.bake_top", [](RunConfig& c, const std::string& v) { c.bake_top = std::stoi(v); }},
      {"scene.image_size", [](RunConfig& c, const std::string& v) { c.image_size = std::stoi(v); }},
      {"scene.env_height", [](RunConfig& c, const std::string& v) { c.env_height = std::stoi(v); }},
      {"scene.env_width", [](RunConfig& c, const std::string& v) { c.env_width = std::stoi(v); }},
      {"scene.camera_radius", [](RunConfig& c, const std::string& v) { c.camera_radius = std::stof(v); }},
      {"scene.camera_focal", [](RunConfig& c, const std::string& v) { c.camera_focal = std::stof(v); }},
      {"scene.gt_normal_res", [](RunConfig& c, const std::string& v) { c.gt_normal_res = std::stoi(v); }},
      {"scene.gt_vis_res", [](RunConfig& c, const std::string& v) { c.gt_vis_res = std::stoi(v); }},
      {"geometry.voxel_res", [](RunConfig& c, const std::string& v) { c.voxel_res = std::stoi(v); }},
      {"geometry.epochs", [](RunConfig& c, const std::string& v) { c.geo_epochs = std::stoi(v); }},
      {"geometry.steps", [](RunConfig& c, const std::string& v) { c.geo_steps = std::stoi(v); }},
      {"geometry.patch", [](RunConfig& c, const std::string& v) { c.geo_patch = std::stoi(v); }},
      {"geometry.samples", [](RunConfig& c, const std::string& v) { c.geo_samples = std::stoi(v); }},
      {"geometry.lr", [](RunConfig& c, const std::string& v) { c.geo_lr = std::stof(v); }},
      {"geometry.lambda_l2", [](RunConfig& c, const std::string& v) { c.lambda_l2 = std::stof(v); }},
      {"geometry.lambda_hard", [](RunConfig& c, const std::string& v) { c.lambda_hard = std::stof(v); }},
      {"geometry.lambda_sigma", [](RunConfig& c, const std::string& v) { c.lambda_sigma = std::stof(v); }},
      {"bake.normal_res", [](RunConfig& c, const std::string& v) { c.normal_res = std::stoi(v); }},
      {"bake.vis_res", [](RunConfig& c, const std::string& v) { c.vis_res = std::stoi(v); }},
      {"bake.samples", [](RunConfig& c, const std::string& v) { c.bake_samples = std::stoi(v); }},
      {"bake.image_size", [](RunConfig& c, const std::string& v) { c.bake_image_size = std::stoi(v); }},
      {"bake.march_step", [](RunConfig& c, const std::string& v) { c.march_step = std::stof(v); }},
      {"bake.liftoff", [](RunConfig& c, const std::string& v) { c.liftoff = std::stof(v); }},
      {"bake.world_density_res", [](RunConfig& c, const std::string& v) { c.world_density_res = std::stoi(v); }},
      {"inpaint.normalnet_width", [](RunConfig& c, const std::string& v) { c.normalnet_width = std::stoi(v); }},
      {"inpaint.visnet_width", [](RunConfig& c, const std::string& v) { c.visnet_width = std::stoi(v); }},
      {"inpaint.vis_dir_block", [](RunConfig& c, const std::string& v) { c.vis_dir_block = std::stoi(v); }},
      {"inpaint.steps", [](RunConfig& c, const std::string& v) { c.inpaint_steps = std::stoi(v); }},
      {"inpaint.crop", [](RunConfig& c, const std::string& v) { c.inpaint_crop = std::stoi(v); }},
      {"inpaint.lr", [](RunConfig& c, const std::string& v) { c.inpaint_lr = std::stof(v); }},
      {"inpaint.morph_iterations", [](RunConfig& c, const std::string& v) { c.morph_iterations = std::stoi(v); }},
      {"decompose.material_res", [](RunConfig& c, const std::string& v) { c.material_res = std::stoi(v); }},
      {"decompose.epochs", [](RunConfig& c, const std::string& v) { c.dec_epochs = std::stoi(v); }},
      {"decompose.steps", [](RunConfig& c, const std::string& v) { c.dec_steps = std::stoi(v); }},
      {"decompose.patch", [](RunConfig& c, const std::string& v) { c.dec_patch = std::stoi(v); }},
      {"decompose.importance_samples", [](RunConfig& c, const std::string& v) { c.dec_importance = std::stoi(v); }},
      {"decompose.coarse_samples", [](RunConfig& c, const std::string& v) { c.dec_coarse = std::stoi(v); }},
      {"decompose.sigma_d", [](RunConfig& c, const std::string& v) { c.dec_sigma_d = std::stof(v); }},
      {"decompose.lr_maps", [](RunConfig& c, const std::string& v) { c.dec_lr_maps = std::stof(v); }},
      {"decompose.lr_net", [](RunConfig& c, const std::string& v) { c.dec_lr_net = std::stof(v); }},
      {"decompose.freeze_fraction", [](RunConfig& c, const std::string& v) { c.freeze_fraction = std::stof(v); }},
      {"decompose.lambda_smooth", [](RunConfig& c, const std::string& v) { c.lambda_smooth = std::stof(v); }},
      {"decompose.lambda_uv", [](RunConfig& c, const std::string& v) { c.lambda_uv = std::stof(v); }},
      {"decompose.fresnel_f0", [](RunConfig& c, const std::string& v) { c.fresnel_f0 = std::stof(v); }},
      {"decompose.feature_res", [](RunConfig& c, const std::string& v) { c.feature_res = std::stoi(v); }},
      {"decompose.feature_channels", [](RunConfig& c, const std::string& v) { c.feature_channels = std::stoi(v); }},
      {"render.width", [](RunConfig& c, const std::string& v) { c.render_width = std::stoi(v); }},
      {"render.height", [](RunConfig& c, const std::string& v) { c.render_height = std::stoi(v); }},
      {"render.opacity_threshold", [](RunConfig& c, const std::string& v) { c.opacity_threshold = std::stof(v); }},
      {"render.include_solid_angle", [](RunConfig& c, const std::string& v) { c.include_solid_angle = std::stoi(v); }},
  };
  return fields;
}

inline std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError(cat("load_config: cannot open ", path));
  RunConfig cfg;
  std::string line, section;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[' && t.back() == ']') {
      section = detail::trim(t.substr(1, t.size() - 2));
      continue;
    }
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(cat("load_config: ", path, ":", lineno, ": expected key = value"));
    std::string key = detail::trim(t.substr(0, eq));
    std::string value = detail::trim(t.substr(eq + 1));
    std::string full = section.empty() ? key : section + "." + key;
    auto& fields = detail::config_fields();
    auto it = fields.find(full);
    if (it == fields.end())
      throw ConfigError(cat("load_config: ", path, ":", lineno, ": unknown key '", full, "'"));
    try {
      it->second(cfg, value);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError(cat("load_config: ", path, ":", lineno, ": bad value for '", full, "'"));
    }
  }
  cfg.validate();
  return cfg;
}

inline void save_config(const std::string& path, const RunConfig& c) {
  FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw IoError(cat("save_config: cannot open ", path));
  std::fprintf(f,
               "[scene]\nseed = %llu\nframes = %d\neval_frames = %d\ncameras_train = %d\n"
               "cameras_eval = %d\nbake_ring = %d\nbake_top = %d\nimage_size = %d\n"
               "env_height = %d\nenv_width = %d\ncamera_radius = %g\ncamera_focal = %g\n"
               "gt_normal_res = %d\ngt_vis_res = %d\n\n",
               (unsigned long long)c.seed, c.frames, c.eval_frames, c.cameras_train,
               c.cameras_eval, c.bake_ring, c.bake_top, c.image_size, c.env_height, c.env_width,
               c.camera_radius, c.camera_focal, c.gt_normal_res, c.gt_vis_res);
  std::fprintf(f,
               "[geometry]\nvoxel_res = %d\nepochs = %d\nsteps = %d\npatch = %d\nsamples = %d\n"
               "lr = %g\nlambda_l2 = %g\nlambda_hard = %g\nlambda_sigma = %g\n\n",
               c.voxel_res, c.geo_epochs, c.geo_steps, c.geo_patch, c.geo_samples, c.geo_lr,
               c.lambda_l2, c.lambda_hard, c.lambda_sigma);
  std::fprintf(f,
               "[bake]\nnormal_res = %d\nvis_res = %d\nsamples = %d\nimage_size = %d\n"
               "march_step = %g\nliftoff = %g\nworld_density_res = %d\n\n",
               c.normal_res, c.vis_res, c.bake_samples, c.bake_image_size, c.march_step,
               c.liftoff, c.world_density_res);
  std::fprintf(f,
               "[inpaint]\nnormalnet_width = %d\nvisnet_width = %d\nvis_dir_block = %d\n"
               "steps = %d\ncrop = %d\nlr = %g\nmorph_iterations = %d\n\n",
               c.normalnet_width, c.visnet_width, c.vis_dir_block, c.inpaint_steps,
               c.inpaint_crop, c.inpaint_lr, c.morph_iterations);
  std::fprintf(f,
               "[decompose]\nmaterial_res = %d\nepochs = %d\nsteps = %d\npatch = %d\n"
               "importance_samples = %d\ncoarse_samples = %d\nsigma_d = %g\nlr_maps = %g\n"
               "lr_net = %g\nfreeze_fraction = %g\nlambda_smooth = %g\nlambda_uv = %g\n"
               "fresnel_f0 = %g\nfeature_res = %d\nfeature_channels = %d\n\n",
               c.material_res, c.dec_epochs, c.dec_steps, c.dec_patch, c.dec_importance,
               c.dec_coarse, c.dec_sigma_d, c.dec_lr_maps, c.dec_lr_net, c.freeze_fraction,
               c.lambda_smooth, c.lambda_uv, c.fresnel_f0, c.feature_res, c.feature_channels);
  std::fprintf(f,
               "[render]\nwidth = %d\nheight = %d\nopacity_threshold = %g\n"
               "include_solid_angle = %d\n",
               c.render_width, c.render_height, c.opacity_threshold, c.include_solid_angle);
  std::fclose(f);
}

// ---------------------------------------------------------------- manifest

inline uint64_t fnv1a_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) return 0;
  uint64_t h = 14695981039346656037ull;
  char c;
  while (f.get(c)) {
    h ^= uint8_t(c);
    h *= 1099511628211ull;
  }
  return h;
}

// Written into every run directory: the command, configuration hash, seed,
// inputs consumed, and artifacts produced. No timestamps, so reruns with the
// same inputs produce byte-identical manifests.
inline void write_manifest(const std::filesystem::path& run_dir, const std::string& command,
                           const std::string& config_path, uint64_t seed,
                           const std::vector<std::string>& inputs,
                           const std::vector<std::string>& outputs) {
  nlohmann::json j;
  j["command"] = command;
  j["version"] = "0.1.0";
  j["seed"] = seed;
  if (!config_path.empty()) {
    j["config"] = config_path;
    j["config_hash"] = cat("fnv1a:", fnv1a_file(config_path));
  }
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  std::filesystem::create_directories(run_dir);
  std::ofstream f(run_dir / "manifest.json");
  if (!f) throw IoError(cat("write_manifest: cannot open ", (run_dir / "manifest.json").string()));
  f << j.dump(2) << "\n";
}

}  // namespace relight
