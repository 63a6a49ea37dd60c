#pragma once

// On-disk dataset layout shared by the scene generator, the trainers, and the
// CLI:
//
//   <root>/body.txt                  proxy body description
//   <root>/animation.txt             skeleton animation, one frame per line
//   <root>/env.pfm                   training environment map (lat-long)
//   <root>/cameras/cam_###.txt       3x4 projection matrices, plain text
//   <root>/frames/frame_###/cam_###.pfm        rendered image
//   <root>/frames/frame_###/cam_###_mask.png   foreground mask
//
// Ground-truth extras written by the generator live under <root>/gt/ and are
// never read by training code.

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "relight/body.hpp"
#include "relight/camera.hpp"
#include "relight/envlight.hpp"
#include "relight/image.hpp"

namespace relight {

namespace fs = std::filesystem;

inline std::string index_name(const char* prefix, int i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%03d", prefix, i);
  return buf;
}

struct FrameData {
  int index = 0;
  Pose pose;
  std::vector<Image> images;  // one per camera
  std::vector<Image> masks;   // single channel, 1 = foreground
};

struct Dataset {
  fs::path root;
  ProxyMesh mesh;
  std::vector<Camera> cameras;
  std::vector<FrameData> frames;
  EnvironmentMap env;
  std::vector<std::unique_ptr<PosedBody>> posed;  // parallel to frames

  const PosedBody& body(int frame) const { return *posed[size_t(frame)]; }
};

inline int count_matching(const fs::path& dir, const std::string& stem_prefix,
                          const std::string& ext) {
  int n = 0;
  while (fs::exists(dir / (index_name(stem_prefix.c_str(), n) + ext))) ++n;
  return n;
}

// image_size: cameras get their pixel dimensions from the first frame image.
inline Dataset load_dataset(const fs::path& root, int max_frames = -1,
                            bool load_images = true) {
  if (!fs::exists(root / "body.txt"))
    throw IoError(cat("load_dataset: ", (root / "body.txt").string(), " not found"));
  Dataset ds;
  ds.root = root;
  ds.mesh = ProxyMesh::build(load_body_config((root / "body.txt").string()));

  int n_cams = count_matching(root / "cameras", "cam_", ".txt");
  if (n_cams == 0) throw IoError(cat("load_dataset: no cameras under ", root.string()));
  for (int c = 0; c < n_cams; ++c)
    ds.cameras.push_back(load_camera((root / "cameras" / (index_name("cam_", c) + ".txt")).string()));

  auto anim = load_animation((root / "animation.txt").string(), ds.mesh.joint_count());
  int n_frames = int(anim.size());
  if (max_frames >= 0) n_frames = std::min(n_frames, max_frames);
  for (int f = 0; f < n_frames; ++f) {
    FrameData frame;
    frame.index = f;
    frame.pose = anim[size_t(f)];
    if (load_images) {
      fs::path fdir = root / "frames" / index_name("frame_", f);
      for (int c = 0; c < n_cams; ++c) {
        frame.images.push_back(load_pfm((fdir / (index_name("cam_", c) + ".pfm")).string()));
        frame.masks.push_back(load_png((fdir / (index_name("cam_", c) + "_mask.png")).string()));
      }
    }
    ds.frames.push_back(std::move(frame));
  }
  // fill camera dimensions from the first image
  if (load_images && !ds.frames.empty() && !ds.frames[0].images.empty())
    for (auto& cam : ds.cameras) {
      cam.width = ds.frames[0].images[0].width;
      cam.height = ds.frames[0].images[0].height;
    }
  if (fs::exists(root / "env.pfm"))
    ds.env = EnvironmentMap::from_radiance(load_pfm((root / "env.pfm").string()));
  for (int f = 0; f < n_frames; ++f)
    ds.posed.push_back(std::make_unique<PosedBody>(ds.mesh, ds.frames[size_t(f)].pose));
  return ds;
}

}  // namespace relight
