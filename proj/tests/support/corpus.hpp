#pragma once

// Synthetic scene corpora written to disk as PPM frames.

#include <filesystem>
#include <string>
#include <vector>

#include "poolnet/dataset.hpp"
#include "poolnet/image.hpp"
#include "poolnet/rng.hpp"

namespace poolnet::testing {

inline data::RgbImage solid_image(std::size_t side, int r, int g, int b) {
  data::RgbImage img{side, side, std::vector<std::uint8_t>(side * side * 3)};
  for (std::size_t i = 0; i < side * side; ++i) {
    img.pixels[i * 3 + 0] = static_cast<std::uint8_t>(r);
    img.pixels[i * 3 + 1] = static_cast<std::uint8_t>(g);
    img.pixels[i * 3 + 2] = static_cast<std::uint8_t>(b);
  }
  return img;
}

inline data::SceneRecord write_scene(const std::filesystem::path& root, const std::string& id,
                                     const std::vector<data::RgbImage>& frames) {
  data::SceneRecord s;
  s.scene_id = id;
  const auto dir = root / id;
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%03zu.ppm", i);
    data::write_ppm(dir / name, frames[i]);
    s.frame_paths.push_back(dir / name);
  }
  return s;
}

inline int clamp_level(int v) { return v < 0 ? 0 : (v > 255 ? 255 : v); }

// 64 scenes on the 4x4x4 colour grid {32,96,160,224}^3, each frame a solid
// fill with a small per-frame jitter. The last `test_scenes` of a seeded
// shuffle are marked test.
inline std::vector<data::SceneRecord> colour_corpus(const std::filesystem::path& root,
                                                    std::uint64_t seed, std::size_t frames = 20,
                                                    std::size_t side = 32,
                                                    std::size_t test_scenes = 7) {
  Rng rng(seed);
  const int levels[] = {32, 96, 160, 224};
  std::vector<data::SceneRecord> scenes;
  for (int r = 0; r < 4; ++r)
    for (int g = 0; g < 4; ++g)
      for (int b = 0; b < 4; ++b) {
        std::vector<data::RgbImage> imgs;
        for (std::size_t f = 0; f < frames; ++f) {
          auto j = [&] { return static_cast<int>(rng.uniform_index(9)) - 4; };
          imgs.push_back(solid_image(side, clamp_level(levels[r] + j()), clamp_level(levels[g] + j()),
                                     clamp_level(levels[b] + j())));
        }
        char id[32];
        std::snprintf(id, sizeof id, "colour_%d%d%d", r, g, b);
        scenes.push_back(write_scene(root, id, imgs));
      }
  std::vector<std::size_t> order(scenes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  for (std::size_t i = 0; i < order.size(); ++i) {
    scenes[order[i]].split = i + test_scenes >= order.size() ? data::Split::test : data::Split::train;
  }
  return scenes;
}

// Cluttered random frames; positive scenes carry a white square with a black
// core in at least `marked` of the frames. Balanced, labelled, split 9:1.
inline std::vector<data::SceneRecord> marker_corpus(const std::filesystem::path& root,
                                                    std::uint64_t seed, std::size_t scenes_n = 80,
                                                    std::size_t frames = 10, std::size_t side = 32,
                                                    std::size_t marked = 8) {
  Rng rng(seed);
  std::vector<data::SceneRecord> scenes;
  for (std::size_t s = 0; s < scenes_n; ++s) {
    const bool positive = s % 2 == 0;
    std::vector<data::RgbImage> imgs;
    for (std::size_t f = 0; f < frames; ++f) {
      data::RgbImage img{side, side, std::vector<std::uint8_t>(side * side * 3)};
      const int base[3] = {int(rng.uniform_index(160)), int(rng.uniform_index(160)),
                           int(rng.uniform_index(160))};
      for (std::size_t i = 0; i < side * side; ++i)
        for (int c = 0; c < 3; ++c)
          img.pixels[i * 3 + c] = static_cast<std::uint8_t>(clamp_level(base[c] + int(rng.uniform_index(48)) - 24));
      if (positive && f < marked) {
        const std::size_t m = side / 2;
        const std::size_t x0 = rng.uniform_index(side - m + 1), y0 = rng.uniform_index(side - m + 1);
        for (std::size_t y = 0; y < m; ++y)
          for (std::size_t x = 0; x < m; ++x) {
            const bool core = x >= m / 4 && x < m - m / 4 && y >= m / 4 && y < m - m / 4;
            for (int c = 0; c < 3; ++c)
              img.pixels[((y0 + y) * side + x0 + x) * 3 + c] = core ? 0 : 255;
          }
      }
      imgs.push_back(std::move(img));
    }
    // Marked frames are not always the first ones on disk.
    rng.shuffle(imgs);
    char id[32];
    std::snprintf(id, sizeof id, "marker_%03zu", s);
    auto rec = write_scene(root, id, imgs);
    data::LabelSet labels;
    labels.T_s = positive ? 1 : 0;
    labels.T_o = positive ? 0.8 : 0.2;
    labels.V_t = positive ? 10 : 0;
    rec.labels = labels;
    rec.label_source = "synthetic";
    scenes.push_back(std::move(rec));
  }
  auto [train, test] = data::split_train_test(scenes, 0.9, seed);
  std::vector<data::SceneRecord> out = train;
  out.insert(out.end(), test.begin(), test.end());
  return out;
}

}  // namespace poolnet::testing
