#pragma once

// A small trained pipeline shared by the attack and defense tests:
// 4-frame 24x24 clips, a classifier trained on them and one labeled clip.

#include <vector>

#include "mcd/attack/attacks.hpp"
#include "mcd/classifier/model.hpp"
#include "mcd/video/dataset.hpp"

namespace mcd::test {

struct SmallWorld {
  video::DatasetSpec spec;
  flow::FlowConfig flow;
  classifier::ClassifierModel model;
  video::ClipRecord record;
  std::vector<float> planar;

  attack::Target target() const { return attack::make_target(record.clip, planar); }
};

inline video::DatasetSpec small_spec() {
  video::DatasetSpec spec;
  spec.geometry = {4, 24, 24, 3};
  spec.clips_per_class = 4;
  spec.margin = 12;
  return spec;
}

// Built once per process; the tests only read it.
inline const SmallWorld& small_world() {
  static const SmallWorld world = [] {
    SmallWorld w;
    w.spec = small_spec();
    const auto data = video::generate_dataset(w.spec, 2024);
    classifier::TrainConfig tc;
    tc.seed = 7;
    w.model = classifier::train(data, tc, w.flow);
    w.record = video::generate_clip(w.spec, 4048, 1);
    w.planar = video::to_planar<float>(w.record.clip);
    return w;
  }();
  return world;
}

}  // namespace mcd::test
