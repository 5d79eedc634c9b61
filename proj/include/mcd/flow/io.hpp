#pragma once

#include <filesystem>

#include "mcd/flow/field.hpp"

namespace mcd::flow {

// Middlebury .flo: float 202021.25, i32 width, i32 height, then row-major
// interleaved (u, v) float32, all little-endian.
inline constexpr float kFloMagic = 202021.25f;
void save_flo(const FlowField& flow, const std::filesystem::path& path);
FlowField load_flo(const std::filesystem::path& path);

}  // namespace mcd::flow
