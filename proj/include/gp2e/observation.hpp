// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "gp2e/tensor.hpp"

namespace gp2e {

inline constexpr std::size_t kPointChannels = 6;
inline constexpr std::size_t kRobotStateDim = 7;
inline constexpr std::size_t kActionDim = 4;

/// Policy input: labelled N x 6 cloud (xyz + label colour) plus robot state
/// (gripper xyz, gripper velocity xyz, grip flag).
struct PointCloudObservation {
  Tensor points{Shape{0, kPointChannels}};
  Tensor robot_state{Shape{kRobotStateDim}};
};

}  // namespace gp2e
