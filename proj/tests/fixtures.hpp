// Copyright 2026 The vfuse Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Reference sweep for a 32-layer model: masked accuracy per layer with the
// shallow fusion dips at {2, 4, 8, 11, 12, 13} and a single late dip at 29.

#pragma once

#include <array>
#include <cstddef>
#include <vector>

namespace vfuse::testing {

inline constexpr double kReferenceBaseline = 0.78;

inline constexpr std::array<double, 32> kReferenceSweep = {
    0.74, 0.70, 0.21, 0.66, 0.18, 0.62, 0.58, 0.55,  // 0-7
    0.12, 0.52, 0.48, 0.20, 0.16, 0.25, 0.60, 0.68,  // 8-15
    0.72, 0.74, 0.75, 0.76, 0.76, 0.77, 0.77, 0.76,  // 16-23
    0.77, 0.78, 0.77, 0.76, 0.75, 0.30, 0.74, 0.77,  // 24-31
};

inline const std::vector<std::size_t> kReferenceFusion = {2, 4, 8, 11, 12, 13};
inline constexpr std::size_t kReferenceReview = 29;
inline constexpr std::size_t kReferencePost = 28;

}  // namespace vfuse::testing
