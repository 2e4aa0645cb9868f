// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace mpl {

// Reserved token ids, fixed across vocabularies and checkpoints.
constexpr int kPadId = 0;
constexpr int kBosId = 1;
constexpr int kEosId = 2;
constexpr int kUnkId = 3;
constexpr int kNumReservedIds = 4;

}  // namespace mpl
