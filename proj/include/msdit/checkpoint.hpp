#pragma once

// Binary checkpoint files for named float32 tensors.
//
// Layout (all integers little-endian):
//   "LVCK"  u32 version=1  u32 count
//   then per tensor, in store order:
//   u32 name_len, name bytes, u8 dtype (0 = f32), u8 ndim, ndim x u64 dims,
//   row-major f32 payload.
// Writes go to a temp file in the same directory and are renamed into
// place, so a crash never leaves a half-written checkpoint behind.

#include <string>

#include "msdit/model.hpp"

namespace msdit {

void save_checkpoint(const ParamStore<float>& params, const std::string& path);

// Rejects wrong magic, unsupported version or dtype, and truncated files
// with io_error naming the path.
ParamStore<float> load_checkpoint(const std::string& path);

}  // namespace msdit
