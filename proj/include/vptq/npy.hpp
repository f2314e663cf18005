#pragma once

#include <filesystem>

#include "vptq/tensor.hpp"

namespace vptq {

// NPY reader/writer for rank-1/2 float tensors.
//
// load_npy accepts format versions 1.0 and 2.0 with dtype '<f4' or '<f8';
// float64 payloads are narrowed to float32 (round to nearest even). C order
// only; fortran_order=True is refused. Non-finite elements (checked after
// narrowing) fail the load.
//
// save_npy always emits version 1.0, dtype '<f4', C order. The write is
// atomic: temp file in the target directory, then rename.
TensorF32 load_npy(const std::filesystem::path& path);
void save_npy(const TensorF32& tensor, const std::filesystem::path& path);

}  // namespace vptq
