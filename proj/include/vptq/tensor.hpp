#pragma once

#include <cstddef>
#include <vector>

namespace vptq {

// Dense float32 tensor, rank 1 or 2, row-major. Every dimension is >= 1;
// construction rejects anything else.
struct TensorF32 {
    std::vector<std::size_t> shape;
    std::vector<float> data;

    TensorF32() = default;
    TensorF32(std::vector<std::size_t> shape_, std::vector<float> data_);

    static TensorF32 zeros(std::vector<std::size_t> shape_);

    std::size_t rank() const { return shape.size(); }
    std::size_t size() const { return data.size(); }

    std::size_t rows() const { return shape[0]; }
    std::size_t cols() const { return rank() == 2 ? shape[1] : 1; }

    float at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
    float& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }

    bool operator==(const TensorF32&) const = default;
};

}  // namespace vptq
