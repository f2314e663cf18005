#include "vptq/tensor.hpp"

#include "vptq/errors.hpp"

namespace vptq {

static std::size_t checked_element_count(const std::vector<std::size_t>& shape) {
    if (shape.empty() || shape.size() > 2) {
        throw ShapeError("tensor rank must be 1 or 2, got " + std::to_string(shape.size()));
    }
    std::size_t n = 1;
    for (std::size_t d : shape) {
        if (d == 0) {
            throw ShapeError("tensor dimensions must be >= 1");
        }
        n *= d;
    }
    return n;
}

TensorF32::TensorF32(std::vector<std::size_t> shape_, std::vector<float> data_)
    : shape(std::move(shape_)), data(std::move(data_)) {
    std::size_t n = checked_element_count(shape);
    if (n != data.size()) {
        throw ShapeError("tensor data has " + std::to_string(data.size()) +
                         " elements, shape wants " + std::to_string(n));
    }
}

TensorF32 TensorF32::zeros(std::vector<std::size_t> shape_) {
    std::size_t n = checked_element_count(shape_);
    return TensorF32(std::move(shape_), std::vector<float>(n, 0.0f));
}

}  // namespace vptq
