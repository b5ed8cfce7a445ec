#include "limeguard/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace limeguard {

std::string InputShape::str() const {
  return std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width);
}

void LabeledBatch::validate(int num_classes) const {
  validate_labels(num_classes);
  for (double v : inputs.storage()) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("input value outside [0,1]");
  }
}

void LabeledBatch::validate_labels(int num_classes) const {
  if (inputs.batch() != labels.size()) {
    throw ConfigError("batch has " + std::to_string(inputs.batch()) + " inputs but " +
                      std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw ConfigError("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                        " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

LabeledBatch LabeledBatch::subset(std::span<const std::size_t> indices) const {
  const std::size_t d = inputs.sample_size();
  LabeledBatch out;
  out.inputs = Tensor(indices.size(), inputs.shape());
  out.labels.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    if (i >= size()) throw ConfigError("subset index out of range");
    std::copy_n(inputs.data() + i * d, d, out.inputs.data() + k * d);
    out.labels.push_back(labels[i]);
  }
  return out;
}

LabeledBatch LabeledBatch::slice(std::size_t begin, std::size_t end) const {
  end = std::min(end, size());
  if (begin > end) throw ConfigError("invalid slice");
  const std::size_t d = inputs.sample_size();
  LabeledBatch out;
  out.inputs = Tensor(end - begin, inputs.shape(),
                      std::vector<double>(inputs.data() + begin * d, inputs.data() + end * d));
  out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                    labels.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

Tensor take_sample(const Tensor& batch, std::size_t i) {
  auto s = batch.sample(i);
  return Tensor(1, batch.shape(), std::vector<double>(s.begin(), s.end()));
}

LabeledBatch concat(const LabeledBatch& a, const LabeledBatch& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (!(a.inputs.shape() == b.inputs.shape())) throw ConfigError("concat: shape mismatch");
  std::vector<double> data = a.inputs.storage();
  data.insert(data.end(), b.inputs.storage().begin(), b.inputs.storage().end());
  LabeledBatch out;
  out.inputs = Tensor(a.size() + b.size(), a.inputs.shape(), std::move(data));
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

}  // namespace limeguard
