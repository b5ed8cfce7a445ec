#pragma once

// Dataset ingestion: CIFAR binary batches, .npy corruption archives and the
// planted-watermark synthetic generator.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "limeguard/eval.hpp"
#include "limeguard/lime.hpp"
#include "limeguard/tensor.hpp"

namespace limeguard {

enum class CifarVariant { cifar10, cifar100 };

int num_classes(CifarVariant v);

struct DatasetSplits {
  LabeledBatch train;
  LabeledBatch test;
};

/// Reads one binary batch file (3073-byte records for cifar10, 3074 for
/// cifar100 with the fine label second). Pixels are scaled to [0,1].
LabeledBatch read_cifar_batch(const std::filesystem::path& file, CifarVariant variant);

/// dir holds data_batch_{1..5}.bin + test_batch.bin (cifar10) or train.bin +
/// test.bin (cifar100), either directly or in the archive's usual subfolder.
DatasetSplits load_cifar(const std::filesystem::path& dir, CifarVariant variant);

/// Moves the last val_size training images into a validation split.
std::pair<LabeledBatch, LabeledBatch> split_validation(const LabeledBatch& train, std::size_t val_size);

struct NpyArray {
  std::string descr;  // e.g. "|u1", "<i8"
  std::vector<std::size_t> shape;
  std::string bytes;  // C-order raw data

  std::size_t count() const;
};

NpyArray read_npy(const std::filesystem::path& file);
void write_npy(const std::filesystem::path& file, const NpyArray& a);

/// Rows [(severity-1)*block, severity*block) of an archive with n rows.
std::pair<std::size_t, std::size_t> severity_range(int severity, std::size_t block, std::size_t n);

struct CorruptionLoad {
  CorruptionSets sets;
  std::vector<std::string> warnings;
};

/// Loads every <tag>.npy (N x 32 x 32 x 3, uint8) next to labels.npy. Files of
/// the wrong shape are skipped with a warning; a labels length that differs
/// from a file's row count is an IngestionError.
CorruptionLoad load_corruptions(const std::filesystem::path& dir, std::optional<int> severity = std::nullopt,
                                std::size_t block = 10000);

struct SyntheticSpuriousSpec {
  InputShape image{3, 32, 32};
  int num_classes = 2;
  std::size_t cell = 8;             // grid cell size in pixels
  std::size_t watermark_row = 0;    // watermark position in grid cells
  std::size_t watermark_col = 0;
  double train_correlation = 0.95;  // P(watermark shows the true label), train and test splits
  double test_correlation = 0.0;    // same on the out-of-distribution split
  double noise = 0.1;               // Gaussian pixel noise
  double signal_strength = 0.2;     // stripe amplitude in the central region
  std::size_t n_train = 4000;
  std::size_t n_test = 1000;
  std::size_t n_ood = 1000;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const SyntheticSpuriousSpec&) const = default;
};

nlohmann::json to_json(const SyntheticSpuriousSpec& s);
SyntheticSpuriousSpec synthetic_spec_from_json(const nlohmann::json& j);

struct SyntheticData {
  LabeledBatch train;
  LabeledBatch test;
  LabeledBatch ood;
  GridTemplate grid;
  std::size_t watermark_cell = 0;
  std::vector<bool> irrelevant;  // per grid cell; only the central signal cells are relevant
  // Class shown by the watermark for each sample of each split.
  std::vector<int> train_watermark, test_watermark, ood_watermark;
};

/// Class c draws stripes at angle pi*c/k with a random phase in the central
/// half of the image. The watermark cell showing class j is a noise-free
/// diagonal pattern, bright where (x + y + j) % k == 0 and dark elsewhere.
SyntheticData generate_synthetic_spurious(const SyntheticSpuriousSpec& spec);

}  // namespace limeguard
