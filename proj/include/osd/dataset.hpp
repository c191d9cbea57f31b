#pragma once

#include "osd/common.hpp"

#include <cstdio>
#include <filesystem>
#include <vector>

namespace osd::io {

/// One (augmented state, control action) record.
struct DataPair {
  Vec8 x = Vec8::Zero();
  double u = 0.0;
};

using StateMatrix = Eigen::Matrix<double, Eigen::Dynamic, kStateDim, Eigen::RowMajor>;

/// Columnar in-memory dataset; row i of X is the augmented state of record i.
struct Dataset {
  StateMatrix X;
  Eigen::VectorXd u;

  std::size_t size() const { return static_cast<std::size_t>(u.size()); }
  DataPair operator[](std::size_t i) const { return {X.row(static_cast<Eigen::Index>(i)).transpose(), u[i]}; }
  void resize(std::size_t n);
  void push_back(const DataPair& p);
  static Dataset from_pairs(const std::vector<DataPair>& pairs);
};

inline constexpr char kDatasetMagic[4] = {'O', 'S', 'D', '1'};
inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::size_t kDatasetHeaderBytes = 32;
inline constexpr std::size_t kRecordBytes = (kStateDim + 1) * sizeof(double);

/// Streaming writer. The record count in the header is patched on close().
class DatasetWriter {
 public:
  explicit DatasetWriter(const std::filesystem::path& path);
  ~DatasetWriter();
  DatasetWriter(const DatasetWriter&) = delete;
  DatasetWriter& operator=(const DatasetWriter&) = delete;

  void write(const DataPair& p);
  void write(const Dataset& d);
  std::uint64_t count() const { return count_; }
  void close();

 private:
  std::filesystem::path path_;
  std::FILE* f_ = nullptr;
  std::uint64_t count_ = 0;
};

void write_dataset(const std::filesystem::path& path, const Dataset& d);

/// Reads and validates a dataset file; throws IoError on any structural problem.
Dataset read_dataset(const std::filesystem::path& path);

/// Header-only check returning the record count.
std::uint64_t dataset_record_count(const std::filesystem::path& path);

}  // namespace osd::io
