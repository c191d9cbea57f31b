#include "osd/dataset.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <memory>

namespace osd::io {

static_assert(std::endian::native == std::endian::little, "dataset files are little-endian");

void Dataset::resize(std::size_t n) {
  X.resize(static_cast<Eigen::Index>(n), kStateDim);
  u.resize(static_cast<Eigen::Index>(n));
}

void Dataset::push_back(const DataPair& p) {
  const auto n = X.rows();
  X.conservativeResize(n + 1, Eigen::NoChange);
  u.conservativeResize(n + 1);
  X.row(n) = p.x.transpose();
  u[n] = p.u;
}

Dataset Dataset::from_pairs(const std::vector<DataPair>& pairs) {
  Dataset d;
  d.resize(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    d.X.row(static_cast<Eigen::Index>(i)) = pairs[i].x.transpose();
    d.u[static_cast<Eigen::Index>(i)] = pairs[i].u;
  }
  return d;
}

namespace {

std::array<unsigned char, kDatasetHeaderBytes> make_header(std::uint64_t count) {
  std::array<unsigned char, kDatasetHeaderBytes> h{};
  const std::uint32_t version = kDatasetVersion;
  const std::uint32_t dim = kStateDim;
  std::memcpy(h.data(), kDatasetMagic, 4);
  std::memcpy(h.data() + 4, &version, 4);
  std::memcpy(h.data() + 8, &dim, 4);
  std::memcpy(h.data() + 12, &count, 8);
  return h;
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::uint64_t parse_header(const unsigned char* h, const std::filesystem::path& path) {
  if (std::memcmp(h, kDatasetMagic, 4) != 0) throw IoError("bad dataset magic in " + path.string());
  std::uint32_t version = 0, dim = 0;
  std::uint64_t count = 0;
  std::memcpy(&version, h + 4, 4);
  std::memcpy(&dim, h + 8, 4);
  std::memcpy(&count, h + 12, 8);
  if (version != kDatasetVersion) throw IoError("unsupported dataset version in " + path.string());
  if (dim != kStateDim) throw IoError("unexpected state dimension in " + path.string());
  const auto size = std::filesystem::file_size(path);
  if (size != kDatasetHeaderBytes + count * kRecordBytes) {
    throw IoError("dataset length does not match header count in " + path.string());
  }
  return count;
}

}  // namespace

DatasetWriter::DatasetWriter(const std::filesystem::path& path) : path_(path) {
  f_ = std::fopen(path.string().c_str(), "wb");
  if (!f_) throw IoError("cannot open " + path.string() + " for writing");
  const auto h = make_header(0);
  if (std::fwrite(h.data(), 1, h.size(), f_) != h.size()) throw IoError("write failed: " + path.string());
}

DatasetWriter::~DatasetWriter() {
  if (f_) {
    try {
      close();
    } catch (...) {
    }
  }
}

void DatasetWriter::write(const DataPair& p) {
  if (!f_) throw IoError("write on closed dataset " + path_.string());
  std::array<double, kStateDim + 1> rec;
  for (int i = 0; i < kStateDim; ++i) rec[i] = p.x[i];
  rec[kStateDim] = p.u;
  if (std::fwrite(rec.data(), sizeof(double), rec.size(), f_) != rec.size()) {
    throw IoError("write failed: " + path_.string());
  }
  ++count_;
}

void DatasetWriter::write(const Dataset& d) {
  for (std::size_t i = 0; i < d.size(); ++i) write(d[i]);
}

void DatasetWriter::close() {
  if (!f_) return;
  const auto h = make_header(count_);
  const bool ok = std::fseek(f_, 0, SEEK_SET) == 0 && std::fwrite(h.data(), 1, h.size(), f_) == h.size();
  const bool closed = std::fclose(f_) == 0;
  f_ = nullptr;
  if (!ok || !closed) throw IoError("failed to finalize " + path_.string());
}

void write_dataset(const std::filesystem::path& path, const Dataset& d) {
  DatasetWriter w(path);
  w.write(d);
  w.close();
}

std::uint64_t dataset_record_count(const std::filesystem::path& path) {
  FilePtr f(std::fopen(path.string().c_str(), "rb"));
  if (!f) throw IoError("cannot open " + path.string());
  unsigned char h[kDatasetHeaderBytes];
  if (std::fread(h, 1, sizeof h, f.get()) != sizeof h) throw IoError("truncated header in " + path.string());
  return parse_header(h, path);
}

Dataset read_dataset(const std::filesystem::path& path) {
  FilePtr f(std::fopen(path.string().c_str(), "rb"));
  if (!f) throw IoError("cannot open " + path.string());
  unsigned char h[kDatasetHeaderBytes];
  if (std::fread(h, 1, sizeof h, f.get()) != sizeof h) throw IoError("truncated header in " + path.string());
  const std::uint64_t count = parse_header(h, path);
  Dataset d;
  d.resize(count);
  constexpr std::size_t kChunk = 4096;
  std::vector<double> buf(kChunk * (kStateDim + 1));
  std::uint64_t done = 0;
  while (done < count) {
    const std::size_t n = static_cast<std::size_t>(std::min<std::uint64_t>(kChunk, count - done));
    const std::size_t want = n * (kStateDim + 1);
    if (std::fread(buf.data(), sizeof(double), want, f.get()) != want) {
      throw IoError("truncated records in " + path.string());
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double* r = buf.data() + i * (kStateDim + 1);
      const auto row = static_cast<Eigen::Index>(done + i);
      for (int j = 0; j < kStateDim; ++j) d.X(row, j) = r[j];
      d.u[row] = r[kStateDim];
    }
    done += n;
  }
  return d;
}

}  // namespace osd::io
