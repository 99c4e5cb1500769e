#pragma once

#include "placeret/core.hpp"
#include "placeret/embedding_table.hpp"
#include "placeret/knn.hpp"
#include "placeret/trainer.hpp"
#include "placeret/worldgen.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace placeret {

// ---------------------------------------------------------------------------
// Descriptor files
//
//   offset  size  field
//        0     8  magic "MLOCDESC"
//        8     4  version (u32, = 1)
//       12     8  count (u64)
//       20     4  dim (u32)
//       24     4  scalar type (u32, 0 = f32)
//       28     4  reserved, zero
//       32     .  count * dim little-endian f32, row-major

inline constexpr char kDescriptorMagic[8] = {'M', 'L', 'O', 'C', 'D', 'E', 'S', 'C'};
inline constexpr std::uint32_t kDescriptorVersion = 1;
inline constexpr std::size_t kDescriptorHeaderBytes = 32;

enum class ScalarType : std::uint32_t { F32 = 0 };

struct DescriptorFileHeader {
  std::uint32_t version = kDescriptorVersion;
  std::uint64_t count = 0;
  std::uint32_t dim = 0;
  ScalarType scalar = ScalarType::F32;
};

void write_descriptors(const std::filesystem::path& path, const RowMatrixF& descriptors);

/// Validates the header and payload length on open. Reads are positioned, so
/// one reader may serve concurrent callers.
class DescriptorReader {
 public:
  explicit DescriptorReader(const std::filesystem::path& path);
  ~DescriptorReader();
  DescriptorReader(const DescriptorReader&) = delete;
  DescriptorReader& operator=(const DescriptorReader&) = delete;

  const DescriptorFileHeader& header() const { return header_; }
  /// Rows [begin, begin + rows) into `out` (rows * dim floats).
  void read_rows(std::uint64_t begin, std::uint64_t rows, float* out) const;

 private:
  std::filesystem::path path_;
  DescriptorFileHeader header_;
  int fd_ = -1;
};

/// Rows [begin, begin + rows); rows = -1 reads to the end.
RowMatrixF read_descriptors(const std::filesystem::path& path, std::uint64_t begin = 0,
                            std::int64_t rows = -1);

// ---------------------------------------------------------------------------
// Metadata: "# placeret-metadata v1", a header row, then one CSV record per
// image: id,east,north,heading,class_id,scene_id,source. Optional fields may
// be empty.

void write_metadata(const std::filesystem::path& path, const std::vector<ImageRecord>& records);
/// Throws Ingestion listing every offending line.
std::vector<ImageRecord> read_metadata(const std::filesystem::path& path);

inline constexpr double kGsvClassSeparation = 100.0;

/// Class-centroid pairs of GSV-tagged records closer than 100 m.
std::vector<std::string> gsv_separation_violations(const std::vector<ImageRecord>& records);

// ---------------------------------------------------------------------------
// Covisibility: "# placeret-covisibility v1", header "id_a,id_b,fraction",
// one line per unordered pair.

void write_covisibility(const std::filesystem::path& path, const CovisibilityMap& covisibility);
CovisibilityMap read_covisibility(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// World directories: world.json (config), metadata.csv, covisibility.csv,
// descriptors.bin (true descriptors, rows in metadata order).

void write_world(const std::filesystem::path& dir, const World& world);
World read_world(const std::filesystem::path& dir);

std::string world_config_json(const WorldConfig& config);
WorldConfig parse_world_config(const std::string& json_text);

// ---------------------------------------------------------------------------
// Checkpoints
//
//   offset  size  field
//        0     8  magic "MLOCCKPT"
//        8     4  version (u32, = 1)
//       12     4  dim (u32)
//       16     8  count (u64)
//       24     8  optimizer step (u64)
//       32     8  config hash (u64)
//       40     .  count i64 ids, then values, first moment, second moment,
//                 each count * dim little-endian f64, row-major

struct Checkpoint {
  EmbeddingTable table;
  std::uint64_t config_hash = 0;
};

void write_checkpoint(const std::filesystem::path& path, const EmbeddingTable& table,
                      std::uint64_t config_hash);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Loss history CSV: iteration,total,<one column per source>. Sources that were
// not sampled are written as empty fields.

std::string loss_history_csv(const std::vector<HistoryRow>& history);
void write_loss_history(const std::filesystem::path& path, const std::vector<HistoryRow>& history);

/// Writes to a sibling temporary file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

/// Shortest text that parses back to the same double.
std::string format_double(double v);

}  // namespace placeret
