#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cdef/graph.hpp"

namespace cdef {

/// Day-major layout: cell (day t, location j) lives at t * n_locations + j.
struct Layout {
  std::size_t n_days = 357;
  std::size_t n_locations = 77;

  std::size_t dim() const noexcept { return n_days * n_locations; }
  std::size_t flat(std::size_t day, std::size_t location) const noexcept {
    return day * n_locations + location;
  }
  friend bool operator==(const Layout&, const Layout&) = default;
};

/// N samples (years) of V counts with a visibility mask (1 = visible).
class CountMatrix {
 public:
  CountMatrix() = default;
  CountMatrix(Layout layout, std::size_t n_samples);
  CountMatrix(Layout layout, std::size_t n_samples, std::vector<std::uint32_t> counts,
              std::vector<std::uint8_t> mask, std::vector<int> sample_labels = {});

  const Layout& layout() const noexcept { return layout_; }
  std::size_t n_samples() const noexcept { return n_; }
  std::size_t dim() const noexcept { return layout_.dim(); }

  std::uint32_t& count(std::size_t n, std::size_t i) { return counts_[n * dim() + i]; }
  std::uint32_t count(std::size_t n, std::size_t i) const { return counts_[n * dim() + i]; }
  bool visible(std::size_t n, std::size_t i) const { return mask_[n * dim() + i] != 0; }
  void set_visible(std::size_t n, std::size_t i, bool v) { mask_[n * dim() + i] = v ? 1 : 0; }

  ObservedRow row(std::size_t n) const;

  std::span<const std::uint32_t> counts() const noexcept { return counts_; }
  std::span<const std::uint8_t> mask() const noexcept { return mask_; }

  /// Calendar year (or generator index) of each sample.
  const std::vector<int>& sample_labels() const noexcept { return labels_; }

  std::size_t hidden_count() const noexcept;
  std::size_t visible_count() const noexcept { return counts_.size() - hidden_count(); }
  std::uint64_t total_count() const noexcept;

  /// Samples listed by index, in that order.
  CountMatrix select(const std::vector<std::size_t>& samples) const;

  friend bool operator==(const CountMatrix&, const CountMatrix&) = default;

 private:
  Layout layout_;
  std::size_t n_ = 0;
  std::vector<std::uint32_t> counts_;
  std::vector<std::uint8_t> mask_;
  std::vector<int> labels_;
};

enum class MaskScheme { alternate_weeks, alternate_3week_blocks };

struct MaskSpec {
  MaskScheme scheme = MaskScheme::alternate_weeks;
  std::size_t reveal_count = 0;
  std::uint64_t seed = 0;
};

std::size_t block_days(MaskScheme scheme) noexcept;
std::string mask_scheme_name(MaskScheme scheme);
MaskScheme parse_mask_scheme(const std::string& name);

/// Hides every second block (blocks 2, 4, ... counting from 1), then reveals
/// reveal_count random cells per hidden block. Reveals for block b of sample
/// n come from one stream keyed on (seed, n, b), so larger reveal counts
/// extend smaller ones. Cells already hidden in `data` stay hidden.
CountMatrix apply_mask(const CountMatrix& data, const MaskSpec& spec);

struct CsvSchema {
  std::string date_column = "Date";
  std::string location_column = "Community Area";
  std::string type_column = "Primary Type";
  std::string type_filter = "THEFT";  // empty accepts every row
  std::size_t n_locations = 77;
  std::size_t n_days = 357;
  double max_reject_fraction = 0.01;
};

struct IngestReport {
  std::size_t rows_read = 0;
  std::size_t rows_accepted = 0;
  std::size_t rows_filtered = 0;    // other crime type
  std::size_t rows_outside = 0;     // before the first Sunday or after the window
  std::vector<std::string> rejects; // "line N: reason"
};

/// One sample per calendar year, days counted from the year's first Sunday,
/// truncated to n_days. Throws DataError when the reject fraction exceeds
/// max_reject_fraction or no rows are usable.
CountMatrix ingest_csv(const std::filesystem::path& path, const CsvSchema& schema,
                       IngestReport* report = nullptr);
CountMatrix ingest_csv_text(const std::string& text, const CsvSchema& schema,
                            IngestReport* report = nullptr);

struct SynthSpec {
  std::size_t n_locations = 7;
  std::size_t n_weeks = 51;
  std::size_t n_samples = 14;
  std::vector<double> week_profile = {1, 1, 1, 1, 1, 1, 1};  // multiplier by t mod 7
  std::vector<double> location_rates;                       // empty: all 1
  double block_log_sd = 0.0;  // log-normal spread of 21-day block levels per sample
  std::uint64_t seed = 0;
};

struct SynthData {
  CountMatrix data;
  std::vector<double> rates;  // N x V planted Poisson rates
};

/// Poisson field with rate base_j * week_profile[t mod 7] * block_level[n][t / 21].
SynthData synth_generate(const SynthSpec& spec);

/// Leave-one-out split; train keeps the original order of the other samples.
std::pair<CountMatrix, CountMatrix> split_loyo(const CountMatrix& data, std::size_t test_index);

/// Splits CSV text into records of fields; handles quoted fields, doubled
/// quotes and newlines inside quotes.
std::vector<std::vector<std::string>> parse_csv_records(const std::string& text);

/// Binary cache: "CDEFCNT\0", u32 version, u64 N, V, n_days, n_locations,
/// N*V u32 counts (row-major, little endian), N*V mask bytes, N i32 labels.
void save_counts(const CountMatrix& data, const std::filesystem::path& path);
CountMatrix load_counts(const std::filesystem::path& path);

}  // namespace cdef
