#include "cdef/data.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>

#include "cdef/random.hpp"

namespace cdef {

namespace {

static_assert(std::endian::native == std::endian::little, "count cache assumes little endian");

constexpr char kCountMagic[8] = {'C', 'D', 'E', 'F', 'C', 'N', 'T', '\0'};
constexpr std::uint32_t kCountVersion = 1;

// Unbiased integer in [0, n).
std::size_t bounded(RandomStream& rng, std::size_t n) {
  const std::uint64_t limit = RandomStream::max() - RandomStream::max() % n;
  for (;;) {
    const std::uint64_t v = rng();
    if (v < limit) return static_cast<std::size_t>(v % n);
  }
}

}  // namespace

std::vector<std::vector<std::string>> parse_csv_records(const std::string& text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> fields;
  std::string field;
  bool in_quotes = false;
  bool any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        in_quotes = true;
        any = true;
        break;
      case ',':
        fields.push_back(std::move(field));
        field.clear();
        any = true;
        break;
      case '\r':
        break;
      case '\n':
        if (any || !field.empty()) {
          fields.push_back(std::move(field));
          records.push_back(std::move(fields));
        }
        fields.clear();
        field.clear();
        any = false;
        break;
      default:
        field.push_back(c);
        any = true;
    }
  }
  if (any || !field.empty()) {
    fields.push_back(std::move(field));
    records.push_back(std::move(fields));
  }
  return records;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

// YYYY-MM-DD[...] or MM/DD/YYYY[ HH:MM:SS AM]
bool parse_date(const std::string& s, std::chrono::year_month_day& out) {
  int y = 0;
  unsigned m = 0;
  unsigned d = 0;
  char tail = 0;
  if (std::sscanf(s.c_str(), "%4d-%2u-%2u%c", &y, &m, &d, &tail) >= 3 && s.size() >= 10 &&
      s[4] == '-') {
  } else if (std::sscanf(s.c_str(), "%2u/%2u/%4d", &m, &d, &y) == 3 && s.find('/') != std::string::npos) {
  } else {
    return false;
  }
  out = std::chrono::year_month_day{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
  return out.ok();
}

std::chrono::sys_days first_sunday(std::chrono::year y) {
  using namespace std::chrono;
  const sys_days jan1{year_month_day{y, January, day{1}}};
  const unsigned wd = weekday{jan1}.c_encoding();  // 0 = Sunday
  return jan1 + days{(7 - wd) % 7};
}

}  // namespace

CountMatrix::CountMatrix(Layout layout, std::size_t n_samples)
    : layout_(layout),
      n_(n_samples),
      counts_(n_samples * layout.dim(), 0),
      mask_(n_samples * layout.dim(), 1),
      labels_(n_samples) {
  for (std::size_t n = 0; n < n_samples; ++n) labels_[n] = static_cast<int>(n);
}

CountMatrix::CountMatrix(Layout layout, std::size_t n_samples, std::vector<std::uint32_t> counts,
                         std::vector<std::uint8_t> mask, std::vector<int> sample_labels)
    : layout_(layout),
      n_(n_samples),
      counts_(std::move(counts)),
      mask_(std::move(mask)),
      labels_(std::move(sample_labels)) {
  if (counts_.size() != n_ * layout_.dim() || mask_.size() != counts_.size())
    throw DataError("count matrix: counts/mask size does not match N x V");
  if (labels_.empty()) {
    labels_.resize(n_);
    for (std::size_t n = 0; n < n_; ++n) labels_[n] = static_cast<int>(n);
  }
  if (labels_.size() != n_) throw DataError("count matrix: one label per sample required");
}

ObservedRow CountMatrix::row(std::size_t n) const {
  if (n >= n_) throw std::out_of_range("count matrix: sample index out of range");
  return ObservedRow{std::span<const std::uint32_t>(counts_).subspan(n * dim(), dim()),
                     std::span<const std::uint8_t>(mask_).subspan(n * dim(), dim())};
}

std::size_t CountMatrix::hidden_count() const noexcept {
  return static_cast<std::size_t>(std::count(mask_.begin(), mask_.end(), std::uint8_t{0}));
}

std::uint64_t CountMatrix::total_count() const noexcept {
  std::uint64_t total = 0;
  for (auto c : counts_) total += c;
  return total;
}

CountMatrix CountMatrix::select(const std::vector<std::size_t>& samples) const {
  std::vector<std::uint32_t> counts;
  std::vector<std::uint8_t> mask;
  std::vector<int> labels;
  for (std::size_t n : samples) {
    if (n >= n_) throw std::out_of_range("count matrix: sample index out of range");
    counts.insert(counts.end(), counts_.begin() + n * dim(), counts_.begin() + (n + 1) * dim());
    mask.insert(mask.end(), mask_.begin() + n * dim(), mask_.begin() + (n + 1) * dim());
    labels.push_back(labels_[n]);
  }
  return CountMatrix(layout_, samples.size(), std::move(counts), std::move(mask), std::move(labels));
}

std::size_t block_days(MaskScheme scheme) noexcept {
  return scheme == MaskScheme::alternate_weeks ? 7 : 21;
}

std::string mask_scheme_name(MaskScheme scheme) {
  return scheme == MaskScheme::alternate_weeks ? "alternate_weeks" : "alternate_3week_blocks";
}

MaskScheme parse_mask_scheme(const std::string& name) {
  if (name == "alternate_weeks") return MaskScheme::alternate_weeks;
  if (name == "alternate_3week_blocks") return MaskScheme::alternate_3week_blocks;
  throw ConfigError("unknown mask scheme '" + name + "'");
}

CountMatrix apply_mask(const CountMatrix& data, const MaskSpec& spec) {
  const Layout& lay = data.layout();
  const std::size_t days = block_days(spec.scheme);
  if (lay.n_days % days != 0) {
    std::ostringstream os;
    os << "mask " << mask_scheme_name(spec.scheme) << ": " << lay.n_days
       << " days do not divide into blocks of " << days;
    throw DataError(os.str());
  }
  const std::size_t block_cells = days * lay.n_locations;
  if (spec.reveal_count > block_cells) {
    std::ostringstream os;
    os << "mask: reveal_count " << spec.reveal_count << " exceeds block size " << block_cells;
    throw ConfigError(os.str());
  }
  const std::size_t n_blocks = lay.n_days / days;

  CountMatrix out = data;
  std::vector<std::size_t> order(block_cells);
  for (std::size_t n = 0; n < data.n_samples(); ++n) {
    for (std::size_t b = 1; b < n_blocks; b += 2) {
      const std::size_t base = b * block_cells;
      for (std::size_t c = 0; c < block_cells; ++c) out.set_visible(n, base + c, false);
      if (spec.reveal_count == 0) continue;
      // Partial Fisher-Yates: the first r picks are a prefix of the first r+1.
      RandomStream rng = RandomStream::derive(spec.seed, 0x6d61736bULL, n, b);
      for (std::size_t c = 0; c < block_cells; ++c) order[c] = c;
      for (std::size_t r = 0; r < spec.reveal_count; ++r) {
        const std::size_t pick = r + bounded(rng, block_cells - r);
        std::swap(order[r], order[pick]);
        const std::size_t cell = base + order[r];
        out.set_visible(n, cell, data.visible(n, cell));
      }
    }
  }
  return out;
}

CountMatrix ingest_csv_text(const std::string& text, const CsvSchema& schema, IngestReport* report) {
  IngestReport local;
  IngestReport& rep = report ? *report : local;
  rep = IngestReport{};

  const auto records = parse_csv_records(text);
  if (records.size() < 2) throw DataError("no rows");

  const auto& header = records.front();
  auto column = [&](const std::string& name, bool needed) -> std::ptrdiff_t {
    const auto it = std::find_if(header.begin(), header.end(),
                                 [&](const std::string& h) { return trim(h) == name; });
    if (it == header.end()) {
      if (needed) throw DataError("csv: missing column '" + name + "'");
      return -1;
    }
    return it - header.begin();
  };
  const auto date_col = column(schema.date_column, true);
  const auto loc_col = column(schema.location_column, true);
  const auto type_col = column(schema.type_column, !schema.type_filter.empty());

  struct Event {
    int year;
    std::size_t flat;
  };
  std::vector<Event> events;
  for (std::size_t r = 1; r < records.size(); ++r) {
    const auto& rec = records[r];
    ++rep.rows_read;
    auto reject = [&](const std::string& why) {
      rep.rejects.push_back("record " + std::to_string(r) + ": " + why);
    };
    const auto max_col = static_cast<std::size_t>(std::max({date_col, loc_col, type_col}));
    if (rec.size() <= max_col) {
      reject("too few fields");
      continue;
    }
    if (!schema.type_filter.empty() && trim(rec[type_col]) != schema.type_filter) {
      ++rep.rows_filtered;
      continue;
    }
    std::chrono::year_month_day ymd;
    if (!parse_date(trim(rec[date_col]), ymd)) {
      reject("unparseable date '" + rec[date_col] + "'");
      continue;
    }
    const std::string loc_text = trim(rec[loc_col]);
    char* end = nullptr;
    const long code = std::strtol(loc_text.c_str(), &end, 10);
    if (loc_text.empty() || *end != '\0' || code < 1 || code > static_cast<long>(schema.n_locations)) {
      reject("bad location '" + loc_text + "'");
      continue;
    }
    const auto day_index = (std::chrono::sys_days{ymd} - first_sunday(ymd.year())).count();
    if (day_index < 0 || day_index >= static_cast<long>(schema.n_days)) {
      ++rep.rows_outside;
      continue;
    }
    events.push_back(Event{static_cast<int>(ymd.year()),
                           static_cast<std::size_t>(day_index) * schema.n_locations +
                               static_cast<std::size_t>(code - 1)});
    ++rep.rows_accepted;
  }
  if (rep.rows_read == 0) throw DataError("no rows");
  const double reject_fraction = static_cast<double>(rep.rejects.size()) / rep.rows_read;
  if (reject_fraction > schema.max_reject_fraction) {
    std::ostringstream os;
    os << "csv: " << rep.rejects.size() << " of " << rep.rows_read << " rows rejected (first: "
       << rep.rejects.front() << ")";
    throw DataError(os.str());
  }
  if (events.empty()) throw DataError("csv: no rows inside the day window");

  std::map<int, std::size_t> year_index;
  for (const Event& e : events) year_index.emplace(e.year, 0);
  std::vector<int> labels;
  for (auto& [year, idx] : year_index) {
    idx = labels.size();
    labels.push_back(year);
  }
  const Layout layout{schema.n_days, schema.n_locations};
  std::vector<std::uint32_t> counts(labels.size() * layout.dim(), 0);
  for (const Event& e : events) ++counts[year_index[e.year] * layout.dim() + e.flat];
  std::vector<std::uint8_t> mask(counts.size(), 1);
  const std::size_t n_years = labels.size();
  return CountMatrix(layout, n_years, std::move(counts), std::move(mask), std::move(labels));
}

CountMatrix ingest_csv(const std::filesystem::path& path, const CsvSchema& schema, IngestReport* report) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open csv " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return ingest_csv_text(buf.str(), schema, report);
}

SynthData synth_generate(const SynthSpec& spec) {
  if (spec.n_locations == 0 || spec.n_weeks == 0 || spec.n_samples == 0)
    throw ConfigError("synth: dimensions must be positive");
  if (spec.week_profile.size() != 7) throw ConfigError("synth: week_profile needs 7 entries");
  if (!spec.location_rates.empty() && spec.location_rates.size() != spec.n_locations)
    throw ConfigError("synth: location_rates needs one entry per location");

  const Layout layout{spec.n_weeks * 7, spec.n_locations};
  const std::size_t n_blocks = (layout.n_days + 20) / 21;
  SynthData out{CountMatrix(layout, spec.n_samples), std::vector<double>(spec.n_samples * layout.dim())};
  for (std::size_t n = 0; n < spec.n_samples; ++n) {
    std::vector<double> level(n_blocks, 1.0);
    if (spec.block_log_sd > 0.0) {
      RandomStream rng = RandomStream::derive(spec.seed, 0x626c6bULL, n);
      std::normal_distribution<double> normal(0.0, 1.0);
      const double sd = spec.block_log_sd;
      for (double& v : level) v = std::exp(sd * normal(rng) - 0.5 * sd * sd);
    }
    RandomStream rng = RandomStream::derive(spec.seed, 0x636e74ULL, n);
    for (std::size_t t = 0; t < layout.n_days; ++t) {
      for (std::size_t j = 0; j < layout.n_locations; ++j) {
        const double base = spec.location_rates.empty() ? 1.0 : spec.location_rates[j];
        const double rate = base * spec.week_profile[t % 7] * level[t / 21];
        const std::size_t i = layout.flat(t, j);
        out.rates[n * layout.dim() + i] = rate;
        std::uint32_t draw = 0;
        if (rate > 0.0) {
          std::poisson_distribution<std::uint32_t> poisson(rate);
          draw = poisson(rng);
        }
        out.data.count(n, i) = draw;
      }
    }
  }
  return out;
}

std::pair<CountMatrix, CountMatrix> split_loyo(const CountMatrix& data, std::size_t test_index) {
  if (test_index >= data.n_samples()) throw std::out_of_range("split_loyo: test index out of range");
  std::vector<std::size_t> train;
  for (std::size_t n = 0; n < data.n_samples(); ++n)
    if (n != test_index) train.push_back(n);
  return {data.select(train), data.select({test_index})};
}

void save_counts(const CountMatrix& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  auto put = [&](const auto& v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); };
  out.write(kCountMagic, sizeof kCountMagic);
  put(kCountVersion);
  put(static_cast<std::uint64_t>(data.n_samples()));
  put(static_cast<std::uint64_t>(data.dim()));
  put(static_cast<std::uint64_t>(data.layout().n_days));
  put(static_cast<std::uint64_t>(data.layout().n_locations));
  out.write(reinterpret_cast<const char*>(data.counts().data()),
            static_cast<std::streamsize>(data.counts().size_bytes()));
  out.write(reinterpret_cast<const char*>(data.mask().data()),
            static_cast<std::streamsize>(data.mask().size_bytes()));
  for (int label : data.sample_labels()) put(static_cast<std::int32_t>(label));
  if (!out) throw DataError("write failed: " + path.string());
}

CountMatrix load_counts(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCountMagic, sizeof magic) != 0)
    throw DataError(path.string() + ": not a count cache (bad magic)");
  auto get = [&](auto& v) { in.read(reinterpret_cast<char*>(&v), sizeof v); };
  std::uint32_t version = 0;
  get(version);
  if (version != kCountVersion) throw DataError(path.string() + ": unsupported cache version");
  std::uint64_t n = 0, v = 0, days = 0, locs = 0;
  get(n);
  get(v);
  get(days);
  get(locs);
  if (!in || days * locs != v) throw DataError(path.string() + ": inconsistent header");
  std::vector<std::uint32_t> counts(n * v);
  std::vector<std::uint8_t> mask(n * v);
  std::vector<int> labels(n);
  in.read(reinterpret_cast<char*>(counts.data()), static_cast<std::streamsize>(counts.size() * 4));
  in.read(reinterpret_cast<char*>(mask.data()), static_cast<std::streamsize>(mask.size()));
  for (auto& label : labels) {
    std::int32_t l = 0;
    get(l);
    label = l;
  }
  if (!in) throw DataError(path.string() + ": truncated");
  return CountMatrix(Layout{days, locs}, n, std::move(counts), std::move(mask), std::move(labels));
}

}  // namespace cdef
