#include "oar/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace oar {

void CorpusSpec::validate() const {
  grid.validate();
  if (vocab < 8) throw std::invalid_argument("CorpusSpec: vocab must be >= 8");
  if (background_token < 0 || background_token >= noise_vocab_start()) {
    throw std::invalid_argument(
        "CorpusSpec: background token must sit below the noise sub-vocabulary");
  }
  if (classes < 1 || samples_per_class < 1) {
    throw std::invalid_argument("CorpusSpec: classes and samples_per_class must be >= 1");
  }
  if (cond_vocab < 2 || cond_len < 1) {
    throw std::invalid_argument("CorpusSpec: condition vocab/length too small");
  }
  Real capacity = std::pow(static_cast<Real>(cond_vocab), cond_len);
  if (static_cast<Real>(classes) > capacity) {
    throw std::invalid_argument("CorpusSpec: class count not encodable in condition tokens");
  }
}

std::vector<int> encode_condition(int class_id, int cond_vocab, int cond_len) {
  std::vector<int> tokens(cond_len, 0);
  int rest = class_id;
  for (int i = 0; i < cond_len; ++i) {
    tokens[i] = rest % cond_vocab;
    rest /= cond_vocab;
  }
  return tokens;
}

namespace {

// three palette tokens per class, disjoint across classes while the
// foreground range lasts, never the background or a noise token
std::array<int, 3> class_palette(const CorpusSpec& spec, int class_id) {
  std::vector<int> fg;
  for (int t = 0; t < spec.noise_vocab_start(); ++t) {
    if (t != spec.background_token) fg.push_back(t);
  }
  std::array<int, 3> palette{};
  for (int j = 0; j < 3; ++j) {
    palette[j] = fg[(class_id * 3 + j) % fg.size()];
  }
  return palette;
}

// Shape size and anchor are class-keyed; only a one-cell placement jitter is
// random. That keeps foreground cells predictable from the condition alone —
// easier than uniform noise, harder than a constant background — which is
// what the extraction-order preference rests on.
std::vector<Position> shape_cells(const CorpusSpec& spec, int class_id,
                                  SeededStream& s) {
  const GridShape& g = spec.grid;
  auto clampi = [](int v, int lo, int hi) { return std::max(lo, std::min(v, hi)); };
  const int jr = static_cast<int>(s.next_below(2));
  const int jc = static_cast<int>(s.next_below(2));
  std::vector<Position> cells;
  switch (class_id % 3) {
    case 0: {  // rectangle
      const int h = 2 + (class_id / 3) % std::max(1, g.rows / 2 - 1);
      const int w = 2 + (class_id / 2) % std::max(1, g.cols / 2 - 1);
      const int r0 = clampi((class_id * 5) % std::max(1, g.rows - h) + jr, 0, g.rows - h);
      const int c0 = clampi((class_id * 7) % std::max(1, g.cols - w) + jc, 0, g.cols - w);
      for (int r = r0; r < r0 + h; ++r)
        for (int c = c0; c < c0 + w; ++c) cells.push_back({r, c});
      break;
    }
    case 1: {  // cross
      const int arm = 1 + (class_id / 3) % std::max(1, std::min(g.rows, g.cols) / 2 - 1);
      const int r0 = clampi(arm + (class_id * 3) % std::max(1, g.rows - 2 * arm) + jr,
                            arm, g.rows - 1 - arm);
      const int c0 = clampi(arm + (class_id * 5) % std::max(1, g.cols - 2 * arm) + jc,
                            arm, g.cols - 1 - arm);
      for (int r = r0 - arm; r <= r0 + arm; ++r) cells.push_back({r, c0});
      for (int c = c0 - arm; c <= c0 + arm; ++c) {
        if (c != c0) cells.push_back({r0, c});
      }
      break;
    }
    default: {  // diagonal band near the main diagonal
      const int width = 1 + (class_id / 3) % 2;
      const int offset = (class_id / 3) % 3 - 1 + jr;
      for (int r = 0; r < g.rows; ++r) {
        for (int c = 0; c < g.cols; ++c) {
          if (std::abs(c - r - offset) < width) cells.push_back({r, c});
        }
      }
      break;
    }
  }
  // constant-background invariant: at least half of the grid stays background
  const std::size_t cap = static_cast<std::size_t>(g.size() / 2);
  if (cells.size() > cap) cells.resize(cap);
  return cells;
}

}  // namespace

Dataset generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  SeededStream base(spec.seed, 0xDA7A);
  for (int cls = 0; cls < spec.classes; ++cls) {
    const auto palette = class_palette(spec, cls);
    for (int i = 0; i < spec.samples_per_class; ++i) {
      SeededStream s = base.derive(static_cast<std::uint64_t>(cls),
                                   static_cast<std::uint64_t>(i));
      Sample sample;
      sample.class_id = cls;
      sample.condition = encode_condition(cls, spec.cond_vocab, spec.cond_len);
      sample.grid.assign(spec.grid.size(), spec.background_token);
      if (spec.background == BackgroundMode::noisy) {
        const int noise0 = spec.noise_vocab_start();
        const int noise_n = spec.vocab - noise0;
        for (int& t : sample.grid) {
          t = noise0 + static_cast<int>(s.next_below(noise_n));
        }
      }
      for (const Position& p : shape_cells(spec, cls, s)) {
        sample.grid[p.linear(spec.grid)] = palette[(p.row * 2 + p.col) % 3];
      }
      ds.samples.push_back(std::move(sample));
    }
  }
  return ds;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& dataset, Real ratio,
                                          SeededStream& stream) {
  if (ratio <= 0 || ratio >= 1) throw std::invalid_argument("split_dataset: ratio in (0,1)");
  // group by class, shuffle within class, largest-remainder quota per class
  std::vector<std::vector<int>> by_class;
  for (int i = 0; i < static_cast<int>(dataset.samples.size()); ++i) {
    const int cls = dataset.samples[i].class_id;
    if (cls >= static_cast<int>(by_class.size())) by_class.resize(cls + 1);
    by_class[cls].push_back(i);
  }
  const int total_train = static_cast<int>(
      std::lround(ratio * static_cast<Real>(dataset.samples.size())));
  std::vector<int> quota(by_class.size());
  std::vector<std::pair<Real, int>> remainder;
  int assigned = 0;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    const Real exact = ratio * static_cast<Real>(by_class[c].size());
    quota[c] = static_cast<int>(std::floor(exact));
    assigned += quota[c];
    remainder.push_back({exact - std::floor(exact), static_cast<int>(c)});
  }
  std::stable_sort(remainder.begin(), remainder.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int i = 0; i < total_train - assigned && i < static_cast<int>(remainder.size()); ++i) {
    ++quota[remainder[i].second];
  }

  Dataset train, test;
  train.spec = test.spec = dataset.spec;
  train.split = "train";
  test.split = "test";
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    std::vector<int> idx = by_class[c];
    SeededStream s = stream.derive(static_cast<std::uint64_t>(c));
    s.shuffle(idx);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      (static_cast<int>(i) < quota[c] ? train : test)
          .samples.push_back(dataset.samples[idx[i]]);
    }
  }
  return {std::move(train), std::move(test)};
}

void attach_orders(Dataset& dataset, const std::vector<Order>& orders) {
  if (orders.size() != dataset.samples.size()) {
    throw std::invalid_argument("attach_orders: order count does not match sample count");
  }
  const int n = dataset.spec.grid.size();
  for (const Order& o : orders) {
    if (!is_permutation_order(o, n)) {
      throw std::invalid_argument("attach_orders: order is not a valid permutation");
    }
  }
  for (std::size_t i = 0; i < orders.size(); ++i) {
    dataset.samples[i].order_label = orders[i];
  }
}

// ---- file io ----

std::uint32_t crc32(const unsigned char* data, std::size_t len) {
  static std::uint32_t table[256];
  static bool init = false;
  if (!init) {
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int j = 0; j < 8; ++j) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      table[i] = c;
    }
    init = true;
  }
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < len; ++i) {
    crc = table[(crc ^ data[i]) & 0xFF] ^ (crc >> 8);
  }
  return crc ^ 0xFFFFFFFFu;
}

namespace {

constexpr char kMagic[8] = {'O', 'A', 'R', 'D', 'A', 'T', 'A', '1'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::string& buf, T v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_u16(std::string& buf, int v) { put(buf, static_cast<std::uint16_t>(v)); }

class Reader {
 public:
  Reader(const std::string& buf, std::size_t offset) : buf_(buf), off_(offset) {}

  template <class T>
  T get() {
    if (off_ + sizeof(T) > buf_.size()) {
      throw std::runtime_error("dataset: truncated at byte offset " + std::to_string(off_));
    }
    T v{};
    std::memcpy(&v, buf_.data() + off_, sizeof(T));
    off_ += sizeof(T);
    return v;
  }
  int get_u16() { return static_cast<int>(get<std::uint16_t>()); }
  std::size_t offset() const { return off_; }

 private:
  const std::string& buf_;
  std::size_t off_;
};

int decode_class(const std::vector<int>& condition, int cond_vocab) {
  int cls = 0;
  for (std::size_t i = condition.size(); i > 0; --i) {
    cls = cls * cond_vocab + condition[i - 1];
  }
  return cls;
}

std::uint8_t split_code(const std::string& split) {
  if (split == "all") return 0;
  if (split == "train") return 1;
  if (split == "test") return 2;
  throw std::invalid_argument("dataset: unknown split tag " + split);
}

}  // namespace

void save_dataset(const std::string& path, const Dataset& ds) {
  ds.spec.validate();
  std::string payload;
  put(payload, kVersion);
  const CorpusSpec& sp = ds.spec;
  for (std::int32_t v : {sp.grid.rows, sp.grid.cols, sp.vocab, sp.cond_vocab, sp.cond_len,
                         sp.classes, sp.samples_per_class}) {
    put(payload, v);
  }
  put(payload, static_cast<std::uint8_t>(sp.background == BackgroundMode::noisy ? 1 : 0));
  put(payload, static_cast<std::int32_t>(sp.background_token));
  put(payload, sp.seed);
  put(payload, split_code(ds.split));
  put(payload, static_cast<std::uint64_t>(ds.samples.size()));
  const int n = sp.grid.size();
  for (const Sample& s : ds.samples) {
    if (static_cast<int>(s.condition.size()) != sp.cond_len ||
        static_cast<int>(s.grid.size()) != n) {
      throw std::invalid_argument("save_dataset: sample shape inconsistent with spec");
    }
    for (int t : s.condition) put_u16(payload, t);
    for (int t : s.grid) {
      if (t < 0 || t >= sp.vocab) throw std::invalid_argument("save_dataset: token out of vocab");
      put_u16(payload, t);
    }
    put(payload, static_cast<std::uint8_t>(s.order_label ? 1 : 0));
    if (s.order_label) {
      for (int l : *s.order_label) put_u16(payload, l);
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_dataset: cannot open " + path);
  out.write(kMagic, sizeof(kMagic));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  const std::uint32_t crc =
      crc32(reinterpret_cast<const unsigned char*>(payload.data()), payload.size());
  out.write(reinterpret_cast<const char*>(&crc), sizeof(crc));
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_dataset: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof(kMagic) + sizeof(std::uint32_t) ||
      std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("load_dataset: bad magic at byte offset 0");
  }
  const std::size_t payload_len = buf.size() - sizeof(kMagic) - sizeof(std::uint32_t);
  std::uint32_t stored_crc = 0;
  std::memcpy(&stored_crc, buf.data() + buf.size() - sizeof(stored_crc), sizeof(stored_crc));
  const std::uint32_t actual_crc = crc32(
      reinterpret_cast<const unsigned char*>(buf.data() + sizeof(kMagic)), payload_len);
  if (stored_crc != actual_crc) {
    throw std::runtime_error("load_dataset: checksum mismatch at byte offset " +
                             std::to_string(buf.size() - sizeof(stored_crc)));
  }
  Reader r(buf, sizeof(kMagic));
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) {
    throw std::runtime_error("load_dataset: unsupported version " + std::to_string(version));
  }
  Dataset ds;
  CorpusSpec& sp = ds.spec;
  sp.grid.rows = r.get<std::int32_t>();
  sp.grid.cols = r.get<std::int32_t>();
  sp.vocab = r.get<std::int32_t>();
  sp.cond_vocab = r.get<std::int32_t>();
  sp.cond_len = r.get<std::int32_t>();
  sp.classes = r.get<std::int32_t>();
  sp.samples_per_class = r.get<std::int32_t>();
  sp.background = r.get<std::uint8_t>() ? BackgroundMode::noisy : BackgroundMode::constant;
  sp.background_token = r.get<std::int32_t>();
  sp.seed = r.get<std::uint64_t>();
  sp.validate();
  const std::uint8_t split = r.get<std::uint8_t>();
  ds.split = split == 0 ? "all" : split == 1 ? "train" : "test";
  const auto count = r.get<std::uint64_t>();
  const int n = sp.grid.size();
  for (std::uint64_t i = 0; i < count; ++i) {
    Sample s;
    s.condition.resize(sp.cond_len);
    for (int& t : s.condition) t = r.get_u16();
    s.class_id = decode_class(s.condition, sp.cond_vocab);
    s.grid.resize(n);
    for (int& t : s.grid) {
      t = r.get_u16();
      if (t >= sp.vocab) {
        throw std::runtime_error("load_dataset: token out of vocabulary at byte offset " +
                                 std::to_string(r.offset()));
      }
    }
    if (r.get<std::uint8_t>()) {
      Order o(n);
      for (int& l : o) l = r.get_u16();
      if (!is_permutation_order(o, n)) {
        throw std::runtime_error("load_dataset: invalid order label at byte offset " +
                                 std::to_string(r.offset()));
      }
      s.order_label = std::move(o);
    }
    ds.samples.push_back(std::move(s));
  }
  if (r.offset() != sizeof(kMagic) + payload_len) {
    throw std::runtime_error("load_dataset: trailing bytes at offset " +
                             std::to_string(r.offset()));
  }
  return ds;
}

}  // namespace oar
