#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>

#include "doctest.h"
#include "oar/data.hpp"

using namespace oar;

namespace {

CorpusSpec small_spec() {
  CorpusSpec spec;
  spec.grid = GridShape{8, 8};
  spec.vocab = 64;
  spec.cond_vocab = 16;
  spec.cond_len = 4;
  spec.classes = 4;
  spec.samples_per_class = 25;
  spec.seed = 11;
  return spec;
}

std::string temp_path(const char* name) {
  return std::string("/tmp/oar_test_") + name;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("condition encoding is base cond_vocab, low digit first") {
  CHECK(encode_condition(0, 16, 4) == std::vector<int>{0, 0, 0, 0});
  CHECK(encode_condition(5, 16, 4) == std::vector<int>{5, 0, 0, 0});
  CHECK(encode_condition(16 + 3, 16, 4) == std::vector<int>{3, 1, 0, 0});
}

TEST_CASE("constant background keeps at least half the grid on background") {
  Dataset d = generate_corpus(small_spec());
  CHECK(d.samples.size() == 100);
  for (const Sample& s : d.samples) {
    int bg = 0;
    for (int t : s.grid) {
      CHECK(t >= 0);
      CHECK(t < 64);
      bg += t == d.spec.background_token;
    }
    CHECK(bg * 2 >= static_cast<int>(s.grid.size()));
    CHECK(s.condition == encode_condition(s.class_id, 16, 4));
  }
}

TEST_CASE("noisy background draws only from the noise sub-vocabulary") {
  CorpusSpec spec = small_spec();
  spec.background = BackgroundMode::noisy;
  Dataset d = generate_corpus(spec);
  const int noise_start = spec.noise_vocab_start();
  for (const Sample& s : d.samples) {
    int noise = 0, fg = 0;
    for (int t : s.grid) {
      if (t >= noise_start) ++noise;
      else ++fg;
    }
    CHECK(noise > 0);  // background present
    CHECK(fg > 0);     // foreground present, never from the noise range
  }
}

TEST_CASE("corpus generation is bit stable") {
  Dataset a = generate_corpus(small_spec());
  Dataset b = generate_corpus(small_spec());
  REQUIRE(a.samples.size() == b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i].grid == b.samples[i].grid);
    CHECK(a.samples[i].condition == b.samples[i].condition);
  }
}

TEST_CASE("class token histograms differ between classes") {
  CorpusSpec spec = small_spec();
  spec.classes = 2;
  spec.samples_per_class = 500;
  Dataset d = generate_corpus(spec);
  std::map<int, std::map<int, int>> hist;  // class -> token -> count
  for (const Sample& s : d.samples) {
    for (int t : s.grid) ++hist[s.class_id][t];
  }
  // chi-square over the shared support
  double chi2 = 0;
  const double n0 = 500.0 * 64, n1 = 500.0 * 64;
  for (int t = 0; t < 64; ++t) {
    const double a = hist[0][t], b = hist[1][t];
    if (a + b == 0) continue;
    const double ea = (a + b) * n0 / (n0 + n1), eb = (a + b) * n1 / (n0 + n1);
    chi2 += (a - ea) * (a - ea) / ea + (b - eb) * (b - eb) / eb;
  }
  CHECK(chi2 > 100.0);  // df <= 63; p < 0.01 needs only ~92
}

TEST_CASE("stratified split hits the ratio per class") {
  CorpusSpec spec = small_spec();
  spec.samples_per_class = 50;
  Dataset d = generate_corpus(spec);
  SeededStream s(1, 0);
  auto [train, test] = split_dataset(d, 0.9, s);
  CHECK(train.samples.size() == 180);
  CHECK(test.samples.size() == 20);
  std::map<int, int> per_class;
  for (const Sample& smp : train.samples) ++per_class[smp.class_id];
  for (const auto& [cls, count] : per_class) CHECK(std::abs(count - 45) <= 1);

  // union restores the original multiset of grids
  std::vector<std::vector<int>> all;
  for (const Sample& smp : d.samples) all.push_back(smp.grid);
  std::vector<std::vector<int>> joined;
  for (const Sample& smp : train.samples) joined.push_back(smp.grid);
  for (const Sample& smp : test.samples) joined.push_back(smp.grid);
  std::sort(all.begin(), all.end());
  std::sort(joined.begin(), joined.end());
  CHECK(all == joined);

  SeededStream s2(1, 0);
  auto [train2, test2] = split_dataset(d, 0.9, s2);
  CHECK(train2.samples.size() == train.samples.size());
  for (std::size_t i = 0; i < train.samples.size(); ++i) {
    CHECK(train2.samples[i].grid == train.samples[i].grid);
  }
}

TEST_CASE("attach_orders stores and validates permutations") {
  Dataset d = generate_corpus(small_spec());
  std::vector<Order> orders(d.samples.size());
  for (auto& o : orders) {
    o.resize(64);
    for (int i = 0; i < 64; ++i) o[i] = 63 - i;
  }
  attach_orders(d, orders);
  for (const Sample& s : d.samples) {
    REQUIRE(s.order_label.has_value());
    CHECK((*s.order_label)[0] == 63);
  }

  std::vector<Order> bad = orders;
  bad[0][0] = bad[0][1];  // repeated position
  CHECK_THROWS_AS(attach_orders(d, bad), std::invalid_argument);
  orders.pop_back();
  CHECK_THROWS_AS(attach_orders(d, orders), std::invalid_argument);
}

TEST_CASE("dataset round trip is canonical, with and without labels") {
  Dataset d = generate_corpus(small_spec());
  const std::string p1 = temp_path("ds1.bin"), p2 = temp_path("ds2.bin");

  save_dataset(p1, d);
  Dataset back = load_dataset(p1);
  save_dataset(p2, back);
  CHECK(slurp(p1) == slurp(p2));
  REQUIRE(back.samples.size() == d.samples.size());
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    CHECK(back.samples[i].grid == d.samples[i].grid);
    CHECK(back.samples[i].class_id == d.samples[i].class_id);
    CHECK_FALSE(back.samples[i].order_label.has_value());
  }

  std::vector<Order> orders(d.samples.size());
  SeededStream s(2, 0);
  for (auto& o : orders) o = sample_uniform_order(64, s);
  attach_orders(d, orders);
  save_dataset(p1, d);
  Dataset labeled = load_dataset(p1);
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    CHECK(*labeled.samples[i].order_label == *d.samples[i].order_label);
  }
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("corrupting one payload byte trips the checksum") {
  Dataset d = generate_corpus(small_spec());
  const std::string path = temp_path("ds_corrupt.bin");
  save_dataset(path, d);
  std::string bytes = slurp(path);
  bytes[bytes.size() / 2] ^= 0x01;
  std::ofstream(path, std::ios::binary).write(bytes.data(), bytes.size());
  CHECK_THROWS_AS(load_dataset(path), std::runtime_error);
  std::remove(path.c_str());
}

TEST_CASE("bad magic and truncation are format errors") {
  const std::string path = temp_path("ds_bad.bin");
  std::ofstream(path, std::ios::binary) << "WRONGMAGIC and then some";
  CHECK_THROWS_AS(load_dataset(path), std::runtime_error);

  Dataset d = generate_corpus(small_spec());
  save_dataset(path, d);
  std::string bytes = slurp(path);
  bytes.resize(bytes.size() / 2);
  std::ofstream(path, std::ios::binary).write(bytes.data(), bytes.size());
  CHECK_THROWS_AS(load_dataset(path), std::runtime_error);
  std::remove(path.c_str());
}

TEST_CASE("crc32 known vector") {
  const char* s = "123456789";
  CHECK(crc32(reinterpret_cast<const unsigned char*>(s), 9) == 0xCBF43926u);
}

TEST_CASE("spec validation rejects inconsistent corpora") {
  CorpusSpec spec = small_spec();
  spec.background_token = 64;  // out of vocab
  CHECK_THROWS_AS(generate_corpus(spec), std::invalid_argument);
  spec = small_spec();
  spec.classes = 0;
  CHECK_THROWS_AS(generate_corpus(spec), std::invalid_argument);
}
