#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "oar/decode.hpp"
#include "oar/grid.hpp"

namespace oar {

enum class BackgroundMode { constant, noisy };

/// Synthetic pre-quantized grid corpus: class-conditioned foreground shapes
/// over an easy (constant) or hard (noisy) background. The noisy background
/// draws from the upper quarter of the codebook, which foregrounds never use.
struct CorpusSpec {
  GridShape grid{8, 8};
  int vocab = 64;
  int cond_vocab = 16;
  int cond_len = 4;
  int classes = 8;
  int samples_per_class = 250;
  BackgroundMode background = BackgroundMode::constant;
  int background_token = 0;
  std::uint64_t seed = 0;

  int noise_vocab_start() const { return vocab - vocab / 4; }
  void validate() const;
  bool operator==(const CorpusSpec&) const = default;
};

struct Sample {
  int class_id = 0;
  std::vector<int> condition;  // cond_len tokens, class id in base cond_vocab
  std::vector<int> grid;       // row-major codebook indices
  std::optional<Order> order_label;
};

struct Dataset {
  CorpusSpec spec;
  std::vector<Sample> samples;
  std::string split = "all";  // all/train/test
};

/// Deterministic corpus from the spec; constant mode keeps at least half of
/// every grid on the background token.
Dataset generate_corpus(const CorpusSpec& spec);

/// Class id encoded in base cond_vocab, least significant digit first.
std::vector<int> encode_condition(int class_id, int cond_vocab, int cond_len);

/// Per-class stratified random split.
std::pair<Dataset, Dataset> split_dataset(const Dataset& dataset, Real ratio,
                                          SeededStream& stream);

/// Replaces order labels; one valid permutation per sample.
void attach_orders(Dataset& dataset, const std::vector<Order>& orders);

// Binary file io: magic "OARDATA1", little-endian, trailing CRC-32 of the
// payload. Canonical form: save -> load -> save is byte-identical.
void save_dataset(const std::string& path, const Dataset& dataset);
Dataset load_dataset(const std::string& path);

std::uint32_t crc32(const unsigned char* data, std::size_t len);

}  // namespace oar
