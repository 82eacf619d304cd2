#include "oar/config.hpp"

#include <fstream>
#include <istream>
#include <sstream>
#include <stdexcept>

namespace oar {

ModelConfig RunConfig::model_config() const {
  ModelConfig c;
  c.grid = GridShape{grid_h, grid_w};
  c.vocab = vocab;
  c.cond_vocab = cond_vocab;
  c.cond_len = cond_len;
  c.dim = dim;
  c.depth = depth;
  c.heads = heads;
  c.dropout = dropout;
  c.img_loss_weight = img_loss_weight;
  return c;
}

TrainConfig RunConfig::train_config(OrderPolicy order_policy, int epochs) const {
  TrainConfig c;
  c.lr = lr;
  c.batch = batch;
  c.epochs = epochs;
  c.plateau_factor = plateau_factor;
  c.plateau_patience = plateau_patience;
  c.policy = order_policy;
  c.seed = seed;
  return c;
}

DecodePolicy RunConfig::decode_policy() const {
  DecodePolicy p;
  p.mode = decode_mode_from_string(policy);
  p.lambda = lambda;
  p.topk = topk;
  p.domain = score_domain_from_string(score_domain);
  return p;
}

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

int parse_int(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  int r;
  try {
    r = std::stoi(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad integer for " + key + ": " + v);
  }
  if (pos != v.size()) throw std::invalid_argument("config: bad integer for " + key);
  return r;
}

Real parse_real(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  Real r;
  try {
    r = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad number for " + key + ": " + v);
  }
  if (pos != v.size()) throw std::invalid_argument("config: bad number for " + key);
  return r;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long r;
  try {
    r = std::stoull(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad seed for " + key + ": " + v);
  }
  if (pos != v.size()) throw std::invalid_argument("config: bad seed for " + key);
  return r;
}

}  // namespace

void apply_override(RunConfig& c, const std::string& key, const std::string& value) {
  if (key == "grid_h") c.grid_h = parse_int(key, value);
  else if (key == "grid_w") c.grid_w = parse_int(key, value);
  else if (key == "vocab") c.vocab = parse_int(key, value);
  else if (key == "cond_vocab") c.cond_vocab = parse_int(key, value);
  else if (key == "cond_len") c.cond_len = parse_int(key, value);
  else if (key == "dim") c.dim = parse_int(key, value);
  else if (key == "depth") c.depth = parse_int(key, value);
  else if (key == "heads") c.heads = parse_int(key, value);
  else if (key == "dropout") c.dropout = parse_real(key, value);
  else if (key == "img_loss_weight") c.img_loss_weight = parse_real(key, value);
  else if (key == "lr") c.lr = parse_real(key, value);
  else if (key == "batch") c.batch = parse_int(key, value);
  else if (key == "epochs_random") c.epochs_random = parse_int(key, value);
  else if (key == "epochs_finetune") c.epochs_finetune = parse_int(key, value);
  else if (key == "plateau_factor") c.plateau_factor = parse_real(key, value);
  else if (key == "plateau_patience") c.plateau_patience = parse_int(key, value);
  else if (key == "lambda") c.lambda = parse_real(key, value);
  else if (key == "topk") c.topk = parse_int(key, value);
  else if (key == "score_domain") c.score_domain = value;
  else if (key == "policy") c.policy = value;
  else if (key == "seed") c.seed = parse_u64(key, value);
  else if (key == "data_path") c.data_path = value;
  else if (key == "ckpt_path") c.ckpt_path = value;
  else if (key == "out_dir") c.out_dir = value;
  else throw std::invalid_argument("config: unknown key: " + key);
}

RunConfig parse_config(std::istream& in) {
  RunConfig c;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                  ": expected key = value");
    }
    apply_override(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open " + path);
  return parse_config(in);
}

}  // namespace oar
