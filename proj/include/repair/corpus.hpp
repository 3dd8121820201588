#pragma once

// Synthetic fact corpus. The vocabulary is split into bands:
//   [1, v/8)       paraphrase tokens
//   [v/8, v/2)     subject keys (3 tokens)
//   [v/2, 3v/4)    objects (2 tokens)
//   [3v/4, v)      background prompts (locality, unrelated pool, calibration)
// Records are stored one JSON object per line after a header line carrying
// the schema tag and the background pools.

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "repair/toy_lm.hpp"

namespace repair {

inline constexpr const char* kCorpusSchema = "repair.corpus.v1";

struct EditExample {
  std::uint64_t id = 0;
  TokenSequence edit_prompt;
  TokenSequence edit_target;
  std::vector<TokenSequence> rephrases;
  TokenSequence locality_prompt;
  TokenSequence locality_reference;
};

struct CorpusOptions {
  std::size_t n = 30;
  std::size_t rephrases_per_fact = 2;
  std::size_t unrelated = 200;
  std::size_t calibration = 200;
  std::uint64_t seed = 0;
};

struct Corpus {
  std::uint64_t seed = 0;
  std::uint64_t model_seed = 0;
  std::size_t vocab = 0;
  std::vector<EditExample> examples;
  std::vector<TokenSequence> unrelated;    // negatives for the routing margin
  std::vector<TokenSequence> calibration;  // held out, sets the routing threshold
};

struct VocabBands {
  Token paraphrase_lo, subject_lo, object_lo, background_lo, end;

  static VocabBands of(std::size_t vocab) {
    if (vocab < 16) throw std::invalid_argument("corpus: vocab must be >= 16");
    const auto v = static_cast<Token>(vocab);
    return {1, v / 8, v / 2, 3 * v / 4, v};
  }
};

inline constexpr std::size_t kKeyLength = 3;
inline constexpr std::size_t kObjectLength = 2;

inline std::size_t key_capacity(Token lo, Token hi) {
  std::size_t w = hi - lo;
  return w * w * w;
}

/// Deterministic fact corpus; locality references are the greedy decode of
/// `base` with its own value matrix.
inline Corpus generate_corpus(const ModelState& base, std::uint64_t model_seed,
                              const CorpusOptions& opt) {
  if (opt.n < 1) throw std::invalid_argument("generate_corpus: n must be >= 1");
  if (opt.rephrases_per_fact < 1) {
    throw std::invalid_argument("generate_corpus: need at least one rephrase per fact");
  }
  const std::size_t vocab = base.config.vocab_size;
  const VocabBands bands = VocabBands::of(vocab);
  if (opt.n > key_capacity(bands.subject_lo, bands.object_lo)) {
    throw std::invalid_argument("generate_corpus: n = " + std::to_string(opt.n) +
                                " exceeds the unique subject-key capacity");
  }
  if (opt.n + opt.unrelated + opt.calibration > key_capacity(bands.background_lo, bands.end)) {
    throw std::invalid_argument("generate_corpus: background prompts exceed key capacity");
  }

  std::mt19937_64 rng(opt.seed);
  std::set<std::vector<Token>> used;
  auto fresh_key = [&](Token lo, Token hi) {
    std::uniform_int_distribution<Token> pick(lo, hi - 1);
    for (;;) {
      std::vector<Token> k(kKeyLength);
      for (auto& t : k) t = pick(rng);
      if (used.insert(k).second) return TokenSequence(k);
    }
  };
  std::uniform_int_distribution<Token> object(bands.object_lo, bands.background_lo - 1);
  std::uniform_int_distribution<Token> para(bands.paraphrase_lo, bands.subject_lo - 1);

  Corpus c;
  c.seed = opt.seed;
  c.model_seed = model_seed;
  c.vocab = vocab;
  for (std::size_t i = 0; i < opt.n; ++i) {
    EditExample ex;
    ex.id = i;
    ex.edit_prompt = fresh_key(bands.subject_lo, bands.object_lo);
    std::vector<Token> y(kObjectLength);
    for (auto& t : y) t = object(rng);
    ex.edit_target = TokenSequence(y);
    for (std::size_t r = 0; r < opt.rephrases_per_fact; ++r) {
      std::vector<Token> p(1 + r % 2);
      for (auto& t : p) t = para(rng);
      ex.rephrases.push_back(concat(TokenSequence(p), ex.edit_prompt));
    }
    ex.locality_prompt = fresh_key(bands.background_lo, bands.end);
    ex.locality_reference = greedy_decode(base, ex.locality_prompt, kObjectLength, base.value);
    c.examples.push_back(std::move(ex));
  }
  for (std::size_t i = 0; i < opt.unrelated; ++i)
    c.unrelated.push_back(fresh_key(bands.background_lo, bands.end));
  for (std::size_t i = 0; i < opt.calibration; ++i)
    c.calibration.push_back(fresh_key(bands.background_lo, bands.end));
  return c;
}

inline nlohmann::json to_json(const TokenSequence& s) { return s.tokens(); }

inline TokenSequence sequence_from_json(const nlohmann::json& j) {
  return TokenSequence(j.get<std::vector<Token>>());
}

inline nlohmann::json to_json(const EditExample& ex) {
  nlohmann::json reph = nlohmann::json::array();
  for (const auto& r : ex.rephrases) reph.push_back(to_json(r));
  return {{"id", ex.id},
          {"edit_prompt", to_json(ex.edit_prompt)},
          {"edit_target", to_json(ex.edit_target)},
          {"rephrases", reph},
          {"locality_prompt", to_json(ex.locality_prompt)},
          {"locality_reference", to_json(ex.locality_reference)}};
}

inline EditExample example_from_json(const nlohmann::json& j) {
  EditExample ex;
  ex.id = j.at("id").get<std::uint64_t>();
  ex.edit_prompt = sequence_from_json(j.at("edit_prompt"));
  ex.edit_target = sequence_from_json(j.at("edit_target"));
  for (const auto& r : j.at("rephrases")) ex.rephrases.push_back(sequence_from_json(r));
  ex.locality_prompt = sequence_from_json(j.at("locality_prompt"));
  ex.locality_reference = sequence_from_json(j.at("locality_reference"));
  return ex;
}

inline void write_corpus(const Corpus& c, std::ostream& out) {
  nlohmann::json header{{"schema", kCorpusSchema},
                        {"seed", c.seed},
                        {"model_seed", c.model_seed},
                        {"vocab", c.vocab},
                        {"count", c.examples.size()}};
  header["unrelated"] = nlohmann::json::array();
  for (const auto& s : c.unrelated) header["unrelated"].push_back(to_json(s));
  header["calibration"] = nlohmann::json::array();
  for (const auto& s : c.calibration) header["calibration"].push_back(to_json(s));
  out << header.dump() << '\n';
  for (const auto& ex : c.examples) out << to_json(ex).dump() << '\n';
}

inline Corpus read_corpus(std::istream& in, const std::string& source = "corpus") {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(source + ": empty file");
  Corpus c;
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.value("schema", "") != kCorpusSchema) {
      throw std::runtime_error(source + ": expected schema " + kCorpusSchema);
    }
    c.seed = header.at("seed").get<std::uint64_t>();
    c.model_seed = header.at("model_seed").get<std::uint64_t>();
    c.vocab = header.at("vocab").get<std::size_t>();
    for (const auto& s : header.at("unrelated")) c.unrelated.push_back(sequence_from_json(s));
    for (const auto& s : header.at("calibration")) c.calibration.push_back(sequence_from_json(s));
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        c.examples.push_back(example_from_json(nlohmann::json::parse(line)));
      } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(source + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    if (c.examples.size() != header.at("count").get<std::size_t>()) {
      throw std::runtime_error(source + ": record count does not match header");
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(source + ": " + e.what());
  }
  for (const auto& ex : c.examples) {
    ex.edit_prompt.validate(c.vocab, "edit_prompt");
    ex.edit_target.validate(c.vocab, "edit_target");
    ex.locality_prompt.validate(c.vocab, "locality_prompt");
  }
  return c;
}

inline void save_corpus(const Corpus& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  write_corpus(c, out);
}

inline Corpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_corpus(in, path);
}

}  // namespace repair
