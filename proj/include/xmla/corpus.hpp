#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xmla/model.hpp"

namespace xmla {

// Synthetic byte corpora over a lowercase-letter alphabet, deterministic per
// seed. "markov" draws from a seeded order-2 transition table; "pattern"
// repeats short motifs in blocks (a copy/completion task).
std::vector<uint8_t> gen_markov_corpus(int64_t n_tokens, uint64_t seed);
std::vector<uint8_t> gen_pattern_corpus(int64_t n_tokens, uint64_t seed);

std::vector<int64_t> bytes_to_tokens(const std::vector<uint8_t>& bytes);

std::vector<uint8_t> read_corpus_file(const std::string& path);
void write_corpus_file(const std::string& path, const std::vector<uint8_t>& bytes);

struct PrefPair {
    std::vector<int64_t> prompt;
    std::vector<int64_t> chosen;
    std::vector<int64_t> rejected;
};

// Preference pairs: prompts sampled from the corpus, chosen = the teacher's
// greedy continuation, rejected = a byte-corrupted copy of it.
std::vector<PrefPair> synth_pref_pairs(const LmModel& teacher, const std::vector<int64_t>& corpus,
                                       int64_t n_pairs, int64_t prompt_len, int64_t cont_len,
                                       uint64_t seed);

}  // namespace xmla
