#include "xmla/corpus.hpp"

#include <fstream>

#include "xmla/rng.hpp"

namespace xmla {

namespace {
constexpr int kAlphabet = 26;
constexpr uint8_t kBase = 'a';
}  // namespace

std::vector<uint8_t> gen_markov_corpus(int64_t n_tokens, uint64_t seed) {
    if (n_tokens <= 0) throw DataError("gen_markov_corpus: token count must be positive");
    Rng rng = Rng(seed).substream("corpus-markov");

    // Order-2 chain: each (prev2, prev1) context gets 3 candidate successors
    // with random weights. Sparse enough that a small model can learn it.
    struct Ctx {
        int succ[3];
        double cum[3];
    };
    std::vector<Ctx> table(static_cast<size_t>(kAlphabet * kAlphabet));
    for (auto& c : table) {
        double w[3];
        double total = 0.0;
        for (int i = 0; i < 3; ++i) {
            c.succ[i] = static_cast<int>(rng.uniform_int(0, kAlphabet - 1));
            w[i] = rng.uniform(0.1, 1.0);
            total += w[i];
        }
        double acc = 0.0;
        for (int i = 0; i < 3; ++i) {
            acc += w[i] / total;
            c.cum[i] = acc;
        }
        c.cum[2] = 1.0;
    }

    std::vector<uint8_t> out;
    out.reserve(static_cast<size_t>(n_tokens));
    int prev2 = 0, prev1 = 0;
    for (int64_t t = 0; t < n_tokens; ++t) {
        const Ctx& c = table[static_cast<size_t>(prev2 * kAlphabet + prev1)];
        double u = rng.uniform();
        int next = c.succ[2];
        for (int i = 0; i < 3; ++i)
            if (u < c.cum[i]) {
                next = c.succ[i];
                break;
            }
        out.push_back(static_cast<uint8_t>(kBase + next));
        prev2 = prev1;
        prev1 = next;
    }
    return out;
}

std::vector<uint8_t> gen_pattern_corpus(int64_t n_tokens, uint64_t seed) {
    if (n_tokens <= 0) throw DataError("gen_pattern_corpus: token count must be positive");
    Rng rng = Rng(seed).substream("corpus-pattern");

    std::vector<uint8_t> out;
    out.reserve(static_cast<size_t>(n_tokens));
    while (static_cast<int64_t>(out.size()) < n_tokens) {
        int64_t motif_len = rng.uniform_int(4, 10);
        int64_t block_len = rng.uniform_int(64, 128);
        std::vector<uint8_t> motif(static_cast<size_t>(motif_len));
        for (auto& b : motif) b = static_cast<uint8_t>(kBase + rng.uniform_int(0, kAlphabet - 1));
        for (int64_t i = 0; i < block_len && static_cast<int64_t>(out.size()) < n_tokens; ++i)
            out.push_back(motif[static_cast<size_t>(i % motif_len)]);
    }
    return out;
}

std::vector<int64_t> bytes_to_tokens(const std::vector<uint8_t>& bytes) {
    return std::vector<int64_t>(bytes.begin(), bytes.end());
}

std::vector<uint8_t> read_corpus_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("corpus: cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return bytes;
}

void write_corpus_file(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("corpus: cannot open " + path + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("corpus: write failed for " + path);
}

std::vector<PrefPair> synth_pref_pairs(const LmModel& teacher, const std::vector<int64_t>& corpus,
                                       int64_t n_pairs, int64_t prompt_len, int64_t cont_len,
                                       uint64_t seed) {
    if (n_pairs <= 0 || prompt_len <= 0 || cont_len <= 0)
        throw DataError("synth_pref_pairs: counts and lengths must be positive");
    if (static_cast<int64_t>(corpus.size()) < prompt_len)
        throw DataError("synth_pref_pairs: corpus shorter than prompt length");
    Rng rng = Rng(seed).substream("pref-pairs");

    std::vector<PrefPair> pairs;
    pairs.reserve(static_cast<size_t>(n_pairs));
    for (int64_t p = 0; p < n_pairs; ++p) {
        int64_t start = rng.uniform_int(0, static_cast<int64_t>(corpus.size()) - prompt_len);
        PrefPair pair;
        pair.prompt.assign(corpus.begin() + start, corpus.begin() + start + prompt_len);

        std::vector<int64_t> full = generate(teacher, pair.prompt, cont_len);
        pair.chosen.assign(full.begin() + prompt_len, full.end());

        // Corrupt roughly half the positions with random in-vocabulary
        // tokens; retry until the corruption actually differs.
        pair.rejected = pair.chosen;
        do {
            for (auto& t : pair.rejected)
                if (rng.uniform() < 0.5) t = rng.uniform_int(0, teacher.config.vocab_size - 1);
        } while (pair.rejected == pair.chosen);
        pairs.push_back(std::move(pair));
    }
    return pairs;
}

}  // namespace xmla
