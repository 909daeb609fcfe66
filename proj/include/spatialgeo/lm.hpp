#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "spatialgeo/fusion.hpp"
#include "spatialgeo/params.hpp"

namespace spatialgeo {

using TokenIds = std::vector<std::size_t>;

// Bijective token <-> id map. Ids 0..3 are always <pad>, <bos>, <eos>, <unk>.
class Vocab {
public:
    explicit Vocab(std::vector<std::string> tokens);

    // Digits, '.', length units and the question words of the synthetic task.
    static Vocab standard();

    std::size_t size() const { return tokens_.size(); }
    std::size_t id(std::string_view token) const;
    std::optional<std::size_t> find(std::string_view token) const;
    const std::string& token(std::size_t id) const;

    std::size_t pad() const { return 0; }
    std::size_t bos() const { return 1; }
    std::size_t eos() const { return 2; }
    std::size_t unk() const { return 3; }

    // Lower-cases, splits on whitespace, then splits numbers into single
    // characters and detaches punctuation. Unknown words map to <unk>.
    TokenIds encode(std::string_view text) const;
    // Inverse of encode for well-formed answers: digit and '.' runs are glued,
    // everything else is space separated. Specials are skipped.
    std::string decode(std::span<const std::size_t> ids) const;

    // One token per line.
    std::string serialize() const;
    static Vocab parse(std::string_view text);
    void save(const std::filesystem::path& path) const;
    static Vocab load(const std::filesystem::path& path);

    const std::vector<std::string>& tokens() const { return tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct DecoderConfig {
    std::size_t layers = 2;
    std::size_t dim = 32;
    std::size_t heads = 2;
    std::size_t max_len = 64;
    std::size_t vocab_size = 64;
    std::size_t mlp_ratio = 4;

    void validate() const;
};

struct LoRAConfig {
    std::size_t rank = 4;
    double alpha = 8.0;
    // Suffixes of lm.* weight matrix names, e.g. "attn.wq".
    std::vector<std::string> targets{"attn.wq", "attn.wv"};

    double scaling() const { return alpha / static_cast<double>(rank); }
    void validate(std::size_t dim) const;
};

inline const std::string kLmPrefix = "lm";

// Toy pre-norm decoder-only transformer. Parameters live in a ParamSet under
// lm.*; the decoder only keeps a pointer to it, so LoRA wrapping and
// checkpoint loads on the set take effect immediately.
class Decoder {
public:
    static Decoder create(ParamSet& params, const DecoderConfig& cfg, Rng& rng);
    static Decoder bind(ParamSet& params, const DecoderConfig& cfg);

    const DecoderConfig& config() const { return cfg_; }

    // Embedding-table lookup, [ids x dim]. An empty id list gives a 0 x dim tensor.
    Tensor embed_text(std::span<const std::size_t> ids) const;

    // Logits [len x vocab] under a causal mask.
    Tensor forward(const EmbeddingSequence& h) const;

    // Teacher-forced mean cross-entropy over the answer tokens only. answer
    // must be non-empty and normally ends with <eos>.
    Tensor autoregressive_loss(const EmbeddingSequence& h_in, std::span<const std::size_t> answer) const;

    // Argmax decoding; stops at eos (not included in the result), max_new
    // tokens or the context limit.
    TokenIds generate_greedy(const EmbeddingSequence& h_in, std::size_t max_new, std::size_t eos) const;

private:
    Decoder(ParamSet& params, const DecoderConfig& cfg) : params_(&params), cfg_(cfg) {}

    const Tensor& p(const std::string& name) const { return params_->get(name); }
    Tensor linear(const std::string& name, const Tensor& x) const;
    Tensor hidden(const EmbeddingSequence& h) const;
    Tensor head(const Tensor& hidden_rows) const;

    ParamSet* params_;
    DecoderConfig cfg_;
};

// H_in = [visual tokens ; text tokens].
EmbeddingSequence splice_input(const EmbeddingSequence& visual, const Tensor& text);

// Adds <target>.lora_a [r x out] (small random), <target>.lora_b [in x r]
// (zeros) and a frozen <target>.lora_scale for every lm.* matrix whose name
// ends with a configured target, and freezes the base matrix. The decoder then
// computes x W + scale * (x B) A.
void lora_wrap(ParamSet& params, const LoRAConfig& cfg, Rng& rng);

// Returns a copy in which every wrapped W is replaced by W + scale * B A and
// the LoRA tensors are removed.
ParamSet lora_merge(const ParamSet& params);

bool is_lora_name(std::string_view name);

}  // namespace spatialgeo
