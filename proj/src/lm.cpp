#include "spatialgeo/lm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "spatialgeo/errors.hpp"

namespace spatialgeo {

// ---- vocabulary -------------------------------------------------------------

namespace {

const std::vector<std::string> kSpecials{"<pad>", "<bos>", "<eos>", "<unk>"};

bool is_number_char(char c) { return std::isdigit(static_cast<unsigned char>(c)) || c == '.'; }

bool is_punct(char c) { return c == '?' || c == ',' || c == '!' || c == ';' || c == ':'; }

}  // namespace

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < kSpecials.size() ||
        !std::equal(kSpecials.begin(), kSpecials.end(), tokens_.begin())) {
        throw ConfigError("vocab must start with <pad>, <bos>, <eos>, <unk>");
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (tokens_[i].empty()) throw ConfigError("vocab: empty token at line " + std::to_string(i + 1));
        if (!index_.emplace(tokens_[i], i).second) throw ConfigError("vocab: duplicate token '" + tokens_[i] + "'");
    }
}

Vocab Vocab::standard() {
    std::vector<std::string> t = kSpecials;
    for (char d = '0'; d <= '9'; ++d) t.emplace_back(1, d);
    for (const char* w : {".", "?", ",", "m", "cm", "mm", "km", "in", "ft", "yd", "meters", "meter", "centimeters",
                          "feet", "inches", "what", "is", "the", "how", "tall", "wide", "far", "high", "height",
                          "width", "vertical", "horizontal", "direct", "distance", "of", "object", "between", "and",
                          "to", "from", "camera", "it", "a", "about", "ground", "above", "its"}) {
        t.emplace_back(w);
    }
    return Vocab(std::move(t));
}

std::optional<std::size_t> Vocab::find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::size_t Vocab::id(std::string_view token) const {
    auto f = find(token);
    if (!f) throw IndexError("vocab: unknown token '" + std::string(token) + "'");
    return *f;
}

const std::string& Vocab::token(std::size_t id) const {
    if (id >= tokens_.size()) throw IndexError("vocab: id " + std::to_string(id) + " out of range");
    return tokens_[id];
}

TokenIds Vocab::encode(std::string_view text) const {
    TokenIds out;
    auto emit = [&](const std::string& piece) {
        if (piece.empty()) return;
        auto f = find(piece);
        out.push_back(f ? *f : unk());
    };
    std::string word;
    auto flush_word = [&] {
        // Split numbers into single characters, keep other runs whole.
        std::string run;
        for (char c : word) {
            if (is_number_char(c)) {
                emit(run);
                run.clear();
                emit(std::string(1, c));
            } else if (is_punct(c)) {
                emit(run);
                run.clear();
                emit(std::string(1, c));
            } else {
                run.push_back(c);
            }
        }
        emit(run);
        word.clear();
    };
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            flush_word();
        } else {
            word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
    }
    flush_word();
    return out;
}

std::string Vocab::decode(std::span<const std::size_t> ids) const {
    std::string out;
    bool prev_numeric = false;
    for (auto id : ids) {
        if (id < kSpecials.size()) continue;
        const auto& t = token(id);
        const bool numeric = t.size() == 1 && is_number_char(t[0]);
        const bool punct = t.size() == 1 && is_punct(t[0]);
        if (!out.empty() && !(numeric && prev_numeric) && !punct) out.push_back(' ');
        out += t;
        prev_numeric = numeric;
    }
    return out;
}

std::string Vocab::serialize() const {
    std::string out;
    for (const auto& t : tokens_) out += t + "\n";
    return out;
}

Vocab Vocab::parse(std::string_view text) {
    std::vector<std::string> tokens;
    std::istringstream is{std::string(text)};
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        tokens.push_back(line);
    }
    return Vocab(std::move(tokens));
}

void Vocab::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
    os << serialize();
}

Vocab Vocab::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open vocab '" + path.string() + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse(ss.str());
}

// ---- configs ----------------------------------------------------------------------

void DecoderConfig::validate() const {
    if (layers == 0 || dim == 0 || heads == 0 || max_len == 0 || vocab_size == 0 || mlp_ratio == 0) {
        throw ConfigError("decoder: all sizes must be positive");
    }
    if (dim % heads != 0) throw ConfigError("decoder: dim must be divisible by heads");
}

void LoRAConfig::validate(std::size_t dim) const {
    if (rank < 1 || rank >= dim) throw ConfigError("lora: rank must satisfy 1 <= r < dim");
    if (!(alpha > 0.0)) throw ConfigError("lora: alpha must be positive");
    if (targets.empty()) throw ConfigError("lora: no target matrices selected");
}

// ---- decoder ------------------------------------------------------------------------

namespace {

std::string layer_name(std::size_t l, const char* leaf) { return kLmPrefix + ".layer" + std::to_string(l) + "." + leaf; }

}  // namespace

Decoder Decoder::create(ParamSet& params, const DecoderConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t d = cfg.dim, hid = cfg.dim * cfg.mlp_ratio;
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    params.add(kLmPrefix + ".tok_emb", Tensor::randn({cfg.vocab_size, d}, rng, 0.5));
    params.add(kLmPrefix + ".pos_emb", Tensor::randn({cfg.max_len, d}, rng, 0.1));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        params.add(layer_name(l, "ln1.g"), Tensor::full({d}, 1.0));
        params.add(layer_name(l, "ln1.b"), Tensor::zeros({d}));
        for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) {
            params.add(layer_name(l, w), Tensor::randn({d, d}, rng, sd));
        }
        params.add(layer_name(l, "ln2.g"), Tensor::full({d}, 1.0));
        params.add(layer_name(l, "ln2.b"), Tensor::zeros({d}));
        params.add(layer_name(l, "mlp.w1"), Tensor::randn({d, hid}, rng, sd));
        params.add(layer_name(l, "mlp.b1"), Tensor::zeros({hid}));
        params.add(layer_name(l, "mlp.w2"), Tensor::randn({hid, d}, rng, 1.0 / std::sqrt(static_cast<double>(hid))));
        params.add(layer_name(l, "mlp.b2"), Tensor::zeros({d}));
    }
    params.add(kLmPrefix + ".ln_f.g", Tensor::full({d}, 1.0));
    params.add(kLmPrefix + ".ln_f.b", Tensor::zeros({d}));
    params.add(kLmPrefix + ".head.w", Tensor::randn({d, cfg.vocab_size}, rng, sd));
    params.add(kLmPrefix + ".head.b", Tensor::zeros({cfg.vocab_size}));
    return Decoder(params, cfg);
}

Decoder Decoder::bind(ParamSet& params, const DecoderConfig& cfg) {
    cfg.validate();
    const auto& emb = params.get(kLmPrefix + ".tok_emb");
    if (emb.shape() != Shape{cfg.vocab_size, cfg.dim}) throw ConfigError("decoder: embedding table shape mismatch");
    if (params.get(kLmPrefix + ".pos_emb").rows() < cfg.max_len) throw ConfigError("decoder: position table too short");
    for (std::size_t l = 0; l < cfg.layers; ++l) params.get(layer_name(l, "attn.wq"));
    return Decoder(params, cfg);
}

Tensor Decoder::embed_text(std::span<const std::size_t> ids) const {
    const auto& table = p(kLmPrefix + ".tok_emb");
    if (ids.empty()) return Tensor::zeros({0, cfg_.dim});
    for (auto id : ids) {
        if (id >= cfg_.vocab_size) throw IndexError("embed_text: token id " + std::to_string(id) + " outside vocabulary");
    }
    return gather_rows(table, ids);
}

Tensor Decoder::linear(const std::string& name, const Tensor& x) const {
    Tensor y = matmul(x, p(name));
    if (params_->contains(name + ".lora_a")) {
        const double s = p(name + ".lora_scale").item();
        y = add(y, scale(matmul(matmul(x, p(name + ".lora_b")), p(name + ".lora_a")), s));
    }
    return y;
}

Tensor Decoder::hidden(const EmbeddingSequence& h) const {
    const std::size_t len = h.size();
    if (len == 0) throw ContractError("decoder_forward: empty input");
    if (len > cfg_.max_len) {
        throw ContractError("decoder_forward: input length " + std::to_string(len) + " exceeds max_len " +
                            std::to_string(cfg_.max_len));
    }
    if (h.width() != cfg_.dim) throw ContractError("decoder_forward: token width does not match model dim");

    const std::size_t dh = cfg_.dim / cfg_.heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor x = add(h.tokens, slice_rows(p(kLmPrefix + ".pos_emb"), 0, len));
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        Tensor a = layer_norm(x, p(layer_name(l, "ln1.g")), p(layer_name(l, "ln1.b")));
        Tensor q = linear(layer_name(l, "attn.wq"), a);
        Tensor k = linear(layer_name(l, "attn.wk"), a);
        Tensor v = linear(layer_name(l, "attn.wv"), a);
        std::vector<Tensor> heads;
        for (std::size_t hd = 0; hd < cfg_.heads; ++hd) {
            Tensor qh = slice_cols(q, hd * dh, dh);
            Tensor kh = slice_cols(k, hd * dh, dh);
            Tensor vh = slice_cols(v, hd * dh, dh);
            Tensor probs = causal_softmax(scale(matmul(qh, transpose(kh)), att_scale));
            heads.push_back(matmul(probs, vh));
        }
        Tensor attn = heads.size() == 1 ? heads[0] : concat_cols(heads);
        x = add(x, linear(layer_name(l, "attn.wo"), attn));

        Tensor m = layer_norm(x, p(layer_name(l, "ln2.g")), p(layer_name(l, "ln2.b")));
        Tensor u = gelu(add_bias(linear(layer_name(l, "mlp.w1"), m), p(layer_name(l, "mlp.b1"))));
        x = add(x, add_bias(linear(layer_name(l, "mlp.w2"), u), p(layer_name(l, "mlp.b2"))));
    }
    return x;
}

Tensor Decoder::head(const Tensor& hidden_rows) const {
    Tensor f = layer_norm(hidden_rows, p(kLmPrefix + ".ln_f.g"), p(kLmPrefix + ".ln_f.b"));
    return add_bias(linear(kLmPrefix + ".head.w", f), p(kLmPrefix + ".head.b"));
}

Tensor Decoder::forward(const EmbeddingSequence& h) const { return head(hidden(h)); }

Tensor Decoder::autoregressive_loss(const EmbeddingSequence& h_in, std::span<const std::size_t> answer) const {
    if (answer.empty()) throw ContractError("autoregressive_loss: empty answer");
    if (h_in.size() == 0) throw ContractError("autoregressive_loss: empty conditioning sequence");
    const std::size_t m = answer.size();
    EmbeddingSequence full = splice_input(h_in, embed_text(answer.first(m - 1)));
    // Row t predicts token t+1: rows len(h_in)-1 ... len(h_in)+m-2 cover the answer.
    Tensor rows = slice_rows(hidden(full), h_in.size() - 1, m);
    return cross_entropy(head(rows), answer);
}

TokenIds Decoder::generate_greedy(const EmbeddingSequence& h_in, std::size_t max_new, std::size_t eos) const {
    NoGradGuard guard;
    TokenIds out;
    while (out.size() < max_new && h_in.size() + out.size() <= cfg_.max_len) {
        EmbeddingSequence seq = splice_input(h_in, embed_text(out));
        Tensor hid = hidden(seq);
        Tensor logits = head(slice_rows(hid, seq.size() - 1, 1));
        const auto row = logits.data();
        const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        if (best == eos) break;
        out.push_back(best);
    }
    return out;
}

EmbeddingSequence splice_input(const EmbeddingSequence& visual, const Tensor& text) {
    if (text.dim() != 2) throw ContractError("splice_input: text embeddings must be 2-D");
    if (visual.size() == 0) {
        EmbeddingSequence seq;
        seq.tokens = text;
        seq.tags.assign(text.rows(), BranchTag::Text);
        seq.dropped.assign(text.rows(), false);
        return seq;
    }
    if (visual.width() != text.cols()) {
        throw ContractError("splice_input: visual width " + std::to_string(visual.width()) +
                            " does not match text width " + std::to_string(text.cols()));
    }
    if (text.rows() == 0) return visual;
    EmbeddingSequence seq = visual;
    const Tensor parts[2] = {visual.tokens, text};
    seq.tokens = concat_rows(parts);
    seq.tags.insert(seq.tags.end(), text.rows(), BranchTag::Text);
    seq.dropped.insert(seq.dropped.end(), text.rows(), false);
    return seq;
}

// ---- LoRA --------------------------------------------------------------------------------

bool is_lora_name(std::string_view name) {
    auto ends = [&](std::string_view s) { return name.size() >= s.size() && name.substr(name.size() - s.size()) == s; };
    return ends(".lora_a") || ends(".lora_b") || ends(".lora_scale");
}

void lora_wrap(ParamSet& params, const LoRAConfig& cfg, Rng& rng) {
    for (const auto& target : cfg.targets) {
        std::vector<std::string> hits;
        for (const auto& name : params.names_with_prefix(kLmPrefix + ".")) {
            if (is_lora_name(name)) continue;
            if (name.size() >= target.size() && name.compare(name.size() - target.size(), target.size(), target) == 0 &&
                params.get(name).dim() == 2) {
                hits.push_back(name);
            }
        }
        if (hits.empty()) throw ConfigError("lora: target '" + target + "' matches no lm weight matrix");
        for (const auto& name : hits) {
            if (params.contains(name + ".lora_a")) throw ConfigError("lora: '" + name + "' is already wrapped");
            const auto& w = params.get(name);
            const std::size_t in = w.rows(), out = w.cols();
            cfg.validate(std::min(in, out));
            params.add(name + ".lora_a",
                       Tensor::randn({cfg.rank, out}, rng, 1.0 / std::sqrt(static_cast<double>(out))));
            params.add(name + ".lora_b", Tensor::zeros({in, cfg.rank}));
            params.add(name + ".lora_scale", Tensor::scalar(cfg.scaling()), true);
            params.freeze(name);
        }
    }
}

ParamSet lora_merge(const ParamSet& params) {
    ParamSet out;
    for (const auto& [name, t] : params.items()) {
        if (is_lora_name(name)) continue;
        if (!params.contains(name + ".lora_a")) {
            out.add(name, t.detach(), params.is_frozen(name));
            continue;
        }
        NoGradGuard guard;
        const double s = params.get(name + ".lora_scale").item();
        Tensor delta = scale(matmul(params.get(name + ".lora_b"), params.get(name + ".lora_a")), s);
        out.add(name, add(t, delta).detach(), false);
    }
    return out;
}

}  // namespace spatialgeo
