#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "spatialgeo/errors.hpp"
#include "spatialgeo/lm.hpp"

using namespace spatialgeo;
using testing::bit_equal;
using testing::weighted_sum;

namespace {

DecoderConfig small_config(std::size_t layers = 2, std::size_t vocab = 16) {
    DecoderConfig c;
    c.layers = layers;
    c.dim = 8;
    c.heads = 2;
    c.max_len = 24;
    c.vocab_size = vocab;
    c.mlp_ratio = 2;
    return c;
}

EmbeddingSequence visual_tokens(std::size_t n, std::size_t dim, Rng& rng) {
    return interleave(Tensor::randn({n, dim}, rng, 1.0), Tensor::randn({n, dim}, rng, 1.0));
}

void fill(Tensor& t, double v) {
    for (auto& x : t.mutable_data()) x = v;
}

}  // namespace

TEST_SUITE("lm") {

TEST_CASE("vocab specials, bijection and text round trip") {
    Vocab v = Vocab::standard();
    CHECK(v.token(0) == "<pad>");
    CHECK(v.token(v.eos()) == "<eos>");
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(v.id(v.token(i)) == i);
    TokenIds ids = v.encode("2.4 m");
    CHECK(ids.size() == 4);
    CHECK(v.decode(ids) == "2.4 m");
    CHECK(v.encode("what is the height of the object ?").back() == v.id("?"));
    CHECK(v.encode("zebra").front() == v.unk());
    CHECK(Vocab::parse(v.serialize()).tokens() == v.tokens());
    CHECK_THROWS_AS(Vocab({"<pad>", "<bos>", "<eos>", "<unk>", "a", "a"}), ConfigError);
    CHECK_THROWS_AS(Vocab({"a"}), ConfigError);
}

TEST_CASE("vocab file round trip") {
    auto dir = testing::scratch_dir("vocab");
    Vocab v = Vocab::standard();
    v.save(dir / "vocab.txt");
    CHECK(Vocab::load(dir / "vocab.txt").tokens() == v.tokens());
}

TEST_CASE("text embedding lookup") {
    ParamSet ps;
    Rng rng(1);
    Decoder d = Decoder::create(ps, small_config(), rng);
    CHECK(d.embed_text(TokenIds{}).shape() == Shape{0, 8});
    Tensor e = d.embed_text(TokenIds{5, 5, 7});
    for (std::size_t c = 0; c < 8; ++c) CHECK(e.at(0, c) == e.at(1, c));
    CHECK_THROWS_AS(d.embed_text(TokenIds{16}), IndexError);
}

TEST_CASE("embedding gradient touches only used rows") {
    ParamSet ps;
    Rng rng(2);
    Decoder d = Decoder::create(ps, small_config(), rng);
    EmbeddingSequence vis = visual_tokens(2, 8, rng);
    EmbeddingSequence h = splice_input(vis, d.embed_text(TokenIds{4, 9}));
    d.autoregressive_loss(h, TokenIds{6, 2}).backward();
    const Tensor& table = ps.get("lm.tok_emb");
    for (std::size_t r = 0; r < 16; ++r) {
        double mag = 0.0;
        for (std::size_t c = 0; c < 8; ++c) mag += std::abs(table.grad()[r * 8 + c]);
        // Rows 4 and 9 are in the prompt, 6 feeds the second answer step.
        CHECK((mag > 0.0) == (r == 4 || r == 9 || r == 6));
    }
}

TEST_CASE("splice keeps the visual block first") {
    Rng rng(3);
    EmbeddingSequence vis = visual_tokens(3, 8, rng);
    Tensor txt = Tensor::randn({4, 8}, rng, 1.0);
    EmbeddingSequence h = splice_input(vis, txt);
    CHECK(h.size() == 10);
    for (std::size_t i = 0; i < h.size(); ++i) CHECK((h.tags[i] == BranchTag::Text) == (i >= 6));
    EmbeddingSequence only = splice_input(EmbeddingSequence{}, txt);
    CHECK(bit_equal(only.tokens, txt));
    CHECK_THROWS_AS(splice_input(vis, Tensor::zeros({2, 5})), ContractError);
}

TEST_CASE("decoder is causal") {
    ParamSet ps;
    Rng rng(4);
    Decoder d = Decoder::create(ps, small_config(), rng);
    for (int trial = 0; trial < 5; ++trial) {
        EmbeddingSequence h = splice_input(EmbeddingSequence{}, Tensor::randn({6, 8}, rng, 1.0));
        Tensor base = d.forward(h);
        const std::size_t t = static_cast<std::size_t>(trial % 5);
        EmbeddingSequence p = h;
        std::vector<double> v(h.tokens.data().begin(), h.tokens.data().end());
        for (std::size_t c = 0; c < 8; ++c) v[(t + 1) * 8 + c] += 1.0;
        p.tokens = Tensor::from({6, 8}, v);
        Tensor pert = d.forward(p);
        for (std::size_t r = 0; r <= t; ++r)
            for (std::size_t c = 0; c < 16; ++c) CHECK(base.at(r, c) == pert.at(r, c));
    }
}

TEST_CASE("decoder shapes and limits") {
    ParamSet ps;
    Rng rng(5);
    Decoder d = Decoder::create(ps, small_config(), rng);
    EmbeddingSequence one = splice_input(EmbeddingSequence{}, Tensor::randn({1, 8}, rng, 1.0));
    CHECK(d.forward(one).shape() == Shape{1, 16});
    EmbeddingSequence too_long = splice_input(EmbeddingSequence{}, Tensor::randn({25, 8}, rng, 1.0));
    CHECK_THROWS_AS(d.forward(too_long), ContractError);
    DecoderConfig bad = small_config();
    bad.heads = 3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("one-layer decoder gradients") {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        ParamSet ps;
        Rng rng(seed);
        Decoder d = Decoder::create(ps, small_config(1), rng);
        EmbeddingSequence h = splice_input(EmbeddingSequence{}, Tensor::randn({5, 8}, rng, 1.0));
        Tensor w = Tensor::randn({5, 16}, rng, 1.0);
        auto f = [&](const Tensor& t) {
            EmbeddingSequence x = h;
            x.tokens = t;
            return weighted_sum(d.forward(x), w);
        };
        CHECK(finite_difference_check(f, h.tokens) < 1e-4);
        for (const char* name : {"lm.layer0.attn.wq", "lm.layer0.mlp.w1", "lm.layer0.ln1.g", "lm.head.w"}) {
            Tensor saved = ps.get(name);
            auto g = [&](const Tensor& t) {
                ps.get(name) = t;
                Tensor out = weighted_sum(d.forward(h), w);
                return out;
            };
            const double err = finite_difference_check(g, saved);
            ps.get(name) = saved;
            CHECK_MESSAGE(err < 1e-4, name);
        }
    }
}

TEST_CASE("autoregressive loss: uniform model, oracle, gradients") {
    ParamSet ps;
    Rng rng(6);
    Decoder d = Decoder::create(ps, small_config(), rng);
    EmbeddingSequence h = visual_tokens(3, 8, rng);
    TokenIds answer{7, 3, 2};

    Tensor saved_w = ps.get("lm.head.w").detach(), saved_b = ps.get("lm.head.b").detach();
    fill(ps.get("lm.head.w"), 0.0);
    fill(ps.get("lm.head.b"), 0.0);
    CHECK(d.autoregressive_loss(h, answer).item() == doctest::Approx(std::log(16.0)).epsilon(1e-14));
    std::copy(saved_w.data().begin(), saved_w.data().end(), ps.get("lm.head.w").mutable_data().begin());
    std::copy(saved_b.data().begin(), saved_b.data().end(), ps.get("lm.head.b").mutable_data().begin());

    // Naive oracle: full forward over [h ; answer[:-1]], then pick log-probs row by row.
    EmbeddingSequence full = splice_input(h, d.embed_text(TokenIds{7, 3}));
    Tensor logits = d.forward(full);
    double oracle = 0.0;
    for (std::size_t m = 0; m < 3; ++m) {
        const std::size_t row = h.size() - 1 + m;
        double z = 0.0;
        for (std::size_t c = 0; c < 16; ++c) z += std::exp(logits.at(row, c));
        oracle -= std::log(std::exp(logits.at(row, answer[m])) / z);
    }
    oracle /= 3.0;
    CHECK(std::abs(d.autoregressive_loss(h, answer).item() - oracle) < 1e-10);

    auto f = [&](const Tensor& t) {
        EmbeddingSequence x = h;
        x.tokens = t;
        return d.autoregressive_loss(x, answer);
    };
    CHECK(finite_difference_check(f, h.tokens) < 1e-4);
    CHECK_THROWS_AS(d.autoregressive_loss(h, TokenIds{}), ContractError);
}

TEST_CASE("loss is masked to answer positions") {
    ParamSet ps;
    Rng rng(7);
    Decoder d = Decoder::create(ps, small_config(), rng);
    EmbeddingSequence h = visual_tokens(3, 8, rng);
    TokenIds answer{5, 9};
    EmbeddingSequence full = splice_input(h, d.embed_text(TokenIds{5}));
    Tensor logits = Tensor::from({full.size(), 16}, [&] {
        Tensor l = d.forward(full);
        return std::vector<double>(l.data().begin(), l.data().end());
    }(), true);
    Tensor loss = cross_entropy(slice_rows(logits, h.size() - 1, 2), answer);
    CHECK(loss.item() == doctest::Approx(d.autoregressive_loss(h, answer).item()).epsilon(1e-12));
    loss.backward();
    for (std::size_t r = 0; r < full.size(); ++r) {
        double mag = 0.0;
        for (std::size_t c = 0; c < 16; ++c) mag += std::abs(logits.grad()[r * 16 + c]);
        CHECK((mag > 0.0) == (r >= h.size() - 1));
    }
}

TEST_CASE("greedy generation") {
    ParamSet ps;
    Rng rng(8);
    Decoder d = Decoder::create(ps, small_config(), rng);
    EmbeddingSequence h = visual_tokens(2, 8, rng);
    CHECK(d.generate_greedy(h, 0, 2).empty());
    CHECK(d.generate_greedy(h, 5, 2) == d.generate_greedy(h, 5, 2));

    fill(ps.get("lm.head.w"), 0.0);
    fill(ps.get("lm.head.b"), 0.0);
    ps.get("lm.head.b").mutable_data()[11] = 50.0;
    CHECK(d.generate_greedy(h, 3, 2) == TokenIds{11, 11, 11});
    ps.get("lm.head.b").mutable_data()[2] = 100.0;
    CHECK(d.generate_greedy(h, 3, 2).empty());
}

TEST_CASE("lora: identity at init, parameter count, merge equivalence") {
    ParamSet ps;
    Rng rng(9);
    DecoderConfig cfg = small_config();
    Decoder d = Decoder::create(ps, cfg, rng);
    EmbeddingSequence h = visual_tokens(3, 8, rng);
    Tensor before = d.forward(h);
    LoRAConfig lc;
    lc.rank = 2;
    lora_wrap(ps, lc, rng);
    CHECK(bit_equal(before, d.forward(h)));
    CHECK(ps.is_frozen("lm.layer0.attn.wq"));
    CHECK(ps.is_frozen("lm.layer0.attn.wq.lora_scale"));
    CHECK(ps.get("lm.layer0.attn.wq.lora_a").shape() == Shape{2, 8});
    CHECK(ps.get("lm.layer0.attn.wq.lora_b").shape() == Shape{8, 2});
    const auto per_target = ps.get("lm.layer0.attn.wq.lora_a").numel() + ps.get("lm.layer0.attn.wq.lora_b").numel();
    CHECK(per_target == 2 * lc.rank * cfg.dim);

    // Pretend training moved B off zero.
    for (const auto& name : ps.names())
        if (name.ends_with(".lora_b"))
            for (auto& v : ps.get(name).mutable_data()) v = rng.normal() * 0.3;
    Tensor unmerged = d.forward(h);
    ParamSet merged = lora_merge(ps);
    CHECK_FALSE(merged.contains("lm.layer0.attn.wq.lora_a"));
    Decoder dm = Decoder::bind(merged, cfg);
    CHECK(testing::max_abs_diff(unmerged, dm.forward(h)) <= 1e-9);
    CHECK_FALSE(bit_equal(before, unmerged));

    LoRAConfig bad;
    bad.targets = {"attn.nothing"};
    CHECK_THROWS_AS(lora_wrap(ps, bad, rng), ConfigError);
    bad = {};
    bad.rank = 8;
    CHECK_THROWS_AS(bad.validate(8), ConfigError);
}

}  // TEST_SUITE
