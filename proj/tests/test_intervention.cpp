#include <doctest.h>

#include <cmath>

#include "pti/errors.hpp"
#include "pti/generate.hpp"
#include "pti/intervention.hpp"
#include "test_helpers.hpp"

using namespace pti;
using namespace pti::test;

namespace {

struct Fixture {
    ModelConfig cfg;
    Weights weights;
    ModalitySegmentedSequence seq;
    SteeringDirections dirs;

    explicit Fixture(uint64_t seed, size_t layers = 2, size_t heads = 2, size_t head_dim = 3,
                     size_t seq_len = 7, size_t visual = 4, bool test_mode = false) {
        cfg.num_layers = layers;
        cfg.num_heads = heads;
        cfg.head_dim = head_dim;
        cfg.hidden_dim = heads * head_dim;
        cfg.vocab_size = 8;
        cfg.max_seq_len = 64;
        cfg.rng_seed = seed;
        cfg.test_mode = test_mode;
        weights = test_mode ? make_test_weights(cfg) : init_weights(cfg);

        Rng rng(seed + 1000);
        seq = random_sequence(rng, seq_len, cfg.hidden_dim, visual);

        dirs.model_fingerprint = weights_fingerprint(weights);
        dirs.num_layers = layers;
        dirs.num_heads = heads;
        dirs.head_dim = head_dim;
        dirs.sample_count = 1;
        const size_t width = heads * head_dim;
        for (size_t l = 0; l < layers; ++l) {
            auto rand_dir = [&]() {
                std::vector<double> v(width);
                for (double& x : v) x = rng.normal();
                return v;
            };
            dirs.visual_key.push_back(rand_dir());
            dirs.visual_value.push_back(rand_dir());
            dirs.textual_key.push_back(rand_dir());
            dirs.textual_value.push_back(rand_dir());
        }
    }

    KVCache fresh_cache() const { return prefill(weights, seq).cache; }
};

InterventionConfig lambdas(double k_img, double v_img, double k_txt, double v_txt,
                           NormalizationMode norm = NormalizationMode::off) {
    InterventionConfig cfg;
    cfg.lambda_k_img = k_img;
    cfg.lambda_v_img = v_img;
    cfg.lambda_k_txt = k_txt;
    cfg.lambda_v_txt = v_txt;
    cfg.normalization_mode = norm;
    return cfg;
}

}  // namespace

TEST_CASE("zero lambdas leave the cache bit-identical") {
    Fixture fx(11);
    KVCache vanilla = fx.fresh_cache();
    KVCache touched = vanilla;
    for (NormalizationMode norm :
         {NormalizationMode::off, NormalizationMode::per_token_norm_preserving}) {
        KVCache cache = vanilla;
        apply_pti(cache, fx.dirs, lambdas(0, 0, 0, 0, norm), fx.seq);
        CHECK(cache_bitwise_equal(cache, touched));
        CHECK(cache.visual_applied);
        CHECK(cache.textual_applied);
    }
}

TEST_CASE("value-only visual intervention shifts exactly the targeted rows") {
    Fixture fx(13);
    KVCache before = fx.fresh_cache();
    KVCache after = before;
    apply_visual_intervention(after, fx.dirs, lambdas(0.0, 1.0, 0, 0), fx.seq.visual_indices);

    for (size_t l = 0; l < fx.cfg.num_layers; ++l) {
        // keys untouched bit for bit
        CHECK(bitwise_equal(before.layers[l].keys, after.layers[l].keys));
        for (size_t h = 0; h < fx.cfg.num_heads; ++h) {
            for (size_t pos = 0; pos < fx.seq.length(); ++pos) {
                auto b = before.layers[l].value_row(h, pos);
                auto a = after.layers[l].value_row(h, pos);
                const bool visual = pos < fx.seq.visual_indices.size();
                for (size_t c = 0; c < fx.cfg.head_dim; ++c) {
                    if (visual) {
                        const double expect = b[c] + fx.dirs.visual_value[l][h * fx.cfg.head_dim + c];
                        CHECK(a[c] == doctest::Approx(expect).epsilon(1e-12));
                    } else {
                        CHECK(a[c] == b[c]);
                    }
                }
            }
        }
    }
}

TEST_CASE("normalization restores every modified row norm") {
    Fixture fx(17);
    KVCache before = fx.fresh_cache();
    KVCache after = before;
    apply_pti(after, fx.dirs, lambdas(0.7, 0.4, 0.7, 0.4, NormalizationMode::per_token_norm_preserving),
              fx.seq);

    double worst = 0.0;
    for (size_t l = 0; l < fx.cfg.num_layers; ++l) {
        for (size_t h = 0; h < fx.cfg.num_heads; ++h) {
            for (size_t pos = 0; pos < fx.seq.length(); ++pos) {
                const double kb = l2_norm(before.layers[l].key_row(h, pos));
                const double ka = l2_norm(after.layers[l].key_row(h, pos));
                const double vb = l2_norm(before.layers[l].value_row(h, pos));
                const double va = l2_norm(after.layers[l].value_row(h, pos));
                worst = std::max(worst, std::fabs(ka - kb) / kb);
                worst = std::max(worst, std::fabs(va - vb) / vb);
            }
        }
    }
    CHECK(worst < 1e-9);

    // independent add-then-rescale on a snapshot of the original cache
    for (size_t l = 0; l < fx.cfg.num_layers; ++l) {
        for (size_t h = 0; h < fx.cfg.num_heads; ++h) {
            for (size_t pos : fx.seq.visual_indices) {
                std::vector<double> row(before.layers[l].key_row(h, pos).begin(),
                                        before.layers[l].key_row(h, pos).end());
                const double old_norm = l2_norm(row);
                for (size_t c = 0; c < row.size(); ++c) {
                    row[c] += 0.7 * fx.dirs.visual_key[l][h * fx.cfg.head_dim + c];
                }
                const double new_norm = l2_norm(row);
                for (double& v : row) v *= old_norm / new_norm;
                auto actual = after.layers[l].key_row(h, pos);
                for (size_t c = 0; c < row.size(); ++c) {
                    CHECK(std::fabs(actual[c] - row[c]) < 1e-12);
                }
            }
        }
    }
}

TEST_CASE("last_token_only mode modifies a single position per layer") {
    Fixture fx(19);
    KVCache before = fx.fresh_cache();
    KVCache after = before;
    InterventionConfig cfg = lambdas(0.5, 0.5, 0.5, 0.5);
    cfg.textual_position_mode = TextualPositionMode::last_token_only;
    apply_textual_intervention(after, fx.dirs, cfg, fx.seq.textual_indices);

    const size_t last = fx.seq.length() - 1;
    for (size_t l = 0; l < fx.cfg.num_layers; ++l) {
        for (size_t pos = 0; pos < fx.seq.length(); ++pos) {
            for (size_t h = 0; h < fx.cfg.num_heads; ++h) {
                auto kb = before.layers[l].key_row(h, pos);
                auto ka = after.layers[l].key_row(h, pos);
                bool same = true;
                for (size_t c = 0; c < fx.cfg.head_dim; ++c) same &= (kb[c] == ka[c]);
                CHECK(same == (pos != last));
            }
        }
    }
}

TEST_CASE("all_textual mode shifts each textual value row by lambda * direction") {
    Fixture fx(23, 1, 2, 3, 6, 3);  // one layer, 3 textual rows
    KVCache before = fx.fresh_cache();
    KVCache after = before;
    apply_textual_intervention(after, fx.dirs, lambdas(0, 0, 0, 0.8), fx.seq.textual_indices);

    for (size_t pos : fx.seq.textual_indices) {
        for (size_t h = 0; h < fx.cfg.num_heads; ++h) {
            auto b = before.layers[0].value_row(h, pos);
            auto a = after.layers[0].value_row(h, pos);
            for (size_t c = 0; c < fx.cfg.head_dim; ++c) {
                CHECK(a[c] == doctest::Approx(b[c] + 0.8 * fx.dirs.textual_value[0][h * 3 + c])
                                  .epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("visual and textual interventions commute bit-exactly") {
    for (uint64_t seed : {3ull, 4ull, 5ull}) {
        Fixture fx(seed);
        InterventionConfig cfg =
            lambdas(0.5, 0.5, 0.5, 0.5, NormalizationMode::per_token_norm_preserving);

        KVCache visual_first = fx.fresh_cache();
        apply_visual_intervention(visual_first, fx.dirs, cfg, fx.seq.visual_indices);
        apply_textual_intervention(visual_first, fx.dirs, cfg, fx.seq.textual_indices);

        KVCache textual_first = fx.fresh_cache();
        apply_textual_intervention(textual_first, fx.dirs, cfg, fx.seq.textual_indices);
        apply_visual_intervention(textual_first, fx.dirs, cfg, fx.seq.visual_indices);

        CHECK(cache_bitwise_equal(visual_first, textual_first));

        KVCache combined = fx.fresh_cache();
        apply_pti(combined, fx.dirs, cfg, fx.seq);
        CHECK(cache_bitwise_equal(combined, visual_first));
    }
}

TEST_CASE("apply_pti matches a standalone reference on both equations") {
    Fixture fx(3);
    InterventionConfig cfg =
        lambdas(0.5, 0.5, 0.5, 0.5, NormalizationMode::per_token_norm_preserving);
    KVCache before = fx.fresh_cache();
    KVCache after = before;
    apply_pti(after, fx.dirs, cfg, fx.seq);

    // reference: raw loops over the serialized arrays, visual and textual
    // additions plus per-row renormalization
    auto reference_row = [&](std::span<const double> row, std::span<const double> dir,
                             double lambda) {
        std::vector<double> out(row.begin(), row.end());
        const double old_norm = l2_norm(out);
        for (size_t c = 0; c < out.size(); ++c) out[c] += lambda * dir[c];
        const double new_norm = l2_norm(out);
        if (new_norm > 0.0) {
            for (double& v : out) v *= old_norm / new_norm;
        }
        return out;
    };

    for (size_t l = 0; l < fx.cfg.num_layers; ++l) {
        for (size_t h = 0; h < fx.cfg.num_heads; ++h) {
            const size_t dh = fx.cfg.head_dim;
            for (size_t pos = 0; pos < fx.seq.length(); ++pos) {
                const bool visual = pos < fx.seq.visual_indices.size();
                std::span<const double> kd(
                    (visual ? fx.dirs.visual_key : fx.dirs.textual_key)[l].data() + h * dh, dh);
                std::span<const double> vd(
                    (visual ? fx.dirs.visual_value : fx.dirs.textual_value)[l].data() + h * dh, dh);
                auto k_expect = reference_row(before.layers[l].key_row(h, pos), kd, 0.5);
                auto v_expect = reference_row(before.layers[l].value_row(h, pos), vd, 0.5);
                CHECK(max_abs_diff(after.layers[l].key_row(h, pos), k_expect) < 1e-12);
                CHECK(max_abs_diff(after.layers[l].value_row(h, pos), v_expect) < 1e-12);
            }
        }
    }
}

TEST_CASE("double application is a hard error") {
    Fixture fx(29);
    KVCache cache = fx.fresh_cache();
    InterventionConfig cfg = lambdas(0.1, 0.1, 0.1, 0.1);
    apply_visual_intervention(cache, fx.dirs, cfg, fx.seq.visual_indices);
    CHECK_THROWS_AS(apply_visual_intervention(cache, fx.dirs, cfg, fx.seq.visual_indices),
                    std::runtime_error);
    apply_textual_intervention(cache, fx.dirs, cfg, fx.seq.textual_indices);
    CHECK_THROWS_AS(apply_textual_intervention(cache, fx.dirs, cfg, fx.seq.textual_indices),
                    std::runtime_error);
}

TEST_CASE("fingerprint mismatch is rejected") {
    Fixture fx(31);
    KVCache cache = fx.fresh_cache();
    SteeringDirections wrong = fx.dirs;
    wrong.model_fingerprint = "0000000000000000";
    CHECK_THROWS_AS(
        apply_visual_intervention(cache, wrong, lambdas(0.1, 0, 0, 0), fx.seq.visual_indices),
        fingerprint_error);
}

TEST_CASE("targets beyond the prefill origin are rejected") {
    Fixture fx(37);
    KVCache cache = fx.fresh_cache();
    std::vector<size_t> bad = {fx.seq.length()};
    CHECK_THROWS_AS(apply_visual_intervention(cache, fx.dirs, lambdas(0.1, 0, 0, 0), bad),
                    std::invalid_argument);
}

TEST_CASE("tie flags are validated at construction") {
    InterventionConfig cfg = lambdas(0.3, 0.2, 0.5, 0.2);
    cfg.tie_k = true;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.lambda_k_txt = 0.3;
    CHECK_NOTHROW(cfg.validate());
    cfg.tie_v = true;
    CHECK_NOTHROW(cfg.validate());
    cfg.lambda_v_txt = 0.9;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("value-only steering keeps attention rows bit-identical while logits move") {
    // single layer isolates the key/value decoupling: with untouched keys the
    // probability rows depend only on the replayed inputs
    Fixture fx(41, /*layers=*/1, /*heads=*/2, /*head_dim=*/4, /*seq_len=*/6, /*visual=*/3);
    InterventionConfig cfg = lambdas(0.0, 0.9, 0.0, 0.9);

    KVCache vanilla = fx.fresh_cache();
    KVCache steered = fx.fresh_cache();
    apply_pti(steered, fx.dirs, cfg, fx.seq);

    // teacher-forced replay of the same input stream through both caches
    Rng rng(99);
    bool logits_differ = false;
    for (size_t step = 0; step < 8; ++step) {
        std::vector<double> x(fx.cfg.hidden_dim);
        for (double& v : x) v = rng.normal();
        DecodeResult a = decode_step(fx.weights, vanilla, x, true);
        DecodeResult b = decode_step(fx.weights, steered, x, true);
        for (size_t l = 0; l < fx.cfg.num_layers; ++l) {
            for (size_t h = 0; h < fx.cfg.num_heads; ++h) {
                CHECK(bitwise_equal(a.attention_rows[l][h], b.attention_rows[l][h]));
            }
        }
        if (!bitwise_equal(a.logits, b.logits)) logits_differ = true;
    }
    CHECK(logits_differ);
}

TEST_CASE("key steering strictly increases the perturbed position's attention") {
    // test mode, single head: adding delta * q_hat to one cached key raises
    // that position's probability monotonically
    Fixture fx(43, /*layers=*/1, /*heads=*/1, /*head_dim=*/4, /*seq_len=*/5, /*visual=*/3,
               /*test_mode=*/true);
    const std::vector<double> q_hat = {0.5, 0.5, 0.5, 0.5};  // unit
    const size_t target = 1;

    double previous = -1.0;
    for (double delta : {0.1, 0.5, 1.0}) {
        SteeringDirections dirs = fx.dirs;
        dirs.visual_key[0].assign(q_hat.begin(), q_hat.end());
        KVCache cache = fx.fresh_cache();
        apply_visual_intervention(cache, dirs, lambdas(delta, 0, 0, 0), {target});

        DecodeResult res = decode_step(fx.weights, cache, q_hat, true);
        const double prob = res.attention_rows[0][0][target];
        CHECK(prob > previous);
        previous = prob;
    }
}

TEST_CASE("untargeted positions are bit-identical after any intervention") {
    Rng seeds(4242);
    for (int trial = 0; trial < 5; ++trial) {
        Fixture fx(seeds.gen());
        InterventionConfig cfg = lambdas(0.3, 0.6, 0.3, 0.6,
                                         trial % 2 ? NormalizationMode::per_token_norm_preserving
                                                   : NormalizationMode::off);
        cfg.textual_position_mode =
            trial % 2 ? TextualPositionMode::last_token_only : TextualPositionMode::all_textual;

        KVCache before = fx.fresh_cache();
        KVCache after = before;
        apply_visual_intervention(after, fx.dirs, cfg, fx.seq.visual_indices);

        for (size_t l = 0; l < fx.cfg.num_layers; ++l) {
            for (size_t h = 0; h < fx.cfg.num_heads; ++h) {
                for (size_t pos : fx.seq.textual_indices) {
                    CHECK(max_abs_diff(before.layers[l].key_row(h, pos),
                                       after.layers[l].key_row(h, pos)) == 0.0);
                    CHECK(max_abs_diff(before.layers[l].value_row(h, pos),
                                       after.layers[l].value_row(h, pos)) == 0.0);
                }
            }
        }
    }
}

TEST_CASE("grid search picks the documented winner") {
    SUBCASE("singleton grid") {
        auto grid = std::vector<InterventionConfig>{lambdas(0.3, 0.3, 0.3, 0.3)};
        GridSearchResult res = grid_search_lambdas(grid, [](const InterventionConfig&) { return 7.0; });
        CHECK(res.best_score == 7.0);
        CHECK(res.best.lambda_k_img == 0.3);
        CHECK(res.table.size() == 1);
    }

    SUBCASE("analytic maximum at the origin") {
        std::vector<InterventionConfig> grid;
        for (double k : {0.0, 1.0}) {
            for (double v : {0.0, 1.0}) grid.push_back(lambdas(k, v, k, v));
        }
        GridSearchResult res = grid_search_lambdas(grid, [](const InterventionConfig& c) {
            return -c.lambda_k_img * c.lambda_k_img - c.lambda_v_img * c.lambda_v_img;
        });
        CHECK(res.best.lambda_k_img == 0.0);
        CHECK(res.best.lambda_v_img == 0.0);
        CHECK(res.table.size() == 4);
    }

    SUBCASE("ties go to the earliest grid entry") {
        std::vector<InterventionConfig> grid = {lambdas(0.1, 0, 0.1, 0), lambdas(0.9, 0, 0.9, 0)};
        GridSearchResult res = grid_search_lambdas(grid, [](const InterventionConfig&) { return 1.0; });
        CHECK(res.best_index == 0);
        CHECK(res.best.lambda_k_img == 0.1);
    }

    SUBCASE("empty grid is rejected") {
        CHECK_THROWS_AS(grid_search_lambdas({}, [](const InterventionConfig&) { return 0.0; }),
                        std::invalid_argument);
    }
}

TEST_CASE("default tied grid covers 0..1 in 0.1 steps") {
    auto values = default_lambda_values();
    CHECK(values.size() == 11);
    CHECK(values.front() == 0.0);
    CHECK(values.back() == 1.0);
    auto grid = make_tied_grid(values, TextualPositionMode::all_textual,
                               NormalizationMode::per_token_norm_preserving);
    CHECK(grid.size() == 121);
    CHECK(grid[0].lambda_k_img == 0.0);  // vanilla sits first for tie-breaks
    CHECK(grid[0].lambda_v_img == 0.0);
    for (const auto& cfg : grid) CHECK_NOTHROW(cfg.validate());
}
