#include <cstdint>
#include <filesystem>
#include <map>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "automixer/corpus.hpp"
#include "automixer/model.hpp"
#include "automixer/simulator.hpp"
#include "support.hpp"

using namespace automixer;

namespace {

Corpus tiny_corpus(int vocab, std::size_t n, std::size_t length, std::uint64_t seed) {
    return testsupport::random_corpus(n, vocab, length, seed);
}

TaskProbe probe_from_samples(std::string task, std::vector<Sample> samples) {
    TaskProbe probe;
    probe.task_id = std::move(task);
    probe.probe_samples = std::move(samples);
    return probe;
}

Checkpoint eval_only_checkpoint(std::string id, std::int64_t step,
                                std::map<std::string, double> eval) {
    Checkpoint ckpt;
    ckpt.checkpoint_id = std::move(id);
    ckpt.step = step;
    ckpt.params = ModelParams::random_init(4, 2, step + 17);
    ckpt.eval = std::move(eval);
    return ckpt;
}

}  // namespace

TEST_CASE("checkpoint cadence: steps=2, every=1 yields checkpoints at 1 and 2",
          "[simulator]") {
    const auto corpus = tiny_corpus(8, 6, 5, 11);
    const TaskProbe probe = probe_from_samples("t0", {corpus.samples[0]});

    SimulationOptions options;
    options.steps = 2;
    options.batch_size = 2;
    options.checkpoint_every = 1;
    options.seed = 3;
    options.d_model = 4;

    const auto checkpoints = run_simulation(corpus, std::vector<TaskProbe>{probe}, options);
    REQUIRE(checkpoints.size() == 2);
    CHECK(checkpoints[0].step == 1);
    CHECK(checkpoints[1].step == 2);
    CHECK(checkpoints[0].checkpoint_id == "ckpt-000001");
    CHECK(checkpoints[1].checkpoint_id == "ckpt-000002");
    CHECK(checkpoints[0].eval.count("t0") == 1);
}

TEST_CASE("same seed reproduces byte-identical checkpoint parameter files", "[simulator]") {
    const auto corpus = tiny_corpus(12, 10, 6, 21);
    const TaskProbe probe = probe_from_samples("t0", {corpus.samples[1], corpus.samples[2]});

    SimulationOptions options;
    options.steps = 8;
    options.batch_size = 3;
    options.checkpoint_every = 4;
    options.seed = 99;
    options.d_model = 4;

    const auto a = run_simulation(corpus, std::vector<TaskProbe>{probe}, options);
    const auto b = run_simulation(corpus, std::vector<TaskProbe>{probe}, options);
    REQUIRE(a.size() == b.size());

    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "automixer-sim-test";
    fs::create_directories(dir);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto pa = (dir / ("a-" + a[i].checkpoint_id)).string();
        const auto pb = (dir / ("b-" + b[i].checkpoint_id)).string();
        save_params(a[i].params, pa);
        save_params(b[i].params, pb);
        CHECK(util::read_file(pa) == util::read_file(pb));
    }
    fs::remove_all(dir);
}

TEST_CASE("invalid cadence and empty corpus are rejected", "[simulator]") {
    const auto corpus = tiny_corpus(8, 4, 5, 5);
    const TaskProbe probe = probe_from_samples("t0", {corpus.samples[0]});
    SimulationOptions options;
    options.steps = 3;
    options.batch_size = 2;
    options.checkpoint_every = 2;  // does not divide 3
    options.d_model = 4;
    CHECK_THROWS_AS(run_simulation(corpus, std::vector<TaskProbe>{probe}, options),
                    config_error);

    options.steps = 2;
    options.checkpoint_every = 2;  // only one checkpoint
    CHECK_THROWS_AS(run_simulation(corpus, std::vector<TaskProbe>{probe}, options),
                    config_error);

    options.checkpoint_every = 1;
    CHECK_THROWS_AS(run_simulation(Corpus{{}, 8}, std::vector<TaskProbe>{probe}, options),
                    config_error);
}

TEST_CASE("evaluate_checkpoint scores a memorizing model at accuracy 1", "[simulator]") {
    // Hand-built params on V=2 that always prefer token 1: probe sequences
    // whose every next token is 1 must score exactly 1.0.
    ModelParams params;
    params.vocab_size = 2;
    params.d_model = 1;
    params.embed = {0.0, 0.0};
    params.hidden = {0.0};
    params.hidden_bias = {1.0};
    params.output = {-5.0, 5.0};

    const TaskProbe probe = probe_from_samples(
        "t0", {Sample{"v0", "heldout", {0, 1, 1}}, Sample{"v1", "heldout", {1, 1, 1, 1}}});
    CHECK(evaluate_checkpoint(params, probe) == 1.0);

    // Flip the preference: every transition misses.
    params.output = {5.0, -5.0};
    CHECK(evaluate_checkpoint(params, probe) == 0.0);
}

TEST_CASE("argmax ties resolve to the lowest token id", "[simulator]") {
    // All-zero output layer makes every logit equal, so argmax must pick 0.
    ModelParams params;
    params.vocab_size = 16;
    params.d_model = 2;
    params.embed.assign(32, 0.25);
    params.hidden.assign(4, 0.1);
    params.hidden_bias.assign(2, 0.0);
    params.output.assign(32, 0.0);

    std::vector<Sample> samples = {Sample{"v0", "heldout", {3, 0, 7, 0, 0, 5}}};
    const TaskProbe probe = probe_from_samples("t0", std::move(samples));
    // Next tokens: 0, 7, 0, 0, 5 -> three of five equal token id 0.
    CHECK(evaluate_checkpoint(params, probe) == Catch::Approx(3.0 / 5.0));
}

TEST_CASE("random-init checkpoint scores near chance on a large probe", "[simulator]") {
    const int vocab = 8;
    const auto params = ModelParams::random_init(vocab, 4, 1234);

    rng::Stream stream(77, "sim-eval-chance");
    std::vector<Sample> samples;
    const std::size_t seq_len = 51;  // 50 transitions per sample
    for (int i = 0; i < 20; ++i) {
        samples.push_back(testsupport::random_sample("v" + std::to_string(i), vocab, seq_len,
                                                     stream));
    }
    const TaskProbe probe = probe_from_samples("t0", std::move(samples));
    const double accuracy = evaluate_checkpoint(params, probe);  // 1000 transitions
    CHECK(accuracy >= 1.0 / vocab - 0.05);
    CHECK(accuracy <= 1.0 / vocab + 0.05);
}

TEST_CASE("training reduces loss on a single-rule corpus", "[simulator]") {
    // One deterministic rule (token t -> t+1 mod V) is learnable by the proxy.
    SyntheticTaskSpec spec;
    spec.task_id = "succ";
    spec.band_lo = 0;
    spec.band_hi = 8;
    spec.noise_rate = 0.0;
    for (int t = 0; t < 8; ++t) spec.next_token.push_back((t + 1) % 8);

    const std::vector<SyntheticTaskSpec> specs = {spec};
    const auto generated = generate_corpus(specs, 40, 0.0, 12, 5);
    SimulationOptions options;
    options.steps = 400;
    options.batch_size = 8;
    options.checkpoint_every = 200;
    options.learning_rate = 0.5;
    options.seed = 5;
    options.d_model = 8;

    const auto probe = generate_probe(spec, 16, 12, 6);
    const auto checkpoints =
        run_simulation(generated, std::vector<TaskProbe>{probe}, options);
    REQUIRE(checkpoints.size() == 2);
    CHECK(checkpoints.back().eval.at("succ") > 0.9);
}

TEST_CASE("progression table records the earliest peak and its step ratio", "[simulator]") {
    std::vector<Checkpoint> checkpoints;
    checkpoints.push_back(eval_only_checkpoint("ckpt-005000", 5000, {{"A", 0.9}, {"B", 0.2}}));
    checkpoints.push_back(eval_only_checkpoint("ckpt-050000", 50000, {{"A", 0.9}, {"B", 0.5}}));
    checkpoints.push_back(eval_only_checkpoint("ckpt-100000", 100000, {{"A", 0.3}, {"B", 0.8}}));

    const auto table = build_progression_table(checkpoints, 100000);
    REQUIRE(table.rows.size() == 2);

    const auto& a = table.rows[0];
    CHECK(a.task_id == "A");
    CHECK(a.best_step == 5000);  // tie at 0.9 between steps 5000 and 50000 -> earliest
    CHECK(a.ratio == Catch::Approx(0.05));

    const auto& b = table.rows[1];
    CHECK(b.task_id == "B");
    CHECK(b.best_step == 100000);  // strictly increasing -> last, ratio 100%
    CHECK(b.ratio == Catch::Approx(1.0));
}

TEST_CASE("progression table formats 5000 of 100000 as 5%", "[simulator]") {
    std::vector<Checkpoint> checkpoints;
    checkpoints.push_back(eval_only_checkpoint("ckpt-005000", 5000, {{"A", 0.9}}));
    checkpoints.push_back(eval_only_checkpoint("ckpt-100000", 100000, {{"A", 0.3}}));
    const auto table = build_progression_table(checkpoints, 100000);
    CHECK(format_ratio_percent(table.rows[0].ratio) == "5%");
    CHECK(render_progression_table(table, "proxy") == "run\tA\nproxy\t5%\n");
}

TEST_CASE("unevaluated checkpoint raises an integrity error", "[simulator]") {
    std::vector<Checkpoint> checkpoints;
    checkpoints.push_back(eval_only_checkpoint("ckpt-000010", 10, {{"A", 0.5}, {"B", 0.5}}));
    checkpoints.push_back(eval_only_checkpoint("ckpt-000020", 20, {{"A", 0.6}}));
    CHECK_THROWS_AS(build_progression_table(checkpoints, 20), integrity_error);
}

TEST_CASE("selection collapses duplicate best checkpoints", "[simulator]") {
    std::vector<Checkpoint> checkpoints;
    checkpoints.push_back(
        eval_only_checkpoint("ckpt-000040", 40, {{"A", 0.9}, {"B", 0.8}, {"C", 0.1}}));
    checkpoints.push_back(
        eval_only_checkpoint("ckpt-000080", 80, {{"A", 0.2}, {"B", 0.3}, {"C", 0.7}}));

    const auto table = build_progression_table(checkpoints, 80);
    const auto selected = select_task_checkpoints(table, checkpoints);

    REQUIRE(selected.checkpoints.size() == 2);  // {A,B} -> 40, C -> 80
    CHECK(selected.checkpoints[0].step == 40);
    CHECK(selected.checkpoints[1].step == 80);
    CHECK(selected.task_assignment.at("A") == "ckpt-000040");
    CHECK(selected.task_assignment.at("B") == "ckpt-000040");
    CHECK(selected.task_assignment.at("C") == "ckpt-000080");

    // alpha over steps {40, 80} = {1/3, 2/3}.
    CHECK(selected.alphas.at("ckpt-000040") == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(selected.alphas.at("ckpt-000080") == Catch::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("all tasks peaking at one checkpoint selects k=1 with alpha=[1]", "[simulator]") {
    std::vector<Checkpoint> checkpoints;
    checkpoints.push_back(eval_only_checkpoint("ckpt-000010", 10, {{"A", 0.9}, {"B", 0.9}}));
    checkpoints.push_back(eval_only_checkpoint("ckpt-000020", 20, {{"A", 0.1}, {"B", 0.2}}));
    const auto table = build_progression_table(checkpoints, 20);
    const auto selected = select_task_checkpoints(table, checkpoints);
    REQUIRE(selected.checkpoints.size() == 1);
    CHECK(selected.alphas.at("ckpt-000010") == 1.0);
}

TEST_CASE("blending factors match the step-normalized formula", "[simulator]") {
    const std::vector<std::int64_t> steps = {25000, 50000, 100000};
    const auto alphas = blending_factors(steps);
    REQUIRE(alphas.size() == 3);
    CHECK(alphas[0] == Catch::Approx(1.0 / 7.0).epsilon(1e-12));
    CHECK(alphas[1] == Catch::Approx(2.0 / 7.0).epsilon(1e-12));
    CHECK(alphas[2] == Catch::Approx(4.0 / 7.0).epsilon(1e-12));
    CHECK(alphas[0] + alphas[1] + alphas[2] == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("blending factors are scale invariant and permutation equivariant", "[simulator]") {
    const std::vector<std::int64_t> base = {300, 700, 1100};
    const std::vector<std::int64_t> scaled = {3000, 7000, 11000};
    const auto a = blending_factors(base);
    const auto b = blending_factors(scaled);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i] == Catch::Approx(b[i]).epsilon(1e-12));
    }

    const std::vector<std::int64_t> permuted = {1100, 300, 700};
    const auto c = blending_factors(permuted);
    CHECK(c[0] == Catch::Approx(a[2]).epsilon(1e-12));
    CHECK(c[1] == Catch::Approx(a[0]).epsilon(1e-12));
    CHECK(c[2] == Catch::Approx(a[1]).epsilon(1e-12));

    CHECK(blending_factors(std::vector<std::int64_t>{123}) == std::vector<double>{1.0});
    CHECK_THROWS_AS(blending_factors(std::vector<std::int64_t>{0, 5}), config_error);
    CHECK_THROWS_AS(blending_factors(std::vector<std::int64_t>{}), config_error);
}
