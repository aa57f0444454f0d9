#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "automixer/mixer.hpp"
#include "automixer/rng.hpp"

using namespace automixer;

namespace {

DataGroup make_group(std::string id, std::vector<std::pair<double, std::int64_t>> members) {
    DataGroup group;
    group.group_id = std::move(id);
    int i = 0;
    for (const auto& [score, tokens] : members) {
        group.members.push_back({group.group_id + "-m" + std::to_string(i++), score, tokens});
    }
    return group;
}

DataGroup bulk_group(std::string id, int count, std::int64_t tokens_each) {
    std::vector<std::pair<double, std::int64_t>> members;
    for (int i = 0; i < count; ++i) members.push_back({1.0, tokens_each});
    return make_group(std::move(id), std::move(members));
}

Corpus corpus_with_scores(int n) {
    Corpus corpus;
    corpus.vocab_size = 4;
    for (int i = 0; i < n; ++i) {
        Sample s;
        s.id = "doc-" + std::to_string(i);
        s.source_id = "fixture";
        s.tokens = {0, 1, 2};
        corpus.samples.push_back(std::move(s));
    }
    return corpus;
}

}  // namespace

TEST_CASE("regroup keeps the top retention fraction by own score", "[mixer]") {
    const auto corpus = corpus_with_scores(4);
    std::map<std::string, std::map<std::string, double>> own;
    own["ckpt-a"] = {{"doc-0", 9.0}, {"doc-1", 7.0}, {"doc-2", 5.0}, {"doc-3", 1.0}};
    std::map<std::string, double> joint = {
        {"doc-0", 0.1}, {"doc-1", 0.9}, {"doc-2", 0.5}, {"doc-3", 0.5}};

    const auto groups = regroup(corpus, own, joint, 0.5);
    REQUIRE(groups.size() == 1);
    REQUIRE(groups[0].members.size() == 2);  // exactly ceil(0.5 * 4)
    // Membership = {doc-0, doc-1} by own score; order by joint score.
    CHECK(groups[0].members[0].sample_id == "doc-1");
    CHECK(groups[0].members[1].sample_id == "doc-0");
}

TEST_CASE("regroup with retention 1 keeps the whole corpus in every group", "[mixer]") {
    const auto corpus = corpus_with_scores(5);
    std::map<std::string, std::map<std::string, double>> own;
    std::map<std::string, double> joint;
    for (int i = 0; i < 5; ++i) {
        const auto id = "doc-" + std::to_string(i);
        own["ckpt-a"][id] = i;
        own["ckpt-b"][id] = -i;
        joint[id] = 0.5;
    }
    const auto groups = regroup(corpus, own, joint, 1.0);
    REQUIRE(groups.size() == 2);
    CHECK(groups[0].members.size() == 5);
    CHECK(groups[1].members.size() == 5);
}

TEST_CASE("regroup keeps exactly ceil(r*n) members and allows duplicates", "[mixer]") {
    const auto corpus = corpus_with_scores(5);
    std::map<std::string, std::map<std::string, double>> own;
    std::map<std::string, double> joint;
    for (int i = 0; i < 5; ++i) {
        const auto id = "doc-" + std::to_string(i);
        own["ckpt-a"][id] = i;        // top: doc-4, doc-3, doc-2
        own["ckpt-b"][id] = (i == 4) ? 10.0 : -i;  // top: doc-4, doc-0, doc-1
        joint[id] = i;
    }
    const auto groups = regroup(corpus, own, joint, 0.5);
    REQUIRE(groups[0].members.size() == 3);  // ceil(2.5)
    REQUIRE(groups[1].members.size() == 3);

    // doc-4 ranks top under both checkpoints: present in both groups.
    auto contains = [](const DataGroup& g, const std::string& id) {
        for (const auto& m : g.members) {
            if (m.sample_id == id) return true;
        }
        return false;
    };
    CHECK(contains(groups[0], "doc-4"));
    CHECK(contains(groups[1], "doc-4"));
}

TEST_CASE("regroup ties keep corpus order and bad inputs throw", "[mixer]") {
    const auto corpus = corpus_with_scores(3);
    std::map<std::string, std::map<std::string, double>> own;
    std::map<std::string, double> joint;
    for (int i = 0; i < 3; ++i) {
        const auto id = "doc-" + std::to_string(i);
        own["ckpt-a"][id] = 1.0;  // all tied
        joint[id] = 1.0;
    }
    const auto groups = regroup(corpus, own, joint, 2.0 / 3.0);
    REQUIRE(groups[0].members.size() == 2);
    CHECK(groups[0].members[0].sample_id == "doc-0");
    CHECK(groups[0].members[1].sample_id == "doc-1");

    CHECK_THROWS_AS(regroup(corpus, own, joint, 0.0), config_error);
    CHECK_THROWS_AS(regroup(corpus, own, joint, 1.5), config_error);

    own["ckpt-a"].erase("doc-2");
    CHECK_THROWS_AS(regroup(corpus, own, joint, 0.5), integrity_error);
}

TEST_CASE("influence density is the token-weighted mean score", "[mixer]") {
    CHECK(influence_density(make_group("g", {{1.0, 10}, {1.0, 990}})) == 1.0);
    CHECK(influence_density(make_group("g", {{1.0, 100}, {0.0, 300}})) ==
          Catch::Approx(0.25).epsilon(1e-12));
    CHECK(influence_density(make_group("g", {{0.37, 64}})) == Catch::Approx(0.37));
    CHECK_THROWS_AS(influence_density(DataGroup{"g", {}}), config_error);
}

TEST_CASE("min-max scaling maps scores onto [0,1]", "[mixer]") {
    const std::map<std::string, double> scores = {{"a", 2.0}, {"b", 4.0}, {"c", 6.0}};
    const auto scaled = scale_influences(scores);
    CHECK(scaled.at("a") == 0.0);
    CHECK(scaled.at("b") == Catch::Approx(0.5).epsilon(1e-12));
    CHECK(scaled.at("c") == 1.0);

    const std::map<std::string, double> unit = {{"a", 0.0}, {"b", 1.0}};
    const auto unchanged = scale_influences(unit);
    CHECK(unchanged.at("a") == 0.0);
    CHECK(unchanged.at("b") == 1.0);

    std::map<std::string, double> shifted;
    for (const auto& [id, s] : scores) shifted[id] = s + 123.5;
    const auto shifted_scaled = scale_influences(shifted);
    for (const auto& [id, s] : scaled) {
        CHECK(shifted_scaled.at(id) == Catch::Approx(s).margin(1e-12));
    }

    CHECK_THROWS_AS(scale_influences({{"a", 3.0}, {"b", 3.0}}), all_equal_error);
}

TEST_CASE("group scaling uses the union of members and keeps ordering", "[mixer]") {
    std::vector<DataGroup> groups;
    groups.push_back(make_group("ga", {{6.0, 10}, {2.0, 10}}));
    groups.push_back(make_group("gb", {{4.0, 10}, {2.0, 10}}));
    // Shared member id so the union treats it once.
    groups[1].members[1].sample_id = groups[0].members[1].sample_id;

    const auto scaled = scale_group_influences(groups);
    CHECK(scaled[0].members[0].joint_score == 1.0);   // 6 -> 1
    CHECK(scaled[0].members[1].joint_score == 0.0);   // 2 -> 0
    CHECK(scaled[1].members[0].joint_score == Catch::Approx(0.5));  // 4 -> 0.5
    // Descending joint order preserved under the monotone map.
    CHECK(scaled[0].members[0].joint_score > scaled[0].members[1].joint_score);
}

TEST_CASE("influence token product equals density times token total", "[mixer]") {
    CHECK(influence_token_product(make_group("g", {{0.0, 10}, {0.0, 20}})) == 0.0);
    CHECK(influence_token_product(make_group("g", {{1.0, 64}})) == 64.0);

    const auto group = make_group("g", {{0.9, 17}, {0.4, 55}, {0.1, 31}});
    const double expected = influence_density(group) * static_cast<double>(group.total_tokens());
    CHECK(influence_token_product(group) == Catch::Approx(expected).margin(1e-9));
}

TEST_CASE("sampling weights normalize densities", "[mixer]") {
    std::vector<DataGroup> groups;
    groups.push_back(make_group("ga", {{3.0, 10}}));  // rho = 3
    groups.push_back(make_group("gb", {{1.0, 99}}));  // rho = 1
    const auto spec = sampling_weights(groups);
    CHECK(spec.weights.at("ga") == Catch::Approx(0.75).epsilon(1e-12));
    CHECK(spec.weights.at("gb") == Catch::Approx(0.25).epsilon(1e-12));
    CHECK_FALSE(spec.uniform_fallback);

    const std::vector<DataGroup> single = {make_group("ga", {{0.4, 10}})};
    CHECK(sampling_weights(single).weights.at("ga") == 1.0);

    // Scaling all densities by a positive constant leaves weights unchanged.
    std::vector<DataGroup> scaled;
    scaled.push_back(make_group("ga", {{30.0, 10}}));
    scaled.push_back(make_group("gb", {{10.0, 99}}));
    const auto spec2 = sampling_weights(scaled);
    CHECK(spec2.weights.at("ga") == Catch::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("all-zero densities fall back to uniform weights", "[mixer]") {
    std::vector<DataGroup> groups;
    groups.push_back(make_group("ga", {{0.0, 10}}));
    groups.push_back(make_group("gb", {{0.0, 10}}));
    const auto spec = sampling_weights(groups);
    CHECK(spec.uniform_fallback);
    CHECK(spec.weights.at("ga") == Catch::Approx(0.5));
    CHECK(spec.weights.at("gb") == Catch::Approx(0.5));
}

TEST_CASE("percentile filter applies the nearest-rank threshold", "[mixer]") {
    std::map<std::string, double> scores;
    for (int i = 1; i <= 10; ++i) scores["doc-" + std::to_string(i)] = i;

    const auto retained = percentile_filter(scores, 50.0);
    // Nearest-rank p50 of 1..10 is 5; >= keeps {5..10}.
    REQUIRE(retained.size() == 6);
    for (const auto& id : retained) {
        CHECK(scores.at(id) >= 5.0);
    }

    CHECK(percentile_filter(scores, 0.0).size() == 10);

    std::map<std::string, double> constant = {{"a", 2.0}, {"b", 2.0}, {"c", 2.0}};
    CHECK(percentile_filter(constant, 90.0).size() == 3);

    CHECK_THROWS_AS(percentile_filter(scores, 100.0), config_error);
    CHECK_THROWS_AS(percentile_filter(scores, -1.0), config_error);
}

TEST_CASE("one ample group fills the manifest with the whole group", "[mixer]") {
    const auto group = bulk_group("ga", 12, 10);
    MixtureSpec spec;
    spec.weights["ga"] = 1.0;
    spec.token_budget = 10000;
    const std::vector<DataGroup> groups = {group};
    const auto manifest = sample_mixture(groups, spec, 7);
    CHECK(manifest.total_tokens == group.total_tokens());
    CHECK(manifest.entries.size() == 12);
    CHECK(manifest.group_tokens.at("ga") == 120);
}

TEST_CASE("draw shares track the weights within one sample length", "[mixer]") {
    std::vector<DataGroup> groups = {bulk_group("ga", 200, 10), bulk_group("gb", 200, 10)};
    MixtureSpec spec;
    spec.weights["ga"] = 0.75;
    spec.weights["gb"] = 0.25;
    spec.token_budget = 1000;
    const auto manifest = sample_mixture(groups, spec, 11);
    CHECK(manifest.total_tokens == 1000);
    CHECK(std::abs(manifest.group_tokens.at("ga") - 750) <= 10);
    CHECK(std::abs(manifest.group_tokens.at("gb") - 250) <= 10);
}

TEST_CASE("a capped group redistributes its weight proportionally", "[mixer]") {
    std::vector<DataGroup> groups = {bulk_group("ga", 200, 10), bulk_group("gb", 200, 10),
                                     bulk_group("gc", 200, 10)};
    MixtureSpec spec;
    spec.weights["ga"] = 0.5;
    spec.weights["gb"] = 0.25;
    spec.weights["gc"] = 0.25;
    spec.group_caps["ga"] = 100;
    spec.token_budget = 1000;
    const auto manifest = sample_mixture(groups, spec, 13);
    CHECK(manifest.total_tokens == 1000);
    CHECK(manifest.group_tokens.at("ga") == 100);
    CHECK(std::abs(manifest.group_tokens.at("gb") - 450) <= 10);
    CHECK(std::abs(manifest.group_tokens.at("gc") - 450) <= 10);
}

TEST_CASE("the draw never exceeds the budget and skips oversized samples", "[mixer]") {
    const auto group = make_group("ga", {{1.0, 900}, {1.0, 900}});
    MixtureSpec spec;
    spec.weights["ga"] = 1.0;
    spec.token_budget = 1000;
    const std::vector<DataGroup> groups = {group};
    const auto manifest = sample_mixture(groups, spec, 3);
    CHECK(manifest.total_tokens == 900);
    CHECK(manifest.entries.size() == 1);
}

TEST_CASE("an unfillable budget produces an empty manifest", "[mixer]") {
    const auto group = make_group("ga", {{1.0, 50}});
    MixtureSpec spec;
    spec.weights["ga"] = 1.0;
    spec.token_budget = 10;
    const std::vector<DataGroup> groups = {group};
    const auto manifest = sample_mixture(groups, spec, 3);
    CHECK(manifest.entries.empty());
    CHECK(manifest.total_tokens == 0);
}

TEST_CASE("the mixture draw is a pure function of groups, spec, and seed", "[mixer]") {
    std::vector<DataGroup> groups = {bulk_group("ga", 50, 8), bulk_group("gb", 50, 8)};
    MixtureSpec spec;
    spec.weights["ga"] = 0.6;
    spec.weights["gb"] = 0.4;
    spec.token_budget = 300;
    const auto a = sample_mixture(groups, spec, 21);
    const auto b = sample_mixture(groups, spec, 21);
    CHECK(a == b);

    CHECK_THROWS_AS(sample_mixture(groups, MixtureSpec{{{"ga", 0.9}, {"gb", 0.4}}, 300},
                                   21),
                    config_error);
    CHECK_THROWS_AS(sample_mixture(groups, MixtureSpec{{{"ga", 0.5}, {"gb", 0.5}}, 0}, 21),
                    config_error);
}

TEST_CASE("subsampling splits the budget by aggregate influence", "[mixer]") {
    std::vector<DataGroup> groups;
    groups.push_back(bulk_group("ga", 5, 50));  // scores 1.0 -> aggregate 250
    auto gb = bulk_group("gb", 5, 50);
    for (auto& m : gb.members) m.joint_score = 0.5;  // aggregate 125
    groups.push_back(gb);

    // Total 500 tokens > budget 300; allocations 200 and 100.
    const auto trimmed = subsample_to_budget(groups, 300);
    CHECK(trimmed[0].total_tokens() == 200);
    CHECK(trimmed[1].total_tokens() == 100);
    CHECK(trimmed[0].members.size() == 4);
    CHECK(trimmed[1].members.size() == 2);

    // Under budget: unchanged.
    const auto untouched = subsample_to_budget(groups, 1000);
    CHECK(untouched[0].members.size() == 5);
    CHECK(untouched[1].members.size() == 5);

    // Zero-aggregate group gets nothing when others carry influence.
    std::vector<DataGroup> mixed;
    mixed.push_back(bulk_group("ga", 5, 50));
    auto dead = bulk_group("gb", 5, 50);
    for (auto& m : dead.members) m.joint_score = 0.0;
    mixed.push_back(dead);
    const auto result = subsample_to_budget(mixed, 200);
    CHECK(result[0].total_tokens() == 200);
    CHECK(result[1].members.empty());

    CHECK_THROWS_AS(subsample_to_budget(groups, 0), config_error);
}

TEST_CASE("bucket stats aggregate per percentile range", "[mixer]") {
    const std::vector<double> scores = {5.0, 1.0, 3.0, 2.0, 4.0};
    const std::vector<std::int64_t> tokens = {50, 10, 30, 20, 40};
    const std::vector<BucketRange> whole = {{0.0, 100.0}};
    const auto rows = bucket_stats(scores, tokens, {}, whole);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].count == 5);
    CHECK(rows[0].mean_tokens == Catch::Approx(30.0));
    CHECK(rows[0].sum_tokens == 150);
    CHECK(rows[0].mean_score == Catch::Approx(3.0));

    // Two buckets split the ascending ranking: {1,2} low, {3,4,5} high...
    // with n=5, ranks 1..2 have pct 20,40 <= 40? Buckets p0-40 / p40-100.
    const std::vector<BucketRange> halves = {{0.0, 40.0}, {40.0, 100.0}};
    const auto split = bucket_stats(scores, tokens, {}, halves);
    CHECK(split[0].count == 2);
    CHECK(split[1].count == 3);
    CHECK(split[0].mean_score == Catch::Approx(1.5));
    CHECK(split[1].mean_score == Catch::Approx(4.0));
}

TEST_CASE("bucket stats handle ties, gaps, and quality columns", "[mixer]") {
    // Constant scores: stable ranking assigns by input order, sizes differ <= 1.
    const std::vector<double> constant(11, 7.0);
    std::vector<std::int64_t> tokens(11, 1);
    const std::vector<BucketRange> halves = {{0.0, 50.0}, {50.0, 100.0}};
    const auto rows = bucket_stats(constant, tokens, {}, halves);
    CHECK(rows[0].count == 5);
    CHECK(rows[1].count == 6);

    // Narrow ranges on a tiny input leave the first bucket empty.
    const std::vector<double> two = {1.0, 2.0};
    const std::vector<std::int64_t> two_tokens = {3, 4};
    const std::vector<BucketRange> quarters = {{0.0, 25.0}, {25.0, 50.0}, {50.0, 100.0}};
    const auto sparse = bucket_stats(two, two_tokens, {}, quarters);
    CHECK(sparse[0].count == 0);
    CHECK(sparse[1].count == 1);
    CHECK(sparse[2].count == 1);

    // Quality column is averaged alongside.
    const std::vector<double> quality = {0.2, 0.8};
    const std::vector<BucketRange> whole = {{0.0, 100.0}};
    const auto with_quality = bucket_stats(two, two_tokens, quality, whole);
    CHECK(with_quality[0].has_quality);
    CHECK(with_quality[0].mean_quality == Catch::Approx(0.5));

    const std::vector<BucketRange> overlapping = {{0.0, 60.0}, {40.0, 100.0}};
    CHECK_THROWS_AS(bucket_stats(two, two_tokens, {}, overlapping), config_error);

    const auto table = render_bucket_table(sparse);
    CHECK(table.find("p0-p25\t0\t-\t-\t0") != std::string::npos);
}

TEST_CASE("overlap analysis compares percentile buckets across rankings", "[mixer]") {
    std::map<std::string, double> a, b, reversed;
    for (int i = 0; i < 100; ++i) {
        const auto id = "doc-" + std::to_string(i);
        a[id] = i;
        b[id] = i;
        reversed[id] = -i;
    }
    for (const double pct : overlap_analysis(a, b, 4)) {
        CHECK(pct == 100.0);
    }
    for (const double pct : overlap_analysis(a, reversed, 2)) {
        CHECK(pct == 0.0);
    }

    std::map<std::string, double> mismatched = a;
    mismatched.erase("doc-0");
    mismatched["doc-X"] = 1.0;
    CHECK_THROWS_AS(overlap_analysis(a, mismatched, 2), integrity_error);
}

TEST_CASE("independent rankings overlap near the null rate", "[mixer]") {
    rng::Stream stream(97, "overlap-null");
    std::map<std::string, double> a, b;
    for (int i = 0; i < 1000; ++i) {
        const auto id = "doc-" + std::to_string(i);
        a[id] = stream.unit();
        b[id] = stream.unit();
    }
    const auto overlap = overlap_analysis(a, b, 10);
    double mean = 0.0;
    for (const double pct : overlap) mean += pct / 10.0;
    CHECK(mean >= 7.0);
    CHECK(mean <= 13.0);
}

TEST_CASE("manifest files round-trip with weights, caps, and totals", "[mixer]") {
    std::vector<DataGroup> groups = {bulk_group("ga", 30, 10), bulk_group("gb", 30, 10)};
    MixtureSpec spec;
    spec.weights["ga"] = 0.6;
    spec.weights["gb"] = 0.4;
    spec.group_caps["ga"] = 120;
    spec.token_budget = 400;
    const auto manifest = sample_mixture(groups, spec, 31);

    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "automixer-mixer-test";
    fs::create_directories(dir);
    const auto path = (dir / "manifest.txt").string();
    save_manifest(manifest, spec, path);

    const auto loaded = load_manifest(path);
    CHECK(loaded.spec.token_budget == 400);
    CHECK(loaded.spec.group_caps.at("ga") == 120);
    CHECK(loaded.spec.weights.at("ga") == Catch::Approx(0.6).epsilon(1e-11));
    CHECK(loaded.manifest == manifest);

    util::write_file(path, "token_budget=100\n---\ndoc-1 ga 50\ndoc-2 ga 40\n");
    CHECK_THROWS_AS(load_manifest(path), integrity_error);
    util::write_file(path, "nonsense header\n---\n");
    CHECK_THROWS_AS(load_manifest(path), parse_error);
    fs::remove_all(dir);
}
