#include <algorithm>
#include <map>
#include <set>

#include <gtest/gtest.h>

#include "corestack/common/log.hpp"
#include "corestack/ingest/histogram.hpp"
#include "corestack/ingest/split.hpp"
#include "corestack/ingest/strips.hpp"
#include "corestack/ingest/synth.hpp"
#include "test_util.hpp"

using namespace corestack;
using namespace corestack::ingest;

namespace {

data::DatasetManifest random_manifest(std::size_t n, int n_wells, Rng& rng) {
    data::DatasetManifest m;
    const auto& s = data::ClassScheme::nine_class();
    for (std::size_t i = 0; i < n; ++i) {
        data::PatchRecord r;
        r.well_id = "well" + std::to_string(rng.below(static_cast<std::uint64_t>(n_wells)));
        r.image_id = r.well_id + "_img";
        r.y_offset = static_cast<int>(i) * 20;
        r.patch_id = patch_id_for(r.image_id, r.y_offset);
        r.width = 50;
        r.class_id = s.id_at(rng.below(s.size()));
        m.records.push_back(r);
    }
    return m;
}

SynthCorpusConfig small_synth() {
    SynthCorpusConfig c;
    c.n_wells = 3;
    c.images_per_well = 1;
    c.height = 240;
    c.width = 64;
    c.interval_height = {40, 90};
    c.holes_per_image = {1, 2};
    return c;
}

}  // namespace

TEST(Strips, CountExamples) {
    EXPECT_EQ(strip_count(100), 1);
    EXPECT_EQ(strip_count(119), 1);
    EXPECT_EQ(strip_count(1000), 46);
    EXPECT_EQ(strip_count(99), 0);
    EXPECT_EQ(strip_count(0), 0);
    const auto recs = cut_strips("img", "w", 1000, 64);
    ASSERT_EQ(recs.size(), 46u);
    EXPECT_EQ(recs.front().y_offset, 0);
    EXPECT_EQ(recs.back().y_offset, 900);
    EXPECT_EQ(recs.back().width, 64);
    EXPECT_EQ(recs.back().patch_id, "img@900");
}

TEST(Strips, CountMatchesEnumerationOracle) {
    Rng rng(7);
    for (int trial = 0; trial < 2000; ++trial) {
        const int H = static_cast<int>(rng.range(0, 5000));
        StripCutConfig cfg{static_cast<int>(rng.range(1, 300)), static_cast<int>(rng.range(1, 120))};
        std::vector<int> offsets;
        for (int y = 0; y + cfg.strip_height <= H; y += cfg.stride) offsets.push_back(y);
        const auto recs = cut_strips("a", "w", H, 10, cfg);
        ASSERT_EQ(recs.size(), offsets.size()) << "H=" << H;
        for (std::size_t k = 0; k < recs.size(); ++k) {
            ASSERT_EQ(recs[k].y_offset, offsets[k]);
            ASSERT_EQ(recs[k].height, cfg.strip_height);
        }
    }
}

TEST(Strips, RejectsBadConfig) {
    EXPECT_THROW(strip_count(100, {0, 20}), PreconditionError);
    EXPECT_THROW(strip_count(100, {100, 0}), PreconditionError);
}

TEST(Strips, AdjacentStripsShareOverlapRows) {
    auto corpus = synth_corpus(small_synth());
    const auto& img = corpus.images.front();
    const StripCutConfig cfg;
    const auto recs = cut_strips(img, cfg);
    ASSERT_GE(recs.size(), 2u);
    for (std::size_t k = 0; k + 1 < recs.size(); ++k) {
        const auto a = img.pixels.crop_rows(recs[k].y_offset, recs[k].height);
        const auto b = img.pixels.crop_rows(recs[k + 1].y_offset, recs[k + 1].height);
        const int shared = cfg.strip_height - cfg.stride;
        for (int r = 0; r < shared; ++r) {
            const auto ra = a.row(r + cfg.stride);
            const auto rb = b.row(r);
            ASSERT_TRUE(std::equal(ra.begin(), ra.end(), rb.begin(), rb.end()));
        }
    }
}

TEST(AssignClass, Examples) {
    const auto& nine = data::ClassScheme::nine_class();
    const auto& six = data::ClassScheme::six_class();
    data::PatchRecord r;
    r.image_id = "img";
    r.y_offset = 100;
    std::vector<data::LithologyInterval> ivs{{"img", 100, 300, 2}};
    EXPECT_EQ(assign_class(r, ivs, nine).class_id, 2);
    r.y_offset = 400;
    EXPECT_EQ(assign_class(r, ivs, six).class_id, 999);
    EXPECT_EQ(assign_class(r, ivs, nine).class_id, 0);
}

TEST(AssignClass, CenterOnBoundaryBelongsToLowerInterval) {
    data::PatchRecord r;
    r.image_id = "img";
    r.y_offset = 50;  // center 100
    std::vector<data::LithologyInterval> ivs{{"img", 0, 100, 1}, {"img", 100, 200, 5}};
    EXPECT_EQ(assign_class(r, ivs, data::ClassScheme::nine_class()).class_id, 5);
}

TEST(AssignClass, OverlapAndForeignImageAreErrors) {
    const auto& nine = data::ClassScheme::nine_class();
    data::PatchRecord r;
    r.image_id = "img";
    std::vector<data::LithologyInterval> overlap{{"img", 0, 80, 1}, {"img", 40, 120, 2}};
    EXPECT_THROW(assign_class(r, overlap, nine), ValidationError);
    std::vector<data::LithologyInterval> foreign{{"other", 0, 80, 1}};
    EXPECT_THROW(assign_class(r, foreign, nine), PreconditionError);
}

TEST(AssignClass, MatchesPointScanOracle) {
    const auto& nine = data::ClassScheme::nine_class();
    Rng rng(11);
    for (int trial = 0; trial < 500; ++trial) {
        const int H = static_cast<int>(rng.range(100, 1500));
        // Disjoint intervals with gaps.
        std::vector<data::LithologyInterval> ivs;
        for (int y = static_cast<int>(rng.range(0, 50)); y < H;) {
            const int len = static_cast<int>(rng.range(1, 200));
            ivs.push_back({"img", y, std::min(H, y + len), nine.id_at(rng.below(nine.size()))});
            y += len + static_cast<int>(rng.range(0, 60));
        }
        rng.shuffle(std::span<data::LithologyInterval>(ivs));
        std::vector<int> label(static_cast<std::size_t>(2 * H), 0);  // half-pixel resolution
        for (const auto& iv : ivs)
            for (int h = 2 * iv.y_from; h < 2 * iv.y_to; ++h) label[static_cast<std::size_t>(h)] = iv.class_id;
        for (const auto& rec : cut_strips("img", "w", H, 10)) {
            const int center2 = 2 * rec.y_offset + rec.height;
            ASSERT_EQ(assign_class(rec, ivs, nine).class_id, label[static_cast<std::size_t>(center2)]);
        }
    }
}

TEST(BuildManifest, CutsAndLabels) {
    std::vector<data::ImageMeta> images{{"a", "a.png", "W1", 300, 40}, {"b", "b.png", "W2", 100, 40}};
    std::vector<data::LithologyInterval> ivs{{"a", 0, 150, 3}, {"b", 0, 100, 6}};
    const auto m = build_manifest(images, ivs, data::SchemeName::nine_class);
    ASSERT_EQ(m.records.size(), 11u + 1u);
    EXPECT_EQ(m.records[0].class_id, 3);
    EXPECT_EQ(m.records[5].class_id, 0);  // center 150 is outside [0,150)
    EXPECT_EQ(m.records.back().class_id, 6);
    EXPECT_EQ(m.records.back().well_id, "W2");
    std::vector<data::LithologyInterval> stray{{"zzz", 0, 10, 1}};
    EXPECT_THROW(build_manifest(images, stray, data::SchemeName::nine_class), NotFoundError);
}

TEST(SplitRandom, TwentyRecords) {
    Rng rng(1);
    const auto m = split_strip_random(random_manifest(20, 3, rng), {}, 42);
    const auto h = class_histogram(m);
    EXPECT_EQ(h.total(data::Split::train), 14u);
    EXPECT_EQ(h.total(data::Split::val), 3u);
    EXPECT_EQ(h.total(data::Split::test), 3u);
    EXPECT_EQ(m.split_mode, data::SplitMode::strip_random);
    EXPECT_EQ(m.seed, 42u);
}

TEST(SplitRandom, DeterministicAndSeedSensitive) {
    Rng rng(2);
    const auto base = random_manifest(200, 3, rng);
    const auto a = split_strip_random(base, {}, 5);
    const auto b = split_strip_random(base, {}, 5);
    const auto c = split_strip_random(base, {}, 6);
    std::vector<data::Split> sa, sb, sc;
    for (std::size_t i = 0; i < base.records.size(); ++i) {
        sa.push_back(a.records[i].split);
        sb.push_back(b.records[i].split);
        sc.push_back(c.records[i].split);
    }
    EXPECT_EQ(sa, sb);
    EXPECT_NE(sa, sc);
}

TEST(SplitRandom, LargeNFractions) {
    Rng rng(3);
    const auto m = split_strip_random(random_manifest(100000, 5, rng), {}, 9);
    std::map<data::Split, double> n;
    for (const auto& r : m.records) n[r.split] += 1;
    EXPECT_NEAR(n[data::Split::train] / 1e5, 0.70, 1e-3);
    EXPECT_NEAR(n[data::Split::val] / 1e5, 0.15, 1e-3);
    EXPECT_NEAR(n[data::Split::test] / 1e5, 0.15, 1e-3);
    EXPECT_EQ(n[data::Split::unassigned], 0);
}

TEST(SplitRandom, CountsFollowFloorRule) {
    for (std::size_t n = 3; n < 400; ++n) {
        const auto c = split_counts(n, {});
        EXPECT_EQ(c.train, n * 70 / 100) << n;
        EXPECT_EQ(c.val, n * 15 / 100) << n;
        EXPECT_EQ(c.train + c.val + c.test, n);
    }
}

TEST(SplitRandom, Preconditions) {
    Rng rng(4);
    EXPECT_THROW(split_strip_random(random_manifest(2, 2, rng), {}, 1), PreconditionError);
    EXPECT_THROW(split_strip_random(random_manifest(10, 2, rng), {0.5, 0.5, 0.5}, 1), PreconditionError);
}

TEST(SplitWell, ThreeWells) {
    data::DatasetManifest m;
    for (const char* w : {"A", "B", "C"})
        for (int k = 0; k < 4; ++k)
            m.records.push_back({std::string(w) + std::to_string(k), std::string(w) + "_img", w, k * 20, 100, 30, 1,
                                 data::Split::unassigned});
    const auto s = split_well_held_out(m, {"C"}, {"B"});
    for (const auto& r : s.records) {
        const auto want = r.well_id == "A" ? data::Split::train : r.well_id == "B" ? data::Split::val : data::Split::test;
        EXPECT_EQ(r.split, want);
    }
    EXPECT_TRUE(held_out_wells_disjoint(s));
    EXPECT_EQ(s.split_mode, data::SplitMode::well_held_out);

    EXPECT_THROW(split_well_held_out(m, {"C"}, {"C"}), PreconditionError);
    EXPECT_THROW(split_well_held_out(m, {"B", "C"}, {"A"}), PreconditionError);
    EXPECT_THROW(split_well_held_out(m, {}, {"A"}), PreconditionError);
    try {
        split_well_held_out(m, {"Q"}, {"B"});
        FAIL();
    } catch (const NotFoundError& e) {
        EXPECT_NE(std::string(e.what()).find("'Q'"), std::string::npos);
    }
}

TEST(SplitWell, RandomCorporaHaveNoWellOverlap) {
    Rng rng(12);
    for (int trial = 0; trial < 200; ++trial) {
        const int n_wells = static_cast<int>(rng.range(3, 9));
        auto m = random_manifest(static_cast<std::size_t>(rng.range(30, 300)), n_wells, rng);
        auto wells = wells_of(m);
        if (wells.size() < 3) continue;
        std::vector<std::string> w(wells.begin(), wells.end());
        rng.shuffle(std::span<std::string>(w));
        const auto s = split_well_held_out(m, {w[0]}, {w[1]});
        std::map<data::Split, std::set<std::string>> by_split;
        for (const auto& r : s.records) by_split[r.split].insert(r.well_id);
        for (auto a : {data::Split::train, data::Split::val})
            for (const auto& id : by_split[a]) ASSERT_FALSE(by_split[data::Split::test].contains(id));
        ASSERT_TRUE(held_out_wells_disjoint(s));
    }
}

TEST(Histogram, EmptyManifestIsAllZero) {
    data::DatasetManifest m;
    m.scheme = data::SchemeName::six_class;
    const auto h = class_histogram(m);
    for (const auto& [split, counts] : h.counts) {
        EXPECT_EQ(counts.size(), 6u);
        for (const auto& [id, n] : counts) EXPECT_EQ(n, 0u);
    }
}

TEST(Histogram, SumsAndPermutationInvariance) {
    Rng rng(5);
    auto m = split_strip_random(random_manifest(500, 4, rng), {}, 3);
    const auto h = class_histogram(m);
    EXPECT_EQ(h.total(data::Split::train) + h.total(data::Split::val) + h.total(data::Split::test), 500u);
    for (int trial = 0; trial < 20; ++trial) {
        rng.shuffle(std::span<data::PatchRecord>(m.records));
        ASSERT_EQ(class_histogram(m), h);
    }
    const auto chart = render_histogram(h, "classes");
    EXPECT_GT(chart.rows(), 0);
    EXPECT_EQ(chart.channels(), 3);
}

TEST(Histogram, ReferenceCountsCoverSchemes) {
    for (const auto& [ref, scheme] : {std::pair{&reference_counts::six_class, &data::ClassScheme::six_class()},
                                      std::pair{&reference_counts::nine_class, &data::ClassScheme::nine_class()}}) {
        ASSERT_EQ(ref->size(), scheme->size());
        for (const auto& c : scheme->classes()) EXPECT_TRUE(ref->contains(c.id));
    }
    EXPECT_EQ(reference_counts::six_class.at(999), 5646u);
    EXPECT_EQ(reference_counts::nine_class.at(7), 770u);
}

TEST(Synth, ThreeWellsOneImageEach) {
    const auto c = synth_corpus(small_synth());
    ASSERT_EQ(c.images.size(), 3u);
    std::set<std::string> wells;
    for (const auto& img : c.images) wells.insert(img.well_id);
    EXPECT_EQ(wells.size(), 3u);
}

TEST(Synth, NoHolesRange) {
    auto cfg = small_synth();
    cfg.holes_per_image = {0, 0};
    EXPECT_TRUE(synth_corpus(cfg).annotations.holes.empty());
}

TEST(Synth, DeterministicGivenSeed) {
    auto hash = [](const SynthCorpus& c) {
        std::uint64_t h = 0;
        for (const auto& img : c.images) h = mix64(h, fnv1a_bytes(img.pixels.pixels()));
        return h;
    };
    auto cfg = small_synth();
    const auto a = synth_corpus(cfg), b = synth_corpus(cfg);
    EXPECT_EQ(hash(a), hash(b));
    EXPECT_EQ(a.annotations, b.annotations);
    cfg.texture_seed = 2;
    EXPECT_NE(hash(a), hash(synth_corpus(cfg)));
}

TEST(Synth, HolesAreSentinelAndIntervalsTile) {
    auto cfg = small_synth();
    const auto c = synth_corpus(cfg);
    EXPECT_FALSE(c.annotations.holes.empty());
    for (const auto& h : c.annotations.holes) {
        const auto* meta = c.annotations.find_image(h.image_id);
        ASSERT_NE(meta, nullptr);
        data::validate_hole(h, meta->height, meta->width, "hole");
        const auto& circ = h.circle();
        const auto& img = std::find_if(c.images.begin(), c.images.end(),
                                       [&](const data::CoreImage& i) { return i.image_id == h.image_id; })
                              ->pixels;
        const int y = static_cast<int>(circ.cy), x = static_cast<int>(circ.cx);
        for (int ch = 0; ch < 3; ++ch) EXPECT_EQ(img(y, x, ch), cfg.sentinel[static_cast<std::size_t>(ch)]);
    }
    for (const auto& img : c.images) {
        const auto ivs = c.annotations.intervals_of(img.image_id);
        int y = 0;
        for (const auto& iv : ivs) {
            EXPECT_EQ(iv.y_from, y);
            y = iv.y_to;
        }
        EXPECT_EQ(y, img.height());
    }
}

TEST(Synth, WellsDifferInAppearance) {
    SynthCorpusConfig cfg;
    cfg.n_wells = 3;
    cfg.images_per_well = 1;
    cfg.height = 200;
    cfg.width = 64;
    cfg.holes_per_image = {0, 0};
    cfg.interval_height = {200, 200};
    cfg.class_weights = {0, 0, 0, 0, 0, 1, 0, 0, 0};  // everything class 4
    const auto c = synth_corpus(cfg);
    std::vector<double> means;
    for (const auto& img : c.images) {
        double s = 0;
        for (auto v : img.pixels.pixels()) s += v;
        means.push_back(s / static_cast<double>(img.pixels.size()));
    }
    EXPECT_GT(*std::max_element(means.begin(), means.end()) - *std::min_element(means.begin(), means.end()), 3.0);
}

TEST(Synth, ConfigRoundTripAndValidation) {
    auto cfg = small_synth();
    cfg.class_weights = {1, 1, 1, 1, 1, 1, 1, 0.01, 0.01};
    const nlohmann::json j = cfg;
    const auto back = synth_config_from_json(j);
    EXPECT_EQ(nlohmann::json(back), j);
    auto bad = j;
    bad["n_wells"] = 2;
    EXPECT_THROW(synth_config_from_json(bad), PreconditionError);
    bad = j;
    bad["class_weights"] = {1, 2};
    EXPECT_THROW(synth_config_from_json(bad), PreconditionError);
}

TEST(Synth, WriteCorpusReloads) {
    corestack::testing::TempDir dir;
    const auto cfg = small_synth();
    const auto c = synth_corpus(cfg);
    write_corpus(c, cfg, dir.path());
    const auto set = data::load_annotations(data::read_text_file(dir.path() / "annotations.json"));
    EXPECT_EQ(data::canonicalize(set), data::canonicalize(c.annotations));
    const auto table = data::load_intervals_csv(data::read_text_file(dir.path() / "intervals.csv"));
    EXPECT_EQ(table.intervals.size(), c.intervals.size());
    const auto img = io::read_rgb(dir.path() / "images" / (c.images[0].image_id + ".png"));
    EXPECT_EQ(img, c.images[0].pixels);
}

TEST(Downsample, HitsTargetSharesAndKeepsOtherSplits) {
    Rng rng(3);
    const auto m = split_strip_random(random_manifest(2000, 4, rng), {}, 5);
    const auto d = downsample_classes(m, {{6, 0.002}, {7, 0.01}}, data::Split::train, 9);
    const auto before = class_histogram(m), after = class_histogram(d);
    const auto& tr = after.counts.at(data::Split::train);
    const double total = static_cast<double>(after.total(data::Split::train));
    EXPECT_NEAR(tr.at(6) / total, 0.002, 1.0 / total);
    EXPECT_NEAR(tr.at(7) / total, 0.01, 1.0 / total);
    for (int id : {-1, 0, 1, 2, 3, 4, 5}) EXPECT_EQ(tr.at(id), before.counts.at(data::Split::train).at(id));
    for (auto s : {data::Split::val, data::Split::test}) EXPECT_EQ(after.counts.at(s), before.counts.at(s));
    EXPECT_EQ(d, downsample_classes(m, {{6, 0.002}, {7, 0.01}}, data::Split::train, 9));
}

TEST(Downsample, KeepsAtLeastOneRecord) {
    Rng rng(4);
    const auto m = split_strip_random(random_manifest(200, 3, rng), {}, 1);
    const auto d = downsample_classes(m, {{6, 1e-6}}, data::Split::train, 2);
    EXPECT_EQ(class_histogram(d).counts.at(data::Split::train).at(6), 1u);
}

TEST(Downsample, Preconditions) {
    Rng rng(5);
    const auto m = random_manifest(50, 3, rng);
    EXPECT_THROW(downsample_classes(m, {{999, 0.01}}, data::Split::train, 1), ValidationError);
    EXPECT_THROW(downsample_classes(m, {{6, 0.0}}, data::Split::train, 1), PreconditionError);
    EXPECT_THROW(downsample_classes(m, {{6, 0.6}, {7, 0.5}}, data::Split::train, 1), PreconditionError);
}
