// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cstdio>
#include <string>
#include <vector>

#include <json.hpp>

#include "zlora/errors.hpp"
#include "zlora/router.hpp"
#include "zlora/runconfig.hpp"
#include "zlora/serialize.hpp"

using namespace zlora;

TEST_SUITE("runconfig") {

TEST_CASE("the default config is valid and fully populated") {
    const RunConfig rc = default_run_config();
    rc.validate();
    CHECK(rc.model.languages.size() == 12);
    CHECK(rc.variants.size() == 7);
    CHECK(rc.seeds == std::vector<std::uint64_t>{0, 1, 2, 3, 4});
    CHECK(rc.similarity == "default");
    CHECK(rc.data.profile.high == 2000);
    CHECK(rc.data.profile.low == 2);
    CHECK(rc.stage1.stage == 1);
    CHECK(rc.stage2.stage == 2);
}

TEST_CASE("serialization round trip is lossless") {
    RunConfig rc = default_run_config();
    rc.chunked = true;
    rc.data.noise_ratio = 0.05;
    rc.warm_start.flags.load_router = false;
    const nlohmann::json j1 = rc.to_json();
    const RunConfig back = RunConfig::from_json(j1);
    CHECK(back.to_json() == j1);
    CHECK(config_hash_hex(back) == config_hash_hex(rc));
    // from_json propagated the chunked flag into both stages
    CHECK(back.stage1.chunked);
    CHECK(back.stage2.chunked);
}

TEST_CASE("an empty document means the documented defaults") {
    const RunConfig rc = RunConfig::from_json(nlohmann::json::object());
    CHECK(config_hash_hex(rc) == config_hash_hex(default_run_config()));
}

TEST_CASE("unknown keys are rejected with their full path") {
    nlohmann::json j = nlohmann::json::object();
    j["data"]["profile"]["x"] = 1;
    CHECK_THROWS_WITH_AS(RunConfig::from_json(j), doctest::Contains("config.data.profile.x"),
                         ConfigError);

    nlohmann::json j2 = nlohmann::json::object();
    j2["model"]["lora"]["rank"] = 8;
    CHECK_THROWS_WITH_AS(RunConfig::from_json(j2), doctest::Contains("config.model.lora.rank"),
                         ConfigError);

    nlohmann::json j3 = nlohmann::json::object();
    j3["outdir"] = "x";
    CHECK_THROWS_WITH_AS(RunConfig::from_json(j3), doctest::Contains("config.outdir"),
                         ConfigError);
}

TEST_CASE("wrong value types are rejected with their path") {
    nlohmann::json j = nlohmann::json::object();
    j["stage1"]["steps"] = "ten";
    CHECK_THROWS_WITH_AS(RunConfig::from_json(j), doctest::Contains("config.stage1.steps"),
                         ConfigError);
}

TEST_CASE("the hash is 16 hex digits and sensitive to every field") {
    const RunConfig base = default_run_config();
    const std::string h = config_hash_hex(base);
    CHECK(h.size() == 16);
    CHECK(h.find_first_not_of("0123456789abcdef") == std::string::npos);

    RunConfig tweaked = base;
    tweaked.data.c_sp = 0.75;
    CHECK(config_hash_hex(tweaked) != h);
    tweaked = base;
    tweaked.seeds = {0, 1};
    CHECK(config_hash_hex(tweaked) != h);
}

TEST_CASE("variant tokens split into variant and warm-start flavor") {
    CHECK(parse_variant_token("Vanilla") == std::pair{Variant::Vanilla, false});
    CHECK(parse_variant_token("ZipperSoft+initB") == std::pair{Variant::ZipperSoft, true});
    CHECK(parse_variant_token("FlyLoRA") == std::pair{Variant::FlyLoRA, false});
    CHECK_THROWS_AS(parse_variant_token("ZipperSmooth"), ConfigError);
    CHECK_THROWS_AS(parse_variant_token("+initB"), ConfigError);
}

TEST_CASE("validation names the offending field") {
    RunConfig rc = default_run_config();
    rc.variants.clear();
    CHECK_THROWS_WITH_AS(rc.validate(), doctest::Contains("variants"), ConfigError);

    rc = default_run_config();
    rc.source_languages = {"zz"};
    CHECK_THROWS_WITH_AS(rc.validate(), doctest::Contains("zz"), ConfigError);

    rc = default_run_config();
    rc.data.tiers.erase("ja");
    CHECK_THROWS_WITH_AS(rc.validate(), doctest::Contains("tiers"), ConfigError);

    rc = default_run_config();
    rc.stage1.adapters_only = true;
    CHECK_THROWS_WITH_AS(rc.validate(), doctest::Contains("adapters_only"), ConfigError);
}

TEST_CASE("subset similarity takes the principal block by language") {
    const SimilarityTarget full = default_similarity();
    const SimilarityTarget sub = subset_similarity(full, {"ja", "ko", "en"});
    REQUIRE(sub.languages == std::vector<std::string>{"ja", "ko", "en"});
    // (ja, ko) anchor survives the restriction
    CHECK(sub.s(0, 1) == doctest::Approx(0.41));
    CHECK(sub.s(0, 2) == doctest::Approx(0.05));
    CHECK(sub.s(0, 0) == 1.0);

    CHECK_THROWS_WITH_AS(subset_similarity(full, {"en", "xx"}), doctest::Contains("xx"),
                         ConfigError);
}

TEST_CASE("similarity resolution covers identity, default, and files") {
    RunConfig rc = default_run_config();
    rc.similarity = "identity";
    const SimilarityTarget ident = resolve_similarity(rc);
    CHECK(ident.s(0, 0) == 1.0);
    CHECK(ident.s(0, 1) == 0.0);

    rc.similarity = "default";
    const SimilarityTarget def = resolve_similarity(rc);
    CHECK(def.languages == rc.model.languages);

    // A file with a superset of languages: the model's block is selected.
    rc.model.languages = {"ja", "ko"};
    rc.data.tiers = {{"ja", "high"}, {"ko", "low"}};
    rc.source_languages = {"ja"};
    const std::string path = std::string(ZLORA_REPO_DATA_DIR) + "/lid_similarity_default.json";
    rc.similarity = path;
    const SimilarityTarget from_file = resolve_similarity(rc);
    REQUIRE(from_file.languages == std::vector<std::string>{"ja", "ko"});
    CHECK(from_file.s(0, 1) == doctest::Approx(0.41));
}

TEST_CASE("stage blocks in a document cannot change their stage number") {
    // from_json stamps the numbers; a hand-built config with swapped stages
    // fails validation.
    RunConfig rc = default_run_config();
    rc.stage1.stage = 2;
    CHECK_THROWS_WITH_AS(rc.validate(), doctest::Contains("fixed stage numbers"), ConfigError);
}

} // TEST_SUITE
