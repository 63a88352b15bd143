// SPDX-License-Identifier: Apache-2.0
#include "mosr/checkpoint.hpp"
#include "mosr/io.hpp"

#include "support.hpp"

#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

using namespace mosr;
namespace fs = std::filesystem;

TEST_CASE("sha256 matches the published test vector", "[io]") {
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("format_double round-trips", "[io]") {
    Rng rng(1);
    for (int i = 0; i < 200; ++i) {
        const double x = rng.normal(0.0, 1e3) * std::pow(10.0, static_cast<double>(rng.below(20)) - 10.0);
        CHECK(std::stod(format_double(x)) == x);
    }
    CHECK(format_double(0.5) == "0.5");
}

TEST_CASE("int lists", "[io]") {
    CHECK(parse_int_list("2, 3") == std::vector<int>{2, 3});
    CHECK(parse_int_list("") == std::vector<int>{});
    CHECK(join_ints({4, 5, 6}) == "4,5,6");
    CHECK_THROWS_AS(parse_int_list("1,x"), InputError);
}

TEST_CASE("key-value config parsing", "[io]") {
    const auto kv = KeyValueConfig::parse("# comment\n\nalpha = 1.5\n  name=abc  \nflag = off\ncount = 7\n");
    CHECK(kv.get_double("alpha", 0.0) == 1.5);
    CHECK(kv.get("name") == "abc");
    CHECK_FALSE(kv.get_bool("flag", true));
    CHECK(kv.get_int("count", 0) == 7);
    CHECK(kv.get_int("missing", 3) == 3);
    CHECK(kv.unknown_keys({"alpha", "name", "flag"}) == std::vector<std::string>{"count"});
    CHECK_THROWS_AS(kv.get_int("alpha", 0), InputError);
    CHECK_THROWS_AS(kv.get_bool("name", false), InputError);

    try {
        KeyValueConfig::parse("a = 1\nbroken line\n");
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
    }
    CHECK_THROWS_AS(KeyValueConfig::parse("a = 1\na = 2\n"), ParseError);
    CHECK(KeyValueConfig::parse(kv.to_string()).values() == kv.values());
}

TEST_CASE("rng state serializes", "[io]") {
    Rng a(42);
    for (int i = 0; i < 17; ++i) a.next_u64();
    Rng b(0);
    b.deserialize(a.serialize());
    CHECK(a == b);
    for (int i = 0; i < 10; ++i) CHECK(a.normal() == b.normal());
    CHECK_THROWS_AS(b.deserialize("garbage"), ValidationError);
}

TEST_CASE("checkpoints round-trip bit-exactly", "[io]") {
    const auto path = fs::temp_directory_path() / "mosr_io_test.ckpt";
    auto model = attach_adapters(TransformerModel(ModelConfig{}), 4, 10.0);
    Rng rng(9);
    test::randomize_adapters(model, rng, 0.3);
    Mat extra(2, 3);
    extra << 1.0 / 3.0, -0.0, 1e-300, 5, 6, 7;
    save_checkpoint(path, model, {{"note", "x"}}, {{"thing", extra}});
    const auto back = load_checkpoint(path);
    CHECK(back.model.config() == model.config());
    CHECK(back.model.base() == model.base());
    CHECK(back.model.adapters() == model.adapters());
    CHECK(back.meta.at("note") == "x");
    CHECK(back.extra.at("thing") == extra);

    save_checkpoint(path.string() + "2", back.model, back.meta, back.extra);
    CHECK(sha256_file(path) == sha256_file(path.string() + "2"));

    // Truncation and corruption are validation errors.
    const auto blob = read_text_file(path);
    write_text_file(path, blob.substr(0, blob.size() - 8));
    CHECK_THROWS_AS(load_checkpoint(path), ValidationError);
    write_text_file(path, "not a checkpoint at all");
    CHECK_THROWS_AS(load_checkpoint(path), ValidationError);
    fs::remove(path);
    fs::remove(path.string() + "2");
}

TEST_CASE("frozen flag survives a checkpoint", "[io]") {
    const auto path = fs::temp_directory_path() / "mosr_io_frozen.ckpt";
    const auto frozen = clone_frozen(TransformerModel(ModelConfig{}));
    save_checkpoint(path, frozen);
    const auto back = load_checkpoint(path);
    CHECK(back.model.base() == frozen.base());
    CHECK(back.model.frozen());
    fs::remove(path);
}
