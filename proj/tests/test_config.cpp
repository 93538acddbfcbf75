#include "doctest.h"
#include "musc/config.hpp"
#include "musc/train.hpp"
#include "test_util.hpp"

using namespace musc;

TEST_CASE("key=value parsing") {
  const auto doc = KeyValueDoc::parse("# header\n  a = 1 \n\nb=two words # trailing\nc=\n d=0.25\r\n");
  CHECK(doc.entries().size() == 4);
  CHECK(doc.get_int("a", 0) == 1);
  CHECK(doc.get_string("b", "") == "two words");
  CHECK(doc.get("c") == std::string());
  CHECK(doc.get_double("d", 0.0) == 0.25);
  CHECK(doc.get_int("missing", 7) == 7);
  CHECK_FALSE(doc.has("missing"));
}

TEST_CASE("key=value errors") {
  CHECK_THROWS_AS(KeyValueDoc::parse("novalue\n"), ConfigError);
  CHECK_THROWS_AS(KeyValueDoc::parse("=1\n"), ConfigError);
  CHECK_THROWS_AS(KeyValueDoc::parse("a=1\na=2\n"), ConfigError);
  const auto doc = KeyValueDoc::parse("n=3x\nf=abc\nb=yes\nu=-1\n");
  CHECK_THROWS_AS(doc.get_int("n", 0), ConfigError);
  CHECK_THROWS_AS(doc.get_double("f", 0), ConfigError);
  CHECK_THROWS_AS(doc.get_bool("b", false), ConfigError);
  CHECK_THROWS_AS(doc.get_u64("u", 0), ConfigError);
  CHECK_THROWS_AS(doc.require_known({"n", "f", "b"}), ConfigError);
  CHECK_NOTHROW(doc.require_known({"n", "f", "b", "u"}));
  CHECK_THROWS_AS(KeyValueDoc::load("/nonexistent/musc.cfg"), ConfigError);
}

TEST_CASE("key=value round trip") {
  KeyValueDoc doc;
  doc.set("x", 0.1);
  doc.set("flag", true);
  doc.set("n", 12);
  doc.set("seed", std::uint64_t{18446744073709551615ull});
  doc.set("name", "streaks");
  doc.set("n", 13);
  const auto back = KeyValueDoc::parse(doc.to_string());
  CHECK(back.get_double("x", 0) == 0.1);
  CHECK(back.get_bool("flag", false));
  CHECK(back.get_int("n", 0) == 13);
  CHECK(back.get_u64("seed", 0) == 18446744073709551615ull);
  CHECK(back.entries() == doc.entries());

  test_util::TempDir dir;
  test_util::spit(dir.path / "c.txt", doc.to_string());
  CHECK(KeyValueDoc::load(dir.path / "c.txt").entries() == doc.entries());
}

TEST_CASE("model config keys and validation") {
  ModelConfig c;
  c.spec.scales = 3;
  c.spec.channels = 32;
  c.steps = 4;
  c.mode = ShrinkMode::signed_soft;
  c.weight_norm = false;
  c.init_lambda = 0.01;
  KeyValueDoc doc;
  write_model_config(doc, c);
  CHECK_NOTHROW(doc.require_known(model_config_keys()));
  CHECK(read_model_config(doc) == c);

  ModelConfig bad = c;
  bad.steps = -1;
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.init_lambda = 0.0;
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.spec.channels = 4;  // too few channels for three halvings
  CHECK_THROWS(bad.validate());
}
