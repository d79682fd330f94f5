#include <torch/torch.h>

#include <fstream>

#undef CHECK  // c10 logging macro
#include "doctest.h"
#include "helpers.hpp"
#include "osediff/checkpoint.hpp"
#include "osediff/config.hpp"
#include "osediff/errors.hpp"
#include "osediff/image.hpp"

using namespace osediff;
namespace fs = std::filesystem;

TEST_SUITE("config") {
  TEST_CASE("empty document resolves the reference hyperparameters") {
    auto c = Config::from_json(nlohmann::json::object());
    CHECK(c.number("train.lambda1") == 2.0);
    CHECK(c.number("train.lambda2") == 1.0);
    CHECK(c.integer("lora.rank") == 4);
    CHECK(c.number("train.lr") == 5e-5);
    CHECK(c.integer("train.batch") == 16);
    CHECK(c.number("train.cfg_scale") == 7.5);
    CHECK(c.text("train.omega") == "l1");
    CHECK(c.integer("degrade.scale") == 4);
    CHECK(c.integer("schedule.T") == 1000);
    CHECK(c.text("prompt.extractor") == "tag-stub");
  }

  TEST_CASE("nested file values and overrides") {
    auto c = Config::from_json({{"train", {{"lambda2", 0.5}, {"iterations", 3}}}, {"seed", 9}},
                               {"train.lambda2=0", "prompt.extractor=null", "lora.targets=unet.*"});
    CHECK(c.number("train.lambda2") == 0.0);
    CHECK(c.integer("train.iterations") == 3);
    CHECK(c.integer("seed") == 9);
    CHECK(c.text("prompt.extractor") == "null");
    CHECK(c.text("lora.targets") == "unet.*");
    auto echoed = nlohmann::json::parse(c.echo());
    CHECK(echoed["train.lambda2"] == 0.0);
    CHECK(Config(echoed).values() == c.values());
  }

  TEST_CASE("errors name the key") {
    auto msg = [](auto fn) {
      try {
        fn();
      } catch (const ConfigError& e) {
        return std::string(e.what());
      }
      return std::string();
    };
    CHECK(msg([] { Config::from_json({{"train", {{"lamda2", 1}}}}); }).find("train.lamda2") != std::string::npos);
    CHECK(msg([] { Config::from_json({{"train", {{"batch", "big"}}}}); }).find("train.batch") != std::string::npos);
    CHECK(msg([] { Config::from_json({{"train", {{"batch", 1.5}}}}); }).find("train.batch") != std::string::npos);
    CHECK_THROWS_AS(Config().apply_override("train.lambda2"), ConfigError);
    CHECK_THROWS_AS(Config().apply_override("nope=1"), ConfigError);
    CHECK_THROWS_AS(Config::from_json(nlohmann::json::array()), ConfigError);
    CHECK_THROWS_AS(Config().set("degrade.scale", 0), ConfigError);
  }

  TEST_CASE("files") {
    auto dir = testing::scratch_dir("config");
    std::ofstream(dir / "bad.json") << "{\"train\": {\"lambda2\": }";
    std::ofstream(dir / "good.json") << "{\"train\": {\"lambda2\": 0.25}}";
    CHECK_THROWS_AS(Config::from_file(dir / "bad.json"), ConfigError);
    CHECK_THROWS_AS(Config::from_file(dir / "missing.json"), ConfigError);
    CHECK(Config::from_file(dir / "good.json").number("train.lambda2") == 0.25);
    fs::remove_all(dir);
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("round trip is exact and byte-stable") {
    auto dir = testing::scratch_dir("ckpt");
    Checkpoint ck;
    auto g = make_generator(1);
    ck.arrays["b/x"] = torch::randn({3, 4}, g);
    ck.arrays["a/y"] = torch::randn({5}, g);
    ck.arrays["a/z"] = torch::randn({2, 2, 3, 3}, g).to(torch::kDouble);
    ck.config = Config().values();
    ck.manifest = {{"iteration", 3}};
    save_checkpoint(dir / "one", ck);
    save_checkpoint(dir / "two", load_checkpoint(dir / "one"));
    auto back = load_checkpoint(dir / "two");
    CHECK(back.arrays.size() == 3);
    CHECK(testing::same(back.arrays.at("b/x"), ck.arrays.at("b/x")));
    CHECK((back.arrays.at("a/z").scalar_type() == torch::kFloat));
    CHECK(back.manifest == ck.manifest);
    CHECK(back.config == ck.config);
    for (const auto& e : fs::recursive_directory_iterator(dir / "one")) {
      if (!e.is_regular_file()) continue;
      auto rel = fs::relative(e.path(), dir / "one");
      CHECK(read_file(e.path()) == read_file(dir / "two" / rel));
    }
    // overwrite in place
    ck.manifest["iteration"] = 4;
    save_checkpoint(dir / "one", ck);
    CHECK(load_checkpoint(dir / "one").manifest["iteration"] == 4);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing"), IoError);
    auto sel = select_prefix(back.arrays, "a/");
    CHECK(sel.size() == 2);
    CHECK(sel.count("y") == 1);
    fs::remove_all(dir);
  }
}
