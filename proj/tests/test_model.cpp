#include <cmath>
#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "dsbel/checkpoint.hpp"
#include "dsbel/model.hpp"
#include "dsbel/train.hpp"

using namespace dsbel;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config(std::uint64_t seed = 1) {
  ModelConfig c;
  c.stm_widths = {2, 2, 2};
  c.input_side = 16;
  c.fusion_width = 8;
  c.seed = seed;
  return c;
}

// Counts weights and biases layer by layer from the architecture description.
std::size_t enumerate_parameters(const ModelConfig& c) {
  std::size_t total = 0;
  auto conv = [&](int in, int out, int k) { total += static_cast<std::size_t>(out) * in * k * k + out; };
  for (int stem = 0; stem < 2; ++stem) {
    int in = c.input_channels;
    for (int s : c.stm_widths) {
      conv(in, s, 1);  // boundary
      conv(in, s, 1);  // region
      conv(in, s, 3);  // dilated 1
      conv(in, s, 3);  // dilated 2
      in = 4 * s;
    }
  }
  const int m2 = 4 * c.stm_widths[1], m3 = 4 * c.stm_widths[2];
  total += static_cast<std::size_t>(m3) * c.surrogate_classes + c.surrogate_classes;  // aux head
  conv(m2 + m3 + m2 + m3, c.fusion_width, 1);                                          // block F
  total += static_cast<std::size_t>(c.fusion_width) * 2 + 2;                           // head
  return total;
}

std::vector<float> all_values(Model& m) {
  std::vector<float> v;
  for (const auto& p : m.parameters()) v.insert(v.end(), p.value.begin(), p.value.end());
  return v;
}

Tensor random_batch(int n, int side, Rng& rng) {
  Tensor t(Shape{n, 1, side, side});
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform());
  return t;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dsbel_test_model_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("default configuration widths") {
  const ModelConfig c;
  CHECK(c.merged_widths() == std::vector<int>{128, 256, 512});
  CHECK(c.boosted_channels() == 256 + 512 + 256 + 512);
  CHECK(c.block_sides() == std::array<int, 3>{32, 16, 8});
}

TEST_CASE("parameter count equals layer-by-layer enumeration") {
  for (const ModelConfig& c : {ModelConfig{}, tiny_config()}) {
    const std::size_t expect = enumerate_parameters(c);
    CHECK(parameter_count(c) == expect);
    const Model m = Model::build(c);
    CHECK(m.parameter_count() == expect);
  }
  Model m = Model::build(tiny_config());
  std::size_t walked = 0;
  for (const auto& p : m.parameters()) walked += p.value.size();
  CHECK(walked == enumerate_parameters(tiny_config()));
}

TEST_CASE("channel ledger of the built model") {
  const ModelConfig c;
  Model m = Model::build(c);
  for (int b = 0; b < 3; ++b) {
    CHECK(m.main_stem()[b].merged() == c.merged_widths()[b]);
    CHECK(m.aux_stem()[b].merged() == c.merged_widths()[b]);
  }
  CHECK(m.fusion().geom.in_channels == m.main_stem()[1].merged() + m.main_stem()[2].merged() +
                                           m.aux_stem()[1].merged() + m.aux_stem()[2].merged());
  CHECK(m.fusion().geom.out_channels == 512);
  CHECK(m.head().in_dim == 512);
  CHECK(m.head().out_dim == 2);
}

TEST_CASE("build is deterministic under a fixed seed") {
  Model a = Model::build(tiny_config(9));
  Model b = Model::build(tiny_config(9));
  Model c = Model::build(tiny_config(10));
  CHECK(all_values(a) == all_values(b));
  CHECK(all_values(a) != all_values(c));
}

TEST_CASE("unit squeeze widths merge to four channels") {
  ModelConfig c = tiny_config();
  c.stm_widths = {1, 1, 1};
  CHECK(c.merged_widths() == std::vector<int>{4, 4, 4});
  CHECK_NOTHROW(Model::build(c));
}

TEST_CASE("invalid configurations are rejected") {
  ModelConfig c;
  c.stm_widths = {32, 64};
  CHECK_THROWS_AS(Model::build(c), ConfigError);
  c.stm_widths = {32, 0, 128};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.input_side = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("He-uniform initialisation bounds and zero biases") {
  Model m = Model::build(ModelConfig{});
  const auto& conv = m.main_stem()[1].dilated2;
  const double bound = std::sqrt(6.0 / (conv.geom.in_channels * 9));
  double max_abs = 0.0;
  for (float w : conv.weight.data()) max_abs = std::max(max_abs, static_cast<double>(std::abs(w)));
  CHECK(max_abs <= bound);
  CHECK(max_abs > 0.9 * bound);
  for (const auto& p : m.parameters())
    if (p.name.ends_with(".bias"))
      for (float b : p.value) CHECK(b == 0.0f);
}

TEST_CASE("forward examples") {
  Model m = Model::build(tiny_config());
  Rng rng(2);
  SUBCASE("zero input and zero head give even odds") {
    std::fill(m.head().weight.begin(), m.head().weight.end(), 0.0f);
    const auto out = m.forward(Tensor(Shape{3, 1, 16, 16}), false);
    for (float p : out.probabilities) CHECK(p == doctest::Approx(0.5));
  }
  SUBCASE("probabilities sum to one for random inputs") {
    for (int t = 0; t < 1000; ++t) {
      const auto out = m.forward(random_batch(1, 16, rng), false);
      CHECK(std::abs(out.probabilities[0] + out.probabilities[1] - 1.0) < 1e-6);
      CHECK(out.probabilities[0] >= 0.0f);
      CHECK(out.probabilities[1] >= 0.0f);
    }
  }
  SUBCASE("identical images give identical rows") {
    Tensor one = random_batch(1, 16, rng);
    Tensor many(Shape{4, 1, 16, 16});
    for (int n = 0; n < 4; ++n) std::copy(one.data().begin(), one.data().end(), many.sample(n));
    const auto out = m.forward(many, false);
    for (int n = 1; n < 4; ++n) {
      CHECK(out.logits[2 * n] == out.logits[0]);
      CHECK(out.logits[2 * n + 1] == out.logits[1]);
    }
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(m.forward(Tensor(Shape{1, 1, 8, 8}), false), ConfigError);
  }
}

TEST_CASE("extract_features") {
  Model m = Model::build(tiny_config());
  Rng rng(3);
  const Tensor batch = random_batch(5, 16, rng);
  const auto f = m.extract_features(batch);
  CHECK(f.size() == 5u * 8);
  const auto zero = m.extract_features(Tensor(Shape{2, 1, 16, 16}));
  for (float v : zero) CHECK(v == 0.0f);

  Model full = Model::build(ModelConfig{});
  const auto f2 = full.extract_features(Tensor(Shape{2, 1, 64, 64}, 0.5f));
  REQUIRE(f2.size() == 2u * 512);
  for (int d = 0; d < 512; ++d) CHECK(f2[d] == f2[512 + d]);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const fs::path dir = temp_dir("roundtrip");
  Model m = Model::build(tiny_config(4));
  m.set_aux_frozen(true);
  Section extra;
  std::memcpy(extra.tag.data(), "TEST", 4);
  extra.payload = {1, 2, 3};
  const std::vector<Section> sections{extra};
  save_checkpoint(m, (dir / "a.dsbl").string(), sections);
  Checkpoint loaded = load_checkpoint((dir / "a.dsbl").string());
  CHECK(loaded.model.config() == m.config());
  CHECK(loaded.model.aux_frozen());
  CHECK(all_values(loaded.model) == all_values(m));
  REQUIRE(loaded.find("TEST") != nullptr);
  CHECK(loaded.find("TEST")->payload == extra.payload);
  save_checkpoint(loaded.model, (dir / "b.dsbl").string(), loaded.sections);
  CHECK(read_file_bytes((dir / "a.dsbl").string()) == read_file_bytes((dir / "b.dsbl").string()));
}

TEST_CASE("checkpoint corruption is detected") {
  Model m = Model::build(tiny_config(4));
  const auto good = encode_checkpoint(m);
  CHECK_NOTHROW(decode_checkpoint(good));
  SUBCASE("flipped payload byte") {
    auto bad = good;
    bad[bad.size() / 2] ^= 0x01;
    CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
  }
  SUBCASE("wrong magic") {
    auto bad = good;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
  }
  SUBCASE("version mismatch") {
    auto bad = good;
    bad[4] = static_cast<std::uint8_t>(kCheckpointVersion + 1);
    CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
  }
  SUBCASE("truncated") {
    auto bad = good;
    bad.resize(bad.size() - 20);
    CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
  }
  SUBCASE("magic and little-endian parameters") {
    CHECK(std::string(good.begin(), good.begin() + 4) == "DSBL");
    CHECK(good[4] == kCheckpointVersion);
    CHECK(fnv1a64(std::span(good).first(good.size() - 8)) != 0);
  }
}

TEST_CASE("auxiliary pretraining and the freeze contract") {
  ModelConfig c = tiny_config(5);
  c.stm_widths = {4, 4, 4};
  c.input_side = 32;
  TrainConfig tc;
  tc.seed = 5;
  tc.learning_rate = 1e-2;
  tc.momentum = 0.9;

  SUBCASE("zero epochs leaves the aux stem at its initialisation, frozen") {
    Model m = Model::build(c);
    const auto before = aux_parameter_bytes(m);
    const auto losses = pretrain_auxiliary(m, generate_surrogate_textures(4, 32, 1), 0, tc);
    CHECK(losses.empty());
    CHECK(m.aux_frozen());
    CHECK(aux_parameter_bytes(m) == before);
  }
  SUBCASE("surrogate loss decreases over three epochs and the main stem is untouched") {
    Model m = Model::build(c);
    const auto main_before = all_values(m);
    const auto losses = pretrain_auxiliary(m, generate_surrogate_textures(32, 32, 2), 3, tc);
    REQUIRE(losses.size() == 3);
    MESSAGE("surrogate losses " << losses[0] << " " << losses[1] << " " << losses[2]);
    CHECK(losses[2] < losses[0]);
    const auto after = all_values(m);
    // The main stem comes first in traversal order.
    std::size_t main_count = 0;
    for (const auto& p : m.parameters())
      if (p.name.rfind("main", 0) == 0) main_count += p.value.size();
    CHECK(std::equal(after.begin(), after.begin() + static_cast<std::ptrdiff_t>(main_count), main_before.begin()));
  }
  SUBCASE("main training never changes aux bytes") {
    Model m = Model::build(c);
    pretrain_auxiliary(m, generate_surrogate_textures(8, 32, 3), 1, tc);
    const auto frozen = aux_parameter_bytes(m);
    const LabeledDataset ds = generate_synthetic_corpus(10, 32, 4);
    const SplitPlan plan = split_dataset(ds, 4);
    TrainConfig mt = tc;
    mt.epochs = 3;
    mt.batch_size = 4;
    auto r = train(m, ds, plan, mt);
    CHECK(aux_parameter_bytes(r.final_model) == frozen);
    CHECK(aux_parameter_bytes(r.best_model) == frozen);
    CHECK(all_values(r.final_model) != all_values(m));
  }
}

TEST_CASE("config text round trip") {
  ModelConfig c = tiny_config(77);
  c.dropout_rate = 0.3;
  const ModelConfig back = ModelConfig::from_text(c.to_text());
  CHECK(back == c);
  CHECK_FALSE(c.set("no_such_key", "1"));
}
