#include <doctest.h>

#include "floorgen/pipeline.hpp"

using namespace floorgen;
using namespace floorgen::pipeline;

TEST_CASE("codec overfit on 8 images reconstructs within 0.05 MAE") {
  std::vector<data::Sample> s;
  for (int i = 0; i < 8; ++i) s.push_back(data::generate_sample(data::default_spec(data::kAllBuildingTypes[static_cast<std::size_t>(i)], 100 + i), 32));
  const TripleSet train = make_triples(s);
  Model model(RunConfig::desk());
  OptimConfig o = model.config().codec_train;
  o.epochs = 1000;
  o.max_steps = 600;
  const TrainReport r = train_codec(model, train, {}, o, 1);
  CHECK(r.steps == 600);

  // Independent recomputation of the per-pixel MAE through the public API.
  ag::NoGradGuard g;
  const ag::Tensor rec = model.codec().decode(model.codec().encode(train.plans).mu);
  const auto x = train.plans.data(), y = rec.data();
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) sum += std::abs(x[i] - y[i]);
  const double mae = sum / static_cast<double>(x.size());
  MESSAGE("codec MAE " << mae);
  CHECK(mae < 0.05);
  CHECK(mae == doctest::Approx(r.final_probe).epsilon(1e-12));
  for (double v : y) CHECK((v >= -1.0 && v <= 1.0));
}
