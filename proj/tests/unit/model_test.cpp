// Copyright (c) 2026, prednet authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <bit>
#include <cmath>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "prednet/checkpoint.hpp"
#include "prednet/trainer.hpp"
#include "temp_dir.hpp"

using namespace prednet;
using prednet::testing::random_net;
using prednet::testing::random_tensor;

namespace {

bool same_bits(const tensor& a, const tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint32_t>(a[i]) != std::bit_cast<std::uint32_t>(b[i])) return false;
  return true;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

// ---- network ---------------------------------------------------------------

TEST(Attrnet, FeatureMapKeepsInputResolution) {
  const auto net = random_net();
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{8, 8}, {11, 7}, {16, 16}}) {
    const auto f = forward_features(net, random_tensor<float>({2, 3, h, w}, 1, 0.0, 1.0));
    EXPECT_EQ(f.shape(), (shape_t{2, feature_channels, h, w}));
  }
}

TEST(Attrnet, ProbabilitiesHaveOneColumnPerAttributeAndLieInUnitInterval) {
  const auto net = random_net(5);
  const auto p = forward_all(net, random_tensor<float>({4, 3, 8, 8}, 2, 0.0, 1.0));
  ASSERT_EQ(p.shape(), (shape_t{4, 5}));
  for (float v : p.data()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
}

TEST(Attrnet, EvalPredictionsDoNotDependOnBatchComposition) {
  const auto net = random_net();
  const auto images = random_tensor<float>({3, 3, 8, 8}, 4, 0.0, 1.0);
  const auto together = forward_all(net, images);
  for (std::size_t i = 0; i < 3; ++i) {
    tensor one({1, 3, 8, 8});
    std::copy_n(images.raw() + i * 192, 192, one.raw());
    const auto alone = forward_all(net, one);
    for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(alone[k], together[i * 8 + k]);
  }
}

TEST(Attrnet, ClassifyMatchesPooledDotProductOracle) {
  const auto net = random_net(3);
  const auto features = forward_features(net, random_tensor<float>({2, 3, 6, 6}, 5, 0.0, 1.0));
  const auto mask = random_tensor<float>(features.shape(), 6, 0.0, 1.0);
  const std::size_t plane = 36;
  for (std::size_t k = 0; k < 3; ++k) {
    const auto p = classify(net, features, mask, k);
    ASSERT_EQ(p.shape(), (shape_t{2}));
    for (std::size_t n = 0; n < 2; ++n) {
      double z = net.heads[k].classifier_bias[0];
      for (std::size_t c = 0; c < feature_channels; ++c) {
        double pooled = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          const std::size_t at = (n * feature_channels + c) * plane + i;
          pooled += static_cast<double>(features[at]) * mask[at];
        }
        z += net.heads[k].classifier_weight[c] * pooled / plane;
      }
      EXPECT_NEAR(p[n], sigmoid(z), 1e-6);
    }
  }
}

TEST(Attrnet, MaskIsSigmoidOfOneByOneConvolution) {
  const auto net = random_net(2);
  const auto features = forward_features(net, random_tensor<float>({1, 3, 4, 4}, 8, 0.0, 1.0));
  const auto m = compute_mask(net, features, 1);
  const auto& h = net.heads[1];
  for (std::size_t o : {0u, 17u, 127u})
    for (std::size_t i : {0u, 9u, 15u}) {
      double z = h.mask_bias[o];
      for (std::size_t c = 0; c < feature_channels; ++c) z += h.mask_weight[o * feature_channels + c] * features[c * 16 + i];
      EXPECT_NEAR(m[o * 16 + i], sigmoid(z), 1e-6);
    }
}

TEST(Attrnet, ClosedGateZeroesThatFeatureChannel) {
  auto net = random_net();
  net.channel_gate[5] = 0.0f;
  const auto f = forward_features(net, random_tensor<float>({2, 3, 8, 8}, 9, 0.0, 1.0));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(f[(n * feature_channels + 5) * 64 + i], 0.0f);
}

TEST(Attrnet, PruningADisconnectedChannelLeavesEveryProbabilityUnchanged) {
  auto net = random_net();
  prednet::testing::disconnect_channel(net, 42);
  const auto images = random_tensor<float>({4, 3, 8, 8}, 10, 0.0, 1.0);
  const auto before = forward_all(net, images);
  net.channel_gate[42] = 0.0f;
  const auto after = forward_all(net, images);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i] - after[i], 0.0f);
}

TEST(Attrnet, SameSeedSameWeightsDifferentSeedDifferentWeights) {
  auto a = attrnet::create({"x", "y"}, 11), b = attrnet::create({"x", "y"}, 11), c = attrnet::create({"x", "y"}, 12);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_TRUE(same_bits(*pa[i].tensor, *pb[i].tensor)) << pa[i].name;
    any_diff |= !same_bits(*pa[i].tensor, *pc[i].tensor);
  }
  EXPECT_TRUE(any_diff);
}

TEST(Attrnet, ParameterCountMatchesLayout) {
  auto net = attrnet::create({"x", "y", "z"}, 1);
  std::size_t total = 0;
  for (const auto& p : net.parameters()) total += p.tensor->size();
  const std::size_t extractor = (3 * 32 * 9 + 3 * 32) + (32 * 64 * 9 + 3 * 64) + (64 * 64 * 9 + 3 * 64) +
                                (64 * 128 * 9 + 3 * 128);
  const std::size_t head = 128 * 128 + 128 + 128 + 1;
  EXPECT_EQ(total, extractor + 3 * head);
}

TEST(Attrnet, RejectsBadInputsAndIndices) {
  const auto net = random_net(2);
  EXPECT_THROW(forward_all(net, tensor({1, 4, 8, 8})), dimension_error);
  EXPECT_THROW(forward_all(net, tensor({3, 8, 8})), dimension_error);
  const auto f = forward_features(net, random_tensor<float>({1, 3, 4, 4}, 1));
  EXPECT_THROW(compute_mask(net, f, 2), argument_error);
  EXPECT_THROW(classify(net, f, tensor({1, 128, 4, 5}), 0), dimension_error);
  EXPECT_THROW(attrnet::create({}, 1), argument_error);
}

TEST(Attrnet, DoubleCastRoundTripIsExact) {
  const auto net = random_net();
  const auto back = net.cast<double>().cast<float>();
  EXPECT_EQ(serialize_checkpoint(net), serialize_checkpoint(back));
}

TEST(Attrnet, SmallNetworkGradientsMatchCentralDifferencesInDouble) {
  const auto net = random_net(2, 21).cast<double>();
  const auto images = random_tensor<double>({2, 3, 5, 5}, 22, 0.0, 1.0);
  basic_tensor<double> labels({2, 2});
  labels[0] = 1;
  labels[3] = 1;

  auto loss_of = [&](const basic_attrnet<double>& n, double* grad_slot, std::size_t which, std::size_t index) {
    basic_tape<double> tape;
    auto copy = n;
    const auto vars = bind_network(tape, copy, true);
    detail::eval_stats<double> stats(copy);
    auto out = run_network(tape, copy, vars, tape.constant(images), kernels::norm_mode::train, stats.ptrs);
    var loss = tape.add(tape.binary_cross_entropy(out.probabilities, labels),
                        tape.scale(detail::mask_l1_node(tape, out, 2), 1e-3));
    const double value = tape.value(loss)[0];
    if (grad_slot) {
      tape.backward(loss);
      *grad_slot = tape.grad(vars.ordered()[which])[index];
    }
    return value;
  };

  auto probe = net;
  const auto params = probe.parameters();
  std::mt19937_64 rng(5);
  std::size_t checked = 0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (int draw = 0; draw < 2; ++draw) {
      const std::size_t i = rng() % params[p].tensor->size();
      double analytic = 0.0;
      loss_of(probe, &analytic, p, i);
      const double orig = (*params[p].tensor)[i];
      const double h = 1e-5;
      (*params[p].tensor)[i] = orig + h;
      const double hi = loss_of(probe, nullptr, 0, 0);
      (*params[p].tensor)[i] = orig - h;
      const double lo = loss_of(probe, nullptr, 0, 0);
      (*params[p].tensor)[i] = orig;
      const double numeric = (hi - lo) / (2 * h);
      EXPECT_LT(prednet::testing::relative_error(analytic, numeric, 1e-6), 1e-3)
          << params[p].name << "[" << i << "] analytic " << analytic << " numeric " << numeric;
      ++checked;
    }
  }
  EXPECT_EQ(checked, params.size() * 2);
}

// ---- checkpoint ------------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitIdentical) {
  auto net = random_net(4, 30);
  net.channel_gate[3] = 0.0f;
  net.metadata = {1e-3, 77, 12};
  const auto bytes = serialize_checkpoint(net);
  auto loaded = deserialize_checkpoint(bytes);
  EXPECT_EQ(serialize_checkpoint(loaded), bytes);
  EXPECT_EQ(loaded.attribute_names, net.attribute_names);
  EXPECT_EQ(loaded.metadata, net.metadata);
  EXPECT_EQ(loaded.channel_gate, net.channel_gate);
  const auto a = net.parameters(), b = loaded.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(same_bits(*a[i].tensor, *b[i].tensor)) << a[i].name;
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(loaded.blocks[i].stats.running_mean, net.blocks[i].stats.running_mean);
    EXPECT_EQ(loaded.blocks[i].stats.running_var, net.blocks[i].stats.running_var);
  }
}

TEST(Checkpoint, FileRoundTripPreservesPredictions) {
  prednet::testing::temp_dir dir;
  const auto net = random_net(3, 31);
  save_checkpoint(net, dir.path() / "m.apnet");
  const auto loaded = load_checkpoint(dir.path() / "m.apnet");
  const auto images = random_tensor<float>({2, 3, 6, 6}, 3, 0.0, 1.0);
  EXPECT_TRUE(same_bits(forward_all(net, images), forward_all(loaded, images)));
}

TEST(Checkpoint, LambdaSurvivesShortestRoundTripFormatting) {
  auto net = random_net(2);
  net.metadata.lambda = 0.1 + 0.2;
  EXPECT_EQ(deserialize_checkpoint(serialize_checkpoint(net)).metadata.lambda, 0.1 + 0.2);
}

TEST(Checkpoint, FlippedPayloadByteIsChecksumError) {
  auto bytes = serialize_checkpoint(random_net(2));
  bytes[bytes.size() - 100] ^= 0x01;
  EXPECT_THROW(deserialize_checkpoint(bytes), checksum_error);
}

TEST(Checkpoint, TruncationAndTrailingBytesAreFormatErrors) {
  const auto bytes = serialize_checkpoint(random_net(2));
  EXPECT_THROW(deserialize_checkpoint(io::bytes(bytes.begin(), bytes.end() - 5)), format_error);
  EXPECT_THROW(deserialize_checkpoint(io::bytes(bytes.begin(), bytes.begin() + 30)), format_error);
  auto longer = bytes;
  longer.push_back(0);
  EXPECT_THROW(deserialize_checkpoint(longer), format_error);
  EXPECT_THROW(deserialize_checkpoint(io::bytes{}), format_error);
}

TEST(Checkpoint, OtherVersionIsVersionError) {
  auto bytes = serialize_checkpoint(random_net(2));
  const std::string magic = "prednet-checkpoint 1";
  ASSERT_TRUE(std::equal(magic.begin(), magic.end(), bytes.begin()));
  bytes[magic.size() - 1] = '2';
  EXPECT_THROW(deserialize_checkpoint(bytes), version_error);
}

TEST(Checkpoint, ForeignFileIsFormatError) {
  const std::string text = "hello world\nthis is not a model\n";
  EXPECT_THROW(deserialize_checkpoint(io::bytes(text.begin(), text.end())), format_error);
}

TEST(Checkpoint, NonBinaryGateIsRejected) {
  auto net = random_net(2);
  net.channel_gate[0] = 0.5f;
  EXPECT_THROW(deserialize_checkpoint(serialize_checkpoint(net)), format_error);
}

TEST(Checkpoint, MissingFileIsIoError) {
  prednet::testing::temp_dir dir;
  EXPECT_THROW(load_checkpoint(dir.path() / "absent.apnet"), io_error);
}

// ---- training --------------------------------------------------------------

TEST(Loss, BinaryCrossEntropyOfHalfIsLn2PerAttribute) {
  tensor p({3, 2});
  for (auto& v : p.data()) v = 0.5f;
  tensor y({3, 2});
  y[0] = y[3] = y[4] = 1.0f;
  EXPECT_NEAR(binary_cross_entropy_sum(p, y), 2.0 * std::log(2.0), 1e-6);
}

TEST(Loss, BinaryCrossEntropyIsFiniteAtSaturation) {
  tensor p({1, 2});
  p[0] = 0.0f;
  p[1] = 1.0f;
  tensor y({1, 2});
  y[0] = 1.0f;
  const double l = binary_cross_entropy_sum(p, y);
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_NEAR(l, -2.0 * std::log(1e-7), 1e-4);
}

TEST(Loss, MaskL1OfHalfMasksIsHalfTheMaskVolume) {
  auto net = random_net(2);
  for (auto& h : net.heads) {
    h.mask_weight = tensor::zeros(h.mask_weight.shape());
    h.mask_bias = tensor::zeros(h.mask_bias.shape());
  }
  // Two heads, 128 channels, 4 x 4 pixels, each entry sigmoid(0) = 0.5.
  EXPECT_DOUBLE_EQ(mask_l1(net, random_tensor<float>({3, 3, 4, 4}, 1, 0.0, 1.0)), 2 * 128 * 16 * 0.5);
}

TEST(Accuracy, ThresholdCountsAsPositiveAndPerAttributeMeansAverage) {
  tensor p({4, 2});
  tensor y({4, 2});
  const float preds[] = {0.5f, 0.2f, 0.49f, 0.9f, 0.7f, 0.1f, 0.1f, 0.6f};
  const float labels[] = {1, 0, 0, 0, 1, 0, 1, 1};
  std::copy(std::begin(preds), std::end(preds), p.raw());
  std::copy(std::begin(labels), std::end(labels), y.raw());
  const auto r = accuracy_from_predictions(p, y);
  ASSERT_EQ(r.per_attribute.size(), 2u);
  EXPECT_DOUBLE_EQ(r.per_attribute[0], 0.75);
  EXPECT_DOUBLE_EQ(r.per_attribute[1], 0.75);
  EXPECT_DOUBLE_EQ(r.mean, 0.75);
}

TEST(TrainConfig, InvalidValuesAreRejected) {
  auto bad = [](auto mutate) {
    train_config c;
    mutate(c);
    return c;
  };
  EXPECT_THROW(trainer(bad([](train_config& c) { c.learning_rate = 0; })), argument_error);
  EXPECT_THROW(trainer(bad([](train_config& c) { c.batch_size = 1; })), argument_error);
  EXPECT_THROW(trainer(bad([](train_config& c) { c.lambda = -1; })), argument_error);
  EXPECT_THROW(trainer(bad([](train_config& c) { c.epochs = 0; })), argument_error);
  EXPECT_THROW(parse_optimizer("adam"), argument_error);
  EXPECT_EQ(parse_optimizer("sgd"), optimizer_kind::sgd);
}

TEST(Trainer, LossDecreasesOnATinySet) {
  const auto& d = prednet::testing::tiny_dataset();
  auto net = attrnet::create(d.manifest().attribute_names, 1);
  train_config c;
  c.epochs = 4;
  c.batch_size = 16;
  c.lambda = 0.0;
  const auto history = train(net, d.train(), c);
  ASSERT_EQ(history.size(), 4u);
  EXPECT_LT(history.back().loss.bce, history.front().loss.bce);
  EXPECT_EQ(net.metadata.epochs, 4u);
  EXPECT_EQ(net.metadata.seed, c.seed);
}

TEST(Trainer, SameSeedGivesBitIdenticalWeights) {
  const auto& d = prednet::testing::tiny_dataset();
  train_config c;
  c.epochs = 2;
  c.batch_size = 8;
  c.lambda = 1e-4;
  auto a = attrnet::create(d.manifest().attribute_names, 2);
  auto b = attrnet::create(d.manifest().attribute_names, 2);
  const auto ha = train(a, d.train(), c);
  const auto hb = train(b, d.train(), c);
  EXPECT_EQ(serialize_checkpoint(a), serialize_checkpoint(b));
  EXPECT_EQ(training_log_csv(ha), training_log_csv(hb));
}

TEST(Trainer, TotalLossIsBcePlusLambdaTimesL1) {
  const auto& d = prednet::testing::tiny_dataset();
  auto net = attrnet::create(d.manifest().attribute_names, 3);
  train_config c;
  c.epochs = 1;
  c.lambda = 2e-3;
  const auto h = train(net, d.train(), c);
  EXPECT_DOUBLE_EQ(h[0].loss.total, h[0].loss.bce + 2e-3 * h[0].loss.mask_l1);
}

TEST(Trainer, FewerThanTwoSamplesIsRejected) {
  const auto& d = prednet::testing::tiny_dataset();
  auto net = attrnet::create(d.manifest().attribute_names, 4);
  EXPECT_THROW(train(net, d.train().subspan(0, 1), train_config{}), argument_error);
}

TEST(Trainer, HugeLearningRateReportsDivergence) {
  const auto& d = prednet::testing::tiny_dataset();
  auto net = attrnet::create(d.manifest().attribute_names, 5);
  train_config c;
  c.epochs = 3;
  c.learning_rate = 1e30;
  EXPECT_THROW(train(net, d.train(), c), divergence_error);
}

TEST(Trainer, AttributeCountMismatchIsDimensionError) {
  const auto& d = prednet::testing::tiny_dataset();
  auto net = attrnet::create({"only", "two"}, 1);
  EXPECT_THROW(train(net, d.train(), train_config{}), dimension_error);
}

TEST(Trainer, CsvLogHasHeaderAndOneRowPerEpoch) {
  std::vector<epoch_record> h(3);
  for (std::size_t i = 0; i < 3; ++i) h[i].epoch = i + 1;
  const auto csv = training_log_csv(h);
  EXPECT_EQ(csv.rfind("epoch,loss_total,loss_bce,mask_l1,mean_acc\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}
