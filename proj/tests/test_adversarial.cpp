#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "gradcheck.hpp"

using namespace monkeynet;

namespace {

std::vector<double> vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

Discriminator small_disc(std::int64_t K, int scales = 1, std::uint64_t seed = 4) {
    Initializer init(seed);
    return Discriminator({K, 8, 32, 4, scales}, init);
}

}  // namespace

// ---------------------------------------------------------------------------
// discriminate

TEST(Discriminator, FeatureListIncludesInput) {
    auto d = small_disc(3);
    Rng rng(1);
    auto img = gradcheck::uniform(rng, {2, 3, 32, 32}, 0, 1);
    auto heat = gradcheck::uniform(rng, {2, 3, 32, 32}, 0, 1);
    const auto out = d(img, heat);
    ASSERT_EQ(out.scores.size(), 1u);
    ASSERT_EQ(out.features.size(), 5u);  // input + 4 blocks
    EXPECT_EQ(out.features[0].shape(), (Shape{2, 6, 32, 32}));
    EXPECT_EQ(out.features[4].dim(2), 2);
    EXPECT_EQ(out.scores[0].dim(1), 1);
    EXPECT_EQ(DiscriminatorConfig{}.input_channels(), 13);
}

TEST(Discriminator, DeterministicAndShapeChecked) {
    auto d = small_disc(2);
    Rng rng(2);
    auto img = gradcheck::uniform(rng, {1, 3, 32, 32}, 0, 1);
    auto heat = gradcheck::uniform(rng, {1, 2, 32, 32}, 0, 1);
    EXPECT_EQ(vec(d(img, heat).scores[0]), vec(d(img, heat).scores[0]));
    EXPECT_THROW(d(img, Tensor::zeros({1, 3, 32, 32})), std::invalid_argument);  // 3 + K channels
    EXPECT_THROW(d(img, Tensor::zeros({1, 2, 16, 32})), std::invalid_argument);
}

TEST(Discriminator, MultiScaleHook) {
    auto d = small_disc(2, 2);
    const auto out = d(Tensor::zeros({1, 3, 32, 32}), Tensor::zeros({1, 2, 32, 32}));
    ASSERT_EQ(out.scores.size(), 2u);
    EXPECT_EQ(out.features.size(), 10u);
    EXPECT_EQ(out.features[5].dim(2), 16);
}

// ---------------------------------------------------------------------------
// losses

TEST(LossDiscriminator, Optimum) {
    EXPECT_EQ(loss_discriminator(Tensor::full({2, 1, 3, 3}, 1.0), Tensor::zeros({2, 1, 3, 3})).item(), 0.0);
    EXPECT_EQ(loss_discriminator(Tensor::zeros({2, 1, 3, 3}), Tensor::full({2, 1, 3, 3}, 1.0)).item(), 2.0);
}

TEST(LossDiscriminator, MatchesDirectSum) {
    Rng rng(3);
    auto r = gradcheck::uniform(rng, {3, 1, 4, 5}, -2, 2), f = gradcheck::uniform(rng, {3, 1, 4, 5}, -2, 2);
    double a = 0, b = 0;
    for (double v : r.data()) a += (v - 1) * (v - 1);
    for (double v : f.data()) b += v * v;
    EXPECT_NEAR(loss_discriminator(r, f).item(), a / 60 + b / 60, 1e-12);
}

TEST(LossGeneratorGan, Values) {
    EXPECT_EQ(loss_generator_gan(Tensor::full({1, 1, 2, 2}, 1.0)).item(), 0.0);
    EXPECT_EQ(loss_generator_gan(Tensor::zeros({1, 1, 2, 2})).item(), 1.0);
}

TEST(LossFeatureMatching, IdentityNonNegativityAndSymmetry) {
    Rng rng(4);
    std::vector<Tensor> a{gradcheck::uniform(rng, {1, 2, 4, 4}, -1, 1), gradcheck::uniform(rng, {1, 3, 2, 2}, -1, 1)};
    std::vector<Tensor> b{gradcheck::uniform(rng, {1, 2, 4, 4}, -1, 1), gradcheck::uniform(rng, {1, 3, 2, 2}, -1, 1)};
    EXPECT_EQ(loss_feature_matching(a, a).item(), 0.0);
    const double ab = loss_feature_matching(a, b).item();
    EXPECT_GE(ab, 0.0);
    EXPECT_EQ(ab, loss_feature_matching(b, a).item());
    EXPECT_THROW(loss_feature_matching(a, {b[0]}), std::invalid_argument);
}

TEST(LossFeatureMatching, ConstantOffsetLayerZero) {
    // With a constant image offset c the input term of the sum is exactly |c|
    // on the image channels and 0 on the shared heatmap channels.
    auto d = small_disc(2);
    Rng rng(5);
    auto img = gradcheck::uniform(rng, {1, 3, 32, 32}, 0.2, 0.6);
    auto heat = gradcheck::uniform(rng, {1, 2, 32, 32}, 0, 1);
    const double c = 0.125;
    std::vector<double> shifted = vec(img);
    for (auto& v : shifted) v += c;
    const auto real = d(img, heat), fake = d(Tensor(img.shape(), shifted), heat);
    const double layer0 = l1_mean(fake.features[0], real.features[0]).item();
    EXPECT_NEAR(layer0, c * 3.0 / 5.0, 1e-12);
    EXPECT_NEAR(loss_feature_matching({real.features[0]}, {fake.features[0]}).item(), layer0, 1e-15);
}

TEST(LossTotal, Arithmetic) {
    EXPECT_DOUBLE_EQ(loss_total(Tensor({1}, {0.1}), Tensor({1}, {0.5})).item(), 1.5);
    EXPECT_DOUBLE_EQ(loss_total(Tensor({1}, {0.0}), Tensor({1}, {0.37})).item(), 0.37);
    EXPECT_DOUBLE_EQ(loss_total(Tensor({1}, {0.1}), Tensor({1}, {0.5}), 2.0).item(), 0.7);
    EXPECT_EQ(kDefaultLambdaRec, 10.0);
}

TEST(LossLog, CsvRows) {
    const auto path = (std::filesystem::temp_directory_path() / "monkeynet_losses.csv").string();
    {
        LossLog log(path);
        log.append(1, {0.5, 0.25, 0.125, 1.5});
        LossLog again(path, true);
        again.append(2, {1, 2, 3, 4});
    }
    std::ifstream is(path);
    std::string header, r1, r2, extra;
    std::getline(is, header);
    std::getline(is, r1);
    std::getline(is, r2);
    EXPECT_EQ(header, "step,loss_D,loss_G_gan,loss_rec,loss_total");
    EXPECT_EQ(r1, "1,0.5,0.25,0.125,1.5");
    EXPECT_EQ(r2, "2,1,2,3,4");
    EXPECT_FALSE(std::getline(is, extra));
    std::filesystem::remove(path);
}
