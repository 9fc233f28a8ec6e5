#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numeric>

#include "support.hpp"
#include "vband/checkpoint.hpp"
#include "vband/gradcheck.hpp"
#include "vband/nn.hpp"
#include "vband/ops.hpp"

using namespace vband;
using vband::testing::expect_values;
using vband::testing::random_tensor;
namespace vt = vband::testing;

namespace {

/// Independent triple-loop product.
std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a.at(i, p) * b.at(p, j);
    return c;
}

}  // namespace

TEST(TensorTest, ConstructorRejectsMismatchedShape) {
    EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
    EXPECT_THROW(Tensor::zeros({2, 0}), DimensionError);
    auto t = Tensor::zeros({2, 3});
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_EQ(t.rows(), 2u);
    EXPECT_EQ(t.cols(), 3u);
}

TEST(TensorTest, CloneIsDeep) {
    auto a = Tensor::vector({1, 2, 3});
    auto b = a.clone();
    b.mutable_data()[0] = 9;
    EXPECT_EQ(a[0], 1);
    EXPECT_FALSE(a.same(b));
}

TEST(MatmulTest, IdentityAndSelector) {
    auto id = Tensor::matrix(2, 2, {1, 0, 0, 1});
    auto m = Tensor::matrix(2, 2, {1, 2, 3, 4});
    expect_values(ops::matmul(id, m), {1, 2, 3, 4});
    expect_values(ops::matmul(Tensor::matrix(1, 2, {1, 0}), Tensor::matrix(2, 1, {2, 5})), {2});
}

TEST(MatmulTest, MatchesNaiveProduct) {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t m = 1 + trial % 4, k = 2 + trial % 5, n = 1 + trial % 3;
        auto a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
        expect_values(ops::matmul(a, b), naive_matmul(a, b), 1e-12);
    }
}

TEST(MatmulTest, ShapeMismatchNamesBothShapes) {
    try {
        ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[4x2]"), std::string::npos) << msg;
    }
}

TEST(MatmulTest, GradientsAreGTimesTransposes) {
    Rng rng(4);
    auto a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng), g = random_tensor({3, 2}, rng);
    a.set_requires_grad();
    b.set_requires_grad();
    {
        Tape tape;
        tape.backward(ops::sum(ops::mul(ops::matmul(a, b), g)));
    }
    // dA = g b^T, dB = a^T g by explicit index sums
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t p = 0; p < 4; ++p) {
            double want = 0;
            for (std::size_t j = 0; j < 2; ++j) want += g.at(i, j) * b.at(p, j);
            EXPECT_NEAR(a.grad()[i * 4 + p], want, 1e-12);
        }
    for (std::size_t p = 0; p < 4; ++p)
        for (std::size_t j = 0; j < 2; ++j) {
            double want = 0;
            for (std::size_t i = 0; i < 3; ++i) want += a.at(i, p) * g.at(i, j);
            EXPECT_NEAR(b.grad()[p * 2 + j], want, 1e-12);
        }
}

TEST(MatmulTest, FiniteDifferenceCheck) {
    Rng rng(5);
    Rng wrng(6);
    auto w = random_tensor({3, 2}, wrng);
    auto r = gradcheck([&](const std::vector<Tensor>& in) { return ops::sum(ops::mul(ops::matmul(in[0], in[1]), w)); },
                       {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)});
    EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(SoftmaxTest, SymmetryAndStabilisation) {
    expect_values(ops::softmax(Tensor::vector({0, 0, 0}), 0), {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-15);
    auto big = ops::softmax(Tensor::vector({1000, 0}), 0);
    EXPECT_TRUE(std::isfinite(big[0]) && std::isfinite(big[1]));
    EXPECT_NEAR(big[0], 1.0, 1e-15);
    EXPECT_NEAR(big[1], 0.0, 1e-15);
}

TEST(SoftmaxTest, NanInputIsNumericError) {
    EXPECT_THROW(ops::softmax(Tensor::vector({0, std::nan("")}), 0), NumericError);
}

TEST(SoftmaxTest, RowsSumToOne) {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        auto x = random_tensor({4, 9}, rng, 5.0);
        auto y = ops::softmax(x, 1);
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0;
            for (std::size_t c = 0; c < 9; ++c) {
                EXPECT_GT(y.at(r, c), 0.0);
                s += y.at(r, c);
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(SoftmaxTest, FiniteDifferenceCheck) {
    Rng rng(8), wrng(9);
    auto w = random_tensor({5}, wrng);
    auto r = gradcheck([&](const std::vector<Tensor>& in) { return ops::sum(ops::mul(ops::softmax(in[0], 0), w)); },
                       {random_tensor({5}, rng)});
    EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(RmsNormTest, HandValues) {
    expect_values(ops::rmsnorm(Tensor::matrix(1, 2, {3, -3}), Tensor::vector({1, 1})), {1, -1}, 1e-6);
    expect_values(ops::rmsnorm(Tensor::ones({2, 5}), Tensor::ones({5})), std::vector<double>(10, 1.0), 1e-6);
    EXPECT_THROW(ops::rmsnorm(Tensor::ones({2, 5}), Tensor::ones({4})), DimensionError);
}

TEST(RmsNormTest, FiniteDifferenceCheck) {
    Rng rng(10), wrng(11);
    auto w = random_tensor({3, 6}, wrng);
    auto r = gradcheck(
        [&](const std::vector<Tensor>& in) { return ops::sum(ops::mul(ops::rmsnorm(in[0], in[1]), w)); },
        {random_tensor({3, 6}, rng), random_tensor({6}, rng)});
    EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(LayerNormTest, RowsAreStandardised) {
    Rng rng(12);
    auto y = ops::layernorm(random_tensor({6, 10}, rng, 4.0));
    for (std::size_t r = 0; r < 6; ++r) {
        double m = 0, v = 0;
        for (std::size_t c = 0; c < 10; ++c) m += y.at(r, c);
        m /= 10;
        for (std::size_t c = 0; c < 10; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m);
        EXPECT_LT(std::abs(m), 1e-10);
        EXPECT_NEAR(v / 10, 1.0, 1e-5);
    }
}

TEST(LayerNormTest, ConstantRowIsGuardedByEpsilon) {
    auto y = ops::layernorm(Tensor::full({2, 4}, 3.0));
    for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(AdaLnTest, IdentityAndConstantModulation) {
    Rng rng(13);
    auto h = random_tensor({3, 5}, rng);
    vt::expect_equal_bits(ops::adaln(h, Tensor::ones({5}), Tensor::zeros({5})), ops::layernorm(h));
    expect_values(ops::adaln(h, Tensor::zeros({5}), Tensor::full({5}, 5.0)), std::vector<double>(15, 5.0), 0.0);
}

TEST(AdaLnTest, FiniteDifferenceOnAllInputs) {
    Rng rng(14), wrng(15);
    auto w = random_tensor({3, 5}, wrng);
    auto r = gradcheck(
        [&](const std::vector<Tensor>& in) { return ops::sum(ops::mul(ops::adaln(in[0], in[1], in[2]), w)); },
        {random_tensor({3, 5}, rng), random_tensor({5}, rng), random_tensor({5}, rng)});
    EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Conv1dTest, HandConvolutions) {
    const Tensor none;
    auto x = Tensor::matrix(1, 4, {1, 0, 0, 0});
    expect_values(ops::conv1d(x, Tensor({1, 1, 3}, {0, 1, 0}), none), {1, 0, 0, 0});
    expect_values(ops::conv1d(x, Tensor({1, 1, 3}, {1, 1, 1}), none), {1, 1, 0, 0});
    auto impulse = Tensor::matrix(1, 7, {0, 0, 0, 1, 0, 0, 0});
    expect_values(ops::conv1d(impulse, Tensor({1, 1, 3}, {1, 0, 1}), none, 2), {0, 1, 0, 0, 0, 1, 0});
}

TEST(Conv1dTest, IdentityKernelOnRandomInput) {
    Rng rng(16);
    auto x = random_tensor({1, 11}, rng);
    vt::expect_equal_bits(ops::conv1d(x, Tensor({1, 1, 3}, {0, 1, 0}), Tensor()), x);
}

TEST(Conv1dTest, MatchesDirectSum) {
    Rng rng(17);
    auto x = random_tensor({3, 9}, rng), k = random_tensor({2, 3, 5}, rng), b = random_tensor({2}, rng);
    const std::size_t dil = 2;
    auto y = ops::conv1d(x, k, b, dil);
    for (std::size_t o = 0; o < 2; ++o)
        for (long t = 0; t < 9; ++t) {
            double want = b[o];
            for (std::size_t c = 0; c < 3; ++c)
                for (long tap = 0; tap < 5; ++tap) {
                    const long src = t + (tap - 2) * static_cast<long>(dil);
                    if (src >= 0 && src < 9) want += k[(o * 3 + c) * 5 + tap] * x.at(c, src);
                }
            EXPECT_NEAR(y.at(o, t), want, 1e-12);
        }
}

TEST(Conv1dTest, EvenKernelIsConfigError) {
    EXPECT_THROW(ops::conv1d(Tensor::zeros({1, 4}), Tensor::zeros({1, 1, 2}), Tensor()), ConfigError);
}

TEST(LossTest, CrossEntropyLimitsAndBounds) {
    auto confident = Tensor::matrix(2, 3, {200, 0, 0, 0, 0, 200});
    EXPECT_LT(ops::cross_entropy(confident, {0, 2}).item(), 1e-60);
    auto uniform = Tensor::zeros({2, 4});
    EXPECT_NEAR(ops::cross_entropy(uniform, {1, 3}).item(), std::log(4.0), 1e-14);
    EXPECT_THROW(ops::cross_entropy(uniform, {1, 4}), BoundsError);
}

TEST(LossTest, CrossEntropyMatchesScalarFormula) {
    Rng rng(18);
    auto logits = random_tensor({5, 6}, rng, 2.0);
    std::vector<std::size_t> targets{0, 5, 2, 2, 1};
    double want = 0;
    for (std::size_t i = 0; i < 5; ++i) {
        double z = 0;
        for (std::size_t k = 0; k < 6; ++k) z += std::exp(logits.at(i, k));
        want += -(logits.at(i, targets[i]) - std::log(z));
    }
    EXPECT_NEAR(ops::cross_entropy(logits, targets, ops::Reduction::Sum).item(), want, 1e-12);
    EXPECT_NEAR(ops::cross_entropy(logits, targets).item(), want / 5, 1e-12);
}

TEST(LossTest, CrossEntropyFiniteDifference) {
    Rng rng(19);
    auto r = gradcheck([](const std::vector<Tensor>& in) { return ops::cross_entropy(in[0], {1, 0, 3}); },
                       {random_tensor({3, 4}, rng)});
    EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(LossTest, MseOfSelfIsZero) {
    Rng rng(20);
    auto x = random_tensor({4, 3}, rng);
    EXPECT_EQ(ops::mse(x, x).item(), 0.0);
}

TEST(StandardOpsTest, GatherConcatSliceSemantics) {
    auto table = Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6});
    expect_values(ops::gather_rows(table, {2, 0, 2}), {5, 6, 1, 2, 5, 6});
    expect_values(ops::embedding_lookup(table, {1}), {3, 4});
    EXPECT_THROW(ops::gather_rows(table, {3}), BoundsError);
    expect_values(ops::concat({table, table}, 1), {1, 2, 1, 2, 3, 4, 3, 4, 5, 6, 5, 6});
    expect_values(ops::slice(table, 0, 1, 3), {3, 4, 5, 6});
    expect_values(ops::slice(table, 1, 1, 2), {2, 4, 6});
    EXPECT_NEAR(ops::mean(table).item(), 3.5, 1e-15);
    EXPECT_NEAR(ops::sum(table).item(), 21.0, 1e-15);
    expect_values(ops::silu(Tensor::vector({0.0, 1.0})), {0.0, 1.0 / (1.0 + std::exp(-1.0))}, 1e-15);
}

TEST(BackwardTest, SumAndSquareGradients) {
    auto w = Tensor::vector({1, 2});
    w.set_requires_grad();
    {
        Tape tape;
        tape.backward(ops::sum(w));
    }
    EXPECT_EQ(w.grad(), (std::vector<double>{1, 1}));
    w.zero_grad();
    {
        Tape tape;
        tape.backward(ops::sum(ops::square(w)));
    }
    EXPECT_EQ(w.grad(), (std::vector<double>{2, 4}));
}

TEST(BackwardTest, SecondBackwardIsStateError) {
    auto w = Tensor::vector({1, 2});
    w.set_requires_grad();
    Tape tape;
    auto loss = ops::sum(ops::square(w));
    tape.backward(loss);
    EXPECT_THROW(tape.backward(loss), StateError);
    tape.reset();
    EXPECT_NO_THROW(tape.backward(ops::sum(w)));
}

TEST(BackwardTest, NonParticipatingLeafHasZeroGrad) {
    auto used = Tensor::vector({1, 2});
    auto unused = Tensor::vector({3, 4, 5});
    used.set_requires_grad();
    unused.set_requires_grad();
    {
        Tape tape;
        tape.backward(ops::sum(ops::mul(used, used)));
    }
    EXPECT_EQ(unused.grad(), (std::vector<double>{0, 0, 0}));
}

TEST(BackwardTest, NonScalarLossIsRejected) {
    auto w = Tensor::vector({1, 2});
    w.set_requires_grad();
    Tape tape;
    EXPECT_THROW(tape.backward(ops::square(w)), DimensionError);
}

TEST(OptimizerTest, AdamDefaultsAndConvergence) {
    AdamConfig defaults;
    EXPECT_EQ(defaults.beta1, 0.9);
    EXPECT_EQ(defaults.beta2, 0.98);
    ParameterStore store;
    auto w = store.add("w", Tensor::vector({0.0}));
    Adam adam(AdamConfig{0.1});
    for (int i = 0; i < 100; ++i) {
        Tape tape;
        tape.backward(ops::sum(ops::square(ops::add_scalar(w, -3.0))));
        adam.step(store);
        store.zero_grad();
    }
    EXPECT_LT(std::abs(w[0] - 3.0), 0.1);
}

TEST(OptimizerTest, SgdStepMovesAgainstGradient) {
    ParameterStore store;
    auto w = store.add("w", Tensor::vector({1.0, -2.0}));
    {
        Tape tape;
        tape.backward(ops::sum(ops::square(w)));
    }
    sgd_step(store, 0.25);
    expect_values(w, {0.5, -1.0}, 0.0);
}

TEST(ParameterStoreTest, UniqueNamesLexicographicOrder) {
    ParameterStore store;
    store.add_zeros("b.weight", {2});
    store.add_zeros("a.bias", {1});
    store.add_zeros("a.weight", {3});
    EXPECT_THROW(store.add_zeros("a.bias", {1}), ConfigError);
    std::vector<std::string> names;
    for (const auto& [n, _] : store.entries()) names.push_back(n);
    EXPECT_EQ(names, (std::vector<std::string>{"a.bias", "a.weight", "b.weight"}));
}

TEST(DeterminismTest, SameSeedSameOpsSameBits) {
    auto run = [] {
        Rng rng(99);
        auto a = random_tensor({4, 6}, rng), b = random_tensor({6, 3}, rng);
        return ops::softmax(ops::rmsnorm(ops::matmul(a, b), Tensor::ones({3})), 1);
    };
    vt::expect_equal_bits(run(), run());
}

TEST(CheckpointTest, RoundTripIsExactAtF32) {
    Rng rng(21);
    ParameterStore store;
    store.add("layer.w", random_tensor({3, 4}, rng));
    store.add("layer.b", random_tensor({4}, rng));
    store.add("book", random_tensor({2, 2, 2}, rng), false);
    store.round_to_f32();
    const auto dir = vt::scratch_dir("ckpt");
    const auto path = (dir / "a.vbnd").string();
    checkpoint::save(path, store);

    ParameterStore other;
    other.add_zeros("layer.w", {3, 4});
    other.add_zeros("layer.b", {4});
    other.add("book", Tensor::zeros({2, 2, 2}), false);
    checkpoint::load_into(path, other);
    for (const auto& [name, e] : store.entries()) vt::expect_equal_bits(other.get(name), e.tensor);
}

TEST(CheckpointTest, ByteLayout) {
    std::vector<checkpoint::NamedTensor> ts{{"ab", Tensor({1, 2}, {1.0, -2.0})}};
    const auto bytes = checkpoint::encode(ts);
    // magic, version 1, count 1, name len 2, "ab", rank 2, extents 1 and 2, two f32 values
    const std::vector<std::uint8_t> head = {'V', 'B', 'N', 'D', 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 'a', 'b', 2,
                                            1,   0,   0,   0,   2, 0, 0, 0};
    ASSERT_EQ(bytes.size(), head.size() + 8);
    EXPECT_TRUE(std::equal(head.begin(), head.end(), bytes.begin()));
    const float one = 1.0f;
    std::uint8_t raw[4];
    std::memcpy(raw, &one, 4);
    EXPECT_TRUE(std::equal(raw, raw + 4, bytes.begin() + static_cast<long>(head.size())));
}

TEST(CheckpointTest, CorruptInputsAreDataErrors) {
    std::vector<checkpoint::NamedTensor> ts{{"x", Tensor::vector({1, 2, 3})}};
    auto bytes = checkpoint::encode(ts);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(checkpoint::decode(bad_magic), DataError);
    auto truncated = bytes;
    truncated.pop_back();
    EXPECT_THROW(checkpoint::decode(truncated), DataError);
    auto trailing = bytes;
    trailing.push_back(0);
    EXPECT_THROW(checkpoint::decode(trailing), DataError);
}

TEST(CheckpointTest, LoadRejectsShapeAndNameMismatch) {
    const auto dir = vt::scratch_dir("ckpt");
    const auto path = (dir / "x.vbnd").string();
    ParameterStore a;
    a.add_zeros("w", {2, 2});
    checkpoint::save(path, a);
    ParameterStore wrong_shape;
    wrong_shape.add_zeros("w", {4});
    EXPECT_THROW(checkpoint::load_into(path, wrong_shape), DimensionError);
    ParameterStore wrong_name;
    wrong_name.add_zeros("v", {2, 2});
    EXPECT_THROW(checkpoint::load_into(path, wrong_name), DataError);
}
