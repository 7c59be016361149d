#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "pibnas/blocks.hpp"
#include "pibnas/cost_model.hpp"

using namespace pibnas;

namespace {

BlockConfig cfg(int c, int k, int stride, double f = 2.0) {
  BlockConfig b;
  b.channels = c;
  b.kernel = k;
  b.stride = stride;
  b.ratio = f;
  return b;
}

}  // namespace

TEST_SUITE("blocks") {
  TEST_CASE("weight counts of the reference configurations") {
    Rng rng(1);
    // two (dw 3x3 + pw 16x16) stacks
    CHECK(make_sep_conv(cfg(16, 3, 1), rng).count_weights().conv() == 800);
    CHECK(make_convnext_block(cfg(16, 7, 1, 4.0), rng).count_weights().conv() == 2832);
    CHECK(make_pib_conv(cfg(16, 7, 1), rng).count_weights().conv() == 2336);
    CHECK(make_pib_conv(cfg(16, 3, 1), rng).count_weights().conv() == 1056);
    CHECK(make_pib_conv(cfg(16, 3, 1), rng).count_weights().norm() == 64);
    BlockConfig dense = cfg(16, 3, 1);
    dense.grouped_reduce = false;
    // dense reduce: 2FC^2 + 2K^2C
    CHECK(make_pib_conv(dense, rng).count_weights().conv() == 2 * 2 * 256 + 2 * 9 * 16);
  }

  TEST_CASE("closed forms match built blocks on the whole grid") {
    const auto rows = eq_grid_check();
    CHECK(rows.size() == 60);
    for (const auto& r : rows) {
      CAPTURE(r.c);
      CAPTURE(r.k);
      CAPTURE(r.f);
      CHECK(r.ok());
      CHECK(r.eq1 == testing::eq1_oracle(r.c, r.k, r.f));
      CHECK(r.eq2 == testing::eq2_oracle(r.c, r.k, r.f));
    }
  }

  TEST_CASE("fractional ratio blocks count like the grouped form") {
    Rng rng(2);
    for (int c : {8, 16, 32}) {
      for (double f : {1.5, 4.5}) {
        const Block b = make_pib_conv(cfg(c, 5, 1, f), rng);
        CHECK(b.count_weights().conv() == testing::eq2_oracle(c, 5, f));
      }
    }
  }

  TEST_CASE("window conv with group-aligned windows equals a grouped conv") {
    PrecisionScope p(Precision::f64);
    const int C = 6;
    const Tensor x = testing::random_leaf(Shape{2, 2 * C, 3, 3}, 4);
    const Tensor w = testing::random_leaf(Shape{C, C}, 5);
    const auto starts = window_starts(2 * C, C, C);
    for (int j = 0; j < C; ++j) CHECK(starts[static_cast<std::size_t>(j)] == (j < C / 2 ? 0 : C));
    const Tensor a = window_conv1x1(x, w, starts);
    const Tensor b = conv2d(x, reshape(w, Shape{C, C, 1, 1}), Tensor(), Conv2dOptions::square(1, 0, 1, 2));
    REQUIRE(a.shape() == b.shape());
    for (std::size_t i = 0; i < a.data().size(); ++i) CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-13));
  }

  TEST_CASE("window starts stay in range and are monotone") {
    for (int cin : {9, 12, 18, 36}) {
      for (int cout : {4, 6, 8}) {
        if (cout > cin) continue;
        const auto s = window_starts(cin, cout, cout);
        for (std::size_t j = 0; j < s.size(); ++j) {
          CHECK(s[j] >= 0);
          CHECK(s[j] + cout <= cin);
          if (j > 0) CHECK(s[j] >= s[j - 1]);
        }
      }
    }
    CHECK_THROWS(window_starts(4, 2, 5));
  }

  TEST_CASE("every kind keeps channels and applies the stride") {
    Rng rng(3);
    const Tensor x = testing::random_leaf(Shape{2, 8, 8, 8}, 6);
    for (OpKind op : all_ops()) {
      for (int stride : {1, 2}) {
        CAPTURE(op_name(op));
        CAPTURE(stride);
        Block b = make_block(op, cfg(8, 3, stride), rng);
        const Tensor y = b.forward(x, Mode::train);
        CHECK(y.shape() == Shape{2, 8, 8 / stride, 8 / stride});
        CHECK(b.out_channels() == 8);
      }
    }
  }

  TEST_CASE("none gives zeros and stride-1 skip is the identity") {
    Rng rng(4);
    const Tensor x = testing::random_leaf(Shape{1, 4, 6, 6}, 7);
    Block z = make_block(OpKind::none, cfg(4, 3, 2), rng);
    const Tensor zy = z.forward(x, Mode::train);
    CHECK(zy.shape() == Shape{1, 4, 3, 3});
    for (Real v : zy.data()) CHECK(v == 0.0);
    CHECK(z.count_weights().total() == 0);

    Block s = make_block(OpKind::skip_connect, cfg(4, 3, 1), rng);
    CHECK(s.is_identity());
    const Tensor sy = s.forward(x, Mode::train);
    for (std::size_t i = 0; i < x.data().size(); ++i) CHECK(sy.data()[i] == x.data()[i]);
    CHECK(s.count_weights().total() == 0);

    Block pool = make_block(OpKind::max_pool_3x3, cfg(4, 3, 1), rng);
    CHECK(pool.count_weights().conv() == 0);
  }

  TEST_CASE("dilated 3x3 reaches a 5x5 footprint") {
    std::vector<Real> spike(81, 0.0);
    spike[40] = 1.0;
    const Tensor y = conv2d(Tensor::from(Shape{1, 1, 9, 9}, spike), Tensor::full(Shape{1, 1, 3, 3}, 1.0), Tensor(),
                            Conv2dOptions::square(1, 2, 2));
    int nonzero = 0;
    for (int r = 0; r < 9; ++r) {
      for (int c = 0; c < 9; ++c) {
        if (y.at(0, 0, r, c) == 0.0) continue;
        ++nonzero;
        CHECK(std::abs(r - 4) <= 2);
        CHECK(std::abs(c - 4) <= 2);
        CHECK((r - 4) % 2 == 0);
        CHECK((c - 4) % 2 == 0);
      }
    }
    CHECK(nonzero == 9);
  }

  TEST_CASE("factorized reduce and preprocessing counts") {
    Rng rng(5);
    const BlockConfig c = cfg(8, 3, 2);
    const Block fr = make_factorized_reduce(4, 6, c, rng);
    CHECK(fr.count_weights().conv() == 4 * 3 * 2);
    CHECK(fr.count_weights().norm() == 2 * 6);
    const Block acn = make_act_conv_norm(5, 7, c, rng);
    CHECK(acn.count_weights().conv() == 35);
    CHECK(acn.count_weights().norm() == 14);
    CHECK_THROWS(make_factorized_reduce(4, 5, c, rng));
  }

  TEST_CASE("activation and norm choice do not change the weight count") {
    Rng rng(6);
    const auto base = make_pib_conv(cfg(16, 5, 1), rng).count_weights();
    for (Activation a : {Activation::gelu, Activation::relu}) {
      for (NormKind n : {NormKind::batch, NormKind::layer}) {
        BlockConfig b = cfg(16, 5, 1);
        b.activation = a;
        b.norm = n;
        const auto w = make_pib_conv(b, rng).count_weights();
        CHECK(w.conv() == base.conv());
        CHECK(w.total() == base.total());
      }
    }
    BlockConfig search = cfg(16, 5, 1);
    search.affine = false;
    CHECK(make_pib_conv(search, rng).count_weights().norm() == 0);
  }

  TEST_CASE("eval forward is pure") {
    Rng rng(7);
    Block b = make_block(OpKind::pib_conv_3x3, cfg(4, 3, 1), rng);
    const Tensor x = testing::random_leaf(Shape{2, 4, 5, 5}, 8);
    b.forward(x, Mode::train);
    NamedTensors buffers;
    b.collect("b", nullptr, &buffers);
    std::vector<Real> before;
    for (auto& [n, t] : buffers) before.insert(before.end(), t.data().begin(), t.data().end());
    const Tensor y1 = b.forward(x, Mode::eval);
    const Tensor y2 = b.forward(x, Mode::eval);
    std::vector<Real> after;
    for (auto& [n, t] : buffers) after.insert(after.end(), t.data().begin(), t.data().end());
    CHECK(before == after);
    for (std::size_t i = 0; i < y1.data().size(); ++i) CHECK(y1.data()[i] == y2.data()[i]);
  }

  TEST_CASE("invalid configurations are rejected") {
    Rng rng(8);
    CHECK_THROWS(make_pib_conv(cfg(16, 4, 1), rng));
    CHECK_THROWS(make_pib_conv(cfg(16, 3, 3), rng));
    CHECK_THROWS(make_pib_conv(cfg(5, 3, 1, 1.5), rng));  // 7.5 channels
    CHECK_THROWS(make_pib_conv(cfg(8, 3, 1, 0.5), rng));
  }
}
