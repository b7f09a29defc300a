#include <cmath>

#include "../support/grad_check.hpp"
#include "../support/naive_attention.hpp"
#include "doctest.h"
#include "kpop/cross_attention.hpp"
#include "kpop/error.hpp"
#include "kpop/ops.hpp"

using namespace kpop;
using namespace kpop::attn;
using nn::Tensor;
using kpop::testing::naive_attention;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

struct Fixture {
  Rng rng{42};
  CrossAttentionLayer layer = CrossAttentionLayer::create(6, 5, 8, 2, Site::mid, rng);
  Tensor z = Tensor::randn({3, 4, 6}, rng);
  Tensor c = Tensor::randn({1, 3, 5}, rng);
};

}  // namespace

TEST_SUITE("cross_attention") {
  TEST_CASE("matches a dense loop oracle") {
    Fixture f;
    auto out = attend_original(f.z, f.c, f.layer).out;
    auto ref = naive_attention(f.z, f.c, f.layer);
    REQUIRE(out.numel() == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(out.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12).scale(1.0));
  }

  TEST_CASE("a single context token yields its value for every query") {
    Rng rng(3);
    auto layer = CrossAttentionLayer::create(4, 4, 4, 1, Site::mid, rng);
    auto z = Tensor::randn({2, 5, 4}, rng);
    auto c = Tensor::randn({1, 1, 4}, rng);
    auto out = attend_original(z, c, layer).out;
    auto expected = nn::linear(nn::linear(c, layer.w_v()), layer.w_o());
    for (std::int64_t n = 0; n < 2; ++n)
      for (std::int64_t i = 0; i < 5; ++i)
        for (std::int64_t j = 0; j < 4; ++j) CHECK(std::abs(out.at({n, i, j}) - expected.at({0, 0, j})) < 1e-12);
  }

  TEST_CASE("duplicating the context leaves the output unchanged") {
    Fixture f;
    auto base = attend_original(f.z, f.c, f.layer).out;
    auto twice = attend_original(f.z, nn::concat({f.c, f.c}, 1), f.layer).out;
    CHECK(max_abs_diff(base, twice) < 1e-12);
  }

  TEST_CASE("concat with a copy of the context equals the original") {
    Fixture f;
    Prompt p{f.c.clone(), 1, Mechanism::concat};
    auto res = attend_concat(f.z, f.c, p, f.layer, true);
    CHECK(max_abs_diff(res.out, attend_original(f.z, f.c, f.layer).out) < 1e-9);
    REQUIRE(res.trace);
    CHECK(res.trace->scores.shape() == nn::Shape{3, 2, 4, 6});
  }

  TEST_CASE("trace width is m_c + k m_c and rows sum to one") {
    Fixture f;
    Rng rng(7);
    Prompt p{Tensor::randn({1, 3 * 4, 5}, rng), 4, Mechanism::concat};
    CHECK_NOTHROW(p.validate(3, 5));
    auto res = attend(f.z, f.c, &p, f.layer, true);
    REQUIRE(res.trace);
    const auto& s = res.trace->scores;
    CHECK(s.shape() == nn::Shape{3, 2, 4, 15});
    for (std::size_t r = 0; r < s.numel() / 15; ++r) {
      double acc = 0;
      for (std::size_t j = 0; j < 15; ++j) acc += s.data()[r * 15 + j];
      CHECK(std::abs(acc - 1.0) < 1e-12);
    }
  }

  TEST_CASE("concat output splits into context and prompt parts by attention mass") {
    Rng rng(11);
    auto layer = CrossAttentionLayer::create(4, 3, 6, 1, Site::mid, rng);
    auto z = Tensor::randn({2, 5, 4}, rng);
    auto c = Tensor::randn({1, 2, 3}, rng);
    Prompt p{Tensor::randn({1, 4, 3}, rng), 2, Mechanism::concat};
    auto full = attend_concat(z, c, p, layer, true);
    auto from_c = attend_original(z, c, layer).out;
    auto from_p = attend_original(z, p.values, layer).out;
    const auto& s = full.trace->scores;
    for (std::int64_t n = 0; n < 2; ++n)
      for (std::int64_t i = 0; i < 5; ++i) {
        double wc = 0;
        for (std::int64_t r = 0; r < 2; ++r) wc += s.at({n, 0, i, r});
        for (std::int64_t j = 0; j < 4; ++j) {
          const double mixed = wc * from_c.at({n, i, j}) + (1 - wc) * from_p.at({n, i, j});
          CHECK(std::abs(full.out.at({n, i, j}) - mixed) < 1e-12);
        }
      }
  }

  TEST_CASE("additive prompt of zeros is exact, otherwise equals shifted context") {
    Fixture f;
    Prompt zero{Tensor::zeros({1, 3, 5}), 1, Mechanism::additive};
    auto base = attend_original(f.z, f.c, f.layer).out;
    auto same = attend_additive(f.z, f.c, zero, f.layer).out;
    CHECK(std::equal(base.data().begin(), base.data().end(), same.data().begin()));
    Rng rng(5);
    Prompt p{Tensor::randn({1, 3, 5}, rng), 1, Mechanism::additive};
    auto a = attend_additive(f.z, f.c, p, f.layer).out;
    auto b = attend_original(f.z, nn::add(f.c, p.values), f.layer).out;
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  }

  TEST_CASE("gradient with respect to the prompt matches finite differences") {
    Fixture f;
    Rng rng(13);
    Prompt p{Tensor::randn({1, 6, 5}, rng, 1.0, true), 2, Mechanism::concat};
    auto loss_value = [&] {
      nn::NoGradGuard g;
      return nn::sum_squares(attend_concat(f.z, f.c, p, f.layer).out).item();
    };
    {
      nn::Tape tape;
      tape.backward(nn::sum_squares(attend_concat(f.z, f.c, p, f.layer).out));
    }
    auto params = f.layer.parameters();
    params.push_back(p.values);
    auto r = testing::finite_difference_check(loss_value, params);
    CHECK(r.pass_fraction() == 1.0);
  }

  TEST_CASE("errors name the offending shapes") {
    Fixture f;
    CHECK_THROWS_AS(attend_original(f.z, Tensor::zeros({1, 3, 4}), f.layer), DimensionError);
    CHECK_THROWS_AS(attend_original(Tensor::zeros({3, 4, 5}), f.c, f.layer), DimensionError);
    Prompt wrong_rows{Tensor::zeros({1, 2, 5}), 1, Mechanism::additive};
    CHECK_THROWS_AS(attend_additive(f.z, f.c, wrong_rows, f.layer), DimensionError);
    Prompt p{Tensor::zeros({1, 5, 5}), 2, Mechanism::concat};
    CHECK_THROWS_AS(p.validate(3, 5), DimensionError);
    Prompt additive_k{Tensor::zeros({1, 6, 5}), 2, Mechanism::additive};
    CHECK_THROWS_AS(additive_k.validate(3, 5), ConfigError);
    CHECK_THROWS_AS(CrossAttentionLayer::create(4, 4, 6, 4, Site::mid, f.rng), ConfigError);
    CHECK_THROWS_AS(parse_mechanism("mul"), ConfigError);
  }

  TEST_CASE("site lists parse in both spellings") {
    CHECK(SiteSet::parse("mid") == SiteSet::mid_only());
    CHECK(SiteSet::parse("down-mid-up") == SiteSet::all());
    CHECK(SiteSet::parse("down,up").to_string() == "down-up");
    CHECK_THROWS_AS(SiteSet::parse("mid-"), ConfigError);
    CHECK_THROWS_AS(SiteSet::parse("left"), ConfigError);
  }

  TEST_CASE("tile repeats the encoding k times") {
    Rng rng(2);
    auto e = Tensor::randn({1, 2, 3}, rng);
    auto t = Prompt::tile(e, 3);
    CHECK(t.shape() == nn::Shape{1, 6, 3});
    for (std::int64_t r = 0; r < 6; ++r)
      for (std::int64_t j = 0; j < 3; ++j) CHECK(t.at({0, r, j}) == e.at({0, r % 2, j}));
  }
}
