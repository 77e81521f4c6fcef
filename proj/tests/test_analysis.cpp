#include "doctest.h"

#include <cmath>
#include <numeric>

#include "vig/analysis.hpp"

using namespace vig;

TEST_CASE("count_params sums element counts exactly") {
  // a bias-free FC layer contributes in*out parameters
  Rng rng(1);
  LinearLayer fc = LinearLayer::make("fc", 7, 5, rng, DType::Float32);
  int64_t n = 0;
  fc.visit_params([&](const std::string&, Tensor& t) { n += t.numel(); });
  CHECK(n == 35);

  Model m = build_model(preset_config("micro"));
  int64_t total = 0;
  m.visit_params([&](const std::string&, Tensor& t) { total += t.numel(); });
  CHECK(count_params(m) == total);
  CHECK(compute_stats(m).param_count == total);
}

TEST_CASE("analytic macs: one FC on N nodes costs N*Din*Dout") {
  // stem of the micro model: 9 patches, 4*4*3=48 inputs, 8 outputs
  Model m = build_model(preset_config("micro"));
  auto st = compute_stats(m);
  REQUIRE(st.layers.front().name == "stem");
  CHECK(st.layers.front().macs == 9 * 48 * 8);
  // head: pooled vector through D->hidden->classes
  CHECK(st.layers.back().name == "head");
  CHECK(st.layers.back().macs == 8 * 16 + 16 * 4);
}

TEST_CASE("feature diversity") {
  SUBCASE("identical rows have zero diversity") {
    Tensor x = Tensor::from_values({4, 3}, {1, 2, 3, 1, 2, 3, 1, 2, 3, 1, 2, 3},
                                   DType::Float64);
    CHECK(feature_diversity(x) == doctest::Approx(0.0));
  }
  SUBCASE("hand-computed two-row case gives sqrt(2)") {
    Tensor x = Tensor::from_values({2, 1}, {1, -1}, DType::Float64);
    CHECK(feature_diversity(x) == doctest::Approx(std::sqrt(2.0)));
  }
  SUBCASE("absolute homogeneity") {
    Rng rng(3);
    Tensor x = Tensor::randn({7, 5}, rng, 1.0, DType::Float64);
    const double g1 = feature_diversity(x);
    for (double c : {2.0, -3.5, 0.25}) {
      Tensor cx = Tensor::zeros({7, 5}, DType::Float64);
      for (int64_t i = 0; i < x.numel(); ++i) cx.set(i, c * x.at(i));
      CHECK(feature_diversity(cx) == doctest::Approx(std::abs(c) * g1).epsilon(1e-10));
    }
  }
  SUBCASE("row-permutation invariance") {
    Rng rng(5);
    Tensor x = Tensor::randn({8, 4}, rng, 1.0, DType::Float64);
    std::vector<int> perm(8);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor xp = Tensor::zeros({8, 4}, DType::Float64);
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 4; ++j)
        xp.set(int64_t(perm[static_cast<size_t>(i)]) * 4 + j, x.at2(i, j));
    // equal up to summation-order rounding in the column statistics
    CHECK(feature_diversity(xp) == doctest::Approx(feature_diversity(x)).epsilon(1e-12));
  }
}

TEST_CASE("diversity profiles") {
  SUBCASE("a depth-1 stack yields a single entry equal to gamma of its output") {
    StackConfig cfg{"bare_conv", 8, 16, 3};
    auto p = probe_stack_diversity(cfg, 1, 42);
    REQUIRE(p.entries.size() == 1);
    CHECK(p.entries[0].first == 1);
    CHECK(p.entries[0].second >= 0.0);
  }
  SUBCASE("identity blocks give a constant profile") {
    ModelConfig cfg = preset_config("micro");
    Model m = build_model(cfg);
    // zero every branch weight: each block becomes the identity
    m.visit_params([](const std::string& name, Tensor& t) {
      const bool branch_weight = name.find("weight") != std::string::npos &&
                                 name.find("head.") == std::string::npos &&
                                 name.find("stem") == std::string::npos;
      if (branch_weight)
        with_dtype(t.dtype(), [&]<typename T>() {
          for (T& v : t.data<T>()) v = T(0);
        });
    });
    Rng rng(7);
    Tensor img = Tensor::rand_uniform({1, 12, 12, 3}, rng, -1.0, 1.0);
    auto prof = diversity_profile(m, img);
    REQUIRE(prof.entries.size() == 2);
    CHECK(prof.entries[0].second == doctest::Approx(prof.entries[1].second));
  }
  SUBCASE("csv serialization") {
    StackConfig cfg{"bare_conv", 8, 16, 3};
    auto p = probe_stack_diversity(cfg, 2, 1);
    const std::string csv = p.to_csv();
    CHECK(csv.rfind("layer,gamma\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  }
}

TEST_CASE("bare conv stacks lose diversity faster than vig stacks") {
  StackConfig vig_cfg{"vig", 32, 49, 5}, bare_cfg{"bare_conv", 32, 49, 5};
  auto pv = probe_stack_diversity(vig_cfg, 6, 123);
  auto pb = probe_stack_diversity(bare_cfg, 6, 123);
  const double rv = pv.entries.back().second / pv.entries.front().second;
  const double rb = pb.entries.back().second / pb.entries.front().second;
  CHECK(rb < rv);
}

TEST_CASE("ffn lipschitz bound") {
  Rng rng(11);

  SUBCASE("zero weights give exactly 1") {
    Ffn f = Ffn::make("f", 4, 16, 0.0, rng, DType::Float64);
    with_dtype(DType::Float64, [&]<typename T>() {
      for (T& v : f.fc1.w.value.data<T>()) v = T(0);
      for (T& v : f.fc2.w.value.data<T>()) v = T(0);
    });
    CHECK(ffn_lipschitz_bound(f, false) == doctest::Approx(1.0));
  }

  SUBCASE("identity-like weights give 1 + L_gelu") {
    Ffn f = Ffn::make("f", 4, 16, 0.0, rng, DType::Float64);
    with_dtype(DType::Float64, [&]<typename T>() {
      for (T& v : f.fc1.w.value.data<T>()) v = T(0);
      for (T& v : f.fc2.w.value.data<T>()) v = T(0);
    });
    for (int i = 0; i < 4; ++i) {
      f.fc1.w.value.set(int64_t(i) * 16 + i, 1.0);  // [I 0]
      f.fc2.w.value.set(int64_t(i) * 4 + i, 1.0);   // [I; 0]
    }
    // running var 1 - eps makes the BN fold scale exactly 1
    with_dtype(DType::Float64, [&]<typename T>() {
      for (T& v : f.bn1.state.running_var.data<T>()) v = T(1.0 - kBnEps);
      for (T& v : f.bn2.state.running_var.data<T>()) v = T(1.0 - kBnEps);
    });
    CHECK(ffn_lipschitz_bound(f, false) ==
          doctest::Approx(1.0 + gelu_max_derivative()).epsilon(1e-9));
  }

  SUBCASE("train mode is a contract violation") {
    Ffn f = Ffn::make("f", 4, 16, 0.0, rng, DType::Float64);
    CHECK_THROWS_AS(ffn_lipschitz_bound(f, true), ContractError);
  }

  SUBCASE("bound dominates observed diversity ratios") {
    for (int trial = 0; trial < 20; ++trial) {
      const int d = trial % 2 ? 8 : 16;
      Ffn f = Ffn::make("t", d, 4 * d, 0.0, rng, DType::Float64);
      f.bn1.state.running_var =
          Tensor::rand_uniform({4 * d}, rng, 0.5, 2.0, DType::Float64);
      f.bn2.state.running_var = Tensor::rand_uniform({d}, rng, 0.5, 2.0, DType::Float64);
      const double lam = ffn_lipschitz_bound(f, false);
      Tensor x = Tensor::randn({12, d}, rng, 1.0, DType::Float64);
      Ctx ctx;
      Tensor y = f.forward(ctx, x, 1);
      CHECK(feature_diversity(y) <= lam * feature_diversity(x) + 1e-9);
    }
  }
}

TEST_CASE("count_macs validates the resolution") {
  Model m = build_model(preset_config("micro"));
  CHECK(count_macs(m, 12, 12) == compute_stats(m).mac_count);
  CHECK_THROWS_AS(count_macs(m, 224, 224), ConfigError);
}
