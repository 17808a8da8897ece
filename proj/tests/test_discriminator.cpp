#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <random>

#include "dualharm/discriminator.hpp"
#include "support_gradcheck.hpp"

using namespace dualharm;
using namespace dualharm::disc;

namespace {

DiscriminatorConfig small(int n, bool freq = true) {
  DiscriminatorConfig c;
  c.n = n;
  c.width = 1.0 / 8;
  c.use_freq_branch = freq;
  c.seed = 21;
  return c;
}

}  // namespace

TEST_CASE("spatial branch shapes follow the stride arithmetic", "[discriminator]") {
  std::mt19937_64 rng(1);
  {
    Discriminator<float> d(small(4));
    auto sp = d.spatial_branch(constant(random_uniform<float>(Shape{1, 3, 256, 256}, rng, 0, 1)), true);
    CHECK(sp.bottleneck->shape() == Shape{1, 64, 4, 4});
    CHECK(sp.tapped->shape() == Shape{1, 32, 32, 32});
  }
  {
    Discriminator<float> d(small(2));
    auto sp = d.spatial_branch(constant(random_uniform<float>(Shape{2, 3, 128, 128}, rng, 0, 1)), true);
    CHECK(sp.bottleneck->shape() == Shape{2, 64, 2, 2});
    CHECK(sp.tapped->shape() == Shape{2, 32, 16, 16});
  }
}

TEST_CASE("discriminator rejects the wrong input size", "[discriminator]") {
  Discriminator<float> d(small(2));
  CHECK_THROWS_WITH(d(constant(Tensor<float>(Shape{1, 3, 256, 256})), false), Catch::Matchers::ContainsSubstring("64*n"));
  CHECK_THROWS(Discriminator<float>(small(3)));
}

TEST_CASE("split_patches tiles and reassembles exactly", "[discriminator]") {
  std::mt19937_64 rng(2);
  auto map = random_normal<double>(Shape{1, 3, 32, 32}, rng);
  auto grid = split_patches(map, 4);
  REQUIRE(grid.size() == 16);
  for (auto& p : grid) CHECK(p.shape() == Shape{1, 3, 8, 8});
  // Patch (1, 2) covers rows [8, 16) and columns [16, 24).
  CHECK(grid[1 * 4 + 2](0, 1, 3, 5) == map(0, 1, 8 + 3, 16 + 5));
  CHECK(reassemble_patches(grid, 4) == map);

  auto single = split_patches(map, 1);
  REQUIRE(single.size() == 1);
  CHECK(single[0] == map);
  CHECK_THROWS_AS(split_patches(Tensor<double>(Shape{1, 3, 30, 30}), 4), ShapeError);
}

TEST_CASE("assemble_freq_map placement, permutation and errors", "[discriminator]") {
  std::mt19937_64 rng(3);
  std::vector<Tensor<double>> cells;
  for (int k = 0; k < 16; ++k) cells.push_back(random_normal<double>(Shape{1, 5, 1, 1}, rng));
  auto map = assemble_freq_map(cells, 4);
  CHECK(map.shape() == Shape{1, 5, 4, 4});
  CHECK(map(0, 2, 3, 1) == cells[3 * 4 + 1][2]);

  auto swapped = cells;
  std::swap(swapped[1], swapped[6]);
  auto map2 = assemble_freq_map(swapped, 4);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      for (int c = 0; c < 5; ++c) {
        const int k = i * 4 + j;
        const int src = k == 1 ? 6 : (k == 6 ? 1 : k);
        REQUIRE(map2(0, c, i, j) == cells[src][c]);
      }

  std::vector<Tensor<double>> zeros(16, Tensor<double>(Shape{1, 5, 1, 1}));
  auto z = assemble_freq_map(zeros, 4);
  CHECK(z.sum() == 0.0);

  auto missing = cells;
  missing[7] = Tensor<double>();
  CHECK_THROWS_WITH(assemble_freq_map(missing, 4), Catch::Matchers::ContainsSubstring("missing cell (1, 3)"));
}

TEST_CASE("freq descriptor shapes and constant patches", "[discriminator]") {
  Discriminator<double> d(small(4));
  std::mt19937_64 rng(4);
  auto patches = constant(random_normal<double>(Shape{3, 32, 8, 8}, rng));
  auto desc = d.freq_descriptor(patches, false);
  CHECK(desc->shape() == Shape{3, d.descriptor_channels(), 1, 1});

  Tensor<double> consts(Shape{2, 32, 8, 8}, 0.7);
  auto dc = d.freq_descriptor(constant(consts), false)->value;
  for (int c = 0; c < d.descriptor_channels(); ++c) CHECK(dc(0, c, 0, 0) == dc(1, c, 0, 0));
  CHECK_THROWS_AS(d.freq_descriptor(constant(Tensor<double>(Shape{1, 32, 12, 12})), false), ShapeError);
}

TEST_CASE("discriminate output is n x n for every supported n", "[discriminator]") {
  std::mt19937_64 rng(5);
  for (int n : {2, 4, 8}) {
    Discriminator<float> d(small(n));
    auto img = constant(random_uniform<float>(Shape{2, 3, 64 * n, 64 * n}, rng, 0, 1));
    auto out = d(img, true);
    CHECK(out->shape() == Shape{2, 1, n, n});
    CHECK(out->value.all_finite());
  }
}

TEST_CASE("evaluation mode is deterministic and leaves running stats alone", "[discriminator]") {
  Discriminator<float> d(small(2));
  std::mt19937_64 rng(6);
  auto img = constant(random_uniform<float>(Shape{2, 3, 128, 128}, rng, 0, 1));
  d(img, true);  // populate running statistics
  Tensor<float> before = *d.params().buffers[0].tensor;
  auto a = d(img, false)->value;
  auto b = d(img, false)->value;
  CHECK(a == b);
  CHECK(*d.params().buffers[0].tensor == before);
}

TEST_CASE("ablated frequency branch changes the head input only", "[discriminator]") {
  Discriminator<float> full(small(2, true)), spatial_only(small(2, false));
  CHECK(spatial_only.params().params.size() < full.params().params.size());
  auto out = spatial_only(constant(Tensor<float>(Shape{1, 3, 128, 128}, 0.4f)), false);
  CHECK(out->shape() == Shape{1, 1, 2, 2});
}

TEST_CASE("gradient check: D_s, D_f and D_a", "[discriminator][gradcheck]") {
  Discriminator<double> d(small(2));
  std::mt19937_64 rng(7);
  auto img = leaf(random_uniform<double>(Shape{2, 3, 128, 128}, rng, 0, 1), true);
  auto target = random_normal<double>(Shape{2, 1, 2, 2}, rng);
  auto loss = [&] { return squared_distance(d(img, true), constant(target)); };
  for (auto [name, group] : {std::pair{"D_s", d.spatial_params()}, std::pair{"D_f", d.freq_params()}, std::pair{"D_a", d.head_params()}}) {
    std::vector<std::pair<std::string, Var<double>>> vars;
    for (auto& p : group.params) vars.push_back({p.name, p.var});
    auto r = testing::grad_check(loss, vars, 3, 9, 1e-6);
    INFO(name << ": " << r.worst);
    CHECK(r.max_rel_error < 1e-3);
  }
  auto r = testing::grad_check(loss, {{"image", img}}, 20, 10, 1e-5);
  INFO(r.worst);
  CHECK(r.max_rel_error < 1e-3);
}
