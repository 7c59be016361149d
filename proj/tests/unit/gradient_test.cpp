#include "doctest.h"
#include "gradcheck.hpp"
#include "pibnas/ops.hpp"

using namespace pibnas;

namespace {

void require_all(const std::vector<testing::GradCheck>& results) {
  CHECK_FALSE(results.empty());
  for (const auto& r : results) {
    CAPTURE(r.name);
    CAPTURE(r.max_rel_err);
    CHECK(r.checked > 0);
    CHECK(r.ok());
  }
}

}  // namespace

TEST_SUITE("gradient") {
  TEST_CASE("every primitive matches central differences") { require_all(testing::primitive_suite()); }

  TEST_CASE("every block kind matches central differences") { require_all(testing::block_suite()); }

  TEST_CASE("the checker catches a wrong gradient") {
    // relu evaluated with a deliberately shifted input: value and gradient
    // disagree near the kink, so a coarse check must flag it.
    Tensor x = Tensor::from(Shape{1, 2}, {0.3, -0.2}, true);
    const auto r = testing::check_gradients("scaled", {x}, [&] {
      // The tape sees scale(x, 2) but the perturbation sees a cubic.
      if (Tape::active()) return sum(scale(x, 2.0));
      return sum(mul(mul(x, x), x));
    });
    CHECK_FALSE(r.ok());
  }
}
