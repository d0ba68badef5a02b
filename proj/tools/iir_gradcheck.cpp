// Prints one line per block: "<rel_error> <entries> <name> [<worst tensor>] min |grad| <g>".
// Exit 1 if any block exceeds the tolerance.
// With --algebra, prints "vp <e> round_trip <e> ok_to <t> compose <e>" for the diffusion algebra instead.
#include <cstdio>
#include <cstring>

#include "algebra.hpp"
#include "gradcheck.hpp"

int main(int argc, char** argv) {
  if (argc > 1 && std::strcmp(argv[1], "--algebra") == 0) {
    const auto e = iir::algebra::measure();
    std::printf("vp %.3e round_trip %.3e ok_to %d compose %.3e\n", e.vp, e.round_trip, e.round_trip_ok_to, e.compose);
    return 0;
  }
  constexpr double kTolerance = 1e-4;
  int failed = 0;
  for (const auto& r : iir::gradcheck::check_all_blocks()) {
    std::printf("%.3e %d %s [%s] min |grad| %.1e\n", r.rel_error, r.entries, r.name.c_str(), r.worst_tensor.c_str(), r.min_scale);
    if (!(r.rel_error < kTolerance) || r.entries == 0) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
