#pragma once

#include <filesystem>
#include <string>

#include "iir/app.hpp"

namespace iir::testing {

// A denoiser small enough for per-test construction and sampling.
NetConfig micro_net();
// Micro run: tiny nets, a few steps per phase, 16-step schedule grid.
RunConfig micro_config(const std::filesystem::path& out_dir);
// Pipeline with adapter and aggregator attached, weights randomized so the
// zero-initialized layers do not make every path trivial.
Pipeline micro_pipeline(std::uint64_t seed = 3);
// Fresh directory under the system temp dir.
std::filesystem::path scratch_dir(const std::string& name);
// Sum of squared differences.
double sq_dist(const Tensor& a, const Tensor& b);
bool bit_equal(const Tensor& a, const Tensor& b);
void randomize(const nn::ParamList& params, Rng& rng, double stddev);

}  // namespace iir::testing
